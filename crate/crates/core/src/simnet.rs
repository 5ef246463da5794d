//! Deterministic discrete-event model of the onion transport.
//!
//! Services register under their label and are reachable only while their
//! owner is online. A connection attempt is resolved synchronously at send
//! time: either a delivery event is scheduled `latency` units later, or the
//! sender learns immediately that the service is unreachable. Events run in
//! `(time, sequence)` order so a run is a pure function of its inputs.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::identity::{Label, MailAddress};
use crate::SimTime;

pub type NodeId = usize;

pub const DEFAULT_LATENCY: SimTime = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("label {0} is already registered; only one service per key may be active")]
    DoubleRegistration(Label),
    #[error("sender {0} is not a registered service")]
    UnknownSender(Label),
    #[error("sender {label} is offline at t={time}")]
    SenderOffline { label: Label, time: SimTime },
    #[error("online intervals for {0} overlap or are unsorted")]
    OverlappingIntervals(Label),
    #[error("empty online interval [{start}, {end}) for {label}")]
    EmptyInterval { label: Label, start: SimTime, end: SimTime },
    #[error("cannot schedule at t={requested}; clock is already at t={now}")]
    TimeTravel { now: SimTime, requested: SimTime },
    #[error("exceeded {limit} events without quiescence; pending: {}", pending.join("; "))]
    Livelock { limit: u64, pending: Vec<String> },
    #[error("{0}")]
    Handler(String),
}

/// What a transmission is doing, as shown in the event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TxClass {
    /// Sender to final recipient.
    Send,
    /// Sender hands a message to a carrier.
    Carry,
    /// Carrier forwards a held message.
    Relay,
    /// Mailing-list propagation.
    List,
}

impl fmt::Display for TxClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TxClass::Send => "send",
            TxClass::Carry => "carry",
            TxClass::Relay => "relay",
            TxClass::List => "list",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub from: MailAddress,
    pub to: MailAddress,
    pub bytes: Vec<u8>,
    pub message_id: String,
    pub class: TxClass,
    pub sent_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Deliver(Delivery),
    RetryTick(NodeId),
    OnlineChange(NodeId),
    ScenarioAction(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

impl SimEvent {
    fn describe(&self) -> String {
        let what = match &self.kind {
            EventKind::Deliver(d) => format!("deliver {} -> {} id={}", d.from, d.to, d.message_id),
            EventKind::RetryTick(n) => format!("retry-tick node={n}"),
            EventKind::OnlineChange(n) => format!("online-change node={n}"),
            EventKind::ScenarioAction(i) => format!("scenario-action {i}"),
        };
        format!("t={} seq={} {}", self.time, self.seq, what)
    }
}

#[derive(Debug, PartialEq, Eq)]
struct Queued(SimEvent);

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.0.time, self.0.seq).cmp(&(other.0.time, other.0.seq))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Refusal {
    NoSuchService,
    Offline,
    Partitioned,
}

impl fmt::Display for Refusal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Refusal::NoSuchService => "no-such-service",
            Refusal::Offline => "offline",
            Refusal::Partitioned => "partitioned",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Scheduled(SimTime),
    Refused(Refusal),
}

/// Half-open `[start, end)`; `end = None` means forever.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub start: SimTime,
    pub end: Option<SimTime>,
}

impl Interval {
    pub fn new(start: SimTime, end: Option<SimTime>) -> Self {
        Interval { start, end }
    }

    pub fn contains(&self, t: SimTime) -> bool {
        t >= self.start && self.end.is_none_or(|e| t < e)
    }
}

#[derive(Debug, Clone)]
struct Partition {
    start: SimTime,
    end: SimTime,
    a: BTreeSet<Label>,
    b: BTreeSet<Label>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub scheduled: u64,
    pub refused: u64,
    pub delivered: u64,
    pub events: u64,
}

pub trait EventHandler {
    fn handle(&mut self, net: &mut SimNetwork, event: SimEvent) -> Result<(), SimError>;
}

#[derive(Debug)]
pub struct SimNetwork {
    clock: SimTime,
    seq: u64,
    registry: BTreeMap<Label, NodeId>,
    online: BTreeMap<Label, Vec<Interval>>,
    latency: BTreeMap<(Label, Label), SimTime>,
    partitions: Vec<Partition>,
    queue: BinaryHeap<Reverse<Queued>>,
    seed: u64,
    rng: ChaCha8Rng,
    log: Vec<String>,
    stats: NetStats,
}

impl SimNetwork {
    pub fn new(seed: u64) -> Self {
        SimNetwork {
            clock: 0,
            seq: 0,
            registry: BTreeMap::new(),
            online: BTreeMap::new(),
            latency: BTreeMap::new(),
            partitions: Vec::new(),
            queue: BinaryHeap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            log: Vec::new(),
            stats: NetStats::default(),
        }
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn log(&self) -> &[String] {
        &self.log
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn register(&mut self, label: Label, node: NodeId) -> Result<(), SimError> {
        if self.registry.contains_key(&label) {
            return Err(SimError::DoubleRegistration(label));
        }
        self.registry.insert(label, node);
        Ok(())
    }

    pub fn lookup(&self, label: &Label) -> Option<NodeId> {
        self.registry.get(label).copied()
    }

    pub fn set_online(&mut self, label: Label, intervals: Vec<Interval>) -> Result<(), SimError> {
        for iv in &intervals {
            if let Some(end) = iv.end {
                if end <= iv.start {
                    return Err(SimError::EmptyInterval {
                        label,
                        start: iv.start,
                        end,
                    });
                }
            }
        }
        for pair in intervals.windows(2) {
            match pair[0].end {
                Some(end) if end <= pair[1].start => {}
                _ => return Err(SimError::OverlappingIntervals(label)),
            }
        }
        self.online.insert(label, intervals);
        Ok(())
    }

    pub fn is_online(&self, label: &Label, t: SimTime) -> bool {
        match self.online.get(label) {
            None => true,
            Some(ivs) => ivs.iter().any(|iv| iv.contains(t)),
        }
    }

    /// Start of the next online interval at or after `t`.
    pub fn next_online(&self, label: &Label, t: SimTime) -> Option<SimTime> {
        match self.online.get(label) {
            None => Some(t),
            Some(ivs) => ivs.iter().find_map(|iv| {
                if iv.contains(t) {
                    Some(t)
                } else if iv.start > t {
                    Some(iv.start)
                } else {
                    None
                }
            }),
        }
    }

    pub fn set_latency(&mut self, a: Label, b: Label, units: SimTime) {
        self.latency.insert((a.min(b), a.max(b)), units);
    }

    pub fn latency(&self, a: Label, b: Label) -> SimTime {
        self.latency
            .get(&(a.min(b), a.max(b)))
            .copied()
            .unwrap_or(DEFAULT_LATENCY)
    }

    pub fn add_partition(&mut self, start: SimTime, end: SimTime, a: BTreeSet<Label>, b: BTreeSet<Label>) {
        self.partitions.push(Partition { start, end, a, b });
    }

    fn partitioned(&self, x: &Label, y: &Label, t: SimTime) -> bool {
        self.partitions.iter().any(|p| {
            t >= p.start && t < p.end && ((p.a.contains(x) && p.b.contains(y)) || (p.b.contains(x) && p.a.contains(y)))
        })
    }

    /// Uniform jitter in `0..=max`, drawn from the scenario seed.
    pub fn jitter(&mut self, max: SimTime) -> SimTime {
        if max == 0 {
            0
        } else {
            self.rng.gen_range(0..=max)
        }
    }

    fn next_seq(&mut self) -> u64 {
        let s = self.seq;
        self.seq += 1;
        s
    }

    pub fn schedule(&mut self, time: SimTime, kind: EventKind) -> Result<u64, SimError> {
        if time < self.clock {
            return Err(SimError::TimeTravel {
                now: self.clock,
                requested: time,
            });
        }
        let seq = self.next_seq();
        self.queue.push(Reverse(Queued(SimEvent { time, seq, kind })));
        Ok(seq)
    }

    /// Attempt a connection from `from` to `to` at the current clock.
    pub fn send(
        &mut self,
        from: &MailAddress,
        to: &MailAddress,
        bytes: Vec<u8>,
        message_id: &str,
        class: TxClass,
        extra_delay: SimTime,
    ) -> Result<SendOutcome, SimError> {
        let src = from.label();
        if !self.registry.contains_key(&src) {
            return Err(SimError::UnknownSender(src));
        }
        if !self.is_online(&src, self.clock) {
            return Err(SimError::SenderOffline {
                label: src,
                time: self.clock,
            });
        }
        let dst = to.label();
        let arrival = self.clock + self.latency(src, dst) + extra_delay;
        let outcome = if !self.registry.contains_key(&dst) {
            SendOutcome::Refused(Refusal::NoSuchService)
        } else if self.partitioned(&src, &dst, self.clock) {
            SendOutcome::Refused(Refusal::Partitioned)
        } else if !self.is_online(&dst, arrival) {
            SendOutcome::Refused(Refusal::Offline)
        } else {
            SendOutcome::Scheduled(arrival)
        };
        let seq = match outcome {
            SendOutcome::Scheduled(at) => {
                self.stats.scheduled += 1;
                self.schedule(
                    at,
                    EventKind::Deliver(Delivery {
                        from: from.clone(),
                        to: to.clone(),
                        bytes,
                        message_id: message_id.to_string(),
                        class,
                        sent_at: self.clock,
                    }),
                )?
            }
            SendOutcome::Refused(_) => {
                self.stats.refused += 1;
                self.next_seq()
            }
        };
        let status = match outcome {
            SendOutcome::Scheduled(_) => "ok",
            SendOutcome::Refused(_) => "refused",
        };
        self.log.push(format!(
            "t={} seq={} {} {} -> {} id={} outcome={}",
            self.clock, seq, class, from, to, message_id, status
        ));
        Ok(outcome)
    }

    /// Record the outcome of handling a delivery.
    pub fn log_delivery(&mut self, event: &SimEvent, outcome: &str) {
        if let EventKind::Deliver(d) = &event.kind {
            self.log.push(format!(
                "t={} seq={} deliver {} -> {} id={} outcome={}",
                event.time, event.seq, d.from, d.to, d.message_id, outcome
            ));
        }
    }

    /// Free-form log line stamped with the current clock.
    pub fn log_note(&mut self, text: &str) {
        self.log.push(format!("t={} {}", self.clock, text));
    }

    fn pop(&mut self) -> Option<SimEvent> {
        let Reverse(Queued(ev)) = self.queue.pop()?;
        debug_assert!(ev.time >= self.clock);
        self.clock = ev.time;
        self.stats.events += 1;
        if matches!(ev.kind, EventKind::Deliver(_)) {
            self.stats.delivered += 1;
        }
        Some(ev)
    }

    fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|Reverse(Queued(e))| e.time)
    }

    /// Process every event with `time <= t`, then advance the clock to `t`.
    pub fn run_until<H: EventHandler>(&mut self, t: SimTime, handler: &mut H) -> Result<u64, SimError> {
        let mut n = 0;
        while self.peek_time().is_some_and(|et| et <= t) {
            let ev = self.pop().unwrap();
            handler.handle(self, ev)?;
            n += 1;
        }
        self.clock = self.clock.max(t);
        Ok(n)
    }

    /// Process events until none remain. Fails after `max_events`.
    pub fn run_to_quiescence<H: EventHandler>(&mut self, max_events: u64, handler: &mut H) -> Result<u64, SimError> {
        let mut n = 0;
        while let Some(ev) = self.pop() {
            handler.handle(self, ev)?;
            n += 1;
            if n >= max_events && !self.queue.is_empty() {
                let mut pending: Vec<SimEvent> = self.queue.iter().map(|Reverse(Queued(e))| e.clone()).collect();
                pending.sort_by_key(|e| (e.time, e.seq));
                return Err(SimError::Livelock {
                    limit: max_events,
                    pending: pending.iter().take(8).map(SimEvent::describe).collect(),
                });
            }
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::generate_identity;

    fn addr(seed: u64) -> MailAddress {
        generate_identity(seed).address("user").unwrap()
    }

    fn two() -> (SimNetwork, MailAddress, MailAddress) {
        let mut net = SimNetwork::new(0);
        let a = addr(1);
        let b = addr(2);
        net.register(a.label(), 0).unwrap();
        net.register(b.label(), 1).unwrap();
        (net, a, b)
    }

    struct Recorder(Vec<SimEvent>);

    impl EventHandler for Recorder {
        fn handle(&mut self, net: &mut SimNetwork, event: SimEvent) -> Result<(), SimError> {
            net.log_delivery(&event, "ok");
            self.0.push(event);
            Ok(())
        }
    }

    #[test]
    fn online_send_is_scheduled() {
        let (mut net, a, b) = two();
        let out = net.send(&a, &b, vec![1], "m1", TxClass::Send, 0).unwrap();
        assert_eq!(out, SendOutcome::Scheduled(1));
        let mut r = Recorder(vec![]);
        assert_eq!(net.run_to_quiescence(10, &mut r).unwrap(), 1);
        assert_eq!(net.clock(), 1);
    }

    #[test]
    fn offline_destination_refused() {
        let (mut net, a, b) = two();
        net.set_online(b.label(), vec![Interval::new(500, None)]).unwrap();
        assert_eq!(
            net.send(&a, &b, vec![], "m", TxClass::Send, 0).unwrap(),
            SendOutcome::Refused(Refusal::Offline)
        );
    }

    #[test]
    fn half_open_interval_boundary() {
        let (mut net, a, b) = two();
        // b leaves at t=1, exactly when the message would arrive
        net.set_online(b.label(), vec![Interval::new(0, Some(1))]).unwrap();
        assert_eq!(
            net.send(&a, &b, vec![], "m", TxClass::Send, 0).unwrap(),
            SendOutcome::Refused(Refusal::Offline)
        );
        assert!(net.is_online(&b.label(), 0));
        assert!(!net.is_online(&b.label(), 1));
    }

    #[test]
    fn partition_refuses() {
        let (mut net, a, b) = two();
        net.add_partition(0, 10, [a.label()].into(), [b.label()].into());
        assert_eq!(
            net.send(&a, &b, vec![], "m", TxClass::Send, 0).unwrap(),
            SendOutcome::Refused(Refusal::Partitioned)
        );
    }

    #[test]
    fn unknown_service_and_offline_sender() {
        let (mut net, a, b) = two();
        assert_eq!(
            net.send(&a, &addr(9), vec![], "m", TxClass::Send, 0).unwrap(),
            SendOutcome::Refused(Refusal::NoSuchService)
        );
        net.set_online(a.label(), vec![Interval::new(5, None)]).unwrap();
        assert!(matches!(
            net.send(&a, &b, vec![], "m", TxClass::Send, 0),
            Err(SimError::SenderOffline { .. })
        ));
    }

    #[test]
    fn double_registration_rejected() {
        let (mut net, a, _) = two();
        assert_eq!(net.register(a.label(), 3), Err(SimError::DoubleRegistration(a.label())));
    }

    #[test]
    fn interval_validation() {
        let (mut net, a, _) = two();
        let bad = vec![Interval::new(0, Some(10)), Interval::new(5, Some(20))];
        assert!(matches!(
            net.set_online(a.label(), bad),
            Err(SimError::OverlappingIntervals(_))
        ));
        assert!(net.set_online(a.label(), vec![Interval::new(3, Some(3))]).is_err());
        let ok = vec![Interval::new(0, Some(10)), Interval::new(10, None)];
        net.set_online(a.label(), ok).unwrap();
        assert_eq!(net.next_online(&a.label(), 4), Some(4));
    }

    #[test]
    fn ties_break_by_insertion() {
        let mut net = SimNetwork::new(0);
        for i in 0..5 {
            net.schedule(7, EventKind::ScenarioAction(i)).unwrap();
        }
        net.schedule(3, EventKind::ScenarioAction(99)).unwrap();
        let mut r = Recorder(vec![]);
        net.run_to_quiescence(100, &mut r).unwrap();
        let order: Vec<_> =
            r.0.iter()
                .map(|e| match e.kind {
                    EventKind::ScenarioAction(i) => i,
                    _ => unreachable!(),
                })
                .collect();
        assert_eq!(order, vec![99, 0, 1, 2, 3, 4]);
        assert!(net.schedule(1, EventKind::ScenarioAction(0)).is_err());
    }

    #[test]
    fn empty_run_has_no_events() {
        let mut net = SimNetwork::new(0);
        let mut r = Recorder(vec![]);
        assert_eq!(net.run_to_quiescence(10, &mut r).unwrap(), 0);
        assert_eq!(net.run_until(50, &mut r).unwrap(), 0);
        assert_eq!(net.clock(), 50);
    }

    struct Echo;

    impl EventHandler for Echo {
        fn handle(&mut self, net: &mut SimNetwork, event: SimEvent) -> Result<(), SimError> {
            net.schedule(event.time + 1, event.kind)?;
            Ok(())
        }
    }

    #[test]
    fn livelock_guard() {
        let mut net = SimNetwork::new(0);
        net.schedule(0, EventKind::RetryTick(0)).unwrap();
        match net.run_to_quiescence(50, &mut Echo) {
            Err(SimError::Livelock { limit, pending }) => {
                assert_eq!(limit, 50);
                assert_eq!(pending.len(), 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn log_is_deterministic() {
        let run = || {
            let (mut net, a, b) = two();
            for i in 0..4 {
                let j = net.jitter(3);
                net.send(&a, &b, vec![i], &format!("m{i}"), TxClass::List, j).unwrap();
            }
            let mut r = Recorder(vec![]);
            net.run_to_quiescence(100, &mut r).unwrap();
            net.log().to_vec()
        };
        assert_eq!(run(), run());
    }
}
