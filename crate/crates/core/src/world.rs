//! Drives a set of nodes over the simulated network.
//!
//! `World` owns the network and a `Cast` of nodes. The cast is the event
//! handler: deliveries go to `on_deliver`, after which the receiving node's
//! queue is flushed and its next tick scheduled.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::gossip::{
    build_tree, ledger_consensus_check, ConsensusReport, Direction, GossipError, Link, ListMode, ListState,
    ListVerdict, MembershipGraph,
};
use crate::identity::{IdentityKeyPair, MailAddress, MailKey, RevocationKind, SecretKey};
use crate::node::{outcome_of, Action, ExternalMessage, NodeError, NodeState, SendMode, Transport};
use crate::simnet::{EventHandler, EventKind, Interval, NodeId, SendOutcome, SimError, SimEvent, SimNetwork, TxClass};
use crate::wire::{self, h, SignatureValue, GENESIS_HASH};
use crate::SimTime;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("node {0:?} declared twice")]
    DuplicateNode(String),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("unknown list {0:?}")]
    UnknownList(String),
    #[error("{0}")]
    Node(#[from] NodeError),
    #[error("{0}")]
    Sim(#[from] SimError),
    #[error("{0}")]
    Gossip(#[from] GossipError),
    #[error("{0}")]
    Setup(String),
}

/// How an injected list message is corrupted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tamper {
    /// Re-send the member's last forward with a changed body; the
    /// countersignature no longer matches.
    Body,
    /// A fresh, correctly signed post whose `Prev-Hash` is not the head.
    PrevHash(String),
}

#[derive(Debug, Clone)]
pub enum WorldAction {
    Send {
        node: NodeId,
        from: MailAddress,
        to: MailAddress,
        body: Vec<u8>,
        mode: SendMode,
        confirm: bool,
    },
    SendExternal {
        node: NodeId,
        from: MailAddress,
        external: String,
        gateway: MailAddress,
        body: Vec<u8>,
    },
    RequestKey {
        node: NodeId,
        identity: MailAddress,
        contact: MailAddress,
    },
    Introduce {
        node: NodeId,
        identity: MailAddress,
        to: MailAddress,
        subject: MailAddress,
    },
    ListPost {
        list: String,
        member: usize,
        body: Vec<u8>,
    },
    InjectList {
        list: String,
        member: usize,
        tamper: Tamper,
        /// `None`: every neighbour of the member.
        target: Option<usize>,
    },
    Revoke {
        node: NodeId,
        identity: MailAddress,
        kind: RevocationKind,
    },
    ExternalIn {
        node: NodeId,
        message: ExternalMessage,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionOutput {
    Sent { token: u64, message_id: Option<String> },
    Posted { message_id: String },
    Injected { message_id: String, targets: usize },
    Done,
}

#[derive(Debug, Clone)]
pub struct ListMember {
    pub node: NodeId,
    pub address: MailAddress,
    pub dir: Direction,
}

#[derive(Debug, Clone)]
pub struct ListSpec {
    pub mode: ListMode,
    pub ledger: bool,
    pub jitter: SimTime,
    pub members: Vec<ListMember>,
    pub edges: BTreeSet<(usize, usize)>,
}

#[derive(Debug, Default)]
pub struct Cast {
    nodes: Vec<NodeState>,
    names: BTreeMap<String, NodeId>,
    online: BTreeMap<NodeId, Vec<Interval>>,
    actions: Vec<WorldAction>,
    results: Vec<Option<Result<ActionOutput, String>>>,
    ticks: BTreeSet<(SimTime, NodeId)>,
    tx: BTreeMap<(String, TxClass), u64>,
    list_receipts: BTreeMap<(String, MailAddress), SimTime>,
    lists: BTreeMap<String, ListSpec>,
}

struct NetTransport<'a> {
    net: &'a mut SimNetwork,
    tx: &'a mut BTreeMap<(String, TxClass), u64>,
}

impl Transport for NetTransport<'_> {
    fn transmit(
        &mut self,
        from: &MailAddress,
        to: &MailAddress,
        bytes: Vec<u8>,
        message_id: &str,
        class: TxClass,
        jitter_max: SimTime,
    ) -> Result<SendOutcome, SimError> {
        let extra = if jitter_max > 0 { self.net.jitter(jitter_max) } else { 0 };
        let out = self.net.send(from, to, bytes, message_id, class, extra)?;
        if matches!(out, SendOutcome::Scheduled(_)) {
            *self.tx.entry((message_id.to_string(), class)).or_default() += 1;
        }
        Ok(out)
    }
}

impl Cast {
    fn node_online(&self, net: &SimNetwork, n: NodeId, t: SimTime) -> bool {
        self.nodes[n].primary_label().is_some_and(|l| net.is_online(&l, t))
    }

    /// Attempt the node's due sends and book its next tick.
    fn flush(&mut self, net: &mut SimNetwork, n: NodeId) -> Result<(), SimError> {
        if self.nodes[n].primary_label().is_none() {
            return Ok(());
        }
        let now = net.clock();
        let online = self.node_online(net, n, now);
        let mut t = NetTransport {
            net: &mut *net,
            tx: &mut self.tx,
        };
        self.nodes[n].retry_tick(now, online, &mut t)?;
        if let Some(at) = self.nodes[n].next_deadline(online) {
            let at = at.max(now + 1);
            if self.ticks.insert((at, n)) {
                net.schedule(at, EventKind::RetryTick(n))?;
            }
        }
        Ok(())
    }

    fn record_receipts(&mut self, now: SimTime, actions: &[Action], to: &MailAddress) {
        for a in actions {
            if let Action::List {
                message_id,
                verdict,
                released,
                ..
            } = a
            {
                if *verdict == ListVerdict::Accepted {
                    self.list_receipts
                        .entry((message_id.clone(), to.clone()))
                        .or_insert(now);
                }
                for r in released {
                    self.list_receipts.entry((r.clone(), to.clone())).or_insert(now);
                }
            }
        }
    }

    fn execute(&mut self, net: &mut SimNetwork, i: usize) -> Result<(), SimError> {
        let now = net.clock();
        let action = self.actions[i].clone();
        let (node, result) = match action {
            WorldAction::Send {
                node,
                from,
                to,
                body,
                mode,
                confirm,
            } => (
                Some(node),
                self.nodes[node]
                    .compose_and_send(now, &from, &to, &body, mode, confirm)
                    .map(|r| ActionOutput::Sent {
                        token: r.token,
                        message_id: r.message_id,
                    })
                    .map_err(|e| e.to_string()),
            ),
            WorldAction::SendExternal {
                node,
                from,
                external,
                gateway,
                body,
            } => (
                Some(node),
                self.nodes[node]
                    .send_external(now, &from, &external, &gateway, &body)
                    .map(|r| ActionOutput::Sent {
                        token: r.token,
                        message_id: r.message_id,
                    })
                    .map_err(|e| e.to_string()),
            ),
            WorldAction::RequestKey {
                node,
                identity,
                contact,
            } => (
                Some(node),
                self.nodes[node]
                    .request_key(now, &identity, &contact)
                    .map(|_| ActionOutput::Done)
                    .map_err(|e| e.to_string()),
            ),
            WorldAction::Introduce {
                node,
                identity,
                to,
                subject,
            } => (
                Some(node),
                self.nodes[node]
                    .introduce(now, &identity, &to, &subject)
                    .map(|_| ActionOutput::Done)
                    .map_err(|e| e.to_string()),
            ),
            WorldAction::ListPost { list, member, body } => match self.member(&list, member) {
                Ok(m) => {
                    let r = self.nodes[m.node]
                        .list_post(now, &list, &m.address, &body)
                        .map(|message_id| {
                            self.list_receipts
                                .entry((message_id.clone(), m.address.clone()))
                                .or_insert(now);
                            ActionOutput::Posted { message_id }
                        })
                        .map_err(|e| e.to_string());
                    (Some(m.node), r)
                }
                Err(e) => (None, Err(e.to_string())),
            },
            WorldAction::InjectList {
                list,
                member,
                tamper,
                target,
            } => (None, self.inject(net, &list, member, &tamper, target)),
            WorldAction::Revoke { node, identity, kind } => (
                Some(node),
                self.nodes[node]
                    .revoke(now, &identity, kind)
                    .map(|_| ActionOutput::Done)
                    .map_err(|e| e.to_string()),
            ),
            WorldAction::ExternalIn { node, message } => (
                Some(node),
                self.nodes[node]
                    .gateway_in(now, &message)
                    .map(|r| ActionOutput::Sent {
                        token: r.token,
                        message_id: r.message_id,
                    })
                    .map_err(|e| e.to_string()),
            ),
        };
        if let Err(e) = &result {
            net.log_note(&format!("action {i} error={e:?}"));
        }
        self.results[i] = Some(result);
        if let Some(n) = node {
            self.flush(net, n)?;
        }
        Ok(())
    }

    fn member(&self, list: &str, idx: usize) -> Result<ListMember, WorldError> {
        self.lists
            .get(list)
            .ok_or_else(|| WorldError::UnknownList(list.to_string()))?
            .members
            .get(idx)
            .cloned()
            .ok_or_else(|| WorldError::Setup(format!("list {list:?} has no member {idx}")))
    }

    fn inject(
        &mut self,
        net: &mut SimNetwork,
        list: &str,
        member: usize,
        tamper: &Tamper,
        target: Option<usize>,
    ) -> Result<ActionOutput, String> {
        let m = self.member(list, member).map_err(|e| e.to_string())?;
        let node = &self.nodes[m.node];
        let me = node.identity(&m.address).ok_or("member identity missing")?;
        let state = node.list(list, &m.address).ok_or("member has no list state")?;
        let env = match tamper {
            Tamper::Body => {
                let last = state.log().last().ok_or("nothing to tamper with yet")?;
                let mut fwd = last.envelope.clone();
                fwd.remove_header(h::COUNTERSIGN);
                let cs = SignatureValue {
                    fingerprint: me.mail.fingerprint(),
                    signature: me.mail.sign(&wire::countersign_bytes(&fwd).map_err(|e| e.to_string())?),
                };
                fwd.set_header(h::COUNTERSIGN, cs.to_string());
                fwd.body.extend_from_slice(b" [altered]");
                fwd
            }
            Tamper::PrevHash(prev) => {
                let mut env = wire::Envelope::new()
                    .with_header(h::FROM, m.address.to_string())
                    .with_header(h::TO, m.address.to_string())
                    .with_header(h::DATE, net.clock().to_string())
                    .with_header(h::LIST, list)
                    .with_header(h::PREV_HASH, prev.clone())
                    .with_body(b"injected out-of-chain post".to_vec());
                let id = wire::derive_message_id(&env, m.address.label());
                env.set_header(h::MESSAGE_ID, id);
                let sig = SignatureValue {
                    fingerprint: me.mail.fingerprint(),
                    signature: me.mail.sign(&wire::signing_bytes(&env)),
                };
                env.set_header(h::SIGNATURE, sig.to_string());
                let cs = SignatureValue {
                    fingerprint: me.mail.fingerprint(),
                    signature: me.mail.sign(&wire::countersign_bytes(&env).map_err(|e| e.to_string())?),
                };
                env.set_header(h::COUNTERSIGN, cs.to_string());
                env
            }
        };
        let targets: Vec<MailAddress> = match target {
            Some(t) => vec![self.member(list, t).map_err(|e| e.to_string())?.address],
            None => state.neighbours().map(|(a, _)| a.clone()).collect(),
        };
        if !self.node_online(net, m.node, net.clock()) {
            return Err(format!("{} is offline", m.address));
        }
        let id = env.message_id().unwrap_or_default().to_string();
        let mut t = NetTransport {
            net: &mut *net,
            tx: &mut self.tx,
        };
        for to in &targets {
            let mut copy = env.clone();
            copy.set_header(h::TO, to.to_string());
            t.transmit(&m.address, to, copy.serialize(), &id, TxClass::List, 0)
                .map_err(|e| e.to_string())?;
        }
        Ok(ActionOutput::Injected {
            message_id: id,
            targets: targets.len(),
        })
    }
}

impl EventHandler for Cast {
    fn handle(&mut self, net: &mut SimNetwork, event: SimEvent) -> Result<(), SimError> {
        match &event.kind {
            EventKind::Deliver(d) => {
                let n = net
                    .lookup(&d.to.label())
                    .ok_or_else(|| SimError::Handler(format!("no node for {}", d.to)))?;
                let actions = self.nodes[n].on_deliver(event.time, &d.bytes, &d.from);
                net.log_delivery(&event, &outcome_of(&actions));
                self.record_receipts(event.time, &actions, &d.to);
                self.flush(net, n)
            }
            EventKind::RetryTick(n) => {
                self.ticks.remove(&(event.time, *n));
                self.flush(net, *n)
            }
            EventKind::OnlineChange(n) => self.flush(net, *n),
            EventKind::ScenarioAction(i) => self.execute(net, *i),
        }
    }
}

#[derive(Debug)]
pub struct World {
    pub net: SimNetwork,
    pub cast: Cast,
}

impl World {
    pub fn new(seed: u64) -> Self {
        World {
            net: SimNetwork::new(seed),
            cast: Cast::default(),
        }
    }

    pub fn add_node(&mut self, name: &str) -> Result<NodeId, WorldError> {
        if self.cast.names.contains_key(name) {
            return Err(WorldError::DuplicateNode(name.to_string()));
        }
        let id = self.cast.nodes.len();
        self.cast.nodes.push(NodeState::new(name));
        self.cast.names.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn node_id(&self, name: &str) -> Result<NodeId, WorldError> {
        self.cast
            .names
            .get(name)
            .copied()
            .ok_or_else(|| WorldError::UnknownNode(name.to_string()))
    }

    pub fn node(&self, id: NodeId) -> &NodeState {
        &self.cast.nodes[id]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut NodeState {
        &mut self.cast.nodes[id]
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.cast.nodes
    }

    pub fn add_identity(
        &mut self,
        node: NodeId,
        name: &str,
        keypair: IdentityKeyPair,
        mail: MailKey,
        localpart: &str,
    ) -> Result<MailAddress, WorldError> {
        let addr = self.cast.nodes[node].add_identity(name, keypair, mail, localpart)?;
        self.net.register(addr.label(), node)?;
        if let Some(iv) = self.cast.online.get(&node) {
            self.net.set_online(addr.label(), iv.clone())?;
        }
        Ok(addr)
    }

    /// Online schedule for every label of the node, present and future.
    pub fn set_online(&mut self, node: NodeId, intervals: Vec<Interval>) -> Result<(), WorldError> {
        for ident in self.cast.nodes[node].identities() {
            self.net.set_online(ident.address.label(), intervals.clone())?;
        }
        for iv in &intervals {
            self.net.schedule(iv.start, EventKind::OnlineChange(node))?;
        }
        self.cast.online.insert(node, intervals);
        Ok(())
    }

    pub fn is_online(&self, node: NodeId, t: SimTime) -> bool {
        self.cast.node_online(&self.net, node, t)
    }

    pub fn schedule_action(&mut self, t: SimTime, action: WorldAction) -> Result<usize, WorldError> {
        let i = self.cast.actions.len();
        self.cast.actions.push(action);
        self.cast.results.push(None);
        self.net.schedule(t, EventKind::ScenarioAction(i))?;
        Ok(i)
    }

    pub fn action_result(&self, i: usize) -> Option<&Result<ActionOutput, String>> {
        self.cast.results.get(i).and_then(Option::as_ref)
    }

    pub fn run_until(&mut self, t: SimTime) -> Result<u64, WorldError> {
        Ok(self.net.run_until(t, &mut self.cast)?)
    }

    /// Run until no events remain, then drop stale list buffers.
    pub fn run_to_quiescence(&mut self, max_events: u64) -> Result<u64, WorldError> {
        let n = self.net.run_to_quiescence(max_events, &mut self.cast)?;
        for node in &mut self.cast.nodes {
            for id in node.flush_list_buffers() {
                self.net.log_note(&format!(
                    "list-buffer {} id={} outcome=rejected:chain-break",
                    node.name(),
                    id
                ));
            }
        }
        Ok(n)
    }

    /// Scheduled transmissions of a message in a given class.
    pub fn transmissions(&self, message_id: &str, class: TxClass) -> u64 {
        self.cast.tx.get(&(message_id.to_string(), class)).copied().unwrap_or(0)
    }

    pub fn list_transmissions(&self, message_id: &str) -> u64 {
        self.transmissions(message_id, TxClass::List)
    }

    // -- lists ---------------------------------------------------------------

    pub fn create_list(&mut self, name: &str, mode: ListMode, ledger: bool, jitter: SimTime) -> Result<(), WorldError> {
        if self.cast.lists.contains_key(name) {
            return Err(WorldError::Setup(format!("list {name:?} declared twice")));
        }
        self.cast.lists.insert(
            name.to_string(),
            ListSpec {
                mode,
                ledger,
                jitter,
                members: Vec::new(),
                edges: BTreeSet::new(),
            },
        );
        Ok(())
    }

    pub fn list_spec(&self, name: &str) -> Option<&ListSpec> {
        self.cast.lists.get(name)
    }

    pub fn list_names(&self) -> impl Iterator<Item = &String> {
        self.cast.lists.keys()
    }

    /// Add a member; every member learns every other member's key.
    pub fn join_list(
        &mut self,
        name: &str,
        node: NodeId,
        address: &MailAddress,
        dir: Direction,
    ) -> Result<usize, WorldError> {
        let spec = self
            .cast
            .lists
            .get(name)
            .ok_or_else(|| WorldError::UnknownList(name.to_string()))?
            .clone();
        if spec.members.iter().any(|m| &m.address == address) {
            return Err(WorldError::Setup(format!("{address} already joined {name:?}")));
        }
        let key = self.cast.nodes[node]
            .identity(address)
            .ok_or_else(|| WorldError::Setup(format!("{address} is not an identity of node {node}")))?
            .mail
            .public();
        let state = self.cast.nodes[node].join_list(address, name, spec.mode, spec.ledger)?;
        state.set_jitter(spec.jitter);
        for m in &spec.members {
            let mk = self.cast.nodes[m.node].identity(&m.address).unwrap().mail.public();
            self.cast.nodes[node]
                .list_mut(name, address)
                .unwrap()
                .add_member_key(m.address.clone(), mk);
            self.cast.nodes[m.node]
                .list_mut(name, &m.address)
                .unwrap()
                .add_member_key(address.clone(), key);
        }
        let spec = self.cast.lists.get_mut(name).unwrap();
        spec.members.push(ListMember {
            node,
            address: address.clone(),
            dir,
        });
        Ok(spec.members.len() - 1)
    }

    pub fn list_member_index(&self, name: &str, address: &MailAddress) -> Option<usize> {
        self.cast
            .lists
            .get(name)?
            .members
            .iter()
            .position(|m| &m.address == address)
    }

    pub fn link_list(&mut self, name: &str, a: usize, b: usize) -> Result<(), WorldError> {
        let ma = self.cast.member(name, a)?;
        let mb = self.cast.member(name, b)?;
        if a == b {
            return Err(WorldError::Setup(format!("list {name:?}: member linked to itself")));
        }
        let ka = self.cast.nodes[ma.node].identity(&ma.address).unwrap().mail.public();
        let kb = self.cast.nodes[mb.node].identity(&mb.address).unwrap().mail.public();
        self.cast.nodes[ma.node]
            .list_mut(name, &ma.address)
            .unwrap()
            .add_neighbour(mb.address.clone(), kb, Link::between(ma.dir, mb.dir));
        self.cast.nodes[mb.node]
            .list_mut(name, &mb.address)
            .unwrap()
            .add_neighbour(ma.address.clone(), ka, Link::between(mb.dir, ma.dir));
        self.cast
            .lists
            .get_mut(name)
            .unwrap()
            .edges
            .insert((a.min(b), a.max(b)));
        Ok(())
    }

    /// Compute the spanning tree from the global membership graph and hand
    /// each member its tree neighbours.
    pub fn build_list_tree(&mut self, name: &str) -> Result<BTreeSet<(usize, usize)>, WorldError> {
        let spec = self
            .cast
            .lists
            .get(name)
            .ok_or_else(|| WorldError::UnknownList(name.to_string()))?
            .clone();
        let mut g = MembershipGraph::new(0..spec.members.len());
        for (a, b) in &spec.edges {
            g.add_edge(*a, *b);
        }
        let tree = build_tree(&g)?;
        for (i, m) in spec.members.iter().enumerate() {
            let nbrs: BTreeSet<MailAddress> = tree
                .iter()
                .filter_map(|(a, b)| {
                    if *a == i {
                        Some(spec.members[*b].address.clone())
                    } else if *b == i {
                        Some(spec.members[*a].address.clone())
                    } else {
                        None
                    }
                })
                .collect();
            self.cast.nodes[m.node]
                .list_mut(name, &m.address)
                .unwrap()
                .set_tree_neighbours(nbrs);
        }
        Ok(tree)
    }

    /// Post immediately at the current clock.
    pub fn post_now(&mut self, name: &str, member: usize, body: &[u8]) -> Result<String, WorldError> {
        let i = self.schedule_action(
            self.net.clock(),
            WorldAction::ListPost {
                list: name.to_string(),
                member,
                body: body.to_vec(),
            },
        )?;
        self.run_until(self.net.clock())?;
        match self.action_result(i) {
            Some(Ok(ActionOutput::Posted { message_id })) => Ok(message_id.clone()),
            Some(Err(e)) => Err(WorldError::Setup(e.clone())),
            _ => Err(WorldError::Setup("post did not run".into())),
        }
    }

    pub fn list_state(&self, name: &str, member: usize) -> Option<&ListState> {
        let m = self.cast.lists.get(name)?.members.get(member)?;
        self.cast.nodes[m.node].list(name, &m.address)
    }

    pub fn list_states(&self, name: &str) -> Vec<&ListState> {
        let Some(spec) = self.cast.lists.get(name) else {
            return Vec::new();
        };
        (0..spec.members.len())
            .filter_map(|i| self.list_state(name, i))
            .collect()
    }

    pub fn list_consensus(&self, name: &str) -> ConsensusReport {
        ledger_consensus_check(&self.list_states(name))
    }

    /// When a member first accepted a list message (its own posts included).
    pub fn list_receipt_time(&self, message_id: &str, member_node: NodeId) -> Option<SimTime> {
        let node = self.cast.nodes.get(member_node)?;
        node.identities()
            .iter()
            .filter_map(|i| {
                self.cast
                    .list_receipts
                    .get(&(message_id.to_string(), i.address.clone()))
                    .copied()
            })
            .min()
    }

    /// Genesis hash, for tamper scripts.
    pub fn genesis() -> &'static str {
        GENESIS_HASH
    }
}
