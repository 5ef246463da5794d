//! Decentralised mailing lists.
//!
//! A list is a graph of pairwise links between members. The author signs a
//! post and every hop countersigns the author's message and signature before
//! passing it on; a receiver checks the countersignature of the neighbour it
//! came from, then the author signature, then drops duplicates. With the
//! ledger enabled each post names the hash of the previous accepted post and
//! a mismatch stops propagation.
//!
//! Propagation is flooding to every neighbour except the source, or in tree
//! mode only along the edges of a spanning tree chosen from a global view.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::batch;
use crate::identity::{generate_identity, generate_mail_key, MailAddress, MailKey, MailPublic, PublicKey, SecretKey};
use crate::wire::{self, h, Envelope, SignatureValue, GENESIS_HASH};
use crate::world::World;
use crate::SimTime;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GossipError {
    #[error("{0} is not a member of this list")]
    NotAMember(String),
    #[error("membership graph is disconnected: {}", fmt_components(.components))]
    Disconnected { components: Vec<Vec<String>> },
    #[error("{0} may not post: its links only receive from the list")]
    ReceiveOnly(MailAddress),
    #[error("{0}")]
    Setup(String),
}

fn fmt_components(c: &[Vec<String>]) -> String {
    c.iter()
        .map(|comp| format!("{{{}}}", comp.join(",")))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ListMode {
    #[default]
    Flood,
    Tree,
}

/// A member's agreement about list traffic on its links.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Direction {
    #[default]
    Both,
    /// Carries the member's messages into the list, nothing back.
    ToList,
    /// Delivers list traffic to the member; the member sends nothing.
    FromList,
}

impl Direction {
    pub fn sends(self) -> bool {
        matches!(self, Direction::Both | Direction::ToList)
    }

    pub fn receives(self) -> bool {
        matches!(self, Direction::Both | Direction::FromList)
    }
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(Direction::Both),
            "to-list" => Ok(Direction::ToList),
            "from-list" => Ok(Direction::FromList),
            other => Err(format!("unknown direction {other:?}")),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Both => "both",
            Direction::ToList => "to-list",
            Direction::FromList => "from-list",
        })
    }
}

/// One end of a neighbour link, from the local member's side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Link {
    /// Local member forwards list traffic over this link.
    pub send: bool,
    /// Local member accepts list traffic from this link.
    pub receive: bool,
}

impl Link {
    pub const BOTH: Link = Link {
        send: true,
        receive: true,
    };

    /// Link between a local member with direction `mine` and a neighbour with `theirs`.
    pub fn between(mine: Direction, theirs: Direction) -> Link {
        Link {
            send: mine.sends() && theirs.receives(),
            receive: theirs.sends() && mine.receives(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RejectReason {
    NotANeighbour,
    BadCountersign,
    BadAuthorSig,
    UnknownAuthor,
    ChainBreak,
    WrongList,
    Policy,
    Malformed,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::NotANeighbour => "not-a-neighbour",
            RejectReason::BadCountersign => "bad-countersign",
            RejectReason::BadAuthorSig => "bad-author-sig",
            RejectReason::UnknownAuthor => "unknown-author",
            RejectReason::ChainBreak => "chain-break",
            RejectReason::WrongList => "wrong-list",
            RejectReason::Policy => "policy",
            RejectReason::Malformed => "malformed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ListVerdict {
    Accepted,
    Duplicate,
    Rejected(RejectReason),
    Buffered,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub position: usize,
    pub message_id: String,
    pub author: MailAddress,
    /// `Prev-Hash` as claimed by the author; `None` on non-ledger lists.
    pub prev_hash: Option<String>,
    /// Hash of this entry, i.e. the head after accepting it.
    pub hash: String,
    pub envelope: Envelope,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Forward {
    pub envelope: Envelope,
    pub targets: Vec<MailAddress>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListDelivery {
    pub message_id: String,
    pub verdict: ListVerdict,
    pub forwards: Vec<Forward>,
    /// Buffered messages accepted because this one filled their gap.
    pub released: Vec<String>,
}

pub type AcceptPolicy = Arc<dyn Fn(&Envelope) -> bool + Send + Sync>;

#[derive(Clone)]
pub struct ListState {
    list_id: String,
    my_address: MailAddress,
    mode: ListMode,
    ledger: bool,
    neighbours: BTreeMap<MailAddress, Link>,
    tree_neighbours: BTreeSet<MailAddress>,
    roster: BTreeMap<MailAddress, MailPublic>,
    log: Vec<LedgerEntry>,
    head_hash: String,
    ids: HashSet<String>,
    pending: Option<(Envelope, MailAddress)>,
    policy: Option<AcceptPolicy>,
    jitter: SimTime,
    rejections: Vec<(String, RejectReason)>,
    duplicates: u64,
}

impl fmt::Debug for ListState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ListState")
            .field("list_id", &self.list_id)
            .field("my_address", &self.my_address)
            .field("mode", &self.mode)
            .field("ledger", &self.ledger)
            .field("neighbours", &self.neighbours.keys().collect::<Vec<_>>())
            .field("log_len", &self.log.len())
            .field("head_hash", &self.head_hash)
            .finish()
    }
}

impl ListState {
    pub fn new(list_id: &str, my_address: MailAddress, my_key: MailPublic, mode: ListMode, ledger: bool) -> Self {
        let mut roster = BTreeMap::new();
        roster.insert(my_address.clone(), my_key);
        ListState {
            list_id: list_id.to_string(),
            my_address,
            mode,
            ledger,
            neighbours: BTreeMap::new(),
            tree_neighbours: BTreeSet::new(),
            roster,
            log: Vec::new(),
            head_hash: GENESIS_HASH.to_string(),
            ids: HashSet::new(),
            pending: None,
            policy: None,
            jitter: 0,
            rejections: Vec::new(),
            duplicates: 0,
        }
    }

    pub fn list_id(&self) -> &str {
        &self.list_id
    }

    pub fn my_address(&self) -> &MailAddress {
        &self.my_address
    }

    pub fn mode(&self) -> ListMode {
        self.mode
    }

    pub fn ledger_enabled(&self) -> bool {
        self.ledger
    }

    pub fn log(&self) -> &[LedgerEntry] {
        &self.log
    }

    pub fn head_hash(&self) -> &str {
        &self.head_hash
    }

    pub fn neighbours(&self) -> impl Iterator<Item = (&MailAddress, &Link)> {
        self.neighbours.iter()
    }

    pub fn tree_neighbours(&self) -> &BTreeSet<MailAddress> {
        &self.tree_neighbours
    }

    pub fn rejections(&self) -> &[(String, RejectReason)] {
        &self.rejections
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn jitter(&self) -> SimTime {
        self.jitter
    }

    pub fn set_jitter(&mut self, max: SimTime) {
        self.jitter = max;
    }

    pub fn set_policy(&mut self, policy: AcceptPolicy) {
        self.policy = Some(policy);
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    /// Record a member's key so its signatures can be checked.
    pub fn add_member_key(&mut self, member: MailAddress, key: MailPublic) {
        self.roster.insert(member, key);
    }

    pub fn member_key(&self, member: &MailAddress) -> Option<&MailPublic> {
        self.roster.get(member)
    }

    pub fn add_neighbour(&mut self, neighbour: MailAddress, key: MailPublic, link: Link) {
        self.roster.insert(neighbour.clone(), key);
        self.neighbours.insert(neighbour, link);
    }

    pub fn set_tree_neighbours(&mut self, tree: BTreeSet<MailAddress>) {
        self.tree_neighbours = tree.into_iter().filter(|n| self.neighbours.contains_key(n)).collect();
    }

    fn forward_targets(&self, except: Option<&MailAddress>) -> Vec<MailAddress> {
        self.neighbours
            .iter()
            .filter(|(n, link)| {
                link.send && Some(*n) != except && (self.mode == ListMode::Flood || self.tree_neighbours.contains(*n))
            })
            .map(|(n, _)| n.clone())
            .collect()
    }

    fn append(&mut self, env: Envelope, message_id: String) {
        let hash = wire::message_hash(&env);
        let author = env.from_address().expect("verified envelope has a From");
        self.log.push(LedgerEntry {
            position: self.log.len(),
            message_id: message_id.clone(),
            author,
            prev_hash: env.header(h::PREV_HASH).map(str::to_string),
            hash: hash.clone(),
            envelope: env,
        });
        self.ids.insert(message_id);
        self.head_hash = hash;
    }

    fn countersigned(&self, env: &Envelope, my_key: &MailKey) -> Envelope {
        let mut out = env.clone();
        out.remove_header(h::COUNTERSIGN);
        let bytes = wire::countersign_bytes(&out).expect("accepted envelope is signed");
        let cs = SignatureValue {
            fingerprint: my_key.fingerprint(),
            signature: my_key.sign(&bytes),
        };
        out.set_header(h::COUNTERSIGN, cs.to_string());
        out
    }

    /// Author a new post. Returns the signed, self-countersigned envelope and
    /// the neighbours it goes to; `To` is left for the caller to set per copy.
    pub fn post(&mut self, author_key: &MailKey, date: SimTime, body: &[u8]) -> Result<Forward, GossipError> {
        if self.roster.get(&self.my_address) != Some(&author_key.public()) {
            return Err(GossipError::NotAMember(author_key.fingerprint().to_string()));
        }
        if !self.neighbours.is_empty() && self.neighbours.values().all(|l| !l.send) {
            return Err(GossipError::ReceiveOnly(self.my_address.clone()));
        }
        let mut env = Envelope::new()
            .with_header(h::FROM, self.my_address.to_string())
            .with_header(h::TO, self.my_address.to_string())
            .with_header(h::DATE, date.to_string())
            .with_header(h::LIST, self.list_id.clone());
        if self.ledger {
            env.set_header(h::PREV_HASH, self.head_hash.clone());
        }
        env.body = body.to_vec();
        let id = wire::derive_message_id(&env, self.my_address.label());
        env.set_header(h::MESSAGE_ID, id.clone());
        let sig = SignatureValue {
            fingerprint: author_key.fingerprint(),
            signature: author_key.sign(&wire::signing_bytes(&env)),
        };
        env.set_header(h::SIGNATURE, sig.to_string());
        let env = self.countersigned(&env, author_key);
        self.append(env.clone(), id);
        Ok(Forward {
            envelope: env,
            targets: self.forward_targets(None),
        })
    }

    fn verify(&self, env: &Envelope, received_from: &MailAddress) -> Result<String, RejectReason> {
        if env.header(h::LIST) != Some(self.list_id.as_str()) {
            return Err(RejectReason::WrongList);
        }
        match self.neighbours.get(received_from) {
            Some(link) if link.receive => {}
            _ => return Err(RejectReason::NotANeighbour),
        }
        let id = env.message_id().map(str::to_string).ok_or(RejectReason::Malformed)?;

        let hop_key = self.roster.get(received_from).ok_or(RejectReason::NotANeighbour)?;
        let cs: SignatureValue = env
            .header(h::COUNTERSIGN)
            .and_then(|v| v.parse().ok())
            .ok_or(RejectReason::BadCountersign)?;
        let cs_bytes = wire::countersign_bytes(env).map_err(|_| RejectReason::BadAuthorSig)?;
        if cs.fingerprint != hop_key.fingerprint() || !hop_key.verify(&cs_bytes, &cs.signature) {
            return Err(RejectReason::BadCountersign);
        }

        let author = env.from_address().ok_or(RejectReason::Malformed)?;
        let author_key = self.roster.get(&author).ok_or(RejectReason::UnknownAuthor)?;
        let sig: SignatureValue = env
            .header(h::SIGNATURE)
            .and_then(|v| v.parse().ok())
            .ok_or(RejectReason::BadAuthorSig)?;
        if sig.fingerprint != author_key.fingerprint() || !author_key.verify(&wire::signing_bytes(env), &sig.signature)
        {
            return Err(RejectReason::BadAuthorSig);
        }
        if let Some(p) = &self.policy {
            if !p(env) {
                return Err(RejectReason::Policy);
            }
        }
        Ok(id)
    }

    fn accept(&mut self, env: &Envelope, id: String, received_from: &MailAddress, my_key: &MailKey) -> Forward {
        let fwd = self.countersigned(env, my_key);
        self.append(env.clone(), id);
        Forward {
            envelope: fwd,
            targets: self.forward_targets(Some(received_from)),
        }
    }

    pub fn on_list_message(&mut self, env: &Envelope, received_from: &MailAddress, my_key: &MailKey) -> ListDelivery {
        let mut out = ListDelivery {
            message_id: env.message_id().unwrap_or_default().to_string(),
            verdict: ListVerdict::Accepted,
            forwards: Vec::new(),
            released: Vec::new(),
        };
        let id = match self.verify(env, received_from) {
            Ok(id) => id,
            Err(reason) => {
                self.rejections.push((out.message_id.clone(), reason));
                out.verdict = ListVerdict::Rejected(reason);
                return out;
            }
        };
        let pending_id = self.pending.as_ref().and_then(|(e, _)| e.message_id());
        if self.ids.contains(&id) || pending_id == Some(id.as_str()) {
            self.duplicates += 1;
            out.verdict = ListVerdict::Duplicate;
            return out;
        }
        if self.ledger {
            let prev = env.header(h::PREV_HASH).unwrap_or("");
            if prev != self.head_hash {
                let stale = prev == GENESIS_HASH || self.log.iter().any(|e| e.hash == prev);
                if stale || prev.is_empty() || self.pending.is_some() {
                    self.rejections.push((id, RejectReason::ChainBreak));
                    out.verdict = ListVerdict::Rejected(RejectReason::ChainBreak);
                } else {
                    self.pending = Some((env.clone(), received_from.clone()));
                    out.verdict = ListVerdict::Buffered;
                }
                return out;
            }
        }
        out.forwards.push(self.accept(env, id, received_from, my_key));
        while let Some((penv, pfrom)) = self.pending.take() {
            if penv.header(h::PREV_HASH) == Some(self.head_hash.as_str()) {
                let pid = penv.message_id().unwrap_or_default().to_string();
                out.forwards.push(self.accept(&penv, pid.clone(), &pfrom, my_key));
                out.released.push(pid);
            } else {
                self.pending = Some((penv, pfrom));
                break;
            }
        }
        out
    }

    /// Drop a buffered message that never found its predecessor.
    pub fn flush_pending(&mut self) -> Option<String> {
        let (env, _) = self.pending.take()?;
        let id = env.message_id().unwrap_or_default().to_string();
        self.rejections.push((id.clone(), RejectReason::ChainBreak));
        Some(id)
    }

    /// `position TAB message-id TAB head-hash TAB author` per entry.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for e in &self.log {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", e.position, e.message_id, e.hash, e.author));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Membership graphs and spanning trees
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipGraph<N: Ord> {
    members: BTreeSet<N>,
    edges: BTreeSet<(N, N)>,
}

impl<N: Ord + Clone> Default for MembershipGraph<N> {
    fn default() -> Self {
        MembershipGraph {
            members: BTreeSet::new(),
            edges: BTreeSet::new(),
        }
    }
}

impl<N: Ord + Clone + fmt::Display> MembershipGraph<N> {
    pub fn new(members: impl IntoIterator<Item = N>) -> Self {
        MembershipGraph {
            members: members.into_iter().collect(),
            edges: BTreeSet::new(),
        }
    }

    pub fn add_member(&mut self, n: N) {
        self.members.insert(n);
    }

    /// Undirected; self-loops are ignored.
    pub fn add_edge(&mut self, a: N, b: N) {
        if a == b {
            return;
        }
        self.members.insert(a.clone());
        self.members.insert(b.clone());
        let e = if a < b { (a, b) } else { (b, a) };
        self.edges.insert(e);
    }

    pub fn members(&self) -> &BTreeSet<N> {
        &self.members
    }

    pub fn edges(&self) -> &BTreeSet<(N, N)> {
        &self.edges
    }

    pub fn neighbours(&self, n: &N) -> BTreeSet<N> {
        self.edges
            .iter()
            .filter_map(|(a, b)| {
                if a == n {
                    Some(b.clone())
                } else if b == n {
                    Some(a.clone())
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn components(&self) -> Vec<BTreeSet<N>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for start in &self.members {
            if seen.contains(start) {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut q = VecDeque::from([start.clone()]);
            seen.insert(start.clone());
            while let Some(n) = q.pop_front() {
                for m in self.neighbours(&n) {
                    if seen.insert(m.clone()) {
                        q.push_back(m);
                    }
                }
                comp.insert(n);
            }
            out.push(comp);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }
}

/// Breadth-first spanning tree from the smallest member, visiting neighbours
/// in ascending order. Edges are returned as `(smaller, larger)`.
pub fn build_tree<N: Ord + Clone + fmt::Display>(graph: &MembershipGraph<N>) -> Result<BTreeSet<(N, N)>, GossipError> {
    let comps = graph.components();
    if comps.len() > 1 {
        return Err(GossipError::Disconnected {
            components: comps
                .iter()
                .map(|c| c.iter().map(|n| n.to_string()).collect())
                .collect(),
        });
    }
    let mut tree = BTreeSet::new();
    let Some(root) = graph.members.iter().next().cloned() else {
        return Ok(tree);
    };
    let mut visited = BTreeSet::from([root.clone()]);
    let mut q = VecDeque::from([root]);
    while let Some(n) = q.pop_front() {
        for m in graph.neighbours(&n) {
            if visited.insert(m.clone()) {
                tree.insert(if n < m {
                    (n.clone(), m.clone())
                } else {
                    (m.clone(), n.clone())
                });
                q.push_back(m);
            }
        }
    }
    Ok(tree)
}

// ---------------------------------------------------------------------------
// Consensus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    /// First log position where members disagree (ledger lists).
    pub position: usize,
    /// Message at that position -> members holding it (`None`: log ends there).
    pub camps: BTreeMap<Option<String>, Vec<MailAddress>>,
    /// Non-ledger lists: members missing some message.
    pub missing: BTreeMap<MailAddress, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsensusReport {
    pub consensus: bool,
    pub divergence: Option<Divergence>,
}

impl fmt::Display for ConsensusReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.divergence {
            None => write!(f, "consensus"),
            Some(d) if d.camps.is_empty() => {
                write!(f, "divergent: {} members missing messages", d.missing.len())
            }
            Some(d) => {
                write!(f, "fork at position {}:", d.position)?;
                for (id, members) in &d.camps {
                    write!(
                        f,
                        " [{} held by {}]",
                        id.as_deref().unwrap_or("end-of-log"),
                        members.len()
                    )?;
                }
                Ok(())
            }
        }
    }
}

/// Ledger lists: identical sequences of Message-IDs and identical heads.
/// Other lists: identical sets of Message-IDs.
pub fn ledger_consensus_check(states: &[&ListState]) -> ConsensusReport {
    let ok = ConsensusReport {
        consensus: true,
        divergence: None,
    };
    if states.is_empty() {
        return ok;
    }
    if states[0].ledger {
        let longest = states.iter().map(|s| s.log.len()).max().unwrap_or(0);
        for pos in 0..longest {
            let mut camps: BTreeMap<Option<String>, Vec<MailAddress>> = BTreeMap::new();
            for s in states {
                camps
                    .entry(s.log.get(pos).map(|e| e.message_id.clone()))
                    .or_default()
                    .push(s.my_address.clone());
            }
            if camps.len() > 1 {
                return ConsensusReport {
                    consensus: false,
                    divergence: Some(Divergence {
                        position: pos,
                        camps,
                        missing: BTreeMap::new(),
                    }),
                };
            }
        }
        let heads: BTreeSet<&str> = states.iter().map(|s| s.head_hash.as_str()).collect();
        if heads.len() > 1 {
            return ConsensusReport {
                consensus: false,
                divergence: Some(Divergence {
                    position: longest,
                    camps: BTreeMap::new(),
                    missing: BTreeMap::new(),
                }),
            };
        }
        ok
    } else {
        let all: BTreeSet<&str> = states
            .iter()
            .flat_map(|s| s.log.iter().map(|e| e.message_id.as_str()))
            .collect();
        let mut missing = BTreeMap::new();
        for s in states {
            let have: BTreeSet<&str> = s.log.iter().map(|e| e.message_id.as_str()).collect();
            let gap: Vec<String> = all.difference(&have).map(|x| x.to_string()).collect();
            if !gap.is_empty() {
                missing.insert(s.my_address.clone(), gap);
            }
        }
        if missing.is_empty() {
            ok
        } else {
            ConsensusReport {
                consensus: false,
                divergence: Some(Divergence {
                    position: 0,
                    camps: BTreeMap::new(),
                    missing,
                }),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Flood runs over a whole membership graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FloodSetup {
    /// Members are `0..members`.
    pub graph: MembershipGraph<usize>,
    pub mode: ListMode,
    pub ledger: bool,
    pub author: usize,
    pub posts: usize,
    pub seed: u64,
    pub jitter: SimTime,
}

impl FloodSetup {
    pub fn new(graph: MembershipGraph<usize>, mode: ListMode) -> Self {
        FloodSetup {
            graph,
            mode,
            ledger: false,
            author: 0,
            posts: 1,
            seed: 0,
            jitter: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FloodReport {
    /// List transmissions per post, in posting order.
    pub transmissions: Vec<u64>,
    /// When each member first held the first post.
    pub receipt_times: Vec<Option<SimTime>>,
    pub unreached: Vec<usize>,
    pub consensus: ConsensusReport,
    pub events: u64,
}

impl FloodReport {
    pub fn total_transmissions(&self) -> u64 {
        self.transmissions.iter().sum()
    }
}

/// Build a world with one node per member, post from `author`, and run to
/// quiescence. Disconnected graphs complete and report unreached members.
pub fn run_flood(setup: &FloodSetup) -> Result<FloodReport, GossipError> {
    let n = setup.graph.members().iter().max().map_or(0, |m| m + 1);
    if setup.author >= n.max(1) {
        return Err(GossipError::Setup(format!("author {} is not a member", setup.author)));
    }
    let mut world = World::new(setup.seed);
    let mut addrs = Vec::with_capacity(n);
    for i in 0..n {
        let node = world
            .add_node(&format!("m{i}"))
            .map_err(|e| GossipError::Setup(e.to_string()))?;
        let seed = 0x6c69_7374_0000_0000 ^ (setup.seed.wrapping_mul(1 << 20)) ^ i as u64;
        let addr = world
            .add_identity(node, "m", generate_identity(seed), generate_mail_key(seed), "user")
            .map_err(|e| GossipError::Setup(e.to_string()))?;
        addrs.push(addr);
    }
    let list = "flood";
    let setup_err = |e: crate::world::WorldError| GossipError::Setup(e.to_string());
    world
        .create_list(list, setup.mode, setup.ledger, setup.jitter)
        .map_err(setup_err)?;
    for (i, addr) in addrs.iter().enumerate() {
        world.join_list(list, i, addr, Direction::Both).map_err(setup_err)?;
    }
    for (a, b) in setup.graph.edges() {
        world.link_list(list, *a, *b).map_err(setup_err)?;
    }
    if setup.mode == ListMode::Tree {
        world.build_list_tree(list).map_err(|e| match e {
            crate::world::WorldError::Gossip(g) => g,
            other => GossipError::Setup(other.to_string()),
        })?;
    }
    let mut ids = Vec::new();
    for k in 0..setup.posts {
        let body = format!("post {k}");
        let id = world.post_now(list, setup.author, body.as_bytes()).map_err(setup_err)?;
        world.run_to_quiescence(10_000_000).map_err(setup_err)?;
        ids.push(id);
    }
    let transmissions = ids.iter().map(|id| world.list_transmissions(id)).collect();
    let first = ids.first().cloned().unwrap_or_default();
    let states: Vec<&ListState> = (0..n).filter_map(|i| world.list_state(list, i)).collect();
    let receipt_times: Vec<Option<SimTime>> = (0..n).map(|i| world.list_receipt_time(&first, i)).collect();
    let unreached = (0..n)
        .filter(|&i| {
            world
                .list_state(list, i)
                .is_none_or(|s| !ids.iter().all(|id| s.log().iter().any(|e| &e.message_id == id)))
        })
        .collect();
    Ok(FloodReport {
        transmissions,
        receipt_times,
        unreached,
        consensus: ledger_consensus_check(&states),
        events: world.net.stats().events,
    })
}

/// Run many independent floods; parallel under the `parallel` feature.
pub fn run_flood_batch(setups: &[FloodSetup]) -> Vec<Result<FloodReport, GossipError>> {
    batch::map(setups, run_flood)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::generate_identity;

    struct Member {
        addr: MailAddress,
        key: MailKey,
    }

    fn member(seed: u64) -> Member {
        Member {
            addr: generate_identity(seed).address("user").unwrap(),
            key: generate_mail_key(seed),
        }
    }

    fn state(m: &Member, ledger: bool) -> ListState {
        ListState::new("xyz", m.addr.clone(), m.key.public(), ListMode::Flood, ledger)
    }

    fn link(a: &mut ListState, b: &Member) {
        a.add_neighbour(b.addr.clone(), b.key.public(), Link::BOTH);
    }

    #[test]
    fn post_is_signed_and_countersigned_by_author() {
        let alice = member(1);
        let bob = member(2);
        let mut la = state(&alice, true);
        link(&mut la, &bob);
        let fwd = la.post(&alice.key, 5, b"hello list").unwrap();
        assert_eq!(fwd.targets, vec![bob.addr.clone()]);
        let env = &fwd.envelope;
        assert_eq!(env.header(h::PREV_HASH), Some(GENESIS_HASH));
        let sig: SignatureValue = env.header(h::SIGNATURE).unwrap().parse().unwrap();
        let cs: SignatureValue = env.header(h::COUNTERSIGN).unwrap().parse().unwrap();
        assert_eq!(sig.fingerprint, alice.key.fingerprint());
        assert_eq!(cs.fingerprint, alice.key.fingerprint());
        assert_eq!(la.log().len(), 1);
        assert_eq!(la.head_hash(), wire::message_hash(env));
    }

    #[test]
    fn non_member_key_cannot_post() {
        let alice = member(1);
        let mallory = member(9);
        let mut la = state(&alice, false);
        assert!(matches!(
            la.post(&mallory.key, 0, b"x"),
            Err(GossipError::NotAMember(_))
        ));
    }

    #[test]
    fn forward_carries_forwarders_countersignature() {
        let (alice, bob, carol) = (member(1), member(2), member(3));
        let mut la = state(&alice, false);
        let mut lb = state(&bob, false);
        let mut lc = state(&carol, false);
        link(&mut la, &bob);
        link(&mut lb, &alice);
        link(&mut lb, &carol);
        link(&mut lc, &bob);
        lc.add_member_key(alice.addr.clone(), alice.key.public());
        let post = la.post(&alice.key, 0, b"m").unwrap();
        let at_bob = lb.on_list_message(&post.envelope, &alice.addr, &bob.key);
        assert_eq!(at_bob.verdict, ListVerdict::Accepted);
        assert_eq!(at_bob.forwards[0].targets, vec![carol.addr.clone()]);
        let fwd = &at_bob.forwards[0].envelope;
        let cs: SignatureValue = fwd.header(h::COUNTERSIGN).unwrap().parse().unwrap();
        assert_eq!(cs.fingerprint, bob.key.fingerprint());
        assert_eq!(wire::signing_bytes(fwd), wire::signing_bytes(&post.envelope));
        let at_carol = lc.on_list_message(fwd, &bob.addr, &carol.key);
        assert_eq!(at_carol.verdict, ListVerdict::Accepted);
        assert!(at_carol.forwards[0].targets.is_empty());
        // same message again is a duplicate
        let again = lc.on_list_message(fwd, &bob.addr, &carol.key);
        assert_eq!(again.verdict, ListVerdict::Duplicate);
        assert!(again.forwards.is_empty());
    }

    #[test]
    fn tampering_and_strangers_are_rejected() {
        let (alice, bob, mallory) = (member(1), member(2), member(9));
        let mut la = state(&alice, false);
        let mut lb = state(&bob, false);
        link(&mut la, &bob);
        link(&mut lb, &alice);
        let post = la.post(&alice.key, 0, b"original").unwrap();

        let mut tampered = post.envelope.clone();
        tampered.body = b"altered".to_vec();
        assert_eq!(
            lb.on_list_message(&tampered, &alice.addr, &bob.key).verdict,
            ListVerdict::Rejected(RejectReason::BadCountersign)
        );
        assert_eq!(
            lb.on_list_message(&post.envelope, &mallory.addr, &bob.key).verdict,
            ListVerdict::Rejected(RejectReason::NotANeighbour)
        );

        // re-countersigned by alice but author signature no longer matches the body
        let mut forged = tampered.clone();
        forged.remove_header(h::COUNTERSIGN);
        let bytes = wire::countersign_bytes(&forged).unwrap();
        forged.set_header(
            h::COUNTERSIGN,
            SignatureValue {
                fingerprint: alice.key.fingerprint(),
                signature: alice.key.sign(&bytes),
            }
            .to_string(),
        );
        assert_eq!(
            lb.on_list_message(&forged, &alice.addr, &bob.key).verdict,
            ListVerdict::Rejected(RejectReason::BadAuthorSig)
        );
        assert!(lb.log().is_empty());
        assert_eq!(
            lb.on_list_message(&post.envelope, &alice.addr, &bob.key).verdict,
            ListVerdict::Accepted
        );
    }

    #[test]
    fn ledger_chain_rules() {
        let (alice, bob) = (member(1), member(2));
        let mut la = state(&alice, true);
        let mut lb = state(&bob, true);
        link(&mut la, &bob);
        link(&mut lb, &alice);
        let p1 = la.post(&alice.key, 0, b"one").unwrap();
        let p2 = la.post(&alice.key, 1, b"two").unwrap();
        let p3 = la.post(&alice.key, 2, b"three").unwrap();

        // out of order: p2 buffered, then released by p1
        assert_eq!(
            lb.on_list_message(&p2.envelope, &alice.addr, &bob.key).verdict,
            ListVerdict::Buffered
        );
        let d = lb.on_list_message(&p1.envelope, &alice.addr, &bob.key);
        assert_eq!(d.verdict, ListVerdict::Accepted);
        assert_eq!(d.released.len(), 1);
        assert_eq!(
            lb.on_list_message(&p3.envelope, &alice.addr, &bob.key).verdict,
            ListVerdict::Accepted
        );
        assert_eq!(lb.head_hash(), la.head_hash());
        for (i, e) in lb.log().iter().enumerate() {
            let expect = if i == 0 {
                GENESIS_HASH.to_string()
            } else {
                lb.log()[i - 1].hash.clone()
            };
            assert_eq!(e.prev_hash.as_deref(), Some(expect.as_str()));
            assert_eq!(e.position, i);
        }

        // stale predecessor: a fork off genesis
        let mut fork = state(&alice, true);
        link(&mut fork, &bob);
        let stale = fork.post(&alice.key, 9, b"fork").unwrap();
        assert_eq!(
            lb.on_list_message(&stale.envelope, &alice.addr, &bob.key).verdict,
            ListVerdict::Rejected(RejectReason::ChainBreak)
        );
        assert!(ledger_consensus_check(&[&la, &lb]).consensus);
    }

    #[test]
    fn one_slot_buffer_is_bounded() {
        let (alice, bob) = (member(1), member(2));
        let mut la = state(&alice, true);
        let mut lb = state(&bob, true);
        link(&mut la, &bob);
        link(&mut lb, &alice);
        let _p1 = la.post(&alice.key, 0, b"one").unwrap();
        let p2 = la.post(&alice.key, 1, b"two").unwrap();
        let p3 = la.post(&alice.key, 2, b"three").unwrap();
        assert_eq!(
            lb.on_list_message(&p2.envelope, &alice.addr, &bob.key).verdict,
            ListVerdict::Buffered
        );
        assert_eq!(
            lb.on_list_message(&p3.envelope, &alice.addr, &bob.key).verdict,
            ListVerdict::Rejected(RejectReason::ChainBreak)
        );
        assert!(lb.flush_pending().is_some());
        assert!(!lb.has_pending());
    }

    #[test]
    fn policy_hook_filters() {
        let (alice, bob) = (member(1), member(2));
        let mut la = state(&alice, false);
        let mut lb = state(&bob, false);
        link(&mut la, &bob);
        link(&mut lb, &alice);
        lb.set_policy(Arc::new(|e: &Envelope| !e.body.starts_with(b"spam")));
        let p = la.post(&alice.key, 0, b"spam spam").unwrap();
        assert_eq!(
            lb.on_list_message(&p.envelope, &alice.addr, &bob.key).verdict,
            ListVerdict::Rejected(RejectReason::Policy)
        );
    }

    #[test]
    fn direction_flags() {
        assert_eq!(Link::between(Direction::Both, Direction::Both), Link::BOTH);
        let l = Link::between(Direction::FromList, Direction::Both);
        assert!(!l.send && l.receive);
        let l = Link::between(Direction::ToList, Direction::Both);
        assert!(l.send && !l.receive);
        let l = Link::between(Direction::Both, Direction::ToList);
        assert!(!l.send && l.receive);
    }

    #[test]
    fn tree_rules() {
        let mut tri = MembershipGraph::new(0..3usize);
        tri.add_edge(0, 1);
        tri.add_edge(1, 2);
        tri.add_edge(0, 2);
        assert_eq!(build_tree(&tri).unwrap().len(), 2);

        let mut k5 = MembershipGraph::new(0..5usize);
        for a in 0..5 {
            for b in a + 1..5 {
                k5.add_edge(a, b);
            }
        }
        let t = build_tree(&k5).unwrap();
        assert_eq!(t, BTreeSet::from([(0, 1), (0, 2), (0, 3), (0, 4)]));

        let mut split = MembershipGraph::new(0..4usize);
        split.add_edge(0, 1);
        split.add_edge(2, 3);
        match build_tree(&split) {
            Err(GossipError::Disconnected { components }) => {
                assert_eq!(
                    components,
                    vec![vec!["0".to_string(), "1".into()], vec!["2".into(), "3".into()]]
                );
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_ledger_consensus_ignores_order() {
        let (alice, bob) = (member(1), member(2));
        let mut la = state(&alice, false);
        let mut lb = state(&bob, false);
        link(&mut la, &bob);
        link(&mut lb, &alice);
        let p1 = la.post(&alice.key, 0, b"one").unwrap();
        let p2 = lb.post(&bob.key, 0, b"two").unwrap();
        la.on_list_message(&p2.envelope, &bob.addr, &alice.key);
        lb.on_list_message(&p1.envelope, &alice.addr, &bob.key);
        assert_ne!(la.log()[0].message_id, lb.log()[0].message_id);
        assert!(ledger_consensus_check(&[&la, &lb]).consensus);
    }
}
