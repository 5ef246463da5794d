//! The participant state machine.
//!
//! A node owns one or more unlinkable identities, an address book per
//! identity, a retry queue, inboxes, hosted mailboxes and list memberships.
//! It never touches the network itself: `on_deliver` only updates state and
//! enqueues work, and `retry_tick` pushes due entries through a `Transport`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::addressbook::{AddressBook, BookError, KeyOutcome, RevocationOutcome};
use crate::gossip::{Direction, Link, ListDelivery, ListMode, ListState, ListVerdict, RejectReason};
use crate::identity::{
    generate_mail_key, is_sealed, make_revocation, seal, unseal, verify_revocation, IdentityError, IdentityKeyPair,
    IdentityPublic, MailAddress, MailKey, MailPublic, PublicKey, RevocationKind, RevocationRecord, RevocationSigner,
    RevocationSubject, SecretKey, SubjectPublic,
};
use crate::simnet::{SendOutcome, SimError, TxClass};
use crate::wire::{
    self, decode_reply_path, encode_reply_path, h, ContactCard, Destination, Envelope, RevokeValue, SignatureValue,
    WireError, SIGNED_HEADERS,
};
use crate::SimTime;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("no local identity {0}")]
    UnknownIdentity(String),
    #[error("{0} is not in the address book")]
    UnknownRecipient(MailAddress),
    #[error("{0} has been revoked")]
    RecipientRevoked(MailAddress),
    #[error("local identity {0} has been revoked")]
    IdentityRevoked(MailAddress),
    #[error("no mail key for {0}; exchange keys before relaying")]
    KeyRequired(MailAddress),
    #[error("no gateway host configured")]
    NoGateway,
    #[error("no hosted account {0:?}")]
    UnknownAccount(String),
    #[error("{0:?} is already in use on this node")]
    AccountExists(String),
    #[error("refusing to queue plaintext for relay")]
    PlaintextRelay,
    #[error("not a member of list {0:?}")]
    NotAMember(String),
    #[error("{0}")]
    Book(#[from] BookError),
    #[error("{0}")]
    Identity(#[from] IdentityError),
    #[error("{0}")]
    Wire(#[from] WireError),
    #[error("{0}")]
    Gossip(#[from] crate::gossip::GossipError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub base: SimTime,
    pub cap: SimTime,
    pub expiry: SimTime,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base: 30,
            cap: 3840,
            expiry: 100_000,
            max_attempts: 64,
        }
    }
}

impl RetryPolicy {
    /// Delay after a failure when `attempts` failures preceded it.
    pub fn backoff(&self, attempts: u32) -> SimTime {
        if attempts >= 63 {
            return self.cap;
        }
        self.base.saturating_mul(1u64 << attempts).min(self.cap)
    }

    /// Attempt times for an entry first tried at `first` whose every attempt
    /// fails: `first`, `first + 30`, `first + 90`, ...
    pub fn attempt_times(&self, first: SimTime) -> impl Iterator<Item = SimTime> + '_ {
        (0u32..).scan(first, move |t, k| {
            let now = *t;
            *t = now + self.backoff(k);
            Some(now)
        })
    }

    /// First attempt at or after `online_from`, when every earlier one fails.
    pub fn first_attempt_at_or_after(&self, first: SimTime, online_from: SimTime) -> SimTime {
        self.attempt_times(first)
            .find(|&t| t >= online_from)
            .expect("schedule is unbounded")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SendMode {
    DirectOnly,
    #[default]
    CarrierFallback,
    FanOut,
}

impl std::str::FromStr for SendMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct-only" | "direct" => Ok(SendMode::DirectOnly),
            "carrier-fallback" | "fallback" => Ok(SendMode::CarrierFallback),
            "fan-out" | "fanout" => Ok(SendMode::FanOut),
            other => Err(format!("unknown send mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Route {
    Direct(MailAddress),
    ViaCarrier(MailAddress),
}

impl Route {
    pub fn target(&self) -> &MailAddress {
        match self {
            Route::Direct(a) | Route::ViaCarrier(a) => a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Local,
    /// Held as a carrier; `via` is the local identity that accepted it.
    RelayedFor {
        sender: MailAddress,
        via: MailAddress,
    },
}

#[derive(Debug, Clone)]
pub struct QueuedSend {
    pub id: u64,
    pub envelope: Envelope,
    pub from: MailAddress,
    pub route: Route,
    pub attempts: u32,
    pub next_attempt: SimTime,
    pub expires: SimTime,
    pub origin: Origin,
    pub class: TxClass,
    /// Entries of one carrier-fallback send; the first handoff cancels the rest.
    pub group: Option<u64>,
    /// Direct entry that spawns carrier entries on its first refusal.
    pub fallback: bool,
    pub jitter: SimTime,
    pub history: Vec<SimTime>,
}

impl QueuedSend {
    pub fn message_id(&self) -> &str {
        self.envelope.message_id().unwrap_or("")
    }
}

pub trait Transport {
    fn transmit(
        &mut self,
        from: &MailAddress,
        to: &MailAddress,
        bytes: Vec<u8>,
        message_id: &str,
        class: TxClass,
        jitter_max: SimTime,
    ) -> Result<SendOutcome, SimError>;
}

#[derive(Debug, Clone)]
pub struct LocalIdentity {
    pub name: String,
    pub keypair: IdentityKeyPair,
    pub mail: MailKey,
    /// Keys replaced by revocation; still tried when unsealing.
    pub retired_mail: Vec<MailKey>,
    pub address: MailAddress,
    pub revoked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignatureStatus {
    Verified,
    UnknownKey,
    Unsigned,
}

#[derive(Debug, Clone)]
pub struct StoredMessage {
    pub message_id: String,
    pub from: MailAddress,
    pub channel: MailAddress,
    pub received_at: SimTime,
    pub envelope: Envelope,
    /// `None` when the body could not be unsealed.
    pub plaintext: Option<Vec<u8>>,
    pub signature: SignatureStatus,
}

impl StoredMessage {
    pub fn undecryptable(&self) -> bool {
        self.plaintext.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct HostedMessage {
    pub envelope: Envelope,
    pub received_at: SimTime,
    pub fetched: bool,
}

#[derive(Debug, Clone)]
pub struct HostedAccount {
    pub address: MailAddress,
    /// Held by the host on the account holder's behalf.
    pub key: MailKey,
    pub mailbox: Vec<HostedMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalMessage {
    pub from: String,
    pub to: String,
    pub body: Vec<u8>,
    pub message_id: String,
    pub at: SimTime,
}

#[derive(Debug, Clone)]
struct DeferredSend {
    token: u64,
    from: MailAddress,
    to: MailAddress,
    body: Vec<u8>,
    mode: SendMode,
    confirm: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentRecord {
    pub token: u64,
    pub from: MailAddress,
    pub to: MailAddress,
    pub composed_at: SimTime,
    /// Filled once the message is built; deferred sends wait for a key.
    pub message_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendReport {
    pub token: u64,
    pub message_id: Option<String>,
    pub routes: Vec<Route>,
    pub deferred: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpiredSend {
    pub message_id: String,
    pub target: MailAddress,
    pub at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invitation {
    pub identity: MailAddress,
    pub list_id: String,
    pub from: MailAddress,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeCounters {
    pub duplicates: u64,
    pub list_duplicates: u64,
    pub relayed: u64,
    pub bounces: u64,
    pub rejected: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Reject {
    Parse,
    RelayDenied,
    BadAuthorSig,
    PlaintextRelay,
    NoGateway,
    BadRevocation,
    UnauthenticatedKey,
    UnsolicitedKey,
    UnknownIntroducer,
    UnknownList,
    KeyConflict,
    Undecryptable,
    Malformed,
    List(RejectReason),
}

impl fmt::Display for Reject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Reject::Parse => "parse",
            Reject::RelayDenied => "relay-denied",
            Reject::BadAuthorSig => "bad-author-sig",
            Reject::PlaintextRelay => "plaintext-relay",
            Reject::NoGateway => "no-gateway",
            Reject::BadRevocation => "bad-revocation",
            Reject::UnauthenticatedKey => "unauthenticated-key",
            Reject::UnsolicitedKey => "unsolicited-key",
            Reject::UnknownIntroducer => "unknown-introducer",
            Reject::UnknownList => "unknown-list",
            Reject::KeyConflict => "key-conflict",
            Reject::Undecryptable => "undecryptable",
            Reject::Malformed => "malformed",
            Reject::List(r) => return r.fmt(f),
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Stored {
        identity: MailAddress,
        message_id: String,
        undecryptable: bool,
    },
    HostedStored {
        account: MailAddress,
        message_id: String,
    },
    DuplicateDropped {
        message_id: String,
    },
    Relayed {
        message_id: String,
        to: MailAddress,
    },
    KeyRecorded {
        identity: MailAddress,
        contact: MailAddress,
        outcome: KeyOutcome,
    },
    KeyResponseQueued {
        to: MailAddress,
    },
    KeyConflict {
        identity: MailAddress,
        contact: MailAddress,
        detail: String,
    },
    ContactAdded {
        identity: MailAddress,
        contact: MailAddress,
        introducer: MailAddress,
    },
    RevocationApplied {
        subject: String,
        outcome: RevocationOutcome,
        regossiped: usize,
    },
    ExternalQueued {
        to: String,
        message_id: String,
    },
    ConfirmationReceived {
        message_id: String,
    },
    ConfirmationQueued {
        message_id: String,
    },
    DeferredReleased {
        token: u64,
        message_id: String,
    },
    DeferredFailed {
        token: u64,
        error: String,
    },
    List {
        list_id: String,
        message_id: String,
        verdict: ListVerdict,
        released: Vec<String>,
    },
    ListInvitation {
        list_id: String,
        from: MailAddress,
    },
    Rejected {
        message_id: String,
        reason: Reject,
    },
}

/// Log outcome for a delivery: the first rejection or duplicate wins.
pub fn outcome_of(actions: &[Action]) -> String {
    for a in actions {
        match a {
            Action::Rejected { reason, .. } => return format!("rejected:{reason}"),
            Action::DuplicateDropped { .. } => return "dropped-dup".into(),
            Action::List { verdict, .. } => match verdict {
                ListVerdict::Duplicate => return "dropped-dup".into(),
                ListVerdict::Rejected(r) => return format!("rejected:{r}"),
                _ => {}
            },
            _ => {}
        }
    }
    "ok".into()
}

enum Target {
    Identity(usize),
    Hosted(String),
}

fn rotated_mail_key(old: &MailKey) -> MailKey {
    let d = Sha256::new()
        .chain_update(b"onionmail/rotate/v1")
        .chain_update(old.export().as_bytes())
        .finalize();
    generate_mail_key(u64::from_le_bytes(d[..8].try_into().unwrap()))
}

fn hosted_key(primary: &MailKey, localpart: &str) -> MailKey {
    let d = Sha256::new()
        .chain_update(b"onionmail/hosted/v1")
        .chain_update(primary.export().as_bytes())
        .chain_update(localpart.as_bytes())
        .finalize();
    generate_mail_key(u64::from_le_bytes(d[..8].try_into().unwrap()))
}

/// Message-ID for control envelopes: the unsigned headers are folded into the
/// hashed region so two requests with an empty body never collide.
fn control_id(env: &Envelope) -> String {
    let mut probe = env.clone();
    let mut extra = Vec::new();
    for (name, value) in env.headers() {
        if !SIGNED_HEADERS.contains(&name.as_str()) && name != h::SIGNATURE {
            extra.extend_from_slice(format!("{name}: {value}\r\n").as_bytes());
        }
    }
    extra.extend_from_slice(&env.body);
    probe.body = extra;
    let label = env.from_address().expect("control envelopes carry From").label();
    wire::derive_message_id(&probe, label)
}

#[derive(Debug, Clone)]
pub struct NodeState {
    name: String,
    identities: Vec<LocalIdentity>,
    books: BTreeMap<MailAddress, AddressBook>,
    outbound: Vec<QueuedSend>,
    next_entry: u64,
    next_token: u64,
    seen: BTreeSet<(String, String)>,
    inbox: BTreeMap<MailAddress, Vec<StoredMessage>>,
    hosted: BTreeMap<String, HostedAccount>,
    gateway_host: Option<String>,
    external_outbox: Vec<ExternalMessage>,
    lists: BTreeMap<(String, MailAddress), ListState>,
    deferred: Vec<DeferredSend>,
    key_requests: BTreeSet<(MailAddress, MailAddress)>,
    confirmations: BTreeMap<String, Envelope>,
    known_revocations: BTreeSet<String>,
    expired: Vec<ExpiredSend>,
    bounced: Vec<(String, MailAddress)>,
    invitations: Vec<Invitation>,
    sends: Vec<SentRecord>,
    counters: NodeCounters,
    policy: RetryPolicy,
}

impl NodeState {
    pub fn new(name: &str) -> Self {
        NodeState {
            name: name.to_string(),
            identities: Vec::new(),
            books: BTreeMap::new(),
            outbound: Vec::new(),
            next_entry: 0,
            next_token: 0,
            seen: BTreeSet::new(),
            inbox: BTreeMap::new(),
            hosted: BTreeMap::new(),
            gateway_host: None,
            external_outbox: Vec::new(),
            lists: BTreeMap::new(),
            deferred: Vec::new(),
            key_requests: BTreeSet::new(),
            confirmations: BTreeMap::new(),
            known_revocations: BTreeSet::new(),
            expired: Vec::new(),
            bounced: Vec::new(),
            invitations: Vec::new(),
            sends: Vec::new(),
            counters: NodeCounters::default(),
            policy: RetryPolicy::default(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn policy(&self) -> RetryPolicy {
        self.policy
    }

    pub fn set_policy(&mut self, policy: RetryPolicy) {
        self.policy = policy;
    }

    // -- identities and books ------------------------------------------------

    pub fn add_identity(
        &mut self,
        name: &str,
        keypair: IdentityKeyPair,
        mail: MailKey,
        localpart: &str,
    ) -> Result<MailAddress, NodeError> {
        let address = keypair.address(localpart)?;
        if self.identities.iter().any(|i| i.name == name || i.address == address) {
            return Err(NodeError::AccountExists(name.to_string()));
        }
        self.books.insert(address.clone(), AddressBook::new(address.clone()));
        self.inbox.insert(address.clone(), Vec::new());
        self.identities.push(LocalIdentity {
            name: name.to_string(),
            keypair,
            mail,
            retired_mail: Vec::new(),
            address: address.clone(),
            revoked: false,
        });
        Ok(address)
    }

    pub fn identities(&self) -> &[LocalIdentity] {
        &self.identities
    }

    pub fn identity(&self, address: &MailAddress) -> Option<&LocalIdentity> {
        self.identities.iter().find(|i| &i.address == address)
    }

    pub fn identity_by_name(&self, name: &str) -> Option<&LocalIdentity> {
        self.identities.iter().find(|i| i.name == name)
    }

    fn identity_index(&self, address: &MailAddress) -> Result<usize, NodeError> {
        self.identities
            .iter()
            .position(|i| &i.address == address)
            .ok_or_else(|| NodeError::UnknownIdentity(address.to_string()))
    }

    /// Label of the first identity; hosted accounts live under it.
    pub fn primary_label(&self) -> Option<crate::identity::Label> {
        self.identities.first().map(|i| i.address.label())
    }

    pub fn book(&self, identity: &MailAddress) -> Option<&AddressBook> {
        self.books.get(identity)
    }

    pub fn book_mut(&mut self, identity: &MailAddress) -> Option<&mut AddressBook> {
        self.books.get_mut(identity)
    }

    fn book_of(&mut self, identity: &MailAddress) -> &mut AddressBook {
        self.books.get_mut(identity).expect("every identity has a book")
    }

    pub fn inbox(&self, identity: &MailAddress) -> &[StoredMessage] {
        self.inbox.get(identity).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn inboxes(&self) -> impl Iterator<Item = (&MailAddress, &Vec<StoredMessage>)> {
        self.inbox.iter()
    }

    pub fn outbound(&self) -> &[QueuedSend] {
        &self.outbound
    }

    pub fn counters(&self) -> NodeCounters {
        self.counters
    }

    pub fn confirmations(&self) -> &BTreeMap<String, Envelope> {
        &self.confirmations
    }

    pub fn expired(&self) -> &[ExpiredSend] {
        &self.expired
    }

    /// `(message-id, original sender)` for each relayed message given up on.
    pub fn bounced(&self) -> &[(String, MailAddress)] {
        &self.bounced
    }

    pub fn invitations(&self) -> &[Invitation] {
        &self.invitations
    }

    pub fn sends(&self) -> &[SentRecord] {
        &self.sends
    }

    pub fn external_outbox(&self) -> &[ExternalMessage] {
        &self.external_outbox
    }

    pub fn gateway_host(&self) -> Option<&str> {
        self.gateway_host.as_deref()
    }

    pub fn set_gateway(&mut self, host: &str) -> Result<(), NodeError> {
        if !wire::valid_hostname(host) {
            return Err(WireError::InvalidGateway(host.to_string()).into());
        }
        self.gateway_host = Some(host.to_string());
        Ok(())
    }

    // -- hosted accounts -----------------------------------------------------

    pub fn host_account(&mut self, localpart: &str, key: Option<MailKey>) -> Result<MailAddress, NodeError> {
        let primary = self
            .identities
            .first()
            .ok_or_else(|| NodeError::UnknownIdentity("(no identity to host under)".into()))?;
        let address = primary.address.with_localpart(localpart)?;
        let clash = self.identities.iter().any(|i| i.address.localpart() == localpart);
        if clash || self.hosted.contains_key(localpart) {
            return Err(NodeError::AccountExists(localpart.to_string()));
        }
        let key = key.unwrap_or_else(|| hosted_key(&primary.mail, localpart));
        self.hosted.insert(
            localpart.to_string(),
            HostedAccount {
                address: address.clone(),
                key,
                mailbox: Vec::new(),
            },
        );
        Ok(address)
    }

    pub fn hosted_account(&self, localpart: &str) -> Option<&HostedAccount> {
        self.hosted.get(localpart)
    }

    pub fn hosted_accounts(&self) -> impl Iterator<Item = &HostedAccount> {
        self.hosted.values()
    }

    /// Unfetched envelopes in arrival order; marks them fetched.
    pub fn pull_account(&mut self, localpart: &str) -> Result<Vec<Envelope>, NodeError> {
        let acct = self
            .hosted
            .get_mut(localpart)
            .ok_or_else(|| NodeError::UnknownAccount(localpart.to_string()))?;
        Ok(acct
            .mailbox
            .iter_mut()
            .filter(|m| !m.fetched)
            .map(|m| {
                m.fetched = true;
                m.envelope.clone()
            })
            .collect())
    }

    // -- lists ---------------------------------------------------------------

    pub fn join_list(
        &mut self,
        identity: &MailAddress,
        list_id: &str,
        mode: ListMode,
        ledger: bool,
    ) -> Result<&mut ListState, NodeError> {
        let idx = self.identity_index(identity)?;
        let me = &self.identities[idx];
        let key = (list_id.to_string(), identity.clone());
        let state = ListState::new(list_id, me.address.clone(), me.mail.public(), mode, ledger);
        Ok(self.lists.entry(key).or_insert(state))
    }

    pub fn list(&self, list_id: &str, identity: &MailAddress) -> Option<&ListState> {
        self.lists.get(&(list_id.to_string(), identity.clone()))
    }

    pub fn list_mut(&mut self, list_id: &str, identity: &MailAddress) -> Option<&mut ListState> {
        self.lists.get_mut(&(list_id.to_string(), identity.clone()))
    }

    pub fn lists(&self) -> impl Iterator<Item = &ListState> {
        self.lists.values()
    }

    /// Post to a list; returns the Message-ID.
    pub fn list_post(
        &mut self,
        now: SimTime,
        list_id: &str,
        identity: &MailAddress,
        body: &[u8],
    ) -> Result<String, NodeError> {
        let idx = self.identity_index(identity)?;
        let key = self.identities[idx].mail.clone();
        let list = self
            .lists
            .get_mut(&(list_id.to_string(), identity.clone()))
            .ok_or_else(|| NodeError::NotAMember(list_id.to_string()))?;
        let jitter = list.jitter();
        let fwd = list.post(&key, now, body)?;
        let id = fwd.envelope.message_id().unwrap_or_default().to_string();
        for t in fwd.targets {
            let mut env = fwd.envelope.clone();
            env.set_header(h::TO, t.to_string());
            self.enqueue(
                now,
                identity.clone(),
                env,
                Route::Direct(t),
                Origin::Local,
                None,
                false,
                jitter,
            )?;
        }
        Ok(id)
    }

    /// Drop buffered out-of-order list messages; returns their ids.
    pub fn flush_list_buffers(&mut self) -> Vec<String> {
        self.lists.values_mut().filter_map(ListState::flush_pending).collect()
    }

    pub fn invite_to_list(
        &mut self,
        now: SimTime,
        identity: &MailAddress,
        contact: &MailAddress,
        list_id: &str,
    ) -> Result<String, NodeError> {
        let idx = self.identity_index(identity)?;
        let book = &self.books[identity];
        let c = book
            .get(contact)
            .ok_or_else(|| NodeError::UnknownRecipient(contact.clone()))?;
        if c.revoked {
            return Err(NodeError::RecipientRevoked(contact.clone()));
        }
        let me = &self.identities[idx];
        let card = ContactCard::introduction(me.address.clone(), &me.name, Some(me.mail.fingerprint()));
        let env = self.control(identity, contact, now, |e| {
            e.add_header(h::CONTACT, card.to_string());
            e.set_header(h::LIST, list_id);
        });
        let id = env.message_id().unwrap_or_default().to_string();
        self.enqueue(
            now,
            identity.clone(),
            env,
            Route::Direct(contact.clone()),
            Origin::Local,
            None,
            false,
            0,
        )?;
        Ok(id)
    }

    // -- queueing ------------------------------------------------------------

    fn class_of(env: &Envelope, origin: &Origin) -> TxClass {
        if env.has(h::LIST) && !env.has(h::CONTACT) {
            return TxClass::List;
        }
        if matches!(origin, Origin::RelayedFor { .. }) {
            return TxClass::Relay;
        }
        match (env.header(h::FOR), env.header(h::TO)) {
            (Some(f), Some(t)) if f != t => TxClass::Carry,
            _ => TxClass::Send,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn enqueue(
        &mut self,
        now: SimTime,
        from: MailAddress,
        envelope: Envelope,
        route: Route,
        origin: Origin,
        group: Option<u64>,
        fallback: bool,
        jitter: SimTime,
    ) -> Result<u64, NodeError> {
        let relayed = matches!(route, Route::ViaCarrier(_)) || matches!(origin, Origin::RelayedFor { .. });
        if relayed && !is_sealed(&envelope.body) {
            return Err(NodeError::PlaintextRelay);
        }
        let id = self.next_entry;
        self.next_entry += 1;
        let class = Self::class_of(&envelope, &origin);
        self.outbound.push(QueuedSend {
            id,
            envelope,
            from,
            route,
            attempts: 0,
            next_attempt: now,
            expires: now + self.policy.expiry,
            origin,
            class,
            group,
            fallback,
            jitter,
            history: Vec::new(),
        });
        Ok(id)
    }

    /// Build a control envelope `From`/`To`/`Date`, let `fill` add headers,
    /// then stamp the Message-ID.
    fn control(
        &self,
        from: &MailAddress,
        to: &MailAddress,
        now: SimTime,
        fill: impl FnOnce(&mut Envelope),
    ) -> Envelope {
        let mut env = Envelope::new()
            .with_header(h::FROM, from.to_string())
            .with_header(h::TO, to.to_string())
            .with_header(h::DATE, now.to_string());
        fill(&mut env);
        let id = control_id(&env);
        env.set_header(h::MESSAGE_ID, id);
        env
    }

    fn sign_envelope(key: &MailKey, env: &mut Envelope) {
        let sig = SignatureValue {
            fingerprint: key.fingerprint(),
            signature: key.sign(&wire::signing_bytes(env)),
        };
        env.set_header(h::SIGNATURE, sig.to_string());
    }

    // -- sending -------------------------------------------------------------

    pub fn compose_and_send(
        &mut self,
        now: SimTime,
        from: &MailAddress,
        recipient: &MailAddress,
        body: &[u8],
        mode: SendMode,
        confirm: bool,
    ) -> Result<SendReport, NodeError> {
        let token = self.next_token;
        self.next_token += 1;
        let report = self.compose_inner(now, token, from, recipient, body, mode, confirm)?;
        self.sends.push(SentRecord {
            token,
            from: from.clone(),
            to: recipient.clone(),
            composed_at: now,
            message_id: report.message_id.clone(),
        });
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn compose_inner(
        &mut self,
        now: SimTime,
        token: u64,
        from: &MailAddress,
        recipient: &MailAddress,
        body: &[u8],
        mode: SendMode,
        confirm: bool,
    ) -> Result<SendReport, NodeError> {
        let idx = self.identity_index(from)?;
        if self.identities[idx].revoked {
            return Err(NodeError::IdentityRevoked(from.clone()));
        }
        let contact = self.books[from]
            .get(recipient)
            .ok_or_else(|| NodeError::UnknownRecipient(recipient.clone()))?;
        if contact.revoked {
            return Err(NodeError::RecipientRevoked(recipient.clone()));
        }
        let Some(key) = contact.mail_key else {
            if mode != SendMode::DirectOnly {
                return Err(NodeError::KeyRequired(recipient.clone()));
            }
            if !self.key_requests.contains(&(from.clone(), recipient.clone())) {
                self.request_key(now, from, recipient)?;
            }
            self.deferred.push(DeferredSend {
                token,
                from: from.clone(),
                to: recipient.clone(),
                body: body.to_vec(),
                mode,
                confirm,
            });
            return Ok(SendReport {
                token,
                message_id: None,
                routes: Vec::new(),
                deferred: true,
            });
        };

        let mut env = Envelope::new()
            .with_header(h::FROM, from.to_string())
            .with_header(h::TO, recipient.to_string())
            .with_header(h::FOR, recipient.to_string())
            .with_header(h::DATE, now.to_string());
        if confirm {
            env.set_header(h::CONFIRM_DELIVERY, "yes");
        }
        env.body = seal(&key, body);
        let id = wire::derive_message_id(&env, from.label());
        env.set_header(h::MESSAGE_ID, id.clone());
        Self::sign_envelope(&self.identities[idx].mail, &mut env);

        let mut routes = vec![Route::Direct(recipient.clone())];
        match mode {
            SendMode::DirectOnly => {
                self.enqueue(now, from.clone(), env, routes[0].clone(), Origin::Local, None, false, 0)?;
            }
            SendMode::CarrierFallback => {
                let group = self.next_entry;
                self.enqueue(
                    now,
                    from.clone(),
                    env,
                    routes[0].clone(),
                    Origin::Local,
                    Some(group),
                    true,
                    0,
                )?;
            }
            SendMode::FanOut => {
                self.enqueue(
                    now,
                    from.clone(),
                    env.clone(),
                    routes[0].clone(),
                    Origin::Local,
                    None,
                    false,
                    0,
                )?;
                for c in self.books[from].carriers_for(recipient)? {
                    let mut copy = env.clone();
                    copy.set_header(h::TO, c.to_string());
                    routes.push(Route::ViaCarrier(c.clone()));
                    self.enqueue(
                        now,
                        from.clone(),
                        copy,
                        Route::ViaCarrier(c),
                        Origin::Local,
                        None,
                        false,
                        0,
                    )?;
                }
            }
        }
        Ok(SendReport {
            token,
            message_id: Some(id),
            routes,
            deferred: false,
        })
    }

    /// Send to an external address through a gateway contact.
    pub fn send_external(
        &mut self,
        now: SimTime,
        from: &MailAddress,
        external: &str,
        gateway: &MailAddress,
        body: &[u8],
    ) -> Result<SendReport, NodeError> {
        let idx = self.identity_index(from)?;
        let dest: Destination = external.parse()?;
        let Destination::External(ext) = dest else {
            return Err(WireError::MalformedValue {
                name: h::FOR,
                reason: format!("{external} is not an external address"),
            }
            .into());
        };
        let contact = self.books[from]
            .get(gateway)
            .ok_or_else(|| NodeError::UnknownRecipient(gateway.clone()))?;
        if contact.revoked {
            return Err(NodeError::RecipientRevoked(gateway.clone()));
        }
        let key = contact
            .mail_key
            .ok_or_else(|| NodeError::KeyRequired(gateway.clone()))?;
        let mut env = Envelope::new()
            .with_header(h::FROM, from.to_string())
            .with_header(h::TO, gateway.to_string())
            .with_header(h::FOR, ext.clone())
            .with_header(h::DATE, now.to_string());
        env.body = seal(&key, body);
        let id = wire::derive_message_id(&env, from.label());
        env.set_header(h::MESSAGE_ID, id.clone());
        Self::sign_envelope(&self.identities[idx].mail, &mut env);
        let route = Route::Direct(gateway.clone());
        self.enqueue(now, from.clone(), env, route.clone(), Origin::Local, None, false, 0)?;
        let token = self.next_token;
        self.next_token += 1;
        self.sends.push(SentRecord {
            token,
            from: from.clone(),
            to: gateway.clone(),
            composed_at: now,
            message_id: Some(id.clone()),
        });
        Ok(SendReport {
            token,
            message_id: Some(id),
            routes: vec![route],
            deferred: false,
        })
    }

    pub fn request_key(
        &mut self,
        now: SimTime,
        identity: &MailAddress,
        contact: &MailAddress,
    ) -> Result<String, NodeError> {
        let idx = self.identity_index(identity)?;
        let c = self.books[identity]
            .get(contact)
            .ok_or_else(|| NodeError::UnknownRecipient(contact.clone()))?;
        if c.revoked {
            return Err(NodeError::RecipientRevoked(contact.clone()));
        }
        let mine = self.identities[idx].mail.public().to_hex();
        let env = self.control(identity, contact, now, |e| {
            e.set_header(h::KEY_REQUEST, mine);
        });
        let id = env.message_id().unwrap_or_default().to_string();
        self.key_requests.insert((identity.clone(), contact.clone()));
        self.enqueue(
            now,
            identity.clone(),
            env,
            Route::Direct(contact.clone()),
            Origin::Local,
            None,
            false,
            0,
        )?;
        Ok(id)
    }

    pub fn introduce(
        &mut self,
        now: SimTime,
        identity: &MailAddress,
        to: &MailAddress,
        subject: &MailAddress,
    ) -> Result<String, NodeError> {
        self.identity_index(identity)?;
        let book = &self.books[identity];
        let recipient = book.get(to).ok_or_else(|| NodeError::UnknownRecipient(to.clone()))?;
        if recipient.revoked {
            return Err(NodeError::RecipientRevoked(to.clone()));
        }
        let s = book
            .get(subject)
            .ok_or_else(|| NodeError::UnknownRecipient(subject.clone()))?;
        let card = ContactCard::introduction(
            s.address.clone(),
            &s.display,
            s.fingerprint().or(s.expected_fingerprint),
        );
        let env = self.control(identity, to, now, |e| {
            e.add_header(h::CONTACT, card.to_string());
        });
        let id = env.message_id().unwrap_or_default().to_string();
        self.enqueue(
            now,
            identity.clone(),
            env,
            Route::Direct(to.clone()),
            Origin::Local,
            None,
            false,
            0,
        )?;
        Ok(id)
    }

    /// Revoke a local address or its mail key and tell every contact.
    /// Revoking the key rotates in a fresh one.
    pub fn revoke(
        &mut self,
        now: SimTime,
        identity: &MailAddress,
        kind: RevocationKind,
    ) -> Result<RevocationRecord, NodeError> {
        let idx = self.identity_index(identity)?;
        let me = &self.identities[idx];
        let value = match kind {
            RevocationKind::Address => {
                let rec = make_revocation(
                    RevocationSigner::Identity(&me.keypair),
                    RevocationSubject::Address(me.address.clone()),
                    now,
                )?;
                RevokeValue::for_address(rec, &me.keypair.public())
            }
            RevocationKind::Key => {
                let rec = make_revocation(
                    RevocationSigner::Mail(&me.mail),
                    RevocationSubject::Key(me.mail.fingerprint()),
                    now,
                )?;
                RevokeValue::for_key(rec, &me.mail.public())
            }
        };
        let me = &mut self.identities[idx];
        match kind {
            RevocationKind::Address => me.revoked = true,
            RevocationKind::Key => {
                let fresh = rotated_mail_key(&me.mail);
                let old = std::mem::replace(&mut me.mail, fresh);
                me.retired_mail.push(old);
            }
        }
        self.known_revocations.insert(value.record.signature.to_hex());
        let contacts: Vec<MailAddress> = self.books[identity].contacts().map(|c| c.address.clone()).collect();
        for c in contacts {
            self.queue_revoke(now, identity, &c, &value)?;
        }
        Ok(value.record)
    }

    fn queue_revoke(
        &mut self,
        now: SimTime,
        from: &MailAddress,
        to: &MailAddress,
        value: &RevokeValue,
    ) -> Result<(), NodeError> {
        let env = self.control(from, to, now, |e| {
            e.set_header(h::REVOKE, value.to_string());
        });
        self.enqueue(
            now,
            from.clone(),
            env,
            Route::Direct(to.clone()),
            Origin::Local,
            None,
            false,
            0,
        )?;
        Ok(())
    }

    // -- gateway -------------------------------------------------------------

    /// Rewrite an envelope whose `For` is external into an outbound message.
    pub fn gateway_out(&self, env: &Envelope) -> Result<ExternalMessage, NodeError> {
        let host = self.gateway_host.as_deref().ok_or(NodeError::NoGateway)?;
        let Some(Destination::External(to)) = env.for_destination() else {
            return Err(WireError::MalformedValue {
                name: h::FOR,
                reason: "not an external destination".into(),
            }
            .into());
        };
        let from = env.from_address().ok_or(WireError::Missing {
            line: 0,
            name: h::FROM.into(),
        })?;
        let body = if is_sealed(&env.body) {
            let to_addr = env.to_address().ok_or(NodeError::UnknownIdentity("(To)".into()))?;
            let idx = self.identity_index(&to_addr)?;
            self.unseal_for(idx, &env.body).ok_or(IdentityError::DecryptionFailed)?
        } else {
            env.body.clone()
        };
        Ok(ExternalMessage {
            from: encode_reply_path(&from, host)?,
            to,
            body,
            message_id: env.message_id().unwrap_or_default().to_string(),
            at: 0,
        })
    }

    /// Route an external reply back in. The reply-path username names the
    /// in-system recipient.
    pub fn gateway_in(&mut self, now: SimTime, msg: &ExternalMessage) -> Result<SendReport, NodeError> {
        if self.gateway_host.is_none() {
            return Err(NodeError::NoGateway);
        }
        let inner = decode_reply_path(&msg.to)?;
        let idx = self
            .identities
            .iter()
            .position(|i| !i.revoked && self.books[&i.address].contains(&inner))
            .or_else(|| self.identities.iter().position(|i| !i.revoked))
            .ok_or_else(|| NodeError::UnknownIdentity("(gateway identity)".into()))?;
        let from = self.identities[idx].address.clone();
        let key = self.books[&from]
            .get(&inner)
            .and_then(|c| if c.revoked { None } else { c.mail_key });
        let mut env = Envelope::new()
            .with_header(h::FROM, from.to_string())
            .with_header(h::TO, inner.to_string())
            .with_header(h::FOR, inner.to_string())
            .with_header(h::DATE, now.to_string())
            .with_header(h::EXTERNAL_FROM, msg.from.clone());
        env.body = match key {
            Some(k) => seal(&k, &msg.body),
            None => msg.body.clone(),
        };
        let id = wire::derive_message_id(&env, from.label());
        env.set_header(h::MESSAGE_ID, id.clone());
        Self::sign_envelope(&self.identities[idx].mail, &mut env);
        let route = Route::Direct(inner.clone());
        let group = key.map(|_| self.next_entry);
        self.enqueue(
            now,
            from.clone(),
            env,
            route.clone(),
            Origin::Local,
            group,
            key.is_some(),
            0,
        )?;
        let token = self.next_token;
        self.next_token += 1;
        self.sends.push(SentRecord {
            token,
            from,
            to: inner,
            composed_at: now,
            message_id: Some(id.clone()),
        });
        Ok(SendReport {
            token,
            message_id: Some(id),
            routes: vec![route],
            deferred: false,
        })
    }

    // -- receiving -----------------------------------------------------------

    fn unseal_for(&self, idx: usize, body: &[u8]) -> Option<Vec<u8>> {
        let me = &self.identities[idx];
        std::iter::once(&me.mail)
            .chain(me.retired_mail.iter().rev())
            .find_map(|k| unseal(k, body).ok())
    }

    fn target_of(&self, to: &MailAddress) -> Option<Target> {
        if let Some(i) = self.identities.iter().position(|i| &i.address == to) {
            return Some(Target::Identity(i));
        }
        let acct = self.hosted.get(to.localpart())?;
        (acct.address == *to).then(|| Target::Hosted(to.localpart().to_string()))
    }

    pub fn on_deliver(&mut self, now: SimTime, bytes: &[u8], channel: &MailAddress) -> Vec<Action> {
        let env = match wire::parse(bytes) {
            Ok(e) => e,
            Err(_) => {
                self.counters.rejected += 1;
                return vec![Action::Rejected {
                    message_id: String::new(),
                    reason: Reject::Parse,
                }];
            }
        };
        let id = env.message_id().unwrap_or_default().to_string();
        let actions = self.dispatch(now, env, channel);
        if actions.iter().any(|a| matches!(a, Action::Rejected { .. })) {
            self.counters.rejected += 1;
        }
        if actions.is_empty() {
            return vec![Action::Rejected {
                message_id: id,
                reason: Reject::Malformed,
            }];
        }
        actions
    }

    fn reject(id: &str, reason: Reject) -> Vec<Action> {
        vec![Action::Rejected {
            message_id: id.to_string(),
            reason,
        }]
    }

    fn dispatch(&mut self, now: SimTime, env: Envelope, channel: &MailAddress) -> Vec<Action> {
        let id = env.message_id().unwrap_or_default().to_string();
        let Some(to) = env.to_address() else {
            return Self::reject(&id, Reject::RelayDenied);
        };
        let Some(from) = env.from_address() else {
            return Self::reject(&id, Reject::Malformed);
        };
        let direct = channel.label() == from.label();
        let target = match self.target_of(&to) {
            Some(t) => t,
            None => return Self::reject(&id, Reject::RelayDenied),
        };

        if let (Some(list_id), Target::Identity(idx), false) = (env.header(h::LIST), &target, env.has(h::CONTACT)) {
            let list_id = list_id.to_string();
            return self.on_list(now, *idx, &list_id, &env, channel);
        }

        let for_key = env.header(h::FOR).unwrap_or(to.as_str()).to_string();
        let seen_key = (id.clone(), for_key);
        if self.seen.contains(&seen_key) {
            self.counters.duplicates += 1;
            return vec![Action::DuplicateDropped { message_id: id }];
        }

        let actions = match target {
            Target::Hosted(localpart) => self.on_hosted(now, &localpart, env, direct, &from),
            Target::Identity(idx) => self.on_identity(now, idx, env, direct, &from, channel),
        };
        if !actions.iter().any(|a| matches!(a, Action::Rejected { .. })) {
            self.seen.insert(seen_key);
        }
        actions
    }

    fn on_hosted(
        &mut self,
        now: SimTime,
        localpart: &str,
        env: Envelope,
        direct: bool,
        from: &MailAddress,
    ) -> Vec<Action> {
        let id = env.message_id().unwrap_or_default().to_string();
        if env.has(h::KEY_REQUEST) {
            if !direct {
                return Self::reject(&id, Reject::UnauthenticatedKey);
            }
            let acct = &self.hosted[localpart];
            let (addr, key) = (acct.address.clone(), acct.key.public().to_hex());
            let resp = self.control(&addr, from, now, |e| {
                e.set_header(h::KEY_RESPONSE, key);
            });
            let _ = self.enqueue(
                now,
                addr,
                resp,
                Route::Direct(from.clone()),
                Origin::Local,
                None,
                false,
                0,
            );
            return vec![Action::KeyResponseQueued { to: from.clone() }];
        }
        if !is_sealed(&env.body) && !direct {
            return Self::reject(&id, Reject::PlaintextRelay);
        }
        let acct = self.hosted.get_mut(localpart).expect("target resolved");
        acct.mailbox.push(HostedMessage {
            envelope: env,
            received_at: now,
            fetched: false,
        });
        vec![Action::HostedStored {
            account: acct.address.clone(),
            message_id: id,
        }]
    }

    fn on_identity(
        &mut self,
        now: SimTime,
        idx: usize,
        env: Envelope,
        direct: bool,
        from: &MailAddress,
        channel: &MailAddress,
    ) -> Vec<Action> {
        let id = env.message_id().unwrap_or_default().to_string();
        let me = self.identities[idx].address.clone();

        if let Some(v) = env.header(h::KEY_REQUEST) {
            return self.on_key_message(now, &me, from, v.to_string(), direct, &id, true);
        }
        if let Some(v) = env.header(h::KEY_RESPONSE) {
            return self.on_key_message(now, &me, from, v.to_string(), direct, &id, false);
        }
        if let Some(v) = env.header(h::REVOKE) {
            return self.on_revoke(now, &me, from, v, &id);
        }
        if env.has(h::CONTACT) {
            return self.on_contact(&me, from, &env, &id);
        }
        if let Some(orig) = env.header(h::DELIVERY_CONFIRMED) {
            let orig = orig.to_string();
            self.confirmations.entry(orig.clone()).or_insert(env);
            return vec![Action::ConfirmationReceived { message_id: orig }];
        }

        match env.for_destination() {
            Some(Destination::InSystem(dest)) if dest == me => self.store(now, idx, env, direct, from, channel),
            Some(Destination::InSystem(dest)) => self.relay(now, &me, env, dest, from),
            Some(Destination::External(to)) => {
                if self.gateway_host.is_none() {
                    return Self::reject(&id, Reject::NoGateway);
                }
                if !self.books[&me].get(from).is_some_and(|c| !c.revoked) {
                    return Self::reject(&id, Reject::RelayDenied);
                }
                if !is_sealed(&env.body) && !direct {
                    return Self::reject(&id, Reject::PlaintextRelay);
                }
                match self.gateway_out(&env) {
                    Ok(mut msg) => {
                        msg.at = now;
                        self.external_outbox.push(msg);
                        vec![Action::ExternalQueued { to, message_id: id }]
                    }
                    Err(_) => Self::reject(&id, Reject::Undecryptable),
                }
            }
            None => Self::reject(&id, Reject::Malformed),
        }
    }

    fn store(
        &mut self,
        now: SimTime,
        idx: usize,
        env: Envelope,
        direct: bool,
        from: &MailAddress,
        channel: &MailAddress,
    ) -> Vec<Action> {
        let id = env.message_id().unwrap_or_default().to_string();
        let me = self.identities[idx].address.clone();
        let signature = match env.header(h::SIGNATURE) {
            None => SignatureStatus::Unsigned,
            Some(v) => {
                let known = self.books[&me].get(from).and_then(|c| c.mail_key);
                match (v.parse::<SignatureValue>(), known) {
                    (Err(_), _) => return Self::reject(&id, Reject::BadAuthorSig),
                    (Ok(_), None) => SignatureStatus::UnknownKey,
                    (Ok(sig), Some(k)) => {
                        if sig.fingerprint == k.fingerprint() && k.verify(&wire::signing_bytes(&env), &sig.signature) {
                            SignatureStatus::Verified
                        } else {
                            return Self::reject(&id, Reject::BadAuthorSig);
                        }
                    }
                }
            }
        };
        let plaintext = if is_sealed(&env.body) {
            self.unseal_for(idx, &env.body)
        } else if direct {
            Some(env.body.clone())
        } else {
            return Self::reject(&id, Reject::PlaintextRelay);
        };
        let undecryptable = plaintext.is_none();
        let confirm = env.has(h::CONFIRM_DELIVERY);
        self.inbox.entry(me.clone()).or_default().push(StoredMessage {
            message_id: id.clone(),
            from: from.clone(),
            channel: channel.clone(),
            received_at: now,
            envelope: env,
            plaintext,
            signature,
        });
        let mut actions = vec![Action::Stored {
            identity: me.clone(),
            message_id: id.clone(),
            undecryptable,
        }];
        if confirm {
            let reply = self.control(&me, from, now, |e| {
                e.set_header(h::DELIVERY_CONFIRMED, id.clone());
            });
            if self
                .enqueue(
                    now,
                    me,
                    reply,
                    Route::Direct(from.clone()),
                    Origin::Local,
                    None,
                    false,
                    0,
                )
                .is_ok()
            {
                actions.push(Action::ConfirmationQueued { message_id: id });
            }
        }
        actions
    }

    fn relay(
        &mut self,
        now: SimTime,
        me: &MailAddress,
        mut env: Envelope,
        dest: MailAddress,
        from: &MailAddress,
    ) -> Vec<Action> {
        let id = env.message_id().unwrap_or_default().to_string();
        if !self.books[me].get(from).is_some_and(|c| !c.revoked) {
            return Self::reject(&id, Reject::RelayDenied);
        }
        if !is_sealed(&env.body) {
            return Self::reject(&id, Reject::PlaintextRelay);
        }
        env.set_header(h::TO, dest.to_string());
        let origin = Origin::RelayedFor {
            sender: from.clone(),
            via: me.clone(),
        };
        match self.enqueue(
            now,
            me.clone(),
            env,
            Route::Direct(dest.clone()),
            origin,
            None,
            false,
            0,
        ) {
            Ok(_) => {
                self.counters.relayed += 1;
                vec![Action::Relayed {
                    message_id: id,
                    to: dest,
                }]
            }
            Err(_) => Self::reject(&id, Reject::PlaintextRelay),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_key_message(
        &mut self,
        now: SimTime,
        me: &MailAddress,
        from: &MailAddress,
        value: String,
        direct: bool,
        id: &str,
        is_request: bool,
    ) -> Vec<Action> {
        if !direct {
            return Self::reject(id, Reject::UnauthenticatedKey);
        }
        let Ok(key) = MailPublic::from_hex(&value) else {
            return Self::reject(id, Reject::Malformed);
        };
        let book = self.book_of(me);
        if !book.contains(from) {
            if !is_request {
                return Self::reject(id, Reject::UnsolicitedKey);
            }
            if book.add_contact(from, from.localpart(), None).is_err() {
                return Self::reject(id, Reject::RelayDenied);
            }
        }
        if book.get(from).is_some_and(|c| c.revoked) {
            return Self::reject(id, Reject::RelayDenied);
        }
        let mut actions = Vec::new();
        match book.record_key(from, key) {
            Ok(outcome) => actions.push(Action::KeyRecorded {
                identity: me.clone(),
                contact: from.clone(),
                outcome,
            }),
            Err(e) => {
                actions.push(Action::KeyConflict {
                    identity: me.clone(),
                    contact: from.clone(),
                    detail: e.to_string(),
                });
                actions.push(Action::Rejected {
                    message_id: id.to_string(),
                    reason: Reject::KeyConflict,
                });
                return actions;
            }
        }
        self.key_requests.remove(&(me.clone(), from.clone()));
        if is_request {
            let idx = self.identity_index(me).expect("target identity");
            let mine = self.identities[idx].mail.public().to_hex();
            let resp = self.control(me, from, now, |e| {
                e.set_header(h::KEY_RESPONSE, mine);
            });
            if self
                .enqueue(
                    now,
                    me.clone(),
                    resp,
                    Route::Direct(from.clone()),
                    Origin::Local,
                    None,
                    false,
                    0,
                )
                .is_ok()
            {
                actions.push(Action::KeyResponseQueued { to: from.clone() });
            }
        }
        actions.extend(self.release_deferred(now, me, from));
        actions
    }

    fn release_deferred(&mut self, now: SimTime, me: &MailAddress, contact: &MailAddress) -> Vec<Action> {
        let (ready, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.deferred)
            .into_iter()
            .partition(|d| &d.from == me && &d.to == contact);
        self.deferred = rest;
        let mut out = Vec::new();
        for d in ready {
            match self.compose_inner(now, d.token, &d.from, &d.to, &d.body, d.mode, d.confirm) {
                Ok(r) => {
                    let mid = r.message_id.clone().unwrap_or_default();
                    if let Some(s) = self.sends.iter_mut().find(|s| s.token == d.token) {
                        s.message_id = r.message_id;
                    }
                    out.push(Action::DeferredReleased {
                        token: d.token,
                        message_id: mid,
                    });
                }
                Err(e) => out.push(Action::DeferredFailed {
                    token: d.token,
                    error: e.to_string(),
                }),
            }
        }
        out
    }

    fn on_revoke(&mut self, now: SimTime, me: &MailAddress, from: &MailAddress, value: &str, id: &str) -> Vec<Action> {
        let Ok(v) = value.parse::<RevokeValue>() else {
            return Self::reject(id, Reject::BadRevocation);
        };
        let valid = match v.record.kind() {
            RevocationKind::Address => IdentityPublic::from_hex(&v.public_hex)
                .is_ok_and(|p| verify_revocation(&v.record, SubjectPublic::Identity(&p))),
            RevocationKind::Key => {
                MailPublic::from_hex(&v.public_hex).is_ok_and(|p| verify_revocation(&v.record, SubjectPublic::Mail(&p)))
            }
        };
        if !valid {
            return Self::reject(id, Reject::BadRevocation);
        }
        // Applied to every local book: the node knows all of its own identities.
        let mut outcome = RevocationOutcome::AlreadyApplied;
        let receiving = self.book_of(me).apply_revocation(&v.record);
        for (addr, book) in self.books.iter_mut() {
            if addr != me {
                book.apply_revocation(&v.record);
            }
        }
        if receiving != RevocationOutcome::AlreadyApplied {
            outcome = receiving;
        }
        let first_sight = self.known_revocations.insert(v.record.signature.to_hex());
        let mut regossiped = 0;
        if first_sight {
            let subject = match &v.record.subject {
                RevocationSubject::Address(a) => Some(a.clone()),
                RevocationSubject::Key(_) => None,
            };
            let peers: Vec<MailAddress> = self.books[me]
                .contacts()
                .filter(|c| !c.revoked && &c.address != from && Some(&c.address) != subject.as_ref())
                .map(|c| c.address.clone())
                .collect();
            for p in peers {
                if self.queue_revoke(now, me, &p, &v).is_ok() {
                    regossiped += 1;
                }
            }
        }
        vec![Action::RevocationApplied {
            subject: v.record.subject.to_string(),
            outcome,
            regossiped,
        }]
    }

    fn on_contact(&mut self, me: &MailAddress, from: &MailAddress, env: &Envelope, id: &str) -> Vec<Action> {
        if !self.books[me].get(from).is_some_and(|c| !c.revoked) {
            return Self::reject(id, Reject::UnknownIntroducer);
        }
        if let Some(list_id) = env.header(h::LIST) {
            let list_id = list_id.to_string();
            let key = self.books[me].get(from).and_then(|c| c.mail_key);
            if let (Some(list), Some(k)) = (self.lists.get_mut(&(list_id.clone(), me.clone())), key) {
                list.add_neighbour(from.clone(), k, Link::between(Direction::Both, Direction::Both));
            }
            self.invitations.push(Invitation {
                identity: me.clone(),
                list_id: list_id.clone(),
                from: from.clone(),
            });
            return vec![Action::ListInvitation {
                list_id,
                from: from.clone(),
            }];
        }
        let mut actions = Vec::new();
        let cards: Vec<ContactCard> = match env.headers_named(h::CONTACT).map(str::parse).collect() {
            Ok(c) => c,
            Err(_) => return Self::reject(id, Reject::Malformed),
        };
        for card in cards {
            if &card.address == me {
                continue;
            }
            let book = self.book_of(me);
            if book.add_contact(&card.address, &card.display, Some(from)).is_err() {
                continue;
            }
            if let Some(fp) = card.fingerprint {
                if let Err(e) = book.expect_fingerprint(&card.address, fp) {
                    actions.push(Action::KeyConflict {
                        identity: me.clone(),
                        contact: card.address.clone(),
                        detail: e.to_string(),
                    });
                    continue;
                }
            }
            actions.push(Action::ContactAdded {
                identity: me.clone(),
                contact: card.address,
                introducer: from.clone(),
            });
        }
        if actions.is_empty() {
            return Self::reject(id, Reject::Malformed);
        }
        actions
    }

    fn on_list(
        &mut self,
        now: SimTime,
        idx: usize,
        list_id: &str,
        env: &Envelope,
        channel: &MailAddress,
    ) -> Vec<Action> {
        let me = self.identities[idx].address.clone();
        let key = self.identities[idx].mail.clone();
        let id = env.message_id().unwrap_or_default().to_string();
        let Some(list) = self.lists.get_mut(&(list_id.to_string(), me.clone())) else {
            return Self::reject(&id, Reject::UnknownList);
        };
        let jitter = list.jitter();
        let ListDelivery {
            message_id,
            verdict,
            forwards,
            released,
        } = list.on_list_message(env, channel, &key);
        if verdict == ListVerdict::Duplicate {
            self.counters.list_duplicates += 1;
        }
        for fwd in forwards {
            for t in fwd.targets {
                let mut copy = fwd.envelope.clone();
                copy.set_header(h::TO, t.to_string());
                let _ = self.enqueue(
                    now,
                    me.clone(),
                    copy,
                    Route::Direct(t),
                    Origin::Local,
                    None,
                    false,
                    jitter,
                );
            }
        }
        vec![Action::List {
            list_id: list_id.to_string(),
            message_id,
            verdict,
            released,
        }]
    }

    // -- retry queue ---------------------------------------------------------

    fn queue_bounce(&mut self, now: SimTime, entry: &QueuedSend) {
        let Origin::RelayedFor { sender, via } = &entry.origin else {
            return;
        };
        let id = entry.message_id().to_string();
        self.bounced.push((id.clone(), sender.clone()));
        self.counters.bounces += 1;
        let text = format!(
            "undeliverable: {} for {} after {} attempts",
            id,
            entry.route.target(),
            entry.attempts
        );
        let key = self.books[via].get(sender).and_then(|c| c.mail_key);
        let mut env = Envelope::new()
            .with_header(h::FROM, via.to_string())
            .with_header(h::TO, sender.to_string())
            .with_header(h::FOR, sender.to_string())
            .with_header(h::DATE, now.to_string());
        env.body = match key {
            Some(k) => seal(&k, text.as_bytes()),
            None => text.into_bytes(),
        };
        let mid = wire::derive_message_id(&env, via.label());
        env.set_header(h::MESSAGE_ID, mid);
        if let Ok(idx) = self.identity_index(via) {
            Self::sign_envelope(&self.identities[idx].mail, &mut env);
        }
        let _ = self.enqueue(
            now,
            via.clone(),
            env,
            Route::Direct(sender.clone()),
            Origin::Local,
            None,
            false,
            0,
        );
    }

    fn drop_entry(&mut self, now: SimTime, i: usize) {
        let e = self.outbound.remove(i);
        match e.origin {
            Origin::Local => self.expired.push(ExpiredSend {
                message_id: e.message_id().to_string(),
                target: e.route.target().clone(),
                at: now,
            }),
            Origin::RelayedFor { .. } => self.queue_bounce(now, &e),
        }
    }

    /// Drop expired entries; if `online`, attempt every due entry once.
    pub fn retry_tick(
        &mut self,
        now: SimTime,
        online: bool,
        transport: &mut dyn Transport,
    ) -> Result<TickReport, SimError> {
        let mut report = TickReport::default();
        while let Some(i) = self.outbound.iter().position(|e| now >= e.expires) {
            self.drop_entry(now, i);
            report.expired += 1;
        }
        if !online {
            return Ok(report);
        }
        let mut tried = BTreeSet::new();
        loop {
            let next = self
                .outbound
                .iter()
                .enumerate()
                .filter(|(_, e)| e.next_attempt <= now && !tried.contains(&e.id))
                .min_by_key(|(_, e)| (e.next_attempt, e.id))
                .map(|(i, _)| i);
            let Some(i) = next else { break };
            let e = &mut self.outbound[i];
            tried.insert(e.id);
            let mid = e.message_id().to_string();
            let outcome = transport.transmit(
                &e.from,
                e.route.target(),
                e.envelope.serialize(),
                &mid,
                e.class,
                e.jitter,
            )?;
            e.history.push(now);
            report.attempted += 1;
            match outcome {
                SendOutcome::Scheduled(_) => {
                    report.scheduled += 1;
                    let done = self.outbound.remove(i);
                    if let Some(g) = done.group {
                        self.outbound.retain(|x| x.group != Some(g));
                    }
                }
                SendOutcome::Refused(_) => {
                    report.refused += 1;
                    let before = e.attempts;
                    e.attempts += 1;
                    e.next_attempt = now + self.policy.backoff(before);
                    let spawn = e.fallback && before == 0;
                    let (from, env, group) = (e.from.clone(), e.envelope.clone(), e.group);
                    if e.attempts >= self.policy.max_attempts {
                        self.drop_entry(now, i);
                        report.expired += 1;
                    }
                    if spawn {
                        self.spawn_carriers(now, from, env, group);
                    }
                }
            }
        }
        Ok(report)
    }

    fn spawn_carriers(&mut self, now: SimTime, from: MailAddress, env: Envelope, group: Option<u64>) {
        let Some(Destination::InSystem(dest)) = env.for_destination() else {
            return;
        };
        let carriers = self.books[&from].carriers_for(&dest).unwrap_or_default();
        for c in carriers {
            let mut copy = env.clone();
            copy.set_header(h::TO, c.to_string());
            let _ = self.enqueue(
                now,
                from.clone(),
                copy,
                Route::ViaCarrier(c),
                Origin::Local,
                group,
                false,
                0,
            );
        }
    }

    /// When the node next needs a tick.
    pub fn next_deadline(&self, online: bool) -> Option<SimTime> {
        self.outbound
            .iter()
            .map(|e| {
                if online {
                    e.next_attempt.min(e.expires)
                } else {
                    e.expires
                }
            })
            .min()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TickReport {
    pub attempted: u32,
    pub scheduled: u32,
    pub refused: u32,
    pub expired: u32,
}
