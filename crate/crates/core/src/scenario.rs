//! Scenario scripts: a line-oriented description of a world, a timeline of
//! actions, and assertions over the result.
//!
//! Parsing checks names against earlier declarations; key material and
//! addresses are only resolved when the script runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::gossip::{Direction, ListMode};
use crate::identity::{generate_identity, generate_mail_key, MailAddress, RevocationKind};
use crate::node::{ExternalMessage, NodeState, SendMode, SignatureStatus};
use crate::simnet::{Interval, NodeId, TxClass};
use crate::wire::{encode_reply_path, GENESIS_HASH};
use crate::world::{ActionOutput, Tamper, World, WorldAction};
use crate::SimTime;

/// Event budget for a single `RUN`.
pub const MAX_EVENTS: u64 = 5_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AddrRef {
    /// `node.id`
    Identity { node: String, id: String },
    /// `account@node`
    Hosted { account: String, node: String },
    /// A literal in-system address.
    Literal(MailAddress),
    /// An address outside the system.
    External(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Who {
    Node(String),
    Identity { node: String, id: String },
    Hosted { account: String, node: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predicate {
    Delivered {
        who: Who,
        tag: String,
        at: Option<SimTime>,
        latency: Option<SimTime>,
        verified: bool,
        body: Option<String>,
    },
    NotDelivered {
        who: Who,
        tag: String,
    },
    Duplicates {
        node: String,
        count: u64,
    },
    Transmissions {
        tag: String,
        count: u64,
        class: Option<TxClass>,
    },
    Consensus {
        list: String,
        expect: bool,
        fork: Option<usize>,
    },
    InboxCount {
        who: Who,
        count: usize,
    },
    Bounced {
        tag: String,
        expect: bool,
    },
    HasKey {
        holder: (String, String),
        of: (String, String),
    },
    Rejected {
        list: String,
        tag: String,
        reason: String,
        by: Option<usize>,
    },
    External {
        node: String,
        count: usize,
        from: Option<String>,
    },
    SendError {
        tag: String,
    },
    Revoked {
        holder: (String, String),
        of: (String, String),
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Directive {
    Seed(u64),
    Node(String),
    Identity {
        node: String,
        name: String,
        seed: u64,
        localpart: String,
    },
    Host {
        node: String,
        localpart: String,
        seed: Option<u64>,
    },
    Gateway {
        node: String,
        host: String,
    },
    Contact {
        node: String,
        id: String,
        of: (String, String),
        via: Option<(String, Option<String>)>,
        key: bool,
    },
    Carrier {
        node: String,
        id: String,
        dest: (String, String),
        carrier: (String, String),
    },
    ExchangeKeys {
        a: (String, String),
        b: (String, String),
        t: SimTime,
    },
    Introduce {
        t: SimTime,
        node: String,
        id: String,
        to: (String, String),
        subject: (String, String),
    },
    Online {
        node: String,
        start: SimTime,
        end: Option<SimTime>,
    },
    LinkLatency {
        a: String,
        b: String,
        units: SimTime,
    },
    Partition {
        start: SimTime,
        end: SimTime,
        a: Vec<String>,
        b: Vec<String>,
    },
    Send {
        t: SimTime,
        node: String,
        id: String,
        to: AddrRef,
        via: Option<(String, Option<String>)>,
        body: String,
        mode: SendMode,
        confirm: bool,
        tag: Option<String>,
    },
    ListCreate {
        name: String,
        mode: ListMode,
        ledger: bool,
        jitter: SimTime,
    },
    ListJoin {
        name: String,
        node: String,
        id: String,
        dir: Direction,
    },
    ListLink {
        name: String,
        a: (String, Option<String>),
        b: (String, Option<String>),
    },
    ListPost {
        t: SimTime,
        name: String,
        node: String,
        id: String,
        body: String,
        tag: Option<String>,
    },
    Inject {
        t: SimTime,
        name: String,
        node: String,
        id: String,
        tamper: Tamper,
        to: Option<(String, Option<String>)>,
        tag: Option<String>,
    },
    External {
        t: SimTime,
        node: String,
        from: String,
        to: AddrRef,
        body: String,
        tag: Option<String>,
    },
    Revoke {
        t: SimTime,
        node: String,
        id: String,
        kind: RevocationKind,
    },
    Run {
        until: Option<SimTime>,
    },
    Assert {
        text: String,
        predicate: Predicate,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Scenario {
    pub directives: Vec<(usize, Directive)>,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

struct Args<'a> {
    line: usize,
    words: Vec<String>,
    pos: usize,
    directive: &'a str,
}

impl Args<'_> {
    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError {
            line: self.line,
            message: format!("{}: {}", self.directive, msg.into()),
        }
    }

    fn next(&mut self, what: &str) -> Result<String, ParseError> {
        let w = self
            .words
            .get(self.pos)
            .cloned()
            .ok_or_else(|| self.err(format!("missing {what}")))?;
        self.pos += 1;
        Ok(w)
    }

    fn num(&mut self, what: &str) -> Result<u64, ParseError> {
        let w = self.next(what)?;
        w.parse()
            .map_err(|_| self.err(format!("{what} must be a non-negative integer, got {w:?}")))
    }

    fn expect(&mut self, lit: &str) -> Result<(), ParseError> {
        let w = self.next(lit)?;
        if w != lit {
            return Err(self.err(format!("expected {lit:?}, got {w:?}")));
        }
        Ok(())
    }

    fn rest(&mut self) -> Vec<String> {
        let r = self.words[self.pos..].to_vec();
        self.pos = self.words.len();
        r
    }

    fn done(&self) -> Result<(), ParseError> {
        match self.words.get(self.pos) {
            Some(w) => Err(self.err(format!("unexpected argument {w:?}"))),
            None => Ok(()),
        }
    }
}

/// `key=value` options and bare flags after the positional arguments.
struct Opts {
    kv: BTreeMap<String, String>,
    flags: BTreeSet<String>,
}

impl Opts {
    fn parse(words: Vec<String>, keys: &[&str], flags: &[&str], a: &Args<'_>) -> Result<Opts, ParseError> {
        let mut o = Opts {
            kv: BTreeMap::new(),
            flags: BTreeSet::new(),
        };
        for w in words {
            if let Some((k, v)) = w.split_once('=') {
                if !keys.contains(&k) {
                    return Err(a.err(format!("unknown option {k:?}")));
                }
                if o.kv.insert(k.to_string(), v.to_string()).is_some() {
                    return Err(a.err(format!("option {k:?} given twice")));
                }
            } else if flags.contains(&w.as_str()) {
                o.flags.insert(w);
            } else {
                return Err(a.err(format!("unexpected argument {w:?}")));
            }
        }
        Ok(o)
    }

    fn num(&self, k: &str, a: &Args<'_>) -> Result<Option<u64>, ParseError> {
        self.kv
            .get(k)
            .map(|v| v.parse().map_err(|_| a.err(format!("{k} must be an integer"))))
            .transpose()
    }
}

#[derive(Default)]
struct Declared {
    nodes: BTreeSet<String>,
    identities: BTreeSet<(String, String)>,
    accounts: BTreeSet<(String, String)>,
    lists: BTreeSet<String>,
    tags: BTreeSet<String>,
}

impl Declared {
    fn node(&self, a: &Args<'_>, n: &str) -> Result<(), ParseError> {
        if self.nodes.contains(n) {
            Ok(())
        } else {
            Err(a.err(format!("node {n:?} is not declared")))
        }
    }

    fn identity(&self, a: &Args<'_>, n: &str, id: &str) -> Result<(), ParseError> {
        self.node(a, n)?;
        if self.identities.contains(&(n.to_string(), id.to_string())) {
            Ok(())
        } else {
            Err(a.err(format!("identity {n}.{id} is not declared")))
        }
    }

    fn list(&self, a: &Args<'_>, l: &str) -> Result<(), ParseError> {
        if self.lists.contains(l) {
            Ok(())
        } else {
            Err(a.err(format!("list {l:?} is not declared")))
        }
    }

    fn tag(&self, a: &Args<'_>, t: &str) -> Result<(), ParseError> {
        if self.tags.contains(t) {
            Ok(())
        } else {
            Err(a.err(format!("tag {t:?} is not defined by an earlier action")))
        }
    }

    fn new_tag(&mut self, a: &Args<'_>, t: Option<&String>) -> Result<(), ParseError> {
        if let Some(t) = t {
            if !self.tags.insert(t.clone()) {
                return Err(a.err(format!("tag {t:?} used twice")));
            }
        }
        Ok(())
    }

    /// `node.id` or `node` (first identity, resolved at run time).
    fn member(&self, a: &Args<'_>, w: &str) -> Result<(String, Option<String>), ParseError> {
        match w.split_once('.') {
            Some((n, id)) => {
                self.identity(a, n, id)?;
                Ok((n.to_string(), Some(id.to_string())))
            }
            None => {
                self.node(a, w)?;
                Ok((w.to_string(), None))
            }
        }
    }

    fn ident_ref(&self, a: &Args<'_>, w: &str) -> Result<(String, String), ParseError> {
        let (n, id) = w
            .split_once('.')
            .ok_or_else(|| a.err(format!("expected node.identity, got {w:?}")))?;
        self.identity(a, n, id)?;
        Ok((n.to_string(), id.to_string()))
    }

    fn who(&self, a: &Args<'_>, w: &str) -> Result<Who, ParseError> {
        if let Some((acct, n)) = w.split_once('@') {
            self.node(a, n)?;
            if !self.accounts.contains(&(n.to_string(), acct.to_string())) {
                return Err(a.err(format!("account {acct}@{n} is not hosted")));
            }
            return Ok(Who::Hosted {
                account: acct.to_string(),
                node: n.to_string(),
            });
        }
        Ok(match self.member(a, w)? {
            (n, Some(id)) => Who::Identity { node: n, id },
            (n, None) => Who::Node(n),
        })
    }

    fn addr(&self, a: &Args<'_>, w: &str) -> Result<AddrRef, ParseError> {
        if let Some((n, id)) = w.split_once('.') {
            if self.nodes.contains(n) {
                self.identity(a, n, id)?;
                return Ok(AddrRef::Identity {
                    node: n.to_string(),
                    id: id.to_string(),
                });
            }
        }
        if let Some((acct, n)) = w.split_once('@') {
            if self.nodes.contains(n) {
                return match self.who(a, w)? {
                    Who::Hosted { account, node } => Ok(AddrRef::Hosted { account, node }),
                    _ => unreachable!(),
                };
            }
            let _ = acct;
            if let Ok(m) = w.parse::<MailAddress>() {
                return Ok(AddrRef::Literal(m));
            }
            return match w.parse::<crate::wire::Destination>() {
                Ok(crate::wire::Destination::External(e)) => Ok(AddrRef::External(e)),
                _ => Err(a.err(format!("{w:?} is not an address"))),
            };
        }
        Err(a.err(format!("{w:?} is not an address reference")))
    }
}

fn parse_interval_end(a: &Args<'_>, w: &str) -> Result<Option<SimTime>, ParseError> {
    if w == "inf" {
        return Ok(None);
    }
    w.parse()
        .map(Some)
        .map_err(|_| a.err(format!("interval end must be an integer or inf, got {w:?}")))
}

fn parse_sets(a: &Args<'_>, words: Vec<String>) -> Result<(Vec<String>, Vec<String>), ParseError> {
    let joined = words.join(" ");
    let mut sets = Vec::new();
    let mut rest = joined.trim();
    while !rest.is_empty() {
        let inner = rest
            .strip_prefix('{')
            .and_then(|r| r.split_once('}'))
            .ok_or_else(|| a.err("node sets must look like {a,b}"))?;
        sets.push(
            inner
                .0
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect::<Vec<_>>(),
        );
        rest = inner.1.trim();
    }
    match <[Vec<String>; 2]>::try_from(sets) {
        Ok([x, y]) => Ok((x, y)),
        Err(_) => Err(a.err("expected exactly two node sets")),
    }
}

fn class_of(a: &Args<'_>, s: &str) -> Result<TxClass, ParseError> {
    Ok(match s {
        "send" => TxClass::Send,
        "carry" => TxClass::Carry,
        "relay" => TxClass::Relay,
        "list" => TxClass::List,
        other => return Err(a.err(format!("unknown class {other:?}"))),
    })
}

fn parse_predicate(a: &mut Args<'_>, d: &Declared) -> Result<Predicate, ParseError> {
    let kind = a.next("predicate")?;
    let p = match kind.as_str() {
        "delivered" => {
            let who = {
                let w = a.next("recipient")?;
                d.who(a, &w)
            }?;
            let tag = a.next("tag")?;
            d.tag(a, &tag)?;
            let o = Opts::parse(a.rest(), &["at", "latency", "body"], &["verified"], a)?;
            Predicate::Delivered {
                who,
                tag,
                at: o.num("at", a)?,
                latency: o.num("latency", a)?,
                verified: o.flags.contains("verified"),
                body: o.kv.get("body").cloned(),
            }
        }
        "not-delivered" => {
            let who = {
                let w = a.next("recipient")?;
                d.who(a, &w)
            }?;
            let tag = a.next("tag")?;
            d.tag(a, &tag)?;
            Predicate::NotDelivered { who, tag }
        }
        "duplicates" => {
            let node = a.next("node")?;
            d.node(a, &node)?;
            Predicate::Duplicates {
                node,
                count: a.num("count")?,
            }
        }
        "transmissions" => {
            let tag = a.next("tag")?;
            d.tag(a, &tag)?;
            let count = a.num("count")?;
            let o = Opts::parse(a.rest(), &["class"], &[], a)?;
            let class = o.kv.get("class").map(|c| class_of(a, c)).transpose()?;
            Predicate::Transmissions { tag, count, class }
        }
        "consensus" => {
            let list = a.next("list")?;
            d.list(a, &list)?;
            let expect = match a.next("true|false")?.as_str() {
                "true" => true,
                "false" => false,
                other => return Err(a.err(format!("expected true or false, got {other:?}"))),
            };
            let o = Opts::parse(a.rest(), &["fork"], &[], a)?;
            Predicate::Consensus {
                list,
                expect,
                fork: o.num("fork", a)?.map(|f| f as usize),
            }
        }
        "inbox-count" => {
            let who = {
                let w = a.next("recipient")?;
                d.who(a, &w)
            }?;
            Predicate::InboxCount {
                who,
                count: a.num("count")? as usize,
            }
        }
        "bounced" => {
            let tag = a.next("tag")?;
            d.tag(a, &tag)?;
            let expect = match a.rest().first().map(String::as_str) {
                None | Some("yes") | Some("true") => true,
                Some("no") | Some("false") => false,
                Some(other) => return Err(a.err(format!("unexpected {other:?}"))),
            };
            Predicate::Bounced { tag, expect }
        }
        "has-key" => Predicate::HasKey {
            holder: {
                let w = a.next("holder")?;
                d.ident_ref(a, &w)
            }?,
            of: {
                let w = a.next("contact")?;
                d.ident_ref(a, &w)
            }?,
        },
        "revoked" => Predicate::Revoked {
            holder: {
                let w = a.next("holder")?;
                d.ident_ref(a, &w)
            }?,
            of: {
                let w = a.next("contact")?;
                d.ident_ref(a, &w)
            }?,
        },
        "rejected" => {
            let list = a.next("list")?;
            d.list(a, &list)?;
            let tag = a.next("tag")?;
            d.tag(a, &tag)?;
            let reason = a.next("reason")?;
            let o = Opts::parse(a.rest(), &["by"], &[], a)?;
            let by = match o.kv.get("by").map(String::as_str) {
                None | Some("all") => None,
                Some(n) => Some(n.parse().map_err(|_| a.err("by must be all or a count"))?),
            };
            Predicate::Rejected { list, tag, reason, by }
        }
        "external" => {
            let node = a.next("node")?;
            d.node(a, &node)?;
            let count = a.num("count")? as usize;
            let o = Opts::parse(a.rest(), &["from"], &[], a)?;
            Predicate::External {
                node,
                count,
                from: o.kv.get("from").cloned(),
            }
        }
        "send-error" => {
            let tag = a.next("tag")?;
            d.tag(a, &tag)?;
            Predicate::SendError { tag }
        }
        other => return Err(a.err(format!("unknown predicate {other:?}"))),
    };
    a.done()?;
    Ok(p)
}

/// Re-quote a word for the assertion log so it reads like the script.
fn quote_word(w: &str) -> String {
    if !w.contains([' ', '"', '\\']) {
        return w.to_string();
    }
    match w.split_once('=') {
        Some((k, v)) if !k.contains(' ') => format!("{k}={v:?}"),
        _ => format!("{w:?}"),
    }
}

fn split_words(line: &str) -> Option<Vec<String>> {
    // `->` and `<-` are plain words; shlex handles the quoted bodies.
    shlex::split(line)
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ParseError> {
    let mut sc = Scenario::default();
    let mut d = Declared::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let words = split_words(trimmed).ok_or_else(|| ParseError {
            line,
            message: "unbalanced quotes".into(),
        })?;
        let directive = words[0].clone();
        let mut a = Args {
            line,
            words,
            pos: 1,
            directive: &directive,
        };
        let dir = match directive.as_str() {
            "SEED" => {
                let s = a.num("seed")?;
                sc.seed = s;
                Directive::Seed(s)
            }
            "NODE" => {
                let n = a.next("node name")?;
                if n.contains(['.', '@']) {
                    return Err(a.err("node names may not contain '.' or '@'"));
                }
                if !d.nodes.insert(n.clone()) {
                    return Err(a.err(format!("node {n:?} declared twice")));
                }
                Directive::Node(n)
            }
            "IDENTITY" => {
                let node = a.next("node")?;
                d.node(&a, &node)?;
                let name = a.next("identity name")?;
                if name.contains(['.', '@']) {
                    return Err(a.err("identity names may not contain '.' or '@'"));
                }
                let o = Opts::parse(a.rest(), &["seed", "localpart"], &[], &a)?;
                let seed = o.num("seed", &a)?.ok_or_else(|| a.err("seed= is required"))?;
                if !d.identities.insert((node.clone(), name.clone())) {
                    return Err(a.err(format!("identity {node}.{name} declared twice")));
                }
                Directive::Identity {
                    node,
                    name,
                    seed,
                    localpart: o.kv.get("localpart").cloned().unwrap_or_else(|| "user".into()),
                }
            }
            "HOST" => {
                let node = a.next("node")?;
                d.node(&a, &node)?;
                let localpart = a.next("localpart")?;
                let o = Opts::parse(a.rest(), &["seed"], &[], &a)?;
                d.accounts.insert((node.clone(), localpart.clone()));
                Directive::Host {
                    node,
                    localpart,
                    seed: o.num("seed", &a)?,
                }
            }
            "GATEWAY" => {
                let node = a.next("node")?;
                d.node(&a, &node)?;
                let host = a.next("hostname")?;
                a.done()?;
                Directive::Gateway { node, host }
            }
            "CONTACT" => {
                let node = a.next("node")?;
                let id = a.next("identity")?;
                d.identity(&a, &node, &id)?;
                a.expect("<-")?;
                let bn = a.next("contact node")?;
                let bid = a.next("contact identity")?;
                d.identity(&a, &bn, &bid)?;
                let rest = a.rest();
                let mut via = None;
                let mut key = false;
                let mut it = rest.into_iter().peekable();
                while let Some(w) = it.next() {
                    match w.as_str() {
                        "via" => {
                            let c = it.next().ok_or_else(|| a.err("via needs a node"))?;
                            via = Some(if c.contains('.') {
                                d.member(&a, &c)?
                            } else {
                                d.node(&a, &c)?;
                                match it.peek() {
                                    Some(nid) if d.identities.contains(&(c.clone(), nid.clone())) => {
                                        let nid = it.next().unwrap();
                                        (c, Some(nid))
                                    }
                                    _ => (c, None),
                                }
                            });
                        }
                        "key" => key = true,
                        other => return Err(a.err(format!("unexpected argument {other:?}"))),
                    }
                }
                Directive::Contact {
                    node,
                    id,
                    of: (bn, bid),
                    via,
                    key,
                }
            }
            "CARRIER" => {
                let node = a.next("node")?;
                let id = a.next("identity")?;
                d.identity(&a, &node, &id)?;
                let dn = a.next("destination node")?;
                let did = a.next("destination identity")?;
                d.identity(&a, &dn, &did)?;
                let cn = a.next("carrier node")?;
                let cid = a.next("carrier identity")?;
                d.identity(&a, &cn, &cid)?;
                a.done()?;
                Directive::Carrier {
                    node,
                    id,
                    dest: (dn, did),
                    carrier: (cn, cid),
                }
            }
            "EXCHANGE-KEYS" => {
                let an = a.next("node")?;
                let aid = a.next("identity")?;
                d.identity(&a, &an, &aid)?;
                let bn = a.next("node")?;
                let bid = a.next("identity")?;
                d.identity(&a, &bn, &bid)?;
                let o = Opts::parse(a.rest(), &["t"], &[], &a)?;
                Directive::ExchangeKeys {
                    a: (an, aid),
                    b: (bn, bid),
                    t: o.num("t", &a)?.unwrap_or(0),
                }
            }
            "INTRODUCE" => {
                let t = a.num("time")?;
                let node = a.next("node")?;
                let id = a.next("identity")?;
                d.identity(&a, &node, &id)?;
                let to = {
                    let w = a.next("recipient")?;
                    d.ident_ref(&a, &w)
                }?;
                let subject = {
                    let w = a.next("subject")?;
                    d.ident_ref(&a, &w)
                }?;
                a.done()?;
                Directive::Introduce {
                    t,
                    node,
                    id,
                    to,
                    subject,
                }
            }
            "ONLINE" => {
                let node = a.next("node")?;
                d.node(&a, &node)?;
                let start = a.num("start")?;
                let end = {
                    let w = a.next("end")?;
                    parse_interval_end(&a, &w)
                }?;
                a.done()?;
                Directive::Online { node, start, end }
            }
            "LINK-LATENCY" => {
                let x = a.next("node")?;
                d.node(&a, &x)?;
                let y = a.next("node")?;
                d.node(&a, &y)?;
                let units = a.num("latency")?;
                a.done()?;
                Directive::LinkLatency { a: x, b: y, units }
            }
            "PARTITION" => {
                let start = a.num("start")?;
                let end = a.num("end")?;
                let (x, y) = parse_sets(&a, a.words[a.pos..].to_vec())?;
                for n in x.iter().chain(&y) {
                    d.node(&a, n)?;
                }
                Directive::Partition { start, end, a: x, b: y }
            }
            "SEND" => {
                let t = a.num("time")?;
                let node = a.next("node")?;
                let id = a.next("identity")?;
                d.identity(&a, &node, &id)?;
                a.expect("->")?;
                let to = {
                    let w = a.next("recipient")?;
                    d.addr(&a, &w)
                }?;
                let mut body = None;
                let mut mode = SendMode::CarrierFallback;
                let mut confirm = false;
                let mut tag = None;
                let mut via = None;
                let rest = a.rest();
                let mut it = rest.into_iter();
                while let Some(w) = it.next() {
                    if let Some(b) = w.strip_prefix("body=") {
                        body = Some(b.to_string());
                    } else if let Some(t) = w.strip_prefix("tag=") {
                        tag = Some(t.to_string());
                    } else if w == "confirm" {
                        confirm = true;
                    } else if w == "via" {
                        let g = it.next().ok_or_else(|| a.err("via needs a gateway node"))?;
                        via = Some(d.member(&a, &g)?);
                    } else if let Ok(m) = w.parse::<SendMode>() {
                        mode = m;
                    } else {
                        return Err(a.err(format!("unexpected argument {w:?}")));
                    }
                }
                if matches!(to, AddrRef::External(_)) && via.is_none() {
                    return Err(a.err("external recipients need `via <gateway>`"));
                }
                d.new_tag(&a, tag.as_ref())?;
                Directive::Send {
                    t,
                    node,
                    id,
                    to,
                    via,
                    body: body.ok_or_else(|| a.err("body= is required"))?,
                    mode,
                    confirm,
                    tag,
                }
            }
            "LIST-CREATE" => {
                let name = a.next("list name")?;
                let o = Opts::parse(a.rest(), &["mode", "jitter"], &["ledger"], &a)?;
                let mode = match o.kv.get("mode").map(String::as_str) {
                    None | Some("flood") => ListMode::Flood,
                    Some("tree") => ListMode::Tree,
                    Some(other) => return Err(a.err(format!("unknown mode {other:?}"))),
                };
                if !d.lists.insert(name.clone()) {
                    return Err(a.err(format!("list {name:?} declared twice")));
                }
                Directive::ListCreate {
                    name,
                    mode,
                    ledger: o.flags.contains("ledger"),
                    jitter: o.num("jitter", &a)?.unwrap_or(0),
                }
            }
            "LIST-JOIN" => {
                let name = a.next("list")?;
                d.list(&a, &name)?;
                let node = a.next("node")?;
                let id = a.next("identity")?;
                d.identity(&a, &node, &id)?;
                let o = Opts::parse(a.rest(), &["dir"], &[], &a)?;
                let dir =
                    o.kv.get("dir")
                        .map(|s| s.parse().map_err(|e: String| a.err(e)))
                        .transpose()?
                        .unwrap_or_default();
                Directive::ListJoin { name, node, id, dir }
            }
            "LIST-LINK" => {
                let name = a.next("list")?;
                d.list(&a, &name)?;
                let x = {
                    let w = a.next("member")?;
                    d.member(&a, &w)
                }?;
                let y = {
                    let w = a.next("member")?;
                    d.member(&a, &w)
                }?;
                a.done()?;
                Directive::ListLink { name, a: x, b: y }
            }
            "LIST-POST" => {
                let t = a.num("time")?;
                let name = a.next("list")?;
                d.list(&a, &name)?;
                let node = a.next("node")?;
                let id = a.next("identity")?;
                d.identity(&a, &node, &id)?;
                let o = Opts::parse(a.rest(), &["body", "tag"], &[], &a)?;
                let tag = o.kv.get("tag").cloned();
                d.new_tag(&a, tag.as_ref())?;
                Directive::ListPost {
                    t,
                    name,
                    node,
                    id,
                    body: o.kv.get("body").cloned().ok_or_else(|| a.err("body= is required"))?,
                    tag,
                }
            }
            "INJECT" => {
                let t = a.num("time")?;
                let name = a.next("list")?;
                d.list(&a, &name)?;
                let node = a.next("node")?;
                let id = a.next("identity")?;
                d.identity(&a, &node, &id)?;
                let o = Opts::parse(a.rest(), &["tamper", "prev", "to", "tag"], &[], &a)?;
                let tamper = match o.kv.get("tamper").map(String::as_str) {
                    Some("body") => Tamper::Body,
                    Some("prev-hash") => {
                        let prev = match o.kv.get("prev").map(String::as_str) {
                            None | Some("genesis") => GENESIS_HASH.to_string(),
                            Some(h) if h.len() == 64 && h.bytes().all(|c| c.is_ascii_hexdigit()) => h.to_lowercase(),
                            Some(h) => return Err(a.err(format!("prev must be genesis or 64 hex chars, got {h:?}"))),
                        };
                        Tamper::PrevHash(prev)
                    }
                    _ => return Err(a.err("tamper=body|prev-hash is required")),
                };
                let to = match o.kv.get("to").map(String::as_str) {
                    None | Some("*") => None,
                    Some(m) => Some(d.member(&a, m)?),
                };
                let tag = o.kv.get("tag").cloned();
                d.new_tag(&a, tag.as_ref())?;
                Directive::Inject {
                    t,
                    name,
                    node,
                    id,
                    tamper,
                    to,
                    tag,
                }
            }
            "EXTERNAL" => {
                let t = a.num("time")?;
                let node = a.next("gateway node")?;
                d.node(&a, &node)?;
                let o = Opts::parse(a.rest(), &["from", "to", "body", "tag"], &[], &a)?;
                let from = o.kv.get("from").cloned().ok_or_else(|| a.err("from= is required"))?;
                let to_raw = o.kv.get("to").cloned().ok_or_else(|| a.err("to= is required"))?;
                let to = match to_raw.strip_prefix("reply:") {
                    Some(r) => {
                        let (n, id) = d.ident_ref(&a, r)?;
                        AddrRef::Identity { node: n, id }
                    }
                    None => AddrRef::External(to_raw),
                };
                let tag = o.kv.get("tag").cloned();
                d.new_tag(&a, tag.as_ref())?;
                Directive::External {
                    t,
                    node,
                    from,
                    to,
                    body: o.kv.get("body").cloned().ok_or_else(|| a.err("body= is required"))?,
                    tag,
                }
            }
            "REVOKE" => {
                let t = a.num("time")?;
                let node = a.next("node")?;
                let id = a.next("identity")?;
                d.identity(&a, &node, &id)?;
                let o = Opts::parse(a.rest(), &[], &["key", "address"], &a)?;
                let kind = if o.flags.contains("key") {
                    RevocationKind::Key
                } else {
                    RevocationKind::Address
                };
                Directive::Revoke { t, node, id, kind }
            }
            "RUN" => {
                let o = Opts::parse(a.rest(), &["until"], &[], &a)?;
                Directive::Run {
                    until: o.num("until", &a)?,
                }
            }
            "ASSERT" => {
                let text = a.words[1..].iter().map(|w| quote_word(w)).collect::<Vec<_>>().join(" ");
                let predicate = parse_predicate(&mut a, &d)?;
                Directive::Assert { text, predicate }
            }
            other => {
                return Err(ParseError {
                    line,
                    message: format!("unknown directive {other:?}"),
                })
            }
        };
        if !matches!(
            dir,
            Directive::Contact { .. } | Directive::Send { .. } | Directive::Partition { .. }
        ) {
            a.done()?;
        }
        sc.directives.push((line, dir));
    }
    Ok(sc)
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutput {
    /// 0: all assertions pass; 1: an assertion failed; 2: scenario error.
    pub exit_code: i32,
    pub log: String,
    pub metrics: String,
    pub mailboxes: String,
    pub ledgers: String,
    pub failures: Vec<String>,
    pub error: Option<ScenarioError>,
}

/// Receipt time, plaintext and author-signature status of one inbox copy.
type Receipt = (SimTime, Option<Vec<u8>>, SignatureStatus);

struct Runner {
    world: World,
    tags: BTreeMap<String, (usize, Option<NodeId>)>,
    failures: Vec<String>,
    passes: u64,
}

impl Runner {
    fn node(&self, name: &str) -> Result<NodeId, String> {
        self.world.node_id(name).map_err(|e| e.to_string())
    }

    fn ident(&self, node: &str, id: &str) -> Result<(NodeId, MailAddress), String> {
        let n = self.node(node)?;
        let a = self
            .world
            .node(n)
            .identity_by_name(id)
            .ok_or_else(|| format!("identity {node}.{id} not created"))?
            .address
            .clone();
        Ok((n, a))
    }

    fn member(&self, m: &(String, Option<String>)) -> Result<(NodeId, MailAddress), String> {
        match &m.1 {
            Some(id) => self.ident(&m.0, id),
            None => {
                let n = self.node(&m.0)?;
                let a = self
                    .world
                    .node(n)
                    .identities()
                    .first()
                    .ok_or_else(|| format!("node {} has no identity", m.0))?
                    .address
                    .clone();
                Ok((n, a))
            }
        }
    }

    fn address(&self, r: &AddrRef) -> Result<MailAddress, String> {
        match r {
            AddrRef::Identity { node, id } => Ok(self.ident(node, id)?.1),
            AddrRef::Hosted { account, node } => {
                let n = self.node(node)?;
                Ok(self
                    .world
                    .node(n)
                    .hosted_account(account)
                    .ok_or_else(|| format!("account {account}@{node} not hosted"))?
                    .address
                    .clone())
            }
            AddrRef::Literal(a) => Ok(a.clone()),
            AddrRef::External(e) => Err(format!("{e} is not an in-system address")),
        }
    }

    fn schedule(
        &mut self,
        t: SimTime,
        action: WorldAction,
        tag: &Option<String>,
        node: Option<NodeId>,
    ) -> Result<(), String> {
        if t < self.world.net.clock() {
            return Err(format!(
                "time {t} is before the current clock {}",
                self.world.net.clock()
            ));
        }
        let i = self.world.schedule_action(t, action).map_err(|e| e.to_string())?;
        if let Some(tag) = tag {
            self.tags.insert(tag.clone(), (i, node));
        }
        Ok(())
    }

    /// Message-ID behind a tag, once known.
    fn tag_id(&self, tag: &str) -> Option<String> {
        let (i, node) = self.tags.get(tag)?;
        match self.world.action_result(*i)? {
            Ok(ActionOutput::Sent { token, message_id }) => message_id.clone().or_else(|| {
                let n = self.world.node((*node)?);
                n.sends().iter().find(|s| s.token == *token)?.message_id.clone()
            }),
            Ok(ActionOutput::Posted { message_id }) | Ok(ActionOutput::Injected { message_id, .. }) => {
                Some(message_id.clone())
            }
            _ => None,
        }
    }

    fn apply(&mut self, d: &Directive, online: &BTreeMap<String, Vec<Interval>>) -> Result<(), String> {
        let e = |x: crate::world::WorldError| x.to_string();
        match d {
            Directive::Seed(_) => {}
            Directive::Node(n) => {
                let id = self.world.add_node(n).map_err(e)?;
                if let Some(iv) = online.get(n) {
                    self.world.set_online(id, iv.clone()).map_err(e)?;
                }
            }
            Directive::Identity {
                node,
                name,
                seed,
                localpart,
            } => {
                let n = self.node(node)?;
                self.world
                    .add_identity(n, name, generate_identity(*seed), generate_mail_key(*seed), localpart)
                    .map_err(e)?;
            }
            Directive::Host { node, localpart, seed } => {
                let n = self.node(node)?;
                self.world
                    .node_mut(n)
                    .host_account(localpart, seed.map(generate_mail_key))
                    .map_err(|x| x.to_string())?;
            }
            Directive::Gateway { node, host } => {
                let n = self.node(node)?;
                self.world.node_mut(n).set_gateway(host).map_err(|x| x.to_string())?;
            }
            Directive::Contact { node, id, of, via, key } => {
                let (n, me) = self.ident(node, id)?;
                let (bn, them) = self.ident(&of.0, &of.1)?;
                let via = via.as_ref().map(|v| self.member(v)).transpose()?.map(|x| x.1);
                let their_key = self.world.node(bn).identity(&them).unwrap().mail.public();
                let book = self.world.node_mut(n).book_mut(&me).unwrap();
                book.add_contact(&them, &of.1, via.as_ref())
                    .map_err(|x| x.to_string())?;
                if *key {
                    book.record_key(&them, their_key).map_err(|x| x.to_string())?;
                }
            }
            Directive::Carrier {
                node,
                id,
                dest,
                carrier,
            } => {
                let (n, me) = self.ident(node, id)?;
                let (_, d) = self.ident(&dest.0, &dest.1)?;
                let (_, c) = self.ident(&carrier.0, &carrier.1)?;
                let book = self.world.node_mut(n).book_mut(&me).unwrap();
                book.add_carrier(&d, &c).map_err(|x| x.to_string())?;
            }
            Directive::ExchangeKeys { a, b, t } => {
                let (n, me) = self.ident(&a.0, &a.1)?;
                let (_, them) = self.ident(&b.0, &b.1)?;
                let book = self.world.node_mut(n).book_mut(&me).unwrap();
                if !book.contains(&them) {
                    book.add_contact(&them, &b.1, None).map_err(|x| x.to_string())?;
                }
                self.schedule(
                    *t,
                    WorldAction::RequestKey {
                        node: n,
                        identity: me,
                        contact: them,
                    },
                    &None,
                    Some(n),
                )?;
            }
            Directive::Introduce {
                t,
                node,
                id,
                to,
                subject,
            } => {
                let (n, me) = self.ident(node, id)?;
                let to = self.ident(&to.0, &to.1)?.1;
                let subject = self.ident(&subject.0, &subject.1)?.1;
                self.schedule(
                    *t,
                    WorldAction::Introduce {
                        node: n,
                        identity: me,
                        to,
                        subject,
                    },
                    &None,
                    Some(n),
                )?;
            }
            Directive::Online { .. } => {}
            Directive::LinkLatency { a, b, units } => {
                let (x, y) = (self.node(a)?, self.node(b)?);
                let lx: Vec<_> = self
                    .world
                    .node(x)
                    .identities()
                    .iter()
                    .map(|i| i.address.label())
                    .collect();
                let ly: Vec<_> = self
                    .world
                    .node(y)
                    .identities()
                    .iter()
                    .map(|i| i.address.label())
                    .collect();
                for p in &lx {
                    for q in &ly {
                        self.world.net.set_latency(*p, *q, *units);
                        self.world.net.set_latency(*q, *p, *units);
                    }
                }
            }
            Directive::Partition { start, end, a, b } => {
                let labels = |r: &Runner, names: &[String]| -> Result<BTreeSet<_>, String> {
                    let mut s = BTreeSet::new();
                    for n in names {
                        let id = r.node(n)?;
                        s.extend(r.world.node(id).identities().iter().map(|i| i.address.label()));
                    }
                    Ok(s)
                };
                let (x, y) = (labels(self, a)?, labels(self, b)?);
                self.world.net.add_partition(*start, *end, x, y);
            }
            Directive::Send {
                t,
                node,
                id,
                to,
                via,
                body,
                mode,
                confirm,
                tag,
            } => {
                let (n, me) = self.ident(node, id)?;
                let action = match to {
                    AddrRef::External(ext) => {
                        let gw = self.member(via.as_ref().expect("checked at parse"))?.1;
                        WorldAction::SendExternal {
                            node: n,
                            from: me,
                            external: ext.clone(),
                            gateway: gw,
                            body: body.clone().into_bytes(),
                        }
                    }
                    other => WorldAction::Send {
                        node: n,
                        from: me,
                        to: self.address(other)?,
                        body: body.clone().into_bytes(),
                        mode: *mode,
                        confirm: *confirm,
                    },
                };
                self.schedule(*t, action, tag, Some(n))?;
            }
            Directive::ListCreate {
                name,
                mode,
                ledger,
                jitter,
            } => self.world.create_list(name, *mode, *ledger, *jitter).map_err(e)?,
            Directive::ListJoin { name, node, id, dir } => {
                let (n, me) = self.ident(node, id)?;
                self.world.join_list(name, n, &me, *dir).map_err(e)?;
            }
            Directive::ListLink { name, a, b } => {
                let ma = self.list_member(name, a)?;
                let mb = self.list_member(name, b)?;
                self.world.link_list(name, ma, mb).map_err(e)?;
                if self.world.list_spec(name).is_some_and(|s| s.mode == ListMode::Tree) {
                    self.world.build_list_tree(name).ok();
                }
            }
            Directive::ListPost {
                t,
                name,
                node,
                id,
                body,
                tag,
            } => {
                let member = self.list_member(name, &(node.clone(), Some(id.clone())))?;
                let n = self.node(node)?;
                self.schedule(
                    *t,
                    WorldAction::ListPost {
                        list: name.clone(),
                        member,
                        body: body.clone().into_bytes(),
                    },
                    tag,
                    Some(n),
                )?;
            }
            Directive::Inject {
                t,
                name,
                node,
                id,
                tamper,
                to,
                tag,
            } => {
                let member = self.list_member(name, &(node.clone(), Some(id.clone())))?;
                let target = to.as_ref().map(|m| self.list_member(name, m)).transpose()?;
                self.schedule(
                    *t,
                    WorldAction::InjectList {
                        list: name.clone(),
                        member,
                        tamper: tamper.clone(),
                        target,
                    },
                    tag,
                    None,
                )?;
            }
            Directive::External {
                t,
                node,
                from,
                to,
                body,
                tag,
            } => {
                let n = self.node(node)?;
                let to = match to {
                    AddrRef::Identity { node: rn, id } => {
                        let inner = self.ident(rn, id)?.1;
                        let host = self
                            .world
                            .node(n)
                            .gateway_host()
                            .ok_or_else(|| format!("{node} has no gateway host"))?;
                        encode_reply_path(&inner, host).map_err(|x| x.to_string())?
                    }
                    AddrRef::External(s) => s.clone(),
                    _ => unreachable!("parser only builds identity or external targets"),
                };
                self.schedule(
                    *t,
                    WorldAction::ExternalIn {
                        node: n,
                        message: ExternalMessage {
                            from: from.clone(),
                            to,
                            body: body.clone().into_bytes(),
                            message_id: String::new(),
                            at: *t,
                        },
                    },
                    tag,
                    Some(n),
                )?;
            }
            Directive::Revoke { t, node, id, kind } => {
                let (n, me) = self.ident(node, id)?;
                self.schedule(
                    *t,
                    WorldAction::Revoke {
                        node: n,
                        identity: me,
                        kind: *kind,
                    },
                    &None,
                    Some(n),
                )?;
            }
            Directive::Run { until } => {
                match until {
                    Some(t) => self.world.run_until(*t).map(|_| ()),
                    None => self.world.run_to_quiescence(MAX_EVENTS).map(|_| ()),
                }
                .map_err(e)?;
            }
            Directive::Assert { text, predicate } => {
                let verdict = self.check(predicate);
                let outcome = if verdict.is_ok() { "pass" } else { "fail" };
                self.world.net.log_note(&format!("assert {text} outcome={outcome}"));
                match verdict {
                    Ok(()) => self.passes += 1,
                    Err(why) => self.failures.push(format!("ASSERT {text}: {why}")),
                }
            }
        }
        Ok(())
    }

    fn list_member(&self, list: &str, m: &(String, Option<String>)) -> Result<usize, String> {
        let (_, addr) = self.member(m)?;
        self.world
            .list_member_index(list, &addr)
            .ok_or_else(|| format!("{addr} has not joined list {list:?}"))
    }

    /// Inbox entries (received time, message) visible to `who`.
    fn received(&self, who: &Who, id: &str) -> Result<Vec<Receipt>, String> {
        let collect = |node: &NodeState, addr: Option<&MailAddress>| {
            node.inboxes()
                .filter(|(a, _)| addr.is_none_or(|x| x == *a))
                .flat_map(|(_, msgs)| msgs.iter())
                .filter(|m| m.message_id == id)
                .map(|m| (m.received_at, m.plaintext.clone(), m.signature))
                .collect::<Vec<_>>()
        };
        Ok(match who {
            Who::Node(n) => collect(self.world.node(self.node(n)?), None),
            Who::Identity { node, id: ident } => {
                let (n, a) = self.ident(node, ident)?;
                collect(self.world.node(n), Some(&a))
            }
            Who::Hosted { account, node } => {
                let n = self.world.node(self.node(node)?);
                let acct = n
                    .hosted_account(account)
                    .ok_or_else(|| format!("account {account}@{node} not hosted"))?;
                acct.mailbox
                    .iter()
                    .filter(|m| m.envelope.message_id() == Some(id))
                    .map(|m| (m.received_at, None, SignatureStatus::UnknownKey))
                    .collect()
            }
        })
    }

    fn inbox_count(&self, who: &Who) -> Result<usize, String> {
        Ok(match who {
            Who::Node(n) => self.world.node(self.node(n)?).inboxes().map(|(_, m)| m.len()).sum(),
            Who::Identity { node, id } => {
                let (n, a) = self.ident(node, id)?;
                self.world.node(n).inbox(&a).len()
            }
            Who::Hosted { account, node } => self
                .world
                .node(self.node(node)?)
                .hosted_account(account)
                .map_or(0, |a| a.mailbox.len()),
        })
    }

    fn composed_at(&self, id: &str) -> Option<SimTime> {
        self.world
            .nodes()
            .iter()
            .flat_map(|n| n.sends())
            .find(|s| s.message_id.as_deref() == Some(id))
            .map(|s| s.composed_at)
    }

    fn check(&self, p: &Predicate) -> Result<(), String> {
        let need_id = |tag: &str| self.tag_id(tag).ok_or_else(|| format!("tag {tag} has no message yet"));
        match p {
            Predicate::Delivered {
                who,
                tag,
                at,
                latency,
                verified,
                body,
            } => {
                let id = need_id(tag)?;
                let got = self.received(who, &id)?;
                let Some((when, plain, sig)) = got.into_iter().min_by_key(|g| g.0) else {
                    return Err(format!("{id} not in the inbox"));
                };
                if let Some(at) = at {
                    if when != *at {
                        return Err(format!("received at {when}, expected {at}"));
                    }
                }
                if let Some(l) = latency {
                    let sent = self.composed_at(&id).ok_or("send time unknown")?;
                    if when - sent != *l {
                        return Err(format!("latency {}, expected {l}", when - sent));
                    }
                }
                if *verified && sig != SignatureStatus::Verified {
                    return Err(format!("author signature status {sig:?}"));
                }
                if let Some(b) = body {
                    if plain.as_deref() != Some(b.as_bytes()) {
                        return Err("body differs".into());
                    }
                }
                Ok(())
            }
            Predicate::NotDelivered { who, tag } => match self.tag_id(tag) {
                None => Ok(()),
                Some(id) if self.received(who, &id)?.is_empty() => Ok(()),
                Some(id) => Err(format!("{id} was delivered")),
            },
            Predicate::Duplicates { node, count } => {
                let got = self.world.node(self.node(node)?).counters().duplicates;
                (got == *count)
                    .then_some(())
                    .ok_or_else(|| format!("{got} duplicates suppressed"))
            }
            Predicate::Transmissions { tag, count, class } => {
                let id = need_id(tag)?;
                let got: u64 = match class {
                    Some(c) => self.world.transmissions(&id, *c),
                    None => [TxClass::Send, TxClass::Carry, TxClass::Relay, TxClass::List]
                        .iter()
                        .map(|c| self.world.transmissions(&id, *c))
                        .sum(),
                };
                (got == *count)
                    .then_some(())
                    .ok_or_else(|| format!("{got} transmissions"))
            }
            Predicate::Consensus { list, expect, fork } => {
                let r = self.world.list_consensus(list);
                if r.consensus != *expect {
                    return Err(r.to_string());
                }
                if let Some(f) = fork {
                    let at = r.divergence.as_ref().map(|d| d.position);
                    if at != Some(*f) {
                        return Err(format!("fork at {at:?}"));
                    }
                }
                Ok(())
            }
            Predicate::InboxCount { who, count } => {
                let got = self.inbox_count(who)?;
                (got == *count).then_some(()).ok_or_else(|| format!("{got} messages"))
            }
            Predicate::Bounced { tag, expect } => {
                let id = need_id(tag)?;
                let got = self
                    .world
                    .nodes()
                    .iter()
                    .any(|n| n.bounced().iter().any(|(b, _)| *b == id));
                (got == *expect).then_some(()).ok_or_else(|| format!("bounced={got}"))
            }
            Predicate::HasKey { holder, of } => {
                let (hn, ha) = self.ident(&holder.0, &holder.1)?;
                let (on, oa) = self.ident(&of.0, &of.1)?;
                let actual = self.world.node(on).identity(&oa).unwrap().mail.public();
                let held = self.world.node(hn).book(&ha).unwrap().get(&oa).and_then(|c| c.mail_key);
                match held {
                    Some(k) if k == actual => Ok(()),
                    Some(k) => Err(format!("holds {} not {}", k.fingerprint(), actual.fingerprint())),
                    None => Err("no key held".into()),
                }
            }
            Predicate::Revoked { holder, of } => {
                let (hn, ha) = self.ident(&holder.0, &holder.1)?;
                let (_, oa) = self.ident(&of.0, &of.1)?;
                let c = self.world.node(hn).book(&ha).unwrap().get(&oa);
                c.is_some_and(|c| c.revoked)
                    .then_some(())
                    .ok_or_else(|| "not marked revoked".to_string())
            }
            Predicate::Rejected { list, tag, reason, by } => {
                let id = need_id(tag)?;
                let states = self.world.list_states(list);
                let hits = states
                    .iter()
                    .filter(|s| s.rejections().iter().any(|(m, r)| *m == id && r.to_string() == *reason))
                    .count();
                let want = match by {
                    Some(n) => *n,
                    None => match self.tags.get(tag).and_then(|(i, _)| self.world.action_result(*i)) {
                        Some(Ok(ActionOutput::Injected { targets, .. })) => *targets,
                        _ => states.len().saturating_sub(1),
                    },
                };
                if hits != want {
                    return Err(format!("{hits} members rejected with {reason}; expected {want}"));
                }
                Ok(())
            }
            Predicate::External { node, count, from } => {
                let out = self.world.node(self.node(node)?).external_outbox();
                let got = out
                    .iter()
                    .filter(|m| from.as_ref().is_none_or(|f| &m.from == f))
                    .count();
                (got == *count)
                    .then_some(())
                    .ok_or_else(|| format!("{got} external messages"))
            }
            Predicate::SendError { tag } => match self.tags.get(tag).and_then(|(i, _)| self.world.action_result(*i)) {
                Some(Err(_)) => Ok(()),
                Some(Ok(_)) => Err("action succeeded".into()),
                None => Err("action has not run".into()),
            },
        }
    }

    fn metrics(&self) -> String {
        let mut m: BTreeMap<String, String> = BTreeMap::new();
        let stats = self.world.net.stats();
        m.insert("events".into(), stats.events.to_string());
        m.insert("net.scheduled".into(), stats.scheduled.to_string());
        m.insert("net.refused".into(), stats.refused.to_string());
        m.insert("net.delivered".into(), stats.delivered.to_string());
        m.insert("clock".into(), self.world.net.clock().to_string());
        let (mut dup, mut ldup, mut bounces, mut relayed) = (0, 0, 0, 0);
        let mut first_receipt: BTreeMap<&str, SimTime> = BTreeMap::new();
        for n in self.world.nodes() {
            let c = n.counters();
            dup += c.duplicates;
            ldup += c.list_duplicates;
            bounces += c.bounces;
            relayed += c.relayed;
            m.insert(format!("node.{}.duplicates", n.name()), c.duplicates.to_string());
            m.insert(format!("node.{}.bounces", n.name()), c.bounces.to_string());
            m.insert(format!("node.{}.rejected", n.name()), c.rejected.to_string());
            m.insert(format!("node.{}.expired", n.name()), n.expired().len().to_string());
            for (_, msgs) in n.inboxes() {
                for s in msgs {
                    let e = first_receipt.entry(&s.message_id).or_insert(s.received_at);
                    *e = (*e).min(s.received_at);
                }
            }
            for a in n.hosted_accounts() {
                for h in &a.mailbox {
                    if let Some(id) = h.envelope.message_id() {
                        let e = first_receipt.entry(id).or_insert(h.received_at);
                        *e = (*e).min(h.received_at);
                    }
                }
            }
        }
        m.insert("duplicates.total".into(), dup.to_string());
        m.insert("list.duplicates.total".into(), ldup.to_string());
        m.insert("bounces.total".into(), bounces.to_string());
        m.insert("relayed.total".into(), relayed.to_string());
        for n in self.world.nodes() {
            for s in n.sends() {
                if let Some(id) = &s.message_id {
                    if let Some(r) = first_receipt.get(id.as_str()) {
                        m.insert(format!("latency.{id}"), (r - s.composed_at).to_string());
                    }
                }
            }
        }
        for tag in self.tags.keys() {
            if let Some(id) = self.tag_id(tag) {
                m.insert(format!("tag.{tag}"), id);
            }
        }
        for list in self.world.list_names() {
            let r = self.world.list_consensus(list);
            m.insert(format!("list.{list}.consensus"), r.consensus.to_string());
            let mut ids = BTreeSet::new();
            for s in self.world.list_states(list) {
                ids.extend(s.log().iter().map(|e| e.message_id.clone()));
                for (id, _) in s.rejections() {
                    ids.insert(id.clone());
                }
            }
            for id in ids {
                m.insert(
                    format!("list.{list}.tx.{id}"),
                    self.world.transmissions(&id, TxClass::List).to_string(),
                );
            }
        }
        m.insert("assertions.pass".into(), self.passes.to_string());
        m.insert("assertions.fail".into(), self.failures.len().to_string());
        m.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn mailboxes(&self) -> String {
        let esc = |b: &[u8]| String::from_utf8_lossy(b).escape_default().to_string();
        let mut s = String::new();
        for n in self.world.nodes() {
            for ident in n.identities() {
                let _ = writeln!(s, "== {} {} {}", n.name(), ident.name, ident.address);
                for m in n.inbox(&ident.address) {
                    let sig = match m.signature {
                        SignatureStatus::Verified => "verified",
                        SignatureStatus::UnknownKey => "unknown-key",
                        SignatureStatus::Unsigned => "unsigned",
                    };
                    let body = m.plaintext.as_deref().map_or("[undecryptable]".to_string(), esc);
                    let ext = m
                        .envelope
                        .header(crate::wire::h::EXTERNAL_FROM)
                        .map(|e| format!(" external-from={e}"))
                        .unwrap_or_default();
                    let _ = writeln!(
                        s,
                        "{}\t{}\t{}\t{}{}\t{}",
                        m.received_at, m.message_id, m.from, sig, ext, body
                    );
                }
            }
            for a in n.hosted_accounts() {
                let _ = writeln!(s, "== {} account {}", n.name(), a.address);
                for h in &a.mailbox {
                    let _ = writeln!(
                        s,
                        "{}\t{}\t{}\t{}",
                        h.received_at,
                        h.envelope.message_id().unwrap_or(""),
                        h.envelope.header(crate::wire::h::FROM).unwrap_or(""),
                        if h.fetched { "fetched" } else { "new" }
                    );
                }
            }
            if !n.external_outbox().is_empty() {
                let _ = writeln!(s, "== {} external-outbox", n.name());
                for x in n.external_outbox() {
                    let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", x.at, x.message_id, x.from, x.to, esc(&x.body));
                }
            }
        }
        s
    }

    fn ledgers(&self) -> String {
        let mut s = String::new();
        for list in self.world.list_names() {
            let Some(spec) = self.world.list_spec(list) else {
                continue;
            };
            for (i, m) in spec.members.iter().enumerate() {
                let node = self.world.node(m.node);
                let who = node.identity(&m.address).map_or("?", |x| x.name.as_str());
                let _ = writeln!(s, "== {} {}.{} {}", list, node.name(), who, m.address);
                if let Some(st) = self.world.list_state(list, i) {
                    s.push_str(&st.dump());
                }
            }
        }
        s
    }
}

/// Run a parsed scenario. `seed` overrides the script's `SEED`.
pub fn run_scenario(sc: &Scenario, seed: Option<u64>) -> RunOutput {
    run_scenario_world(sc, seed).0
}

/// As [`run_scenario`], also handing back the final world for inspection.
pub fn run_scenario_world(sc: &Scenario, seed: Option<u64>) -> (RunOutput, World) {
    let mut online: BTreeMap<String, Vec<Interval>> = BTreeMap::new();
    for (_, d) in &sc.directives {
        if let Directive::Online { node, start, end } = d {
            online
                .entry(node.clone())
                .or_default()
                .push(Interval::new(*start, *end));
        }
    }
    for iv in online.values_mut() {
        iv.sort_by_key(|i| i.start);
    }
    let mut r = Runner {
        world: World::new(seed.unwrap_or(sc.seed)),
        tags: BTreeMap::new(),
        failures: Vec::new(),
        passes: 0,
    };
    let has_run = sc.directives.iter().any(|(_, d)| matches!(d, Directive::Run { .. }));
    let mut implicit_done = has_run;
    let mut error = None;
    for (line, d) in &sc.directives {
        if !implicit_done && matches!(d, Directive::Assert { .. }) {
            implicit_done = true;
            if let Err(e) = r.apply(&Directive::Run { until: None }, &online) {
                error = Some(ScenarioError {
                    line: *line,
                    message: e,
                });
                break;
            }
        }
        if let Err(message) = r.apply(d, &online) {
            error = Some(ScenarioError { line: *line, message });
            break;
        }
    }
    if error.is_none() && !implicit_done {
        if let Err(message) = r.apply(&Directive::Run { until: None }, &online) {
            error = Some(ScenarioError {
                line: sc.directives.last().map_or(0, |d| d.0),
                message,
            });
        }
    }
    if let Some(e) = &error {
        r.world
            .net
            .log_note(&format!("scenario-error line={} {:?}", e.line, e.message));
    }
    let log = r.world.net.log().iter().map(|l| format!("{l}\n")).collect();
    let out = RunOutput {
        exit_code: if error.is_some() {
            2
        } else if r.failures.is_empty() {
            0
        } else {
            1
        },
        log,
        metrics: r.metrics(),
        mailboxes: r.mailboxes(),
        ledgers: r.ledgers(),
        failures: r.failures,
        error,
    };
    (out, r.world)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG4: &str = r#"
# carrier store-and-forward
NODE alice
NODE bob
NODE carol
IDENTITY alice a1 seed=1
IDENTITY bob b1 seed=2
IDENTITY carol c1 seed=3
CONTACT alice a1 <- bob b1 key
CONTACT alice a1 <- carol c1 key
CONTACT bob b1 <- alice a1 key
CONTACT bob b1 <- carol c1 key
CONTACT carol c1 <- alice a1 key
CARRIER alice a1 carol c1 bob b1
ONLINE alice 0 20
ONLINE carol 500 inf
SEND 10 alice a1 -> carol.c1 body="meet at noon" carrier-fallback tag=m1
RUN
ASSERT delivered carol.c1 m1 at=942 verified body="meet at noon"
ASSERT inbox-count carol 1
"#;

    #[test]
    fn empty_file_is_empty_scenario() {
        assert_eq!(parse_scenario("").unwrap(), Scenario::default());
        assert_eq!(parse_scenario("# only a comment\n\n").unwrap().directives.len(), 0);
    }

    #[test]
    fn node_then_identity_is_two_directives() {
        let sc = parse_scenario("NODE alice\nIDENTITY alice a1 seed=17\n").unwrap();
        assert_eq!(sc.directives.len(), 2);
    }

    #[test]
    fn forward_references_and_unknowns_name_the_line() {
        let e = parse_scenario("SEND 1 alice a1 -> bob.b1 body=\"x\"\n").unwrap_err();
        assert_eq!(e.line, 1);
        assert!(e.message.contains("not declared"), "{e}");
        let e = parse_scenario("NODE a\nFROBNICATE\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = parse_scenario("NODE a\nIDENTITY a x\n").unwrap_err();
        assert!(e.message.contains("seed"), "{e}");
        let e = parse_scenario("NODE a\nRUN until=3 extra\n").unwrap_err();
        assert_eq!(e.line, 2);
    }

    #[test]
    fn carrier_scenario_passes_and_is_stable() {
        let sc = parse_scenario(FIG4).unwrap();
        let a = run_scenario(&sc, None);
        assert_eq!(a.exit_code, 0, "{:?}\n{}", a.failures, a.log);
        assert!(a.log.contains("assert delivered carol.c1 m1 at=942"));
        let b = run_scenario(&sc, None);
        assert_eq!(a, b);
    }

    #[test]
    fn failed_assertion_exits_one() {
        let text = FIG4.replace("at=942", "at=941");
        let out = run_scenario(&parse_scenario(&text).unwrap(), None);
        assert_eq!(out.exit_code, 1);
        assert!(out.log.contains("outcome=fail"));
    }

    #[test]
    fn scenario_error_exits_two() {
        let text = "NODE a\nIDENTITY a x seed=1\nIDENTITY a y seed=1\n";
        let out = run_scenario(&parse_scenario(text).unwrap(), None);
        assert_eq!(out.exit_code, 2);
        assert_eq!(out.error.unwrap().line, 3);
    }

    #[test]
    fn metrics_are_sorted_key_value_lines() {
        let out = run_scenario(&parse_scenario(FIG4).unwrap(), None);
        let keys: Vec<&str> = out.metrics.lines().map(|l| l.split_once('=').unwrap().0).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(out.metrics.contains("assertions.pass=2\n"));
    }
}
