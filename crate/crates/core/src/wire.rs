//! Canonical envelope format.
//!
//! An envelope is a list of `Name: value` header lines terminated by CRLF,
//! an empty CRLF line, then the raw body. There is no folding, no MIME and no
//! transfer encoding; a parse followed by a serialize reproduces the input
//! byte for byte.
//!
//! The author signature covers a fixed subset of headers (see
//! [`signing_bytes`]) that excludes `To`, so a carrier can re-address a
//! message hop by hop without invalidating it.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::identity::{
    sha256_hex, validate_localpart, Fingerprint, IdentityError, IdentityPublic, Label, MailAddress, MailPublic,
    RevocationRecord, RevocationSubject, Signature,
};
use crate::SimTime;

pub mod h {
    pub const FROM: &str = "From";
    pub const TO: &str = "To";
    pub const FOR: &str = "For";
    pub const MESSAGE_ID: &str = "Message-ID";
    pub const DATE: &str = "Date";
    pub const KEY_REQUEST: &str = "Key-Request";
    pub const KEY_RESPONSE: &str = "Key-Response";
    pub const CONTACT: &str = "Contact";
    pub const REVOKE: &str = "Revoke";
    pub const LIST: &str = "List";
    pub const PREV_HASH: &str = "Prev-Hash";
    pub const SIGNATURE: &str = "Signature";
    pub const COUNTERSIGN: &str = "Countersign";
    pub const CONFIRM_DELIVERY: &str = "Confirm-Delivery";
    pub const DELIVERY_CONFIRMED: &str = "Delivery-Confirmed";
    /// Original external sender of mail brought in through a gateway.
    pub const EXTERNAL_FROM: &str = "External-From";
}

/// Headers covered by the author signature, in signing order.
pub const SIGNED_HEADERS: [&str; 6] = [h::FROM, h::FOR, h::DATE, h::MESSAGE_ID, h::LIST, h::PREV_HASH];

const SINGLETONS: [&str; 15] = [
    h::FROM,
    h::TO,
    h::FOR,
    h::MESSAGE_ID,
    h::DATE,
    h::KEY_REQUEST,
    h::KEY_RESPONSE,
    h::REVOKE,
    h::LIST,
    h::PREV_HASH,
    h::SIGNATURE,
    h::COUNTERSIGN,
    h::CONFIRM_DELIVERY,
    h::DELIVERY_CONFIRMED,
    h::EXTERNAL_FROM,
];
const REQUIRED: [&str; 3] = [h::FROM, h::TO, h::MESSAGE_ID];

pub const MAX_VALUE_LEN: usize = 996;

/// Hash of the empty ledger.
pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("line {line}: bare LF")]
    BareLf { line: usize },
    #[error("line {line}: stray CR")]
    StrayCr { line: usize },
    #[error("line {line}: malformed header line")]
    MalformedHeader { line: usize },
    #[error("line {line}: header value is not UTF-8")]
    NonUtf8 { line: usize },
    #[error("line {line}: header value longer than {MAX_VALUE_LEN} bytes")]
    TooLong { line: usize },
    #[error("line {line}: duplicate {name} header")]
    Duplicate { line: usize, name: String },
    #[error("line {line}: missing {name} header")]
    Missing { line: usize, name: String },
    #[error("line {line}: header section is not terminated by an empty line")]
    Unterminated { line: usize },
    #[error("envelope carries no Signature header")]
    MissingSignature,
    #[error("malformed {name} header: {reason}")]
    MalformedValue { name: &'static str, reason: String },
    #[error("{0:?} is not a reply path")]
    NotAReplyPath(String),
    #[error("invalid gateway host {0:?}")]
    InvalidGateway(String),
}

fn malformed(name: &'static str, reason: impl fmt::Display) -> WireError {
    WireError::MalformedValue {
        name,
        reason: reason.to_string(),
    }
}

fn is_token(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|c| c.is_ascii_alphanumeric() || c == b'-')
}

#[derive(Clone, Default, PartialEq, Eq)]
pub struct Envelope {
    headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl fmt::Debug for Envelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Envelope")
            .field("headers", &self.headers)
            .field("body_len", &self.body.len())
            .finish()
    }
}

impl Envelope {
    pub fn new() -> Self {
        Envelope::default()
    }

    pub fn headers(&self) -> &[(String, String)] {
        &self.headers
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_str())
    }

    pub fn headers_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.headers
            .iter()
            .filter(move |(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn has(&self, name: &str) -> bool {
        self.header(name).is_some()
    }

    /// Replace the first header called `name`, or append it.
    pub fn set_header(&mut self, name: &str, value: impl Into<String>) -> &mut Self {
        let value = value.into();
        match self.headers.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = value,
            None => self.headers.push((name.to_string(), value)),
        }
        self
    }

    pub fn add_header(&mut self, name: &str, value: impl Into<String>) -> &mut Self {
        self.headers.push((name.to_string(), value.into()));
        self
    }

    pub fn remove_header(&mut self, name: &str) -> &mut Self {
        self.headers.retain(|(n, _)| n != name);
        self
    }

    pub fn with_header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.set_header(name, value);
        self
    }

    pub fn with_body(mut self, body: impl Into<Vec<u8>>) -> Self {
        self.body = body.into();
        self
    }

    pub fn message_id(&self) -> Option<&str> {
        self.header(h::MESSAGE_ID)
    }

    pub fn from_address(&self) -> Option<MailAddress> {
        self.header(h::FROM).and_then(|v| v.parse().ok())
    }

    pub fn to_address(&self) -> Option<MailAddress> {
        self.header(h::TO).and_then(|v| v.parse().ok())
    }

    pub fn for_destination(&self) -> Option<Destination> {
        self.header(h::FOR).and_then(|v| v.parse().ok())
    }

    pub fn validate(&self) -> Result<(), WireError> {
        for (i, (name, value)) in self.headers.iter().enumerate() {
            let line = i + 1;
            if !is_token(name) {
                return Err(WireError::MalformedHeader { line });
            }
            if value.contains('\r') {
                return Err(WireError::StrayCr { line });
            }
            if value.contains('\n') {
                return Err(WireError::BareLf { line });
            }
            if value.len() > MAX_VALUE_LEN {
                return Err(WireError::TooLong { line });
            }
        }
        check_counts(
            self.headers.iter().enumerate().map(|(i, (n, _))| (i + 1, n.as_str())),
            self.headers.len() + 1,
        )
    }

    pub fn serialize(&self) -> Vec<u8> {
        serialize(self)
    }
}

fn check_counts<'a>(names: impl Iterator<Item = (usize, &'a str)>, end_line: usize) -> Result<(), WireError> {
    let mut seen: Vec<&str> = Vec::new();
    for (line, name) in names {
        if SINGLETONS.contains(&name) {
            if seen.contains(&name) {
                return Err(WireError::Duplicate {
                    line,
                    name: name.to_string(),
                });
            }
            seen.push(name);
        }
    }
    for req in REQUIRED {
        if !seen.contains(&req) {
            return Err(WireError::Missing {
                line: end_line,
                name: req.to_string(),
            });
        }
    }
    Ok(())
}

pub fn serialize(env: &Envelope) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 * env.headers.len() + env.body.len() + 2);
    for (name, value) in &env.headers {
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(b": ");
        out.extend_from_slice(value.as_bytes());
        out.extend_from_slice(b"\r\n");
    }
    out.extend_from_slice(b"\r\n");
    out.extend_from_slice(&env.body);
    out
}

pub fn parse(bytes: &[u8]) -> Result<Envelope, WireError> {
    let mut headers = Vec::new();
    let mut pos = 0;
    let mut line = 1;
    loop {
        let Some(rel) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(WireError::Unterminated { line });
        };
        let nl = pos + rel;
        if nl == pos || bytes[nl - 1] != b'\r' {
            return Err(WireError::BareLf { line });
        }
        let content = &bytes[pos..nl - 1];
        if content.contains(&b'\r') {
            return Err(WireError::StrayCr { line });
        }
        pos = nl + 1;
        if content.is_empty() {
            break;
        }
        let colon = content
            .iter()
            .position(|&b| b == b':')
            .ok_or(WireError::MalformedHeader { line })?;
        if content.get(colon + 1) != Some(&b' ') {
            return Err(WireError::MalformedHeader { line });
        }
        let name = std::str::from_utf8(&content[..colon])
            .ok()
            .filter(|n| is_token(n))
            .ok_or(WireError::MalformedHeader { line })?;
        let value = std::str::from_utf8(&content[colon + 2..]).map_err(|_| WireError::NonUtf8 { line })?;
        if value.len() > MAX_VALUE_LEN {
            return Err(WireError::TooLong { line });
        }
        headers.push((name.to_string(), value.to_string()));
        line += 1;
    }
    check_counts(headers.iter().enumerate().map(|(i, (n, _))| (i + 1, n.as_str())), line)?;
    Ok(Envelope {
        headers,
        body: bytes[pos..].to_vec(),
    })
}

fn region(env: &Envelope, include_id: bool) -> Vec<u8> {
    let mut out = Vec::new();
    for name in SIGNED_HEADERS {
        if !include_id && name == h::MESSAGE_ID {
            continue;
        }
        if let Some(v) = env.header(name) {
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(b": ");
            out.extend_from_slice(v.as_bytes());
            out.extend_from_slice(b"\r\n");
        }
    }
    out.extend_from_slice(b"\r\n");
    out.extend_from_slice(&env.body);
    out
}

/// Bytes covered by the author signature.
pub fn signing_bytes(env: &Envelope) -> Vec<u8> {
    region(env, true)
}

/// Signing region plus the raw author signature; what a forwarding hop signs.
pub fn countersign_bytes(env: &Envelope) -> Result<Vec<u8>, WireError> {
    let sig: SignatureValue = env.header(h::SIGNATURE).ok_or(WireError::MissingSignature)?.parse()?;
    let mut out = signing_bytes(env);
    out.extend_from_slice(&sig.signature.0);
    Ok(out)
}

pub fn message_hash(env: &Envelope) -> String {
    sha256_hex(&signing_bytes(env))
}

/// Content-derived Message-ID: 16 hex chars of the signing region (computed
/// without the Message-ID itself) and the sender's label.
pub fn derive_message_id(env: &Envelope, sender: Label) -> String {
    let digest = sha256_hex(&region(env, false));
    format!("{}@{}", &digest[..16], sender)
}

// ---------------------------------------------------------------------------
// Typed header values
// ---------------------------------------------------------------------------

/// In-system address or an ordinary external mailbox.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Destination {
    InSystem(MailAddress),
    External(String),
}

impl FromStr for Destination {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(a) = s.parse::<MailAddress>() {
            return Ok(Destination::InSystem(a));
        }
        match s.rsplit_once('@') {
            Some((local, host))
                if !local.is_empty()
                    && valid_hostname(host)
                    && !host.ends_with(".onion")
                    && !s.contains(char::is_whitespace) =>
            {
                Ok(Destination::External(s.to_string()))
            }
            _ => Err(malformed(h::FOR, format!("{s:?} is not an address"))),
        }
    }
}

impl fmt::Display for Destination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Destination::InSystem(a) => a.fmt(f),
            Destination::External(s) => f.write_str(s),
        }
    }
}

/// `<fingerprint> <signature hex>`, used by `Signature` and `Countersign`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignatureValue {
    pub fingerprint: Fingerprint,
    pub signature: Signature,
}

impl fmt::Display for SignatureValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.fingerprint, self.signature.to_hex())
    }
}

impl FromStr for SignatureValue {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (fp, sig) = s
            .split_once(' ')
            .ok_or_else(|| malformed(h::SIGNATURE, "expected '<fingerprint> <hex>'"))?;
        Ok(SignatureValue {
            fingerprint: fp.parse().map_err(|e| malformed(h::SIGNATURE, e))?,
            signature: Signature::from_hex(sig).map_err(|e| malformed(h::SIGNATURE, e))?,
        })
    }
}

/// `Revoke:` value. Carries the revoked public key so any peer can check it
/// without prior state: an address revocation is self-certifying through the
/// label, a key revocation through the fingerprint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevokeValue {
    pub record: RevocationRecord,
    pub public_hex: String,
}

impl RevokeValue {
    pub fn for_address(record: RevocationRecord, public: &IdentityPublic) -> Self {
        RevokeValue {
            record,
            public_hex: public.to_hex(),
        }
    }

    pub fn for_key(record: RevocationRecord, public: &MailPublic) -> Self {
        RevokeValue {
            record,
            public_hex: public.to_hex(),
        }
    }
}

impl fmt::Display for RevokeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.record.kind(),
            self.record.subject,
            self.public_hex,
            self.record.issued_at,
            self.record.signature.to_hex()
        )
    }
}

impl FromStr for RevokeValue {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(' ').collect();
        let [kind, subject, public_hex, issued, sig] = parts[..] else {
            return Err(malformed(h::REVOKE, "expected five fields"));
        };
        let e = |err: IdentityError| malformed(h::REVOKE, err);
        let subject = match kind {
            "address" => RevocationSubject::Address(subject.parse().map_err(e)?),
            "key" => RevocationSubject::Key(subject.parse().map_err(e)?),
            other => return Err(malformed(h::REVOKE, format!("unknown kind {other:?}"))),
        };
        let issued_at: SimTime = issued.parse().map_err(|_| malformed(h::REVOKE, "bad issue time"))?;
        Ok(RevokeValue {
            record: RevocationRecord {
                subject,
                issued_at,
                signature: Signature::from_hex(sig).map_err(e)?,
            },
            public_hex: public_hex.to_string(),
        })
    }
}

/// `Contact:` value, shared by introductions and address-book export.
///
/// `<address> [fp=..] [key=..] [via=a,b] [carriers=a,b] [revoked=1] [krevoked=f,g] display=<rest>`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContactCard {
    pub address: MailAddress,
    pub display: String,
    pub fingerprint: Option<Fingerprint>,
    pub key: Option<MailPublic>,
    pub introduced_by: Vec<MailAddress>,
    pub carriers: Vec<MailAddress>,
    pub revoked: bool,
    pub revoked_keys: Vec<Fingerprint>,
}

impl ContactCard {
    pub fn introduction(address: MailAddress, display: &str, fingerprint: Option<Fingerprint>) -> Self {
        ContactCard {
            address,
            display: display.to_string(),
            fingerprint,
            key: None,
            introduced_by: Vec::new(),
            carriers: Vec::new(),
            revoked: false,
            revoked_keys: Vec::new(),
        }
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn split_list<T: FromStr>(s: &str) -> Result<Vec<T>, WireError> {
    s.split(',')
        .map(|p| {
            p.parse()
                .map_err(|_| malformed(h::CONTACT, format!("bad list item {p:?}")))
        })
        .collect()
}

impl fmt::Display for ContactCard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.address)?;
        if let Some(fp) = &self.fingerprint {
            write!(f, " fp={fp}")?;
        }
        if let Some(k) = &self.key {
            write!(f, " key={}", k.to_hex())?;
        }
        if !self.introduced_by.is_empty() {
            write!(f, " via={}", join(&self.introduced_by))?;
        }
        if !self.carriers.is_empty() {
            write!(f, " carriers={}", join(&self.carriers))?;
        }
        if self.revoked {
            f.write_str(" revoked=1")?;
        }
        if !self.revoked_keys.is_empty() {
            write!(f, " krevoked={}", join(&self.revoked_keys))?;
        }
        write!(f, " display={}", self.display)
    }
}

impl FromStr for ContactCard {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (head, display) = s
            .split_once(" display=")
            .ok_or_else(|| malformed(h::CONTACT, "missing display field"))?;
        let mut tokens = head.split(' ');
        let address: MailAddress = tokens
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|e| malformed(h::CONTACT, e))?;
        let mut card = ContactCard::introduction(address, display, None);
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| malformed(h::CONTACT, format!("bad field {tok:?}")))?;
            match k {
                "fp" => card.fingerprint = Some(v.parse().map_err(|e| malformed(h::CONTACT, e))?),
                "key" => card.key = Some(MailPublic::from_hex(v).map_err(|e| malformed(h::CONTACT, e))?),
                "via" => card.introduced_by = split_list(v)?,
                "carriers" => card.carriers = split_list(v)?,
                "revoked" => card.revoked = v == "1",
                "krevoked" => card.revoked_keys = split_list(v)?,
                other => return Err(malformed(h::CONTACT, format!("unknown field {other:?}"))),
            }
        }
        if let (Some(fp), Some(k)) = (&card.fingerprint, &card.key) {
            if k.fingerprint() != *fp {
                return Err(malformed(h::CONTACT, "fingerprint does not match key"));
            }
        }
        Ok(card)
    }
}

// ---------------------------------------------------------------------------
// Reply paths
// ---------------------------------------------------------------------------

pub fn valid_hostname(host: &str) -> bool {
    !host.is_empty()
        && host.len() <= 253
        && host.split('.').all(|part| {
            !part.is_empty()
                && !part.starts_with('-')
                && !part.ends_with('-')
                && part.bytes().all(|c| c.is_ascii_alphanumeric() || c == b'-')
        })
}

/// An in-system address reachable through an external gateway host.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplyPath {
    pub inner: MailAddress,
    pub gateway_host: String,
}

impl fmt::Display for ReplyPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-{}@{}",
            self.inner.localpart(),
            self.inner.label(),
            self.gateway_host
        )
    }
}

pub fn encode_reply_path(inner: &MailAddress, gateway_host: &str) -> Result<String, WireError> {
    if !valid_hostname(gateway_host) {
        return Err(WireError::InvalidGateway(gateway_host.to_string()));
    }
    Ok(ReplyPath {
        inner: inner.clone(),
        gateway_host: gateway_host.to_string(),
    }
    .to_string())
}

pub fn decode_reply_path(external: &str) -> Result<MailAddress, WireError> {
    let not = || WireError::NotAReplyPath(external.to_string());
    let (user, host) = external.rsplit_once('@').ok_or_else(not)?;
    if host.is_empty() {
        return Err(not());
    }
    let n = user.len();
    if n < 14 || !user.is_ascii() || user.as_bytes()[n - 13] != b'-' {
        return Err(not());
    }
    let label: Label = user[n - 12..].parse().map_err(|_| not())?;
    let local = &user[..n - 13];
    validate_localpart(local).map_err(|_| not())?;
    MailAddress::new(local, label).map_err(|_| not())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Envelope {
        Envelope::new()
            .with_header(h::FROM, "user@aaaaaaaaaaaa.onion")
            .with_header(h::TO, "user@bbbbbbbbbbbb.onion")
            .with_header(h::MESSAGE_ID, "0123456789abcdef@aaaaaaaaaaaa")
    }

    #[test]
    fn minimal_round_trip() {
        let e = minimal();
        e.validate().unwrap();
        let bytes = e.serialize();
        assert_eq!(parse(&bytes).unwrap(), e);
    }

    #[test]
    fn value_spaces_preserved() {
        let e = minimal().with_header("X-Note", "  padded value  ");
        let back = parse(&e.serialize()).unwrap();
        assert_eq!(back.header("X-Note"), Some("  padded value  "));
        assert_eq!(back.serialize(), e.serialize());
    }

    #[test]
    fn parse_errors_name_lines() {
        let dup = b"From: a@aaaaaaaaaaaa.onion\r\nTo: b@bbbbbbbbbbbb.onion\r\nTo: c@cccccccccccc.onion\r\nMessage-ID: x\r\n\r\n";
        assert_eq!(
            parse(dup),
            Err(WireError::Duplicate {
                line: 3,
                name: "To".into()
            })
        );
        let missing = b"From: a@aaaaaaaaaaaa.onion\r\nTo: b@bbbbbbbbbbbb.onion\r\n\r\nbody";
        assert_eq!(
            parse(missing),
            Err(WireError::Missing {
                line: 3,
                name: "Message-ID".into()
            })
        );
        let lf = b"From: a@aaaaaaaaaaaa.onion\nTo: b\r\n\r\n";
        assert_eq!(parse(lf), Err(WireError::BareLf { line: 1 }));
        let utf = b"From: a\r\nTo: \xff\xfe\r\nMessage-ID: x\r\n\r\n";
        assert_eq!(parse(utf), Err(WireError::NonUtf8 { line: 2 }));
        let unterminated = b"From: a\r\nTo: b\r\n";
        assert_eq!(parse(unterminated), Err(WireError::Unterminated { line: 3 }));
        let nocolon = b"From a\r\n\r\n";
        assert_eq!(parse(nocolon), Err(WireError::MalformedHeader { line: 1 }));
    }

    #[test]
    fn body_may_contain_anything() {
        let e = minimal().with_body(b"line\nbare lf\r\n\r\nmore\x00\xff".to_vec());
        assert_eq!(parse(&e.serialize()).unwrap(), e);
    }

    #[test]
    fn signing_bytes_ignore_to() {
        let a = minimal().with_header(h::FOR, "user@bbbbbbbbbbbb.onion").with_body("hi");
        let mut b = a.clone();
        b.set_header(h::TO, "user@cccccccccccc.onion");
        assert_eq!(signing_bytes(&a), signing_bytes(&b));
        assert_eq!(message_hash(&a), message_hash(&b));
        let c = a.clone().with_body("ho");
        assert_ne!(signing_bytes(&a), signing_bytes(&c));
        assert_ne!(message_hash(&a), message_hash(&c));
    }

    #[test]
    fn countersign_needs_signature() {
        let e = minimal();
        assert_eq!(countersign_bytes(&e), Err(WireError::MissingSignature));
        let sig = SignatureValue {
            fingerprint: "0k4jnr1l701a".parse().unwrap(),
            signature: Signature([7u8; 64]),
        };
        let signed = e.clone().with_header(h::SIGNATURE, sig.to_string());
        let cs = countersign_bytes(&signed).unwrap();
        assert!(cs.ends_with(&[7u8; 64]));
        let mut other = signed.clone();
        other.set_header(
            h::SIGNATURE,
            SignatureValue {
                signature: Signature([8u8; 64]),
                ..sig
            }
            .to_string(),
        );
        assert_ne!(countersign_bytes(&other).unwrap(), cs);
    }

    #[test]
    fn reply_path_figure_example() {
        let inner: MailAddress = "user@wxu6pped7wv3.onion".parse().unwrap();
        let ext = encode_reply_path(&inner, "bobsmail.net").unwrap();
        assert_eq!(ext, "user-wxu6pped7wv3@bobsmail.net");
        assert_eq!(decode_reply_path(&ext).unwrap(), inner);
        assert_eq!(
            decode_reply_path("david@googlemail.com"),
            Err(WireError::NotAReplyPath("david@googlemail.com".into()))
        );
        assert!(decode_reply_path("user_wxu6pped7wv3@bobsmail.net").is_err());
        assert!(decode_reply_path("user-wxu6pped7wv1@bobsmail.net").is_err());
        assert!(decode_reply_path("-wxu6pped7wv3@bobsmail.net").is_err());
        assert!(encode_reply_path(&inner, "").is_err());
    }

    #[test]
    fn destination_parsing() {
        assert!(matches!(
            "user@wxu6pped7wv3.onion".parse::<Destination>(),
            Ok(Destination::InSystem(_))
        ));
        assert_eq!(
            "david@googlemail.com".parse::<Destination>().unwrap(),
            Destination::External("david@googlemail.com".into())
        );
        assert!("nobody".parse::<Destination>().is_err());
        assert!("x@bad.onion".parse::<Destination>().is_err());
    }

    #[test]
    fn contact_card_round_trip() {
        let key = crate::identity::generate_mail_key(3).public();
        let card = ContactCard {
            address: "user@2gqisa2z33oj.onion".parse().unwrap(),
            display: "Carol at work".into(),
            fingerprint: Some(key.fingerprint()),
            key: Some(key),
            introduced_by: vec!["user@aaaaaaaaaaaa.onion".parse().unwrap()],
            carriers: vec![],
            revoked: true,
            revoked_keys: vec!["0k4jnr1l701a".parse().unwrap()],
        };
        let back: ContactCard = card.to_string().parse().unwrap();
        assert_eq!(back, card);
        let intro = ContactCard::introduction(card.address.clone(), "", None);
        assert_eq!(intro.to_string().parse::<ContactCard>().unwrap(), intro);
    }
}
