//! Identity keys, self-certifying addresses, mail keys and revocations.
//!
//! An identity is an onion-service style signing keypair. Its public half
//! commits to a 12 character base32 label, so an address like
//! `user@wxu6pped7wv3.onion` can be checked against a presented key without
//! consulting anyone else. A [`MailKey`] is the separate end-to-end key used
//! to seal message bodies and sign authored messages; it is identified by a
//! 12 character base36 [`Fingerprint`].
//!
//! Every key is a pure function of a 64-bit seed so simulations replay
//! byte-for-byte.

use std::fmt;
use std::str::FromStr;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer as _, SigningKey, VerifyingKey};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as SealPublic, StaticSecret};

use crate::batch;
use crate::SimTime;

const LABEL_LEN: usize = 12;
const FINGERPRINT_LEN: usize = 12;
const MAX_LOCALPART: usize = 32;
const BASE32: &[u8; 32] = b"abcdefghijklmnopqrstuvwxyz234567";
const BASE36: &[u8; 36] = b"0123456789abcdefghijklmnopqrstuvwxyz";

/// Prefix on every sealed body.
pub const SEAL_MAGIC: &[u8; 5] = b"SEAL1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("invalid localpart {0:?}: expected 1-32 characters of [a-z0-9]")]
    InvalidLocalpart(String),
    #[error("invalid label {0:?}: expected 12 characters of [a-z2-7]")]
    InvalidLabel(String),
    #[error("invalid fingerprint {0:?}: expected 12 characters of [0-9a-z]")]
    InvalidFingerprint(String),
    #[error("malformed address {0:?}")]
    MalformedAddress(String),
    #[error("malformed key material: {0}")]
    MalformedKey(String),
    #[error("revocation subject does not belong to the signing key")]
    SubjectMismatch,
    #[error("revocation kind does not match the signing key class")]
    KindMismatch,
    #[error("decryption failed")]
    DecryptionFailed,
}

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// Labels and addresses
// ---------------------------------------------------------------------------

/// The 12 character base32 service label of an identity.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label([u8; LABEL_LEN]);

impl Label {
    pub fn from_public(public: &IdentityPublic) -> Self {
        let d = digest(&[public.as_bytes()]);
        // first 60 bits, five at a time
        let bits = u64::from_be_bytes(d[..8].try_into().unwrap()) >> 4;
        let mut out = [0u8; LABEL_LEN];
        for (i, slot) in out.iter_mut().enumerate() {
            let shift = 5 * (LABEL_LEN - 1 - i);
            *slot = BASE32[((bits >> shift) & 0x1f) as usize];
        }
        Label(out)
    }

    pub fn as_str(&self) -> &str {
        // only ever holds ASCII from BASE32
        std::str::from_utf8(&self.0).unwrap()
    }

    pub fn is_label_char(c: u8) -> bool {
        c.is_ascii_lowercase() || (b'2'..=b'7').contains(&c)
    }
}

impl FromStr for Label {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let b = s.as_bytes();
        if b.len() != LABEL_LEN || !b.iter().all(|&c| Label::is_label_char(c)) {
            return Err(IdentityError::InvalidLabel(s.to_string()));
        }
        let mut out = [0u8; LABEL_LEN];
        out.copy_from_slice(b);
        Ok(Label(out))
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Label({})", self.as_str())
    }
}

pub fn validate_localpart(localpart: &str) -> Result<(), IdentityError> {
    let ok = !localpart.is_empty()
        && localpart.len() <= MAX_LOCALPART
        && localpart.bytes().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit());
    if ok {
        Ok(())
    } else {
        Err(IdentityError::InvalidLocalpart(localpart.to_string()))
    }
}

/// `localpart@label.onion`.
///
/// Ordering and equality follow the rendered string.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MailAddress {
    rendered: String,
}

impl MailAddress {
    pub fn new(localpart: &str, label: Label) -> Result<Self, IdentityError> {
        validate_localpart(localpart)?;
        Ok(MailAddress {
            rendered: format!("{localpart}@{label}.onion"),
        })
    }

    pub fn localpart(&self) -> &str {
        let at = self.rendered.find('@').unwrap();
        &self.rendered[..at]
    }

    pub fn label(&self) -> Label {
        let at = self.rendered.find('@').unwrap();
        self.rendered[at + 1..at + 1 + LABEL_LEN].parse().unwrap()
    }

    pub fn as_str(&self) -> &str {
        &self.rendered
    }

    /// Same service, different localpart.
    pub fn with_localpart(&self, localpart: &str) -> Result<Self, IdentityError> {
        MailAddress::new(localpart, self.label())
    }
}

impl FromStr for MailAddress {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || IdentityError::MalformedAddress(s.to_string());
        let (local, host) = s.split_once('@').ok_or_else(bad)?;
        let label = host.strip_suffix(".onion").ok_or_else(bad)?;
        let label: Label = label.parse()?;
        MailAddress::new(local, label)
    }
}

impl fmt::Display for MailAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.rendered)
    }
}

impl fmt::Debug for MailAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}>", self.rendered)
    }
}

// ---------------------------------------------------------------------------
// Signatures
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl Signature {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, IdentityError> {
        let v = hex::decode(s).map_err(|e| IdentityError::MalformedKey(e.to_string()))?;
        let arr: [u8; 64] = v
            .try_into()
            .map_err(|_| IdentityError::MalformedKey("signature must be 64 bytes".into()))?;
        Ok(Signature(arr))
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", &self.to_hex()[..16])
    }
}

/// Anything that can produce signatures.
pub trait SecretKey {
    fn sign(&self, msg: &[u8]) -> Signature;
}

/// Anything that can check signatures.
pub trait PublicKey {
    fn verify(&self, msg: &[u8], sig: &Signature) -> bool;
}

pub fn sign<K: SecretKey + ?Sized>(secret: &K, msg: &[u8]) -> Signature {
    secret.sign(msg)
}

pub fn verify<P: PublicKey + ?Sized>(public: &P, msg: &[u8], sig: &Signature) -> bool {
    public.verify(msg, sig)
}

fn ed_verify(public: &[u8; 32], msg: &[u8], sig: &Signature) -> bool {
    match VerifyingKey::from_bytes(public) {
        Ok(vk) => vk
            .verify_strict(msg, &ed25519_dalek::Signature::from_bytes(&sig.0))
            .is_ok(),
        Err(_) => false,
    }
}

// ---------------------------------------------------------------------------
// Identity keys
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct IdentityPublic([u8; 32]);

impl IdentityPublic {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        IdentityPublic(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, IdentityError> {
        let v = hex::decode(s).map_err(|e| IdentityError::MalformedKey(e.to_string()))?;
        let arr: [u8; 32] = v
            .try_into()
            .map_err(|_| IdentityError::MalformedKey("identity key must be 32 bytes".into()))?;
        Ok(IdentityPublic(arr))
    }

    pub fn label(&self) -> Label {
        Label::from_public(self)
    }
}

impl fmt::Debug for IdentityPublic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IdentityPublic({})", self.label())
    }
}

impl PublicKey for IdentityPublic {
    fn verify(&self, msg: &[u8], sig: &Signature) -> bool {
        ed_verify(&self.0, msg, sig)
    }
}

#[derive(Clone)]
pub struct IdentityKeyPair {
    seed: Option<u64>,
    secret: SigningKey,
}

impl IdentityKeyPair {
    pub fn public(&self) -> IdentityPublic {
        IdentityPublic(self.secret.verifying_key().to_bytes())
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn label(&self) -> Label {
        self.public().label()
    }

    pub fn address(&self, localpart: &str) -> Result<MailAddress, IdentityError> {
        derive_address(&self.public(), localpart)
    }

    /// Hex secret, for moving an identity to another device.
    pub fn export(&self) -> String {
        hex::encode(self.secret.to_bytes())
    }

    pub fn import(secret_hex: &str) -> Result<Self, IdentityError> {
        let v = hex::decode(secret_hex.trim()).map_err(|e| IdentityError::MalformedKey(e.to_string()))?;
        let arr: [u8; 32] = v
            .try_into()
            .map_err(|_| IdentityError::MalformedKey("identity secret must be 32 bytes".into()))?;
        Ok(IdentityKeyPair {
            seed: None,
            secret: SigningKey::from_bytes(&arr),
        })
    }
}

impl SecretKey for IdentityKeyPair {
    fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.secret.sign(msg).to_bytes())
    }
}

impl fmt::Debug for IdentityKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IdentityKeyPair")
            .field("seed", &self.seed)
            .field("label", &self.label())
            .finish()
    }
}

pub fn generate_identity(seed: u64) -> IdentityKeyPair {
    let secret = digest(&[b"onionmail/identity/v1", &seed.to_le_bytes()]);
    IdentityKeyPair {
        seed: Some(seed),
        secret: SigningKey::from_bytes(&secret),
    }
}

pub fn derive_address(public: &IdentityPublic, localpart: &str) -> Result<MailAddress, IdentityError> {
    MailAddress::new(localpart, public.label())
}

pub fn verify_address(addr: &MailAddress, public: &IdentityPublic) -> bool {
    matches!(derive_address(public, addr.localpart()), Ok(a) if &a == addr)
}

// ---------------------------------------------------------------------------
// Mail keys
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fingerprint([u8; FINGERPRINT_LEN]);

impl Fingerprint {
    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).unwrap()
    }
}

impl FromStr for Fingerprint {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let b = s.as_bytes();
        if b.len() != FINGERPRINT_LEN || !b.iter().all(|c| c.is_ascii_digit() || c.is_ascii_lowercase()) {
            return Err(IdentityError::InvalidFingerprint(s.to_string()));
        }
        let mut out = [0u8; FINGERPRINT_LEN];
        out.copy_from_slice(b);
        Ok(Fingerprint(out))
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", self.as_str())
    }
}

/// Public half of a mail key: an X25519 sealing key and an Ed25519 verifying key.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct MailPublic {
    seal: [u8; 32],
    verify: [u8; 32],
}

impl MailPublic {
    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&self.seal);
        out[32..].copy_from_slice(&self.verify);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IdentityError> {
        if bytes.len() != 64 {
            return Err(IdentityError::MalformedKey("mail key must be 64 bytes".into()));
        }
        Ok(MailPublic {
            seal: bytes[..32].try_into().unwrap(),
            verify: bytes[32..].try_into().unwrap(),
        })
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, IdentityError> {
        let v = hex::decode(s).map_err(|e| IdentityError::MalformedKey(e.to_string()))?;
        MailPublic::from_bytes(&v)
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let d = digest(&[&self.to_bytes()]);
        // first 62 bits; 36^12 > 2^62 so twelve digits always suffice
        let mut v = u64::from_be_bytes(d[..8].try_into().unwrap()) >> 2;
        let mut out = [b'0'; FINGERPRINT_LEN];
        for slot in out.iter_mut().rev() {
            *slot = BASE36[(v % 36) as usize];
            v /= 36;
        }
        Fingerprint(out)
    }
}

impl fmt::Debug for MailPublic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MailPublic({})", self.fingerprint())
    }
}

impl PublicKey for MailPublic {
    fn verify(&self, msg: &[u8], sig: &Signature) -> bool {
        ed_verify(&self.verify, msg, sig)
    }
}

#[derive(Clone)]
pub struct MailKey {
    seed: Option<u64>,
    seal: StaticSecret,
    sign: SigningKey,
}

impl MailKey {
    pub fn public(&self) -> MailPublic {
        MailPublic {
            seal: SealPublic::from(&self.seal).to_bytes(),
            verify: self.sign.verifying_key().to_bytes(),
        }
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.public().fingerprint()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn export(&self) -> String {
        let mut b = Vec::with_capacity(64);
        b.extend_from_slice(&self.seal.to_bytes());
        b.extend_from_slice(&self.sign.to_bytes());
        hex::encode(b)
    }

    pub fn import(secret_hex: &str) -> Result<Self, IdentityError> {
        let v = hex::decode(secret_hex.trim()).map_err(|e| IdentityError::MalformedKey(e.to_string()))?;
        if v.len() != 64 {
            return Err(IdentityError::MalformedKey("mail secret must be 64 bytes".into()));
        }
        let seal: [u8; 32] = v[..32].try_into().unwrap();
        let sign: [u8; 32] = v[32..].try_into().unwrap();
        Ok(MailKey {
            seed: None,
            seal: StaticSecret::from(seal),
            sign: SigningKey::from_bytes(&sign),
        })
    }
}

impl SecretKey for MailKey {
    fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.sign.sign(msg).to_bytes())
    }
}

impl fmt::Debug for MailKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MailKey")
            .field("seed", &self.seed)
            .field("fingerprint", &self.fingerprint())
            .finish()
    }
}

pub fn generate_mail_key(seed: u64) -> MailKey {
    let seal = digest(&[b"onionmail/mail-seal/v1", &seed.to_le_bytes()]);
    let sign = digest(&[b"onionmail/mail-sign/v1", &seed.to_le_bytes()]);
    MailKey {
        seed: Some(seed),
        seal: StaticSecret::from(seal),
        sign: SigningKey::from_bytes(&sign),
    }
}

fn seal_key(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> [u8; 32] {
    digest(&[b"onionmail/seal-key/v1", shared, ephemeral, recipient])
}

/// Encrypt `plaintext` to a recipient's mail key.
///
/// Layout: `SEAL1 || ephemeral x25519 public (32) || chacha20poly1305 ciphertext`.
/// The ephemeral secret is derived from the recipient key and plaintext, which
/// keeps simulations reproducible; the AEAD key is therefore unique per
/// (recipient, plaintext) and the fixed nonce is never reused under a key.
pub fn seal(recipient: &MailPublic, plaintext: &[u8]) -> Vec<u8> {
    let eph_secret = StaticSecret::from(digest(&[
        b"onionmail/seal-ephemeral/v1",
        &recipient.to_bytes(),
        plaintext,
    ]));
    let eph_public = SealPublic::from(&eph_secret).to_bytes();
    let shared = eph_secret.diffie_hellman(&SealPublic::from(recipient.seal));
    let key = seal_key(shared.as_bytes(), &eph_public, &recipient.seal);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key));
    let ct = cipher
        .encrypt(Nonce::from_slice(&[0u8; 12]), plaintext)
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut out = Vec::with_capacity(SEAL_MAGIC.len() + 32 + ct.len());
    out.extend_from_slice(SEAL_MAGIC);
    out.extend_from_slice(&eph_public);
    out.extend_from_slice(&ct);
    out
}

pub fn is_sealed(bytes: &[u8]) -> bool {
    bytes.len() >= SEAL_MAGIC.len() + 32 + 16 && bytes.starts_with(SEAL_MAGIC)
}

pub fn unseal(key: &MailKey, sealed: &[u8]) -> Result<Vec<u8>, IdentityError> {
    if !is_sealed(sealed) {
        return Err(IdentityError::DecryptionFailed);
    }
    let eph: [u8; 32] = sealed[SEAL_MAGIC.len()..SEAL_MAGIC.len() + 32].try_into().unwrap();
    let shared = key.seal.diffie_hellman(&SealPublic::from(eph));
    let own = SealPublic::from(&key.seal).to_bytes();
    let k = seal_key(shared.as_bytes(), &eph, &own);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&k));
    cipher
        .decrypt(Nonce::from_slice(&[0u8; 12]), &sealed[SEAL_MAGIC.len() + 32..])
        .map_err(|_| IdentityError::DecryptionFailed)
}

// ---------------------------------------------------------------------------
// Revocation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RevocationKind {
    Address,
    Key,
}

impl fmt::Display for RevocationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RevocationKind::Address => "address",
            RevocationKind::Key => "key",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RevocationSubject {
    Address(MailAddress),
    Key(Fingerprint),
}

impl RevocationSubject {
    pub fn kind(&self) -> RevocationKind {
        match self {
            RevocationSubject::Address(_) => RevocationKind::Address,
            RevocationSubject::Key(_) => RevocationKind::Key,
        }
    }
}

impl fmt::Display for RevocationSubject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RevocationSubject::Address(a) => a.fmt(f),
            RevocationSubject::Key(fp) => fp.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevocationRecord {
    pub subject: RevocationSubject,
    pub issued_at: SimTime,
    pub signature: Signature,
}

impl RevocationRecord {
    pub fn kind(&self) -> RevocationKind {
        self.subject.kind()
    }

    pub fn signed_bytes(subject: &RevocationSubject, issued_at: SimTime) -> Vec<u8> {
        format!("onionmail-revoke\n{}\n{}\n{}", subject.kind(), subject, issued_at).into_bytes()
    }
}

/// The key that signs a revocation: the revoked key itself.
#[derive(Clone, Copy)]
pub enum RevocationSigner<'a> {
    Identity(&'a IdentityKeyPair),
    Mail(&'a MailKey),
}

#[derive(Clone, Copy, Debug)]
pub enum SubjectPublic<'a> {
    Identity(&'a IdentityPublic),
    Mail(&'a MailPublic),
}

pub fn make_revocation(
    signer: RevocationSigner<'_>,
    subject: RevocationSubject,
    issued_at: SimTime,
) -> Result<RevocationRecord, IdentityError> {
    let msg = RevocationRecord::signed_bytes(&subject, issued_at);
    let signature = match (&signer, &subject) {
        (RevocationSigner::Identity(k), RevocationSubject::Address(a)) => {
            if !verify_address(a, &k.public()) {
                return Err(IdentityError::SubjectMismatch);
            }
            k.sign(&msg)
        }
        (RevocationSigner::Mail(k), RevocationSubject::Key(fp)) => {
            if k.fingerprint() != *fp {
                return Err(IdentityError::SubjectMismatch);
            }
            k.sign(&msg)
        }
        _ => return Err(IdentityError::KindMismatch),
    };
    Ok(RevocationRecord {
        subject,
        issued_at,
        signature,
    })
}

pub fn verify_revocation(record: &RevocationRecord, public: SubjectPublic<'_>) -> bool {
    let msg = RevocationRecord::signed_bytes(&record.subject, record.issued_at);
    match (&record.subject, public) {
        (RevocationSubject::Address(a), SubjectPublic::Identity(p)) => {
            verify_address(a, p) && p.verify(&msg, &record.signature)
        }
        (RevocationSubject::Key(fp), SubjectPublic::Mail(p)) => {
            p.fingerprint() == *fp && p.verify(&msg, &record.signature)
        }
        _ => false,
    }
}

// ---------------------------------------------------------------------------
// Batch audit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SelfCertAudit {
    pub identities: usize,
    pub checks: usize,
    pub false_accepts: usize,
    pub false_rejects: usize,
}

/// For each seed: the matching key must verify, every single-character label
/// mutation must fail, and `mismatched` other identities' keys must fail.
pub fn self_certification_audit(seeds: &[u64], localpart: &str, mismatched: usize) -> SelfCertAudit {
    let keys: Vec<IdentityPublic> = batch::map(seeds, |&s| generate_identity(s).public());
    let idx: Vec<usize> = (0..keys.len()).collect();
    let per = batch::map(&idx, |&i| {
        let mut a = SelfCertAudit {
            identities: 1,
            ..Default::default()
        };
        let public = &keys[i];
        let Ok(addr) = derive_address(public, localpart) else {
            a.false_rejects += 1;
            return a;
        };
        a.checks += 1;
        if !verify_address(&addr, public) {
            a.false_rejects += 1;
        }
        let label = addr.label();
        for pos in 0..LABEL_LEN {
            let mut raw = label.0;
            let cur = BASE32.iter().position(|&c| c == raw[pos]).unwrap();
            raw[pos] = BASE32[(cur + 1) % 32];
            let mutated = MailAddress::new(localpart, Label(raw)).unwrap();
            a.checks += 1;
            if verify_address(&mutated, public) {
                a.false_accepts += 1;
            }
        }
        for j in 1..=mismatched.min(keys.len().saturating_sub(1)) {
            let other = &keys[(i + j) % keys.len()];
            if other == public {
                continue;
            }
            a.checks += 1;
            if verify_address(&addr, other) {
                a.false_accepts += 1;
            }
        }
        a
    });
    per.into_iter().fold(SelfCertAudit::default(), |acc, a| SelfCertAudit {
        identities: acc.identities + a.identities,
        checks: acc.checks + a.checks,
        false_accepts: acc.false_accepts + a.false_accepts,
        false_rejects: acc.false_rejects + a.false_rejects,
    })
}
