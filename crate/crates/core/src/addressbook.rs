//! Per-identity contact store.
//!
//! Each identity owns exactly one book; nothing here refers to other
//! identities of the same user. A contact remembers who introduced it, which
//! peers are designated to carry mail for it, its mail key and any
//! revocations seen for it.

use std::collections::{BTreeMap, BTreeSet};

use indexmap::IndexSet;
use thiserror::Error;

use crate::identity::{Fingerprint, MailAddress, MailPublic, RevocationRecord, RevocationSubject};
use crate::wire::{self, h, ContactCard, Envelope, WireError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BookError {
    #[error("{0} is the book owner")]
    OwnAddress(MailAddress),
    #[error("unknown contact {0}")]
    UnknownContact(MailAddress),
    #[error("key conflict for {address}: holding {held}, presented {presented}")]
    KeyConflict {
        address: MailAddress,
        held: Fingerprint,
        presented: Fingerprint,
    },
    #[error("key {fingerprint} for {address} has been revoked")]
    KeyRevoked {
        address: MailAddress,
        fingerprint: Fingerprint,
    },
    #[error("{0} cannot carry mail for itself")]
    SelfCarrier(MailAddress),
    #[error("malformed book export: {0}")]
    Import(#[from] WireError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contact {
    pub address: MailAddress,
    pub display: String,
    pub mail_key: Option<MailPublic>,
    /// Fingerprint announced by an introducer before the key itself arrived.
    pub expected_fingerprint: Option<Fingerprint>,
    /// Insertion-ordered.
    pub introduced_by: IndexSet<MailAddress>,
    pub carriers: Vec<MailAddress>,
    pub revoked: bool,
    pub revoked_keys: BTreeSet<Fingerprint>,
}

impl Contact {
    fn new(address: MailAddress, display: &str) -> Self {
        Contact {
            address,
            display: display.to_string(),
            mail_key: None,
            expected_fingerprint: None,
            introduced_by: IndexSet::new(),
            carriers: Vec::new(),
            revoked: false,
            revoked_keys: BTreeSet::new(),
        }
    }

    pub fn fingerprint(&self) -> Option<Fingerprint> {
        self.mail_key.map(|k| k.fingerprint())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyOutcome {
    Stored,
    Unchanged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RevocationOutcome {
    Applied,
    AlreadyApplied,
    /// Subject unknown; kept and applied if the subject shows up later.
    StoredPending,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressBook {
    owner: MailAddress,
    entries: BTreeMap<MailAddress, Contact>,
    pending: Vec<RevocationRecord>,
}

impl AddressBook {
    pub fn new(owner: MailAddress) -> Self {
        AddressBook {
            owner,
            entries: BTreeMap::new(),
            pending: Vec::new(),
        }
    }

    pub fn owner(&self) -> &MailAddress {
        &self.owner
    }

    pub fn get(&self, address: &MailAddress) -> Option<&Contact> {
        self.entries.get(address)
    }

    pub fn contains(&self, address: &MailAddress) -> bool {
        self.entries.contains_key(address)
    }

    pub fn contacts(&self) -> impl Iterator<Item = &Contact> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pending_revocations(&self) -> &[RevocationRecord] {
        &self.pending
    }

    fn entry_mut(&mut self, address: &MailAddress) -> Result<&mut Contact, BookError> {
        self.entries
            .get_mut(address)
            .ok_or_else(|| BookError::UnknownContact(address.clone()))
    }

    /// Add a contact, or merge the introducer into an existing entry.
    pub fn add_contact(
        &mut self,
        address: &MailAddress,
        display: &str,
        introducer: Option<&MailAddress>,
    ) -> Result<&Contact, BookError> {
        if *address == self.owner {
            return Err(BookError::OwnAddress(address.clone()));
        }
        let is_new = !self.entries.contains_key(address);
        let c = self
            .entries
            .entry(address.clone())
            .or_insert_with(|| Contact::new(address.clone(), display));
        if c.display.is_empty() {
            c.display = display.to_string();
        }
        if let Some(i) = introducer {
            if i != address {
                c.introduced_by.insert(i.clone());
            }
        }
        if is_new {
            let waiting: Vec<RevocationRecord> = self
                .pending
                .iter()
                .filter(|r| matches!(&r.subject, RevocationSubject::Address(a) if a == address))
                .cloned()
                .collect();
            for r in waiting {
                self.apply_revocation(&r);
            }
        }
        Ok(&self.entries[address])
    }

    /// Remember the fingerprint an introducer vouched for.
    pub fn expect_fingerprint(&mut self, address: &MailAddress, fp: Fingerprint) -> Result<(), BookError> {
        let c = self.entry_mut(address)?;
        if let Some(held) = c.fingerprint() {
            if held != fp {
                return Err(BookError::KeyConflict {
                    address: address.clone(),
                    held,
                    presented: fp,
                });
            }
        }
        if c.expected_fingerprint.is_none() {
            c.expected_fingerprint = Some(fp);
        }
        Ok(())
    }

    fn key_pending_revocation(&self, fp: &Fingerprint) -> bool {
        self.pending
            .iter()
            .any(|r| matches!(&r.subject, RevocationSubject::Key(k) if k == fp))
    }

    /// Store a contact's mail key. A different key never silently replaces
    /// the held one; the old key must be revoked first.
    pub fn record_key(&mut self, address: &MailAddress, key: MailPublic) -> Result<KeyOutcome, BookError> {
        let fp = key.fingerprint();
        let pending_revoked = self.key_pending_revocation(&fp);
        let c = self.entry_mut(address)?;
        if pending_revoked || c.revoked_keys.contains(&fp) {
            return Err(BookError::KeyRevoked {
                address: address.clone(),
                fingerprint: fp,
            });
        }
        if let Some(held) = c.mail_key {
            if held == key {
                return Ok(KeyOutcome::Unchanged);
            }
            return Err(BookError::KeyConflict {
                address: address.clone(),
                held: held.fingerprint(),
                presented: fp,
            });
        }
        if let Some(expected) = c.expected_fingerprint {
            if expected != fp && !c.revoked_keys.contains(&expected) {
                return Err(BookError::KeyConflict {
                    address: address.clone(),
                    held: expected,
                    presented: fp,
                });
            }
        }
        c.mail_key = Some(key);
        c.expected_fingerprint = Some(fp);
        Ok(KeyOutcome::Stored)
    }

    pub fn add_carrier(&mut self, destination: &MailAddress, carrier: &MailAddress) -> Result<(), BookError> {
        if destination == carrier {
            return Err(BookError::SelfCarrier(carrier.clone()));
        }
        if !self.entries.contains_key(carrier) {
            return Err(BookError::UnknownContact(carrier.clone()));
        }
        let c = self.entry_mut(destination)?;
        if !c.carriers.contains(carrier) {
            c.carriers.push(carrier.clone());
        }
        Ok(())
    }

    /// Explicit carriers in insertion order, then introducers not already
    /// listed. Revoked or unknown peers and the destination itself are skipped.
    pub fn carriers_for(&self, destination: &MailAddress) -> Result<Vec<MailAddress>, BookError> {
        let c = self
            .entries
            .get(destination)
            .ok_or_else(|| BookError::UnknownContact(destination.clone()))?;
        let mut out: Vec<MailAddress> = Vec::new();
        for cand in c.carriers.iter().chain(c.introduced_by.iter()) {
            let usable =
                cand != destination && cand != &self.owner && self.entries.get(cand).is_some_and(|k| !k.revoked);
            if usable && !out.contains(cand) {
                out.push(cand.clone());
            }
        }
        Ok(out)
    }

    /// Apply a revocation that has already been verified.
    pub fn apply_revocation(&mut self, record: &RevocationRecord) -> RevocationOutcome {
        match &record.subject {
            RevocationSubject::Address(a) => match self.entries.get_mut(a) {
                Some(c) if c.revoked => RevocationOutcome::AlreadyApplied,
                Some(c) => {
                    c.revoked = true;
                    self.pending.retain(|r| r != record);
                    RevocationOutcome::Applied
                }
                None => self.keep_pending(record),
            },
            RevocationSubject::Key(fp) => {
                let mut applied = false;
                let mut known = false;
                for c in self.entries.values_mut() {
                    if c.fingerprint() == Some(*fp) {
                        c.mail_key = None;
                        c.revoked_keys.insert(*fp);
                        applied = true;
                    } else if c.revoked_keys.contains(fp) {
                        known = true;
                    }
                }
                if applied {
                    RevocationOutcome::Applied
                } else if known {
                    RevocationOutcome::AlreadyApplied
                } else {
                    self.keep_pending(record)
                }
            }
        }
    }

    fn keep_pending(&mut self, record: &RevocationRecord) -> RevocationOutcome {
        if !self.pending.contains(record) {
            self.pending.push(record.clone());
        }
        RevocationOutcome::StoredPending
    }

    pub fn card(&self, address: &MailAddress) -> Option<ContactCard> {
        self.entries.get(address).map(|c| ContactCard {
            address: c.address.clone(),
            display: c.display.clone(),
            fingerprint: c.fingerprint().or(c.expected_fingerprint),
            key: c.mail_key,
            introduced_by: c.introduced_by.iter().cloned().collect(),
            carriers: c.carriers.clone(),
            revoked: c.revoked,
            revoked_keys: c.revoked_keys.iter().copied().collect(),
        })
    }

    /// Backup as a single envelope with one `Contact` header per entry.
    pub fn export(&self) -> Envelope {
        let mut env = Envelope::new()
            .with_header(h::FROM, self.owner.to_string())
            .with_header(h::TO, self.owner.to_string());
        for addr in self.entries.keys() {
            env.add_header(h::CONTACT, self.card(addr).unwrap().to_string());
        }
        let id = wire::derive_message_id(&env, self.owner.label());
        env.set_header(h::MESSAGE_ID, id);
        env
    }

    pub fn import(env: &Envelope) -> Result<Self, BookError> {
        let owner = env.from_address().ok_or(WireError::Missing {
            line: 0,
            name: h::FROM.into(),
        })?;
        let mut book = AddressBook::new(owner);
        let cards: Vec<ContactCard> = env
            .headers_named(h::CONTACT)
            .map(|v| v.parse())
            .collect::<Result<_, _>>()?;
        for card in &cards {
            if card.address == book.owner {
                return Err(BookError::OwnAddress(card.address.clone()));
            }
            let mut c = Contact::new(card.address.clone(), &card.display);
            c.mail_key = card.key;
            c.expected_fingerprint = card.fingerprint;
            c.introduced_by = card.introduced_by.iter().cloned().collect();
            c.revoked = card.revoked;
            c.revoked_keys = card.revoked_keys.iter().copied().collect();
            book.entries.insert(card.address.clone(), c);
        }
        for card in &cards {
            for carrier in &card.carriers {
                book.add_carrier(&card.address, carrier)?;
            }
        }
        Ok(book)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{generate_identity, generate_mail_key, make_revocation, RevocationSigner};

    fn addr(seed: u64) -> MailAddress {
        generate_identity(seed).address("user").unwrap()
    }

    struct Cast {
        alice: MailAddress,
        bob: MailAddress,
        carol: MailAddress,
        david: MailAddress,
    }

    fn cast() -> Cast {
        Cast {
            alice: addr(1),
            bob: addr(2),
            carol: addr(3),
            david: addr(4),
        }
    }

    #[test]
    fn introductions_merge_provenance() {
        let c = cast();
        let mut book = AddressBook::new(c.alice.clone());
        book.add_contact(&c.bob, "Bob", None).unwrap();
        book.add_contact(&c.david, "David", None).unwrap();
        book.add_contact(&c.carol, "Carol", None).unwrap();
        book.add_contact(&c.carol, "Carol", Some(&c.bob)).unwrap();
        assert_eq!(book.len(), 3);
        let got: Vec<_> = book.get(&c.carol).unwrap().introduced_by.iter().cloned().collect();
        assert_eq!(got, vec![c.bob.clone()]);
        book.add_contact(&c.carol, "", Some(&c.david)).unwrap();
        let got: Vec<_> = book.get(&c.carol).unwrap().introduced_by.iter().cloned().collect();
        assert_eq!(got, vec![c.bob.clone(), c.david.clone()]);
        assert_eq!(book.get(&c.carol).unwrap().display, "Carol");
    }

    #[test]
    fn owner_cannot_be_added() {
        let c = cast();
        let mut book = AddressBook::new(c.alice.clone());
        assert_eq!(
            book.add_contact(&c.alice, "me", None).unwrap_err(),
            BookError::OwnAddress(c.alice.clone())
        );
    }

    #[test]
    fn key_recording_rules() {
        let c = cast();
        let mut book = AddressBook::new(c.alice.clone());
        book.add_contact(&c.carol, "Carol", None).unwrap();
        let k1 = generate_mail_key(30).public();
        let k2 = generate_mail_key(31).public();
        assert_eq!(book.record_key(&c.carol, k1).unwrap(), KeyOutcome::Stored);
        assert_eq!(book.get(&c.carol).unwrap().fingerprint(), Some(k1.fingerprint()));
        assert_eq!(book.record_key(&c.carol, k1).unwrap(), KeyOutcome::Unchanged);
        assert!(matches!(
            book.record_key(&c.carol, k2),
            Err(BookError::KeyConflict { .. })
        ));
        assert!(matches!(book.record_key(&c.bob, k2), Err(BookError::UnknownContact(_))));
    }

    #[test]
    fn expected_fingerprint_must_match() {
        let c = cast();
        let mut book = AddressBook::new(c.alice.clone());
        book.add_contact(&c.carol, "Carol", Some(&c.bob)).unwrap();
        let good = generate_mail_key(30).public();
        let bad = generate_mail_key(31).public();
        book.expect_fingerprint(&c.carol, good.fingerprint()).unwrap();
        assert!(matches!(
            book.record_key(&c.carol, bad),
            Err(BookError::KeyConflict { .. })
        ));
        assert_eq!(book.record_key(&c.carol, good).unwrap(), KeyOutcome::Stored);
    }

    #[test]
    fn carrier_ordering() {
        let c = cast();
        let mut book = AddressBook::new(c.alice.clone());
        book.add_contact(&c.bob, "Bob", None).unwrap();
        book.add_contact(&c.david, "David", None).unwrap();
        book.add_contact(&c.carol, "Carol", Some(&c.bob)).unwrap();
        assert_eq!(book.carriers_for(&c.carol).unwrap(), vec![c.bob.clone()]);
        book.add_carrier(&c.carol, &c.david).unwrap();
        assert_eq!(
            book.carriers_for(&c.carol).unwrap(),
            vec![c.david.clone(), c.bob.clone()]
        );
        assert!(book.add_carrier(&c.carol, &c.carol).is_err());
        assert!(matches!(
            book.carriers_for(&addr(77)),
            Err(BookError::UnknownContact(_))
        ));
    }

    #[test]
    fn revoked_carrier_is_skipped() {
        let c = cast();
        let bob_id = generate_identity(2);
        let mut book = AddressBook::new(c.alice.clone());
        book.add_contact(&c.bob, "Bob", None).unwrap();
        book.add_contact(&c.carol, "Carol", Some(&c.bob)).unwrap();
        let r = make_revocation(
            RevocationSigner::Identity(&bob_id),
            RevocationSubject::Address(c.bob.clone()),
            5,
        )
        .unwrap();
        assert_eq!(book.apply_revocation(&r), RevocationOutcome::Applied);
        assert_eq!(book.apply_revocation(&r), RevocationOutcome::AlreadyApplied);
        assert!(book.carriers_for(&c.carol).unwrap().is_empty());
    }

    #[test]
    fn key_revocation_clears_and_allows_new_key() {
        let c = cast();
        let mut book = AddressBook::new(c.alice.clone());
        book.add_contact(&c.carol, "Carol", None).unwrap();
        let old = generate_mail_key(30);
        let new = generate_mail_key(31).public();
        book.record_key(&c.carol, old.public()).unwrap();
        let r = make_revocation(
            RevocationSigner::Mail(&old),
            RevocationSubject::Key(old.fingerprint()),
            9,
        )
        .unwrap();
        assert_eq!(book.apply_revocation(&r), RevocationOutcome::Applied);
        let carol = book.get(&c.carol).unwrap();
        assert!(carol.mail_key.is_none());
        assert!(carol.revoked_keys.contains(&old.fingerprint()));
        assert_eq!(book.record_key(&c.carol, new).unwrap(), KeyOutcome::Stored);
        assert!(matches!(
            book.clone().apply_revocation(&r),
            RevocationOutcome::AlreadyApplied
        ));
    }

    #[test]
    fn pending_revocation_applies_on_add() {
        let c = cast();
        let bob_id = generate_identity(2);
        let mut book = AddressBook::new(c.alice.clone());
        let r = make_revocation(
            RevocationSigner::Identity(&bob_id),
            RevocationSubject::Address(c.bob.clone()),
            5,
        )
        .unwrap();
        let before = book.clone();
        assert_eq!(book.apply_revocation(&r), RevocationOutcome::StoredPending);
        assert_eq!(book.len(), before.len());
        assert_eq!(book.pending_revocations().len(), 1);
        book.add_contact(&c.bob, "Bob", None).unwrap();
        assert!(book.get(&c.bob).unwrap().revoked);
        assert!(book.pending_revocations().is_empty());
    }

    #[test]
    fn export_import_round_trip() {
        let c = cast();
        let mut book = AddressBook::new(c.alice.clone());
        book.add_contact(&c.bob, "Bob", None).unwrap();
        book.add_contact(&c.david, "David D", None).unwrap();
        book.add_contact(&c.carol, "Carol", Some(&c.bob)).unwrap();
        book.add_carrier(&c.carol, &c.david).unwrap();
        book.record_key(&c.bob, generate_mail_key(2).public()).unwrap();
        let env = book.export();
        let parsed = wire::parse(&env.serialize()).unwrap();
        let back = AddressBook::import(&parsed).unwrap();
        assert_eq!(back.owner(), book.owner());
        for a in [&c.bob, &c.carol, &c.david] {
            assert_eq!(back.get(a), book.get(a));
        }
    }

    #[test]
    fn no_operation_reads_a_second_book() {
        let src = include_str!("addressbook.rs");
        for line in src.lines().filter(|l| l.trim_start().starts_with("pub fn")) {
            assert!(
                !line.contains("AddressBook,") && !line.contains("&AddressBook)"),
                "operation spans two books: {line}"
            );
        }
    }
}
