use proptest::prelude::*;

use onionmail::gossip::{run_flood, FloodSetup, ListMode, MembershipGraph};
use onionmail::identity::{
    derive_address, generate_identity, generate_mail_key, seal, unseal, verify_address, MailAddress,
};
use onionmail::node::{RetryPolicy, SendMode};
use onionmail::simnet::Interval;
use onionmail::wire::{decode_reply_path, encode_reply_path, parse, Envelope};
use onionmail::world::{World, WorldAction};

fn header_name() -> impl Strategy<Value = String> {
    "X-[A-Za-z0-9-]{1,12}"
}

fn header_value() -> impl Strategy<Value = String> {
    "[^\r\n]{0,80}"
}

fn envelope() -> impl Strategy<Value = Envelope> {
    (
        prop::collection::vec((header_name(), header_value()), 0..6),
        prop::collection::vec(any::<u8>(), 0..512),
        any::<u64>(),
        any::<u64>(),
    )
        .prop_map(|(extra, body, s1, s2)| {
            let from = generate_identity(s1).address("user").unwrap();
            let to = generate_identity(s2).address("user").unwrap();
            let mut env = Envelope::new()
                .with_header("From", from.as_str())
                .with_header("To", to.as_str())
                .with_header("Message-ID", format!("{s1:016x}@{}", from.label()));
            for (n, v) in extra {
                env.add_header(&n, v);
            }
            env.with_body(body)
        })
}

proptest! {
    #[test]
    fn envelope_round_trips(env in envelope()) {
        let bytes = env.serialize();
        let back = parse(&bytes).unwrap();
        prop_assert_eq!(&back, &env);
        prop_assert_eq!(back.serialize(), bytes);
    }

    #[test]
    fn reply_path_round_trips(seed in any::<u64>(), local in "[a-z0-9]{1,20}", host in "[a-z][a-z0-9]{0,10}(\\.[a-z][a-z0-9]{0,6}){1,3}") {
        let inner = generate_identity(seed).address(&local).unwrap();
        let ext = encode_reply_path(&inner, &host).unwrap();
        prop_assert_eq!(decode_reply_path(&ext).unwrap(), inner);
    }

    #[test]
    fn address_verifies_only_for_its_key(a in any::<u64>(), b in any::<u64>()) {
        prop_assume!(a != b);
        let (ka, kb) = (generate_identity(a).public(), generate_identity(b).public());
        let addr = derive_address(&ka, "user").unwrap();
        prop_assert!(verify_address(&addr, &ka));
        prop_assert!(!verify_address(&addr, &kb));
    }

    #[test]
    fn retry_schedule_is_increasing_and_capped(base in 1u64..100, cap_mul in 1u64..300, n in 1u32..30) {
        let cap = base * cap_mul;
        let p = RetryPolicy { base, cap, expiry: u64::MAX / 4, max_attempts: 64 };
        let times: Vec<u64> = p.attempt_times(0).take(n as usize + 1).collect();
        for w in times.windows(2) {
            let gap = w[1] - w[0];
            prop_assert!(gap >= base && gap <= cap);
        }
        for (k, w) in times.windows(2).enumerate() {
            prop_assert_eq!(w[1] - w[0], p.backoff(k as u32));
        }
    }
}

#[test]
fn seal_round_trips_1000_payloads() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5ea1);
    for i in 0..1000u64 {
        let key = generate_mail_key(i);
        let other = generate_mail_key(i + 1_000_000);
        let len = rng.gen_range(0..2048);
        let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let sealed = seal(&key.public(), &payload);
        assert_eq!(unseal(&key, &sealed).unwrap(), payload, "payload {i}");
        assert!(
            unseal(&other, &sealed).is_err(),
            "payload {i} opened with the wrong key"
        );
    }
}

fn fan_out_world(carriers: usize, recipient_online_at: u64) -> (World, MailAddress) {
    let mut w = World::new(carriers as u64);
    let alice_n = w.add_node("alice").unwrap();
    let carol_n = w.add_node("carol").unwrap();
    let alice = w
        .add_identity(alice_n, "a", generate_identity(1), generate_mail_key(1), "user")
        .unwrap();
    let carol = w
        .add_identity(carol_n, "c", generate_identity(3), generate_mail_key(3), "user")
        .unwrap();
    let (ak, ck) = (generate_mail_key(1).public(), generate_mail_key(3).public());
    let mut cs = Vec::new();
    for i in 0..carriers {
        let n = w.add_node(&format!("k{i}")).unwrap();
        let seed = 10 + i as u64;
        let a = w
            .add_identity(n, "k", generate_identity(seed), generate_mail_key(seed), "user")
            .unwrap();
        let b = w.node_mut(n).book_mut(&a).unwrap();
        b.add_contact(&alice, "a", None).unwrap();
        b.record_key(&alice, ak).unwrap();
        b.add_contact(&carol, "c", None).unwrap();
        b.record_key(&carol, ck).unwrap();
        cs.push((a, generate_mail_key(seed).public()));
    }
    let book = w.node_mut(alice_n).book_mut(&alice).unwrap();
    book.add_contact(&carol, "c", None).unwrap();
    book.record_key(&carol, ck).unwrap();
    for (c, k) in &cs {
        book.add_contact(c, "k", None).unwrap();
        book.record_key(c, *k).unwrap();
        book.add_carrier(&carol, c).unwrap();
    }
    let cb = w.node_mut(carol_n).book_mut(&carol).unwrap();
    cb.add_contact(&alice, "a", None).unwrap();
    cb.record_key(&alice, ak).unwrap();
    w.set_online(carol_n, vec![Interval::new(recipient_online_at, None)])
        .unwrap();
    (w, carol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// However many carriers are used and whenever the recipient comes up,
    /// the message lands in the inbox exactly once.
    #[test]
    fn delivery_is_exactly_once(carriers in 0usize..=4, online_at in 0u64..600, fan in any::<bool>()) {
        let (mut w, carol) = fan_out_world(carriers, online_at);
        let alice = w.node(w.node_id("alice").unwrap()).identities()[0].address.clone();
        let mode = if fan { SendMode::FanOut } else { SendMode::CarrierFallback };
        w.schedule_action(0, WorldAction::Send {
            node: w.node_id("alice").unwrap(),
            from: alice,
            to: carol.clone(),
            body: b"once".to_vec(),
            mode,
            confirm: false,
        }).unwrap();
        w.run_to_quiescence(1_000_000).unwrap();
        let node = w.node(w.node_id("carol").unwrap());
        prop_assert_eq!(node.inbox(&carol).len(), 1);
        prop_assert_eq!(node.inbox(&carol)[0].plaintext.as_deref(), Some(&b"once"[..]));
    }

    /// Every member of a connected list receives every post, in either mode,
    /// and a single-poster ledger ends in consensus.
    #[test]
    fn gossip_reaches_every_member(
        v in 2usize..12,
        extra in prop::collection::vec((0usize..12, 0usize..12), 0..12),
        parents in prop::collection::vec(any::<prop::sample::Index>(), 11),
        tree in any::<bool>(),
        jitter in 0u64..4,
    ) {
        let mut g = MembershipGraph::new(0..v);
        for i in 1..v {
            g.add_edge(parents[i - 1].index(i), i);
        }
        for (a, b) in extra {
            if a < v && b < v && a != b {
                g.add_edge(a, b);
            }
        }
        let mut s = FloodSetup::new(g, if tree { ListMode::Tree } else { ListMode::Flood });
        s.posts = 3;
        s.ledger = true;
        s.jitter = jitter;
        let r = run_flood(&s).unwrap();
        prop_assert!(r.unreached.is_empty(), "{:?}", r.unreached);
        prop_assert!(r.consensus.consensus, "{}", r.consensus);
    }
}
