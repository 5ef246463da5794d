//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Every count is exact (tolerance 0); each
//! scenario must finish within `SCENARIO_BUDGET`.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use onionmail::gossip::{run_flood_batch, FloodSetup, ListMode, MembershipGraph};
use onionmail::identity::{generate_identity, generate_mail_key, self_certification_audit, MailAddress};
use onionmail::node::RetryPolicy;
use onionmail::scenario::{parse_scenario, run_scenario, run_scenario_world, RunOutput};
use onionmail::wire::{decode_reply_path, encode_reply_path, h};
use onionmail::world::{World, WorldAction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SCENARIO_BUDGET: Duration = Duration::from_secs(5);

const SCENARIOS: [(&str, &str); 9] = [
    ("direct", include_str!("../testdata/scenarios/direct.scn")),
    ("key_exchange", include_str!("../testdata/scenarios/key_exchange.scn")),
    ("carrier", include_str!("../testdata/scenarios/carrier.scn")),
    ("fanout", include_str!("../testdata/scenarios/fanout.scn")),
    ("gateway", include_str!("../testdata/scenarios/gateway.scn")),
    ("tamper", include_str!("../testdata/scenarios/tamper.scn")),
    ("ledger_ring", include_str!("../testdata/scenarios/ledger_ring.scn")),
    ("fork", include_str!("../testdata/scenarios/fork.scn")),
    ("revoke", include_str!("../testdata/scenarios/revoke.scn")),
];

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn script(name: &str) -> &'static str {
    SCENARIOS.iter().find(|(n, _)| *n == name).unwrap().1
}

/// Run a bundled scenario; all of its own assertions must pass in budget.
fn timed(name: &str) -> Result<(RunOutput, World, Duration), String> {
    let sc = parse_scenario(script(name)).map_err(|e| format!("{name}: {e}"))?;
    let start = Instant::now();
    let (out, world) = run_scenario_world(&sc, None);
    let took = start.elapsed();
    if out.exit_code != 0 {
        return Err(format!(
            "{name}: exit {} {:?} {:?}",
            out.exit_code, out.failures, out.error
        ));
    }
    if took > SCENARIO_BUDGET {
        return Err(format!("{name}: took {took:?}"));
    }
    Ok((out, world, took))
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn addr(world: &World, node: &str, id: &str) -> MailAddress {
    let n = world.node_id(node).unwrap();
    world.node(n).identity_by_name(id).unwrap().address.clone()
}

fn c1_self_certification() -> Outcome {
    let seeds: Vec<u64> = (0..1000).map(|i| 0x5e1f_0000 + i).collect();
    let a = self_certification_audit(&seeds, "user", 100);
    // 1 match + 12 label mutations + 100 foreign keys per identity.
    ensure(a.identities == 1000 && a.checks == 1000 * 113, || format!("{a:?}"))?;
    ensure(a.false_accepts == 0 && a.false_rejects == 0, || format!("{a:?}"))?;
    Ok(format!("{} checks, 0 false accepts, 0 false rejects", a.checks))
}

fn c2_direct() -> Outcome {
    let (out, _, took) = timed("direct")?;
    let golden = include_str!("../testdata/golden/direct.log");
    ensure(out.log == golden, || format!("log differs from golden:\n{}", out.log))?;
    Ok(format!("latency 1, log matches golden ({took:?})"))
}

fn c3_key_exchange() -> Outcome {
    let (out, world, took) = timed("key_exchange")?;
    let (a, b) = (addr(&world, "alice", "a1"), addr(&world, "bob", "b1"));
    let an = world.node(world.node_id("alice").unwrap());
    let bn = world.node(world.node_id("bob").unwrap());
    let held_by_a = an.book(&a).unwrap().get(&b).and_then(|c| c.fingerprint());
    let held_by_b = bn.book(&b).unwrap().get(&a).and_then(|c| c.fingerprint());
    ensure(held_by_a == Some(bn.identity(&b).unwrap().mail.fingerprint()), || {
        "alice's copy".into()
    })?;
    ensure(held_by_b == Some(an.identity(&a).unwrap().mail.fingerprint()), || {
        "bob's copy".into()
    })?;
    let carrier_lines = out
        .log
        .lines()
        .filter(|l| l.contains(" carry ") || l.contains(" relay "))
        .count();
    ensure(carrier_lines == 0, || format!("{carrier_lines} carrier events"))?;
    let sends = out.log.lines().filter(|l| l.contains(" send ")).count();
    ensure(sends == 2, || format!("{sends} transmissions, expected one round trip"))?;
    Ok(format!("fingerprints match both ways, 0 carrier events ({took:?})"))
}

fn c4_carrier() -> Outcome {
    let (_, world, took) = timed("carrier")?;
    // Bob holds the message from t=11 and retries on the closed-form schedule;
    // the first attempt that lands at or after 500 arrives one unit later.
    let p = RetryPolicy::default();
    let expected = p.first_attempt_at_or_after(11, 499) + 1;
    ensure(expected == 942, || format!("schedule gives {expected}"))?;
    let c = addr(&world, "carol", "c1");
    let carol = world.node(world.node_id("carol").unwrap());
    let m = carol.inbox(&c).first().ok_or("carol's inbox is empty")?;
    ensure(m.received_at == expected, || format!("received at {}", m.received_at))?;
    ensure(m.plaintext.as_deref() == Some(&b"meet at noon"[..]), || "body".into())?;
    ensure(m.signature == onionmail::node::SignatureStatus::Verified, || {
        format!("{:?}", m.signature)
    })?;
    Ok(format!(
        "received at t={expected}, unsealed, signature verified ({took:?})"
    ))
}

fn c5_duplicates() -> Outcome {
    let (_, world, took) = timed("fanout")?;
    let c = addr(&world, "carol", "c1");
    let carol = world.node(world.node_id("carol").unwrap());
    ensure(carol.inbox(&c).len() == 1, || {
        format!("inbox {}", carol.inbox(&c).len())
    })?;
    ensure(carol.counters().duplicates == 2, || {
        format!("dups {}", carol.counters().duplicates)
    })?;
    Ok(format!("inbox-count 1, duplicates suppressed 2 ({took:?})"))
}

fn c6_gateway() -> Outcome {
    let inner: MailAddress = "user@wxu6pped7wv3.onion".parse().map_err(|e| format!("{e:?}"))?;
    let ext = encode_reply_path(&inner, "bobsmail.net").map_err(|e| e.to_string())?;
    ensure(ext == "user-wxu6pped7wv3@bobsmail.net", || ext.clone())?;
    ensure(decode_reply_path(&ext).ok() == Some(inner), || "decode".into())?;
    let (_, world, took) = timed("gateway")?;
    let a = addr(&world, "alice", "a1");
    let alice = world.node(world.node_id("alice").unwrap());
    let m = alice.inbox(&a).first().ok_or("reply not delivered")?;
    ensure(m.plaintext.as_deref() == Some(&b"hi alice"[..]), || "reply body".into())?;
    ensure(m.envelope.header(h::EXTERNAL_FROM) == Some("david@example.org"), || {
        "external sender".into()
    })?;
    let bob = world.node(world.node_id("bob").unwrap());
    let out = bob.external_outbox().first().ok_or("nothing left the gateway")?;
    let reply_to = encode_reply_path(&a, "bobsmail.net").unwrap();
    ensure(out.from == reply_to && out.to == "david@example.org", || {
        format!("{out:?}")
    })?;
    Ok(format!("{ext} round-trips; reply reached alice ({took:?})"))
}

/// Every labelled connected graph on `v` vertices.
fn connected_graphs(v: usize) -> Vec<Vec<(usize, usize)>> {
    let pairs: Vec<(usize, usize)> = (0..v).flat_map(|a| (a + 1..v).map(move |b| (a, b))).collect();
    (0u32..1 << pairs.len())
        .map(|mask| {
            pairs
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, e)| *e)
                .collect::<Vec<_>>()
        })
        .filter(|edges| {
            let mut g = MembershipGraph::new(0..v);
            for &(a, b) in edges {
                g.add_edge(a, b);
            }
            g.is_connected()
        })
        .collect()
}

fn random_connected(rng: &mut ChaCha8Rng, v: usize) -> Vec<(usize, usize)> {
    let mut edges = BTreeSet::new();
    for i in 1..v {
        edges.insert((rng.gen_range(0..i), i));
    }
    let extra = rng.gen_range(0..=v);
    for _ in 0..extra {
        let a = rng.gen_range(0..v);
        let b = rng.gen_range(0..v);
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    edges.into_iter().collect()
}

fn c7_gossip() -> Outcome {
    let mut graphs: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
    let mut per_v = Vec::new();
    for v in 1..=5 {
        let gs = connected_graphs(v);
        per_v.push(gs.len());
        graphs.extend(gs.into_iter().map(|g| (v, g)));
    }
    ensure(per_v == [1, 1, 4, 38, 728], || format!("enumeration {per_v:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x676f_7373_6970);
    for _ in 0..20 {
        let v = rng.gen_range(6..=32);
        graphs.push((v, random_connected(&mut rng, v)));
    }
    let mut setups = Vec::new();
    for (i, (v, edges)) in graphs.iter().enumerate() {
        for mode in [ListMode::Flood, ListMode::Tree] {
            let mut g = MembershipGraph::new(0..*v);
            for &(a, b) in edges {
                g.add_edge(a, b);
            }
            let mut s = FloodSetup::new(g, mode);
            s.posts = 2;
            s.author = i % v;
            s.seed = i as u64;
            setups.push((*v, edges.len(), s));
        }
    }
    let start = Instant::now();
    let plain: Vec<FloodSetup> = setups.iter().map(|(_, _, s)| s.clone()).collect();
    let reports = run_flood_batch(&plain);
    let took = start.elapsed();
    for ((v, e, s), r) in setups.iter().zip(reports) {
        let r = r.map_err(|x| format!("V={v} E={e}: {x}"))?;
        let want = match s.mode {
            ListMode::Flood => (2 * e + 1 - v) as u64,
            ListMode::Tree => (v - 1) as u64,
        };
        ensure(r.unreached.is_empty(), || {
            format!("V={v} E={e} {:?}: unreached {:?}", s.mode, r.unreached)
        })?;
        ensure(r.transmissions.iter().all(|&t| t == want), || {
            format!("V={v} E={e} {:?}: {:?} != {want}", s.mode, r.transmissions)
        })?;
    }
    Ok(format!(
        "{} labelled graphs V<=5 + 20 random V<=32, flood=2E-V+1 and tree=V-1 exact ({took:?} total)",
        graphs.len() - 20
    ))
}

fn c8_countersign() -> Outcome {
    let (_, world, took) = timed("tamper")?;
    let states = world.list_states("team");
    let rejecting = states
        .iter()
        .filter(|s| s.rejections().iter().any(|(_, r)| r.to_string() == "bad-countersign"))
        .count();
    let other = states
        .iter()
        .flat_map(|s| s.rejections())
        .filter(|(_, r)| r.to_string() != "bad-countersign")
        .count();
    // The forger's two ring neighbours are the only receivers.
    ensure(rejecting == 2 && other == 0, || {
        format!("{rejecting} rejecting, {other} other")
    })?;
    Ok(format!("2/2 receivers rejected with bad-countersign ({took:?})"))
}

fn c9_ledger() -> Outcome {
    let (_, world, t1) = timed("ledger_ring")?;
    let states = world.list_states("ring");
    ensure(states.len() == 8, || "ring size".into())?;
    let heads: BTreeSet<_> = states.iter().map(|s| s.head_hash().to_string()).collect();
    ensure(heads.len() == 1, || format!("{} distinct heads", heads.len()))?;
    ensure(states.iter().all(|s| s.log().len() == 10), || "log lengths".into())?;
    let chain_breaks = states
        .iter()
        .filter(|s| s.rejections().iter().any(|(_, r)| r.to_string() == "chain-break"))
        .count();
    ensure(chain_breaks == 2, || format!("{chain_breaks} chain-break rejections"))?;
    ensure(world.list_consensus("ring").consensus, || "consensus lost".into())?;
    let (_, fork, t2) = timed("fork")?;
    let r = fork.list_consensus("team");
    ensure(!r.consensus, || "fork not detected".into())?;
    let at = r.divergence.as_ref().map(|d| d.position);
    ensure(at == Some(1), || format!("fork at {at:?}"))?;
    Ok(format!(
        "one head over 10 posts, forged Prev-Hash rejected, fork at position 1 ({:?})",
        t1 + t2
    ))
}

fn c10_revocation() -> Outcome {
    let (_, world, took) = timed("revoke")?;
    let bob = addr(&world, "bob", "b1");
    for n in world.nodes() {
        for ident in n.identities() {
            if ident.address == bob {
                continue;
            }
            let book = n.book(&ident.address).unwrap();
            for c in book.contacts() {
                let carriers = book.carriers_for(&c.address).map_err(|e| e.to_string())?;
                ensure(!carriers.contains(&bob), || {
                    format!("{} still carries via bob", ident.address)
                })?;
            }
        }
    }

    // A second key for a contact whose first key was never revoked.
    let mut w = World::new(7);
    let (an, bn) = (w.add_node("alice").unwrap(), w.add_node("bob").unwrap());
    let a = w
        .add_identity(an, "a1", generate_identity(1), generate_mail_key(1), "user")
        .unwrap();
    let b = w
        .add_identity(bn, "b1", generate_identity(2), generate_mail_key(2), "user")
        .unwrap();
    w.node_mut(bn)
        .book_mut(&b)
        .unwrap()
        .add_contact(&a, "a1", None)
        .unwrap();
    let book = w.node_mut(an).book_mut(&a).unwrap();
    book.add_contact(&b, "b1", None).unwrap();
    book.record_key(&b, generate_mail_key(99).public()).unwrap();
    w.schedule_action(
        1,
        WorldAction::RequestKey {
            node: an,
            identity: a.clone(),
            contact: b.clone(),
        },
    )
    .unwrap();
    w.run_to_quiescence(10_000).map_err(|e| e.to_string())?;
    let conflict = w.net.log().iter().any(|l| l.contains("outcome=rejected:key-conflict"));
    ensure(conflict, || {
        format!("no key-conflict in log:\n{}", w.net.log().join("\n"))
    })?;
    let held = w.node(an).book(&a).unwrap().get(&b).and_then(|c| c.mail_key);
    ensure(held == Some(generate_mail_key(99).public()), || {
        "held key was replaced".into()
    })?;
    Ok(format!(
        "revoked peer gone from every carrier list, send refused, key-conflict raised ({took:?})"
    ))
}

fn c11_determinism() -> Outcome {
    for (name, text) in SCENARIOS {
        let sc = parse_scenario(text).map_err(|e| e.to_string())?;
        let a = run_scenario(&sc, None);
        let b = run_scenario(&sc, None);
        ensure(a == b, || format!("{name} differs between runs"))?;
    }
    let mut g = MembershipGraph::new(0..6usize);
    for (a, b) in [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (0, 3)] {
        g.add_edge(a, b);
    }
    let mut s = FloodSetup::new(g, ListMode::Flood);
    s.jitter = 5;
    s.ledger = true;
    s.posts = 3;
    let r1 = run_flood_batch(std::slice::from_ref(&s));
    let r2 = run_flood_batch(std::slice::from_ref(&s));
    ensure(format!("{r1:?}") == format!("{r2:?}"), || "flood report differs".into())?;
    Ok(format!(
        "{} scenarios and a jittered flood identical across runs",
        SCENARIOS.len()
    ))
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags; a name filter that excludes us means skip.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }
    let criteria: [Criterion; 11] = [
        ("self-certification suite", c1_self_certification),
        ("direct delivery", c2_direct),
        ("key exchange", c3_key_exchange),
        ("carrier store-and-forward", c4_carrier),
        ("duplicate suppression", c5_duplicates),
        ("gateway round trip", c6_gateway),
        ("gossip completeness and cost", c7_gossip),
        ("countersignature enforcement", c8_countersign),
        ("ledger integrity", c9_ledger),
        ("revocation", c10_revocation),
        ("determinism", c11_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {:>2} {name}: PASS {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL {why}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
