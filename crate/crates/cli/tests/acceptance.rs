//! End-to-end acceptance checks. Each criterion runs in isolation and
//! prints one PASS/FAIL line; the test fails if any of them failed.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use cryptocubic::adversary::{audit_trace, closure, Scenario};
use cryptocubic::crypto::{new_backend, Address, CryptoBackend};
use cryptocubic::protocol::{Fault, ProtocolError};
use cryptocubic::store::{Presence, SlotId, StoreError};
use cryptocubic::{run_attack, BackendKind, Config, DestructiveStore, Mode, Simulation, Value};
use cryptocubic_cli::{parse_scenario, run, ScenarioScript};

const BUNDLED: [&str; 3] = ["s3_baseline", "s4_bare", "s5_cryptocubic"];

fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn bundled(name: &str) -> (ScenarioScript, String) {
    let dir = scenarios_dir();
    let script = std::fs::read_to_string(dir.join(format!("{name}.scn"))).unwrap();
    let golden = std::fs::read_to_string(dir.join(format!("{name}.trace"))).unwrap();
    (parse_scenario(&script).unwrap(), golden)
}

fn canonical(backend: BackendKind) -> (Simulation, cryptocubic::protocol::SquareId) {
    let mut s = Simulation::new(Config::new(Mode::CryptoCubic, backend, 0));
    let sq = s.setup("A").unwrap();
    s.fund("A", 1000).unwrap();
    (s, sq)
}

fn trace_fidelity() {
    for name in BUNDLED {
        let (script, golden) = bundled(name);
        let mut out = Vec::new();
        let outcome = run(&script, &mut out).unwrap();
        assert!(outcome.success(), "{name}: {}", String::from_utf8_lossy(&out));
        if outcome.trace != golden {
            let diff = outcome
                .trace
                .lines()
                .zip(golden.lines())
                .enumerate()
                .find(|(_, (a, b))| a != b);
            panic!("{name}: trace differs from golden at {diff:?}");
        }
    }
    // Table counts: baseline tables plus the spend, the bare protocol with
    // funding, the full protocol end to end.
    let counts: Vec<usize> = BUNDLED
        .iter()
        .map(|n| bundled(n).1.matches("== step ").count())
        .collect();
    assert_eq!(counts, vec![9, 21, 32]);
    let (_, s4) = bundled("s4_bare");
    assert!(s4.ends_with(
        "== step 21: procedure terminates; User_A and User_B notified ==\n\
         USER_A    | SERVER_S  | USER_B\n\
         Ka        | [Eb]      | Kb\n\
         Es        | Ks        | Es\n\
         ADD ($10) | Kb_Public | ADD ($10)\n\
         Ka_Public | Ka        | Kb_Public\n          | Ka_Public |\n"
    ));
}

fn security_oracle() {
    for backend in [BackendKind::Symbolic, BackendKind::Concrete] {
        let (mut s, sq) = canonical(backend);
        s.transfer("A", "B").unwrap();
        s.redeem("B", "X", 1000).unwrap();
        let audit = audit_trace(&s, sq, "A");
        assert_eq!(audit.len(), s.trace().len());
        for a in &audit {
            assert!(
                !a.server && !a.server_and_user && !a.wiretap && !a.raid,
                "{backend:?}: {a:?}"
            );
        }
        let cfg = Config::new(Mode::CryptoCubic, backend, 0);
        for sc in Scenario::ALL {
            let v = run_attack(sc, &cfg).unwrap();
            assert!(!v.can_spend, "{sc} under {backend:?}");
        }
    }
}

fn baseline_contrast() {
    for backend in [BackendKind::Symbolic, BackendKind::Concrete] {
        let v = run_attack(Scenario::PostTransferGrab, &Config::new(Mode::Baseline3, backend, 0)).unwrap();
        assert!(v.can_spend);
        assert!(!v.witness.is_empty());
        let tx = v.check.tx.clone().unwrap();
        assert_eq!(tx.amount, 1000);
        let (_, ledger) = v.check.replay().unwrap().expect("ledger accepts the witness spend");
        assert_eq!(ledger.balance(&tx.source), 0);
        assert_eq!(ledger.balance(&tx.destination), 1000);
    }
}

fn liveness() {
    for backend in [BackendKind::Symbolic, BackendKind::Concrete] {
        let (mut s, sq) = canonical(backend);
        s.transfer("A", "B").unwrap();
        let info = s.square_info(sq).unwrap();
        let slot = info.slot.unwrap();
        let dest = Address::external("X");

        assert!(matches!(s.redeem("A", "X", 1000), Err(ProtocolError::AuthFailure(_))));
        assert_eq!(s.store().ping(slot).unwrap(), Presence::Present);
        assert_eq!(s.ledger().balance(&info.address), 1000);

        s.redeem("B", "X", 1000).unwrap();
        assert_eq!(s.ledger().balance(&dest), 1000);
        assert_eq!(s.ledger().balance(&info.address), 0);
        assert_eq!(s.store().ping(slot).unwrap(), Presence::Absent);

        assert!(matches!(s.redeem("B", "X", 1000), Err(ProtocolError::SlotEmpty)));
        assert_eq!(s.ledger().balance(&dest), 1000);
    }
}

fn store_properties() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    for trial in 0..10_000u64 {
        let store = DestructiveStore::new();
        let slot = SlotId(1);
        let cap = store.grant_source([slot]).unwrap();
        let fills = rng.gen_range(1..=3);
        let takers = rng.gen_range(2..=4);
        let seeds: Vec<u64> = (0..takers).map(|_| rng.next_u64()).collect();
        let done = AtomicBool::new(false);
        let wins = AtomicUsize::new(0);
        std::thread::scope(|sc| {
            for seed in &seeds {
                let (store, done, wins) = (&store, &done, &wins);
                let mut r = ChaCha20Rng::seed_from_u64(*seed);
                sc.spawn(move || {
                    while !done.load(Ordering::Acquire) {
                        match r.gen_range(0..3) {
                            0 => {
                                let _ = store.ping(slot);
                            }
                            1 => std::thread::yield_now(),
                            _ => {
                                if store.take(slot).is_ok() {
                                    wins.fetch_add(1, Ordering::AcqRel);
                                }
                            }
                        }
                    }
                });
            }
            for i in 0..fills {
                store.insert(&cap, slot, vec![i as u8; 8]).unwrap();
                while store.ping(slot).unwrap() == Presence::Present {
                    std::thread::yield_now();
                }
            }
            done.store(true, Ordering::Release);
        });
        assert_eq!(wins.load(Ordering::Acquire), fills, "trial {trial}");
        let h = store.history(slot).unwrap();
        assert_eq!((h.fills, h.takes), (fills as u64, fills as u64));
    }

    // Mutated values never go back in.
    for _ in 0..200 {
        let store = DestructiveStore::new();
        let cap = store.grant_source([SlotId(1)]).unwrap();
        let len = rng.gen_range(1..64);
        let value: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        store.insert(&cap, SlotId(1), value.clone()).unwrap();
        let (v, permit) = store.take(SlotId(1)).unwrap();
        let mut m = v.clone();
        match rng.gen_range(0..3) {
            0 => {
                let i = rng.gen_range(0..m.len());
                m[i] ^= 1 << rng.gen_range(0..8);
            }
            1 => m.push(rng.gen()),
            _ => {
                m.pop();
            }
        }
        assert!(matches!(store.reinsert(&permit, m), Err(StoreError::ValueMismatch)));
        assert_eq!(store.ping(SlotId(1)).unwrap(), Presence::Absent);
    }

    // Pings are reads only.
    let store = DestructiveStore::new();
    let cap = store.grant_source([SlotId(1), SlotId(2)]).unwrap();
    store.insert(&cap, SlotId(1), b"Ea".to_vec()).unwrap();
    let before = store.state_digest();
    for i in 0..100 {
        let _ = store.ping(SlotId(1 + i % 2));
    }
    assert_eq!(store.state_digest(), before);
}

fn abort_correctness() {
    for fault in [Fault::WrongKa, Fault::SilentKa] {
        for mode in [Mode::CryptoCubic, Mode::Bare4] {
            let mut s = Simulation::new(Config::new(mode, BackendKind::Symbolic, 0));
            let sq = s.setup("A").unwrap();
            let slot = s.square_info(sq).unwrap().slot.unwrap();
            s.inject("A", fault);
            let err = s.transfer("A", "B").unwrap_err();
            match fault {
                Fault::WrongKa => assert!(matches!(err, ProtocolError::KaMismatch), "{err}"),
                _ => assert!(matches!(err, ProtocolError::Timeout(_)), "{err}"),
            }
            assert_eq!(s.store().ping(slot).unwrap(), Presence::Present);
            assert_eq!(s.square_info(sq).unwrap().owner, "A");
            s.clear_faults("A");
            s.transfer("A", "B").unwrap();
            assert_eq!(s.square_info(sq).unwrap().owner, "B");
        }
    }
}

fn knowledge(b: &mut dyn CryptoBackend, rng: &mut ChaCha20Rng) -> Vec<Value> {
    let pairs: Vec<_> = (0..2).map(|_| b.gen_asym_pair()).collect();
    let ks = b.gen_sym_key();
    let ms = b.gen_multisig();
    let mut pool = vec![
        Value::SymKey(ks.clone()),
        Value::SigningKey(ms.sig_u),
        Value::SigningKey(ms.sig_s),
        Value::Token(b.gen_token()),
    ];
    for p in &pairs {
        pool.push(Value::AsymPrivate(p.private.clone()));
        pool.push(Value::AsymPublic(p.public.clone()));
    }
    for _ in 0..6 {
        let inner = pool.choose(rng).unwrap().clone();
        let c = if rng.gen() {
            b.asym_encrypt(&pairs.choose(rng).unwrap().public, &inner).unwrap()
        } else {
            b.sym_encrypt(&ks, &inner).unwrap()
        };
        pool.push(Value::Cypher(c));
    }
    let t = Value::Tuple(pool.choose_multiple(rng, 2).cloned().collect());
    pool.push(t);
    pool.into_iter().filter(|_| rng.gen_bool(0.4)).collect()
}

fn crypto_properties() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for kind in [BackendKind::Symbolic, BackendKind::Concrete] {
        let mut b = new_backend(kind, 3);
        let ks = b.gen_sym_key();
        let kp = b.gen_asym_pair();
        for _ in 0..100 {
            let len = rng.gen_range(0..128);
            let m = Value::Bytes((0..len).map(|_| rng.gen()).collect());
            let c = b.sym_encrypt(&ks, &m).unwrap();
            assert_eq!(b.sym_decrypt(&ks, &c).unwrap(), m);
            let c = b.asym_encrypt(&kp.public, &m).unwrap();
            assert_eq!(b.asym_decrypt(&kp.private, &c).unwrap(), m);
        }
        let pairs: Vec<_> = (0..6).map(|_| b.gen_asym_pair()).collect();
        for p in &pairs {
            for q in &pairs {
                let c = b.asym_encrypt(&q.public, &Value::Bytes(b"probe".to_vec())).unwrap();
                assert_eq!(b.matches(&p.private, &q.public), b.asym_decrypt(&p.private, &c).is_ok());
            }
        }
        let mut seen = BTreeSet::new();
        for _ in 0..1000 {
            let len = rng.gen_range(1..64);
            let m: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let h = b.hash(&m).unwrap();
            assert_eq!(h, b.hash(&m).unwrap());
            seen.insert((m, h));
        }
        let digests: BTreeSet<_> = seen.iter().map(|(_, h)| *h).collect();
        let inputs: BTreeSet<_> = seen.iter().map(|(m, _)| m.clone()).collect();
        assert_eq!(digests.len(), inputs.len());

        for _ in 0..500 {
            let k = knowledge(b.as_mut(), &mut rng);
            let once = closure(b.as_ref(), k.clone());
            assert_eq!(closure(b.as_ref(), once.clone()), once);
            assert!(k.iter().all(|v| once.contains(v)));
        }
    }
}

fn backend_equivalence() {
    for name in BUNDLED {
        let (script, _) = bundled(name);
        let mut outputs = Vec::new();
        for backend in [BackendKind::Symbolic, BackendKind::Concrete] {
            let s = ScenarioScript { backend, ..script.clone() };
            let mut out = Vec::new();
            let outcome = run(&s, &mut out).unwrap();
            let verdicts: Vec<String> = outcome.verdicts.iter().map(|v| v.line()).collect();
            outputs.push((outcome.trace, verdicts, out, outcome.status));
        }
        assert!(outputs[0] == outputs[1], "{name} differs across backends");
    }
    for mode in [Mode::CryptoCubic, Mode::Baseline3, Mode::Bare4] {
        for sc in Scenario::ALL {
            let v: Vec<bool> = [BackendKind::Symbolic, BackendKind::Concrete]
                .into_iter()
                .map(|b| run_attack(sc, &Config::new(mode, b, 0)).unwrap().can_spend)
                .collect();
            assert_eq!(v[0], v[1], "{sc} in {mode:?}");
        }
    }
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn()); 8] = [
        ("trace fidelity against golden tables", trace_fidelity),
        ("security oracle: no coalition spends in cryptocubic mode", security_oracle),
        ("security contrast: baseline post-transfer grab spends $10", baseline_contrast),
        ("legitimate-path liveness of redeem", liveness),
        ("destructive store: one take per fill, no mutated reinserts, pure pings", store_properties),
        ("abort correctness on Ka mismatch and timeout", abort_correctness),
        ("crypto properties and closure idempotence", crypto_properties),
        ("backend equivalence of traces and verdicts", backend_equivalence),
    ];
    let prev = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let results: Vec<(&str, Result<(), String>)> = criteria
        .iter()
        .map(|(name, f)| {
            let r = catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            });
            (*name, r)
        })
        .collect();
    std::panic::set_hook(prev);

    for (name, r) in &results {
        match r {
            Ok(()) => println!("PASS {name}"),
            Err(msg) => println!("FAIL {name}: {msg}"),
        }
    }
    let failed: Vec<_> = results.iter().filter(|(_, r)| r.is_err()).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
