use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::crypto::{new_backend, BackendKind};
use crate::protocol::{Config, Mode, Simulation};

/// A pool of related terms: keys, cyphers nesting other keys, tuples.
fn universe(backend: &mut dyn CryptoBackend, rng: &mut ChaCha20Rng) -> Vec<Value> {
    let mut pool = Vec::new();
    let pairs: Vec<_> = (0..3).map(|_| backend.gen_asym_pair()).collect();
    let syms: Vec<_> = (0..2).map(|_| backend.gen_sym_key()).collect();
    let ms = backend.gen_multisig();
    for p in &pairs {
        pool.push(Value::AsymPrivate(p.private.clone()));
        pool.push(Value::AsymPublic(p.public.clone()));
    }
    pool.extend(syms.iter().cloned().map(Value::SymKey));
    pool.push(Value::SigningKey(ms.sig_u.clone()));
    pool.push(Value::SigningKey(ms.sig_s.clone()));
    pool.push(Value::Token(backend.gen_token()));
    for _ in 0..8 {
        let inner = pool.choose(rng).unwrap().clone();
        let c = if rng.gen_bool(0.5) {
            let p = pairs.choose(rng).unwrap();
            backend.asym_encrypt(&p.public, &inner).unwrap()
        } else {
            let k = syms.choose(rng).unwrap();
            backend.sym_encrypt(k, &inner).unwrap()
        };
        pool.push(Value::Cypher(c));
    }
    for _ in 0..3 {
        let a = pool.choose(rng).unwrap().clone();
        let b = pool.choose(rng).unwrap().clone();
        pool.push(Value::Tuple(vec![a, b]));
    }
    pool
}

fn subset(pool: &[Value], rng: &mut ChaCha20Rng) -> Vec<Value> {
    pool.iter().filter(|_| rng.gen_bool(0.3)).cloned().collect()
}

#[test]
fn empty_knowledge_is_a_fixed_point() {
    let b = new_backend(BackendKind::Symbolic, 0);
    assert!(closure(b.as_ref(), []).is_empty());
}

#[test]
fn private_key_opens_owner_cypher() {
    let mut b = new_backend(BackendKind::Symbolic, 1);
    let ka = b.gen_asym_pair();
    let ms = b.gen_multisig();
    let ea = b
        .asym_encrypt(&ka.public, &Value::SigningKey(ms.sig_u.clone()))
        .unwrap();
    let c = closure(b.as_ref(), [Value::AsymPrivate(ka.private), Value::Cypher(ea.clone())]);
    assert!(c.contains(&Value::SigningKey(ms.sig_u.clone())));
    let without = closure(b.as_ref(), [Value::Cypher(ea)]);
    assert!(!without.contains(&Value::SigningKey(ms.sig_u)));
}

#[test]
fn nested_layers_unwrap() {
    let mut b = new_backend(BackendKind::Concrete, 2);
    let ks = b.gen_sym_key();
    let kp = b.gen_asym_pair();
    let secret = Value::Token(b.gen_token());
    let inner = b.asym_encrypt(&kp.public, &secret).unwrap();
    let outer = b
        .sym_encrypt(&ks, &Value::Tuple(vec![Value::AsymPrivate(kp.private.clone()), Value::Cypher(inner)]))
        .unwrap();
    let c = Closure::compute(
        b.as_ref(),
        [("a".to_string(), Value::Cypher(outer)), ("b".to_string(), Value::SymKey(ks))],
    );
    assert!(c.contains(&secret));
    let w = c.witness(&secret);
    assert_eq!(w.last().unwrap().rule, Rule::AsymDecrypt);
    assert!(w.iter().any(|d| d.rule == Rule::SymDecrypt));
    assert!(w.iter().any(|d| d.rule == Rule::Untuple));
}

#[test]
fn closure_is_idempotent_over_500_sets() {
    for kind in [BackendKind::Symbolic, BackendKind::Concrete] {
        let mut b = new_backend(kind, 5);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for round in 0..500 {
            if round % 50 == 0 {
                // refresh the pool now and then so sets span several universes
                let _ = universe(b.as_mut(), &mut rng);
            }
            let pool = universe(b.as_mut(), &mut rng);
            let s = subset(&pool, &mut rng);
            let once = closure(b.as_ref(), s.clone());
            let twice = closure(b.as_ref(), once.clone());
            assert_eq!(once, twice, "{kind:?} round {round}");
            assert!(s.iter().all(|v| once.contains(v)));
        }
    }
}

#[test]
fn closure_is_monotone() {
    let mut b = new_backend(BackendKind::Symbolic, 6);
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    for _ in 0..200 {
        let pool = universe(b.as_mut(), &mut rng);
        let s = subset(&pool, &mut rng);
        let mut t = s.clone();
        t.extend(subset(&pool, &mut rng));
        let cs = closure(b.as_ref(), s);
        let ct = closure(b.as_ref(), t);
        assert!(cs.is_subset(&ct));
    }
}

#[test]
fn synthesis_is_answered_on_demand() {
    let mut b = new_backend(BackendKind::Symbolic, 7);
    let kp = b.gen_asym_pair();
    let tok = Value::Token(b.gen_token());
    let c = Closure::compute(
        b.as_ref(),
        [("x".into(), tok.clone()), ("x".into(), Value::AsymPublic(kp.public.clone()))],
    );
    let h = Value::Digest(b.hash_value(&tok));
    assert!(c.derivable(b.as_ref(), &h));
    let enc = b.asym_encrypt(&kp.public, &tok).unwrap();
    assert!(c.derivable(b.as_ref(), &Value::Cypher(enc)));
    assert!(c.derivable(b.as_ref(), &Value::Tuple(vec![tok.clone(), tok.clone()])));
    let other = Value::Token(b.gen_token());
    assert!(!c.derivable(b.as_ref(), &other));
    assert!(!c.derivable(b.as_ref(), &Value::Digest(b.hash_value(&other))));
}

fn staged(mode: Mode) -> (Simulation, crate::protocol::SquareId) {
    let mut s = Simulation::new(Config::new(mode, BackendKind::Symbolic, 0));
    let sq = s.setup("A").unwrap();
    s.fund("A", 1000).unwrap();
    (s, sq)
}

#[test]
fn one_leg_is_not_enough() {
    let (s, sq) = staged(Mode::Baseline3);
    let info = s.square_info(sq).unwrap();
    let c = Coalition::new().with("A", s.user("A").unwrap().snapshot()).close(s.backend());
    assert!(!can_spend(s.backend(), s.ledger(), &c, &info).can_spend);
}

#[test]
fn true_verdicts_replay_on_the_ledger() {
    let (s, sq) = staged(Mode::Baseline3);
    let info = s.square_info(sq).unwrap();
    let taken = s.raid();
    let c = Coalition::new()
        .with("A", s.user("A").unwrap().snapshot())
        .with("take", taken)
        .close(s.backend());
    let v = can_spend(s.backend(), s.ledger(), &c, &info);
    assert!(v.can_spend);
    assert_eq!(v.witness.len(), 2);
    let (_, after) = v.replay().unwrap().unwrap();
    assert_eq!(after.balance(&info.address), 0);
    assert_eq!(after.balance(&Address::external("attacker")), 1000);
}

#[test]
fn adding_knowledge_keeps_a_spend() {
    let (s, sq) = staged(Mode::CryptoCubic);
    let info = s.square_info(sq).unwrap();
    let base = Coalition::new()
        .with("A", s.user("A").unwrap().snapshot())
        .with("S", s.server().snapshot())
        .with("take", s.raid());
    assert!(can_spend(s.backend(), s.ledger(), &base.close(s.backend()), &info).can_spend);
    let more = base.with_wiretap(s.network(), usize::MAX);
    assert!(can_spend(s.backend(), s.ledger(), &more.close(s.backend()), &info).can_spend);
}

#[test]
fn cryptocubic_scenarios_all_fail() {
    for backend in [BackendKind::Symbolic, BackendKind::Concrete] {
        let cfg = Config::new(Mode::CryptoCubic, backend, 0);
        for sc in Scenario::ALL {
            let v = run_attack(sc, &cfg).unwrap();
            assert!(!v.can_spend, "{sc} under {backend:?}: {:?}", v.notes);
            assert!(v.witness.is_empty());
        }
    }
}

#[test]
fn baseline_grab_succeeds_with_ten_dollars() {
    let v = run_attack(
        Scenario::PostTransferGrab,
        &Config::new(Mode::Baseline3, BackendKind::Concrete, 0),
    )
    .unwrap();
    assert!(v.can_spend);
    let tx = v.check.tx.clone().unwrap();
    assert_eq!(tx.amount, 1000);
    assert!(v.check.replay().unwrap().is_ok());
}

#[test]
fn counterfeit_and_race_are_contained() {
    let cfg = Config::new(Mode::CryptoCubic, BackendKind::Symbolic, 0);
    let v = run_attack(Scenario::CounterfeitEs, &cfg).unwrap();
    assert!(v.notes[0].contains("does not hash"), "{:?}", v.notes);
    let v = run_attack(Scenario::DoubleTransfer, &cfg).unwrap();
    assert!(v.notes.iter().any(|n| n.contains("slot is empty")), "{:?}", v.notes);
    let v = run_attack(Scenario::TokenReplay, &cfg).unwrap();
    assert!(v.notes[0].contains("authentication"), "{:?}", v.notes);
}

#[test]
fn report_lines() {
    let cfg = Config::new(Mode::Baseline3, BackendKind::Symbolic, 0);
    let v = run_attack(Scenario::PostTransferGrab, &cfg).unwrap();
    let cc = run_attack(Scenario::StoreRaid, &Config::new(Mode::CryptoCubic, BackendKind::Symbolic, 0)).unwrap();
    let report = render_report(&[v, cc]);
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "post_transfer_grab baseline3 true 2");
    assert_eq!(lines[1], "store_raid cryptocubic false");
    assert_eq!(lines[2], ASSUMPTION);
}

#[test]
fn every_canonical_step_is_safe() {
    let (mut s, sq) = staged(Mode::CryptoCubic);
    s.transfer("A", "B").unwrap();
    s.redeem("B", "X", 1000).unwrap();
    let audit = audit_trace(&s, sq, "A");
    assert_eq!(audit.len(), s.trace().len());
    for a in &audit {
        assert!(!a.server && !a.server_and_user && !a.wiretap && !a.raid, "{a:?}");
    }
    // While A owns the square, A with the server's help can redeem; after
    // the transfer that right is gone.
    let handover = s
        .trace()
        .iter()
        .position(|e| e.label.starts_with("procedure stores Eb"))
        .unwrap();
    let established = s
        .trace()
        .iter()
        .position(|e| e.label.starts_with("procedure terminates; CryptoSquare"))
        .unwrap();
    assert!(audit[established].owner_redeem);
    assert!(audit[handover..].iter().all(|a| !a.owner_redeem));
}
