//! Built-in self-checks against independent oracles.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use dsfl_core::client::ClientState;
use dsfl_core::fieldvec::{decode_signed, encode_signed, FieldElement, FieldVector, SignedQuantized, MODULUS};
use dsfl_core::rng::{substream, substream_seed};
use dsfl_core::server::RecoveryRule;
use dsfl_core::sharding::assign_shards;
use dsfl_core::simnet::{poison_trials, run_simulation, AdversaryKind, SimConfig};
use dsfl_core::ParticipantId;

use crate::commands::{Mutation, SelftestConfig};
use crate::error::{exit, CliError};
use crate::output::OutDir;

#[derive(Debug, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub checks: u64,
    pub failed: u64,
    pub failures: Vec<String>,
}

impl SuiteResult {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checks: 0,
            failed: 0,
            failures: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failed += 1;
            if self.failures.len() < 10 {
                self.failures.push(what());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn fieldvec_suite(seed: u64) -> SuiteResult {
    let mut r = SuiteResult::new("fieldvec");
    let mut rng = substream(seed, "selftest-field", 0);
    let p = MODULUS as u128;
    for _ in 0..10_000 {
        let a = rng.gen_range(0..MODULUS);
        let b = rng.gen_range(0..MODULUS);
        let (fa, fb) = (FieldElement::new(a), FieldElement::new(b));
        let add = ((a as u128 + b as u128) % p) as u64;
        let sub = ((a as u128 + p - b as u128) % p) as u64;
        let mul = ((a as u128 * b as u128) % p) as u64;
        r.check((fa + fb).value() == add, || format!("{a} + {b}"));
        r.check((fa - fb).value() == sub, || format!("{a} - {b}"));
        r.check((fa * fb).value() == mul, || format!("{a} * {b}"));
    }
    let bound = 1u64 << 40;
    for _ in 0..200 {
        let v: Vec<i64> = (0..16).map(|_| rng.gen_range(-(bound as i64)..=bound as i64)).collect();
        let q = SignedQuantized::new(v.clone(), bound).expect("within bound");
        let back = encode_signed(&q).and_then(|x| decode_signed(&x, bound));
        r.check(back.as_ref().map(|b| b.elems() == v.as_slice()).unwrap_or(false), || {
            "signed round trip".into()
        });
    }
    r
}

fn zero_sum_suite(seed: u64) -> SuiteResult {
    let mut r = SuiteResult::new("zero-sum");
    let dim = 16;
    for round in 0..10u64 {
        let ids: Vec<ParticipantId> = (0..12).map(ParticipantId).collect();
        let nonce = substream_seed(seed, "selftest-nonce", round);
        let Ok(assignment) = assign_shards(&ids, round, &nonce, 4) else {
            r.check(false, || format!("sharding failed in round {round}"));
            continue;
        };
        let mut clients: BTreeMap<ParticipantId, ClientState> = ids
            .iter()
            .map(|&u| {
                let key = substream_seed(seed, "selftest-key", (round << 32) | u.0 as u64);
                (u, ClientState::new(u, round, &key).expect("valid key seed"))
            })
            .collect();
        let publics: BTreeMap<ParticipantId, Vec<u8>> =
            clients.iter().map(|(u, c)| (*u, c.public_key().to_vec())).collect();
        let mut total = FieldVector::zeros(dim).expect("nonzero dim");
        for shard in &assignment.shards {
            for &u in shard {
                let nb: BTreeMap<_, _> = shard.iter().filter(|&&v| v != u).map(|v| (*v, publics[v].clone())).collect();
                let c = clients.get_mut(&u).expect("client exists");
                if c.establish_pair_secrets(&assignment, &nb).is_err() {
                    r.check(false, || format!("keying failed for {u}"));
                    continue;
                }
                for &v in shard.iter().filter(|&&v| v != u) {
                    let (sign, mask) = c.mask_term(v, dim).expect("keyed");
                    if sign > 0 {
                        total.add_assign(&mask).expect("same dim");
                    } else {
                        total.sub_assign(&mask).expect("same dim");
                    }
                }
            }
        }
        r.check(total.is_zero(), || format!("masks do not cancel in round {round}"));
    }
    r
}

fn recovery_suite(seed: u64, rule: RecoveryRule) -> SuiteResult {
    let mut r = SuiteResult::new("recovery");
    for (i, rate) in [0.1, 0.2, 0.3].into_iter().enumerate() {
        let mut cfg = SimConfig::new(10, 5, 4, 8, seed.wrapping_add(i as u64));
        cfg.dropout.rate = rate;
        cfg.recovery_rule = rule;
        let outcomes = match run_simulation(&cfg) {
            Ok(o) => o,
            Err(e) => {
                r.check(false, || format!("simulation failed: {e}"));
                continue;
            }
        };
        for o in &outcomes {
            let round = o.transcript.round;
            r.check(!o.transcript.dropouts.is_empty(), || format!("round {round} had no dropouts"));
            match &o.result {
                Ok(f) => {
                    let expected = o.expected_sum();
                    r.check(f.sum.elems() == expected.as_slice(), || {
                        format!("rate {rate}: round {round} sum differs from surviving inputs")
                    });
                }
                Err(e) => r.check(false, || format!("rate {rate}: round {round} failed: {e}")),
            }
        }
    }
    r
}

fn tag_suite(seed: u64) -> SuiteResult {
    let mut r = SuiteResult::new("tag");
    for kind in [AdversaryKind::PostCommitPoisoner, AdversaryKind::TagForger] {
        let mut cfg = SimConfig::new(10, 5, 1, 8, seed);
        cfg.adversary.kind = kind;
        cfg.adversary.members = vec![2, 7];
        match poison_trials(&cfg, 25) {
            Ok((t, _)) => {
                r.check(t.detections == t.trials, || {
                    format!("{kind:?}: {}/{} detected", t.detections, t.trials)
                });
                r.check(t.exact_aggregates == t.trials, || {
                    format!("{kind:?}: {}/{} exact aggregates", t.exact_aggregates, t.trials)
                });
            }
            Err(e) => r.check(false, || format!("{kind:?}: {e}")),
        }
    }
    r
}

fn determinism_suite(seed: u64) -> SuiteResult {
    let mut r = SuiteResult::new("determinism");
    let mut cfg = SimConfig::new(12, 4, 3, 8, seed);
    cfg.dropout.rate = 0.2;
    let render = |cfg: &SimConfig| -> Result<Vec<String>, String> {
        let outcomes = run_simulation(cfg).map_err(|e| e.to_string())?;
        Ok(outcomes
            .iter()
            .map(|o| serde_json::to_string(&o.transcript).expect("serializable"))
            .collect())
    };
    match (render(&cfg), render(&cfg)) {
        (Ok(a), Ok(b)) => {
            r.check(a.len() == b.len(), || "round counts differ".into());
            for (i, (x, y)) in a.iter().zip(&b).enumerate() {
                r.check(x == y, || format!("transcript of round {i} differs"));
            }
        }
        (Err(e), _) | (_, Err(e)) => r.check(false, || e),
    }
    r
}

pub fn run(cfg: &SelftestConfig, out: &mut OutDir) -> Result<u8, CliError> {
    let rule = match cfg.mutate {
        Some(Mutation::RecoverySign) => RecoveryRule::AddAsWritten,
        None => RecoveryRule::Subtract,
    };
    let suites = [
        fieldvec_suite(cfg.seed),
        zero_sum_suite(cfg.seed),
        recovery_suite(cfg.seed, rule),
        tag_suite(cfg.seed),
        determinism_suite(cfg.seed),
    ];
    for s in &suites {
        if s.passed() {
            println!("{}: pass ({} checks)", s.name, s.checks);
        } else {
            println!("{}: FAIL ({} of {} checks failed)", s.name, s.failed, s.checks);
            for f in &s.failures {
                println!("  {f}");
            }
        }
    }
    out.write_json("selftest.json", &suites)?;
    Ok(if suites.iter().all(SuiteResult::passed) {
        exit::OK
    } else {
        exit::CHECK_FAILED
    })
}
