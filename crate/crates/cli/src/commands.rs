//! Subcommand implementations. Each job reads a typed config and writes its
//! artifacts through an [`OutDir`].

use std::collections::BTreeMap;
use std::path::Path;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use dsfl_core::bench::{self, BenchConfig};
use dsfl_core::fieldvec::is_prime_u64;
use dsfl_core::fltrain::{evaluate, log_loss_weighted, train_local};
use dsfl_core::rng::substream;
use dsfl_core::server::soundness::{small_field_miss_rate, MissRateReport};
use dsfl_core::server::Verdict;
use dsfl_core::simnet::{
    self, collusion_experiment, curious_server_scan, poison_trials, AdversaryKind, CollusionSummary, ExperimentConfig,
    LeakScan, PoisonTrials, SimConfig, SimError, SCHEMA_VERSION,
};

use crate::error::{exit, invalid, CliError};
use crate::output::OutDir;
use crate::selftest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// Apply recovered masks with the wrong sign.
    RecoverySign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelftestConfig {
    pub seed: u64,
    pub mutate: Option<Mutation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmallFieldConfig {
    pub modulus: u64,
    pub dim: usize,
    pub trials: u64,
}

fn default_trials() -> u64 {
    1000
}

fn default_collusion_rounds() -> u64 {
    100
}

fn default_scan_rounds() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub schema_version: u32,
    pub sim: SimConfig,
    /// Poisoning rounds to run.
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default = "default_collusion_rounds")]
    pub collusion_rounds: u64,
    /// Rounds of curious-server probing when no poison trials run.
    #[serde(default = "default_scan_rounds")]
    pub scan_rounds: u64,
    /// Optional forgery experiment over a small prime field.
    #[serde(default)]
    pub small_field: Option<SmallFieldConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Job {
    Simulate(SimConfig),
    Train(ExperimentConfig),
    Attack(AttackConfig),
    Bench(BenchConfig),
    Selftest(SelftestConfig),
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Simulate(_) => "simulate",
            Job::Train(_) => "train",
            Job::Attack(_) => "attack",
            Job::Bench(_) => "bench",
            Job::Selftest(_) => "selftest",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Job::Simulate(c) => c.rng_seed,
            Job::Train(c) => c.sim.rng_seed,
            Job::Attack(c) => c.sim.rng_seed,
            Job::Bench(c) => c.rng_seed,
            Job::Selftest(c) => c.seed,
        }
    }

    pub fn override_seed(&mut self, seed: u64) {
        match self {
            Job::Simulate(c) => c.rng_seed = seed,
            Job::Train(c) => c.sim.rng_seed = seed,
            Job::Attack(c) => c.sim.rng_seed = seed,
            Job::Bench(c) => c.rng_seed = seed,
            Job::Selftest(c) => c.seed = seed,
        }
    }

    pub fn config_value(&self) -> serde_json::Value {
        let v = match self {
            Job::Simulate(c) => serde_json::to_value(c),
            Job::Train(c) => serde_json::to_value(c),
            Job::Attack(c) => serde_json::to_value(c),
            Job::Bench(c) => serde_json::to_value(c),
            Job::Selftest(c) => serde_json::to_value(c),
        };
        v.expect("serializable")
    }

    pub fn from_value(subcommand: &str, value: serde_json::Value) -> Result<Self, String> {
        let e = |e: serde_json::Error| e.to_string();
        Ok(match subcommand {
            "simulate" => Job::Simulate(serde_json::from_value(value).map_err(e)?),
            "train" => Job::Train(serde_json::from_value(value).map_err(e)?),
            "attack" => Job::Attack(serde_json::from_value(value).map_err(e)?),
            "bench" => Job::Bench(serde_json::from_value(value).map_err(e)?),
            "selftest" => Job::Selftest(serde_json::from_value(value).map_err(e)?),
            other => return Err(format!("unknown subcommand `{other}`")),
        })
    }

    /// Runs the job; `origin` names the config source in diagnostics.
    pub fn run(&self, origin: &Path, out: &mut OutDir) -> Result<u8, CliError> {
        match self {
            Job::Simulate(c) => simulate(c, origin, out),
            Job::Train(c) => train(c, origin, out),
            Job::Attack(c) => attack(c, origin, out),
            Job::Bench(c) => run_bench(c, origin, out),
            Job::Selftest(c) => selftest::run(c, out),
        }
    }
}

fn sim_err(origin: &Path, e: SimError) -> CliError {
    match e {
        SimError::Unrecoverable { .. } => CliError::Unrecoverable(e.to_string()),
        other => invalid(origin, other),
    }
}

#[derive(Serialize)]
struct SimulateSummary {
    rounds_requested: u64,
    rounds_completed: u64,
    verdicts: BTreeMap<String, u64>,
    recovered_rounds: u64,
    fault: Option<RoundFault>,
}

#[derive(Serialize)]
struct RoundFault {
    round: u64,
    message: String,
}

fn verdict_name(v: Verdict) -> String {
    format!("{v:?}")
}

fn simulate(cfg: &SimConfig, origin: &Path, out: &mut OutDir) -> Result<u8, CliError> {
    let outcomes = simnet::run_simulation(cfg).map_err(|e| sim_err(origin, e))?;
    let mut summary = SimulateSummary {
        rounds_requested: cfg.rounds,
        rounds_completed: 0,
        verdicts: BTreeMap::new(),
        recovered_rounds: 0,
        fault: None,
    };
    for o in &outcomes {
        let t = &o.transcript;
        out.write_json(&format!("transcripts/round_{:04}.json", t.round), t)?;
        for v in t.verdicts.values() {
            *summary.verdicts.entry(verdict_name(*v)).or_default() += 1;
        }
        summary.recovered_rounds += (!t.recovery_log.is_empty()) as u64;
        match &o.result {
            Ok(_) => summary.rounds_completed += 1,
            Err(e) => {
                summary.fault = Some(RoundFault {
                    round: t.round,
                    message: e.to_string(),
                })
            }
        }
    }
    out.write_json("summary.json", &summary)?;
    println!(
        "simulate: {}/{} rounds completed, verdicts {:?}",
        summary.rounds_completed, summary.rounds_requested, summary.verdicts
    );
    if let Some(f) = &summary.fault {
        eprintln!("error: unrecoverable fault in round {}: {}", f.round, f.message);
        return Ok(exit::UNRECOVERABLE);
    }
    Ok(exit::OK)
}

#[derive(Serialize)]
struct TrainSummary {
    rounds: u64,
    final_recall: f64,
    final_precision: f64,
    final_auprc: f64,
    local_mean_recall: Option<f64>,
    rejected_rounds: Vec<u64>,
}

fn train(cfg: &ExperimentConfig, origin: &Path, out: &mut OutDir) -> Result<u8, CliError> {
    let split = cfg.prepare().map_err(|e| sim_err(origin, e))?;
    println!(
        "train: {} rows, {} banks, test set of {}",
        split.train.len() + split.test.len(),
        split.banks.len(),
        split.test.len()
    );
    let tc = cfg.train_config();
    let mut csv = String::from("round,scope,recall,precision,auprc,loss\n");
    let result = match simnet::run_experiment(&cfg.sim, &split, &tc) {
        Ok(r) => r,
        Err(e @ SimError::Unrecoverable { .. }) => {
            eprintln!("error: {e}");
            out.write("metrics.csv", csv.as_bytes())?;
            return Ok(exit::UNRECOVERABLE);
        }
        Err(e) => return Err(sim_err(origin, e)),
    };
    for m in &result.rounds {
        csv.push_str(&format!(
            "{},global,{:.6},{:.6},{:.6},{:.6}\n",
            m.round, m.recall, m.precision, m.auprc, m.loss
        ));
    }
    let last_round = cfg.sim.rounds - 1;
    let mut local_mean = None;
    if cfg.local_baseline {
        let pw = tc.pos_weight.resolve(&split.train);
        let mut recalls = Vec::new();
        let mut sums = [0.0f64; 4];
        for (b, bank) in split.banks.iter().enumerate() {
            let params = train_local(bank, &tc, pw).map_err(|e| invalid(origin, e))?;
            let m = evaluate(&params, &split.test, tc.threshold).map_err(|e| invalid(origin, e))?;
            let loss = log_loss_weighted(&params, bank, pw).map_err(|e| invalid(origin, e))?;
            csv.push_str(&format!(
                "{last_round},local_bank_{b},{:.6},{:.6},{:.6},{:.6}\n",
                m.recall, m.precision, m.auprc, loss
            ));
            recalls.push(m.recall);
            for (s, v) in sums.iter_mut().zip([m.recall, m.precision, m.auprc, loss]) {
                *s += v;
            }
        }
        let k = split.banks.len() as f64;
        csv.push_str(&format!(
            "{last_round},local_mean,{:.6},{:.6},{:.6},{:.6}\n",
            sums[0] / k,
            sums[1] / k,
            sums[2] / k,
            sums[3] / k
        ));
        local_mean = Some(sums[0] / k);
    }
    out.write("metrics.csv", csv.as_bytes())?;
    let fin = result.final_metrics().expect("at least one round");
    let summary = TrainSummary {
        rounds: cfg.sim.rounds,
        final_recall: fin.recall,
        final_precision: fin.precision,
        final_auprc: fin.auprc,
        local_mean_recall: local_mean,
        rejected_rounds: result.rounds.iter().filter(|m| !m.rejected.is_empty()).map(|m| m.round).collect(),
    };
    out.write_json("summary.json", &summary)?;
    println!(
        "train: final global recall {:.4}, AUPRC {:.4}{}",
        fin.recall,
        fin.auprc,
        local_mean.map_or(String::new(), |l| format!(", local mean recall {l:.4}"))
    );
    Ok(exit::OK)
}

#[derive(Serialize)]
struct AttackReport {
    adversary: AdversaryKind,
    members: Vec<u32>,
    poison: Option<PoisonTrials>,
    collusion: Option<CollusionSummary>,
    curious_scan: LeakScan,
    refused_recovery_requests: u64,
    small_field: Option<MissRateReport>,
}

fn attack(cfg: &AttackConfig, origin: &Path, out: &mut OutDir) -> Result<u8, CliError> {
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(invalid(origin, format!("unsupported schema_version {}", cfg.schema_version)));
    }
    cfg.sim.validate().map_err(|e| invalid(origin, e))?;
    let adv = &cfg.sim.adversary;
    let mut report = AttackReport {
        adversary: adv.kind,
        members: adv.members.clone(),
        poison: None,
        collusion: None,
        curious_scan: LeakScan::default(),
        refused_recovery_requests: 0,
        small_field: None,
    };
    match adv.kind {
        AdversaryKind::None => return Err(invalid(origin, "attack needs an adversary.kind other than None")),
        AdversaryKind::PostCommitPoisoner | AdversaryKind::TagForger => {
            let (trials, scan) = poison_trials(&cfg.sim, cfg.trials).map_err(|e| sim_err(origin, e))?;
            println!("attack: {}/{} poisoned submissions detected", trials.detections, trials.trials);
            report.poison = Some(trials);
            report.curious_scan = scan;
        }
        AdversaryKind::ColludingCoalition => {
            let s = collusion_experiment(&cfg.sim, cfg.collusion_rounds, usize::MAX).map_err(|e| sim_err(origin, e))?;
            println!(
                "attack: collusion over {} rounds, {} sub-threshold reconstructions, {} full-coalition failures",
                s.rounds, s.sub_threshold_reconstructions, s.full_coalition_failures
            );
            report.collusion = Some(s);
        }
        AdversaryKind::CuriousServer => {}
    }
    if report.poison.is_none() {
        let (scan, refused) = curious_server_scan(&cfg.sim, cfg.scan_rounds).map_err(|e| sim_err(origin, e))?;
        report.curious_scan = scan;
        report.refused_recovery_requests = refused;
    }
    println!(
        "attack: curious-server scan over {} payloads: {} seed leaks, {} plaintext leaks",
        report.curious_scan.payloads_scanned, report.curious_scan.seed_leaks, report.curious_scan.plaintext_leaks
    );
    if let Some(sf) = &cfg.small_field {
        if !is_prime_u64(sf.modulus) || sf.dim == 0 || sf.trials == 0 {
            return Err(invalid(origin, "small_field needs a prime modulus, dim ≥ 1 and trials ≥ 1"));
        }
        let mut rng = substream(cfg.sim.rng_seed, "small-field", 0);
        let r = small_field_miss_rate(sf.modulus, sf.dim, sf.trials, &mut rng);
        println!(
            "attack: small-field miss rate {:.6} (expected {:.6}, σ {:.6})",
            r.rate, r.expected, r.sigma
        );
        report.small_field = Some(r);
    }
    out.write_json("report.json", &report)?;
    Ok(exit::OK)
}

#[derive(Serialize)]
struct CounterRow {
    protocol: String,
    n: usize,
    m: usize,
    d: usize,
    edges: usize,
    counters: bench::PhaseCounters,
}

fn run_bench(cfg: &BenchConfig, origin: &Path, out: &mut OutDir) -> Result<u8, CliError> {
    cfg.validate().map_err(|e| invalid(origin, e))?;
    let points = bench::run_benchmark(cfg).map_err(|e| invalid(origin, e))?;
    let (csv, summary) = bench::emit_report(&points).map_err(|e| invalid(origin, e))?;
    let counters: Vec<CounterRow> = points
        .iter()
        .map(|p| CounterRow {
            protocol: p.protocol.clone(),
            n: p.measurement.n,
            m: p.measurement.m,
            d: p.measurement.d,
            edges: p.measurement.edges,
            counters: p.measurement.counters,
        })
        .collect();
    out.write_json("counters.json", &counters)?;
    out.write_timed("report.csv", csv.as_bytes())?;
    let mut s = serde_json::to_vec_pretty(&summary).expect("serializable");
    s.push(b'\n');
    out.write_timed("summary.json", &s)?;
    for f in &summary.fits {
        println!(
            "bench: {} linear R² {:.4}, AIC linear {:.2} vs quadratic {}",
            f.protocol,
            f.linear.r2,
            f.aic_linear,
            f.aic_quadratic.map_or("n/a".into(), |a| format!("{a:.2}"))
        );
    }
    Ok(exit::OK)
}
