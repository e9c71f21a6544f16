//! Scaling measurements for sharded versus full-mesh masking.
//!
//! Edge counts come from enumerating the actual shard graph. Timings are
//! wall-clock medians per phase; operation counters are exact and
//! independent of the clock.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::ClientState;
use crate::fieldvec::SignedQuantized;
use crate::quantizer::QuantConfig;
use crate::rng::{substream, substream_seed};
use crate::server::{open_round, RoundState, ServerError, ServerPolicy};
use crate::sharding::{assign_shards, shard_neighbors, ShardError};
use crate::simnet::SCHEMA_VERSION;
use crate::{OpCounters, ParticipantId};

pub const MIN_REPS: usize = 5;
pub const MAX_PARTICIPANTS: usize = 500;
pub const MAX_DIM: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("report needs at least one data point")]
    Empty,
    #[error("protocol `{0}` has fewer than 2 data points")]
    TooFewPoints(String),
    #[error("invalid bench config field `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("malformed report CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("protocol step failed: {0}")]
    Protocol(String),
}

fn protocol_err(e: impl std::fmt::Display) -> BenchError {
    BenchError::Protocol(e.to_string())
}

/// Edges of the shard graph for participants `0..n` with target size `m`.
pub fn count_key_exchanges(n: usize, m: usize) -> Result<usize, BenchError> {
    let ids: Vec<ParticipantId> = (0..n as u32).map(ParticipantId).collect();
    Ok(assign_shards(&ids, 0, b"dsfl/bench", m)?.edges().len())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub keying_ms: f64,
    pub masking_ms: f64,
    pub verification_ms: f64,
    pub aggregation_ms: f64,
}

impl PhaseTimings {
    pub fn total_ms(&self) -> f64 {
        self.keying_ms + self.masking_ms + self.verification_ms + self.aggregation_ms
    }

    fn get(&self, phase: &str) -> f64 {
        match phase {
            "keying" => self.keying_ms,
            "masking" => self.masking_ms,
            "verification" => self.verification_ms,
            "aggregation" => self.aggregation_ms,
            _ => self.total_ms(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounters {
    pub keying: OpCounters,
    pub masking: OpCounters,
    pub verification: OpCounters,
    pub aggregation: OpCounters,
}

impl PhaseCounters {
    pub fn total(&self) -> OpCounters {
        let mut t = self.keying;
        t += self.masking;
        t += self.verification;
        t += self.aggregation;
        t
    }

    fn get(&self, phase: &str) -> OpCounters {
        match phase {
            "keying" => self.keying,
            "masking" => self.masking,
            "verification" => self.verification,
            "aggregation" => self.aggregation,
            _ => self.total(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMeasurement {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub edges: usize,
    pub reps: usize,
    /// Per-phase medians over the repetitions.
    pub timings: PhaseTimings,
    pub counters: PhaseCounters,
}

fn snapshot(clients: &BTreeMap<ParticipantId, ClientState>, server: &RoundState) -> OpCounters {
    let mut t = server.counters();
    for c in clients.values() {
        t += c.counters();
    }
    t
}

fn diff(a: OpCounters, b: OpCounters) -> OpCounters {
    OpCounters {
        prf_calls: b.prf_calls - a.prf_calls,
        field_ops: b.field_ops - a.field_ops,
        key_agreements: b.key_agreements - a.key_agreements,
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn run_once(n: usize, m: usize, d: usize, seed: u64, rep: u64) -> Result<(PhaseTimings, PhaseCounters, usize), BenchError> {
    let ids: Vec<ParticipantId> = (0..n as u32).map(ParticipantId).collect();
    let quant = QuantConfig::default();
    let mut rng = substream(seed, "bench-server", rep);
    let nonce = substream_seed(seed, "bench-nonce", rep);
    let mut server = open_round(&ids, rep, &nonce, m, d, quant, ServerPolicy::default(), &mut rng)?;
    let assignment = server.assignment().clone();
    let b = quant.bound() as i64;
    let mut drng = substream(seed, "bench-inputs", rep);
    let inputs: Vec<SignedQuantized> = ids
        .iter()
        .map(|_| SignedQuantized::new((0..d).map(|_| drng.gen_range(-b..=b)).collect(), quant.bound()).expect("bounded"))
        .collect();
    let mut timings = PhaseTimings::default();
    let mut counters = PhaseCounters::default();

    let t = Instant::now();
    let mut clients = BTreeMap::new();
    for &u in &ids {
        let key_seed = substream_seed(seed, "bench-key", (rep << 32) | u.0 as u64);
        clients.insert(u, ClientState::new(u, rep, &key_seed).map_err(protocol_err)?);
    }
    let publics: BTreeMap<ParticipantId, Vec<u8>> = clients.iter().map(|(u, c)| (*u, c.public_key().to_vec())).collect();
    for (&u, c) in clients.iter_mut() {
        let keys = shard_neighbors(&assignment, u)?
            .into_iter()
            .map(|v| (v, publics[&v].clone()))
            .collect();
        c.establish_pair_secrets(&assignment, &keys).map_err(protocol_err)?;
    }
    timings.keying_ms = ms(t);
    let mut last = snapshot(&clients, &server);
    counters.keying = last;

    let t = Instant::now();
    for (i, (_, c)) in clients.iter_mut().enumerate() {
        let x = c.build_masked_update(&inputs[i], &assignment).map_err(protocol_err)?;
        server.record_commitment(c.commit_update(&x).map_err(protocol_err)?)?;
    }
    timings.masking_ms = ms(t);
    let now = snapshot(&clients, &server);
    counters.masking = diff(last, now);
    last = now;

    let t = Instant::now();
    server.close_commitments()?;
    let (reveal, _) = server.reveal_challenge()?;
    for c in clients.values_mut() {
        let alpha = c
            .accept_challenge(&reveal.rho, &reveal.nonce, server.rho_commitment(), d)
            .map_err(protocol_err)?;
        let sub = c.submit(&alpha).map_err(protocol_err)?;
        server.receive_submission(sub)?;
    }
    server.close_submissions()?;
    timings.verification_ms = ms(t);
    let now = snapshot(&clients, &server);
    counters.verification = diff(last, now);
    last = now;

    let t = Instant::now();
    let agg = server.aggregate_updates()?;
    server.finalize(&agg)?;
    timings.aggregation_ms = ms(t);
    counters.aggregation = diff(last, snapshot(&clients, &server));
    Ok((timings, counters, assignment.edges().len()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        (v[k / 2 - 1] + v[k / 2]) / 2.0
    }
}

/// Times one protocol round `reps` times (single-threaded) and reports
/// per-phase medians. Counters are identical across repetitions.
pub fn measure_round(n: usize, m: usize, d: usize, seed: u64, reps: usize) -> Result<RoundMeasurement, BenchError> {
    if !(2..=MAX_PARTICIPANTS).contains(&n) {
        return Err(BenchError::InvalidConfig {
            field: "n",
            message: format!("must lie in 2..={MAX_PARTICIPANTS}"),
        });
    }
    if !(1..=MAX_DIM).contains(&d) {
        return Err(BenchError::InvalidConfig {
            field: "d",
            message: format!("must lie in 1..={MAX_DIM}"),
        });
    }
    if reps < MIN_REPS {
        return Err(BenchError::InvalidConfig {
            field: "reps",
            message: format!("need at least {MIN_REPS}"),
        });
    }
    let mut runs = Vec::with_capacity(reps);
    for rep in 0..reps as u64 {
        runs.push(run_once(n, m, d, seed, rep)?);
    }
    let pick = |f: fn(&PhaseTimings) -> f64| median(runs.iter().map(|r| f(&r.0)).collect());
    let timings = PhaseTimings {
        keying_ms: pick(|t| t.keying_ms),
        masking_ms: pick(|t| t.masking_ms),
        verification_ms: pick(|t| t.verification_ms),
        aggregation_ms: pick(|t| t.aggregation_ms),
    };
    Ok(RoundMeasurement {
        n,
        m,
        d,
        edges: runs[0].2,
        reps,
        timings,
        counters: runs[0].1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub rss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    /// `y = a·x² + b·x + c`
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub r2: f64,
    pub rss: f64,
}

fn r_squared(ys: &[f64], rss: f64) -> f64 {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let tss: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    if tss == 0.0 {
        1.0
    } else {
        1.0 - rss / tss
    }
}

/// Ordinary least squares line; `None` with fewer than 2 distinct `x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    let n = xs.len() as f64;
    if xs.len() < 2 || xs.len() != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    Some(LinearFit {
        slope,
        intercept,
        r2: r_squared(ys, rss),
        rss,
    })
}

/// Least-squares parabola via the 3×3 normal equations; needs 3 distinct `x`.
pub fn quadratic_fit(xs: &[f64], ys: &[f64]) -> Option<QuadraticFit> {
    if xs.len() < 3 || xs.len() != ys.len() {
        return None;
    }
    // centre and scale x for conditioning
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let sx = xs.iter().map(|x| (x - mx).abs()).fold(0.0, f64::max);
    if sx == 0.0 {
        return None;
    }
    let zs: Vec<f64> = xs.iter().map(|x| (x - mx) / sx).collect();
    let mut m = [[0.0f64; 4]; 3];
    for (z, y) in zs.iter().zip(ys) {
        let basis = [z * z, *z, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += basis[i] * basis[j];
            }
            m[i][3] += basis[i] * y;
        }
    }
    for col in 0..3 {
        let pivot = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..4 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    let (qa, qb, qc) = (m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]);
    // expand back from z = (x − mx)/sx
    let a = qa / (sx * sx);
    let b = qb / sx - 2.0 * qa * mx / (sx * sx);
    let c = qa * mx * mx / (sx * sx) - qb * mx / sx + qc;
    let rss = xs.iter().zip(ys).map(|(x, y)| (y - (a * x * x + b * x + c)).powi(2)).sum();
    Some(QuadraticFit {
        a,
        b,
        c,
        r2: r_squared(ys, rss),
        rss,
    })
}

/// Akaike information criterion for Gaussian residuals.
pub fn aic(n_points: usize, rss: f64, params: usize) -> f64 {
    let n = n_points as f64;
    n * (rss.max(f64::MIN_POSITIVE) / n).ln() + 2.0 * params as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    /// `sharded` or `full_mesh`.
    pub protocol: String,
    pub measurement: RoundMeasurement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub protocol: String,
    pub points: usize,
    pub linear: LinearFit,
    pub quadratic: Option<QuadraticFit>,
    pub aic_linear: f64,
    pub aic_quadratic: Option<f64>,
    pub quadratic_preferred: Option<bool>,
    pub low_confidence: bool,
}

/// Analytic cost of an additively homomorphic baseline: one modular
/// exponentiation per encrypted coordinate. Not measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaillierModelRow {
    pub n: usize,
    pub d: usize,
    pub modexp_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub fits: Vec<FitSummary>,
    pub paillier_model: Vec<PaillierModelRow>,
    pub paillier_model_note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub protocol: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub phase: String,
    pub median_ms: f64,
    pub ops_prf: u64,
    pub ops_field: u64,
    pub edges: usize,
}

pub const PHASES: [&str; 5] = ["keying", "masking", "verification", "aggregation", "total"];

pub fn csv_rows(points: &[ScalingPoint]) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    for p in points {
        let r = &p.measurement;
        for phase in PHASES {
            let ops = r.counters.get(phase);
            rows.push(CsvRow {
                protocol: p.protocol.clone(),
                n: r.n,
                m: r.m,
                d: r.d,
                phase: phase.to_string(),
                median_ms: r.timings.get(phase),
                ops_prf: ops.prf_calls,
                ops_field: ops.field_ops,
                edges: r.edges,
            });
        }
    }
    rows
}

pub fn write_csv(rows: &[CsvRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, BenchError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| BenchError::Csv(e.to_string()))
}

/// CSV table plus per-protocol fits of total latency against `N`.
pub fn emit_report(points: &[ScalingPoint]) -> Result<(String, ReportSummary), BenchError> {
    if points.is_empty() {
        return Err(BenchError::Empty);
    }
    let mut by_protocol: BTreeMap<&str, Vec<&RoundMeasurement>> = BTreeMap::new();
    for p in points {
        by_protocol.entry(&p.protocol).or_default().push(&p.measurement);
    }
    let mut fits = Vec::new();
    for (protocol, ms) in by_protocol {
        let xs: Vec<f64> = ms.iter().map(|m| m.n as f64).collect();
        let ys: Vec<f64> = ms.iter().map(|m| m.timings.total_ms()).collect();
        let linear = linear_fit(&xs, &ys).ok_or_else(|| BenchError::TooFewPoints(protocol.to_string()))?;
        let quadratic = quadratic_fit(&xs, &ys);
        let aic_linear = aic(xs.len(), linear.rss, 2);
        let aic_quadratic = quadratic.map(|q| aic(xs.len(), q.rss, 3));
        fits.push(FitSummary {
            protocol: protocol.to_string(),
            points: xs.len(),
            linear,
            quadratic,
            aic_linear,
            aic_quadratic,
            quadratic_preferred: aic_quadratic.map(|q| q < aic_linear),
            low_confidence: xs.len() <= 2,
        });
    }
    let mut paillier_model: Vec<PaillierModelRow> = points
        .iter()
        .map(|p| PaillierModelRow {
            n: p.measurement.n,
            d: p.measurement.d,
            modexp_count: (p.measurement.n * p.measurement.d) as u64,
        })
        .collect();
    paillier_model.sort_by_key(|r| (r.n, r.d));
    paillier_model.dedup();
    Ok((
        write_csv(&csv_rows(points)),
        ReportSummary {
            fits,
            paillier_model,
            paillier_model_note: "analytic, non-empirical: N·d modular exponentiations; no homomorphic scheme is implemented"
                .into(),
        },
    ))
}

fn default_reps() -> usize {
    MIN_REPS
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub schema_version: u32,
    pub ns: Vec<usize>,
    pub shard_size: usize,
    pub dim: usize,
    #[serde(default = "default_reps")]
    pub reps: usize,
    pub rng_seed: u64,
    /// Also measure the full mesh (`m = N`) at every `N`.
    #[serde(default = "default_true")]
    pub full_mesh: bool,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |field, message: &str| BenchError::InvalidConfig {
            field,
            message: message.into(),
        };
        if self.schema_version != SCHEMA_VERSION {
            return Err(bad("schema_version", "unsupported version"));
        }
        if self.ns.is_empty() {
            return Err(bad("ns", "need at least one size"));
        }
        if self.ns.iter().any(|&n| !(2..=MAX_PARTICIPANTS).contains(&n)) {
            return Err(bad("ns", "sizes must lie in 2..=500"));
        }
        if self.shard_size < 2 {
            return Err(bad("shard_size", "need at least 2"));
        }
        if !(1..=MAX_DIM).contains(&self.dim) {
            return Err(bad("dim", "must lie in 1..=10000"));
        }
        if self.reps < MIN_REPS {
            return Err(bad("reps", "need at least 5"));
        }
        Ok(())
    }
}

pub fn run_benchmark(cfg: &BenchConfig) -> Result<Vec<ScalingPoint>, BenchError> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &n in &cfg.ns {
        out.push(ScalingPoint {
            protocol: "sharded".into(),
            measurement: measure_round(n, cfg.shard_size, cfg.dim, cfg.rng_seed, cfg.reps)?,
        });
    }
    if cfg.full_mesh {
        for &n in &cfg.ns {
            out.push(ScalingPoint {
                protocol: "full_mesh".into(),
                measurement: measure_round(n, n, cfg.dim, cfg.rng_seed, cfg.reps)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_count_examples() {
        assert_eq!(count_key_exchanges(100, 20).unwrap(), 950);
        assert_eq!(count_key_exchanges(100, 100).unwrap(), 4950);
        assert_eq!(count_key_exchanges(40, 20).unwrap(), 380);
        assert_eq!(count_key_exchanges(30, 2).unwrap(), 15);
        for n in [20, 40, 100, 200] {
            for m in [2, 4, 5, 10, 20] {
                assert_eq!(count_key_exchanges(n, m).unwrap(), n * (m - 1) / 2);
            }
        }
    }

    #[test]
    fn fits_recover_exact_curves() {
        let xs = [20.0, 40.0, 80.0, 160.0];
        let lin: Vec<f64> = xs.iter().map(|x| 3.0 * x + 7.0).collect();
        let f = linear_fit(&xs, &lin).unwrap();
        assert!((f.slope - 3.0).abs() < 1e-9 && (f.intercept - 7.0).abs() < 1e-9);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        let quad: Vec<f64> = xs.iter().map(|x| 0.5 * x * x - 2.0 * x + 1.0).collect();
        let q = quadratic_fit(&xs, &quad).unwrap();
        assert!((q.a - 0.5).abs() < 1e-9 && (q.b + 2.0).abs() < 1e-7 && (q.c - 1.0).abs() < 1e-5, "{q:?}");
        let l = linear_fit(&xs, &quad).unwrap();
        assert!(aic(4, q.rss, 3) < aic(4, l.rss, 2));
        assert!(linear_fit(&[1.0], &[1.0]).is_none());
        assert!(quadratic_fit(&[1.0, 2.0], &[1.0, 2.0]).is_none());
    }

    fn point(protocol: &str, n: usize, total: f64) -> ScalingPoint {
        ScalingPoint {
            protocol: protocol.into(),
            measurement: RoundMeasurement {
                n,
                m: 20,
                d: 31,
                edges: n * 19 / 2,
                reps: 5,
                timings: PhaseTimings {
                    keying_ms: total,
                    ..PhaseTimings::default()
                },
                counters: PhaseCounters::default(),
            },
        }
    }

    #[test]
    fn report_edge_cases() {
        assert_eq!(emit_report(&[]).unwrap_err(), BenchError::Empty);
        assert!(matches!(emit_report(&[point("sharded", 20, 1.0)]), Err(BenchError::TooFewPoints(_))));
        let (csv, summary) = emit_report(&[point("sharded", 20, 1.0), point("sharded", 40, 3.0)]).unwrap();
        let f = &summary.fits[0];
        assert!(f.low_confidence);
        assert!((f.linear.slope - 0.1).abs() < 1e-12);
        assert!(f.quadratic.is_none());
        let rows = parse_csv(&csv).unwrap();
        assert_eq!(rows, csv_rows(&[point("sharded", 20, 1.0), point("sharded", 40, 3.0)]));
        assert!(csv.starts_with("protocol,N,m,d,phase,median_ms,ops_prf,ops_field,edges\n"));
        assert_eq!(summary.paillier_model[1].modexp_count, 40 * 31);
    }

    #[test]
    fn counters_are_deterministic_and_match_ratio() {
        let a = measure_round(40, 10, 8, 1, 5).unwrap();
        let b = measure_round(40, 10, 8, 1, 5).unwrap();
        assert_eq!(a.counters, b.counters);
        assert_eq!(a.edges, 180);
        assert_eq!(a.counters.masking.prf_calls, 40 * 9);
        assert_eq!(a.counters.keying.key_agreements, 40 * 9);
        let full = measure_round(40, 40, 8, 1, 5).unwrap();
        assert_eq!(full.counters.masking.prf_calls * 9, a.counters.masking.prf_calls * 39);
    }

    #[test]
    fn measure_round_rejects_bad_sizes() {
        assert!(measure_round(1, 2, 4, 0, 5).is_err());
        assert!(measure_round(10, 2, 4, 0, 4).is_err());
        assert!(measure_round(10, 2, 0, 0, 5).is_err());
    }
}
