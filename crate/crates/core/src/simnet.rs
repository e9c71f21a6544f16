//! Deterministic discrete-event harness.
//!
//! Every protocol phase occupies one tick of a simulated clock; a phase with
//! silent participants closes only after `timeout_ticks`. Dropouts and
//! adversaries are declared in the config and interpreted here, so a
//! `SimConfig` fully determines the transcript.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientError, ClientState, Submission};
use crate::crypto::{sha256, CryptoError};
use crate::fieldvec::{encode_signed, FieldElement, FieldError, FieldVector, SignedQuantized, MODULUS};
use crate::fltrain::{
    self, evaluate, log_loss_weighted, logistic_gradient_weighted, FederatedSplit, Metrics, ModelParams,
    PosWeight, TrainConfig, TrainError,
};
use crate::quantizer::{quantize_vector, QuantConfig, QuantError};
use crate::rng::{substream, substream_seed};
use crate::server::{open_round, FinalizedRound, RecoveryRule, RoundState, ServerError, ServerPolicy, Verdict};
use crate::sharding::{assign_shards, shard_neighbors, ShardError, ShardingMode};
use crate::{pair_sign, OpCounters, ParticipantId};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("collusion probe target {0} is part of the coalition")]
    TargetInCoalition(ParticipantId),
    #[error("coalition member {0} is not in the target's shard")]
    CoalitionOutsideShard(ParticipantId),
    #[error("round {round}: {source}")]
    Unrecoverable { round: u64, source: ServerError },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

fn invalid(field: &'static str, message: impl Into<String>) -> SimError {
    SimError::InvalidConfig {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropPhase {
    /// Never commits.
    Commit,
    /// Commits, then never submits; the orphaned-mask case.
    #[default]
    Submit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSchedule {
    /// Fraction of honest participants dropping each round.
    #[serde(default)]
    pub rate: f64,
    #[serde(default)]
    pub phase: DropPhase,
    /// Extra dropouts per round index.
    #[serde(default)]
    pub explicit: BTreeMap<u64, Vec<u32>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdversaryKind {
    #[default]
    None,
    /// Commits honestly, then submits `x + δ` with a tag computed on `x + δ`.
    PostCommitPoisoner,
    /// Submits the committed `x` with a tag computed on `x + δ`.
    TagForger,
    /// Shard neighbours pooling their pair seeds against a target.
    ColludingCoalition,
    /// Server asking survivors for seeds shared with other survivors.
    CuriousServer,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySpec {
    #[serde(default)]
    pub kind: AdversaryKind,
    #[serde(default)]
    pub members: Vec<u32>,
    /// Poison size in gradient units, added to every coordinate. Absent
    /// means a uniformly random nonzero field vector.
    #[serde(default)]
    pub magnitude: Option<f64>,
    /// Collusion target.
    #[serde(default)]
    pub target: Option<u32>,
    /// Rounds in which the adversary acts; absent means every round.
    #[serde(default)]
    pub rounds: Option<Vec<u64>>,
}

impl AdversarySpec {
    pub fn active_in(&self, round: u64) -> bool {
        self.kind != AdversaryKind::None && self.rounds.as_ref().is_none_or(|r| r.contains(&round))
    }

    fn members(&self) -> BTreeSet<ParticipantId> {
        self.members.iter().map(|&m| ParticipantId(m)).collect()
    }
}

fn default_timeout() -> u64 {
    3
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub schema_version: u32,
    pub n_participants: usize,
    pub shard_size: usize,
    pub rounds: u64,
    pub dim: usize,
    pub rng_seed: u64,
    #[serde(default)]
    pub dropout: DropoutSchedule,
    #[serde(default)]
    pub adversary: AdversarySpec,
    #[serde(default = "default_timeout")]
    pub timeout_ticks: u64,
    #[serde(default)]
    pub quant: QuantConfig,
    /// Commitment, tag and range checks on the server.
    #[serde(default = "default_true")]
    pub protection: bool,
    #[serde(default)]
    pub recovery_rule: RecoveryRule,
    #[serde(default)]
    pub sharding_mode: ShardingMode,
}

impl SimConfig {
    pub fn new(n_participants: usize, shard_size: usize, rounds: u64, dim: usize, rng_seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            n_participants,
            shard_size,
            rounds,
            dim,
            rng_seed,
            dropout: DropoutSchedule::default(),
            adversary: AdversarySpec::default(),
            timeout_ticks: default_timeout(),
            quant: QuantConfig::default(),
            protection: true,
            recovery_rule: RecoveryRule::Subtract,
            sharding_mode: ShardingMode::Balanced,
        }
    }

    /// Semantic checks beyond what the schema enforces. Dropout rates above
    /// one half are accepted here and fault at run time.
    pub fn validate(&self) -> Result<(), SimError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        if self.n_participants < 2 {
            return Err(invalid("n_participants", "need at least 2"));
        }
        if self.shard_size < 2 {
            return Err(invalid("shard_size", "need at least 2"));
        }
        if self.rounds == 0 {
            return Err(invalid("rounds", "need at least 1"));
        }
        if self.dim == 0 {
            return Err(invalid("dim", "need at least 1"));
        }
        if self.timeout_ticks == 0 {
            return Err(invalid("timeout_ticks", "need at least 1"));
        }
        if !(0.0..=1.0).contains(&self.dropout.rate) {
            return Err(invalid("dropout.rate", "must lie in [0, 1]"));
        }
        let n = self.n_participants as u32;
        for ids in self.dropout.explicit.values() {
            if let Some(bad) = ids.iter().find(|&&u| u >= n) {
                return Err(invalid("dropout.explicit", format!("participant {bad} does not exist")));
            }
        }
        let adv = &self.adversary;
        if let Some(bad) = adv.members.iter().find(|&&u| u >= n) {
            return Err(invalid("adversary.members", format!("participant {bad} does not exist")));
        }
        if let Some(t) = adv.target.filter(|&t| t >= n) {
            return Err(invalid("adversary.target", format!("participant {t} does not exist")));
        }
        if let Some(m) = adv.magnitude {
            if !(m.is_finite() && m > 0.0) {
                return Err(invalid("adversary.magnitude", "must be positive and finite"));
            }
        }
        match adv.kind {
            AdversaryKind::PostCommitPoisoner | AdversaryKind::TagForger if adv.members.is_empty() => {
                return Err(invalid("adversary.members", "poisoner needs at least one member"));
            }
            AdversaryKind::ColludingCoalition => {
                if adv.members.len() >= self.shard_size {
                    return Err(invalid("adversary.members", "coalition must be smaller than the shard size"));
                }
                if adv.target.is_some_and(|t| adv.members.contains(&t)) {
                    return Err(invalid("adversary.target", "target cannot be a coalition member"));
                }
            }
            _ => {}
        }
        if self.quant.check_overflow(self.n_participants as u64).accepted {
            Ok(())
        } else {
            Err(invalid("quant", "n·B exceeds the field's signed range"))
        }
    }

    fn policy(&self) -> ServerPolicy {
        ServerPolicy {
            verify: self.protection,
            recovery_rule: self.recovery_rule,
            max_dropout_fraction: 0.5,
            sharding_mode: self.sharding_mode,
        }
    }

    fn ids(&self) -> Vec<ParticipantId> {
        (0..self.n_participants as u32).map(ParticipantId).collect()
    }

    pub fn round_nonce(&self, round: u64) -> [u8; 32] {
        substream_seed(self.rng_seed, "round-nonce", round)
    }

    fn key_seed(&self, round: u64, u: ParticipantId) -> [u8; 32] {
        substream_seed(self.rng_seed, "client-key", (round << 32) | u.0 as u64)
    }

    /// `(commit-phase drops, submit-phase drops)` for `round`. Adversary
    /// members never drop at random.
    pub fn dropouts(&self, round: u64) -> (BTreeSet<ParticipantId>, BTreeSet<ParticipantId>) {
        let adversaries = self.adversary.members();
        let mut honest: Vec<ParticipantId> = self.ids().into_iter().filter(|u| !adversaries.contains(u)).collect();
        let k = ((self.dropout.rate * self.n_participants as f64).round() as usize).min(honest.len());
        let mut rng = substream(self.rng_seed, "dropout", round);
        let (chosen, _) = honest.partial_shuffle(&mut rng, k);
        let mut set: BTreeSet<ParticipantId> = chosen.iter().copied().collect();
        if let Some(extra) = self.dropout.explicit.get(&round) {
            set.extend(extra.iter().map(|&u| ParticipantId(u)));
        }
        match self.dropout.phase {
            DropPhase::Commit => (set, BTreeSet::new()),
            DropPhase::Submit => (BTreeSet::new(), set),
        }
    }
}

/// Uniform quantized inputs in `[−B, B]` for runs without a training task.
pub fn random_inputs(cfg: &SimConfig, round: u64) -> BTreeMap<ParticipantId, SignedQuantized> {
    let mut rng = substream(cfg.rng_seed, "inputs", round);
    let b = cfg.quant.bound() as i64;
    cfg.ids()
        .into_iter()
        .map(|u| {
            let v = (0..cfg.dim).map(|_| rng.gen_range(-b..=b)).collect();
            (u, SignedQuantized::new(v, cfg.quant.bound()).expect("within bound"))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Announce,
    KeyExchange,
    Commit,
    Reveal,
    Submit,
    Presence,
    Recover,
    Finalize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub tick: u64,
    pub phase: Phase,
    pub sender: String,
    pub receiver: String,
    pub kind: String,
    /// Hex SHA-256 of the payload bytes.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryLogEntry {
    pub survivor: ParticipantId,
    pub requested: Vec<ParticipantId>,
    pub disclosed: usize,
    pub refused: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTranscript {
    pub round: u64,
    pub shards: Vec<Vec<ParticipantId>>,
    pub events: Vec<Event>,
    pub verdicts: BTreeMap<ParticipantId, Verdict>,
    pub dropouts: Vec<ParticipantId>,
    pub recovery_log: Vec<RecoveryLogEntry>,
    pub seed_violations: usize,
    pub aggregate_digest: Option<String>,
    pub fault: Option<String>,
}

/// Payload bytes that reached the server, kept out of the serialized
/// transcript.
#[derive(Debug, Clone, Default)]
pub struct ServerView {
    pub payloads: Vec<(String, Vec<u8>)>,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub transcript: RoundTranscript,
    pub result: Result<FinalizedRound, ServerError>,
    pub counters: OpCounters,
    pub server_view: ServerView,
    /// Pair seeds shared by two accepted participants.
    pub survivor_seeds: Vec<[u8; 32]>,
    pub inputs: BTreeMap<ParticipantId, SignedQuantized>,
}

impl RoundOutcome {
    /// Sum of the honest inputs of the participants the server accepted.
    pub fn expected_sum(&self) -> Vec<i64> {
        let dim = self.inputs.values().next().map_or(0, |v| v.dim());
        let mut s = vec![0i64; dim];
        for (u, v) in &self.transcript.verdicts {
            if *v == Verdict::Accepted {
                for (a, b) in s.iter_mut().zip(self.inputs[u].elems()) {
                    *a += b;
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakScan {
    pub payloads_scanned: usize,
    pub bytes_scanned: usize,
    pub seed_leaks: usize,
    pub plaintext_leaks: usize,
}

impl std::ops::AddAssign for LeakScan {
    fn add_assign(&mut self, o: Self) {
        self.payloads_scanned += o.payloads_scanned;
        self.bytes_scanned += o.bytes_scanned;
        self.seed_leaks += o.seed_leaks;
        self.plaintext_leaks += o.plaintext_leaks;
    }
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Substring scan of everything the server received for survivor–survivor
/// seeds and unmasked encoded inputs.
pub fn leak_scan(outcome: &RoundOutcome) -> LeakScan {
    let plaintexts: Vec<Vec<u8>> = outcome
        .inputs
        .values()
        .filter_map(|v| encode_signed(v).ok())
        .map(|x| x.to_bytes()[4..].to_vec())
        .collect();
    let mut scan = LeakScan::default();
    for (_, bytes) in &outcome.server_view.payloads {
        scan.payloads_scanned += 1;
        scan.bytes_scanned += bytes.len();
        scan.seed_leaks += outcome.survivor_seeds.iter().filter(|s| contains(bytes, &s[..])).count();
        scan.plaintext_leaks += plaintexts.iter().filter(|p| contains(bytes, p)).count();
    }
    scan
}

struct Recorder {
    tick: u64,
    events: Vec<Event>,
    view: ServerView,
}

impl Recorder {
    fn emit(&mut self, phase: Phase, sender: impl ToString, receiver: impl ToString, kind: &str, payload: &[u8]) {
        let receiver = receiver.to_string();
        if receiver == "server" {
            self.view.payloads.push((kind.to_string(), payload.to_vec()));
        }
        self.events.push(Event {
            tick: self.tick,
            phase,
            sender: sender.to_string(),
            receiver,
            kind: kind.to_string(),
            digest: hex::encode(sha256(payload)),
        });
    }
}

fn ids_bytes<'a>(ids: impl IntoIterator<Item = &'a ParticipantId>) -> Vec<u8> {
    ids.into_iter().flat_map(|u| u.0.to_le_bytes()).collect()
}

/// Poison vector: `round(magnitude·S)` in every coordinate, or random
/// nonzero field elements.
fn poison(cfg: &SimConfig, round: u64, member: ParticipantId) -> FieldVector {
    let mut rng = substream(cfg.rng_seed, "adversary", (round << 32) | member.0 as u64);
    let elems: Vec<FieldElement> = match cfg.adversary.magnitude {
        Some(m) => {
            let q = (m * cfg.quant.scale() as f64).round().min((MODULUS - 1) as f64).max(1.0) as u64;
            vec![FieldElement::new(q); cfg.dim]
        }
        None => loop {
            let v: Vec<FieldElement> = (0..cfg.dim).map(|_| FieldElement::new(rng.gen_range(0..MODULUS))).collect();
            if v.iter().any(|e| e.value() != 0) {
                break v;
            }
        },
    };
    FieldVector::new(elems).expect("nonempty")
}

/// Executes one full protocol round over `inputs`.
pub fn run_round(
    cfg: &SimConfig,
    round: u64,
    inputs: &BTreeMap<ParticipantId, SignedQuantized>,
) -> Result<RoundOutcome, SimError> {
    cfg.validate()?;
    let ids = cfg.ids();
    for u in &ids {
        let v = inputs.get(u).ok_or_else(|| invalid("inputs", format!("no input for {u}")))?;
        if v.dim() != cfg.dim {
            return Err(invalid("inputs", format!("input of {u} has dimension {}", v.dim())));
        }
    }
    let mut rng = substream(cfg.rng_seed, "server", round);
    let mut server: RoundState = open_round(
        &ids,
        round,
        &cfg.round_nonce(round),
        cfg.shard_size,
        cfg.dim,
        cfg.quant,
        cfg.policy(),
        &mut rng,
    )?;
    let assignment = server.assignment().clone();
    let adv = &cfg.adversary;
    let adv_active = adv.active_in(round);
    let adv_members = adv.members();
    let (commit_drop, submit_drop) = cfg.dropouts(round);

    let mut rec = Recorder {
        tick: 0,
        events: Vec::new(),
        view: ServerView::default(),
    };
    let announcement = serde_json::to_vec(&server.announcement()).expect("serializable");
    rec.emit(Phase::Announce, "server", "all", "announce", &announcement);

    // key exchange, relayed by the server
    rec.tick += 1;
    let mut clients = BTreeMap::new();
    for &u in &ids {
        let c = ClientState::new(u, round, &cfg.key_seed(round, u))?;
        rec.emit(Phase::KeyExchange, u, "server", "public_key", c.public_key());
        clients.insert(u, c);
    }
    rec.tick += 1;
    let publics: BTreeMap<ParticipantId, Vec<u8>> = clients.iter().map(|(u, c)| (*u, c.public_key().to_vec())).collect();
    for (&u, c) in clients.iter_mut() {
        let keys: BTreeMap<_, _> = shard_neighbors(&assignment, u)?
            .into_iter()
            .map(|v| (v, publics[&v].clone()))
            .collect();
        let bundle: Vec<u8> = keys.iter().flat_map(|(v, k)| v.0.to_le_bytes().into_iter().chain(k.iter().copied())).collect();
        rec.emit(Phase::KeyExchange, "server", u, "neighbor_keys", &bundle);
        c.establish_pair_secrets(&assignment, &keys)?;
    }

    // commit
    rec.tick += 1;
    for (&u, c) in clients.iter_mut() {
        if commit_drop.contains(&u) {
            continue;
        }
        let x = c.build_masked_update(&inputs[&u], &assignment)?;
        let com = c.commit_update(&x)?;
        rec.emit(Phase::Commit, u, "server", "commitment", &com.c.digest);
        server.record_commitment(com)?;
    }
    if !commit_drop.is_empty() {
        rec.tick += cfg.timeout_ticks;
    }
    server.close_commitments()?;
    rec.emit(Phase::Commit, "server", "all", "commit_window_closed", &ids_bytes(server.dropouts()));

    // reveal
    rec.tick += 1;
    let (reveal, _) = server.reveal_challenge()?;
    rec.emit(Phase::Reveal, "server", "all", "reveal", &[reveal.rho.as_slice(), &reveal.nonce].concat());

    // submit
    rec.tick += 1;
    for (&u, c) in clients.iter_mut() {
        if commit_drop.contains(&u) || submit_drop.contains(&u) {
            continue;
        }
        let alpha = c.accept_challenge(&reveal.rho, &reveal.nonce, server.rho_commitment(), cfg.dim)?;
        let mut sub: Submission = c.submit(&alpha)?;
        if adv_active && adv_members.contains(&u) {
            let delta = poison(cfg, round, u);
            match adv.kind {
                AdversaryKind::PostCommitPoisoner => {
                    sub.update.x.add_assign(&delta)?;
                    sub.tag = crate::client::integrity_tag(&sub.update, &alpha)?;
                }
                AdversaryKind::TagForger => {
                    let mut forged = sub.update.clone();
                    forged.x.add_assign(&delta)?;
                    sub.tag = crate::client::integrity_tag(&forged, &alpha)?;
                }
                _ => {}
            }
        }
        rec.emit(Phase::Submit, u, "server", "submission", &sub.to_bytes());
        server.receive_submission(sub)?;
    }
    if !submit_drop.is_empty() {
        rec.tick += cfg.timeout_ticks;
    }
    server.close_submissions()?;

    // presence flags double as the verdict broadcast
    rec.tick += 1;
    let accepted = server.accepted();
    rec.emit(Phase::Presence, "server", "all", "presence", &ids_bytes(&accepted));
    for c in clients.values_mut() {
        c.observe_heartbeats(accepted.iter().copied());
    }

    let mut recovery_log = Vec::new();
    let mut survivor_seeds = Vec::new();
    for (&u, c) in &clients {
        if accepted.contains(&u) {
            for (v, s) in c.pair_secrets() {
                if u < *v && accepted.contains(v) {
                    survivor_seeds.push(*s.seed());
                }
            }
        }
    }

    let result = (|| -> Result<FinalizedRound, ServerError> {
        let raw = server.aggregate_updates()?;
        let curious = adv_active && adv.kind == AdversaryKind::CuriousServer;
        let agg = if server.needs_recovery() || curious {
            rec.tick += 1;
            let mut responses = BTreeMap::new();
            for (p, ds) in server.recovery_requests() {
                rec.emit(Phase::Recover, "server", p, "recovery_request", &ids_bytes(&ds));
                let entry = match clients[&p].respond_recovery(&ds) {
                    Ok(resp) => {
                        rec.emit(Phase::Recover, p, "server", "recovery_response", &resp.to_bytes());
                        let n = resp.seeds.len();
                        responses.insert(p, resp);
                        RecoveryLogEntry {
                            survivor: p,
                            requested: ds.iter().copied().collect(),
                            disclosed: n,
                            refused: None,
                        }
                    }
                    Err(e) => {
                        rec.emit(Phase::Recover, p, "server", "recovery_refused", &ids_bytes(&ds));
                        RecoveryLogEntry {
                            survivor: p,
                            requested: ds.iter().copied().collect(),
                            disclosed: 0,
                            refused: Some(e.to_string()),
                        }
                    }
                };
                recovery_log.push(entry);
            }
            if curious {
                // probe: ask each survivor for the seed of one live neighbour
                for &p in &accepted {
                    let Some(&q) = clients[&p].neighbors().iter().find(|v| accepted.contains(v)) else {
                        continue;
                    };
                    let ask: BTreeSet<ParticipantId> = [q].into();
                    rec.emit(Phase::Recover, "server", p, "recovery_request", &ids_bytes(&ask));
                    let entry = match clients[&p].respond_recovery(&ask) {
                        Ok(resp) => {
                            rec.emit(Phase::Recover, p, "server", "recovery_response", &resp.to_bytes());
                            RecoveryLogEntry {
                                survivor: p,
                                requested: vec![q],
                                disclosed: resp.seeds.len(),
                                refused: None,
                            }
                        }
                        Err(e) => {
                            rec.emit(Phase::Recover, p, "server", "recovery_refused", &ids_bytes(&ask));
                            RecoveryLogEntry {
                                survivor: p,
                                requested: vec![q],
                                disclosed: 0,
                                refused: Some(e.to_string()),
                            }
                        }
                    };
                    recovery_log.push(entry);
                }
            }
            if server.needs_recovery() {
                server.recover_dropouts(&responses)?
            } else {
                raw
            }
        } else {
            raw
        };
        rec.tick += 1;
        let fin = server.finalize(&agg)?;
        rec.emit(Phase::Finalize, "server", "all", "aggregate", &agg.x_sum.to_bytes());
        Ok(fin)
    })();

    let mut counters = server.counters();
    for c in clients.values_mut() {
        counters += c.counters();
        c.finish();
    }
    let aggregate_digest = result.as_ref().ok().map(|fin| {
        let bytes: Vec<u8> = fin.sum.elems().iter().flat_map(|v| v.to_le_bytes()).collect();
        hex::encode(sha256(&bytes))
    });
    let transcript = RoundTranscript {
        round,
        shards: assignment.shards.clone(),
        events: rec.events,
        verdicts: server.verdicts().clone(),
        dropouts: server.dropouts().iter().copied().collect(),
        recovery_log,
        seed_violations: server.violations().len(),
        aggregate_digest,
        fault: result.as_ref().err().map(|e| e.to_string()),
    };
    Ok(RoundOutcome {
        transcript,
        result,
        counters,
        server_view: rec.view,
        survivor_seeds,
        inputs: inputs.clone(),
    })
}

/// Runs `cfg.rounds` rounds on random inputs.
pub fn run_simulation(cfg: &SimConfig) -> Result<Vec<RoundOutcome>, SimError> {
    cfg.validate()?;
    let mut out = Vec::new();
    for round in 0..cfg.rounds {
        let o = run_round(cfg, round, &random_inputs(cfg, round))?;
        let failed = o.result.is_err();
        out.push(o);
        if failed {
            break;
        }
    }
    Ok(out)
}

fn default_skew() -> f64 {
    1.0
}

fn default_lr() -> f64 {
    fltrain::DEFAULT_LEARNING_RATE
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_archetypes() -> usize {
    2
}

fn default_fraud_rate() -> f64 {
    fltrain::DEFAULT_FRAUD_RATE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        rows: usize,
        #[serde(default = "default_fraud_rate")]
        fraud_rate: f64,
        #[serde(default = "default_archetypes")]
        archetypes: usize,
    },
    Csv {
        path: PathBuf,
    },
}

/// Federated training run: one protocol participant per bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub sim: SimConfig,
    pub data: DataSource,
    #[serde(default = "default_skew")]
    pub skew: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Fraud-class loss weight; absent means balanced.
    #[serde(default)]
    pub pos_weight: Option<f64>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_true")]
    pub local_baseline: bool,
}

impl ExperimentConfig {
    /// The fixed-seed synthetic non-IID benchmark: 10 banks, skew 1,
    /// 30 rounds, two fraud archetypes.
    pub fn synthetic_benchmark() -> Self {
        let mut sim = SimConfig::new(10, 5, fltrain::DEFAULT_ROUNDS, fltrain::SYNTH_FEATURES + 1, 20_240_917);
        sim.quant = QuantConfig::default();
        Self {
            schema_version: SCHEMA_VERSION,
            sim,
            data: DataSource::Synthetic {
                rows: 50_000,
                fraud_rate: 0.01,
                archetypes: 2,
            },
            skew: 1.0,
            learning_rate: fltrain::DEFAULT_LEARNING_RATE,
            pos_weight: None,
            test_fraction: 0.2,
            local_baseline: true,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            rounds: self.sim.rounds,
            pos_weight: self.pos_weight.map_or(PosWeight::Balanced, PosWeight::Fixed),
            threshold: fltrain::DEFAULT_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        self.sim.validate()?;
        if !(0.0..=1.0).contains(&self.skew) {
            return Err(invalid("skew", "must lie in [0, 1]"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning_rate", "must be positive"));
        }
        if let Some(w) = self.pos_weight.filter(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(invalid("pos_weight", format!("must be positive, found {w}")));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(invalid("test_fraction", "must lie in (0, 1)"));
        }
        if let DataSource::Synthetic { .. } = self.data {
            if self.sim.dim != fltrain::SYNTH_FEATURES + 1 {
                return Err(invalid(
                    "sim.dim",
                    format!("synthetic data needs dim {}", fltrain::SYNTH_FEATURES + 1),
                ));
            }
        }
        Ok(())
    }

    /// Loads or generates the dataset and splits it across banks.
    pub fn prepare(&self) -> Result<FederatedSplit, SimError> {
        self.validate()?;
        let seed = self.sim.rng_seed;
        let ds = match &self.data {
            DataSource::Synthetic {
                rows,
                fraud_rate,
                archetypes,
            } => fltrain::generate_synthetic(*rows, *fraud_rate, *archetypes, seed)?,
            DataSource::Csv { path } => fltrain::load_csv(path)?,
        };
        if ds.n_features() + 1 != self.sim.dim {
            return Err(invalid(
                "sim.dim",
                format!("dataset has {} features, so dim must be {}", ds.n_features(), ds.n_features() + 1),
            ));
        }
        Ok(fltrain::prepare_federated(&ds, self.sim.n_participants, self.skew, self.test_fraction, seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub loss: f64,
    pub recall: f64,
    pub precision: f64,
    pub auprc: f64,
    pub contributors: usize,
    pub rejected: Vec<ParticipantId>,
    pub dropped: Vec<ParticipantId>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rounds: Vec<RoundMetrics>,
    pub final_params: ModelParams,
    pub transcripts: Vec<RoundTranscript>,
}

impl ExperimentResult {
    pub fn final_metrics(&self) -> Option<&RoundMetrics> {
        self.rounds.last()
    }
}

/// `rounds` iterations of local gradient → quantize → protocol → global
/// step. A round whose poisoner is detected and excluded still updates the
/// model from the remaining banks; unrecoverable faults abort.
pub fn run_experiment(cfg: &SimConfig, data: &FederatedSplit, train: &TrainConfig) -> Result<ExperimentResult, SimError> {
    cfg.validate()?;
    if data.banks.len() != cfg.n_participants {
        return Err(invalid("n_participants", format!("{} banks but {} participants", data.banks.len(), cfg.n_participants)));
    }
    let n_features = data.train.n_features();
    if n_features + 1 != cfg.dim {
        return Err(invalid("dim", format!("model dimension is {}", n_features + 1)));
    }
    let pw = train.pos_weight.resolve(&data.train);
    let mut params = ModelParams::zeros(n_features);
    let mut rounds = Vec::new();
    let mut transcripts = Vec::new();
    for round in 0..cfg.rounds {
        let mut inputs = BTreeMap::new();
        for (b, bank) in data.banks.iter().enumerate() {
            let g = if bank.is_empty() {
                vec![0.0; cfg.dim]
            } else {
                logistic_gradient_weighted(&params, bank, pw)?
            };
            let mut rng = substream(cfg.rng_seed, "quantize", (round << 32) | b as u64);
            inputs.insert(ParticipantId(b as u32), quantize_vector(&g, &cfg.quant, &mut rng)?);
        }
        let outcome = run_round(cfg, round, &inputs)?;
        let fin = outcome.result.clone().map_err(|source| SimError::Unrecoverable { round, source })?;
        params.step(&fin.mean, train.learning_rate)?;
        let m: Metrics = evaluate(&params, &data.test, train.threshold)?;
        let t = &outcome.transcript;
        rounds.push(RoundMetrics {
            round,
            loss: log_loss_weighted(&params, &data.train, pw)?,
            recall: m.recall,
            precision: m.precision,
            auprc: m.auprc,
            contributors: fin.contributors.len(),
            rejected: t
                .verdicts
                .iter()
                .filter(|(_, v)| matches!(v, Verdict::TagMismatch | Verdict::CommitMismatch))
                .map(|(u, _)| *u)
                .collect(),
            dropped: t.dropouts.clone(),
        });
        transcripts.push(outcome.transcript);
    }
    Ok(ExperimentResult {
        rounds,
        final_params: params,
        transcripts,
    })
}

/// What a coalition learns about the target's input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollusionReport {
    pub round: u64,
    pub target: ParticipantId,
    pub coalition: Vec<ParticipantId>,
    pub shard_size: usize,
    pub reconstructed: bool,
    pub differing_coordinates: usize,
}

/// Strips every mask the coalition can compute from the target's masked
/// update and compares the residual with the target's encoded input.
pub fn collusion_probe(
    cfg: &SimConfig,
    round: u64,
    target: ParticipantId,
    coalition: &BTreeSet<ParticipantId>,
) -> Result<CollusionReport, SimError> {
    Ok(collusion_probe_many(cfg, round, target, std::slice::from_ref(coalition))?.remove(0))
}

/// [`collusion_probe`] for several coalitions against one round.
pub fn collusion_probe_many(
    cfg: &SimConfig,
    round: u64,
    target: ParticipantId,
    coalitions: &[BTreeSet<ParticipantId>],
) -> Result<Vec<CollusionReport>, SimError> {
    cfg.validate()?;
    let assignment = assign_shards(&cfg.ids(), round, &cfg.round_nonce(round), cfg.shard_size)?;
    let shard = assignment.shard_of(target).ok_or_else(|| invalid("target", format!("{target} does not exist")))?;
    for coalition in coalitions {
        if coalition.contains(&target) {
            return Err(SimError::TargetInCoalition(target));
        }
        if let Some(&c) = coalition.iter().find(|c| !shard.contains(c)) {
            return Err(SimError::CoalitionOutsideShard(c));
        }
    }
    let mut clients: BTreeMap<ParticipantId, ClientState> = BTreeMap::new();
    for &u in shard {
        clients.insert(u, ClientState::new(u, round, &cfg.key_seed(round, u))?);
    }
    let publics: BTreeMap<_, _> = clients.iter().map(|(u, c)| (*u, c.public_key().to_vec())).collect();
    for (&u, c) in clients.iter_mut() {
        let keys = shard.iter().filter(|&&v| v != u).map(|v| (*v, publics[v].clone())).collect();
        c.establish_pair_secrets(&assignment, &keys)?;
    }
    let v = random_inputs(cfg, round).remove(&target).expect("target exists");
    let truth = encode_signed(&v).expect("bounded");
    let x = clients.get_mut(&target).expect("in shard").build_masked_update(&v, &assignment)?;
    let mut out = Vec::new();
    for coalition in coalitions {
        let mut residual = x.x.clone();
        for c in coalition {
            // coalition member c knows s_{target,c} from its own state
            let secret = &clients[c].pair_secrets()[&target];
            let mask = crate::client::pair_mask(secret, round, cfg.dim)?;
            if pair_sign(target, *c) > 0 {
                residual.sub_assign(&mask)?;
            } else {
                residual.add_assign(&mask)?;
            }
        }
        let differing = residual.elems().iter().zip(truth.elems()).filter(|(a, b)| a != b).count();
        out.push(CollusionReport {
            round,
            target,
            coalition: coalition.iter().copied().collect(),
            shard_size: shard.len(),
            reconstructed: differing == 0,
            differing_coordinates: differing,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoalitionSizeStats {
    pub size: usize,
    pub probes: u64,
    pub reconstructions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollusionSummary {
    pub rounds: u64,
    /// Probes of coalitions smaller than `shard − 1` that reconstructed.
    pub sub_threshold_reconstructions: u64,
    /// Full-neighbourhood probes that failed.
    pub full_coalition_failures: u64,
    pub by_size: Vec<CoalitionSizeStats>,
}

/// Over `rounds` rounds, probes every proper subset of a random target's
/// shard neighbours (up to `max_subsets` per size, all of size `shard − 1`).
pub fn collusion_experiment(cfg: &SimConfig, rounds: u64, max_subsets: usize) -> Result<CollusionSummary, SimError> {
    cfg.validate()?;
    let mut stats: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    let mut summary = CollusionSummary {
        rounds,
        sub_threshold_reconstructions: 0,
        full_coalition_failures: 0,
        by_size: Vec::new(),
    };
    for round in 0..rounds {
        let mut rng = substream(cfg.rng_seed, "collusion", round);
        let target = match cfg.adversary.target {
            Some(t) => ParticipantId(t),
            None => ParticipantId(rng.gen_range(0..cfg.n_participants as u32)),
        };
        let assignment = assign_shards(&cfg.ids(), round, &cfg.round_nonce(round), cfg.shard_size)?;
        let neighbors = shard_neighbors(&assignment, target)?;
        let k = neighbors.len();
        let mut coalitions = Vec::new();
        for size in 1..=k {
            let subsets = subsets_of(&neighbors, size, max_subsets, &mut rng);
            coalitions.extend(subsets);
        }
        for r in collusion_probe_many(cfg, round, target, &coalitions)? {
            let e = stats.entry(r.coalition.len()).or_default();
            e.0 += 1;
            e.1 += r.reconstructed as u64;
            if r.coalition.len() == k {
                summary.full_coalition_failures += (!r.reconstructed) as u64;
            } else {
                summary.sub_threshold_reconstructions += r.reconstructed as u64;
            }
        }
    }
    summary.by_size = stats
        .into_iter()
        .map(|(size, (probes, reconstructions))| CoalitionSizeStats {
            size,
            probes,
            reconstructions,
        })
        .collect();
    Ok(summary)
}

fn subsets_of<R: Rng>(items: &[ParticipantId], size: usize, cap: usize, rng: &mut R) -> Vec<BTreeSet<ParticipantId>> {
    let n = items.len();
    if n <= 16 {
        let mut all: Vec<BTreeSet<ParticipantId>> = (0u32..1 << n)
            .filter(|m| m.count_ones() as usize == size)
            .map(|m| (0..n).filter(|i| m >> i & 1 == 1).map(|i| items[i]).collect())
            .collect();
        if all.len() > cap {
            all.shuffle(rng);
            all.truncate(cap);
            all.sort();
        }
        all
    } else {
        (0..cap.max(1))
            .map(|_| items.choose_multiple(rng, size).copied().collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoisonTrials {
    pub kind: AdversaryKind,
    pub trials: u64,
    /// Trials in which every adversary member was rejected.
    pub detections: u64,
    pub commit_mismatches: u64,
    pub tag_mismatches: u64,
    /// Trials whose finalized sum equalled the honest survivors' sum.
    pub exact_aggregates: u64,
}

/// Repeats a poisoning round `trials` times with fresh inputs, keys and
/// perturbations (trial `t` runs as round `t`).
pub fn poison_trials(cfg: &SimConfig, trials: u64) -> Result<(PoisonTrials, LeakScan), SimError> {
    let mut cfg = cfg.clone();
    cfg.adversary.rounds = None;
    if !matches!(cfg.adversary.kind, AdversaryKind::PostCommitPoisoner | AdversaryKind::TagForger) {
        return Err(invalid("adversary.kind", "poison trials need a poisoner"));
    }
    cfg.validate()?;
    let members = cfg.adversary.members();
    let mut out = PoisonTrials {
        kind: cfg.adversary.kind,
        trials,
        detections: 0,
        commit_mismatches: 0,
        tag_mismatches: 0,
        exact_aggregates: 0,
    };
    let mut scan = LeakScan::default();
    for t in 0..trials {
        let o = run_round(&cfg, t, &random_inputs(&cfg, t))?;
        let verdicts: Vec<Verdict> = members.iter().filter_map(|m| o.transcript.verdicts.get(m).copied()).collect();
        out.commit_mismatches += verdicts.iter().filter(|v| **v == Verdict::CommitMismatch).count() as u64;
        out.tag_mismatches += verdicts.iter().filter(|v| **v == Verdict::TagMismatch).count() as u64;
        if verdicts.len() == members.len() && verdicts.iter().all(|v| matches!(v, Verdict::CommitMismatch | Verdict::TagMismatch)) {
            out.detections += 1;
        }
        if let Ok(fin) = &o.result {
            out.exact_aggregates += (fin.sum.elems() == o.expected_sum().as_slice()) as u64;
        }
        scan += leak_scan(&o);
    }
    Ok((out, scan))
}

/// Runs `rounds` curious-server rounds and scans the server's view.
pub fn curious_server_scan(cfg: &SimConfig, rounds: u64) -> Result<(LeakScan, u64), SimError> {
    let mut cfg = cfg.clone();
    cfg.adversary = AdversarySpec {
        kind: AdversaryKind::CuriousServer,
        ..AdversarySpec::default()
    };
    let mut scan = LeakScan::default();
    let mut refused = 0;
    for round in 0..rounds {
        let o = run_round(&cfg, round, &random_inputs(&cfg, round))?;
        refused += o.transcript.recovery_log.iter().filter(|e| e.refused.is_some()).count() as u64;
        scan += leak_scan(&o);
    }
    Ok((scan, refused))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, m: usize) -> SimConfig {
        let mut c = SimConfig::new(n, m, 1, 6, 42);
        c.quant = QuantConfig::new(1 << 10, 1.0).unwrap();
        c
    }

    #[test]
    fn clean_round_matches_oracle() {
        let c = cfg(10, 20);
        let o = run_round(&c, 0, &random_inputs(&c, 0)).unwrap();
        let fin = o.result.as_ref().unwrap();
        assert_eq!(fin.contributors.len(), 10);
        assert_eq!(fin.sum.elems(), o.expected_sum().as_slice());
        assert!(o.transcript.recovery_log.is_empty());
        assert!(o.transcript.events.iter().all(|e| e.phase != Phase::Recover));
    }

    #[test]
    fn submit_dropouts_take_recovery_path() {
        let mut c = cfg(20, 5);
        c.dropout.rate = 0.2;
        let o = run_round(&c, 3, &random_inputs(&c, 3)).unwrap();
        assert_eq!(o.transcript.dropouts.len(), 4);
        assert!(!o.transcript.recovery_log.is_empty());
        let fin = o.result.as_ref().unwrap();
        assert_eq!(fin.contributors.len(), 16);
        assert_eq!(fin.sum.elems(), o.expected_sum().as_slice());
    }

    #[test]
    fn commit_dropouts_recover_too() {
        let mut c = cfg(12, 4);
        c.dropout.rate = 0.25;
        c.dropout.phase = DropPhase::Commit;
        let o = run_round(&c, 1, &random_inputs(&c, 1)).unwrap();
        assert_eq!(o.result.as_ref().unwrap().sum.elems(), o.expected_sum().as_slice());
    }

    #[test]
    fn majority_dropout_faults() {
        let mut c = cfg(10, 5);
        c.dropout.rate = 0.6;
        let o = run_round(&c, 0, &random_inputs(&c, 0)).unwrap();
        assert!(matches!(o.result, Err(ServerError::TooManyDropouts { .. })));
        assert!(o.transcript.fault.is_some());
    }

    #[test]
    fn poisoner_is_rejected_and_round_completes() {
        for kind in [AdversaryKind::PostCommitPoisoner, AdversaryKind::TagForger] {
            let mut c = cfg(10, 5);
            c.adversary = AdversarySpec {
                kind,
                members: vec![2],
                ..AdversarySpec::default()
            };
            let o = run_round(&c, 0, &random_inputs(&c, 0)).unwrap();
            let v = o.transcript.verdicts[&ParticipantId(2)];
            assert_ne!(v, Verdict::Accepted);
            let fin = o.result.as_ref().unwrap();
            assert_eq!(fin.contributors.len(), 9);
            assert_eq!(fin.sum.elems(), o.expected_sum().as_slice());
        }
    }

    #[test]
    fn transcripts_are_deterministic() {
        let mut c = cfg(8, 4);
        c.dropout.rate = 0.25;
        let a = run_round(&c, 2, &random_inputs(&c, 2)).unwrap();
        let b = run_round(&c, 2, &random_inputs(&c, 2)).unwrap();
        assert_eq!(
            serde_json::to_vec(&a.transcript).unwrap(),
            serde_json::to_vec(&b.transcript).unwrap()
        );
        c.rng_seed += 1;
        let d = run_round(&c, 2, &random_inputs(&c, 2)).unwrap();
        assert_ne!(a.transcript, d.transcript);
    }

    #[test]
    fn nobody_acts_on_rho_before_reveal() {
        let mut c = cfg(8, 4);
        c.dropout.rate = 0.25;
        let o = run_round(&c, 0, &random_inputs(&c, 0)).unwrap();
        let reveal = o.transcript.events.iter().find(|e| e.kind == "reveal").unwrap().tick;
        for e in &o.transcript.events {
            if e.kind == "submission" {
                assert!(e.tick > reveal);
            }
            if e.kind == "commitment" {
                assert!(e.tick < reveal);
            }
        }
        let ticks: Vec<u64> = o.transcript.events.iter().map(|e| e.tick).collect();
        assert!(ticks.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn curious_server_learns_nothing() {
        let mut c = cfg(10, 5);
        c.dropout.rate = 0.2;
        let (scan, refused) = curious_server_scan(&c, 5).unwrap();
        assert!(refused > 0);
        assert_eq!(scan.seed_leaks, 0);
        assert_eq!(scan.plaintext_leaks, 0);
        assert!(scan.payloads_scanned > 0);
    }

    #[test]
    fn leak_scan_detects_planted_seed() {
        let c = cfg(6, 6);
        let mut o = run_round(&c, 0, &random_inputs(&c, 0)).unwrap();
        let seed = o.survivor_seeds[0];
        o.server_view.payloads.push(("planted".into(), [b"xx".as_slice(), &seed, b"yy"].concat()));
        let plain = encode_signed(&o.inputs[&ParticipantId(1)]).unwrap().to_bytes();
        o.server_view.payloads.push(("planted".into(), plain));
        let s = leak_scan(&o);
        assert_eq!((s.seed_leaks, s.plaintext_leaks), (1, 1));
    }

    #[test]
    fn collusion_threshold() {
        let c = cfg(20, 5);
        let s = collusion_experiment(&c, 10, usize::MAX).unwrap();
        assert_eq!(s.sub_threshold_reconstructions, 0);
        assert_eq!(s.full_coalition_failures, 0);
        let full = s.by_size.iter().find(|b| b.size == 4).unwrap();
        assert_eq!(full.reconstructions, full.probes);
        assert_eq!(s.by_size.iter().map(|b| b.probes).sum::<u64>(), 10 * 15);
    }

    #[test]
    fn collusion_probe_rejects_bad_coalitions() {
        let c = cfg(20, 5);
        let a = assign_shards(&c.ids(), 0, &c.round_nonce(0), 5).unwrap();
        let t = ParticipantId(0);
        let outsider = c.ids().into_iter().find(|u| !a.shard_of(t).unwrap().contains(u)).unwrap();
        assert_eq!(
            collusion_probe(&c, 0, t, &[t].into()).unwrap_err(),
            SimError::TargetInCoalition(t)
        );
        assert_eq!(
            collusion_probe(&c, 0, t, &[outsider].into()).unwrap_err(),
            SimError::CoalitionOutsideShard(outsider)
        );
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(10, 5);
        assert!(c.validate().is_ok());
        c.adversary = AdversarySpec {
            kind: AdversaryKind::PostCommitPoisoner,
            members: vec![10],
            ..AdversarySpec::default()
        };
        assert!(matches!(c.validate(), Err(SimError::InvalidConfig { field: "adversary.members", .. })));
        c.adversary = AdversarySpec {
            kind: AdversaryKind::ColludingCoalition,
            members: vec![1, 2, 3, 4, 5],
            target: Some(0),
            ..AdversarySpec::default()
        };
        assert!(c.validate().is_err());
        let mut c = cfg(10, 5);
        c.dropout.rate = 1.5;
        assert!(c.validate().is_err());
        let json = r#"{"schema_version":1,"n_participants":4,"shard_size":2,"rounds":1,"dim":3,"rng_seed":1,"bogus":0}"#;
        assert!(serde_json::from_str::<SimConfig>(json).is_err());
        let json = r#"{"schema_version":1,"n_participants":4,"shard_size":2,"rounds":1,"dim":3,"rng_seed":1}"#;
        let parsed: SimConfig = serde_json::from_str(json).unwrap();
        assert!(parsed.protection);
        assert_eq!(parsed.timeout_ticks, 3);
    }

    #[test]
    fn small_experiment_learns() {
        let mut e = ExperimentConfig::synthetic_benchmark();
        e.data = DataSource::Synthetic {
            rows: 8000,
            fraud_rate: 0.02,
            archetypes: 2,
        };
        e.sim.n_participants = 4;
        e.sim.shard_size = 4;
        e.sim.rounds = 15;
        let split = e.prepare().unwrap();
        let r = run_experiment(&e.sim, &split, &e.train_config()).unwrap();
        let losses: Vec<f64> = r.rounds.iter().map(|m| m.loss).collect();
        let first: f64 = losses[..5].iter().sum();
        let last: f64 = losses[10..].iter().sum();
        assert!(last < first, "{losses:?}");
        assert!(r.final_metrics().unwrap().recall > 0.7);
    }
}
