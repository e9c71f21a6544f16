//! Aggregator state machine.
//!
//! Phases advance strictly in order:
//! `Announced → CommitsCollected → ChallengeRevealed → UpdatesCollected →
//! (Recovered) → Finalized`. A participant that never commits or never
//! submits is a dropout; one whose opening or tag fails is excluded. Both are
//! treated identically for mask purposes: every surviving shard neighbour is
//! asked for the pair seed, and the orphaned mask is removed from the raw sum.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{pair_mask, IntegrityTag, MaskedUpdate, RecoveryResponse, Submission, UpdateCommitment};
use crate::crypto::{commit, derive_challenge, verify_commitment, ChallengeVector, Commitment, CryptoError};
use crate::fieldvec::{
    decode_signed, inner_product_mod, modulus_is_prime, FieldElement, FieldError, FieldVector, SignedQuantized,
    MAX_SIGNED_BOUND,
};
use crate::quantizer::{dequantize_sum, QuantConfig, QuantError};
use crate::sharding::{assign_shards_with_mode, ShardAssignment, ShardError, ShardingMode};
use crate::{pair_sign, OpCounters, ParticipantId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RoundPhase {
    Announced,
    CommitsCollected,
    ChallengeRevealed,
    UpdatesCollected,
    Recovered,
    Finalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accepted,
    TagMismatch,
    CommitMismatch,
    Dropped,
}

/// How recovered orphan masks are applied to the raw aggregate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryRule {
    /// `X_safe = X_raw − Σ sgn(p,d)·PRF(s_pd)`: cancels what survivors added.
    #[default]
    Subtract,
    /// `X_safe = X_raw + Σ sgn(p,d)·PRF(s_pd)`, which doubles the orphaned
    /// masks instead of cancelling them. Kept for mutation testing.
    AddAsWritten,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerPolicy {
    /// Commitment opening, tag and aggregate range checks. Disabling them
    /// models an unprotected aggregator that accepts anything well-formed.
    pub verify: bool,
    pub recovery_rule: RecoveryRule,
    /// Rounds losing more than this fraction of participants are refused.
    pub max_dropout_fraction: f64,
    pub sharding_mode: ShardingMode,
}

impl Default for ServerPolicy {
    fn default() -> Self {
        Self {
            verify: true,
            recovery_rule: RecoveryRule::Subtract,
            max_dropout_fraction: 0.5,
            sharding_mode: ShardingMode::Balanced,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServerError {
    #[error("field modulus failed the primality check")]
    ModulusNotPrime,
    #[error("overflow check failed for {participants} participants (n·B = {required})")]
    OverflowRefused { participants: usize, required: u128 },
    #[error("ordering violation: {action} attempted in phase {phase:?}")]
    OrderingViolation { action: &'static str, phase: RoundPhase },
    #[error("{0} is not a participant in this round")]
    NotParticipant(ParticipantId),
    #[error("message for round {got}, expected {expected}")]
    WrongRound { expected: u64, got: u64 },
    #[error("duplicate message from {0}")]
    Duplicate(ParticipantId),
    #[error("submission from {0}, which never committed")]
    NoCommitment(ParticipantId),
    #[error("late submission from {0} discarded")]
    LateSubmission(ParticipantId),
    #[error("no accepted updates this round")]
    EmptyRound,
    #[error("{dropped} of {total} participants lost, above the recoverable fraction")]
    TooManyDropouts { dropped: usize, total: usize },
    #[error("unrecoverable round: seed for pair ({survivor}, {dropped}) missing")]
    MissingSeed {
        survivor: ParticipantId,
        dropped: ParticipantId,
    },
    #[error("orphaned masks have not been recovered")]
    RecoveryPending,
    #[error("aggregate tag check failed")]
    AggregateTagMismatch,
    #[error("aggregate decoding overflowed: {0}")]
    DecodeOverflow(FieldError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

impl ServerError {
    /// Faults that abort the round (as opposed to rejected messages).
    pub fn is_unrecoverable(&self) -> bool {
        matches!(
            self,
            ServerError::EmptyRound
                | ServerError::TooManyDropouts { .. }
                | ServerError::MissingSeed { .. }
                | ServerError::RecoveryPending
                | ServerError::AggregateTagMismatch
                | ServerError::DecodeOverflow(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceivedEntry {
    pub commitment: UpdateCommitment,
    pub update: Option<MaskedUpdate>,
    pub tag: Option<IntegrityTag>,
}

/// What the server broadcasts when opening a round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Announcement {
    pub round: u64,
    pub dim: usize,
    pub assignment: ShardAssignment,
    pub rho_commitment: Commitment,
}

/// The opened challenge seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reveal {
    pub rho: Vec<u8>,
    pub nonce: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregateResult {
    pub x_sum: FieldVector,
    pub contributors: BTreeSet<ParticipantId>,
    /// `⟨X_agg, α⟩ == Σ τ_u` over the contributors.
    pub tag_ok: bool,
    pub recovered_pairs: usize,
}

/// Survivor–survivor seeds found in a recovery response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedViolation {
    pub responder: ParticipantId,
    pub pair_with: ParticipantId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalizedRound {
    pub sum: SignedQuantized,
    pub mean: Vec<f64>,
    pub contributors: BTreeSet<ParticipantId>,
}

#[derive(Debug, Clone)]
pub struct RoundState {
    round: u64,
    dim: usize,
    phase: RoundPhase,
    policy: ServerPolicy,
    quant: QuantConfig,
    assignment: ShardAssignment,
    rho: Vec<u8>,
    rho_nonce: Vec<u8>,
    rho_commitment: Commitment,
    challenge: Option<ChallengeVector>,
    received: BTreeMap<ParticipantId, ReceivedEntry>,
    dropouts: BTreeSet<ParticipantId>,
    verdicts: BTreeMap<ParticipantId, Verdict>,
    raw: Option<AggregateResult>,
    recovered: bool,
    violations: Vec<SeedViolation>,
    counters: OpCounters,
}

/// Pure per-client check: the opening must match the commitment and the tag
/// must equal `⟨x, α⟩`.
pub fn verify_update(
    commitment: &UpdateCommitment,
    x: &MaskedUpdate,
    nonce: &[u8],
    tau: FieldElement,
    alpha: &ChallengeVector,
) -> Verdict {
    if !verify_commitment(&commitment.c, &x.to_bytes(), nonce) {
        return Verdict::CommitMismatch;
    }
    match inner_product_mod(&x.x, &alpha.alpha) {
        Ok(t) if t == tau => Verdict::Accepted,
        _ => Verdict::TagMismatch,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn open_round<R: RngCore + ?Sized>(
    participants: &[ParticipantId],
    round: u64,
    round_nonce: &[u8],
    m: usize,
    dim: usize,
    quant: QuantConfig,
    policy: ServerPolicy,
    rng: &mut R,
) -> Result<RoundState, ServerError> {
    if !modulus_is_prime() {
        return Err(ServerError::ModulusNotPrime);
    }
    if dim == 0 {
        return Err(CryptoError::ZeroDimension.into());
    }
    let assignment = assign_shards_with_mode(participants, round, round_nonce, m, policy.sharding_mode)?;
    let n = assignment.participant_count();
    let verdict = quant.check_overflow(n as u64);
    if !verdict.accepted {
        return Err(ServerError::OverflowRefused {
            participants: n,
            required: verdict.required,
        });
    }
    let mut rho = vec![0u8; 32];
    let mut rho_nonce = vec![0u8; 32];
    rng.fill_bytes(&mut rho);
    rng.fill_bytes(&mut rho_nonce);
    let rho_commitment = commit(&rho, &rho_nonce)?;
    Ok(RoundState {
        round,
        dim,
        phase: RoundPhase::Announced,
        policy,
        quant,
        assignment,
        rho,
        rho_nonce,
        rho_commitment,
        challenge: None,
        received: BTreeMap::new(),
        dropouts: BTreeSet::new(),
        verdicts: BTreeMap::new(),
        raw: None,
        recovered: false,
        violations: Vec::new(),
        counters: OpCounters::default(),
    })
}

impl RoundState {
    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn phase(&self) -> RoundPhase {
        self.phase
    }

    pub fn policy(&self) -> &ServerPolicy {
        &self.policy
    }

    pub fn assignment(&self) -> &ShardAssignment {
        &self.assignment
    }

    pub fn rho_commitment(&self) -> &Commitment {
        &self.rho_commitment
    }

    pub fn challenge(&self) -> Option<&ChallengeVector> {
        self.challenge.as_ref()
    }

    pub fn received(&self) -> &BTreeMap<ParticipantId, ReceivedEntry> {
        &self.received
    }

    pub fn dropouts(&self) -> &BTreeSet<ParticipantId> {
        &self.dropouts
    }

    pub fn verdicts(&self) -> &BTreeMap<ParticipantId, Verdict> {
        &self.verdicts
    }

    pub fn violations(&self) -> &[SeedViolation] {
        &self.violations
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    pub fn announcement(&self) -> Announcement {
        Announcement {
            round: self.round,
            dim: self.dim,
            assignment: self.assignment.clone(),
            rho_commitment: self.rho_commitment.clone(),
        }
    }

    fn require_phase(&self, phase: RoundPhase, action: &'static str) -> Result<(), ServerError> {
        if self.phase != phase {
            return Err(ServerError::OrderingViolation {
                action,
                phase: self.phase,
            });
        }
        Ok(())
    }

    fn require_participant(&self, u: ParticipantId, round: u64) -> Result<(), ServerError> {
        if !self.assignment.contains(u) {
            return Err(ServerError::NotParticipant(u));
        }
        if round != self.round {
            return Err(ServerError::WrongRound {
                expected: self.round,
                got: round,
            });
        }
        Ok(())
    }

    pub fn record_commitment(&mut self, c: UpdateCommitment) -> Result<(), ServerError> {
        self.require_participant(c.owner, c.round)?;
        self.require_phase(RoundPhase::Announced, "update commitment")?;
        if self.received.contains_key(&c.owner) {
            return Err(ServerError::Duplicate(c.owner));
        }
        self.received.insert(
            c.owner,
            ReceivedEntry {
                commitment: c,
                update: None,
                tag: None,
            },
        );
        Ok(())
    }

    /// Closes the commitment window; silent participants become dropouts.
    pub fn close_commitments(&mut self) -> Result<(), ServerError> {
        self.require_phase(RoundPhase::Announced, "close commitments")?;
        let silent: Vec<_> = self
            .assignment
            .participants()
            .filter(|u| !self.received.contains_key(u))
            .collect();
        for u in silent {
            self.dropouts.insert(u);
            self.verdicts.insert(u, Verdict::Dropped);
        }
        self.phase = RoundPhase::CommitsCollected;
        Ok(())
    }

    pub fn reveal_challenge(&mut self) -> Result<(Reveal, ChallengeVector), ServerError> {
        self.require_phase(RoundPhase::CommitsCollected, "challenge reveal")?;
        let challenge = derive_challenge(&self.rho, self.round, self.dim)?;
        self.challenge = Some(challenge.clone());
        self.phase = RoundPhase::ChallengeRevealed;
        Ok((
            Reveal {
                rho: self.rho.clone(),
                nonce: self.rho_nonce.clone(),
            },
            challenge,
        ))
    }

    /// Verifies and records one submission. Rejected messages return an
    /// error and leave the round untouched.
    pub fn receive_submission(&mut self, sub: Submission) -> Result<Verdict, ServerError> {
        let u = sub.update.owner;
        self.require_participant(u, sub.update.round)?;
        if self.phase > RoundPhase::ChallengeRevealed {
            return Err(ServerError::LateSubmission(u));
        }
        self.require_phase(RoundPhase::ChallengeRevealed, "submission")?;
        let entry = self.received.get(&u).ok_or(ServerError::NoCommitment(u))?;
        if entry.update.is_some() {
            return Err(ServerError::Duplicate(u));
        }
        let alpha = self.challenge.as_ref().expect("revealed");
        let verdict = if !self.policy.verify {
            if sub.update.x.dim() == self.dim {
                Verdict::Accepted
            } else {
                Verdict::TagMismatch
            }
        } else if sub.update.x.dim() != self.dim || sub.tag.owner != u {
            Verdict::TagMismatch
        } else {
            self.counters.field_ops += 2 * self.dim as u64;
            verify_update(&entry.commitment, &sub.update, &sub.nonce, sub.tag.tau, alpha)
        };
        let entry = self.received.get_mut(&u).expect("checked");
        entry.update = Some(sub.update);
        entry.tag = Some(sub.tag);
        self.verdicts.insert(u, verdict);
        Ok(verdict)
    }

    /// Closes the submission window; committed-but-silent clients drop.
    pub fn close_submissions(&mut self) -> Result<(), ServerError> {
        self.require_phase(RoundPhase::ChallengeRevealed, "close submissions")?;
        let silent: Vec<_> = self
            .assignment
            .participants()
            .filter(|u| !self.verdicts.contains_key(u))
            .collect();
        for u in silent {
            self.dropouts.insert(u);
            self.verdicts.insert(u, Verdict::Dropped);
        }
        self.phase = RoundPhase::UpdatesCollected;
        Ok(())
    }

    pub fn accepted(&self) -> BTreeSet<ParticipantId> {
        self.verdicts
            .iter()
            .filter(|(_, v)| **v == Verdict::Accepted)
            .map(|(u, _)| *u)
            .collect()
    }

    /// Participants whose masks are orphaned: dropouts and rejected clients.
    pub fn excluded(&self) -> BTreeSet<ParticipantId> {
        self.verdicts
            .iter()
            .filter(|(_, v)| **v != Verdict::Accepted)
            .map(|(u, _)| *u)
            .collect()
    }

    /// For each accepted participant, the excluded shard neighbours whose
    /// pair seeds it must disclose.
    pub fn recovery_requests(&self) -> BTreeMap<ParticipantId, BTreeSet<ParticipantId>> {
        let excluded = self.excluded();
        let mut out = BTreeMap::new();
        for p in self.accepted() {
            let shard = self.assignment.shard_of(p).unwrap_or(&[]);
            let ds: BTreeSet<_> = shard.iter().copied().filter(|d| excluded.contains(d)).collect();
            if !ds.is_empty() {
                out.insert(p, ds);
            }
        }
        out
    }

    pub fn needs_recovery(&self) -> bool {
        !self.recovery_requests().is_empty()
    }

    fn check_dropout_fraction(&self) -> Result<(), ServerError> {
        let total = self.assignment.participant_count();
        let dropped = self.excluded().len();
        if dropped as f64 > self.policy.max_dropout_fraction * total as f64 {
            return Err(ServerError::TooManyDropouts { dropped, total });
        }
        Ok(())
    }

    /// Sums accepted updates and checks the aggregate tag.
    pub fn aggregate_updates(&mut self) -> Result<AggregateResult, ServerError> {
        if self.phase < RoundPhase::UpdatesCollected {
            return Err(ServerError::OrderingViolation {
                action: "aggregate",
                phase: self.phase,
            });
        }
        self.check_dropout_fraction()?;
        let contributors = self.accepted();
        if contributors.is_empty() {
            return Err(ServerError::EmptyRound);
        }
        let mut x_sum = FieldVector::zeros(self.dim)?;
        let mut t_agg = FieldElement::ZERO;
        for u in &contributors {
            let e = &self.received[u];
            x_sum.add_assign(&e.update.as_ref().expect("accepted has update").x)?;
            t_agg += e.tag.as_ref().expect("accepted has tag").tau;
        }
        self.counters.field_ops += (contributors.len() * self.dim + 2 * self.dim) as u64;
        let alpha = self.challenge.as_ref().expect("revealed");
        let tag_ok = inner_product_mod(&x_sum, &alpha.alpha)? == t_agg;
        let result = AggregateResult {
            x_sum,
            contributors,
            tag_ok,
            recovered_pairs: 0,
        };
        self.raw = Some(result.clone());
        Ok(result)
    }

    /// Removes orphaned masks from the raw aggregate using survivor-supplied
    /// seeds.
    pub fn recover_dropouts(
        &mut self,
        responses: &BTreeMap<ParticipantId, RecoveryResponse>,
    ) -> Result<AggregateResult, ServerError> {
        let raw = match &self.raw {
            Some(r) => r.clone(),
            None => self.aggregate_updates()?,
        };
        let requests = self.recovery_requests();
        let mut x_safe = raw.x_sum.clone();
        let mut pairs = 0usize;
        for (&p, ds) in &requests {
            for &d in ds {
                let seed = responses
                    .get(&p)
                    .and_then(|r| r.seeds.get(&d))
                    .filter(|s| s.endpoints() == (p.min(d), p.max(d)))
                    .ok_or(ServerError::MissingSeed { survivor: p, dropped: d })?;
                let mask = pair_mask(seed, self.round, self.dim)?;
                self.counters.prf_calls += 1;
                self.counters.field_ops += self.dim as u64;
                let survivor_added = pair_sign(p, d) > 0;
                let subtract = match self.policy.recovery_rule {
                    RecoveryRule::Subtract => survivor_added,
                    RecoveryRule::AddAsWritten => !survivor_added,
                };
                if subtract {
                    x_safe.sub_assign(&mask)?;
                } else {
                    x_safe.add_assign(&mask)?;
                }
                pairs += 1;
            }
        }
        for (&p, r) in responses {
            let wanted = requests.get(&p);
            for &other in r.seeds.keys() {
                if wanted.is_none_or(|w| !w.contains(&other)) {
                    self.violations.push(SeedViolation {
                        responder: p,
                        pair_with: other,
                    });
                }
            }
        }
        self.recovered = true;
        self.phase = RoundPhase::Recovered;
        Ok(AggregateResult {
            x_sum: x_safe,
            contributors: raw.contributors,
            tag_ok: raw.tag_ok,
            recovered_pairs: pairs,
        })
    }

    /// Decodes the (corrected) aggregate and averages it over contributors.
    pub fn finalize(&mut self, agg: &AggregateResult) -> Result<FinalizedRound, ServerError> {
        if self.phase < RoundPhase::UpdatesCollected || self.phase == RoundPhase::Finalized {
            return Err(ServerError::OrderingViolation {
                action: "finalize",
                phase: self.phase,
            });
        }
        if self.needs_recovery() && !self.recovered {
            return Err(ServerError::RecoveryPending);
        }
        if self.policy.verify && !agg.tag_ok {
            return Err(ServerError::AggregateTagMismatch);
        }
        let n = agg.contributors.len();
        let bound = if self.policy.verify {
            (n as u64).saturating_mul(self.quant.bound()).min(MAX_SIGNED_BOUND)
        } else {
            MAX_SIGNED_BOUND
        };
        let sum = decode_signed(&agg.x_sum, bound).map_err(ServerError::DecodeOverflow)?;
        let mean = dequantize_sum(&sum, n, &self.quant)?;
        self.phase = RoundPhase::Finalized;
        Ok(FinalizedRound {
            sum,
            mean,
            contributors: agg.contributors.clone(),
        })
    }
}

/// Forgery experiment over a small prime field, where the `1/p` miss rate is
/// observable.
pub mod soundness {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
    pub struct MissRateReport {
        pub modulus: u64,
        pub dim: usize,
        pub trials: u64,
        pub misses: u64,
        pub rate: f64,
        pub expected: f64,
        /// Binomial standard deviation of the rate.
        pub sigma: f64,
    }

    impl MissRateReport {
        pub fn within_sigmas(&self, k: f64) -> bool {
            (self.rate - self.expected).abs() <= k * self.sigma
        }
    }

    fn inner(x: &[u64], a: &[u64], p: u64) -> u64 {
        let p = p as u128;
        (x.iter().zip(a).fold(0u128, |acc, (x, a)| (acc + *x as u128 * *a as u128) % p)) as u64
    }

    /// Each trial fixes an honest vector and a nonzero perturbation before
    /// drawing the challenge uniformly, then submits `x + δ` with the tag of
    /// `x`. A miss is a trial where the tag check still passes.
    pub fn small_field_miss_rate<R: Rng + ?Sized>(modulus: u64, dim: usize, trials: u64, rng: &mut R) -> MissRateReport {
        assert!(crate::fieldvec::is_prime_u64(modulus), "modulus must be prime");
        assert!(dim > 0);
        let mut misses = 0;
        for _ in 0..trials {
            let x: Vec<u64> = (0..dim).map(|_| rng.gen_range(0..modulus)).collect();
            let delta: Vec<u64> = loop {
                let d: Vec<u64> = (0..dim).map(|_| rng.gen_range(0..modulus)).collect();
                if d.iter().any(|&v| v != 0) {
                    break d;
                }
            };
            let alpha: Vec<u64> = (0..dim).map(|_| rng.gen_range(0..modulus)).collect();
            let honest_tag = inner(&x, &alpha, modulus);
            let submitted: Vec<u64> = x.iter().zip(&delta).map(|(a, b)| (a + b) % modulus).collect();
            if inner(&submitted, &alpha, modulus) == honest_tag {
                misses += 1;
            }
        }
        let expected = 1.0 / modulus as f64;
        MissRateReport {
            modulus,
            dim,
            trials,
            misses,
            rate: misses as f64 / trials as f64,
            expected,
            sigma: (expected * (1.0 - expected) / trials as f64).sqrt(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::ClientState;
    use crate::fieldvec::encode_signed;
    use crate::rng::substream;

    fn pid(i: u32) -> ParticipantId {
        ParticipantId(i)
    }

    struct Harness {
        server: RoundState,
        clients: BTreeMap<ParticipantId, ClientState>,
        inputs: BTreeMap<ParticipantId, SignedQuantized>,
    }

    fn harness(n: u32, m: usize, dim: usize, seed: u64, policy: ServerPolicy) -> Harness {
        let ids: Vec<_> = (0..n).map(pid).collect();
        let quant = QuantConfig::new(1 << 10, 1.0).unwrap();
        let mut rng = substream(seed, "server", 0);
        let server = open_round(&ids, 0, &seed.to_le_bytes(), m, dim, quant, policy, &mut rng).unwrap();
        let a = server.assignment().clone();
        let mut clients: BTreeMap<_, _> = ids
            .iter()
            .map(|&u| (u, ClientState::new(u, 0, format!("{seed}/{u}").as_bytes()).unwrap()))
            .collect();
        let publics: BTreeMap<_, _> = clients.iter().map(|(u, c)| (*u, c.public_key().to_vec())).collect();
        for (u, c) in clients.iter_mut() {
            let nb = crate::sharding::shard_neighbors(&a, *u).unwrap();
            let keys = nb.iter().map(|v| (*v, publics[v].clone())).collect();
            c.establish_pair_secrets(&a, &keys).unwrap();
        }
        let mut drng = substream(seed, "data", 0);
        let inputs = ids
            .iter()
            .map(|&u| {
                let b = quant.bound() as i64;
                let v = SignedQuantized::new((0..dim).map(|_| drng.gen_range(-b..=b)).collect(), quant.bound()).unwrap();
                (u, v)
            })
            .collect();
        Harness { server, clients, inputs }
    }

    impl Harness {
        /// Runs through submission; `silent_commit` never commit,
        /// `silent_submit` commit but never submit.
        fn run_until_collected(&mut self, silent_commit: &[u32], silent_submit: &[u32]) {
            let a = self.server.assignment().clone();
            for (u, c) in self.clients.iter_mut() {
                let x = c.build_masked_update(&self.inputs[u], &a).unwrap();
                let com = c.commit_update(&x).unwrap();
                if !silent_commit.contains(&u.0) {
                    self.server.record_commitment(com).unwrap();
                }
            }
            self.server.close_commitments().unwrap();
            let (reveal, _) = self.server.reveal_challenge().unwrap();
            for (u, c) in self.clients.iter_mut() {
                if silent_commit.contains(&u.0) || silent_submit.contains(&u.0) {
                    continue;
                }
                let alpha = c
                    .accept_challenge(&reveal.rho, &reveal.nonce, self.server.rho_commitment(), self.server.dim())
                    .unwrap();
                let sub = c.submit(&alpha).unwrap();
                assert_eq!(self.server.receive_submission(sub).unwrap(), Verdict::Accepted);
            }
            self.server.close_submissions().unwrap();
            let alive: Vec<_> = self.server.accepted().into_iter().collect();
            for c in self.clients.values_mut() {
                c.observe_heartbeats(alive.iter().copied());
            }
        }

        fn responses(&self) -> BTreeMap<ParticipantId, RecoveryResponse> {
            self.server
                .recovery_requests()
                .into_iter()
                .map(|(p, ds)| (p, self.clients[&p].respond_recovery(&ds).unwrap()))
                .collect()
        }

        fn plain_sum(&self, over: &BTreeSet<ParticipantId>) -> Vec<i64> {
            let dim = self.server.dim();
            let mut s = vec![0i64; dim];
            for u in over {
                for (a, b) in s.iter_mut().zip(self.inputs[u].elems()) {
                    *a += b;
                }
            }
            s
        }
    }

    #[test]
    fn honest_round_decodes_exact_sum() {
        let mut h = harness(10, 20, 7, 1, ServerPolicy::default());
        assert_eq!(h.server.assignment().shards.len(), 1);
        h.run_until_collected(&[], &[]);
        let agg = h.server.aggregate_updates().unwrap();
        assert!(agg.tag_ok);
        assert!(!h.server.needs_recovery());
        let fin = h.server.finalize(&agg).unwrap();
        let all: BTreeSet<_> = (0..10).map(pid).collect();
        assert_eq!(fin.sum.elems(), h.plain_sum(&all).as_slice());
        assert_eq!(h.server.phase(), RoundPhase::Finalized);
    }

    #[test]
    fn open_round_refusals_and_determinism() {
        let quant = QuantConfig::default();
        let mut rng = substream(0, "s", 0);
        let p = ServerPolicy::default();
        assert!(matches!(
            open_round(&[pid(0)], 0, b"n", 2, 4, quant, p, &mut rng),
            Err(ServerError::Shard(ShardError::TooFewParticipants(1)))
        ));
        let ids: Vec<_> = (0..5).map(pid).collect();
        let a = open_round(&ids, 0, b"n", 2, 4, quant, p, &mut substream(0, "s", 1)).unwrap();
        let b = open_round(&ids, 0, b"n", 2, 4, quant, p, &mut substream(0, "s", 1)).unwrap();
        assert_eq!(a.announcement(), b.announcement());
        let big = QuantConfig::new(1 << 50, 1.0).unwrap();
        let many: Vec<_> = (0..2000).map(pid).collect();
        assert!(matches!(
            open_round(&many, 0, b"n", 20, 4, big, p, &mut rng),
            Err(ServerError::OverflowRefused { .. })
        ));
    }

    #[test]
    fn early_reveal_is_an_ordering_violation() {
        let mut h = harness(4, 4, 3, 2, ServerPolicy::default());
        assert!(matches!(
            h.server.reveal_challenge(),
            Err(ServerError::OrderingViolation { phase: RoundPhase::Announced, .. })
        ));
        h.server.close_commitments().unwrap();
        assert!(h.server.reveal_challenge().is_ok());
        assert!(h.server.reveal_challenge().is_err());
    }

    #[test]
    fn tampered_rho_rejected_by_clients() {
        let mut h = harness(4, 4, 3, 3, ServerPolicy::default());
        let a = h.server.assignment().clone();
        for (u, c) in h.clients.iter_mut() {
            let x = c.build_masked_update(&h.inputs[u], &a).unwrap();
            h.server.record_commitment(c.commit_update(&x).unwrap()).unwrap();
        }
        h.server.close_commitments().unwrap();
        let (mut reveal, _) = h.server.reveal_challenge().unwrap();
        reveal.rho[0] ^= 1;
        for c in h.clients.values() {
            assert!(c
                .accept_challenge(&reveal.rho, &reveal.nonce, h.server.rho_commitment(), 3)
                .is_err());
        }
    }

    #[test]
    fn poisoned_submissions_are_classified() {
        let mut h = harness(5, 5, 4, 4, ServerPolicy::default());
        let a = h.server.assignment().clone();
        for (u, c) in h.clients.iter_mut() {
            let x = c.build_masked_update(&h.inputs[u], &a).unwrap();
            h.server.record_commitment(c.commit_update(&x).unwrap()).unwrap();
        }
        h.server.close_commitments().unwrap();
        let (reveal, alpha) = h.server.reveal_challenge().unwrap();
        let delta = FieldVector::from_u64s(&[3, 0, 0, 1]).unwrap();
        for (u, c) in h.clients.iter_mut() {
            let a2 = c.accept_challenge(&reveal.rho, &reveal.nonce, h.server.rho_commitment(), 4).unwrap();
            let mut sub = c.submit(&a2).unwrap();
            match u.0 {
                // scenario A: perturb after commit, recompute the tag honestly
                1 => {
                    sub.update.x.add_assign(&delta).unwrap();
                    sub.tag = crate::client::integrity_tag(&sub.update, &alpha).unwrap();
                    assert_eq!(h.server.receive_submission(sub).unwrap(), Verdict::CommitMismatch);
                }
                // scenario B: committed bytes, tag over a different vector
                2 => {
                    let mut other = sub.update.clone();
                    other.x.add_assign(&delta).unwrap();
                    sub.tag = crate::client::integrity_tag(&other, &alpha).unwrap();
                    assert_eq!(h.server.receive_submission(sub).unwrap(), Verdict::TagMismatch);
                }
                _ => assert_eq!(h.server.receive_submission(sub).unwrap(), Verdict::Accepted),
            }
        }
        h.server.close_submissions().unwrap();
        let alive: Vec<_> = h.server.accepted().into_iter().collect();
        for c in h.clients.values_mut() {
            c.observe_heartbeats(alive.iter().copied());
        }
        assert_eq!(h.server.excluded(), [pid(1), pid(2)].into());
        let raw = h.server.aggregate_updates().unwrap();
        assert!(raw.tag_ok, "aggregate over the remaining clients still verifies");
        assert!(matches!(h.server.finalize(&raw), Err(ServerError::RecoveryPending)));
        let responses = h.responses();
        let fixed = h.server.recover_dropouts(&responses).unwrap();
        assert_eq!(fixed.recovered_pairs, 2 * 3);
        let fin = h.server.finalize(&fixed).unwrap();
        assert_eq!(fin.sum.elems(), h.plain_sum(&h.server.accepted()).as_slice());
    }

    #[test]
    fn one_dropout_recovers_exactly() {
        for silent in [0u32, 2, 4] {
            let mut h = harness(5, 5, 6, 10 + silent as u64, ServerPolicy::default());
            h.run_until_collected(&[], &[silent]);
            h.server.aggregate_updates().unwrap();
            let responses = h.responses();
            let fixed = h.server.recover_dropouts(&responses).unwrap();
            assert_eq!(fixed.recovered_pairs, 4);
            let fin = h.server.finalize(&fixed).unwrap();
            let survivors = h.server.accepted();
            assert_eq!(survivors.len(), 4);
            assert_eq!(fin.sum.elems(), h.plain_sum(&survivors).as_slice());
        }
    }

    #[test]
    fn thirty_percent_dropout_recovers_exactly() {
        for seed in 0..20u64 {
            let mut h = harness(20, 5, 5, 100 + seed, ServerPolicy::default());
            let mut rng = substream(seed, "drop", 0);
            let mut ids: Vec<u32> = (0..20).collect();
            rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut rng);
            let (commit_drop, submit_drop) = ids[..6].split_at(2);
            h.run_until_collected(commit_drop, submit_drop);
            h.server.aggregate_updates().unwrap();
            let responses = h.responses();
            let fixed = h.server.recover_dropouts(&responses).unwrap();
            let fin = h.server.finalize(&fixed).unwrap();
            assert_eq!(fin.sum.elems(), h.plain_sum(&h.server.accepted()).as_slice());
            assert_eq!(fin.contributors.len(), 14);
        }
    }

    #[test]
    fn literal_plus_sign_breaks_recovery() {
        let policy = ServerPolicy {
            recovery_rule: RecoveryRule::AddAsWritten,
            ..ServerPolicy::default()
        };
        let mut h = harness(5, 5, 6, 77, policy);
        h.run_until_collected(&[], &[3]);
        h.server.aggregate_updates().unwrap();
        let responses = h.responses();
        let fixed = h.server.recover_dropouts(&responses).unwrap();
        // orphaned masks are doubled; decoding overflows or yields the wrong sum
        match h.server.finalize(&fixed) {
            Err(ServerError::DecodeOverflow(_)) => {}
            Ok(fin) => assert_ne!(fin.sum.elems(), h.plain_sum(&h.server.accepted()).as_slice()),
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_seed_is_unrecoverable() {
        let mut h = harness(5, 5, 3, 8, ServerPolicy::default());
        h.run_until_collected(&[], &[1]);
        h.server.aggregate_updates().unwrap();
        let mut responses = h.responses();
        let first = *responses.keys().next().unwrap();
        responses.get_mut(&first).unwrap().seeds.clear();
        let err = h.server.recover_dropouts(&responses).unwrap_err();
        assert_eq!(err, ServerError::MissingSeed { survivor: first, dropped: pid(1) });
        assert!(err.is_unrecoverable());
    }

    #[test]
    fn survivor_seeds_in_responses_are_flagged() {
        let mut h = harness(4, 4, 3, 9, ServerPolicy::default());
        h.run_until_collected(&[], &[3]);
        h.server.aggregate_updates().unwrap();
        let mut responses = h.responses();
        let leaked = h.clients[&pid(0)].pair_secrets()[&pid(1)].clone();
        responses.get_mut(&pid(0)).unwrap().seeds.insert(pid(1), leaked);
        let fixed = h.server.recover_dropouts(&responses).unwrap();
        assert_eq!(h.server.violations(), &[SeedViolation { responder: pid(0), pair_with: pid(1) }]);
        // the extra seed is not applied
        let fin = h.server.finalize(&fixed).unwrap();
        assert_eq!(fin.sum.elems(), h.plain_sum(&h.server.accepted()).as_slice());
    }

    #[test]
    fn late_and_foreign_submissions() {
        let mut h = harness(4, 4, 3, 12, ServerPolicy::default());
        h.run_until_collected(&[], &[2]);
        let a = h.server.challenge().unwrap().clone();
        // client 2 finally submits after the window closed
        let late = h.clients.get_mut(&pid(2)).unwrap().submit(&a).unwrap();
        assert_eq!(h.server.receive_submission(late).unwrap_err(), ServerError::LateSubmission(pid(2)));
        let foreign = UpdateCommitment {
            c: commit(b"x", &[0; 16]).unwrap(),
            owner: pid(99),
            round: 0,
        };
        assert_eq!(h.server.record_commitment(foreign).unwrap_err(), ServerError::NotParticipant(pid(99)));
        assert_eq!(h.server.verdicts()[&pid(2)], Verdict::Dropped);
    }

    #[test]
    fn empty_and_overfull_dropout_rounds_fault() {
        let mut h = harness(4, 4, 3, 13, ServerPolicy::default());
        h.run_until_collected(&[0, 1, 2, 3], &[]);
        assert!(matches!(h.server.aggregate_updates(), Err(ServerError::TooManyDropouts { .. })));
        let lax = ServerPolicy {
            max_dropout_fraction: 1.0,
            ..ServerPolicy::default()
        };
        let mut h = harness(4, 4, 3, 13, lax);
        h.run_until_collected(&[0, 1, 2, 3], &[]);
        assert_eq!(h.server.aggregate_updates().unwrap_err(), ServerError::EmptyRound);
    }

    #[test]
    fn verification_disabled_accepts_tampering() {
        let policy = ServerPolicy {
            verify: false,
            ..ServerPolicy::default()
        };
        let mut h = harness(3, 3, 2, 14, policy);
        let a = h.server.assignment().clone();
        for (u, c) in h.clients.iter_mut() {
            let x = c.build_masked_update(&h.inputs[u], &a).unwrap();
            h.server.record_commitment(c.commit_update(&x).unwrap()).unwrap();
        }
        h.server.close_commitments().unwrap();
        let (reveal, _) = h.server.reveal_challenge().unwrap();
        let poison = encode_signed(&SignedQuantized::new(vec![1 << 40, 0], 1 << 40).unwrap()).unwrap();
        for (u, c) in h.clients.iter_mut() {
            let alpha = c.accept_challenge(&reveal.rho, &reveal.nonce, h.server.rho_commitment(), 2).unwrap();
            let mut sub = c.submit(&alpha).unwrap();
            if u.0 == 0 {
                sub.update.x.add_assign(&poison).unwrap();
            }
            assert_eq!(h.server.receive_submission(sub).unwrap(), Verdict::Accepted);
        }
        h.server.close_submissions().unwrap();
        let agg = h.server.aggregate_updates().unwrap();
        assert!(!agg.tag_ok);
        let fin = h.server.finalize(&agg).unwrap();
        let all = h.server.accepted();
        assert_eq!(fin.sum.elems()[0], h.plain_sum(&all)[0] + (1 << 40));
    }

    #[test]
    fn small_field_miss_rate_tracks_one_over_p() {
        let mut rng = substream(1, "sound", 0);
        let r = soundness::small_field_miss_rate(101, 4, 20_000, &mut rng);
        assert!(r.within_sigmas(4.0), "{r:?}");
        let _ = encode_signed;
    }
}
