//! Participant-side protocol state machine.
//!
//! A client moves through `Idle → Keyed → Committed → Submitted → Done`
//! within one round:
//!
//! 1. agree a pair secret with every shard neighbour,
//! 2. mask its encoded gradient with the zero-sum PRF streams,
//! 3. commit to the masked bytes before the challenge is known,
//! 4. after the server opens `ρ`, tag the committed vector and submit it,
//! 5. on request, hand over the seeds it shares with dropped neighbours.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crypto::{
    self, derive_challenge, derive_shared_secret, keygen, prf_expand_vector, verify_commitment,
    ChallengeVector, Commitment, CryptoError, KeyPair, PairSecret, PrfContext,
};
use crate::fieldvec::{encode_signed, inner_product_mod, FieldElement, FieldError, FieldVector, SignedQuantized};
use crate::quantizer::check_overflow_bound;
use crate::sharding::{shard_neighbors, ShardAssignment, ShardError};
use crate::{pair_sign, OpCounters, ParticipantId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClientPhase {
    Idle,
    Keyed,
    Committed,
    Submitted,
    Done,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClientError {
    #[error("operation requires phase {expected:?}, client is in {actual:?}")]
    WrongPhase {
        expected: ClientPhase,
        actual: ClientPhase,
    },
    #[error("assignment is for round {assignment}, client is in round {client}")]
    RoundMismatch { client: u64, assignment: u64 },
    #[error("missing public key for neighbor {0}")]
    MissingNeighborKey(ParticipantId),
    #[error("public key of neighbor {neighbor} rejected: {source}")]
    MalformedKey {
        neighbor: ParticipantId,
        source: CryptoError,
    },
    #[error("received a key from {0}, which is not a shard neighbor")]
    UnexpectedKey(ParticipantId),
    #[error("client has no shard neighbors to mask with")]
    NoNeighbors,
    #[error("quantization bound fails the overflow check: n·B = {required}")]
    Overflow { required: u128 },
    #[error("update already committed this round")]
    AlreadyCommitted,
    #[error("revealed challenge seed does not match the server's commitment")]
    ChallengeCommitmentMismatch,
    #[error("recovery request names surviving neighbor {neighbor}")]
    ProtocolViolation { neighbor: ParticipantId },
    #[error("recovery request names the client itself")]
    SelfNamed,
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// A participant's masked vector `x_u`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedUpdate {
    pub x: FieldVector,
    pub owner: ParticipantId,
    pub round: u64,
}

impl MaskedUpdate {
    /// Bytes bound by the update commitment.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.x.to_bytes()
    }
}

/// `τ_u = ⟨x_u, α⟩`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityTag {
    pub tau: FieldElement,
    pub owner: ParticipantId,
    pub round: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCommitment {
    pub c: Commitment,
    pub owner: ParticipantId,
    pub round: u64,
}

/// Opening of a committed update together with its tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Submission {
    pub update: MaskedUpdate,
    pub nonce: Vec<u8>,
    pub tag: IntegrityTag,
}

impl Submission {
    /// `x bytes || u32 nonce length || nonce || τ (8 bytes LE)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.update.to_bytes();
        out.extend_from_slice(&(self.nonce.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.tag.tau.value().to_le_bytes());
        out
    }
}

/// Seeds a survivor discloses for its dropped neighbours.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryResponse {
    pub from: Option<ParticipantId>,
    pub seeds: BTreeMap<ParticipantId, PairSecret>,
}

impl RecoveryResponse {
    /// For each entry: `u32 other-endpoint id || 32-byte seed`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.seeds.len() * 36);
        for (d, s) in &self.seeds {
            out.extend_from_slice(&d.0.to_le_bytes());
            out.extend_from_slice(s.seed());
        }
        out
    }
}

/// Tag over an arbitrary masked vector.
pub fn integrity_tag(x: &MaskedUpdate, alpha: &ChallengeVector) -> Result<IntegrityTag, ClientError> {
    Ok(IntegrityTag {
        tau: inner_product_mod(&x.x, &alpha.alpha)?,
        owner: x.owner,
        round: x.round,
    })
}

/// Mask stream for the pair `(u, v)` in `round`, before the sign is applied.
pub fn pair_mask(secret: &PairSecret, round: u64, dim: usize) -> Result<FieldVector, CryptoError> {
    let (lo, hi) = secret.endpoints();
    prf_expand_vector(secret.seed(), PrfContext::mask(round, lo, hi), dim)
}

#[derive(Debug, Clone)]
pub struct ClientState {
    id: ParticipantId,
    round: u64,
    keypair: KeyPair,
    nonce_seed: [u8; 32],
    neighbors: Vec<ParticipantId>,
    pair_secrets: BTreeMap<ParticipantId, PairSecret>,
    phase: ClientPhase,
    committed: Option<(MaskedUpdate, Vec<u8>)>,
    live_neighbors: BTreeSet<ParticipantId>,
    counters: OpCounters,
}

impl ClientState {
    /// A fresh client for `round`. `key_seed` must be unique per
    /// (participant, round) so keys are never reused across rounds.
    pub fn new(id: ParticipantId, round: u64, key_seed: &[u8]) -> Result<Self, ClientError> {
        let keypair = keygen(key_seed, id)?;
        let mut h = Sha256::new();
        h.update(b"dsfl/commit-nonce/v1");
        h.update(key_seed);
        Ok(Self {
            id,
            round,
            keypair,
            nonce_seed: h.finalize().into(),
            neighbors: Vec::new(),
            pair_secrets: BTreeMap::new(),
            phase: ClientPhase::Idle,
            committed: None,
            live_neighbors: BTreeSet::new(),
            counters: OpCounters::default(),
        })
    }

    pub fn id(&self) -> ParticipantId {
        self.id
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn phase(&self) -> ClientPhase {
        self.phase
    }

    pub fn public_key(&self) -> &[u8; 32] {
        self.keypair.public()
    }

    pub fn neighbors(&self) -> &[ParticipantId] {
        &self.neighbors
    }

    pub fn pair_secrets(&self) -> &BTreeMap<ParticipantId, PairSecret> {
        &self.pair_secrets
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    fn expect_phase(&self, expected: ClientPhase) -> Result<(), ClientError> {
        if self.phase != expected {
            return Err(ClientError::WrongPhase {
                expected,
                actual: self.phase,
            });
        }
        Ok(())
    }

    pub fn establish_pair_secrets(
        &mut self,
        assignment: &ShardAssignment,
        neighbor_publics: &BTreeMap<ParticipantId, Vec<u8>>,
    ) -> Result<(), ClientError> {
        self.expect_phase(ClientPhase::Idle)?;
        if assignment.round != self.round {
            return Err(ClientError::RoundMismatch {
                client: self.round,
                assignment: assignment.round,
            });
        }
        let neighbors = shard_neighbors(assignment, self.id)?;
        if neighbors.is_empty() {
            return Err(ClientError::NoNeighbors);
        }
        if let Some(&extra) = neighbor_publics.keys().find(|k| !neighbors.contains(k)) {
            return Err(ClientError::UnexpectedKey(extra));
        }
        let mut secrets = BTreeMap::new();
        for &v in &neighbors {
            let public = neighbor_publics
                .get(&v)
                .ok_or(ClientError::MissingNeighborKey(v))?;
            let s = derive_shared_secret(&self.keypair, v, public)
                .map_err(|source| ClientError::MalformedKey { neighbor: v, source })?;
            secrets.insert(v, s);
        }
        self.counters.key_agreements += neighbors.len() as u64;
        self.neighbors = neighbors;
        self.pair_secrets = secrets;
        self.phase = ClientPhase::Keyed;
        Ok(())
    }

    /// The signed mask term this client applies for `neighbor`.
    pub fn mask_term(&self, neighbor: ParticipantId, dim: usize) -> Result<(i8, FieldVector), ClientError> {
        let s = self
            .pair_secrets
            .get(&neighbor)
            .ok_or(ClientError::MissingNeighborKey(neighbor))?;
        Ok((pair_sign(self.id, neighbor), pair_mask(s, self.round, dim)?))
    }

    /// `x = encode(v) + Σ_{v>u} PRF(s_uv) − Σ_{v<u} PRF(s_uv) mod p`.
    pub fn build_masked_update(
        &mut self,
        v: &SignedQuantized,
        assignment: &ShardAssignment,
    ) -> Result<MaskedUpdate, ClientError> {
        self.expect_phase(ClientPhase::Keyed)?;
        let verdict = check_overflow_bound(assignment.participant_count() as u64, v.bound());
        if !verdict.accepted {
            return Err(ClientError::Overflow {
                required: verdict.required,
            });
        }
        if self.neighbors.is_empty() {
            return Err(ClientError::NoNeighbors);
        }
        let dim = v.dim();
        let mut x = encode_signed(v)?;
        for &nb in &self.neighbors {
            let (sign, mask) = self.mask_term(nb, dim)?;
            if sign > 0 {
                x.add_assign(&mask)?;
            } else {
                x.sub_assign(&mask)?;
            }
            self.counters.prf_calls += 1;
            self.counters.field_ops += dim as u64;
        }
        Ok(MaskedUpdate {
            x,
            owner: self.id,
            round: self.round,
        })
    }

    fn commit_nonce(&self) -> Vec<u8> {
        let mut h = Sha256::new();
        h.update(self.nonce_seed);
        h.update(self.round.to_le_bytes());
        h.finalize().to_vec()
    }

    pub fn commit_update(&mut self, x: &MaskedUpdate) -> Result<UpdateCommitment, ClientError> {
        if self.committed.is_some() {
            return Err(ClientError::AlreadyCommitted);
        }
        self.expect_phase(ClientPhase::Keyed)?;
        let nonce = self.commit_nonce();
        let c = crypto::commit(&x.to_bytes(), &nonce)?;
        self.committed = Some((x.clone(), nonce));
        self.phase = ClientPhase::Committed;
        Ok(UpdateCommitment {
            c,
            owner: self.id,
            round: self.round,
        })
    }

    /// Checks the opened `ρ` against the server's earlier commitment and
    /// derives the challenge.
    pub fn accept_challenge(
        &self,
        rho: &[u8],
        rho_nonce: &[u8],
        rho_commitment: &Commitment,
        dim: usize,
    ) -> Result<ChallengeVector, ClientError> {
        self.expect_phase(ClientPhase::Committed)?;
        if !verify_commitment(rho_commitment, rho, rho_nonce) {
            return Err(ClientError::ChallengeCommitmentMismatch);
        }
        Ok(derive_challenge(rho, self.round, dim)?)
    }

    pub fn compute_tag(&self, alpha: &ChallengeVector) -> Result<IntegrityTag, ClientError> {
        self.expect_phase(ClientPhase::Committed)?;
        let (x, _) = self.committed.as_ref().expect("committed in Committed phase");
        integrity_tag(x, alpha)
    }

    /// Opens the commitment and attaches the tag.
    pub fn submit(&mut self, alpha: &ChallengeVector) -> Result<Submission, ClientError> {
        let tag = self.compute_tag(alpha)?;
        let (update, nonce) = self.committed.clone().expect("committed in Committed phase");
        self.counters.field_ops += 2 * update.x.dim() as u64;
        self.phase = ClientPhase::Submitted;
        Ok(Submission { update, nonce, tag })
    }

    /// Records which neighbours were seen alive during the submit phase.
    pub fn observe_heartbeats(&mut self, alive: impl IntoIterator<Item = ParticipantId>) {
        self.live_neighbors = alive
            .into_iter()
            .filter(|v| self.neighbors.contains(v))
            .collect();
    }

    /// Discloses the seeds shared with dropped neighbours, refusing requests
    /// that name a neighbour this client saw alive.
    pub fn respond_recovery(&self, dropped: &BTreeSet<ParticipantId>) -> Result<RecoveryResponse, ClientError> {
        self.expect_phase(ClientPhase::Submitted)?;
        if dropped.contains(&self.id) {
            return Err(ClientError::SelfNamed);
        }
        if let Some(&neighbor) = dropped.iter().find(|d| self.live_neighbors.contains(d)) {
            return Err(ClientError::ProtocolViolation { neighbor });
        }
        let seeds = self
            .pair_secrets
            .iter()
            .filter(|(v, _)| dropped.contains(v))
            .map(|(v, s)| (*v, s.clone()))
            .collect();
        Ok(RecoveryResponse {
            from: Some(self.id),
            seeds,
        })
    }

    pub fn finish(&mut self) {
        self.phase = ClientPhase::Done;
    }
}
