//! Key agreement, PRF mask expansion, hash commitments and challenge
//! derivation.
//!
//! Conventions (fixed so other implementations can reproduce every byte):
//!
//! * Key pairs are X25519. The secret scalar is
//!   `SHA-256("dsfl/keygen/v1" || id_le32 || seed)`.
//! * Pair secrets are `HKDF-SHA256(salt = "dsfl/pair/v1", ikm = dh,
//!   info = lo_id_le32 || hi_id_le32)` truncated to 32 bytes.
//! * The PRF is AES-256-CTR keyed by the 32-byte seed, with the 128-bit
//!   initial counter block taken from `SHA-256("dsfl/prf/v1" || context)`.
//!   The keystream is read as little-endian 64-bit words; the low 61 bits of
//!   each word form a candidate and the single value `2^61 - 1` is rejected.
//! * Commitments are `SHA-256(payload || nonce)` with a nonce of at least
//!   16 bytes.
//! * The challenge key is `SHA-256("dsfl/challenge-key/v1" || rho)`.

use aes::cipher::{KeyIvInit, StreamCipher};
use hkdf::Hkdf;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::fieldvec::{FieldElement, FieldVector, MODULUS};
use crate::ParticipantId;

type Aes256Ctr = ctr::Ctr128BE<aes::Aes256>;

pub const MIN_NONCE_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("key generation seed must be non-empty")]
    EmptySeed,
    #[error("public key must be 32 bytes, got {0}")]
    MalformedPublicKey(usize),
    #[error("key agreement with {0} produced a low-order result")]
    NonContributory(ParticipantId),
    #[error("commitment nonce must be at least {MIN_NONCE_LEN} bytes, got {0}")]
    ShortNonce(usize),
    #[error("vector dimension must be positive")]
    ZeroDimension,
}

/// An X25519 key pair bound to its owner.
#[derive(Clone)]
pub struct KeyPair {
    secret: StaticSecret,
    public: [u8; 32],
    owner: ParticipantId,
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPair")
            .field("owner", &self.owner)
            .field("public", &hex::encode(self.public))
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    pub fn public(&self) -> &[u8; 32] {
        &self.public
    }

    pub fn owner(&self) -> ParticipantId {
        self.owner
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }
}

/// Derives a key pair deterministically from `rng_seed` and the owner id.
pub fn keygen(rng_seed: &[u8], id: ParticipantId) -> Result<KeyPair, CryptoError> {
    if rng_seed.is_empty() {
        return Err(CryptoError::EmptySeed);
    }
    let mut h = Sha256::new();
    h.update(b"dsfl/keygen/v1");
    h.update(id.0.to_le_bytes());
    h.update(rng_seed);
    let bytes: [u8; 32] = h.finalize().into();
    let secret = StaticSecret::from(bytes);
    let public = PublicKey::from(&secret).to_bytes();
    Ok(KeyPair {
        secret,
        public,
        owner: id,
    })
}

/// A symmetric 32-byte seed shared by the two endpoints of a shard edge.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSecret {
    #[serde(with = "hex_array")]
    seed: [u8; 32],
    endpoints: (ParticipantId, ParticipantId),
}

impl std::fmt::Debug for PairSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PairSecret({}-{})", self.endpoints.0, self.endpoints.1)
    }
}

impl PairSecret {
    /// Endpoints are stored in ascending order regardless of argument order.
    pub fn from_parts(seed: [u8; 32], a: ParticipantId, b: ParticipantId) -> Self {
        Self {
            seed,
            endpoints: (a.min(b), a.max(b)),
        }
    }

    pub fn seed(&self) -> &[u8; 32] {
        &self.seed
    }

    pub fn endpoints(&self) -> (ParticipantId, ParticipantId) {
        self.endpoints
    }

    pub fn involves(&self, id: ParticipantId) -> bool {
        self.endpoints.0 == id || self.endpoints.1 == id
    }

    /// The endpoint that is not `id`, if `id` is an endpoint.
    pub fn other(&self, id: ParticipantId) -> Option<ParticipantId> {
        match self.endpoints {
            (a, b) if a == id => Some(b),
            (a, b) if b == id => Some(a),
            _ => None,
        }
    }
}

/// X25519 followed by HKDF, bound to the unordered endpoint pair.
pub fn derive_shared_secret(
    my: &KeyPair,
    their_id: ParticipantId,
    their_public: &[u8],
) -> Result<PairSecret, CryptoError> {
    let bytes: [u8; 32] = their_public
        .try_into()
        .map_err(|_| CryptoError::MalformedPublicKey(their_public.len()))?;
    let shared = my.secret.diffie_hellman(&PublicKey::from(bytes));
    if !shared.was_contributory() {
        return Err(CryptoError::NonContributory(their_id));
    }
    let (lo, hi) = (my.owner.min(their_id), my.owner.max(their_id));
    let mut info = [0u8; 8];
    info[..4].copy_from_slice(&lo.0.to_le_bytes());
    info[4..].copy_from_slice(&hi.0.to_le_bytes());
    let hk = Hkdf::<Sha256>::new(Some(b"dsfl/pair/v1"), shared.as_bytes());
    let mut seed = [0u8; 32];
    hk.expand(&info, &mut seed)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    Ok(PairSecret::from_parts(seed, lo, hi))
}

/// Domain-separation context for a PRF stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrfContext {
    /// Zero-sum mask for the pair `(low, high)` in a round; `low < high`.
    Mask {
        round: u64,
        low: ParticipantId,
        high: ParticipantId,
    },
    /// The round's verification challenge.
    Challenge { round: u64 },
}

impl PrfContext {
    pub fn mask(round: u64, a: ParticipantId, b: ParticipantId) -> Self {
        PrfContext::Mask {
            round,
            low: a.min(b),
            high: a.max(b),
        }
    }

    pub fn to_bytes(self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24);
        match self {
            PrfContext::Mask { round, low, high } => {
                out.extend_from_slice(b"mask");
                out.extend_from_slice(&round.to_le_bytes());
                out.extend_from_slice(&low.0.to_le_bytes());
                out.extend_from_slice(&high.0.to_le_bytes());
            }
            PrfContext::Challenge { round } => {
                out.extend_from_slice(b"challenge");
                out.extend_from_slice(&round.to_le_bytes());
            }
        }
        out
    }

    fn iv(self) -> [u8; 16] {
        let mut h = Sha256::new();
        h.update(b"dsfl/prf/v1");
        h.update(self.to_bytes());
        let d = h.finalize();
        d[..16].try_into().unwrap()
    }
}

/// Expands a seed into `dim` uniform field elements.
pub fn prf_expand_vector(
    seed: &[u8; 32],
    context: PrfContext,
    dim: usize,
) -> Result<FieldVector, CryptoError> {
    if dim == 0 {
        return Err(CryptoError::ZeroDimension);
    }
    let mut cipher = Aes256Ctr::new(seed.into(), &context.iv().into());
    let mut out = Vec::with_capacity(dim);
    let mut block = [0u8; 64];
    while out.len() < dim {
        block.fill(0);
        cipher.apply_keystream(&mut block);
        for word in block.chunks_exact(8) {
            let candidate = u64::from_le_bytes(word.try_into().unwrap()) & MODULUS;
            if candidate == MODULUS {
                continue;
            }
            out.push(FieldElement::from_canonical(candidate).expect("below modulus"));
            if out.len() == dim {
                break;
            }
        }
    }
    Ok(FieldVector::new(out).expect("dim > 0"))
}

/// A hash commitment, optionally carrying its opening.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commitment {
    #[serde(with = "hex_array")]
    pub digest: [u8; 32],
    #[serde(skip)]
    pub opened: Option<(Vec<u8>, Vec<u8>)>,
}

fn commitment_digest(payload: &[u8], nonce: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(payload);
    h.update(nonce);
    h.finalize().into()
}

pub fn commit(payload: &[u8], nonce: &[u8]) -> Result<Commitment, CryptoError> {
    if nonce.len() < MIN_NONCE_LEN {
        return Err(CryptoError::ShortNonce(nonce.len()));
    }
    Ok(Commitment {
        digest: commitment_digest(payload, nonce),
        opened: None,
    })
}

pub fn verify_commitment(c: &Commitment, payload: &[u8], nonce: &[u8]) -> bool {
    nonce.len() >= MIN_NONCE_LEN && commitment_digest(payload, nonce) == c.digest
}

/// The per-round challenge vector shared by server and clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChallengeVector {
    pub alpha: FieldVector,
    pub round: u64,
    pub source_seed: Vec<u8>,
}

pub fn derive_challenge(rho: &[u8], round: u64, dim: usize) -> Result<ChallengeVector, CryptoError> {
    if dim == 0 {
        return Err(CryptoError::ZeroDimension);
    }
    let mut h = Sha256::new();
    h.update(b"dsfl/challenge-key/v1");
    h.update(rho);
    let key: [u8; 32] = h.finalize().into();
    Ok(ChallengeVector {
        alpha: prf_expand_vector(&key, PrfContext::Challenge { round }, dim)?,
        round,
        source_seed: rho.to_vec(),
    })
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub(crate) mod hex_array {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}
