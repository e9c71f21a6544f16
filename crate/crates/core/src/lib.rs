//! Sharded verifiable secure aggregation for federated learning.
//!
//! Participants are partitioned each round into small cliques ([`sharding`]),
//! mask their quantized gradients with pairwise zero-sum PRF streams
//! ([`client`]), and attach a linear integrity tag computed against a
//! challenge that is only revealed after every update has been committed.
//! The aggregator ([`server`]) checks each tag, sums the accepted updates and
//! cancels the masks orphaned by dropouts or excluded clients.
//!
//! [`simnet`] drives full rounds on a simulated clock, [`fltrain`] supplies a
//! logistic-regression fraud-detection workload, and [`bench`] measures the
//! key-exchange and latency scaling.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod bench;
pub mod client;
pub mod crypto;
pub mod fieldvec;
pub mod fltrain;
pub mod quantizer;
pub mod rng;
pub mod server;
pub mod sharding;
pub mod simnet;

/// Identifier of a federation participant (a bank node).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParticipantId(pub u32);

impl fmt::Debug for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

impl From<u32> for ParticipantId {
    fn from(v: u32) -> Self {
        ParticipantId(v)
    }
}

/// Sign of the mask that `u` applies for its edge to `v`: `+1` if `u < v`.
pub fn pair_sign(u: ParticipantId, v: ParticipantId) -> i8 {
    if u < v {
        1
    } else {
        -1
    }
}

/// Deterministic operation counters, independent of wall-clock time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    /// PRF vector expansions for pairwise masks.
    pub prf_calls: u64,
    /// Field additions/subtractions/multiplications on vector components.
    pub field_ops: u64,
    /// Diffie-Hellman key agreements.
    pub key_agreements: u64,
}

impl std::ops::AddAssign for OpCounters {
    fn add_assign(&mut self, rhs: Self) {
        self.prf_calls += rhs.prf_calls;
        self.field_ops += rhs.field_ops;
        self.key_agreements += rhs.key_agreements;
    }
}
