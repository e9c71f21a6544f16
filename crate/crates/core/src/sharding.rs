//! Round-scoped partition of participants into masking cliques.
//!
//! The default [`ShardingMode::Balanced`] shuffles the sorted participant list
//! with a stream keyed by the round nonce and cuts it into chunks of `m`. A
//! trailing chunk shorter than `m` is merged into the previous one, so every
//! shard holds between `m` and `2m - 1` members (or all `N` when `N < m`).
//!
//! [`ShardingMode::HashMod`] keeps the literal `H(id || nonce) mod ⌈N/m⌉`
//! rule for comparison. Its shard sizes are unbalanced; shards of size one
//! are folded into a neighbour so every participant keeps a mask partner.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ParticipantId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShardError {
    #[error("need at least 2 participants, got {0}")]
    TooFewParticipants(usize),
    #[error("shard size must be at least 2, got {0}")]
    ShardTooSmall(usize),
    #[error("participant {0} is not in any shard")]
    UnknownParticipant(ParticipantId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardingMode {
    #[default]
    Balanced,
    HashMod,
}

/// Disjoint cover of the round's participants by cliques.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardAssignment {
    pub round: u64,
    pub m_target: usize,
    pub mode: ShardingMode,
    /// Each shard is sorted by participant id.
    pub shards: Vec<Vec<ParticipantId>>,
    #[serde(skip)]
    index: BTreeMap<ParticipantId, usize>,
}

impl ShardAssignment {
    fn build(round: u64, m_target: usize, mode: ShardingMode, mut shards: Vec<Vec<ParticipantId>>) -> Self {
        for s in &mut shards {
            s.sort_unstable();
        }
        let index = shards
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().map(move |&u| (u, i)))
            .collect();
        Self {
            round,
            m_target,
            mode,
            shards,
            index,
        }
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindexed(self) -> Self {
        Self::build(self.round, self.m_target, self.mode, self.shards)
    }

    pub fn participant_count(&self) -> usize {
        self.index.len()
    }

    pub fn participants(&self) -> impl Iterator<Item = ParticipantId> + '_ {
        self.index.keys().copied()
    }

    pub fn contains(&self, u: ParticipantId) -> bool {
        self.index.contains_key(&u)
    }

    pub fn shard_index(&self, u: ParticipantId) -> Option<usize> {
        self.index.get(&u).copied()
    }

    pub fn shard_of(&self, u: ParticipantId) -> Option<&[ParticipantId]> {
        self.shard_index(u).map(|i| self.shards[i].as_slice())
    }

    /// Every unordered intra-shard pair, each listed once as `(low, high)`.
    pub fn edges(&self) -> Vec<(ParticipantId, ParticipantId)> {
        let mut out = Vec::new();
        for shard in &self.shards {
            for (i, &a) in shard.iter().enumerate() {
                for &b in &shard[i + 1..] {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn max_shard_size(&self) -> usize {
        self.shards.iter().map(Vec::len).max().unwrap_or(0)
    }
}

fn nonce_seed(label: &[u8], round_nonce: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(label);
    h.update((round_nonce.len() as u64).to_le_bytes());
    h.update(round_nonce);
    h.finalize().into()
}

fn normalize(ids: &[ParticipantId], m: usize) -> Result<Vec<ParticipantId>, ShardError> {
    if m < 2 {
        return Err(ShardError::ShardTooSmall(m));
    }
    let set: BTreeSet<_> = ids.iter().copied().collect();
    if set.len() < 2 {
        return Err(ShardError::TooFewParticipants(set.len()));
    }
    Ok(set.into_iter().collect())
}

/// Balanced PRF-seeded shuffle-and-chunk partition.
pub fn assign_shards(
    ids: &[ParticipantId],
    round: u64,
    round_nonce: &[u8],
    m: usize,
) -> Result<ShardAssignment, ShardError> {
    assign_shards_with_mode(ids, round, round_nonce, m, ShardingMode::Balanced)
}

pub fn assign_shards_with_mode(
    ids: &[ParticipantId],
    round: u64,
    round_nonce: &[u8],
    m: usize,
    mode: ShardingMode,
) -> Result<ShardAssignment, ShardError> {
    let mut ids = normalize(ids, m)?;
    let shards = match mode {
        ShardingMode::Balanced => {
            let mut rng = ChaCha20Rng::from_seed(nonce_seed(b"dsfl/shard/v1", round_nonce));
            ids.shuffle(&mut rng);
            let mut shards: Vec<Vec<ParticipantId>> = ids.chunks(m).map(<[_]>::to_vec).collect();
            if shards.len() > 1 && shards.last().is_some_and(|s| s.len() < m) {
                let tail = shards.pop().unwrap();
                shards.last_mut().unwrap().extend(tail);
            }
            shards
        }
        ShardingMode::HashMod => hash_mod_shards(&ids, round_nonce, m),
    };
    Ok(ShardAssignment::build(round, m, mode, shards))
}

fn hash_mod_shards(ids: &[ParticipantId], round_nonce: &[u8], m: usize) -> Vec<Vec<ParticipantId>> {
    let n_shards = ids.len().div_ceil(m) as u64;
    let mut buckets: Vec<Vec<ParticipantId>> = vec![Vec::new(); n_shards as usize];
    for &u in ids {
        let mut h = Sha256::new();
        h.update(b"dsfl/shard-hashmod/v1");
        h.update(u.0.to_le_bytes());
        h.update(round_nonce);
        let d = h.finalize();
        let word = u64::from_le_bytes(d[..8].try_into().unwrap());
        buckets[(word % n_shards) as usize].push(u);
    }
    let mut shards: Vec<Vec<ParticipantId>> = buckets.into_iter().filter(|b| !b.is_empty()).collect();
    // fold singletons into the smallest other shard
    while shards.len() > 1 {
        let Some(pos) = shards.iter().position(|s| s.len() == 1) else {
            break;
        };
        let lone = shards.remove(pos);
        let target = shards
            .iter()
            .enumerate()
            .min_by_key(|(_, s)| s.len())
            .map(|(i, _)| i)
            .unwrap();
        shards[target].extend(lone);
    }
    shards
}

/// `u`'s shard without `u` itself.
pub fn shard_neighbors(
    assignment: &ShardAssignment,
    u: ParticipantId,
) -> Result<Vec<ParticipantId>, ShardError> {
    let shard = assignment
        .shard_of(u)
        .ok_or(ShardError::UnknownParticipant(u))?;
    Ok(shard.iter().copied().filter(|&v| v != u).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn ids(n: u32) -> Vec<ParticipantId> {
        (0..n).map(ParticipantId).collect()
    }

    fn sizes(a: &ShardAssignment) -> Vec<usize> {
        let mut s: Vec<_> = a.shards.iter().map(Vec::len).collect();
        s.sort_unstable();
        s
    }

    fn check_cover(a: &ShardAssignment, n: u32) {
        let mut all: Vec<_> = a.shards.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, ids(n));
    }

    #[test]
    fn exact_and_remainder_sizes() {
        let a = assign_shards(&ids(40), 0, b"n", 20).unwrap();
        assert_eq!(sizes(&a), vec![20, 20]);
        let a = assign_shards(&ids(41), 0, b"n", 20).unwrap();
        assert_eq!(sizes(&a), vec![20, 21]);
        let a = assign_shards(&ids(10), 0, b"n", 20).unwrap();
        assert_eq!(sizes(&a), vec![10]);
        let a = assign_shards(&ids(59), 0, b"n", 20).unwrap();
        assert_eq!(sizes(&a), vec![20, 39]);
    }

    #[test]
    fn sizes_and_cover_invariants() {
        for n in 2..120u32 {
            for m in [2usize, 3, 4, 5, 7, 20] {
                let a = assign_shards(&ids(n), 1, &n.to_le_bytes(), m).unwrap();
                check_cover(&a, n);
                for s in &a.shards {
                    if (n as usize) < m {
                        assert_eq!(s.len(), n as usize);
                    } else {
                        assert!(s.len() >= m.max(2) && s.len() < 2 * m, "n={n} m={m} {s:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert_eq!(
            assign_shards(&ids(1), 0, b"n", 2).unwrap_err(),
            ShardError::TooFewParticipants(1)
        );
        // duplicates collapse
        let dup = vec![ParticipantId(3), ParticipantId(3)];
        assert_eq!(assign_shards(&dup, 0, b"n", 2).unwrap_err(), ShardError::TooFewParticipants(1));
        assert_eq!(assign_shards(&ids(5), 0, b"n", 1).unwrap_err(), ShardError::ShardTooSmall(1));
    }

    #[test]
    fn determinism_and_nonce_sensitivity() {
        let a = assign_shards(&ids(40), 0, b"round-0", 20).unwrap();
        let b = assign_shards(&ids(40), 0, b"round-0", 20).unwrap();
        assert_eq!(a, b);
        // input order does not matter
        let mut rev = ids(40);
        rev.reverse();
        assert_eq!(assign_shards(&rev, 0, b"round-0", 20).unwrap(), a);
        let mut distinct = 0;
        for t in 0u64..100 {
            let x = assign_shards(&ids(40), t, &t.to_le_bytes(), 20).unwrap();
            let y = assign_shards(&ids(40), t + 1, &(t + 1).to_le_bytes(), 20).unwrap();
            if x.shards != y.shards {
                distinct += 1;
            }
        }
        assert_eq!(distinct, 100);
    }

    #[test]
    fn neighbors() {
        let a = ShardAssignment::build(
            0,
            3,
            ShardingMode::Balanced,
            vec![vec![ParticipantId(0), ParticipantId(1), ParticipantId(2)]],
        );
        assert_eq!(
            shard_neighbors(&a, ParticipantId(0)).unwrap(),
            vec![ParticipantId(1), ParticipantId(2)]
        );
        assert_eq!(
            shard_neighbors(&a, ParticipantId(9)).unwrap_err(),
            ShardError::UnknownParticipant(ParticipantId(9))
        );
    }

    #[test]
    fn neighborhood_is_irreflexive_and_symmetric() {
        let a = assign_shards(&ids(60), 4, b"sym", 7).unwrap();
        let nb: HashMap<_, Vec<_>> = ids(60)
            .into_iter()
            .map(|u| (u, shard_neighbors(&a, u).unwrap()))
            .collect();
        for (u, ns) in &nb {
            assert!(!ns.contains(u));
            assert!(!ns.is_empty() && ns.len() <= 2 * 7 - 2);
            for v in ns {
                assert!(nb[v].contains(u));
            }
        }
    }

    #[test]
    fn edge_count_matches_clique_union() {
        for n in [20u32, 40, 100, 200] {
            let a = assign_shards(&ids(n), 0, b"edges", 20).unwrap();
            let closed: usize = a.shards.iter().map(|s| s.len() * (s.len() - 1) / 2).sum();
            assert_eq!(a.edges().len(), closed);
            assert_eq!(closed, n as usize * 19 / 2);
        }
    }

    #[test]
    fn shuffle_shapes_are_uniform() {
        // N = 6, m = 3: the 10 ways to split 6 ids into two unlabeled triples
        // should each appear with frequency 1/10. At 10^5 trials a 5% window
        // is about 5 standard deviations.
        let trials = 100_000;
        let mut counts: HashMap<Vec<ParticipantId>, usize> = HashMap::new();
        for t in 0u64..trials {
            let a = assign_shards(&ids(6), t, &t.to_le_bytes(), 3).unwrap();
            let key = a.shard_of(ParticipantId(0)).unwrap().to_vec();
            *counts.entry(key).or_default() += 1;
        }
        assert_eq!(counts.len(), 10);
        let expected = trials as f64 / 10.0;
        for c in counts.values() {
            assert!((*c as f64 - expected).abs() / expected < 0.05, "{c}");
        }
    }

    #[test]
    fn hash_mod_mode_covers_without_singletons() {
        for t in 0u64..200 {
            let a = assign_shards_with_mode(&ids(41), t, &t.to_le_bytes(), 20, ShardingMode::HashMod).unwrap();
            check_cover(&a, 41);
            assert!(a.shards.iter().all(|s| s.len() >= 2));
        }
        let a = assign_shards_with_mode(&ids(2), 0, b"x", 2, ShardingMode::HashMod).unwrap();
        assert_eq!(sizes(&a), vec![2]);
    }

    #[test]
    fn serde_round_trip_reindexes() {
        let a = assign_shards(&ids(9), 2, b"s", 3).unwrap();
        let json = serde_json::to_string(&a).unwrap();
        let back: ShardAssignment = serde_json::from_str::<ShardAssignment>(&json).unwrap().reindexed();
        assert_eq!(back, a);
        assert_eq!(back.participant_count(), 9);
    }
}
