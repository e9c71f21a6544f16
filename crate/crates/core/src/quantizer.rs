//! Stochastic rounding of real gradients onto a bounded integer grid.
//!
//! A component `y` is clipped to `[-c, c]`, scaled to `z = y·S`, and rounded
//! to `floor(z) + 1` with probability `frac(z)`, otherwise to `floor(z)`.
//! The expectation of the result is exactly `z`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fieldvec::{FieldError, SignedQuantized, MAX_SIGNED_BOUND, MODULUS};

pub const DEFAULT_SCALE: u64 = 1 << 15;
pub const DEFAULT_CLIP: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error("scale {0} must be a positive power of two")]
    BadScale(u64),
    #[error("clip {0} must be positive and finite")]
    BadClip(f64),
    #[error("bound {bound} must be below p/2")]
    BoundTooLarge { bound: u64 },
    #[error("gradient component {index} is not finite")]
    NonFinite { index: usize },
    #[error("gradient must be non-empty")]
    Empty,
    #[error("cannot average over zero contributors")]
    NoContributors,
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Quantization parameters shared by every participant in a round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuantConfigRepr", into = "QuantConfigRepr")]
pub struct QuantConfig {
    scale: u64,
    clip: f64,
    bound: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantConfigRepr {
    scale: u64,
    clip: f64,
}

impl TryFrom<QuantConfigRepr> for QuantConfig {
    type Error = QuantError;
    fn try_from(r: QuantConfigRepr) -> Result<Self, QuantError> {
        QuantConfig::new(r.scale, r.clip)
    }
}

impl From<QuantConfig> for QuantConfigRepr {
    fn from(c: QuantConfig) -> Self {
        QuantConfigRepr {
            scale: c.scale,
            clip: c.clip,
        }
    }
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig::new(DEFAULT_SCALE, DEFAULT_CLIP).expect("defaults are valid")
    }
}

impl QuantConfig {
    pub fn new(scale: u64, clip: f64) -> Result<Self, QuantError> {
        if scale == 0 || !scale.is_power_of_two() {
            return Err(QuantError::BadScale(scale));
        }
        if !(clip.is_finite() && clip > 0.0) {
            return Err(QuantError::BadClip(clip));
        }
        let bound = (clip * scale as f64).ceil();
        if bound >= MAX_SIGNED_BOUND as f64 {
            return Err(QuantError::BoundTooLarge { bound: bound as u64 });
        }
        Ok(Self {
            scale,
            clip,
            bound: bound as u64,
        })
    }

    pub fn scale(&self) -> u64 {
        self.scale
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    /// `B = ceil(c·S)`, the largest magnitude a quantized component can take.
    pub fn bound(&self) -> u64 {
        self.bound
    }

    pub fn check_overflow(&self, n: u64) -> OverflowVerdict {
        check_overflow_bound(n, self.bound)
    }
}

/// Stochastically quantizes `g`, drawing one uniform per component.
pub fn quantize_vector<R: Rng + ?Sized>(
    g: &[f64],
    cfg: &QuantConfig,
    rng: &mut R,
) -> Result<SignedQuantized, QuantError> {
    if g.is_empty() {
        return Err(QuantError::Empty);
    }
    let scale = cfg.scale as f64;
    let mut out = Vec::with_capacity(g.len());
    for (index, &y) in g.iter().enumerate() {
        if !y.is_finite() {
            return Err(QuantError::NonFinite { index });
        }
        let z = y.clamp(-cfg.clip, cfg.clip) * scale;
        let floor = z.floor();
        let eps = z - floor;
        let u: f64 = rng.gen();
        let q = if u < eps { floor + 1.0 } else { floor };
        out.push(q as i64);
    }
    Ok(SignedQuantized::new(out, cfg.bound)?)
}

/// Divides an aggregated integer sum by `S · n_contributors`.
pub fn dequantize_sum(
    agg: &SignedQuantized,
    n_contributors: usize,
    cfg: &QuantConfig,
) -> Result<Vec<f64>, QuantError> {
    if n_contributors == 0 {
        return Err(QuantError::NoContributors);
    }
    let denom = cfg.scale as f64 * n_contributors as f64;
    Ok(agg.elems().iter().map(|&v| v as f64 / denom).collect())
}

/// Outcome of the overflow-prevention check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverflowVerdict {
    pub accepted: bool,
    /// `p / (n·B)`.
    pub margin: f64,
    /// `n·B`, the largest possible magnitude of the integer sum.
    pub required: u128,
}

impl OverflowVerdict {
    /// Margin under the stricter `p > n·m·B` form, which carries an extra
    /// shard-size factor.
    pub fn shard_scaled_margin(&self, shard_size: u64) -> f64 {
        self.margin / shard_size as f64
    }
}

/// Accepts iff `n` values of magnitude at most `bound` can be summed without
/// leaving the unambiguous signed range of the field.
///
/// Signed sums occupy `[-n·B, n·B]`, so acceptance requires `2·n·B < p`
/// (equivalently `n·B <= (p-1)/2`), which implies `n·B < p`.
pub fn check_overflow_bound(n: u64, bound: u64) -> OverflowVerdict {
    let required = n as u128 * bound as u128;
    let margin = if required == 0 {
        f64::INFINITY
    } else {
        MODULUS as f64 / required as f64
    };
    OverflowVerdict {
        accepted: required <= MAX_SIGNED_BOUND as u128,
        margin,
        required,
    }
}
