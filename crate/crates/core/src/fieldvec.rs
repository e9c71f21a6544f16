//! Arithmetic over the Mersenne prime field `p = 2^61 - 1` and fixed-length
//! vectors over it.
//!
//! Every protocol quantity (masked updates, masks, challenge vectors and the
//! aggregate) lives in this field. Reduction folds the high bits onto the low
//! bits using `2^61 ≡ 1 (mod p)` instead of dividing.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The field modulus, `2^61 - 1`.
pub const MODULUS: u64 = (1u64 << 61) - 1;

const MODULUS_BITS: u32 = 61;

/// Errors raised by field-vector operations.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FieldError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("field vectors must have positive dimension")]
    EmptyVector,
    #[error("value {0} is not a canonical field element")]
    NonCanonical(u64),
    #[error("signed bound {bound} must be below p/2")]
    BoundTooLarge { bound: u64 },
    #[error("element {index} has magnitude {magnitude} above bound {bound}")]
    OutOfBound {
        index: usize,
        magnitude: u64,
        bound: u64,
    },
    #[error("residue {residue} at index {index} lies outside the signed range for bound {bound}")]
    Overflow {
        index: usize,
        residue: u64,
        bound: u64,
    },
    #[error("encoded vector is truncated or has a bad length prefix")]
    MalformedBytes,
}

/// Folds a 128-bit value into its canonical residue mod `2^61 - 1`.
#[inline]
pub fn reduce_u128(mut x: u128) -> u64 {
    let p = MODULUS as u128;
    while x >> MODULUS_BITS != 0 {
        x = (x & p) + (x >> MODULUS_BITS);
    }
    let r = x as u64;
    if r >= MODULUS {
        r - MODULUS
    } else {
        r
    }
}

/// Deterministic Miller-Rabin; the fixed base set is exact for all `u64`.
pub fn is_prime_u64(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for &b in &BASES {
        if n.is_multiple_of(b) {
            return n == b;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    let mul = |a: u64, b: u64| ((a as u128 * b as u128) % n as u128) as u64;
    let pow = |mut base: u64, mut exp: u64| {
        let mut acc = 1u64;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = mul(acc, base);
            }
            base = mul(base, base);
            exp >>= 1;
        }
        acc
    };
    'witness: for &a in &BASES {
        let mut x = pow(a, d);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul(x, x);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Checks (once per process) that the compiled-in modulus is prime.
pub fn modulus_is_prime() -> bool {
    static CHECK: OnceLock<bool> = OnceLock::new();
    *CHECK.get_or_init(|| is_prime_u64(MODULUS))
}

/// A canonical element of `F_p`.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FieldElement(u64);

impl FieldElement {
    pub const ZERO: Self = Self(0);
    pub const ONE: Self = Self(1);

    /// Reduces an arbitrary `u64` into the field.
    #[inline]
    pub fn new(value: u64) -> Self {
        Self(reduce_u128(value as u128))
    }

    /// Accepts only already-canonical values.
    pub fn from_canonical(value: u64) -> Result<Self, FieldError> {
        if value < MODULUS {
            Ok(Self(value))
        } else {
            Err(FieldError::NonCanonical(value))
        }
    }

    #[inline]
    pub fn value(self) -> u64 {
        self.0
    }
}

impl fmt::Debug for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F({})", self.0)
    }
}

impl fmt::Display for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl Add for FieldElement {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        // both < 2^61 - 1, so the sum fits in 62 bits
        let s = self.0 + rhs.0;
        Self(if s >= MODULUS { s - MODULUS } else { s })
    }
}

impl AddAssign for FieldElement {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl Sub for FieldElement {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        if self.0 >= rhs.0 {
            Self(self.0 - rhs.0)
        } else {
            Self(self.0 + MODULUS - rhs.0)
        }
    }
}

impl SubAssign for FieldElement {
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl Neg for FieldElement {
    type Output = Self;
    fn neg(self) -> Self {
        Self::ZERO - self
    }
}

impl Mul for FieldElement {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        Self(reduce_u128(self.0 as u128 * rhs.0 as u128))
    }
}

/// A bounded vector of signed integers, the output of quantization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedQuantized {
    elems: Vec<i64>,
    bound: u64,
}

impl SignedQuantized {
    pub fn new(elems: Vec<i64>, bound: u64) -> Result<Self, FieldError> {
        if elems.is_empty() {
            return Err(FieldError::EmptyVector);
        }
        for (index, &e) in elems.iter().enumerate() {
            if e.unsigned_abs() > bound {
                return Err(FieldError::OutOfBound {
                    index,
                    magnitude: e.unsigned_abs(),
                    bound,
                });
            }
        }
        Ok(Self { elems, bound })
    }

    pub fn elems(&self) -> &[i64] {
        &self.elems
    }

    pub fn bound(&self) -> u64 {
        self.bound
    }

    pub fn dim(&self) -> usize {
        self.elems.len()
    }

    pub fn into_elems(self) -> Vec<i64> {
        self.elems
    }
}

/// A vector over `F_p` with fixed positive dimension.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FieldVector(Vec<FieldElement>);

impl fmt::Debug for FieldVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter().map(|e| e.0)).finish()
    }
}

impl FieldVector {
    pub fn new(elems: Vec<FieldElement>) -> Result<Self, FieldError> {
        if elems.is_empty() {
            return Err(FieldError::EmptyVector);
        }
        Ok(Self(elems))
    }

    /// Builds a vector from raw values, reducing each one.
    pub fn from_u64s(values: &[u64]) -> Result<Self, FieldError> {
        Self::new(values.iter().map(|&v| FieldElement::new(v)).collect())
    }

    pub fn zeros(dim: usize) -> Result<Self, FieldError> {
        Self::new(vec![FieldElement::ZERO; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn elems(&self) -> &[FieldElement] {
        &self.0
    }

    pub fn get(&self, i: usize) -> Option<FieldElement> {
        self.0.get(i).copied()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|e| e.0 == 0)
    }

    pub fn add_assign(&mut self, other: &FieldVector) -> Result<(), FieldError> {
        check_dims(self, other)?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += *b;
        }
        Ok(())
    }

    pub fn sub_assign(&mut self, other: &FieldVector) -> Result<(), FieldError> {
        check_dims(self, other)?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a -= *b;
        }
        Ok(())
    }

    /// Canonical byte form: `u32` little-endian dimension, then each element
    /// as an 8-byte little-endian word.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 * self.0.len());
        out.extend_from_slice(&(self.0.len() as u32).to_le_bytes());
        for e in &self.0 {
            out.extend_from_slice(&e.0.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FieldError> {
        let (prefix, body) = bytes.split_at_checked(4).ok_or(FieldError::MalformedBytes)?;
        let dim = u32::from_le_bytes(prefix.try_into().unwrap()) as usize;
        if body.len() != dim * 8 {
            return Err(FieldError::MalformedBytes);
        }
        let elems = body
            .chunks_exact(8)
            .map(|c| FieldElement::from_canonical(u64::from_le_bytes(c.try_into().unwrap())))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(elems)
    }
}

fn check_dims(a: &FieldVector, b: &FieldVector) -> Result<(), FieldError> {
    if a.dim() != b.dim() {
        return Err(FieldError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// Componentwise `(a + b) mod p`.
pub fn vec_add_mod(a: &FieldVector, b: &FieldVector) -> Result<FieldVector, FieldError> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

/// Componentwise `(a - b) mod p`.
pub fn vec_sub_mod(a: &FieldVector, b: &FieldVector) -> Result<FieldVector, FieldError> {
    let mut out = a.clone();
    out.sub_assign(b)?;
    Ok(out)
}

/// `Σ x[i]·alpha[i] mod p`.
///
/// Each product is reduced to 61 bits before accumulating into a `u128`, so
/// the accumulator cannot overflow for any dimension below `2^67`.
pub fn inner_product_mod(x: &FieldVector, alpha: &FieldVector) -> Result<FieldElement, FieldError> {
    check_dims(x, alpha)?;
    let acc: u128 = x
        .0
        .iter()
        .zip(&alpha.0)
        .map(|(a, b)| reduce_u128(a.0 as u128 * b.0 as u128) as u128)
        .sum();
    Ok(FieldElement(reduce_u128(acc)))
}

/// Largest bound for which the signed encoding is unambiguous.
pub const MAX_SIGNED_BOUND: u64 = (MODULUS - 1) / 2;

/// Maps signed integers into the field: negatives occupy the upper half.
pub fn encode_signed(v: &SignedQuantized) -> Result<FieldVector, FieldError> {
    if v.bound > MAX_SIGNED_BOUND {
        return Err(FieldError::BoundTooLarge { bound: v.bound });
    }
    FieldVector::new(
        v.elems
            .iter()
            .map(|&w| {
                if w >= 0 {
                    FieldElement(w as u64)
                } else {
                    FieldElement(MODULUS - w.unsigned_abs())
                }
            })
            .collect(),
    )
}

/// Inverse of [`encode_signed`]. Residues in the band `(bound, p - bound)`
/// cannot come from values of magnitude `<= bound` and raise
/// [`FieldError::Overflow`].
pub fn decode_signed(x: &FieldVector, bound: u64) -> Result<SignedQuantized, FieldError> {
    if bound > MAX_SIGNED_BOUND {
        return Err(FieldError::BoundTooLarge { bound });
    }
    let elems = x
        .0
        .iter()
        .enumerate()
        .map(|(index, e)| {
            let r = e.0;
            if r <= bound {
                Ok(r as i64)
            } else if r >= MODULUS - bound {
                Ok(-((MODULUS - r) as i64))
            } else {
                Err(FieldError::Overflow {
                    index,
                    residue: r,
                    bound,
                })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SignedQuantized { elems, bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    const P: u64 = MODULUS;

    // Wide-integer reference: plain `%` on u128, no Mersenne folding.
    fn oracle_add(a: u64, b: u64) -> u64 {
        ((a as u128 + b as u128) % P as u128) as u64
    }

    fn oracle_inner(x: &[u64], a: &[u64]) -> u64 {
        let mut acc: u128 = 0;
        for (xi, ai) in x.iter().zip(a) {
            acc = (acc + (*xi as u128) * (*ai as u128)) % P as u128;
        }
        acc as u64
    }

    fn fv(v: &[u64]) -> FieldVector {
        FieldVector::from_u64s(v).unwrap()
    }

    fn raw(v: &FieldVector) -> Vec<u64> {
        v.elems().iter().map(|e| e.value()).collect()
    }

    #[test]
    fn modulus_is_a_mersenne_prime() {
        assert!(modulus_is_prime());
        assert!(is_prime_u64(101));
        assert!(!is_prime_u64(MODULUS - 2));
        assert!(!is_prime_u64((1u64 << 62) - 1));
    }

    #[test]
    fn add_small_and_wrap() {
        assert_eq!(raw(&vec_add_mod(&fv(&[1, 2]), &fv(&[3, 4])).unwrap()), vec![4, 6]);
        assert_eq!(raw(&vec_add_mod(&fv(&[P - 1]), &fv(&[1])).unwrap()), vec![0]);
    }

    #[test]
    fn add_matches_wide_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = rng.gen_range(0..P);
            let b = rng.gen_range(0..P);
            let got = vec_add_mod(&fv(&[a]), &fv(&[b])).unwrap();
            assert_eq!(raw(&got), vec![oracle_add(a, b)]);
        }
    }

    #[test]
    fn sub_wraps_negative() {
        assert_eq!(raw(&vec_sub_mod(&fv(&[0]), &fv(&[1])).unwrap()), vec![P - 1]);
        let x = fv(&[5, P - 3, 77]);
        assert!(vec_sub_mod(&x, &x).unwrap().is_zero());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let err = vec_add_mod(&fv(&[1, 2]), &fv(&[1])).unwrap_err();
        assert_eq!(err, FieldError::DimensionMismatch { left: 2, right: 1 });
        assert!(vec_sub_mod(&fv(&[1]), &fv(&[1, 2])).is_err());
        assert!(inner_product_mod(&fv(&[1]), &fv(&[1, 2])).is_err());
        assert_eq!(FieldVector::new(vec![]).unwrap_err(), FieldError::EmptyVector);
    }

    #[test]
    fn inner_product_edge_cases() {
        let alpha = fv(&[P - 1, 12345, P - 7]);
        assert_eq!(inner_product_mod(&fv(&[0, 0, 0]), &alpha).unwrap(), FieldElement::ZERO);
        let ones = fv(&[1, 1, 1]);
        let expected = ((P - 1) as u128 + 12345 + (P - 7) as u128) % P as u128;
        assert_eq!(inner_product_mod(&ones, &alpha).unwrap().value(), expected as u64);
    }

    #[test]
    fn inner_product_matches_wide_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..200 {
            let d = rng.gen_range(1..300);
            let x: Vec<u64> = (0..d).map(|_| rng.gen_range(0..P)).collect();
            let a: Vec<u64> = (0..d).map(|_| rng.gen_range(0..P)).collect();
            assert_eq!(inner_product_mod(&fv(&x), &fv(&a)).unwrap().value(), oracle_inner(&x, &a));
        }
        // all-max entries stress the accumulator
        let x = vec![P - 1; 4096];
        assert_eq!(inner_product_mod(&fv(&x), &fv(&x)).unwrap().value(), oracle_inner(&x, &x));
    }

    #[test]
    fn closure_on_million_pairs() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..1_000_000 {
            let a = FieldElement::new(rng.gen_range(0..P));
            let b = FieldElement::new(rng.gen_range(0..P));
            assert!((a + b).value() < P);
            assert!((a - b).value() < P);
            let m = a * b;
            assert!(m.value() < P);
            assert_eq!(m.value() as u128, (a.value() as u128 * b.value() as u128) % P as u128);
        }
    }

    #[test]
    fn reduce_handles_full_u128() {
        assert_eq!(reduce_u128(u128::MAX), (u128::MAX % P as u128) as u64);
        assert_eq!(reduce_u128(P as u128), 0);
        assert_eq!(reduce_u128(2 * P as u128 + 5), 5);
    }

    #[test]
    fn signed_encoding_examples() {
        let v = SignedQuantized::new(vec![-1], 10).unwrap();
        assert_eq!(raw(&encode_signed(&v).unwrap()), vec![P - 1]);
        let v = SignedQuantized::new(vec![0, 5], 10).unwrap();
        assert_eq!(raw(&encode_signed(&v).unwrap()), vec![0, 5]);

        assert_eq!(decode_signed(&fv(&[P - 3]), 10).unwrap().elems(), &[-3]);
        assert_eq!(decode_signed(&fv(&[7]), 10).unwrap().elems(), &[7]);
        let mid = fv(&[P / 2 + 1]);
        assert!(matches!(decode_signed(&mid, 10), Err(FieldError::Overflow { index: 0, .. })));
    }

    #[test]
    fn signed_bound_limits() {
        let v = SignedQuantized::new(vec![1], MAX_SIGNED_BOUND + 1).unwrap();
        assert!(matches!(encode_signed(&v), Err(FieldError::BoundTooLarge { .. })));
        assert!(SignedQuantized::new(vec![11], 10).is_err());
        // extreme bound still round-trips
        let edge = MAX_SIGNED_BOUND as i64;
        let v = SignedQuantized::new(vec![edge, -edge, 0], MAX_SIGNED_BOUND).unwrap();
        assert_eq!(decode_signed(&encode_signed(&v).unwrap(), MAX_SIGNED_BOUND).unwrap(), v);
    }

    #[test]
    fn bytes_round_trip_and_reject_garbage() {
        let x = fv(&[1, P - 1, 42]);
        let b = x.to_bytes();
        assert_eq!(&b[..4], &3u32.to_le_bytes());
        assert_eq!(FieldVector::from_bytes(&b).unwrap(), x);
        assert!(FieldVector::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[4..12].copy_from_slice(&P.to_le_bytes());
        assert!(FieldVector::from_bytes(&bad).is_err());
    }

    fn elem() -> impl Strategy<Value = u64> {
        0..P
    }

    proptest! {
        #[test]
        fn add_is_commutative_and_associative(a in elem(), b in elem(), c in elem()) {
            let (a, b, c) = (fv(&[a]), fv(&[b]), fv(&[c]));
            prop_assert_eq!(vec_add_mod(&a, &b).unwrap(), vec_add_mod(&b, &a).unwrap());
            let l = vec_add_mod(&vec_add_mod(&a, &b).unwrap(), &c).unwrap();
            let r = vec_add_mod(&a, &vec_add_mod(&b, &c).unwrap()).unwrap();
            prop_assert_eq!(l, r);
        }

        #[test]
        fn sub_then_add_round_trips(a in prop::collection::vec(elem(), 1..16), seed in any::<u64>()) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let b: Vec<u64> = (0..a.len()).map(|_| rng.gen_range(0..P)).collect();
            let (a, b) = (fv(&a), fv(&b));
            prop_assert_eq!(vec_add_mod(&vec_sub_mod(&a, &b).unwrap(), &b).unwrap(), a);
        }

        #[test]
        fn signed_round_trip(bound in 1u64..=MAX_SIGNED_BOUND, seed in any::<u64>(), len in 1usize..32) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let b = bound as i64;
            let elems: Vec<i64> = (0..len).map(|_| rng.gen_range(-b..=b)).collect();
            let v = SignedQuantized::new(elems, bound).unwrap();
            prop_assert_eq!(decode_signed(&encode_signed(&v).unwrap(), bound).unwrap(), v);
        }

        #[test]
        fn inner_product_is_linear(len in 1usize..64, seed in any::<u64>()) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut draw = || fv(&(0..len).map(|_| rng.gen_range(0..P)).collect::<Vec<_>>());
            let (x, y, alpha) = (draw(), draw(), draw());
            let lhs = inner_product_mod(&vec_add_mod(&x, &y).unwrap(), &alpha).unwrap();
            let rhs = inner_product_mod(&x, &alpha).unwrap() + inner_product_mod(&y, &alpha).unwrap();
            prop_assert_eq!(lhs, rhs);
        }
    }
}
