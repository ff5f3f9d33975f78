//! Deterministic numeric kernels shared by the rest of the crate.
//!
//! Everything here works in `f64`. Tie-breaking is always "lower index
//! wins" so downstream selections are reproducible.

use std::ops::Deref;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite, fixed-length feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatVec(Vec<f64>);

impl FeatVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature entry {i} is {}",
                values[i]
            )));
        }
        Ok(FeatVec(values))
    }

    pub fn zeros(d: usize) -> Self {
        FeatVec(vec![0.0; d])
    }

    /// Unit basis vector `e_i` of length `d`.
    pub fn basis(d: usize, i: usize) -> Self {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        FeatVec(v)
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        FeatVec(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn scaled(&self, s: f64) -> FeatVec {
        FeatVec(self.0.iter().map(|v| v * s).collect())
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, s: f64, other: &[f64]) -> FeatVec {
        debug_assert_eq!(self.0.len(), other.len());
        FeatVec(self.0.iter().zip(other).map(|(a, b)| a + s * b).collect())
    }
}

impl Deref for FeatVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for FeatVec {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for FeatVec {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        FeatVec::new(v)
    }
}

impl From<FeatVec> for Vec<f64> {
    fn from(v: FeatVec) -> Vec<f64> {
        v.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let t = x - y;
            t * t
        })
        .sum()
}

/// Numerically stable `ln Σ exp(s_i)`.
pub fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    max + sum.ln()
}

pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::arg("softmax of an empty score array"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::arg("softmax input contains a non-finite score"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Indices of the `k` largest scores, best first. Equal scores keep their
/// original order.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::arg(format!(
            "top-k with k = {k} over {} scores",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps lower indices first among ties
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    Ok(order)
}

/// Squared Euclidean distances, `out[i][k] = |points[i] - centers[k]|^2`.
pub fn pairwise_sq_dist<P, C>(points: &[P], centers: &[C]) -> Result<Vec<Vec<f64>>>
where
    P: AsRef<[f64]>,
    C: AsRef<[f64]>,
{
    let dim = points
        .first()
        .map(|p| p.as_ref().len())
        .or_else(|| centers.first().map(|c| c.as_ref().len()));
    if let Some(d) = dim {
        let bad = points
            .iter()
            .map(AsRef::as_ref)
            .chain(centers.iter().map(AsRef::as_ref))
            .any(|v| v.len() != d);
        if bad {
            return Err(Error::arg("pairwise distance over mixed dimensionality"));
        }
    }
    Ok(points
        .iter()
        .map(|p| {
            centers
                .iter()
                .map(|c| sq_dist(p.as_ref(), c.as_ref()))
                .collect()
        })
        .collect())
}

/// Seeded, platform-independent random stream.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Child stream keyed by a purpose string.
    pub fn derive(root: u64, purpose: &str) -> Self {
        SeededRng::new(derive_seed(root, purpose))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform index in `0..n`; `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

/// Fixed 64-bit mix (splitmix64 finalizer).
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed from a root seed and a purpose label (FNV-1a over the label,
/// folded through [`mix64`]).
pub fn derive_seed(root: u64, purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(root ^ mix64(h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_empty_and_nan() {
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[0.9, 0.1, 0.5], 2).unwrap(), vec![0, 2]);
        assert_eq!(top_k_indices(&[0.5, 0.5, 0.1], 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k_indices(&[3.0, 1.0, 2.0], 3).unwrap(), vec![0, 2, 1]);
        assert!(top_k_indices(&[1.0], 0).is_err());
        assert!(top_k_indices(&[1.0], 2).is_err());
    }

    #[test]
    fn pairwise_examples() {
        let d = pairwise_sq_dist(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]).unwrap();
        assert_eq!(d, vec![vec![25.0]]);
        let d = pairwise_sq_dist(&[vec![1.5, -2.0]], &[vec![1.5, -2.0]]).unwrap();
        assert_eq!(d[0][0], 0.0);
        assert!(pairwise_sq_dist(&[vec![0.0]], &[vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn pairwise_matches_elementwise_loop() {
        let mut rng = SeededRng::new(11);
        let pts: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..5).map(|_| rng.normal()).collect())
            .collect();
        let ctr: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..5).map(|_| rng.normal()).collect())
            .collect();
        let got = pairwise_sq_dist(&pts, &ctr).unwrap();
        for i in 0..4 {
            for k in 0..3 {
                let mut acc = 0.0;
                for j in 0..5 {
                    acc += (pts[i][j] - ctr[k][j]) * (pts[i][j] - ctr[k][j]);
                }
                assert!((got[i][k] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn featvec_rejects_non_finite() {
        assert!(FeatVec::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(serde_json::from_str::<FeatVec>("[1.0, 2.0]").is_ok());
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = SeededRng::new(5);
        let mut b = SeededRng::new(5);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        assert_ne!(derive_seed(1, "scene"), derive_seed(1, "detect"));
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(
            s in prop::collection::vec(-30.0f64..30.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&s).unwrap();
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            let q = softmax(&shifted).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn full_top_k_is_permutation(s in prop::collection::vec(-5.0f64..5.0, 1..20)) {
            let mut idx = top_k_indices(&s, s.len()).unwrap();
            idx.sort_unstable();
            prop_assert_eq!(idx, (0..s.len()).collect::<Vec<_>>());
        }

        #[test]
        fn pairwise_symmetric(
            a in prop::collection::vec(-10.0f64..10.0, 3),
            b in prop::collection::vec(-10.0f64..10.0, 3),
        ) {
            let ab = pairwise_sq_dist(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();
            let ba = pairwise_sq_dist(&[b], &[a]).unwrap();
            prop_assert_eq!(ab[0][0], ba[0][0]);
        }
    }
}
