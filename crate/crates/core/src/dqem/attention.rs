//! Top-K attention over cluster centres and the entropy-based diversity
//! loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, softmax, top_k_indices, FeatVec, SeededRng};

use super::kmeans::ClusterSet;

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        SquareMatrix { n, data }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::arg("matrix rows must form a square"));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projection matrix entry".into()));
        }
        Ok(SquareMatrix { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scaled(&self, s: f64) -> Self {
        SquareMatrix {
            n: self.n,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `M·v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.data.chunks_exact(self.n).map(|row| dot(row, v)).collect()
    }

    /// `Mᵀ·v`.
    pub fn mul_t_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (row, vi) in self.data.chunks_exact(self.n).zip(v) {
            out.iter_mut().zip(row).for_each(|(o, m)| *o += vi * m);
        }
        out
    }
}

impl TryFrom<Vec<Vec<f64>>> for SquareMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        SquareMatrix::from_rows(rows)
    }
}

impl From<SquareMatrix> for Vec<Vec<f64>> {
    fn from(m: SquareMatrix) -> Self {
        m.data.chunks_exact(m.n).map(<[f64]>::to_vec).collect()
    }
}

/// Query and key projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPair {
    pub w_q: SquareMatrix,
    pub w_k: SquareMatrix,
}

impl ProjectionPair {
    pub fn identity(d: usize) -> Self {
        ProjectionPair {
            w_q: SquareMatrix::identity(d),
            w_k: SquareMatrix::identity(d),
        }
    }

    /// Identity plus i.i.d. Gaussian noise of the given scale.
    pub fn perturbed_identity(d: usize, noise: f64, rng: &mut SeededRng) -> Self {
        let mut p = ProjectionPair::identity(d);
        for v in p.w_q.as_mut_slice().iter_mut() {
            *v += noise * rng.normal();
        }
        for v in p.w_k.as_mut_slice().iter_mut() {
            *v += noise * rng.normal();
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.w_q.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_q.dim() != self.w_k.dim() {
            return Err(Error::arg("W_q and W_k differ in size"));
        }
        Ok(())
    }

    /// Number of free parameters (both matrices).
    pub fn n_params(&self) -> usize {
        2 * self.w_q.dim() * self.w_q.dim()
    }

    pub fn param(&self, i: usize) -> f64 {
        let half = self.w_q.as_slice().len();
        if i < half {
            self.w_q.as_slice()[i]
        } else {
            self.w_k.as_slice()[i - half]
        }
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        let half = self.w_q.as_slice().len();
        if i < half {
            self.w_q.as_mut_slice()[i] = v;
        } else {
            self.w_k.as_mut_slice()[i - half] = v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxDomain {
    /// Weights are a softmax over the selected top-k scores only.
    #[default]
    Selected,
    /// Weights are the full softmax restricted to the selected entries; they
    /// sum to less than one when `top_k < K`.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionOptions {
    /// Divide scores by `√d`.
    pub scale_scores: bool,
    pub softmax_domain: SoftmaxDomain,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        AttentionOptions {
            scale_scores: true,
            softmax_domain: SoftmaxDomain::Selected,
        }
    }
}

/// Output of one top-k aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    /// One score per candidate centre.
    pub scores: Vec<f64>,
    /// Cluster index each score belongs to.
    pub cluster_ids: Vec<usize>,
    /// Positions into `scores`, best first.
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    pub aggregated: FeatVec,
    pub diversity_loss: f64,
    /// No candidate centres: `aggregated` is the input query.
    pub degenerate: bool,
}

impl AttentionResult {
    /// Largest selected weight; zero for a degenerate result.
    pub fn concentration(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }

    /// Position in `scores` of the highest-weighted selected candidate.
    pub fn top(&self) -> Option<usize> {
        self.selected.first().copied()
    }
}

/// `A_k = (W_q q)ᵀ (W_k μ_k)`, optionally divided by `√d`.
pub fn attention_scores<C: AsRef<[f64]>>(
    q: &[f64],
    centers: &[C],
    proj: &ProjectionPair,
    scale_scores: bool,
) -> Result<Vec<f64>> {
    let d = q.len();
    if proj.w_q.dim() != d || proj.w_k.dim() != d {
        return Err(Error::arg(format!(
            "query has dimension {d}, projections are {}x{}",
            proj.w_q.dim(),
            proj.w_q.dim()
        )));
    }
    if centers.iter().any(|c| c.as_ref().len() != d) {
        return Err(Error::arg("cluster centre dimension differs from query"));
    }
    // (W_q q)ᵀ W_k μ = (W_kᵀ W_q q)ᵀ μ
    let u = proj.w_k.mul_t_vec(&proj.w_q.mul_vec(q));
    let s = if scale_scores {
        1.0 / (d as f64).sqrt()
    } else {
        1.0
    };
    Ok(centers.iter().map(|c| s * dot(&u, c.as_ref())).collect())
}

/// Entropy of `softmax(scores)`; lies in `[0, ln K]`.
pub fn diversity_loss(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let lse = log_sum_exp(scores);
    let mean: f64 = scores.iter().map(|a| (a - lse).exp() * a).sum();
    // H = lse - Σ p·A; clamp rounding at the two ends
    (lse - mean).clamp(0.0, (scores.len() as f64).ln())
}

/// `∂H/∂A_j = -p_j (A_j - Σ_k p_k A_k)`.
pub fn diversity_loss_grad(scores: &[f64]) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let lse = log_sum_exp(scores);
    let p: Vec<f64> = scores.iter().map(|a| (a - lse).exp()).collect();
    let mean: f64 = p.iter().zip(scores).map(|(pk, a)| pk * a).sum();
    p.iter().zip(scores).map(|(pj, a)| -pj * (a - mean)).collect()
}

/// Top-k attention over an explicit candidate pool. `ids` labels each centre.
pub(crate) fn aggregate_pool(
    q: &[f64],
    centers: &[&FeatVec],
    ids: Vec<usize>,
    proj: &ProjectionPair,
    top_k: usize,
    opts: AttentionOptions,
) -> Result<AttentionResult> {
    if top_k == 0 {
        return Err(Error::arg("top_k must be at least 1"));
    }
    if centers.is_empty() {
        return Ok(AttentionResult {
            scores: Vec::new(),
            cluster_ids: Vec::new(),
            selected: Vec::new(),
            weights: Vec::new(),
            aggregated: FeatVec::new(q.to_vec())?,
            diversity_loss: 0.0,
            degenerate: true,
        });
    }
    let scores = attention_scores(q, centers, proj, opts.scale_scores)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("attention score".into()));
    }
    let k = top_k.min(scores.len());
    let selected = top_k_indices(&scores, k)?;
    let weights = match opts.softmax_domain {
        SoftmaxDomain::Selected => {
            let picked: Vec<f64> = selected.iter().map(|&i| scores[i]).collect();
            softmax(&picked)?
        }
        SoftmaxDomain::Full => {
            let p = softmax(&scores)?;
            selected.iter().map(|&i| p[i]).collect()
        }
    };
    let mut agg = vec![0.0; q.len()];
    for (&i, w) in selected.iter().zip(&weights) {
        agg.iter_mut()
            .zip(centers[i].iter())
            .for_each(|(a, m)| *a += w * m);
    }
    let diversity_loss = diversity_loss(&scores);
    Ok(AttentionResult {
        scores,
        cluster_ids: ids,
        selected,
        weights,
        aggregated: FeatVec::new(agg)?,
        diversity_loss,
        degenerate: false,
    })
}

/// Scores every non-empty cluster, keeps the best `top_k` (clamped to the
/// number of non-empty clusters) and returns their softmax-weighted mean.
/// The diversity loss is taken over all non-empty cluster scores.
pub fn aggregate_top_k(
    q: &[f64],
    clusters: &ClusterSet,
    proj: &ProjectionPair,
    top_k: usize,
    opts: AttentionOptions,
) -> Result<AttentionResult> {
    let (ids, centers): (Vec<usize>, Vec<&FeatVec>) = clusters.non_empty().unzip();
    aggregate_pool(q, &centers, ids, proj, top_k, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dqem::kmeans::ClusterSet;
    use proptest::prelude::*;

    fn rand_vec(rng: &mut SeededRng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.normal()).collect()
    }

    fn rand_matrix(rng: &mut SeededRng, d: usize) -> SquareMatrix {
        SquareMatrix::from_rows((0..d).map(|_| rand_vec(rng, d)).collect()).unwrap()
    }

    fn clusters_from(centers: Vec<Vec<f64>>) -> ClusterSet {
        ClusterSet::from_centers(
            centers
                .into_iter()
                .map(|c| FeatVec::new(c).unwrap())
                .collect(),
        )
    }

    #[test]
    fn identity_scores_unscaled() {
        let p = ProjectionPair::identity(3);
        let s = attention_scores(
            &[1.0, 0.0, 0.0],
            &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            &p,
            false,
        )
        .unwrap();
        assert_eq!(s, vec![1.0, 0.0]);
    }

    #[test]
    fn doubling_w_q_doubles_scores() {
        let mut rng = SeededRng::new(3);
        let p = ProjectionPair {
            w_q: rand_matrix(&mut rng, 5),
            w_k: rand_matrix(&mut rng, 5),
        };
        let p2 = ProjectionPair {
            w_q: p.w_q.scaled(2.0),
            w_k: p.w_k.clone(),
        };
        let q = rand_vec(&mut rng, 5);
        let c: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, 5)).collect();
        let a = attention_scores(&q, &c, &p, true).unwrap();
        let b = attention_scores(&q, &c, &p2, true).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn scores_match_triple_loop() {
        let mut rng = SeededRng::new(8);
        let d = 8;
        let p = ProjectionPair {
            w_q: rand_matrix(&mut rng, d),
            w_k: rand_matrix(&mut rng, d),
        };
        let q = rand_vec(&mut rng, d);
        let centers: Vec<Vec<f64>> = (0..6).map(|_| rand_vec(&mut rng, d)).collect();
        let got = attention_scores(&q, &centers, &p, true).unwrap();
        for (k, mu) in centers.iter().enumerate() {
            let mut wq = vec![0.0; d];
            let mut wk = vec![0.0; d];
            for i in 0..d {
                for j in 0..d {
                    wq[i] += p.w_q.get(i, j) * q[j];
                    wk[i] += p.w_k.get(i, j) * mu[j];
                }
            }
            let mut a = 0.0;
            for i in 0..d {
                a += wq[i] * wk[i];
            }
            a /= (d as f64).sqrt();
            assert!((got[k] - a).abs() < 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = ProjectionPair::identity(3);
        assert!(attention_scores(&[1.0, 0.0], &[vec![1.0, 0.0]], &p, true).is_err());
        assert!(attention_scores(&[1.0, 0.0, 0.0], &[vec![1.0, 0.0]], &p, true).is_err());
    }

    #[test]
    fn equal_scores_average_the_centres() {
        // orthogonal query: every score is zero
        let cs = clusters_from(vec![
            vec![0.0, 1.0, 0.0],
            vec![0.0, 3.0, 0.0],
            vec![0.0, -1.0, 2.0],
        ]);
        let q = [1.0, 0.0, 0.0];
        let r = aggregate_top_k(&q, &cs, &ProjectionPair::identity(3), 3, Default::default())
            .unwrap();
        let want = [0.0, 1.0, 2.0 / 3.0];
        for (a, b) in r.aggregated.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((r.diversity_loss - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dominant_score_saturates() {
        let cs = clusters_from(vec![vec![50.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]);
        let opts = AttentionOptions {
            scale_scores: false,
            ..Default::default()
        };
        let r = aggregate_top_k(&[1.0, 0.0], &cs, &ProjectionPair::identity(2), 3, opts).unwrap();
        assert!((r.aggregated[0] - 50.0).abs() < 1e-12 * 50.0);
        assert!(r.aggregated[1].abs() < 1e-12);
        assert_eq!(r.selected[0], 0);
    }

    #[test]
    fn matches_composed_primitives() {
        let mut rng = SeededRng::new(19);
        let d = 6;
        let p = ProjectionPair {
            w_q: rand_matrix(&mut rng, d),
            w_k: rand_matrix(&mut rng, d),
        };
        let q = rand_vec(&mut rng, d);
        let centers: Vec<Vec<f64>> = (0..6).map(|_| rand_vec(&mut rng, d)).collect();
        let cs = clusters_from(centers.clone());
        let r = aggregate_top_k(&q, &cs, &p, 4, Default::default()).unwrap();

        let scores = attention_scores(&q, &centers, &p, true).unwrap();
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let top = &order[..4];
        let m = top.iter().map(|&i| scores[i]).fold(f64::MIN, f64::max);
        let e: Vec<f64> = top.iter().map(|&i| (scores[i] - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut want = vec![0.0; d];
        for (j, &i) in top.iter().enumerate() {
            for t in 0..d {
                want[t] += e[j] / z * centers[i][t];
            }
        }
        assert_eq!(r.selected, top.to_vec());
        for (a, b) in r.aggregated.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_domain_weights_do_not_renormalise() {
        let cs = clusters_from(vec![vec![1.0], vec![2.0], vec![3.0]]);
        let opts = AttentionOptions {
            scale_scores: false,
            softmax_domain: SoftmaxDomain::Full,
        };
        let r = aggregate_top_k(&[1.0], &cs, &ProjectionPair::identity(1), 2, opts).unwrap();
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.selected, vec![2, 1]);
        assert!((r.weights[0] - p[2]).abs() < 1e-15);
        assert!((r.weights[1] - p[1]).abs() < 1e-15);
    }

    #[test]
    fn no_clusters_passes_query_through() {
        let cs = ClusterSet::from_centers(Vec::new());
        let r = aggregate_top_k(&[0.3, 0.4], &cs, &ProjectionPair::identity(2), 4, Default::default())
            .unwrap();
        assert!(r.degenerate);
        assert_eq!(r.aggregated.as_slice(), &[0.3, 0.4]);
    }

    #[test]
    fn top_k_clamped_to_available_clusters() {
        let cs = clusters_from(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let r = aggregate_top_k(&[1.0, 1.0], &cs, &ProjectionPair::identity(2), 4, Default::default())
            .unwrap();
        assert_eq!(r.selected.len(), 2);
    }

    #[test]
    fn diversity_examples() {
        assert!((diversity_loss(&[0.7; 6]) - 6f64.ln()).abs() < 1e-12);
        assert!((6f64.ln() - 1.791759).abs() < 1e-6);
        assert!(diversity_loss(&[20.0, 0.0, 0.0]) < 1e-6);
        assert!(diversity_loss_grad(&[1.5; 5]).iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn diversity_matches_two_pass() {
        let mut rng = SeededRng::new(4);
        for _ in 0..50 {
            let s = rand_vec(&mut rng, 7);
            let m = s.iter().copied().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|a| (a - m).exp()).sum();
            let h: f64 = -s
                .iter()
                .map(|a| {
                    let p = (a - m).exp() / z;
                    p * p.ln()
                })
                .sum::<f64>();
            assert!((diversity_loss(&s) - h).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn diversity_in_range(s in prop::collection::vec(-40.0f64..40.0, 1..16)) {
            let h = diversity_loss(&s);
            prop_assert!(h >= 0.0 && h <= (s.len() as f64).ln() + 1e-15);
        }

        #[test]
        fn gradient_sums_to_zero(s in prop::collection::vec(-10.0f64..10.0, 1..16)) {
            let g = diversity_loss_grad(&s);
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }

        #[test]
        fn score_shift_leaves_aggregate_unchanged(
            raw in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..7),
            shift in -5.0f64..5.0,
        ) {
            // shift scores by adding a component orthogonal to the centres
            let centers: Vec<Vec<f64>> = raw.iter().map(|c| {
                let mut v = c.clone();
                v.push(1.0);
                v
            }).collect();
            let cs = clusters_from(centers);
            let q0 = [0.4, -0.2, 0.9, 0.0];
            let q1 = [0.4, -0.2, 0.9, shift];
            let opts = AttentionOptions { scale_scores: false, ..Default::default() };
            let p = ProjectionPair::identity(4);
            let a = aggregate_top_k(&q0, &cs, &p, 2, opts).unwrap();
            let b = aggregate_top_k(&q1, &cs, &p, 2, opts).unwrap();
            prop_assert_eq!(&a.selected, &b.selected);
            for (x, y) in a.weights.iter().zip(&b.weights) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in a.aggregated.iter().zip(b.aggregated.iter()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn monotone_transform_keeps_selection(
            s in prop::collection::vec(-3.0f64..3.0, 1..10),
            k in 1usize..10,
        ) {
            let k = k.min(s.len());
            let t: Vec<f64> = s.iter().map(|v| (2.0 * v).exp() + 3.0).collect();
            prop_assert_eq!(top_k_indices(&s, k).unwrap(), top_k_indices(&t, k).unwrap());
        }
    }
}
