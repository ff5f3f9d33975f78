//! Lightweight temporal fusion.
//!
//! On a fused frame each query is first blended with its counterpart from
//! the previous fused frame, then attends over the current clusters pooled
//! with the previous frame's clusters. The previous clusters are reused as
//! stored; no extra clustering happens for fusion.

use serde::{Deserialize, Serialize};

use crate::detect::{Detector, FrameOutput};
use crate::dqem::attention::aggregate_pool;
use crate::dqem::{AttentionOptions, AttentionResult, ClusterSet, ProjectionPair, QuerySet};
use crate::error::{Error, Result};
use crate::numerics::{norm, FeatVec};
use crate::scene::{BoxAttributes, Frame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalParams {
    pub alpha: f64,
    pub beta: f64,
    /// Frames between fusions.
    pub stride: usize,
    /// Frames per sequence.
    pub window: usize,
}

impl Default for TemporalParams {
    fn default() -> Self {
        TemporalParams {
            alpha: 0.4,
            beta: 0.6,
            stride: 2,
            window: 8,
        }
    }
}

impl TemporalParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", "must lie in [0, 1]"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be finite and >= 0"));
        }
        if self.stride == 0 {
            return Err(Error::config("stride", "must be >= 1"));
        }
        if self.window == 0 {
            return Err(Error::config("frames", "must be >= 1"));
        }
        Ok(())
    }

    pub fn is_fusion_frame(&self, t: usize) -> bool {
        t > 0 && t.is_multiple_of(self.stride)
    }
}

/// What a fused frame needs from the last fusion-eligible frame.
#[derive(Debug, Clone)]
pub struct TemporalState {
    pub prev_queries: QuerySet,
    pub prev_clusters: Vec<Option<ClusterSet>>,
    /// Decoded box per query, when the query decoded to an object.
    pub prev_boxes: Vec<Option<BoxAttributes>>,
    pub frame_index: usize,
}

impl TemporalState {
    fn capture(out: &FrameOutput, frame_index: usize) -> Self {
        let traces = &out.evolution.traces;
        TemporalState {
            prev_queries: out.evolution.queries.clone(),
            prev_clusters: traces.iter().map(|t| t.final_clusters.clone()).collect(),
            prev_boxes: traces
                .iter()
                .map(|t| t.is_object().then(|| *t.final_state()))
                .collect(),
            frame_index,
        }
    }
}

/// `α·q_cur + (1 − α)·q_prev`.
pub fn temporal_init(q_cur: &[f64], q_prev: &[f64], alpha: f64) -> Result<FeatVec> {
    if q_cur.len() != q_prev.len() {
        return Err(Error::arg("current and previous queries differ in dimension"));
    }
    FeatVec::new(
        q_cur
            .iter()
            .zip(q_prev)
            .map(|(c, p)| alpha * c + (1.0 - alpha) * p)
            .collect(),
    )
}

/// Top-k attention over the current cluster centres followed by the previous
/// frame's centres. Previous cluster ids are offset by the current `K`.
pub fn temporal_aggregate(
    q: &[f64],
    clusters_cur: &ClusterSet,
    clusters_prev: &ClusterSet,
    proj: &ProjectionPair,
    top_k: usize,
    opts: AttentionOptions,
) -> Result<AttentionResult> {
    let offset = clusters_cur.k();
    let (mut ids, mut centers): (Vec<usize>, Vec<&FeatVec>) = clusters_cur.non_empty().unzip();
    for (i, c) in clusters_prev.non_empty() {
        ids.push(offset + i);
        centers.push(c);
    }
    aggregate_pool(q, &centers, ids, proj, top_k, opts)
}

/// `q' + β·q` scaled to unit length. A zero result returns `q` and `true`.
pub fn temporal_update(q: &[f64], q_prime: &[f64], beta: f64) -> (FeatVec, bool) {
    let blended: Vec<f64> = q_prime.iter().zip(q).map(|(a, b)| a + beta * b).collect();
    let n = norm(&blended);
    if n > 0.0 && n.is_finite() {
        (
            FeatVec::from_vec_unchecked(blended.into_iter().map(|v| v / n).collect()),
            false,
        )
    } else {
        (FeatVec::from_vec_unchecked(q.to_vec()), true)
    }
}

/// Per-frame results for a sequence.
pub struct SequenceRun {
    pub frames: Vec<FrameOutput>,
    pub fusion_count: usize,
}

/// Processes frames in temporal order. Frame 0 and non-fusion frames run
/// plain query evolution; fusion frames (every `stride` frames) blend in the
/// state kept from `stride` frames earlier. With `tparams = None` no frame
/// is fused and velocities come from the decoded velocity channel alone.
pub fn run_sequence(
    detector: &Detector,
    frames: &[Frame],
    interval: f64,
    tparams: Option<&TemporalParams>,
    seed: u64,
) -> Result<SequenceRun> {
    if frames.is_empty() {
        return Err(Error::arg("empty scene sequence"));
    }
    if let Some(tp) = tparams {
        tp.validate()?;
    }
    let mut state: Option<TemporalState> = None;
    let mut out = Vec::with_capacity(frames.len());
    let mut fusion_count = 0;
    for (t, frame) in frames.iter().enumerate() {
        let fuse = tparams.filter(|tp| tp.is_fusion_frame(t));
        let result = match (fuse, &state) {
            (Some(tp), Some(st)) => {
                fusion_count += 1;
                let run = detector.fused_frame(frame, crate::detect::frame_seed(seed, t), st, tp)?;
                with_fused_velocities(run, st, tp.stride as f64 * interval)
            }
            _ => detector.detect_frame(frame, crate::detect::frame_seed(seed, t))?,
        };
        if let Some(tp) = tparams {
            if t % tp.stride == 0 {
                state = Some(TemporalState::capture(&result, t));
            }
        }
        out.push(result);
    }
    Ok(SequenceRun {
        frames: out,
        fusion_count,
    })
}

/// A previous decode counts as the same track only if it lies within this
/// distance (m) of the current box moved back by its decoded velocity.
pub const TRACK_GATE: f64 = 2.0;

/// Averages the decoded velocity with the displacement since the state
/// frame, for queries that decode to objects in both frames and pass the
/// track gate.
fn with_fused_velocities(mut run: FrameOutput, state: &TemporalState, dt: f64) -> FrameOutput {
    for (i, v) in run.velocities.iter_mut().enumerate() {
        let (Some(cur), Some(prev)) = (v.as_mut(), state.prev_boxes[i]) else {
            continue;
        };
        let b = run.evolution.traces[i].final_state();
        let back = [b.x - cur[0] * dt, b.y - cur[1] * dt];
        if (back[0] - prev.x).hypot(back[1] - prev.y) > TRACK_GATE {
            continue;
        }
        let dx = (b.x - prev.x) / dt;
        let dy = (b.y - prev.y) / dt;
        *cur = [0.5 * dx + 0.5 * cur[0], 0.5 * dy + 0.5 * cur[1]];
    }
    run
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dqem::aggregate_top_k;
    use crate::numerics::SeededRng;

    fn rand_clusters(rng: &mut SeededRng, k: usize, d: usize) -> ClusterSet {
        ClusterSet::from_centers(
            (0..k)
                .map(|_| FeatVec::new((0..d).map(|_| rng.normal()).collect()).unwrap())
                .collect(),
        )
    }

    #[test]
    fn init_examples() {
        let e1 = [1.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0];
        assert_eq!(temporal_init(&e1, &e2, 1.0).unwrap().as_slice(), &e1);
        assert_eq!(temporal_init(&e1, &e2, 0.0).unwrap().as_slice(), &e2);
        let mix = temporal_init(&e1, &e2, 0.4).unwrap();
        assert!((mix[0] - 0.4).abs() < 1e-15 && (mix[1] - 0.6).abs() < 1e-15 && mix[2] == 0.0);
        assert!(temporal_init(&e1, &[1.0], 0.5).is_err());
    }

    #[test]
    fn empty_previous_pool_is_plain_aggregation() {
        let mut rng = SeededRng::new(3);
        let cur = rand_clusters(&mut rng, 6, 5);
        let prev = ClusterSet::from_centers(Vec::new());
        let q: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let p = ProjectionPair::identity(5);
        let a = temporal_aggregate(&q, &cur, &prev, &p, 4, Default::default()).unwrap();
        let b = aggregate_top_k(&q, &cur, &p, 4, Default::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_pools_with_equal_scores_average_everything() {
        // query orthogonal to every centre: all scores zero
        let cur = ClusterSet::from_centers(vec![
            FeatVec::new(vec![0.0, 1.0, 2.0]).unwrap(),
            FeatVec::new(vec![0.0, -3.0, 1.0]).unwrap(),
            FeatVec::new(vec![0.0, 2.0, 0.0]).unwrap(),
        ]);
        let q = [1.0, 0.0, 0.0];
        let r = temporal_aggregate(&q, &cur, &cur.clone(), &ProjectionPair::identity(3), 6, Default::default())
            .unwrap();
        assert!(r.aggregated[1].abs() < 1e-15);
        assert!((r.aggregated[2] - 1.0).abs() < 1e-15);
        assert_eq!(r.scores.len(), 6);
    }

    #[test]
    fn pooled_matches_explicit_concatenation() {
        let mut rng = SeededRng::new(17);
        for _ in 0..20 {
            let cur = rand_clusters(&mut rng, 6, 8);
            let prev = rand_clusters(&mut rng, 6, 8);
            let q: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let p = ProjectionPair::perturbed_identity(8, 0.3, &mut rng);
            let got = temporal_aggregate(&q, &cur, &prev, &p, 4, Default::default()).unwrap();
            let mut all = cur.centers.clone();
            all.extend(prev.centers.iter().cloned());
            let want = aggregate_top_k(&q, &ClusterSet::from_centers(all), &p, 4, Default::default())
                .unwrap();
            assert_eq!(got.selected, want.selected);
            assert_eq!(got.aggregated, want.aggregated);
            assert_eq!(got.diversity_loss, want.diversity_loss);
        }
    }

    #[test]
    fn update_examples() {
        let q = [3.0, 4.0];
        let qp = [0.0, 2.0];
        let (u, flagged) = temporal_update(&q, &qp, 0.0);
        assert_eq!(u.as_slice(), &[0.0, 1.0]);
        assert!(!flagged);
        let (u, _) = temporal_update(&q, &[0.0, 0.0], 0.6);
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        let (u, flagged) = temporal_update(&[1.0, 0.0], &[-0.5, 0.0], 0.5);
        assert!(flagged);
        assert_eq!(u.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn update_matches_scalar_steps() {
        let mut rng = SeededRng::new(2);
        for _ in 0..50 {
            let q: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let qp: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let beta = rng.uniform_in(0.0, 2.0);
            let (u, _) = temporal_update(&q, &qp, beta);
            let mut s = vec![0.0; 6];
            for i in 0..6 {
                s[i] = qp[i] + beta * q[i];
            }
            let mut n = 0.0;
            for v in &s {
                n += v * v;
            }
            let n = n.sqrt();
            for i in 0..6 {
                assert!((u[i] - s[i] / n).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn fusion_frames_follow_stride() {
        let tp = TemporalParams {
            stride: 3,
            ..TemporalParams::default()
        };
        let fused: Vec<usize> = (0..8).filter(|&t| tp.is_fusion_frame(t)).collect();
        assert_eq!(fused, vec![3, 6]);
        assert_eq!(fused.len(), (8 - 1) / 3);
    }

    #[test]
    fn param_validation() {
        let bad = TemporalParams {
            alpha: 1.5,
            ..TemporalParams::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "alpha"));
        let bad = TemporalParams {
            stride: 0,
            ..TemporalParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
