//! Detection metrics: centre-distance matching, true-positive errors,
//! average precision, and the composite detection score.
//!
//! Scale error uses a per-axis dimension ratio (`1 − Π min/max` over w, l,
//! h) instead of the aligned-box IoU of the reference toolkit, and the
//! attribute error is fixed at zero because synthetic scenes have no
//! attribute labels.

pub mod hungarian;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::scene::{wrap_angle, BoxAttributes};

pub use hungarian::{assignment_cost, hungarian_assign};

/// Distance thresholds (metres) for average precision.
pub const AP_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Matching threshold for the true-positive errors.
pub const TP_THRESHOLD: f64 = 2.0;
const RECALL_POINTS: usize = 101;

fn center_distance(a: &BoxAttributes, b: &BoxAttributes) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(prediction, ground truth)` index pairs.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
    pub threshold: f64,
}

impl MatchResult {
    fn from_pairs(pairs: Vec<(usize, usize)>, n_pred: usize, n_gt: usize, threshold: f64) -> Self {
        let mut pm = vec![false; n_pred];
        let mut gm = vec![false; n_gt];
        for &(p, g) in &pairs {
            pm[p] = true;
            gm[g] = true;
        }
        MatchResult {
            pairs,
            unmatched_preds: (0..n_pred).filter(|&i| !pm[i]).collect(),
            unmatched_gts: (0..n_gt).filter(|&i| !gm[i]).collect(),
            threshold,
        }
    }
}

/// Optimal one-to-one matching on BEV centre distance. Pairs farther apart
/// than `threshold` are never matched. Over-threshold pairs are priced so
/// that the assignment first maximises the number of valid matches and then
/// minimises their total distance.
pub fn match_detections(
    preds: &[BoxAttributes],
    gts: &[BoxAttributes],
    threshold: f64,
) -> Result<MatchResult> {
    if !(threshold > 0.0) {
        return Err(Error::arg("match threshold must be positive"));
    }
    if preds.is_empty() || gts.is_empty() {
        return Ok(MatchResult::from_pairs(Vec::new(), preds.len(), gts.len(), threshold));
    }
    let penalty = threshold * (preds.len().min(gts.len()) as f64 + 1.0) + 1.0;
    let dist: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| center_distance(p, g)).collect())
        .collect();
    let cost: Vec<Vec<f64>> = dist
        .iter()
        .map(|row| {
            row.iter()
                .map(|&d| if d <= threshold { d } else { penalty })
                .collect()
        })
        .collect();
    let pairs = hungarian_assign(&cost)?
        .into_iter()
        .filter(|&(p, g)| dist[p][g] <= threshold)
        .collect();
    Ok(MatchResult::from_pairs(pairs, preds.len(), gts.len(), threshold))
}

/// Greedy matching in descending confidence: each prediction takes the
/// nearest still-unmatched ground truth within `threshold`. Returns, per
/// prediction in the given order, whether it was a true positive.
pub fn greedy_match(preds: &[&Detection], gts: &[BoxAttributes], threshold: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; preds.len()];
    for i in order {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, _)| !taken[*g])
            .map(|(g, b)| (g, center_distance(&preds[i].attrs, b)))
            .filter(|(_, d)| *d <= threshold)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((g, _)) = best {
            taken[g] = true;
            out[i] = Some(g);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

impl TpErrors {
    /// Value used when nothing matched.
    pub const SATURATED: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
        ave: 1.0,
        aae: 1.0,
    };

    pub fn as_array(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }
}

pub fn scale_error(p: &BoxAttributes, g: &BoxAttributes) -> f64 {
    let ratio = |a: f64, b: f64| a.min(b) / a.max(b);
    1.0 - ratio(p.w, g.w) * ratio(p.l, g.l) * ratio(p.h, g.h)
}

/// Smallest absolute yaw difference, in `[0, π]`.
pub fn yaw_error(p: f64, g: f64) -> f64 {
    let d = wrap_angle(p - g).abs();
    d.min(PI)
}

/// Mean errors over matched pairs. `velocities` overrides the predicted
/// velocity per prediction when given.
pub fn tp_errors(
    matches: &MatchResult,
    preds: &[BoxAttributes],
    gts: &[BoxAttributes],
    velocities: Option<&[[f64; 2]]>,
) -> TpErrors {
    if matches.pairs.is_empty() {
        return TpErrors::SATURATED;
    }
    let n = matches.pairs.len() as f64;
    let mut acc = [0.0; 4];
    for &(pi, gi) in &matches.pairs {
        let p = &preds[pi];
        let g = &gts[gi];
        let v = velocities.map_or(p.velocity(), |vs| vs[pi]);
        acc[0] += center_distance(p, g);
        acc[1] += scale_error(p, g);
        acc[2] += yaw_error(p.theta, g.theta);
        acc[3] += (v[0] - g.vx).hypot(v[1] - g.vy);
    }
    TpErrors {
        ate: acc[0] / n,
        ase: acc[1] / n,
        aoe: acc[2] / n,
        ave: acc[3] / n,
        aae: 0.0,
    }
}

/// Area under the precision envelope sampled at 101 evenly spaced recall
/// levels. `tp` lists hits in descending-confidence order.
pub fn ap_from_ranked(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    // envelope: best precision at any recall at or above this one
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    let mut j = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while j < recall.len() && recall[j] < level - 1e-12 {
            j += 1;
        }
        if j < recall.len() {
            total += precision[j];
        }
    }
    total / RECALL_POINTS as f64
}

/// Per-frame predictions and ground truth.
pub struct EvalFrame<'a> {
    pub preds: &'a [Detection],
    pub gts: &'a [BoxAttributes],
}

/// AP per threshold, pooled over frames. `None` when there is no ground
/// truth at all.
pub fn average_precision(frames: &[EvalFrame<'_>], thresholds: &[f64]) -> Option<Vec<f64>> {
    let n_gt: usize = frames.iter().map(|f| f.gts.len()).sum();
    if n_gt == 0 {
        return None;
    }
    Some(
        thresholds
            .iter()
            .map(|&th| {
                let mut ranked: Vec<(f64, bool)> = Vec::new();
                for f in frames {
                    let preds: Vec<&Detection> = f.preds.iter().collect();
                    let hit = greedy_match(&preds, f.gts, th);
                    ranked.extend(preds.iter().zip(hit).map(|(p, h)| (p.score, h.is_some())));
                }
                // stable: equal scores keep frame/detection order
                ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
                let tp: Vec<bool> = ranked.into_iter().map(|(_, t)| t).collect();
                ap_from_ranked(&tp, n_gt)
            })
            .collect(),
    )
}

/// `(5·mAP + Σ (1 − min(1, mTP))) / 10`.
pub fn nds(map: f64, tp: &[f64; 5]) -> f64 {
    let tp_term: f64 = tp.iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp_term) / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    #[serde(rename = "mATE")]
    pub mate: f64,
    #[serde(rename = "mASE")]
    pub mase: f64,
    #[serde(rename = "mAOE")]
    pub maoe: f64,
    #[serde(rename = "mAVE")]
    pub mave: f64,
    #[serde(rename = "mAAE")]
    pub maae: f64,
    #[serde(rename = "NDS")]
    pub nds: Option<f64>,
    #[serde(rename = "per_threshold_AP")]
    pub per_threshold_ap: BTreeMap<String, f64>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn tp_array(&self) -> [f64; 5] {
        [self.mate, self.mase, self.maoe, self.mave, self.maae]
    }
}

/// Scores a set of frames. AP uses greedy matching at every threshold in
/// [`AP_THRESHOLDS`]; the TP errors use Hungarian matching at
/// [`TP_THRESHOLD`], pooled over all matched pairs. Detection velocities,
/// when present, replace the box velocity channel.
pub fn evaluate(frames: &[EvalFrame<'_>], config: serde_json::Value) -> Result<EvalReport> {
    let per_threshold = average_precision(frames, &AP_THRESHOLDS);
    let map = per_threshold
        .as_ref()
        .map(|aps| aps.iter().sum::<f64>() / aps.len() as f64);

    let mut sums = [0.0; 4];
    let mut n = 0usize;
    for f in frames {
        let boxes: Vec<BoxAttributes> = f.preds.iter().map(|d| d.attrs).collect();
        let vel: Vec<[f64; 2]> = f
            .preds
            .iter()
            .map(|d| d.velocity.unwrap_or(d.attrs.velocity()))
            .collect();
        let m = match_detections(&boxes, f.gts, TP_THRESHOLD)?;
        if m.pairs.is_empty() {
            continue;
        }
        let e = tp_errors(&m, &boxes, f.gts, Some(&vel));
        let k = m.pairs.len() as f64;
        sums[0] += e.ate * k;
        sums[1] += e.ase * k;
        sums[2] += e.aoe * k;
        sums[3] += e.ave * k;
        n += m.pairs.len();
    }
    let tp = if n == 0 {
        TpErrors::SATURATED
    } else {
        let k = n as f64;
        TpErrors {
            ate: sums[0] / k,
            ase: sums[1] / k,
            aoe: sums[2] / k,
            ave: sums[3] / k,
            aae: 0.0,
        }
    };
    let per_threshold_ap = per_threshold
        .map(|aps| {
            AP_THRESHOLDS
                .iter()
                .zip(aps)
                .map(|(t, ap)| (format!("{t}"), ap))
                .collect()
        })
        .unwrap_or_default();
    Ok(EvalReport {
        map,
        mate: tp.ate,
        mase: tp.ase,
        maoe: tp.aoe,
        mave: tp.ave,
        maae: tp.aae,
        nds: map.map(|m| nds(m, &tp.as_array())),
        per_threshold_ap,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dqem::default_template;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn at(x: f64, y: f64) -> BoxAttributes {
        BoxAttributes {
            x,
            y,
            ..default_template()
        }
    }

    fn det(b: BoxAttributes, score: f64) -> Detection {
        Detection {
            attrs: b,
            score,
            query_id: 0,
            velocity: None,
        }
    }

    #[test]
    fn nds_examples() {
        assert_eq!(nds(1.0, &[0.0; 5]), 1.0);
        assert_eq!(nds(0.0, &[1.0, 2.0, 1.5, 1.0, 3.0]), 0.0);
        let v = nds(0.454, &[0.601, 0.272, 0.381, 0.235, 0.168]);
        assert!((v - 0.5613).abs() < 5e-4);
    }

    #[test]
    fn identical_sets_match_at_zero() {
        let g = vec![at(0.0, 0.0), at(5.0, 5.0), at(-3.0, 2.0)];
        let m = match_detections(&g, &g, 2.0).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let e = tp_errors(&m, &g, &g, None);
        assert_eq!(e.as_array(), [0.0; 5]);
    }

    #[test]
    fn far_sets_do_not_match() {
        let p = vec![at(0.0, 0.0), at(10.0, 0.0)];
        let g = vec![at(30.0, 0.0)];
        let m = match_detections(&p, &g, 4.0).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_preds, vec![0, 1]);
        assert_eq!(tp_errors(&m, &p, &g, None), TpErrors::SATURATED);
        assert!(match_detections(&p, &g, 0.0).is_err());
    }

    #[test]
    fn matching_maximises_count_before_distance() {
        // pairing p0-g0 (0.5 m) would strand g1; the optimum uses both
        let p = vec![at(0.0, 0.0), at(-1.5, 0.0)];
        let g = vec![at(0.5, 0.0), at(-3.0, 0.0)];
        let m = match_detections(&p, &g, 1.6).unwrap();
        assert_eq!(m.pairs.len(), 2);
    }

    #[test]
    fn match_count_equals_exhaustive() {
        let mut rng = SeededRng::new(8);
        for _ in 0..200 {
            let n = 1 + rng.index(6);
            let m = 1 + rng.index(6);
            let p: Vec<BoxAttributes> = (0..n).map(|_| at(rng.uniform_in(0.0, 6.0), rng.uniform_in(0.0, 6.0))).collect();
            let g: Vec<BoxAttributes> = (0..m).map(|_| at(rng.uniform_in(0.0, 6.0), rng.uniform_in(0.0, 6.0))).collect();
            let got = match_detections(&p, &g, 2.0).unwrap();
            // exhaustive: best (count, -distance) over all partial injections
            fn rec(p: &[BoxAttributes], g: &[BoxAttributes], i: usize, used: &mut Vec<bool>, cnt: usize, dist: f64, best: &mut (usize, f64)) {
                if i == p.len() {
                    if cnt > best.0 || (cnt == best.0 && dist < best.1) {
                        *best = (cnt, dist);
                    }
                    return;
                }
                rec(p, g, i + 1, used, cnt, dist, best);
                for j in 0..g.len() {
                    let d = center_distance(&p[i], &g[j]);
                    if !used[j] && d <= 2.0 {
                        used[j] = true;
                        rec(p, g, i + 1, used, cnt + 1, dist + d, best);
                        used[j] = false;
                    }
                }
            }
            let mut best = (0, f64::INFINITY);
            rec(&p, &g, 0, &mut vec![false; m], 0, 0.0, &mut best);
            assert_eq!(got.pairs.len(), best.0);
            let total: f64 = got.pairs.iter().map(|&(a, b)| center_distance(&p[a], &g[b])).sum();
            if best.0 > 0 {
                assert!((total - best.1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn flipped_yaw_gives_pi() {
        let g: Vec<BoxAttributes> = (0..4).map(|i| BoxAttributes { theta: -2.0 + i as f64, ..at(i as f64 * 10.0, 0.0) }).collect();
        let p: Vec<BoxAttributes> = g
            .iter()
            .map(|b| BoxAttributes { theta: wrap_angle(b.theta + PI), ..*b })
            .collect();
        let m = match_detections(&p, &g, 1.0).unwrap();
        let e = tp_errors(&m, &p, &g, None);
        assert!((e.aoe - PI).abs() < 1e-12);
    }

    #[test]
    fn tp_errors_match_hand_computation() {
        let mut rng = SeededRng::new(4);
        let g: Vec<BoxAttributes> = (0..5)
            .map(|i| BoxAttributes {
                theta: rng.uniform_in(-3.0, 3.0),
                vx: rng.normal(),
                vy: rng.normal(),
                ..at(10.0 * i as f64, 0.0)
            })
            .collect();
        let p: Vec<BoxAttributes> = g
            .iter()
            .map(|b| BoxAttributes {
                x: b.x + 0.3 * rng.normal(),
                y: b.y + 0.3 * rng.normal(),
                w: b.w * rng.uniform_in(0.8, 1.2),
                l: b.l * rng.uniform_in(0.8, 1.2),
                h: b.h * rng.uniform_in(0.8, 1.2),
                theta: wrap_angle(b.theta + rng.uniform_in(-1.0, 1.0)),
                vx: b.vx + 0.5,
                vy: b.vy,
                ..*b
            })
            .collect();
        let m = match_detections(&p, &g, 2.0).unwrap();
        assert_eq!(m.pairs.len(), 5);
        let e = tp_errors(&m, &p, &g, None);
        let (mut ate, mut ase, mut aoe, mut ave) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..5 {
            ate += ((p[i].x - g[i].x).powi(2) + (p[i].y - g[i].y).powi(2)).sqrt();
            let r = |a: f64, b: f64| if a < b { a / b } else { b / a };
            ase += 1.0 - r(p[i].w, g[i].w) * r(p[i].l, g[i].l) * r(p[i].h, g[i].h);
            let mut dyaw = (p[i].theta - g[i].theta).abs();
            if dyaw > PI {
                dyaw = 2.0 * PI - dyaw;
            }
            aoe += dyaw;
            ave += 0.5;
        }
        assert!((e.ate - ate / 5.0).abs() < 1e-12);
        assert!((e.ase - ase / 5.0).abs() < 1e-12);
        assert!((e.aoe - aoe / 5.0).abs() < 1e-12);
        assert!((e.ave - ave / 5.0).abs() < 1e-12);
        assert_eq!(e.aae, 0.0);
    }

    #[test]
    fn ap_perfect_and_empty() {
        let g = vec![at(0.0, 0.0), at(10.0, 0.0)];
        let preds: Vec<Detection> = g.iter().map(|b| det(*b, 0.9)).collect();
        let frames = [EvalFrame { preds: &preds, gts: &g }];
        for ap in average_precision(&frames, &AP_THRESHOLDS).unwrap() {
            assert!((ap - 1.0).abs() < 1e-15);
        }
        let none: Vec<Detection> = Vec::new();
        let frames = [EvalFrame { preds: &none, gts: &g }];
        assert!(average_precision(&frames, &AP_THRESHOLDS).unwrap().iter().all(|&a| a == 0.0));
        let frames = [EvalFrame { preds: &preds, gts: &[] }];
        assert!(average_precision(&frames, &AP_THRESHOLDS).is_none());
    }

    /// Direct PR evaluation: for every recall level, the best precision over
    /// all score cut-offs reaching it.
    fn ap_oracle(scores: &[f64], hit: &[bool], n_gt: usize) -> f64 {
        let mut total = 0.0;
        for r in 0..101 {
            let level = r as f64 / 100.0;
            let mut best: f64 = 0.0;
            for cut in 1..=scores.len() {
                let mut idx: Vec<usize> = (0..scores.len()).collect();
                idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
                let kept = &idx[..cut];
                let tp = kept.iter().filter(|&&i| hit[i]).count();
                let rec = tp as f64 / n_gt as f64;
                if rec >= level - 1e-12 {
                    best = best.max(tp as f64 / cut as f64);
                }
            }
            total += best;
        }
        total / 101.0
    }

    #[test]
    fn ap_matches_pr_oracle() {
        let mut rng = SeededRng::new(12);
        for _ in 0..100 {
            let g: Vec<BoxAttributes> = (0..3).map(|i| at(10.0 * i as f64, 0.0)).collect();
            let preds: Vec<Detection> = (0..5)
                .map(|_| {
                    let gi = rng.index(3);
                    let off = rng.uniform_in(0.0, 3.0);
                    det(at(g[gi].x + off, 0.0), rng.uniform())
                })
                .collect();
            let frames = [EvalFrame { preds: &preds, gts: &g }];
            let ap = average_precision(&frames, &[1.0]).unwrap()[0];
            let refs: Vec<&Detection> = preds.iter().collect();
            let hit: Vec<bool> = greedy_match(&refs, &g, 1.0).iter().map(Option::is_some).collect();
            let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
            assert!((ap - ap_oracle(&scores, &hit, 3)).abs() < 1e-12);
        }
    }

    #[test]
    fn report_json_keys() {
        let g = vec![at(0.0, 0.0)];
        let preds = vec![det(at(0.1, 0.0), 0.8)];
        let r = evaluate(&[EvalFrame { preds: &preds, gts: &g }], serde_json::json!({})).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for k in ["mAP", "mATE", "mASE", "mAOE", "mAVE", "mAAE", "NDS", "per_threshold_AP", "config"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(r.nds.unwrap(), nds(r.map.unwrap(), &r.tp_array()));
    }

    proptest! {
        #[test]
        fn nds_monotone(
            map in 0.0f64..1.0,
            dm in 0.0f64..0.5,
            tp in prop::array::uniform5(0.0f64..2.0),
            which in 0usize..5,
            dt in 0.0f64..0.5,
        ) {
            prop_assert!(nds((map + dm).min(1.0), &tp) >= nds(map, &tp));
            let mut worse = tp;
            worse[which] += dt;
            prop_assert!(nds(map, &worse) <= nds(map, &tp));
            let clamped = tp.map(|e| e.min(1.0));
            prop_assert_eq!(nds(map, &tp), nds(map, &clamped));
        }

        #[test]
        fn ap_invariant_to_monotone_rescoring(
            offs in prop::collection::vec((0usize..3, 0.0f64..3.0, 0.0f64..1.0), 1..8),
        ) {
            let g: Vec<BoxAttributes> = (0..3).map(|i| at(10.0 * i as f64, 0.0)).collect();
            let a: Vec<Detection> = offs.iter().map(|&(gi, o, s)| det(at(g[gi].x + o, 0.0), s)).collect();
            let b: Vec<Detection> = a.iter().map(|d| det(d.attrs, (3.0 * d.score).exp() - 7.0)).collect();
            let ap_a = average_precision(&[EvalFrame { preds: &a, gts: &g }], &AP_THRESHOLDS).unwrap();
            let ap_b = average_precision(&[EvalFrame { preds: &b, gts: &g }], &AP_THRESHOLDS).unwrap();
            prop_assert_eq!(ap_a, ap_b);
        }
    }
}
