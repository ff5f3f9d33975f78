//! Seeded experiment suites shared by the CLI and the acceptance tests.
//!
//! Errors are measured on *responsible* queries: for every ground-truth
//! object, the grid pillar whose anchor is nearest to it.

use serde::{Deserialize, Serialize};

use crate::detect::{frame_seed, Detector, FrameOutput};
use crate::dqem::{fit_projections, FitConfig, FitOutcome, FitProblem, Pillar};
use crate::error::Result;
use crate::eval::{evaluate, EvalFrame, EvalReport};
use crate::exec::Execution;
use crate::ltfm::TemporalParams;
use crate::numerics::{derive_seed, SeededRng};
use crate::scene::{generate_frame, generate_sequence, Frame, SceneConfig, SceneSequence};

/// Index of the pillar nearest to each ground-truth box.
pub fn responsible_queries(frame: &Frame, pillars: &[Pillar]) -> Vec<usize> {
    frame
        .gt
        .iter()
        .map(|g| {
            pillars
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    let da = (a.1.attrs.x - g.attrs.x).hypot(a.1.attrs.y - g.attrs.y);
                    let db = (b.1.attrs.x - g.attrs.x).hypot(b.1.attrs.y - g.attrs.y);
                    da.total_cmp(&db)
                })
                .map(|(i, _)| i)
                .expect("query set is never empty")
        })
        .collect()
}

/// Mean decoded-centre error of the responsible queries after the initial
/// aggregate (index 0) and after every round. Queries that never saw a
/// feature point are left out; a query that stopped early keeps its last
/// state. `None` when no responsible query had a neighbourhood.
pub fn per_iteration_center_error(out: &FrameOutput, frame: &Frame, pillars: &[Pillar], iterations: usize) -> Option<Vec<f64>> {
    let mut sums = vec![0.0; iterations + 1];
    let mut n = 0usize;
    for (g, qi) in frame.gt.iter().zip(responsible_queries(frame, pillars)) {
        let trace = &out.evolution.traces[qi];
        if trace.flags.empty_neighborhood {
            continue;
        }
        n += 1;
        for (it, s) in sums.iter_mut().enumerate() {
            let b = trace.states.get(it).unwrap_or_else(|| trace.final_state());
            *s += (b.x - g.attrs.x).hypot(b.y - g.attrs.y);
        }
    }
    (n > 0).then(|| sums.into_iter().map(|s| s / n as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionSeed {
    pub seed: u64,
    /// Mean responsible-query centre error per iteration.
    pub errors: Vec<f64>,
}

impl EvolutionSeed {
    pub fn improved(&self) -> bool {
        self.errors.last() < self.errors.first()
    }

    pub fn non_increasing(&self) -> bool {
        self.errors.windows(2).all(|w| w[1] <= w[0])
    }
}

/// One default scene per seed, evolved with the given detector.
pub fn evolution_suite(detector: &Detector, scene: &SceneConfig, seeds: impl IntoIterator<Item = u64>) -> Result<Vec<EvolutionSeed>> {
    let mut out = Vec::new();
    for seed in seeds {
        let mut rng = SeededRng::new(derive_seed(seed, "scene"));
        let frame = generate_frame(scene, &mut rng)?;
        let res = detector.detect_frame(&frame, frame_seed(derive_seed(seed, "detect"), 0))?;
        let pillars = detector.initial_queries(frame.d)?;
        if let Some(errors) = per_iteration_center_error(&res, &frame, pillars.pillars(), detector.params.iterations) {
            out.push(EvolutionSeed { seed, errors });
        }
    }
    Ok(out)
}

/// Scenes for the temporal comparison: every object moves at 1–5 m/s.
pub fn moving_scene() -> SceneConfig {
    SceneConfig {
        speed_min: 1.0,
        speed_max: 5.0,
        ..SceneConfig::default()
    }
}

/// Mean velocity error (mAVE) of a processed sequence: detections are
/// matched to ground truth one-to-one within 2 m, and the error is averaged
/// over matched pairs. `None` if nothing matched.
pub fn sequence_velocity_error(
    detector: &Detector,
    seq: &SceneSequence,
    tparams: Option<&TemporalParams>,
    seed: u64,
) -> Result<Option<f64>> {
    let run = detector.run_sequence(&seq.frames, seq.frame_interval, tparams, seed)?;
    let records = detector.records(&run, tparams);
    let gts: Vec<Vec<_>> = seq.frames.iter().map(|f| f.gt.iter().map(|g| g.attrs).collect()).collect();
    let frames: Vec<EvalFrame<'_>> = records
        .iter()
        .zip(&gts)
        .map(|(r, g)| EvalFrame { preds: &r.detections, gts: g })
        .collect();
    let report = evaluate(&frames, serde_json::Value::Null)?;
    // a saturated error of exactly 1 means no pair matched
    Ok((report.maae == 0.0).then_some(report.mave))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityPair {
    pub seed: u64,
    pub with_fusion: f64,
    pub without_fusion: f64,
}

/// Paired runs on the same sequence with and without temporal fusion.
pub fn temporal_suite(
    detector: &Detector,
    scene: &SceneConfig,
    tparams: &TemporalParams,
    frames: usize,
    interval: f64,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<Vec<VelocityPair>> {
    let mut out = Vec::new();
    for seed in seeds {
        let mut rng = SeededRng::new(derive_seed(seed, "sequence"));
        let seq = generate_sequence(scene, frames, interval, &mut rng)?;
        let run_seed = derive_seed(seed, "detect");
        let with = sequence_velocity_error(detector, &seq, Some(tparams), run_seed)?;
        let without = sequence_velocity_error(detector, &seq, None, run_seed)?;
        if let (Some(w), Some(wo)) = (with, without) {
            out.push(VelocityPair {
                seed,
                with_fusion: w,
                without_fusion: wo,
            });
        }
    }
    Ok(out)
}

/// The fixed 20-frame set used to compare projection fits.
pub fn fit_frames(scene: &SceneConfig, seed: u64, n: usize) -> Result<Vec<Frame>> {
    let mut rng = SeededRng::new(derive_seed(seed, "fit-frames"));
    (0..n).map(|_| generate_frame(scene, &mut rng)).collect()
}

#[derive(Debug, Clone)]
pub struct FitComparison {
    pub without: FitOutcome,
    pub with: FitOutcome,
    /// Mean attention entropy of each fitted pair on the shared problem.
    pub entropy_without: f64,
    pub entropy_with: f64,
}

/// Fits projections twice from the same start, with `λ = 0` and with the
/// detector's `λ`, and reports the resulting attention entropies.
pub fn diversity_comparison(detector: &Detector, frames: &[Frame], cfg: &FitConfig, seed: u64, exec: Execution) -> Result<FitComparison> {
    let build = |lambda: f64| {
        let mut params = detector.params.clone();
        params.lambda = lambda;
        FitProblem::new(frames, &params, &detector.grid, &detector.bounds, detector.noise_sigma, seed)
    };
    let plain = build(0.0)?;
    let diverse = build(detector.params.lambda)?;
    let init_seed = derive_seed(seed, "fit-init");
    let without = fit_projections(&plain, cfg, &mut SeededRng::new(init_seed), exec)?;
    let with = fit_projections(&diverse, cfg, &mut SeededRng::new(init_seed), exec)?;
    Ok(FitComparison {
        entropy_without: plain.evaluate(&without.proj)?.entropy,
        entropy_with: plain.evaluate(&with.proj)?.entropy,
        without,
        with,
    })
}

/// Settings for the end-to-end run.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub scene: SceneConfig,
    pub frames: usize,
    pub interval: f64,
    pub temporal: Option<TemporalParams>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scene: SceneConfig::default(),
            frames: 8,
            interval: 0.5,
            temporal: None,
        }
    }
}

/// Simulate, detect, and evaluate from a single root seed.
pub fn pipeline(detector: &Detector, cfg: &PipelineConfig, seed: u64) -> Result<EvalReport> {
    let mut rng = SeededRng::new(derive_seed(seed, "simulate"));
    let seq = generate_sequence(&cfg.scene, cfg.frames, cfg.interval, &mut rng)?;
    let run = detector.run_sequence(&seq.frames, seq.frame_interval, cfg.temporal.as_ref(), derive_seed(seed, "detect"))?;
    let records = detector.records(&run, cfg.temporal.as_ref());
    let gts: Vec<Vec<_>> = seq.frames.iter().map(|f| f.gt.iter().map(|g| g.attrs).collect()).collect();
    let frames: Vec<EvalFrame<'_>> = records
        .iter()
        .zip(&gts)
        .map(|(r, g)| EvalFrame { preds: &r.detections, gts: g })
        .collect();
    let config = serde_json::json!({
        "seed": seed,
        "frames": cfg.frames,
        "interval": cfg.interval,
        "params": detector.echo(cfg.temporal.as_ref()),
        "scene": cfg.scene,
    });
    evaluate(&frames, config)
}
