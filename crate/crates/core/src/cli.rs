//! Command-line front end.
//!
//! Settings resolve in three layers: built-in defaults, then the
//! `--config` file, then explicit flags. Exit status is 0 on success, 1 for
//! invalid input, and 2 when a run fails.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::config::{parse_neighborhood, parse_softmax_domain, RunConfig};
use crate::detect::{Detector, DetectionFrame};
use crate::dqem::{fit_projections, FitProblem, ProjectionPair};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalFrame};
use crate::exec::{configure_threads, Execution};
use crate::io::{read_jsonl, write_jsonl};
use crate::numerics::{derive_seed, SeededRng};
use crate::scene::{generate_sequence, Frame};
use crate::suite::{pipeline, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "qebev", version, about = "Dynamic-query BEV detection on synthetic scenes")]
pub struct Cli {
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true, env = "QEBEV_THREADS")]
    pub threads: Option<usize>,
    /// Flat `key = value` settings file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene sequence as JSON Lines.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        interval: Option<f64>,
        #[command(flatten)]
        field: FieldArgs,
        #[command(flatten)]
        scene: SceneArgs,
    },
    /// Run query evolution over a scene file and write detections.
    Detect {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Projection pair as JSON (`{"w_q": rows, "w_k": rows}`).
        #[arg(long)]
        proj: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        field: FieldArgs,
        #[command(flatten)]
        dqem: DqemArgs,
        #[command(flatten)]
        temporal: TemporalArgs,
    },
    /// Score a detection file against its scene file.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        /// Write the report here instead of standard output.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference checks of the diversity-loss and fit gradients.
    Gradcheck {
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Runtime scaling sweep of the per-query step.
    Bench {
        #[arg(long)]
        n_min: Option<usize>,
        #[arg(long)]
        n_max: Option<usize>,
        #[arg(long)]
        factor: Option<f64>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate the attention projections on a scene file.
    Fit {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        field: FieldArgs,
        #[command(flatten)]
        dqem: DqemArgs,
    },
    /// Simulate, detect and evaluate in one go; prints the report.
    Pipeline {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        interval: Option<f64>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        field: FieldArgs,
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        dqem: DqemArgs,
        #[command(flatten)]
        temporal: TemporalArgs,
    },
}

/// Settings shared by generation and detection.
#[derive(Debug, Args)]
pub struct FieldArgs {
    #[arg(long)]
    half_extent: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    #[arg(long)]
    n_objects: Option<usize>,
    #[arg(long)]
    points_per_object: Option<usize>,
    #[arg(long)]
    background_points: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    speed_min: Option<f64>,
    #[arg(long)]
    speed_max: Option<f64>,
    #[arg(long)]
    min_separation: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DqemArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    kmeans_iters: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Disable the 1/√d score scaling.
    #[arg(long)]
    no_dscale: bool,
    /// `selected` or `full`.
    #[arg(long)]
    softmax_domain: Option<String>,
    /// `regather` or `fixed`.
    #[arg(long)]
    neighborhood: Option<String>,
    #[arg(long)]
    grid_nx: Option<usize>,
    #[arg(long)]
    grid_ny: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TemporalArgs {
    /// Fuse each frame with state from `stride` frames earlier.
    #[arg(long)]
    temporal: bool,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    temporal_beta: Option<f64>,
    #[arg(long)]
    stride: Option<usize>,
}

macro_rules! overlay {
    ($($src:expr => $dst:expr),* $(,)?) => {
        $( if let Some(v) = $src { $dst = v; } )*
    };
}

impl FieldArgs {
    fn apply(&self, c: &mut RunConfig) {
        overlay!(self.half_extent => c.scene.half_extent, self.noise_sigma => c.scene.noise_sigma);
    }
}

impl SceneArgs {
    fn apply(&self, c: &mut RunConfig) {
        overlay!(
            self.n_objects => c.scene.n_objects,
            self.points_per_object => c.scene.points_per_object,
            self.background_points => c.scene.background_points,
            self.d => c.scene.d,
            self.speed_min => c.scene.speed_min,
            self.speed_max => c.scene.speed_max,
            self.min_separation => c.scene.min_separation,
        );
    }
}

impl DqemArgs {
    fn apply(&self, c: &mut RunConfig) -> Result<()> {
        overlay!(
            self.k => c.dqem.k,
            self.topk => c.dqem.top_k,
            self.beta => c.dqem.beta,
            self.radius => c.dqem.radius,
            self.iters => c.dqem.iterations,
            self.kmeans_iters => c.dqem.kmeans_iters,
            self.lambda => c.dqem.lambda,
            self.grid_nx => c.grid.nx,
            self.grid_ny => c.grid.ny,
        );
        if self.no_dscale {
            c.dqem.attention.scale_scores = false;
        }
        if let Some(s) = &self.softmax_domain {
            c.dqem.attention.softmax_domain = parse_softmax_domain(s)?;
        }
        if let Some(s) = &self.neighborhood {
            c.dqem.neighborhood = parse_neighborhood(s)?;
        }
        Ok(())
    }
}

impl TemporalArgs {
    fn apply(&self, c: &mut RunConfig) {
        if self.temporal {
            c.temporal = true;
        }
        overlay!(self.alpha => c.tparams.alpha, self.temporal_beta => c.tparams.beta, self.stride => c.tparams.stride);
    }
}

/// Parses `argv` and runs it; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn with_frames(frames: usize, c: &mut RunConfig) {
    c.frames = frames;
    c.tparams.window = frames;
}

pub fn run(cli: Cli) -> Result<i32> {
    let Some(command) = cli.command else {
        let _ = Cli::command().write_help(&mut std::io::stderr());
        let _ = writeln!(std::io::stderr());
        return Ok(1);
    };
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::config("threads", "must be >= 1"));
        }
        configure_threads(t);
    }
    match command {
        Command::Simulate { out, seed, frames, interval, field, scene } => {
            overlay!(seed => cfg.seed, interval => cfg.interval);
            if let Some(f) = frames {
                with_frames(f, &mut cfg);
            }
            field.apply(&mut cfg);
            scene.apply(&mut cfg);
            cfg.validate()?;
            let mut rng = SeededRng::new(derive_seed(cfg.seed, "simulate"));
            let seq = generate_sequence(&cfg.scene, cfg.frames, cfg.interval, &mut rng)?;
            write_jsonl(&out, &seq.frames)?;
            for d in &seq.dropped {
                eprintln!("track {} left the scene at frame {}", d.track_id, d.frame);
            }
        }
        Command::Detect { scenes, out, proj, seed, field, dqem, temporal } => {
            overlay!(seed => cfg.seed);
            field.apply(&mut cfg);
            dqem.apply(&mut cfg)?;
            temporal.apply(&mut cfg);
            let frames: Vec<Frame> = read_jsonl(&scenes)?;
            let interval = sequence_interval(&frames, &scenes, cfg.interval)?;
            if let Some(f) = frames.first() {
                cfg.scene.d = f.d;
            }
            cfg.validate()?;
            let mut det = cfg.detector();
            if let Some(p) = proj {
                det.proj = load_projections(&p)?;
            }
            let tparams = cfg.temporal_params();
            let run = det.run_sequence(&frames, interval, tparams.as_ref(), derive_seed(cfg.seed, "detect"))?;
            write_jsonl(&out, &det.records(&run, tparams.as_ref()))?;
        }
        Command::Eval { dets, scenes, report } => {
            let records: Vec<DetectionFrame> = read_jsonl(&dets)?;
            let frames: Vec<Frame> = read_jsonl(&scenes)?;
            if records.len() != frames.len() {
                return Err(Error::arg(format!(
                    "{} detection frames but {} scene frames",
                    records.len(),
                    frames.len()
                )));
            }
            let gts: Vec<Vec<_>> = frames.iter().map(|f| f.gt.iter().map(|g| g.attrs).collect()).collect();
            let eval_frames: Vec<EvalFrame<'_>> = records
                .iter()
                .zip(&gts)
                .map(|(r, g)| EvalFrame { preds: &r.detections, gts: g })
                .collect();
            let config = serde_json::json!({
                "frames": frames.len(),
                "params": records.first().map(|r| &r.params),
            });
            let rep = evaluate(&eval_frames, config)?;
            emit_json(&rep, report.as_deref(), report.is_none())?;
        }
        Command::Gradcheck { cases, seed } => {
            overlay!(cases => cfg.cases, seed => cfg.seed);
            cfg.validate()?;
            let rep = crate::gradcheck::run(cfg.cases, cfg.seed, Execution::Parallel)?;
            println!(
                "diversity loss: max relative error {:.3e} over {} cases (tolerance {:.0e})",
                rep.diversity_max_rel_error,
                rep.cases,
                crate::gradcheck::DIVERSITY_TOLERANCE
            );
            println!(
                "fit gradient: max relative error {:.3e} (tolerance {:.0e})",
                rep.fit_max_rel_error,
                crate::gradcheck::FIT_TOLERANCE
            );
            if !rep.passed {
                eprintln!("gradient check failed");
                return Ok(2);
            }
        }
        Command::Bench { n_min, n_max, factor, repeats, warmup, seed, out } => {
            overlay!(
                n_min => cfg.n_min,
                n_max => cfg.n_max,
                factor => cfg.factor,
                repeats => cfg.repeats,
                warmup => cfg.warmup,
                seed => cfg.seed,
            );
            cfg.validate()?;
            let rep = crate::bench::run_scaling(&cfg.bench()?, cfg.seed)?;
            match &out {
                Some(p) => rep.write_csv(p)?,
                None => print!("{}", rep.to_csv()),
            }
            let slope = rep.slope.map_or("absent".to_string(), |s| format!("{s:.4}"));
            let ci = rep
                .slope_ci
                .map_or("absent".to_string(), |c| format!("[{:.4}, {:.4}]", c[0], c[1]));
            eprintln!("log-log slope {slope}, 95% interval {ci}");
            if !rep.dropped_sizes.is_empty() {
                eprintln!("dropped sizes below timer resolution: {:?}", rep.dropped_sizes);
            }
            eprintln!("machine: {}", rep.machine);
            eprintln!("{}", rep.note);
        }
        Command::Fit { scenes, out, steps, lr, seed, field, dqem } => {
            overlay!(steps => cfg.fit.steps, lr => cfg.fit.lr, seed => cfg.seed);
            field.apply(&mut cfg);
            dqem.apply(&mut cfg)?;
            let frames: Vec<Frame> = read_jsonl(&scenes)?;
            if let Some(f) = frames.first() {
                cfg.scene.d = f.d;
            }
            cfg.validate()?;
            let det = cfg.detector();
            let problem = FitProblem::new(&frames, &det.params, &det.grid, &det.bounds, det.noise_sigma, derive_seed(cfg.seed, "fit-problem"))?;
            let mut rng = SeededRng::new(derive_seed(cfg.seed, "fit-init"));
            let outcome = fit_projections(&problem, &cfg.fit, &mut rng, Execution::Parallel)?;
            std::fs::write(&out, serde_json::to_string_pretty(&outcome.proj)?)?;
            for (i, f) in outcome.objective_log.iter().enumerate() {
                eprintln!("step {i}: objective {f:.6}");
            }
        }
        Command::Pipeline { seed, frames, interval, out, field, scene, dqem, temporal } => {
            overlay!(seed => cfg.seed, interval => cfg.interval);
            if let Some(f) = frames {
                with_frames(f, &mut cfg);
            }
            field.apply(&mut cfg);
            scene.apply(&mut cfg);
            dqem.apply(&mut cfg)?;
            temporal.apply(&mut cfg);
            cfg.validate()?;
            let pcfg = PipelineConfig {
                scene: cfg.scene.clone(),
                frames: cfg.frames,
                interval: cfg.interval,
                temporal: cfg.temporal_params(),
            };
            let rep = pipeline(&cfg.detector(), &pcfg, cfg.seed)?;
            emit_json(&rep, out.as_deref(), true)?;
        }
    }
    Ok(0)
}

fn emit_json<T: serde::Serialize>(value: &T, path: Option<&Path>, stdout: bool) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(p) = path {
        std::fs::write(p, format!("{text}\n"))?;
    }
    if stdout {
        println!("{text}");
    }
    Ok(())
}

/// Frame spacing from the timestamps, or `fallback` for a single frame.
fn sequence_interval(frames: &[Frame], path: &Path, fallback: f64) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: 0,
            reason: "no frames".into(),
        });
    }
    if frames.len() == 1 {
        return Ok(fallback);
    }
    let dt = frames[1].timestamp - frames[0].timestamp;
    for (i, w) in frames.windows(2).enumerate() {
        let step = w[1].timestamp - w[0].timestamp;
        if !(step > 0.0) || (step - dt).abs() > 1e-9 * dt.abs().max(1.0) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: i + 2,
                reason: "timestamps must increase at a constant interval".into(),
            });
        }
    }
    Ok(dt)
}

fn load_projections(path: &Path) -> Result<ProjectionPair> {
    let text = std::fs::read_to_string(path)?;
    let proj: ProjectionPair = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    proj.validate()?;
    Ok(proj)
}

/// Builds a detector for programmatic use with the CLI's defaults.
pub fn default_detector() -> Detector {
    RunConfig::default().detector()
}
