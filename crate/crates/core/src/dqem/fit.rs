//! Finite-difference calibration of the attention projections.
//!
//! The objective is the mean decoded-centre error of the queries responsible
//! for each ground-truth object, plus `λ` times the mean shortfall of the
//! attention entropy from its maximum `ln K`. Penalising the shortfall is
//! the same as rewarding entropy, so a larger `λ` pushes attention to spread
//! over more clusters.
//!
//! Neighbourhoods are held fixed at the initial pillar position and the
//! clusters for every round are computed once up front. Clustering does not
//! depend on the projections, so this keeps each objective evaluation to
//! attention and decoding only.

use serde::{Deserialize, Serialize};

use super::{
    aggregate_top_k, blend_and_decode, gather_neighborhood, initial_aggregate, kmeans,
    query_seed, ClusterSet, DqemParams, Pillar, ProjectionPair, QueryGrid,
};
use crate::detect::frame_seed;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numerics::{FeatVec, SeededRng};
use crate::scene::{Bounds, Decoder, Frame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    /// Central-difference step.
    pub fd_step: f64,
    /// Scale of the Gaussian noise added to the identity at start.
    pub init_noise: f64,
    /// Halvings of the learning rate tried before a step is given up.
    pub max_halvings: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 20,
            lr: 0.5,
            fd_step: 1e-5,
            init_noise: 0.01,
            max_halvings: 12,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be > 0"));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(Error::config("fd-step", "must be > 0"));
        }
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            return Err(Error::config("init-noise", "must be >= 0"));
        }
        Ok(())
    }
}

/// One responsible query with everything that does not depend on the
/// projections.
#[derive(Debug, Clone)]
struct FitQuery {
    q0: FeatVec,
    rounds: Vec<ClusterSet>,
    target: [f64; 2],
    frame: usize,
}

/// Fixed training set for [`fit_projections`].
#[derive(Debug, Clone)]
pub struct FitProblem {
    queries: Vec<FitQuery>,
    decoders: Vec<Decoder>,
    params: DqemParams,
    d: usize,
}

/// Objective value split into its two parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitEval {
    pub center_error: f64,
    pub entropy: f64,
    /// Mean `ln K` over the attention results; the entropy ceiling.
    pub max_entropy: f64,
}

impl FitEval {
    pub fn objective(&self, lambda: f64) -> f64 {
        self.center_error + lambda * (self.max_entropy - self.entropy)
    }
}

impl FitProblem {
    /// For every ground-truth box, picks the grid pillar nearest to it and
    /// precomputes its neighbourhood mean and per-round clusters.
    pub fn new(
        frames: &[Frame],
        params: &DqemParams,
        grid: &QueryGrid,
        bounds: &Bounds,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        let first = frames
            .first()
            .ok_or_else(|| Error::arg("fitting needs at least one frame"))?;
        let d = first.d;
        if frames.iter().any(|f| f.d != d) {
            return Err(Error::arg("fit frames differ in feature dimension"));
        }
        let mut queries = Vec::new();
        let mut decoders = Vec::with_capacity(frames.len());
        for (fi, frame) in frames.iter().enumerate() {
            decoders.push(Decoder::for_frame(frame, noise_sigma)?);
            let pillars = grid.init(bounds, d)?;
            let fseed = frame_seed(seed, fi);
            for gt in &frame.gt {
                let Some((qi, pillar)) = nearest(pillars.pillars(), gt.attrs.center()) else {
                    continue;
                };
                let nbhd = gather_neighborhood(pillar, frame, params.radius);
                if nbhd.is_empty() {
                    continue;
                }
                let feats: Vec<&FeatVec> = nbhd.iter().map(|p| &p.feat).collect();
                let (q0, _) = initial_aggregate(&feats, d);
                let mut rng = SeededRng::new(query_seed(fseed, qi));
                let rounds = (0..params.iterations)
                    .map(|_| kmeans(&feats, params.k, params.kmeans_iters, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                queries.push(FitQuery {
                    q0,
                    rounds,
                    target: gt.attrs.center(),
                    frame: fi,
                });
            }
        }
        if queries.is_empty() {
            return Err(Error::arg("no ground-truth object has a non-empty neighbourhood"));
        }
        Ok(FitProblem {
            queries,
            decoders,
            params: params.clone(),
            d,
        })
    }

    pub fn n_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn lambda(&self) -> f64 {
        self.params.lambda
    }

    /// Runs every query through the attention rounds under `proj`.
    pub fn evaluate(&self, proj: &ProjectionPair) -> Result<FitEval> {
        if proj.dim() != self.d {
            return Err(Error::arg("projection dimension differs from the fit frames"));
        }
        let p = &self.params;
        let mut err = 0.0;
        let mut ent = 0.0;
        let mut cap = 0.0;
        let mut n_att = 0usize;
        for fq in &self.queries {
            let decoder = &self.decoders[fq.frame];
            let mut q = fq.q0.clone();
            let mut scale = 1.0;
            for clusters in &fq.rounds {
                let att = aggregate_top_k(&q, clusters, proj, p.top_k, p.attention)?;
                let centers: Vec<&FeatVec> = clusters.non_empty().map(|(_, c)| c).collect();
                ent += att.diversity_loss;
                cap += (att.scores.len() as f64).ln();
                n_att += 1;
                let b = blend_and_decode(&q, scale, &att, &centers, p.beta, decoder);
                q = b.q;
                scale = b.scale;
            }
            // the background gate is ignored so the error stays continuous
            let b = decoder.encoder.decode_attrs(&q.scaled(scale));
            err += (b.x - fq.target[0]).hypot(b.y - fq.target[1]);
        }
        let n_att = n_att.max(1) as f64;
        let out = FitEval {
            center_error: err / self.queries.len() as f64,
            entropy: ent / n_att,
            max_entropy: cap / n_att,
        };
        if !out.center_error.is_finite() || !out.entropy.is_finite() {
            return Err(Error::NonFinite(format!(
                "fit objective (centre error {}, entropy {})",
                out.center_error, out.entropy
            )));
        }
        Ok(out)
    }

    pub fn objective(&self, proj: &ProjectionPair) -> Result<f64> {
        Ok(self.evaluate(proj)?.objective(self.params.lambda))
    }

    /// Central-difference gradient over every entry of `W_q` then `W_k`.
    pub fn fd_gradient(&self, proj: &ProjectionPair, h: f64, exec: Execution) -> Result<Vec<f64>> {
        exec.map(proj.n_params(), |i| {
            let mut plus = proj.clone();
            plus.set_param(i, proj.param(i) + h);
            let mut minus = proj.clone();
            minus.set_param(i, proj.param(i) - h);
            let fp = self.objective(&plus)?;
            let fm = self.objective(&minus)?;
            Ok((fp - fm) / (2.0 * h))
        })
        .into_iter()
        .collect()
    }
}

fn nearest(pillars: &[Pillar], at: [f64; 2]) -> Option<(usize, &Pillar)> {
    pillars.iter().enumerate().min_by(|a, b| {
        let da = (a.1.attrs.x - at[0]).hypot(a.1.attrs.y - at[1]);
        let db = (b.1.attrs.x - at[0]).hypot(b.1.attrs.y - at[1]);
        da.total_cmp(&db)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    /// Best pair seen; with descent-only acceptance this is the last
    /// accepted iterate.
    pub proj: ProjectionPair,
    pub initial: ProjectionPair,
    /// Objective at the start and after every step.
    pub objective_log: Vec<f64>,
    /// Learning rate used by each accepted step; `None` when every halving
    /// failed to decrease the objective.
    pub step_lr: Vec<Option<f64>>,
}

impl FitOutcome {
    pub fn best_objective(&self) -> f64 {
        self.objective_log.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Gradient descent with backtracking from identity plus small noise.
/// A step is accepted only if it lowers the objective; otherwise the
/// learning rate is halved, up to `max_halvings` times, and the step is
/// skipped if none works.
pub fn fit_projections(
    problem: &FitProblem,
    cfg: &FitConfig,
    rng: &mut SeededRng,
    exec: Execution,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let initial = ProjectionPair::perturbed_identity(problem.d, cfg.init_noise, rng);
    let mut cur = initial.clone();
    let mut f_cur = problem.objective(&cur)?;
    let mut log = vec![f_cur];
    let mut step_lr = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let g = problem.fd_gradient(&cur, cfg.fd_step, exec)?;
        let mut lr = cfg.lr;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let mut cand = cur.clone();
            for (i, gi) in g.iter().enumerate() {
                cand.set_param(i, cur.param(i) - lr * gi);
            }
            let f = problem.objective(&cand)?;
            if f < f_cur {
                accepted = Some((cand, f));
                break;
            }
            lr *= 0.5;
        }
        match accepted {
            Some((cand, f)) => {
                cur = cand;
                f_cur = f;
                step_lr.push(Some(lr));
            }
            None => step_lr.push(None),
        }
        log.push(f_cur);
    }
    Ok(FitOutcome {
        proj: cur,
        initial,
        objective_log: log,
        step_lr,
    })
}

/// Largest relative disagreement between the assembled gradient and a
/// one-dimensional central difference along random unit directions.
/// Relative error as in [`crate::gradcheck::relative_error`].
pub fn directional_check(
    problem: &FitProblem,
    proj: &ProjectionPair,
    directions: usize,
    h: f64,
    rng: &mut SeededRng,
    exec: Execution,
) -> Result<f64> {
    let g = problem.fd_gradient(proj, h, exec)?;
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let mut v: Vec<f64> = (0..g.len()).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        let along = |s: f64| {
            let mut p = proj.clone();
            for (i, vi) in v.iter().enumerate() {
                p.set_param(i, proj.param(i) + s * vi);
            }
            problem.objective(&p)
        };
        let direct = (along(h)? - along(-h)?) / (2.0 * h);
        let assembled: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        worst = worst.max(crate::gradcheck::relative_error(direct, assembled));
    }
    Ok(worst)
}
