//! Detection driver and the detection-file records.

use serde::{Deserialize, Serialize};

use crate::dqem::{
    evolve_one, query_seed, DqemParams, Evolution, NeighborhoodMode,
    ProjectionPair, QueryGrid, QuerySet, SoftmaxDomain, StepContext, TemporalInput,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ltfm::{run_sequence, SequenceRun, TemporalParams, TemporalState};
use crate::numerics::{mix64, SeededRng};
use crate::scene::{BoxAttributes, Bounds, Decoder, Frame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub attrs: BoxAttributes,
    /// Largest selected attention weight of the final round.
    pub score: f64,
    pub query_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsEcho {
    pub k: usize,
    pub topk: usize,
    pub beta: f64,
    pub radius: f64,
    pub iters: usize,
    pub kmeans_iters: usize,
    pub dscale: bool,
    pub softmax_domain: SoftmaxDomain,
    pub neighborhood: NeighborhoodMode,
    pub grid: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal: Option<TemporalParams>,
}

/// One line of a detection file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub timestamp: f64,
    pub detections: Vec<Detection>,
    pub iterations: usize,
    pub params: ParamsEcho,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused: Option<bool>,
}

/// Seed for frame `t` of a run.
pub fn frame_seed(run_seed: u64, t: usize) -> u64 {
    mix64(run_seed ^ mix64(t as u64))
}

/// Query evolution results for one frame.
pub struct FrameOutput {
    pub timestamp: f64,
    pub evolution: Evolution,
    pub fused: bool,
    /// Velocity estimate per query; `None` for queries that did not decode
    /// to an object.
    pub velocities: Vec<Option<[f64; 2]>>,
}

impl FrameOutput {
    fn new(timestamp: f64, evolution: Evolution, fused: bool) -> Self {
        let velocities = evolution
            .traces
            .iter()
            .map(|t| t.is_object().then(|| t.final_state().velocity()))
            .collect();
        FrameOutput {
            timestamp,
            evolution,
            fused,
            velocities,
        }
    }

    pub fn kmeans_calls(&self) -> usize {
        self.evolution.traces.iter().map(|t| t.kmeans_calls).sum()
    }

    /// One detection per query that decoded to an object.
    pub fn detections(&self) -> Vec<Detection> {
        self.evolution
            .traces
            .iter()
            .zip(&self.velocities)
            .filter(|(t, _)| t.is_object())
            .map(|(t, v)| Detection {
                attrs: *t.final_state(),
                score: t.confidence(),
                query_id: t.query_id,
                velocity: *v,
            })
            .collect()
    }
}

/// Everything needed to run detection on frames from one scene family.
#[derive(Debug, Clone)]
pub struct Detector {
    pub params: DqemParams,
    pub grid: QueryGrid,
    pub bounds: Bounds,
    pub proj: ProjectionPair,
    /// Feature noise level assumed for the background threshold.
    pub noise_sigma: f64,
    pub exec: Execution,
}

impl Detector {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.proj.validate()?;
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise-sigma", "must be >= 0"));
        }
        Ok(())
    }

    pub fn initial_queries(&self, d: usize) -> Result<QuerySet> {
        self.grid.init(&self.bounds, d)
    }

    pub fn echo(&self, temporal: Option<&TemporalParams>) -> ParamsEcho {
        ParamsEcho {
            k: self.params.k,
            topk: self.params.top_k,
            beta: self.params.beta,
            radius: self.params.radius,
            iters: self.params.iterations,
            kmeans_iters: self.params.kmeans_iters,
            dscale: self.params.attention.scale_scores,
            softmax_domain: self.params.attention.softmax_domain,
            neighborhood: self.params.neighborhood,
            grid: [self.grid.nx, self.grid.ny],
            temporal: temporal.cloned(),
        }
    }

    fn check_frame(&self, frame: &Frame) -> Result<()> {
        if self.proj.dim() != frame.d {
            return Err(Error::arg(format!(
                "projections are {}-dimensional, frame features are {}",
                self.proj.dim(),
                frame.d
            )));
        }
        Ok(())
    }

    /// Plain query evolution on one frame.
    pub fn detect_frame(&self, frame: &Frame, frame_seed: u64) -> Result<FrameOutput> {
        self.check_frame(frame)?;
        let decoder = Decoder::for_frame(frame, self.noise_sigma)?;
        let queries = self.initial_queries(frame.d)?;
        let evolution = crate::dqem::evolve_queries(
            &queries,
            frame,
            &self.params,
            &self.proj,
            &decoder,
            frame_seed,
            self.exec,
        )?;
        Ok(FrameOutput::new(frame.timestamp, evolution, false))
    }

    pub(crate) fn fused_frame(
        &self,
        frame: &Frame,
        frame_seed: u64,
        state: &TemporalState,
        tp: &TemporalParams,
    ) -> Result<FrameOutput> {
        self.check_frame(frame)?;
        let decoder = Decoder::for_frame(frame, self.noise_sigma)?;
        let queries = self.initial_queries(frame.d)?;
        if state.prev_queries.len() != queries.len() || state.prev_clusters.len() != queries.len() {
            return Err(Error::Internal(format!(
                "temporal state holds {} queries, frame has {}",
                state.prev_queries.len(),
                queries.len()
            )));
        }
        let ctx = StepContext {
            frame,
            params: &self.params,
            proj: &self.proj,
            decoder: &decoder,
        };
        let results = self.exec.map(queries.len(), |i| {
            let mut rng = SeededRng::new(query_seed(frame_seed, i));
            let prev = &state.prev_queries.pillars()[i];
            let input = TemporalInput {
                q_prev: prev.decoded_feature(),
                prev_clusters: state.prev_clusters[i].as_ref(),
                alpha: tp.alpha,
                beta: tp.beta,
            };
            evolve_one(&ctx, &queries.pillars()[i], i, &mut rng, Some(input))
        });
        let mut pillars = Vec::with_capacity(queries.len());
        let mut traces = Vec::with_capacity(queries.len());
        for r in results {
            let (p, t) = r?;
            pillars.push(p);
            traces.push(t);
        }
        let evolution = Evolution {
            queries: QuerySet::new(pillars)?,
            traces,
        };
        Ok(FrameOutput::new(frame.timestamp, evolution, true))
    }

    pub fn run_sequence(
        &self,
        frames: &[Frame],
        interval: f64,
        tparams: Option<&TemporalParams>,
        seed: u64,
    ) -> Result<SequenceRun> {
        self.validate()?;
        run_sequence(self, frames, interval, tparams, seed)
    }

    /// Detection-file records for a processed sequence.
    pub fn records(&self, run: &SequenceRun, tparams: Option<&TemporalParams>) -> Vec<DetectionFrame> {
        let echo = self.echo(tparams);
        run.frames
            .iter()
            .map(|f| DetectionFrame {
                timestamp: f.timestamp,
                detections: f.detections(),
                iterations: self.params.iterations,
                params: echo.clone(),
                fused: tparams.map(|_| f.fused),
            })
            .collect()
    }
}

impl Default for Detector {
    fn default() -> Self {
        Detector {
            params: DqemParams::default(),
            grid: QueryGrid::default(),
            bounds: Bounds::centered(50.0),
            proj: ProjectionPair::identity(16),
            noise_sigma: 0.05,
            exec: Execution::default(),
        }
    }
}
