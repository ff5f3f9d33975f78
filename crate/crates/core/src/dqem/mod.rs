//! Dynamic query evolution.
//!
//! Each pillar query gathers the feature points within a fixed BEV radius,
//! starts from their mean, and then alternates K-means clustering of the
//! neighbourhood features with top-k attention over the cluster centres.
//! After every round the query is blended (`q ← q' + β·q`), renormalised to
//! unit length, and decoded back into box attributes, which move the pillar
//! for the next round's neighbourhood.

pub mod attention;
pub mod fit;
pub mod kmeans;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ltfm::{temporal_aggregate, temporal_init, temporal_update};
use crate::numerics::{FeatVec, SeededRng};
use crate::scene::{BoxAttributes, Bounds, Decoded, Decoder, FeaturePoint, Frame};

pub use attention::{
    aggregate_top_k, attention_scores, diversity_loss, diversity_loss_grad, AttentionOptions,
    AttentionResult, ProjectionPair, SoftmaxDomain, SquareMatrix,
};
pub use fit::{fit_projections, FitConfig, FitOutcome, FitProblem};
pub use kmeans::{kmeans, kmeans_with, ClusterSet, KMeansOptions};

/// A query anchored in BEV: box state plus the current query feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Pillar {
    pub attrs: BoxAttributes,
    pub feat: FeatVec,
    /// Multiplies `feat` to restore feature-space magnitude before decoding.
    pub scale: f64,
}

impl Pillar {
    pub fn decoded_feature(&self) -> FeatVec {
        self.feat.scaled(self.scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pillars: Vec<Pillar>,
}

impl QuerySet {
    pub fn new(pillars: Vec<Pillar>) -> Result<Self> {
        if pillars.is_empty() {
            return Err(Error::arg("a query set needs at least one pillar"));
        }
        Ok(QuerySet { pillars })
    }

    pub fn pillars(&self) -> &[Pillar] {
        &self.pillars
    }

    pub fn len(&self) -> usize {
        self.pillars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pillars.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborhoodMode {
    /// Re-gather around the decoded position before every round after the
    /// first.
    #[default]
    Regather,
    /// Keep the neighbourhood gathered at the initial pillar position.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqemParams {
    pub k: usize,
    pub top_k: usize,
    pub beta: f64,
    pub radius: f64,
    pub iterations: usize,
    pub kmeans_iters: usize,
    pub lambda: f64,
    pub attention: AttentionOptions,
    pub neighborhood: NeighborhoodMode,
}

impl Default for DqemParams {
    fn default() -> Self {
        DqemParams {
            k: 6,
            top_k: 4,
            beta: 0.6,
            radius: 8.0,
            iterations: 3,
            kmeans_iters: 20,
            lambda: 0.1,
            attention: AttentionOptions::default(),
            neighborhood: NeighborhoodMode::Regather,
        }
    }
}

impl DqemParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "must be >= 1"));
        }
        if self.top_k == 0 || self.top_k > self.k {
            return Err(Error::config("topk", "need 1 <= topk <= k"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be finite and >= 0"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::config("radius", "must be > 0"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iters", "must be >= 1"));
        }
        if self.kmeans_iters == 0 {
            return Err(Error::config("kmeans-iters", "must be >= 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// A typical passenger car, zero yaw and velocity.
pub fn default_template() -> BoxAttributes {
    BoxAttributes {
        x: 0.0,
        y: 0.0,
        z: 0.85,
        w: 1.9,
        l: 4.5,
        h: 1.7,
        theta: 0.0,
        vx: 0.0,
        vy: 0.0,
    }
}

/// Regular grid of pillar anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGrid {
    pub nx: usize,
    pub ny: usize,
    pub template: BoxAttributes,
}

impl Default for QueryGrid {
    fn default() -> Self {
        QueryGrid {
            nx: 10,
            ny: 10,
            template: default_template(),
        }
    }
}

impl QueryGrid {
    pub fn init(&self, bounds: &Bounds, d: usize) -> Result<QuerySet> {
        init_pillars(self.nx, self.ny, bounds, &self.template, d)
    }
}

/// Pillars at the cell centres of an `nx × ny` grid over `bounds`, with the
/// template's dimensions and height, zero yaw and velocity, and a zero
/// feature.
pub fn init_pillars(
    nx: usize,
    ny: usize,
    bounds: &Bounds,
    template: &BoxAttributes,
    d: usize,
) -> Result<QuerySet> {
    if nx == 0 || ny == 0 {
        return Err(Error::config("grid", "grid dimensions must be >= 1"));
    }
    let cw = (bounds.max[0] - bounds.min[0]) / nx as f64;
    let ch = (bounds.max[1] - bounds.min[1]) / ny as f64;
    let mut pillars = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            let attrs = BoxAttributes {
                x: bounds.min[0] + (i as f64 + 0.5) * cw,
                y: bounds.min[1] + (j as f64 + 0.5) * ch,
                theta: 0.0,
                vx: 0.0,
                vy: 0.0,
                ..*template
            };
            pillars.push(Pillar {
                attrs,
                feat: FeatVec::zeros(d),
                scale: 1.0,
            });
        }
    }
    QuerySet::new(pillars)
}

pub fn gather_neighborhood<'a>(
    pillar: &Pillar,
    frame: &'a Frame,
    radius: f64,
) -> Vec<&'a FeaturePoint> {
    gather_around(pillar.attrs.center(), frame, radius)
}

/// Points whose BEV distance to `center` is at most `radius`.
pub fn gather_around(center: [f64; 2], frame: &Frame, radius: f64) -> Vec<&FeaturePoint> {
    let r2 = radius * radius;
    frame
        .points
        .iter()
        .filter(|p| {
            let dx = p.pos[0] - center[0];
            let dy = p.pos[1] - center[1];
            dx * dx + dy * dy <= r2
        })
        .collect()
}

/// Mean feature. An empty input yields the zero vector and `true`.
pub fn initial_aggregate<V: AsRef<[f64]>>(features: &[V], d: usize) -> (FeatVec, bool) {
    if features.is_empty() {
        return (FeatVec::zeros(d), true);
    }
    let mut acc = vec![0.0; d];
    for f in features {
        acc.iter_mut().zip(f.as_ref()).for_each(|(a, v)| *a += v);
    }
    let inv = 1.0 / features.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    (FeatVec::from_vec_unchecked(acc), false)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFlags {
    /// Nothing within the radius of the initial pillar; passed through.
    pub empty_neighborhood: bool,
    /// A later re-gather came back empty; evolution stopped early.
    pub lost_neighborhood: bool,
    /// Some round had fewer distinct features than clusters.
    pub degenerate_clusters: bool,
    /// A blend produced the zero vector; the query was kept.
    pub zero_blend: bool,
}

/// Everything recorded while evolving one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTrace {
    pub query_id: usize,
    /// Pillar box state after the initial aggregate (index 0) and after each
    /// round.
    pub states: Vec<BoxAttributes>,
    /// Whether the decode behind each state was an object.
    pub object: Vec<bool>,
    pub attention: Vec<AttentionResult>,
    /// The fused-frame attention over pooled current and previous clusters.
    pub temporal_attention: Option<AttentionResult>,
    /// Clusters from the last completed round.
    pub final_clusters: Option<ClusterSet>,
    pub kmeans_calls: usize,
    pub flags: QueryFlags,
}

impl QueryTrace {
    pub fn is_object(&self) -> bool {
        self.object.last().copied().unwrap_or(false)
    }

    pub fn final_state(&self) -> &BoxAttributes {
        self.states.last().expect("trace has an initial state")
    }

    /// Largest selected attention weight in the last round.
    pub fn confidence(&self) -> f64 {
        self.attention
            .last()
            .or(self.temporal_attention.as_ref())
            .map_or(0.0, AttentionResult::concentration)
    }
}

pub struct Evolution {
    pub queries: QuerySet,
    pub traces: Vec<QueryTrace>,
}

pub(crate) struct StepContext<'a> {
    pub frame: &'a Frame,
    pub params: &'a DqemParams,
    pub proj: &'a ProjectionPair,
    pub decoder: &'a Decoder,
}

/// Previous-frame inputs for a fused frame.
pub(crate) struct TemporalInput<'a> {
    /// Previous query at feature magnitude.
    pub q_prev: FeatVec,
    pub prev_clusters: Option<&'a ClusterSet>,
    pub alpha: f64,
    pub beta: f64,
}

pub(crate) struct Blended {
    pub q: FeatVec,
    pub scale: f64,
    pub decoded: Decoded,
    pub zero_blend: bool,
}

/// Blends an attention result into the query, renormalises, and decodes at
/// the magnitude of the highest-weighted centre.
pub(crate) fn blend_and_decode(
    q: &FeatVec,
    scale: f64,
    att: &AttentionResult,
    centers: &[&FeatVec],
    beta: f64,
    decoder: &Decoder,
) -> Blended {
    if att.degenerate {
        return Blended {
            q: q.clone(),
            scale,
            decoded: decoder.decode(&q.scaled(scale)),
            zero_blend: false,
        };
    }
    let (q_new, zero_blend) = temporal_update(q, &att.aggregated, beta);
    let scale = att.top().map_or(scale, |i| centers[i].norm());
    Blended {
        decoded: decoder.decode(&q_new.scaled(scale)),
        q: q_new,
        scale,
        zero_blend,
    }
}

fn pool(clusters: &ClusterSet) -> Vec<&FeatVec> {
    clusters.non_empty().map(|(_, c)| c).collect()
}

/// Evolves a single pillar through `params.iterations` rounds.
pub(crate) fn evolve_one(
    ctx: &StepContext<'_>,
    pillar: &Pillar,
    query_id: usize,
    rng: &mut SeededRng,
    temporal: Option<TemporalInput<'_>>,
) -> Result<(Pillar, QueryTrace)> {
    let p = ctx.params;
    let mut trace = QueryTrace {
        query_id,
        states: vec![pillar.attrs],
        object: vec![false],
        attention: Vec::new(),
        temporal_attention: None,
        final_clusters: None,
        kmeans_calls: 0,
        flags: QueryFlags::default(),
    };
    let mut nbhd = gather_neighborhood(pillar, ctx.frame, p.radius);
    if nbhd.is_empty() {
        trace.flags.empty_neighborhood = true;
        return Ok((pillar.clone(), trace));
    }
    let d = ctx.frame.d;
    let (mut q, _) = initial_aggregate(&feats(&nbhd), d);
    let mut scale = 1.0;
    let mut attrs = pillar.attrs;
    if let Decoded::Object(b) = ctx.decoder.decode(&q) {
        attrs = b;
        trace.object[0] = true;
    }
    trace.states[0] = attrs;

    for round in 1..=p.iterations {
        if round > 1 && p.neighborhood == NeighborhoodMode::Regather {
            let next = gather_around(attrs.center(), ctx.frame, p.radius);
            if next.is_empty() {
                trace.flags.lost_neighborhood = true;
                break;
            }
            nbhd = next;
        }
        let clusters = kmeans(&feats(&nbhd), p.k, p.kmeans_iters, rng)?;
        trace.kmeans_calls += 1;
        trace.flags.degenerate_clusters |= clusters.degenerate();

        if round == 1 {
            if let Some(t) = &temporal {
                q = temporal_init(&q, &t.q_prev, t.alpha)?;
                let empty = ClusterSet::from_centers(Vec::new());
                let prev = t.prev_clusters.unwrap_or(&empty);
                let att = temporal_aggregate(&q, &clusters, prev, ctx.proj, p.top_k, p.attention)?;
                let mut pooled = pool(&clusters);
                pooled.extend(pool(prev));
                let b = blend_and_decode(&q, scale, &att, &pooled, t.beta, ctx.decoder);
                trace.flags.zero_blend |= b.zero_blend;
                q = b.q;
                scale = b.scale;
                trace.temporal_attention = Some(att);
            }
        }

        let att = aggregate_top_k(&q, &clusters, ctx.proj, p.top_k, p.attention)?;
        let b = blend_and_decode(&q, scale, &att, &pool(&clusters), p.beta, ctx.decoder);
        trace.flags.zero_blend |= b.zero_blend;
        q = b.q;
        scale = b.scale;
        let is_object = match b.decoded {
            Decoded::Object(box_) => {
                attrs = box_;
                true
            }
            Decoded::Background => false,
        };
        trace.states.push(attrs);
        trace.object.push(is_object);
        trace.attention.push(att);
        trace.final_clusters = Some(clusters);
    }

    Ok((
        Pillar {
            attrs,
            feat: q,
            scale,
        },
        trace,
    ))
}

fn feats<'a>(points: &[&'a FeaturePoint]) -> Vec<&'a FeatVec> {
    points.iter().map(|p| &p.feat).collect()
}

/// Per-query RNG stream: the frame seed XOR the query index.
pub fn query_seed(frame_seed: u64, query_index: usize) -> u64 {
    frame_seed ^ query_index as u64
}

/// Runs the full evolution for every query of a frame. Queries are
/// independent given the frame; each uses its own RNG stream, so
/// sequential and parallel runs agree bit for bit.
pub fn evolve_queries(
    queries: &QuerySet,
    frame: &Frame,
    params: &DqemParams,
    proj: &ProjectionPair,
    decoder: &Decoder,
    frame_seed: u64,
    exec: Execution,
) -> Result<Evolution> {
    params.validate()?;
    if proj.dim() != frame.d {
        return Err(Error::arg(format!(
            "projections are {}-dimensional, frame features are {}",
            proj.dim(),
            frame.d
        )));
    }
    let ctx = StepContext {
        frame,
        params,
        proj,
        decoder,
    };
    let results = exec.map(queries.len(), |i| {
        let mut rng = SeededRng::new(query_seed(frame_seed, i));
        evolve_one(&ctx, &queries.pillars[i], i, &mut rng, None)
    });
    let mut pillars = Vec::with_capacity(queries.len());
    let mut traces = Vec::with_capacity(queries.len());
    for r in results {
        let (p, t) = r?;
        pillars.push(p);
        traces.push(t);
    }
    Ok(Evolution {
        queries: QuerySet::new(pillars)?,
        traces,
    })
}
