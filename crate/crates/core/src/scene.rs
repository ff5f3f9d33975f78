//! Synthetic BEV scenes.
//!
//! Each object scatters feature points over its footprint. A point's feature
//! is `E·a + ε`, where `a` is the standardized 9-attribute box vector and `E`
//! is a seeded `d×9` matrix with orthonormal columns, so `Eᵀ` recovers the
//! attributes exactly when the noise is zero. Background points carry pure
//! noise.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, FeatVec, SeededRng};

pub const N_ATTRS: usize = 9;

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let w = theta - two_pi * ((theta + PI) / two_pi).floor();
    // guard the rounding edge where w lands exactly on π
    if w >= PI {
        w - two_pi
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Bounds {
    pub fn centered(half_extent: f64) -> Self {
        Bounds {
            min: [-half_extent, -half_extent],
            max: [half_extent, half_extent],
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (self.min[0]..=self.max[0]).contains(&p[0]) && (self.min[1]..=self.max[1]).contains(&p[1])
    }

    /// True when a disc of `radius` around `p` fits inside.
    pub fn contains_disc(&self, p: [f64; 2], radius: f64) -> bool {
        p[0] - radius >= self.min[0]
            && p[0] + radius <= self.max[0]
            && p[1] - radius >= self.min[1]
            && p[1] + radius <= self.max[1]
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    pub fn diagonal(&self) -> f64 {
        (self.max[0] - self.min[0]).hypot(self.max[1] - self.min[1])
    }
}

/// The 9-tuple box state `(x, y, z, w, l, h, θ, vx, vy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct BoxAttributes {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
}

impl BoxAttributes {
    /// Validates dimensions and wraps the yaw.
    pub fn from_array(a: [f64; 9]) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("box attribute".into()));
        }
        let [x, y, z, w, l, h, theta, vx, vy] = a;
        if w <= 0.0 || l <= 0.0 || h <= 0.0 {
            return Err(Error::arg(format!(
                "box dimensions must be positive, got ({w}, {l}, {h})"
            )));
        }
        Ok(BoxAttributes {
            x,
            y,
            z,
            w,
            l,
            h,
            theta: wrap_angle(theta),
            vx,
            vy,
        })
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.x, self.y, self.z, self.w, self.l, self.h, self.theta, self.vx, self.vy,
        ]
    }

    pub fn center(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn velocity(&self) -> [f64; 2] {
        [self.vx, self.vy]
    }

    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.w.hypot(self.l)
    }
}

impl TryFrom<[f64; 9]> for BoxAttributes {
    type Error = Error;

    fn try_from(a: [f64; 9]) -> Result<Self> {
        BoxAttributes::from_array(a)
    }
}

impl From<BoxAttributes> for [f64; 9] {
    fn from(b: BoxAttributes) -> [f64; 9] {
        b.to_array()
    }
}

/// Maps raw box attributes onto channels of comparable magnitude: positions
/// and velocities divided by fixed scales, dimensions log-scaled, yaw
/// divided by π.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardization {
    pub position_scale: f64,
    pub height_scale: f64,
    pub velocity_scale: f64,
}

pub const STANDARDIZATION: Standardization = Standardization {
    position_scale: 10.0,
    height_scale: 1.0,
    velocity_scale: 20.0,
};

impl Standardization {
    pub fn forward(&self, b: &BoxAttributes) -> [f64; 9] {
        [
            b.x / self.position_scale,
            b.y / self.position_scale,
            b.z / self.height_scale,
            b.w.ln(),
            b.l.ln(),
            b.h.ln(),
            b.theta / PI,
            b.vx / self.velocity_scale,
            b.vy / self.velocity_scale,
        ]
    }

    pub fn inverse(&self, s: &[f64; 9]) -> BoxAttributes {
        BoxAttributes {
            x: s[0] * self.position_scale,
            y: s[1] * self.position_scale,
            z: s[2] * self.height_scale,
            w: s[3].exp(),
            l: s[4].exp(),
            h: s[5].exp(),
            theta: wrap_angle(s[6] * PI),
            vx: s[7] * self.velocity_scale,
            vy: s[8] * self.velocity_scale,
        }
    }
}

/// The seeded `d×9` encoding matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    seed: u64,
    d: usize,
    columns: Vec<Vec<f64>>,
}

impl Encoder {
    pub fn new(seed: u64, d: usize) -> Result<Self> {
        if d < N_ATTRS {
            return Err(Error::config(
                "d",
                format!("feature dimension {d} is below the {N_ATTRS} encoded attributes"),
            ));
        }
        let mut rng = SeededRng::new(seed);
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(N_ATTRS);
        while columns.len() < N_ATTRS {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            // modified Gram-Schmidt, two passes
            for _ in 0..2 {
                for c in &columns {
                    let p = dot(&v, c);
                    v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
                }
            }
            let n = dot(&v, &v).sqrt();
            if n > 1e-8 {
                v.iter_mut().for_each(|a| *a /= n);
                columns.push(v);
            }
        }
        Ok(Encoder { seed, d, columns })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    /// `E·s` for a standardized attribute vector.
    pub fn embed(&self, s: &[f64; 9]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for (c, sj) in self.columns.iter().zip(s) {
            out.iter_mut().zip(c).for_each(|(o, e)| *o += sj * e);
        }
        out
    }

    /// `Eᵀ·f`.
    pub fn project(&self, feat: &[f64]) -> [f64; 9] {
        let mut s = [0.0; 9];
        for (sj, c) in s.iter_mut().zip(&self.columns) {
            *sj = dot(c, feat);
        }
        s
    }

    pub fn encode(&self, b: &BoxAttributes) -> FeatVec {
        FeatVec::from_vec_unchecked(self.embed(&STANDARDIZATION.forward(b)))
    }

    /// Decodes without the background test.
    pub fn decode_attrs(&self, feat: &[f64]) -> BoxAttributes {
        STANDARDIZATION.inverse(&self.project(feat))
    }
}

/// Norm below which a feature is treated as background: three standard
/// deviations of the pure-noise feature norm.
pub fn background_threshold(noise_sigma: f64, d: usize) -> f64 {
    3.0 * noise_sigma * (d as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoded {
    Object(BoxAttributes),
    Background,
}

impl Decoded {
    pub fn object(&self) -> Option<&BoxAttributes> {
        match self {
            Decoded::Object(b) => Some(b),
            Decoded::Background => None,
        }
    }
}

pub fn decode_feature(feat: &[f64], encoder: &Encoder, bg_threshold: f64) -> Decoded {
    if crate::numerics::norm(feat) <= bg_threshold {
        Decoded::Background
    } else {
        Decoded::Object(encoder.decode_attrs(feat))
    }
}

/// Encoder plus background threshold for one frame.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub encoder: Encoder,
    pub bg_threshold: f64,
}

impl Decoder {
    pub fn new(encoder: Encoder, noise_sigma: f64) -> Self {
        let bg_threshold = background_threshold(noise_sigma, encoder.dim());
        Decoder {
            encoder,
            bg_threshold,
        }
    }

    pub fn for_frame(frame: &Frame, noise_sigma: f64) -> Result<Self> {
        Ok(Decoder::new(frame.encoder()?, noise_sigma))
    }

    pub fn decode(&self, feat: &[f64]) -> Decoded {
        decode_feature(feat, &self.encoder, self.bg_threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(rename = "box")]
    pub attrs: BoxAttributes,
    pub track_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePoint {
    #[serde(rename = "xy")]
    pub pos: [f64; 2],
    #[serde(rename = "f")]
    pub feat: FeatVec,
}

/// One time step: ground truth plus the feature field the detector sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub timestamp: f64,
    pub gt: Vec<GtBox>,
    pub points: Vec<FeaturePoint>,
    pub encoder_seed: u64,
    pub d: usize,
}

impl Frame {
    pub fn encoder(&self) -> Result<Encoder> {
        Encoder::new(self.encoder_seed, self.d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedTrack {
    pub track_id: u32,
    /// First frame index the track is missing from.
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub frames: Vec<Frame>,
    pub frame_interval: f64,
    pub dropped: Vec<DroppedTrack>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Scene bounds are `[-half_extent, half_extent]²` metres.
    pub half_extent: f64,
    pub n_objects: usize,
    pub points_per_object: usize,
    pub background_points: usize,
    pub noise_sigma: f64,
    pub d: usize,
    /// Object speeds are drawn uniformly from this range (m/s), heading
    /// along the box yaw.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Minimum BEV distance between object centres at placement time.
    pub min_separation: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            half_extent: 50.0,
            n_objects: 10,
            points_per_object: 20,
            background_points: 2000,
            noise_sigma: 0.05,
            d: 16,
            speed_min: 0.0,
            speed_max: 5.0,
            min_separation: 12.0,
        }
    }
}

const PLACEMENT_MARGIN: f64 = 5.0;
const PLACEMENT_TRIES: usize = 1000;

impl SceneConfig {
    pub fn bounds(&self) -> Bounds {
        Bounds::centered(self.half_extent)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.half_extent > PLACEMENT_MARGIN) {
            return Err(Error::config(
                "half-extent",
                format!("must exceed the {PLACEMENT_MARGIN} m placement margin"),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise-sigma", "must be finite and >= 0"));
        }
        if self.d < N_ATTRS {
            return Err(Error::config(
                "d",
                format!("must be at least {N_ATTRS} so the encoding is injective"),
            ));
        }
        if !(self.speed_min >= 0.0 && self.speed_max >= self.speed_min) {
            return Err(Error::config("speed-max", "need 0 <= speed-min <= speed-max"));
        }
        if !(self.min_separation >= 0.0) {
            return Err(Error::config("min-separation", "must be >= 0"));
        }
        Ok(())
    }
}

fn sample_objects(cfg: &SceneConfig, rng: &mut SeededRng) -> Vec<GtBox> {
    let reach = cfg.half_extent - PLACEMENT_MARGIN;
    let mut out: Vec<GtBox> = Vec::with_capacity(cfg.n_objects);
    for id in 0..cfg.n_objects {
        let mut xy = [0.0; 2];
        for _ in 0..PLACEMENT_TRIES {
            xy = [rng.uniform_in(-reach, reach), rng.uniform_in(-reach, reach)];
            let clear = out.iter().all(|g| {
                (g.attrs.x - xy[0]).hypot(g.attrs.y - xy[1]) >= cfg.min_separation
            });
            if clear {
                break;
            }
        }
        let w = rng.uniform_in(1.6, 2.2);
        let l = rng.uniform_in(3.8, 5.0);
        let h = rng.uniform_in(1.4, 1.9);
        let theta = rng.uniform_in(-PI, PI);
        let speed = rng.uniform_in(cfg.speed_min, cfg.speed_max);
        let attrs = BoxAttributes {
            x: xy[0],
            y: xy[1],
            z: 0.5 * h,
            w,
            l,
            h,
            theta: wrap_angle(theta),
            vx: speed * theta.cos(),
            vy: speed * theta.sin(),
        };
        out.push(GtBox {
            attrs,
            track_id: id as u32,
        });
    }
    out
}

fn render_frame(
    cfg: &SceneConfig,
    objects: &[GtBox],
    timestamp: f64,
    encoder: &Encoder,
    rng: &mut SeededRng,
) -> Frame {
    let bounds = cfg.bounds();
    let mut points =
        Vec::with_capacity(objects.len() * cfg.points_per_object + cfg.background_points);
    let noise = |rng: &mut SeededRng, base: &mut Vec<f64>| {
        for v in base.iter_mut() {
            *v += cfg.noise_sigma * rng.normal();
        }
    };
    for obj in objects {
        let b = &obj.attrs;
        let clean = encoder.embed(&STANDARDIZATION.forward(b));
        let (s, c) = b.theta.sin_cos();
        for _ in 0..cfg.points_per_object {
            let u = rng.uniform_in(-0.5 * b.l, 0.5 * b.l);
            let v = rng.uniform_in(-0.5 * b.w, 0.5 * b.w);
            let pos = [b.x + c * u - s * v, b.y + s * u + c * v];
            let mut f = clean.clone();
            noise(rng, &mut f);
            points.push(FeaturePoint {
                pos,
                feat: FeatVec::from_vec_unchecked(f),
            });
        }
    }
    for _ in 0..cfg.background_points {
        let pos = [
            rng.uniform_in(bounds.min[0], bounds.max[0]),
            rng.uniform_in(bounds.min[1], bounds.max[1]),
        ];
        let mut f = vec![0.0; cfg.d];
        noise(rng, &mut f);
        points.push(FeaturePoint {
            pos,
            feat: FeatVec::from_vec_unchecked(f),
        });
    }
    Frame {
        timestamp,
        gt: objects.to_vec(),
        points,
        encoder_seed: encoder.seed(),
        d: cfg.d,
    }
}

pub fn generate_frame(cfg: &SceneConfig, rng: &mut SeededRng) -> Result<Frame> {
    cfg.validate()?;
    let encoder = Encoder::new(rng.next_u64(), cfg.d)?;
    let objects = sample_objects(cfg, rng);
    Ok(render_frame(cfg, &objects, 0.0, &encoder, rng))
}

/// `frames` time steps at a constant `interval`. Objects move at constant
/// velocity; a track whose footprint leaves the bounds is dropped from then
/// on.
pub fn generate_sequence(
    cfg: &SceneConfig,
    frames: usize,
    interval: f64,
    rng: &mut SeededRng,
) -> Result<SceneSequence> {
    cfg.validate()?;
    if frames == 0 {
        return Err(Error::config("frames", "a sequence needs at least one frame"));
    }
    if !(interval > 0.0 && interval.is_finite()) {
        return Err(Error::config("interval", "must be positive"));
    }
    let encoder = Encoder::new(rng.next_u64(), cfg.d)?;
    let mut objects = sample_objects(cfg, rng);
    let bounds = cfg.bounds();
    let mut out = Vec::with_capacity(frames);
    let mut dropped = Vec::new();
    for t in 0..frames {
        if t > 0 {
            for o in objects.iter_mut() {
                o.attrs.x += o.attrs.vx * interval;
                o.attrs.y += o.attrs.vy * interval;
            }
            objects.retain(|o| {
                let inside = bounds.contains_disc(o.attrs.center(), o.attrs.half_diagonal());
                if !inside {
                    dropped.push(DroppedTrack {
                        track_id: o.track_id,
                        frame: t,
                    });
                }
                inside
            });
        }
        out.push(render_frame(
            cfg,
            &objects,
            t as f64 * interval,
            &encoder,
            rng,
        ));
    }
    Ok(SceneSequence {
        frames: out,
        frame_interval: interval,
        dropped,
    })
}
