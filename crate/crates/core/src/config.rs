//! Run configuration: every tunable in one place, loadable from a flat
//! `key = value` file with `#` comments. Keys use the same names as the
//! command-line flags.

use std::path::Path;
use std::str::FromStr;

use crate::bench::{geometric_sweep, BenchConfig};
use crate::detect::Detector;
use crate::dqem::{DqemParams, FitConfig, NeighborhoodMode, QueryGrid, SoftmaxDomain};
use crate::error::{Error, Result};
use crate::ltfm::TemporalParams;
use crate::scene::SceneConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub frames: usize,
    pub interval: f64,
    pub dqem: DqemParams,
    pub grid: QueryGrid,
    /// Whether temporal fusion runs.
    pub temporal: bool,
    pub tparams: TemporalParams,
    pub fit: FitConfig,
    pub n_min: usize,
    pub n_max: usize,
    pub factor: f64,
    pub repeats: usize,
    pub warmup: usize,
    pub cases: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scene: SceneConfig::default(),
            frames: 8,
            interval: 0.5,
            dqem: DqemParams::default(),
            grid: QueryGrid::default(),
            temporal: false,
            tparams: TemporalParams::default(),
            fit: FitConfig::default(),
            n_min: 1000,
            n_max: 128_000,
            factor: 2.0,
            repeats: 5,
            warmup: 1,
            cases: 100,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

pub fn parse_softmax_domain(value: &str) -> Result<SoftmaxDomain> {
    match value {
        "selected" => Ok(SoftmaxDomain::Selected),
        "full" => Ok(SoftmaxDomain::Full),
        _ => Err(Error::config("softmax-domain", format!("expected full or selected, got `{value}`"))),
    }
}

pub fn parse_neighborhood(value: &str) -> Result<NeighborhoodMode> {
    match value {
        "regather" => Ok(NeighborhoodMode::Regather),
        "fixed" => Ok(NeighborhoodMode::Fixed),
        _ => Err(Error::config("neighborhood", format!("expected regather or fixed, got `{value}`"))),
    }
}

impl RunConfig {
    /// Sets one field by its flag name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "frames" => {
                self.frames = parse(key, v)?;
                self.tparams.window = self.frames;
            }
            "interval" => self.interval = parse(key, v)?,
            "half-extent" => self.scene.half_extent = parse(key, v)?,
            "n-objects" => self.scene.n_objects = parse(key, v)?,
            "points-per-object" => self.scene.points_per_object = parse(key, v)?,
            "background-points" => self.scene.background_points = parse(key, v)?,
            "noise-sigma" => self.scene.noise_sigma = parse(key, v)?,
            "d" => self.scene.d = parse(key, v)?,
            "speed-min" => self.scene.speed_min = parse(key, v)?,
            "speed-max" => self.scene.speed_max = parse(key, v)?,
            "min-separation" => self.scene.min_separation = parse(key, v)?,
            "k" => self.dqem.k = parse(key, v)?,
            "topk" => self.dqem.top_k = parse(key, v)?,
            "beta" => self.dqem.beta = parse(key, v)?,
            "radius" => self.dqem.radius = parse(key, v)?,
            "iters" => self.dqem.iterations = parse(key, v)?,
            "kmeans-iters" => self.dqem.kmeans_iters = parse(key, v)?,
            "lambda" => self.dqem.lambda = parse(key, v)?,
            "dscale" => self.dqem.attention.scale_scores = parse_bool(key, v)?,
            "softmax-domain" => self.dqem.attention.softmax_domain = parse_softmax_domain(v)?,
            "neighborhood" => self.dqem.neighborhood = parse_neighborhood(v)?,
            "grid-nx" => self.grid.nx = parse(key, v)?,
            "grid-ny" => self.grid.ny = parse(key, v)?,
            "temporal" => self.temporal = parse_bool(key, v)?,
            "alpha" => self.tparams.alpha = parse(key, v)?,
            "temporal-beta" => self.tparams.beta = parse(key, v)?,
            "stride" => self.tparams.stride = parse(key, v)?,
            "steps" => self.fit.steps = parse(key, v)?,
            "lr" => self.fit.lr = parse(key, v)?,
            "n-min" => self.n_min = parse(key, v)?,
            "n-max" => self.n_max = parse(key, v)?,
            "factor" => self.factor = parse(key, v)?,
            "repeats" => self.repeats = parse(key, v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "cases" => self.cases = parse(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are
    /// skipped; a key may appear only once.
    pub fn apply_str(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |reason: String| Error::Format {
                path: origin.to_path_buf(),
                line: i + 1,
                reason,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail("expected `key = value`".into()))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(fail(format!("duplicate key `{key}`")));
            }
            self.set(key, value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_str(&std::fs::read_to_string(path)?, path)?;
        Ok(cfg)
    }

    /// Checks every section against its own invariants.
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.dqem.validate()?;
        if self.grid.nx == 0 || self.grid.ny == 0 {
            return Err(Error::config("grid-nx", "grid dimensions must be >= 1"));
        }
        if self.frames == 0 {
            return Err(Error::config("frames", "must be >= 1"));
        }
        if !(self.interval > 0.0 && self.interval.is_finite()) {
            return Err(Error::config("interval", "must be > 0"));
        }
        self.tparams.validate()?;
        self.fit.validate()?;
        self.bench()?.validate()?;
        if self.cases == 0 {
            return Err(Error::config("cases", "must be >= 1"));
        }
        Ok(())
    }

    pub fn bench(&self) -> Result<BenchConfig> {
        Ok(BenchConfig {
            n_sweep: geometric_sweep(self.n_min, self.n_max, self.factor)?,
            k: self.dqem.k,
            iters: self.dqem.kmeans_iters,
            d: self.scene.d,
            top_k: self.dqem.top_k,
            repeats: self.repeats,
            warmup: self.warmup,
        })
    }

    pub fn temporal_params(&self) -> Option<TemporalParams> {
        self.temporal.then(|| self.tparams.clone())
    }

    /// Detector with identity projections sized for the scene dimension.
    pub fn detector(&self) -> Detector {
        Detector {
            params: self.dqem.clone(),
            grid: self.grid.clone(),
            bounds: self.scene.bounds(),
            proj: crate::dqem::ProjectionPair::identity(self.scene.d),
            noise_sigma: self.scene.noise_sigma,
            exec: Default::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_settings() {
        let c = RunConfig::default();
        assert_eq!((c.dqem.k, c.dqem.top_k), (6, 4));
        assert_eq!((c.dqem.beta, c.tparams.alpha, c.dqem.lambda), (0.6, 0.4, 0.1));
        assert_eq!((c.frames, c.interval, c.tparams.stride), (8, 0.5, 2));
        c.validate().unwrap();
    }

    #[test]
    fn file_lines_set_fields() {
        let mut c = RunConfig::default();
        let text = "# experiment\nk = 8\n topk=6  # wider\n\nsoftmax-domain = full\ntemporal = true\n";
        c.apply_str(text, Path::new("x.conf")).unwrap();
        assert_eq!(c.dqem.k, 8);
        assert_eq!(c.dqem.top_k, 6);
        assert_eq!(c.dqem.attention.softmax_domain, SoftmaxDomain::Full);
        assert!(c.temporal);
    }

    #[test]
    fn errors_name_the_field() {
        let mut c = RunConfig::default();
        let e = c.apply_str("beta = lots", Path::new("x")).unwrap_err();
        assert!(e.to_string().contains("beta"), "{e}");
        let e = c.apply_str("bogus = 1", Path::new("x")).unwrap_err();
        assert!(e.to_string().contains("bogus"));
        let e = c.apply_str("k 6", Path::new("x")).unwrap_err();
        assert!(matches!(e, Error::Format { line: 1, .. }));
        let e = c.apply_str("k = 6\nk = 7", Path::new("x")).unwrap_err();
        assert!(matches!(e, Error::Format { line: 2, .. }));
        let mut c = RunConfig::default();
        c.set("topk", "9").unwrap();
        let e = c.validate().unwrap_err();
        assert!(e.to_string().contains("topk"));
        assert!(e.is_validation());
    }
}
