//! Runtime scaling of the per-query step (clustering, attention, aggregate)
//! in the neighbourhood size `n`.
//!
//! Timing runs on the calling thread only. Each size gets its own seeded
//! workload, so repeated sweeps time identical inputs.

use std::fmt::Write as _;
use std::hint::black_box;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dqem::{aggregate_top_k, kmeans_with, AttentionOptions, KMeansOptions, ProjectionPair};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, FeatVec, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_sweep: Vec<usize>,
    pub k: usize,
    /// Lloyd iterations, always run in full.
    pub iters: usize,
    pub d: usize,
    pub top_k: usize,
    pub repeats: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_sweep: geometric_sweep(1000, 128_000, 2.0).expect("valid default sweep"),
            k: 6,
            iters: 20,
            d: 16,
            top_k: 4,
            repeats: 5,
            warmup: 1,
        }
    }
}

/// `n_min, n_min·factor, …` up to and including `n_max`.
pub fn geometric_sweep(n_min: usize, n_max: usize, factor: f64) -> Result<Vec<usize>> {
    if n_min == 0 {
        return Err(Error::config("n-min", "must be >= 1"));
    }
    if n_max < n_min {
        return Err(Error::config("n-max", "must be >= n-min"));
    }
    if !(factor > 1.0 && factor.is_finite()) {
        return Err(Error::config("factor", "must be > 1"));
    }
    let mut out = vec![n_min];
    loop {
        let next = (*out.last().unwrap() as f64 * factor).round() as usize;
        if next > n_max {
            break;
        }
        // a factor close to 1 can round back to the same size
        let next = next.max(out.last().unwrap() + 1);
        out.push(next);
    }
    Ok(out)
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sweep.is_empty() {
            return Err(Error::config("n-min", "the size sweep is empty"));
        }
        if self.n_sweep.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("n-sweep", "sizes must be strictly increasing"));
        }
        if self.n_sweep[0] == 0 {
            return Err(Error::config("n-min", "must be >= 1"));
        }
        if self.repeats < 3 {
            return Err(Error::config("repeats", "must be >= 3"));
        }
        if self.k == 0 || self.iters == 0 || self.d == 0 {
            return Err(Error::config("k", "k, iters and d must all be >= 1"));
        }
        if self.top_k == 0 || self.top_k > self.k {
            return Err(Error::config("topk", "need 1 <= topk <= k"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n: usize,
    pub median_seconds: f64,
    /// Slope fitted over this and all smaller sizes.
    pub slope_running: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
    pub k: usize,
    pub iters: usize,
    pub d: usize,
    /// Log-log slope; absent with fewer than two sizes.
    pub slope: Option<f64>,
    /// 95% interval; needs at least three sizes.
    pub slope_ci: Option<[f64; 2]>,
    /// Sizes dropped because their runtime was too close to the timer
    /// resolution.
    pub dropped_sizes: Vec<usize>,
    pub timer_resolution_seconds: f64,
    pub machine: String,
    pub note: String,
}

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,K,I,d,median_seconds,slope_running\n");
        for p in &self.points {
            let slope = p.slope_running.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{:.9e},{}",
                p.n, self.k, self.iters, self.d, p.median_seconds, slope
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Ordinary least squares `y = a + b·x`; returns `(b, standard error of b)`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let m = x.len();
    if m < 2 || y.len() != m {
        return None;
    }
    let mx = x.iter().sum::<f64>() / m as f64;
    let my = y.iter().sum::<f64>() / m as f64;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = sxy / sxx;
    let se = if m > 2 {
        let a = my - b * mx;
        let rss: f64 = x.iter().zip(y).map(|(xi, yi)| (yi - a - b * xi).powi(2)).sum();
        (rss / (m - 2) as f64 / sxx).sqrt()
    } else {
        f64::NAN
    };
    Some((b, se))
}

fn log_log_fit(points: &[(usize, f64)]) -> Option<(f64, f64)> {
    let x: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    ols_slope(&x, &y)
}

/// `n` features drawn around `k` random centres.
pub fn workload(n: usize, k: usize, d: usize, seed: u64) -> (Vec<FeatVec>, FeatVec) {
    let mut rng = SeededRng::new(seed);
    let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| 3.0 * rng.normal()).collect()).collect();
    let feats = (0..n)
        .map(|_| {
            let c = &centers[rng.index(k)];
            FeatVec::from_vec_unchecked(c.iter().map(|m| m + rng.normal()).collect())
        })
        .collect();
    let q = FeatVec::from_vec_unchecked((0..d).map(|_| rng.normal()).collect());
    (feats, q)
}

/// One per-query step: clustering with a fixed iteration count, then top-k
/// attention and aggregation.
pub fn dqem_step(
    feats: &[FeatVec],
    q: &FeatVec,
    k: usize,
    iters: usize,
    top_k: usize,
    proj: &ProjectionPair,
    seed: u64,
) -> Result<FeatVec> {
    let mut rng = SeededRng::new(seed);
    let opts = KMeansOptions {
        max_iters: iters,
        early_stop: false,
        restarts: 1,
    };
    let clusters = kmeans_with(feats, k, opts, &mut rng)?;
    let att = aggregate_top_k(q, &clusters, proj, top_k, AttentionOptions::default())?;
    Ok(att.aggregated)
}

/// Smallest observable nonzero step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Measurements shorter than this many clock ticks are not trusted.
const MIN_TICKS: f64 = 1000.0;

pub fn machine_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{}, {} hardware threads, parallel feature {}",
        std::env::consts::ARCH,
        std::env::consts::OS,
        threads,
        if cfg!(feature = "parallel") { "on" } else { "off" }
    )
}

pub fn run_scaling(cfg: &BenchConfig, seed: u64) -> Result<ScalingReport> {
    cfg.validate()?;
    let proj = ProjectionPair::identity(cfg.d);
    let resolution = timer_resolution().as_secs_f64();
    let mut dropped = Vec::new();
    let mut measured: Vec<(usize, f64)> = Vec::new();
    for &n in &cfg.n_sweep {
        let wseed = derive_seed(seed, &format!("bench-workload-{n}"));
        let (feats, q) = workload(n, cfg.k, cfg.d, wseed);
        let step_seed = derive_seed(seed, &format!("bench-kmeans-{n}"));
        for _ in 0..cfg.warmup {
            black_box(dqem_step(&feats, &q, cfg.k, cfg.iters, cfg.top_k, &proj, step_seed)?);
        }
        let mut times = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            let t0 = Instant::now();
            black_box(dqem_step(black_box(&feats), &q, cfg.k, cfg.iters, cfg.top_k, &proj, step_seed)?);
            times.push(t0.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        let median = times[times.len() / 2];
        // the minimum size is raised until timings clear the clock resolution
        if measured.is_empty() && median < MIN_TICKS * resolution {
            dropped.push(n);
            continue;
        }
        measured.push((n, median.max(resolution)));
    }
    let points = (0..measured.len())
        .map(|i| ScalingPoint {
            n: measured[i].0,
            median_seconds: measured[i].1,
            slope_running: log_log_fit(&measured[..=i]).map(|f| f.0),
        })
        .collect();
    let fit = log_log_fit(&measured);
    let slope_ci = fit.and_then(|(b, se)| {
        let df = measured.len() as f64 - 2.0;
        if df < 1.0 || !se.is_finite() {
            return None;
        }
        let t = StudentsT::new(0.0, 1.0, df).ok()?.inverse_cdf(0.975);
        Some([b - t * se, b + t * se])
    });
    Ok(ScalingReport {
        points,
        k: cfg.k,
        iters: cfg.iters,
        d: cfg.d,
        slope: fit.map(|f| f.0),
        slope_ci,
        dropped_sizes: dropped,
        timer_resolution_seconds: resolution,
        machine: machine_descriptor(),
        note: "Scaling shape only. Absolute times are CPU wall-clock for one query \
               and are not comparable to GPU frame rates."
            .into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_is_geometric() {
        assert_eq!(
            geometric_sweep(1000, 128_000, 2.0).unwrap(),
            vec![1000, 2000, 4000, 8000, 16000, 32000, 64000, 128000]
        );
        assert_eq!(geometric_sweep(5, 5, 2.0).unwrap(), vec![5]);
        assert_eq!(geometric_sweep(3, 6, 1.1).unwrap(), vec![3, 4, 5, 6]);
        assert!(geometric_sweep(0, 5, 2.0).is_err());
        assert!(geometric_sweep(5, 4, 2.0).is_err());
        assert!(geometric_sweep(5, 40, 1.0).is_err());
    }

    #[test]
    fn ols_recovers_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let (b, se) = ols_slope(&x, &y).unwrap();
        assert!((b - 2.0).abs() < 1e-12);
        assert!(se.abs() < 1e-12);
        assert!(ols_slope(&[1.0], &[2.0]).is_none());
        assert!(ols_slope(&[1.0, 1.0], &[2.0, 3.0]).is_none());
    }

    #[test]
    fn config_validation() {
        let ok = BenchConfig::default();
        ok.validate().unwrap();
        assert!(BenchConfig { repeats: 2, ..ok.clone() }.validate().is_err());
        assert!(BenchConfig { n_sweep: vec![10, 10], ..ok.clone() }.validate().is_err());
        assert!(BenchConfig { n_sweep: vec![], ..ok }.validate().is_err());
    }

    #[test]
    fn single_size_has_no_slope() {
        let cfg = BenchConfig {
            n_sweep: vec![20_000],
            repeats: 3,
            warmup: 0,
            ..BenchConfig::default()
        };
        let r = run_scaling(&cfg, 1).unwrap();
        assert_eq!(r.points.len() + r.dropped_sizes.len(), 1);
        assert!(r.slope.is_none());
        assert!(r.slope_ci.is_none());
        assert!(r.points.iter().all(|p| p.median_seconds > 0.0));
    }

    #[test]
    fn workload_is_deterministic() {
        let a = workload(50, 3, 4, 9);
        let b = workload(50, 3, 4, 9);
        assert_eq!(a, b);
        let proj = ProjectionPair::identity(4);
        let x = dqem_step(&a.0, &a.1, 3, 5, 2, &proj, 1).unwrap();
        let y = dqem_step(&b.0, &b.1, 3, 5, 2, &proj, 1).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn csv_layout() {
        let r = ScalingReport {
            points: vec![
                ScalingPoint { n: 10, median_seconds: 1e-3, slope_running: None },
                ScalingPoint { n: 20, median_seconds: 2e-3, slope_running: Some(1.0) },
            ],
            k: 6,
            iters: 20,
            d: 16,
            slope: Some(1.0),
            slope_ci: None,
            dropped_sizes: vec![],
            timer_resolution_seconds: 1e-9,
            machine: String::new(),
            note: String::new(),
        };
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "n,K,I,d,median_seconds,slope_running");
        assert!(lines[1].starts_with("10,6,20,16,") && lines[1].ends_with(','));
        assert!(lines[2].ends_with(",1.000000"));
    }
}
