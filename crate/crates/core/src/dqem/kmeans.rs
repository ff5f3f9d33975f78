//! K-means over feature vectors: k-means++ seeding followed by Lloyd
//! iterations.

use crate::error::{Error, Result};
use crate::numerics::{sq_dist, FeatVec, SeededRng};

/// Result of clustering one neighbourhood.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    /// Cluster index per input feature.
    pub assignments: Vec<usize>,
    /// One centre per requested cluster. Entries with size zero are padding
    /// or emptied clusters and carry no members.
    pub centers: Vec<FeatVec>,
    pub sizes: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, then the final value.
    pub inertia_history: Vec<f64>,
    /// Lloyd iterations actually run.
    pub iterations: usize,
    /// Centres k-means++ could seed; below `centers.len()` when the input has
    /// fewer distinct features than requested clusters.
    pub seeded: usize,
}

impl ClusterSet {
    /// Wraps explicit centres as a set of singleton clusters. Used where
    /// centres come from elsewhere (tests, pooled temporal candidates).
    pub fn from_centers(centers: Vec<FeatVec>) -> Self {
        let k = centers.len();
        ClusterSet {
            assignments: (0..k).collect(),
            sizes: vec![1; k],
            centers,
            inertia: 0.0,
            inertia_history: vec![0.0],
            iterations: 0,
            seeded: k,
        }
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn non_empty(&self) -> impl Iterator<Item = (usize, &FeatVec)> + '_ {
        self.centers
            .iter()
            .enumerate()
            .filter(|(i, _)| self.sizes[*i] > 0)
    }

    pub fn non_empty_count(&self) -> usize {
        self.sizes.iter().filter(|&&s| s > 0).count()
    }

    /// Fewer distinct features than requested clusters.
    pub fn degenerate(&self) -> bool {
        self.seeded < self.centers.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansOptions {
    pub max_iters: usize,
    /// Stop once an assignment pass changes nothing.
    pub early_stop: bool,
    /// Independent seeded runs; the one with the lowest final inertia is
    /// kept (earliest on ties).
    pub restarts: usize,
}

impl KMeansOptions {
    pub fn new(max_iters: usize) -> Self {
        KMeansOptions {
            max_iters,
            early_stop: true,
            restarts: 1,
        }
    }
}

pub fn kmeans<V: AsRef<[f64]>>(
    features: &[V],
    k: usize,
    max_iters: usize,
    rng: &mut SeededRng,
) -> Result<ClusterSet> {
    kmeans_with(features, k, KMeansOptions::new(max_iters), rng)
}

pub fn kmeans_with<V: AsRef<[f64]>>(
    features: &[V],
    k: usize,
    opts: KMeansOptions,
    rng: &mut SeededRng,
) -> Result<ClusterSet> {
    if features.is_empty() {
        return Err(Error::arg("k-means over an empty feature set"));
    }
    if k == 0 {
        return Err(Error::arg("k-means needs K >= 1"));
    }
    let d = features[0].as_ref().len();
    if features.iter().any(|f| f.as_ref().len() != d) {
        return Err(Error::arg("k-means features differ in dimension"));
    }
    let mut best = single_run(features, k, opts, rng);
    for _ in 1..opts.restarts {
        let next = single_run(features, k, opts, rng);
        if next.inertia < best.inertia {
            best = next;
        }
    }
    Ok(best)
}

fn single_run<V: AsRef<[f64]>>(
    features: &[V],
    k: usize,
    opts: KMeansOptions,
    rng: &mut SeededRng,
) -> ClusterSet {
    let mut centers = seed_plus_plus(features, k, rng);
    let seeded = centers.len();
    let n = features.len();
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::with_capacity(opts.max_iters + 1);
    let mut iterations = 0;

    for it in 0..opts.max_iters.max(1) {
        let (changed, inertia) = assign(features, &centers, &mut assignments);
        history.push(inertia);
        iterations = it + 1;
        if it > 0 && !changed && opts.early_stop {
            break;
        }
        recenter(features, &assignments, &mut centers);
    }

    let mut sizes = vec![0usize; k];
    for &a in &assignments {
        sizes[a] += 1;
    }
    let inertia: f64 = features
        .iter()
        .zip(&assignments)
        .map(|(f, &a)| sq_dist(f.as_ref(), &centers[a]))
        .sum();
    history.push(inertia);

    // pad to K; padded clusters have no members
    while centers.len() < k {
        centers.push(centers[0].clone());
    }
    ClusterSet {
        assignments,
        centers: centers.into_iter().map(FeatVec::from_vec_unchecked).collect(),
        sizes,
        inertia,
        inertia_history: history,
        iterations,
        seeded,
    }
}

/// k-means++: first centre uniform, then proportional to squared distance to
/// the nearest chosen centre. Stops early when every point coincides with a
/// chosen centre.
fn seed_plus_plus<V: AsRef<[f64]>>(features: &[V], k: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let n = features.len();
    let first = features[rng.index(n)].as_ref().to_vec();
    let mut d2: Vec<f64> = features.iter().map(|f| sq_dist(f.as_ref(), &first)).collect();
    let mut centers = vec![first];
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let target = rng.uniform() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, w) in d2.iter().enumerate() {
            if *w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        // pick is Some: total > 0 means some weight is positive
        let c = features[pick.unwrap()].as_ref().to_vec();
        for (w, f) in d2.iter_mut().zip(features) {
            *w = w.min(sq_dist(f.as_ref(), &c));
        }
        centers.push(c);
    }
    centers
}

/// Nearest-centre assignment, ties to the lower index. Returns whether any
/// assignment changed and the resulting inertia.
fn assign<V: AsRef<[f64]>>(
    features: &[V],
    centers: &[Vec<f64>],
    assignments: &mut [usize],
) -> (bool, f64) {
    let mut changed = false;
    let mut inertia = 0.0;
    for (f, a) in features.iter().zip(assignments.iter_mut()) {
        let f = f.as_ref();
        let mut best = 0;
        let mut best_d = sq_dist(f, &centers[0]);
        for (j, c) in centers.iter().enumerate().skip(1) {
            let dj = sq_dist(f, c);
            if dj < best_d {
                best_d = dj;
                best = j;
            }
        }
        if *a != best {
            *a = best;
            changed = true;
        }
        inertia += best_d;
    }
    (changed, inertia)
}

/// Moves each centre to the mean of its members. An emptied cluster is
/// re-seeded at the point farthest from its previous centre.
fn recenter<V: AsRef<[f64]>>(features: &[V], assignments: &[usize], centers: &mut [Vec<f64>]) {
    let k = centers.len();
    let d = centers[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (f, &a) in features.iter().zip(assignments) {
        counts[a] += 1;
        sums[a]
            .iter_mut()
            .zip(f.as_ref())
            .for_each(|(s, v)| *s += v);
    }
    for j in 0..k {
        if counts[j] > 0 {
            let inv = 1.0 / counts[j] as f64;
            for (c, s) in centers[j].iter_mut().zip(&sums[j]) {
                *c = s * inv;
            }
        } else {
            let far = features
                .iter()
                .map(|f| sq_dist(f.as_ref(), &centers[j]))
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, dist)| {
                    if dist > best.1 {
                        (i, dist)
                    } else {
                        best
                    }
                })
                .0;
            centers[j] = features[far].as_ref().to_vec();
        }
    }
}
