//! Emergent-cluster detection over windowed feature vectors.
//!
//! Feature vectors are cut into fixed-length time windows, each window is
//! clustered, consecutive windows are compared through the summed squared
//! distance between nearest centers, and a spike in that series marks the
//! later window. Its clusters that moved furthest are the emergent ones, and
//! new vectors are scored against them.

pub mod pipeline;

use std::fmt;
use std::io::BufRead;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use pipeline::{analyze, analyze_distributed, register_operators, AngleConfig, AngleReport, WindowResult};

#[derive(Debug, Error)]
pub enum AngleError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("dimension {got} where {want} was expected")]
    Dimension { want: usize, got: usize },
    #[error("window length must be positive, got {0}")]
    BadWindow(f64),
    #[error("model has no centers")]
    EmptyModel,
    #[error("no emergent clusters to score against")]
    NoEmergent,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("window {0} has no members")]
    EmptyWindow(i64),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sphere(#[from] crate::sphere::SphereError),
    #[error(transparent)]
    Client(#[from] crate::client::ClientError),
    #[error("bad model record: {0}")]
    Model(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub entity: String,
    pub timestamp: f64,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(entity: impl Into<String>, timestamp: f64, values: Vec<f64>) -> Self {
        Self { entity: entity.into(), timestamp, values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// One delimited line, without the newline.
    pub fn to_line(&self, delim: char) -> String {
        let mut s = format!("{}{delim}{}", self.entity, self.timestamp);
        for v in &self.values {
            s.push(delim);
            s.push_str(&v.to_string());
        }
        s
    }

    pub fn parse_line(line: &str, delim: char) -> Result<Self, String> {
        let mut f = line.split(delim);
        let entity = f.next().filter(|e| !e.is_empty()).ok_or("missing entity")?.trim();
        let ts = f.next().ok_or("missing timestamp")?.trim();
        let timestamp: f64 = ts.parse().map_err(|_| format!("bad timestamp {ts:?}"))?;
        if !timestamp.is_finite() {
            return Err(format!("bad timestamp {ts:?}"));
        }
        let values = f
            .map(|v| {
                let v = v.trim();
                v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| format!("bad value {v:?}"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.is_empty() {
            return Err("no feature values".into());
        }
        Ok(Self::new(entity, timestamp, values))
    }
}

/// Read a feature file: one vector per line, blank lines and lines starting
/// with `#` skipped. Every vector must have the dimension of the first.
pub fn read_features(r: impl BufRead, delim: char) -> Result<Vec<FeatureVector>, AngleError> {
    let mut out: Vec<FeatureVector> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim_end_matches('\r');
        if t.trim().is_empty() || t.starts_with('#') {
            continue;
        }
        let v = FeatureVector::parse_line(t, delim).map_err(|reason| AngleError::Parse { line: i + 1, reason })?;
        if let Some(first) = out.first() {
            if first.dim() != v.dim() {
                return Err(AngleError::Parse {
                    line: i + 1,
                    reason: format!("{} values where {} were expected", v.dim(), first.dim()),
                });
            }
        }
        out.push(v);
    }
    Ok(out)
}

pub fn write_features(vectors: &[FeatureVector], delim: char) -> String {
    let mut s = String::new();
    for v in vectors {
        s.push_str(&v.to_line(delim));
        s.push('\n');
    }
    s
}

/// Index of the window holding time `t`.
pub fn window_index(t: f64, d: f64, t0: f64) -> i64 {
    ((t - t0) / d).floor() as i64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub index: i64,
    pub start: f64,
    pub length: f64,
    pub members: Vec<FeatureVector>,
}

/// Cut vectors into windows `[t0 + j d, t0 + (j+1) d)`. The result covers
/// every index from the first occupied window to the last, empty ones
/// included.
pub fn window_partition(vectors: &[FeatureVector], d: f64, t0: f64) -> Result<Vec<Window>, AngleError> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(AngleError::BadWindow(d));
    }
    let idx: Vec<i64> = vectors.iter().map(|v| window_index(v.timestamp, d, t0)).collect();
    let (Some(&lo), Some(&hi)) = (idx.iter().min(), idx.iter().max()) else {
        return Ok(Vec::new());
    };
    let mut windows: Vec<Window> = (lo..=hi)
        .map(|j| Window { index: j, start: t0 + j as f64 * d, length: d, members: Vec::new() })
        .collect();
    for (v, j) in vectors.iter().zip(idx) {
        windows[(j - lo) as usize].members.push(v.clone());
    }
    Ok(windows)
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Smallest variance a cluster may report, so the score stays defined for
/// single-point clusters.
pub const MIN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub center: Vec<f64>,
    pub variance: f64,
    /// Fraction of window members assigned here.
    pub weight: f64,
    /// Mixing constant; the constants of one model sum to 1.
    pub lambda: f64,
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub clusters: Vec<Cluster>,
    /// Sum of squared member-to-center distances after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn centers(&self) -> Vec<&[f64]> {
        self.clusters.iter().map(|c| c.center.as_slice()).collect()
    }
}

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOLERANCE: f64 = 1e-6;

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Canonical member order, so the fit does not depend on arrival order.
fn canonical(members: &[FeatureVector]) -> Vec<&FeatureVector> {
    let mut m: Vec<&FeatureVector> = members.iter().collect();
    m.sort_by(|a, b| {
        a.timestamp
            .total_cmp(&b.timestamp)
            .then_with(|| a.entity.cmp(&b.entity))
            .then_with(|| {
                a.values.iter().zip(&b.values).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    m
}

/// Seeded k-means over a window. The first center is a random member; each
/// further one is the member farthest from the centers so far.
pub fn cluster_window(members: &[FeatureVector], k: usize, seed: u64) -> Result<ClusterModel, AngleError> {
    if k == 0 {
        return Err(AngleError::ZeroK);
    }
    let Some(first) = members.first() else {
        return Err(AngleError::EmptyModel);
    };
    let dim = first.dim();
    if let Some(v) = members.iter().find(|v| v.dim() != dim) {
        return Err(AngleError::Dimension { want: dim, got: v.dim() });
    }
    let k = if members.len() < k {
        warn!("window has {} members; fitting {} clusters instead of {k}", members.len(), members.len());
        members.len()
    } else {
        k
    };
    let pts: Vec<&[f64]> = canonical(members).into_iter().map(|v| v.values.as_slice()).collect();
    let n = pts.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![pts[rng.gen_range(0..n)].to_vec()];
    let mut near: Vec<f64> = pts.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let (far, _) = near.iter().enumerate().fold((0, -1.0), |b, (i, &d)| if d > b.1 { (i, d) } else { b });
        centers.push(pts[far].to_vec());
        for (i, p) in pts.iter().enumerate() {
            near[i] = near[i].min(dist2(p, &centers[centers.len() - 1]));
        }
    }

    let mut assign = vec![0usize; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    loop {
        let mut obj = 0.0;
        for (i, p) in pts.iter().enumerate() {
            let (c, d) = nearest(p, &centers);
            assign[i] = c;
            obj += d;
        }
        objective.push(obj);
        if let [.., prev, cur] = objective[..] {
            if prev - cur <= KMEANS_TOLERANCE * prev {
                break;
            }
        }
        if iterations == KMEANS_MAX_ITER {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in pts.iter().zip(&assign) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for c in 0..k {
            // An emptied cluster keeps its old center.
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }

    let mut sq = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in pts.iter().zip(&assign) {
        sq[c] += dist2(p, &centers[c]);
        counts[c] += 1;
    }
    let clusters = centers
        .into_iter()
        .enumerate()
        .map(|(c, center)| Cluster {
            center,
            variance: if counts[c] > 0 { (sq[c] / counts[c] as f64).max(MIN_VARIANCE) } else { MIN_VARIANCE },
            weight: counts[c] as f64 / n as f64,
            lambda: 1.0 / k as f64,
            members: counts[c],
        })
        .collect();
    Ok(ClusterModel { clusters, objective, iterations })
}

/// Sum over the centers of `a` of the squared distance to the nearest
/// center of `b`.
pub fn delta(a: &ClusterModel, b: &ClusterModel) -> Result<f64, AngleError> {
    delta_centers(&a.centers(), &b.centers())
}

pub fn delta_centers(a: &[&[f64]], b: &[&[f64]]) -> Result<f64, AngleError> {
    if a.is_empty() || b.is_empty() {
        return Err(AngleError::EmptyModel);
    }
    let mut total = 0.0;
    for x in a {
        if x.len() != b[0].len() {
            return Err(AngleError::Dimension { want: b[0].len(), got: x.len() });
        }
        total += b.iter().map(|y| dist2(x, y)).fold(f64::INFINITY, f64::min);
    }
    Ok(total)
}

pub const DEFAULT_HISTORY: usize = 10;
pub const DEFAULT_Z: f64 = 3.0;

/// Positions `j + 1` where `series[j]` exceeds the mean plus `z` population
/// standard deviations of the `history` values before it. Missing values
/// (a window pair with an empty side) are neither flagged nor counted as
/// history.
pub fn detect_emergent(series: &[Option<f64>], history: usize, z: f64) -> Vec<usize> {
    let mut flags = Vec::new();
    if history == 0 {
        return flags;
    }
    let mut past: Vec<f64> = Vec::new();
    for (j, d) in series.iter().enumerate() {
        let Some(d) = *d else { continue };
        if past.len() >= history {
            let h = &past[past.len() - history..];
            let mean = h.iter().sum::<f64>() / history as f64;
            let var = h.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / history as f64;
            if d > mean + z * var.sqrt() {
                flags.push(j + 1);
            }
        }
        past.push(d);
    }
    flags
}

/// Clusters of `now` whose nearest center in `before` is farther away than
/// the median of those nearest distances.
pub fn emergent_clusters(before: &ClusterModel, now: &ClusterModel) -> Vec<usize> {
    let prior = before.centers();
    if prior.is_empty() {
        return (0..now.k()).collect();
    }
    let dists: Vec<f64> = now
        .clusters
        .iter()
        .map(|c| prior.iter().map(|p| dist2(&c.center, p)).fold(f64::INFINITY, f64::min))
        .collect();
    let mut sorted = dists.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 { sorted[m / 2] } else { (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0 };
    dists.iter().enumerate().filter(|(_, &d)| d > median).map(|(i, _)| i).collect()
}

/// `θ exp(-λ² ||x - a||² / 2σ²)` for one cluster.
pub fn cluster_score(x: &[f64], c: &Cluster) -> f64 {
    c.weight * (-(c.lambda * c.lambda) * dist2(x, &c.center) / (2.0 * c.variance)).exp()
}

/// Best cluster score of `x` among the emergent clusters.
pub fn score(x: &[f64], emergent: &[Cluster]) -> Result<f64, AngleError> {
    if emergent.is_empty() {
        return Err(AngleError::NoEmergent);
    }
    let mut best = f64::NEG_INFINITY;
    for c in emergent {
        if c.center.len() != x.len() {
            return Err(AngleError::Dimension { want: c.center.len(), got: x.len() });
        }
        best = best.max(cluster_score(x, c));
    }
    Ok(best)
}

/// Synthetic feature stream: Gaussian blobs around fixed centers, optionally
/// with an extra blob switched on from some window onwards.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub windows: usize,
    pub window_len: f64,
    pub per_blob: usize,
    pub centers: Vec<Vec<f64>>,
    pub spread: f64,
    /// `(first window, center)` of a blob absent before that window.
    pub planted: Option<(usize, Vec<f64>)>,
    pub seed: u64,
}

impl Default for Synthetic {
    fn default() -> Self {
        Self {
            windows: 30,
            window_len: 600.0,
            per_blob: 40,
            centers: vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0], vec![10.0, 10.0], vec![13.0, 10.0]],
            spread: 0.5,
            planted: Some((21, vec![30.0, -10.0])),
            seed: 7,
        }
    }
}

impl Synthetic {
    pub fn generate(&self) -> Vec<FeatureVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.spread.max(0.0)).expect("finite spread");
        let mut out = Vec::new();
        let mut serial = 0u64;
        for w in 0..self.windows {
            let mut blobs: Vec<&Vec<f64>> = self.centers.iter().collect();
            if let Some((from, c)) = &self.planted {
                if w >= *from {
                    blobs.push(c);
                }
            }
            for c in blobs {
                for _ in 0..self.per_blob {
                    let t = (w as f64 + rng.gen::<f64>()) * self.window_len;
                    let values = c.iter().map(|m| m + noise.sample(&mut rng)).collect();
                    out.push(FeatureVector::new(format!("e{serial}"), t.min((w + 1) as f64 * self.window_len - 1e-6), values));
                    serial += 1;
                }
            }
        }
        out
    }
}

impl fmt::Display for Cluster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, v) in self.center.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v:.6}")?;
        }
        f.write_str("]")
    }
}
