//! The windowed pipeline, in one process or as two Sphere jobs.
//!
//! Distributed, the first job parses feature lines and shuffles them by
//! window index; the second fits one model per window inside each bucket
//! file. The driver then computes the statistic series locally. Both paths
//! fit on the same canonical member order with the same per-window seed, so
//! they agree bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{
    cluster_window, delta, detect_emergent, emergent_clusters, window_index, window_partition, AngleError, Cluster,
    ClusterModel, FeatureVector, DEFAULT_HISTORY, DEFAULT_Z,
};
use crate::client::ClientSession;
use crate::node::{RecordBatch, RecordIndex};
use crate::sphere::operator::{Operator, OperatorRegistry};
use crate::sphere::{run, BucketFn, JobReport, JobSpec, OutputSpec, SegmentLimits, Stream};
use crate::transport::NodeAddr;
use crate::wire::{WireError, WireReader, WireWriter};

#[derive(Debug, Clone, PartialEq)]
pub struct AngleConfig {
    pub window_len: f64,
    pub t0: f64,
    pub k: usize,
    pub seed: u64,
    pub history: usize,
    pub z: f64,
    pub delimiter: char,
}

impl Default for AngleConfig {
    fn default() -> Self {
        Self { window_len: 600.0, t0: 0.0, k: 5, seed: 1, history: DEFAULT_HISTORY, z: DEFAULT_Z, delimiter: ',' }
    }
}

fn window_seed(seed: u64, window: i64) -> u64 {
    seed ^ (window as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowResult {
    pub index: i64,
    pub start: f64,
    pub members: usize,
    pub model: Option<ClusterModel>,
    /// Statistic between the previous window and this one.
    pub delta: Option<f64>,
    pub flagged: bool,
    /// Emergent cluster positions in `model`.
    pub emergent: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngleReport {
    pub windows: Vec<WindowResult>,
}

impl AngleReport {
    pub fn flagged(&self) -> Vec<i64> {
        self.windows.iter().filter(|w| w.flagged).map(|w| w.index).collect()
    }

    /// Every emergent cluster, in window order.
    pub fn emergent(&self) -> Vec<Cluster> {
        let mut out = Vec::new();
        for w in &self.windows {
            if let Some(m) = &w.model {
                out.extend(w.emergent.iter().map(|&i| m.clusters[i].clone()));
            }
        }
        out
    }

    /// One tab-separated line per window: index, statistic (`-` when
    /// undefined), flag, and the emergent centers (`-` when none).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in &self.windows {
            let d = w.delta.map_or("-".to_string(), |d| format!("{d:.6}"));
            let centers = match &w.model {
                Some(m) if !w.emergent.is_empty() => {
                    w.emergent.iter().map(|&i| m.clusters[i].to_string()).collect::<Vec<_>>().join(";")
                }
                _ => "-".into(),
            };
            let _ = writeln!(s, "{}\t{d}\t{}\t{centers}", w.index, u8::from(w.flagged));
        }
        s
    }
}

/// Build the report from fitted models keyed by window index. Indices
/// between the first and last model with no entry are empty windows.
fn finish(models: BTreeMap<i64, (usize, ClusterModel)>, cfg: &AngleConfig) -> AngleReport {
    let (Some(&lo), Some(&hi)) = (models.keys().next(), models.keys().next_back()) else {
        return AngleReport { windows: Vec::new() };
    };
    let mut windows: Vec<WindowResult> = (lo..=hi)
        .map(|j| {
            let (members, model) = match models.get(&j) {
                Some((n, m)) => (*n, Some(m.clone())),
                None => (0, None),
            };
            WindowResult {
                index: j,
                start: cfg.t0 + j as f64 * cfg.window_len,
                members,
                model,
                delta: None,
                flagged: false,
                emergent: Vec::new(),
            }
        })
        .collect();
    let series: Vec<Option<f64>> = windows
        .windows(2)
        .map(|p| match (&p[0].model, &p[1].model) {
            (Some(a), Some(b)) => delta(a, b).ok(),
            _ => None,
        })
        .collect();
    for (j, d) in series.iter().enumerate() {
        windows[j + 1].delta = *d;
    }
    for pos in detect_emergent(&series, cfg.history, cfg.z) {
        let (before, now) = windows.split_at_mut(pos);
        let w = &mut now[0];
        w.flagged = true;
        if let (Some(a), Some(b)) = (&before[pos - 1].model, &w.model) {
            w.emergent = emergent_clusters(a, b);
        }
    }
    AngleReport { windows }
}

/// The whole pipeline in this process.
pub fn analyze(vectors: &[FeatureVector], cfg: &AngleConfig) -> Result<AngleReport, AngleError> {
    let mut models = BTreeMap::new();
    for w in window_partition(vectors, cfg.window_len, cfg.t0)? {
        if !w.members.is_empty() {
            let m = cluster_window(&w.members, cfg.k, window_seed(cfg.seed, w.index))?;
            models.insert(w.index, (w.members.len(), m));
        }
    }
    Ok(finish(models, cfg))
}

fn encode_windowed(window: i64, v: &FeatureVector) -> Vec<u8> {
    let mut w = WireWriter::new();
    w.u64(window as u64).f64(v.timestamp).str(&v.entity).u32(v.values.len() as u32);
    for x in &v.values {
        w.f64(*x);
    }
    w.finish()
}

fn decode_windowed(b: &[u8]) -> Result<(i64, FeatureVector), WireError> {
    let mut r = WireReader::new(b);
    let window = r.u64()? as i64;
    let timestamp = r.f64()?;
    let entity = r.str()?.to_string();
    let n = r.u32()?;
    let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    Ok((window, FeatureVector { entity, timestamp, values }))
}

fn window_params(cfg: &AngleConfig) -> Vec<u8> {
    let mut w = WireWriter::new();
    w.f64(cfg.window_len).f64(cfg.t0).u32(cfg.delimiter as u32);
    w.finish()
}

fn cluster_params(cfg: &AngleConfig) -> Vec<u8> {
    let mut w = WireWriter::new();
    w.u32(cfg.k as u32).u64(cfg.seed);
    w.finish()
}

pub fn encode_model(window: i64, members: usize, m: &ClusterModel) -> Vec<u8> {
    let mut w = WireWriter::new();
    w.u64(window as u64).u64(members as u64).u32(m.iterations as u32).u32(m.objective.len() as u32);
    for o in &m.objective {
        w.f64(*o);
    }
    w.u32(m.k() as u32);
    for c in &m.clusters {
        w.u32(c.center.len() as u32);
        for x in &c.center {
            w.f64(*x);
        }
        w.f64(c.variance).f64(c.weight).f64(c.lambda).u64(c.members as u64);
    }
    w.finish()
}

pub fn decode_model(b: &[u8]) -> Result<(i64, usize, ClusterModel), WireError> {
    let mut r = WireReader::new(b);
    let window = r.u64()? as i64;
    let members = r.u64()? as usize;
    let iterations = r.u32()? as usize;
    let n_obj = r.u32()?;
    let objective = (0..n_obj).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let k = r.u32()?;
    let mut clusters = Vec::new();
    for _ in 0..k {
        let dim = r.u32()?;
        let center = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        clusters.push(Cluster { center, variance: r.f64()?, weight: r.f64()?, lambda: r.f64()?, members: r.u64()? as usize });
    }
    r.finish()?;
    Ok((window, members, ClusterModel { clusters, objective, iterations }))
}

pub fn register_operators(r: &OperatorRegistry) {
    r.register(
        "angle.window",
        Operator::per_record(|rec, params, out| {
            let mut p = WireReader::new(params);
            let (d, t0, delim) = (|| Ok::<_, WireError>((p.f64()?, p.f64()?, p.u32()?)))().map_err(|e| e.to_string())?;
            let delim = char::from_u32(delim).ok_or("bad delimiter")?;
            let line = std::str::from_utf8(rec).map_err(|e| e.to_string())?.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() || line.starts_with('#') {
                return Ok(());
            }
            let v = FeatureVector::parse_line(line, delim)?;
            let j = window_index(v.timestamp, d, t0);
            out.emit_to(j as u64, &encode_windowed(j, &v));
            Ok(())
        }),
    );
    r.register(
        "angle.cluster",
        Operator::per_segment(|batch, params, out| {
            let mut p = WireReader::new(params);
            let (k, seed) = (|| Ok::<_, WireError>((p.u32()?, p.u64()?)))().map_err(|e| e.to_string())?;
            let mut groups: BTreeMap<i64, Vec<FeatureVector>> = BTreeMap::new();
            for rec in batch.records() {
                let (j, v) = decode_windowed(rec).map_err(|e| e.to_string())?;
                groups.entry(j).or_default().push(v);
            }
            for (j, members) in groups {
                let m = cluster_window(&members, k as usize, window_seed(seed, j)).map_err(|e| e.to_string())?;
                out.emit(&encode_model(j, members.len(), &m));
            }
            Ok(())
        }),
    );
}

/// Feature vectors as a line-per-record file and its index.
pub fn feature_file(vectors: &[FeatureVector], delim: char) -> (Vec<u8>, RecordIndex) {
    let lines: Vec<String> = vectors.iter().map(|v| v.to_line(delim) + "\n").collect();
    let index = RecordIndex::contiguous(lines.iter().map(|l| l.len() as u64));
    (lines.concat().into_bytes(), index)
}

/// Store feature vectors in the cloud as a line-indexed text file.
pub fn upload_features(
    client: &ClientSession,
    name: &str,
    vectors: &[FeatureVector],
    delim: char,
) -> Result<Vec<NodeAddr>, AngleError> {
    let (data, index) = feature_file(vectors, delim);
    Ok(client.upload_bytes(name, &data, Some(&index))?)
}

#[derive(Debug, Clone)]
pub struct DistributedRun {
    pub report: AngleReport,
    pub window_job: JobReport,
    pub cluster_job: JobReport,
}

/// The pipeline as Sphere jobs over a stream of feature files, with SPEs
/// on `nodes`.
pub fn analyze_distributed(
    client: &ClientSession,
    stream: &Stream,
    nodes: &[NodeAddr],
    cfg: &AngleConfig,
    job_prefix: &str,
) -> Result<DistributedRun, AngleError> {
    let shuffle = OutputSpec::shuffle(BucketFn::Tag, nodes.to_vec())?;
    let wjob = JobSpec::new("angle.window", shuffle)
        .job_id(&format!("{job_prefix}/window"))
        .nodes(nodes.to_vec())
        .params(window_params(cfg));
    let window_job = run(client, stream, &wjob)?;

    let mut models = BTreeMap::new();
    if window_job.output.is_empty() {
        return Ok(DistributedRun { report: finish(models, cfg), cluster_job: window_job.clone(), window_job });
    }
    let largest = window_job.output.files.iter().map(|f| f.meta.size).max().unwrap_or(1);
    let cjob = JobSpec::new("angle.cluster", OutputSpec::LocalWrite)
        .job_id(&format!("{job_prefix}/cluster"))
        .nodes(nodes.to_vec())
        .params(cluster_params(cfg))
        .limits(SegmentLimits::whole_files(largest));
    let cluster_job = run(client, &window_job.output, &cjob)?;
    for f in &cluster_job.output.files {
        let mut bad = None;
        client.for_each_batch(&f.name, |b: &RecordBatch| {
            for rec in b.records() {
                match decode_model(rec) {
                    Ok((j, n, m)) => {
                        models.insert(j, (n, m));
                    }
                    Err(e) => bad = Some(e.to_string()),
                }
            }
        })?;
        if let Some(e) = bad {
            return Err(AngleError::Model(e));
        }
    }
    Ok(DistributedRun { report: finish(models, cfg), window_job, cluster_job })
}
