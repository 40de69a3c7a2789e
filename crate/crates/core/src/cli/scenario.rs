//! Named end-to-end runs on in-process clusters. Each returns metrics with
//! a `validation=pass|fail` line; timings are the `*_secs` keys.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use clap::ValueEnum;
use log::{info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{CliError, Metrics};
use crate::angle::{self, pipeline::DistributedRun, AngleConfig, FeatureVector, Synthetic};
use crate::bench::{self, Checksum, SplitScanner, TerasortConfig};
use crate::client::ClientSession;
use crate::cluster::{ClockMode, ClusterConfig, InProcessCluster};
use crate::node::RecordIndex;
use crate::transport::{LinkProfile, NodeAddr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scenario {
    TerasortLocal,
    TerasortWan,
    AngleSynthetic,
    ReplicationUniformity,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::TerasortLocal => "terasort-local",
            Scenario::TerasortWan => "terasort-wan",
            Scenario::AngleSynthetic => "angle-synthetic",
            Scenario::ReplicationUniformity => "replication-uniformity",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        <Scenario as ValueEnum>::from_str(s, false).map_err(|_| CliError::Usage(format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioOptions {
    pub seed: u64,
    /// Data size override, in records (Terasort) or vectors per blob (Angle).
    pub records: Option<u64>,
    /// Replaces the built-in cluster layout.
    pub config: Option<ClusterConfig>,
    pub work_dir: PathBuf,
}

impl ScenarioOptions {
    pub fn new(work_dir: &Path) -> Self {
        Self { seed: 1, records: None, config: None, work_dir: work_dir.to_path_buf() }
    }
}

/// A scratch directory, removed on drop unless the caller supplied it.
#[derive(Debug)]
pub struct WorkDir {
    path: PathBuf,
    owned: bool,
}

impl WorkDir {
    pub fn new(given: Option<PathBuf>, tag: &str) -> Result<Self, CliError> {
        let (path, owned) = match given {
            Some(p) => (p, false),
            None => {
                let n = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
                (std::env::temp_dir().join(format!("sector-{tag}-{}-{n:x}", std::process::id())), true)
            }
        };
        fs::create_dir_all(&path).map_err(|e| CliError::BadConfig(format!("{}: {e}", path.display())))?;
        Ok(Self { path, owned })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for WorkDir {
    fn drop(&mut self) {
        if self.owned {
            let _ = fs::remove_dir_all(&self.path);
        }
    }
}

/// `n` nodes `node-i:7000` with zero latency between them.
pub fn local_cluster(n: usize, base: &Path) -> Result<InProcessCluster, CliError> {
    let addrs: Vec<String> = (0..n.max(1)).map(|i| format!("node-{i}:7000")).collect();
    Ok(InProcessCluster::start(ClusterConfig::for_addrs(&addrs, base))?)
}

/// Round trips between the three sites of the wide-area layout.
pub fn wan_profile() -> LinkProfile {
    LinkProfile::new().with("chicago", "greenbelt", 16.0).with("chicago", "pasadena", 55.0).with("greenbelt", "pasadena", 71.0)
}

/// Two nodes at each of three sites.
pub fn wan_addrs() -> Vec<String> {
    ["chicago", "greenbelt", "pasadena"].iter().flat_map(|s| [format!("{s}:7001"), format!("{s}:7002")]).collect()
}

type Place<'a> = dyn FnMut(usize, &str, &[u8], &RecordIndex) -> Result<(), CliError> + 'a;

/// Generate `records` records split over one input file per node, sort
/// them, check the result and run the split scan over it.
pub fn terasort_with(
    client: &ClientSession,
    nodes: &[NodeAddr],
    records: u64,
    seed: u64,
    sample: u64,
    place: &mut Place<'_>,
) -> Result<Metrics, CliError> {
    let started = Instant::now();
    let parts = nodes.len().max(1) as u64;
    let mut names = Vec::new();
    let mut input = Checksum::default();
    for i in 0..parts {
        let n = records / parts + if i == parts - 1 { records % parts } else { 0 };
        if n == 0 {
            continue;
        }
        let (data, index) = bench::teragen(n, seed.wrapping_add(i));
        for r in data.chunks_exact(bench::RECORD_LEN) {
            input.add(r);
        }
        let name = format!("teragen-{seed}/part-{i:05}.dat");
        place(i as usize, &name, &data, &index)?;
        names.push(name);
    }
    let generated = started.elapsed();
    let stream = client.resolve_stream(&names)?;
    let cfg = TerasortConfig { sample, ..Default::default() };
    let report = bench::terasort(client, &stream, nodes, &cfg)?;

    let t = Instant::now();
    let (sorted, output) = bench::verify_sorted(client, &report.output)?;
    let verify = t.elapsed();

    let t = Instant::now();
    let mut scan = SplitScanner::new();
    let mut bad = None;
    for f in &report.output.files {
        client.for_each_batch(&f.name, |b| {
            for r in b.records() {
                if bad.is_none() {
                    if let Err(e) = scan.push_record(r) {
                        bad = Some(e);
                    }
                }
            }
        })?;
    }
    let split = match bad {
        Some(e) => Err(e),
        None if scan.records() == 0 => Err(bench::BenchError::EmptyCounts),
        None => scan.finish(),
    };
    let split_time = t.elapsed();

    let mut m = Metrics::new();
    m.set("nodes", nodes.len());
    m.set("records", records);
    m.set("input_files", names.len());
    m.set("output_files", report.output.files.len());
    m.set("output_records", output.count);
    m.set("sorted", sorted);
    m.set("checksum_match", output == input);
    match &split {
        Ok(s) => {
            m.set("split_threshold", s.threshold.map_or("none".into(), |t| format!("{t:020x}")));
            m.set("split_gain", format!("{:.9}", s.gain));
        }
        Err(e) => m.set("split_error", e),
    }
    m.secs("teragen_secs", generated);
    m.secs("sample_secs", report.sample.elapsed);
    m.secs("partition_secs", report.partition.elapsed);
    m.secs("sort_secs", report.sort.elapsed);
    m.secs("terasort_secs", report.elapsed);
    m.secs("verify_secs", verify);
    m.secs("terasplit_secs", split_time);
    m.secs("sphere_total_secs", report.elapsed + split_time);
    let ok = sorted && output == input && (records == 0 || split.is_ok());
    m.set("validation", if ok { "pass" } else { "fail" });
    Ok(m)
}

/// [`terasort_with`] on an in-process cluster, input file `i` placed on
/// node `i`.
pub fn terasort_on_cluster(
    cluster: &InProcessCluster,
    client_addr: &str,
    records: u64,
    seed: u64,
    sample: u64,
) -> Result<Metrics, CliError> {
    let client = cluster.client(client_addr);
    let nodes = cluster.live_addrs();
    let placed = nodes.clone();
    terasort_with(&client, &nodes, records, seed, sample, &mut |i, name, data, idx| {
        let node = cluster.node(&placed[i % placed.len()]).expect("live node");
        node.store_local(name, data, Some(idx))?;
        Ok(())
    })
}

/// Store the vectors as one file per node and run the distributed pipeline.
pub fn angle_on_cluster(
    cluster: &InProcessCluster,
    vectors: &[FeatureVector],
    cfg: &AngleConfig,
) -> Result<DistributedRun, CliError> {
    let client = cluster.client("client:9000");
    let nodes = cluster.live_addrs();
    let per = vectors.len().div_ceil(nodes.len()).max(1);
    let mut names = Vec::new();
    for (i, chunk) in vectors.chunks(per).enumerate() {
        let name = format!("features/part-{i:05}.txt");
        let (data, index) = angle::pipeline::feature_file(chunk, cfg.delimiter);
        cluster.node(&nodes[i % nodes.len()]).expect("live node").store_local(&name, &data, Some(&index))?;
        names.push(name);
    }
    let stream = client.resolve_stream(&names)?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros()).unwrap_or(0);
    Ok(angle::analyze_distributed(&client, &stream, &nodes, cfg, &format!("angle-{:x}", stamp & 0xff_ffff_ffff))?)
}

pub fn run_scenario(s: Scenario, opts: &ScenarioOptions) -> Result<Metrics, CliError> {
    info!("scenario {}", s.as_str());
    let m = match s {
        Scenario::TerasortLocal => terasort_local(opts),
        Scenario::TerasortWan => terasort_wan(opts),
        Scenario::AngleSynthetic => angle_synthetic(opts),
        Scenario::ReplicationUniformity => replication_uniformity(opts),
    }?;
    let mut out = Metrics::new();
    out.set("scenario", s.as_str());
    out.set("seed", opts.seed);
    out.extend("", &m);
    Ok(out)
}

fn config_or(opts: &ScenarioOptions, addrs: &[String]) -> ClusterConfig {
    opts.config.clone().unwrap_or_else(|| ClusterConfig::for_addrs(addrs, &opts.work_dir))
}

fn terasort_local(opts: &ScenarioOptions) -> Result<Metrics, CliError> {
    let addrs: Vec<String> = (0..4).map(|i| format!("node-{i}:7000")).collect();
    let cluster = InProcessCluster::start(config_or(opts, &addrs))?;
    terasort_on_cluster(&cluster, "client:9000", opts.records.unwrap_or(1_000_000), opts.seed, bench::DEFAULT_SAMPLE)
}

/// The same sort with and without the wide-area round trips.
fn terasort_wan(opts: &ScenarioOptions) -> Result<Metrics, CliError> {
    let records = opts.records.unwrap_or(1_500_000);
    let mut cfg = config_or(opts, &wan_addrs());
    if cfg.profile.is_empty() {
        cfg.profile = wan_profile();
    }
    let wan_profile = cfg.profile.clone();

    let mut flat_cfg = cfg.clone();
    flat_cfg.profile = LinkProfile::new();
    flat_cfg.base_dir = opts.work_dir.join("flat");
    let flat = {
        let c = InProcessCluster::start(flat_cfg)?;
        terasort_on_cluster(&c, "chicago:9000", records, opts.seed, bench::DEFAULT_SAMPLE)?
    };
    cfg.base_dir = opts.work_dir.join("wan");
    cfg.profile = wan_profile;
    let wan = {
        let c = InProcessCluster::start(cfg)?;
        terasort_on_cluster(&c, "chicago:9000", records, opts.seed, bench::DEFAULT_SAMPLE)?
    };
    let secs = |m: &Metrics| m.get("terasort_secs").and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN);
    let ratio = secs(&wan) / secs(&flat);
    let mut m = Metrics::new();
    m.set("nodes", wan.get("nodes").unwrap_or("?"));
    m.set("records", records);
    m.extend("flat_", &flat.without_timings());
    m.extend("wan_", &wan.without_timings());
    m.set("flat_terasort_secs", secs(&flat));
    m.set("wan_terasort_secs", secs(&wan));
    m.set("slowdown_ratio_secs", format!("{ratio:.3}"));
    m.set("ratio_bound", 2.5);
    let ok = flat.passed() && wan.passed() && ratio < 2.5;
    m.set("validation", if ok { "pass" } else { "fail" });
    Ok(m)
}

fn angle_synthetic(opts: &ScenarioOptions) -> Result<Metrics, CliError> {
    let mut gen = Synthetic { seed: opts.seed, ..Default::default() };
    if let Some(r) = opts.records {
        gen.per_blob = r as usize;
    }
    let (planted_at, planted_center) = gen.planted.clone().expect("planted blob");
    let vectors = gen.generate();
    let cfg = AngleConfig { window_len: gen.window_len, ..Default::default() };

    let t = Instant::now();
    let local = angle::analyze(&vectors, &cfg)?;
    let local_secs = t.elapsed();

    let addrs: Vec<String> = (0..4).map(|i| format!("node-{i}:7000")).collect();
    let cluster = InProcessCluster::start(config_or(opts, &addrs))?;
    let t = Instant::now();
    let dist = angle_on_cluster(&cluster, &vectors, &cfg)?;
    let dist_secs = t.elapsed();

    let flagged = local.flagged();
    let planted_window = local.windows.iter().find(|w| w.index == planted_at as i64);
    let emergent_hit = planted_window.is_some_and(|w| {
        w.model.as_ref().is_some_and(|m| {
            w.emergent.iter().any(|&i| angle::dist2(&m.clusters[i].center, &planted_center).sqrt() < 3.0 * gen.spread)
        })
    });
    let mut m = Metrics::new();
    m.set("vectors", vectors.len());
    m.set("windows", local.windows.len());
    m.set("k", cfg.k);
    m.set("planted_window", planted_at);
    m.set("flagged", flagged.iter().map(i64::to_string).collect::<Vec<_>>().join(","));
    m.set("planted_emergent", emergent_hit);
    m.set("emergent_clusters", local.emergent().len());
    m.set("distributed_match", dist.report == local);
    m.set("window_job_segments", dist.window_job.segments.len());
    m.set("cluster_job_segments", dist.cluster_job.segments.len());
    m.secs("local_secs", local_secs);
    m.secs("distributed_secs", dist_secs);
    let ok = flagged == [planted_at as i64] && emergent_hit && dist.report == local;
    m.set("validation", if ok { "pass" } else { "fail" });
    Ok(m)
}

/// Pearson statistic and upper-tail p-value of `observed` against
/// `expected` counts.
pub fn chi_square(observed: &[f64], expected: &[f64]) -> (f64, f64) {
    let stat: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = (observed.len() - 1) as f64;
    let p = 1.0 - ChiSquared::new(dof).expect("positive dof").cdf(stat);
    (stat, p)
}

/// Files start with one copy each, spread evenly over eight nodes; the
/// timed replication task (on an accelerated clock) must bring every file
/// to the target within three daily cycles, with new copies spread evenly.
fn replication_uniformity(opts: &ScenarioOptions) -> Result<Metrics, CliError> {
    let files = opts.records.unwrap_or(100) as usize;
    let addrs: Vec<String> = (0..8).map(|i| format!("node-{i}:7000")).collect();
    let mut cfg = config_or(opts, &addrs);
    if opts.config.is_none() {
        cfg.replica_target = 3;
        cfg.clock = ClockMode::Accelerated;
        cfg.day_seconds = 0.5;
        cfg.seed = opts.seed;
    }
    let target = cfg.replica_target;
    let cluster = InProcessCluster::start(cfg)?;
    let nodes = cluster.addrs();
    let n = nodes.len();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut origin = Vec::new();
    for i in 0..files {
        let mut data = vec![0u8; 4096];
        rng.fill_bytes(&mut data);
        let name = format!("replica-test/file-{i:04}");
        cluster.nodes()[i % n].store_local(&name, &data, None)?;
        origin.push((name, i % n));
    }

    let t = Instant::now();
    cluster.spawn_replicators();
    let deadline = Duration::from_secs(120);
    while cluster.nodes().iter().any(|node| node.cycles_completed() < 3) {
        if t.elapsed() > deadline {
            return Err(CliError::Other("replication cycles did not run in time".into()));
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    let cycles_secs = t.elapsed();
    cluster.stop();

    let mut placements = vec![0f64; n];
    let mut expected = vec![0f64; n];
    let mut exact = 0;
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for (name, o) in &origin {
        let holders: Vec<usize> = (0..n).filter(|&j| cluster.nodes()[j].store().contains(name)).collect();
        *histogram.entry(holders.len()).or_default() += 1;
        if holders.len() == target {
            exact += 1;
        }
        for &h in holders.iter().filter(|&&h| h != *o) {
            placements[h] += 1.0;
        }
        // each new copy lands on one of the n-1 other nodes
        for (j, e) in expected.iter_mut().enumerate() {
            if j != *o {
                *e += (target - 1) as f64 / (n - 1) as f64;
            }
        }
    }
    let (stat, p) = chi_square(&placements, &expected);
    if exact != files {
        warn!("{} of {files} files off target: {histogram:?}", files - exact);
    }
    let mut m = Metrics::new();
    m.set("nodes", n);
    m.set("files", files);
    m.set("replica_target", target);
    m.set("files_at_target", exact);
    m.set("replica_histogram", histogram.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(","));
    m.set("placements", placements.iter().sum::<f64>());
    m.set("placements_per_node", placements.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(","));
    m.set("chi_square", format!("{stat:.4}"));
    m.set("p_value", format!("{p:.4}"));
    m.secs("cycles_secs", cycles_secs);
    let ok = exact == files && p > 0.01;
    m.set("validation", if ok { "pass" } else { "fail" });
    Ok(m)
}
