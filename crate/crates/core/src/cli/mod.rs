//! The `sector` command line.

pub mod scenario;

use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Deserialize;
use thiserror::Error;

use crate::angle::{self, AngleConfig, AngleError};
use crate::bench::{self, BenchError, SplitScanner, RECORD_LEN};
use crate::client::{ClientError, ClientSession};
use crate::cluster::{ClusterConfig, ConfigError, InProcessCluster};
use crate::node::{Node, NodeError, RecordIndex};
use crate::sphere::operator::OperatorRegistry;
use crate::sphere::{run, BucketFn, JobReport, JobSpec, OutputSpec, ScheduleEvent, SegmentLimits, SphereError};
use crate::routing::SharedRing;
use crate::transport::{NodeAddr, SharedTransport, TcpTransport};

pub use scenario::{run_scenario, Scenario, ScenarioOptions};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    BadConfig(String),
    #[error("{0}")]
    Transport(String),
    #[error("{0}")]
    Job(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) | CliError::BadConfig(_) => 3,
            CliError::Transport(_) => 4,
            CliError::Job(_) => 5,
            CliError::Validation(_) => 6,
        }
    }
}

impl From<NodeError> for CliError {
    fn from(e: NodeError) -> Self {
        match e {
            NodeError::Transport(_) | NodeError::Unavailable(_) => CliError::Transport(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Node(n) => n.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<SphereError> for CliError {
    fn from(e: SphereError) -> Self {
        match e {
            SphereError::Node(n @ (NodeError::Transport(_) | NodeError::Unavailable(_))) => n.into(),
            other => CliError::Job(other.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Sphere(s) => s.into(),
            BenchError::Client(c) => c.into(),
            BenchError::NotSorted { .. } => CliError::Validation(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<AngleError> for CliError {
    fn from(e: AngleError) -> Self {
        match e {
            AngleError::Sphere(s) => s.into(),
            AngleError::Client(c) => c.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

/// Line-oriented `key=value` results.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Metrics {
    entries: Vec<(String, String)>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    /// Set `key`, replacing an earlier value in place.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let v = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = v,
            None => self.entries.push((key.to_string(), v)),
        }
    }

    pub fn secs(&mut self, key: &str, d: Duration) {
        self.set(key, format!("{:.3}", d.as_secs_f64()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn extend(&mut self, prefix: &str, other: &Metrics) {
        for (k, v) in &other.entries {
            self.set(&format!("{prefix}{k}"), v);
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut m = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: no `=`", i + 1))?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    /// Everything except timings (`*_secs` keys).
    pub fn without_timings(&self) -> Metrics {
        Metrics { entries: self.entries.iter().filter(|(k, _)| !k.ends_with("_secs")).cloned().collect() }
    }

    pub fn passed(&self) -> bool {
        self.get("validation") == Some("pass")
    }
}

#[derive(Debug, Parser)]
#[command(name = "sector", version, about = "Replicated storage cloud with stream processing")]
pub struct Cli {
    /// More log output; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Remote {
    /// Any node of the running cloud.
    #[arg(long)]
    pub entry: String,
    /// Identity this client calls from.
    #[arg(long = "as", default_value = "client")]
    pub from: String,
}

impl Remote {
    fn session(&self) -> ClientSession {
        let t: SharedTransport = TcpTransport::new();
        ClientSession::new(t, self.from.as_str(), self.entry.as_str())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one node of a configured cloud until killed.
    Node {
        #[arg(long)]
        config: PathBuf,
        /// This node's address as listed in the config.
        #[arg(long)]
        name: String,
    },
    /// Store a local file in the cloud. `LOCAL.idx` is sent along if present.
    Upload {
        #[command(flatten)]
        remote: Remote,
        local: PathBuf,
        name: String,
        /// Record index to send instead of `LOCAL.idx`.
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Fetch a file (and its index) from the nearest replica.
    Download {
        #[command(flatten)]
        remote: Remote,
        name: String,
        dest: PathBuf,
    },
    /// List the nodes holding a file.
    Locate {
        #[command(flatten)]
        remote: Remote,
        name: String,
    },
    /// Run a job described by a TOML file.
    Submit {
        #[command(flatten)]
        remote: Remote,
        #[arg(long)]
        job: PathBuf,
    },
    /// Write pseudo-random 100-byte records to PATH and PATH.idx.
    Teragen {
        #[arg(long)]
        records: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate, sort and verify a data set as described by a TOML file.
    Terasort {
        #[arg(long)]
        job: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Best entropy split of a local key-sorted record file.
    Terasplit {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Emergent-cluster report for a feature file.
    Angle {
        #[arg(long = "in")]
        input: PathBuf,
        /// Window length in seconds.
        #[arg(long, default_value_t = 600.0)]
        window: f64,
        #[arg(long, default_value_t = 0.0)]
        t0: f64,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = angle::DEFAULT_HISTORY)]
        history: usize,
        #[arg(long, default_value_t = angle::DEFAULT_Z)]
        z: f64,
        #[arg(long, default_value_t = ',')]
        delimiter: char,
        /// Also run as Sphere jobs on this many in-process nodes and check
        /// the two reports agree.
        #[arg(long, default_value_t = 0)]
        nodes: usize,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named end-to-end scenario and write a metrics file.
    Scenario {
        name: Scenario,
        /// Cluster config replacing the scenario's built-in layout.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Data size, in records or vectors, where the scenario has one.
        #[arg(long)]
        records: Option<u64>,
        /// Node data lives here; a fresh temporary directory otherwise.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
}

/// Run a parsed command line.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Node { config, name } => node_daemon(&config, &name),
        Command::Upload { remote, local, name, index } => {
            let idx_path = index.unwrap_or_else(|| sibling_idx(&local));
            let index = match fs::read(&idx_path) {
                Ok(b) => Some(RecordIndex::decode(&b).map_err(|e| CliError::Other(format!("{}: {e}", idx_path.display())))?),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
                Err(e) => return Err(CliError::Other(format!("{}: {e}", idx_path.display()))),
            };
            let holders = remote.session().upload(&local, &name, index.as_ref())?;
            println!("{name}: stored on {}", join(&holders));
            Ok(())
        }
        Command::Download { remote, name, dest } => {
            let n = remote.session().download(&name, &dest)?;
            println!("{name}: {n} bytes to {}", dest.display());
            Ok(())
        }
        Command::Locate { remote, name } => {
            let locs = remote.session().lookup(&name)?;
            println!("{name}\t{} bytes\t{} records\t{}", locs.meta.size, locs.meta.records, join(&locs.holders));
            Ok(())
        }
        Command::Submit { remote, job } => {
            let desc = JobFile::load(&job)?;
            let client = remote.session();
            let stream = client.resolve_stream(&desc.inputs)?;
            let spec = desc.spec(&client)?;
            let report = run(&client, &stream, &spec)?;
            print!("{}", job_summary(&report));
            Ok(())
        }
        Command::Teragen { records, seed, out } => {
            bench::teragen_to_file(records, seed, &out)?;
            println!("{records} records to {}", out.display());
            Ok(())
        }
        Command::Terasort { job, metrics } => {
            let t = TerasortFile::load(&job)?;
            let m = t.run(&job)?;
            print!("{}", m.to_text());
            if let Some(p) = metrics {
                fs::write(&p, m.to_text())?;
            }
            if m.passed() {
                Ok(())
            } else {
                Err(CliError::Validation("output not sorted or checksum mismatch".into()))
            }
        }
        Command::Terasplit { input } => {
            let r = terasplit_file(&input)?;
            println!("{}", r.to_line());
            Ok(())
        }
        Command::Angle { input, window, t0, k, seed, history, z, delimiter, nodes, out } => {
            let cfg = AngleConfig { window_len: window, t0, k, seed, history, z, delimiter };
            let f = File::open(&input).map_err(|e| CliError::Other(format!("{}: {e}", input.display())))?;
            let vectors = angle::read_features(BufReader::new(f), delimiter)?;
            let report = angle::analyze(&vectors, &cfg)?;
            if nodes > 0 {
                let work = scenario::WorkDir::new(None, "angle")?;
                let cluster = scenario::local_cluster(nodes, work.path())?;
                let dist = scenario::angle_on_cluster(&cluster, &vectors, &cfg)?;
                if dist.report != report {
                    return Err(CliError::Validation("distributed report differs from the local one".into()));
                }
                eprintln!("distributed run over {nodes} nodes agrees");
            }
            match out {
                Some(p) => fs::write(p, report.to_text())?,
                None => print!("{}", report.to_text()),
            }
            Ok(())
        }
        Command::Scenario { name, config, metrics, seed, records, work_dir } => {
            let config = match config {
                Some(p) => Some(ClusterConfig::load(&p)?),
                None => None,
            };
            let work = scenario::WorkDir::new(work_dir, name.as_str())?;
            let opts = ScenarioOptions { seed, records, config, work_dir: work.path().to_path_buf() };
            let m = run_scenario(name, &opts)?;
            print!("{}", m.to_text());
            if let Some(p) = metrics {
                fs::write(&p, m.to_text())?;
            }
            if m.passed() {
                Ok(())
            } else {
                Err(CliError::Validation(format!("scenario {}", name.as_str())))
            }
        }
    }
}

fn join(addrs: &[NodeAddr]) -> String {
    addrs.iter().map(NodeAddr::as_str).collect::<Vec<_>>().join(",")
}

fn sibling_idx(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".idx");
    PathBuf::from(s)
}

fn node_daemon(config: &Path, name: &str) -> Result<(), CliError> {
    let cfg = ClusterConfig::load(config)?;
    let nc = cfg.node_config(name)?;
    fs::create_dir_all(&nc.data_dir)
        .map_err(|e| CliError::BadConfig(format!("data dir {}: {e}", nc.data_dir.display())))?;
    let t: SharedTransport = TcpTransport::new();
    let node = Node::new(nc, t, SharedRing::new(cfg.ring()), Arc::new(OperatorRegistry::with_builtins()))?;
    node.start().map_err(|e| CliError::Transport(format!("{name}: {e}")))?;
    let announced = node.announce_all().unwrap_or(0);
    node.spawn_replicator();
    info!("{name}: up, {announced} local files announced");
    eprintln!("{name}: serving");
    loop {
        std::thread::park();
    }
}

/// A job description for `submit`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobFile {
    pub operator: String,
    pub inputs: Vec<String>,
    /// `local`, `origin` or `shuffle`.
    #[serde(default = "local")]
    pub output: String,
    /// Shuffle bucket: `tag` or `first-byte`.
    #[serde(default = "tag")]
    pub bucket: String,
    /// Shuffle targets; every ring member when empty.
    #[serde(default)]
    pub destinations: Vec<String>,
    /// Operator parameters, passed as UTF-8 bytes.
    #[serde(default)]
    pub params: String,
    pub job_id: Option<String>,
    #[serde(default = "one")]
    pub spes_per_node: usize,
    pub segment_min: Option<u64>,
    pub segment_max: Option<u64>,
}

fn local() -> String {
    "local".into()
}

fn tag() -> String {
    "tag".into()
}

fn one() -> usize {
    1
}

impl JobFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::BadConfig(format!("job file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::BadConfig(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn spec(&self, client: &ClientSession) -> Result<JobSpec, CliError> {
        let output = match self.output.as_str() {
            "local" => OutputSpec::LocalWrite,
            "origin" => OutputSpec::ReturnToOrigin,
            "shuffle" => {
                let bucket = match self.bucket.as_str() {
                    "tag" => BucketFn::Tag,
                    "first-byte" => BucketFn::FirstByte,
                    b => return Err(CliError::BadConfig(format!("unknown bucket function {b:?}"))),
                };
                let dest = if self.destinations.is_empty() {
                    client.members()?
                } else {
                    self.destinations.iter().map(NodeAddr::new).collect()
                };
                OutputSpec::shuffle(bucket, dest)?
            }
            o => return Err(CliError::BadConfig(format!("unknown output mode {o:?}"))),
        };
        let d = SegmentLimits::default();
        let limits = SegmentLimits::new(self.segment_min.unwrap_or(d.s_min()), self.segment_max.unwrap_or(d.s_max()))
            .map_err(|e| CliError::BadConfig(e.to_string()))?;
        let mut spec = JobSpec::new(&self.operator, output).params(self.params.as_bytes().to_vec()).limits(limits);
        spec.spes_per_node = self.spes_per_node.max(1);
        if let Some(id) = &self.job_id {
            spec = spec.job_id(id);
        }
        Ok(spec)
    }
}

/// Per-segment lines then per-node totals.
pub fn job_summary(r: &JobReport) -> String {
    use std::collections::BTreeMap;
    let mut out = String::new();
    let mut started: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut per_node: BTreeMap<&NodeAddr, (usize, f64, f64)> = BTreeMap::new();
    for e in &r.events {
        match *e {
            ScheduleEvent::Start { time, spe, seg } => {
                started.insert((spe, seg), time);
            }
            ScheduleEvent::Finish { time, spe, seg } => {
                let t0 = started.get(&(spe, seg)).copied().unwrap_or(0.0);
                let node = &r.spe_nodes[spe];
                let acks = r.acks.iter().filter(|a| a.0 == seg as u64).count();
                out.push_str(&format!(
                    "segment {seg:>5} {:<40} on {node}: {:.3}s..{:.3}s, {acks} progress acks\n",
                    r.segments[seg].label(),
                    t0,
                    time
                ));
                let e = per_node.entry(node).or_default();
                e.0 += 1;
                e.1 += time - t0;
                e.2 = e.2.max(time);
            }
        }
    }
    for (node, (n, busy, last)) in per_node {
        out.push_str(&format!("node {node}: {n} segments, busy {busy:.3}s, last finish {last:.3}s\n"));
    }
    let done = r.reports.len();
    out.push_str(&format!(
        "job {}: {done}/{} segments done ({:.0}%), {} records in, {} out, {} retries, {:.3}s\n",
        r.job_id,
        r.segments.len(),
        100.0 * done as f64 / r.segments.len().max(1) as f64,
        r.records_in(),
        r.records_out(),
        r.retries,
        r.elapsed.as_secs_f64()
    ));
    for f in &r.output.files {
        out.push_str(&format!("output {} ({} records) on {}\n", f.name, f.meta.records, join(&f.locations)));
    }
    out
}

/// Stream a local sorted record file through the split scanner.
pub fn terasplit_file(path: &Path) -> Result<bench::SplitResult, CliError> {
    let f = File::open(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    let len = f.metadata()?.len();
    if len % RECORD_LEN as u64 != 0 {
        return Err(CliError::Other(format!("{}: {len} bytes is not a whole number of records", path.display())));
    }
    let mut r = BufReader::with_capacity(1 << 20, f);
    let mut s = SplitScanner::new();
    let mut rec = [0u8; RECORD_LEN];
    for _ in 0..len / RECORD_LEN as u64 {
        r.read_exact(&mut rec)?;
        s.push_record(&rec)?;
    }
    Ok(s.finish()?)
}

/// A Terasort run for the `terasort` command.
///
/// ```toml
/// nodes = 4            # in-process cluster size, or
/// cluster = "c.toml"   # an in-process cluster config, or
/// entry = "h:7000"     # a running cloud over TCP
/// records = 1000000
/// seed = 1
/// ```
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerasortFile {
    pub nodes: Option<usize>,
    pub cluster: Option<PathBuf>,
    pub entry: Option<String>,
    #[serde(default = "client_name")]
    pub client: String,
    pub records: u64,
    #[serde(default = "seed_one")]
    pub seed: u64,
    #[serde(default = "sample")]
    pub sample: u64,
    pub work_dir: Option<PathBuf>,
}

fn client_name() -> String {
    "client:9000".into()
}

fn seed_one() -> u64 {
    1
}

fn sample() -> u64 {
    bench::DEFAULT_SAMPLE
}

impl TerasortFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::BadConfig(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::BadConfig(format!("{}: {e}", path.display())))
    }

    pub fn run(&self, job_path: &Path) -> Result<Metrics, CliError> {
        let base = job_path.parent().unwrap_or(Path::new("."));
        if let Some(entry) = &self.entry {
            let remote = Remote { entry: entry.clone(), from: self.client.clone() };
            let client = remote.session();
            let nodes = client.members()?;
            return scenario::terasort_with(&client, &nodes, self.records, self.seed, self.sample, &mut |_, name, data, idx| {
                client.upload_bytes(name, data, Some(idx))?;
                Ok(())
            });
        }
        let work = scenario::WorkDir::new(self.work_dir.as_ref().map(|p| base.join(p)), "terasort")?;
        let cluster = match (&self.cluster, self.nodes) {
            (Some(c), _) => InProcessCluster::start(ClusterConfig::load(&base.join(c))?)?,
            (None, n) => scenario::local_cluster(n.unwrap_or(4), work.path())?,
        };
        let started = Instant::now();
        let mut m = scenario::terasort_on_cluster(&cluster, &self.client, self.records, self.seed, self.sample)?;
        m.secs("wall_secs", started.elapsed());
        Ok(m)
    }
}
