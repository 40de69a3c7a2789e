//! Cluster configuration, and a whole cluster of nodes inside one process
//! over the in-memory transport.
//!
//! ```toml
//! replica_target = 3
//! link_profile = "wan.rtt"   # optional, relative to this file
//! clock = "accelerated"      # or "real"
//! day_seconds = 0.5          # real seconds per simulated day
//!
//! [[node]]
//! addr = "chicago:7001"
//! data_dir = "data/chi1"
//! acl = ["chicago", "client:9000"]
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use log::{info, warn};
use serde::Deserialize;
use thiserror::Error;

use crate::client::ClientSession;
use crate::clock::{ScaledClock, SharedClock, SystemClock};
use crate::node::{Acl, Node, NodeConfig, NodeError, ReplicaPolicy, ReplicationAction};
use crate::routing::{RingView, SharedRing};
use crate::sphere::operator::OperatorRegistry;
use crate::transport::{LinkProfile, MemTransport, NodeAddr, SharedTransport, Transport};

const DAY: Duration = Duration::from_secs(24 * 3600);

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("config lists no nodes")]
    NoNodes,
    #[error("address {0} appears twice")]
    DuplicateAddr(String),
    #[error("replica target {target} exceeds the {nodes} configured nodes")]
    TargetTooHigh { target: usize, nodes: usize },
    #[error("replica target must be at least 1")]
    ZeroTarget,
    #[error("day_seconds must be positive, got {0}")]
    BadDay(f64),
    #[error("bad address {0:?}")]
    BadAddr(String),
    #[error("no node {0} in the config")]
    UnknownNode(String),
    #[error(transparent)]
    Profile(#[from] crate::transport::ProfileParseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Real,
    /// A simulated day passes every `day_seconds` of real time.
    Accelerated,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub addr: String,
    /// Defaults to a directory named after the address.
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub acl: Vec<String>,
}

fn one() -> f64 {
    1.0
}

fn two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    #[serde(rename = "node", default)]
    pub nodes: Vec<NodeEntry>,
    #[serde(default = "default_target")]
    pub replica_target: usize,
    pub link_profile: Option<PathBuf>,
    #[serde(default)]
    pub clock: ClockMode,
    #[serde(default = "one")]
    pub day_seconds: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "two")]
    pub spe_slots: usize,
    /// Directory relative paths resolve against; the config file's own.
    #[serde(skip)]
    pub base_dir: PathBuf,
    #[serde(skip)]
    pub profile: LinkProfile,
}

fn default_target() -> usize {
    ReplicaPolicy::DEFAULT_TARGET
}

impl ClusterConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut c: ClusterConfig = toml::from_str(text)?;
        c.base_dir = base_dir.to_path_buf();
        if let Some(p) = &c.link_profile {
            let path = c.base_dir.join(p);
            let text = fs::read_to_string(&path).map_err(|source| ConfigError::Read { path, source })?;
            c.profile = LinkProfile::parse(&text)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// A config for `addrs` with default settings and no access list.
    pub fn for_addrs<S: AsRef<str>>(addrs: &[S], base_dir: &Path) -> Self {
        Self {
            nodes: addrs.iter().map(|a| NodeEntry { addr: a.as_ref().to_string(), data_dir: None, acl: Vec::new() }).collect(),
            replica_target: ReplicaPolicy::DEFAULT_TARGET.min(addrs.len().max(1)),
            link_profile: None,
            clock: ClockMode::Real,
            day_seconds: 1.0,
            seed: 0,
            spe_slots: 2,
            base_dir: base_dir.to_path_buf(),
            profile: LinkProfile::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.nodes.is_empty() {
            return Err(ConfigError::NoNodes);
        }
        let mut seen = HashSet::new();
        for n in &self.nodes {
            NodeAddr::parse(&n.addr).map_err(|_| ConfigError::BadAddr(n.addr.clone()))?;
            if !seen.insert(n.addr.as_str()) {
                return Err(ConfigError::DuplicateAddr(n.addr.clone()));
            }
        }
        if self.replica_target == 0 {
            return Err(ConfigError::ZeroTarget);
        }
        if self.replica_target > self.nodes.len() {
            return Err(ConfigError::TargetTooHigh { target: self.replica_target, nodes: self.nodes.len() });
        }
        if !(self.day_seconds.is_finite() && self.day_seconds > 0.0) {
            return Err(ConfigError::BadDay(self.day_seconds));
        }
        Ok(())
    }

    pub fn addrs(&self) -> Vec<NodeAddr> {
        self.nodes.iter().map(|n| NodeAddr::new(&n.addr)).collect()
    }

    pub fn ring(&self) -> RingView {
        RingView::from_addrs(&self.addrs()).expect("validated addresses")
    }

    pub fn data_dir(&self, n: &NodeEntry) -> PathBuf {
        match &n.data_dir {
            Some(d) => self.base_dir.join(d),
            None => self.base_dir.join(n.addr.replace([':', '/', '\\'], "_")),
        }
    }

    /// Clock for the configured mode.
    pub fn clock(&self) -> SharedClock {
        match self.clock {
            ClockMode::Real => SystemClock::shared(),
            ClockMode::Accelerated => ScaledClock::new(DAY.as_secs_f64() / self.day_seconds),
        }
    }

    pub fn node_config(&self, addr: &str) -> Result<NodeConfig, ConfigError> {
        let n = self.nodes.iter().find(|n| n.addr == addr).ok_or_else(|| ConfigError::UnknownNode(addr.to_string()))?;
        let mut c = NodeConfig::new(n.addr.as_str(), self.data_dir(n));
        c.acl = Acl::new(n.acl.iter().cloned());
        c.policy = ReplicaPolicy::new(self.replica_target, DAY).map_err(|_| ConfigError::ZeroTarget)?;
        c.seed = self.seed;
        c.spe_slots = self.spe_slots.max(1);
        Ok(c)
    }
}

/// Every node of a config running in this process on one shared in-memory
/// transport.
pub struct InProcessCluster {
    config: ClusterConfig,
    transport: Arc<MemTransport>,
    ring: SharedRing,
    nodes: Vec<Arc<Node>>,
    operators: Arc<OperatorRegistry>,
}

impl std::fmt::Debug for InProcessCluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InProcessCluster").field("nodes", &self.config.addrs()).finish_non_exhaustive()
    }
}

impl InProcessCluster {
    pub fn start(config: ClusterConfig) -> Result<Self, NodeError> {
        Self::start_with(config, Arc::new(OperatorRegistry::with_builtins()))
    }

    pub fn start_with(config: ClusterConfig, operators: Arc<OperatorRegistry>) -> Result<Self, NodeError> {
        config.validate().map_err(|e| NodeError::BadRequest(e.to_string()))?;
        let transport = MemTransport::new(config.clock(), config.profile.clone());
        let ring = SharedRing::new(config.ring());
        let mut nodes = Vec::new();
        for n in &config.nodes {
            let nc = config.node_config(&n.addr).map_err(|e| NodeError::BadRequest(e.to_string()))?;
            let shared: SharedTransport = transport.clone();
            let node = Node::new(nc, shared, ring.clone(), operators.clone())?;
            node.start()?;
            nodes.push(node);
        }
        info!("in-process cluster of {} nodes up", nodes.len());
        Ok(Self { config, transport, ring, nodes, operators })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn transport(&self) -> &Arc<MemTransport> {
        &self.transport
    }

    pub fn ring(&self) -> &SharedRing {
        &self.ring
    }

    pub fn operators(&self) -> &Arc<OperatorRegistry> {
        &self.operators
    }

    pub fn nodes(&self) -> &[Arc<Node>] {
        &self.nodes
    }

    pub fn node(&self, addr: &NodeAddr) -> Option<&Arc<Node>> {
        self.nodes.iter().find(|n| n.addr() == addr)
    }

    pub fn addrs(&self) -> Vec<NodeAddr> {
        self.nodes.iter().map(|n| n.addr().clone()).collect()
    }

    pub fn live_addrs(&self) -> Vec<NodeAddr> {
        self.nodes.iter().filter(|n| n.is_running()).map(|n| n.addr().clone()).collect()
    }

    /// A client calling from `addr`, entering through the first live node.
    pub fn client(&self, addr: &str) -> ClientSession {
        let entry = self.live_addrs().into_iter().next().unwrap_or_else(|| self.nodes[0].addr().clone());
        let t: SharedTransport = self.transport.clone();
        ClientSession::new(t, addr, entry).with_profile(self.transport.profile())
    }

    /// Stop a node without telling anyone; its files stay on disk.
    pub fn kill(&self, addr: &NodeAddr) -> bool {
        match self.node(addr) {
            Some(n) => {
                n.stop();
                self.transport.shutdown(addr);
                true
            }
            None => false,
        }
    }

    /// Drop `addr` from the ring and have every live node re-home its
    /// registry entries.
    pub fn remove_from_ring(&self, addr: &NodeAddr) -> Result<(), NodeError> {
        let next = self.ring.current().leave(addr)?;
        self.ring.install(next);
        self.reannounce();
        Ok(())
    }

    /// Add a stopped node back to the ring and restart it.
    pub fn revive(&self, addr: &NodeAddr) -> Result<(), NodeError> {
        let node = self.node(addr).ok_or_else(|| NodeError::NotFound(addr.to_string()))?;
        if !self.ring.current().contains(addr) {
            let next = self.ring.current().join(addr)?;
            self.ring.install(next);
        }
        node.start()?;
        self.reannounce();
        Ok(())
    }

    fn reannounce(&self) {
        for n in self.nodes.iter().filter(|n| n.is_running()) {
            n.prune_registry();
        }
        for n in self.nodes.iter().filter(|n| n.is_running()) {
            if let Err(e) = n.announce_all() {
                warn!("{}: re-announce failed: {e}", n.addr());
            }
        }
    }

    /// One replication pass on every live node, in address order.
    pub fn run_replication_cycle(&self) -> Vec<ReplicationAction> {
        let mut out = Vec::new();
        for n in self.nodes.iter().filter(|n| n.is_running()) {
            match n.replicate_check() {
                Ok(a) => out.extend(a),
                Err(e) => warn!("{}: replication pass failed: {e}", n.addr()),
            }
        }
        out
    }

    /// Start the timed replication task on every live node.
    pub fn spawn_replicators(&self) {
        for n in self.nodes.iter().filter(|n| n.is_running()) {
            n.spawn_replicator();
        }
    }

    /// Number of live nodes holding `name` on disk.
    pub fn replica_count(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.is_running() && n.store().contains(name)).count()
    }

    pub fn stop(&self) {
        for n in &self.nodes {
            n.stop();
        }
    }
}

impl Drop for InProcessCluster {
    fn drop(&mut self) {
        self.stop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_full_config() {
        let c = ClusterConfig::parse(
            r#"
            replica_target = 2
            clock = "accelerated"
            day_seconds = 0.25

            [[node]]
            addr = "a:1"
            acl = ["client"]

            [[node]]
            addr = "b:1"
            data_dir = "/srv/b"
            "#,
            Path::new("/tmp/x"),
        )
        .unwrap();
        assert_eq!(c.nodes.len(), 2);
        assert_eq!(c.clock, ClockMode::Accelerated);
        assert_eq!(c.data_dir(&c.nodes[0]), PathBuf::from("/tmp/x/a_1"));
        assert_eq!(c.data_dir(&c.nodes[1]), PathBuf::from("/srv/b"));
        assert!(c.node_config("a:1").unwrap().acl.permits(&NodeAddr::new("client:5")));
    }

    #[test]
    fn rejects_bad_configs() {
        let base = Path::new(".");
        let dup = "[[node]]\naddr = \"a:1\"\n[[node]]\naddr = \"a:1\"\n";
        assert!(matches!(ClusterConfig::parse(dup, base), Err(ConfigError::DuplicateAddr(_))));
        let high = "replica_target = 3\n[[node]]\naddr = \"a:1\"\n";
        assert!(matches!(ClusterConfig::parse(high, base), Err(ConfigError::TargetTooHigh { .. })));
        assert!(matches!(ClusterConfig::parse("", base), Err(ConfigError::NoNodes)));
        assert!(matches!(ClusterConfig::parse("nodes = 3", base), Err(ConfigError::Syntax(_))));
    }
}
