//! Browser bindings. Each export takes a JSON request and returns a JSON
//! reply, so the page needs no generated types beyond strings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use sector::angle::{self, AngleConfig, Synthetic};
use sector::routing::{hash_name, RingView};
use sector::sphere::schedule::{simulate, ScheduleInstance};
use sector::sphere::{ScheduleEvent, SegmentSite};
use sector::transport::NodeAddr;

fn reply<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

fn request<'a, T: Deserialize<'a>>(json: &'a str) -> Result<T, String> {
    serde_json::from_str(json).map_err(|e| format!("bad request: {e}"))
}

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct AngleRequest {
    pub seed: u64,
    pub windows: usize,
    pub per_blob: usize,
    pub spread: f64,
    /// Window where the extra blob appears; none keeps the stream stable.
    pub planted_window: Option<usize>,
    pub planted: [f64; 2],
    pub k: usize,
    pub history: usize,
    pub z: f64,
    /// Score grid resolution per axis.
    pub grid: usize,
}

impl Default for AngleRequest {
    fn default() -> Self {
        Self {
            seed: 7,
            windows: 30,
            per_blob: 40,
            spread: 0.5,
            planted_window: Some(21),
            planted: [30.0, -10.0],
            k: 5,
            history: angle::DEFAULT_HISTORY,
            z: angle::DEFAULT_Z,
            grid: 48,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct AngleWindow {
    pub index: i64,
    pub members: usize,
    pub delta: Option<f64>,
    pub flagged: bool,
    pub centers: Vec<Vec<f64>>,
    pub emergent: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct AngleReply {
    pub windows: Vec<AngleWindow>,
    pub flagged: Vec<i64>,
    /// `[x_min, x_max, y_min, y_max]` of the score grid.
    pub bounds: [f64; 4],
    /// Row-major scores, `grid` rows of `grid` values; empty when nothing
    /// was flagged.
    pub scores: Vec<f64>,
    pub grid: usize,
}

pub fn angle_run(req: &AngleRequest) -> Result<AngleReply, String> {
    if req.windows == 0 || req.windows > 200 || req.per_blob == 0 || req.per_blob > 500 {
        return Err("windows must be 1..=200 and per_blob 1..=500".into());
    }
    let gen = Synthetic {
        windows: req.windows,
        per_blob: req.per_blob,
        spread: req.spread,
        planted: req.planted_window.map(|w| (w, req.planted.to_vec())),
        seed: req.seed,
        ..Default::default()
    };
    let cfg = AngleConfig { k: req.k, history: req.history, z: req.z, seed: req.seed, ..Default::default() };
    let report = angle::analyze(&gen.generate(), &cfg).map_err(|e| e.to_string())?;

    let mut bounds = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    let mut windows = Vec::new();
    for w in &report.windows {
        let centers: Vec<Vec<f64>> = w.model.as_ref().map(|m| m.centers().iter().map(|c| c.to_vec()).collect()).unwrap_or_default();
        for c in &centers {
            bounds[0] = bounds[0].min(c[0]);
            bounds[1] = bounds[1].max(c[0]);
            bounds[2] = bounds[2].min(c[1]);
            bounds[3] = bounds[3].max(c[1]);
        }
        windows.push(AngleWindow {
            index: w.index,
            members: w.members,
            delta: w.delta,
            flagged: w.flagged,
            centers,
            emergent: w.emergent.clone(),
        });
    }
    if !bounds[0].is_finite() {
        bounds = [0.0, 1.0, 0.0, 1.0];
    }
    let pad = 3.0;
    bounds = [bounds[0] - pad, bounds[1] + pad, bounds[2] - pad, bounds[3] + pad];

    let emergent = report.emergent();
    let grid = req.grid.clamp(4, 128);
    let mut scores = Vec::new();
    if !emergent.is_empty() {
        for row in 0..grid {
            let y = bounds[3] - (bounds[3] - bounds[2]) * (row as f64 + 0.5) / grid as f64;
            for col in 0..grid {
                let x = bounds[0] + (bounds[1] - bounds[0]) * (col as f64 + 0.5) / grid as f64;
                scores.push(angle::score(&[x, y], &emergent).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(AngleReply { windows, flagged: report.flagged(), bounds, scores, grid })
}

#[derive(Debug, Deserialize)]
pub struct RouteRequest {
    pub nodes: usize,
    pub name: String,
    /// Member position (in ring order) that starts the lookup.
    #[serde(default)]
    pub from: usize,
}

#[derive(Debug, Serialize)]
pub struct RingMember {
    pub addr: String,
    pub id: String,
    /// Position on the circle in [0, 1).
    pub at: f64,
}

#[derive(Debug, Serialize)]
pub struct RouteReply {
    pub members: Vec<RingMember>,
    pub key: String,
    pub key_at: f64,
    pub owner: String,
    pub path: Vec<String>,
    pub fingers: Vec<String>,
    pub hops: usize,
    pub hop_bound: usize,
}

pub fn route_run(req: &RouteRequest) -> Result<RouteReply, String> {
    if !(1..=256).contains(&req.nodes) {
        return Err("nodes must be 1..=256".into());
    }
    let addrs: Vec<NodeAddr> = (0..req.nodes).map(|i| NodeAddr::new(format!("node-{i}:7000"))).collect();
    let ring = RingView::from_addrs(&addrs).map_err(|e| e.to_string())?;
    let key = hash_name(&req.name).map_err(|e| e.to_string())?;
    let start = &ring.members()[req.from % ring.len()].addr;
    let route = ring.route(start, &key).map_err(|e| e.to_string())?;
    let fingers = ring.fingers_of(start).map_err(|e| e.to_string())?;
    let mut fingers: Vec<String> = fingers.iter().map(|m| m.addr.to_string()).collect();
    fingers.dedup();
    Ok(RouteReply {
        members: ring.members().iter().map(|m| RingMember { addr: m.addr.to_string(), id: m.id.to_hex(), at: m.id.ring_fraction() }).collect(),
        key: key.to_hex(),
        key_at: key.ring_fraction(),
        owner: route.owner.addr.to_string(),
        hops: route.hops(),
        path: route.visited.iter().map(NodeAddr::to_string).collect(),
        fingers,
        hop_bound: (req.nodes as f64).log2().ceil() as usize + 1,
    })
}

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct ScheduleRequest {
    pub seed: u64,
    pub nodes: usize,
    pub spes_per_node: usize,
    pub files: usize,
    pub replicas: usize,
    pub segments_per_file: usize,
    /// Duration multiplier when an SPE reads from another node.
    pub remote_cost: f64,
}

impl Default for ScheduleRequest {
    fn default() -> Self {
        Self { seed: 1, nodes: 4, spes_per_node: 2, files: 6, replicas: 1, segments_per_file: 3, remote_cost: 1.5 }
    }
}

#[derive(Debug, Serialize)]
pub struct Bar {
    pub spe: usize,
    pub node: usize,
    pub seg: usize,
    pub file: usize,
    pub start: f64,
    pub end: f64,
    pub local: bool,
}

#[derive(Debug, Serialize)]
pub struct ScheduleReply {
    pub spe_node: Vec<usize>,
    pub file_nodes: Vec<Vec<usize>>,
    pub bars: Vec<Bar>,
    pub makespan: f64,
    pub local_fraction: f64,
}

pub fn schedule_run(req: &ScheduleRequest) -> Result<ScheduleReply, String> {
    let ok = (1..=16).contains(&req.nodes)
        && (1..=4).contains(&req.spes_per_node)
        && (1..=32).contains(&req.files)
        && (1..=req.nodes).contains(&req.replicas)
        && (1..=16).contains(&req.segments_per_file)
        && req.remote_cost >= 1.0;
    if !ok {
        return Err("parameters out of range".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let spe_node: Vec<usize> = (0..req.nodes).flat_map(|n| std::iter::repeat_n(n, req.spes_per_node)).collect();
    let mut file_nodes = Vec::new();
    let mut segments = Vec::new();
    for file in 0..req.files {
        let first = rng.gen_range(0..req.nodes);
        let locations: Vec<usize> = (0..req.replicas).map(|r| (first + r) % req.nodes).collect();
        for _ in 0..req.segments_per_file {
            segments.push(SegmentSite { file, locations: locations.clone() });
        }
        file_nodes.push(locations);
    }
    let base: Vec<f64> = segments.iter().map(|_| rng.gen_range(1.0..2.0)).collect();
    let is_local = |seg: usize, spe: usize| segments[seg].locations.contains(&spe_node[spe]);
    let log = simulate(&ScheduleInstance { segments: segments.clone(), spe_node: spe_node.clone() }, |seg, spe| {
        if is_local(seg, spe) {
            base[seg]
        } else {
            base[seg] * req.remote_cost
        }
    });
    let mut starts = vec![0.0; segments.len()];
    let mut bars = Vec::new();
    for e in &log {
        match *e {
            ScheduleEvent::Start { time, seg, .. } => starts[seg] = time,
            ScheduleEvent::Finish { time, spe, seg } => bars.push(Bar {
                spe,
                node: spe_node[spe],
                seg,
                file: segments[seg].file,
                start: starts[seg],
                end: time,
                local: is_local(seg, spe),
            }),
        }
    }
    let makespan = bars.iter().map(|b| b.end).fold(0.0, f64::max);
    let local_fraction = bars.iter().filter(|b| b.local).count() as f64 / bars.len().max(1) as f64;
    Ok(ScheduleReply { spe_node, file_nodes, bars, makespan, local_fraction })
}

/// Synthetic Angle run; returns windows, flags and an emergent-score grid.
#[wasm_bindgen]
pub fn angle(json: &str) -> Result<String, JsValue> {
    reply(request(json).and_then(|r| angle_run(&r)))
}

/// Finger-table lookup of a file name on a ring of named nodes.
#[wasm_bindgen]
pub fn route(json: &str) -> Result<String, JsValue> {
    reply(request(json).and_then(|r| route_run(&r)))
}

/// Simulated segment assignment as per-SPE bars.
#[wasm_bindgen]
pub fn schedule(json: &str) -> Result<String, JsValue> {
    reply(request(json).and_then(|r| schedule_run(&r)))
}
