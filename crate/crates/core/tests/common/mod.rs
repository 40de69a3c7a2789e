#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sector::cluster::{ClusterConfig, InProcessCluster};
use sector::node::RecordIndex;
use sector::sphere::{ScheduleEvent, SegmentSite};
use sector::transport::LinkProfile;

pub const CLIENT: &str = "client:9000";

/// `n` nodes named `node-i:7000`, writable by host `client`.
pub fn cluster(n: usize, dir: &Path) -> InProcessCluster {
    cluster_with(n, dir, LinkProfile::new(), 3.min(n))
}

pub fn cluster_with(n: usize, dir: &Path, profile: LinkProfile, target: usize) -> InProcessCluster {
    let addrs: Vec<String> = (0..n).map(|i| format!("node-{i}:7000")).collect();
    cluster_at(&addrs, dir, profile, target)
}

pub fn cluster_at(addrs: &[String], dir: &Path, profile: LinkProfile, target: usize) -> InProcessCluster {
    let mut cfg = ClusterConfig::for_addrs(addrs, dir);
    for n in &mut cfg.nodes {
        n.acl = vec!["client".to_string()];
    }
    cfg.replica_target = target;
    cfg.profile = profile;
    InProcessCluster::start(cfg).unwrap()
}

/// `sizes.len()` records of the given sizes with random content.
pub fn random_records(sizes: &[usize], seed: u64) -> (Vec<u8>, RecordIndex) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<u8> = (0..sizes.iter().sum::<usize>()).map(|_| rng.gen()).collect();
    (data, RecordIndex::contiguous(sizes.iter().map(|&s| s as u64)))
}

/// Byte-wise multiset of records, for order-free comparison.
pub fn multiset<'a>(records: impl IntoIterator<Item = &'a [u8]>) -> HashMap<Vec<u8>, usize> {
    let mut m = HashMap::new();
    for r in records {
        *m.entry(r.to_vec()).or_insert(0) += 1;
    }
    m
}

/// Replays a schedule event log and checks it against the assignment rules:
///
/// - every segment starts once and finishes once, on one SPE at a time;
/// - no SPE runs two segments at once;
/// - work conservation: whenever the assigner has had its turn (just before
///   the next completion arrives), no SPE is idle while a segment waits;
/// - each start takes a segment of the lowest preference class available to
///   that SPE at that moment (local and free file, then free file, then
///   local, then anything).
///
/// Completions sharing one timestamp are a single batch, as the simulator
/// applies them all before assigning. A real job stamps the starts a moment
/// after the completion that freed the SPE, which this also accepts.
pub fn validate_schedule(segments: &[SegmentSite], spe_node: &[usize], log: &[ScheduleEvent]) -> Result<(), String> {
    let n = segments.len();
    let mut started = vec![false; n];
    let mut finished = vec![false; n];
    let mut running: Vec<Option<usize>> = vec![None; spe_node.len()];
    let mut file_busy: HashMap<usize, usize> = HashMap::new();
    let class = |file_busy: &HashMap<usize, usize>, spe: usize, seg: usize| -> u8 {
        let busy = file_busy.get(&segments[seg].file).copied().unwrap_or(0) > 0;
        let local = segments[seg].locations.contains(&spe_node[spe]);
        match (busy, local) {
            (false, true) => 0,
            (false, false) => 1,
            (true, true) => 2,
            (true, false) => 3,
        }
    };
    let conserved = |started: &[bool], running: &[Option<usize>], t: f64| -> Result<(), String> {
        if started.iter().any(|s| !s) {
            if let Some(idle) = running.iter().position(Option::is_none) {
                return Err(format!("t={t}: SPE {idle} idle while segments wait"));
            }
        }
        Ok(())
    };
    let mut prev: Option<&ScheduleEvent> = None;
    for ev in log {
        let t = ev.time();
        if prev.is_some_and(|p| t < p.time()) {
            return Err(format!("t={t}: event goes back in time"));
        }
        match *ev {
            ScheduleEvent::Finish { spe, seg, .. } => {
                let same_batch = matches!(prev, Some(ScheduleEvent::Finish { time, .. }) if *time == t);
                if !same_batch {
                    conserved(&started, &running, t)?;
                }
                if running[spe] != Some(seg) {
                    return Err(format!("t={t}: SPE {spe} finishes {seg} it was not running"));
                }
                running[spe] = None;
                finished[seg] = true;
                *file_busy.get_mut(&segments[seg].file).unwrap() -= 1;
            }
            ScheduleEvent::Start { spe, seg, .. } => {
                if started[seg] {
                    return Err(format!("t={t}: segment {seg} started twice"));
                }
                if running[spe].is_some() {
                    return Err(format!("t={t}: SPE {spe} is already busy"));
                }
                let mine = class(&file_busy, spe, seg);
                let best = (0..n).filter(|&s| !started[s]).map(|s| class(&file_busy, spe, s)).min().unwrap();
                if mine > best {
                    return Err(format!("t={t}: SPE {spe} took segment {seg} of class {mine} while class {best} was waiting"));
                }
                started[seg] = true;
                running[spe] = Some(seg);
                *file_busy.entry(segments[seg].file).or_default() += 1;
            }
        }
        prev = Some(ev);
    }
    if let Some(s) = (0..n).find(|&s| !finished[s]) {
        return Err(format!("segment {s} never finished"));
    }
    Ok(())
}

/// A random scheduling instance: up to 6 nodes with 1 or 2 SPEs each plus up
/// to 2 storage-only nodes, up to 8 files with 1 to 3 replicas, each split
/// into 1 to 5 segments.
pub fn random_instance(rng: &mut impl Rng) -> (Vec<SegmentSite>, Vec<usize>) {
    let nodes = rng.gen_range(1..=6);
    let spe_node: Vec<usize> = (0..nodes).flat_map(|node| std::iter::repeat_n(node, rng.gen_range(1..=2))).collect();
    let storage = nodes + rng.gen_range(0..=2);
    let files = rng.gen_range(1..=8);
    let mut segments = Vec::new();
    for file in 0..files {
        let replicas = rng.gen_range(1..=3.min(storage));
        let locations = rand::seq::index::sample(rng, storage, replicas).into_vec();
        for _ in 0..rng.gen_range(1..=5) {
            segments.push(SegmentSite { file, locations: locations.clone() });
        }
    }
    (segments, spe_node)
}

/// Entropy in bits of two class counts, written out independently of the
/// library but with the same order of floating-point operations.
pub fn entropy2(c: [u64; 2]) -> f64 {
    let n = (c[0] + c[1]) as f64;
    let mut h = 0.0;
    for x in c {
        if x > 0 {
            let p = x as f64 / n;
            h -= p * p.log2();
        }
    }
    h.max(0.0)
}

/// Exhaustive split search: every threshold between distinct adjacent keys,
/// class counts found by a full scan of the unsorted data each time. Returns
/// `(threshold, gain, parent entropy)`; the first of equal best gains wins.
pub fn terasplit_oracle(data: &[(u128, usize)]) -> (Option<u128>, f64, f64) {
    let mut parent = [0u64; 2];
    for &(_, l) in data {
        parent[l] += 1;
    }
    let h = entropy2(parent);
    let mut keys: Vec<u128> = data.iter().map(|d| d.0).collect();
    keys.sort_unstable();
    keys.dedup();
    let n = data.len() as f64;
    let mut best: Option<(u128, f64)> = None;
    for w in keys.windows(2) {
        let t = w[0] + (w[1] - w[0]) / 2;
        let mut left = [0u64; 2];
        for &(k, l) in data {
            if k <= t {
                left[l] += 1;
            }
        }
        let right = [parent[0] - left[0], parent[1] - left[1]];
        let nl = (left[0] + left[1]) as f64;
        let nr = (right[0] + right[1]) as f64;
        let g = (h - (nl / n) * entropy2(left) - (nr / n) * entropy2(right)).max(0.0);
        if g > 0.0 && best.is_none_or(|b| g > b.1) {
            best = Some((t, g));
        }
    }
    match best {
        Some((t, g)) => (Some(t), g, h),
        None => (None, 0.0, h),
    }
}

/// `n` labeled keys. Key width varies per dataset so some sets are full of
/// ties; labels lean on the key so that useful splits exist.
pub fn random_labeled(rng: &mut impl Rng, n: usize) -> Vec<(u128, usize)> {
    let bits = [4u32, 12, 40, 80][rng.gen_range(0..4)];
    let mask = (1u128 << bits) - 1;
    let cut = rng.gen::<u128>() & mask;
    let noise = rng.gen_range(0.0..0.5);
    (0..n)
        .map(|_| {
            let k = rng.gen::<u128>() & mask;
            let side = (k > cut) as usize;
            let l = if rng.gen_bool(noise) { 1 - side } else { side };
            (k, l)
        })
        .collect()
}
