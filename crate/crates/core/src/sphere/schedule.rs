//! Segment-to-SPE assignment.
//!
//! When an SPE is idle it takes, in order of preference:
//!
//! 0. a segment local to it whose file has nothing else running,
//! 1. a non-local segment whose file has nothing else running,
//! 2. a local segment whose file is already being processed,
//! 3. any remaining segment.
//!
//! So locality wins first, files are not processed twice at once unless an
//! SPE would otherwise sit idle, and nothing idles while work is waiting.
//! The same struct drives real jobs and the simulator below.

use std::collections::{BTreeSet, HashMap};

/// A segment as the scheduler sees it: which file, and which nodes hold a
/// replica of that file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentSite {
    pub file: usize,
    pub locations: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailOutcome {
    /// Requeued for a second attempt away from the failing node.
    Retrying,
    /// Second failure; the segment is given up.
    Failed,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    segs: Vec<SegmentSite>,
    spe_node: Vec<usize>,
    pending: BTreeSet<usize>,
    running: Vec<Option<usize>>,
    running_files: HashMap<usize, usize>,
    disabled: Vec<bool>,
    excluded: HashMap<usize, Vec<usize>>,
    attempts: Vec<u8>,
    failed: Vec<usize>,
    completed: usize,
}

impl Scheduler {
    pub fn new(segs: Vec<SegmentSite>, spe_node: Vec<usize>) -> Self {
        let n = segs.len();
        let spes = spe_node.len();
        Self {
            pending: (0..n).collect(),
            attempts: vec![0; n],
            segs,
            running: vec![None; spes],
            disabled: vec![false; spes],
            spe_node,
            running_files: HashMap::new(),
            excluded: HashMap::new(),
            failed: Vec::new(),
            completed: 0,
        }
    }

    pub fn spe_count(&self) -> usize {
        self.spe_node.len()
    }

    pub fn spe_node(&self, spe: usize) -> usize {
        self.spe_node[spe]
    }

    pub fn segment(&self, seg: usize) -> &SegmentSite {
        &self.segs[seg]
    }

    pub fn is_local(&self, spe: usize, seg: usize) -> bool {
        self.segs[seg].locations.contains(&self.spe_node[spe])
    }

    /// Preference class of running `seg` on `spe` right now (lower is better).
    pub fn class_of(&self, spe: usize, seg: usize) -> u8 {
        let busy_file = self.running_files.get(&self.segs[seg].file).copied().unwrap_or(0) > 0;
        match (busy_file, self.is_local(spe, seg)) {
            (false, true) => 0,
            (false, false) => 1,
            (true, true) => 2,
            (true, false) => 3,
        }
    }

    fn allowed(&self, spe: usize, seg: usize) -> bool {
        match self.excluded.get(&seg) {
            None => true,
            Some(nodes) => {
                if !nodes.contains(&self.spe_node[spe]) {
                    return true;
                }
                // Only excluded nodes have live SPEs: run it anyway.
                (0..self.spe_node.len()).all(|s| self.disabled[s] || nodes.contains(&self.spe_node[s]))
            }
        }
    }

    fn idle(&self, spe: usize) -> bool {
        !self.disabled[spe] && self.running[spe].is_none()
    }

    fn best_for(&self, spe: usize) -> Option<usize> {
        let mut best: Option<(u8, usize, usize)> = None;
        for &seg in &self.pending {
            if !self.allowed(spe, seg) {
                continue;
            }
            let class = self.class_of(spe, seg);
            // Among local candidates, take the one with the fewest replicas
            // so that widely replicated work stays available to other SPEs.
            let spread = if class == 0 { self.segs[seg].locations.len() } else { 0 };
            let key = (class, spread, seg);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
        best.map(|(_, _, seg)| seg)
    }

    fn start(&mut self, spe: usize, seg: usize) {
        self.pending.remove(&seg);
        self.running[spe] = Some(seg);
        *self.running_files.entry(self.segs[seg].file).or_default() += 1;
        self.attempts[seg] += 1;
    }

    fn stop(&mut self, spe: usize) -> usize {
        let seg = self.running[spe].take().expect("SPE is not running a segment");
        let f = self.segs[seg].file;
        let c = self.running_files.get_mut(&f).unwrap();
        *c -= 1;
        if *c == 0 {
            self.running_files.remove(&f);
        }
        seg
    }

    /// Fill every idle SPE that can be given work. Returns `(spe, segment)`
    /// pairs in the order they were decided.
    pub fn assign(&mut self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        // Local, uncontended work first, so that a later SPE does not lose
        // its only local segment to an SPE that had other local choices.
        for spe in 0..self.spe_node.len() {
            if self.idle(spe) {
                if let Some(seg) = self.best_for(spe) {
                    if self.class_of(spe, seg) == 0 {
                        self.start(spe, seg);
                        out.push((spe, seg));
                    }
                }
            }
        }
        for spe in 0..self.spe_node.len() {
            if self.idle(spe) {
                if let Some(seg) = self.best_for(spe) {
                    self.start(spe, seg);
                    out.push((spe, seg));
                }
            }
        }
        out
    }

    /// The segment on `spe` finished successfully.
    pub fn complete(&mut self, spe: usize) -> usize {
        let seg = self.stop(spe);
        self.completed += 1;
        seg
    }

    /// The segment on `spe` failed. The first failure requeues it, barred
    /// from the node it failed on.
    pub fn fail(&mut self, spe: usize) -> (usize, FailOutcome) {
        let seg = self.stop(spe);
        if self.attempts[seg] >= 2 {
            self.failed.push(seg);
            return (seg, FailOutcome::Failed);
        }
        self.excluded.entry(seg).or_default().push(self.spe_node[spe]);
        self.pending.insert(seg);
        (seg, FailOutcome::Retrying)
    }

    /// Stop using an SPE (its node went away). Call after `fail`/`complete`.
    pub fn disable(&mut self, spe: usize) {
        assert!(self.running[spe].is_none(), "disable a busy SPE");
        self.disabled[spe] = true;
    }

    pub fn live_spes(&self) -> usize {
        self.disabled.iter().filter(|d| !**d).count()
    }

    pub fn running_count(&self) -> usize {
        self.running.iter().filter(|r| r.is_some()).count()
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    /// Nothing pending or running: either everything completed or the rest
    /// has failed.
    pub fn is_finished(&self) -> bool {
        self.running_count() == 0 && (self.pending.is_empty() || self.live_spes() == 0)
    }

    pub fn failed(&self) -> &[usize] {
        &self.failed
    }

    /// Segments still pending (e.g. stranded when every SPE is gone).
    pub fn stranded(&self) -> Vec<usize> {
        self.pending.iter().copied().collect()
    }

    pub fn completed(&self) -> usize {
        self.completed
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleEvent {
    Start { time: f64, spe: usize, seg: usize },
    Finish { time: f64, spe: usize, seg: usize },
}

impl ScheduleEvent {
    pub fn time(&self) -> f64 {
        match *self {
            ScheduleEvent::Start { time, .. } | ScheduleEvent::Finish { time, .. } => time,
        }
    }
}

/// A scheduling problem for the simulator.
#[derive(Debug, Clone)]
pub struct ScheduleInstance {
    pub segments: Vec<SegmentSite>,
    pub spe_node: Vec<usize>,
}

/// Run the scheduler against simulated segment durations. `duration(seg,
/// spe)` must be positive. Finishes that share a timestamp are all applied
/// before the next assignment round.
pub fn simulate(inst: &ScheduleInstance, mut duration: impl FnMut(usize, usize) -> f64) -> Vec<ScheduleEvent> {
    let mut s = Scheduler::new(inst.segments.clone(), inst.spe_node.clone());
    let mut log = Vec::new();
    let mut busy_until: Vec<Option<f64>> = vec![None; inst.spe_node.len()];
    let mut now = 0.0;
    loop {
        for (spe, seg) in s.assign() {
            log.push(ScheduleEvent::Start { time: now, spe, seg });
            let d = duration(seg, spe);
            assert!(d > 0.0, "segment durations must be positive");
            busy_until[spe] = Some(now + d);
        }
        let Some(next) = busy_until.iter().flatten().copied().reduce(f64::min) else {
            break;
        };
        now = next;
        for spe in 0..busy_until.len() {
            if busy_until[spe] == Some(now) {
                busy_until[spe] = None;
                let seg = s.complete(spe);
                log.push(ScheduleEvent::Finish { time: now, spe, seg });
            }
        }
    }
    log
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site(file: usize, locs: &[usize]) -> SegmentSite {
        SegmentSite { file, locations: locs.to_vec() }
    }

    #[test]
    fn each_spe_keeps_to_its_local_file() {
        let inst = ScheduleInstance {
            segments: vec![site(0, &[0]), site(0, &[0]), site(1, &[1]), site(1, &[1])],
            spe_node: vec![0, 1],
        };
        for ev in simulate(&inst, |_, _| 1.0) {
            if let ScheduleEvent::Start { spe, seg, .. } = ev {
                assert_eq!(inst.segments[seg].file, spe);
            }
        }
    }

    #[test]
    fn one_file_still_uses_both_spes() {
        let inst = ScheduleInstance { segments: (0..4).map(|_| site(0, &[0])).collect(), spe_node: vec![0, 1] };
        let log = simulate(&inst, |_, _| 1.0);
        let at_zero: Vec<_> = log.iter().filter(|e| matches!(e, ScheduleEvent::Start { time, .. } if *time == 0.0)).collect();
        assert_eq!(at_zero.len(), 2);
    }

    #[test]
    fn constrained_local_work_goes_to_its_only_holder() {
        // Segment 0 is on both nodes, segment 1 only on node 0.
        let mut s = Scheduler::new(vec![site(0, &[0, 1]), site(1, &[0])], vec![0, 1]);
        let a = s.assign();
        assert!(a.contains(&(0, 1)) && a.contains(&(1, 0)), "{a:?}");
    }

    #[test]
    fn failure_retries_once_elsewhere_then_gives_up() {
        let mut s = Scheduler::new(vec![site(0, &[0, 1])], vec![0, 1]);
        assert_eq!(s.assign(), vec![(0, 0)]);
        assert_eq!(s.fail(0), (0, FailOutcome::Retrying));
        assert_eq!(s.assign(), vec![(1, 0)]);
        assert_eq!(s.fail(1), (0, FailOutcome::Failed));
        assert!(s.is_finished());
        assert_eq!(s.failed(), &[0]);
    }

    #[test]
    fn retry_on_the_only_node_when_nothing_else_lives() {
        let mut s = Scheduler::new(vec![site(0, &[0])], vec![0]);
        s.assign();
        s.fail(0);
        assert_eq!(s.assign(), vec![(0, 0)]);
    }
}
