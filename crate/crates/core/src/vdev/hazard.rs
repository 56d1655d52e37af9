//! Access recorder that flags use-after-free and cross-stream accesses
//! with no happens-before path between them.

use std::collections::HashMap;

use serde::Serialize;

use super::clock::VClock;
use super::MemRange;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HazardKind {
    UseAfterFree,
    UnorderedAccess,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HazardReport {
    pub kind: HazardKind,
    pub device: usize,
    pub start: usize,
    pub len: usize,
    /// Label of the earlier access ("stream 1: vt::add").
    pub first: String,
    /// Label of the access that triggered the report.
    pub second: String,
    pub seq: u64,
}

#[derive(Debug, Clone)]
struct Access {
    start: usize,
    end: usize,
    write: bool,
    clock: VClock,
    label: String,
}

#[derive(Debug, Default)]
pub(crate) struct HazardDetector {
    pub enabled: bool,
    history: HashMap<usize, Vec<Access>>,
    // [start, end) -> label of the free that killed it
    dead: HashMap<usize, Vec<(usize, usize, String)>>,
    pub reports: Vec<HazardReport>,
}

const MAX_HISTORY: usize = 4096;

impl HazardDetector {
    pub fn clear(&mut self) {
        self.history.clear();
        self.dead.clear();
        self.reports.clear();
    }

    pub fn access(&mut self, range: &MemRange, write: bool, clock: &VClock, label: &str, seq: u64) {
        if !self.enabled || range.len == 0 {
            return;
        }
        let Some(device) = range.device else { return };
        let (start, end) = (range.start, range.start + range.len);

        if let Some(dead) = self.dead.get(&device) {
            if let Some((_, _, who)) = dead.iter().find(|(s, e, _)| *s < end && start < *e) {
                self.reports.push(HazardReport {
                    kind: HazardKind::UseAfterFree,
                    device,
                    start,
                    len: range.len,
                    first: who.clone(),
                    second: label.to_string(),
                    seq,
                });
            }
        }
        self.check_and_push(device, start, end, write, clock, label, seq);
    }

    pub fn alloc(&mut self, range: &MemRange, clock: &VClock, label: &str, seq: u64) {
        if !self.enabled || range.len == 0 {
            return;
        }
        let Some(device) = range.device else { return };
        let (start, end) = (range.start, range.start + range.len);
        if let Some(dead) = self.dead.get_mut(&device) {
            carve(dead, start, end);
        }
        self.check_and_push(device, start, end, true, clock, label, seq);
    }

    pub fn free(&mut self, range: &MemRange, clock: &VClock, label: &str, seq: u64) {
        if !self.enabled || range.len == 0 {
            return;
        }
        let Some(device) = range.device else { return };
        let (start, end) = (range.start, range.start + range.len);
        self.check_and_push(device, start, end, true, clock, label, seq);
        self.dead.entry(device).or_default().push((start, end, label.to_string()));
    }

    #[allow(clippy::too_many_arguments)]
    fn check_and_push(&mut self, device: usize, start: usize, end: usize, write: bool, clock: &VClock, label: &str, seq: u64) {
        let hist = self.history.entry(device).or_default();
        for a in hist.iter() {
            if a.start < end && start < a.end && (a.write || write) && !a.clock.le(clock) {
                self.reports.push(HazardReport {
                    kind: HazardKind::UnorderedAccess,
                    device,
                    start,
                    len: end - start,
                    first: a.label.clone(),
                    second: label.to_string(),
                    seq,
                });
                break;
            }
        }
        if write {
            // anything fully covered and ordered before this write is subsumed by it
            hist.retain(|a| !(a.start >= start && a.end <= end && a.clock.le(clock)));
        }
        hist.push(Access { start, end, write, clock: clock.clone(), label: label.to_string() });
        if hist.len() > MAX_HISTORY {
            let drop_n = hist.len() - MAX_HISTORY;
            hist.drain(..drop_n);
        }
    }
}

fn carve(dead: &mut Vec<(usize, usize, String)>, start: usize, end: usize) {
    let mut out = Vec::with_capacity(dead.len());
    for (s, e, who) in dead.drain(..) {
        if e <= start || s >= end {
            out.push((s, e, who));
            continue;
        }
        if s < start {
            out.push((s, start, who.clone()));
        }
        if e > end {
            out.push((end, e, who));
        }
    }
    *dead = out;
}
