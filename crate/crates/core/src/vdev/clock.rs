use std::collections::BTreeMap;

/// (device, stream) pair identifying one execution lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub struct Lane {
    pub device: usize,
    pub stream: usize,
}

/// Vector clock over execution lanes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VClock(BTreeMap<Lane, u64>);

impl VClock {
    pub fn get(&self, lane: Lane) -> u64 {
        self.0.get(&lane).copied().unwrap_or(0)
    }

    pub fn set(&mut self, lane: Lane, v: u64) {
        self.0.insert(lane, v);
    }

    pub fn join(&mut self, other: &VClock) {
        for (&k, &v) in &other.0 {
            let e = self.0.entry(k).or_insert(0);
            if v > *e {
                *e = v;
            }
        }
    }

    /// Component-wise `self <= other`: everything `self` has seen, `other`
    /// has seen too.
    pub fn le(&self, other: &VClock) -> bool {
        self.0.iter().all(|(&k, &v)| v <= other.get(k))
    }
}
