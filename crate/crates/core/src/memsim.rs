//! Two-level memory model: configuration, byte ledger and an L1 arena that
//! tracks live buffers and their peak.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_L1_BYTES: u64 = 64 * 1024;
pub const DEFAULT_L2_BYTES: u64 = 512 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub l1_bytes: u64,
    pub l2_bytes: u64,
    pub double_buffer: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            l1_bytes: DEFAULT_L1_BYTES,
            l2_bytes: DEFAULT_L2_BYTES,
            double_buffer: false,
        }
    }
}

impl MemoryConfig {
    pub fn with_l1(l1_bytes: u64) -> Self {
        MemoryConfig {
            l1_bytes,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l1_bytes == 0 || self.l2_bytes == 0 {
            return Err(Error::Config("memory sizes must be positive".into()));
        }
        if self.l1_bytes >= self.l2_bytes {
            return Err(Error::Config(format!(
                "l1 ({}) must be smaller than l2 ({})",
                self.l1_bytes, self.l2_bytes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// L2 to L1.
    Load,
    /// L1 to L2.
    Store,
    /// In-L1 layout pass.
    Reorder,
}

/// Byte counters for one run (or one node of a run).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrafficLedger {
    pub load_bytes: u64,
    pub store_bytes: u64,
    pub reorder_bytes: u64,
    pub peak_l1_bytes: u64,
}

impl TrafficLedger {
    pub fn record_transfer(&mut self, dir: Direction, n: u64) {
        match dir {
            Direction::Load => self.load_bytes += n,
            Direction::Store => self.store_bytes += n,
            Direction::Reorder => self.reorder_bytes += n,
        }
    }

    /// L2 traffic (load + store).
    pub fn transfer_bytes(&self) -> u64 {
        self.load_bytes + self.store_bytes
    }

    /// Objective minimized by the planner.
    pub fn cost(&self) -> u64 {
        self.load_bytes + self.store_bytes + self.reorder_bytes
    }

    /// Sums counters and keeps the larger peak.
    pub fn merge(&mut self, other: &TrafficLedger) {
        self.load_bytes += other.load_bytes;
        self.store_bytes += other.store_bytes;
        self.reorder_bytes += other.reorder_bytes;
        self.peak_l1_bytes = self.peak_l1_bytes.max(other.peak_l1_bytes);
    }
}

/// L1 footprint split into streamed I/O tiles and per-phase resident buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Footprint {
    /// Input and output tile buffers; doubled under double buffering.
    pub streamed: u64,
    /// Weights, biases, staging and fused intermediate buffers.
    pub resident: u64,
}

impl Footprint {
    pub fn effective(&self, double_buffer: bool) -> u64 {
        let k = if double_buffer { 2 } else { 1 };
        self.streamed * k + self.resident
    }
}

pub fn check_fit(fp: &Footprint, cfg: &MemoryConfig) -> bool {
    fp.effective(cfg.double_buffer) <= cfg.l1_bytes
}

/// Handle for a live L1 allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufId(usize);

/// Tracks live L1 buffers for one executor phase sequence.
#[derive(Debug)]
pub struct L1Arena {
    capacity: u64,
    live: Vec<Option<(String, u64)>>,
    used: u64,
    peak: u64,
}

impl L1Arena {
    pub fn new(capacity: u64) -> Self {
        L1Arena {
            capacity,
            live: Vec::new(),
            used: 0,
            peak: 0,
        }
    }

    /// Reserves `bytes`; fails rather than exceeding capacity.
    pub fn alloc(&mut self, owner: &str, name: &str, bytes: u64) -> Result<BufId> {
        if self.used + bytes > self.capacity {
            return Err(Error::infeasible(
                owner,
                format!(
                    "L1 allocation of {bytes} bytes for `{name}` exceeds capacity ({} of {} in use)",
                    self.used, self.capacity
                ),
            ));
        }
        self.used += bytes;
        self.peak = self.peak.max(self.used);
        self.live.push(Some((name.to_string(), bytes)));
        Ok(BufId(self.live.len() - 1))
    }

    pub fn free(&mut self, id: BufId) {
        if let Some((_, bytes)) = self.live[id.0].take() {
            self.used -= bytes;
        }
    }

    pub fn free_all(&mut self) {
        for slot in &mut self.live {
            if let Some((_, b)) = slot.take() {
                self.used -= b;
            }
        }
        self.live.clear();
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn peak(&self) -> u64 {
        self.peak
    }

    pub fn reset_peak(&mut self) {
        self.peak = self.used;
    }
}
