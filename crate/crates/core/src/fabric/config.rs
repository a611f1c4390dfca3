use serde::{Deserialize, Serialize};

use super::{FabricError, OpKind, Time, NS_PER_US};

/// IOPS weight charged against the MN-NIC for each verb.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpCost {
    pub read: u32,
    pub write: u32,
    pub cas: u32,
    pub faa: u32,
}

impl Default for OpCost {
    fn default() -> Self {
        Self {
            read: 1,
            write: 1,
            cas: 4,
            faa: 4,
        }
    }
}

impl OpCost {
    pub fn weight(&self, kind: OpKind) -> u32 {
        match kind {
            OpKind::Read => self.read,
            OpKind::Write => self.write,
            OpKind::Cas => self.cas,
            OpKind::Faa => self.faa,
        }
    }
}

/// Network and NIC parameters of the simulated cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FabricConfig {
    /// Round-trip latency of a one-sided verb between a CN and the MN, in µs.
    pub latency_cn_mn_us: f64,
    /// One-way delivery latency of a CN-to-CN message, in µs.
    pub latency_cn_cn_us: f64,
    /// Weighted operations per second the MN-NIC can execute.
    pub mn_nic_iops_capacity: f64,
    /// Token-bucket depth of the MN-NIC, in weight units.
    pub mn_nic_burst: u32,
    pub op_cost: OpCost,
    /// MN link bandwidth in bytes per second.
    pub mn_bandwidth: f64,
    /// Largest READ/WRITE payload accepted by the fabric.
    pub max_io_len: usize,
    /// Size of the MN address space in bytes.
    pub mn_memory_bytes: u64,
    pub seed: u64,
}

impl Default for FabricConfig {
    fn default() -> Self {
        Self {
            latency_cn_mn_us: 2.0,
            latency_cn_cn_us: 2.0,
            mn_nic_iops_capacity: 60e6,
            mn_nic_burst: 8,
            op_cost: OpCost::default(),
            mn_bandwidth: 12.5e9,
            max_io_len: 4096,
            mn_memory_bytes: 1 << 40,
            seed: 0,
        }
    }
}

impl FabricConfig {
    /// Sets the CN-CN latency to `ratio` times the CN-MN latency.
    pub fn with_cn_cn_ratio(mut self, ratio: f64) -> Self {
        self.latency_cn_cn_us = self.latency_cn_mn_us * ratio;
        self
    }

    pub fn validate(&self) -> Result<(), FabricError> {
        let bad = |what: &str| Err(FabricError::InvalidConfig(what.to_string()));
        if !(self.latency_cn_mn_us > 0.0) || !(self.latency_cn_cn_us > 0.0) {
            return bad("latencies must be > 0");
        }
        if !(self.mn_nic_iops_capacity > 0.0) || !(self.mn_bandwidth > 0.0) {
            return bad("capacity and bandwidth must be > 0");
        }
        let c = &self.op_cost;
        if c.read < 1 || c.write < 1 || c.cas < 1 || c.faa < 1 {
            return bad("op weights must be >= 1");
        }
        if self.mn_nic_burst < c.read.max(c.write).max(c.cas).max(c.faa) {
            return bad("nic burst must cover the heaviest op weight");
        }
        if self.max_io_len < 8 {
            return bad("max_io_len must be >= 8");
        }
        Ok(())
    }

    pub(crate) fn cn_mn_rtt(&self) -> Time {
        us_to_ns(self.latency_cn_mn_us)
    }

    pub(crate) fn cn_cn_latency(&self) -> Time {
        us_to_ns(self.latency_cn_cn_us)
    }
}

pub(crate) fn us_to_ns(us: f64) -> Time {
    (us * NS_PER_US as f64).round() as Time
}
