use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::cql::Mode;
use crate::fabric::{FabricConfig, NodeId};
use crate::hier::Fairness;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LockKind {
    #[default]
    Cql,
    #[serde(alias = "cas")]
    Caslock,
    Ticket,
}

impl LockKind {
    pub fn name(self) -> &'static str {
        match self {
            LockKind::Cql => "cql",
            LockKind::Caslock => "caslock",
            LockKind::Ticket => "ticket",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cql" => Some(LockKind::Cql),
            "caslock" | "cas" => Some(LockKind::Caslock),
            "ticket" => Some(LockKind::Ticket),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadMode {
    #[default]
    Microbench,
    Objectstore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub num_cns: u16,
    pub clients_per_cn: u16,
    pub num_locks: u32,
    /// 0 is uniform.
    pub zipf_alpha: f64,
    pub read_ratio: f64,
    /// Object READs (shared) or WRITEs (exclusive) inside each critical section.
    pub critical_section_ops: u32,
    pub ops_per_client: u32,
    pub mode: WorkloadMode,
    pub object_size: u64,
    /// Object-store mode: size and probability of a large object.
    pub large_object_size: u64,
    pub large_fraction: f64,
    pub think_time_us: f64,
    /// Explicit acquisitions. When present, clients run only these and
    /// ignore the random stream.
    pub script: Vec<ScriptedOp>,
}

/// One scripted acquisition: client `client` of CN `cn` requests `lock` at
/// `at_us` after the start and holds it for `hold_us` beyond its
/// critical-section accesses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedOp {
    pub cn: u16,
    pub client: u16,
    pub at_us: f64,
    #[serde(default)]
    pub lock: u32,
    pub mode: Mode,
    #[serde(default)]
    pub hold_us: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            num_cns: 8,
            clients_per_cn: 32,
            num_locks: 100_000,
            zipf_alpha: 0.99,
            read_ratio: 0.5,
            critical_section_ops: 1,
            ops_per_client: 100_000,
            mode: WorkloadMode::Microbench,
            object_size: 64,
            large_object_size: 4096,
            large_fraction: 0.05,
            think_time_us: 0.0,
            script: Vec::new(),
        }
    }
}

impl WorkloadSpec {
    pub fn total_clients(&self) -> u32 {
        self.num_cns as u32 * self.clients_per_cn as u32
    }

    /// Address stride between objects.
    pub fn object_stride(&self) -> u64 {
        match self.mode {
            WorkloadMode::Microbench => self.object_size,
            WorkloadMode::Objectstore => self.object_size.max(self.large_object_size),
        }
        .next_multiple_of(8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LockConfig {
    pub kind: LockKind,
    pub fairness: Fairness,
    pub hierarchy: bool,
    pub reset_id_bits: u32,
    /// CQL queue capacity; derived from the cluster shape when absent.
    pub capacity: Option<u64>,
    pub acquisition_timeout_us: f64,
    pub backoff_base_us: f64,
    pub backoff_cap_us: f64,
    pub sync_interval_us: f64,
}

impl Default for LockConfig {
    fn default() -> Self {
        Self {
            kind: LockKind::Cql,
            fairness: Fairness::TaskFair,
            hierarchy: true,
            reset_id_bits: 8,
            capacity: None,
            acquisition_timeout_us: 10_000.0,
            backoff_base_us: 2.0,
            backoff_cap_us: 256.0,
            sync_interval_us: 1_000_000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSpec {
    /// `"mn"` or `"cn<i>"`.
    pub node: String,
    pub at_us: f64,
    #[serde(default)]
    pub recover_at_us: Option<f64>,
}

impl FailureSpec {
    pub fn node_id(&self) -> Option<NodeId> {
        if self.node == "mn" {
            return Some(NodeId::Mn);
        }
        self.node.strip_prefix("cn")?.parse().ok().map(NodeId::Cn)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    /// Watchdog horizon in simulated µs; 60 s when absent.
    pub horizon_us: Option<f64>,
    pub fabric: FabricConfig,
    pub workload: WorkloadSpec,
    pub lock: LockConfig,
    pub failures: Vec<FailureSpec>,
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let c: Self = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |s: &str| Err(BenchError::Config(s.to_string()));
        let w = &self.workload;
        if w.num_cns == 0 || w.clients_per_cn == 0 || w.num_locks == 0 || w.ops_per_client == 0 {
            return bad("workload counts must be > 0");
        }
        if w.clients_per_cn > 255 {
            return bad("clients_per_cn must be <= 255");
        }
        if !(0.0..=1.0).contains(&w.read_ratio) || !(0.0..=1.0).contains(&w.large_fraction) {
            return bad("read_ratio and large_fraction must lie in [0, 1]");
        }
        if !(w.zipf_alpha >= 0.0) || !(w.think_time_us >= 0.0) {
            return bad("zipf_alpha and think_time_us must be >= 0");
        }
        if w.object_size == 0 || w.object_stride() as usize > self.fabric.max_io_len {
            return bad("object sizes must lie in 1..=max_io_len");
        }
        for op in &w.script {
            if op.cn == 0 || op.cn > w.num_cns || op.client >= w.clients_per_cn || op.lock >= w.num_locks {
                return bad("scripted op names an unknown client or lock");
            }
            if !(op.at_us >= 0.0) || !(op.hold_us >= 0.0) {
                return bad("scripted times must be >= 0");
            }
        }
        let l = &self.lock;
        if !(l.acquisition_timeout_us > 0.0) || !(l.backoff_base_us > 0.0) || l.backoff_cap_us < l.backoff_base_us {
            return bad("timeout and backoff must be > 0 with cap >= base");
        }
        if !(l.sync_interval_us > 0.0) {
            return bad("sync_interval_us must be > 0");
        }
        if (1u64 << l.reset_id_bits.min(16)) <= w.num_cns as u64 {
            return bad("reset_id_bits too small for num_cns");
        }
        for f in &self.failures {
            match f.node_id() {
                Some(NodeId::Cn(c)) if c == 0 || c > w.num_cns => return bad("failure names an unknown CN"),
                None => return bad("failure node must be mn or cn<i>"),
                _ => {}
            }
            if f.recover_at_us.is_some_and(|r| r <= f.at_us) {
                return bad("recovery must come after the failure");
            }
        }
        self.fabric.validate().map_err(|e| BenchError::Config(e.to_string()))?;
        Ok(())
    }
}
