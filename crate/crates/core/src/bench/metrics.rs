use serde::Serialize;

use super::config::BenchConfig;
use crate::checker::Report;
use crate::fabric::{Time, NS_PER_US};
use crate::record::LockStats;

/// Nearest-rank percentile of an unsorted population, `p` in (0, 1].
pub fn nearest_rank(values: &[Time], p: f64) -> Option<Time> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn us(t: Time) -> f64 {
    t as f64 / NS_PER_US as f64
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    /// Completed application ops per simulated second.
    pub throughput: f64,
    pub latency_median_us: f64,
    pub latency_p99_us: f64,
    pub mn_ops_per_acq: f64,
    pub refetch_per_release: f64,
    pub notifications_per_release: f64,
    pub nic_utilization: f64,
    pub retries_per_acq: f64,
    pub reset_fraction: f64,
    pub acquisitions: u64,
    pub ops_completed: u64,
    pub resets: u64,
    pub reset_verify_failures: u64,
    pub aborts: u64,
    pub timeouts: u64,
    pub local_handovers: u64,
    pub fast_path: u64,
    pub elapsed_us: f64,
    pub horizon_exceeded: bool,
    pub mutex_violations: usize,
    pub stuck: usize,
    pub overtakes: u64,
    pub cross_cn_overtakes: u64,
    pub local_overtakes: u64,
    pub phase_violations: u64,
}

impl RunMetrics {
    pub fn build(s: &LockStats, report: &Report, elapsed: Time, nic_utilization: f64, horizon_exceeded: bool) -> Self {
        Self {
            throughput: if elapsed == 0 {
                0.0
            } else {
                s.ops_completed as f64 * 1e9 / elapsed as f64
            },
            latency_median_us: nearest_rank(&s.op_latency, 0.5).map_or(0.0, us),
            latency_p99_us: nearest_rank(&s.op_latency, 0.99).map_or(0.0, us),
            mn_ops_per_acq: ratio(s.acq_mn_ops, s.acquisitions),
            refetch_per_release: ratio(s.refetch_reads, s.cql_releases),
            notifications_per_release: ratio(s.notifications, s.cql_releases),
            nic_utilization,
            retries_per_acq: ratio(s.retries, s.acquisitions),
            reset_fraction: ratio(s.resets_done, s.acquisitions),
            acquisitions: s.acquisitions,
            ops_completed: s.ops_completed,
            resets: s.resets_done,
            reset_verify_failures: s.reset_verify_failures,
            aborts: s.aborts,
            timeouts: s.timeouts + s.baseline_timeouts,
            local_handovers: s.local_handovers,
            fast_path: s.fast_path,
            elapsed_us: us(elapsed),
            horizon_exceeded,
            mutex_violations: report.mutex_violations,
            stuck: report.stuck,
            overtakes: report.overtakes,
            cross_cn_overtakes: report.cross_cn.overtakes,
            local_overtakes: report.cross_cn.local_overtakes,
            phase_violations: report.phase_violations,
        }
    }
}

/// One CSV row: the run's parameters followed by its metrics. The column
/// order is the field order below and stays stable.
#[derive(Debug, Clone, Serialize)]
pub struct CsvRow {
    pub lock: &'static str,
    pub fairness: &'static str,
    pub hierarchy: bool,
    pub seed: u64,
    pub num_cns: u16,
    pub clients_per_cn: u16,
    pub num_locks: u32,
    pub zipf_alpha: f64,
    pub read_ratio: f64,
    pub critical_section_ops: u32,
    pub ops_per_client: u32,
    pub mode: &'static str,
    pub nic_iops_capacity: f64,
    pub throughput: f64,
    pub latency_median_us: f64,
    pub latency_p99_us: f64,
    pub mn_ops_per_acq: f64,
    pub refetch_per_release: f64,
    pub notifications_per_release: f64,
    pub nic_utilization: f64,
    pub retries_per_acq: f64,
    pub reset_fraction: f64,
    pub acquisitions: u64,
    pub ops_completed: u64,
    pub resets: u64,
    pub reset_verify_failures: u64,
    pub aborts: u64,
    pub timeouts: u64,
    pub local_handovers: u64,
    pub fast_path: u64,
    pub elapsed_us: f64,
    pub horizon_exceeded: bool,
    pub mutex_violations: usize,
    pub stuck: usize,
    pub overtakes: u64,
    pub cross_cn_overtakes: u64,
    pub local_overtakes: u64,
    pub phase_violations: u64,
}

impl CsvRow {
    pub fn new(c: &BenchConfig, m: &RunMetrics) -> Self {
        let w = &c.workload;
        Self {
            lock: c.lock.kind.name(),
            fairness: c.lock.fairness.short(),
            hierarchy: c.lock.hierarchy,
            seed: c.seed,
            num_cns: w.num_cns,
            clients_per_cn: w.clients_per_cn,
            num_locks: w.num_locks,
            zipf_alpha: w.zipf_alpha,
            read_ratio: w.read_ratio,
            critical_section_ops: w.critical_section_ops,
            ops_per_client: w.ops_per_client,
            mode: match w.mode {
                super::WorkloadMode::Microbench => "microbench",
                super::WorkloadMode::Objectstore => "objectstore",
            },
            nic_iops_capacity: c.fabric.mn_nic_iops_capacity,
            throughput: m.throughput,
            latency_median_us: m.latency_median_us,
            latency_p99_us: m.latency_p99_us,
            mn_ops_per_acq: m.mn_ops_per_acq,
            refetch_per_release: m.refetch_per_release,
            notifications_per_release: m.notifications_per_release,
            nic_utilization: m.nic_utilization,
            retries_per_acq: m.retries_per_acq,
            reset_fraction: m.reset_fraction,
            acquisitions: m.acquisitions,
            ops_completed: m.ops_completed,
            resets: m.resets,
            reset_verify_failures: m.reset_verify_failures,
            aborts: m.aborts,
            timeouts: m.timeouts,
            local_handovers: m.local_handovers,
            fast_path: m.fast_path,
            elapsed_us: m.elapsed_us,
            horizon_exceeded: m.horizon_exceeded,
            mutex_violations: m.mutex_violations,
            stuck: m.stuck,
            overtakes: m.overtakes,
            cross_cn_overtakes: m.cross_cn_overtakes,
            local_overtakes: m.local_overtakes,
            phase_violations: m.phase_violations,
        }
    }
}

pub fn write_csv<W: std::io::Write>(out: W, rows: &[CsvRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
