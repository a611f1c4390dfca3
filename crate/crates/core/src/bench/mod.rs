//! Benchmark harness: builds a simulated cluster from a config, drives the
//! selected lock with a Zipf workload, checks the resulting grant log and
//! reports metrics.

mod config;
mod metrics;
mod sweep;
mod workload;

use std::cell::Cell;
use std::collections::HashSet;
use std::rc::Rc;

use thiserror::Error;

pub use config::{BenchConfig, FailureSpec, LockConfig, LockKind, ScriptedOp, WorkloadMode, WorkloadSpec};
pub use metrics::{nearest_rank, write_csv, CsvRow, RunMetrics};
pub use sweep::{expand_matrix, run_matrix, MatrixError};
pub use workload::{Op, OpStream, Zipf};

use crate::baselines::{BaselineError, CasLock, TicketLock};
use crate::checker::{self, GrantEvent, Report, Via};
use crate::cql::{Granted, Layout, LockId, Mode, QueueEntry};
use crate::fabric::{FabricError, FabricStats, NodeId, Sim, Time, TraceEvent, TraceSink, NS_PER_US};
use crate::hier::{self, sync_round};
use crate::node::{run_agent, Backoff, Client, LockEnv, Node};
use crate::record::{LockStats, Recorder};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

const DEFAULT_HORIZON_US: f64 = 60e6;
/// Bound on one synchronization round before the old epoch is kept.
const SYNC_ROUND_TIMEOUT: Time = 1_000 * NS_PER_US;

fn us_to_ns(us: f64) -> Time {
    (us * NS_PER_US as f64).round() as Time
}

/// CQL queue capacity: one waiter per CN with hierarchy, one per client
/// without it.
pub fn cql_capacity(cfg: &BenchConfig) -> u64 {
    cfg.lock.capacity.unwrap_or_else(|| {
        let w = &cfg.workload;
        let need = if cfg.lock.hierarchy {
            w.num_cns as u64
        } else {
            w.total_clients() as u64
        };
        need.next_power_of_two().max(2)
    })
}

pub struct RunOutput {
    pub metrics: RunMetrics,
    pub report: Report,
    pub stats: LockStats,
    pub grants: Vec<GrantEvent>,
    pub pending: Vec<GrantEvent>,
    pub failures: Vec<(u16, Time)>,
    pub trace: Option<Vec<u8>>,
    pub end: Time,
    /// Local lock records alive at the end, summed over CNs.
    pub local_records: usize,
    pub distinct_locks: usize,
    pub fabric: FabricStats,
    /// Synchronized-time epoch of each CN at the end, indexed by CN - 1.
    pub epochs: Vec<Time>,
}

struct Ctx {
    spec: WorkloadSpec,
    kind: LockKind,
    hierarchy: bool,
    seed: u64,
    zipf: Zipf,
    object_base: u64,
    stride: u64,
    baseline_base: u64,
    think: Time,
    /// Clients still running, per CN (index 0 unused).
    remaining: Vec<Cell<u32>>,
    started: Cell<Option<Time>>,
}

enum Held {
    Cql(Granted),
    Hier,
    Baseline,
}

async fn acquire(cl: &Client, ctx: &Ctx, lock: LockId, mode: Mode) -> Option<Held> {
    let f = &cl.fabric;
    let rec = cl.recorder();
    match (ctx.kind, ctx.hierarchy) {
        (LockKind::Cql, false) => {
            let ts = cl.node.ts_now(f.now());
            let g = cl.env.lock(lock).acquire(cl, mode, ts).await;
            let via = if g.notified { Via::Notified } else { Via::Immediate };
            rec.grant(f, cl.cid, g.seq, Some(ts), via);
            Some(Held::Cql(g))
        }
        (LockKind::Cql, true) => {
            let g = hier::h_acquire(cl, lock, mode).await;
            rec.grant(f, cl.cid, g.seq, Some(g.ts), g.via);
            Some(Held::Hier)
        }
        (kind, _) => {
            let addr = ctx.baseline_base + lock.0 as u64 * 8;
            let (r, via) = if kind == LockKind::Caslock {
                (CasLock::new(addr).acquire(cl, mode).await, Via::Spin)
            } else {
                (TicketLock::new(addr).acquire(cl, mode).await, Via::Ticket)
            };
            match r {
                Ok(g) => {
                    rec.grant(f, cl.cid, g.seq, None, via);
                    Some(Held::Baseline)
                }
                Err(BaselineError::TimedOut { .. }) | Err(BaselineError::Fabric) => {
                    rec.abandon(f, cl.cid);
                    None
                }
            }
        }
    }
}

async fn release(cl: &Client, ctx: &Ctx, lock: LockId, mode: Mode, held: Held) {
    match held {
        Held::Cql(g) => {
            cl.env.lock(lock).release(cl, g.session, mode).await;
        }
        Held::Hier => hier::h_release(cl, lock).await,
        Held::Baseline => {
            let addr = ctx.baseline_base + lock.0 as u64 * 8;
            // A lost release only happens when the MN is gone for good.
            let _ = if ctx.kind == LockKind::Caslock {
                CasLock::new(addr).release(cl, mode).await
            } else {
                TicketLock::new(addr).release(cl, mode).await
            };
        }
    }
}

async fn run_op(cl: &Client, ctx: &Ctx, op: Op, hold: Time) {
    let f = &cl.fabric;
    let rec = cl.recorder();
    let lock = LockId(op.lock);
    let t0 = f.now();
    rec.request(f, cl.cid, cl.cn(), lock, op.mode);
    let Some(held) = acquire(cl, ctx, lock, op.mode).await else {
        return;
    };
    let obj = ctx.object_base + op.lock as u64 * ctx.stride;
    for _ in 0..ctx.spec.critical_section_ops {
        let _ = match op.mode {
            Mode::Shared => f.read(cl.src(), obj, op.size, "object.read").await.map(|_| ()),
            Mode::Exclusive => {
                f.write(cl.src(), obj, vec![0xAB; op.size as usize], "object.write")
                    .await
            }
        };
    }
    if hold > 0 {
        f.sleep(hold).await;
    }
    rec.release(f, cl.cid);
    release(cl, ctx, lock, op.mode, held).await;
    rec.op_done(t0, f.now());
}

async fn client_loop(cl: Client, ctx: Rc<Ctx>, local: u16) {
    let f = cl.fabric.clone();
    if ctx.spec.script.is_empty() {
        let mut stream = OpStream::new(&ctx.spec, ctx.seed, cl.cid);
        for _ in 0..ctx.spec.ops_per_client {
            let op = stream.next_op(&ctx.zipf);
            run_op(&cl, &ctx, op, 0).await;
            if ctx.think > 0 {
                f.sleep(ctx.think).await;
            }
        }
    } else {
        let start = ctx.started.get().unwrap_or(0);
        let mut mine: Vec<&ScriptedOp> = ctx
            .spec
            .script
            .iter()
            .filter(|s| s.cn == cl.cn() && s.client == local)
            .collect();
        mine.sort_by(|a, b| a.at_us.total_cmp(&b.at_us));
        for s in mine {
            let at = start + us_to_ns(s.at_us);
            if f.now() < at {
                f.sleep(at - f.now()).await;
            }
            let op = Op {
                lock: s.lock,
                mode: s.mode,
                size: ctx.spec.object_size,
            };
            run_op(&cl, &ctx, op, us_to_ns(s.hold_us)).await;
        }
    }
    let r = &ctx.remaining[cl.cn() as usize];
    r.set(r.get() - 1);
}

/// Runs one configuration to completion (or to the watchdog horizon) and
/// checks its grant log.
pub fn run(cfg: &BenchConfig, trace: TraceSink) -> Result<RunOutput, BenchError> {
    cfg.validate()?;
    let w = cfg.workload.clone();
    let mut fcfg = cfg.fabric.clone();
    fcfg.seed = cfg.seed;
    let mut sim = Sim::new(fcfg)?;
    sim.set_trace(trace);
    let f = sim.fabric();
    let skew = 2 * f.cn_mn_rtt();
    f.trace_with(|t| TraceEvent {
        t,
        node: "mn".into(),
        kind: "META".into(),
        addr: skew,
        tag: format!(
            "lock={} hierarchy={} fairness={}",
            cfg.lock.kind.name(),
            cfg.lock.hierarchy,
            cfg.lock.fairness.short()
        ),
        ..Default::default()
    });

    let layout = if cfg.lock.kind == LockKind::Cql {
        Layout::for_capacity(cfg.lock.reset_id_bits, cql_capacity(cfg))
            .map_err(|e| BenchError::Config(e.to_string()))?
    } else {
        Layout::default()
    };
    if cfg.lock.kind == LockKind::Cql && layout.max_cns() <= w.num_cns as u64 {
        return Err(BenchError::Config("reset_id_bits too small for num_cns".into()));
    }
    let (lock_base, baseline_base) = if cfg.lock.kind == LockKind::Cql {
        let mut image = vec![0u8; 8];
        image.extend(QueueEntry::initial_pattern().repeat(layout.capacity() as usize));
        let base = f.alloc(w.num_locks as u64 * layout.lock_bytes(), image)?;
        (base, 0)
    } else {
        (0, f.alloc(w.num_locks as u64 * 8, Vec::new())?)
    };
    let stride = w.object_stride();
    let object_base = f.alloc(w.num_locks as u64 * stride, Vec::new())?;
    let sync_counter = f.alloc(8, Vec::new())?;

    let recorder = Recorder::new();
    let env = Rc::new(LockEnv {
        layout,
        lock_base,
        num_locks: w.num_locks,
        num_cns: w.num_cns,
        acquisition_timeout: us_to_ns(cfg.lock.acquisition_timeout_us),
        poll_backoff: Backoff {
            base: us_to_ns(cfg.lock.backoff_base_us),
            cap: us_to_ns(cfg.lock.backoff_cap_us),
        },
        fairness: cfg.lock.fairness,
        recorder: recorder.clone(),
    });
    let ctx = Rc::new(Ctx {
        spec: w.clone(),
        kind: cfg.lock.kind,
        hierarchy: cfg.lock.hierarchy,
        seed: cfg.seed,
        zipf: Zipf::new(w.num_locks as usize, w.zipf_alpha),
        object_base,
        stride,
        baseline_base,
        think: us_to_ns(w.think_time_us),
        remaining: (0..=w.num_cns)
            .map(|c| Cell::new(if c == 0 { 0 } else { w.clients_per_cn as u32 }))
            .collect(),
        started: Cell::new(None),
    });

    let nodes: Vec<Node> = (1..=w.num_cns).map(Node::new).collect();
    let interval = us_to_ns(cfg.lock.sync_interval_us);
    for node in &nodes {
        let id = node.id();
        sim.spawn(Some(id), run_agent(f.clone(), node.clone()));
        let (f, node, env, ctx) = (f.clone(), node.clone(), env.clone(), ctx.clone());
        sim.spawn(Some(id), async move {
            let cn = node.cn();
            let n = ctx.spec.num_cns as u64;
            if let Some(t) = sync_round(&f, cn, sync_counter, n, SYNC_ROUND_TIMEOUT).await {
                node.set_epoch(t);
            }
            let now = f.now();
            ctx.started.set(Some(ctx.started.get().map_or(now, |s| s.min(now))));
            for local in 0..ctx.spec.clients_per_cn {
                let cl = Client::new(f.clone(), node.clone(), env.clone(), local);
                f.spawn(Some(id), client_loop(cl, ctx.clone(), local));
            }
            // Periodic resynchronization while any live CN still has work.
            let busy =
                || (1..=ctx.spec.num_cns).any(|c| ctx.remaining[c as usize].get() > 0 && !f.is_failed(NodeId::Cn(c)));
            loop {
                f.sleep(interval).await;
                if !busy() {
                    break;
                }
                if let Some(t) = sync_round(&f, cn, sync_counter, n, SYNC_ROUND_TIMEOUT).await {
                    node.set_epoch(t);
                }
            }
        });
    }

    let mut failures = Vec::new();
    for fs in &cfg.failures {
        let node = fs.node_id().expect("validated");
        let at = us_to_ns(fs.at_us);
        f.inject_failure(node, at);
        if let Some(r) = fs.recover_at_us {
            f.recover(node, us_to_ns(r));
        }
        if let NodeId::Cn(c) = node {
            failures.push((c, at));
        }
    }

    let horizon = us_to_ns(cfg.horizon_us.unwrap_or(DEFAULT_HORIZON_US));
    let (end, horizon_exceeded) = match sim.run_until(Some(horizon)) {
        Ok(t) => (t, false),
        Err(FabricError::HorizonExceeded { at }) => (at, true),
        Err(e) => return Err(e.into()),
    };
    failures.retain(|&(_, at)| at <= end);

    let grants = recorder.grants();
    let pending = recorder.pending();
    let report = checker::full_report(&grants, &pending, &failures, end, horizon, skew);
    let stats = recorder.stats();
    let started = ctx.started.get().unwrap_or(0);
    let elapsed = stats.last_completion.saturating_sub(started);
    let metrics = RunMetrics::build(
        &stats,
        &report,
        elapsed,
        f.nic_utilization(stats.last_completion.max(1)),
        horizon_exceeded,
    );
    let distinct_locks = grants.iter().map(|g| g.lock).collect::<HashSet<_>>().len();
    let local_records = nodes.iter().map(|n| n.local_table_len()).sum();
    let trace = sim.take_trace();
    Ok(RunOutput {
        metrics,
        report,
        stats,
        grants,
        pending,
        failures,
        trace,
        end,
        local_records,
        distinct_locks,
        fabric: f.stats(),
        epochs: nodes.iter().map(|n| n.epoch()).collect(),
    })
}
