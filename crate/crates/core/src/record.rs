//! Shared per-run recorder: protocol counters plus the grant log fed to the
//! checker. Lock events are mirrored to the trace when tracing is on.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::checker::{GrantEvent, Via};
use crate::cql::{LockId, Mode};
use crate::fabric::{Fabric, Time, TraceEvent};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LockStats {
    pub acquisitions: u64,
    /// MN ops issued on acquire paths, excluding prefetch reads.
    pub acq_mn_ops: u64,
    pub prefetch_reads: u64,
    pub cql_acquires: u64,
    pub cql_releases: u64,
    /// Extra READs issued while resolving queues on release.
    pub refetch_reads: u64,
    pub notifications: u64,
    pub local_handovers: u64,
    pub fast_path: u64,
    pub aborts: u64,
    pub timeouts: u64,
    pub overwrites: u64,
    pub version_overflows: u64,
    pub resets_won: u64,
    pub resets_lost: u64,
    pub resets_done: u64,
    pub reset_verify_failures: u64,
    pub reset_latency: Vec<Time>,
    /// CAS retries (CASLock) or served-counter polls (ticket lock).
    pub retries: u64,
    pub baseline_timeouts: u64,
    pub ops_completed: u64,
    pub op_latency: Vec<Time>,
    pub acq_latency: Vec<Time>,
    pub last_completion: Time,
}

#[derive(Default)]
struct Inner {
    stats: LockStats,
    grants: Vec<GrantEvent>,
    pending: HashMap<u16, GrantEvent>,
    open: HashMap<u16, usize>,
}

#[derive(Clone, Default)]
pub struct Recorder(Rc<RefCell<Inner>>);

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> LockStats {
        self.0.borrow().stats.clone()
    }

    pub fn with_stats<R>(&self, f: impl FnOnce(&mut LockStats) -> R) -> R {
        f(&mut self.0.borrow_mut().stats)
    }

    pub fn grants(&self) -> Vec<GrantEvent> {
        self.0.borrow().grants.clone()
    }

    /// Requests still waiting for a grant.
    pub fn pending(&self) -> Vec<GrantEvent> {
        let mut v: Vec<_> = self.0.borrow().pending.values().cloned().collect();
        v.sort_by_key(|g| (g.t_request, g.client));
        v
    }

    pub fn request(&self, f: &Fabric, cid: u16, cn: u16, lock: LockId, mode: Mode) {
        let t = f.now();
        self.0.borrow_mut().pending.insert(
            cid,
            GrantEvent {
                lock: lock.0,
                client: cid,
                cn,
                mode,
                t_request: t,
                t_granted: 0,
                t_released: None,
                enqueue_seq: 0,
                ts: None,
                via: Via::Immediate,
            },
        );
        f.trace_with(|t| TraceEvent {
            t,
            node: format!("cn{cn}"),
            kind: "ACQ".into(),
            addr: 0,
            old: 0,
            new: 0,
            tag: "request".into(),
            lock: Some(lock.0),
            client: Some(cid),
            mode: Some(mode.name().into()),
            cn: Some(cn),
            ..Default::default()
        });
    }

    pub fn grant(&self, f: &Fabric, cid: u16, seq: u64, ts: Option<u16>, via: Via) {
        let t = f.now();
        let ev = {
            let mut inner = self.0.borrow_mut();
            let Some(mut g) = inner.pending.remove(&cid) else {
                return;
            };
            g.t_granted = t;
            g.enqueue_seq = seq;
            g.ts = ts;
            g.via = via;
            inner.stats.acquisitions += 1;
            inner.stats.acq_latency.push(t - g.t_request);
            let idx = inner.grants.len();
            inner.grants.push(g.clone());
            inner.open.insert(cid, idx);
            g
        };
        f.trace_with(|t| TraceEvent {
            t,
            node: format!("cn{}", ev.cn),
            kind: "GRANT".into(),
            addr: 0,
            old: 0,
            new: 0,
            tag: via.name().into(),
            lock: Some(ev.lock),
            client: Some(cid),
            mode: Some(ev.mode.name().into()),
            seq: Some(seq),
            ts,
            cn: Some(ev.cn),
            ..Default::default()
        });
    }

    pub fn release(&self, f: &Fabric, cid: u16) {
        let t = f.now();
        let ev = {
            let mut inner = self.0.borrow_mut();
            let Some(idx) = inner.open.remove(&cid) else {
                return;
            };
            inner.grants[idx].t_released = Some(t);
            inner.grants[idx].clone()
        };
        f.trace_with(|t| TraceEvent {
            t,
            node: format!("cn{}", ev.cn),
            kind: "REL".into(),
            addr: 0,
            old: 0,
            new: 0,
            tag: "release".into(),
            lock: Some(ev.lock),
            client: Some(cid),
            mode: Some(ev.mode.name().into()),
            cn: Some(ev.cn),
            ..Default::default()
        });
    }

    /// Withdraws a request that gave up without a grant.
    pub fn abandon(&self, f: &Fabric, cid: u16) {
        let Some(g) = self.0.borrow_mut().pending.remove(&cid) else {
            return;
        };
        f.trace_with(|t| TraceEvent {
            t,
            node: format!("cn{}", g.cn),
            kind: "ABANDON".into(),
            tag: "timeout".into(),
            lock: Some(g.lock),
            client: Some(cid),
            cn: Some(g.cn),
            ..Default::default()
        });
    }

    pub fn op_done(&self, started: Time, now: Time) {
        let mut inner = self.0.borrow_mut();
        inner.stats.ops_completed += 1;
        inner.stats.op_latency.push(now - started);
        inner.stats.last_completion = inner.stats.last_completion.max(now);
    }

    /// Forgets requests and holds of clients killed by a restart.
    pub fn drop_in_flight(&self, t: Time) {
        let mut inner = self.0.borrow_mut();
        inner.pending.clear();
        let open: Vec<usize> = inner.open.drain().map(|(_, i)| i).collect();
        for i in open {
            inner.grants[i].t_released = Some(t);
        }
    }
}
