//! Per-CN runtime: reset counters, CQL session registry, the local lock
//! table, and the lock agent that answers reset signals.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use crate::cql::{CqlLock, Layout, LockId};
use crate::fabric::{Fabric, Message, NodeId, Port, Time, NS_PER_US};
use crate::hier::{Fairness, LocalLock};
use crate::record::Recorder;

/// Wakes every waiter whenever some shared condition may have changed.
#[derive(Clone, Default)]
pub struct Beacon(Rc<RefCell<Vec<Waker>>>);

impl Beacon {
    pub fn notify(&self) {
        for w in self.0.borrow_mut().drain(..) {
            w.wake();
        }
    }

    pub fn wait_until<F: FnMut() -> bool>(&self, cond: F) -> WaitUntil<F> {
        WaitUntil {
            beacon: self.clone(),
            cond,
        }
    }
}

pub struct WaitUntil<F> {
    beacon: Beacon,
    cond: F,
}

impl<F: FnMut() -> bool + Unpin> Future for WaitUntil<F> {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if (self.cond)() {
            Poll::Ready(())
        } else {
            self.beacon.0.borrow_mut().push(cx.waker().clone());
            Poll::Pending
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Acquiring,
    Waiting,
    Holding,
    Releasing,
}

#[derive(Debug, Clone, Copy)]
struct Session {
    lock: LockId,
    port: Port,
    phase: Phase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingReset {
    pub count: u32,
    pub initiator: Port,
}

#[derive(Default)]
struct NodeState {
    reset_counters: HashMap<LockId, u32>,
    sessions: HashMap<u64, Session>,
    per_lock: HashMap<LockId, usize>,
    pending: HashMap<LockId, PendingReset>,
    next_session: u64,
}

struct NodeInner {
    cn: u16,
    state: RefCell<NodeState>,
    local: RefCell<HashMap<LockId, LocalLock>>,
    changed: Beacon,
    epoch: Cell<Time>,
}

#[derive(Clone)]
pub struct Node(Rc<NodeInner>);

impl Node {
    pub fn new(cn: u16) -> Self {
        Self(Rc::new(NodeInner {
            cn,
            state: RefCell::default(),
            local: RefCell::default(),
            changed: Beacon::default(),
            epoch: Cell::new(0),
        }))
    }

    pub fn cn(&self) -> u16 {
        self.0.cn
    }

    pub fn id(&self) -> NodeId {
        NodeId::Cn(self.0.cn)
    }

    pub fn beacon(&self) -> &Beacon {
        &self.0.changed
    }

    pub fn reset_count(&self, lock: LockId) -> u32 {
        self.0.state.borrow().reset_counters.get(&lock).copied().unwrap_or(0)
    }

    /// Raises the local reset counter to at least `to`; never lowers it.
    pub fn raise_reset_count(&self, lock: LockId, to: u32) {
        let mut s = self.0.state.borrow_mut();
        let c = s.reset_counters.entry(lock).or_insert(0);
        *c = (*c).max(to);
    }

    pub fn reset_pending(&self, lock: LockId) -> Option<PendingReset> {
        self.0.state.borrow().pending.get(&lock).copied()
    }

    pub(crate) fn set_pending(&self, lock: LockId, p: PendingReset) -> bool {
        let fresh = self.0.state.borrow_mut().pending.insert(lock, p).is_none();
        self.0.changed.notify();
        fresh
    }

    pub(crate) fn clear_pending(&self, lock: LockId) -> Option<PendingReset> {
        let p = self.0.state.borrow_mut().pending.remove(&lock);
        self.0.changed.notify();
        p
    }

    pub fn register(&self, lock: LockId, port: Port, phase: Phase) -> u64 {
        let mut s = self.0.state.borrow_mut();
        s.next_session += 1;
        let id = s.next_session;
        s.sessions.insert(id, Session { lock, port, phase });
        *s.per_lock.entry(lock).or_insert(0) += 1;
        id
    }

    pub fn set_phase(&self, session: u64, phase: Phase) {
        if let Some(s) = self.0.state.borrow_mut().sessions.get_mut(&session) {
            s.phase = phase;
        }
    }

    /// Moves a session to another client's port (hierarchical handover).
    pub fn set_port(&self, session: u64, port: Port) {
        if let Some(s) = self.0.state.borrow_mut().sessions.get_mut(&session) {
            s.port = port;
        }
    }

    pub fn deregister(&self, session: u64) {
        {
            let mut s = self.0.state.borrow_mut();
            if let Some(sess) = s.sessions.remove(&session) {
                if let Some(n) = s.per_lock.get_mut(&sess.lock) {
                    *n -= 1;
                    if *n == 0 {
                        s.per_lock.remove(&sess.lock);
                    }
                }
            }
        }
        self.0.changed.notify();
    }

    pub fn sessions_on(&self, lock: LockId) -> usize {
        self.0.state.borrow().per_lock.get(&lock).copied().unwrap_or(0)
    }

    pub(crate) fn waiting_ports(&self, lock: LockId) -> Vec<Port> {
        let s = self.0.state.borrow();
        let mut v: Vec<(u64, Port)> = s
            .sessions
            .iter()
            .filter(|(_, x)| x.lock == lock && x.phase == Phase::Waiting)
            .map(|(&id, x)| (id, x.port))
            .collect();
        v.sort();
        v.into_iter().map(|(_, p)| p).collect()
    }

    pub fn with_local<R>(&self, f: impl FnOnce(&mut HashMap<LockId, LocalLock>) -> R) -> R {
        f(&mut self.0.local.borrow_mut())
    }

    pub fn local_table_len(&self) -> usize {
        self.0.local.borrow().len()
    }

    pub fn epoch(&self) -> Time {
        self.0.epoch.get()
    }

    pub fn set_epoch(&self, t: Time) {
        self.0.epoch.set(t)
    }

    /// Microseconds since the synchronized epoch, truncated to 16 bits.
    pub fn ts_now(&self, now: Time) -> u16 {
        crate::hier::ts_at(now, self.epoch())
    }
}

/// Truncated exponential backoff: `min(base * 2^attempt, cap)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backoff {
    pub base: Time,
    pub cap: Time,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            base: 2 * NS_PER_US,
            cap: 256 * NS_PER_US,
        }
    }
}

impl Backoff {
    pub fn delay(&self, attempt: u32) -> Time {
        let factor = if attempt >= 63 { u64::MAX } else { 1 << attempt };
        self.base.saturating_mul(factor).min(self.cap)
    }
}

/// Cluster-wide lock configuration shared by all clients of a run.
pub struct LockEnv {
    pub layout: Layout,
    pub lock_base: u64,
    pub num_locks: u32,
    pub num_cns: u16,
    pub acquisition_timeout: Time,
    pub poll_backoff: Backoff,
    pub fairness: Fairness,
    pub recorder: Recorder,
}

impl LockEnv {
    pub fn lock(&self, id: LockId) -> CqlLock {
        CqlLock::new(id, self.lock_base + id.0 as u64 * self.layout.lock_bytes(), self.layout)
    }
}

pub const RESET_MAILBOX_BASE: u32 = 0x1_0000;

/// Global client id: CN in the high byte, per-CN index in the low byte.
pub fn cid_of(cn: u16, local: u16) -> u16 {
    (cn << 8) | local
}

pub fn port_of_cid(cid: u16) -> Port {
    Port {
        cn: cid >> 8,
        mailbox: 1 + (cid & 0xFF) as u32,
    }
}

/// One application thread on a CN.
#[derive(Clone)]
pub struct Client {
    pub fabric: Fabric,
    pub node: Node,
    pub env: Rc<LockEnv>,
    pub cid: u16,
}

impl Client {
    pub fn new(fabric: Fabric, node: Node, env: Rc<LockEnv>, local: u16) -> Self {
        let cid = cid_of(node.cn(), local);
        Self { fabric, node, env, cid }
    }

    pub fn cn(&self) -> u16 {
        self.node.cn()
    }

    pub fn src(&self) -> NodeId {
        self.node.id()
    }

    pub fn port(&self) -> Port {
        port_of_cid(self.cid)
    }

    pub fn reset_port(&self) -> Port {
        Port {
            cn: self.cn(),
            mailbox: RESET_MAILBOX_BASE + (self.cid & 0xFF) as u32,
        }
    }

    pub fn recorder(&self) -> &Recorder {
        &self.env.recorder
    }

    pub fn count_acq_ops(&self, n: u64) {
        self.env.recorder.with_stats(|s| s.acq_mn_ops += n);
    }
}

/// Serves reset signals addressed to this CN's agent mailbox.
pub async fn run_agent(fabric: Fabric, node: Node) {
    let port = Port::agent(node.cn());
    loop {
        let (_, msg) = fabric.recv(port).await;
        if let Message::ResetSignal {
            lock,
            reset_count,
            initiator,
        } = msg
        {
            crate::reset::on_signal(&fabric, &node, lock, reset_count, initiator);
        }
    }
}
