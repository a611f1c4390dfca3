//! Deterministic discrete-event model of a disaggregated-memory cluster.
//!
//! Compute nodes (CNs) run client tasks as futures on a single-threaded
//! executor. One memory node (MN) executes one-sided verbs at a modeled
//! NIC. Events are ordered by `(time, insertion sequence)`, so a run is a
//! pure function of its configuration, seed and workload.

mod config;
mod memory;
mod message;
mod nic;
mod trace;

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::fmt;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{FabricConfig, OpCost};
pub use memory::Memory;
pub use message::{Message, Notification, Port};
pub use nic::{Nic, Service};
pub use trace::{TraceEvent, TraceSink};

/// Simulated time in nanoseconds.
pub type Time = u64;
pub const NS_PER_US: Time = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Mn,
    /// Compute node, indexed from 1; 0 is reserved for "no CN".
    Cn(u16),
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Mn => write!(f, "mn"),
            NodeId::Cn(i) => write!(f, "cn{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Read,
    Write,
    Cas,
    Faa,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Read => "READ",
            OpKind::Write => "WRITE",
            OpKind::Cas => "CAS",
            OpKind::Faa => "FAA",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verb {
    Read { len: u64 },
    Write { data: Vec<u8> },
    Cas { expected: u64, swap: u64 },
    Faa { add: u64 },
}

impl Verb {
    pub fn kind(&self) -> OpKind {
        match self {
            Verb::Read { .. } => OpKind::Read,
            Verb::Write { .. } => OpKind::Write,
            Verb::Cas { .. } => OpKind::Cas,
            Verb::Faa { .. } => OpKind::Faa,
        }
    }

    fn len(&self) -> u64 {
        match self {
            Verb::Read { len } => *len,
            Verb::Write { data } => data.len() as u64,
            Verb::Cas { .. } | Verb::Faa { .. } => 8,
        }
    }
}

/// A one-sided verb issued by a CN against MN memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FabricOp {
    pub src: NodeId,
    pub addr: u64,
    pub verb: Verb,
    pub tag: &'static str,
    /// Region snapshotted right after the verb executes.
    pub probe: Option<(u64, u64)>,
}

impl FabricOp {
    pub fn read(src: NodeId, addr: u64, len: u64, tag: &'static str) -> Self {
        Self::new(src, addr, Verb::Read { len }, tag)
    }

    pub fn write(src: NodeId, addr: u64, data: Vec<u8>, tag: &'static str) -> Self {
        Self::new(src, addr, Verb::Write { data }, tag)
    }

    pub fn cas(src: NodeId, addr: u64, expected: u64, swap: u64, tag: &'static str) -> Self {
        Self::new(src, addr, Verb::Cas { expected, swap }, tag)
    }

    pub fn faa(src: NodeId, addr: u64, add: u64, tag: &'static str) -> Self {
        Self::new(src, addr, Verb::Faa { add }, tag)
    }

    fn new(src: NodeId, addr: u64, verb: Verb, tag: &'static str) -> Self {
        Self {
            src,
            addr,
            verb,
            tag,
            probe: None,
        }
    }

    pub fn with_probe(mut self, addr: u64, len: u64) -> Self {
        self.probe = Some((addr, len));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpValue {
    /// Pre-op value of a CAS or FAA word.
    Word(u64),
    Bytes(Vec<u8>),
    Ack,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub value: OpValue,
    /// Global MN service order.
    pub seq: u64,
    pub served_at: Time,
    pub probe: Option<Vec<u8>>,
}

impl Completion {
    pub fn word(&self) -> u64 {
        match &self.value {
            OpValue::Word(w) => *w,
            other => panic!("expected a word completion, got {other:?}"),
        }
    }

    pub fn bytes(&self) -> &[u8] {
        match &self.value {
            OpValue::Bytes(b) => b,
            other => panic!("expected a byte completion, got {other:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FabricError {
    #[error("destination {0} has failed")]
    DestinationFailed(NodeId),
    #[error("address range {addr}+{len} is outside MN memory")]
    InvalidAddr { addr: u64, len: u64 },
    #[error("malformed op: {0}")]
    MalformedOp(&'static str),
    #[error("MN memory exhausted")]
    OutOfMemory,
    #[error("watchdog horizon reached at t={at}ns with work pending")]
    HorizonExceeded { at: Time },
    #[error("invalid fabric config: {0}")]
    InvalidConfig(String),
}

/// Counters maintained by the fabric itself.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FabricStats {
    pub reads: u64,
    pub writes: u64,
    pub cas: u64,
    pub faa: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub events: u64,
}

impl FabricStats {
    pub fn mn_ops(&self) -> u64 {
        self.reads + self.writes + self.cas + self.faa
    }
}

type LocalTask = Pin<Box<dyn Future<Output = ()>>>;
pub type RecoveryHook = Box<dyn FnMut(&Fabric)>;

#[derive(Debug)]
struct PendingOp {
    id: u64,
    op: FabricOp,
    depart: Time,
}

enum EventKind {
    MnArrive(PendingOp),
    MnService(PendingOp),
    Complete {
        id: u64,
        dst: NodeId,
        result: Result<Completion, FabricError>,
    },
    Deliver {
        from: NodeId,
        to: Port,
        msg: Message,
    },
    Timer(u64),
    Fail(NodeId),
    Recover(NodeId),
}

struct Event {
    t: Time,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, o: &Self) -> bool {
        (self.t, self.seq) == (o.t, o.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Event {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.t, self.seq).cmp(&(o.t, o.seq))
    }
}

struct Slot<T> {
    value: Option<T>,
    waker: Option<Waker>,
}

impl<T> Default for Slot<T> {
    fn default() -> Self {
        Self {
            value: None,
            waker: None,
        }
    }
}

#[derive(Default)]
struct Mailbox {
    queue: VecDeque<(NodeId, Message)>,
    waker: Option<Waker>,
}

struct World {
    cfg: FabricConfig,
    now: Time,
    next_seq: u64,
    events: BinaryHeap<Reverse<Event>>,
    mem: Memory,
    nic: Nic,
    ops: HashMap<u64, Slot<Result<Completion, FabricError>>>,
    next_id: u64,
    service_seq: u64,
    timers: HashMap<u64, Slot<()>>,
    mailboxes: HashMap<Port, Mailbox>,
    channel_last: HashMap<(NodeId, u16), Time>,
    failed: BTreeSet<NodeId>,
    failure_epoch: u64,
    failure_wakers: Vec<Waker>,
    mn_paused: Vec<PendingOp>,
    spawn_queue: Vec<(Option<NodeId>, LocalTask)>,
    kill_queue: Vec<NodeId>,
    trace: TraceSink,
    stats: FabricStats,
    rng: ChaCha8Rng,
}

impl World {
    fn schedule(&mut self, t: Time, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.events.push(Reverse(Event { t, seq, kind }));
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn trace_op(&mut self, op: &FabricOp, t: Time, old: u64, new: u64) {
        if !self.trace.enabled() {
            return;
        }
        let ev = TraceEvent {
            t,
            node: op.src.to_string(),
            kind: op.verb.kind().name().to_string(),
            addr: op.addr,
            old,
            new,
            tag: op.tag.to_string(),
            ..Default::default()
        };
        self.trace.emit(&ev);
    }

    fn validate(&self, op: &FabricOp) -> Result<(), FabricError> {
        match &op.verb {
            Verb::Cas { .. } | Verb::Faa { .. } if !op.addr.is_multiple_of(8) => {
                Err(FabricError::MalformedOp("atomics require 8-byte alignment"))
            }
            Verb::Read { len } if *len == 0 || *len as usize > self.cfg.max_io_len => {
                Err(FabricError::MalformedOp("read length out of range"))
            }
            Verb::Write { data } if data.is_empty() || data.len() > self.cfg.max_io_len => {
                Err(FabricError::MalformedOp("write length out of range"))
            }
            _ => match op.addr.checked_add(op.verb.len()) {
                Some(end) if end <= self.mem.allocated() => Ok(()),
                _ => Err(FabricError::InvalidAddr {
                    addr: op.addr,
                    len: op.verb.len(),
                }),
            },
        }
    }

    fn arrive(&mut self, p: PendingOp) {
        if self.failed.contains(&NodeId::Mn) {
            self.mn_paused.push(p);
            return;
        }
        let kind = p.op.verb.kind();
        let weight = self.cfg.op_cost.weight(kind);
        let svc = self.nic.admit(self.now, weight, p.op.verb.len());
        let p = PendingOp {
            depart: svc.depart,
            ..p
        };
        self.schedule(svc.start, EventKind::MnService(p));
    }

    fn service(&mut self, p: PendingOp) {
        if self.failed.contains(&NodeId::Mn) {
            self.mn_paused.push(p);
            return;
        }
        let now = self.now;
        let PendingOp { id, op, depart } = p;
        let result = self.execute(&op, now);
        let rtt = self.cfg.cn_mn_rtt();
        let back = rtt - rtt / 2;
        self.schedule(
            depart.max(now) + back,
            EventKind::Complete {
                id,
                dst: op.src,
                result,
            },
        );
    }

    fn execute(&mut self, op: &FabricOp, now: Time) -> Result<Completion, FabricError> {
        let value = match &op.verb {
            Verb::Read { len } => {
                self.stats.reads += 1;
                let b = self.mem.read(op.addr, *len)?;
                let w = first_word(&b);
                self.trace_op(op, now, w, w);
                OpValue::Bytes(b)
            }
            Verb::Write { data } => {
                self.stats.writes += 1;
                let old = first_word(&self.mem.read(op.addr, data.len() as u64)?);
                self.mem.write(op.addr, data)?;
                self.trace_op(op, now, old, first_word(data));
                OpValue::Ack
            }
            Verb::Cas { expected, swap } => {
                self.stats.cas += 1;
                let old = self.mem.cas(op.addr, *expected, *swap)?;
                let new = if old == *expected { *swap } else { old };
                self.trace_op(op, now, old, new);
                OpValue::Word(old)
            }
            Verb::Faa { add } => {
                self.stats.faa += 1;
                let old = self.mem.faa(op.addr, *add)?;
                self.trace_op(op, now, old, old.wrapping_add(*add));
                OpValue::Word(old)
            }
        };
        let probe = match op.probe {
            Some((a, l)) => Some(self.mem.read(a, l)?),
            None => None,
        };
        self.service_seq += 1;
        Ok(Completion {
            value,
            seq: self.service_seq,
            served_at: now,
            probe,
        })
    }

    fn deliver(&mut self, from: NodeId, to: Port, msg: Message) {
        if self.failed.contains(&from) || self.failed.contains(&NodeId::Cn(to.cn)) {
            self.stats.messages_dropped += 1;
            return;
        }
        let mb = self.mailboxes.entry(to).or_default();
        mb.queue.push_back((from, msg));
        if let Some(w) = mb.waker.take() {
            w.wake();
        }
    }

    fn bump_failure_epoch(&mut self) {
        self.failure_epoch += 1;
        for w in self.failure_wakers.drain(..) {
            w.wake();
        }
    }

    fn trace_node_event(&mut self, node: NodeId, kind: &str) {
        if self.trace.enabled() {
            let ev = TraceEvent {
                t: self.now,
                node: node.to_string(),
                kind: kind.to_string(),
                ..Default::default()
            };
            self.trace.emit(&ev);
        }
    }
}

fn first_word(b: &[u8]) -> u64 {
    let mut w = [0u8; 8];
    let n = b.len().min(8);
    w[..n].copy_from_slice(&b[..n]);
    u64::from_le_bytes(w)
}

/// Shared handle to the simulated cluster, cloned into every task.
#[derive(Clone)]
pub struct Fabric(Rc<RefCell<World>>);

impl Fabric {
    fn with<R>(&self, f: impl FnOnce(&mut World) -> R) -> R {
        f(&mut self.0.borrow_mut())
    }

    pub fn now(&self) -> Time {
        self.with(|w| w.now)
    }

    pub fn config(&self) -> FabricConfig {
        self.with(|w| w.cfg.clone())
    }

    pub fn cn_mn_rtt(&self) -> Time {
        self.with(|w| w.cfg.cn_mn_rtt())
    }

    pub fn stats(&self) -> FabricStats {
        self.with(|w| w.stats.clone())
    }

    pub fn nic_utilization(&self, elapsed: Time) -> f64 {
        self.with(|w| w.nic.utilization(elapsed))
    }

    /// Bump-allocates an MN region initialized by repeating `pattern`.
    pub fn alloc(&self, len: u64, pattern: Vec<u8>) -> Result<u64, FabricError> {
        self.with(|w| w.mem.alloc(len, pattern))
    }

    /// Direct MN memory access that bypasses the NIC, for setup and checks.
    pub fn with_memory<R>(&self, f: impl FnOnce(&mut Memory) -> R) -> R {
        self.with(|w| f(&mut w.mem))
    }

    /// Draws from the simulation's seeded generator.
    pub fn with_rng<R>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        self.with(|w| f(&mut w.rng))
    }

    /// Issues a one-sided verb. The returned future resolves when the
    /// response reaches the issuing CN.
    pub fn post(&self, op: FabricOp) -> OpFuture {
        let id = self.with(|w| {
            let id = w.fresh_id();
            let mut slot = Slot::default();
            if let Err(e) = w.validate(&op) {
                slot.value = Some(Err(e));
            } else if !w.failed.contains(&op.src) {
                let rtt = w.cfg.cn_mn_rtt();
                let at = w.now + rtt / 2;
                w.schedule(at, EventKind::MnArrive(PendingOp { id, op, depart: 0 }));
            }
            w.ops.insert(id, slot);
            id
        });
        OpFuture {
            fabric: self.clone(),
            id,
        }
    }

    pub async fn read(&self, src: NodeId, addr: u64, len: u64, tag: &'static str) -> Result<Vec<u8>, FabricError> {
        let c = self.post(FabricOp::read(src, addr, len, tag)).await?;
        match c.value {
            OpValue::Bytes(b) => Ok(b),
            _ => unreachable!("READ returns bytes"),
        }
    }

    pub async fn write(&self, src: NodeId, addr: u64, data: Vec<u8>, tag: &'static str) -> Result<(), FabricError> {
        self.post(FabricOp::write(src, addr, data, tag)).await?;
        Ok(())
    }

    pub async fn cas(
        &self,
        src: NodeId,
        addr: u64,
        expected: u64,
        swap: u64,
        tag: &'static str,
    ) -> Result<u64, FabricError> {
        Ok(self.post(FabricOp::cas(src, addr, expected, swap, tag)).await?.word())
    }

    pub async fn faa(&self, src: NodeId, addr: u64, add: u64, tag: &'static str) -> Result<u64, FabricError> {
        Ok(self.post(FabricOp::faa(src, addr, add, tag)).await?.word())
    }

    /// Sends a message over the reliable, in-order CN-to-CN channel.
    /// Messages between mailboxes of one CN are delivered without delay.
    pub fn send(&self, from: u16, to: Port, msg: Message) {
        self.with(|w| {
            let src = NodeId::Cn(from);
            if w.failed.contains(&src) {
                w.stats.messages_dropped += 1;
                return;
            }
            w.stats.messages_sent += 1;
            let lat = if from == to.cn { 0 } else { w.cfg.cn_cn_latency() };
            let last = w.channel_last.entry((src, to.cn)).or_insert(0);
            let at = (w.now + lat).max(*last);
            *last = at;
            if w.trace.enabled() && from != to.cn {
                let ev = TraceEvent {
                    t: w.now,
                    node: src.to_string(),
                    kind: "MSG".to_string(),
                    addr: to.mailbox as u64,
                    old: to.cn as u64,
                    new: msg.lock().0 as u64,
                    tag: msg.kind().to_string(),
                    ..Default::default()
                };
                w.trace.emit(&ev);
            }
            w.schedule(at, EventKind::Deliver { from: src, to, msg });
        })
    }

    pub fn recv(&self, port: Port) -> Recv {
        Recv {
            fabric: self.clone(),
            port,
        }
    }

    /// Removes and returns the first queued message matching `pred`.
    pub fn take_matching(&self, port: Port, mut pred: impl FnMut(&Message) -> bool) -> Option<(NodeId, Message)> {
        self.with(|w| {
            let mb = w.mailboxes.get_mut(&port)?;
            let i = mb.queue.iter().position(|(_, m)| pred(m))?;
            mb.queue.remove(i)
        })
    }

    pub fn sleep(&self, dur: Time) -> Sleep {
        let (id, deadline) = self.with(|w| {
            let id = w.fresh_id();
            w.timers.insert(id, Slot::default());
            let deadline = w.now + dur;
            w.schedule(deadline, EventKind::Timer(id));
            (id, deadline)
        });
        Sleep {
            fabric: self.clone(),
            id,
            deadline,
        }
    }

    /// Waits for the next message on `port`, giving up after `dur`.
    pub async fn recv_timeout(&self, port: Port, dur: Time) -> Option<(NodeId, Message)> {
        use futures::future::{select, Either};
        match select(self.recv(port), self.sleep(dur)).await {
            Either::Left((m, _)) => Some(m),
            Either::Right(_) => None,
        }
    }

    /// Runs `fut` as a task owned by `owner`; tasks of a failed CN are dropped.
    pub fn spawn(&self, owner: Option<NodeId>, fut: impl Future<Output = ()> + 'static) {
        self.with(|w| w.spawn_queue.push((owner, Box::pin(fut))));
    }

    pub fn inject_failure(&self, node: NodeId, at: Time) {
        self.with(|w| w.schedule(at, EventKind::Fail(node)));
    }

    pub fn recover(&self, node: NodeId, at: Time) {
        self.with(|w| w.schedule(at, EventKind::Recover(node)));
    }

    /// Failure-detector oracle: a consistent, instantaneous view.
    pub fn is_failed(&self, node: NodeId) -> bool {
        self.with(|w| w.failed.contains(&node))
    }

    pub fn failed_nodes(&self) -> Vec<NodeId> {
        self.with(|w| w.failed.iter().copied().collect())
    }

    pub fn failure_epoch(&self) -> u64 {
        self.with(|w| w.failure_epoch)
    }

    /// Resolves once the failed set differs from epoch `seen`.
    pub fn failure_change(&self, seen: u64) -> FailureChange {
        FailureChange {
            fabric: self.clone(),
            seen,
        }
    }

    /// Drops MN ops paused by an MN failure instead of replaying them.
    pub fn discard_paused_ops(&self) -> usize {
        self.with(|w| {
            let n = w.mn_paused.len();
            w.mn_paused.clear();
            n
        })
    }

    /// Kills every task owned by `node` without marking it failed.
    pub fn kill_tasks(&self, node: NodeId) {
        self.with(|w| w.kill_queue.push(node));
    }

    pub fn trace_enabled(&self) -> bool {
        self.with(|w| w.trace.enabled())
    }

    pub fn trace(&self, ev: TraceEvent) {
        self.with(|w| w.trace.emit(&ev));
    }

    /// Builds and emits an event only when tracing is on.
    pub fn trace_with(&self, f: impl FnOnce(Time) -> TraceEvent) {
        self.with(|w| {
            if w.trace.enabled() {
                let ev = f(w.now);
                w.trace.emit(&ev);
            }
        });
    }
}

pub struct OpFuture {
    fabric: Fabric,
    id: u64,
}

impl Future for OpFuture {
    type Output = Result<Completion, FabricError>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        self.fabric.with(|w| {
            let slot = w.ops.get_mut(&self.id).expect("op slot lives until drop");
            match slot.value.take() {
                Some(v) => Poll::Ready(v),
                None => {
                    slot.waker = Some(cx.waker().clone());
                    Poll::Pending
                }
            }
        })
    }
}

impl Drop for OpFuture {
    fn drop(&mut self) {
        if let Ok(mut w) = self.fabric.0.try_borrow_mut() {
            w.ops.remove(&self.id);
        }
    }
}

pub struct Sleep {
    fabric: Fabric,
    id: u64,
    deadline: Time,
}

impl Sleep {
    pub fn deadline(&self) -> Time {
        self.deadline
    }
}

impl Future for Sleep {
    type Output = ();

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        self.fabric.with(|w| {
            let slot = w.timers.get_mut(&self.id).expect("timer slot lives until drop");
            if slot.value.take().is_some() {
                Poll::Ready(())
            } else {
                slot.waker = Some(cx.waker().clone());
                Poll::Pending
            }
        })
    }
}

impl Drop for Sleep {
    fn drop(&mut self) {
        if let Ok(mut w) = self.fabric.0.try_borrow_mut() {
            w.timers.remove(&self.id);
        }
    }
}

pub struct Recv {
    fabric: Fabric,
    port: Port,
}

impl Future for Recv {
    type Output = (NodeId, Message);

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        self.fabric.with(|w| {
            let mb = w.mailboxes.entry(self.port).or_default();
            match mb.queue.pop_front() {
                Some(m) => Poll::Ready(m),
                None => {
                    mb.waker = Some(cx.waker().clone());
                    Poll::Pending
                }
            }
        })
    }
}

pub struct FailureChange {
    fabric: Fabric,
    seen: u64,
}

impl Future for FailureChange {
    type Output = ();

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        self.fabric.with(|w| {
            if w.failure_epoch != self.seen {
                Poll::Ready(())
            } else {
                w.failure_wakers.push(cx.waker().clone());
                Poll::Pending
            }
        })
    }
}

struct TaskWaker {
    id: u64,
    queued: AtomicBool,
    ready: Arc<Mutex<VecDeque<u64>>>,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref()
    }

    fn wake_by_ref(self: &Arc<Self>) {
        if !self.queued.swap(true, Ordering::SeqCst) {
            self.ready.lock().expect("ready queue").push_back(self.id);
        }
    }
}

struct Task {
    fut: LocalTask,
    owner: Option<NodeId>,
    waker: Arc<TaskWaker>,
}

/// Owns the event loop and the task executor.
pub struct Sim {
    fabric: Fabric,
    tasks: BTreeMap<u64, Task>,
    next_task: u64,
    ready: Arc<Mutex<VecDeque<u64>>>,
    mn_recovery_hook: Option<RecoveryHook>,
}

impl Sim {
    pub fn new(cfg: FabricConfig) -> Result<Self, FabricError> {
        cfg.validate()?;
        let world = World {
            now: 0,
            next_seq: 0,
            events: BinaryHeap::new(),
            mem: Memory::new(cfg.mn_memory_bytes),
            nic: Nic::new(cfg.mn_nic_iops_capacity, cfg.mn_nic_burst, cfg.mn_bandwidth),
            ops: HashMap::new(),
            next_id: 0,
            service_seq: 0,
            timers: HashMap::new(),
            mailboxes: HashMap::new(),
            channel_last: HashMap::new(),
            failed: BTreeSet::new(),
            failure_epoch: 0,
            failure_wakers: Vec::new(),
            mn_paused: Vec::new(),
            spawn_queue: Vec::new(),
            kill_queue: Vec::new(),
            trace: TraceSink::Off,
            stats: FabricStats::default(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
        };
        Ok(Self {
            fabric: Fabric(Rc::new(RefCell::new(world))),
            tasks: BTreeMap::new(),
            next_task: 0,
            ready: Arc::new(Mutex::new(VecDeque::new())),
            mn_recovery_hook: None,
        })
    }

    pub fn fabric(&self) -> Fabric {
        self.fabric.clone()
    }

    pub fn set_trace(&mut self, sink: TraceSink) {
        self.fabric.with(|w| w.trace = sink);
    }

    /// Takes the trace sink out, returning captured bytes for a memory sink.
    pub fn take_trace(&mut self) -> Option<Vec<u8>> {
        let sink = self.fabric.with(|w| {
            w.trace.flush();
            std::mem::replace(&mut w.trace, TraceSink::Off)
        });
        match sink {
            TraceSink::Memory(b) => Some(b),
            _ => None,
        }
    }

    /// Called when the MN comes back, before any paused op is replayed.
    pub fn on_mn_recovery(&mut self, hook: RecoveryHook) {
        self.mn_recovery_hook = Some(hook);
    }

    pub fn spawn(&self, owner: Option<NodeId>, fut: impl Future<Output = ()> + 'static) {
        self.fabric.spawn(owner, fut);
    }

    pub fn live_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn absorb(&mut self) {
        let (spawns, kills) = self
            .fabric
            .with(|w| (std::mem::take(&mut w.spawn_queue), std::mem::take(&mut w.kill_queue)));
        for (owner, fut) in spawns {
            if let Some(n) = owner {
                if self.fabric.is_failed(n) {
                    continue;
                }
            }
            self.next_task += 1;
            let id = self.next_task;
            let waker = Arc::new(TaskWaker {
                id,
                queued: AtomicBool::new(false),
                ready: self.ready.clone(),
            });
            waker.wake_by_ref();
            self.tasks.insert(id, Task { fut, owner, waker });
        }
        for node in kills {
            let doomed: Vec<u64> = self
                .tasks
                .iter()
                .filter(|(_, t)| t.owner == Some(node))
                .map(|(&id, _)| id)
                .collect();
            for id in doomed {
                self.tasks.remove(&id);
            }
        }
    }

    fn drain_ready(&mut self) {
        loop {
            self.absorb();
            let next = self.ready.lock().expect("ready queue").pop_front();
            let Some(id) = next else { break };
            let Some(mut task) = self.tasks.remove(&id) else {
                continue;
            };
            task.waker.queued.store(false, Ordering::SeqCst);
            let waker = Waker::from(task.waker.clone());
            let mut cx = Context::from_waker(&waker);
            if task.fut.as_mut().poll(&mut cx).is_pending() {
                self.tasks.insert(id, task);
            }
        }
    }

    /// Processes events until none remain. Equivalent to `run_until(None)`.
    pub fn run_until_quiescent(&mut self) -> Result<Time, FabricError> {
        self.run_until(None)
    }

    /// Processes events in `(time, sequence)` order. Stops with
    /// `HorizonExceeded` if the next event lies beyond `horizon`.
    pub fn run_until(&mut self, horizon: Option<Time>) -> Result<Time, FabricError> {
        loop {
            self.drain_ready();
            let ev = self.fabric.with(|w| loop {
                let Reverse(ev) = w.events.pop()?;
                // Timers whose future was dropped do not advance the clock.
                if let EventKind::Timer(id) = ev.kind {
                    if !w.timers.contains_key(&id) {
                        continue;
                    }
                }
                if let Some(h) = horizon {
                    if ev.t > h {
                        w.events.push(Reverse(ev));
                        return Some(Err(FabricError::HorizonExceeded { at: w.now }));
                    }
                }
                w.now = ev.t;
                w.stats.events += 1;
                return Some(Ok(ev));
            });
            let ev = match ev {
                None => {
                    self.fabric.with(|w| w.trace.flush());
                    return Ok(self.fabric.now());
                }
                Some(Err(e)) => return Err(e),
                Some(Ok(ev)) => ev,
            };
            self.handle(ev.kind);
        }
    }

    fn handle(&mut self, kind: EventKind) {
        match kind {
            EventKind::MnArrive(p) => self.fabric.with(|w| w.arrive(p)),
            EventKind::MnService(p) => self.fabric.with(|w| w.service(p)),
            EventKind::Complete { id, dst, result } => self.fabric.with(|w| {
                if w.failed.contains(&dst) {
                    return;
                }
                if let Some(slot) = w.ops.get_mut(&id) {
                    slot.value = Some(result);
                    if let Some(wk) = slot.waker.take() {
                        wk.wake();
                    }
                }
            }),
            EventKind::Deliver { from, to, msg } => self.fabric.with(|w| w.deliver(from, to, msg)),
            EventKind::Timer(id) => self.fabric.with(|w| {
                if let Some(slot) = w.timers.get_mut(&id) {
                    slot.value = Some(());
                    if let Some(wk) = slot.waker.take() {
                        wk.wake();
                    }
                }
            }),
            EventKind::Fail(node) => self.fabric.with(|w| {
                if w.failed.insert(node) {
                    w.trace_node_event(node, "FAIL");
                    if let NodeId::Cn(_) = node {
                        w.kill_queue.push(node);
                    }
                    w.bump_failure_epoch();
                }
            }),
            EventKind::Recover(node) => {
                let was_failed = self.fabric.with(|w| {
                    let was = w.failed.remove(&node);
                    if was {
                        w.trace_node_event(node, "RECOVER");
                        if node == NodeId::Mn {
                            let now = w.now;
                            w.nic.refill(now);
                        }
                        w.bump_failure_epoch();
                    }
                    was
                });
                if was_failed && node == NodeId::Mn {
                    if let Some(hook) = self.mn_recovery_hook.as_mut() {
                        hook(&self.fabric);
                    }
                    self.fabric.with(|w| {
                        for p in std::mem::take(&mut w.mn_paused) {
                            w.arrive(p);
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn sim() -> Sim {
        Sim::new(FabricConfig::default()).unwrap()
    }

    #[test]
    fn empty_queue_returns_at_zero() {
        assert_eq!(sim().run_until_quiescent().unwrap(), 0);
    }

    #[test]
    fn faa_identity_and_cas_semantics() {
        let mut s = sim();
        let f = s.fabric();
        let x = f.alloc(8, vec![]).unwrap();
        let out = Rc::new(RefCell::new(Vec::new()));
        let o = out.clone();
        s.spawn(Some(NodeId::Cn(1)), async move {
            let src = NodeId::Cn(1);
            let v = f.faa(src, x, 0, "t").await.unwrap();
            o.borrow_mut().push(v);
            let v = f.cas(src, x, 0, 7, "t").await.unwrap();
            o.borrow_mut().push(v);
            let v = f.cas(src, x, 0, 9, "t").await.unwrap();
            o.borrow_mut().push(v);
        });
        s.run_until_quiescent().unwrap();
        assert_eq!(*out.borrow(), vec![0, 0, 7]);
        assert_eq!(s.fabric().with_memory(|m| m.read_u64(x).unwrap()), 7);
    }

    #[test]
    fn op_round_trip_takes_one_rtt_when_idle() {
        let mut s = sim();
        let f = s.fabric();
        let x = f.alloc(64, vec![]).unwrap();
        let done = Rc::new(Cell::new(0));
        let d = done.clone();
        s.spawn(Some(NodeId::Cn(1)), async move {
            f.read(NodeId::Cn(1), x, 8, "t").await.unwrap();
            d.set(f.now());
        });
        s.run_until_quiescent().unwrap();
        // 2 µs RTT plus 1 ns of wire time for 8 bytes.
        assert_eq!(done.get(), 2_001);
    }

    #[test]
    fn invalid_ops_fail_fast() {
        let mut s = sim();
        let f = s.fabric();
        let x = f.alloc(16, vec![]).unwrap();
        let errs = Rc::new(RefCell::new(Vec::new()));
        let e = errs.clone();
        s.spawn(Some(NodeId::Cn(1)), async move {
            let src = NodeId::Cn(1);
            let v = f.read(src, x + 16, 8, "t").await.unwrap_err();
            e.borrow_mut().push(v);
            let v = f.faa(src, x + 4, 1, "t").await.unwrap_err();
            e.borrow_mut().push(v);
            let v = f.read(src, x, 5000, "t").await.unwrap_err();
            e.borrow_mut().push(v);
        });
        s.run_until_quiescent().unwrap();
        let errs = errs.borrow();
        assert!(matches!(errs[0], FabricError::InvalidAddr { .. }));
        assert!(matches!(errs[1], FabricError::MalformedOp(_)));
        assert!(matches!(errs[2], FabricError::MalformedOp(_)));
    }

    #[test]
    fn messages_are_fifo_per_channel_and_honor_latency() {
        let cfg = FabricConfig::default().with_cn_cn_ratio(4.0);
        let mut s = Sim::new(cfg).unwrap();
        let f = s.fabric();
        let got = Rc::new(RefCell::new(Vec::new()));
        let g = got.clone();
        let to = Port { cn: 2, mailbox: 1 };
        let lock = crate::cql::LockId(0);
        for i in 0..2u32 {
            f.send(1, to, Message::Abort { lock, reset_count: i });
        }
        let f2 = f.clone();
        s.spawn(Some(NodeId::Cn(2)), async move {
            for _ in 0..2 {
                let (_, m) = f2.recv(to).await;
                g.borrow_mut().push((f2.now(), m));
            }
        });
        s.run_until_quiescent().unwrap();
        let got = got.borrow();
        assert_eq!(got[0].0, 8_000);
        assert_eq!(got[0].1, Message::Abort { lock, reset_count: 0 });
        assert_eq!(got[1].1, Message::Abort { lock, reset_count: 1 });
    }

    #[test]
    fn messages_to_failed_cn_are_dropped_and_sender_continues() {
        let mut s = sim();
        let f = s.fabric();
        f.inject_failure(NodeId::Cn(2), 0);
        let sent = Rc::new(Cell::new(false));
        let sd = sent.clone();
        let ff = f.clone();
        s.spawn(Some(NodeId::Cn(1)), async move {
            ff.sleep(1_000).await;
            ff.send(
                1,
                Port { cn: 2, mailbox: 1 },
                Message::Abort {
                    lock: crate::cql::LockId(0),
                    reset_count: 0,
                },
            );
            sd.set(true);
        });
        s.run_until_quiescent().unwrap();
        assert!(sent.get());
        assert_eq!(f.stats().messages_dropped, 1);
    }

    #[test]
    fn failed_mn_stalls_ops_until_recovery() {
        let mut s = sim();
        let f = s.fabric();
        let x = f.alloc(8, vec![]).unwrap();
        f.inject_failure(NodeId::Mn, 500);
        f.recover(NodeId::Mn, 50_000);
        let done = Rc::new(Cell::new(0));
        let d = done.clone();
        let ff = f.clone();
        s.spawn(Some(NodeId::Cn(1)), async move {
            ff.sleep(1_000).await;
            ff.faa(NodeId::Cn(1), x, 1, "t").await.unwrap();
            d.set(ff.now());
        });
        s.run_until_quiescent().unwrap();
        assert!(done.get() > 50_000);
        assert_eq!(f.with_memory(|m| m.read_u64(x).unwrap()), 1);
    }

    #[test]
    fn recovery_without_in_flight_ops_behaves_like_fresh_run() {
        fn run(fail: bool) -> Vec<u8> {
            let mut s = sim();
            s.set_trace(TraceSink::Memory(Vec::new()));
            let f = s.fabric();
            let x = f.alloc(8, vec![]).unwrap();
            if fail {
                f.inject_failure(NodeId::Mn, 10);
                f.recover(NodeId::Mn, 20);
            }
            let ff = f.clone();
            s.spawn(Some(NodeId::Cn(1)), async move {
                ff.sleep(1_000).await;
                for _ in 0..5 {
                    ff.faa(NodeId::Cn(1), x, 3, "t").await.unwrap();
                }
            });
            s.run_until_quiescent().unwrap();
            let t = s.take_trace().unwrap();
            String::from_utf8(t)
                .unwrap()
                .lines()
                .filter(|l| l.contains("\"FAA\""))
                .collect::<Vec<_>>()
                .join("\n")
                .into_bytes()
        }
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn cn_failure_kills_its_tasks() {
        let mut s = sim();
        let f = s.fabric();
        let ticks = Rc::new(Cell::new(0));
        let t = ticks.clone();
        let ff = f.clone();
        s.spawn(Some(NodeId::Cn(3)), async move {
            loop {
                ff.sleep(1_000).await;
                t.set(t.get() + 1);
            }
        });
        f.inject_failure(NodeId::Cn(3), 4_500);
        s.run_until_quiescent().unwrap();
        assert_eq!(ticks.get(), 4);
        assert_eq!(s.live_tasks(), 0);
    }

    #[test]
    fn horizon_stops_the_loop() {
        let mut s = sim();
        let f = s.fabric();
        s.spawn(None, async move {
            loop {
                f.sleep(1_000).await;
            }
        });
        assert!(matches!(
            s.run_until(Some(10_500)),
            Err(FabricError::HorizonExceeded { at: 10_000 })
        ));
    }

    #[test]
    fn cancelled_timers_do_not_advance_the_clock() {
        let mut s = sim();
        let f = s.fabric();
        let ff = f.clone();
        s.spawn(Some(NodeId::Cn(1)), async move {
            let port = Port { cn: 1, mailbox: 1 };
            ff.send(
                1,
                port,
                Message::Abort {
                    lock: crate::cql::LockId(0),
                    reset_count: 0,
                },
            );
            assert!(ff.recv_timeout(port, 1_000_000).await.is_some());
        });
        assert_eq!(s.run_until_quiescent().unwrap(), 0);
    }

    #[test]
    fn cas_storm_slows_unrelated_reads() {
        // Oracle: under the default NIC (100M weight/s), 256 spinning CAS
        // clients offer ~512 weight per µs, far above the 100 per µs the NIC
        // drains, while 256 one-shot FAAs are absorbed within ~10 µs.
        fn probe_latency(storm: bool) -> Time {
            let mut s = Sim::new(FabricConfig::default()).unwrap();
            let f = s.fabric();
            let word = f.alloc(8, vec![]).unwrap();
            let other = f.alloc(8, vec![]).unwrap();
            for c in 0..256u16 {
                let ff = f.clone();
                let src = NodeId::Cn(1 + c % 8);
                s.spawn(Some(src), async move {
                    if storm {
                        for _ in 0..50 {
                            ff.cas(src, word, 1, 2, "storm").await.unwrap();
                        }
                    } else {
                        ff.faa(src, word, 1, "once").await.unwrap();
                    }
                });
            }
            let lat = Rc::new(Cell::new(0));
            let l = lat.clone();
            let ff = f.clone();
            s.spawn(Some(NodeId::Cn(1)), async move {
                ff.sleep(20_000).await;
                let t0 = ff.now();
                ff.read(NodeId::Cn(1), other, 8, "probe").await.unwrap();
                l.set(ff.now() - t0);
            });
            s.run_until_quiescent().unwrap();
            lat.get()
        }
        let calm = probe_latency(false);
        let storm = probe_latency(true);
        assert!(storm > calm, "storm {storm} vs calm {calm}");
        assert_eq!(calm, 2_001);
    }

    #[test]
    fn atomics_replay_in_service_order() {
        // Old values returned by concurrent FAAs, sorted by service sequence,
        // reconstruct the final word.
        let mut s = sim();
        let f = s.fabric();
        let x = f.alloc(8, vec![]).unwrap();
        let log = Rc::new(RefCell::new(Vec::new()));
        for c in 0..32u64 {
            let ff = f.clone();
            let lg = log.clone();
            s.spawn(Some(NodeId::Cn(1 + (c % 4) as u16)), async move {
                let src = NodeId::Cn(1 + (c % 4) as u16);
                for k in 0..5 {
                    let add = c * 7 + k + 1;
                    let comp = ff.post(FabricOp::faa(src, x, add, "t")).await.unwrap();
                    lg.borrow_mut().push((comp.seq, comp.word(), add));
                }
            });
        }
        s.run_until_quiescent().unwrap();
        let mut log = log.borrow().clone();
        log.sort();
        let mut v = 0u64;
        for (_, old, add) in &log {
            assert_eq!(*old, v);
            v = v.wrapping_add(*add);
        }
        assert_eq!(f.with_memory(|m| m.read_u64(x).unwrap()), v);
    }
}
