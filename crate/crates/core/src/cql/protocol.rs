//! Acquire and release workflows over simulated one-sided verbs.

use thiserror::Error;

use super::entry::{version_newer, QueueEntry, INITIAL_VERSION};
use super::{Layout, LockHeader, LockId, Mode};
use crate::fabric::{FabricOp, Message, Notification};
use crate::hier::ts_earlier;
use crate::node::{port_of_cid, Client, Phase};
use crate::reset::{self, Filter, Occasion};

/// Header word followed by `C` entries, contiguous in MN memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CqlLock {
    pub id: LockId,
    pub addr: u64,
    pub layout: Layout,
}

/// What the enqueue FAA's return value says about the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcquireOutcome {
    Holder,
    Waiter { slot: u64, version: u16 },
    Aborted,
}

impl AcquireOutcome {
    pub fn classify(old: &LockHeader, mode: Mode, layout: &Layout) -> Self {
        if old.reset_id != 0 {
            return AcquireOutcome::Aborted;
        }
        let holder = match mode {
            Mode::Shared => old.wcnt == 0,
            Mode::Exclusive => old.qsize == 0,
        };
        if holder {
            AcquireOutcome::Holder
        } else {
            let (slot, version) = layout.slot_of(old.qhead, old.qsize);
            AcquireOutcome::Waiter { slot, version }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Granted {
    /// MN service sequence of the enqueue FAA.
    pub seq: u64,
    pub notified: bool,
    pub remote_ts: Option<u16>,
    pub session: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attempt {
    Granted(Granted),
    Aborted,
    /// The wait exceeded the acquisition timeout; `known` is the header
    /// value this client last produced.
    TimedOut {
        known: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleaseOutcome {
    Done { notified: u32 },
    Aborted,
    NeedsReset { occasion: Occasion, known: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    Valid(QueueEntry),
    Obsolete,
}

/// Occupied queue positions behind the releaser, offsets `1..qsize`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueView {
    pub old: LockHeader,
    /// `slots[i]` is queue offset `i + 1`.
    pub slots: Vec<SlotState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ResolveError {
    #[error("entry at offset {offset} carries a newer version than expected")]
    Overwrite { offset: u64 },
    #[error("version at offset {offset} reached the initial value")]
    VersionOverflow { offset: u64 },
}

impl ResolveError {
    pub fn occasion(&self) -> Occasion {
        match self {
            ResolveError::Overwrite { .. } => Occasion::Overwrite,
            ResolveError::VersionOverflow { .. } => Occasion::VersionOverflow,
        }
    }
}

/// Classifies every occupied position behind the releaser in a raw
/// snapshot of the `C` entries.
pub fn resolve_queue(snapshot: &[u8], old: &LockHeader, layout: &Layout) -> Result<QueueView, ResolveError> {
    let mut slots = Vec::with_capacity(old.qsize.saturating_sub(1) as usize);
    for offset in 1..old.qsize {
        let (slot, expected) = layout.slot_of(old.qhead, offset);
        if expected == INITIAL_VERSION {
            return Err(ResolveError::VersionOverflow { offset });
        }
        let i = slot as usize * QueueEntry::BYTES;
        let e = QueueEntry::decode(&snapshot[i..i + QueueEntry::BYTES]);
        if e.version == expected {
            slots.push(SlotState::Valid(e));
        } else if e.version != INITIAL_VERSION && version_newer(e.version, expected) {
            return Err(ResolveError::Overwrite { offset });
        } else {
            slots.push(SlotState::Obsolete);
        }
    }
    Ok(QueueView { old: *old, slots })
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Decision {
    Nobody,
    Notify(Vec<u64>),
    /// Targeted re-reads of single obsolete offsets.
    Slots(Vec<u64>),
    WholeQueue,
}

impl QueueView {
    fn at(&self, offset: u64) -> SlotState {
        self.slots[(offset - 1) as usize]
    }

    fn decide(&self, releasing: Mode) -> Decision {
        let n = self.old.qsize;
        match releasing {
            Mode::Exclusive => {
                // Every position behind a writer is a waiter.
                let mut need = Vec::new();
                let mut readers = Vec::new();
                for off in 1..n {
                    match self.at(off) {
                        SlotState::Obsolete => need.push(off),
                        SlotState::Valid(e) if e.mode == Mode::Exclusive => {
                            if off == 1 {
                                return Decision::Notify(vec![1]);
                            }
                            break;
                        }
                        SlotState::Valid(_) => readers.push(off),
                    }
                    if !need.is_empty() && off == 1 {
                        // The successor decides everything else.
                        break;
                    }
                }
                if !need.is_empty() {
                    Decision::Slots(need)
                } else if readers.is_empty() {
                    Decision::Nobody
                } else {
                    Decision::Notify(readers)
                }
            }
            Mode::Shared => {
                if self.old.wcnt == 0 {
                    return Decision::Nobody;
                }
                let writers: Vec<u64> = (1..n)
                    .filter(|&o| matches!(self.at(o), SlotState::Valid(e) if e.mode == Mode::Exclusive))
                    .collect();
                if (writers.len() as u64) < self.old.wcnt {
                    return Decision::WholeQueue;
                }
                if writers.first() == Some(&1) {
                    Decision::Notify(vec![1])
                } else {
                    Decision::Nobody
                }
            }
        }
    }

    /// Earliest timestamp among valid waiters not being granted and not on `cn`.
    fn earliest_remote(&self, granted: &[u64], cn: u16) -> Option<u16> {
        let mut best: Option<u16> = None;
        for off in 1..self.old.qsize {
            if granted.contains(&off) {
                continue;
            }
            if let SlotState::Valid(e) = self.at(off) {
                if e.cid >> 8 == cn {
                    continue;
                }
                best = Some(match best {
                    Some(b) if !ts_earlier(e.ts, b) => b,
                    _ => e.ts,
                });
            }
        }
        best
    }
}

/// Earliest waiter timestamp in a raw header+entries image, skipping
/// entries owned by `exclude_cn`. Holders are the positions before the
/// first valid writer (or the writer itself at the head).
pub fn earliest_waiter_ts(image: &[u8], layout: &Layout, exclude_cn: u16) -> Option<u16> {
    let h = layout.decode(u64::from_le_bytes(image[0..8].try_into().ok()?));
    if h.reset_id != 0 || h.wcnt == 0 {
        return None;
    }
    let entries = &image[8..];
    let valid = |off: u64| {
        let (slot, v) = layout.slot_of(h.qhead, off);
        let i = slot as usize * QueueEntry::BYTES;
        let e = QueueEntry::decode(&entries[i..i + QueueEntry::BYTES]);
        (e.version == v && v != INITIAL_VERSION).then_some(e)
    };
    let first_writer = (0..h.qsize).find(|&o| matches!(valid(o), Some(e) if e.mode == Mode::Exclusive))?;
    let from = if first_writer == 0 { 1 } else { first_writer };
    let mut best: Option<u16> = None;
    for off in from..h.qsize {
        if let Some(e) = valid(off) {
            if e.cid >> 8 != exclude_cn {
                best = Some(match best {
                    Some(b) if !ts_earlier(e.ts, b) => b,
                    _ => e.ts,
                });
            }
        }
    }
    best
}

impl CqlLock {
    pub fn new(id: LockId, addr: u64, layout: Layout) -> Self {
        Self { id, addr, layout }
    }

    pub fn entries_addr(&self) -> u64 {
        self.addr + 8
    }

    pub fn entry_addr(&self, slot: u64) -> u64 {
        self.entries_addr() + slot * QueueEntry::BYTES as u64
    }

    pub fn queue_len(&self) -> u64 {
        self.layout.capacity() * QueueEntry::BYTES as u64
    }

    /// One pass of enqueue-and-wait. No retry on abort or timeout.
    pub async fn acquire_attempt(&self, cl: &Client, mode: Mode, ts: u16) -> Attempt {
        let f = &cl.fabric;
        let node = &cl.node;
        if node.reset_pending(self.id).is_some() {
            return Attempt::Aborted;
        }
        let c0 = node.reset_count(self.id);
        let session = node.register(self.id, cl.port(), Phase::Acquiring);
        let delta = self.layout.faa_delta(mode.acquire_action());
        cl.count_acq_ops(1);
        cl.recorder().with_stats(|s| s.cql_acquires += 1);
        let comp = match f.post(FabricOp::faa(cl.src(), self.addr, delta, "cql.acquire")).await {
            Ok(c) => c,
            Err(_) => {
                node.deregister(session);
                return Attempt::Aborted;
            }
        };
        let old_word = comp.word();
        let known = old_word.wrapping_add(delta);
        let old = self.layout.decode(old_word);
        let (slot, version) = match AcquireOutcome::classify(&old, mode, &self.layout) {
            AcquireOutcome::Aborted => {
                node.deregister(session);
                return Attempt::Aborted;
            }
            AcquireOutcome::Holder => {
                node.set_phase(session, Phase::Holding);
                return Attempt::Granted(Granted {
                    seq: comp.seq,
                    notified: false,
                    remote_ts: None,
                    session,
                });
            }
            AcquireOutcome::Waiter { slot, version } => (slot, version),
        };
        if matches!(node.reset_pending(self.id), Some(p) if p.count > c0) {
            // The reset reinitializes the queue; the entry is never needed.
            node.deregister(session);
            return Attempt::Aborted;
        }
        let entry = QueueEntry {
            version,
            ts,
            cid: cl.cid,
            mode,
        };
        cl.count_acq_ops(1);
        let wrote = f
            .write(cl.src(), self.entry_addr(slot), entry.encode().to_vec(), "cql.entry")
            .await;
        if wrote.is_err() {
            node.deregister(session);
            return Attempt::Aborted;
        }
        node.set_phase(session, Phase::Waiting);
        if matches!(node.reset_pending(self.id), Some(p) if p.count > c0) {
            node.deregister(session);
            return Attempt::Aborted;
        }
        let deadline = f.now() + cl.env.acquisition_timeout;
        loop {
            let now = f.now();
            if now >= deadline {
                node.deregister(session);
                return Attempt::TimedOut { known };
            }
            match f.recv_timeout(cl.port(), deadline - now).await {
                None => {
                    node.deregister(session);
                    return Attempt::TimedOut { known };
                }
                Some((_, Message::Notify(n))) if n.lock == self.id => {
                    if reset::filter_notification(&n, node.reset_count(self.id)) == Filter::Drop {
                        continue;
                    }
                    node.set_phase(session, Phase::Holding);
                    return Attempt::Granted(Granted {
                        seq: comp.seq,
                        notified: true,
                        remote_ts: n.earliest_remote_ts,
                        session,
                    });
                }
                Some((_, Message::Abort { lock, reset_count })) if lock == self.id && reset_count > c0 => {
                    node.deregister(session);
                    return Attempt::Aborted;
                }
                Some(_) => {}
            }
        }
    }

    /// Acquires, waiting out resets and initiating one on timeout.
    pub async fn acquire(&self, cl: &Client, mode: Mode, ts: u16) -> Granted {
        loop {
            match self.acquire_attempt(cl, mode, ts).await {
                Attempt::Granted(g) => return g,
                Attempt::Aborted => {
                    cl.recorder().with_stats(|s| s.aborts += 1);
                    reset::await_reset_done(cl, self).await;
                }
                Attempt::TimedOut { known } => {
                    cl.recorder().with_stats(|s| s.timeouts += 1);
                    reset::reset_lock(cl, self, known, Occasion::Timeout).await;
                    reset::await_reset_done(cl, self).await;
                }
            }
        }
    }

    pub async fn release_attempt(&self, cl: &Client, session: u64, mode: Mode) -> ReleaseOutcome {
        let f = &cl.fabric;
        let node = &cl.node;
        let stamp = node.reset_count(self.id);
        node.set_phase(session, Phase::Releasing);
        let delta = self.layout.faa_delta(mode.release_action());
        let faa = f.post(FabricOp::faa(cl.src(), self.addr, delta, "cql.release"));
        let read = f.post(FabricOp::read(
            cl.src(),
            self.entries_addr(),
            self.queue_len(),
            "cql.release.read",
        ));
        let (faa, read) = futures::join!(faa, read);
        cl.recorder().with_stats(|s| s.cql_releases += 1);
        let (faa, read) = match (faa, read) {
            (Ok(a), Ok(b)) => (a, b),
            _ => {
                node.deregister(session);
                return ReleaseOutcome::Aborted;
            }
        };
        let old_word = faa.word();
        let known = old_word.wrapping_add(delta);
        let old = self.layout.decode(old_word);
        if old.reset_id != 0 || old.qsize == 0 {
            node.deregister(session);
            return ReleaseOutcome::Aborted;
        }
        if self.layout.slot_of(old.qhead, 1).1 == INITIAL_VERSION {
            node.deregister(session);
            return ReleaseOutcome::NeedsReset {
                occasion: Occasion::VersionOverflow,
                known,
            };
        }
        if old.qsize == 1 {
            node.deregister(session);
            return ReleaseOutcome::Done { notified: 0 };
        }
        let mut snap = read.bytes().to_vec();
        let deadline = f.now() + cl.env.acquisition_timeout;
        let mut rounds = 0u32;
        loop {
            let view = match resolve_queue(&snap, &old, &self.layout) {
                Ok(v) => v,
                Err(e) => {
                    node.deregister(session);
                    return ReleaseOutcome::NeedsReset {
                        occasion: e.occasion(),
                        known,
                    };
                }
            };
            let decision = view.decide(mode);
            match decision {
                Decision::Nobody => {
                    node.deregister(session);
                    return ReleaseOutcome::Done { notified: 0 };
                }
                Decision::Notify(offs) => {
                    for &off in &offs {
                        let SlotState::Valid(e) = view.at(off) else {
                            unreachable!("notify targets are valid")
                        };
                        let to = port_of_cid(e.cid);
                        let n = Notification {
                            lock: self.id,
                            grant_mode: e.mode,
                            reset_count: stamp,
                            earliest_remote_ts: view.earliest_remote(&offs, to.cn),
                        };
                        f.send(cl.cn(), to, Message::Notify(n));
                    }
                    cl.recorder().with_stats(|s| s.notifications += offs.len() as u64);
                    node.deregister(session);
                    return ReleaseOutcome::Done {
                        notified: offs.len() as u32,
                    };
                }
                Decision::Slots(_) | Decision::WholeQueue => {}
            }
            if node.reset_pending(self.id).is_some() {
                node.deregister(session);
                return ReleaseOutcome::Aborted;
            }
            if f.now() >= deadline {
                node.deregister(session);
                return ReleaseOutcome::NeedsReset {
                    occasion: Occasion::Timeout,
                    known,
                };
            }
            if rounds >= 8 {
                f.sleep(cl.env.poll_backoff.delay(rounds - 8)).await;
            }
            rounds += 1;
            match decision {
                Decision::Slots(offs) => {
                    let reads = offs.iter().map(|&off| {
                        let (slot, _) = self.layout.slot_of(old.qhead, off);
                        let fut = f.read(cl.src(), self.entry_addr(slot), 8, "cql.refetch");
                        async move { (slot, fut.await) }
                    });
                    let got = futures::future::join_all(reads).await;
                    cl.recorder().with_stats(|s| s.refetch_reads += got.len() as u64);
                    for (slot, r) in got {
                        if let Ok(b) = r {
                            let i = slot as usize * QueueEntry::BYTES;
                            snap[i..i + QueueEntry::BYTES].copy_from_slice(&b);
                        }
                    }
                }
                Decision::WholeQueue => {
                    cl.recorder().with_stats(|s| s.refetch_reads += 1);
                    if let Ok(b) = f
                        .read(cl.src(), self.entries_addr(), self.queue_len(), "cql.refetch")
                        .await
                    {
                        snap = b;
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    /// Releases, initiating a reset when the queue cannot be resolved.
    pub async fn release(&self, cl: &Client, session: u64, mode: Mode) -> ReleaseOutcome {
        let out = self.release_attempt(cl, session, mode).await;
        if let ReleaseOutcome::NeedsReset { occasion, known } = out {
            reset::reset_lock(cl, self, known, occasion).await;
        }
        out
    }

    /// Header and entries in one READ.
    pub async fn read_image(&self, cl: &Client, tag: &'static str) -> Option<Vec<u8>> {
        cl.fabric
            .read(cl.src(), self.addr, self.layout.lock_bytes(), tag)
            .await
            .ok()
    }
}
