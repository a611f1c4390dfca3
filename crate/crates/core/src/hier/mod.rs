//! Hierarchical locking: a per-CN local lock in front of every CQL lock,
//! so that at most one client per CN waits in the remote queue. Ownership
//! moves between local clients without MN traffic while no earlier remote
//! waiter is known.

mod local;
mod time;

pub use local::{select_share_set, select_successor, Fairness, LocalLock, LocalState, Waiter};
pub use time::{sync_round, ts_at, ts_earlier, SyncEpoch, TS_HALF};

use crate::checker::Via;
use crate::cql::{earliest_waiter_ts, LockId, Mode};
use crate::fabric::{Fabric, Message, Time};
use crate::node::{port_of_cid, Client, Node};

/// Readers admitted through the fast path per CQL ownership. Past this,
/// arriving readers queue and prefetch, which exposes remote waiters that
/// are older than the current shared phase.
pub const FAST_PATH_BUDGET: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HierGrant {
    /// CQL enqueue sequence when this client took the CQL lock, else 0.
    pub seq: u64,
    pub via: Via,
    pub ts: u16,
}

fn with_rec<R>(node: &Node, lock: LockId, f: impl FnOnce(&mut LocalLock) -> R) -> R {
    node.with_local(|t| f(t.entry(lock).or_default()))
}

enum Entry {
    Fast,
    Own,
    Wait { prefetch: bool },
}

pub async fn h_acquire(cl: &Client, lock: LockId, mode: Mode) -> HierGrant {
    let f = &cl.fabric;
    let node = &cl.node;
    let ts = node.ts_now(f.now());
    let now = f.now();
    let pending = node.reset_pending(lock).is_some();
    let entry = with_rec(node, lock, |l| {
        if mode == Mode::Shared
            && l.state == LocalState::Shared
            && l.cql_held
            && !l.acquiring
            && l.wq.is_empty()
            && l.prefetched_ts.is_none()
            && l.fast_grants < FAST_PATH_BUDGET
            && !pending
        {
            l.holder_cnt += 1;
            l.fast_grants += 1;
            Entry::Fast
        } else if l.state == LocalState::Free && !l.acquiring && l.wq.is_empty() {
            l.acquiring = true;
            Entry::Own
        } else {
            // A waiter whose mode differs from the held CQL mode cannot be
            // handed ownership locally, and a known remote timestamp
            // already precedes every newly arriving waiter.
            let prefetch = l.prefetched_ts.is_none() && !(l.cql_held && l.cql_mode != Some(mode));
            l.wq.push_back(Waiter {
                cid: cl.cid,
                mode,
                ts,
                arrived: now,
                prefetching: prefetch,
            });
            Entry::Wait { prefetch }
        }
    });
    match entry {
        Entry::Fast => {
            cl.recorder().with_stats(|s| s.fast_path += 1);
            return HierGrant {
                seq: 0,
                via: Via::FastPath,
                ts,
            };
        }
        Entry::Own => return take_ownership(cl, lock, mode, ts).await,
        Entry::Wait { prefetch } => {
            if prefetch {
                prefetch_remote(cl, lock).await;
            }
        }
    }

    let cql_held = loop {
        // Anything else on the port is left over from an aborted CQL wait.
        if let (_, Message::LocalGrant { lock: l, cql_held }) = f.recv(cl.port()).await {
            if l == lock {
                break cql_held;
            }
        }
    };
    if cql_held {
        HierGrant {
            seq: 0,
            via: Via::Local,
            ts,
        }
    } else {
        take_ownership(cl, lock, mode, ts).await
    }
}

/// Reads the remote queue once and folds its earliest foreign waiter into
/// the record's prefetched timestamp.
async fn prefetch_remote(cl: &Client, lock: LockId) {
    let node = &cl.node;
    let cql = cl.env.lock(lock);
    let image = cql.read_image(cl, "hier.prefetch").await;
    cl.count_acq_ops(1);
    cl.recorder().with_stats(|s| s.prefetch_reads += 1);
    let remote = image.and_then(|b| earliest_waiter_ts(&b, &cql.layout, cl.cn()));
    with_rec(node, lock, |l| {
        l.note_remote_ts(remote);
        if let Some(i) = l.position(cl.cid) {
            l.wq[i].prefetching = false;
        }
    });
    node.beacon().notify();
}

/// Acquires the CQL lock for this CN and, as a reader, shares it with the
/// local readers the fairness policy admits.
async fn take_ownership(cl: &Client, lock: LockId, mode: Mode, ts: u16) -> HierGrant {
    let g = cl.env.lock(lock).acquire(cl, mode, ts).await;
    let fairness = cl.env.fairness;
    let share = with_rec(&cl.node, lock, |l| {
        l.acquiring = false;
        l.cql_held = true;
        l.cql_mode = Some(mode);
        l.cql_session = Some(g.session);
        l.prefetched_ts = g.remote_ts;
        l.holder_cnt = 1;
        l.fast_grants = 0;
        l.state = mode.into();
        if mode == Mode::Shared {
            take_batch(l, fairness)
        } else {
            Vec::new()
        }
    });
    for &cid in &share {
        cl.fabric
            .send(cl.cn(), port_of_cid(cid), Message::LocalGrant { lock, cql_held: true });
    }
    HierGrant {
        seq: g.seq,
        via: if g.notified { Via::Notified } else { Via::Immediate },
        ts,
    }
}

/// Removes the readers admitted alongside a shared owner from `wq`.
fn take_batch(l: &mut LocalLock, fairness: Fairness) -> Vec<u16> {
    let idx = select_share_set(l.wq.make_contiguous(), fairness, l.prefetched_ts);
    let mut out = Vec::with_capacity(idx.len());
    for &i in idx.iter().rev() {
        out.push(l.wq.remove(i).expect("index from select_share_set").cid);
    }
    out.reverse();
    l.holder_cnt += out.len() as u32;
    out
}

enum Exit {
    StillHeld,
    Last { session: Option<u64>, mode: Option<Mode> },
    Successor(u16),
}

enum Handover {
    Local(Vec<u16>),
    Yield {
        to: u16,
        session: Option<u64>,
        mode: Option<Mode>,
    },
}

pub async fn h_release(cl: &Client, lock: LockId) {
    let node = &cl.node;
    let fairness = cl.env.fairness;
    let exit = with_rec(node, lock, |l| {
        l.holder_cnt = l.holder_cnt.saturating_sub(1);
        if l.holder_cnt > 0 {
            return Exit::StillHeld;
        }
        let released = match l.state {
            LocalState::Exclusive => Some(Mode::Exclusive),
            LocalState::Shared => Some(Mode::Shared),
            LocalState::Free => None,
        };
        match select_successor(l.wq.make_contiguous(), fairness, released) {
            Some(i) => Exit::Successor(l.wq[i].cid),
            None => {
                l.state = LocalState::Free;
                l.cql_held = false;
                Exit::Last {
                    session: l.cql_session.take(),
                    mode: l.cql_mode.take(),
                }
            }
        }
    });
    let to = match exit {
        Exit::StillHeld => return,
        Exit::Last { session, mode } => {
            release_cql(cl, lock, session, mode).await;
            node.with_local(|t| {
                if t.get(&lock).is_some_and(|l| l.is_idle()) {
                    t.remove(&lock);
                }
            });
            return;
        }
        Exit::Successor(cid) => cid,
    };

    // The successor's prefetch is a single READ issued on arrival.
    let n = node.clone();
    node.beacon()
        .wait_until(move || with_rec(&n, lock, |l| l.position(to).is_none_or(|i| !l.wq[i].prefetching)))
        .await;

    let pending = node.reset_pending(lock).is_some();
    let plan = with_rec(node, lock, |l| {
        let i = l.position(to).expect("successor leaves the queue only through us");
        let w = l.wq[i];
        let remote_first = l.prefetched_ts.is_some_and(|p| ts_earlier(p, w.ts));
        if l.cql_held && l.cql_mode == Some(w.mode) && !pending && !remote_first {
            l.wq.remove(i);
            l.holder_cnt = 1;
            l.state = w.mode.into();
            let mut batch = vec![w.cid];
            if w.mode == Mode::Shared {
                batch.extend(take_batch(l, fairness));
            }
            Handover::Local(batch)
        } else {
            l.wq.remove(i);
            l.state = LocalState::Free;
            l.cql_held = false;
            l.acquiring = true;
            Handover::Yield {
                to: w.cid,
                session: l.cql_session.take(),
                mode: l.cql_mode.take(),
            }
        }
    });
    match plan {
        Handover::Local(batch) => {
            cl.recorder().with_stats(|s| s.local_handovers += batch.len() as u64);
            for cid in batch {
                grant_local(cl, lock, cid, true);
            }
        }
        Handover::Yield { to, session, mode } => {
            // Our release FAA is posted within this step, ahead of the
            // successor's enqueue FAA.
            grant_local(cl, lock, to, false);
            release_cql(cl, lock, session, mode).await;
        }
    }
}

fn grant_local(cl: &Client, lock: LockId, cid: u16, cql_held: bool) {
    cl.fabric
        .send(cl.cn(), port_of_cid(cid), Message::LocalGrant { lock, cql_held });
}

async fn release_cql(cl: &Client, lock: LockId, session: Option<u64>, mode: Option<Mode>) {
    if let (Some(s), Some(m)) = (session, mode) {
        cl.env.lock(lock).release(cl, s, m).await;
    }
}

/// Periodic time synchronization for one CN. Keeps the previous epoch when
/// a round fails (for example because a CN died mid-round).
pub async fn run_sync(
    f: Fabric,
    node: Node,
    counter: u64,
    participants: u64,
    interval: Time,
    keep_going: impl Fn() -> bool,
) {
    while keep_going() {
        let started = f.now();
        if let Some(t) = sync_round(&f, node.cn(), counter, participants, interval / 2).await {
            node.set_epoch(t);
        }
        let next = started + interval;
        if f.now() < next {
            f.sleep(next - f.now()).await;
        }
    }
}
