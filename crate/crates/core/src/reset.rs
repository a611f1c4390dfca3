//! Lock reset: stuck-lock detection, the CAS-guarded three-step procedure,
//! per-CN reset counters, and the expired-notification filter.

use futures::future::{select, Either};
use std::collections::BTreeSet;

use crate::cql::{version_newer, CqlLock, LockId, QueueEntry, INITIAL_VERSION};
use crate::fabric::{Fabric, Message, NodeId, Notification, Port, Time, TraceEvent};
use crate::node::{Client, Node, PendingReset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Occasion {
    Overwrite,
    VersionOverflow,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    Entry { fetched: u16, expected: u16 },
    Computed(u16),
    Waited { waited: Time, timeout: Time },
}

pub fn detect_occasion(obs: Observation) -> Option<Occasion> {
    match obs {
        Observation::Entry { fetched, expected } => {
            (fetched != INITIAL_VERSION && version_newer(fetched, expected)).then_some(Occasion::Overwrite)
        }
        Observation::Computed(v) => (v == INITIAL_VERSION).then_some(Occasion::VersionOverflow),
        Observation::Waited { waited, timeout } => (waited > timeout).then_some(Occasion::Timeout),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filter {
    Deliver,
    Drop,
}

/// A notification built before the latest reset this CN has seen is stale.
pub fn filter_notification(n: &Notification, local: u32) -> Filter {
    if n.reset_count < local {
        Filter::Drop
    } else {
        Filter::Deliver
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Begin {
    Won,
    Lost,
}

fn trace_phase(f: &Fabric, lock: LockId, phase: &str, cn: u16) {
    f.trace_with(|t| TraceEvent {
        t,
        node: format!("cn{cn}"),
        kind: "RESET".into(),
        lock_id: Some(lock.0),
        phase: Some(phase.into()),
        cn: Some(cn),
        ..Default::default()
    });
}

fn reset_id_mask(lock: &CqlLock) -> u64 {
    (1u64 << lock.layout.k) - 1
}

/// Step 1: claim the reset by installing this CN's id in the header.
/// An id left behind by a failed CN is taken over.
pub async fn try_begin_reset(cl: &Client, lock: &CqlLock, known: u64) -> Begin {
    let f = &cl.fabric;
    let mask = reset_id_mask(lock);
    let mut expected = known;
    loop {
        let owner = (expected & mask) as u16;
        if owner != 0 && (owner == cl.cn() || !f.is_failed(NodeId::Cn(owner))) {
            return Begin::Lost;
        }
        let want = (expected & !mask) | cl.cn() as u64;
        let old = match f.cas(cl.src(), lock.addr, expected, want, "reset.cas").await {
            Ok(o) => o,
            Err(_) => return Begin::Lost,
        };
        if old == expected {
            trace_phase(f, lock.id, "begin", cl.cn());
            return Begin::Won;
        }
        expected = old;
    }
}

/// Steps 2 and 3, run by the client that won step 1.
pub async fn execute_reset(cl: &Client, lock: &CqlLock) {
    let f = &cl.fabric;
    let t0 = f.now();
    let count = cl.node.reset_count(lock.id) + 1;
    let me = cl.reset_port();
    let mut awaiting: BTreeSet<u16> = (1..=cl.env.num_cns)
        .filter(|&cn| !f.is_failed(NodeId::Cn(cn)))
        .collect();
    trace_phase(f, lock.id, "signal", cl.cn());
    for &cn in &awaiting {
        f.send(
            cl.cn(),
            Port::agent(cn),
            Message::ResetSignal {
                lock: lock.id,
                reset_count: count,
                initiator: me,
            },
        );
    }
    loop {
        while let Some((_, m)) = f.take_matching(
            me,
            |m| matches!(m, Message::ResetAck { lock: l, reset_count, .. } if *l == lock.id && *reset_count == count),
        ) {
            if let Message::ResetAck { cn, .. } = m {
                awaiting.remove(&cn);
            }
        }
        awaiting.retain(|&cn| !f.is_failed(NodeId::Cn(cn)));
        if awaiting.is_empty() {
            break;
        }
        let epoch = f.failure_epoch();
        let got = select(f.recv(me), f.failure_change(epoch)).await;
        if let Either::Left((
            (
                _,
                Message::ResetAck {
                    lock: l,
                    reset_count,
                    cn,
                },
            ),
            _,
        )) = got
        {
            if l == lock.id && reset_count == count {
                awaiting.remove(&cn);
            }
        }
    }
    trace_phase(f, lock.id, "ack", cl.cn());

    // Step 3: entries first, then the header, with a probe of the result.
    let init = QueueEntry::initial_pattern().repeat(lock.layout.capacity() as usize);
    let max = f.config().max_io_len;
    for (i, chunk) in init.chunks(max).enumerate() {
        let _ = f
            .write(
                cl.src(),
                lock.entries_addr() + (i * max) as u64,
                chunk.to_vec(),
                "reset.entries",
            )
            .await;
    }
    let probe_len = lock.layout.lock_bytes().min(max as u64);
    let probe = f
        .post(
            crate::fabric::FabricOp::write(cl.src(), lock.addr, vec![0; 8], "reset.header")
                .with_probe(lock.addr, probe_len),
        )
        .await;
    let ok = match probe.ok().and_then(|c| c.probe) {
        Some(img) => post_reset_ok(&img),
        None => false,
    };
    cl.recorder().with_stats(|s| {
        s.resets_done += 1;
        s.reset_latency.push(f.now() - t0);
        if !ok {
            s.reset_verify_failures += 1;
        }
    });
    trace_phase(f, lock.id, "done", cl.cn());
}

/// Header zero and every entry at the initial version.
pub fn post_reset_ok(image: &[u8]) -> bool {
    image[0..8].iter().all(|&b| b == 0)
        && image[8..]
            .chunks(QueueEntry::BYTES)
            .all(|e| QueueEntry::decode(e).version == INITIAL_VERSION)
}

/// Runs a full reset if this client wins step 1.
pub async fn reset_lock(cl: &Client, lock: &CqlLock, known: u64, occasion: Occasion) -> Begin {
    cl.recorder().with_stats(|s| match occasion {
        Occasion::Overwrite => s.overwrites += 1,
        Occasion::VersionOverflow => s.version_overflows += 1,
        Occasion::Timeout => {}
    });
    match try_begin_reset(cl, lock, known).await {
        Begin::Won => {
            cl.recorder().with_stats(|s| s.resets_won += 1);
            execute_reset(cl, lock).await;
            Begin::Won
        }
        Begin::Lost => {
            cl.recorder().with_stats(|s| s.resets_lost += 1);
            Begin::Lost
        }
    }
}

/// Polls the header with backoff until no reset is in progress, taking the
/// reset over if its owner has failed.
pub async fn await_reset_done(cl: &Client, lock: &CqlLock) {
    let f = &cl.fabric;
    let mask = reset_id_mask(lock);
    let mut attempt = 0;
    loop {
        f.sleep(cl.env.poll_backoff.delay(attempt)).await;
        attempt += 1;
        cl.count_acq_ops(1);
        let Ok(word) = f
            .read(cl.src(), lock.addr, 8, "reset.poll")
            .await
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        else {
            continue;
        };
        let owner = (word & mask) as u16;
        if owner == 0 {
            return;
        }
        if f.is_failed(NodeId::Cn(owner)) {
            reset_lock(cl, lock, word, Occasion::Timeout).await;
            attempt = 0;
        }
    }
}

/// Agent side of step 2: adopt the new counter, abort local waiters, and
/// acknowledge once no local client is inside the lock.
pub fn on_signal(fabric: &Fabric, node: &Node, lock: LockId, count: u32, initiator: Port) {
    node.raise_reset_count(lock, count);
    let fresh = node.set_pending(lock, PendingReset { count, initiator });
    for p in node.waiting_ports(lock) {
        fabric.send(
            node.cn(),
            p,
            Message::Abort {
                lock,
                reset_count: count,
            },
        );
    }
    if !fresh {
        return;
    }
    let f = fabric.clone();
    let n = node.clone();
    fabric.spawn(Some(node.id()), async move {
        let nn = n.clone();
        n.beacon().wait_until(move || nn.sessions_on(lock) == 0).await;
        if let Some(p) = n.clear_pending(lock) {
            f.send(
                n.cn(),
                p.initiator,
                Message::ResetAck {
                    lock,
                    reset_count: p.count,
                    cn: n.cn(),
                },
            );
            trace_phase(&f, lock, "ack", n.cn());
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cql::Mode;

    fn note(rc: u32) -> Notification {
        Notification {
            lock: LockId(1),
            grant_mode: Mode::Shared,
            reset_count: rc,
            earliest_remote_ts: None,
        }
    }

    #[test]
    fn filter_rules() {
        assert_eq!(filter_notification(&note(2), 2), Filter::Deliver);
        assert_eq!(filter_notification(&note(1), 2), Filter::Drop);
        assert_eq!(filter_notification(&note(3), 2), Filter::Deliver);
    }

    #[test]
    fn occasions() {
        assert_eq!(
            detect_occasion(Observation::Entry {
                fetched: 3,
                expected: 2
            }),
            Some(Occasion::Overwrite)
        );
        assert_eq!(
            detect_occasion(Observation::Entry {
                fetched: 1,
                expected: 2
            }),
            None
        );
        assert_eq!(
            detect_occasion(Observation::Computed(0xFFFF)),
            Some(Occasion::VersionOverflow)
        );
        assert_eq!(
            detect_occasion(Observation::Waited {
                waited: 9_000,
                timeout: 10_000_000
            }),
            None
        );
        assert_eq!(
            detect_occasion(Observation::Waited {
                waited: 10_000_001,
                timeout: 10_000_000
            }),
            Some(Occasion::Timeout)
        );
    }

    #[test]
    fn post_reset_image_check() {
        let mut img = vec![0u8; 8];
        img.extend(QueueEntry::initial_pattern().repeat(4));
        assert!(post_reset_ok(&img));
        img[9] = 0;
        assert!(!post_reset_ok(&img));
    }
}
