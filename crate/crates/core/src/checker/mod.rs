//! Trace-driven oracles over grant intervals: mutual exclusion, liveness,
//! grant-order fairness and the cross-CN timestamp order of hierarchical
//! locking. Every check is a pure function of its input.

mod parse;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::cql::Mode;
use crate::fabric::Time;

pub use parse::{parse_trace, ParseError, ParsedTrace, ResetRecord};

/// How a client obtained ownership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Via {
    /// CQL holder straight from the enqueue FAA.
    Immediate,
    /// CQL waiter woken by a notification.
    Notified,
    /// Hierarchical handover inside a CN.
    Local,
    /// Hierarchical reader joining a shared holder without queueing.
    FastPath,
    Spin,
    Ticket,
}

impl Via {
    pub fn name(self) -> &'static str {
        match self {
            Via::Immediate => "immediate",
            Via::Notified => "notified",
            Via::Local => "local",
            Via::FastPath => "fastpath",
            Via::Spin => "spin",
            Via::Ticket => "ticket",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "immediate" => Via::Immediate,
            "notified" => Via::Notified,
            "local" => Via::Local,
            "fastpath" => Via::FastPath,
            "spin" => Via::Spin,
            "ticket" => Via::Ticket,
            _ => return None,
        })
    }

    pub fn is_hierarchical(self) -> bool {
        matches!(self, Via::Local | Via::FastPath)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrantEvent {
    pub lock: u32,
    pub client: u16,
    pub cn: u16,
    pub mode: Mode,
    pub t_request: Time,
    pub t_granted: Time,
    pub t_released: Option<Time>,
    /// MN service order of the FAA that enqueued (or drew the ticket for)
    /// this acquisition; 0 when ownership came from a local handover.
    pub enqueue_seq: u64,
    pub ts: Option<u16>,
    pub via: Via,
}

/// When each failed CN died.
pub type Failures = [(u16, Time)];

fn failed_at(failures: &Failures, cn: u16) -> Option<Time> {
    failures.iter().filter(|f| f.0 == cn).map(|f| f.1).min()
}

/// Effective holding interval `[start, end)`. A holder on a failed CN stops
/// holding when it dies; a grant never released holds until `end`.
fn interval(g: &GrantEvent, failures: &Failures, end: Time) -> (Time, Time) {
    let mut stop = g.t_released.unwrap_or(end);
    if let Some(t) = failed_at(failures, g.cn) {
        stop = stop.min(t);
    }
    (g.t_granted, stop.max(g.t_granted))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Overlap {
    pub lock: u32,
    /// Indices into the grant slice.
    pub first: usize,
    pub second: usize,
    pub at: Time,
}

/// Pairs of overlapping intervals on one lock where at least one side is a
/// writer. Intervals are half-open, so a grant at the instant of a release
/// does not conflict.
pub fn check_mutual_exclusion(grants: &[GrantEvent], failures: &Failures, end: Time) -> Vec<Overlap> {
    let mut by_lock: BTreeMap<u32, Vec<(Time, u8, usize)>> = BTreeMap::new();
    for (i, g) in grants.iter().enumerate() {
        let (s, e) = interval(g, failures, end);
        if s == e {
            continue;
        }
        let v = by_lock.entry(g.lock).or_default();
        // Releases (0) sort before grants (1) at equal times.
        v.push((s, 1, i));
        v.push((e, 0, i));
    }
    let mut out = Vec::new();
    for (lock, mut evs) in by_lock {
        evs.sort_unstable();
        let mut readers: Vec<usize> = Vec::new();
        let mut writers: Vec<usize> = Vec::new();
        for (t, kind, i) in evs {
            let set = match grants[i].mode {
                Mode::Shared => &mut readers,
                Mode::Exclusive => &mut writers,
            };
            if kind == 0 {
                if let Some(p) = set.iter().position(|&x| x == i) {
                    set.swap_remove(p);
                }
                continue;
            }
            let conflicts: Vec<usize> = match grants[i].mode {
                Mode::Shared => writers.clone(),
                Mode::Exclusive => readers.iter().chain(writers.iter()).copied().collect(),
            };
            for j in conflicts {
                out.push(Overlap {
                    lock,
                    first: j,
                    second: i,
                    at: t,
                });
            }
            match grants[i].mode {
                Mode::Shared => readers.push(i),
                Mode::Exclusive => writers.push(i),
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stuck {
    pub lock: u32,
    pub client: u16,
    pub t_request: Time,
    pub t_granted: Option<Time>,
}

/// Requests not granted by `horizon`. `pending` lists requests that were
/// never granted at all. Clients on failed CNs are exempt.
pub fn check_liveness(grants: &[GrantEvent], pending: &[GrantEvent], failures: &Failures, horizon: Time) -> Vec<Stuck> {
    let exempt = |g: &GrantEvent| failed_at(failures, g.cn).is_some();
    let late = grants
        .iter()
        .filter(|g| g.t_granted > horizon && !exempt(g))
        .map(|g| Stuck {
            lock: g.lock,
            client: g.client,
            t_request: g.t_request,
            t_granted: Some(g.t_granted),
        });
    let never = pending.iter().filter(|g| !exempt(g)).map(|g| Stuck {
        lock: g.lock,
        client: g.client,
        t_request: g.t_request,
        t_granted: None,
    });
    late.chain(never).collect()
}

struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Self(vec![0; n + 1])
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted indices `< i`.
    fn prefix(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Task-fair grant order: pairs granted out of enqueue order, where a run
/// of consecutive readers in enqueue order is one logical grant. Grants
/// without an enqueue sequence are ignored.
pub fn count_overtakes(grants: &[GrantEvent]) -> u64 {
    let mut by_lock: HashMap<u32, Vec<&GrantEvent>> = HashMap::new();
    for g in grants.iter().filter(|g| g.enqueue_seq != 0) {
        by_lock.entry(g.lock).or_default().push(g);
    }
    let mut total = 0;
    for (_, mut v) in by_lock {
        v.sort_by_key(|g| g.enqueue_seq);
        // Batch index per grant.
        let mut batch = Vec::with_capacity(v.len());
        let mut b = 0usize;
        for (i, g) in v.iter().enumerate() {
            if i > 0 && !(g.mode == Mode::Shared && v[i - 1].mode == Mode::Shared) {
                b += 1;
            }
            batch.push(b);
        }
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by_key(|&i| (v[i].t_granted, batch[i]));
        let mut fw = Fenwick::new(b + 1);
        for (seen, &i) in order.iter().enumerate() {
            // Earlier-granted entries from strictly later batches.
            total += seen as u64 - fw.prefix(batch[i] + 1);
            fw.add(batch[i]);
        }
    }
    total
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CrossCnReport {
    /// Writer pairs on different CNs, requested more than the skew bound
    /// apart, granted in the opposite order.
    pub overtakes: u64,
    /// The subset where the overtaking writer got ownership by a local
    /// handover inside its CN.
    pub local_overtakes: u64,
}

/// Cross-CN writer order for hierarchical locks. `skew` is the bound below
/// which two requests count as concurrent (twice the CN-MN latency).
pub fn check_cross_cn_writers(grants: &[GrantEvent], failures: &Failures, skew: Time) -> CrossCnReport {
    let mut by_lock: HashMap<u32, Vec<&GrantEvent>> = HashMap::new();
    for g in grants
        .iter()
        .filter(|g| g.mode == Mode::Exclusive && failed_at(failures, g.cn).is_none())
    {
        by_lock.entry(g.lock).or_default().push(g);
    }
    let mut rep = CrossCnReport::default();
    for (_, mut v) in by_lock {
        v.sort_by_key(|g| (g.t_request, g.t_granted));
        let mut times: Vec<Time> = v.iter().map(|g| g.t_granted).collect();
        times.sort_unstable();
        times.dedup();
        let rank = |t: Time| times.binary_search(&t).expect("grant time present");
        let n = times.len();
        let mut all = Fenwick::new(n);
        let mut per_cn: HashMap<u16, Fenwick> = HashMap::new();
        let mut inserted = 0u64;
        let mut per_cn_inserted: HashMap<u16, u64> = HashMap::new();
        let mut next = 0;
        for b in &v {
            // Admit every `a` requested more than `skew` before `b`.
            while next < v.len() && v[next].t_request + skew < b.t_request {
                let a = v[next];
                all.add(rank(a.t_granted));
                per_cn
                    .entry(a.cn)
                    .or_insert_with(|| Fenwick::new(n))
                    .add(rank(a.t_granted));
                inserted += 1;
                *per_cn_inserted.entry(a.cn).or_default() += 1;
                next += 1;
            }
            let r = rank(b.t_granted);
            // Admitted writers granted strictly after `b`.
            let later_all = inserted - all.prefix(r + 1);
            let later_same = match per_cn.get(&b.cn) {
                Some(f) => per_cn_inserted[&b.cn] - f.prefix(r + 1),
                None => 0,
            };
            let k = later_all - later_same;
            rep.overtakes += k;
            if b.via == Via::Local {
                rep.local_overtakes += k;
            }
        }
    }
    rep
}

/// Per lock: writer hold intervals and reader grants.
type PhaseView<'a> = (Vec<(Time, Time)>, Vec<&'a GrantEvent>);

/// Phase-fair check: readers still waiting when a writer released that
/// were granted only after the next writer.
pub fn count_phase_violations(grants: &[GrantEvent], failures: &Failures, end: Time) -> u64 {
    let mut locks: HashMap<u32, PhaseView> = HashMap::new();
    for g in grants {
        let e = locks.entry(g.lock).or_default();
        match g.mode {
            Mode::Exclusive => e.0.push(interval(g, failures, end)),
            Mode::Shared => e.1.push(g),
        }
    }
    let mut n = 0;
    for (_, (mut writers, readers)) in locks {
        writers.sort_unstable();
        for r in readers {
            if failed_at(failures, r.cn).is_some() {
                continue;
            }
            // First writer released after the reader asked.
            let i = writers.partition_point(|w| w.1 <= r.t_request);
            if i + 1 >= writers.len() {
                continue;
            }
            let (g1, r1) = writers[i];
            let g2 = writers[i + 1].0;
            if r.t_granted >= r1.max(g1) && g2 < r.t_granted {
                n += 1;
            }
        }
    }
    n
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Report {
    pub grants: usize,
    pub mutex_violations: usize,
    pub stuck: usize,
    pub overtakes: u64,
    pub cross_cn: CrossCnReport,
    pub phase_violations: u64,
}

impl Report {
    /// Safety and liveness failures. Fairness counts are reported only.
    pub fn has_violation(&self) -> bool {
        self.mutex_violations > 0 || self.stuck > 0
    }
}

pub fn full_report(
    grants: &[GrantEvent],
    pending: &[GrantEvent],
    failures: &Failures,
    end: Time,
    horizon: Time,
    skew: Time,
) -> Report {
    Report {
        grants: grants.len(),
        mutex_violations: check_mutual_exclusion(grants, failures, end).len(),
        stuck: check_liveness(grants, pending, failures, horizon).len(),
        overtakes: count_overtakes(grants),
        cross_cn: check_cross_cn_writers(grants, failures, skew),
        phase_violations: count_phase_violations(grants, failures, end),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(lock: u32, client: u16, mode: Mode, req: Time, grant: Time, rel: Time) -> GrantEvent {
        GrantEvent {
            lock,
            client,
            cn: client >> 8,
            mode,
            t_request: req,
            t_granted: grant,
            t_released: Some(rel),
            enqueue_seq: 0,
            ts: None,
            via: Via::Immediate,
        }
    }

    fn seq(mut e: GrantEvent, s: u64) -> GrantEvent {
        e.enqueue_seq = s;
        e
    }

    const X: Mode = Mode::Exclusive;
    const S: Mode = Mode::Shared;

    #[test]
    fn disjoint_writers_pass() {
        let v = [g(1, 0x100, X, 0, 0, 10), g(1, 0x101, X, 0, 10, 20)];
        assert!(check_mutual_exclusion(&v, &[], 100).is_empty());
    }

    #[test]
    fn overlapping_readers_pass() {
        let v = [g(1, 0x100, S, 0, 0, 10), g(1, 0x101, S, 0, 5, 20)];
        assert!(check_mutual_exclusion(&v, &[], 100).is_empty());
    }

    #[test]
    fn planted_writer_reader_overlap_is_flagged() {
        let v = [g(1, 0x100, X, 0, 0, 10), g(1, 0x101, S, 0, 9, 20)];
        let o = check_mutual_exclusion(&v, &[], 100);
        assert_eq!(o.len(), 1);
        assert_eq!((o[0].first, o[0].second, o[0].at), (0, 1, 9));
    }

    #[test]
    fn planted_writer_writer_overlap_on_same_lock_only() {
        let v = [
            g(1, 0x100, X, 0, 0, 10),
            g(2, 0x101, X, 0, 5, 20),
            g(1, 0x102, X, 0, 5, 6),
        ];
        assert_eq!(check_mutual_exclusion(&v, &[], 100).len(), 1);
    }

    #[test]
    fn unreleased_holder_blocks_until_end_unless_its_cn_failed() {
        let mut a = g(1, 0x100, X, 0, 0, 0);
        a.t_released = None;
        let b = g(1, 0x200, X, 0, 50, 60);
        assert_eq!(check_mutual_exclusion(&[a.clone(), b.clone()], &[], 100).len(), 1);
        assert!(check_mutual_exclusion(&[a, b], &[(1, 40)], 100).is_empty());
    }

    #[test]
    fn planted_lost_notification_is_stuck() {
        let done = [g(1, 0x100, X, 0, 0, 10)];
        let mut lost = g(1, 0x101, X, 5, 0, 0);
        lost.t_released = None;
        assert!(check_liveness(&done, &[], &[], 1000).is_empty());
        let s = check_liveness(&done, &[lost.clone()], &[], 1000);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].client, 0x101);
        // Exempt once its CN is known to have failed.
        assert!(check_liveness(&done, &[lost], &[(1, 3)], 1000).is_empty());
    }

    #[test]
    fn late_grant_counts_as_stuck() {
        let v = [g(1, 0x100, X, 0, 2000, 2100)];
        assert_eq!(check_liveness(&v, &[], &[], 1000).len(), 1);
    }

    #[test]
    fn in_order_grants_have_no_overtakes() {
        let v = [
            seq(g(1, 1, X, 0, 0, 10), 1),
            seq(g(1, 2, S, 0, 10, 20), 2),
            seq(g(1, 3, S, 0, 12, 20), 3),
            seq(g(1, 4, X, 0, 20, 30), 4),
        ];
        assert_eq!(count_overtakes(&v), 0);
    }

    #[test]
    fn readers_in_one_batch_may_reorder() {
        let v = [
            seq(g(1, 1, X, 0, 0, 10), 1),
            seq(g(1, 2, S, 0, 14, 20), 2),
            seq(g(1, 3, S, 0, 10, 20), 3),
        ];
        assert_eq!(count_overtakes(&v), 0);
    }

    #[test]
    fn planted_overtake_is_counted() {
        let v = [
            seq(g(1, 1, X, 0, 0, 10), 1),
            seq(g(1, 2, X, 0, 20, 30), 2),
            seq(g(1, 3, X, 0, 10, 20), 3),
            seq(g(1, 4, X, 0, 5, 6), 4),
        ];
        // 3 jumps 2; 4 jumps 2 and 3 (and is granted before 1 finishes
        // but after 1 was granted).
        assert_eq!(count_overtakes(&v), 3);
    }

    #[test]
    fn cross_cn_writer_order() {
        let mut a = g(1, 0x100, X, 0, 100, 110);
        let mut b = g(1, 0x200, X, 50, 60, 70);
        b.via = Via::Local;
        let rep = check_cross_cn_writers(&[a.clone(), b.clone()], &[], 10);
        assert_eq!(
            rep,
            CrossCnReport {
                overtakes: 1,
                local_overtakes: 1
            }
        );
        // Within the skew bound the two are concurrent.
        assert_eq!(check_cross_cn_writers(&[a.clone(), b.clone()], &[], 60).overtakes, 0);
        // Same CN: not a cross-CN pair.
        b.cn = 1;
        assert_eq!(check_cross_cn_writers(&[a.clone(), b.clone()], &[], 10).overtakes, 0);
        a.t_granted = 55;
        b.cn = 2;
        assert_eq!(check_cross_cn_writers(&[a, b], &[], 10).overtakes, 0);
    }

    #[test]
    fn planted_phase_violation() {
        let w1 = g(1, 1, X, 0, 0, 10);
        let w2 = g(1, 2, X, 0, 12, 20);
        let starved = g(1, 3, S, 5, 25, 30);
        let fine = g(1, 4, S, 5, 10, 12);
        assert_eq!(count_phase_violations(&[w1.clone(), w2.clone(), fine], &[], 100), 0);
        assert_eq!(count_phase_violations(&[w1, w2, starved], &[], 100), 1);
    }

    #[test]
    fn brute_force_overtakes_match() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(1..30);
            let v: Vec<GrantEvent> = (0..n)
                .map(|i| {
                    let m = if rng.random_bool(0.5) { S } else { X };
                    let t = rng.random_range(0..50);
                    seq(g(1, i as u16, m, 0, t, t + 1), i as u64 + 1)
                })
                .collect();
            // Oracle: pairwise comparison of batch indices.
            let mut batch = vec![0usize; v.len()];
            for i in 1..v.len() {
                let joined = v[i].mode == S && v[i - 1].mode == S;
                batch[i] = batch[i - 1] + usize::from(!joined);
            }
            let mut expect = 0;
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if batch[i] < batch[j] && v[j].t_granted < v[i].t_granted {
                        expect += 1;
                    }
                }
            }
            assert_eq!(count_overtakes(&v), expect);
        }
    }
}
