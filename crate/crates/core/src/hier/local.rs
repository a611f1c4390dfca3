//! Per-CN local lock record and the pure policy helpers over its wait queue.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::ts_earlier;
use crate::cql::Mode;
use crate::fabric::Time;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fairness {
    #[default]
    #[serde(alias = "tf", alias = "taskfair")]
    TaskFair,
    #[serde(alias = "pf", alias = "phasefair")]
    PhaseFair,
}

impl Fairness {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tf" | "taskfair" => Some(Fairness::TaskFair),
            "pf" | "phasefair" => Some(Fairness::PhaseFair),
            _ => None,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Fairness::TaskFair => "tf",
            Fairness::PhaseFair => "pf",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LocalState {
    #[default]
    Free,
    Shared,
    Exclusive,
}

impl From<Mode> for LocalState {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Shared => LocalState::Shared,
            Mode::Exclusive => LocalState::Exclusive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Waiter {
    pub cid: u16,
    pub mode: Mode,
    pub ts: u16,
    pub arrived: Time,
    /// The remote-queue prefetch started by this waiter is still in flight.
    pub prefetching: bool,
}

#[derive(Debug, Clone, Default)]
pub struct LocalLock {
    pub state: LocalState,
    pub holder_cnt: u32,
    pub cql_held: bool,
    pub cql_mode: Option<Mode>,
    pub cql_session: Option<u64>,
    /// An owner is acquiring the CQL lock on behalf of this CN.
    pub acquiring: bool,
    pub wq: VecDeque<Waiter>,
    pub prefetched_ts: Option<u16>,
    /// Readers admitted without queueing since the CQL lock was taken.
    pub fast_grants: u32,
}

impl LocalLock {
    pub fn is_idle(&self) -> bool {
        self.state == LocalState::Free
            && self.wq.is_empty()
            && !self.acquiring
            && !self.cql_held
            && self.holder_cnt == 0
    }

    pub fn note_remote_ts(&mut self, ts: Option<u16>) {
        if let Some(t) = ts {
            self.prefetched_ts = Some(match self.prefetched_ts {
                Some(p) if !ts_earlier(t, p) => p,
                _ => t,
            });
        }
    }

    pub fn has_waiting_writer(&self) -> bool {
        self.wq.iter().any(|w| w.mode == Mode::Exclusive)
    }

    pub fn position(&self, cid: u16) -> Option<usize> {
        self.wq.iter().position(|w| w.cid == cid)
    }
}

/// Readers that may join a shared owner.
///
/// Task-fair takes the longest prefix of readers whose timestamps precede
/// the earliest remote waiter, stopping at the first writer. Phase-fair
/// takes every waiting reader.
pub fn select_share_set(wq: &[Waiter], policy: Fairness, remote_ts: Option<u16>) -> Vec<usize> {
    match policy {
        Fairness::TaskFair => wq
            .iter()
            .take_while(|w| w.mode == Mode::Shared && remote_ts.is_none_or(|r| ts_earlier(w.ts, r)))
            .enumerate()
            .map(|(i, _)| i)
            .collect(),
        Fairness::PhaseFair => wq
            .iter()
            .enumerate()
            .filter(|(_, w)| w.mode == Mode::Shared)
            .map(|(i, _)| i)
            .collect(),
    }
}

/// Waiter that receives ownership when the last holder leaves.
pub fn select_successor(wq: &[Waiter], policy: Fairness, released: Option<Mode>) -> Option<usize> {
    if wq.is_empty() {
        return None;
    }
    match (policy, released) {
        (Fairness::PhaseFair, Some(Mode::Exclusive)) => {
            Some(wq.iter().position(|w| w.mode == Mode::Shared).unwrap_or(0))
        }
        _ => Some(0),
    }
}
