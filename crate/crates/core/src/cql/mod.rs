//! Queue-notify reader-writer lock: a 64-bit header updated by FAA on the
//! MN, a circular array of versioned waiter entries, and ownership
//! handover by direct CN-to-CN notification.

mod entry;
mod layout;
mod protocol;

use serde::{Deserialize, Serialize};

pub use entry::{version_newer, QueueEntry, INITIAL_VERSION};
pub use layout::{Action, Layout, LayoutError, LockHeader};
pub use protocol::{
    earliest_waiter_ts, resolve_queue, AcquireOutcome, Attempt, CqlLock, Granted, QueueView, ReleaseOutcome,
    ResolveError, SlotState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LockId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Shared = 0,
    Exclusive = 1,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Shared => "shared",
            Mode::Exclusive => "exclusive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shared" | "S" => Some(Mode::Shared),
            "exclusive" | "X" => Some(Mode::Exclusive),
            _ => None,
        }
    }

    pub fn acquire_action(self) -> Action {
        match self {
            Mode::Shared => Action::AcqShared,
            Mode::Exclusive => Action::AcqExclusive,
        }
    }

    pub fn release_action(self) -> Action {
        match self {
            Mode::Shared => Action::RelReader,
            Mode::Exclusive => Action::RelWriter,
        }
    }
}
