//! Comparison locks: a reader-writer CAS spinlock and a reader-writer
//! ticket lock with truncated exponential backoff.

mod caslock;
mod ticket;

use thiserror::Error;

pub use caslock::{readers_of, writer_of, CasLock};
pub use ticket::{TicketLock, TicketWord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineGrant {
    /// MN service sequence of the first CAS attempt or of the ticket FAA.
    pub seq: u64,
    /// Failed CAS attempts or served-counter polls.
    pub retries: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum BaselineError {
    #[error("gave up after {retries} retries")]
    TimedOut { retries: u64 },
    #[error("memory node unreachable")]
    Fabric,
}
