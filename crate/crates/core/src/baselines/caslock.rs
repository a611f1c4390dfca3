use super::{BaselineError, BaselineGrant};
use crate::cql::Mode;
use crate::fabric::FabricOp;
use crate::node::Client;

const WRITER_MASK: u64 = 0xFFFF;
const READER_ONE: u64 = 1 << 16;

/// One 64-bit word: the holding writer's client id in the low 16 bits,
/// the reader count above it. Zero means free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CasLock {
    pub addr: u64,
}

pub fn writer_of(word: u64) -> u16 {
    (word & WRITER_MASK) as u16
}

pub fn readers_of(word: u64) -> u64 {
    word >> 16
}

impl CasLock {
    pub fn new(addr: u64) -> Self {
        Self { addr }
    }

    /// Writers retry `CAS(0 -> cid)` back to back. Readers add themselves
    /// with an FAA and back out again if a writer holds the word, so
    /// readers never conflict with each other. Both retry until success or
    /// the acquisition timeout.
    pub async fn acquire(&self, cl: &Client, mode: Mode) -> Result<BaselineGrant, BaselineError> {
        let f = &cl.fabric;
        let deadline = f.now() + cl.env.acquisition_timeout;
        let mut retries = 0u64;
        // Arrival order at the MN: the service sequence of the first attempt.
        let mut first_seq = None;
        loop {
            cl.count_acq_ops(1);
            let op = match mode {
                Mode::Exclusive => FabricOp::cas(cl.src(), self.addr, 0, cl.cid as u64, "caslock.cas"),
                Mode::Shared => FabricOp::faa(cl.src(), self.addr, READER_ONE, "caslock.join"),
            };
            let c = f.post(op).await.map_err(|_| BaselineError::Fabric)?;
            let old = c.word();
            let seq = *first_seq.get_or_insert(c.seq);
            let won = match mode {
                Mode::Exclusive => old == 0,
                Mode::Shared => writer_of(old) == 0,
            };
            if won {
                cl.recorder().with_stats(|s| s.retries += retries);
                return Ok(BaselineGrant { seq, retries });
            }
            if mode == Mode::Shared {
                cl.count_acq_ops(1);
                f.faa(cl.src(), self.addr, READER_ONE.wrapping_neg(), "caslock.leave")
                    .await
                    .map_err(|_| BaselineError::Fabric)?;
            }
            retries += 1;
            if f.now() >= deadline {
                cl.recorder().with_stats(|s| {
                    s.retries += retries;
                    s.baseline_timeouts += 1;
                });
                return Err(BaselineError::TimedOut { retries });
            }
        }
    }

    pub async fn release(&self, cl: &Client, mode: Mode) -> Result<(), BaselineError> {
        // FAA rather than a WRITE of zero: readers that are backing out may
        // still have their increment in the word.
        let delta = match mode {
            Mode::Shared => READER_ONE.wrapping_neg(),
            Mode::Exclusive => (cl.cid as u64).wrapping_neg(),
        };
        cl.fabric
            .faa(cl.src(), self.addr, delta, "caslock.release")
            .await
            .map(|_| ())
            .map_err(|_| BaselineError::Fabric)
    }
}
