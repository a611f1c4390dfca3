use super::{BaselineError, BaselineGrant};
use crate::cql::Mode;
use crate::fabric::FabricOp;
use crate::node::Client;

/// Four counters in one word, 16 bits apart: reader tickets, writer
/// tickets, readers served, writers served. Each counter uses 15 bits; the
/// 16th bit catches the carry when a counter wraps, and the client whose
/// FAA caused the wrap clears it again, so no carry ever reaches the next
/// counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TicketWord {
    pub read_ticket: u16,
    pub write_ticket: u16,
    pub read_served: u16,
    pub write_served: u16,
}

const FIELD: u64 = 0x7FFF;
const SINK: u64 = 0x8000;
const RT: u32 = 0;
const WT: u32 = 16;
const RS: u32 = 32;
const WS: u32 = 48;

impl TicketWord {
    pub fn decode(w: u64) -> Self {
        let f = |s: u32| ((w >> s) & FIELD) as u16;
        Self {
            read_ticket: f(RT),
            write_ticket: f(WT),
            read_served: f(RS),
            write_served: f(WS),
        }
    }

    /// A reader waits for every earlier writer; a writer for everyone.
    pub fn admits(&self, mine: &TicketWord, mode: Mode) -> bool {
        match mode {
            Mode::Shared => self.write_served == mine.write_ticket,
            Mode::Exclusive => self.write_served == mine.write_ticket && self.read_served == mine.read_ticket,
        }
    }
}

/// Compensating addend when adding one at `shift` wraps the counter.
fn carry_fix(old: u64, shift: u32) -> Option<u64> {
    ((old >> shift) & FIELD == FIELD).then(|| (SINK << shift).wrapping_neg())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TicketLock {
    pub addr: u64,
}

impl TicketLock {
    pub fn new(addr: u64) -> Self {
        Self { addr }
    }

    async fn bump(&self, cl: &Client, shift: u32, tag: &'static str) -> Result<(u64, u64), BaselineError> {
        let f = &cl.fabric;
        let c = f
            .post(FabricOp::faa(cl.src(), self.addr, 1 << shift, tag))
            .await
            .map_err(|_| BaselineError::Fabric)?;
        let old = c.word();
        if let Some(fix) = carry_fix(old, shift) {
            f.faa(cl.src(), self.addr, fix, "ticket.carry")
                .await
                .map_err(|_| BaselineError::Fabric)?;
        }
        Ok((old, c.seq))
    }

    /// Draws a ticket and polls the served counters with truncated
    /// exponential backoff. A ticket cannot be handed back, so the wait
    /// never gives up; waits past the timeout are only counted.
    pub async fn acquire(&self, cl: &Client, mode: Mode) -> Result<BaselineGrant, BaselineError> {
        let f = &cl.fabric;
        let shift = match mode {
            Mode::Shared => RT,
            Mode::Exclusive => WT,
        };
        cl.count_acq_ops(1);
        let (old, seq) = self.bump(cl, shift, "ticket.draw").await?;
        let mine = TicketWord::decode(old);
        let deadline = f.now() + cl.env.acquisition_timeout;
        let mut now_word = mine;
        let mut retries = 0u64;
        // Backoff restarts whenever a poll shows the queue moved.
        let mut attempt = 0u32;
        let mut late = false;
        while !now_word.admits(&mine, mode) {
            f.sleep(cl.env.poll_backoff.delay(attempt)).await;
            cl.count_acq_ops(1);
            let b = f
                .read(cl.src(), self.addr, 8, "ticket.poll")
                .await
                .map_err(|_| BaselineError::Fabric)?;
            let w = TicketWord::decode(u64::from_le_bytes(b.try_into().expect("8 bytes")));
            let moved = (w.read_served, w.write_served) != (now_word.read_served, now_word.write_served);
            attempt = if moved { 0 } else { attempt.saturating_add(1).min(63) };
            now_word = w;
            retries += 1;
            if !late && f.now() > deadline {
                late = true;
                cl.recorder().with_stats(|s| s.baseline_timeouts += 1);
            }
        }
        cl.recorder().with_stats(|s| s.retries += retries);
        Ok(BaselineGrant { seq, retries })
    }

    pub async fn release(&self, cl: &Client, mode: Mode) -> Result<(), BaselineError> {
        let shift = match mode {
            Mode::Shared => RS,
            Mode::Exclusive => WS,
        };
        self.bump(cl, shift, "ticket.release").await.map(|_| ())
    }
}
