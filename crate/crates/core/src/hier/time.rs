//! Synchronized 16-bit microsecond timestamps.

use crate::fabric::{Fabric, NodeId, Time, NS_PER_US};

pub const TS_HALF: u16 = 0x8000;

/// `(now - epoch)` in µs, truncated to 16 bits.
pub fn ts_at(now: Time, epoch: Time) -> u16 {
    (now.saturating_sub(epoch) / NS_PER_US) as u16
}

/// `a` precedes `b` under the half-window rule: when the raw values differ
/// by more than half of 65535, the larger value is the earlier one.
/// Distinct values are always ordered, including at a distance of exactly
/// 2^15, where the larger value wins.
pub fn ts_earlier(a: u16, b: u16) -> bool {
    let d = b.wrapping_sub(a);
    a != b && (d < TS_HALF || (d == TS_HALF && a > b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncEpoch {
    pub epoch_start: Time,
    pub interval: Time,
}

impl SyncEpoch {
    pub const DEFAULT_INTERVAL: Time = 1_000_000 * NS_PER_US;
}

/// One synchronization round against the MN counter at `counter`.
///
/// Every live CN adds one; the CN that completes the count writes zero;
/// everyone polls until the counter reads zero and records the time.
/// Returns `None` if the round does not finish by `timeout`.
pub async fn sync_round(f: &Fabric, cn: u16, counter: u64, participants: u64, timeout: Time) -> Option<Time> {
    let src = NodeId::Cn(cn);
    let deadline = f.now() + timeout;
    let old = f.faa(src, counter, 1, "sync.faa").await.ok()?;
    if old + 1 == participants {
        f.write(src, counter, vec![0; 8], "sync.zero").await.ok()?;
        return Some(f.now());
    }
    while f.now() < deadline {
        let b = f.read(src, counter, 8, "sync.poll").await.ok()?;
        if b.iter().all(|&x| x == 0) {
            return Some(f.now());
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comparator_examples() {
        assert!(ts_earlier(100, 200));
        assert!(!ts_earlier(200, 100));
        assert!(ts_earlier(65500, 10));
        assert!(!ts_earlier(10, 65500));
        assert!(!ts_earlier(7, 7));
    }

    #[test]
    fn half_window_boundary() {
        // 32768 apart is more than half of 65535, so the larger is earlier.
        assert!(!ts_earlier(0, 0x8000));
        assert!(ts_earlier(0x8000, 0));
        assert!(ts_earlier(0, 0x7FFF));
        assert!(!ts_earlier(0x7FFF, 0));
    }

    #[test]
    fn ts_wraps_after_65ms() {
        assert_eq!(ts_at(65_536 * NS_PER_US + 5_000, 0), 5);
        assert_eq!(ts_at(10, 20), 0);
    }
}
