//! Bit-exact codec for the 64-bit lock header.
//!
//! From the least-significant bit: `resetId[0..K) wcnt[K..K+N) qsize[K+N..K+2N)
//! qhead[K+2N..64)`. The queue capacity is `C = 2^(N-1)`, so qsize and wcnt
//! can count one full queue plus headroom that lets overflow be observed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("field {field} value {value} exceeds {bits} bits")]
    FieldOverflow { field: &'static str, value: u64, bits: u32 },
    #[error("invalid layout K={k} N={n}: {why}")]
    Invalid { k: u32, n: u32, why: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    /// Reset-id bits.
    pub k: u32,
    /// qsize / wcnt bits.
    pub n: u32,
}

impl Default for Layout {
    fn default() -> Self {
        Self { k: 8, n: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LockHeader {
    pub qhead: u64,
    pub qsize: u64,
    pub wcnt: u64,
    pub reset_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    AcqShared,
    AcqExclusive,
    RelReader,
    RelWriter,
}

impl Layout {
    pub fn new(k: u32, n: u32) -> Result<Self, LayoutError> {
        let l = Self { k, n };
        l.validate()?;
        Ok(l)
    }

    /// Smallest layout with reset-id width `k` whose capacity is at least `capacity`.
    pub fn for_capacity(k: u32, capacity: u64) -> Result<Self, LayoutError> {
        let c = capacity.max(2).next_power_of_two();
        Self::new(k, c.trailing_zeros() + 1)
    }

    pub fn validate(&self) -> Result<(), LayoutError> {
        let bad = |why| {
            Err(LayoutError::Invalid {
                k: self.k,
                n: self.n,
                why,
            })
        };
        if self.k == 0 || self.k > 16 {
            return bad("K must be in 1..=16");
        }
        if self.n < 2 {
            return bad("N must be >= 2");
        }
        // qhead must hold at least the slot index bits.
        if self.k + 2 * self.n + (self.n - 1) > 64 {
            return bad("fields exceed 64 bits");
        }
        Ok(())
    }

    pub fn capacity(&self) -> u64 {
        1 << (self.n - 1)
    }

    pub fn qhead_bits(&self) -> u32 {
        64 - self.k - 2 * self.n
    }

    /// Extra qhead bits beyond the slot index, i.e. the traversal counter width.
    pub fn extra_bits(&self) -> u32 {
        self.qhead_bits() - (self.n - 1)
    }

    pub fn max_cns(&self) -> u64 {
        (1 << self.k) - 1
    }

    fn wcnt_shift(&self) -> u32 {
        self.k
    }

    fn qsize_shift(&self) -> u32 {
        self.k + self.n
    }

    fn qhead_shift(&self) -> u32 {
        self.k + 2 * self.n
    }

    pub fn encode(&self, h: &LockHeader) -> Result<u64, LayoutError> {
        let check = |field, value: u64, bits: u32| {
            if bits < 64 && value >> bits != 0 {
                Err(LayoutError::FieldOverflow { field, value, bits })
            } else {
                Ok(value)
            }
        };
        let r = check("resetId", h.reset_id, self.k)?;
        let w = check("wcnt", h.wcnt, self.n)?;
        let s = check("qsize", h.qsize, self.n)?;
        let q = check("qhead", h.qhead, self.qhead_bits())?;
        Ok(r | w << self.wcnt_shift() | s << self.qsize_shift() | q << self.qhead_shift())
    }

    pub fn decode(&self, word: u64) -> LockHeader {
        let mask = |bits: u32| (1u64 << bits) - 1;
        LockHeader {
            reset_id: word & mask(self.k),
            wcnt: (word >> self.wcnt_shift()) & mask(self.n),
            qsize: (word >> self.qsize_shift()) & mask(self.n),
            qhead: word >> self.qhead_shift(),
        }
    }

    /// Wrapping addend applied by the FAA of each lock action.
    pub fn faa_delta(&self, action: Action) -> u64 {
        let one_qsize = 1u64 << self.qsize_shift();
        let one_wcnt = 1u64 << self.wcnt_shift();
        let one_qhead = 1u64 << self.qhead_shift();
        match action {
            Action::AcqShared => one_qsize,
            Action::AcqExclusive => one_qsize + one_wcnt,
            Action::RelReader => one_qhead.wrapping_sub(one_qsize),
            Action::RelWriter => one_qhead.wrapping_sub(one_qsize).wrapping_sub(one_wcnt),
        }
    }

    /// Slot index and expected entry version of queue position
    /// `qhead + offset`.
    pub fn slot_of(&self, qhead: u64, offset: u64) -> (u64, u16) {
        let abs = qhead.wrapping_add(offset) & ((1u64 << self.qhead_bits()) - 1);
        let c = self.capacity();
        (abs % c, (abs / c) as u16)
    }

    /// Traversal count (unwrapped version) of a queue position.
    pub fn traversal(&self, qhead: u64, offset: u64) -> u64 {
        let abs = qhead.wrapping_add(offset) & ((1u64 << self.qhead_bits()) - 1);
        abs / self.capacity()
    }

    /// Bytes occupied by the header plus all entries.
    pub fn lock_bytes(&self) -> u64 {
        8 * (1 + self.capacity())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent bitfield calculator: sets bits one at a time.
    fn oracle_pack(k: u32, n: u32, h: &LockHeader) -> u64 {
        let mut w = 0u64;
        let mut put = |v: u64, lo: u32, width: u32| {
            for b in 0..width {
                if v >> b & 1 == 1 {
                    w |= 1 << (lo + b);
                }
            }
        };
        put(h.reset_id, 0, k);
        put(h.wcnt, k, n);
        put(h.qsize, k + n, n);
        put(h.qhead, k + 2 * n, 64 - k - 2 * n);
        w
    }

    #[test]
    fn zero_word_decodes_to_free() {
        assert_eq!(Layout::default().decode(0), LockHeader::default());
    }

    #[test]
    fn qhead_one_is_bit_sixteen() {
        let l = Layout::default();
        assert_eq!(l.capacity(), 8);
        let h = LockHeader {
            qhead: 1,
            ..Default::default()
        };
        assert_eq!(l.encode(&h).unwrap(), 1 << 16);
        assert_eq!(oracle_pack(8, 4, &h), 1 << 16);
    }

    #[test]
    fn default_deltas() {
        let l = Layout::default();
        assert_eq!(l.faa_delta(Action::AcqShared), 0x1000);
        assert_eq!(l.faa_delta(Action::AcqExclusive), 0x1100);
        assert_eq!(l.faa_delta(Action::RelWriter), 0xEF00);
        assert_eq!(l.faa_delta(Action::RelReader), 0xF000);
    }

    #[test]
    fn encode_rejects_wide_fields() {
        let l = Layout::default();
        let h = LockHeader {
            qsize: 16,
            ..Default::default()
        };
        assert!(matches!(
            l.encode(&h),
            Err(LayoutError::FieldOverflow { field: "qsize", .. })
        ));
    }

    #[test]
    fn slot_examples() {
        let l = Layout::default();
        assert_eq!(l.slot_of(0, 0), (0, 0));
        assert_eq!(l.slot_of(7, 1), (0, 1));
        let q = 8 * (1u64 << 16) - 1;
        assert_eq!(l.slot_of(q, 1), (0, 0));
        assert_eq!(l.traversal(q, 1), 1 << 16);
    }

    #[test]
    fn layout_for_capacity() {
        assert_eq!(Layout::for_capacity(8, 8).unwrap(), Layout { k: 8, n: 4 });
        assert_eq!(Layout::for_capacity(8, 256).unwrap().capacity(), 256);
        assert_eq!(Layout::for_capacity(8, 9).unwrap().capacity(), 16);
        assert!(Layout::new(8, 1).is_err());
    }

    #[test]
    fn random_round_trip_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, n) in &[(8u32, 2u32), (8, 4), (8, 8), (4, 9)] {
            let l = Layout::new(k, n).unwrap();
            for _ in 0..20_000 {
                let h = LockHeader {
                    reset_id: rng.random_range(0..1u64 << k),
                    wcnt: rng.random_range(0..1u64 << n),
                    qsize: rng.random_range(0..1u64 << n),
                    qhead: rng.random::<u64>() >> (k + 2 * n),
                };
                let w = l.encode(&h).unwrap();
                assert_eq!(w, oracle_pack(k, n, &h));
                assert_eq!(l.decode(w), h);
            }
        }
    }
}
