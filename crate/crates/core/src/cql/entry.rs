use super::Mode;

/// Version stamped into freshly initialized entries.
pub const INITIAL_VERSION: u16 = 0xFFFF;

/// One 8-byte queue slot: version, timestamp, cid (u16 each, little-endian),
/// then mode and a reserved byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueEntry {
    pub version: u16,
    pub ts: u16,
    pub cid: u16,
    pub mode: Mode,
}

impl QueueEntry {
    pub const BYTES: usize = 8;

    pub fn encode(&self) -> [u8; 8] {
        let mut b = [0u8; 8];
        b[0..2].copy_from_slice(&self.version.to_le_bytes());
        b[2..4].copy_from_slice(&self.ts.to_le_bytes());
        b[4..6].copy_from_slice(&self.cid.to_le_bytes());
        b[6] = self.mode as u8;
        b
    }

    pub fn decode(b: &[u8]) -> Self {
        let u = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
        Self {
            version: u(0),
            ts: u(2),
            cid: u(4),
            mode: if b[6] == 1 { Mode::Exclusive } else { Mode::Shared },
        }
    }

    /// Fill pattern for a region of initialized entries.
    pub fn initial_pattern() -> Vec<u8> {
        let mut p = vec![0u8; 8];
        p[0..2].copy_from_slice(&INITIAL_VERSION.to_le_bytes());
        p
    }
}

/// Half-window wraparound order on 16-bit counters: `a` is strictly newer
/// than `b` when it is ahead by less than 2^15.
pub fn version_newer(a: u16, b: u16) -> bool {
    a != b && a.wrapping_sub(b) < 0x8000
}
