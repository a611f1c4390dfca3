//! MN-NIC cost model: a FIFO token bucket over weighted ops followed by a
//! bandwidth-limited wire.

use super::Time;

/// Token units per weight unit; one ns of refill adds `capacity` units.
const UNITS_PER_WEIGHT: u128 = 1_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Service {
    /// When the op executes against MN memory.
    pub start: Time,
    /// When the response leaves the MN.
    pub depart: Time,
}

#[derive(Debug, Clone)]
pub struct Nic {
    capacity: u128,
    burst: u128,
    tokens: u128,
    last: Time,
    wire_free: Time,
    bandwidth: f64,
    served_weight: u64,
    queued_ns: u128,
}

impl Nic {
    /// `capacity` in weighted ops per second, `burst` in weight units,
    /// `bandwidth` in bytes per second.
    pub fn new(capacity: f64, burst: u32, bandwidth: f64) -> Self {
        let burst = burst as u128 * UNITS_PER_WEIGHT;
        Self {
            capacity: (capacity.round() as u128).max(1),
            burst,
            tokens: burst,
            last: 0,
            wire_free: 0,
            bandwidth,
            served_weight: 0,
            queued_ns: 0,
        }
    }

    /// Admits one op arriving at `arrival`. Arrivals must be presented in
    /// non-decreasing time order; service is FIFO.
    pub fn admit(&mut self, arrival: Time, weight: u32, bytes: u64) -> Service {
        let cost = weight as u128 * UNITS_PER_WEIGHT;
        let mut start = arrival.max(self.last);
        let mut tokens = self
            .burst
            .min(self.tokens + (start - self.last) as u128 * self.capacity);
        if tokens < cost {
            let wait = (cost - tokens).div_ceil(self.capacity);
            start += wait as Time;
            tokens = self.burst.min(tokens + wait * self.capacity);
        }
        self.tokens = tokens - cost;
        self.last = start;
        self.served_weight += weight as u64;
        self.queued_ns += (start - arrival) as u128;

        let transfer = (bytes as f64 * 1e9 / self.bandwidth).ceil() as Time;
        let depart = start.max(self.wire_free) + transfer;
        self.wire_free = depart;
        Service { start, depart }
    }

    pub fn served_weight(&self) -> u64 {
        self.served_weight
    }

    /// Fraction of the NIC's weighted capacity consumed over `elapsed` ns.
    pub fn utilization(&self, elapsed: Time) -> f64 {
        if elapsed == 0 {
            return 0.0;
        }
        self.served_weight as f64 * UNITS_PER_WEIGHT as f64 / (self.capacity as f64 * elapsed as f64)
    }

    /// Resets the bucket to full, as after an MN restart.
    pub fn refill(&mut self, now: Time) {
        self.tokens = self.burst;
        self.last = self.last.max(now);
        self.wire_free = self.wire_free.max(now);
    }
}
