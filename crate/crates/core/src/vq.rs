//! Virtual queues.
//!
//! Two representations are provided:
//!
//! * [`ByteVq`] is the classic byte counter: a packet's size is added on
//!   enqueue and slightly less than its size is subtracted on dequeue, with a
//!   floor of zero.
//! * [`VirtualQueueState`] measures virtual sojourn time. It keeps the
//!   per-packet metadata (size, enqueue time) of packets that have already
//!   left the real queue, deleting it only once the slower virtual server has
//!   drained it. The timestamp of the virtual head then gives the virtual
//!   sojourn time, and the stored bit width of the enqueue-time backlog lets
//!   that sojourn be scaled by the ratio of virtual backlogs with a single
//!   shift.
//!
//! The service rate of the virtual link is `(1 - ε)` of the real one, with
//! ε = 2^-lge so that all rate arithmetic is a bit shift.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::queue::PacketMeta;
use crate::time::SimTime;

pub const DEFAULT_LGE: u8 = 6;
pub const MAX_LGE: u8 = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VqError {
    #[error("lge must be in 1..={MAX_LGE}, got {0}")]
    LgeOutOfRange(u8),
}

/// Sign of the per-packet ε adjustment applied when draining the virtual queue.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrainMode {
    /// Drain `s - (s >> lge)` per real packet: the virtual link is slower.
    #[default]
    ProseUnderDrain,
    /// Drain `s + (s >> lge)` per real packet, as written in the original
    /// dequeue pseudocode. Kept for side-by-side comparison only.
    LiteralPseudocode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VqParams {
    lge: u8,
    pub drain_mode: DrainMode,
    pub idle_drain: bool,
}

impl VqParams {
    pub fn new(lge: u8, drain_mode: DrainMode, idle_drain: bool) -> Result<Self, VqError> {
        if !(1..=MAX_LGE).contains(&lge) {
            return Err(VqError::LgeOutOfRange(lge));
        }
        Ok(VqParams {
            lge,
            drain_mode,
            idle_drain,
        })
    }

    pub fn lge(&self) -> u8 {
        self.lge
    }

    pub fn epsilon(&self) -> f64 {
        1.0 / f64::from(1u32 << self.lge)
    }

    /// Virtual bytes drained for `real` bytes served by the real link.
    pub fn virtual_size(&self, real: u64) -> u64 {
        match self.drain_mode {
            DrainMode::ProseUnderDrain => real - (real >> self.lge),
            DrainMode::LiteralPseudocode => real + (real >> self.lge),
        }
    }
}

impl Default for VqParams {
    fn default() -> Self {
        VqParams {
            lge: DEFAULT_LGE,
            drain_mode: DrainMode::ProseUnderDrain,
            idle_drain: true,
        }
    }
}

/// Number of significant bits in the 32-bit representation of `x`
/// (`32 - clz(x)`); backlogs beyond `u32::MAX` saturate.
pub fn bit_width(x: u64) -> u8 {
    let x = u32::try_from(x).unwrap_or(u32::MAX);
    (u32::BITS - x.leading_zeros()) as u8
}

/// Shift that approximates `deq_backlog / enq_backlog` as a power of two,
/// i.e. `clz(enq) - clz(deq)`. Zero when either backlog is zero.
pub fn clz_shift(enq_backlog: u64, deq_backlog: u64) -> i32 {
    width_shift(bit_width(enq_backlog), bit_width(deq_backlog))
}

fn width_shift(enq_width: u8, deq_width: u8) -> i32 {
    if enq_width == 0 || deq_width == 0 {
        0
    } else {
        i32::from(deq_width) - i32::from(enq_width)
    }
}

/// Sojourn scaled by the power-of-two approximation of the backlog ratio.
pub fn scale_sojourn_clz(sojourn: SimTime, enq_backlog: u64, deq_backlog: u64) -> SimTime {
    sojourn.scale_pow2(clz_shift(enq_backlog, deq_backlog))
}

/// Sojourn scaled by the exact backlog ratio (rounded down to a nanosecond).
pub fn scale_sojourn_exact(sojourn: SimTime, enq_backlog: u64, deq_backlog: u64) -> SimTime {
    if enq_backlog == 0 || deq_backlog == 0 {
        return sojourn;
    }
    let scaled = u128::from(sojourn.as_nanos()) * u128::from(deq_backlog) / u128::from(enq_backlog);
    SimTime::from_nanos(u64::try_from(scaled).unwrap_or(u64::MAX))
}

/// Bytes a link at `rate_bytes_per_sec` serves in `elapsed`, rounded down.
pub fn bytes_in(elapsed: SimTime, rate_bytes_per_sec: u64) -> u64 {
    let b = u128::from(elapsed.as_nanos()) * u128::from(rate_bytes_per_sec) / 1_000_000_000;
    u64::try_from(b).unwrap_or(u64::MAX)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteVq {
    vlen: u64,
    params: VqParams,
}

impl ByteVq {
    pub fn new(params: VqParams) -> Self {
        ByteVq { vlen: 0, params }
    }

    pub fn vlen(&self) -> u64 {
        self.vlen
    }

    pub fn params(&self) -> &VqParams {
        &self.params
    }

    pub fn on_enqueue(&mut self, size: u64) {
        self.vlen += size;
    }

    pub fn on_dequeue(&mut self, size: u64) {
        self.vlen = self.vlen.saturating_sub(self.params.virtual_size(size));
    }

    /// Drains already ε-adjusted virtual bytes.
    pub fn drain_virtual(&mut self, vbytes: u64) {
        self.vlen = self.vlen.saturating_sub(vbytes);
    }

    pub fn idle_virtual_drain(&mut self, elapsed: SimTime, link_rate_bytes_per_sec: u64) {
        let raw = bytes_in(elapsed, link_rate_bytes_per_sec);
        self.drain_virtual(self.params.virtual_size(raw));
    }
}

/// Virtual sojourn-time queue built from deferred metadata deletion.
///
/// `metas` spans from the virtual head to the tail. Entries at the front may
/// describe packets that have already left the real queue.
#[derive(Clone, Debug)]
pub struct VirtualQueueState {
    metas: VecDeque<PacketMeta>,
    /// Absolute index of `metas[0]` among all packets ever enqueued.
    vhead: u64,
    count_enq: u64,
    vcount_deq: u64,
    params: VqParams,
}

impl VirtualQueueState {
    pub fn new(params: VqParams) -> Self {
        VirtualQueueState {
            metas: VecDeque::new(),
            vhead: 0,
            count_enq: 0,
            vcount_deq: 0,
            params,
        }
    }

    pub fn params(&self) -> &VqParams {
        &self.params
    }

    pub fn vbacklog(&self) -> u64 {
        self.count_enq - self.vcount_deq
    }

    pub fn count_enq(&self) -> u64 {
        self.count_enq
    }

    pub fn vcount_deq(&self) -> u64 {
        self.vcount_deq
    }

    pub fn vhead(&self) -> u64 {
        self.vhead
    }

    pub fn tail(&self) -> u64 {
        self.vhead + self.metas.len() as u64
    }

    pub fn head_meta(&self) -> Option<&PacketMeta> {
        self.metas.front()
    }

    pub fn metas(&self) -> impl Iterator<Item = &PacketMeta> {
        self.metas.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.vbacklog() == 0
    }

    pub fn vsojourn_on_enqueue(&mut self, size: u64, now: SimTime) {
        let width = bit_width(self.vbacklog());
        self.metas.push_back(PacketMeta {
            size,
            enq_time: now,
            vbacklog_enq_width: width,
        });
        self.count_enq += size;
    }

    pub fn virtual_sojourn(&self, now: SimTime) -> SimTime {
        if self.is_empty() {
            return SimTime::ZERO;
        }
        self.metas
            .front()
            .map_or(SimTime::ZERO, |m| now.saturating_sub(m.enq_time))
    }

    pub fn scaled_virtual_sojourn(&self, now: SimTime) -> SimTime {
        let vtsojourn = self.virtual_sojourn(now);
        let Some(head) = self.metas.front() else {
            return vtsojourn;
        };
        let shift = width_shift(head.vbacklog_enq_width, bit_width(self.vbacklog()));
        vtsojourn.scale_pow2(shift)
    }

    /// Dequeues the virtual counterpart of a real packet of `real_size`.
    pub fn vsojourn_on_dequeue(&mut self, real_size: u64) {
        let vs = self.params.virtual_size(real_size);
        self.drain(vs);
    }

    /// Idle drain for a real queue that stayed empty during `elapsed`.
    pub fn idle_virtual_drain(&mut self, elapsed: SimTime, link_rate_bytes_per_sec: u64) {
        let raw = bytes_in(elapsed, link_rate_bytes_per_sec);
        self.drain(self.params.virtual_size(raw));
    }

    /// Removes `vs` virtual bytes from the head, floored at empty.
    pub fn drain(&mut self, mut vs: u64) {
        let backlog = self.vbacklog();
        if vs >= backlog {
            self.vcount_deq += backlog;
            self.vhead += self.metas.len() as u64;
            self.metas.clear();
            return;
        }
        self.vcount_deq += vs;
        // vs < backlog, so the loop always stops on an existing entry
        while vs > self.metas[0].size {
            vs -= self.metas[0].size;
            self.metas.pop_front();
            self.vhead += 1;
        }
        self.metas[0].size -= vs;
    }

    pub fn check_invariants(&self) {
        let sum: u64 = self.metas.iter().map(|m| m.size).sum();
        assert_eq!(sum, self.vbacklog(), "virtual backlog/meta mismatch");
        assert!(self.vhead <= self.tail());
    }
}
