//! Piecewise-constant link rate profile.

use thiserror::Error;

use crate::time::SimTime;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LinkError {
    #[error("link profile has no segments")]
    Empty,
    #[error("first link segment must start at 0")]
    FirstNotAtZero,
    #[error("link segment {0} does not start after the previous one")]
    NotIncreasing(usize),
    #[error("link segment {0} has zero rate")]
    ZeroRate(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkSegment {
    pub start: SimTime,
    pub rate_bps: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinkProfile {
    segments: Vec<LinkSegment>,
}

impl LinkProfile {
    pub fn new(segments: Vec<LinkSegment>) -> Result<Self, LinkError> {
        let first = segments.first().ok_or(LinkError::Empty)?;
        if first.start != SimTime::ZERO {
            return Err(LinkError::FirstNotAtZero);
        }
        for (i, s) in segments.iter().enumerate() {
            if s.rate_bps == 0 {
                return Err(LinkError::ZeroRate(i));
            }
            if i > 0 && s.start <= segments[i - 1].start {
                return Err(LinkError::NotIncreasing(i));
            }
        }
        Ok(LinkProfile { segments })
    }

    pub fn constant(rate_bps: u64) -> Self {
        assert!(rate_bps > 0);
        LinkProfile {
            segments: vec![LinkSegment {
                start: SimTime::ZERO,
                rate_bps,
            }],
        }
    }

    pub fn segments(&self) -> &[LinkSegment] {
        &self.segments
    }

    fn index_at(&self, t: SimTime) -> usize {
        self.segments.partition_point(|s| s.start <= t) - 1
    }

    pub fn rate_at(&self, t: SimTime) -> u64 {
        self.segments[self.index_at(t)].rate_bps
    }

    /// Serialization time of `size` bytes at the rate in force at `now`,
    /// rounded up to a whole nanosecond.
    pub fn link_service(&self, now: SimTime, size: u32) -> SimTime {
        let bits = u128::from(size) * 8 * 1_000_000_000;
        let rate = u128::from(self.rate_at(now));
        SimTime::from_nanos(bits.div_ceil(rate) as u64)
    }

    /// Bytes the link can serve over `[from, to)` following rate changes.
    pub fn bytes_between(&self, from: SimTime, to: SimTime) -> u64 {
        if to <= from {
            return 0;
        }
        let mut bit_ns: u128 = 0;
        let mut i = self.index_at(from);
        let mut t = from;
        while t < to {
            let end = self
                .segments
                .get(i + 1)
                .map_or(to, |s| s.start.min(to));
            bit_ns += u128::from(self.segments[i].rate_bps) * u128::from((end - t).as_nanos());
            t = end;
            i += 1;
        }
        (bit_ns / 8_000_000_000) as u64
    }
}
