//! Native L4S AQM decision functions.
//!
//! All policies act on an instantaneous measurement of the queue (its
//! sojourn, virtual sojourn or scaled virtual sojourn, plus the matching
//! backlog in bytes). There is no EWMA of the queue anywhere in here.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SimTime;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum MarkDecision {
    #[default]
    None,
    Mark,
    Drop,
}

impl MarkDecision {
    pub fn is_mark(self) -> bool {
        self == MarkDecision::Mark
    }

    /// Logical OR of two marking decisions: a drop dominates a mark.
    pub fn or(self, other: MarkDecision) -> MarkDecision {
        use MarkDecision::*;
        match (self, other) {
            (Drop, _) | (_, Drop) => Drop,
            (Mark, _) | (_, Mark) => Mark,
            _ => None,
        }
    }

    pub fn from_bool(mark: bool) -> MarkDecision {
        if mark {
            MarkDecision::Mark
        } else {
            MarkDecision::None
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MarkingError {
    #[error("step threshold must be positive")]
    ZeroThreshold,
    #[error("floor_packets must be at least 1")]
    FloorPackets,
    #[error("mtu must be positive")]
    ZeroMtu,
    #[error("ramp needs t_min <= t_max, got {t_min} > {t_max}")]
    RampOrder { t_min: SimTime, t_max: SimTime },
    #[error("max_p must be in (0, 1], got {0}")]
    MaxP(f64),
    #[error("byte-mode ramp gap {gap} B is below 6 packets ({min} B)")]
    ByteGap { gap: u64, min: u64 },
    #[error("PI update interval must be positive")]
    PiInterval,
    #[error("PI gains must be finite and non-negative")]
    PiGains,
}

/// Suppresses time-based marking while the queue holds fewer than
/// `packets` full-sized packets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MtuFloor {
    pub mtu: u32,
    pub packets: u32,
    pub enabled: bool,
}

impl MtuFloor {
    pub fn bytes(&self) -> u64 {
        u64::from(self.mtu) * u64::from(self.packets)
    }

    /// True if `backlog` is deep enough for marking to be allowed.
    pub fn permits(&self, backlog: u64) -> bool {
        !self.enabled || backlog >= self.bytes()
    }

    pub fn disabled() -> Self {
        MtuFloor {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MarkingError> {
        if self.mtu == 0 {
            return Err(MarkingError::ZeroMtu);
        }
        if self.packets == 0 {
            return Err(MarkingError::FloorPackets);
        }
        Ok(())
    }
}

impl Default for MtuFloor {
    fn default() -> Self {
        MtuFloor {
            mtu: 1500,
            packets: 2,
            enabled: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepParams {
    pub threshold: SimTime,
    pub floor: MtuFloor,
}

impl Default for StepParams {
    fn default() -> Self {
        StepParams {
            threshold: SimTime::from_millis(1),
            floor: MtuFloor::default(),
        }
    }
}

impl StepParams {
    pub fn validate(&self) -> Result<(), MarkingError> {
        if self.threshold == SimTime::ZERO {
            return Err(MarkingError::ZeroThreshold);
        }
        self.floor.validate()
    }
}

/// Time-threshold step with the MTU floor.
pub fn step_decide(params: &StepParams, qdelay: SimTime, backlog: u64) -> MarkDecision {
    MarkDecision::from_bool(qdelay > params.threshold && params.floor.permits(backlog))
}

/// DCTCP-style step on the queue length in bytes. The threshold only
/// corresponds to a delay at one particular drain rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ByteStepParams {
    pub threshold_bytes: u64,
}

pub fn byte_step_decide(params: &ByteStepParams, backlog: u64) -> MarkDecision {
    MarkDecision::from_bool(backlog > params.threshold_bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteRamp {
    pub min_th: u64,
    pub max_th: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RampParams {
    pub t_min: SimTime,
    pub t_max: SimTime,
    pub max_p: f64,
    pub derandomize: bool,
    /// RED-compatible ramp over the byte backlog instead of delay.
    pub byte_mode: Option<ByteRamp>,
    pub floor: MtuFloor,
}

impl Default for RampParams {
    fn default() -> Self {
        RampParams {
            t_min: SimTime::from_micros(500),
            t_max: SimTime::from_micros(1500),
            max_p: 1.0,
            derandomize: true,
            byte_mode: None,
            floor: MtuFloor::default(),
        }
    }
}

impl RampParams {
    /// The degenerate ramp that behaves as a step at `k`.
    pub fn step_at(k: SimTime) -> Self {
        RampParams {
            t_min: k,
            t_max: k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MarkingError> {
        if self.t_min > self.t_max {
            return Err(MarkingError::RampOrder {
                t_min: self.t_min,
                t_max: self.t_max,
            });
        }
        if !(self.max_p > 0.0 && self.max_p <= 1.0) {
            return Err(MarkingError::MaxP(self.max_p));
        }
        self.floor.validate()?;
        if let Some(b) = self.byte_mode {
            let min = 6 * u64::from(self.floor.mtu);
            let gap = b.max_th.saturating_sub(b.min_th);
            if b.max_th < b.min_th || gap < min {
                return Err(MarkingError::ByteGap { gap, min });
            }
        }
        Ok(())
    }
}

fn linear_ramp(x: f64, lo: f64, hi: f64, max_p: f64) -> f64 {
    if x <= lo {
        0.0
    } else if x >= hi {
        max_p
    } else {
        max_p * (x - lo) / (hi - lo)
    }
}

/// Marking probability for a delay-based ramp.
pub fn ramp_probability(params: &RampParams, qdelay: SimTime) -> f64 {
    linear_ramp(
        qdelay.as_nanos() as f64,
        params.t_min.as_nanos() as f64,
        params.t_max.as_nanos() as f64,
        params.max_p,
    )
}

/// Marking probability for the byte-mode ramp; zero when byte mode is off.
pub fn ramp_probability_bytes(params: &RampParams, backlog: u64) -> f64 {
    match params.byte_mode {
        Some(b) => linear_ramp(backlog as f64, b.min_th as f64, b.max_th as f64, params.max_p),
        None => 0.0,
    }
}

/// Deterministic replacement for a uniform draw: probability is accumulated
/// per packet and a mark is issued each time a whole unit builds up.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Credit(f64);

impl Credit {
    pub fn new() -> Self {
        Credit(0.0)
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    pub fn accumulate(&mut self, p: f64) -> bool {
        self.0 += p.clamp(0.0, 1.0);
        // tolerate accumulated rounding so that p = 1/n marks exactly every n
        if self.0 >= 1.0 - 1e-9 {
            self.0 = (self.0 - 1.0).max(0.0);
            true
        } else {
            false
        }
    }
}

/// Where a probabilistic decision gets its randomness from.
pub enum MarkSource<'a, R: Rng + ?Sized> {
    Random(&'a mut R),
    Credit(&'a mut Credit),
}

impl<R: Rng + ?Sized> MarkSource<'_, R> {
    pub fn decide(&mut self, p: f64) -> bool {
        match self {
            MarkSource::Random(rng) => p > 0.0 && (p >= 1.0 || rng.random::<f64>() < p),
            MarkSource::Credit(c) => c.accumulate(p),
        }
    }
}

/// Ramp decision for a measured `qdelay` and `backlog`.
pub fn ramp_decide<R: Rng + ?Sized>(
    params: &RampParams,
    qdelay: SimTime,
    backlog: u64,
    source: &mut MarkSource<'_, R>,
) -> MarkDecision {
    let p = if params.byte_mode.is_some() {
        ramp_probability_bytes(params, backlog)
    } else {
        ramp_probability(params, qdelay)
    };
    let allowed = params.floor.permits(backlog);
    // the draw is consumed regardless so the random stream does not depend on the floor
    let mark = source.decide(if allowed { p } else { 0.0 });
    MarkDecision::from_bool(mark && allowed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PiParams {
    pub target: SimTime,
    /// Probability added per update per second of delay above target.
    pub alpha: f64,
    /// Probability added per update per second of delay growth since the
    /// previous update.
    pub beta: f64,
    pub update_interval: SimTime,
}

impl Default for PiParams {
    fn default() -> Self {
        PiParams {
            target: SimTime::from_micros(500),
            alpha: 0.16,
            beta: 3.2,
            update_interval: SimTime::from_millis(16),
        }
    }
}

impl PiParams {
    pub fn validate(&self) -> Result<(), MarkingError> {
        if self.update_interval == SimTime::ZERO {
            return Err(MarkingError::PiInterval);
        }
        let ok = |g: f64| g.is_finite() && g >= 0.0;
        if !ok(self.alpha) || !ok(self.beta) {
            return Err(MarkingError::PiGains);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PiState {
    pub params: PiParams,
    p: f64,
    prev_qdelay: SimTime,
    last_update: Option<SimTime>,
    since_mark: u64,
}

impl PiState {
    pub fn new(params: PiParams) -> Self {
        Self::with_probability(params, 0.0)
    }

    pub fn with_probability(params: PiParams, p: f64) -> Self {
        PiState {
            params,
            p: p.clamp(0.0, 1.0),
            prev_qdelay: SimTime::ZERO,
            last_update: None,
            since_mark: 0,
        }
    }

    pub fn probability(&self) -> f64 {
        self.p
    }

    pub fn prev_qdelay(&self) -> SimTime {
        self.prev_qdelay
    }

    pub fn set_prev_qdelay(&mut self, q: SimTime) {
        self.prev_qdelay = q;
    }

    pub fn is_due(&self, now: SimTime) -> bool {
        self.last_update
            .is_none_or(|t| now >= t + self.params.update_interval)
    }

    /// One PI step. A call before the update interval has elapsed leaves the
    /// state untouched.
    pub fn pi_update(&mut self, qdelay: SimTime, now: SimTime) -> f64 {
        if !self.is_due(now) {
            return self.p;
        }
        let err = qdelay.as_secs_f64() - self.params.target.as_secs_f64();
        let growth = qdelay.as_secs_f64() - self.prev_qdelay.as_secs_f64();
        self.p = (self.p + self.params.alpha * err + self.params.beta * growth).clamp(0.0, 1.0);
        self.prev_qdelay = qdelay;
        self.last_update = Some(now);
        self.p
    }

    /// Packets between marks, `ceil(1/p)`; `None` means no marking.
    pub fn pi_mark_interval(&self) -> Option<u64> {
        mark_interval(self.p)
    }

    /// Deterministic per-packet decision: every `ceil(1/p)`th packet is marked.
    pub fn decide(&mut self) -> MarkDecision {
        match self.pi_mark_interval() {
            None => {
                self.since_mark = 0;
                MarkDecision::None
            }
            Some(n) => {
                self.since_mark += 1;
                if self.since_mark >= n {
                    self.since_mark = 0;
                    MarkDecision::Mark
                } else {
                    MarkDecision::None
                }
            }
        }
    }
}

pub fn mark_interval(p: f64) -> Option<u64> {
    if !(p > 0.0) {
        return None;
    }
    // 1/p for p = 1/n can land a hair above n
    Some(((1.0 / p) - 1e-9).ceil().max(1.0) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ms(x: f64) -> SimTime {
        SimTime::from_millis_f64(x)
    }

    #[test]
    fn step_examples() {
        let p = StepParams::default();
        assert_eq!(step_decide(&p, ms(1.2), 9000), MarkDecision::Mark);
        assert_eq!(step_decide(&p, ms(1.2), 2500), MarkDecision::None);
        assert_eq!(step_decide(&p, ms(0.8), 9000), MarkDecision::None);
        // strictly greater than the threshold
        assert_eq!(step_decide(&p, ms(1.0), 9000), MarkDecision::None);
        assert_eq!(step_decide(&p, ms(1.2), 3000), MarkDecision::Mark);
    }

    #[test]
    fn step_floor_disabled() {
        let p = StepParams {
            floor: MtuFloor::disabled(),
            ..StepParams::default()
        };
        assert_eq!(step_decide(&p, ms(1.2), 100), MarkDecision::Mark);
    }

    #[test]
    fn step_is_drain_rate_invariant() {
        // the same delay reached at different drain rates marks identically
        let p = StepParams::default();
        for rate_bps in [1.5e6, 10e6, 40e6, 1e9] {
            let backlog = (rate_bps / 8.0 * 1.2e-3) as u64;
            let d = step_decide(&p, ms(1.2), backlog.max(3000));
            assert_eq!(d, MarkDecision::Mark);
        }
    }

    #[test]
    fn step_validation() {
        let mut p = StepParams::default();
        p.threshold = SimTime::ZERO;
        assert_eq!(p.validate(), Err(MarkingError::ZeroThreshold));
        let mut p = StepParams::default();
        p.floor.packets = 0;
        assert_eq!(p.validate(), Err(MarkingError::FloorPackets));
    }

    #[test]
    fn byte_step() {
        let p = ByteStepParams { threshold_bytes: 5000 };
        assert_eq!(byte_step_decide(&p, 5000), MarkDecision::None);
        assert_eq!(byte_step_decide(&p, 5001), MarkDecision::Mark);
    }

    #[test]
    fn ramp_examples() {
        let p = RampParams::default();
        assert!((ramp_probability(&p, ms(1.0)) - 0.5).abs() < 1e-12);
        assert_eq!(ramp_probability(&p, ms(1.5)), 1.0);
        assert_eq!(ramp_probability(&p, ms(7.0)), 1.0);
        assert_eq!(ramp_probability(&p, ms(0.2)), 0.0);

        let k = RampParams::step_at(ms(1.0));
        assert!(k.validate().is_ok());
        assert_eq!(ramp_probability(&k, ms(1.0001)), 1.0);
        assert_eq!(ramp_probability(&k, ms(1.0)), 0.0);
        assert_eq!(ramp_probability(&k, ms(0.9)), 0.0);
    }

    #[test]
    fn ramp_validation() {
        let mut p = RampParams::default();
        p.t_min = ms(2.0);
        assert!(matches!(p.validate(), Err(MarkingError::RampOrder { .. })));
        let mut p = RampParams::default();
        p.max_p = 0.0;
        assert_eq!(p.validate(), Err(MarkingError::MaxP(0.0)));
        let mut p = RampParams::default();
        p.byte_mode = Some(ByteRamp { min_th: 3000, max_th: 3000 + 5 * 1500 });
        assert_eq!(p.validate(), Err(MarkingError::ByteGap { gap: 7500, min: 9000 }));
        p.byte_mode = Some(ByteRamp { min_th: 3000, max_th: 3000 + 6 * 1500 });
        assert!(p.validate().is_ok());
    }

    #[test]
    fn byte_ramp_probability() {
        let p = RampParams {
            byte_mode: Some(ByteRamp { min_th: 3000, max_th: 12_000 }),
            ..RampParams::default()
        };
        assert_eq!(ramp_probability_bytes(&p, 3000), 0.0);
        assert!((ramp_probability_bytes(&p, 7500) - 0.5).abs() < 1e-12);
        assert_eq!(ramp_probability_bytes(&p, 20_000), 1.0);
    }

    #[test]
    fn derandomized_quarter_marks_every_fourth() {
        let mut c = Credit::new();
        let marks: Vec<bool> = (0..8).map(|_| c.accumulate(0.25)).collect();
        assert_eq!(marks, vec![false, false, false, true, false, false, false, true]);
    }

    #[test]
    fn ramp_decide_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = RampParams {
            derandomize: false,
            ..RampParams::default()
        };
        let mut src = MarkSource::Random(&mut rng);
        for _ in 0..1000 {
            assert_eq!(ramp_decide(&p, ms(0.1), 9000, &mut src), MarkDecision::None);
            assert_eq!(ramp_decide(&p, ms(3.0), 9000, &mut src), MarkDecision::Mark);
        }
        let mut credit = Credit::new();
        let mut src: MarkSource<'_, ChaCha8Rng> = MarkSource::Credit(&mut credit);
        for _ in 0..1000 {
            assert_eq!(ramp_decide(&p, ms(3.0), 9000, &mut src), MarkDecision::Mark);
        }
    }

    #[test]
    fn ramp_respects_floor() {
        let p = RampParams::default();
        let mut credit = Credit::new();
        let mut src: MarkSource<'_, ChaCha8Rng> = MarkSource::Credit(&mut credit);
        for _ in 0..100 {
            assert_eq!(ramp_decide(&p, ms(3.0), 2999, &mut src), MarkDecision::None);
        }
    }

    #[test]
    fn random_ramp_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = RampParams {
            derandomize: false,
            ..RampParams::default()
        };
        let mut src = MarkSource::Random(&mut rng);
        let n = 100_000;
        let marks = (0..n)
            .filter(|_| ramp_decide(&p, ms(1.0), 9000, &mut src).is_mark())
            .count();
        let f = marks as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.01, "{f}");
    }

    #[test]
    fn pi_zero_error_fixed_point() {
        let params = PiParams::default();
        let mut pi = PiState::with_probability(params, 0.3);
        pi.set_prev_qdelay(params.target);
        let mut now = SimTime::ZERO;
        for _ in 0..50 {
            assert_eq!(pi.pi_update(params.target, now), 0.3);
            now += params.update_interval;
        }
    }

    #[test]
    fn pi_positive_error_increases() {
        let params = PiParams::default();
        let mut pi = PiState::new(params);
        let mut now = SimTime::ZERO;
        let mut last = 0.0;
        for _ in 0..20 {
            pi.pi_update(ms(2.0), now);
            now += params.update_interval;
            assert!(pi.probability() > last || pi.probability() == 1.0);
            last = pi.probability();
        }
    }

    #[test]
    fn pi_update_law() {
        // 1 ms of error at alpha = 10 per second of error gives a 0.01 step
        let params = PiParams {
            target: ms(0.5),
            alpha: 10.0,
            beta: 3.2,
            update_interval: SimTime::from_millis(16),
        };
        let mut pi = PiState::with_probability(params, 0.05);
        pi.set_prev_qdelay(ms(1.5));
        let p = pi.pi_update(ms(1.5), SimTime::ZERO);
        assert!((p - 0.06).abs() < 1e-12, "{p}");
    }

    #[test]
    fn pi_update_clamps_and_waits() {
        let params = PiParams {
            alpha: 1000.0,
            ..PiParams::default()
        };
        let mut pi = PiState::new(params);
        assert_eq!(pi.pi_update(ms(50.0), SimTime::ZERO), 1.0);
        // not due yet
        assert_eq!(pi.pi_update(SimTime::ZERO, SimTime::from_millis(1)), 1.0);
        // 1 - 1000 * 0.5e-3 - 3.2 * 50e-3
        let p = pi.pi_update(SimTime::ZERO, SimTime::from_millis(16));
        assert!((p - 0.34).abs() < 1e-9, "{p}");
        assert_eq!(pi.pi_update(SimTime::ZERO, SimTime::from_millis(32)), 0.0);
    }

    #[test]
    fn pi_intervals() {
        let pi = |p| PiState::with_probability(PiParams::default(), p);
        assert_eq!(pi(0.01).pi_mark_interval(), Some(100));
        assert_eq!(pi(1.0).pi_mark_interval(), Some(1));
        assert_eq!(pi(0.3).pi_mark_interval(), Some(4));
        assert_eq!(pi(0.0).pi_mark_interval(), None);
    }

    #[test]
    fn pi_interval_marking_fraction() {
        let mut s = PiState::with_probability(PiParams::default(), 0.3);
        let n = 10_000;
        let marks = (0..n).filter(|_| s.decide().is_mark()).count() as f64;
        let f = marks / n as f64;
        assert!((0.3 * 0.75..=0.3).contains(&f), "{f}");

        let mut s = PiState::with_probability(PiParams::default(), 0.01);
        let marks = (0..1000).filter(|_| s.decide().is_mark()).count();
        assert_eq!(marks, 10);
    }

    #[test]
    fn or_truth_table() {
        use MarkDecision::*;
        assert_eq!(Mark.or(None), Mark);
        assert_eq!(None.or(Mark), Mark);
        assert_eq!(None.or(None), None);
        assert_eq!(Mark.or(Drop), Drop);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ramp_monotone(a in 0u64..5_000_000, b in 0u64..5_000_000, lo in 0u64..2_000_000, gap in 1u64..2_000_000) {
                let p = RampParams { t_min: SimTime::from_nanos(lo), t_max: SimTime::from_nanos(lo + gap), ..RampParams::default() };
                let (x, y) = (a.min(b), a.max(b));
                prop_assert!(ramp_probability(&p, SimTime::from_nanos(x)) <= ramp_probability(&p, SimTime::from_nanos(y)));
            }

            #[test]
            fn ramp_continuous(x in 0u64..3_000_000) {
                let p = RampParams::default();
                let a = ramp_probability(&p, SimTime::from_nanos(x));
                let b = ramp_probability(&p, SimTime::from_nanos(x + 1));
                prop_assert!((b - a).abs() <= 1.0 / 1_000_000.0 + 1e-12);
            }

            #[test]
            fn credit_long_run_frequency(p in 0.0f64..=1.0, n in 1usize..5000) {
                let mut c = Credit::new();
                let marks = (0..n).filter(|_| c.accumulate(p)).count() as f64;
                prop_assert!((marks - n as f64 * p).abs() <= 1.0 + 1e-6);
            }

            #[test]
            fn pi_fixed_point(p0 in 0.0f64..=1.0, target_us in 1u64..20_000) {
                let params = PiParams { target: SimTime::from_micros(target_us), ..PiParams::default() };
                let mut pi = PiState::with_probability(params, p0);
                pi.set_prev_qdelay(params.target);
                let mut now = SimTime::ZERO;
                for _ in 0..20 {
                    pi.pi_update(params.target, now);
                    now += params.update_interval;
                }
                prop_assert_eq!(pi.probability(), p0);
            }
        }
    }
}
