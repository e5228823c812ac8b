//! Closed-loop traffic sources: a DCTCP-like scalable control and a Reno-like
//! Classic AIMD control. Flows assign their own sequence numbers; one window
//! reduction per round trip is enforced with an epoch sequence number.

use serde::{Deserialize, Serialize};

use crate::queue::TrafficClass;
use crate::time::SimTime;

pub const DEFAULT_G: f64 = 1.0 / 16.0;
pub const DEFAULT_INITIAL_CWND_PKTS: u32 = 10;

/// State shared by both controls: window, pacing and sequence bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub mtu: u32,
    /// Congestion window in bytes.
    pub cwnd: f64,
    pub base_rtt: SimTime,
    pub pacing_enabled: bool,
    next_seq: u64,
    inflight: u64,
}

impl Window {
    pub fn new(mtu: u32, initial_cwnd_pkts: u32, base_rtt: SimTime, pacing_enabled: bool) -> Self {
        assert!(mtu > 0 && initial_cwnd_pkts > 0);
        Window {
            mtu,
            cwnd: f64::from(mtu) * f64::from(initial_cwnd_pkts),
            base_rtt,
            pacing_enabled,
            next_seq: 0,
            inflight: 0,
        }
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn inflight(&self) -> u64 {
        self.inflight
    }

    fn min_cwnd(&self) -> f64 {
        f64::from(self.mtu)
    }

    /// True if another full-size packet fits in the window.
    pub fn can_send(&self) -> bool {
        (self.inflight + u64::from(self.mtu)) as f64 <= self.cwnd.max(self.min_cwnd()) + 1e-6
    }

    /// Claims the next sequence number for a packet about to be sent.
    pub fn on_send(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        self.inflight += u64::from(self.mtu);
        s
    }

    fn release(&mut self, bytes: u64) {
        self.inflight = self.inflight.saturating_sub(bytes);
    }

    fn additive_increase(&mut self, acked: u64) {
        let mtu = f64::from(self.mtu);
        self.cwnd += mtu * acked as f64 / self.cwnd;
    }

    fn set_cwnd(&mut self, w: f64) {
        self.cwnd = w.max(self.min_cwnd());
    }

    /// Next paced transmission time: one MTU per `mtu·rtt/cwnd`.
    pub fn pace_next_send(&self, now: SimTime) -> SimTime {
        if !self.pacing_enabled {
            return now;
        }
        let gap = f64::from(self.mtu) * self.base_rtt.as_nanos() as f64 / self.cwnd;
        now + SimTime::from_nanos(gap.round().max(1.0) as u64)
    }

    pub fn check_invariants(&self) {
        assert!(self.cwnd >= self.min_cwnd() - 1e-9, "cwnd {} below 1 MTU", self.cwnd);
        assert!(self.inflight <= self.next_seq * u64::from(self.mtu));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalableFlow {
    pub window: Window,
    pub alpha: f64,
    pub g: f64,
    pub marks_this_rtt: u64,
    pub acks_this_rtt: u64,
    epoch_end_seq: u64,
    recovery_point: u64,
    reductions: u64,
}

impl ScalableFlow {
    pub fn new(window: Window, g: f64) -> Self {
        assert!(g > 0.0 && g <= 1.0);
        ScalableFlow {
            window,
            alpha: 0.0,
            g,
            marks_this_rtt: 0,
            acks_this_rtt: 0,
            epoch_end_seq: 0,
            recovery_point: 0,
            reductions: 0,
        }
    }

    pub fn reductions(&self) -> u64 {
        self.reductions
    }

    /// Handles the ACK of packet `seq`. Returns the round's mark fraction
    /// when this ACK closes an observation epoch.
    pub fn on_ack(&mut self, seq: u64, acked: u64, marked: bool) -> Option<f64> {
        self.window.release(acked);
        self.scalable_on_ack(acked, marked);
        if seq + 1 < self.epoch_end_seq {
            return None;
        }
        Some(self.end_epoch())
    }

    /// Counts the ACK and applies additive increase.
    pub fn scalable_on_ack(&mut self, acked: u64, marked: bool) {
        self.acks_this_rtt += 1;
        if marked {
            self.marks_this_rtt += 1;
        }
        self.window.additive_increase(acked);
    }

    /// Closes the current round: EWMA update and at most one reduction.
    pub fn end_epoch(&mut self) -> f64 {
        let f = if self.acks_this_rtt == 0 {
            0.0
        } else {
            self.marks_this_rtt as f64 / self.acks_this_rtt as f64
        };
        self.alpha = ((1.0 - self.g) * self.alpha + self.g * f).clamp(0.0, 1.0);
        if f > 0.0 {
            let w = self.window.cwnd * (1.0 - self.alpha / 2.0);
            self.window.set_cwnd(w);
            self.reductions += 1;
        }
        self.marks_this_rtt = 0;
        self.acks_this_rtt = 0;
        self.epoch_end_seq = self.window.next_seq;
        f
    }

    /// Loss of packet `seq`: halve once per window.
    pub fn on_loss(&mut self, seq: u64, bytes: u64) {
        self.window.release(bytes);
        if seq >= self.recovery_point {
            let w = self.window.cwnd / 2.0;
            self.window.set_cwnd(w);
            self.recovery_point = self.window.next_seq;
        }
    }

    pub fn check_invariants(&self) {
        self.window.check_invariants();
        assert!((0.0..=1.0).contains(&self.alpha));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassicFlow {
    pub window: Window,
    pub in_recovery: bool,
    recovery_point: u64,
}

impl ClassicFlow {
    pub fn new(window: Window) -> Self {
        ClassicFlow {
            window,
            in_recovery: false,
            recovery_point: 0,
        }
    }

    /// Feedback for packet `seq`: an ACK of `acked` bytes or, if `dropped`,
    /// a loss notification for it.
    pub fn classic_on_ack(&mut self, seq: u64, acked: u64, dropped: bool) {
        self.window.release(acked);
        if dropped {
            if seq >= self.recovery_point {
                let w = self.window.cwnd / 2.0;
                self.window.set_cwnd(w);
                self.recovery_point = self.window.next_seq;
                self.in_recovery = true;
            }
            return;
        }
        if self.in_recovery && seq >= self.recovery_point {
            self.in_recovery = false;
        }
        if !self.in_recovery {
            self.window.additive_increase(acked);
        }
    }

    pub fn check_invariants(&self) {
        self.window.check_invariants();
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Control {
    Scalable(ScalableFlow),
    Classic(ClassicFlow),
}

impl Control {
    pub fn window(&self) -> &Window {
        match self {
            Control::Scalable(f) => &f.window,
            Control::Classic(f) => &f.window,
        }
    }

    pub fn window_mut(&mut self) -> &mut Window {
        match self {
            Control::Scalable(f) => &mut f.window,
            Control::Classic(f) => &mut f.window,
        }
    }

    pub fn class(&self) -> TrafficClass {
        match self {
            Control::Scalable(_) => TrafficClass::L4S,
            Control::Classic(_) => TrafficClass::Classic,
        }
    }

    /// Returns the closed round's mark fraction for scalable flows.
    pub fn on_ack(&mut self, seq: u64, acked: u64, marked: bool) -> Option<f64> {
        match self {
            Control::Scalable(f) => f.on_ack(seq, acked, marked),
            Control::Classic(f) => {
                f.classic_on_ack(seq, acked, false);
                None
            }
        }
    }

    pub fn on_loss(&mut self, seq: u64, bytes: u64) {
        match self {
            Control::Scalable(f) => f.on_loss(seq, bytes),
            Control::Classic(f) => f.classic_on_ack(seq, bytes, true),
        }
    }

    pub fn check_invariants(&self) {
        match self {
            Control::Scalable(f) => f.check_invariants(),
            Control::Classic(f) => f.check_invariants(),
        }
    }
}

/// Population of flows in a scenario. Scalable flows take ids `0..n_l`,
/// Classic flows `n_l..n_l+n_c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSetup {
    pub n_l: u32,
    pub n_c: u32,
    pub start_times: Vec<SimTime>,
    pub rtts: Vec<SimTime>,
}

impl FlowSetup {
    pub fn total(&self) -> u32 {
        self.n_l + self.n_c
    }

    pub fn class_of(&self, flow_id: u32) -> TrafficClass {
        if flow_id < self.n_l {
            TrafficClass::L4S
        } else {
            TrafficClass::Classic
        }
    }
}
