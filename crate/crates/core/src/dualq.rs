//! DualQ Coupled AQM.
//!
//! Packets are classified into an L4S queue and a Classic queue. The Classic
//! queue is regulated by a PI base AQM whose output `p'` is squared into the
//! Classic drop probability and applied linearly, times the coupling factor
//! `k`, to L4S traffic. An L4S packet is marked if either that coupled signal
//! or the native L4S AQM says so. The L4S queue can carry a virtual-queue
//! overlay that the native AQM measures instead of the real queue.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::link::LinkProfile;
use crate::marking::{
    byte_step_decide, ramp_decide, step_decide, ByteStepParams, Credit, MarkDecision, MarkSource,
    MtuFloor, PiParams, PiState, RampParams, StepParams,
};
use crate::queue::{FifoQueue, Packet, TrafficClass};
use crate::time::SimTime;
use crate::vq::{ByteVq, DrainMode, VirtualQueueState, VqParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueueSel {
    L4S,
    Classic,
}

pub fn classify(p: &Packet) -> QueueSel {
    match p.traffic_class {
        TrafficClass::L4S => QueueSel::L4S,
        TrafficClass::Classic => QueueSel::Classic,
    }
}

/// Classic drop probability from the base AQM output.
pub fn classic_drop_prob(base_p: f64) -> f64 {
    base_p * base_p
}

/// Coupled L4S marking probability from the base AQM output.
pub fn coupled_l4s_prob(base_p: f64, k: f64) -> f64 {
    (k * base_p).min(1.0)
}

/// Which measurement of the L4S queue the native AQM uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqMode {
    /// Real sojourn and real backlog.
    #[default]
    Off,
    /// Byte-counter virtual queue; delay is its length over the link rate.
    Bytes,
    Sojourn,
    ScaledSojourn,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NativeAqm {
    None,
    Step(StepParams),
    ByteStep(ByteStepParams),
    Ramp { params: RampParams, credit: Credit },
    Pi { state: PiState, floor: MtuFloor },
}

impl NativeAqm {
    pub fn ramp(params: RampParams) -> Self {
        NativeAqm::Ramp {
            params,
            credit: Credit::new(),
        }
    }

    fn is_derandomized(&self) -> bool {
        match self {
            NativeAqm::Ramp { params, .. } => params.derandomize,
            NativeAqm::Pi { .. } => true,
            _ => false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DualQConfig {
    pub vq_mode: VqMode,
    pub vq: VqParams,
    pub native: NativeAqm,
    pub base_pi: PiParams,
    pub k: f64,
    /// `None` follows the native policy: credit-based coupled marking when
    /// the native AQM is derandomized, uniform draws otherwise.
    pub coupled_derandomize: Option<bool>,
    pub l4s_capacity: Option<u64>,
    pub classic_capacity: Option<u64>,
}

impl Default for DualQConfig {
    fn default() -> Self {
        DualQConfig {
            vq_mode: VqMode::Off,
            vq: VqParams::default(),
            native: NativeAqm::Step(StepParams::default()),
            base_pi: PiParams::default(),
            k: 2.0,
            coupled_derandomize: None,
            l4s_capacity: None,
            classic_capacity: None,
        }
    }
}

/// Instantaneous measurement of the L4S queue handed to the native AQM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueueSignal {
    pub qdelay: SimTime,
    pub backlog: u64,
}

#[derive(Debug)]
enum Overlay {
    Off,
    Bytes(ByteVq),
    Sojourn(VirtualQueueState),
}

/// A packet leaving one of the queues, either for transmission or dropped.
#[derive(Debug)]
pub struct Departure {
    pub packet: Packet,
    pub queue: QueueSel,
    pub sojourn: SimTime,
    /// Virtual sojourn observed at dequeue, for L4S packets with a VQ.
    pub virtual_sojourn: Option<SimTime>,
    pub decision: MarkDecision,
}

#[derive(Debug)]
struct IdlePeriod {
    since: SimTime,
    /// Virtual bytes already removed during this idle period.
    drained: u64,
}

#[derive(Debug)]
pub struct DualQ {
    lq: FifoQueue,
    cq: FifoQueue,
    overlay: Overlay,
    vq_mode: VqMode,
    vq_params: VqParams,
    base: PiState,
    native: NativeAqm,
    k: f64,
    coupled_credit: Credit,
    coupled_derandomize: bool,
    l4s_in_service: bool,
    idle: Option<IdlePeriod>,
}

impl DualQ {
    pub fn new(cfg: DualQConfig) -> Self {
        assert!(cfg.k > 0.0, "coupling factor must be positive");
        let overlay = match cfg.vq_mode {
            VqMode::Off => Overlay::Off,
            VqMode::Bytes => Overlay::Bytes(ByteVq::new(cfg.vq)),
            VqMode::Sojourn | VqMode::ScaledSojourn => {
                Overlay::Sojourn(VirtualQueueState::new(cfg.vq))
            }
        };
        let coupled_derandomize = cfg
            .coupled_derandomize
            .unwrap_or_else(|| cfg.native.is_derandomized());
        let queue = |cap: Option<u64>| cap.map_or_else(FifoQueue::new, FifoQueue::with_capacity_limit);
        DualQ {
            lq: queue(cfg.l4s_capacity),
            cq: queue(cfg.classic_capacity),
            overlay,
            vq_mode: cfg.vq_mode,
            vq_params: cfg.vq,
            base: PiState::new(cfg.base_pi),
            native: cfg.native,
            k: cfg.k,
            coupled_credit: Credit::new(),
            coupled_derandomize,
            l4s_in_service: false,
            idle: Some(IdlePeriod {
                since: SimTime::ZERO,
                drained: 0,
            }),
        }
    }

    pub fn l4s_queue(&self) -> &FifoQueue {
        &self.lq
    }

    pub fn classic_queue(&self) -> &FifoQueue {
        &self.cq
    }

    pub fn base(&self) -> &PiState {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut PiState {
        &mut self.base
    }

    pub fn native(&self) -> &NativeAqm {
        &self.native
    }

    pub fn coupling(&self) -> f64 {
        self.k
    }

    pub fn vq_mode(&self) -> VqMode {
        self.vq_mode
    }

    pub fn virtual_queue(&self) -> Option<&VirtualQueueState> {
        match &self.overlay {
            Overlay::Sojourn(v) => Some(v),
            _ => None,
        }
    }

    pub fn byte_vq(&self) -> Option<&ByteVq> {
        match &self.overlay {
            Overlay::Bytes(b) => Some(b),
            _ => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lq.is_empty() && self.cq.is_empty()
    }

    /// Virtual backlog of the L4S overlay, or zero without one.
    pub fn vbacklog(&self) -> u64 {
        match &self.overlay {
            Overlay::Off => 0,
            Overlay::Bytes(b) => b.vlen(),
            Overlay::Sojourn(v) => v.vbacklog(),
        }
    }

    /// Enqueues `p` into its class queue. A tail-dropped packet is returned.
    pub fn enqueue(&mut self, p: Packet, now: SimTime, link: &LinkProfile) -> Result<QueueSel, Packet> {
        match classify(&p) {
            QueueSel::Classic => self.cq.enqueue(p, now).map(|_| QueueSel::Classic),
            QueueSel::L4S => {
                self.end_idle(now, link);
                let size = u64::from(p.size);
                self.lq.enqueue(p, now)?;
                match &mut self.overlay {
                    Overlay::Off => {}
                    Overlay::Bytes(b) => b.on_enqueue(size),
                    Overlay::Sojourn(v) => v.vsojourn_on_enqueue(size, now),
                }
                Ok(QueueSel::L4S)
            }
        }
    }

    /// Strict priority for L4S; `None` when both queues are empty.
    pub fn schedule_next(&self) -> Option<QueueSel> {
        if !self.lq.is_empty() {
            Some(QueueSel::L4S)
        } else if !self.cq.is_empty() {
            Some(QueueSel::Classic)
        } else {
            None
        }
    }

    /// Measurement of the L4S queue the native AQM acts on at `now`.
    pub fn l4s_signal(&self, now: SimTime, link: &LinkProfile) -> QueueSignal {
        match (&self.overlay, self.vq_mode) {
            (Overlay::Off, _) => QueueSignal {
                qdelay: self.lq.head_sojourn(now),
                backlog: self.lq.backlog_bytes(),
            },
            (Overlay::Bytes(b), _) => {
                let rate = u128::from(link.rate_at(now));
                let ns = u128::from(b.vlen()) * 8 * 1_000_000_000 / rate;
                QueueSignal {
                    qdelay: SimTime::from_nanos(ns as u64),
                    backlog: b.vlen(),
                }
            }
            (Overlay::Sojourn(v), VqMode::ScaledSojourn) => QueueSignal {
                qdelay: v.scaled_virtual_sojourn(now),
                backlog: v.vbacklog(),
            },
            (Overlay::Sojourn(v), _) => QueueSignal {
                qdelay: v.virtual_sojourn(now),
                backlog: v.vbacklog(),
            },
        }
    }

    fn native_decide<R: Rng + ?Sized>(&mut self, signal: QueueSignal, rng: &mut R) -> MarkDecision {
        match &mut self.native {
            NativeAqm::None => MarkDecision::None,
            NativeAqm::Step(p) => step_decide(p, signal.qdelay, signal.backlog),
            NativeAqm::ByteStep(p) => byte_step_decide(p, signal.backlog),
            NativeAqm::Ramp { params, credit } => {
                if params.derandomize {
                    ramp_decide(params, signal.qdelay, signal.backlog, &mut MarkSource::<R>::Credit(credit))
                } else {
                    ramp_decide(params, signal.qdelay, signal.backlog, &mut MarkSource::Random(rng))
                }
            }
            NativeAqm::Pi { state, floor } => {
                if floor.permits(signal.backlog) {
                    state.decide()
                } else {
                    MarkDecision::None
                }
            }
        }
    }

    fn coupled_decide<R: Rng + ?Sized>(&mut self, rng: &mut R) -> MarkDecision {
        let p = coupled_l4s_prob(self.base.probability(), self.k);
        let mark = if self.coupled_derandomize {
            self.coupled_credit.accumulate(p)
        } else {
            MarkSource::Random(rng).decide(p)
        };
        MarkDecision::from_bool(mark)
    }

    /// Native decision OR coupled decision for the L4S head packet.
    pub fn l4s_dequeue_decide<R: Rng + ?Sized>(
        &mut self,
        now: SimTime,
        link: &LinkProfile,
        rng: &mut R,
    ) -> MarkDecision {
        let signal = self.l4s_signal(now, link);
        let native = self.native_decide(signal, rng);
        let coupled = self.coupled_decide(rng);
        native.or(coupled)
    }

    /// Takes the next packet off the link-facing side of the AQM.
    ///
    /// A Classic packet may come back with a `Drop` decision; the caller
    /// discards it and asks again.
    pub fn dequeue<R: Rng + ?Sized>(
        &mut self,
        now: SimTime,
        link: &LinkProfile,
        rng: &mut R,
    ) -> Option<Departure> {
        match self.schedule_next()? {
            QueueSel::L4S => {
                let virtual_sojourn = self.virtual_sojourn(now);
                let decision = self.l4s_dequeue_decide(now, link, rng);
                let (mut packet, sojourn) = self.lq.dequeue_head(now)?;
                // the scaled variant may legitimately undercut the real sojourn
                if cfg!(debug_assertions)
                    && self.vq_mode == VqMode::Sojourn
                    && self.vq_params.drain_mode == DrainMode::ProseUnderDrain
                {
                    if let Some(vs) = virtual_sojourn {
                        debug_assert!(vs >= sojourn, "virtual sojourn {vs} below real {sojourn}");
                    }
                }
                if decision.is_mark() {
                    packet.mark();
                }
                self.l4s_in_service = true;
                Some(Departure {
                    packet,
                    queue: QueueSel::L4S,
                    sojourn,
                    virtual_sojourn,
                    decision,
                })
            }
            QueueSel::Classic => {
                let p = classic_drop_prob(self.base.probability());
                let drop = MarkSource::Random(rng).decide(p);
                let (mut packet, sojourn) = self.cq.dequeue_head(now)?;
                let decision = if drop {
                    packet.drop_packet();
                    MarkDecision::Drop
                } else {
                    MarkDecision::None
                };
                Some(Departure {
                    packet,
                    queue: QueueSel::Classic,
                    sojourn,
                    virtual_sojourn: None,
                    decision,
                })
            }
        }
    }

    fn virtual_sojourn(&self, now: SimTime) -> Option<SimTime> {
        match (&self.overlay, self.vq_mode) {
            (Overlay::Sojourn(v), VqMode::ScaledSojourn) => Some(v.scaled_virtual_sojourn(now)),
            (Overlay::Sojourn(v), _) => Some(v.virtual_sojourn(now)),
            _ => None,
        }
    }

    /// Called when the link has finished serializing a packet from `queue`.
    /// The virtual counterpart of an L4S packet is dequeued here, after the
    /// real packet has been forwarded.
    pub fn on_transmit_complete(&mut self, queue: QueueSel, size: u32, now: SimTime) {
        if queue != QueueSel::L4S {
            return;
        }
        let size = u64::from(size);
        match &mut self.overlay {
            Overlay::Off => {}
            Overlay::Bytes(b) => b.on_dequeue(size),
            Overlay::Sojourn(v) => v.vsojourn_on_dequeue(size),
        }
        self.l4s_in_service = false;
        if self.lq.is_empty() {
            self.idle = Some(IdlePeriod {
                since: now,
                drained: 0,
            });
        }
    }

    /// Brings the virtual queue up to date with an ongoing idle period of the
    /// real L4S queue. Applying it in pieces drains exactly what a single
    /// application at the end would.
    pub fn sync_idle(&mut self, now: SimTime, link: &LinkProfile) {
        if !self.vq_params.idle_drain {
            return;
        }
        let Some(idle) = &mut self.idle else { return };
        let raw = link.bytes_between(idle.since, now);
        let total = self.vq_params.virtual_size(raw);
        let delta = total.saturating_sub(idle.drained);
        idle.drained = total;
        match &mut self.overlay {
            Overlay::Off => {}
            Overlay::Bytes(b) => b.drain_virtual(delta),
            Overlay::Sojourn(v) => v.drain(delta),
        }
    }

    fn end_idle(&mut self, now: SimTime, link: &LinkProfile) {
        self.sync_idle(now, link);
        if self.lq.is_empty() && !self.l4s_in_service {
            // the L4S arrival below starts a busy period
            self.idle = None;
        }
    }

    /// Base PI step on the Classic queue's head sojourn.
    pub fn update_base(&mut self, now: SimTime) -> f64 {
        let q = self.cq.head_sojourn(now);
        self.base.pi_update(q, now)
    }

    /// Native PI step, if the native AQM is a PI controller.
    pub fn update_native(&mut self, now: SimTime, link: &LinkProfile) -> Option<f64> {
        self.sync_idle(now, link);
        let signal = self.l4s_signal(now, link);
        match &mut self.native {
            NativeAqm::Pi { state, .. } => Some(state.pi_update(signal.qdelay, now)),
            _ => None,
        }
    }

    pub fn native_pi_interval(&self) -> Option<SimTime> {
        match &self.native {
            NativeAqm::Pi { state, .. } => Some(state.params.update_interval),
            _ => None,
        }
    }

    pub fn check_invariants(&self) {
        self.lq.check_invariants();
        self.cq.check_invariants();
        let prose = self.vq_params.drain_mode == DrainMode::ProseUnderDrain;
        match &self.overlay {
            Overlay::Off => {}
            Overlay::Bytes(b) => {
                if prose {
                    assert!(b.vlen() >= self.lq.backlog_bytes());
                }
            }
            Overlay::Sojourn(v) => {
                v.check_invariants();
                assert_eq!(v.count_enq(), self.lq.count_enq());
                if prose {
                    assert!(v.vbacklog() >= self.lq.backlog_bytes());
                    assert!(
                        v.vhead() <= self.lq.head_index(),
                        "virtual head {} ahead of real head {}",
                        v.vhead(),
                        self.lq.head_index()
                    );
                }
            }
        }
        let p = self.base.probability();
        assert!((0.0..=1.0).contains(&p));
    }
}
