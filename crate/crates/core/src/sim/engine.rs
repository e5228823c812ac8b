//! Closed-loop discrete-event engine.
//!
//! Senders emit packets that reach the bottleneck after half their base RTT.
//! The DualQ feeds a single link; a transmitted packet's ACK returns after
//! the other half of the RTT. Classic drops are reported to the sender half
//! an RTT after the drop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::event::{EventKind, EventQueue};
use super::metrics::{p99, MetricsRecord};
use super::scenario::{Scenario, ScenarioError, SimConfig};
use crate::dualq::{DualQ, QueueSel};
use crate::endpoints::{ClassicFlow, Control, ScalableFlow, Window};
use crate::marking::MarkDecision;
use crate::queue::{Packet, TrafficClass};
use crate::time::SimTime;

/// Per-flow packet accounting over the whole run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlowStats {
    pub flow_id: u32,
    pub sent: u64,
    /// Refused at the tail of a full queue.
    pub tail_drops: u64,
    pub enqueued: u64,
    /// Taken off the queue by the scheduler, including AQM drops.
    pub dequeued: u64,
    pub aqm_drops: u64,
    pub forwarded: u64,
    pub queued_at_end: u64,
    pub acked: u64,
    pub marks_echoed: u64,
}

impl FlowStats {
    /// Packets enqueued = dequeued + still queued, with AQM drops a subset
    /// of dequeued packets.
    pub fn is_conserved(&self) -> bool {
        self.enqueued == self.dequeued + self.queued_at_end
            && self.dequeued == self.forwarded + self.aqm_drops
            && self.sent >= self.tail_drops + self.enqueued
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub flows: Vec<FlowStats>,
    pub events: u64,
    pub max_l4s_backlog: u64,
    pub max_classic_backlog: u64,
}

#[derive(Debug, Default)]
struct Interval {
    acked_bytes: u64,
    marks: u64,
    drops: u64,
    sojourn: Vec<u64>,
    vsojourn: Vec<u64>,
    fractions: Vec<f64>,
}

#[derive(Debug)]
struct FlowRt {
    id: u32,
    class: TrafficClass,
    control: Control,
    rtt: SimTime,
    pacing: bool,
    started: bool,
    next_send_at: SimTime,
    timer_pending: bool,
    stats: FlowStats,
    iv: Interval,
}

impl FlowRt {
    fn half_rtt(&self) -> SimTime {
        SimTime::from_nanos(self.rtt.as_nanos() / 2)
    }
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    events: EventQueue,
    dualq: DualQ,
    rng: ChaCha8Rng,
    flows: Vec<FlowRt>,
    in_service: Option<(Packet, QueueSel)>,
    busy_from: Option<SimTime>,
    iv_busy: u64,
    last_sample: SimTime,
    next_packet_id: u64,
    records: Vec<MetricsRecord>,
    processed: u64,
    max_l4s_backlog: u64,
    max_classic_backlog: u64,
}

/// Validates and runs a scenario.
pub fn run(s: &Scenario) -> Result<RunOutput, ScenarioError> {
    let cfg = s.build()?;
    Ok(run_config(&cfg))
}

pub fn run_config(cfg: &SimConfig) -> RunOutput {
    let mut sim = Sim::new(cfg);
    sim.run();
    sim.finish()
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a SimConfig) -> Self {
        let flows = (0..cfg.flows.total())
            .map(|id| {
                let class = cfg.flows.class_of(id);
                let rtt = cfg.flows.rtts[id as usize];
                let pacing = match class {
                    TrafficClass::L4S => cfg.pacing,
                    TrafficClass::Classic => cfg.classic_pacing,
                };
                let w = Window::new(cfg.mtu, cfg.initial_cwnd_pkts, rtt, pacing);
                let control = match class {
                    TrafficClass::L4S => Control::Scalable(ScalableFlow::new(w, cfg.g)),
                    TrafficClass::Classic => Control::Classic(ClassicFlow::new(w)),
                };
                FlowRt {
                    id,
                    class,
                    control,
                    rtt,
                    pacing,
                    started: false,
                    next_send_at: SimTime::ZERO,
                    timer_pending: false,
                    stats: FlowStats {
                        flow_id: id,
                        ..FlowStats::default()
                    },
                    iv: Interval::default(),
                }
            })
            .collect();
        Sim {
            cfg,
            events: EventQueue::new(),
            dualq: DualQ::new(cfg.dualq.clone()),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            flows,
            in_service: None,
            busy_from: None,
            iv_busy: 0,
            last_sample: SimTime::ZERO,
            next_packet_id: 0,
            records: Vec::new(),
            processed: 0,
            max_l4s_backlog: 0,
            max_classic_backlog: 0,
        }
    }

    fn run(&mut self) {
        let cfg = self.cfg;
        for (i, t) in cfg.flows.start_times.iter().enumerate() {
            self.events.schedule(*t, EventKind::FlowStart(i as u32));
        }
        for (i, seg) in cfg.link.segments().iter().enumerate().skip(1) {
            self.events.schedule(seg.start, EventKind::RateChange(i));
        }
        self.events.schedule(cfg.dualq.base_pi.update_interval, EventKind::BasePiUpdate);
        if let Some(iv) = self.dualq.native_pi_interval() {
            self.events.schedule(iv, EventKind::NativePiUpdate);
        }
        self.events
            .schedule(cfg.sample_interval.min(cfg.duration), EventKind::MetricsSample);

        while let Some(ev) = self.events.pop() {
            if ev.time > cfg.duration {
                break;
            }
            self.processed += 1;
            let now = ev.time;
            let done = self.handle(now, ev.kind);
            if cfg!(debug_assertions) {
                self.check_invariants();
            }
            if done {
                break;
            }
        }
    }

    /// Returns true once the final sample has been taken.
    fn handle(&mut self, now: SimTime, kind: EventKind) -> bool {
        match kind {
            EventKind::FlowStart(f) => {
                self.flows[f as usize].started = true;
                self.try_send(f, now);
            }
            EventKind::SendTimer(f) => {
                self.flows[f as usize].timer_pending = false;
                self.try_send(f, now);
            }
            EventKind::PacketArrival(p) => self.on_arrival(p, now),
            EventKind::LinkDequeue => self.on_tx_complete(now),
            EventKind::AckArrival {
                flow_id,
                seq,
                size,
                marked,
            } => {
                let f = &mut self.flows[flow_id as usize];
                f.stats.acked += 1;
                f.iv.acked_bytes += u64::from(size);
                if marked {
                    f.stats.marks_echoed += 1;
                    f.iv.marks += 1;
                }
                if let Some(frac) = f.control.on_ack(seq, u64::from(size), marked) {
                    f.iv.fractions.push(frac);
                }
                self.try_send(flow_id, now);
            }
            EventKind::LossNotify { flow_id, seq, size } => {
                self.flows[flow_id as usize].control.on_loss(seq, u64::from(size));
                self.try_send(flow_id, now);
            }
            EventKind::BasePiUpdate => {
                self.dualq.update_base(now);
                let iv = self.cfg.dualq.base_pi.update_interval;
                self.events.schedule(now + iv, EventKind::BasePiUpdate);
            }
            EventKind::NativePiUpdate => {
                self.dualq.update_native(now, &self.cfg.link);
                if let Some(iv) = self.dualq.native_pi_interval() {
                    self.events.schedule(now + iv, EventKind::NativePiUpdate);
                }
            }
            EventKind::RateChange(_) => {
                // service times pick up the new rate at the next dequeue
                self.dualq.sync_idle(now, &self.cfg.link);
            }
            EventKind::MetricsSample => {
                self.sample(now);
                if now >= self.cfg.duration {
                    return true;
                }
                let next = (now + self.cfg.sample_interval).min(self.cfg.duration);
                self.events.schedule(next, EventKind::MetricsSample);
            }
        }
        false
    }

    fn try_send(&mut self, id: u32, now: SimTime) {
        let f = &mut self.flows[id as usize];
        if !f.started {
            return;
        }
        while f.control.window().can_send() {
            if f.pacing && now < f.next_send_at {
                if !f.timer_pending {
                    f.timer_pending = true;
                    self.events.schedule(f.next_send_at, EventKind::SendTimer(id));
                }
                return;
            }
            let w = f.control.window_mut();
            let seq = w.on_send();
            let mut p = Packet::new(self.next_packet_id, id, self.cfg.mtu, f.class);
            p.seq = seq;
            self.next_packet_id += 1;
            f.stats.sent += 1;
            if f.pacing {
                f.next_send_at = f.control.window().pace_next_send(now);
            }
            self.events.schedule(now + f.half_rtt(), EventKind::PacketArrival(p));
        }
    }

    fn on_arrival(&mut self, p: Packet, now: SimTime) {
        let id = p.flow_id as usize;
        match self.dualq.enqueue(p, now, &self.cfg.link) {
            Ok(_) => self.flows[id].stats.enqueued += 1,
            Err(p) => {
                let f = &mut self.flows[id];
                f.stats.tail_drops += 1;
                f.iv.drops += 1;
                self.events.schedule(
                    now + f.half_rtt(),
                    EventKind::LossNotify {
                        flow_id: p.flow_id,
                        seq: p.seq,
                        size: p.size,
                    },
                );
            }
        }
        self.max_l4s_backlog = self.max_l4s_backlog.max(self.dualq.l4s_queue().backlog_bytes());
        self.max_classic_backlog = self
            .max_classic_backlog
            .max(self.dualq.classic_queue().backlog_bytes());
        if self.in_service.is_none() {
            self.start_transmission(now);
        }
    }

    fn start_transmission(&mut self, now: SimTime) {
        debug_assert!(self.in_service.is_none());
        loop {
            let Some(d) = self.dualq.dequeue(now, &self.cfg.link, &mut self.rng) else {
                if let Some(b) = self.busy_from.take() {
                    self.iv_busy += (now - b).as_nanos();
                }
                return;
            };
            let f = &mut self.flows[d.packet.flow_id as usize];
            f.stats.dequeued += 1;
            if d.decision == MarkDecision::Drop {
                f.stats.aqm_drops += 1;
                f.iv.drops += 1;
                self.events.schedule(
                    now + f.half_rtt(),
                    EventKind::LossNotify {
                        flow_id: d.packet.flow_id,
                        seq: d.packet.seq,
                        size: d.packet.size,
                    },
                );
                continue;
            }
            f.stats.forwarded += 1;
            f.iv.sojourn.push(d.sojourn.as_nanos());
            if let Some(v) = d.virtual_sojourn {
                f.iv.vsojourn.push(v.as_nanos());
            }
            let service = self.cfg.link.link_service(now, d.packet.size);
            if self.busy_from.is_none() {
                self.busy_from = Some(now);
            }
            self.in_service = Some((d.packet, d.queue));
            self.events.schedule(now + service, EventKind::LinkDequeue);
            return;
        }
    }

    fn on_tx_complete(&mut self, now: SimTime) {
        let (p, q) = self.in_service.take().expect("link dequeue without a packet in service");
        self.dualq.on_transmit_complete(q, p.size, now);
        let f = &self.flows[p.flow_id as usize];
        self.events.schedule(
            now + f.half_rtt(),
            EventKind::AckArrival {
                flow_id: p.flow_id,
                seq: p.seq,
                size: p.size,
                marked: p.marked,
            },
        );
        self.start_transmission(now);
    }

    fn sample(&mut self, now: SimTime) {
        let interval = now - self.last_sample;
        if interval == SimTime::ZERO {
            return;
        }
        if let Some(b) = self.busy_from {
            self.iv_busy += (now - b).as_nanos();
            self.busy_from = Some(now);
        }
        let utilization = self.iv_busy as f64 / interval.as_nanos() as f64;
        self.iv_busy = 0;
        self.dualq.sync_idle(now, &self.cfg.link);
        let secs = interval.as_secs_f64();
        for f in &mut self.flows {
            let iv = std::mem::take(&mut f.iv);
            let (backlog, vbacklog) = match f.class {
                TrafficClass::L4S => (self.dualq.l4s_queue().backlog_bytes(), self.dualq.vbacklog()),
                TrafficClass::Classic => (self.dualq.classic_queue().backlog_bytes(), 0),
            };
            let mean = if iv.sojourn.is_empty() {
                0
            } else {
                iv.sojourn.iter().sum::<u64>() / iv.sojourn.len() as u64
            };
            self.records.push(MetricsRecord {
                time: now,
                interval,
                flow_id: f.id,
                class: f.class,
                goodput_bps: iv.acked_bytes as f64 * 8.0 / secs,
                cwnd_bytes: f.control.window().cwnd,
                acked_bytes: iv.acked_bytes,
                marks: iv.marks,
                drops: iv.drops,
                real_sojourn_mean_ns: mean,
                real_sojourn_p99_ns: p99(&iv.sojourn),
                virtual_sojourn_p99_ns: p99(&iv.vsojourn),
                backlog_bytes: backlog,
                vbacklog_bytes: vbacklog,
                utilization,
                sojourn_samples: iv.sojourn,
                virtual_sojourn_samples: iv.vsojourn,
                rtt_mark_fractions: iv.fractions,
            });
        }
        self.last_sample = now;
    }

    fn check_invariants(&self) {
        self.dualq.check_invariants();
        for f in &self.flows {
            f.control.check_invariants();
        }
        // work conservation
        if self.in_service.is_none() {
            assert!(self.dualq.is_empty(), "link idle with packets queued");
        }
    }

    fn finish(mut self) -> RunOutput {
        for f in &mut self.flows {
            f.stats.queued_at_end = match f.class {
                TrafficClass::L4S => self.dualq.l4s_queue().iter().filter(|(p, _)| p.flow_id == f.id).count(),
                TrafficClass::Classic => self
                    .dualq
                    .classic_queue()
                    .iter()
                    .filter(|(p, _)| p.flow_id == f.id)
                    .count(),
            } as u64;
            debug_assert!(f.stats.is_conserved(), "conservation violated: {:?}", f.stats);
        }
        RunOutput {
            records: self.records,
            flows: self.flows.into_iter().map(|f| f.stats).collect(),
            events: self.processed,
            max_l4s_backlog: self.max_l4s_backlog,
            max_classic_backlog: self.max_classic_backlog,
        }
    }
}
