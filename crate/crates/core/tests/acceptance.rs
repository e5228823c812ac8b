//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use l4slab::dualq::{DualQ, DualQConfig, NativeAqm, QueueSel, VqMode};
use l4slab::link::LinkProfile;
use l4slab::marking::{Credit, PiParams, PiState};
use l4slab::queue::{Packet, TrafficClass};
use l4slab::sim::scenario::{LinkConfig, NativeKind};
use l4slab::sim::{run, summarize_window, write_csv, Scenario, Summary};
use l4slab::time::SimTime;
use l4slab::vq::{clz_shift, scale_sojourn_clz, scale_sojourn_exact};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

fn summary_after(s: &Scenario, from_s: u64) -> Summary {
    let out = run(s).expect("scenario is valid");
    summarize_window(&out.records, SimTime::from_secs(from_s)).expect("records in window")
}

fn ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

// 1 -------------------------------------------------------------------------

struct Trace {
    rate_bps: u64,
    arrivals: Vec<(SimTime, u32)>,
}

fn random_trace(rng: &mut ChaCha8Rng) -> Trace {
    let rate_bps = rng.random_range(1_000_000..=100_000_000u64);
    let n = rng.random_range(1..=200usize);
    let mean_service_ns = 800.0 * 8e9 / rate_bps as f64;
    // mix of load levels so traces contain both busy and idle periods
    let load = rng.random_range(0.3..1.6);
    let mut t = 0u64;
    let arrivals = (0..n)
        .map(|_| {
            let gap = -rng.random::<f64>().max(1e-12).ln() * mean_service_ns / load;
            t += gap as u64;
            (SimTime::from_nanos(t), rng.random_range(64..=1500u32))
        })
        .collect();
    Trace { rate_bps, arrivals }
}

/// Fluid server at (1 - 1/64)·R, in units of 1/(64·8e9) byte.
struct Fluid {
    v: u128,
    rate_bps: u128,
    at: u64,
}

const UNITS_PER_BYTE: u128 = 64 * 8_000_000_000;

impl Fluid {
    fn advance(&mut self, now: SimTime) {
        let dt = u128::from(now.as_nanos() - self.at);
        self.v = self.v.saturating_sub(63 * self.rate_bps * dt);
        self.at = now.as_nanos();
    }

    fn bytes(&self) -> f64 {
        self.v as f64 / UNITS_PER_BYTE as f64
    }
}

fn vq_config(mode: VqMode) -> DualQConfig {
    DualQConfig {
        vq_mode: mode,
        native: NativeAqm::None,
        base_pi: PiParams {
            alpha: 0.0,
            beta: 0.0,
            ..PiParams::default()
        },
        ..DualQConfig::default()
    }
}

/// Drives both VQ representations and the fluid oracle through one trace.
/// Returns the largest fluid deviation, or an error on any exact mismatch.
fn check_trace(tr: &Trace, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let link = LinkProfile::constant(tr.rate_bps);
    let mut soj = DualQ::new(vq_config(VqMode::Sojourn));
    let mut byt = DualQ::new(vq_config(VqMode::Bytes));
    let mut fluid = Fluid {
        v: 0,
        rate_bps: u128::from(tr.rate_bps),
        at: 0,
    };
    let max_pkt = tr.arrivals.iter().map(|a| a.1).max().unwrap_or(0) as f64;
    let mut worst = 0.0f64;
    let mut next = 0usize;
    // completion time and size of the packet on the wire
    let mut in_service: Option<(SimTime, u32)> = None;
    loop {
        let arrival = tr.arrivals.get(next).map(|a| a.0);
        let now = match (arrival, in_service) {
            (None, None) => break,
            (Some(a), Some((b, _))) => a.min(b),
            (Some(a), None) => a,
            (None, Some((b, _))) => b,
        };
        fluid.advance(now);
        if let Some((done, size)) = in_service.filter(|s| s.0 == now) {
            for q in [&mut soj, &mut byt] {
                q.on_transmit_complete(QueueSel::L4S, size, done);
            }
            in_service = None;
        } else {
            let size = tr.arrivals[next].1;
            for q in [&mut soj, &mut byt] {
                q.enqueue(Packet::new(next as u64, 0, size, TrafficClass::L4S), now, &link)
                    .expect("unbounded");
            }
            fluid.v += u128::from(size) * UNITS_PER_BYTE;
            next += 1;
        }
        if in_service.is_none() {
            let a = soj.dequeue(now, &link, rng);
            let b = byt.dequeue(now, &link, rng);
            if let (Some(a), Some(b)) = (a, b) {
                assert_eq!(a.packet.id, b.packet.id);
                let d = link.link_service(now, a.packet.size);
                in_service = Some((now + d, a.packet.size));
            }
        }
        soj.sync_idle(now, &link);
        byt.sync_idle(now, &link);
        if soj.vbacklog() != byt.vbacklog() {
            return Err(format!("byte VQ {} != sojourn VQ {} at {now}", byt.vbacklog(), soj.vbacklog()));
        }
        soj.check_invariants();
        let dev = (soj.vbacklog() as f64 - fluid.bytes()).abs();
        worst = worst.max(dev);
        if dev > max_pkt {
            return Err(format!("fluid deviation {dev:.1} B > {max_pkt} B at {now}"));
        }
    }
    Ok(worst)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let tr = random_trace(&mut rng);
        match check_trace(&tr, &mut rng) {
            Ok(w) => worst = worst.max(w),
            Err(e) => return outcome(false, format!("trace {i}: {e}")),
        }
    }
    let el = start.elapsed();
    outcome(
        within(el, 10),
        format!("1000 traces, byte VQ exact, worst fluid deviation {worst:.1} B, {:.2}s", el.as_secs_f64()),
    )
}

// 2 -------------------------------------------------------------------------

fn anchor_scenario(vq: VqMode) -> Scenario {
    let mut s = Scenario {
        duration_s: 30.0,
        seed: 11,
        link: LinkConfig::constant(40_000_000),
        ..Scenario::default()
    };
    s.flows.n_l = 1;
    s.flows.rtt_ms = 10.0;
    s.flows.pacing = true;
    s.aqm.native = NativeKind::Step;
    s.aqm.vq = vq;
    s.aqm.lge = 6;
    s
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let (on, off) = std::thread::scope(|sc| {
        let a = sc.spawn(|| summary_after(&anchor_scenario(VqMode::Sojourn), 10));
        let b = sc.spawn(|| summary_after(&anchor_scenario(VqMode::Off), 10));
        (a.join().unwrap(), b.join().unwrap())
    });
    let el = start.elapsed();
    let pass = (0.90..=0.995).contains(&on.utilization)
        && on.utilization < off.utilization
        && on.p99_sojourn_ns < off.p99_sojourn_ns
        && within(el, 30);
    outcome(
        pass,
        format!(
            "util VQ {:.4} vs off {:.4}; p99 real sojourn VQ {:.3} ms vs off {:.3} ms; {:.1}s",
            on.utilization,
            off.utilization,
            ms(on.p99_sojourn_ns),
            ms(off.p99_sojourn_ns),
            el.as_secs_f64()
        ),
    )
}

// 3 -------------------------------------------------------------------------

const THRESHOLD_BYTES_AT_40M: u64 = 40_000_000 / 8 / 1000;

fn rate_scenario(rate_bps: u64, native: NativeKind) -> Scenario {
    let mut s = Scenario {
        duration_s: 20.0,
        seed: 3,
        link: LinkConfig::constant(rate_bps),
        ..Scenario::default()
    };
    s.flows.n_l = 1;
    s.flows.rtt_ms = 20.0;
    s.aqm.native = native;
    s.aqm.step.threshold_ms = 1.0;
    s.aqm.byte_step.threshold_bytes = THRESHOLD_BYTES_AT_40M;
    s
}

fn criterion_3() -> Outcome {
    let runs: Vec<Summary> = std::thread::scope(|sc| {
        let hs: Vec<_> = [
            (40_000_000, NativeKind::Step),
            (10_000_000, NativeKind::Step),
            (40_000_000, NativeKind::ByteStep),
            (10_000_000, NativeKind::ByteStep),
        ]
        .into_iter()
        .map(|(r, n)| sc.spawn(move || summary_after(&rate_scenario(r, n), 5)))
        .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let p = |i: usize| runs[i].l4s_p99_sojourn_ns as f64;
    let time_ratio = p(1).max(p(0)) / p(1).min(p(0));
    let byte_ratio = p(3) / p(2);
    outcome(
        time_ratio < 2.0 && byte_ratio >= 3.0,
        format!(
            "time step p99 {:.3}/{:.3} ms (ratio {time_ratio:.2}); byte step p99 {:.3}/{:.3} ms (ratio {byte_ratio:.2})",
            p(0) / 1e6,
            p(1) / 1e6,
            p(2) / 1e6,
            p(3) / 1e6
        ),
    )
}

// 4 -------------------------------------------------------------------------

fn floor_scenario(enabled: bool) -> Scenario {
    let mut s = Scenario {
        duration_s: 30.0,
        seed: 4,
        link: LinkConfig::constant(1_500_000),
        ..Scenario::default()
    };
    s.flows.n_l = 1;
    s.flows.rtt_ms = 20.0;
    s.aqm.native = NativeKind::Step;
    s.aqm.vq = VqMode::Sojourn;
    s.aqm.floor_enabled = enabled;
    s
}

fn criterion_4() -> Outcome {
    let (on, off) = std::thread::scope(|sc| {
        let a = sc.spawn(|| summary_after(&floor_scenario(true), 5));
        let b = sc.spawn(|| summary_after(&floor_scenario(false), 5));
        (a.join().unwrap(), b.join().unwrap())
    });
    let ratio = on.utilization / off.utilization;
    outcome(
        ratio >= 1.25,
        format!("util floor on {:.4} vs off {:.4} (ratio {ratio:.2})", on.utilization, off.utilization),
    )
}

// 5 -------------------------------------------------------------------------

/// The step's mean mark fraction goes as sqrt(2/W) and the ramp's as 2/W,
/// so equal means need a smaller window under the ramp; the RTT sets it.
fn smooth_scenario(native: NativeKind, rtt_ms: f64) -> Scenario {
    let mut s = Scenario {
        duration_s: 40.0,
        seed: 5,
        link: LinkConfig::constant(40_000_000),
        ..Scenario::default()
    };
    s.flows.n_l = 1;
    s.flows.rtt_ms = rtt_ms;
    s.aqm.native = native;
    s
}

fn criterion_5() -> Outcome {
    let (step, ramp) = std::thread::scope(|sc| {
        let a = sc.spawn(|| summary_after(&smooth_scenario(NativeKind::Step, 10.0), 10));
        let b = sc.spawn(|| summary_after(&smooth_scenario(NativeKind::Ramp, 2.0), 10));
        (a.join().unwrap(), b.join().unwrap())
    });
    let cv_ratio = ramp.l4s_mark_fraction_cv / step.l4s_mark_fraction_cv;
    let mean_ratio = ramp.l4s_mark_fraction_mean / step.l4s_mark_fraction_mean;
    outcome(
        cv_ratio <= 0.5 && (0.8..=1.2).contains(&mean_ratio),
        format!(
            "CV ramp {:.3} vs step {:.3} (ratio {cv_ratio:.2}); mean F ramp {:.4} vs step {:.4} (ratio {mean_ratio:.2})",
            ramp.l4s_mark_fraction_cv,
            step.l4s_mark_fraction_cv,
            ramp.l4s_mark_fraction_mean,
            step.l4s_mark_fraction_mean
        ),
    )
}

// 6 -------------------------------------------------------------------------

fn coexist_scenario(n_l: u32, n_c: u32) -> Scenario {
    let mut s = Scenario {
        duration_s: 60.0,
        seed: 6,
        link: LinkConfig::constant(40_000_000),
        ..Scenario::default()
    };
    s.flows.n_l = n_l;
    s.flows.n_c = n_c;
    s.flows.rtt_ms = 10.0;
    s.aqm.k = 2.0;
    s
}

fn criterion_6() -> Outcome {
    let (one, two) = std::thread::scope(|sc| {
        let a = sc.spawn(|| summary_after(&coexist_scenario(1, 1), 10));
        let b = sc.spawn(|| summary_after(&coexist_scenario(2, 1), 10));
        (a.join().unwrap(), b.join().unwrap())
    });
    let g = |s: &Summary, id| s.flow(id).unwrap().mean_goodput_bps;
    let ratio = g(&one, 0) / g(&one, 1);
    let fair = two.total_goodput_bps() / 3.0;
    let shares: Vec<f64> = (0..3).map(|id| g(&two, id) / fair).collect();
    let band = |x: f64| (0.5..=2.0).contains(&x);
    outcome(
        band(ratio) && shares.iter().all(|s| band(*s)),
        format!(
            "1L:1C goodput ratio {ratio:.2}; 2L:1C shares of fair {:.2}, {:.2}, {:.2}",
            shares[0], shares[1], shares[2]
        ),
    )
}

// 7 -------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let soj = SimTime::from_millis(1);
    let mut worst_lo = f64::INFINITY;
    let mut worst_hi = 0.0f64;
    for _ in 0..100_000 {
        let enq = rng.random_range(1..=u64::from(u32::MAX));
        let deq = rng.random_range(1..=u64::from(u32::MAX));
        let approx = 2f64.powi(clz_shift(enq, deq));
        let r = approx / (deq as f64 / enq as f64);
        worst_lo = worst_lo.min(r);
        worst_hi = worst_hi.max(r);
        if !(r > 0.5 && r < 2.0) {
            return outcome(false, format!("enq {enq} deq {deq}: ratio {r}"));
        }
    }
    for a in 0..31 {
        for b in 0..31 {
            let (enq, deq) = (1u64 << a, 1u64 << b);
            let exact = scale_sojourn_exact(soj, enq, deq);
            if scale_sojourn_clz(soj, enq, deq) != exact {
                return outcome(false, format!("power-of-two pair 2^{a}, 2^{b} not exact"));
            }
        }
    }
    outcome(
        true,
        format!("10^5 pairs, approximation/exact in [{worst_lo:.3}, {worst_hi:.3}]; 961 power-of-two pairs exact"),
    )
}

// 8 -------------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let n = 10_000u64;
    let mut parts = Vec::new();
    let mut pass = true;
    for p in [1.0, 0.5, 0.25, 0.01] {
        let mut c = Credit::new();
        let credit = (0..n).filter(|_| c.accumulate(p)).count() as f64;
        let mut pi = PiState::with_probability(PiParams::default(), p);
        let interval = (0..n).filter(|_| pi.decide().is_mark()).count() as f64;
        let want = p * n as f64;
        pass &= (credit - want).abs() <= 1.0 && (interval - want).abs() <= 1.0;
        parts.push(format!("p={p}: {credit}/{interval}"));
    }
    outcome(pass, format!("marks (credit/1-over-p) {}", parts.join(", ")))
}

// 9 -------------------------------------------------------------------------

fn criterion_9() -> Outcome {
    let mut s = Scenario {
        duration_s: 5.0,
        seed: 99,
        ..Scenario::default()
    };
    s.flows.n_l = 2;
    s.flows.n_c = 1;
    s.aqm.vq = VqMode::ScaledSojourn;
    s.aqm.native = NativeKind::Ramp;
    s.aqm.ramp.derandomize = false;
    let csv = |s: &Scenario| {
        let mut b = Vec::new();
        write_csv(&run(s).unwrap().records, &mut b).unwrap();
        b
    };
    let (a, b) = (csv(&s), csv(&s));
    s.seed = 100;
    let c = csv(&s);
    outcome(
        a == b && a != c,
        format!("{} bytes identical across runs; different seed differs: {}", a.len(), a != c),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("VQ oracle equivalence", criterion_1),
        ("utilization anchor", criterion_2),
        ("time vs byte threshold", criterion_3),
        ("2-MTU floor", criterion_4),
        ("step vs ramp smoothness", criterion_5),
        ("coexistence", criterion_6),
        ("clz scaling bound", criterion_7),
        ("derandomized marking", criterion_8),
        ("determinism", criterion_9),
    ];
    let results: Vec<Outcome> = std::thread::scope(|sc| {
        let hs: Vec<_> = criteria.iter().map(|(_, f)| sc.spawn(*f)).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut failed = 0;
    for (i, ((name, _), r)) in criteria.iter().zip(&results).enumerate() {
        let tag = if r.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {} ({name}): {}", i + 1, r.detail);
        failed += usize::from(!r.pass);
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
