//! Declarative experiment description, loaded from TOML.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dualq::{DualQConfig, NativeAqm, VqMode};
use crate::endpoints::{FlowSetup, DEFAULT_G, DEFAULT_INITIAL_CWND_PKTS};
use crate::link::{LinkProfile, LinkSegment};
use crate::marking::{
    ByteRamp, ByteStepParams, MtuFloor, PiParams, RampParams, StepParams,
};
use crate::time::SimTime;
use crate::vq::{DrainMode, VqParams, DEFAULT_LGE};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Issue {
    pub field: String,
    pub message: String,
}

/// Every problem found in a scenario, not just the first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioError {
    pub issues: Vec<Issue>,
}

impl ScenarioError {
    fn single(field: &str, message: impl Into<String>) -> Self {
        ScenarioError {
            issues: vec![Issue {
                field: field.to_string(),
                message: message.into(),
            }],
        }
    }

    pub fn fields(&self) -> Vec<&str> {
        self.issues.iter().map(|i| i.field.as_str()).collect()
    }
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid scenario:")?;
        for i in &self.issues {
            write!(f, "\n  {}: {}", i.field, i.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ScenarioError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_mtu")]
    pub mtu: u32,
    #[serde(default = "d_sample_ms")]
    pub sample_interval_ms: f64,
    pub link: LinkConfig,
    pub flows: FlowsConfig,
    #[serde(default)]
    pub aqm: AqmConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub segments: Vec<SegmentConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub start_ms: f64,
    pub rate_bps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowsConfig {
    #[serde(default)]
    pub n_l: u32,
    #[serde(default)]
    pub n_c: u32,
    #[serde(default = "d_rtt_ms")]
    pub rtt_ms: f64,
    /// Per-flow RTTs, overriding `rtt_ms`; scalable flows first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtts_ms: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_ms: Option<Vec<f64>>,
    #[serde(default = "d_true")]
    pub pacing: bool,
    #[serde(default)]
    pub classic_pacing: bool,
    #[serde(default = "d_init_cwnd")]
    pub initial_cwnd_pkts: u32,
    #[serde(default = "d_g")]
    pub dctcp_g: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NativeKind {
    None,
    #[default]
    Step,
    ByteStep,
    Ramp,
    Pi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AqmConfig {
    #[serde(default)]
    pub vq: VqMode,
    #[serde(default = "d_lge")]
    pub lge: u8,
    #[serde(default)]
    pub drain_mode: DrainMode,
    #[serde(default = "d_true")]
    pub idle_drain: bool,
    #[serde(default = "d_k")]
    pub k: f64,
    #[serde(default)]
    pub native: NativeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupled_derandomize: Option<bool>,
    #[serde(default = "d_floor_packets")]
    pub floor_packets: u32,
    #[serde(default = "d_true")]
    pub floor_enabled: bool,
    /// Per-queue buffer, as a delay at the highest link rate.
    #[serde(default = "d_buffer_ms")]
    pub buffer_ms: f64,
    #[serde(default)]
    pub step: StepConfig,
    #[serde(default)]
    pub byte_step: ByteStepConfig,
    #[serde(default)]
    pub ramp: RampConfig,
    #[serde(default)]
    pub native_pi: PiConfig,
    #[serde(default = "PiConfig::base")]
    pub base_pi: PiConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    #[serde(default = "d_threshold_ms")]
    pub threshold_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByteStepConfig {
    #[serde(default = "d_byte_threshold")]
    pub threshold_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampConfig {
    #[serde(default = "d_ramp_min")]
    pub min_ms: f64,
    #[serde(default = "d_ramp_max")]
    pub max_ms: f64,
    #[serde(default = "d_one")]
    pub max_p: f64,
    #[serde(default = "d_true")]
    pub derandomize: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub byte_min: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub byte_max: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiConfig {
    #[serde(default = "d_pi_target")]
    pub target_ms: f64,
    #[serde(default = "d_pi_alpha")]
    pub alpha: f64,
    #[serde(default = "d_pi_beta")]
    pub beta: f64,
    #[serde(default = "d_pi_interval")]
    pub interval_ms: f64,
}

fn d_mtu() -> u32 {
    1500
}
fn d_sample_ms() -> f64 {
    10.0
}
fn d_rtt_ms() -> f64 {
    10.0
}
fn d_true() -> bool {
    true
}
fn d_init_cwnd() -> u32 {
    DEFAULT_INITIAL_CWND_PKTS
}
fn d_g() -> f64 {
    DEFAULT_G
}
fn d_lge() -> u8 {
    DEFAULT_LGE
}
fn d_k() -> f64 {
    2.0
}
fn d_floor_packets() -> u32 {
    2
}
fn d_buffer_ms() -> f64 {
    250.0
}
fn d_threshold_ms() -> f64 {
    1.0
}
fn d_byte_threshold() -> u64 {
    5000
}
fn d_ramp_min() -> f64 {
    0.5
}
fn d_ramp_max() -> f64 {
    1.5
}
fn d_one() -> f64 {
    1.0
}
fn d_pi_target() -> f64 {
    0.5
}
fn d_pi_alpha() -> f64 {
    0.16
}
fn d_pi_beta() -> f64 {
    3.2
}
fn d_pi_interval() -> f64 {
    16.0
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            threshold_ms: d_threshold_ms(),
        }
    }
}

impl Default for ByteStepConfig {
    fn default() -> Self {
        ByteStepConfig {
            threshold_bytes: d_byte_threshold(),
        }
    }
}

impl Default for RampConfig {
    fn default() -> Self {
        RampConfig {
            min_ms: d_ramp_min(),
            max_ms: d_ramp_max(),
            max_p: 1.0,
            derandomize: true,
            byte_min: None,
            byte_max: None,
        }
    }
}

impl Default for PiConfig {
    fn default() -> Self {
        PiConfig {
            target_ms: d_pi_target(),
            alpha: d_pi_alpha(),
            beta: d_pi_beta(),
            interval_ms: d_pi_interval(),
        }
    }
}

impl PiConfig {
    /// Defaults for the Classic-queue base AQM.
    pub fn base() -> Self {
        PiConfig {
            target_ms: 1.0,
            ..PiConfig::default()
        }
    }

    fn params(&self) -> PiParams {
        PiParams {
            target: SimTime::from_millis_f64(self.target_ms),
            alpha: self.alpha,
            beta: self.beta,
            update_interval: SimTime::from_millis_f64(self.interval_ms),
        }
    }
}

impl Default for AqmConfig {
    fn default() -> Self {
        AqmConfig {
            vq: VqMode::Off,
            lge: DEFAULT_LGE,
            drain_mode: DrainMode::default(),
            idle_drain: true,
            k: 2.0,
            native: NativeKind::Step,
            coupled_derandomize: None,
            floor_packets: 2,
            floor_enabled: true,
            buffer_ms: d_buffer_ms(),
            step: StepConfig::default(),
            byte_step: ByteStepConfig::default(),
            ramp: RampConfig::default(),
            native_pi: PiConfig::default(),
            base_pi: PiConfig::base(),
        }
    }
}

impl Default for FlowsConfig {
    fn default() -> Self {
        FlowsConfig {
            n_l: 1,
            n_c: 0,
            rtt_ms: d_rtt_ms(),
            rtts_ms: None,
            start_ms: None,
            pacing: true,
            classic_pacing: false,
            initial_cwnd_pkts: DEFAULT_INITIAL_CWND_PKTS,
            dctcp_g: DEFAULT_G,
        }
    }
}

impl LinkConfig {
    pub fn constant(rate_bps: u64) -> Self {
        LinkConfig {
            segments: vec![SegmentConfig {
                start_ms: 0.0,
                rate_bps,
            }],
        }
    }
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            duration_s: 10.0,
            seed: 1,
            mtu: d_mtu(),
            sample_interval_ms: d_sample_ms(),
            link: LinkConfig::constant(40_000_000),
            flows: FlowsConfig::default(),
            aqm: AqmConfig::default(),
        }
    }
}

/// Fully resolved inputs to the engine.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub duration: SimTime,
    pub seed: u64,
    pub mtu: u32,
    pub sample_interval: SimTime,
    pub link: LinkProfile,
    pub flows: FlowSetup,
    pub pacing: bool,
    pub classic_pacing: bool,
    pub initial_cwnd_pkts: u32,
    pub g: f64,
    pub dualq: DualQConfig,
}

struct Collector(Vec<Issue>);

impl Collector {
    fn check(&mut self, ok: bool, field: &str, message: impl Into<String>) {
        if !ok {
            self.0.push(Issue {
                field: field.to_string(),
                message: message.into(),
            });
        }
    }

    fn err<E: fmt::Display>(&mut self, field: &str, r: Result<(), E>) {
        if let Err(e) = r {
            self.check(false, field, e.to_string());
        }
    }
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

impl Scenario {
    pub fn from_toml_str(s: &str) -> Result<Scenario, ScenarioError> {
        toml::from_str(s).map_err(|e| ScenarioError::single("<document>", e.to_string().trim_end()))
    }

    pub fn from_toml_value(v: toml::Value) -> Result<Scenario, ScenarioError> {
        v.try_into()
            .map_err(|e: toml::de::Error| ScenarioError::single("<document>", e.to_string().trim_end()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.build().map(|_| ())
    }

    fn floor(&self) -> MtuFloor {
        MtuFloor {
            mtu: self.mtu,
            packets: self.aqm.floor_packets,
            enabled: self.aqm.floor_enabled,
        }
    }

    /// Validates and resolves the scenario.
    pub fn build(&self) -> Result<SimConfig, ScenarioError> {
        let mut c = Collector(Vec::new());
        c.check(positive(self.duration_s), "duration_s", "must be > 0");
        c.check(self.mtu >= 64, "mtu", "must be at least 64 bytes");
        c.check(positive(self.sample_interval_ms), "sample_interval_ms", "must be > 0");

        let segments: Vec<LinkSegment> = self
            .link
            .segments
            .iter()
            .map(|s| LinkSegment {
                start: SimTime::from_millis_f64(s.start_ms),
                rate_bps: s.rate_bps,
            })
            .collect();
        let link = LinkProfile::new(segments);
        if let Err(e) = &link {
            c.check(false, "link.segments", e.to_string());
        }

        let f = &self.flows;
        let n = (f.n_l + f.n_c) as usize;
        c.check(n >= 1, "flows.n_l", "at least one flow is required (n_l + n_c >= 1)");
        c.check(positive(f.rtt_ms), "flows.rtt_ms", "must be > 0");
        if let Some(r) = &f.rtts_ms {
            c.check(r.len() == n, "flows.rtts_ms", format!("expected {n} entries, got {}", r.len()));
            c.check(r.iter().all(|x| positive(*x)), "flows.rtts_ms", "all RTTs must be > 0");
        }
        if let Some(s) = &f.start_ms {
            c.check(s.len() == n, "flows.start_ms", format!("expected {n} entries, got {}", s.len()));
            c.check(s.iter().all(|x| x.is_finite() && *x >= 0.0), "flows.start_ms", "must be >= 0");
        }
        c.check(f.initial_cwnd_pkts >= 1, "flows.initial_cwnd_pkts", "must be >= 1");
        c.check(f.dctcp_g > 0.0 && f.dctcp_g <= 1.0, "flows.dctcp_g", "must be in (0, 1]");

        let a = &self.aqm;
        let vq = VqParams::new(a.lge, a.drain_mode, a.idle_drain);
        if let Err(e) = &vq {
            c.check(false, "aqm.lge", e.to_string());
        }
        c.check(positive(a.k), "aqm.k", "coupling factor must be > 0");
        c.check(positive(a.buffer_ms), "aqm.buffer_ms", "must be > 0");
        c.err("aqm.floor_packets", self.floor().validate());

        let native = match a.native {
            NativeKind::None => NativeAqm::None,
            NativeKind::Step => {
                let p = StepParams {
                    threshold: SimTime::from_millis_f64(a.step.threshold_ms),
                    floor: self.floor(),
                };
                c.err("aqm.step.threshold_ms", p.validate());
                NativeAqm::Step(p)
            }
            NativeKind::ByteStep => {
                c.check(a.byte_step.threshold_bytes > 0, "aqm.byte_step.threshold_bytes", "must be > 0");
                NativeAqm::ByteStep(ByteStepParams {
                    threshold_bytes: a.byte_step.threshold_bytes,
                })
            }
            NativeKind::Ramp => {
                let r = &a.ramp;
                let byte_mode = match (r.byte_min, r.byte_max) {
                    (Some(min_th), Some(max_th)) => Some(ByteRamp { min_th, max_th }),
                    (None, None) => None,
                    _ => {
                        c.check(false, "aqm.ramp.byte_min", "byte_min and byte_max must be given together");
                        None
                    }
                };
                let p = RampParams {
                    t_min: SimTime::from_millis_f64(r.min_ms),
                    t_max: SimTime::from_millis_f64(r.max_ms),
                    max_p: r.max_p,
                    derandomize: r.derandomize,
                    byte_mode,
                    floor: self.floor(),
                };
                c.err("aqm.ramp", p.validate());
                NativeAqm::ramp(p)
            }
            NativeKind::Pi => {
                let p = a.native_pi.params();
                c.err("aqm.native_pi", p.validate());
                NativeAqm::Pi {
                    state: crate::marking::PiState::new(p),
                    floor: self.floor(),
                }
            }
        };
        let base_pi = a.base_pi.params();
        c.err("aqm.base_pi", base_pi.validate());

        if !c.0.is_empty() {
            return Err(ScenarioError { issues: c.0 });
        }
        let link = link.expect("checked");
        let max_rate = link.segments().iter().map(|s| s.rate_bps).max().unwrap_or(1);
        let buffer = (a.buffer_ms / 1000.0 * max_rate as f64 / 8.0) as u64;
        let buffer = buffer.max(u64::from(self.mtu) * 4);

        let rtts = match &f.rtts_ms {
            Some(r) => r.iter().map(|x| SimTime::from_millis_f64(*x)).collect(),
            None => vec![SimTime::from_millis_f64(f.rtt_ms); n],
        };
        let start_times = match &f.start_ms {
            Some(s) => s.iter().map(|x| SimTime::from_millis_f64(*x)).collect(),
            None => vec![SimTime::ZERO; n],
        };

        Ok(SimConfig {
            duration: SimTime::from_secs_f64(self.duration_s),
            seed: self.seed,
            mtu: self.mtu,
            sample_interval: SimTime::from_millis_f64(self.sample_interval_ms),
            link,
            flows: FlowSetup {
                n_l: f.n_l,
                n_c: f.n_c,
                start_times,
                rtts,
            },
            pacing: f.pacing,
            classic_pacing: f.classic_pacing,
            initial_cwnd_pkts: f.initial_cwnd_pkts,
            g: f.dctcp_g,
            dualq: DualQConfig {
                vq_mode: a.vq,
                vq: vq.expect("checked"),
                native,
                base_pi,
                k: a.k,
                coupled_derandomize: a.coupled_derandomize,
                l4s_capacity: Some(buffer),
                classic_capacity: Some(buffer),
            },
        })
    }
}

/// Parses a command-line value as a TOML literal, falling back to a string.
pub fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets a dotted key such as `aqm.step.threshold_ms` in a TOML document,
/// creating intermediate tables as needed.
pub fn set_param(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ScenarioError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ScenarioError::single(key, "malformed parameter key"));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut table = doc;
    for p in path {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ScenarioError::single(key, format!("`{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
