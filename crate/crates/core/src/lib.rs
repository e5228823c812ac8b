//! Packet-level laboratory for native L4S AQMs.
//!
//! The building blocks are a FIFO queue with per-packet metadata, a virtual
//! queue overlay measured either as a byte counter or by virtual sojourn
//! time, native marking policies (step, ramp, PI) and a DualQ Coupled AQM.
//! [`sim`] closes the loop with scalable and Classic senders over a
//! variable-rate link.

pub mod dualq;
pub mod endpoints;
pub mod link;
pub mod marking;
pub mod queue;
pub mod sim;
pub mod time;
pub mod vq;

pub use dualq::{DualQ, DualQConfig, NativeAqm, VqMode};
pub use link::{LinkProfile, LinkSegment};
pub use queue::{FifoQueue, Packet, PacketMeta, TrafficClass};
pub use sim::{run, MetricsRecord, RunOutput, Scenario, Summary};
pub use time::SimTime;
