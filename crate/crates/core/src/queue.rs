//! FIFO packet queue with per-packet enqueue timestamps and cumulative byte
//! counters. Both the real queues and the virtual-queue overlay use the same
//! `PacketMeta` record.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrafficClass {
    L4S,
    Classic,
}

impl TrafficClass {
    pub fn as_str(self) -> &'static str {
        match self {
            TrafficClass::L4S => "L4S",
            TrafficClass::Classic => "Classic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packet {
    pub id: u64,
    pub flow_id: u32,
    /// Per-flow transmission sequence number.
    pub seq: u64,
    pub size: u32,
    pub traffic_class: TrafficClass,
    pub marked: bool,
    pub dropped: bool,
}

impl Packet {
    pub fn new(id: u64, flow_id: u32, size: u32, traffic_class: TrafficClass) -> Self {
        debug_assert!(size >= 1);
        Packet {
            id,
            flow_id,
            seq: 0,
            size,
            traffic_class,
            marked: false,
            dropped: false,
        }
    }

    /// Sets the ECN mark. A dropped packet is never marked.
    pub fn mark(&mut self) {
        if !self.dropped {
            self.marked = true;
        }
    }

    pub fn drop_packet(&mut self) {
        self.marked = false;
        self.dropped = true;
    }
}

/// Metadata kept per queued packet.
///
/// In the virtual queue the head entry's `size` may be partially consumed,
/// so it can be smaller than the original packet (or zero).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PacketMeta {
    pub size: u64,
    pub enq_time: SimTime,
    /// Bit width of the virtual backlog seen when the packet was enqueued.
    pub vbacklog_enq_width: u8,
}

#[derive(Debug)]
struct Entry {
    packet: Packet,
    meta: PacketMeta,
}

#[derive(Debug, Default)]
pub struct FifoQueue {
    entries: VecDeque<Entry>,
    count_enq: u64,
    count_deq: u64,
    /// Number of packets dequeued so far; the absolute index of the head.
    head: u64,
    capacity: Option<u64>,
}

impl FifoQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// A queue that tail-drops once the backlog would exceed `capacity` bytes.
    pub fn with_capacity_limit(capacity: u64) -> Self {
        FifoQueue {
            capacity: Some(capacity),
            ..Self::default()
        }
    }

    pub fn capacity_limit(&self) -> Option<u64> {
        self.capacity
    }

    /// Appends `p` with an enqueue timestamp of `now`. On tail drop the
    /// packet comes back flagged as dropped and the counters are untouched.
    pub fn enqueue(&mut self, mut p: Packet, now: SimTime) -> Result<(), Packet> {
        let size = u64::from(p.size);
        if let Some(cap) = self.capacity {
            if self.backlog_bytes() + size > cap {
                p.drop_packet();
                return Err(p);
            }
        }
        self.count_enq += size;
        self.entries.push_back(Entry {
            meta: PacketMeta {
                size,
                enq_time: now,
                vbacklog_enq_width: 0,
            },
            packet: p,
        });
        Ok(())
    }

    /// Removes the head packet and returns it with its sojourn time.
    pub fn dequeue_head(&mut self, now: SimTime) -> Option<(Packet, SimTime)> {
        let entry = self.entries.pop_front()?;
        self.count_deq += entry.meta.size;
        self.head += 1;
        let sojourn = now.saturating_sub(entry.meta.enq_time);
        Some((entry.packet, sojourn))
    }

    pub fn backlog_bytes(&self) -> u64 {
        self.count_enq - self.count_deq
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_enq(&self) -> u64 {
        self.count_enq
    }

    pub fn count_deq(&self) -> u64 {
        self.count_deq
    }

    /// Absolute index (count of packets ever dequeued) of the current head.
    pub fn head_index(&self) -> u64 {
        self.head
    }

    pub fn head(&self) -> Option<&Packet> {
        self.entries.front().map(|e| &e.packet)
    }

    pub fn head_meta(&self) -> Option<&PacketMeta> {
        self.entries.front().map(|e| &e.meta)
    }

    /// Sojourn the head packet would have if dequeued at `now`; zero if empty.
    pub fn head_sojourn(&self, now: SimTime) -> SimTime {
        self.head_meta()
            .map_or(SimTime::ZERO, |m| now.saturating_sub(m.enq_time))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Packet, &PacketMeta)> {
        self.entries.iter().map(|e| (&e.packet, &e.meta))
    }

    pub fn check_invariants(&self) {
        let sum: u64 = self.entries.iter().map(|e| e.meta.size).sum();
        assert_eq!(sum, self.backlog_bytes(), "fifo backlog/meta mismatch");
        for e in &self.entries {
            assert_eq!(u64::from(e.packet.size), e.meta.size);
            assert!(!(e.packet.marked && e.packet.dropped));
        }
        if let Some(cap) = self.capacity {
            assert!(self.backlog_bytes() <= cap);
        }
    }
}
