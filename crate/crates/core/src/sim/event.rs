//! Time-ordered event queue. Ties are broken by insertion order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::queue::Packet;
use crate::time::SimTime;

#[derive(Clone, Debug, PartialEq)]
pub enum EventKind {
    FlowStart(u32),
    SendTimer(u32),
    /// A packet reaches the bottleneck.
    PacketArrival(Packet),
    /// The link finishes serializing the packet in service.
    LinkDequeue,
    AckArrival {
        flow_id: u32,
        seq: u64,
        size: u32,
        marked: bool,
    },
    LossNotify {
        flow_id: u32,
        seq: u64,
        size: u32,
    },
    BasePiUpdate,
    NativePiUpdate,
    RateChange(usize),
    MetricsSample,
}

#[derive(Debug)]
pub struct Event {
    pub time: SimTime,
    seq: u64,
    pub kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed so the max-heap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
    now: SimTime,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn schedule(&mut self, time: SimTime, kind: EventKind) {
        assert!(time >= self.now, "event scheduled in the past: {time} < {}", self.now);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
    }

    pub fn pop(&mut self) -> Option<Event> {
        let e = self.heap.pop()?;
        debug_assert!(e.time >= self.now);
        self.now = e.time;
        Some(e)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_order_with_fifo_ties() {
        let mut q = EventQueue::new();
        q.schedule(SimTime::from_nanos(5), EventKind::SendTimer(0));
        q.schedule(SimTime::from_nanos(2), EventKind::SendTimer(1));
        q.schedule(SimTime::from_nanos(5), EventKind::SendTimer(2));
        q.schedule(SimTime::from_nanos(2), EventKind::SendTimer(3));
        let order: Vec<_> = std::iter::from_fn(|| q.pop())
            .map(|e| match e.kind {
                EventKind::SendTimer(i) => i,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(order, vec![1, 3, 0, 2]);
    }

    #[test]
    #[should_panic(expected = "past")]
    fn rejects_past_events() {
        let mut q = EventQueue::new();
        q.schedule(SimTime::from_nanos(10), EventKind::LinkDequeue);
        q.pop();
        q.schedule(SimTime::from_nanos(9), EventKind::LinkDequeue);
    }
}
