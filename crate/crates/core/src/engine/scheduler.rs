//! Min-heap event queue over integer nanoseconds.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::network::NodeId;

/// Tie-break lane: environment events (`None`) precede node events, which
/// run in node-id order.
pub type Lane = Option<NodeId>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("cannot schedule at {time} ns, clock is at {clock} ns")]
pub struct SchedulePast {
    pub time: u64,
    pub clock: u64,
}

struct Entry<T> {
    time: u64,
    lane: Lane,
    seq: u64,
    item: T,
}

impl<T> Entry<T> {
    fn key(&self) -> (u64, Lane, u64) {
        (self.time, self.lane, self.seq)
    }
}

impl<T> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<T> Eq for Entry<T> {}

impl<T> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Entry<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

pub struct Scheduler<T> {
    heap: BinaryHeap<Reverse<Entry<T>>>,
    clock: u64,
    seq: u64,
}

impl<T> Default for Scheduler<T> {
    fn default() -> Self {
        Scheduler { heap: BinaryHeap::new(), clock: 0, seq: 0 }
    }
}

impl<T> Scheduler<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, time: u64, lane: Lane, item: T) -> Result<(), SchedulePast> {
        if time < self.clock {
            return Err(SchedulePast { time, clock: self.clock });
        }
        self.heap.push(Reverse(Entry { time, lane, seq: self.seq, item }));
        self.seq += 1;
        Ok(())
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.heap.peek().map(|Reverse(e)| e.time)
    }

    pub fn dispatch_next(&mut self) -> Option<(u64, Lane, T)> {
        let Reverse(e) = self.heap.pop()?;
        debug_assert!(e.time >= self.clock);
        self.clock = e.time;
        Some((e.time, e.lane, e.item))
    }

    /// Moves the clock forward without dispatching.
    pub fn advance_to(&mut self, t: u64) {
        self.clock = self.clock.max(t);
    }
}
