use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

struct Entry<A> {
    time: f64,
    seq: u64,
    action: A,
}

impl<A> PartialEq for Entry<A> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<A> Eq for Entry<A> {}

impl<A> PartialOrd for Entry<A> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<A> Ord for Entry<A> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.seq.cmp(&other.seq))
    }
}

/// Discrete-event queue ordered by `(time, insertion seq)`.
pub struct EventQueue<A> {
    heap: BinaryHeap<Reverse<Entry<A>>>,
    now: f64,
    next_seq: u64,
}

impl<A> Default for EventQueue<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A> EventQueue<A> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            now: 0.0,
            next_seq: 0,
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, time: f64, action: A) -> Result<()> {
        if time < self.now || time.is_nan() {
            return Err(Error::TimeTravel {
                at: time,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Entry { time, seq, action }));
        Ok(())
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|Reverse(e)| e.time)
    }

    /// Removes the next event and advances the clock to its time.
    pub fn pop(&mut self) -> Option<(f64, A)> {
        let Reverse(e) = self.heap.pop()?;
        self.now = e.time;
        Some((e.time, e.action))
    }

    /// Advances the clock without processing anything. Never moves backwards.
    pub fn advance_to(&mut self, time: f64) {
        if time > self.now {
            self.now = time;
        }
    }

    /// Processes every event with `time <= t_end` through `handler`, which
    /// may schedule further events. The clock ends at `t_end`.
    pub fn run_until<F>(&mut self, t_end: f64, mut handler: F) -> usize
    where
        F: FnMut(&mut Self, f64, A),
    {
        let mut processed = 0;
        while self.peek_time().is_some_and(|t| t <= t_end) {
            let (t, a) = self.pop().expect("peeked");
            handler(self, t, a);
            processed += 1;
        }
        self.advance_to(t_end);
        processed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_time_runs_in_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule(1.0, "a").unwrap();
        q.schedule(1.0, "b").unwrap();
        q.schedule(0.5, "c").unwrap();
        let mut seen = Vec::new();
        q.run_until(2.0, |_, _, a| seen.push(a));
        assert_eq!(seen, ["c", "a", "b"]);
        assert_eq!(q.now(), 2.0);
    }

    #[test]
    fn empty_run_processes_nothing() {
        let mut q: EventQueue<()> = EventQueue::new();
        assert_eq!(q.run_until(10.0, |_, _, _| {}), 0);
    }

    #[test]
    fn past_schedule_is_rejected() {
        let mut q = EventQueue::new();
        q.schedule(2.0, ()).unwrap();
        q.pop();
        assert!(matches!(q.schedule(1.0, ()), Err(Error::TimeTravel { .. })));
        assert!(q.schedule(2.0, ()).is_ok());
    }

    #[test]
    fn handler_can_chain_events() {
        let mut q = EventQueue::new();
        q.schedule(0.0, 0u32).unwrap();
        let mut last = 0;
        let n = q.run_until(5.0, |q, t, k| {
            last = k;
            if k < 10 {
                q.schedule(t + 1.0, k + 1).unwrap();
            }
        });
        assert_eq!((n, last), (6, 5));
        assert_eq!(q.len(), 1);
    }
}
