//! Cross-team barrier.
//!
//! Synchronizes all threads of all teams of one parallel kernel through an
//! atomic arrival counter and a generation flag (the generalized sense): the
//! last arrival resets the counter and flips the generation, releasing the
//! waiters of the current phase without confusing them with the next one.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("barrier timed out after {after_ms} ms ({arrived} of {expected} arrived in this phase)")]
pub struct BarrierTimeout {
    pub after_ms: u64,
    pub arrived: usize,
    pub expected: usize,
}

pub struct GlobalBarrier {
    expected: usize,
    count: AtomicUsize,
    generation: AtomicU64,
}

impl GlobalBarrier {
    pub fn new(expected: usize) -> GlobalBarrier {
        assert!(expected >= 1);
        GlobalBarrier {
            expected,
            count: AtomicUsize::new(0),
            generation: AtomicU64::new(0),
        }
    }

    pub fn expected(&self) -> usize {
        self.expected
    }

    /// Blocks until all expected agents arrive in this phase. Every agent
    /// must call it the same number of times; a mismatch surfaces as a
    /// timeout rather than a hang.
    pub fn wait(&self, watchdog: Duration) -> Result<(), BarrierTimeout> {
        let generation = self.generation.load(Ordering::Acquire);
        let arrived = self.count.fetch_add(1, Ordering::AcqRel) + 1;
        if arrived == self.expected {
            // Reset before the flip so early next-phase arrivals count from
            // zero; writes before the barrier are published by the flip.
            self.count.store(0, Ordering::Relaxed);
            self.generation.fetch_add(1, Ordering::Release);
            return Ok(());
        }
        let start = Instant::now();
        let mut spins = 0u32;
        while self.generation.load(Ordering::Acquire) == generation {
            spins += 1;
            if spins < 64 {
                std::hint::spin_loop();
            } else if spins < 4096 {
                std::thread::yield_now();
            } else {
                std::thread::sleep(Duration::from_micros(50));
                if start.elapsed() > watchdog {
                    return Err(BarrierTimeout {
                        after_ms: watchdog.as_millis() as u64,
                        arrived: self.count.load(Ordering::Relaxed),
                        expected: self.expected,
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    const WD: Duration = Duration::from_secs(10);

    #[test]
    fn single_agent_is_a_no_op() {
        let b = GlobalBarrier::new(1);
        b.wait(WD).unwrap();
        b.wait(WD).unwrap();
    }

    #[test]
    fn consecutive_phases_do_not_deadlock() {
        let b = Arc::new(GlobalBarrier::new(4));
        let mut handles = Vec::new();
        for _ in 0..4 {
            let b = Arc::clone(&b);
            handles.push(std::thread::spawn(move || {
                for _ in 0..100 {
                    b.wait(WD).unwrap();
                    b.wait(WD).unwrap();
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
    }

    #[test]
    fn mismatched_arrivals_time_out() {
        let b = GlobalBarrier::new(2);
        let err = b.wait(Duration::from_millis(300)).unwrap_err();
        assert_eq!(err.expected, 2);
        assert_eq!(err.arrived, 1);
    }

    #[test]
    fn publishes_prior_writes() {
        use std::sync::atomic::{AtomicU32, Ordering};
        let b = Arc::new(GlobalBarrier::new(3));
        let cell = Arc::new(AtomicU32::new(0));
        let mut handles = Vec::new();
        for id in 0..3u32 {
            let b = Arc::clone(&b);
            let cell = Arc::clone(&cell);
            handles.push(std::thread::spawn(move || {
                for phase in 1..=50u32 {
                    if id == 0 {
                        cell.store(phase, Ordering::Relaxed);
                    }
                    b.wait(WD).unwrap();
                    assert_eq!(cell.load(Ordering::Relaxed), phase);
                    b.wait(WD).unwrap();
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
    }
}
