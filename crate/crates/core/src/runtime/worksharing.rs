//! Continuous global thread IDs and work-sharing schedules.
//!
//! A parallel kernel's teams are not treated as separate entities; their
//! threads are bulked together with continuous IDs so that work-sharing
//! distributes iterations across all threads of all teams.

/// `team * threads_per_team + local`.
pub fn global_thread_id(team: u32, local: u32, threads_per_team: u32) -> u32 {
    debug_assert!(local < threads_per_team);
    team * threads_per_team + local
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Contiguous blocks of `ceil(trip_count / total)` iterations.
    StaticBlock,
    /// Round-robin chunks of the given size.
    StaticCyclic(u64),
}

/// Iterations assigned to one global thread id; the union over all ids
/// partitions `[0, trip_count)`.
pub fn worksharing_bounds(
    global_id: u32,
    total: u32,
    trip_count: u64,
    schedule: Schedule,
) -> WorkIter {
    debug_assert!(global_id < total);
    match schedule {
        Schedule::StaticBlock => {
            // When the trip count is zero every set is empty.
            let chunk = trip_count.div_ceil(total.max(1) as u64).max(1);
            WorkIter {
                block_start: global_id as u64 * chunk,
                cursor: 0,
                trip_count,
                stride: 0,
                chunk,
            }
        }
        Schedule::StaticCyclic(chunk) => {
            let chunk = chunk.max(1);
            WorkIter {
                block_start: global_id as u64 * chunk,
                cursor: 0,
                trip_count,
                stride: total as u64 * chunk,
                chunk,
            }
        }
    }
}

/// Iterator over one thread's iterations.
#[derive(Clone, Debug)]
pub struct WorkIter {
    block_start: u64,
    /// Position within the current block.
    cursor: u64,
    trip_count: u64,
    /// Zero for a single block; the cyclic stride otherwise.
    stride: u64,
    chunk: u64,
}

impl Iterator for WorkIter {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        if self.cursor == self.chunk {
            if self.stride == 0 {
                return None;
            }
            self.block_start += self.stride;
            self.cursor = 0;
        }
        let i = self.block_start + self.cursor;
        if i >= self.trip_count {
            return None;
        }
        self.cursor += 1;
        Some(i)
    }
}
