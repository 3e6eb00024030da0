//! Pooled device agents for parallel kernels.
//!
//! Agents are OS threads, spawned on demand up to the configured limit and
//! reused across launches. A launch posts a generation-stamped job; each
//! participating worker claims exactly one global thread id and runs the
//! region body (one thread per id, so cross-team barriers inside bodies see
//! every agent). The launching side blocks until the last agent finishes.

use std::cell::Cell;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::heap::DeviceHeap;
use crate::mem::{SimAddress, SimMemory};
use crate::registry::DeviceRegistry;

use super::barrier::GlobalBarrier;
use super::worksharing::{global_thread_id, worksharing_bounds, Schedule, WorkIter};
use super::RuntimeError;

thread_local! {
    static IN_PARALLEL: Cell<bool> = const { Cell::new(false) };
}

/// Whether the current thread is an agent of a running parallel kernel.
pub fn in_parallel_kernel() -> bool {
    IN_PARALLEL.with(|c| c.get())
}

/// Shared device handles available to region bodies.
pub struct AgentEnv {
    pub mem: Arc<SimMemory>,
    pub heap: Arc<DeviceHeap>,
    pub registry: Arc<DeviceRegistry>,
}

pub type RegionBody =
    Arc<dyn Fn(&RegionCtx<'_>) -> Result<(), RuntimeError> + Send + Sync>;

/// A parallel region convertible to a multi-team kernel.
#[derive(Clone)]
pub struct RegionDescriptor {
    pub id: u32,
    pub trip_count: u64,
    pub schedule: Schedule,
    pub body: RegionBody,
}

/// Execution context of one agent within one kernel launch.
pub struct RegionCtx<'l> {
    pub global_id: u32,
    pub total: u32,
    pub team: u32,
    pub local: u32,
    pub teams: u32,
    pub threads_per_team: u32,
    pub args: SimAddress,
    launch: &'l LaunchState,
    env: &'l AgentEnv,
    watchdog: Duration,
}

impl RegionCtx<'_> {
    pub fn memory(&self) -> &SimMemory {
        &self.env.mem
    }

    pub fn heap(&self) -> &DeviceHeap {
        &self.env.heap
    }

    pub fn registry(&self) -> &DeviceRegistry {
        &self.env.registry
    }

    /// Cross-team barrier over all agents of this kernel.
    pub fn barrier(&self) -> Result<(), RuntimeError> {
        self.launch.barrier.wait(self.watchdog).map_err(RuntimeError::from)
    }

    /// This agent's share of the region's work-shared loop.
    pub fn work_items(&self) -> WorkIter {
        worksharing_bounds(
            self.global_id,
            self.total,
            self.launch.trip_count,
            self.launch.schedule,
        )
    }
}

struct LaunchState {
    gen: u64,
    teams: u32,
    threads_per_team: u32,
    total: usize,
    trip_count: u64,
    schedule: Schedule,
    args: SimAddress,
    body: RegionBody,
    barrier: GlobalBarrier,
    claimed: AtomicUsize,
    finished: AtomicUsize,
    fault: Mutex<Option<RuntimeError>>,
}

struct Slot {
    current: Option<Arc<LaunchState>>,
}

struct PoolShared {
    slot: Mutex<Slot>,
    start: Condvar,
    done: Condvar,
    shutdown: AtomicBool,
    env: AgentEnv,
    watchdog: Duration,
}

pub struct AgentPool {
    shared: Arc<PoolShared>,
    workers: Mutex<Vec<std::thread::JoinHandle<()>>>,
    limit: usize,
    next_gen: AtomicUsize,
}

impl AgentPool {
    pub fn new(env: AgentEnv, limit: usize, watchdog: Duration) -> AgentPool {
        AgentPool {
            shared: Arc::new(PoolShared {
                slot: Mutex::new(Slot { current: None }),
                start: Condvar::new(),
                done: Condvar::new(),
                shutdown: AtomicBool::new(false),
                env,
                watchdog,
            }),
            workers: Mutex::new(Vec::new()),
            limit,
            next_gen: AtomicUsize::new(1),
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    fn ensure_workers(&self, needed: usize) {
        let mut workers = self.workers.lock().unwrap();
        while workers.len() < needed {
            let shared = Arc::clone(&self.shared);
            let handle = std::thread::Builder::new()
                .name(format!("agent-{}", workers.len()))
                .stack_size(1 << 20)
                .spawn(move || worker_loop(shared))
                .expect("spawning a device agent");
            workers.push(handle);
        }
    }

    /// Runs the region with `teams * threads_per_team` agents and blocks
    /// until all of them finish. The first fault (if any) is returned with
    /// the region id attached.
    pub fn launch(
        &self,
        region: &RegionDescriptor,
        teams: u32,
        threads_per_team: u32,
        args: SimAddress,
    ) -> Result<(), RuntimeError> {
        let total = teams as usize * threads_per_team as usize;
        assert!(total >= 1 && total <= self.limit, "caller checks the agent limit");
        self.ensure_workers(total);

        let launch = Arc::new(LaunchState {
            gen: self.next_gen.fetch_add(1, Ordering::Relaxed) as u64,
            teams,
            threads_per_team,
            total,
            trip_count: region.trip_count,
            schedule: region.schedule,
            args,
            body: Arc::clone(&region.body),
            barrier: GlobalBarrier::new(total),
            claimed: AtomicUsize::new(0),
            finished: AtomicUsize::new(0),
            fault: Mutex::new(None),
        });

        let deadline = Instant::now() + self.shared.watchdog;
        {
            let mut slot = self.shared.slot.lock().unwrap();
            slot.current = Some(Arc::clone(&launch));
            self.shared.start.notify_all();
            while launch.finished.load(Ordering::Acquire) < total {
                let (next, timeout) = self
                    .shared
                    .done
                    .wait_timeout(slot, Duration::from_millis(50))
                    .unwrap();
                slot = next;
                if timeout.timed_out() && Instant::now() > deadline {
                    slot.current = None;
                    return Err(RuntimeError::Deadlock {
                        stage: "kernel completion",
                        after_ms: self.shared.watchdog.as_millis() as u64,
                    });
                }
            }
            slot.current = None;
        }

        let fault = launch.fault.lock().unwrap().take();
        match fault {
            Some(err) => Err(RuntimeError::RegionFault {
                region: region.id,
                message: err.to_string(),
            }),
            None => Ok(()),
        }
    }

    pub fn shutdown(&self) {
        self.shared.shutdown.store(true, Ordering::Release);
        {
            let _slot = self.shared.slot.lock().unwrap();
            self.shared.start.notify_all();
        }
        let mut workers = self.workers.lock().unwrap();
        for handle in workers.drain(..) {
            let _ = handle.join();
        }
    }
}

impl Drop for AgentPool {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn worker_loop(shared: Arc<PoolShared>) {
    let mut seen_gen = 0u64;
    loop {
        let launch = {
            let mut slot = shared.slot.lock().unwrap();
            loop {
                if shared.shutdown.load(Ordering::Acquire) {
                    return;
                }
                match &slot.current {
                    Some(l) if l.gen > seen_gen => break Arc::clone(l),
                    _ => slot = shared.start.wait(slot).unwrap(),
                }
            }
        };
        seen_gen = launch.gen;

        // One id per worker; workers beyond the kernel size sit this one out.
        let id = launch.claimed.fetch_add(1, Ordering::AcqRel);
        if id >= launch.total {
            continue;
        }
        let global_id = id as u32;
        let team = global_id / launch.threads_per_team;
        let local = global_id % launch.threads_per_team;
        debug_assert_eq!(global_thread_id(team, local, launch.threads_per_team), global_id);

        let ctx = RegionCtx {
            global_id,
            total: launch.total as u32,
            team,
            local,
            teams: launch.teams,
            threads_per_team: launch.threads_per_team,
            args: launch.args,
            launch: &launch,
            env: &shared.env,
            watchdog: shared.watchdog,
        };
        IN_PARALLEL.with(|c| c.set(true));
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            (launch.body)(&ctx)
        }));
        IN_PARALLEL.with(|c| c.set(false));
        let result = match outcome {
            Ok(r) => r,
            Err(_) => Err(RuntimeError::Program(format!(
                "agent {global_id} panicked in the region body"
            ))),
        };
        if let Err(err) = result {
            let mut fault = launch.fault.lock().unwrap();
            fault.get_or_insert(err);
        }

        let finished = launch.finished.fetch_add(1, Ordering::AcqRel) + 1;
        if finished == launch.total {
            let _slot = shared.slot.lock().unwrap();
            shared.done.notify_all();
        }
    }
}
