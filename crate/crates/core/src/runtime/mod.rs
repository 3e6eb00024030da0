//! The multi-team execution model.
//!
//! A program starts with a single initial agent executing the sequential
//! part while the host server agent polls the mailbox. When the initial
//! agent encounters a parallel region, it issues the reserved kernel-launch
//! RPC; the host spins up the requested teams-by-threads agents with
//! continuous global thread ids, waits for the region to complete, and the
//! RPC's completion resumes the sequential part. Because the launch call
//! occupies the single mailbox slot for the kernel's duration, region bodies
//! must not issue RPCs themselves; blocking operations are guarded by a
//! watchdog so mistakes surface as structured errors instead of hangs.

mod barrier;
mod pool;
mod worksharing;

pub use barrier::{BarrierTimeout, GlobalBarrier};
pub use pool::{
    in_parallel_kernel, AgentEnv, AgentPool, RegionBody, RegionCtx, RegionDescriptor,
};
pub use worksharing::{global_thread_id, worksharing_bounds, Schedule, WorkIter};

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::heap::{AllocError, AllocatorConfig, AllocatorSpec, ConfigError, DeviceHeap};
use crate::mem::{MemFault, SimAddress, SimMemory, SimMemoryConfig};
use crate::registry::{DeviceRegistry, StackRegistry};
use crate::rpc::{
    HandlerError, HostServer, PadTable, ParamEffect, RpcClient, RpcError, RpcShared,
    KERNEL_LAUNCH_CALLEE,
};

pub const DEFAULT_AGENT_LIMIT: usize = 4096;
pub const DEFAULT_WATCHDOG: Duration = Duration::from_secs(30);
pub const DEFAULT_STACK_SIZE: u64 = 8 << 20;
pub const DEFAULT_HEAP_SIZE: u64 = 40 << 20;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum RuntimeError {
    #[error("launch rejected: {0}")]
    LaunchRejected(LaunchRejection),
    #[error("region {region} faulted: {message}")]
    RegionFault { region: u32, message: String },
    #[error("deadlock suspected: {stage} did not finish within {after_ms} ms")]
    Deadlock { stage: &'static str, after_ms: u64 },
    #[error("unknown region {0}")]
    UnknownRegion(u32),
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error(transparent)]
    Fault(#[from] MemFault),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Barrier(#[from] BarrierTimeout),
    #[error("{0}")]
    Program(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LaunchRejection {
    /// Parallel kernels cannot launch further kernels.
    Nested,
    AgentLimit { requested: usize, limit: usize },
    ZeroGeometry,
}

impl std::fmt::Display for LaunchRejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LaunchRejection::Nested => {
                write!(f, "parallel kernels cannot launch nested kernels")
            }
            LaunchRejection::AgentLimit { requested, limit } => {
                write!(f, "{requested} agents exceed the limit of {limit}")
            }
            LaunchRejection::ZeroGeometry => write!(f, "teams and threads must be at least 1"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RuntimeConfig {
    pub device_capacity: u64,
    pub host_capacity: u64,
    pub shared_capacity: u64,
    pub stack_size: u64,
    pub heap_size: u64,
    pub allocator: AllocatorSpec,
    pub payload_capacity: u64,
    pub agent_limit: usize,
    pub watchdog: Duration,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            device_capacity: crate::mem::DEFAULT_DEVICE_CAPACITY,
            host_capacity: crate::mem::DEFAULT_HOST_CAPACITY,
            shared_capacity: crate::mem::DEFAULT_SHARED_CAPACITY,
            stack_size: DEFAULT_STACK_SIZE,
            heap_size: DEFAULT_HEAP_SIZE,
            allocator: AllocatorSpec::Generic,
            payload_capacity: crate::rpc::DEFAULT_PAYLOAD_CAPACITY,
            agent_limit: DEFAULT_AGENT_LIMIT,
            watchdog: DEFAULT_WATCHDOG,
        }
    }
}

#[derive(Clone, Debug, Error)]
pub enum RuntimeBuildError {
    #[error("device space too small: stack {stack} + heap {heap} exceed capacity {capacity}")]
    DeviceLayout { stack: u64, heap: u64, capacity: u64 },
    #[error(transparent)]
    Allocator(#[from] ConfigError),
}

/// The simulated machine: memory system, device heap, RPC endpoints, and
/// the agent pool, glued together and torn down in order on drop.
pub struct Runtime {
    config: RuntimeConfig,
    mem: Arc<SimMemory>,
    heap: Arc<DeviceHeap>,
    stack: Arc<StackRegistry>,
    registry: Arc<DeviceRegistry>,
    rpc: Arc<RpcShared>,
    pads: Arc<PadTable>,
    pool: Arc<AgentPool>,
    regions: Arc<Mutex<HashMap<u32, RegionDescriptor>>>,
    shutdown: Arc<AtomicBool>,
    server: Mutex<Option<std::thread::JoinHandle<()>>>,
}

impl Runtime {
    pub fn new(config: RuntimeConfig) -> Result<Arc<Runtime>, RuntimeBuildError> {
        let reserved = config.stack_size + config.heap_size;
        if reserved >= config.device_capacity {
            return Err(RuntimeBuildError::DeviceLayout {
                stack: config.stack_size,
                heap: config.heap_size,
                capacity: config.device_capacity,
            });
        }
        // Device layout: statics grow from the bottom; the stack and heap
        // take the top of the space.
        let static_limit = config.device_capacity - reserved;
        let stack_base = static_limit;
        let heap_base = stack_base + config.stack_size;

        let mem = Arc::new(SimMemory::new(&SimMemoryConfig {
            device_capacity: config.device_capacity,
            host_capacity: config.host_capacity,
            shared_capacity: config.shared_capacity,
            device_static_limit: Some(static_limit),
        }));
        let heap = Arc::new(DeviceHeap::new(
            Arc::clone(&mem),
            AllocatorConfig::new(
                config.allocator,
                SimAddress::device(heap_base),
                config.heap_size,
            ),
        )?);
        let stack = Arc::new(StackRegistry::new(
            SimAddress::device(stack_base),
            config.stack_size,
        ));
        let registry = Arc::new(DeviceRegistry::new(
            Arc::clone(&mem),
            Arc::clone(&heap),
            Arc::clone(&stack),
        ));

        let rpc = RpcShared::new(Arc::clone(&mem), config.payload_capacity, config.watchdog);
        let pads = Arc::new(PadTable::new());
        let pool = Arc::new(AgentPool::new(
            AgentEnv {
                mem: Arc::clone(&mem),
                heap: Arc::clone(&heap),
                registry: Arc::clone(&registry),
            },
            config.agent_limit,
            config.watchdog,
        ));
        let regions: Arc<Mutex<HashMap<u32, RegionDescriptor>>> =
            Arc::new(Mutex::new(HashMap::new()));

        // The reserved kernel-launch landing pad: looks up the region, runs
        // it on the pool, and completes when the kernel completes.
        {
            let pool = Arc::clone(&pool);
            let regions = Arc::clone(&regions);
            pads.register_at(
                KERNEL_LAUNCH_CALLEE,
                "__launch_kernel",
                vec![ParamEffect::Value; 4],
                Arc::new(move |ctx| {
                    let region_id = ctx.value(0)? as u32;
                    let teams = ctx.value(1)? as u32;
                    let threads = ctx.value(2)? as u32;
                    let args = SimAddress::decode(ctx.value(3)?)
                        .unwrap_or(SimAddress::device(0));
                    let region = regions
                        .lock()
                        .unwrap()
                        .get(&region_id)
                        .cloned()
                        .ok_or_else(|| HandlerError::new(
                            LAUNCH_ERR_UNKNOWN_REGION,
                            format!("region {region_id} is not registered"),
                        ))?;
                    pool.launch(&region, teams, threads, args).map_err(|e| {
                        let code = match e {
                            RuntimeError::Deadlock { .. } => LAUNCH_ERR_DEADLOCK,
                            _ => LAUNCH_ERR_FAULT,
                        };
                        HandlerError::new(code, e.to_string())
                    })?;
                    Ok(0)
                }),
            )
            .expect("fresh pad table");
        }

        let shutdown = Arc::new(AtomicBool::new(false));
        let server = HostServer::new(Arc::clone(&rpc), Arc::clone(&pads));
        let stop = Arc::clone(&shutdown);
        let server_thread = std::thread::Builder::new()
            .name("host-server".into())
            .spawn(move || server.run(&stop))
            .expect("spawning the host server agent");

        Ok(Arc::new(Runtime {
            config,
            mem,
            heap,
            stack,
            registry,
            rpc,
            pads,
            pool,
            regions,
            shutdown,
            server: Mutex::new(Some(server_thread)),
        }))
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn memory(&self) -> &Arc<SimMemory> {
        &self.mem
    }

    pub fn heap(&self) -> &Arc<DeviceHeap> {
        &self.heap
    }

    pub fn stack(&self) -> &Arc<StackRegistry> {
        &self.stack
    }

    pub fn registry(&self) -> &Arc<DeviceRegistry> {
        &self.registry
    }

    pub fn pads(&self) -> &Arc<PadTable> {
        &self.pads
    }

    pub fn rpc_shared(&self) -> &Arc<RpcShared> {
        &self.rpc
    }

    pub fn client(&self) -> RpcClient {
        RpcClient::new(Arc::clone(&self.rpc))
    }

    pub fn register_region(&self, region: RegionDescriptor) -> Result<(), RuntimeError> {
        let mut regions = self.regions.lock().unwrap();
        if regions.contains_key(&region.id) {
            return Err(RuntimeError::Program(format!(
                "region {} is already registered",
                region.id
            )));
        }
        regions.insert(region.id, region);
        Ok(())
    }

    /// Converts an encountered parallel region into a multi-team kernel:
    /// issues the reserved launch RPC and blocks until the kernel completes.
    /// Only the initial agent may call this; agents of a running kernel are
    /// rejected.
    pub fn encounter_parallel(
        &self,
        region_id: u32,
        args: SimAddress,
        teams: u32,
        threads_per_team: u32,
    ) -> Result<(), RuntimeError> {
        if in_parallel_kernel() {
            return Err(RuntimeError::LaunchRejected(LaunchRejection::Nested));
        }
        if teams == 0 || threads_per_team == 0 {
            return Err(RuntimeError::LaunchRejected(LaunchRejection::ZeroGeometry));
        }
        let requested = teams as usize * threads_per_team as usize;
        if requested > self.config.agent_limit {
            return Err(RuntimeError::LaunchRejected(LaunchRejection::AgentLimit {
                requested,
                limit: self.config.agent_limit,
            }));
        }
        if !self.regions.lock().unwrap().contains_key(&region_id) {
            return Err(RuntimeError::UnknownRegion(region_id));
        }

        let result = self.client().issue_call(|b| {
            b.set_callee(KERNEL_LAUNCH_CALLEE);
            b.add_value_arg(region_id as u64);
            b.add_value_arg(teams as u64);
            b.add_value_arg(threads_per_team as u64);
            b.add_value_arg(args.encode());
            Ok(())
        });
        match result {
            Ok(_) => Ok(()),
            Err(RpcError::HandlerFault { code, .. }) => Err(match code {
                LAUNCH_ERR_UNKNOWN_REGION => RuntimeError::UnknownRegion(region_id),
                LAUNCH_ERR_DEADLOCK => RuntimeError::Deadlock {
                    stage: "kernel completion",
                    after_ms: self.config.watchdog.as_millis() as u64,
                },
                _ => RuntimeError::RegionFault {
                    region: region_id,
                    message: "region body faulted (see server log)".into(),
                },
            }),
            Err(e) => Err(RuntimeError::Rpc(e)),
        }
    }

    /// Runs the sequential part of a program on a dedicated initial agent
    /// and returns its exit status. The host server runs for the whole
    /// program lifetime.
    pub fn run_main<F>(self: &Arc<Self>, main: F) -> Result<i32, RuntimeError>
    where
        F: FnOnce(&MainCtx) -> Result<i32, RuntimeError> + Send + 'static,
    {
        let rt = Arc::clone(self);
        let initial = std::thread::Builder::new()
            .name("initial-agent".into())
            .stack_size(8 << 20)
            .spawn(move || {
                let ctx = MainCtx { rt: Arc::clone(&rt) };
                main(&ctx)
            })
            .expect("spawning the initial agent");
        match initial.join() {
            Ok(result) => result,
            Err(_) => Err(RuntimeError::Program("the initial agent panicked".into())),
        }
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Release);
        if let Some(handle) = self.server.lock().unwrap().take() {
            let _ = handle.join();
        }
        self.pool.shutdown();
    }
}

const LAUNCH_ERR_FAULT: u32 = 200;
const LAUNCH_ERR_UNKNOWN_REGION: u32 = 201;
const LAUNCH_ERR_DEADLOCK: u32 = 202;

/// Context of the initial agent executing the sequential program part.
pub struct MainCtx {
    rt: Arc<Runtime>,
}

impl MainCtx {
    pub fn runtime(&self) -> &Arc<Runtime> {
        &self.rt
    }

    pub fn memory(&self) -> &SimMemory {
        &self.rt.mem
    }

    pub fn heap(&self) -> &DeviceHeap {
        &self.rt.heap
    }

    pub fn client(&self) -> RpcClient {
        self.rt.client()
    }

    pub fn parallel(
        &self,
        region_id: u32,
        args: SimAddress,
        teams: u32,
        threads_per_team: u32,
    ) -> Result<(), RuntimeError> {
        self.rt.encounter_parallel(region_id, args, teams, threads_per_team)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn small_runtime(allocator: AllocatorSpec) -> Arc<Runtime> {
        Runtime::new(RuntimeConfig {
            device_capacity: 8 << 20,
            host_capacity: 1 << 20,
            shared_capacity: 64 << 10,
            stack_size: 1 << 20,
            heap_size: 4 << 20,
            allocator,
            agent_limit: 64,
            watchdog: Duration::from_secs(20),
            ..RuntimeConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn sequential_program_runs_on_initial_agent() {
        let rt = small_runtime(AllocatorSpec::Generic);
        let status = rt
            .run_main(|ctx| {
                let a = ctx.heap().allocate(0, 0, 64)?;
                ctx.memory().write_u32(a, 7)?;
                Ok(ctx.memory().read_u32(a)? as i32)
            })
            .unwrap();
        assert_eq!(status, 7);
    }

    #[test]
    fn parallel_region_launches_all_agents_once() {
        let rt = small_runtime(AllocatorSpec::Generic);
        let launches = Arc::new(AtomicU32::new(0));
        let l2 = Arc::clone(&launches);
        rt.register_region(RegionDescriptor {
            id: 1,
            trip_count: 0,
            schedule: Schedule::StaticBlock,
            body: Arc::new(move |ctx| {
                l2.fetch_add(1, Ordering::Relaxed);
                // Record this agent's id into the args block.
                ctx.memory()
                    .write_u32(ctx.args.add(4 * ctx.global_id as u64), ctx.global_id)?;
                Ok(())
            }),
        })
        .unwrap();

        let rt2 = Arc::clone(&rt);
        let status = rt
            .run_main(move |ctx| {
                let args = ctx.memory().place_static(
                    crate::mem::SpaceKind::Device,
                    &[0xff; 16 * 4],
                    false,
                )?;
                ctx.parallel(1, args, 4, 4)?;
                let mut ids: Vec<u32> = (0..16)
                    .map(|i| rt2.memory().read_u32(args.add(4 * i)).unwrap())
                    .collect();
                ids.sort_unstable();
                assert_eq!(ids, (0..16).collect::<Vec<u32>>());
                Ok(0)
            })
            .unwrap();
        assert_eq!(status, 0);
        assert_eq!(launches.load(Ordering::Relaxed), 16);
    }

    #[test]
    fn degenerate_single_agent_kernel() {
        let rt = small_runtime(AllocatorSpec::Generic);
        rt.register_region(RegionDescriptor {
            id: 9,
            trip_count: 4,
            schedule: Schedule::StaticBlock,
            body: Arc::new(|ctx| {
                assert_eq!(ctx.global_id, 0);
                assert_eq!(ctx.total, 1);
                let items: Vec<u64> = ctx.work_items().collect();
                assert_eq!(items, vec![0, 1, 2, 3]);
                ctx.barrier()?;
                Ok(())
            }),
        })
        .unwrap();
        rt.run_main(|ctx| {
            ctx.parallel(9, SimAddress::device(0), 1, 1)?;
            Ok(0)
        })
        .unwrap();
    }

    #[test]
    fn nested_parallel_rejected() {
        let rt = small_runtime(AllocatorSpec::Generic);
        let rt_clone = Arc::clone(&rt);
        let observed = Arc::new(Mutex::new(None));
        let obs = Arc::clone(&observed);
        rt.register_region(RegionDescriptor {
            id: 2,
            trip_count: 0,
            schedule: Schedule::StaticBlock,
            body: Arc::new(move |ctx| {
                let err = rt_clone
                    .encounter_parallel(2, ctx.args, 1, 1)
                    .unwrap_err();
                *obs.lock().unwrap() = Some(err);
                Ok(())
            }),
        })
        .unwrap();
        rt.run_main(move |ctx| {
            ctx.parallel(2, SimAddress::device(0), 1, 1)?;
            Ok(0)
        })
        .unwrap();
        assert_eq!(
            observed.lock().unwrap().take().unwrap(),
            RuntimeError::LaunchRejected(LaunchRejection::Nested)
        );
    }

    #[test]
    fn launch_rejections() {
        let rt = small_runtime(AllocatorSpec::Generic);
        rt.register_region(RegionDescriptor {
            id: 3,
            trip_count: 0,
            schedule: Schedule::StaticBlock,
            body: Arc::new(|_| Ok(())),
        })
        .unwrap();
        assert!(matches!(
            rt.encounter_parallel(3, SimAddress::device(0), 65, 1),
            Err(RuntimeError::LaunchRejected(LaunchRejection::AgentLimit { .. }))
        ));
        assert!(matches!(
            rt.encounter_parallel(3, SimAddress::device(0), 0, 4),
            Err(RuntimeError::LaunchRejected(LaunchRejection::ZeroGeometry))
        ));
        assert!(matches!(
            rt.encounter_parallel(99, SimAddress::device(0), 1, 1),
            Err(RuntimeError::UnknownRegion(99))
        ));
    }

    #[test]
    fn region_fault_carries_region_id() {
        let rt = small_runtime(AllocatorSpec::Generic);
        rt.register_region(RegionDescriptor {
            id: 7,
            trip_count: 0,
            schedule: Schedule::StaticBlock,
            body: Arc::new(|ctx| {
                // Out-of-bounds write: a simulated segfault.
                ctx.memory()
                    .write_u32(SimAddress::device(u64::MAX / 2), 1)?;
                Ok(())
            }),
        })
        .unwrap();
        let err = rt
            .encounter_parallel(7, SimAddress::device(0), 2, 2)
            .unwrap_err();
        assert!(
            matches!(err, RuntimeError::RegionFault { region: 7, .. }),
            "{err}"
        );
    }

    #[test]
    fn agents_are_pooled_across_launches() {
        let rt = small_runtime(AllocatorSpec::Balanced { n: 4, m: 4, ratio: 2.0 });
        rt.register_region(RegionDescriptor {
            id: 1,
            trip_count: 0,
            schedule: Schedule::StaticBlock,
            body: Arc::new(|ctx| {
                let a = ctx.heap().allocate(ctx.local, ctx.team, 48)?;
                ctx.memory().write_u32(a, ctx.global_id)?;
                ctx.heap().deallocate(a)?;
                Ok(())
            }),
        })
        .unwrap();
        for _ in 0..5 {
            rt.encounter_parallel(1, SimAddress::device(0), 4, 4).unwrap();
        }
        assert!(rt.heap().live_objects().is_empty());
    }
}
