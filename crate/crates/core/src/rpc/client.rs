//! Device-side client: builds a request in the mailbox, migrates referenced
//! objects into the payload region, and blocks until the server notifies
//! completion.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::mem::{SimAddress, SimMemory};

use super::stages::{DeviceStages, StageLog};
use super::wire::{
    self, ERR_HANDLER_FAULT, ERR_NONE, ERR_UNKNOWN_CALLEE, PAYLOAD_BASE, STATE_DONE, STATE_EMPTY,
    STATE_REQUESTED,
};
use super::{ArgDescriptor, RequestBuilder, RpcError};

pub const DEFAULT_PAYLOAD_CAPACITY: u64 = 16 << 10;

/// State shared between the client side and the server side of the mailbox.
pub struct RpcShared {
    pub(crate) mem: Arc<SimMemory>,
    pub(crate) payload_capacity: u64,
    pub(crate) watchdog: Duration,
    pub(crate) stages: StageLog,
    epoch: Instant,
    next_serial: AtomicU64,
    // Many device agents may exist; mailbox access is serialized on the
    // client side, the server is single-threaded by construction.
    client_gate: Mutex<()>,
}

impl RpcShared {
    pub fn new(mem: Arc<SimMemory>, payload_capacity: u64, watchdog: Duration) -> Arc<RpcShared> {
        assert!(
            PAYLOAD_BASE + payload_capacity <= mem.capacity(crate::mem::SpaceKind::Shared),
            "payload region exceeds the shared space"
        );
        Arc::new(RpcShared {
            mem,
            payload_capacity,
            watchdog,
            stages: StageLog::default(),
            epoch: Instant::now(),
            next_serial: AtomicU64::new(1),
            client_gate: Mutex::new(()),
        })
    }

    pub fn stage_log(&self) -> &StageLog {
        &self.stages
    }

    pub fn memory(&self) -> &Arc<SimMemory> {
        &self.mem
    }

    pub(crate) fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }
}

/// Waits for the flag cell to reach `want`, yielding quickly so the peer
/// agent gets the core, then sleeping with a small bounded back-off.
pub(crate) fn wait_flag(
    mem: &SimMemory,
    addr: SimAddress,
    want: u32,
    watchdog: Duration,
    stage: &'static str,
) -> Result<(), RpcError> {
    let start = Instant::now();
    let mut spins = 0u32;
    loop {
        if mem.flag_load(addr)? == want {
            return Ok(());
        }
        spins += 1;
        if spins < 64 {
            std::hint::spin_loop();
        } else if spins < 1024 {
            std::thread::yield_now();
        } else {
            std::thread::sleep(Duration::from_micros(50));
            if start.elapsed() > watchdog {
                return Err(RpcError::Timeout {
                    stage,
                    after_ms: watchdog.as_millis() as u64,
                });
            }
        }
    }
}

#[derive(Clone)]
pub struct RpcClient {
    shared: Arc<RpcShared>,
}

impl RpcClient {
    pub fn new(shared: Arc<RpcShared>) -> RpcClient {
        RpcClient { shared }
    }

    /// Issues one blocking call. The `build` closure populates the request;
    /// it runs inside the identify-and-copy stage so that underlying-object
    /// resolution is accounted where it belongs.
    ///
    /// Referenced objects with a read component are copied into the payload;
    /// write-only payload regions are zero-initialized. After the server
    /// signals completion, objects with a write component are copied back
    /// and the 8-byte return value is produced.
    pub fn issue_call<F>(&self, build: F) -> Result<u64, RpcError>
    where
        F: FnOnce(&mut RequestBuilder) -> Result<(), RpcError>,
    {
        let sh = &*self.shared;
        let mem = &*sh.mem;
        let t0 = Instant::now();

        let _gate = sh.client_gate.lock().unwrap();
        wait_flag(mem, wire::state_addr(), STATE_EMPTY, sh.watchdog, "mailbox slot")?;
        let serial = sh.next_serial.fetch_add(1, Ordering::Relaxed);
        let t1 = Instant::now();

        let mut builder = RequestBuilder::default();
        build(&mut builder)?;
        let (callee, args) = builder.finish()?;

        // Payload layout in descriptor order, each object 16-byte aligned.
        let mut payload_offs = vec![0u64; args.len()];
        let mut cursor = 0u64;
        for (i, arg) in args.iter().enumerate() {
            if let ArgDescriptor::Ref { obj_size, .. } = arg {
                let off = cursor.next_multiple_of(16);
                payload_offs[i] = off;
                cursor = off + obj_size;
            }
        }
        if cursor > sh.payload_capacity {
            return Err(RpcError::PayloadOverflow {
                needed: cursor,
                capacity: sh.payload_capacity,
            });
        }

        // Migrate objects in and write the request.
        for (i, arg) in args.iter().enumerate() {
            if let ArgDescriptor::Ref {
                addr,
                mode,
                obj_size,
                obj_offset,
            } = *arg
            {
                let obj_base = SimAddress::new(addr.space, addr.offset - obj_offset);
                let dst = wire::payload_addr(payload_offs[i]);
                if mode.copies_in() {
                    mem.copy(obj_base, dst, obj_size)?;
                } else {
                    // The object's device value is unspecified at call time;
                    // the handler sees a deterministic all-zero copy.
                    mem.fill_zero(dst, obj_size)?;
                }
            }
            wire::write_descriptor(mem, i, arg, payload_offs[i])?;
        }
        mem.write_u64(SimAddress::shared(wire::OFF_SERIAL), serial)?;
        mem.write_u32(SimAddress::shared(wire::OFF_CALLEE), callee)?;
        mem.write_u32(SimAddress::shared(wire::OFF_NARGS), args.len() as u32)?;
        let t2 = Instant::now();

        // Payload and request writes happen-before the Requested flag.
        mem.flag_store(wire::state_addr(), STATE_REQUESTED)?;
        let waited = wait_flag(mem, wire::state_addr(), STATE_DONE, sh.watchdog, "server completion");
        let t3 = Instant::now();
        let observed_done_ns = sh.now_ns();
        waited?;

        let err = mem.read_u32(SimAddress::shared(wire::OFF_ERR))?;
        let ret = mem.read_u64(SimAddress::shared(wire::OFF_RET))?;
        let done_ts = mem.read_u64(SimAddress::shared(wire::OFF_DONE_TS))?;

        if err == ERR_NONE {
            for (i, arg) in args.iter().enumerate() {
                if let ArgDescriptor::Ref {
                    addr,
                    mode,
                    obj_size,
                    obj_offset,
                } = *arg
                {
                    if mode.copies_back() {
                        let obj_base = SimAddress::new(addr.space, addr.offset - obj_offset);
                        mem.copy(wire::payload_addr(payload_offs[i]), obj_base, obj_size)?;
                    }
                }
            }
        }
        mem.flag_store(wire::state_addr(), STATE_EMPTY)?;
        let t4 = Instant::now();

        sh.stages.record_device(
            serial,
            DeviceStages {
                init_ns: (t1 - t0).as_nanos() as u64,
                identify_ns: (t2 - t1).as_nanos() as u64,
                wait_ns: (t3 - t2).as_nanos() as u64,
                copyback_ns: (t4 - t3).as_nanos() as u64,
            },
            observed_done_ns.saturating_sub(done_ts),
        );

        match err {
            ERR_NONE => Ok(ret),
            ERR_UNKNOWN_CALLEE => Err(RpcError::UnknownCallee { callee }),
            ERR_HANDLER_FAULT => Err(RpcError::HandlerFault {
                callee,
                code: ret as u32,
            }),
            other => Err(RpcError::HandlerFault {
                callee,
                code: other,
            }),
        }
    }

    pub fn shared(&self) -> &Arc<RpcShared> {
        &self.shared
    }
}
