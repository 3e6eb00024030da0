//! Synchronous, stateless RPC between device agents and a single host server
//! agent over the shared mailbox.
//!
//! One request is outstanding at a time. The device client classifies each
//! argument as an opaque value or as a reference to an underlying object;
//! referenced objects are migrated to a payload region in the shared space
//! according to their access mode (read: copied in only, write: copied back
//! only and zero-initialized on the way in, readwrite: both). The host server
//! polls the mailbox state flag, translates each reference to the payload
//! copy at the same object offset, invokes the registered landing pad, and
//! notifies completion through the flag cell. Per-stage wall times are
//! recorded on both sides of every call.

mod client;
mod mangle;
mod server;
mod stages;
mod wire;

pub use client::{RpcClient, RpcShared, DEFAULT_PAYLOAD_CAPACITY};
pub use mangle::{mangle, mangle_codes, MangleError, ScalarCode, TypeCode};
pub use server::{
    HandlerError, HandlerFn, HostArg, HostCallCtx, HostServer, LandingPad, PadError, PadTable,
    RefView,
};
pub use stages::{CallStageRecord, DeviceStages, HostStages, StageLog};
pub use wire::{MAX_ARGS, PAYLOAD_BASE};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mem::{MemFault, SimAddress};

/// Callee id reserved for launching parallel kernels.
pub const KERNEL_LAUNCH_CALLEE: u32 = 0;

/// Return value placed in the mailbox when dispatch fails.
pub const DISPATCH_ERROR_RET: u64 = u64::MAX;

/// How a landing pad may touch the object behind a reference argument.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessMode {
    Read,
    Write,
    ReadWrite,
}

impl AccessMode {
    pub fn copies_in(self) -> bool {
        matches!(self, AccessMode::Read | AccessMode::ReadWrite)
    }

    pub fn copies_back(self) -> bool {
        matches!(self, AccessMode::Write | AccessMode::ReadWrite)
    }

    pub(crate) fn to_wire(self) -> u32 {
        match self {
            AccessMode::Read => 0,
            AccessMode::Write => 1,
            AccessMode::ReadWrite => 2,
        }
    }

    pub(crate) fn from_wire(v: u32) -> Option<AccessMode> {
        match v {
            0 => Some(AccessMode::Read),
            1 => Some(AccessMode::Write),
            2 => Some(AccessMode::ReadWrite),
            _ => None,
        }
    }
}

impl std::fmt::Display for AccessMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AccessMode::Read => write!(f, "read"),
            AccessMode::Write => write!(f, "write"),
            AccessMode::ReadWrite => write!(f, "readwrite"),
        }
    }
}

/// Declared effect of one landing-pad parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamEffect {
    /// Opaque host handle; passed through as bytes, memory never moved.
    Opaque,
    /// Plain non-pointer value.
    Value,
    /// Pointer whose underlying object is accessed with this mode.
    Access(AccessMode),
}

/// One classified call argument as exchanged through the mailbox.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArgDescriptor {
    Value {
        raw: u64,
    },
    Ref {
        addr: SimAddress,
        mode: AccessMode,
        obj_size: u64,
        obj_offset: u64,
    },
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum RpcError {
    #[error("payload overflow: {needed} bytes of referenced objects exceed capacity {capacity}")]
    PayloadOverflow { needed: u64, capacity: u64 },
    #[error("too many arguments: {count} (max {max})")]
    TooManyArgs { count: usize, max: usize },
    #[error("no callee set on the request")]
    MissingCallee,
    #[error("invalid reference descriptor for argument {index}: {reason}")]
    InvalidDescriptor { index: usize, reason: &'static str },
    #[error("no landing pad registered for callee {callee}")]
    UnknownCallee { callee: u32 },
    #[error("landing pad for callee {callee} failed with code {code}")]
    HandlerFault { callee: u32, code: u32 },
    #[error("timed out after {after_ms} ms waiting for {stage}")]
    Timeout { stage: &'static str, after_ms: u64 },
    #[error("dispatch candidates exhausted for argument {index}: analysis promised exhaustiveness")]
    DispatchExhausted { index: usize },
    #[error(transparent)]
    Fault(#[from] MemFault),
}

/// Collects the classified arguments of one call before it is issued.
/// Mirrors the per-call-site code a lowering pass would emit.
#[derive(Default)]
pub struct RequestBuilder {
    callee: Option<u32>,
    args: Vec<ArgDescriptor>,
}

impl RequestBuilder {
    pub fn set_callee(&mut self, callee: u32) {
        self.callee = Some(callee);
    }

    pub fn add_value_arg(&mut self, raw: u64) {
        self.args.push(ArgDescriptor::Value { raw });
    }

    pub fn add_ref_arg(
        &mut self,
        addr: SimAddress,
        mode: AccessMode,
        obj_size: u64,
        obj_offset: u64,
    ) -> Result<(), RpcError> {
        let index = self.args.len();
        if obj_size == 0 || obj_offset >= obj_size {
            return Err(RpcError::InvalidDescriptor {
                index,
                reason: "object offset must lie inside the object",
            });
        }
        if addr.offset < obj_offset {
            return Err(RpcError::InvalidDescriptor {
                index,
                reason: "address is closer to the space origin than its offset",
            });
        }
        self.args.push(ArgDescriptor::Ref {
            addr,
            mode,
            obj_size,
            obj_offset,
        });
        Ok(())
    }

    pub fn args(&self) -> &[ArgDescriptor] {
        &self.args
    }

    fn finish(self) -> Result<(u32, Vec<ArgDescriptor>), RpcError> {
        let callee = self.callee.ok_or(RpcError::MissingCallee)?;
        if self.args.len() > MAX_ARGS {
            return Err(RpcError::TooManyArgs {
                count: self.args.len(),
                max: MAX_ARGS,
            });
        }
        Ok((callee, self.args))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::{SimMemory, SimMemoryConfig, SpaceKind};
    use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
    use std::sync::Arc;
    use std::time::Duration;

    struct Harness {
        mem: Arc<SimMemory>,
        client: RpcClient,
        pads: Arc<PadTable>,
        shutdown: Arc<AtomicBool>,
        server: Option<std::thread::JoinHandle<()>>,
    }

    impl Harness {
        fn new() -> Harness {
            let mem = Arc::new(SimMemory::new(&SimMemoryConfig::default()));
            let shared = RpcShared::new(Arc::clone(&mem), 4096, Duration::from_secs(10));
            let pads = Arc::new(PadTable::new());
            let server = HostServer::new(Arc::clone(&shared), Arc::clone(&pads));
            let shutdown = Arc::new(AtomicBool::new(false));
            let stop = Arc::clone(&shutdown);
            let handle = std::thread::spawn(move || server.run(&stop));
            Harness {
                mem,
                client: RpcClient::new(shared),
                pads,
                shutdown,
                server: Some(handle),
            }
        }
    }

    impl Drop for Harness {
        fn drop(&mut self) {
            self.shutdown.store(true, Ordering::Release);
            self.server.take().unwrap().join().unwrap();
        }
    }

    #[test]
    fn end_to_end_migration_and_modes() {
        let h = Harness::new();
        let calls = Arc::new(AtomicU32::new(0));
        let calls2 = Arc::clone(&calls);
        let id = h
            .pads
            .register(
                "__touch_cp_ip",
                vec![ParamEffect::Value, ParamEffect::Access(AccessMode::Read)],
                Arc::new(move |ctx| {
                    calls2.fetch_add(1, Ordering::Relaxed);
                    let v = ctx.value(0)?;
                    let ro = ctx.ref_arg(1)?;
                    let rw = ctx.ref_arg(2)?;
                    let wo = ctx.ref_arg(3)?;
                    // Write-only payloads arrive zeroed.
                    for b in ctx.memory().read_bytes(wo.base, wo.size)? {
                        assert_eq!(b, 0);
                    }
                    // Scribble on the read-only copy; the device object must
                    // be unaffected.
                    ctx.memory().write_bytes(ro.ptr, &[0xEE; 4])?;
                    let x = ctx.memory().read_u32(rw.ptr)?;
                    ctx.memory().write_u32(rw.ptr, x + 1)?;
                    ctx.memory().write_u32(wo.ptr, 0x5150)?;
                    Ok(v + x as u64)
                }),
            )
            .unwrap();

        let ro = h.mem.place_static(SpaceKind::Device, &[7; 16], false).unwrap();
        let rw = h.mem.place_static(SpaceKind::Device, &[0; 8], false).unwrap();
        let wo = h.mem.place_static(SpaceKind::Device, &[0xAA; 8], false).unwrap();
        h.mem.write_u32(rw.add(4), 41).unwrap();

        let ret = h
            .client
            .issue_call(|b| {
                b.set_callee(id);
                b.add_value_arg(1000);
                b.add_ref_arg(ro, AccessMode::Read, 16, 0)?;
                b.add_ref_arg(rw.add(4), AccessMode::ReadWrite, 8, 4)?;
                b.add_ref_arg(wo, AccessMode::Write, 8, 0)?;
                Ok(())
            })
            .unwrap();

        assert_eq!(ret, 1041);
        assert_eq!(calls.load(Ordering::Relaxed), 1, "exactly one invocation");
        assert_eq!(h.mem.read_bytes(ro, 16).unwrap(), vec![7; 16], "read-only unchanged");
        assert_eq!(h.mem.read_u32(rw.add(4)).unwrap(), 42, "readwrite copied back");
        assert_eq!(h.mem.read_u32(wo).unwrap(), 0x5150, "write copied back");
        assert_eq!(h.mem.read_u32(wo.add(4)).unwrap(), 0, "write tail zeroed");

        let records = h.client.shared().stage_log().snapshot();
        assert_eq!(records.len(), 1);
        let sum: f64 = records[0].device.fractions().iter().sum();
        assert!((sum - 1.0).abs() < 1e-3);
    }

    #[test]
    fn unknown_callee_is_in_band() {
        let h = Harness::new();
        let err = h
            .client
            .issue_call(|b| {
                b.set_callee(9999);
                b.add_value_arg(1);
                Ok(())
            })
            .unwrap_err();
        assert_eq!(err, RpcError::UnknownCallee { callee: 9999 });
        // The mailbox survives for the next call.
        let id = h
            .pads
            .register("__ok", vec![], Arc::new(|_| Ok(5)))
            .unwrap();
        let ret = h
            .client
            .issue_call(|b| {
                b.set_callee(id);
                Ok(())
            })
            .unwrap();
        assert_eq!(ret, 5);
    }

    #[test]
    fn payload_overflow_rejected_before_issuing() {
        let h = Harness::new();
        let obj = h.mem.place_static(SpaceKind::Device, &[0; 64], false).unwrap();
        let err = h
            .client
            .issue_call(|b| {
                b.set_callee(1);
                b.add_ref_arg(obj, AccessMode::Read, 1 << 20, 0)?;
                Ok(())
            })
            .unwrap_err();
        assert!(matches!(err, RpcError::PayloadOverflow { .. }));
    }

    #[test]
    fn serve_once_without_request_is_a_no_op() {
        let mem = Arc::new(SimMemory::new(&SimMemoryConfig::default()));
        let shared = RpcShared::new(Arc::clone(&mem), 4096, Duration::from_secs(1));
        let pads = Arc::new(PadTable::new());
        let server = HostServer::new(shared, pads);
        assert!(!server.serve_once());
    }

    #[test]
    fn builder_validates_descriptors() {
        let mut b = RequestBuilder::default();
        b.set_callee(3);
        b.add_value_arg(7);
        b.add_ref_arg(SimAddress::device(100), AccessMode::Read, 16, 4)
            .unwrap();
        assert!(matches!(
            b.add_ref_arg(SimAddress::device(100), AccessMode::Read, 16, 16),
            Err(RpcError::InvalidDescriptor { .. })
        ));
        assert!(matches!(
            b.add_ref_arg(SimAddress::device(2), AccessMode::Read, 16, 4),
            Err(RpcError::InvalidDescriptor { .. })
        ));
        let (callee, args) = b.finish().unwrap();
        assert_eq!(callee, 3);
        assert_eq!(args.len(), 2);
    }

    #[test]
    fn builder_requires_callee() {
        let b = RequestBuilder::default();
        assert!(matches!(b.finish(), Err(RpcError::MissingCallee)));
    }
}
