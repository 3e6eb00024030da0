//! Host-side server: polls the mailbox, translates reference arguments to
//! their payload copies, and dispatches to registered landing pads.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::mem::{MemFault, SimAddress, SimMemory, Translation};

use super::client::RpcShared;
use super::wire::{
    self, ERR_HANDLER_FAULT, ERR_NONE, ERR_UNKNOWN_CALLEE, STATE_DONE, STATE_REQUESTED,
};
use super::{ArgDescriptor, ParamEffect, DISPATCH_ERROR_RET};

/// Error a landing pad reports back through the mailbox.
#[derive(Clone, Debug)]
pub struct HandlerError {
    pub code: u32,
    pub message: String,
}

impl HandlerError {
    pub fn new(code: u32, message: impl Into<String>) -> HandlerError {
        HandlerError { code, message: message.into() }
    }
}

impl From<MemFault> for HandlerError {
    fn from(f: MemFault) -> HandlerError {
        HandlerError::new(100, f.to_string())
    }
}

pub type HandlerFn = Arc<dyn Fn(&HostCallCtx<'_>) -> Result<u64, HandlerError> + Send + Sync>;

/// A host wrapper generated for one (callee, variadic type combination).
pub struct LandingPad {
    pub name: String,
    pub callee_id: u32,
    pub param_effects: Vec<ParamEffect>,
    pub handler: HandlerFn,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum PadError {
    #[error("callee id {0} is already registered")]
    DuplicateId(u32),
    #[error("landing pad `{0}` is already registered")]
    DuplicateName(String),
}

#[derive(Default)]
struct PadTableInner {
    by_id: HashMap<u32, Arc<LandingPad>>,
    by_name: HashMap<String, u32>,
    next_id: u32,
}

/// Registry of landing pads, keyed by the compile-time callee id.
#[derive(Default)]
pub struct PadTable {
    inner: Mutex<PadTableInner>,
}

impl PadTable {
    pub fn new() -> PadTable {
        PadTable {
            inner: Mutex::new(PadTableInner { next_id: 1, ..Default::default() }),
        }
    }

    /// Registers under the next free id (ids start at 1; 0 is reserved for
    /// the kernel launch).
    pub fn register(
        &self,
        name: &str,
        param_effects: Vec<ParamEffect>,
        handler: HandlerFn,
    ) -> Result<u32, PadError> {
        let mut inner = self.inner.lock().unwrap();
        while inner.by_id.contains_key(&inner.next_id) {
            inner.next_id += 1;
        }
        let id = inner.next_id;
        Self::insert(&mut inner, id, name, param_effects, handler)?;
        inner.next_id = id + 1;
        Ok(id)
    }

    /// Registers under an explicit id, e.g. one assigned by a lowering plan.
    pub fn register_at(
        &self,
        id: u32,
        name: &str,
        param_effects: Vec<ParamEffect>,
        handler: HandlerFn,
    ) -> Result<(), PadError> {
        let mut inner = self.inner.lock().unwrap();
        Self::insert(&mut inner, id, name, param_effects, handler)
    }

    fn insert(
        inner: &mut PadTableInner,
        id: u32,
        name: &str,
        param_effects: Vec<ParamEffect>,
        handler: HandlerFn,
    ) -> Result<(), PadError> {
        if inner.by_id.contains_key(&id) {
            return Err(PadError::DuplicateId(id));
        }
        if inner.by_name.contains_key(name) {
            return Err(PadError::DuplicateName(name.to_string()));
        }
        inner.by_name.insert(name.to_string(), id);
        inner.by_id.insert(
            id,
            Arc::new(LandingPad {
                name: name.to_string(),
                callee_id: id,
                param_effects,
                handler,
            }),
        );
        Ok(())
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.inner.lock().unwrap().by_name.get(name).copied()
    }

    pub fn get(&self, id: u32) -> Option<Arc<LandingPad>> {
        self.inner.lock().unwrap().by_id.get(&id).cloned()
    }
}

/// View of one reference argument from the host side.
#[derive(Clone, Copy, Debug)]
pub struct RefView {
    /// Pointer with the same offset into the payload copy of the object.
    pub ptr: SimAddress,
    /// Base of the payload copy.
    pub base: SimAddress,
    pub size: u64,
    pub offset: u64,
    pub mode: super::AccessMode,
}

#[derive(Clone, Copy, Debug)]
pub enum HostArg {
    Value(u64),
    Ref(RefView),
}

/// Call context handed to a landing pad.
pub struct HostCallCtx<'a> {
    pub callee: u32,
    pub serial: u64,
    mem: &'a SimMemory,
    args: &'a [HostArg],
}

impl<'a> HostCallCtx<'a> {
    pub fn arg_count(&self) -> usize {
        self.args.len()
    }

    pub fn arg(&self, index: usize) -> Result<&HostArg, HandlerError> {
        self.args
            .get(index)
            .ok_or_else(|| HandlerError::new(101, format!("missing argument {index}")))
    }

    pub fn value(&self, index: usize) -> Result<u64, HandlerError> {
        match self.arg(index)? {
            HostArg::Value(raw) => Ok(*raw),
            HostArg::Ref(_) => Err(HandlerError::new(
                102,
                format!("argument {index} is a reference, expected a value"),
            )),
        }
    }

    pub fn ref_arg(&self, index: usize) -> Result<RefView, HandlerError> {
        match self.arg(index)? {
            HostArg::Ref(view) => Ok(*view),
            HostArg::Value(_) => Err(HandlerError::new(
                103,
                format!("argument {index} is a value, expected a reference"),
            )),
        }
    }

    pub fn memory(&self) -> &SimMemory {
        self.mem
    }

    /// Reads a NUL-terminated string out of a reference argument's payload.
    pub fn read_cstr(&self, view: RefView) -> Result<String, HandlerError> {
        let avail = view.size - view.offset;
        let bytes = self.mem.read_bytes(view.ptr, avail)?;
        let end = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
        Ok(String::from_utf8_lossy(&bytes[..end]).into_owned())
    }
}

/// The single host server agent.
pub struct HostServer {
    shared: Arc<RpcShared>,
    pads: Arc<PadTable>,
}

impl HostServer {
    pub fn new(shared: Arc<RpcShared>, pads: Arc<PadTable>) -> HostServer {
        HostServer { shared, pads }
    }

    /// Serves at most one pending request. Returns whether one was served.
    /// An unregistered callee id is answered with a dispatch-error code and
    /// flag; the server never aborts.
    pub fn serve_once(&self) -> bool {
        let sh = &*self.shared;
        let mem = &*sh.mem;
        match mem.flag_load(wire::state_addr()) {
            Ok(STATE_REQUESTED) => {}
            _ => return false,
        }
        let t0 = Instant::now();

        // Copy the request header and descriptors to the host.
        let serial = mem.read_u64(SimAddress::shared(wire::OFF_SERIAL)).unwrap_or(0);
        let callee = mem.read_u32(SimAddress::shared(wire::OFF_CALLEE)).unwrap_or(0);
        let nargs = mem
            .read_u32(SimAddress::shared(wire::OFF_NARGS))
            .unwrap_or(0)
            .min(wire::MAX_ARGS as u32) as usize;
        let mut args = Vec::with_capacity(nargs);
        for i in 0..nargs {
            match wire::read_descriptor(mem, i) {
                Ok((ArgDescriptor::Value { raw }, _)) => args.push(HostArg::Value(raw)),
                Ok((
                    ArgDescriptor::Ref { addr, mode, obj_size, obj_offset },
                    payload_off,
                )) => {
                    let payload_base = wire::payload_addr(payload_off);
                    // The host call site uses a pointer with the same offset
                    // into the payload version of the object.
                    let translation = Translation {
                        source_base: SimAddress::new(addr.space, addr.offset - obj_offset),
                        dest_base: payload_base,
                        length: obj_size,
                    };
                    let ptr = translation.translate(addr).unwrap_or(payload_base);
                    args.push(HostArg::Ref(RefView {
                        ptr,
                        base: payload_base,
                        size: obj_size,
                        offset: obj_offset,
                        mode,
                    }));
                }
                Err(_) => args.push(HostArg::Value(0)),
            }
        }
        let t1 = Instant::now();

        let (ret, err) = match self.pads.get(callee) {
            None => (DISPATCH_ERROR_RET, ERR_UNKNOWN_CALLEE),
            Some(pad) => {
                let ctx = HostCallCtx { callee, serial, mem, args: &args };
                match (pad.handler)(&ctx) {
                    Ok(ret) => (ret, ERR_NONE),
                    Err(e) => (e.code as u64, ERR_HANDLER_FAULT),
                }
            }
        };
        let t2 = Instant::now();

        let _ = mem.write_u64(SimAddress::shared(wire::OFF_RET), ret);
        let _ = mem.write_u32(SimAddress::shared(wire::OFF_ERR), err);
        let _ = mem.write_u64(SimAddress::shared(wire::OFF_DONE_TS), sh.now_ns());
        // Return value and copy-out happen-before the Done flag.
        let _ = mem.flag_store(wire::state_addr(), STATE_DONE);
        let t3 = Instant::now();

        sh.stages.record_host(
            serial,
            callee,
            (t1 - t0).as_nanos() as u64,
            (t2 - t1).as_nanos() as u64,
            (t3 - t2).as_nanos() as u64,
        );
        true
    }

    /// Polls until `shutdown` is set, with bounded back-off while idle.
    pub fn run(&self, shutdown: &AtomicBool) {
        let mut idle = 0u32;
        while !shutdown.load(Ordering::Acquire) {
            if self.serve_once() {
                idle = 0;
            } else {
                idle += 1;
                if idle < 64 {
                    std::hint::spin_loop();
                } else if idle < 1024 {
                    std::thread::yield_now();
                } else {
                    std::thread::sleep(Duration::from_micros(50));
                }
            }
        }
    }
}
