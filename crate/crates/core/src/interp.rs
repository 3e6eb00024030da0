//! Interpreter for the mini-IR.
//!
//! Runs a loaded module on the simulated device: globals are placed in the
//! static region, allocas come from the simulated stack (registered for
//! dynamic lookup and popped on return), heap allocations go through the
//! device allocator, and every external call site executes its lowering plan
//! through a pluggable dispatcher — the real RPC path in production, a
//! recording hook in analysis tests.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::heap::{AllocError, DeviceHeap};
use crate::ir::{FuncDef, Inst, InstKind, Module, Operand};
use crate::lower::{lower_module, BaseObj, LoweringPlan, ModulePlans, ObjectResolver};
use crate::mem::{MemFault, SimAddress, SimMemory, SpaceKind};
use crate::registry::{DeviceRegistry, StackRegistry};
use crate::rpc::RpcError;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum InterpError {
    #[error("line {line}: {fault}")]
    Fault { line: u32, fault: MemFault },
    #[error("line {line}: {source}")]
    Alloc { line: u32, source: AllocError },
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error("line {line}: value {bits:#x} is not an address")]
    BadAddress { line: u32, bits: u64 },
    #[error("call to unknown function `{0}`")]
    UnknownFunction(String),
    #[error("no lowering plan for the call in `{func}` at line {line}")]
    MissingPlan { func: String, line: u32 },
    #[error("local call depth limit exceeded")]
    DepthLimit,
    #[error("handler error {code}: {message}")]
    Handler { code: u32, message: String },
}

/// A module placed into simulated memory, with its lowering plans.
pub struct LoadedProgram {
    pub module: Module,
    pub plans: ModulePlans,
    pub globals: HashMap<String, SimAddress>,
    /// Textual external-call index by (function, source line).
    call_indices: HashMap<(String, u32), usize>,
}

/// Places every global into the device static region and lowers the module.
pub fn load_program(module: Module, mem: &SimMemory) -> Result<LoadedProgram, InterpError> {
    let plans = lower_module(&module);
    let mut globals = HashMap::new();
    for g in &module.globals {
        let init = g.init.clone().unwrap_or_default();
        let addr = mem
            .place_static_sized(SpaceKind::Device, &init, g.size, g.constant)
            .map_err(|fault| InterpError::Fault { line: g.line, fault })?;
        globals.insert(g.name.clone(), addr);
    }
    let mut call_indices = HashMap::new();
    for f in &module.funcs {
        let mut idx = 0usize;
        collect_calls(&f.body, &f.name, &mut idx, &mut call_indices);
    }
    Ok(LoadedProgram { module, plans, globals, call_indices })
}

fn collect_calls(
    body: &[Inst],
    func: &str,
    idx: &mut usize,
    out: &mut HashMap<(String, u32), usize>,
) {
    for inst in body {
        match &inst.kind {
            InstKind::CallExt { .. } => {
                out.insert((func.to_string(), inst.line), *idx);
                *idx += 1;
            }
            InstKind::Loop { body, .. } => collect_calls(body, func, idx, out),
            _ => {}
        }
    }
}

/// One external call about to be performed, handed to the dispatcher.
pub struct ExternalCall<'a> {
    pub plan: &'a LoweringPlan,
    pub arg_values: &'a [u64],
    pub resolver: &'a dyn ObjectResolver,
    pub registry: &'a DeviceRegistry,
}

/// Executes external calls on behalf of the interpreter.
pub trait ExternalDispatch {
    fn call_external(&self, call: &ExternalCall<'_>) -> Result<u64, InterpError>;
}

impl<F> ExternalDispatch for F
where
    F: Fn(&ExternalCall<'_>) -> Result<u64, InterpError>,
{
    fn call_external(&self, call: &ExternalCall<'_>) -> Result<u64, InterpError> {
        self(call)
    }
}

struct FrameResolver<'a> {
    func: &'a str,
    globals: &'a HashMap<String, SimAddress>,
    values: &'a HashMap<String, u64>,
}

impl ObjectResolver for FrameResolver<'_> {
    fn object_base(&self, obj: &BaseObj) -> Option<SimAddress> {
        match obj {
            BaseObj::Global { name } => self.globals.get(name).copied(),
            BaseObj::Alloca { func, value } => {
                if func != self.func {
                    return None;
                }
                SimAddress::decode(*self.values.get(value)?)
            }
        }
    }
}

pub struct Interp<'a> {
    pub mem: &'a SimMemory,
    pub heap: &'a DeviceHeap,
    pub stack: &'a StackRegistry,
    pub registry: &'a DeviceRegistry,
    pub program: &'a LoadedProgram,
    pub dispatch: &'a dyn ExternalDispatch,
    pub depth_limit: usize,
}

enum Flow {
    Continue,
    Return(Option<u64>),
}

impl<'a> Interp<'a> {
    pub fn new(
        mem: &'a SimMemory,
        heap: &'a DeviceHeap,
        stack: &'a StackRegistry,
        registry: &'a DeviceRegistry,
        program: &'a LoadedProgram,
        dispatch: &'a dyn ExternalDispatch,
    ) -> Interp<'a> {
        Interp {
            mem,
            heap,
            stack,
            registry,
            program,
            dispatch,
            depth_limit: 128,
        }
    }

    pub fn run(&self, func: &str, args: &[u64]) -> Result<Option<u64>, InterpError> {
        let f = self
            .program
            .module
            .func(func)
            .ok_or_else(|| InterpError::UnknownFunction(func.to_string()))?;
        self.run_func(f, args, 0)
    }

    fn run_func(&self, f: &FuncDef, args: &[u64], depth: usize) -> Result<Option<u64>, InterpError> {
        if depth > self.depth_limit {
            return Err(InterpError::DepthLimit);
        }
        let mut values: HashMap<String, u64> = f
            .params
            .iter()
            .cloned()
            .zip(args.iter().copied())
            .collect();
        let mark = self.stack.push_frame();
        let result = self.run_body(f, &f.body, &mut values, depth);
        self.stack.pop_frame(mark);
        match result? {
            Flow::Return(v) => Ok(v),
            Flow::Continue => Ok(None),
        }
    }

    fn run_body(
        &self,
        f: &FuncDef,
        body: &[Inst],
        values: &mut HashMap<String, u64>,
        depth: usize,
    ) -> Result<Flow, InterpError> {
        for inst in body {
            let line = inst.line;
            let result: Option<u64> = match &inst.kind {
                InstKind::Alloca { size } => {
                    let addr = self
                        .stack
                        .allocate(*size)
                        .map_err(|fault| InterpError::Fault { line, fault })?;
                    self.mem
                        .fill_zero(addr, *size)
                        .map_err(|fault| InterpError::Fault { line, fault })?;
                    Some(addr.encode())
                }
                InstKind::HeapAlloc { size } => {
                    let addr = self
                        .heap
                        .allocate(0, 0, *size)
                        .map_err(|source| InterpError::Alloc { line, source })?;
                    Some(addr.encode())
                }
                InstKind::FieldAddr { base, offset } => {
                    let bits = self.eval(base, values);
                    let addr = SimAddress::decode(bits)
                        .ok_or(InterpError::BadAddress { line, bits })?;
                    Some(addr.add(*offset).encode())
                }
                InstKind::Select { cond, a, b } => {
                    let c = self.eval(cond, values);
                    Some(if c != 0 { self.eval(a, values) } else { self.eval(b, values) })
                }
                InstKind::Load { addr, width } => {
                    let bits = self.eval(addr, values);
                    let a = SimAddress::decode(bits)
                        .ok_or(InterpError::BadAddress { line, bits })?;
                    let mut buf = [0u8; 8];
                    self.mem
                        .read_into(a, &mut buf[..*width as usize])
                        .map_err(|fault| InterpError::Fault { line, fault })?;
                    Some(u64::from_le_bytes(buf))
                }
                InstKind::Store { addr, value, width } => {
                    let bits = self.eval(addr, values);
                    let a = SimAddress::decode(bits)
                        .ok_or(InterpError::BadAddress { line, bits })?;
                    let v = self.eval(value, values).to_le_bytes();
                    self.mem
                        .write_bytes(a, &v[..*width as usize])
                        .map_err(|fault| InterpError::Fault { line, fault })?;
                    None
                }
                InstKind::CallExt { args, .. } => {
                    let arg_values: Vec<u64> =
                        args.iter().map(|a| self.eval(&a.op, values)).collect();
                    let idx = self
                        .program
                        .call_indices
                        .get(&(f.name.clone(), line))
                        .copied()
                        .ok_or_else(|| InterpError::MissingPlan { func: f.name.clone(), line })?;
                    let plan = self
                        .program
                        .plans
                        .for_site(&f.name, idx)
                        .ok_or_else(|| InterpError::MissingPlan { func: f.name.clone(), line })?;
                    let resolver = FrameResolver {
                        func: &f.name,
                        globals: &self.program.globals,
                        values,
                    };
                    let call = ExternalCall {
                        plan,
                        arg_values: &arg_values,
                        resolver: &resolver,
                        registry: self.registry,
                    };
                    Some(self.dispatch.call_external(&call)?)
                }
                InstKind::CallLocal { callee, args } => {
                    let arg_values: Vec<u64> =
                        args.iter().map(|a| self.eval(a, values)).collect();
                    let callee_fn = self
                        .program
                        .module
                        .func(callee)
                        .ok_or_else(|| InterpError::UnknownFunction(callee.clone()))?;
                    self.run_func(callee_fn, &arg_values, depth + 1)?
                }
                InstKind::Loop { trip, body } => {
                    for _ in 0..*trip {
                        if let Flow::Return(v) = self.run_body(f, body, values, depth)? {
                            return Ok(Flow::Return(v));
                        }
                    }
                    None
                }
                InstKind::Return { value } => {
                    let v = value.as_ref().map(|op| self.eval(op, values));
                    return Ok(Flow::Return(v));
                }
            };
            if let (Some(dst), Some(v)) = (&inst.dst, result) {
                values.insert(dst.clone(), v);
            }
        }
        Ok(Flow::Continue)
    }

    fn eval(&self, op: &Operand, values: &HashMap<String, u64>) -> u64 {
        match op {
            // Validation guarantees definedness.
            Operand::Value(v) => values.get(v).copied().unwrap_or(0),
            Operand::Global(g) => self.program.globals.get(g).map_or(0, |a| a.encode()),
            Operand::Imm(n) => *n,
        }
    }
}

/// Everything needed to interpret programs on a fresh simulated device.
/// Bundles the memory, heap, stack, and registry for tests and tools.
pub struct DeviceEnv {
    pub mem: Arc<SimMemory>,
    pub heap: Arc<DeviceHeap>,
    pub stack: Arc<StackRegistry>,
    pub registry: Arc<DeviceRegistry>,
}

impl DeviceEnv {
    pub fn new(
        mem: Arc<SimMemory>,
        heap: Arc<DeviceHeap>,
        stack: Arc<StackRegistry>,
    ) -> DeviceEnv {
        let registry = Arc::new(DeviceRegistry::new(
            Arc::clone(&mem),
            Arc::clone(&heap),
            Arc::clone(&stack),
        ));
        DeviceEnv { mem, heap, stack, registry }
    }

    pub fn interp<'a>(
        &'a self,
        program: &'a LoadedProgram,
        dispatch: &'a dyn ExternalDispatch,
    ) -> Interp<'a> {
        Interp::new(
            &self.mem,
            &self.heap,
            &self.stack,
            &self.registry,
            program,
            dispatch,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heap::{AllocatorConfig, AllocatorSpec};
    use crate::ir;
    use crate::mem::SimMemoryConfig;

    fn env() -> DeviceEnv {
        let mem = Arc::new(SimMemory::new(&SimMemoryConfig {
            device_capacity: 1 << 20,
            host_capacity: 4096,
            shared_capacity: 4096,
            device_static_limit: Some(1 << 16),
        }));
        let heap = Arc::new(
            DeviceHeap::new(
                Arc::clone(&mem),
                AllocatorConfig::new(
                    AllocatorSpec::Generic,
                    SimAddress::device(1 << 18),
                    1 << 18,
                ),
            )
            .unwrap(),
        );
        let stack = Arc::new(StackRegistry::new(SimAddress::device(1 << 16), 1 << 17));
        DeviceEnv::new(mem, heap, stack)
    }

    fn no_ext(_: &ExternalCall<'_>) -> Result<u64, InterpError> {
        Ok(0)
    }

    #[test]
    fn arithmetic_through_memory() {
        let e = env();
        let module = ir::parse(
            "func main() {\n  x = alloca 8\n  store x, #41, 8\n  v = load x, 8\n  f = fieldaddr x + 4\n  store f, #7, 4\n  w = load f, 4\n  return w\n}\n",
        )
        .unwrap();
        let program = load_program(module, &e.mem).unwrap();
        let dispatch = no_ext;
        let out = e.interp(&program, &dispatch).run("main", &[]).unwrap();
        assert_eq!(out, Some(7));
    }

    #[test]
    fn loops_and_local_calls() {
        let e = env();
        let module = ir::parse(
            "global @acc size=8\n\
             func bump(cell) {\n  v = load cell, 8\n  w = fieldaddr cell + 0\n  store w, v, 8\n  return\n}\n\
             func main() {\n  loop 5 {\n    v = load @acc, 8\n    x = alloca 8\n    store x, v, 8\n    call local bump(x)\n    w = load x, 8\n    store @acc, w, 8\n  }\n  r = load @acc, 8\n  return r\n}\n",
        )
        .unwrap();
        let program = load_program(module, &e.mem).unwrap();
        let dispatch = no_ext;
        let out = e.interp(&program, &dispatch).run("main", &[]).unwrap();
        assert_eq!(out, Some(0));
    }

    #[test]
    fn heapalloc_registers_objects() {
        let e = env();
        let module = ir::parse("func main() {\n  p = heapalloc 40\n  q = fieldaddr p + 4\n  store q, #9, 4\n  return q\n}\n").unwrap();
        let program = load_program(module, &e.mem).unwrap();
        let dispatch = no_ext;
        let out = e.interp(&program, &dispatch).run("main", &[]).unwrap().unwrap();
        let addr = SimAddress::decode(out).unwrap();
        let info = e.registry.find_object(addr).unwrap();
        assert_eq!(info.size, 40);
        assert_eq!(info.offset, 4);
        assert_eq!(e.mem.read_u32(addr).unwrap(), 9);
    }

    #[test]
    fn faults_are_recoverable_values() {
        let e = env();
        let module =
            ir::parse("func main() {\n  x = alloca 4\n  f = fieldaddr x + 99999999\n  v = load f, 4\n  return v\n}\n")
                .unwrap();
        let program = load_program(module, &e.mem).unwrap();
        let dispatch = no_ext;
        let err = e.interp(&program, &dispatch).run("main", &[]).unwrap_err();
        assert!(matches!(err, InterpError::Fault { .. }), "{err}");
    }

    #[test]
    fn allocas_pop_with_frames() {
        let e = env();
        let module = ir::parse(
            "func inner() {\n  x = alloca 16\n  return x\n}\n\
             func main() {\n  p = call local inner()\n  return p\n}\n",
        )
        .unwrap();
        let program = load_program(module, &e.mem).unwrap();
        let dispatch = no_ext;
        let out = e.interp(&program, &dispatch).run("main", &[]).unwrap().unwrap();
        let addr = SimAddress::decode(out).unwrap();
        assert!(e.registry.find_object(addr).is_none(), "popped slot must be gone");
    }
}
