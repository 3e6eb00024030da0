//! Underlying-object analysis and call-site lowering.
//!
//! For each external call site the analysis classifies every argument:
//!
//! * `Value` — plain scalars and opaque host handles; passed through as
//!   8 bytes, memory never moved.
//! * `StaticRef` — a pointer whose underlying object and constant offset are
//!   known; emitted directly with the object size and access mode.
//! * `Dispatch` — a pointer with finitely many statically identified
//!   candidates; resolved at run time by pointer-equality comparison in
//!   candidate order.
//! * `DynamicLookup` — everything else; resolved at run time against the
//!   allocation registry, falling back to a value argument when no object
//!   is found.
//!
//! The analysis walks the def chain backwards over `fieldaddr`, `select`,
//! and local-call summaries of depth one. A base qualifies as a static
//! candidate only when it is a global or an alloca of the analyzed function
//! that is neither loop-varying nor in a recursive function; anything weaker
//! degrades to a dynamic lookup, which stays sound because the runtime
//! registry also tracks stack slots.

use std::collections::{HashMap, HashSet};
use std::fmt;

use crate::ir::{CallArg, FuncDef, Inst, InstKind, Module, Operand};
use crate::mem::SimAddress;
use crate::registry::DeviceRegistry;
use crate::rpc::{mangle, AccessMode, ParamEffect, RequestBuilder, RpcError, TypeCode};

/// A statically identified base object.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaseObj {
    Global { name: String },
    Alloca { func: String, value: String },
}

impl fmt::Display for BaseObj {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaseObj::Global { name } => write!(f, "@{name}"),
            BaseObj::Alloca { value, .. } => write!(f, "{value}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticCandidate {
    pub object: BaseObj,
    pub offset: u64,
    pub size: u64,
    pub mode: AccessMode,
}

impl fmt::Display for StaticCandidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}+{} size={} {}",
            self.object, self.offset, self.size, self.mode
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Classification {
    Value,
    StaticRef(StaticCandidate),
    Dispatch { candidates: Vec<StaticCandidate> },
    DynamicLookup { mode: AccessMode },
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Classification::Value => write!(f, "value"),
            Classification::StaticRef(c) => write!(f, "static({c})"),
            Classification::Dispatch { candidates } => {
                write!(f, "dispatch{{")?;
                for (i, c) in candidates.iter().enumerate() {
                    if i > 0 {
                        write!(f, " | ")?;
                    }
                    write!(f, "{c}")?;
                }
                write!(f, "}}")
            }
            Classification::DynamicLookup { mode } => write!(f, "dynamic({mode})"),
        }
    }
}

/// What the backward walk finds for one pointer value.
#[derive(Clone, Debug, PartialEq)]
pub enum UnderlyingObjects {
    Unique { base: BaseObj, offset: u64 },
    Candidates(Vec<(BaseObj, u64)>),
    Unknown,
}

/// Per-call-site recipe for building an RPC request.
#[derive(Clone, Debug, PartialEq)]
pub struct LoweringPlan {
    pub func: String,
    pub call_index: usize,
    pub callee: String,
    pub callee_id: u32,
    pub landing_pad: String,
    pub args: Vec<Classification>,
    pub line: u32,
}

impl fmt::Display for LoweringPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}: pad={} id={} args=[",
            self.func, self.call_index, self.landing_pad, self.callee_id
        )?;
        for (i, c) in self.args.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "]")
    }
}

#[derive(Clone, Debug, Default)]
pub struct ModulePlans {
    pub plans: Vec<LoweringPlan>,
    pad_ids: HashMap<String, u32>,
}

impl ModulePlans {
    pub fn for_site(&self, func: &str, call_index: usize) -> Option<&LoweringPlan> {
        self.plans
            .iter()
            .find(|p| p.func == func && p.call_index == call_index)
    }

    pub fn pad_ids(&self) -> &HashMap<String, u32> {
        &self.pad_ids
    }
}

// === analysis internals ===

struct WalkBase {
    obj: BaseObj,
    offset: u64,
    /// Usable as a static candidate: an own-function, non-loop, non-recursive
    /// alloca, or a global.
    exact: bool,
}

struct WalkResult {
    bases: Vec<WalkBase>,
    unknown: bool,
}

impl WalkResult {
    fn unknown() -> WalkResult {
        WalkResult { bases: Vec::new(), unknown: true }
    }

    fn single(obj: BaseObj, exact: bool) -> WalkResult {
        WalkResult {
            bases: vec![WalkBase { obj, offset: 0, exact }],
            unknown: false,
        }
    }

    fn shift(mut self, delta: u64) -> WalkResult {
        for b in &mut self.bases {
            b.offset += delta;
        }
        self
    }

    fn merge(mut self, other: WalkResult) -> WalkResult {
        self.unknown |= other.unknown;
        self.bases.extend(other.bases);
        self
    }
}

struct DefInfo<'m> {
    inst: &'m Inst,
    loop_depth: u32,
}

struct FuncCtx<'m> {
    func: &'m FuncDef,
    defs: HashMap<&'m str, DefInfo<'m>>,
    params: HashSet<&'m str>,
}

struct Analyzer<'m> {
    module: &'m Module,
    funcs: HashMap<&'m str, FuncCtx<'m>>,
    recursive: HashSet<&'m str>,
    /// (caller, callee) -> argument operand lists at each call site.
    call_sites: HashMap<&'m str, Vec<(&'m str, Vec<Operand>)>>,
}

fn collect_defs<'m>(
    body: &'m [Inst],
    depth: u32,
    defs: &mut HashMap<&'m str, DefInfo<'m>>,
) {
    for inst in body {
        if let Some(dst) = &inst.dst {
            defs.insert(dst.as_str(), DefInfo { inst, loop_depth: depth });
        }
        if let InstKind::Loop { body, .. } = &inst.kind {
            collect_defs(body, depth + 1, defs);
        }
    }
}

fn visit_insts<'m>(body: &'m [Inst], f: &mut impl FnMut(&'m Inst)) {
    for inst in body {
        f(inst);
        if let InstKind::Loop { body, .. } = &inst.kind {
            visit_insts(body, f);
        }
    }
}

impl<'m> Analyzer<'m> {
    fn new(module: &'m Module) -> Analyzer<'m> {
        let mut funcs = HashMap::new();
        let mut call_sites: HashMap<&str, Vec<(&str, Vec<Operand>)>> = HashMap::new();
        let mut edges: HashMap<&str, HashSet<&str>> = HashMap::new();
        for f in &module.funcs {
            let mut defs = HashMap::new();
            collect_defs(&f.body, 0, &mut defs);
            let params = f.params.iter().map(|s| s.as_str()).collect();
            funcs.insert(f.name.as_str(), FuncCtx { func: f, defs, params });
            visit_insts(&f.body, &mut |inst| {
                if let InstKind::CallLocal { callee, args } = &inst.kind {
                    call_sites
                        .entry(callee.as_str())
                        .or_default()
                        .push((f.name.as_str(), args.clone()));
                    edges.entry(f.name.as_str()).or_default().insert(callee.as_str());
                }
            });
        }

        // A function is recursive when it can reach itself in the local
        // call graph; its stack slots may have several live instances.
        let mut recursive = HashSet::new();
        for f in &module.funcs {
            let mut stack = vec![f.name.as_str()];
            let mut seen = HashSet::new();
            while let Some(cur) = stack.pop() {
                if let Some(next) = edges.get(cur) {
                    for &n in next {
                        if n == f.name.as_str() {
                            recursive.insert(f.name.as_str());
                            stack.clear();
                            break;
                        }
                        if seen.insert(n) {
                            stack.push(n);
                        }
                    }
                }
            }
        }

        Analyzer { module, funcs, recursive, call_sites }
    }

    /// Backward walk from an operand to the set of base objects it may
    /// address. `summary_depth` limits local-call summaries for parameters.
    fn walk(&self, func: &str, op: &Operand, summary_depth: u32) -> WalkResult {
        match op {
            Operand::Global(g) => {
                if self.module.global(g).is_some() {
                    WalkResult::single(BaseObj::Global { name: g.clone() }, true)
                } else {
                    WalkResult::unknown()
                }
            }
            Operand::Imm(_) => WalkResult::unknown(),
            Operand::Value(v) => self.walk_value(func, v, summary_depth),
        }
    }

    fn walk_value(&self, func: &str, value: &str, summary_depth: u32) -> WalkResult {
        let Some(ctx) = self.funcs.get(func) else {
            return WalkResult::unknown();
        };
        if ctx.params.contains(value) {
            return self.walk_param(func, value, summary_depth);
        }
        let Some(def) = ctx.defs.get(value) else {
            return WalkResult::unknown();
        };
        match &def.inst.kind {
            InstKind::Alloca { .. } => {
                // An alloca inside a loop or a recursive function has
                // several runtime instances; it cannot serve as a unique
                // comparison candidate.
                let exact = def.loop_depth == 0 && !self.recursive.contains(func);
                WalkResult::single(
                    BaseObj::Alloca { func: func.to_string(), value: value.to_string() },
                    exact,
                )
            }
            InstKind::HeapAlloc { .. } => WalkResult::unknown(),
            InstKind::FieldAddr { base, offset } => {
                self.walk(func, base, summary_depth).shift(*offset)
            }
            InstKind::Select { a, b, .. } => self
                .walk(func, a, summary_depth)
                .merge(self.walk(func, b, summary_depth)),
            InstKind::Load { .. } => WalkResult::unknown(),
            InstKind::CallExt { .. } | InstKind::CallLocal { .. } => WalkResult::unknown(),
            _ => WalkResult::unknown(),
        }
    }

    fn walk_param(&self, func: &str, param: &str, summary_depth: u32) -> WalkResult {
        if summary_depth == 0 || self.recursive.contains(func) {
            return WalkResult::unknown();
        }
        let Some(ctx) = self.funcs.get(func) else {
            return WalkResult::unknown();
        };
        let idx = ctx.func.params.iter().position(|p| p == param).unwrap();
        let Some(sites) = self.call_sites.get(func) else {
            // No caller in the module: unknown origin.
            return WalkResult::unknown();
        };
        let mut result = WalkResult { bases: Vec::new(), unknown: false };
        for (caller, args) in sites {
            let Some(arg) = args.get(idx) else {
                return WalkResult::unknown();
            };
            let mut sub = self.walk(caller, arg, summary_depth - 1);
            // A caller's alloca is not addressable from this function's
            // lowering; keep it for alias queries but not as a candidate.
            for b in &mut sub.bases {
                if let BaseObj::Alloca { func: owner, .. } = &b.obj {
                    if owner != func {
                        b.exact = false;
                    }
                }
            }
            result = result.merge(sub);
        }
        result
    }

    fn object_size(&self, obj: &BaseObj) -> Option<u64> {
        match obj {
            BaseObj::Global { name } => self.module.global(name).map(|g| g.size),
            BaseObj::Alloca { func, value } => {
                let def = self.funcs.get(func.as_str())?.defs.get(value.as_str())?;
                match def.inst.kind {
                    InstKind::Alloca { size } => Some(size),
                    _ => None,
                }
            }
        }
    }

    fn def_order(&self, obj: &BaseObj) -> u32 {
        match obj {
            BaseObj::Global { name } => {
                self.module.global(name).map(|g| g.line).unwrap_or(u32::MAX)
            }
            BaseObj::Alloca { func, value } => self
                .funcs
                .get(func.as_str())
                .and_then(|c| c.defs.get(value.as_str()))
                .map(|d| d.inst.line)
                .unwrap_or(u32::MAX),
        }
    }

    /// Whether any store in the module may reach the object at the call on
    /// `call_line`: an explicit store through a may-aliasing pointer, the
    /// object's address escaping into another call, or a global initializer.
    /// The classified call itself does not count — passing the address there
    /// is exactly what is being classified. Uncertainty counts as stored, so
    /// the write-only inference only ever adds copying.
    fn may_be_stored(&self, obj: &BaseObj, call_line: u32) -> bool {
        if let BaseObj::Global { name } = obj {
            if self
                .module
                .global(name)
                .is_some_and(|g| g.init.is_some() || !g.constant)
            {
                // Globals are zero-initialized: their value is specified at
                // call time even without an explicit store.
                return true;
            }
        }
        let hits = |r: &WalkResult| r.unknown || r.bases.iter().any(|b| &b.obj == obj);
        let mut stored = false;
        for f in &self.module.funcs {
            visit_insts(&f.body, &mut |inst| {
                if stored || inst.line == call_line {
                    return;
                }
                match &inst.kind {
                    InstKind::Store { addr, value, .. } => {
                        if hits(&self.walk(&f.name, addr, 1)) {
                            stored = true;
                        } else if hits(&self.walk(&f.name, value, 1)) {
                            // The object's address escapes into memory.
                            stored = true;
                        }
                    }
                    InstKind::CallLocal { args, .. } => {
                        if args.iter().any(|a| hits(&self.walk(&f.name, a, 1))) {
                            stored = true;
                        }
                    }
                    InstKind::CallExt { args, .. } => {
                        if args.iter().any(|a| hits(&self.walk(&f.name, &a.op, 1))) {
                            stored = true;
                        }
                    }
                    _ => {}
                }
            });
            if stored {
                break;
            }
        }
        stored
    }
}

/// Classifies what `value` in `func` may point at.
pub fn underlying_objects(module: &Module, func: &str, value: &Operand) -> UnderlyingObjects {
    let analyzer = Analyzer::new(module);
    finish_walk(&analyzer, analyzer.walk(func, value, 1))
}

fn finish_walk(analyzer: &Analyzer<'_>, result: WalkResult) -> UnderlyingObjects {
    if result.unknown || result.bases.is_empty() || result.bases.iter().any(|b| !b.exact) {
        return UnderlyingObjects::Unknown;
    }
    let mut pairs: Vec<(BaseObj, u64)> = result
        .bases
        .into_iter()
        .map(|b| (b.obj, b.offset))
        .collect();
    pairs.sort_by_key(|(obj, off)| (analyzer.def_order(obj), *off));
    pairs.dedup();
    if pairs.len() == 1 {
        let (base, offset) = pairs.pop().unwrap();
        UnderlyingObjects::Unique { base, offset }
    } else {
        UnderlyingObjects::Candidates(pairs)
    }
}

fn classify_with(
    analyzer: &Analyzer<'_>,
    func: &str,
    call_line: u32,
    arg: &CallArg,
    registry_mode: AccessMode,
) -> Classification {
    let uo = finish_walk(analyzer, analyzer.walk(func, &arg.op, 1));
    let candidate = |obj: BaseObj, offset: u64| -> Option<StaticCandidate> {
        let size = analyzer.object_size(&obj)?;
        let constant = matches!(&obj, BaseObj::Global { name }
            if analyzer.module.global(name).is_some_and(|g| g.constant));
        let mode = if constant {
            AccessMode::Read
        } else if registry_mode != AccessMode::Read
            && matches!(obj, BaseObj::Alloca { .. })
            && !analyzer.may_be_stored(&obj, call_line)
        {
            // No store reaches the call: the object's device value is
            // unspecified and only the copy-back matters.
            AccessMode::Write
        } else {
            registry_mode
        };
        Some(StaticCandidate { object: obj, offset, size, mode })
    };
    match uo {
        UnderlyingObjects::Unique { base, offset } => match candidate(base, offset) {
            Some(c) => Classification::StaticRef(c),
            None => Classification::DynamicLookup { mode: registry_mode },
        },
        UnderlyingObjects::Candidates(pairs) => {
            let cands: Option<Vec<StaticCandidate>> = pairs
                .into_iter()
                .map(|(obj, off)| candidate(obj, off))
                .collect();
            match cands {
                Some(cands) if cands.len() >= 2 => Classification::Dispatch { candidates: cands },
                Some(mut cands) => Classification::StaticRef(cands.pop().unwrap()),
                None => Classification::DynamicLookup { mode: registry_mode },
            }
        }
        UnderlyingObjects::Unknown => Classification::DynamicLookup { mode: registry_mode },
    }
}

fn classify_call_arg(
    analyzer: &Analyzer<'_>,
    func: &str,
    call_line: u32,
    callee_params: &[ParamEffect],
    args: &[CallArg],
    index: usize,
) -> Classification {
    let arg = &args[index];
    if index < callee_params.len() {
        match callee_params[index] {
            // Opaque host handles are assumed to already point to host
            // memory; they travel as plain bytes.
            ParamEffect::Opaque | ParamEffect::Value => Classification::Value,
            ParamEffect::Access(mode) => classify_with(analyzer, func, call_line, arg, mode),
        }
    } else {
        match arg.code {
            Some(code) if code.pointer => {
                // The read/write behavior of unannotated variadic pointers
                // is unknown; copy both ways.
                classify_with(analyzer, func, call_line, arg, AccessMode::ReadWrite)
            }
            _ => Classification::Value,
        }
    }
}

/// Classifies a single argument of the `call_index`-th external call in
/// `func` (pure; see [`lower_module`] for whole-module lowering).
pub fn classify_arg(
    module: &Module,
    func: &str,
    call_index: usize,
    arg_index: usize,
) -> Option<Classification> {
    let analyzer = Analyzer::new(module);
    let (callee, args, call_line) = find_call(module, func, call_index)?;
    let decl = module.extern_decl(callee)?;
    (arg_index < args.len())
        .then(|| classify_call_arg(&analyzer, func, call_line, &decl.params, args, arg_index))
}

fn find_call<'m>(
    module: &'m Module,
    func: &str,
    call_index: usize,
) -> Option<(&'m str, &'m [CallArg], u32)> {
    let f = module.func(func)?;
    let mut found = None;
    let mut seen = 0usize;
    visit_insts(&f.body, &mut |inst| {
        if let InstKind::CallExt { callee, args } = &inst.kind {
            if seen == call_index && found.is_none() {
                found = Some((callee.as_str(), args.as_slice(), inst.line));
            }
            seen += 1;
        }
    });
    found
}

/// Lowers every external call site in the module. Landing-pad ids are
/// assigned densely from 1 in source order; id 0 is reserved for the kernel
/// launch. Call sites sharing a (callee, variadic type) combination share a
/// pad and id.
pub fn lower_module(module: &Module) -> ModulePlans {
    let analyzer = Analyzer::new(module);
    let mut plans = ModulePlans::default();
    let mut next_id = 1u32;
    for f in &module.funcs {
        let mut call_index = 0usize;
        visit_insts(&f.body, &mut |inst| {
            let InstKind::CallExt { callee, args } = &inst.kind else {
                return;
            };
            let decl = module
                .extern_decl(callee)
                .expect("validated module has all callees");
            let classifications: Vec<Classification> = (0..args.len())
                .map(|i| classify_call_arg(&analyzer, &f.name, inst.line, &decl.params, args, i))
                .collect();
            let variadic_codes: Vec<TypeCode> = args[decl.params.len()..]
                .iter()
                .map(|a| a.code.unwrap_or(TypeCode::value(crate::rpc::ScalarCode::I64)))
                .collect();
            let landing_pad = decl
                .pad_override
                .clone()
                .unwrap_or_else(|| mangle(callee, &variadic_codes));
            let callee_id = *plans.pad_ids.entry(landing_pad.clone()).or_insert_with(|| {
                let id = next_id;
                next_id += 1;
                id
            });
            plans.plans.push(LoweringPlan {
                func: f.name.clone(),
                call_index,
                callee: callee.clone(),
                callee_id,
                landing_pad,
                args: classifications,
                line: inst.line,
            });
            call_index += 1;
        });
    }
    plans
}

/// Resolves plan objects to their runtime addresses: globals to their placed
/// bases, allocas to the current frame's slots.
pub trait ObjectResolver {
    fn object_base(&self, obj: &BaseObj) -> Option<SimAddress>;
}

/// Executes a lowering plan against runtime argument values, populating the
/// request builder. `Dispatch` arguments are resolved by pointer-equality
/// comparison in plan order; `DynamicLookup` arguments fall back to values
/// when the registry finds no object.
pub fn build_request(
    plan: &LoweringPlan,
    arg_values: &[u64],
    resolver: &dyn ObjectResolver,
    registry: &DeviceRegistry,
    builder: &mut RequestBuilder,
) -> Result<(), RpcError> {
    assert_eq!(
        arg_values.len(),
        plan.args.len(),
        "argument count must match the plan"
    );
    builder.set_callee(plan.callee_id);
    for (index, (classification, &bits)) in plan.args.iter().zip(arg_values).enumerate() {
        match classification {
            Classification::Value => builder.add_value_arg(bits),
            Classification::StaticRef(c) => {
                let addr = SimAddress::decode(bits).ok_or(RpcError::InvalidDescriptor {
                    index,
                    reason: "static reference argument does not hold an address",
                })?;
                builder.add_ref_arg(addr, c.mode, c.size, c.offset)?;
            }
            Classification::Dispatch { candidates } => {
                let mut matched = false;
                for c in candidates {
                    let Some(base) = resolver.object_base(&c.object) else {
                        continue;
                    };
                    let addr = base.add(c.offset);
                    if addr.encode() == bits {
                        builder.add_ref_arg(addr, c.mode, c.size, c.offset)?;
                        matched = true;
                        break;
                    }
                }
                if !matched {
                    return Err(RpcError::DispatchExhausted { index });
                }
            }
            Classification::DynamicLookup { mode } => {
                let hit = SimAddress::decode(bits).and_then(|a| registry.find_object(a));
                match hit {
                    Some(info) => {
                        let addr = SimAddress::decode(bits).unwrap();
                        builder.add_ref_arg(addr, *mode, info.size, info.offset)?;
                    }
                    // No underlying object: assume it is not accessed or
                    // already points to host memory.
                    None => builder.add_value_arg(bits),
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir;

    fn module(text: &str) -> Module {
        ir::parse(text).unwrap()
    }

    #[test]
    fn fieldaddr_is_unique() {
        let m = module(
            "extern callee(sink, params=[readwrite])\n\
             func main() {\n  s = alloca 12\n  f = fieldaddr s + 8\n  call ext sink(f)\n}\n",
        );
        let uo = underlying_objects(&m, "main", &Operand::Value("f".into()));
        assert_eq!(
            uo,
            UnderlyingObjects::Unique {
                base: BaseObj::Alloca { func: "main".into(), value: "s".into() },
                offset: 8
            }
        );
    }

    #[test]
    fn select_yields_candidates_in_definition_order() {
        let m = module(
            "extern callee(sink, params=[readwrite])\n\
             func main() {\n  i = alloca 4\n  s = alloca 12\n  b = fieldaddr s + 4\n  c = load i, 4\n  sel = select c, i, b\n  call ext sink(sel)\n}\n",
        );
        let uo = underlying_objects(&m, "main", &Operand::Value("sel".into()));
        let i = BaseObj::Alloca { func: "main".into(), value: "i".into() };
        let s = BaseObj::Alloca { func: "main".into(), value: "s".into() };
        assert_eq!(uo, UnderlyingObjects::Candidates(vec![(i, 0), (s, 4)]));
    }

    #[test]
    fn heapalloc_in_loop_is_unknown() {
        let m = module(
            "extern callee(sink, params=[readwrite])\n\
             func main() {\n  loop 3 {\n    p = heapalloc 16\n    call ext sink(p)\n  }\n}\n",
        );
        let uo = underlying_objects(&m, "main", &Operand::Value("p".into()));
        assert_eq!(uo, UnderlyingObjects::Unknown);
    }

    #[test]
    fn alloca_in_loop_is_unknown() {
        let m = module(
            "extern callee(sink, params=[readwrite])\n\
             func main() {\n  loop 2 {\n    x = alloca 8\n    call ext sink(x)\n  }\n}\n",
        );
        assert_eq!(
            underlying_objects(&m, "main", &Operand::Value("x".into())),
            UnderlyingObjects::Unknown
        );
    }

    #[test]
    fn recursive_allocas_degrade() {
        let m = module(
            "extern callee(sink, params=[readwrite])\n\
             func f(p) {\n  x = alloca 8\n  call local f(x)\n  call ext sink(x)\n}\n",
        );
        assert_eq!(
            underlying_objects(&m, "f", &Operand::Value("x".into())),
            UnderlyingObjects::Unknown
        );
        assert_eq!(
            underlying_objects(&m, "f", &Operand::Value("p".into())),
            UnderlyingObjects::Unknown
        );
    }

    #[test]
    fn param_summary_depth_one() {
        // g's parameter resolves through its only caller to a global.
        let m = module(
            "global @g size=16\n\
             extern callee(sink, params=[readwrite])\n\
             func callee_fn(p) {\n  q = fieldaddr p + 4\n  call ext sink(q)\n}\n\
             func main() {\n  call local callee_fn(@g)\n}\n",
        );
        let uo = underlying_objects(&m, "callee_fn", &Operand::Value("q".into()));
        assert_eq!(
            uo,
            UnderlyingObjects::Unique { base: BaseObj::Global { name: "g".into() }, offset: 4 }
        );
    }

    #[test]
    fn caller_alloca_via_param_degrades_to_dynamic() {
        let m = module(
            "extern callee(sink, params=[readwrite])\n\
             func callee_fn(p) {\n  call ext sink(p)\n}\n\
             func main() {\n  s = alloca 16\n  call local callee_fn(s)\n}\n",
        );
        assert_eq!(
            underlying_objects(&m, "callee_fn", &Operand::Value("p".into())),
            UnderlyingObjects::Unknown
        );
        let c = classify_arg(&m, "callee_fn", 0, 0).unwrap();
        assert_eq!(c, Classification::DynamicLookup { mode: AccessMode::ReadWrite });
    }

    #[test]
    fn opaque_params_are_values() {
        let m = module(
            "extern callee(fprintf, params=[opaque read], variadic)\n\
             func main() {\n  h = alloca 8\n  v = load h, 8\n  s = alloca 4\n  call ext fprintf(v, s, s:ip)\n}\n",
        );
        assert_eq!(classify_arg(&m, "main", 0, 0).unwrap(), Classification::Value);
    }

    #[test]
    fn constant_global_overrides_to_read() {
        let m = module(
            "global @fmt size=8 const init=\"%d\\0\"\n\
             extern callee(f, params=[readwrite])\n\
             func main() {\n  call ext f(@fmt)\n}\n",
        );
        match classify_arg(&m, "main", 0, 0).unwrap() {
            Classification::StaticRef(c) => {
                assert_eq!(c.mode, AccessMode::Read);
                assert_eq!(c.size, 8);
            }
            other => panic!("expected static ref, got {other}"),
        }
    }

    #[test]
    fn unstored_alloca_becomes_write_only() {
        let m = module(
            "extern callee(f, params=[readwrite])\n\
             func main() {\n  i = alloca 4\n  call ext f(i)\n}\n",
        );
        match classify_arg(&m, "main", 0, 0).unwrap() {
            Classification::StaticRef(c) => assert_eq!(c.mode, AccessMode::Write),
            other => panic!("expected static ref, got {other}"),
        }
        // A store through a derived pointer disables the inference.
        let m = module(
            "extern callee(f, params=[readwrite])\n\
             func main() {\n  i = alloca 4\n  store i, #1, 4\n  call ext f(i)\n}\n",
        );
        match classify_arg(&m, "main", 0, 0).unwrap() {
            Classification::StaticRef(c) => assert_eq!(c.mode, AccessMode::ReadWrite),
            other => panic!("expected static ref, got {other}"),
        }
    }

    #[test]
    fn distinct_variadic_types_get_distinct_pads() {
        let m = module(
            "extern callee(fscanf, params=[opaque read], variadic)\n\
             func main() {\n  a = alloca 4\n  b = alloca 4\n  f = alloca 8\n  call ext fscanf(#1, a, b:ip)\n  call ext fscanf(#1, a, f:fp)\n  call ext fscanf(#1, a, b:ip)\n}\n",
        );
        let plans = lower_module(&m);
        assert_eq!(plans.plans.len(), 3);
        assert_eq!(plans.plans[0].landing_pad, "__fscanf_ip");
        assert_eq!(plans.plans[1].landing_pad, "__fscanf_fp");
        assert_eq!(plans.plans[0].callee_id, 1);
        assert_eq!(plans.plans[1].callee_id, 2);
        assert_eq!(plans.plans[2].callee_id, 1, "same combination shares the pad");
    }

    #[test]
    fn zero_pointer_args_all_value() {
        let m = module(
            "extern callee(noop, params=[val val], variadic)\n\
             func main() {\n  x = alloca 4\n  v = load x, 4\n  call ext noop(v, #2, #3:i)\n}\n",
        );
        let plans = lower_module(&m);
        let plan = &plans.plans[0];
        assert_eq!(plan.landing_pad, "__noop_i");
        assert!(plan.args.iter().all(|c| matches!(c, Classification::Value)));
    }

    #[test]
    fn lowering_is_deterministic() {
        let text = "global @g size=8\nextern callee(f, params=[readwrite], variadic)\n\
             func main() {\n  s = alloca 12\n  call ext f(@g, s:ip)\n}\n";
        let m = module(text);
        let a = lower_module(&m);
        let b = lower_module(&m);
        assert_eq!(a.plans, b.plans);
    }
}
