//! A tiny SSA-like intermediate representation for simulated programs.
//!
//! The textual form is line oriented:
//!
//! ```text
//! # comment
//! global @name size=N [const] [init="bytes"]
//! extern callee(name, params=[opaque|val|read|write|readwrite ...], variadic[, pad="__name"])
//! func name(p1, p2) {
//!   v1 = alloca N
//!   v2 = fieldaddr v1 + K
//!   v3 = select vc, va, vb
//!   v4 = heapalloc N
//!   v5 = load v1, N
//!   store v1, v5, N
//!   [v6 =] call ext name(v1:ip, #3:i, @g)
//!   [v7 =] call local name(v1, v2)
//!   loop N {
//!     ...
//!   }
//!   return [v]
//! }
//! ```
//!
//! Operands are value names, `@global` addresses, or `#imm` literals. Call
//! arguments may carry a `:code` type annotation (see the mangling table);
//! variadic arguments without one are treated as plain 64-bit values. The
//! optional `pad="..."` attribute on an extern pins the host landing-pad
//! name for callees whose wrapper was registered under a historical name.
//!
//! Values are defined once per function and must be defined textually before
//! use; `fieldaddr` offsets and `loop` trip counts are compile-time
//! constants.

use thiserror::Error;

use crate::rpc::{ParamEffect, TypeCode};

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum IrError {
    #[error("{line}:{col}: {msg}")]
    Syntax { line: u32, col: u32, msg: String },
    #[error("line {line}: {msg}")]
    Resolve { line: u32, msg: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Module {
    pub globals: Vec<GlobalDef>,
    pub externs: Vec<ExternDecl>,
    pub funcs: Vec<FuncDef>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDef {
    pub name: String,
    pub size: u64,
    pub constant: bool,
    pub init: Option<Vec<u8>>,
    pub line: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExternDecl {
    pub name: String,
    pub params: Vec<ParamEffect>,
    pub variadic: bool,
    pub pad_override: Option<String>,
    pub line: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuncDef {
    pub name: String,
    pub params: Vec<String>,
    pub body: Vec<Inst>,
    pub line: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Operand {
    Value(String),
    Global(String),
    Imm(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CallArg {
    pub op: Operand,
    pub code: Option<TypeCode>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inst {
    pub dst: Option<String>,
    pub kind: InstKind,
    pub line: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum InstKind {
    Alloca { size: u64 },
    FieldAddr { base: Operand, offset: u64 },
    Select { cond: Operand, a: Operand, b: Operand },
    HeapAlloc { size: u64 },
    Load { addr: Operand, width: u8 },
    Store { addr: Operand, value: Operand, width: u8 },
    CallExt { callee: String, args: Vec<CallArg> },
    CallLocal { callee: String, args: Vec<Operand> },
    Loop { trip: u64, body: Vec<Inst> },
    Return { value: Option<Operand> },
}

impl Module {
    pub fn global(&self, name: &str) -> Option<&GlobalDef> {
        self.globals.iter().find(|g| g.name == name)
    }

    pub fn extern_decl(&self, name: &str) -> Option<&ExternDecl> {
        self.externs.iter().find(|e| e.name == name)
    }

    pub fn func(&self, name: &str) -> Option<&FuncDef> {
        self.funcs.iter().find(|f| f.name == name)
    }
}

struct Cursor<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
    line: u32,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str, line: u32) -> Cursor<'a> {
        Cursor { text, bytes: text.as_bytes(), pos: 0, line }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, IrError> {
        Err(IrError::Syntax {
            line: self.line,
            col: self.pos as u32 + 1,
            msg: msg.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && (self.bytes[self.pos] as char).is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.text[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), IrError> {
        if self.eat(c) {
            Ok(())
        } else {
            self.err(format!("expected `{c}`"))
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos >= self.bytes.len() || self.bytes[self.pos] == b'#'
    }

    fn expect_end(&mut self) -> Result<(), IrError> {
        if self.at_end() {
            Ok(())
        } else {
            self.err("trailing characters")
        }
    }

    fn ident(&mut self) -> Result<String, IrError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos] as char;
            if c.is_ascii_alphanumeric() || c == '_' || c == '.' {
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return self.err("expected identifier");
        }
        Ok(self.text[start..self.pos].to_string())
    }

    fn keyword(&mut self, kw: &str) -> bool {
        self.skip_ws();
        let rest = &self.text[self.pos..];
        if rest.starts_with(kw) {
            let after = rest[kw.len()..].chars().next();
            if after.map_or(true, |c| !c.is_ascii_alphanumeric() && c != '_') {
                self.pos += kw.len();
                return true;
            }
        }
        false
    }

    fn number(&mut self) -> Result<u64, IrError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return self.err("expected number");
        }
        self.text[start..self.pos]
            .parse()
            .or_else(|_| self.err("number out of range"))
    }

    fn string_lit(&mut self) -> Result<Vec<u8>, IrError> {
        self.expect('"')?;
        let mut out = Vec::new();
        loop {
            let Some(c) = self.text[self.pos..].chars().next() else {
                return self.err("unterminated string");
            };
            self.pos += c.len_utf8();
            match c {
                '"' => return Ok(out),
                '\\' => {
                    let Some(esc) = self.text[self.pos..].chars().next() else {
                        return self.err("unterminated escape");
                    };
                    self.pos += esc.len_utf8();
                    match esc {
                        '0' => out.push(0),
                        'n' => out.push(b'\n'),
                        't' => out.push(b'\t'),
                        '\\' => out.push(b'\\'),
                        '"' => out.push(b'"'),
                        'x' => {
                            let hex = self.text.get(self.pos..self.pos + 2);
                            let byte = hex.and_then(|h| u8::from_str_radix(h, 16).ok());
                            match byte {
                                Some(b) => {
                                    out.push(b);
                                    self.pos += 2;
                                }
                                None => return self.err("invalid \\x escape"),
                            }
                        }
                        other => return self.err(format!("unknown escape `\\{other}`")),
                    }
                }
                other => {
                    let mut buf = [0u8; 4];
                    out.extend_from_slice(other.encode_utf8(&mut buf).as_bytes());
                }
            }
        }
    }

    fn operand(&mut self) -> Result<Operand, IrError> {
        if self.eat('@') {
            Ok(Operand::Global(self.ident()?))
        } else if self.eat('#') {
            Ok(Operand::Imm(self.number()?))
        } else {
            Ok(Operand::Value(self.ident()?))
        }
    }
}

/// Parses the textual form into a validated module.
pub fn parse(text: &str) -> Result<Module, IrError> {
    let mut module = Module { globals: Vec::new(), externs: Vec::new(), funcs: Vec::new() };
    let mut lines = text.lines().enumerate().peekable();

    while let Some((idx, raw)) = lines.next() {
        let line_no = idx as u32 + 1;
        let mut c = Cursor::new(raw, line_no);
        if c.at_end() {
            continue;
        }
        if c.keyword("global") {
            module.globals.push(parse_global(&mut c)?);
        } else if c.keyword("extern") {
            module.externs.push(parse_extern(&mut c)?);
        } else if c.keyword("func") {
            let name = c.ident()?;
            c.expect('(')?;
            let mut params = Vec::new();
            if !c.eat(')') {
                loop {
                    params.push(c.ident()?);
                    if c.eat(')') {
                        break;
                    }
                    c.expect(',')?;
                }
            }
            c.expect('{')?;
            c.expect_end()?;
            let body = parse_body(&mut lines)?;
            module.funcs.push(FuncDef { name, params, body, line: line_no });
        } else {
            return c.err("expected `global`, `extern`, or `func`");
        }
    }
    validate(&module)?;
    Ok(module)
}

fn parse_global(c: &mut Cursor<'_>) -> Result<GlobalDef, IrError> {
    c.expect('@')?;
    let name = c.ident()?;
    let mut size = None;
    let mut constant = false;
    let mut init = None;
    while !c.at_end() {
        if c.keyword("size") {
            c.expect('=')?;
            size = Some(c.number()?);
        } else if c.keyword("const") {
            constant = true;
        } else if c.keyword("init") {
            c.expect('=')?;
            init = Some(c.string_lit()?);
        } else {
            return c.err("expected `size=`, `const`, or `init=`");
        }
    }
    let Some(size) = size else {
        return c.err("global needs a size");
    };
    Ok(GlobalDef { name, size, constant, init, line: c.line })
}

fn parse_extern(c: &mut Cursor<'_>) -> Result<ExternDecl, IrError> {
    if !c.keyword("callee") {
        return c.err("expected `callee(`");
    }
    c.expect('(')?;
    let name = c.ident()?;
    c.expect(',')?;
    if !c.keyword("params") {
        return c.err("expected `params=[...]`");
    }
    c.expect('=')?;
    c.expect('[')?;
    let mut params = Vec::new();
    while !c.eat(']') {
        if c.keyword("opaque") {
            params.push(ParamEffect::Opaque);
        } else if c.keyword("val") {
            params.push(ParamEffect::Value);
        } else if c.keyword("readwrite") {
            params.push(ParamEffect::Access(crate::rpc::AccessMode::ReadWrite));
        } else if c.keyword("read") {
            params.push(ParamEffect::Access(crate::rpc::AccessMode::Read));
        } else if c.keyword("write") {
            params.push(ParamEffect::Access(crate::rpc::AccessMode::Write));
        } else {
            return c.err("expected a param effect");
        }
    }
    let mut variadic = false;
    let mut pad_override = None;
    while c.eat(',') {
        if c.keyword("variadic") {
            variadic = true;
        } else if c.keyword("pad") {
            c.expect('=')?;
            let bytes = c.string_lit()?;
            pad_override = Some(String::from_utf8_lossy(&bytes).into_owned());
        } else {
            return c.err("expected `variadic` or `pad=`");
        }
    }
    c.expect(')')?;
    c.expect_end()?;
    Ok(ExternDecl { name, params, variadic, pad_override, line: c.line })
}

type Lines<'a> = std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>;

fn parse_body(lines: &mut Lines<'_>) -> Result<Vec<Inst>, IrError> {
    let mut body = Vec::new();
    loop {
        let Some((idx, raw)) = lines.next() else {
            return Err(IrError::Syntax {
                line: 0,
                col: 0,
                msg: "unexpected end of input inside a body".into(),
            });
        };
        let line_no = idx as u32 + 1;
        let mut c = Cursor::new(raw, line_no);
        if c.at_end() {
            continue;
        }
        if c.eat('}') {
            c.expect_end()?;
            return Ok(body);
        }
        if c.keyword("loop") {
            let trip = c.number()?;
            c.expect('{')?;
            c.expect_end()?;
            let inner = parse_body(lines)?;
            body.push(Inst { dst: None, kind: InstKind::Loop { trip, body: inner }, line: line_no });
            continue;
        }
        if c.keyword("return") {
            let value = if c.at_end() { None } else { Some(c.operand()?) };
            c.expect_end()?;
            body.push(Inst { dst: None, kind: InstKind::Return { value }, line: line_no });
            continue;
        }
        if c.keyword("store") {
            let addr = c.operand()?;
            c.expect(',')?;
            let value = c.operand()?;
            c.expect(',')?;
            let width = parse_width(&mut c)?;
            c.expect_end()?;
            body.push(Inst {
                dst: None,
                kind: InstKind::Store { addr, value, width },
                line: line_no,
            });
            continue;
        }
        if c.keyword("call") {
            let kind = parse_call(&mut c)?;
            c.expect_end()?;
            body.push(Inst { dst: None, kind, line: line_no });
            continue;
        }

        // Everything else is `dst = <producer>`.
        let dst = c.ident()?;
        c.expect('=')?;
        let kind = if c.keyword("alloca") {
            InstKind::Alloca { size: c.number()? }
        } else if c.keyword("fieldaddr") {
            let base = c.operand()?;
            c.expect('+')?;
            InstKind::FieldAddr { base, offset: c.number()? }
        } else if c.keyword("select") {
            let cond = c.operand()?;
            c.expect(',')?;
            let a = c.operand()?;
            c.expect(',')?;
            let b = c.operand()?;
            InstKind::Select { cond, a, b }
        } else if c.keyword("heapalloc") {
            InstKind::HeapAlloc { size: c.number()? }
        } else if c.keyword("load") {
            let addr = c.operand()?;
            c.expect(',')?;
            InstKind::Load { addr, width: parse_width(&mut c)? }
        } else if c.keyword("call") {
            parse_call(&mut c)?
        } else {
            return c.err("expected an instruction");
        };
        c.expect_end()?;
        body.push(Inst { dst: Some(dst), kind, line: line_no });
    }
}

fn parse_width(c: &mut Cursor<'_>) -> Result<u8, IrError> {
    let n = c.number()?;
    match n {
        1 | 2 | 4 | 8 => Ok(n as u8),
        _ => c.err("width must be 1, 2, 4, or 8"),
    }
}

fn parse_call(c: &mut Cursor<'_>) -> Result<InstKind, IrError> {
    if c.keyword("ext") {
        let callee = c.ident()?;
        c.expect('(')?;
        let mut args = Vec::new();
        if !c.eat(')') {
            loop {
                let op = c.operand()?;
                let code = if c.eat(':') {
                    let code = c.ident()?;
                    Some(TypeCode::parse(&code).map_err(|e| IrError::Syntax {
                        line: c.line,
                        col: c.pos as u32,
                        msg: e.to_string(),
                    })?)
                } else {
                    None
                };
                args.push(CallArg { op, code });
                if c.eat(')') {
                    break;
                }
                c.expect(',')?;
            }
        }
        Ok(InstKind::CallExt { callee, args })
    } else if c.keyword("local") {
        let callee = c.ident()?;
        c.expect('(')?;
        let mut args = Vec::new();
        if !c.eat(')') {
            loop {
                args.push(c.operand()?);
                if c.eat(')') {
                    break;
                }
                c.expect(',')?;
            }
        }
        Ok(InstKind::CallLocal { callee, args })
    } else {
        c.err("expected `ext` or `local`")
    }
}

fn validate(module: &Module) -> Result<(), IrError> {
    let mut names = std::collections::HashSet::new();
    for g in &module.globals {
        if !names.insert(format!("@{}", g.name)) {
            return Err(IrError::Resolve {
                line: g.line,
                msg: format!("duplicate global `@{}`", g.name),
            });
        }
        if g.init.as_ref().is_some_and(|i| i.len() as u64 > g.size) {
            return Err(IrError::Resolve {
                line: g.line,
                msg: format!("initializer of `@{}` exceeds its size", g.name),
            });
        }
    }
    for e in &module.externs {
        if !names.insert(format!("ext {}", e.name)) {
            return Err(IrError::Resolve {
                line: e.line,
                msg: format!("duplicate extern `{}`", e.name),
            });
        }
    }
    for f in &module.funcs {
        if !names.insert(format!("fn {}", f.name)) {
            return Err(IrError::Resolve {
                line: f.line,
                msg: format!("duplicate function `{}`", f.name),
            });
        }
    }

    for f in &module.funcs {
        let mut defined: std::collections::HashSet<&str> =
            f.params.iter().map(|s| s.as_str()).collect();
        if defined.len() != f.params.len() {
            return Err(IrError::Resolve {
                line: f.line,
                msg: "duplicate parameter name".into(),
            });
        }
        validate_body(module, f, &f.body, &mut defined)?;
    }
    Ok(())
}

fn validate_body<'m>(
    module: &'m Module,
    f: &'m FuncDef,
    body: &'m [Inst],
    defined: &mut std::collections::HashSet<&'m str>,
) -> Result<(), IrError> {
    let check_op = |op: &Operand, defined: &std::collections::HashSet<&str>, line: u32| {
        match op {
            Operand::Value(v) if !defined.contains(v.as_str()) => Err(IrError::Resolve {
                line,
                msg: format!("use of undefined value `{v}`"),
            }),
            Operand::Global(g) if module.global(g).is_none() => Err(IrError::Resolve {
                line,
                msg: format!("reference to undeclared global `@{g}`"),
            }),
            _ => Ok(()),
        }
    };

    for inst in body {
        match &inst.kind {
            InstKind::Alloca { .. } | InstKind::HeapAlloc { .. } => {}
            InstKind::FieldAddr { base, .. } => check_op(base, defined, inst.line)?,
            InstKind::Select { cond, a, b } => {
                check_op(cond, defined, inst.line)?;
                check_op(a, defined, inst.line)?;
                check_op(b, defined, inst.line)?;
            }
            InstKind::Load { addr, .. } => check_op(addr, defined, inst.line)?,
            InstKind::Store { addr, value, .. } => {
                check_op(addr, defined, inst.line)?;
                check_op(value, defined, inst.line)?;
            }
            InstKind::CallExt { callee, args } => {
                let Some(decl) = module.extern_decl(callee) else {
                    return Err(IrError::Resolve {
                        line: inst.line,
                        msg: format!("call to undeclared callee `{callee}`"),
                    });
                };
                let fixed = decl.params.len();
                if args.len() < fixed || (!decl.variadic && args.len() != fixed) {
                    return Err(IrError::Resolve {
                        line: inst.line,
                        msg: format!(
                            "`{callee}` takes {fixed}{} arguments, got {}",
                            if decl.variadic { "+" } else { "" },
                            args.len()
                        ),
                    });
                }
                for a in args {
                    check_op(&a.op, defined, inst.line)?;
                }
            }
            InstKind::CallLocal { callee, args } => {
                let Some(callee_fn) = module.func(callee) else {
                    return Err(IrError::Resolve {
                        line: inst.line,
                        msg: format!("call to undefined function `{callee}`"),
                    });
                };
                if args.len() != callee_fn.params.len() {
                    return Err(IrError::Resolve {
                        line: inst.line,
                        msg: format!(
                            "`{callee}` takes {} arguments, got {}",
                            callee_fn.params.len(),
                            args.len()
                        ),
                    });
                }
                for a in args {
                    check_op(a, defined, inst.line)?;
                }
            }
            InstKind::Loop { body, .. } => {
                validate_body(module, f, body, defined)?;
                continue;
            }
            InstKind::Return { value } => {
                if let Some(v) = value {
                    check_op(v, defined, inst.line)?;
                }
            }
        }
        if let Some(dst) = &inst.dst {
            if !defined.insert(dst.as_str()) {
                return Err(IrError::Resolve {
                    line: inst.line,
                    msg: format!("value `{dst}` defined twice"),
                });
            }
        }
    }
    Ok(())
}

/// Prints the canonical textual form; `parse(print(m))` is a fixpoint.
pub fn print(module: &Module) -> String {
    let mut out = String::new();
    for g in &module.globals {
        out.push_str(&format!("global @{} size={}", g.name, g.size));
        if g.constant {
            out.push_str(" const");
        }
        if let Some(init) = &g.init {
            out.push_str(" init=\"");
            for &b in init {
                match b {
                    b'"' => out.push_str("\\\""),
                    b'\\' => out.push_str("\\\\"),
                    b'\n' => out.push_str("\\n"),
                    b'\t' => out.push_str("\\t"),
                    0x20..=0x7e => out.push(b as char),
                    0 => out.push_str("\\0"),
                    _ => out.push_str(&format!("\\x{b:02x}")),
                }
            }
            out.push('"');
        }
        out.push('\n');
    }
    for e in &module.externs {
        out.push_str(&format!("extern callee({}, params=[", e.name));
        for (i, p) in e.params.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(match p {
                ParamEffect::Opaque => "opaque",
                ParamEffect::Value => "val",
                ParamEffect::Access(crate::rpc::AccessMode::Read) => "read",
                ParamEffect::Access(crate::rpc::AccessMode::Write) => "write",
                ParamEffect::Access(crate::rpc::AccessMode::ReadWrite) => "readwrite",
            });
        }
        out.push(']');
        if e.variadic {
            out.push_str(", variadic");
        }
        if let Some(pad) = &e.pad_override {
            out.push_str(&format!(", pad=\"{pad}\""));
        }
        out.push_str(")\n");
    }
    for f in &module.funcs {
        out.push_str(&format!("func {}({}) {{\n", f.name, f.params.join(", ")));
        print_body(&mut out, &f.body, 1);
        out.push_str("}\n");
    }
    out
}

fn print_body(out: &mut String, body: &[Inst], depth: usize) {
    let indent = "  ".repeat(depth);
    for inst in body {
        out.push_str(&indent);
        if let Some(dst) = &inst.dst {
            out.push_str(&format!("{dst} = "));
        }
        match &inst.kind {
            InstKind::Alloca { size } => out.push_str(&format!("alloca {size}")),
            InstKind::FieldAddr { base, offset } => {
                out.push_str(&format!("fieldaddr {} + {offset}", fmt_op(base)))
            }
            InstKind::Select { cond, a, b } => out.push_str(&format!(
                "select {}, {}, {}",
                fmt_op(cond),
                fmt_op(a),
                fmt_op(b)
            )),
            InstKind::HeapAlloc { size } => out.push_str(&format!("heapalloc {size}")),
            InstKind::Load { addr, width } => {
                out.push_str(&format!("load {}, {width}", fmt_op(addr)))
            }
            InstKind::Store { addr, value, width } => out.push_str(&format!(
                "store {}, {}, {width}",
                fmt_op(addr),
                fmt_op(value)
            )),
            InstKind::CallExt { callee, args } => {
                let args: Vec<String> = args
                    .iter()
                    .map(|a| match &a.code {
                        Some(code) => format!("{}:{}", fmt_op(&a.op), code.code()),
                        None => fmt_op(&a.op),
                    })
                    .collect();
                out.push_str(&format!("call ext {callee}({})", args.join(", ")));
            }
            InstKind::CallLocal { callee, args } => {
                let args: Vec<String> = args.iter().map(fmt_op).collect();
                out.push_str(&format!("call local {callee}({})", args.join(", ")));
            }
            InstKind::Loop { trip, body } => {
                out.push_str(&format!("loop {trip} {{\n"));
                print_body(out, body, depth + 1);
                out.push_str(&indent);
                out.push('}');
            }
            InstKind::Return { value } => match value {
                Some(v) => out.push_str(&format!("return {}", fmt_op(v))),
                None => out.push_str("return"),
            },
        }
        out.push('\n');
    }
}

fn fmt_op(op: &Operand) -> String {
    match op {
        Operand::Value(v) => v.clone(),
        Operand::Global(g) => format!("@{g}"),
        Operand::Imm(n) => format!("#{n}"),
    }
}
