//! Bytecode programs and the assembly text format.
//!
//! ```text
//! # comment
//! .file demo.asm        # file name for following .line directives
//! .func main
//! .line 1
//!     PUSH 3
//! top:
//! .line 2
//!     CALL_NATIVE np.dot 0.25
//!     PUSH -1
//!     ADD
//!     JNZ top
//!     HALT
//! ```
//!
//! Jump operands are either opcode indices within the enclosing function or
//! labels declared with `name:`. `.entry NAME` selects the entry function
//! (default `main`).

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::sync::Arc;

use thiserror::Error;

use crate::units::Nanos;

pub type FuncId = usize;
pub type ThreadId = usize;

/// A source position: file name plus 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LineId {
    pub file: Arc<str>,
    pub line: u32,
}

impl LineId {
    pub fn new(file: impl Into<Arc<str>>, line: u32) -> Self {
        LineId { file: file.into(), line }
    }

    /// Bucket for records whose line is not part of the program.
    pub fn unknown() -> Self {
        LineId::new("(unknown)", 0)
    }
}

impl fmt::Display for LineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file, self.line)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Opcode {
    Push(i64),
    Pop,
    Add,
    Jmp(usize),
    /// Jumps when the top of stack is nonzero. The value is not popped.
    Jnz(usize),
    Call(FuncId),
    /// Runs outside the interpreter for `duration`; atomic with respect to
    /// notifications and thread switches.
    CallNative {
        name: String,
        duration: Nanos,
    },
    /// Allocates `bytes` and pushes the address. `native` marks an
    /// allocation issued by native code rather than by the interpreter.
    Alloc {
        bytes: u64,
        native: bool,
    },
    /// Pops an address and releases it.
    Free,
    Copy(u64),
    /// Starts a thread running the function and pushes its id.
    Spawn(FuncId),
    Join(ThreadId),
    Ret,
    Halt,
}

impl Opcode {
    pub fn name(&self) -> &'static str {
        match self {
            Opcode::Push(_) => "PUSH",
            Opcode::Pop => "POP",
            Opcode::Add => "ADD",
            Opcode::Jmp(_) => "JMP",
            Opcode::Jnz(_) => "JNZ",
            Opcode::Call(_) => "CALL",
            Opcode::CallNative { .. } => "CALL_NATIVE",
            Opcode::Alloc { .. } => "ALLOC",
            Opcode::Free => "FREE",
            Opcode::Copy(_) => "COPY",
            Opcode::Spawn(_) => "SPAWN",
            Opcode::Join(_) => "JOIN",
            Opcode::Ret => "RET",
            Opcode::Halt => "HALT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: Arc<str>,
    pub code: Vec<Opcode>,
    /// One entry per opcode.
    pub lines: Vec<LineId>,
}

impl Function {
    pub fn len(&self) -> usize {
        self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    functions: Vec<Function>,
    entry: FuncId,
}

/// One line of a disassembly listing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisasmRow {
    pub function: FuncId,
    pub index: usize,
    pub name: &'static str,
    pub operand: String,
    pub line: LineId,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{column}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("unknown opcode {0}")]
    UnknownOpcode(String),
    #[error("unknown directive {0}")]
    UnknownDirective(String),
    #[error("expected {0}")]
    Expected(&'static str),
    #[error("unexpected token {0}")]
    Trailing(String),
    #[error("opcode outside of a .func block")]
    OutsideFunction,
    #[error("opcode before any .line directive")]
    MissingLine,
    #[error("duplicate function {0}")]
    DuplicateFunction(String),
    #[error("duplicate label {0}")]
    DuplicateLabel(String),
    #[error("undefined function {0}")]
    UndefinedFunction(String),
    #[error("undefined label {0}")]
    UndefinedLabel(String),
    #[error("jump target {target} out of range for function of length {len}")]
    JumpOutOfRange { target: usize, len: usize },
    #[error("no entry function {0}")]
    MissingEntry(String),
}

impl Program {
    /// Builds a program from already-resolved functions, checking the same
    /// invariants the parser enforces.
    pub fn new(functions: Vec<Function>, entry: FuncId) -> Result<Self, ParseErrorKind> {
        let Some(_) = functions.get(entry) else {
            return Err(ParseErrorKind::MissingEntry(format!("#{entry}")));
        };
        for f in &functions {
            assert_eq!(f.code.len(), f.lines.len(), "line table length mismatch");
            for op in &f.code {
                match op {
                    Opcode::Jmp(t) | Opcode::Jnz(t) if *t >= f.len() => {
                        return Err(ParseErrorKind::JumpOutOfRange { target: *t, len: f.len() })
                    }
                    Opcode::Call(g) | Opcode::Spawn(g) if *g >= functions.len() => {
                        return Err(ParseErrorKind::UndefinedFunction(format!("#{g}")))
                    }
                    _ => {}
                }
            }
        }
        Ok(Program { functions, entry })
    }

    pub fn functions(&self) -> &[Function] {
        &self.functions
    }

    pub fn function(&self, id: FuncId) -> &Function {
        &self.functions[id]
    }

    pub fn function_id(&self, name: &str) -> Option<FuncId> {
        self.functions.iter().position(|f| &*f.name == name)
    }

    pub fn entry(&self) -> FuncId {
        self.entry
    }

    pub fn opcode_count(&self) -> usize {
        self.functions.iter().map(Function::len).sum()
    }

    pub fn line_of(&self, func: FuncId, index: usize) -> &LineId {
        &self.functions[func].lines[index]
    }

    /// Every distinct line that carries at least one opcode.
    pub fn lines(&self) -> std::collections::BTreeSet<LineId> {
        self.functions.iter().flat_map(|f| f.lines.iter().cloned()).collect()
    }

    pub fn disassemble(&self) -> Vec<DisasmRow> {
        let mut rows = Vec::with_capacity(self.opcode_count());
        for (fid, f) in self.functions.iter().enumerate() {
            for (index, op) in f.code.iter().enumerate() {
                rows.push(DisasmRow {
                    function: fid,
                    index,
                    name: op.name(),
                    operand: self.operand_text(op),
                    line: f.lines[index].clone(),
                });
            }
        }
        rows
    }

    fn operand_text(&self, op: &Opcode) -> String {
        match op {
            Opcode::Push(k) => k.to_string(),
            Opcode::Jmp(t) | Opcode::Jnz(t) => t.to_string(),
            Opcode::Call(f) | Opcode::Spawn(f) => self.functions[*f].name.to_string(),
            Opcode::CallNative { name, duration } => {
                format!("{name} {}", format_secs(*duration))
            }
            Opcode::Alloc { bytes, native: false } => bytes.to_string(),
            Opcode::Alloc { bytes, native: true } => format!("{bytes} native"),
            Opcode::Copy(n) => n.to_string(),
            Opcode::Join(t) => t.to_string(),
            Opcode::Pop | Opcode::Add | Opcode::Free | Opcode::Ret | Opcode::Halt => String::new(),
        }
    }

    /// Renders the program back to assembly text accepted by [`parse_program`].
    pub fn render(&self) -> String {
        let mut out = String::new();
        let rows = self.disassemble();
        let _ = writeln!(out, ".entry {}", self.functions[self.entry].name);
        let mut file: Option<Arc<str>> = None;
        let mut rows = rows.iter().peekable();
        for (fid, f) in self.functions.iter().enumerate() {
            let _ = writeln!(out, ".func {}", f.name);
            let mut line: Option<u32> = None;
            while let Some(row) = rows.next_if(|r| r.function == fid) {
                if file.as_deref() != Some(&*row.line.file) {
                    let _ = writeln!(out, ".file {}", row.line.file);
                    file = Some(row.line.file.clone());
                    line = None;
                }
                if line != Some(row.line.line) {
                    let _ = writeln!(out, ".line {}", row.line.line);
                    line = Some(row.line.line);
                }
                if row.operand.is_empty() {
                    let _ = writeln!(out, "    {}", row.name);
                } else {
                    let _ = writeln!(out, "    {} {}", row.name, row.operand);
                }
            }
        }
        out
    }
}

fn format_secs(d: Nanos) -> String {
    let ns = d.as_nanos();
    format!("{}.{:09}", ns / 1_000_000_000, ns % 1_000_000_000)
}

/// Parses assembly text; opcodes without a `.file` directive belong to
/// `default_file`.
pub fn parse_program_in(default_file: &str, source: &str) -> Result<Program, ParseError> {
    Parser::new(default_file).parse(source)
}

/// Parses assembly text with the default file name `main.asm`.
pub fn parse_program(source: &str) -> Result<Program, ParseError> {
    parse_program_in("main.asm", source)
}

#[derive(Debug)]
enum RawTarget {
    Index(usize),
    Label(String),
}

#[derive(Debug)]
enum RawOp {
    Ready(Opcode),
    Jump { conditional: bool, target: RawTarget },
    Call { spawn: bool, name: String },
}

struct RawFunction {
    name: String,
    ops: Vec<(RawOp, LineId, usize, usize)>,
    labels: HashMap<String, usize>,
}

struct Parser {
    file: Arc<str>,
    line: Option<u32>,
    functions: Vec<RawFunction>,
    entry: Option<(String, usize, usize)>,
}

struct Tok<'a> {
    text: &'a str,
    col: usize,
}

fn tokenize(line: &str) -> Vec<Tok<'_>> {
    let code = match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    };
    let mut toks = Vec::new();
    let mut start = None;
    for (i, c) in code.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                toks.push(Tok { text: &code[s..i], col: s + 1 });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        toks.push(Tok { text: &code[s..], col: s + 1 });
    }
    toks
}

fn err(line: usize, column: usize, kind: ParseErrorKind) -> ParseError {
    ParseError { line, column, kind }
}

impl Parser {
    fn new(default_file: &str) -> Self {
        Parser { file: Arc::from(default_file), line: None, functions: Vec::new(), entry: None }
    }

    fn parse(mut self, source: &str) -> Result<Program, ParseError> {
        for (i, text) in source.lines().enumerate() {
            let lineno = i + 1;
            let toks = tokenize(text);
            self.parse_line(lineno, &toks)?;
        }
        self.resolve()
    }

    fn parse_line(&mut self, lineno: usize, toks: &[Tok<'_>]) -> Result<(), ParseError> {
        let Some(first) = toks.first() else { return Ok(()) };
        let end_col = toks.last().map(|t| t.col + t.text.len()).unwrap_or(1);
        let arg = |i: usize, what: &'static str| -> Result<&Tok<'_>, ParseError> {
            toks.get(i).ok_or_else(|| err(lineno, end_col, ParseErrorKind::Expected(what)))
        };
        let no_more = |n: usize| -> Result<(), ParseError> {
            match toks.get(n) {
                Some(t) => Err(err(lineno, t.col, ParseErrorKind::Trailing(t.text.to_string()))),
                None => Ok(()),
            }
        };

        if let Some(directive) = first.text.strip_prefix('.') {
            match directive {
                "func" => {
                    let name = arg(1, "function name")?;
                    no_more(2)?;
                    if self.functions.iter().any(|f| f.name == name.text) {
                        return Err(err(lineno, name.col, ParseErrorKind::DuplicateFunction(name.text.to_string())));
                    }
                    self.functions.push(RawFunction {
                        name: name.text.to_string(),
                        ops: Vec::new(),
                        labels: HashMap::new(),
                    });
                    self.line = None;
                }
                "line" => {
                    let n = arg(1, "line number")?;
                    no_more(2)?;
                    let v: u32 = n
                        .text
                        .parse()
                        .ok()
                        .filter(|v| *v >= 1)
                        .ok_or_else(|| err(lineno, n.col, ParseErrorKind::Expected("positive line number")))?;
                    self.line = Some(v);
                }
                "file" => {
                    let name = arg(1, "file name")?;
                    no_more(2)?;
                    self.file = Arc::from(name.text);
                    self.line = None;
                }
                "entry" => {
                    let name = arg(1, "function name")?;
                    no_more(2)?;
                    self.entry = Some((name.text.to_string(), lineno, name.col));
                }
                _ => return Err(err(lineno, first.col, ParseErrorKind::UnknownDirective(first.text.to_string()))),
            }
            return Ok(());
        }

        let mut rest = toks;
        if let Some(label) = first.text.strip_suffix(':') {
            let Some(func) = self.functions.last_mut() else {
                return Err(err(lineno, first.col, ParseErrorKind::OutsideFunction));
            };
            if label.is_empty() {
                return Err(err(lineno, first.col, ParseErrorKind::Expected("label name")));
            }
            let at = func.ops.len();
            if func.labels.insert(label.to_string(), at).is_some() {
                return Err(err(lineno, first.col, ParseErrorKind::DuplicateLabel(label.to_string())));
            }
            rest = &toks[1..];
            if rest.is_empty() {
                return Ok(());
            }
        }
        self.parse_opcode(lineno, rest, end_col)
    }

    fn parse_opcode(&mut self, lineno: usize, toks: &[Tok<'_>], end_col: usize) -> Result<(), ParseError> {
        let mnemonic = &toks[0];
        if self.functions.is_empty() {
            return Err(err(lineno, mnemonic.col, ParseErrorKind::OutsideFunction));
        }
        let Some(line) = self.line else {
            return Err(err(lineno, mnemonic.col, ParseErrorKind::MissingLine));
        };
        let arg = |i: usize, what: &'static str| -> Result<&Tok<'_>, ParseError> {
            toks.get(i).ok_or_else(|| err(lineno, end_col, ParseErrorKind::Expected(what)))
        };
        let num = |i: usize, what: &'static str| -> Result<u64, ParseError> {
            let t = arg(i, what)?;
            t.text.parse().map_err(|_| err(lineno, t.col, ParseErrorKind::Expected(what)))
        };
        let target = |i: usize| -> Result<RawTarget, ParseError> {
            let t = arg(i, "jump target")?;
            Ok(match t.text.parse::<usize>() {
                Ok(n) => RawTarget::Index(n),
                Err(_) => RawTarget::Label(t.text.to_string()),
            })
        };

        let (op, used) = match mnemonic.text {
            "PUSH" => {
                let t = arg(1, "integer")?;
                let k = t.text.parse().map_err(|_| err(lineno, t.col, ParseErrorKind::Expected("integer")))?;
                (RawOp::Ready(Opcode::Push(k)), 2)
            }
            "POP" => (RawOp::Ready(Opcode::Pop), 1),
            "ADD" => (RawOp::Ready(Opcode::Add), 1),
            "FREE" => (RawOp::Ready(Opcode::Free), 1),
            "RET" => (RawOp::Ready(Opcode::Ret), 1),
            "HALT" => (RawOp::Ready(Opcode::Halt), 1),
            "JMP" => (RawOp::Jump { conditional: false, target: target(1)? }, 2),
            "JNZ" => (RawOp::Jump { conditional: true, target: target(1)? }, 2),
            "CALL" => (RawOp::Call { spawn: false, name: arg(1, "function name")?.text.to_string() }, 2),
            "SPAWN" => (RawOp::Call { spawn: true, name: arg(1, "function name")?.text.to_string() }, 2),
            "CALL_NATIVE" => {
                let name = arg(1, "native function name")?.text.to_string();
                let t = arg(2, "duration in seconds")?;
                let secs: f64 = t
                    .text
                    .parse()
                    .ok()
                    .filter(|s: &f64| s.is_finite() && *s >= 0.0)
                    .ok_or_else(|| err(lineno, t.col, ParseErrorKind::Expected("duration in seconds")))?;
                (RawOp::Ready(Opcode::CallNative { name, duration: Nanos::from_secs_f64(secs) }), 3)
            }
            "ALLOC" => {
                let bytes = num(1, "byte count")?;
                match toks.get(2) {
                    Some(t) if t.text == "native" => (RawOp::Ready(Opcode::Alloc { bytes, native: true }), 3),
                    _ => (RawOp::Ready(Opcode::Alloc { bytes, native: false }), 2),
                }
            }
            "COPY" => (RawOp::Ready(Opcode::Copy(num(1, "byte count")?)), 2),
            "JOIN" => (RawOp::Ready(Opcode::Join(num(1, "thread id")? as ThreadId)), 2),
            other => return Err(err(lineno, mnemonic.col, ParseErrorKind::UnknownOpcode(other.to_string()))),
        };
        if let Some(t) = toks.get(used) {
            return Err(err(lineno, t.col, ParseErrorKind::Trailing(t.text.to_string())));
        }
        let line_id = LineId { file: self.file.clone(), line };
        let func = self.functions.last_mut().expect("checked above");
        let col = toks.get(1).map(|t| t.col).unwrap_or(mnemonic.col);
        func.ops.push((op, line_id, lineno, col));
        Ok(())
    }

    fn resolve(self) -> Result<Program, ParseError> {
        let index: HashMap<&str, FuncId> =
            self.functions.iter().enumerate().map(|(i, f)| (f.name.as_str(), i)).collect();
        let entry = match &self.entry {
            Some((name, l, c)) => {
                *index.get(name.as_str()).ok_or_else(|| err(*l, *c, ParseErrorKind::MissingEntry(name.clone())))?
            }
            None => *index.get("main").ok_or_else(|| err(1, 1, ParseErrorKind::MissingEntry("main".to_string())))?,
        };
        let mut functions = Vec::with_capacity(self.functions.len());
        for raw in &self.functions {
            let len = raw.ops.len();
            let mut code = Vec::with_capacity(len);
            let mut lines = Vec::with_capacity(len);
            for (op, line_id, l, c) in &raw.ops {
                let op = match op {
                    RawOp::Ready(op) => op.clone(),
                    RawOp::Jump { conditional, target } => {
                        let t = match target {
                            RawTarget::Index(t) => *t,
                            RawTarget::Label(name) => *raw
                                .labels
                                .get(name)
                                .ok_or_else(|| err(*l, *c, ParseErrorKind::UndefinedLabel(name.clone())))?,
                        };
                        if t >= len {
                            return Err(err(*l, *c, ParseErrorKind::JumpOutOfRange { target: t, len }));
                        }
                        if *conditional {
                            Opcode::Jnz(t)
                        } else {
                            Opcode::Jmp(t)
                        }
                    }
                    RawOp::Call { spawn, name } => {
                        let f = *index
                            .get(name.as_str())
                            .ok_or_else(|| err(*l, *c, ParseErrorKind::UndefinedFunction(name.clone())))?;
                        if *spawn {
                            Opcode::Spawn(f)
                        } else {
                            Opcode::Call(f)
                        }
                    }
                };
                code.push(op);
                lines.push(line_id.clone());
            }
            functions.push(Function { name: Arc::from(raw.name.as_str()), code, lines });
        }
        Ok(Program { functions, entry })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_program_maps_to_line_one() {
        let p = parse_program(".func main\n.line 1\nPUSH 1\nHALT\n").unwrap();
        assert_eq!(p.opcode_count(), 2);
        let main = p.function(p.entry());
        assert!(main.lines.iter().all(|l| l.line == 1));
        assert_eq!(main.code, vec![Opcode::Push(1), Opcode::Halt]);
    }

    #[test]
    fn undefined_function_is_rejected() {
        let e = parse_program(".func main\n.line 1\nCALL f\n").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UndefinedFunction("f".into()));
        assert!(e.to_string().contains("undefined function f"));
        assert_eq!((e.line, e.column), (3, 6));
    }

    #[test]
    fn jump_out_of_range_is_rejected() {
        let e = parse_program(".func main\n.line 1\nJMP 5\nHALT\n").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::JumpOutOfRange { target: 5, len: 2 }));
    }

    #[test]
    fn syntax_errors_carry_positions() {
        let e = parse_program(".func main\n.line 1\n  BOGUS 3\n").unwrap_err();
        assert_eq!((e.line, e.column), (3, 3));
        assert!(matches!(e.kind, ParseErrorKind::UnknownOpcode(_)));

        let e = parse_program(".func main\nPUSH 1\n").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::MissingLine);

        let e = parse_program(".func main\n.line 1\nPUSH x\n").unwrap_err();
        assert_eq!((e.line, e.column), (3, 6));

        let e = parse_program(".func main\n.line 1\nPOP 3\n").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::Trailing(_)));
    }

    #[test]
    fn labels_and_comments() {
        let src = "\
# header
.func main
.line 1
    PUSH 3      # counter
top:
.line 2
    PUSH -1
    ADD
    JNZ top
    HALT
";
        let p = parse_program(src).unwrap();
        assert_eq!(p.function(0).code[3], Opcode::Jnz(1));
        assert_eq!(p.function(0).lines[1], LineId::new("main.asm", 2));
    }

    #[test]
    fn call_native_listing_starts_with_call_prefix() {
        let p = parse_program(".func main\n.line 1\nPUSH 1\nCALL_NATIVE np.dot 1.0\nHALT\n").unwrap();
        let rows = p.disassemble();
        let calls: Vec<_> = rows.iter().filter(|r| r.name.starts_with("CALL_")).collect();
        assert_eq!(calls.len(), 1);
        assert_eq!(calls[0].index, 1);
        assert_eq!(calls[0].operand, "np.dot 1.000000000");
    }

    #[test]
    fn empty_function_has_empty_listing() {
        let p = parse_program(".func main\n.line 1\nHALT\n.func idle\n").unwrap();
        let rows = p.disassemble();
        assert!(rows.iter().all(|r| r.function == 0));
        assert_eq!(rows.len(), p.opcode_count());
    }

    #[test]
    fn file_directive_and_entry() {
        let src = ".entry start\n.func start\n.file lib.asm\n.line 9\nRET\n";
        let p = parse_program_in("user.asm", src).unwrap();
        assert_eq!(p.entry(), 0);
        assert_eq!(p.line_of(0, 0), &LineId::new("lib.asm", 9));
        assert!(parse_program(".func other\n.line 1\nHALT\n").is_err());
    }

    #[test]
    fn render_round_trips() {
        let src = "\
.func main
.line 1
PUSH 2
SPAWN worker
.line 2
ALLOC 100 native
FREE
COPY 64
JOIN 1
HALT
.func worker
.file lib.asm
.line 7
CALL_NATIVE blas 0.000123456
JMP 0
";
        let p = parse_program(src).unwrap();
        let again = parse_program(&p.render()).unwrap();
        assert_eq!(p, again);
    }
}
