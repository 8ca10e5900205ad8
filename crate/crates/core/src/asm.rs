//! Two-pass assembler for RV32I + near-addressing assembly.
//!
//! Pass 1 expands pseudo-instructions, assigns section offsets and collects
//! labels; pass 2 encodes words and emits relocations. Global accesses
//! written as `lw rd, sym` / `sw rs, sym, rt` become `lui` + load/store
//! pairs tagged with a shared pair id so the linker may relax them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::isa::{self, BaseSelect, EncodingVariant, Format, Instruction, IsaError, Mnemonic, Reg};
use crate::object::{ObjectUnit, RelocKind, Relocation, Scope, Section, SectionKind, Symbol};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("syntax error: {0}")]
    SyntaxError(String),
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("{0}")]
    ImmediateOutOfRange(IsaError),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("undefined label `{0}` (declare it .global to import it)")]
    UndefinedLocalLabel(String),
    #[error("encoding error: {0}")]
    Encoding(IsaError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

fn err<T>(line: usize, kind: AsmErrorKind) -> Result<T, AsmError> {
    Err(AsmError { line, kind })
}

fn syntax<T>(line: usize, msg: impl Into<String>) -> Result<T, AsmError> {
    err(line, AsmErrorKind::SyntaxError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modifier {
    None,
    Hi,
    Lo,
}

/// `number`, `sym`, `sym+n`, `sym-n`, optionally wrapped in `%hi(..)`/`%lo(..)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expr {
    pub symbol: Option<String>,
    pub addend: i64,
    pub modifier: Modifier,
}

impl Expr {
    pub fn number(n: i64) -> Expr {
        Expr {
            symbol: None,
            addend: n,
            modifier: Modifier::None,
        }
    }

    pub fn symbol(name: &str, addend: i64) -> Expr {
        Expr {
            symbol: Some(name.to_string()),
            addend,
            modifier: Modifier::None,
        }
    }

    fn with_modifier(mut self, modifier: Modifier) -> Expr {
        self.modifier = modifier;
        self
    }

    /// A bare identifier that names an integer register.
    fn as_reg(&self) -> Option<Reg> {
        self.bare_ident().and_then(Reg::parse)
    }

    fn as_fp_reg(&self) -> Option<Reg> {
        self.bare_ident().and_then(Reg::parse_fp)
    }

    fn bare_ident(&self) -> Option<&str> {
        match (&self.symbol, self.addend, self.modifier) {
            (Some(s), 0, Modifier::None) => Some(s),
            _ => None,
        }
    }

    /// A symbolic reference that is not a register name.
    fn is_symbolic(&self) -> bool {
        self.symbol.is_some() && self.as_reg().is_none() && self.as_fp_reg().is_none()
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = match (&self.symbol, self.addend) {
            (None, n) => n.to_string(),
            (Some(s), 0) => s.clone(),
            (Some(s), n) if n > 0 => format!("{s}+{n}"),
            (Some(s), n) => format!("{s}{n}"),
        };
        match self.modifier {
            Modifier::None => f.write_str(&inner),
            Modifier::Hi => write!(f, "%hi({inner})"),
            Modifier::Lo => write!(f, "%lo({inner})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Operand {
    Expr(Expr),
    /// `offset(base)`
    Mem(Expr, String),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Expr(e) => write!(f, "{e}"),
            Operand::Mem(e, base) => write!(f, "{e}({base})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Statement {
    Directive {
        name: String,
        args: Vec<Operand>,
    },
    Instr {
        mnemonic: String,
        operands: Vec<Operand>,
        /// Relaxable-pair marker attached during pseudo expansion.
        pair: Option<u32>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceLine {
    pub line: usize,
    pub labels: Vec<String>,
    pub statement: Option<Statement>,
}

fn is_label(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

pub fn parse_number(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16).ok()?
    } else if !body.is_empty() && body.bytes().all(|b| b.is_ascii_digit()) {
        body.parse().ok()?
    } else {
        return None;
    };
    Some(if neg { -v } else { v })
}

fn parse_expr(s: &str, line: usize) -> Result<Expr, AsmError> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Expr::number(0));
    }
    for (prefix, modifier) in [("%hi(", Modifier::Hi), ("%lo(", Modifier::Lo)] {
        if let Some(rest) = s.strip_prefix(prefix) {
            let inner = rest.strip_suffix(')').ok_or_else(|| AsmError {
                line,
                kind: AsmErrorKind::SyntaxError(format!("unbalanced `{s}`")),
            })?;
            let e = parse_expr(inner, line)?;
            if e.modifier != Modifier::None {
                return syntax(line, format!("nested modifier in `{s}`"));
            }
            return Ok(e.with_modifier(modifier));
        }
    }
    if let Some(n) = parse_number(s) {
        return Ok(Expr::number(n));
    }
    let split = s
        .char_indices()
        .skip(1)
        .find(|(_, c)| *c == '+' || *c == '-');
    let (name, addend) = match split {
        Some((i, _)) => {
            let n = parse_number(s[i..].trim()).ok_or_else(|| AsmError {
                line,
                kind: AsmErrorKind::SyntaxError(format!("bad expression `{s}`")),
            })?;
            (s[..i].trim(), n)
        }
        None => (s, 0),
    };
    if !is_label(name) {
        return syntax(line, format!("bad operand `{s}`"));
    }
    Ok(Expr::symbol(name, addend))
}

fn parse_operand(s: &str, line: usize) -> Result<Operand, AsmError> {
    let s = s.trim();
    if s.is_empty() {
        return syntax(line, "empty operand");
    }
    // `%lo(sym)(base)` or `imm(base)`
    if s.ends_with(')') {
        let inner_end = if s.starts_with('%') {
            // skip past the modifier's own parentheses
            let close = s.find(')').unwrap();
            if close + 1 == s.len() {
                return Ok(Operand::Expr(parse_expr(s, line)?));
            }
            close + 1
        } else {
            s.find('(').unwrap_or(0)
        };
        if let Some(base) = s[inner_end..]
            .strip_prefix('(')
            .and_then(|b| b.strip_suffix(')'))
        {
            let offset = parse_expr(&s[..inner_end], line)?;
            return Ok(Operand::Mem(offset, base.trim().to_string()));
        }
        return syntax(line, format!("bad memory operand `{s}`"));
    }
    Ok(Operand::Expr(parse_expr(s, line)?))
}

/// Splits source text into labelled statements. No semantic checks.
pub fn parse(text: &str) -> Result<Vec<SourceLine>, AsmError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let mut rest = raw.split('#').next().unwrap().trim();
        let mut labels = Vec::new();
        while let Some(colon) = rest.find(':') {
            let candidate = rest[..colon].trim();
            if !is_label(candidate) {
                break;
            }
            labels.push(candidate.to_string());
            rest = rest[colon + 1..].trim();
        }
        if rest.contains(':') {
            return syntax(line, format!("invalid label in `{}`", raw.trim()));
        }
        let statement = if rest.is_empty() {
            None
        } else {
            let (head, tail) = match rest.find(char::is_whitespace) {
                Some(i) => (&rest[..i], rest[i..].trim()),
                None => (rest, ""),
            };
            let operands = if tail.is_empty() {
                Vec::new()
            } else {
                tail.split(',')
                    .map(|t| parse_operand(t, line))
                    .collect::<Result<Vec<_>, _>>()?
            };
            let head = head.to_ascii_lowercase();
            Some(if head.starts_with('.') {
                Statement::Directive {
                    name: head,
                    args: operands,
                }
            } else {
                Statement::Instr {
                    mnemonic: head,
                    operands,
                    pair: None,
                }
            })
        };
        if labels.is_empty() && statement.is_none() {
            continue;
        }
        out.push(SourceLine {
            line,
            labels,
            statement,
        });
    }
    Ok(out)
}

fn instr(
    line: usize,
    labels: Vec<String>,
    m: &str,
    ops: Vec<Operand>,
    pair: Option<u32>,
) -> SourceLine {
    SourceLine {
        line,
        labels,
        statement: Some(Statement::Instr {
            mnemonic: m.to_string(),
            operands: ops,
            pair,
        }),
    }
}

fn reg_op(r: &str) -> Operand {
    Operand::Expr(Expr::symbol(r, 0))
}

/// Splits a 32-bit constant into `lui` / `addi` halves with +0x800 rounding.
pub fn split_hi_lo(value: u32) -> (u32, i32) {
    let hi = (value.wrapping_add(0x800) >> 12) & 0xF_FFFF;
    let lo = value.wrapping_sub(hi << 12) as i32;
    (hi, lo)
}

/// Rewrites pseudo-instructions into machine instructions.
///
/// * `l{b,h,w,bu,hu} rd, sym` → `lui rd, %hi(sym)` + `l* rd, %lo(sym)(rd)` (paired)
/// * `flw fd, sym, rt` / `s{b,h,w} rs, sym, rt` / `fsw fs, sym, rt` → `lui rt, ..` + access (paired)
/// * `la rd, sym` → `lui rd, %hi(sym)` + `addi rd, rd, %lo(sym)` (never paired)
/// * `li`, `nop`, `mv`, `j`, `ret` → their usual single/dual forms
///
/// Already-expanded input passes through unchanged.
pub fn expand_pseudos(lines: Vec<SourceLine>) -> Vec<SourceLine> {
    let mut next_pair = lines
        .iter()
        .filter_map(|l| match &l.statement {
            Some(Statement::Instr { pair, .. }) => *pair,
            _ => None,
        })
        .max()
        .map_or(1, |p| p + 1);
    let mut out = Vec::with_capacity(lines.len());
    for sl in lines {
        let Some(Statement::Instr {
            mnemonic,
            operands,
            pair: None,
        }) = &sl.statement
        else {
            out.push(sl);
            continue;
        };
        let line = sl.line;
        let labels = sl.labels.clone();
        let m = mnemonic.as_str();
        let ops = operands.as_slice();
        let base = Mnemonic::from_name(m);
        let is_load = base.is_some_and(|b| b.is_load() && !b.is_near());
        let is_store = base.is_some_and(|b| b.is_store() && !b.is_near());

        let sym_of = |op: &Operand| match op {
            Operand::Expr(e) if e.is_symbolic() && e.modifier == Modifier::None => Some(e.clone()),
            _ => None,
        };
        let name_of = |op: &Operand| match op {
            Operand::Expr(e) => e.bare_ident().map(str::to_string),
            _ => None,
        };

        match (m, ops) {
            (_, [data, target])
                if is_load && base != Some(Mnemonic::Flw) && sym_of(target).is_some() =>
            {
                let e = sym_of(target).unwrap();
                let rd = name_of(data).unwrap_or_default();
                let id = next_pair;
                next_pair += 1;
                out.push(instr(
                    line,
                    labels,
                    "lui",
                    vec![
                        reg_op(&rd),
                        Operand::Expr(e.clone().with_modifier(Modifier::Hi)),
                    ],
                    Some(id),
                ));
                out.push(instr(
                    line,
                    vec![],
                    m,
                    vec![
                        data.clone(),
                        Operand::Mem(e.with_modifier(Modifier::Lo), rd),
                    ],
                    Some(id),
                ));
            }
            (_, [data, target, scratch])
                if (is_store || base == Some(Mnemonic::Flw)) && sym_of(target).is_some() =>
            {
                let e = sym_of(target).unwrap();
                let rt = name_of(scratch).unwrap_or_default();
                let id = next_pair;
                next_pair += 1;
                out.push(instr(
                    line,
                    labels,
                    "lui",
                    vec![
                        reg_op(&rt),
                        Operand::Expr(e.clone().with_modifier(Modifier::Hi)),
                    ],
                    Some(id),
                ));
                out.push(instr(
                    line,
                    vec![],
                    m,
                    vec![
                        data.clone(),
                        Operand::Mem(e.with_modifier(Modifier::Lo), rt),
                    ],
                    Some(id),
                ));
            }
            ("la", [dst, target]) if sym_of(target).is_some() => {
                let e = sym_of(target).unwrap();
                let rd = name_of(dst).unwrap_or_default();
                out.push(instr(
                    line,
                    labels,
                    "lui",
                    vec![
                        dst.clone(),
                        Operand::Expr(e.clone().with_modifier(Modifier::Hi)),
                    ],
                    None,
                ));
                out.push(instr(
                    line,
                    vec![],
                    "addi",
                    vec![
                        dst.clone(),
                        reg_op(&rd),
                        Operand::Expr(e.with_modifier(Modifier::Lo)),
                    ],
                    None,
                ));
            }
            (
                "li",
                [dst, Operand::Expr(Expr {
                    symbol: None,
                    addend,
                    modifier: Modifier::None,
                })],
            ) => {
                let value = *addend;
                if (-2048..=2047).contains(&value) {
                    out.push(instr(
                        line,
                        labels,
                        "addi",
                        vec![
                            dst.clone(),
                            reg_op("zero"),
                            Operand::Expr(Expr::number(value)),
                        ],
                        None,
                    ));
                } else {
                    let (hi, lo) = split_hi_lo(value as u32);
                    let rd = name_of(dst).unwrap_or_default();
                    out.push(instr(
                        line,
                        labels,
                        "lui",
                        vec![dst.clone(), Operand::Expr(Expr::number(i64::from(hi)))],
                        None,
                    ));
                    if lo != 0 {
                        out.push(instr(
                            line,
                            vec![],
                            "addi",
                            vec![
                                dst.clone(),
                                reg_op(&rd),
                                Operand::Expr(Expr::number(i64::from(lo))),
                            ],
                            None,
                        ));
                    }
                }
            }
            ("nop", []) => out.push(instr(
                line,
                labels,
                "addi",
                vec![
                    reg_op("zero"),
                    reg_op("zero"),
                    Operand::Expr(Expr::number(0)),
                ],
                None,
            )),
            ("mv", [dst, src]) => out.push(instr(
                line,
                labels,
                "addi",
                vec![dst.clone(), src.clone(), Operand::Expr(Expr::number(0))],
                None,
            )),
            ("j", [target]) => out.push(instr(
                line,
                labels,
                "jal",
                vec![reg_op("zero"), target.clone()],
                None,
            )),
            ("ret", []) => out.push(instr(
                line,
                labels,
                "jalr",
                vec![reg_op("zero"), Operand::Mem(Expr::number(0), "ra".into())],
                None,
            )),
            _ => out.push(sl),
        }
    }
    out
}

struct SectionBuf {
    kind: SectionKind,
    align: u32,
    bytes: Vec<u8>,
    bss_len: u32,
    used: bool,
}

impl SectionBuf {
    fn len(&self) -> u32 {
        if self.kind == SectionKind::Bss {
            self.bss_len
        } else {
            self.bytes.len() as u32
        }
    }
}

fn section_for(name: &str) -> Option<(&'static str, SectionKind)> {
    Some(match name {
        ".text" => (".text", SectionKind::Code),
        ".data" => (".data", SectionKind::Data),
        ".rodata" => (".rodata", SectionKind::ROData),
        ".bss" => (".bss", SectionKind::Bss),
        _ => return None,
    })
}

fn data_width(directive: &str) -> Option<u32> {
    match directive {
        ".word" => Some(4),
        ".half" => Some(2),
        ".byte" => Some(1),
        _ => None,
    }
}

struct Assembler {
    variant: EncodingVariant,
    sections: BTreeMap<&'static str, SectionBuf>,
    labels: HashMap<String, (&'static str, u32)>,
    label_order: Vec<String>,
    globals: BTreeSet<String>,
    size_overrides: Vec<(usize, String, i64)>,
    referenced: BTreeMap<String, usize>,
    relocations: Vec<Relocation>,
}

impl Assembler {
    fn new(variant: EncodingVariant) -> Self {
        let mut sections = BTreeMap::new();
        for (name, kind) in [
            (".text", SectionKind::Code),
            (".data", SectionKind::Data),
            (".rodata", SectionKind::ROData),
            (".bss", SectionKind::Bss),
        ] {
            sections.insert(
                name,
                SectionBuf {
                    kind,
                    align: 4,
                    bytes: Vec::new(),
                    bss_len: 0,
                    used: false,
                },
            );
        }
        Assembler {
            variant,
            sections,
            labels: HashMap::new(),
            label_order: Vec::new(),
            globals: BTreeSet::new(),
            size_overrides: Vec::new(),
            referenced: BTreeMap::new(),
            relocations: Vec::new(),
        }
    }

    fn symbol_ref(&mut self, name: &str, line: usize) {
        self.referenced.entry(name.to_string()).or_insert(line);
    }

    /// Pass 1: offsets and labels.
    fn layout(&mut self, lines: &[SourceLine]) -> Result<(), AsmError> {
        let mut offsets: BTreeMap<&'static str, u32> = BTreeMap::new();
        let mut current = ".text";
        for sl in lines {
            let line = sl.line;
            if let Some(Statement::Directive { name, .. }) = &sl.statement {
                if let Some((sec, _)) = section_for(name) {
                    current = sec;
                    self.sections.get_mut(sec).unwrap().used = true;
                }
            }
            let off = offsets.entry(current).or_insert(0);
            // .align applies before labels on the same line
            if let Some(Statement::Directive { name, args }) = &sl.statement {
                if name == ".align" {
                    let n = align_arg(args, line)?;
                    *off = off.next_multiple_of(n);
                }
            }
            for label in &sl.labels {
                if self.labels.insert(label.clone(), (current, *off)).is_some() {
                    return err(line, AsmErrorKind::DuplicateLabel(label.clone()));
                }
                self.label_order.push(label.clone());
                self.sections.get_mut(current).unwrap().used = true;
            }
            match &sl.statement {
                None => {}
                Some(Statement::Instr { .. }) => {
                    if current != ".text" {
                        return syntax(line, "instruction outside the code section");
                    }
                    *off += 4;
                }
                Some(Statement::Directive { name, args }) => {
                    if let Some(w) = data_width(name) {
                        if current == ".bss" || current == ".text" {
                            return syntax(line, format!("{name} not allowed in {current}"));
                        }
                        if args.is_empty() {
                            return syntax(line, format!("{name} needs at least one value"));
                        }
                        *off += w * args.len() as u32;
                    } else if name == ".space" {
                        if current == ".text" {
                            return syntax(line, ".space not allowed in .text");
                        }
                        match args.as_slice() {
                            [Operand::Expr(Expr {
                                symbol: None,
                                addend,
                                ..
                            })] if *addend >= 0 => {
                                *off += *addend as u32;
                            }
                            _ => return syntax(line, ".space takes one non-negative number"),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn emit_bytes(&mut self, section: &'static str, bytes: &[u8]) {
        self.sections
            .get_mut(section)
            .unwrap()
            .bytes
            .extend_from_slice(bytes);
    }

    fn offset(&self, section: &'static str) -> u32 {
        self.sections[section].len()
    }

    fn pad_to(&mut self, section: &'static str, align: u32) {
        let buf = self.sections.get_mut(section).unwrap();
        buf.align = buf.align.max(align);
        let target = buf.len().next_multiple_of(align);
        if buf.kind == SectionKind::Bss {
            buf.bss_len = target;
        } else if buf.kind == SectionKind::Code {
            while buf.bytes.len() < target as usize {
                let nop = if target as usize - buf.bytes.len() >= 4 {
                    0x0000_0013u32
                } else {
                    0
                };
                buf.bytes.extend_from_slice(&nop.to_le_bytes());
            }
        } else {
            buf.bytes.resize(target as usize, 0);
        }
    }

    /// Pass 2: bytes and relocations.
    fn emit(&mut self, lines: &[SourceLine]) -> Result<(), AsmError> {
        let mut current = ".text";
        for sl in lines {
            let line = sl.line;
            match &sl.statement {
                None => {}
                Some(Statement::Directive { name, args }) => {
                    if let Some((sec, _)) = section_for(name) {
                        current = sec;
                        continue;
                    }
                    match name.as_str() {
                        ".global" | ".globl" => {
                            for a in args {
                                match a {
                                    Operand::Expr(e) if e.bare_ident().is_some() => {
                                        self.globals.insert(e.bare_ident().unwrap().to_string());
                                    }
                                    _ => return syntax(line, ".global takes symbol names"),
                                }
                            }
                        }
                        ".align" => {
                            let n = align_arg(args, line)?;
                            self.pad_to(current, n);
                        }
                        ".space" => {
                            let n = match args.as_slice() {
                                [Operand::Expr(e)] => e.addend as u32,
                                _ => unreachable!("checked in layout"),
                            };
                            let buf = self.sections.get_mut(current).unwrap();
                            if buf.kind == SectionKind::Bss {
                                buf.bss_len += n;
                            } else {
                                buf.bytes.resize(buf.bytes.len() + n as usize, 0);
                            }
                        }
                        ".size" => match args.as_slice() {
                            [Operand::Expr(sym), Operand::Expr(Expr {
                                symbol: None,
                                addend,
                                ..
                            })] if sym.bare_ident().is_some() && *addend >= 0 => {
                                self.size_overrides.push((
                                    line,
                                    sym.bare_ident().unwrap().to_string(),
                                    *addend,
                                ));
                            }
                            _ => return syntax(line, ".size takes `symbol, size`"),
                        },
                        d => {
                            let Some(width) = data_width(d) else {
                                return syntax(line, format!("unknown directive `{d}`"));
                            };
                            for a in args {
                                let Operand::Expr(e) = a else {
                                    return syntax(line, format!("bad {d} value `{a}`"));
                                };
                                if e.modifier != Modifier::None {
                                    return syntax(line, format!("bad {d} value `{a}`"));
                                }
                                let value = match &e.symbol {
                                    Some(sym) => {
                                        if width != 4 {
                                            return syntax(
                                                line,
                                                format!("symbolic {d} values are not supported"),
                                            );
                                        }
                                        self.symbol_ref(sym, line);
                                        self.relocations.push(Relocation {
                                            section: current.to_string(),
                                            offset: self.offset(current),
                                            kind: RelocKind::ABS32,
                                            symbol: sym.clone(),
                                            addend: addend_i32(e.addend, line)?,
                                            pair_id: None,
                                        });
                                        0
                                    }
                                    None => {
                                        let lo = -(1i64 << (8 * width - 1));
                                        let hi = (1i64 << (8 * width)) - 1;
                                        if e.addend < lo || e.addend > hi {
                                            return syntax(
                                                line,
                                                format!("{d} value {} out of range", e.addend),
                                            );
                                        }
                                        e.addend
                                    }
                                };
                                let bytes = (value as u32).to_le_bytes();
                                self.emit_bytes(current, &bytes[..width as usize]);
                            }
                        }
                    }
                }
                Some(Statement::Instr {
                    mnemonic,
                    operands,
                    pair,
                }) => {
                    let offset = self.offset(current);
                    let (ins, reloc) = self.encode_line(mnemonic, operands, line)?;
                    let word = isa::encode(&ins, self.variant).map_err(|e| AsmError {
                        line,
                        kind: match e {
                            IsaError::ImmediateOutOfRange { .. }
                            | IsaError::ImmediateMisaligned { .. } => {
                                AsmErrorKind::ImmediateOutOfRange(e)
                            }
                            e => AsmErrorKind::Encoding(e),
                        },
                    })?;
                    if let Some((kind, e)) = reloc {
                        let sym = e.symbol.clone().unwrap();
                        self.symbol_ref(&sym, line);
                        self.relocations.push(Relocation {
                            section: current.to_string(),
                            offset,
                            kind,
                            symbol: sym,
                            addend: addend_i32(e.addend, line)?,
                            pair_id: *pair,
                        });
                    } else if pair.is_some() {
                        return syntax(line, "relaxable pair without a symbolic operand");
                    }
                    self.emit_bytes(current, &word.to_le_bytes());
                }
            }
        }
        Ok(())
    }

    fn reg(&self, op: &Operand, line: usize) -> Result<Reg, AsmError> {
        match op {
            Operand::Expr(e) => e.as_reg(),
            _ => None,
        }
        .map_or_else(
            || syntax(line, format!("expected integer register, found `{op}`")),
            Ok,
        )
    }

    fn data_reg(&self, m: Mnemonic, op: &Operand, line: usize) -> Result<Reg, AsmError> {
        if m.is_fp_data() {
            match op {
                Operand::Expr(e) => e.as_fp_reg(),
                _ => None,
            }
            .map_or_else(
                || syntax(line, format!("expected fp register, found `{op}`")),
                Ok,
            )
        } else {
            self.reg(op, line)
        }
    }

    fn encode_line(
        &self,
        mnemonic: &str,
        ops: &[Operand],
        line: usize,
    ) -> Result<(Instruction, Option<(RelocKind, Expr)>), AsmError> {
        let m = Mnemonic::from_name(mnemonic).ok_or_else(|| AsmError {
            line,
            kind: AsmErrorKind::UnknownMnemonic(mnemonic.to_string()),
        })?;
        let arity = |n: usize| -> Result<(), AsmError> {
            if ops.len() == n {
                Ok(())
            } else {
                syntax(line, format!("{m} takes {n} operands, found {}", ops.len()))
            }
        };
        let imm_of = |e: &Expr| -> Result<i32, AsmError> {
            if e.symbol.is_some() {
                return syntax(line, format!("unexpected symbol in `{e}`"));
            }
            i32::try_from(e.addend)
                .or_else(|_| syntax(line, format!("immediate {} too large", e.addend)))
        };
        let expr = |op: &Operand| -> Result<Expr, AsmError> {
            match op {
                Operand::Expr(e) => Ok(e.clone()),
                _ => syntax(line, format!("unexpected memory operand `{op}`")),
            }
        };

        let mut reloc = None;
        let ins = match m.format() {
            Format::R => {
                arity(3)?;
                Instruction::r(
                    m,
                    self.reg(&ops[0], line)?,
                    self.reg(&ops[1], line)?,
                    self.reg(&ops[2], line)?,
                )
            }
            Format::I if m == Mnemonic::Ebreak => {
                arity(0)?;
                Instruction::ebreak()
            }
            Format::I if m.is_load() || m == Mnemonic::Jalr => {
                let (rd, off, base) = match ops {
                    [rd, Operand::Mem(off, base)] => (rd, off.clone(), base.as_str()),
                    [rd, base, Operand::Expr(off)] if m == Mnemonic::Jalr => {
                        let Operand::Expr(b) = base else {
                            return syntax(line, "bad jalr operands");
                        };
                        (rd, off.clone(), b.bare_ident().unwrap_or(""))
                    }
                    [Operand::Expr(base)] if m == Mnemonic::Jalr => {
                        (&ops[0], Expr::number(0), base.bare_ident().unwrap_or(""))
                    }
                    _ => return syntax(line, format!("{m} expects `rd, offset(base)`")),
                };
                let rd = if ops.len() == 1 {
                    Reg::RA
                } else {
                    self.data_reg(m, rd, line)?
                };
                let base = Reg::parse(base)
                    .map_or_else(|| syntax(line, format!("bad base register `{base}`")), Ok)?;
                let imm = match off.modifier {
                    Modifier::Lo => {
                        reloc = Some((RelocKind::LO12_I, off));
                        0
                    }
                    Modifier::None => imm_of(&off)?,
                    Modifier::Hi => return syntax(line, "%hi is only valid with lui"),
                };
                Instruction::i(m, rd, base, imm)
            }
            Format::I => {
                arity(3)?;
                let e = expr(&ops[2])?;
                let imm = match e.modifier {
                    Modifier::Lo if !m.is_shift_imm() => {
                        reloc = Some((RelocKind::LO12_I, e));
                        0
                    }
                    Modifier::None => imm_of(&e)?,
                    _ => return syntax(line, format!("bad immediate `{e}` for {m}")),
                };
                Instruction::i(m, self.reg(&ops[0], line)?, self.reg(&ops[1], line)?, imm)
            }
            Format::S => {
                let [data, Operand::Mem(off, base)] = ops else {
                    return syntax(
                        line,
                        format!("{m} expects `rs2, offset(base)` or `rs2, symbol, scratch`"),
                    );
                };
                let base = Reg::parse(base)
                    .map_or_else(|| syntax(line, format!("bad base register `{base}`")), Ok)?;
                let imm = match off.modifier {
                    Modifier::Lo => {
                        reloc = Some((RelocKind::LO12_S, off.clone()));
                        0
                    }
                    Modifier::None => imm_of(off)?,
                    Modifier::Hi => return syntax(line, "%hi is only valid with lui"),
                };
                Instruction::s(m, self.data_reg(m, data, line)?, base, imm)
            }
            Format::B => {
                arity(3)?;
                let target = expr(&ops[2])?;
                let imm = if target.is_symbolic() {
                    reloc = Some((RelocKind::BR13, target));
                    0
                } else {
                    imm_of(&target)?
                };
                Instruction::b(m, self.reg(&ops[0], line)?, self.reg(&ops[1], line)?, imm)
            }
            Format::U => {
                arity(2)?;
                let e = expr(&ops[1])?;
                let imm = match e.modifier {
                    Modifier::Hi if m == Mnemonic::Lui => {
                        reloc = Some((RelocKind::HI20, e));
                        0
                    }
                    Modifier::None => {
                        let v = imm_of(&e)?;
                        // accept the signed spelling of the 20-bit field
                        if (-(1 << 19)..0).contains(&v) {
                            v & 0xF_FFFF
                        } else {
                            v
                        }
                    }
                    _ => return syntax(line, format!("bad immediate `{e}` for {m}")),
                };
                Instruction::u(m, self.reg(&ops[0], line)?, imm)
            }
            Format::J => {
                let (rd, target) = match ops {
                    [target] => (Reg::RA, expr(target)?),
                    [rd, target] => (self.reg(rd, line)?, expr(target)?),
                    _ => return syntax(line, "jal expects `[rd,] target`"),
                };
                let imm = if target.is_symbolic() {
                    reloc = Some((RelocKind::JAL21, target));
                    0
                } else {
                    imm_of(&target)?
                };
                Instruction::j(rd, imm)
            }
            Format::NI | Format::NS => {
                arity(2)?;
                let data = self.data_reg(m, &ops[0], line)?;
                let (imm, bs) = match &ops[1] {
                    Operand::Mem(off, base) => {
                        let base = Reg::parse(base).map_or_else(
                            || syntax(line, format!("bad base register `{base}`")),
                            Ok,
                        )?;
                        let bs = self.near_base(base, line)?;
                        (imm_of(off)?, bs)
                    }
                    Operand::Expr(e) if e.is_symbolic() && e.modifier == Modifier::None => {
                        let kind = if m.format() == Format::NI {
                            RelocKind::NEAR_I
                        } else {
                            RelocKind::NEAR_S
                        };
                        reloc = Some((kind, e.clone()));
                        let bs = match self.variant {
                            EncodingVariant::SingleRange128K => None,
                            EncodingVariant::DualRange64K => Some(BaseSelect::B0),
                        };
                        (0, bs)
                    }
                    other => {
                        return syntax(
                            line,
                            format!(
                                "{m} expects `reg, offset(base)` or `reg, symbol`, found `{other}`"
                            ),
                        )
                    }
                };
                if m.format() == Format::NI {
                    Instruction::near_load(m, data, imm, bs)
                } else {
                    Instruction::near_store(m, data, imm, bs)
                }
            }
        };
        Ok((ins, reloc))
    }

    fn near_base(&self, base: Reg, line: usize) -> Result<Option<BaseSelect>, AsmError> {
        match self.variant {
            EncodingVariant::SingleRange128K if base == Reg::GP => Ok(None),
            EncodingVariant::SingleRange128K => {
                syntax(line, "near accesses use gp under the single variant")
            }
            EncodingVariant::DualRange64K => BaseSelect::from_reg(base).map(Some).map_or_else(
                || syntax(line, "near accesses use t0 or t1 under the dual variant"),
                Ok,
            ),
        }
    }

    fn finish(mut self) -> Result<ObjectUnit, AsmError> {
        let mut unit = ObjectUnit::default();

        for name in self.referenced.keys() {
            if !self.labels.contains_key(name) && !self.globals.contains(name) {
                return err(
                    self.referenced[name],
                    AsmErrorKind::UndefinedLocalLabel(name.clone()),
                );
            }
        }

        // default size: span to the next label in the same section
        let mut by_section: BTreeMap<&str, Vec<(u32, &String)>> = BTreeMap::new();
        for name in &self.label_order {
            let (sec, off) = self.labels[name];
            by_section.entry(sec).or_default().push((off, name));
        }
        let mut sizes: HashMap<String, u32> = HashMap::new();
        for (sec, mut entries) in by_section {
            entries.sort();
            let end = self.sections[sec].len();
            for (i, (off, name)) in entries.iter().enumerate() {
                let next = entries.get(i + 1).map_or(end, |(o, _)| *o);
                sizes.insert((*name).clone(), next - off);
            }
        }
        for (line, name, size) in &self.size_overrides {
            let Some((sec, off)) = self.labels.get(name) else {
                return err(*line, AsmErrorKind::UndefinedLocalLabel(name.clone()));
            };
            if u64::from(*off) + *size as u64 > u64::from(self.sections[sec].len()) {
                return syntax(
                    *line,
                    format!(".size of `{name}` extends past the end of {sec}"),
                );
            }
            sizes.insert(name.clone(), *size as u32);
        }

        for name in &self.label_order {
            let (sec, offset) = self.labels[name];
            unit.symbols.push(Symbol {
                name: name.clone(),
                section: Some(sec.to_string()),
                offset,
                size: sizes[name],
                scope: if self.globals.contains(name) {
                    Scope::Global
                } else {
                    Scope::Local
                },
            });
        }
        for g in &self.globals {
            if !self.labels.contains_key(g) {
                unit.symbols.push(Symbol {
                    name: g.clone(),
                    section: None,
                    offset: 0,
                    size: 0,
                    scope: Scope::Global,
                });
            }
        }
        for (name, buf) in std::mem::take(&mut self.sections) {
            if !buf.used && buf.len() == 0 {
                continue;
            }
            unit.sections.push(if buf.kind == SectionKind::Bss {
                Section::bss(name, buf.align, buf.bss_len)
            } else {
                Section::new(name, buf.kind, buf.align, buf.bytes)
            });
        }
        unit.relocations = self.relocations;
        unit.canonicalize();
        debug_assert!(unit.validate().is_ok(), "{:?}", unit.validate());
        Ok(unit)
    }
}

fn align_arg(args: &[Operand], line: usize) -> Result<u32, AsmError> {
    match args {
        [Operand::Expr(Expr {
            symbol: None,
            addend,
            modifier: Modifier::None,
        })] if (0..=12).contains(addend) => Ok(1 << addend),
        _ => syntax(line, ".align takes a power-of-two exponent in 0..=12"),
    }
}

fn addend_i32(v: i64, line: usize) -> Result<i32, AsmError> {
    i32::try_from(v).or_else(|_| syntax(line, format!("addend {v} out of range")))
}

/// Assembles `text` into a relocatable object for `variant`.
pub fn assemble(text: &str, variant: EncodingVariant) -> Result<ObjectUnit, AsmError> {
    let lines = expand_pseudos(parse(text)?);
    let mut asm = Assembler::new(variant);
    asm.layout(&lines)?;
    asm.emit(&lines)?;
    asm.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: EncodingVariant = EncodingVariant::SingleRange128K;
    const D: EncodingVariant = EncodingVariant::DualRange64K;

    fn words(unit: &ObjectUnit) -> Vec<u32> {
        let text = unit.section(".text").unwrap();
        (0..text.len())
            .step_by(4)
            .map(|o| text.word(o).unwrap())
            .collect()
    }

    #[test]
    fn global_load_expands_to_pair() {
        let u = assemble(".data\ng: .word 7\n.text\nlw a0, g\n", S).unwrap();
        let g = u.symbol("g").unwrap();
        assert_eq!((g.section.as_deref(), g.size), (Some(".data"), 4));
        assert_eq!(words(&u).len(), 2);
        let r = &u.relocations;
        assert_eq!(r.len(), 2);
        assert_eq!((r[0].kind, r[0].offset), (RelocKind::HI20, 0));
        assert_eq!((r[1].kind, r[1].offset), (RelocKind::LO12_I, 4));
        assert!(r[0].pair_id.is_some());
        assert_eq!(r[0].pair_id, r[1].pair_id);
        let lui = isa::decode(words(&u)[0], S).unwrap();
        let lw = isa::decode(words(&u)[1], S).unwrap();
        assert_eq!((lui.mnemonic, lui.rd), (Mnemonic::Lui, Reg(10)));
        assert_eq!(
            (lw.mnemonic, lw.rd, lw.rs1),
            (Mnemonic::Lw, Reg(10), Reg(10))
        );
    }

    #[test]
    fn store_pseudo_uses_scratch() {
        let u = assemble(".data\ng: .word 0\n.text\nsw a1, g+0, t2\n", S).unwrap();
        let w = words(&u);
        let lui = isa::decode(w[0], S).unwrap();
        let sw = isa::decode(w[1], S).unwrap();
        assert_eq!(lui.rd, Reg::T2);
        assert_eq!((sw.rs1, sw.rs2), (Reg::T2, Reg(11)));
        assert_eq!(u.relocations[1].kind, RelocKind::LO12_S);
        assert_eq!(u.relocations[0].pair_id, u.relocations[1].pair_id);
    }

    #[test]
    fn explicit_near_matches_encoder() {
        let u = assemble("nlw a0, 16(gp)\n", S).unwrap();
        let expected =
            isa::encode(&Instruction::near_load(Mnemonic::Nlw, Reg(10), 16, None), S).unwrap();
        assert_eq!(words(&u), vec![expected]);

        let u = assemble("nsw a0, -8(t1)\n", D).unwrap();
        let expected = isa::encode(
            &Instruction::near_store(Mnemonic::Nsw, Reg(10), -8, Some(BaseSelect::B1)),
            D,
        )
        .unwrap();
        assert_eq!(words(&u), vec![expected]);

        assert!(assemble("nlw a0, 16(t0)\n", S).is_err());
        assert!(assemble("nlw a0, 16(gp)\n", D).is_err());
    }

    #[test]
    fn symbolic_near_emits_near_relocs() {
        let u = assemble(".data\nv: .word 1\n.text\nnlw a0, v\nnsh a1, v+2\n", S).unwrap();
        let kinds: Vec<_> = u
            .relocations
            .iter()
            .map(|r| (r.kind, r.addend, r.pair_id))
            .collect();
        assert_eq!(
            kinds,
            vec![(RelocKind::NEAR_I, 0, None), (RelocKind::NEAR_S, 2, None)]
        );
    }

    #[test]
    fn branch_to_label_emits_br13() {
        let u = assemble("beq a0, a1, L\nnop\nL: ebreak\n", S).unwrap();
        assert_eq!(u.relocations.len(), 1);
        assert_eq!(u.relocations[0].kind, RelocKind::BR13);
        assert_eq!(u.symbol("L").unwrap().offset, 8);
    }

    #[test]
    fn pseudo_expansion_rules() {
        let count = |src: &str| {
            expand_pseudos(parse(src).unwrap())
                .iter()
                .filter(|l| matches!(l.statement, Some(Statement::Instr { .. })))
                .count()
        };
        assert_eq!(count("lw a0, g"), 2);
        assert_eq!(count("lw a0, 0(a1)"), 1);
        let la = expand_pseudos(parse("la a0, g").unwrap());
        assert_eq!(la.len(), 2);
        assert!(la
            .iter()
            .all(|l| matches!(l.statement, Some(Statement::Instr { pair: None, .. }))));
        let reg = parse("lw a0, 0(a1)").unwrap();
        assert_eq!(expand_pseudos(reg.clone()), reg);
    }

    #[test]
    fn expansion_is_idempotent() {
        let src = "lw a0, g\nsw a0, g, t2\nla a1, g\nli a2, 0x12345\nflw fa0, g, t3\n";
        let once = expand_pseudos(parse(src).unwrap());
        assert_eq!(expand_pseudos(once.clone()), once);
    }

    #[test]
    fn li_splits_large_constants() {
        let u = assemble("li a0, 0x12345FFF\nli a1, -5\n", S).unwrap();
        let w: Vec<_> = words(&u)
            .into_iter()
            .map(|w| isa::decode(w, S).unwrap())
            .collect();
        assert_eq!(w.len(), 3);
        let (hi, lo) = split_hi_lo(0x1234_5FFF);
        assert_eq!((w[0].imm as u32, w[1].imm), (hi, lo));
        assert_eq!(((hi << 12) as i32).wrapping_add(lo) as u32, 0x1234_5FFF);
    }

    #[test]
    fn symbol_sizes() {
        let src = ".data\na: .word 1\nb: .half 2\n.align 2\nc: .space 12\n.size c, 8\n.bss\nz: .space 64\n";
        let u = assemble(src, S).unwrap();
        assert_eq!(u.symbol("a").unwrap().size, 4);
        // span to the next label includes the alignment padding
        assert_eq!(u.symbol("b").unwrap().size, 4);
        assert_eq!(u.symbol("c").unwrap().offset, 8);
        assert_eq!(u.symbol("c").unwrap().size, 8);
        assert_eq!(u.symbol("z").unwrap().size, 64);
        assert_eq!(u.section(".bss").unwrap().len(), 64);
    }

    #[test]
    fn error_paths() {
        let kind = |src: &str| assemble(src, S).unwrap_err().kind;
        assert!(matches!(
            kind("frob a0, a1"),
            AsmErrorKind::UnknownMnemonic(_)
        ));
        assert!(matches!(
            kind("addi a0, a0, 5000"),
            AsmErrorKind::ImmediateOutOfRange(_)
        ));
        assert!(matches!(
            kind("x: nop\nx: nop"),
            AsmErrorKind::DuplicateLabel(_)
        ));
        assert!(matches!(
            kind("j nowhere"),
            AsmErrorKind::UndefinedLocalLabel(_)
        ));
        assert!(matches!(kind("add a0, a1"), AsmErrorKind::SyntaxError(_)));
        assert!(matches!(kind(".data\nnop"), AsmErrorKind::SyntaxError(_)));
        assert!(matches!(
            kind("nlw a0, 65536(gp)"),
            AsmErrorKind::ImmediateOutOfRange(_)
        ));
        let e = assemble("nop\n\nfrob\n", S).unwrap_err();
        assert_eq!(e.line, 3);
    }

    #[test]
    fn global_import_is_allowed() {
        let u = assemble(".global ext\njal ext\n", S).unwrap();
        let ext = u.symbol("ext").unwrap();
        assert!(!ext.is_defined());
        assert_eq!(u.relocations[0].kind, RelocKind::JAL21);
    }

    #[test]
    fn word_with_symbol_gets_abs32() {
        let u = assemble(".data\np: .word main+4\n.text\nmain: ebreak\n", S).unwrap();
        let r = &u.relocations[0];
        assert_eq!(
            (r.kind, r.symbol.as_str(), r.addend),
            (RelocKind::ABS32, "main", 4)
        );
    }
}
