//! Relocatable object units and their line-oriented text format.
//!
//! ```text
//! NEAROBJ 1
//! section <name> <kind> <align> <hexbytes|bsslen>
//! symbol <name> <section> <offset> <size> <scope>
//! reloc <section> <offset> <kind> <symbol> <addend> [pair <id>]
//! ```
//!
//! An empty byte payload is written as `-`, and an undefined (imported)
//! symbol uses `-` as its section.

use std::collections::{HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

pub const OBJECT_MAGIC: &str = "NEAROBJ";
pub const OBJECT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ObjectError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported object version {found} (expected {OBJECT_VERSION})")]
    VersionMismatch { found: String },
    #[error("invalid object: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SectionKind {
    Code,
    Data,
    ROData,
    Bss,
}

impl SectionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SectionKind::Code => "code",
            SectionKind::Data => "data",
            SectionKind::ROData => "rodata",
            SectionKind::Bss => "bss",
        }
    }

    /// Data that lives in RAM at run time.
    pub fn is_ram(self) -> bool {
        matches!(self, SectionKind::Data | SectionKind::Bss)
    }
}

impl FromStr for SectionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "code" => SectionKind::Code,
            "data" => SectionKind::Data,
            "rodata" => SectionKind::ROData,
            "bss" => SectionKind::Bss,
            _ => return Err(format!("unknown section kind `{s}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Contents {
    Bytes(Vec<u8>),
    /// Zero-initialized storage of the given length.
    Zero(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub kind: SectionKind,
    pub align: u32,
    pub contents: Contents,
}

impl Section {
    pub fn new(name: impl Into<String>, kind: SectionKind, align: u32, bytes: Vec<u8>) -> Self {
        Section {
            name: name.into(),
            kind,
            align,
            contents: Contents::Bytes(bytes),
        }
    }

    pub fn bss(name: impl Into<String>, align: u32, len: u32) -> Self {
        Section {
            name: name.into(),
            kind: SectionKind::Bss,
            align,
            contents: Contents::Zero(len),
        }
    }

    pub fn len(&self) -> u32 {
        match &self.contents {
            Contents::Bytes(b) => b.len() as u32,
            Contents::Zero(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Materialized bytes (zeros for BSS).
    pub fn bytes(&self) -> std::borrow::Cow<'_, [u8]> {
        match &self.contents {
            Contents::Bytes(b) => std::borrow::Cow::Borrowed(b),
            Contents::Zero(n) => std::borrow::Cow::Owned(vec![0; *n as usize]),
        }
    }

    pub fn word(&self, offset: u32) -> Option<u32> {
        match &self.contents {
            Contents::Bytes(b) => b
                .get(offset as usize..offset as usize + 4)
                .map(|w| u32::from_le_bytes(w.try_into().unwrap())),
            Contents::Zero(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scope {
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Symbol {
    pub name: String,
    /// `None` for an undefined global the unit imports.
    pub section: Option<String>,
    pub offset: u32,
    pub size: u32,
    pub scope: Scope,
}

impl Symbol {
    pub fn is_defined(&self) -> bool {
        self.section.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[allow(non_camel_case_types)]
pub enum RelocKind {
    HI20,
    LO12_I,
    LO12_S,
    NEAR_I,
    NEAR_S,
    BR13,
    JAL21,
    ABS32,
}

impl RelocKind {
    pub const ALL: [RelocKind; 8] = [
        RelocKind::HI20,
        RelocKind::LO12_I,
        RelocKind::LO12_S,
        RelocKind::NEAR_I,
        RelocKind::NEAR_S,
        RelocKind::BR13,
        RelocKind::JAL21,
        RelocKind::ABS32,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RelocKind::HI20 => "HI20",
            RelocKind::LO12_I => "LO12_I",
            RelocKind::LO12_S => "LO12_S",
            RelocKind::NEAR_I => "NEAR_I",
            RelocKind::NEAR_S => "NEAR_S",
            RelocKind::BR13 => "BR13",
            RelocKind::JAL21 => "JAL21",
            RelocKind::ABS32 => "ABS32",
        }
    }
}

impl fmt::Display for RelocKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelocKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RelocKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown relocation kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relocation {
    pub section: String,
    pub offset: u32,
    pub kind: RelocKind,
    pub symbol: String,
    pub addend: i32,
    /// Marks the two halves of a relaxable `lui` + load/store sequence.
    pub pair_id: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObjectUnit {
    pub sections: Vec<Section>,
    pub symbols: Vec<Symbol>,
    pub relocations: Vec<Relocation>,
}

impl ObjectUnit {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn symbol(&self, name: &str) -> Option<&Symbol> {
        self.symbols.iter().find(|s| s.name == name)
    }

    /// Sorts into the canonical order used by the serializer.
    pub fn canonicalize(&mut self) {
        self.sections.sort_by(|a, b| a.name.cmp(&b.name));
        self.symbols.sort_by(|a, b| {
            (a.section.as_deref().unwrap_or("-"), a.offset, &a.name).cmp(&(
                b.section.as_deref().unwrap_or("-"),
                b.offset,
                &b.name,
            ))
        });
        self.relocations.sort_by(|a, b| {
            (&a.section, a.offset, a.kind, &a.symbol)
                .cmp(&(&b.section, b.offset, b.kind, &b.symbol))
        });
    }

    pub fn canonical(mut self) -> Self {
        self.canonicalize();
        self
    }

    /// Total bytes of code sections.
    pub fn code_size(&self) -> u32 {
        self.sections
            .iter()
            .filter(|s| s.kind == SectionKind::Code)
            .map(Section::len)
            .sum()
    }

    pub fn validate(&self) -> Result<(), ObjectError> {
        let invalid = |m: String| Err(ObjectError::Invalid(m));
        let mut sections = HashMap::new();
        for s in &self.sections {
            if sections.insert(s.name.as_str(), s).is_some() {
                return invalid(format!("duplicate section `{}`", s.name));
            }
            if s.align == 0 || !s.align.is_power_of_two() {
                return invalid(format!(
                    "section `{}` alignment {} is not a power of two",
                    s.name, s.align
                ));
            }
            if s.kind == SectionKind::Code && s.len() % 4 != 0 {
                return invalid(format!(
                    "code section `{}` length is not a multiple of 4",
                    s.name
                ));
            }
            if (s.kind == SectionKind::Bss) != matches!(s.contents, Contents::Zero(_)) {
                return invalid(format!(
                    "section `{}` contents do not match its kind",
                    s.name
                ));
            }
        }
        let mut names = HashSet::new();
        for sym in &self.symbols {
            if !names.insert(sym.name.as_str()) {
                return invalid(format!("duplicate symbol `{}`", sym.name));
            }
            match &sym.section {
                Some(sec) => {
                    let Some(s) = sections.get(sec.as_str()) else {
                        return invalid(format!(
                            "symbol `{}` names unknown section `{sec}`",
                            sym.name
                        ));
                    };
                    if u64::from(sym.offset) + u64::from(sym.size) > u64::from(s.len()) {
                        return invalid(format!("symbol `{}` extends past its section", sym.name));
                    }
                }
                None if sym.scope == Scope::Local => {
                    return invalid(format!("undefined symbol `{}` must be global", sym.name));
                }
                None => {}
            }
        }
        let mut pairs: HashMap<u32, Vec<&Relocation>> = HashMap::new();
        for r in &self.relocations {
            let Some(s) = sections.get(r.section.as_str()) else {
                return invalid(format!("relocation in unknown section `{}`", r.section));
            };
            if !names.contains(r.symbol.as_str()) {
                return invalid(format!(
                    "relocation against undeclared symbol `{}`",
                    r.symbol
                ));
            }
            if u64::from(r.offset) + 4 > u64::from(s.len()) {
                return invalid(format!(
                    "relocation at {} outside section `{}`",
                    r.offset, r.section
                ));
            }
            if s.kind == SectionKind::Code && r.offset % 4 != 0 {
                return invalid(format!("code relocation at {} is not 4-aligned", r.offset));
            }
            if let Some(id) = r.pair_id {
                pairs.entry(id).or_default().push(r);
            }
        }
        for (id, members) in pairs {
            let ok = members.len() == 2
                && members.iter().any(|r| r.kind == RelocKind::HI20)
                && members
                    .iter()
                    .any(|r| matches!(r.kind, RelocKind::LO12_I | RelocKind::LO12_S))
                && members[0].symbol == members[1].symbol;
            if !ok {
                return invalid(format!("pair {id} is not a matched HI20/LO12 pair"));
            }
        }
        Ok(())
    }
}

/// Serializes `unit` in canonical order.
pub fn write_object(unit: &ObjectUnit) -> String {
    let mut unit = unit.clone();
    unit.canonicalize();
    let mut out = format!("{OBJECT_MAGIC} {OBJECT_VERSION}\n");
    for s in &unit.sections {
        let payload = match &s.contents {
            Contents::Bytes(b) if b.is_empty() => "-".to_string(),
            Contents::Bytes(b) => hex::encode(b),
            Contents::Zero(n) => n.to_string(),
        };
        writeln!(
            out,
            "section {} {} {} {payload}",
            s.name,
            s.kind.as_str(),
            s.align
        )
        .unwrap();
    }
    for sym in &unit.symbols {
        let scope = match sym.scope {
            Scope::Local => "local",
            Scope::Global => "global",
        };
        writeln!(
            out,
            "symbol {} {} {} {} {scope}",
            sym.name,
            sym.section.as_deref().unwrap_or("-"),
            sym.offset,
            sym.size
        )
        .unwrap();
    }
    for r in &unit.relocations {
        write!(
            out,
            "reloc {} {} {} {} {}",
            r.section, r.offset, r.kind, r.symbol, r.addend
        )
        .unwrap();
        if let Some(id) = r.pair_id {
            write!(out, " pair {id}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn field<T: FromStr>(tok: Option<&str>, what: &str, line: usize) -> Result<T, ObjectError> {
    let tok = tok.ok_or_else(|| ObjectError::Parse {
        line,
        message: format!("missing {what}"),
    })?;
    tok.parse().map_err(|_| ObjectError::Parse {
        line,
        message: format!("invalid {what} `{tok}`"),
    })
}

pub fn read_object(text: &str) -> Result<ObjectUnit, ObjectError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let header = lines.by_ref().find(|(_, l)| !l.is_empty());
    match header.map(|(n, l)| (n, l.split_whitespace().collect::<Vec<_>>())) {
        Some((_, h)) if h.len() == 2 && h[0] == OBJECT_MAGIC => {
            if h[1] != OBJECT_VERSION.to_string() {
                return Err(ObjectError::VersionMismatch {
                    found: h[1].to_string(),
                });
            }
        }
        Some((line, _)) => {
            return Err(ObjectError::Parse {
                line,
                message: format!("expected `{OBJECT_MAGIC} {OBJECT_VERSION}` header"),
            })
        }
        None => {
            return Err(ObjectError::Parse {
                line: 1,
                message: "empty object file".into(),
            })
        }
    }

    let mut unit = ObjectUnit::default();
    for (n, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let tag = toks.next().unwrap();
        match tag {
            "section" => {
                let name: String = field(toks.next(), "section name", n)?;
                let kind: SectionKind = field(toks.next(), "section kind", n)?;
                let align: u32 = field(toks.next(), "alignment", n)?;
                let payload = toks.next().ok_or_else(|| ObjectError::Parse {
                    line: n,
                    message: "missing section contents".into(),
                })?;
                let contents = if kind == SectionKind::Bss {
                    Contents::Zero(field(Some(payload), "bss length", n)?)
                } else if payload == "-" {
                    Contents::Bytes(Vec::new())
                } else {
                    Contents::Bytes(hex::decode(payload).map_err(|e| ObjectError::Parse {
                        line: n,
                        message: format!("bad hex bytes: {e}"),
                    })?)
                };
                unit.sections.push(Section {
                    name,
                    kind,
                    align,
                    contents,
                });
            }
            "symbol" => {
                let name: String = field(toks.next(), "symbol name", n)?;
                let section: String = field(toks.next(), "symbol section", n)?;
                let offset = field(toks.next(), "symbol offset", n)?;
                let size = field(toks.next(), "symbol size", n)?;
                let scope = match toks.next() {
                    Some("local") => Scope::Local,
                    Some("global") => Scope::Global,
                    other => {
                        return Err(ObjectError::Parse {
                            line: n,
                            message: format!("invalid scope `{}`", other.unwrap_or("")),
                        })
                    }
                };
                unit.symbols.push(Symbol {
                    name,
                    section: (section != "-").then_some(section),
                    offset,
                    size,
                    scope,
                });
            }
            "reloc" => {
                let section = field(toks.next(), "relocation section", n)?;
                let offset = field(toks.next(), "relocation offset", n)?;
                let kind = field(toks.next(), "relocation kind", n)?;
                let symbol = field(toks.next(), "relocation symbol", n)?;
                let addend = field(toks.next(), "relocation addend", n)?;
                let pair_id = match toks.next() {
                    None => None,
                    Some("pair") => Some(field(toks.next(), "pair id", n)?),
                    Some(t) => {
                        return Err(ObjectError::Parse {
                            line: n,
                            message: format!("unexpected token `{t}`"),
                        })
                    }
                };
                unit.relocations.push(Relocation {
                    section,
                    offset,
                    kind,
                    symbol,
                    addend,
                    pair_id,
                });
            }
            other => {
                return Err(ObjectError::Parse {
                    line: n,
                    message: format!("unknown record `{other}`"),
                })
            }
        }
        if let Some(extra) = toks.next() {
            return Err(ObjectError::Parse {
                line: n,
                message: format!("trailing token `{extra}`"),
            });
        }
    }
    unit.canonicalize();
    unit.validate()?;
    Ok(unit)
}
