//! Linker: memory layout, near-window placement, relaxation and resolution.
//!
//! Layout happens once, before any code shrinks, so data addresses (and
//! therefore every reachability decision) are final by the time pairs are
//! relaxed. ROM holds code followed by far read-only data, with near
//! read-only data packed against the top of ROM. RAM starts with near data,
//! followed by far data and then BSS.
//!
//! On a contiguous map (ROM ends where RAM begins) the single-variant window
//! straddles the boundary, so near constants and near variables share one
//! `gp`-relative 128 KB span.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::config::{ConfigError, KeyValues};
use crate::image::{Blob, Image, ImageSymbol};
use crate::isa::{self, BaseSelect, EncodingVariant, Format, Instruction, Mnemonic, Reg};
use crate::object::{Contents, ObjectError, ObjectUnit, RelocKind, Relocation, Scope, SectionKind};

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("{region} overflow: need {needed} bytes, {available} available")]
    Overflow {
        region: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("duplicate global symbol `{0}`")]
    Conflict(String),
    #[error("undefined symbol `{0}`")]
    Undefined(String),
    #[error("{kind} relocation against `{symbol}` at 0x{site:08x}: value {value} out of range")]
    RelocOutOfRange {
        kind: RelocKind,
        symbol: String,
        site: u32,
        value: i64,
    },
    #[error("invalid link configuration: {0}")]
    Config(String),
    #[error("unit {unit}: {source}")]
    Object { unit: usize, source: ObjectError },
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<ConfigError> for LinkError {
    fn from(e: ConfigError) -> Self {
        LinkError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryMap {
    pub rom_base: u32,
    pub rom_size: u32,
    pub ram_base: u32,
    pub ram_size: u32,
    /// ROM ends exactly where RAM begins, so one window may span both.
    pub contiguous: bool,
}

impl MemoryMap {
    /// 1 MB ROM directly followed by 1 MB RAM.
    pub const CONTIGUOUS: MemoryMap = MemoryMap {
        rom_base: 0x8000_0000,
        rom_size: 0x0010_0000,
        ram_base: 0x8010_0000,
        ram_size: 0x0010_0000,
        contiguous: true,
    };

    /// Typical microcontroller split: flash low, SRAM far above it.
    pub const FRAGMENTED: MemoryMap = MemoryMap {
        rom_base: 0x0800_0000,
        rom_size: 0x0010_0000,
        ram_base: 0x2000_0000,
        ram_size: 0x0010_0000,
        contiguous: false,
    };

    pub fn rom_end(&self) -> u64 {
        u64::from(self.rom_base) + u64::from(self.rom_size)
    }

    pub fn ram_end(&self) -> u64 {
        u64::from(self.ram_base) + u64::from(self.ram_size)
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        if !self.rom_base.is_multiple_of(4) || !self.ram_base.is_multiple_of(4) {
            return Err(LinkError::Config("region bases must be 4-aligned".into()));
        }
        if self.rom_end() > 1 << 32 || self.ram_end() > 1 << 32 {
            return Err(LinkError::Config(
                "region extends past the 32-bit address space".into(),
            ));
        }
        let overlap =
            u64::from(self.rom_base) < self.ram_end() && u64::from(self.ram_base) < self.rom_end();
        if overlap {
            return Err(LinkError::Config("ROM and RAM regions overlap".into()));
        }
        if self.contiguous && self.rom_end() != u64::from(self.ram_base) {
            return Err(LinkError::Config(
                "contiguous map requires RAM to start where ROM ends".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NearPolicy {
    pub variant: EncodingVariant,
    /// Largest symbol size (bytes) eligible for a near window.
    pub threshold: u32,
    pub near_ram: bool,
    pub near_rom: bool,
}

impl NearPolicy {
    pub fn label(&self) -> &'static str {
        match (self.near_ram, self.near_rom) {
            (true, true) => "RAM & ROM",
            (true, false) => "RAM only",
            (false, true) => "ROM only",
            (false, false) => "none",
        }
    }
}

/// Parses a link configuration file (memory map plus near policy).
pub fn parse_link_config(text: &str) -> Result<(MemoryMap, NearPolicy), LinkError> {
    let kv = KeyValues::parse(text)?;
    kv.only(&[
        "rom_base",
        "rom_size",
        "ram_base",
        "ram_size",
        "contiguous",
        "variant",
        "threshold",
        "near_ram",
        "near_rom",
    ])?;
    let map = MemoryMap {
        rom_base: kv.require("rom_base")?,
        rom_size: kv.require("rom_size")?,
        ram_base: kv.require("ram_base")?,
        ram_size: kv.require("ram_size")?,
        contiguous: kv.get_or("contiguous", false)?,
    };
    map.validate()?;
    let policy = NearPolicy {
        variant: kv.get_or("variant", EncodingVariant::SingleRange128K)?,
        threshold: kv.get_or("threshold", crate::eval::DEFAULT_THRESHOLD)?,
        near_ram: kv.get_or("near_ram", true)?,
        near_rom: kv.get_or("near_rom", false)?,
    };
    Ok((map, policy))
}

/// What a relaxed pair turns into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Addressing {
    /// Near load/store instructions of the given variant.
    Near(EncodingVariant),
    /// Classic `gp`-relative base instructions with a 12-bit immediate.
    Gp12,
}

impl Addressing {
    fn span(self) -> u32 {
        match self {
            Addressing::Near(v) => v.window_span(),
            Addressing::Gp12 => 4096,
        }
    }

    fn domain(self) -> (i32, i32) {
        match self {
            Addressing::Near(v) => isa::near_offset_domain(v),
            Addressing::Gp12 => isa::GP12_DOMAIN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum WindowRegion {
    Ram,
    Rom,
    /// Straddles the ROM/RAM boundary of a contiguous map.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NearWindow {
    pub region: WindowRegion,
    pub base: Reg,
    pub base_select: Option<BaseSelect>,
    pub start: u32,
    pub span: u32,
    pub anchor: u32,
    /// Bytes occupied (including alignment padding).
    pub used: u32,
    pub members: usize,
}

/// A contiguous slice of one input section placed as a unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    pub unit: usize,
    pub section: String,
    pub kind: SectionKind,
    pub start: u32,
    pub len: u32,
    /// Near pieces: alignment of the first byte. Far pieces: the section
    /// alignment, placed so `addr` and `start` agree modulo it.
    pub align: u32,
    pub window: Option<usize>,
    pub addr: u32,
}

/// Address-assigned layout of all non-code data plus near-window metadata.
#[derive(Debug, Clone)]
pub struct ImagePlan {
    pub map: MemoryMap,
    pub addressing: Addressing,
    pub windows: Vec<NearWindow>,
    pub pieces: Vec<Piece>,
    /// Code sections in placement order.
    pub code_order: Vec<(usize, String)>,
    pub base_inits: Vec<(Reg, u32)>,
    pub diagnostics: Vec<String>,
    /// Lowest address of ROM data; relaxed code never grows past it.
    pub rom_data_floor: u64,
    index: HashMap<(usize, String), Vec<usize>>,
}

impl ImagePlan {
    fn piece_at(&self, unit: usize, section: &str, offset: u32) -> Option<&Piece> {
        let ids = self.index.get(&(unit, section.to_string()))?;
        let pos = ids.partition_point(|&i| self.pieces[i].start <= offset);
        let id = ids[pos.checked_sub(1)?];
        let p = &self.pieces[id];
        (offset <= p.start + p.len).then_some(p)
    }

    /// Final address of a location inside a data section.
    pub fn data_addr(&self, unit: usize, section: &str, offset: u32) -> Option<u32> {
        self.piece_at(unit, section, offset)
            .map(|p| p.addr + (offset - p.start))
    }

    /// Near window that holds the given data location, if any.
    pub fn window_of(&self, unit: usize, section: &str, offset: u32) -> Option<&NearWindow> {
        self.piece_at(unit, section, offset)
            .and_then(|p| p.window)
            .map(|w| &self.windows[w])
    }

    pub fn variant(&self) -> EncodingVariant {
        match self.addressing {
            Addressing::Near(v) => v,
            Addressing::Gp12 => EncodingVariant::SingleRange128K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkStats {
    pub code_size_bytes: u32,
    pub relax_count: usize,
    pub windows: Vec<NearWindow>,
    pub diagnostics: Vec<String>,
}

/// Global/local symbol resolution over a set of units.
struct Symbols<'a> {
    units: &'a [ObjectUnit],
    globals: HashMap<&'a str, usize>,
    locals: Vec<HashMap<&'a str, usize>>,
}

#[derive(Debug, Clone, Copy)]
struct SymRef<'a> {
    unit: usize,
    section: &'a str,
    offset: u32,
}

impl<'a> Symbols<'a> {
    fn build(units: &'a [ObjectUnit]) -> Result<Self, LinkError> {
        let mut globals = HashMap::new();
        let mut locals = Vec::with_capacity(units.len());
        for (ui, u) in units.iter().enumerate() {
            let mut map = HashMap::new();
            for (si, s) in u.symbols.iter().enumerate() {
                if !s.is_defined() {
                    continue;
                }
                map.insert(s.name.as_str(), si);
                if s.scope == Scope::Global && globals.insert(s.name.as_str(), ui).is_some() {
                    return Err(LinkError::Conflict(s.name.clone()));
                }
            }
            locals.push(map);
        }
        Ok(Symbols {
            units,
            globals,
            locals,
        })
    }

    fn lookup(&self, unit: usize, name: &str) -> Result<SymRef<'a>, LinkError> {
        let owner = if self.locals[unit].contains_key(name) {
            unit
        } else {
            *self
                .globals
                .get(name)
                .ok_or_else(|| LinkError::Undefined(name.to_string()))?
        };
        let sym = &self.units[owner].symbols[self.locals[owner][name]];
        Ok(SymRef {
            unit: owner,
            section: sym.section.as_deref().unwrap(),
            offset: sym.offset,
        })
    }
}

fn align_up(v: u64, a: u32) -> u64 {
    v.next_multiple_of(u64::from(a.max(1)))
}

/// Smallest address at or above `v` congruent to `offset` modulo `a`, so
/// that bytes keep their alignment relative to their section.
fn align_phase(v: u64, a: u32, offset: u32) -> u64 {
    let a = u64::from(a.max(1));
    let phase = u64::from(offset) % a;
    v + (phase + a - v % a) % a
}

fn align_down(v: u64, a: u32) -> u64 {
    v - v % u64::from(a.max(1))
}

/// Alignment guaranteed for bytes at `offset` of a section aligned to `align`.
fn offset_align(align: u32, offset: u32) -> u32 {
    if offset == 0 {
        align
    } else {
        align.min(1 << offset.trailing_zeros())
    }
}

/// A chosen candidate keyed by (unit, section, offset): (len, window, up part?, slot).
type Placement = (u32, usize, bool, usize);

/// A relaxation edit: (lui offset, rewritten access word, replacement relocation).
type Edit = (u32, u32, Option<Relocation>);

/// Packs `(len, align)` items upward from zero; returns their offsets and the end.
fn pack(items: impl IntoIterator<Item = (u32, u32)>) -> (Vec<u64>, u64) {
    let mut cursor = 0u64;
    let offs = items
        .into_iter()
        .map(|(len, align)| {
            let at = align_up(cursor, align);
            cursor = at + u64::from(len);
            at
        })
        .collect();
    (offs, cursor)
}

/// One growing part of a window: upward from a start, or downward to an end.
#[derive(Debug, Default, Clone)]
struct WindowPart {
    items: Vec<(u32, u32)>,
    end: u64,
    max_align: u32,
}

impl WindowPart {
    fn with(&self, len: u32, align: u32) -> WindowPart {
        let mut p = self.clone();
        p.end = align_up(p.end, align) + u64::from(len);
        p.items.push((len, align));
        p.max_align = p.max_align.max(align);
        p
    }

    /// Footprint when the part must end at `boundary`.
    fn down_footprint(&self, boundary: u64) -> u64 {
        if self.items.is_empty() {
            0
        } else {
            boundary - align_down(boundary.saturating_sub(self.end), self.max_align)
        }
    }
}

struct WindowBuilder {
    region: WindowRegion,
    base: Reg,
    base_select: Option<BaseSelect>,
    up_start: Option<u64>,
    down_end: Option<u64>,
    up: WindowPart,
    down: WindowPart,
    span: u32,
    members: usize,
}

impl WindowBuilder {
    fn footprint(&self, up: &WindowPart, down: &WindowPart) -> u64 {
        let down_fp = self.down_end.map_or(0, |e| down.down_footprint(e));
        up.end + down_fp
    }

    /// Tries to add a candidate; RAM data grows up, ROM data grows down.
    fn try_add(&mut self, len: u32, align: u32, ram: bool) -> Option<(bool, usize)> {
        if ram {
            self.up_start?;
            let up = self.up.with(len, align);
            if self.footprint(&up, &self.down) > u64::from(self.span) {
                return None;
            }
            self.up = up;
            self.members += 1;
            Some((true, self.up.items.len() - 1))
        } else {
            self.down_end?;
            let down = self.down.with(len, align);
            if self.footprint(&self.up, &down) > u64::from(self.span) {
                return None;
            }
            self.down = down;
            self.members += 1;
            Some((false, self.down.items.len() - 1))
        }
    }

    fn down_start(&self) -> Option<u64> {
        let end = self.down_end?;
        (!self.down.items.is_empty()).then(|| end - self.down.down_footprint(end))
    }

    fn start(&self) -> u64 {
        self.down_start().or(self.up_start).unwrap_or(0)
    }
}

struct Candidate<'a> {
    size: u32,
    name: &'a str,
    unit: usize,
    section: &'a str,
    offset: u32,
    align: u32,
    ram: bool,
}

/// Assigns addresses to all data, splitting near candidates out of their sections.
pub fn layout(
    units: &[ObjectUnit],
    map: &MemoryMap,
    policy: &NearPolicy,
) -> Result<ImagePlan, LinkError> {
    layout_with(
        units,
        map,
        Addressing::Near(policy.variant),
        policy.threshold,
        policy.near_ram,
        policy.near_rom,
    )
}

fn layout_with(
    units: &[ObjectUnit],
    map: &MemoryMap,
    addressing: Addressing,
    threshold: u32,
    near_ram: bool,
    mut near_rom: bool,
) -> Result<ImagePlan, LinkError> {
    map.validate()?;
    for (unit, u) in units.iter().enumerate() {
        u.validate()
            .map_err(|source| LinkError::Object { unit, source })?;
    }
    let symbols = Symbols::build(units)?;
    for (ui, u) in units.iter().enumerate() {
        for r in &u.relocations {
            symbols.lookup(ui, &r.symbol)?;
        }
    }

    let mut diagnostics = Vec::new();
    let span = addressing.span();
    let mut windows: Vec<WindowBuilder> = Vec::new();
    let rom_end = map.rom_end();
    let ram_base = u64::from(map.ram_base);
    match addressing {
        Addressing::Near(EncodingVariant::SingleRange128K) => {
            if near_rom && !map.contiguous {
                diagnostics.push(
                    "single-range near addressing cannot cover both ROM and RAM on a fragmented map; \
                     read-only data stays far"
                        .to_string(),
                );
                near_rom = false;
            }
            if near_ram || near_rom {
                let region = match (near_ram, near_rom) {
                    (true, true) => WindowRegion::Shared,
                    (true, false) => WindowRegion::Ram,
                    _ => WindowRegion::Rom,
                };
                windows.push(WindowBuilder {
                    region,
                    base: Reg::GP,
                    base_select: None,
                    up_start: near_ram.then_some(ram_base),
                    down_end: near_rom.then_some(rom_end),
                    up: WindowPart::default(),
                    down: WindowPart::default(),
                    span,
                    members: 0,
                });
            }
        }
        Addressing::Near(EncodingVariant::DualRange64K) => {
            if near_ram {
                windows.push(WindowBuilder {
                    region: WindowRegion::Ram,
                    base: Reg::T0,
                    base_select: Some(BaseSelect::B0),
                    up_start: Some(ram_base),
                    down_end: None,
                    up: WindowPart::default(),
                    down: WindowPart::default(),
                    span,
                    members: 0,
                });
            }
            if near_rom {
                windows.push(WindowBuilder {
                    region: WindowRegion::Rom,
                    base: Reg::T1,
                    base_select: Some(BaseSelect::B1),
                    up_start: None,
                    down_end: Some(rom_end),
                    up: WindowPart::default(),
                    down: WindowPart::default(),
                    span,
                    members: 0,
                });
            }
        }
        Addressing::Gp12 => {
            near_rom = false;
            if near_ram {
                windows.push(WindowBuilder {
                    region: WindowRegion::Ram,
                    base: Reg::GP,
                    base_select: None,
                    up_start: Some(ram_base),
                    down_end: None,
                    up: WindowPart::default(),
                    down: WindowPart::default(),
                    span,
                    members: 0,
                });
            }
        }
    }

    // Candidates: sized, non-overlapping data symbols whose byte range no
    // relocation straddles.
    let mut candidates = Vec::new();
    for (ui, u) in units.iter().enumerate() {
        for sec in &u.sections {
            let eligible = match sec.kind {
                SectionKind::Code => false,
                SectionKind::ROData => near_rom,
                SectionKind::Data | SectionKind::Bss => near_ram,
            };
            if !eligible || windows.is_empty() {
                continue;
            }
            let mut syms: Vec<_> = u
                .symbols
                .iter()
                .filter(|s| s.section.as_deref() == Some(sec.name.as_str()) && s.size > 0)
                .collect();
            syms.sort_by_key(|s| (s.offset, s.size));
            let mut sites: Vec<u32> = u
                .relocations
                .iter()
                .filter(|r| r.section == sec.name)
                .map(|r| r.offset)
                .collect();
            sites.sort_unstable();
            // A relocated word straddles `at` when it starts in (at-4, at).
            let straddles = |at: u32| {
                let from = sites.partition_point(|&o| o + 4 <= at);
                sites.get(from).is_some_and(|&o| o < at)
            };
            // Furthest end among symbols before each index, and nearest start after.
            let mut prefix_end = Vec::with_capacity(syms.len());
            let mut furthest = 0u32;
            for s in &syms {
                prefix_end.push(furthest);
                furthest = furthest.max(s.offset + s.size);
            }
            for (i, s) in syms.iter().enumerate() {
                if s.size > threshold {
                    continue;
                }
                let end = s.offset + s.size;
                let overlaps = (i > 0 && prefix_end[i] > s.offset)
                    || syms.get(i + 1).is_some_and(|n| n.offset < end);
                let straddled = straddles(s.offset) || straddles(end);
                if overlaps || straddled {
                    continue;
                }
                candidates.push(Candidate {
                    size: s.size,
                    name: &s.name,
                    unit: ui,
                    section: &sec.name,
                    offset: s.offset,
                    align: offset_align(sec.align, s.offset),
                    ram: sec.kind.is_ram(),
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        (a.size, a.name, a.unit, a.section, a.offset)
            .cmp(&(b.size, b.name, b.unit, b.section, b.offset))
    });

    let mut chosen: BTreeMap<(usize, &str, u32), Placement> = BTreeMap::new();
    for c in &candidates {
        let Some(wi) = windows.iter().position(|w| {
            if c.ram {
                w.up_start.is_some()
            } else {
                w.down_end.is_some()
            }
        }) else {
            continue;
        };
        if let Some((up, slot)) = windows[wi].try_add(c.size, c.align, c.ram) {
            chosen.insert((c.unit, c.section, c.offset), (c.size, wi, up, slot));
        }
    }

    // Split every data section into pieces around the chosen candidates.
    let mut pieces: Vec<Piece> = Vec::new();
    let mut code_order = Vec::new();
    for (ui, u) in units.iter().enumerate() {
        for sec in &u.sections {
            if sec.kind == SectionKind::Code {
                code_order.push((ui, sec.name.clone()));
                continue;
            }
            let mut cursor = 0;
            let cuts: Vec<_> = chosen
                .range((ui, sec.name.as_str(), 0)..=(ui, sec.name.as_str(), u32::MAX))
                .map(|(&(_, _, off), &(len, wi, _, _))| (off, len, wi))
                .collect();
            let mut push = |start: u32, len: u32, window: Option<usize>| {
                pieces.push(Piece {
                    unit: ui,
                    section: sec.name.clone(),
                    kind: sec.kind,
                    start,
                    len,
                    align: if window.is_some() {
                        offset_align(sec.align, start)
                    } else {
                        sec.align
                    },
                    window,
                    addr: 0,
                });
            };
            for (off, len, wi) in cuts {
                if off > cursor {
                    push(cursor, off - cursor, None);
                }
                push(off, len, Some(wi));
                cursor = off + len;
            }
            if cursor < sec.len() || cursor == 0 {
                push(cursor, sec.len() - cursor, None);
            }
        }
    }

    // Near pieces: place in the same order the windows were filled.
    let mut near_slots: HashMap<(usize, bool, usize), usize> = HashMap::new();
    for (pi, p) in pieces.iter().enumerate() {
        if p.window.is_some() {
            let (_, wi, up, slot) = chosen[&(p.unit, p.section.as_str(), p.start)];
            near_slots.insert((wi, up, slot), pi);
        }
    }
    let mut final_windows = Vec::new();
    let mut base_inits = Vec::new();
    let mut ram_cursor = ram_base;
    let mut rom_near_floor = rom_end;
    for (wi, w) in windows.iter().enumerate() {
        if let Some(start) = w.up_start {
            let (offs, end) = pack(w.up.items.iter().copied());
            for (slot, off) in offs.iter().enumerate() {
                pieces[near_slots[&(wi, true, slot)]].addr = (start + off) as u32;
            }
            ram_cursor = ram_cursor.max(start + end);
        }
        if let Some(down_start) = w.down_start() {
            let (offs, _) = pack(w.down.items.iter().copied());
            for (slot, off) in offs.iter().enumerate() {
                pieces[near_slots[&(wi, false, slot)]].addr = (down_start + off) as u32;
            }
            rom_near_floor = rom_near_floor.min(down_start);
        }
        if w.members == 0 {
            continue;
        }
        let start = w.start();
        let anchor = (start + u64::from(w.span / 2)) as u32;
        base_inits.push((w.base, anchor));
        final_windows.push((
            wi,
            NearWindow {
                region: w.region,
                base: w.base,
                base_select: w.base_select,
                start: start as u32,
                span: w.span,
                anchor,
                used: w.footprint(&w.up, &w.down) as u32,
                members: w.members,
            },
        ));
    }
    // Re-number windows so only populated ones remain.
    let renumber: HashMap<usize, usize> = final_windows
        .iter()
        .enumerate()
        .map(|(i, (wi, _))| (*wi, i))
        .collect();
    for p in &mut pieces {
        p.window = p.window.map(|w| renumber[&w]);
    }
    let windows: Vec<NearWindow> = final_windows.into_iter().map(|(_, w)| w).collect();

    // ROM: code, then far read-only data.
    let mut rom_cursor = u64::from(map.rom_base);
    for (ui, name) in &code_order {
        let sec = units[*ui].section(name).unwrap();
        rom_cursor = align_up(rom_cursor, sec.align) + u64::from(sec.len());
    }
    let code_end = rom_cursor;
    let mut rom_data_floor = rom_near_floor;
    for kind in [SectionKind::ROData, SectionKind::Data, SectionKind::Bss] {
        for p in pieces
            .iter_mut()
            .filter(|p| p.kind == kind && p.window.is_none())
        {
            if kind == SectionKind::ROData {
                let at = align_phase(rom_cursor, p.align, p.start);
                rom_data_floor = rom_data_floor.min(at);
                p.addr = at as u32;
                rom_cursor = at + u64::from(p.len);
            } else {
                let at = align_phase(ram_cursor, p.align, p.start);
                p.addr = at as u32;
                ram_cursor = at + u64::from(p.len);
            }
        }
    }
    if rom_cursor > rom_near_floor {
        return Err(LinkError::Overflow {
            region: "ROM",
            needed: rom_cursor - u64::from(map.rom_base) + (rom_end - rom_near_floor),
            available: u64::from(map.rom_size),
        });
    }
    if ram_cursor > map.ram_end() {
        return Err(LinkError::Overflow {
            region: "RAM",
            needed: ram_cursor - ram_base,
            available: u64::from(map.ram_size),
        });
    }

    let mut index: HashMap<(usize, String), Vec<usize>> = HashMap::new();
    for (i, p) in pieces.iter().enumerate() {
        index
            .entry((p.unit, p.section.clone()))
            .or_default()
            .push(i);
    }
    for ids in index.values_mut() {
        ids.sort_by_key(|&i| pieces[i].start);
    }

    Ok(ImagePlan {
        map: *map,
        addressing,
        windows,
        pieces,
        code_order,
        base_inits,
        diagnostics,
        rom_data_floor: rom_data_floor.min(rom_near_floor).max(code_end),
        index,
    })
}

fn read_word(bytes: &[u8], offset: u32) -> u32 {
    let o = offset as usize;
    u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap())
}

fn write_word(bytes: &mut [u8], offset: u32, word: u32) {
    let o = offset as usize;
    bytes[o..o + 4].copy_from_slice(&word.to_le_bytes());
}

/// Rewrites every eligible `lui` + load/store pair into a single access.
///
/// A pair is rewritten when its target lies in a near window and the exact
/// accessed address (symbol plus addend) is reachable from that window's
/// base. The `lui` word is deleted and everything after it in the section
/// moves down by four bytes.
pub fn relax(
    plan: &ImagePlan,
    units: &[ObjectUnit],
) -> Result<(Vec<ObjectUnit>, usize), LinkError> {
    let symbols = Symbols::build(units)?;
    let variant = plan.variant();
    let mut out = units.to_vec();
    let mut total = 0;

    for (ui, unit) in units.iter().enumerate() {
        let mut pairs: BTreeMap<u32, Vec<&Relocation>> = BTreeMap::new();
        for r in &unit.relocations {
            if let Some(id) = r.pair_id {
                pairs.entry(id).or_default().push(r);
            }
        }
        let mut edits: BTreeMap<&str, Vec<Edit>> = BTreeMap::new();
        for members in pairs.values() {
            let [a, b] = members.as_slice() else { continue };
            let (hi, lo) = if a.kind == RelocKind::HI20 {
                (a, b)
            } else {
                (b, a)
            };
            if hi.kind != RelocKind::HI20 || hi.section != lo.section || lo.offset != hi.offset + 4
            {
                continue;
            }
            let sec = unit.section(&hi.section).unwrap();
            if sec.kind != SectionKind::Code {
                continue;
            }
            let target = symbols.lookup(ui, &hi.symbol)?;
            let Some(window) = plan.window_of(target.unit, target.section, target.offset) else {
                continue;
            };
            let Some(sym_addr) = plan.data_addr(target.unit, target.section, target.offset) else {
                continue;
            };
            let addr = i64::from(sym_addr) + i64::from(lo.addend);
            let (min, max) = plan.addressing.domain();
            let offset = addr - i64::from(window.anchor);
            if offset < i64::from(min) || offset > i64::from(max) {
                continue;
            }
            let bytes = sec.bytes();
            let (Ok(lui), Ok(access)) = (
                isa::decode(read_word(&bytes, hi.offset), variant),
                isa::decode(read_word(&bytes, lo.offset), variant),
            ) else {
                continue;
            };
            if lui.mnemonic != Mnemonic::Lui || access.rs1 != lui.rd || lui.rd == Reg::ZERO {
                continue;
            }
            let Some(near) = access.mnemonic.near_form() else {
                continue;
            };
            let is_store = access.mnemonic.is_store();
            let (word, reloc) = match plan.addressing {
                Addressing::Near(v) => {
                    let ins = if is_store {
                        Instruction::near_store(near, access.rs2, 0, window.base_select)
                    } else {
                        Instruction::near_load(near, access.rd, 0, window.base_select)
                    };
                    let word =
                        isa::encode(&ins, v).map_err(|e| LinkError::Internal(e.to_string()))?;
                    let reloc = Relocation {
                        section: hi.section.clone(),
                        offset: lo.offset,
                        kind: if is_store {
                            RelocKind::NEAR_S
                        } else {
                            RelocKind::NEAR_I
                        },
                        symbol: lo.symbol.clone(),
                        addend: lo.addend,
                        pair_id: None,
                    };
                    (word, Some(reloc))
                }
                Addressing::Gp12 => {
                    let mut ins = access;
                    ins.rs1 = Reg::GP;
                    ins.imm = offset as i32;
                    let word = isa::encode(&ins, variant)
                        .map_err(|e| LinkError::Internal(e.to_string()))?;
                    (word, None)
                }
            };
            edits
                .entry(&hi.section)
                .or_default()
                .push((hi.offset, word, reloc));
        }

        let new_unit = &mut out[ui];
        for (section, mut list) in edits {
            list.sort_by_key(|e| e.0);
            total += list.len();
            let deleted: Vec<u32> = list.iter().map(|e| e.0).collect();
            let removed = |off: u32| 4 * deleted.partition_point(|&d| d < off) as u32;
            let shift = |off: u32| off - removed(off);

            let sec = new_unit
                .sections
                .iter_mut()
                .find(|s| s.name == section)
                .unwrap();
            let Contents::Bytes(old) = &sec.contents else {
                unreachable!("code is never BSS")
            };
            let mut bytes = old.clone();
            for (lui_off, word, _) in &list {
                write_word(&mut bytes, lui_off + 4, *word);
            }
            fix_numeric_branches(
                &mut bytes,
                &deleted,
                &new_unit.relocations,
                section,
                variant,
            )?;
            let mut kept = Vec::with_capacity(bytes.len());
            for (i, chunk) in bytes.chunks(4).enumerate() {
                if deleted.binary_search(&(4 * i as u32)).is_err() {
                    kept.extend_from_slice(chunk);
                }
            }
            sec.contents = Contents::Bytes(kept);

            let lo_sites: HashMap<u32, &Option<Relocation>> =
                list.iter().map(|(o, _, r)| (o + 4, r)).collect();
            let mut relocs = Vec::with_capacity(new_unit.relocations.len());
            for r in std::mem::take(&mut new_unit.relocations) {
                if r.section != section {
                    relocs.push(r);
                    continue;
                }
                if r.pair_id.is_some() && deleted.binary_search(&r.offset).is_ok() {
                    continue;
                }
                if let Some(replacement) = lo_sites.get(&r.offset).filter(|_| r.pair_id.is_some()) {
                    if let Some(mut n) = (*replacement).clone() {
                        n.offset = shift(n.offset);
                        relocs.push(n);
                    }
                    continue;
                }
                relocs.push(Relocation {
                    offset: shift(r.offset),
                    ..r
                });
            }
            new_unit.relocations = relocs;
            for s in new_unit
                .symbols
                .iter_mut()
                .filter(|s| s.section.as_deref() == Some(section))
            {
                let end = s.offset + s.size;
                let new_off = shift(s.offset);
                s.size = shift(end) - new_off;
                s.offset = new_off;
            }
        }
        new_unit.canonicalize();
    }
    Ok((out, total))
}

/// Re-targets branches and jumps that carry a literal offset within the section.
fn fix_numeric_branches(
    bytes: &mut [u8],
    deleted: &[u32],
    relocs: &[Relocation],
    section: &str,
    variant: EncodingVariant,
) -> Result<(), LinkError> {
    let removed = |off: u32| 4 * deleted.partition_point(|&d| d < off) as i64;
    for at in (0..bytes.len() as u32).step_by(4) {
        if relocs
            .iter()
            .any(|r| r.section == section && r.offset == at)
        {
            continue;
        }
        let Ok(mut ins) = isa::decode(read_word(bytes, at), variant) else {
            continue;
        };
        if !matches!(ins.mnemonic.format(), Format::B | Format::J) {
            continue;
        }
        let target = i64::from(at) + i64::from(ins.imm);
        if target < 0 || target > bytes.len() as i64 {
            continue;
        }
        let new_imm = (target - removed(target as u32)) - (i64::from(at) - removed(at));
        if new_imm != i64::from(ins.imm) {
            ins.imm = new_imm as i32;
            let word = isa::encode(&ins, variant)
                .map_err(|e| LinkError::Internal(format!("shifted branch at +{at}: {e}")))?;
            write_word(bytes, at, word);
        }
    }
    Ok(())
}

/// Places code, patches every relocation and produces the final image.
pub fn resolve(plan: &ImagePlan, units: &[ObjectUnit]) -> Result<Image, LinkError> {
    let symbols = Symbols::build(units)?;
    let variant = plan.variant();

    let mut code_addr: HashMap<(usize, &str), u32> = HashMap::new();
    let mut cursor = u64::from(plan.map.rom_base);
    let mut code_size = 0u32;
    for (ui, name) in &plan.code_order {
        let sec = units[*ui]
            .section(name)
            .ok_or_else(|| LinkError::Internal(format!("code section {name} disappeared")))?;
        let at = align_up(cursor, sec.align);
        code_addr.insert((*ui, name.as_str()), at as u32);
        cursor = at + u64::from(sec.len());
        code_size += sec.len();
    }
    if cursor > plan.rom_data_floor {
        return Err(LinkError::Internal("code grew into read-only data".into()));
    }

    let addr_of = |unit: usize, section: &str, offset: u32| -> Option<u32> {
        match code_addr.get(&(unit, section)) {
            Some(base) => Some(base + offset),
            None => plan.data_addr(unit, section, offset),
        }
    };

    // Materialize contents per section, then patch.
    let mut contents: HashMap<(usize, &str), Vec<u8>> = HashMap::new();
    for (ui, u) in units.iter().enumerate() {
        for s in &u.sections {
            contents.insert((ui, s.name.as_str()), s.bytes().into_owned());
        }
    }
    for (ui, u) in units.iter().enumerate() {
        for r in &u.relocations {
            let target = symbols.lookup(ui, &r.symbol)?;
            let s = addr_of(target.unit, target.section, target.offset)
                .ok_or_else(|| LinkError::Internal(format!("no address for `{}`", r.symbol)))?;
            let site = addr_of(ui, &r.section, r.offset).ok_or_else(|| {
                LinkError::Internal(format!("no address for site in {}", r.section))
            })?;
            let value = s.wrapping_add(r.addend as u32);
            let out_of_range = |v: i64| LinkError::RelocOutOfRange {
                kind: r.kind,
                symbol: r.symbol.clone(),
                site,
                value: v,
            };
            let bytes = contents.get_mut(&(ui, r.section.as_str())).unwrap();
            let word = read_word(bytes, r.offset);
            let patched = match r.kind {
                RelocKind::HI20 => isa::with_u_imm(word, crate::asm::split_hi_lo(value).0),
                RelocKind::LO12_I => isa::with_i_imm(word, crate::asm::split_hi_lo(value).1),
                RelocKind::LO12_S => isa::with_s_imm(word, crate::asm::split_hi_lo(value).1),
                RelocKind::NEAR_I | RelocKind::NEAR_S => {
                    let Addressing::Near(v) = plan.addressing else {
                        return Err(out_of_range(i64::from(value)));
                    };
                    let window = plan
                        .window_of(target.unit, target.section, target.offset)
                        .ok_or_else(|| out_of_range(i64::from(value)))?;
                    let off = i64::from(s) + i64::from(r.addend) - i64::from(window.anchor);
                    let (min, max) = isa::near_offset_domain(v);
                    if off < i64::from(min) || off > i64::from(max) {
                        return Err(out_of_range(off));
                    }
                    isa::with_near_imm(
                        word,
                        off as i32,
                        v,
                        window.base_select,
                        r.kind == RelocKind::NEAR_S,
                    )
                }
                RelocKind::BR13 | RelocKind::JAL21 => {
                    let off = i64::from(s) + i64::from(r.addend) - i64::from(site);
                    let bits = if r.kind == RelocKind::BR13 { 13 } else { 21 };
                    let limit = 1i64 << (bits - 1);
                    if off % 2 != 0 || off < -limit || off >= limit {
                        return Err(out_of_range(off));
                    }
                    if r.kind == RelocKind::BR13 {
                        isa::with_b_imm(word, off as i32)
                    } else {
                        isa::with_j_imm(word, off as i32)
                    }
                }
                RelocKind::ABS32 => value,
            };
            write_word(bytes, r.offset, patched);
        }
    }

    // Collect placed byte ranges and merge neighbours separated only by padding.
    let mut chunks: Vec<(u32, Cow<'_, [u8]>)> = Vec::new();
    for (ui, name) in &plan.code_order {
        chunks.push((
            code_addr[&(*ui, name.as_str())],
            Cow::Borrowed(&contents[&(*ui, name.as_str())]),
        ));
    }
    for p in &plan.pieces {
        let bytes = &contents[&(p.unit, p.section.as_str())];
        chunks.push((
            p.addr,
            Cow::Borrowed(&bytes[p.start as usize..(p.start + p.len) as usize]),
        ));
    }
    chunks.retain(|(_, b)| !b.is_empty());
    chunks.sort_by_key(|(a, _)| *a);
    let mut blobs: Vec<Blob> = Vec::new();
    for (addr, bytes) in chunks {
        match blobs.last_mut() {
            Some(last) if last.end() <= u64::from(addr) && u64::from(addr) - last.end() < 64 => {
                let gap = (u64::from(addr) - last.end()) as usize;
                last.bytes.resize(last.bytes.len() + gap, 0);
                last.bytes.extend_from_slice(&bytes);
            }
            Some(last) if last.end() > u64::from(addr) => {
                return Err(LinkError::Internal(format!(
                    "overlapping placement at 0x{addr:08x}"
                )));
            }
            _ => blobs.push(Blob {
                addr,
                bytes: bytes.into_owned(),
            }),
        }
    }

    let mut image_symbols = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for u in units {
        for s in u.symbols.iter().filter(|s| s.is_defined()) {
            *seen.entry(&s.name).or_default() += 1;
        }
    }
    for (ui, u) in units.iter().enumerate() {
        for s in u.symbols.iter().filter(|s| s.is_defined()) {
            let sec = s.section.as_deref().unwrap();
            let kind = u.section(sec).unwrap().kind;
            let name = if seen[s.name.as_str()] > 1 && s.scope == Scope::Local {
                format!("{}@{ui}", s.name)
            } else {
                s.name.clone()
            };
            image_symbols.push(ImageSymbol {
                name,
                addr: addr_of(ui, sec, s.offset).unwrap(),
                size: s.size,
                kind,
            });
        }
    }
    image_symbols.sort_by(|a, b| (a.addr, &a.name).cmp(&(b.addr, &b.name)));

    let entry = match symbols.globals.get("_start") {
        Some(_) => {
            let t = symbols.lookup(0, "_start")?;
            addr_of(t.unit, t.section, t.offset).unwrap()
        }
        None => plan.map.rom_base,
    };

    let mut code: Vec<(u32, u32)> = plan
        .code_order
        .iter()
        .map(|(ui, n)| {
            (
                code_addr[&(*ui, n.as_str())],
                units[*ui].section(n).unwrap().len(),
            )
        })
        .filter(|(_, l)| *l > 0)
        .collect();
    code.sort();

    Ok(Image {
        variant,
        entry,
        regs: plan.base_inits.clone(),
        code,
        symbols: image_symbols,
        blobs,
        code_size_bytes: code_size,
    })
}

fn finish(
    plan: ImagePlan,
    units: &[ObjectUnit],
    do_relax: bool,
) -> Result<(Image, LinkStats), LinkError> {
    let (relaxed, relax_count) = if do_relax {
        let (u, n) = relax(&plan, units)?;
        (Cow::Owned(u), n)
    } else {
        (Cow::Borrowed(units), 0)
    };
    let image = resolve(&plan, &relaxed).map_err(|e| match e {
        LinkError::RelocOutOfRange {
            kind: kind @ (RelocKind::BR13 | RelocKind::JAL21),
            symbol,
            value,
            ..
        } if do_relax => LinkError::Internal(format!(
            "{kind} to `{symbol}` out of range ({value}) after relaxation"
        )),
        e => e,
    })?;
    let stats = LinkStats {
        code_size_bytes: image.code_size_bytes,
        relax_count,
        windows: plan.windows.clone(),
        diagnostics: plan.diagnostics.clone(),
    };
    Ok((image, stats))
}

/// Full link: layout, optional relaxation, resolution.
pub fn link(
    units: &[ObjectUnit],
    map: &MemoryMap,
    policy: &NearPolicy,
    do_relax: bool,
) -> Result<(Image, LinkStats), LinkError> {
    finish(layout(units, map, policy)?, units, do_relax)
}

/// Link using classic 12-bit `gp`-relative relaxation of RAM data only.
pub fn link_gp12(
    units: &[ObjectUnit],
    map: &MemoryMap,
    threshold: u32,
) -> Result<(Image, LinkStats), LinkError> {
    let plan = layout_with(units, map, Addressing::Gp12, threshold, true, false)?;
    finish(plan, units, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;

    const S: EncodingVariant = EncodingVariant::SingleRange128K;
    const D: EncodingVariant = EncodingVariant::DualRange64K;

    fn policy(
        variant: EncodingVariant,
        threshold: u32,
        near_ram: bool,
        near_rom: bool,
    ) -> NearPolicy {
        NearPolicy {
            variant,
            threshold,
            near_ram,
            near_rom,
        }
    }

    fn near_names(plan: &ImagePlan, unit: &ObjectUnit) -> Vec<String> {
        let mut v: Vec<_> = unit
            .symbols
            .iter()
            .filter(|s| {
                s.is_defined()
                    && plan
                        .window_of(0, s.section.as_deref().unwrap(), s.offset)
                        .is_some()
            })
            .map(|s| s.name.clone())
            .collect();
        v.sort();
        v
    }

    #[test]
    fn threshold_selects_small_symbols() {
        let src = ".data\na: .space 4\nb: .space 8\nc: .space 200\n";
        let u = assemble(src, S).unwrap();
        let plan = layout(
            std::slice::from_ref(&u),
            &MemoryMap::CONTIGUOUS,
            &policy(S, 64, true, false),
        )
        .unwrap();
        assert_eq!(near_names(&plan, &u), vec!["a", "b"]);
        assert_eq!(
            plan.base_inits,
            vec![(Reg::GP, MemoryMap::CONTIGUOUS.ram_base + 65536)]
        );
    }

    #[test]
    fn window_capacity() {
        // 40000 four-byte symbols; the 128 KB window holds exactly 32768 of them.
        let mut src = String::from(".bss\n");
        for i in 0..40000 {
            src.push_str(&format!("v{i:05}: .space 4\n"));
        }
        let u = assemble(&src, S).unwrap();
        let plan = layout(
            std::slice::from_ref(&u),
            &MemoryMap::CONTIGUOUS,
            &policy(S, 64, true, false),
        )
        .unwrap();
        let near = near_names(&plan, &u);
        assert_eq!(near.len(), 32768);
        assert_eq!(near.first().unwrap(), "v00000");
        assert_eq!(near.last().unwrap(), "v32767");
        assert_eq!(plan.windows[0].used, 131072);
    }

    #[test]
    fn rom_gate() {
        let src = ".rodata\nk: .word 5\n.data\nv: .word 1\n";
        let u = assemble(src, S).unwrap();
        for map in [MemoryMap::CONTIGUOUS, MemoryMap::FRAGMENTED] {
            let plan = layout(std::slice::from_ref(&u), &map, &policy(S, 64, true, false)).unwrap();
            assert_eq!(near_names(&plan, &u), vec!["v"]);
        }
        // Single on a fragmented map leaves ROM data far and says so.
        let plan = layout(
            std::slice::from_ref(&u),
            &MemoryMap::FRAGMENTED,
            &policy(S, 64, true, true),
        )
        .unwrap();
        assert_eq!(near_names(&plan, &u), vec!["v"]);
        assert_eq!(plan.diagnostics.len(), 1);
        let plan = layout(
            std::slice::from_ref(&u),
            &MemoryMap::CONTIGUOUS,
            &policy(S, 64, true, true),
        )
        .unwrap();
        assert_eq!(near_names(&plan, &u), vec!["k", "v"]);
        assert_eq!(plan.windows[0].region, WindowRegion::Shared);
        // Dual places ROM data in its own t1 window on either map.
        let plan = layout(
            std::slice::from_ref(&u),
            &MemoryMap::FRAGMENTED,
            &policy(D, 64, true, true),
        )
        .unwrap();
        assert_eq!(near_names(&plan, &u), vec!["k", "v"]);
        let regs: Vec<_> = plan.base_inits.iter().map(|(r, _)| *r).collect();
        assert_eq!(regs, vec![Reg::T0, Reg::T1]);
    }

    #[test]
    fn relax_one_pair() {
        let src = ".data\ng: .word 7\n.text\n_start: lw a0, g\nebreak\n";
        let u = assemble(src, S).unwrap();
        let (base, s0) = link(
            std::slice::from_ref(&u),
            &MemoryMap::CONTIGUOUS,
            &policy(S, 64, true, false),
            false,
        )
        .unwrap();
        let (relaxed, s1) = link(
            &[u],
            &MemoryMap::CONTIGUOUS,
            &policy(S, 64, true, false),
            true,
        )
        .unwrap();
        assert_eq!(s0.relax_count, 0);
        assert_eq!(s1.relax_count, 1);
        assert_eq!(base.code_size_bytes, 12);
        assert_eq!(relaxed.code_size_bytes, 8);
        let w = relaxed.word_at(relaxed.entry).unwrap();
        let ins = isa::decode(w, S).unwrap();
        assert_eq!(ins.mnemonic, Mnemonic::Nlw);
        let g = relaxed.symbol("g").unwrap().addr;
        assert_eq!(
            g as i64 - i64::from(relaxed.reg(Reg::GP).unwrap()),
            i64::from(ins.imm)
        );
    }

    #[test]
    fn la_is_never_relaxed() {
        let src = ".data\ng: .word 7\n.text\nla a0, g\nlw a1, 0(a0)\nebreak\n";
        let u = assemble(src, S).unwrap();
        let (_, stats) = link(
            &[u],
            &MemoryMap::CONTIGUOUS,
            &policy(S, 64, true, false),
            true,
        )
        .unwrap();
        assert_eq!(stats.relax_count, 0);
    }

    #[test]
    fn out_of_window_access_untouched() {
        // g sits at the bottom of the window (gp - 65536); the first access
        // lands 70000 bytes past gp.
        let src = ".data\ng: .word 7\n.text\nlw a0, g+135536\nlw a1, g\nebreak\n";
        let u = assemble(src, S).unwrap();
        let (_, stats) = link(
            &[u],
            &MemoryMap::CONTIGUOUS,
            &policy(S, 64, true, false),
            true,
        )
        .unwrap();
        assert_eq!(stats.relax_count, 1);
    }

    #[test]
    fn hi_lo_rounding() {
        assert_eq!(crate::asm::split_hi_lo(0x8000_0800), (0x80001, -2048));
        for addr in [0u32, 0x7FF, 0x800, 0xFFFF_F800, 0xFFFF_FFFF, 0x1234_5678] {
            let (hi, lo) = crate::asm::split_hi_lo(addr);
            assert_eq!((hi << 12).wrapping_add(lo as u32), addr);
            assert!((-2048..=2047).contains(&lo));
        }
    }

    #[test]
    fn misaligned_branch_target_rejected() {
        let src = "beq a0, a1, L+1\nL: ebreak\n";
        let u = assemble(src, S).unwrap();
        let err = link(
            &[u],
            &MemoryMap::CONTIGUOUS,
            &policy(S, 0, false, false),
            false,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            LinkError::RelocOutOfRange {
                kind: RelocKind::BR13,
                ..
            }
        ));
    }

    #[test]
    fn near_reloc_below_gp() {
        // Single ROM-only window on a contiguous map: k sits at the very top of
        // ROM, below the anchor.
        let src = ".rodata\nk: .word 5\n.text\nnlw a0, k\nebreak\n";
        let u = assemble(src, S).unwrap();
        let (img, _) = link(
            &[u],
            &MemoryMap::CONTIGUOUS,
            &policy(S, 64, false, true),
            false,
        )
        .unwrap();
        let ins = isa::decode(img.word_at(img.entry).unwrap(), S).unwrap();
        let k = img.symbol("k").unwrap().addr;
        assert_eq!(
            i64::from(k) - i64::from(img.reg(Reg::GP).unwrap()),
            i64::from(ins.imm)
        );
        assert!(ins.imm < 0);
    }

    #[test]
    fn near_reloc_requires_window() {
        let src = ".data\nv: .space 256\n.text\nnlw a0, v\n";
        let u = assemble(src, S).unwrap();
        let err = link(
            &[u],
            &MemoryMap::CONTIGUOUS,
            &policy(S, 64, true, false),
            false,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            LinkError::RelocOutOfRange {
                kind: RelocKind::NEAR_I,
                ..
            }
        ));
    }

    #[test]
    fn duplicate_global_conflicts() {
        let a = assemble(".global f\nf: ebreak\n", S).unwrap();
        let err = link(
            &[a.clone(), a],
            &MemoryMap::CONTIGUOUS,
            &policy(S, 0, true, false),
            false,
        )
        .unwrap_err();
        assert!(matches!(err, LinkError::Conflict(name) if name == "f"));
    }

    #[test]
    fn cross_unit_reference() {
        let a = assemble(
            ".global _start\n.global counter\n_start: lw a0, counter\nebreak\n",
            S,
        )
        .unwrap();
        let b = assemble(".global counter\n.data\ncounter: .word 3\n", S).unwrap();
        let (img, stats) = link(
            &[a, b],
            &MemoryMap::CONTIGUOUS,
            &policy(S, 16, true, false),
            true,
        )
        .unwrap();
        assert_eq!(stats.relax_count, 1);
        assert_eq!(img.code_size_bytes, 8);
    }

    #[test]
    fn overflow_reported() {
        let map = MemoryMap {
            ram_size: 16,
            ..MemoryMap::FRAGMENTED
        };
        let u = assemble(".data\nbig: .space 64\n", S).unwrap();
        let err = link(&[u], &map, &policy(S, 0, true, false), false).unwrap_err();
        assert!(matches!(err, LinkError::Overflow { region: "RAM", .. }));
    }

    #[test]
    fn numeric_branch_retargeted() {
        let src = ".data\ng: .word 1\n.text\nbeq zero, zero, 12\nlw a0, g\nebreak\nebreak\n";
        let u = assemble(src, S).unwrap();
        let (img, stats) = link(
            &[u],
            &MemoryMap::CONTIGUOUS,
            &policy(S, 64, true, false),
            true,
        )
        .unwrap();
        assert_eq!(stats.relax_count, 1);
        let b = isa::decode(img.word_at(img.entry).unwrap(), S).unwrap();
        assert_eq!(b.imm, 8);
    }

    #[test]
    fn far_pieces_keep_alignment() {
        // Pulling `b` out leaves a gap piece starting at an odd offset.
        let src = ".data\na: .word 1\nb: .byte 2\n.align 2\nc: .space 16\n.size c, 16\n";
        let u = assemble(src, S).unwrap();
        let (img, _) = link(
            &[u],
            &MemoryMap::CONTIGUOUS,
            &policy(S, 1, true, false),
            false,
        )
        .unwrap();
        assert_eq!(img.symbol("c").unwrap().addr % 4, 0);
        assert_eq!(img.symbol("a").unwrap().addr % 4, 0);
    }

    #[test]
    fn config_file() {
        let text =
            "rom_base=0x80000000\nrom_size=0x100000\nram_base=0x80100000\nram_size=0x100000\n\
                    contiguous=true\nvariant=dual\nthreshold=32\nnear_ram=true\nnear_rom=true\n";
        let (map, pol) = parse_link_config(text).unwrap();
        assert_eq!(map, MemoryMap::CONTIGUOUS);
        assert_eq!(pol, policy(D, 32, true, true));
        assert!(parse_link_config("rom_base=0\n").is_err());
        let bad = text.replace("ram_base=0x80100000", "ram_base=0x90000000");
        assert!(matches!(parse_link_config(&bad), Err(LinkError::Config(_))));
    }
}
