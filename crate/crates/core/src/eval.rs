//! Synthetic workloads, the policy-matrix experiment runner and size reports.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::asm::{assemble, AsmError};
use crate::config::{ConfigError, ConfigValue, KeyValues};
use crate::emu::{load_image, LoadError, MachineState, Outcome};
use crate::image::Image;
use crate::isa::EncodingVariant;
use crate::link::{link, link_gp12, LinkError, LinkStats, MemoryMap, NearPolicy};
use crate::object::SectionKind;

/// Upper bound on emulated steps per configuration.
pub const MAX_STEPS: u64 = 50_000_000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid workload spec: {0}")]
    Spec(String),
    #[error("generated workload failed to assemble: {0}")]
    Asm(#[from] AsmError),
    #[error("{config}: {source}")]
    Link { config: String, source: LinkError },
    #[error("{config}: {source}")]
    Load { config: String, source: LoadError },
    #[error("{config}: program did not halt ({outcome})")]
    Run { config: String, outcome: String },
    #[error("semantics mismatch in {config}: {detail}")]
    SemanticsMismatch { config: String, detail: String },
}

impl From<ConfigError> for EvalError {
    fn from(e: ConfigError) -> Self {
        EvalError::Spec(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessStyle {
    /// `la` the aggregate once, then member offsets from that register.
    ViaBasePointer,
    /// One symbolic access per member (`lw rd, agg+off`).
    DirectMember,
}

impl FromStr for AccessStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "via_base_pointer" | "base" => Ok(AccessStyle::ViaBasePointer),
            "direct_member" | "direct" => Ok(AccessStyle::DirectMember),
            other => Err(format!(
                "unknown access style `{other}` (expected via_base_pointer or direct_member)"
            )),
        }
    }
}

impl fmt::Display for AccessStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessStyle::ViaBasePointer => "via_base_pointer",
            AccessStyle::DirectMember => "direct_member",
        })
    }
}

impl ConfigValue for AccessStyle {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub name: String,
    pub scalar_count: u32,
    pub aggregate_count: u32,
    /// Four-byte fields per aggregate.
    pub aggregate_fields: u32,
    /// `(size in bytes, weight)`.
    pub scalar_size_dist: Vec<(u32, u32)>,
    pub rodata_fraction: f64,
    pub accesses_per_symbol: u32,
    pub aggregate_access_style: AccessStyle,
    /// Register-only ALU instructions emitted after each access.
    pub filler_ops: u32,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            name: "workload".into(),
            scalar_count: 0,
            aggregate_count: 0,
            aggregate_fields: 4,
            scalar_size_dist: vec![(4, 1)],
            rodata_fraction: 0.0,
            accesses_per_symbol: 1,
            aggregate_access_style: AccessStyle::ViaBasePointer,
            filler_ops: 0,
            seed: 1,
        }
    }
}

fn parse_dist(s: &str) -> Result<Vec<(u32, u32)>, String> {
    s.split(',')
        .map(|item| {
            let (size, weight) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| format!("expected size:weight, found `{item}`"))?;
            let size = size
                .trim()
                .parse()
                .map_err(|e| format!("size `{size}`: {e}"))?;
            let weight = weight
                .trim()
                .parse()
                .map_err(|e| format!("weight `{weight}`: {e}"))?;
            Ok((size, weight))
        })
        .collect()
}

impl WorkloadSpec {
    /// Parses a `key=value` workload file; absent keys take their defaults.
    pub fn parse(text: &str) -> Result<WorkloadSpec, EvalError> {
        let kv = KeyValues::parse(text)?;
        kv.only(&[
            "name",
            "scalar_count",
            "aggregate_count",
            "aggregate_fields",
            "scalar_size_dist",
            "rodata_fraction",
            "accesses_per_symbol",
            "aggregate_access_style",
            "filler_ops",
            "seed",
        ])?;
        let d = WorkloadSpec::default();
        let spec = WorkloadSpec {
            name: kv.get_or("name", d.name)?,
            scalar_count: kv.get_or("scalar_count", d.scalar_count)?,
            aggregate_count: kv.get_or("aggregate_count", d.aggregate_count)?,
            aggregate_fields: kv.get_or("aggregate_fields", d.aggregate_fields)?,
            scalar_size_dist: match kv.raw("scalar_size_dist") {
                Some(v) => {
                    parse_dist(v).map_err(|m| EvalError::Spec(format!("scalar_size_dist: {m}")))?
                }
                None => d.scalar_size_dist,
            },
            rodata_fraction: kv.get_or("rodata_fraction", d.rodata_fraction)?,
            accesses_per_symbol: kv.get_or("accesses_per_symbol", d.accesses_per_symbol)?,
            aggregate_access_style: kv
                .get_or("aggregate_access_style", d.aggregate_access_style)?,
            filler_ops: kv.get_or("filler_ops", d.filler_ops)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let dist: Vec<String> = self
            .scalar_size_dist
            .iter()
            .map(|(s, w)| format!("{s}:{w}"))
            .collect();
        format!(
            "name={}\nscalar_count={}\naggregate_count={}\naggregate_fields={}\nscalar_size_dist={}\n\
             rodata_fraction={}\naccesses_per_symbol={}\naggregate_access_style={}\nfiller_ops={}\nseed={}\n",
            self.name,
            self.scalar_count,
            self.aggregate_count,
            self.aggregate_fields,
            dist.join(","),
            self.rodata_fraction,
            self.accesses_per_symbol,
            self.aggregate_access_style,
            self.filler_ops,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Spec(m.to_string()));
        if self.name.is_empty() || self.name.contains(char::is_whitespace) {
            return bad("name must be a non-empty word");
        }
        if !(0.0..=1.0).contains(&self.rodata_fraction) {
            return bad("rodata_fraction must lie in [0, 1]");
        }
        if self.scalar_count > 0 && self.scalar_size_dist.is_empty() {
            return bad("scalar_size_dist is empty");
        }
        if self.scalar_size_dist.iter().any(|&(s, w)| s == 0 || w == 0) {
            return bad("scalar sizes and weights must be positive");
        }
        if self.aggregate_count > 0 && self.aggregate_fields == 0 {
            return bad("aggregates need at least one field");
        }
        Ok(())
    }
}

fn pick_size(dist: &[(u32, u32)], rng: &mut ChaCha8Rng) -> u32 {
    let total: u32 = dist.iter().map(|d| d.1).sum();
    let mut r = rng.gen_range(0..total);
    for &(size, weight) in dist {
        if r < weight {
            return size;
        }
        r -= weight;
    }
    unreachable!("weights sum to total")
}

fn emit_filler(block: &mut String, n: u32, rng: &mut ChaCha8Rng) {
    for _ in 0..n {
        let k: i32 = rng.gen_range(-512..512);
        match rng.gen_range(0..3) {
            0 => writeln!(block, "    addi s1, s1, {k}").unwrap(),
            1 => writeln!(block, "    xori s1, s1, {k}").unwrap(),
            _ => writeln!(block, "    add s1, s1, s0").unwrap(),
        }
    }
}

struct Var {
    name: String,
    size: u32,
    rodata: bool,
}

/// Emits a deterministic straight-line program for `spec`.
///
/// RAM symbols alternate load and store accesses; read-only symbols are only
/// loaded. Loaded values accumulate into `s0`, which is stored to `checksum`
/// before the final `ebreak`.
pub fn gen_workload(spec: &WorkloadSpec) -> Result<String, EvalError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let total = spec.scalar_count + spec.aggregate_count;
    let ro_count = (f64::from(total) * spec.rodata_fraction).round() as u32;
    let mut ro_flags: Vec<bool> = (0..total).map(|i| i < ro_count).collect();
    ro_flags.shuffle(&mut rng);

    let scalars: Vec<Var> = (0..spec.scalar_count)
        .map(|i| Var {
            name: format!("var{i}"),
            size: pick_size(&spec.scalar_size_dist, &mut rng),
            rodata: ro_flags[i as usize],
        })
        .collect();
    let aggregates: Vec<Var> = (0..spec.aggregate_count)
        .map(|i| Var {
            name: format!("agg{i}"),
            size: 4 * spec.aggregate_fields,
            rodata: ro_flags[(spec.scalar_count + i) as usize],
        })
        .collect();

    let mut data = String::new();
    let mut rodata = String::new();
    let mut bss = String::new();
    for v in scalars.iter().chain(&aggregates) {
        let align = v.size.min(4).next_power_of_two().trailing_zeros();
        let in_bss = !v.rodata && rng.gen_ratio(1, 4);
        let out = if v.rodata {
            &mut rodata
        } else if in_bss {
            &mut bss
        } else {
            &mut data
        };
        writeln!(out, ".align {align}\n{}:", v.name).unwrap();
        if in_bss {
            writeln!(out, "    .space {}", v.size).unwrap();
        } else {
            let bytes: Vec<String> = (0..v.size).map(|_| rng.gen::<u8>().to_string()).collect();
            for chunk in bytes.chunks(16) {
                writeln!(out, "    .byte {}", chunk.join(", ")).unwrap();
            }
        }
        writeln!(out, ".size {}, {}", v.name, v.size).unwrap();
    }

    let mut blocks: Vec<String> = Vec::new();
    let access =
        |block: &mut String, v: &Var, target: String, width: u32, j: u32, rng: &mut ChaCha8Rng| {
            let store = !v.rodata && j % 2 == 1;
            let (load, st) = match width {
                1 => (if rng.gen() { "lb" } else { "lbu" }, "sb"),
                2 => (if rng.gen() { "lh" } else { "lhu" }, "sh"),
                _ => ("lw", "sw"),
            };
            if store {
                writeln!(block, "    addi a1, s0, {}", rng.gen_range(-2048..2048)).unwrap();
                writeln!(block, "    {st} a1, {target}").unwrap();
            } else {
                writeln!(block, "    {load} a0, {target}").unwrap();
                writeln!(block, "    add s0, s0, a0").unwrap();
            }
        };
    for v in &scalars {
        for j in 0..spec.accesses_per_symbol {
            let width = v
                .size
                .min(4)
                .next_power_of_two()
                .min(v.size.next_power_of_two());
            let width = if v.size % width == 0 { width } else { 1 };
            let slots = v.size / width;
            let off = width * rng.gen_range(0..slots);
            let target = if off == 0 {
                v.name.clone()
            } else {
                format!("{}+{off}", v.name)
            };
            let target = if !v.rodata && j % 2 == 1 {
                format!("{target}, t2")
            } else {
                target
            };
            let mut block = String::new();
            access(&mut block, v, target, width, j, &mut rng);
            emit_filler(&mut block, spec.filler_ops, &mut rng);
            blocks.push(block);
        }
    }
    for v in &aggregates {
        match spec.aggregate_access_style {
            AccessStyle::ViaBasePointer => {
                let mut members = Vec::new();
                for f in 0..spec.aggregate_fields {
                    for j in 0..spec.accesses_per_symbol {
                        members.push((f, j));
                    }
                }
                members.shuffle(&mut rng);
                let mut block = format!("    la a2, {}\n", v.name);
                for (f, j) in members {
                    if !v.rodata && j % 2 == 1 {
                        writeln!(block, "    addi a1, s0, {}", rng.gen_range(-2048..2048)).unwrap();
                        writeln!(block, "    sw a1, {}(a2)", 4 * f).unwrap();
                    } else {
                        writeln!(block, "    lw a0, {}(a2)", 4 * f).unwrap();
                        writeln!(block, "    add s0, s0, a0").unwrap();
                    }
                    emit_filler(&mut block, spec.filler_ops, &mut rng);
                }
                blocks.push(block);
            }
            AccessStyle::DirectMember => {
                for f in 0..spec.aggregate_fields {
                    for j in 0..spec.accesses_per_symbol {
                        let mut target = format!("{}+{}", v.name, 4 * f);
                        if !v.rodata && j % 2 == 1 {
                            target.push_str(", t2");
                        }
                        let mut block = String::new();
                        access(&mut block, v, target, 4, j, &mut rng);
                        emit_filler(&mut block, spec.filler_ops, &mut rng);
                        blocks.push(block);
                    }
                }
            }
        }
    }
    blocks.shuffle(&mut rng);

    let mut out = format!(
        "# generated workload `{}` (seed {})\n.global _start\n\n.data\n.align 2\nchecksum:\n    .word 0\n.size checksum, 4\n{data}",
        spec.name, spec.seed
    );
    if !rodata.is_empty() {
        write!(out, "\n.rodata\n{rodata}").unwrap();
    }
    if !bss.is_empty() {
        write!(out, "\n.bss\n{bss}").unwrap();
    }
    out.push_str("\n.text\n_start:\n    addi s0, zero, 0\n    addi s1, zero, 0\n");
    for b in blocks {
        out.push_str(&b);
    }
    out.push_str("    add s0, s0, s1\n    la t2, checksum\n    sw s0, 0(t2)\n    ebreak\n");
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// The same link without relaxation.
    NoRelax,
    /// Classic relaxation into a 4 KB `gp` window.
    Gp12Relax,
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::NoRelax => "no-relax",
            BaselineKind::Gp12Relax => "gp12",
        }
    }
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no-relax" | "norelax" | "none" => Ok(BaselineKind::NoRelax),
            "gp12" | "gp" => Ok(BaselineKind::Gp12Relax),
            other => Err(format!(
                "unknown baseline `{other}` (expected no-relax or gp12)"
            )),
        }
    }
}

/// Parses a policy matrix: one policy per line as inline `key=value` pairs.
pub fn parse_matrix(text: &str) -> Result<Vec<NearPolicy>, EvalError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let wrap = |e: ConfigError| EvalError::Spec(format!("matrix line {}: {e}", i + 1));
        let kv = KeyValues::parse_inline(line).map_err(wrap)?;
        kv.only(&["variant", "threshold", "near_ram", "near_rom"])
            .map_err(wrap)?;
        out.push(NearPolicy {
            variant: kv.require("variant").map_err(wrap)?,
            threshold: kv.require("threshold").map_err(wrap)?,
            near_ram: kv.get_or("near_ram", true).map_err(wrap)?,
            near_rom: kv.get_or("near_rom", false).map_err(wrap)?,
        });
    }
    Ok(out)
}

/// RAM-only and RAM & ROM configurations for one variant.
pub fn default_matrix(variant: EncodingVariant, threshold: u32) -> Vec<NearPolicy> {
    [false, true]
        .into_iter()
        .map(|near_rom| NearPolicy {
            variant,
            threshold,
            near_ram: true,
            near_rom,
        })
        .collect()
}

/// Both variants, RAM-only and RAM & ROM.
pub fn full_matrix(threshold: u32) -> Vec<NearPolicy> {
    let mut m = default_matrix(EncodingVariant::SingleRange128K, threshold);
    m.extend(default_matrix(EncodingVariant::DualRange64K, threshold));
    m
}

pub const DEFAULT_THRESHOLD: u32 = 64;

/// Three workloads whose globals span well over 4 KB but fit one 128 KB window.
pub fn table1_analog(seed: u64) -> Vec<WorkloadSpec> {
    let dist = vec![(1, 2), (2, 2), (4, 8), (8, 2), (16, 1)];
    vec![
        WorkloadSpec {
            name: "aggregate-heavy".into(),
            scalar_count: 150,
            aggregate_count: 180,
            aggregate_fields: 12,
            scalar_size_dist: dist.clone(),
            rodata_fraction: 0.2,
            accesses_per_symbol: 2,
            aggregate_access_style: AccessStyle::ViaBasePointer,
            filler_ops: 2,
            seed,
        },
        WorkloadSpec {
            name: "mixed".into(),
            scalar_count: 1200,
            aggregate_count: 80,
            aggregate_fields: 12,
            scalar_size_dist: dist.clone(),
            rodata_fraction: 0.2,
            accesses_per_symbol: 2,
            aggregate_access_style: AccessStyle::ViaBasePointer,
            filler_ops: 2,
            seed: seed + 1,
        },
        WorkloadSpec {
            name: "scalar-heavy".into(),
            scalar_count: 4000,
            aggregate_count: 20,
            aggregate_fields: 8,
            scalar_size_dist: dist,
            rodata_fraction: 0.2,
            accesses_per_symbol: 2,
            aggregate_access_style: AccessStyle::ViaBasePointer,
            filler_ops: 2,
            seed: seed + 2,
        },
    ]
}

/// Seeded variety of small workloads for differential testing.
pub fn corpus(count: u32, base_seed: u64) -> Vec<WorkloadSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    (0..count)
        .map(|i| WorkloadSpec {
            name: format!("corpus{i}"),
            scalar_count: rng.gen_range(0..300),
            aggregate_count: rng.gen_range(0..30),
            aggregate_fields: rng.gen_range(1..20),
            scalar_size_dist: vec![
                (1, rng.gen_range(1..4)),
                (2, rng.gen_range(1..4)),
                (4, 6),
                (8, 1),
                (128, 1),
            ],
            rodata_fraction: f64::from(rng.gen_range(0..=10u32)) / 10.0,
            accesses_per_symbol: rng.gen_range(1..4),
            aggregate_access_style: if rng.gen() {
                AccessStyle::ViaBasePointer
            } else {
                AccessStyle::DirectMember
            },
            filler_ops: rng.gen_range(0..3),
            seed: base_seed.wrapping_mul(1000) + u64::from(i),
        })
        .collect()
}

/// Layout-independent view of a run: stores and final RAM contents keyed by symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub stores: Vec<(String, u32, u32, u32)>,
    pub memory: BTreeMap<String, Vec<u8>>,
}

/// One linked and executed configuration.
#[derive(Debug, Clone)]
pub struct Execution {
    pub image: Image,
    pub stats: LinkStats,
    pub state: MachineState,
    pub outcome: Outcome,
}

impl Execution {
    pub fn instret(&self) -> u64 {
        self.state.instret
    }

    pub fn snapshot(&self) -> Snapshot {
        let mut syms: Vec<_> = self
            .image
            .symbols
            .iter()
            .filter(|s| s.kind != SectionKind::Code && s.size > 0)
            .collect();
        syms.sort_by_key(|s| s.addr);
        let locate = |addr: u32| -> (String, u32) {
            let i = syms.partition_point(|s| s.addr <= addr);
            match i.checked_sub(1).map(|i| syms[i]) {
                Some(s) if addr < s.addr + s.size => (s.name.clone(), addr - s.addr),
                _ => (format!("0x{addr:08x}"), 0),
            }
        };
        let stores = self
            .state
            .store_trace
            .iter()
            .map(|e| {
                let (name, off) = locate(e.addr);
                (name, off, e.width, e.value)
            })
            .collect();
        let memory = syms
            .iter()
            .filter(|s| s.kind != SectionKind::ROData)
            .map(|s| {
                let bytes = (0..s.size)
                    .map(|i| self.state.memory.read_byte(s.addr + i).unwrap_or(0))
                    .collect();
                (s.name.clone(), bytes)
            })
            .collect();
        Snapshot { stores, memory }
    }
}

pub fn config_label(policy: &NearPolicy, relaxed: bool) -> String {
    format!(
        "{} t={} {}{}",
        policy.variant,
        policy.threshold,
        policy.label(),
        if relaxed { "" } else { " (no relax)" }
    )
}

/// Runs an image to completion, requiring a clean halt.
pub fn execute(image: Image, stats: LinkStats, config: &str) -> Result<Execution, EvalError> {
    let mut state = load_image(&image).map_err(|source| EvalError::Load {
        config: config.to_string(),
        source,
    })?;
    let result = state.run(MAX_STEPS);
    if result.outcome != Outcome::Halted {
        return Err(EvalError::Run {
            config: config.to_string(),
            outcome: result.outcome.label(),
        });
    }
    Ok(Execution {
        image,
        stats,
        state,
        outcome: result.outcome,
    })
}

fn link_and_run(
    unit: &crate::object::ObjectUnit,
    map: &MemoryMap,
    policy: &NearPolicy,
    relax: bool,
) -> Result<Execution, EvalError> {
    let config = config_label(policy, relax);
    let (image, stats) =
        link(std::slice::from_ref(unit), map, policy, relax).map_err(|source| EvalError::Link {
            config: config.clone(),
            source,
        })?;
    execute(image, stats, &config)
}

/// Compares two runs; identical layouts must also match byte for byte.
pub fn compare(reference: &Execution, other: &Execution, config: &str) -> Result<(), EvalError> {
    let mismatch = |detail: String| {
        Err(EvalError::SemanticsMismatch {
            config: config.to_string(),
            detail,
        })
    };
    let (a, b) = (reference.snapshot(), other.snapshot());
    if a.stores != b.stores {
        let at = a
            .stores
            .iter()
            .zip(&b.stores)
            .position(|(x, y)| x != y)
            .unwrap_or(a.stores.len().min(b.stores.len()));
        return mismatch(format!(
            "store trace diverges at event {at}: {:?} vs {:?}",
            a.stores.get(at),
            b.stores.get(at)
        ));
    }
    if a.memory != b.memory {
        let name = a
            .memory
            .keys()
            .find(|k| a.memory.get(*k) != b.memory.get(*k));
        return mismatch(format!(
            "final data differs in `{}`",
            name.map_or("?", |n| n.as_str())
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: EncodingVariant,
    pub threshold: u32,
    pub near_ram: bool,
    pub near_rom: bool,
    pub baseline: BaselineKind,
    pub code_size_bytes: u32,
    pub baseline_code_bytes: u32,
    pub relative_pct: f64,
    pub relax_count: usize,
    pub instret: u64,
    pub baseline_instret: u64,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SizeReport {
    pub workload: String,
    pub rows: Vec<ReportRow>,
}

impl SizeReport {
    pub fn find(
        &self,
        variant: EncodingVariant,
        near_ram: bool,
        near_rom: bool,
    ) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.near_ram == near_ram && r.near_rom == near_rom)
    }
}

/// Links and runs every configuration of `matrix` plus its baseline, checks
/// that all of them behave identically, and reports code size relative to
/// the baseline.
pub fn run_experiment(
    spec: &WorkloadSpec,
    map: &MemoryMap,
    matrix: &[NearPolicy],
    baseline: BaselineKind,
) -> Result<SizeReport, EvalError> {
    let text = gen_workload(spec)?;
    let single = assemble(&text, EncodingVariant::SingleRange128K)?;
    let dual = assemble(&text, EncodingVariant::DualRange64K)?;
    let unit_for = |v: EncodingVariant| match v {
        EncodingVariant::SingleRange128K => &single,
        EncodingVariant::DualRange64K => &dual,
    };

    // Everything far, nothing relaxed: the semantic reference.
    let far = NearPolicy {
        variant: EncodingVariant::SingleRange128K,
        threshold: 0,
        near_ram: false,
        near_rom: false,
    };
    let reference = link_and_run(&single, map, &far, false)?;

    let rows = matrix
        .par_iter()
        .map(|policy| -> Result<ReportRow, EvalError> {
            let unit = unit_for(policy.variant);
            let label = config_label(policy, true);
            let relaxed = link_and_run(unit, map, policy, true)?;
            let base = match baseline {
                BaselineKind::NoRelax => link_and_run(unit, map, policy, false)?,
                BaselineKind::Gp12Relax => {
                    let config = format!("gp12 t={}", policy.threshold);
                    let (image, stats) =
                        link_gp12(std::slice::from_ref(unit), map, policy.threshold).map_err(
                            |source| EvalError::Link {
                                config: config.clone(),
                                source,
                            },
                        )?;
                    execute(image, stats, &config)?
                }
            };
            compare(&reference, &relaxed, &label)?;
            compare(&reference, &base, &config_label(policy, false))?;
            if baseline == BaselineKind::NoRelax
                && (relaxed.state.store_trace != base.state.store_trace
                    || relaxed.image.regs != base.image.regs
                    || relaxed.state.x != base.state.x)
            {
                return Err(EvalError::SemanticsMismatch {
                    config: label,
                    detail: "relaxed and unrelaxed runs of the same layout differ".into(),
                });
            }
            let code = relaxed.stats.code_size_bytes;
            let base_code = base.stats.code_size_bytes;
            Ok(ReportRow {
                variant: policy.variant,
                threshold: policy.threshold,
                near_ram: policy.near_ram,
                near_rom: policy.near_rom,
                baseline,
                code_size_bytes: code,
                baseline_code_bytes: base_code,
                relative_pct: 100.0 * f64::from(code) / f64::from(base_code),
                relax_count: relaxed.stats.relax_count,
                instret: relaxed.instret(),
                baseline_instret: base.instret(),
                diagnostics: relaxed.stats.diagnostics.clone(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SizeReport {
        workload: spec.name.clone(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!(
                "unknown report format `{other}` (expected table or csv)"
            )),
        }
    }
}

pub const CSV_HEADER: &str =
    "variant,threshold,near_ram,near_rom,baseline,code_bytes,relative_pct,relax_count,instret";

/// One decimal place, as in the published table.
pub fn format_pct(pct: f64) -> String {
    format!("{pct:.1} %")
}

pub fn emit_report(report: &SizeReport, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            writeln!(out, "{CSV_HEADER}").unwrap();
            for r in &report.rows {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{:.1},{},{}",
                    r.variant,
                    r.threshold,
                    r.near_ram,
                    r.near_rom,
                    r.baseline.as_str(),
                    r.code_size_bytes,
                    r.relative_pct,
                    r.relax_count,
                    r.instret
                )
                .unwrap();
            }
        }
        ReportFormat::Table => {
            let yn = |b: bool| if b { "yes" } else { "no" };
            writeln!(
                out,
                "{:<8} {:>9} {:<8} {:<8} {:<9} {:>10} {:>9} {:>11} {:>10}",
                "variant",
                "threshold",
                "near_ram",
                "near_rom",
                "baseline",
                "code_bytes",
                "relative",
                "relax_count",
                "instret"
            )
            .unwrap();
            for r in &report.rows {
                writeln!(
                    out,
                    "{:<8} {:>9} {:<8} {:<8} {:<9} {:>10} {:>9} {:>11} {:>10}",
                    r.variant.as_str(),
                    r.threshold,
                    yn(r.near_ram),
                    yn(r.near_rom),
                    r.baseline.as_str(),
                    r.code_size_bytes,
                    format_pct(r.relative_pct),
                    r.relax_count,
                    r.instret
                )
                .unwrap();
            }
        }
    }
    out
}

/// Benchmark-by-column summary in the shape of the published table.
pub fn table1_summary(reports: &[SizeReport], variant: EncodingVariant) -> String {
    let mut out = format!("{:<16} {:>9} {:>10}\n", "workload", "RAM only", "RAM & ROM");
    for rep in reports {
        let cell = |rom: bool| {
            rep.find(variant, true, rom)
                .map_or("-".to_string(), |r| format_pct(r.relative_pct))
        };
        writeln!(
            out,
            "{:<16} {:>9} {:>10}",
            rep.workload,
            cell(false),
            cell(true)
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm;
    use crate::object::RelocKind;

    #[test]
    fn empty_spec_is_checksum_only() {
        let text = gen_workload(&WorkloadSpec::default()).unwrap();
        let code: Vec<_> = text
            .lines()
            .skip_while(|l| *l != "_start:")
            .skip(1)
            .map(str::trim)
            .collect();
        assert_eq!(
            code,
            vec![
                "addi s0, zero, 0",
                "addi s1, zero, 0",
                "add s0, s0, s1",
                "la t2, checksum",
                "sw s0, 0(t2)",
                "ebreak"
            ]
        );
    }

    #[test]
    fn deterministic() {
        let spec = &corpus(1, 7)[0];
        assert_eq!(gen_workload(spec).unwrap(), gen_workload(spec).unwrap());
        let mut other = spec.clone();
        other.seed += 1;
        assert_ne!(gen_workload(spec).unwrap(), gen_workload(&other).unwrap());
    }

    #[test]
    fn one_scalar_one_pair() {
        let spec = WorkloadSpec {
            scalar_count: 1,
            ..WorkloadSpec::default()
        };
        let unit = asm::assemble(
            &gen_workload(&spec).unwrap(),
            EncodingVariant::SingleRange128K,
        )
        .unwrap();
        let paired = unit
            .relocations
            .iter()
            .filter(|r| r.pair_id.is_some())
            .count();
        assert_eq!(paired, 2);
        assert!(unit
            .relocations
            .iter()
            .any(|r| r.kind == RelocKind::HI20 && r.pair_id.is_some()));
    }

    #[test]
    fn spec_file_round_trip() {
        let spec = &table1_analog(3)[1];
        assert_eq!(&WorkloadSpec::parse(&spec.to_text()).unwrap(), spec);
        assert!(matches!(
            WorkloadSpec::parse("rodata_fraction=1.5"),
            Err(EvalError::Spec(_))
        ));
        assert!(matches!(
            WorkloadSpec::parse("bogus=1"),
            Err(EvalError::Spec(_))
        ));
        assert!(matches!(
            WorkloadSpec::parse("scalar_count=3\nscalar_size_dist=4:0"),
            Err(EvalError::Spec(_))
        ));
    }

    #[test]
    fn null_policy_is_one_hundred_percent() {
        let spec = WorkloadSpec {
            scalar_count: 20,
            accesses_per_symbol: 2,
            ..WorkloadSpec::default()
        };
        let none = NearPolicy {
            variant: EncodingVariant::SingleRange128K,
            threshold: 0,
            near_ram: true,
            near_rom: false,
        };
        let rep = run_experiment(
            &spec,
            &MemoryMap::CONTIGUOUS,
            &[none],
            BaselineKind::NoRelax,
        )
        .unwrap();
        assert_eq!(rep.rows[0].relative_pct, 100.0);
        assert_eq!(rep.rows[0].relax_count, 0);
    }

    #[test]
    fn single_access_scalars_save_one_instruction_each() {
        let spec = WorkloadSpec {
            scalar_count: 50,
            scalar_size_dist: vec![(4, 1), (2, 1), (1, 1)],
            ..WorkloadSpec::default()
        };
        let rep = run_experiment(
            &spec,
            &MemoryMap::FRAGMENTED,
            &full_matrix(DEFAULT_THRESHOLD),
            BaselineKind::NoRelax,
        )
        .unwrap();
        for r in &rep.rows {
            assert_eq!(r.relax_count, 50);
            assert_eq!(r.code_size_bytes, r.baseline_code_bytes - 4 * 50);
            assert_eq!(r.instret, r.baseline_instret - 50);
        }
    }

    #[test]
    fn report_rendering() {
        let empty = SizeReport::default();
        assert_eq!(
            emit_report(&empty, ReportFormat::Csv),
            format!("{CSV_HEADER}\n")
        );
        assert_eq!(emit_report(&empty, ReportFormat::Table).lines().count(), 1);
        assert_eq!(format_pct(95.699_999), "95.7 %");
        let row = ReportRow {
            variant: EncodingVariant::DualRange64K,
            threshold: 64,
            near_ram: true,
            near_rom: true,
            baseline: BaselineKind::NoRelax,
            code_size_bytes: 957,
            baseline_code_bytes: 1000,
            relative_pct: 95.7,
            relax_count: 43,
            instret: 10,
            baseline_instret: 53,
            diagnostics: vec![],
        };
        let rep = SizeReport {
            workload: "w".into(),
            rows: vec![row.clone(), row],
        };
        let csv = emit_report(&rep, ReportFormat::Csv);
        let table = emit_report(&rep, ReportFormat::Table);
        assert_eq!(csv.lines().count(), table.lines().count());
        assert!(csv.contains("\ndual,64,true,true,no-relax,957,95.7,43,10\n"));
        assert!(table.contains("95.7 %"));
    }

    #[test]
    fn matrix_file() {
        let m = parse_matrix("# policies\nvariant=single threshold=64 near_ram=1\nvariant=dual threshold=8 near_rom=true\n")
            .unwrap();
        assert_eq!(m.len(), 2);
        assert!(m[1].near_ram && m[1].near_rom);
        assert!(parse_matrix("variant=single\n").is_err());
    }
}
