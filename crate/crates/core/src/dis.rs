//! Disassembly of objects (as re-assemblable source) and linked images.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::image::Image;
use crate::isa::{self, EncodingVariant, Format, Instruction, Mnemonic, Reg};
use crate::object::{ObjectUnit, RelocKind, Relocation, Scope, SectionKind};

fn sym_expr(r: &Relocation) -> String {
    match r.addend {
        0 => r.symbol.clone(),
        a if a > 0 => format!("{}+{a}", r.symbol),
        a => format!("{}{a}", r.symbol),
    }
}

fn data_name(ins: &Instruction, r: Reg) -> &'static str {
    if ins.mnemonic.is_fp_data() {
        r.fp_abi_name()
    } else {
        r.abi_name()
    }
}

/// Renders one instruction with its relocation folded back into symbolic form.
fn symbolic(ins: &Instruction, r: &Relocation) -> String {
    let m = ins.mnemonic;
    let e = sym_expr(r);
    match r.kind {
        RelocKind::HI20 => format!("lui {}, %hi({e})", ins.rd.abi_name()),
        RelocKind::LO12_I if m.is_load() => {
            format!(
                "{m} {}, %lo({e})({})",
                data_name(ins, ins.rd),
                ins.rs1.abi_name()
            )
        }
        RelocKind::LO12_I => format!(
            "{m} {}, {}, %lo({e})",
            ins.rd.abi_name(),
            ins.rs1.abi_name()
        ),
        RelocKind::LO12_S => format!(
            "{m} {}, %lo({e})({})",
            data_name(ins, ins.rs2),
            ins.rs1.abi_name()
        ),
        RelocKind::NEAR_I => format!("{m} {}, {e}", data_name(ins, ins.rd)),
        RelocKind::NEAR_S => format!("{m} {}, {e}", data_name(ins, ins.rs2)),
        RelocKind::BR13 => format!("{m} {}, {}, {e}", ins.rs1.abi_name(), ins.rs2.abi_name()),
        RelocKind::JAL21 => format!("jal {}, {e}", ins.rd.abi_name()),
        RelocKind::ABS32 => format!(".word {e}"),
    }
}

/// The pseudo-instruction a relaxable pair was expanded from.
fn pair_pseudo(lui: &Instruction, access: &Instruction, r: &Relocation) -> Option<String> {
    let m = access.mnemonic;
    if access.rs1 != lui.rd {
        return None;
    }
    let e = sym_expr(r);
    if m.is_store() || m == Mnemonic::Flw {
        let data = if m.is_store() { access.rs2 } else { access.rd };
        Some(format!(
            "{m} {}, {e}, {}",
            data_name(access, data),
            lui.rd.abi_name()
        ))
    } else if m.is_load() && access.rd == lui.rd {
        Some(format!("{m} {}, {e}", access.rd.abi_name()))
    } else {
        None
    }
}

/// Disassembles an object into source that assembles back to the same object.
pub fn disassemble_object(unit: &ObjectUnit, variant: EncodingVariant) -> String {
    let mut out = String::new();
    for s in unit.symbols.iter().filter(|s| s.scope == Scope::Global) {
        writeln!(out, ".global {}", s.name).unwrap();
    }
    for sec in &unit.sections {
        writeln!(out, "\n{}", sec.name).unwrap();
        if sec.align != 4 {
            writeln!(out, ".align {}", sec.align.trailing_zeros()).unwrap();
        }
        let mut labels: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
        for s in unit
            .symbols
            .iter()
            .filter(|s| s.section.as_deref() == Some(sec.name.as_str()))
        {
            labels.entry(s.offset).or_default().push(&s.name);
        }
        let relocs: HashMap<u32, &Relocation> = unit
            .relocations
            .iter()
            .filter(|r| r.section == sec.name)
            .map(|r| (r.offset, r))
            .collect();
        let label_lines = |out: &mut String, at: u32| {
            for name in labels.get(&at).into_iter().flatten() {
                writeln!(out, "{name}:").unwrap();
            }
        };
        let bytes = sec.bytes();
        let len = sec.len();
        let mut at = 0;
        while at < len {
            label_lines(&mut out, at);
            match sec.kind {
                SectionKind::Code => {
                    let word = sec.word(at).unwrap_or(0);
                    let text = match isa::decode(word, variant) {
                        Err(_) => format!(".word 0x{word:08x}"),
                        Ok(ins) => match relocs.get(&at) {
                            None => ins.to_string(),
                            Some(r) => {
                                let paired = r.pair_id.and_then(|id| {
                                    let lo =
                                        relocs.get(&(at + 4)).filter(|l| l.pair_id == Some(id))?;
                                    let access = isa::decode(sec.word(at + 4)?, variant).ok()?;
                                    if labels.contains_key(&(at + 4)) {
                                        return None;
                                    }
                                    pair_pseudo(&ins, &access, lo)
                                });
                                match paired {
                                    Some(p) => {
                                        at += 4;
                                        p
                                    }
                                    None => symbolic(&ins, r),
                                }
                            }
                        },
                    };
                    writeln!(out, "    {text}").unwrap();
                    at += 4;
                }
                SectionKind::Bss => {
                    let next = labels.range(at + 1..).next().map_or(len, |(o, _)| *o);
                    writeln!(out, "    .space {}", next - at).unwrap();
                    at = next;
                }
                SectionKind::Data | SectionKind::ROData => {
                    if let Some(r) = relocs.get(&at) {
                        writeln!(out, "    {}", symbolic(&isa::Instruction::ebreak(), r)).unwrap();
                        at += 4;
                        continue;
                    }
                    let stop = labels
                        .range(at + 1..)
                        .map(|(o, _)| *o)
                        .chain(relocs.keys().copied().filter(|o| *o > at))
                        .min()
                        .unwrap_or(len)
                        .min(at + 16);
                    let list: Vec<String> = bytes[at as usize..stop as usize]
                        .iter()
                        .map(|b| b.to_string())
                        .collect();
                    writeln!(out, "    .byte {}", list.join(", ")).unwrap();
                    at = stop;
                }
            }
        }
        label_lines(&mut out, len);
        for s in unit
            .symbols
            .iter()
            .filter(|s| s.section.as_deref() == Some(sec.name.as_str()))
        {
            writeln!(out, ".size {}, {}", s.name, s.size).unwrap();
        }
    }
    out
}

/// Lists an image: header, symbol map and annotated code.
pub fn disassemble_image(image: &Image) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "# variant {}  entry 0x{:08x}  code {} bytes",
        image.variant, image.entry, image.code_size_bytes
    )
    .unwrap();
    for (r, v) in &image.regs {
        writeln!(out, "# {} = 0x{v:08x}", r.abi_name()).unwrap();
    }
    let mut by_addr: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
    for s in &image.symbols {
        by_addr.entry(s.addr).or_default().push(&s.name);
    }
    let name_for = |addr: u32| -> Option<String> {
        let (&base, names) = by_addr.range(..=addr).next_back()?;
        let sym = image.symbols.iter().find(|s| s.name == names[0])?;
        if addr != base && addr >= base + sym.size.max(1) {
            return None;
        }
        Some(if addr == base {
            names[0].to_string()
        } else {
            format!("{}+{}", names[0], addr - base)
        })
    };
    for &(start, len) in &image.code {
        for addr in (start..start + len).step_by(4) {
            for name in by_addr.get(&addr).into_iter().flatten() {
                writeln!(out, "{name}:").unwrap();
            }
            let Some(word) = image.word_at(addr) else {
                continue;
            };
            let (text, target) = match isa::decode(word, image.variant) {
                Err(_) => (format!(".word 0x{word:08x}"), None),
                Ok(ins) => {
                    let target = match ins.mnemonic.format() {
                        Format::NI | Format::NS => image
                            .reg(ins.near_base())
                            .map(|b| b.wrapping_add(ins.imm as u32)),
                        Format::B | Format::J => Some(addr.wrapping_add(ins.imm as u32)),
                        _ => None,
                    };
                    (ins.to_string(), target)
                }
            };
            let note = target
                .and_then(name_for)
                .map(|n| format!("  # {n}"))
                .unwrap_or_default();
            writeln!(out, "  {addr:08x}:  {word:08x}  {text}{note}").unwrap();
        }
    }
    if !image.symbols.is_empty() {
        writeln!(out, "\n# symbols").unwrap();
        for s in &image.symbols {
            writeln!(
                out,
                "# {:08x} {:>6} {:<6} {}",
                s.addr,
                s.size,
                s.kind.as_str(),
                s.name
            )
            .unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;

    const SRC: &str = "\
.global _start
.global ext
.data
.align 3
counter: .word 1, 2
ptr: .word counter+4
.rodata
msg: .byte 104, 105
.bss
buf: .space 12
.text
_start:
    lw a0, counter
    sw a0, buf+4, t2
    flw fa0, counter, a3
    la a1, msg
    lbu a2, 1(a1)
loop:
    addi a2, a2, -1
    bne a2, zero, loop
    jal ra, ext
    lui a3, %hi(ptr)
    lw a4, %lo(ptr)(a3)
    beq zero, zero, 8
    ebreak
";

    #[test]
    fn object_round_trip() {
        for v in [
            EncodingVariant::SingleRange128K,
            EncodingVariant::DualRange64K,
        ] {
            let unit = assemble(SRC, v).unwrap();
            let text = disassemble_object(&unit, v);
            let again = assemble(&text, v).unwrap_or_else(|e| panic!("{e}\n{text}"));
            assert_eq!(again, unit, "\n{text}");
        }
    }

    #[test]
    fn near_symbol_round_trip() {
        let v = EncodingVariant::DualRange64K;
        let unit = assemble(
            ".data\nk: .word 3\n.text\nnlw a0, k\nnsh a1, k+2\nnlw a2, -8(t1)\n",
            v,
        )
        .unwrap();
        let text = disassemble_object(&unit, v);
        assert!(text.contains("nlw a0, k\n"));
        assert!(text.contains("nsh a1, k+2\n"));
        assert!(text.contains("nlw a2, -8(t1)\n"));
        assert_eq!(assemble(&text, v).unwrap(), unit);
    }
}
