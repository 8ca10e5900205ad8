#![allow(dead_code)]

use nearv::asm::split_hi_lo;
use nearv::image::{Blob, Image};
use nearv::isa::{BaseSelect, EncodingVariant, Format, Instruction, Mnemonic, Reg};
use rand::Rng;

pub const VARIANTS: [EncodingVariant; 2] = [
    EncodingVariant::SingleRange128K,
    EncodingVariant::DualRange64K,
];

fn reg(rng: &mut impl Rng) -> Reg {
    Reg(rng.gen_range(0..32))
}

/// A random legal instruction for `m`, spanning the full immediate domain.
pub fn random_instruction(
    m: Mnemonic,
    variant: EncodingVariant,
    rng: &mut impl Rng,
) -> Instruction {
    let (min, max, align) = m.imm_domain(variant);
    let imm = (rng.gen_range(min..=max) / align * align) as i32;
    match m.format() {
        Format::R => Instruction::r(m, reg(rng), reg(rng), reg(rng)),
        Format::I if m == Mnemonic::Ebreak => Instruction::ebreak(),
        Format::I => Instruction::i(m, reg(rng), reg(rng), imm),
        Format::S => Instruction::s(m, reg(rng), reg(rng), imm),
        Format::B => Instruction::b(m, reg(rng), reg(rng), imm),
        Format::U => Instruction::u(m, reg(rng), imm),
        Format::J => Instruction::j(reg(rng), imm),
        Format::NI | Format::NS => {
            let bs = match variant {
                EncodingVariant::SingleRange128K => None,
                EncodingVariant::DualRange64K => Some(if rng.gen() {
                    BaseSelect::B0
                } else {
                    BaseSelect::B1
                }),
            };
            if m.format() == Format::NI {
                Instruction::near_load(m, reg(rng), imm, bs)
            } else {
                Instruction::near_store(m, reg(rng), imm, bs)
            }
        }
    }
}

pub fn random_any(variant: EncodingVariant, rng: &mut impl Rng) -> Instruction {
    let m = Mnemonic::ALL[rng.gen_range(0..Mnemonic::ALL.len())];
    random_instruction(m, variant, rng)
}

pub fn code_blob(addr: u32, code: &[Instruction], variant: EncodingVariant) -> Blob {
    let bytes = code
        .iter()
        .flat_map(|i| nearv::encode(i, variant).unwrap().to_le_bytes())
        .collect();
    Blob { addr, bytes }
}

/// Outcome of one access executed as a near instruction and as `lui` + base access.
#[derive(Debug, PartialEq, Eq)]
pub struct AccessRun {
    pub dest: u32,
    pub trace: Vec<nearv::emu::StoreEvent>,
    pub memory: Vec<u8>,
    pub instret: u64,
}

/// Runs `code` with a 16-byte data window around `addr` preloaded with `data`.
#[allow(clippy::too_many_arguments)]
pub fn run_access(
    variant: EncodingVariant,
    code: &[Instruction],
    regs: &[(Reg, u32)],
    addr: u32,
    data: [u8; 16],
    dest: Reg,
    fp: bool,
    fp_init: u32,
) -> AccessRun {
    const CODE: u32 = 0x0000_1000;
    let mut image = Image::empty(variant, CODE);
    image.blobs.push(code_blob(CODE, code, variant));
    let lo = addr & !7;
    image.blobs.push(Blob {
        addr: lo,
        bytes: data.to_vec(),
    });
    image.regs = regs.to_vec();
    let mut st = nearv::emu::load_image(&image).unwrap();
    if fp {
        st.f[dest.index()] = fp_init;
    }
    let r = st.run(16);
    assert_eq!(r.outcome, nearv::emu::Outcome::Halted, "{code:?}");
    AccessRun {
        dest: if fp {
            st.f[dest.index()]
        } else {
            st.x[dest.index()]
        },
        trace: st.store_trace.clone(),
        memory: (0..16)
            .map(|i| st.memory.read_byte(lo + i).unwrap())
            .collect(),
        instret: r.instret,
    }
}

/// Executes the same access both ways; returns `(near, pair)` results.
pub fn near_vs_pair(
    variant: EncodingVariant,
    m: Mnemonic,
    base_select: Option<BaseSelect>,
    base: u32,
    offset: i32,
    value: u32,
    data: [u8; 16],
) -> (AccessRun, AccessRun) {
    let width = m.access_width().unwrap();
    let addr = base.wrapping_add(offset as u32);
    assert_eq!(addr % width, 0);
    let base_reg = base_select.map_or(Reg::GP, BaseSelect::reg);
    let data_reg = Reg(10);
    let scratch = Reg(7);
    let is_store = m.is_store();
    let fp = m.is_fp_data();
    let near_m = m.near_form().unwrap();
    let near = if is_store {
        Instruction::near_store(near_m, data_reg, offset, base_select)
    } else {
        Instruction::near_load(near_m, data_reg, offset, base_select)
    };
    let (hi, lo) = split_hi_lo(addr);
    let lui = Instruction::u(Mnemonic::Lui, scratch, hi as i32);
    let base_access = if is_store {
        Instruction::s(m, data_reg, scratch, lo)
    } else {
        Instruction::i(m, data_reg, scratch, lo)
    };
    let mut regs = vec![(base_reg, base)];
    if is_store && !fp {
        regs.push((data_reg, value));
    }
    let near_run = run_access(
        variant,
        &[near, Instruction::ebreak()],
        &regs,
        addr,
        data,
        data_reg,
        fp,
        value,
    );
    let pair_run = run_access(
        variant,
        &[lui, base_access, Instruction::ebreak()],
        &regs,
        addr,
        data,
        data_reg,
        fp,
        value,
    );
    (near_run, pair_run)
}
