//! Deterministic RV32I interpreter with the near load/store extension.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::image::Image;
use crate::isa::{self, EncodingVariant, Format, Instruction, Mnemonic, Reg};

const PAGE_BITS: u32 = 12;
const PAGE_SIZE: usize = 1 << PAGE_BITS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum Trap {
    #[error("illegal instruction 0x{word:08x} at pc 0x{pc:08x}")]
    IllegalInstruction { pc: u32, word: u32 },
    #[error("unmapped access to 0x{addr:08x} at pc 0x{pc:08x}")]
    UnmappedAccess { pc: u32, addr: u32 },
    #[error("misaligned access to 0x{addr:08x} at pc 0x{pc:08x}")]
    MisalignedAccess { pc: u32, addr: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoadError {
    #[error("blobs overlap at 0x{0:08x}")]
    Overlap(u32),
}

#[derive(Clone)]
struct Page {
    data: [u8; PAGE_SIZE],
    mapped: [u64; PAGE_SIZE / 64],
}

/// Sparse byte-granular memory; only bytes loaded from the image are mapped.
#[derive(Clone, Default)]
pub struct Memory {
    pages: BTreeMap<u32, Box<Page>>,
}

impl fmt::Debug for Memory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Memory")
            .field("pages", &self.pages.len())
            .finish()
    }
}

impl Memory {
    fn split(addr: u32) -> (u32, usize) {
        (addr >> PAGE_BITS, (addr as usize) & (PAGE_SIZE - 1))
    }

    pub fn is_mapped(&self, addr: u32) -> bool {
        let (p, o) = Memory::split(addr);
        self.pages
            .get(&p)
            .is_some_and(|page| page.mapped[o / 64] >> (o % 64) & 1 == 1)
    }

    /// Maps and writes one byte. Returns false if the byte was already mapped.
    fn map_byte(&mut self, addr: u32, value: u8) -> bool {
        let (p, o) = Memory::split(addr);
        let page = self.pages.entry(p).or_insert_with(|| {
            Box::new(Page {
                data: [0; PAGE_SIZE],
                mapped: [0; PAGE_SIZE / 64],
            })
        });
        let fresh = page.mapped[o / 64] >> (o % 64) & 1 == 0;
        page.mapped[o / 64] |= 1 << (o % 64);
        page.data[o] = value;
        fresh
    }

    pub fn read_byte(&self, addr: u32) -> Option<u8> {
        let (p, o) = Memory::split(addr);
        let page = self.pages.get(&p)?;
        (page.mapped[o / 64] >> (o % 64) & 1 == 1).then_some(page.data[o])
    }

    /// Little-endian read of `width` bytes; `None` if any byte is unmapped.
    pub fn read(&self, addr: u32, width: u32) -> Option<u32> {
        let mut v = 0u32;
        for i in (0..width).rev() {
            v = v << 8 | u32::from(self.read_byte(addr.checked_add(i)?)?);
        }
        Some(v)
    }

    fn write(&mut self, addr: u32, width: u32, value: u32) -> bool {
        if (0..width).any(|i| addr.checked_add(i).is_none_or(|a| !self.is_mapped(a))) {
            return false;
        }
        for i in 0..width {
            self.map_byte(addr + i, (value >> (8 * i)) as u8);
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreEvent {
    pub addr: u32,
    pub width: u32,
    pub value: u32,
}

#[derive(Debug, Clone)]
pub struct MachineState {
    pub variant: EncodingVariant,
    pub pc: u32,
    pub x: [u32; 32],
    pub f: [u32; 32],
    pub memory: Memory,
    pub store_trace: Vec<StoreEvent>,
    pub instret: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Halted,
    Trapped(Trap),
    StepLimit,
}

impl Outcome {
    pub fn label(&self) -> String {
        match self {
            Outcome::Halted => "halted".into(),
            Outcome::Trapped(t) => format!("trapped: {t}"),
            Outcome::StepLimit => "step-limit".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunResult {
    pub outcome: Outcome,
    pub instret: u64,
}

/// Result of a single successful step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Continue,
    Halt,
}

/// Builds the initial machine state from an image.
pub fn load_image(image: &Image) -> Result<MachineState, LoadError> {
    let mut memory = Memory::default();
    for blob in &image.blobs {
        for (i, b) in blob.bytes.iter().enumerate() {
            let addr = blob.addr.wrapping_add(i as u32);
            if !memory.map_byte(addr, *b) {
                return Err(LoadError::Overlap(addr));
            }
        }
    }
    let mut x = [0u32; 32];
    for (reg, value) in &image.regs {
        x[reg.index()] = *value;
    }
    x[0] = 0;
    Ok(MachineState {
        variant: image.variant,
        pc: image.entry,
        x,
        f: [0; 32],
        memory,
        store_trace: Vec::new(),
        instret: 0,
    })
}

impl MachineState {
    pub fn reg(&self, r: Reg) -> u32 {
        self.x[r.index()]
    }

    fn set(&mut self, r: Reg, v: u32) {
        if r != Reg::ZERO {
            self.x[r.index()] = v;
        }
    }

    /// Fetches and decodes the instruction at `pc` without executing it.
    pub fn fetch(&self) -> Result<Instruction, Trap> {
        let pc = self.pc;
        if !pc.is_multiple_of(4) {
            return Err(Trap::MisalignedAccess { pc, addr: pc });
        }
        let word = self
            .memory
            .read(pc, 4)
            .ok_or(Trap::UnmappedAccess { pc, addr: pc })?;
        isa::decode(word, self.variant).map_err(|_| Trap::IllegalInstruction { pc, word })
    }

    /// Executes one instruction. `instret` counts every non-trapping step,
    /// including the halting `ebreak`.
    pub fn step(&mut self) -> Result<Step, Trap> {
        let ins = self.fetch()?;
        let pc = self.pc;
        let rs1 = self.reg(ins.rs1);
        let rs2 = self.reg(ins.rs2);
        let imm = ins.imm as u32;
        let mut next = pc.wrapping_add(4);
        use Mnemonic::*;
        match ins.mnemonic {
            Lui => self.set(ins.rd, imm << 12),
            Auipc => self.set(ins.rd, pc.wrapping_add(imm << 12)),
            Addi => self.set(ins.rd, rs1.wrapping_add(imm)),
            Slti => self.set(ins.rd, u32::from((rs1 as i32) < ins.imm)),
            Sltiu => self.set(ins.rd, u32::from(rs1 < imm)),
            Xori => self.set(ins.rd, rs1 ^ imm),
            Ori => self.set(ins.rd, rs1 | imm),
            Andi => self.set(ins.rd, rs1 & imm),
            Slli => self.set(ins.rd, rs1 << (imm & 31)),
            Srli => self.set(ins.rd, rs1 >> (imm & 31)),
            Srai => self.set(ins.rd, ((rs1 as i32) >> (imm & 31)) as u32),
            Add => self.set(ins.rd, rs1.wrapping_add(rs2)),
            Sub => self.set(ins.rd, rs1.wrapping_sub(rs2)),
            Sll => self.set(ins.rd, rs1 << (rs2 & 31)),
            Slt => self.set(ins.rd, u32::from((rs1 as i32) < (rs2 as i32))),
            Sltu => self.set(ins.rd, u32::from(rs1 < rs2)),
            Xor => self.set(ins.rd, rs1 ^ rs2),
            Srl => self.set(ins.rd, rs1 >> (rs2 & 31)),
            Sra => self.set(ins.rd, ((rs1 as i32) >> (rs2 & 31)) as u32),
            Or => self.set(ins.rd, rs1 | rs2),
            And => self.set(ins.rd, rs1 & rs2),
            Beq | Bne | Blt | Bge | Bltu | Bgeu => {
                let taken = match ins.mnemonic {
                    Beq => rs1 == rs2,
                    Bne => rs1 != rs2,
                    Blt => (rs1 as i32) < (rs2 as i32),
                    Bge => (rs1 as i32) >= (rs2 as i32),
                    Bltu => rs1 < rs2,
                    _ => rs1 >= rs2,
                };
                if taken {
                    next = pc.wrapping_add(imm);
                }
            }
            Jal => {
                self.set(ins.rd, next);
                next = pc.wrapping_add(imm);
            }
            Jalr => {
                let target = rs1.wrapping_add(imm) & !1;
                self.set(ins.rd, next);
                next = target;
            }
            Ebreak => {
                self.instret += 1;
                return Ok(Step::Halt);
            }
            m => {
                let near = matches!(m.format(), Format::NI | Format::NS);
                let base = if near { self.reg(ins.near_base()) } else { rs1 };
                let addr = base.wrapping_add(imm);
                let width = m.access_width().expect("memory op");
                if addr % width != 0 {
                    return Err(Trap::MisalignedAccess { pc, addr });
                }
                if m.is_load() {
                    let raw = self
                        .memory
                        .read(addr, width)
                        .ok_or(Trap::UnmappedAccess { pc, addr })?;
                    let value = match m {
                        Lb | Nlb => raw as u8 as i8 as i32 as u32,
                        Lh | Nlh => raw as u16 as i16 as i32 as u32,
                        _ => raw,
                    };
                    if m.is_fp_data() {
                        self.f[ins.rd.index()] = value;
                    } else {
                        self.set(ins.rd, value);
                    }
                } else {
                    let value = if m.is_fp_data() {
                        self.f[ins.rs2.index()]
                    } else {
                        rs2
                    };
                    let value = if width == 4 {
                        value
                    } else {
                        value & ((1 << (8 * width)) - 1)
                    };
                    if !self.memory.write(addr, width, value) {
                        return Err(Trap::UnmappedAccess { pc, addr });
                    }
                    self.store_trace.push(StoreEvent { addr, width, value });
                }
            }
        }
        self.pc = next;
        self.instret += 1;
        Ok(Step::Continue)
    }

    pub fn run(&mut self, max_steps: u64) -> RunResult {
        self.run_with(max_steps, |_, _| {})
    }

    /// Runs until halt, trap or `max_steps`; `on_step` sees each instruction before it executes.
    pub fn run_with(
        &mut self,
        max_steps: u64,
        mut on_step: impl FnMut(u32, &Instruction),
    ) -> RunResult {
        let mut steps = 0;
        let outcome = loop {
            if steps >= max_steps {
                break Outcome::StepLimit;
            }
            if let Ok(ins) = self.fetch() {
                on_step(self.pc, &ins);
            }
            steps += 1;
            match self.step() {
                Ok(Step::Continue) => {}
                Ok(Step::Halt) => break Outcome::Halted,
                Err(t) => break Outcome::Trapped(t),
            }
        };
        RunResult {
            outcome,
            instret: self.instret,
        }
    }

    /// Deterministic final-state dump: status, non-zero registers, store trace.
    ///
    /// `pc` and `instret` are left out so that relaxed and unrelaxed builds of
    /// the same program dump identically.
    pub fn dump(&self, outcome: &Outcome) -> String {
        let mut out = format!("status {}\n", outcome.label());
        for i in 1..32 {
            let r = Reg(i as u8);
            writeln!(out, "{:<4} 0x{:08x}", r.abi_name(), self.x[i]).unwrap();
        }
        for (i, v) in self.f.iter().enumerate().filter(|(_, v)| **v != 0) {
            writeln!(out, "{:<4} 0x{v:08x}", Reg(i as u8).fp_abi_name()).unwrap();
        }
        writeln!(out, "stores {}", self.store_trace.len()).unwrap();
        for s in &self.store_trace {
            writeln!(out, "store 0x{:08x} {} 0x{:08x}", s.addr, s.width, s.value).unwrap();
        }
        out
    }
}

/// Formats one trace line: address and disassembly.
pub fn trace_line(pc: u32, ins: &Instruction) -> String {
    format!("0x{pc:08x}  {ins}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Blob;

    const S: EncodingVariant = EncodingVariant::SingleRange128K;

    fn image_with(code: &[Instruction], data: &[(u32, Vec<u8>)], regs: &[(Reg, u32)]) -> Image {
        let mut image = Image::empty(S, 0x1000);
        let bytes = code
            .iter()
            .flat_map(|i| isa::encode(i, S).unwrap().to_le_bytes())
            .collect();
        image.blobs.push(Blob {
            addr: 0x1000,
            bytes,
        });
        for (addr, bytes) in data {
            image.blobs.push(Blob {
                addr: *addr,
                bytes: bytes.clone(),
            });
        }
        image.regs = regs.to_vec();
        image
    }

    #[test]
    fn near_load_below_gp() {
        let code = [
            Instruction::near_load(Mnemonic::Nlw, Reg(9), -4, None),
            Instruction::ebreak(),
        ];
        let img = image_with(
            &code,
            &[(0x8000_FFFC, 0xDEAD_BEEFu32.to_le_bytes().to_vec())],
            &[(Reg::GP, 0x8001_0000)],
        );
        let mut st = load_image(&img).unwrap();
        assert_eq!(st.reg(Reg::GP), 0x8001_0000);
        let r = st.run(10);
        assert_eq!(r.outcome, Outcome::Halted);
        assert_eq!(st.x[9], 0xDEAD_BEEF);
        assert_eq!(r.instret, 2);
    }

    #[test]
    fn near_byte_extension() {
        let code = [
            Instruction::near_load(Mnemonic::Nlbu, Reg(9), 0, None),
            Instruction::near_load(Mnemonic::Nlb, Reg(10), 0, None),
            Instruction::ebreak(),
        ];
        let img = image_with(&code, &[(0x2000, vec![0x80])], &[(Reg::GP, 0x2000)]);
        let mut st = load_image(&img).unwrap();
        st.run(10);
        assert_eq!(st.x[9], 0x0000_0080);
        assert_eq!(st.x[10], 0xFFFF_FF80);
    }

    #[test]
    fn single_ebreak() {
        let mut st = load_image(&image_with(&[Instruction::ebreak()], &[], &[])).unwrap();
        assert_eq!(
            st.run(5),
            RunResult {
                outcome: Outcome::Halted,
                instret: 1
            }
        );
    }

    #[test]
    fn step_limit() {
        let mut st = load_image(&image_with(&[Instruction::j(Reg::ZERO, 0)], &[], &[])).unwrap();
        assert_eq!(
            st.run(1000),
            RunResult {
                outcome: Outcome::StepLimit,
                instret: 1000
            }
        );
    }

    #[test]
    fn empty_image_faults() {
        let mut st = load_image(&Image::empty(S, 0x8000_0000)).unwrap();
        assert_eq!(
            st.run(1).outcome,
            Outcome::Trapped(Trap::UnmappedAccess {
                pc: 0x8000_0000,
                addr: 0x8000_0000
            })
        );
        assert_eq!(st.instret, 0);
    }

    #[test]
    fn overlapping_blobs() {
        let img = image_with(&[Instruction::ebreak()], &[(0x1002, vec![0; 4])], &[]);
        assert_eq!(load_image(&img).unwrap_err(), LoadError::Overlap(0x1002));
    }

    #[test]
    fn stores_and_traps() {
        let code = [
            Instruction::i(Mnemonic::Addi, Reg(5), Reg::ZERO, -1),
            Instruction::s(Mnemonic::Sh, Reg(5), Reg(6), 2),
            Instruction::s(Mnemonic::Sw, Reg(5), Reg(6), 2),
        ];
        let img = image_with(&code, &[(0x3000, vec![0; 8])], &[(Reg::T1, 0x3000)]);
        let mut st = load_image(&img).unwrap();
        let r = st.run(10);
        assert_eq!(
            st.store_trace,
            vec![StoreEvent {
                addr: 0x3002,
                width: 2,
                value: 0xFFFF
            }]
        );
        assert_eq!(
            r.outcome,
            Outcome::Trapped(Trap::MisalignedAccess {
                pc: 0x1008,
                addr: 0x3002
            })
        );
        assert_eq!(st.memory.read(0x3000, 4), Some(0xFFFF_0000));
        assert_eq!(r.instret, 2);
    }

    #[test]
    fn x0_stays_zero() {
        let code = [
            Instruction::i(Mnemonic::Addi, Reg::ZERO, Reg::ZERO, 5),
            Instruction::ebreak(),
        ];
        let mut st = load_image(&image_with(&code, &[], &[(Reg::ZERO, 7)])).unwrap();
        st.run(5);
        assert_eq!(st.x[0], 0);
    }

    #[test]
    fn illegal_word() {
        let mut img = Image::empty(S, 0);
        img.blobs.push(Blob {
            addr: 0,
            bytes: vec![0xFF; 4],
        });
        let mut st = load_image(&img).unwrap();
        assert!(matches!(
            st.run(1).outcome,
            Outcome::Trapped(Trap::IllegalInstruction { .. })
        ));
    }
}
