//! RV32I base subset plus the near-addressing (Xnear) load/store extension.
//!
//! Near instructions keep the opcode/funct3 layout of their base I-type and
//! S-type relatives and reuse the 5-bit `rs1` field (bits 19:15) as extra
//! immediate bits:
//!
//! ```text
//! NI single: [ imm[11:0] | imm[16:12]    | funct3 | rd       | opcode ]
//! NI dual:   [ imm[11:0] | imm[15:12] |b | funct3 | rd       | opcode ]
//! NS single: [ imm[11:5] | rs2 | imm[16:12]    | funct3 | imm[4:0] | opcode ]
//! NS dual:   [ imm[11:5] | rs2 | imm[15:12] |b | funct3 | imm[4:0] | opcode ]
//! ```
//!
//! The sign bit of the near immediate is encoding bit 19. In the single
//! 128 KB variant the base register is always `gp`; in the dual 64 KB variant
//! bit 15 selects `t0` (0) or `t1` (1).

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const OPC_LUI: u8 = 0b0110111;
pub const OPC_AUIPC: u8 = 0b0010111;
pub const OPC_OP_IMM: u8 = 0b0010011;
pub const OPC_OP: u8 = 0b0110011;
pub const OPC_LOAD: u8 = 0b0000011;
pub const OPC_STORE: u8 = 0b0100011;
pub const OPC_LOAD_FP: u8 = 0b0000111;
pub const OPC_STORE_FP: u8 = 0b0100111;
pub const OPC_BRANCH: u8 = 0b1100011;
pub const OPC_JAL: u8 = 0b1101111;
pub const OPC_JALR: u8 = 0b1100111;
pub const OPC_SYSTEM: u8 = 0b1110011;
/// custom-0, reserved by the base ISA for vendor extensions; holds near loads.
pub const OPC_NEAR_LOAD: u8 = 0b0001011;

pub const EBREAK_WORD: u32 = 0x0010_0073;

/// Signed window of the standard 12-bit `gp`-relative immediate.
pub const GP12_DOMAIN: (i32, i32) = (-2048, 2047);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IsaError {
    #[error("immediate {imm} out of range [{min}, {max}] for {mnemonic}")]
    ImmediateOutOfRange {
        mnemonic: Mnemonic,
        imm: i64,
        min: i64,
        max: i64,
    },
    #[error("immediate {imm} for {mnemonic} must be even")]
    ImmediateMisaligned { mnemonic: Mnemonic, imm: i64 },
    #[error("field {field} value {value} out of range")]
    FieldOutOfRange { field: &'static str, value: u32 },
    #[error("{mnemonic} operands do not match the {variant} variant")]
    VariantMismatch {
        mnemonic: Mnemonic,
        variant: EncodingVariant,
    },
    #[error("illegal instruction 0x{0:08x}")]
    IllegalInstruction(u32),
}

/// Which of the two proposed near-addressing layouts is in effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EncodingVariant {
    /// One 128 KB window addressed relative to `gp` with a 17-bit immediate.
    SingleRange128K,
    /// Two 64 KB windows addressed relative to `t0` / `t1` with a 16-bit immediate.
    DualRange64K,
}

impl EncodingVariant {
    pub const ALL: [EncodingVariant; 2] = [
        EncodingVariant::SingleRange128K,
        EncodingVariant::DualRange64K,
    ];

    pub fn near_offset_domain(self) -> (i32, i32) {
        near_offset_domain(self)
    }

    /// Number of bits in the near immediate.
    pub fn near_imm_bits(self) -> u32 {
        match self {
            EncodingVariant::SingleRange128K => 17,
            EncodingVariant::DualRange64K => 16,
        }
    }

    /// Total window span in bytes.
    pub fn window_span(self) -> u32 {
        1 << self.near_imm_bits()
    }

    /// Distance from the window start to the base register anchor.
    pub fn anchor_offset(self) -> u32 {
        self.window_span() / 2
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EncodingVariant::SingleRange128K => "single",
            EncodingVariant::DualRange64K => "dual",
        }
    }
}

impl fmt::Display for EncodingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncodingVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "single" | "single128k" | "singlerange128k" => Ok(EncodingVariant::SingleRange128K),
            "dual" | "dual64k" | "dualrange64k" => Ok(EncodingVariant::DualRange64K),
            other => Err(format!(
                "unknown variant `{other}` (expected single or dual)"
            )),
        }
    }
}

/// Signed immediate domain of near loads and stores.
pub fn near_offset_domain(variant: EncodingVariant) -> (i32, i32) {
    let bits = variant.near_imm_bits();
    (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
}

/// True when `sym_addr - base_addr`, taken without wraparound, fits the near immediate.
pub fn is_near_reachable(sym_addr: u32, base_addr: u32, variant: EncodingVariant) -> bool {
    let diff = i64::from(sym_addr) - i64::from(base_addr);
    let (min, max) = near_offset_domain(variant);
    (i64::from(min)..=i64::from(max)).contains(&diff)
}

/// Integer (or, for FP data moves, floating-point) register index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Reg(pub u8);

const ABI_NAMES: [&str; 32] = [
    "zero", "ra", "sp", "gp", "tp", "t0", "t1", "t2", "s0", "s1", "a0", "a1", "a2", "a3", "a4",
    "a5", "a6", "a7", "s2", "s3", "s4", "s5", "s6", "s7", "s8", "s9", "s10", "s11", "t3", "t4",
    "t5", "t6",
];

const FP_ABI_NAMES: [&str; 32] = [
    "ft0", "ft1", "ft2", "ft3", "ft4", "ft5", "ft6", "ft7", "fs0", "fs1", "fa0", "fa1", "fa2",
    "fa3", "fa4", "fa5", "fa6", "fa7", "fs2", "fs3", "fs4", "fs5", "fs6", "fs7", "fs8", "fs9",
    "fs10", "fs11", "ft8", "ft9", "ft10", "ft11",
];

impl Reg {
    pub const ZERO: Reg = Reg(0);
    pub const RA: Reg = Reg(1);
    pub const SP: Reg = Reg(2);
    pub const GP: Reg = Reg(3);
    pub const TP: Reg = Reg(4);
    pub const T0: Reg = Reg(5);
    pub const T1: Reg = Reg(6);
    pub const T2: Reg = Reg(7);

    pub fn new(index: u8) -> Option<Reg> {
        (index < 32).then_some(Reg(index))
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn abi_name(self) -> &'static str {
        ABI_NAMES.get(self.index()).copied().unwrap_or("?")
    }

    pub fn fp_abi_name(self) -> &'static str {
        FP_ABI_NAMES.get(self.index()).copied().unwrap_or("?")
    }

    /// Parses `xN` or an integer ABI name (`fp` is accepted for `s0`).
    pub fn parse(name: &str) -> Option<Reg> {
        if name == "fp" {
            return Some(Reg(8));
        }
        if let Some(i) = ABI_NAMES.iter().position(|n| *n == name) {
            return Some(Reg(i as u8));
        }
        name.strip_prefix('x')
            .and_then(|n| n.parse::<u8>().ok())
            .and_then(Reg::new)
    }

    /// Parses `fN` or a floating-point ABI name.
    pub fn parse_fp(name: &str) -> Option<Reg> {
        if let Some(i) = FP_ABI_NAMES.iter().position(|n| *n == name) {
            return Some(Reg(i as u8));
        }
        name.strip_prefix('f')
            .and_then(|n| n.parse::<u8>().ok())
            .and_then(Reg::new)
    }
}

/// Base register choice carried by near instructions under the dual variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaseSelect {
    B0,
    B1,
}

impl BaseSelect {
    pub fn reg(self) -> Reg {
        match self {
            BaseSelect::B0 => Reg::T0,
            BaseSelect::B1 => Reg::T1,
        }
    }

    pub fn bit(self) -> u32 {
        match self {
            BaseSelect::B0 => 0,
            BaseSelect::B1 => 1,
        }
    }

    pub fn from_reg(reg: Reg) -> Option<BaseSelect> {
        match reg {
            Reg::T0 => Some(BaseSelect::B0),
            Reg::T1 => Some(BaseSelect::B1),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Format {
    R,
    I,
    S,
    B,
    U,
    J,
    NI,
    NS,
}

macro_rules! mnemonics {
    ($($variant:ident => $name:literal, $opcode:expr, $funct3:expr, $funct7:expr, $format:ident;)*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum Mnemonic {
            $($variant,)*
        }

        impl Mnemonic {
            pub const ALL: &'static [Mnemonic] = &[$(Mnemonic::$variant,)*];

            pub fn name(self) -> &'static str {
                match self {
                    $(Mnemonic::$variant => $name,)*
                }
            }

            pub fn encoding(self) -> Encoding {
                match self {
                    $(Mnemonic::$variant => Encoding {
                        opcode: $opcode,
                        funct3: $funct3,
                        funct7: $funct7,
                        format: Format::$format,
                    },)*
                }
            }
        }
    };
}

/// Fixed fields identifying a mnemonic inside the 32-bit word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Encoding {
    pub opcode: u8,
    pub funct3: Option<u8>,
    /// Bits 31:25 for R-type and immediate shifts.
    pub funct7: Option<u8>,
    pub format: Format,
}

mnemonics! {
    Lui => "lui", OPC_LUI, None, None, U;
    Auipc => "auipc", OPC_AUIPC, None, None, U;
    Addi => "addi", OPC_OP_IMM, Some(0b000), None, I;
    Slti => "slti", OPC_OP_IMM, Some(0b010), None, I;
    Sltiu => "sltiu", OPC_OP_IMM, Some(0b011), None, I;
    Xori => "xori", OPC_OP_IMM, Some(0b100), None, I;
    Ori => "ori", OPC_OP_IMM, Some(0b110), None, I;
    Andi => "andi", OPC_OP_IMM, Some(0b111), None, I;
    Slli => "slli", OPC_OP_IMM, Some(0b001), Some(0b000_0000), I;
    Srli => "srli", OPC_OP_IMM, Some(0b101), Some(0b000_0000), I;
    Srai => "srai", OPC_OP_IMM, Some(0b101), Some(0b010_0000), I;
    Add => "add", OPC_OP, Some(0b000), Some(0b000_0000), R;
    Sub => "sub", OPC_OP, Some(0b000), Some(0b010_0000), R;
    Sll => "sll", OPC_OP, Some(0b001), Some(0b000_0000), R;
    Slt => "slt", OPC_OP, Some(0b010), Some(0b000_0000), R;
    Sltu => "sltu", OPC_OP, Some(0b011), Some(0b000_0000), R;
    Xor => "xor", OPC_OP, Some(0b100), Some(0b000_0000), R;
    Srl => "srl", OPC_OP, Some(0b101), Some(0b000_0000), R;
    Sra => "sra", OPC_OP, Some(0b101), Some(0b010_0000), R;
    Or => "or", OPC_OP, Some(0b110), Some(0b000_0000), R;
    And => "and", OPC_OP, Some(0b111), Some(0b000_0000), R;
    Lb => "lb", OPC_LOAD, Some(0b000), None, I;
    Lh => "lh", OPC_LOAD, Some(0b001), None, I;
    Lw => "lw", OPC_LOAD, Some(0b010), None, I;
    Lbu => "lbu", OPC_LOAD, Some(0b100), None, I;
    Lhu => "lhu", OPC_LOAD, Some(0b101), None, I;
    Sb => "sb", OPC_STORE, Some(0b000), None, S;
    Sh => "sh", OPC_STORE, Some(0b001), None, S;
    Sw => "sw", OPC_STORE, Some(0b010), None, S;
    Flw => "flw", OPC_LOAD_FP, Some(0b010), None, I;
    Fsw => "fsw", OPC_STORE_FP, Some(0b010), None, S;
    Beq => "beq", OPC_BRANCH, Some(0b000), None, B;
    Bne => "bne", OPC_BRANCH, Some(0b001), None, B;
    Blt => "blt", OPC_BRANCH, Some(0b100), None, B;
    Bge => "bge", OPC_BRANCH, Some(0b101), None, B;
    Bltu => "bltu", OPC_BRANCH, Some(0b110), None, B;
    Bgeu => "bgeu", OPC_BRANCH, Some(0b111), None, B;
    Jal => "jal", OPC_JAL, None, None, J;
    Jalr => "jalr", OPC_JALR, Some(0b000), None, I;
    Ebreak => "ebreak", OPC_SYSTEM, Some(0b000), None, I;
    Nlb => "nlb", OPC_NEAR_LOAD, Some(0b000), None, NI;
    Nlh => "nlh", OPC_NEAR_LOAD, Some(0b001), None, NI;
    Nlw => "nlw", OPC_NEAR_LOAD, Some(0b010), None, NI;
    Nlbu => "nlbu", OPC_NEAR_LOAD, Some(0b100), None, NI;
    Nlhu => "nlhu", OPC_NEAR_LOAD, Some(0b101), None, NI;
    Nsb => "nsb", OPC_STORE, Some(0b100), None, NS;
    Nsh => "nsh", OPC_STORE, Some(0b101), None, NS;
    Nsw => "nsw", OPC_STORE, Some(0b110), None, NS;
    Nflw => "nflw", OPC_LOAD_FP, Some(0b110), None, NI;
    Nfsw => "nfsw", OPC_STORE_FP, Some(0b110), None, NS;
}

impl Mnemonic {
    pub fn from_name(name: &str) -> Option<Mnemonic> {
        Mnemonic::ALL.iter().copied().find(|m| m.name() == name)
    }

    pub fn format(self) -> Format {
        self.encoding().format
    }

    pub fn is_near(self) -> bool {
        matches!(self.format(), Format::NI | Format::NS)
    }

    pub fn is_shift_imm(self) -> bool {
        matches!(self, Mnemonic::Slli | Mnemonic::Srli | Mnemonic::Srai)
    }

    pub fn is_load(self) -> bool {
        matches!(
            self,
            Mnemonic::Lb
                | Mnemonic::Lh
                | Mnemonic::Lw
                | Mnemonic::Lbu
                | Mnemonic::Lhu
                | Mnemonic::Flw
                | Mnemonic::Nlb
                | Mnemonic::Nlh
                | Mnemonic::Nlw
                | Mnemonic::Nlbu
                | Mnemonic::Nlhu
                | Mnemonic::Nflw
        )
    }

    pub fn is_store(self) -> bool {
        matches!(
            self,
            Mnemonic::Sb
                | Mnemonic::Sh
                | Mnemonic::Sw
                | Mnemonic::Fsw
                | Mnemonic::Nsb
                | Mnemonic::Nsh
                | Mnemonic::Nsw
                | Mnemonic::Nfsw
        )
    }

    /// Loads/stores whose data register is an f-register.
    pub fn is_fp_data(self) -> bool {
        matches!(
            self,
            Mnemonic::Flw | Mnemonic::Fsw | Mnemonic::Nflw | Mnemonic::Nfsw
        )
    }

    /// Access width in bytes for loads and stores.
    pub fn access_width(self) -> Option<u32> {
        use Mnemonic::*;
        match self {
            Lb | Lbu | Sb | Nlb | Nlbu | Nsb => Some(1),
            Lh | Lhu | Sh | Nlh | Nlhu | Nsh => Some(2),
            Lw | Sw | Flw | Fsw | Nlw | Nsw | Nflw | Nfsw => Some(4),
            _ => None,
        }
    }

    /// The near counterpart of a base load/store.
    pub fn near_form(self) -> Option<Mnemonic> {
        use Mnemonic::*;
        Some(match self {
            Lb => Nlb,
            Lh => Nlh,
            Lw => Nlw,
            Lbu => Nlbu,
            Lhu => Nlhu,
            Sb => Nsb,
            Sh => Nsh,
            Sw => Nsw,
            Flw => Nflw,
            Fsw => Nfsw,
            _ => return None,
        })
    }

    /// Immediate domain `(min, max)` and required alignment for this mnemonic.
    pub fn imm_domain(self, variant: EncodingVariant) -> (i64, i64, i64) {
        match self.format() {
            Format::R => (0, 0, 1),
            Format::I if self == Mnemonic::Ebreak => (0, 0, 1),
            Format::I if self.is_shift_imm() => (0, 31, 1),
            Format::I | Format::S => (-2048, 2047, 1),
            Format::B => (-4096, 4094, 2),
            Format::U => (0, 0xF_FFFF, 1),
            Format::J => (-(1 << 20), (1 << 20) - 2, 2),
            Format::NI | Format::NS => {
                let (min, max) = near_offset_domain(variant);
                (i64::from(min), i64::from(max), 1)
            }
        }
    }
}

impl fmt::Display for Mnemonic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A decoded instruction. Fields a format does not use are zero, and
/// `base_select` is only present for near mnemonics under the dual variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub mnemonic: Mnemonic,
    pub rd: Reg,
    pub rs1: Reg,
    pub rs2: Reg,
    pub imm: i32,
    pub base_select: Option<BaseSelect>,
}

impl Instruction {
    fn new(mnemonic: Mnemonic) -> Instruction {
        Instruction {
            mnemonic,
            rd: Reg::ZERO,
            rs1: Reg::ZERO,
            rs2: Reg::ZERO,
            imm: 0,
            base_select: None,
        }
    }

    pub fn r(mnemonic: Mnemonic, rd: Reg, rs1: Reg, rs2: Reg) -> Instruction {
        Instruction {
            rd,
            rs1,
            rs2,
            ..Instruction::new(mnemonic)
        }
    }

    /// I-type, including loads, `jalr` and immediate shifts.
    pub fn i(mnemonic: Mnemonic, rd: Reg, rs1: Reg, imm: i32) -> Instruction {
        Instruction {
            rd,
            rs1,
            imm,
            ..Instruction::new(mnemonic)
        }
    }

    /// S-type stores: `mnemonic rs2, imm(rs1)`.
    pub fn s(mnemonic: Mnemonic, rs2: Reg, rs1: Reg, imm: i32) -> Instruction {
        Instruction {
            rs1,
            rs2,
            imm,
            ..Instruction::new(mnemonic)
        }
    }

    pub fn b(mnemonic: Mnemonic, rs1: Reg, rs2: Reg, imm: i32) -> Instruction {
        Instruction::s(mnemonic, rs2, rs1, imm)
    }

    /// `lui` / `auipc`; `imm` is the 20-bit upper field.
    pub fn u(mnemonic: Mnemonic, rd: Reg, imm: i32) -> Instruction {
        Instruction {
            rd,
            imm,
            ..Instruction::new(mnemonic)
        }
    }

    pub fn j(rd: Reg, imm: i32) -> Instruction {
        Instruction::u(Mnemonic::Jal, rd, imm)
    }

    pub fn near_load(
        mnemonic: Mnemonic,
        rd: Reg,
        imm: i32,
        base_select: Option<BaseSelect>,
    ) -> Instruction {
        Instruction {
            rd,
            imm,
            base_select,
            ..Instruction::new(mnemonic)
        }
    }

    pub fn near_store(
        mnemonic: Mnemonic,
        rs2: Reg,
        imm: i32,
        base_select: Option<BaseSelect>,
    ) -> Instruction {
        Instruction {
            rs2,
            imm,
            base_select,
            ..Instruction::new(mnemonic)
        }
    }

    pub fn ebreak() -> Instruction {
        Instruction::new(Mnemonic::Ebreak)
    }

    /// Base register a near instruction addresses from.
    pub fn near_base(&self) -> Reg {
        self.base_select.map_or(Reg::GP, BaseSelect::reg)
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.mnemonic;
        let data = |r: Reg| {
            if m.is_fp_data() {
                r.fp_abi_name()
            } else {
                r.abi_name()
            }
        };
        match m.format() {
            Format::R => write!(
                f,
                "{m} {}, {}, {}",
                self.rd.abi_name(),
                self.rs1.abi_name(),
                self.rs2.abi_name()
            ),
            Format::I if m == Mnemonic::Ebreak => write!(f, "ebreak"),
            Format::I if m.is_load() || m == Mnemonic::Jalr => write!(
                f,
                "{m} {}, {}({})",
                data(self.rd),
                self.imm,
                self.rs1.abi_name()
            ),
            Format::I => write!(
                f,
                "{m} {}, {}, {}",
                self.rd.abi_name(),
                self.rs1.abi_name(),
                self.imm
            ),
            Format::S => write!(
                f,
                "{m} {}, {}({})",
                data(self.rs2),
                self.imm,
                self.rs1.abi_name()
            ),
            Format::B => write!(
                f,
                "{m} {}, {}, {}",
                self.rs1.abi_name(),
                self.rs2.abi_name(),
                self.imm
            ),
            Format::U => write!(f, "{m} {}, 0x{:x}", self.rd.abi_name(), self.imm),
            Format::J => write!(f, "{m} {}, {}", self.rd.abi_name(), self.imm),
            Format::NI => write!(
                f,
                "{m} {}, {}({})",
                data(self.rd),
                self.imm,
                self.near_base().abi_name()
            ),
            Format::NS => write!(
                f,
                "{m} {}, {}({})",
                data(self.rs2),
                self.imm,
                self.near_base().abi_name()
            ),
        }
    }
}

pub(crate) fn sign_extend(value: u32, bits: u32) -> i32 {
    let shift = 32 - bits;
    ((value << shift) as i32) >> shift
}

fn check_reg(field: &'static str, reg: Reg) -> Result<u32, IsaError> {
    if reg.0 < 32 {
        Ok(u32::from(reg.0))
    } else {
        Err(IsaError::FieldOutOfRange {
            field,
            value: u32::from(reg.0),
        })
    }
}

fn require_zero(field: &'static str, reg: Reg) -> Result<(), IsaError> {
    if reg.0 == 0 {
        Ok(())
    } else {
        Err(IsaError::FieldOutOfRange {
            field,
            value: u32::from(reg.0),
        })
    }
}

// Immediate scatter helpers. Each clears the immediate bits of `word` and
// installs `imm` (already range-checked by the caller).

pub fn with_i_imm(word: u32, imm: i32) -> u32 {
    (word & 0x000F_FFFF) | (((imm as u32) & 0xFFF) << 20)
}

pub fn with_s_imm(word: u32, imm: i32) -> u32 {
    let imm = imm as u32;
    (word & 0x01FF_F07F) | (((imm >> 5) & 0x7F) << 25) | ((imm & 0x1F) << 7)
}

pub fn with_b_imm(word: u32, imm: i32) -> u32 {
    let imm = imm as u32;
    (word & 0x01FF_F07F)
        | (((imm >> 12) & 1) << 31)
        | (((imm >> 5) & 0x3F) << 25)
        | (((imm >> 1) & 0xF) << 8)
        | (((imm >> 11) & 1) << 7)
}

pub fn with_u_imm(word: u32, imm20: u32) -> u32 {
    (word & 0xFFF) | ((imm20 & 0xF_FFFF) << 12)
}

pub fn with_j_imm(word: u32, imm: i32) -> u32 {
    let imm = imm as u32;
    (word & 0xFFF)
        | (((imm >> 20) & 1) << 31)
        | (((imm >> 1) & 0x3FF) << 21)
        | (((imm >> 11) & 1) << 20)
        | (((imm >> 12) & 0xFF) << 12)
}

/// Installs a near immediate (and, for dual, the base-select bit) into a
/// near load or store word. `store` picks the NS split of `imm[11:0]`.
pub fn with_near_imm(
    word: u32,
    imm: i32,
    variant: EncodingVariant,
    base_select: Option<BaseSelect>,
    store: bool,
) -> u32 {
    let low = if store {
        with_s_imm(word, imm)
    } else {
        with_i_imm(word, imm)
    };
    let upper = match variant {
        EncodingVariant::SingleRange128K => ((imm as u32) >> 12) & 0x1F,
        EncodingVariant::DualRange64K => {
            ((((imm as u32) >> 12) & 0xF) << 1) | base_select.map_or(0, BaseSelect::bit)
        }
    };
    (low & !(0x1F << 15)) | (upper << 15)
}

fn i_imm(word: u32) -> i32 {
    sign_extend(word >> 20, 12)
}

fn s_imm(word: u32) -> i32 {
    sign_extend(((word >> 25) << 5) | ((word >> 7) & 0x1F), 12)
}

fn b_imm(word: u32) -> i32 {
    let v = (((word >> 31) & 1) << 12)
        | (((word >> 7) & 1) << 11)
        | (((word >> 25) & 0x3F) << 5)
        | (((word >> 8) & 0xF) << 1);
    sign_extend(v, 13)
}

fn j_imm(word: u32) -> i32 {
    let v = (((word >> 31) & 1) << 20)
        | (((word >> 12) & 0xFF) << 12)
        | (((word >> 20) & 1) << 11)
        | (((word >> 21) & 0x3FF) << 1);
    sign_extend(v, 21)
}

fn near_fields(word: u32, low12: u32, variant: EncodingVariant) -> (i32, Option<BaseSelect>) {
    let field = (word >> 15) & 0x1F;
    match variant {
        EncodingVariant::SingleRange128K => (sign_extend((field << 12) | low12, 17), None),
        EncodingVariant::DualRange64K => {
            let bs = if field & 1 == 0 {
                BaseSelect::B0
            } else {
                BaseSelect::B1
            };
            (sign_extend(((field >> 1) << 12) | low12, 16), Some(bs))
        }
    }
}

/// Encodes `instr` for `variant`.
pub fn encode(instr: &Instruction, variant: EncodingVariant) -> Result<u32, IsaError> {
    let m = instr.mnemonic;
    let enc = m.encoding();
    let rd = check_reg("rd", instr.rd)?;
    let rs1 = check_reg("rs1", instr.rs1)?;
    let rs2 = check_reg("rs2", instr.rs2)?;

    let (min, max, align) = m.imm_domain(variant);
    let imm = i64::from(instr.imm);
    if imm < min || imm > max {
        return Err(IsaError::ImmediateOutOfRange {
            mnemonic: m,
            imm,
            min,
            max,
        });
    }
    if imm % align != 0 {
        return Err(IsaError::ImmediateMisaligned { mnemonic: m, imm });
    }

    if m.is_near() {
        match (variant, instr.base_select) {
            (EncodingVariant::SingleRange128K, None) | (EncodingVariant::DualRange64K, Some(_)) => {
            }
            _ => {
                return Err(IsaError::VariantMismatch {
                    mnemonic: m,
                    variant,
                })
            }
        }
    } else if instr.base_select.is_some() {
        return Err(IsaError::VariantMismatch {
            mnemonic: m,
            variant,
        });
    }

    let base = u32::from(enc.opcode) | (u32::from(enc.funct3.unwrap_or(0)) << 12);
    let word = match enc.format {
        Format::R => {
            base | (rd << 7)
                | (rs1 << 15)
                | (rs2 << 20)
                | (u32::from(enc.funct7.unwrap_or(0)) << 25)
        }
        Format::I if m == Mnemonic::Ebreak => {
            require_zero("rd", instr.rd)?;
            require_zero("rs1", instr.rs1)?;
            require_zero("rs2", instr.rs2)?;
            EBREAK_WORD
        }
        Format::I => {
            require_zero("rs2", instr.rs2)?;
            let w = base | (rd << 7) | (rs1 << 15);
            if let Some(f7) = enc.funct7 {
                w | ((instr.imm as u32) << 20) | (u32::from(f7) << 25)
            } else {
                with_i_imm(w, instr.imm)
            }
        }
        Format::S => {
            require_zero("rd", instr.rd)?;
            with_s_imm(base | (rs1 << 15) | (rs2 << 20), instr.imm)
        }
        Format::B => {
            require_zero("rd", instr.rd)?;
            with_b_imm(base | (rs1 << 15) | (rs2 << 20), instr.imm)
        }
        Format::U => {
            require_zero("rs1", instr.rs1)?;
            require_zero("rs2", instr.rs2)?;
            with_u_imm(base | (rd << 7), instr.imm as u32)
        }
        Format::J => {
            require_zero("rs1", instr.rs1)?;
            require_zero("rs2", instr.rs2)?;
            with_j_imm(base | (rd << 7), instr.imm)
        }
        Format::NI => {
            require_zero("rs1", instr.rs1)?;
            require_zero("rs2", instr.rs2)?;
            with_near_imm(
                base | (rd << 7),
                instr.imm,
                variant,
                instr.base_select,
                false,
            )
        }
        Format::NS => {
            require_zero("rd", instr.rd)?;
            require_zero("rs1", instr.rs1)?;
            with_near_imm(
                base | (rs2 << 20),
                instr.imm,
                variant,
                instr.base_select,
                true,
            )
        }
    };
    Ok(word)
}

fn lookup(word: u32) -> Option<Mnemonic> {
    let opcode = (word & 0x7F) as u8;
    let funct3 = ((word >> 12) & 0x7) as u8;
    let funct7 = (word >> 25) as u8;
    Mnemonic::ALL.iter().copied().find(|m| {
        let e = m.encoding();
        e.opcode == opcode
            && e.funct3.is_none_or(|f| f == funct3)
            && e.funct7.is_none_or(|f| f == funct7)
    })
}

/// Decodes a 32-bit word. Near opcodes are interpreted per `variant`.
pub fn decode(word: u32, variant: EncodingVariant) -> Result<Instruction, IsaError> {
    let m = lookup(word).ok_or(IsaError::IllegalInstruction(word))?;
    let rd = Reg(((word >> 7) & 0x1F) as u8);
    let rs1 = Reg(((word >> 15) & 0x1F) as u8);
    let rs2 = Reg(((word >> 20) & 0x1F) as u8);
    let instr = match m.format() {
        Format::R => Instruction::r(m, rd, rs1, rs2),
        Format::I if m == Mnemonic::Ebreak => {
            if word != EBREAK_WORD {
                return Err(IsaError::IllegalInstruction(word));
            }
            Instruction::ebreak()
        }
        Format::I if m.is_shift_imm() => Instruction::i(m, rd, rs1, ((word >> 20) & 0x1F) as i32),
        Format::I => Instruction::i(m, rd, rs1, i_imm(word)),
        Format::S => Instruction::s(m, rs2, rs1, s_imm(word)),
        Format::B => Instruction::b(m, rs1, rs2, b_imm(word)),
        Format::U => Instruction::u(m, rd, (word >> 12) as i32),
        Format::J => Instruction::j(rd, j_imm(word)),
        Format::NI => {
            let (imm, bs) = near_fields(word, word >> 20, variant);
            Instruction::near_load(m, rd, imm, bs)
        }
        Format::NS => {
            let low = ((word >> 25) << 5) | ((word >> 7) & 0x1F);
            let (imm, bs) = near_fields(word, low, variant);
            Instruction::near_store(m, rs2, imm, bs)
        }
    };
    Ok(instr)
}
