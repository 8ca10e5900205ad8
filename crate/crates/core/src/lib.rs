//! RV32 toolchain for near-addressing load/store extensions.
//!
//! The pieces compose as `asm` → `object` → `link` → `emu`, with `eval`
//! driving whole experiments over generated workloads.

pub mod asm;
pub mod config;
pub mod dis;
pub mod emu;
pub mod eval;
pub mod image;
pub mod isa;
pub mod link;
pub mod object;

pub use isa::{decode, encode, BaseSelect, EncodingVariant, Instruction, Mnemonic, Reg};
