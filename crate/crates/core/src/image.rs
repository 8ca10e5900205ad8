//! Linked executable images and their loadable text format.
//!
//! ```text
//! IMAGE 1
//! variant single|dual
//! entry 0x80000000
//! reg gp 0x80110000
//! code 0x80000000 <len>
//! symbol <name> 0x<addr> <size> <kind>
//! blob 0x<addr> <hexbytes>
//! ```
//!
//! `code` lines mark instruction ranges for the disassembler; `symbol` lines
//! carry the final symbol map.

use std::fmt::Write as _;

use thiserror::Error;

use crate::isa::{EncodingVariant, Reg};
use crate::object::SectionKind;

pub const IMAGE_MAGIC: &str = "IMAGE";
pub const IMAGE_VERSION: u32 = 1;
const BLOB_LINE_BYTES: usize = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported image version {0}")]
    VersionMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blob {
    pub addr: u32,
    pub bytes: Vec<u8>,
}

impl Blob {
    pub fn end(&self) -> u64 {
        u64::from(self.addr) + self.bytes.len() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSymbol {
    pub name: String,
    pub addr: u32,
    pub size: u32,
    pub kind: SectionKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub variant: EncodingVariant,
    pub entry: u32,
    /// Base registers the loader initializes (`gp`, or `t0`/`t1`).
    pub regs: Vec<(Reg, u32)>,
    /// Instruction ranges `(start, len)`.
    pub code: Vec<(u32, u32)>,
    pub symbols: Vec<ImageSymbol>,
    pub blobs: Vec<Blob>,
    pub code_size_bytes: u32,
}

impl Image {
    pub fn empty(variant: EncodingVariant, entry: u32) -> Image {
        Image {
            variant,
            entry,
            regs: Vec::new(),
            code: Vec::new(),
            symbols: Vec::new(),
            blobs: Vec::new(),
            code_size_bytes: 0,
        }
    }

    pub fn symbol(&self, name: &str) -> Option<&ImageSymbol> {
        self.symbols.iter().find(|s| s.name == name)
    }

    pub fn reg(&self, reg: Reg) -> Option<u32> {
        self.regs.iter().find(|(r, _)| *r == reg).map(|(_, v)| *v)
    }

    /// Reads a little-endian word from the blobs, if mapped.
    pub fn word_at(&self, addr: u32) -> Option<u32> {
        let b = self
            .blobs
            .iter()
            .find(|b| addr >= b.addr && u64::from(addr) + 4 <= b.end())?;
        let o = (addr - b.addr) as usize;
        Some(u32::from_le_bytes(b.bytes[o..o + 4].try_into().unwrap()))
    }

    pub fn is_code(&self, addr: u32) -> bool {
        self.code
            .iter()
            .any(|&(s, l)| addr >= s && u64::from(addr) < u64::from(s) + u64::from(l))
    }
}

pub fn write_image(image: &Image) -> String {
    let mut out = format!("{IMAGE_MAGIC} {IMAGE_VERSION}\n");
    writeln!(out, "variant {}", image.variant).unwrap();
    writeln!(out, "entry 0x{:08x}", image.entry).unwrap();
    for (reg, value) in &image.regs {
        writeln!(out, "reg {} 0x{value:08x}", reg.abi_name()).unwrap();
    }
    for (start, len) in &image.code {
        writeln!(out, "code 0x{start:08x} {len}").unwrap();
    }
    for s in &image.symbols {
        writeln!(
            out,
            "symbol {} 0x{:08x} {} {}",
            s.name,
            s.addr,
            s.size,
            s.kind.as_str()
        )
        .unwrap();
    }
    for blob in &image.blobs {
        for (i, chunk) in blob.bytes.chunks(BLOB_LINE_BYTES).enumerate() {
            let addr = blob.addr + (i * BLOB_LINE_BYTES) as u32;
            writeln!(out, "blob 0x{addr:08x} {}", hex::encode(chunk)).unwrap();
        }
    }
    out
}

fn parse_u32(tok: Option<&str>, line: usize, what: &str) -> Result<u32, ImageError> {
    let tok = tok.ok_or_else(|| ImageError::Parse {
        line,
        message: format!("missing {what}"),
    })?;
    let parsed = match tok.strip_prefix("0x") {
        Some(h) => u32::from_str_radix(h, 16).ok(),
        None => tok.parse().ok(),
    };
    parsed.ok_or_else(|| ImageError::Parse {
        line,
        message: format!("invalid {what} `{tok}`"),
    })
}

/// Parses an image. Adjacent `blob` lines are coalesced.
pub fn read_image(text: &str) -> Result<Image, ImageError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.by_ref().find(|(_, l)| !l.is_empty()) {
        Some((n, h)) => {
            let parts: Vec<_> = h.split_whitespace().collect();
            if parts.len() != 2 || parts[0] != IMAGE_MAGIC {
                return Err(ImageError::Parse {
                    line: n,
                    message: format!("expected `{IMAGE_MAGIC} {IMAGE_VERSION}` header"),
                });
            }
            if parts[1] != IMAGE_VERSION.to_string() {
                return Err(ImageError::VersionMismatch(parts[1].to_string()));
            }
        }
        None => {
            return Err(ImageError::Parse {
                line: 1,
                message: "empty image".into(),
            })
        }
    }
    let mut image = Image::empty(EncodingVariant::SingleRange128K, 0);
    for (n, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| ImageError::Parse {
            line: n,
            message: m,
        };
        let mut t = line.split_whitespace();
        match t.next().unwrap() {
            "variant" => {
                image.variant = t.next().unwrap_or("").parse().map_err(bad)?;
            }
            "entry" => image.entry = parse_u32(t.next(), n, "entry")?,
            "reg" => {
                let name = t.next().unwrap_or("");
                let reg =
                    Reg::parse(name).ok_or_else(|| bad(format!("unknown register `{name}`")))?;
                image
                    .regs
                    .push((reg, parse_u32(t.next(), n, "register value")?));
            }
            "code" => {
                let start = parse_u32(t.next(), n, "code start")?;
                let len = parse_u32(t.next(), n, "code length")?;
                image.code.push((start, len));
                image.code_size_bytes += len;
            }
            "symbol" => {
                let name = t
                    .next()
                    .ok_or_else(|| bad("missing symbol name".into()))?
                    .to_string();
                let addr = parse_u32(t.next(), n, "symbol address")?;
                let size = parse_u32(t.next(), n, "symbol size")?;
                let kind = t.next().unwrap_or("").parse().map_err(bad)?;
                image.symbols.push(ImageSymbol {
                    name,
                    addr,
                    size,
                    kind,
                });
            }
            "blob" => {
                let addr = parse_u32(t.next(), n, "blob address")?;
                let hex = t.next().ok_or_else(|| bad("missing blob bytes".into()))?;
                let bytes = hex::decode(hex).map_err(|e| bad(format!("bad hex bytes: {e}")))?;
                match image.blobs.last_mut() {
                    Some(last) if last.end() == u64::from(addr) => last.bytes.extend(bytes),
                    _ => image.blobs.push(Blob { addr, bytes }),
                }
            }
            other => return Err(bad(format!("unknown record `{other}`"))),
        }
        if let Some(extra) = t.next() {
            return Err(bad(format!("trailing token `{extra}`")));
        }
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let image = Image {
            variant: EncodingVariant::DualRange64K,
            entry: 0x8000_0000,
            regs: vec![(Reg::T0, 0x8010_8000), (Reg::T1, 0x800F_8000)],
            code: vec![(0x8000_0000, 8)],
            symbols: vec![ImageSymbol {
                name: "g".into(),
                addr: 0x8010_0000,
                size: 4,
                kind: SectionKind::Data,
            }],
            blobs: vec![
                Blob {
                    addr: 0x8000_0000,
                    bytes: vec![0x13, 0, 0, 0, 0x73, 0, 0x10, 0],
                },
                Blob {
                    addr: 0x8010_0000,
                    bytes: (0..200).map(|i| i as u8).collect(),
                },
            ],
            code_size_bytes: 8,
        };
        let text = write_image(&image);
        assert!(text.starts_with("IMAGE 1\nvariant dual\nentry 0x80000000\nreg t0 0x80108000\n"));
        assert_eq!(read_image(&text).unwrap(), image);
        assert_eq!(image.word_at(0x8000_0004), Some(0x0010_0073));
        assert_eq!(image.word_at(0x8000_0006), None);
    }

    #[test]
    fn header_checks() {
        assert!(matches!(
            read_image("IMAGE 9\n"),
            Err(ImageError::VersionMismatch(_))
        ));
        assert!(matches!(
            read_image("NEAROBJ 1\n"),
            Err(ImageError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            read_image("IMAGE 1\nreg q9 0x0\n"),
            Err(ImageError::Parse { line: 2, .. })
        ));
    }
}
