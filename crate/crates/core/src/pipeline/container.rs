//! Sequence bitstream layout. All integers are little-endian.
//!
//! ```text
//! header: "RPLV" version:u32 width:u32 height:u32 frame_count:u32 gop:u32
//!         lambda_index:u8 intra_id:u8 flags:u8 weights_checksum:u64
//! frame:  type:u8 section_count:u8 { length:u32 payload }*
//! ```

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RPLV";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 4 + 4 * 5 + 3 + 8;

/// Header flag: the motion and residual predictors are in use.
pub const FLAG_PREDICT: u8 = 1;

pub const P_SECTIONS: [&str; 4] = ["mv_hyper", "mv_delta", "res_hyper", "res_delta"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceHeader {
    pub width: u32,
    pub height: u32,
    pub frame_count: u32,
    pub gop: u32,
    pub lambda_index: u8,
    pub intra_id: u8,
    pub flags: u8,
    pub weights_checksum: u64,
}

impl SequenceHeader {
    pub fn predict(&self) -> bool {
        self.flags & FLAG_PREDICT != 0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.width, self.height, self.frame_count, self.gop] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&[self.lambda_index, self.intra_id, self.flags]);
        out.extend_from_slice(&self.weights_checksum.to_le_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::parse(0, "not a sequence bitstream (bad magic)"));
        }
        if bytes.len() < HEADER_BYTES {
            return Err(Error::parse(bytes.len(), "truncated sequence header"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::parse(4, format!("unsupported version {version}")));
        }
        let h = Self {
            width: u32_at(8),
            height: u32_at(12),
            frame_count: u32_at(16),
            gop: u32_at(20),
            lambda_index: bytes[24],
            intra_id: bytes[25],
            flags: bytes[26],
            weights_checksum: u64::from_le_bytes(bytes[27..35].try_into().unwrap()),
        };
        if h.width == 0 || h.height == 0 {
            return Err(Error::parse(8, "zero frame dimension"));
        }
        if h.gop == 0 {
            return Err(Error::parse(20, "zero gop length"));
        }
        if h.flags & !FLAG_PREDICT != 0 {
            return Err(Error::parse(26, format!("unknown flags {:#x}", h.flags)));
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameType {
    I = 0,
    P = 1,
}

/// One framed record: a type byte and length-prefixed sections.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameBitstream {
    pub frame_type: FrameType,
    pub sections: Vec<Vec<u8>>,
}

impl FrameBitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![self.frame_type as u8, self.sections.len() as u8];
        for s in &self.sections {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s);
        }
        out
    }

    /// Size of the serialized record in bits.
    pub fn bits(&self) -> u64 {
        8 * (2 + self
            .sections
            .iter()
            .map(|s| 4 + s.len() as u64)
            .sum::<u64>())
    }

    /// Parses one record starting at `offset`; returns it and the offset just
    /// past it. `frame` is only used for diagnostics.
    pub fn parse(bytes: &[u8], offset: usize, frame: usize) -> Result<(Self, usize)> {
        let corrupt = |at: usize, why: String| Error::parse(at, format!("frame {frame}: {why}"));
        let head = bytes
            .get(offset..offset + 2)
            .ok_or_else(|| corrupt(offset, "truncated frame record".into()))?;
        let frame_type = match head[0] {
            0 => FrameType::I,
            1 => FrameType::P,
            t => return Err(corrupt(offset, format!("unknown frame type {t}"))),
        };
        let count = head[1] as usize;
        let expected = match frame_type {
            FrameType::I => 1,
            FrameType::P => P_SECTIONS.len(),
        };
        if count != expected {
            return Err(corrupt(
                offset + 1,
                format!("{count} sections, expected {expected}"),
            ));
        }
        let mut at = offset + 2;
        let mut sections = Vec::with_capacity(count);
        for i in 0..count {
            let name = match frame_type {
                FrameType::I => "intra",
                FrameType::P => P_SECTIONS[i],
            };
            let len = bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                .ok_or_else(|| corrupt(at, format!("truncated length of {name}")))?;
            at += 4;
            if len == 0 {
                return Err(Error::CorruptSection {
                    frame,
                    section: name,
                    reason: "empty section".into(),
                });
            }
            let payload = at
                .checked_add(len)
                .and_then(|end| bytes.get(at..end))
                .ok_or_else(|| Error::CorruptSection {
                    frame,
                    section: name,
                    reason: format!("section of {len} bytes runs past the end"),
                })?;
            sections.push(payload.to_vec());
            at += len;
        }
        Ok((
            Self {
                frame_type,
                sections,
            },
            at,
        ))
    }
}

/// Splits a whole sequence into its header and frame records.
pub fn parse_sequence(bytes: &[u8]) -> Result<(SequenceHeader, Vec<FrameBitstream>)> {
    let header = SequenceHeader::parse(bytes)?;
    let mut at = HEADER_BYTES;
    let mut frames = Vec::with_capacity(header.frame_count as usize);
    for i in 0..header.frame_count as usize {
        let (f, next) = FrameBitstream::parse(bytes, at, i)?;
        frames.push(f);
        at = next;
    }
    if at != bytes.len() {
        return Err(Error::parse(at, "trailing bytes after the last frame"));
    }
    Ok((header, frames))
}
