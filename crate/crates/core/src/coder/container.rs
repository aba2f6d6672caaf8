//! Bitstream container: a fixed big-endian header followed by the z and y
//! payloads.
//!
//! ```text
//! magic "AICT" | version u8 | flags u8 | height u32 | width u32 |
//! m_fixed u16 | quality_id u8 | z_len u32 | z | y_len u32 | y
//! ```

use crate::error::{Error, Result};
use crate::scale::{scaled_edge, ResizeFactor};

pub const MAGIC: [u8; 4] = *b"AICT";
pub const VERSION: u8 = 1;
pub const FLAG_ADAPTED: u8 = 1;
/// Bytes outside the two payloads.
pub const HEADER_LEN: usize = 4 + 1 + 1 + 4 + 4 + 2 + 1 + 4 + 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub flags: u8,
    pub height: u32,
    pub width: u32,
    pub m_fixed: u16,
    pub quality_id: u8,
    pub z: Vec<u8>,
    pub y: Vec<u8>,
}

impl Bitstream {
    pub fn adapted(&self) -> bool {
        self.flags & FLAG_ADAPTED != 0
    }

    pub fn resize_factor(&self) -> ResizeFactor {
        ResizeFactor::from_fixed(self.m_fixed)
    }

    /// Size of the image the latents describe.
    pub fn coded_size(&self) -> (usize, usize) {
        coded_size(self.height as usize, self.width as usize, self.m_fixed, self.adapted())
    }

    pub fn len(&self) -> usize {
        HEADER_LEN + self.z.len() + self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.flags);
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.width.to_be_bytes());
        out.extend_from_slice(&self.m_fixed.to_be_bytes());
        out.push(self.quality_id);
        out.extend_from_slice(&(self.z.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.z);
        out.extend_from_slice(&(self.y.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.y);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let flags = r.u8()?;
        if flags & !FLAG_ADAPTED != 0 {
            return Err(Error::Format(format!("unknown flags {flags:#04x}")));
        }
        let height = r.u32()?;
        let width = r.u32()?;
        let m_fixed = r.u16()?;
        let quality_id = r.u8()?;
        let z_len = r.u32()? as usize;
        let z = r.take(z_len)?.to_vec();
        let y_len = r.u32()? as usize;
        let y = r.take(y_len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            flags,
            height,
            width,
            m_fixed,
            quality_id,
            z,
            y,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated container: need {n} bytes at offset {}",
                self.pos
            ))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Size of the coded (possibly downscaled) image, derived from header
/// fields alone.
pub fn coded_size(height: usize, width: usize, m_fixed: u16, adapted: bool) -> (usize, usize) {
    if adapted {
        let m = ResizeFactor::from_fixed(m_fixed);
        (scaled_edge(m, height), scaled_edge(m, width))
    } else {
        (height, width)
    }
}
