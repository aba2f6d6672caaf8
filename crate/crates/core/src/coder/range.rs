//! 64-bit range coder with carry propagation (LZMA-style byte output).

use super::cdf::CdfTable;
use crate::error::{Error, Result};

const TOP: u64 = 1 << 56;
const WINDOW_BITS: u32 = 64;
/// Bytes the decoder may read past the end of the stream; the encoder trims
/// trailing zeros and the decoder pads them back.
const MAX_OVERREAD: usize = 8;

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u128,
    range: u64,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u64::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> WINDOW_BITS) as u8;
        if self.low < (0xFFu128 << 56) || carry != 0 {
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 56) as u8;
        }
        self.pending += 1;
        self.low = (self.low & (TOP as u128 - 1)) << 8;
    }

    /// Encode the interval `[start, start + freq)` out of `2^precision`.
    pub fn encode_interval(&mut self, start: u32, freq: u32, precision: u32) {
        let total = 1u64 << precision;
        let r = self.range >> precision;
        self.low += (r * start as u64) as u128;
        self.range = if start as u64 + freq as u64 == total {
            self.range - r * start as u64
        } else {
            r * freq as u64
        };
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode(&mut self, symbol: i32, table: &CdfTable) -> Result<()> {
        let (start, freq) = table.interval(symbol)?;
        self.encode_interval(start, freq, table.precision());
        Ok(())
    }

    /// Flush a tail that pins a point of the final interval. The step is at
    /// most half the range, so the stream never carries fewer bits than the
    /// information content of the coded symbols.
    pub fn finish(mut self) -> Vec<u8> {
        let k = (63 - self.range.leading_zeros() - 1) / 8 * 8;
        let mask = (1u128 << k) - 1;
        self.low = (self.low + mask) & !mask;
        for _ in 0..=WINDOW_BITS / 8 {
            self.shift_low();
        }
        // The first byte is always zero: the window starts empty. The last
        // k/8 bytes are zero by construction and the decoder pads them back.
        let mut out = self.out.split_off(1);
        out.truncate(out.len() - (k / 8) as usize);
        out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = Self {
            data,
            pos: 0,
            code: 0,
            range: u64::MAX,
        };
        for _ in 0..WINDOW_BITS / 8 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Decode with a caller-provided lookup from a target count to
    /// `(symbol, start, freq)`.
    pub fn decode_with<T>(&mut self, precision: u32, lookup: impl FnOnce(u32) -> (T, u32, u32)) -> Result<T> {
        if self.pos > self.data.len() + MAX_OVERREAD {
            return Err(Error::Decode("range decoder ran past the end of the stream".into()));
        }
        let total = 1u64 << precision;
        let r = self.range >> precision;
        let target = (self.code / r).min(total - 1) as u32;
        let (sym, start, freq) = lookup(target);
        self.code -= r * start as u64;
        self.range = if start as u64 + freq as u64 == total {
            self.range - r * start as u64
        } else {
            r * freq as u64
        };
        if self.code >= self.range {
            return Err(Error::Decode("range decoder state is inconsistent".into()));
        }
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u64;
        }
        Ok(sym)
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<i32> {
        self.decode_with(table.precision(), |t| {
            let s = table.lookup(t);
            let (start, freq) = table.interval(s).expect("lookup stays in range");
            (s, start, freq)
        })
    }

    /// Error if the stream was exhausted beyond its padding.
    pub fn finish(&self) -> Result<()> {
        if self.pos > self.data.len() + MAX_OVERREAD {
            return Err(Error::Decode(format!(
                "stream too short: read {} of {} bytes",
                self.pos,
                self.data.len()
            )));
        }
        Ok(())
    }
}
