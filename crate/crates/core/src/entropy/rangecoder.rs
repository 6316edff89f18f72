//! Carry-less range coder with a 64-bit state.
//!
//! The encoder keeps `low + range <= 2^64` at all times. When the top byte of
//! the interval is not yet settled but the range has shrunk below `BOT`, the
//! range is truncated to end at the next `BOT` boundary, which settles the
//! byte without ever propagating a carry.

use super::cdf::{CdfTable, PRECISION};
use super::CoderError;

const TOP: u64 = 1 << 56;
const BOT: u64 = 1 << 48;

/// Longest Exp-Golomb prefix accepted for escaped magnitudes.
const MAX_ESCAPE_BITS: u32 = 33;

pub struct RangeEncoder {
    low: u64,
    range: u64,
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
            out: Vec::new(),
        }
    }

    /// Codes the interval `[cum, cum + freq)` out of `2^bits`.
    pub fn encode(&mut self, cum: u32, freq: u32, bits: u32) {
        debug_assert!(freq > 0 && cum as u64 + freq as u64 <= 1u64 << bits);
        let r = self.range >> bits;
        self.low += r * cum as u64;
        if cum as u64 + freq as u64 == 1u64 << bits {
            self.range -= r * cum as u64;
        } else {
            self.range = r * freq as u64;
        }
        self.normalize();
    }

    /// Codes `nbits <= 16` raw bits.
    pub fn encode_bits(&mut self, value: u32, nbits: u32) {
        debug_assert!(nbits <= 16 && (value as u64) < 1u64 << nbits);
        self.encode(value, 1, nbits);
    }

    /// Up to 32 raw bits, high chunk first.
    fn encode_raw(&mut self, value: u32, nbits: u32) {
        if nbits > 16 {
            self.encode_bits(value >> 16, nbits - 16);
            self.encode_bits(value & 0xffff, 16);
        } else if nbits > 0 {
            self.encode_bits(value, nbits);
        }
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ (self.low + (self.range - 1))) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range = self.range.checked_mul(256).unwrap_or(u64::MAX);
        }
    }

    /// Emits the shortest byte string that, zero-extended, lands inside the
    /// final interval.
    pub fn finish(mut self) -> Vec<u8> {
        let lo = self.low as u128;
        let hi = lo + self.range as u128 - 1;
        for k in 1..=8u32 {
            let unit = 1u128 << (64 - 8 * k);
            let v = lo.div_ceil(unit) * unit;
            if v <= hi {
                let v = v as u64;
                for b in 0..k {
                    self.out.push((v >> (56 - 8 * b)) as u8);
                }
                break;
            }
        }
        self.out
    }

    pub fn encode_symbol(&mut self, table: &CdfTable, s: i32) {
        match table.index_of(s) {
            Some(i) => {
                self.encode(table.cum(i), table.freq(i), PRECISION);
                self.encode_raw(table.low_bits(s), table.shift());
            }
            None => {
                let esc = table.escape_index();
                self.encode(table.cum(esc), table.freq(esc), PRECISION);
                let below = (s as i64) < table.offset() as i64;
                let m = if below {
                    table.offset() as i64 - 1 - s as i64
                } else {
                    s as i64 - table.end()
                };
                self.encode_bits(below as u32, 1);
                self.encode_exp_golomb(m as u64);
            }
        }
    }

    fn encode_exp_golomb(&mut self, m: u64) {
        let v = m + 1;
        let n = 64 - v.leading_zeros();
        self.encode_bits(n, 6);
        let mut left = n - 1;
        while left > 0 {
            let chunk = left.min(16);
            left -= chunk;
            self.encode_bits(((v >> left) & ((1 << chunk) - 1)) as u32, chunk);
        }
    }
}

pub struct RangeDecoder<'a> {
    low: u64,
    range: u64,
    code: u64,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut d = Self {
            low: 0,
            range: u64::MAX,
            code: 0,
            bytes,
            pos: 0,
        };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Value in `0..2^bits` locating the next interval.
    pub fn target(&self, bits: u32) -> u32 {
        let r = self.range >> bits;
        let v = self.code.wrapping_sub(self.low) / r;
        v.min((1u64 << bits) - 1) as u32
    }

    /// Mirrors [`RangeEncoder::encode`] once the interval is known.
    pub fn consume(&mut self, cum: u32, freq: u32, bits: u32) {
        let r = self.range >> bits;
        self.low = self.low.wrapping_add(r * cum as u64);
        if cum as u64 + freq as u64 == 1u64 << bits {
            self.range -= r * cum as u64;
        } else {
            self.range = r * freq as u64;
        }
        loop {
            if (self.low ^ self.low.wrapping_add(self.range - 1)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte() as u64;
            self.low <<= 8;
            self.range = self.range.checked_mul(256).unwrap_or(u64::MAX);
        }
    }

    pub fn decode_bits(&mut self, nbits: u32) -> u32 {
        let v = self.target(nbits);
        self.consume(v, 1, nbits);
        v
    }

    fn decode_raw(&mut self, nbits: u32) -> u32 {
        if nbits > 16 {
            let hi = self.decode_bits(nbits - 16);
            (hi << 16) | self.decode_bits(16)
        } else if nbits > 0 {
            self.decode_bits(nbits)
        } else {
            0
        }
    }

    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<i32, CoderError> {
        let i = table.lookup(self.target(PRECISION));
        self.consume(table.cum(i), table.freq(i), PRECISION);
        if i < table.escape_index() {
            let low = self.decode_raw(table.shift());
            return Ok(table.symbol(i, low));
        }
        let below = self.decode_bits(1) == 1;
        let n = self.decode_bits(6);
        if n == 0 || n > MAX_ESCAPE_BITS {
            return Err(CoderError::Corrupt(format!("escape length {n}")));
        }
        let mut v = 1u64;
        let mut left = n - 1;
        while left > 0 {
            let chunk = left.min(16);
            left -= chunk;
            v = (v << chunk) | self.decode_bits(chunk) as u64;
        }
        let m = (v - 1) as i64;
        let s = if below {
            table.offset() as i64 - 1 - m
        } else {
            table.end() + m
        };
        i32::try_from(s).map_err(|_| CoderError::Corrupt(format!("escaped value {s}")))
    }

    /// Checks that the decoder consumed exactly the bytes a matching encoder
    /// would have produced (it may look up to seven zero bytes past the end).
    pub fn finish(self) -> Result<(), CoderError> {
        let len = self.bytes.len();
        if self.pos < len {
            Err(CoderError::Corrupt(format!(
                "{} trailing bytes",
                len - self.pos
            )))
        } else if self.pos > len + 7 {
            Err(CoderError::Corrupt("stream truncated".into()))
        } else {
            Ok(())
        }
    }
}
