//! Range coder over 16-bit frequency tables.
//!
//! The encoder keeps a 64-bit `low` and a 32-bit `range`; a pending byte plus
//! a run of 0xFF bytes absorb carries, so no carry ever reaches bytes that
//! were already written.

use super::cdf::{CdfTable, PRECISION, TOTAL};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
    started: bool,
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
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
            started: false,
        }
    }

    fn emit(&mut self, byte: u8) {
        // The very first byte is always zero; it is implied on both sides.
        if self.started {
            self.out.push(byte);
        } else {
            debug_assert_eq!(byte, 0);
            self.started = true;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Codes the interval `[cum, cum + freq)` out of [`TOTAL`].
    pub fn encode_interval(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TOTAL);
        let r = self.range >> PRECISION;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode(&mut self, table: &CdfTable, symbol: usize) -> Result<()> {
        if symbol >= table.len() {
            return Err(Error::Config(format!(
                "symbol {symbol} outside an alphabet of {}",
                table.len()
            )));
        }
        self.encode_interval(table.cum(symbol), table.freq(symbol));
        Ok(())
    }

    /// Equiprobable bits, most significant first.
    pub fn encode_bits(&mut self, value: u64, bits: u32) {
        for i in (0..bits).rev() {
            let bit = ((value >> i) & 1) as u32;
            self.encode_interval(bit * (TOTAL / 2), TOTAL / 2);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next()? as u32;
        }
        Ok(d)
    }

    fn next(&mut self) -> Result<u8> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| Error::Truncated(format!("range coder needs byte {} of {}", self.pos, self.data.len())))?;
        self.pos += 1;
        Ok(b)
    }

    /// Position of the next symbol within `[0, TOTAL)`, before it is
    /// consumed with [`Self::consume`].
    fn target(&self) -> Result<(u32, u32)> {
        let r = self.range >> PRECISION;
        let v = self.code / r;
        if v >= TOTAL {
            return Err(Error::Corrupt("range decoder out of bounds".into()));
        }
        Ok((v, r))
    }

    fn consume(&mut self, r: u32, cum: u32, freq: u32) -> Result<()> {
        self.code -= r * cum;
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<usize> {
        let (v, r) = self.target()?;
        let s = table.find(v);
        self.consume(r, table.cum(s), table.freq(s))?;
        Ok(s)
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u64> {
        let mut value = 0u64;
        for _ in 0..bits {
            let (v, r) = self.target()?;
            let bit = (v >= TOTAL / 2) as u32;
            self.consume(r, bit * (TOTAL / 2), TOTAL / 2)?;
            value = (value << 1) | bit as u64;
        }
        Ok(value)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Codes `symbols[i]` with `tables[i]`.
pub fn rc_encode(symbols: &[usize], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::Config(format!(
            "{} symbols but {} tables",
            symbols.len(),
            tables.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode(t, s)?;
    }
    Ok(enc.finish())
}

pub fn rc_decode(bytes: &[u8], tables: &[&CdfTable]) -> Result<Vec<usize>> {
    let mut dec = RangeDecoder::new(bytes)?;
    tables.iter().map(|t| dec.decode(t)).collect()
}

/// Sum of `-log2 p` over the quantized probabilities of the coded symbols.
pub fn ideal_bits(symbols: &[usize], tables: &[&CdfTable]) -> f64 {
    symbols.iter().zip(tables).map(|(&s, t)| t.cost(s)).sum()
}

/// Alphabet `[-bound, bound]` with one escape bin at each end. Values past
/// the bound are sent as an escape followed by an order-0 Exp-Golomb code of
/// their distance beyond it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Escaped {
    pub bound: i64,
}

impl Escaped {
    pub fn new(bound: i64) -> Self {
        Self { bound }
    }

    pub fn symbols(self) -> usize {
        2 * self.bound as usize + 3
    }

    /// Symbol index of the in-range value `v`.
    pub fn index(self, v: i64) -> usize {
        (v + self.bound + 1) as usize
    }

    pub fn encode(self, enc: &mut RangeEncoder, table: &CdfTable, v: i64) -> Result<()> {
        let b = self.bound;
        if v < -b {
            enc.encode(table, 0)?;
            exp_golomb_encode(enc, (-b - 1 - v) as u64);
        } else if v > b {
            enc.encode(table, self.symbols() - 1)?;
            exp_golomb_encode(enc, (v - b - 1) as u64);
        } else {
            enc.encode(table, self.index(v))?;
        }
        Ok(())
    }

    pub fn decode(self, dec: &mut RangeDecoder, table: &CdfTable) -> Result<i64> {
        let b = self.bound;
        let s = dec.decode(table)?;
        Ok(if s == 0 {
            -b - 1 - exp_golomb_decode(dec)? as i64
        } else if s == self.symbols() - 1 {
            b + 1 + exp_golomb_decode(dec)? as i64
        } else {
            s as i64 - b - 1
        })
    }
}

const MAX_GOLOMB_PREFIX: u32 = 62;

fn exp_golomb_encode(enc: &mut RangeEncoder, n: u64) {
    let m = n + 1;
    let k = 63 - m.leading_zeros();
    for _ in 0..k {
        enc.encode_bits(1, 1);
    }
    enc.encode_bits(0, 1);
    enc.encode_bits(m & ((1u64 << k) - 1), k);
}

fn exp_golomb_decode(dec: &mut RangeDecoder) -> Result<u64> {
    let mut k = 0;
    while dec.decode_bits(1)? == 1 {
        k += 1;
        if k > MAX_GOLOMB_PREFIX {
            return Err(Error::Corrupt("Exp-Golomb prefix too long".into()));
        }
    }
    let rest = dec.decode_bits(k)?;
    Ok(((1u64 << k) | rest) - 1)
}
