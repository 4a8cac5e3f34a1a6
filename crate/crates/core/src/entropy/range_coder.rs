//! Byte-oriented range coder with a 32-bit range and carry propagation
//! through a cached byte (the LZMA scheme). Frequencies come from
//! [`CodingTable`]s; all arithmetic is integer.

use super::table::CodingTable;
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

/// Bytes emitted by [`RangeEncoder::finish`] beyond the coded content.
pub const FLUSH_BYTES: usize = 5;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
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
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, symbol: usize, table: &CodingTable) -> Result<()> {
        if symbol >= table.num_levels() {
            return Err(Error::SymbolOutOfRange {
                symbol,
                levels: table.num_levels(),
            });
        }
        let r = self.range >> table.precision();
        self.low += r as u64 * table.cumulative()[symbol] as u64;
        self.range = r * table.counts()[symbol];
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..FLUSH_BYTES {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < FLUSH_BYTES {
            return Err(Error::Truncated(format!("range-coded payload of {} bytes", bytes.len())));
        }
        if bytes[0] != 0 {
            return Err(Error::Corrupted("range-coded payload must start with a zero byte".into()));
        }
        let code = bytes[1..FLUSH_BYTES]
            .iter()
            .fold(0u32, |acc, &b| (acc << 8) | b as u32);
        Ok(Self {
            bytes,
            pos: FLUSH_BYTES,
            range: u32::MAX,
            code,
        })
    }

    pub fn decode(&mut self, table: &CodingTable) -> Result<usize> {
        let r = self.range >> table.precision();
        let target = self.code / r;
        if target >= 1 << table.precision() {
            return Err(Error::Corrupted("range decoder underflow".into()));
        }
        let symbol = table.lookup(target);
        self.code -= r * table.cumulative()[symbol];
        self.range = r * table.counts()[symbol];
        while self.range < TOP {
            let byte = *self
                .bytes
                .get(self.pos)
                .ok_or_else(|| Error::Truncated("range-coded payload ended early".into()))?;
            self.pos += 1;
            self.code = (self.code << 8) | byte as u32;
            self.range <<= 8;
        }
        Ok(symbol)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Encodes `symbols[i]` under `tables[i]`.
pub fn range_encode(symbols: &[usize], tables: &[CodingTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::Shape(format!("{} symbols, {} tables", symbols.len(), tables.len())));
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode(s, t)?;
    }
    Ok(enc.finish())
}

/// Decodes `count` symbols, symbol `i` under `tables[i]`.
pub fn range_decode(bytes: &[u8], tables: &[CodingTable], count: usize) -> Result<Vec<usize>> {
    if tables.len() < count {
        return Err(Error::Shape(format!("{count} symbols, {} tables", tables.len())));
    }
    let mut dec = RangeDecoder::new(bytes)?;
    tables[..count].iter().map(|t| dec.decode(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::build_coding_table;

    #[test]
    fn round_trip_small() {
        let t = build_coding_table(&[0.7, 0.2, 0.1], 12).unwrap();
        let symbols = vec![0, 1, 2, 0, 0, 2, 1, 0, 0, 0, 2, 2, 2, 1];
        let tables = vec![t; symbols.len()];
        let bytes = range_encode(&symbols, &tables).unwrap();
        assert_eq!(range_decode(&bytes, &tables, symbols.len()).unwrap(), symbols);
    }

    #[test]
    fn zero_entropy_source_is_flush_only() {
        let t = CodingTable::from_counts(vec![1 << 16], 16).unwrap();
        let tables = vec![t; 5000];
        let bytes = range_encode(&vec![0; 5000], &tables).unwrap();
        assert!(bytes.len() <= FLUSH_BYTES);
        assert_eq!(range_decode(&bytes, &tables, 5000).unwrap(), vec![0; 5000]);
    }

    #[test]
    fn out_of_range_symbol() {
        let t = build_coding_table(&[0.5, 0.5], 8).unwrap();
        assert!(matches!(
            range_encode(&[2], &[t]),
            Err(Error::SymbolOutOfRange { symbol: 2, levels: 2 })
        ));
    }

    #[test]
    fn truncated_payload() {
        let t = build_coding_table(&[0.01, 0.99], 16).unwrap();
        let symbols: Vec<usize> = (0..400).map(|i| usize::from(i % 3 == 0)).collect();
        let tables = vec![t; symbols.len()];
        let bytes = range_encode(&symbols, &tables).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(
            range_decode(cut, &tables, symbols.len()),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(range_decode(&bytes[..3], &tables, 1), Err(Error::Truncated(_))));
    }
}
