//! 64-bit range coder with byte-wise renormalization.
//!
//! The encoder narrows `[low, low + range)` by each symbol's cumulative
//! interval and emits the top byte whenever it is settled; a two-byte flush
//! caps underflow when the range gets small without settling. The decoder
//! mirrors the same renormalization *before* consuming a symbol, so both
//! sides walk identical state.

use super::cdf::{CdfTable, CDF_TOTAL};

const RANGE_INIT: u64 = 1 << 40;

pub struct RangeEncoder {
    buffer: Vec<u8>,
    low: u64,
    range: u64,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> RangeEncoder {
        RangeEncoder {
            buffer: vec![],
            low: 0,
            range: RANGE_INIT,
        }
    }

    /// Narrow by the cumulative interval `[start, start + size)` out of
    /// [`CDF_TOTAL`]. `size` must be ≥ 1 (CDF tables guarantee this).
    pub fn encode_interval(&mut self, start: u32, size: u32) {
        debug_assert!(size >= 1 && start + size <= CDF_TOTAL);
        self.range /= CDF_TOTAL as u64;
        self.low += start as u64 * self.range;
        self.range *= size as u64;

        while (self.low >> 32) == (self.low + self.range - 1) >> 32 {
            self.emit_byte();
        }

        if self.range < 1 << 24 {
            self.emit_byte();
            self.emit_byte();
            self.range = RANGE_INIT - self.low;
        }
    }

    pub fn encode_symbol(&mut self, sym: i32, table: &CdfTable) {
        let (start, size) = table.interval(sym);
        self.encode_interval(start, size);
    }

    pub fn finish(mut self) -> Vec<u8> {
        while self.range < 1 << 32 {
            self.emit_byte();
        }
        self.low += 1 << 32;
        self.emit_byte();
        self.buffer
    }

    fn emit_byte(&mut self) {
        self.buffer.push((self.low >> 32) as u8);
        self.low = (self.low & 0xffff_ffff) << 8;
        self.range *= 256;
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    code: u64,
    low: u64,
    range: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> RangeDecoder<'a> {
        RangeDecoder {
            data,
            code: 0,
            low: 0,
            range: 1,
        }
    }

    /// Decode one symbol under `table`. Returns `None` when the coder state
    /// is inconsistent (truncated or corrupted payload).
    pub fn decode_symbol(&mut self, table: &CdfTable) -> Option<i32> {
        while self.low >> 32 == (self.low + self.range - 1) >> 32 {
            self.append_byte();
        }

        if self.range < 1 << 24 {
            self.append_byte();
            self.append_byte();
            self.range = RANGE_INIT - self.low;
        }

        if self.code < self.low || self.code - self.low >= self.range {
            return None;
        }
        let step = self.range / CDF_TOTAL as u64;
        let value = (((self.code - self.low) / step) as u32).min(CDF_TOTAL - 1);
        let sym = table.lookup(value);
        let (start, size) = table.interval(sym);

        self.range = step;
        self.low += start as u64 * self.range;
        self.range *= size as u64;

        Some(sym)
    }

    fn append_byte(&mut self) {
        self.code = (self.code & 0xffff_ffff) << 8;
        if let Some((&first, rest)) = self.data.split_first() {
            self.code |= first as u64;
            self.data = rest;
        }
        self.low = (self.low & 0xffff_ffff) << 8;
        self.range <<= 8;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coder::cdf::build_cdf;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_fixed_sequence() {
        let table = build_cdf(0.4, 2.5, 8);
        let syms = [0, -1, 3, 8, -8, 0, 0, 2, -5, 7, 1, 1, 1, -8];
        let mut enc = RangeEncoder::new();
        for &s in &syms {
            enc.encode_symbol(s, &table);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for &s in &syms {
            assert_eq!(dec.decode_symbol(&table), Some(s));
        }
    }

    #[test]
    fn round_trip_randomized_tables_and_symbols() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for clip in [1, 4, 255] {
            let tables: Vec<_> = (0..40)
                .map(|_| {
                    build_cdf(
                        rng.gen_range(-3.0f32..3.0),
                        rng.gen_range(0.04f32..20.0),
                        clip,
                    )
                })
                .collect();
            let syms: Vec<(usize, i32)> = (0..5000)
                .map(|_| (rng.gen_range(0..tables.len()), rng.gen_range(-clip..=clip)))
                .collect();
            let mut enc = RangeEncoder::new();
            for &(ti, s) in &syms {
                enc.encode_symbol(s, &tables[ti]);
            }
            let bytes = enc.finish();
            let mut dec = RangeDecoder::new(&bytes);
            for &(ti, s) in &syms {
                assert_eq!(dec.decode_symbol(&tables[ti]), Some(s), "clip {clip}");
            }
        }
    }

    #[test]
    fn coded_size_tracks_table_self_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = build_cdf(0.0, 4.0, 255);
        let syms: Vec<i32> = (0..20_000)
            .map(|_| (rng.gen_range(-12.0f64..12.0)).round() as i32)
            .collect();
        let mut enc = RangeEncoder::new();
        let mut ideal_bits = 0.0;
        for &s in &syms {
            enc.encode_symbol(s, &table);
            ideal_bits += table.self_info_bits(s);
        }
        let bytes = enc.finish();
        let actual_bits = 8.0 * bytes.len() as f64;
        assert!(actual_bits <= ideal_bits + 64.0 * 8.0, "{actual_bits} vs {ideal_bits}");
        assert!(actual_bits >= ideal_bits, "coder cannot beat its own model");
    }
}
