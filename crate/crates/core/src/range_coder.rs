//! 32-bit range coder with carry propagation over 16-bit quantized
//! cumulative tables.
//!
//! Sub-intervals are split as `range * cum >> 16`, so the coded length
//! tracks the table information to within a fraction of a bit. The final
//! state is flushed as four big-endian bytes.

use crate::error::{Error, Result};

/// Bits of precision of every cumulative table.
pub const PRECISION: u32 = 16;
const TOTAL: u32 = 1 << PRECISION;
const TOP: u64 = 1 << 24;
const FULL: u64 = 1 << 32;

/// Quantized cumulative distribution: `cum[0] = 0`, `cum[n] = 2^16`, and
/// every symbol has a count of at least one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cdf {
    cum: Vec<u32>,
}

impl Cdf {
    /// Builds a table from raw cumulative counts.
    pub fn from_cumulative(cum: Vec<u32>) -> Result<Self> {
        if cum.len() < 2 || cum[0] != 0 || *cum.last().unwrap() != TOTAL {
            return Err(Error::Pmf("cumulative table must run from 0 to 2^16".into()));
        }
        if cum.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Pmf("cumulative table must be strictly increasing".into()));
        }
        Ok(Self { cum })
    }

    pub fn alphabet(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    /// Quantized frequency of `symbol`.
    pub fn freq(&self, symbol: usize) -> u32 {
        self.cum[symbol + 1] - self.cum[symbol]
    }

    /// Probability the coder actually assigns to `symbol`.
    pub fn prob(&self, symbol: usize) -> f64 {
        self.freq(symbol) as f64 / TOTAL as f64
    }

    fn lookup(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

/// Quantizes a pmf to a [`Cdf`] by largest-remainder rounding, giving every
/// symbol a count of at least one.
///
/// The pmf must be finite and positive, sum to one within `2^-12`, and have
/// no more than `2^16` entries.
pub fn build_cdf(pmf: &[f64], precision: u32) -> Result<Cdf> {
    if precision != PRECISION {
        return Err(Error::Pmf(format!("only {PRECISION}-bit tables are supported")));
    }
    let n = pmf.len();
    if n == 0 || n > TOTAL as usize {
        return Err(Error::Pmf(format!("alphabet size {n} outside 1..=65536")));
    }
    if let Some(i) = pmf.iter().position(|p| !p.is_finite() || *p <= 0.0) {
        return Err(Error::Pmf(format!("entry {i} is {} (must be positive and finite)", pmf[i])));
    }
    let sum: f64 = pmf.iter().sum();
    if (sum - 1.0).abs() > 1.0 / 4096.0 {
        return Err(Error::Pmf(format!("entries sum to {sum}, expected 1")));
    }
    let scaled: Vec<f64> = pmf.iter().map(|p| p / sum * TOTAL as f64).collect();
    let mut counts: Vec<u32> = scaled.iter().map(|s| s.floor() as u32).collect();
    let assigned: u32 = counts.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    // stable on ties so the table is a pure function of the pmf
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take((TOTAL - assigned) as usize) {
        counts[i] += 1;
    }
    for i in 0..n {
        while counts[i] == 0 {
            let donor = (0..n).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0);
    let mut acc = 0;
    for c in counts {
        acc += c;
        cum.push(acc);
    }
    Cdf::from_cumulative(cum)
}

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    cache: Option<u8>,
    pending: usize,
    out: Vec<u8>,
    count: usize,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

/// Lower end of the sub-interval that starts at cumulative count `cum`.
fn split(range: u64, cum: u32) -> u64 {
    (range * cum as u64) >> PRECISION
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: FULL, cache: None, pending: 0, out: Vec::new(), count: 0 }
    }

    pub fn encode(&mut self, symbol: usize, cdf: &Cdf) -> Result<()> {
        let position = self.count;
        self.count += 1;
        if symbol >= cdf.alphabet() {
            return Err(Error::SymbolRange { position, symbol, alphabet: cdf.alphabet() });
        }
        if cdf.freq(symbol) == TOTAL {
            return Ok(());
        }
        let lo = split(self.range, cdf.cum[symbol]);
        let hi = split(self.range, cdf.cum[symbol + 1]);
        self.low += lo;
        self.range = hi - lo;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
        Ok(())
    }

    /// Moves the top byte of `low` out, resolving any pending carry.
    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= FULL {
            let carry = (self.low >> 32) as u8;
            if let Some(c) = self.cache {
                self.out.push(c.wrapping_add(carry));
            }
            self.out.extend(std::iter::repeat(0xFFu8.wrapping_add(carry)).take(self.pending));
            self.pending = 0;
            self.cache = Some((self.low >> 24) as u8);
        } else {
            self.pending += 1;
        }
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Flushes the state and returns the payload.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Offset of the code value from the low end of the interval.
    code: u64,
    range: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated { offset: bytes.len() });
        }
        let code = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as u64;
        Ok(Self { bytes, pos: 4, code, range: FULL })
    }

    pub fn decode(&mut self, cdf: &Cdf) -> Result<usize> {
        if cdf.alphabet() == 1 {
            return Ok(0);
        }
        // largest cumulative count whose split point is at or below the code
        let target = (((self.code + 1) << PRECISION) - 1) / self.range;
        if target >= TOTAL as u64 {
            return Err(Error::Corrupt { offset: self.pos, reason: "code value left the coding interval".into() });
        }
        let symbol = cdf.lookup(target as u32);
        let lo = split(self.range, cdf.cum[symbol]);
        let hi = split(self.range, cdf.cum[symbol + 1]);
        self.code -= lo;
        self.range = hi - lo;
        while self.range < TOP {
            let byte = *self.bytes.get(self.pos).ok_or(Error::Truncated { offset: self.pos })?;
            self.pos += 1;
            self.code = (self.code << 8) | byte as u64;
            self.range <<= 8;
        }
        Ok(symbol)
    }

    /// Checks that the whole payload was consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Corrupt {
                offset: self.pos,
                reason: format!("{} trailing bytes after the last symbol", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Encodes `symbols[i]` under `cdfs[i]`.
pub fn encode_symbols(symbols: &[usize], cdfs: &[&Cdf]) -> Result<Vec<u8>> {
    if symbols.len() != cdfs.len() {
        return Err(Error::invalid(format!("{} symbols but {} tables", symbols.len(), cdfs.len())));
    }
    let mut enc = RangeEncoder::new();
    for (&s, cdf) in symbols.iter().zip(cdfs) {
        enc.encode(s, cdf)?;
    }
    Ok(enc.finish())
}

/// Decodes one symbol per table and checks that nothing is left over.
pub fn decode_symbols(bytes: &[u8], cdfs: &[&Cdf]) -> Result<Vec<usize>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let out = cdfs.iter().map(|cdf| dec.decode(cdf)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_four_symbols() {
        let cdf = build_cdf(&[0.25; 4], 16).unwrap();
        assert_eq!(cdf.cumulative(), &[0, 16384, 32768, 49152, 65536]);
        let syms = [0, 1, 2, 3];
        let bytes = encode_symbols(&syms, &[&cdf; 4]).unwrap();
        assert!(bytes.len() <= 5, "{} bytes", bytes.len());
        assert_eq!(decode_symbols(&bytes, &[&cdf; 4]).unwrap(), syms);
    }

    #[test]
    fn certain_symbols_cost_nothing() {
        let cdf = Cdf::from_cumulative(vec![0, TOTAL]).unwrap();
        let bytes = encode_symbols(&[0; 100], &[&cdf; 100]).unwrap();
        assert_eq!(bytes.len(), 4);
        assert_eq!(decode_symbols(&bytes, &[&cdf; 100]).unwrap(), vec![0; 100]);
    }

    #[test]
    fn symbol_outside_alphabet() {
        let cdf = build_cdf(&[0.5, 0.5], 16).unwrap();
        let err = encode_symbols(&[1, 2], &[&cdf, &cdf]).unwrap_err();
        assert!(matches!(err, Error::SymbolRange { position: 1, symbol: 2, alphabet: 2 }));
    }

    #[test]
    fn rejects_bad_pmfs() {
        assert!(build_cdf(&[0.5, 0.6], 16).is_err());
        assert!(build_cdf(&[1.0, 0.0], 16).is_err());
        assert!(build_cdf(&[f64::NAN], 16).is_err());
        assert!(build_cdf(&[], 16).is_err());
        assert!(build_cdf(&[1.0], 12).is_err());
    }

    #[test]
    fn tiny_probabilities_keep_a_count() {
        let mut pmf = vec![1e-9; 10];
        pmf[0] = 1.0 - 9e-9;
        let cdf = build_cdf(&pmf, 16).unwrap();
        assert!((0..10).all(|s| cdf.freq(s) >= 1));
    }

    #[test]
    fn truncation_is_detected() {
        let cdf = build_cdf(&[0.1, 0.2, 0.3, 0.4], 16).unwrap();
        let syms: Vec<usize> = (0..200).map(|i| (i * 7) % 4).collect();
        let cdfs = vec![&cdf; syms.len()];
        let bytes = encode_symbols(&syms, &cdfs).unwrap();
        let err = decode_symbols(&bytes[..bytes.len() - 1], &cdfs).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err:?}");
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_symbols(&extra, &cdfs), Err(Error::Corrupt { .. })));
    }
}
