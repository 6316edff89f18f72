use super::CoderError;

/// Bits of fixed-point precision in every frequency table.
pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;

/// Frozen frequency table over `nsym` buckets starting at `offset` plus one
/// trailing escape entry. Frequencies are at least 1 and sum to [`TOTAL`].
///
/// Each bucket spans `2^shift` consecutive symbols; the position inside a
/// bucket is sent as `shift` raw bits. Wide distributions use `shift > 0` so
/// their tables stay small.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    offset: i32,
    shift: u32,
    cum: Vec<u32>,
}

/// Largest bucket width exponent a table may use.
pub const MAX_SHIFT: u32 = 20;

impl CdfTable {
    /// Validates raw frequencies; the last entry is the escape symbol.
    pub fn from_freqs(offset: i32, freqs: &[u32]) -> Result<Self, CoderError> {
        if freqs.len() < 2 {
            return Err(CoderError::InvalidTable(
                "need at least one symbol plus escape".into(),
            ));
        }
        if freqs.len() as u64 > TOTAL as u64 {
            return Err(CoderError::InvalidTable(format!(
                "{} entries exceed precision",
                freqs.len()
            )));
        }
        if (offset as i64) + (freqs.len() as i64 - 1) > i32::MAX as i64 {
            return Err(CoderError::InvalidTable("support overflows i32".into()));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        cum.push(0u32);
        let mut acc = 0u64;
        for &f in freqs {
            if f == 0 {
                return Err(CoderError::InvalidTable("zero frequency".into()));
            }
            acc += f as u64;
            if acc > TOTAL as u64 {
                return Err(CoderError::InvalidTable("frequencies exceed total".into()));
            }
            cum.push(acc as u32);
        }
        if acc != TOTAL as u64 {
            return Err(CoderError::InvalidTable(format!(
                "frequencies sum to {acc}, expected {TOTAL}"
            )));
        }
        Ok(Self {
            offset,
            shift: 0,
            cum,
        })
    }

    /// The same frequencies over buckets of `2^shift` symbols.
    pub fn with_shift(mut self, shift: u32) -> Result<Self, CoderError> {
        let span = (self.nsym() as i64) << shift.min(MAX_SHIFT);
        if shift > MAX_SHIFT || self.offset as i64 + span - 1 > i32::MAX as i64 {
            return Err(CoderError::InvalidTable(format!(
                "bucket shift {shift} out of range"
            )));
        }
        self.shift = shift;
        Ok(self)
    }

    /// Quantizes a probability mass function. `pmf` covers the symbols from
    /// `offset` upward and `escape` is the mass outside that range; entries
    /// need not be normalized. Every entry gets at least one count and the
    /// remaining counts go by largest remainder, ties to the lower index.
    pub fn from_pmf(offset: i32, pmf: &[f64], escape: f64) -> Result<Self, CoderError> {
        let n = pmf.len() + 1;
        if pmf.is_empty() || n as u64 > TOTAL as u64 / 2 {
            return Err(CoderError::InvalidTable(format!("{} symbols", pmf.len())));
        }
        let clean = |p: f64| if p.is_finite() && p > 0.0 { p } else { 0.0 };
        let masses: Vec<f64> = pmf.iter().copied().chain([escape]).map(clean).collect();
        let total: f64 = masses.iter().sum();
        if total <= 0.0 {
            return Err(CoderError::InvalidTable("pmf has no mass".into()));
        }
        let spare = (TOTAL as usize - n) as f64;
        let mut freqs = Vec::with_capacity(n);
        let mut remainders = Vec::with_capacity(n);
        for &m in &masses {
            let scaled = m / total * spare;
            let whole = scaled.floor();
            freqs.push(1 + whole as u32);
            remainders.push(scaled - whole);
        }
        let assigned: u64 = freqs.iter().map(|&f| f as u64).sum();
        let deficit = (TOTAL as u64).saturating_sub(assigned) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| remainders[b].total_cmp(&remainders[a]).then(a.cmp(&b)));
        for &i in order.iter().cycle().take(deficit) {
            freqs[i] += 1;
        }
        Self::from_freqs(offset, &freqs)
    }

    pub fn offset(&self) -> i32 {
        self.offset
    }

    /// Bucket width exponent.
    pub fn shift(&self) -> u32 {
        self.shift
    }

    /// Number of regular buckets, excluding the escape entry.
    pub fn nsym(&self) -> usize {
        self.cum.len() - 2
    }

    /// One past the last symbol covered by the regular buckets.
    pub fn end(&self) -> i64 {
        self.offset as i64 + ((self.nsym() as i64) << self.shift)
    }

    pub fn escape_index(&self) -> usize {
        self.nsym()
    }

    pub fn cum(&self, index: usize) -> u32 {
        self.cum[index]
    }

    pub fn freq(&self, index: usize) -> u32 {
        self.cum[index + 1] - self.cum[index]
    }

    /// Bucket index of `s`, or `None` if it needs the escape path.
    pub fn index_of(&self, s: i32) -> Option<usize> {
        let d = s as i64 - self.offset as i64;
        (d >= 0 && (s as i64) < self.end()).then_some((d >> self.shift) as usize)
    }

    /// Position of `s` inside its bucket.
    pub fn low_bits(&self, s: i32) -> u32 {
        ((s as i64 - self.offset as i64) & ((1i64 << self.shift) - 1)) as u32
    }

    /// Symbol at position `low` of bucket `index`.
    pub fn symbol(&self, index: usize, low: u32) -> i32 {
        (self.offset as i64 + ((index as i64) << self.shift) + low as i64) as i32
    }

    /// Index whose cumulative interval contains `target`.
    pub fn lookup(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }

    /// Model probability of `s`; escaped symbols get the escape mass.
    pub fn probability(&self, s: i32) -> f64 {
        match self.index_of(s) {
            Some(i) => self.freq(i) as f64 / TOTAL as f64 / (1u64 << self.shift) as f64,
            None => self.freq(self.escape_index()) as f64 / TOTAL as f64,
        }
    }

    /// Cumulative distribution at the upper edge of each entry, in [0, 1].
    pub fn cdf(&self) -> Vec<f64> {
        self.cum.iter().map(|&c| c as f64 / TOTAL as f64).collect()
    }

    /// `offset` as i32 LE, entry count as u32 LE with the shift in its top
    /// byte, then each frequency as u16 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.cum.len() - 1;
        let mut out = Vec::with_capacity(8 + 2 * n);
        out.extend_from_slice(&self.offset.to_le_bytes());
        out.extend_from_slice(&(n as u32 | self.shift << 24).to_le_bytes());
        for i in 0..n {
            out.extend_from_slice(&(self.freq(i) as u16).to_le_bytes());
        }
        out
    }

    /// Inverse of [`CdfTable::to_bytes`]; returns the table and bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize), CoderError> {
        let short = || CoderError::Corrupt("truncated table".into());
        let offset = i32::from_le_bytes(bytes.get(0..4).ok_or_else(short)?.try_into().unwrap());
        let packed = u32::from_le_bytes(bytes.get(4..8).ok_or_else(short)?.try_into().unwrap());
        let (n, shift) = ((packed & 0xff_ffff) as usize, packed >> 24);
        let end = 8 + 2 * n;
        let body = bytes.get(8..end).ok_or_else(short)?;
        let freqs: Vec<u32> = body
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
            .collect();
        Ok((Self::from_freqs(offset, &freqs)?.with_shift(shift)?, end))
    }
}
