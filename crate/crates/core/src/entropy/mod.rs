//! Quantization, likelihood models and the range coder.

mod cdf;
pub mod factorized;
mod gaussian;
mod rangecoder;

use std::borrow::Cow;

use rand::Rng;

use crate::tensor::{Real, Shape, Tape, Tensor, Var};

pub use cdf::{CdfTable, PRECISION, TOTAL};
pub use factorized::{factorized_bits, FactorizedModel, FactorizedPrior};
pub use gaussian::{
    gaussian_bits, gaussian_likelihood, gaussian_mass, gaussian_table, GaussianModel,
    LIKELIHOOD_FLOOR, SIGMA_MIN,
};
pub use rangecoder::{RangeDecoder, RangeEncoder};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CoderError {
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error("{symbols} symbols but model describes {model}")]
    ModelLength { symbols: usize, model: usize },
    #[error("corrupt stream: {0}")]
    Corrupt(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive uniform noise in [-0.5, 0.5); the training relaxation.
    Noise,
    /// Round half away from zero, no gradient.
    Round,
    /// Round in the forward pass, identity gradient.
    StraightThrough,
}

/// Rounds half away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

pub fn quantize<R: Real>(
    tape: &Tape<R>,
    x: &Var<R>,
    mode: QuantMode,
    rng: &mut impl Rng,
) -> Var<R> {
    match mode {
        QuantMode::Noise => {
            let noise = Tensor::from_fn(x.shape(), |_, _, _, _| {
                R::from_f64(rng.random_range(-0.5..0.5))
            });
            tape.add(x, &tape.constant(noise))
                .expect("noise has the input shape")
        }
        QuantMode::Round => tape.constant(x.value().map(|v| v.round())),
        QuantMode::StraightThrough => tape.round_straight_through(x),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LatentOrigin {
    MvHyper,
    MvDelta,
    ResHyper,
    ResDelta,
}

impl LatentOrigin {
    pub const ALL: [Self; 4] = [Self::MvHyper, Self::MvDelta, Self::ResHyper, Self::ResDelta];

    pub fn name(self) -> &'static str {
        match self {
            Self::MvHyper => "mv_hyper",
            Self::MvDelta => "mv_delta",
            Self::ResHyper => "res_hyper",
            Self::ResDelta => "res_delta",
        }
    }
}

/// Integer symbol grid of one coded latent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentCode {
    pub symbols: Vec<i32>,
    pub shape: Shape,
    pub origin: LatentOrigin,
}

impl LatentCode {
    /// Rounds a real-valued tensor. Fails on values outside the i32 range.
    pub fn from_tensor<R: Real>(t: &Tensor<R>, origin: LatentOrigin) -> Result<Self, CoderError> {
        let symbols = t
            .data()
            .iter()
            .map(|v| {
                let r = v.as_f64().round();
                if r.is_finite() && r.abs() <= i32::MAX as f64 {
                    Ok(r as i32)
                } else {
                    Err(CoderError::InvalidTable(format!(
                        "{} value {r} cannot be coded",
                        origin.name()
                    )))
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            symbols,
            shape: t.shape(),
            origin,
        })
    }

    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        Tensor::new(
            self.shape,
            self.symbols
                .iter()
                .map(|&s| R::from_f64(s as f64))
                .collect(),
        )
        .expect("symbol count matches shape")
    }
}

/// Range-coded payload. Big-endian byte order, zero-padded final byte.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Bitstring {
    pub bytes: Vec<u8>,
}

impl Bitstring {
    pub fn bits(&self) -> u64 {
        self.bytes.len() as u64 * 8
    }
}

/// Per-symbol probability model shared by encoder and decoder.
pub trait SymbolModel {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frozen coder table for symbol `i`.
    fn table(&self, i: usize) -> Result<Cow<'_, CdfTable>, CoderError>;

    /// Probability used for rate estimates.
    fn likelihood(&self, i: usize, s: i32) -> f64;
}

/// One explicit table per symbol.
impl SymbolModel for [CdfTable] {
    fn len(&self) -> usize {
        <[CdfTable]>::len(self)
    }

    fn table(&self, i: usize) -> Result<Cow<'_, CdfTable>, CoderError> {
        Ok(Cow::Borrowed(&self[i]))
    }

    fn likelihood(&self, i: usize, s: i32) -> f64 {
        self[i].probability(s)
    }
}

/// The same table for every one of `len` symbols.
pub struct SharedTable<'a> {
    pub table: &'a CdfTable,
    pub len: usize,
}

impl SymbolModel for SharedTable<'_> {
    fn len(&self) -> usize {
        self.len
    }

    fn table(&self, _: usize) -> Result<Cow<'_, CdfTable>, CoderError> {
        Ok(Cow::Borrowed(self.table))
    }

    fn likelihood(&self, _: usize, s: i32) -> f64 {
        self.table.probability(s)
    }
}

fn check_len<M: SymbolModel + ?Sized>(n: usize, model: &M) -> Result<(), CoderError> {
    if n != model.len() {
        return Err(CoderError::ModelLength {
            symbols: n,
            model: model.len(),
        });
    }
    Ok(())
}

/// Symbols outside a table's support are escaped and sent as raw bits.
pub fn rc_encode<M: SymbolModel + ?Sized>(
    symbols: &[i32],
    model: &M,
) -> Result<Bitstring, CoderError> {
    check_len(symbols.len(), model)?;
    if symbols.is_empty() {
        return Ok(Bitstring::default());
    }
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        enc.encode_symbol(model.table(i)?.as_ref(), s);
    }
    Ok(Bitstring {
        bytes: enc.finish(),
    })
}

pub fn rc_decode<M: SymbolModel + ?Sized>(bytes: &[u8], model: &M) -> Result<Vec<i32>, CoderError> {
    if model.is_empty() {
        return if bytes.is_empty() {
            Ok(Vec::new())
        } else {
            Err(CoderError::Corrupt("payload for an empty latent".into()))
        };
    }
    if bytes.is_empty() {
        return Err(CoderError::Corrupt("empty payload".into()));
    }
    let mut dec = RangeDecoder::new(bytes);
    let out = (0..model.len())
        .map(|i| dec.decode_symbol(model.table(i)?.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    dec.finish()?;
    Ok(out)
}

/// Ideal code length `sum -log2 p(s)` in bits.
pub fn estimate_rate<M: SymbolModel + ?Sized>(
    symbols: &[i32],
    model: &M,
) -> Result<f64, CoderError> {
    check_len(symbols.len(), model)?;
    Ok(symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| -model.likelihood(i, s).log2())
        .sum())
}

/// Number of symbols that fall outside their table and take the escape path.
pub fn count_escapes<M: SymbolModel + ?Sized>(
    symbols: &[i32],
    model: &M,
) -> Result<usize, CoderError> {
    check_len(symbols.len(), model)?;
    let mut n = 0;
    for (i, &s) in symbols.iter().enumerate() {
        n += model.table(i)?.index_of(s).is_none() as usize;
    }
    Ok(n)
}
