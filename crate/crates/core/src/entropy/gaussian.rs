use std::borrow::Cow;
use std::f64::consts::{FRAC_1_SQRT_2, LN_2};

use super::cdf::CdfTable;
use super::{CoderError, SymbolModel};
use crate::tensor::{Real, ShapeError, Tape, Tensor, Var};

pub const SIGMA_MIN: f64 = 0.01;
/// Smallest probability any symbol is assigned, 2^-16.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / 65536.0;
/// Coder tables span `round(mu) ± ceil(TAIL_SIGMAS * sigma)`.
pub const TAIL_SIGMAS: f64 = 8.0;
/// Half width up to which every symbol gets its own table entry; wider
/// supports are split into power-of-two buckets.
pub const MAX_HALF_WIDTH: i64 = 256;
const MAX_CENTER: f64 = (1 << 24) as f64;

fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

fn density(x: f64) -> f64 {
    (-0.5 * x * x).exp() * 0.398_942_280_401_432_7
}

/// Mass of the unit bin around `s`, evaluated on the side of the mean where
/// both CDF values are small so the difference keeps its precision.
pub fn gaussian_mass(s: f64, mu: f64, sigma: f64) -> f64 {
    let sigma = sigma.max(SIGMA_MIN);
    let a = (s - mu).abs();
    (phi((0.5 - a) / sigma) - phi((-0.5 - a) / sigma)).max(0.0)
}

/// Bin probability of an integer (or noisy) symbol under `N(mu, sigma^2)`,
/// floored at [`LIKELIHOOD_FLOOR`].
pub fn gaussian_likelihood(s: f64, mu: f64, sigma: f64) -> f64 {
    gaussian_mass(s, mu, sigma).max(LIKELIHOOD_FLOOR)
}

/// Upper tail `P(Z > x)`.
fn upper(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Mass of the integer symbols `lo..=hi`, computed on the tail side so small
/// masses keep their precision.
fn range_mass(lo: i64, hi: i64, mu: f64, sigma: f64) -> f64 {
    let a = (lo as f64 - 0.5 - mu) / sigma;
    let b = (hi as f64 + 0.5 - mu) / sigma;
    if a >= 0.0 {
        (upper(a) - upper(b)).max(0.0)
    } else if b <= 0.0 {
        (upper(-b) - upper(-a)).max(0.0)
    } else {
        (1.0 - upper(-a) - upper(b)).max(0.0)
    }
}

/// Frozen coder table for one symbol.
pub fn gaussian_table(mu: f64, sigma: f64) -> Result<CdfTable, CoderError> {
    if !mu.is_finite() || !sigma.is_finite() {
        return Err(CoderError::InvalidTable(format!(
            "non-finite gaussian parameters ({mu}, {sigma})"
        )));
    }
    let sigma = sigma.max(SIGMA_MIN);
    let center = mu.round().clamp(-MAX_CENTER, MAX_CENTER) as i64;
    let half = ((TAIL_SIGMAS * sigma).ceil() as i64).clamp(1, MAX_CENTER as i64);
    if half <= MAX_HALF_WIDTH {
        let pmf: Vec<f64> = (-half..=half)
            .map(|d| gaussian_mass((center + d) as f64, mu, sigma))
            .collect();
        let escape = (1.0 - pmf.iter().sum::<f64>()).max(0.0);
        return CdfTable::from_pmf((center - half) as i32, &pmf, escape);
    }
    let shift = 64 - ((half - 1) / MAX_HALF_WIDTH).leading_zeros();
    let width = 1i64 << shift;
    let buckets = (2 * half + 1 + width - 1) / width;
    let start = center - buckets * width / 2;
    let pmf: Vec<f64> = (0..buckets)
        .map(|k| range_mass(start + k * width, start + (k + 1) * width - 1, mu, sigma))
        .collect();
    let escape = (1.0 - pmf.iter().sum::<f64>()).max(0.0);
    CdfTable::from_pmf(start as i32, &pmf, escape)?.with_shift(shift)
}

/// Per-symbol mean-scale model for one latent grid.
#[derive(Clone, Debug)]
pub struct GaussianModel {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl GaussianModel {
    pub fn new(mu: &[f32], sigma: &[f32]) -> Result<Self, CoderError> {
        if mu.len() != sigma.len() {
            return Err(CoderError::ModelLength {
                symbols: mu.len(),
                model: sigma.len(),
            });
        }
        if let Some(bad) = mu.iter().chain(sigma).find(|v| !v.is_finite()) {
            return Err(CoderError::InvalidTable(format!(
                "non-finite gaussian parameter {bad}"
            )));
        }
        Ok(Self {
            mu: mu.iter().map(|&v| v as f64).collect(),
            sigma: sigma.iter().map(|&v| (v as f64).max(SIGMA_MIN)).collect(),
        })
    }
}

impl SymbolModel for GaussianModel {
    fn len(&self) -> usize {
        self.mu.len()
    }

    fn table(&self, i: usize) -> Result<Cow<'_, CdfTable>, CoderError> {
        gaussian_table(self.mu[i], self.sigma[i]).map(Cow::Owned)
    }

    fn likelihood(&self, i: usize, s: i32) -> f64 {
        gaussian_likelihood(s as f64, self.mu[i], self.sigma[i])
    }
}

/// Elementwise bits `-log2 p(x)` under `N(mu, sigma^2)` on a tape.
///
/// Below the likelihood floor the gradient still flows as if the floor were
/// absent, so collapsed symbols can recover.
pub fn gaussian_bits<R: Real>(
    tape: &Tape<R>,
    x: &Var<R>,
    mu: &Var<R>,
    sigma: &Var<R>,
) -> Result<Var<R>, ShapeError> {
    let shape = x.shape();
    for other in [mu.shape(), sigma.shape()] {
        if other != shape {
            return Err(ShapeError::new(
                "gaussian_bits",
                format!("{shape} vs {other}"),
            ));
        }
    }
    let n = shape.numel();
    let mut bits = Vec::with_capacity(n);
    let (mut dx, mut dmu, mut dsigma) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let (xs, ms, ss) = (x.value().data(), mu.value().data(), sigma.value().data());
    for i in 0..n {
        let v = xs[i].as_f64() - ms[i].as_f64();
        let s = ss[i].as_f64().max(SIGMA_MIN);
        let a = v.abs();
        let hi = (0.5 - a) / s;
        let lo = (-0.5 - a) / s;
        let p = (phi(hi) - phi(lo)).max(0.0);
        let pf = p.max(LIKELIHOOD_FLOOR);
        bits.push(R::from_f64(-pf.log2()));
        let dbits_dp = -1.0 / (pf * LN_2);
        let (dh, dl) = (density(hi), density(lo));
        let dp_da = -(dh - dl) / s;
        let dp_ds = if ss[i].as_f64() >= SIGMA_MIN {
            -(dh * hi - dl * lo) / s
        } else {
            0.0
        };
        let sign = v.signum() * (v != 0.0) as u8 as f64;
        dx.push(R::from_f64(dbits_dp * dp_da * sign));
        dmu.push(R::from_f64(-dbits_dp * dp_da * sign));
        dsigma.push(R::from_f64(dbits_dp * dp_ds));
    }
    let value = Tensor::new(shape, bits)?;
    tape.fused_elementwise(value, &[(x, dx), (mu, dmu), (sigma, dsigma)])
}
