//! Non-parametric factorized density for hyper-latents.
//!
//! Each channel owns a small monotone network `x -> logit(F(x))` built from
//! softplus-positive matrices with tanh gating, so `F` is a valid CDF. Bin
//! probabilities are `F(x + 0.5) - F(x - 0.5)`.

use std::borrow::Cow;
use std::f64::consts::LN_2;

use rand::Rng;

use super::cdf::CdfTable;
use super::gaussian::LIKELIHOOD_FLOOR;
use super::{CoderError, SymbolModel};
use crate::tensor::{Real, Shape, ShapeError, Tape, Tensor, Var};

pub const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
pub const LAYERS: usize = FILTERS.len() - 1;
/// Matrices (24) + biases (10) + gating factors (9).
pub const PARAMS_PER_CHANNEL: usize = 43;
/// Coder tables cover `-TABLE_RADIUS..=TABLE_RADIUS`; anything else escapes.
pub const TABLE_RADIUS: i32 = 64;
pub const INIT_SCALE: f64 = 10.0;

#[derive(Clone, Copy)]
struct Layout {
    matrix: usize,
    bias: usize,
    factor: Option<usize>,
    rows: usize,
    cols: usize,
}

const fn layout() -> [Layout; LAYERS] {
    let mut out = [Layout {
        matrix: 0,
        bias: 0,
        factor: None,
        rows: 0,
        cols: 0,
    }; LAYERS];
    let mut at = 0;
    let mut k = 0;
    while k < LAYERS {
        let (rows, cols) = (FILTERS[k + 1], FILTERS[k]);
        let matrix = at;
        at += rows * cols;
        let bias = at;
        at += rows;
        let factor = if k + 1 < LAYERS {
            let f = at;
            at += rows;
            Some(f)
        } else {
            None
        };
        out[k] = Layout {
            matrix,
            bias,
            factor,
            rows,
            cols,
        };
        k += 1;
    }
    assert!(at == PARAMS_PER_CHANNEL);
    out
}

const LAYOUT: [Layout; LAYERS] = layout();

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Initial parameters for `channels` channels, shaped `(channels, 43, 1, 1)`.
/// The matrices start so the composed CDF has a spread of about
/// [`INIT_SCALE`]; biases are uniform in ±0.5 and gating factors are zero.
pub fn init_params(channels: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let scale = INIT_SCALE.powf(1.0 / (LAYERS as f64 + 1.0));
    let mut data = vec![0f32; channels * PARAMS_PER_CHANNEL];
    for ch in data.chunks_exact_mut(PARAMS_PER_CHANNEL) {
        for (k, l) in LAYOUT.iter().enumerate() {
            let init = (1.0 / scale / FILTERS[k + 1] as f64).exp_m1().ln() as f32;
            ch[l.matrix..l.matrix + l.rows * l.cols].fill(init);
            for b in &mut ch[l.bias..l.bias + l.rows] {
                *b = rng.random_range(-0.5..0.5);
            }
        }
    }
    Tensor::from_parts(Shape::new(channels, PARAMS_PER_CHANNEL, 1, 1), data)
}

pub fn param_shape(channels: usize) -> Shape {
    Shape::new(channels, PARAMS_PER_CHANNEL, 1, 1)
}

/// Cumulative logit at `x` for one channel, plus its derivatives with respect
/// to `x` and every parameter when `grad` is given.
fn logit(theta: &[f64], x: f64, grad: Option<&mut [f64; PARAMS_PER_CHANNEL + 1]>) -> f64 {
    let mut inputs: [[f64; 3]; LAYERS] = [[0.0; 3]; LAYERS];
    let mut pre: [[f64; 3]; LAYERS] = [[0.0; 3]; LAYERS];
    let mut h = [x, 0.0, 0.0];
    for (k, l) in LAYOUT.iter().enumerate() {
        inputs[k] = h;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate().take(l.rows) {
            let mut acc = theta[l.bias + i];
            for (j, &hj) in h.iter().enumerate().take(l.cols) {
                acc += softplus(theta[l.matrix + i * l.cols + j]) * hj;
            }
            *o = acc;
        }
        pre[k] = out;
        if let Some(f) = l.factor {
            for i in 0..l.rows {
                out[i] += theta[f + i].tanh() * out[i].tanh();
            }
        }
        h = out;
    }
    let Some(grad) = grad else { return h[0] };
    grad.fill(0.0);
    let mut g = [1.0, 0.0, 0.0];
    for (k, l) in LAYOUT.iter().enumerate().rev() {
        if let Some(f) = l.factor {
            for i in 0..l.rows {
                let t = pre[k][i].tanh();
                let tf = theta[f + i].tanh();
                grad[f + i] += g[i] * t * (1.0 - tf * tf);
                g[i] *= 1.0 + tf * (1.0 - t * t);
            }
        }
        let mut gin = [0.0; 3];
        for i in 0..l.rows {
            grad[l.bias + i] += g[i];
            for j in 0..l.cols {
                let m = theta[l.matrix + i * l.cols + j];
                grad[l.matrix + i * l.cols + j] += g[i] * inputs[k][j] * sigmoid(m);
                gin[j] += softplus(m) * g[i];
            }
        }
        g = gin;
    }
    grad[PARAMS_PER_CHANNEL] = g[0];
    h[0]
}

/// Bin probability of `x` with the sign trick: both CDF evaluations are
/// taken on the tail where they are small.
fn bin(theta: &[f64], x: f64) -> f64 {
    let lower = logit(theta, x - 0.5, None);
    let upper = logit(theta, x + 0.5, None);
    let sign = if lower + upper > 0.0 { -1.0 } else { 1.0 };
    (sigmoid(sign * upper) - sigmoid(sign * lower)).abs()
}

/// Per-channel prior with parameters frozen to f64.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    theta: Vec<f64>,
    channels: usize,
}

impl FactorizedPrior {
    pub fn from_tensor(params: &Tensor<f32>) -> Result<Self, CoderError> {
        let s = params.shape();
        if s.c != PARAMS_PER_CHANNEL || s.n == 0 || s.h != 1 || s.w != 1 {
            return Err(CoderError::InvalidTable(format!(
                "factorized prior parameters must be Cx{PARAMS_PER_CHANNEL}x1x1, got {s}"
            )));
        }
        if !params.is_finite() {
            return Err(CoderError::InvalidTable(
                "non-finite factorized prior parameter".into(),
            ));
        }
        Ok(Self {
            theta: params.data().iter().map(|&v| v as f64).collect(),
            channels: s.n,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn theta(&self, c: usize) -> &[f64] {
        &self.theta[c * PARAMS_PER_CHANNEL..(c + 1) * PARAMS_PER_CHANNEL]
    }

    /// Unfloored bin probability of `x` in channel `c`.
    pub fn mass(&self, c: usize, x: f64) -> f64 {
        bin(self.theta(c), x)
    }

    pub fn likelihood(&self, c: usize, x: f64) -> f64 {
        self.mass(c, x).max(LIKELIHOOD_FLOOR)
    }

    /// Continuous CDF of channel `c`.
    pub fn cdf(&self, c: usize, x: f64) -> f64 {
        sigmoid(logit(self.theta(c), x, None))
    }

    pub fn table(&self, c: usize) -> Result<CdfTable, CoderError> {
        let pmf: Vec<f64> = (-TABLE_RADIUS..=TABLE_RADIUS)
            .map(|s| self.mass(c, s as f64))
            .collect();
        let escape = (1.0 - pmf.iter().sum::<f64>()).max(0.0);
        CdfTable::from_pmf(-TABLE_RADIUS, &pmf, escape)
    }

    /// Coder model for a `(1, channels, h, w)` symbol grid.
    pub fn model(&self, shape: Shape) -> Result<FactorizedModel, CoderError> {
        if shape.c != self.channels {
            return Err(CoderError::InvalidTable(format!(
                "prior has {} channels, latent {shape}",
                self.channels
            )));
        }
        let tables = (0..self.channels)
            .map(|c| self.table(c))
            .collect::<Result<_, _>>()?;
        Ok(FactorizedModel {
            prior: self.clone(),
            tables,
            shape,
        })
    }
}

pub struct FactorizedModel {
    prior: FactorizedPrior,
    tables: Vec<CdfTable>,
    shape: Shape,
}

impl FactorizedModel {
    fn channel(&self, i: usize) -> usize {
        (i / self.shape.plane()) % self.shape.c
    }
}

impl SymbolModel for FactorizedModel {
    fn len(&self) -> usize {
        self.shape.numel()
    }

    fn table(&self, i: usize) -> Result<Cow<'_, CdfTable>, CoderError> {
        Ok(Cow::Borrowed(&self.tables[self.channel(i)]))
    }

    fn likelihood(&self, i: usize, s: i32) -> f64 {
        self.prior.likelihood(self.channel(i), s as f64)
    }
}

/// Elementwise bits `-log2 p(z)` of a `(n, C, h, w)` hyper-latent under the
/// prior parameters `params` shaped `(C, 43, 1, 1)`. Differentiable in both.
pub fn factorized_bits<R: Real>(
    tape: &Tape<R>,
    z: &Var<R>,
    params: &Var<R>,
) -> Result<Var<R>, ShapeError> {
    let zs = z.shape();
    let ps = params.shape();
    if ps != param_shape(zs.c) {
        return Err(ShapeError::new(
            "factorized_bits",
            format!("latent {zs} vs prior parameters {ps}"),
        ));
    }
    let theta: Vec<f64> = params.value().data().iter().map(|v| v.as_f64()).collect();
    let n = zs.numel();
    let plane = zs.plane();
    let mut bits = Vec::with_capacity(n);
    let mut dz = Vec::with_capacity(n);
    let mut index = Vec::with_capacity(n * PARAMS_PER_CHANNEL);
    let mut coef = Vec::with_capacity(n * PARAMS_PER_CHANNEL);
    let mut g_lo = [0.0; PARAMS_PER_CHANNEL + 1];
    let mut g_hi = [0.0; PARAMS_PER_CHANNEL + 1];
    for (i, &zv) in z.value().data().iter().enumerate() {
        let c = (i / plane) % zs.c;
        let th = &theta[c * PARAMS_PER_CHANNEL..(c + 1) * PARAMS_PER_CHANNEL];
        let x = zv.as_f64();
        let lower = logit(th, x - 0.5, Some(&mut g_lo));
        let upper = logit(th, x + 0.5, Some(&mut g_hi));
        let sign = if lower + upper > 0.0 { -1.0 } else { 1.0 };
        let (su, sl) = (sigmoid(sign * upper), sigmoid(sign * lower));
        let diff = su - sl;
        let p = diff.abs();
        let pf = p.max(LIKELIHOOD_FLOOR);
        bits.push(R::from_f64(-pf.log2()));
        let dbits_dp = -1.0 / (pf * LN_2);
        let dir = if diff >= 0.0 { 1.0 } else { -1.0 };
        let dp_du = dir * sign * su * (1.0 - su);
        let dp_dl = -dir * sign * sl * (1.0 - sl);
        let d = |k: usize| dbits_dp * (dp_du * g_hi[k] + dp_dl * g_lo[k]);
        dz.push(R::from_f64(d(PARAMS_PER_CHANNEL)));
        for k in 0..PARAMS_PER_CHANNEL {
            index.push((c * PARAMS_PER_CHANNEL + k) as u32);
            coef.push(R::from_f64(d(k)));
        }
    }
    let value = Tensor::new(zs, bits)?;
    let dz_index = (0..n as u32).collect();
    tape.sparse_jacobian(
        value,
        &[
            (z, 1, dz_index, dz),
            (params, PARAMS_PER_CHANNEL, index, coef),
        ],
    )
}
