//! Convolution layers and the shared residual backbone with attention.
//!
//! Every sub-network of the codec (MVP, MC, RP and LF) is one [`Backbone`]
//! parameterized by `(n_in, n_mid, n_out)`. With `downsample` set, the head
//! convolution halves the resolution so the trunk runs on a quarter of the
//! pixels, and a transposed convolution restores full resolution at the tail.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Initialization rule for one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform {
        fan_in: usize,
    },
    Zeros,
    Constant(f32),
    Uniform {
        lo: f32,
        hi: f32,
    },
    /// Per-channel factorized prior; the shape is `(channels, 43, 1, 1)`.
    FactorizedPrior,
}

impl Init {
    pub fn sample(&self, shape: Shape, rng: &mut impl Rng) -> Tensor<f32> {
        match *self {
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
                Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-bound..bound))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(v) => Tensor::full(shape, v),
            Init::Uniform { lo, hi } => {
                Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
            }
            Init::FactorizedPrior => crate::entropy::factorized::init_params(shape.n, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

/// Named parameters bound to a tape, either as trainable leaves or as
/// constants.
pub struct ParamSet<R: Real> {
    vars: BTreeMap<String, Var<R>>,
}

impl<R: Real> ParamSet<R> {
    pub fn bind<'a>(
        tape: &Tape<R>,
        tensors: impl IntoIterator<Item = (&'a String, &'a Tensor<f32>)>,
        trainable: bool,
    ) -> Self {
        let vars = tensors
            .into_iter()
            .map(|(name, t)| {
                let v = t.cast::<R>();
                let var = if trainable {
                    tape.leaf(v)
                } else {
                    tape.constant(v)
                };
                (name.clone(), var)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<&Var<R>> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Replaces or adds one binding.
    pub fn insert(&mut self, name: impl Into<String>, var: Var<R>) {
        self.vars.insert(name.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<R>)> {
        self.vars.iter()
    }
}

/// A square convolution, or a transposed convolution that upsamples by its
/// stride.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub transposed: bool,
    pub zero_init: bool,
}

impl Conv {
    pub fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
            k,
            stride,
            transposed: false,
            zero_init: false,
        }
    }

    pub fn transposed(name: impl Into<String>, c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            transposed: true,
            ..Self::new(name, c_in, c_out, k, 2)
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> Shape {
        if self.transposed {
            Shape::new(self.c_in, self.c_out, self.k, self.k)
        } else {
            Shape::new(self.c_out, self.c_in, self.k, self.k)
        }
    }

    pub fn padding(&self) -> usize {
        (self.k - 1) / 2
    }

    pub fn params(&self, out: &mut Vec<ParamSpec>) {
        let fan_in = if self.transposed {
            (self.c_in * self.k * self.k / (self.stride * self.stride)).max(1)
        } else {
            self.c_in * self.k * self.k
        };
        out.push(ParamSpec {
            name: self.weight_name(),
            shape: self.weight_shape(),
            init: if self.zero_init {
                Init::Zeros
            } else {
                Init::HeUniform { fan_in }
            },
        });
        out.push(ParamSpec {
            name: self.bias_name(),
            shape: Shape::new(self.c_out, 1, 1, 1),
            init: Init::Zeros,
        });
    }

    pub fn forward<R: Real>(&self, tape: &Tape<R>, p: &ParamSet<R>, x: &Var<R>) -> Result<Var<R>> {
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        Ok(if self.transposed {
            tape.deconv2d(x, w, Some(b), self.stride)?
        } else {
            tape.conv2d(x, w, Some(b), self.stride, self.padding())?
        })
    }

    /// Output spatial dims for an `h x w` input.
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.transposed {
            (h * self.stride, w * self.stride)
        } else {
            let p = self.padding();
            (
                (h + 2 * p - self.k) / self.stride + 1,
                (w + 2 * p - self.k) / self.stride + 1,
            )
        }
    }

    /// FLOPs (2 per multiply-add) for an `h x w` input. Convolutions count
    /// `2 Cin Cout k^2 Hout Wout`; transposed convolutions count the
    /// multiply-adds actually performed, `2 Cin Cout k^2 Hin Win`.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_dims(h, w);
        let pixels = if self.transposed { h * w } else { ho * wo };
        (2 * self.c_in * self.c_out * self.k * self.k * pixels) as u64
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + self.c_out
    }
}

pub fn leaky<R: Real>(tape: &Tape<R>, x: &Var<R>) -> Var<R> {
    tape.leaky_relu(x, R::from_f64(LEAKY_SLOPE))
}

/// `x + conv(act(conv(x)))` at constant width.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub width: usize,
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    pub fn new(name: &str, width: usize) -> Self {
        Self {
            width,
            conv1: Conv::new(format!("{name}.conv1"), width, width, 3, 1),
            conv2: Conv::new(format!("{name}.conv2"), width, width, 3, 1),
        }
    }

    pub fn params(&self, out: &mut Vec<ParamSpec>) {
        self.conv1.params(out);
        self.conv2.params(out);
    }

    pub fn forward<R: Real>(&self, tape: &Tape<R>, p: &ParamSet<R>, x: &Var<R>) -> Result<Var<R>> {
        if x.shape().c != self.width {
            return Err(crate::tensor::ShapeError {
                op: "resblock",
                detail: format!("input {} vs block width {}", x.shape(), self.width),
            }
            .into());
        }
        let h = leaky(tape, &self.conv1.forward(tape, p, x)?);
        let h = self.conv2.forward(tape, p, &h)?;
        Ok(tape.add(x, &h)?)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.conv1.flops(h, w) + self.conv2.flops(h, w)
    }
}

/// Residual attention: `x + trunk(x) * sigmoid(mask(x))` where the mask
/// branch ends in a 1x1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub trunk: ResBlock,
    pub mask: ResBlock,
    pub mask_conv: Conv,
}

impl AttentionBlock {
    pub fn new(name: &str, width: usize) -> Self {
        Self {
            trunk: ResBlock::new(&format!("{name}.trunk"), width),
            mask: ResBlock::new(&format!("{name}.mask"), width),
            mask_conv: Conv::new(format!("{name}.mask_conv"), width, width, 1, 1),
        }
    }

    pub fn params(&self, out: &mut Vec<ParamSpec>) {
        self.trunk.params(out);
        self.mask.params(out);
        self.mask_conv.params(out);
    }

    pub fn forward<R: Real>(&self, tape: &Tape<R>, p: &ParamSet<R>, x: &Var<R>) -> Result<Var<R>> {
        let t = self.trunk.forward(tape, p, x)?;
        let m = self.mask.forward(tape, p, x)?;
        let m = tape.sigmoid(&self.mask_conv.forward(tape, p, &m)?);
        Ok(tape.add(x, &tape.mul(&t, &m)?)?)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.trunk.flops(h, w) + self.mask.flops(h, w) + self.mask_conv.flops(h, w)
    }
}

/// Channel configuration of one backbone instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneSpec {
    pub n_in: usize,
    pub n_mid: usize,
    pub n_out: usize,
    pub n_resblocks: usize,
    pub downsample: bool,
}

impl BackboneSpec {
    pub const fn new(n_in: usize, n_mid: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_mid,
            n_out,
            n_resblocks: 3,
            downsample: true,
        }
    }

    /// Motion vector prediction: four 2-channel fields in, one out.
    pub const MVP: Self = Self::new(8, 32, 2);
    /// Residual prediction: four buffered residual features plus their warps.
    pub const RP: Self = Self::new(64, 64, 3);
    /// Motion compensation: frame, warped frame, four features and warps.
    pub const MC: Self = Self::new(70, 64, 64);
    /// Loop filter: motion features, residual features and the sum frame.
    pub const LF: Self = Self::new(195, 128, 3);

    pub fn triple(&self) -> (usize, usize, usize) {
        (self.n_in, self.n_mid, self.n_out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub head: Conv,
    pub blocks: Vec<ResBlock>,
    pub attention: AttentionBlock,
    pub tail: Conv,
}

impl Backbone {
    pub fn new(name: &str, spec: BackboneSpec) -> Self {
        assert!(spec.n_in >= 1 && spec.n_mid >= 1 && spec.n_out >= 1);
        let stride = if spec.downsample { 2 } else { 1 };
        let tail = if spec.downsample {
            Conv::transposed(format!("{name}.tail"), spec.n_mid, spec.n_out, 3)
        } else {
            Conv::new(format!("{name}.tail"), spec.n_mid, spec.n_out, 3, 1)
        };
        Self {
            spec,
            head: Conv::new(format!("{name}.head"), spec.n_in, spec.n_mid, 3, stride),
            blocks: (0..spec.n_resblocks)
                .map(|i| ResBlock::new(&format!("{name}.res{i}"), spec.n_mid))
                .collect(),
            attention: AttentionBlock::new(&format!("{name}.attn"), spec.n_mid),
            tail: tail.zero_init(),
        }
    }

    pub fn params(&self, out: &mut Vec<ParamSpec>) {
        self.head.params(out);
        for b in &self.blocks {
            b.params(out);
        }
        self.attention.params(out);
        self.tail.params(out);
    }

    pub fn forward<R: Real>(&self, tape: &Tape<R>, p: &ParamSet<R>, x: &Var<R>) -> Result<Var<R>> {
        let s = x.shape();
        if s.c != self.spec.n_in {
            return Err(crate::tensor::ShapeError {
                op: "backbone",
                detail: format!("input {s} vs n_in {}", self.spec.n_in),
            }
            .into());
        }
        let (h, w) = if self.spec.downsample {
            (s.h.div_ceil(2) * 2, s.w.div_ceil(2) * 2)
        } else {
            (s.h, s.w)
        };
        let x = tape.pad_replicate(x, h, w)?;
        let mut t = leaky(tape, &self.head.forward(tape, p, &x)?);
        for b in &self.blocks {
            t = b.forward(tape, p, &t)?;
        }
        t = self.attention.forward(tape, p, &t)?;
        let y = self.tail.forward(tape, p, &t)?;
        Ok(tape.crop(&y, s.h, s.w)?)
    }

    /// Resolution the trunk runs at for an `h x w` input.
    pub fn trunk_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.spec.downsample {
            (h.div_ceil(2), w.div_ceil(2))
        } else {
            (h, w)
        }
    }

    /// FLOPs of the residual and attention blocks only.
    pub fn trunk_flops(&self, h: usize, w: usize) -> u64 {
        let (th, tw) = self.trunk_dims(h, w);
        self.blocks.iter().map(|b| b.flops(th, tw)).sum::<u64>() + self.attention.flops(th, tw)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (h, w) = if self.spec.downsample {
            (h.div_ceil(2) * 2, w.div_ceil(2) * 2)
        } else {
            (h, w)
        };
        let (th, tw) = self.trunk_dims(h, w);
        self.head.flops(h, w) + self.trunk_flops(h, w) + self.tail.flops(th, tw)
    }
}
