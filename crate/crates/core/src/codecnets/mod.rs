//! The codec's networks and the P-frame forward pass shared by training,
//! encoding and decoding.
//!
//! Encoder and decoder run the same functions on the same inputs, so the
//! decoder re-derives every prediction (`v̄`, `r̄`, and the predicted latents)
//! bit for bit.

mod weights;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::entropy::{factorized_bits, gaussian_bits, quantize, QuantMode, SIGMA_MIN};
use crate::error::{Error, Result};
use crate::layers::{leaky, Backbone, BackboneSpec, Conv, Init, ParamSet, ParamSpec};
use crate::tensor::{Real, Shape, ShapeError, Tape, Tensor, Var};

pub use weights::{
    checksum, read_container, write_atomic, write_container, ModelWeights, WEIGHTS_MAGIC,
    WEIGHTS_VERSION,
};

/// Rate-distortion trade-offs, one trained weight set each.
pub const LAMBDAS: [f64; 5] = [512.0, 1024.0, 2048.0, 4096.0, 6144.0];

/// Channels of the single-conv frame and residual feature extractors. With
/// four references, `3 + 3 + 4 * 8 + 4 * 8 = 70` and `4 * 8 + 4 * 8 = 64`.
pub const FEATURE_WIDTH: usize = 8;
pub const MOTION_FEATURES: usize = 64;
pub const RESIDUAL_FEATURES: usize = 128;
pub const FRAME_REFS: usize = 4;
pub const MV_REFS: usize = 3;
pub const RESIDUAL_REFS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecConfig {
    pub me_levels: usize,
    pub latent: usize,
    pub hidden: usize,
    pub hyper: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            me_levels: 3,
            latent: 96,
            hidden: 64,
            hyper: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Mv,
    Res,
}

/// Spatial dims after one stride-2, k3, padding-1 convolution.
pub fn half(n: usize) -> usize {
    n.div_ceil(2)
}

fn chain<R: Real>(tape: &Tape<R>, p: &ParamSet<R>, convs: &[Conv], x: &Var<R>) -> Result<Var<R>> {
    let mut h = x.clone();
    for (i, c) in convs.iter().enumerate() {
        h = c.forward(tape, p, &h)?;
        if i + 1 < convs.len() {
            h = leaky(tape, &h);
        }
    }
    Ok(h)
}

fn chain_flops(convs: &[Conv], mut h: usize, mut w: usize) -> u64 {
    let mut total = 0;
    for c in convs {
        total += c.flops(h, w);
        (h, w) = c.out_dims(h, w);
    }
    total
}

fn mismatch(op: &'static str, detail: String) -> Error {
    ShapeError { op, detail }.into()
}

/// Coarse-to-fine flow estimator. Each level predicts a refinement from the
/// current frame, the warped reference and the upsampled coarser flow.
#[derive(Clone, Debug)]
pub struct MotionEstimator {
    pub levels: Vec<[Conv; 3]>,
}

impl MotionEstimator {
    fn new(levels: usize) -> Self {
        Self {
            levels: (0..levels)
                .map(|l| {
                    [
                        Conv::new(format!("me.l{l}.conv0"), 8, 32, 5, 1),
                        Conv::new(format!("me.l{l}.conv1"), 32, 16, 5, 1),
                        Conv::new(format!("me.l{l}.conv2"), 16, 2, 5, 1).zero_init(),
                    ]
                })
                .collect(),
        }
    }

    fn multiple(&self) -> usize {
        1 << (self.levels.len() - 1)
    }

    pub fn forward<R: Real>(
        &self,
        tape: &Tape<R>,
        p: &ParamSet<R>,
        x: &Var<R>,
        reference: &Var<R>,
    ) -> Result<Var<R>> {
        let s = x.shape();
        if reference.shape() != s || s.c != 3 {
            return Err(mismatch(
                "me_estimate",
                format!("frame {s} vs reference {}", reference.shape()),
            ));
        }
        let m = self.multiple();
        let (h, w) = (s.h.div_ceil(m) * m, s.w.div_ceil(m) * m);
        let mut xs = vec![tape.pad_replicate(x, h, w)?];
        let mut refs = vec![tape.pad_replicate(reference, h, w)?];
        for _ in 1..self.levels.len() {
            xs.push(tape.avg_pool2(xs.last().unwrap())?);
            refs.push(tape.avg_pool2(refs.last().unwrap())?);
        }
        let mut flow: Option<Var<R>> = None;
        for (level, convs) in self.levels.iter().enumerate() {
            let k = self.levels.len() - 1 - level;
            let (xl, rl) = (&xs[k], &refs[k]);
            let f = match flow {
                None => tape.constant(Tensor::zeros(xl.shape().with_channels(2))),
                Some(f) => tape.scale(&tape.upsample2(&f), R::from_f64(2.0)),
            };
            let warped = tape.warp(rl, &f)?;
            let d = chain(tape, p, convs, &tape.concat(&[xl, &warped, &f])?)?;
            flow = Some(tape.add(&f, &d)?);
        }
        Ok(tape.crop(&flow.unwrap(), s.h, s.w)?)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let m = self.multiple();
        let (mut h, mut w) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let mut total = 0;
        for convs in &self.levels {
            total += chain_flops(convs, h, w);
            (h, w) = (h / 2, w / 2);
        }
        total
    }
}

/// Analysis/synthesis transform pair with a mean-scale hyperprior.
#[derive(Clone, Debug)]
pub struct LatentCodec {
    pub stream: Stream,
    pub enc: Vec<Conv>,
    pub dec: Vec<Conv>,
    pub henc: Vec<Conv>,
    pub hdec: Vec<Conv>,
    pub latent: usize,
    pub hyper: usize,
}

impl LatentCodec {
    fn new(stream: Stream, c_in: usize, c_out: usize, cfg: &CodecConfig) -> Self {
        let name = match stream {
            Stream::Mv => "mv",
            Stream::Res => "res",
        };
        let (hid, lat, hyp) = (cfg.hidden, cfg.latent, cfg.hyper);
        Self {
            stream,
            enc: vec![
                Conv::new(format!("{name}.enc0"), c_in, hid, 3, 2),
                Conv::new(format!("{name}.enc1"), hid, hid, 3, 2),
                Conv::new(format!("{name}.enc2"), hid, hid, 3, 2),
                Conv::new(format!("{name}.enc3"), hid, lat, 3, 2),
            ],
            dec: vec![
                Conv::transposed(format!("{name}.dec0"), lat, hid, 3),
                Conv::transposed(format!("{name}.dec1"), hid, hid, 3),
                Conv::transposed(format!("{name}.dec2"), hid, hid, 3),
                Conv::transposed(format!("{name}.dec3"), hid, c_out, 3),
            ],
            henc: vec![
                Conv::new(format!("{name}.henc0"), lat, hyp, 3, 1),
                Conv::new(format!("{name}.henc1"), hyp, hyp, 3, 2),
                Conv::new(format!("{name}.henc2"), hyp, hyp, 3, 2),
            ],
            hdec: vec![
                Conv::transposed(format!("{name}.hdec0"), hyp, hyp, 3),
                Conv::transposed(format!("{name}.hdec1"), hyp, hyp, 3),
                Conv::new(format!("{name}.hdec2"), hyp, 2 * lat, 3, 1),
            ],
            latent: lat,
            hyper: hyp,
        }
    }

    pub fn prior_name(&self) -> String {
        match self.stream {
            Stream::Mv => "mv.prior".into(),
            Stream::Res => "res.prior".into(),
        }
    }

    fn params(&self, out: &mut Vec<ParamSpec>) {
        for c in self
            .enc
            .iter()
            .chain(&self.dec)
            .chain(&self.henc)
            .chain(&self.hdec)
        {
            c.params(out);
        }
        out.push(ParamSpec {
            name: self.prior_name(),
            shape: crate::entropy::factorized::param_shape(self.hyper),
            init: Init::FactorizedPrior,
        });
    }

    pub fn latent_shape(&self, h: usize, w: usize) -> Shape {
        let (mut h, mut w) = (h, w);
        for _ in &self.enc {
            (h, w) = (half(h), half(w));
        }
        Shape::new(1, self.latent, h, w)
    }

    pub fn hyper_shape(&self, h: usize, w: usize) -> Shape {
        let l = self.latent_shape(h, w);
        Shape::new(1, self.hyper, half(half(l.h)), half(half(l.w)))
    }

    pub fn analysis<R: Real>(&self, tape: &Tape<R>, p: &ParamSet<R>, x: &Var<R>) -> Result<Var<R>> {
        chain(tape, p, &self.enc, x)
    }

    pub fn hyper_analysis<R: Real>(
        &self,
        tape: &Tape<R>,
        p: &ParamSet<R>,
        l: &Var<R>,
    ) -> Result<Var<R>> {
        chain(tape, p, &self.henc, l)
    }

    /// Mean and scale of the latent difference, cropped to `latent`.
    pub fn hyper_synthesis<R: Real>(
        &self,
        tape: &Tape<R>,
        p: &ParamSet<R>,
        z_hat: &Var<R>,
        latent: Shape,
    ) -> Result<(Var<R>, Var<R>)> {
        let out = chain(tape, p, &self.hdec, z_hat)?;
        let out = tape.crop(&out, latent.h, latent.w)?;
        let mu = tape.slice_channels(&out, 0, self.latent)?;
        let raw = tape.slice_channels(&out, self.latent, self.latent)?;
        let sigma = tape.add_scalar(&tape.softplus(&raw), R::from_f64(SIGMA_MIN));
        Ok((mu, sigma))
    }

    pub fn synthesis<R: Real>(
        &self,
        tape: &Tape<R>,
        p: &ParamSet<R>,
        l_hat: &Var<R>,
        h: usize,
        w: usize,
    ) -> Result<Var<R>> {
        Ok(tape.crop(&chain(tape, p, &self.dec, l_hat)?, h, w)?)
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        let l = self.latent_shape(h, w);
        let z = self.hyper_shape(h, w);
        // Both the signal and its prediction go through the analysis transform.
        2 * chain_flops(&self.enc, h, w)
            + chain_flops(&self.dec, l.h, l.w)
            + chain_flops(&self.henc, l.h, l.w)
            + chain_flops(&self.hdec, z.h, z.w)
    }
}

/// How coded tensors are quantized on the encoder side.
pub enum Quantizer {
    /// Training relaxation (noise or straight-through) drawn from a seeded RNG.
    Train { mode: QuantMode, rng: ChaCha8Rng },
    /// Hard rounding, as used for actual coding.
    Round,
}

impl Quantizer {
    pub fn train(mode: QuantMode, seed: u64) -> Self {
        Self::Train {
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn apply<R: Real>(&mut self, tape: &Tape<R>, x: &Var<R>) -> Var<R> {
        match self {
            Self::Train { mode, rng } => quantize(tape, x, *mode, rng),
            Self::Round => tape.constant(x.value().map(|v| v.round())),
        }
    }
}

/// Decoded buffers a P-frame is predicted from, newest first.
pub struct Refs<'a, R: Real> {
    pub frames: [&'a Var<R>; FRAME_REFS],
    pub mvs: [&'a Var<R>; MV_REFS],
    pub residuals: [&'a Var<R>; RESIDUAL_REFS],
}

/// One coded latent stream on the encoder side.
pub struct StreamOut<R: Real> {
    /// Synthesis output: `v̂` for motion, `f_res` for residuals.
    pub recon: Var<R>,
    pub latent: Var<R>,
    pub latent_pred: Var<R>,
    pub z_hat: Var<R>,
    pub delta_hat: Var<R>,
    pub mu: Var<R>,
    pub sigma: Var<R>,
    pub hyper_bits: Var<R>,
    pub delta_bits: Var<R>,
}

/// Every intermediate of one P-frame.
pub struct PFrame<R: Real> {
    pub v: Var<R>,
    pub v_bar: Var<R>,
    pub mv: StreamOut<R>,
    pub x_bar: Var<R>,
    pub f_mv: Var<R>,
    pub r: Var<R>,
    pub r_bar: Var<R>,
    pub res: StreamOut<R>,
    pub r_hat_prime: Var<R>,
    pub x_hat_prime: Var<R>,
    pub x_hat: Var<R>,
}

impl<R: Real> PFrame<R> {
    pub fn v_hat(&self) -> &Var<R> {
        &self.mv.recon
    }

    /// Total estimated bits of the four coded tensors.
    pub fn rate_bits(&self, tape: &Tape<R>) -> Result<Var<R>> {
        let parts = [
            &self.mv.hyper_bits,
            &self.mv.delta_bits,
            &self.res.hyper_bits,
            &self.res.delta_bits,
        ];
        let mut total = tape.sum(parts[0]);
        for p in &parts[1..] {
            total = tape.add(&total, &tape.sum(p))?;
        }
        Ok(total)
    }

    /// Residual pushed into the decoded residual buffer: `x̂ - x̄`.
    pub fn buffer_residual(&self, tape: &Tape<R>) -> Result<Var<R>> {
        Ok(tape.sub(&self.x_hat, &self.x_bar)?)
    }
}

/// Decoder-side reconstruction of one P-frame.
pub struct Decoded<R: Real> {
    pub v_hat: Var<R>,
    pub x_bar: Var<R>,
    pub x_hat: Var<R>,
}

/// Supplies decoded integer tensors to [`Codec::decode_pframe`].
pub trait LatentSource {
    fn hyper(&mut self, stream: Stream, shape: Shape, prior: &Tensor<f32>) -> Result<Tensor<f32>>;
    fn delta(
        &mut self,
        stream: Stream,
        mu: &Tensor<f32>,
        sigma: &Tensor<f32>,
    ) -> Result<Tensor<f32>>;
}

/// The full P-frame codec.
#[derive(Clone, Debug)]
pub struct Codec {
    pub config: CodecConfig,
    pub me: MotionEstimator,
    pub mvp: Backbone,
    pub mv: LatentCodec,
    pub mc_hx: Conv,
    pub mc: Backbone,
    pub mc_hf: Conv,
    pub rp_hr: Conv,
    pub rp: Backbone,
    pub res: LatentCodec,
    pub res_tail: Conv,
    pub lf: Backbone,
}

impl Default for Codec {
    fn default() -> Self {
        Self::new(CodecConfig::default())
    }
}

impl Codec {
    pub fn new(config: CodecConfig) -> Self {
        assert!(config.me_levels >= 1);
        Self {
            config,
            me: MotionEstimator::new(config.me_levels),
            mvp: Backbone::new("mvp", BackboneSpec::MVP),
            mv: LatentCodec::new(Stream::Mv, 2, 2, &config),
            mc_hx: Conv::new("mc.hx", 3, FEATURE_WIDTH, 3, 1),
            mc: Backbone::new("mc", BackboneSpec::MC),
            mc_hf: Conv::new("mc.hf", MOTION_FEATURES, 3, 3, 1),
            rp_hr: Conv::new("rp.hr", 3, FEATURE_WIDTH, 3, 1),
            rp: Backbone::new("rp", BackboneSpec::RP),
            res: LatentCodec::new(Stream::Res, 3, RESIDUAL_FEATURES, &config),
            res_tail: Conv::new("res.tail", RESIDUAL_FEATURES, 3, 3, 1),
            lf: Backbone::new("lf", BackboneSpec::LF),
        }
    }

    pub fn stream(&self, s: Stream) -> &LatentCodec {
        match s {
            Stream::Mv => &self.mv,
            Stream::Res => &self.res,
        }
    }

    /// Every trainable tensor with its shape and initializer, in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for convs in &self.me.levels {
            for c in convs {
                c.params(&mut out);
            }
        }
        self.mvp.params(&mut out);
        self.mv.params(&mut out);
        self.mc_hx.params(&mut out);
        self.mc.params(&mut out);
        self.mc_hf.params(&mut out);
        self.rp_hr.params(&mut out);
        self.rp.params(&mut out);
        self.res.params(&mut out);
        self.res_tail.params(&mut out);
        self.lf.params(&mut out);
        out
    }

    /// The network a parameter belongs to, by name prefix.
    pub fn network_of(name: &str) -> &'static str {
        match name.split('.').next().unwrap_or("") {
            "me" => "me",
            "mvp" => "mvp",
            "mv" => "mv_codec",
            "mc" => "mc",
            "rp" => "rp",
            "res" => "res_codec",
            "lf" => "lf",
            _ => "other",
        }
    }

    pub fn me_estimate<R: Real>(
        &self,
        tape: &Tape<R>,
        p: &ParamSet<R>,
        x: &Var<R>,
        reference: &Var<R>,
    ) -> Result<Var<R>> {
        self.me.forward(tape, p, x, reference)
    }

    /// `v̄ = MVP(v̂_{T-3}, v̂_{T-2}, v̂_{T-1}, Warp(v̂_{T-1}, v̂_{T-1}))`.
    pub fn mvp_predict<R: Real>(
        &self,
        tape: &Tape<R>,
        p: &ParamSet<R>,
        mvs: [&Var<R>; MV_REFS],
    ) -> Result<Var<R>> {
        let [v1, v2, v3] = mvs;
        let w = tape.warp(v1, v1)?;
        let input = tape.concat(&[v3, v2, v1, &w])?;
        self.mvp.forward(tape, p, &input)
    }

    /// Flow paired with each buffered frame: the newest frame uses the current
    /// motion, older ones the buffered motion of the matching index.
    fn frame_pairs<'a, R: Real>(
        v_hat: &'a Var<R>,
        mvs: [&'a Var<R>; MV_REFS],
    ) -> [&'a Var<R>; FRAME_REFS] {
        [v_hat, mvs[0], mvs[1], mvs[2]]
    }

    /// Flow paired with each buffered residual; the oldest residual reuses the
    /// oldest motion field.
    fn residual_pairs<R: Real>(mvs: [&Var<R>; MV_REFS]) -> [&Var<R>; RESIDUAL_REFS] {
        [mvs[0], mvs[1], mvs[2], mvs[2]]
    }

    /// Returns `(x̄, f_mv)`.
    pub fn mc_predict<R: Real>(
        &self,
        tape: &Tape<R>,
        p: &ParamSet<R>,
        v_hat: &Var<R>,
        frames: [&Var<R>; FRAME_REFS],
        mvs: [&Var<R>; MV_REFS],
    ) -> Result<(Var<R>, Var<R>)> {
        let warped_prev = tape.warp(frames[0], v_hat)?;
        let pairs = Self::frame_pairs(v_hat, mvs);
        let mut feats = Vec::with_capacity(FRAME_REFS);
        let mut warped = Vec::with_capacity(FRAME_REFS);
        for (f, v) in frames.iter().zip(pairs) {
            let h = self.mc_hx.forward(tape, p, f)?;
            warped.push(tape.warp(&h, v)?);
            feats.push(h);
        }
        let mut parts: Vec<&Var<R>> = vec![frames[0], &warped_prev];
        parts.extend(feats.iter());
        parts.extend(warped.iter());
        let f_mv = self.mc.forward(tape, p, &tape.concat(&parts)?)?;
        let x_bar = tape.add(&self.mc_hf.forward(tape, p, &f_mv)?, &warped_prev)?;
        Ok((x_bar, f_mv))
    }

    pub fn rp_predict<R: Real>(
        &self,
        tape: &Tape<R>,
        p: &ParamSet<R>,
        residuals: [&Var<R>; RESIDUAL_REFS],
        mvs: [&Var<R>; MV_REFS],
    ) -> Result<Var<R>> {
        let pairs = Self::residual_pairs(mvs);
        let mut feats = Vec::with_capacity(RESIDUAL_REFS);
        let mut warped = Vec::with_capacity(RESIDUAL_REFS);
        for (r, v) in residuals.iter().zip(pairs) {
            let h = self.rp_hr.forward(tape, p, r)?;
            warped.push(tape.warp(&h, v)?);
            feats.push(h);
        }
        let parts: Vec<&Var<R>> = feats.iter().chain(warped.iter()).collect();
        self.rp.forward(tape, p, &tape.concat(&parts)?)
    }

    /// Returns `(x̂, x̂')` with `x̂' = x̄ + r̂'` and `x̂ = clamp(LF(f_mv, f_res, x̂') + x̂')`.
    pub fn lf_filter<R: Real>(
        &self,
        tape: &Tape<R>,
        p: &ParamSet<R>,
        x_bar: &Var<R>,
        r_hat_prime: &Var<R>,
        f_mv: &Var<R>,
        f_res: &Var<R>,
    ) -> Result<(Var<R>, Var<R>)> {
        let x_hat_prime = tape.add(x_bar, r_hat_prime)?;
        let input = tape.concat(&[f_mv, f_res, &x_hat_prime])?;
        let out = tape.add(&self.lf.forward(tape, p, &input)?, &x_hat_prime)?;
        Ok((tape.clamp(&out, R::zero(), R::one()), x_hat_prime))
    }

    /// Codes `x` relative to its prediction `pred` through the latent
    /// difference `Δ = Q(Enc(x) - Enc(pred))`.
    pub fn code_stream<R: Real>(
        &self,
        tape: &Tape<R>,
        p: &ParamSet<R>,
        stream: Stream,
        x: &Var<R>,
        pred: &Var<R>,
        quant: &mut Quantizer,
    ) -> Result<StreamOut<R>> {
        let net = self.stream(stream);
        let s = x.shape();
        let latent = net.analysis(tape, p, x)?;
        let latent_pred = net.analysis(tape, p, pred)?;
        let z = net.hyper_analysis(tape, p, &latent)?;
        let z_hat = quant.apply(tape, &z);
        let (mu, sigma) = net.hyper_synthesis(tape, p, &z_hat, latent.shape())?;
        let delta = tape.sub(&latent, &latent_pred)?;
        let delta_hat = quant.apply(tape, &delta);
        let l_hat = tape.add(&delta_hat, &latent_pred)?;
        let recon = net.synthesis(tape, p, &l_hat, s.h, s.w)?;
        let hyper_bits = factorized_bits(tape, &z_hat, p.get(&net.prior_name())?)?;
        let delta_bits = gaussian_bits(tape, &delta_hat, &mu, &sigma)?;
        Ok(StreamOut {
            recon,
            latent,
            latent_pred,
            z_hat,
            delta_hat,
            mu,
            sigma,
            hyper_bits,
            delta_bits,
        })
    }

    fn zeros_like<R: Real>(tape: &Tape<R>, shape: Shape) -> Var<R> {
        tape.constant(Tensor::zeros(shape))
    }

    fn check_refs<R: Real>(x: Shape, refs: &Refs<'_, R>) -> Result<()> {
        let flow = x.with_channels(2);
        let ok = refs.frames.iter().all(|f| f.shape() == x)
            && refs.residuals.iter().all(|r| r.shape() == x)
            && refs.mvs.iter().all(|v| v.shape() == flow);
        if ok {
            Ok(())
        } else {
            Err(mismatch(
                "reference buffers",
                format!("buffers do not match frame {x}"),
            ))
        }
    }

    /// Encoder-side P-frame. With `predict` off, `v̄` and `r̄` are zero.
    pub fn encode_pframe<R: Real>(
        &self,
        tape: &Tape<R>,
        p: &ParamSet<R>,
        x: &Var<R>,
        refs: &Refs<'_, R>,
        predict: bool,
        quant: &mut Quantizer,
    ) -> Result<PFrame<R>> {
        let s = x.shape();
        if s.n != 1 || s.c != 3 {
            return Err(mismatch(
                "encode_pframe",
                format!("frame must be 1x3xHxW, got {s}"),
            ));
        }
        Self::check_refs(s, refs)?;
        let v = self.me_estimate(tape, p, x, refs.frames[0])?;
        let v_bar = if predict {
            self.mvp_predict(tape, p, refs.mvs)?
        } else {
            Self::zeros_like(tape, s.with_channels(2))
        };
        let mv = self.code_stream(tape, p, Stream::Mv, &v, &v_bar, quant)?;
        let (x_bar, f_mv) = self.mc_predict(tape, p, &mv.recon, refs.frames, refs.mvs)?;
        let r_bar = if predict {
            self.rp_predict(tape, p, refs.residuals, refs.mvs)?
        } else {
            Self::zeros_like(tape, s)
        };
        let r = tape.sub(x, &x_bar)?;
        let res = self.code_stream(tape, p, Stream::Res, &r, &r_bar, quant)?;
        let r_hat_prime = self.res_tail.forward(tape, p, &res.recon)?;
        let (x_hat, x_hat_prime) =
            self.lf_filter(tape, p, &x_bar, &r_hat_prime, &f_mv, &res.recon)?;
        Ok(PFrame {
            v,
            v_bar,
            mv,
            x_bar,
            f_mv,
            r,
            r_bar,
            res,
            r_hat_prime,
            x_hat_prime,
            x_hat,
        })
    }

    fn decode_stream(
        &self,
        tape: &Tape<f32>,
        p: &ParamSet<f32>,
        stream: Stream,
        pred: &Var<f32>,
        source: &mut dyn LatentSource,
    ) -> Result<Var<f32>> {
        let net = self.stream(stream);
        let s = pred.shape();
        let latent_shape = net.latent_shape(s.h, s.w);
        let prior = p.get(&net.prior_name())?.value().clone();
        let z_hat = source.hyper(stream, net.hyper_shape(s.h, s.w), &prior)?;
        let z_hat = tape.constant(z_hat);
        let (mu, sigma) = net.hyper_synthesis(tape, p, &z_hat, latent_shape)?;
        let delta_hat = source.delta(stream, mu.value(), sigma.value())?;
        if delta_hat.shape() != latent_shape {
            return Err(mismatch(
                "decode_stream",
                format!("decoded {} vs latent {latent_shape}", delta_hat.shape()),
            ));
        }
        let latent_pred = net.analysis(tape, p, pred)?;
        let l_hat = tape.add(&tape.constant(delta_hat), &latent_pred)?;
        net.synthesis(tape, p, &l_hat, s.h, s.w)
    }

    /// Decoder-side P-frame; mirrors [`Codec::encode_pframe`] without motion
    /// estimation.
    pub fn decode_pframe(
        &self,
        tape: &Tape<f32>,
        p: &ParamSet<f32>,
        refs: &Refs<'_, f32>,
        predict: bool,
        source: &mut dyn LatentSource,
    ) -> Result<Decoded<f32>> {
        let s = refs.frames[0].shape();
        Self::check_refs(s, refs)?;
        let v_bar = if predict {
            self.mvp_predict(tape, p, refs.mvs)?
        } else {
            Self::zeros_like(tape, s.with_channels(2))
        };
        let v_hat = self.decode_stream(tape, p, Stream::Mv, &v_bar, source)?;
        let (x_bar, f_mv) = self.mc_predict(tape, p, &v_hat, refs.frames, refs.mvs)?;
        let r_bar = if predict {
            self.rp_predict(tape, p, refs.residuals, refs.mvs)?
        } else {
            Self::zeros_like(tape, s)
        };
        let f_res = self.decode_stream(tape, p, Stream::Res, &r_bar, source)?;
        let r_hat_prime = self.res_tail.forward(tape, p, &f_res)?;
        let (x_hat, _) = self.lf_filter(tape, p, &x_bar, &r_hat_prime, &f_mv, &f_res)?;
        Ok(Decoded {
            v_hat,
            x_bar,
            x_hat,
        })
    }

    /// Convolution FLOPs of one encoder-side P-frame at `h x w`, counting
    /// multiply-adds as two.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let conv3 = |c: &Conv| c.flops(h, w);
        self.me.flops(h, w)
            + self.mvp.flops(h, w)
            + self.mv.flops(h, w)
            + FRAME_REFS as u64 * conv3(&self.mc_hx)
            + self.mc.flops(h, w)
            + conv3(&self.mc_hf)
            + RESIDUAL_REFS as u64 * conv3(&self.rp_hr)
            + self.rp.flops(h, w)
            + self.res.flops(h, w)
            + conv3(&self.res_tail)
            + self.lf.flops(h, w)
    }

    /// Backbone channel triples as instantiated, in MVP, RP, MC, LF order.
    pub fn backbone_triples(&self) -> [(usize, usize, usize); 4] {
        [
            self.mvp.spec.triple(),
            self.rp.spec.triple(),
            self.mc.spec.triple(),
            self.lf.spec.triple(),
        ]
    }
}
