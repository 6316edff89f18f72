//! Rate-distortion training: loss, Adam, the P-frame curriculum and
//! checkpoints.

mod synthetic;

pub use synthetic::{periodic_clip, synthetic_dataset, translating_clip};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codecnets::{
    read_container, write_atomic, write_container, Codec, ModelWeights, PFrame, Quantizer, Refs,
    LAMBDAS,
};
use crate::entropy::QuantMode;
use crate::error::{Error, Result};
use crate::evalkit::ms_ssim_var;
use crate::layers::ParamSet;
use crate::tensor::{Real, Shape, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distortion {
    Mse,
    MsSsim,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdLossConfig {
    pub lambda: f64,
    pub distortion: Distortion,
}

impl RdLossConfig {
    pub fn new(lambda_index: usize, distortion: Distortion) -> Self {
        Self {
            lambda: LAMBDAS[lambda_index],
            distortion,
        }
    }
}

/// `λ·D + R / pixels`, with `D` averaged over the P-frames (MSE on the
/// [0, 1] scale, or `1 - MS-SSIM`) and `pixels` the P-frame pixel total.
pub fn rd_loss<R: Real>(
    tape: &Tape<R>,
    originals: &[Var<R>],
    recons: &[Var<R>],
    rate_bits: &Var<R>,
    cfg: &RdLossConfig,
) -> Result<Var<R>> {
    if originals.len() != recons.len() || originals.is_empty() {
        return Err(Error::invalid(format!(
            "{} originals vs {} reconstructions",
            originals.len(),
            recons.len()
        )));
    }
    let mut total: Option<Var<R>> = None;
    let mut pixels = 0;
    for (x, y) in originals.iter().zip(recons) {
        if x.shape() != y.shape() {
            return Err(Error::invalid(format!("{} vs {}", x.shape(), y.shape())));
        }
        pixels += x.shape().n * x.shape().plane();
        let d = match cfg.distortion {
            Distortion::Mse => {
                let e = tape.sub(x, y)?;
                tape.mean(&tape.mul(&e, &e)?)
            }
            Distortion::MsSsim => {
                let s = ms_ssim_var(tape, x, y)?;
                tape.add_scalar(&tape.scale(&s, -R::one()), R::one())
            }
        };
        total = Some(match total {
            None => d,
            Some(t) => tape.add(&t, &d)?,
        });
    }
    let d = tape.scale(&total.unwrap(), R::from_f64(1.0 / originals.len() as f64));
    let rate = tape.scale(rate_bits, R::from_f64(1.0 / pixels as f64));
    Ok(tape.add(&tape.scale(&d, R::from_f64(cfg.lambda)), &rate)?)
}

/// Differentiable reference buffers for training, newest first.
struct Buffers<R: Real> {
    frames: Vec<Var<R>>,
    mvs: Vec<Var<R>>,
    residuals: Vec<Var<R>>,
}

impl<R: Real> Buffers<R> {
    fn new(tape: &Tape<R>, intra: &Var<R>) -> Self {
        let s = intra.shape();
        Self {
            frames: vec![intra.clone(); 4],
            mvs: vec![tape.constant(Tensor::zeros(s.with_channels(2))); 3],
            residuals: vec![tape.constant(Tensor::zeros(s)); 4],
        }
    }

    fn refs(&self) -> Refs<'_, R> {
        Refs {
            frames: std::array::from_fn(|i| &self.frames[i]),
            mvs: std::array::from_fn(|i| &self.mvs[i]),
            residuals: std::array::from_fn(|i| &self.residuals[i]),
        }
    }

    fn push(&mut self, tape: &Tape<R>, p: &PFrame<R>) -> Result<()> {
        self.frames.rotate_right(1);
        self.frames[0] = p.x_hat.clone();
        self.mvs.rotate_right(1);
        self.mvs[0] = p.v_hat().clone();
        self.residuals.rotate_right(1);
        self.residuals[0] = p.buffer_residual(tape)?;
        Ok(())
    }
}

/// Output of running one clip through the codec on a tape.
pub struct ClipForward<R: Real> {
    pub pframes: Vec<PFrame<R>>,
    pub rate_bits: Var<R>,
}

/// Codes `clip[1..]` as chained P-frames with `clip[0]` standing in for the
/// decoded I-frame.
pub fn forward_clip<R: Real>(
    codec: &Codec,
    tape: &Tape<R>,
    p: &ParamSet<R>,
    clip: &[Var<R>],
    predict: bool,
    quant: &mut Quantizer,
) -> Result<ClipForward<R>> {
    if clip.len() < 2 {
        return Err(Error::invalid("a training clip needs at least one P-frame"));
    }
    let mut buffers = Buffers::new(tape, &clip[0]);
    let mut pframes = Vec::with_capacity(clip.len() - 1);
    let mut rate: Option<Var<R>> = None;
    for x in &clip[1..] {
        let pf = codec.encode_pframe(tape, p, x, &buffers.refs(), predict, quant)?;
        let bits = pf.rate_bits(tape)?;
        rate = Some(match rate {
            None => bits,
            Some(r) => tape.add(&r, &bits)?,
        });
        buffers.push(tape, &pf)?;
        pframes.push(pf);
    }
    Ok(ClipForward {
        pframes,
        rate_bits: rate.unwrap(),
    })
}

/// Loss of one clip; gradients flow through every reference buffer.
pub fn clip_loss<R: Real>(
    codec: &Codec,
    tape: &Tape<R>,
    p: &ParamSet<R>,
    clip: &[Var<R>],
    cfg: &RdLossConfig,
    quant: &mut Quantizer,
) -> Result<(Var<R>, ClipForward<R>)> {
    let fwd = forward_clip(codec, tape, p, clip, true, quant)?;
    let recons: Vec<Var<R>> = fwd.pframes.iter().map(|f| f.x_hat.clone()).collect();
    let loss = rd_loss(tape, &clip[1..], &recons, &fwd.rate_bits, cfg)?;
    Ok((loss, fwd))
}

/// Adam with bias correction; moments are kept per named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

pub const DEFAULT_LR: f64 = 1e-4;

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every tensor that has a gradient.
    pub fn update(
        &mut self,
        weights: &mut ModelWeights,
        grads: &BTreeMap<String, Tensor<f32>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, g) in grads {
            let w = weights.get(name)?;
            let n = w.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut data = w.to_vec();
            for i in 0..n {
                let gi = g.data()[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let delta = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                data[i] = (data[i] as f64 - delta) as f32;
            }
            weights.set(name, Tensor::new(w.shape(), data)?)?;
        }
        Ok(())
    }
}

/// One optimization step's summary.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// Mean distortion term `D` over the batch.
    pub distortion: f64,
    /// Estimated bits per P-frame pixel.
    pub bpp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub loss: RdLossConfig,
    pub quant: QuantMode,
}

/// Batch loss and per-tensor gradients, averaged over clips in batch order.
pub fn compute_gradients(
    codec: &Codec,
    weights: &ModelWeights,
    batch: &[Vec<Tensor<f32>>],
    cfg: &StepConfig,
    seed: u64,
) -> Result<(StepReport, BTreeMap<String, Tensor<f32>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let tape = Tape::<f32>::new();
    let p = weights.bind(&tape, true);
    let mut quant = Quantizer::train(cfg.quant, seed);
    let mut total: Option<Var<f32>> = None;
    let (mut distortion, mut bits, mut pixels) = (0.0, 0.0, 0.0);
    for clip in batch {
        let vars: Vec<_> = clip.iter().map(|f| tape.constant(f.clone())).collect();
        let (loss, fwd) = clip_loss(codec, &tape, &p, &vars, &cfg.loss, &mut quant)?;
        let r = fwd.rate_bits.value().item() as f64;
        let px = ((clip.len() - 1) * clip[0].shape().plane()) as f64;
        distortion += (loss.value().item() as f64 - r / px) / cfg.loss.lambda;
        bits += r;
        pixels += px;
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(&t, &loss)?,
        });
    }
    let n = batch.len() as f64;
    let loss = tape.scale(&total.unwrap(), 1.0 / n as f32);
    let value = loss.value().item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {value} (distortion {}, {bits} bits)",
            distortion / n
        )));
    }
    let grads = tape.backward(&loss)?;
    let mut out = BTreeMap::new();
    for (name, var) in p.iter() {
        if let Some(g) = grads.wrt(var) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            out.insert(name.clone(), g);
        }
    }
    Ok((
        StepReport {
            loss: value,
            distortion: distortion / n,
            bpp: bits / pixels,
        },
        out,
    ))
}

/// One joint gradient step over every network.
pub fn train_step(
    codec: &Codec,
    weights: &mut ModelWeights,
    adam: &mut Adam,
    batch: &[Vec<Tensor<f32>>],
    cfg: &StepConfig,
    seed: u64,
) -> Result<StepReport> {
    let (report, grads) = compute_gradients(codec, weights, batch, cfg, seed)?;
    adam.update(weights, &grads)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumConfig {
    pub initial_pframes: usize,
    /// Iterations between clip extensions.
    pub step_iters: u64,
    pub max_pframes: usize,
    pub batch_size: usize,
    /// Iterations of the MSE stage.
    pub iters: u64,
    pub lr: f64,
    pub lambda_index: usize,
    pub quant: QuantMode,
    /// Side of the random square crop taken from each clip, if smaller than
    /// the frames.
    pub crop: Option<usize>,
    /// Adds an MS-SSIM fine-tuning stage of `iters / 5` iterations.
    pub ms_ssim_finetune: bool,
    pub seed: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            initial_pframes: 1,
            step_iters: 500,
            max_pframes: 5,
            batch_size: 4,
            iters: 2000,
            lr: DEFAULT_LR,
            lambda_index: 2,
            quant: QuantMode::Noise,
            crop: None,
            ms_ssim_finetune: false,
            seed: 0,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_iters == 0 {
            return Err(Error::invalid("step_iters must be positive"));
        }
        if self.initial_pframes == 0 || self.max_pframes < self.initial_pframes {
            return Err(Error::invalid(format!(
                "P-frame range {}..={} is empty",
                self.initial_pframes, self.max_pframes
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.lambda_index >= LAMBDAS.len() {
            return Err(Error::invalid(format!(
                "lambda index {} out of range",
                self.lambda_index
            )));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        Ok(())
    }

    /// P-frames per clip at iteration `iter`.
    pub fn pframes_at(&self, iter: u64) -> usize {
        let grown = self.initial_pframes as u64 + iter / self.step_iters;
        grown.min(self.max_pframes as u64) as usize
    }

    /// Frames per clip (one I-frame plus the P-frames) at `iter`.
    pub fn clip_len_at(&self, iter: u64) -> usize {
        1 + self.pframes_at(iter)
    }

    pub fn total_iters(&self) -> u64 {
        self.iters
            + if self.ms_ssim_finetune {
                self.iters / 5
            } else {
                0
            }
    }

    pub fn distortion_at(&self, iter: u64) -> Distortion {
        if iter < self.iters {
            Distortion::Mse
        } else {
            Distortion::MsSsim
        }
    }
}

fn mix(seed: u64, iter: u64) -> u64 {
    let mut z = seed ^ iter.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws a batch of `len`-frame windows, optionally cropped.
fn sample_batch(
    dataset: &[Vec<Tensor<f32>>],
    eligible: &[usize],
    len: usize,
    cfg: &CurriculumConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<Tensor<f32>>>> {
    (0..cfg.batch_size)
        .map(|_| {
            let clip = &dataset[eligible[rng.random_range(0..eligible.len())]];
            let start = rng.random_range(0..=clip.len() - len);
            let window = &clip[start..start + len];
            let s = window[0].shape();
            match cfg.crop {
                Some(c) if c < s.h || c < s.w => {
                    let (ch, cw) = (c.min(s.h), c.min(s.w));
                    let y0 = rng.random_range(0..=s.h - ch);
                    let x0 = rng.random_range(0..=s.w - cw);
                    Ok(window
                        .iter()
                        .map(|f| {
                            Tensor::from_fn(Shape::new(1, 3, ch, cw), |_, c, y, x| {
                                f.at(0, c, y0 + y, x0 + x)
                            })
                        })
                        .collect())
                }
                _ => Ok(window.to_vec()),
            }
        })
        .collect()
}

/// Training state that can be checkpointed and resumed.
pub struct Trainer {
    pub codec: Codec,
    pub cfg: CurriculumConfig,
    pub weights: ModelWeights,
    pub adam: Adam,
    /// Next iteration to run.
    pub iter: u64,
}

/// Summary of a curriculum run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub reports: Vec<StepReport>,
    /// Dataset sequences too short for the longest clip they were needed for.
    pub skipped: usize,
}

impl Trainer {
    pub fn new(codec: Codec, cfg: CurriculumConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = ModelWeights::init(&codec, cfg.lambda_index, cfg.seed);
        Ok(Self::from_weights(codec, cfg, weights))
    }

    pub fn from_weights(codec: Codec, cfg: CurriculumConfig, weights: ModelWeights) -> Self {
        Self {
            adam: Adam::new(cfg.lr),
            codec,
            cfg,
            weights,
            iter: 0,
        }
    }

    pub fn done(&self) -> bool {
        self.iter >= self.cfg.total_iters()
    }

    /// Runs iteration `self.iter`.
    pub fn step(&mut self, dataset: &[Vec<Tensor<f32>>]) -> Result<(StepReport, usize)> {
        let len = self.cfg.clip_len_at(self.iter);
        let eligible: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset[i].len() >= len)
            .collect();
        let skipped = dataset.len() - eligible.len();
        if eligible.is_empty() {
            return Err(Error::invalid(format!(
                "no training sequence has the {len} frames iteration {} needs",
                self.iter
            )));
        }
        let seed = mix(self.cfg.seed, self.iter);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = sample_batch(dataset, &eligible, len, &self.cfg, &mut rng)?;
        let step = StepConfig {
            loss: RdLossConfig::new(self.cfg.lambda_index, self.cfg.distortion_at(self.iter)),
            quant: self.cfg.quant,
        };
        let report = train_step(
            &self.codec,
            &mut self.weights,
            &mut self.adam,
            &batch,
            &step,
            rng.random(),
        )
        .map_err(|e| match e {
            Error::NonFinite(what) => {
                Error::NonFinite(format!("{what} at iteration {}", self.iter))
            }
            e => e,
        })?;
        self.iter += 1;
        Ok((report, skipped))
    }

    /// Runs to the end of the schedule, calling `on_step` after every
    /// iteration with its index and report.
    pub fn run(
        &mut self,
        dataset: &[Vec<Tensor<f32>>],
        mut on_step: impl FnMut(u64, &StepReport),
    ) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        let mut warned = 0;
        while !self.done() {
            let iter = self.iter;
            let (report, skipped) = self.step(dataset)?;
            if skipped > warned {
                log::warn!(
                    "{skipped} of {} sequences are shorter than {} frames and are skipped",
                    dataset.len(),
                    self.cfg.clip_len_at(iter)
                );
                warned = skipped;
            }
            log.skipped = log.skipped.max(skipped);
            on_step(iter, &report);
            log.reports.push(report);
        }
        Ok(log)
    }

    /// Writes the weights to `path` and optimizer state plus schedule
    /// position to the sidecar next to it.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.weights.save(path)?;
        write_atomic(&sidecar_path(path), &self.sidecar_bytes()?)
    }

    fn sidecar_bytes(&self) -> Result<Vec<u8>> {
        if self.iter >= 1 << 24 || self.adam.step >= 1 << 24 {
            return Err(Error::invalid("checkpoint counters exceed 2^24"));
        }
        let mut owned: Vec<(String, Tensor<f32>)> = vec![
            ("adam.step".into(), Tensor::scalar(self.adam.step as f32)),
            ("curriculum.iter".into(), Tensor::scalar(self.iter as f32)),
        ];
        for (prefix, moments) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for (name, data) in moments {
                let shape = self.weights.get(name)?.shape();
                owned.push((format!("{prefix}{name}"), Tensor::new(shape, data.clone())?));
            }
        }
        let entries: Vec<(&str, &Tensor<f32>)> =
            owned.iter().map(|(k, v)| (k.as_str(), v)).collect();
        Ok(write_container(&entries))
    }

    /// Restores a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(codec: Codec, cfg: CurriculumConfig, path: &Path) -> Result<Self> {
        cfg.validate()?;
        let weights = ModelWeights::load_for(path, &codec)?;
        let mut t = Self::from_weights(codec, cfg, weights);
        let side = read_container(&std::fs::read(sidecar_path(path))?)?;
        let scalar = |k: &str| -> Result<u64> {
            let v = side
                .get(k)
                .ok_or_else(|| Error::Weights(format!("checkpoint lacks `{k}`")))?
                .item();
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Weights(format!("bad `{k}` {v}")));
            }
            Ok(v as u64)
        };
        t.adam.step = scalar("adam.step")?;
        t.iter = scalar("curriculum.iter")?;
        for (name, tensor) in &side {
            let (map, key) = if let Some(k) = name.strip_prefix("adam.m.") {
                (&mut t.adam.m, k)
            } else if let Some(k) = name.strip_prefix("adam.v.") {
                (&mut t.adam.v, k)
            } else {
                continue;
            };
            if t.weights.get(key)?.shape() != tensor.shape() {
                return Err(Error::Weights(format!(
                    "moment `{name}` has the wrong shape"
                )));
            }
            map.insert(key.to_string(), tensor.to_vec());
        }
        Ok(t)
    }
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".opt");
    PathBuf::from(s)
}

/// Runs the whole curriculum from fresh weights.
pub fn run_curriculum(
    codec: &Codec,
    dataset: &[Vec<Tensor<f32>>],
    cfg: &CurriculumConfig,
) -> Result<(ModelWeights, TrainLog)> {
    let mut t = Trainer::new(codec.clone(), cfg.clone())?;
    let log = t.run(dataset, |_, _| {})?;
    Ok((t.weights, log))
}
