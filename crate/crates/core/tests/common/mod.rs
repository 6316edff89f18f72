//! Shared oracles for integration tests.
#![allow(dead_code)]

use lvc_core::tensor::{Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

/// Relative error with a small absolute floor so that near-zero gradients do
/// not dominate.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences of a scalar function of several tensors,
/// compared against the tape's analytic gradient. Returns the worst
/// relative error over all probed elements.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    step: f64,
    max_probes_per_input: usize,
    f: impl Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>,
) -> f64 {
    let tape = Tape::<f64>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(&loss).unwrap();
    let eval = |perturbed: &[Tensor<f64>]| {
        let tape = Tape::<f64>::inference();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).value().item()
    };
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(&vars[i])
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let n = input.numel();
        let stride = (n / max_probes_per_input.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut d = input.to_vec();
            d[j] += step;
            plus[i] = Tensor::new(input.shape(), d.clone()).unwrap();
            d[j] -= 2.0 * step;
            minus[i] = Tensor::new(input.shape(), d).unwrap();
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let e = rel_err(analytic.data()[j], numeric);
            if e > worst {
                worst = e;
            }
        }
    }
    worst
}

/// Fixed random projection so that `sum(out * weights)` exercises every
/// output element with a distinct cotangent.
pub fn project(tape: &Tape<f64>, out: &Var<f64>, seed: u64) -> Var<f64> {
    let mut r = rng(seed);
    let w = tape.constant(random_tensor(&mut r, out.shape(), -1.0, 1.0));
    tape.sum(&tape.mul(out, &w).unwrap())
}

use lvc_core::codecnets::{Codec, LatentSource, ModelWeights, PFrame, Stream};

/// Codec weights with every zero-initialized tensor (backbone tails, flow
/// refinements, biases) replaced by small random values so that all paths
/// carry signal.
pub fn busy_weights(codec: &Codec, seed: u64) -> ModelWeights {
    let mut w = ModelWeights::init(codec, 2, seed);
    let mut r = rng(seed ^ 0x5eed);
    for t in w.tensors.values_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = Tensor::from_fn(t.shape(), |_, _, _, _| r.random_range(-0.05f32..0.05));
        }
    }
    w
}

/// Smooth random RGB frame in [0, 1].
pub fn smooth_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..6.28),
                rng.random_range(0.05..0.2),
            ]
        })
        .collect();
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        let mut v = 0.5;
        for (i, [fx, fy, ph, a]) in waves.iter().enumerate() {
            v += a * ((fx * x as f64 + fy * y as f64 + ph + (c * i) as f64 * 0.7).sin());
        }
        v.clamp(0.0, 1.0) as f32
    })
}

/// Replays the integer tensors an encoder produced, in decode order.
pub struct Replay {
    pub tensors: Vec<Tensor<f32>>,
    pub next: usize,
}

impl Replay {
    pub fn from_pframe(p: &PFrame<f32>) -> Self {
        Self {
            tensors: vec![
                p.mv.z_hat.value().clone(),
                p.mv.delta_hat.value().clone(),
                p.res.z_hat.value().clone(),
                p.res.delta_hat.value().clone(),
            ],
            next: 0,
        }
    }

    fn pop(&mut self) -> Tensor<f32> {
        self.next += 1;
        self.tensors[self.next - 1].clone()
    }
}

impl LatentSource for Replay {
    fn hyper(&mut self, _: Stream, shape: Shape, _: &Tensor<f32>) -> lvc_core::Result<Tensor<f32>> {
        let t = self.pop();
        assert_eq!(t.shape(), shape);
        Ok(t)
    }

    fn delta(
        &mut self,
        _: Stream,
        _: &Tensor<f32>,
        _: &Tensor<f32>,
    ) -> lvc_core::Result<Tensor<f32>> {
        Ok(self.pop())
    }
}

/// Normal-equation cubic fit and trapezoid integration.
pub fn bd_oracle(a: &[(f64, f64)], t: &[(f64, f64)]) -> f64 {
    // Qualities are shifted by a fixed 35 dB to keep the normal equations
    // well conditioned; the shift cancels in the difference.
    let fit = |pts: &[(f64, f64)]| -> [f64; 4] {
        let mut m = [[0.0f64; 5]; 4];
        for &(r, q) in pts {
            let q = q - 35.0;
            let pw = [1.0, q, q * q, q * q * q];
            for i in 0..4 {
                for j in 0..4 {
                    m[i][j] += pw[i] * pw[j];
                }
                m[i][4] += pw[i] * r.ln();
            }
        }
        for col in 0..4 {
            let piv = (col..4)
                .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
                .unwrap();
            m.swap(col, piv);
            for row in 0..4 {
                if row != col {
                    let f = m[row][col] / m[col][col];
                    for k in col..5 {
                        m[row][k] -= f * m[col][k];
                    }
                }
            }
        }
        [0, 1, 2, 3].map(|i| m[i][4] / m[i][i])
    };
    let (ca, ct) = (fit(a), fit(t));
    let range = |p: &[(f64, f64)]| {
        p.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &(_, q)| {
            (lo.min(q), hi.max(q))
        })
    };
    let (lo, hi) = (range(a).0.max(range(t).0), range(a).1.min(range(t).1));
    let poly = |c: &[f64; 4], q: f64| {
        let q = q - 35.0;
        c[0] + c[1] * q + c[2] * q * q + c[3] * q * q * q
    };
    let n = 20_000;
    let hstep = (hi - lo) / n as f64;
    let mut area = 0.0;
    for i in 0..n {
        let (q0, q1) = (lo + i as f64 * hstep, lo + (i + 1) as f64 * hstep);
        let d0 = poly(&ct, q0) - poly(&ca, q0);
        let d1 = poly(&ct, q1) - poly(&ca, q1);
        area += 0.5 * (d0 + d1) * hstep;
    }
    ((area / (hi - lo)).exp() - 1.0) * 100.0
}

pub fn random_curve(r: &mut impl Rng) -> Vec<(f64, f64)> {
    let mut rate = r.random_range(0.02..0.08);
    let mut q = r.random_range(28.0..31.0);
    (0..5)
        .map(|_| {
            rate *= r.random_range(1.5..2.2);
            q += r.random_range(1.2..2.2);
            (rate, q)
        })
        .collect()
}

use lvc_core::codecnets::Quantizer;
use lvc_core::entropy::{QuantMode, LIKELIHOOD_FLOOR};
use lvc_core::training::{clip_loss, translating_clip, ClipForward, Distortion, RdLossConfig};
use std::collections::BTreeMap;

/// Bits at the likelihood floor; the rate gradient passes through the floor
/// there, so finite differences cannot match.
fn floored_symbols(fwd: &ClipForward<f64>) -> usize {
    let floor_bits = -LIKELIHOOD_FLOOR.log2();
    fwd.pframes
        .iter()
        .flat_map(|f| {
            [
                &f.mv.hyper_bits,
                &f.mv.delta_bits,
                &f.res.hyper_bits,
                &f.res.delta_bits,
            ]
        })
        .map(|b| {
            b.value()
                .data()
                .iter()
                .filter(|&&v| v >= floor_bits - 1e-9)
                .count()
        })
        .sum()
}

pub struct E2eReport {
    pub networks: Vec<&'static str>,
    pub probes: usize,
    pub worst: f64,
    /// Probes above `tol`, as `network name[index]: analytic vs numeric`.
    pub failures: Vec<String>,
}

/// Central differences of the end-to-end loss at 64 bits against the tape,
/// probing `per_net` scalars with non-negligible gradient in every network.
/// Configurations with symbols at the likelihood floor are skipped.
pub fn end_to_end_gradcheck(per_net: usize, tol: f64) -> E2eReport {
    let codec = Codec::default();
    let cfg = RdLossConfig {
        lambda: 2048.0,
        distortion: Distortion::Mse,
    };
    let eval = |params: &BTreeMap<String, Tensor<f64>>, clip: &[Tensor<f64>], trainable: bool| {
        let tape = Tape::<f64>::new();
        let mut p = lvc_core::layers::ParamSet::bind(&tape, std::iter::empty(), false);
        let mut vars = BTreeMap::new();
        for (k, v) in params {
            let var = if trainable {
                tape.leaf(v.clone())
            } else {
                tape.constant(v.clone())
            };
            vars.insert(k.clone(), var.clone());
            p.insert(k.clone(), var);
        }
        let frames: Vec<_> = clip.iter().map(|f| tape.constant(f.clone())).collect();
        let mut quant = Quantizer::train(QuantMode::Noise, 77);
        let (loss, fwd) = clip_loss(&codec, &tape, &p, &frames, &cfg, &mut quant).unwrap();
        let floored = floored_symbols(&fwd);
        let grads: Option<BTreeMap<String, Tensor<f64>>> = trainable.then(|| {
            let g = tape.backward(&loss).unwrap();
            vars.iter()
                .filter_map(|(k, v)| g.wrt(v).map(|t| (k.clone(), t)))
                .collect()
        });
        (loss.value().item(), floored, grads)
    };
    let (base, clip, grads) = (10..40)
        .find_map(|seed| {
            let base: BTreeMap<String, Tensor<f64>> = busy_weights(&codec, seed)
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect();
            let clip: Vec<Tensor<f64>> = translating_clip(&mut rng(seed), 16, 16, 3, 2)
                .iter()
                .map(|f| f.cast())
                .collect();
            let (_, floored, grads) = eval(&base, &clip, true);
            (floored == 0).then(|| (base, clip, grads.unwrap()))
        })
        .expect("no configuration free of floored symbols");

    let mut r = rng(10);
    let mut by_net: BTreeMap<&'static str, Vec<&String>> = BTreeMap::new();
    for name in base.keys() {
        by_net
            .entry(Codec::network_of(name))
            .or_default()
            .push(name);
    }
    let mut report = E2eReport {
        networks: by_net.keys().copied().collect(),
        probes: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    for (net, names) in &by_net {
        let mut found = 0;
        for _ in 0..400 {
            if found == per_net {
                break;
            }
            let name = names[r.random_range(0..names.len())];
            let g = &grads[name];
            let j = r.random_range(0..g.numel());
            let analytic = g.data()[j];
            if analytic.abs() < 1e-4 {
                continue;
            }
            let h = 1e-5;
            let nudge = |d: f64| {
                let mut p = base.clone();
                let mut v = p[name].to_vec();
                v[j] += d;
                p.insert(name.clone(), Tensor::new(p[name].shape(), v).unwrap());
                eval(&p, &clip, false).0
            };
            let numeric = (nudge(h) - nudge(-h)) / (2.0 * h);
            let e = rel_err(analytic, numeric);
            if e >= tol {
                report
                    .failures
                    .push(format!("{net} {name}[{j}]: {analytic} vs {numeric}"));
            }
            report.worst = report.worst.max(e);
            found += 1;
            report.probes += 1;
        }
    }
    report
}
