//! Quality and rate metrics, BD-rate, complexity counters and video I/O.

mod metrics;
mod report;
mod video;

pub use metrics::{
    ms_ssim, ms_ssim_plan, ms_ssim_var, mse, psnr, psnr_from_mse, scale_window, MS_SSIM_WEIGHTS,
    PSNR_CAP, SSIM_SIGMA, SSIM_WINDOW,
};
pub use report::{rd_svg, read_rd_csv, write_rd_csv, RdRow};
pub use video::{
    load_png_dir, load_video, load_y4m, parse_y4m, write_png_dir, write_y4m, y4m_bytes, Chroma,
    VideoClip,
};

use nalgebra::{DMatrix, DVector};

use crate::codecnets::{Codec, ModelWeights};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
}

/// Which quality axis a BD-rate is computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quality {
    Psnr,
    MsSsim,
}

impl RdPoint {
    pub fn quality(&self, q: Quality) -> f64 {
        match q {
            Quality::Psnr => self.psnr,
            Quality::MsSsim => self.ms_ssim,
        }
    }
}

/// RD points ordered by increasing rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    /// Sorts by rate and checks that rates are positive and strictly
    /// increasing.
    pub fn new(mut points: Vec<RdPoint>) -> Result<Self> {
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        for p in &points {
            if !(p.bpp > 0.0) || !p.bpp.is_finite() || !p.psnr.is_finite() {
                return Err(Error::invalid(format!("invalid RD point {p:?}")));
            }
            if p.ms_ssim > 1.0 {
                return Err(Error::invalid(format!("ms_ssim {} above 1", p.ms_ssim)));
            }
        }
        if points.windows(2).any(|w| w[0].bpp >= w[1].bpp) {
            return Err(Error::invalid("bpp must be strictly increasing"));
        }
        Ok(Self { points })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(bpp, psnr)| RdPoint {
                    bpp,
                    psnr,
                    ms_ssim: 0.0,
                })
                .collect(),
        )
    }
}

/// Least-squares cubic in log rate over the standardized quality
/// `t = (q - center) / scale`.
struct Cubic {
    c: [f64; 4],
    center: f64,
    scale: f64,
}

impl Cubic {
    fn fit(q: &[f64], log_rate: &[f64]) -> Result<Self> {
        let n = q.len() as f64;
        let center = q.iter().sum::<f64>() / n;
        let scale = (q.iter().map(|v| (v - center).powi(2)).sum::<f64>() / n).sqrt();
        if !(scale > 0.0) {
            return Err(Error::invalid("curve qualities are all equal"));
        }
        let v = DMatrix::from_fn(q.len(), 4, |i, j| ((q[i] - center) / scale).powi(j as i32));
        let y = DVector::from_column_slice(log_rate);
        let c = v
            .svd(true, true)
            .solve(&y, 1e-12)
            .map_err(|e| Error::invalid(format!("cubic fit failed: {e}")))?;
        Ok(Self {
            c: [c[0], c[1], c[2], c[3]],
            center,
            scale,
        })
    }

    /// Integral over quality from `lo` to `hi`.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let c = &self.c;
        let anti = |q: f64| {
            let t = (q - self.center) / self.scale;
            c[0] * t + c[1] * t * t / 2.0 + c[2] * t.powi(3) / 3.0 + c[3] * t.powi(4) / 4.0
        };
        self.scale * (anti(hi) - anti(lo))
    }
}

/// Bjøntegaard delta rate of `test` against `anchor` in percent; negative
/// means `test` needs fewer bits for the same quality.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve, quality: Quality) -> Result<f64> {
    for (name, c) in [("anchor", anchor), ("test", test)] {
        if c.points.len() < 4 {
            return Err(Error::invalid(format!(
                "{name} curve has {} points, BD-rate needs 4",
                c.points.len()
            )));
        }
    }
    let axis = |c: &RdCurve| -> (Vec<f64>, Vec<f64>) {
        c.points
            .iter()
            .map(|p| (p.quality(quality), p.bpp.ln()))
            .unzip()
    };
    let (qa, ra) = axis(anchor);
    let (qt, rt) = axis(test);
    let range = |q: &[f64]| {
        q.iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    };
    let (la, ha) = range(&qa);
    let (lt, ht) = range(&qt);
    let (lo, hi) = (la.max(lt), ha.min(ht));
    if !(hi > lo) {
        return Err(Error::invalid(format!(
            "quality ranges [{la}, {ha}] and [{lt}, {ht}] do not overlap"
        )));
    }
    let ca = Cubic::fit(&qa, &ra)?;
    let ct = Cubic::fit(&qt, &rt)?;
    let avg = (ct.integral(lo, hi) - ca.integral(lo, hi)) / (hi - lo);
    Ok(avg.exp_m1() * 100.0)
}

pub fn count_params(weights: &ModelWeights) -> usize {
    weights.count_params()
}

/// Convolution FLOPs of one P-frame at `width x height`.
pub fn count_flops(codec: &Codec, width: usize, height: usize) -> u64 {
    codec.flops(height, width)
}
