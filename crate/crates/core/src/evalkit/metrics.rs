use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tape, Tensor, Var};

/// PSNR returned for identical inputs.
pub const PSNR_CAP: f64 = 100.0;

/// Per-scale exponents of the 5-scale MS-SSIM product.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_dims<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "metric inputs differ: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    if a.numel() == 0 {
        return Err(Error::invalid("metric inputs are empty"));
    }
    Ok(())
}

pub fn mse<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<f64> {
    same_dims(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(s / a.numel() as f64)
}

/// `10 log10(1 / MSE)` for pixels in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Number of scales and the first-scale window on an `h x w` image. Five
/// scales need 160 pixels on the short side; smaller images drop the
/// coarsest scales, and images under 11 pixels shrink the window.
pub fn ms_ssim_plan(h: usize, w: usize) -> (usize, usize) {
    let side = h.min(w);
    let mut scales = 1;
    while scales < MS_SSIM_WEIGHTS.len() && side >> scales >= 10 {
        scales += 1;
    }
    (scales, scale_window(side))
}

/// Largest odd window up to 11 that fits in `side`.
pub fn scale_window(side: usize) -> usize {
    let w = side.min(SSIM_WINDOW);
    if w % 2 == 1 {
        w
    } else {
        w.saturating_sub(1).max(1)
    }
}

fn gaussian_window<R: Real>(size: usize) -> Tensor<R> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    Tensor::from_fn(Shape::new(1, 1, size, size), |_, _, y, x| {
        R::from_f64(g[y] * g[x] / (total * total))
    })
}

/// MS-SSIM on a tape, differentiable in both inputs. Inputs are
/// `(n, c, h, w)` in [0, 1]; statistics are pooled over all images and
/// channels.
pub fn ms_ssim_var<R: Real>(tape: &Tape<R>, a: &Var<R>, b: &Var<R>) -> Result<Var<R>> {
    let s = a.shape();
    if s != b.shape() {
        return Err(Error::invalid(format!(
            "ms_ssim inputs differ: {s} vs {}",
            b.shape()
        )));
    }
    let (scales, _) = ms_ssim_plan(s.h, s.w);
    if scales < MS_SSIM_WEIGHTS.len() {
        log::debug!("ms_ssim: {}x{} input uses {scales} of 5 scales", s.h, s.w);
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let norm: f64 = weights.iter().sum();
    let planes = Shape::new(s.n * s.c, 1, s.h, s.w);
    let mut x = tape.reshape(a, planes)?;
    let mut y = tape.reshape(b, planes)?;
    let (c1, c2) = (R::from_f64(C1), R::from_f64(C2));
    let tiny = R::from_f64(1e-12);
    let mut product: Option<Var<R>> = None;
    for (j, &wj) in weights.iter().enumerate() {
        if j > 0 {
            x = tape.avg_pool2(&x)?;
            y = tape.avg_pool2(&y)?;
        }
        let xs = x.shape();
        let window = tape.constant(gaussian_window(scale_window(xs.h.min(xs.w))));
        let blur = |v: &Var<R>| tape.conv2d(v, &window, None, 1, 0);
        let mu_x = blur(&x)?;
        let mu_y = blur(&y)?;
        let mu_xx = tape.mul(&mu_x, &mu_x)?;
        let mu_yy = tape.mul(&mu_y, &mu_y)?;
        let mu_xy = tape.mul(&mu_x, &mu_y)?;
        let s_xx = tape.sub(&blur(&tape.mul(&x, &x)?)?, &mu_xx)?;
        let s_yy = tape.sub(&blur(&tape.mul(&y, &y)?)?, &mu_yy)?;
        let s_xy = tape.sub(&blur(&tape.mul(&x, &y)?)?, &mu_xy)?;
        let cs_map = tape.div(
            &tape.add_scalar(&tape.scale(&s_xy, R::from_f64(2.0)), c2),
            &tape.add_scalar(&tape.add(&s_xx, &s_yy)?, c2),
        )?;
        let term = if j + 1 == scales {
            let l_map = tape.div(
                &tape.add_scalar(&tape.scale(&mu_xy, R::from_f64(2.0)), c1),
                &tape.add_scalar(&tape.add(&mu_xx, &mu_yy)?, c1),
            )?;
            tape.mean(&tape.mul(&l_map, &cs_map)?)
        } else {
            tape.mean(&cs_map)
        };
        // Negative structure terms would make the fractional power undefined.
        let term = tape.clamp(&term, tiny, R::from_f64(f64::MAX));
        let factor = tape.powf(&term, R::from_f64(wj / norm));
        product = Some(match product {
            None => factor,
            Some(p) => tape.mul(&p, &factor)?,
        });
    }
    Ok(product.expect("at least one scale"))
}

pub fn ms_ssim<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<f64> {
    same_dims(a, b)?;
    let tape = Tape::<f64>::inference();
    let v = ms_ssim_var(&tape, &tape.constant(a.cast()), &tape.constant(b.cast()))?;
    Ok(v.value().item())
}
