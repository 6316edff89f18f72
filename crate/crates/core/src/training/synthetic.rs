//! Procedural training clips: textured canvases under global translation and
//! moving periodic patterns.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Shape, Tensor};

/// Per-channel sinusoid mixture plus a few hard-edged rectangles, quantized
/// to 8 bits.
fn texture(rng: &mut impl Rng, h: usize, w: usize) -> Vec<[f32; 3]> {
    let waves: Vec<[f64; 5]> = (0..5)
        .map(|_| {
            [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.04..0.14),
                rng.random_range(0.0..3.0),
            ]
        })
        .collect();
    let rects: Vec<(usize, usize, usize, usize, [f64; 3])> = (0..6)
        .map(|_| {
            let (rh, rw) = (
                rng.random_range(2..=h / 3 + 2),
                rng.random_range(2..=w / 3 + 2),
            );
            let color = [0; 3].map(|_| rng.random_range(-0.25..0.25));
            (
                rng.random_range(0..h),
                rng.random_range(0..w),
                rh,
                rw,
                color,
            )
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0.5f64; 3];
            for (c, v) in px.iter_mut().enumerate() {
                for [fx, fy, ph, a, shift] in &waves {
                    *v += a * (fx * x as f64 + fy * y as f64 + ph + shift * c as f64).sin();
                }
            }
            for &(ry, rx, rh, rw, color) in &rects {
                if (ry..ry + rh).contains(&y) && (rx..rx + rw).contains(&x) {
                    for c in 0..3 {
                        px[c] += color[c];
                    }
                }
            }
            out.push(px.map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32));
        }
    }
    out
}

/// A window sliding over a larger random texture at a constant integer
/// velocity of up to `max_speed` pixels per frame on each axis.
pub fn translating_clip(
    rng: &mut impl Rng,
    h: usize,
    w: usize,
    frames: usize,
    max_speed: i64,
) -> Vec<Tensor<f32>> {
    let s = max_speed.max(0);
    let (vy, vx) = (rng.random_range(-s..=s), rng.random_range(-s..=s));
    let span = s as usize * frames.saturating_sub(1);
    let (ch, cw) = (h + span, w + span);
    let canvas = texture(rng, ch, cw);
    let oy = if vy < 0 { span as i64 } else { 0 };
    let ox = if vx < 0 { span as i64 } else { 0 };
    (0..frames as i64)
        .map(|t| {
            let (y0, x0) = ((oy + vy * t) as usize, (ox + vx * t) as usize);
            Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
                canvas[(y0 + y) * cw + x0 + x][c]
            })
        })
        .collect()
}

/// Drifting sinusoidal gratings with a translating checkerboard overlay;
/// both repeat with short spatial periods.
pub fn periodic_clip(rng: &mut impl Rng, h: usize, w: usize, frames: usize) -> Vec<Tensor<f32>> {
    let gratings: Vec<[f64; 5]> = (0..2)
        .map(|_| {
            let period = rng.random_range(6.0..16.0);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let k = std::f64::consts::TAU / period;
            [
                k * angle.cos(),
                k * angle.sin(),
                rng.random_range(-0.6..0.6),
                rng.random_range(0.1..0.2),
                rng.random_range(0.0..2.0),
            ]
        })
        .collect();
    let cell = rng.random_range(3..8usize);
    let (vy, vx) = (rng.random_range(-2i64..=2), rng.random_range(-2i64..=2));
    let tint = [0; 3].map(|_| rng.random_range(-0.15..0.15));
    (0..frames)
        .map(|t| {
            Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
                let mut v = 0.5;
                for [kx, ky, speed, a, shift] in &gratings {
                    v += a
                        * (kx * x as f64 + ky * y as f64 + speed * t as f64 + shift * c as f64)
                            .sin();
                }
                let cy = (y as i64 - vy * t as i64).div_euclid(cell as i64);
                let cx = (x as i64 - vx * t as i64).div_euclid(cell as i64);
                if (cy + cx) % 2 == 0 {
                    v += tint[c];
                }
                ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
            })
        })
        .collect()
}

/// `count` clips alternating between the two generators.
pub fn synthetic_dataset(
    seed: u64,
    count: usize,
    h: usize,
    w: usize,
    frames: usize,
) -> Vec<Vec<Tensor<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            if i % 2 == 0 {
                translating_clip(&mut rng, h, w, frames, 3)
            } else {
                periodic_clip(&mut rng, h, w, frames)
            }
        })
        .collect()
}
