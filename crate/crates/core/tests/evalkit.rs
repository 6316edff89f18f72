mod common;

use common::{bd_oracle, random_curve, rng, smooth_frame};
use lvc_core::evalkit::*;
use lvc_core::tensor::{Shape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn frame(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| f(c, y, x))
}

#[test]
fn psnr_of_identical_frames_is_capped() {
    let a = smooth_frame(&mut rng(1), 16, 16);
    assert_eq!(psnr(&a, &a).unwrap(), 100.0);
}

#[test]
fn psnr_of_one_level_error() {
    let a = frame(8, 8, |c, y, x| ((c + y + x) % 200) as f32 / 255.0);
    let b = a.map(|v| v + 1.0 / 255.0);
    let p = psnr(&a, &b).unwrap();
    assert!((p - 48.1308).abs() <= 1e-4, "{p}");
    assert_eq!(p, psnr(&b, &a).unwrap());
    assert!(psnr(&a, &frame(8, 9, |_, _, _| 0.0)).is_err());
}

#[test]
fn ms_ssim_of_identical_frames_is_exactly_one() {
    for (h, w) in [(200, 180), (64, 48), (7, 9)] {
        let a = smooth_frame(&mut rng(2), h, w);
        assert_eq!(ms_ssim(&a, &a).unwrap(), 1.0, "{h}x{w}");
    }
}

#[test]
fn ms_ssim_scale_plan() {
    assert_eq!(ms_ssim_plan(160, 200), (5, 11));
    assert_eq!(ms_ssim_plan(159, 200), (4, 11));
    assert_eq!(ms_ssim_plan(32, 32), (2, 11));
    assert_eq!(ms_ssim_plan(19, 40), (1, 11));
    assert_eq!(ms_ssim_plan(8, 20), (1, 7));
    assert_eq!(scale_window(10), 9);
}

/// Direct loop implementation with the same conventions: valid Gaussian
/// filtering with the window shrunk to the largest odd size that fits,
/// 2x2 average downsampling, renormalized weights when scales are dropped,
/// statistics pooled over channels.
fn ms_ssim_oracle(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let s = a.shape();
    let scales = (1..=5)
        .take_while(|k| s.h.min(s.w) >> (k - 1) >= 10)
        .count()
        .max(1);
    let mut x: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|c| {
            (0..s.h)
                .map(|y| (0..s.w).map(|i| a.at(0, c, y, i) as f64).collect())
                .collect()
        })
        .collect();
    let mut yv: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|c| {
            (0..s.h)
                .map(|y| (0..s.w).map(|i| b.at(0, c, y, i) as f64).collect())
                .collect()
        })
        .collect();
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let norm: f64 = weights.iter().sum();
    let (c1, c2) = (1e-4, 9e-4);
    let mut out = 1.0;
    for (j, wj) in weights.iter().enumerate() {
        if j > 0 {
            let down = |p: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                (0..p.len() / 2)
                    .map(|y| {
                        (0..p[0].len() / 2)
                            .map(|x| {
                                (p[2 * y][2 * x]
                                    + p[2 * y + 1][2 * x]
                                    + p[2 * y][2 * x + 1]
                                    + p[2 * y + 1][2 * x + 1])
                                    / 4.0
                            })
                            .collect()
                    })
                    .collect()
            };
            x = x.iter().map(down).collect();
            yv = yv.iter().map(down).collect();
        }
        let side = x[0].len().min(x[0][0].len()).min(11);
        let win = if side % 2 == 1 { side } else { side - 1 };
        let g: Vec<f64> = (0..win)
            .map(|i| (-((i as f64 - (win / 2) as f64).powi(2)) / 4.5).exp())
            .collect();
        let gs: f64 = g.iter().sum();
        let (mut cs_sum, mut ssim_sum, mut n) = (0.0, 0.0, 0.0);
        for c in 0..3 {
            let (p, q) = (&x[c], &yv[c]);
            for oy in 0..=p.len() - win {
                for ox in 0..=p[0].len() - win {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for ky in 0..win {
                        for kx in 0..win {
                            let wt = g[ky] * g[kx] / (gs * gs);
                            let (u, v) = (p[oy + ky][ox + kx], q[oy + ky][ox + kx]);
                            mx += wt * u;
                            my += wt * v;
                            xx += wt * u * u;
                            yy += wt * v * v;
                            xy += wt * u * v;
                        }
                    }
                    let cs = (2.0 * (xy - mx * my) + c2) / (xx - mx * mx + yy - my * my + c2);
                    let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                    cs_sum += cs;
                    ssim_sum += l * cs;
                    n += 1.0;
                }
            }
        }
        let term = if j + 1 == scales {
            ssim_sum / n
        } else {
            cs_sum / n
        };
        out *= term.max(1e-12).powf(wj / norm);
    }
    out
}

#[test]
fn ms_ssim_matches_a_direct_implementation() {
    let mut r = rng(3);
    for (h, w) in [(40, 36), (24, 24), (9, 10), (21, 30)] {
        let a = smooth_frame(&mut r, h, w);
        let b = noisy(&a, &mut r, 0.1);
        let got = ms_ssim(&a, &b).unwrap();
        let want = ms_ssim_oracle(&a, &b);
        assert!((got - want).abs() < 1e-9, "{h}x{w}: {got} vs {want}");
        assert_eq!(got, ms_ssim(&b, &a).unwrap());
    }
}

#[test]
fn ms_ssim_of_inverted_binary_image_is_low() {
    let mut r = rng(4);
    let a = frame(64, 64, |_, _, _| if r.random::<bool>() { 1.0 } else { 0.0 });
    let b = a.map(|v| 1.0 - v);
    let v = ms_ssim(&a, &b).unwrap();
    assert!(v < 0.2, "{v}");
}

#[test]
fn ms_ssim_falls_as_noise_grows() {
    let a = smooth_frame(&mut rng(5), 160, 160);
    let mut r = rng(6);
    let unit: Vec<f32> = (0..a.numel())
        .map(|_| r.random_range(-1.0f32..1.0))
        .collect();
    let mut prev = 1.0;
    for amp in [0.01f32, 0.03, 0.06, 0.1, 0.2] {
        let data = a
            .data()
            .iter()
            .zip(&unit)
            .map(|(v, n)| v + amp * n)
            .collect();
        let b = Tensor::new(a.shape(), data).unwrap();
        let s = ms_ssim(&a, &b).unwrap();
        assert!(s < prev, "amp {amp}: {s} !< {prev}");
        prev = s;
    }
}

fn noisy(a: &Tensor<f32>, r: &mut impl Rng, amp: f32) -> Tensor<f32> {
    let data = a
        .data()
        .iter()
        .map(|v| (v + amp * r.random_range(-1.0f32..1.0)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(a.shape(), data).unwrap()
}

fn curve(pairs: &[(f64, f64)]) -> RdCurve {
    RdCurve::from_pairs(pairs).unwrap()
}

const ANCHOR: [(f64, f64); 5] = [
    (0.05, 30.1),
    (0.09, 32.0),
    (0.16, 33.8),
    (0.3, 35.7),
    (0.55, 37.2),
];

#[test]
fn bd_rate_of_identical_curves_is_zero() {
    let c = curve(&ANCHOR);
    assert_eq!(bd_rate(&c, &c, Quality::Psnr).unwrap(), 0.0);
}

#[test]
fn bd_rate_of_half_rate_is_minus_fifty() {
    let a = curve(&ANCHOR);
    let half: Vec<_> = ANCHOR.iter().map(|&(r, q)| (r / 2.0, q)).collect();
    let d = bd_rate(&a, &curve(&half), Quality::Psnr).unwrap();
    assert!((d + 50.0).abs() < 1e-9, "{d}");
}

#[test]
fn bd_rate_rejects_bad_curves() {
    let a = curve(&ANCHOR);
    let short = curve(&ANCHOR[..3]);
    assert!(bd_rate(&a, &short, Quality::Psnr).is_err());
    let far: Vec<_> = ANCHOR.iter().map(|&(r, q)| (r, q + 20.0)).collect();
    assert!(bd_rate(&a, &curve(&far), Quality::Psnr).is_err());
    assert!(RdCurve::from_pairs(&[(0.1, 30.0), (0.1, 31.0)]).is_err());
    assert!(RdCurve::from_pairs(&[(0.0, 30.0)]).is_err());
}

#[test]
fn bd_rate_matches_trapezoid_oracle() {
    let mut r = rng(7);
    for _ in 0..200 {
        let (a, t) = (random_curve(&mut r), random_curve(&mut r));
        let (ca, ct) = (curve(&a), curve(&t));
        let Ok(got) = bd_rate(&ca, &ct, Quality::Psnr) else {
            continue;
        };
        let want = bd_oracle(&a, &t);
        assert!((got - want).abs() <= 0.1, "{got} vs {want}");
        let back = bd_rate(&ct, &ca, Quality::Psnr).unwrap();
        let product = (1.0 + got / 100.0) * (1.0 + back / 100.0);
        assert!((0.999..=1.001).contains(&product), "{product}");
    }
}

fn fixture_y4m(tag: &str, w: usize, h: usize, frames: usize) -> Vec<u8> {
    let (cw, ch) = if tag == "C444" {
        (w, h)
    } else {
        (w.div_ceil(2), h.div_ceil(2))
    };
    let mut out = format!("YUV4MPEG2 W{w} H{h} F30:1 Ip A1:1 {tag}\n").into_bytes();
    for f in 0..frames {
        out.extend_from_slice(b"FRAME\n");
        out.extend((0..w * h).map(|i| (16 * i + 40 * f) as u8));
        out.extend(std::iter::repeat_n(128u8, cw * ch));
        out.extend(std::iter::repeat_n(128u8, cw * ch));
    }
    out
}

#[test]
fn minimal_y4m_fixture() {
    let clip = parse_y4m(&fixture_y4m("C420jpeg", 4, 4, 2)).unwrap();
    assert_eq!((clip.len(), clip.width, clip.height), (2, 4, 4));
    assert_eq!(clip.fps, (30, 1));
    assert_eq!(clip.chroma, Chroma::C420);
    // Neutral chroma leaves grey levels equal to luma.
    assert_eq!(clip.frames[1].at(0, 0, 1, 2), (16 * 6 + 40) as f32 / 255.0);
    assert_eq!(clip.frames[1].at(0, 2, 1, 2), clip.frames[1].at(0, 0, 1, 2));
}

#[test]
fn y4m_444_and_chroma_upsampling() {
    let clip = parse_y4m(&fixture_y4m("C444", 3, 2, 1)).unwrap();
    assert_eq!(clip.chroma, Chroma::C444);
    assert_eq!((clip.width, clip.height), (3, 2));

    // A 2x2 chroma block colours all four luma samples it covers.
    let mut bytes = b"YUV4MPEG2 W2 H2 F25:1 C420\nFRAME\n".to_vec();
    bytes.extend([100, 100, 100, 100, 90, 200]);
    let clip = parse_y4m(&bytes).unwrap();
    let f = &clip.frames[0];
    for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        assert_eq!(f.at(0, 0, y, x), f.at(0, 0, 0, 0));
        assert!(f.at(0, 0, y, x) > f.at(0, 2, y, x));
    }
}

#[test]
fn y4m_errors_carry_offsets_and_frame_indices() {
    let mut bytes = fixture_y4m("C420", 4, 4, 2);
    bytes.truncate(bytes.len() - 3);
    let err = parse_y4m(&bytes).unwrap_err().to_string();
    assert!(err.contains("frame 1"), "{err}");
    assert!(err.contains("byte"), "{err}");
    assert!(parse_y4m(b"YUV4MPEG2 W4 F30:1\n").is_err());
    assert!(parse_y4m(b"P6 4 4 255\n").is_err());
    assert!(parse_y4m(b"YUV4MPEG2 W2 H2 C420p10\n").is_err());
    let mut bad = fixture_y4m("C420", 2, 2, 1);
    let at = bad.len() - 7;
    bad[at] = b'G';
    assert!(parse_y4m(&bad).is_err());
}

#[test]
fn y4m_write_then_read_is_close() {
    let frames: Vec<_> = (0..3)
        .map(|i| smooth_frame(&mut rng(10 + i), 10, 14))
        .collect();
    let clip = VideoClip::new(frames, (24, 1), Chroma::Rgb).unwrap();
    let back = parse_y4m(&y4m_bytes(&clip)).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in clip.frames.iter().zip(&back.frames) {
        let worst = a.zip_map(b, |x, y| (x - y).abs()).unwrap().max_abs();
        assert!(worst <= 2.5 / 255.0, "{worst}");
    }
    let again = parse_y4m(&y4m_bytes(&back)).unwrap();
    for (a, b) in back.frames.iter().zip(&again.frames) {
        assert!(a.zip_map(b, |x, y| (x - y).abs()).unwrap().max_abs() <= 2.5 / 255.0);
    }
}

#[test]
fn png_directory_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let frames: Vec<_> = (0..3)
        .map(|i| {
            let f = smooth_frame(&mut rng(20 + i), 9, 7);
            f.map(|v| (v * 255.0).round() / 255.0)
        })
        .collect();
    let clip = VideoClip::new(frames, (25, 1), Chroma::Rgb).unwrap();
    write_png_dir(&clip, dir.path()).unwrap();
    let back = load_png_dir(dir.path()).unwrap();
    assert_eq!(back.frames, clip.frames);
    write_png_dir(&back, &dir.path().join("again")).unwrap();
    assert_eq!(
        load_video(&dir.path().join("again")).unwrap().frames,
        clip.frames
    );
}

#[test]
fn png_directory_rejects_mixed_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let a = VideoClip::new(vec![smooth_frame(&mut rng(1), 4, 4)], (25, 1), Chroma::Rgb).unwrap();
    let b = VideoClip::new(vec![smooth_frame(&mut rng(1), 5, 4)], (25, 1), Chroma::Rgb).unwrap();
    write_png_dir(&a, &dir.path().join("a")).unwrap();
    write_png_dir(&b, &dir.path().join("b")).unwrap();
    std::fs::rename(
        dir.path().join("b/frame_00000.png"),
        dir.path().join("a/frame_00001.png"),
    )
    .unwrap();
    let err = load_png_dir(&dir.path().join("a")).unwrap_err().to_string();
    assert!(err.contains("frame 1"), "{err}");
    assert!(load_png_dir(&dir.path().join("b")).is_err());
}

#[test]
fn csv_and_svg_reports() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<RdRow> = ANCHOR
        .iter()
        .zip([512.0, 1024.0, 2048.0, 4096.0, 6144.0])
        .map(|(&(bpp, psnr), lambda)| RdRow {
            sequence: "seq,a".into(),
            lambda,
            bpp,
            psnr,
            ms_ssim: 0.9,
        })
        .collect();
    let path = dir.path().join("rd.csv");
    write_rd_csv(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("sequence,lambda,bpp,psnr,ms_ssim\n"));
    assert_eq!(read_rd_csv(&path).unwrap(), rows);

    let svg = rd_svg(&[("anchor".into(), curve(&ANCHOR))], Quality::Psnr);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<circle").count(), 5);
}

#[test]
fn parameter_and_flop_counts() {
    use lvc_core::codecnets::{Codec, ModelWeights};
    use lvc_core::layers::Conv;
    let c = Conv::new("c", 3, 64, 3, 1);
    assert_eq!(c.param_count(), 1792);
    let s2 = Conv::new("c", 3, 64, 3, 2);
    assert_eq!(4 * s2.flops(64, 64), c.flops(64, 64));
    let codec = Codec::default();
    let w = ModelWeights::init(&codec, 0, 1);
    let expected: usize = codec.param_specs().iter().map(|s| s.shape.numel()).sum();
    assert_eq!(count_params(&w), expected);
    assert_eq!(count_flops(&codec, 64, 32), codec.flops(32, 64));
    assert!(count_flops(&codec, 64, 64) > count_flops(&codec, 32, 32));
}

proptest! {
    #[test]
    fn metrics_are_symmetric(seed in any::<u64>(), amp in 0.0f32..0.3) {
        let mut r = rng(seed);
        let a = smooth_frame(&mut r, 24, 20);
        let b = noisy(&a, &mut r, amp);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(ms_ssim(&a, &b).unwrap(), ms_ssim(&b, &a).unwrap());
        prop_assert!(ms_ssim(&a, &b).unwrap() <= 1.0);
    }

    #[test]
    fn bd_rate_of_a_curve_with_itself_is_zero(seed in any::<u64>()) {
        let c = curve(&random_curve(&mut rng(seed)));
        prop_assert_eq!(bd_rate(&c, &c, Quality::Psnr).unwrap(), 0.0);
    }
}
