use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lvc_core::codecnets::{write_atomic, Codec, ModelWeights, LAMBDAS};
use lvc_core::evalkit::{
    bd_rate, load_video, ms_ssim, psnr, rd_svg, read_rd_csv, write_png_dir, write_rd_csv,
    write_y4m, Chroma, Quality, RdCurve, RdPoint, RdRow, VideoClip,
};
use lvc_core::pipeline::{
    from_rgb8, to_rgb8, ExternalIntra, FrameCoder, FrameType, IntraCodec, SequenceDecoder,
    SequenceEncoder, StoredIntra,
};
use lvc_core::training::{synthetic_dataset, CurriculumConfig, Trainer};
use lvc_core::Tensor;
use rayon::prelude::*;

use crate::{usage, BdrateArgs, DecodeArgs, EncodeArgs, EvalArgs, IntraArgs, TrainArgs};

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn require_parent(path: &Path) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(p) = parent {
        if !p.is_dir() {
            return Err(usage(format!(
                "output directory {} does not exist",
                p.display()
            )));
        }
    }
    Ok(())
}

fn intra_codec(args: &IntraArgs) -> Box<dyn IntraCodec + Sync> {
    match (&args.intra_encode, &args.intra_decode) {
        (enc, Some(dec)) => {
            let split = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
            Box::new(ExternalIntra {
                encode_cmd: enc.as_deref().map(split).unwrap_or_default(),
                decode_cmd: split(dec),
            })
        }
        _ => Box::new(StoredIntra),
    }
}

fn load_coder(path: &Path) -> Result<FrameCoder> {
    let codec = Codec::default();
    let weights = ModelWeights::load_for(path, &codec)
        .with_context(|| format!("loading weights {}", path.display()))?;
    Ok(FrameCoder::new(codec, &weights)?)
}

fn load_clip(path: &Path) -> Result<VideoClip> {
    load_video(path).with_context(|| format!("reading {}", path.display()))
}

/// The frame as any decoder writes it to disk.
fn as_8bit(frame: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = frame.shape();
    Ok(from_rgb8(&to_rgb8(frame), s.w, s.h)?)
}

fn frame_type(t: FrameType) -> &'static str {
    match t {
        FrameType::I => "I",
        FrameType::P => "P",
    }
}

struct Encoded {
    bytes: Vec<u8>,
    point: RdPoint,
}

/// Encodes `clip`, printing per-frame stats lines through `line` when given.
/// Quality is measured on the 8-bit reconstruction.
fn encode_clip(
    coder: &FrameCoder,
    intra: &dyn IntraCodec,
    clip: &VideoClip,
    gop: Option<u64>,
    predict: bool,
    mut line: Option<&mut dyn FnMut(String)>,
) -> Result<Encoded> {
    let gop = gop.map(|g| g as usize);
    let mut enc = SequenceEncoder::new(
        coder,
        intra,
        clip.width,
        clip.height,
        clip.len(),
        gop,
        predict,
    )?;
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for (i, x) in clip.frames.iter().enumerate() {
        let (recon, stats) = enc
            .push_frame(x)
            .with_context(|| format!("encoding frame {i}"))?;
        let (bits, bpp, ty) = (stats.bits, stats.bpp, stats.frame_type);
        let recon = as_8bit(&recon)?;
        let p = psnr(x, &recon)?;
        let s = ms_ssim(x, &recon)?;
        psnr_sum += p;
        ssim_sum += s;
        if let Some(out) = line.as_mut() {
            out(format!(
                "frame={i} type={} bits={bits} bpp={bpp} psnr={p} ms_ssim={s}",
                frame_type(ty)
            ));
        }
    }
    let (bytes, _) = enc.finish()?;
    let n = clip.len() as f64;
    let bpp = (8 * bytes.len()) as f64 / (clip.width * clip.height * clip.len()) as f64;
    Ok(Encoded {
        bytes,
        point: RdPoint {
            bpp,
            psnr: psnr_sum / n,
            ms_ssim: ssim_sum / n,
        },
    })
}

pub fn encode(a: &EncodeArgs) -> Result<()> {
    require_exists(&a.input, "input")?;
    require_exists(&a.weights, "weights file")?;
    require_parent(&a.output)?;
    let coder = load_coder(&a.weights)?;
    if let Some(idx) = a.lambda_index {
        if idx as usize != coder.lambda_index() {
            return Err(usage(format!(
                "--lambda-index {idx} but {} was trained at index {}",
                a.weights.display(),
                coder.lambda_index()
            )));
        }
    }
    let clip = load_clip(&a.input)?;
    let intra = intra_codec(&a.intra);
    let mut print = |s: String| println!("{s}");
    let enc = encode_clip(
        &coder,
        intra.as_ref(),
        &clip,
        a.gop,
        !a.no_predict,
        Some(&mut print),
    )?;
    write_atomic(&a.output, &enc.bytes)
        .with_context(|| format!("writing {}", a.output.display()))?;
    println!(
        "summary frames={} width={} height={} bytes={} bits={} bpp={} psnr={} ms_ssim={}",
        clip.len(),
        clip.width,
        clip.height,
        enc.bytes.len(),
        8 * enc.bytes.len(),
        enc.point.bpp,
        enc.point.psnr,
        enc.point.ms_ssim
    );
    Ok(())
}

/// Writes a PNG directory next to `dir` and renames it into place.
fn write_png_dir_atomic(clip: &VideoClip, dir: &Path) -> Result<()> {
    if dir.exists() {
        return Err(usage(format!("output {} already exists", dir.display())));
    }
    let name = dir
        .file_name()
        .ok_or_else(|| usage(format!("bad output path {}", dir.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.with_file_name(tmp_name);
    let result = write_png_dir(clip, &tmp).and_then(|_| Ok(std::fs::rename(&tmp, dir)?));
    if result.is_err() {
        let _ = std::fs::remove_dir_all(&tmp);
    }
    Ok(result?)
}

pub fn decode(a: &DecodeArgs) -> Result<()> {
    require_exists(&a.input, "bitstream")?;
    require_exists(&a.weights, "weights file")?;
    require_parent(&a.output)?;
    let coder = load_coder(&a.weights)?;
    let bytes =
        std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let intra = intra_codec(&a.intra);
    let mut dec = SequenceDecoder::new(&coder, intra.as_ref(), &bytes)?;
    let header = *dec.header();
    let (w, h) = (header.width as usize, header.height as usize);
    let mut frames = Vec::with_capacity(header.frame_count as usize);
    let records: Vec<(FrameType, u64)> = dec
        .records()
        .iter()
        .map(|r| (r.frame_type, r.bits()))
        .collect();
    for i in 0..header.frame_count as usize {
        let frame = dec
            .next_frame()
            .ok_or_else(|| usage(format!("bitstream ends before frame {i}")))??;
        let (ty, bits) = records[i];
        println!(
            "frame={i} type={} bits={bits} bpp={}",
            frame_type(ty),
            bits as f64 / (w * h) as f64
        );
        frames.push(as_8bit(&frame)?);
    }
    let clip = VideoClip::new(frames, (25, 1), Chroma::Rgb)?;
    let is_y4m = a
        .output
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("y4m"));
    if is_y4m {
        write_y4m(&clip, &a.output)?;
    } else {
        write_png_dir_atomic(&clip, &a.output)?;
    }
    println!(
        "summary frames={} width={w} height={h} bytes={} bpp={}",
        clip.len(),
        bytes.len(),
        (8 * bytes.len()) as f64 / (w * h * clip.len()) as f64
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    for p in &a.input {
        require_exists(p, "training clip")?;
    }
    if let Some(r) = &a.resume {
        require_exists(r, "checkpoint")?;
    }
    require_parent(&a.output)?;
    let cfg = CurriculumConfig {
        max_pframes: a.pframes,
        step_iters: a.step_iters,
        batch_size: a.batch_size,
        iters: a.iters,
        lr: a.lr,
        lambda_index: a.lambda_index as usize,
        crop: a.crop,
        ms_ssim_finetune: a.ms_ssim_finetune,
        seed: a.seed,
        ..Default::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let dataset: Vec<Vec<Tensor<f32>>> = if a.input.is_empty() {
        let frames = cfg.clip_len_at(u64::MAX);
        synthetic_dataset(
            a.seed,
            a.synthetic_clips,
            a.synthetic_size,
            a.synthetic_size,
            frames,
        )
    } else {
        a.input
            .iter()
            .map(|p| load_clip(p).map(|c| c.frames))
            .collect::<Result<_>>()?
    };
    let codec = Codec::default();
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(codec, cfg, path)
            .with_context(|| format!("resuming from {}", path.display()))?,
        None => Trainer::new(codec, cfg)?,
    };
    let every = a.log_every.max(1);
    let sched = trainer.cfg.clone();
    let total = trainer.cfg.total_iters();
    let log = trainer.run(&dataset, |iter, r| {
        if (iter + 1) % every == 0 || iter + 1 == total {
            println!(
                "iter={} clip_len={} loss={} distortion={} bpp={}",
                iter + 1,
                sched.clip_len_at(iter),
                r.loss,
                r.distortion,
                r.bpp
            )
        }
    })?;
    trainer
        .save_checkpoint(&a.output)
        .with_context(|| format!("writing {}", a.output.display()))?;
    println!(
        "summary iters={} skipped={} lambda={} checksum={:016x}",
        trainer.iter,
        log.skipped,
        LAMBDAS[a.lambda_index as usize],
        trainer.weights.checksum()
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    for p in &a.input {
        require_exists(p, "input clip")?;
    }
    for p in &a.weights {
        require_exists(p, "weights file")?;
    }
    require_parent(&a.output)?;
    let coders: Vec<(f64, FrameCoder)> = a
        .weights
        .iter()
        .map(|p| {
            let coder = load_coder(p)?;
            Ok((LAMBDAS[coder.lambda_index()], coder))
        })
        .collect::<Result<_>>()?;
    let intra = intra_codec(&a.intra);
    let rows: Vec<Vec<RdRow>> = a
        .input
        .par_iter()
        .map(|path| -> Result<Vec<RdRow>> {
            let clip = load_clip(path)?;
            let name = sequence_name(path);
            coders
                .iter()
                .map(|(lambda, coder)| {
                    let enc = encode_clip(coder, intra.as_ref(), &clip, a.gop, true, None)
                        .with_context(|| format!("{} at λ={lambda}", path.display()))?;
                    Ok(RdRow {
                        sequence: name.clone(),
                        lambda: *lambda,
                        bpp: enc.point.bpp,
                        psnr: enc.point.psnr,
                        ms_ssim: enc.point.ms_ssim,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<RdRow> = rows.into_iter().flatten().collect();
    for r in &rows {
        println!(
            "sequence={} lambda={} bpp={} psnr={} ms_ssim={}",
            r.sequence, r.lambda, r.bpp, r.psnr, r.ms_ssim
        );
    }
    let svg_path = a.output.with_extension("svg");
    let curves: Vec<(String, RdCurve)> = curves_by_sequence(&rows)
        .into_iter()
        .filter_map(|(name, points)| match RdCurve::new(points) {
            Ok(c) => Some((name, c)),
            Err(e) => {
                log::warn!("{name} left out of the plot: {e}");
                None
            }
        })
        .collect();
    write_atomic(&svg_path, rd_svg(&curves, Quality::Psnr).as_bytes())?;
    write_rd_csv(&rows, &a.output)?;
    println!(
        "summary sequences={} points={} csv={} svg={}",
        a.input.len(),
        rows.len(),
        a.output.display(),
        svg_path.display()
    );
    Ok(())
}

fn sequence_name(path: &Path) -> String {
    let p: PathBuf = path.components().collect();
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn curves_by_sequence(rows: &[RdRow]) -> BTreeMap<String, Vec<RdPoint>> {
    let mut out: BTreeMap<String, Vec<RdPoint>> = BTreeMap::new();
    for r in rows {
        out.entry(r.sequence.clone()).or_default().push(RdPoint {
            bpp: r.bpp,
            psnr: r.psnr,
            ms_ssim: r.ms_ssim,
        });
    }
    out
}

fn read_curves(path: &Path) -> Result<BTreeMap<String, RdCurve>> {
    require_exists(path, "RD file")?;
    let rows = read_rd_csv(path)?;
    curves_by_sequence(&rows)
        .into_iter()
        .map(|(name, points)| {
            let c = RdCurve::new(points)
                .with_context(|| format!("{}: sequence {name}", path.display()))?;
            Ok((name, c))
        })
        .collect()
}

pub fn bdrate(a: &BdrateArgs) -> Result<()> {
    let anchor = read_curves(&a.anchor)?;
    let test = read_curves(&a.test)?;
    let mut sums = [0.0; 2];
    let mut n = 0;
    for (name, t) in &test {
        let Some(an) = anchor.get(name) else {
            log::warn!("{name} is missing from {}", a.anchor.display());
            continue;
        };
        let mut vals = [0.0; 2];
        for (v, q) in vals.iter_mut().zip([Quality::Psnr, Quality::MsSsim]) {
            *v = bd_rate(an, t, q).with_context(|| format!("sequence {name}"))?;
        }
        println!(
            "sequence={name} bd_rate_psnr={} bd_rate_ms_ssim={}",
            pct(vals[0]),
            pct(vals[1])
        );
        sums[0] += vals[0];
        sums[1] += vals[1];
        n += 1;
    }
    if n == 0 {
        return Err(usage("the two files share no sequence"));
    }
    println!(
        "average sequences={n} bd_rate_psnr={} bd_rate_ms_ssim={}",
        pct(sums[0] / n as f64),
        pct(sums[1] / n as f64)
    );
    Ok(())
}

/// Percent with three decimals; a rounded zero never prints a sign.
fn pct(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}
