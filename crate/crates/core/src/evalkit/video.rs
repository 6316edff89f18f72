use std::io::Cursor;
use std::path::{Path, PathBuf};

use crate::codecnets::write_atomic;
use crate::error::{Error, Result};
use crate::pipeline::{from_rgb8, to_rgb8};
use crate::tensor::Tensor;

/// Chroma layout of a Y4M source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Chroma {
    C420,
    C444,
    /// Frames did not come from YUV.
    Rgb,
}

/// Frames as `(1, 3, h, w)` RGB tensors in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Tensor<f32>>,
    pub width: usize,
    pub height: usize,
    /// Frame rate as numerator and denominator.
    pub fps: (u32, u32),
    pub chroma: Chroma,
}

impl VideoClip {
    /// Checks that every frame has the clip's dimensions.
    pub fn new(frames: Vec<Tensor<f32>>, fps: (u32, u32), chroma: Chroma) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("clip has no frames"))?
            .shape();
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != first || first.n != 1 || first.c != 3 {
                return Err(Error::invalid(format!(
                    "frame {i} is {}, expected {first} with 3 channels",
                    f.shape()
                )));
            }
        }
        Ok(Self {
            width: first.w,
            height: first.h,
            frames,
            fps,
            chroma,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn clamp8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Full-range BT.601.
fn yuv_to_rgb(y: u8, u: u8, v: u8) -> [u8; 3] {
    let (y, u, v) = (y as f64, u as f64 - 128.0, v as f64 - 128.0);
    [
        clamp8(y + 1.402 * v),
        clamp8(y - 0.344136 * u - 0.714136 * v),
        clamp8(y + 1.772 * u),
    ]
}

fn rgb_to_yuv(r: u8, g: u8, b: u8) -> [u8; 3] {
    let (r, g, b) = (r as f64, g as f64, b as f64);
    [
        clamp8(0.299 * r + 0.587 * g + 0.114 * b),
        clamp8(128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b),
        clamp8(128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b),
    ]
}

fn find_newline(bytes: &[u8], from: usize) -> Option<usize> {
    bytes[from..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| from + p)
}

pub fn parse_y4m(bytes: &[u8]) -> Result<VideoClip> {
    let end = find_newline(bytes, 0).ok_or_else(|| Error::parse(0, "missing Y4M header line"))?;
    let header =
        std::str::from_utf8(&bytes[..end]).map_err(|_| Error::parse(0, "header is not ASCII"))?;
    let mut tokens = header.split(' ');
    if tokens.next() != Some("YUV4MPEG2") {
        return Err(Error::parse(0, "not a YUV4MPEG2 stream"));
    }
    let (mut width, mut height, mut fps, mut chroma) = (0usize, 0usize, (25, 1), Chroma::C420);
    let mut at = 10;
    for tok in tokens {
        let bad = || Error::parse(at, format!("bad header field `{tok}`"));
        let (tag, val) = tok.split_at(tok.len().min(1));
        match tag {
            "W" => width = val.parse().map_err(|_| bad())?,
            "H" => height = val.parse().map_err(|_| bad())?,
            "F" => {
                let (n, d) = val.split_once(':').ok_or_else(bad)?;
                fps = (n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?);
            }
            "C" => {
                chroma = match val {
                    "420" | "420jpeg" | "420paldv" | "420mpeg2" => Chroma::C420,
                    "444" => Chroma::C444,
                    _ => return Err(Error::parse(at, format!("unsupported colorspace `C{val}`"))),
                }
            }
            "I" | "A" | "X" | "" => {}
            _ => return Err(bad()),
        }
        at += tok.len() + 1;
    }
    if width == 0 || height == 0 {
        return Err(Error::parse(0, "header lacks a positive W and H"));
    }
    let (cw, ch) = match chroma {
        Chroma::C420 => (width.div_ceil(2), height.div_ceil(2)),
        _ => (width, height),
    };
    let frame_bytes = width * height + 2 * cw * ch;
    let mut frames = Vec::new();
    let mut pos = end + 1;
    while pos < bytes.len() {
        let index = frames.len();
        let line_end = find_newline(bytes, pos)
            .ok_or_else(|| Error::parse(pos, format!("frame {index}: truncated FRAME marker")))?;
        if !bytes[pos..line_end].starts_with(b"FRAME") {
            return Err(Error::parse(
                pos,
                format!("frame {index}: expected FRAME marker"),
            ));
        }
        let start = line_end + 1;
        let data = bytes.get(start..start + frame_bytes).ok_or_else(|| {
            Error::parse(
                bytes.len(),
                format!(
                    "frame {index} is truncated: {} of {frame_bytes} bytes",
                    bytes.len() - start
                ),
            )
        })?;
        let (yp, rest) = data.split_at(width * height);
        let (up, vp) = rest.split_at(cw * ch);
        let mut rgb = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let ci = match chroma {
                    Chroma::C420 => (y / 2) * cw + x / 2,
                    _ => y * width + x,
                };
                rgb.extend(yuv_to_rgb(yp[y * width + x], up[ci], vp[ci]));
            }
        }
        frames.push(from_rgb8(&rgb, width, height)?);
        pos = start + frame_bytes;
    }
    VideoClip::new(frames, fps, chroma)
        .map_err(|_| Error::parse(end + 1, "Y4M stream has no frames"))
}

pub fn load_y4m(path: &Path) -> Result<VideoClip> {
    parse_y4m(&std::fs::read(path)?)
}

/// Encodes as 4:4:4 full-range BT.601, so no chroma is subsampled away.
pub fn y4m_bytes(clip: &VideoClip) -> Vec<u8> {
    let (w, h) = (clip.width, clip.height);
    let mut out = format!(
        "YUV4MPEG2 W{w} H{h} F{}:{} Ip A1:1 C444\n",
        clip.fps.0, clip.fps.1
    )
    .into_bytes();
    for f in &clip.frames {
        out.extend_from_slice(b"FRAME\n");
        let rgb = to_rgb8(f);
        let yuv: Vec<[u8; 3]> = rgb
            .chunks_exact(3)
            .map(|p| rgb_to_yuv(p[0], p[1], p[2]))
            .collect();
        for plane in 0..3 {
            out.extend(yuv.iter().map(|p| p[plane]));
        }
    }
    out
}

pub fn write_y4m(clip: &VideoClip, path: &Path) -> Result<()> {
    write_atomic(path, &y4m_bytes(clip))
}

fn decode_png(bytes: Vec<u8>, path: &Path) -> Result<Tensor<f32>> {
    let err = |e: png::DecodingError| Error::invalid(format!("{}: {e}", path.display()));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::invalid(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks_exact(2).flat_map(|p| [p[0]; 3]).collect(),
        png::ColorType::Indexed => {
            return Err(Error::invalid(format!(
                "{}: palette was not expanded",
                path.display()
            )))
        }
    };
    from_rgb8(&rgb, w, h)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every `*.png` in `dir` in lexicographic order.
pub fn load_png_dir(dir: &Path) -> Result<VideoClip> {
    let files = png_files(dir)?;
    if files.is_empty() {
        return Err(Error::invalid(format!("no PNG files in {}", dir.display())));
    }
    let mut frames = Vec::with_capacity(files.len());
    for (i, path) in files.iter().enumerate() {
        let f = decode_png(std::fs::read(path)?, path)?;
        if let Some(first) = frames.first().map(|f: &Tensor<f32>| f.shape()) {
            if f.shape() != first {
                return Err(Error::invalid(format!(
                    "{} (frame {i}) is {}x{}, earlier frames are {}x{}",
                    path.display(),
                    f.shape().w,
                    f.shape().h,
                    first.w,
                    first.h
                )));
            }
        }
        frames.push(f);
    }
    VideoClip::new(frames, (25, 1), Chroma::Rgb)
}

/// Writes `frame_00000.png`, `frame_00001.png`, ... into `dir`.
pub fn write_png_dir(clip: &VideoClip, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in clip.frames.iter().enumerate() {
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, clip.width as u32, clip.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let png_err = |e: png::EncodingError| Error::invalid(format!("png: {e}"));
            let mut writer = enc.write_header().map_err(png_err)?;
            writer.write_image_data(&to_rgb8(f)).map_err(png_err)?;
        }
        write_atomic(&dir.join(format!("frame_{i:05}.png")), &bytes)?;
    }
    Ok(())
}

/// Dispatches on the path: a directory of PNGs or a `.y4m` file.
pub fn load_video(path: &Path) -> Result<VideoClip> {
    if path.is_dir() {
        load_png_dir(path)
    } else {
        load_y4m(path)
    }
}
