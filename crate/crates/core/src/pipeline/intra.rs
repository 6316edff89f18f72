use std::path::{Path, PathBuf};
use std::process::Command;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Still-image codec used for I-frames. Implementations must be
/// deterministic: `decode(encode(x))` is what the encoder buffers.
pub trait IntraCodec {
    /// Identifier written to the sequence header.
    fn id(&self) -> u8;

    fn encode(&self, frame: &Tensor<f32>) -> Result<Vec<u8>>;

    fn decode(&self, payload: &[u8], width: usize, height: usize) -> Result<Tensor<f32>>;

    /// Payload plus the reconstruction the decoder will produce from it.
    fn encode_with_recon(&self, frame: &Tensor<f32>) -> Result<(Vec<u8>, Tensor<f32>)> {
        let s = frame.shape();
        let payload = self.encode(frame)?;
        let recon = self.decode(&payload, s.w, s.h)?;
        Ok((payload, recon))
    }
}

/// Interleaved 8-bit RGB, row-major. Values are clamped to [0, 1] and rounded.
pub fn to_rgb8(frame: &Tensor<f32>) -> Vec<u8> {
    let s = frame.shape();
    let mut out = Vec::with_capacity(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push((frame.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn from_rgb8(rgb: &[u8], width: usize, height: usize) -> Result<Tensor<f32>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::invalid(format!(
            "{} bytes for a {width}x{height} RGB image",
            rgb.len()
        )));
    }
    Ok(Tensor::from_fn(
        Shape::new(1, 3, height, width),
        |_, c, y, x| rgb[(y * width + x) * 3 + c] as f32 / 255.0,
    ))
}

fn check_frame(frame: &Tensor<f32>) -> Result<()> {
    let s = frame.shape();
    if s.n != 1 || s.c != 3 || s.h == 0 || s.w == 0 {
        return Err(Error::invalid(format!(
            "intra frame must be 1x3xHxW, got {s}"
        )));
    }
    Ok(())
}

/// Lossless at 8 bits: the payload is the frame's RGB bytes.
#[derive(Clone, Copy, Debug, Default)]
pub struct StoredIntra;

impl IntraCodec for StoredIntra {
    fn id(&self) -> u8 {
        0
    }

    fn encode(&self, frame: &Tensor<f32>) -> Result<Vec<u8>> {
        check_frame(frame)?;
        Ok(to_rgb8(frame))
    }

    fn decode(&self, payload: &[u8], width: usize, height: usize) -> Result<Tensor<f32>> {
        from_rgb8(payload, width, height)
    }
}

/// Shells out to an external still-image codec. Each command is an argv list
/// in which `{input}` and `{output}` are replaced by file paths. The encoder
/// command reads a binary PPM and writes the payload; the decoder command
/// reads the payload and must write a binary PPM.
#[derive(Clone, Debug)]
pub struct ExternalIntra {
    pub encode_cmd: Vec<String>,
    pub decode_cmd: Vec<String>,
}

impl ExternalIntra {
    fn run(cmd: &[String], input: &Path, output: &Path) -> Result<()> {
        let (prog, args) = cmd
            .split_first()
            .ok_or_else(|| Error::invalid("empty external intra command"))?;
        let fill = |a: &String| {
            a.replace("{input}", &input.to_string_lossy())
                .replace("{output}", &output.to_string_lossy())
        };
        let status = Command::new(fill(prog))
            .args(args.iter().map(fill))
            .status()?;
        if !status.success() {
            return Err(Error::invalid(format!("`{prog}` exited with {status}")));
        }
        Ok(())
    }

    fn paths(dir: &tempfile::TempDir, a: &str, b: &str) -> (PathBuf, PathBuf) {
        (dir.path().join(a), dir.path().join(b))
    }
}

impl IntraCodec for ExternalIntra {
    fn id(&self) -> u8 {
        1
    }

    fn encode(&self, frame: &Tensor<f32>) -> Result<Vec<u8>> {
        check_frame(frame)?;
        let s = frame.shape();
        let dir = tempfile::tempdir()?;
        let (input, output) = Self::paths(&dir, "frame.ppm", "frame.bin");
        std::fs::write(&input, write_ppm(&to_rgb8(frame), s.w, s.h))?;
        Self::run(&self.encode_cmd, &input, &output)?;
        Ok(std::fs::read(&output)?)
    }

    fn decode(&self, payload: &[u8], width: usize, height: usize) -> Result<Tensor<f32>> {
        let dir = tempfile::tempdir()?;
        let (input, output) = Self::paths(&dir, "frame.bin", "frame.ppm");
        std::fs::write(&input, payload)?;
        Self::run(&self.decode_cmd, &input, &output)?;
        let (rgb, w, h) = read_ppm(&std::fs::read(&output)?)?;
        if (w, h) != (width, height) {
            return Err(Error::invalid(format!(
                "external decoder produced {w}x{h}, expected {width}x{height}"
            )));
        }
        from_rgb8(&rgb, w, h)
    }
}

pub fn write_ppm(rgb: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Reads an 8-bit binary PPM; returns `(rgb, width, height)`.
pub fn read_ppm(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(pos, "truncated PPM header"));
        }
        fields.push((
            start,
            String::from_utf8_lossy(&bytes[start..pos]).into_owned(),
        ));
    }
    pos += 1;
    if fields[0].1 != "P6" {
        return Err(Error::parse(0, "not a binary PPM"));
    }
    let num = |i: usize| {
        fields[i]
            .1
            .parse::<usize>()
            .map_err(|_| Error::parse(fields[i].0, format!("bad PPM field `{}`", fields[i].1)))
    };
    let (w, h, max) = (num(1)?, num(2)?, num(3)?);
    if max != 255 {
        return Err(Error::parse(fields[3].0, "only 8-bit PPM is supported"));
    }
    let n = w * h * 3;
    let data = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::parse(bytes.len(), "truncated PPM data"))?;
    Ok((data.to_vec(), w, h))
}
