use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Codec, LAMBDAS};
use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::tensor::{Real, Shape, Tape, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"RPLW";
pub const WEIGHTS_VERSION: u32 = 1;
const LAMBDA_ENTRY: &str = "meta.lambda_index";

/// Named tensors for every network plus the lambda index they were trained
/// for.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub lambda_index: usize,
}

impl ModelWeights {
    /// Fresh initialization drawn from `seed`.
    pub fn init(codec: &Codec, lambda_index: usize, seed: u64) -> Self {
        assert!(lambda_index < LAMBDAS.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = codec
            .param_specs()
            .into_iter()
            .map(|s| {
                let t = s.init.sample(s.shape, &mut rng);
                (s.name, t)
            })
            .collect();
        Self {
            tensors,
            lambda_index,
        }
    }

    pub fn lambda(&self) -> f64 {
        LAMBDAS[self.lambda_index]
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::Weights(format!(
                "{name}: shape {} vs {}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                *t = Tensor::zeros(t.shape());
            }
        }
    }

    pub fn count_params(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn bind<R: Real>(&self, tape: &Tape<R>, trainable: bool) -> ParamSet<R> {
        ParamSet::bind(tape, &self.tensors, trainable)
    }

    /// Checks that names and shapes are exactly those the codec expects.
    pub fn validate(&self, codec: &Codec) -> Result<()> {
        let specs = codec.param_specs();
        for s in &specs {
            let t = self.get(&s.name)?;
            if t.shape() != s.shape {
                return Err(Error::Weights(format!(
                    "{}: shape {} but the network needs {}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::Weights(format!("{}: non-finite values", s.name)));
            }
        }
        if self.tensors.len() != specs.len() {
            let known: std::collections::HashSet<_> = specs.iter().map(|s| &s.name).collect();
            let extra = self.tensors.keys().find(|k| !known.contains(k));
            return Err(Error::Weights(format!(
                "unexpected tensor `{}`",
                extra.map(String::as_str).unwrap_or("?")
            )));
        }
        if self.lambda_index >= LAMBDAS.len() {
            return Err(Error::Weights(format!(
                "lambda index {} out of range",
                self.lambda_index
            )));
        }
        Ok(())
    }

    /// Serializes to the weights container: magic, version, entry count,
    /// then per entry the name, rank, dims and little-endian f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let lambda = Tensor::scalar(self.lambda_index as f32);
        let mut entries: Vec<(&str, &Tensor<f32>)> = vec![(LAMBDA_ENTRY, &lambda)];
        entries.extend(self.tensors.iter().map(|(k, v)| (k.as_str(), v)));
        write_container(&entries)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut tensors = read_container(bytes)?;
        let lambda = tensors
            .remove(LAMBDA_ENTRY)
            .ok_or_else(|| Error::Weights(format!("missing `{LAMBDA_ENTRY}`")))?;
        let li = lambda.data().first().copied().unwrap_or(-1.0);
        if lambda.numel() != 1 || li.fract() != 0.0 || !(0.0..LAMBDAS.len() as f32).contains(&li) {
            return Err(Error::Weights(format!("bad lambda index {li}")));
        }
        Ok(Self {
            tensors,
            lambda_index: li as usize,
        })
    }

    /// First eight bytes of the SHA-256 of the serialized weights.
    pub fn checksum(&self) -> u64 {
        checksum(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and validates against `codec`.
    pub fn load_for(path: &Path, codec: &Codec) -> Result<Self> {
        let w = Self::load(path)?;
        w.validate(codec)?;
        Ok(w)
    }
}

pub fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Writes through a temporary file in the same directory and renames it into
/// place, so a failure never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Generic named-tensor container shared by weights and optimizer state.
pub fn write_container(entries: &[(&str, &Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&4u32.to_le_bytes());
        for d in t.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::parse(self.pos, format!("need {n} more bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_container(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::parse(0, "bad magic"));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::parse(4, format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::parse(at, "name is not UTF-8"))?
            .to_string();
        let rank = r.u32()?;
        if rank != 4 {
            return Err(Error::parse(at, format!("`{name}` has rank {rank}")));
        }
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= bytes.len() / 4)
            .ok_or_else(|| Error::parse(at, format!("`{name}` is larger than the file")))?;
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::parse(at, format!("duplicate `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(r.pos, "trailing bytes"));
    }
    Ok(out)
}
