//! Frame and sequence orchestration: reference buffers, I/P frame coding and
//! the sequence bitstream.

mod container;
mod intra;

pub use container::{
    parse_sequence, FrameBitstream, FrameType, SequenceHeader, FLAG_PREDICT, HEADER_BYTES, MAGIC,
    P_SECTIONS, VERSION,
};
pub use intra::{from_rgb8, read_ppm, to_rgb8, write_ppm, ExternalIntra, IntraCodec, StoredIntra};

use crate::codecnets::{
    checksum, Codec, LatentSource, ModelWeights, Quantizer, Refs, Stream, FRAME_REFS, MV_REFS,
    RESIDUAL_REFS,
};
use crate::entropy::{
    count_escapes, rc_decode, rc_encode, CoderError, FactorizedPrior, GaussianModel, SymbolModel,
};
use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::tensor::{Shape, Tape, Tensor, Var};

/// Escape rate above which a frame is flagged in its stats and the log.
pub const ESCAPE_WARN_RATE: f64 = 0.01;

/// Decoded buffers, newest first. Capacities are fixed at 4 frames, 3 motion
/// fields and 4 residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceState {
    pub frames: [Tensor<f32>; FRAME_REFS],
    pub mvs: [Tensor<f32>; MV_REFS],
    pub residuals: [Tensor<f32>; RESIDUAL_REFS],
}

/// Owned constants for one frame's [`Refs`].
pub struct RefVars {
    frames: [Var<f32>; FRAME_REFS],
    mvs: [Var<f32>; MV_REFS],
    residuals: [Var<f32>; RESIDUAL_REFS],
}

impl RefVars {
    pub fn refs(&self) -> Refs<'_, f32> {
        Refs {
            frames: std::array::from_fn(|i| &self.frames[i]),
            mvs: std::array::from_fn(|i| &self.mvs[i]),
            residuals: std::array::from_fn(|i| &self.residuals[i]),
        }
    }
}

impl ReferenceState {
    /// The I-frame reconstruction repeated in every frame slot; motion and
    /// residual buffers start at zero.
    pub fn init(intra: &Tensor<f32>) -> Self {
        let s = intra.shape();
        Self {
            frames: std::array::from_fn(|_| intra.clone()),
            mvs: std::array::from_fn(|_| Tensor::zeros(s.with_channels(2))),
            residuals: std::array::from_fn(|_| Tensor::zeros(s)),
        }
    }

    pub fn frame_shape(&self) -> Shape {
        self.frames[0].shape()
    }

    /// Pushes a decoded frame, its motion field and its residual
    /// `x̂ - x̄`, evicting the oldest entry of each buffer.
    pub fn push(&mut self, frame: Tensor<f32>, mv: Tensor<f32>, residual: Tensor<f32>) {
        fn shift<const N: usize>(buf: &mut [Tensor<f32>; N], t: Tensor<f32>) {
            buf.rotate_right(1);
            buf[0] = t;
        }
        shift(&mut self.frames, frame);
        shift(&mut self.mvs, mv);
        shift(&mut self.residuals, residual);
    }

    pub fn vars(&self) -> RefVars {
        RefVars {
            frames: self.frames.clone().map(Var::constant),
            mvs: self.mvs.clone().map(Var::constant),
            residuals: self.residuals.clone().map(Var::constant),
        }
    }

    /// Every buffer in order, as little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.frames
            .iter()
            .chain(&self.mvs)
            .chain(&self.residuals)
            .flat_map(|t| t.to_le_bytes())
            .collect()
    }

    pub fn digest(&self) -> u64 {
        checksum(&self.to_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameStats {
    pub index: usize,
    pub frame_type: FrameType,
    /// Bits of the frame record including its framing bytes.
    pub bits: u64,
    pub bpp: f64,
    /// Payload bits per section, in record order.
    pub section_bits: Vec<u64>,
    pub symbols: usize,
    pub escapes: usize,
}

impl FrameStats {
    fn new(index: usize, record: &FrameBitstream, pixels: usize) -> Self {
        let bits = record.bits();
        Self {
            index,
            frame_type: record.frame_type,
            bits,
            bpp: bits as f64 / pixels as f64,
            section_bits: record.sections.iter().map(|s| 8 * s.len() as u64).collect(),
            symbols: 0,
            escapes: 0,
        }
    }

    pub fn escape_rate(&self) -> f64 {
        if self.symbols == 0 {
            0.0
        } else {
            self.escapes as f64 / self.symbols as f64
        }
    }
}

fn check_frame(x: &Tensor<f32>) -> Result<()> {
    let s = x.shape();
    if s.n != 1 || s.c != 3 || s.h == 0 || s.w == 0 {
        return Err(Error::invalid(format!("frames must be 1x3xHxW, got {s}")));
    }
    if !x.is_finite() {
        return Err(Error::invalid("frame contains non-finite values"));
    }
    Ok(())
}

/// Reads the four P-frame sections back as latents.
struct SectionSource<'a> {
    sections: &'a [Vec<u8>],
    next: usize,
    frame: usize,
}

impl SectionSource<'_> {
    fn decode<M: SymbolModel>(
        &mut self,
        model: std::result::Result<M, CoderError>,
        shape: Shape,
    ) -> Result<Tensor<f32>> {
        let section = P_SECTIONS[self.next];
        let corrupt = |e: CoderError| Error::CorruptSection {
            frame: self.frame,
            section,
            reason: e.to_string(),
        };
        let model = model.map_err(corrupt)?;
        let symbols = rc_decode(&self.sections[self.next], &model).map_err(corrupt)?;
        self.next += 1;
        Ok(Tensor::new(
            shape,
            symbols.into_iter().map(|s| s as f32).collect(),
        )?)
    }
}

impl LatentSource for SectionSource<'_> {
    fn hyper(&mut self, _: Stream, shape: Shape, prior: &Tensor<f32>) -> Result<Tensor<f32>> {
        let model = FactorizedPrior::from_tensor(prior).and_then(|p| p.model(shape));
        self.decode(model, shape)
    }

    fn delta(&mut self, _: Stream, mu: &Tensor<f32>, sigma: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.decode(GaussianModel::new(mu.data(), sigma.data()), mu.shape())
    }
}

/// A codec bound to one set of weights for inference.
pub struct FrameCoder {
    pub codec: Codec,
    params: ParamSet<f32>,
    lambda_index: usize,
    checksum: u64,
}

impl FrameCoder {
    pub fn new(codec: Codec, weights: &ModelWeights) -> Result<Self> {
        weights.validate(&codec)?;
        let params = weights.bind(&Tape::inference(), false);
        Ok(Self {
            codec,
            params,
            lambda_index: weights.lambda_index,
            checksum: weights.checksum(),
        })
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn lambda_index(&self) -> usize {
        self.lambda_index
    }

    pub fn weights_checksum(&self) -> u64 {
        self.checksum
    }

    /// Codes `x` against `state` and pushes the reconstruction. On error the
    /// state is left untouched.
    pub fn encode_pframe(
        &self,
        x: &Tensor<f32>,
        state: &mut ReferenceState,
        predict: bool,
        index: usize,
    ) -> Result<(FrameBitstream, Tensor<f32>, FrameStats)> {
        check_frame(x)?;
        if x.shape() != state.frame_shape() {
            return Err(Error::invalid(format!(
                "frame {index} is {} but the references are {}",
                x.shape(),
                state.frame_shape()
            )));
        }
        let tape = Tape::inference();
        let vars = state.vars();
        let xv = tape.constant(x.clone());
        let p = self.codec.encode_pframe(
            &tape,
            &self.params,
            &xv,
            &vars.refs(),
            predict,
            &mut Quantizer::Round,
        )?;
        let mut sections = Vec::with_capacity(4);
        let (mut symbols, mut escapes) = (0, 0);
        for (stream, out) in [(Stream::Mv, &p.mv), (Stream::Res, &p.res)] {
            let prior = self.params.get(&self.codec.stream(stream).prior_name())?;
            let hyper = FactorizedPrior::from_tensor(prior.value())?.model(out.z_hat.shape())?;
            let delta = GaussianModel::new(out.mu.value().data(), out.sigma.value().data())?;
            for (t, model) in [
                (&out.z_hat, &hyper as &dyn SymbolModel),
                (&out.delta_hat, &delta as &dyn SymbolModel),
            ] {
                let s = to_symbols(t.value())?;
                symbols += s.len();
                escapes += count_escapes(&s, model)?;
                sections.push(rc_encode(&s, model)?.bytes);
            }
        }
        let x_hat = p.x_hat.value().clone();
        if !x_hat.is_finite() {
            return Err(Error::NonFinite(format!("reconstruction of frame {index}")));
        }
        let record = FrameBitstream {
            frame_type: FrameType::P,
            sections,
        };
        let mut stats = FrameStats::new(index, &record, x.shape().plane());
        stats.symbols = symbols;
        stats.escapes = escapes;
        if stats.escape_rate() > ESCAPE_WARN_RATE {
            log::warn!(
                "frame {index}: {escapes} of {symbols} symbols escaped ({:.2}%)",
                100.0 * stats.escape_rate()
            );
        }
        let residual = x_hat.zip_map(p.x_bar.value(), |a, b| a - b)?;
        state.push(x_hat.clone(), p.v_hat().value().clone(), residual);
        Ok((record, x_hat, stats))
    }

    /// Decoder mirror of [`FrameCoder::encode_pframe`].
    pub fn decode_pframe(
        &self,
        record: &FrameBitstream,
        state: &mut ReferenceState,
        predict: bool,
        index: usize,
    ) -> Result<Tensor<f32>> {
        if record.frame_type != FrameType::P || record.sections.len() != P_SECTIONS.len() {
            return Err(Error::bitstream(format!(
                "frame {index} is not a P-frame record"
            )));
        }
        for (s, name) in record.sections.iter().zip(P_SECTIONS) {
            if s.is_empty() {
                return Err(Error::CorruptSection {
                    frame: index,
                    section: name,
                    reason: "empty section".into(),
                });
            }
        }
        let tape = Tape::inference();
        let vars = state.vars();
        let mut source = SectionSource {
            sections: &record.sections,
            next: 0,
            frame: index,
        };
        let d =
            self.codec
                .decode_pframe(&tape, &self.params, &vars.refs(), predict, &mut source)?;
        let x_hat = d.x_hat.into_value();
        if !x_hat.is_finite() {
            return Err(Error::NonFinite(format!("reconstruction of frame {index}")));
        }
        let residual = x_hat.zip_map(d.x_bar.value(), |a, b| a - b)?;
        state.push(x_hat.clone(), d.v_hat.into_value(), residual);
        Ok(x_hat)
    }
}

fn to_symbols(t: &Tensor<f32>) -> Result<Vec<i32>> {
    t.data()
        .iter()
        .map(|&v| {
            if v.is_finite() && v.abs() <= i32::MAX as f32 / 2.0 {
                Ok(v as i32)
            } else {
                Err(Error::NonFinite(format!(
                    "latent value {v} cannot be coded"
                )))
            }
        })
        .collect()
}

pub fn encode_iframe(
    intra: &dyn IntraCodec,
    x: &Tensor<f32>,
    index: usize,
) -> Result<(FrameBitstream, Tensor<f32>, FrameStats)> {
    check_frame(x)?;
    let (payload, recon) = intra.encode_with_recon(x)?;
    if payload.is_empty() {
        return Err(Error::invalid("intra codec produced an empty payload"));
    }
    let record = FrameBitstream {
        frame_type: FrameType::I,
        sections: vec![payload],
    };
    let stats = FrameStats::new(index, &record, x.shape().plane());
    Ok((record, recon, stats))
}

/// Writes a sequence one frame at a time. Frame `i` is intra-coded when
/// `i % gop == 0`.
pub struct SequenceEncoder<'a> {
    coder: &'a FrameCoder,
    intra: &'a dyn IntraCodec,
    header: SequenceHeader,
    state: Option<ReferenceState>,
    bytes: Vec<u8>,
    stats: Vec<FrameStats>,
}

impl<'a> SequenceEncoder<'a> {
    /// `gop` of `None` means a single I-frame for the whole sequence.
    pub fn new(
        coder: &'a FrameCoder,
        intra: &'a dyn IntraCodec,
        width: usize,
        height: usize,
        frame_count: usize,
        gop: Option<usize>,
        predict: bool,
    ) -> Result<Self> {
        if width == 0 || height == 0 || frame_count == 0 {
            return Err(Error::invalid(
                "a sequence needs at least one non-empty frame",
            ));
        }
        let gop = gop.unwrap_or(frame_count);
        if gop == 0 {
            return Err(Error::invalid("gop must be positive"));
        }
        let narrow = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} is too large")))
        };
        let header = SequenceHeader {
            width: narrow(width, "width")?,
            height: narrow(height, "height")?,
            frame_count: narrow(frame_count, "frame count")?,
            gop: narrow(gop, "gop")?,
            lambda_index: coder.lambda_index() as u8,
            intra_id: intra.id(),
            flags: if predict { FLAG_PREDICT } else { 0 },
            weights_checksum: coder.weights_checksum(),
        };
        Ok(Self {
            coder,
            intra,
            header,
            state: None,
            bytes: header.to_bytes(),
            stats: Vec::new(),
        })
    }

    pub fn header(&self) -> &SequenceHeader {
        &self.header
    }

    pub fn state(&self) -> Option<&ReferenceState> {
        self.state.as_ref()
    }

    /// Codes the next frame and returns its reconstruction.
    pub fn push_frame(&mut self, x: &Tensor<f32>) -> Result<(Tensor<f32>, &FrameStats)> {
        let index = self.stats.len();
        let h = &self.header;
        if index >= h.frame_count as usize {
            return Err(Error::invalid(format!(
                "sequence already holds {} frames",
                h.frame_count
            )));
        }
        let want = Shape::new(1, 3, h.height as usize, h.width as usize);
        if x.shape() != want {
            return Err(Error::invalid(format!(
                "frame {index} is {} but the sequence is {want}",
                x.shape()
            )));
        }
        let (record, recon, stats) = match self.state.as_mut() {
            Some(state) if index % h.gop as usize != 0 => {
                self.coder.encode_pframe(x, state, h.predict(), index)?
            }
            _ => {
                let (record, recon, stats) = encode_iframe(self.intra, x, index)?;
                self.state = Some(ReferenceState::init(&recon));
                (record, recon, stats)
            }
        };
        self.bytes.extend_from_slice(&record.to_bytes());
        self.stats.push(stats);
        Ok((recon, self.stats.last().unwrap()))
    }

    pub fn finish(self) -> Result<(Vec<u8>, Vec<FrameStats>)> {
        if self.stats.len() != self.header.frame_count as usize {
            return Err(Error::invalid(format!(
                "{} of {} frames were coded",
                self.stats.len(),
                self.header.frame_count
            )));
        }
        Ok((self.bytes, self.stats))
    }
}

/// Reads a sequence one frame at a time.
pub struct SequenceDecoder<'a> {
    coder: &'a FrameCoder,
    intra: &'a dyn IntraCodec,
    header: SequenceHeader,
    records: Vec<FrameBitstream>,
    state: Option<ReferenceState>,
    next: usize,
}

impl<'a> SequenceDecoder<'a> {
    /// Parses the container and checks that `coder` and `intra` match the
    /// ones the stream was written with.
    pub fn new(coder: &'a FrameCoder, intra: &'a dyn IntraCodec, bytes: &[u8]) -> Result<Self> {
        let (header, records) = parse_sequence(bytes)?;
        if header.weights_checksum != coder.weights_checksum() {
            return Err(Error::Weights(format!(
                "weights checksum mismatch: bitstream has {:016x}, weights have {:016x} (lambda index {} vs {})",
                header.weights_checksum,
                coder.weights_checksum(),
                header.lambda_index,
                coder.lambda_index()
            )));
        }
        if header.intra_id != intra.id() {
            return Err(Error::bitstream(format!(
                "bitstream uses intra codec {}, decoder has {}",
                header.intra_id,
                intra.id()
            )));
        }
        Ok(Self {
            coder,
            intra,
            header,
            records,
            state: None,
            next: 0,
        })
    }

    pub fn header(&self) -> &SequenceHeader {
        &self.header
    }

    pub fn records(&self) -> &[FrameBitstream] {
        &self.records
    }

    pub fn state(&self) -> Option<&ReferenceState> {
        self.state.as_ref()
    }

    /// Restarts decoding at frame `index`, which must be an I-frame.
    pub fn seek(&mut self, index: usize) -> Result<()> {
        match self.records.get(index) {
            Some(r) if r.frame_type == FrameType::I => {
                self.next = index;
                self.state = None;
                Ok(())
            }
            Some(_) => Err(Error::invalid(format!("frame {index} is not an I-frame"))),
            None => Err(Error::invalid(format!("no frame {index}"))),
        }
    }

    pub fn next_frame(&mut self) -> Option<Result<Tensor<f32>>> {
        let index = self.next;
        let record = self.records.get(index)?;
        self.next += 1;
        let (w, h) = (self.header.width as usize, self.header.height as usize);
        let result = match (record.frame_type, self.state.as_mut()) {
            (FrameType::I, _) => self.intra.decode(&record.sections[0], w, h).map(|recon| {
                self.state = Some(ReferenceState::init(&recon));
                recon
            }),
            (FrameType::P, Some(state)) => {
                self.coder
                    .decode_pframe(record, state, self.header.predict(), index)
            }
            (FrameType::P, None) => Err(Error::bitstream(format!(
                "frame {index} is a P-frame with no preceding I-frame"
            ))),
        };
        if result.is_err() {
            self.next = self.records.len();
        }
        Some(result)
    }
}

impl Iterator for SequenceDecoder<'_> {
    type Item = Result<Tensor<f32>>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_frame()
    }
}

#[derive(Clone, Debug)]
pub struct EncodedSequence {
    pub bytes: Vec<u8>,
    pub recon: Vec<Tensor<f32>>,
    pub stats: Vec<FrameStats>,
}

impl EncodedSequence {
    pub fn total_bits(&self) -> u64 {
        8 * self.bytes.len() as u64
    }

    /// File bits over all coded pixels.
    pub fn bpp(&self) -> f64 {
        let s = self.recon[0].shape();
        sequence_bpp(self.bytes.len(), s.w, s.h, self.recon.len())
    }
}

pub fn sequence_bpp(file_bytes: usize, width: usize, height: usize, frames: usize) -> f64 {
    (8 * file_bytes) as f64 / (width * height * frames) as f64
}

pub fn encode_sequence(
    coder: &FrameCoder,
    intra: &dyn IntraCodec,
    frames: &[Tensor<f32>],
    gop: Option<usize>,
    predict: bool,
) -> Result<EncodedSequence> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("empty sequence"))?
        .shape();
    let mut enc = SequenceEncoder::new(coder, intra, first.w, first.h, frames.len(), gop, predict)?;
    let recon = frames
        .iter()
        .map(|x| enc.push_frame(x).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    let (bytes, stats) = enc.finish()?;
    Ok(EncodedSequence {
        bytes,
        recon,
        stats,
    })
}

pub fn decode_sequence(
    coder: &FrameCoder,
    intra: &dyn IntraCodec,
    bytes: &[u8],
) -> Result<Vec<Tensor<f32>>> {
    SequenceDecoder::new(coder, intra, bytes)?.collect()
}
