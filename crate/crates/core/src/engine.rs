//! Streaming read/write engine for wait-k decoding over fired boundaries,
//! the static segmentation baseline, offline teacher decoding, teacher
//! logit files and attention pair counting.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boundary::{BoundarySet, FireAccumulator};
use crate::decoders::{argmax, beam_search, decoder_cross_mask, default_max_len, DecodeSession, BOS, EOS};
use crate::encoder::{encode_full, fuse, reencode_once};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::model::{Model, Segmentation};
use crate::tensor::Tensor;
use crate::transformer::IncrementalEncoder;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub token: usize,
    pub frames_read: usize,
    pub boundary_count: usize,
    pub tail: bool,
}

/// Per-token record of how much source had been read at each write. The
/// closing `eos` is not logged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionLog {
    pub stream_id: usize,
    pub total_frames: usize,
    pub frame_interval: f64,
    pub emissions: Vec<Emission>,
}

impl EmissionLog {
    pub fn new(stream_id: usize, total_frames: usize, frame_interval: f64) -> Self {
        EmissionLog {
            stream_id,
            total_frames,
            frame_interval,
            emissions: Vec::new(),
        }
    }

    pub fn frames_read(&self) -> Vec<usize> {
        self.emissions.iter().map(|e| e.frames_read).collect()
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.emissions.iter().map(|e| e.token).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyMode {
    Read,
    Write,
    Tail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PolicyState {
    pub mode: PolicyMode,
    pub boundary_count: usize,
    pub emitted: usize,
    pub k: usize,
}

impl PolicyState {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(PolicyState {
            mode: PolicyMode::Read,
            boundary_count: 0,
            emitted: 0,
            k,
        })
    }

    /// Whether the next token (`emitted + 1`) may be written.
    pub fn may_write(&self) -> bool {
        self.mode == PolicyMode::Tail || self.boundary_count >= self.emitted + self.k
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub k: usize,
    /// Beam width used after the source ends.
    pub beam: usize,
    pub length_penalty: f64,
    /// Overrides the default cap of `3 × boundaries + 10` tokens.
    pub max_len: Option<usize>,
    pub frame_interval: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            k: 3,
            beam: 3,
            length_penalty: -1.0,
            max_len: None,
            frame_interval: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimulOutput {
    pub tokens: Vec<usize>,
    pub log: EmissionLog,
    pub boundaries: BoundarySet,
}

/// Fixed-rate boundaries at `⌊j·p⌋` for `j = 1, 2, …` while within `n`.
pub fn static_segment(n: usize, p: f64) -> Result<BoundarySet> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::Config(format!("static segment rate must be positive, got {p}")));
    }
    let mut frames = Vec::new();
    let mut j = 1usize;
    loop {
        let b = (j as f64 * p).floor() as usize;
        if b > n {
            break;
        }
        if b >= 1 && frames.last() != Some(&b) {
            frames.push(b);
        }
        j += 1;
    }
    Ok(BoundarySet::from_frames(&frames, 1.0))
}

/// Streaming source state: embedded frames, causal first pass and the
/// boundary source.
struct SourceState<'m> {
    model: &'m Model,
    encoder: IncrementalEncoder,
    embedded: Vec<f64>,
    accumulator: FireAccumulator,
    static_frames: Vec<usize>,
    boundaries: BoundarySet,
    frames: usize,
}

impl<'m> SourceState<'m> {
    fn new(model: &'m Model, n: usize) -> Result<Self> {
        let static_frames = match model.config.segmentation {
            Segmentation::Static { rate } => static_segment(n, rate)?.frames(),
            Segmentation::Predictor => Vec::new(),
        };
        Ok(SourceState {
            model,
            encoder: IncrementalEncoder::new(&model.parts.encoder),
            embedded: Vec::new(),
            accumulator: FireAccumulator::new(model.config.threshold)?,
            static_frames,
            boundaries: BoundarySet::new(model.config.threshold),
            frames: 0,
        })
    }

    /// Reads one frame and returns how many boundaries it fired.
    fn read(&mut self, frame: &[f64]) -> Result<usize> {
        let m = self.model;
        let x = Tensor::matrix(1, frame.len(), frame.to_vec())?;
        let row = m.embed_frames(&x, self.frames)?;
        self.embedded.extend_from_slice(row.data());
        let h = self.encoder.push(&m.parts.encoder, &m.params, row.data())?;
        self.frames += 1;
        let before = self.boundaries.len();
        match m.config.segmentation {
            Segmentation::Predictor => {
                let h = Tensor::matrix(1, h.len(), h)?;
                let w = m.parts.predictor.compute_weights(&m.params, &h)?;
                for b in self.accumulator.push(w.0[0])? {
                    self.boundaries.push(b);
                }
            }
            Segmentation::Static { .. } => {
                let frame = self.frames;
                if self.static_frames.contains(&frame) {
                    self.boundaries.push(crate::boundary::Boundary {
                        frame,
                        remainder: 0.0,
                        within: 1.0,
                    });
                }
            }
        }
        Ok(self.boundaries.len() - before)
    }

    fn finish(&mut self) {
        if let Segmentation::Predictor = self.model.config.segmentation {
            if let Some(b) = self.accumulator.finalize_tail(self.model.config.tail_fraction) {
                self.boundaries.push(b);
            }
        }
    }

    /// Decoder memory over the frames read so far.
    fn memory(&self) -> Result<Tensor> {
        let m = self.model;
        let first = self.encoder.outputs()?;
        if !m.config.reencode {
            return Ok(first);
        }
        let x = Tensor::matrix(self.frames, m.config.d_model, self.embedded.clone())?;
        let second = reencode_once(&m.parts.encoder, &m.params, &x, &self.boundaries)?;
        fuse(&first, &second, m.config.fusion, &m.parts.fuse_projection, &m.params)
    }
}

/// Streams `features` frame by frame under wait-`k`. Each time new
/// boundaries allow writes, the memory is rebuilt over the frames read and
/// tokens are emitted greedily, one per satisfied slot. After the last
/// frame the remaining tokens are decoded with beam search and full
/// visibility.
pub fn run_simultaneous(model: &Model, features: &Tensor, cfg: &DecodeConfig) -> Result<SimulOutput> {
    run_simultaneous_with_id(model, features, cfg, 0)
}

pub fn run_simultaneous_with_id(
    model: &Model,
    features: &Tensor,
    cfg: &DecodeConfig,
    stream_id: usize,
) -> Result<SimulOutput> {
    if model.config.teacher {
        return Err(Error::Config("teacher models decode offline; use run_teacher".into()));
    }
    let (n, width) = features.require_matrix("features")?;
    model.check_features(width)?;
    let mut policy = PolicyState::new(cfg.k)?;
    let mut source = SourceState::new(model, n)?;
    let mut log = EmissionLog::new(stream_id, n, cfg.frame_interval);
    let mut prefix = vec![BOS];
    let mut ended = false;
    let cap = cfg.max_len.unwrap_or(usize::MAX);

    for f in 0..n {
        let fired = source.read(features.row(f))?;
        policy.boundary_count = source.boundaries.len();
        if fired == 0 || ended || !policy.may_write() {
            continue;
        }
        policy.mode = PolicyMode::Write;
        let memory = source.memory()?;
        let mut session = DecodeSession::new(model, &memory)?;
        while policy.may_write() && prefix.len() <= cap {
            let cross = decoder_cross_mask(cfg.k, &source.boundaries, prefix.len(), false, source.frames)?;
            let token = argmax(&session.log_probs(&prefix, &cross)?);
            if token == EOS {
                ended = true;
                break;
            }
            prefix.push(token);
            policy.emitted += 1;
            log.emissions.push(Emission {
                token,
                frames_read: source.frames,
                boundary_count: policy.boundary_count,
                tail: false,
            });
        }
        policy.mode = PolicyMode::Read;
    }

    source.finish();
    policy.boundary_count = source.boundaries.len();
    policy.mode = PolicyMode::Tail;
    let max_len = cfg.max_len.unwrap_or_else(|| default_max_len(source.boundaries.len()));
    if !ended && prefix.len() <= max_len {
        let memory = source.memory()?;
        let mut session = DecodeSession::new(model, &memory)?;
        let written = prefix.clone();
        let boundaries = source.boundaries.clone();
        let best = beam_search(cfg.beam, cfg.length_penalty, max_len + 1 - written.len(), EOS, |generated| {
            let mut p = written.clone();
            p.extend_from_slice(generated);
            let cross = decoder_cross_mask(cfg.k, &boundaries, p.len(), true, n)?;
            session.log_probs(&p, &cross)
        })?;
        for &token in best.tokens.iter().take_while(|&&t| t != EOS) {
            prefix.push(token);
            log.emissions.push(Emission {
                token,
                frames_read: n,
                boundary_count: policy.boundary_count,
                tail: true,
            });
        }
    }
    Ok(SimulOutput {
        tokens: prefix[1..].to_vec(),
        log,
        boundaries: source.boundaries,
    })
}

/// Offline decoding: bidirectional encoding, unrestricted cross-attention,
/// beam search.
pub fn run_teacher(model: &Model, features: &Tensor, beam: usize, length_penalty: f64, max_len: Option<usize>) -> Result<Vec<usize>> {
    let (n, width) = features.require_matrix("features")?;
    model.check_features(width)?;
    let x = model.embed_frames(features, 0)?;
    let memory = encode_full(&model.parts.encoder, &model.params, &x)?;
    let mut session = DecodeSession::new(model, &memory)?;
    let max_len = max_len.unwrap_or_else(|| default_max_len(n));
    let best = beam_search(beam, length_penalty, max_len, EOS, |generated| {
        let mut p = vec![BOS];
        p.extend_from_slice(generated);
        let rows = p.len();
        session.log_probs(&p, &AttentionMask::full(rows, n))
    })?;
    Ok(best.tokens.into_iter().take_while(|&t| t != EOS).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    NotReencode,
    ReencodeOnce,
    ReencodeEveryTime,
}

/// Query-key pairs evaluated by each encoding strategy over `n` frames.
pub fn count_attention_pairs(strategy: PairStrategy, boundaries: &BoundarySet, n: usize) -> Result<u64> {
    boundaries.validate(n)?;
    let frames = boundaries.frames();
    let last = frames.last().copied().unwrap_or(0) as u64;
    let n = n as u64;
    let causal_tail: u64 = (last + 1..=n).sum();
    let mut prev = 0u64;
    let mut total = 0u64;
    for &b in &frames {
        let b = b as u64;
        total += match strategy {
            PairStrategy::NotReencode => 0,
            PairStrategy::ReencodeOnce => (b - prev) * b,
            PairStrategy::ReencodeEveryTime => b * b,
        };
        prev = b;
    }
    Ok(match strategy {
        PairStrategy::NotReencode => n * (n + 1) / 2,
        _ => total + causal_tail,
    })
}

const LOGIT_MAGIC: &[u8; 8] = b"WKLOGIT1";

/// Teacher logits for one sample. File layout (little-endian): magic
/// `WKLOGIT1`, `u64` sample id, `f64` temperature, `u64` rows, `u64` cols,
/// then `rows × cols` `f64` values row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherLogits {
    pub sample_id: u64,
    pub temperature: f64,
    pub logits: Tensor,
}

impl TeacherLogits {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(40 + 8 * self.logits.numel());
        buf.extend_from_slice(LOGIT_MAGIC);
        buf.extend_from_slice(&self.sample_id.to_le_bytes());
        buf.extend_from_slice(&self.temperature.to_le_bytes());
        buf.extend_from_slice(&(self.logits.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.logits.cols() as u64).to_le_bytes());
        for v in self.logits.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |what: &str| Error::Schema(format!("teacher logit file {}: {what}", path.display()));
        if bytes.len() < 40 || &bytes[..8] != LOGIT_MAGIC {
            return Err(bad("missing header"));
        }
        let word = |i: usize| -> [u8; 8] { bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes") };
        let sample_id = u64::from_le_bytes(word(0));
        let temperature = f64::from_le_bytes(word(1));
        let rows = u64::from_le_bytes(word(2)) as usize;
        let cols = u64::from_le_bytes(word(3)) as usize;
        let expected = rows.checked_mul(cols).and_then(|v| v.checked_mul(8)).map(|v| v + 40);
        if expected != Some(bytes.len()) {
            return Err(bad("size does not match header"));
        }
        let data = bytes[40..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(TeacherLogits {
            sample_id,
            temperature,
            logits: Tensor::matrix(rows, cols, data).map_err(|_| bad("empty logits"))?,
        })
    }
}
