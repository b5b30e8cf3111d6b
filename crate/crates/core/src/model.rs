//! The full translation model: frame embedding, shared encoder, CTC head,
//! boundary predictor, auxiliary gloss decoder, fusion and wait-k text
//! decoder, with the multi-loss training forward pass.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::boundary::{BoundaryMlp, BoundarySet, DEFAULT_TAIL_FRACTION, DEFAULT_THRESHOLD};
use crate::decoders::{Vocabulary, BOS, EOS};
use crate::encoder::{fuse_graph, FusionMode};
use crate::engine::static_segment;
use crate::error::{Error, Result};
use crate::losses::{ctc_graph, hard_ce, if_loss, soft_kd, total_loss_graph, LossParts, LossWeights};
use crate::mask::{build_causal_mask, build_reencode_once_mask, build_waitk_training_mask, AttentionMask};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::transformer::{sinusoidal_positions, DecoderStack, Linear, TransformerStack};

/// How segment boundaries are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segmentation {
    Predictor,
    /// Fixed rate in frames per segment.
    Static { rate: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub aux_layers: usize,
    /// Content glosses (CTC adds one blank class).
    pub gloss_vocab: usize,
    /// Content words (special tokens are added on top).
    pub text_vocab: usize,
    pub threshold: f64,
    pub tail_fraction: f64,
    /// Offline model: bidirectional encoder, unrestricted cross-attention.
    pub teacher: bool,
    pub segmentation: Segmentation,
    pub reencode: bool,
    pub fusion: FusionMode,
}

impl ModelConfig {
    pub fn desk(feature_dim: usize, gloss_vocab: usize, text_vocab: usize) -> Self {
        ModelConfig {
            feature_dim,
            d_model: 64,
            heads: 4,
            ff_dim: 256,
            encoder_layers: 2,
            decoder_layers: 2,
            aux_layers: 1,
            gloss_vocab,
            text_vocab,
            threshold: DEFAULT_THRESHOLD,
            tail_fraction: DEFAULT_TAIL_FRACTION,
            teacher: false,
            segmentation: Segmentation::Predictor,
            reencode: true,
            fusion: FusionMode::Add,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("gloss_vocab", self.gloss_vocab),
            ("text_vocab", self.text_vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(self.threshold > 0.0) || !(self.tail_fraction >= 0.0) {
            return Err(Error::Config("threshold must be positive and tail fraction non-negative".into()));
        }
        if let Segmentation::Static { rate } = self.segmentation {
            if !(rate > 0.0) {
                return Err(Error::Config(format!("static segment rate must be positive, got {rate}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelParts {
    pub input: Linear,
    pub encoder: TransformerStack,
    pub ctc_head: Linear,
    pub predictor: BoundaryMlp,
    pub aux_decoder: DecoderStack,
    pub aux_head: Linear,
    pub text_embedding: usize,
    pub text_decoder: DecoderStack,
    pub text_head: Linear,
    pub fuse_projection: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub parts: ModelParts,
    pub params: ParamStore,
}

/// One teacher-forced training example.
#[derive(Clone, Copy, Debug)]
pub struct TrainExample<'a> {
    pub features: &'a Tensor,
    pub gloss: &'a [usize],
    /// Content word ids (without specials), `0..text_vocab`.
    pub text: &'a [usize],
    /// Teacher logits, `(text.len() + 1) × text_classes`.
    pub teacher_logits: Option<&'a Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub k: usize,
    pub weights: LossWeights,
    pub ctc: bool,
    pub kd_temperature: f64,
    pub dropout_encoder: f64,
    pub dropout_decoder: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            k: 3,
            weights: LossWeights::default(),
            ctc: true,
            kd_temperature: 2.0,
            dropout_encoder: 0.1,
            dropout_decoder: 0.1,
        }
    }
}

pub struct TrainForward {
    pub loss: Var,
    pub parts: LossParts,
    pub boundaries: Option<BoundarySet>,
    pub text_logits: Var,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: Model,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = &config;
        let vocab = Vocabulary::new(c.gloss_vocab, c.text_vocab);
        let d = c.d_model;
        let input = Linear::init(&mut params, "input", c.feature_dim, d, &mut rng);
        let encoder = TransformerStack::init(&mut params, "encoder", d, c.heads, c.ff_dim, c.encoder_layers, &mut rng)?;
        let ctc_head = Linear::init(&mut params, "ctc_head", d, vocab.ctc_classes(), &mut rng);
        let predictor = BoundaryMlp::init(&mut params, "predictor", d, &mut rng);
        let aux_decoder =
            DecoderStack::init(&mut params, "aux_decoder", d, c.heads, c.ff_dim, c.aux_layers, false, &mut rng)?;
        let aux_head = Linear::init(&mut params, "aux_head", d, vocab.gloss_classes(), &mut rng);
        let text_embedding = params.add_xavier("text_embedding", vocab.text_classes(), d, &mut rng);
        let text_decoder =
            DecoderStack::init(&mut params, "text_decoder", d, c.heads, c.ff_dim, c.decoder_layers, true, &mut rng)?;
        let text_head = Linear::init(&mut params, "text_head", d, vocab.text_classes(), &mut rng);
        let fuse_projection = Linear::init(&mut params, "fuse_projection", 2 * d, d, &mut rng);
        Ok(Model {
            config,
            parts: ModelParts {
                input,
                encoder,
                ctc_head,
                predictor,
                aux_decoder,
                aux_head,
                text_embedding,
                text_decoder,
                text_head,
                fuse_projection,
            },
            params,
        })
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.config.gloss_vocab, self.config.text_vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Schema(format!("checkpoint {} is not JSON: {e}", path.display())))?;
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Schema(format!(
                "checkpoint version {version:?}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let ckpt: Checkpoint = serde_json::from_value(value)
            .map_err(|e| Error::Schema(format!("checkpoint {}: {e}", path.display())))?;
        let mut model = ckpt.model;
        model.params.reindex()?;
        Model::new(model.config.clone(), 0)?.params.check_compatible(&model.params)?;
        Ok(model)
    }

    /// Frames projected to model width plus positions `offset..`.
    pub fn embed_frames(&self, features: &Tensor, offset: usize) -> Result<Tensor> {
        let (n, f) = features.require_matrix("features")?;
        self.check_features(f)?;
        let mut out = self.parts.input.apply(&self.params, features)?;
        out.add_assign(&sinusoidal_positions(n, self.config.d_model, offset));
        Ok(out)
    }

    pub fn check_features(&self, width: usize) -> Result<()> {
        if width != self.config.feature_dim {
            return Err(Error::Config(format!(
                "stream has {width} features per frame, model expects {}",
                self.config.feature_dim
            )));
        }
        Ok(())
    }

    fn embed_frames_graph(&self, g: &mut Graph, features: &Tensor) -> Result<Var> {
        let (n, f) = features.require_matrix("features")?;
        self.check_features(f)?;
        let x = g.constant(features.clone());
        let h = self.parts.input.forward(g, x)?;
        let pe = g.constant(sinusoidal_positions(n, self.config.d_model, 0));
        g.add(h, pe)
    }

    /// Decoder input embeddings for token ids (scaled by `√d`, plus
    /// positions).
    pub fn embed_text_graph(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let table = g.param(self.parts.text_embedding);
        let e = g.gather_rows(table, ids)?;
        let e = g.scale(e, (self.config.d_model as f64).sqrt());
        let pe = g.constant(sinusoidal_positions(ids.len(), self.config.d_model, 0));
        g.add(e, pe)
    }

    /// Text logits for the teacher-forced inputs `ids` given the decoder
    /// memory and per-position cross-attention mask.
    pub fn text_logits_graph(
        &self,
        g: &mut Graph,
        memory: Var,
        ids: &[usize],
        cross: &AttentionMask,
        dropout: f64,
    ) -> Result<Var> {
        let x = self.embed_text_graph(g, ids)?;
        let x = g.dropout(x, dropout);
        let mem = self.parts.text_decoder.project_memory(g, memory)?;
        let h = self
            .parts
            .text_decoder
            .forward(g, x, &build_causal_mask(ids.len()), Some((&mem, cross)), dropout)?;
        self.parts.text_head.forward(g, h)
    }

    /// Multi-loss forward pass for one example. Builds the weighted total
    /// of the configured terms.
    pub fn forward_train(&self, g: &mut Graph, ex: &TrainExample, opts: &TrainOptions) -> Result<TrainForward> {
        let c = &self.config;
        let vocab = self.vocab();
        let n = ex.features.rows();
        if opts.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if ex.gloss.is_empty() || ex.text.is_empty() {
            return Err(Error::Data("training example with empty gloss or text".into()));
        }
        let h0 = self.embed_frames_graph(g, ex.features)?;
        let h0 = g.dropout(h0, opts.dropout_encoder);
        let enc_mask = if c.teacher { AttentionMask::full(n, n) } else { build_causal_mask(n) };
        let h1 = self.parts.encoder.encode_with_mask(g, h0, &enc_mask, opts.dropout_encoder)?;

        let ctc = if opts.ctc {
            let logits = self.parts.ctc_head.forward(g, h1)?;
            Some(ctc_graph(g, logits, ex.gloss, vocab.blank(), true)?)
        } else {
            None
        };

        let mut if_term = None;
        let boundaries = if c.teacher {
            None
        } else {
            match c.segmentation {
                Segmentation::Static { rate } => Some(static_segment(n, rate)?),
                Segmentation::Predictor => {
                    let s_x = ex.gloss.len();
                    let w = self.parts.predictor.forward(g, h1)?;
                    let scaled = g.rescale_to_sum(w, s_x as f64 * c.threshold)?;
                    let (align, fired) = g.fire_align(scaled, c.threshold, Some(c.tail_fraction))?;
                    if fired.len() != s_x {
                        return Err(Error::Contract(format!(
                            "rescaled weights fired {} segments for {s_x} glosses",
                            fired.len()
                        )));
                    }
                    let e = g.matmul(align, h1)?;
                    let a = self
                        .parts
                        .aux_decoder
                        .forward(g, e, &build_causal_mask(s_x), None, opts.dropout_decoder)?;
                    let logits = self.parts.aux_head.forward(g, a)?;
                    if_term = Some(if_loss(g, logits, ex.gloss, w, s_x)?);
                    Some(fired)
                }
            }
        };

        let memory = match (&boundaries, c.reencode && !c.teacher) {
            (Some(b), true) => {
                let mask = build_reencode_once_mask(b, n)?;
                let h2 = self.parts.encoder.encode_with_mask(g, h0, &mask, opts.dropout_encoder)?;
                fuse_graph(g, h1, h2, c.fusion, &self.parts.fuse_projection)?
            }
            _ => h1,
        };

        let mut ids = Vec::with_capacity(ex.text.len() + 1);
        ids.push(BOS);
        ids.extend(ex.text.iter().map(|&w| vocab.text_id(w)));
        let mut targets: Vec<Option<usize>> = ids[1..].iter().map(|&t| Some(t)).collect();
        targets.push(Some(EOS));
        if targets.iter().flatten().any(|&t| t >= vocab.text_classes()) {
            return Err(Error::Data("text id outside the vocabulary".into()));
        }
        let cross = match &boundaries {
            Some(b) => build_waitk_training_mask(opts.k, b, ids.len(), n)?,
            None => AttentionMask::full(ids.len(), n),
        };
        let logits = self.text_logits_graph(g, memory, &ids, &cross, opts.dropout_decoder)?;
        let hard = hard_ce(g, logits, &targets)?;
        let soft = match ex.teacher_logits {
            Some(t) => Some(soft_kd(g, logits, t, opts.kd_temperature)?),
            None => None,
        };
        let (loss, parts) = total_loss_graph(g, [ctc, if_term, soft, Some(hard)], &opts.weights)?;
        Ok(TrainForward {
            loss,
            parts,
            boundaries,
            text_logits: logits,
        })
    }

    /// Teacher-forced text logits in evaluation mode, `(text.len() + 1) ×
    /// text_classes`; the rows a teacher writes for distillation.
    pub fn teacher_forced_logits(&self, features: &Tensor, text: &[usize], k: usize) -> Result<Tensor> {
        let ex = TrainExample {
            features,
            gloss: &[],
            text,
            teacher_logits: None,
        };
        let n = features.rows();
        let mut g = Graph::with_params(&self.params);
        let h0 = self.embed_frames_graph(&mut g, ex.features)?;
        let c = &self.config;
        let enc_mask = if c.teacher { AttentionMask::full(n, n) } else { build_causal_mask(n) };
        let h1 = self.parts.encoder.encode_with_mask(&mut g, h0, &enc_mask, 0.0)?;
        let vocab = self.vocab();
        let mut ids = vec![BOS];
        ids.extend(text.iter().map(|&w| vocab.text_id(w)));
        let (memory, cross) = if c.teacher {
            (h1, AttentionMask::full(ids.len(), n))
        } else {
            let h1v = g.value(h1).clone();
            let boundaries = self.inference_boundaries(&h1v, n)?;
            let memory = if c.reencode {
                let mask = build_reencode_once_mask(&boundaries, n)?;
                let h2 = self.parts.encoder.encode_with_mask(&mut g, h0, &mask, 0.0)?;
                fuse_graph(&mut g, h1, h2, c.fusion, &self.parts.fuse_projection)?
            } else {
                h1
            };
            (memory, build_waitk_training_mask(k, &boundaries, ids.len(), n)?)
        };
        let logits = self.text_logits_graph(&mut g, memory, &ids, &cross, 0.0)?;
        Ok(g.value(logits).clone())
    }

    /// Boundaries an inference run would fire over first-pass states `h1`
    /// for a complete stream of `n` frames.
    pub fn inference_boundaries(&self, h1: &Tensor, n: usize) -> Result<BoundarySet> {
        match self.config.segmentation {
            Segmentation::Static { rate } => static_segment(n, rate),
            Segmentation::Predictor => {
                let w = self.parts.predictor.compute_weights(&self.params, h1)?;
                let mut acc = crate::boundary::FireAccumulator::new(self.config.threshold)?;
                let mut set = BoundarySet::new(self.config.threshold);
                for &wi in &w.0 {
                    for b in acc.push(wi)? {
                        set.push(b);
                    }
                }
                if let Some(b) = acc.finalize_tail(self.config.tail_fraction) {
                    set.push(b);
                }
                Ok(set)
            }
        }
    }
}
