//! Experiment configuration (JSON). Every field has a desk-scale default,
//! so a config file only needs the fields it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use waitk::data::{SplitSizes, SyntheticSpec};
use waitk::encoder::FusionMode;
use waitk::engine::DecodeConfig;
use waitk::losses::LossWeights;
use waitk::model::{ModelConfig, Segmentation, TrainOptions};
use waitk::optim::AdamConfig;
use waitk::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub aux_layers: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims::desk()
    }
}

impl ModelDims {
    pub fn desk() -> Self {
        ModelDims {
            d_model: 64,
            heads: 4,
            ff_dim: 256,
            encoder_layers: 2,
            decoder_layers: 2,
            aux_layers: 1,
        }
    }

    pub fn large() -> Self {
        ModelDims {
            d_model: 512,
            heads: 8,
            ff_dim: 2048,
            encoder_layers: 3,
            decoder_layers: 3,
            aux_layers: 1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "large" => Ok(Self::large()),
            other => Err(Error::Config(format!("unknown model preset {other:?} (desk, large)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationToggle {
    BoundaryPredictor,
    StaticSegment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub segmentation: SegmentationToggle,
    pub ctc_on: bool,
    pub kd_on: bool,
    pub reencode: bool,
    pub fusion: FusionMode,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            segmentation: SegmentationToggle::BoundaryPredictor,
            ctc_on: true,
            kd_on: false,
            reencode: true,
            fusion: FusionMode::Add,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Linear learning-rate warmup over the first steps (0 disables).
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        OptimConfig {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            batch_size: 16,
            warmup_steps: 0,
            max_steps: 2000,
            eval_every: 100,
            patience: 9,
            factor: 0.5,
            min_lr: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub model: u64,
    pub shuffle: u64,
    pub dropout: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            model: 1,
            shuffle: 2,
            dropout: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_list: Vec<usize>,
    pub beam: usize,
    pub length_penalty: f64,
    pub frame_interval: f64,
    /// Boundary matching tolerance in frames.
    pub boundary_tolerance: usize,
    /// Evaluate only the first N dev samples during training.
    pub dev_limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_list: vec![1, 3, 5, 7],
            beam: 3,
            length_penalty: -1.0,
            frame_interval: 1.0,
            boundary_tolerance: 2,
            dev_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Directory of per-sample teacher logit files, required when `kd_on`.
    pub teacher_logits: Option<PathBuf>,
    pub model: ModelDims,
    pub k: usize,
    pub weights: LossWeights,
    /// Encoder and decoder dropout rates.
    pub dropout: [f64; 2],
    pub threshold: f64,
    pub tail_fraction: f64,
    pub kd_temperature: f64,
    pub optimizer: OptimConfig,
    pub toggles: Toggles,
    pub seeds: Seeds,
    pub eval: EvalConfig,
    /// Used by `gen-data` when no spec file is given.
    pub data: SyntheticSpec,
    pub splits: SplitSizes,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let desk = ModelConfig::desk(1, 1, 1);
        ExperimentConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            teacher_logits: None,
            model: ModelDims::desk(),
            k: 3,
            weights: LossWeights::default(),
            dropout: [0.3, 0.6],
            threshold: desk.threshold,
            tail_fraction: desk.tail_fraction,
            kd_temperature: 2.0,
            optimizer: OptimConfig::default(),
            toggles: Toggles::default(),
            seeds: Seeds::default(),
            eval: EvalConfig::default(),
            data: SyntheticSpec::default(),
            splits: SplitSizes::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.eval.k_list.contains(&0) {
            return bad("eval k list contains 0".into());
        }
        for p in self.dropout {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout rate {p} outside [0,1)"));
            }
        }
        let o = &self.optimizer;
        if o.batch_size == 0 || o.eval_every == 0 {
            return bad("batch_size and eval_every must be positive".into());
        }
        if !(o.lr > 0.0) || !(o.factor > 0.0 && o.factor < 1.0) {
            return bad("lr must be positive and factor inside (0,1)".into());
        }
        if self.eval.beam == 0 {
            return bad("beam width must be positive".into());
        }
        if !(self.kd_temperature > 0.0) {
            return bad("kd_temperature must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        let o = &self.optimizer;
        AdamConfig {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        }
    }

    /// Model configuration for a corpus. `static_rate` is the training
    /// corpus's mean frames per gloss.
    pub fn model_config(&self, spec: &SyntheticSpec, static_rate: f64, teacher: bool) -> ModelConfig {
        let d = &self.model;
        ModelConfig {
            feature_dim: spec.feature_dim,
            d_model: d.d_model,
            heads: d.heads,
            ff_dim: d.ff_dim,
            encoder_layers: d.encoder_layers,
            decoder_layers: d.decoder_layers,
            aux_layers: d.aux_layers,
            gloss_vocab: spec.gloss_vocab,
            text_vocab: spec.text_vocab,
            threshold: self.threshold,
            tail_fraction: self.tail_fraction,
            teacher,
            segmentation: match self.toggles.segmentation {
                SegmentationToggle::BoundaryPredictor => Segmentation::Predictor,
                SegmentationToggle::StaticSegment => Segmentation::Static { rate: static_rate },
            },
            reencode: self.toggles.reencode && !teacher,
            fusion: self.toggles.fusion,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            k: self.k,
            weights: self.weights,
            ctc: self.toggles.ctc_on,
            kd_temperature: self.kd_temperature,
            dropout_encoder: self.dropout[0],
            dropout_decoder: self.dropout[1],
        }
    }

    pub fn decode_config(&self, k: usize) -> DecodeConfig {
        DecodeConfig {
            k,
            beam: self.eval.beam,
            length_penalty: self.eval.length_penalty,
            max_len: None,
            frame_interval: self.eval.frame_interval,
        }
    }
}

/// Rows of the ablation lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationRow {
    Native,
    Bp,
    BpCtc,
    BpKd,
    BpReencode,
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 6] = [
        AblationRow::Native,
        AblationRow::Bp,
        AblationRow::BpCtc,
        AblationRow::BpKd,
        AblationRow::BpReencode,
        AblationRow::Full,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AblationRow::Native => "Native",
            AblationRow::Bp => "+BP",
            AblationRow::BpCtc => "+BP+CTC",
            AblationRow::BpKd => "+BP+KD",
            AblationRow::BpReencode => "+BP+Re-encode",
            AblationRow::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation row {s:?}")))
    }

    pub fn toggles(&self, base: &Toggles) -> Toggles {
        let (segmentation, ctc_on, kd_on, reencode) = match self {
            AblationRow::Native => (SegmentationToggle::StaticSegment, false, false, false),
            AblationRow::Bp => (SegmentationToggle::BoundaryPredictor, false, false, false),
            AblationRow::BpCtc => (SegmentationToggle::BoundaryPredictor, true, false, false),
            AblationRow::BpKd => (SegmentationToggle::BoundaryPredictor, false, true, false),
            AblationRow::BpReencode => (SegmentationToggle::BoundaryPredictor, false, false, true),
            AblationRow::Full => (SegmentationToggle::BoundaryPredictor, true, true, true),
        };
        Toggles {
            segmentation,
            ctc_on,
            kd_on,
            reencode,
            fusion: base.fusion,
        }
    }

    pub fn needs_teacher(&self) -> bool {
        self.toggles(&Toggles::default()).kd_on
    }
}
