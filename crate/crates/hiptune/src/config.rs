//! Run configuration file: structured TOML covering data locations, model
//! geometry, training hyperparameters and output paths. Every field has a
//! desk-scale default, so a minimal config only names the data directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::Comparator;
use crate::model::ModelConfig;
use crate::training::LossConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSection::default(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory produced by `generate` (taxonomy.json, manifest.txt, samples/).
    pub dir: PathBuf,
    /// Optional protocol split file; without one, every record trains.
    pub split: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: PathBuf::from("runs/data"),
            split: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub temperature: f64,
    pub max_text_tokens: usize,
    pub template_length: usize,
    pub prompt_length: usize,
    pub theta: f64,
    pub fadc_low: f64,
    pub fadc_high: f64,
    pub dpi_attention: bool,
    pub depth_insertion: bool,
    pub baseline_context_length: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let cfg = ModelConfig::default();
        ModelSection {
            image_size: enc.image_size,
            patch_size: enc.patch_size,
            visual_dim: enc.visual_dim,
            text_dim: enc.text_dim,
            n_layers: enc.n_layers,
            n_heads: enc.n_heads,
            temperature: enc.temperature,
            max_text_tokens: enc.max_text_tokens,
            template_length: enc.template_length,
            prompt_length: cfg.prompt_length,
            theta: cfg.theta,
            fadc_low: cfg.fadc_thresholds.0,
            fadc_high: cfg.fadc_thresholds.1,
            dpi_attention: cfg.dpi_attention,
            depth_insertion: cfg.depth_insertion,
            baseline_context_length: cfg.baseline_context_length,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub coop_epochs: usize,
    pub triplet_margin: f64,
    pub triplet_weight: f64,
    pub routing_ce_weight: f64,
    pub joint_finetune: bool,
    /// Oversample live records toward a 1:2 live/fake ratio in each epoch.
    pub balance_live: bool,
    /// Which comparator `train` optimizes.
    pub comparator: String,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let loss = LossConfig::default();
        TrainingSection {
            seed: 7,
            learning_rate: loss.learning_rate,
            batch_size: loss.batch_size,
            stage1_epochs: loss.stage1_epochs,
            stage2_epochs: loss.stage2_epochs,
            pretrain_epochs: loss.pretrain_epochs,
            pretrain_lr: loss.pretrain_lr,
            coop_epochs: loss.coop_epochs,
            triplet_margin: loss.triplet_margin,
            triplet_weight: loss.triplet_weight,
            routing_ce_weight: loss.routing_ce_weight,
            joint_finetune: loss.joint_finetune,
            balance_live: loss.balance_live,
            comparator: "hiptune".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub checkpoint: PathBuf,
    pub loss_trace: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            checkpoint: PathBuf::from("runs/checkpoint.bin"),
            loss_trace: PathBuf::from("runs/loss_trace.tsv"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.model_config().validate()?;
        cfg.loss_config().validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            encoder: EncoderConfig {
                image_size: m.image_size,
                patch_size: m.patch_size,
                visual_dim: m.visual_dim,
                text_dim: m.text_dim,
                n_layers: m.n_layers,
                n_heads: m.n_heads,
                temperature: m.temperature,
                max_text_tokens: m.max_text_tokens,
                template_length: m.template_length,
            },
            prompt_length: m.prompt_length,
            theta: m.theta,
            fadc_thresholds: (m.fadc_low, m.fadc_high),
            dpi_attention: m.dpi_attention,
            depth_insertion: m.depth_insertion,
            baseline_context_length: m.baseline_context_length,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        let t = &self.training;
        LossConfig {
            triplet_margin: t.triplet_margin,
            triplet_weight: t.triplet_weight,
            routing_ce_weight: t.routing_ce_weight,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            stage1_epochs: t.stage1_epochs,
            stage2_epochs: t.stage2_epochs,
            pretrain_epochs: t.pretrain_epochs,
            pretrain_lr: t.pretrain_lr,
            coop_epochs: t.coop_epochs,
            joint_finetune: t.joint_finetune,
            balance_live: t.balance_live,
        }
    }

    pub fn comparator(&self) -> Result<Comparator> {
        self.training.comparator.parse()
    }
}
