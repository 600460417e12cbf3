//! Run configuration: dataset and training settings plus a line-oriented
//! `key = value` config-file parser. Unknown keys are errors.

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::sinkhorn::AssignmentMode;

use super::HarnessError;

/// Synthetic dataset settings. Image geometry comes from the model config so
/// the two can never disagree.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataConfig {
    pub num_identities: usize,
    pub train_per_identity: usize,
    pub query_per_identity: usize,
    pub gallery_per_identity: usize,
    /// Per-pixel Gaussian noise applied to every image.
    pub noise_std: f64,
    /// Per-image brightness jitter range (uniform in ±jitter).
    pub jitter: f64,
    /// Probability of horizontally flipping a training image.
    pub flip_prob: f64,
    /// Probability of pasting a gray occluder block (training and query).
    pub occlude_prob: f64,
}

impl DataConfig {
    pub fn desk_defaults() -> Self {
        Self {
            num_identities: 8,
            train_per_identity: 8,
            query_per_identity: 2,
            gallery_per_identity: 4,
            noise_std: 0.02,
            jitter: 0.08,
            flip_prob: 0.5,
            occlude_prob: 0.25,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.num_identities < 2 {
            return Err(HarnessError::Config("need at least two identities".into()));
        }
        if self.train_per_identity < 2 {
            return Err(HarnessError::Config(
                "need at least two training images per identity".into(),
            ));
        }
        if self.query_per_identity == 0 || self.gallery_per_identity == 0 {
            return Err(HarnessError::Config(
                "query and gallery splits must be non-empty".into(),
            ));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("occlude_prob", self.occlude_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(HarnessError::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if self.noise_std < 0.0 || self.jitter < 0.0 {
            return Err(HarnessError::Config("noise_std and jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// Optimization settings: Adam with a linear warmup followed by step decay.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Hard cap on optimizer steps; unset means `epochs * steps_per_epoch`.
    pub max_steps: Option<usize>,
    pub pk_identities: usize,
    pub pk_images: usize,
    pub lr_start: f64,
    pub lr_base: f64,
    pub warmup_epochs: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Write a checkpoint every this many steps (0 = final only).
    pub checkpoint_every: usize,
    pub assignment: AssignmentMode,
}

impl TrainConfig {
    /// Warmup from 3.5e-5 to 3.5e-4 over 2 epochs, x0.1 decay at epochs 8
    /// and 14, 24 epochs total; batch geometry scaled down to desk size.
    pub fn desk_defaults() -> Self {
        Self {
            epochs: 24,
            max_steps: None,
            pk_identities: 4,
            pk_images: 2,
            lr_start: 3.5e-5,
            lr_base: 3.5e-4,
            warmup_epochs: 2.0,
            decay_epochs: vec![8, 14],
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
            assignment: AssignmentMode::OptimalTransport,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.pk_identities < 2 || self.pk_images < 2 {
            return Err(HarnessError::Config(
                "PK batches need at least 2 identities and 2 images each".into(),
            ));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(HarnessError::Config("no training budget configured".into()));
        }
        if self.lr_start <= 0.0 || self.lr_base <= 0.0 {
            return Err(HarnessError::Config("learning rates must be positive".into()));
        }
        if self.warmup_epochs < 0.0 {
            return Err(HarnessError::Config("warmup_epochs must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_factor) || self.decay_factor == 0.0 {
            return Err(HarnessError::Config(format!(
                "decay_factor must be in (0,1], got {}",
                self.decay_factor
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(HarnessError::Config("Adam betas must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// Everything a run needs: architecture, data, and optimization settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Desk-scale defaults: 64x48 images, a 4-layer width-64 model with
    /// granularity {2,3}, 8 synthetic identities.
    pub fn desk_defaults() -> Self {
        let mut model = ModelConfig::paper_defaults();
        model.image_h = 64;
        model.image_w = 48;
        model.embed_dim = 64;
        model.heads = 4;
        model.layers = 4;
        Self {
            model,
            data: DataConfig::desk_defaults(),
            train: TrainConfig::desk_defaults(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.data.validate()?;
        self.train.validate()?;
        if self.train.pk_identities > self.data.num_identities {
            return Err(HarnessError::Config(format!(
                "pk_identities {} exceeds {} identities",
                self.train.pk_identities, self.data.num_identities
            )));
        }
        if self.train.pk_images > self.data.train_per_identity {
            return Err(HarnessError::Config(format!(
                "pk_images {} exceeds {} training images per identity",
                self.train.pk_images, self.data.train_per_identity
            )));
        }
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| {
        HarnessError::Config(format!("key '{key}': cannot parse '{value}': {e}"))
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, HarnessError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// Apply `key = value` lines to a base configuration. Blank lines and
/// `#` comments are skipped; any key outside the known set is an error.
pub fn apply_config_text(base: RunConfig, text: &str) -> Result<RunConfig, HarnessError> {
    let mut cfg = base;
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(HarnessError::Config(format!(
                "line {}: expected 'key = value', got '{raw}'",
                line_no + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "image_h" => cfg.model.image_h = parse(key, value)?,
            "image_w" => cfg.model.image_w = parse(key, value)?,
            "channels" => cfg.model.channels = parse(key, value)?,
            "patch_size" => cfg.model.patch_size = parse(key, value)?,
            "stride" => cfg.model.stride = parse(key, value)?,
            "embed_dim" => cfg.model.embed_dim = parse(key, value)?,
            "heads" => cfg.model.heads = parse(key, value)?,
            "layers" => cfg.model.layers = parse(key, value)?,
            "granularity_sets" => cfg.model.granularity = parse_list(key, value)?,
            "epsilon" => cfg.model.epsilon = parse(key, value)?,
            "sinkhorn_iters" => cfg.model.sinkhorn_iters = parse(key, value)?,
            "mlp_ratio" => cfg.model.mlp_ratio = parse(key, value)?,
            "label_smoothing" => cfg.model.label_smoothing = parse(key, value)?,
            "triplet_margin" => cfg.model.triplet_margin = parse(key, value)?,
            "ln_eps" => cfg.model.ln_eps = parse(key, value)?,
            "rounding" => {
                cfg.model.rounding = value.parse().map_err(HarnessError::Config)?;
            }
            "part_token_pos_embed" => cfg.model.part_token_pos_embed = parse(key, value)?,
            "num_identities" => cfg.data.num_identities = parse(key, value)?,
            "train_per_identity" => cfg.data.train_per_identity = parse(key, value)?,
            "query_per_identity" => cfg.data.query_per_identity = parse(key, value)?,
            "gallery_per_identity" => cfg.data.gallery_per_identity = parse(key, value)?,
            "noise_std" => cfg.data.noise_std = parse(key, value)?,
            "jitter" => cfg.data.jitter = parse(key, value)?,
            "flip_prob" => cfg.data.flip_prob = parse(key, value)?,
            "occlude_prob" => cfg.data.occlude_prob = parse(key, value)?,
            "epochs" => cfg.train.epochs = parse(key, value)?,
            "max_steps" => cfg.train.max_steps = Some(parse(key, value)?),
            "pk_identities" => cfg.train.pk_identities = parse(key, value)?,
            "pk_images" => cfg.train.pk_images = parse(key, value)?,
            "lr_start" => cfg.train.lr_start = parse(key, value)?,
            "lr_base" => cfg.train.lr_base = parse(key, value)?,
            "warmup_epochs" => cfg.train.warmup_epochs = parse(key, value)?,
            "decay_epochs" => cfg.train.decay_epochs = parse_list(key, value)?,
            "decay_factor" => cfg.train.decay_factor = parse(key, value)?,
            "beta1" => cfg.train.beta1 = parse(key, value)?,
            "beta2" => cfg.train.beta2 = parse(key, value)?,
            "adam_eps" => cfg.train.adam_eps = parse(key, value)?,
            "checkpoint_every" => cfg.train.checkpoint_every = parse(key, value)?,
            "assignment" => {
                cfg.train.assignment = value.parse().map_err(HarnessError::Config)?;
            }
            other => {
                return Err(HarnessError::Config(format!(
                    "line {}: unknown key '{other}'",
                    line_no + 1
                )));
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Load and apply a config file on top of the desk defaults.
pub fn load_config_file(path: &std::path::Path) -> Result<RunConfig, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    apply_config_text(RunConfig::desk_defaults(), &text)
}
