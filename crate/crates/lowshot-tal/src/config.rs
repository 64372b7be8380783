//! Runtime configuration shared by every stage of the pipeline.
//!
//! All knobs live in one flat struct so that a single `config.json` (plus
//! command-line overrides) pins an entire run. Unknown keys are rejected,
//! missing keys take defaults, and every artifact written by the pipeline
//! echoes the effective config for provenance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the detection loss weights negatives against positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// Balance by frequency: gamma = |positives| / |negatives| per batch.
    Auto,
    /// Use the fixed `gamma` config value.
    Fixed,
}

/// Fusion strategy for the three attribute descriptions of a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Mean of the three separately encoded descriptions.
    Average,
    /// Concatenate the raw texts, encode once.
    Concat,
    /// Softmax-normalized learnable weights over the three encodings.
    Weighted,
}

/// Where conditional prompt vectors enter the frozen text encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPosition {
    /// Prepend/append prompt rows around the class-name tokens.
    Input,
    /// Add the mean prompt vector to the name encoding, then renormalize.
    Output,
}

/// How the per-class classifier bank is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    /// Encode the bare category name.
    NameOnly,
    /// Encode and fuse the three attribute descriptions.
    Description,
    /// Vision-conditional prompt vectors around the name tokens.
    Conditional,
    /// Learnable video-independent prompt vectors (baseline).
    RandomPrompt,
}

/// Which visual streams participate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "rgb")]
    Rgb,
    #[serde(rename = "flow")]
    Flow,
    #[serde(rename = "rgb+flow")]
    Both,
}

impl Modality {
    /// Active streams in a fixed order (rgb before flow).
    pub fn streams(&self) -> &'static [Stream] {
        match self {
            Modality::Rgb => &[Stream::Rgb],
            Modality::Flow => &[Stream::Flow],
            Modality::Both => &[Stream::Rgb, Stream::Flow],
        }
    }
}

/// A single visual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Rgb,
    Flow,
}

impl Stream {
    pub fn name(&self) -> &'static str {
        match self {
            Stream::Rgb => "rgb",
            Stream::Flow => "flow",
        }
    }
}

/// Soft-NMS decay rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmsMode {
    /// score *= (1 - IoU) when IoU exceeds the threshold.
    Linear,
    /// score *= exp(-IoU^2 / sigma) for every overlap.
    Gaussian,
    /// score -> 0 when IoU exceeds the threshold (classic hard NMS).
    Hard,
}

/// Where the classification branch pools visual features during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPooling {
    /// Pool over ground-truth intervals (default; deterministic pairing).
    Gt,
    /// Pool over decoded proposals, labeled by max-IoU ground truth.
    Proposal,
}

fn default_levels() -> usize {
    6
}
fn default_prompt_len() -> usize {
    32
}
fn default_align_dim() -> usize {
    1024
}
fn default_tau() -> f64 {
    0.07
}
fn default_lambda() -> f64 {
    1.0
}
fn default_theta_loc() -> f64 {
    0.05
}
fn default_theta_cls() -> f64 {
    0.85
}
fn default_nms_iou() -> f64 {
    0.5
}
fn default_gamma_mode() -> GammaMode {
    GammaMode::Auto
}
fn default_seed() -> u64 {
    0
}
fn default_fusion() -> FusionKind {
    FusionKind::Weighted
}
fn default_prompt_position() -> PromptPosition {
    PromptPosition::Input
}
fn default_classifier_mode() -> ClassifierMode {
    ClassifierMode::Description
}
fn default_modality() -> Modality {
    Modality::Both
}
fn default_text_dim() -> usize {
    512
}
fn default_vocab_size() -> usize {
    49408
}
fn default_max_tokens() -> usize {
    77
}
fn default_encoder_seed() -> u64 {
    1913
}
fn default_lr() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    32
}
fn default_warmup_epochs() -> usize {
    5
}
fn default_train_epochs() -> usize {
    45
}
fn default_adapt_epochs() -> usize {
    20
}
fn default_adapt_lr() -> f64 {
    1e-2
}
fn default_gamma() -> f64 {
    1.0
}
fn default_nms_mode() -> NmsMode {
    NmsMode::Linear
}
fn default_nms_sigma() -> f64 {
    0.5
}
fn default_range_base() -> f64 {
    4.0
}
fn default_train_pooling() -> TrainPooling {
    TrainPooling::Gt
}
fn default_proposal_match_iou() -> f64 {
    0.5
}
fn default_pyramid_heads() -> usize {
    4
}

/// All tunables for the pipeline. Field names match the `config.json` keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Pyramid depth.
    #[serde(rename = "L", default = "default_levels")]
    pub levels: usize,
    /// Number of prompt vectors.
    #[serde(rename = "K", default = "default_prompt_len")]
    pub prompt_len: usize,
    /// Dimension of the shared alignment space.
    #[serde(rename = "D_align", default = "default_align_dim")]
    pub align_dim: usize,
    /// Softmax temperature for cosine scores.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Weight of the regression loss.
    #[serde(default = "default_lambda")]
    pub lambda1: f64,
    /// Weight of the classification loss.
    #[serde(default = "default_lambda")]
    pub lambda2: f64,
    /// Actionness threshold for proposal grouping.
    #[serde(default = "default_theta_loc")]
    pub theta_loc: f64,
    /// Minimum class probability for a proposal to be retained.
    #[serde(default = "default_theta_cls")]
    pub theta_cls: f64,
    /// Soft-NMS IoU threshold.
    #[serde(default = "default_nms_iou")]
    pub nms_iou: f64,
    #[serde(default = "default_gamma_mode")]
    pub gamma_mode: GammaMode,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_fusion")]
    pub fusion: FusionKind,
    #[serde(default = "default_prompt_position")]
    pub prompt_position: PromptPosition,
    #[serde(default = "default_classifier_mode")]
    pub classifier_mode: ClassifierMode,
    #[serde(default = "default_modality")]
    pub modality: Modality,

    /// Text-encoder embedding width.
    #[serde(default = "default_text_dim")]
    pub d_text: usize,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    /// Seed fixing the frozen text-encoder weights. Changing it swaps the
    /// "pretrained" encoder, so generators and consumers must agree on it.
    #[serde(default = "default_encoder_seed")]
    pub encoder_seed: u64,

    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Epochs of linear learning-rate ramp.
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    /// Epochs at full learning rate after warmup.
    #[serde(default = "default_train_epochs")]
    pub train_epochs: usize,
    #[serde(default = "default_adapt_epochs")]
    pub adapt_epochs: usize,
    #[serde(default = "default_adapt_lr")]
    pub adapt_lr: f64,
    /// Let few-shot adaptation also tune the prompt module (default: only
    /// the per-class offsets).
    #[serde(default)]
    pub adapt_prompt_module: bool,
    /// Negative weight for the detection loss when `gamma_mode` is fixed.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_nms_mode")]
    pub nms_mode: NmsMode,
    #[serde(default = "default_nms_sigma")]
    pub nms_sigma: f64,
    /// Level assignment ranges grow as range_base * 2^i snippets.
    #[serde(default = "default_range_base")]
    pub range_base: f64,
    /// Train the text encoder too (ablation; default keeps it frozen).
    #[serde(default)]
    pub end_to_end: bool,
    /// Share one pyramid between RGB and Flow (ablation).
    #[serde(default)]
    pub shared_pyramid: bool,
    #[serde(default = "default_train_pooling")]
    pub train_pooling: TrainPooling,
    /// Minimum IoU for labeling decoded proposals in proposal pooling mode.
    #[serde(default = "default_proposal_match_iou")]
    pub proposal_match_iou: f64,
    #[serde(default = "default_pyramid_heads")]
    pub pyramid_heads: usize,
    /// Use raw sums instead of means inside each loss term.
    #[serde(default)]
    pub sum_losses: bool,
    /// Pad (and mask) all videos to this many snippets when loading.
    #[serde(default)]
    pub pad_to: Option<usize>,
}

impl Default for Config {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config parses")
    }
}

impl Config {
    /// Parse a raw JSON map, rejecting unknown keys and out-of-range values.
    pub fn from_value(raw: serde_json::Value) -> Result<Config> {
        let config: Config = serde_json::from_value(raw)
            .map_err(|e| Error::validation(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Check every invariant, naming the offending key and its legal range.
    pub fn validate(&self) -> Result<()> {
        fn range_err(key: &str, message: impl Into<String>) -> Error {
            Error::ConfigRange {
                key: key.to_string(),
                message: message.into(),
            }
        }
        if self.levels < 1 {
            return Err(range_err("L", "must be >= 1"));
        }
        if self.prompt_len < 1 {
            return Err(range_err("K", "must be >= 1"));
        }
        if !(self.tau > 0.0) {
            return Err(range_err("tau", "must be > 0"));
        }
        for (key, value) in [
            ("theta_loc", self.theta_loc),
            ("theta_cls", self.theta_cls),
            ("nms_iou", self.nms_iou),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(range_err(key, "must be in [0, 1]"));
            }
        }
        for (key, value) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !value.is_finite() {
                return Err(range_err(key, "must be finite"));
            }
        }
        if self.align_dim < 1 {
            return Err(range_err("D_align", "must be >= 1"));
        }
        if self.d_text < 4 || self.d_text % 4 != 0 {
            return Err(range_err("d_text", "must be a positive multiple of 4"));
        }
        if self.vocab_size < 1 {
            return Err(range_err("vocab_size", "must be >= 1"));
        }
        if self.max_tokens < 1 {
            return Err(range_err("max_tokens", "must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(range_err("lr", "must be > 0"));
        }
        if !(self.adapt_lr > 0.0) {
            return Err(range_err("adapt_lr", "must be > 0"));
        }
        if self.batch_size < 1 {
            return Err(range_err("batch_size", "must be >= 1"));
        }
        if !(self.gamma >= 0.0) {
            return Err(range_err("gamma", "must be >= 0"));
        }
        if !(self.nms_sigma > 0.0) {
            return Err(range_err("nms_sigma", "must be > 0"));
        }
        if !(self.range_base > 0.0) {
            return Err(range_err("range_base", "must be > 0"));
        }
        if self.pyramid_heads < 1 {
            return Err(range_err("pyramid_heads", "must be >= 1"));
        }
        Ok(())
    }

    /// Load from a JSON file.
    pub fn from_file(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        Config::from_value(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_map_yields_defaults() {
        let config = Config::from_value(serde_json::json!({})).unwrap();
        assert_eq!(config.levels, 6);
        assert_eq!(config.prompt_len, 32);
        assert_eq!(config.align_dim, 1024);
        assert!((config.tau - 0.07).abs() < 1e-12);
        assert_eq!(config.lambda1, 1.0);
        assert_eq!(config.lambda2, 1.0);
        assert_eq!(config.theta_loc, 0.05);
        assert_eq!(config.theta_cls, 0.85);
        assert_eq!(config.nms_iou, 0.5);
        assert_eq!(config.d_text, 512);
        assert_eq!(config.vocab_size, 49408);
        assert_eq!(config.max_tokens, 77);
    }

    #[test]
    fn zero_tau_is_rejected() {
        let err = Config::from_value(serde_json::json!({"tau": 0.0})).unwrap_err();
        match err {
            Error::ConfigRange { key, .. } => assert_eq!(key, "tau"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn overrides_apply_and_rest_default() {
        let config = Config::from_value(serde_json::json!({"L": 3, "K": 8})).unwrap();
        assert_eq!(config.levels, 3);
        assert_eq!(config.prompt_len, 8);
        assert!((config.tau - 0.07).abs() < 1e-12);
        assert_eq!(config.align_dim, 1024);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Config::from_value(serde_json::json!({"nonsense": 1})).unwrap_err();
        assert!(err.to_string().contains("nonsense"));
    }

    #[test]
    fn threshold_out_of_range_names_key() {
        let err = Config::from_value(serde_json::json!({"theta_cls": 1.5})).unwrap_err();
        match err {
            Error::ConfigRange { key, message } => {
                assert_eq!(key, "theta_cls");
                assert!(message.contains("[0, 1]"));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn config_roundtrips_through_json() {
        let config = Config::default();
        let text = serde_json::to_string(&config).unwrap();
        let back = Config::from_value(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.levels, config.levels);
        assert_eq!(back.modality, config.modality);
    }
}
