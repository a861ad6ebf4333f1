//! Run configuration: one JSON document, every key defaulted.

use serde::{Deserialize, Serialize};
use vcsl_core::attention::AttentionConfig;
use vcsl_core::encoder::EncoderConfig;
use vcsl_core::losses::LossConfig;
use vcsl_core::masked::MaskConfig;
use vcsl_core::probe::ProbeConfig;
use vcsl_core::training::corpus::SyntheticCorpusSpec;
use vcsl_core::training::{ModelConfig, StageConfig, TrainConfig};

use crate::CliError;

/// Appendix-scale settings. Shipped for reference only; no test runs them.
pub const PAPER_PRESET: &str = include_str!("../configs/paper-preset.json");

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub corpus: SyntheticCorpusSpec,
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub losses: LossConfig,
    pub mask: MaskConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    /// Parses and validates. Errors carry the JSON pointer of the offending
    /// key.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| CliError::Schema {
            pointer: to_pointer(&e.path().to_string()),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let at = |pointer: &str| {
            let pointer = pointer.to_string();
            move |e: vcsl_core::Error| CliError::Schema { pointer, message: e.to_string() }
        };
        self.corpus.validate().map_err(at("/corpus"))?;
        self.encoder.validate().map_err(at("/encoder"))?;
        if self.encoder.input_extent != self.corpus.extent {
            return Err(schema(
                "/encoder/input_extent",
                format!("{} differs from corpus extent {}", self.encoder.input_extent, self.corpus.extent),
            ));
        }
        self.attention.validate(self.encoder.feature_width).map_err(at("/attention"))?;
        let seq = self.corpus.slices * self.encoder.taps;
        if seq < self.attention.min_sequence() {
            return Err(schema(
                "/attention/blocks",
                format!(
                    "{} blocks need sequences of {} rows, volumes give {seq}",
                    self.attention.blocks,
                    self.attention.min_sequence()
                ),
            ));
        }
        self.losses.validate().map_err(at("/losses"))?;
        if !(self.mask.ratio > 0.0 && self.mask.ratio <= 1.0) {
            return Err(schema("/mask/ratio", format!("{} outside (0, 1]", self.mask.ratio)));
        }
        if !(self.train.learning_rate > 0.0) {
            return Err(schema("/train/learning_rate", format!("{} is not positive", self.train.learning_rate)));
        }
        self.train.validate().map_err(at("/train"))?;
        self.probe.validate().map_err(at("/probe"))?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            attention: self.attention.clone(),
            prototypes: self.losses.prototypes,
            separate_volume_prototypes: self.losses.separate_volume_prototypes,
            slices: self.corpus.slices,
        }
    }

    pub fn stage_config(&self) -> StageConfig {
        StageConfig { train: self.train.clone(), losses: self.losses.clone(), mask: self.mask.clone() }
    }

    /// Applies `VCSL_SEED` when set. Returns whether it was applied.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<bool, CliError> {
        let Some(v) = value else { return Ok(false) };
        self.train.seed = v.trim().parse().map_err(|_| CliError::Schema {
            pointer: "/train/seed".into(),
            message: format!("VCSL_SEED `{v}` is not a u64"),
        })?;
        Ok(true)
    }
}

fn schema(pointer: &str, message: String) -> CliError {
    CliError::Schema { pointer: pointer.into(), message }
}

/// `train.epochs` or `corpus.volumes_per_dataset[1]` to `/train/epochs` or
/// `/corpus/volumes_per_dataset/1`.
fn to_pointer(path: &str) -> String {
    if path == "." || path.is_empty() {
        return String::new();
    }
    let mut out = String::new();
    for part in path.split('.') {
        let (key, rest) = part.split_once('[').map_or((part, ""), |(k, r)| (k, r));
        if !key.is_empty() {
            out.push('/');
            out.push_str(&key.replace('~', "~0").replace('/', "~1"));
        }
        for idx in rest.split('[').filter(|s| !s.is_empty()) {
            out.push('/');
            out.push_str(idx.trim_end_matches(']'));
        }
    }
    out
}
