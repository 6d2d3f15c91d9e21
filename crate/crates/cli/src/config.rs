//! Run configuration: one strict JSON document covering model, training and
//! task. Unknown keys are rejected — a typo in an experiment config should
//! fail loudly, not silently fall back to a default.

use serde::Deserialize;

use pointer_core::pointer::ModelConfig;
use pointer_core::train::TrainConfig;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Architecture shared by both model kinds. Every field has a default;
    /// vocab_size/max_seq_len left at 0 derive from the task.
    #[serde(default)]
    pub model: ModelConfig,
    /// Optimization, schedule and task. `train.task.kind` and
    /// `train.task.payload_symbols` are the only required fields.
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_path(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| format!("invalid config: {e}"))?;
        cfg.train.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}
