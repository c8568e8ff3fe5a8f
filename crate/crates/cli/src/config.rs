//! Run configuration: one JSON document with a section per pipeline
//! stage. Unknown keys are rejected with their full field path.

use fli_core::error::{Error, Result};
use fli_core::fit::image::IrfSource;
use fli_core::fit::FitModelSpec;
use fli_core::model::ModelConfig;
use fli_core::sim::{PhantomScene, SimConfig};
use fli_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// Procedural stroke scenes (parameters drawn per pixel).
    #[default]
    Strokes,
    /// Masks from an IDX image file, lifetimes drawn per pixel.
    Idx,
    /// The step-ladder phantom.
    Phantom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub scene: SceneKind,
    pub sim: SimConfig,
    pub phantom: PhantomScene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub spec: FitModelSpec,
    pub irf: IrfSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Emit per-region SVG plots next to the report CSV.
    pub svg: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { svg: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub simulate: SimulateSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fit: FitSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        Ok(cfg)
    }

    /// Apply the global seed to every stage that draws randomness.
    pub fn apply_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    /// Compact one-line JSON for provenance comments.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| "{}".to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_parse_and_echo() {
        let cfg = RunConfig::default();
        let text = cfg.echo();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_reports_field_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        let mut f = std::fs::File::create(&p).unwrap();
        write!(f, r#"{{"simulate": {{"sim": {{"samplez": 3}}}}}}"#).unwrap();
        drop(f);
        let err = RunConfig::load(Some(&p)).unwrap_err();
        match err {
            Error::Config { field, message } => {
                assert!(field.contains("simulate.sim"), "path: {field}");
                assert!(message.contains("samplez"), "message: {message}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn partial_configs_keep_defaults_elsewhere() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"model": {"d_model": 32}}"#).unwrap();
        let cfg = RunConfig::load(Some(&p)).unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.heads, 4);
        assert_eq!(cfg.simulate.sim.gates, 176);
    }
}
