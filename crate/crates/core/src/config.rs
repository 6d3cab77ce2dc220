//! Run configuration: one TOML document covering world, data, model,
//! training and evaluation settings. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::fnv1a64;
use crate::dataset::{GenConfig, PrepOptions};
use crate::error::{Error, Result};
use crate::eval::RunSpec;
use crate::model::{AblationConfig, InputGeometry, LabelSpace};
use crate::train::TrainConfig;
use crate::world::WorldConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub geometry: InputGeometry,
    pub ablation: AblationConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch: usize,
    pub folds: usize,
    pub fold_seed: u64,
    pub ablation_seeds: Vec<u64>,
    /// Fraction of the dataset used for testing in ablation and robustness runs.
    pub test_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            folds: 5,
            fold_seed: 0,
            ablation_seeds: vec![0, 1, 2],
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub data: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let key = e.span().map(|s| key_at(text, s.start)).unwrap_or_default();
            Error::Config {
                key,
                detail: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Stable hash of the resolved configuration.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_toml().as_bytes())
    }

    pub fn label_space(&self) -> LabelSpace {
        self.world.label_space()
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.data.mix.validate()?;
        self.train.validate()?;
        let bad = |key: &str, detail: &str| {
            Err(Error::Config {
                key: key.into(),
                detail: detail.into(),
            })
        };
        if self.data.samples == 0 {
            return bad("data.samples", "must be at least 1");
        }
        let g = &self.model.geometry;
        if g.frame_h == 0 || g.frame_w == 0 || g.crop_h == 0 || g.crop_w == 0 {
            return bad("model.geometry", "extents must be positive");
        }
        if g.hidden == 0 {
            return bad("model.geometry.hidden", "must be at least 1");
        }
        if self.eval.batch == 0 {
            return bad("eval.batch", "must be at least 1");
        }
        if self.eval.folds < 2 {
            return bad("eval.folds", "must be at least 2");
        }
        if self.eval.ablation_seeds.is_empty() {
            return bad("eval.ablation_seeds", "needs at least one seed");
        }
        if !(self.eval.test_fraction > 0.0 && self.eval.test_fraction < 1.0) {
            return bad("eval.test_fraction", "must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            geometry: self.model.geometry,
            ablation: self.model.ablation,
            model_seed: self.model.seed,
            train: self.train.clone(),
            eval_batch: self.eval.batch,
        }
    }

    pub fn prep_options(&self) -> PrepOptions {
        self.run_spec().opts()
    }
}

/// Dotted key path for the TOML line containing byte `pos`.
fn key_at(text: &str, pos: usize) -> String {
    let pos = pos.min(text.len());
    let mut table = String::new();
    let mut key = String::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let t = line.trim();
        let header = t.starts_with('[');
        if header {
            table = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
        if pos < offset + line.len() {
            if !header {
                key = t.split('=').next().unwrap_or("").trim().to_string();
            }
            break;
        }
        offset += line.len();
    }
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[train]\nmax_epochs = 3\nlearning_rate = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate"), "{msg}");
    }

    #[test]
    fn type_error_names_key() {
        let err = RunConfig::from_toml("[train]\nbatch_size = \"big\"\n").unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "train.batch_size"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn invalid_value_is_named() {
        let err = RunConfig::from_toml("[eval]\nfolds = 1\n").unwrap_err();
        assert!(err.to_string().contains("eval.folds"), "{err}");
    }
}
