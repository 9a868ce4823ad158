//! Run configuration: one JSON document describing data, model, solver
//! and training. Unknown keys are rejected and every default is written
//! back out, so a saved config fully describes the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_dataset, normalize, split_dataset, DatasetSplit, SplitFractions,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::solver::SolverConfig;
use crate::training::{Task, TrainingConfig};

pub const CONFIG_VERSION: u32 = 1;

fn current_version() -> u32 {
    CONFIG_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "current_version")]
    pub version: u32,
    #[serde(default)]
    pub task: Task,
    #[serde(default)]
    pub model: ModelConfig,
    /// Optional second model (typically static) for side-by-side
    /// parameter counts and overhead benchmarks.
    #[serde(default)]
    pub baseline: Option<ModelConfig>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            task: Task::default(),
            model: ModelConfig::default(),
            baseline: None,
            solver: SolverSection::default(),
            training: TrainingConfig::default(),
            data: DataConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub train: SolverConfig,
    pub eval: SolverConfig,
}

/// Exactly one of `synthetic` / `csv` is set. A missing `data` section
/// means the default synthetic set; a present one must name its source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Dataset CSV; a sibling `<stem>.heldout.csv` is merged when present.
    /// Relative paths resolve against the config file's directory.
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub split_seed: u64,
    /// Standardize features with train-set statistics.
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn yes() -> bool {
    true
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: Some(SyntheticSpec::default()),
            csv: None,
            split: SplitFractions::default(),
            split_seed: 0,
            normalize: true,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let (Some(csv), Some(dir)) = (&cfg.data.csv, path.parent()) {
            if csv.is_relative() {
                cfg.data.csv = Some(dir.join(csv));
            }
        }
        Ok(cfg)
    }

    /// Canonical form: pretty JSON with every field present.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        if let Some(b) = &self.baseline {
            b.validate()?;
            if b.n_features != self.model.n_features {
                return Err(Error::Config(
                    "baseline and model disagree on n_features".into(),
                ));
            }
        }
        self.solver.train.validate()?;
        self.solver.eval.validate()?;
        self.training.validate(&self.task)?;
        self.data.split.validate()?;
        match (&self.data.synthetic, &self.data.csv) {
            (Some(spec), None) => {
                spec.validate()?;
                if self.model.n_features != 1 {
                    return Err(Error::Config("synthetic data has one feature".into()));
                }
            }
            (None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "data needs exactly one of `synthetic` or `csv`".into(),
                ))
            }
        }
        if let Task::Extrapolation { cut } = self.task {
            if !cut.is_finite() {
                return Err(Error::Config("extrapolation cut must be finite".into()));
            }
        }
        Ok(())
    }

    /// `--seed` override: reseeds model init, shuffling and noise draws.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.training.seed = seed;
        self
    }

    /// Loads or generates the dataset, splits it and (optionally)
    /// normalizes it with train statistics.
    pub fn dataset(&self) -> Result<DatasetSplit> {
        let split = self.raw_split()?;
        if self.data.normalize {
            normalize(&split)
        } else {
            Ok(split)
        }
    }

    /// The split in original units, identity stats.
    pub fn raw_split(&self) -> Result<DatasetSplit> {
        let series = match (&self.data.synthetic, &self.data.csv) {
            (Some(spec), _) => generate_synthetic(spec)?,
            (None, Some(path)) => load_dataset(path)?.series,
            (None, None) => return Err(Error::Config("no data source".into())),
        };
        if let Some(s) = series.first() {
            if s.n_features() != self.model.n_features {
                return Err(Error::Config(format!(
                    "data has {} features, model expects {}",
                    s.n_features(),
                    self.model.n_features
                )));
            }
        }
        split_dataset(series, self.data.split, self.data.split_seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_materializes_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let text = cfg.to_json();
        for key in [
            "\"version\"",
            "\"model\"",
            "\"solver\"",
            "\"training\"",
            "\"split_seed\"",
            "\"sparsity\"",
        ] {
            assert!(text.contains(key), "{key} missing from {text}");
        }
    }

    #[test]
    fn canonical_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.training.lr = 0.04;
        cfg.baseline = Some(ModelConfig {
            temporal: false,
            ..ModelConfig::default()
        });
        let once = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(once, cfg);
        assert_eq!(once.to_json(), cfg.to_json());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            r#"{"modle": {}}"#,
            r#"{"model": {"latnet": 3}}"#,
            r#"{"training": {"lr": 0.1, "momentum": 0.9}}"#,
            r#"{"data": {"synthetic": {"grid": 10}}}"#,
        ] {
            assert!(
                matches!(RunConfig::from_json(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn invalid_combinations() {
        for bad in [
            r#"{"version": 2}"#,
            r#"{"data": {"split_seed": 3}}"#,
            r#"{"data": {"csv": "x.csv", "synthetic": {}}}"#,
            r#"{"model": {"n_features": 2}}"#,
            r#"{"training": {"decay": 1.5}}"#,
            r#"{"task": {"kind": "classification"}}"#,
        ] {
            assert!(RunConfig::from_json(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn csv_source_needs_no_synthetic_override() {
        let cfg = RunConfig::from_json(r#"{"data": {"csv": "x.csv"}}"#).unwrap();
        assert_eq!(cfg.data.synthetic, None);
        assert!(cfg.data.normalize);
    }

    #[test]
    fn synthetic_dataset_follows_split() {
        let mut cfg = RunConfig::default();
        cfg.data.synthetic.as_mut().unwrap().n_samples = 10;
        let split = cfg.dataset().unwrap();
        assert_eq!((split.train.len(), split.test.len()), (8, 2));
        assert!(!split.stats.is_identity());
    }
}
