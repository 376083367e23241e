//! Reproducible runs: JSON run configurations, the split → train → evaluate
//! pipeline, and the files a run directory holds.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_cube, load_labels, prepare, HsiCube, LabelMap, LabeledPatchSet, PadMode, Split};
use crate::error::{Error, Result};
use crate::net::{checkpoint, NetworkConfig, NetworkParams};
use crate::train::{evaluate, train, History, Metrics, TrainConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const RUN_FILE: &str = "run.json";
pub const HISTORY_FILE: &str = "history.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const CHECKPOINT_FILE: &str = "model.wcnq";

/// Everything a training run depends on. `seed` drives the split, the
/// initial parameters and the shuffling order (`train.seed` is overwritten
/// with it when the configuration is resolved).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub cube: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Odd patch side `M`.
    pub block: usize,
    pub pad: PadMode,
    /// Train, validation and test shares.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            cube: None,
            labels: None,
            block: 11,
            pad: PadMode::Zero,
            ratios: [6.0, 1.0, 3.0],
            seed: 42,
        }
    }
}

impl RunConfig {
    /// The single-core configuration used for the synthetic benchmark.
    pub fn desk() -> Self {
        Self {
            network: NetworkConfig::desk(5, [32, 9, 9]),
            train: TrainConfig {
                epochs: 6,
                lr: 5e-3,
                ..TrainConfig::default()
            },
            block: 9,
            ..Self::default()
        }
    }

    /// Parses a JSON configuration; errors carry the line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.block % 2 == 0 {
            return bad(format!("block = {} must be odd", self.block));
        }
        if self.ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || self.ratios[0] <= 0.0 {
            return bad(format!("ratios {:?} must be non-negative with a positive train share", self.ratios));
        }
        if self.train.epochs > 0 {
            self.train.validate()?;
        }
        for (what, p) in [("cube", &self.cube), ("labels", &self.labels)] {
            match p {
                None => return bad(format!("no {what} file given")),
                Some(p) if !p.is_file() => return bad(format!("{what} file {} does not exist", p.display())),
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Fixes the data-driven network fields and the shuffle seed.
    pub fn resolve(&mut self, set: &LabeledPatchSet) {
        self.network.input = set.patch_extent();
        self.network.classes = set.classes;
        self.train.seed = self.seed;
    }

    pub fn load_data(&self) -> Result<(HsiCube, LabelMap)> {
        self.validate()?;
        let cube = load_cube(self.cube.as_deref().expect("validated"))?;
        let labels = load_labels(self.labels.as_deref().expect("validated"))?;
        Ok((cube, labels))
    }

    pub fn patch_set(&self, cube: &HsiCube, labels: &LabelMap) -> Result<LabeledPatchSet> {
        Ok(prepare(cube, labels, self.block, self.pad, self.ratios, self.seed)?.0)
    }
}

/// Metrics of every non-empty split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub splits: Vec<Metrics>,
}

impl RunMetrics {
    pub fn get(&self, split: Split) -> Option<&Metrics> {
        self.splits.iter().find(|m| m.split == split)
    }
}

/// Facts about a run that are not needed to reproduce its numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunInfo {
    pub version: String,
    pub seed: u64,
    pub samples: usize,
    pub trainable_parameters: usize,
    pub seconds: f64,
}

pub struct RunOutcome {
    /// Resolved configuration.
    pub config: RunConfig,
    /// Best-validation parameters rounded to 32-bit, as checkpointed.
    pub params: NetworkParams,
    pub history: History,
    pub metrics: RunMetrics,
    pub info: RunInfo,
}

pub fn version_string() -> String {
    format!("wcnet {}", env!("CARGO_PKG_VERSION"))
}

pub fn evaluate_splits(params: &NetworkParams, cfg: &NetworkConfig, set: &LabeledPatchSet) -> Result<RunMetrics> {
    let mut splits = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        if !set.indices(split).is_empty() {
            splits.push(evaluate(params, cfg, set, split)?);
        }
    }
    Ok(RunMetrics { splits })
}

/// Splits, trains (skipped when `train.epochs == 0`), rounds the kept
/// parameters to 32-bit and evaluates them on every split. With `out`, the
/// run directory is written as well.
pub fn train_run(cfg: &RunConfig, cube: &HsiCube, labels: &LabelMap, out: Option<&Path>) -> Result<RunOutcome> {
    let start = std::time::Instant::now();
    let set = cfg.patch_set(cube, labels)?;
    let mut cfg = cfg.clone();
    cfg.resolve(&set);
    cfg.network.validate()?;
    let init = NetworkParams::build(&cfg.network, cfg.seed)?;
    let (mut params, history) = if cfg.train.epochs == 0 {
        (init, History::default())
    } else {
        train(&cfg.network, init, &set, &cfg.train)?
    };
    params.quantize_f32();
    let metrics = evaluate_splits(&params, &cfg.network, &set)?;
    let info = RunInfo {
        version: version_string(),
        seed: cfg.seed,
        samples: set.len(),
        trainable_parameters: params.trainable_count(),
        seconds: start.elapsed().as_secs_f64(),
    };
    let outcome = RunOutcome {
        config: cfg,
        params,
        history,
        metrics,
        info,
    };
    if let Some(dir) = out {
        write_run_dir(&outcome, dir)?;
    }
    Ok(outcome)
}

pub fn write_run_dir(run: &RunOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), run.config.to_json() + "\n")?;
    fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(&run.info)? + "\n")?;
    fs::write(dir.join(HISTORY_FILE), serde_json::to_string_pretty(&run.history)? + "\n")?;
    fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&run.metrics)? + "\n")?;
    if let Some(m) = run.metrics.get(Split::Test) {
        fs::write(dir.join(CONFUSION_FILE), m.confusion.to_csv())?;
    }
    checkpoint::save(&run.params, &dir.join(CHECKPOINT_FILE))
}

/// Evaluates a checkpoint on one split of the data described by `cfg`,
/// which must be the resolved configuration the checkpoint was trained with.
pub fn eval_checkpoint(cfg: &RunConfig, checkpoint_path: &Path, split: Split) -> Result<Metrics> {
    let (cube, labels) = cfg.load_data()?;
    let set = cfg.patch_set(&cube, &labels)?;
    let mut resolved = cfg.clone();
    resolved.resolve(&set);
    if resolved.network != cfg.network {
        return Err(Error::Config(
            "the data does not match the network recorded in the configuration".into(),
        ));
    }
    let params = checkpoint::load(&cfg.network, checkpoint_path)?;
    evaluate(&params, &cfg.network, &set, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_reports_lines() {
        let cfg = RunConfig::desk();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let err = RunConfig::from_json("{\n  \"block\": 9,\n  \"blok\": 3\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        let partial = RunConfig::from_json(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.lr, TrainConfig::default().lr);
    }

    #[test]
    fn validation_rejects_even_blocks_and_missing_files() {
        let mut cfg = RunConfig::desk();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.cube = Some("/nonexistent/cube.hsic".into());
        cfg.labels = Some("/nonexistent/labels.hsil".into());
        assert!(cfg.validate().unwrap_err().to_string().contains("does not exist"));
        cfg.block = 8;
        assert!(cfg.validate().unwrap_err().to_string().contains("odd"));
    }
}
