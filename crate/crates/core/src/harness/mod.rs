//! Reproducible runs: dataset preparation, training, prediction, evaluation,
//! gradient checks and the component / fusion ablation.
//!
//! Every command takes a [`RunConfig`] (TOML on disk), validates it up front and
//! writes its files through an [`Outputs`] guard, so a failed command leaves no
//! partial results behind.

mod ablation;
mod data;
mod gradcheck;
mod predict;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use ablation::{cmd_ablation, AblationReport, AblationRow, AblationSpec, Variant};
pub use data::{
    batch_tensors, cmd_prepare, overfit_fixture, sample_digest, Dataset, Manifest, SampleEntry,
    Split, VolumeEntry, MANIFEST_FILE,
};
pub use gradcheck::{cmd_gradcheck, toy_network, GradcheckConfig, GradcheckReport, GradcheckRow};
pub use predict::{
    cmd_edge_gt, cmd_evaluate, cmd_predict, evaluate_samples, predict_volume, predicted_mask,
    Prediction,
};
pub use train::{check_report, cmd_train, LogRecord, TrainSummary, Trainer};

use crate::autodiff::optim::AdamConfig;
use crate::error::{Error, Result};
use crate::imaging::EdgeGtParams;
use crate::losses::LossWeights;
use crate::network::NetworkConfig;
use crate::volume::{save_volume, volume_paths, write_atomic, PhantomConfig, Volume, HU_HI, HU_LO};

/// Overrides both the run seed and the network initialization seed.
pub const SEED_ENV: &str = "ASFSEG_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives the split, batch sampling and phantom generation.
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub loss: LossWeights,
    pub optimizer: AdamConfig,
    pub schedule: Schedule,
    pub edge_gt: EdgeGtParams,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            network: NetworkConfig::default(),
            loss: LossWeights::default(),
            optimizer: AdamConfig::default(),
            schedule: Schedule::default(),
            edge_gt: EdgeGtParams::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Prepared dataset (written by `prepare`, read by `train`).
    pub data_dir: PathBuf,
    /// Checkpoints, logs and reports.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "data".into(),
            out_dir: "runs/default".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of synthetic phantoms to generate.
    pub phantoms: usize,
    pub phantom: PhantomConfig,
    /// Externally provided image/mask volume pairs, in Hounsfield units.
    pub volumes: Vec<VolumePair>,
    /// HU window applied to provided volumes (phantoms are already in [0, 1]).
    pub hu_window: [f32; 2],
    /// Fractions of volumes assigned to the train and validation splits; the
    /// remainder is the test split.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            phantoms: 2,
            phantom: PhantomConfig::default(),
            volumes: Vec::new(),
            hu_window: [HU_LO, HU_HI],
            train_fraction: 0.5,
            val_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumePair {
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub steps: u64,
    /// Tile-triples per step.
    pub batch_size: usize,
    pub log_interval: u64,
    /// Steps between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            steps: 300,
            batch_size: 4,
            log_interval: 1,
            checkpoint_interval: 100,
        }
    }
}

impl RunConfig {
    /// Parses a TOML config, applies the seed override from the environment
    /// and validates every section.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Format { msg, .. } => Error::format(path, msg),
            e => e,
        })?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("<config>", e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v.trim().parse::<u64>().map_err(|_| {
                Error::config(SEED_ENV, format!("expected an unsigned integer, got `{v}`"))
            })?;
            self.set_seed(seed);
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.network.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.edge_gt.validate()?;
        self.gradcheck.validate()?;
        if let Some((field, msg)) = self.data.phantom.problem() {
            return Err(Error::config(format!("data.phantom.{field}"), msg));
        }
        let s = &self.schedule;
        if s.batch_size == 0 {
            return Err(Error::config("schedule.batch_size", "must be positive"));
        }
        if s.log_interval == 0 {
            return Err(Error::config("schedule.log_interval", "must be positive"));
        }
        let d = &self.data;
        if d.phantoms == 0 && d.volumes.is_empty() {
            return Err(Error::config(
                "data.phantoms",
                "need at least one phantom or provided volume",
            ));
        }
        if !(d.hu_window[0] < d.hu_window[1]) {
            return Err(Error::config("data.hu_window", "lower bound must be below upper"));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction <= 1.0) {
            return Err(Error::config("data.train_fraction", "must lie in (0, 1]"));
        }
        if !(d.val_fraction >= 0.0 && d.train_fraction + d.val_fraction <= 1.0) {
            return Err(Error::config(
                "data.val_fraction",
                "must be non-negative with train_fraction + val_fraction <= 1",
            ));
        }
        for (field, p) in [
            ("paths.data_dir", &self.paths.data_dir),
            ("paths.out_dir", &self.paths.out_dir),
        ] {
            if p.as_os_str().is_empty() {
                return Err(Error::config(field, "must not be empty"));
            }
        }
        Ok(())
    }
}

/// Files written by one command. Unless [`Outputs::commit`] is called, every
/// file and directory the guard created is removed again on drop, and files
/// it overwrote get their previous contents back.
#[derive(Debug, Default)]
pub struct Outputs {
    /// Written paths with the bytes they held before, if any.
    files: Vec<(PathBuf, Option<Vec<u8>>)>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_dir(&mut self, dir: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(d) = cur.filter(|d| !d.as_os_str().is_empty() && !d.exists()) {
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        // Deepest last, so rollback can remove them in reverse order.
        self.dirs.extend(missing.into_iter().rev());
        Ok(())
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent() {
            self.create_dir(dir)?;
        }
        self.remember(path);
        write_atomic(path, bytes)?;
        Ok(())
    }

    pub fn save_volume(&mut self, name: &Path, v: &Volume) -> Result<()> {
        if let Some(dir) = name.parent() {
            self.create_dir(dir)?;
        }
        let (json, raw) = volume_paths(name);
        self.remember(&raw);
        self.remember(&json);
        save_volume(name, v)
    }

    fn remember(&mut self, path: &Path) {
        if !self.files.iter().any(|(p, _)| p == path) {
            self.files.push((path.to_path_buf(), fs::read(path).ok()));
        }
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for (f, old) in self.files.iter().rev() {
            let _ = match old {
                Some(bytes) => fs::write(f, bytes),
                None => fs::remove_file(f),
            };
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}
