//! Run configuration: a single JSON document with sections mirroring
//! the library modules.
//!
//! `seed` is the only mandatory field. File paths (`gmm`, `dataset`)
//! are resolved relative to the configuration file's directory and
//! must exist when the file is loaded; `output_dir` is created on
//! demand by commands that write into it.

use crate::dataset::{read_svl, Dataset};
use crate::error::{Error, Result};
use crate::gmm::GmmSpec;
use crate::nn::TrainConfig;
use crate::profiler::{McBudget, Normalization};
use crate::schedules::Schedule;
use crate::solvers::SolverPlan;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Monte Carlo settings for the variance estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilerSettings {
    /// Outer probe count per grid point.
    #[serde(default = "default_probes")]
    pub probes: usize,
    /// Inner draws per probe.
    #[serde(default = "default_inner")]
    pub inner: usize,
    #[serde(default = "default_normalization")]
    pub normalization: Normalization,
}

fn default_probes() -> usize {
    crate::profiler::DEFAULT_CFM_PROBES
}

fn default_inner() -> usize {
    1
}

fn default_normalization() -> Normalization {
    Normalization::SqrtD
}

impl Default for ProfilerSettings {
    fn default() -> Self {
        ProfilerSettings {
            probes: default_probes(),
            inner: default_inner(),
            normalization: default_normalization(),
        }
    }
}

impl ProfilerSettings {
    pub fn budget(&self) -> McBudget {
        McBudget {
            probes: self.probes,
            inner: self.inner,
        }
    }
}

/// Top-level run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random draw in a command descends from it.
    pub seed: u64,
    #[serde(default = "Schedule::linear")]
    pub schedule: Schedule,
    /// Path to a mixture-spec JSON file (exact oracle available).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gmm: Option<PathBuf>,
    /// Path to an SVL1 dataset (empirical estimators available).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverPlan>,
    #[serde(default)]
    pub profiler: ProfilerSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Minimal config: a seed with every other section defaulted.
    pub fn new(seed: u64) -> Self {
        RunConfig {
            seed,
            schedule: Schedule::linear(),
            gmm: None,
            dataset: None,
            train: None,
            solver: None,
            profiler: ProfilerSettings::default(),
            output_dir: None,
        }
    }

    /// Checks every section against the schedule.
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if let Some(train) = &self.train {
            train.validate(&self.schedule)?;
        }
        if let Some(plan) = &self.solver {
            plan.validate(&self.schedule)?;
        }
        self.budget().validate()?;
        Ok(())
    }

    pub fn budget(&self) -> McBudget {
        self.profiler.budget()
    }

    /// Rewrites relative paths against `base` and checks that the
    /// input files exist. `output_dir` is resolved but not required
    /// to exist.
    fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        for (name, slot) in [("gmm", &mut self.gmm), ("dataset", &mut self.dataset)] {
            if let Some(p) = slot {
                let resolved = if p.is_absolute() {
                    p.clone()
                } else {
                    base.join(&p)
                };
                if !resolved.is_file() {
                    return Err(Error::Config(format!(
                        "{name} file {} does not exist",
                        resolved.display()
                    )));
                }
                *slot = Some(resolved);
            }
        }
        if let Some(dir) = &mut self.output_dir {
            if !dir.is_absolute() {
                *dir = base.join(&dir);
            }
        }
        Ok(())
    }

    /// Loads, resolves, and validates a configuration file.
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base)?;
        config.validate()?;
        Ok(config)
    }

    /// The mixture spec, loaded from the `gmm` path.
    pub fn load_gmm(&self) -> Result<Option<GmmSpec>> {
        match &self.gmm {
            None => Ok(None),
            Some(p) => Ok(Some(GmmSpec::from_json_file(p)?)),
        }
    }

    /// The mixture spec, required.
    pub fn require_gmm(&self) -> Result<GmmSpec> {
        match self.load_gmm()? {
            Some(spec) => Ok(spec),
            None => Err(Error::Config(
                "this command needs a `gmm` entry in the config".into(),
            )),
        }
    }

    /// The dataset, required.
    pub fn require_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            Some(p) => read_svl(p),
            None => Err(Error::Config(
                "this command needs a `dataset` entry in the config".into(),
            )),
        }
    }
}
