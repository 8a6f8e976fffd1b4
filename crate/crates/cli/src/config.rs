//! Run configuration: a JSON file whose every field has a default except
//! the seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seroifr_core::age_density::DEFAULT_LOESS_SPAN;
use seroifr_core::data::DatasetPaths;
use seroifr_core::diagnostics::Thresholds;
use seroifr_core::model::ModelSpec;
use seroifr_core::sampler::SamplerConfig;
use seroifr_core::summaries::IfrWeighting;
use seroifr_core::synthetic::SyntheticDesign;

use crate::CliError;

/// Input tables. `dir` supplies the standard file names; any explicit path
/// overrides its entry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub serology: Option<PathBuf>,
    pub deaths: Option<PathBuf>,
    pub tests: Option<PathBuf>,
    pub locations: Option<PathBuf>,
    pub population: Option<PathBuf>,
    pub national_population: Option<PathBuf>,
}

impl DataConfig {
    pub fn paths(&self) -> Result<DatasetPaths, CliError> {
        let base = self.dir.as_ref().map(DatasetPaths::in_dir);
        let pick = |explicit: &Option<PathBuf>, from_dir: Option<&PathBuf>, field: &str| {
            explicit
                .clone()
                .or_else(|| from_dir.cloned())
                .ok_or_else(|| CliError::Config(format!("data.{field}: no path and no data.dir")))
        };
        Ok(DatasetPaths {
            serology: pick(&self.serology, base.as_ref().map(|b| &b.serology), "serology")?,
            deaths: pick(&self.deaths, base.as_ref().map(|b| &b.deaths), "deaths")?,
            tests: pick(&self.tests, base.as_ref().map(|b| &b.tests), "tests")?,
            locations: pick(&self.locations, base.as_ref().map(|b| &b.locations), "locations")?,
            population: pick(&self.population, base.as_ref().map(|b| &b.population), "population")?,
            national_population: pick(
                &self.national_population,
                base.as_ref().map(|b| &b.national_population),
                "national_population",
            )?,
        })
    }

    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.dir,
            &mut self.serology,
            &mut self.deaths,
            &mut self.tests,
            &mut self.locations,
            &mut self.population,
            &mut self.national_population,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Sampler settings without the seed, which lives at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub init_jitter: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            chains: d.chains,
            warmup: d.warmup,
            samples: d.samples,
            target_accept: d.target_accept,
            max_tree_depth: d.max_tree_depth,
            init_jitter: d.init_jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<DataConfig>,
    /// Design used by `simulate` when no data tables are given.
    pub synthetic: Option<SyntheticDesign>,
    pub model: ModelSpec,
    pub sampler: SamplerSettings,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    /// Reference IFR at age 60 for the benchmark flag.
    pub benchmark_ifr_60: Option<f64>,
    pub loess_span: f64,
    pub ifr_weighting: IfrWeighting,
    pub thresholds: Thresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            synthetic: None,
            model: ModelSpec::default(),
            sampler: SamplerSettings::default(),
            seed: None,
            out_dir: None,
            benchmark_ifr_60: None,
            loess_span: DEFAULT_LOESS_SPAN,
            ifr_weighting: IfrWeighting::default(),
            thresholds: Thresholds::default(),
        }
    }
}

impl RunConfig {
    /// Parses `path`; relative data paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(d) = cfg.data.as_mut() {
            d.resolve(base);
        }
        if let Some(out) = cfg.out_dir.as_mut() {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model
            .validate()
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.sampler_config(0)
            .validate()
            .map_err(|e| CliError::Config(format!("sampler: {e}")))?;
        if !(self.loess_span.is_finite() && self.loess_span > 0.0) {
            return Err(CliError::Config("loess_span: must be positive".into()));
        }
        if let Some(b) = self.benchmark_ifr_60 {
            if !(b > 0.0 && b < 1.0) {
                return Err(CliError::Config("benchmark_ifr_60: must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config("seed: required, set it in the config or pass --seed".into()))
    }

    pub fn sampler_config(&self, seed: u64) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            chains: s.chains,
            warmup: s.warmup,
            samples: s.samples,
            target_accept: s.target_accept,
            max_tree_depth: s.max_tree_depth,
            seed,
            init_jitter: s.init_jitter,
        }
    }
}
