//! Run configuration: the JSON file format, defaults, seed resolution, and
//! the resolved-config echo that every command writes next to its outputs.
//!
//! Unknown fields are rejected so typos fail loudly instead of silently
//! running defaults. Every command echoes its fully resolved configuration
//! (including the seed actually used and the tool version) to
//! `<command>.config.json` in the output directory; re-running a command
//! against that echo reproduces the run bitwise.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, KnnTable, Source};
use crate::error::{Error, Result};
use crate::eval::GradVarMode;
use crate::numeric::Point;
use crate::posterior::{build_pools, PoolProvider, Pools, RotateAboutCentroid};
use crate::rng::SeededRng;
use crate::train::{Objective, TrainOptions};

/// Environment variable consulted when neither the command line nor the
/// config file provides a seed.
pub const SEED_ENV_VAR: &str = "FLOWBENCH_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Config-file seed; the command line overrides it, the environment is
    /// consulted only when both are absent.
    pub seed: Option<u64>,
    pub dataset: DatasetConfig,
    pub pools: PoolsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: None,
            dataset: DatasetConfig::default(),
            pools: PoolsConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    GaussianMixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n_per_class: usize,
    pub noise_std: f64,
    /// Mixture centers, one point per row; ignored for two_moons.
    pub centers: Vec<Vec<f64>>,
    /// Per-center standard deviations; ignored for two_moons.
    pub center_stds: Vec<f64>,
    pub source_mean: Vec<f64>,
    pub source_std: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::TwoMoons,
            n_per_class: 1000,
            noise_std: 0.05,
            centers: Vec::new(),
            center_stds: Vec::new(),
            source_mean: vec![0.0, 3.0],
            source_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Full,
    Knn,
    Perturbation,
    Augmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolsConfig {
    pub provider: ProviderKind,
    /// Candidates per pool, owner included, for the knn, perturbation, and
    /// augmentation providers.
    pub k: usize,
    /// Perturbation scale.
    pub sigma: f64,
    /// Base rotation angle (radians) for the augmentation provider.
    pub angle: f64,
    /// Neighbor table CSV produced by `precompute`; required by the knn
    /// provider, ignored by the rest.
    pub candidates_file: Option<PathBuf>,
}

impl Default for PoolsConfig {
    fn default() -> Self {
        PoolsConfig {
            provider: ProviderKind::Full,
            k: 16,
            sigma: 0.1,
            angle: 0.1,
            candidates_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed_width: usize,
    pub omega_max: f64,
    pub conditioned: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: crate::model::DEFAULT_HIDDEN,
            embed_width: crate::model::DEFAULT_EMBED_WIDTH,
            omega_max: crate::model::DEFAULT_OMEGA_MAX,
            conditioned: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub t_eps: f64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Fm,
            steps: 50_000,
            batch_size: 256,
            lr0: 5e-4,
            t_eps: crate::path::DEFAULT_T_EPS,
            eval_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub n_samples: usize,
    pub n_steps: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { n_samples: 5000, n_steps: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub grid_pairs: usize,
    pub grid_times: usize,
    pub gradvar_batches: usize,
    pub gradvar_batch_size: usize,
    pub gradvar_mode: GradVarMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            grid_pairs: crate::eval::GRID_PAIRS,
            grid_times: crate::eval::GRID_TIMES,
            gradvar_batches: 500,
            gradvar_batch_size: 256,
            gradvar_mode: GradVarMode::Resampled,
        }
    }
}

impl Config {
    /// Reads a config file, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Config::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Command-level validation beyond what the library enforces per call.
    pub fn validate(&self) -> Result<()> {
        if self.train.steps < 1 {
            return Err(Error::config("train.steps must be at least 1"));
        }
        if self.dataset.source_mean.is_empty() {
            return Err(Error::config("dataset.source_mean must not be empty"));
        }
        if self.sample.n_steps < 1 {
            return Err(Error::config("sample.n_steps must be at least 1"));
        }
        if self.eval.grid_pairs < 1 || self.eval.grid_times < 1 {
            return Err(Error::config("eval grid sizes must be at least 1"));
        }
        if self.eval.gradvar_batches < 2 {
            return Err(Error::config("eval.gradvar_batches must be at least 2"));
        }
        Ok(())
    }

    /// Maps the training section onto library options.
    pub fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            objective: self.train.objective,
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            lr0: self.train.lr0,
            t_eps: self.train.t_eps,
            eval_every: self.train.eval_every,
            seed,
            hidden: self.model.hidden,
            embed_width: self.model.embed_width,
            omega_max: self.model.omega_max,
            conditioned: self.model.conditioned,
        }
    }

    /// Generates the configured dataset from the stream (seed, "data", 0)
    /// and attaches the configured source distribution.
    pub fn build_dataset(&self, seed: u64) -> Result<Dataset> {
        let mut rng = SeededRng::derived(seed, "data", 0);
        let ds = match self.dataset.kind {
            DatasetKind::TwoMoons => {
                crate::data::gen_two_moons(self.dataset.n_per_class, self.dataset.noise_std, &mut rng)?
            }
            DatasetKind::GaussianMixture => {
                let centers: Vec<Point> = self
                    .dataset
                    .centers
                    .iter()
                    .map(|c| Point::checked(c.clone()))
                    .collect::<Result<_>>()?;
                crate::data::gen_gaussian_mixture(
                    &centers,
                    &self.dataset.center_stds,
                    self.dataset.n_per_class,
                    &mut rng,
                )?
            }
        };
        let mean = Point::checked(self.dataset.source_mean.clone())?;
        if mean.dim() != ds.dim() {
            return Err(Error::config(format!(
                "source mean has dimension {}, dataset has {}",
                mean.dim(),
                ds.dim()
            )));
        }
        let source = Source::new(mean, self.dataset.source_std)?;
        ds.with_source(source)
    }

    /// Builds candidate pools per the pools section. The knn provider needs
    /// the precomputed neighbor table; other providers ignore it.
    pub fn build_pools(
        &self,
        dataset: &Dataset,
        knn: Option<&KnnTable>,
        seed: u64,
    ) -> Result<Pools> {
        let provider = match self.pools.provider {
            ProviderKind::Full => PoolProvider::FullSupport,
            ProviderKind::Knn => match knn {
                Some(table) => PoolProvider::Knn(table),
                None => {
                    return Err(Error::config(
                        "the knn provider needs a candidates file from `precompute`",
                    ))
                }
            },
            ProviderKind::Perturbation => PoolProvider::Perturbation {
                k: self.pools.k,
                sigma: self.pools.sigma,
            },
            ProviderKind::Augmentation => {
                let augment = RotateAboutCentroid::new(dataset.centroid(), self.pools.angle);
                return build_pools(
                    dataset,
                    PoolProvider::Augmentation { k: self.pools.k, augment: &augment },
                    self.model.conditioned,
                    seed,
                );
            }
        };
        build_pools(dataset, provider, self.model.conditioned, seed)
    }
}

/// Applies the seed precedence: command line, then config file, then the
/// environment, then 0. Returns the chosen seed plus a warning to print on
/// stderr when an environment seed was present but lost to a higher
/// precedence source.
pub fn resolve_seed(cli: Option<u64>, file: Option<u64>, env: Option<&str>) -> Result<(u64, Option<String>)> {
    let env_seed = match env {
        None => None,
        Some(raw) => Some(raw.trim().parse::<u64>().map_err(|_| {
            Error::config(format!("{SEED_ENV_VAR} is set to {raw:?}, not a u64"))
        })?),
    };
    let (seed, winner) = if let Some(s) = cli {
        (s, "command line")
    } else if let Some(s) = file {
        (s, "config file")
    } else if let Some(s) = env_seed {
        (s, "environment")
    } else {
        (0, "default")
    };
    let warning = match env_seed {
        Some(e) if winner != "environment" && e != seed => Some(format!(
            "warning: {SEED_ENV_VAR}={e} is overridden by the {winner} seed {seed}"
        )),
        _ => None,
    };
    Ok((seed, warning))
}

/// What `<command>.config.json` holds: the command, the seed actually used,
/// the tool version, and the full configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: Config,
}

impl ResolvedConfig {
    pub fn new(command: &str, seed: u64, config: Config) -> Self {
        ResolvedConfig {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config,
        }
    }

    /// Writes the echo into `dir/<command>.config.json` and returns the path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.config.json", self.command));
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("config echo serialization: {e}")))?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_describe_the_standard_crescent_run() {
        let c = Config::default();
        assert_eq!(c.dataset.kind, DatasetKind::TwoMoons);
        assert_eq!(c.dataset.n_per_class, 1000);
        assert_eq!(c.dataset.source_mean, vec![0.0, 3.0]);
        assert_eq!(c.train.steps, 50_000);
        assert_eq!(c.train.batch_size, 256);
        assert_eq!(c.train.lr0, 5e-4);
        assert_eq!(c.train.eval_every, 500);
        assert_eq!(c.model.hidden, 128);
        assert_eq!(c.pools.provider, ProviderKind::Full);
        c.validate().unwrap();
    }

    #[test]
    fn empty_json_object_is_the_default_config() {
        let c: Config = serde_json::from_str("{}").unwrap();
        assert_eq!(c, Config::default());
    }

    #[test]
    fn unknown_fields_are_rejected_at_every_level() {
        assert!(serde_json::from_str::<Config>(r#"{"stepz": 3}"#).is_err());
        assert!(serde_json::from_str::<Config>(r#"{"train": {"stepz": 3}}"#).is_err());
        assert!(serde_json::from_str::<Config>(r#"{"dataset": {"noise": 0.1}}"#).is_err());
    }

    #[test]
    fn partial_sections_override_only_their_fields() {
        let c: Config =
            serde_json::from_str(r#"{"train": {"objective": "pafm", "steps": 7}}"#).unwrap();
        assert_eq!(c.train.objective, Objective::Pafm);
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.batch_size, 256);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn seed_precedence_is_cli_file_env_default() {
        assert_eq!(resolve_seed(Some(1), Some(2), Some("3")).unwrap().0, 1);
        assert_eq!(resolve_seed(None, Some(2), Some("3")).unwrap().0, 2);
        assert_eq!(resolve_seed(None, None, Some("3")).unwrap(), (3, None));
        assert_eq!(resolve_seed(None, None, None).unwrap(), (0, None));
    }

    #[test]
    fn overridden_environment_seed_warns() {
        let (seed, warning) = resolve_seed(Some(1), None, Some("3")).unwrap();
        assert_eq!(seed, 1);
        let warning = warning.unwrap();
        assert!(warning.contains("FLOWBENCH_SEED=3"), "{warning}");
        assert!(warning.contains("command line"), "{warning}");
        // same value: nothing worth warning about
        assert!(resolve_seed(Some(3), None, Some("3")).unwrap().1.is_none());
    }

    #[test]
    fn unparsable_environment_seed_is_a_config_error() {
        assert!(matches!(
            resolve_seed(None, None, Some("not-a-number")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn resolved_echo_round_trips_and_names_the_command() {
        let dir = tempfile::tempdir().unwrap();
        let echo = ResolvedConfig::new("train", 42, Config::default());
        let path = echo.write(dir.path()).unwrap();
        assert!(path.ends_with("train.config.json"));
        let text = std::fs::read_to_string(&path).unwrap();
        let back: ResolvedConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, echo);
        assert_eq!(back.tool_version, env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn config_file_round_trips_through_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Config::default();
        c.train.objective = Objective::Pafm;
        c.pools.provider = ProviderKind::Perturbation;
        c.pools.k = 8;
        let path = dir.path().join("run.json");
        std::fs::write(&path, serde_json::to_string_pretty(&c).unwrap()).unwrap();
        assert_eq!(Config::load(Some(&path)).unwrap(), c);
        assert_eq!(Config::load(None).unwrap(), Config::default());
        assert!(Config::load(Some(&dir.path().join("missing.json"))).is_err());
    }

    #[test]
    fn build_dataset_honors_the_source_and_kind() {
        let mut c = Config::default();
        c.dataset.n_per_class = 5;
        let ds = c.build_dataset(7).unwrap();
        assert_eq!(ds.n(), 10);
        assert_eq!(ds.source().mean().coords(), &[0.0, 3.0]);
        assert_eq!(ds.source().std(), 0.1);
        // same seed regenerates bitwise
        let again = c.build_dataset(7).unwrap();
        assert_eq!(ds, again);

        c.dataset.kind = DatasetKind::GaussianMixture;
        c.dataset.centers = vec![vec![0.0, 0.0], vec![4.0, 0.0]];
        c.dataset.center_stds = vec![0.5, 0.5];
        let mix = c.build_dataset(7).unwrap();
        assert_eq!(mix.n(), 10);
        assert_eq!(mix.label_set(), vec![0, 1]);

        c.dataset.source_mean = vec![0.0, 0.0, 0.0];
        assert!(c.build_dataset(7).is_err());
    }

    #[test]
    fn build_pools_maps_every_provider() {
        let mut c = Config::default();
        c.dataset.n_per_class = 4;
        c.pools.k = 2;
        let ds = c.build_dataset(1).unwrap();

        c.pools.provider = ProviderKind::Full;
        assert_eq!(c.build_pools(&ds, None, 1).unwrap().n(), ds.n());

        c.pools.provider = ProviderKind::Knn;
        assert!(c.build_pools(&ds, None, 1).is_err());
        let table = crate::data::precompute_knn(&ds, 2).unwrap();
        assert_eq!(c.build_pools(&ds, Some(&table), 1).unwrap().n(), ds.n());

        c.pools.provider = ProviderKind::Perturbation;
        let pools = c.build_pools(&ds, None, 1).unwrap();
        assert_eq!(pools.n(), ds.n());
        assert_eq!(pools.max_k(), 2); // k counts the owner

        c.pools.provider = ProviderKind::Augmentation;
        assert_eq!(c.build_pools(&ds, None, 1).unwrap().n(), ds.n());
    }
}
