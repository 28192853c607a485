//! Sectioned `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crete_core::baselines::RegularizerKind;
use crete_core::environment::{EnvironmentConfig, GridSpec, LinkParams, PathLossParams, Region};
use crete_core::evaluation::{ExperimentConfig, ExperimentId};
use crete_core::model::{ModelConfig, OutputHead};
use crete_core::trainer::{TrainConfig, ValidationConfig};

use crate::error::CliError;

/// Every accepted key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("paths.data_dir", "data"),
    ("paths.checkpoint", "model.ckpt"),
    ("paths.results_dir", "results"),
    ("environment.region_x", "350"),
    ("environment.region_y", "350"),
    ("environment.region_z", "20"),
    ("environment.grid_nx", "32"),
    ("environment.grid_ny", "32"),
    ("environment.grid_nz", "1"),
    ("environment.max_buildings", "8"),
    ("environment.building_width", "40"),
    ("environment.building_depth", "40"),
    ("environment.loss_density", "1"),
    ("environment.l0", "40.05"),
    ("environment.gamma", "2"),
    ("environment.d0", "1"),
    ("dataset.num_train_envs", "50"),
    ("dataset.num_val_envs", "5"),
    ("dataset.num_test_envs", "17"),
    ("dataset.num_terminals", "50"),
    ("dataset.noise_std", "0"),
    ("model.full_scale", "false"),
    ("model.num_blocks", "4"),
    ("model.num_heads", "2"),
    ("model.embed_dim", "64"),
    ("model.mlp_ratio", "4"),
    ("model.causal", "true"),
    ("model.head", "per_token"),
    ("model.length_scale", "100"),
    ("trainer.steps", "2000"),
    ("trainer.batch_episodes", "4"),
    ("trainer.learning_rate", "0.0003"),
    ("trainer.warmup_steps", "500"),
    ("trainer.final_lr_fraction", "1"),
    ("trainer.beta1", "0.9"),
    ("trainer.beta2", "0.999"),
    ("trainer.adam_eps", "1e-8"),
    ("trainer.grad_clip", "1"),
    ("trainer.context_min", "4"),
    ("trainer.context_max", "256"),
    ("trainer.max_targets", "32"),
    ("trainer.checkpoint_every", "0"),
    ("trainer.validate_every", "100"),
    ("trainer.val_context_size", "100"),
    ("trainer.val_max_targets", "32"),
    ("baselines.knn_k", "3"),
    ("baselines.knn_k_grid", "1,2,3,5,8,13"),
    ("baselines.lambda_grid", "0.001,0.01,0.1,1,10"),
    ("baselines.lambda_l1", "auto"),
    ("baselines.lambda_tv", "auto"),
    ("baselines.lambda_tikhonov", "auto"),
    ("baselines.holdout_fraction", "0.2"),
    ("baselines.max_iterations", "300"),
    ("baselines.inner_iterations", "5"),
    ("baselines.tolerance", "1e-7"),
    ("baselines.tv_iterations", "40"),
    ("evaluation.context_size", "100"),
    ("evaluation.num_eval_pairs", "30"),
    ("evaluation.measured_fraction", "0.5"),
    ("evaluation.bandwidth", "20000000"),
    ("evaluation.tx_power", "0.3"),
    ("evaluation.noise_power_dbm", "-96"),
    ("evaluation.estimators", "crete,knn,tomo_l1,tomo_tv,tomo_tikhonov"),
    ("experiment.id", "mae_vs_m"),
    ("experiment.values", "default"),
    ("experiment.timestamp", "auto"),
];

/// Resolved configuration: defaults overlaid with files and overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    /// Sets `section.key`; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown key `{key}`"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, item: &str) -> Result<(), CliError> {
        let (k, v) = item.split_once('=').ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Overlays a config file's text.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("{origin}:{}", n + 1);
            if let Some(rest) = line.strip_prefix('[') {
                section = rest
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::Config(format!("{}: malformed section header", at())))?
                    .trim()
                    .to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::Config(format!("{}: expected key = value", at())))?;
            if section.is_empty() {
                return Err(CliError::Config(format!("{}: key outside any section", at())));
            }
            self.set(&format!("{section}.{}", k.trim()), v).map_err(|e| CliError::Config(format!("{}: {e}", at())))?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        self.get(key).parse().map_err(|_| CliError::Config(format!("bad value `{}` for `{key}`", self.get(key))))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        self.get(key)
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| CliError::Config(format!("bad list entry `{s}` in `{key}`"))))
            .collect()
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("run.seed")
    }

    /// Text form that [`RunConfig::merge_text`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (k, v) in &self.values {
            let (s, key) = k.split_once('.').expect("dotted key");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                writeln!(out, "[{s}]").unwrap();
                section = s;
            }
            writeln!(out, "{key} = {v}").unwrap();
        }
        out
    }

    pub fn environment(&self) -> Result<EnvironmentConfig, CliError> {
        Ok(EnvironmentConfig {
            region: Region::new(
                self.parse("environment.region_x")?,
                self.parse("environment.region_y")?,
                self.parse("environment.region_z")?,
            )?,
            grid: GridSpec::new(
                self.parse("environment.grid_nx")?,
                self.parse("environment.grid_ny")?,
                self.parse("environment.grid_nz")?,
            )?,
            max_buildings: self.parse("environment.max_buildings")?,
            building_size: (self.parse("environment.building_width")?, self.parse("environment.building_depth")?),
            loss_density: self.parse("environment.loss_density")?,
            path_loss: PathLossParams {
                l0: self.parse("environment.l0")?,
                gamma: self.parse("environment.gamma")?,
                d0: self.parse("environment.d0")?,
            },
        })
    }

    pub fn dataset(&self) -> Result<DatasetSettings, CliError> {
        Ok(DatasetSettings {
            num_train_envs: self.parse("dataset.num_train_envs")?,
            num_val_envs: self.parse("dataset.num_val_envs")?,
            num_test_envs: self.parse("dataset.num_test_envs")?,
            num_terminals: self.parse("dataset.num_terminals")?,
            noise_std: self.parse("dataset.noise_std")?,
        })
    }

    pub fn model(&self) -> Result<(ModelConfig, f64), CliError> {
        let head = match self.get("model.head") {
            "per_token" => OutputHead::PerToken,
            "average" => OutputHead::Average,
            other => return Err(CliError::Config(format!("unknown model.head `{other}`"))),
        };
        let cfg = if self.parse::<bool>("model.full_scale")? {
            ModelConfig { causal: self.parse("model.causal")?, head, ..ModelConfig::full_scale() }
        } else {
            ModelConfig {
                num_blocks: self.parse("model.num_blocks")?,
                num_heads: self.parse("model.num_heads")?,
                embed_dim: self.parse("model.embed_dim")?,
                mlp_ratio: self.parse("model.mlp_ratio")?,
                causal: self.parse("model.causal")?,
                head,
            }
        };
        Ok((cfg, self.parse("model.length_scale")?))
    }

    pub fn trainer(&self, seed: u64) -> Result<(TrainConfig, ValidationConfig), CliError> {
        let t = TrainConfig {
            steps: self.parse("trainer.steps")?,
            batch_episodes: self.parse("trainer.batch_episodes")?,
            learning_rate: self.parse("trainer.learning_rate")?,
            warmup_steps: self.parse("trainer.warmup_steps")?,
            final_lr_fraction: self.parse("trainer.final_lr_fraction")?,
            beta1: self.parse("trainer.beta1")?,
            beta2: self.parse("trainer.beta2")?,
            adam_eps: self.parse("trainer.adam_eps")?,
            grad_clip: self.parse("trainer.grad_clip")?,
            seed,
            context_min: self.parse("trainer.context_min")?,
            context_max: self.parse("trainer.context_max")?,
            max_targets: self.parse("trainer.max_targets")?,
            checkpoint_every: self.parse("trainer.checkpoint_every")?,
            validate_every: self.parse("trainer.validate_every")?,
        };
        let v = ValidationConfig {
            context_size: self.parse("trainer.val_context_size")?,
            max_targets: self.parse("trainer.val_max_targets")?,
            seed: seed ^ 0x7a11,
        };
        Ok((t, v))
    }

    pub fn baselines(&self) -> Result<BaselineSettings, CliError> {
        Ok(BaselineSettings {
            knn_k: self.parse("baselines.knn_k")?,
            knn_k_grid: self.list("baselines.knn_k_grid")?,
            lambda_grid: self.list("baselines.lambda_grid")?,
            fixed_lambda: [
                self.lambda("baselines.lambda_l1")?,
                self.lambda("baselines.lambda_tv")?,
                self.lambda("baselines.lambda_tikhonov")?,
            ],
            holdout_fraction: self.parse("baselines.holdout_fraction")?,
            max_iterations: self.parse("baselines.max_iterations")?,
            inner_iterations: self.parse("baselines.inner_iterations")?,
            tolerance: self.parse("baselines.tolerance")?,
            tv_iterations: self.parse("baselines.tv_iterations")?,
        })
    }

    fn lambda(&self, key: &str) -> Result<Option<f64>, CliError> {
        match self.get(key) {
            "auto" => Ok(None),
            _ => self.parse(key).map(Some),
        }
    }

    pub fn link(&self) -> Result<LinkParams, CliError> {
        Ok(LinkParams {
            bandwidth: self.parse("evaluation.bandwidth")?,
            tx_power: self.parse("evaluation.tx_power")?,
            noise_power_dbm: self.parse("evaluation.noise_power_dbm")?,
            ..LinkParams::default()
        })
    }

    pub fn estimator_names(&self) -> Vec<String> {
        self.get("evaluation.estimators").split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
    }

    pub fn experiment(&self, test_seed: u64, seed: u64) -> Result<ExperimentConfig, CliError> {
        let id = ExperimentId::parse(self.get("experiment.id"))?;
        let values = match self.get("experiment.values") {
            "default" => id.default_values(),
            _ => self.list("experiment.values")?,
        };
        let ds = self.dataset()?;
        Ok(ExperimentConfig {
            id,
            values,
            num_test_envs: ds.num_test_envs,
            env_seed: test_seed,
            seed,
            environment: self.environment()?,
            num_terminals: ds.num_terminals,
            noise_std: ds.noise_std,
            context_size: self.parse("evaluation.context_size")?,
            num_eval_pairs: self.parse("evaluation.num_eval_pairs")?,
            measured_fraction: self.parse("evaluation.measured_fraction")?,
            link: self.link()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSettings {
    pub num_train_envs: usize,
    pub num_val_envs: usize,
    pub num_test_envs: usize,
    pub num_terminals: usize,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSettings {
    pub knn_k: usize,
    pub knn_k_grid: Vec<usize>,
    pub lambda_grid: Vec<f64>,
    /// Per regularizer in `RegularizerKind::ALL` order; `None` selects per context.
    pub fixed_lambda: [Option<f64>; 3],
    pub holdout_fraction: f64,
    pub max_iterations: usize,
    pub inner_iterations: usize,
    pub tolerance: f64,
    pub tv_iterations: usize,
}

impl BaselineSettings {
    pub fn spec(&self, kind: RegularizerKind) -> crete_core::baselines::RegularizerSpec {
        crete_core::baselines::RegularizerSpec {
            kind,
            lambda: 1.0,
            max_iterations: self.max_iterations,
            inner_iterations: self.inner_iterations,
            tolerance: self.tolerance,
            tv_iterations: self.tv_iterations,
        }
    }
}
