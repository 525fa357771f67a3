//! Run configuration: a flat TOML file whose keys mirror the command-line
//! flags. Flags win over the file, the file wins over built-in defaults.

use std::path::{Path, PathBuf};

use clap::Args;
use flowcast_core::adjacency::AggregationMode;
use flowcast_core::nn::{ModelConfig, SplitFractions, TrainConfig};
use flowcast_core::pipeline::PipelineConfig;
use flowcast_core::stochastic::DEFAULT_CV_LEVELS;
use flowcast_core::weather::IdwConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub cv: Vec<f64>,
    pub samples: usize,
    pub aggregation: AggregationMode,
    pub alpha: f64,
    pub seed: u64,
    pub kernel_sigma: f64,
    pub lookback: usize,
    pub horizon: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub min_availability: f64,
    pub travel_time_floor: f64,
    pub top_k: usize,
    pub exit_fraction: f64,
    pub parallel_scenarios: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            data: None,
            out: None,
            cv: DEFAULT_CV_LEVELS.to_vec(),
            samples: p.samples,
            aggregation: p.aggregation,
            alpha: p.alpha,
            seed: p.seed,
            kernel_sigma: p.kernel_sigma,
            lookback: p.model.lookback,
            horizon: p.model.horizon,
            hidden: p.model.hidden,
            heads: p.model.heads,
            head_dim: p.model.head_dim,
            epochs: p.train.epochs,
            patience: p.train.patience,
            learning_rate: p.train.learning_rate,
            batch_size: p.train.batch_size,
            min_availability: p.min_availability,
            travel_time_floor: p.travel_time_floor,
            top_k: p.top_k,
            exit_fraction: p.exit_fraction,
            parallel_scenarios: 1,
        }
    }
}

/// Flags shared by every data-driven subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding the five input CSV files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CV levels, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub cv: Option<Vec<f64>>,
    /// Monte-Carlo travel-time samples per CV level.
    #[arg(long)]
    pub samples: Option<usize>,
    /// `mean` or `per_sample`.
    #[arg(long)]
    pub aggregation: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub kernel_sigma: Option<f64>,
    #[arg(long)]
    pub lookback: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub parallel_scenarios: Option<usize>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// File (if any) with flag overrides applied, then validated.
    pub fn resolve(args: &RunArgs) -> Result<Self, CliError> {
        let mut c = match &args.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = &args.$f {
                    c.$f = v.clone().into();
                }
            )*};
        }
        take!(data, out, cv, samples, alpha, seed, kernel_sigma, lookback, horizon, hidden, epochs, learning_rate, parallel_scenarios);
        if let Some(a) = &args.aggregation {
            c.aggregation = a.parse().map_err(|e: flowcast_core::Error| CliError::Config(e.to_string()))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.cv.is_empty() {
            return Err(CliError::Config("at least one CV level is required".into()));
        }
        if self.parallel_scenarios == 0 {
            return Err(CliError::Config("parallel_scenarios must be at least 1".into()));
        }
        let p = self.pipeline();
        p.model.validate()?;
        p.train.validate()?;
        for &cv in &self.cv {
            flowcast_core::ScenarioConfig::new(cv, p.samples, p.seed, p.kernel_sigma)?;
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CliError::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> Result<&Path, CliError> {
        self.data.as_deref().ok_or_else(|| CliError::Config("no data directory (use --data or `data` in the config)".into()))
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| CliError::Config("no output directory (use --out or `out` in the config)".into()))
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            samples: self.samples,
            seed: self.seed,
            kernel_sigma: self.kernel_sigma,
            aggregation: self.aggregation,
            alpha: self.alpha,
            min_availability: self.min_availability,
            travel_time_floor: self.travel_time_floor,
            idw: IdwConfig::default(),
            model: ModelConfig {
                heads: self.heads,
                head_dim: self.head_dim,
                hidden: self.hidden,
                lookback: self.lookback,
                horizon: self.horizon,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: self.epochs,
                patience: self.patience,
                learning_rate: self.learning_rate,
                batch_size: self.batch_size,
                seed: self.seed,
            },
            splits: SplitFractions::default(),
            top_k: self.top_k,
            exit_fraction: self.exit_fraction,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "cv = [0.3]\nsamples = 7\nseed = 5\n").unwrap();
        let args = RunArgs {
            config: Some(path),
            seed: Some(9),
            ..RunArgs::default()
        };
        let c = RunConfig::resolve(&args).unwrap();
        assert_eq!(c.cv, vec![0.3]);
        assert_eq!(c.samples, 7);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "samplez = 3\n").unwrap();
        let args = RunArgs {
            config: Some(path),
            ..RunArgs::default()
        };
        assert!(matches!(RunConfig::resolve(&args), Err(CliError::Config(_))));
        let args = RunArgs {
            cv: Some(vec![-1.0]),
            ..RunArgs::default()
        };
        assert_eq!(RunConfig::resolve(&args).unwrap_err().exit_code(), 2);
    }
}
