use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dropout::{SiteConfig, Variant};
use crate::error::{Error, Result};
use crate::estimators::{AdamConfig, Estimator};
use crate::models::MlpSpec;
use crate::uncertainty::DEFAULT_THRESHOLDS;

use super::data::SyntheticSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

/// How raw pixels are mapped before noise is added. Only `[0, 1]`
/// scaling is implemented; the field exists so the echo records it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preprocessing {
    #[default]
    UnitScale,
}

/// Everything a run depends on. Serialized verbatim into `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    /// Directory holding the four MNIST IDX files (plain or `.gz`).
    pub data_dir: PathBuf,
    pub synthetic: SyntheticSpec,
    pub preprocessing: Preprocessing,
    /// Variance of the additive pixel noise on the evaluated data.
    pub noise_var: f64,
    /// Train on clean inputs, evaluate on inputs with `noise_var`.
    pub ood: bool,
    /// Layer widths; the input width must match the data.
    pub widths: Vec<usize>,
    pub variant: Variant,
    /// `None` picks the natural estimator for the variant.
    pub estimator: Option<Estimator>,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma: usize,
    pub t: f64,
    pub rate: f64,
    /// Predictive samples per test input.
    pub k: usize,
    pub ensemble: usize,
    pub thresholds: Vec<f64>,
    pub seed: u64,
    /// Seed of the noise corruption, shared by every method and seed so
    /// all of them see the same corrupted pixels.
    pub data_seed: u64,
    /// Use only the first `n` training / test records (smoke runs).
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let site = SiteConfig::default();
        RunConfig {
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data/mnist"),
            synthetic: SyntheticSpec::default(),
            preprocessing: Preprocessing::UnitScale,
            noise_var: 0.0,
            ood: false,
            widths: vec![784, 300, 100, 10],
            variant: Variant::ContextualBernoulli,
            estimator: None,
            optimizer: AdamConfig::default(),
            batch_size: 128,
            epochs: 20,
            gamma: site.gamma,
            t: site.t,
            rate: site.rate,
            k: 20,
            ensemble: 1,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            seed: 0,
            data_seed: 0,
            train_limit: None,
            test_limit: None,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn estimator(&self) -> Estimator {
        self.estimator
            .unwrap_or_else(|| Estimator::default_for(Some(self.variant)))
    }

    pub fn site(&self) -> SiteConfig {
        SiteConfig {
            variant: self.variant,
            gamma: self.gamma,
            t: self.t,
            rate: self.rate,
            ..SiteConfig::default()
        }
    }

    pub fn model_spec(&self) -> MlpSpec {
        MlpSpec::uniform(self.widths.clone(), Some(self.site()))
    }

    /// Noise variance of the training inputs.
    pub fn train_noise(&self) -> f64 {
        if self.ood {
            0.0
        } else {
            self.noise_var
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec().validate()?;
        self.optimizer.validate()?;
        self.estimator().check(Some(self.variant))?;
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::config(format!("noise variance {} must be >= 0", self.noise_var)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.k < 2 {
            return Err(Error::config("need K >= 2 predictive samples for the t-test"));
        }
        if self.ensemble == 0 {
            return Err(Error::config("ensemble size must be positive"));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::config(format!("thresholds {:?} must lie in (0, 1)", self.thresholds)));
        }
        if self.train_limit == Some(0) || self.test_limit == Some(0) {
            return Err(Error::config("record limits must be positive"));
        }
        if self.dataset == DatasetKind::Synthetic {
            self.synthetic.validate()?;
            if self.widths[0] != self.synthetic.dim || *self.widths.last().unwrap() != self.synthetic.classes {
                return Err(Error::config(format!(
                    "widths {:?} do not fit synthetic data ({} dims, {} classes)",
                    self.widths, self.synthetic.dim, self.synthetic.classes
                )));
            }
        } else if self.widths[0] != 784 || *self.widths.last().unwrap() != 10 {
            return Err(Error::config(format!("widths {:?} do not fit MNIST (784 -> 10)", self.widths)));
        }
        Ok(())
    }
}

/// Command line overrides applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub estimator: Option<Estimator>,
    pub noise_var: Option<f64>,
    pub ood: bool,
    pub epochs: Option<usize>,
    pub thresholds: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
            // A variant switch without an explicit estimator re-derives it.
            if self.estimator.is_none() {
                cfg.estimator = None;
            }
        }
        if let Some(e) = self.estimator {
            cfg.estimator = Some(e);
        }
        if let Some(n) = self.noise_var {
            cfg.noise_var = n;
        }
        if self.ood {
            cfg.ood = true;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(t) = &self.thresholds {
            cfg.thresholds = t.clone();
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = d.clone();
        }
    }
}

/// Parses `0.01,0.05,0.1`.
pub fn parse_thresholds(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::usage(format!("bad threshold {p:?}")))
        })
        .collect()
}
