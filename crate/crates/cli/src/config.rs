//! Experiment configuration files.
//!
//! One JSON file describes a whole experiment: dataset, model, training
//! recipe, defense, and the evaluation attack battery. Unknown keys are
//! rejected at every level, so typos fail loudly instead of silently using a
//! default.
//!
//! A single top-level `seed` drives everything. Derived streams: data
//! generation uses streams 10 (train) and 11 (test), model initialization
//! stream 20, training stream 21, evaluation stream 22. Seed fields embedded
//! in training or attack configs are overwritten by these, so files never
//! need to state them.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use advpnml::data::{self, LabeledSet, Split, SyntheticSpec};
use advpnml::eval::EvalAttack;
use advpnml::model::ModelSpec;
use advpnml::pnml::RefineConfig;
use advpnml::rng::derive_seed;
use advpnml::train::TrainConfig;

/// Seed streams derived from the experiment seed.
pub mod streams {
    pub const DATA_TRAIN: u64 = 10;
    pub const DATA_TEST: u64 = 11;
    pub const MODEL_INIT: u64 = 20;
    pub const TRAIN: u64 = 21;
    pub const EVAL: u64 = 22;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Two-class point cloud: one blob at the origin, one on a ring.
    Synthetic {
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_noise_sigma")]
        noise_sigma: f64,
        #[serde(default = "default_ring_radius")]
        ring_radius: f64,
    },
    /// Handwritten digits in IDX files.
    Mnist {
        /// Directory holding the four IDX files; defaults to `data/mnist`
        /// under the repository (or the `MNIST_DIR` environment variable).
        #[serde(default)]
        dir: Option<PathBuf>,
        /// Cap on training samples (taken from the front of the file).
        #[serde(default)]
        train_subset: Option<usize>,
    },
}

fn default_noise_sigma() -> f64 {
    SyntheticSpec::default().noise_sigma
}

fn default_ring_radius() -> f64 {
    SyntheticSpec::default().ring_radius
}

impl DatasetConfig {
    pub fn is_synthetic(&self) -> bool {
        matches!(self, DatasetConfig::Synthetic { .. })
    }

    /// Strength the defense falls back to when a config leaves it out.
    pub fn default_strength(&self) -> f64 {
        match self {
            DatasetConfig::Synthetic { .. } => 0.6,
            DatasetConfig::Mnist { .. } => 0.1,
        }
    }

    /// The natural pixel/coordinate range attacks and refinement clamp to.
    pub fn natural_range(&self) -> Option<(f64, f64)> {
        match self {
            DatasetConfig::Synthetic { .. } => None,
            DatasetConfig::Mnist { .. } => Some((0.0, 1.0)),
        }
    }

    /// Materialize the train and test sets.
    pub fn load(&self, seed: u64) -> anyhow::Result<(LabeledSet<f32>, LabeledSet<f32>)> {
        match self {
            DatasetConfig::Synthetic { train_per_class, test_per_class, noise_sigma, ring_radius } => {
                let spec = SyntheticSpec { noise_sigma: *noise_sigma, ring_radius: *ring_radius };
                let train = data::gen_synthetic(spec.clone(), *train_per_class, derive_seed(seed, streams::DATA_TRAIN))?;
                let test = data::gen_synthetic(spec, *test_per_class, derive_seed(seed, streams::DATA_TEST))?;
                Ok((train, test))
            }
            DatasetConfig::Mnist { dir, train_subset } => {
                let dir = dir.clone().unwrap_or_else(data::mnist_dir);
                let train = data::load_mnist(&dir, Split::Train)
                    .with_context(|| format!("loading training digits from {}", dir.display()))?;
                let test = data::load_mnist(&dir, Split::Test)
                    .with_context(|| format!("loading test digits from {}", dir.display()))?;
                let train = match train_subset {
                    Some(n) => train.first_n(*n)?,
                    None => train,
                };
                Ok((train, test))
            }
        }
    }
}

/// Defense section. Strength may be omitted to take the dataset default
/// (0.6 synthetic, 0.1 digits).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    #[serde(default)]
    pub strength: Option<f64>,
    #[serde(default = "default_one")]
    pub iterations: usize,
    #[serde(default)]
    pub candidates: Option<usize>,
}

fn default_one() -> usize {
    1
}

impl DefenseConfig {
    pub fn resolve(&self, dataset: &DatasetConfig) -> RefineConfig {
        RefineConfig {
            strength: self.strength.unwrap_or_else(|| dataset.default_strength()),
            iterations: self.iterations,
            candidates: self.candidates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Cap on evaluated test samples (taken from the front).
    #[serde(default)]
    pub samples: Option<usize>,
    pub attacks: Vec<EvalAttack>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Identifier carried into every result row.
    pub experiment_id: String,
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    /// Overrides the dataset's natural input range when present.
    #[serde(default)]
    pub input_range: Option<(f64, f64)>,
    pub train: TrainConfig,
    #[serde(default)]
    pub defense: Option<DefenseConfig>,
    pub eval: EvalSection,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> anyhow::Result<()> {
        if self.experiment_id.is_empty() {
            bail!("experiment_id must not be empty");
        }
        self.model.validate()?;
        self.train.validate()?;
        if let Some((lo, hi)) = self.input_range {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                bail!("input_range [{lo}, {hi}] must be a finite, increasing pair");
            }
        }
        if let Some(d) = &self.defense {
            self.resolve_defense_from(d).validate(self.model.n_classes())?;
        }
        if self.eval.attacks.is_empty() {
            bail!("eval.attacks must list at least one row");
        }
        Ok(())
    }

    fn resolve_defense_from(&self, d: &DefenseConfig) -> RefineConfig {
        d.resolve(&self.dataset)
    }

    pub fn defense(&self) -> Option<RefineConfig> {
        self.defense.as_ref().map(|d| self.resolve_defense_from(d))
    }

    /// The range attacks and refinement are projected into.
    pub fn range(&self) -> Option<(f32, f32)> {
        self.input_range
            .or_else(|| self.dataset.natural_range())
            .map(|(lo, hi)| (lo as f32, hi as f32))
    }

    /// Training config with the derived seed slotted in.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = derive_seed(self.seed, streams::TRAIN);
        t
    }

    pub fn model_init_seed(&self) -> u64 {
        derive_seed(self.seed, streams::MODEL_INIT)
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, streams::EVAL)
    }
}
