//! Run configuration: a TOML document with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compression::Algorithm;
use crate::cost::CostModel;
use crate::data::{generate_synthetic, load_directory, AugmentConfig, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::objectives::LossConfig;
use crate::optim::AdamWConfig;
use crate::schedule::{AccelSchedule, LrMode, LrSchedule};
use crate::vit::ViTConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub synthetic: SyntheticSpec,
    /// Root with one subdirectory per class, for `kind = "directory"`.
    pub path: Option<PathBuf>,
    /// Held-out fraction per class used by the probes.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { kind: DataKind::Synthetic, synthetic: SyntheticSpec::default(), path: None, test_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub adamw: AdamWConfig,
    /// Base learning rate for a batch of 256.
    pub blr: f64,
    /// Warmup length as a fraction of the budget.
    pub warmup_frac: f64,
    pub alpha: f64,
    pub mode: LrMode,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { adamw: AdamWConfig::default(), blr: 1.5e-3, warmup_frac: 0.1, alpha: 2.0, mode: LrMode::Poly }
    }
}

/// Momentum of the key encoder, ramped from `start` to `end` by a half cosine
/// over the budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaConfig {
    pub start: f64,
    pub end: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { start: 0.99, end: 1.0 }
    }
}

impl EmaConfig {
    pub fn momentum_at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.end - (self.end - self.start) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Dropout masks and anything not covered below.
    pub global: u64,
    /// Dataset generation, shuffling and augmentation.
    pub data: u64,
    /// Parameter initialization.
    pub model: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { global: 0, data: 1, model: 2 }
    }
}

impl Seeds {
    /// All three seeds derived from one value.
    pub fn from_one(seed: u64) -> Self {
        Self { global: seed, data: seed.wrapping_add(1), model: seed.wrapping_add(2) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// L2 strength of the linear probe.
    pub reg: f64,
    /// Evaluate every checkpoint during pretraining.
    pub at_checkpoints: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { reg: 1e-3, at_checkpoints: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// Normalizing length; defaults to the uncompressed sequence length.
    pub l_base: Option<usize>,
    /// Side of the small student crops (distillation only).
    pub small_side: usize,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self { l_base: None, small_side: 32 }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    /// Total sample-cost units the run may spend.
    pub budget: f64,
    pub batch_size: usize,
    pub model: ViTConfig,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub ema: EmaConfig,
    pub seeds: Seeds,
    pub eval: EvalConfig,
    pub cost: CostConfig,
    /// Acceleration schedule as `progress:strategy` entries.
    pub schedule: Vec<String>,
    /// Budget fractions at which checkpoints are written.
    pub stages: Vec<f64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Moco,
            budget: 2.5e5,
            batch_size: 64,
            model: ViTConfig::default(),
            data: DataConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            ema: EmaConfig::default(),
            seeds: Seeds::default(),
            eval: EvalConfig::default(),
            cost: CostConfig::default(),
            schedule: vec!["0:full".into()],
            stages: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key=value` overrides; keys are dotted paths such as
    /// `model.depth`, values are TOML literals or bare strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            set_path(&mut doc, key.trim(), parse_literal(raw.trim()))?;
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.loss.validate()?;
        if !(self.budget > 0.0 && self.budget.is_finite()) {
            return fail(format!("budget {} must be positive", self.budget));
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2".into());
        }
        if self.data.kind == DataKind::Synthetic && self.data.synthetic.side != self.model.image_side {
            return fail(format!("synthetic side {} differs from model image_side {}", self.data.synthetic.side, self.model.image_side));
        }
        if !(0.0 < self.data.test_fraction && self.data.test_fraction < 1.0) {
            return fail("data.test_fraction must lie in (0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.optim.warmup_frac) {
            return fail("optim.warmup_frac must lie in [0, 1)".into());
        }
        if !(0.0 <= self.ema.start && self.ema.start <= self.ema.end && self.ema.end <= 1.0) {
            return fail("need 0 <= ema.start <= ema.end <= 1".into());
        }
        if self.stages.is_empty() || self.stages.windows(2).any(|w| w[1] <= w[0]) || self.stages.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return fail("stages must be strictly increasing fractions in [0, 1]".into());
        }
        self.accel_schedule()?;
        self.lr_schedule().validate()
    }

    pub fn accel_schedule(&self) -> Result<AccelSchedule> {
        AccelSchedule::from_entries(&self.schedule, &self.model)
    }

    /// Learning-rate schedule over spent budget units.
    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            blr: self.optim.blr,
            batch_size: self.batch_size,
            i_warmup: self.optim.warmup_frac * self.budget,
            i_max: self.budget,
            alpha: self.optim.alpha,
            mode: self.optim.mode,
        }
    }

    pub fn cost_model(&self) -> Result<CostModel> {
        match self.cost.l_base {
            Some(l) => CostModel::new(l),
            None => Ok(CostModel::for_config(&self.model)),
        }
    }

    /// Small crops per sample actually used by the algorithm.
    pub fn small_crops(&self) -> usize {
        if self.algorithm == Algorithm::Dino {
            self.loss.small_crops
        } else {
            0
        }
    }

    /// Full dataset before the train/test split.
    pub fn dataset(&self) -> Result<Dataset> {
        match self.data.kind {
            DataKind::Synthetic => generate_synthetic(self.seeds.data, &self.data.synthetic),
            DataKind::Directory => {
                let path = self.data.path.as_ref().ok_or_else(|| Error::Config("data.path is required for directory data".into()))?;
                Ok(load_directory(path, self.model.image_side)?.0)
            }
        }
    }

    /// `(train, test)` split used by pretraining and the probes.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        self.dataset()?.split(self.data.test_fraction)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}")).map(|w| w.v).unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| Error::Config(format!("'{key}': '{part}' is not inside a table")))?;
        if i + 1 == parts.len() {
            let value = match (table.get(*part), value) {
                // Integers given where a float is stored, e.g. budget=1000.
                (Some(toml::Value::Float(_)), toml::Value::Integer(n)) => toml::Value::Float(n as f64),
                (_, v) => v,
            };
            table.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = table.entry((*part).to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(Error::Config("empty override key".into()))
}
