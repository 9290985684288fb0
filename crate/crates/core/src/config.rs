//! Training configuration: TOML schema, defaults and dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sslab_tensor::{ScheduleShape, ScheduleSpec};
use thiserror::Error;

use crate::datapipe::{AugConfig, Normalize};
use crate::heads::{LossBalance, SwavConfig};
use crate::model::EncoderConfig;
use crate::seed;
use crate::viewgeom::ViewSetSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("config schema: {0}")]
    Schema(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dino,
    Swav,
    Moco,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dino => "dino",
            Method::Swav => "swav",
            Method::Moco => "moco",
        }
    }
}

/// A schedule without its length; the run length comes from `steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base: f64,
    /// Final value; defaults to `base`.
    pub end: Option<f64>,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub shape: ScheduleShape,
}

impl Schedule {
    pub fn constant(v: f64) -> Self {
        Self { base: v, end: None, warmup_steps: 0, shape: ScheduleShape::Constant }
    }

    pub fn cosine(base: f64, end: f64, warmup_steps: usize) -> Self {
        Self { base, end: Some(end), warmup_steps, shape: ScheduleShape::Cosine }
    }

    pub fn spec(&self, total_steps: usize) -> ScheduleSpec {
        ScheduleSpec {
            base: self.base,
            min: self.end.unwrap_or(self.base),
            warmup_steps: self.warmup_steps.min(total_steps),
            total_steps,
            shape: self.shape,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: Schedule,
    pub weight_decay: Schedule,
    pub momentum: f64,
    /// EMA momentum of the teacher / key encoder.
    pub teacher_momentum: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: Schedule::cosine(0.1, 0.001, 200),
            weight_decay: Schedule::constant(1e-4),
            momentum: 0.9,
            teacher_momentum: Schedule::cosine(0.99, 1.0, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DinoConfig {
    pub teacher_temp: f64,
    pub student_temp: f64,
    pub center_momentum: f64,
}

impl Default for DinoConfig {
    fn default() -> Self {
        Self { teacher_temp: 0.04, student_temp: 0.1, center_momentum: 0.9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MocoConfig {
    pub queue_size: usize,
    pub temperature: f64,
}

impl Default for MocoConfig {
    fn default() -> Self {
        Self { queue_size: 1024, temperature: 0.2 }
    }
}

/// Local resolution selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    /// Solve `views.lc` so the mean pixel-scale ratio hits `target`.
    pub auto_lc: bool,
    pub target: f64,
    pub tol: f64,
    pub samples: u64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self { auto_lc: true, target: 1.0, tol: 0.05, samples: 200_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Raw dataset file (only read by [`crate::trainer::train`]).
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Checkpoint interval in steps; 0 keeps only the first and final ones.
    pub checkpoint_every: usize,
    pub views: ViewSetSpec,
    pub calibrate: CalibrateConfig,
    pub balance: LossBalance,
    pub encoder: EncoderConfig,
    pub optim: OptimConfig,
    pub aug: AugConfig,
    /// Channel statistics; computed from the dataset when absent.
    pub normalize: Option<Normalize>,
    pub dino: DinoConfig,
    pub swav: SwavConfig,
    pub moco: MocoConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Dino,
            seed: 0,
            steps: 2000,
            batch_size: 64,
            dataset: None,
            out_dir: None,
            checkpoint_every: 500,
            views: ViewSetSpec { gc: 56, lc: 32, ..ViewSetSpec::default() },
            calibrate: CalibrateConfig::default(),
            balance: LossBalance::default(),
            encoder: EncoderConfig::default(),
            optim: OptimConfig::default(),
            aug: AugConfig::default(),
            normalize: None,
            dino: DinoConfig::default(),
            swav: SwavConfig::default(),
            moco: MocoConfig::default(),
        }
    }
}

fn schema(msg: impl Into<String>) -> ConfigError {
    ConfigError::Schema(msg.into())
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, then applies `key.path=value` overrides. Values are
    /// read as TOML literals, falling back to plain strings.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let mut root: toml::Table = toml::Table::try_from(Self::default()).expect("defaults serialize");
        merge(&mut root, file);
        for (key, raw) in overrides {
            set_dotted(&mut root, key, parse_literal(raw))?;
        }
        let cfg: Self = toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form, ignoring `dataset` and `out_dir`.
    pub fn hash(&self) -> String {
        let bare = Self { dataset: None, out_dir: None, ..self.clone() };
        seed::hex_digest(bare.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut views = self.views;
        if self.calibrate.auto_lc {
            views.lc = views.lc.max(1);
        }
        views.validate().map_err(|e| schema(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(schema("batch_size must be positive"));
        }
        if self.views.n_g == 0 {
            return Err(schema("at least one global view is required"));
        }
        self.encoder.validate().map_err(|e| schema(e.to_string()))?;
        self.aug.validate().map_err(|e| schema(e.to_string()))?;
        if let Some(n) = &self.normalize {
            n.validate().map_err(|e| schema(e.to_string()))?;
        }
        for (name, s) in [
            ("optim.lr", &self.optim.lr),
            ("optim.weight_decay", &self.optim.weight_decay),
            ("optim.teacher_momentum", &self.optim.teacher_momentum),
        ] {
            s.spec(self.steps).validate().map_err(|e| schema(format!("{name}: {e}")))?;
        }
        let tm = &self.optim.teacher_momentum;
        if [tm.base, tm.end.unwrap_or(tm.base)].iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(schema("teacher momentum must lie in [0, 1]"));
        }
        if self.balance.mode == crate::heads::BalanceMode::Rebalanced && !(0.0..=1.0).contains(&self.balance.alpha) {
            return Err(schema(format!("alpha {} outside [0, 1]", self.balance.alpha)));
        }
        match self.method {
            Method::Dino => {
                if self.encoder.out_dim == 0 {
                    return Err(schema("dino needs encoder.out_dim > 0"));
                }
                if self.dino.teacher_temp <= 0.0 || self.dino.student_temp <= 0.0 {
                    return Err(schema("dino temperatures must be positive"));
                }
            }
            Method::Swav => {
                let s = &self.swav;
                if s.n_prototypes == 0 || s.temperature <= 0.0 || s.sinkhorn_eps <= 0.0 {
                    return Err(schema("swav needs prototypes, temperature > 0 and sinkhorn_eps > 0"));
                }
            }
            Method::Moco => {
                let keys = self.views.n_g * self.batch_size;
                if self.moco.queue_size < keys {
                    return Err(schema(format!("moco.queue_size {} below n_g·batch = {keys}", self.moco.queue_size)));
                }
                if self.moco.temperature <= 0.0 {
                    return Err(schema("moco temperature must be positive"));
                }
            }
        }
        if self.calibrate.auto_lc && (self.calibrate.samples == 0 || self.calibrate.tol <= 0.0) {
            return Err(schema("calibration needs samples > 0 and tol > 0"));
        }
        Ok(())
    }
}

/// Overlays `top` onto `base`, descending into tables present in both.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(schema(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| schema(format!("override {key:?}: {part} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
