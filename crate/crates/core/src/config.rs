//! Versioned run configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blackbox::DirectionSpace;
use crate::datahub::{SplitScheme, SyntheticSpec};
use crate::error::{CoreError, Result};
use crate::invert::ReconMetric;
use crate::modelzoo::{ArchId, TrainConfig};
use crate::util::Fingerprint;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    Target,
    Shadow,
}

impl std::str::FromStr for OracleKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(OracleKind::Target),
            "shadow" => Ok(OracleKind::Shadow),
            _ => Err(CoreError::Config(format!("query oracle must be `target` or `shadow`, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `mnist`, `facescrub` or `synthetic`.
    pub dataset: String,
    #[serde(default = "default_root")]
    pub root: PathBuf,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Held-out fraction per identity for folder datasets.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub synthetic: SyntheticSpec,
    pub split: SplitScheme,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_root() -> PathBuf {
    PathBuf::from("data/mnist")
}
fn default_image_size() -> usize {
    32
}
fn default_test_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchId,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_width() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShadowConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    /// Public training images harvested and distilled (0 = all).
    #[serde(default)]
    pub public_limit: usize,
}

fn default_temperature() -> f32 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    #[serde(default = "default_decoder_width")]
    pub width: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_metric")]
    pub recon_metric: ReconMetric,
    /// Public images used as clean inversion samples (0 = all harvested).
    #[serde(default)]
    pub public_limit: usize,
    /// Private test images reconstructed for scoring (0 = all).
    #[serde(default)]
    pub eval_limit: usize,
    /// Independent decoder seeds per variant; metrics are averaged.
    #[serde(default = "one_usize")]
    pub repeats: usize,
}

fn default_decoder_width() -> usize {
    32
}
fn default_metric() -> ReconMetric {
    ReconMetric::Mse
}
fn one_usize() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f32,
    #[serde(default = "default_rounds")]
    pub max_rounds: usize,
    /// Extra budgets recorded from the same trajectories (budget curve).
    #[serde(default)]
    pub budgets: Vec<usize>,
    #[serde(default = "default_direction_space")]
    pub direction_space: DirectionSpace,
    #[serde(default = "default_oracle")]
    pub query_oracle: OracleKind,
    #[serde(default = "one_usize")]
    pub workers: usize,
}

fn default_k() -> usize {
    3
}
fn default_epsilon() -> f32 {
    0.2
}
fn default_rounds() -> usize {
    200
}
fn default_direction_space() -> DirectionSpace {
    DirectionSpace::PixelBasis
}
fn default_oracle() -> OracleKind {
    OracleKind::Target
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            epsilon: default_epsilon(),
            max_rounds: default_rounds(),
            budgets: Vec::new(),
            direction_space: default_direction_space(),
            query_oracle: default_oracle(),
            workers: 1,
        }
    }
}

impl AttackConfig {
    /// Sorted distinct budgets, always including `max_rounds`.
    pub fn all_budgets(&self) -> Vec<usize> {
        let mut b = self.budgets.clone();
        b.push(self.max_rounds);
        b.sort_unstable();
        b.dedup();
        b
    }
}

/// One cell of the loss ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub name: String,
    #[serde(default)]
    pub lambda: f64,
    /// Add successful adversarial examples to the inversion training set.
    #[serde(default)]
    pub augment: bool,
    /// Oracle attacked for augmentation; defaults to `attack.query_oracle`.
    #[serde(default)]
    pub query_oracle: Option<OracleKind>,
    #[serde(default)]
    pub recon_metric: Option<ReconMetric>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    pub gammas: Vec<f32>,
    #[serde(default = "default_mix")]
    pub mix_ratio: f64,
    /// Training of the defended targets and the robust evaluators.
    #[serde(default)]
    pub train: TrainConfig,
    /// Variant names reported as baseline and ours.
    #[serde(default = "default_baseline")]
    pub baseline: String,
    #[serde(default = "default_ours")]
    pub ours: String,
    /// Attack step size and budget against defended targets; larger
    /// perturbations are acceptable there.
    #[serde(default)]
    pub epsilon: Option<f32>,
    #[serde(default)]
    pub max_rounds: Option<usize>,
}

fn default_mix() -> f64 {
    0.5
}
fn default_baseline() -> String {
    "lr".into()
}
fn default_ours() -> String {
    "lr+ls+aa".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub noises: Vec<f64>,
    pub ks: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_probe_limit")]
    pub limit: usize,
}

fn default_trials() -> usize {
    5
}
fn default_probe_limit() -> usize {
    500
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Split,
    TrainTarget,
    Distill,
    GenAdv,
    TrainInversion,
    Evaluate,
    Defend,
    Report,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::Split,
        Phase::TrainTarget,
        Phase::Distill,
        Phase::GenAdv,
        Phase::TrainInversion,
        Phase::Evaluate,
        Phase::Defend,
        Phase::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Split => "split",
            Phase::TrainTarget => "train-target",
            Phase::Distill => "distill",
            Phase::GenAdv => "gen-adv",
            Phase::TrainInversion => "train-inversion",
            Phase::Evaluate => "evaluate",
            Phase::Defend => "defend",
            Phase::Report => "report",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Phases executed by `run`; defaults to all.
    #[serde(default = "all_phases")]
    pub phases: Vec<Phase>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Single-threaded, order-fixed execution (bitwise reproducible weights).
    #[serde(default = "yes")]
    pub deterministic: bool,
    pub data: DataConfig,
    pub target: ModelConfig,
    pub shadow: ShadowConfig,
    pub evaluators: Vec<ModelConfig>,
    #[serde(default = "default_inversion")]
    pub inversion: InversionConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    /// Public images attacked for augmentation (0 = every clean inversion sample).
    #[serde(default)]
    pub attack_limit: usize,
    pub variants: Vec<VariantConfig>,
    #[serde(default)]
    pub defense: Option<DefenseSection>,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
}

fn all_phases() -> Vec<Phase> {
    Phase::ALL.to_vec()
}
fn default_out() -> PathBuf {
    PathBuf::from("runs")
}
fn yes() -> bool {
    true
}
fn default_inversion() -> InversionConfig {
    InversionConfig {
        width: default_decoder_width(),
        train: TrainConfig::default(),
        recon_metric: default_metric(),
        public_limit: 0,
        eval_limit: 0,
        repeats: 1,
    }
}

/// Command-line overrides applied on top of a parsed config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub data_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub k: Option<usize>,
    pub epsilon: Option<f32>,
    pub max_rounds: Option<usize>,
    pub query_oracle: Option<OracleKind>,
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoreError::Config(e.to_string()))
    }

    /// Hash of the canonical serialisation; stamped on every metrics record.
    pub fn hash(&self) -> Result<String> {
        Ok(Fingerprint::new().str(&serde_json::to_string(self)?).finish())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(r) = &o.data_root {
            self.data.root = r.clone();
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(l) = o.lambda {
            for v in self.variants.iter_mut().filter(|v| v.lambda > 0.0) {
                v.lambda = l;
            }
        }
        if let Some(k) = o.k {
            self.attack.k = k;
        }
        if let Some(e) = o.epsilon {
            self.attack.epsilon = e;
        }
        if let Some(r) = o.max_rounds {
            self.attack.max_rounds = r;
            self.attack.budgets.retain(|&b| b <= r);
        }
        if let Some(q) = o.query_oracle {
            self.attack.query_oracle = q;
            for v in &mut self.variants {
                v.query_oracle = None;
            }
        }
        if let Some(w) = o.workers {
            self.attack.workers = w;
        }
        self.validate()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    pub fn variant_oracle(&self, v: &VariantConfig) -> OracleKind {
        v.query_oracle.unwrap_or(self.attack.query_oracle)
    }

    pub fn variant_metric(&self, v: &VariantConfig) -> ReconMetric {
        v.recon_metric.unwrap_or(self.inversion.recon_metric)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("name must be a non-empty plain directory name".into());
        }
        if !matches!(self.data.dataset.as_str(), "mnist" | "facescrub" | "synthetic") {
            return bad(format!("unknown dataset `{}`", self.data.dataset));
        }
        for (role, m) in [("target", &self.target), ("shadow", &self.shadow.model)]
            .into_iter()
            .chain(self.evaluators.iter().map(|e| ("evaluator", e)))
        {
            if !m.arch.is_classifier() {
                return bad(format!("{role} must be a classifier, got {}", m.arch));
            }
            if m.width == 0 {
                return bad(format!("{role} width must be positive"));
            }
            m.train.validate().map_err(|e| CoreError::Config(format!("{role}: {e}")))?;
        }
        if self.evaluators.is_empty() {
            return bad("at least one evaluator is required".into());
        }
        if self.evaluators.iter().any(|e| e.arch == self.shadow.model.arch) {
            return bad("evaluators must not share the shadow's architecture".into());
        }
        if self.inversion.repeats == 0 || self.inversion.width == 0 {
            return bad("inversion width and repeats must be positive".into());
        }
        if !(self.attack.epsilon > 0.0) || self.attack.max_rounds == 0 || self.attack.k == 0 {
            return bad("attack needs k >= 1, epsilon > 0 and max_rounds >= 1".into());
        }
        if self.attack.budgets.iter().any(|&b| b == 0 || b > self.attack.max_rounds) {
            return bad("attack budgets must lie in 1..=max_rounds".into());
        }
        if self.attack.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.variants.is_empty() {
            return bad("no variants configured".into());
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("variant names must be unique".into());
        }
        for v in &self.variants {
            if !(v.lambda >= 0.0) || !v.lambda.is_finite() {
                return bad(format!("variant {}: lambda must be non-negative", v.name));
            }
        }
        if let Some(d) = &self.defense {
            if d.gammas.is_empty() || d.gammas.iter().any(|g| !(*g > 0.0)) {
                return bad("defense gammas must be positive".into());
            }
            if !(0.0..=1.0).contains(&d.mix_ratio) {
                return bad("defense mix_ratio must lie in [0, 1]".into());
            }
            for n in [&d.baseline, &d.ours] {
                if !self.variants.iter().any(|v| &v.name == n) {
                    return bad(format!("defense refers to unknown variant `{n}`"));
                }
            }
        }
        if let Some(p) = &self.probe {
            if p.noises.iter().any(|n| !(*n >= 0.0)) || p.ks.contains(&0) || p.trials == 0 {
                return bad("probe needs non-negative noises, k >= 1 and trials >= 1".into());
            }
        }
        Ok(())
    }
}
