//! Plain-text `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors, so a
//! typo never silently falls back to a default. [`ExperimentConfig::render`]
//! writes every key, which makes the rendered file a complete record of a
//! run.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::active::{ActiveConfig, Policy};
use crate::crop::{AnchorRegion, CropGenConfig, SceneParams};
use crate::distortion::DistortionKind;
use crate::nn::NetworkSpec;
use crate::optim::SgdConfig;
use crate::ranking::RankingConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: {reason}")]
    Value { key: String, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Quality,
    Counting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Baseline,
    Multitask,
    Active,
}

/// Counting supervision: full density maps or only the per-image count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountTarget {
    Density,
    Count,
}

macro_rules! named_enum {
    ($t:ty { $($v:ident => $s:literal),+ $(,)? }) => {
        impl $t {
            pub fn name(self) -> &'static str {
                match self { $(Self::$v => $s),+ }
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok(Self::$v),)+
                    _ => Err(format!("expected one of: {}", [$($s),+].join(", "))),
                }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(Task { Quality => "quality", Counting => "counting" });
named_enum!(Arm { Baseline => "baseline", Multitask => "multitask", Active => "active" });
named_enum!(CountTarget { Density => "density", Count => "count" });

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub arm: Arm,
    pub seed: u64,
    pub network: NetworkSpec,
    pub sgd: SgdConfig,
    pub ranking: RankingConfig,
    /// Labeled training images.
    pub labeled: usize,
    /// Unlabeled images feeding the ranked groups.
    pub unlabeled: usize,
    pub test: usize,
    /// Labeled images per step.
    pub batch_labeled: usize,
    /// Ranked groups per step (each contributes its whole group).
    pub batch_groups: usize,
    /// Gradient-norm clip applied before each step; 0 disables it.
    pub clip_norm: f64,

    pub crop: CropGenConfig,
    pub scene: SceneParams,
    /// Images are views of a scene at a zoom drawn log-uniformly from this
    /// range (1 = native scale).
    pub zoom: (f64, f64),
    /// When above `scene.mean_count`, each scene's expected count is drawn
    /// log-uniformly from `[scene.mean_count, mean_count_max]`.
    pub mean_count_max: f64,
    pub count_target: CountTarget,
    /// Density-map Gaussian std in image pixels.
    pub density_sigma: f64,
    /// Ranked groups materialised per unlabeled image by `gen`.
    pub groups_per_image: usize,

    pub distortions: Vec<DistortionKind>,
    pub levels: usize,
    pub quality_size: usize,

    pub active: ActiveConfig,
    /// Both policies are run when unset.
    pub active_policy: Option<Policy>,
    pub initial_fraction: f64,
    pub cycle_fraction: f64,
    /// SGD steps for each active-learning training phase.
    pub cycle_steps: usize,
    /// Log every training step instead of every 100th.
    pub audit: bool,
    /// Dataset directory written by `gen`; generated in memory when unset.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// `id,prediction` CSV evaluated instead of a checkpoint.
    pub predictions: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn defaults(task: Task) -> Self {
        let (network, sgd, ranking, labeled, unlabeled, test) = match task {
            Task::Counting => (
                NetworkSpec::parse(
                    "1x64x64|maxpool2|conv3x3:1->8|relu|maxpool2|conv3x3:8->8|relu|maxpool2|conv3x3:8->8|relu|conv3x3:8->1",
                )
                .expect("valid default network"),
                SgdConfig {
                    learning_rate: 1e-3,
                    decay_factor: 0.1,
                    decay_interval: 1000,
                    weight_decay: 5e-4,
                    total_steps: 1500,
                },
                RankingConfig {
                    margin: 0.0,
                    tradeoff: 0.01,
                },
                50,
                500,
                200,
            ),
            Task::Quality => (
                NetworkSpec::parse(
                    "1x32x32|conv3x3:1->8|relu|maxpool2|conv3x3:8->8|relu|maxpool2|conv3x3:8->8|relu|conv3x3:8->1|meanpool|dense:1->1",
                )
                .expect("valid default network"),
                SgdConfig {
                    learning_rate: 1e-2,
                    decay_factor: 0.1,
                    decay_interval: 1000,
                    weight_decay: 5e-4,
                    total_steps: 1500,
                },
                RankingConfig {
                    margin: 0.1,
                    tradeoff: 1.0,
                },
                50,
                200,
                100,
            ),
        };
        Self {
            task,
            arm: Arm::Baseline,
            seed: 0,
            network,
            sgd,
            ranking,
            labeled,
            unlabeled,
            test,
            batch_labeled: 25,
            batch_groups: 5,
            clip_norm: 0.0,
            crop: CropGenConfig::default(),
            scene: SceneParams::default(),
            zoom: (1.0, 1.0),
            mean_count_max: 0.0,
            count_target: CountTarget::Density,
            density_sigma: 4.0,
            groups_per_image: 1,
            distortions: vec![
                DistortionKind::GaussianBlur,
                DistortionKind::GaussianNoise,
                DistortionKind::JpegQuantization,
                DistortionKind::ImpulseNoise,
            ],
            levels: 4,
            quality_size: 32,
            active: ActiveConfig::default(),
            active_policy: None,
            initial_fraction: 0.1,
            cycle_fraction: 0.1,
            cycle_steps: 300,
            audit: false,
            data: None,
            checkpoint: None,
            predictions: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                reason: format!("expected `key = value`, found `{line}`"),
            })?;
            let k = k.trim().to_string();
            if pairs.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Syntax {
                    line: n + 1,
                    reason: format!("duplicate key `{k}`"),
                });
            }
        }
        let task = match pairs.remove("task") {
            Some(t) => value::<Task>("task", &t)?,
            None => Task::Counting,
        };
        let mut cfg = Self::defaults(task);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Sets one key; `task` can only be chosen at parse time.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "arm" => self.arm = value(key, v)?,
            "seed" => self.seed = value(key, v)?,
            "network" => {
                self.network = NetworkSpec::parse(v).map_err(|reason| ConfigError::Value {
                    key: key.into(),
                    reason,
                })?
            }
            "learning_rate" => self.sgd.learning_rate = value(key, v)?,
            "decay_factor" => self.sgd.decay_factor = value(key, v)?,
            "decay_interval" => self.sgd.decay_interval = value(key, v)?,
            "weight_decay" => self.sgd.weight_decay = value(key, v)?,
            "steps" => self.sgd.total_steps = value(key, v)?,
            "margin" => self.ranking.margin = value(key, v)?,
            "lambda" => self.ranking.tradeoff = value(key, v)?,
            "labeled" => self.labeled = value(key, v)?,
            "unlabeled" => self.unlabeled = value(key, v)?,
            "test" => self.test = value(key, v)?,
            "batch_labeled" => self.batch_labeled = value(key, v)?,
            "batch_groups" => self.batch_groups = value(key, v)?,
            "clip_norm" => self.clip_norm = value(key, v)?,
            "crop_k" => self.crop.k = value(key, v)?,
            "crop_s" => self.crop.s = value(key, v)?,
            "crop_r" => self.crop.r = value(key, v)?,
            "crop_anchor" => {
                self.crop.anchor = match v {
                    "area" => AnchorRegion::Area,
                    "per-dimension" => AnchorRegion::PerDimension,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            reason: "expected `area` or `per-dimension`".into(),
                        })
                    }
                }
            }
            "image_size" => {
                let n: usize = value(key, v)?;
                self.scene.width = n;
                self.scene.height = n;
            }
            "mean_count" => self.scene.mean_count = value(key, v)?,
            "blob_std" => self.scene.blob_std = value(key, v)?,
            "blob_peak" => self.scene.peak = value(key, v)?,
            "noise" => self.scene.noise = value(key, v)?,
            "mean_count_max" => self.mean_count_max = value(key, v)?,
            "zoom_min" => self.zoom.0 = value(key, v)?,
            "zoom_max" => self.zoom.1 = value(key, v)?,
            "count_target" => self.count_target = value(key, v)?,
            "density_sigma" => self.density_sigma = value(key, v)?,
            "groups_per_image" => self.groups_per_image = value(key, v)?,
            "distortions" => {
                self.distortions = v
                    .split(',')
                    .map(|s| DistortionKind::parse(s.trim()))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| ConfigError::Value {
                        key: key.into(),
                        reason: e.to_string(),
                    })?
            }
            "levels" => self.levels = value(key, v)?,
            "quality_size" => self.quality_size = value(key, v)?,
            "active_pairs" => self.active.pairs = value(key, v)?,
            "active_cycles" => self.active.cycles = value(key, v)?,
            "active_policy" => {
                self.active_policy = match v {
                    "both" => None,
                    other => Some(Policy::parse(other).ok_or_else(|| ConfigError::Value {
                        key: key.into(),
                        reason: "expected `certainty`, `random` or `both`".into(),
                    })?),
                }
            }
            "warm_start" => self.active.warm_start = value(key, v)?,
            "initial_fraction" => self.initial_fraction = value(key, v)?,
            "cycle_fraction" => self.cycle_fraction = value(key, v)?,
            "cycle_steps" => self.cycle_steps = value(key, v)?,
            "audit" => self.audit = value(key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "predictions" => self.predictions = Some(PathBuf::from(v)),
            "task" => {
                return Err(ConfigError::Value {
                    key: key.into(),
                    reason: "the task is fixed once parsing starts".into(),
                })
            }
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.sgd.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ranking.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.network.shapes().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.crop.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scene.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.labeled == 0 || self.test < 2 {
            return invalid("need at least one labeled and two test images".into());
        }
        if self.batch_labeled == 0 {
            return invalid("batch_labeled must be positive".into());
        }
        if self.arm == Arm::Multitask && (self.unlabeled == 0 || self.batch_groups == 0 || self.groups_per_image == 0) {
            return invalid("the multitask arm needs unlabeled images and batch_groups > 0".into());
        }
        if !(self.clip_norm >= 0.0) {
            return invalid("clip_norm must be non-negative".into());
        }
        let input = self.network.input_shape.as_slice();
        match self.task {
            Task::Counting => {
                if input != [1, self.crop.output_size, self.crop.output_size]
                    || self.scene.width != self.crop.output_size
                    || self.scene.height != self.crop.output_size
                {
                    return invalid(format!(
                        "counting network input {input:?}, image size {}x{} and crop output {} must agree",
                        self.scene.width, self.scene.height, self.crop.output_size
                    ));
                }
                if !(self.zoom.0 > 0.0 && self.zoom.0 <= self.zoom.1 && self.zoom.1.is_finite()) {
                    return invalid(format!("bad zoom range {:?}", self.zoom));
                }
                if !(self.mean_count_max >= 0.0 && self.mean_count_max.is_finite()) {
                    return invalid("mean_count_max must be finite and non-negative".into());
                }
                if self.mean_count_max > self.scene.mean_count && !(self.scene.mean_count > 0.0) {
                    return invalid("a mean-count range needs a positive lower end".into());
                }
                if !(self.density_sigma > 0.0) {
                    return invalid("density_sigma must be positive".into());
                }
            }
            Task::Quality => {
                if input != [1, self.quality_size, self.quality_size] {
                    return invalid(format!(
                        "quality network input {input:?} must be [1, {0}, {0}]",
                        self.quality_size
                    ));
                }
                if self.distortions.is_empty() {
                    return invalid("at least one distortion kind is required".into());
                }
                for k in &self.distortions {
                    if self.levels < 2 || self.levels > k.levels() {
                        return invalid(format!("{k} supports 2..={} levels, not {}", k.levels(), self.levels));
                    }
                }
            }
        }
        let output = self.network.output_shape().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.task == Task::Quality && output.iter().product::<usize>() != 1 {
            return invalid("quality networks must output one value per image".into());
        }
        if !(self.initial_fraction > 0.0 && self.initial_fraction <= 1.0)
            || !(self.cycle_fraction > 0.0 && self.cycle_fraction <= 1.0)
        {
            return invalid("active fractions must lie in (0, 1]".into());
        }
        if self.arm == Arm::Active {
            let initial = self.initial_count();
            let need = initial + self.active.cycles * self.per_cycle_count();
            if need > self.labeled {
                return invalid(format!(
                    "active learning needs {need} labels but the training pool has {}",
                    self.labeled
                ));
            }
            if self.active.pairs == 0 || self.active.cycles == 0 || self.cycle_steps == 0 {
                return invalid("active_pairs, active_cycles and cycle_steps must be positive".into());
            }
        }
        Ok(())
    }

    pub fn initial_count(&self) -> usize {
        ((self.labeled as f64 * self.initial_fraction).round() as usize).max(1)
    }

    pub fn per_cycle_count(&self) -> usize {
        ((self.labeled as f64 * self.cycle_fraction).round() as usize).max(1)
    }

    /// Every key with its current value, parseable by [`Self::parse`].
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("task", self.task.to_string());
        kv("arm", self.arm.to_string());
        kv("seed", self.seed.to_string());
        kv("network", self.network.describe());
        kv("learning_rate", fmt_f(self.sgd.learning_rate));
        kv("decay_factor", fmt_f(self.sgd.decay_factor));
        kv("decay_interval", self.sgd.decay_interval.to_string());
        kv("weight_decay", fmt_f(self.sgd.weight_decay));
        kv("steps", self.sgd.total_steps.to_string());
        kv("margin", fmt_f(self.ranking.margin));
        kv("lambda", fmt_f(self.ranking.tradeoff));
        kv("labeled", self.labeled.to_string());
        kv("unlabeled", self.unlabeled.to_string());
        kv("test", self.test.to_string());
        kv("batch_labeled", self.batch_labeled.to_string());
        kv("batch_groups", self.batch_groups.to_string());
        kv("clip_norm", fmt_f(self.clip_norm));
        kv("crop_k", self.crop.k.to_string());
        kv("crop_s", fmt_f(self.crop.s));
        kv("crop_r", fmt_f(self.crop.r));
        kv(
            "crop_anchor",
            match self.crop.anchor {
                AnchorRegion::Area => "area",
                AnchorRegion::PerDimension => "per-dimension",
            }
            .into(),
        );
        kv("image_size", self.scene.width.to_string());
        kv("mean_count", fmt_f(self.scene.mean_count));
        kv("blob_std", fmt_f(self.scene.blob_std));
        kv("blob_peak", fmt_f(self.scene.peak));
        kv("noise", fmt_f(self.scene.noise));
        kv("mean_count_max", fmt_f(self.mean_count_max));
        kv("zoom_min", fmt_f(self.zoom.0));
        kv("zoom_max", fmt_f(self.zoom.1));
        kv("count_target", self.count_target.to_string());
        kv("density_sigma", fmt_f(self.density_sigma));
        kv("groups_per_image", self.groups_per_image.to_string());
        kv(
            "distortions",
            self.distortions.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
        );
        kv("levels", self.levels.to_string());
        kv("quality_size", self.quality_size.to_string());
        kv("active_pairs", self.active.pairs.to_string());
        kv("active_cycles", self.active.cycles.to_string());
        kv(
            "active_policy",
            self.active_policy.map_or("both".into(), |p| p.to_string()),
        );
        kv("warm_start", self.active.warm_start.to_string());
        kv("initial_fraction", fmt_f(self.initial_fraction));
        kv("cycle_fraction", fmt_f(self.cycle_fraction));
        kv("cycle_steps", self.cycle_steps.to_string());
        kv("audit", self.audit.to_string());
        for (k, p) in [("data", &self.data), ("checkpoint", &self.checkpoint), ("predictions", &self.predictions)] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        s
    }
}

/// Shortest representation that parses back to the same `f64`.
fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        reason: format!("`{v}`: {e}"),
    })
}
