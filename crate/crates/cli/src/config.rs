//! Experiment configuration (TOML). Unknown keys are rejected at every
//! level.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use couq_core::engine::CouqConfig;
use couq_core::featstore::{MixRatio, StreamConfig, SyntheticSpec};
use couq_core::learner::ClassifierConfig;
use couq_core::ClassId;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub stream: StreamSection,
    #[serde(default)]
    pub couq: CouqConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub replay: ReplaySection,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: OutputSection,
}

/// Either a feature file or a synthetic spec regenerated for every seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    pub schedule: Vec<Vec<ClassId>>,
    #[serde(default)]
    pub mix: MixRatio,
    #[serde(default = "default_holdout")]
    pub holdout_frac: f64,
    #[serde(default = "default_test")]
    pub test_frac: f64,
    #[serde(default)]
    pub new_per_class: Option<usize>,
}

fn default_holdout() -> f64 {
    0.35
}

fn default_test() -> f64 {
    0.2
}

impl StreamSection {
    pub fn stream_config(&self, seed: u64) -> StreamConfig {
        StreamConfig {
            schedule: self.schedule.clone(),
            mix: self.mix,
            holdout_frac: self.holdout_frac,
            test_frac: self.test_frac,
            new_per_class: self.new_per_class,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplaySection {
    pub capacity: usize,
}

impl Default for ReplaySection {
    fn default() -> Self {
        Self { capacity: 2500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Per-task result JSON and prediction CSVs next to the reports.
    pub task_artifacts: bool,
    pub checkpoints: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            task_artifacts: true,
            checkpoints: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Semi-supervised, ambiguity-driven queries and pseudo-labels.
    Couq,
    CouqUnsup,
    ErEntropy,
    ErMargin,
    ErSoftmax,
    PseudoerEntropy,
    PseudoerMargin,
    PseudoerSoftmax,
    Dfm,
    Incdfm,
    /// Every pool record labeled with its true class.
    OracleUpper,
    /// Pseudo-labels replaced by ground truth.
    GtSup,
    NoIters,
    AlTop,
    AlRand,
    /// Ambiguity-driven queries without pseudo-labels.
    AlOnly,
}

impl Method {
    pub const ALL: [Method; 16] = [
        Method::Couq,
        Method::CouqUnsup,
        Method::ErEntropy,
        Method::ErMargin,
        Method::ErSoftmax,
        Method::PseudoerEntropy,
        Method::PseudoerMargin,
        Method::PseudoerSoftmax,
        Method::Dfm,
        Method::Incdfm,
        Method::OracleUpper,
        Method::GtSup,
        Method::NoIters,
        Method::AlTop,
        Method::AlRand,
        Method::AlOnly,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Method::Couq => "couq",
            Method::CouqUnsup => "couq_unsup",
            Method::ErEntropy => "er_entropy",
            Method::ErMargin => "er_margin",
            Method::ErSoftmax => "er_softmax",
            Method::PseudoerEntropy => "pseudoer_entropy",
            Method::PseudoerMargin => "pseudoer_margin",
            Method::PseudoerSoftmax => "pseudoer_softmax",
            Method::Dfm => "dfm",
            Method::Incdfm => "incdfm",
            Method::OracleUpper => "oracle_upper",
            Method::GtSup => "gt_sup",
            Method::NoIters => "no_iters",
            Method::AlTop => "al_top",
            Method::AlRand => "al_rand",
            Method::AlOnly => "al_only",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .iter()
            .find(|m| m.tag() == s)
            .copied()
            .ok_or_else(|| CliError::Config(format!("unknown method `{s}`")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks that need no data. Class existence for file datasets is
    /// checked once the file is loaded.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return bad("dataset needs exactly one of `path` or `synthetic`".into()),
        }
        let s = &self.stream;
        for (name, v) in [("holdout_frac", s.holdout_frac), ("test_frac", s.test_frac)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("stream.{name} must lie in (0, 1), got {v}"));
            }
        }
        if s.holdout_frac + s.test_frac >= 1.0 {
            return bad("holdout_frac + test_frac must stay below 1".into());
        }
        if s.mix.old == 0 || s.mix.new == 0 {
            return bad("mix ratio terms must be positive".into());
        }
        if s.schedule.len() < 2 || s.schedule.iter().any(|t| t.is_empty()) {
            return bad("schedule needs an initial class set and at least one non-empty task".into());
        }
        let mut seen = BTreeSet::new();
        for c in s.schedule.iter().flatten() {
            if !seen.insert(*c) {
                return bad(format!("class {c} appears twice in the schedule"));
            }
        }
        if let Some(spec) = &self.dataset.synthetic {
            if let Some(c) = seen.iter().find(|c| **c < 0 || **c as usize >= spec.n_classes) {
                return bad(format!("schedule references class {c}, synthetic data has {}", spec.n_classes));
            }
        }
        if !(self.couq.fit.variance_retained > 0.0 && self.couq.fit.variance_retained <= 1.0) {
            return bad("couq.fit.variance_retained must lie in (0, 1]".into());
        }
        self.couq.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.couq.mode != couq_core::engine::Mode::SemiSupervised {
            return bad("couq.mode is set per method; leave it at semi_supervised".into());
        }
        if self.replay.capacity == 0 {
            return bad("replay.capacity must be positive".into());
        }
        if self.classifier.train.hidden == 0 || self.classifier.train.batch_size == 0 {
            return bad("classifier hidden width and batch size must be positive".into());
        }
        if self.methods.is_empty() {
            return bad("no methods configured".into());
        }
        if self.seeds.is_empty() {
            return bad("no seeds configured".into());
        }
        Ok(())
    }

    /// Checks the schedule against the classes present in loaded data.
    pub fn check_classes(&self, present: &[ClassId]) -> Result<(), CliError> {
        for c in self.stream.schedule.iter().flatten() {
            if !present.contains(c) {
                return Err(CliError::Config(format!("schedule references class {c} absent from the dataset")));
            }
        }
        Ok(())
    }
}

pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, CliError>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| CliError::Config(format!("`{p}`: {e}"))))
        .collect()
}
