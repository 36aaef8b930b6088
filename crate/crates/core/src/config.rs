//! Experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synthetic::SyntheticConfig;
use crate::error::{Error, Result};
use crate::eval::{CandidatePool, POOL_SIZE};
use crate::fisher::{BatchOrder, SamplingMethod, SamplingSpec};
use crate::frameworks::{FrameworkKind, FrameworkSpec};
use crate::merge::{MergeMode, DEFAULT_EPSILON};
use crate::model::optim::AdamConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::util::{derive_seed, sha256_hex, Stream};

pub const DESK_ENV: &str = "MERGE_REC_DESK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `user,item,rating,timestamp` file; relative paths resolve against the
    /// config file's directory.
    pub ratings: Option<PathBuf>,
    /// Used when `ratings` is absent.
    pub synthetic: Option<SyntheticConfig>,
    pub min_seq_len: usize,
    /// Deterministic user subsample applied after ingestion.
    pub max_users: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            ratings: None,
            synthetic: None,
            min_seq_len: 5,
            max_users: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    /// Every member trained from scratch.
    BaselineSetting,
    /// A shared cross-entropy baseline, then per-framework fine-tuning.
    FinetuneSetting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpochConfig {
    pub baseline: usize,
    pub finetune: usize,
    pub post_merge: usize,
}

impl Default for EpochConfig {
    fn default() -> Self {
        Self {
            baseline: 20,
            finetune: 5,
            post_merge: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FisherConfig {
    pub sampling: SamplingSpec,
    pub batch_size: usize,
    pub order: BatchOrder,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingSpec::new(SamplingMethod::TopK, 10),
            batch_size: 32,
            order: BatchOrder::Sorted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub mode: MergeMode,
    /// One per framework; empty means all 1.
    pub lambdas: Vec<f64>,
    pub epsilon: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            mode: MergeMode::Fisher,
            lambdas: Vec::new(),
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolRegime {
    Full,
    Random,
    Popular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pools: Vec<PoolRegime>,
    pub ks: Vec<usize>,
    pub pool_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pools: vec![PoolRegime::Full, PoolRegime::Random, PoolRegime::Popular],
            ks: vec![10, 20],
            pool_size: POOL_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Fisher sampling variants merged and evaluated side by side.
    pub sweep: Vec<SamplingSpec>,
    /// Also merge without the weakest member.
    pub drop_weakest: bool,
    /// Train a second-seed copy of each framework for error inconsistency.
    pub twins: bool,
    pub topk_mass_sizes: Vec<usize>,
    /// Project members and merges onto the plane of the first three members.
    pub plane: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            sweep: Vec::new(),
            drop_weakest: false,
            twins: false,
            topk_mass_sizes: vec![10, 30, 50],
            plane: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub frameworks: Vec<FrameworkSpec>,
    pub pipeline: PipelineKind,
    pub epochs: EpochConfig,
    pub fisher: FisherConfig,
    pub merge: MergeConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            frameworks: FrameworkKind::ALL.iter().map(|&k| FrameworkSpec::new(k)).collect(),
            pipeline: PipelineKind::FinetuneSetting,
            epochs: EpochConfig::default(),
            fisher: FisherConfig::default(),
            merge: MergeConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small synthetic setup that runs the full pipeline in minutes.
    pub fn desk() -> Self {
        let sizes = [10, 30, 50];
        let mut sweep: Vec<SamplingSpec> = [SamplingMethod::TopK, SamplingMethod::Random, SamplingMethod::ModelBased]
            .iter()
            .flat_map(|&m| sizes.iter().map(move |&n| SamplingSpec::new(m, n)))
            .collect();
        sweep.push(SamplingSpec::target());
        Self {
            data: DataConfig {
                ratings: None,
                synthetic: Some(SyntheticConfig::default()),
                min_seq_len: 3,
                max_users: Some(200),
            },
            model: ModelConfig::desk(),
            train: TrainConfig {
                batch_size: 16,
                mask_prob: 0.2,
                adam: AdamConfig {
                    lr: 5e-3,
                    ..AdamConfig::default()
                },
            },
            epochs: EpochConfig {
                baseline: 200,
                finetune: 20,
                post_merge: 1,
            },
            fisher: FisherConfig {
                batch_size: 16,
                ..FisherConfig::default()
            },
            analysis: AnalysisConfig {
                sweep,
                drop_weakest: true,
                twins: true,
                topk_mass_sizes: vec![10, 30, 50],
                plane: true,
            },
            ..Self::default()
        }
    }

    /// Desk preset when `MERGE_REC_DESK=1`, otherwise the full-size defaults.
    pub fn preset_from_env() -> Self {
        if std::env::var(DESK_ENV).is_ok_and(|v| v == "1") {
            Self::desk()
        } else {
            Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    /// Reads a config file and resolves relative data paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(r), Some(dir)) = (cfg.data.ratings.as_mut(), path.parent()) {
            if r.is_relative() {
                *r = dir.join(&*r);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn seed_for(&self, stream: Stream, index: u64) -> u64 {
        derive_seed(self.seed, stream, index)
    }

    pub fn pools(&self) -> Vec<CandidatePool> {
        let seed = self.seed_for(Stream::Eval, 0);
        self.eval
            .pools
            .iter()
            .map(|r| match r {
                PoolRegime::Full => CandidatePool::Full,
                PoolRegime::Random => CandidatePool::Random {
                    k: self.eval.pool_size,
                    seed,
                },
                PoolRegime::Popular => CandidatePool::Popular { k: self.eval.pool_size },
            })
            .collect()
    }

    pub fn lambda(&self, member: usize) -> f64 {
        self.merge.lambdas.get(member).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match (&self.data.ratings, &self.data.synthetic) {
            (Some(p), _) if !p.is_file() => return bad(format!("ratings file {} not found", p.display())),
            (None, None) => return bad("data needs a ratings path or a synthetic block".into()),
            _ => {}
        }
        if self.data.min_seq_len < 3 {
            return bad("min_seq_len must be >= 3".into());
        }
        if self.data.max_users == Some(0) {
            return bad("max_users must be >= 1".into());
        }
        let mut probe = self.model.clone();
        probe.num_items = probe.num_items.max(1);
        probe.validate()?;
        self.train.validate()?;
        if self.frameworks.is_empty() {
            return bad("at least one framework is required".into());
        }
        for (i, f) in self.frameworks.iter().enumerate() {
            f.validate()?;
            if self.frameworks[..i].iter().any(|g| g.kind == f.kind) {
                return bad(format!("framework {} listed twice", f.kind));
            }
        }
        if self.epochs.baseline == 0 {
            return bad("baseline epochs must be >= 1".into());
        }
        if self.pipeline == PipelineKind::FinetuneSetting && self.epochs.finetune == 0 {
            return bad("finetune epochs must be >= 1".into());
        }
        if self.fisher.batch_size == 0 {
            return bad("Fisher batch size must be >= 1".into());
        }
        if self.fisher.sampling.n == 0 || self.analysis.sweep.iter().any(|s| s.n == 0) {
            return bad("Fisher sample size must be >= 1".into());
        }
        if !self.merge.lambdas.is_empty() && self.merge.lambdas.len() != self.frameworks.len() {
            return bad(format!(
                "{} lambdas for {} frameworks",
                self.merge.lambdas.len(),
                self.frameworks.len()
            ));
        }
        if self.merge.lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return bad("lambdas must be finite and > 0".into());
        }
        if !(self.merge.epsilon.is_finite() && self.merge.epsilon >= 0.0) {
            return bad("merge epsilon must be finite and >= 0".into());
        }
        if self.eval.pools.is_empty() || self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("eval needs pools and k values >= 1".into());
        }
        if !self.eval.ks.contains(&10) {
            return bad("eval k list must include 10".into());
        }
        if self.eval.pool_size == 0 {
            return bad("pool size must be >= 1".into());
        }
        let sizes = &self.analysis.topk_mass_sizes;
        if sizes.contains(&0) || sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad("top-k mass sizes must be ascending and >= 1".into());
        }
        if self.analysis.plane && self.frameworks.len() < 3 {
            return bad("plane projection needs at least three frameworks".into());
        }
        Ok(())
    }
}
