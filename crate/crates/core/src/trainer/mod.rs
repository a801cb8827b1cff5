//! Experiment configuration and training drivers.
//!
//! * [`train_embedding_head`]: affine head + classifier on stored clip
//!   features, batch-hard triplet (euclidean) plus softmax cross-entropy.
//! * [`train_aggregation`]: the importance-scoring network, triplet loss on
//!   `d = −s` over all ordered tracklet pairs of each PK batch.
//! * [`train_top_t`]: the projection layer of the top-t% baseline.
//! * [`corruption_sweep`]: every method at every corruption level.

mod data;
mod embedding;
mod harness;
mod sweep;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AmsGradConfig, LrSchedule};
use crate::synth::{SynthConfig, DEFAULT_CORRUPTION_STRENGTH};

pub use data::{
    evaluate_estimator, importance_discrimination, load_experiment_store, load_head, prepare_eval, select_clip_indices,
    EvalSet, ImportanceStats, PreparedSequence,
};
pub use embedding::{train_embedding_head, EmbeddingHead, EmbeddingOutcome};
pub use harness::{train_aggregation, train_top_t, LogRecord, TopTVariant, TrainOutcome};
pub use sweep::{
    corruption_sweep, multi_clip_pooling, pooling_csv, Headline, ImportanceRow, PoolingRow, SweepCell, SweepReport, SweepRow,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Feature store to use; when absent the `synth` section generates one.
    pub store: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Clips per sequence (M), chosen evenly from the stored clips.
    pub num_clips: usize,
    /// Frozen embedding head applied to every clip before aggregation.
    pub embedding_head: Option<PathBuf>,
    /// Head already in memory; takes precedence over `embedding_head`.
    #[serde(skip)]
    pub(crate) resolved_head: Option<EmbeddingHead>,
    pub aggregation: AggregationTrainConfig,
    pub top_t: TopTTrainConfig,
    pub embedding: EmbeddingTrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            store: None,
            synth: SynthConfig::default(),
            num_clips: 8,
            embedding_head: None,
            resolved_head: None,
            aggregation: AggregationTrainConfig::default(),
            top_t: TopTTrainConfig::default(),
            embedding: EmbeddingTrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Keys absent from `text` keep their defaults in context: a partial
    /// `[top_t.schedule]` keeps the top-t epochs, not the generic ones.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(Self::default()).expect("config serializes");
        merge_tables(&mut merged, user);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clips == 0 {
            return Err(Error::Config("num_clips must be positive".into()));
        }
        if let Some(p) = &self.store {
            if !p.exists() {
                return Err(Error::Config(format!("store {} does not exist", p.display())));
            }
        } else {
            self.synth.validate()?;
        }
        if let Some(p) = &self.embedding_head {
            if !p.exists() {
                return Err(Error::Config(format!("embedding head {} does not exist", p.display())));
            }
        }
        self.aggregation.schedule.validate("aggregation")?;
        self.top_t.schedule.validate("top_t")?;
        self.embedding.schedule.validate("embedding")?;
        for &t in &self.sweep.t_values {
            crate::aggregation::top_t_count(1, t)?;
        }
        if self.top_t.t <= 0.0 || self.top_t.t > 100.0 {
            return Err(Error::Config(format!("top_t.t = {} outside (0, 100]", self.top_t.t)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Batch shape, schedule and corruption shared by every trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub p: usize,
    pub k: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub optimizer: AmsGradConfig,
    pub margin: f64,
    /// Corruption applied to training sequences.
    pub max_corrupt_clips: usize,
    pub corruption_strength: f64,
    /// Draw fresh corruption every time a tracklet enters a batch; when
    /// false each tracklet keeps one corruption fixed by the seed.
    pub reroll_corruption: bool,
}

impl ScheduleConfig {
    fn validate(&self, section: &str) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{section}: {m}")));
        if self.p < 2 || self.k < 1 {
            return bad(format!("P = {}, K = {}: need P ≥ 2 and K ≥ 1", self.p, self.k));
        }
        if !self.margin.is_finite() || self.margin < 0.0 {
            return bad(format!("margin {} must be finite and ≥ 0", self.margin));
        }
        if !(0.0..=1.0).contains(&self.corruption_strength) {
            return bad("corruption_strength outside [0, 1]".into());
        }
        if !(self.lr.initial.is_finite() && self.lr.initial >= 0.0 && self.lr.decay_factor > 0.0) {
            return bad("learning-rate schedule must be finite and positive".into());
        }
        Ok(())
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            p: 8,
            k: 4,
            epochs: 12,
            lr: LrSchedule {
                initial: 1.0e-3,
                ..LrSchedule::default()
            },
            optimizer: AmsGradConfig::default(),
            margin: 1.0,
            max_corrupt_clips: 4,
            corruption_strength: DEFAULT_CORRUPTION_STRENGTH,
            reroll_corruption: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationTrainConfig {
    pub hidden: usize,
    pub dropout: f64,
    /// Start from zero output weights, so the untrained aggregator weights
    /// every clip pair equally.
    pub zero_init_output: bool,
    pub schedule: ScheduleConfig,
}

impl Default for AggregationTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            dropout: crate::scoring::DEFAULT_DROPOUT,
            zero_init_output: true,
            schedule: ScheduleConfig {
                lr: LrSchedule {
                    initial: 3.0e-3,
                    ..LrSchedule::default()
                },
                ..ScheduleConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopTTrainConfig {
    pub t: f64,
    pub variant: TopTVariant,
    pub schedule: ScheduleConfig,
}

impl Default for TopTTrainConfig {
    fn default() -> Self {
        Self {
            t: 50.0,
            variant: TopTVariant::EvalOnly,
            schedule: ScheduleConfig {
                epochs: 6,
                ..ScheduleConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingTrainConfig {
    /// Output width of the head; 0 keeps the feature dimension.
    pub embedding_dim: usize,
    pub use_triplet: bool,
    pub use_softmax: bool,
    pub schedule: ScheduleConfig,
}

impl Default for EmbeddingTrainConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 0,
            use_triplet: true,
            use_softmax: true,
            schedule: ScheduleConfig {
                epochs: 10,
                margin: 0.3,
                max_corrupt_clips: 0,
                lr: LrSchedule {
                    initial: 1.0e-2,
                    decay_factor: 10.0,
                    decay_epochs: vec![8],
                },
                ..ScheduleConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Drop gallery entries with the query's person and camera.
    pub cross_camera: bool,
    pub max_corrupt_clips: usize,
    pub corruption_strength: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cross_camera: true,
            max_corrupt_clips: 0,
            corruption_strength: DEFAULT_CORRUPTION_STRENGTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub max_corrupt: Vec<usize>,
    pub t_values: Vec<f64>,
    pub variants: Vec<TopTVariant>,
    /// Add mean-pooling rows (normalized and raw).
    pub include_mean_pool: bool,
    /// Where per-cell checkpoints are read from (and written to when
    /// training in place).
    pub checkpoint_dir: Option<PathBuf>,
    pub train_in_place: bool,
    /// Without a configured head, train one first and feed every method
    /// its output.
    pub train_embedding_head: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            max_corrupt: vec![0, 4, 7],
            t_values: vec![20.0, 50.0, 100.0],
            variants: vec![TopTVariant::EvalOnly],
            include_mean_pool: false,
            checkpoint_dir: None,
            train_in_place: true,
            train_embedding_head: true,
        }
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Deterministic 64-bit mixing (splitmix64 finalizer).
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}
