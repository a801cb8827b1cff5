//! The shared PK-batch triplet loop and the two pair-similarity trainers.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{load_head, prepare_sequence, PreparedSequence};
use super::embedding::EmbeddingHead;
use super::{derive_seed, ExperimentConfig, ScheduleConfig};
use crate::aggregation::{learned_backward, learned_forward, top_t_backward, top_t_similarity, LearnedTape, ProjectionLayer};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::triplet_hard_loss;
use crate::numerics::{Matrix, Vector};
use crate::optim::{AmsGrad, Gradients, Parameters};
use crate::sampling::sample_pk_batch;
use crate::scoring::{Mode, ScoringNet};
use crate::store::{FeatureStore, Split, Tracklet};

const BATCH_STREAM: u64 = 0xBA7C;
const DROPOUT_STREAM: u64 = 0xD409;
const FIXED_CORRUPTION_STREAM: u64 = 0xF1CE;
const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopTVariant {
    /// Train the projection on all-pairs mean similarity; select top-t% only
    /// at evaluation.
    #[serde(alias = "topt-e")]
    EvalOnly,
    /// Select top-t% during training as well.
    #[serde(alias = "topt-te")]
    TrainEval,
}

impl TopTVariant {
    pub fn tag(self) -> &'static str {
        match self {
            TopTVariant::EvalOnly => "topt-e",
            TopTVariant::TrainEval => "topt-te",
        }
    }

    /// Percentage used while training.
    pub fn train_t(self, t: f64) -> f64 {
        match self {
            TopTVariant::EvalOnly => 100.0,
            TopTVariant::TrainEval => t,
        }
    }
}

impl FromStr for TopTVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topt-e" | "eval-only" => Ok(TopTVariant::EvalOnly),
            "topt-te" | "train-eval" => Ok(TopTVariant::TrainEval),
            other => Err(Error::InvalidArgument(format!("unknown top-t variant {other:?}"))),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub batch_seed: u64,
    pub active_anchors: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triplet: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub softmax: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub log: Vec<LogRecord>,
}

impl<M> TrainOutcome<M> {
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("log serializes") + "\n")
            .collect()
    }

    /// Mean logged loss of each epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let epochs = self.log.last().map_or(0, |r| r.epoch + 1);
        (0..epochs)
            .map(|e| {
                let l: Vec<f64> = self.log.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
                l.iter().sum::<f64>() / l.len() as f64
            })
            .collect()
    }
}

/// A model scoring ordered sequence pairs, trainable by the triplet loop.
pub(crate) trait PairModel: Parameters {
    type Tape;
    fn forward_pairs(&mut self, pairs: &[(&[Vector], &[Vector])], rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Self::Tape)>;
    fn backward_pairs(&self, pairs: &[(&[Vector], &[Vector])], tape: Self::Tape, g: &[f64]) -> Result<Gradients>;
    fn dump(&self) -> Checkpoint;
}

impl PairModel for ScoringNet {
    type Tape = LearnedTape;

    fn forward_pairs(&mut self, pairs: &[(&[Vector], &[Vector])], rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, LearnedTape)> {
        learned_forward(pairs, self, Mode::Train, rng)
    }

    fn backward_pairs(&self, _: &[(&[Vector], &[Vector])], tape: LearnedTape, g: &[f64]) -> Result<Gradients> {
        learned_backward(self, &tape, g)
    }

    fn dump(&self) -> Checkpoint {
        self.to_checkpoint()
    }
}

struct TopTModel {
    proj: ProjectionLayer,
    t: f64,
}

impl Parameters for TopTModel {
    fn tensors(&self) -> Vec<&[f64]> {
        self.proj.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.proj.tensors_mut()
    }
}

impl PairModel for TopTModel {
    type Tape = ();

    fn forward_pairs(&mut self, pairs: &[(&[Vector], &[Vector])], _: &mut ChaCha8Rng) -> Result<(Vec<f64>, ())> {
        let s = pairs
            .iter()
            .map(|(q, g)| top_t_similarity(q, g, &self.proj, self.t))
            .collect::<Result<_>>()?;
        Ok((s, ()))
    }

    fn backward_pairs(&self, pairs: &[(&[Vector], &[Vector])], _: (), g: &[f64]) -> Result<Gradients> {
        let mut grads = self.proj.zero_grads();
        for (&(q, gal), &gs) in pairs.iter().zip(g) {
            if gs != 0.0 {
                top_t_backward(q, gal, &self.proj, self.t, gs, &mut grads)?;
            }
        }
        Ok(grads)
    }

    fn dump(&self) -> Checkpoint {
        self.proj.to_checkpoint()
    }
}

fn diverged(epoch: usize, step: usize, batch_seed: u64, loss: f64, model: &Checkpoint, dump_dir: Option<&Path>) -> Error {
    let dump = dump_dir.and_then(|dir| {
        let path = dir.join("divergence.csn");
        let info = serde_json::json!({ "epoch": epoch, "step": step, "batch_seed": batch_seed, "loss": loss });
        let ok = fs::create_dir_all(dir).is_ok()
            && model.save(&path).is_ok()
            && fs::write(dir.join("divergence.json"), info.to_string() + "\n").is_ok();
        ok.then_some(path)
    });
    log::error!("training diverged at epoch {epoch}, step {step}");
    Error::Divergence { epoch, step, dump }
}

fn is_numerical(e: &Error) -> bool {
    matches!(e.root(), Error::NonFinite(_))
}

pub(crate) struct TrainSet<'a> {
    pub tracklets: Vec<&'a Tracklet>,
    pub person_ids: Vec<u32>,
    /// Per-tracklet corruption fixed by seed, when not re-rolled.
    fixed: Option<Vec<PreparedSequence>>,
}

impl<'a> TrainSet<'a> {
    pub fn new(
        store: &'a FeatureStore,
        sched: &ScheduleConfig,
        num_clips: usize,
        head: Option<&EmbeddingHead>,
        seed: u64,
    ) -> Result<Self> {
        let tracklets = store.select_split(Split::Train);
        if tracklets.is_empty() {
            return Err(Error::Manifest("store has no train tracklets".into()));
        }
        let person_ids = tracklets.iter().map(|t| t.person_id).collect();
        let fixed = if sched.reroll_corruption {
            None
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[FIXED_CORRUPTION_STREAM]));
            Some(
                tracklets
                    .iter()
                    .map(|t| {
                        prepare_sequence(t, num_clips, head, true, Some((sched.max_corrupt_clips, sched.corruption_strength, &mut rng)))
                    })
                    .collect::<Result<_>>()?,
            )
        };
        Ok(Self {
            tracklets,
            person_ids,
            fixed,
        })
    }

    /// Batches per epoch: ⌊N / PK⌋, at least one.
    pub fn batches_per_epoch(&self, sched: &ScheduleConfig) -> usize {
        (self.tracklets.len() / (sched.p * sched.k)).max(1)
    }

    pub fn draw(
        &self,
        indices: &[usize],
        sched: &ScheduleConfig,
        num_clips: usize,
        head: Option<&EmbeddingHead>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<PreparedSequence>> {
        indices
            .iter()
            .map(|&i| match &self.fixed {
                Some(f) => Ok(f[i].clone()),
                None => prepare_sequence(
                    self.tracklets[i],
                    num_clips,
                    head,
                    true,
                    Some((sched.max_corrupt_clips, sched.corruption_strength, &mut *rng)),
                ),
            })
            .collect()
    }
}

pub(crate) fn batch_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    derive_seed(seed, &[BATCH_STREAM, epoch as u64, step as u64])
}

fn run_pair_training<M: PairModel>(
    model: &mut M,
    data: &TrainSet<'_>,
    sched: &ScheduleConfig,
    num_clips: usize,
    head: Option<&EmbeddingHead>,
    seed: u64,
    dump_dir: Option<&Path>,
) -> Result<Vec<LogRecord>> {
    let mut opt = AmsGrad::new(sched.optimizer);
    let mut log = Vec::new();
    let per_epoch = data.batches_per_epoch(sched);
    for epoch in 0..sched.epochs {
        let lr = sched.lr.lr(epoch as i64)?;
        for step in 0..per_epoch {
            let bseed = batch_seed(seed, epoch, step);
            let mut rng = ChaCha8Rng::seed_from_u64(bseed);
            let batch = sample_pk_batch(&data.person_ids, sched.p, sched.k, &mut rng)?;
            let seqs = data.draw(&batch.indices, sched, num_clips, head, &mut rng)?;
            let n = seqs.len();
            let mut pairs = Vec::with_capacity(n * (n - 1));
            let mut cells = Vec::with_capacity(n * (n - 1));
            for a in 0..n {
                for b in 0..n {
                    if a != b {
                        pairs.push((seqs[a].clips.as_slice(), seqs[b].clips.as_slice()));
                        cells.push((a, b));
                    }
                }
            }
            let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(bseed, &[DROPOUT_STREAM]));
            let fail = |loss: f64, m: &M| diverged(epoch, step, bseed, loss, &m.dump(), dump_dir);
            let (sims, tape) = match model.forward_pairs(&pairs, &mut drop_rng) {
                Ok(v) => v,
                Err(e) if is_numerical(&e) => return Err(fail(f64::NAN, model)),
                Err(e) => return Err(e),
            };
            let mut dist = Matrix::zeros(n, n);
            for (&(a, b), &s) in cells.iter().zip(&sims) {
                dist.set(a, b, -s);
            }
            let out = triplet_hard_loss(&dist, &batch.labels, sched.margin)?;
            if !out.loss.is_finite() {
                return Err(fail(out.loss, model));
            }
            let g: Vec<f64> = cells.iter().map(|&(a, b)| -out.grad.get(a, b)).collect();
            let grads = match model.backward_pairs(&pairs, tape, &g) {
                Ok(g) => g,
                Err(e) if is_numerical(&e) => return Err(fail(out.loss, model)),
                Err(e) => return Err(e),
            };
            if let Err(e) = opt.step(model.tensors_mut(), &grads, lr) {
                return Err(if is_numerical(&e) { fail(out.loss, model) } else { e });
            }
            log.push(LogRecord {
                epoch,
                step,
                loss: out.loss,
                lr,
                batch_seed: bseed,
                active_anchors: out.active,
                triplet: None,
                softmax: None,
                accuracy: None,
            });
            log::debug!("epoch {epoch} step {step} loss {:.5}", out.loss);
        }
        log::info!(
            "epoch {epoch}: mean loss {:.5}",
            log.iter().rev().take(per_epoch).map(|r| r.loss).sum::<f64>() / per_epoch as f64
        );
    }
    Ok(log)
}

fn feature_dim(store: &FeatureStore, head: Option<&EmbeddingHead>) -> usize {
    head.map_or(store.feature_dim(), EmbeddingHead::output_dim)
}

/// Trains the importance-scoring network on the store's train split.
pub fn train_aggregation(
    cfg: &ExperimentConfig,
    store: &FeatureStore,
    dump_dir: Option<&Path>,
) -> Result<TrainOutcome<ScoringNet>> {
    let head = load_head(cfg)?;
    let sched = &cfg.aggregation.schedule;
    let data = TrainSet::new(store, sched, cfg.num_clips, head.as_ref(), cfg.seed)?;
    let mut init = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[INIT_STREAM]));
    let mut net = ScoringNet::new(feature_dim(store, head.as_ref()), cfg.aggregation.hidden, &mut init)
        .with_dropout(cfg.aggregation.dropout);
    if cfg.aggregation.zero_init_output {
        net.w_out.fill(0.0);
    }
    let log = run_pair_training(&mut net, &data, sched, cfg.num_clips, head.as_ref(), cfg.seed, dump_dir)?;
    Ok(TrainOutcome { model: net, log })
}

/// Trains the top-t% projection, starting from the identity.
pub fn train_top_t(
    cfg: &ExperimentConfig,
    store: &FeatureStore,
    variant: TopTVariant,
    t: f64,
    dump_dir: Option<&Path>,
) -> Result<TrainOutcome<ProjectionLayer>> {
    crate::aggregation::top_t_count(1, t)?;
    let head = load_head(cfg)?;
    let sched = &cfg.top_t.schedule;
    let data = TrainSet::new(store, sched, cfg.num_clips, head.as_ref(), cfg.seed)?;
    let mut model = TopTModel {
        proj: ProjectionLayer::identity(feature_dim(store, head.as_ref())),
        t: variant.train_t(t),
    };
    let log = run_pair_training(&mut model, &data, sched, cfg.num_clips, head.as_ref(), cfg.seed, dump_dir)?;
    Ok(TrainOutcome { model: model.proj, log })
}
