//! Turning stored tracklets into the normalized clip sequences the
//! estimators consume, plus evaluation helpers.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::embedding::EmbeddingHead;
use super::{derive_seed, ExperimentConfig};
use crate::aggregation::{aggregate_learned_batch, pairwise_similarity_matrix, Estimator};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, SequenceLabel};
use crate::numerics::{l2_normalize, Vector};
use crate::sampling::sample_clip_starts;
use crate::scoring::ScoringNet;
use crate::store::{read_store, FeatureStore, Split, Tracklet};
use crate::synth::{corrupt_clips, generate};

const EVAL_CORRUPTION_STREAM: u64 = 0xE7A1;

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSequence {
    pub tracklet_id: String,
    pub label: SequenceLabel,
    pub clips: Vec<Vector>,
    pub corrupted: Vec<bool>,
}

/// `m` evenly spaced positions among `stored` clips.
pub fn select_clip_indices(stored: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > stored {
        return Err(Error::Config(format!(
            "cannot take {m} clips from a sequence of {stored}"
        )));
    }
    sample_clip_starts(stored, m, 1)
}

pub fn load_experiment_store(cfg: &ExperimentConfig) -> Result<FeatureStore> {
    match &cfg.store {
        Some(path) => read_store(path),
        None => generate(&cfg.synth),
    }
}

/// The frozen embedding head named by the config, if any.
pub fn load_head(cfg: &ExperimentConfig) -> Result<Option<EmbeddingHead>> {
    if let Some(h) = &cfg.resolved_head {
        return Ok(Some(h.clone()));
    }
    cfg.embedding_head
        .as_ref()
        .map(|p| EmbeddingHead::from_checkpoint(&Checkpoint::load(p)?))
        .transpose()
}

/// Selects `m` clips, optionally corrupts them, applies the head and
/// (optionally) ℓ2-normalizes.
pub(crate) fn prepare_sequence<R: Rng + ?Sized>(
    t: &Tracklet,
    m: usize,
    head: Option<&EmbeddingHead>,
    normalize: bool,
    corruption: Option<(usize, f64, &mut R)>,
) -> Result<PreparedSequence> {
    let idx = select_clip_indices(t.num_clips(), m)?;
    let mut clips: Vec<Vector> = idx.iter().map(|&i| t.clip_features[i].clone()).collect();
    let mut corrupted: Vec<bool> = idx.iter().map(|&i| t.is_corrupted(i)).collect();
    if let Some((max, strength, rng)) = corruption {
        if max > 0 {
            let (c, mask) = corrupt_clips(&clips, max.min(m), strength, rng)?;
            clips = c;
            corrupted.iter_mut().zip(mask).for_each(|(a, b)| *a |= b);
        }
    }
    if let Some(h) = head {
        clips = clips.iter().map(|c| h.embed(c)).collect::<Result<_>>()?;
    }
    if normalize {
        clips = clips.iter().map(l2_normalize).collect::<Result<_>>()?;
    }
    Ok(PreparedSequence {
        tracklet_id: t.tracklet_id.clone(),
        label: SequenceLabel {
            person_id: t.person_id,
            camera_id: t.camera_id,
        },
        clips,
        corrupted,
    })
}

/// Query and gallery sequences ready for evaluation.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub queries: Vec<PreparedSequence>,
    pub gallery: Vec<PreparedSequence>,
}

impl EvalSet {
    fn slices(seqs: &[PreparedSequence]) -> Vec<&[Vector]> {
        seqs.iter().map(|s| s.clips.as_slice()).collect()
    }

    fn labels(seqs: &[PreparedSequence]) -> Vec<SequenceLabel> {
        seqs.iter().map(|s| s.label).collect()
    }
}

/// Builds the query/gallery sets. Corruption (when `max_corrupt > 0`) is
/// fixed by `seed`, so repeated evaluations see the same corrupted clips.
pub fn prepare_eval(
    store: &FeatureStore,
    num_clips: usize,
    head: Option<&EmbeddingHead>,
    normalize: bool,
    max_corrupt: usize,
    strength: f64,
    seed: u64,
) -> Result<EvalSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[EVAL_CORRUPTION_STREAM, max_corrupt as u64]));
    let mut build = |split: Split| -> Result<Vec<PreparedSequence>> {
        store
            .select_split(split)
            .into_iter()
            .map(|t| prepare_sequence(t, num_clips, head, normalize, Some((max_corrupt, strength, &mut rng))))
            .collect()
    };
    let queries = build(Split::Query)?;
    let gallery = build(Split::Gallery)?;
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Manifest("store has no query or no gallery tracklets".into()));
    }
    Ok(EvalSet { queries, gallery })
}

pub fn evaluate_estimator(
    set: &EvalSet,
    est: Estimator<'_>,
    cross_camera: bool,
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    let sim = pairwise_similarity_matrix(&EvalSet::slices(&set.queries), &EvalSet::slices(&set.gallery), est)?;
    evaluate(
        &sim,
        &EvalSet::labels(&set.queries),
        &EvalSet::labels(&set.gallery),
        cross_camera,
        config_echo,
    )
}

/// Mean importance score over the clip pairs of query × gallery sequence
/// pairs, split by whether either clip is corrupted. With
/// `same_person_only` only matching sequence pairs are counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImportanceStats {
    pub clean_mean: f64,
    pub corrupted_mean: f64,
    pub clean_pairs: usize,
    pub corrupted_pairs: usize,
}

impl ImportanceStats {
    /// `clean_mean / corrupted_mean`.
    pub fn ratio(&self) -> f64 {
        self.clean_mean / self.corrupted_mean
    }
}

pub fn importance_discrimination(set: &EvalSet, net: &ScoringNet, same_person_only: bool) -> Result<ImportanceStats> {
    let rows: Vec<Result<[f64; 4]>> = set
        .queries
        .par_iter()
        .map(|q| {
            let gallery: Vec<&PreparedSequence> = set
                .gallery
                .iter()
                .filter(|g| !same_person_only || g.label.person_id == q.label.person_id)
                .collect();
            let pairs: Vec<(&[Vector], &[Vector])> =
                gallery.iter().map(|g| (q.clips.as_slice(), g.clips.as_slice())).collect();
            let mut acc = [0.0; 4];
            if pairs.is_empty() {
                return Ok(acc);
            }
            let traces = aggregate_learned_batch(&pairs, net)?;
            for (tr, g) in traces.iter().zip(&gallery) {
                for (&(i, j), &a) in tr.pairs.iter().zip(&tr.alpha) {
                    if q.corrupted[i] || g.corrupted[j] {
                        acc[2] += a;
                        acc[3] += 1.0;
                    } else {
                        acc[0] += a;
                        acc[1] += 1.0;
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = [0.0; 4];
    for r in rows {
        let r = r?;
        for k in 0..4 {
            total[k] += r[k];
        }
    }
    if total[1] == 0.0 || total[3] == 0.0 {
        return Err(Error::Degenerate(
            "need both clean and corrupted clip pairs to compare importance".into(),
        ));
    }
    Ok(ImportanceStats {
        clean_mean: total[0] / total[1],
        corrupted_mean: total[2] / total[3],
        clean_pairs: total[1] as usize,
        corrupted_pairs: total[3] as usize,
    })
}
