//! Feature-level training: an affine embedding head with a linear
//! identity classifier on top, trained with batch-hard triplet (euclidean)
//! plus softmax cross-entropy.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::prepare_sequence;
use super::harness::{batch_seed, LogRecord, TrainSet};
use super::{derive_seed, ExperimentConfig};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::losses::{softmax_ce_loss, triplet_hard_loss};
use crate::numerics::{affine_rows, affine_rows_backward, Matrix, Vector};
use crate::optim::{AmsGrad, Parameters};
use crate::sampling::sample_pk_batch;
use crate::store::FeatureStore;

const HEAD_INIT_STREAM: u64 = 0x4EAD;
const CLIP_PICK_STREAM: u64 = 0xC119;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingHead {
    /// `D × E`, input-major.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    /// `E × C`.
    pub classifier: Matrix,
    pub class_bias: Vec<f64>,
    /// Person id of each class column.
    pub classes: Vec<u32>,
}

impl EmbeddingHead {
    /// Identity head when `E == D`, Kaiming-uniform otherwise; zero
    /// classifier.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, output_dim: usize, classes: Vec<u32>, rng: &mut R) -> Self {
        let weight = if input_dim == output_dim {
            Matrix::identity(input_dim)
        } else {
            let bound = (3.0 / input_dim as f64).sqrt();
            let data = (0..input_dim * output_dim).map(|_| rng.random_range(-bound..bound)).collect();
            Matrix::new(input_dim, output_dim, data).expect("finite init")
        };
        let c = classes.len();
        Self {
            weight,
            bias: vec![0.0; output_dim],
            classifier: Matrix::zeros(output_dim, c),
            class_bias: vec![0.0; c],
            classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn embed(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "feature of dim {}, head expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut out = vec![0.0; self.output_dim()];
        affine_rows(x.as_slice(), self.input_dim(), self.weight.as_slice(), &self.bias, &mut out);
        Vector::new(out)
    }

    fn logits(&self, e: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; e.len() / self.output_dim() * self.classes.len()];
        affine_rows(e, self.output_dim(), self.classifier.as_slice(), &self.class_bias, &mut out);
        out
    }

    /// Fraction of feature rows whose arg-max class is their person.
    pub fn accuracy(&self, features: &[Vector], person_ids: &[u32]) -> Result<f64> {
        let mut right = 0usize;
        for (f, pid) in features.iter().zip(person_ids) {
            let logits = self.logits(self.embed(f)?.as_slice());
            let best = (0..logits.len())
                .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
                .expect("at least two classes");
            right += usize::from(self.classes[best] == *pid);
        }
        Ok(right as f64 / features.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (d, e, c) = (self.input_dim(), self.output_dim(), self.classes.len());
        let mut ck = Checkpoint::new(ModelKind::EmbeddingHead);
        ck.push("weight", &[d, e], self.weight.as_slice());
        ck.push("bias", &[e], &self.bias);
        ck.push("classifier", &[e, c], self.classifier.as_slice());
        ck.push("class_bias", &[c], &self.class_bias);
        let ids: Vec<f64> = self.classes.iter().map(|&p| p as f64).collect();
        ck.push("classes", &[c], &ids);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::EmbeddingHead)?;
        let (d, e) = match ck.shape_of("weight")? {
            [d, e] => (*d, *e),
            other => return Err(Error::ShapeMismatch(format!("weight shape {other:?}"))),
        };
        let c = match ck.shape_of("classes")? {
            [c] => *c,
            other => return Err(Error::ShapeMismatch(format!("classes shape {other:?}"))),
        };
        Ok(Self {
            weight: Matrix::new(d, e, ck.get("weight", &[d, e])?.to_vec())?,
            bias: ck.get("bias", &[e])?.to_vec(),
            classifier: Matrix::new(e, c, ck.get("classifier", &[e, c])?.to_vec())?,
            class_bias: ck.get("class_bias", &[c])?.to_vec(),
            classes: ck.get("classes", &[c])?.iter().map(|&p| p as u32).collect(),
        })
    }
}

impl Parameters for EmbeddingHead {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice(), &self.bias, self.classifier.as_slice(), &self.class_bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_mut_slice(),
            &mut self.bias,
            self.classifier.as_mut_slice(),
            &mut self.class_bias,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingOutcome {
    pub head: EmbeddingHead,
    pub log: Vec<LogRecord>,
    /// Classification accuracy over every selected train clip.
    pub train_accuracy: f64,
}

/// Pairwise euclidean distances of the rows of `e` (`n × w`).
fn euclidean(e: &[f64], n: usize, w: usize) -> Matrix {
    let mut d = Matrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            if a != b {
                let s: f64 = (0..w).map(|k| (e[a * w + k] - e[b * w + k]).powi(2)).sum();
                d.set(a, b, s.sqrt());
            }
        }
    }
    d
}

pub fn train_embedding_head(
    cfg: &ExperimentConfig,
    store: &FeatureStore,
    dump_dir: Option<&Path>,
) -> Result<EmbeddingOutcome> {
    let ec = &cfg.embedding;
    let sched = &ec.schedule;
    if !ec.use_triplet && !ec.use_softmax {
        return Err(Error::Config("embedding training needs at least one loss term".into()));
    }
    let data = TrainSet::new(store, sched, cfg.num_clips, None, cfg.seed)?;
    let mut classes = data.person_ids.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "embedding training needs at least 2 identities, found {}",
            classes.len()
        )));
    }
    let class_of = |pid: u32| classes.binary_search(&pid).expect("train identity");
    let d = store.feature_dim();
    let e_dim = if ec.embedding_dim == 0 { d } else { ec.embedding_dim };
    let mut init = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[HEAD_INIT_STREAM]));
    let mut head = EmbeddingHead::new(d, e_dim, classes.clone(), &mut init);
    let mut opt = AmsGrad::new(sched.optimizer);
    let mut log = Vec::new();
    let per_epoch = data.batches_per_epoch(sched);
    for epoch in 0..sched.epochs {
        let lr = sched.lr.lr(epoch as i64)?;
        for step in 0..per_epoch {
            let bseed = batch_seed(derive_seed(cfg.seed, &[HEAD_INIT_STREAM]), epoch, step);
            let mut rng = ChaCha8Rng::seed_from_u64(bseed);
            let batch = sample_pk_batch(&data.person_ids, sched.p, sched.k, &mut rng)?;
            let seqs = data.draw(&batch.indices, sched, cfg.num_clips, None, &mut rng)?;
            let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(bseed, &[CLIP_PICK_STREAM]));
            let x: Vec<f64> = seqs
                .iter()
                .flat_map(|s| s.clips[pick.random_range(0..s.clips.len())].as_slice().to_vec())
                .collect();
            let n = seqs.len();
            let mut e = vec![0.0; n * e_dim];
            affine_rows(&x, d, head.weight.as_slice(), &head.bias, &mut e);
            let mut g_e = vec![0.0; n * e_dim];
            let mut grads = head.zero_grads();
            let (mut triplet, mut softmax, mut loss) = (None, None, 0.0);
            let mut active = 0;
            if ec.use_triplet {
                let dist = euclidean(&e, n, e_dim);
                let out = triplet_hard_loss(&dist, &batch.labels, sched.margin)?;
                for a in 0..n {
                    for b in 0..n {
                        let g = out.grad.get(a, b);
                        let dab = dist.get(a, b);
                        if g == 0.0 || dab <= 1e-12 {
                            continue;
                        }
                        for k in 0..e_dim {
                            let u = g * (e[a * e_dim + k] - e[b * e_dim + k]) / dab;
                            g_e[a * e_dim + k] += u;
                            g_e[b * e_dim + k] -= u;
                        }
                    }
                }
                loss += out.loss;
                active = out.active;
                triplet = Some(out.loss);
            }
            let logits = Matrix::new(n, classes.len(), head.logits(&e))?;
            let labels: Vec<usize> = batch.labels.iter().map(|&p| class_of(p)).collect();
            let correct = (0..n)
                .filter(|&i| {
                    let row = logits.row(i);
                    (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))) == Some(labels[i])
                })
                .count();
            if ec.use_softmax {
                let (ce, g_logits) = softmax_ce_loss(&logits, &labels)?;
                let c = classes.len();
                let [_, _, g_cls, g_cb] = &mut grads.0[..] else { unreachable!() };
                affine_rows_backward(&e, e_dim, head.classifier.as_slice(), g_logits.as_slice(), c, g_cls, g_cb, None);
                let mut g_e_ce = vec![0.0; n * e_dim];
                let (mut dummy_w, mut dummy_b) = (vec![0.0; e_dim * c], vec![0.0; c]);
                affine_rows_backward(
                    &e,
                    e_dim,
                    head.classifier.as_slice(),
                    g_logits.as_slice(),
                    c,
                    &mut dummy_w,
                    &mut dummy_b,
                    Some(&mut g_e_ce),
                );
                g_e.iter_mut().zip(&g_e_ce).for_each(|(a, b)| *a += b);
                loss += ce;
                softmax = Some(ce);
            }
            {
                let [g_w, g_b, _, _] = &mut grads.0[..] else { unreachable!() };
                affine_rows_backward(&x, d, head.weight.as_slice(), &g_e, e_dim, g_w, g_b, None);
            }
            if !loss.is_finite() || !grads.is_finite() {
                let dump = dump_dir.and_then(|dir| {
                    let p = dir.join("divergence.csn");
                    (std::fs::create_dir_all(dir).is_ok() && head.to_checkpoint().save(&p).is_ok()).then_some(p)
                });
                return Err(Error::Divergence { epoch, step, dump });
            }
            opt.step(head.tensors_mut(), &grads, lr)?;
            log.push(LogRecord {
                epoch,
                step,
                loss,
                lr,
                batch_seed: bseed,
                active_anchors: active,
                triplet,
                softmax,
                accuracy: Some(correct as f64 / n as f64),
            });
        }
    }
    let mut feats = Vec::new();
    let mut pids = Vec::new();
    for t in &data.tracklets {
        let s = prepare_sequence::<ChaCha8Rng>(t, cfg.num_clips, None, true, None)?;
        pids.extend(std::iter::repeat_n(t.person_id, s.clips.len()));
        feats.extend(s.clips);
    }
    let train_accuracy = head.accuracy(&feats, &pids)?;
    Ok(EmbeddingOutcome {
        head,
        log,
        train_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.synth = SynthConfig {
            num_identities: 16,
            tracklets_per_identity: 4,
            feature_dim: 32,
            ..SynthConfig::default()
        };
        cfg.embedding.schedule.p = 4;
        cfg.embedding.schedule.k = 2;
        cfg
    }

    #[test]
    fn separable_data_is_classified() {
        let cfg = config();
        let store = generate(&cfg.synth).unwrap();
        let out = train_embedding_head(&cfg, &store, None).unwrap();
        assert!(out.train_accuracy > 0.95, "accuracy {}", out.train_accuracy);
        let last = out.log.last().unwrap();
        assert!(last.triplet.is_some() && last.softmax.is_some());
    }

    #[test]
    fn disabled_terms_are_not_logged() {
        let mut cfg = config();
        cfg.embedding.schedule.epochs = 1;
        let store = generate(&cfg.synth).unwrap();
        cfg.embedding.use_softmax = false;
        let out = train_embedding_head(&cfg, &store, None).unwrap();
        assert!(out.log.iter().all(|r| r.softmax.is_none() && r.triplet.is_some()));
        cfg.embedding.use_softmax = true;
        cfg.embedding.use_triplet = false;
        let out = train_embedding_head(&cfg, &store, None).unwrap();
        assert!(out.log.iter().all(|r| r.triplet.is_none() && r.softmax == Some(r.loss)));
        cfg.embedding.use_softmax = false;
        assert!(train_embedding_head(&cfg, &store, None).is_err());
    }

    #[test]
    fn single_identity_is_rejected() {
        let mut cfg = config();
        cfg.synth.num_identities = 1;
        let store = generate(&cfg.synth).unwrap();
        assert!(matches!(train_embedding_head(&cfg, &store, None), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = EmbeddingHead::new(4, 3, vec![2, 9], &mut rng);
        let back = EmbeddingHead::from_checkpoint(&Checkpoint::from_bytes(&head.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.classes, vec![2, 9]);
        assert_eq!(back.output_dim(), 3);
        assert!(head.embed(&Vector::zeros(5)).is_err());
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        // CE-only loss on a fixed batch through embed + logits
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = EmbeddingHead::new(5, 3, vec![0, 1, 2], &mut rng);
        for v in head.classifier.as_mut_slice() {
            *v = rng.random_range(-0.5..0.5);
        }
        let x: Vec<f64> = (0..4 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = [0usize, 2, 1, 2];
        let loss = |h: &EmbeddingHead| {
            let mut e = vec![0.0; 12];
            affine_rows(&x, 5, h.weight.as_slice(), &h.bias, &mut e);
            softmax_ce_loss(&Matrix::new(4, 3, h.logits(&e)).unwrap(), &labels).unwrap().0
        };
        let mut e = vec![0.0; 12];
        affine_rows(&x, 5, head.weight.as_slice(), &head.bias, &mut e);
        let (_, gl) = softmax_ce_loss(&Matrix::new(4, 3, head.logits(&e)).unwrap(), &labels).unwrap();
        let mut grads = head.zero_grads();
        let mut ge = vec![0.0; 12];
        {
            let [gw, gb, gc, gcb] = &mut grads.0[..] else { unreachable!() };
            affine_rows_backward(&e, 3, head.classifier.as_slice(), gl.as_slice(), 3, gc, gcb, Some(&mut ge));
            affine_rows_backward(&x, 5, head.weight.as_slice(), &ge, 3, gw, gb, None);
        }
        for ti in 0..4 {
            for k in 0..head.tensors()[ti].len() {
                let mut p = head.clone();
                p.tensors_mut()[ti][k] += 1e-5;
                let mut m = head.clone();
                m.tensors_mut()[ti][k] -= 1e-5;
                let numeric = (loss(&p) - loss(&m)) / 2e-5;
                assert!((numeric - grads.0[ti][k]).abs() < 1e-6);
            }
        }
    }
}
