//! Corruption sweep: every method evaluated at every corruption level.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::data::{evaluate_estimator, importance_discrimination, load_head, prepare_eval, ImportanceStats};
use super::embedding::{train_embedding_head, EmbeddingHead};
use super::harness::{train_aggregation, train_top_t, TopTVariant};
use super::ExperimentConfig;
use crate::aggregation::{Estimator, ProjectionLayer};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::scoring::ScoringNet;
use crate::store::FeatureStore;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub max_corrupt: usize,
    /// `None` when the cell's checkpoint is missing.
    pub map: Option<f64>,
    pub cmc_at_1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: String,
    pub t: Option<f64>,
    pub cells: Vec<SweepCell>,
}

impl SweepRow {
    pub fn map_at(&self, max_corrupt: usize) -> Option<f64> {
        self.cells.iter().find(|c| c.max_corrupt == max_corrupt).and_then(|c| c.map)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Headline {
    pub max_corrupt: usize,
    pub learned_map: f64,
    pub best_baseline: String,
    pub best_baseline_map: f64,
    /// Learned minus best top-t% baseline, in mAP points.
    pub gap_points: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportanceRow {
    pub max_corrupt: usize,
    /// Over every held-out query × gallery pair.
    pub all_pairs: ImportanceStats,
    pub all_pairs_ratio: f64,
    /// Over held-out pairs of the same person.
    pub same_person: ImportanceStats,
    pub same_person_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub max_corrupt: Vec<usize>,
    pub rows: Vec<SweepRow>,
    pub headline: Option<Headline>,
    pub importance: Vec<ImportanceRow>,
    pub config: serde_json::Value,
}

impl SweepReport {
    pub fn row(&self, method: &str, t: Option<f64>) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.method == method && r.t == t)
    }

    /// One row per method, two columns (mAP, CMC@1) per corruption level.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,t");
        for m in &self.max_corrupt {
            write!(out, ",map_mc{m},cmc1_mc{m}").unwrap();
        }
        out.push('\n');
        let num = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for r in &self.rows {
            write!(out, "{},{}", r.method, r.t.map_or(String::new(), |t| format!("{t}"))).unwrap();
            for c in &r.cells {
                write!(out, ",{},{}", num(c.map), num(c.cmc_at_1)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn cell(max_corrupt: usize, report: Option<EvalReport>) -> SweepCell {
    SweepCell {
        max_corrupt,
        map: report.as_ref().map(|r| r.map),
        cmc_at_1: report.map(|r| r.cmc_at_1),
    }
}

fn t_tag(t: f64) -> String {
    format!("{t}").replace('.', "p")
}

/// Loads a checkpoint, or trains and (when a directory is set) saves it.
fn obtain<M>(
    path: Option<PathBuf>,
    train_in_place: bool,
    load: impl FnOnce(&Checkpoint) -> Result<M>,
    train: impl FnOnce() -> Result<M>,
    save: impl FnOnce(&M) -> Checkpoint,
) -> Result<Option<M>> {
    if train_in_place {
        let m = train()?;
        if let Some(p) = path {
            save(&m).save(&p)?;
        }
        return Ok(Some(m));
    }
    match path {
        Some(p) if p.exists() => Ok(Some(load(&Checkpoint::load(&p)?)?)),
        Some(p) => {
            log::warn!("missing sweep checkpoint {}; cell reported as absent", p.display());
            Ok(None)
        }
        None => Ok(None),
    }
}

/// Stage-one head shared by every cell. Trained heads go through an f32
/// round trip so in-place and reloaded sweeps see the same weights.
fn sweep_head(cfg: &ExperimentConfig, store: &FeatureStore) -> Result<Option<EmbeddingHead>> {
    let dir = cfg.sweep.checkpoint_dir.as_deref();
    if let (Some(d), true) = (dir, cfg.sweep.train_in_place) {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    log::info!("sweep: embedding head");
    obtain(
        dir.map(|d| d.join("embedding_head.csn")),
        cfg.sweep.train_in_place,
        EmbeddingHead::from_checkpoint,
        || {
            let head = train_embedding_head(cfg, store, dir)?.head;
            EmbeddingHead::from_checkpoint(&Checkpoint::from_bytes(&head.to_checkpoint().to_bytes())?)
        },
        EmbeddingHead::to_checkpoint,
    )
}

struct LevelResult {
    learned: SweepCell,
    baselines: Vec<SweepCell>,
    mean: Vec<SweepCell>,
    importance: Option<ImportanceRow>,
}

fn run_level(cfg: &ExperimentConfig, store: &FeatureStore, mc: usize) -> Result<LevelResult> {
    let mut cfg = cfg.clone();
    cfg.aggregation.schedule.max_corrupt_clips = mc;
    cfg.top_t.schedule.max_corrupt_clips = mc;
    let head = load_head(&cfg)?;
    let sw = &cfg.sweep;
    let dir = sw.checkpoint_dir.as_deref();
    if let (Some(d), true) = (dir, sw.train_in_place) {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let file = |name: String| dir.map(|d: &Path| d.join(name));
    let strength = cfg.eval.corruption_strength;
    let set = prepare_eval(store, cfg.num_clips, head.as_ref(), true, mc, strength, cfg.seed)?;
    let echo = serde_json::json!({ "max_corrupt": mc });
    let eval = |est: Estimator<'_>| evaluate_estimator(&set, est, cfg.eval.cross_camera, echo.clone());

    log::info!("sweep M_c^max = {mc}: learned aggregation");
    let net = obtain(
        file(format!("learned_mc{mc}.csn")),
        sw.train_in_place,
        ScoringNet::from_checkpoint,
        || Ok(train_aggregation(&cfg, store, dir)?.model),
        ScoringNet::to_checkpoint,
    )?;
    let learned = cell(mc, net.as_ref().map(|n| eval(Estimator::Learned(n))).transpose()?);
    let importance = match &net {
        Some(n) if mc > 0 => {
            let all = importance_discrimination(&set, n, false)?;
            let same = importance_discrimination(&set, n, true)?;
            Some(ImportanceRow {
                max_corrupt: mc,
                all_pairs: all,
                all_pairs_ratio: all.ratio(),
                same_person: same,
                same_person_ratio: same.ratio(),
            })
        }
        _ => None,
    };

    let mut baselines = Vec::new();
    for &variant in &sw.variants {
        let mut shared: Option<Option<ProjectionLayer>> = None;
        for &t in &sw.t_values {
            let proj = match (variant, &shared) {
                (TopTVariant::EvalOnly, Some(p)) => p.clone(),
                _ => {
                    log::info!("sweep M_c^max = {mc}: {} t = {t}", variant.tag());
                    let name = match variant {
                        TopTVariant::EvalOnly => format!("topt-e_mc{mc}.csn"),
                        TopTVariant::TrainEval => format!("topt-te_t{}_mc{mc}.csn", t_tag(t)),
                    };
                    let p = obtain(
                        file(name),
                        sw.train_in_place,
                        ProjectionLayer::from_checkpoint,
                        || Ok(train_top_t(&cfg, store, variant, t, dir)?.model),
                        ProjectionLayer::to_checkpoint,
                    )?;
                    if variant == TopTVariant::EvalOnly {
                        shared = Some(p.clone());
                    }
                    p
                }
            };
            let rep = proj.as_ref().map(|p| eval(Estimator::TopT { projection: p, t })).transpose()?;
            baselines.push(cell(mc, rep));
        }
    }

    let mut mean = Vec::new();
    if sw.include_mean_pool {
        mean.push(cell(mc, Some(eval(Estimator::Mean { normalize: true })?)));
        let raw = prepare_eval(store, cfg.num_clips, head.as_ref(), false, mc, strength, cfg.seed)?;
        mean.push(cell(
            mc,
            Some(evaluate_estimator(&raw, Estimator::Mean { normalize: false }, cfg.eval.cross_camera, echo.clone())?),
        ));
    }
    Ok(LevelResult {
        learned,
        baselines,
        mean,
        importance,
    })
}

/// Runs every (method, t, M_c^max) cell. Corruption levels are processed in
/// parallel; the table is assembled in configuration order.
pub fn corruption_sweep(cfg: &ExperimentConfig, store: &FeatureStore) -> Result<SweepReport> {
    let sw = &cfg.sweep;
    if sw.max_corrupt.is_empty() {
        return Err(Error::Config("sweep.max_corrupt is empty".into()));
    }
    let mut resolved = cfg.clone();
    if cfg.embedding_head.is_none() && cfg.resolved_head.is_none() && sw.train_embedding_head {
        resolved.resolved_head = sweep_head(cfg, store)?;
    }
    let levels: Vec<LevelResult> = sw
        .max_corrupt
        .par_iter()
        .map(|&mc| run_level(&resolved, store, mc))
        .collect::<Result<_>>()?;

    let mut rows = vec![SweepRow {
        method: "learned".into(),
        t: None,
        cells: levels.iter().map(|l| l.learned.clone()).collect(),
    }];
    let mut k = 0;
    for &variant in &sw.variants {
        for &t in &sw.t_values {
            rows.push(SweepRow {
                method: variant.tag().into(),
                t: Some(t),
                cells: levels.iter().map(|l| l.baselines[k].clone()).collect(),
            });
            k += 1;
        }
    }
    if sw.include_mean_pool {
        for (i, name) in ["mean-l2", "mean-raw"].into_iter().enumerate() {
            rows.push(SweepRow {
                method: name.into(),
                t: None,
                cells: levels.iter().map(|l| l.mean[i].clone()).collect(),
            });
        }
    }

    let top = *sw.max_corrupt.iter().max().unwrap();
    let headline = rows[0].map_at(top).and_then(|learned| {
        rows.iter()
            .filter(|r| r.method.starts_with("topt"))
            .filter_map(|r| r.map_at(top).map(|m| (r, m)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(r, m)| Headline {
                max_corrupt: top,
                learned_map: learned,
                best_baseline: format!("{} t={}", r.method, r.t.unwrap_or(100.0)),
                best_baseline_map: m,
                gap_points: 100.0 * (learned - m),
            })
    });
    Ok(SweepReport {
        max_corrupt: sw.max_corrupt.clone(),
        rows,
        headline,
        importance: levels.into_iter().filter_map(|l| l.importance).collect(),
        config: cfg.to_json(),
    })
}

/// Mean-pooling mAP at one clip count, with and without ℓ2 normalization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolingRow {
    pub num_clips: usize,
    pub map_l2: f64,
    pub map_raw: f64,
    pub cmc1_l2: f64,
    pub cmc1_raw: f64,
}

/// Untrained mean pooling evaluated at each clip count in `clip_counts`.
pub fn multi_clip_pooling(
    cfg: &ExperimentConfig,
    store: &FeatureStore,
    clip_counts: &[usize],
) -> Result<Vec<PoolingRow>> {
    let head = load_head(cfg)?;
    let ev = &cfg.eval;
    clip_counts
        .iter()
        .map(|&m| {
            let echo = serde_json::json!({ "num_clips": m });
            let run = |normalize: bool| {
                let set = prepare_eval(store, m, head.as_ref(), normalize, ev.max_corrupt_clips, ev.corruption_strength, cfg.seed)?;
                evaluate_estimator(&set, Estimator::Mean { normalize }, ev.cross_camera, echo.clone())
            };
            let l2 = run(true)?;
            let raw = run(false)?;
            Ok(PoolingRow {
                num_clips: m,
                map_l2: l2.map,
                map_raw: raw.map,
                cmc1_l2: l2.cmc_at_1,
                cmc1_raw: raw.cmc_at_1,
            })
        })
        .collect()
}

pub fn pooling_csv(rows: &[PoolingRow]) -> String {
    let mut out = String::from("num_clips,map_l2,map_raw,cmc1_l2,cmc1_raw\n");
    for r in rows {
        writeln!(out, "{},{:.6},{:.6},{:.6},{:.6}", r.num_clips, r.map_l2, r.map_raw, r.cmc1_l2, r.cmc1_raw).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthConfig;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.synth = SynthConfig {
            num_identities: 8,
            tracklets_per_identity: 4,
            clips_per_tracklet: 4,
            feature_dim: 16,
            ..SynthConfig::default()
        };
        cfg.num_clips = 4;
        cfg.aggregation.hidden = 8;
        for s in [&mut cfg.aggregation.schedule, &mut cfg.top_t.schedule] {
            s.p = 4;
            s.k = 2;
            s.epochs = 1;
        }
        cfg.sweep.max_corrupt = vec![0, 2];
        cfg.sweep.t_values = vec![50.0, 100.0];
        cfg.sweep.variants = vec![TopTVariant::EvalOnly, TopTVariant::TrainEval];
        cfg
    }

    #[test]
    fn table_shape_and_headline() {
        let cfg = tiny();
        let store = crate::synth::generate(&cfg.synth).unwrap();
        let rep = corruption_sweep(&cfg, &store).unwrap();
        // learned + 2 variants × 2 t values
        assert_eq!(rep.rows.len(), 5);
        assert!(rep.rows.iter().all(|r| r.cells.len() == 2));
        assert!(rep.headline.is_some());
        assert_eq!(rep.importance.len(), 1);
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("method,t,map_mc0,cmc1_mc0,map_mc2,cmc1_mc2\n"));

        // the M_c^max = 0 column matches a single evaluation of the same model
        let net = train_aggregation(&cfg, &store, None).unwrap().model;
        let set = prepare_eval(&store, 4, None, true, 0, 0.85, cfg.seed).unwrap();
        let single = evaluate_estimator(&set, Estimator::Learned(&net), true, serde_json::Value::Null).unwrap();
        assert_eq!(rep.rows[0].map_at(0), Some(single.map));
    }

    #[test]
    fn missing_checkpoints_are_absent() {
        let mut cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        cfg.sweep.checkpoint_dir = Some(dir.path().to_path_buf());
        cfg.sweep.train_in_place = false;
        cfg.sweep.variants = vec![TopTVariant::EvalOnly];
        ProjectionLayer::identity(16).to_checkpoint().save(&dir.path().join("topt-e_mc2.csn")).unwrap();
        let store = crate::synth::generate(&cfg.synth).unwrap();
        let rep = corruption_sweep(&cfg, &store).unwrap();
        assert_eq!(rep.rows[0].cells[0].map, None);
        assert!(rep.headline.is_none());
        let e = rep.row("topt-e", Some(50.0)).unwrap();
        assert!(e.cells[0].map.is_none() && e.cells[1].map.is_some());
        assert!(rep.to_csv().contains("learned,,,,,"));
    }
}
