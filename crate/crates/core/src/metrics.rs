//! Retrieval metrics: CMC and non-interpolated mean average precision.
//!
//! Gallery lists are ranked by descending similarity; ties go to the lower
//! gallery index. With cross-camera exclusion, gallery entries sharing both
//! person and camera with the query are removed before ranking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Ranks reported in every evaluation.
pub const REPORT_RANKS: [usize; 3] = [1, 5, 20];

/// Who a sequence shows and where it was seen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLabel {
    pub person_id: u32,
    pub camera_id: u32,
}

/// Gallery indices by descending score, skipping entries marked in
/// `exclude`. Ties keep ascending index order.
pub fn rank_gallery(row: &[f64], exclude: Option<&[bool]>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len())
        .filter(|&j| !exclude.is_some_and(|e| e[j]))
        .collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRanking {
    pub query: usize,
    /// Ranked gallery indices (excluded entries removed).
    pub order: Vec<usize>,
    /// `matches[k]`: the entry at position `k` shows the query's person.
    pub matches: Vec<bool>,
}

impl QueryRanking {
    pub fn num_relevant(&self) -> usize {
        self.matches.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    /// Queries that can be scored: non-empty gallery and ≥ 1 true match.
    pub queries: Vec<QueryRanking>,
    pub skipped_no_gallery: usize,
    pub skipped_no_match: usize,
}

impl RankingResult {
    pub fn skipped(&self) -> usize {
        self.skipped_no_gallery + self.skipped_no_match
    }
}

pub fn build_ranking(
    sim: &Matrix,
    queries: &[SequenceLabel],
    gallery: &[SequenceLabel],
    cross_camera: bool,
) -> Result<RankingResult> {
    if sim.rows() != queries.len() || sim.cols() != gallery.len() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} similarity matrix for {} queries and {} gallery sequences",
            sim.rows(),
            sim.cols(),
            queries.len(),
            gallery.len()
        )));
    }
    let mut out = RankingResult {
        queries: Vec::with_capacity(queries.len()),
        skipped_no_gallery: 0,
        skipped_no_match: 0,
    };
    for (i, q) in queries.iter().enumerate() {
        let exclude: Option<Vec<bool>> = cross_camera.then(|| {
            gallery
                .iter()
                .map(|g| g.person_id == q.person_id && g.camera_id == q.camera_id)
                .collect()
        });
        let order = rank_gallery(sim.row(i), exclude.as_deref());
        if order.is_empty() {
            log::warn!("query {i}: every gallery entry is excluded; skipped");
            out.skipped_no_gallery += 1;
            continue;
        }
        let matches: Vec<bool> = order.iter().map(|&j| gallery[j].person_id == q.person_id).collect();
        if !matches.contains(&true) {
            log::warn!("query {i}: no true match in the gallery; skipped");
            out.skipped_no_match += 1;
            continue;
        }
        out.queries.push(QueryRanking { query: i, order, matches });
    }
    Ok(out)
}

/// CMC@r for each requested rank, as a fraction of scored queries.
pub fn cmc(results: &RankingResult, ranks: &[usize]) -> Result<Vec<f64>> {
    if let Some(r) = ranks.iter().find(|&&r| r == 0) {
        return Err(Error::InvalidArgument(format!("rank {r} must be ≥ 1")));
    }
    if results.queries.is_empty() {
        return Err(Error::Degenerate("no query could be scored".into()));
    }
    let first_hits: Vec<usize> = results
        .queries
        .iter()
        .map(|q| q.matches.iter().position(|&m| m).expect("scored queries have a match"))
        .collect();
    let n = first_hits.len() as f64;
    Ok(ranks
        .iter()
        .map(|&r| first_hits.iter().filter(|&&p| p < r).count() as f64 / n)
        .collect())
}

/// Non-interpolated AP of one ranked list.
pub fn average_precision(matches: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &m) in matches.iter().enumerate() {
        if m {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn mean_ap(results: &RankingResult) -> Result<f64> {
    if results.queries.is_empty() {
        return Err(Error::Degenerate("no query could be scored".into()));
    }
    let total: f64 = results.queries.iter().map(|q| average_precision(&q.matches)).sum();
    Ok(total / results.queries.len() as f64)
}

/// Evaluation summary written as JSON. Metrics are fractions in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub cmc_at_1: f64,
    pub cmc_at_5: f64,
    pub cmc_at_20: f64,
    pub num_queries: usize,
    pub skipped_queries: usize,
    pub config: serde_json::Value,
}

pub fn evaluate(
    sim: &Matrix,
    queries: &[SequenceLabel],
    gallery: &[SequenceLabel],
    cross_camera: bool,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let ranking = build_ranking(sim, queries, gallery, cross_camera)?;
    let c = cmc(&ranking, &REPORT_RANKS)?;
    Ok(EvalReport {
        map: mean_ap(&ranking)?,
        cmc_at_1: c[0],
        cmc_at_5: c[1],
        cmc_at_20: c[2],
        num_queries: ranking.queries.len(),
        skipped_queries: ranking.skipped(),
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn label(p: u32, c: u32) -> SequenceLabel {
        SequenceLabel {
            person_id: p,
            camera_id: c,
        }
    }

    fn single(matches: &[bool]) -> RankingResult {
        RankingResult {
            queries: vec![QueryRanking {
                query: 0,
                order: (0..matches.len()).collect(),
                matches: matches.to_vec(),
            }],
            skipped_no_gallery: 0,
            skipped_no_match: 0,
        }
    }

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_gallery(&[0.1, 0.9, 0.5], None), vec![1, 2, 0]);
        assert_eq!(rank_gallery(&[0.5, 0.5], None), vec![0, 1]);
        assert_eq!(rank_gallery(&[0.1, 0.9, 0.5], Some(&[false, true, false])), vec![2, 0]);
    }

    #[test]
    fn cmc_examples() {
        let r = single(&[false, true, false]);
        assert_eq!(cmc(&r, &[1, 2, 3]).unwrap(), vec![0.0, 1.0, 1.0]);
        assert_eq!(cmc(&r, &[50]).unwrap(), vec![1.0]);
        assert!(cmc(&r, &[0]).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(mean_ap(&single(&[false, true, false])).unwrap(), 0.5);
        assert_eq!(mean_ap(&single(&[true, true, false, false])).unwrap(), 1.0);
        // hits at 1 and 3: (1 + 2/3) / 2
        assert!((average_precision(&[true, false, true]) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn cross_camera_exclusion_and_skips() {
        let sim = Matrix::new(3, 3, vec![0.9, 0.8, 0.1, 0.9, 0.8, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let q = [label(0, 0), label(0, 1), label(7, 0)];
        let g = [label(0, 0), label(0, 1), label(1, 0)];
        let r = build_ranking(&sim, &q, &g, true).unwrap();
        assert_eq!(r.queries.len(), 2);
        assert_eq!(r.skipped_no_match, 1);
        // query 0 loses its same-camera match
        assert_eq!(r.queries[0].order, vec![1, 2]);
        assert_eq!(r.queries[1].order, vec![0, 2]);
        let plain = build_ranking(&sim, &q, &g, false).unwrap();
        assert_eq!(plain.queries[0].order, vec![0, 1, 2]);

        let lone = build_ranking(&Matrix::new(1, 1, vec![0.3]).unwrap(), &[label(0, 0)], &[label(0, 0)], true).unwrap();
        assert_eq!(lone.skipped_no_gallery, 1);
        assert!(mean_ap(&lone).is_err());
    }

    #[test]
    fn report_serializes() {
        let sim = Matrix::new(1, 2, vec![0.1, 0.2]).unwrap();
        let rep = evaluate(&sim, &[label(0, 0)], &[label(0, 1), label(1, 1)], true, serde_json::json!({"k": 1})).unwrap();
        assert_eq!(rep.cmc_at_1, 0.0);
        assert_eq!(rep.cmc_at_5, 1.0);
        assert_eq!(rep.map, 0.5);
        let text = serde_json::to_string(&rep).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&text).unwrap(), rep);
    }

    /// Quadratic-time oracle: a gallery entry's position is the number of
    /// entries that beat it, computed by pairwise comparison.
    pub(crate) fn oracle(sim: &Matrix, q: &[SequenceLabel], g: &[SequenceLabel], cross: bool) -> (f64, [f64; 3]) {
        let (mut ap_sum, mut counted) = (0.0, 0usize);
        let mut cmc_hits = [0usize; 3];
        for i in 0..q.len() {
            let keep = |j: usize| !(cross && g[j].person_id == q[i].person_id && g[j].camera_id == q[i].camera_id);
            let mut rel_positions = Vec::new();
            for j in 0..g.len() {
                if !keep(j) || g[j].person_id != q[i].person_id {
                    continue;
                }
                let mut pos = 1;
                for k in 0..g.len() {
                    if k != j && keep(k) && (sim.get(i, k) > sim.get(i, j) || (sim.get(i, k) == sim.get(i, j) && k < j)) {
                        pos += 1;
                    }
                }
                rel_positions.push(pos);
            }
            if rel_positions.is_empty() {
                continue;
            }
            rel_positions.sort_unstable();
            counted += 1;
            let mut ap = 0.0;
            for (n, &p) in rel_positions.iter().enumerate() {
                ap += (n + 1) as f64 / p as f64;
            }
            ap_sum += ap / rel_positions.len() as f64;
            for (c, &r) in cmc_hits.iter_mut().zip(&REPORT_RANKS) {
                if rel_positions[0] <= r {
                    *c += 1;
                }
            }
        }
        let n = counted as f64;
        (ap_sum / n, cmc_hits.map(|h| h as f64 / n))
    }

    fn random_instance(seed: u64, nq: usize, ng: usize) -> (Matrix, Vec<SequenceLabel>, Vec<SequenceLabel>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = 6;
        let q: Vec<_> = (0..nq).map(|_| label(rng.random_range(0..ids), rng.random_range(0..2))).collect();
        let mut g: Vec<_> = (0..ng).map(|_| label(rng.random_range(0..ids), rng.random_range(0..2))).collect();
        g[0] = label(q[0].person_id, 1 - q[0].camera_id);
        // coarse values create ties
        let data = (0..nq * ng).map(|_| rng.random_range(0..20) as f64 / 10.0 - 1.0).collect();
        (Matrix::new(nq, ng, data).unwrap(), q, g)
    }

    proptest! {
        #[test]
        fn matches_oracle_exactly(seed in 0u64..1000, nq in 1usize..20, ng in 1usize..50, cross in any::<bool>()) {
            let (sim, q, g) = random_instance(seed, nq, ng);
            let r = build_ranking(&sim, &q, &g, cross).unwrap();
            prop_assume!(!r.queries.is_empty());
            let (map, c) = oracle(&sim, &q, &g, cross);
            prop_assert_eq!(mean_ap(&r).unwrap(), map);
            prop_assert_eq!(cmc(&r, &REPORT_RANKS).unwrap(), c.to_vec());
        }

        #[test]
        fn invariant_under_monotone_transforms(seed in 0u64..500) {
            let (sim, q, g) = random_instance(seed, 10, 30);
            let base = evaluate(&sim, &q, &g, true, serde_json::Value::Null).unwrap();
            for f in [|x: f64| 2.0 * x + 1.0, |x: f64| x.tanh()] {
                let data = sim.as_slice().iter().map(|&x| f(x)).collect();
                let t = Matrix::new(10, 30, data).unwrap();
                prop_assert_eq!(&evaluate(&t, &q, &g, true, serde_json::Value::Null).unwrap(), &base);
            }
        }

        #[test]
        fn cmc_non_decreasing(seed in 0u64..500) {
            let (sim, q, g) = random_instance(seed, 8, 25);
            let r = build_ranking(&sim, &q, &g, false).unwrap();
            let c = cmc(&r, &(1..=25).collect::<Vec<_>>()).unwrap();
            prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*c.last().unwrap(), 1.0);
        }

        #[test]
        fn ranking_matches_resort(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let row: Vec<f64> = (0..50).map(|_| rng.random_range(0..10) as f64).collect();
            let order = rank_gallery(&row, None);
            let mut oracle: Vec<(i64, usize)> = row.iter().enumerate().map(|(j, &s)| (-(s as i64), j)).collect();
            oracle.sort();
            prop_assert_eq!(order, oracle.into_iter().map(|(_, j)| j).collect::<Vec<_>>());
        }
    }
}
