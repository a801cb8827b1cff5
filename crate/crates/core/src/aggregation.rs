//! Sequence-similarity estimators.
//!
//! A sequence is a slice of clip features. Three estimators are provided:
//!
//! * **learned**: visits the clip pairs `(i, j)` in row-major order (query
//!   clip outer, gallery clip inner), forms `c_t = f_q,i ⊙ f_g,j`, scores
//!   `α_t = g(r_{t-1} − c_t)` and keeps the running weighted mean
//!   `r_t = (A_{t-1}·r_{t-1} + α_t·c_t) / A_t` with `A_t = Σ α`. The
//!   similarity is `Σ_d r[d]`, which for unit-norm features equals the
//!   α-weighted mean of the clip-pair cosines.
//! * **mean pooling**: cosine of the (optionally per-clip normalized) mean
//!   feature of each sequence.
//! * **top-t%**: affine projection of every clip, then the mean of the `k`
//!   largest clip-pair cosines, `k = max(1, ⌈t/100 · pairs⌉)`.

use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::numerics::{
    affine_rows, affine_rows_backward, cosine, dot_slice, l2_normalize, norm, Matrix, Vector, NORM_EPS,
};
use crate::optim::{Gradients, Parameters};
use crate::scoring::{Mode, ScoringNet, ScoringTape};

/// Tolerance of the unit-norm input check (debug builds only).
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationTrace {
    pub pairs: Vec<(usize, usize)>,
    pub alpha: Vec<f64>,
    pub aggregate: Vector,
    pub mass: f64,
    pub similarity: f64,
    pub cosines: Vec<f64>,
}

/// Clip pairs of an `mq × mg` sequence pair in canonical order.
pub fn canonical_pairs(mq: usize, mg: usize) -> Vec<(usize, usize)> {
    (0..mq).flat_map(|i| (0..mg).map(move |j| (i, j))).collect()
}

fn check_sequence(seq: &[Vector], dim: usize, what: &str) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} sequence has no clips")));
    }
    if let Some(v) = seq.iter().find(|v| v.len() != dim) {
        return Err(Error::ShapeMismatch(format!(
            "{what} clip of dim {}, expected {dim}",
            v.len()
        )));
    }
    Ok(())
}

fn check_unit_norm(seq: &[Vector], what: &str) -> Result<()> {
    if cfg!(debug_assertions) {
        for (i, v) in seq.iter().enumerate() {
            let n = v.norm();
            if (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Contract(format!(
                    "{what} clip {i} has norm {n}, expected unit norm"
                )));
            }
        }
    }
    Ok(())
}

/// Shapes shared by every pair of a step-locked batch.
fn batch_shape(pairs: &[(&[Vector], &[Vector])], dim: usize) -> Result<(usize, usize)> {
    let Some(&(q0, g0)) = pairs.first() else {
        return Err(Error::InvalidArgument("empty batch of sequence pairs".into()));
    };
    let (mq, mg) = (q0.len(), g0.len());
    for &(q, g) in pairs {
        check_sequence(q, dim, "query")?;
        check_sequence(g, dim, "gallery")?;
        if q.len() != mq || g.len() != mg {
            return Err(Error::ShapeMismatch(
                "step-locked pairs must share clip counts".into(),
            ));
        }
        check_unit_norm(q, "query")?;
        check_unit_norm(g, "gallery")?;
    }
    Ok((mq, mg))
}

fn fill_products(pairs: &[(&[Vector], &[Vector])], i: usize, j: usize, d: usize, c: &mut [f64]) {
    for (row, &(q, g)) in c.chunks_exact_mut(d).zip(pairs) {
        for ((o, a), b) in row.iter_mut().zip(q[i].as_slice()).zip(g[j].as_slice()) {
            *o = a * b;
        }
    }
}

/// `r ← (A_prev·r + α·c) / A`, with `r_1 = c_1` exactly.
fn update_aggregate(r: &mut [f64], c: &[f64], alpha: f64, mass_prev: f64, mass: f64, first: bool) {
    if first {
        r.copy_from_slice(c);
    } else {
        for (rv, cv) in r.iter_mut().zip(c) {
            *rv = (mass_prev * *rv + alpha * cv) / mass;
        }
    }
}

/// Eval-mode learned aggregation of one sequence pair.
pub fn aggregate_learned(query: &[Vector], gallery: &[Vector], net: &ScoringNet) -> Result<AggregationTrace> {
    Ok(aggregate_learned_batch(&[(query, gallery)], net)?.remove(0))
}

/// Eval-mode learned aggregation of many pairs, advanced step-locked. Each
/// trace is bit-identical to the one [`aggregate_learned`] gives for that
/// pair alone.
pub fn aggregate_learned_batch(
    pairs: &[(&[Vector], &[Vector])],
    net: &ScoringNet,
) -> Result<Vec<AggregationTrace>> {
    let d = net.input_dim();
    let (mq, mg) = batch_shape(pairs, d)?;
    let n = pairs.len();
    let order = canonical_pairs(mq, mg);
    let mut r = vec![0.0; n * d];
    let mut c = vec![0.0; n * d];
    let mut x = vec![0.0; n * d];
    let mut mass = vec![0.0; n];
    let mut alphas = vec![Vec::with_capacity(order.len()); n];
    let mut cosines = vec![Vec::with_capacity(order.len()); n];
    for (t, &(i, j)) in order.iter().enumerate() {
        fill_products(pairs, i, j, d, &mut c);
        for ((xv, rv), cv) in x.iter_mut().zip(&r).zip(&c) {
            *xv = rv - cv;
        }
        let alpha = net.scores(&x)?;
        for p in 0..n {
            let (rp, cp) = (&mut r[p * d..(p + 1) * d], &c[p * d..(p + 1) * d]);
            let prev = mass[p];
            mass[p] += alpha[p];
            update_aggregate(rp, cp, alpha[p], prev, mass[p], t == 0);
            alphas[p].push(alpha[p]);
            cosines[p].push(cp.iter().sum::<f64>());
        }
    }
    let mut out = Vec::with_capacity(n);
    for (p, (alpha, cos)) in alphas.into_iter().zip(cosines).enumerate() {
        let rp = r[p * d..(p + 1) * d].to_vec();
        let similarity = rp.iter().sum::<f64>();
        if !similarity.is_finite() {
            return Err(Error::NonFinite("learned similarity".into()));
        }
        out.push(AggregationTrace {
            pairs: order.clone(),
            alpha,
            aggregate: Vector::new(rp)?,
            mass: mass[p],
            similarity,
            cosines: cos,
        });
    }
    Ok(out)
}

/// Record of a step-locked forward pass, for [`learned_backward`].
#[derive(Debug)]
pub struct LearnedTape {
    n: usize,
    d: usize,
    /// c_t for every step, `n × d` each.
    products: Vec<Vec<f64>>,
    /// r_0 (zeros) .. r_T.
    aggregates: Vec<Vec<f64>>,
    /// A_0 (zeros) .. A_T.
    masses: Vec<Vec<f64>>,
    net_tapes: Vec<ScoringTape>,
}

impl LearnedTape {
    pub fn steps(&self) -> usize {
        self.net_tapes.len()
    }

    /// α of every pair at step `t` (0-based).
    pub fn alphas(&self, t: usize) -> Vec<f64> {
        let (a, b) = (&self.masses[t], &self.masses[t + 1]);
        b.iter().zip(a).map(|(b, a)| b - a).collect()
    }
}

/// Step-locked learned aggregation that records a tape. In train mode every
/// step forms one batch-norm batch over all pairs, so at least two pairs are
/// required.
pub fn learned_forward<R: Rng + ?Sized>(
    pairs: &[(&[Vector], &[Vector])],
    net: &mut ScoringNet,
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<f64>, LearnedTape)> {
    let d = net.input_dim();
    let (mq, mg) = batch_shape(pairs, d)?;
    let n = pairs.len();
    let order = canonical_pairs(mq, mg);
    let mut tape = LearnedTape {
        n,
        d,
        products: Vec::with_capacity(order.len()),
        aggregates: vec![vec![0.0; n * d]],
        masses: vec![vec![0.0; n]],
        net_tapes: Vec::with_capacity(order.len()),
    };
    for (t, &(i, j)) in order.iter().enumerate() {
        let mut c = vec![0.0; n * d];
        fill_products(pairs, i, j, d, &mut c);
        let r_prev = &tape.aggregates[t];
        let x: Vec<f64> = r_prev.iter().zip(&c).map(|(r, c)| r - c).collect();
        let (alpha, net_tape) = net.forward(&x, mode, rng)?;
        let mut r = r_prev.clone();
        let mut mass = tape.masses[t].clone();
        for p in 0..n {
            let prev = mass[p];
            mass[p] += alpha[p];
            update_aggregate(&mut r[p * d..(p + 1) * d], &c[p * d..(p + 1) * d], alpha[p], prev, mass[p], t == 0);
        }
        tape.products.push(c);
        tape.aggregates.push(r);
        tape.masses.push(mass);
        tape.net_tapes.push(net_tape);
    }
    let sims: Vec<f64> = tape
        .aggregates
        .last()
        .unwrap()
        .chunks_exact(d)
        .map(|r| r.iter().sum())
        .collect();
    if sims.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("learned similarity".into()));
    }
    Ok((sims, tape))
}

/// Gradients of `Σ_p g_sim[p]·s_p` with respect to the scoring net's
/// parameters, by backpropagation through every aggregation step.
pub fn learned_backward(net: &ScoringNet, tape: &LearnedTape, g_sim: &[f64]) -> Result<Gradients> {
    let (n, d) = (tape.n, tape.d);
    if g_sim.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} similarity gradients for {n} pairs",
            g_sim.len()
        )));
    }
    let mut grads = net.zero_grads();
    let mut g_r: Vec<f64> = g_sim.iter().flat_map(|&g| std::iter::repeat_n(g, d)).collect();
    let mut g_mass = vec![0.0; n];
    for t in (0..tape.steps()).rev() {
        let (c, r, r_prev) = (&tape.products[t], &tape.aggregates[t + 1], &tape.aggregates[t]);
        let (mass, mass_prev) = (&tape.masses[t + 1], &tape.masses[t]);
        let mut g_alpha = vec![0.0; n];
        let mut g_mass_prev = vec![0.0; n];
        for p in 0..n {
            let s = p * d..(p + 1) * d;
            let (gr, cp, rp, rpp) = (&g_r[s.clone()], &c[s.clone()], &r[s.clone()], &r_prev[s]);
            let mut to_alpha = 0.0;
            let mut to_mass = 0.0;
            for k in 0..d {
                to_alpha += gr[k] * (cp[k] - rp[k]);
                to_mass += gr[k] * (rpp[k] - rp[k]);
            }
            g_alpha[p] = to_alpha / mass[p] + g_mass[p];
            g_mass_prev[p] = to_mass / mass[p] + g_mass[p];
        }
        let g_x = net.backward_into(&tape.net_tapes[t], &g_alpha, &mut grads)?;
        for p in 0..n {
            let keep = mass_prev[p] / mass[p];
            for k in p * d..(p + 1) * d {
                g_r[k] = g_r[k] * keep + g_x[k];
            }
        }
        g_mass = g_mass_prev;
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("aggregation gradient".into()));
    }
    Ok(grads)
}

/// Σ αᵢ sᵢ / Σ αᵢ.
pub fn similarity_weighted_mean(cosines: &[f64], alpha: &[f64]) -> Result<f64> {
    if cosines.is_empty() {
        return Err(Error::InvalidArgument("no cosines to average".into()));
    }
    if cosines.len() != alpha.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} cosines, {} weights",
            cosines.len(),
            alpha.len()
        )));
    }
    if let Some(a) = alpha.iter().find(|&&a| a.is_nan() || a <= 0.0) {
        return Err(Error::InvalidArgument(format!("importance weight {a} is not positive")));
    }
    let mass: f64 = alpha.iter().sum();
    Ok(cosines.iter().zip(alpha).map(|(s, a)| s * a).sum::<f64>() / mass)
}

/// Mean of the clip features, each ℓ2-normalized first if `normalize`.
pub fn mean_embedding(features: &[Vector], normalize: bool) -> Result<Vector> {
    let Some(first) = features.first() else {
        return Err(Error::InvalidArgument("sequence has no clips".into()));
    };
    check_sequence(features, first.len(), "pooled")?;
    let mut acc = vec![0.0; first.len()];
    for f in features {
        let f = if normalize { l2_normalize(f)? } else { f.clone() };
        for (a, v) in acc.iter_mut().zip(f.as_slice()) {
            *a += v;
        }
    }
    let m = features.len() as f64;
    Vector::new(acc.into_iter().map(|a| a / m).collect())
}

/// Cosine between the pooled embeddings of two sequences.
pub fn aggregate_mean(query: &[Vector], gallery: &[Vector], normalize: bool) -> Result<f64> {
    cosine(&mean_embedding(query, normalize)?, &mean_embedding(gallery, normalize)?)
}

/// Affine map `y = x·W + b` applied to every clip before the top-t%
/// cosines. `W` is stored input-major (`weight[k][j]` maps input `k` to
/// output `j`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ProjectionLayer {
    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Matrix::identity(dim),
            bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    /// Projected clips, flat `M × D`.
    pub fn project(&self, seq: &[Vector]) -> Result<Vec<f64>> {
        let d = self.dim();
        check_sequence(seq, d, "projected")?;
        let flat: Vec<f64> = seq.iter().flat_map(|v| v.as_slice().iter().copied()).collect();
        let mut out = vec![0.0; flat.len()];
        affine_rows(&flat, d, self.weight.as_slice(), &self.bias, &mut out);
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let d = self.dim();
        let mut c = Checkpoint::new(ModelKind::Projection);
        c.push("weight", &[d, d], self.weight.as_slice());
        c.push("bias", &[d], &self.bias);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(ModelKind::Projection)?;
        let d = match c.shape_of("bias")? {
            [d] => *d,
            other => return Err(Error::ShapeMismatch(format!("bias shape {other:?}"))),
        };
        Ok(Self {
            weight: Matrix::new(d, d, c.get("weight", &[d, d])?.to_vec())?,
            bias: c.get("bias", &[d])?.to_vec(),
        })
    }
}

impl Parameters for ProjectionLayer {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice(), &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_mut_slice(), &mut self.bias]
    }
}

/// Number of clip pairs kept by top-t% selection.
pub fn top_t_count(num_pairs: usize, t: f64) -> Result<usize> {
    if !t.is_finite() || t <= 0.0 || t > 100.0 {
        return Err(Error::InvalidArgument(format!("t = {t} is outside (0, 100]")));
    }
    // the guard keeps exact products such as 50% of 4 from rounding up
    let k = (t / 100.0 * num_pairs as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(k.min(num_pairs))
}

/// `(cosine, |a|, |b|)` of every canonical pair of two projected sequences.
fn projected_cosines(a: &[f64], b: &[f64], d: usize) -> Result<Vec<(f64, f64, f64)>> {
    let mut out = Vec::with_capacity(a.len() / d * (b.len() / d));
    for ar in a.chunks_exact(d) {
        let na = norm(ar);
        for br in b.chunks_exact(d) {
            let nb = norm(br);
            if na <= NORM_EPS || nb <= NORM_EPS {
                return Err(Error::Degenerate("projected clip has zero norm".into()));
            }
            out.push(((dot_slice(ar, br) / (na * nb)).clamp(-1.0, 1.0), na, nb));
        }
    }
    Ok(out)
}

/// Indices of the `k` largest cosines; ties keep canonical order.
fn select_top(cos: &[(f64, f64, f64)], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cos.len()).collect();
    idx.sort_by(|&x, &y| cos[y].0.total_cmp(&cos[x].0));
    idx.truncate(k);
    idx
}

fn top_t_projected(a: &[f64], b: &[f64], d: usize, t: f64) -> Result<f64> {
    let cos = projected_cosines(a, b, d)?;
    let k = top_t_count(cos.len(), t)?;
    let sel = select_top(&cos, k);
    Ok(sel.iter().map(|&i| cos[i].0).sum::<f64>() / k as f64)
}

pub fn top_t_similarity(query: &[Vector], gallery: &[Vector], proj: &ProjectionLayer, t: f64) -> Result<f64> {
    top_t_projected(&proj.project(query)?, &proj.project(gallery)?, proj.dim(), t)
}

/// Top-t% similarity together with the accumulation of
/// `g_sim · ∂s/∂(W, b)` into `grads`. Only the selected pairs carry
/// gradient.
pub fn top_t_backward(
    query: &[Vector],
    gallery: &[Vector],
    proj: &ProjectionLayer,
    t: f64,
    g_sim: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    let d = proj.dim();
    let (a, b) = (proj.project(query)?, proj.project(gallery)?);
    let cos = projected_cosines(&a, &b, d)?;
    let k = top_t_count(cos.len(), t)?;
    let sel = select_top(&cos, k);
    let mg = gallery.len();
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let w = g_sim / k as f64;
    for &p in &sel {
        let (i, j) = (p / mg, p % mg);
        let (s, na, nb) = cos[p];
        let (ar, br) = (&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d]);
        for m in 0..d {
            ga[i * d + m] += w * (br[m] / (na * nb) - s * ar[m] / (na * na));
            gb[j * d + m] += w * (ar[m] / (na * nb) - s * br[m] / (nb * nb));
        }
    }
    let [gw, gbias] = &mut grads.0[..] else {
        return Err(Error::ShapeMismatch("projection gradient layout".into()));
    };
    for (seq, g) in [(query, &ga), (gallery, &gb)] {
        let flat: Vec<f64> = seq.iter().flat_map(|v| v.as_slice().iter().copied()).collect();
        affine_rows_backward(&flat, d, proj.weight.as_slice(), g, d, gw, gbias, None);
    }
    Ok(sel.iter().map(|&i| cos[i].0).sum::<f64>() / k as f64)
}

/// A sequence-similarity estimator with its parameters.
#[derive(Debug, Clone, Copy)]
pub enum Estimator<'a> {
    Learned(&'a ScoringNet),
    Mean { normalize: bool },
    TopT { projection: &'a ProjectionLayer, t: f64 },
}

impl Estimator<'_> {
    pub fn similarity(&self, query: &[Vector], gallery: &[Vector]) -> Result<f64> {
        match *self {
            Estimator::Learned(net) => Ok(aggregate_learned(query, gallery, net)?.similarity),
            Estimator::Mean { normalize } => aggregate_mean(query, gallery, normalize),
            Estimator::TopT { projection, t } => top_t_similarity(query, gallery, projection, t),
        }
    }
}

fn cell(row: usize, col: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Cell {
        row,
        col,
        source: Box::new(e),
    }
}

/// `S[i][j] = estimator(queries[i], galleries[j])`, computed in parallel
/// over query rows. Equal to calling the estimator cell by cell.
pub fn pairwise_similarity_matrix(
    queries: &[&[Vector]],
    galleries: &[&[Vector]],
    est: Estimator<'_>,
) -> Result<Matrix> {
    if queries.is_empty() || galleries.is_empty() {
        return Err(Error::InvalidArgument("empty query or gallery set".into()));
    }
    let cols = galleries.len();
    let rows: Vec<Result<Vec<f64>>> = match est {
        Estimator::Mean { normalize } => {
            let pool = |s: &[Vector]| mean_embedding(s, normalize);
            let g: Vec<Vector> = galleries
                .iter()
                .enumerate()
                .map(|(j, s)| pool(s).map_err(cell(0, j)))
                .collect::<Result<_>>()?;
            queries
                .par_iter()
                .enumerate()
                .map(|(i, q)| {
                    let q = pool(q).map_err(cell(i, 0))?;
                    g.iter()
                        .enumerate()
                        .map(|(j, g)| cosine(&q, g).map_err(cell(i, j)))
                        .collect()
                })
                .collect()
        }
        Estimator::TopT { projection, t } => {
            let d = projection.dim();
            let g: Vec<Vec<f64>> = galleries
                .iter()
                .enumerate()
                .map(|(j, s)| projection.project(s).map_err(cell(0, j)))
                .collect::<Result<_>>()?;
            queries
                .par_iter()
                .enumerate()
                .map(|(i, q)| {
                    let q = projection.project(q).map_err(cell(i, 0))?;
                    g.iter()
                        .enumerate()
                        .map(|(j, g)| top_t_projected(&q, g, d, t).map_err(cell(i, j)))
                        .collect()
                })
                .collect()
        }
        Estimator::Learned(net) => queries
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let pairs: Vec<(&[Vector], &[Vector])> = galleries.iter().map(|g| (*q, *g)).collect();
                match aggregate_learned_batch(&pairs, net) {
                    Ok(traces) => Ok(traces.into_iter().map(|t| t.similarity).collect()),
                    // locate the failing cell
                    Err(_) => galleries
                        .iter()
                        .enumerate()
                        .map(|(j, g)| Ok(aggregate_learned(q, g, net).map_err(cell(i, j))?.similarity))
                        .collect(),
                }
            })
            .collect(),
    };
    let mut data = Vec::with_capacity(queries.len() * cols);
    for r in rows {
        data.extend(r?);
    }
    Matrix::new(queries.len(), cols, data)
}
