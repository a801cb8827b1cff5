//! The importance-scoring network.
//!
//! ```text
//! x ─ Linear(D→H) ─ ReLU ─ Dropout ─ BatchNorm ─ Linear(H→H) ─ ReLU ─ Dropout ─ BatchNorm ─ Linear(H→1) ─ softplus ─ α
//! ```
//!
//! Inputs are batches of rows stored flat and row-major. In eval mode every
//! row is processed independently (running batch-norm statistics, no
//! dropout), so a row's score does not depend on what else is in the batch.
//! In train mode batch-norm normalizes with the batch's own statistics and
//! dropout is inverted (kept units are scaled by `1/(1-p)`).

use rand::Rng;

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::numerics::{affine_rows, affine_rows_backward, dot_slice, Matrix, Vector};
use crate::optim::{Gradients, Parameters};

pub const DEFAULT_HIDDEN: usize = 1024;
pub const DEFAULT_DROPOUT: f64 = 0.5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `log(1 + eˣ)`, evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn identity(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    fn width(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes `u` (n × width) in place into x̂ and writes `γ·x̂ + β` to
    /// `y`. Returns the per-feature `1/√(σ² + ε)` that was used.
    fn forward(&self, u: &mut [f64], n: usize, stats: Option<&[f64]>, y: &mut [f64]) -> Vec<f64> {
        let w = self.width();
        let (mean, inv): (Vec<f64>, Vec<f64>) = match stats {
            Some(var) => {
                // batch statistics: mean recomputed here, biased variance given
                let mean = column_mean(u, n, w);
                (mean, var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect())
            }
            None => (
                self.running_mean.clone(),
                self.running_var
                    .iter()
                    .map(|v| 1.0 / (v + self.eps).sqrt())
                    .collect(),
            ),
        };
        for (ur, yr) in u.chunks_exact_mut(w).zip(y.chunks_exact_mut(w)) {
            for j in 0..w {
                let xh = (ur[j] - mean[j]) * inv[j];
                ur[j] = xh;
                yr[j] = self.gamma[j] * xh + self.beta[j];
            }
        }
        inv
    }

    fn update_running(&mut self, mean: &[f64], biased_var: &[f64], n: usize) {
        let unbias = n as f64 / (n as f64 - 1.0);
        for j in 0..self.width() {
            self.running_mean[j] = (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean[j];
            self.running_var[j] =
                (1.0 - self.momentum) * self.running_var[j] + self.momentum * biased_var[j] * unbias;
        }
    }

    /// Given `g = dL/dy`, accumulates γ/β gradients and overwrites `g` with
    /// `dL/du`.
    fn backward(
        &self,
        xhat: &[f64],
        inv: &[f64],
        n: usize,
        mode: Mode,
        g: &mut [f64],
        g_gamma: &mut [f64],
        g_beta: &mut [f64],
    ) {
        let w = self.width();
        let mut sum_gx = vec![0.0; w];
        let mut sum_gx_xh = vec![0.0; w];
        for (gr, xr) in g.chunks_exact_mut(w).zip(xhat.chunks_exact(w)) {
            for j in 0..w {
                g_gamma[j] += gr[j] * xr[j];
                g_beta[j] += gr[j];
                gr[j] *= self.gamma[j];
                sum_gx[j] += gr[j];
                sum_gx_xh[j] += gr[j] * xr[j];
            }
        }
        match mode {
            Mode::Eval => {
                for gr in g.chunks_exact_mut(w) {
                    for j in 0..w {
                        gr[j] *= inv[j];
                    }
                }
            }
            Mode::Train => {
                let nf = n as f64;
                for (gr, xr) in g.chunks_exact_mut(w).zip(xhat.chunks_exact(w)) {
                    for j in 0..w {
                        gr[j] = inv[j] / nf * (nf * gr[j] - sum_gx[j] - xr[j] * sum_gx_xh[j]);
                    }
                }
            }
        }
    }
}

fn column_mean(u: &[f64], n: usize, w: usize) -> Vec<f64> {
    let mut mean = vec![0.0; w];
    for r in u.chunks_exact(w) {
        for j in 0..w {
            mean[j] += r[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

fn column_biased_var(u: &[f64], mean: &[f64], n: usize, w: usize) -> Vec<f64> {
    let mut var = vec![0.0; w];
    for r in u.chunks_exact(w) {
        for j in 0..w {
            let d = r[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    var
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ScoringTape {
    mode: Mode,
    n: usize,
    input_dim: usize,
    hidden: usize,
    x: Vec<f64>,
    /// d(dropout(relu(z)))/dz: 0 or the dropout scale.
    gate1: Vec<f64>,
    xhat1: Vec<f64>,
    inv1: Vec<f64>,
    y1: Vec<f64>,
    gate2: Vec<f64>,
    xhat2: Vec<f64>,
    inv2: Vec<f64>,
    y2: Vec<f64>,
    out: Vec<f64>,
}

impl ScoringTape {
    pub fn batch_size(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Batch-normalized activations of the first hidden layer.
    pub fn normalized_hidden1(&self) -> &[f64] {
        &self.xhat1
    }

    pub fn normalized_hidden2(&self) -> &[f64] {
        &self.xhat2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringNet {
    input_dim: usize,
    hidden: usize,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub bn1: BatchNorm,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub bn2: BatchNorm,
    pub w_out: Vec<f64>,
    pub b_out: f64,
    pub dropout: f64,
}

impl ScoringNet {
    /// Kaiming-uniform weights (bound `√(6/fan_in)` for ReLU layers,
    /// `√(3/fan_in)` for the linear output), zero biases, identity batch-norm.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut uniform = |n: usize, bound: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w1 = uniform(input_dim * hidden, (6.0 / input_dim as f64).sqrt());
        let w2 = uniform(hidden * hidden, (6.0 / hidden as f64).sqrt());
        let w_out = uniform(hidden, (3.0 / hidden as f64).sqrt());
        Self {
            input_dim,
            hidden,
            w1: Matrix::new(input_dim, hidden, w1).expect("finite init"),
            b1: vec![0.0; hidden],
            bn1: BatchNorm::identity(hidden),
            w2: Matrix::new(hidden, hidden, w2).expect("finite init"),
            b2: vec![0.0; hidden],
            bn2: BatchNorm::identity(hidden),
            w_out,
            b_out: 0.0,
            dropout: DEFAULT_DROPOUT,
        }
    }

    /// All weights and biases zero; scores `softplus(0) = ln 2` everywhere
    /// in eval mode.
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            input_dim,
            hidden,
            w1: Matrix::zeros(input_dim, hidden),
            b1: vec![0.0; hidden],
            bn1: BatchNorm::identity(hidden),
            w2: Matrix::zeros(hidden, hidden),
            b2: vec![0.0; hidden],
            bn2: BatchNorm::identity(hidden),
            w_out: vec![0.0; hidden],
            b_out: 0.0,
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn check_input(&self, x: &[f64]) -> Result<usize> {
        if x.is_empty() || !x.len().is_multiple_of(self.input_dim) {
            return Err(Error::ShapeMismatch(format!(
                "input of {} values is not a batch of {}-dim rows",
                x.len(),
                self.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scoring net input".into()));
        }
        Ok(x.len() / self.input_dim)
    }

    /// Forward pass over a batch. Train mode updates the running batch-norm
    /// statistics and draws dropout masks from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        x: &[f64],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<f64>, ScoringTape)> {
        let n = self.check_input(x)?;
        if mode == Mode::Train && n < 2 {
            return Err(Error::InvalidArgument(
                "train-mode batch-norm needs at least 2 rows".into(),
            ));
        }
        let h = self.hidden;
        let keep_scale = 1.0 / (1.0 - self.dropout);
        let mut draw_gates = |z: &[f64]| -> Vec<f64> {
            z.iter()
                .map(|&v| {
                    let kept = mode == Mode::Eval
                        || self.dropout == 0.0
                        || rng.random::<f64>() >= self.dropout;
                    match (v > 0.0, kept, mode) {
                        (false, _, _) | (_, false, _) => 0.0,
                        (true, true, Mode::Eval) => 1.0,
                        (true, true, Mode::Train) if self.dropout == 0.0 => 1.0,
                        (true, true, Mode::Train) => keep_scale,
                    }
                })
                .collect()
        };

        let mut z1 = vec![0.0; n * h];
        affine_rows(x, self.input_dim, self.w1.as_slice(), &self.b1, &mut z1);
        let gate1 = draw_gates(&z1);
        let mut u1: Vec<f64> = z1.iter().zip(&gate1).map(|(z, g)| z * g).collect();
        drop(z1);

        let mut z2 = vec![0.0; n * h];
        let mut y1 = vec![0.0; n * h];
        let (inv1, batch1) = self.normalize(1, &mut u1, n, mode, &mut y1);
        affine_rows(&y1, h, self.w2.as_slice(), &self.b2, &mut z2);
        let gate2 = draw_gates(&z2);
        let mut u2: Vec<f64> = z2.iter().zip(&gate2).map(|(z, g)| z * g).collect();
        drop(z2);

        let mut y2 = vec![0.0; n * h];
        let (inv2, batch2) = self.normalize(2, &mut u2, n, mode, &mut y2);

        let out: Vec<f64> = y2
            .chunks_exact(h)
            .map(|r| dot_slice(r, &self.w_out) + self.b_out)
            .collect();
        let alpha: Vec<f64> = out.iter().map(|&o| softplus(o)).collect();
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("importance score".into()));
        }

        if let (Some((m1, v1)), Some((m2, v2))) = (batch1, batch2) {
            self.bn1.update_running(&m1, &v1, n);
            self.bn2.update_running(&m2, &v2, n);
        }

        let tape = ScoringTape {
            mode,
            n,
            input_dim: self.input_dim,
            hidden: h,
            x: x.to_vec(),
            gate1,
            xhat1: u1,
            inv1,
            y1,
            gate2,
            xhat2: u2,
            inv2,
            y2,
            out,
        };
        Ok((alpha, tape))
    }

    /// Batch-norm for layer `which`; returns the inverse std used and, in
    /// train mode, the batch (mean, biased variance).
    #[allow(clippy::type_complexity)]
    fn normalize(
        &self,
        which: u8,
        u: &mut [f64],
        n: usize,
        mode: Mode,
        y: &mut [f64],
    ) -> (Vec<f64>, Option<(Vec<f64>, Vec<f64>)>) {
        let bn = if which == 1 { &self.bn1 } else { &self.bn2 };
        match mode {
            Mode::Eval => (bn.forward(u, n, None, y), None),
            Mode::Train => {
                let mean = column_mean(u, n, bn.width());
                let var = column_biased_var(u, &mean, n, bn.width());
                let inv = bn.forward(u, n, Some(&var), y);
                (inv, Some((mean, var)))
            }
        }
    }

    /// Eval-mode scores without recording a tape.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.check_input(x)?;
        let h = self.hidden;
        let mut a = vec![0.0; n * h];
        let mut b = vec![0.0; n * h];
        affine_rows(x, self.input_dim, self.w1.as_slice(), &self.b1, &mut a);
        self.relu_bn_eval(&self.bn1, &mut a);
        affine_rows(&a, h, self.w2.as_slice(), &self.b2, &mut b);
        self.relu_bn_eval(&self.bn2, &mut b);
        let alpha: Vec<f64> = b
            .chunks_exact(h)
            .map(|r| softplus(dot_slice(r, &self.w_out) + self.b_out))
            .collect();
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("importance score".into()));
        }
        Ok(alpha)
    }

    /// Must stay arithmetically identical to the eval branch of [`forward`].
    fn relu_bn_eval(&self, bn: &BatchNorm, z: &mut [f64]) {
        let w = bn.width();
        let inv: Vec<f64> = bn.running_var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
        for r in z.chunks_exact_mut(w) {
            for j in 0..w {
                let u = if r[j] > 0.0 { r[j] * 1.0 } else { 0.0 * r[j] };
                let xh = (u - bn.running_mean[j]) * inv[j];
                r[j] = bn.gamma[j] * xh + bn.beta[j];
            }
        }
    }

    /// Exact gradients of `Σ_n g_alpha[n]·α_n` with respect to every parameter
    /// and every input entry.
    pub fn backward(&self, tape: &ScoringTape, g_alpha: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let mut grads = self.zero_grads();
        let gx = self.backward_into(tape, g_alpha, &mut grads)?;
        Ok((grads, gx))
    }

    /// Like [`backward`], accumulating parameter gradients into `grads`.
    pub fn backward_into(
        &self,
        tape: &ScoringTape,
        g_alpha: &[f64],
        grads: &mut Gradients,
    ) -> Result<Vec<f64>> {
        let (n, h, d) = (tape.n, self.hidden, self.input_dim);
        if tape.input_dim != d || tape.hidden != h {
            return Err(Error::ShapeMismatch(format!(
                "tape for {}→{} net, this net is {d}→{h}",
                tape.input_dim, tape.hidden
            )));
        }
        if g_alpha.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} upstream gradients for a batch of {n}",
                g_alpha.len()
            )));
        }
        if grads.0.len() != 10 {
            return Err(Error::ShapeMismatch("gradient layout".into()));
        }
        let [gw1, gb1, gg1, gbe1, gw2, gb2, gg2, gbe2, gwo, gbo] = &mut grads.0[..] else {
            unreachable!()
        };

        let g_out: Vec<f64> = g_alpha
            .iter()
            .zip(&tape.out)
            .map(|(g, &o)| g * sigmoid(o))
            .collect();
        let mut g2 = vec![0.0; n * h];
        for ((gr, yr), &go) in g2.chunks_exact_mut(h).zip(tape.y2.chunks_exact(h)).zip(&g_out) {
            gbo[0] += go;
            for j in 0..h {
                gwo[j] += go * yr[j];
                gr[j] = go * self.w_out[j];
            }
        }

        self.bn2
            .backward(&tape.xhat2, &tape.inv2, n, tape.mode, &mut g2, gg2, gbe2);
        g2.iter_mut().zip(&tape.gate2).for_each(|(g, k)| *g *= k);
        let mut g1 = vec![0.0; n * h];
        affine_rows_backward(&tape.y1, h, self.w2.as_slice(), &g2, h, gw2, gb2, Some(&mut g1));

        self.bn1
            .backward(&tape.xhat1, &tape.inv1, n, tape.mode, &mut g1, gg1, gbe1);
        g1.iter_mut().zip(&tape.gate1).for_each(|(g, k)| *g *= k);
        let mut gx = vec![0.0; n * d];
        affine_rows_backward(&tape.x, d, self.w1.as_slice(), &g1, h, gw1, gb1, Some(&mut gx));
        Ok(gx)
    }

    /// Convenience forward over `Vector` rows.
    pub fn forward_vectors<R: Rng + ?Sized>(
        &mut self,
        inputs: &[Vector],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<f64>, ScoringTape)> {
        let mut flat = Vec::with_capacity(inputs.len() * self.input_dim);
        for v in inputs {
            if v.len() != self.input_dim {
                return Err(Error::ShapeMismatch(format!(
                    "input of length {}, expected {}",
                    v.len(),
                    self.input_dim
                )));
            }
            flat.extend_from_slice(v.as_slice());
        }
        self.forward(&flat, mode, rng)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (d, h) = (self.input_dim, self.hidden);
        let mut c = Checkpoint::new(ModelKind::ScoringNet);
        c.push("w1", &[d, h], self.w1.as_slice());
        c.push("b1", &[h], &self.b1);
        push_bn(&mut c, "bn1", &self.bn1);
        c.push("w2", &[h, h], self.w2.as_slice());
        c.push("b2", &[h], &self.b2);
        push_bn(&mut c, "bn2", &self.bn2);
        c.push("w_out", &[h], &self.w_out);
        c.push("b_out", &[1], &[self.b_out]);
        c.push("dropout", &[1], &[self.dropout]);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(ModelKind::ScoringNet)?;
        let (d, h) = match c.shape_of("w1")? {
            [d, h] => (*d, *h),
            other => return Err(Error::ShapeMismatch(format!("w1 shape {other:?}"))),
        };
        Ok(Self {
            input_dim: d,
            hidden: h,
            w1: Matrix::new(d, h, c.get("w1", &[d, h])?.to_vec())?,
            b1: c.get("b1", &[h])?.to_vec(),
            bn1: read_bn(c, "bn1", h)?,
            w2: Matrix::new(h, h, c.get("w2", &[h, h])?.to_vec())?,
            b2: c.get("b2", &[h])?.to_vec(),
            bn2: read_bn(c, "bn2", h)?,
            w_out: c.get("w_out", &[h])?.to_vec(),
            b_out: c.scalar("b_out")?,
            dropout: c.scalar("dropout")?,
        })
    }
}

fn push_bn(c: &mut Checkpoint, prefix: &str, bn: &BatchNorm) {
    let w = bn.width();
    c.push(&format!("{prefix}.gamma"), &[w], &bn.gamma);
    c.push(&format!("{prefix}.beta"), &[w], &bn.beta);
    c.push(&format!("{prefix}.running_mean"), &[w], &bn.running_mean);
    c.push(&format!("{prefix}.running_var"), &[w], &bn.running_var);
    c.push(&format!("{prefix}.momentum"), &[1], &[bn.momentum]);
    c.push(&format!("{prefix}.eps"), &[1], &[bn.eps]);
}

fn read_bn(c: &Checkpoint, prefix: &str, w: usize) -> Result<BatchNorm> {
    let running_var = c.get(&format!("{prefix}.running_var"), &[w])?.to_vec();
    if running_var.iter().any(|v| *v < 0.0) {
        return Err(Error::Manifest(format!("{prefix}: negative running variance")));
    }
    Ok(BatchNorm {
        gamma: c.get(&format!("{prefix}.gamma"), &[w])?.to_vec(),
        beta: c.get(&format!("{prefix}.beta"), &[w])?.to_vec(),
        running_mean: c.get(&format!("{prefix}.running_mean"), &[w])?.to_vec(),
        running_var,
        momentum: c.scalar(&format!("{prefix}.momentum"))?,
        eps: c.scalar(&format!("{prefix}.eps"))?,
    })
}

impl Parameters for ScoringNet {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice(),
            &self.b1,
            &self.bn1.gamma,
            &self.bn1.beta,
            self.w2.as_slice(),
            &self.b2,
            &self.bn2.gamma,
            &self.bn2.beta,
            &self.w_out,
            std::slice::from_ref(&self.b_out),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_mut_slice(),
            &mut self.b1,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            self.w2.as_mut_slice(),
            &mut self.b2,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
            &mut self.w_out,
            std::slice::from_mut(&mut self.b_out),
        ]
    }
}
