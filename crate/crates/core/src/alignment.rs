//! Pairwise sigmoid alignment of pooled representations with concept
//! embeddings, and zero-shot recognition in the shared space.
//!
//! The head first applies a frozen whitening transform fitted on the
//! training pooled vectors (object evidence is a small perturbation on top
//! of a background-dominated mean), then the learnable projection.

use nalgebra::{DMatrix, SymmetricEigen};
use numkernel::{RngStream, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoders::{cosine, OracleEncoders};
use crate::error::{CxsError, Result};

pub const TAU_INIT: f64 = 10.0;
pub const BIAS_INIT: f64 = -10.0;
/// Eigenvalue floor of the whitening transform, relative to the mean eigenvalue.
const WHITEN_SHRINK: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignHead {
    /// `[d]`, frozen.
    pub input_mean: Tensor,
    /// `[d, d]`, frozen.
    pub whiten: Tensor,
    /// `[d, d_t]`.
    pub projection: Tensor,
    /// `[1]`; `τ = exp(log_tau)`.
    pub log_tau: Tensor,
    /// `[1]`.
    pub bias: Tensor,
}

impl AlignHead {
    /// Head with identity whitening and a random projection.
    pub fn init(dim: usize, text_dim: usize, rng: &mut RngStream) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        Self {
            input_mean: Tensor::zeros([dim]),
            whiten: Tensor::eye(dim, dim),
            projection: Tensor::new([dim, text_dim], (0..dim * text_dim).map(|_| std * rng.standard_normal()).collect())
                .expect("shape"),
            log_tau: Tensor::scalar(TAU_INIT.ln()),
            bias: Tensor::scalar(BIAS_INIT),
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.item().exp()
    }

    /// Fit the frozen input transform to `pooled` (one row per scene).
    pub fn fit_whitening(&mut self, pooled: &[Vec<f64>]) -> Result<()> {
        let d = self.dim();
        if pooled.is_empty() {
            return Err(CxsError::Empty("whitening set"));
        }
        let n = pooled.len() as f64;
        let mut mean = vec![0.0; d];
        for v in pooled {
            if v.len() != d {
                return Err(CxsError::LengthMismatch(format!("pooled vector of {} dims, head has {d}", v.len())));
            }
            mean.iter_mut().zip(v).for_each(|(m, x)| *m += x / n);
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for v in pooled {
            let c = DMatrix::from_iterator(d, 1, v.iter().zip(&mean).map(|(x, m)| x - m));
            cov += &c * c.transpose() / n;
        }
        let eig = SymmetricEigen::new(cov);
        let floor = WHITEN_SHRINK * (eig.eigenvalues.sum() / d as f64).max(1e-300);
        let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + floor).sqrt()));
        let w = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
        self.input_mean = Tensor::vector(mean);
        self.whiten = Tensor::new([d, d], (0..d * d).map(|i| w[(i / d, i % d)]).collect())?;
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("input_mean".into(), &self.input_mean),
            ("whiten".into(), &self.whiten),
            ("projection".into(), &self.projection),
            ("log_tau".into(), &self.log_tau),
            ("bias".into(), &self.bias),
        ]
    }

    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut it = named.into_iter();
        let mut take = |name: &str| {
            it.next()
                .filter(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| CxsError::Checkpoint(format!("alignment head is missing {name}")))
        };
        let head = Self {
            input_mean: take("input_mean")?,
            whiten: take("whiten")?,
            projection: take("projection")?,
            log_tau: take("log_tau")?,
            bias: take("bias")?,
        };
        let d = head.dim();
        if head.input_mean.numel() != d || head.whiten.shape() != [d, d] || head.log_tau.numel() != 1 || head.bias.numel() != 1 {
            return Err(CxsError::Checkpoint("alignment head tensors have inconsistent shapes".into()));
        }
        Ok(head)
    }

    /// Whitened inputs, off any tape.
    fn prepare(&self, pooled: &[Vec<f64>]) -> Result<Tensor> {
        let d = self.dim();
        let mut rows = Vec::with_capacity(pooled.len() * d);
        for v in pooled {
            if v.len() != d {
                return Err(CxsError::LengthMismatch(format!("pooled vector of {} dims, head has {d}", v.len())));
            }
            rows.extend(v.iter().zip(self.input_mean.data()).map(|(x, m)| x - m));
        }
        Ok(Tensor::new([pooled.len(), d], rows)?.matmul(&self.whiten)?)
    }

    /// Unit vector in the concept space; a zero projection maps to the zero
    /// vector (similarity 0 with everything).
    pub fn project_to_shared(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        let x = self.prepare(&[pooled.to_vec()])?;
        let tape = Tape::new();
        let out = tape.constant(x).matmul(tape.constant(self.projection.clone()))?.l2_normalize()?;
        let v = out.value().data().to_vec();
        if v.iter().all(|&x| x == 0.0) {
            log::warn!("pooled representation projects to zero; similarities are 0");
        }
        Ok(v)
    }
}

/// Mean over all tokens of a `[.., d]` grid.
pub fn pool_representation(h_tilde: &Tensor) -> Vec<f64> {
    crate::encoders::mean_token(h_tilde)
}

fn check_match(y: &[Vec<f64>], k: usize) -> Result<()> {
    if y.len() != k || y.iter().any(|r| r.len() != k) {
        return Err(CxsError::LengthMismatch(format!("match matrix must be {k}x{k}")));
    }
    if let Some(bad) = y.iter().flatten().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(CxsError::InvalidMatch(*bad));
    }
    Ok(())
}

/// `-(1/K^2) Σ log σ(y_ij (⟨x_i, t_j⟩ / τ + b))` on a tape. `x` is `[K, d_t]`
/// unit rows, `text` is `[K, d_t]`.
pub fn siglip_on_tape<'t>(x: Var<'t>, text: &Tensor, y: &Tensor, log_tau: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let tape = x.tape();
    let logits = x
        .matmul(tape.constant(text.clone()).transpose()?)?
        .mul(log_tau.scale(-1.0)?.exp()?)?
        .add(bias)?;
    let k2 = y.numel() as f64;
    Ok(logits.mul(tape.constant(y.clone()))?.log_sigmoid()?.sum()?.scale(-1.0 / k2)?)
}

/// The head's full objective on raw pooled vectors.
fn head_loss<'t>(
    tape: &'t Tape,
    inputs: &Tensor,
    text: &Tensor,
    y: &Tensor,
    vars: &[Var<'t>],
) -> Result<Var<'t>> {
    let [projection, log_tau, bias] = [vars[0], vars[1], vars[2]];
    let x = tape.constant(inputs.clone()).matmul(projection)?.l2_normalize()?;
    siglip_on_tape(x, text, y, log_tau, bias)
}

/// SigLIP loss for already-projected unit vectors.
pub fn loss_siglip(pooled_unit: &[Vec<f64>], text_unit: &[Vec<f64>], y: &[Vec<f64>], tau: f64, bias: f64) -> Result<f64> {
    let k = pooled_unit.len();
    if k == 0 || text_unit.len() != k {
        return Err(CxsError::LengthMismatch(format!("{k} images, {} texts", text_unit.len())));
    }
    check_match(y, k)?;
    let tape = Tape::new();
    let x = tape.constant(Tensor::new([k, pooled_unit[0].len()], pooled_unit.concat())?);
    let text = Tensor::new([k, text_unit[0].len()], text_unit.concat())?;
    let ym = Tensor::new([k, k], y.concat())?;
    let lt = tape.constant(Tensor::scalar(tau.ln()));
    let b = tape.constant(Tensor::scalar(bias));
    Ok(siglip_on_tape(x, &text, &ym, lt, b)?.item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTwoConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch: usize,
}

#[derive(Debug, Clone)]
pub struct StageTwoResult {
    pub head: AlignHead,
    /// Mean loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Train the head on frozen pooled representations. Each epoch walks a
/// fresh permutation in batches of `batch` scenes; every scene contributes
/// one uniformly drawn label as its text, and `y_ij = +1` iff text `j` is
/// among scene `i`'s labels.
pub fn train_stage2(
    pooled: &[Vec<f64>],
    labels: &[u64],
    enc: &OracleEncoders,
    mut head: AlignHead,
    config: &StageTwoConfig,
    rng: &mut RngStream,
) -> Result<StageTwoResult> {
    if pooled.is_empty() {
        return Err(CxsError::Empty("stage-II training set"));
    }
    if pooled.len() != labels.len() {
        return Err(CxsError::LengthMismatch(format!("{} pooled vectors, {} label sets", pooled.len(), labels.len())));
    }
    if config.batch == 0 {
        return Err(CxsError::InvalidSpec("stage-II batch must be positive".into()));
    }
    let inputs = head.prepare(pooled)?;
    let d = head.dim();
    let dt = enc.text_dim;
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let order = rng.permutation(pooled.len());
        let (mut total, mut steps) = (0.0, 0usize);
        for batch in order.chunks(config.batch) {
            let k = batch.len();
            let mut x = Vec::with_capacity(k * d);
            let mut text = Vec::with_capacity(k * dt);
            let mut drawn = Vec::with_capacity(k);
            for &i in batch {
                x.extend_from_slice(inputs.row(i));
                let present: Vec<usize> = (0..64).filter(|c| labels[i] >> c & 1 == 1).collect();
                if present.is_empty() {
                    return Err(CxsError::Empty("label set of a stage-II scene"));
                }
                let c = present[rng.below(present.len())];
                text.extend_from_slice(enc.concept(c)?);
                drawn.push(c);
            }
            let y: Vec<f64> = batch
                .iter()
                .flat_map(|&i| drawn.iter().map(move |&c| if labels[i] >> c & 1 == 1 { 1.0 } else { -1.0 }))
                .collect();
            let tape = Tape::new();
            let vars = [
                tape.param(head.projection.clone()),
                tape.param(head.log_tau.clone()),
                tape.param(head.bias.clone()),
            ];
            let loss = head_loss(
                &tape,
                &Tensor::new([k, d], x)?,
                &Tensor::new([k, dt], text)?,
                &Tensor::new([k, k], y)?,
                &vars,
            )?;
            total += loss.item();
            steps += 1;
            let grads = tape.backward(loss)?;
            for (t, v) in [&mut head.projection, &mut head.log_tau, &mut head.bias].into_iter().zip(vars) {
                t.sgd_step(&grads.get_or_zeros(v), config.learning_rate);
            }
        }
        loss_trace.push(total / steps as f64);
    }
    Ok(StageTwoResult { head, loss_trace })
}

/// The head objective as a function of `[projection, log_tau, bias]`, for
/// gradient checks.
pub fn head_objective<'t>(
    tape: &'t Tape,
    vars: &[Var<'t>],
    head: &AlignHead,
    pooled: &[Vec<f64>],
    text: &Tensor,
    y: &Tensor,
) -> Result<Var<'t>> {
    head_loss(tape, &head.prepare(pooled)?, text, y, vars)
}

/// Concepts ranked by cosine with `unit`, best first, ties by lower id.
pub fn zero_shot_classify(unit: &[f64], enc: &OracleEncoders) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = (0..enc.concepts())
        .map(|c| (c, cosine(unit, enc.concept_table.row(c))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}
