//! Finite-difference verification of every differentiable component:
//! each tape primitive, the representation loss, the alignment objective
//! and the complete stage-I predictor loss.

use numkernel::{finite_difference_check, finite_difference_check_sampled, RngStream, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::alignment::{head_objective, AlignHead};
use crate::error::Result;
use crate::predictor::{loss_rep_on_tape, stage_one_loss, PredictorConfig, PredictorParams, StageOneSample};

/// Central-difference step used throughout.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.standard_normal()).collect()).expect("shape matches data")
}

fn weighted_sum<'t>(tape: &'t Tape, v: Var<'t>) -> numkernel::Result<Var<'t>> {
    let w = random(&v.shape(), &mut RngStream::new(7, 99));
    v.mul(tape.constant(w))?.sum()
}

fn primitive(
    out: &mut Vec<ComponentCheck>,
    name: &str,
    inputs: Vec<Tensor>,
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> numkernel::Result<Var<'t>>,
) -> Result<()> {
    let report = finite_difference_check(&inputs, FD_STEP, |tape, v| weighted_sum(tape, f(tape, v)?))?;
    out.push(ComponentCheck {
        component: format!("primitive.{name}"),
        max_rel_error: report.max_rel_error,
        checked: report.checked,
    });
    Ok(())
}

pub fn primitive_checks(seed: u64) -> Result<Vec<ComponentCheck>> {
    let mut rng = RngStream::new(seed, 0);
    let mut r = |s: &[usize]| random(s, &mut rng);
    let mut out = Vec::new();
    primitive(&mut out, "add", vec![r(&[3, 4]), r(&[3, 4])], |_, v| v[0].add(v[1]))?;
    primitive(&mut out, "add_row", vec![r(&[3, 4]), r(&[4])], |_, v| v[0].add(v[1]))?;
    primitive(&mut out, "sub", vec![r(&[2, 5]), r(&[2, 5])], |_, v| v[0].sub(v[1]))?;
    primitive(&mut out, "mul", vec![r(&[4, 3]), r(&[4, 3])], |_, v| v[0].mul(v[1]))?;
    primitive(&mut out, "mul_scalar", vec![r(&[4, 3]), r(&[1])], |_, v| v[0].mul(v[1]))?;
    primitive(&mut out, "scale", vec![r(&[3, 3])], |_, v| v[0].scale(-1.7))?;
    primitive(&mut out, "matmul", vec![r(&[3, 4]), r(&[4, 5])], |_, v| v[0].matmul(v[1]))?;
    primitive(&mut out, "transpose", vec![r(&[3, 5])], |_, v| v[0].transpose())?;
    primitive(&mut out, "reshape", vec![r(&[2, 6])], |_, v| v[0].reshape([3, 4]))?;
    primitive(&mut out, "concat", vec![r(&[2, 3]), r(&[4, 3])], |t, v| t.concat(&[v[0], v[1]]))?;
    primitive(&mut out, "slice", vec![r(&[5, 3])], |_, v| v[0].slice_rows(1, 3))?;
    primitive(&mut out, "softmax", vec![r(&[3, 5])], |_, v| v[0].softmax())?;
    primitive(&mut out, "tanh", vec![r(&[4, 4])], |_, v| v[0].tanh())?;
    primitive(&mut out, "sigmoid", vec![r(&[4, 4])], |_, v| v[0].sigmoid())?;
    primitive(&mut out, "log_sigmoid", vec![r(&[16])], |_, v| v[0].log_sigmoid())?;
    primitive(&mut out, "exp", vec![r(&[3, 3])], |_, v| v[0].exp())?;
    primitive(&mut out, "mean_axis", vec![r(&[2, 3, 4])], |_, v| v[0].mean_axis(1))?;
    primitive(&mut out, "variance_axis", vec![r(&[5, 3])], |_, v| v[0].variance_axis(0))?;
    primitive(&mut out, "standardize", vec![r(&[4, 6])], |_, v| v[0].standardize(1e-5))?;
    primitive(&mut out, "l2_normalize", vec![r(&[3, 5])], |_, v| v[0].l2_normalize())?;
    primitive(&mut out, "cosine", vec![r(&[4, 6]), r(&[4, 6])], |_, v| v[0].cosine(v[1]))?;
    primitive(&mut out, "avg_pool2", vec![r(&[4, 6, 3])], |_, v| v[0].avg_pool2())?;
    primitive(&mut out, "upsample2", vec![r(&[2, 3, 2])], |_, v| v[0].upsample2())?;
    primitive(&mut out, "sum", vec![r(&[3, 4])], |_, v| v[0].sum())?;
    Ok(out)
}

pub fn loss_rep_check(seed: u64) -> Result<ComponentCheck> {
    let mut rng = RngStream::new(seed, 1);
    let h_tilde = random(&[4, 4, 6], &mut rng);
    let h_star = random(&[4, 4, 6], &mut rng);
    let mu: Vec<f64> = (0..6).map(|_| 0.3 * rng.standard_normal()).collect();
    let report = finite_difference_check(&[h_tilde], FD_STEP, |_, v| {
        loss_rep_on_tape(v[0], &h_star, &mu).map_err(|e| numkernel::NumError::Objective(e.to_string()))
    })?;
    Ok(ComponentCheck {
        component: "loss_rep".into(),
        max_rel_error: report.max_rel_error,
        checked: report.checked,
    })
}

pub fn siglip_check(seed: u64) -> Result<ComponentCheck> {
    let (k, d, dt) = (5, 6, 4);
    let mut rng = RngStream::new(seed, 2);
    let mut head = AlignHead::init(d, dt, &mut rng);
    // moderate temperature and bias keep the logits away from saturation
    head.log_tau = Tensor::scalar(0.5f64.ln());
    head.bias = Tensor::scalar(-0.3);
    let pooled: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.standard_normal()).collect()).collect();
    let mut text = random(&[k, dt], &mut rng);
    for row in text.data_mut().chunks_mut(dt) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    let y = Tensor::new([k, k], (0..k * k).map(|i| if i % (k + 1) == 0 || rng.below(4) == 0 { 1.0 } else { -1.0 }).collect())?;
    let params = vec![head.projection.clone(), head.log_tau.clone(), head.bias.clone()];
    let report = finite_difference_check(&params, FD_STEP, |tape, v| {
        head_objective(tape, v, &head, &pooled, &text, &y).map_err(|e| numkernel::NumError::Objective(e.to_string()))
    })?;
    Ok(ComponentCheck {
        component: "loss_siglip".into(),
        max_rel_error: report.max_rel_error,
        checked: report.checked,
    })
}

/// The stage-I loss as a function of every predictor parameter.
/// `per_param` bounds the elements checked per tensor.
pub fn stage_one_check(config: PredictorConfig, seed: u64, per_param: usize, with_lr: bool) -> Result<ComponentCheck> {
    let mut rng = RngStream::new(seed, 3);
    let params = PredictorParams::init(config, &mut rng);
    let (s, d, l) = (config.tokens_side(), config.dim, config.lr_side);
    let sample = StageOneSample::new(random(&[s, s, d], &mut rng), random(&[l, l, d], &mut rng), config.grid)?;
    let observed: Vec<usize> = (0..config.grid * config.grid).filter(|_| rng.bernoulli(0.4).unwrap_or(false)).collect();
    let mu: Vec<f64> = (0..d).map(|_| 0.2 * rng.standard_normal()).collect();
    let tensors: Vec<Tensor> = params.trainable().into_iter().cloned().collect();
    let report = finite_difference_check_sampled(&tensors, FD_STEP, per_param, |tape, v| {
        stage_one_loss(tape, v, &config, &sample, &observed, &mu, with_lr)
            .map(|(loss, _)| loss)
            .map_err(|e| numkernel::NumError::Objective(e.to_string()))
    })?;
    Ok(ComponentCheck {
        component: format!("stage_one_loss.{}", if with_lr { "full" } else { "no_lr_context" }),
        max_rel_error: report.max_rel_error,
        checked: report.checked,
    })
}

/// Everything: primitives, both losses and the stage-I loss on a small
/// fully checked predictor plus a sampled check at `default_config`.
pub fn run_suite(default_config: PredictorConfig, seed: u64) -> Result<Vec<ComponentCheck>> {
    let small = PredictorConfig {
        grid: 3,
        dim: 4,
        lr_side: 2,
        blocks: 2,
    };
    let mut out = primitive_checks(seed)?;
    out.push(loss_rep_check(seed)?);
    out.push(siglip_check(seed)?);
    out.push(stage_one_check(small, seed, usize::MAX, true)?);
    out.push(stage_one_check(small, seed, usize::MAX, false)?);
    let mut sampled = stage_one_check(default_config, seed, 6, true)?;
    sampled.component.push_str(".default_geometry");
    out.push(sampled);
    Ok(out)
}
