//! Observation-guided latent predictor and its centered-cosine training.
//!
//! Observed tiles are rasterized onto the `2G x 2G` token grid, unobserved
//! positions take a shared mask embedding, and tile-level plus token-level
//! positional embeddings are added. The grid is 2x2 average-pooled to one
//! query per tile, refined by pre-norm single-head cross-attention blocks
//! over the LR tokens, and nearest-upsampled back to `2G x 2G`.

use std::fmt;
use std::str::FromStr;

use numkernel::{RngStream, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoders::mean_token;
use crate::error::{CxsError, Result};

const LN_EPS: f64 = 1e-5;
/// Scale of the initial mask and positional embeddings.
const EMBED_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub grid: usize,
    pub dim: usize,
    /// LR tokens per side.
    pub lr_side: usize,
    pub blocks: usize,
}

impl PredictorConfig {
    pub fn tokens_side(&self) -> usize {
        2 * self.grid
    }

    pub fn hidden(&self) -> usize {
        2 * self.dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoPredictor,
    DirectLrFill,
    NoLrContext,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPredictor => "no_predictor",
            Variant::DirectLrFill => "direct_lr_fill",
            Variant::NoLrContext => "no_lr_context",
        }
    }

    /// Whether this variant has trainable predictor weights.
    pub fn is_learned(self) -> bool {
        matches!(self, Variant::Full | Variant::NoLrContext)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CxsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_predictor" | "none" => Ok(Variant::NoPredictor),
            "direct_lr_fill" => Ok(Variant::DirectLrFill),
            "no_lr_context" => Ok(Variant::NoLrContext),
            _ => Err(CxsError::UnknownVariant(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub w_out: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
}

const BLOCK_TENSORS: [&str; 12] = [
    "ln1_gain", "ln1_bias", "w_query", "w_key", "w_value", "w_out", "ln2_gain", "ln2_bias", "ff1_w", "ff1_b", "ff2_w",
    "ff2_b",
];

impl BlockParams {
    fn init(cfg: &PredictorConfig, rng: &mut RngStream) -> Self {
        let (d, h) = (cfg.dim, cfg.hidden());
        let mut mat = |r: usize, c: usize, std: f64| {
            Tensor::new([r, c], (0..r * c).map(|_| std * rng.standard_normal()).collect()).expect("shape")
        };
        let sd = (1.0 / d as f64).sqrt();
        let sh = (1.0 / h as f64).sqrt();
        Self {
            ln1_gain: Tensor::full([d], 1.0),
            ln1_bias: Tensor::zeros([d]),
            w_query: mat(d, d, sd),
            w_key: mat(d, d, sd),
            w_value: mat(d, d, sd),
            w_out: mat(d, d, 0.5 * sd),
            ln2_gain: Tensor::full([d], 1.0),
            ln2_bias: Tensor::zeros([d]),
            ff1_w: mat(d, h, sd),
            ff1_b: Tensor::zeros([h]),
            ff2_w: mat(h, d, 0.5 * sh),
            ff2_b: Tensor::zeros([d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_query,
            &self.w_key,
            &self.w_value,
            &self.w_out,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.ff1_w,
            &self.ff1_b,
            &self.ff2_w,
            &self.ff2_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_query,
            &mut self.w_key,
            &mut self.w_value,
            &mut self.w_out,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ff1_w,
            &mut self.ff1_b,
            &mut self.ff2_w,
            &mut self.ff2_b,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub config: PredictorConfig,
    /// `[d]`.
    pub mask_embed: Tensor,
    /// `[G, G, d]`, broadcast over each tile's 2x2 block.
    pub e_tile: Tensor,
    /// `[2G, 2G, d]`.
    pub e_hr: Tensor,
    /// `[L * L, d]`, added to the LR tokens before they serve as keys and values.
    pub e_lr: Tensor,
    /// `[1, d]`, the only key/value when LR context is withheld.
    pub null_token: Tensor,
    pub blocks: Vec<BlockParams>,
    /// Frozen `[d, d]` map used by the direct LR fill; identity at init.
    pub direct_fill: Tensor,
}

impl PredictorParams {
    pub fn init(config: PredictorConfig, rng: &mut RngStream) -> Self {
        let (g, d, s) = (config.grid, config.dim, config.tokens_side());
        let l = config.lr_side * config.lr_side;
        let mut normal = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| EMBED_INIT_STD * rng.standard_normal()).collect()).expect("shape")
        };
        let mask_embed = normal(vec![d]);
        let e_tile = normal(vec![g, g, d]);
        let e_hr = normal(vec![s, s, d]);
        let e_lr = normal(vec![l, d]);
        let null_token = normal(vec![1, d]);
        let blocks = (0..config.blocks).map(|_| BlockParams::init(&config, rng)).collect();
        Self {
            config,
            mask_embed,
            e_tile,
            e_hr,
            e_lr,
            null_token,
            blocks,
            direct_fill: Tensor::eye(d, d),
        }
    }

    /// Names of [`Self::trainable`] in order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["mask_embed", "e_tile", "e_hr", "e_lr", "null_token"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for b in 0..self.blocks.len() {
            names.extend(BLOCK_TENSORS.iter().map(|n| format!("block{b}.{n}")));
        }
        names
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.mask_embed, &self.e_tile, &self.e_hr, &self.e_lr, &self.null_token];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.mask_embed,
            &mut self.e_tile,
            &mut self.e_hr,
            &mut self.e_lr,
            &mut self.null_token,
        ];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }

    /// Every tensor, trainable first, then the frozen fill map.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.trainable_names().into_iter().zip(self.trainable()).collect();
        out.push(("direct_fill".to_string(), &self.direct_fill));
        out
    }

    pub fn from_named(config: PredictorConfig, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut template = Self::init(config, &mut RngStream::new(0, 0));
        let names: Vec<String> = template.named_tensors().into_iter().map(|(n, _)| n).collect();
        if named.len() != names.len() {
            return Err(CxsError::Checkpoint(format!(
                "predictor expects {} tensors, found {}",
                names.len(),
                named.len()
            )));
        }
        let fill = named.pop().expect("non-empty");
        let mut slots = template.trainable_mut();
        for ((name, t), (slot, expected)) in named.into_iter().zip(slots.iter_mut().zip(&names)) {
            if &name != expected || t.shape() != slot.shape() {
                return Err(CxsError::Checkpoint(format!(
                    "tensor {name} {:?} does not match {expected} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            **slot = t;
        }
        if fill.0 != "direct_fill" || fill.1.shape() != template.direct_fill.shape() {
            return Err(CxsError::Checkpoint(format!("unexpected tensor {}", fill.0)));
        }
        template.direct_fill = fill.1;
        Ok(template)
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// Tape handles for the trainable tensors, in [`PredictorParams::trainable`] order.
struct Bound<'t> {
    mask_embed: Var<'t>,
    e_tile: Var<'t>,
    e_hr: Var<'t>,
    e_lr: Var<'t>,
    null_token: Var<'t>,
    blocks: Vec<[Var<'t>; 12]>,
}

impl<'t> Bound<'t> {
    fn from_vars(vars: &[Var<'t>]) -> Self {
        let blocks = vars[5..]
            .chunks(12)
            .map(|c| <[Var<'t>; 12]>::try_from(c).expect("12 tensors per block"))
            .collect();
        Self {
            mask_embed: vars[0],
            e_tile: vars[1],
            e_hr: vars[2],
            e_lr: vars[3],
            null_token: vars[4],
            blocks,
        }
    }
}

fn check_observed(observed: &[(usize, &Tensor)], cfg: &PredictorConfig) -> Result<()> {
    let tiles = cfg.grid * cfg.grid;
    let mut seen = vec![false; tiles];
    for &(p, tokens) in observed {
        if p >= tiles {
            return Err(CxsError::TileOutOfRange { tile: p, tiles });
        }
        if seen[p] {
            return Err(CxsError::DuplicateTile(p));
        }
        seen[p] = true;
        if tokens.shape() != [2, 2, cfg.dim] {
            return Err(CxsError::Geometry(format!(
                "tile {p} tokens have shape {:?}, expected [2, 2, {}]",
                tokens.shape(),
                cfg.dim
            )));
        }
    }
    Ok(())
}

/// Observed tokens scattered onto the grid (zeros elsewhere) and the
/// `[4G^2, 1]` indicator of unobserved positions.
fn scatter(observed: &[(usize, &Tensor)], cfg: &PredictorConfig) -> Result<(Tensor, Tensor)> {
    check_observed(observed, cfg)?;
    let (g, d, s) = (cfg.grid, cfg.dim, cfg.tokens_side());
    let mut grid = vec![0.0; s * s * d];
    let mut mask = vec![1.0; s * s];
    for &(p, tokens) in observed {
        let (ty, tx) = (p / g, p % g);
        for dy in 0..2 {
            for dx in 0..2 {
                let pos = (2 * ty + dy) * s + 2 * tx + dx;
                mask[pos] = 0.0;
                grid[pos * d..(pos + 1) * d].copy_from_slice(&tokens.data()[(dy * 2 + dx) * d..(dy * 2 + dx + 1) * d]);
            }
        }
    }
    Ok((Tensor::new([s, s, d], grid)?, Tensor::new([s * s, 1], mask)?))
}

fn rasterize_on_tape<'t>(tape: &'t Tape, b: &Bound<'t>, observed: &[(usize, &Tensor)], cfg: &PredictorConfig) -> Result<Var<'t>> {
    let (s, d) = (cfg.tokens_side(), cfg.dim);
    let (grid, mask) = scatter(observed, cfg)?;
    let fill = tape.constant(mask).matmul(b.mask_embed.reshape([1, d])?)?.reshape([s, s, d])?;
    Ok(tape.constant(grid).add(fill)?.add(b.e_tile.upsample2()?)?.add(b.e_hr)?)
}

/// The rasterized grid with mask fill and both positional embeddings.
pub fn rasterize(observed: &[(usize, &Tensor)], params: &PredictorParams) -> Result<Tensor> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.trainable().into_iter().map(|t| tape.constant(t.clone())).collect();
    let b = Bound::from_vars(&vars);
    Ok((*rasterize_on_tape(&tape, &b, observed, &params.config)?.value()).clone())
}

fn layer_norm<'t>(x: Var<'t>, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    Ok(x.standardize(LN_EPS)?.mul(gain)?.add(bias)?)
}

fn forward_on_tape<'t>(
    tape: &'t Tape,
    b: &Bound<'t>,
    observed: &[(usize, &Tensor)],
    lr_tokens: &Tensor,
    cfg: &PredictorConfig,
    with_lr: bool,
) -> Result<Var<'t>> {
    let (g, d) = (cfg.grid, cfg.dim);
    let l = cfg.lr_side * cfg.lr_side;
    if lr_tokens.numel() != l * d {
        return Err(CxsError::Geometry(format!(
            "LR tokens {:?}, expected [{1}, {1}, {d}]",
            lr_tokens.shape(),
            cfg.lr_side
        )));
    }
    let raster = rasterize_on_tape(tape, b, observed, cfg)?;
    let mut x = raster.avg_pool2()?.reshape([g * g, d])?;
    let context = if with_lr {
        tape.constant(lr_tokens.clone().reshape([l, d])?).add(b.e_lr)?
    } else {
        b.null_token
    };
    let scale = 1.0 / (d as f64).sqrt();
    for blk in &b.blocks {
        let [ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b] = *blk;
        let h = layer_norm(x, ln1_g, ln1_b)?;
        let q = h.matmul(wq)?;
        let k = context.matmul(wk)?;
        let v = context.matmul(wv)?;
        let att = q.matmul(k.transpose()?)?.scale(scale)?.softmax()?;
        x = x.add(att.matmul(v)?.matmul(wo)?)?;
        let h2 = layer_norm(x, ln2_g, ln2_b)?;
        let ff = h2.matmul(ff1_w)?.add(ff1_b)?.tanh()?.matmul(ff2_w)?.add(ff2_b)?;
        x = x.add(ff)?;
    }
    Ok(x.reshape([g, g, d])?.upsample2()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletedRepresentation {
    /// `[2G, 2G, d]`.
    pub h_tilde: Tensor,
    /// Mean token.
    pub pooled: Vec<f64>,
    pub observed: Vec<usize>,
}

impl CompletedRepresentation {
    fn new(h_tilde: Tensor, observed: &[(usize, &Tensor)]) -> Self {
        let mut idx: Vec<usize> = observed.iter().map(|(p, _)| *p).collect();
        idx.sort_unstable();
        Self {
            pooled: mean_token(&h_tilde),
            h_tilde,
            observed: idx,
        }
    }
}

pub fn predict(observed: &[(usize, &Tensor)], lr_tokens: &Tensor, params: &PredictorParams) -> Result<CompletedRepresentation> {
    predict_variant(observed, lr_tokens, params, Variant::Full)
}

pub fn predict_variant(
    observed: &[(usize, &Tensor)],
    lr_tokens: &Tensor,
    params: &PredictorParams,
    variant: Variant,
) -> Result<CompletedRepresentation> {
    let cfg = &params.config;
    let (s, d) = (cfg.tokens_side(), cfg.dim);
    let h = match variant {
        Variant::Full | Variant::NoLrContext => {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = params.trainable().into_iter().map(|t| tape.constant(t.clone())).collect();
            let b = Bound::from_vars(&vars);
            let out = forward_on_tape(&tape, &b, observed, lr_tokens, cfg, variant == Variant::Full)?;
            (*out.value()).clone()
        }
        Variant::NoPredictor | Variant::DirectLrFill => {
            let l = cfg.lr_side;
            if lr_tokens.numel() != l * l * d {
                return Err(CxsError::Geometry(format!("LR tokens {:?}", lr_tokens.shape())));
            }
            let (mut grid, mask) = scatter(observed, cfg)?;
            let fill_rows: Vec<Vec<f64>> = if variant == Variant::NoPredictor {
                vec![mean_token(lr_tokens)]
            } else {
                let mapped = lr_tokens.clone().reshape([l * l, d])?.matmul(&params.direct_fill)?;
                (0..l * l).map(|r| mapped.row(r).to_vec()).collect()
            };
            for pos in 0..s * s {
                if mask.data()[pos] == 1.0 {
                    let src = if fill_rows.len() == 1 {
                        0
                    } else {
                        let (y, x) = (pos / s, pos % s);
                        (y * l / s) * l + x * l / s
                    };
                    grid.data_mut()[pos * d..(pos + 1) * d].copy_from_slice(&fill_rows[src]);
                }
            }
            grid
        }
    };
    Ok(CompletedRepresentation::new(h, observed))
}

/// [`loss_rep`] recorded on the prediction's tape.
pub fn loss_rep_on_tape<'t>(h_tilde: Var<'t>, h_star: &Tensor, mu: &[f64]) -> Result<Var<'t>> {
    let tape = h_tilde.tape();
    let d = mu.len();
    if h_tilde.shape() != h_star.shape() || h_star.last_dim() != d {
        return Err(CxsError::Geometry(format!(
            "loss_rep: prediction {:?}, target {:?}, mean of {d}",
            h_tilde.shape(),
            h_star.shape()
        )));
    }
    let n = h_star.numel() / d;
    let mu_v = tape.constant(Tensor::vector(mu.to_vec()));
    let pred = h_tilde.reshape([n, d])?.sub(mu_v)?;
    let target = tape.constant(h_star.clone().reshape([n, d])?).sub(mu_v)?;
    let sim = pred.cosine(target)?.mean_all()?;
    Ok(sim.scale(-1.0)?.add(tape.constant(Tensor::scalar(1.0)))?)
}

/// `1 - mean_j cos(H̃_j - μ, H*_j - μ)`; degenerate tokens count as similarity 0.
pub fn loss_rep(h_tilde: &Tensor, h_star: &Tensor, mu: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    Ok(loss_rep_on_tape(tape.constant(h_tilde.clone()), h_star, mu)?.item())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningMean {
    pub mu: Vec<f64>,
    pub momentum: f64,
}

impl RunningMean {
    pub fn new(dim: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(CxsError::InvalidSpec(format!("momentum {momentum} outside (0, 1)")));
        }
        Ok(Self {
            mu: vec![0.0; dim],
            momentum,
        })
    }

    /// `μ <- m μ + (1 - m) mean_token(batch)`.
    pub fn update(&mut self, target_tokens: &Tensor) {
        let batch = mean_token(target_tokens);
        for (m, b) in self.mu.iter_mut().zip(batch) {
            *m = self.momentum * *m + (1.0 - self.momentum) * b;
        }
    }
}

/// One stage-I training example: the target grid and the LR tokens.
#[derive(Debug, Clone)]
pub struct StageOneSample {
    pub h_star: Tensor,
    pub lr_tokens: Tensor,
    /// `[2, 2, d]` target blocks per tile.
    pub tile_tokens: Vec<Tensor>,
}

impl StageOneSample {
    pub fn new(h_star: Tensor, lr_tokens: Tensor, grid: usize) -> Result<Self> {
        let tile_tokens = crate::encoders::tile_blocks(&h_star, grid)?;
        Ok(Self {
            h_star,
            lr_tokens,
            tile_tokens,
        })
    }

    pub fn observed(&self, tiles: &[usize]) -> Vec<(usize, &Tensor)> {
        tiles.iter().map(|&p| (p, &self.tile_tokens[p])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageOneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct StageOneResult {
    pub params: PredictorParams,
    pub running_mean: RunningMean,
    /// Mean loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Per-epoch [`VarianceRatio`] of predictions to targets.
    pub variance_trace: Vec<f64>,
}

/// Accumulates per-dimension variance over all tokens fed to it, for
/// predictions and targets separately.
#[derive(Debug, Clone)]
pub struct VarianceRatio {
    pred: Moments,
    target: Moments,
}

#[derive(Debug, Clone)]
struct Moments {
    n: f64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self {
            n: 0.0,
            sum: vec![0.0; d],
            sum_sq: vec![0.0; d],
        }
    }

    fn add(&mut self, tokens: &Tensor) {
        let d = self.sum.len();
        for row in tokens.data().chunks(d) {
            self.n += 1.0;
            for ((s, q), v) in self.sum.iter_mut().zip(self.sum_sq.iter_mut()).zip(row) {
                *s += v;
                *q += v * v;
            }
        }
    }

    fn total_variance(&self) -> f64 {
        if self.n == 0.0 {
            return 0.0;
        }
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| (q / self.n - (s / self.n).powi(2)).max(0.0))
            .sum()
    }
}

impl VarianceRatio {
    pub fn new(dim: usize) -> Self {
        Self {
            pred: Moments::new(dim),
            target: Moments::new(dim),
        }
    }

    pub fn add(&mut self, h_tilde: &Tensor, h_star: &Tensor) {
        self.pred.add(h_tilde);
        self.target.add(h_star);
    }

    /// Summed per-dimension variance of predictions over that of targets.
    pub fn ratio(&self) -> f64 {
        let t = self.target.total_variance();
        if t == 0.0 {
            0.0
        } else {
            self.pred.total_variance() / t
        }
    }
}

/// A random budgeted mask: rate `u ~ U(0, 1)`, then one Bernoulli(u) per tile.
pub fn random_budget_mask(tiles: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    let u = rng.uniform01();
    let mut out = Vec::new();
    for p in 0..tiles {
        if rng.bernoulli(u)? {
            out.push(p);
        }
    }
    Ok(out)
}

/// The stage-I objective for one scene at `params` (used by training and
/// by gradient checks).
pub fn stage_one_loss<'t>(
    tape: &'t Tape,
    vars: &[Var<'t>],
    cfg: &PredictorConfig,
    sample: &StageOneSample,
    observed_tiles: &[usize],
    mu: &[f64],
    with_lr: bool,
) -> Result<(Var<'t>, Var<'t>)> {
    let b = Bound::from_vars(vars);
    let observed = sample.observed(observed_tiles);
    let h = forward_on_tape(tape, &b, &observed, &sample.lr_tokens, cfg, with_lr)?;
    Ok((loss_rep_on_tape(h, &sample.h_star, mu)?, h))
}

/// Train with random budgeted masks, one SGD step per scene, scenes in a
/// fresh permutation every epoch. The running mean is updated from each
/// step's target before that step's loss.
pub fn train_stage1(
    samples: &[StageOneSample],
    mut params: PredictorParams,
    config: &StageOneConfig,
    variant: Variant,
    rng: &mut RngStream,
) -> Result<StageOneResult> {
    if samples.is_empty() {
        return Err(CxsError::Empty("stage-I training set"));
    }
    if !variant.is_learned() {
        return Err(CxsError::UnknownVariant(format!("{variant} has no trainable predictor")));
    }
    let cfg = params.config;
    let tiles = cfg.grid * cfg.grid;
    let mut running_mean = RunningMean::new(cfg.dim, config.momentum)?;
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut variance_trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let mut var = VarianceRatio::new(cfg.dim);
        for i in rng.permutation(samples.len()) {
            let sample = &samples[i];
            let observed = random_budget_mask(tiles, rng)?;
            running_mean.update(&sample.h_star);
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = params.trainable().into_iter().map(|t| tape.param(t.clone())).collect();
            let (loss, h) = stage_one_loss(&tape, &vars, &cfg, sample, &observed, &running_mean.mu, variant == Variant::Full)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(CxsError::Untrained(format!("non-finite stage-I loss at epoch {epoch}")));
            }
            total += value;
            var.add(&h.value(), &sample.h_star);
            let grads = tape.backward(loss)?;
            for (t, v) in params.trainable_mut().into_iter().zip(&vars) {
                t.sgd_step(&grads.get_or_zeros(*v), config.learning_rate);
            }
        }
        loss_trace.push(total / samples.len() as f64);
        variance_trace.push(var.ratio());
        log::debug!("stage I epoch {epoch}: loss {:.5}", total / samples.len() as f64);
    }
    Ok(StageOneResult {
        params,
        running_mean,
        loss_trace,
        variance_trace,
    })
}
