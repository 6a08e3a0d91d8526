//! Offline supervision, the LR-only tile scorer and selection policies.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use numkernel::{RngStream, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::{check_magic, read_f32s, read_u32, read_u64, write_f32s};
use crate::encoders::{tile_blocks, OracleEncoders};
use crate::error::{CxsError, Result};
use crate::metrics::obr;
use crate::scene::SceneSpec;

pub const SUPERVISION_MAGIC: [u8; 4] = *b"CXSG";
pub const SUPERVISION_VERSION: u32 = 1;
/// Threshold used when none is configured.
pub const DEFAULT_THRESHOLD: f64 = 0.55;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    Multiplicative,
    Additive,
    StructuralOnly,
    SemanticOnly,
}

impl SupervisionMode {
    pub const ALL: [SupervisionMode; 4] = [
        SupervisionMode::Multiplicative,
        SupervisionMode::StructuralOnly,
        SupervisionMode::SemanticOnly,
        SupervisionMode::Additive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SupervisionMode::Multiplicative => "multiplicative",
            SupervisionMode::Additive => "additive",
            SupervisionMode::StructuralOnly => "structural",
            SupervisionMode::SemanticOnly => "semantic",
        }
    }
}

impl fmt::Display for SupervisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SupervisionMode {
    type Err = CxsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiplicative" => Ok(Self::Multiplicative),
            "additive" => Ok(Self::Additive),
            "structural" | "structural_only" => Ok(Self::StructuralOnly),
            "semantic" | "semantic_only" => Ok(Self::SemanticOnly),
            _ => Err(CxsError::InvalidSpec(format!("unknown supervision mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionMap {
    pub s_vis: Vec<f64>,
    pub s_gain: Vec<f64>,
    pub g_star: Vec<f64>,
    pub mode: SupervisionMode,
}

/// Min-max scaling to `[0, 1]`; a constant input maps to zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Per-tile standard deviation of the tile's 2x2xd token block, min-max
/// normalised across tiles.
pub fn structural_saliency(h_star: &Tensor, grid: usize) -> Result<Vec<f64>> {
    let raw: Vec<f64> = tile_blocks(h_star, grid)?
        .iter()
        .map(|b| {
            let n = b.numel() as f64;
            let mean = b.data().iter().sum::<f64>() / n;
            (b.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();
    Ok(min_max(&raw))
}

/// `max(0, s_h - λ s_g)` for one concept.
pub fn concept_gain(s_hr: f64, s_lr: f64, lambda: f64) -> f64 {
    (s_hr - lambda * s_lr).max(0.0)
}

/// Per-tile gain: the largest concept gain over the scene's labels.
pub fn semantic_gain(tile_tokens: &[Tensor], lr_tokens: &Tensor, labels: u64, enc: &OracleEncoders, lambda: f64) -> Result<Vec<f64>> {
    let concepts: Vec<usize> = (0..64).filter(|c| labels >> c & 1 == 1).collect();
    let lr_sim: Vec<f64> = concepts
        .iter()
        .map(|&c| enc.shared_space_similarity(lr_tokens, c))
        .collect::<Result<_>>()?;
    tile_tokens
        .iter()
        .map(|t| {
            concepts.iter().zip(&lr_sim).try_fold(0.0f64, |best, (&c, &s_g)| {
                Ok(best.max(concept_gain(enc.shared_space_similarity(t, c)?, s_g, lambda)))
            })
        })
        .collect()
}

pub fn build_supervision(s_vis: &[f64], s_gain: &[f64], mode: SupervisionMode) -> Result<SupervisionMap> {
    if s_vis.len() != s_gain.len() {
        return Err(CxsError::LengthMismatch(format!(
            "s_vis has {} tiles, s_gain has {}",
            s_vis.len(),
            s_gain.len()
        )));
    }
    let raw: Vec<f64> = match mode {
        SupervisionMode::Multiplicative => s_vis.iter().zip(s_gain).map(|(a, b)| a * b).collect(),
        SupervisionMode::Additive => {
            let (a, b) = (min_max(s_vis), min_max(s_gain));
            a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()
        }
        SupervisionMode::StructuralOnly => s_vis.to_vec(),
        SupervisionMode::SemanticOnly => s_gain.to_vec(),
    };
    let max = raw.iter().copied().fold(0.0, f64::max);
    let g_star = if max > 0.0 { raw.iter().map(|v| v / max).collect() } else { raw };
    Ok(SupervisionMap {
        s_vis: s_vis.to_vec(),
        s_gain: s_gain.to_vec(),
        g_star,
        mode,
    })
}

/// Supervision for one scene from its target grid, LR tokens and labels.
pub fn supervise(h_star: &Tensor, lr_tokens: &Tensor, labels: u64, grid: usize, enc: &OracleEncoders, lambda: f64, mode: SupervisionMode) -> Result<SupervisionMap> {
    let s_vis = structural_saliency(h_star, grid)?;
    let s_gain = semantic_gain(&tile_blocks(h_star, grid)?, lr_tokens, labels, enc, lambda)?;
    build_supervision(&s_vis, &s_gain, mode)
}

pub fn write_supervision_to<W: Write>(w: &mut W, tiles: usize, maps: &[SupervisionMap]) -> Result<()> {
    w.write_all(&SUPERVISION_MAGIC)?;
    w.write_all(&SUPERVISION_VERSION.to_le_bytes())?;
    w.write_all(&(tiles as u32).to_le_bytes())?;
    w.write_all(&(maps.len() as u64).to_le_bytes())?;
    for m in maps {
        if m.g_star.len() != tiles || m.s_vis.len() != tiles || m.s_gain.len() != tiles {
            return Err(CxsError::LengthMismatch(format!("supervision map is not {tiles} tiles long")));
        }
        write_f32s(w, &m.s_vis)?;
        write_f32s(w, &m.s_gain)?;
        write_f32s(w, &m.g_star)?;
    }
    Ok(())
}

pub fn read_supervision_from<R: Read>(r: &mut R, mode: SupervisionMode) -> Result<(usize, Vec<SupervisionMap>)> {
    check_magic(r, SUPERVISION_MAGIC)?;
    let version = read_u32(r, "version")?;
    if version != SUPERVISION_VERSION {
        return Err(CxsError::VersionMismatch {
            expected: SUPERVISION_VERSION,
            found: version,
        });
    }
    let tiles = read_u32(r, "tile count")? as usize;
    let count = read_u64(r, "map count")?;
    let mut maps = Vec::new();
    for _ in 0..count {
        maps.push(SupervisionMap {
            s_vis: read_f32s(r, tiles, "s_vis")?,
            s_gain: read_f32s(r, tiles, "s_gain")?,
            g_star: read_f32s(r, tiles, "g_star")?,
            mode,
        });
    }
    Ok((tiles, maps))
}

const HIDDEN: usize = 8;

/// 3x3 conv (1 -> 8) + tanh, then a conv whose stride and kernel equal the
/// LR footprint of a tile (8 -> 1) + sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerParams {
    /// `[9, 8]`.
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    /// `[k * k * 8, 1]` with `k` LR pixels per tile side.
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
}

impl SamplerParams {
    pub fn init(spec: &SceneSpec, rng: &mut RngStream) -> Self {
        let k = spec.lr_px_per_tile();
        let mut normal = |n: usize, std: f64| (0..n).map(|_| std * rng.standard_normal()).collect::<Vec<_>>();
        Self {
            conv1_w: Tensor::new([9, HIDDEN], normal(9 * HIDDEN, (1.0f64 / 9.0).sqrt())).expect("shape"),
            conv1_b: Tensor::zeros([HIDDEN]),
            conv2_w: Tensor::new([k * k * HIDDEN, 1], normal(k * k * HIDDEN, (1.0 / (k * k * HIDDEN) as f64).sqrt()))
                .expect("shape"),
            conv2_b: Tensor::zeros([1]),
        }
    }

    pub fn zeros(spec: &SceneSpec) -> Self {
        let k = spec.lr_px_per_tile();
        Self {
            conv1_w: Tensor::zeros([9, HIDDEN]),
            conv1_b: Tensor::zeros([HIDDEN]),
            conv2_w: Tensor::zeros([k * k * HIDDEN, 1]),
            conv2_b: Tensor::zeros([1]),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("conv1_w", &self.conv1_w),
            ("conv1_b", &self.conv1_b),
            ("conv2_w", &self.conv2_w),
            ("conv2_b", &self.conv2_b),
        ]
    }

    /// Rebuild from checkpoint tensors, which must match `spec`'s geometry.
    pub fn from_named(spec: &SceneSpec, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = Self::zeros(spec);
        if named.len() != 4 {
            return Err(CxsError::Checkpoint(format!("sampler expects 4 tensors, found {}", named.len())));
        }
        let names = params.tensors().map(|(n, _)| n);
        for ((name, t), (slot, expected)) in named.into_iter().zip(params.tensors_mut().into_iter().zip(names)) {
            if name != expected {
                return Err(CxsError::Checkpoint(format!("unexpected tensor {name}, expected {expected}")));
            }
            if t.shape() != slot.shape() {
                return Err(CxsError::Geometry(format!("sampler tensor {name} {:?}, configured {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.conv1_w, &mut self.conv1_b, &mut self.conv2_w, &mut self.conv2_b]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    fn grid_and_stride(&self) -> Result<usize> {
        let k2 = self.conv2_w.shape()[0] / HIDDEN;
        let k = (k2 as f64).sqrt().round() as usize;
        if k * k * HIDDEN != self.conv2_w.shape()[0] {
            return Err(CxsError::Geometry(format!("sampler conv2 shape {:?}", self.conv2_w.shape())));
        }
        Ok(k)
    }
}

/// 3x3 zero-padded patches of a `[1, S, S]` image, one row per pixel,
/// ordered by (tile row, tile col, row in tile, col in tile).
fn im2col(lr: &Tensor, k: usize) -> Result<Tensor> {
    let s = match *lr.shape() {
        [1, h, w] if h == w && h % k == 0 => h,
        _ => return Err(CxsError::Geometry(format!("sampler input {:?} with stride {k}", lr.shape()))),
    };
    let g = s / k;
    let d = lr.data();
    let mut rows = Vec::with_capacity(s * s * 9);
    for ty in 0..g {
        for tx in 0..g {
            for dy in 0..k {
                for dx in 0..k {
                    let (y, x) = ((ty * k + dy) as isize, (tx * k + dx) as isize);
                    for oy in -1..=1 {
                        for ox in -1..=1 {
                            let (yy, xx) = (y + oy, x + ox);
                            let inside = yy >= 0 && xx >= 0 && yy < s as isize && xx < s as isize;
                            rows.push(if inside { d[yy as usize * s + xx as usize] } else { 0.0 });
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new([s * s, 9], rows)?)
}

fn forward_on_tape<'t>(tape: &'t Tape, cols: Tensor, p: [Var<'t>; 4], tiles: usize) -> Result<Var<'t>> {
    let [w1, b1, w2, b2] = p;
    let hidden = tape.constant(cols).matmul(w1)?.add(b1)?.tanh()?;
    let per_tile = hidden.reshape([tiles, w2.shape()[0]])?;
    Ok(per_tile.matmul(w2)?.add(b2)?.sigmoid()?.reshape([tiles])?)
}

/// Per-tile scores in `(0, 1)`, row-major over the tile grid.
pub fn sampler_forward(lr: &Tensor, params: &SamplerParams) -> Result<Vec<f64>> {
    let k = params.grid_and_stride()?;
    let cols = im2col(lr, k)?;
    let tiles = cols.shape()[0] / (k * k);
    let tape = Tape::new();
    let vars = [
        tape.constant(params.conv1_w.clone()),
        tape.constant(params.conv1_b.clone()),
        tape.constant(params.conv2_w.clone()),
        tape.constant(params.conv2_b.clone()),
    ];
    Ok(forward_on_tape(&tape, cols, vars, tiles)?.value().data().to_vec())
}

#[derive(Debug, Clone)]
pub struct SamplerTraining {
    pub params: SamplerParams,
    /// Loss of every step, in order.
    pub loss_trace: Vec<f64>,
}

/// Plain SGD on per-scene MSE against `g_star`, visiting scenes in a fresh
/// permutation each epoch.
pub fn train_sampler(
    spec: &SceneSpec,
    samples: &[(Tensor, Vec<f64>)],
    epochs: usize,
    lr: f64,
    rng: &mut RngStream,
) -> Result<SamplerTraining> {
    if samples.is_empty() {
        return Err(CxsError::Empty("sampler training set"));
    }
    let mut params = SamplerParams::init(spec, rng);
    let k = spec.lr_px_per_tile();
    let cols: Vec<Tensor> = samples.iter().map(|(img, _)| im2col(img, k)).collect::<Result<_>>()?;
    let mut loss_trace = Vec::with_capacity(epochs * samples.len());
    for _ in 0..epochs {
        for i in rng.permutation(samples.len()) {
            let target = &samples[i].1;
            if target.len() != spec.tiles() {
                return Err(CxsError::LengthMismatch(format!("target has {} tiles", target.len())));
            }
            let tape = Tape::new();
            let vars = [
                tape.param(params.conv1_w.clone()),
                tape.param(params.conv1_b.clone()),
                tape.param(params.conv2_w.clone()),
                tape.param(params.conv2_b.clone()),
            ];
            let pred = forward_on_tape(&tape, cols[i].clone(), vars, spec.tiles())?;
            let diff = pred.sub(tape.constant(Tensor::vector(target.clone())))?;
            let loss = diff.mul(diff)?.mean_all()?;
            loss_trace.push(loss.item());
            let grads = tape.backward(loss)?;
            for (t, v) in params.tensors_mut().into_iter().zip(vars) {
                t.sgd_step(&grads.get_or_zeros(v), lr);
            }
        }
    }
    Ok(SamplerTraining { params, loss_trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionPolicy {
    Threshold { tau: f64 },
    TopB { budget: usize },
    /// Independent Bernoulli per tile from stream `(seed, scene_id)`.
    Random { rate: f64, seed: u64 },
    OracleGStar { tau: f64 },
    /// Observe nothing.
    Nothing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub scene_id: u64,
    /// Sorted, unique tile indices.
    pub selected: Vec<usize>,
    pub policy: SelectionPolicy,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CxsError::InvalidThreshold(tau));
    }
    Ok(())
}

/// Apply `policy` to one scene. `g_star` is consulted only by the oracle.
pub fn select(scores: &[f64], g_star: Option<&[f64]>, policy: &SelectionPolicy, scene_id: u64) -> Result<ObservationSet> {
    let tiles = scores.len();
    let selected: Vec<usize> = match *policy {
        SelectionPolicy::Threshold { tau } => {
            check_tau(tau)?;
            (0..tiles).filter(|&p| scores[p] >= tau).collect()
        }
        SelectionPolicy::OracleGStar { tau } => {
            check_tau(tau)?;
            let g = g_star.ok_or_else(|| CxsError::LengthMismatch("oracle policy needs g_star".into()))?;
            if g.len() != tiles {
                return Err(CxsError::LengthMismatch(format!("g_star has {} tiles, scores {tiles}", g.len())));
            }
            (0..tiles).filter(|&p| g[p] >= tau).collect()
        }
        SelectionPolicy::TopB { budget } => {
            if budget > tiles {
                return Err(CxsError::InvalidBudget { budget, tiles });
            }
            let mut top = crate::metrics::rank_descending(scores);
            top.truncate(budget);
            top.sort_unstable();
            top
        }
        SelectionPolicy::Random { rate, seed } => {
            let mut rng = RngStream::new(seed, scene_id);
            let mut out = Vec::new();
            for p in 0..tiles {
                if rng.bernoulli(rate)? {
                    out.push(p);
                }
            }
            out
        }
        SelectionPolicy::Nothing => Vec::new(),
    };
    Ok(ObservationSet {
        scene_id,
        selected,
        policy: policy.clone(),
    })
}

/// The smallest candidate threshold (observed scores plus 0 and 1) whose
/// mean OBR over `score_sets` is at most `target_obr`.
pub fn calibrate_threshold(score_sets: &[Vec<f64>], target_obr: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target_obr) {
        return Err(CxsError::InvalidTarget(target_obr));
    }
    if score_sets.is_empty() {
        return Err(CxsError::Empty("calibration set"));
    }
    let mut candidates: Vec<f64> = score_sets.iter().flatten().copied().filter(|s| (0.0..=1.0).contains(s)).collect();
    candidates.extend([0.0, 1.0]);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    // mean OBR is nonincreasing in tau, so binary search the first feasible cut
    let realized = |tau: f64| {
        let counts: Vec<usize> = score_sets.iter().map(|s| s.iter().filter(|&&v| v >= tau).count()).collect();
        let per_scene: Vec<f64> = counts.iter().zip(score_sets).map(|(&n, s)| obr(&[n], s.len().max(1)).1).collect();
        per_scene.iter().sum::<f64>() / per_scene.len() as f64
    };
    let first = candidates.partition_point(|&tau| realized(tau) > target_obr);
    Ok(candidates.get(first).copied().unwrap_or(1.0))
}
