//! The end-to-end observation pipeline and its evaluation: encoded scene
//! caches, select → complete → align, budget reports, threshold sweeps,
//! the ablation grid and the masked-tile retrieval diagnostic.
//!
//! Per-scene work runs on the rayon pool and is collected in scene order,
//! so results do not depend on the worker count.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use numkernel::{RngStream, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{train_stage2, zero_shot_classify, AlignHead};
use crate::config::RunConfig;
use crate::encoders::{cosine, mean_token, OracleEncoders};
use crate::error::{CxsError, Result};
use crate::metrics::{obr, rank_descending, recognition_metrics, retrieval_map};
use crate::predictor::{
    predict_variant, random_budget_mask, train_stage1, CompletedRepresentation, PredictorParams, StageOneSample,
    Variant, VarianceRatio,
};
use crate::sampler::{
    calibrate_threshold, sampler_forward, select, supervise, train_sampler, ObservationSet, SamplerParams,
    SelectionPolicy, SupervisionMap, SupervisionMode,
};
use crate::scene::{downsample_lr, generate_scenes, tessellate, ConceptAppearance, Scene, SceneSpec};

/// Default threshold grid of the budget sweep.
pub const SWEEP_GRID: [f64; 8] = [0.00, 0.10, 0.25, 0.45, 0.55, 0.65, 0.85, 1.00];
pub const SWEEP_HEADER: &str = "threshold,mean_obr,map100,map20,top1,mlmap,wall_ms";
pub const ABLATION_HEADER: &str = "sampler,predictor,supervision,seed,map100,map20,mean_obr,wall_ms";
/// Largest tolerated gap between the learned and random mean OBR.
pub const BUDGET_MATCH_TOLERANCE: f64 = 0.01;

const STREAM_SAMPLER: u64 = 0x5A;
const STREAM_STAGE1: u64 = 0x51;
const STREAM_STAGE2: u64 = 0x52;
const STREAM_HEAD_INIT: u64 = 0x53;
const STREAM_PREDICTOR_INIT: u64 = 0x54;
const STREAM_VARIANCE: u64 = 0x56;
const STREAM_RANDOM_POLICY: u64 = 0x57;

/// A scene with everything the pipeline reads from it precomputed.
#[derive(Debug, Clone)]
pub struct EncodedScene {
    pub scene_id: u64,
    pub labels: u64,
    /// `[1, lr, lr]`.
    pub lr_image: Tensor,
    /// Target grid, LR tokens and per-tile target blocks.
    pub sample: StageOneSample,
}

pub fn encode_scenes(scenes: &[Scene], spec: &SceneSpec, enc: &OracleEncoders) -> Result<Vec<EncodedScene>> {
    scenes
        .par_iter()
        .map(|s| {
            let lr_image = downsample_lr(&s.hr_mosaic, spec.grid)?;
            let h_star = enc.encode_target(&s.hr_mosaic)?;
            let lr_tokens = enc.encode_lr(&lr_image)?;
            Ok(EncodedScene {
                scene_id: s.scene_id,
                labels: s.labels,
                lr_image,
                sample: StageOneSample::new(h_star, lr_tokens, spec.grid)?,
            })
        })
        .collect()
}

pub fn supervision_maps(
    scenes: &[EncodedScene],
    spec: &SceneSpec,
    enc: &OracleEncoders,
    lambda: f64,
    mode: SupervisionMode,
) -> Result<Vec<SupervisionMap>> {
    scenes
        .par_iter()
        .map(|s| supervise(&s.sample.h_star, &s.sample.lr_tokens, s.labels, spec.grid, enc, lambda, mode))
        .collect()
}

pub fn score_scenes(scenes: &[EncodedScene], params: &SamplerParams) -> Result<Vec<Vec<f64>>> {
    scenes.par_iter().map(|s| sampler_forward(&s.lr_image, params)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Learned,
    Random,
    None,
    Oracle,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Learned => "learned",
            SamplerKind::Random => "random",
            SamplerKind::None => "none",
            SamplerKind::Oracle => "oracle",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = CxsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "random" => Ok(Self::Random),
            "none" => Ok(Self::None),
            "oracle" => Ok(Self::Oracle),
            _ => Err(CxsError::Config(format!("unknown sampler {s:?}"))),
        }
    }
}

/// Frozen components of one observation pipeline.
#[derive(Debug, Clone)]
pub struct Pipeline {
    /// Required by threshold and top-B policies.
    pub sampler: Option<SamplerParams>,
    pub policy: SelectionPolicy,
    /// Also supplies the geometry of the untrained variants.
    pub predictor: PredictorParams,
    pub variant: Variant,
    pub head: Option<AlignHead>,
}

impl Pipeline {
    pub fn with_policy(&self, policy: SelectionPolicy) -> Self {
        Self { policy, ..self.clone() }
    }

    /// Observation sets for `scenes`; `g_star` is read only by the oracle.
    pub fn observe(&self, scenes: &[EncodedScene], g_star: Option<&[Vec<f64>]>) -> Result<Vec<ObservationSet>> {
        let tiles = self.predictor.config.grid * self.predictor.config.grid;
        let needs_scores = matches!(self.policy, SelectionPolicy::Threshold { .. } | SelectionPolicy::TopB { .. });
        if matches!(self.policy, SelectionPolicy::OracleGStar { .. }) && g_star.is_none_or(|g| g.len() != scenes.len()) {
            return Err(CxsError::Untrained("the oracle policy needs a supervision map per scene".into()));
        }
        scenes
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let scores = if needs_scores {
                    let params = self
                        .sampler
                        .as_ref()
                        .ok_or_else(|| CxsError::Untrained("score-based policy without a sampler".into()))?;
                    sampler_forward(&s.lr_image, params)?
                } else {
                    vec![0.0; tiles]
                };
                select(&scores, g_star.map(|g| g[i].as_slice()), &self.policy, s.scene_id)
            })
            .collect()
    }

    pub fn complete_one(&self, scene: &EncodedScene, set: &ObservationSet) -> Result<CompletedRepresentation> {
        predict_variant(&scene.sample.observed(&set.selected), &scene.sample.lr_tokens, &self.predictor, self.variant)
    }

    /// Pooled completed representation of every scene.
    pub fn pooled(&self, scenes: &[EncodedScene], sets: &[ObservationSet]) -> Result<Vec<Vec<f64>>> {
        if sets.len() != scenes.len() {
            return Err(CxsError::LengthMismatch(format!("{} observation sets for {} scenes", sets.len(), scenes.len())));
        }
        scenes
            .par_iter()
            .zip(sets)
            .map(|(s, set)| Ok(self.complete_one(s, set)?.pooled))
            .collect()
    }

    /// Unit vectors in the concept space.
    pub fn embed(&self, pooled: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| CxsError::Untrained("no alignment head".into()))?;
        pooled.par_iter().map(|p| head.project_to_shared(p)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub realized_obr_mean: f64,
    pub realized_obr_per_scene: Vec<f64>,
    pub mocr: f64,
    pub map_at_100: f64,
    pub map_at_20: f64,
    pub top1_acc: f64,
    pub multilabel_map: f64,
    pub wall_ms_total: u64,
    pub config_digest: String,
}

/// Run the pipeline over `scenes` and score it. Wall time covers
/// selection, completion and scoring, and is reported only when `timing`.
pub fn evaluate(
    pipeline: &Pipeline,
    scenes: &[EncodedScene],
    g_star: Option<&[Vec<f64>]>,
    enc: &OracleEncoders,
    timing: bool,
    config_digest: &str,
) -> Result<BudgetReport> {
    if scenes.is_empty() {
        return Err(CxsError::Empty("evaluation set"));
    }
    let start = Instant::now();
    let sets = pipeline.observe(scenes, g_star)?;
    let pooled = pipeline.pooled(scenes, &sets)?;
    let unit = pipeline.embed(&pooled)?;
    let labels: Vec<u64> = scenes.iter().map(|s| s.labels).collect();
    let table: Vec<Vec<f64>> = (0..enc.concepts()).map(|c| enc.concept_table.row(c).to_vec()).collect();
    let map_at_100 = retrieval_map(&unit, &labels, &table, 100)?;
    let map_at_20 = retrieval_map(&unit, &labels, &table, 20)?;
    let rankings: Vec<Vec<usize>> = unit
        .iter()
        .map(|u| zero_shot_classify(u, enc).into_iter().map(|(c, _)| c).collect())
        .collect();
    let recognition = recognition_metrics(&rankings, &labels)?;
    let elapsed = start.elapsed().as_millis() as u64;
    let tiles = pipeline.predictor.config.grid * pipeline.predictor.config.grid;
    let counts: Vec<usize> = sets.iter().map(|s| s.selected.len()).collect();
    let (per_scene, mean) = obr(&counts, tiles);
    Ok(BudgetReport {
        realized_obr_mean: mean,
        // equal-area tiles, free LR: the cost ratio is the budget ratio
        mocr: mean,
        realized_obr_per_scene: per_scene,
        map_at_100,
        map_at_20,
        top1_acc: recognition.top1,
        multilabel_map: recognition.multilabel_map,
        wall_ms_total: if timing { elapsed } else { 0 },
        config_digest: config_digest.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub report: BudgetReport,
}

/// One report per threshold, in the given order.
pub fn budget_sweep(
    pipeline: &Pipeline,
    scenes: &[EncodedScene],
    enc: &OracleEncoders,
    thresholds: &[f64],
    timing: bool,
    config_digest: &str,
) -> Result<Vec<SweepRow>> {
    if pipeline.sampler.is_none() || pipeline.head.is_none() {
        return Err(CxsError::Untrained("the sweep needs a trained sampler and head".into()));
    }
    thresholds
        .iter()
        .map(|&tau| {
            let report = evaluate(&pipeline.with_policy(SelectionPolicy::Threshold { tau }), scenes, None, enc, timing, config_digest)?;
            Ok(SweepRow { threshold: tau, report })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let m = &r.report;
        out.push_str(&format!(
            "{:.2},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.threshold, m.realized_obr_mean, m.map_at_100, m.map_at_20, m.top1_acc, m.multilabel_map, m.wall_ms_total
        ));
    }
    out
}

/// Train the head on the pipeline's own outputs for `scenes`: whitening is
/// fitted on their pooled vectors, then the pairwise sigmoid objective.
pub fn train_head(
    pipeline: &Pipeline,
    scenes: &[EncodedScene],
    g_star: Option<&[Vec<f64>]>,
    enc: &OracleEncoders,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(AlignHead, Vec<f64>)> {
    train_head_on(&[pipeline], scenes, g_star, enc, cfg, seed)
}

/// One head fitted to the pooled outputs of several pipelines over the same
/// scenes, each scene appearing once per pipeline.
pub fn train_head_on(
    pipelines: &[&Pipeline],
    scenes: &[EncodedScene],
    g_star: Option<&[Vec<f64>]>,
    enc: &OracleEncoders,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(AlignHead, Vec<f64>)> {
    let mut pooled = Vec::with_capacity(pipelines.len() * scenes.len());
    let mut labels = Vec::with_capacity(pooled.capacity());
    for pipeline in pipelines {
        let sets = pipeline.observe(scenes, g_star)?;
        pooled.extend(pipeline.pooled(scenes, &sets)?);
        labels.extend(scenes.iter().map(|s| s.labels));
    }
    let mut head = AlignHead::init(cfg.dim, cfg.text_dim, &mut RngStream::new(seed, STREAM_HEAD_INIT));
    head.fit_whitening(&pooled)?;
    let trained = train_stage2(&pooled, &labels, enc, head, &cfg.stage_two(), &mut RngStream::new(seed, STREAM_STAGE2))?;
    Ok((trained.head, trained.loss_trace))
}

pub fn train_sampler_for(
    scenes: &[EncodedScene],
    maps: &[SupervisionMap],
    cfg: &RunConfig,
    seed: u64,
) -> Result<(SamplerParams, Vec<f64>)> {
    if maps.len() != scenes.len() {
        return Err(CxsError::LengthMismatch(format!("{} supervision maps for {} scenes", maps.len(), scenes.len())));
    }
    let samples: Vec<(Tensor, Vec<f64>)> = scenes.iter().zip(maps).map(|(s, m)| (s.lr_image.clone(), m.g_star.clone())).collect();
    let trained = train_sampler(&cfg.scene, &samples, cfg.sampler_epochs, cfg.sampler_lr, &mut RngStream::new(seed, STREAM_SAMPLER))?;
    Ok((trained.params, trained.loss_trace))
}

/// Fresh predictor weights for `seed`; untrained variants use these only
/// for their geometry.
pub fn init_predictor(cfg: &RunConfig, seed: u64) -> PredictorParams {
    PredictorParams::init(cfg.predictor_config(), &mut RngStream::new(seed, STREAM_PREDICTOR_INIT))
}

#[derive(Debug, Clone)]
pub struct PredictorTraining {
    pub params: PredictorParams,
    pub loss_trace: Vec<f64>,
    pub variance_trace: Vec<f64>,
}

pub fn train_predictor_for(scenes: &[EncodedScene], cfg: &RunConfig, variant: Variant, seed: u64) -> Result<PredictorTraining> {
    let samples: Vec<StageOneSample> = scenes.iter().map(|s| s.sample.clone()).collect();
    let out = train_stage1(&samples, init_predictor(cfg, seed), &cfg.stage_one(), variant, &mut RngStream::new(seed, STREAM_STAGE1))?;
    Ok(PredictorTraining {
        params: out.params,
        loss_trace: out.loss_trace,
        variance_trace: out.variance_trace,
    })
}

/// Prediction-to-target variance ratio over `scenes` under random budgeted
/// masks drawn from `seed`.
pub fn held_out_variance_ratio(scenes: &[EncodedScene], params: &PredictorParams, variant: Variant, seed: u64) -> Result<f64> {
    let tiles = params.config.grid * params.config.grid;
    let grids: Vec<Tensor> = scenes
        .par_iter()
        .map(|s| {
            let mask = random_budget_mask(tiles, &mut RngStream::new(seed ^ STREAM_VARIANCE, s.scene_id))?;
            Ok(predict_variant(&s.sample.observed(&mask), &s.sample.lr_tokens, params, variant)?.h_tilde)
        })
        .collect::<Result<_>>()?;
    let mut ratio = VarianceRatio::new(params.config.dim);
    for (h, s) in grids.iter().zip(scenes) {
        ratio.add(h, &s.sample.h_star);
    }
    Ok(ratio.ratio())
}

/// Rank `gallery` (mean-pooled tile features) against the completed
/// features of unobserved tile `tile`; returns up to `top_n` `(index, score)`.
pub fn tile_completion_retrieval(
    query: &EncodedScene,
    set: &ObservationSet,
    tile: usize,
    pipeline: &Pipeline,
    gallery: &[Vec<f64>],
    top_n: usize,
) -> Result<Vec<(usize, f64)>> {
    let grid = pipeline.predictor.config.grid;
    if tile >= grid * grid {
        return Err(CxsError::TileOutOfRange { tile, tiles: grid * grid });
    }
    if set.selected.contains(&tile) {
        return Err(CxsError::ObservedTile(tile));
    }
    let completed = pipeline.complete_one(query, set)?;
    let block = &crate::encoders::tile_blocks(&completed.h_tilde, grid)?[tile];
    rank_gallery(&mean_token(block), gallery, top_n)
}

/// Cosine ranking of `gallery` against `feature`, both taken relative to the
/// gallery mean: the frame in which the predictor's centered objective
/// aligns directions.
pub fn rank_gallery(feature: &[f64], gallery: &[Vec<f64>], top_n: usize) -> Result<Vec<(usize, f64)>> {
    if gallery.is_empty() {
        return Err(CxsError::Empty("gallery"));
    }
    let d = gallery[0].len();
    if feature.len() != d || gallery.iter().any(|g| g.len() != d) {
        return Err(CxsError::LengthMismatch(format!("gallery features must all have {} dims", feature.len())));
    }
    let mut center = vec![0.0; d];
    for g in gallery {
        center.iter_mut().zip(g).for_each(|(c, v)| *c += v / gallery.len() as f64);
    }
    let centered = |v: &[f64]| -> Vec<f64> { v.iter().zip(&center).map(|(a, c)| a - c).collect() };
    let query = centered(feature);
    let scores: Vec<f64> = gallery.iter().map(|g| cosine(&query, &centered(g))).collect();
    let mut ranked = rank_descending(&scores);
    ranked.truncate(top_n);
    Ok(ranked.into_iter().map(|i| (i, scores[i])).collect())
}

/// Gallery entry: mean-pooled target features of one textured training
/// tile and the concept its pixels show.
#[derive(Debug, Clone)]
pub struct GalleryTile {
    pub scene: usize,
    pub tile: usize,
    pub concept: usize,
    pub feature: Vec<f64>,
}

/// Textured tiles only; untextured background carries no concept to match.
pub fn build_gallery(scenes: &[Scene], encoded: &[EncodedScene], spec: &SceneSpec, appearance: &ConceptAppearance) -> Result<Vec<GalleryTile>> {
    let per_scene: Vec<Vec<GalleryTile>> = scenes
        .par_iter()
        .zip(encoded)
        .enumerate()
        .map(|(i, (s, e))| {
            let tiles = tessellate(&s.hr_mosaic, spec.grid)?;
            Ok(tiles
                .iter()
                .zip(&e.sample.tile_tokens)
                .enumerate()
                .filter_map(|(p, (px, tok))| {
                    appearance.classify_tile(px).map(|c| GalleryTile {
                        scene: i,
                        tile: p,
                        concept: c,
                        feature: mean_token(tok),
                    })
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

/// How many of the queries place a gallery tile of the query tile's
/// concept among the first `top_n`. Each query tile is masked out of its
/// scene's observation set before completion.
pub fn diagnostic_hits(
    queries: &[(usize, usize, usize)],
    scenes: &[EncodedScene],
    sets: &[ObservationSet],
    pipeline: &Pipeline,
    gallery: &[GalleryTile],
    top_n: usize,
) -> Result<usize> {
    let features: Vec<Vec<f64>> = gallery.iter().map(|g| g.feature.clone()).collect();
    let hits: Vec<bool> = queries
        .par_iter()
        .map(|&(scene, tile, concept)| {
            let mut set = sets[scene].clone();
            set.selected.retain(|&p| p != tile);
            let ranked = tile_completion_retrieval(&scenes[scene], &set, tile, pipeline, &features, top_n)?;
            Ok(ranked.iter().any(|&(g, _)| gallery[g].concept == concept))
        })
        .collect::<Result<_>>()?;
    Ok(hits.into_iter().filter(|&h| h).count())
}

/// Up to `limit` `(scene, tile, concept)` queries over the object tiles of
/// `scenes`, in scene then tile order.
pub fn diagnostic_queries(
    scenes: &[Scene],
    spec: &SceneSpec,
    appearance: &ConceptAppearance,
    limit: usize,
) -> Result<Vec<(usize, usize, usize)>> {
    let mut out = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        for (p, px) in tessellate(&s.hr_mosaic, spec.grid)?.iter().enumerate() {
            if out.len() == limit {
                return Ok(out);
            }
            if let Some(c) = appearance.classify_tile(px) {
                out.push((i, p, c));
            }
        }
    }
    Ok(out)
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub sampler: SamplerKind,
    pub variant: Variant,
    /// Supervision of the learned sampler; `None` for other samplers.
    pub supervision: Option<SupervisionMode>,
}

impl Cell {
    pub const fn new(sampler: SamplerKind, variant: Variant, supervision: Option<SupervisionMode>) -> Self {
        Self { sampler, variant, supervision }
    }

    pub fn supervision_name(&self) -> &'static str {
        self.supervision.map_or("none", SupervisionMode::name)
    }
}

/// LR only: no HR observation, no completion.
pub const LR_ONLY: Cell = Cell::new(SamplerKind::None, Variant::NoPredictor, None);
pub const SAMPLER_ONLY: Cell = Cell::new(SamplerKind::Learned, Variant::NoPredictor, Some(SupervisionMode::Multiplicative));
pub const RANDOM_PREDICTOR: Cell = Cell::new(SamplerKind::Random, Variant::Full, None);
pub const FULL: Cell = Cell::new(SamplerKind::Learned, Variant::Full, Some(SupervisionMode::Multiplicative));

/// The default grid: the four main cells, the supervision variants, the
/// predictor variants and the oracle sampler.
pub fn default_cells() -> Vec<Cell> {
    let mut cells = vec![LR_ONLY, SAMPLER_ONLY, RANDOM_PREDICTOR, FULL];
    for mode in [SupervisionMode::StructuralOnly, SupervisionMode::SemanticOnly, SupervisionMode::Additive] {
        cells.push(Cell::new(SamplerKind::Learned, Variant::Full, Some(mode)));
    }
    for variant in [Variant::DirectLrFill, Variant::NoLrContext] {
        cells.push(Cell::new(SamplerKind::Learned, variant, Some(SupervisionMode::Multiplicative)));
    }
    cells.push(Cell::new(SamplerKind::Oracle, Variant::Full, Some(SupervisionMode::Multiplicative)));
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub seed: u64,
    pub report: BudgetReport,
}

/// Per-seed quantities outside the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub learned_threshold: f64,
    pub random_rate: f64,
    pub stage1_loss: Vec<f64>,
    pub stage1_variance: Vec<f64>,
    /// Variance ratio of the full predictor on held-out scenes.
    pub held_out_variance_ratio: f64,
    pub stage2_loss: Vec<f64>,
    pub diagnostic_queries: usize,
    pub diagnostic_hits_full: usize,
    pub diagnostic_hits_no_lr_context: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub cells: Vec<CellResult>,
    pub seeds: Vec<SeedSummary>,
}

/// Queries and gallery scenes used by the per-seed diagnostic.
pub const DIAGNOSTIC_QUERIES: usize = 50;
pub const DIAGNOSTIC_GALLERY_SCENES: usize = 128;
pub const DIAGNOSTIC_TOP_N: usize = 5;

struct SeedData {
    train_scenes: Vec<Scene>,
    test_scenes: Vec<Scene>,
    train: Vec<EncodedScene>,
    test: Vec<EncodedScene>,
}

fn seed_data(cfg: &RunConfig, enc: &OracleEncoders, seed: u64) -> Result<SeedData> {
    let train_scenes = generate_scenes(&cfg.scene, seed, 0, cfg.train_scenes)?;
    let test_scenes = generate_scenes(&cfg.scene, seed, cfg.train_scenes as u64, cfg.test_scenes)?;
    Ok(SeedData {
        train: encode_scenes(&train_scenes, &cfg.scene, enc)?,
        test: encode_scenes(&test_scenes, &cfg.scene, enc)?,
        train_scenes,
        test_scenes,
    })
}

fn mean_obr(sets: &[ObservationSet], tiles: usize) -> f64 {
    obr(&sets.iter().map(|s| s.selected.len()).collect::<Vec<_>>(), tiles).1
}

/// Random policy whose realized mean OBR on `scenes` is closest to
/// `target`. Under a fixed stream the realized OBR is a nondecreasing step
/// function of the rate, so bisection finds the step nearest the target.
fn matched_random_policy(pipeline: &Pipeline, scenes: &[EncodedScene], target: f64, seed: u64) -> Result<(SelectionPolicy, f64)> {
    let tiles = pipeline.predictor.config.grid * pipeline.predictor.config.grid;
    let realized = |rate: f64| -> Result<f64> {
        let sets = pipeline.with_policy(SelectionPolicy::Random { rate, seed }).observe(scenes, None)?;
        Ok(mean_obr(&sets, tiles))
    };
    let (mut lo, mut hi) = ((0.0, realized(0.0)?), (1.0, realized(1.0)?));
    for _ in 0..40 {
        let rate = 0.5 * (lo.0 + hi.0);
        let mid = (rate, realized(rate)?);
        if mid.1 < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (rate, obr) = if target - lo.1 <= hi.1 - target { lo } else { hi };
    Ok((SelectionPolicy::Random { rate, seed }, obr))
}

/// Train and evaluate every cell for one seed. Samplers and predictors
/// are shared where the cell allows; one alignment head per seed scores
/// every cell.
pub fn run_seed(cfg: &RunConfig, enc: &OracleEncoders, cells: &[Cell], seed: u64) -> Result<(Vec<CellResult>, SeedSummary)> {
    let data = seed_data(cfg, enc, seed)?;
    let tiles = cfg.scene.tiles();
    let digest = cfg.digest();
    let modes: Vec<SupervisionMode> = {
        let mut m: Vec<SupervisionMode> = cells.iter().filter_map(|c| c.supervision).collect();
        m.push(SupervisionMode::Multiplicative);
        m.sort_by_key(|m| SupervisionMode::ALL.iter().position(|a| a == m));
        m.dedup();
        m
    };

    // thresholds are cut on the evaluation scenes so every policy meets the
    // same budget there; the learned cuts read sampler scores only
    let mut test_maps: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    let mut samplers: BTreeMap<usize, (SamplerParams, f64)> = BTreeMap::new();
    for &mode in &modes {
        let key = mode as usize;
        let maps = supervision_maps(&data.train, &cfg.scene, enc, cfg.lambda, mode)?;
        let (params, _) = train_sampler_for(&data.train, &maps, cfg, seed)?;
        let tau = calibrate_threshold(&score_scenes(&data.test, &params)?, cfg.target_obr)?;
        samplers.insert(key, (params, tau));
        let test = supervision_maps(&data.test, &cfg.scene, enc, cfg.lambda, mode)?;
        test_maps.insert(key, test.into_iter().map(|m| m.g_star).collect());
    }

    let full = train_predictor_for(&data.train, cfg, Variant::Full, seed)?;
    let needs_no_lr = cells.iter().any(|c| c.variant == Variant::NoLrContext);
    let no_lr = if needs_no_lr {
        Some(train_predictor_for(&data.train, cfg, Variant::NoLrContext, seed)?)
    } else {
        None
    };
    let untrained = init_predictor(cfg, seed);

    let mult = SupervisionMode::Multiplicative as usize;
    let (learned_params, learned_tau) = samplers[&mult].clone();
    let learned = Pipeline {
        sampler: Some(learned_params),
        policy: SelectionPolicy::Threshold { tau: learned_tau },
        predictor: full.params.clone(),
        variant: Variant::Full,
        head: None,
    };
    let learned_test_sets = learned.observe(&data.test, None)?;
    let learned_obr = mean_obr(&learned_test_sets, tiles);
    let (random_policy, random_obr) = matched_random_policy(&learned, &data.test, learned_obr, seed ^ STREAM_RANDOM_POLICY)?;
    if (random_obr - learned_obr).abs() > BUDGET_MATCH_TOLERANCE {
        return Err(CxsError::UnmatchedBudget {
            learned: learned_obr,
            random: random_obr,
        });
    }

    // one head per seed, fitted to the full predictor under both budget
    // policies; every cell is scored through it, so removing a component
    // changes only the inputs it sees
    let (head, stage2_loss) = train_head_on(&[&learned, &learned.with_policy(random_policy.clone())], &data.train, None, enc, cfg, seed)?;
    let learned = Pipeline {
        head: Some(head),
        ..learned
    };

    let mut results = Vec::with_capacity(cells.len());
    for &cell in cells {
        let key = cell.supervision.unwrap_or(SupervisionMode::Multiplicative) as usize;
        let (sampler, policy) = match cell.sampler {
            SamplerKind::Learned => {
                let (p, tau) = samplers[&key].clone();
                (Some(p), SelectionPolicy::Threshold { tau })
            }
            SamplerKind::Random => (None, random_policy.clone()),
            SamplerKind::None => (None, SelectionPolicy::Nothing),
            SamplerKind::Oracle => {
                let tau = calibrate_threshold(&test_maps[&key], cfg.target_obr)?;
                (None, SelectionPolicy::OracleGStar { tau })
            }
        };
        let predictor = match cell.variant {
            Variant::Full => full.params.clone(),
            Variant::NoLrContext => no_lr.as_ref().map(|t| t.params.clone()).expect("trained above"),
            Variant::NoPredictor | Variant::DirectLrFill => untrained.clone(),
        };
        let pipeline = Pipeline {
            sampler,
            policy,
            predictor,
            variant: cell.variant,
            head: learned.head.clone(),
        };
        let report = evaluate(&pipeline, &data.test, Some(&test_maps[&key]), enc, cfg.timing, &digest)?;
        log::info!(
            "seed {seed} {}/{}/{}: obr {:.4} map100 {:.4} top1 {:.4}",
            cell.sampler,
            cell.variant,
            cell.supervision_name(),
            report.realized_obr_mean,
            report.map_at_100,
            report.top1_acc
        );
        results.push(CellResult { cell, seed, report });
    }

    let (hits_full, hits_no_lr, n_queries) = match &no_lr {
        Some(no_lr) => {
            let appearance = cfg.scene.appearance();
            let gallery_n = DIAGNOSTIC_GALLERY_SCENES.min(data.train.len());
            let gallery = build_gallery(&data.train_scenes[..gallery_n], &data.train[..gallery_n], &cfg.scene, &appearance)?;
            let queries = diagnostic_queries(&data.test_scenes, &cfg.scene, &appearance, DIAGNOSTIC_QUERIES)?;
            let no_lr_pipe = Pipeline {
                predictor: no_lr.params.clone(),
                variant: Variant::NoLrContext,
                ..learned.clone()
            };
            (
                diagnostic_hits(&queries, &data.test, &learned_test_sets, &learned, &gallery, DIAGNOSTIC_TOP_N)?,
                diagnostic_hits(&queries, &data.test, &learned_test_sets, &no_lr_pipe, &gallery, DIAGNOSTIC_TOP_N)?,
                queries.len(),
            )
        }
        None => (0, 0, 0),
    };

    let summary = SeedSummary {
        seed,
        learned_threshold: learned_tau,
        random_rate: learned_obr,
        held_out_variance_ratio: held_out_variance_ratio(&data.test, &full.params, Variant::Full, seed)?,
        stage1_loss: full.loss_trace,
        stage1_variance: full.variance_trace,
        stage2_loss,
        diagnostic_queries: n_queries,
        diagnostic_hits_full: hits_full,
        diagnostic_hits_no_lr_context: hits_no_lr,
    };
    Ok((results, summary))
}

/// Run every cell for seeds `cfg.seed .. cfg.seed + cfg.seeds`.
pub fn run_ablation(cfg: &RunConfig, enc: &OracleEncoders, cells: &[Cell]) -> Result<AblationOutcome> {
    if cells.is_empty() {
        return Err(CxsError::Empty("ablation grid"));
    }
    let mut outcome = AblationOutcome {
        cells: Vec::new(),
        seeds: Vec::new(),
    };
    for i in 0..cfg.seeds as u64 {
        let (rows, summary) = run_seed(cfg, enc, cells, cfg.seed.wrapping_add(i))?;
        outcome.cells.extend(rows);
        outcome.seeds.push(summary);
    }
    Ok(outcome)
}

/// Mean mAP@100 of `cell` for each seed, in seed order.
pub fn cell_scores(outcome: &AblationOutcome, cell: Cell) -> Vec<f64> {
    outcome.cells.iter().filter(|r| r.cell == cell).map(|r| r.report.map_at_100).collect()
}

/// Per-seed rows followed by one `mean` row per cell.
pub fn ablation_csv(outcome: &AblationOutcome) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    let row = |c: &Cell, seed: &str, m100: f64, m20: f64, obr: f64, ms: f64| {
        format!(
            "{},{},{},{seed},{m100:.6},{m20:.6},{obr:.6},{}\n",
            c.sampler,
            c.variant,
            c.supervision_name(),
            ms.round() as u64
        )
    };
    let mut order: Vec<Cell> = Vec::new();
    for r in &outcome.cells {
        if !order.contains(&r.cell) {
            order.push(r.cell);
        }
        let m = &r.report;
        out.push_str(&row(&r.cell, &r.seed.to_string(), m.map_at_100, m.map_at_20, m.realized_obr_mean, m.wall_ms_total as f64));
    }
    for c in &order {
        let rs: Vec<&BudgetReport> = outcome.cells.iter().filter(|r| r.cell == *c).map(|r| &r.report).collect();
        let n = rs.len() as f64;
        let mean = |f: fn(&BudgetReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
        out.push_str(&row(
            c,
            "mean",
            mean(|r| r.map_at_100),
            mean(|r| r.map_at_20),
            mean(|r| r.realized_obr_mean),
            mean(|r| r.wall_ms_total as f64),
        ));
    }
    out
}
