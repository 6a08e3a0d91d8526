use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use cxs_core::alignment::AlignHead;
use cxs_core::dataset::{write_dataset, DatasetHeader};
use cxs_core::error::CxsError;
use cxs_core::gradsuite::run_suite;
use cxs_core::metrics::obr;
use cxs_core::pipeline::{
    ablation_csv, budget_sweep, default_cells, encode_scenes, evaluate as evaluate_pipeline, held_out_variance_ratio,
    init_predictor, run_ablation, score_scenes, supervision_maps, sweep_csv, train_head, train_predictor_for,
    train_sampler_for, EncodedScene, Pipeline, SWEEP_GRID,
};
use cxs_core::predictor::PredictorParams;
use cxs_core::sampler::{calibrate_threshold, read_supervision_from, write_supervision_to, SamplerParams, SelectionPolicy, SupervisionMap};
use cxs_core::scene::generate_scenes;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::workspace::*;

/// Relative error a component may show and still pass the gradient check.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

fn to_value<T: serde::Serialize>(v: &T) -> CliResult<Value> {
    Ok(serde_json::to_value(v).map_err(CxsError::from)?)
}

pub fn gen_data(ws: &Workspace) -> CliResult<()> {
    let mut run = ws.start("gen-data");
    let cfg = &ws.cfg;
    let header = DatasetHeader::of(&cfg.scene);
    let train = generate_scenes(&cfg.scene, cfg.seed, 0, cfg.train_scenes)?;
    let test = generate_scenes(&cfg.scene, cfg.seed, cfg.train_scenes as u64, cfg.test_scenes)?;
    for (path, scenes) in [(ws.train_data(), &train), (ws.test_data(), &test)] {
        write_dataset(&path, header, scenes)?;
        run.output(&path);
    }
    log::info!("generated {} training and {} test scenes", train.len(), test.len());
    run.finish()
}

fn write_maps(run: &mut Run, name: &str, tiles: usize, maps: &[SupervisionMap]) -> CliResult<()> {
    let path = run.ws.path(name);
    let mut w = BufWriter::new(File::create(&path).map_err(|e| CliError::io(&path, e))?);
    write_supervision_to(&mut w, tiles, maps)?;
    w.flush().map_err(|e| CliError::io(&path, e))?;
    run.output(&path);
    Ok(())
}

fn read_maps(run: &mut Run, name: &str, scenes: usize) -> CliResult<Vec<SupervisionMap>> {
    let path = run.input(&run.ws.path(name))?;
    let mode = run.ws.cfg.supervision_mode()?;
    let mut r = BufReader::new(File::open(&path).map_err(|e| CliError::io(&path, e))?);
    let (tiles, maps) = read_supervision_from(&mut r, mode)?;
    let expected = run.ws.cfg.scene.tiles();
    if tiles != expected || maps.len() != scenes {
        return Err(CxsError::Geometry(format!(
            "{} holds {} maps of {tiles} tiles, expected {scenes} of {expected}",
            path.display(),
            maps.len()
        ))
        .into());
    }
    Ok(maps)
}

pub fn make_supervision(ws: &Workspace) -> CliResult<()> {
    let mut run = ws.start("make-supervision");
    let cfg = &ws.cfg;
    let enc = ws.encoders()?;
    let mode = cfg.supervision_mode()?;
    for (data, name) in [(ws.train_data(), TRAIN_SUPERVISION), (ws.test_data(), TEST_SUPERVISION)] {
        let scenes = encode_scenes(&run.scenes(&data)?, &cfg.scene, &enc)?;
        let maps = supervision_maps(&scenes, &cfg.scene, &enc, cfg.lambda, mode)?;
        write_maps(&mut run, name, cfg.scene.tiles(), &maps)?;
    }
    run.finish()
}

fn encoded(run: &mut Run, path: &std::path::Path) -> CliResult<Vec<EncodedScene>> {
    let scenes = run.scenes(path)?;
    let enc = run.ws.encoders()?;
    Ok(encode_scenes(&scenes, &run.ws.cfg.scene, &enc)?)
}

pub fn train_sampler(ws: &Workspace) -> CliResult<()> {
    let mut run = ws.start("train-sampler");
    let train = encoded(&mut run, &ws.train_data())?;
    let maps = read_maps(&mut run, TRAIN_SUPERVISION, train.len())?;
    let (params, loss_trace) = train_sampler_for(&train, &maps, &ws.cfg, ws.cfg.seed)?;
    let meta = json!({
        "supervision": ws.cfg.supervision,
        "grid": ws.cfg.scene.grid,
        "epochs": ws.cfg.sampler_epochs,
        "loss_trace": loss_trace,
    });
    let tensors: Vec<(String, _)> = params.tensors().into_iter().map(|(n, t)| (n.to_string(), t)).collect();
    run.save_checkpoint(SAMPLER, "sampler", meta, &tensors)?;
    run.finish()
}

pub fn train_predictor(ws: &Workspace) -> CliResult<()> {
    let mut run = ws.start("train-predictor");
    let cfg = &ws.cfg;
    let variant = cfg.predictor_variant()?;
    let train = encoded(&mut run, &ws.train_data())?;
    let (params, loss_trace, variance_trace) = if variant.is_learned() {
        let t = train_predictor_for(&train, cfg, variant, cfg.seed)?;
        (t.params, t.loss_trace, t.variance_trace)
    } else {
        (init_predictor(cfg, cfg.seed), Vec::new(), Vec::new())
    };
    let test_path = ws.test_data();
    let held_out = if test_path.exists() && variant.is_learned() {
        let test = encoded(&mut run, &test_path)?;
        Some(held_out_variance_ratio(&test, &params, variant, cfg.seed)?)
    } else {
        None
    };
    let meta = json!({
        "config": to_value(&params.config)?,
        "variant": variant.name(),
        "loss_trace": loss_trace,
        "variance_trace": variance_trace,
        "held_out_variance_ratio": held_out,
    });
    run.save_checkpoint(PREDICTOR, "predictor", meta, &params.named_tensors())?;
    run.finish()
}

fn load_sampler(run: &mut Run) -> CliResult<SamplerParams> {
    let (_, tensors) = run.load_checkpoint(SAMPLER, "sampler")?;
    Ok(SamplerParams::from_named(&run.ws.cfg.scene, tensors)?)
}

fn load_predictor(run: &mut Run) -> CliResult<(PredictorParams, cxs_core::predictor::Variant)> {
    let (meta, tensors) = run.load_checkpoint(PREDICTOR, "predictor")?;
    let expected = run.ws.cfg.predictor_config();
    if meta["config"] != to_value(&expected)? {
        return Err(CxsError::Geometry(format!("predictor was trained for {}, configured {:?}", meta["config"], expected)).into());
    }
    let variant = meta["variant"]
        .as_str()
        .ok_or_else(|| CxsError::Checkpoint("predictor checkpoint has no variant".into()))?
        .parse()?;
    Ok((PredictorParams::from_named(expected, tensors)?, variant))
}

fn load_head(run: &mut Run) -> CliResult<AlignHead> {
    let (_, tensors) = run.load_checkpoint(HEAD, "head")?;
    let head = AlignHead::from_named(tensors)?;
    if head.dim() != run.ws.cfg.dim {
        return Err(CxsError::Geometry(format!("head expects {}-dim inputs, configured {}", head.dim(), run.ws.cfg.dim)).into());
    }
    Ok(head)
}

/// An explicit `threshold` wins, then a calibrated one, then the default.
fn resolve_threshold(run: &mut Run) -> CliResult<f64> {
    let ws = run.ws;
    if !ws.explicit.contains("threshold") && ws.path(CALIBRATION).exists() {
        let cal = run.read_json(CALIBRATION)?;
        return cal["tau"]
            .as_f64()
            .ok_or_else(|| CxsError::Checkpoint("calibration file has no tau".into()).into());
    }
    Ok(ws.cfg.threshold)
}

fn pipeline(run: &mut Run, with_head: bool) -> CliResult<Pipeline> {
    let tau = resolve_threshold(run)?;
    let sampler = load_sampler(run)?;
    let (predictor, variant) = load_predictor(run)?;
    let head = if with_head { Some(load_head(run)?) } else { None };
    Ok(Pipeline {
        sampler: Some(sampler),
        policy: SelectionPolicy::Threshold { tau },
        predictor,
        variant,
        head,
    })
}

fn tau_of(p: &Pipeline) -> f64 {
    match p.policy {
        SelectionPolicy::Threshold { tau } => tau,
        _ => unreachable!("command pipelines select by threshold"),
    }
}

pub fn train_align(ws: &Workspace) -> CliResult<()> {
    let mut run = ws.start("train-align");
    let pipe = pipeline(&mut run, false)?;
    let train = encoded(&mut run, &ws.train_data())?;
    let enc = ws.encoders()?;
    let (head, loss_trace) = train_head(&pipe, &train, None, &enc, &ws.cfg, ws.cfg.seed)?;
    let meta = json!({
        "threshold": tau_of(&pipe),
        "variant": pipe.variant.name(),
        "dim": head.dim(),
        "loss_trace": loss_trace,
    });
    run.save_checkpoint(HEAD, "head", meta, &head.named_tensors())?;
    run.finish()
}

fn mean_obr(scores: &[Vec<f64>], tau: f64) -> f64 {
    let counts: Vec<usize> = scores.iter().map(|s| s.iter().filter(|&&v| v >= tau).count()).collect();
    obr(&counts, scores.first().map_or(0, Vec::len)).1
}

pub fn calibrate(ws: &Workspace) -> CliResult<()> {
    let mut run = ws.start("calibrate");
    let sampler = load_sampler(&mut run)?;
    let train = encoded(&mut run, &ws.train_data())?;
    let train_scores = score_scenes(&train, &sampler)?;
    let tau = calibrate_threshold(&train_scores, ws.cfg.target_obr)?;
    let test_path = ws.test_data();
    let test_obr = if test_path.exists() {
        Some(mean_obr(&score_scenes(&encoded(&mut run, &test_path)?, &sampler)?, tau))
    } else {
        None
    };
    let report = json!({
        "tau": tau,
        "target_obr": ws.cfg.target_obr,
        "calibration_obr": mean_obr(&train_scores, tau),
        "held_out_obr": test_obr,
    });
    run.write_json(CALIBRATION, &report)?;
    println!("{}", report);
    run.finish()
}

pub fn evaluate(ws: &Workspace) -> CliResult<()> {
    let mut run = ws.start("evaluate");
    let pipe = pipeline(&mut run, true)?;
    let test = encoded(&mut run, &ws.test_data())?;
    let enc = ws.encoders()?;
    let report = evaluate_pipeline(&pipe, &test, None, &enc, ws.cfg.timing, &ws.cfg.digest())?;
    let value = json!({
        "threshold": tau_of(&pipe),
        "variant": pipe.variant.name(),
        "scenes": test.len(),
        "report": to_value(&report)?,
    });
    run.write_json(EVALUATION, &value)?;
    println!(
        "obr {:.4} map@100 {:.4} map@20 {:.4} top1 {:.4} multilabel {:.4}",
        report.realized_obr_mean, report.map_at_100, report.map_at_20, report.top1_acc, report.multilabel_map
    );
    run.finish()
}

pub fn sweep(ws: &Workspace, thresholds: Option<Vec<f64>>) -> CliResult<()> {
    let mut run = ws.start("sweep");
    let grid = thresholds.unwrap_or_else(|| SWEEP_GRID.to_vec());
    let pipe = pipeline(&mut run, true)?;
    let test = encoded(&mut run, &ws.test_data())?;
    let enc = ws.encoders()?;
    let rows = budget_sweep(&pipe, &test, &enc, &grid, ws.cfg.timing, &ws.cfg.digest())?;
    let csv = sweep_csv(&rows);
    run.write(SWEEP, csv.as_bytes())?;
    print!("{csv}");
    run.finish()
}

pub fn ablate(ws: &Workspace) -> CliResult<()> {
    let mut run = ws.start("ablate");
    let enc = ws.encoders()?;
    let outcome = run_ablation(&ws.cfg, &enc, &default_cells())?;
    let csv = ablation_csv(&outcome);
    run.write(ABLATION_CSV, csv.as_bytes())?;
    run.write_json(ABLATION_JSON, &to_value(&outcome)?)?;
    print!("{csv}");
    run.finish()
}

pub fn gradcheck(ws: &Workspace) -> CliResult<()> {
    let mut run = ws.start("gradcheck");
    let checks = run_suite(ws.cfg.predictor_config(), ws.cfg.seed)?;
    for c in &checks {
        println!("{:<40} {:.3e} ({} entries)", c.component, c.max_rel_error, c.checked);
    }
    run.write_json(GRADCHECK, &json!({ "tolerance": GRADIENT_TOLERANCE, "components": to_value(&checks)? }))?;
    run.finish()?;
    match checks.iter().find(|c| !(c.max_rel_error < GRADIENT_TOLERANCE)) {
        Some(c) => Err(CliError::GradientCheck {
            component: c.component.clone(),
            error: c.max_rel_error,
        }),
        None => Ok(()),
    }
}
