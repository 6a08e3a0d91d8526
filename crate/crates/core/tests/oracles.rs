//! Library metrics and losses against the brute-force references.

#[path = "common/oracle.rs"]
mod oracle;

use std::collections::HashSet;

use cxs_core::alignment::loss_siglip;
use cxs_core::metrics::{average_precision_at_k, mocr, obr, recognition_metrics, retrieval_map, CostModel};
use cxs_core::sampler::calibrate_threshold;
use numkernel::RngStream;

const INSTANCES: u64 = 100;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn gaussian(n: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| rng.standard_normal()).collect()
}

fn below(n: usize, rng: &mut RngStream) -> usize {
    ((rng.uniform01() * n as f64) as usize).min(n - 1)
}

#[test]
fn average_precision_matches_brute_force() {
    for case in 0..INSTANCES {
        let mut rng = RngStream::new(11, case);
        let items = 1 + below(10, &mut rng);
        let ranking = rng.permutation(items);
        let relevant: Vec<usize> = (0..items).filter(|_| rng.uniform01() < 0.4).collect();
        let k = 1 + below(8, &mut rng);
        let lib = average_precision_at_k(&ranking, &relevant.iter().copied().collect::<HashSet<_>>(), k).unwrap();
        let reference = oracle::average_precision(&ranking, &relevant, k);
        assert!((lib - reference).abs() <= 1e-10, "case {case}: {lib} vs {reference}");
    }
}

#[test]
fn worked_average_precision() {
    let relevant: HashSet<usize> = [10, 30].into_iter().collect();
    let ap = average_precision_at_k(&[10, 20, 30, 40], &relevant, 3).unwrap();
    assert!((ap - oracle::average_precision(&[10, 20, 30, 40], &[10, 30], 3)).abs() < 1e-15);
    assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
}

#[test]
fn retrieval_map_matches_brute_force() {
    for case in 0..INSTANCES {
        let mut rng = RngStream::new(12, case);
        let scenes = 1 + below(10, &mut rng);
        let concepts = 1 + below(6, &mut rng);
        let dim = 2 + below(6, &mut rng);
        let vectors: Vec<Vec<f64>> = (0..scenes).map(|_| unit(gaussian(dim, &mut rng))).collect();
        let table: Vec<Vec<f64>> = (0..concepts).map(|_| unit(gaussian(dim, &mut rng))).collect();
        let labels: Vec<u64> = (0..scenes).map(|_| (below(1 << concepts, &mut rng)) as u64).collect();
        let k = 1 + below(8, &mut rng);
        let lib = retrieval_map(&vectors, &labels, &table, k).unwrap();
        let reference = oracle::retrieval_map(&vectors, &labels, &table, k);
        assert!((lib - reference).abs() <= 1e-12, "case {case}: {lib} vs {reference}");
    }
}

#[test]
fn tied_scores_rank_by_index() {
    // scene vectors orthogonal to every concept and to each other: all
    // cosines are 0 and the ranking falls back to scene order
    let vectors: Vec<Vec<f64>> = (0..4).map(|i| (0..8).map(|j| f64::from(u8::from(j == i))).collect()).collect();
    let table: Vec<Vec<f64>> = (4..7).map(|i| (0..8).map(|j| f64::from(u8::from(j == i))).collect()).collect();
    let labels = [0b001, 0b010, 0b101, 0b000];
    for k in 1..=4 {
        let lib = retrieval_map(&vectors, &labels, &table, k).unwrap();
        assert!((lib - oracle::retrieval_map(&vectors, &labels, &table, k)).abs() <= 1e-12);
    }
}

#[test]
fn siglip_matches_brute_force() {
    for case in 0..INSTANCES {
        let mut rng = RngStream::new(13, case);
        let k = 1 + below(8, &mut rng);
        let dim = 2 + below(6, &mut rng);
        let x: Vec<Vec<f64>> = (0..k).map(|_| unit(gaussian(dim, &mut rng))).collect();
        let t: Vec<Vec<f64>> = (0..k).map(|_| unit(gaussian(dim, &mut rng))).collect();
        let y: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j || rng.uniform01() < 0.2 { 1.0 } else { -1.0 }).collect())
            .collect();
        let tau = 0.05 + 10.0 * rng.uniform01();
        let bias = 20.0 * rng.uniform01() - 10.0;
        let lib = loss_siglip(&x, &t, &y, tau, bias).unwrap();
        let reference = oracle::siglip(&x, &t, &y, tau, bias);
        assert!(lib >= 0.0);
        assert!((lib - reference).abs() <= 1e-10, "case {case}: {lib} vs {reference}");
    }
}

#[test]
fn recognition_matches_brute_force() {
    for case in 0..INSTANCES {
        let mut rng = RngStream::new(14, case);
        let scenes = 1 + below(10, &mut rng);
        let concepts = 2 + below(7, &mut rng);
        let rankings: Vec<Vec<usize>> = (0..scenes).map(|_| rng.permutation(concepts)).collect();
        let labels: Vec<u64> = (0..scenes).map(|_| below(1 << concepts, &mut rng) as u64).collect();
        let lib = recognition_metrics(&rankings, &labels).unwrap();
        let (top1, map) = oracle::recognition(&rankings, &labels);
        assert!((lib.top1 - top1).abs() <= 1e-12 && (lib.multilabel_map - map).abs() <= 1e-12, "case {case}");
    }
}

#[test]
fn free_lr_cost_equals_budget_ratio() {
    for case in 0..INSTANCES {
        let mut rng = RngStream::new(15, case);
        let tiles = 1 + below(100, &mut rng);
        let tile_area = 0.5 + rng.uniform01();
        let model = CostModel::lr_hr(tiles as f64 * tile_area).unwrap();
        let selected: Vec<usize> = (0..tiles).filter(|_| rng.uniform01() < rng.uniform01()).collect();
        let mut requests = vec![(tiles as f64 * tile_area, "lr")];
        requests.extend(selected.iter().map(|_| (tile_area, "hr")));
        let cost = mocr(&requests, &model).unwrap();
        let ratio = obr(&[selected.len()], tiles).1;
        assert!((cost - ratio).abs() <= 1e-12, "case {case}: {cost} vs {ratio}");
    }
}

#[test]
fn calibration_matches_cut_point_enumeration() {
    for case in 0..INSTANCES {
        let mut rng = RngStream::new(16, case);
        let scenes = 1 + below(6, &mut rng);
        let tiles = 1 + below(12, &mut rng);
        let scores: Vec<Vec<f64>> = (0..scenes)
            .map(|_| (0..tiles).map(|_| (rng.uniform01() * 20.0).floor() / 20.0).collect())
            .collect();
        let target = rng.uniform01();
        let lib = calibrate_threshold(&scores, target).unwrap();
        assert_eq!(lib, oracle::calibrate(&scores, target), "case {case}");
        assert!(oracle::mean_obr(&scores, lib) <= target);
    }
    assert_eq!(calibrate_threshold(&[vec![0.9, 0.7, 0.5, 0.3]], 0.5).unwrap(), 0.7);
}
