//! Brute-force reference implementations, written independently of the
//! library: no shared helpers, quadratic loops, explicit sorting.

#![allow(dead_code)]

/// Precision at every relevant rank within the cutoff, recounted from
/// scratch each time.
pub fn average_precision(ranking: &[usize], relevant: &[usize], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let cut = k.min(ranking.len());
    let mut total = 0.0;
    for i in 0..cut {
        if relevant.contains(&ranking[i]) {
            let hits = ranking[..=i].iter().filter(|r| relevant.contains(r)).count();
            total += hits as f64 / (i + 1) as f64;
        }
    }
    total / relevant.len().min(k) as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Repeatedly pick the best remaining item; the earliest index wins ties.
pub fn ranking_by_selection(scores: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            if scores[left[j]] > scores[left[best]] {
                best = j;
            }
        }
        out.push(left.remove(best));
    }
    out
}

pub fn retrieval_map(vectors: &[Vec<f64>], labels: &[u64], table: &[Vec<f64>], k: usize) -> f64 {
    let mut aps = Vec::new();
    for (c, text) in table.iter().enumerate() {
        let relevant: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] & (1u64 << c) != 0).collect();
        if relevant.is_empty() {
            continue;
        }
        let scores: Vec<f64> = vectors.iter().map(|v| cosine(v, text)).collect();
        aps.push(average_precision(&ranking_by_selection(&scores), &relevant, k));
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// `-(1/K^2) Σ_ij log σ(y_ij (<x_i, t_j> / τ + b))`, pair by pair.
pub fn siglip(x: &[Vec<f64>], t: &[Vec<f64>], y: &[Vec<f64>], tau: f64, bias: f64) -> f64 {
    let k = x.len();
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            let z = y[i][j] * (dot(&x[i], &t[j]) / tau + bias);
            // -log σ(z) = log(1 + e^{-z})
            total += if z > 0.0 { (-z).exp().ln_1p() } else { -z + z.exp().ln_1p() };
        }
    }
    total / (k * k) as f64
}

/// Top-1 over single-label scenes and mean AP over all labelled scenes.
pub fn recognition(rankings: &[Vec<usize>], labels: &[u64]) -> (f64, f64) {
    let (mut singles, mut correct) = (0, 0);
    let mut aps = Vec::new();
    for (r, &m) in rankings.iter().zip(labels) {
        let relevant: Vec<usize> = (0..64).filter(|&c| m & (1u64 << c) != 0).collect();
        if relevant.len() == 1 {
            singles += 1;
            if r[0] == relevant[0] {
                correct += 1;
            }
        }
        if !relevant.is_empty() {
            aps.push(average_precision(r, &relevant, r.len()));
        }
    }
    let top1 = if singles == 0 { 0.0 } else { correct as f64 / singles as f64 };
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    (top1, map)
}

/// Mean fraction of tiles at or above `tau`.
pub fn mean_obr(scores: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for s in scores {
        total += s.iter().filter(|&&v| v >= tau).count() as f64 / s.len() as f64;
    }
    total / scores.len() as f64
}

/// Try every distinct score (and both ends) in increasing order; the first
/// cut meeting the target wins.
pub fn calibrate(scores: &[Vec<f64>], target: f64) -> f64 {
    let mut cuts = vec![0.0, 1.0];
    for s in scores {
        for &v in s {
            if (0.0..=1.0).contains(&v) && !cuts.contains(&v) {
                cuts.push(v);
            }
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for tau in cuts {
        if mean_obr(scores, tau) <= target {
            return tau;
        }
    }
    1.0
}
