//! Retrieval metrics (AP, Recall@K, Recall@1%), reconstruction quality
//! (PSNR/SSIM), and linear viewpoint probes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{CvdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    DroneToSatellite,
    SatelliteToDrone,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::DroneToSatellite => write!(f, "drone->satellite"),
            Direction::SatelliteToDrone => write!(f, "satellite->drone"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub ap: f64,
    pub r_at: Vec<(usize, f64)>,
    pub r_at_1pct: f64,
    pub n_queries: usize,
    pub n_gallery: usize,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.r_at
            .iter()
            .find(|(kk, _)| *kk == k)
            .map(|(_, v)| *v)
            .unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub probe_target: String,
    pub acc_from_content: f64,
    pub acc_from_viewpoint: f64,
    pub chance: f64,
}

fn check_unit_rows(mat: &[f64], rows: usize, d: usize, what: &str) -> Result<()> {
    for r in 0..rows {
        let n: f64 = mat[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(CvdError::Precondition(format!(
                "{what} row {r} not unit-normalized (norm {n})"
            )));
        }
    }
    Ok(())
}

fn eval_pool() -> rayon::ThreadPool {
    let threads = std::env::var("CVD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| rayon::current_num_threads());
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}

/// Cosine similarities between unit-normalized query and gallery rows.
/// Row-parallel; results are independent of the thread count.
pub fn similarity_matrix(queries: &[f64], gallery: &[f64], d: usize) -> Result<Vec<f64>> {
    if d == 0 || queries.len() % d != 0 || gallery.len() % d != 0 {
        return Err(CvdError::Shape("embedding width does not divide matrix".into()));
    }
    let q = queries.len() / d;
    let n = gallery.len() / d;
    check_unit_rows(queries, q, d, "query")?;
    check_unit_rows(gallery, n, d, "gallery")?;
    let mut sim = vec![0.0; q * n];
    eval_pool().install(|| {
        sim.par_chunks_mut(n).enumerate().for_each(|(qi, row)| {
            let qrow = &queries[qi * d..(qi + 1) * d];
            for (gi, out) in row.iter_mut().enumerate() {
                let grow = &gallery[gi * d..(gi + 1) * d];
                *out = qrow.iter().zip(grow).map(|(a, b)| a * b).sum();
            }
        });
    });
    Ok(sim)
}

/// Gallery indices of one query row ranked by descending similarity,
/// ties broken by ascending index (stable sort keeps index order).
pub fn rank_gallery(sim_row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sim_row.len()).collect();
    idx.sort_by(|&a, &b| sim_row[b].partial_cmp(&sim_row[a]).unwrap());
    idx
}

fn validate_relevance(relevance: &[Vec<usize>], q: usize) -> Result<()> {
    if relevance.len() != q {
        return Err(CvdError::Labels(format!(
            "{} relevance sets for {} queries",
            relevance.len(),
            q
        )));
    }
    if let Some(i) = relevance.iter().position(|r| r.is_empty()) {
        return Err(CvdError::Labels(format!("query {i} has an empty relevant set")));
    }
    Ok(())
}

/// Fraction of queries with at least one relevant item in the top K.
pub fn recall_at_k(sim: &[f64], n_gallery: usize, relevance: &[Vec<usize>], k: usize) -> Result<f64> {
    let q = sim.len() / n_gallery;
    validate_relevance(relevance, q)?;
    let mut hits = 0usize;
    for qi in 0..q {
        let ranked = rank_gallery(&sim[qi * n_gallery..(qi + 1) * n_gallery]);
        if ranked[..k.min(n_gallery)]
            .iter()
            .any(|g| relevance[qi].contains(g))
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / q as f64)
}

/// AP of one ranked query: mean of precision at each relevant rank.
pub fn average_precision(sim_row: &[f64], relevant: &[usize]) -> Result<f64> {
    if relevant.is_empty() {
        return Err(CvdError::Labels("empty relevant set".into()));
    }
    let ranked = rank_gallery(sim_row);
    let mut found = 0usize;
    let mut acc = 0.0;
    for (pos, g) in ranked.iter().enumerate() {
        if relevant.contains(g) {
            found += 1;
            acc += found as f64 / (pos + 1) as f64;
        }
    }
    Ok(acc / relevant.len() as f64)
}

pub fn mean_average_precision(sim: &[f64], n_gallery: usize, relevance: &[Vec<usize>]) -> Result<f64> {
    let q = sim.len() / n_gallery;
    validate_relevance(relevance, q)?;
    let mut acc = 0.0;
    for qi in 0..q {
        acc += average_precision(&sim[qi * n_gallery..(qi + 1) * n_gallery], &relevance[qi])?;
    }
    Ok(acc / q as f64)
}

pub fn one_percent_k(n_gallery: usize) -> usize {
    ((n_gallery as f64 * 0.01).ceil() as usize).max(1)
}

pub fn recall_at_1pct(sim: &[f64], n_gallery: usize, relevance: &[Vec<usize>]) -> Result<f64> {
    recall_at_k(sim, n_gallery, relevance, one_percent_k(n_gallery))
}

pub fn evaluate_retrieval(
    sim: &[f64],
    n_gallery: usize,
    relevance: &[Vec<usize>],
    direction: Direction,
) -> Result<RetrievalReport> {
    let q = sim.len() / n_gallery;
    let mut r_at = Vec::new();
    for k in [1, 5, 10] {
        r_at.push((k, recall_at_k(sim, n_gallery, relevance, k)?));
    }
    Ok(RetrievalReport {
        direction,
        ap: mean_average_precision(sim, n_gallery, relevance)?,
        r_at,
        r_at_1pct: recall_at_1pct(sim, n_gallery, relevance)?,
        n_queries: q,
        n_gallery,
    })
}

pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio for [0,1] images; exact matches return the
/// 99 dB sentinel so CSV logs stay finite.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CvdError::Shape("psnr on different image sizes".into()));
    }
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Mean structural similarity over non-overlapping 8x8 windows of a
/// single-channel square image.
pub fn ssim(a: &[f64], b: &[f64], side: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != side * side {
        return Err(CvdError::Shape("ssim expects equal square images".into()));
    }
    if side < SSIM_WINDOW {
        return Err(CvdError::Shape(format!(
            "side {side} smaller than ssim window {SSIM_WINDOW}"
        )));
    }
    let nwin = side / SSIM_WINDOW;
    let wn = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut acc = 0.0;
    for wy in 0..nwin {
        for wx in 0..nwin {
            let mut sa = 0.0;
            let mut sb = 0.0;
            let mut saa = 0.0;
            let mut sbb = 0.0;
            let mut sab = 0.0;
            for y in 0..SSIM_WINDOW {
                for x in 0..SSIM_WINDOW {
                    let i = (wy * SSIM_WINDOW + y) * side + wx * SSIM_WINDOW + x;
                    sa += a[i];
                    sb += b[i];
                    saa += a[i] * a[i];
                    sbb += b[i] * b[i];
                    sab += a[i] * b[i];
                }
            }
            let ma = sa / wn;
            let mb = sb / wn;
            let va = saa / wn - ma * ma;
            let vb = sbb / wn - mb * mb;
            let cov = sab / wn - ma * mb;
            let l = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
            let cs = (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2);
            acc += l * cs;
        }
    }
    Ok(acc / (nwin * nwin) as f64)
}

/// Multinomial linear probe: standardized features, full-batch gradient
/// descent, 500 steps, fixed seed; returns held-out accuracy on the last
/// 20% of a seeded shuffle.
pub fn viewpoint_probe(embeddings: &[f64], d: usize, labels: &[usize], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(CvdError::Config("probe needs at least 2 bins".into()));
    }
    let n = labels.len();
    if d == 0 || embeddings.len() != n * d {
        return Err(CvdError::Shape("embedding matrix does not match labels".into()));
    }
    if n < bins * 2 {
        return Err(CvdError::Data(format!(
            "{n} samples are too few for {bins} bins"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= bins) {
        return Err(CvdError::Labels(format!("label {bad} out of range")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9b0b_e5);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((n as f64) * 0.8).round() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let (train_idx, test_idx) = order.split_at(n_train);

    // Per-feature standardization from train statistics.
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for &i in train_idx {
        for j in 0..d {
            mean[j] += embeddings[i * d + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n_train as f64;
    }
    for &i in train_idx {
        for j in 0..d {
            let c = embeddings[i * d + j] - mean[j];
            var[j] += c * c;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / n_train as f64).sqrt();
            if s < 1e-12 {
                1.0
            } else {
                s
            }
        })
        .collect();
    let feat = |i: usize, j: usize| (embeddings[i * d + j] - mean[j]) / std[j];

    let mut w = vec![0.0; d * bins];
    let mut bias = vec![0.0; bins];
    let lr = 0.1;
    let mut logits = vec![0.0; bins];
    let mut gw = vec![0.0; d * bins];
    let mut gb = vec![0.0; bins];
    for _ in 0..500 {
        gw.iter_mut().for_each(|v| *v = 0.0);
        gb.iter_mut().for_each(|v| *v = 0.0);
        for &i in train_idx {
            for (k, l) in logits.iter_mut().enumerate() {
                let mut s = bias[k];
                for j in 0..d {
                    s += feat(i, j) * w[j * bins + k];
                }
                *l = s;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            for k in 0..bins {
                let p = (logits[k] - m).exp() / z;
                let err = p - if k == labels[i] { 1.0 } else { 0.0 };
                gb[k] += err;
                for j in 0..d {
                    gw[j * bins + k] += err * feat(i, j);
                }
            }
        }
        let inv = 1.0 / n_train as f64;
        for (w, g) in w.iter_mut().zip(&gw) {
            *w -= lr * g * inv;
        }
        for (b, g) in bias.iter_mut().zip(&gb) {
            *b -= lr * g * inv;
        }
    }

    let mut correct = 0usize;
    for &i in test_idx {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for k in 0..bins {
            let mut s = bias[k];
            for j in 0..d {
                s += feat(i, j) * w[j * bins + k];
            }
            if s > best_v {
                best_v = s;
                best = k;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_idx.len() as f64)
}

/// Uniform azimuth binning into `bins` classes.
pub fn azimuth_bin(azimuth: f64, bins: usize) -> usize {
    let tau = std::f64::consts::TAU;
    let a = azimuth.rem_euclid(tau);
    ((a / tau * bins as f64) as usize).min(bins - 1)
}
