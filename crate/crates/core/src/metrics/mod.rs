//! Dice, HD95, a linear domain probe and a PCA projection of features.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::seed;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("domain probe needs at least 2 domains, got {0}")]
    TooFewDomains(usize),
    #[error("domain {domain} has {count} samples, need at least {min}")]
    TooFewSamples { domain: usize, count: usize, min: usize },
    #[error("domain counts too imbalanced ({largest}:{smallest}, limit 10:1)")]
    Imbalanced { largest: usize, smallest: usize },
    #[error("features and labels differ in length or width")]
    Shape,
    #[error("pca needs at least 3 samples, got {0}")]
    TooFewPoints(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const PROBE_MIN_PER_DOMAIN: usize = 40;

/// `2|P∩G| / (|P|+|G|)` for class `k`; 1 when both are empty.
pub fn dice_score(pred: &[u8], truth: &[u8], k: u8) -> f64 {
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        let (ia, ib) = (a == k, b == k);
        p += usize::from(ia);
        g += usize::from(ib);
        both += usize::from(ia && ib);
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// How the two directed distance sets are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HdConvention {
    /// 95th percentile of both directions pooled together.
    #[default]
    Pooled,
    /// 95th percentile per direction, then the larger one.
    MaxOfDirected,
}

/// Pixels of class `k` with a 4-neighbour outside the class or the image.
pub fn boundary(mask: &[u8], size: usize, k: u8) -> Vec<(usize, usize)> {
    let at = |r: usize, c: usize| mask[r * size + c] == k;
    let mut out = Vec::new();
    for r in 0..size {
        for c in 0..size {
            if !at(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == size
                || c + 1 == size
                || !at(r - 1, c)
                || !at(r + 1, c)
                || !at(r, c - 1)
                || !at(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

fn directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(r, c)| {
            to.iter()
                .map(|&(r2, c2)| {
                    let dr = r as f64 - r2 as f64;
                    let dc = c as f64 - c2 as f64;
                    dr * dr + dc * dc
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Linear-interpolation percentile (`q` in [0,1]) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = q * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (rank - lo as f64) * (values[hi] - values[lo])
}

/// HD95 between the class-`k` boundaries, `None` when either is empty.
pub fn hd95(pred: &[u8], truth: &[u8], size: usize, k: u8, convention: HdConvention) -> Option<f64> {
    let bp = boundary(pred, size, k);
    let bg = boundary(truth, size, k);
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let mut a = directed(&bp, &bg);
    let mut b = directed(&bg, &bp);
    Some(match convention {
        HdConvention::Pooled => {
            a.append(&mut b);
            percentile(&mut a, 0.95)
        }
        HdConvention::MaxOfDirected => percentile(&mut a, 0.95).max(percentile(&mut b, 0.95)),
    })
}

/// Per-sample metrics over the foreground classes `1..K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub domain: String,
    pub content_seed: u64,
    pub dice: Vec<f64>,
    /// `None` marks an empty prediction or ground truth for that class.
    pub hd95: Vec<Option<f64>>,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
}

impl EvalRecord {
    pub fn new(index: usize, domain: &str, content_seed: u64, pred: &[u8], truth: &[u8], size: usize, num_classes: usize) -> Self {
        let classes = 1..num_classes as u8;
        let dice: Vec<f64> = classes.clone().map(|k| dice_score(pred, truth, k)).collect();
        let hd: Vec<Option<f64>> = classes
            .map(|k| hd95(pred, truth, size, k, HdConvention::Pooled))
            .collect();
        let valid: Vec<f64> = hd.iter().flatten().copied().collect();
        EvalRecord {
            index,
            domain: domain.to_string(),
            content_seed,
            mean_dice: dice.iter().sum::<f64>() / dice.len() as f64,
            mean_hd95: (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64),
            dice,
            hd95: hd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub mean_dice: f64,
    /// Mean over samples with a defined HD95.
    pub mean_hd95: Option<f64>,
    /// Per-class HD95 values left out because a mask was empty.
    pub hd95_sentinels: usize,
}

pub fn summarize(records: &[EvalRecord]) -> EvalSummary {
    let n = records.len();
    let hd: Vec<f64> = records.iter().filter_map(|r| r.mean_hd95).collect();
    EvalSummary {
        n,
        mean_dice: if n == 0 {
            0.0
        } else {
            records.iter().map(|r| r.mean_dice).sum::<f64>() / n as f64
        },
        mean_hd95: (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64),
        hd95_sentinels: records.iter().map(|r| r.hd95.iter().filter(|h| h.is_none()).count()).sum(),
    }
}

pub fn write_records_jsonl(mut w: impl Write, records: &[EvalRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// One row per record with per-class columns; empty cells mark sentinels.
pub fn write_records_csv(w: impl Write, records: &[EvalRecord], num_classes: usize) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["index".to_string(), "domain".into(), "content_seed".into()];
    for k in 1..num_classes {
        header.push(format!("dice_{k}"));
    }
    for k in 1..num_classes {
        header.push(format!("hd95_{k}"));
    }
    header.extend(["mean_dice".into(), "mean_hd95".into()]);
    out.write_record(&header)?;
    for r in records {
        let mut row = vec![r.index.to_string(), r.domain.clone(), r.content_seed.to_string()];
        row.extend(r.dice.iter().map(|d| d.to_string()));
        row.extend(r.hd95.iter().map(|h| h.map(|v| v.to_string()).unwrap_or_default()));
        row.push(r.mean_dice.to_string());
        row.push(r.mean_hd95.map(|v| v.to_string()).unwrap_or_default());
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Held-out accuracy of a multinomial logistic regression predicting the
/// domain label, trained on a stratified 70% split.
pub fn domain_probe(features: &[Vec<f64>], labels: &[usize], split_seed: u64) -> Result<f64> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(MetricsError::Shape);
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(MetricsError::Shape);
    }
    let mut by_domain: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_domain.entry(l).or_default().push(i);
    }
    if by_domain.len() < 2 {
        return Err(MetricsError::TooFewDomains(by_domain.len()));
    }
    for (&domain, idx) in &by_domain {
        if idx.len() < PROBE_MIN_PER_DOMAIN {
            return Err(MetricsError::TooFewSamples {
                domain,
                count: idx.len(),
                min: PROBE_MIN_PER_DOMAIN,
            });
        }
    }
    let largest = by_domain.values().map(Vec::len).max().unwrap_or(0);
    let smallest = by_domain.values().map(Vec::len).min().unwrap_or(0);
    if largest > 10 * smallest {
        return Err(MetricsError::Imbalanced { largest, smallest });
    }
    let classes: Vec<usize> = by_domain.keys().copied().collect();
    let class_of = |l: usize| classes.binary_search(&l).expect("known label");

    let mut rng = seed::rng_for(split_seed, "probe.split");
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in by_domain.values() {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        let cut = (idx.len() as f64 * 0.7).round() as usize;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }

    // Standardize with training statistics.
    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for &i in &train {
        mean.iter_mut().zip(&features[i]).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &i in &train {
        sd.iter_mut()
            .zip(&features[i])
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m) * (v - m));
    }
    sd.iter_mut()
        .for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-8));
    let design = |rows: &[usize]| {
        let data = rows
            .iter()
            .flat_map(|&i| features[i].iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s))
            .collect();
        Tensor::from_vec(data, &[rows.len(), dim]).expect("rectangular")
    };
    let xtr = design(&train);
    let xte = design(&test);
    let k = classes.len();
    let mut onehot = vec![0.0; train.len() * k];
    for (r, &i) in train.iter().enumerate() {
        onehot[r * k + class_of(labels[i])] = 1.0;
    }
    let ytr = Tensor::from_vec(onehot, &[train.len(), k]).expect("rectangular");

    let mut params = vec![Tensor::zeros(&[dim, k]), Tensor::zeros(&[k])];
    let mut state = AdamState::new(&params);
    let adam = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    let l2 = 1e-3;
    for _ in 0..300 {
        let tape = Tape::new();
        let w = tape.param(params[0].clone());
        let b = tape.param(params[1].clone());
        let x = tape.constant(xtr.clone());
        let y = tape.constant(ytr.clone());
        let logp = x.matmul(w).and_then(|z| z.add(b)).expect("shapes agree").softmax().log();
        let nll = logp.mul(y).expect("same shape").sum_all().scale(-1.0 / train.len() as f64);
        let reg = w.mul(w).expect("same shape").sum_all().scale(l2);
        let loss = nll.add(reg).expect("scalars");
        let mut g = loss.backward().expect("scalar loss");
        let grads = vec![g.take(w), g.take(b)];
        adam_step(&mut params, &grads, &mut state, &adam).expect("state matches");
    }
    let mut correct = 0;
    for (r, &i) in test.iter().enumerate() {
        let row = &xte.data()[r * dim..(r + 1) * dim];
        let mut best = (f64::NEG_INFINITY, 0);
        for c in 0..k {
            let s: f64 = params[1].data()[c]
                + row
                    .iter()
                    .enumerate()
                    .map(|(j, v)| v * params[0].data()[j * k + c])
                    .sum::<f64>();
            if s > best.0 {
                best = (s, c);
            }
        }
        correct += usize::from(best.1 == class_of(labels[i]));
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Top-two principal directions and the projected points.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2d {
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    pub points: Vec<(f64, f64)>,
}

/// PCA by power iteration with deflation on the centered covariance.
pub fn pca2d(features: &[Vec<f64>]) -> Result<Pca2d> {
    let n = features.len();
    if n < 3 {
        return Err(MetricsError::TooFewPoints(n));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(MetricsError::Shape);
    }
    let mut mean = vec![0.0; d];
    for f in features {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n as f64);
    }
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for x in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += x[i] * x[j] / (n - 1) as f64;
            }
        }
    }
    let matvec = |m: &[f64], v: &[f64]| -> Vec<f64> {
        (0..d).map(|i| (0..d).map(|j| m[i * d + j] * v[j]).sum()).collect()
    };
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        n
    };
    let mut comps: Vec<Vec<f64>> = Vec::new();
    let mut eig = [0.0; 2];
    for (c, e) in eig.iter_mut().enumerate() {
        // Deterministic start with no symmetry to get stuck on.
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64 + 1.0).sqrt() * 0.1 + c as f64 * (i % 2) as f64).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let mut w = matvec(&cov, &v);
            for p in &comps {
                let dot: f64 = w.iter().zip(p).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(p).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = normalize(&mut w);
            if norm == 0.0 {
                // Null space: any orthogonal direction will do.
                w = (0..d).map(|i| if i == c { 1.0 } else { 0.0 }).collect();
                for p in &comps {
                    let dot: f64 = w.iter().zip(p).map(|(a, b)| a * b).sum();
                    w.iter_mut().zip(p).for_each(|(a, b)| *a -= dot * b);
                }
                normalize(&mut w);
                v = w;
                lambda = 0.0;
                break;
            }
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            lambda = norm;
            if delta < 1e-13 {
                break;
            }
        }
        // Fix the sign so the largest-magnitude entry is positive.
        let (mut big, mut sign) = (0.0, 1.0);
        for &x in &v {
            if x.abs() > big {
                big = x.abs();
                sign = x.signum();
            }
        }
        v.iter_mut().for_each(|x| *x *= sign);
        *e = lambda;
        comps.push(v);
    }
    let points = centered
        .iter()
        .map(|x| {
            let p = |c: &Vec<f64>| x.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            (p(&comps[0]), p(&comps[1]))
        })
        .collect();
    let second = comps.pop().expect("two components");
    let first = comps.pop().expect("two components");
    Ok(Pca2d {
        components: [first, second],
        eigenvalues: eig,
        points,
    })
}

/// CSV with header `x,y,domain`.
pub fn write_pca_csv(w: impl Write, pca: &Pca2d, domains: &[String]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["x", "y", "domain"])?;
    for ((x, y), d) in pca.points.iter().zip(domains) {
        out.write_record([x.to_string(), y.to_string(), d.clone()])?;
    }
    out.flush()?;
    Ok(())
}

/// Mean and spread of a list of per-seed or per-case values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let m = if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
        };
        Stat { mean: m, std }
    }
}

#[cfg(test)]
mod tests;
