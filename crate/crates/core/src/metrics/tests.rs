use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;

fn square(size: usize, r0: usize, c0: usize, side: usize) -> Vec<u8> {
    let mut m = vec![0u8; size * size];
    for r in r0..r0 + side {
        for c in c0..c0 + side {
            m[r * size + c] = 1;
        }
    }
    m
}

fn random_mask(rng: &mut impl Rng, size: usize, k: u8) -> Vec<u8> {
    // Blocky masks so boundaries are non-trivial.
    let mut m = vec![0u8; size * size];
    for _ in 0..rng.random_range(1..5) {
        let (r0, c0) = (rng.random_range(0..size), rng.random_range(0..size));
        let (h, w) = (rng.random_range(1..size / 2), rng.random_range(1..size / 2));
        let class = rng.random_range(1..k);
        for r in r0..(r0 + h).min(size) {
            for c in c0..(c0 + w).min(size) {
                m[r * size + c] = class;
            }
        }
    }
    m
}

/// Dice by explicit set construction.
fn dice_oracle(p: &[u8], g: &[u8], k: u8) -> f64 {
    let ps: Vec<usize> = (0..p.len()).filter(|&i| p[i] == k).collect();
    let gs: Vec<usize> = (0..g.len()).filter(|&i| g[i] == k).collect();
    if ps.is_empty() && gs.is_empty() {
        return 1.0;
    }
    let inter = ps.iter().filter(|i| gs.contains(i)).count();
    2.0 * inter as f64 / (ps.len() + gs.len()) as f64
}

/// HD95 straight from the definition: every boundary pixel against every
/// other boundary pixel, pooled, sorted, interpolated.
fn hd95_oracle(p: &[u8], g: &[u8], size: usize, k: u8) -> Option<f64> {
    let is_boundary = |m: &[u8], r: i64, c: i64| {
        let inside = |r: i64, c: i64| r >= 0 && c >= 0 && r < size as i64 && c < size as i64;
        if m[(r * size as i64 + c) as usize] != k {
            return false;
        }
        [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| {
            let (rr, cc) = (r + dr, c + dc);
            !inside(rr, cc) || m[(rr * size as i64 + cc) as usize] != k
        })
    };
    let pts = |m: &[u8]| {
        let mut v = Vec::new();
        for r in 0..size as i64 {
            for c in 0..size as i64 {
                if is_boundary(m, r, c) {
                    v.push((r as f64, c as f64));
                }
            }
        }
        v
    };
    let (bp, bg) = (pts(p), pts(g));
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let mut all = Vec::new();
    for (a, b) in [(&bp, &bg), (&bg, &bp)] {
        for x in a.iter() {
            let mut best = f64::MAX;
            for y in b.iter() {
                best = best.min(((x.0 - y.0).powi(2) + (x.1 - y.1).powi(2)).sqrt());
            }
            all.push(best);
        }
    }
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (all.len() as f64 - 1.0);
    let i = pos as usize;
    let frac = pos - i as f64;
    let next = all[(i + 1).min(all.len() - 1)];
    Some(all[i] * (1.0 - frac) + next * frac)
}

#[test]
fn dice_reference_cases() {
    let a = square(8, 2, 2, 2);
    assert_eq!(dice_score(&a, &a, 1), 1.0);
    assert_eq!(dice_score(&a, &square(8, 5, 5, 2), 1), 0.0);
    assert_eq!(dice_score(&a, &square(8, 2, 3, 2), 1), 0.5);
    let empty = vec![0u8; 64];
    assert_eq!(dice_score(&empty, &empty, 1), 1.0);
    assert_eq!(dice_score(&a, &empty, 1), 0.0);
    assert_eq!(dice_score(&empty, &a, 1), 0.0);
}

#[test]
fn hd95_reference_cases() {
    let a = square(16, 3, 3, 5);
    assert_eq!(hd95(&a, &a, 16, 1, HdConvention::Pooled), Some(0.0));
    let mut p = vec![0u8; 64];
    let mut g = vec![0u8; 64];
    p[2 * 8 + 1] = 1;
    g[2 * 8 + 6] = 1;
    assert_eq!(hd95(&p, &g, 8, 1, HdConvention::Pooled), Some(5.0));
    assert_eq!(hd95(&p, &vec![0u8; 64], 8, 1, HdConvention::Pooled), None);
}

#[test]
fn metrics_match_brute_force_oracles_on_random_masks() {
    let mut rng = crate::seed::rng(1, &[]);
    for _ in 0..50 {
        let p = random_mask(&mut rng, 32, 4);
        let g = random_mask(&mut rng, 32, 4);
        for k in 0..4u8 {
            assert!((dice_score(&p, &g, k) - dice_oracle(&p, &g, k)).abs() < 1e-9);
            match (hd95(&p, &g, 32, k, HdConvention::Pooled), hd95_oracle(&p, &g, 32, k)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "{a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
        }
    }
}

#[test]
fn directed_convention_is_at_least_as_large_as_pooled_for_nested_squares() {
    let p = square(32, 4, 4, 20);
    let g = square(32, 10, 10, 6);
    let pooled = hd95(&p, &g, 32, 1, HdConvention::Pooled).unwrap();
    let directed = hd95(&p, &g, 32, 1, HdConvention::MaxOfDirected).unwrap();
    assert!(directed >= pooled);
}

#[test]
fn percentile_interpolates_linearly() {
    let mut v = vec![4.0, 1.0, 3.0, 2.0];
    assert!((percentile(&mut v, 0.5) - 2.5).abs() < 1e-15);
    assert_eq!(percentile(&mut v, 1.0), 4.0);
    assert_eq!(percentile(&mut [7.0], 0.95), 7.0);
}

#[test]
fn eval_record_and_summary() {
    let truth = square(16, 2, 2, 6);
    let pred = square(16, 3, 2, 6);
    let r = EvalRecord::new(0, "src", 9, &pred, &truth, 16, 3);
    assert_eq!(r.dice.len(), 2);
    // Class 2 absent from both masks.
    assert_eq!(r.dice[1], 1.0);
    assert_eq!(r.hd95[1], None);
    assert!((r.mean_dice - (r.dice[0] + 1.0) / 2.0).abs() < 1e-15);
    let s = summarize(&[r.clone(), r.clone()]);
    assert_eq!(s.n, 2);
    assert_eq!(s.hd95_sentinels, 2);
    assert_eq!(s.mean_hd95, r.mean_hd95);

    let mut jsonl = Vec::new();
    write_records_jsonl(&mut jsonl, &[r.clone()]).unwrap();
    let back: EvalRecord = serde_json::from_slice(jsonl.split(|&b| b == b'\n').next().unwrap()).unwrap();
    assert_eq!(back, r);
    let mut csv_out = Vec::new();
    write_records_csv(&mut csv_out, &[r], 3).unwrap();
    let text = String::from_utf8(csv_out).unwrap();
    assert!(text.starts_with("index,domain,content_seed,dice_1,dice_2,hd95_1,hd95_2,mean_dice,mean_hd95\n"));
}

fn gaussian_features(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect())
        .collect()
}

#[test]
fn probe_separates_one_hot_domains() {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for l in 0..3 {
        for i in 0..50 {
            let mut f = vec![0.0; 6];
            f[l] = 1.0;
            f[3 + i % 3] = 0.1;
            feats.push(f);
            labels.push(l);
        }
    }
    assert!(domain_probe(&feats, &labels, 1).unwrap() >= 0.99);
}

#[test]
fn probe_on_shuffled_labels_is_near_chance() {
    let mut accs = Vec::new();
    for s in 0..5 {
        let mut rng = crate::seed::rng(s, &[]);
        let feats = gaussian_features(&mut rng, 200, 16);
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        accs.push(domain_probe(&feats, &labels, s).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.07, "{accs:?}");
}

#[test]
fn probe_input_guards() {
    let feats = vec![vec![0.0; 2]; 100];
    assert!(matches!(
        domain_probe(&feats, &vec![0; 100], 0),
        Err(MetricsError::TooFewDomains(1))
    ));
    let labels: Vec<usize> = (0..100).map(|i| usize::from(i < 20)).collect();
    assert!(matches!(
        domain_probe(&feats, &labels, 0),
        Err(MetricsError::TooFewSamples { domain: 1, count: 20, .. })
    ));
    let feats = vec![vec![0.0; 2]; 490];
    let labels: Vec<usize> = (0..490).map(|i| usize::from(i < 44)).collect();
    assert!(matches!(
        domain_probe(&feats, &labels, 0),
        Err(MetricsError::Imbalanced { .. })
    ));
}

#[test]
fn pca_rank_one_data_has_no_second_component_variance() {
    let feats: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
    let p = pca2d(&feats).unwrap();
    assert!(p.eigenvalues[1].abs() < 1e-9);
    let var2 = p.points.iter().map(|q| q.1 * q.1).sum::<f64>() / 19.0;
    assert!(var2 < 1e-9);
}

#[test]
fn pca_matches_dense_eigensolver() {
    let mut rng = crate::seed::rng(3, &[]);
    let feats = gaussian_features(&mut rng, 50, 8);
    // Stretch a few axes so the spectrum is well separated.
    let feats: Vec<Vec<f64>> = feats
        .into_iter()
        .map(|f| f.iter().enumerate().map(|(i, v)| v * (1.0 + i as f64)).collect())
        .collect();
    let p = pca2d(&feats).unwrap();
    let n = feats.len();
    let mean: Vec<f64> = (0..8).map(|j| feats.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
    let m = nalgebra::DMatrix::from_fn(n, 8, |i, j| feats[i][j] - mean[j]);
    let cov = m.transpose() * &m / (n as f64 - 1.0);
    let mut eig: Vec<f64> = nalgebra::SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for c in 0..2 {
        let var = p.points.iter().map(|q| if c == 0 { q.0 * q.0 } else { q.1 * q.1 }).sum::<f64>() / (n as f64 - 1.0);
        assert!((var - eig[c]).abs() < 1e-6, "component {c}: {var} vs {}", eig[c]);
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    assert!((dot(&p.components[0], &p.components[0]) - 1.0).abs() < 1e-8);
    assert!((dot(&p.components[1], &p.components[1]) - 1.0).abs() < 1e-8);
    assert!(dot(&p.components[0], &p.components[1]).abs() < 1e-8);
    assert_eq!(pca2d(&feats).unwrap(), p);
    let mut out = Vec::new();
    write_pca_csv(&mut out, &p, &vec!["a".to_string(); n]).unwrap();
    assert!(String::from_utf8(out).unwrap().starts_with("x,y,domain\n"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dice_and_hd95_are_symmetric(s in any::<u64>()) {
        let mut rng = crate::seed::rng(s, &[]);
        let p = random_mask(&mut rng, 24, 3);
        let g = random_mask(&mut rng, 24, 3);
        for k in 1..3 {
            prop_assert_eq!(dice_score(&p, &g, k), dice_score(&g, &p, k));
            prop_assert_eq!(hd95(&p, &g, 24, k, HdConvention::Pooled), hd95(&g, &p, 24, k, HdConvention::Pooled));
            if p.contains(&k) {
                prop_assert_eq!(hd95(&p, &p, 24, k, HdConvention::Pooled), Some(0.0));
            }
        }
    }

    #[test]
    fn metrics_are_translation_invariant(r0 in 2usize..8, c0 in 2usize..8, dr in 0usize..6, dc in 0usize..6,
                                         side in 2usize..6, off in 0usize..4) {
        let size = 32;
        let p = square(size, r0, c0, side);
        let g = square(size, r0 + off, c0, side + 1);
        let p2 = square(size, r0 + dr, c0 + dc, side);
        let g2 = square(size, r0 + off + dr, c0 + dc, side + 1);
        prop_assert_eq!(dice_score(&p, &g, 1), dice_score(&p2, &g2, 1));
        prop_assert_eq!(hd95(&p, &g, size, 1, HdConvention::Pooled), hd95(&p2, &g2, size, 1, HdConvention::Pooled));
    }
}
