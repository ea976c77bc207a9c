use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snr_core::diffcore::Tensor;
use snr_core::evalkit::{
    cmc_rank_k, evaluate_retrieval, gaussian_skl, mean_average_precision, pairwise_distances,
    rank_gallery, symmetric_feature_divergence, DIVERGENCE_EPS,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random instance with coarse distances so ties are common.
fn instance(r: &mut ChaCha8Rng, nq: usize, ng: usize) -> (Tensor, Vec<usize>, Vec<usize>) {
    let d = Tensor::from_fn(&[nq, ng], |_| r.gen_range(0..6) as f64 / 5.0);
    let classes = r.gen_range(2..5);
    let q = (0..nq).map(|_| r.gen_range(0..classes)).collect();
    let g = (0..ng).map(|_| r.gen_range(0..classes)).collect();
    (d, q, g)
}

/// Position of gallery item `j` in query `q`'s ranking, by counting the
/// items that sort before it.
fn position(d: &Tensor, q: usize, j: usize) -> usize {
    let row = d.row(q);
    (0..row.len())
        .filter(|&i| row[i] < row[j] || (row[i] == row[j] && i < j))
        .count()
}

fn brute_ap(d: &Tensor, q: usize, ql: &[usize], gl: &[usize]) -> Option<f64> {
    let rel: Vec<usize> = (0..gl.len()).filter(|&j| gl[j] == ql[q]).collect();
    if rel.is_empty() {
        return None;
    }
    let mut ap = 0.0;
    for &j in &rel {
        let p = position(d, q, j);
        let above = rel.iter().filter(|&&i| position(d, q, i) <= p).count();
        ap += above as f64 / (p + 1) as f64;
    }
    Some(ap / rel.len() as f64)
}

fn brute_cmc(d: &Tensor, ql: &[usize], gl: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    let mut valid = 0;
    for q in 0..ql.len() {
        let best = (0..gl.len())
            .filter(|&j| gl[j] == ql[q])
            .map(|j| position(d, q, j))
            .min();
        if let Some(b) = best {
            valid += 1;
            if b < k {
                hits += 1;
            }
        }
    }
    hits as f64 / valid as f64
}

#[test]
fn map_and_cmc_match_brute_force() {
    let mut r = rng(3);
    for _ in 0..60 {
        let (nq, ng) = (r.gen_range(1..20), r.gen_range(2..15));
        let (d, ql, gl) = instance(&mut r, nq, ng);
        let rankings = rank_gallery(&d, &ql, &gl, None).unwrap();
        let aps: Vec<f64> = (0..nq).filter_map(|q| brute_ap(&d, q, &ql, &gl)).collect();
        if aps.is_empty() {
            assert!(mean_average_precision(&rankings).is_err());
            continue;
        }
        let want = aps.iter().sum::<f64>() / aps.len() as f64;
        assert!((mean_average_precision(&rankings).unwrap() - want).abs() <= 1e-9);
        for k in [1, 2, 5, 10, 20] {
            let got = cmc_rank_k(&rankings, k).unwrap();
            assert!((got - brute_cmc(&d, &ql, &gl, k)).abs() <= 1e-9);
        }
    }
}

#[test]
fn rankings_are_sorted_with_index_ties() {
    let d = Tensor::from_rows(&[vec![0.3, 0.1, 0.3, 0.1]]).unwrap();
    let r = &rank_gallery(&d, &[0], &[0, 1, 0, 1], None).unwrap()[0];
    assert_eq!(r.order, vec![1, 3, 0, 2]);
    assert!(r.distances.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(r.relevant, vec![false, false, true, true]);
}

#[test]
fn same_sample_excluded() {
    let feats = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]]).unwrap();
    let labels = [0, 0, 1];
    let exclude: Vec<Option<usize>> = (0..3).map(Some).collect();
    let report = evaluate_retrieval(
        &feats,
        &labels,
        &feats,
        &labels,
        Some(&exclude),
        String::new(),
    )
    .unwrap();
    // the third query has no other sample of its identity and is skipped
    assert_eq!(report.map, 1.0);
    assert_eq!(report.rank1(), 1.0);
}

#[test]
fn cmc_monotone_and_complete() {
    let mut r = rng(8);
    for _ in 0..20 {
        let (d, ql, gl) = instance(&mut r, 10, 12);
        let rankings = rank_gallery(&d, &ql, &gl, None).unwrap();
        if mean_average_precision(&rankings).is_err() {
            continue;
        }
        let curve: Vec<f64> = (1..=12)
            .map(|k| cmc_rank_k(&rankings, k).unwrap())
            .collect();
        assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(curve[11], 1.0);
    }
}

#[test]
fn pairwise_matches_double_loop() {
    let mut r = rng(1);
    let q = Tensor::randn(&[3, 4], 1.0, &mut r);
    let g = Tensor::randn(&[5, 4], 1.0, &mut r);
    let d = pairwise_distances(&q, &g).unwrap();
    for i in 0..3 {
        for j in 0..5 {
            let (a, b) = (q.row(i), g.row(j));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((d.row(i)[j] - (1.0 - dot / (na * nb)) / 2.0).abs() < 1e-12);
        }
    }
    let anti = Tensor::from_rows(&[vec![-2.0, 0.0]]).unwrap();
    let one = Tensor::from_rows(&[vec![3.0, 0.0]]).unwrap();
    assert_eq!(pairwise_distances(&anti, &one).unwrap().data(), &[1.0]);
}

#[test]
fn random_embeddings_score_near_prevalence() {
    let mut r = rng(12);
    let q = Tensor::randn(&[100, 16], 1.0, &mut r);
    let g = Tensor::randn(&[500, 16], 1.0, &mut r);
    let ql: Vec<usize> = (0..100).map(|_| r.gen_range(0..5)).collect();
    let gl: Vec<usize> = (0..500).map(|_| r.gen_range(0..5)).collect();
    let report = evaluate_retrieval(&q, &ql, &g, &gl, None, String::new()).unwrap();
    let prevalence = 0.2;
    assert!((report.map - prevalence).abs() < 0.05, "{}", report.map);
}

#[test]
fn skl_closed_form_values() {
    assert!((gaussian_skl(0.0, 1.0, 1.0, 1.0) - 0.5).abs() < 1e-9);
    // two-point samples with exact mean and population variance
    let a = Tensor::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
    let d = symmetric_feature_divergence(&a, &b).unwrap();
    assert!((d.mean - 0.5 / (1.0 + DIVERGENCE_EPS)).abs() < 1e-12);
    let same = symmetric_feature_divergence(&a, &a).unwrap();
    assert_eq!(same.mean, 0.0);
    assert!(symmetric_feature_divergence(&a.sample(0), &b).is_err());
}

fn quadrature_kl(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    let pdf = |x: f64, m: f64, s: f64| {
        (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    };
    let (lo, hi, n) = (-30.0, 30.0, 200_000);
    let h = (hi - lo) / n as f64;
    (0..n)
        .map(|i| {
            let x = lo + (i as f64 + 0.5) * h;
            let p = pdf(x, m1, s1);
            if p > 0.0 {
                p * (p / pdf(x, m2, s2)).ln() * h
            } else {
                0.0
            }
        })
        .sum()
}

#[test]
fn skl_matches_quadrature() {
    let closed = gaussian_skl(0.0, 1.0, 0.0, 4.0);
    let numeric = 0.5 * (quadrature_kl(0.0, 1.0, 0.0, 2.0) + quadrature_kl(0.0, 2.0, 0.0, 1.0));
    assert!((closed - numeric).abs() < 1e-3, "{closed} vs {numeric}");
    let closed = gaussian_skl(0.5, 0.7, -0.2, 1.9);
    let numeric = 0.5
        * (quadrature_kl(0.5, 0.7f64.sqrt(), -0.2, 1.9f64.sqrt())
            + quadrature_kl(-0.2, 1.9f64.sqrt(), 0.5, 0.7f64.sqrt()));
    assert!((closed - numeric).abs() < 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn divergence_symmetric_and_non_negative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[7, 4], 1.0, &mut r);
        let b = Tensor::randn(&[5, 4], 2.0, &mut r).map(|v| v + 0.5);
        let ab = symmetric_feature_divergence(&a, &b).unwrap();
        let ba = symmetric_feature_divergence(&b, &a).unwrap();
        prop_assert_eq!(ab.mean, ba.mean);
        prop_assert!(ab.per_channel.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn metrics_ignore_gallery_relabeling(seed in any::<u64>()) {
        let mut r = rng(seed);
        let d = Tensor::from_fn(&[4, 9], |_| r.gen_range(0.0..1.0));
        let ql: Vec<usize> = (0..4).map(|_| r.gen_range(0..3)).collect();
        let gl: Vec<usize> = (0..9).map(|_| r.gen_range(0..3)).collect();
        let mut perm: Vec<usize> = (0..9).collect();
        for i in (1..9).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let d2 = Tensor::from_fn(&[4, 9], |i| d.row(i / 9)[perm[i % 9]]);
        let gl2: Vec<usize> = perm.iter().map(|&j| gl[j]).collect();
        let (a, b) = (rank_gallery(&d, &ql, &gl, None).unwrap(), rank_gallery(&d2, &ql, &gl2, None).unwrap());
        match (mean_average_precision(&a), mean_average_precision(&b)) {
            (Ok(x), Ok(y)) => prop_assert!((x - y).abs() < 1e-12),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false),
        }
    }
}
