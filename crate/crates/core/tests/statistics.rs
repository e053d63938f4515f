//! Monte-Carlo checks against closed-form or independently constructed
//! expectations.

use ns3l_core::data::{gen_blobs, gen_toy_1d, simplex_vertices, ToyBias};
use ns3l_core::diffcore::{argmax, Tape, Tensor};
use ns3l_core::mixmatch::{augment, guess_label, sample_mixup_lambda, sharpen, MixMatchConfig};
use ns3l_core::model::{self, init_params, MlpSpec};
use ns3l_core::negselect::{furthest_class_mask, oracle_mask, uniform_mask};
use ns3l_core::rng::{seeded, stream};
use ns3l_core::train::evaluate;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};

fn within_binomial(count: usize, n: usize, p: f64) -> bool {
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - n as f64 * p).abs() <= 3.0 * sigma
}

#[test]
fn uniform_negatives_hit_each_class_p_over_k() {
    let (rows, k, p) = (100_000, 5, 2);
    let mask = uniform_mask(rows, k, p, &mut seeded(1)).unwrap();
    for r in 0..rows {
        assert_eq!(mask.row(r).iter().filter(|&&m| m).count(), p);
    }
    for c in 0..k {
        let count = (0..rows).filter(|&r| mask.is_negative(r, c)).count();
        assert!(within_binomial(count, rows, p as f64 / k as f64), "class {c}: {count}");
    }
}

#[test]
fn oracle_negatives_avoid_truth_and_spread_over_wrong_classes() {
    let (rows, k, p) = (100_000, 6, 2);
    let mut rng = seeded(2);
    let truth: Vec<usize> = (0..rows).map(|_| rng.random_range(0..k)).collect();
    let mask = oracle_mask(&truth, k, p, &mut seeded(3)).unwrap();
    let mut hits = vec![0usize; k];
    let mut eligible = vec![0usize; k];
    for (r, &t) in truth.iter().enumerate() {
        assert!(!mask.is_negative(r, t));
        for c in 0..k {
            if c != t {
                eligible[c] += 1;
                hits[c] += mask.is_negative(r, c) as usize;
            }
        }
    }
    for c in 0..k {
        assert!(within_binomial(hits[c], eligible[c], p as f64 / (k - 1) as f64), "class {c}");
    }
}

#[test]
fn furthest_class_matches_exhaustive_scan() {
    let mut rng = seeded(4);
    let (k, d) = (4, 3);
    let lx = Tensor::matrix(12, d, (0..12 * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let ly: Vec<usize> = (0..12).map(|i| i % k).collect();
    let xu = Tensor::matrix(50, d, (0..50 * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let mask = furthest_class_mask(&xu, &lx, &ly, k).unwrap();
    for (r, x) in xu.row_iter().enumerate() {
        // distance to a class = distance to its closest labeled point
        let mut best = vec![f64::INFINITY; k];
        for (row, &c) in lx.row_iter().zip(&ly) {
            let dist: f64 = row.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
            best[c] = best[c].min(dist);
        }
        let far = (0..k).fold(0, |acc, c| if best[c] > best[acc] { c } else { acc });
        let chosen: Vec<usize> = (0..k).filter(|&c| mask.is_negative(r, c)).collect();
        assert_eq!(chosen, vec![far]);
    }
}

#[test]
fn mixup_weight_matches_direct_beta_construction() {
    let alpha = 0.75;
    let n = 1_000_000;
    let mut a = seeded(5);
    let ours: Vec<f64> = (0..n).map(|_| sample_mixup_lambda(alpha, &mut a).unwrap()).collect();
    assert!(ours.iter().all(|&l| l >= 0.5));

    let beta = Beta::new(alpha, alpha).unwrap();
    let mut b = seeded(6);
    let direct: Vec<f64> = (0..n)
        .map(|_| {
            let l: f64 = beta.sample(&mut b);
            l.max(1.0 - l)
        })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    let (m1, m2) = (mean(&ours), mean(&direct));
    let se = ((var(&ours, m1) + var(&direct, m2)) / n as f64).sqrt();
    assert!((m1 - m2).abs() < 4.0 * se, "{m1} vs {m2}");
}

#[test]
fn augmentation_noise_is_centred() {
    let n = 100_000;
    let sigma = 0.3;
    let x = Tensor::zeros(&[n, 1]);
    let out = augment(&x, sigma, &mut seeded(7)).unwrap();
    let mean = out.sum() / n as f64;
    assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt(), "{mean}");

    let small = Tensor::zeros(&[4, 2]);
    let a = augment(&small, sigma, &mut stream(0, 1)).unwrap();
    let b = augment(&small, sigma, &mut stream(0, 2)).unwrap();
    assert_ne!(a, b);
}

#[test]
fn guess_label_averages_replayed_passes() {
    let params = init_params(&MlpSpec::new(vec![2, 6, 3], 8).unwrap());
    let xu = Tensor::from_rows(&[vec![0.3, -0.4], vec![1.1, 0.2]]).unwrap();
    let cfg = MixMatchConfig {
        augmentations: 2,
        noise_sigma: 0.2,
        temperature: 0.5,
        ..MixMatchConfig::default()
    };
    let mut tape = Tape::new();
    let pv = params.as_constants(&mut tape);
    let g = guess_label(&mut tape, &pv, &xu, &cfg, 0.1, &mut seeded(9)).unwrap();
    let got = tape.value(g).clone();

    // replay: same stream, two noisy copies drawn in order
    let mut rng = seeded(9);
    let normal = Normal::new(0.0, 0.2).unwrap();
    let mut acc = [0.0; 6];
    for _ in 0..2 {
        let noisy: Vec<f64> = xu.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
        let p = model::probs(&params, &Tensor::matrix(2, 2, noisy).unwrap(), 0.1).unwrap();
        for (a, v) in acc.iter_mut().zip(p.data()) {
            *a += v / 2.0;
        }
    }
    for r in 0..2 {
        let want = sharpen(&acc[r * 3..r * 3 + 3], 0.5);
        for (c, w) in want.iter().enumerate() {
            assert!((got.get(r, c) - w).abs() < 1e-12);
        }
    }
}

#[test]
fn unrelated_predictor_errs_at_one_minus_one_over_k() {
    let (n, k) = (20_000, 10);
    let params = init_params(&MlpSpec::new(vec![4, 8, k], 10).unwrap());
    let mut rng = seeded(11);
    let x = Tensor::matrix(n, 4, (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let err = evaluate(&params, &x, &y, 0.1).unwrap();
    let sigma = (0.9 * 0.1 / n as f64).sqrt();
    assert!((err - 0.9).abs() < 3.0 * sigma, "{err}");
}

#[test]
fn unbiased_toy_labels_are_uniform_per_side() {
    let toy = gen_toy_1d(20_000, 10, ToyBias { bias: 0.0, offset: 0.0 }, &mut seeded(12)).unwrap();
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
    for (x, &y) in toy.labeled.x.data().iter().zip(&toy.labeled.y) {
        if y == 1 {
            s1 += x;
            n1 += 1.0;
        } else {
            s0 += x;
            n0 += 1.0;
        }
    }
    // U(-1, 0) and U(0, 1): mean ∓0.5, std 1/√12
    let tol = 3.0 / 12f64.sqrt();
    assert!((s1 / n1 + 0.5).abs() < tol / n1.sqrt());
    assert!((s0 / n0 - 0.5).abs() < tol / n0.sqrt());
}

#[test]
fn tight_blobs_are_separable_by_nearest_centroid() {
    let ds = gen_blobs(5, 40, 6, 1e-3, &mut seeded(13)).unwrap();
    let centres = simplex_vertices(5, 6).unwrap();
    for (x, &y) in ds.x.row_iter().zip(&ds.y) {
        let d: Vec<f64> = centres
            .iter()
            .map(|c| -c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .collect();
        assert_eq!(argmax(&d), y);
    }
}
