//! Central finite-difference checks of every analytic gradient: the concept
//! loss, both image losses, and the pixel embedder (through rectification
//! and norm projection). Sampled points are kept away from hinge and
//! rectifier kinks so the two-sided difference is valid.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use ovparse_core::embedding::{
    concept_loss, image_loss_margin, image_loss_softmax, score, PixelEmbedder, ScoreKind,
};

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;
/// Minimum distance from any kink for sampled points.
const KINK_GAP: f64 = 5e-3;

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = analytic
        .iter()
        .chain(numeric)
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    // The floor keeps finite-difference noise from failing exact-zero
    // gradients.
    diff / scale.max(1e-6)
}

fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let hi = f(&probe);
        probe[i] = x[i] - STEP;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * STEP);
    }
    grad
}

fn random_vec(rng: &mut ChaCha8Rng, dim: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(lo..hi)).collect()
}

/// Nonnegative pair with every coordinate difference away from the
/// rectifier kink of the hyper score.
fn hyper_safe_pair(rng: &mut ChaCha8Rng, dim: usize) -> (Vec<f64>, Vec<f64>) {
    loop {
        let x = random_vec(rng, dim, 0.0, 2.0);
        let y = random_vec(rng, dim, 0.0, 2.0);
        if x.iter().zip(&y).all(|(a, b)| (a - b).abs() > KINK_GAP) {
            return (x, y);
        }
    }
}

#[test]
fn concept_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut checked = 0;
    while checked < 100 {
        let dim = rng.random_range(2..8);
        let (u, v) = hyper_safe_pair(&mut rng, dim);
        let positive = rng.random_bool(0.5);
        let alpha = 1.0;
        if !positive {
            // Stay away from the hinge kink at alpha + S = 0.
            let s = score(&u, &v, ScoreKind::hyper2()).unwrap();
            if (alpha + s).abs() < KINK_GAP {
                continue;
            }
        }
        let out = concept_loss(&u, &v, positive, alpha, 2.0).unwrap();
        let num_u = central_diff(
            |x| concept_loss(x, &v, positive, alpha, 2.0).unwrap().loss,
            &u,
        );
        let num_v = central_diff(
            |y| concept_loss(&u, y, positive, alpha, 2.0).unwrap().loss,
            &v,
        );
        assert!(rel_err(&out.grad_u, &num_u) <= TOL, "grad_u off at point {checked}");
        assert!(rel_err(&out.grad_v, &num_v) <= TOL, "grad_v off at point {checked}");
        checked += 1;
    }
}

fn image_loss_case(rng: &mut ChaCha8Rng, kind: ScoreKind) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let dim = rng.random_range(2..6);
    loop {
        let pixel = random_vec(rng, dim, 0.1, 3.0);
        let truth = random_vec(rng, dim, 0.1, 3.0);
        let negatives: Vec<Vec<f64>> = (0..rng.random_range(1..4))
            .map(|_| random_vec(rng, dim, 0.1, 3.0))
            .collect();
        if let ScoreKind::Hyper { .. } = kind {
            let clear = std::iter::once(&truth)
                .chain(&negatives)
                .all(|c| c.iter().zip(&pixel).all(|(a, b)| (a - b).abs() > KINK_GAP));
            if !clear {
                continue;
            }
        }
        return (pixel, truth, negatives);
    }
}

#[test]
fn softmax_image_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for kind in [ScoreKind::l2(), ScoreKind::Cosine, ScoreKind::hyper2()] {
        for point in 0..100 {
            let (pixel, truth, negatives) = image_loss_case(&mut rng, kind);
            let refs: Vec<&[f64]> = negatives.iter().map(|n| n.as_slice()).collect();
            let out = image_loss_softmax(&pixel, &truth, &refs, kind).unwrap();
            let num_pixel = central_diff(
                |p| {
                    let refs: Vec<&[f64]> = negatives.iter().map(|n| n.as_slice()).collect();
                    image_loss_softmax(p, &truth, &refs, kind).unwrap().loss
                },
                &pixel,
            );
            let num_true = central_diff(
                |t| {
                    let refs: Vec<&[f64]> = negatives.iter().map(|n| n.as_slice()).collect();
                    image_loss_softmax(&pixel, t, &refs, kind).unwrap().loss
                },
                &truth,
            );
            assert!(
                rel_err(&out.grad_pixel, &num_pixel) <= TOL,
                "{kind:?} pixel grad off at point {point}"
            );
            assert!(
                rel_err(&out.grad_true, &num_true) <= TOL,
                "{kind:?} true grad off at point {point}"
            );
            for (j, neg) in negatives.iter().enumerate() {
                let num_neg = central_diff(
                    |n| {
                        let mut shadow = negatives.clone();
                        shadow[j] = n.to_vec();
                        let refs: Vec<&[f64]> = shadow.iter().map(|n| n.as_slice()).collect();
                        image_loss_softmax(&pixel, &truth, &refs, kind).unwrap().loss
                    },
                    neg,
                );
                assert!(
                    rel_err(&out.grad_negatives[j], &num_neg) <= TOL,
                    "{kind:?} negative {j} grad off at point {point}"
                );
            }
        }
    }
}

#[test]
fn margin_image_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let beta = 1.0;
    for kind in [ScoreKind::l2(), ScoreKind::Cosine, ScoreKind::hyper2()] {
        let mut checked = 0;
        while checked < 100 {
            let (pixel, truth, negatives) = image_loss_case(&mut rng, kind);
            let refs: Vec<&[f64]> = negatives.iter().map(|n| n.as_slice()).collect();
            // Keep each hinge comfortably away from its kink.
            let s0 = score(&truth, &pixel, kind).unwrap();
            let clear = negatives.iter().all(|n| {
                let s = score(n, &pixel, kind).unwrap();
                (beta - s0 + s).abs() > KINK_GAP
            });
            if !clear {
                continue;
            }
            let out = image_loss_margin(&pixel, &truth, &refs, beta, kind).unwrap();
            let num_pixel = central_diff(
                |p| {
                    let refs: Vec<&[f64]> = negatives.iter().map(|n| n.as_slice()).collect();
                    image_loss_margin(p, &truth, &refs, beta, kind).unwrap().loss
                },
                &pixel,
            );
            let num_true = central_diff(
                |t| {
                    let refs: Vec<&[f64]> = negatives.iter().map(|n| n.as_slice()).collect();
                    image_loss_margin(&pixel, t, &refs, beta, kind).unwrap().loss
                },
                &truth,
            );
            assert!(rel_err(&out.grad_pixel, &num_pixel) <= TOL);
            assert!(rel_err(&out.grad_true, &num_true) <= TOL);
            for (j, neg) in negatives.iter().enumerate() {
                let num_neg = central_diff(
                    |n| {
                        let mut shadow = negatives.clone();
                        shadow[j] = n.to_vec();
                        let refs: Vec<&[f64]> = shadow.iter().map(|n| n.as_slice()).collect();
                        image_loss_margin(&pixel, &truth, &refs, beta, kind).unwrap().loss
                    },
                    neg,
                );
                assert!(rel_err(&out.grad_negatives[j], &num_neg) <= TOL);
            }
            checked += 1;
        }
    }
}

#[test]
fn embedder_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut checked = 0;
    while checked < 100 {
        let d = rng.random_range(3..7);
        let n = rng.random_range(2..6);
        let embedder = PixelEmbedder::random_init(d, n, 30.0, &mut rng);
        let feature = random_vec(&mut rng, d, -1.0, 1.0);
        // Keep all pre-activations away from the rectifier kink.
        let Ok(trace) = embedder.embed_traced(&feature) else {
            continue;
        };
        let pre_ok = (0..n).all(|j| {
            let z: f64 = (0..d).map(|i| embedder.weights()[i * n + j] * feature[i]).sum();
            z.abs() > KINK_GAP
        });
        // With a single active coordinate the projection output is constant
        // in the weights; require two so the gradient is informative.
        let active = trace.rectified.iter().filter(|&&v| v > 0.0).count();
        if !pre_ok || active < 2 {
            continue;
        }
        // Scalar functional: dot of the embedding with a fixed probe.
        let probe = random_vec(&mut rng, n, -1.0, 1.0);
        let grad_out = probe.clone();
        let analytic = embedder.backprop(&feature, &trace, &grad_out);
        let numeric = central_diff(
            |w| {
                let e = PixelEmbedder::new(d, n, w.to_vec(), 30.0);
                match e.embed_feature(&feature) {
                    Ok(out) => out.iter().zip(&probe).map(|(o, p)| o * p).sum(),
                    Err(_) => f64::NAN,
                }
            },
            embedder.weights(),
        );
        assert!(
            rel_err(&analytic, &numeric) <= TOL,
            "embedder grad off at point {checked}"
        );
        checked += 1;
    }
}
