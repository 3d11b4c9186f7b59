//! Shared oracle machinery for the integration suites: central
//! finite-difference gradient checks over randomized instances.

use bctlab::heads::{
    cross_entropy, head_cross_entropy, influence_loss, kd_influence_loss,
    l2_feature_regularizer, lwf_pseudo_label_loss, soft_cross_entropy, ClassifierHead,
    HeadVariant,
};
use bctlab::layers::{
    affine_backward, affine_forward, l2norm_backward, l2norm_forward, relu_backward,
    relu_forward, LayerSpec,
};
use bctlab::model::EmbeddingModel;
use bctlab::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of a scalar function over matrix entries.
pub fn fd_matrix(f: &mut dyn FnMut(&Mat) -> f64, x: &Mat, h: f64) -> Mat {
    let mut grad = Mat::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let mut plus = x.clone();
            plus.set(r, c, x.get(r, c) + h);
            let mut minus = x.clone();
            minus.set(r, c, x.get(r, c) - h);
            grad.set(r, c, (f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
    grad
}

/// Central finite differences over a flat parameter slice.
pub fn fd_vec(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        grad.push((f(&plus) - f(&minus)) / (2.0 * h));
    }
    grad
}

/// Worst relative error between analytic and numeric gradients:
/// gap / max(|a|, |n|, 1e-4). The 1e-4 floor compares near-zero entries at
/// a fixed absolute scale; central differences of a saturated softmax only
/// resolve the loss to one float quantum (~2e-10 per step here), which would
/// otherwise read as spurious "relative" error on entries that are truly
/// zero. Real gradient entries sit at 1e-1..1e1, so a wrong backward term
/// still blows far past any bound.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let gap = (a - n).abs();
        let rel = gap / a.abs().max(n.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}

/// A matrix with entries in [-1, 1] whose rows all clear a norm floor, so
/// normalized heads never see degenerate rows during perturbation.
pub fn safe_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    loop {
        let m = Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
        let ok = (0..rows).all(|r| m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() > 0.3);
        if ok {
            return m;
        }
    }
}

/// Names and worst observed relative errors for every backward pass, each
/// over `instances` randomized cases.
pub fn gradient_suite(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut results = Vec::new();
    results.push(("affine_backward", affine_suite(instances, seed)));
    results.push(("relu_backward", relu_suite(instances, seed + 1)));
    results.push(("l2norm_backward", l2norm_suite(instances, seed + 2)));
    results.push(("cross_entropy", ce_suite(instances, seed + 3)));
    results.push(("soft_cross_entropy", soft_ce_suite(instances, seed + 4)));
    results.push((
        "softmax_head_cross_entropy",
        head_suite(instances, seed + 5, HeadKind::Softmax),
    ));
    results.push((
        "norm_softmax_head_cross_entropy",
        head_suite(instances, seed + 6, HeadKind::NormSoftmax),
    ));
    results.push((
        "cosine_margin_head_cross_entropy",
        head_suite(instances, seed + 7, HeadKind::CosineMargin),
    ));
    results.push(("influence_loss", influence_suite(instances, seed + 8)));
    results.push(("kd_influence_loss", kd_suite(instances, seed + 9)));
    results.push(("l2_feature_regularizer", l2reg_suite(instances, seed + 10)));
    results.push(("lwf_pseudo_label_loss", lwf_suite(instances, seed + 11)));
    results.push(("model_backward", model_suite(instances, seed + 12)));
    results.push((
        "combined_objective",
        combined_suite(instances, seed + 13),
    ));
    results
}

enum HeadKind {
    Softmax,
    NormSoftmax,
    CosineMargin,
}

fn affine_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (b, i, o) = (
            rng.gen_range(1..5),
            rng.gen_range(1..6),
            rng.gen_range(1..6),
        );
        let x = Mat::from_fn(b, i, |_, _| rng.gen_range(-1.0..1.0));
        let w = Mat::from_fn(i, o, |_, _| rng.gen_range(-1.0..1.0));
        let has_bias = rng.gen_bool(0.5);
        let bias = has_bias.then(|| Mat::from_fn(1, o, |_, _| rng.gen_range(-1.0..1.0)));
        // random linear functional of the output keeps the scalar loss generic
        let probe = Mat::from_fn(b, o, |_, _| rng.gen_range(-1.0..1.0));
        let loss = |out: &Mat| -> f64 {
            out.as_slice()
                .iter()
                .zip(probe.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };

        let (gx, gw, gb) = affine_backward(&probe, &x, &w, has_bias).unwrap();

        let nx = fd_matrix(
            &mut |m| loss(&affine_forward(m, &w, bias.as_ref()).unwrap()),
            &x,
            FD_STEP,
        );
        worst = worst.max(max_rel_err(gx.as_slice(), nx.as_slice()));
        let nw = fd_matrix(
            &mut |m| loss(&affine_forward(&x, m, bias.as_ref()).unwrap()),
            &w,
            FD_STEP,
        );
        worst = worst.max(max_rel_err(gw.as_slice(), nw.as_slice()));
        if let Some(bm) = &bias {
            let nb = fd_matrix(
                &mut |m| loss(&affine_forward(&x, &w, Some(m)).unwrap()),
                bm,
                FD_STEP,
            );
            worst = worst.max(max_rel_err(gb.as_ref().unwrap().as_slice(), nb.as_slice()));
        }
    }
    worst
}

fn relu_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (b, d) = (rng.gen_range(1..5), rng.gen_range(1..8));
        // keep inputs clear of the kink at 0 so central differences are valid
        let x = Mat::from_fn(b, d, |_, _| {
            let mag = rng.gen_range(0.001..2.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        });
        let probe = Mat::from_fn(b, d, |_, _| rng.gen_range(-1.0..1.0));
        let loss = |out: &Mat| -> f64 {
            out.as_slice()
                .iter()
                .zip(probe.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let analytic = relu_backward(&probe, &x).unwrap();
        let numeric = fd_matrix(&mut |m| loss(&relu_forward(m)), &x, FD_STEP);
        worst = worst.max(max_rel_err(analytic.as_slice(), numeric.as_slice()));
    }
    worst
}

fn l2norm_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (b, d) = (rng.gen_range(1..5), rng.gen_range(2..8));
        let x = safe_rows(&mut rng, b, d);
        let probe = Mat::from_fn(b, d, |_, _| rng.gen_range(-1.0..1.0));
        let loss = |out: &Mat| -> f64 {
            out.as_slice()
                .iter()
                .zip(probe.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let analytic = l2norm_backward(&probe, &x).unwrap();
        let numeric = fd_matrix(&mut |m| loss(&l2norm_forward(m).unwrap()), &x, FD_STEP);
        worst = worst.max(max_rel_err(analytic.as_slice(), numeric.as_slice()));
    }
    worst
}

fn ce_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (b, n) = (rng.gen_range(1..5), rng.gen_range(2..6));
        let logits = Mat::from_fn(b, n, |_, _| rng.gen_range(-3.0..3.0));
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
        let (_, analytic) = cross_entropy(&logits, &labels).unwrap();
        let numeric = fd_matrix(
            &mut |m| cross_entropy(m, &labels).unwrap().0,
            &logits,
            FD_STEP,
        );
        worst = worst.max(max_rel_err(analytic.as_slice(), numeric.as_slice()));
    }
    worst
}

fn soft_ce_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (b, n) = (rng.gen_range(1..5), rng.gen_range(2..6));
        let logits = Mat::from_fn(b, n, |_, _| rng.gen_range(-3.0..3.0));
        // random probability rows
        let mut probs = Mat::from_fn(b, n, |_, _| rng.gen_range(0.05..1.0));
        for r in 0..b {
            let sum: f64 = probs.row(r).iter().sum();
            for v in probs.row_mut(r) {
                *v /= sum;
            }
        }
        let (_, analytic) = soft_cross_entropy(&logits, &probs).unwrap();
        let numeric = fd_matrix(
            &mut |m| soft_cross_entropy(m, &probs).unwrap().0,
            &logits,
            FD_STEP,
        );
        worst = worst.max(max_rel_err(analytic.as_slice(), numeric.as_slice()));
    }
    worst
}

fn random_head(
    rng: &mut ChaCha8Rng,
    kind: &HeadKind,
    k: usize,
    ids: Vec<i64>,
) -> ClassifierHead<f64> {
    let n = ids.len();
    let variant = match kind {
        HeadKind::Softmax => HeadVariant::Softmax,
        HeadKind::NormSoftmax => HeadVariant::NormSoftmax { scale: rng.gen_range(4.0..20.0) },
        HeadKind::CosineMargin => HeadVariant::CosineMargin {
            scale: rng.gen_range(4.0..20.0),
            margin: rng.gen_range(0.0..0.5),
        },
    };
    let weights = safe_rows(rng, n, k).transpose(); // columns clear the norm floor
    let bias = matches!(variant, HeadVariant::Softmax)
        .then(|| Mat::from_fn(1, n, |_, _| rng.gen_range(-0.5..0.5)));
    ClassifierHead::from_parts(variant, weights, bias, ids).unwrap()
}

fn head_suite(instances: usize, seed: u64, kind: HeadKind) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (b, k, n) = (
            rng.gen_range(1..4),
            rng.gen_range(2..6),
            rng.gen_range(2..5),
        );
        let head = random_head(&mut rng, &kind, k, (0..n as i64).collect());
        let emb = safe_rows(&mut rng, b, k);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();

        let out = head_cross_entropy(&head, &emb, &labels).unwrap();

        let loss_with_emb = |m: &Mat| head_cross_entropy(&head, m, &labels).unwrap().loss;
        let ne = fd_matrix(&mut |m| loss_with_emb(m), &emb, FD_STEP);
        worst = worst.max(max_rel_err(out.d_embeddings.as_slice(), ne.as_slice()));

        let rebuild = |w: &Mat, bias: Option<&Mat>| {
            ClassifierHead::from_parts(head.variant(), w.clone(), bias.cloned(), head.class_ids().to_vec())
                .unwrap()
        };
        let nw = fd_matrix(
            &mut |w| {
                head_cross_entropy(&rebuild(w, head.bias()), &emb, &labels)
                    .unwrap()
                    .loss
            },
            head.weights(),
            FD_STEP,
        );
        worst = worst.max(max_rel_err(out.d_weights.as_slice(), nw.as_slice()));

        if let Some(bias) = head.bias() {
            let nb = fd_matrix(
                &mut |bm| {
                    head_cross_entropy(&rebuild(head.weights(), Some(bm)), &emb, &labels)
                        .unwrap()
                        .loss
                },
                bias,
                FD_STEP,
            );
            worst = worst.max(max_rel_err(
                out.d_bias.as_ref().unwrap().as_slice(),
                nb.as_slice(),
            ));
        }
    }
    worst
}

fn influence_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (b, k, n) = (
            rng.gen_range(1..4),
            rng.gen_range(2..5),
            rng.gen_range(2..5),
        );
        let kind = if i % 2 == 0 {
            HeadKind::CosineMargin
        } else {
            HeadKind::NormSoftmax
        };
        let head = random_head(&mut rng, &kind, k, (0..n as i64).collect());
        // every other instance uses wider-than-head embeddings (truncation path)
        let k_new = if i % 3 == 0 { k + rng.gen_range(1..3) } else { k };
        let emb = safe_rows(&mut rng, b, k_new);
        let labels: Vec<i64> = (0..b).map(|_| rng.gen_range(0..n as i64)).collect();

        let out = influence_loss(&emb, &head, &labels).unwrap();
        let numeric = fd_matrix(
            &mut |m| influence_loss(m, &head, &labels).unwrap().loss,
            &emb,
            FD_STEP,
        );
        worst = worst.max(max_rel_err(out.d_embeddings.as_slice(), numeric.as_slice()));
    }
    worst
}

fn kd_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (b, k, n) = (
            rng.gen_range(1..4),
            rng.gen_range(2..5),
            rng.gen_range(2..5),
        );
        let head = random_head(&mut rng, &HeadKind::NormSoftmax, k, (0..n as i64).collect());
        let k_new = if i % 3 == 0 { k + rng.gen_range(1..3) } else { k };
        let new = safe_rows(&mut rng, b, k_new);
        let old = safe_rows(&mut rng, b, k);
        let t = rng.gen_range(1.0..20.0);

        let out = kd_influence_loss(&new, &old, &head, t).unwrap();
        let numeric = fd_matrix(
            &mut |m| kd_influence_loss(m, &old, &head, t).unwrap().loss,
            &new,
            FD_STEP,
        );
        worst = worst.max(max_rel_err(out.d_embeddings.as_slice(), numeric.as_slice()));
    }
    worst
}

fn l2reg_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (b, k) = (rng.gen_range(1..5), rng.gen_range(1..6));
        let new = Mat::from_fn(b, k, |_, _| rng.gen_range(-2.0..2.0));
        let old = Mat::from_fn(b, k, |_, _| rng.gen_range(-2.0..2.0));
        let out = l2_feature_regularizer(&new, &old).unwrap();
        let numeric = fd_matrix(
            &mut |m| l2_feature_regularizer(m, &old).unwrap().loss,
            &new,
            FD_STEP,
        );
        worst = worst.max(max_rel_err(out.d_embeddings.as_slice(), numeric.as_slice()));
    }
    worst
}

fn lwf_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (b, k, n) = (
            rng.gen_range(1..4),
            rng.gen_range(2..5),
            rng.gen_range(2..5),
        );
        let head = random_head(&mut rng, &HeadKind::NormSoftmax, k, (0..n as i64).collect());
        let emb = safe_rows(&mut rng, b, k);
        let mut probs = Mat::from_fn(b, n, |_, _| rng.gen_range(0.05..1.0));
        for r in 0..b {
            let sum: f64 = probs.row(r).iter().sum();
            for v in probs.row_mut(r) {
                *v /= sum;
            }
        }
        let out = lwf_pseudo_label_loss(&emb, &head, &probs).unwrap();
        let numeric = fd_matrix(
            &mut |m| lwf_pseudo_label_loss(m, &head, &probs).unwrap().loss,
            &emb,
            FD_STEP,
        );
        worst = worst.max(max_rel_err(out.d_embeddings.as_slice(), numeric.as_slice()));
    }
    worst
}

/// End-to-end: MLP forward -> margin-head cross-entropy, perturbing the flat
/// model parameter vector. ReLU kinks are dodged by rejecting instances
/// whose hidden pre-activations sit within 1e-4 of zero.
fn model_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let in_dim = rng.gen_range(2..5);
        let hidden = rng.gen_range(2..6);
        let out_dim = rng.gen_range(2..5);
        let n = rng.gen_range(2..5);
        let specs = vec![
            LayerSpec::Affine { in_dim, out_dim: hidden, bias: true },
            LayerSpec::Relu,
            LayerSpec::Affine { in_dim: hidden, out_dim, bias: false },
        ];
        let model = EmbeddingModel::<f64>::init(&specs, &mut rng).unwrap();
        let head = random_head(&mut rng, &HeadKind::CosineMargin, out_dim, (0..n as i64).collect());
        let b = rng.gen_range(1..4);
        let x = Mat::from_fn(b, in_dim, |_, _| rng.gen_range(-1.0..1.0));
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();

        // reject kink-adjacent pre-activations and degenerate embeddings
        let pre = affine_forward(
            &x,
            &Mat::from_vec(in_dim, hidden, model.flat_params()[..in_dim * hidden].to_vec()).unwrap(),
            Some(&Mat::from_vec(1, hidden, model.flat_params()[in_dim * hidden..in_dim * hidden + hidden].to_vec()).unwrap()),
        )
        .unwrap();
        if pre.as_slice().iter().any(|v| v.abs() < 1e-4) {
            continue;
        }
        let emb = model.forward_infer(&x).unwrap();
        if (0..b).any(|r| emb.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() < 0.05) {
            continue;
        }
        done += 1;

        let (emb, cache) = model.forward(&x).unwrap();
        let out = head_cross_entropy(&head, &emb, &labels).unwrap();
        let grads = model.backward(&cache, &out.d_embeddings).unwrap();
        let mut analytic = Vec::new();
        for g in grads.per_layer.iter().flatten() {
            analytic.extend_from_slice(g.0.as_slice());
            if let Some(gb) = &g.1 {
                analytic.extend_from_slice(gb.as_slice());
            }
        }

        let flat = model.flat_params();
        let numeric = fd_vec(
            &mut |p| {
                let m = EmbeddingModel::from_flat_params(&specs, p).unwrap();
                let e = m.forward_infer(&x).unwrap();
                head_cross_entropy(&head, &e, &labels).unwrap().loss
            },
            &flat,
            FD_STEP,
        );
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

/// The trainer's combined objective: primary head CE plus lambda times the
/// influence loss, gradient taken at the embedding level.
fn combined_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (b, k, n) = (
            rng.gen_range(1..4),
            rng.gen_range(2..5),
            rng.gen_range(2..4),
        );
        let new_head = random_head(&mut rng, &HeadKind::CosineMargin, k, (0..n as i64).collect());
        let old_head = random_head(&mut rng, &HeadKind::CosineMargin, k, (0..n as i64).collect());
        let emb = safe_rows(&mut rng, b, k);
        let cols: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
        let ids: Vec<i64> = cols.iter().map(|&c| c as i64).collect();
        let lambda = [0.0, 0.5, 1.0, 4.0][rng.gen_range(0..4)];

        let primary = head_cross_entropy(&new_head, &emb, &cols).unwrap();
        let secondary = influence_loss(&emb, &old_head, &ids).unwrap();
        let mut analytic = primary.d_embeddings.clone();
        analytic
            .add_scaled_in_place(&secondary.d_embeddings, lambda)
            .unwrap();

        let numeric = fd_matrix(
            &mut |m| {
                head_cross_entropy(&new_head, m, &cols).unwrap().loss
                    + lambda * influence_loss(m, &old_head, &ids).unwrap().loss
            },
            &emb,
            FD_STEP,
        );
        worst = worst.max(max_rel_err(analytic.as_slice(), numeric.as_slice()));
    }
    worst
}
