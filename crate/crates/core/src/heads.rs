//! Classifier heads and the loss zoo: plain/normalized/margin softmax
//! cross-entropy, the influence loss (cross-entropy of new embeddings through
//! a frozen old head), knowledge-distillation influence, the l2-feature
//! baseline, LwF pseudo-labels, and synthesized classifier weights.
//!
//! Geometry conventions: embeddings are rows [B x K]; head weights are
//! [K x N] with one class per column. NormSoftmax and CosineMargin normalize
//! both sides, so a logit is scale * cos(theta) between an embedding and a
//! class weight. The margin formula follows the large-margin-cosine form:
//! L = -log e^{s(cos(theta_y) - m)} / (e^{s(cos(theta_y) - m)} + sum_{j != y} e^{s cos(theta_j)}).

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layers::row_norm;
use crate::matrix::DenseMatrix;
use crate::model::EmbeddingModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum HeadVariant {
    Softmax,
    NormSoftmax { scale: f64 },
    CosineMargin { scale: f64, margin: f64 },
}

impl HeadVariant {
    pub fn validate(&self) -> Result<()> {
        match *self {
            HeadVariant::Softmax => Ok(()),
            HeadVariant::NormSoftmax { scale } => {
                if scale <= 0.0 {
                    return Err(Error::InvalidConfig(format!("head scale {scale} must be > 0")));
                }
                Ok(())
            }
            HeadVariant::CosineMargin { scale, margin } => {
                if scale <= 0.0 {
                    return Err(Error::InvalidConfig(format!("head scale {scale} must be > 0")));
                }
                if !(0.0..1.0).contains(&margin) {
                    return Err(Error::InvalidConfig(format!(
                        "head margin {margin} must be in [0, 1)"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Whether this head compares on the unit sphere (and so synthesized
    /// weights must be normalized too).
    pub fn normalizes(&self) -> bool {
        !matches!(self, HeadVariant::Softmax)
    }

    pub fn scale(&self) -> f64 {
        match *self {
            HeadVariant::Softmax => 1.0,
            HeadVariant::NormSoftmax { scale } => scale,
            HeadVariant::CosineMargin { scale, .. } => scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<S> {
    variant: HeadVariant,
    weights: DenseMatrix<S>,          // K x N
    bias: Option<DenseMatrix<S>>,     // 1 x N, Softmax only
    class_ids: Vec<i64>,              // column j classifies class_ids[j]
    col_index: HashMap<i64, usize>,
}

impl<S: Scalar> ClassifierHead<S> {
    pub fn init(
        variant: HeadVariant,
        embed_dim: usize,
        class_ids: Vec<i64>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        variant.validate()?;
        if class_ids.is_empty() {
            return Err(Error::InvalidConfig("head needs at least one class".into()));
        }
        let bound = (6.0 / embed_dim as f64).sqrt();
        let weights = DenseMatrix::from_fn(embed_dim, class_ids.len(), |_, _| {
            S::from_f64_lossy(rng.gen_range(-bound..bound))
        });
        let bias = matches!(variant, HeadVariant::Softmax)
            .then(|| DenseMatrix::zeros(1, class_ids.len()));
        Self::assemble(variant, weights, bias, class_ids)
    }

    pub fn from_parts(
        variant: HeadVariant,
        weights: DenseMatrix<S>,
        bias: Option<DenseMatrix<S>>,
        class_ids: Vec<i64>,
    ) -> Result<Self> {
        variant.validate()?;
        Self::assemble(variant, weights, bias, class_ids)
    }

    fn assemble(
        variant: HeadVariant,
        weights: DenseMatrix<S>,
        bias: Option<DenseMatrix<S>>,
        class_ids: Vec<i64>,
    ) -> Result<Self> {
        if weights.cols() != class_ids.len() {
            return Err(Error::ShapeMismatch {
                context: "head class columns",
                expected: format!("{} columns", class_ids.len()),
                actual: format!("{}", weights.cols()),
            });
        }
        if let Some(b) = &bias {
            if b.shape() != (1, weights.cols()) {
                return Err(Error::ShapeMismatch {
                    context: "head bias",
                    expected: format!("(1, {})", weights.cols()),
                    actual: format!("{:?}", b.shape()),
                });
            }
        }
        let mut col_index = HashMap::with_capacity(class_ids.len());
        for (j, &id) in class_ids.iter().enumerate() {
            if col_index.insert(id, j).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate head class id {id}")));
            }
        }
        Ok(Self {
            variant,
            weights,
            bias,
            class_ids,
            col_index,
        })
    }

    pub fn variant(&self) -> HeadVariant {
        self.variant
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn class_ids(&self) -> &[i64] {
        &self.class_ids
    }

    pub fn column_of(&self, class_id: i64) -> Option<usize> {
        self.col_index.get(&class_id).copied()
    }

    pub fn weights(&self) -> &DenseMatrix<S> {
        &self.weights
    }

    pub fn bias(&self) -> Option<&DenseMatrix<S>> {
        self.bias.as_ref()
    }

    pub(crate) fn weights_mut(&mut self) -> &mut DenseMatrix<S> {
        &mut self.weights
    }

    pub(crate) fn bias_mut(&mut self) -> Option<&mut DenseMatrix<S>> {
        self.bias.as_mut()
    }

    /// New head with extra class columns appended after the existing ones.
    /// `extra` must be sorted by strictly ascending class id.
    pub fn extended_with(&self, extra: &[(i64, Vec<S>)]) -> Result<Self> {
        let k = self.embed_dim();
        for pair in extra.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::InvalidConfig(
                    "synthesized classes must be in ascending class-id order".into(),
                ));
            }
        }
        let n = self.num_classes() + extra.len();
        let mut weights = DenseMatrix::zeros(k, n);
        for r in 0..k {
            for c in 0..self.num_classes() {
                weights.set(r, c, self.weights.get(r, c));
            }
        }
        let mut class_ids = self.class_ids.clone();
        for (offset, (id, col)) in extra.iter().enumerate() {
            if self.col_index.contains_key(id) {
                return Err(Error::InvalidConfig(format!(
                    "class {id} already has a column; cannot synthesize it"
                )));
            }
            if col.len() != k {
                return Err(Error::ShapeMismatch {
                    context: "synthesized weight column",
                    expected: format!("{k} entries"),
                    actual: format!("{}", col.len()),
                });
            }
            let c = self.num_classes() + offset;
            for (r, &v) in col.iter().enumerate() {
                weights.set(r, c, v);
            }
            class_ids.push(*id);
        }
        let bias = self.bias.as_ref().map(|b| {
            let mut nb = DenseMatrix::zeros(1, n);
            for c in 0..b.cols() {
                nb.set(0, c, b.get(0, c));
            }
            nb
        });
        Self::assemble(self.variant, weights, bias, class_ids)
    }
}

/// Intermediates captured by [`head_forward`] for the backward pass.
pub struct HeadCache<S> {
    emb: DenseMatrix<S>,
    norm_emb: Option<DenseMatrix<S>>,
    emb_norms: Option<Vec<S>>,
    norm_w: Option<DenseMatrix<S>>,
    w_norms: Option<Vec<S>>,
}

pub struct HeadGrads<S> {
    pub d_embeddings: DenseMatrix<S>,
    pub d_weights: DenseMatrix<S>,
    pub d_bias: Option<DenseMatrix<S>>,
}

/// Loss with gradients for a trainable head (primary objective).
pub struct HeadLoss<S> {
    pub loss: S,
    pub d_embeddings: DenseMatrix<S>,
    pub d_weights: DenseMatrix<S>,
    pub d_bias: Option<DenseMatrix<S>>,
}

/// Loss whose gradients touch only the embedding side; the head it was
/// computed through stays frozen.
pub struct EmbeddingLoss<S> {
    pub loss: S,
    pub d_embeddings: DenseMatrix<S>,
}

/// Logits for a batch. `targets` enables training mode: for CosineMargin the
/// margin is subtracted from each sample's target-class cosine. Inference
/// mode (None) never applies a margin.
pub fn head_forward<S: Scalar>(
    head: &ClassifierHead<S>,
    embeddings: &DenseMatrix<S>,
    targets: Option<&[usize]>,
) -> Result<(DenseMatrix<S>, HeadCache<S>)> {
    if embeddings.cols() != head.embed_dim() {
        return Err(Error::ShapeMismatch {
            context: "head_forward",
            expected: format!("{} embedding columns", head.embed_dim()),
            actual: format!("{}", embeddings.cols()),
        });
    }
    if let Some(t) = targets {
        if t.len() != embeddings.rows() {
            return Err(Error::ShapeMismatch {
                context: "head targets",
                expected: format!("{} labels", embeddings.rows()),
                actual: format!("{}", t.len()),
            });
        }
        for &label in t {
            if label >= head.num_classes() {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_classes: head.num_classes(),
                });
            }
        }
    }

    match head.variant {
        HeadVariant::Softmax => {
            let mut logits = embeddings.matmul(&head.weights)?;
            if let Some(b) = &head.bias {
                for r in 0..logits.rows() {
                    for (v, &bv) in logits.row_mut(r).iter_mut().zip(b.row(0)) {
                        *v += bv;
                    }
                }
            }
            Ok((
                logits,
                HeadCache {
                    emb: embeddings.clone(),
                    norm_emb: None,
                    emb_norms: None,
                    norm_w: None,
                    w_norms: None,
                },
            ))
        }
        HeadVariant::NormSoftmax { scale } | HeadVariant::CosineMargin { scale, .. } => {
            let (norm_emb, emb_norms) = normalize_rows(embeddings, "head embeddings")?;
            let (norm_w, w_norms) = normalize_cols(&head.weights, "head weights")?;
            let s = S::from_f64_lossy(scale);
            let mut logits = norm_emb.matmul(&norm_w)?; // cosines
            if let (HeadVariant::CosineMargin { margin, .. }, Some(t)) = (head.variant, targets) {
                let m = S::from_f64_lossy(margin);
                for (r, &label) in t.iter().enumerate() {
                    let v = logits.get(r, label);
                    logits.set(r, label, v - m);
                }
            }
            for v in logits.as_mut_slice() {
                *v = *v * s;
            }
            Ok((
                logits,
                HeadCache {
                    emb: embeddings.clone(),
                    norm_emb: Some(norm_emb),
                    emb_norms: Some(emb_norms),
                    norm_w: Some(norm_w),
                    w_norms: Some(w_norms),
                },
            ))
        }
    }
}

/// Convenience wrapper when only the logits are wanted.
pub fn head_logits<S: Scalar>(
    head: &ClassifierHead<S>,
    embeddings: &DenseMatrix<S>,
    targets: Option<&[usize]>,
) -> Result<DenseMatrix<S>> {
    Ok(head_forward(head, embeddings, targets)?.0)
}

/// Pulls d loss / d logits back to embeddings and head parameters. The
/// margin shift is additive, so it has no extra gradient term.
pub fn head_backward<S: Scalar>(
    head: &ClassifierHead<S>,
    cache: &HeadCache<S>,
    grad_logits: &DenseMatrix<S>,
) -> Result<HeadGrads<S>> {
    if grad_logits.shape() != (cache.emb.rows(), head.num_classes()) {
        return Err(Error::ShapeMismatch {
            context: "head_backward",
            expected: format!("({}, {})", cache.emb.rows(), head.num_classes()),
            actual: format!("{:?}", grad_logits.shape()),
        });
    }
    match head.variant {
        HeadVariant::Softmax => {
            let d_embeddings = grad_logits.matmul(&head.weights.transpose())?;
            let d_weights = cache.emb.transpose().matmul(grad_logits)?;
            let d_bias = head.bias.as_ref().map(|_| grad_logits.col_sums());
            Ok(HeadGrads {
                d_embeddings,
                d_weights,
                d_bias,
            })
        }
        HeadVariant::NormSoftmax { scale } | HeadVariant::CosineMargin { scale, .. } => {
            let s = S::from_f64_lossy(scale);
            let norm_emb = cache.norm_emb.as_ref().expect("norm cache");
            let emb_norms = cache.emb_norms.as_ref().expect("norm cache");
            let norm_w = cache.norm_w.as_ref().expect("norm cache");
            let w_norms = cache.w_norms.as_ref().expect("norm cache");

            // d/d(normalized emb) = s * G * normWᵀ, then through row norm
            let d_norm_emb = grad_logits.matmul(&norm_w.transpose())?.scaled(s);
            let mut d_embeddings = DenseMatrix::zeros(norm_emb.rows(), norm_emb.cols());
            for r in 0..norm_emb.rows() {
                let zh = norm_emb.row(r);
                let g = d_norm_emb.row(r);
                let mut dot = S::zero();
                for (&z, &gv) in zh.iter().zip(g) {
                    dot += z * gv;
                }
                let nrm = emb_norms[r];
                for c in 0..norm_emb.cols() {
                    d_embeddings.set(r, c, (g[c] - dot * zh[c]) / nrm);
                }
            }

            // d/d(normalized w) = s * normEᵀ * G, then through column norm
            let d_norm_w = norm_emb.transpose().matmul(grad_logits)?.scaled(s);
            let mut d_weights = DenseMatrix::zeros(norm_w.rows(), norm_w.cols());
            for j in 0..norm_w.cols() {
                let mut dot = S::zero();
                for r in 0..norm_w.rows() {
                    dot += norm_w.get(r, j) * d_norm_w.get(r, j);
                }
                let nrm = w_norms[j];
                for r in 0..norm_w.rows() {
                    let v = (d_norm_w.get(r, j) - dot * norm_w.get(r, j)) / nrm;
                    d_weights.set(r, j, v);
                }
            }
            Ok(HeadGrads {
                d_embeddings,
                d_weights,
                d_bias: None,
            })
        }
    }
}

/// Mean negative log-likelihood plus its logit gradient (softmax - onehot)/B.
pub fn cross_entropy<S: Scalar>(
    logits: &DenseMatrix<S>,
    labels: &[usize],
) -> Result<(S, DenseMatrix<S>)> {
    if labels.len() != logits.rows() {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy",
            expected: format!("{} labels", logits.rows()),
            actual: format!("{}", labels.len()),
        });
    }
    for &label in labels {
        if label >= logits.cols() {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: logits.cols(),
            });
        }
    }
    let log_probs = log_softmax(logits);
    let batch = S::from_f64_lossy(logits.rows() as f64);
    let mut loss = S::zero();
    let mut grad = DenseMatrix::zeros(logits.rows(), logits.cols());
    for (r, &label) in labels.iter().enumerate() {
        loss -= log_probs.get(r, label);
        for c in 0..logits.cols() {
            let p = log_probs.get(r, c).exp();
            let y = if c == label { S::one() } else { S::zero() };
            grad.set(r, c, (p - y) / batch);
        }
    }
    Ok((loss / batch, grad))
}

/// Cross-entropy against probability rows (soft targets); gradient
/// (softmax - target)/B.
pub fn soft_cross_entropy<S: Scalar>(
    logits: &DenseMatrix<S>,
    target_probs: &DenseMatrix<S>,
) -> Result<(S, DenseMatrix<S>)> {
    if logits.shape() != target_probs.shape() {
        return Err(Error::ShapeMismatch {
            context: "soft_cross_entropy",
            expected: format!("{:?}", logits.shape()),
            actual: format!("{:?}", target_probs.shape()),
        });
    }
    let log_probs = log_softmax(logits);
    let batch = S::from_f64_lossy(logits.rows() as f64);
    let mut loss = S::zero();
    let mut grad = DenseMatrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        for c in 0..logits.cols() {
            let t = target_probs.get(r, c);
            loss -= t * log_probs.get(r, c);
            grad.set(r, c, (log_probs.get(r, c).exp() - t) / batch);
        }
    }
    Ok((loss / batch, grad))
}

/// Full primary objective: train-mode logits, cross-entropy, gradients for
/// embeddings and head parameters.
pub fn head_cross_entropy<S: Scalar>(
    head: &ClassifierHead<S>,
    embeddings: &DenseMatrix<S>,
    labels: &[usize],
) -> Result<HeadLoss<S>> {
    let (logits, cache) = head_forward(head, embeddings, Some(labels))?;
    let (loss, d_logits) = cross_entropy(&logits, labels)?;
    let grads = head_backward(head, &cache, &d_logits)?;
    Ok(HeadLoss {
        loss,
        d_embeddings: grads.d_embeddings,
        d_weights: grads.d_weights,
        d_bias: grads.d_bias,
    })
}

/// Influence loss: cross-entropy of new embeddings through the frozen OLD
/// head. Labels are raw class ids resolved against the old head's class set.
/// Wider-than-old embeddings are truncated to the old dim (first K_old
/// coordinates); gradients flow only into those coordinates and never into
/// the old head.
pub fn influence_loss<S: Scalar>(
    new_embeddings: &DenseMatrix<S>,
    old_head: &ClassifierHead<S>,
    labels: &[i64],
) -> Result<EmbeddingLoss<S>> {
    if labels.len() != new_embeddings.rows() {
        return Err(Error::ShapeMismatch {
            context: "influence_loss",
            expected: format!("{} labels", new_embeddings.rows()),
            actual: format!("{}", labels.len()),
        });
    }
    let cols = resolve_labels(old_head, labels)?;
    let (trunc, wide) = truncate_to_head(new_embeddings, old_head)?;
    let (logits, cache) = head_forward(old_head, &trunc, Some(&cols))?;
    let (loss, d_logits) = cross_entropy(&logits, &cols)?;
    let grads = head_backward(old_head, &cache, &d_logits)?;
    Ok(EmbeddingLoss {
        loss,
        d_embeddings: scatter_if_wide(grads.d_embeddings, wide, new_embeddings.cols()),
    })
}

/// KD form of the influence loss: KL(softmax(old_logits/T) || softmax(new_logits/T)),
/// mean over the batch, old side detached. Both logit sets go through the
/// frozen old head; `new_embeddings` may be wider (truncated as above).
pub fn kd_influence_loss<S: Scalar>(
    new_embeddings: &DenseMatrix<S>,
    old_embeddings: &DenseMatrix<S>,
    old_head: &ClassifierHead<S>,
    temperature: f64,
) -> Result<EmbeddingLoss<S>> {
    if temperature <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "distillation temperature {temperature} must be > 0"
        )));
    }
    if new_embeddings.rows() != old_embeddings.rows() {
        return Err(Error::ShapeMismatch {
            context: "kd_influence_loss",
            expected: format!("{} aligned rows", new_embeddings.rows()),
            actual: format!("{}", old_embeddings.rows()),
        });
    }
    let t = S::from_f64_lossy(temperature);
    let old_logits = head_logits(old_head, old_embeddings, None)?;
    let (trunc, wide) = truncate_to_head(new_embeddings, old_head)?;
    let (new_logits, cache) = head_forward(old_head, &trunc, None)?;

    let log_p = log_softmax(&old_logits.map(|v| v / t));
    let log_q = log_softmax(&new_logits.map(|v| v / t));
    let batch = S::from_f64_lossy(new_logits.rows() as f64);
    let mut loss = S::zero();
    let mut d_logits = DenseMatrix::zeros(new_logits.rows(), new_logits.cols());
    for r in 0..new_logits.rows() {
        for c in 0..new_logits.cols() {
            let p = log_p.get(r, c).exp();
            if p > S::zero() {
                loss += p * (log_p.get(r, c) - log_q.get(r, c));
            }
            let q = log_q.get(r, c).exp();
            d_logits.set(r, c, (q - p) / (t * batch));
        }
    }
    let grads = head_backward(old_head, &cache, &d_logits)?;
    Ok(EmbeddingLoss {
        loss: loss / batch,
        d_embeddings: scatter_if_wide(grads.d_embeddings, wide, new_embeddings.cols()),
    })
}

/// Mean over the batch of half the squared embedding gap; the old side is
/// detached.
pub fn l2_feature_regularizer<S: Scalar>(
    new_embeddings: &DenseMatrix<S>,
    old_embeddings: &DenseMatrix<S>,
) -> Result<EmbeddingLoss<S>> {
    if new_embeddings.shape() != old_embeddings.shape() {
        return Err(Error::ShapeMismatch {
            context: "l2_feature_regularizer",
            expected: format!("{:?}", old_embeddings.shape()),
            actual: format!("{:?}", new_embeddings.shape()),
        });
    }
    let batch = S::from_f64_lossy(new_embeddings.rows() as f64);
    let diff = new_embeddings.sub(old_embeddings)?;
    let half = S::from_f64_lossy(0.5);
    let loss = diff.as_slice().iter().map(|&v| half * v * v).sum::<S>() / batch;
    Ok(EmbeddingLoss {
        loss,
        d_embeddings: diff.scaled(S::one() / batch),
    })
}

/// Old model + old head responses on new samples, as probability rows.
pub fn lwf_soft_labels<S: Scalar>(
    old_model: &EmbeddingModel<S>,
    old_head: &ClassifierHead<S>,
    inputs: &DenseMatrix<S>,
) -> Result<DenseMatrix<S>> {
    let emb = old_model.forward_infer(inputs)?;
    let logits = head_logits(old_head, &emb, None)?;
    Ok(log_softmax(&logits).map(|v| v.exp()))
}

/// LwF second term: soft cross-entropy between the frozen old head's response
/// to the NEW embeddings and precomputed pseudo-labels. Inference-mode logits
/// (soft targets have no single class to carry a margin).
pub fn lwf_pseudo_label_loss<S: Scalar>(
    new_embeddings: &DenseMatrix<S>,
    old_head: &ClassifierHead<S>,
    soft_labels: &DenseMatrix<S>,
) -> Result<EmbeddingLoss<S>> {
    let (trunc, wide) = truncate_to_head(new_embeddings, old_head)?;
    let (logits, cache) = head_forward(old_head, &trunc, None)?;
    let (loss, d_logits) = soft_cross_entropy(&logits, soft_labels)?;
    let grads = head_backward(old_head, &cache, &d_logits)?;
    Ok(EmbeddingLoss {
        loss,
        d_embeddings: scatter_if_wide(grads.d_embeddings, wide, new_embeddings.cols()),
    })
}

/// Synthesized classifier weight for one new class: mean old-model feature
/// over the class's samples, normalized when the head compares on the sphere.
pub fn synthesize_class_weights<S: Scalar>(
    old_model: &EmbeddingModel<S>,
    class_id: i64,
    class_inputs: &DenseMatrix<S>,
    normalize: bool,
) -> Result<Vec<S>> {
    if class_inputs.rows() == 0 {
        return Err(Error::EmptyClass { class_id });
    }
    let feats = old_model.forward_infer(class_inputs)?;
    let n = S::from_f64_lossy(feats.rows() as f64);
    let mut mean = vec![S::zero(); feats.cols()];
    for r in 0..feats.rows() {
        for (m, &v) in mean.iter_mut().zip(feats.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m = *m / n;
    }
    if normalize {
        let norm = row_norm(&mean);
        if norm <= S::eps_norm() {
            return Err(Error::DegenerateNorm {
                context: "synthesize_class_weights",
                norm: norm.to_f64_lossy(),
            });
        }
        for m in &mut mean {
            *m = *m / norm;
        }
    }
    Ok(mean)
}

/// Numerically stable row-wise log-softmax.
pub fn log_softmax<S: Scalar>(logits: &DenseMatrix<S>) -> DenseMatrix<S> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter() {
            sum += (*v - max).exp();
        }
        let log_z = max + sum.ln();
        for v in row.iter_mut() {
            *v = *v - log_z;
        }
    }
    out
}

fn normalize_rows<S: Scalar>(
    m: &DenseMatrix<S>,
    context: &'static str,
) -> Result<(DenseMatrix<S>, Vec<S>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let norm = row_norm(m.row(r));
        if norm <= S::eps_norm() {
            return Err(Error::DegenerateNorm {
                context,
                norm: norm.to_f64_lossy(),
            });
        }
        for v in out.row_mut(r) {
            *v = *v / norm;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

fn normalize_cols<S: Scalar>(
    m: &DenseMatrix<S>,
    context: &'static str,
) -> Result<(DenseMatrix<S>, Vec<S>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.cols());
    for c in 0..m.cols() {
        let mut sq = S::zero();
        for r in 0..m.rows() {
            let v = m.get(r, c);
            sq += v * v;
        }
        let norm = sq.sqrt();
        if norm <= S::eps_norm() {
            return Err(Error::DegenerateNorm {
                context,
                norm: norm.to_f64_lossy(),
            });
        }
        for r in 0..m.rows() {
            out.set(r, c, m.get(r, c) / norm);
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

fn resolve_labels<S: Scalar>(head: &ClassifierHead<S>, labels: &[i64]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&id| {
            head.column_of(id)
                .ok_or(Error::UnresolvableClass { class_id: id })
        })
        .collect()
}

/// First-K_old slice of wider embeddings (raw coordinates; the head applies
/// its own normalization). Returns (batch, was_truncated).
fn truncate_to_head<S: Scalar>(
    embeddings: &DenseMatrix<S>,
    head: &ClassifierHead<S>,
) -> Result<(DenseMatrix<S>, bool)> {
    let k_old = head.embed_dim();
    if embeddings.cols() == k_old {
        return Ok((embeddings.clone(), false));
    }
    if embeddings.cols() < k_old {
        return Err(Error::ShapeMismatch {
            context: "influence truncation",
            expected: format!("embedding dim >= {k_old}"),
            actual: format!("{}", embeddings.cols()),
        });
    }
    let mut out = DenseMatrix::zeros(embeddings.rows(), k_old);
    for r in 0..embeddings.rows() {
        for c in 0..k_old {
            out.set(r, c, embeddings.get(r, c));
        }
    }
    Ok((out, true))
}

/// Embeds truncated-coordinate gradients back into the full width (zeros for
/// coordinates the old head never saw).
fn scatter_if_wide<S: Scalar>(grad: DenseMatrix<S>, wide: bool, full_cols: usize) -> DenseMatrix<S> {
    if !wide {
        return grad;
    }
    let mut out = DenseMatrix::zeros(grad.rows(), full_cols);
    for r in 0..grad.rows() {
        for c in 0..grad.cols() {
            out.set(r, c, grad.get(r, c));
        }
    }
    out
}
