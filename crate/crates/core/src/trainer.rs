//! Training orchestration: one entry point covers plain models, the
//! feature-l2 and pseudo-label baselines, and the influence-loss variants
//! that keep a new embedding model usable against an old model's gallery.

use crate::datagen::{inputs_matrix, Dataset, LabeledSample};
use crate::error::{Error, Result};
use crate::gallery::Distance;
use crate::heads::{
    head_cross_entropy, influence_loss, kd_influence_loss, l2_feature_regularizer,
    lwf_pseudo_label_loss, lwf_soft_labels, synthesize_class_weights, ClassifierHead,
    HeadVariant,
};
use crate::layers::{l2norm_forward, validate_chain, LayerSpec};
use crate::matrix::DenseMatrix;
use crate::model::EmbeddingModel;
use crate::optim::{sgd_step, SgdConfig};
use crate::scalar::Scalar;
use crate::store::{FeatureRecord, FeatureStore};
use crate::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Which old model the influence loss is taken against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TBct {
    /// The old classifier exactly as trained.
    Old,
    /// The old classifier extended with synthesized weights for classes it
    /// never saw.
    NewSynth,
    /// Distillation from the old model's soft predictions for unseen classes.
    NewKd,
}

/// Second training term coupling the new model to the old one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BctMode {
    None,
    /// Pull new embeddings toward the old ones in squared l2.
    L2Feature,
    /// Classify new embeddings with the frozen old head.
    Influence { t_bct: TBct },
    /// Soft cross-entropy against the old model's predicted distribution.
    Lwf,
}

/// Complete description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    pub version_tag: String,
    pub model_arch: Vec<LayerSpec>,
    pub head: HeadVariant,
    /// Share of training identities to use; subsets nest across fractions.
    pub data_fraction: f64,
    pub bct_mode: BctMode,
    /// Reference to the predecessor checkpoint (tag or path); required
    /// whenever `bct_mode` is not `None`.
    pub old_checkpoint: Option<String>,
    /// Weight on the second term.
    pub lambda: f64,
    pub sgd: SgdConfig,
    /// Clamp the embedding at zero (appends a final rectifier).
    pub relu_on_embedding: bool,
    pub embed_dim: usize,
    /// Geometry the embeddings are consumed under; cosine means extracted
    /// features are l2-normalized.
    pub distance: Distance,
    /// Distillation temperature; defaults to the old head's logit scale.
    pub kd_temperature: Option<f64>,
}

impl TrainRecipe {
    /// Architecture actually instantiated, with the optional final rectifier.
    pub fn resolved_arch(&self) -> Vec<LayerSpec> {
        let mut specs = self.model_arch.clone();
        if self.relu_on_embedding {
            specs.push(LayerSpec::Relu);
        }
        specs
    }

    pub fn validate(&self) -> Result<()> {
        if self.version_tag.is_empty() {
            return Err(Error::InvalidConfig("version_tag must not be empty".into()));
        }
        let (_, out_dim) = validate_chain(&self.resolved_arch())?;
        if out_dim != self.embed_dim {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} but the architecture ends at {out_dim}",
                self.embed_dim
            )));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::BadFraction(self.data_fraction));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!("lambda {} must be >= 0", self.lambda)));
        }
        self.head.validate()?;
        self.sgd.validate()?;
        if let Some(t) = self.kd_temperature {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::InvalidConfig(format!("kd_temperature {t} must be > 0")));
            }
        }
        if self.bct_mode != BctMode::None && self.old_checkpoint.is_none() {
            return Err(Error::InvalidConfig(
                "this bct_mode needs an old_checkpoint reference".into(),
            ));
        }
        Ok(())
    }
}

/// Loss summary for one pass over the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// primary + lambda * secondary.
    pub total: f64,
    /// Mean classification loss per sample.
    pub primary: f64,
    /// Mean second-term loss per sample it applies to (0 when unused).
    pub secondary: f64,
}

/// A finished training run: parameters plus everything needed to rebuild
/// the model and head exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version_tag: String,
    pub recipe: TrainRecipe,
    /// Architecture as instantiated (rectifier already appended).
    pub layer_specs: Vec<LayerSpec>,
    pub head_class_ids: Vec<i64>,
    pub epoch_logs: Vec<EpochLog>,
    pub model_params: Vec<f64>,
    pub head_weights: Vec<f64>,
    pub head_bias: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version_tag: String,
    recipe: TrainRecipe,
    layer_specs: Vec<LayerSpec>,
    head_class_ids: Vec<i64>,
    epoch_logs: Vec<EpochLog>,
    model_param_count: usize,
    has_head_bias: bool,
    blob_len: usize,
    blob_sha256: String,
}

impl Checkpoint {
    pub fn embed_dim(&self) -> usize {
        self.recipe.embed_dim
    }

    pub fn model<S: Scalar>(&self) -> Result<EmbeddingModel<S>> {
        let params: Vec<S> = self.model_params.iter().map(|&v| S::from_f64_lossy(v)).collect();
        EmbeddingModel::from_flat_params(&self.layer_specs, &params)
    }

    pub fn head<S: Scalar>(&self) -> Result<ClassifierHead<S>> {
        let n = self.head_class_ids.len();
        let weights = DenseMatrix::from_vec(
            self.recipe.embed_dim,
            n,
            self.head_weights.iter().map(|&v| S::from_f64_lossy(v)).collect(),
        )?;
        let bias = self
            .head_bias
            .as_ref()
            .map(|b| DenseMatrix::from_vec(1, n, b.iter().map(|&v| S::from_f64_lossy(v)).collect()))
            .transpose()?;
        ClassifierHead::from_parts(self.recipe.head, weights, bias, self.head_class_ids.clone())
    }

    fn blob(&self) -> Vec<f64> {
        let mut blob = self.model_params.clone();
        blob.extend_from_slice(&self.head_weights);
        if let Some(b) = &self.head_bias {
            blob.extend_from_slice(b);
        }
        blob
    }

    /// Writes `<stem>.json` (manifest) and `<stem>.bin` (little-endian f64
    /// parameters: model, then head weights, then head bias).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let blob = self.blob();
        let mut bytes = Vec::with_capacity(blob.len() * 8);
        for v in &blob {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let manifest = Manifest {
            version_tag: self.version_tag.clone(),
            recipe: self.recipe.clone(),
            layer_specs: self.layer_specs.clone(),
            head_class_ids: self.head_class_ids.clone(),
            epoch_logs: self.epoch_logs.clone(),
            model_param_count: self.model_params.len(),
            has_head_bias: self.head_bias.is_some(),
            blob_len: blob.len(),
            blob_sha256: hex(&Sha256::digest(&bytes)),
        };
        std::fs::write(with_suffix(stem, ".json"), serde_json::to_vec_pretty(&manifest)?)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(with_suffix(stem, ".bin"))?);
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Checkpoint> {
        let manifest: Manifest =
            serde_json::from_slice(&std::fs::read(with_suffix(stem, ".json"))?)?;
        let bytes = std::fs::read(with_suffix(stem, ".bin"))?;
        if bytes.len() != manifest.blob_len * 8 {
            return Err(Error::Checkpoint(format!(
                "blob holds {} bytes, manifest promises {}",
                bytes.len(),
                manifest.blob_len * 8
            )));
        }
        if hex(&Sha256::digest(&bytes)) != manifest.blob_sha256 {
            return Err(Error::Checkpoint("blob does not match its manifest digest".into()));
        }
        let blob: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let n = manifest.head_class_ids.len();
        let k = manifest.recipe.embed_dim;
        let expected =
            manifest.model_param_count + k * n + if manifest.has_head_bias { n } else { 0 };
        if blob.len() != expected {
            return Err(Error::Checkpoint(format!(
                "blob holds {} parameters, layout needs {expected}",
                blob.len()
            )));
        }
        let model_params = blob[..manifest.model_param_count].to_vec();
        let head_weights =
            blob[manifest.model_param_count..manifest.model_param_count + k * n].to_vec();
        let head_bias = manifest
            .has_head_bias
            .then(|| blob[manifest.model_param_count + k * n..].to_vec());
        let ckpt = Checkpoint {
            version_tag: manifest.version_tag,
            recipe: manifest.recipe,
            layer_specs: manifest.layer_specs,
            head_class_ids: manifest.head_class_ids,
            epoch_logs: manifest.epoch_logs,
            model_params,
            head_weights,
            head_bias,
        };
        // surface malformed shapes now rather than on first use
        ckpt.model::<f64>()?;
        ckpt.head::<f64>()?;
        Ok(ckpt)
    }
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut os = stem.as_os_str().to_owned();
    os.push(suffix);
    PathBuf::from(os)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-mode frozen context prepared once before the epoch loop.
enum Secondary<S> {
    None,
    L2 { old_emb: DenseMatrix<S>, applicable: Vec<bool> },
    InfluenceOld { old_head: ClassifierHead<S>, applicable: Vec<bool> },
    InfluenceSynth { ext_head: ClassifierHead<S> },
    InfluenceKd {
        old_head: ClassifierHead<S>,
        old_emb: DenseMatrix<S>,
        in_old: Vec<bool>,
        temperature: f64,
    },
    Lwf { old_head: ClassifierHead<S>, soft: DenseMatrix<S> },
}

fn gather_rows<S: Scalar>(source: &DenseMatrix<S>, rows: &[usize]) -> DenseMatrix<S> {
    DenseMatrix::from_fn(rows.len(), source.cols(), |r, c| source.get(rows[r], c))
}

// How a wider new embedding is fed to an old classifier: only the first
// `cols` coordinates participate, so the returned gradient (and the
// scatter over it) leaves the extra coordinates untouched.
fn gather_first_cols<S: Scalar>(
    source: &DenseMatrix<S>,
    rows: &[usize],
    cols: usize,
) -> DenseMatrix<S> {
    DenseMatrix::from_fn(rows.len(), cols, |r, c| source.get(rows[r], c))
}

/// Trains one model per the recipe. `old` must be given exactly when the
/// recipe's mode couples to a predecessor.
pub fn train<S: Scalar>(
    recipe: &TrainRecipe,
    dataset: &Dataset,
    old: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    recipe.validate()?;
    let arch = recipe.resolved_arch();
    let (in_dim, _) = validate_chain(&arch)?;
    if in_dim != dataset.spec().input_dim {
        return Err(Error::ShapeMismatch {
            context: "training inputs",
            expected: format!("{in_dim}"),
            actual: format!("{}", dataset.spec().input_dim),
        });
    }
    match (&recipe.bct_mode, old) {
        (BctMode::None, Some(_)) => {
            return Err(Error::InvalidConfig(
                "an old checkpoint was supplied but bct_mode is none".into(),
            ));
        }
        (BctMode::None, None) => {}
        (_, None) => {
            return Err(Error::InvalidConfig("this bct_mode needs the old checkpoint".into()));
        }
        (_, Some(_)) => {}
    }

    let subset = dataset.identity_subset(recipe.data_fraction)?;
    let old_art: Option<(EmbeddingModel<S>, ClassifierHead<S>)> =
        old.map(|c| Ok::<_, Error>((c.model::<S>()?, c.head::<S>()?))).transpose()?;
    if let Some((_, old_head)) = &old_art {
        if recipe.embed_dim < old_head.embed_dim() {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} is narrower than the old classifier's {}; a compatible \
                 model must keep at least the old coordinate count",
                recipe.embed_dim,
                old_head.embed_dim()
            )));
        }
        if recipe.bct_mode == BctMode::L2Feature && recipe.embed_dim != old_head.embed_dim() {
            return Err(Error::InvalidConfig(format!(
                "the feature regularizer compares embeddings coordinate-wise and \
                 needs matching widths (new {}, old {})",
                recipe.embed_dim,
                old_head.embed_dim()
            )));
        }
    }

    // LwF fine-tunes on the identities the old model never saw
    let train_classes: Vec<i64> = match recipe.bct_mode {
        BctMode::Lwf => {
            let seen: BTreeSet<i64> =
                old.unwrap().head_class_ids.iter().copied().collect();
            subset.iter().copied().filter(|c| !seen.contains(c)).collect()
        }
        _ => subset,
    };
    if train_classes.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "training needs at least 2 identities, got {}",
            train_classes.len()
        )));
    }

    let samples: Vec<&LabeledSample> = dataset.samples_for_classes(&train_classes);
    let all_inputs: DenseMatrix<S> = inputs_matrix(&samples)?;
    let raw_ids: Vec<i64> = samples.iter().map(|s| s.class_id).collect();

    let mut model_rng = ChaCha8Rng::seed_from_u64(derive_seed(recipe.sgd.rng_seed, "model-init"));
    let mut model = EmbeddingModel::<S>::init(&arch, &mut model_rng)?;
    let mut head_rng = ChaCha8Rng::seed_from_u64(derive_seed(recipe.sgd.rng_seed, "head-init"));
    let mut head = ClassifierHead::<S>::init(
        recipe.head,
        recipe.embed_dim,
        train_classes.clone(),
        &mut head_rng,
    )?;
    let labels: Vec<usize> =
        raw_ids.iter().map(|&c| head.column_of(c).expect("label in head")).collect();

    let secondary = match (&recipe.bct_mode, old_art) {
        (BctMode::None, _) => Secondary::None,
        (BctMode::L2Feature, Some((old_model, old_head))) => {
            let applicable: Vec<bool> =
                raw_ids.iter().map(|c| old_head.column_of(*c).is_some()).collect();
            if !applicable.iter().any(|&a| a) {
                return Err(Error::InvalidConfig(
                    "no training sample belongs to an old-model identity".into(),
                ));
            }
            Secondary::L2 { old_emb: old_model.forward_infer(&all_inputs)?, applicable }
        }
        (BctMode::Influence { t_bct: TBct::Old }, Some((_, old_head))) => {
            let applicable: Vec<bool> =
                raw_ids.iter().map(|c| old_head.column_of(*c).is_some()).collect();
            if !applicable.iter().any(|&a| a) {
                return Err(Error::InvalidConfig(
                    "no training sample belongs to an old-model identity".into(),
                ));
            }
            Secondary::InfluenceOld { old_head, applicable }
        }
        (BctMode::Influence { t_bct: TBct::NewSynth }, Some((old_model, old_head))) => {
            let mut extra: Vec<(i64, Vec<S>)> = Vec::new();
            for &class in &train_classes {
                if old_head.column_of(class).is_none() {
                    let rows: Vec<&LabeledSample> =
                        samples.iter().copied().filter(|s| s.class_id == class).collect();
                    let class_inputs = inputs_matrix(&rows)?;
                    extra.push((
                        class,
                        synthesize_class_weights(
                            &old_model,
                            class,
                            &class_inputs,
                            old_head.variant().normalizes(),
                        )?,
                    ));
                }
            }
            Secondary::InfluenceSynth { ext_head: old_head.extended_with(&extra)? }
        }
        (BctMode::Influence { t_bct: TBct::NewKd }, Some((old_model, old_head))) => {
            let in_old: Vec<bool> =
                raw_ids.iter().map(|c| old_head.column_of(*c).is_some()).collect();
            let temperature = recipe.kd_temperature.unwrap_or_else(|| old_head.variant().scale());
            Secondary::InfluenceKd {
                old_emb: old_model.forward_infer(&all_inputs)?,
                old_head,
                in_old,
                temperature,
            }
        }
        (BctMode::Lwf, Some((old_model, old_head))) => {
            let soft = lwf_soft_labels(&old_model, &old_head, &all_inputs)?;
            Secondary::Lwf { old_head, soft }
        }
        _ => unreachable!("mode/old consistency checked above"),
    };

    let n = samples.len();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(recipe.sgd.rng_seed, "shuffle"));
    let mut logs: Vec<EpochLog> = Vec::new();
    let mut initial_total: Option<f64> = None;
    let mut high_epochs = 0usize;

    for epoch in 0..recipe.sgd.epochs {
        let rate = recipe.sgd.rate_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);

        let mut primary_sum = 0.0;
        let mut sec_sum = 0.0;
        let mut sec_count = 0usize;
        for (batch_idx, chunk) in order.chunks(recipe.sgd.batch_size).enumerate() {
            let inputs = gather_rows(&all_inputs, chunk);
            let cols: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (emb, cache) = model.forward(&inputs)?;
            let primary = head_cross_entropy(&head, &emb, &cols)?;
            let mut d_emb = primary.d_embeddings.clone();

            // secondary term: a mean over the samples it applies to, its
            // gradient scattered back onto those embedding rows
            let (batch_sec, batch_sec_count) = apply_secondary(
                &secondary,
                &emb,
                &mut d_emb,
                chunk,
                &raw_ids,
                recipe.lambda,
            )?;

            let batch_primary = primary.loss.to_f64_lossy();
            let batch_total = batch_primary + recipe.lambda * batch_sec;
            if !batch_total.is_finite() {
                return Err(Error::Diverged { epoch, batch: batch_idx, loss: batch_total });
            }
            primary_sum += batch_primary * chunk.len() as f64;
            sec_sum += batch_sec * batch_sec_count as f64;
            sec_count += batch_sec_count;

            let grads = model.backward(&cache, &d_emb)?;
            model.apply_sgd(&grads, rate, recipe.sgd.weight_decay)?;
            sgd_step(head.weights_mut(), &primary.d_weights, rate, recipe.sgd.weight_decay)?;
            if let Some(gb) = &primary.d_bias {
                sgd_step(
                    head.bias_mut().expect("bias grads imply a bias"),
                    gb,
                    rate,
                    recipe.sgd.weight_decay,
                )?;
            }
        }

        let primary_epoch = primary_sum / n as f64;
        let secondary_epoch = if sec_count == 0 { 0.0 } else { sec_sum / sec_count as f64 };
        let total = primary_epoch + recipe.lambda * secondary_epoch;
        logs.push(EpochLog { epoch, total, primary: primary_epoch, secondary: secondary_epoch });

        let baseline = *initial_total.get_or_insert(total);
        if total > 10.0 * baseline.abs().max(1e-9) {
            high_epochs += 1;
            if high_epochs >= 3 {
                return Err(Error::Diverged { epoch, batch: 0, loss: total });
            }
        } else {
            high_epochs = 0;
        }
    }

    Ok(Checkpoint {
        version_tag: recipe.version_tag.clone(),
        recipe: recipe.clone(),
        layer_specs: arch,
        head_class_ids: head.class_ids().to_vec(),
        epoch_logs: logs,
        model_params: model.flat_params().iter().map(|v| v.to_f64_lossy()).collect(),
        head_weights: head.weights().as_slice().iter().map(|v| v.to_f64_lossy()).collect(),
        head_bias: head
            .bias()
            .map(|b| b.as_slice().iter().map(|v| v.to_f64_lossy()).collect()),
    })
}

/// Computes the secondary loss for one batch and adds lambda times its
/// gradient into `d_emb`. Returns (mean loss over applicable samples,
/// number of applicable samples).
fn apply_secondary<S: Scalar>(
    secondary: &Secondary<S>,
    emb: &DenseMatrix<S>,
    d_emb: &mut DenseMatrix<S>,
    chunk: &[usize],
    raw_ids: &[i64],
    lambda: f64,
) -> Result<(f64, usize)> {
    let scatter = |d_emb: &mut DenseMatrix<S>,
                   positions: &[usize],
                   grad: &DenseMatrix<S>,
                   factor: f64| {
        let f = S::from_f64_lossy(factor);
        for (sub, &pos) in positions.iter().enumerate() {
            for c in 0..grad.cols() {
                let v = d_emb.get(pos, c) + f * grad.get(sub, c);
                d_emb.set(pos, c, v);
            }
        }
    };
    match secondary {
        Secondary::None => Ok((0.0, 0)),
        Secondary::L2 { old_emb, applicable } => {
            let positions: Vec<usize> = (0..chunk.len())
                .filter(|&p| applicable[chunk[p]])
                .collect();
            if positions.is_empty() {
                return Ok((0.0, 0));
            }
            let rows: Vec<usize> = positions.iter().map(|&p| chunk[p]).collect();
            let sub_new = gather_rows(emb, &positions);
            let sub_old = gather_rows(old_emb, &rows);
            let out = l2_feature_regularizer(&sub_new, &sub_old)?;
            scatter(d_emb, &positions, &out.d_embeddings, lambda);
            Ok((out.loss.to_f64_lossy(), positions.len()))
        }
        Secondary::InfluenceOld { old_head, applicable } => {
            let positions: Vec<usize> = (0..chunk.len())
                .filter(|&p| applicable[chunk[p]])
                .collect();
            if positions.is_empty() {
                return Ok((0.0, 0));
            }
            let ids: Vec<i64> = positions.iter().map(|&p| raw_ids[chunk[p]]).collect();
            let sub = gather_first_cols(emb, &positions, old_head.embed_dim());
            let out = influence_loss(&sub, old_head, &ids)?;
            scatter(d_emb, &positions, &out.d_embeddings, lambda);
            Ok((out.loss.to_f64_lossy(), positions.len()))
        }
        Secondary::InfluenceSynth { ext_head } => {
            let ids: Vec<i64> = chunk.iter().map(|&i| raw_ids[i]).collect();
            let positions: Vec<usize> = (0..chunk.len()).collect();
            let sub = gather_first_cols(emb, &positions, ext_head.embed_dim());
            let out = influence_loss(&sub, ext_head, &ids)?;
            scatter(d_emb, &positions, &out.d_embeddings, lambda);
            Ok((out.loss.to_f64_lossy(), chunk.len()))
        }
        Secondary::InfluenceKd { old_head, old_emb, in_old, temperature } => {
            let b = chunk.len();
            let old_pos: Vec<usize> = (0..b).filter(|&p| in_old[chunk[p]]).collect();
            let new_pos: Vec<usize> = (0..b).filter(|&p| !in_old[chunk[p]]).collect();
            let mut weighted = 0.0;
            if !old_pos.is_empty() {
                let ids: Vec<i64> = old_pos.iter().map(|&p| raw_ids[chunk[p]]).collect();
                let sub = gather_first_cols(emb, &old_pos, old_head.embed_dim());
                let out = influence_loss(&sub, old_head, &ids)?;
                let share = old_pos.len() as f64 / b as f64;
                scatter(d_emb, &old_pos, &out.d_embeddings, lambda * share);
                weighted += out.loss.to_f64_lossy() * share;
            }
            if !new_pos.is_empty() {
                let rows: Vec<usize> = new_pos.iter().map(|&p| chunk[p]).collect();
                let sub_new = gather_first_cols(emb, &new_pos, old_head.embed_dim());
                let sub_old = gather_rows(old_emb, &rows);
                let out = kd_influence_loss(&sub_new, &sub_old, old_head, *temperature)?;
                let share = new_pos.len() as f64 / b as f64;
                scatter(d_emb, &new_pos, &out.d_embeddings, lambda * share);
                weighted += out.loss.to_f64_lossy() * share;
            }
            Ok((weighted, b))
        }
        Secondary::Lwf { old_head, soft } => {
            let rows: Vec<usize> = chunk.to_vec();
            let positions: Vec<usize> = (0..chunk.len()).collect();
            let sub_soft = gather_rows(soft, &rows);
            let fed = gather_first_cols(emb, &positions, old_head.embed_dim());
            let out = lwf_pseudo_label_loss(&fed, old_head, &sub_soft)?;
            scatter(d_emb, &positions, &out.d_embeddings, lambda);
            Ok((out.loss.to_f64_lossy(), chunk.len()))
        }
    }
}

/// Trains a sequence where each stage's influence target is exactly the
/// previous stage's checkpoint; earlier ancestors are never touched.
pub fn train_chain<S: Scalar>(
    recipes: &[TrainRecipe],
    dataset: &Dataset,
) -> Result<Vec<Checkpoint>> {
    if recipes.is_empty() {
        return Err(Error::InvalidConfig("chain needs at least one recipe".into()));
    }
    if recipes[0].bct_mode != BctMode::None {
        return Err(Error::InvalidConfig(
            "the first chain stage has no predecessor; its bct_mode must be none".into(),
        ));
    }
    let mut out: Vec<Checkpoint> = Vec::new();
    for (i, recipe) in recipes.iter().enumerate() {
        let old = if recipe.bct_mode == BctMode::None {
            None
        } else {
            let prev = &out[i - 1];
            if recipe.old_checkpoint.as_deref() != Some(prev.version_tag.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "chain stage {} must reference its predecessor '{}'",
                    recipe.version_tag, prev.version_tag
                )));
            }
            Some(prev)
        };
        out.push(train::<S>(recipe, dataset, old)?);
    }
    Ok(out)
}

/// Embeds samples with a trained model, tagging records with the checkpoint
/// version. Embeddings are l2-normalized iff the recipe's distance is cosine.
pub fn extract_features<S: Scalar>(
    ckpt: &Checkpoint,
    samples: &[&LabeledSample],
) -> Result<FeatureStore> {
    let model = ckpt.model::<S>()?;
    let mut store = FeatureStore::new();
    for chunk in samples.chunks(256) {
        let inputs: DenseMatrix<S> = inputs_matrix(chunk)?;
        let mut emb = model.forward_infer(&inputs)?;
        if ckpt.recipe.distance == Distance::Cosine {
            emb = l2norm_forward(&emb)?;
        }
        for (r, s) in chunk.iter().enumerate() {
            store.insert(FeatureRecord {
                sample_id: s.sample_id.clone(),
                class_id: s.class_id,
                version: ckpt.version_tag.clone(),
                embedding: emb.row(r).iter().map(|v| v.to_f64_lossy() as f32).collect(),
            })?;
        }
    }
    Ok(store)
}

/// Closed-set accuracy of a checkpoint's own classifier over samples.
/// Handy for sanity checks and the separable-data contract.
pub fn train_accuracy<S: Scalar>(ckpt: &Checkpoint, samples: &[&LabeledSample]) -> Result<f64> {
    let model = ckpt.model::<S>()?;
    let head = ckpt.head::<S>()?;
    let inputs: DenseMatrix<S> = inputs_matrix(samples)?;
    let emb = model.forward_infer(&inputs)?;
    let logits = crate::heads::head_logits(&head, &emb, None)?;
    let mut hits = 0usize;
    for (r, s) in samples.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0usize;
        for (c, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = c;
            }
        }
        if head.class_ids()[best] == s.class_id {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}
