//! Embedding model: an explicit stack of layers with hand-written forward and
//! backward passes. Parameters live inside the layer enum; a canonical
//! flattening order (per layer: weights row-major, then bias) is shared by
//! the SGD loop and the checkpoint blob.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{
    affine_backward, affine_forward, l2norm_backward, l2norm_forward, relu_backward,
    relu_forward, validate_chain, LayerSpec,
};
use crate::matrix::DenseMatrix;
use crate::optim::sgd_step;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<S> {
    Affine {
        weights: DenseMatrix<S>,
        bias: Option<DenseMatrix<S>>,
    },
    Relu,
    L2Normalize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel<S> {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer<S>>,
    input_dim: usize,
    output_dim: usize,
}

/// Per-layer inputs captured during forward, consumed by backward.
pub struct ModelCache<S> {
    layer_inputs: Vec<DenseMatrix<S>>,
}

/// Gradients aligned with the model's layer list; None for parameter-free
/// layers.
pub struct ModelGrads<S> {
    pub per_layer: Vec<Option<(DenseMatrix<S>, Option<DenseMatrix<S>>)>>,
}

impl<S: Scalar> EmbeddingModel<S> {
    /// Instantiates parameters for a validated layer chain. Affine weights
    /// use uniform He initialization (+-sqrt(6/fan_in)); biases start at 0.
    pub fn init(specs: &[LayerSpec], rng: &mut impl Rng) -> Result<Self> {
        let (input_dim, output_dim) = validate_chain(specs)?;
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            layers.push(match *spec {
                LayerSpec::Affine { in_dim, out_dim, bias } => {
                    let bound = (6.0 / in_dim as f64).sqrt();
                    let weights = DenseMatrix::from_fn(in_dim, out_dim, |_, _| {
                        S::from_f64_lossy(rng.gen_range(-bound..bound))
                    });
                    let bias = bias.then(|| DenseMatrix::zeros(1, out_dim));
                    Layer::Affine { weights, bias }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::L2Normalize => Layer::L2Normalize,
            });
        }
        Ok(Self {
            specs: specs.to_vec(),
            layers,
            input_dim,
            output_dim,
        })
    }

    /// Rebuilds a model from specs plus a flat parameter buffer (checkpoint
    /// restore path). Consumes exactly `param_count()` values.
    pub fn from_flat_params(specs: &[LayerSpec], params: &[S]) -> Result<Self> {
        let (input_dim, output_dim) = validate_chain(specs)?;
        let mut layers = Vec::with_capacity(specs.len());
        let mut at = 0;
        for spec in specs {
            layers.push(match *spec {
                LayerSpec::Affine { in_dim, out_dim, bias } => {
                    let need = in_dim * out_dim;
                    let weights = take_matrix(params, &mut at, in_dim, out_dim)?;
                    debug_assert_eq!(weights.as_slice().len(), need);
                    let bias = if bias {
                        Some(take_matrix(params, &mut at, 1, out_dim)?)
                    } else {
                        None
                    };
                    Layer::Affine { weights, bias }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::L2Normalize => Layer::L2Normalize,
            });
        }
        if at != params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter blob holds {} values, model consumes {at}",
                params.len()
            )));
        }
        Ok(Self {
            specs: specs.to_vec(),
            layers,
            input_dim,
            output_dim,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.flat_params().len()
    }

    /// Canonical flattening: layer order; per affine layer weights row-major
    /// then bias.
    pub fn flat_params(&self) -> Vec<S> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Layer::Affine { weights, bias } = layer {
                out.extend_from_slice(weights.as_slice());
                if let Some(b) = bias {
                    out.extend_from_slice(b.as_slice());
                }
            }
        }
        out
    }

    pub fn forward(&self, input: &DenseMatrix<S>) -> Result<(DenseMatrix<S>, ModelCache<S>)> {
        if input.cols() != self.input_dim {
            return Err(Error::ShapeMismatch {
                context: "model forward",
                expected: format!("{} input columns", self.input_dim),
                actual: format!("{}", input.cols()),
            });
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            layer_inputs.push(x.clone());
            x = match layer {
                Layer::Affine { weights, bias } => affine_forward(&x, weights, bias.as_ref())?,
                Layer::Relu => relu_forward(&x),
                Layer::L2Normalize => l2norm_forward(&x)?,
            };
        }
        Ok((x, ModelCache { layer_inputs }))
    }

    /// Forward without keeping caches (extraction / frozen-model paths).
    pub fn forward_infer(&self, input: &DenseMatrix<S>) -> Result<DenseMatrix<S>> {
        Ok(self.forward(input)?.0)
    }

    /// Backpropagates grad_out (d loss / d embedding) to parameter gradients.
    pub fn backward(&self, cache: &ModelCache<S>, grad_out: &DenseMatrix<S>) -> Result<ModelGrads<S>> {
        let mut per_layer: Vec<Option<(DenseMatrix<S>, Option<DenseMatrix<S>>)>> =
            vec![None; self.layers.len()];
        let mut grad = grad_out.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let cached = &cache.layer_inputs[idx];
            grad = match layer {
                Layer::Affine { weights, bias } => {
                    let (gx, gw, gb) = affine_backward(&grad, cached, weights, bias.is_some())?;
                    per_layer[idx] = Some((gw, gb));
                    gx
                }
                Layer::Relu => relu_backward(&grad, cached)?,
                Layer::L2Normalize => l2norm_backward(&grad, cached)?,
            };
        }
        Ok(ModelGrads { per_layer })
    }

    /// One SGD step over every parameter matrix.
    pub fn apply_sgd(&mut self, grads: &ModelGrads<S>, rate: f64, weight_decay: f64) -> Result<()> {
        if grads.per_layer.len() != self.layers.len() {
            return Err(Error::ShapeMismatch {
                context: "apply_sgd",
                expected: format!("{} layers", self.layers.len()),
                actual: format!("{}", grads.per_layer.len()),
            });
        }
        for (layer, grad) in self.layers.iter_mut().zip(&grads.per_layer) {
            if let (Layer::Affine { weights, bias }, Some((gw, gb))) = (layer, grad) {
                sgd_step(weights, gw, rate, weight_decay)?;
                if let (Some(b), Some(gb)) = (bias.as_mut(), gb.as_ref()) {
                    sgd_step(b, gb, rate, weight_decay)?;
                }
            }
        }
        Ok(())
    }
}

fn take_matrix<S: Scalar>(
    params: &[S],
    at: &mut usize,
    rows: usize,
    cols: usize,
) -> Result<DenseMatrix<S>> {
    let end = *at + rows * cols;
    if end > params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter blob too short: need {end} values, have {}",
            params.len()
        )));
    }
    let m = DenseMatrix::from_vec(rows, cols, params[*at..end].to_vec())?;
    *at = end;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp_specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Affine { in_dim: 4, out_dim: 8, bias: true },
            LayerSpec::Relu,
            LayerSpec::Affine { in_dim: 8, out_dim: 3, bias: false },
        ]
    }

    #[test]
    fn forward_is_pure_and_batch_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = EmbeddingModel::<f64>::init(&mlp_specs(), &mut rng).unwrap();
        let x = DenseMatrix::from_fn(5, 4, |r, c| (r * 4 + c) as f64 * 0.1 - 0.8);

        let a = model.forward_infer(&x).unwrap();
        let b = model.forward_infer(&x).unwrap();
        assert_eq!(a, b, "same input + params must be bitwise identical");

        // row r of the batch result equals the single-row forward
        for r in 0..x.rows() {
            let single = DenseMatrix::row_vector(x.row(r)).unwrap();
            let out = model.forward_infer(&single).unwrap();
            assert_eq!(out.row(0), a.row(r));
        }
    }

    #[test]
    fn flat_params_round_trip_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = EmbeddingModel::<f64>::init(&mlp_specs(), &mut rng).unwrap();
        let flat = model.flat_params();
        let restored = EmbeddingModel::from_flat_params(&mlp_specs(), &flat).unwrap();
        assert_eq!(model, restored);

        let x = DenseMatrix::from_fn(3, 4, |r, c| (r + c) as f64 * 0.25);
        assert_eq!(
            model.forward_infer(&x).unwrap(),
            restored.forward_infer(&x).unwrap()
        );
    }

    #[test]
    fn from_flat_params_rejects_wrong_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = EmbeddingModel::<f64>::init(&mlp_specs(), &mut rng).unwrap();
        let mut flat = model.flat_params();
        flat.pop();
        assert!(EmbeddingModel::from_flat_params(&mlp_specs(), &flat).is_err());
        let mut flat = model.flat_params();
        flat.push(0.0);
        assert!(EmbeddingModel::from_flat_params(&mlp_specs(), &flat).is_err());
    }

    #[test]
    fn rejects_input_dim_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = EmbeddingModel::<f64>::init(&mlp_specs(), &mut rng).unwrap();
        let x = DenseMatrix::zeros(2, 5);
        assert!(model.forward(&x).is_err());
    }
}
