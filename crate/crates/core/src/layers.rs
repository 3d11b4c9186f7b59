//! Layer primitives with explicit forward/backward passes. The layer set is
//! closed: affine, ReLU, and row-wise L2 normalization are everything the
//! embedding models need.
//!
//! Conventions: inputs are batches [B x in], affine weights are [in x out],
//! biases are 1 x out row vectors. ReLU's subgradient at exactly 0 is 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

/// Declarative layer description; the model instantiates parameters from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Affine {
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    },
    Relu,
    L2Normalize,
}

/// Checks that affine dims chain and returns (input_dim, output_dim).
/// The first layer must be affine so the model's input dim is declared.
pub fn validate_chain(specs: &[LayerSpec]) -> Result<(usize, usize)> {
    let (first_in, mut dim) = match specs.first() {
        Some(LayerSpec::Affine { in_dim, out_dim, .. }) => (*in_dim, *out_dim),
        Some(_) => {
            return Err(Error::InvalidConfig(
                "model must start with an affine layer".into(),
            ))
        }
        None => return Err(Error::InvalidConfig("model has no layers".into())),
    };
    if first_in == 0 || dim == 0 {
        return Err(Error::InvalidConfig("affine layer dims must be >= 1".into()));
    }
    for spec in &specs[1..] {
        match spec {
            LayerSpec::Affine { in_dim, out_dim, .. } => {
                if *in_dim != dim {
                    return Err(Error::ShapeMismatch {
                        context: "layer chain",
                        expected: format!("in_dim {dim}"),
                        actual: format!("{in_dim}"),
                    });
                }
                if *out_dim == 0 {
                    return Err(Error::InvalidConfig("affine layer dims must be >= 1".into()));
                }
                dim = *out_dim;
            }
            LayerSpec::Relu | LayerSpec::L2Normalize => {}
        }
    }
    Ok((first_in, dim))
}

pub fn affine_forward<S: Scalar>(
    input: &DenseMatrix<S>,
    weights: &DenseMatrix<S>,
    bias: Option<&DenseMatrix<S>>,
) -> Result<DenseMatrix<S>> {
    let mut out = input.matmul(weights)?;
    if let Some(b) = bias {
        if b.shape() != (1, weights.cols()) {
            return Err(Error::ShapeMismatch {
                context: "affine bias",
                expected: format!("(1, {})", weights.cols()),
                actual: format!("{:?}", b.shape()),
            });
        }
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (o, &bv) in row.iter_mut().zip(b.row(0)) {
                *o += bv;
            }
        }
    }
    Ok(out)
}

/// Returns (grad_input, grad_weights, grad_bias). `grad_bias` is Some iff
/// `has_bias`.
pub fn affine_backward<S: Scalar>(
    grad_out: &DenseMatrix<S>,
    cached_input: &DenseMatrix<S>,
    weights: &DenseMatrix<S>,
    has_bias: bool,
) -> Result<(DenseMatrix<S>, DenseMatrix<S>, Option<DenseMatrix<S>>)> {
    if grad_out.rows() != cached_input.rows() || grad_out.cols() != weights.cols() {
        return Err(Error::ShapeMismatch {
            context: "affine_backward",
            expected: format!("({}, {})", cached_input.rows(), weights.cols()),
            actual: format!("{:?}", grad_out.shape()),
        });
    }
    let grad_input = grad_out.matmul(&weights.transpose())?;
    let grad_weights = cached_input.transpose().matmul(grad_out)?;
    let grad_bias = has_bias.then(|| grad_out.col_sums());
    Ok((grad_input, grad_weights, grad_bias))
}

pub fn relu_forward<S: Scalar>(input: &DenseMatrix<S>) -> DenseMatrix<S> {
    input.map(|v| if v > S::zero() { v } else { S::zero() })
}

pub fn relu_backward<S: Scalar>(
    grad_out: &DenseMatrix<S>,
    cached_input: &DenseMatrix<S>,
) -> Result<DenseMatrix<S>> {
    if grad_out.shape() != cached_input.shape() {
        return Err(Error::ShapeMismatch {
            context: "relu_backward",
            expected: format!("{:?}", cached_input.shape()),
            actual: format!("{:?}", grad_out.shape()),
        });
    }
    let mut out = grad_out.clone();
    for (g, &x) in out.as_mut_slice().iter_mut().zip(cached_input.as_slice()) {
        if x <= S::zero() {
            *g = S::zero();
        }
    }
    Ok(out)
}

/// Normalizes each row to unit L2 norm. Rows with norm <= eps_norm are
/// rejected rather than fudged.
pub fn l2norm_forward<S: Scalar>(input: &DenseMatrix<S>) -> Result<DenseMatrix<S>> {
    let mut out = input.clone();
    for r in 0..out.rows() {
        let norm = row_norm(input.row(r));
        if norm <= S::eps_norm() {
            return Err(Error::DegenerateNorm {
                context: "l2norm_forward",
                norm: norm.to_f64_lossy(),
            });
        }
        for v in out.row_mut(r) {
            *v = *v / norm;
        }
    }
    Ok(out)
}

/// Row-wise Jacobian of x/|x|: grad_in = (g - (x_hat . g) x_hat) / |x|.
pub fn l2norm_backward<S: Scalar>(
    grad_out: &DenseMatrix<S>,
    cached_input: &DenseMatrix<S>,
) -> Result<DenseMatrix<S>> {
    if grad_out.shape() != cached_input.shape() {
        return Err(Error::ShapeMismatch {
            context: "l2norm_backward",
            expected: format!("{:?}", cached_input.shape()),
            actual: format!("{:?}", grad_out.shape()),
        });
    }
    let mut out = DenseMatrix::zeros(grad_out.rows(), grad_out.cols());
    for r in 0..grad_out.rows() {
        let x = cached_input.row(r);
        let g = grad_out.row(r);
        let norm = row_norm(x);
        if norm <= S::eps_norm() {
            return Err(Error::DegenerateNorm {
                context: "l2norm_backward",
                norm: norm.to_f64_lossy(),
            });
        }
        let mut dot = S::zero();
        for (&xv, &gv) in x.iter().zip(g) {
            dot += (xv / norm) * gv;
        }
        for (c, (&xv, &gv)) in x.iter().zip(g).enumerate() {
            out.set(r, c, (gv - dot * (xv / norm)) / norm);
        }
    }
    Ok(out)
}

pub(crate) fn row_norm<S: Scalar>(row: &[S]) -> S {
    row.iter().map(|&v| v * v).sum::<S>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    type Mat = DenseMatrix<f64>;

    #[test]
    fn relu_clamps_negatives_and_zero() {
        let x = Mat::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).as_slice(), &[0.0, 0.0, 2.0]);
        let g = Mat::from_vec(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        // subgradient at exactly 0 is 0
        assert_eq!(relu_backward(&g, &x).unwrap().as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn l2norm_unit_example() {
        let x = Mat::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        let n = l2norm_forward(&x).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-15);
        // already-unit rows come back unchanged
        let again = l2norm_forward(&n).unwrap();
        assert!((again.get(0, 0) - n.get(0, 0)).abs() < 1e-15);
    }

    #[test]
    fn l2norm_rejects_zero_rows() {
        let x = Mat::zeros(2, 3);
        assert!(matches!(
            l2norm_forward(&x),
            Err(Error::DegenerateNorm { .. })
        ));
    }

    #[test]
    fn affine_scalar_case() {
        // 1x1 weights: grad_weights = input * grad_out
        let x = Mat::from_vec(1, 1, vec![3.0]).unwrap();
        let w = Mat::from_vec(1, 1, vec![2.0]).unwrap();
        let g = Mat::from_vec(1, 1, vec![5.0]).unwrap();
        let (gx, gw, gb) = affine_backward(&g, &x, &w, false).unwrap();
        assert_eq!(gw.get(0, 0), 15.0);
        assert_eq!(gx.get(0, 0), 10.0);
        assert!(gb.is_none());
    }

    #[test]
    fn affine_zero_grad_out_gives_zero_grads() {
        let x = Mat::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let w = Mat::from_vec(3, 2, vec![1., 0., 0., 1., 1., 1.]).unwrap();
        let g = Mat::zeros(2, 2);
        let (gx, gw, gb) = affine_backward(&g, &x, &w, true).unwrap();
        assert!(gx.as_slice().iter().all(|&v| v == 0.0));
        assert!(gw.as_slice().iter().all(|&v| v == 0.0));
        assert!(gb.unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chain_validation_catches_dim_breaks() {
        let ok = vec![
            LayerSpec::Affine { in_dim: 4, out_dim: 8, bias: true },
            LayerSpec::Relu,
            LayerSpec::Affine { in_dim: 8, out_dim: 2, bias: true },
        ];
        assert_eq!(validate_chain(&ok).unwrap(), (4, 2));

        let broken = vec![
            LayerSpec::Affine { in_dim: 4, out_dim: 8, bias: true },
            LayerSpec::Affine { in_dim: 7, out_dim: 2, bias: true },
        ];
        assert!(validate_chain(&broken).is_err());
        assert!(validate_chain(&[LayerSpec::Relu]).is_err());
        assert!(validate_chain(&[]).is_err());
    }
}
