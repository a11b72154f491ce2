//! Forward pass from inputs to last-hidden-layer features.

use nalgebra::DMatrix;

use crate::data::{NetworkShape, ThetaCandidate};
use crate::error::{Error, Result};

/// Last-hidden-layer activations, one column per input (`p x n` for training
/// data, `p x m` for `m` test points).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub xl: DMatrix<f64>,
    pub candidate_index: Option<usize>,
}

impl FeatureMatrix {
    pub fn new(xl: DMatrix<f64>) -> Self {
        Self {
            xl,
            candidate_index: None,
        }
    }

    pub fn with_index(mut self, index: usize) -> Self {
        self.candidate_index = Some(index);
        self
    }

    pub fn p(&self) -> usize {
        self.xl.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.xl.ncols()
    }

    /// Unscaled Gram `X_L^T X_L`.
    pub fn gram(&self) -> DMatrix<f64> {
        self.xl.transpose() * &self.xl
    }
}

pub fn forward_features(theta: &ThetaCandidate, inputs: &DMatrix<f64>, shape: &NetworkShape) -> Result<FeatureMatrix> {
    if inputs.nrows() != shape.input_dim() {
        return Err(Error::invalid(format!(
            "inputs have {} rows, network expects {}",
            inputs.nrows(),
            shape.input_dim()
        )));
    }
    theta.check_shape(shape)?;
    let act = shape.activation();
    let mut x = inputs.clone();
    for (l, layer) in theta.layers.iter().enumerate() {
        // transpose first so the product goes through the blocked gemm path
        let mut next = layer.weights.transpose() * &x;
        for mut col in next.column_iter_mut() {
            for (v, b) in col.iter_mut().zip(layer.bias.iter()) {
                *v = act.apply(*v - b);
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite activation in layer {}", l + 1)));
        }
        x = next;
    }
    Ok(FeatureMatrix::new(x))
}
