//! Value-plus-tangent batches.
//!
//! A [`DualBatch`] carries per-sample values and, optionally, one tangent
//! slice per input coordinate: tangent `k` holds the directional derivative
//! of every value with respect to input coordinate `k`. Seeding the input
//! with identity tangents makes the network output tangents equal the exact
//! input Jacobian.

use ndarray::Array2;

/// Batched values with per-input-coordinate tangents.
#[derive(Debug, Clone)]
pub struct DualBatch {
    /// batch x width
    pub values: Array2<f64>,
    /// One batch x width slice per input coordinate; empty when the pass
    /// does not track input derivatives.
    pub tangents: Vec<Array2<f64>>,
}

impl DualBatch {
    pub fn from_values(values: Array2<f64>) -> Self {
        Self { values, tangents: Vec::new() }
    }

    /// Leaf input whose tangents are the identity with respect to its own
    /// coordinates: tangent `k` is 1 in column `k`.
    pub fn with_identity_tangents(values: Array2<f64>) -> Self {
        let (batch, width) = values.dim();
        let tangents = (0..width)
            .map(|k| {
                let mut t = Array2::zeros((batch, width));
                t.column_mut(k).fill(1.0);
                t
            })
            .collect();
        Self { values, tangents }
    }

    pub fn batch(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    /// Number of tracked input coordinates.
    pub fn dof(&self) -> usize {
        self.tangents.len()
    }
}
