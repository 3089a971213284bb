//! Forward math for the network primitives. The tape records these same
//! computations; evaluation without gradients calls them directly.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use super::dual::DualBatch;
use crate::{Error, Result};

/// Smooth activations. Everything here is C-infinity: the losses
/// differentiate network tangents with respect to the parameters, which needs
/// well-defined second derivatives (no ReLU).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Tanh,
    Sine,
}

impl Activation {
    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Self::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Self::Tanh => x.tanh(),
            Self::Sine => x.sin(),
        }
    }

    #[inline]
    pub fn d1(self, x: f64) -> f64 {
        match self {
            Self::Softplus => 1.0 / (1.0 + (-x).exp()),
            Self::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Self::Sine => x.cos(),
        }
    }

    #[inline]
    pub fn d2(self, x: f64) -> f64 {
        match self {
            Self::Softplus => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
            Self::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Self::Sine => -x.sin(),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softplus" => Ok(Self::Softplus),
            "tanh" => Ok(Self::Tanh),
            "sine" => Ok(Self::Sine),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Affine layer `y = x W + b`; tangents propagate linearly through `W`.
pub fn dense_forward(x: &DualBatch, w: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Result<DualBatch> {
    if x.width() != w.nrows() || w.ncols() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "dense: input width {} vs W {}x{} vs b {}",
            x.width(),
            w.nrows(),
            w.ncols(),
            b.len()
        )));
    }
    let mut values = x.values.dot(w);
    values += b;
    let tangents = x.tangents.iter().map(|t| t.dot(w)).collect();
    Ok(DualBatch { values, tangents })
}

/// Elementwise activation; tangent rule `act'(x) * xdot`.
pub fn activation_forward(x: &DualBatch, kind: Activation) -> DualBatch {
    let values = x.values.mapv(|v| kind.value(v));
    let d1 = x.values.mapv(|v| kind.d1(v));
    let tangents = x.tangents.iter().map(|t| t * &d1).collect();
    DualBatch { values, tangents }
}

/// Elementwise sum (residual skip connection).
pub fn add_forward(x: &DualBatch, y: &DualBatch) -> Result<DualBatch> {
    if x.values.dim() != y.values.dim() || x.dof() != y.dof() {
        return Err(Error::ShapeMismatch("residual add on mismatched shapes".into()));
    }
    let values = &x.values + &y.values;
    let tangents = x
        .tangents
        .iter()
        .zip(y.tangents.iter())
        .map(|(a, b)| a + b)
        .collect();
    Ok(DualBatch { values, tangents })
}

/// Fixed random positional encoding
/// `gamma(q) = [sin(2 pi B^T q), cos(2 pi B^T q)]` with exact tangents.
///
/// `bmat` is `dof x features`; the output width is `2 * features`. The matrix
/// is a frozen buffer: it never receives parameter gradients.
pub fn encode_forward(q: &ArrayView2<f64>, bmat: &ArrayView2<f64>, with_tangents: bool) -> Result<DualBatch> {
    if q.ncols() != bmat.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "encoding: input width {} vs B {}x{}",
            q.ncols(),
            bmat.nrows(),
            bmat.ncols()
        )));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let phase = q.dot(bmat) * two_pi;
    let (batch, feats) = phase.dim();
    let sin = phase.mapv(f64::sin);
    let cos = phase.mapv(f64::cos);
    let mut values = Array2::zeros((batch, 2 * feats));
    values.slice_mut(ndarray::s![.., ..feats]).assign(&sin);
    values.slice_mut(ndarray::s![.., feats..]).assign(&cos);
    let mut tangents = Vec::new();
    if with_tangents {
        for k in 0..q.ncols() {
            // d phase / d q_k is constant: 2 pi * B[k, :].
            let row = bmat.index_axis(Axis(0), k);
            let mut t = Array2::zeros((batch, 2 * feats));
            for i in 0..batch {
                for j in 0..feats {
                    let dp = two_pi * row[j];
                    t[[i, j]] = cos[[i, j]] * dp;
                    t[[i, feats + j]] = -sin[[i, j]] * dp;
                }
            }
            tangents.push(t);
        }
    }
    Ok(DualBatch { values, tangents })
}
