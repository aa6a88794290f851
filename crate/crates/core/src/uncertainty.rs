//! Relative-error uncertainty maps and softmax rectification of two
//! supervision sources.
//!
//! `U = 1 - exp(-|pred - gt| / max(beta * |pred + gt|, EPS))`, evaluated only
//! where `gt > 0`; invalid pixels get `U = 0`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BETA: f64 = 1.0;

/// Denominator guard for `pred + gt == 0`.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub values: Tensor,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifiedWeights {
    pub w_dense: Tensor,
    pub w_sparse: Tensor,
    pub valid_dense: Vec<bool>,
    pub valid_sparse: Vec<bool>,
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Argument(format!(
            "beta must be positive, got {beta}"
        )));
    }
    Ok(())
}

/// Scalar uncertainty of one pixel. `gt <= 0` means "no measurement".
#[inline]
pub fn uncertainty_scalar(pred: f64, gt: f64, beta: f64) -> f64 {
    if gt <= 0.0 {
        return 0.0;
    }
    1.0 - (-(pred - gt).abs() / (beta * (pred + gt).abs()).max(EPS)).exp()
}

/// `dU/dpred` of one pixel; 0 at `pred == gt` and at invalid pixels.
#[inline]
pub fn uncertainty_scalar_grad(pred: f64, gt: f64, beta: f64) -> f64 {
    let diff = pred - gt;
    if gt <= 0.0 || diff == 0.0 {
        return 0.0;
    }
    let sum = pred + gt;
    let scaled = beta * sum.abs();
    let den = scaled.max(EPS);
    let ratio = diff.abs() / den;
    let d_den = if scaled > EPS {
        beta * sum.signum()
    } else {
        0.0
    };
    let d_ratio = diff.signum() / den - diff.abs() * d_den / (den * den);
    (-ratio).exp() * d_ratio
}

pub fn uncertainty_map(pred: &Tensor, gt: &Tensor, beta: f64) -> Result<UncertaintyMap> {
    check_beta(beta)?;
    let values = pred.zip_map(gt, |p, g| uncertainty_scalar(p, g, beta))?;
    Ok(UncertaintyMap { values, beta })
}

/// Elementwise `dU/dpred`.
pub fn uncertainty_map_grad(pred: &Tensor, gt: &Tensor, beta: f64) -> Result<Tensor> {
    check_beta(beta)?;
    pred.zip_map(gt, |p, g| uncertainty_scalar_grad(p, g, beta))
}

/// Two-way softmax `(w_d, w_s)` of `(u_d, u_s)`.
#[inline]
pub fn softmax2(u_d: f64, u_s: f64) -> (f64, f64) {
    let m = u_d.max(u_s);
    let e_d = (u_d - m).exp();
    let e_s = (u_s - m).exp();
    let z = e_d + e_s;
    (e_d / z, e_s / z)
}

/// Per-pixel weights for the dense and sparse supervision.
///
/// Both valid: softmax over the two uncertainties. One valid: that source gets
/// weight 1. Neither: both 0.
pub fn rectify(
    u_dense: &UncertaintyMap,
    u_sparse: &UncertaintyMap,
    valid_dense: &[bool],
    valid_sparse: &[bool],
) -> Result<RectifiedWeights> {
    u_dense
        .values
        .ensure_same_shape(&u_sparse.values, "dense/sparse uncertainty")?;
    let n = u_dense.values.len();
    if valid_dense.len() != n || valid_sparse.len() != n {
        return Err(Error::Shape(format!(
            "masks of length {}/{} for {n} pixels",
            valid_dense.len(),
            valid_sparse.len()
        )));
    }
    let mut w_dense = u_dense.values.zeros_like();
    let mut w_sparse = u_dense.values.zeros_like();
    let (ud, us) = (u_dense.values.data(), u_sparse.values.data());
    for p in 0..n {
        let (wd, ws) = match (valid_dense[p], valid_sparse[p]) {
            (true, true) => softmax2(ud[p], us[p]),
            (true, false) => (1.0, 0.0),
            (false, true) => (0.0, 1.0),
            (false, false) => (0.0, 0.0),
        };
        w_dense.data_mut()[p] = wd;
        w_sparse.data_mut()[p] = ws;
    }
    Ok(RectifiedWeights {
        w_dense,
        w_sparse,
        valid_dense: valid_dense.to_vec(),
        valid_sparse: valid_sparse.to_vec(),
    })
}
