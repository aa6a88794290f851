//! Uncertainty-rectified depth loss over a dense and a sparse supervision map,
//! and the weighted total training objective.

use log::warn;

use crate::distill::sign;
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradReport};
use crate::loss::LossResult;
use crate::tensor::{CompensatedSum, Tensor};
use crate::uncertainty::{check_beta, rectify, uncertainty_map, uncertainty_scalar_grad};

/// Predictions inside a valid set are clamped to at least this value.
pub const MIN_PRED: f64 = 1e-6;

/// `H×W×1` depths in meters; 0 marks a pixel without measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap(Tensor);

impl DepthMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let (_, _, c) = values.dims3()?;
        if c != 1 {
            return Err(Error::Shape(format!(
                "depth map must have one channel, got {c}"
            )));
        }
        if let Some(i) = values
            .data()
            .iter()
            .position(|&v| !v.is_finite() || v < 0.0)
        {
            return Err(Error::Argument(format!(
                "depth map has invalid value {} at pixel {i}",
                values.data()[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(&[h, w, 1], data)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.0.data().iter().map(|&v| v > 0.0).collect()
    }

    pub fn n_valid(&self) -> usize {
        self.0.data().iter().filter(|&&v| v > 0.0).count()
    }
}

/// `gamma[0..4]` scale the camera, radar, decoder-structure and inter-depth
/// distillation terms. A zero weight removes its term exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub gamma: [f64; 4],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: [1.0; 4] }
    }
}

impl LossWeights {
    pub fn new(gamma: [f64; 4]) -> Result<Self> {
        if let Some(g) = gamma.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
            return Err(Error::Argument(format!(
                "loss weight {g} must be finite and >= 0"
            )));
        }
        Ok(Self { gamma })
    }

    /// Zeroes the weights whose flag is off.
    pub fn masked(&self, enabled: [bool; 4]) -> Self {
        let mut gamma = self.gamma;
        for (g, on) in gamma.iter_mut().zip(enabled) {
            if !on {
                *g = 0.0;
            }
        }
        Self { gamma }
    }
}

/// Uncertainty-rectified depth loss. The single gradient is w.r.t. `pred`.
///
/// ```text
/// L = 1/|Od| sum_{Od} w_d |D_d - pred| + 1/|Os| sum_{Os} w_s |D_s - pred|
/// ```
///
/// `(w_d, w_s)` come from [`rectify`] on the two uncertainty maps. A term with
/// an empty valid set contributes 0; both empty is an error.
pub fn urdl(
    pred: &DepthMap,
    dense: &DepthMap,
    sparse: &DepthMap,
    beta: f64,
    detach_u: bool,
) -> Result<LossResult> {
    check_beta(beta)?;
    pred.0
        .ensure_same_shape(&dense.0, "prediction/dense depth")?;
    pred.0
        .ensure_same_shape(&sparse.0, "prediction/sparse depth")?;
    let valid_d = dense.valid_mask();
    let valid_s = sparse.valid_mask();
    let n_d = valid_d.iter().filter(|&&v| v).count();
    let n_s = valid_s.iter().filter(|&&v| v).count();
    if n_d == 0 && n_s == 0 {
        return Err(Error::EmptyValidSet(
            "neither dense nor sparse depth has a valid pixel".into(),
        ));
    }

    let p_eff = pred.0.map(|p| p.max(MIN_PRED));
    let clamp_mask: Vec<bool> = pred
        .data()
        .iter()
        .zip(valid_d.iter().zip(&valid_s))
        .map(|(&p, (&d, &s))| p < MIN_PRED && (d || s))
        .collect();
    let clamped = clamp_mask.iter().filter(|&&c| c).count();
    if clamped > 0 {
        warn!("urdl: clamped {clamped} non-positive predictions to {MIN_PRED}");
    }

    let u_d = uncertainty_map(&p_eff, &dense.0, beta)?;
    let u_s = uncertainty_map(&p_eff, &sparse.0, beta)?;
    let w = rectify(&u_d, &u_s, &valid_d, &valid_s)?;

    let inv_d = if n_d > 0 { 1.0 / n_d as f64 } else { 0.0 };
    let inv_s = if n_s > 0 { 1.0 / n_s as f64 } else { 0.0 };
    let (p, dd, ds) = (p_eff.data(), dense.data(), sparse.data());
    let (wd, ws) = (w.w_dense.data(), w.w_sparse.data());

    let mut sum_d = CompensatedSum::default();
    let mut sum_s = CompensatedSum::default();
    let mut grad = pred.0.zeros_like();
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        let (vd, vs) = (valid_d[i], valid_s[i]);
        if !vd && !vs {
            continue;
        }
        let err_d = p[i] - dd[i];
        let err_s = p[i] - ds[i];
        let mut d = 0.0;
        if vd {
            sum_d.add(wd[i] * err_d.abs());
            d += inv_d * wd[i] * sign(err_d);
        }
        if vs {
            sum_s.add(ws[i] * err_s.abs());
            d += inv_s * ws[i] * sign(err_s);
        }
        if !detach_u && vd && vs {
            // w_d = sigmoid(U_d - U_s): dw_d = w_d w_s (dU_d - dU_s), dw_s = -dw_d
            let du = uncertainty_scalar_grad(p[i], dd[i], beta)
                - uncertainty_scalar_grad(p[i], ds[i], beta);
            let dwd = wd[i] * ws[i] * du;
            d += dwd * (inv_d * err_d.abs() - inv_s * err_s.abs());
        }
        *g = if clamp_mask[i] { 0.0 } else { d };
    }
    Ok(LossResult {
        value: inv_d * sum_d.value() + inv_s * sum_s.value(),
        grads: vec![grad],
    })
}

/// Names of the five objective terms, in argument order.
pub const TERM_NAMES: [&str; 5] = ["depth", "kd_image", "kd_radar", "kd_decoder", "kd_depth"];

/// `L = depth + g1 kd_i + g2 kd_r + g3 kd_dec + g4 kd_d`.
///
/// The returned gradients are the concatenation, in argument order, of each
/// component's gradients scaled by its weight.
pub fn total_loss(
    depth: &LossResult,
    kd_i: &LossResult,
    kd_r: &LossResult,
    kd_dec: &LossResult,
    kd_d: &LossResult,
    gamma: &LossWeights,
) -> Result<LossResult> {
    let parts = [depth, kd_i, kd_r, kd_dec, kd_d];
    for (part, name) in parts.iter().zip(TERM_NAMES) {
        part.ensure_finite(name)?;
    }
    let weights = [
        1.0,
        gamma.gamma[0],
        gamma.gamma[1],
        gamma.gamma[2],
        gamma.gamma[3],
    ];
    let mut value = depth.value;
    for (part, &w) in parts[1..].iter().zip(&weights[1..]) {
        value += w * part.value;
    }
    let grads = parts
        .iter()
        .zip(weights)
        .flat_map(|(part, w)| part.grads.iter().map(move |g| g.scale(w)))
        .collect();
    Ok(LossResult { value, grads })
}

/// Finite-difference check of [`urdl`] on random 8×8 maps.
pub fn urdl_grad_check(seed: u64, detach_u: bool) -> GradReport {
    let op = if detach_u { "urdl" } else { "urdl_full" };
    gradcheck::check(op, seed, gradcheck::COMPOSITE_TOL).expect("urdl ops are registered")
}
