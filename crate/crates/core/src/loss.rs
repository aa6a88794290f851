use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A scalar loss and its gradient w.r.t. each differentiable input, in the
/// order the producing function documents.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

impl LossResult {
    pub fn zero_like(inputs: &[&Tensor]) -> Self {
        Self {
            value: 0.0,
            grads: inputs.iter().map(|t| t.zeros_like()).collect(),
        }
    }

    pub fn ensure_finite(&self, term: &str) -> Result<()> {
        if !self.value.is_finite() || !self.grads.iter().all(Tensor::all_finite) {
            return Err(Error::NonFinite(term.to_string()));
        }
        Ok(())
    }
}
