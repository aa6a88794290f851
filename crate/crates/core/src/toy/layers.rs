//! 1×1 convolutions (per-pixel linear maps) with optional ReLU, and the
//! positive depth mapping used by every depth head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output depths are `DEPTH_SCALE * softplus(z)` meters.
pub const DEPTH_SCALE: f64 = 10.0;

/// Per-pixel linear map `f · weight + bias`, weight `C_in×C_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrad {
    pub d_input: Tensor,
    pub d_weight: Tensor,
    pub d_bias: Tensor,
}

impl Projection {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (_, c_out) = match weight.shape() {
            &[i, o] => (i, o),
            s => {
                return Err(Error::Shape(format!(
                    "projection weight must be C_in×C_out, got {s:?}"
                )))
            }
        };
        if bias.shape() != [c_out] {
            return Err(Error::mismatch("projection bias", bias.shape(), &[c_out]));
        }
        Ok(Self { weight, bias })
    }

    /// Identity weights and zero bias.
    pub fn identity(c: usize) -> Self {
        let w = Tensor::from_fn(&[c, c], |k| if k / c == k % c { 1.0 } else { 0.0 }).unwrap();
        Self {
            weight: w,
            bias: Tensor::zeros(&[c]).unwrap(),
        }
    }

    /// Uniform `±scale/sqrt(C_in)` weights and constant bias.
    pub fn random(rng: &mut impl Rng, c_in: usize, c_out: usize, scale: f64, bias: f64) -> Self {
        let a = scale / (c_in as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[c_in, c_out], |_| rng.gen_range(-a..a)).unwrap(),
            bias: Tensor::full(&[c_out], bias).unwrap(),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }
}

/// Pre-activation `f · weight + bias` of an `H×W×C_in` map.
pub fn linear(f: &Tensor, p: &Projection) -> Result<Tensor> {
    let (h, w, c) = f.dims3()?;
    if c != p.c_in() {
        return Err(Error::mismatch(
            "projection input channels",
            &[c],
            &[p.c_in()],
        ));
    }
    let co = p.c_out();
    let (wt, b) = (p.weight.data(), p.bias.data());
    let mut out = Vec::with_capacity(h * w * co);
    for px in f.data().chunks_exact(c) {
        for o in 0..co {
            let mut acc = b[o];
            for (i, &x) in px.iter().enumerate() {
                acc += x * wt[i * co + o];
            }
            out.push(acc);
        }
    }
    Tensor::new(&[h, w, co], out)
}

/// Backward of [`linear`] given the upstream gradient of its output.
pub fn linear_backward(f: &Tensor, p: &Projection, d_out: &Tensor) -> Result<ProjectionGrad> {
    let (h, w, c) = f.dims3()?;
    let co = p.c_out();
    if d_out.shape() != [h, w, co] {
        return Err(Error::mismatch(
            "projection output gradient",
            d_out.shape(),
            &[h, w, co],
        ));
    }
    let wt = p.weight.data();
    let mut d_input = vec![0.0; h * w * c];
    let mut d_weight = vec![0.0; c * co];
    let mut d_bias = vec![0.0; co];
    for ((px, g), dx) in f
        .data()
        .chunks_exact(c)
        .zip(d_out.data().chunks_exact(co))
        .zip(d_input.chunks_exact_mut(c))
    {
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            d_bias[o] += go;
            for i in 0..c {
                d_weight[i * co + o] += px[i] * go;
                dx[i] += wt[i * co + o] * go;
            }
        }
    }
    Ok(ProjectionGrad {
        d_input: Tensor::new(&[h, w, c], d_input)?,
        d_weight: Tensor::new(&[c, co], d_weight)?,
        d_bias: Tensor::new(&[co], d_bias)?,
    })
}

/// Affinity projection: per-pixel linear map followed by ReLU.
pub fn channel_project(f: &Tensor, p: &Projection) -> Result<Tensor> {
    Ok(linear(f, p)?.map(relu))
}

/// Backward of [`channel_project`]; the ReLU derivative at 0 is taken as 0.
pub fn channel_project_backward(
    f: &Tensor,
    p: &Projection,
    d_out: &Tensor,
) -> Result<ProjectionGrad> {
    let pre = linear(f, p)?;
    let masked = d_out.zip_map(&pre, |g, z| if z > 0.0 { g } else { 0.0 })?;
    linear_backward(f, p, &masked)
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `DEPTH_SCALE * softplus(z)`, strictly positive for finite `z`.
#[inline]
pub fn to_depth(z: f64) -> f64 {
    DEPTH_SCALE * softplus(z)
}

#[inline]
pub fn to_depth_grad(z: f64) -> f64 {
    DEPTH_SCALE * sigmoid(z)
}
