//! Dense row-major `f64` tensors.
//!
//! Rank-3 tensors are spatial maps laid out `H×W×C` (channel-last), so the
//! pixel index of `(y, x)` is `y * W + x` everywhere in the crate.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Shape(format!(
            "rank must be 1..={MAX_RANK}, got {}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Shape(format!("zero extent in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = validate_shape(shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = validate_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    /// The all-ones tensor `J`.
    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n = validate_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        })
    }

    /// Zeros with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `(H, W, C)` of a rank-3 map.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::Shape(format!(
                "expected rank-3 H×W×C map, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn ensure_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::mismatch(what, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other, "elementwise operands")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &Tensor, k: f64) -> Result<()> {
        self.ensure_same_shape(other, "accumulation operands")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    /// Compensated left-to-right sum.
    pub fn sum(&self) -> f64 {
        compensated_sum(self.data.iter().copied())
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Neumaier running sum: the error stays near one rounding of the result
/// instead of growing with the number of terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::default();
    values.into_iter().for_each(|v| acc.add(v));
    acc.value()
}

/// Nearest-neighbour upsampling of an `H×W×C` map by an integer factor:
/// `out(y, x, c) = t(y / f, x / f, c)`.
pub fn nearest_upsample(t: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::Argument("upsampling factor must be >= 1".into()));
    }
    let (h, w, c) = t.dims3()?;
    let (oh, ow) = (h * factor, w * factor);
    let src = t.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        let row = (y / factor) * w;
        for x in 0..ow {
            let base = (row + x / factor) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

/// Adjoint of [`nearest_upsample`]: sums each `factor×factor` block.
/// This is the gradient of the upsampling w.r.t. its input.
pub fn block_sum(t: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, c) = block_dims(t, factor)?;
    let (oh, ow) = (h / factor, w / factor);
    let src = t.data();
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..h {
        for x in 0..w {
            let o = ((y / factor) * ow + x / factor) * c;
            let i = (y * w + x) * c;
            for ch in 0..c {
                out[o + ch] += src[i + ch];
            }
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

/// Average pooling over non-overlapping `factor×factor` blocks.
pub fn avg_pool(t: &Tensor, factor: usize) -> Result<Tensor> {
    let s = block_sum(t, factor)?;
    Ok(s.scale(1.0 / (factor * factor) as f64))
}

/// Picks the top-left element of each `factor×factor` block.
pub fn block_subsample(t: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, c) = block_dims(t, factor)?;
    let (oh, ow) = (h / factor, w / factor);
    let src = t.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            let i = ((y * factor) * w + x * factor) * c;
            out.extend_from_slice(&src[i..i + c]);
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

fn block_dims(t: &Tensor, factor: usize) -> Result<(usize, usize, usize)> {
    if factor == 0 {
        return Err(Error::Argument("block factor must be >= 1".into()));
    }
    let (h, w, c) = t.dims3()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "{h}×{w} map is not divisible into {factor}×{factor} blocks"
        )));
    }
    Ok((h, w, c))
}

/// `H×W×C` → `(H·W)×C`; row `p = y·W + x` is the feature vector of pixel `(y, x)`.
pub fn flatten_spatial(t: &Tensor) -> Result<Tensor> {
    let (h, w, c) = t.dims3()?;
    Tensor::new(&[h * w, c], t.data().to_vec())
}

/// Inverse of [`flatten_spatial`].
pub fn unflatten_spatial(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    match t.shape() {
        &[n, c] if n == h * w => Tensor::new(&[h, w, c], t.data().to_vec()),
        s => Err(Error::Shape(format!(
            "cannot unflatten {s:?} into {h}×{w}×C"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map2x2() -> Tensor {
        Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn ones_fills_every_element() {
        assert_eq!(Tensor::ones(&[2, 2, 1]).unwrap().data(), &[1.0; 4]);
        assert_eq!(Tensor::ones(&[1]).unwrap().data(), &[1.0]);
        assert_eq!(Tensor::ones(&[3, 1]).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn zero_extent_is_a_shape_error() {
        assert!(matches!(Tensor::ones(&[2, 0]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::ones(&[]), Err(Error::Shape(_))));
        assert!(matches!(
            Tensor::ones(&[1, 1, 1, 1, 1]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn upsample_2x2_by_two() {
        let up = nearest_upsample(&map2x2(), 2).unwrap();
        assert_eq!(up.shape(), &[4, 4, 1]);
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up.data(), &expected);
    }

    #[test]
    fn upsample_identity_and_constant() {
        let t = map2x2();
        assert_eq!(nearest_upsample(&t, 1).unwrap(), t);
        let five = Tensor::new(&[1, 1, 1], vec![5.0]).unwrap();
        let up = nearest_upsample(&five, 3).unwrap();
        assert_eq!(up.shape(), &[3, 3, 1]);
        assert!(up.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn upsample_rejects_zero_factor() {
        assert!(matches!(
            nearest_upsample(&map2x2(), 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn flatten_orders_pixels_row_major() {
        let f = flatten_spatial(&map2x2()).unwrap();
        assert_eq!(f.shape(), &[4, 1]);
        assert_eq!(f.data(), &[1.0, 2.0, 3.0, 4.0]);

        let one = Tensor::new(&[1, 1, 3], vec![7.0, 8.0, 9.0]).unwrap();
        let f = flatten_spatial(&one).unwrap();
        assert_eq!(f.shape(), &[1, 3]);
        assert_eq!(f.data(), one.data());

        let col = Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = flatten_spatial(&col).unwrap();
        assert_eq!(f.shape(), &[2, 2]);
        assert_eq!(&f.data()[..2], &[1.0, 2.0]);
    }

    #[test]
    fn flatten_rejects_wrong_rank() {
        let t = Tensor::ones(&[4, 2]).unwrap();
        assert!(matches!(flatten_spatial(&t), Err(Error::Shape(_))));
    }

    #[test]
    fn block_sum_is_adjoint_of_upsample() {
        // <up(x), y> == <x, block_sum(y)>
        let x = Tensor::from_fn(&[2, 3, 2], |i| i as f64 * 0.5 - 1.0).unwrap();
        let y = Tensor::from_fn(&[6, 9, 2], |i| ((i * 7) % 11) as f64 - 5.0).unwrap();
        let lhs: f64 = nearest_upsample(&x, 3)
            .unwrap()
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(block_sum(&y, 3).unwrap().data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    fn arb_map() -> impl Strategy<Value = Tensor> {
        (1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(h, w, c)| {
            proptest::collection::vec(-100.0f64..100.0, h * w * c)
                .prop_map(move |d| Tensor::new(&[h, w, c], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn upsample_then_subsample_is_identity(t in arb_map(), f in 1usize..5) {
            let up = nearest_upsample(&t, f).unwrap();
            prop_assert_eq!(block_subsample(&up, f).unwrap(), t);
        }

        #[test]
        fn flatten_roundtrips(t in arb_map()) {
            let (h, w, _) = t.dims3().unwrap();
            let back = unflatten_spatial(&flatten_spatial(&t).unwrap(), h, w).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
