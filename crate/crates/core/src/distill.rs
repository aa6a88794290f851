//! Teacher-to-student distillation losses.
//!
//! * [`feature_l1_pyramid`]: per-level mean absolute feature difference,
//!   level `i` weighted by `1/2^i`.
//! * [`structure_distill_loss`]: squared difference of the pairwise cosine
//!   similarity matrices of decoder features.
//! * [`inter_depth_distill_loss`]: uncertainty-weighted L1 between the
//!   student's intermediate depth maps and the teacher's LPG maps.
//!
//! Teacher tensors are constants in every gradient.

use crate::error::{Error, Result};
use crate::loss::LossResult;
use crate::tensor::{compensated_sum, CompensatedSum, Tensor};
use crate::uncertainty::{check_beta, uncertainty_scalar, uncertainty_scalar_grad};

pub const PYRAMID_LEVELS: usize = 5;

/// Upsampling factors `k` of the three intermediate depth heads, in order.
pub const INTER_DEPTH_SCALES: [usize; 3] = [8, 4, 2];

/// Weight `1/2^i` of the 1-based level `i`.
pub fn level_weight(level: usize) -> f64 {
    0.5f64.powi(level as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PyramidRole {
    Camera,
    Radar,
    Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    role: PyramidRole,
    levels: Vec<Tensor>,
}

impl FeaturePyramid {
    /// Validates five rank-3 levels whose spatial extents halve level to level.
    pub fn new(role: PyramidRole, levels: Vec<Tensor>) -> Result<Self> {
        if levels.len() != PYRAMID_LEVELS {
            return Err(Error::Shape(format!(
                "feature pyramid needs {PYRAMID_LEVELS} levels, got {}",
                levels.len()
            )));
        }
        let mut prev: Option<(usize, usize)> = None;
        for (i, l) in levels.iter().enumerate() {
            let (h, w, _) = l.dims3()?;
            if let Some((ph, pw)) = prev {
                if h != ph / 2 || w != pw / 2 {
                    return Err(Error::Shape(format!(
                        "pyramid level {} is {h}×{w}, expected {}×{}",
                        i + 1,
                        ph / 2,
                        pw / 2
                    )));
                }
            }
            prev = Some((h, w));
        }
        Ok(Self { role, levels })
    }

    pub fn role(&self) -> PyramidRole {
        self.role
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<Tensor> {
        self.levels
    }

    fn ensure_matches(&self, other: &FeaturePyramid, what: &str) -> Result<()> {
        for (i, (a, b)) in self.levels.iter().zip(&other.levels).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::mismatch(
                    format!("{what} level {}", i + 1),
                    a.shape(),
                    b.shape(),
                ));
            }
        }
        Ok(())
    }
}

/// Three full-resolution `H×W×1` depth maps, one per scale in [`INTER_DEPTH_SCALES`].
#[derive(Debug, Clone, PartialEq)]
pub struct InterDepthSet {
    maps: Vec<Tensor>,
}

impl InterDepthSet {
    pub fn new(maps: Vec<Tensor>) -> Result<Self> {
        if maps.len() != INTER_DEPTH_SCALES.len() {
            return Err(Error::Shape(format!(
                "inter-depth set needs {} maps, got {}",
                INTER_DEPTH_SCALES.len(),
                maps.len()
            )));
        }
        for (i, m) in maps.iter().enumerate() {
            let (_, _, c) = m.dims3()?;
            if c != 1 {
                return Err(Error::Shape(format!(
                    "inter-depth map {} has {c} channels",
                    i + 1
                )));
            }
            m.ensure_same_shape(&maps[0], "inter-depth maps")?;
            if m.data().iter().any(|&v| v.is_nan() || v < 0.0) {
                return Err(Error::Argument(format!(
                    "inter-depth map {} has negative or NaN depth",
                    i + 1
                )));
            }
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }
}

/// Pixel-by-pixel cosine similarities of one feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
}

/// Unit-normalised rows of a flattened feature map. Zero rows stay zero and
/// are flagged by a zero norm.
struct UnitRows {
    unit: Vec<f64>,
    norms: Vec<f64>,
    channels: usize,
}

impl UnitRows {
    fn new(f: &Tensor) -> Result<Self> {
        let (h, w, c) = f.dims3()?;
        let n = h * w;
        let mut unit = f.data().to_vec();
        let mut norms = vec![0.0; n];
        for (row, norm) in unit.chunks_exact_mut(c).zip(norms.iter_mut()) {
            let s = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            *norm = s;
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        Ok(Self {
            unit,
            norms,
            channels: c,
        })
    }

    fn pixels(&self) -> usize {
        self.norms.len()
    }

    fn row(&self, p: usize) -> &[f64] {
        &self.unit[p * self.channels..(p + 1) * self.channels]
    }

    /// Writes the full similarity matrix into `out`. Zero vectors keep zero
    /// unit rows, so their dot products are already 0.
    fn fill(&self, out: &mut [f64]) {
        let n = self.pixels();
        for p in 0..n {
            let out_row = &mut out[p * n..(p + 1) * n];
            let u_p = self.row(p);
            for (o, u_q) in out_row
                .iter_mut()
                .zip(self.unit.chunks_exact(self.channels))
            {
                *o = u_p.iter().zip(u_q).map(|(a, b)| a * b).sum();
            }
            if self.norms[p] > 0.0 {
                out_row[p] = 1.0;
            }
        }
    }
}

/// `alpha[p][q] = f_p·f_q / (|f_p| |f_q|)` over pixels of an `H×W×C` map.
/// Zero feature vectors get similarity 0 with everything, themselves included.
pub fn pairwise_similarity(f: &Tensor) -> Result<SimilarityMatrix> {
    let rows = UnitRows::new(f)?;
    let n = rows.pixels();
    let mut values = vec![0.0; n * n];
    rows.fill(&mut values);
    Ok(SimilarityMatrix {
        values: Tensor::new(&[n, n], values)?,
    })
}

/// `sum_i 1/2^i * mean|S_i - T_i|` with gradient w.r.t. each student level.
pub fn feature_l1_pyramid(
    student: &FeaturePyramid,
    teacher: &FeaturePyramid,
) -> Result<LossResult> {
    student.ensure_matches(teacher, "student/teacher features")?;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(PYRAMID_LEVELS);
    for (i, (s, t)) in student.levels.iter().zip(&teacher.levels).enumerate() {
        let w = level_weight(i + 1);
        let n = s.len() as f64;
        let abs_sum = compensated_sum(s.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()));
        value += w * (abs_sum / n);
        grads.push(s.zip_map(t, |a, b| w * sign(a - b) / n)?);
    }
    Ok(LossResult { value, grads })
}

/// `c×c` Gram matrix `sum_p a_p b_p^T` of two unit-row sets.
fn gram(a: &UnitRows, b: &UnitRows) -> Vec<f64> {
    let c = a.channels;
    let mut sums = vec![CompensatedSum::default(); c * c];
    for (ua, ub) in a.unit.chunks_exact(c).zip(b.unit.chunks_exact(c)) {
        for (i, &x) in ua.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (s, &y) in sums[i * c..(i + 1) * c].iter_mut().zip(ub) {
                s.add(x * y);
            }
        }
    }
    sums.iter().map(CompensatedSum::value).collect()
}

fn frobenius_sq(m: &[f64]) -> f64 {
    compensated_sum(m.iter().map(|v| v * v))
}

/// One level of the structure loss: `weight / N^2 * sum_{p,q} (aS - aT)^2`
/// and its gradient w.r.t. the student map.
///
/// With unit rows `u` (student) and `v` (teacher), the double sum equals
/// `|U^T U|^2 - 2 |U^T V|^2 + |V^T V|^2`, and the gradient at pixel `r` is the
/// component of `U^T U u_r - U^T V v_r` orthogonal to `u_r`, scaled by
/// `4 weight / (N^2 |f_r|)`. Both cost `O(N C^2)`.
pub fn structure_level(student: &Tensor, teacher: &Tensor, weight: f64) -> Result<(f64, Tensor)> {
    student.ensure_same_shape(teacher, "student/teacher decoder features")?;
    let s = UnitRows::new(student)?;
    let t = UnitRows::new(teacher)?;
    let n = s.pixels();
    let c = s.channels;
    let scale = weight / (n as f64 * n as f64);

    let g_ss = gram(&s, &s);
    let g_st = gram(&s, &t);
    let g_tt = gram(&t, &t);
    let sq_sum = (frobenius_sq(&g_ss) - 2.0 * frobenius_sq(&g_st) + frobenius_sq(&g_tt)).max(0.0);

    let mut grad = vec![0.0; n * c];
    for (r, g) in grad.chunks_exact_mut(c).enumerate() {
        if s.norms[r] == 0.0 {
            continue;
        }
        let (u_r, v_r) = (s.row(r), t.row(r));
        for (i, m) in g.iter_mut().enumerate() {
            let row_ss = &g_ss[i * c..(i + 1) * c];
            let row_st = &g_st[i * c..(i + 1) * c];
            let a: f64 = row_ss.iter().zip(u_r).map(|(x, y)| x * y).sum();
            let b: f64 = row_st.iter().zip(v_r).map(|(x, y)| x * y).sum();
            *m = a - b;
        }
        let along: f64 = g.iter().zip(u_r).map(|(x, y)| x * y).sum();
        let k = 4.0 * scale / s.norms[r];
        for (m, &u) in g.iter_mut().zip(u_r) {
            *m = k * (*m - along * u);
        }
    }
    Ok((scale * sq_sum, Tensor::new(student.shape(), grad)?))
}

/// Sum over the five decoder levels of [`structure_level`] with weights `1/2^i`.
pub fn structure_distill_loss(
    student_dec: &FeaturePyramid,
    teacher_dec: &FeaturePyramid,
) -> Result<LossResult> {
    student_dec.ensure_matches(teacher_dec, "student/teacher decoder features")?;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(PYRAMID_LEVELS);
    for (i, (s, t)) in student_dec
        .levels
        .iter()
        .zip(&teacher_dec.levels)
        .enumerate()
    {
        let (v, g) = structure_level(s, t, level_weight(i + 1))?;
        value += v;
        grads.push(g);
    }
    Ok(LossResult { value, grads })
}

/// `sum_i 1/2^i * mean(U_i * |S_i - T_i|)` where `U_i` is the uncertainty of
/// the student map against the teacher map. With `detach_u` the weight is a
/// constant in the gradient; otherwise it is differentiated too.
pub fn inter_depth_distill_loss(
    student: &InterDepthSet,
    teacher: &InterDepthSet,
    beta: f64,
    detach_u: bool,
) -> Result<LossResult> {
    check_beta(beta)?;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(student.maps.len());
    for (i, (s, t)) in student.maps.iter().zip(&teacher.maps).enumerate() {
        s.ensure_same_shape(t, &format!("student/teacher inter-depth map {}", i + 1))?;
        let w = level_weight(i + 1);
        let n = s.len() as f64;
        let mut sum = CompensatedSum::default();
        let mut g = s.zeros_like();
        for ((gv, &p), &gt) in g.data_mut().iter_mut().zip(s.data()).zip(t.data()) {
            let u = uncertainty_scalar(p, gt, beta);
            let diff = p - gt;
            sum.add(u * diff.abs());
            let mut d = u * sign(diff);
            if !detach_u {
                d += diff.abs() * uncertainty_scalar_grad(p, gt, beta);
            }
            *gv = w * d / n;
        }
        value += w * (sum.value() / n);
        grads.push(g);
    }
    Ok(LossResult { value, grads })
}

#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
