//! Central finite-difference verification of every closed-form gradient.
//!
//! Each registered op draws random points from a seeded generator, evaluates
//! the analytic gradient once per point, and compares selected coordinates
//! against `(f(x + eps e) - f(x - eps e)) / 2 eps`. Points are drawn away from
//! the kinks of `|.|` and ReLU; the end-to-end op additionally rejects any
//! coordinate whose perturbation flips the sign of a kink argument.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::depth_loss::{urdl, DepthMap, LossWeights};
use crate::distill::{
    feature_l1_pyramid, inter_depth_distill_loss, level_weight, structure_distill_loss,
    FeaturePyramid, InterDepthSet, PyramidRole, INTER_DEPTH_SCALES, PYRAMID_LEVELS,
};
use crate::error::{Error, Result};
use crate::tensor::{compensated_sum, CompensatedSum, Tensor};
use crate::toy::layers::{channel_project, channel_project_backward, linear, Projection};
use crate::toy::student::{inter_depth_head, inter_depth_head_backward, StudentInputs, ToyModel};
use crate::toy::teacher::Teacher;
use crate::toy::train::{objective, objective_value, Sample};
use crate::uncertainty::{rectify, uncertainty_map, uncertainty_map_grad, uncertainty_scalar};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const ELEMENTWISE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-5;
pub const END_TO_END_TOL: f64 = 1e-4;
/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;
pub const DEFAULT_POINTS: usize = 100;
/// Minimum distance of sampled points from a kink.
pub const KINK_MARGIN: f64 = 1e-3;

/// Registered op identifiers.
pub const OPS: [&str; 10] = [
    "uncertainty",
    "channel_project",
    "inter_depth_head",
    "feat_l1",
    "structure_distill",
    "inter_depth",
    "inter_depth_full",
    "urdl",
    "urdl_full",
    "end_to_end",
];

const KINK_RETRIES: usize = 16;
/// Rounding of a long accumulation, in ulps of the result.
const ACCUMULATED_ROUNDING_ULPS: f64 = 64.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub n_points: usize,
    pub n_coords: usize,
    /// Coordinates redrawn because they straddled a kink or were below the
    /// finite-difference resolution.
    pub n_resampled: usize,
    /// Input tensors with at least one checked coordinate, out of `n_inputs`.
    pub n_inputs_covered: usize,
    pub n_inputs: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    /// Single-line `key=value` record.
    pub fn record(&self) -> String {
        format!(
            "gradcheck op={} points={} coords={} resampled={} inputs={}/{} eps={:e} tol={:e} max_rel={:e} max_abs={:e} pass={}",
            self.op,
            self.n_points,
            self.n_coords,
            self.n_resampled,
            self.n_inputs_covered,
            self.n_inputs,
            self.eps,
            self.tolerance,
            self.max_rel_error,
            self.max_abs_error,
            self.pass
        )
    }

    pub fn table_header() -> String {
        format!(
            "{:<18} {:>7} {:>7} {:>11} {:>11} {:>8} {}",
            "op", "points", "coords", "max_rel", "max_abs", "tol", "result"
        )
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<18} {:>7} {:>7} {:>11.3e} {:>11.3e} {:>8.0e} {}",
            self.op,
            self.n_points,
            self.n_coords,
            self.max_rel_error,
            self.max_abs_error,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central-difference gradient of `f` at `x`, one element at a time.
pub fn finite_diff(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = x.zeros_like();
    for k in 0..x.len() {
        let x0 = x.data()[k];
        probe.data_mut()[k] = x0 + eps;
        let hi = f(&probe);
        probe.data_mut()[k] = x0 - eps;
        let lo = f(&probe);
        probe.data_mut()[k] = x0;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite(format!("function value at element {k}")));
        }
        out.data_mut()[k] = (hi - lo) / (2.0 * eps);
    }
    Ok(out)
}

pub fn default_tolerance(op: &str) -> Result<f64> {
    match op {
        "uncertainty" | "channel_project" | "inter_depth_head" | "feat_l1" | "inter_depth" => {
            Ok(ELEMENTWISE_TOL)
        }
        "structure_distill" | "inter_depth_full" | "urdl" | "urdl_full" => Ok(COMPOSITE_TOL),
        "end_to_end" => Ok(END_TO_END_TOL),
        other => Err(Error::UnknownOp(other.to_string())),
    }
}

pub fn check(op: &str, seed: u64, tolerance: f64) -> Result<GradReport> {
    check_with(op, seed, tolerance, DEFAULT_POINTS)
}

/// Every registered op at its default tolerance.
pub fn check_all(seed: u64) -> Result<Vec<GradReport>> {
    OPS.iter()
        .map(|op| check(op, seed, default_tolerance(op)?))
        .collect()
}

type ScalarFn<'a> = Box<dyn Fn(&[Tensor]) -> Result<f64> + 'a>;
type KinkFn<'a> = Box<dyn Fn(&[Tensor]) -> Result<Vec<i8>> + 'a>;

/// One random point: inputs, their analytic gradients and the scalar function.
struct Problem<'a> {
    inputs: Vec<Tensor>,
    analytic: Vec<Tensor>,
    f: ScalarFn<'a>,
    kinks: Option<KinkFn<'a>>,
    coords: Vec<(usize, usize)>,
    /// Rounding of one evaluation of `f`, in ulps of its value. Coordinates
    /// whose analytic gradient the finite difference cannot resolve at the
    /// op's tolerance are resampled; 0 disables this.
    noise_ulps: f64,
}

struct Tally {
    max_rel: f64,
    max_abs: f64,
    coords: usize,
    resampled: usize,
    covered: Vec<bool>,
}

impl Problem<'_> {
    fn run(&self, rng: &mut ChaCha8Rng, eps: f64, op_tol: f64, tally: &mut Tally) -> Result<()> {
        let mut x = self.inputs.clone();
        let min_grad = if self.noise_ulps > 0.0 {
            let f0 = (self.f)(&x)?;
            self.noise_ulps * f0.abs() * f64::EPSILON / (2.0 * eps * op_tol)
        } else {
            0.0
        };
        let base = match &self.kinks {
            Some(k) => Some(k(&x)?),
            None => None,
        };
        for &(t, k0) in &self.coords {
            let mut k = k0;
            let mut accepted = false;
            for _ in 0..KINK_RETRIES {
                if self.analytic[t].data()[k].abs() < min_grad {
                    tally.resampled += 1;
                    k = rng.gen_range(0..x[t].len());
                    continue;
                }
                let x0 = x[t].data()[k];
                x[t].data_mut()[k] = x0 + eps;
                let hi = (self.f)(&x)?;
                let sig_hi = self.kinks.as_ref().map(|f| f(&x)).transpose()?;
                x[t].data_mut()[k] = x0 - eps;
                let lo = (self.f)(&x)?;
                let sig_lo = self.kinks.as_ref().map(|f| f(&x)).transpose()?;
                x[t].data_mut()[k] = x0;
                if sig_hi != base || sig_lo != base {
                    tally.resampled += 1;
                    k = rng.gen_range(0..x[t].len());
                    continue;
                }
                if !hi.is_finite() || !lo.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "function value at input {t} element {k}"
                    )));
                }
                let numeric = (hi - lo) / (2.0 * eps);
                let analytic = self.analytic[t].data()[k];
                tally.max_rel = tally.max_rel.max(rel_error(analytic, numeric));
                tally.max_abs = tally.max_abs.max((analytic - numeric).abs());
                tally.coords += 1;
                if tally.covered.len() < x.len() {
                    tally.covered.resize(x.len(), false);
                }
                tally.covered[t] = true;
                accepted = true;
                break;
            }
            if !accepted {
                log::debug!("gradcheck: no resolvable kink-free coordinate found in input {t}");
            }
        }
        Ok(())
    }
}

/// [`check`] with an explicit number of random points.
pub fn check_with(op: &str, seed: u64, tolerance: f64, points: usize) -> Result<GradReport> {
    let index = OPS
        .iter()
        .position(|&o| o == op)
        .ok_or_else(|| Error::UnknownOp(op.to_string()))?;
    if points == 0 {
        return Err(Error::Argument("need at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(index as u64),
    );
    let teacher = (op == "end_to_end").then(Teacher::new);
    let mut tally = Tally {
        max_rel: 0.0,
        max_abs: 0.0,
        coords: 0,
        resampled: 0,
        covered: Vec::new(),
    };
    for point in 0..points {
        let sample;
        let model;
        let problem = match op {
            "uncertainty" => uncertainty_problem(&mut rng)?,
            "channel_project" => channel_project_problem(&mut rng)?,
            "inter_depth_head" => inter_head_problem(&mut rng)?,
            "feat_l1" => feat_l1_problem(&mut rng)?,
            "structure_distill" => structure_problem(&mut rng)?,
            "inter_depth" => inter_depth_problem(&mut rng, true)?,
            "inter_depth_full" => inter_depth_problem(&mut rng, false)?,
            "urdl" => urdl_problem(&mut rng, true)?,
            "urdl_full" => urdl_problem(&mut rng, false)?,
            "end_to_end" => {
                let teacher = teacher.as_ref().expect("teacher built for end_to_end");
                sample = Sample::generate(rng.gen(), 32, 32, teacher)?;
                model = ToyModel::new(rng.gen());
                end_to_end_problem(&mut rng, &model, &sample, point)?
            }
            _ => unreachable!("op index resolved above"),
        };
        problem.run(&mut rng, DEFAULT_EPS, default_tolerance(op)?, &mut tally)?;
    }
    Ok(GradReport {
        op: op.to_string(),
        max_rel_error: tally.max_rel,
        max_abs_error: tally.max_abs,
        n_points: points,
        n_coords: tally.coords,
        n_resampled: tally.resampled,
        n_inputs_covered: tally.covered.iter().filter(|&&c| c).count(),
        n_inputs: tally.covered.len(),
        eps: DEFAULT_EPS,
        tolerance,
        pass: tally.max_rel < tolerance,
    })
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Random sign times a magnitude in `[lo, hi)`.
fn signed(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    let m = rng.gen_range(lo..hi);
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

/// `per_input` random coordinates of each input.
fn coords_each(rng: &mut impl Rng, inputs: &[Tensor], per_input: usize) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(t, x)| {
            let mut idx: Vec<usize> = (0..x.len()).collect();
            idx.shuffle(rng);
            idx.truncate(per_input);
            idx.into_iter().map(move |k| (t, k))
        })
        .collect()
}

/// `sum r * (out - out0)`: FD is blind to the constant, and unchanged
/// elements cancel exactly.
fn offset_weighted_sum(r: &Tensor, out: &Tensor, out0: &Tensor) -> Result<f64> {
    out.ensure_same_shape(out0, "perturbed/base output")?;
    Ok(compensated_sum(
        r.data()
            .iter()
            .zip(out.data().iter().zip(out0.data()))
            .map(|(&w, (&a, &b))| w * (a - b)),
    ))
}

/// Like [`coords_each`] but drawn from the nonzero analytic entries when any exist.
fn coords_nonzero(
    rng: &mut impl Rng,
    analytic: &[Tensor],
    per_input: usize,
) -> Vec<(usize, usize)> {
    analytic
        .iter()
        .enumerate()
        .flat_map(|(t, g)| {
            let mut idx: Vec<usize> = (0..g.len()).filter(|&k| g.data()[k] != 0.0).collect();
            if idx.is_empty() {
                idx = (0..g.len()).collect();
            }
            idx.shuffle(rng);
            idx.truncate(per_input);
            idx.into_iter().map(move |k| (t, k))
        })
        .collect()
}

fn uncertainty_problem(rng: &mut ChaCha8Rng) -> Result<Problem<'static>> {
    let beta = rng.gen_range(0.5..2.0);
    let gt = uniform(rng, &[2, 2, 1], 0.5, 10.0)?;
    let pred = gt.map(|g| g * (1.0 + signed(rng, 0.01, 0.9)));
    let analytic = vec![uncertainty_map_grad(&pred, &gt, beta)?];
    let u0 = uncertainty_map(&pred, &gt, beta)?.values;
    let ones = Tensor::ones(pred.shape())?;
    let inputs = vec![pred];
    let coords = coords_each(rng, &inputs, 4);
    Ok(Problem {
        inputs,
        analytic,
        f: Box::new(move |x| {
            offset_weighted_sum(&ones, &uncertainty_map(&x[0], &gt, beta)?.values, &u0)
        }),
        kinks: None,
        coords,
        noise_ulps: 0.0,
    })
}

fn channel_project_problem(rng: &mut ChaCha8Rng) -> Result<Problem<'static>> {
    let (f, p) = loop {
        let f = uniform(rng, &[4, 4, 3], 0.05, 1.0)?;
        let w = Tensor::from_fn(&[3, 4], |_| signed(rng, 0.05, 1.0))?;
        let b = Tensor::from_fn(&[4], |_| signed(rng, 0.05, 0.5))?;
        let p = Projection::new(w, b)?;
        if linear(&f, &p)?
            .data()
            .iter()
            .all(|z| z.abs() >= KINK_MARGIN)
        {
            break (f, p);
        }
    };
    // positive weights on one output channel, so no coordinate cancels
    let o = rng.gen_range(0..4);
    let r = Tensor::from_fn(&[4, 4, 4], |k| {
        if k % 4 == o {
            rng.gen_range(0.5..1.5)
        } else {
            0.0
        }
    })?;
    let g = channel_project_backward(&f, &p, &r)?;
    let out0 = channel_project(&f, &p)?;
    let analytic = vec![g.d_input, g.d_weight, g.d_bias];
    let coords = coords_nonzero(rng, &analytic, 3);
    Ok(Problem {
        inputs: vec![f, p.weight, p.bias],
        analytic,
        f: Box::new(move |x| {
            let p = Projection::new(x[1].clone(), x[2].clone())?;
            offset_weighted_sum(&r, &channel_project(&x[0], &p)?, &out0)
        }),
        kinks: None,
        coords,
        noise_ulps: 0.0,
    })
}

fn inter_head_problem(rng: &mut ChaCha8Rng) -> Result<Problem<'static>> {
    let k = *INTER_DEPTH_SCALES.choose(rng).expect("non-empty");
    let c = 8;
    let dec = uniform(rng, &[4, 4, c], 0.05, 1.0)?;
    let w = Tensor::from_fn(&[c, 1], |_| signed(rng, 0.05, 0.5))?;
    let b = Tensor::from_fn(&[1], |_| signed(rng, 0.05, 0.5))?;
    let head = Projection::new(w, b)?;
    let r = uniform(rng, &[4 * k, 4 * k, 1], 0.5, 1.5)?;
    let g = inter_depth_head_backward(&dec, &head, k, &r)?;
    let out0 = inter_depth_head(&dec, &head, k)?;
    let analytic = vec![g.d_input, g.d_weight, g.d_bias];
    let coords = coords_nonzero(rng, &analytic, 3);
    Ok(Problem {
        inputs: vec![dec, head.weight, head.bias],
        analytic,
        f: Box::new(move |x| {
            let head = Projection::new(x[1].clone(), x[2].clone())?;
            offset_weighted_sum(&r, &inter_depth_head(&x[0], &head, k)?, &out0)
        }),
        kinks: None,
        coords,
        noise_ulps: 0.0,
    })
}

fn random_levels(
    rng: &mut impl Rng,
    base: usize,
    c: usize,
    lo: f64,
    hi: f64,
) -> Result<Vec<Tensor>> {
    (1..=PYRAMID_LEVELS)
        .map(|i| uniform(rng, &[base >> i, base >> i, c], lo, hi))
        .collect()
}

/// Feature levels whose pixel vectors have uniform random directions and norms in `[lo, hi)`.
fn random_vector_levels(
    rng: &mut impl Rng,
    base: usize,
    c: usize,
    lo: f64,
    hi: f64,
) -> Result<Vec<Tensor>> {
    (1..=PYRAMID_LEVELS)
        .map(|i| {
            let n = (base >> i) * (base >> i);
            let mut data = Vec::with_capacity(n * c);
            for _ in 0..n {
                let v: Vec<f64> = loop {
                    let v: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if (0.1..=1.0).contains(&norm) {
                        break v.iter().map(|a| a / norm).collect();
                    }
                };
                let m = rng.gen_range(lo..hi);
                data.extend(v.iter().map(|a| a * m));
            }
            Tensor::new(&[base >> i, base >> i, c], data)
        })
        .collect()
}

fn feat_l1_problem(rng: &mut ChaCha8Rng) -> Result<Problem<'static>> {
    let student = random_levels(rng, 32, 2, 0.0, 1.0)?;
    let teacher = student
        .iter()
        .map(|s| s.map(|v| v + signed(rng, KINK_MARGIN, 0.05)))
        .collect();
    let teacher = FeaturePyramid::new(PyramidRole::Camera, teacher)?;
    let analytic = feature_l1_pyramid(
        &FeaturePyramid::new(PyramidRole::Camera, student.clone())?,
        &teacher,
    )?
    .grads;
    let coords = coords_each(rng, &student, 2);
    Ok(Problem {
        inputs: student,
        analytic,
        f: Box::new(move |x| {
            Ok(feature_l1_pyramid(
                &FeaturePyramid::new(PyramidRole::Camera, x.to_vec())?,
                &teacher,
            )?
            .value)
        }),
        kinks: None,
        coords,
        noise_ulps: 0.0,
    })
}

fn structure_problem(rng: &mut ChaCha8Rng) -> Result<Problem<'static>> {
    // small norms give large gradients at the same loss value (cosines are
    // scale-free); a norm floor keeps eps small relative to every vector
    let student = random_vector_levels(rng, 64, 3, 0.05, 0.1)?;
    let teacher = FeaturePyramid::new(PyramidRole::Decoder, random_levels(rng, 64, 3, -1.0, 1.0)?)?;
    let analytic = structure_distill_loss(
        &FeaturePyramid::new(PyramidRole::Decoder, student.clone())?,
        &teacher,
    )?
    .grads;
    let coords = coords_each(rng, &student, 2);
    Ok(Problem {
        inputs: student,
        analytic,
        f: Box::new(move |x| {
            Ok(structure_distill_loss(
                &FeaturePyramid::new(PyramidRole::Decoder, x.to_vec())?,
                &teacher,
            )?
            .value)
        }),
        kinks: None,
        coords,
        noise_ulps: ACCUMULATED_ROUNDING_ULPS,
    })
}

fn inter_depth_problem(rng: &mut ChaCha8Rng, detach_u: bool) -> Result<Problem<'static>> {
    let beta = rng.gen_range(0.5..2.0);
    let teacher: Vec<Tensor> = (0..INTER_DEPTH_SCALES.len())
        .map(|_| uniform(rng, &[8, 8, 1], 1.0, 20.0))
        .collect::<Result<_>>()?;
    let student: Vec<Tensor> = teacher
        .iter()
        .map(|t| t.map(|v| v * (1.0 + signed(rng, 0.01, 0.5))))
        .collect();
    let t_set = InterDepthSet::new(teacher)?;
    let analytic = inter_depth_distill_loss(
        &InterDepthSet::new(student.clone())?,
        &t_set,
        beta,
        detach_u,
    )?
    .grads;
    let coords = coords_each(rng, &student, 3);
    let f: ScalarFn<'static> = if detach_u {
        // U frozen at the base point; offset by the base value so unchanged terms cancel
        let base = student.clone();
        let frozen: Vec<Vec<f64>> = student
            .iter()
            .zip(t_set.maps())
            .map(|(s, t)| {
                s.data()
                    .iter()
                    .zip(t.data())
                    .map(|(&p, &g)| uncertainty_scalar(p, g, beta))
                    .collect()
            })
            .collect();
        Box::new(move |x| {
            let mut total = CompensatedSum::default();
            for (i, ((s, t), (u, s0))) in x
                .iter()
                .zip(t_set.maps())
                .zip(frozen.iter().zip(&base))
                .enumerate()
            {
                let k = level_weight(i + 1) / s.len() as f64;
                for (((&p, &g), &w), &p0) in s.data().iter().zip(t.data()).zip(u).zip(s0.data()) {
                    total.add(k * w * ((p - g).abs() - (p0 - g).abs()));
                }
            }
            Ok(total.value())
        })
    } else {
        Box::new(move |x| {
            Ok(
                inter_depth_distill_loss(&InterDepthSet::new(x.to_vec())?, &t_set, beta, false)?
                    .value,
            )
        })
    };
    Ok(Problem {
        inputs: student,
        analytic,
        f,
        kinks: None,
        coords,
        noise_ulps: 0.0,
    })
}

fn urdl_problem(rng: &mut ChaCha8Rng, detach_u: bool) -> Result<Problem<'static>> {
    let beta = rng.gen_range(0.5..2.0);
    let n = 64;
    let pred = uniform(rng, &[8, 8, 1], 1.0, 50.0)?;
    let measured = |rate: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut v: Vec<f64> = pred
            .data()
            .iter()
            .map(|&p| {
                if rng.gen_bool(rate) {
                    p * (1.0 + signed(rng, 0.01, 0.5))
                } else {
                    0.0
                }
            })
            .collect();
        if v.iter().all(|&d| d == 0.0) {
            let k = rng.gen_range(0..n);
            v[k] = pred.data()[k] * 1.1;
        }
        v
    };
    let dense = DepthMap::from_vec(8, 8, measured(0.6, rng))?;
    let sparse = DepthMap::from_vec(8, 8, measured(0.3, rng))?;
    let p_map = DepthMap::new(pred.clone())?;
    let analytic = urdl(&p_map, &dense, &sparse, beta, detach_u)?.grads;

    let valid: Vec<usize> = (0..n)
        .filter(|&k| dense.data()[k] > 0.0 || sparse.data()[k] > 0.0)
        .collect();
    let coords = valid.choose_multiple(rng, 6).map(|&k| (0, k)).collect();

    let f: ScalarFn<'static> = if detach_u {
        // rectified weights frozen at the base point, offset as above
        let base = pred.clone();
        let u_d = uncertainty_map(&pred, dense.tensor(), beta)?;
        let u_s = uncertainty_map(&pred, sparse.tensor(), beta)?;
        let w = rectify(&u_d, &u_s, &dense.valid_mask(), &sparse.valid_mask())?;
        let n_d = dense.n_valid() as f64;
        let n_s = sparse.n_valid() as f64;
        Box::new(move |x| {
            let mut total = CompensatedSum::default();
            for (k, (&p, &p0)) in x[0].data().iter().zip(base.data()).enumerate() {
                let (d, s) = (dense.data()[k], sparse.data()[k]);
                if d > 0.0 {
                    total.add(w.w_dense.data()[k] * ((d - p).abs() - (d - p0).abs()) / n_d);
                }
                if s > 0.0 {
                    total.add(w.w_sparse.data()[k] * ((s - p).abs() - (s - p0).abs()) / n_s);
                }
            }
            Ok(total.value())
        })
    } else {
        Box::new(move |x| {
            Ok(urdl(&DepthMap::new(x[0].clone())?, &dense, &sparse, beta, false)?.value)
        })
    };
    Ok(Problem {
        inputs: vec![pred],
        analytic,
        f,
        kinks: None,
        coords,
        noise_ulps: 0.0,
    })
}

fn with_params(template: &ToyModel, params: &[Tensor]) -> ToyModel {
    let mut m = template.clone();
    for (dst, src) in m.params_mut().into_iter().zip(params) {
        dst.data_mut().copy_from_slice(src.data());
    }
    m
}

fn sign_of(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Signs of every ReLU pre-activation and every `|.|` argument of the objective.
fn kink_signature(model: &ToyModel, sample: &Sample) -> Result<Vec<i8>> {
    let inputs: &StudentInputs = &sample.inputs;
    let mut sig: Vec<i8> = model
        .pre_activations(inputs)?
        .into_iter()
        .map(sign_of)
        .collect();
    let out = model.forward(inputs)?;
    let t = &sample.teacher;
    for gt in [&sample.scene.gt_dense, &sample.scene.gt_sparse] {
        for (&p, &g) in out.depth.data().iter().zip(gt.data()) {
            if g > 0.0 {
                sig.push(sign_of(p - g));
            }
        }
    }
    for (s, tp) in [(&out.camera, &t.camera), (&out.radar, &t.radar)] {
        for (a, b) in s.levels().iter().zip(tp.levels()) {
            sig.extend(a.data().iter().zip(b.data()).map(|(x, y)| sign_of(x - y)));
        }
    }
    for (a, b) in out.inter.maps().iter().zip(t.lpg.maps()) {
        sig.extend(a.data().iter().zip(b.data()).map(|(x, y)| sign_of(x - y)));
    }
    Ok(sig)
}

const E2E_TENSORS_PER_POINT: usize = 4;

fn end_to_end_problem<'a>(
    rng: &mut ChaCha8Rng,
    model: &'a ToyModel,
    sample: &'a Sample,
    point: usize,
) -> Result<Problem<'a>> {
    let gamma = LossWeights::default();
    let beta = 1.0;
    let (_, grads) = objective(model, sample, &gamma, beta, false)?;
    let inputs: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let analytic: Vec<Tensor> = grads.params().into_iter().cloned().collect();
    let n = inputs.len();
    let coords = (0..E2E_TENSORS_PER_POINT)
        .map(|j| {
            let t = (point * E2E_TENSORS_PER_POINT + j) % n;
            (t, rng.gen_range(0..inputs[t].len()))
        })
        .collect();
    Ok(Problem {
        inputs,
        analytic,
        f: Box::new(move |x| {
            Ok(objective_value(&with_params(model, x), sample, &gamma, beta)?.total)
        }),
        kinks: Some(Box::new(move |x| {
            kink_signature(&with_params(model, x), sample)
        })),
        coords,
        noise_ulps: ACCUMULATED_ROUNDING_ULPS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_simple_functions() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff(|t| t.data().iter().map(|v| v * v).sum(), &x, DEFAULT_EPS).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-9 && (g.data()[1] - 4.0).abs() < 1e-9);

        let c = finite_diff(|_| 3.5, &x, DEFAULT_EPS).unwrap();
        assert_eq!(c.max_abs(), 0.0);

        let y = Tensor::new(&[2], vec![3.0, -3.0]).unwrap();
        let a = finite_diff(
            |t| t.data().iter().map(|v| v.abs()).sum::<f64>() / 2.0,
            &y,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!((a.data()[0] - 0.5).abs() < 1e-9 && (a.data()[1] + 0.5).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_errors() {
        let x = Tensor::ones(&[1]).unwrap();
        assert!(finite_diff(|_| f64::NAN, &x, DEFAULT_EPS).is_err());
        assert!(finite_diff(|_| 0.0, &x, 0.0).is_err());
    }

    #[test]
    fn rel_error_uses_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert_eq!(rel_error(1e-10, 0.0), 1e-10 / REL_FLOOR);
        assert_eq!(rel_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn unknown_op_and_zero_tolerance() {
        assert!(matches!(check("nope", 0, 1e-5), Err(Error::UnknownOp(_))));
        let r = check_with("uncertainty", 0, 0.0, 3).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn elementwise_ops_pass() {
        for op in [
            "uncertainty",
            "channel_project",
            "inter_depth_head",
            "feat_l1",
            "inter_depth",
        ] {
            let r = check(op, 0, ELEMENTWISE_TOL).unwrap();
            assert!(r.pass, "{r}");
            assert!(r.n_points >= 100 && r.n_coords >= 100);
        }
    }

    #[test]
    fn composite_ops_pass() {
        assert!(check("urdl", 0, COMPOSITE_TOL).unwrap().pass);
        assert!(check("urdl_full", 0, COMPOSITE_TOL).unwrap().pass);
        assert!(check("inter_depth_full", 0, COMPOSITE_TOL).unwrap().pass);
        assert!(check("structure_distill", 1, COMPOSITE_TOL).unwrap().pass);
    }

    #[test]
    fn record_is_single_line() {
        let r = check_with("uncertainty", 0, ELEMENTWISE_TOL, 2).unwrap();
        assert!(!r.record().contains('\n'));
        assert!(r.record().starts_with("gradcheck op=uncertainty "));
    }
}
