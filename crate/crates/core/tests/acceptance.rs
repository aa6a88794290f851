//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcdepth::depth_loss::TERM_NAMES;
use rcdepth::distill::{structure_level, PyramidRole};
use rcdepth::gradcheck::{self, DEFAULT_POINTS};
use rcdepth::io;
use rcdepth::loss::LossResult;
use rcdepth::toy::train::{build_samples, train_on};
use rcdepth::toy::{Teacher, TrainConfig};
use rcdepth::uncertainty::{softmax2, uncertainty_scalar};
use rcdepth::{
    aggregate, evaluate, feature_l1_pyramid, inter_depth_distill_loss, pairwise_similarity,
    rectify, structure_distill_loss, total_loss, uncertainty_map, urdl, DepthMap, FeaturePyramid,
    InterDepthSet, LossWeights, Tensor,
};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi)).unwrap()
}

/// Depth map with roughly `coverage` of its pixels labelled.
fn labels(r: &mut ChaCha8Rng, h: usize, w: usize, coverage: f64) -> DepthMap {
    let t = Tensor::from_fn(&[h, w, 1], |_| {
        if r.gen_bool(coverage) {
            r.gen_range(1.0..80.0)
        } else {
            0.0
        }
    })
    .unwrap();
    DepthMap::new(t).unwrap()
}

fn pyramid(r: &mut ChaCha8Rng, role: PyramidRole, size: usize, c: usize) -> FeaturePyramid {
    let levels = (0..5)
        .map(|i| uniform(r, &[size >> i, size >> i, c], -1.0, 1.0))
        .collect();
    FeaturePyramid::new(role, levels).unwrap()
}

fn inter_set(r: &mut ChaCha8Rng, size: usize) -> InterDepthSet {
    InterDepthSet::new(
        (0..3)
            .map(|_| uniform(r, &[size, size, 1], 1.0, 60.0))
            .collect(),
    )
    .unwrap()
}

fn all_zero(res: &LossResult) -> bool {
    res.value == 0.0 && res.grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0))
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let reports = gradcheck::check_all(0).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    for r in &reports {
        ensure(r.pass, || {
            format!(
                "{} max_rel={:.3e} tol={:.0e}",
                r.op, r.max_rel_error, r.tolerance
            )
        })?;
        ensure(r.n_points >= DEFAULT_POINTS, || {
            format!("{} checked {} points", r.op, r.n_points)
        })?;
        ensure(r.n_inputs_covered == r.n_inputs, || {
            format!(
                "{} covered {}/{} inputs",
                r.op, r.n_inputs_covered, r.n_inputs
            )
        })?;
    }
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    let worst = reports
        .iter()
        .map(|r| r.max_rel_error / r.tolerance)
        .fold(0.0, f64::max);
    Ok(format!(
        "{} ops x {DEFAULT_POINTS} points, worst error/tolerance {worst:.3}, {secs:.1} s",
        reports.len()
    ))
}

fn criterion_2() -> Check {
    let mut r = rng(2);
    let mut cases = 0;
    for _ in 0..20 {
        let d = labels(&mut r, 16, 16, 0.6);
        let pred = DepthMap::new(d.tensor().map(|v| if v > 0.0 { v } else { 5.0 })).unwrap();
        for detach in [true, false] {
            let res = urdl(&pred, &d, &d, 1.0, detach).map_err(|e| e.to_string())?;
            ensure(all_zero(&res), || {
                format!("urdl detach={detach}: {}", res.value)
            })?;
            cases += 1;
        }
        for role in [PyramidRole::Camera, PyramidRole::Radar] {
            let f = pyramid(&mut r, role, 16, 4);
            let res = feature_l1_pyramid(&f, &f).unwrap();
            ensure(all_zero(&res), || format!("feature loss: {}", res.value))?;
            cases += 1;
        }
        let f = pyramid(&mut r, PyramidRole::Decoder, 16, 5);
        let res = structure_distill_loss(&f, &f).unwrap();
        ensure(all_zero(&res), || format!("structure loss: {}", res.value))?;
        let m = inter_set(&mut r, 16);
        for detach in [true, false] {
            let res = inter_depth_distill_loss(&m, &m, 1.0, detach).unwrap();
            ensure(all_zero(&res), || {
                format!("inter-depth detach={detach}: {}", res.value)
            })?;
            cases += 1;
        }
        let total = total_loss(
            &urdl(&pred, &d, &d, 1.0, true).unwrap(),
            &feature_l1_pyramid(&f, &f).unwrap(),
            &feature_l1_pyramid(&f, &f).unwrap(),
            &structure_distill_loss(&f, &f).unwrap(),
            &inter_depth_distill_loss(&m, &m, 1.0, true).unwrap(),
            &LossWeights::new([0.3, 1.0, 2.0, 0.7]).unwrap(),
        )
        .unwrap();
        ensure(all_zero(&total), || format!("total loss: {}", total.value))?;
        cases += 2;
    }
    Ok(format!(
        "{cases} identity cases give exactly zero loss and gradient"
    ))
}

fn criterion_3() -> Check {
    let mut r = rng(3);
    let n = 10_000;
    let mut worst_scale: f64 = 0.0;
    for _ in 0..n {
        let p = 10f64.powf(r.gen_range(-3.0..2.5));
        let g = 10f64.powf(r.gen_range(-3.0..2.5));
        // beta >= 0.05 keeps the exponent above -20; past about -37 the f64
        // result of 1 - exp(.) is exactly 1
        let beta = 10f64.powf(r.gen_range(-1.3..1.0));
        let k = 10f64.powf(r.gen_range(-3.0..3.0));
        let u = uncertainty_scalar(p, g, beta);
        ensure((0.0..1.0).contains(&u), || {
            format!("U({p}, {g}, {beta}) = {u}")
        })?;
        let swapped = uncertainty_scalar(g, p, beta);
        ensure(u == swapped, || format!("swap: {u} vs {swapped}"))?;
        let scaled = uncertainty_scalar(k * p, k * g, beta);
        worst_scale = worst_scale.max((u - scaled).abs());
    }
    ensure(worst_scale <= 1e-12, || {
        format!("rescaling differs by {worst_scale:e}")
    })?;
    Ok(format!(
        "{n} triples: range, exact swap symmetry, rescaling within {worst_scale:.1e}"
    ))
}

fn criterion_4() -> Check {
    let mut r = rng(4);
    let mut both = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let pred = uniform(&mut r, &[16, 16, 1], 1.0, 80.0);
        let d = labels(&mut r, 16, 16, 0.7);
        let s = labels(&mut r, 16, 16, 0.7);
        let ud = uncertainty_map(&pred, d.tensor(), 1.0).unwrap();
        let us = uncertainty_map(&pred, s.tensor(), 1.0).unwrap();
        let w = rectify(&ud, &us, &d.valid_mask(), &s.valid_mask()).unwrap();
        for p in 0..pred.len() {
            let (vd, vs) = (w.valid_dense[p], w.valid_sparse[p]);
            let (wd, ws) = (w.w_dense.data()[p], w.w_sparse.data()[p]);
            let (a, b) = (ud.values.data()[p], us.values.data()[p]);
            match (vd, vs) {
                (true, true) => {
                    both += 1;
                    worst = worst.max((wd + ws - 1.0).abs());
                    ensure(a <= b || wd > ws, || {
                        format!("U_d {a} > U_s {b} but w_d {wd} <= w_s {ws}")
                    })?;
                    ensure(b <= a || ws > wd, || {
                        format!("U_s {b} > U_d {a} but w_s {ws} <= w_d {wd}")
                    })?;
                }
                (true, false) => ensure(wd == 1.0 && ws == 0.0, || {
                    format!("dense-only pixel weights {wd}/{ws}")
                })?,
                (false, true) => ensure(wd == 0.0 && ws == 1.0, || {
                    format!("sparse-only pixel weights {wd}/{ws}")
                })?,
                (false, false) => ensure(wd == 0.0 && ws == 0.0, || {
                    format!("unlabelled pixel weights {wd}/{ws}")
                })?,
            }
        }
    }
    ensure(worst <= 1e-12, || format!("w_d + w_s off by {worst:e}"))?;
    let (lo, hi) = softmax2(0.1, 0.9);
    ensure(hi > lo, || "softmax2 is not increasing".into())?;
    Ok(format!(
        "{both} both-valid pixels: sum within {worst:.1e}, ordering preserved"
    ))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn criterion_5() -> Check {
    let mut r = rng(5);
    let mut worst_scale: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    for trial in 0..100 {
        let mut f = uniform(&mut r, &[4, 4, 3], -1.0, 1.0);
        if trial % 10 == 0 {
            f.data_mut()[3..6].fill(0.0);
        }
        let a = pairwise_similarity(&f).unwrap().values;
        let n = 16;
        for p in 0..n {
            let nonzero = f.data()[p * 3..p * 3 + 3].iter().any(|&v| v != 0.0);
            let diag = a.data()[p * n + p];
            ensure(diag == if nonzero { 1.0 } else { 0.0 }, || {
                format!("diagonal {p} = {diag}")
            })?;
            for q in 0..n {
                ensure(a.data()[p * n + q] == a.data()[q * n + p], || {
                    format!("asymmetric at ({p}, {q})")
                })?;
            }
        }
        let mut scaled = f.clone();
        for row in scaled.data_mut().chunks_exact_mut(3) {
            let k = r.gen_range(0.01..100.0);
            row.iter_mut().for_each(|v| *v *= k);
        }
        let b = pairwise_similarity(&scaled).unwrap().values;
        worst_scale = worst_scale.max(a.sub(&b).unwrap().max_abs());

        let t = uniform(&mut r, &[4, 4, 3], -1.0, 1.0);
        let weight = 0.5f64.powi(trial % 5 + 1);
        let (value, _) = structure_level(&f, &t, weight).unwrap();
        let (fs, ts) = (f.data(), t.data());
        let mut sum = 0.0;
        for p in 0..n {
            for q in 0..n {
                let d = cosine(&fs[p * 3..p * 3 + 3], &fs[q * 3..q * 3 + 3])
                    - cosine(&ts[p * 3..p * 3 + 3], &ts[q * 3..q * 3 + 3]);
                sum += d * d;
            }
        }
        let oracle = weight * sum / (n * n) as f64;
        worst_oracle = worst_oracle.max((value - oracle).abs());
    }
    ensure(worst_scale <= 1e-12, || {
        format!("rescaling changed similarity by {worst_scale:e}")
    })?;
    ensure(worst_oracle <= 1e-12, || {
        format!("structure loss off the double loop by {worst_oracle:e}")
    })?;
    Ok(format!(
        "100 maps: symmetric, unit diagonal, rescaling {worst_scale:.1e}, double-loop oracle {worst_oracle:.1e}"
    ))
}

/// Per-pixel metrics written out directly from their definitions.
fn brute_metrics(pred: &[f64], gt: &[f64], cap: f64) -> [f64; 8] {
    let pairs: Vec<(f64, f64)> = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g > 0.0 && g <= cap)
        .map(|(&p, &g)| (p, g))
        .collect();
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(f64, f64) -> f64| pairs.iter().map(|&(p, g)| f(p, g)).sum::<f64>() / n;
    let delta = |k: i32| {
        mean(&|p, g| {
            if (p / g).max(g / p) < 1.25f64.powi(k) {
                1.0
            } else {
                0.0
            }
        })
    };
    [
        mean(&|p, g| (p - g).abs()),
        mean(&|p, g| (p - g) * (p - g)).sqrt(),
        mean(&|p, g| (p - g).abs() / g),
        mean(&|p, g| (p.log10() - g.log10()).abs()),
        mean(&|p, g| (p.ln() - g.ln()).powi(2)).sqrt(),
        delta(1),
        delta(2),
        delta(3),
    ]
}

fn criterion_6() -> Check {
    let mut r = rng(6);
    let mut worst: f64 = 0.0;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut reports = Vec::new();
    for _ in 0..100 {
        let gt = labels(&mut r, 16, 16, 0.5);
        let pred = DepthMap::new(uniform(&mut r, &[16, 16, 1], 0.5, 90.0)).unwrap();
        let rep = evaluate(&pred, &gt, 80.0).map_err(|e| e.to_string())?;
        let oracle = brute_metrics(pred.data(), gt.data(), 80.0);
        for (a, b) in rep.fields().iter().zip(oracle) {
            worst = worst.max((a - b).abs());
        }
        preds.extend_from_slice(pred.data());
        gts.extend_from_slice(gt.data());
        reports.push(rep);
    }
    ensure(worst <= 1e-12, || {
        format!("metrics differ from brute force by {worst:e}")
    })?;
    let joined = evaluate(
        &DepthMap::from_vec(1600, 16, preds).unwrap(),
        &DepthMap::from_vec(1600, 16, gts).unwrap(),
        80.0,
    )
    .unwrap();
    let pooled = aggregate(&reports).unwrap();
    let agg = joined.max_abs_diff(&pooled);
    ensure(agg <= 1e-12 && joined.n_valid == pooled.n_valid, || {
        format!("aggregation off by {agg:e}")
    })?;

    let fixture = evaluate(
        &DepthMap::from_vec(1, 2, vec![1.0, 2.0]).unwrap(),
        &DepthMap::from_vec(1, 2, vec![1.0, 1.0]).unwrap(),
        80.0,
    )
    .unwrap();
    ensure(
        fixture.mae == 0.5
            && fixture.rmse == 0.5f64.sqrt()
            && fixture.absrel == 0.5
            && fixture.delta1 == 0.5,
        || format!("hand fixture gave {fixture}"),
    )?;
    Ok(format!(
        "100 pairs within {worst:.1e}, aggregation {agg:.1e}, fixture rmse={:.6}",
        fixture.rmse
    ))
}

fn criterion_7() -> Check {
    let start = Instant::now();
    let base = TrainConfig::default();
    let teacher = Teacher::new();
    let train_set = build_samples(&base.train_seeds(), base.height, base.width, &teacher).unwrap();
    let eval_set = build_samples(&base.eval_seeds(), base.height, base.width, &teacher).unwrap();
    let mut grid = Vec::with_capacity(16);
    let mut all_on_totals = Vec::new();
    for bits in 0..16u32 {
        let kd = [bits & 8 != 0, bits & 4 != 0, bits & 2 != 0, bits & 1 != 0];
        let cfg = TrainConfig {
            kd_enabled: kd,
            ..base.clone()
        };
        let h = train_on(&cfg, &train_set, &eval_set).map_err(|e| e.to_string())?;
        if bits == 15 {
            all_on_totals = h.totals();
        }
        grid.push((cfg.kd_mask(), h.final_eval.mae));
    }
    let secs = start.elapsed().as_secs_f64();
    let off = grid[0].1;
    let on = grid[15].1;
    let (best_mask, best) = grid
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap();
    ensure(on < off, || {
        format!("all-on MAE {on:.4} is not below no-KD {off:.4}")
    })?;
    ensure(on <= best * 1.02, || {
        format!("all-on MAE {on:.4} is more than 2% above {best_mask} ({best:.4})")
    })?;
    ensure(secs < 300.0, || format!("grid took {secs:.0} s"))?;
    let window = 50;
    let rises = all_on_totals
        .windows(window + 1)
        .filter(|w| w[window] > w[0])
        .count();
    ensure(rises == 0, || {
        format!("default run has {rises} rising {window}-step windows")
    })?;
    Ok(format!(
        "MAE all-on {on:.4} vs no-KD {off:.4} ({:.1}% lower), best {best_mask} {best:.4}, {secs:.1} s for 16 runs",
        100.0 * (off - on) / off
    ))
}

fn criterion_8() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["a.txt", "b.txt"] {
        let path = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_rcdepth"))
            .args(["demo", "--out", path.to_str().unwrap()])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || {
            format!("demo failed: {status:?}")
        })?;
        outputs.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    ensure(outputs[0] == outputs[1], || "history files differ".into())?;

    let mut r = rng(8);
    let mut tensors: Vec<Tensor> = (0..20)
        .map(|i| {
            let shape: Vec<usize> = (0..1 + i % 4).map(|_| r.gen_range(1..6)).collect();
            Tensor::from_fn(&shape, |_| {
                f64::from_bits(r.gen::<u64>() & !(0x7ff << 52) | (r.gen_range(1..2046u64) << 52))
            })
            .unwrap()
        })
        .collect();
    tensors.push(
        Tensor::new(
            &[5],
            vec![
                -0.0,
                f64::MIN_POSITIVE / 3.0,
                f64::MAX,
                f64::INFINITY,
                f64::NAN,
            ],
        )
        .unwrap(),
    );
    let path = dir.path().join("t.rcdt");
    io::save_all(&path, &tensors).map_err(|e| e.to_string())?;
    let back = io::load_all(&path).map_err(|e| e.to_string())?;
    ensure(back.len() == tensors.len(), || {
        "record count changed".into()
    })?;
    for (a, b) in tensors.iter().zip(&back) {
        let same = a.shape() == b.shape()
            && a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || {
            format!("round trip changed a {:?} tensor", a.shape())
        })?;
    }
    Ok(format!(
        "two demo runs byte-identical ({} bytes), {} tensors round-trip bit-exactly",
        outputs[0].len(),
        tensors.len()
    ))
}

fn criterion_9() -> Check {
    let mut r = rng(9);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let pred = DepthMap::new(uniform(&mut r, &[16, 16, 1], 1.0, 80.0)).unwrap();
        let d = labels(&mut r, 16, 16, 0.5);
        let s = labels(&mut r, 16, 16, 0.1);
        let depth = urdl(&pred, &d, &s, 1.0, true).map_err(|e| e.to_string())?;
        let kd = [
            feature_l1_pyramid(
                &pyramid(&mut r, PyramidRole::Camera, 16, 4),
                &pyramid(&mut r, PyramidRole::Camera, 16, 4),
            )
            .unwrap(),
            feature_l1_pyramid(
                &pyramid(&mut r, PyramidRole::Radar, 16, 4),
                &pyramid(&mut r, PyramidRole::Radar, 16, 4),
            )
            .unwrap(),
            structure_distill_loss(
                &pyramid(&mut r, PyramidRole::Decoder, 16, 5),
                &pyramid(&mut r, PyramidRole::Decoder, 16, 5),
            )
            .unwrap(),
            inter_depth_distill_loss(&inter_set(&mut r, 16), &inter_set(&mut r, 16), 1.0, true)
                .unwrap(),
        ];
        let total = |g: [f64; 4]| {
            total_loss(
                &depth,
                &kd[0],
                &kd[1],
                &kd[2],
                &kd[3],
                &LossWeights::new(g).unwrap(),
            )
            .unwrap()
        };

        let zero = total([0.0; 4]);
        ensure(zero.value.to_bits() == depth.value.to_bits(), || {
            format!("gamma = 0 gives {} instead of {}", zero.value, depth.value)
        })?;

        let ga: [f64; 4] = std::array::from_fn(|_| r.gen_range(0.0..2.0));
        let gb: [f64; 4] = std::array::from_fn(|_| r.gen_range(0.0..2.0));
        let gab: [f64; 4] = std::array::from_fn(|k| ga[k] + gb[k]);
        let (ta, tb, tab) = (total(ga), total(gb), total(gab));
        let lin = tab.value - depth.value - ((ta.value - depth.value) + (tb.value - depth.value));
        worst = worst.max(lin.abs());
        ensure(
            tab.grads.len() == 1 + kd.iter().map(|k| k.grads.len()).sum::<usize>(),
            || "gradient record count".into(),
        )?;
        for (i, ((a, b), c)) in ta.grads.iter().zip(&tb.grads).zip(&tab.grads).enumerate() {
            let depth_part = if i == 0 {
                depth.grads[0].clone()
            } else {
                a.zeros_like()
            };
            let combined = a.add(b).unwrap().sub(&depth_part).unwrap();
            worst = worst.max(combined.sub(c).unwrap().max_abs());
        }
        let mut manual = depth.grads.clone();
        for (k, term) in kd.iter().enumerate() {
            manual.extend(term.grads.iter().map(|g| g.scale(ga[k])));
        }
        for (m, t) in manual.iter().zip(&ta.grads) {
            worst = worst.max(m.sub(t).unwrap().max_abs());
        }
    }
    ensure(worst <= 1e-12, || {
        format!("linearity violated by {worst:e}")
    })?;
    Ok(format!(
        "gamma = 0 reproduces the {} term bit-exactly; gradients combine within {worst:.1e}",
        TERM_NAMES[0]
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient suite", criterion_1),
        ("identity laws", criterion_2),
        ("uncertainty laws", criterion_3),
        ("rectification", criterion_4),
        ("similarity laws", criterion_5),
        ("metrics oracle", criterion_6),
        ("ablation", criterion_7),
        ("determinism", criterion_8),
        ("loss linearity", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
