//! Depth evaluation metrics over a distance-capped valid set
//! `{p : 0 < gt(p) <= cap}`.

use std::fmt;

use crate::depth_loss::DepthMap;
use crate::error::{Error, Result};

/// Evaluation distances in meters.
pub const DEFAULT_CAPS: [f64; 3] = [50.0, 70.0, 80.0];

/// Threshold bases of the `delta_k` accuracies: `max(p/g, g/p) < 1.25^k`.
pub const DELTA_BASE: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub absrel: f64,
    pub log10: f64,
    pub rmselog: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_valid: usize,
    pub cap: f64,
}

/// Per-pixel sums, from which every report field is a mean or a root mean.
#[derive(Debug, Default, Clone, Copy)]
struct Sums {
    abs: f64,
    sq: f64,
    rel: f64,
    log10: f64,
    sq_log: f64,
    hits: [f64; 3],
    n: usize,
}

impl Sums {
    fn push(&mut self, p: f64, g: f64) {
        let d = p - g;
        self.abs += d.abs();
        self.sq += d * d;
        self.rel += d.abs() / g;
        self.log10 += (p.log10() - g.log10()).abs();
        let l = p.ln() - g.ln();
        self.sq_log += l * l;
        let ratio = (p / g).max(g / p);
        let mut thr = 1.0;
        for hit in &mut self.hits {
            thr *= DELTA_BASE;
            if ratio < thr {
                *hit += 1.0;
            }
        }
        self.n += 1;
    }

    fn from_report(r: &EvalReport) -> Self {
        let n = r.n_valid as f64;
        Self {
            abs: r.mae * n,
            sq: r.rmse * r.rmse * n,
            rel: r.absrel * n,
            log10: r.log10 * n,
            sq_log: r.rmselog * r.rmselog * n,
            hits: [r.delta1 * n, r.delta2 * n, r.delta3 * n],
            n: r.n_valid,
        }
    }

    fn add(&mut self, o: &Sums) {
        self.abs += o.abs;
        self.sq += o.sq;
        self.rel += o.rel;
        self.log10 += o.log10;
        self.sq_log += o.sq_log;
        for (a, b) in self.hits.iter_mut().zip(o.hits) {
            *a += b;
        }
        self.n += o.n;
    }

    fn report(&self, cap: f64) -> EvalReport {
        let n = self.n as f64;
        EvalReport {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            absrel: self.rel / n,
            log10: self.log10 / n,
            rmselog: (self.sq_log / n).sqrt(),
            delta1: self.hits[0] / n,
            delta2: self.hits[1] / n,
            delta3: self.hits[2] / n,
            n_valid: self.n,
            cap,
        }
    }
}

pub fn evaluate(pred: &DepthMap, gt: &DepthMap, cap: f64) -> Result<EvalReport> {
    if cap.is_nan() || cap <= 0.0 {
        return Err(Error::Argument(format!(
            "evaluation cap must be positive, got {cap}"
        )));
    }
    pred.tensor()
        .ensure_same_shape(gt.tensor(), "prediction/ground truth")?;
    let mut sums = Sums::default();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if !(g > 0.0 && g <= cap) {
            continue;
        }
        if p.is_nan() || p <= 0.0 {
            return Err(Error::NonPositivePrediction { index: i, value: p });
        }
        sums.push(p, g);
    }
    if sums.n == 0 {
        return Err(Error::EmptyValidSet(format!(
            "no ground truth within (0, {cap}] m"
        )));
    }
    Ok(sums.report(cap))
}

/// Pixel-weighted pooling of per-frame reports; equals evaluating the
/// concatenated frames. Reports with `n_valid == 0` contribute nothing.
pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
    let Some(first) = reports.first() else {
        return Err(Error::EmptyValidSet("no reports to aggregate".into()));
    };
    let mut sums = Sums::default();
    for r in reports {
        if r.cap != first.cap {
            return Err(Error::MixedCaps(first.cap, r.cap));
        }
        if r.n_valid > 0 {
            sums.add(&Sums::from_report(r));
        }
    }
    if sums.n == 0 {
        return Err(Error::EmptyValidSet("all reports are empty".into()));
    }
    Ok(sums.report(first.cap))
}

impl EvalReport {
    /// Largest absolute difference over the eight metric fields.
    pub fn max_abs_diff(&self, other: &EvalReport) -> f64 {
        self.fields()
            .iter()
            .zip(other.fields())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn fields(&self) -> [f64; 8] {
        [
            self.mae,
            self.rmse,
            self.absrel,
            self.log10,
            self.rmselog,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cap={} n_valid={} mae={} rmse={} absrel={} log10={} rmselog={} delta1={} delta2={} delta3={}",
            self.cap,
            self.n_valid,
            self.mae,
            self.rmse,
            self.absrel,
            self.log10,
            self.rmselog,
            self.delta1,
            self.delta2,
            self.delta3
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> DepthMap {
        DepthMap::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn identity() {
        let g = row(&[1.0, 5.0, 30.0, 79.0]);
        let r = evaluate(&g, &g, 80.0).unwrap();
        assert_eq!(
            (r.mae, r.rmse, r.absrel, r.log10, r.rmselog),
            (0.0, 0.0, 0.0, 0.0, 0.0)
        );
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
        assert_eq!(r.n_valid, 4);
    }

    #[test]
    fn two_pixel_fixture() {
        let r = evaluate(&row(&[2.0, 4.0]), &row(&[1.0, 4.0]), 80.0).unwrap();
        assert_eq!(r.mae, 0.5);
        assert!((r.rmse - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.absrel, 0.5);
        assert_eq!(r.delta1, 0.5);
        assert_eq!(r.delta3, 0.5);
    }

    #[test]
    fn cap_masks_ground_truth() {
        let r = evaluate(&row(&[31.0, 1.0]), &row(&[30.0, 60.0]), 50.0).unwrap();
        assert_eq!(r.n_valid, 1);
        assert_eq!(r.mae, 1.0);
    }

    #[test]
    fn delta_threshold_is_strict() {
        let r = evaluate(&row(&[1.25]), &row(&[1.0]), 80.0).unwrap();
        assert_eq!((r.delta1, r.delta2), (0.0, 1.0));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            evaluate(&row(&[1.0]), &row(&[90.0]), 80.0),
            Err(Error::EmptyValidSet(_))
        ));
        assert!(matches!(
            evaluate(&row(&[0.0, 1.0]), &row(&[3.0, 1.0]), 80.0),
            Err(Error::NonPositivePrediction { index: 0, .. })
        ));
        assert!(evaluate(&row(&[1.0]), &row(&[1.0, 2.0]), 80.0).is_err());
        assert!(evaluate(&row(&[1.0]), &row(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn aggregate_rules() {
        let a = evaluate(&row(&[2.0, 4.0]), &row(&[1.0, 4.0]), 80.0).unwrap();
        assert!(aggregate(&[a]).unwrap().max_abs_diff(&a) < 1e-15);
        let empty = EvalReport {
            n_valid: 0,
            mae: f64::NAN,
            ..a
        };
        let pooled = aggregate(&[a, empty]).unwrap();
        assert!(pooled.max_abs_diff(&a) < 1e-15);
        assert_eq!(pooled.n_valid, 2);
        let other_cap = EvalReport { cap: 50.0, ..a };
        assert!(matches!(
            aggregate(&[a, other_cap]),
            Err(Error::MixedCaps(..))
        ));
        assert!(aggregate(&[]).is_err());
    }
}
