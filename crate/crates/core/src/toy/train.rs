//! Full-batch gradient descent of the student on the weighted objective, and
//! the line-delimited training history.
//!
//! History format (UTF-8 text, one record per line):
//!
//! ```text
//! # rcdepth-history v1
//! # kd=1111 gamma=1,1,1,1 beta=1 detach_u=true steps=450 lr=0.002 seed=0 train=4 eval=4 size=32x32
//! step=1 total=<f64> depth=<f64> kd_image=<f64> kd_radar=<f64> kd_decoder=<f64> kd_depth=<f64>
//! step=25 total=... kd_depth=... cap=80 n_valid=.. mae=.. rmse=.. absrel=.. log10=.. rmselog=.. delta1=.. delta2=.. delta3=..
//! ```
//!
//! Loss fields are the training-set means before that step's update. Records
//! at evaluation steps append the held-out [`EvalReport`] after the update.
//! Floats use Rust's shortest round-trip formatting.

use std::fmt::Write as _;

use crate::depth_loss::{total_loss, urdl, LossWeights, TERM_NAMES};
use crate::distill::{
    feature_l1_pyramid, inter_depth_distill_loss, structure_distill_loss, PYRAMID_LEVELS,
};
use crate::error::{Error, Result};
use crate::loss::LossResult;
use crate::metrics::{aggregate, evaluate, EvalReport};
use crate::uncertainty::DEFAULT_BETA;

use super::scene::{gen_scene, Scene};
use super::student::{OutputGrads, StudentInputs, StudentOutput, ToyModel};
use super::teacher::{Teacher, TeacherOutput};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub gamma: LossWeights,
    pub beta: f64,
    pub detach_u: bool,
    pub steps: usize,
    pub lr: f64,
    /// Seeds the student initialisation and every scene.
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub height: usize,
    pub width: usize,
    /// Camera, radar, decoder-structure, inter-depth.
    pub kd_enabled: [bool; 4],
    pub eval_every: usize,
    pub cap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: LossWeights::default(),
            beta: DEFAULT_BETA,
            detach_u: true,
            steps: 450,
            lr: 0.002,
            seed: 0,
            train_scenes: 4,
            eval_scenes: 4,
            height: 32,
            width: 32,
            kd_enabled: [true; 4],
            eval_every: 25,
            cap: 80.0,
        }
    }
}

impl TrainConfig {
    pub fn kd_mask(&self) -> String {
        self.kd_enabled
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }

    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.train_scenes as u64)
            .map(|i| self.seed.wrapping_mul(1000).wrapping_add(i))
            .collect()
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        (0..self.eval_scenes as u64)
            .map(|i| self.seed.wrapping_mul(1000).wrapping_add(500 + i))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Argument("steps must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return Err(Error::Argument(
                "need at least one training and one held-out scene".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::Argument("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// A scene with its cached student inputs and frozen teacher outputs.
#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: Scene,
    pub inputs: StudentInputs,
    pub teacher: TeacherOutput,
}

impl Sample {
    pub fn new(scene: Scene, teacher: &Teacher) -> Result<Self> {
        Ok(Self {
            inputs: StudentInputs::new(&scene)?,
            teacher: teacher.forward(&scene)?,
            scene,
        })
    }

    pub fn generate(seed: u64, h: usize, w: usize, teacher: &Teacher) -> Result<Self> {
        Self::new(gen_scene(seed, h, w)?, teacher)
    }
}

/// Values of the five objective terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub terms: [f64; 5],
    pub total: f64,
}

struct Evaluated {
    out: StudentOutput,
    total: LossResult,
    objective: Objective,
}

fn evaluate_objective(
    model: &ToyModel,
    sample: &Sample,
    gamma: &LossWeights,
    beta: f64,
    detach_u: bool,
) -> Result<Evaluated> {
    let out = model.forward(&sample.inputs)?;
    let t = &sample.teacher;
    let depth = urdl(
        &out.depth,
        &sample.scene.gt_dense,
        &sample.scene.gt_sparse,
        beta,
        detach_u,
    )?;
    let kd_i = feature_l1_pyramid(&out.camera, &t.camera)?;
    let kd_r = feature_l1_pyramid(&out.radar, &t.radar)?;
    let kd_dec = structure_distill_loss(&out.decoder, &t.decoder)?;
    let kd_d = inter_depth_distill_loss(&out.inter, &t.lpg, beta, detach_u)?;
    let total = total_loss(&depth, &kd_i, &kd_r, &kd_dec, &kd_d, gamma)?;
    let objective = Objective {
        terms: [
            depth.value,
            kd_i.value,
            kd_r.value,
            kd_dec.value,
            kd_d.value,
        ],
        total: total.value,
    };
    Ok(Evaluated {
        out,
        total,
        objective,
    })
}

/// Objective of one sample without the backward pass.
pub fn objective_value(
    model: &ToyModel,
    sample: &Sample,
    gamma: &LossWeights,
    beta: f64,
) -> Result<Objective> {
    Ok(evaluate_objective(model, sample, gamma, beta, true)?.objective)
}

/// Objective value of one sample and its gradient w.r.t. every student parameter.
pub fn objective(
    model: &ToyModel,
    sample: &Sample,
    gamma: &LossWeights,
    beta: f64,
    detach_u: bool,
) -> Result<(Objective, ToyModel)> {
    let e = evaluate_objective(model, sample, gamma, beta, detach_u)?;
    let g = &e.total.grads;
    let p = PYRAMID_LEVELS;
    let grads = model.backward(
        &sample.inputs,
        &e.out,
        &OutputGrads {
            depth: &g[0],
            camera: &g[1..1 + p],
            radar: &g[1 + p..1 + 2 * p],
            decoder: &g[1 + 2 * p..1 + 3 * p],
            inter: &g[1 + 3 * p..],
        },
    )?;
    Ok((e.objective, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub objective: Objective,
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHistory {
    pub config: TrainConfig,
    pub records: Vec<StepRecord>,
    pub final_eval: EvalReport,
    pub model: ToyModel,
}

impl TrainingHistory {
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::from("# rcdepth-history v1\n");
        let g = c.gamma.gamma;
        writeln!(
            s,
            "# kd={} gamma={},{},{},{} beta={} detach_u={} steps={} lr={} seed={} train={} eval={} size={}x{}",
            c.kd_mask(),
            g[0],
            g[1],
            g[2],
            g[3],
            c.beta,
            c.detach_u,
            c.steps,
            c.lr,
            c.seed,
            c.train_scenes,
            c.eval_scenes,
            c.height,
            c.width
        )
        .unwrap();
        for r in &self.records {
            write!(s, "step={} total={}", r.step, r.objective.total).unwrap();
            for (name, v) in TERM_NAMES.iter().zip(r.objective.terms) {
                write!(s, " {name}={v}").unwrap();
            }
            if let Some(e) = &r.eval {
                write!(s, " {e}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective.total).collect()
    }
}

/// Held-out evaluation of the student against the accumulated depth maps.
pub fn evaluate_model(model: &ToyModel, samples: &[Sample], cap: f64) -> Result<EvalReport> {
    let reports = samples
        .iter()
        .map(|s| {
            let out = model.forward(&s.inputs)?;
            evaluate(&out.depth, &s.scene.depth_full, cap)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&reports)
}

/// Same evaluation for the teacher's final depth.
pub fn evaluate_teacher(samples: &[Sample], cap: f64) -> Result<EvalReport> {
    let reports = samples
        .iter()
        .map(|s| evaluate(&s.teacher.depth, &s.scene.depth_full, cap))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&reports)
}

pub fn build_samples(seeds: &[u64], h: usize, w: usize, teacher: &Teacher) -> Result<Vec<Sample>> {
    seeds
        .iter()
        .map(|&s| Sample::generate(s, h, w, teacher))
        .collect()
}

pub fn train(config: &TrainConfig) -> Result<TrainingHistory> {
    config.validate()?;
    let teacher = Teacher::new();
    let train_set = build_samples(&config.train_seeds(), config.height, config.width, &teacher)?;
    let eval_set = build_samples(&config.eval_seeds(), config.height, config.width, &teacher)?;
    train_on(config, &train_set, &eval_set)
}

/// [`train`] on prebuilt samples.
pub fn train_on(
    config: &TrainConfig,
    train_set: &[Sample],
    eval_set: &[Sample],
) -> Result<TrainingHistory> {
    config.validate()?;
    let gamma = config.gamma.masked(config.kd_enabled);
    let mut model = ToyModel::new(config.seed);
    let scale = 1.0 / train_set.len() as f64;
    let mut records = Vec::with_capacity(config.steps);
    let mut last_eval = None;

    for step in 1..=config.steps {
        let mut grad = model.zeros_like();
        let mut mean = Objective {
            terms: [0.0; 5],
            total: 0.0,
        };
        for sample in train_set {
            let (obj, g) = objective(&model, sample, &gamma, config.beta, config.detach_u)
                .map_err(|e| match e {
                    Error::NonFinite(term) => Error::Divergence { step, term },
                    other => other,
                })?;
            grad.add_scaled(&g, scale)?;
            for (m, v) in mean.terms.iter_mut().zip(obj.terms) {
                *m += scale * v;
            }
            mean.total += scale * obj.total;
        }
        if !mean.total.is_finite() {
            return Err(Error::Divergence {
                step,
                term: "total".into(),
            });
        }
        model.add_scaled(&grad, -config.lr)?;
        if !model.params().iter().all(|p| p.all_finite()) {
            return Err(Error::Divergence {
                step,
                term: "parameters".into(),
            });
        }

        let eval = if step % config.eval_every == 0 || step == config.steps {
            let e = evaluate_model(&model, eval_set, config.cap)?;
            last_eval = Some(e);
            Some(e)
        } else {
            None
        };
        records.push(StepRecord {
            step,
            objective: mean,
            eval,
        });
    }

    Ok(TrainingHistory {
        config: config.clone(),
        records,
        final_eval: last_eval.expect("the last step always evaluates"),
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            steps: 3,
            train_scenes: 1,
            eval_scenes: 1,
            eval_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn records_every_step_and_evaluates_periodically() {
        let h = train(&small()).unwrap();
        assert_eq!(h.records.len(), 3);
        assert!(h.records[0].eval.is_none());
        assert!(h.records[1].eval.is_some());
        assert_eq!(h.records[2].eval, Some(h.final_eval));
        let text = h.to_text();
        assert_eq!(text.lines().filter(|l| l.starts_with("step=")).count(), 3);
    }

    #[test]
    fn kd_off_optimises_depth_alone() {
        let cfg = TrainConfig {
            kd_enabled: [false; 4],
            ..small()
        };
        let h = train(&cfg).unwrap();
        for r in &h.records {
            assert_eq!(r.objective.total, r.objective.terms[0]);
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(train(&TrainConfig {
            steps: 0,
            ..small()
        })
        .is_err());
        assert!(train(&TrainConfig { lr: 0.0, ..small() }).is_err());
        assert!(train(&TrainConfig {
            height: 40,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let cfg = TrainConfig {
            lr: 1e300,
            steps: 5,
            ..small()
        };
        match train(&cfg) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 2),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
