use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rcdepth::config::{parse_caps, Config};
use rcdepth::depth_loss::{total_loss, urdl, DepthMap};
use rcdepth::distill::{
    feature_l1_pyramid, inter_depth_distill_loss, structure_distill_loss, FeaturePyramid,
    InterDepthSet, PyramidRole,
};
use rcdepth::gradcheck::{self, GradReport, OPS};
use rcdepth::io;
use rcdepth::loss::LossResult;
use rcdepth::metrics::{aggregate, evaluate};
use rcdepth::toy::train;
use rcdepth::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_VERIFY: u8 = 3;

/// Depth distillation losses, metrics and gradient checks.
#[derive(Debug, Parser)]
#[command(name = "rcdepth", version)]
struct Cli {
    /// key = value configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Uncertainty scale.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Distillation weights as four comma-separated values.
    #[arg(long, global = true, value_delimiter = ',')]
    gamma: Option<Vec<f64>>,
    /// Differentiate through the uncertainty weights instead of treating them as constants.
    #[arg(long, global = true)]
    no_detach_u: bool,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate predicted depth against ground truth. Several PRED GT pairs are pooled.
    Eval {
        #[arg(required = true, num_args = 2.., value_names = ["PRED", "GT"])]
        files: Vec<PathBuf>,
        /// Maximum ground-truth depth; comma-separated for several caps.
        #[arg(long)]
        cap: Option<String>,
    },
    /// Compute one loss and optionally write its gradient.
    Loss(LossArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_POINTS)]
        points: usize,
    },
    /// Train the toy student and write its history.
    Demo {
        /// on, off, or four 0/1 flags for image, radar, decoder and depth distillation.
        #[arg(long, default_value = "on")]
        kd: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossKind {
    Urdl,
    Feat,
    Struct,
    Interdepth,
    Total,
}

#[derive(Debug, Args)]
struct LossArgs {
    #[arg(long, value_enum)]
    kind: LossKind,
    /// Predicted depth (urdl, total).
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Dense ground truth (urdl, total).
    #[arg(long)]
    dense: Option<PathBuf>,
    /// Sparse ground truth (urdl, total).
    #[arg(long)]
    sparse: Option<PathBuf>,
    /// Student tensors, one record per level (feat, struct, interdepth).
    #[arg(long)]
    student: Option<PathBuf>,
    /// Teacher tensors, one record per level (feat, struct, interdepth).
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Camera student/teacher pyramids (total).
    #[arg(long, num_args = 2, value_names = ["STUDENT", "TEACHER"])]
    image: Option<Vec<PathBuf>>,
    /// Radar student/teacher pyramids (total).
    #[arg(long, num_args = 2, value_names = ["STUDENT", "TEACHER"])]
    radar: Option<Vec<PathBuf>>,
    /// Decoder student/teacher pyramids (total).
    #[arg(long, num_args = 2, value_names = ["STUDENT", "TEACHER"])]
    decoder: Option<Vec<PathBuf>>,
    /// Inter-depth student/teacher maps (total).
    #[arg(long, num_args = 2, value_names = ["STUDENT", "TEACHER"])]
    inter: Option<Vec<PathBuf>>,
    /// Write the gradient records to this file.
    #[arg(long)]
    grad: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Error(Error),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Argument(_) | Error::Config(_) | Error::UnknownOp(_) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Error(other),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}

fn effective_config(cli: &Cli) -> std::result::Result<Config, Error> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(b) = cli.beta {
        cfg.beta = b;
    }
    if let Some(g) = &cli.gamma {
        if g.len() != 4 {
            return Err(Error::Argument(format!(
                "--gamma takes four values, got {}",
                g.len()
            )));
        }
        cfg.gamma.copy_from_slice(g);
    }
    if cli.no_detach_u {
        cfg.detach_u = false;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = effective_config(&cli)?;
    cfg.validate()?;
    if cli.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    match cli.command {
        None => Err(Failure::Usage(
            "a subcommand is required (eval, loss, gradcheck, demo)".into(),
        )),
        Some(Command::Eval { files, cap }) => cmd_eval(&cfg, &files, cap.as_deref()),
        Some(Command::Loss(args)) => cmd_loss(&cfg, &args),
        Some(Command::Gradcheck { op, seed, points }) => cmd_gradcheck(&op, seed, points),
        Some(Command::Demo {
            kd,
            steps,
            seed,
            lr,
            out,
        }) => {
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(l) = lr {
                cfg.lr = l;
            }
            cfg.validate()?;
            cmd_demo(&cfg, &kd, out.as_deref())
        }
    }
}

fn cmd_eval(cfg: &Config, files: &[PathBuf], cap: Option<&str>) -> Outcome {
    if !files.len().is_multiple_of(2) {
        return Err(Failure::Usage("eval takes PRED GT pairs".into()));
    }
    let caps = match cap {
        Some(c) => parse_caps(c)?,
        None => cfg.caps.clone(),
    };
    let pairs = files
        .chunks_exact(2)
        .map(|p| {
            Ok((
                DepthMap::new(io::load(&p[0])?)?,
                DepthMap::new(io::load(&p[1])?)?,
            ))
        })
        .collect::<rcdepth::Result<Vec<_>>>()?;
    for cap in caps {
        let reports = pairs
            .iter()
            .map(|(pred, gt)| evaluate(pred, gt, cap))
            .collect::<rcdepth::Result<Vec<_>>>()?;
        println!("{}", aggregate(&reports)?);
    }
    Ok(())
}

fn require<'a>(opt: &'a Option<PathBuf>, flag: &str) -> std::result::Result<&'a Path, Failure> {
    opt.as_deref()
        .ok_or_else(|| Failure::Usage(format!("--{flag} is required for this loss")))
}

fn pyramid(role: PyramidRole, path: &Path) -> rcdepth::Result<FeaturePyramid> {
    FeaturePyramid::new(role, io::load_all(path)?)
}

fn depth_inputs(a: &LossArgs) -> std::result::Result<(DepthMap, DepthMap, DepthMap), Failure> {
    let load = |p: &Path| -> rcdepth::Result<DepthMap> { DepthMap::new(io::load(p)?) };
    Ok((
        load(require(&a.pred, "pred")?)?,
        load(require(&a.dense, "dense")?)?,
        load(require(&a.sparse, "sparse")?)?,
    ))
}

/// A distillation term of the total loss; absent inputs are allowed only with weight 0.
fn kd_term(
    files: &Option<Vec<PathBuf>>,
    flag: &str,
    weight: f64,
    f: impl Fn(&Path, &Path) -> rcdepth::Result<LossResult>,
) -> std::result::Result<LossResult, Failure> {
    match files {
        Some(v) => Ok(f(&v[0], &v[1])?),
        None if weight == 0.0 => Ok(LossResult {
            value: 0.0,
            grads: Vec::new(),
        }),
        None => Err(Failure::Usage(format!(
            "--{flag} is required unless its weight is 0"
        ))),
    }
}

fn cmd_loss(cfg: &Config, a: &LossArgs) -> Outcome {
    let beta = cfg.beta;
    let result = match a.kind {
        LossKind::Urdl => {
            let (pred, dense, sparse) = depth_inputs(a)?;
            urdl(&pred, &dense, &sparse, beta, cfg.detach_u)?
        }
        LossKind::Feat | LossKind::Struct => {
            let role = if matches!(a.kind, LossKind::Feat) {
                PyramidRole::Camera
            } else {
                PyramidRole::Decoder
            };
            let s = pyramid(role, require(&a.student, "student")?)?;
            let t = pyramid(role, require(&a.teacher, "teacher")?)?;
            if matches!(a.kind, LossKind::Feat) {
                feature_l1_pyramid(&s, &t)?
            } else {
                structure_distill_loss(&s, &t)?
            }
        }
        LossKind::Interdepth => {
            let s = InterDepthSet::new(io::load_all(require(&a.student, "student")?)?)?;
            let t = InterDepthSet::new(io::load_all(require(&a.teacher, "teacher")?)?)?;
            inter_depth_distill_loss(&s, &t, beta, cfg.detach_u)?
        }
        LossKind::Total => {
            let (pred, dense, sparse) = depth_inputs(a)?;
            let g = cfg.loss_weights()?;
            let depth = urdl(&pred, &dense, &sparse, beta, cfg.detach_u)?;
            let feat = |role| {
                move |s: &Path, t: &Path| feature_l1_pyramid(&pyramid(role, s)?, &pyramid(role, t)?)
            };
            let kd_i = kd_term(&a.image, "image", g.gamma[0], feat(PyramidRole::Camera))?;
            let kd_r = kd_term(&a.radar, "radar", g.gamma[1], feat(PyramidRole::Radar))?;
            let kd_dec = kd_term(&a.decoder, "decoder", g.gamma[2], |s, t| {
                structure_distill_loss(
                    &pyramid(PyramidRole::Decoder, s)?,
                    &pyramid(PyramidRole::Decoder, t)?,
                )
            })?;
            let kd_d = kd_term(&a.inter, "inter", g.gamma[3], |s, t| {
                inter_depth_distill_loss(
                    &InterDepthSet::new(io::load_all(s)?)?,
                    &InterDepthSet::new(io::load_all(t)?)?,
                    beta,
                    cfg.detach_u,
                )
            })?;
            total_loss(&depth, &kd_i, &kd_r, &kd_dec, &kd_d, &g)?
        }
    };
    println!("{}", result.value);
    if let Some(path) = &a.grad {
        io::save_all(path, result.grads.iter())?;
    }
    Ok(())
}

fn cmd_gradcheck(op: &str, seed: u64, points: usize) -> Outcome {
    let ops: Vec<&str> = if op == "all" {
        OPS.to_vec()
    } else if OPS.contains(&op) {
        vec![op]
    } else {
        return Err(Failure::Usage(format!(
            "unknown op {op:?}; expected all or one of {}",
            OPS.join(", ")
        )));
    };
    let mut reports: Vec<GradReport> = Vec::with_capacity(ops.len());
    println!("{}", GradReport::table_header());
    for op in ops {
        let tol = gradcheck::default_tolerance(op)?;
        let r = gradcheck::check_with(op, seed, tol, points)?;
        println!("{r}");
        reports.push(r);
    }
    for r in &reports {
        println!("{}", r.record());
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.op.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(format!(
            "gradient mismatch in {}",
            failed.join(", ")
        )))
    }
}

fn parse_kd(kd: &str) -> std::result::Result<[bool; 4], Failure> {
    match kd {
        "on" => Ok([true; 4]),
        "off" => Ok([false; 4]),
        bits if bits.len() == 4 && bits.chars().all(|c| c == '0' || c == '1') => {
            let mut out = [false; 4];
            for (o, c) in out.iter_mut().zip(bits.chars()) {
                *o = c == '1';
            }
            Ok(out)
        }
        other => Err(Failure::Usage(format!(
            "--kd expects on, off or four 0/1 flags, got {other:?}"
        ))),
    }
}

fn cmd_demo(cfg: &Config, kd: &str, out: Option<&Path>) -> Outcome {
    let tc = cfg.train_config(parse_kd(kd)?)?;
    let history = train(&tc)?;
    if let Some(path) = out {
        std::fs::write(path, history.to_text()).map_err(Error::from)?;
    }
    println!(
        "kd={} steps={} final {}",
        tc.kd_mask(),
        tc.steps,
        history.final_eval
    );
    Ok(())
}
