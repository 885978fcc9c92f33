use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use flowmap_distill::config::RunConfig;
use flowmap_distill::eval::{
    best_of_n, deviation_study, evaluate_student, metric_report, mismatch_sweep, student_samples, sweep, TeacherReference, Verifier,
};
use flowmap_distill::interpolant::prior_samples;
use flowmap_distill::io::{load_checkpoint, svg_plot, PlotKind, Series};
use flowmap_distill::net::Label;
use flowmap_distill::run::{distill_checkpoint, load_student, load_teacher, resolve, teacher_checkpoint, RunDir};
use flowmap_distill::teacher::{sample_teacher, train_teacher, GuidanceInterval, Guided, VelocityField};
use flowmap_distill::trainer::DistillState;
use flowmap_distill::{Error, Result};

#[derive(Parser)]
#[command(name = "flowmap", version, about = "Data-free flow-map distillation on 2D toy distributions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for every random draw of this run.
    #[arg(long)]
    seed: u64,
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set distill.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory; defaults to `runs/<command>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct WithTeacher {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by `train-teacher`.
    #[arg(long)]
    teacher: PathBuf,
}

#[derive(Args, Clone)]
struct WithStudent {
    #[command(flatten)]
    inner: WithTeacher,
    /// Checkpoint written by `distill`.
    #[arg(long)]
    student: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifierArg {
    LogDensity,
    Distance,
    Constant,
}

#[derive(Subcommand)]
enum Command {
    /// Train the flow-matching teacher on the configured dataset.
    TrainTeacher(Common),
    /// Distill a one-step student from a trained teacher.
    Distill {
        #[command(flatten)]
        args: WithTeacher,
        /// Skip the final evaluation against teacher samples.
        #[arg(long)]
        skip_eval: bool,
    },
    /// Draw samples from the teacher, or from a student when one is given.
    Sample {
        #[command(flatten)]
        args: WithTeacher,
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// `balanced`, `null` or a class index.
        #[arg(long, default_value = "balanced")]
        label: String,
    },
    /// Compare a student against teacher samples.
    Eval(WithStudent),
    /// Relative deviation of student jumps from teacher trajectories.
    Deviation(WithStudent),
    /// Data-based baseline over augmentation levels next to a data-free student.
    Mismatch(WithTeacher),
    /// Best-of-N noise search with the student as proxy.
    Bon {
        #[command(flatten)]
        args: WithStudent,
        /// Candidate counts, e.g. `1,4,16,64`.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value = "log-density")]
        verifier: VerifierArg,
    },
    SweepAlpha(WithTeacher),
    SweepR(WithTeacher),
    SweepInterval(WithTeacher),
    SweepK(WithTeacher),
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    run: RunDir,
}

impl Ctx {
    fn open(name: &str, c: &Common, adjust: impl FnOnce(&mut RunConfig)) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&c.overrides)?;
        adjust(&mut cfg);
        cfg.validate()?;
        let dir = c.out.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{name}-seed{}", c.seed)));
        let run = RunDir::create(&dir, name, c.seed, &cfg)?;
        Ok(Ctx { cfg, seed: c.seed, run })
    }

    fn teacher(&self, path: &Path) -> Result<VelocityField> {
        let (_, spec) = resolve(&self.cfg)?;
        load_teacher(&load_checkpoint(path)?, &spec)
    }

    fn reference(&self, teacher: &VelocityField) -> Result<TeacherReference> {
        let ds = self.cfg.dataset()?;
        TeacherReference::build(teacher, ds.class_count(), ds.dim(), &self.cfg.eval)
    }
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct TeacherEvalRow {
    labels: &'static str,
    sliced_wasserstein: f64,
    mmd: f64,
    mode_coverage: f64,
}

#[derive(Serialize)]
struct SampleRow {
    x: f64,
    y: f64,
    label: String,
}

fn parse_label(s: &str, n: usize, classes: usize) -> Result<Vec<Label>> {
    match s {
        "balanced" => Ok(flowmap_distill::eval::balanced_labels(n, classes)),
        "null" => Ok(vec![Label::Null; n]),
        other => match other.parse::<usize>() {
            Ok(c) if c < classes => Ok(vec![Label::Class(c); n]),
            _ => Err(Error::Config(format!("label must be balanced, null or a class below {classes}, got '{other}'"))),
        },
    }
}

fn scatter(points: &ndarray::Array2<f64>) -> Vec<(f64, f64)> {
    points.outer_iter().map(|r| (r[0], r[1])).collect()
}

fn train_teacher_cmd(c: &Common) -> Result<PathBuf> {
    let mut ctx = Ctx::open("train-teacher", c, |_| {})?;
    let (ds, spec) = resolve(&ctx.cfg)?;
    let hash = ctx.run.manifest.config_hash.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let run = train_teacher(&ds, spec, &ctx.cfg.teacher, &mut rng)?;
    let losses: Vec<LossRow> = run.losses.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }).collect();
    ctx.run.csv("teacher_loss.csv", &losses)?;
    if let Some((step, reason)) = &run.diverged {
        ctx.run.checkpoint("diverged.ckpt", &teacher_checkpoint(&run, *step, &hash))?;
        return Err(Error::Diverged { step: *step, reason: reason.clone() });
    }
    ctx.run.checkpoint("teacher.ckpt", &teacher_checkpoint(&run, run.losses.len(), &hash))?;

    let field = run.field();
    let ev = &ctx.cfg.eval;
    let reference = TeacherReference::build(&field, ds.class_count(), ds.dim(), ev)?;
    let gmm = ds.as_gmm().ok();
    let mut rng = ChaCha8Rng::seed_from_u64(ev.seed);
    let (exact, _) = ds.sample(Label::Null, ev.samples, &mut rng)?;
    // Exact samples in the same class order as the balanced teacher set.
    let k = ds.class_count();
    let mut by_class = exact.clone();
    for c in 0..k {
        let rows: Vec<usize> = (c..ev.samples).step_by(k).collect();
        let (x, _) = ds.sample(Label::Class(c), rows.len(), &mut rng)?;
        for (j, &i) in rows.iter().enumerate() {
            by_class.row_mut(i).assign(&x.row(j));
        }
    }
    let cond = metric_report(reference.ref_cond.view(), by_class.view(), gmm, ev, &mut rng)?;
    let null = metric_report(reference.ref_null.view(), exact.view(), gmm, ev, &mut rng)?;
    let rows = [("balanced", &cond), ("null", &null)].map(|(labels, m)| TeacherEvalRow {
        labels,
        sliced_wasserstein: m.sliced_wasserstein,
        mmd: m.mmd,
        mode_coverage: m.mode_coverage,
    });
    ctx.run.csv("teacher_eval.csv", &rows)?;
    let svg = svg_plot(
        "teacher samples",
        "x",
        "y",
        &[
            Series { name: "exact".into(), points: scatter(&exact) },
            Series { name: "teacher".into(), points: scatter(&reference.ref_null) },
        ],
        PlotKind::Scatter,
    );
    ctx.run.svg("teacher_samples.svg", &svg)?;
    Ok(ctx.run.dir)
}

fn distill_cmd(a: &WithTeacher, skip_eval: bool) -> Result<PathBuf> {
    let mut ctx = Ctx::open("distill", &a.common, |_| {})?;
    let teacher = ctx.teacher(&a.teacher)?;
    let hash = ctx.run.manifest.config_hash.clone();
    let cfg = ctx.cfg.distill.clone();
    let mut state = DistillState::from_teacher(&teacher, &cfg, ChaCha8Rng::seed_from_u64(ctx.seed))?;
    let diag = ctx.run.path("diverged.ckpt");
    let records = match flowmap_distill::run::distill_logged(&mut state, &teacher, &cfg, &diag) {
        Ok(r) => r,
        Err(e) => {
            if diag.exists() {
                ctx.run.manifest.checkpoints.push("diverged.ckpt".into());
                ctx.run.manifest.write(&ctx.run.dir)?;
            }
            return Err(e);
        }
    };
    ctx.run.csv("metrics.csv", &records)?;
    ctx.run.checkpoint("student.ckpt", &distill_checkpoint(&state, &hash))?;
    if !skip_eval {
        let ds = ctx.cfg.dataset()?;
        let reference = ctx.reference(&teacher)?;
        let e = evaluate_student(&state.student.ema_model(), &reference, ds.as_gmm().ok(), &ctx.cfg.eval)?;
        ctx.run.csv("eval.csv", &[e.summary()])?;
    }
    Ok(ctx.run.dir)
}

fn sample_cmd(a: &WithTeacher, student: Option<&Path>, n: usize, label: &str) -> Result<PathBuf> {
    let mut ctx = Ctx::open("sample", &a.common, |_| {})?;
    let (ds, spec) = resolve(&ctx.cfg)?;
    let teacher = ctx.teacher(&a.teacher)?;
    let labels = parse_label(label, n, ds.class_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let z = prior_samples(n, ds.dim(), &mut rng);
    let gamma = ctx.cfg.eval.gamma;
    let x = match student {
        Some(p) => student_samples(&load_student(&load_checkpoint(p)?, &spec)?.ema_model(), z.view(), &labels, gamma)?,
        None => {
            let g = Guided { field: &teacher, interval: GuidanceInterval::FULL };
            sample_teacher(g, z.view(), &labels, Array1::from_elem(n, gamma).view(), 1.0, 0.0, &ctx.cfg.eval.teacher_solver)?
        }
    };
    let rows: Vec<SampleRow> = x
        .outer_iter()
        .zip(&labels)
        .map(|(r, l)| SampleRow {
            x: r[0],
            y: r[1],
            label: l.class().map_or("null".to_string(), |c| c.to_string()),
        })
        .collect();
    ctx.run.csv("samples.csv", &rows)?;
    let who = if student.is_some() { "student" } else { "teacher" };
    let svg = svg_plot(&format!("{who} samples"), "x", "y", &[Series { name: who.into(), points: scatter(&x) }], PlotKind::Scatter);
    ctx.run.svg("samples.svg", &svg)?;
    Ok(ctx.run.dir)
}

fn eval_cmd(a: &WithStudent) -> Result<PathBuf> {
    let mut ctx = Ctx::open("eval", &a.inner.common, |c| c.eval.seed = a.inner.common.seed)?;
    let (ds, spec) = resolve(&ctx.cfg)?;
    let teacher = ctx.teacher(&a.inner.teacher)?;
    let student = load_student(&load_checkpoint(&a.student)?, &spec)?;
    let reference = ctx.reference(&teacher)?;
    let e = evaluate_student(&student.ema_model(), &reference, ds.as_gmm().ok(), &ctx.cfg.eval)?;
    ctx.run.csv("eval.csv", &[e.summary()])?;
    Ok(ctx.run.dir)
}

fn deviation_cmd(a: &WithStudent) -> Result<PathBuf> {
    let mut ctx = Ctx::open("deviation", &a.inner.common, |c| c.experiments.deviation.seed = a.inner.common.seed)?;
    let (ds, spec) = resolve(&ctx.cfg)?;
    let teacher = ctx.teacher(&a.inner.teacher)?;
    let student = load_student(&load_checkpoint(&a.student)?, &spec)?;
    let curve = deviation_study(&student.ema_model(), &teacher, ds.class_count(), &ctx.cfg.experiments.deviation)?;
    ctx.run.csv("deviation.csv", &curve.rows())?;
    let points = curve.delta.iter().cloned().zip(curve.mean.iter().cloned()).collect();
    let svg = svg_plot("trajectory deviation", "jump", "relative deviation", &[Series { name: "student".into(), points }], PlotKind::Lines);
    ctx.run.svg("deviation.svg", &svg)?;
    Ok(ctx.run.dir)
}

fn mismatch_cmd(a: &WithTeacher) -> Result<PathBuf> {
    let mut ctx = Ctx::open("mismatch", &a.common, |_| {})?;
    let ds = ctx.cfg.dataset()?;
    let teacher = ctx.teacher(&a.teacher)?;
    let reference = ctx.reference(&teacher)?;
    let c = &ctx.cfg;
    let rows = mismatch_sweep(&teacher, &ds, &c.experiments.augmentation_levels, &c.baseline, &c.distill, &reference, &c.eval, ctx.seed)?;
    ctx.run.csv("mismatch.csv", &rows)?;
    let series: Vec<Series> = ["meanflow", "freeflow"]
        .iter()
        .map(|m| Series {
            name: m.to_string(),
            points: rows.iter().filter(|r| r.method == *m).map(|r| (r.level as f64, r.sliced_wasserstein)).collect(),
        })
        .collect();
    ctx.run.svg("mismatch.svg", &svg_plot("teacher mismatch", "augmentation level", "sliced W2", &series, PlotKind::Lines))?;
    Ok(ctx.run.dir)
}

fn bon_cmd(a: &WithStudent, n: Option<&Vec<usize>>, verifier: VerifierArg) -> Result<PathBuf> {
    let seed = a.inner.common.seed;
    let mut ctx = Ctx::open("bon", &a.inner.common, |c| {
        c.bon.seed = seed;
        if let Some(n) = n {
            c.bon.n = n.clone();
        }
    })?;
    let (ds, spec) = resolve(&ctx.cfg)?;
    let teacher = ctx.teacher(&a.inner.teacher)?;
    let student = load_student(&load_checkpoint(&a.student)?, &spec)?;
    let v = match verifier {
        VerifierArg::LogDensity => Verifier::ClassLogDensity(ds.as_gmm()?.clone()),
        VerifierArg::Distance => Verifier::ClassTargetDistance(ds.as_gmm()?.clone()),
        VerifierArg::Constant => Verifier::Constant,
    };
    let rows = best_of_n(&student.ema_model(), &teacher, &v, ds.class_count(), &ctx.cfg.bon)?;
    ctx.run.csv("bon.csv", &rows)?;
    Ok(ctx.run.dir)
}

fn sweep_cmd(name: &str, a: &WithTeacher) -> Result<PathBuf> {
    let mut ctx = Ctx::open(&format!("sweep-{name}"), &a.common, |_| {})?;
    let ds = ctx.cfg.dataset()?;
    let teacher = ctx.teacher(&a.teacher)?;
    let reference = ctx.reference(&teacher)?;
    let base = &ctx.cfg.distill;
    let grids = &ctx.cfg.sweeps;
    let variants = match name {
        "alpha" => grids.alpha_variants(base),
        "r" => grids.r_variants(base),
        "interval" => grids.interval_variants(base),
        "k" => grids.k_variants(base),
        _ => unreachable!("sweep names are fixed by the subcommands"),
    };
    let rows = sweep(&teacher, name, &variants, ctx.seed, &reference, ds.as_gmm().ok(), &ctx.cfg.eval)?;
    ctx.run.csv(&format!("sweep_{name}.csv"), &rows)?;
    Ok(ctx.run.dir)
}

fn dispatch(cmd: &Command) -> Result<PathBuf> {
    match cmd {
        Command::TrainTeacher(c) => train_teacher_cmd(c),
        Command::Distill { args, skip_eval } => distill_cmd(args, *skip_eval),
        Command::Sample { args, student, n, label } => sample_cmd(args, student.as_deref(), *n, label),
        Command::Eval(a) => eval_cmd(a),
        Command::Deviation(a) => deviation_cmd(a),
        Command::Mismatch(a) => mismatch_cmd(a),
        Command::Bon { args, n, verifier } => bon_cmd(args, n.as_ref(), *verifier),
        Command::SweepAlpha(a) => sweep_cmd("alpha", a),
        Command::SweepR(a) => sweep_cmd("r", a),
        Command::SweepInterval(a) => sweep_cmd("interval", a),
        Command::SweepK(a) => sweep_cmd("k", a),
    }
}

/// `error kind=<tag> msg=<json string>` on one line.
fn error_line(kind: &str, msg: &str) -> String {
    let msg = msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ");
    format!("error kind={kind} msg={}", serde_json::to_string(&msg).expect("string serializes"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli.command) {
        Ok(dir) => {
            println!("ok dir={}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
