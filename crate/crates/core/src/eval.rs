//! Metrics bundles and the experiment drivers built on them.

use log::{info, warn};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset2D, Gmm};
use crate::error::{config_err, domain_err, Error, Result};
use crate::interpolant::prior_samples;
use crate::metrics::{mmd_rbf, mode_coverage, sliced_wasserstein, spearman};
use crate::net::Label;
use crate::student::FlowMapModel;
use crate::teacher::{sample_teacher, Guided, GuidanceInterval, SolverConfig, VelocityField};
use crate::trainer::{distill, train_baseline, BaselineConfig, BaselineState, DistillConfig, DistillState, ObjectiveMode};

pub const DEVIATION_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples: usize,
    pub projections: usize,
    /// Rows used by the quadratic-cost MMD estimate.
    pub mmd_samples: usize,
    pub mmd_bandwidth: f64,
    pub teacher_solver: SolverConfig,
    /// Guidance strength used when sampling for evaluation.
    pub gamma: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 8000,
            projections: 256,
            mmd_samples: 1000,
            mmd_bandwidth: 0.5,
            teacher_solver: SolverConfig::heun(50),
            gamma: 1.0,
            seed: 1234,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sliced_wasserstein: f64,
    pub mmd: f64,
    pub mmd_bandwidth: f64,
    pub mode_coverage: f64,
    pub per_mode_mass: Vec<f64>,
}

/// Distances of `samples` to `reference`, plus coverage when a mixture is
/// given.
pub fn metric_report<R: Rng + ?Sized>(
    samples: ArrayView2<f64>,
    reference: ArrayView2<f64>,
    gmm: Option<&Gmm>,
    cfg: &EvalConfig,
    rng: &mut R,
) -> Result<MetricReport> {
    let sw = sliced_wasserstein(samples, reference, cfg.projections, rng)?;
    let m = cfg.mmd_samples.min(samples.nrows()).min(reference.nrows());
    let mmd = mmd_rbf(samples.slice(s![..m, ..]), reference.slice(s![..m, ..]), cfg.mmd_bandwidth)?;
    let (mode_coverage, per_mode_mass) = match gmm {
        Some(g) => {
            let c = mode_coverage(samples, g)?;
            (c.coverage, c.per_mode_mass)
        }
        None => (f64::NAN, Vec::new()),
    };
    let report = MetricReport {
        sliced_wasserstein: sw,
        mmd,
        mmd_bandwidth: cfg.mmd_bandwidth,
        mode_coverage,
        per_mode_mass,
    };
    if !report.sliced_wasserstein.is_finite() || !report.mmd.is_finite() {
        return Err(domain_err!("non-finite metric"));
    }
    Ok(report)
}

/// Class-balanced labels `0, 1, ..., k-1, 0, ...`.
pub fn balanced_labels(n: usize, classes: usize) -> Vec<Label> {
    (0..n).map(|i| Label::Class(i % classes)).collect()
}

/// Teacher samples shared by every evaluation against the same teacher:
/// a class-balanced set and an unconditional set from independent noise,
/// and teacher outputs on the probe noise the students are run on.
#[derive(Clone, Debug)]
pub struct TeacherReference {
    pub classes: usize,
    pub probe_z: Array2<f64>,
    pub probe_cond: Array2<f64>,
    pub probe_null: Array2<f64>,
    pub ref_cond: Array2<f64>,
    pub ref_null: Array2<f64>,
}

impl TeacherReference {
    pub fn build(teacher: &VelocityField, classes: usize, dim: usize, cfg: &EvalConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = cfg.samples;
        let g = Guided {
            field: teacher,
            interval: GuidanceInterval::FULL,
        };
        let gamma = Array1::from_elem(n, cfg.gamma);
        let cond = balanced_labels(n, classes);
        let null = vec![Label::Null; n];
        let run = |z: &Array2<f64>, labels: &[Label]| sample_teacher(g, z.view(), labels, gamma.view(), 1.0, 0.0, &cfg.teacher_solver);
        let probe_z = prior_samples(n, dim, &mut rng);
        let ref_z = prior_samples(n, dim, &mut rng);
        Ok(TeacherReference {
            classes,
            probe_cond: run(&probe_z, &cond)?,
            probe_null: run(&probe_z, &null)?,
            ref_cond: run(&ref_z, &cond)?,
            ref_null: run(&ref_z, &null)?,
            probe_z,
        })
    }

    pub fn len(&self) -> usize {
        self.probe_z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probe_z.nrows() == 0
    }
}

/// One-step student quality against a teacher reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentEval {
    /// Same noise and labels on both sides.
    pub coupled_sw: f64,
    /// Class-balanced samples against independent teacher samples.
    pub conditional: MetricReport,
    /// Unconditional samples against independent teacher samples.
    pub unconditional: MetricReport,
}

impl StudentEval {
    /// Average of the conditional and unconditional sliced distances.
    pub fn score(&self) -> f64 {
        0.5 * (self.conditional.sliced_wasserstein + self.unconditional.sliced_wasserstein)
    }

    pub fn summary(&self) -> EvalSummary {
        let min = |m: &MetricReport| m.per_mode_mass.iter().cloned().fold(f64::INFINITY, f64::min);
        EvalSummary {
            coupled_sw: self.coupled_sw,
            conditional_sw: self.conditional.sliced_wasserstein,
            conditional_mmd: self.conditional.mmd,
            conditional_coverage: self.conditional.mode_coverage,
            unconditional_sw: self.unconditional.sliced_wasserstein,
            unconditional_mmd: self.unconditional.mmd,
            unconditional_coverage: self.unconditional.mode_coverage,
            unconditional_min_mass: min(&self.unconditional),
            score: self.score(),
        }
    }
}

/// Flat CSV row of a [`StudentEval`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub coupled_sw: f64,
    pub conditional_sw: f64,
    pub conditional_mmd: f64,
    pub conditional_coverage: f64,
    pub unconditional_sw: f64,
    pub unconditional_mmd: f64,
    pub unconditional_coverage: f64,
    pub unconditional_min_mass: f64,
    pub score: f64,
}

pub fn student_samples(student: &FlowMapModel, z: ArrayView2<f64>, labels: &[Label], gamma: f64) -> Result<Array2<f64>> {
    let n = z.nrows();
    student.apply(z, Array1::ones(n).view(), labels, Array1::from_elem(n, gamma).view())
}

pub fn evaluate_student(student: &FlowMapModel, reference: &TeacherReference, gmm: Option<&Gmm>, cfg: &EvalConfig) -> Result<StudentEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let n = reference.len();
    let z = reference.probe_z.view();
    let cond = student_samples(student, z, &balanced_labels(n, reference.classes), cfg.gamma)?;
    let null = student_samples(student, z, &vec![Label::Null; n], cfg.gamma)?;
    Ok(StudentEval {
        coupled_sw: sliced_wasserstein(cond.view(), reference.probe_cond.view(), cfg.projections, &mut rng)?,
        conditional: metric_report(cond.view(), reference.ref_cond.view(), gmm, cfg, &mut rng)?,
        unconditional: metric_report(null.view(), reference.ref_null.view(), gmm, cfg, &mut rng)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationCurve {
    pub delta: Vec<f64>,
    pub mean: Vec<f64>,
    /// Half-width of the 95% normal interval of the mean.
    pub band: Vec<f64>,
    pub dropped: usize,
}

impl DeviationCurve {
    pub fn terminal(&self) -> f64 {
        *self.mean.last().expect("non-empty grid")
    }

    /// Rank correlation of deviation with the jump size.
    pub fn trend(&self) -> Result<f64> {
        spearman(&self.delta, &self.mean)
    }

    pub fn rows(&self) -> Vec<DeviationRow> {
        (0..self.delta.len())
            .map(|i| DeviationRow {
                delta: self.delta[i],
                mean: self.mean[i],
                band: self.band[i],
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub delta: f64,
    pub mean: f64,
    pub band: f64,
}

/// `delta = 0, 1/n, ..., 1`.
pub fn delta_grid(n: usize) -> Vec<f64> {
    (0..=n).map(|i| if i == n { 1.0 } else { i as f64 / n as f64 }).collect()
}

fn solve_rows(guided: Guided<'_>, z: ArrayView2<f64>, labels: &[Label], gamma: &Array1<f64>, t_to: f64, solver: &SolverConfig) -> (Array2<f64>, Vec<bool>) {
    match sample_teacher(guided, z, labels, gamma.view(), 1.0, t_to, solver) {
        Ok(x) => (x, vec![true; z.nrows()]),
        Err(_) => {
            let mut out = Array2::from_elem(z.dim(), f64::NAN);
            let mut ok = vec![false; z.nrows()];
            for b in 0..z.nrows() {
                let zb = z.slice(s![b..b + 1, ..]);
                if let Ok(x) = sample_teacher(guided, zb, &labels[b..b + 1], gamma.slice(s![b..b + 1]), 1.0, t_to, solver) {
                    out.row_mut(b).assign(&x.row(0));
                    ok[b] = true;
                }
            }
            (out, ok)
        }
    }
}

/// Labels used when measuring trajectory deviation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviationLabels {
    /// Unconditional map only.
    Null,
    /// Classes spread evenly over the probe set.
    Balanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviationConfig {
    pub samples: usize,
    /// Number of intervals in the jump grid; the grid has one more point.
    pub points: usize,
    pub solver: SolverConfig,
    pub labels: DeviationLabels,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for DeviationConfig {
    fn default() -> Self {
        DeviationConfig {
            samples: 2000,
            points: 10,
            solver: SolverConfig::heun(100),
            labels: DeviationLabels::Null,
            gamma: 1.0,
            seed: 4321,
        }
    }
}

/// Deviation curve on a fresh probe set drawn from `cfg.seed`.
pub fn deviation_study(student: &FlowMapModel, teacher: &VelocityField, classes: usize, cfg: &DeviationConfig) -> Result<DeviationCurve> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z = prior_samples(cfg.samples, student.dim(), &mut rng);
    let labels = match cfg.labels {
        DeviationLabels::Null => vec![Label::Null; cfg.samples],
        DeviationLabels::Balanced => balanced_labels(cfg.samples, classes),
    };
    deviation_curve(student, teacher, &cfg.solver, z.view(), &labels, cfg.gamma, &delta_grid(cfg.points))
}

/// Mean relative distance between the student jump `f(z, delta)` and the
/// teacher ODE solution from 1 to `1 - delta`. Rows whose reference solve
/// fails are dropped from every grid point.
pub fn deviation_curve(
    student: &FlowMapModel,
    teacher: &VelocityField,
    solver: &SolverConfig,
    z: ArrayView2<f64>,
    labels: &[Label],
    gamma: f64,
    deltas: &[f64],
) -> Result<DeviationCurve> {
    if deltas.is_empty() || deltas.windows(2).any(|w| w[1] <= w[0]) || deltas[0] < 0.0 || *deltas.last().unwrap() > 1.0 {
        return Err(config_err!("delta grid must be increasing inside [0, 1]"));
    }
    let n = z.nrows();
    let g = Array1::from_elem(n, gamma);
    let guided = Guided {
        field: teacher,
        interval: GuidanceInterval::FULL,
    };
    let mut refs = Vec::with_capacity(deltas.len());
    let mut keep = vec![true; n];
    for &d in deltas {
        if d == 0.0 {
            refs.push(z.to_owned());
            continue;
        }
        let (x, ok) = solve_rows(guided, z, labels, &g, 1.0 - d, solver);
        keep.iter_mut().zip(&ok).for_each(|(k, o)| *k &= o);
        refs.push(x);
    }
    let kept: Vec<usize> = (0..n).filter(|&b| keep[b]).collect();
    let dropped = n - kept.len();
    if dropped > 0 {
        warn!("deviation curve: dropped {dropped} rows whose reference solve failed");
    }
    if kept.is_empty() {
        return Err(Error::Integration {
            step: 0,
            reason: "reference solve failed for every row".into(),
        });
    }
    let zk = z.select(Axis(0), &kept);
    let lk: Vec<Label> = kept.iter().map(|&b| labels[b]).collect();
    let gk = Array1::from_elem(kept.len(), gamma);
    let mut curve = DeviationCurve {
        delta: deltas.to_vec(),
        mean: Vec::new(),
        band: Vec::new(),
        dropped,
    };
    for (&d, r) in deltas.iter().zip(&refs) {
        let f = student.apply(zk.view(), Array1::from_elem(kept.len(), d).view(), &lk, gk.view())?;
        let r = r.select(Axis(0), &kept);
        let rel: Vec<f64> = f
            .outer_iter()
            .zip(r.outer_iter())
            .map(|(a, b)| {
                let diff = &a - &b;
                diff.dot(&diff).sqrt() / (b.dot(&b).sqrt() + DEVIATION_EPS)
            })
            .collect();
        let m = rel.len() as f64;
        let mean = rel.iter().sum::<f64>() / m;
        let var = rel.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0).max(1.0);
        curve.mean.push(mean);
        curve.band.push(1.96 * (var / m).sqrt());
    }
    Ok(curve)
}

/// Trains a student from the teacher under `cfg`, seeded with `seed`.
pub fn train_student(teacher: &VelocityField, cfg: &DistillConfig, seed: u64) -> Result<DistillState> {
    let mut st = DistillState::from_teacher(teacher, cfg, ChaCha8Rng::seed_from_u64(seed))?;
    distill(&mut st, teacher, cfg)?;
    Ok(st)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchRow {
    pub method: String,
    pub level: usize,
    pub seed: u64,
    /// Coupled distance on class-balanced labels.
    pub sliced_wasserstein: f64,
    pub conditional_sw: f64,
    pub unconditional_sw: f64,
}

/// Baseline students trained on augmented data at every level, next to one
/// data-free student repeated on every level.
pub fn mismatch_sweep(
    teacher: &VelocityField,
    ds: &Dataset2D,
    levels: &[usize],
    baseline: &BaselineConfig,
    freeflow: &DistillConfig,
    reference: &TeacherReference,
    eval: &EvalConfig,
    seed: u64,
) -> Result<Vec<MismatchRow>> {
    let ff = train_student(teacher, freeflow, seed)?;
    mismatch_sweep_with(teacher, ds, levels, baseline, &ff.student.ema_model(), reference, eval, seed)
}

/// [`mismatch_sweep`] with an already trained data-free student.
pub fn mismatch_sweep_with(
    teacher: &VelocityField,
    ds: &Dataset2D,
    levels: &[usize],
    baseline: &BaselineConfig,
    freeflow: &FlowMapModel,
    reference: &TeacherReference,
    eval: &EvalConfig,
    seed: u64,
) -> Result<Vec<MismatchRow>> {
    let metric = |m: &FlowMapModel| evaluate_student(m, reference, None, eval);
    let mut rows = Vec::new();
    let ff_sw = metric(freeflow)?;
    for &level in levels {
        let cfg = BaselineConfig {
            augmentation: level,
            ..baseline.clone()
        };
        let mut st = BaselineState::from_teacher(teacher, &cfg, ChaCha8Rng::seed_from_u64(seed))?;
        train_baseline(&mut st, teacher, ds, &cfg)?;
        let sw = metric(&st.student.ema_model())?;
        info!("mismatch level {level} seed {seed}: baseline {:.4}, data-free {:.4}", sw.coupled_sw, ff_sw.coupled_sw);
        for (method, e) in [("meanflow", &sw), ("freeflow", &ff_sw)] {
            rows.push(MismatchRow {
                method: method.into(),
                level,
                seed,
                sliced_wasserstein: e.coupled_sw,
                conditional_sw: e.conditional.sliced_wasserstein,
                unconditional_sw: e.unconditional.sliced_wasserstein,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynergyRow {
    pub objective: ObjectiveMode,
    pub seed: u64,
    pub step: usize,
    pub coupled_sw: f64,
    pub conditional_sw: f64,
    pub unconditional_sw: f64,
    pub score: f64,
    pub unconditional_coverage: f64,
    pub min_mode_mass: f64,
}

fn synergy_row(objective: ObjectiveMode, seed: u64, step: usize, e: &StudentEval) -> SynergyRow {
    SynergyRow {
        objective,
        seed,
        step,
        coupled_sw: e.coupled_sw,
        conditional_sw: e.conditional.sliced_wasserstein,
        unconditional_sw: e.unconditional.sliced_wasserstein,
        score: e.score(),
        unconditional_coverage: e.unconditional.mode_coverage,
        min_mode_mass: e.unconditional.per_mode_mass.iter().cloned().fold(f64::INFINITY, f64::min),
    }
}

/// Runs one objective for `base.steps`, evaluating the EMA student every
/// `every` steps.
pub fn training_curve(
    teacher: &VelocityField,
    base: &DistillConfig,
    objective: ObjectiveMode,
    seed: u64,
    every: usize,
    reference: &TeacherReference,
    gmm: Option<&Gmm>,
    eval: &EvalConfig,
) -> Result<(DistillState, Vec<SynergyRow>)> {
    if every == 0 {
        return Err(config_err!("evaluation interval must be positive"));
    }
    let mut cfg = DistillConfig {
        objective,
        ..base.clone()
    };
    cfg.validate()?;
    let total = base.steps;
    let mut st = DistillState::from_teacher(teacher, &cfg, ChaCha8Rng::seed_from_u64(seed))?;
    let mut rows = Vec::new();
    while st.step < total {
        cfg.steps = (st.step + every).min(total);
        distill(&mut st, teacher, &cfg)?;
        let e = evaluate_student(&st.student.ema_model(), reference, gmm, eval)?;
        rows.push(synergy_row(objective, seed, st.step, &e));
    }
    Ok((st, rows))
}

#[derive(Clone, Debug)]
pub struct SynergyStudy {
    pub rows: Vec<SynergyRow>,
    /// Final states per `(objective, seed)`.
    pub students: Vec<(ObjectiveMode, u64, DistillState)>,
}

impl SynergyStudy {
    pub fn final_row(&self, objective: ObjectiveMode, seed: u64) -> Option<&SynergyRow> {
        self.rows.iter().filter(|r| r.objective == objective && r.seed == seed).last()
    }

    pub fn student(&self, objective: ObjectiveMode, seed: u64) -> Option<&DistillState> {
        self.students
            .iter()
            .find(|(o, s, _)| *o == objective && *s == seed)
            .map(|(_, _, st)| st)
    }
}

/// The three objectives at a matched step budget over several seeds.
pub fn synergy_study(
    teacher: &VelocityField,
    base: &DistillConfig,
    seeds: &[u64],
    every: usize,
    reference: &TeacherReference,
    gmm: Option<&Gmm>,
    eval: &EvalConfig,
) -> Result<SynergyStudy> {
    let mut study = SynergyStudy {
        rows: Vec::new(),
        students: Vec::new(),
    };
    for &seed in seeds {
        for objective in [ObjectiveMode::Combined, ObjectiveMode::Prediction, ObjectiveMode::Correction] {
            let (st, rows) = training_curve(teacher, base, objective, seed, every, reference, gmm, eval)?;
            let last = rows.last().expect("at least one evaluation");
            info!("synergy {objective:?} seed {seed}: score {:.4}", last.score);
            study.rows.extend(rows);
            study.students.push((objective, seed, st));
        }
    }
    Ok(study)
}

/// Ground-truth scoring of final samples against their target class.
#[derive(Clone, Debug)]
pub enum Verifier {
    /// Log-density of the target class component.
    ClassLogDensity(Gmm),
    /// Negative distance to the target class mean.
    ClassTargetDistance(Gmm),
    Constant,
}

impl Verifier {
    pub fn score(&self, x: ArrayView2<f64>, label: Label) -> Result<Vec<f64>> {
        let class = |g: &Gmm| -> Result<usize> {
            match label {
                Label::Class(c) if c < g.len() => Ok(c),
                _ => Err(domain_err!("verifier needs a class label within the mixture")),
            }
        };
        match self {
            Verifier::ClassLogDensity(g) => {
                let c = class(g)?;
                x.outer_iter().map(|row| g.class_log_density(row, c)).collect()
            }
            Verifier::ClassTargetDistance(g) => {
                let c = class(g)?;
                let mean = Array1::from(g.means[c].clone());
                Ok(x.outer_iter().map(|row| -(&row - &mean).dot(&(&row - &mean)).sqrt()).collect())
            }
            Verifier::Constant => Ok(vec![0.0; x.nrows()]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BonRow {
    pub n: usize,
    pub trials: usize,
    /// Mean verifier score of the selected student output.
    pub student_score: f64,
    /// Mean verifier score of the teacher solve from the selected noise.
    pub transferred_score: f64,
    /// Sliced distance of transferred samples to independent teacher samples.
    pub transferred_sw: f64,
    pub student_nfe: usize,
    pub teacher_nfe: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BonConfig {
    pub n: Vec<usize>,
    /// Selections per `N`, spread evenly over the classes.
    pub trials: usize,
    pub solver: SolverConfig,
    pub gamma: f64,
    pub projections: usize,
    pub seed: u64,
}

impl Default for BonConfig {
    fn default() -> Self {
        BonConfig {
            n: vec![1, 4, 16, 64],
            trials: 512,
            solver: SolverConfig::heun(20),
            gamma: 1.0,
            projections: 256,
            seed: 77,
        }
    }
}

/// Best-of-N noise search with the student as a cheap proxy: score `N`
/// student outputs, keep the best noise, solve the teacher from it.
pub fn best_of_n(student: &FlowMapModel, teacher: &VelocityField, verifier: &Verifier, classes: usize, cfg: &BonConfig) -> Result<Vec<BonRow>> {
    if cfg.n.is_empty() || cfg.n.contains(&0) || cfg.trials < 2 || classes == 0 {
        return Err(config_err!("best-of-n needs positive candidate counts, at least two trials and a class"));
    }
    let dim = student.dim();
    let guided = Guided {
        field: teacher,
        interval: GuidanceInterval::FULL,
    };
    let labels = balanced_labels(cfg.trials, classes);
    let gamma_t = Array1::from_elem(cfg.trials, cfg.gamma);
    let mut rows = Vec::new();
    for &n in &cfg.n {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(n as u64));
        let mut chosen = Array2::zeros((cfg.trials, dim));
        let mut student_best = Vec::with_capacity(cfg.trials);
        for (i, &label) in labels.iter().enumerate() {
            let z = prior_samples(n, dim, &mut rng);
            let x = student_samples(student, z.view(), &vec![label; n], cfg.gamma)?;
            let scores = verifier.score(x.view(), label)?;
            let best = (0..n).fold(0, |b, j| if scores[j] > scores[b] { j } else { b });
            chosen.row_mut(i).assign(&z.row(best));
            student_best.push(scores[best]);
        }
        let transferred = sample_teacher(guided, chosen.view(), &labels, gamma_t.view(), 1.0, 0.0, &cfg.solver)?;
        let t_scores: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| verifier.score(transferred.slice(s![i..i + 1, ..]), l).map(|v| v[0]))
            .collect::<Result<_>>()?;
        let ref_z = prior_samples(cfg.trials, dim, &mut rng);
        let plain = sample_teacher(guided, ref_z.view(), &labels, gamma_t.view(), 1.0, 0.0, &cfg.solver)?;
        let sw = sliced_wasserstein(transferred.view(), plain.view(), cfg.projections, &mut rng)?;
        let t = cfg.trials as f64;
        rows.push(BonRow {
            n,
            trials: cfg.trials,
            student_score: student_best.iter().sum::<f64>() / t,
            transferred_score: t_scores.iter().sum::<f64>() / t,
            transferred_sw: sw,
            student_nfe: n,
            teacher_nfe: cfg.solver.nfe(),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub name: String,
    pub value: String,
    pub seed: u64,
    pub coupled_sw: f64,
    pub conditional_sw: f64,
    pub unconditional_sw: f64,
    pub score: f64,
    pub unconditional_coverage: f64,
}

/// Trains one student per labelled configuration and evaluates it.
pub fn sweep(
    teacher: &VelocityField,
    name: &str,
    variants: &[(String, DistillConfig)],
    seed: u64,
    reference: &TeacherReference,
    gmm: Option<&Gmm>,
    eval: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (value, cfg) in variants {
        let st = train_student(teacher, cfg, seed)?;
        let e = evaluate_student(&st.student.ema_model(), reference, gmm, eval)?;
        info!("sweep {name}={value}: score {:.4}", e.score());
        rows.push(SweepRow {
            name: name.to_string(),
            value: value.clone(),
            seed,
            coupled_sw: e.coupled_sw,
            conditional_sw: e.conditional.sliced_wasserstein,
            unconditional_sw: e.unconditional.sliced_wasserstein,
            score: e.score(),
            unconditional_coverage: e.unconditional.mode_coverage,
        });
    }
    Ok(rows)
}
