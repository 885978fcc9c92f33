//! Joint distillation loop and the data-based baseline.
//!
//! One outer step draws, in this order and from the state's own generator:
//! the auxiliary batch, the prediction sub-batch and the correction
//! sub-batch. Every mode draws all three (sized for that mode), so the
//! stream layout depends only on the configuration.

use log::info;
use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correct::{aux_step_grad, correction_grad, AuxModel, CorrectionBatch, CorrectionStats, RSampler};
use crate::data::{augment, AugmentationLevel, Dataset2D};
use crate::error::{config_err, Error, Result};
use crate::interpolant::{interpolate_batch, prior_samples};
use crate::net::{Label, ParamVector, ScalarName, Tangent};
use crate::optim::{ema_update, Adam, AdamConfig};
use crate::predict::{prediction_grad, weight_and_reduce, DeltaSampler, PredictionBatch, PredictionSetup, PredictionStats, TeacherQuery, WarmupSchedule, WEIGHT_EPS};
use crate::student::FlowMapModel;
use crate::teacher::{Guided, GuidanceInterval, VelocityField};

pub const BALANCE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveMode {
    Combined,
    Prediction,
    Correction,
}

/// Schedule of the correction weight `alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    pub alpha_ref: f64,
    pub delay: usize,
    pub warmup: usize,
    /// `None` disables the decay.
    #[serde(default)]
    pub decay: Option<usize>,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            alpha_ref: 0.3,
            delay: 300,
            warmup: 300,
            decay: None,
        }
    }
}

/// `alpha_ref * clip((n - delay) / warmup, 0, 1) / sqrt(max(n / decay, 1))`.
pub fn alpha_at(cfg: &BalanceConfig, n: usize) -> f64 {
    let n_f = n as f64;
    let ramp = if cfg.warmup == 0 {
        if n >= cfg.delay {
            1.0
        } else {
            0.0
        }
    } else {
        ((n_f - cfg.delay as f64) / cfg.warmup as f64).clamp(0.0, 1.0)
    };
    let decay = match cfg.decay {
        Some(d) if d > 0 => (n_f / d as f64).max(1.0).sqrt(),
        _ => 1.0,
    };
    cfg.alpha_ref * ramp / decay
}

/// `alpha * E|Delta_G| / (E|Delta_N| + eps)`.
pub fn balance_lambda(pred_norm: f64, corr_norm: f64, alpha: f64) -> f64 {
    alpha * pred_norm / (corr_norm + BALANCE_EPS)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of the batch spent on the prediction objective.
    pub prediction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { prediction: 0.75 }
    }
}

impl SplitConfig {
    /// `(prediction, correction)` sub-batch sizes.
    pub fn sizes(&self, batch: usize) -> Result<(usize, usize)> {
        if !(0.0 < self.prediction && self.prediction < 1.0) {
            return Err(config_err!("prediction fraction must lie strictly inside (0, 1)"));
        }
        let p = (batch as f64 * self.prediction).round() as usize;
        let c = batch.saturating_sub(p);
        if p == 0 || c == 0 {
            return Err(config_err!("batch of {batch} cannot be split {}/{}", self.prediction, 1.0 - self.prediction));
        }
        Ok((p, c))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub student: AdamConfig,
    pub aux: AdamConfig,
    pub ema_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            student: AdamConfig::with_lr(1e-3),
            aux: AdamConfig::with_lr(3e-3),
            ema_decay: 0.995,
        }
    }
}

/// Guidance strengths and the time windows where they apply.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Window for teacher queries made by the prediction objective.
    pub prediction_interval: GuidanceInterval,
    /// Window for teacher queries made by the correction objective.
    pub correction_interval: GuidanceInterval,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            gamma_min: 1.0,
            gamma_max: 2.0,
            prediction_interval: GuidanceInterval::FULL,
            correction_interval: GuidanceInterval { lo: 0.0, hi: 0.7 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub objective: ObjectiveMode,
    pub steps: usize,
    pub batch_size: usize,
    /// Auxiliary regression batch; defaults to `batch_size`.
    #[serde(default)]
    pub aux_batch_size: Option<usize>,
    pub split: SplitConfig,
    pub delta: DeltaSampler,
    pub teacher_query: TeacherQuery,
    pub warmup_steps: usize,
    /// Power of the prediction weighting.
    pub k: f64,
    pub r: RSampler,
    pub guidance: GuidanceConfig,
    pub balance: BalanceConfig,
    pub optim: OptimizerConfig,
    /// Probability of distilling the unconditional (null-label) map.
    pub null_prob: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            objective: ObjectiveMode::Combined,
            steps: 3000,
            batch_size: 256,
            aux_batch_size: None,
            split: SplitConfig::default(),
            delta: DeltaSampler::default(),
            teacher_query: TeacherQuery::Heun,
            warmup_steps: 300,
            k: 1.0,
            r: RSampler::default(),
            guidance: GuidanceConfig::default(),
            balance: BalanceConfig::default(),
            optim: OptimizerConfig::default(),
            null_prob: 0.1,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.delta.validate()?;
        self.r.validate()?;
        self.optim.student.validate()?;
        self.optim.aux.validate()?;
        self.guidance.prediction_interval.validate()?;
        self.guidance.correction_interval.validate()?;
        if self.batch_size == 0 || self.aux_batch_size == Some(0) {
            return Err(config_err!("batch sizes must be positive"));
        }
        self.split.sizes(self.batch_size)?;
        if !(1.0 <= self.guidance.gamma_min && self.guidance.gamma_min <= self.guidance.gamma_max) {
            return Err(config_err!("guidance range must satisfy 1 <= gamma_min <= gamma_max"));
        }
        if !(0.0..=1.0).contains(&self.null_prob) || !(0.0..1.0).contains(&self.optim.ema_decay) {
            return Err(config_err!("null_prob and ema_decay must lie in [0, 1]"));
        }
        if self.k < 0.0 || self.balance.alpha_ref < 0.0 {
            return Err(config_err!("k and alpha_ref must be non-negative"));
        }
        Ok(())
    }

    /// `(prediction, correction)` sub-batch sizes for the objective mode.
    pub fn sub_batches(&self) -> Result<(usize, usize)> {
        match self.objective {
            ObjectiveMode::Combined => self.split.sizes(self.batch_size),
            ObjectiveMode::Prediction => Ok((self.batch_size, 0)),
            ObjectiveMode::Correction => Ok((0, self.batch_size)),
        }
    }
}

/// Everything mutated by distillation.
#[derive(Clone, Debug)]
pub struct DistillState {
    pub student: FlowMapModel,
    pub aux: AuxModel,
    pub opt_student: Adam,
    pub opt_aux: Adam,
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub skipped: usize,
}

impl DistillState {
    /// Student and auxiliary network both seeded from the teacher network.
    pub fn from_teacher(teacher: &VelocityField, cfg: &DistillConfig, mut rng: ChaCha8Rng) -> Result<Self> {
        let (net, params) = match teacher {
            VelocityField::Network { net, params } => (net, params),
            VelocityField::Analytic(_) => return Err(Error::Unsupported("distillation needs a network teacher to initialize from".into())),
        };
        let student = FlowMapModel::from_teacher(net, params, &mut rng)?;
        let aux = AuxModel::from_teacher(net, params, &mut rng)?;
        Ok(DistillState {
            opt_student: Adam::new(cfg.optim.student, student.params.len()),
            opt_aux: Adam::new(cfg.optim.aux, aux.params.len()),
            student,
            aux,
            step: 0,
            rng,
            skipped: 0,
        })
    }
}

/// Per-step log line.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t_c: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub aux_loss: f64,
    pub pred_residual: f64,
    pub pred_weighted: f64,
    pub pred_loss: f64,
    pub corr_residual: f64,
    pub ikl: f64,
    pub ikl_weighted: f64,
    pub skipped: usize,
    pub grad_norm: f64,
}

fn label_sampler(class_count: usize, null_prob: f64) -> impl FnMut(&mut ChaCha8Rng) -> Label {
    move |rng: &mut ChaCha8Rng| {
        let coin: f64 = rng.gen();
        let c = rng.gen_range(0..class_count);
        if coin < null_prob {
            Label::Null
        } else {
            Label::Class(c)
        }
    }
}

fn gamma_sampler(lo: f64, hi: f64) -> impl FnMut(&mut ChaCha8Rng) -> f64 {
    move |rng: &mut ChaCha8Rng| {
        let u: f64 = rng.gen();
        lo + (hi - lo) * u
    }
}

fn check_finite(grad: &ParamVector, step: usize, what: &str) -> Result<()> {
    if grad.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            reason: format!("non-finite {what} gradient"),
        })
    }
}

/// `(pred + lambda corr) / batch`, the student update direction.
pub fn combine_gradients(pred: ParamVector, corr: Option<&ParamVector>, lambda: f64, batch: usize) -> ParamVector {
    let mut total = pred;
    if let Some(c) = corr {
        for (t, c) in total.values.iter_mut().zip(&c.values) {
            *t += lambda * c;
        }
    }
    let scale = 1.0 / batch.max(1) as f64;
    total.values.iter_mut().for_each(|v| *v *= scale);
    total
}

/// One outer step: auxiliary update, then the student update from the
/// prediction gradient plus the balanced correction gradient, then EMA.
pub fn distill_step(state: &mut DistillState, teacher: &VelocityField, cfg: &DistillConfig) -> Result<StepRecord> {
    let n = state.step;
    let dim = state.student.dim();
    let classes = state.student.net.spec().class_count;
    let (n_pred, n_corr) = cfg.sub_batches()?;
    let n_aux = cfg.aux_batch_size.unwrap_or(cfg.batch_size);
    let (g_lo, g_hi) = (cfg.guidance.gamma_min, cfg.guidance.gamma_max);
    let rng = &mut state.rng;

    let aux_batch = CorrectionBatch::draw(n_aux, dim, &cfg.r, label_sampler(classes, cfg.null_prob), gamma_sampler(g_lo, g_hi), rng);
    let pred_batch = PredictionBatch::draw(n_pred, dim, &cfg.delta, label_sampler(classes, cfg.null_prob), gamma_sampler(g_lo, g_hi), rng);
    let corr_batch = CorrectionBatch::draw(n_corr, dim, &cfg.r, label_sampler(classes, cfg.null_prob), gamma_sampler(g_lo, g_hi), rng);

    let mut rec = StepRecord {
        step: n,
        t_c: WarmupSchedule {
            duration: cfg.warmup_steps,
        }
        .t_c(n),
        ..StepRecord::default()
    };
    rec.alpha = match cfg.objective {
        ObjectiveMode::Combined => alpha_at(&cfg.balance, n),
        ObjectiveMode::Prediction => 0.0,
        ObjectiveMode::Correction => 1.0,
    };

    // Auxiliary network first, on the current student.
    if cfg.objective != ObjectiveMode::Prediction {
        let (loss, grad) = aux_step_grad(&state.student, &state.student.params, &state.aux, &state.aux.params, &aux_batch)?;
        check_finite(&grad, n, "auxiliary")?;
        rec.aux_loss = loss;
        state.opt_aux.step(&mut state.aux.params, &grad);
    }

    let mut total = ParamVector::zeros(state.student.params.len());
    let mut pred_stats = PredictionStats::default();
    if n_pred > 0 {
        let setup = PredictionSetup {
            teacher: Guided {
                field: teacher,
                interval: cfg.guidance.prediction_interval,
            },
            mode: cfg.delta.mode,
            query: cfg.teacher_query,
            t_c: rec.t_c,
            k: cfg.k,
        };
        let (g, s) = prediction_grad(&state.student, &state.student.params, &setup, &pred_batch)?;
        check_finite(&g, n, "prediction")?;
        pred_stats = s;
        total = g;
    }
    let mut corr_stats = CorrectionStats::default();
    let mut corr_grad = None;
    if n_corr > 0 && rec.alpha > 0.0 {
        let teacher_c = Guided {
            field: teacher,
            interval: cfg.guidance.correction_interval,
        };
        let (g, s) = correction_grad(&state.student, &state.student.params, &state.aux, &state.aux.params, teacher_c, &corr_batch)?;
        check_finite(&g, n, "correction")?;
        corr_stats = s;
        corr_grad = Some(g);
    }
    rec.lambda = match cfg.objective {
        ObjectiveMode::Combined => balance_lambda(pred_stats.weighted_norm, corr_stats.residual_norm, rec.alpha),
        _ => rec.alpha,
    };
    let total = combine_gradients(total, corr_grad.as_ref(), rec.lambda, n_pred + n_corr);

    rec.pred_residual = pred_stats.residual_norm;
    rec.pred_weighted = pred_stats.weighted_norm;
    rec.pred_loss = pred_stats.loss;
    rec.skipped = pred_stats.skipped;
    rec.corr_residual = corr_stats.residual_norm;
    rec.ikl = corr_stats.ikl;
    rec.ikl_weighted = corr_stats.ikl_weighted;
    rec.grad_norm = total.norm();
    state.skipped += pred_stats.skipped;

    state.opt_student.step(&mut state.student.params, &total);
    ema_update(&mut state.student.ema, &state.student.params, cfg.optim.ema_decay);
    state.step += 1;
    if n % 500 == 0 {
        info!(
            "distill step {n}: pred {:.4} corr {:.4} aux {:.4} lambda {:.3}",
            rec.pred_residual, rec.corr_residual, rec.aux_loss, rec.lambda
        );
    }
    Ok(rec)
}

/// Runs `cfg.steps - state.step` outer steps, returning their records.
pub fn distill(state: &mut DistillState, teacher: &VelocityField, cfg: &DistillConfig) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let mut log = Vec::with_capacity(cfg.steps.saturating_sub(state.step));
    while state.step < cfg.steps {
        log.push(distill_step(state, teacher, cfg)?);
    }
    Ok(log)
}

/// Settings of the data-based average-velocity baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub k: f64,
    /// Probability of training the instantaneous case `s = t`.
    pub equal_prob: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub null_prob: f64,
    pub augmentation: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            steps: 6000,
            batch_size: 256,
            lr: 3e-3,
            ema_decay: 0.995,
            k: 1.0,
            equal_prob: 0.25,
            gamma_min: 1.0,
            gamma_max: 1.0,
            null_prob: 0.1,
            augmentation: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("baseline batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.equal_prob) || !(0.0..=1.0).contains(&self.null_prob) || !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config_err!("equal_prob, null_prob and ema_decay must lie in [0, 1]"));
        }
        if !(1.0 <= self.gamma_min && self.gamma_min <= self.gamma_max) || self.k < 0.0 {
            return Err(config_err!("baseline needs 1 <= gamma_min <= gamma_max and k >= 0"));
        }
        AugmentationLevel::ladder(self.augmentation)?;
        AdamConfig::with_lr(self.lr).validate()
    }
}

#[derive(Clone, Debug)]
pub struct BaselineState {
    pub student: FlowMapModel,
    pub opt: Adam,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl BaselineState {
    pub fn from_teacher(teacher: &VelocityField, cfg: &BaselineConfig, mut rng: ChaCha8Rng) -> Result<Self> {
        let (net, params) = match teacher {
            VelocityField::Network { net, params } => (net, params),
            VelocityField::Analytic(_) => return Err(Error::Unsupported("baseline needs a network teacher to initialize from".into())),
        };
        let student = FlowMapModel::from_teacher(net, params, &mut rng)?;
        Ok(BaselineState {
            opt: Adam::new(AdamConfig::with_lr(cfg.lr), student.params.len()),
            student,
            step: 0,
            rng,
        })
    }
}

/// Regression target of the average-velocity identity,
/// `u(x_t, t) - (t - s) dF/dt`, where the total derivative follows the
/// teacher's flow: tangents `(-u, 1, 1)` on `(x_t, t, delta = t - s)`.
pub fn meanflow_target(
    student: &FlowMapModel,
    params: &ParamVector,
    x_t: ndarray::ArrayView2<f64>,
    t: ArrayView1<f64>,
    delta: ArrayView1<f64>,
    labels: &[Label],
    gamma: ArrayView1<f64>,
    u: ndarray::ArrayView2<f64>,
) -> Result<(ndarray::Array2<f64>, ndarray::Array2<f64>)> {
    let cond = crate::net::Conditioning::new(labels.to_vec())
        .with(ScalarName::T, t.to_owned())
        .with(ScalarName::Delta, delta.to_owned())
        .with(ScalarName::Gamma, gamma.to_owned());
    let mut tangent = Tangent::scalar(ScalarName::T, x_t.nrows());
    tangent.scalars.insert(ScalarName::Delta, Array1::ones(x_t.nrows()));
    tangent.x = Some(u.mapv(|v| -v));
    let dual = student.net.jvp(params, x_t, &cond, &tangent)?;
    let mut target = u.to_owned();
    for (b, mut row) in target.outer_iter_mut().enumerate() {
        row.scaled_add(-delta[b], &dual.tangent.row(b));
    }
    Ok((dual.primal, target))
}

/// One baseline step on (optionally augmented) data.
pub fn meanflow_baseline_step(state: &mut BaselineState, teacher: &VelocityField, ds: &Dataset2D, cfg: &BaselineConfig) -> Result<f64> {
    let b = cfg.batch_size;
    let dim = state.student.dim();
    let aug = AugmentationLevel::ladder(cfg.augmentation)?;
    let rng = &mut state.rng;
    let (x, classes) = ds.sample(Label::Null, b, rng)?;
    let x = augment(x.view(), &aug, rng)?;
    let labels: Vec<Label> = classes
        .iter()
        .map(|&c| if rng.gen::<f64>() < cfg.null_prob { Label::Null } else { Label::Class(c) })
        .collect();
    let gamma = Array1::from_shape_fn(b, |_| cfg.gamma_min + (cfg.gamma_max - cfg.gamma_min) * rng.gen::<f64>());
    let z = prior_samples(b, dim, rng);
    // (t, s) is a sorted pair of uniforms; with probability `equal_prob`
    // the pair collapses to s = t.
    let mut t = Vec::with_capacity(b);
    let mut delta = Array1::zeros(b);
    for d in delta.iter_mut() {
        let (u1, u2): (f64, f64) = (1.0 - rng.gen::<f64>(), 1.0 - rng.gen::<f64>());
        let coin: f64 = rng.gen();
        let (hi, lo) = (u1.max(u2), u1.min(u2));
        t.push(hi);
        *d = if coin < cfg.equal_prob { 0.0 } else { hi - lo };
    }
    let x_t = interpolate_batch(x.view(), z.view(), &t)?;
    let t = Array1::from(t);
    let u = crate::teacher::guided_velocity(teacher, x_t.view(), t.view(), &labels, gamma.view(), GuidanceInterval::FULL)?;
    let (_, target) = meanflow_target(&state.student, &state.student.params, x_t.view(), t.view(), delta.view(), &labels, gamma.view(), u.view())?;
    let cond = crate::net::Conditioning::new(labels.clone())
        .with(ScalarName::T, t.clone())
        .with(ScalarName::Delta, delta.clone())
        .with(ScalarName::Gamma, gamma.clone());
    let trace = state.student.net.forward_trace(&state.student.params, x_t.view(), &cond)?;
    let residual = &trace.output - &target;
    let loss = residual.iter().map(|v| v * v).sum::<f64>() / b as f64;
    let (_, weighted) = weight_and_reduce(residual.view(), cfg.k, WEIGHT_EPS);
    let mut grad = ParamVector::zeros(state.student.params.len());
    state
        .student
        .net
        .backprop(&state.student.params, &trace, &labels, (weighted / b as f64).view(), &mut grad)?;
    check_finite(&grad, state.step, "baseline")?;
    state.opt.step(&mut state.student.params, &grad);
    ema_update(&mut state.student.ema, &state.student.params, cfg.ema_decay);
    state.step += 1;
    Ok(loss)
}

pub fn train_baseline(state: &mut BaselineState, teacher: &VelocityField, ds: &Dataset2D, cfg: &BaselineConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut losses = Vec::new();
    while state.step < cfg.steps {
        losses.push(meanflow_baseline_step(state, teacher, ds, cfg)?);
    }
    Ok(losses)
}
