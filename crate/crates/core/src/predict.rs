//! Prediction objective: trains the student's generating velocity to agree
//! with the teacher along the student's own predicted path.
//!
//! The gradient is `sum_b J_b^T w_b Delta_b`, where `J_b` is the Jacobian of
//! the student displacement at the gradient-carrying jump and `Delta_b` is the
//! generating-velocity residual; everything but `J` is held constant.

use log::debug;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::interpolant::transition_batch;
use crate::net::{Label, ParamVector, Trace};
use crate::student::{combine, student_conditioning, DeltaGrid, FlowMapModel};
use crate::teacher::Guided;

pub const WEIGHT_EPS: f64 = 1e-4;

/// `sigmoid(mean + std * N(0, 1))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitNormal {
    pub mean: f64,
    pub std: f64,
}

impl LogitNormal {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let e: f64 = rng.sample(StandardNormal);
        1.0 / (1.0 + (-(self.mean + self.std * e)).exp())
    }

    pub fn density(&self, r: f64) -> f64 {
        if r <= 0.0 || r >= 1.0 {
            return 0.0;
        }
        let l = (r / (1.0 - r)).ln();
        let q = (l - self.mean) / self.std;
        (-0.5 * q * q).exp() / (self.std * (2.0 * std::f64::consts::PI).sqrt() * r * (1.0 - r))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeltaMode {
    Continuous,
    /// Uniform grid with this many intervals.
    Discrete { intervals: usize },
}

/// How the teacher is queried over a discrete interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherQuery {
    /// `u(x, t_i)`.
    Euler,
    /// Average of the two Heun stage velocities over the interval.
    Heun,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaSampler {
    pub base: LogitNormal,
    pub zero_prob: f64,
    pub mode: DeltaMode,
}

impl Default for DeltaSampler {
    fn default() -> Self {
        DeltaSampler {
            base: LogitNormal { mean: 0.0, std: 1.0 },
            zero_prob: 0.1,
            mode: DeltaMode::Discrete { intervals: 8 },
        }
    }
}

impl DeltaSampler {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.zero_prob) {
            return Err(config_err!("zero_prob must lie in [0, 1]"));
        }
        if !(self.base.std > 0.0) {
            return Err(config_err!("logit-normal std must be positive"));
        }
        if let DeltaMode::Discrete { intervals: 0 } = self.mode {
            return Err(config_err!("discrete mode needs at least one interval"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Option<DeltaGrid> {
        match self.mode {
            DeltaMode::Continuous => None,
            DeltaMode::Discrete { intervals } => DeltaGrid::uniform(intervals).ok(),
        }
    }

    /// Raw draw before any flooring.
    pub fn sample_raw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // Both draws are always consumed so the stream layout does not depend
        // on the outcome.
        let coin: f64 = rng.gen();
        let value = self.base.sample(rng);
        if coin < self.zero_prob {
            0.0
        } else {
            value
        }
    }

    /// A jump duration; floored onto the grid in discrete mode.
    pub fn sample_delta<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let raw = self.sample_raw(rng);
        match self.grid() {
            None => raw,
            Some(g) => g.delta(g.floor_index(raw)),
        }
    }
}

/// Linear decay of the confident-region boundary `t_c` from 1 to 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub duration: usize,
}

impl WarmupSchedule {
    pub fn t_c(&self, step: usize) -> f64 {
        if self.duration == 0 {
            return 0.0;
        }
        (1.0 - step as f64 / self.duration as f64).max(0.0)
    }
}

/// Where to query the teacher for a prediction made at time `1 - delta`:
/// unchanged when already inside the confident region `[0, t_c]`, otherwise
/// moved up to `t_c` by the transition kernel.
pub fn confident_eval_point(f_pred: ArrayView2<f64>, n: ArrayView2<f64>, delta: &[f64], t_c: f64) -> Result<(Array2<f64>, Vec<f64>)> {
    let t: Vec<f64> = delta.iter().map(|d| 1.0 - d).collect();
    let x = transition_batch(f_pred, n, &t, t_c)?;
    let t_eval = t.iter().map(|&t| if t_c > t { t_c } else { t }).collect();
    Ok((x, t_eval))
}

/// Per-sample inputs of a prediction step.
#[derive(Clone, Debug)]
pub struct PredictionBatch {
    pub z: Array2<f64>,
    pub labels: Vec<Label>,
    pub gamma: Array1<f64>,
    /// Sampled jump durations (grid starts `delta_{1,i}` in discrete mode).
    pub delta: Vec<f64>,
    /// Fresh noise for the warmup transition.
    pub n: Array2<f64>,
}

impl PredictionBatch {
    pub fn draw<R: Rng + ?Sized>(
        size: usize,
        dim: usize,
        sampler: &DeltaSampler,
        labels: impl FnMut(&mut R) -> Label,
        gamma: impl FnMut(&mut R) -> f64,
        rng: &mut R,
    ) -> Self {
        let mut labels = labels;
        let mut gamma = gamma;
        let z = crate::interpolant::prior_samples(size, dim, rng);
        let labels: Vec<Label> = (0..size).map(|_| labels(rng)).collect();
        let gamma = Array1::from_shape_fn(size, |_| gamma(rng));
        let delta = (0..size).map(|_| sampler.sample_delta(rng)).collect();
        let n = crate::interpolant::prior_samples(size, dim, rng);
        PredictionBatch { z, labels, gamma, delta, n }
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PredictionSetup<'a> {
    pub teacher: Guided<'a>,
    pub mode: DeltaMode,
    pub query: TeacherQuery,
    pub t_c: f64,
    pub k: f64,
}

/// Residual of the prediction objective together with the forward trace at
/// the gradient-carrying jump.
pub struct PredictionTerms {
    /// Jump at which the displacement receives gradient.
    pub train_delta: Array1<f64>,
    pub trace: Trace,
    /// `v_G - u` per sample.
    pub residual: Array2<f64>,
}

impl PredictionTerms {
    /// The detached regression target `F - Delta`.
    pub fn target(&self) -> Array2<f64> {
        &self.trace.output - &self.residual
    }
}

/// `u` from `x` at time `t` down to `t - h` (clamped at 0) by one Heun step.
fn heun_query(teacher: Guided<'_>, x: ArrayView2<f64>, t: &[f64], h: &[f64], labels: &[Label], gamma: ArrayView1<f64>) -> Result<Array2<f64>> {
    let t0 = ArrayView1::from(t);
    let v1 = teacher.at(x, t0, labels, gamma)?;
    let t1: Array1<f64> = t.iter().zip(h).map(|(&t, &h)| (t - h).max(0.0)).collect();
    let mut xp = x.to_owned();
    for (b, mut row) in xp.outer_iter_mut().enumerate() {
        row.scaled_add(t[b] - t1[b], &v1.row(b));
    }
    let v2 = teacher.at(xp.view(), t1.view(), labels, gamma)?;
    Ok((v1 + v2) * 0.5)
}

pub fn prediction_terms(model: &FlowMapModel, params: &ParamVector, setup: &PredictionSetup<'_>, batch: &PredictionBatch) -> Result<PredictionTerms> {
    let z = batch.z.view();
    let gamma = batch.gamma.view();
    let labels = &batch.labels;
    match setup.mode {
        DeltaMode::Continuous => {
            let delta = Array1::from(batch.delta.clone());
            let cond = student_conditioning(delta.view(), labels, gamma);
            let trace = model.net.forward_trace(params, z, &cond)?;
            let dual = model.displacement_jvp(params, z, delta.view(), labels, gamma)?;
            let f = combine(z, delta.view(), trace.output.view());
            let (x_e, t_e) = confident_eval_point(f.view(), batch.n.view(), &batch.delta, setup.t_c)?;
            let u = setup.teacher.at(x_e.view(), ArrayView1::from(&t_e), labels, gamma)?;
            // v_G = F + delta dF/d delta
            let mut residual = trace.output.clone();
            for (b, mut row) in residual.outer_iter_mut().enumerate() {
                row.scaled_add(delta[b], &dual.tangent.row(b));
                row -= &u.row(b);
            }
            Ok(PredictionTerms {
                train_delta: delta,
                trace,
                residual,
            })
        }
        DeltaMode::Discrete { intervals } => {
            let grid = DeltaGrid::uniform(intervals)?;
            let idx: Vec<usize> = batch.delta.iter().map(|&d| grid.floor_index(d)).collect();
            let lo: Array1<f64> = idx.iter().map(|&i| grid.delta(i)).collect();
            let hi: Array1<f64> = idx.iter().map(|&i| grid.delta(i + 1)).collect();
            let width: Vec<f64> = idx.iter().map(|&i| grid.width(i)).collect();
            let trace = model.net.forward_trace(params, z, &student_conditioning(hi.view(), labels, gamma))?;
            let f_lo_disp = model.displacement(params, z, lo.view(), labels, gamma)?;
            let f_lo = combine(z, lo.view(), f_lo_disp.view());
            let f_hi = combine(z, hi.view(), trace.output.view());
            let (x_e, t_e) = confident_eval_point(f_lo.view(), batch.n.view(), lo.as_slice().expect("contiguous"), setup.t_c)?;
            let u = match setup.query {
                TeacherQuery::Euler => setup.teacher.at(x_e.view(), ArrayView1::from(&t_e), labels, gamma)?,
                TeacherQuery::Heun => heun_query(setup.teacher, x_e.view(), &t_e, &width, labels, gamma)?,
            };
            let mut residual = f_hi - f_lo;
            for (b, mut row) in residual.outer_iter_mut().enumerate() {
                row /= width[b];
                row -= &u.row(b);
            }
            Ok(PredictionTerms {
                train_delta: hi,
                trace,
                residual,
            })
        }
    }
}

/// Detached target of the continuous objective: `u(f, 1 - delta) - delta dF/d delta`
/// with the teacher query moved by [`confident_eval_point`].
pub fn prediction_target_cont(model: &FlowMapModel, params: &ParamVector, setup: &PredictionSetup<'_>, batch: &PredictionBatch) -> Result<Array2<f64>> {
    let setup = PredictionSetup {
        mode: DeltaMode::Continuous,
        ..*setup
    };
    Ok(prediction_terms(model, params, &setup, batch)?.target())
}

/// Detached target of the discrete objective at `F(z, delta_{1,i+1})`.
pub fn prediction_target_disc(
    model: &FlowMapModel,
    params: &ParamVector,
    setup: &PredictionSetup<'_>,
    batch: &PredictionBatch,
) -> Result<Array2<f64>> {
    if setup.mode == DeltaMode::Continuous {
        return Err(config_err!("discrete target requested in continuous mode"));
    }
    Ok(prediction_terms(model, params, setup, batch)?.target())
}

/// Power-law weights `1 / ((|Delta| / sqrt(d))^2 + eps)^k` and the weighted
/// residuals.
pub fn weight_and_reduce(residual: ArrayView2<f64>, k: f64, eps: f64) -> (Vec<f64>, Array2<f64>) {
    let d = residual.ncols().max(1) as f64;
    let weights: Vec<f64> = residual
        .outer_iter()
        .map(|r| {
            let sq = r.dot(&r) / d;
            1.0 / (sq + eps).powf(k)
        })
        .collect();
    let mut weighted = residual.to_owned();
    for (mut row, w) in weighted.outer_iter_mut().zip(&weights) {
        row *= *w;
    }
    (weights, weighted)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionStats {
    /// Mean of `|Delta|` over finite samples.
    pub residual_norm: f64,
    /// Mean of `|w Delta|` over finite samples.
    pub weighted_norm: f64,
    /// Mean of `|Delta|^2`, the value of the equivalent squared loss.
    pub loss: f64,
    pub count: usize,
    pub skipped: usize,
}

/// `sum_b J_b^T w_b Delta_b` over the batch (not normalized) and its stats.
/// Samples with a non-finite residual are dropped and counted.
pub fn prediction_grad(
    model: &FlowMapModel,
    params: &ParamVector,
    setup: &PredictionSetup<'_>,
    batch: &PredictionBatch,
) -> Result<(ParamVector, PredictionStats)> {
    let terms = prediction_terms(model, params, setup, batch)?;
    let (_, mut weighted) = weight_and_reduce(terms.residual.view(), setup.k, WEIGHT_EPS);
    let mut stats = PredictionStats::default();
    for (b, mut row) in weighted.outer_iter_mut().enumerate() {
        let r = terms.residual.row(b);
        if r.iter().chain(row.iter()).all(|v| v.is_finite()) {
            stats.count += 1;
            let sq = r.dot(&r);
            stats.loss += sq;
            stats.residual_norm += sq.sqrt();
            stats.weighted_norm += row.dot(&row).sqrt();
        } else {
            stats.skipped += 1;
            row.fill(0.0);
        }
    }
    if stats.skipped > 0 {
        debug!("prediction: skipped {} non-finite samples", stats.skipped);
    }
    if stats.count > 0 {
        let c = stats.count as f64;
        stats.loss /= c;
        stats.residual_norm /= c;
        stats.weighted_norm /= c;
    }
    let mut grad = ParamVector::zeros(params.len());
    model
        .net
        .backprop(params, &terms.trace, &batch.labels, weighted.view(), &mut grad)?;
    Ok((grad, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::{Analytic, GuidanceInterval, VelocityField};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_prob_one_always_gives_zero() {
        let s = DeltaSampler {
            zero_prob: 1.0,
            ..DeltaSampler::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| s.sample_delta(&mut rng) == 0.0));
    }

    #[test]
    fn discrete_draws_land_on_grid_starts() {
        let s = DeltaSampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let d = s.sample_delta(&mut rng);
            assert!((d * 8.0).fract() == 0.0 && d < 1.0, "{d}");
        }
    }

    #[test]
    fn warmup_schedule() {
        let w = WarmupSchedule { duration: 100 };
        assert_eq!(w.t_c(0), 1.0);
        assert_eq!(w.t_c(50), 0.5);
        assert_eq!(w.t_c(100), 0.0);
        assert_eq!(w.t_c(1000), 0.0);
    }

    #[test]
    fn eval_point_branches() {
        let f = array![[1.0, 2.0]];
        let n = array![[0.3, -0.1]];
        let (x, t) = confident_eval_point(f.view(), n.view(), &[0.7], 0.0).unwrap();
        assert_eq!((x, t), (f.clone(), vec![0.30000000000000004]));
        let (x, t) = confident_eval_point(f.view(), n.view(), &[0.2], 0.5).unwrap();
        assert_eq!((x, t[0]), (f.clone(), 0.8));
        let (x, t) = confident_eval_point(f.view(), n.view(), &[1.0], 1.0).unwrap();
        assert_eq!(t[0], 1.0);
        assert_eq!(x, n);
    }

    #[test]
    fn weights() {
        let r = array![[0.0, 0.0], [1.0, 1.0], [3.0, 4.0]];
        let (w, _) = weight_and_reduce(r.view(), 0.0, WEIGHT_EPS);
        assert_eq!(w, vec![1.0; 3]);
        let (w, wr) = weight_and_reduce(r.view(), 1.0, WEIGHT_EPS);
        assert_eq!(w[1], 1.0 / (1.0 + WEIGHT_EPS));
        assert_eq!(w[0], 1.0 / WEIGHT_EPS);
        assert_eq!(wr.row(2).to_vec(), vec![3.0 * w[2], 4.0 * w[2]]);
    }

    #[test]
    fn logit_normal_density_integrates_to_one() {
        let ln = LogitNormal { mean: 0.8, std: 1.6 };
        let n = 200_000;
        let s: f64 = (0..n).map(|i| ln.density((i as f64 + 0.5) / n as f64)).sum::<f64>() / n as f64;
        assert!((s - 1.0).abs() < 1e-3, "{s}");
    }

    #[test]
    fn constant_field_with_linear_student_has_zero_residual() {
        // F = c exactly for any delta reproduces the flow of u = c.
        let student = crate::student::tests::constant_student(array![0.7, -1.2]);
        let field = VelocityField::Analytic(Analytic::Constant(vec![0.7, -1.2]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = PredictionBatch::draw(
            32,
            2,
            &DeltaSampler::default(),
            |r: &mut ChaCha8Rng| Label::Class(r.gen_range(0..3)),
            |_| 1.0,
            &mut rng,
        );
        for mode in [DeltaMode::Continuous, DeltaMode::Discrete { intervals: 8 }] {
            for query in [TeacherQuery::Euler, TeacherQuery::Heun] {
                let setup = PredictionSetup {
                    teacher: Guided {
                        field: &field,
                        interval: GuidanceInterval::FULL,
                    },
                    mode,
                    query,
                    t_c: 0.0,
                    k: 1.0,
                };
                let terms = prediction_terms(&student, &student.params, &setup, &batch).unwrap();
                assert!(terms.residual.iter().all(|v| v.abs() < 1e-12));
            }
        }
    }
}
