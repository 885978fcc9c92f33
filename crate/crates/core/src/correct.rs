//! Correction objective: aligns the noising velocity of the student's output
//! distribution with the teacher, using an online auxiliary network that
//! tracks that noising velocity.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_err, Result};
use crate::interpolant::{interpolate_batch, prior_samples};
use crate::net::{grad_params, Conditioning, Label, Network, ParamVector, ScalarName, SquaredError, Trace};
use crate::predict::LogitNormal;
use crate::student::{combine, student_conditioning, FlowMapModel};
use crate::teacher::Guided;

pub const AUX_CONDITIONS: [ScalarName; 2] = [ScalarName::T, ScalarName::Gamma];

/// Base law of the correction noise level before truncation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RBase {
    LogitNormal { mean: f64, std: f64 },
    /// Uniform on the truncation range itself.
    Uniform,
}

/// Noise levels for the correction objective, truncated to `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RSampler {
    pub base: RBase,
    pub lo: f64,
    pub hi: f64,
}

impl Default for RSampler {
    fn default() -> Self {
        RSampler {
            base: RBase::LogitNormal { mean: 0.8, std: 1.6 },
            lo: 0.0,
            hi: 1.0,
        }
    }
}

impl RSampler {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lo && self.lo < self.hi && self.hi <= 1.0) {
            return Err(config_err!("r truncation [{}, {}] is empty or outside [0, 1]", self.lo, self.hi));
        }
        if let RBase::LogitNormal { std, .. } = self.base {
            if !(std > 0.0) {
                return Err(config_err!("logit-normal std must be positive"));
            }
        }
        Ok(())
    }

    /// A draw inside `(0, 1)` and the truncation range. Logit-normal draws
    /// are truncated by rejection; call [`RSampler::validate`] first, since an
    /// empty range would never terminate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let r = match self.base {
                RBase::LogitNormal { mean, std } => LogitNormal { mean, std }.sample(rng),
                RBase::Uniform => self.lo + (self.hi - self.lo) * rng.gen::<f64>(),
            };
            if r > 0.0 && r < 1.0 && r >= self.lo && r <= self.hi {
                return r;
            }
        }
    }
}

/// Auxiliary network `g(x_r, r, c, gamma)` tracking the noising velocity of
/// the student's distribution.
#[derive(Clone, Debug)]
pub struct AuxModel {
    pub net: Network,
    pub params: ParamVector,
}

pub fn aux_conditioning(r: ArrayView1<f64>, labels: &[Label], gamma: ArrayView1<f64>) -> Conditioning {
    Conditioning::new(labels.to_vec())
        .with(ScalarName::T, r.to_owned())
        .with(ScalarName::Gamma, gamma.to_owned())
}

impl AuxModel {
    /// Seeded from the teacher, with a zero-initialized guidance embedding.
    pub fn from_teacher<R: Rng + ?Sized>(teacher: &Network, teacher_params: &ParamVector, rng: &mut R) -> Result<Self> {
        let net = Network::new(teacher.spec().with_conditions(&AUX_CONDITIONS))?;
        let params = net.transplant(teacher, teacher_params, rng)?;
        Ok(AuxModel { net, params })
    }

    pub fn velocity(&self, params: &ParamVector, x: ArrayView2<f64>, r: ArrayView1<f64>, labels: &[Label], gamma: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.net.forward(params, x, &aux_conditioning(r, labels, gamma))
    }
}

/// Samples for a correction or auxiliary step.
#[derive(Clone, Debug)]
pub struct CorrectionBatch {
    pub z: Array2<f64>,
    pub labels: Vec<Label>,
    pub gamma: Array1<f64>,
    pub r: Vec<f64>,
    pub n: Array2<f64>,
}

impl CorrectionBatch {
    pub fn draw<R: Rng + ?Sized>(
        size: usize,
        dim: usize,
        sampler: &RSampler,
        labels: impl FnMut(&mut R) -> Label,
        gamma: impl FnMut(&mut R) -> f64,
        rng: &mut R,
    ) -> Self {
        let mut labels = labels;
        let mut gamma = gamma;
        let z = prior_samples(size, dim, rng);
        let labels: Vec<Label> = (0..size).map(|_| labels(rng)).collect();
        let gamma = Array1::from_shape_fn(size, |_| gamma(rng));
        let r = (0..size).map(|_| sampler.sample(rng)).collect();
        let n = prior_samples(size, dim, rng);
        CorrectionBatch { z, labels, gamma, r, n }
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }
}

/// `(x_r, f(z, 1))` for the batch, with the student held fixed.
fn noised_outputs(model: &FlowMapModel, params: &ParamVector, batch: &CorrectionBatch) -> Result<(Array2<f64>, Array2<f64>)> {
    let ones = Array1::ones(batch.len());
    let disp = model.displacement(params, batch.z.view(), ones.view(), &batch.labels, batch.gamma.view())?;
    let f = combine(batch.z.view(), ones.view(), disp.view());
    let x_r = interpolate_batch(f.view(), batch.n.view(), &batch.r)?;
    Ok((x_r, f))
}

/// Mean squared error between `g(I_r(f, n), r)` and `f - n` with the student
/// output treated as data.
pub fn aux_loss(aux: &AuxModel, psi: &ParamVector, f_pred: ArrayView2<f64>, batch: &CorrectionBatch) -> Result<f64> {
    Ok(aux_value_and_grad(aux, psi, f_pred, batch)?.0)
}

pub fn aux_value_and_grad(aux: &AuxModel, psi: &ParamVector, f_pred: ArrayView2<f64>, batch: &CorrectionBatch) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(domain_err!("empty batch"));
    }
    let x_r = interpolate_batch(f_pred, batch.n.view(), &batch.r)?;
    let target = &f_pred - &batch.n;
    let cond = aux_conditioning(ArrayView1::from(&batch.r), &batch.labels, batch.gamma.view());
    grad_params(&aux.net, psi, x_r.view(), &cond, &SquaredError { target: target.view() })
}

/// One auxiliary regression step's loss and gradient on fresh student
/// outputs.
pub fn aux_step_grad(model: &FlowMapModel, theta: &ParamVector, aux: &AuxModel, psi: &ParamVector, batch: &CorrectionBatch) -> Result<(f64, ParamVector)> {
    let (_, f) = noised_outputs(model, theta, batch)?;
    aux_value_and_grad(aux, psi, f.view(), batch)
}

pub struct CorrectionTerms {
    /// Student forward trace at `delta = 1`.
    pub trace: Trace,
    /// `g - u_gamma` at the noised outputs.
    pub residual: Array2<f64>,
}

pub fn correction_terms(
    model: &FlowMapModel,
    theta: &ParamVector,
    aux: &AuxModel,
    psi: &ParamVector,
    teacher: Guided<'_>,
    batch: &CorrectionBatch,
) -> Result<CorrectionTerms> {
    let ones = Array1::ones(batch.len());
    let trace = model
        .net
        .forward_trace(theta, batch.z.view(), &student_conditioning(ones.view(), &batch.labels, batch.gamma.view()))?;
    let f = combine(batch.z.view(), ones.view(), trace.output.view());
    let x_r = interpolate_batch(f.view(), batch.n.view(), &batch.r)?;
    let r = ArrayView1::from(&batch.r);
    let g = aux.velocity(psi, x_r.view(), r, &batch.labels, batch.gamma.view())?;
    let u = teacher.at(x_r.view(), r, &batch.labels, batch.gamma.view())?;
    Ok(CorrectionTerms { trace, residual: g - u })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectionStats {
    /// Mean of `|Delta|`.
    pub residual_norm: f64,
    /// Mean of `|Delta|^2`.
    pub ikl: f64,
    /// Mean of `(1 - r)^2 / r |Delta|^2`.
    pub ikl_weighted: f64,
    pub count: usize,
}

fn correction_stats(residual: ArrayView2<f64>, r: &[f64]) -> CorrectionStats {
    let mut s = CorrectionStats::default();
    for (row, &r) in residual.outer_iter().zip(r) {
        let sq = row.dot(&row);
        s.residual_norm += sq.sqrt();
        s.ikl += sq;
        s.ikl_weighted += (1.0 - r).powi(2) / r * sq;
        s.count += 1;
    }
    if s.count > 0 {
        let c = s.count as f64;
        s.residual_norm /= c;
        s.ikl /= c;
        s.ikl_weighted /= c;
    }
    s
}

/// `sum_b J_b^T Delta_b` (not normalized) with `J` the Jacobian of
/// `F(z, 1)`, and batch statistics.
pub fn correction_grad(
    model: &FlowMapModel,
    theta: &ParamVector,
    aux: &AuxModel,
    psi: &ParamVector,
    teacher: Guided<'_>,
    batch: &CorrectionBatch,
) -> Result<(ParamVector, CorrectionStats)> {
    let terms = correction_terms(model, theta, aux, psi, teacher, batch)?;
    let stats = correction_stats(terms.residual.view(), &batch.r);
    let mut grad = ParamVector::zeros(theta.len());
    model
        .net
        .backprop(theta, &terms.trace, &batch.labels, terms.residual.view(), &mut grad)?;
    Ok((grad, stats))
}

/// Monte-Carlo surrogate of the time-integrated divergence on a fixed probe
/// batch: mean squared velocity mismatch, unweighted and with the
/// `(1 - r)^2 / r` factor.
pub fn ikl_monitor(
    model: &FlowMapModel,
    theta: &ParamVector,
    aux: &AuxModel,
    psi: &ParamVector,
    teacher: Guided<'_>,
    probe: &CorrectionBatch,
) -> Result<CorrectionStats> {
    let terms = correction_terms(model, theta, aux, psi, teacher, probe)?;
    Ok(correction_stats(terms.residual.view(), &probe.r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, NetworkSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_r_respects_range() {
        let s = RSampler {
            hi: 0.6,
            ..RSampler::default()
        };
        s.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..10_000).all(|_| {
            let r = s.sample(&mut rng);
            r > 0.0 && r <= 0.6
        }));
        let empty = RSampler {
            lo: 0.5,
            hi: 0.5,
            ..RSampler::default()
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn large_mean_pushes_r_to_one() {
        let s = RSampler {
            base: RBase::LogitNormal { mean: 30.0, std: 1.0 },
            ..RSampler::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!((0..1000).all(|_| s.sample(&mut rng) > 1.0 - 1e-9));
    }

    #[test]
    fn uniform_r_fills_the_range() {
        let s = RSampler {
            base: RBase::Uniform,
            lo: 0.0,
            hi: 0.8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws: Vec<f64> = (0..20_000).map(|_| s.sample(&mut rng)).collect();
        assert!(draws.iter().all(|&r| r > 0.0 && r <= 0.8));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.4).abs() < 0.01);
    }

    fn aux_net() -> AuxModel {
        let spec = NetworkSpec {
            input_dim: 2,
            hidden_dims: vec![8, 8],
            output_dim: 2,
            activation: Activation::Silu,
            scalar_conditions: AUX_CONDITIONS.to_vec(),
            class_count: 2,
            embed_dim: 4,
            frequencies: 3,
            max_frequency: crate::net::DEFAULT_MAX_FREQUENCY,
        };
        let net = Network::new(spec).unwrap();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        AuxModel { net, params }
    }

    #[test]
    fn aux_loss_is_zero_for_oracle_and_rejects_empty() {
        let aux = aux_net();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = CorrectionBatch::draw(16, 2, &RSampler::default(), |_| Label::Null, |_| 1.0, &mut rng);
        let f = prior_samples(16, 2, &mut rng);
        let x_r = interpolate_batch(f.view(), batch.n.view(), &batch.r).unwrap();
        let g = aux.velocity(&aux.params, x_r.view(), ArrayView1::from(&batch.r), &batch.labels, batch.gamma.view()).unwrap();
        let loss = aux_loss(&aux, &aux.params, f.view(), &batch).unwrap();
        let manual = (&g - &(&f - &batch.n)).mapv(|v| v * v).sum() / 16.0;
        assert!((loss - manual).abs() < 1e-12);
        // A zero network is exact when the outputs coincide with the noise.
        let zero = ParamVector::zeros(aux.params.len());
        assert_eq!(aux_loss(&aux, &zero, batch.n.view(), &batch).unwrap(), 0.0);
        let empty = CorrectionBatch {
            z: Array2::zeros((0, 2)),
            labels: vec![],
            gamma: Array1::zeros(0),
            r: vec![],
            n: Array2::zeros((0, 2)),
        };
        assert!(aux_loss(&aux, &aux.params, Array2::zeros((0, 2)).view(), &empty).is_err());
    }
}
