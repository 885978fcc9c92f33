//! The one-step student `f(z, delta) = z + delta F(z, delta)` and its
//! generating velocities.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use rand::Rng;

use crate::error::{config_err, domain_err, Result};
use crate::net::{Conditioning, DualBatch, Label, Network, NetworkSpec, ParamVector, ScalarName};
use crate::teacher::uniform_grid;

/// Scalar conditions of the student network. The time input is inherited
/// from the teacher and always set to 1.
pub const STUDENT_CONDITIONS: [ScalarName; 3] = [ScalarName::T, ScalarName::Delta, ScalarName::Gamma];

#[derive(Clone, Debug)]
pub struct FlowMapModel {
    pub net: Network,
    pub params: ParamVector,
    pub ema: ParamVector,
}

/// Network conditioning for a student query.
pub fn student_conditioning(delta: ArrayView1<f64>, labels: &[Label], gamma: ArrayView1<f64>) -> Conditioning {
    Conditioning::new(labels.to_vec())
        .with_const(ScalarName::T, 1.0)
        .with(ScalarName::Delta, delta.to_owned())
        .with(ScalarName::Gamma, gamma.to_owned())
}

fn check_delta(delta: ArrayView1<f64>) -> Result<()> {
    match delta.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        Some(d) => Err(domain_err!("jump duration {d} outside [0, 1]")),
        None => Ok(()),
    }
}

/// `z + delta F`, returning `z` untouched on rows with `delta = 0`.
pub fn combine(z: ArrayView2<f64>, delta: ArrayView1<f64>, f: ArrayView2<f64>) -> Array2<f64> {
    let mut out = z.to_owned();
    for (b, mut row) in out.outer_iter_mut().enumerate() {
        let d = delta[b];
        if d != 0.0 {
            row.scaled_add(d, &f.row(b));
        }
    }
    out
}

impl FlowMapModel {
    /// Student seeded from a teacher conditioned on `t` only; the new jump
    /// and guidance embeddings start at zero, so initially
    /// `F(z, delta) = u(z, 1)`.
    pub fn from_teacher<R: Rng + ?Sized>(teacher: &Network, teacher_params: &ParamVector, rng: &mut R) -> Result<Self> {
        let spec = teacher.spec().with_conditions(&STUDENT_CONDITIONS);
        let net = Network::new(spec)?;
        let params = net.transplant(teacher, teacher_params, rng)?;
        Ok(FlowMapModel {
            net,
            ema: params.clone(),
            params,
        })
    }

    pub fn new(spec: NetworkSpec, params: ParamVector) -> Result<Self> {
        if spec.scalar_conditions != STUDENT_CONDITIONS {
            return Err(config_err!("student must be conditioned on (t, delta, gamma)"));
        }
        let net = Network::new(spec)?;
        if params.len() != net.param_count() {
            return Err(config_err!("parameter vector does not match the student layout"));
        }
        Ok(FlowMapModel {
            net,
            ema: params.clone(),
            params,
        })
    }

    /// A view of the model using its EMA weights as the live weights.
    pub fn ema_model(&self) -> FlowMapModel {
        FlowMapModel {
            net: self.net.clone(),
            params: self.ema.clone(),
            ema: self.ema.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.net.spec().input_dim
    }

    /// `F(z, delta, c, gamma)` under the given parameters.
    pub fn displacement(
        &self,
        params: &ParamVector,
        z: ArrayView2<f64>,
        delta: ArrayView1<f64>,
        labels: &[Label],
        gamma: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        self.net.forward(params, z, &student_conditioning(delta, labels, gamma))
    }

    /// `F` and `d F / d delta` by forward-mode differentiation.
    pub fn displacement_jvp(
        &self,
        params: &ParamVector,
        z: ArrayView2<f64>,
        delta: ArrayView1<f64>,
        labels: &[Label],
        gamma: ArrayView1<f64>,
    ) -> Result<DualBatch> {
        self.net
            .jvp_scalar(params, z, &student_conditioning(delta, labels, gamma), ScalarName::Delta)
    }

    /// `f(z, delta)` with the live parameters.
    pub fn apply(&self, z: ArrayView2<f64>, delta: ArrayView1<f64>, labels: &[Label], gamma: ArrayView1<f64>) -> Result<Array2<f64>> {
        flowmap_apply(self, &self.params, z, delta, labels, gamma)
    }
}

/// `z + delta F(z, delta, c, gamma)`; exactly `z` where `delta = 0`.
pub fn flowmap_apply(
    model: &FlowMapModel,
    params: &ParamVector,
    z: ArrayView2<f64>,
    delta: ArrayView1<f64>,
    labels: &[Label],
    gamma: ArrayView1<f64>,
) -> Result<Array2<f64>> {
    check_delta(delta)?;
    let f = model.displacement(params, z, delta, labels, gamma)?;
    Ok(combine(z, delta, f.view()))
}

/// `d f / d delta = F + delta dF/d delta`.
pub fn generating_velocity_cont(
    model: &FlowMapModel,
    params: &ParamVector,
    z: ArrayView2<f64>,
    delta: ArrayView1<f64>,
    labels: &[Label],
    gamma: ArrayView1<f64>,
) -> Result<Array2<f64>> {
    check_delta(delta)?;
    let dual = model.displacement_jvp(params, z, delta, labels, gamma)?;
    let mut v = dual.primal;
    Zip::from(v.rows_mut())
        .and(dual.tangent.rows())
        .and(&delta)
        .for_each(|mut v, dt, &d| v.scaled_add(d, &dt));
    Ok(v)
}

/// Time boundaries `1 = t_1 > ... > t_{N+1} = 0` and the jump durations
/// `delta_{1,i} = t_1 - t_i` measured from the prior.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaGrid {
    boundaries: Vec<f64>,
}

impl DeltaGrid {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(config_err!("grid needs at least one interval"));
        }
        Ok(DeltaGrid {
            boundaries: uniform_grid(n),
        })
    }

    pub fn from_boundaries(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.len() < 2 || boundaries[0] != 1.0 || *boundaries.last().expect("len >= 2") != 0.0 {
            return Err(config_err!("grid must run from exactly 1 to exactly 0"));
        }
        if boundaries.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(config_err!("grid must be strictly decreasing"));
        }
        Ok(DeltaGrid { boundaries })
    }

    /// Number of intervals `N`.
    pub fn intervals(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// `t_i` for `i` in `1..=N+1`.
    pub fn t(&self, i: usize) -> f64 {
        self.boundaries[i - 1]
    }

    /// `delta_{1,i} = 1 - t_i`, computed so that the endpoints are exact.
    pub fn delta(&self, i: usize) -> f64 {
        let t = self.t(i);
        if t == 0.0 {
            1.0
        } else {
            1.0 - t
        }
    }

    /// Width `delta_{i,i+1} = t_i - t_{i+1}` of interval `i`.
    pub fn width(&self, i: usize) -> f64 {
        self.t(i) - self.t(i + 1)
    }

    pub fn check_interval(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.intervals() {
            return Err(domain_err!("interval index {i} outside 1..={}", self.intervals()));
        }
        Ok(())
    }

    /// The interval index `i` whose start `delta_{1,i}` is the largest grid
    /// duration not exceeding `delta` (capped at `N`).
    pub fn floor_index(&self, delta: f64) -> usize {
        let mut best = 1;
        for i in 1..=self.intervals() {
            if self.delta(i) <= delta {
                best = i;
            }
        }
        best
    }
}

/// Forward difference `(f(z, delta_{1,i+1}) - f(z, delta_{1,i})) / delta_{i,i+1}`.
pub fn generating_velocity_disc(
    model: &FlowMapModel,
    params: &ParamVector,
    z: ArrayView2<f64>,
    grid: &DeltaGrid,
    i: usize,
    labels: &[Label],
    gamma: ArrayView1<f64>,
) -> Result<Array2<f64>> {
    grid.check_interval(i)?;
    let n = z.nrows();
    let lo = Array1::from_elem(n, grid.delta(i));
    let hi = Array1::from_elem(n, grid.delta(i + 1));
    let f_lo = flowmap_apply(model, params, z, lo.view(), labels, gamma)?;
    let f_hi = flowmap_apply(model, params, z, hi.view(), labels, gamma)?;
    Ok((f_hi - f_lo) / grid.width(i))
}
