//! The teacher: velocity fields, classifier-free guidance, ODE solvers and
//! conditional flow-matching training.

use log::info;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset2D, Gmm};
use crate::error::{config_err, domain_err, Error, Result};
use crate::interpolant::{interpolate_batch, prior_samples};
use crate::net::{grad_params, Conditioning, Label, Network, NetworkSpec, ParamVector, ScalarName, SquaredError};
use crate::optim::{ema_update, Adam, AdamConfig};

/// Closed-form velocity fields used as oracles.
#[derive(Clone, Debug, PartialEq)]
pub enum Analytic {
    /// `u(x, t) = c`.
    Constant(Vec<f64>),
    /// `u(x, t) = a x`.
    Linear { a: f64 },
    /// Exact marginal velocity of the linear path started from a mixture.
    Gmm(Gmm),
}

/// A marginal velocity `u(x_t, t | c)`.
#[derive(Clone, Debug)]
pub enum VelocityField {
    Network { net: Network, params: ParamVector },
    Analytic(Analytic),
}

impl VelocityField {
    /// Row-wise velocities at per-row times.
    pub fn velocity(&self, x: ArrayView2<f64>, t: ArrayView1<f64>, labels: &[Label]) -> Result<Array2<f64>> {
        if t.len() != x.nrows() || labels.len() != x.nrows() {
            return Err(config_err!("velocity query with mismatched batch sizes"));
        }
        match self {
            VelocityField::Network { net, params } => {
                let cond = Conditioning::new(labels.to_vec()).with(ScalarName::T, t.to_owned());
                net.forward(params, x, &cond)
            }
            VelocityField::Analytic(Analytic::Constant(c)) => {
                if c.len() != x.ncols() {
                    return Err(config_err!("constant field has dimension {}", c.len()));
                }
                let row = ArrayView1::from(c.as_slice());
                Ok(Array2::from_shape_fn(x.dim(), |(_, j)| row[j]))
            }
            VelocityField::Analytic(Analytic::Linear { a }) => Ok(x.mapv(|v| a * v)),
            VelocityField::Analytic(Analytic::Gmm(g)) => {
                let mut out = Array2::zeros(x.dim());
                for (b, mut row) in out.outer_iter_mut().enumerate() {
                    row.assign(&g.marginal_velocity(x.row(b), t[b], labels[b])?);
                }
                Ok(out)
            }
        }
    }

    /// Velocity at a single time shared by the whole batch.
    pub fn velocity_at(&self, x: ArrayView2<f64>, t: f64, labels: &[Label]) -> Result<Array2<f64>> {
        self.velocity(x, Array1::from_elem(x.nrows(), t).view(), labels)
    }
}

/// Time window where guidance is applied; outside it the guidance strength
/// is treated as 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceInterval {
    pub lo: f64,
    pub hi: f64,
}

impl GuidanceInterval {
    pub const FULL: GuidanceInterval = GuidanceInterval { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let g = GuidanceInterval { lo, hi };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lo && self.lo <= self.hi && self.hi <= 1.0) {
            return Err(config_err!("guidance interval [{}, {}] is not inside [0, 1]", self.lo, self.hi));
        }
        Ok(())
    }

    pub fn contains(&self, t: f64) -> bool {
        self.lo <= t && t <= self.hi
    }

    /// Guidance strength actually applied at time `t`.
    pub fn effective(&self, gamma: f64, t: f64) -> f64 {
        if self.contains(t) {
            gamma
        } else {
            1.0
        }
    }
}

/// `gamma u(x|c) + (1 - gamma) u(x|null)` inside the interval, `u(x|c)`
/// elsewhere. Unconditional rows are returned unguided since both branches
/// coincide.
pub fn guided_velocity(
    field: &VelocityField,
    x: ArrayView2<f64>,
    t: ArrayView1<f64>,
    labels: &[Label],
    gamma: ArrayView1<f64>,
    interval: GuidanceInterval,
) -> Result<Array2<f64>> {
    interval.validate()?;
    if gamma.len() != x.nrows() {
        return Err(config_err!("guidance strengths do not match batch"));
    }
    if let Some(g) = gamma.iter().find(|g| !(**g >= 1.0)) {
        return Err(domain_err!("guidance strength {g} below 1"));
    }
    let mut out = field.velocity(x, t, labels)?;
    let rows: Vec<usize> = (0..x.nrows())
        .filter(|&b| labels[b] != Label::Null && gamma[b] != 1.0 && interval.contains(t[b]))
        .collect();
    if rows.is_empty() {
        return Ok(out);
    }
    let xs = x.select(Axis(0), &rows);
    let ts = t.select(Axis(0), &rows);
    let uncond = field.velocity(xs.view(), ts.view(), &vec![Label::Null; rows.len()])?;
    for (k, &b) in rows.iter().enumerate() {
        let g = gamma[b];
        let mut row = out.row_mut(b);
        row *= g;
        row.scaled_add(1.0 - g, &uncond.row(k));
    }
    Ok(out)
}

/// A teacher query: field plus the guidance to apply.
#[derive(Clone, Copy, Debug)]
pub struct Guided<'a> {
    pub field: &'a VelocityField,
    pub interval: GuidanceInterval,
}

impl Guided<'_> {
    pub fn at(&self, x: ArrayView2<f64>, t: ArrayView1<f64>, labels: &[Label], gamma: ArrayView1<f64>) -> Result<Array2<f64>> {
        guided_velocity(self.field, x, t, labels, gamma, self.interval)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    Euler,
    Heun,
}

/// Fixed-step integrator on the uniform grid `1 = t_1 > ... > t_{N+1} = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub steps: usize,
}

impl SolverConfig {
    pub fn heun(steps: usize) -> Self {
        SolverConfig {
            method: SolverMethod::Heun,
            steps,
        }
    }

    pub fn euler(steps: usize) -> Self {
        SolverConfig {
            method: SolverMethod::Euler,
            steps,
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        uniform_grid(self.steps)
    }

    /// Field evaluations per sample for a full `1 -> 0` solve.
    pub fn nfe(&self) -> usize {
        match self.method {
            SolverMethod::Euler => self.steps,
            SolverMethod::Heun => 2 * self.steps,
        }
    }

    /// Grid nodes from `t_from` down to `t_to`: the endpoints plus every grid
    /// node strictly between them.
    fn nodes(&self, t_from: f64, t_to: f64) -> Vec<f64> {
        let mut nodes = vec![t_from];
        nodes.extend(self.grid().into_iter().filter(|&t| t < t_from && t > t_to));
        nodes.push(t_to);
        nodes
    }
}

/// `t_i = 1 - (i - 1) / N` for `i = 1..=N+1`, with exact endpoints.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    (0..=n).map(|i| if i == n { 0.0 } else { 1.0 - i as f64 / n as f64 }).collect()
}

fn check_finite(v: &Array2<f64>, step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration {
            step,
            reason: "non-finite field output".into(),
        })
    }
}

/// Integrates `dx = -u(x, t) dt` from `t_from` down to `t_to`, recording
/// every grid state when `keep` is set.
fn integrate<F>(mut field: F, z: ArrayView2<f64>, t_from: f64, t_to: f64, solver: &SolverConfig, keep: bool) -> Result<Vec<(f64, Array2<f64>)>>
where
    F: FnMut(ArrayView2<f64>, f64) -> Result<Array2<f64>>,
{
    if solver.steps == 0 {
        return Err(config_err!("solver needs at least one step"));
    }
    if !(t_from <= 1.0 && t_from > t_to && t_to >= 0.0) {
        return Err(domain_err!("cannot integrate from {t_from} to {t_to}"));
    }
    let nodes = solver.nodes(t_from, t_to);
    let mut x = z.to_owned();
    let mut traj = Vec::new();
    if keep {
        traj.push((t_from, x.clone()));
    }
    for (i, w) in nodes.windows(2).enumerate() {
        let (t0, t1) = (w[0], w[1]);
        let h = t0 - t1;
        let v0 = field(x.view(), t0)?;
        check_finite(&v0, i)?;
        match solver.method {
            SolverMethod::Euler => x.scaled_add(h, &v0),
            SolverMethod::Heun => {
                let mut pred = x.clone();
                pred.scaled_add(h, &v0);
                let v1 = field(pred.view(), t1)?;
                check_finite(&v1, i)?;
                x.scaled_add(0.5 * h, &v0);
                x.scaled_add(0.5 * h, &v1);
            }
        }
        if keep {
            traj.push((t1, x.clone()));
        }
    }
    Ok(traj)
}

/// Final state of the generating ODE started at `z` at time `t_from`.
pub fn solve<F>(field: F, z: ArrayView2<f64>, t_from: f64, t_to: f64, solver: &SolverConfig) -> Result<Array2<f64>>
where
    F: FnMut(ArrayView2<f64>, f64) -> Result<Array2<f64>>,
{
    let mut traj = integrate(field, z, t_from, t_to, solver, true)?;
    Ok(traj.pop().expect("at least one node").1)
}

/// Every grid state of the generating ODE, starting with `(t_from, z)`.
pub fn solve_trajectory<F>(field: F, z: ArrayView2<f64>, t_from: f64, t_to: f64, solver: &SolverConfig) -> Result<Vec<(f64, Array2<f64>)>>
where
    F: FnMut(ArrayView2<f64>, f64) -> Result<Array2<f64>>,
{
    integrate(field, z, t_from, t_to, solver, true)
}

/// Teacher samples from prior draws `z` with per-row labels and guidance.
pub fn sample_teacher(
    teacher: Guided<'_>,
    z: ArrayView2<f64>,
    labels: &[Label],
    gamma: ArrayView1<f64>,
    t_from: f64,
    t_to: f64,
    solver: &SolverConfig,
) -> Result<Array2<f64>> {
    solve(
        |x, t| teacher.at(x, Array1::from_elem(x.nrows(), t).view(), labels, gamma),
        z,
        t_from,
        t_to,
        solver,
    )
}

/// Conditional flow-matching loss: mean squared error between the network
/// at `(I_t(x, z), t, c)` and `x - z`.
pub fn cfm_loss(
    net: &Network,
    params: &ParamVector,
    x: ArrayView2<f64>,
    z: ArrayView2<f64>,
    t: &[f64],
    labels: &[Label],
) -> Result<f64> {
    Ok(cfm_value_and_grad(net, params, x, z, t, labels)?.0)
}

pub fn cfm_value_and_grad(
    net: &Network,
    params: &ParamVector,
    x: ArrayView2<f64>,
    z: ArrayView2<f64>,
    t: &[f64],
    labels: &[Label],
) -> Result<(f64, ParamVector)> {
    if x.nrows() == 0 {
        return Err(domain_err!("empty batch"));
    }
    let xt = interpolate_batch(x, z, t)?;
    let target = &x - &z;
    let cond = Conditioning::new(labels.to_vec()).with(ScalarName::T, Array1::from(t.to_vec()));
    grad_params(net, params, xt.view(), &cond, &SquaredError { target: target.view() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    /// Probability of replacing the class by the null label.
    pub label_dropout: f64,
    /// Final learning rate as a fraction of `lr`, reached by cosine decay.
    #[serde(default = "one")]
    pub lr_floor: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            steps: 8000,
            batch_size: 256,
            lr: 2e-3,
            ema_decay: 0.999,
            label_dropout: 0.1,
            lr_floor: 0.05,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("teacher batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) || !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config_err!("label dropout and EMA decay must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(config_err!("lr_floor must lie in [0, 1]"));
        }
        AdamConfig::with_lr(self.lr).validate()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = step as f64 / self.steps.max(1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.lr * (self.lr_floor + (1.0 - self.lr_floor) * cos)
    }
}

/// Outcome of teacher training. On divergence the parameters are the last
/// finite state and `diverged` names the failing step.
#[derive(Clone, Debug)]
pub struct TeacherRun {
    pub net: Network,
    pub params: ParamVector,
    pub ema: ParamVector,
    pub losses: Vec<f64>,
    pub diverged: Option<(usize, String)>,
}

impl TeacherRun {
    /// The EMA weights as a velocity field.
    pub fn field(&self) -> VelocityField {
        VelocityField::Network {
            net: self.net.clone(),
            params: self.ema.clone(),
        }
    }
}

/// Conditional flow matching with label dropout and uniform times.
pub fn train_teacher<R: Rng + ?Sized>(ds: &Dataset2D, spec: NetworkSpec, cfg: &TeacherConfig, rng: &mut R) -> Result<TeacherRun> {
    cfg.validate()?;
    if spec.scalar_conditions != [ScalarName::T] {
        return Err(config_err!("teacher must be conditioned on t only"));
    }
    if spec.input_dim != ds.dim() || spec.class_count != ds.class_count() {
        return Err(config_err!("teacher spec does not match the dataset"));
    }
    let net = Network::new(spec)?;
    let mut params = net.init_params(rng);
    let mut ema = params.clone();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), params.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut diverged = None;
    let b = cfg.batch_size;
    for step in 0..cfg.steps {
        let (x, classes) = ds.sample(Label::Null, b, rng)?;
        let labels: Vec<Label> = classes
            .iter()
            .map(|&c| if rng.gen::<f64>() < cfg.label_dropout { Label::Null } else { Label::Class(c) })
            .collect();
        let z = prior_samples(b, ds.dim(), rng);
        let t: Vec<f64> = (0..b).map(|_| rng.gen::<f64>()).collect();
        let (loss, grad) = cfm_value_and_grad(&net, &params, x.view(), z.view(), &t, &labels)?;
        if !loss.is_finite() || !grad.is_finite() {
            diverged = Some((step, format!("non-finite loss {loss}")));
            break;
        }
        losses.push(loss);
        opt.config.lr = cfg.lr_at(step);
        opt.step(&mut params, &grad);
        ema_update(&mut ema, &params, cfg.ema_decay);
        if step % 1000 == 0 {
            info!("teacher step {step}: loss {loss:.4}");
        }
    }
    Ok(TeacherRun {
        net,
        params,
        ema,
        losses,
        diverged,
    })
}
