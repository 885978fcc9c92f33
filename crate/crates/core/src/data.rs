//! Class-conditional synthetic 2D distributions.
//!
//! All samplers are exact. Gaussian mixtures additionally expose their
//! log-density, score and the closed-form marginal velocity of the linear
//! noising path, which serve as analytic oracles throughout the crate.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_err, Error, Result};
use crate::net::Label;

/// Mixture of axis-aligned Gaussians; each component belongs to one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gmm {
    pub means: Vec<Vec<f64>>,
    /// Per-component, per-dimension standard deviations.
    pub stds: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub classes: Vec<usize>,
}

impl Gmm {
    /// `k` components of standard deviation `std` evenly spaced on a circle
    /// of the given radius; component `i` is class `i`.
    pub fn ring(k: usize, radius: f64, std: f64) -> Gmm {
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Gmm {
            means,
            stds: vec![vec![std; 2]; k],
            weights: vec![1.0 / k as f64; k],
            classes: (0..k).collect(),
        }
    }

    /// One isotropic Gaussian component.
    pub fn single(mean: Vec<f64>, std: f64) -> Gmm {
        let d = mean.len();
        Gmm {
            means: vec![mean],
            stds: vec![vec![std; d]],
            weights: vec![1.0],
            classes: vec![0],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.means.len();
        if k == 0 {
            return Err(config_err!("mixture needs at least one component"));
        }
        if self.stds.len() != k || self.weights.len() != k || self.classes.len() != k {
            return Err(config_err!("mixture fields must all have {k} entries"));
        }
        let d = self.dim();
        if d == 0 || self.means.iter().any(|m| m.len() != d) || self.stds.iter().any(|s| s.len() != d) {
            return Err(config_err!("inconsistent component dimensions"));
        }
        if self.stds.iter().flatten().any(|&s| !(s > 0.0)) {
            return Err(config_err!("component standard deviations must be positive"));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(config_err!("weights must be non-negative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(config_err!("weights sum to {total}, expected 1"));
        }
        Ok(())
    }

    fn components_of(&self, label: Label) -> Vec<usize> {
        match label {
            Label::Null => (0..self.len()).collect(),
            Label::Class(c) => (0..self.len()).filter(|&k| self.classes[k] == c).collect(),
        }
    }

    /// Log of `sum_k w_k N(x; m_k(t), v_k(t))` restricted to `comps`, where the
    /// components are pushed through the noising path to time `t`.
    fn log_terms(&self, x: ArrayView1<f64>, t: f64, comps: &[usize]) -> Vec<f64> {
        comps
            .iter()
            .map(|&k| {
                let mut lp = self.weights[k].ln();
                for j in 0..x.len() {
                    let m = (1.0 - t) * self.means[k][j];
                    let v = (1.0 - t).powi(2) * self.stds[k][j].powi(2) + t * t;
                    let d = x[j] - m;
                    lp += -0.5 * (d * d / v + v.ln() + (2.0 * std::f64::consts::PI).ln());
                }
                lp
            })
            .collect()
    }

    pub fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        log_sum_exp(&self.log_terms(x, 0.0, &self.components_of(Label::Null)))
    }

    /// Log-density of the mixture restricted to one class and renormalized.
    pub fn class_log_density(&self, x: ArrayView1<f64>, class: usize) -> Result<f64> {
        let comps = self.components_of(Label::Class(class));
        if comps.is_empty() {
            return Err(domain_err!("unknown class {class}"));
        }
        let mass: f64 = comps.iter().map(|&k| self.weights[k]).sum();
        Ok(log_sum_exp(&self.log_terms(x, 0.0, &comps)) - mass.ln())
    }

    pub fn score(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let comps = self.components_of(Label::Null);
        let resp = softmax(&self.log_terms(x, 0.0, &comps));
        let mut s = Array1::zeros(x.len());
        for (&k, r) in comps.iter().zip(resp) {
            for j in 0..x.len() {
                s[j] -= r * (x[j] - self.means[k][j]) / self.stds[k][j].powi(2);
            }
        }
        s
    }

    /// Exact marginal velocity `E[x - z | x_t]` of the linear path started
    /// from this mixture (restricted to `label`'s components).
    pub fn marginal_velocity(&self, x_t: ArrayView1<f64>, t: f64, label: Label) -> Result<Array1<f64>> {
        let comps = self.components_of(label);
        if comps.is_empty() {
            return Err(domain_err!("no components for {label:?}"));
        }
        let resp = softmax(&self.log_terms(x_t, t, &comps));
        let mut u = Array1::zeros(x_t.len());
        for (&k, r) in comps.iter().zip(resp) {
            for j in 0..x_t.len() {
                let mu = self.means[k][j];
                let s2 = self.stds[k][j].powi(2);
                let v = (1.0 - t).powi(2) * s2 + t * t;
                u[j] += r * (mu + ((1.0 - t) * s2 - t) / v * (x_t[j] - (1.0 - t) * mu));
            }
        }
        Ok(u)
    }

    /// Index of the component whose mean is nearest to `x`.
    pub fn nearest_component(&self, x: ArrayView1<f64>) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, m) in self.means.iter().enumerate() {
            let d: f64 = m.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    fn sample_from<R: Rng + ?Sized>(&self, comps: &[usize], rng: &mut R) -> (Vec<f64>, usize) {
        let w: Vec<f64> = comps.iter().map(|&k| self.weights[k]).collect();
        let idx = WeightedIndex::new(&w).expect("positive class mass").sample(rng);
        let k = comps[idx];
        let x = (0..self.dim())
            .map(|j| self.means[k][j] + self.stds[k][j] * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, self.classes[k])
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

/// Serializable description of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    RingGmm { components: usize, radius: f64, std: f64 },
    Gmm(Gmm),
    /// Alternating cells of an `cells x cells` board on `[-half, half]^2`;
    /// each occupied cell is a class.
    Checkerboard { cells: usize, half_width: f64 },
    /// Concentric circles with radial Gaussian jitter; each ring is a class.
    Rings { radii: Vec<f64>, std: f64 },
    /// Two interleaved half circles; each moon is a class.
    Moons { std: f64, scale: f64 },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::RingGmm {
            components: 8,
            radius: 4.0,
            std: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset2D {
    Gmm(Gmm),
    Checkerboard { cells: usize, half_width: f64 },
    Rings { radii: Vec<f64>, std: f64 },
    Moons { std: f64, scale: f64 },
}

impl Dataset2D {
    pub fn from_config(cfg: &DatasetConfig) -> Result<Self> {
        let ds = match cfg {
            DatasetConfig::RingGmm { components, radius, std } => {
                if *components == 0 {
                    return Err(config_err!("ring mixture needs components"));
                }
                Dataset2D::Gmm(Gmm::ring(*components, *radius, *std))
            }
            DatasetConfig::Gmm(g) => Dataset2D::Gmm(g.clone()),
            DatasetConfig::Checkerboard { cells, half_width } => {
                if *cells < 2 || *half_width <= 0.0 {
                    return Err(config_err!("checkerboard needs >= 2 cells and positive width"));
                }
                Dataset2D::Checkerboard {
                    cells: *cells,
                    half_width: *half_width,
                }
            }
            DatasetConfig::Rings { radii, std } => {
                if radii.is_empty() {
                    return Err(config_err!("rings need at least one radius"));
                }
                Dataset2D::Rings {
                    radii: radii.clone(),
                    std: *std,
                }
            }
            DatasetConfig::Moons { std, scale } => Dataset2D::Moons { std: *std, scale: *scale },
        };
        if let Dataset2D::Gmm(g) = &ds {
            g.validate()?;
        }
        Ok(ds)
    }

    pub fn dim(&self) -> usize {
        match self {
            Dataset2D::Gmm(g) => g.dim(),
            _ => 2,
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            Dataset2D::Gmm(g) => g.classes.iter().max().map_or(0, |m| m + 1),
            Dataset2D::Checkerboard { cells, .. } => cells * cells / 2,
            Dataset2D::Rings { radii, .. } => radii.len(),
            Dataset2D::Moons { .. } => 2,
        }
    }

    pub fn as_gmm(&self) -> Result<&Gmm> {
        match self {
            Dataset2D::Gmm(g) => Ok(g),
            _ => Err(Error::Unsupported("operation requires a Gaussian mixture".into())),
        }
    }

    /// `n` exact samples and their classes; `Label::Null` draws from the full
    /// distribution.
    pub fn sample<R: Rng + ?Sized>(&self, label: Label, n: usize, rng: &mut R) -> Result<(Array2<f64>, Vec<usize>)> {
        if let Label::Class(c) = label {
            if c >= self.class_count() {
                return Err(domain_err!("unknown class {c} (have {})", self.class_count()));
            }
        }
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        let mut classes = Vec::with_capacity(n);
        let k = self.class_count();
        for mut row in out.outer_iter_mut() {
            let (x, c) = match self {
                Dataset2D::Gmm(g) => g.sample_from(&g.components_of(label), rng),
                _ => {
                    let c = label.class().unwrap_or_else(|| rng.gen_range(0..k));
                    (self.sample_class(c, rng), c)
                }
            };
            row.assign(&ArrayView1::from(&x));
            classes.push(c);
        }
        Ok((out, classes))
    }

    fn sample_class<R: Rng + ?Sized>(&self, c: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Dataset2D::Gmm(_) => unreachable!("handled by the mixture sampler"),
            Dataset2D::Checkerboard { cells, half_width } => {
                let (i, j) = checker_cell(*cells, c);
                let w = 2.0 * half_width / *cells as f64;
                vec![
                    -half_width + w * (j as f64 + rng.gen::<f64>()),
                    -half_width + w * (i as f64 + rng.gen::<f64>()),
                ]
            }
            Dataset2D::Rings { radii, std } => {
                let a = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                let r = radii[c] + std * rng.sample::<f64, _>(StandardNormal);
                vec![r * a.cos(), r * a.sin()]
            }
            Dataset2D::Moons { std, scale } => {
                let a = rng.gen_range(0.0..std::f64::consts::PI);
                let (x, y) = if c == 0 {
                    (a.cos(), a.sin())
                } else {
                    (1.0 - a.cos(), 0.5 - a.sin())
                };
                vec![
                    scale * (x - 0.5) + std * rng.sample::<f64, _>(StandardNormal),
                    scale * (y - 0.25) + std * rng.sample::<f64, _>(StandardNormal),
                ]
            }
        }
    }

    /// Whether `x` lies in the support of the checkerboard (true for other
    /// kinds, whose support is unbounded).
    pub fn in_support(&self, x: ArrayView1<f64>) -> bool {
        match self {
            Dataset2D::Checkerboard { cells, half_width } => {
                let w = 2.0 * half_width / *cells as f64;
                let j = ((x[0] + half_width) / w).floor();
                let i = ((x[1] + half_width) / w).floor();
                if i < 0.0 || j < 0.0 || i >= *cells as f64 || j >= *cells as f64 {
                    return false;
                }
                (i as usize + j as usize) % 2 == 0
            }
            _ => true,
        }
    }
}

/// Row/column of the `c`-th occupied checkerboard cell (cells with even
/// `row + col`).
fn checker_cell(cells: usize, c: usize) -> (usize, usize) {
    let mut seen = 0;
    for i in 0..cells {
        for j in 0..cells {
            if (i + j) % 2 == 0 {
                if seen == c {
                    return (i, j);
                }
                seen += 1;
            }
        }
    }
    unreachable!("class index checked by caller")
}

/// Random similarity transform plus noise used to corrupt distillation data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationLevel {
    pub level: usize,
    pub max_rotation_deg: f64,
    pub scale_jitter: f64,
    pub noise_std: f64,
}

impl AugmentationLevel {
    /// The default ladder, levels 0 through 3.
    pub fn ladder(level: usize) -> Result<AugmentationLevel> {
        let (rot, scale, noise) = match level {
            0 => (0.0, 0.0, 0.0),
            1 => (15.0, 0.05, 0.05),
            2 => (45.0, 0.15, 0.15),
            3 => (90.0, 0.30, 0.30),
            _ => return Err(config_err!("augmentation level {level} is not defined (0..=3)")),
        };
        Ok(AugmentationLevel {
            level,
            max_rotation_deg: rot,
            scale_jitter: scale,
            noise_std: noise,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.max_rotation_deg == 0.0 && self.scale_jitter == 0.0 && self.noise_std == 0.0
    }
}

/// Applies an independent draw of the augmentation to every 2D row.
pub fn augment<R: Rng + ?Sized>(batch: ArrayView2<f64>, aug: &AugmentationLevel, rng: &mut R) -> Result<Array2<f64>> {
    if aug.is_identity() {
        return Ok(batch.to_owned());
    }
    if batch.ncols() != 2 {
        return Err(domain_err!("augmentation is defined for 2D data"));
    }
    let max_rot = aug.max_rotation_deg.to_radians();
    let mut out = batch.to_owned();
    for mut row in out.outer_iter_mut() {
        let a = if max_rot > 0.0 { rng.gen_range(-max_rot..=max_rot) } else { 0.0 };
        let s = if aug.scale_jitter > 0.0 {
            1.0 + rng.gen_range(-aug.scale_jitter..=aug.scale_jitter)
        } else {
            1.0
        };
        let (sin, cos) = a.sin_cos();
        let (x, y) = (row[0], row[1]);
        row[0] = s * (cos * x - sin * y);
        row[1] = s * (sin * x + cos * y);
        if aug.noise_std > 0.0 {
            row[0] += aug.noise_std * rng.sample::<f64, _>(StandardNormal);
            row[1] += aug.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}
