//! Noising interpolants, conditional velocities, the forward transition
//! kernel between noise levels, and the score/velocity translation.
//!
//! Conventions: `t = 0` is data, `t = 1` is the standard normal prior, and
//! velocities point from prior towards data, so samples are generated by
//! integrating `dx = -u dt` from `t = 1` down to `t = 0`.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{domain_err, Result};

/// A Gaussian noising path `x_t = a(t) x + b(t) z`.
pub trait Interpolant {
    /// `(a(t), b(t))`.
    fn coeffs(&self, t: f64) -> (f64, f64);
    /// `(a'(t), b'(t))`.
    fn rates(&self, t: f64) -> (f64, f64);

    fn interpolate(&self, x: ArrayView1<f64>, z: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
        check_unit("t", t)?;
        check_shapes(x.len(), z.len())?;
        let (a, b) = self.coeffs(t);
        Ok(&x * a + &z * b)
    }

    /// `-d/dt x_t` for the endpoint pair, at time `t`.
    fn cond_velocity(&self, x: ArrayView1<f64>, z: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
        check_shapes(x.len(), z.len())?;
        let (da, db) = self.rates(t);
        Ok(&x * (-da) + &z * (-db))
    }

    /// Moves a sample at noise level `t` to the noisier level `t_c` by
    /// adding fresh noise `n`; identity when `t_c <= t`.
    fn transition(&self, x_t: ArrayView1<f64>, n: ArrayView1<f64>, t: f64, t_c: f64) -> Result<Array1<f64>> {
        check_shapes(x_t.len(), n.len())?;
        if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&t_c) {
            return Err(domain_err!("transition times must lie in [0, 1], got t={t}, t_c={t_c}"));
        }
        if t_c <= t {
            return Ok(x_t.to_owned());
        }
        let (ratio, scale) = self.transition_coeffs(t, t_c);
        Ok(&x_t * ratio + &n * scale)
    }

    /// Mean ratio and noise scale of the transition kernel (`t_c > t`).
    fn transition_coeffs(&self, t: f64, t_c: f64) -> (f64, f64) {
        let (a_t, b_t) = self.coeffs(t);
        let (a_c, b_c) = self.coeffs(t_c);
        let ratio = a_c / a_t;
        let radicand = b_c * b_c - ratio * ratio * b_t * b_t;
        let radicand = if radicand < 0.0 {
            warn!("transition radicand {radicand:e} clamped to 0 (t={t}, t_c={t_c})");
            0.0
        } else {
            radicand
        };
        (ratio, radicand.sqrt())
    }

    fn score_from_velocity(&self, u: ArrayView1<f64>, x_r: ArrayView1<f64>, r: f64) -> Result<Array1<f64>> {
        check_open_unit(r)?;
        check_shapes(u.len(), x_r.len())?;
        let (a, b) = self.coeffs(r);
        let (da, db) = self.rates(r);
        // u = -da/a * x - (da b^2 / a - db b) * s
        let denom = -da * b * b / a + db * b;
        Ok((&u + &(&x_r * (da / a))) / denom)
    }

    fn velocity_from_score(&self, s: ArrayView1<f64>, x_r: ArrayView1<f64>, r: f64) -> Result<Array1<f64>> {
        check_open_unit(r)?;
        check_shapes(s.len(), x_r.len())?;
        let (a, b) = self.coeffs(r);
        let (da, db) = self.rates(r);
        let denom = -da * b * b / a + db * b;
        Ok(&s * denom - &(&x_r * (da / a)))
    }
}

/// `x_t = (1 - t) x + t z`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Linear;

impl Interpolant for Linear {
    fn coeffs(&self, t: f64) -> (f64, f64) {
        (1.0 - t, t)
    }

    fn rates(&self, _t: f64) -> (f64, f64) {
        (-1.0, 1.0)
    }

    // Closed forms; the generic versions are equal up to rounding.
    fn score_from_velocity(&self, u: ArrayView1<f64>, x_r: ArrayView1<f64>, r: f64) -> Result<Array1<f64>> {
        check_open_unit(r)?;
        check_shapes(u.len(), x_r.len())?;
        Ok(&u * ((1.0 - r) / r) - &(&x_r * (1.0 / r)))
    }

    fn velocity_from_score(&self, s: ArrayView1<f64>, x_r: ArrayView1<f64>, r: f64) -> Result<Array1<f64>> {
        check_open_unit(r)?;
        check_shapes(s.len(), x_r.len())?;
        Ok(&s * (r / (1.0 - r)) + &(&x_r * (1.0 / (1.0 - r))))
    }
}

fn check_unit(name: &str, t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(domain_err!("{name}={t} outside [0, 1]"))
    }
}

fn check_open_unit(r: f64) -> Result<()> {
    if r > 0.0 && r < 1.0 {
        Ok(())
    } else {
        Err(domain_err!("r={r} must lie strictly inside (0, 1)"))
    }
}

fn check_shapes(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(domain_err!("shape mismatch: {a} vs {b}"))
    }
}

pub fn interpolate(x: ArrayView1<f64>, z: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
    Linear.interpolate(x, z, t)
}

pub fn cond_velocity(x: ArrayView1<f64>, z: ArrayView1<f64>) -> Result<Array1<f64>> {
    Linear.cond_velocity(x, z, 0.0)
}

pub fn transition(x_t: ArrayView1<f64>, n: ArrayView1<f64>, t: f64, t_c: f64) -> Result<Array1<f64>> {
    Linear.transition(x_t, n, t, t_c)
}

pub fn score_from_velocity(u: ArrayView1<f64>, x_r: ArrayView1<f64>, r: f64) -> Result<Array1<f64>> {
    Linear.score_from_velocity(u, x_r, r)
}

pub fn velocity_from_score(s: ArrayView1<f64>, x_r: ArrayView1<f64>, r: f64) -> Result<Array1<f64>> {
    Linear.velocity_from_score(s, x_r, r)
}

/// `n` i.i.d. draws from the standard normal prior in `d` dimensions.
pub fn prior_samples<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}

/// Row-wise `(1 - t_b) x_b + t_b z_b`.
pub fn interpolate_batch(x: ArrayView2<f64>, z: ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>> {
    if x.dim() != z.dim() || t.len() != x.nrows() {
        return Err(domain_err!("batch shape mismatch"));
    }
    if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(domain_err!("t={bad} outside [0, 1]"));
    }
    let mut out = Array2::zeros(x.dim());
    for (b, mut row) in out.outer_iter_mut().enumerate() {
        let tb = t[b];
        Zip::from(&mut row)
            .and(&x.row(b))
            .and(&z.row(b))
            .for_each(|o, &xv, &zv| *o = (1.0 - tb) * xv + tb * zv);
    }
    Ok(out)
}

/// Row-wise transition kernel from level `t_b` to `t_c` (identity on rows
/// with `t_c <= t_b`).
pub fn transition_batch(x_t: ArrayView2<f64>, n: ArrayView2<f64>, t: &[f64], t_c: f64) -> Result<Array2<f64>> {
    if x_t.dim() != n.dim() || t.len() != x_t.nrows() {
        return Err(domain_err!("batch shape mismatch"));
    }
    let mut out = x_t.to_owned();
    for (b, mut row) in out.outer_iter_mut().enumerate() {
        if t_c > t[b] {
            let (ratio, scale) = Linear.transition_coeffs(t[b], t_c);
            Zip::from(&mut row)
                .and(&n.row(b))
                .for_each(|o, &nv| *o = ratio * *o + scale * nv);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interpolate_boundaries_and_value() {
        let x = array![2.0, 0.0];
        let z = array![-2.0, 2.0];
        assert_eq!(interpolate(x.view(), z.view(), 0.0).unwrap(), x);
        assert_eq!(interpolate(x.view(), z.view(), 1.0).unwrap(), z);
        assert_eq!(interpolate(x.view(), z.view(), 0.25).unwrap(), array![1.0, 0.5]);
        assert!(interpolate(x.view(), z.view(), 1.5).is_err());
    }

    #[test]
    fn cond_velocity_values() {
        let x = array![1.0, 1.0];
        assert_eq!(cond_velocity(x.view(), x.view()).unwrap(), array![0.0, 0.0]);
        assert_eq!(cond_velocity(x.view(), array![0.0, -1.0].view()).unwrap(), array![1.0, 2.0]);
        assert!(cond_velocity(x.view(), array![0.0].view()).is_err());
    }

    #[test]
    fn cond_velocity_is_negative_time_derivative() {
        let x = array![0.7, -1.3];
        let z = array![-0.2, 0.9];
        let h = 1e-5;
        for &t in &[0.2, 0.5, 0.8] {
            let fd = (interpolate(x.view(), z.view(), t + h).unwrap() - interpolate(x.view(), z.view(), t - h).unwrap())
                / (2.0 * h);
            let u = cond_velocity(x.view(), z.view()).unwrap();
            for (a, b) in u.iter().zip(fd.iter()) {
                assert!((a + b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn transition_identity_and_reduction() {
        let x = array![1.0, -2.0];
        let n = array![0.5, 0.3];
        assert_eq!(transition(x.view(), n.view(), 0.4, 0.4).unwrap(), x);
        assert_eq!(transition(x.view(), n.view(), 0.6, 0.4).unwrap(), x);
        let out = transition(x.view(), n.view(), 0.0, 0.3).unwrap();
        let direct = interpolate(x.view(), n.view(), 0.3).unwrap();
        for (a, b) in out.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn transition_marginal_std() {
        // x = 0 so the transitioned interpolant is pure noise with std t_c.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = array![0.0, 0.0];
        let (t, t_c) = (0.3, 0.7);
        let draws = 100_000;
        let mut sq = [0.0; 2];
        for _ in 0..draws {
            let z: Array1<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let n: Array1<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let xt = interpolate(x.view(), z.view(), t).unwrap();
            let out = transition(xt.view(), n.view(), t, t_c).unwrap();
            sq[0] += out[0] * out[0];
            sq[1] += out[1] * out[1];
        }
        for s in sq {
            let std = (s / draws as f64).sqrt();
            assert!((std - t_c).abs() / t_c < 0.02, "std {std}");
        }
    }

    #[test]
    fn generic_score_velocity_matches_closed_form() {
        struct Generic;
        impl Interpolant for Generic {
            fn coeffs(&self, t: f64) -> (f64, f64) {
                Linear.coeffs(t)
            }
            fn rates(&self, t: f64) -> (f64, f64) {
                Linear.rates(t)
            }
        }
        let u = array![0.3, -1.2];
        let x = array![1.1, 0.4];
        for &r in &[0.05, 0.3, 0.5, 0.9] {
            let a = Generic.score_from_velocity(u.view(), x.view(), r).unwrap();
            let b = Linear.score_from_velocity(u.view(), x.view(), r).unwrap();
            for (p, q) in a.iter().zip(b.iter()) {
                assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
            }
        }
    }

    #[test]
    fn score_velocity_substitution_and_singular_r() {
        let s = score_from_velocity(array![1.0].view(), array![0.0].view(), 0.5).unwrap();
        assert_eq!(s, array![1.0]);
        assert!(score_from_velocity(array![1.0].view(), array![0.0].view(), 0.0).is_err());
        assert!(velocity_from_score(array![1.0].view(), array![0.0].view(), 1.0).is_err());
    }

    #[test]
    fn batch_helpers_match_scalar_versions() {
        let x = array![[1.0, 2.0], [-1.0, 0.5]];
        let z = array![[0.1, -0.3], [0.7, 0.2]];
        let t = [0.2, 0.6];
        let xb = interpolate_batch(x.view(), z.view(), &t).unwrap();
        for b in 0..2 {
            assert_eq!(xb.row(b), interpolate(x.row(b), z.row(b), t[b]).unwrap());
        }
        let tb = transition_batch(xb.view(), z.view(), &t, 0.5).unwrap();
        for b in 0..2 {
            let single = transition(xb.row(b), z.row(b), t[b], 0.5).unwrap();
            for (p, q) in tb.row(b).iter().zip(single.iter()) {
                assert!((p - q).abs() < 1e-15);
            }
        }
    }
}
