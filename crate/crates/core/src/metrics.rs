//! Sample-based distribution distances and rank statistics.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Gmm;
use crate::error::{config_err, domain_err, Result};

pub const MIN_PROJECTIONS: usize = 64;

/// Squared 2-Wasserstein distance between two 1D empirical measures with
/// uniform weights, by walking the merged quantile functions.
pub fn wasserstein2_sq_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(domain_err!("empty sample set"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        return Ok(s / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = 0.0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i + 1) as f64 / na;
        let next_b = (j + 1) as f64 / nb;
        let next = next_a.min(next_b);
        let d = a[i] - b[j];
        total += (next - prev) * d * d;
        prev = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(total)
}

/// Monte-Carlo sliced 2-Wasserstein distance: the square root of the mean
/// squared 1D distance over random unit directions.
pub fn sliced_wasserstein<R: Rng + ?Sized>(a: ArrayView2<f64>, b: ArrayView2<f64>, n_projections: usize, rng: &mut R) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(domain_err!("empty sample set"));
    }
    if a.ncols() != b.ncols() {
        return Err(domain_err!("dimension mismatch: {} vs {}", a.ncols(), b.ncols()));
    }
    if n_projections < MIN_PROJECTIONS {
        return Err(config_err!("need at least {MIN_PROJECTIONS} projections, got {n_projections}"));
    }
    let d = a.ncols();
    let mut total = 0.0;
    for _ in 0..n_projections {
        let mut dir: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = dir.dot(&dir).sqrt();
        dir /= norm;
        let pa = a.dot(&dir);
        let pb = b.dot(&dir);
        total += wasserstein2_sq_1d(pa.as_slice().expect("contiguous"), pb.as_slice().expect("contiguous"))?;
    }
    Ok((total / n_projections as f64).sqrt())
}

/// Unbiased estimate of the squared maximum mean discrepancy under the
/// Gaussian kernel `exp(-|x - y|^2 / (2 h^2))`.
pub fn mmd_rbf(a: ArrayView2<f64>, b: ArrayView2<f64>, bandwidth: f64) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(domain_err!("need at least two samples per set"));
    }
    if a.ncols() != b.ncols() {
        return Err(domain_err!("dimension mismatch"));
    }
    if !(bandwidth > 0.0) {
        return Err(config_err!("bandwidth must be positive"));
    }
    let k = |x: ArrayView1<f64>, y: ArrayView1<f64>| {
        let d2: f64 = x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
        (-d2 / (2.0 * bandwidth * bandwidth)).exp()
    };
    let within = |s: ArrayView2<f64>| {
        let n = s.nrows();
        let mut acc = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += k(s.row(i), s.row(j));
            }
        }
        2.0 * acc / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a.outer_iter() {
        for y in b.outer_iter() {
            cross += k(x, y);
        }
    }
    cross /= (a.nrows() * b.nrows()) as f64;
    Ok(within(a) + within(b) - 2.0 * cross)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeCoverage {
    /// Fraction of components holding at least half their uniform share.
    pub coverage: f64,
    pub per_mode_mass: Vec<f64>,
}

impl ModeCoverage {
    pub fn covered(&self) -> usize {
        let k = self.per_mode_mass.len() as f64;
        self.per_mode_mass.iter().filter(|&&m| m >= 0.5 / k).count()
    }

    pub fn min_mass(&self) -> f64 {
        self.per_mode_mass.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Nearest-mean assignment of samples to mixture components.
pub fn mode_coverage(samples: ArrayView2<f64>, gmm: &Gmm) -> Result<ModeCoverage> {
    if samples.nrows() == 0 {
        return Err(domain_err!("empty sample set"));
    }
    let k = gmm.len();
    let mut counts = vec![0usize; k];
    for row in samples.outer_iter() {
        counts[gmm.nearest_component(row)] += 1;
    }
    let n = samples.nrows() as f64;
    let per_mode_mass: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let report = ModeCoverage {
        coverage: 0.0,
        per_mode_mass,
    };
    Ok(ModeCoverage {
        coverage: report.covered() as f64 / k as f64,
        ..report
    })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `NaN` when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(domain_err!("need two equal-length series of at least two points"));
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset2D, DatasetConfig};
    use crate::net::Label;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_sets_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((50, 2), |_| rng.gen::<f64>());
        assert_eq!(sliced_wasserstein(a.view(), a.view(), 64, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn diracs_in_one_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Array2::from_elem((10, 1), 0.5);
        let b = Array2::from_elem((7, 1), 3.0);
        let sw = sliced_wasserstein(a.view(), b.view(), 64, &mut rng).unwrap();
        assert!((sw - 2.5).abs() < 1e-12);
    }

    #[test]
    fn unequal_sizes_match_replication() {
        let a = [0.0, 1.0, 4.0];
        let b = [2.0, -1.0];
        let rep_a: Vec<f64> = a.iter().flat_map(|&v| [v, v]).collect();
        let rep_b: Vec<f64> = b.iter().flat_map(|&v| [v, v, v]).collect();
        let direct = wasserstein2_sq_1d(&a, &b).unwrap();
        let replicated = wasserstein2_sq_1d(&rep_a, &rep_b).unwrap();
        assert!((direct - replicated).abs() < 1e-12);
    }

    #[test]
    fn rejects_empty_and_few_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array2::<f64>::zeros((0, 2));
        let b = Array2::<f64>::zeros((3, 2));
        assert!(sliced_wasserstein(a.view(), b.view(), 64, &mut rng).is_err());
        assert!(sliced_wasserstein(b.view(), b.view(), 8, &mut rng).is_err());
    }

    #[test]
    fn exact_samples_cover_all_modes() {
        let ds = Dataset2D::from_config(&DatasetConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, _) = ds.sample(Label::Null, 4000, &mut rng).unwrap();
        let cov = mode_coverage(x.view(), ds.as_gmm().unwrap()).unwrap();
        assert_eq!(cov.coverage, 1.0);
    }

    #[test]
    fn single_cluster_covers_one_mode() {
        let ds = Dataset2D::from_config(&DatasetConfig::default()).unwrap();
        let g = ds.as_gmm().unwrap();
        let x = Array2::from_shape_fn((100, 2), |(_, j)| g.means[2][j]);
        let cov = mode_coverage(x.view(), g).unwrap();
        assert_eq!(cov.coverage, 0.125);
        assert_eq!(cov.per_mode_mass[2], 1.0);
    }

    #[test]
    fn mmd_is_near_zero_for_same_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array2::from_shape_fn((300, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let b = Array2::from_shape_fn((300, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let c = b.mapv(|v| v + 1.0);
        let same = mmd_rbf(a.view(), b.view(), 1.0).unwrap();
        let shifted = mmd_rbf(a.view(), c.view(), 1.0).unwrap();
        assert!(same.abs() < 0.01, "{same}");
        assert!(shifted > 0.1, "{shifted}");
    }

    #[test]
    fn spearman_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }
}
