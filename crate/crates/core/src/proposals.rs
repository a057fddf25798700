//! Sampleable densities with exact log-densities, used as importance
//! proposals and as tilting base distributions.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnlError};
use crate::objectives::ImportanceBatch;
use crate::rng::SnlRng;

/// A normalised density over `R^dim` (or a finite subset of it).
pub trait Density: Send + Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, x: ArrayView1<f64>) -> f64;

    fn log_densities(&self, xs: ArrayView2<f64>) -> Array1<f64> {
        xs.rows().into_iter().map(|r| self.log_density(r)).collect()
    }

    /// `n` i.i.d. draws, one per row.
    fn sample(&self, rng: &mut SnlRng, n: usize) -> Array2<f64>;
}

/// Draw `m` samples and score them under `proposal`.
pub fn sample_and_score(proposal: &dyn Density, rng: &mut SnlRng, m: usize) -> Result<ImportanceBatch> {
    if m == 0 {
        return Err(SnlError::EmptyBatch("proposal sample count must be positive"));
    }
    let samples = proposal.sample(rng, m);
    let log_q = proposal.log_densities(samples.view());
    ImportanceBatch::new(samples, log_q)
}

/// Multivariate Gaussian with a cached Cholesky factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianParams", into = "GaussianParams")]
pub struct GaussianProposal {
    mean: Array1<f64>,
    covariance: Array2<f64>,
    chol: Array2<f64>,
    /// Inverse of the lower Cholesky factor.
    whitening: Array2<f64>,
    log_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GaussianParams {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

impl TryFrom<GaussianParams> for GaussianProposal {
    type Error = SnlError;

    fn try_from(p: GaussianParams) -> Result<Self> {
        let d = p.mean.len();
        if p.covariance.len() != d || p.covariance.iter().any(|r| r.len() != d) {
            return Err(SnlError::DimensionMismatch {
                expected: d,
                got: p.covariance.len(),
                context: "gaussian covariance",
            });
        }
        let cov = Array2::from_shape_fn((d, d), |(i, j)| p.covariance[i][j]);
        GaussianProposal::new(Array1::from(p.mean), cov)
    }
}

impl From<GaussianProposal> for GaussianParams {
    fn from(g: GaussianProposal) -> Self {
        GaussianParams {
            mean: g.mean.to_vec(),
            covariance: g.covariance.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

impl GaussianProposal {
    pub fn new(mean: Array1<f64>, covariance: Array2<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || covariance.dim() != (d, d) {
            return Err(SnlError::DimensionMismatch {
                expected: d,
                got: covariance.nrows(),
                context: "gaussian covariance",
            });
        }
        let cov = DMatrix::from_fn(d, d, |i, j| 0.5 * (covariance[[i, j]] + covariance[[j, i]]));
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| SnlError::DegenerateData("covariance is not positive definite".into()))?;
        let l = chol.l();
        let l_inv = l
            .clone()
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| SnlError::DegenerateData("singular Cholesky factor".into()))?;
        let log_det: f64 = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(SnlError::DegenerateData("covariance determinant is not finite".into()));
        }
        Ok(Self {
            mean,
            covariance: Array2::from_shape_fn((d, d), |(i, j)| cov[(i, j)]),
            chol: Array2::from_shape_fn((d, d), |(i, j)| l[(i, j)]),
            whitening: Array2::from_shape_fn((d, d), |(i, j)| l_inv[(i, j)]),
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        })
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(Array1::zeros(dim), Array2::eye(dim)).expect("identity covariance")
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &Array2<f64> {
        &self.covariance
    }
}

/// Fit a Gaussian to `data` (one point per row): sample mean and unbiased
/// sample covariance, regularised by `1e-6 · trace / d` on the diagonal.
pub fn fit_gaussian(data: ArrayView2<f64>) -> Result<GaussianProposal> {
    let (n, d) = data.dim();
    if d == 0 || n < d + 1 {
        return Err(SnlError::DegenerateData(format!(
            "need at least d+1 = {} points to fit a {d}-dimensional gaussian, got {n}",
            d + 1
        )));
    }
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let centered = &data - &mean;
    let mut cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let trace: f64 = cov.diag().sum();
    if !(trace > 0.0) {
        return Err(SnlError::DegenerateData("all points are identical".into()));
    }
    let eps = 1e-6 * trace / d as f64;
    for i in 0..d {
        cov[[i, i]] += eps;
    }
    GaussianProposal::new(mean, cov)
}

impl Density for GaussianProposal {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let z = self.whitening.dot(&(&x - &self.mean));
        self.log_norm - 0.5 * z.dot(&z)
    }

    fn log_densities(&self, xs: ArrayView2<f64>) -> Array1<f64> {
        let z = (&xs - &self.mean).dot(&self.whitening.t());
        z.map_axis(Axis(1), |r| self.log_norm - 0.5 * r.dot(&r))
    }

    fn sample(&self, rng: &mut SnlRng, n: usize) -> Array2<f64> {
        let d = self.dim();
        let z = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
        z.dot(&self.chol.t()) + &self.mean
    }
}

/// Uniform density on an axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformBoxProposal {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl UniformBoxProposal {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(SnlError::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
                context: "uniform box bounds",
            });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(SnlError::InvalidConfig("uniform box needs finite lower < upper".into()));
        }
        Ok(Self { lower, upper })
    }

    /// Bounds from the per-dimension data range, widened by 10% of the range
    /// on each side.
    pub fn from_data(data: ArrayView2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(SnlError::EmptyBatch("uniform box needs data"));
        }
        let mut lower = Vec::with_capacity(data.ncols());
        let mut upper = Vec::with_capacity(data.ncols());
        for col in data.columns() {
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pad = 0.1 * (hi - lo);
            lower.push(lo - pad);
            upper.push(hi + pad);
        }
        Self::new(lower, upper)
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn log_volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| (u - l).ln()).sum()
    }
}

impl Density for UniformBoxProposal {
    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let inside = x
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *v >= *l && *v <= *u);
        if inside {
            -self.log_volume()
        } else {
            f64::NEG_INFINITY
        }
    }

    fn sample(&self, rng: &mut SnlRng, n: usize) -> Array2<f64> {
        let d = self.dim();
        Array2::from_shape_fn((n, d), |(_, j)| rng.random_range(self.lower[j]..self.upper[j]))
    }
}

/// Uniform distribution on `{0, 1}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TwoPointUniform;

impl Density for TwoPointUniform {
    fn dim(&self) -> usize {
        1
    }

    fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        if x[0] == 0.0 || x[0] == 1.0 {
            -std::f64::consts::LN_2
        } else {
            f64::NEG_INFINITY
        }
    }

    fn sample(&self, rng: &mut SnlRng, n: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, 1), || if rng.random::<bool>() { 1.0 } else { 0.0 })
    }
}

/// Unconditional proposal kinds, serialisable into configs and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Proposal {
    StandardGaussian { dim: usize },
    FittedGaussian { gaussian: GaussianProposal },
    UniformBox { bounds: UniformBoxProposal },
    TwoPointUniform,
}

impl Proposal {
    pub fn kind(&self) -> &'static str {
        match self {
            Proposal::StandardGaussian { .. } => "standard_gaussian",
            Proposal::FittedGaussian { .. } => "fitted_gaussian",
            Proposal::UniformBox { .. } => "uniform_box",
            Proposal::TwoPointUniform => "two_point_uniform",
        }
    }

    /// Build a proposal of the named kind, fitting data-dependent kinds to `data`.
    pub fn from_kind(kind: &str, data: ArrayView2<f64>) -> Result<Self> {
        Ok(match kind {
            "standard_gaussian" => Proposal::StandardGaussian { dim: data.ncols() },
            "fitted_gaussian" => Proposal::FittedGaussian {
                gaussian: fit_gaussian(data)?,
            },
            "uniform_box" => Proposal::UniformBox {
                bounds: UniformBoxProposal::from_data(data)?,
            },
            "two_point_uniform" => Proposal::TwoPointUniform,
            other => {
                return Err(SnlError::UnknownName {
                    kind: "proposal",
                    name: other.to_string(),
                })
            }
        })
    }

    fn with_density<T>(&self, f: impl FnOnce(&dyn Density) -> T) -> T {
        match self {
            Proposal::StandardGaussian { dim } => f(&GaussianProposal::standard(*dim)),
            Proposal::FittedGaussian { gaussian } => f(gaussian),
            Proposal::UniformBox { bounds } => f(bounds),
            Proposal::TwoPointUniform => f(&TwoPointUniform),
        }
    }
}

impl Density for Proposal {
    fn dim(&self) -> usize {
        self.with_density(|d| d.dim())
    }

    fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        match self {
            Proposal::StandardGaussian { .. } => {
                -0.5 * (x.len() as f64 * (2.0 * PI).ln() + x.dot(&x))
            }
            _ => self.with_density(|d| d.log_density(x)),
        }
    }

    fn log_densities(&self, xs: ArrayView2<f64>) -> Array1<f64> {
        match self {
            Proposal::StandardGaussian { dim } => {
                let c = -0.5 * *dim as f64 * (2.0 * PI).ln();
                xs.map_axis(Axis(1), |r| c - 0.5 * r.dot(&r))
            }
            _ => self.with_density(|d| d.log_densities(xs)),
        }
    }

    fn sample(&self, rng: &mut SnlRng, n: usize) -> Array2<f64> {
        match self {
            Proposal::StandardGaussian { dim } => {
                Array2::from_shape_simple_fn((n, *dim), || rng.sample::<f64, _>(StandardNormal))
            }
            _ => self.with_density(|d| d.sample(rng, n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::array;

    #[test]
    fn identical_points_cannot_be_fitted() {
        let data = Array2::from_elem((10, 2), 3.0);
        assert!(matches!(fit_gaussian(data.view()), Err(SnlError::DegenerateData(_))));
    }

    #[test]
    fn too_few_points_rejected() {
        let data = array![[0.0, 1.0], [1.0, 0.0]];
        assert!(fit_gaussian(data.view()).is_err());
    }

    #[test]
    fn fit_two_points_uses_unbiased_variance() {
        let g = fit_gaussian(array![[-1.0], [1.0]].view()).unwrap();
        assert_eq!(g.mean()[0], 0.0);
        // variance 2 plus eps = 1e-6 * 2
        assert!((g.covariance()[[0, 0]] - (2.0 + 2e-6)).abs() < 1e-15);
    }

    #[test]
    fn fit_standard_normal_sample() {
        let p = Proposal::StandardGaussian { dim: 2 };
        let mut rng = stream(3, 0);
        let data = p.sample(&mut rng, 100_000);
        let g = fit_gaussian(data.view()).unwrap();
        for i in 0..2 {
            assert!(g.mean()[i].abs() < 0.02);
            for j in 0..2 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((g.covariance()[[i, j]] - target).abs() < 0.02);
            }
        }
    }

    #[test]
    fn gaussian_log_density_matches_closed_form() {
        let g = GaussianProposal::new(array![1.0, -1.0], array![[2.0, 0.5], [0.5, 1.0]]).unwrap();
        let x = array![0.3, 0.2];
        // direct formula with explicit inverse
        let det = 2.0 * 1.0 - 0.25;
        let inv = array![[1.0, -0.5], [-0.5, 2.0]] / det;
        let dx = &x - g.mean();
        let quad = dx.dot(&inv.dot(&dx));
        let expected = -0.5 * (2.0 * (2.0 * PI).ln() + f64::ln(det) + quad);
        assert!((g.log_density(x.view()) - expected).abs() < 1e-12);
        let batch = g.log_densities(x.view().insert_axis(Axis(0)));
        assert!((batch[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_box_samples_inside_with_constant_density() {
        let b = UniformBoxProposal::new(vec![-4.0, -4.0], vec![4.0, 4.0]).unwrap();
        let mut rng = stream(5, 0);
        let batch = sample_and_score(&b, &mut rng, 1000).unwrap();
        for (row, lq) in batch.samples().rows().into_iter().zip(batch.proposal_log_densities()) {
            assert!(row.iter().all(|v| (-4.0..=4.0).contains(v)));
            assert!((lq + 64f64.ln()).abs() < 1e-12);
        }
        assert_eq!(b.log_density(array![5.0, 0.0].view()), f64::NEG_INFINITY);
    }

    #[test]
    fn uniform_box_from_data_widens_range() {
        let b = UniformBoxProposal::from_data(array![[0.0], [10.0]].view()).unwrap();
        assert_eq!(b.lower(), &[-1.0]);
        assert_eq!(b.upper(), &[11.0]);
    }

    #[test]
    fn fitted_gaussian_sample_mean_within_clt_bound() {
        let g = GaussianProposal::new(array![2.0, -3.0], array![[4.0, 1.0], [1.0, 1.0]]).unwrap();
        let mut rng = stream(9, 0);
        let m = 20_000;
        let s = g.sample(&mut rng, m);
        let mean = s.mean_axis(Axis(0)).unwrap();
        for i in 0..2 {
            let sd = g.covariance()[[i, i]].sqrt();
            assert!((mean[i] - g.mean()[i]).abs() < 4.0 * sd / (m as f64).sqrt());
        }
    }

    #[test]
    fn densities_integrate_to_one() {
        // 2-D trapezoid over a wide grid
        let g = GaussianProposal::new(array![0.5, -0.5], array![[1.5, 0.3], [0.3, 0.8]]).unwrap();
        let n = 401;
        let (lo, hi) = (-10.0, 10.0);
        let h = (hi - lo) / (n - 1) as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = array![lo + i as f64 * h, lo + j as f64 * h];
                let wi = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                total += wi * wj * g.log_density(x.view()).exp();
            }
        }
        assert!((total * h * h - 1.0).abs() < 1e-3);
    }

    #[test]
    fn gaussian_samples_pass_chi_square() {
        // 1-D standard normal, 10 equiprobable-ish bins
        let p = Proposal::StandardGaussian { dim: 1 };
        let mut rng = stream(21, 0);
        let n = 100_000;
        let s = p.sample(&mut rng, n);
        let edges = [-f64::INFINITY, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, f64::INFINITY];
        let cdf = |x: f64| {
            if x.is_infinite() {
                if x > 0.0 { 1.0 } else { 0.0 }
            } else {
                // trapezoid integration of the density from -12
                let m = 20_000;
                let h = (x + 12.0) / m as f64;
                let f = |t: f64| (-0.5 * t * t).exp() / (2.0 * PI).sqrt();
                (0..=m)
                    .map(|k| {
                        let w = if k == 0 || k == m { 0.5 } else { 1.0 };
                        w * f(-12.0 + k as f64 * h)
                    })
                    .sum::<f64>()
                    * h
            }
        };
        let mut chi2 = 0.0;
        for w in edges.windows(2) {
            let count = s.iter().filter(|&&v| v >= w[0] && v < w[1]).count() as f64;
            let expected = n as f64 * (cdf(w[1]) - cdf(w[0]));
            chi2 += (count - expected).powi(2) / expected;
        }
        // 9 degrees of freedom, 0.999 quantile
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn proposal_kinds_are_named() {
        let p = Proposal::from_kind("uniform_box", array![[0.0, 1.0], [1.0, 3.0]].view()).unwrap();
        assert_eq!(p.kind(), "uniform_box");
        assert!(Proposal::from_kind("flow", array![[0.0]].view()).is_err());
    }
}
