//! Energy models: closed-form exponential families used as analytic oracles
//! and a dense-network energy with exact parameter gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnlError};
use crate::nn::{self, Activation, MlpShape};
use crate::numeric::{sigmoid, softplus};
use crate::proposals::{Density, Proposal};
use crate::rng::SnlRng;

/// Points the model is defined on.
#[derive(Clone, Debug, PartialEq)]
pub enum Domain {
    Continuous { dim: usize },
    /// Finite domain that estimators may enumerate exhaustively.
    Discrete { points: Array2<f64> },
}

/// Tilting density `d(x)` multiplying `exp(-E(x))`. `None` means the
/// Lebesgue (or counting) measure.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BaseDistribution(Option<Proposal>);

impl BaseDistribution {
    pub fn none() -> Self {
        Self(None)
    }

    pub fn new(density: Proposal) -> Self {
        Self(Some(density))
    }

    pub fn density(&self) -> Option<&Proposal> {
        self.0.as_ref()
    }

    pub fn is_none(&self) -> bool {
        self.0.is_none()
    }

    pub fn kind(&self) -> &'static str {
        self.0.as_ref().map_or("none", |p| p.kind())
    }

    /// `log d(x)` per row; zeros without a base.
    pub fn log_densities(&self, xs: ArrayView2<f64>) -> Array1<f64> {
        match &self.0 {
            Some(d) => d.log_densities(xs),
            None => Array1::zeros(xs.nrows()),
        }
    }
}

/// Coefficients for a weighted pullback, computed from the batch energies.
pub type CoefficientFn<'a> = dyn FnMut(&Array1<f64>) -> Result<Array1<f64>> + 'a;

/// An energy `E_θ(x)` over a flat parameter vector `θ`.
pub trait EnergyModel: Send + Sync {
    fn domain(&self) -> Domain;

    fn dim(&self) -> usize {
        match self.domain() {
            Domain::Continuous { dim } => dim,
            Domain::Discrete { points } => points.ncols(),
        }
    }

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn base(&self) -> &BaseDistribution;

    /// `E_θ(x)` for every row of `xs`.
    fn energies(&self, xs: ArrayView2<f64>) -> Result<Array1<f64>>;

    /// `Σ_j c_j ∇_θ E_θ(x_j)`.
    fn weighted_param_gradient(&self, xs: ArrayView2<f64>, coeffs: ArrayView1<f64>) -> Result<Array1<f64>>;

    /// Energies of `xs` together with `Σ_j c_j ∇_θ E_θ(x_j)`, where the
    /// coefficients may depend on the energies. Networks override this to
    /// share one forward pass.
    fn energies_and_pullback(
        &self,
        xs: ArrayView2<f64>,
        coeffs: &mut CoefficientFn<'_>,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        let e = self.energies(xs)?;
        let c = coeffs(&e)?;
        let g = self.weighted_param_gradient(xs, c.view())?;
        Ok((e, g))
    }

    /// `log Z_θ` relative to the base measure, when known in closed form.
    fn exact_log_z(&self) -> Option<f64> {
        None
    }

    /// `∇_θ log Z_θ`, when known in closed form.
    fn exact_grad_log_z(&self) -> Option<Array1<f64>> {
        None
    }

    fn energy(&self, x: ArrayView1<f64>) -> Result<f64> {
        Ok(self.energies(x.insert_axis(Axis(0)))?[0])
    }

    /// `∇_θ E_θ(x)` for a single point.
    fn param_gradient(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.weighted_param_gradient(x.insert_axis(Axis(0)), ndarray::aview1(&[1.0]))
    }
}

fn check_points(expected: usize, xs: &ArrayView2<f64>) -> Result<()> {
    if xs.ncols() != expected {
        return Err(SnlError::DimensionMismatch {
            expected,
            got: xs.ncols(),
            context: "point dimension",
        });
    }
    Ok(())
}

fn check_coeffs(xs: &ArrayView2<f64>, coeffs: &ArrayView1<f64>) -> Result<()> {
    if xs.nrows() != coeffs.len() {
        return Err(SnlError::DimensionMismatch {
            expected: xs.nrows(),
            got: coeffs.len(),
            context: "pullback coefficients",
        });
    }
    Ok(())
}

/// Exact mean log-likelihood `mean(-E(x_i)) - log Z_θ`, relative to the
/// base measure.
pub fn exact_log_likelihood(model: &dyn EnergyModel, data: ArrayView2<f64>) -> Result<f64> {
    let log_z = model
        .exact_log_z()
        .ok_or_else(|| SnlError::Unsupported("model has no closed-form normaliser".into()))?;
    if data.nrows() == 0 {
        return Err(SnlError::EmptyBatch("data batch"));
    }
    let e = model.energies(data)?;
    Ok(-e.mean().unwrap() - log_z)
}

/// Unit-variance Gaussian with unknown mean: `E_θ(x) = -θx` against the
/// standard Gaussian base, so `log Z_θ = θ²/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMeanModel {
    theta: [f64; 1],
    base: BaseDistribution,
}

impl GaussianMeanModel {
    pub fn new(theta: f64) -> Self {
        Self {
            theta: [theta],
            base: BaseDistribution::new(Proposal::StandardGaussian { dim: 1 }),
        }
    }

    pub fn theta(&self) -> f64 {
        self.theta[0]
    }
}

impl EnergyModel for GaussianMeanModel {
    fn domain(&self) -> Domain {
        Domain::Continuous { dim: 1 }
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn base(&self) -> &BaseDistribution {
        &self.base
    }

    fn energies(&self, xs: ArrayView2<f64>) -> Result<Array1<f64>> {
        check_points(1, &xs)?;
        Ok(xs.column(0).mapv(|x| -self.theta[0] * x))
    }

    fn weighted_param_gradient(&self, xs: ArrayView2<f64>, coeffs: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_points(1, &xs)?;
        check_coeffs(&xs, &coeffs)?;
        Ok(Array1::from_elem(1, -xs.column(0).dot(&coeffs)))
    }

    fn exact_log_z(&self) -> Option<f64> {
        Some(0.5 * self.theta[0] * self.theta[0])
    }

    fn exact_grad_log_z(&self) -> Option<Array1<f64>> {
        Some(Array1::from_elem(1, self.theta[0]))
    }
}

/// Bernoulli with logit `θ`: `E_θ(x) = -θx` on `{0, 1}` with the counting
/// measure, so `log Z_θ = log(1 + e^θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BernoulliModel {
    theta: [f64; 1],
    base: BaseDistribution,
}

impl BernoulliModel {
    pub fn new(theta: f64) -> Self {
        Self {
            theta: [theta],
            base: BaseDistribution::none(),
        }
    }

    pub fn theta(&self) -> f64 {
        self.theta[0]
    }

    fn check_binary(xs: &ArrayView2<f64>) -> Result<()> {
        check_points(1, xs)?;
        if let Some(v) = xs.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(SnlError::Domain(format!("bernoulli point {v} is not in {{0, 1}}")));
        }
        Ok(())
    }
}

impl EnergyModel for BernoulliModel {
    fn domain(&self) -> Domain {
        Domain::Discrete {
            points: ndarray::array![[0.0], [1.0]],
        }
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn base(&self) -> &BaseDistribution {
        &self.base
    }

    fn energies(&self, xs: ArrayView2<f64>) -> Result<Array1<f64>> {
        Self::check_binary(&xs)?;
        Ok(xs.column(0).mapv(|x| -self.theta[0] * x))
    }

    fn weighted_param_gradient(&self, xs: ArrayView2<f64>, coeffs: ArrayView1<f64>) -> Result<Array1<f64>> {
        Self::check_binary(&xs)?;
        check_coeffs(&xs, &coeffs)?;
        Ok(Array1::from_elem(1, -xs.column(0).dot(&coeffs)))
    }

    fn exact_log_z(&self) -> Option<f64> {
        Some(softplus(self.theta[0]))
    }

    fn exact_grad_log_z(&self) -> Option<Array1<f64>> {
        Some(Array1::from_elem(1, sigmoid(self.theta[0])))
    }
}

/// Architecture of the 2-D density energy: 2 → 200 → 100 → 50 → 50 → 1, ReLU.
pub fn density_architecture() -> MlpShape {
    MlpShape::new(vec![2, 200, 100, 50, 50, 1], Activation::Relu).expect("static widths")
}

/// Energy given by a dense network with scalar output, optionally tilted by
/// a base distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpEnergy {
    shape: MlpShape,
    params: Vec<f64>,
    base: BaseDistribution,
}

impl MlpEnergy {
    pub fn new(shape: MlpShape, base: BaseDistribution, rng: &mut SnlRng) -> Result<Self> {
        let params = shape.init(rng);
        Self::from_params(shape, params, base)
    }

    pub fn from_params(shape: MlpShape, params: Vec<f64>, base: BaseDistribution) -> Result<Self> {
        if shape.output_dim() != 1 {
            return Err(SnlError::InvalidConfig("energy network must have one output".into()));
        }
        if params.len() != shape.num_params() {
            return Err(SnlError::DimensionMismatch {
                expected: shape.num_params(),
                got: params.len(),
                context: "network parameters",
            });
        }
        if let Some(d) = base.density() {
            if d.dim() != shape.input_dim() {
                return Err(SnlError::DimensionMismatch {
                    expected: shape.input_dim(),
                    got: d.dim(),
                    context: "base distribution dimension",
                });
            }
        }
        Ok(Self { shape, params, base })
    }

    pub fn zeros(shape: MlpShape, base: BaseDistribution) -> Result<Self> {
        let n = shape.num_params();
        Self::from_params(shape, vec![0.0; n], base)
    }

    pub fn shape(&self) -> &MlpShape {
        &self.shape
    }
}

impl EnergyModel for MlpEnergy {
    fn domain(&self) -> Domain {
        Domain::Continuous {
            dim: self.shape.input_dim(),
        }
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn base(&self) -> &BaseDistribution {
        &self.base
    }

    fn energies(&self, xs: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(nn::single_column(self.shape.forward(&self.params, xs)?))
    }

    fn weighted_param_gradient(&self, xs: ArrayView2<f64>, coeffs: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_coeffs(&xs, &coeffs)?;
        let trace = self.shape.forward_trace(&self.params, xs)?;
        let mut grad = vec![0.0; self.params.len()];
        let upstream = coeffs.insert_axis(Axis(1));
        self.shape.backward(&self.params, &trace, upstream, &mut grad, false);
        Ok(Array1::from(grad))
    }

    fn energies_and_pullback(
        &self,
        xs: ArrayView2<f64>,
        coeffs: &mut CoefficientFn<'_>,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        let trace = self.shape.forward_trace(&self.params, xs)?;
        let e = trace.output().column(0).to_owned();
        let c = coeffs(&e)?;
        check_coeffs(&xs, &c.view())?;
        let mut grad = vec![0.0; self.params.len()];
        let upstream = c.view().insert_axis(Axis(1));
        self.shape.backward(&self.params, &trace, upstream, &mut grad, false);
        Ok((e, Array1::from(grad)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::array;

    #[test]
    fn gaussian_energy_and_gradient() {
        let m = GaussianMeanModel::new(2.0);
        assert_eq!(m.energy(array![3.0].view()).unwrap(), -6.0);
        assert_eq!(m.param_gradient(array![3.0].view()).unwrap(), array![-3.0]);
        assert_eq!(m.exact_log_z(), Some(2.0));
    }

    #[test]
    fn bernoulli_energy_and_domain() {
        let m = BernoulliModel::new(3f64.ln());
        assert!((m.energy(array![1.0].view()).unwrap() + 3f64.ln()).abs() < 1e-15);
        assert!(matches!(m.energy(array![0.5].view()), Err(SnlError::Domain(_))));
        assert!((m.exact_log_z().unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = GaussianMeanModel::new(0.0);
        assert!(matches!(
            m.energies(array![[1.0, 2.0]].view()),
            Err(SnlError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn exact_log_likelihood_examples() {
        let data = array![[1.0], [3.0]];
        let ll = exact_log_likelihood(&GaussianMeanModel::new(2.0), data.view()).unwrap();
        assert!((ll - 2.0).abs() < 1e-15);
        assert_eq!(exact_log_likelihood(&GaussianMeanModel::new(0.0), data.view()).unwrap(), 0.0);
        let bern = array![[0.0], [1.0], [1.0]];
        let ll = exact_log_likelihood(&BernoulliModel::new(0.0), bern.view()).unwrap();
        assert!((ll + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mlp_has_no_closed_form_likelihood() {
        let m = MlpEnergy::zeros(density_architecture(), BaseDistribution::none()).unwrap();
        assert!(matches!(
            exact_log_likelihood(&m, array![[0.0, 0.0]].view()),
            Err(SnlError::Unsupported(_))
        ));
    }

    #[test]
    fn zero_network_energy_and_gradient() {
        let m = MlpEnergy::zeros(density_architecture(), BaseDistribution::none()).unwrap();
        assert_eq!(m.energy(array![1.5, -2.0].view()).unwrap(), 0.0);
        let g = m.param_gradient(array![0.0, 0.0].view()).unwrap();
        let bias = m.shape().output_bias_index();
        for (i, v) in g.iter().enumerate() {
            assert_eq!(*v, if i == bias { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn mlp_param_gradient_matches_finite_differences() {
        let shape = MlpShape::new(vec![2, 16, 8, 1], Activation::Relu).unwrap();
        let mut rng = stream(4, 0);
        let m = MlpEnergy::new(shape, BaseDistribution::none(), &mut rng).unwrap();
        let x = array![0.7, -0.4];
        let g = m.param_gradient(x.view()).unwrap();
        let h = 1e-6;
        for i in 0..m.num_params() {
            let mut p = m.clone();
            p.params_mut()[i] += h;
            let up = p.energy(x.view()).unwrap();
            p.params_mut()[i] -= 2.0 * h;
            let down = p.energy(x.view()).unwrap();
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
            assert!(rel < 1e-6, "coordinate {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn pullback_matches_weighted_gradient() {
        let shape = MlpShape::new(vec![2, 5, 1], Activation::Tanh).unwrap();
        let mut rng = stream(8, 0);
        let m = MlpEnergy::new(shape, BaseDistribution::none(), &mut rng).unwrap();
        let xs = array![[0.1, 0.2], [-1.0, 0.5], [2.0, -0.3]];
        let (e, g) = m
            .energies_and_pullback(xs.view(), &mut |e: &Array1<f64>| Ok(e.mapv(f64::exp)))
            .unwrap();
        let direct = m.weighted_param_gradient(xs.view(), e.mapv(f64::exp).view()).unwrap();
        assert_eq!(g, direct);
    }

    #[test]
    fn flat_parameters_round_trip() {
        let mut rng = stream(1, 0);
        let m = MlpEnergy::new(density_architecture(), BaseDistribution::none(), &mut rng).unwrap();
        let again = MlpEnergy::from_params(m.shape().clone(), m.params().to_vec(), BaseDistribution::none()).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn base_dimension_must_match() {
        let base = BaseDistribution::new(Proposal::StandardGaussian { dim: 3 });
        assert!(MlpEnergy::zeros(density_architecture(), base).is_err());
    }
}
