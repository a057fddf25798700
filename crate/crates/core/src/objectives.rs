//! The self-normalised log-likelihood, its importance-sampled gradients,
//! the importance-sampling upper bound and the NCE baseline loss.
//!
//! With data `x_1..x_n`, proposal samples `x_m ~ q` and importance weights
//! `w_m = exp(-E(x_m)) d(x_m) / q(x_m)`:
//!
//! ```text
//! ℓ_SNL(θ, b) = mean_i(-E(x_i)) - b - e^{-b} Ẑ + 1,   Ẑ = mean_m(w_m)
//! ℓ_IS(θ)     = mean_i(-E(x_i)) - log Ẑ
//! ```
//!
//! `ℓ_SNL` is linear in `Ẑ`, so its gradient estimates are unbiased; for
//! every `b`, `ℓ_SNL ≤ ℓ`, with equality at `b = log Z`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use crate::error::{ObjectiveTerm, Result, SnlError};
use crate::models::EnergyModel;
use crate::numeric::{log_mean_exp, log_sigmoid, sample_std, sigmoid};
use crate::proposals::Density;

/// Proposal samples with their exact proposal log-densities.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceBatch {
    samples: Array2<f64>,
    proposal_log_densities: Array1<f64>,
}

impl ImportanceBatch {
    pub fn new(samples: Array2<f64>, proposal_log_densities: Array1<f64>) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(SnlError::EmptyBatch("importance batch"));
        }
        if samples.nrows() != proposal_log_densities.len() {
            return Err(SnlError::DimensionMismatch {
                expected: samples.nrows(),
                got: proposal_log_densities.len(),
                context: "proposal log-densities",
            });
        }
        if let Some(i) = proposal_log_densities.iter().position(|v| !v.is_finite()) {
            return Err(SnlError::Domain(format!(
                "proposal log-density at sample {i} is not finite"
            )));
        }
        Ok(Self {
            samples,
            proposal_log_densities,
        })
    }

    /// Every point of a finite domain exactly once, scored under `proposal`.
    /// With a uniform proposal the weight mean is then the exact normaliser.
    pub fn enumerate(points: Array2<f64>, proposal: &dyn Density) -> Result<Self> {
        let log_q = proposal.log_densities(points.view());
        Self::new(points, log_q)
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn proposal_log_densities(&self) -> &Array1<f64> {
        &self.proposal_log_densities
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }
}

/// Monte Carlo estimate of `Z_θ` kept in log space.
#[derive(Clone, Debug, PartialEq)]
pub struct ZEstimate {
    pub log_weights: Array1<f64>,
    pub log_mean_weight: f64,
    pub mean_weight: f64,
    pub standard_error: f64,
    pub count: usize,
}

impl ZEstimate {
    pub fn from_log_weights(log_weights: Array1<f64>) -> Result<Self> {
        let count = log_weights.len();
        if count == 0 {
            return Err(SnlError::EmptyBatch("importance weights"));
        }
        let lw = log_weights.as_slice().expect("contiguous");
        let log_mean_weight = log_mean_exp(lw);
        let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let standard_error = if max == f64::NEG_INFINITY {
            0.0
        } else {
            let scaled: Vec<f64> = lw.iter().map(|v| (v - max).exp()).collect();
            max.exp() * sample_std(&scaled) / (count as f64).sqrt()
        };
        Ok(Self {
            log_mean_weight,
            mean_weight: log_mean_weight.exp(),
            standard_error,
            count,
            log_weights,
        })
    }

    /// A degenerate estimate holding the exact normaliser.
    pub fn exact(log_z: f64) -> Self {
        Self {
            log_weights: Array1::from_elem(1, log_z),
            log_mean_weight: log_z,
            mean_weight: log_z.exp(),
            standard_error: 0.0,
            count: 1,
        }
    }
}

/// Value of `ℓ_SNL` split into its data and normaliser parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnlValue {
    pub value: f64,
    pub data_term: f64,
    pub normalizer_term: f64,
}

/// Stochastic gradient of an objective with respect to `θ` and `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub grad_theta: Array1<f64>,
    pub grad_b: f64,
}

impl GradientEstimate {
    fn check_finite(self) -> Result<Self> {
        if let Some((i, v)) = self.grad_theta.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(SnlError::NonFiniteGradient { index: i, value: *v });
        }
        if !self.grad_b.is_finite() {
            return Err(SnlError::NonFiniteGradient {
                index: self.grad_theta.len(),
                value: self.grad_b,
            });
        }
        Ok(self)
    }
}

/// `z e^{-λ} + λ - 1`, an upper bound on `log z` that is tight at `λ = log z`.
pub fn variational_log_bound(z: f64, lambda: f64) -> Result<f64> {
    if !(z > 0.0) {
        return Err(SnlError::Domain(format!("variational log bound needs z > 0, got {z}")));
    }
    Ok(z * (-lambda).exp() + lambda - 1.0)
}

fn require_data(data: &ArrayView2<f64>) -> Result<()> {
    if data.nrows() == 0 {
        Err(SnlError::EmptyBatch("data batch"))
    } else {
        Ok(())
    }
}

fn first_non_finite(e: &Array1<f64>, offset: usize) -> Result<()> {
    match e.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(SnlError::NonFiniteEnergy {
            index: i + offset,
            value: e[i],
        }),
        None => Ok(()),
    }
}

/// `log w_m = -E(x_m) + log d(x_m) - log q(x_m)`.
fn log_weights_from_energies(model: &dyn EnergyModel, batch: &ImportanceBatch, energies: &Array1<f64>) -> Array1<f64> {
    let log_d = model.base().log_densities(batch.samples().view());
    let mut lw = -energies + &log_d;
    lw -= batch.proposal_log_densities();
    lw
}

/// Importance-sampling estimate of `Z_θ = ∫ exp(-E_θ(x)) d(x) dx`.
pub fn estimate_z(model: &dyn EnergyModel, batch: &ImportanceBatch) -> Result<ZEstimate> {
    let e = model.energies(batch.samples().view())?;
    first_non_finite(&e, 0)?;
    ZEstimate::from_log_weights(log_weights_from_energies(model, batch, &e))
}

fn snl_from_terms(data_term: f64, b: f64, z: &ZEstimate) -> Result<SnlValue> {
    if !data_term.is_finite() {
        return Err(SnlError::NonFiniteObjective {
            term: ObjectiveTerm::Data,
            value: data_term,
        });
    }
    let normalizer_term = -b - (z.log_mean_weight - b).exp() + 1.0;
    if !normalizer_term.is_finite() {
        return Err(SnlError::NonFiniteObjective {
            term: ObjectiveTerm::Normalizer,
            value: normalizer_term,
        });
    }
    Ok(SnlValue {
        value: data_term + normalizer_term,
        data_term,
        normalizer_term,
    })
}

/// `ℓ_SNL(θ, b)` over a data batch given an estimate of `Z_θ`.
pub fn snl_objective(model: &dyn EnergyModel, b: f64, data: ArrayView2<f64>, z: &ZEstimate) -> Result<SnlValue> {
    require_data(&data)?;
    let e = model.energies(data)?;
    snl_from_terms(-e.mean().unwrap(), b, z)
}

/// Value, gradient and normaliser estimate from a single pass.
#[derive(Clone, Debug)]
pub struct SnlStep {
    pub value: SnlValue,
    pub gradient: GradientEstimate,
    pub z: ZEstimate,
    pub max_energy: f64,
}

/// Unbiased gradient of `ℓ_SNL` given the data batch:
///
/// ```text
/// ∇_θ = -mean_i ∇E(x_i) + e^{-b} mean_m [∇E(x_m) w_m]
/// ∇_b = -1 + e^{-b} mean_m w_m
/// ```
pub fn snl_gradients(
    model: &dyn EnergyModel,
    b: f64,
    data: ArrayView2<f64>,
    batch: &ImportanceBatch,
) -> Result<GradientEstimate> {
    Ok(snl_step(model, b, data, batch)?.gradient)
}

/// [`snl_objective`] and [`snl_gradients`] sharing one forward pass over the
/// stacked data and proposal samples.
pub fn snl_step(model: &dyn EnergyModel, b: f64, data: ArrayView2<f64>, batch: &ImportanceBatch) -> Result<SnlStep> {
    require_data(&data)?;
    let n = data.nrows();
    let m = batch.len();
    let stacked = concatenate(Axis(0), &[data, batch.samples().view()]).map_err(|_| SnlError::DimensionMismatch {
        expected: data.ncols(),
        got: batch.samples().ncols(),
        context: "proposal sample dimension",
    })?;
    let log_d = model.base().log_densities(batch.samples().view());
    let mut z_est = None;
    let (energies, grad_theta) = model.energies_and_pullback(stacked.view(), &mut |e: &Array1<f64>| {
        first_non_finite(e, 0)?;
        let mut lw = -&e.slice(s![n..]) + &log_d;
        lw -= batch.proposal_log_densities();
        let z = ZEstimate::from_log_weights(lw)?;
        let log_m = (m as f64).ln();
        let mut coeffs = Array1::from_elem(n + m, -1.0 / n as f64);
        for (c, lw) in coeffs.slice_mut(s![n..]).iter_mut().zip(z.log_weights.iter()) {
            *c = (lw - b - log_m).exp();
        }
        z_est = Some(z);
        Ok(coeffs)
    })?;
    let z = z_est.expect("coefficients evaluated");
    if grad_theta.len() != model.num_params() {
        return Err(SnlError::DimensionMismatch {
            expected: model.num_params(),
            got: grad_theta.len(),
            context: "parameter gradient",
        });
    }
    let data_term = -energies.slice(s![..n]).mean().unwrap();
    let value = snl_from_terms(data_term, b, &z)?;
    let gradient = GradientEstimate {
        grad_theta,
        grad_b: -1.0 + (z.log_mean_weight - b).exp(),
    }
    .check_finite()?;
    let max_energy = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SnlStep {
        value,
        gradient,
        z,
        max_energy,
    })
}

/// Gradient of `ℓ_SNL` using the closed-form normaliser:
/// `∇_θ = -mean ∇E(x_i) - e^{log Z - b} ∇log Z`, `∇_b = -1 + e^{log Z - b}`.
pub fn snl_gradients_exact(model: &dyn EnergyModel, b: f64, data: ArrayView2<f64>) -> Result<GradientEstimate> {
    require_data(&data)?;
    let (log_z, grad_log_z) = closed_form(model)?;
    let n = data.nrows();
    let coeffs = Array1::from_elem(n, -1.0 / n as f64);
    let data_grad = model.weighted_param_gradient(data, coeffs.view())?;
    let scale = (log_z - b).exp();
    GradientEstimate {
        grad_theta: data_grad - &(grad_log_z * scale),
        grad_b: -1.0 + scale,
    }
    .check_finite()
}

fn closed_form(model: &dyn EnergyModel) -> Result<(f64, Array1<f64>)> {
    match (model.exact_log_z(), model.exact_grad_log_z()) {
        (Some(z), Some(g)) => Ok((z, g)),
        _ => Err(SnlError::Unsupported("model has no closed-form normaliser".into())),
    }
}

/// Both sides of `∇_θ ℓ_SNL = ∇_θ ℓ + ∇_θ log Z (1 - e^{log Z - b})` for a
/// closed-form model. The left side is [`snl_gradients_exact`]; the right
/// side is assembled from the exact log-likelihood gradient.
pub fn gradient_relation_check(
    model: &dyn EnergyModel,
    b: f64,
    data: ArrayView2<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let lhs = snl_gradients_exact(model, b, data)?.grad_theta;
    let (log_z, grad_log_z) = closed_form(model)?;
    let n = data.nrows();
    let coeffs = Array1::from_elem(n, -1.0 / n as f64);
    let grad_ll = model.weighted_param_gradient(data, coeffs.view())? - &grad_log_z;
    let rhs = grad_ll + &(grad_log_z * (1.0 - (log_z - b).exp()));
    Ok((lhs, rhs))
}

/// `ℓ_IS = mean(-E(x_i)) - log Ẑ`, a stochastic upper bound of `ℓ(θ)`.
pub fn l_is_objective(model: &dyn EnergyModel, data: ArrayView2<f64>, batch: &ImportanceBatch) -> Result<f64> {
    require_data(&data)?;
    let z = estimate_z(model, batch)?;
    let e = model.energies(data)?;
    l_is_from(-e.mean().unwrap(), &z)
}

pub(crate) fn l_is_from(data_term: f64, z: &ZEstimate) -> Result<f64> {
    if z.log_mean_weight == f64::NEG_INFINITY {
        return Err(SnlError::DegenerateProposal);
    }
    if !data_term.is_finite() {
        return Err(SnlError::NonFiniteObjective {
            term: ObjectiveTerm::Data,
            value: data_term,
        });
    }
    Ok(data_term - z.log_mean_weight)
}

/// Log-odds `G(x) = -E(x) + log d(x) - b - log q(x)` of model against noise.
fn nce_log_odds(
    model: &dyn EnergyModel,
    b: f64,
    xs: ArrayView2<f64>,
    energies: &Array1<f64>,
    log_q: &Array1<f64>,
) -> Array1<f64> {
    let log_d = model.base().log_densities(xs);
    let mut g = -energies + &log_d;
    g -= log_q;
    g - b
}

fn check_nu(nu: f64) -> Result<()> {
    if nu > 0.0 && nu.is_finite() {
        Ok(())
    } else {
        Err(SnlError::Domain(format!("noise ratio must be positive, got {nu}")))
    }
}

/// NCE loss (to be minimised) with a learned log-normaliser `b`:
///
/// ```text
/// -(1/n) Σ_i log σ(G(x_i) - log ν) - (ν/M) Σ_m log σ(-G(x_m) + log ν)
/// ```
pub fn nce_objective(
    model: &dyn EnergyModel,
    b: f64,
    data: ArrayView2<f64>,
    noise: &ImportanceBatch,
    noise_density: &dyn Density,
    nu: f64,
) -> Result<f64> {
    check_nu(nu)?;
    require_data(&data)?;
    let e_data = model.energies(data)?;
    let e_noise = model.energies(noise.samples().view())?;
    let log_q_data = noise_density.log_densities(data);
    let g_data = nce_log_odds(model, b, data, &e_data, &log_q_data);
    let g_noise = nce_log_odds(model, b, noise.samples().view(), &e_noise, noise.proposal_log_densities());
    Ok(nce_loss_from_log_odds(&g_data, &g_noise, nu))
}

fn nce_loss_from_log_odds(g_data: &Array1<f64>, g_noise: &Array1<f64>, nu: f64) -> f64 {
    let log_nu = nu.ln();
    let n = g_data.len() as f64;
    let m = g_noise.len() as f64;
    let data_part: f64 = g_data.iter().map(|g| log_sigmoid(g - log_nu)).sum::<f64>() / n;
    let noise_part: f64 = g_noise.iter().map(|g| log_sigmoid(-g + log_nu)).sum::<f64>() * nu / m;
    -(data_part + noise_part)
}

/// NCE loss and the gradient of its *negation* (an ascent direction, like
/// the SNL gradients).
pub fn nce_step(
    model: &dyn EnergyModel,
    b: f64,
    data: ArrayView2<f64>,
    noise: &ImportanceBatch,
    noise_density: &dyn Density,
    nu: f64,
) -> Result<(f64, GradientEstimate)> {
    check_nu(nu)?;
    require_data(&data)?;
    let n = data.nrows();
    let m = noise.len();
    let log_nu = nu.ln();
    let stacked = concatenate(Axis(0), &[data, noise.samples().view()]).map_err(|_| SnlError::DimensionMismatch {
        expected: data.ncols(),
        got: noise.samples().ncols(),
        context: "noise sample dimension",
    })?;
    let log_q = concatenate(
        Axis(0),
        &[noise_density.log_densities(data).view(), noise.proposal_log_densities().view()],
    )
    .expect("1-d concatenation");
    let mut loss = f64::NAN;
    let mut grad_b = 0.0;
    let (_, grad_theta) = model.energies_and_pullback(stacked.view(), &mut |e: &Array1<f64>| {
        first_non_finite(e, 0)?;
        let g = nce_log_odds(model, b, stacked.view(), e, &log_q);
        let g_data = g.slice(s![..n]).to_owned();
        let g_noise = g.slice(s![n..]).to_owned();
        loss = nce_loss_from_log_odds(&g_data, &g_noise, nu);
        // d(-loss)/dG: data rows σ(-(G - log ν))/n, noise rows -ν σ(G - log ν)/M.
        let mut dg = Array1::zeros(n + m);
        for i in 0..n {
            dg[i] = sigmoid(-(g[i] - log_nu)) / n as f64;
        }
        for j in n..n + m {
            dg[j] = -nu * sigmoid(g[j] - log_nu) / m as f64;
        }
        grad_b = -dg.sum();
        // dG/dθ = -∇E
        Ok(-dg)
    })?;
    let gradient = GradientEstimate { grad_theta, grad_b }.check_finite()?;
    Ok((loss, gradient))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BernoulliModel, GaussianMeanModel};
    use crate::proposals::{sample_and_score, Proposal, TwoPointUniform};
    use crate::rng::stream;
    use ndarray::array;

    #[test]
    fn variational_bound_examples() {
        assert_eq!(variational_log_bound(1.0, 0.0).unwrap(), 0.0);
        assert!((variational_log_bound(std::f64::consts::E, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(variational_log_bound(2.0, 0.0).unwrap(), 1.0);
        assert!(variational_log_bound(0.0, 0.0).is_err());
        assert!(variational_log_bound(-1.0, 0.0).is_err());
    }

    #[test]
    fn z_is_one_for_zero_energy() {
        let model = GaussianMeanModel::new(0.0);
        let q = Proposal::StandardGaussian { dim: 1 };
        for m in [1, 7, 100] {
            let batch = sample_and_score(&q, &mut stream(2, 0), m).unwrap();
            let z = estimate_z(&model, &batch).unwrap();
            assert_eq!(z.mean_weight, 1.0);
            assert_eq!(z.standard_error, 0.0);
        }
    }

    #[test]
    fn bernoulli_enumeration_gives_exact_z() {
        let model = BernoulliModel::new(3f64.ln());
        let batch = ImportanceBatch::enumerate(array![[0.0], [1.0]], &TwoPointUniform).unwrap();
        let z = estimate_z(&model, &batch).unwrap();
        assert!((z.mean_weight - 4.0).abs() < 1e-14);
    }

    #[test]
    fn importance_batch_validates() {
        assert!(ImportanceBatch::new(Array2::zeros((0, 1)), Array1::zeros(0)).is_err());
        assert!(ImportanceBatch::new(Array2::zeros((2, 1)), Array1::zeros(3)).is_err());
        assert!(ImportanceBatch::new(Array2::zeros((1, 1)), array![f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn non_finite_energy_reports_index() {
        let model = GaussianMeanModel::new(1.0);
        let batch = ImportanceBatch::new(array![[0.0], [f64::INFINITY]], array![0.0, 0.0]).unwrap();
        match estimate_z(&model, &batch) {
            Err(SnlError::NonFiniteEnergy { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn snl_examples() {
        let data = array![[1.0], [3.0]];
        let v = snl_objective(&GaussianMeanModel::new(0.0), 0.0, data.view(), &ZEstimate::exact(0.0)).unwrap();
        assert_eq!(v.value, 0.0);
        let v = snl_objective(&GaussianMeanModel::new(2.0), 2.0, data.view(), &ZEstimate::exact(2.0)).unwrap();
        assert!((v.value - 2.0).abs() < 1e-14);
        assert_eq!(v.value, v.data_term + v.normalizer_term);

        let bern = array![[0.0], [1.0]];
        let v = snl_objective(&BernoulliModel::new(0.0), 2f64.ln(), bern.view(), &ZEstimate::exact(2f64.ln())).unwrap();
        assert!((v.value + 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn snl_rejects_empty_data_and_reports_normalizer_overflow() {
        let m = GaussianMeanModel::new(0.0);
        assert!(snl_objective(&m, 0.0, Array2::zeros((0, 1)).view(), &ZEstimate::exact(0.0)).is_err());
        match snl_objective(&m, -1000.0, array![[0.0]].view(), &ZEstimate::exact(0.0)) {
            Err(SnlError::NonFiniteObjective { term, .. }) => assert_eq!(term, ObjectiveTerm::Normalizer),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exact_gradient_examples() {
        let data = array![[1.0], [3.0]];
        let g = snl_gradients_exact(&GaussianMeanModel::new(0.0), 0.0, data.view()).unwrap();
        assert_eq!(g.grad_theta, array![2.0]);
        assert_eq!(g.grad_b, 0.0);
        let g = snl_gradients_exact(&GaussianMeanModel::new(2.0), 2.0, data.view()).unwrap();
        assert!(g.grad_theta[0].abs() < 1e-14 && g.grad_b.abs() < 1e-14);
    }

    #[test]
    fn gradient_relation_examples() {
        let data = array![[-1.0], [1.0]];
        let model = GaussianMeanModel::new(1.0);
        let (lhs, rhs) = gradient_relation_check(&model, 0.0, data.view()).unwrap();
        let expected = -(0.5f64).exp();
        assert!((lhs[0] - expected).abs() < 1e-12 && (rhs[0] - expected).abs() < 1e-12);

        // at b = log Z both sides equal the log-likelihood gradient x̄ - θ
        let data = array![[0.5], [2.5]];
        let (lhs, rhs) = gradient_relation_check(&model, 0.5, data.view()).unwrap();
        assert!((lhs[0] - 0.5).abs() < 1e-14 && (rhs[0] - 0.5).abs() < 1e-14);

        // θ = 0: correction vanishes
        let zero = GaussianMeanModel::new(0.0);
        for b in [-3.0, 0.0, 2.0] {
            let (lhs, rhs) = gradient_relation_check(&zero, b, data.view()).unwrap();
            assert!((lhs[0] - 1.5).abs() < 1e-14 && (rhs[0] - 1.5).abs() < 1e-14);
        }
    }

    #[test]
    fn l_is_zero_for_zero_energy_and_degenerate_weights_error() {
        let model = GaussianMeanModel::new(0.0);
        let q = Proposal::StandardGaussian { dim: 1 };
        let batch = sample_and_score(&q, &mut stream(1, 0), 50).unwrap();
        assert_eq!(l_is_objective(&model, array![[1.0]].view(), &batch).unwrap(), 0.0);

        // a sample outside the base support has weight exactly zero
        let shape = crate::nn::MlpShape::new(vec![1, 3, 1], crate::nn::Activation::Tanh).unwrap();
        let bounds = crate::proposals::UniformBoxProposal::new(vec![-1.0], vec![1.0]).unwrap();
        let tilted = crate::models::MlpEnergy::zeros(shape, crate::models::BaseDistribution::new(Proposal::UniformBox { bounds })).unwrap();
        let outside = ImportanceBatch::new(array![[5.0], [-7.0]], array![0.0, 0.0]).unwrap();
        assert!(matches!(
            l_is_objective(&tilted, array![[0.0]].view(), &outside),
            Err(SnlError::DegenerateProposal)
        ));
    }

    #[test]
    fn nce_symmetric_case_is_two_log_two() {
        // model density equals the noise: E = 0, base = q = N(0,1), b = 0
        let model = GaussianMeanModel::new(0.0);
        let q = Proposal::StandardGaussian { dim: 1 };
        let noise = sample_and_score(&q, &mut stream(4, 0), 30).unwrap();
        let loss = nce_objective(&model, 0.0, array![[0.3], [-1.2]].view(), &noise, &q, 1.0).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn nce_bernoulli_hand_value() {
        let model = BernoulliModel::new(3f64.ln());
        let noise = ImportanceBatch::enumerate(array![[0.0]], &TwoPointUniform).unwrap();
        let loss = nce_objective(&model, 4f64.ln(), array![[1.0]].view(), &noise, &TwoPointUniform, 1.0).unwrap();
        let expected = -(0.6f64.ln() + (2.0f64 / 3.0).ln());
        assert!((loss - expected).abs() < 1e-14);
        assert!((loss - 0.9163).abs() < 1e-4);
    }

    #[test]
    fn nce_separable_limit_goes_to_zero() {
        // data weight → ∞ at the data point and → 0 at the noise point
        let model = BernoulliModel::new(60.0);
        let noise = ImportanceBatch::enumerate(array![[0.0]], &TwoPointUniform).unwrap();
        let loss = nce_objective(&model, 30.0, array![[1.0]].view(), &noise, &TwoPointUniform, 1.0).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn nce_rejects_non_positive_nu() {
        let model = BernoulliModel::new(0.0);
        let noise = ImportanceBatch::enumerate(array![[0.0]], &TwoPointUniform).unwrap();
        for nu in [0.0, -1.0] {
            assert!(nce_objective(&model, 0.0, array![[1.0]].view(), &noise, &TwoPointUniform, nu).is_err());
        }
    }

    #[test]
    fn nce_step_loss_matches_objective() {
        let model = GaussianMeanModel::new(0.7);
        let q = Proposal::StandardGaussian { dim: 1 };
        let noise = sample_and_score(&q, &mut stream(6, 0), 40).unwrap();
        let data = array![[0.2], [1.4], [0.9]];
        let direct = nce_objective(&model, 0.1, data.view(), &noise, &q, 2.0).unwrap();
        let (loss, _) = nce_step(&model, 0.1, data.view(), &noise, &q, 2.0).unwrap();
        assert!((direct - loss).abs() < 1e-14);
    }
}
