//! Conditional energy models `p(y | x) ∝ exp(-E(x, y)) d(y)` trained with a
//! per-input log-normaliser `b_φ(x)`:
//!
//! ```text
//! ℓ_SNL = mean_i [ -E(x_i, y_i) - b_φ(x_i) - e^{-b_φ(x_i)} Ẑ(x_i) + 1 ]
//! ```
//!
//! where `Ẑ(x_i)` is an importance estimate from `M` proposal draws of `y`
//! for that input.

use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::DatasetSplit;
use crate::error::{ObjectiveTerm, Result, SnlError};
use crate::mdn::{sample_rows, Mdn};
use crate::models::BaseDistribution;
use crate::nn::{Activation, MlpShape, Trace};
use crate::numeric::{log_mean_exp, sample_std, sigmoid};
use crate::optim::OptimizerConfig;
use crate::proposals::{fit_gaussian, Density, Proposal};
use crate::rng::{stream, streams, SnlRng};
use crate::training::{EpochMetrics, Objective};

/// Width of the learned input features `h_x`.
pub const FEATURE_DIM: usize = 10;
/// Per-point `|log Ẑ - b|` beyond which a model is reported as unnormalised.
pub const UNNORMALIZED_GAP: f64 = 50.0;

/// An energy over scalar inputs and targets.
pub trait ConditionalEnergy: Send + Sync {
    /// `E(x_i, ys[i, j])` for every row `i` and column `j`.
    fn energies(&self, x: ArrayView1<f64>, ys: ArrayView2<f64>) -> Result<Array2<f64>>;

    /// Base density over `y`.
    fn base(&self) -> &BaseDistribution;

    /// Calls `f(i, E(x_i, ·))` over one target grid `ys` shared by every input.
    fn for_each_shared_row(
        &self,
        x: ArrayView1<f64>,
        ys: ArrayView1<f64>,
        f: &mut dyn FnMut(usize, ArrayView1<f64>) -> Result<()>,
    ) -> Result<()> {
        let grid = ys.insert_axis(Axis(0));
        for i in 0..x.len() {
            let e = self.energies(x.slice(s![i..i + 1]), grid)?;
            f(i, e.row(0))?;
        }
        Ok(())
    }
}

/// `E = -θ x y` against a standard Gaussian base on `y`, so that
/// `log Z(x) = (θx)²/2`.
#[derive(Clone, Debug)]
pub struct BilinearOracle {
    pub theta: f64,
    base: BaseDistribution,
}

impl BilinearOracle {
    pub fn new(theta: f64) -> Self {
        Self {
            theta,
            base: BaseDistribution::new(Proposal::StandardGaussian { dim: 1 }),
        }
    }

    pub fn exact_log_z(&self, x: f64) -> f64 {
        0.5 * (self.theta * x).powi(2)
    }

    /// `log p(y | x)` relative to the base.
    pub fn exact_log_likelihood(&self, x: f64, y: f64) -> f64 {
        self.theta * x * y - self.exact_log_z(x)
    }
}

impl ConditionalEnergy for BilinearOracle {
    fn energies(&self, x: ArrayView1<f64>, ys: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_rows(x.len(), ys.nrows(), "targets per input")?;
        let mut out = ys.to_owned();
        for (mut row, xi) in out.rows_mut().into_iter().zip(x.iter()) {
            row.mapv_inplace(|y| -self.theta * xi * y);
        }
        Ok(out)
    }

    fn base(&self) -> &BaseDistribution {
        &self.base
    }
}

fn check_rows(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(SnlError::DimensionMismatch { expected, got, context })
    }
}

/// Proposal draws of `y`, `M` per input, with their proposal log-densities
/// and the proposal log-density of each observed target.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalBatch {
    pub ys: Array2<f64>,
    pub log_q: Array2<f64>,
    pub data_log_q: Array1<f64>,
}

impl ConditionalBatch {
    pub fn new(ys: Array2<f64>, log_q: Array2<f64>, data_log_q: Array1<f64>) -> Result<Self> {
        if ys.ncols() == 0 || ys.nrows() == 0 {
            return Err(SnlError::EmptyBatch("conditional importance batch"));
        }
        if ys.dim() != log_q.dim() {
            return Err(SnlError::DimensionMismatch {
                expected: ys.len(),
                got: log_q.len(),
                context: "proposal log-densities",
            });
        }
        check_rows(ys.nrows(), data_log_q.len(), "data proposal log-densities")?;
        if log_q.iter().any(|v| !v.is_finite()) {
            return Err(SnlError::Domain("proposal log-density is not finite".into()));
        }
        Ok(Self { ys, log_q, data_log_q })
    }

    pub fn samples_per_input(&self) -> usize {
        self.ys.ncols()
    }
}

/// `log w_ij = -E(x_i, y_ij) + log d(y_ij) - log q(y_ij | x_i)`.
pub fn conditional_log_weights(
    model: &dyn ConditionalEnergy,
    x: ArrayView1<f64>,
    batch: &ConditionalBatch,
) -> Result<Array2<f64>> {
    check_rows(x.len(), batch.ys.nrows(), "inputs and proposal rows")?;
    let e = model.energies(x, batch.ys.view())?;
    if let Some(i) = e.iter().position(|v| !v.is_finite()) {
        return Err(SnlError::NonFiniteEnergy {
            index: i,
            value: e.iter().nth(i).copied().unwrap_or(f64::NAN),
        });
    }
    let flat = batch.ys.view().into_shape_with_order((batch.ys.len(), 1)).expect("contiguous");
    let log_d = model.base().log_densities(flat).into_shape_with_order(batch.ys.dim()).expect("shape");
    Ok(-e + log_d - &batch.log_q)
}

/// `mean_i [-E_i - b_i - exp(log Z_i - b_i) + 1]` from its ingredients.
pub fn regression_snl_from_terms(neg_energy: ArrayView1<f64>, b: ArrayView1<f64>, log_z: ArrayView1<f64>) -> Result<f64> {
    let n = neg_energy.len();
    if n == 0 {
        return Err(SnlError::EmptyBatch("data batch"));
    }
    let data = neg_energy.sum() / n as f64;
    if !data.is_finite() {
        return Err(SnlError::NonFiniteObjective {
            term: ObjectiveTerm::Data,
            value: data,
        });
    }
    let norm: f64 = b
        .iter()
        .zip(log_z.iter())
        .map(|(b, lz)| -b - (lz - b).exp() + 1.0)
        .sum::<f64>()
        / n as f64;
    if !norm.is_finite() {
        return Err(SnlError::NonFiniteObjective {
            term: ObjectiveTerm::Normalizer,
            value: norm,
        });
    }
    Ok(data + norm)
}

fn data_energies(model: &dyn ConditionalEnergy, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_rows(x.len(), y.len(), "inputs and targets")?;
    let e = model.energies(x, y.insert_axis(Axis(1)))?;
    Ok(e.column(0).to_owned())
}

/// Regression SNL over a batch of pairs with per-input importance batches.
pub fn snl_regression_objective(
    model: &dyn ConditionalEnergy,
    b: ArrayView1<f64>,
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    batch: &ConditionalBatch,
) -> Result<f64> {
    check_rows(x.len(), b.len(), "normaliser values")?;
    let e = data_energies(model, x, y)?;
    let lw = conditional_log_weights(model, x, batch)?;
    let log_z = row_log_means(&lw);
    regression_snl_from_terms((-e).view(), b, log_z.view())
}

/// Gradient of the regression SNL with respect to each `b_i`.
pub fn regression_b_gradient(
    model: &dyn ConditionalEnergy,
    b: ArrayView1<f64>,
    x: ArrayView1<f64>,
    batch: &ConditionalBatch,
) -> Result<Array1<f64>> {
    let lw = conditional_log_weights(model, x, batch)?;
    let log_z = row_log_means(&lw);
    let n = x.len() as f64;
    Ok(Array1::from_shape_fn(b.len(), |i| (-1.0 + (log_z[i] - b[i]).exp()) / n))
}

fn row_log_means(lw: &Array2<f64>) -> Array1<f64> {
    lw.rows()
        .into_iter()
        .map(|r| log_mean_exp(&r.to_vec()))
        .collect()
}

/// Energy network over `(x, y)`: features `h_x` from `1 → 10 → 10 → 10`,
/// a target branch `1 → 16 → 32 → 64 → 128`, and a head `138 → 10 → 1` on
/// their concatenation. ReLU throughout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalEnergyModel {
    feature: MlpShape,
    target: MlpShape,
    head: MlpShape,
    params: Vec<f64>,
    base: BaseDistribution,
}

/// `b_φ`: `10 → 10 → 1` over the features `h_x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerNet {
    shape: MlpShape,
    params: Vec<f64>,
}

impl NormalizerNet {
    pub fn new(rng: &mut SnlRng) -> Self {
        let shape = MlpShape::new(vec![FEATURE_DIM, 10, 1], Activation::Relu).expect("static widths");
        let params = shape.init(rng);
        Self { shape, params }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        let shape = MlpShape::new(vec![FEATURE_DIM, 10, 1], Activation::Relu).expect("static widths");
        check_rows(shape.num_params(), params.len(), "normaliser parameters")?;
        Ok(Self { shape, params })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn weight_count(&self) -> usize {
        self.shape.weight_count()
    }

    /// Set the output bias, shifting every `b_φ(x)` by the same amount.
    pub fn set_output_bias(&mut self, value: f64) {
        let i = self.shape.output_bias_index();
        self.params[i] = value;
    }

    pub fn forward(&self, features: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.shape.forward(&self.params, features)?.column(0).to_owned())
    }

    /// `Σ_i c_i ∇_φ b_φ(h_i)`.
    pub fn weighted_gradient(&self, features: ArrayView2<f64>, coeffs: ArrayView1<f64>) -> Result<Vec<f64>> {
        check_rows(features.nrows(), coeffs.len(), "normaliser coefficients")?;
        let trace = self.shape.forward_trace(&self.params, features)?;
        let mut grad = vec![0.0; self.params.len()];
        self.shape
            .backward(&self.params, &trace, coeffs.insert_axis(Axis(1)), &mut grad, false);
        Ok(grad)
    }
}

impl ConditionalEnergyModel {
    pub fn shapes() -> (MlpShape, MlpShape, MlpShape) {
        let act = Activation::Relu;
        (
            MlpShape::new(vec![1, 10, 10, FEATURE_DIM], act).expect("static widths"),
            MlpShape::new(vec![1, 16, 32, 64, 128], act).expect("static widths"),
            MlpShape::new(vec![FEATURE_DIM + 128, 10, 1], act).expect("static widths"),
        )
    }

    pub fn new(base: BaseDistribution, rng: &mut SnlRng) -> Self {
        let (feature, target, head) = Self::shapes();
        let mut params = feature.init(rng);
        params.extend(target.init(rng));
        params.extend(head.init(rng));
        Self {
            feature,
            target,
            head,
            params,
            base,
        }
    }

    pub fn from_params(params: Vec<f64>, base: BaseDistribution) -> Result<Self> {
        let (feature, target, head) = Self::shapes();
        let n = feature.num_params() + target.num_params() + head.num_params();
        check_rows(n, params.len(), "conditional model parameters")?;
        Ok(Self {
            feature,
            target,
            head,
            params,
            base,
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight-matrix entries of the feature extractor, target branch and head.
    pub fn weight_counts(&self) -> [usize; 3] {
        [self.feature.weight_count(), self.target.weight_count(), self.head.weight_count()]
    }

    fn ranges(&self) -> [std::ops::Range<usize>; 3] {
        let a = self.feature.num_params();
        let b = a + self.target.num_params();
        let c = b + self.head.num_params();
        [0..a, a..b, b..c]
    }

    fn part(&self, i: usize) -> &[f64] {
        &self.params[self.ranges()[i].clone()]
    }

    /// `h_x` for every input.
    pub fn features(&self, x: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.feature.forward(self.part(0), x.insert_axis(Axis(1)))
    }

    fn head_input(&self, hx: ArrayView2<f64>, targets: &Array2<f64>, group: usize) -> Array2<f64> {
        let rows = targets.nrows();
        let mut input = Array2::zeros((rows, FEATURE_DIM + targets.ncols()));
        for r in 0..rows {
            input.slice_mut(s![r, ..FEATURE_DIM]).assign(&hx.row(r / group));
        }
        input.slice_mut(s![.., FEATURE_DIM..]).assign(targets);
        input
    }
}

impl ConditionalEnergy for ConditionalEnergyModel {
    fn energies(&self, x: ArrayView1<f64>, ys: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_rows(x.len(), ys.nrows(), "targets per input")?;
        let (n, k) = ys.dim();
        let hx = self.features(x)?;
        let flat = ys.to_owned().into_shape_with_order((n * k, 1)).expect("contiguous");
        let f = self.target.forward(self.part(1), flat.view())?;
        let input = self.head_input(hx.view(), &f, k);
        let e = self.head.forward(self.part(2), input.view())?;
        Ok(e.into_shape_with_order((n, k)).expect("shape"))
    }

    fn base(&self) -> &BaseDistribution {
        &self.base
    }

    /// The head's first layer splits into an input part and a target part,
    /// so the target branch and its projection are computed once for the
    /// whole grid.
    fn for_each_shared_row(
        &self,
        x: ArrayView1<f64>,
        ys: ArrayView1<f64>,
        f: &mut dyn FnMut(usize, ArrayView1<f64>) -> Result<()>,
    ) -> Result<()> {
        let hx = self.features(x)?;
        let fy = self.target.forward(self.part(1), ys.insert_axis(Axis(1)))?;
        let (w1, b1) = self.head.layer(self.part(2), 0);
        let (w2, b2) = self.head.layer(self.part(2), 1);
        let proj_y = fy.dot(&w1.slice(s![FEATURE_DIM.., ..]));
        let proj_x = hx.dot(&w1.slice(s![..FEATURE_DIM, ..])) + &b1;
        let act = self.head.activation;
        let w2 = w2.column(0);
        let mut e = Array1::zeros(ys.len());
        for i in 0..x.len() {
            let px = proj_x.row(i);
            for (m, row) in proj_y.rows().into_iter().enumerate() {
                let mut acc = b2[0];
                for k in 0..row.len() {
                    acc += act.apply(row[k] + px[k]) * w2[k];
                }
                e[m] = acc;
            }
            f(i, e.view())?;
        }
        Ok(())
    }
}

/// Result of one regression training step. Gradients point uphill on the
/// regression SNL, or downhill on the NCE loss.
#[derive(Clone, Debug)]
pub struct RegressionStep {
    pub snl: f64,
    pub nce_loss: Option<f64>,
    pub grad_theta: Vec<f64>,
    pub grad_phi: Option<Vec<f64>>,
    pub max_energy: f64,
    pub min_log_weight: f64,
}

/// Objective value and exact gradients with respect to the model
/// parameters and, when present, the normaliser network.
pub fn regression_step(
    model: &ConditionalEnergyModel,
    normalizer: Option<&NormalizerNet>,
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    batch: &ConditionalBatch,
    objective: Objective,
    nu: f64,
) -> Result<RegressionStep> {
    let n = x.len();
    if n == 0 {
        return Err(SnlError::EmptyBatch("data batch"));
    }
    check_rows(n, y.len(), "inputs and targets")?;
    check_rows(n, batch.ys.nrows(), "inputs and proposal rows")?;
    if objective == Objective::Nce && !(nu > 0.0 && nu.is_finite()) {
        return Err(SnlError::Domain(format!("noise ratio must be positive, got {nu}")));
    }
    let m = batch.samples_per_input();
    let group = m + 1;
    let rows = n * group;
    let [rf, ry, rh] = model.ranges();

    let xin = x.insert_axis(Axis(1)).to_owned();
    let ftrace = model.feature.forward_trace(&model.params[rf.clone()], xin.view())?;
    let hx = ftrace.output().clone();
    let (b, ntrace): (Array1<f64>, Option<Trace>) = match normalizer {
        Some(net) => {
            let t = net.shape.forward_trace(&net.params, hx.view())?;
            (t.output().column(0).to_owned(), Some(t))
        }
        None => (Array1::zeros(n), None),
    };
    let mut ys_all = Array2::zeros((rows, 1));
    let mut log_q = Array1::zeros(rows);
    for i in 0..n {
        ys_all[[i * group, 0]] = y[i];
        log_q[i * group] = batch.data_log_q[i];
        for j in 0..m {
            ys_all[[i * group + 1 + j, 0]] = batch.ys[[i, j]];
            log_q[i * group + 1 + j] = batch.log_q[[i, j]];
        }
    }
    let ytrace = model.target.forward_trace(&model.params[ry.clone()], ys_all.view())?;
    let input = model.head_input(hx.view(), ytrace.output(), group);
    let htrace = model.head.forward_trace(&model.params[rh.clone()], input.view())?;
    let e = htrace.output().column(0).to_owned();
    if let Some(i) = e.iter().position(|v| !v.is_finite()) {
        return Err(SnlError::NonFiniteEnergy { index: i, value: e[i] });
    }
    let log_d = model.base.log_densities(ys_all.view());
    let g_log = -&e + &log_d - &log_q;

    let mut log_z = Array1::zeros(n);
    let mut min_log_weight = f64::INFINITY;
    for i in 0..n {
        let lw = g_log.slice(s![i * group + 1..(i + 1) * group]);
        min_log_weight = lw.iter().copied().fold(min_log_weight, f64::min);
        log_z[i] = log_mean_exp(&lw.to_vec());
    }
    let neg_e_data = Array1::from_shape_fn(n, |i| -e[i * group]);
    let snl = regression_snl_from_terms(neg_e_data.view(), b.view(), log_z.view())?;
    let inv_n = 1.0 / n as f64;

    // derivative of the objective (to ascend) with respect to each energy and each b_i
    let mut d_e = Array2::zeros((rows, 1));
    let mut d_b = Array2::zeros((n, 1));
    let mut nce_loss = None;
    match objective {
        Objective::Snl => {
            for i in 0..n {
                d_e[[i * group, 0]] = -inv_n;
                for j in 0..m {
                    let r = i * group + 1 + j;
                    d_e[[r, 0]] = inv_n / m as f64 * (g_log[r] - b[i]).exp();
                }
                d_b[[i, 0]] = inv_n * (-1.0 + (log_z[i] - b[i]).exp());
            }
        }
        Objective::Nce => {
            let log_nu = nu.ln();
            let mut loss = 0.0;
            for i in 0..n {
                let r0 = i * group;
                let g0 = g_log[r0] - b[i];
                loss -= inv_n * crate::numeric::log_sigmoid(g0 - log_nu);
                let dg0 = inv_n * sigmoid(-(g0 - log_nu));
                d_e[[r0, 0]] = -dg0;
                let mut db = -dg0;
                for j in 0..m {
                    let r = r0 + 1 + j;
                    let gr = g_log[r] - b[i];
                    loss -= inv_n * nu / m as f64 * crate::numeric::log_sigmoid(-gr + log_nu);
                    let dg = -inv_n * nu / m as f64 * sigmoid(gr - log_nu);
                    d_e[[r, 0]] = -dg;
                    db -= dg;
                }
                d_b[[i, 0]] = db;
            }
            nce_loss = Some(loss);
        }
    }

    let mut grad_theta = vec![0.0; model.params.len()];
    let g_in = model
        .head
        .backward(&model.params[rh.clone()], &htrace, d_e.view(), &mut grad_theta[rh], true)
        .expect("input gradient");
    model.target.backward(
        &model.params[ry.clone()],
        &ytrace,
        g_in.slice(s![.., FEATURE_DIM..]),
        &mut grad_theta[ry],
        false,
    );
    let mut g_hx = Array2::zeros((n, FEATURE_DIM));
    for r in 0..rows {
        let mut acc = g_hx.row_mut(r / group);
        acc += &g_in.slice(s![r, ..FEATURE_DIM]);
    }
    let grad_phi = match (normalizer, ntrace) {
        (Some(net), Some(t)) => {
            let mut gphi = vec![0.0; net.params.len()];
            let gh = net
                .shape
                .backward(&net.params, &t, d_b.view(), &mut gphi, true)
                .expect("input gradient");
            g_hx += &gh;
            Some(gphi)
        }
        _ => None,
    };
    model
        .feature
        .backward(&model.params[rf.clone()], &ftrace, g_hx.view(), &mut grad_theta[rf], false);
    let all = grad_theta.iter().chain(grad_phi.iter().flatten());
    if let Some((i, v)) = all.enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(SnlError::NonFiniteGradient { index: i, value: *v });
    }
    Ok(RegressionStep {
        snl,
        nce_loss,
        grad_theta,
        grad_phi,
        max_energy: e.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min_log_weight,
    })
}

/// Proposal over targets: either one unconditional density or an MDN over
/// the input features.
#[derive(Clone, Debug, PartialEq)]
pub enum ConditionalProposal {
    Fixed(Proposal),
    Mdn(Mdn),
}

impl ConditionalProposal {
    pub fn kind(&self) -> &'static str {
        match self {
            ConditionalProposal::Fixed(p) => p.kind(),
            ConditionalProposal::Mdn(_) => "mdn",
        }
    }

    /// `m` draws per input plus the proposal log-density of each target.
    pub fn draw(
        &self,
        features: ArrayView2<f64>,
        y: ArrayView1<f64>,
        rng: &mut SnlRng,
        m: usize,
    ) -> Result<ConditionalBatch> {
        let n = y.len();
        match self {
            ConditionalProposal::Fixed(p) => {
                let flat = p.sample(rng, n * m);
                let log_q = p.log_densities(flat.view());
                let ys = flat.into_shape_with_order((n, m)).expect("shape");
                let data_log_q = p.log_densities(y.insert_axis(Axis(1)));
                ConditionalBatch::new(ys, log_q.into_shape_with_order((n, m)).expect("shape"), data_log_q)
            }
            ConditionalProposal::Mdn(mdn) => {
                let mix = mdn.mixture(features)?;
                let (ys, log_q) = sample_rows(&mix, rng, m);
                let data_log_q = Array1::from_shape_fn(n, |i| mix.log_density(i, y[i]));
                ConditionalBatch::new(ys, log_q, data_log_q)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Proposal draws per input and step.
    pub proposal_samples: usize,
    /// `fitted_gaussian`, `uniform_box`, `standard_gaussian` or `mdn`.
    pub proposal: String,
    pub mdn_components: usize,
    pub mdn_learning_rate: f64,
    /// Learn `b_φ(x)`; without it `b ≡ 0`.
    pub normalizer: bool,
    /// Base over `y`: `none` or a proposal kind fitted to the targets.
    pub base: String,
    pub optimizer: OptimizerConfig,
    /// NCE noise ratio; defaults to the number of draws per input.
    pub nce_ratio: Option<f64>,
    /// Shared target draws used for per-epoch validation.
    pub validation_samples: usize,
    pub divergence_patience: usize,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Snl,
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 32,
            proposal_samples: 32,
            proposal: "mdn".into(),
            mdn_components: 2,
            mdn_learning_rate: 1e-3,
            normalizer: true,
            base: "none".into(),
            optimizer: OptimizerConfig::default(),
            nce_ratio: None,
            validation_samples: 2000,
            divergence_patience: 5,
            seed: 0,
        }
    }
}

impl RegressionConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("mdn_learning_rate", self.mdn_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("proposal_samples", self.proposal_samples),
            ("mdn_components", self.mdn_components),
            ("validation_samples", self.validation_samples),
            ("divergence_patience", self.divergence_patience),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        if !["fitted_gaussian", "uniform_box", "standard_gaussian", "mdn"].contains(&self.proposal.as_str()) {
            out.push(format!("unknown regression proposal '{}'", self.proposal));
        }
        if !["none", "fitted_gaussian", "uniform_box", "standard_gaussian"].contains(&self.base.as_str()) {
            out.push(format!("unknown base '{}'", self.base));
        }
        if let Some(nu) = self.nce_ratio {
            if !(nu > 0.0 && nu.is_finite()) {
                out.push(format!("nce_ratio must be positive, got {nu}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(SnlError::InvalidConfig(p.join("; ")))
        }
    }

    pub fn nu(&self) -> f64 {
        self.nce_ratio.unwrap_or(self.proposal_samples as f64)
    }
}

/// Trained conditional model with everything needed to evaluate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionState {
    pub model: ConditionalEnergyModel,
    pub normalizer: Option<NormalizerNet>,
    pub mdn: Option<Mdn>,
}

impl RegressionState {
    /// `b_φ(x)` per input, zero without a normaliser.
    pub fn log_normalizers(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        match &self.normalizer {
            Some(net) => net.forward(self.model.features(x)?.view()),
            None => Ok(Array1::zeros(x.len())),
        }
    }

    pub fn report(
        &self,
        pairs: ArrayView2<f64>,
        eval_proposal: &dyn Density,
        m: usize,
        rng: &mut SnlRng,
    ) -> Result<RegressionReport> {
        let b = self.log_normalizers(pairs.column(0))?;
        eval_regression(&self.model, b.view(), pairs, eval_proposal, m, rng)
    }
}

#[derive(Clone, Debug)]
pub struct RegressionOutcome {
    pub state: RegressionState,
    pub best: RegressionState,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

fn base_from_kind(kind: &str, y: ArrayView2<f64>) -> Result<BaseDistribution> {
    if kind == "none" {
        Ok(BaseDistribution::none())
    } else {
        Ok(BaseDistribution::new(Proposal::from_kind(kind, y)?))
    }
}

fn is_numeric_failure(e: &SnlError) -> bool {
    matches!(
        e,
        SnlError::NonFiniteEnergy { .. } | SnlError::NonFiniteObjective { .. } | SnlError::NonFiniteGradient { .. }
    )
}

/// Gaussian fitted to the training targets; the evaluation proposal.
pub fn target_gaussian(train: ArrayView2<f64>) -> Result<Proposal> {
    let y = train.slice(s![.., 1..2]);
    Ok(Proposal::FittedGaussian {
        gaussian: fit_gaussian(y)?,
    })
}

/// Jointly train the energy, the normaliser network and, for an MDN
/// proposal, the MDN. The MDN takes one maximum-likelihood step per batch on
/// the current features, which it treats as constants.
pub fn train_regression(config: &RegressionConfig, data: &DatasetSplit) -> Result<RegressionOutcome> {
    config.validate()?;
    let train = data.train.view();
    if train.nrows() == 0 {
        return Err(SnlError::EmptyBatch("training data"));
    }
    if train.ncols() != 2 {
        return Err(SnlError::DimensionMismatch {
            expected: 2,
            got: train.ncols(),
            context: "regression pairs",
        });
    }
    let seed = config.seed;
    let ytrain = train.slice(s![.., 1..2]);
    let mut init_rng = stream(seed, streams::INIT);
    let base = base_from_kind(&config.base, ytrain)?;
    let model = ConditionalEnergyModel::new(base, &mut init_rng);
    let normalizer = config.normalizer.then(|| NormalizerNet::new(&mut init_rng));
    let mut proposal = if config.proposal == "mdn" {
        let mut mdn = Mdn::new(FEATURE_DIM, config.mdn_components, &mut stream(seed, streams::MDN))?;
        mdn.calibrate(train.column(1));
        ConditionalProposal::Mdn(mdn)
    } else {
        ConditionalProposal::Fixed(Proposal::from_kind(&config.proposal, ytrain)?)
    };
    let mut state = RegressionState {
        model,
        normalizer,
        mdn: None,
    };
    let eval_q = target_gaussian(train)?;
    let validate = |s: &RegressionState| -> (f64, f64) {
        if data.validation.nrows() == 0 {
            return (f64::NAN, f64::NAN);
        }
        let mut rng = stream(seed, streams::VALIDATION);
        match s.report(data.validation.view(), &eval_q, config.validation_samples, &mut rng) {
            Ok(r) => (r.l_snl, r.mean_b),
            Err(_) => (f64::NAN, f64::NAN),
        }
    };
    let snapshot = |s: &RegressionState, p: &ConditionalProposal| {
        let mut s = s.clone();
        s.mdn = match p {
            ConditionalProposal::Mdn(m) => Some(m.clone()),
            _ => None,
        };
        s
    };
    let (mut best_val, _) = validate(&state);
    let mut best = snapshot(&state, &proposal);
    let mut best_epoch = 0;

    let n_theta = state.model.params.len();
    let n_phi = state.normalizer.as_ref().map_or(0, |n| n.params.len());
    let mut optimizer = config.optimizer.build(n_theta + n_phi);
    let mut mdn_opt = OptimizerConfig::default().build(match &proposal {
        ConditionalProposal::Mdn(m) => m.params().len(),
        _ => 0,
    });
    let mut batch_rng = stream(seed, streams::MINIBATCH);
    let mut proposal_rng = stream(seed, streams::PROPOSAL);
    let mut order: Vec<usize> = (0..train.nrows()).collect();
    let mut flat = vec![0.0; n_theta + n_phi];
    let mut history = Vec::with_capacity(config.epochs);
    let mut failures = 0;
    let mut step_count = 0;
    let nu = config.nu();
    let started = Instant::now();

    for epoch in 0..config.epochs {
        order.shuffle(&mut batch_rng);
        let mut snl_sum = 0.0;
        let mut snl_n = 0usize;
        for chunk in order.chunks(config.batch_size) {
            step_count += 1;
            let pairs = train.select(Axis(0), chunk);
            let (x, y) = (pairs.column(0), pairs.column(1));
            let hx = state.model.features(x)?;
            let batch = proposal.draw(hx.view(), y, &mut proposal_rng, config.proposal_samples)?;
            let step = match regression_step(
                &state.model,
                state.normalizer.as_ref(),
                x,
                y,
                &batch,
                config.objective,
                nu,
            ) {
                Ok(s) => s,
                Err(e) if is_numeric_failure(&e) => {
                    failures += 1;
                    if failures >= config.divergence_patience {
                        let lw = conditional_log_weights(&state.model, x, &batch).ok();
                        let e = state.model.energies(x, batch.ys.view()).ok();
                        return Err(SnlError::Diverged {
                            step: step_count,
                            consecutive: failures,
                            max_energy: e.map_or(f64::NAN, |e| e.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                            min_log_weight: lw.map_or(f64::NAN, |w| w.iter().copied().fold(f64::INFINITY, f64::min)),
                        });
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            failures = 0;
            flat[..n_theta].copy_from_slice(&state.model.params);
            let mut g = step.grad_theta;
            if let Some(net) = &state.normalizer {
                flat[n_theta..].copy_from_slice(&net.params);
                g.extend(step.grad_phi.expect("normaliser gradient"));
            }
            optimizer.step(&mut flat, &g, config.learning_rate)?;
            state.model.params.copy_from_slice(&flat[..n_theta]);
            if let Some(net) = state.normalizer.as_mut() {
                net.params.copy_from_slice(&flat[n_theta..]);
            }
            if let ConditionalProposal::Mdn(mdn) = &mut proposal {
                let (loss, grad) = mdn.loss_and_grad(hx.view(), y)?;
                if loss.is_finite() {
                    let descent: Vec<f64> = grad.iter().map(|v| -v).collect();
                    let before = mdn.params().to_vec();
                    if mdn_opt.step(mdn.params_mut(), &descent, config.mdn_learning_rate).is_err() {
                        mdn.params_mut().copy_from_slice(&before);
                    }
                }
            }
            if step.snl.is_finite() {
                snl_sum += step.snl;
                snl_n += 1;
            }
        }
        let (val_snl, mean_b) = validate(&state);
        if val_snl > best_val || best_val.is_nan() {
            best_val = val_snl;
            best = snapshot(&state, &proposal);
            best_epoch = epoch + 1;
        }
        history.push(EpochMetrics {
            epoch: epoch + 1,
            train_snl: if snl_n > 0 { snl_sum / snl_n as f64 } else { f64::NAN },
            val_snl,
            b: mean_b,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    let state = snapshot(&state, &proposal);
    Ok(RegressionOutcome {
        state,
        best,
        best_epoch,
        history,
    })
}

/// Both bounds of the conditional log-likelihood on a set of pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    /// `mean_i [-E_i - log Ẑ_i]`, relative to the base.
    pub l_is: f64,
    pub l_is_se: f64,
    /// `mean_i [-E_i - b_i - e^{-b_i} Ẑ_i + 1]`, relative to the base.
    pub l_snl: f64,
    pub l_snl_se: f64,
    /// `mean_i log d(y_i)`; add it to express the bounds against Lebesgue measure.
    pub log_base_offset: f64,
    pub mean_b: f64,
    /// Largest `|log Ẑ_i - b_i|`.
    pub max_normalizer_gap: f64,
    pub unnormalized: bool,
    pub samples: usize,
    pub count: usize,
}

/// `ℓ_IS` and `ℓ_SNL` for conditional models, with one set of `m` target
/// draws from `eval_proposal` shared by every pair.
pub fn eval_regression(
    model: &dyn ConditionalEnergy,
    b: ArrayView1<f64>,
    pairs: ArrayView2<f64>,
    eval_proposal: &dyn Density,
    m: usize,
    rng: &mut SnlRng,
) -> Result<RegressionReport> {
    let n = pairs.nrows();
    if n == 0 {
        return Err(SnlError::EmptyBatch("evaluation pairs"));
    }
    if m == 0 {
        return Err(SnlError::EmptyBatch("evaluation samples"));
    }
    check_rows(n, b.len(), "normaliser values")?;
    let (x, y) = (pairs.column(0), pairs.column(1));
    let samples = eval_proposal.sample(rng, m);
    let shift = model.base().log_densities(samples.view()) - eval_proposal.log_densities(samples.view());
    let ys = samples.column(0);
    let e_data = data_energies(model, x, y)?;
    // per-draw contributions to mean_i Ẑ_i / Z_i and mean_i e^{-b_i} Ẑ_i; the
    // draws are shared, so their spread gives the delta-method errors
    let mut rel_contrib = Array1::<f64>::zeros(m);
    let mut snl_contrib = Array1::<f64>::zeros(m);
    let mut log_z = Array1::zeros(n);
    let mut lw = Array1::zeros(m);
    let nf = n as f64;
    model.for_each_shared_row(x, ys, &mut |i, e| {
        for (k, (ei, si)) in e.iter().zip(shift.iter()).enumerate() {
            if !ei.is_finite() {
                return Err(SnlError::NonFiniteEnergy { index: k, value: *ei });
            }
            lw[k] = -ei + si;
        }
        let lz = log_mean_exp(lw.as_slice().expect("contiguous"));
        if lz == f64::NEG_INFINITY {
            return Err(SnlError::DegenerateProposal);
        }
        log_z[i] = lz;
        rel_contrib.zip_mut_with(&lw, |acc, w| *acc += (w - lz).exp() / nf);
        snl_contrib.zip_mut_with(&lw, |acc, w| *acc += (w - b[i]).exp() / nf);
        Ok(())
    })?;
    let l_is = (-&e_data - &log_z).sum() / nf;
    let l_snl = regression_snl_from_terms((-&e_data).view(), b, log_z.view()).unwrap_or(f64::NEG_INFINITY);
    let root_m = (m as f64).sqrt();
    let l_is_se = sample_std(rel_contrib.as_slice().expect("contiguous")) / root_m;
    let l_snl_se = sample_std(snl_contrib.as_slice().expect("contiguous")) / root_m;
    let max_gap = (0..n).map(|i| (log_z[i] - b[i]).abs()).fold(0.0, f64::max);
    let log_base_offset = model.base().log_densities(y.insert_axis(Axis(1))).sum() / nf;
    Ok(RegressionReport {
        l_is,
        l_is_se,
        l_snl,
        l_snl_se,
        log_base_offset,
        mean_b: b.sum() / nf,
        max_normalizer_gap: max_gap,
        unnormalized: max_gap > UNNORMALIZED_GAP || !l_snl.is_finite(),
        samples: m,
        count: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::golden_section_max;
    use ndarray::array;

    #[test]
    fn bilinear_examples() {
        let oracle = BilinearOracle::new(1.0);
        let x = array![2.0];
        let y = array![2.0];
        let e = data_energies(&oracle, x.view(), y.view()).unwrap();
        let v = regression_snl_from_terms((-e).view(), array![2.0].view(), array![2.0].view()).unwrap();
        assert!((v - 2.0).abs() < 1e-14);

        let zero = BilinearOracle::new(0.0);
        let e = data_energies(&zero, x.view(), y.view()).unwrap();
        let v = regression_snl_from_terms((-e).view(), array![0.0].view(), array![0.0].view()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn pointwise_optimal_b_recovers_conditional_likelihood() {
        let oracle = BilinearOracle::new(0.8);
        for &(x, y) in &[(1.5, -0.3), (-2.0, 0.7), (0.1, 2.0)] {
            let lz = oracle.exact_log_z(x);
            let e = -oracle.theta * x * y;
            let (b, v) = golden_section_max(
                |b| regression_snl_from_terms(array![-e].view(), array![b].view(), array![lz].view()).unwrap(),
                -20.0,
                20.0,
                1e-12,
            );
            assert!((v - oracle.exact_log_likelihood(x, y)).abs() < 1e-8);
            assert!((b - lz).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_model_evaluates_to_zero() {
        let zero = BilinearOracle::new(0.0);
        let pairs = array![[0.5, 1.0], [-1.0, 0.2]];
        let q = Proposal::StandardGaussian { dim: 1 };
        let r = eval_regression(&zero, array![0.0, 0.0].view(), pairs.view(), &q, 100, &mut stream(0, 0)).unwrap();
        assert_eq!(r.l_is, 0.0);
        assert_eq!(r.l_snl, 0.0);
        assert!(!r.unnormalized);
    }

    #[test]
    fn shared_rows_match_direct_energies() {
        let model = ConditionalEnergyModel::new(BaseDistribution::none(), &mut stream(1, 0));
        let x = array![-1.0, 0.3, 2.0];
        let ys = array![-0.5, 0.0, 0.25, 3.0];
        let grid = Array2::from_shape_fn((3, 4), |(_, j)| ys[j]);
        let direct = model.energies(x.view(), grid.view()).unwrap();
        model
            .for_each_shared_row(x.view(), ys.view(), &mut |i, e| {
                for j in 0..4 {
                    assert!((e[j] - direct[[i, j]]).abs() < 1e-12);
                }
                Ok(())
            })
            .unwrap();
    }

    #[test]
    fn architecture_weight_counts() {
        let model = ConditionalEnergyModel::new(BaseDistribution::none(), &mut stream(0, 0));
        assert_eq!(model.weight_counts(), [210, 16 + 512 + 2048 + 8192, 1380 + 10]);
        assert_eq!(NormalizerNet::new(&mut stream(0, 0)).weight_count(), 110);
    }

    fn frozen_batch(n: usize, m: usize, seed: u64) -> (Array1<f64>, Array1<f64>, ConditionalBatch) {
        let mut rng = stream(seed, 0);
        let q = Proposal::StandardGaussian { dim: 1 };
        let x = Array1::linspace(-1.0, 1.5, n);
        let y = Array1::linspace(0.5, -0.5, n);
        let feats = Array2::zeros((n, FEATURE_DIM));
        let batch = ConditionalProposal::Fixed(q).draw(feats.view(), y.view(), &mut rng, m).unwrap();
        (x, y, batch)
    }

    fn objective_value(
        model: &ConditionalEnergyModel,
        net: &NormalizerNet,
        x: &Array1<f64>,
        y: &Array1<f64>,
        batch: &ConditionalBatch,
        objective: Objective,
    ) -> f64 {
        let s = regression_step(model, Some(net), x.view(), y.view(), batch, objective, 3.0).unwrap();
        match objective {
            Objective::Snl => s.snl,
            Objective::Nce => -s.nce_loss.unwrap(),
        }
    }

    #[test]
    fn step_gradients_match_finite_differences() {
        for objective in [Objective::Snl, Objective::Nce] {
            let mut model = ConditionalEnergyModel::new(BaseDistribution::none(), &mut stream(2, 0));
            let mut net = NormalizerNet::new(&mut stream(2, 1));
            let (x, y, batch) = frozen_batch(4, 5, 3);
            let s = regression_step(&model, Some(&net), x.view(), y.view(), &batch, objective, 3.0).unwrap();
            let eps = 1e-5;
            let mut worst: f64 = 0.0;
            for idx in (0..model.params.len()).step_by(97) {
                let orig = model.params[idx];
                model.params[idx] = orig + eps;
                let up = objective_value(&model, &net, &x, &y, &batch, objective);
                model.params[idx] = orig - eps;
                let down = objective_value(&model, &net, &x, &y, &batch, objective);
                model.params[idx] = orig;
                let fd = (up - down) / (2.0 * eps);
                worst = worst.max((fd - s.grad_theta[idx]).abs() / fd.abs().max(1e-4));
            }
            let gphi = s.grad_phi.clone().unwrap();
            for idx in 0..net.params.len() {
                let orig = net.params[idx];
                net.params[idx] = orig + eps;
                let up = objective_value(&model, &net, &x, &y, &batch, objective);
                net.params[idx] = orig - eps;
                let down = objective_value(&model, &net, &x, &y, &batch, objective);
                net.params[idx] = orig;
                let fd = (up - down) / (2.0 * eps);
                worst = worst.max((fd - gphi[idx]).abs() / fd.abs().max(1e-4));
            }
            assert!(worst < 1e-5, "{objective:?}: {worst}");
        }
    }

    #[test]
    fn step_value_matches_objective() {
        let model = ConditionalEnergyModel::new(BaseDistribution::none(), &mut stream(4, 0));
        let net = NormalizerNet::new(&mut stream(4, 1));
        let (x, y, batch) = frozen_batch(3, 6, 5);
        let s = regression_step(&model, Some(&net), x.view(), y.view(), &batch, Objective::Snl, 1.0).unwrap();
        let b = net.forward(model.features(x.view()).unwrap().view()).unwrap();
        let direct = snl_regression_objective(&model, b.view(), x.view(), y.view(), &batch).unwrap();
        assert!((s.snl - direct).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_keep_initial_parameters() {
        let data = crate::datasets::regression_split(1, 0).unwrap();
        let cfg = RegressionConfig {
            epochs: 0,
            validation_samples: 10,
            ..RegressionConfig::default()
        };
        let out = train_regression(&cfg, &data).unwrap();
        let fresh = ConditionalEnergyModel::new(BaseDistribution::none(), &mut stream(0, streams::INIT));
        assert_eq!(out.state.model, fresh);
        assert!(out.history.is_empty());
    }

    #[test]
    fn normalizer_training_tightens_the_sandwich() {
        let oracle = BilinearOracle::new(1.0);
        let mut net = NormalizerNet::new(&mut stream(7, 0));
        let mut opt = OptimizerConfig::default().build(net.params().len());
        let q = Proposal::StandardGaussian { dim: 1 };
        let mut rng = stream(7, 1);
        let feats = |x: ArrayView1<f64>| {
            let mut h = Array2::zeros((x.len(), FEATURE_DIM));
            h.column_mut(0).assign(&x);
            h.column_mut(1).assign(&x.mapv(|v| v * v));
            h
        };
        let held_out = Array2::from_shape_fn((50, 2), |(i, k)| if k == 0 { -1.5 + 3.0 * i as f64 / 49.0 } else { 0.1 });
        let mut gaps = Vec::new();
        for window in 0..5 {
            let r = eval_regression(
                &oracle,
                net.forward(feats(held_out.column(0)).view()).unwrap().view(),
                held_out.view(),
                &q,
                20000,
                &mut stream(7, 2),
            )
            .unwrap();
            gaps.push(r.l_is - r.l_snl);
            for t in 0..20 {
                let x = q.sample(&mut rng, 32).column(0).to_owned();
                let h = feats(x.view());
                let b = net.forward(h.view()).unwrap();
                let zeros = Array2::zeros((32, FEATURE_DIM));
                let batch = ConditionalProposal::Fixed(q.clone())
                    .draw(zeros.view(), x.view(), &mut rng, 64)
                    .unwrap();
                let db = regression_b_gradient(&oracle, b.view(), x.view(), &batch).unwrap();
                let g = net.weighted_gradient(h.view(), db.view()).unwrap();
                let lr = 5e-3 / (1.0 + (window * 20 + t) as f64 / 50.0);
                opt.step(net.params_mut(), &g, lr).unwrap();
            }
        }
        for pair in gaps.windows(2) {
            assert!(pair[1] < pair[0], "{gaps:?}");
        }
    }

    #[test]
    fn config_problems_are_listed() {
        let cfg = RegressionConfig {
            proposal: "flow".into(),
            batch_size: 0,
            ..RegressionConfig::default()
        };
        assert_eq!(cfg.problems().len(), 2);
    }
}
