//! Joint stochastic ascent of `(θ, b)` on the SNL objective, or descent on
//! the NCE loss, over mini-batches with fresh proposal samples every step.

use std::time::Instant;

use ndarray::{Array1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::DatasetSplit;
use crate::error::{Result, SnlError};
use crate::models::{Domain, EnergyModel};
use crate::objectives::{estimate_z, nce_step, snl_objective, snl_step, ImportanceBatch};
use crate::optim::OptimizerConfig;
use crate::proposals::{sample_and_score, Density, Proposal};
use crate::rng::{stream, streams, SnlRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Snl,
    Nce,
}

impl Objective {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "snl" => Ok(Objective::Snl),
            "nce" => Ok(Objective::Nce),
            other => Err(SnlError::UnknownName {
                kind: "objective",
                name: other.to_string(),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Snl => "snl",
            Objective::Nce => "nce",
        }
    }
}

/// The model together with its log-normaliser estimate `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct SnlState<M> {
    pub model: M,
    pub b: f64,
}

/// Where importance samples come from during training.
#[derive(Clone, Debug, PartialEq)]
pub enum Sampler {
    /// `M` fresh draws per step.
    Draw(Proposal),
    /// Every point of a finite domain, scored under a uniform proposal.
    Enumerate(ImportanceBatch),
}

impl Sampler {
    /// Resolve a proposal kind against the training data. `"enumerate"`
    /// requires a model with a finite domain.
    pub fn resolve(kind: &str, train: ArrayView2<f64>, domain: &Domain) -> Result<Self> {
        if kind == "enumerate" {
            return match domain {
                Domain::Discrete { points } => Ok(Sampler::Enumerate(uniform_enumeration(points.clone())?)),
                Domain::Continuous { .. } => Err(SnlError::InvalidConfig(
                    "enumeration needs a model with a finite domain".into(),
                )),
            };
        }
        Ok(Sampler::Draw(Proposal::from_kind(kind, train)?))
    }

    pub fn batch(&self, rng: &mut SnlRng, m: usize) -> Result<ImportanceBatch> {
        match self {
            Sampler::Draw(p) => sample_and_score(p, rng, m),
            Sampler::Enumerate(b) => Ok(b.clone()),
        }
    }

    /// Density used by NCE to score data points.
    fn density_at(&self, xs: ArrayView2<f64>) -> Array1<f64> {
        match self {
            Sampler::Draw(p) => p.log_densities(xs),
            Sampler::Enumerate(b) => Array1::from_elem(xs.nrows(), b.proposal_log_densities()[0]),
        }
    }
}

fn uniform_enumeration(points: ndarray::Array2<f64>) -> Result<ImportanceBatch> {
    let k = points.nrows();
    ImportanceBatch::new(points, Array1::from_elem(k, -(k as f64).ln()))
}

/// Hyperparameters of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epochs at the start that use `warmup_learning_rate` instead.
    pub warmup_epochs: usize,
    pub warmup_learning_rate: f64,
    pub batch_size: usize,
    pub proposal_samples: usize,
    /// Proposal kind, or `"enumerate"` for finite domains.
    pub proposal: String,
    pub optimizer: OptimizerConfig,
    /// NCE noise ratio `ν`; defaults to `M / n_b`.
    pub nce_ratio: Option<f64>,
    /// Samples used to initialise `b`.
    pub init_b_samples: usize,
    /// Consecutive failed steps tolerated before aborting.
    pub divergence_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Snl,
            epochs: 25,
            learning_rate: 1e-3,
            warmup_epochs: 0,
            warmup_learning_rate: 1e-3,
            batch_size: 128,
            proposal_samples: 1024,
            proposal: "standard_gaussian".into(),
            optimizer: OptimizerConfig::default(),
            nce_ratio: None,
            init_b_samples: 10_000,
            divergence_patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Every problem with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs == 0 && self.warmup_epochs > 0 {
            out.push("warmup_epochs exceeds epochs".to_string());
        }
        if self.warmup_epochs > self.epochs {
            out.push(format!("warmup_epochs ({}) exceeds epochs ({})", self.warmup_epochs, self.epochs));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("warmup_learning_rate", self.warmup_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("proposal_samples", self.proposal_samples),
            ("init_b_samples", self.init_b_samples),
            ("divergence_patience", self.divergence_patience),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        if let Some(nu) = self.nce_ratio {
            if !(nu > 0.0 && nu.is_finite()) {
                out.push(format!("nce_ratio must be positive, got {nu}"));
            }
        }
        if let OptimizerConfig::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                out.push("adam needs 0 <= beta1, beta2 < 1 and eps > 0".to_string());
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
        self.nce_ratio
            .unwrap_or(self.proposal_samples as f64 / self.batch_size as f64)
    }

    fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.warmup_learning_rate
        } else {
            self.learning_rate
        }
    }
}

/// `log Ẑ` at the current parameters.
pub fn init_b(model: &dyn EnergyModel, sampler: &Sampler, m: usize, rng: &mut SnlRng) -> Result<f64> {
    if m == 0 {
        return Err(SnlError::EmptyBatch("b initialisation"));
    }
    let batch = sampler.batch(rng, m)?;
    let z = estimate_z(model, &batch)?;
    if z.log_mean_weight == f64::NEG_INFINITY {
        return Err(SnlError::DegenerateProposal);
    }
    Ok(z.log_mean_weight)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean of the per-step SNL estimates over the epoch.
    pub train_snl: f64,
    /// SNL on the validation split with a fixed importance batch.
    pub val_snl: f64,
    pub b: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub state: SnlState<M>,
    /// State after the epoch with the highest validation SNL.
    pub best: SnlState<M>,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

fn is_numeric_failure(e: &SnlError) -> bool {
    matches!(
        e,
        SnlError::NonFiniteEnergy { .. }
            | SnlError::NonFiniteObjective { .. }
            | SnlError::NonFiniteGradient { .. }
            | SnlError::DegenerateProposal
    )
}

fn diagnostics(model: &dyn EnergyModel, data: ArrayView2<f64>, batch: &ImportanceBatch) -> (f64, f64) {
    let fold_max = |e: &Array1<f64>| e.iter().copied().fold(f64::NEG_INFINITY, |a, b| if b.is_nan() || b > a { b } else { a });
    let max_data = model.energies(data).map(|e| fold_max(&e)).unwrap_or(f64::NAN);
    let (max_is, min_lw) = match model.energies(batch.samples().view()) {
        Ok(e) => {
            let lw = -&e + &model.base().log_densities(batch.samples().view()) - batch.proposal_log_densities();
            (fold_max(&e), lw.iter().copied().fold(f64::INFINITY, f64::min))
        }
        Err(_) => (f64::NAN, f64::NAN),
    };
    (fold_max(&Array1::from(vec![max_data, max_is])), min_lw)
}

/// Validation SNL with a fixed importance batch; NaN without validation data.
pub fn validation_snl(model: &dyn EnergyModel, b: f64, val: ArrayView2<f64>, batch: &ImportanceBatch) -> f64 {
    if val.nrows() == 0 {
        return f64::NAN;
    }
    estimate_z(model, batch)
        .and_then(|z| snl_objective(model, b, val, &z))
        .map(|v| v.value)
        .unwrap_or(f64::NAN)
}

/// Train `model` on `data.train`. The initial `b` is `log Ẑ` at the initial
/// parameters; each step draws a fresh importance batch and updates `θ` and
/// `b` with one optimiser. Reproducible for a fixed `config.seed`.
pub fn train_density<M: EnergyModel + Clone>(
    model: M,
    config: &TrainConfig,
    data: &DatasetSplit,
) -> Result<TrainOutcome<M>> {
    config.validate()?;
    let train = data.train.view();
    if train.nrows() == 0 {
        return Err(SnlError::EmptyBatch("training data"));
    }
    let sampler = Sampler::resolve(&config.proposal, train, &model.domain())?;
    let seed = config.seed;
    let b0 = init_b(&model, &sampler, config.init_b_samples, &mut stream(seed, streams::INIT))?;
    let mut state = SnlState { model, b: b0 };
    let val_batch = sampler.batch(&mut stream(seed, streams::VALIDATION), config.proposal_samples)?;
    let mut best = state.clone();
    let mut best_val = validation_snl(&state.model, state.b, data.validation.view(), &val_batch);
    let mut best_epoch = 0;

    let n_theta = state.model.num_params();
    let mut optimizer = config.optimizer.build(n_theta + 1);
    let mut batch_rng = stream(seed, streams::MINIBATCH);
    let mut proposal_rng = stream(seed, streams::PROPOSAL);
    let mut order: Vec<usize> = (0..train.nrows()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut failures = 0;
    let mut step = 0;
    let nu = config.nu();
    let mut flat = vec![0.0; n_theta + 1];
    let started = Instant::now();

    for epoch in 0..config.epochs {
        let lr = config.lr_for_epoch(epoch);
        order.shuffle(&mut batch_rng);
        let mut snl_sum = 0.0;
        let mut snl_count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let x = train.select(Axis(0), chunk);
            let batch = sampler.batch(&mut proposal_rng, config.proposal_samples)?;
            let result = match config.objective {
                Objective::Snl => snl_step(&state.model, state.b, x.view(), &batch).map(|s| (s.value.value, s.gradient)),
                Objective::Nce => {
                    let noise_density = NoiseDensity { sampler: &sampler, dim: x.ncols() };
                    nce_step(&state.model, state.b, x.view(), &batch, &noise_density, nu).and_then(|(_, g)| {
                        let z = estimate_z(&state.model, &batch)?;
                        let v = snl_objective(&state.model, state.b, x.view(), &z)?;
                        Ok((v.value, g))
                    })
                }
            };
            let (value, grad) = match result {
                Ok(r) => r,
                Err(e) if is_numeric_failure(&e) => {
                    failures += 1;
                    if failures >= config.divergence_patience {
                        let (max_energy, min_log_weight) = diagnostics(&state.model, x.view(), &batch);
                        return Err(SnlError::Diverged {
                            step,
                            consecutive: failures,
                            max_energy,
                            min_log_weight,
                        });
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            failures = 0;
            flat[..n_theta].copy_from_slice(state.model.params());
            flat[n_theta] = state.b;
            let mut g = grad.grad_theta.to_vec();
            g.push(grad.grad_b);
            optimizer.step(&mut flat, &g, lr)?;
            state.model.params_mut().copy_from_slice(&flat[..n_theta]);
            state.b = flat[n_theta];
            if value.is_finite() {
                snl_sum += value;
                snl_count += 1;
            }
        }
        let val_snl = validation_snl(&state.model, state.b, data.validation.view(), &val_batch);
        if val_snl > best_val || best_val.is_nan() {
            best_val = val_snl;
            best = state.clone();
            best_epoch = epoch + 1;
        }
        history.push(EpochMetrics {
            epoch: epoch + 1,
            train_snl: if snl_count > 0 { snl_sum / snl_count as f64 } else { f64::NAN },
            val_snl,
            b: state.b,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome {
        state,
        best,
        best_epoch,
        history,
    })
}

/// Adapter exposing the sampler's density to NCE.
struct NoiseDensity<'a> {
    sampler: &'a Sampler,
    dim: usize,
}

impl Density for NoiseDensity<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: ndarray::ArrayView1<f64>) -> f64 {
        self.sampler.density_at(x.insert_axis(Axis(0)))[0]
    }

    fn log_densities(&self, xs: ArrayView2<f64>) -> Array1<f64> {
        self.sampler.density_at(xs)
    }

    fn sample(&self, rng: &mut SnlRng, n: usize) -> ndarray::Array2<f64> {
        self.sampler.batch(rng, n).expect("sampler").samples().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BernoulliModel, GaussianMeanModel};
    use ndarray::{array, Array2};

    fn gaussian_split(n: usize, mean: f64, seed: u64) -> DatasetSplit {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(mean, 1.0).unwrap();
        let mut rng = stream(seed, 100);
        let train = Array2::from_shape_fn((n, 1), |_| normal.sample(&mut rng));
        let validation = Array2::from_shape_fn((200, 1), |_| normal.sample(&mut rng));
        DatasetSplit {
            name: "gaussian".into(),
            seed,
            train,
            validation,
            test: Array2::zeros((0, 1)),
        }
    }

    #[test]
    fn init_b_examples() {
        let q = Sampler::Draw(Proposal::StandardGaussian { dim: 1 });
        assert_eq!(init_b(&GaussianMeanModel::new(0.0), &q, 10, &mut stream(0, 0)).unwrap(), 0.0);
        let b = init_b(&GaussianMeanModel::new(1.0), &q, 1_000_000, &mut stream(1, 0)).unwrap();
        assert!((b - 0.5).abs() < 0.01, "{b}");
        let domain = BernoulliModel::new(0.0).domain();
        let e = Sampler::resolve("enumerate", Array2::zeros((1, 1)).view(), &domain).unwrap();
        let b = init_b(&BernoulliModel::new(3f64.ln()), &e, 1, &mut stream(2, 0)).unwrap();
        assert!((b - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn zero_epochs_return_initial_state() {
        let data = gaussian_split(100, 2.0, 3);
        let cfg = TrainConfig {
            epochs: 0,
            proposal: "standard_gaussian".into(),
            init_b_samples: 50,
            ..TrainConfig::default()
        };
        let out = train_density(GaussianMeanModel::new(0.3), &cfg, &data).unwrap();
        assert_eq!(out.state.model.theta(), 0.3);
        assert!(out.history.is_empty());
        assert_eq!(out.state, out.best);
    }

    #[test]
    fn runs_are_reproducible() {
        let data = gaussian_split(300, 1.0, 4);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 50,
            proposal_samples: 64,
            proposal: "fitted_gaussian".into(),
            ..TrainConfig::default()
        };
        let strip = |h: Vec<EpochMetrics>| h.into_iter().map(|m| (m.train_snl, m.val_snl, m.b)).collect::<Vec<_>>();
        let a = train_density(GaussianMeanModel::new(0.0), &cfg, &data).unwrap();
        let b = train_density(GaussianMeanModel::new(0.0), &cfg, &data).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(strip(a.history), strip(b.history));
    }

    #[test]
    fn nce_moves_towards_the_mean() {
        let data = gaussian_split(1000, 1.5, 5);
        let cfg = TrainConfig {
            objective: Objective::Nce,
            epochs: 20,
            learning_rate: 1e-2,
            batch_size: 50,
            proposal_samples: 50,
            proposal: "fitted_gaussian".into(),
            ..TrainConfig::default()
        };
        let out = train_density(GaussianMeanModel::new(0.0), &cfg, &data).unwrap();
        let xbar = data.train.mean().unwrap();
        let theta = out.state.model.theta();
        assert!((theta - xbar).abs() < 0.15, "{theta} vs {xbar}");
        // b tracks log Z_θ = θ²/2
        assert!((out.state.b - theta * theta / 2.0).abs() < 0.1);
    }

    #[test]
    fn invalid_config_lists_every_problem() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 0,
            proposal_samples: 0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.problems().len(), 3);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn enumeration_needs_finite_domain() {
        let domain = GaussianMeanModel::new(0.0).domain();
        assert!(Sampler::resolve("enumerate", array![[0.0]].view(), &domain).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        // an enormous learning rate on SGD sends θ to where e^{θ²/2} overflows
        let data = gaussian_split(100, 30.0, 6);
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e3,
            optimizer: OptimizerConfig::Sgd,
            batch_size: 10,
            proposal_samples: 10,
            proposal: "standard_gaussian".into(),
            init_b_samples: 10,
            ..TrainConfig::default()
        };
        match train_density(GaussianMeanModel::new(0.0), &cfg, &data) {
            Err(SnlError::Diverged { consecutive, .. }) => assert_eq!(consecutive, 5),
            Err(e) => panic!("unexpected error {e}"),
            Ok(o) => panic!("did not diverge: θ = {}, b = {}", o.state.model.theta(), o.state.b),
        }
    }
}
