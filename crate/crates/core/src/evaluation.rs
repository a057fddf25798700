//! The log-likelihood sandwich `ℓ_SNL ≤ ℓ ≤ ℓ_IS` on held-out data, and
//! density grids for plotting.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnlError};
use crate::models::{Domain, EnergyModel};
use crate::objectives::{estimate_z, l_is_from, snl_objective, ZEstimate};
use crate::rng::{stream, streams};
use crate::training::Sampler;

/// Both bounds on one split, relative to the base measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: String,
    pub count: usize,
    pub l_snl: f64,
    pub l_snl_se: f64,
    pub l_is: f64,
    pub l_is_se: f64,
    /// `mean log d(x_i)`; add it to get values against Lebesgue measure.
    pub log_base_offset: f64,
    /// `ℓ_SNL` exceeded `ℓ_IS` by more than ten combined standard errors.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub seed: u64,
    pub m: usize,
    pub b: f64,
    pub log_z: f64,
    pub log_z_se: f64,
    pub splits: Vec<SplitReport>,
}

impl EvalReport {
    pub fn split(&self, name: &str) -> Option<&SplitReport> {
        self.splits.iter().find(|s| s.split == name)
    }
}

/// Sandwich on every named split, all sharing one importance batch of
/// size `m` drawn on the evaluation stream of `seed`.
pub fn evaluate(
    model: &dyn EnergyModel,
    b: f64,
    dataset: &str,
    splits: &[(&str, ArrayView2<f64>)],
    sampler: &Sampler,
    m: usize,
    seed: u64,
) -> Result<EvalReport> {
    if m == 0 {
        return Err(SnlError::EmptyBatch("evaluation sample count must be positive"));
    }
    let batch = sampler.batch(&mut stream(seed, streams::EVALUATION), m)?;
    let z = estimate_z(model, &batch)?;
    let reports = splits
        .iter()
        .filter(|(_, data)| data.nrows() > 0)
        .map(|(name, data)| split_report(model, b, name, data.view(), &z))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        dataset: dataset.to_string(),
        seed,
        m: batch.len(),
        b,
        log_z: z.log_mean_weight,
        log_z_se: z.standard_error / z.mean_weight,
        splits: reports,
    })
}

fn split_report(model: &dyn EnergyModel, b: f64, name: &str, data: ArrayView2<f64>, z: &ZEstimate) -> Result<SplitReport> {
    let snl = snl_objective(model, b, data, z)?;
    let l_is = l_is_from(snl.data_term, z)?;
    let l_is_se = z.standard_error / z.mean_weight;
    let l_snl_se = (-b).exp() * z.standard_error;
    let combined = (l_is_se * l_is_se + l_snl_se * l_snl_se).sqrt();
    Ok(SplitReport {
        split: name.to_string(),
        count: data.nrows(),
        l_snl: snl.value,
        l_snl_se,
        l_is,
        l_is_se,
        log_base_offset: model.base().log_densities(data).mean().unwrap_or(0.0),
        flagged: snl.value > l_is + 10.0 * combined,
    })
}

/// Evaluated density on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTable {
    pub header: Vec<&'static str>,
    pub rows: Array2<f64>,
}

/// Energies and log-densities at `resolution` evenly spaced nodes per axis,
/// endpoints included. Rows run over the first axis slowest.
pub fn density_grid(model: &dyn EnergyModel, b: f64, bounds: &[(f64, f64)], resolution: usize) -> Result<GridTable> {
    let dim = match model.domain() {
        Domain::Continuous { dim } if dim == 1 || dim == 2 => dim,
        _ => return Err(SnlError::Unsupported("density grids need a 1D or 2D continuous model".into())),
    };
    if bounds.len() != dim {
        return Err(SnlError::DimensionMismatch {
            expected: dim,
            got: bounds.len(),
            context: "grid bounds",
        });
    }
    if resolution < 2 {
        return Err(SnlError::InvalidConfig("grid resolution must be at least 2".into()));
    }
    if bounds.iter().any(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
        return Err(SnlError::InvalidConfig("grid bounds must be finite with lo < hi".into()));
    }
    let axes: Vec<Array1<f64>> = bounds.iter().map(|&(lo, hi)| Array1::linspace(lo, hi, resolution)).collect();
    let count = resolution.pow(dim as u32);
    let nodes = Array2::from_shape_fn((count, dim), |(r, k)| {
        let idx = if dim == 1 || k == 1 { r % resolution } else { r / resolution };
        axes[k][idx]
    });
    let e = model.energies(nodes.view())?;
    let unnorm = -&e + &model.base().log_densities(nodes.view());
    let mut rows = Array2::zeros((count, dim + 3));
    rows.slice_mut(ndarray::s![.., ..dim]).assign(&nodes);
    rows.column_mut(dim).assign(&e);
    rows.column_mut(dim + 1).assign(&unnorm);
    rows.column_mut(dim + 2).assign(&(unnorm - b));
    let mut header = vec!["x1"];
    if dim == 2 {
        header.push("x2");
    }
    header.extend(["energy", "unnorm_log_density", "log_density_using_b"]);
    Ok(GridTable { header, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{exact_log_likelihood, BernoulliModel, GaussianMeanModel, MlpEnergy};
    use crate::nn::{Activation, MlpShape};
    use crate::proposals::Proposal;
    use crate::BaseDistribution;
    use ndarray::{array, Array2};

    fn gaussian_data(seed: u64) -> Array2<f64> {
        let q = Proposal::StandardGaussian { dim: 1 };
        use crate::proposals::Density;
        q.sample(&mut stream(seed, 0), 1000) + 2.0
    }

    #[test]
    fn zero_model_reports_zero() {
        let model = GaussianMeanModel::new(0.0);
        let data = gaussian_data(0);
        let sampler = Sampler::Draw(Proposal::StandardGaussian { dim: 1 });
        let r = evaluate(&model, 0.0, "g", &[("test", data.view())], &sampler, 500, 0).unwrap();
        let s = r.split("test").unwrap();
        assert_eq!(s.l_snl, 0.0);
        assert_eq!(s.l_is, 0.0);
    }

    #[test]
    fn bounds_are_tight_at_the_optimum() {
        let data = gaussian_data(1);
        let xbar = data.mean().unwrap();
        let model = GaussianMeanModel::new(xbar);
        let b = xbar * xbar / 2.0;
        let sampler = Sampler::Draw(Proposal::StandardGaussian { dim: 1 });
        let r = evaluate(&model, b, "g", &[("test", data.view())], &sampler, 20000, 3).unwrap();
        let s = r.split("test").unwrap();
        let exact = exact_log_likelihood(&model, data.view()).unwrap();
        assert!((s.l_is - exact).abs() < 3.0 * s.l_is_se, "{s:?}");
        assert!((s.l_snl - exact).abs() < 3.0 * s.l_snl_se, "{s:?}");
        assert!(s.l_snl <= s.l_is);
        assert!(!s.flagged);
    }

    #[test]
    fn repeated_evaluations_bracket_the_exact_likelihood() {
        let model = GaussianMeanModel::new(1.0);
        let data = gaussian_data(5);
        let exact = exact_log_likelihood(&model, data.view()).unwrap();
        let sampler = Sampler::Draw(Proposal::StandardGaussian { dim: 1 });
        let b = 0.5 + 0.3;
        let mut above = 0;
        let mut l_is = Vec::new();
        let mut se = Vec::new();
        for seed in 0..200 {
            let r = evaluate(&model, b, "g", &[("test", data.view())], &sampler, 20000, seed).unwrap();
            let s = &r.splits[0];
            above += usize::from(s.l_snl > exact);
            l_is.push(s.l_is);
            se.push(s.l_is_se);
        }
        assert!(above < 2, "{above} of 200 lower bounds above the likelihood");
        let mean = l_is.iter().sum::<f64>() / 200.0;
        let se_mean = (se.iter().map(|v| v * v).sum::<f64>()).sqrt() / 200.0;
        assert!(mean >= exact - 3.0 * se_mean, "{mean} < {exact}");
    }

    #[test]
    fn enumerated_bernoulli_is_exact() {
        let model = BernoulliModel::new(0.4);
        let data = array![[1.0], [0.0], [1.0]];
        let sampler = Sampler::resolve("enumerate", data.view(), &model.domain()).unwrap();
        let b = crate::numeric::softplus(0.4);
        let r = evaluate(&model, b, "bern", &[("test", data.view())], &sampler, 7, 0).unwrap();
        let exact = exact_log_likelihood(&model, data.view()).unwrap();
        let s = &r.splits[0];
        assert!((s.l_is - exact).abs() < 1e-14);
        assert!((s.l_snl - exact).abs() < 1e-14);
        assert_eq!(r.m, 2);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let model = GaussianMeanModel::new(1.3);
        let data = gaussian_data(2);
        let sampler = Sampler::Draw(Proposal::StandardGaussian { dim: 1 });
        let run = || evaluate(&model, 0.7, "g", &[("test", data.view())], &sampler, 1000, 9).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn grid_row_count_and_energies() {
        let shape = MlpShape::new(vec![2, 8, 1], Activation::Tanh).unwrap();
        let model = MlpEnergy::new(shape, BaseDistribution::none(), &mut stream(0, 0)).unwrap();
        let g = density_grid(&model, 0.3, &[(-4.0, 4.0), (-4.0, 4.0)], 200).unwrap();
        assert_eq!(g.rows.nrows(), 40000);
        assert_eq!(g.header, vec!["x1", "x2", "energy", "unnorm_log_density", "log_density_using_b"]);
        for r in [0, 199, 200, 12345, 39999] {
            let row = g.rows.row(r);
            let e = model.energy(row.slice(ndarray::s![..2])).unwrap();
            assert_eq!(row[2], e);
            assert_eq!(row[4], row[3] - 0.3);
        }
        assert_eq!((g.rows[[1, 0]], g.rows[[1, 1]]), (-4.0, -4.0 + 8.0 / 199.0));
    }

    #[test]
    fn gaussian_grid_integrates_to_one() {
        let model = GaussianMeanModel::new(1.0);
        let g = density_grid(&model, 0.5, &[(-10.0, 12.0)], 4001).unwrap();
        let h = 22.0 / 4000.0;
        let p = g.rows.column(3).mapv(f64::exp);
        let integral = h * (p.sum() - 0.5 * (p[0] + p[4000]));
        assert!((integral - 1.0).abs() < 1e-3);
    }

    #[test]
    fn grid_rejects_discrete_and_bad_bounds() {
        assert!(density_grid(&BernoulliModel::new(0.0), 0.0, &[(0.0, 1.0)], 10).is_err());
        let model = GaussianMeanModel::new(0.0);
        assert!(density_grid(&model, 0.0, &[(1.0, 0.0)], 10).is_err());
        assert!(density_grid(&model, 0.0, &[(0.0, 1.0), (0.0, 1.0)], 10).is_err());
    }
}
