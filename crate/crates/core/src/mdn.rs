//! Mixture density network: a Gaussian mixture over scalar `y` whose
//! weights, means and scales are produced from features `h` by three small
//! heads (`in → 10 → K`, ReLU).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnlError};
use crate::nn::{Activation, MlpShape};
use crate::numeric::log_sum_exp;
use crate::optim::OptimizerConfig;
use crate::rng::SnlRng;

pub const SCALE_FLOOR: f64 = 1e-3;
pub const HEAD_WIDTH: usize = 10;
const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mdn {
    head: MlpShape,
    components: usize,
    params: Vec<f64>,
}

/// Per-row mixture parameters, each `n × K`.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub log_weights: Array2<f64>,
    pub means: Array2<f64>,
    pub scales: Array2<f64>,
}

impl Mixture {
    pub fn len(&self) -> usize {
        self.means.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.means.nrows() == 0
    }

    /// `log q(y | row)`.
    pub fn log_density(&self, row: usize, y: f64) -> f64 {
        let terms: Vec<f64> = (0..self.means.ncols())
            .map(|k| self.log_weights[[row, k]] + normal_log_pdf(y, self.means[[row, k]], self.scales[[row, k]]))
            .collect();
        log_sum_exp(&terms)
    }

    /// `m` draws for row `row`.
    pub fn sample(&self, row: usize, rng: &mut SnlRng, m: usize) -> Array1<f64> {
        let k = self.means.ncols();
        let weights: Vec<f64> = (0..k).map(|j| self.log_weights[[row, j]].exp()).collect();
        Array1::from_shape_fn(m, |_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut j = k - 1;
            for (idx, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    j = idx;
                    break;
                }
            }
            let z: f64 = rng.sample(StandardNormal);
            self.means[[row, j]] + self.scales[[row, j]] * z
        })
    }
}

fn normal_log_pdf(y: f64, mu: f64, sigma: f64) -> f64 {
    let z = (y - mu) / sigma;
    -0.5 * z * z - sigma.ln() - LOG_SQRT_2PI
}

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let lse = log_sum_exp(row.as_slice().expect("row-major"));
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl Mdn {
    pub fn new(input_dim: usize, components: usize, rng: &mut SnlRng) -> Result<Self> {
        if components == 0 {
            return Err(SnlError::InvalidConfig("mixture needs at least one component".into()));
        }
        let head = MlpShape::new(vec![input_dim, HEAD_WIDTH, components], Activation::Relu)?;
        let mut params = Vec::with_capacity(3 * head.num_params());
        for _ in 0..3 {
            params.extend(head.init(rng));
        }
        Ok(Self {
            head,
            components,
            params,
        })
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn input_dim(&self) -> usize {
        self.head.input_dim()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight-matrix entries across the three heads.
    pub fn weight_count(&self) -> usize {
        3 * self.head.weight_count()
    }

    fn head_params(&self, i: usize) -> &[f64] {
        let p = self.head.num_params();
        &self.params[i * p..(i + 1) * p]
    }

    /// Start the means at quantiles of `y` and the scales at its spread.
    pub fn calibrate(&mut self, y: ArrayView1<f64>) {
        if y.is_empty() {
            return;
        }
        let mut sorted = y.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let var = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let spread = var.sqrt().max(10.0 * SCALE_FLOOR);
        let p = self.head.num_params();
        let bias = self.head.output_bias_index();
        for k in 0..self.components {
            let q = (k + 1) as f64 / (self.components + 1) as f64;
            let idx = ((q * n as f64) as usize).min(n - 1);
            self.params[p + bias + k] = sorted[idx];
            self.params[2 * p + bias + k] = (spread / self.components as f64 - SCALE_FLOOR).max(SCALE_FLOOR).ln();
        }
    }

    pub fn mixture(&self, h: ArrayView2<f64>) -> Result<Mixture> {
        let logits = self.head.forward(self.head_params(0), h)?;
        let means = self.head.forward(self.head_params(1), h)?;
        let raw = self.head.forward(self.head_params(2), h)?;
        Ok(Mixture {
            log_weights: log_softmax_rows(&logits),
            means,
            scales: raw.mapv(|s| SCALE_FLOOR + s.exp()),
        })
    }

    /// `log q(y_i | h_i)` per row.
    pub fn log_densities(&self, h: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_rows(&h, &y)?;
        let mix = self.mixture(h)?;
        Ok(Array1::from_shape_fn(y.len(), |i| mix.log_density(i, y[i])))
    }

    /// Mean negative log-likelihood and its gradient.
    pub fn loss_and_grad(&self, h: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<(f64, Vec<f64>)> {
        check_rows(&h, &y)?;
        let n = y.len();
        let k = self.components;
        let traces = [0, 1, 2].map(|i| self.head.forward_trace(self.head_params(i), h));
        let [t_logit, t_mean, t_scale] = traces;
        let (t_logit, t_mean, t_scale) = (t_logit?, t_mean?, t_scale?);
        let log_w = log_softmax_rows(t_logit.output());
        let means = t_mean.output();
        let raw = t_scale.output();
        let mut g_logit = Array2::zeros((n, k));
        let mut g_mean = Array2::zeros((n, k));
        let mut g_scale = Array2::zeros((n, k));
        let mut loss = 0.0;
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let comps: Vec<f64> = (0..k)
                .map(|j| log_w[[i, j]] + normal_log_pdf(y[i], means[[i, j]], SCALE_FLOOR + raw[[i, j]].exp()))
                .collect();
            let lse = log_sum_exp(&comps);
            loss -= lse * inv_n;
            for j in 0..k {
                let r = (comps[j] - lse).exp();
                let sigma = SCALE_FLOOR + raw[[i, j]].exp();
                let d = y[i] - means[[i, j]];
                g_logit[[i, j]] = (log_w[[i, j]].exp() - r) * inv_n;
                g_mean[[i, j]] = -r * d / (sigma * sigma) * inv_n;
                g_scale[[i, j]] = r * (1.0 / sigma - d * d / (sigma * sigma * sigma)) * (sigma - SCALE_FLOOR) * inv_n;
            }
        }
        let p = self.head.num_params();
        let mut grad = vec![0.0; 3 * p];
        for (i, (trace, g)) in [(&t_logit, &g_logit), (&t_mean, &g_mean), (&t_scale, &g_scale)]
            .into_iter()
            .enumerate()
        {
            self.head
                .backward(self.head_params(i), trace, g.view(), &mut grad[i * p..(i + 1) * p], false);
        }
        Ok((loss, grad))
    }

    /// Maximum-likelihood fit with Adam over shuffled mini-batches. Returns the
    /// mean training loss per epoch. A non-finite loss or gradient stops the
    /// fit and restores the parameters from before the failing step.
    pub fn fit(
        &mut self,
        h: ArrayView2<f64>,
        y: ArrayView1<f64>,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        rng: &mut SnlRng,
    ) -> Result<Vec<f64>> {
        check_rows(&h, &y)?;
        if batch_size == 0 {
            return Err(SnlError::InvalidConfig("batch size must be positive".into()));
        }
        let mut opt = OptimizerConfig::default().build(self.params.len());
        let mut order: Vec<usize> = (0..y.len()).collect();
        let mut history = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for chunk in order.chunks(batch_size) {
                let hb = h.select(Axis(0), chunk);
                let yb = y.select(Axis(0), chunk);
                let (loss, grad) = self.loss_and_grad(hb.view(), yb.view())?;
                if !loss.is_finite() {
                    return Ok(history);
                }
                let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
                let snapshot = self.params.clone();
                if opt.step(&mut self.params, &descent, learning_rate).is_err() {
                    self.params = snapshot;
                    return Ok(history);
                }
                total += loss * chunk.len() as f64;
            }
            history.push(total / y.len() as f64);
        }
        Ok(history)
    }
}

fn check_rows(h: &ArrayView2<f64>, y: &ArrayView1<f64>) -> Result<()> {
    if y.is_empty() {
        return Err(SnlError::EmptyBatch("mixture targets"));
    }
    if h.nrows() != y.len() {
        return Err(SnlError::DimensionMismatch {
            expected: h.nrows(),
            got: y.len(),
            context: "mixture inputs and targets",
        });
    }
    Ok(())
}

/// Per-row proposal samples `n × m` with their log-densities.
pub fn sample_rows(mix: &Mixture, rng: &mut SnlRng, m: usize) -> (Array2<f64>, Array2<f64>) {
    let n = mix.len();
    let mut ys = Array2::zeros((n, m));
    let mut log_q = Array2::zeros((n, m));
    for i in 0..n {
        let draws = mix.sample(i, rng, m);
        for (j, y) in draws.iter().enumerate() {
            ys[[i, j]] = *y;
            log_q[[i, j]] = mix.log_density(i, *y);
        }
    }
    (ys, log_q)
}
