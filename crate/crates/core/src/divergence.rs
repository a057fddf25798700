//! Generalised Kullback-Leibler divergence between un-normalised densities:
//! `KL(f1 ‖ f2) = ∫ f1 log(f1/f2) + ∫ f2 - ∫ f1`.

use ndarray::{Array1, Array2};

use crate::error::{Result, SnlError};
use crate::numeric::golden_section_max;

/// Where and how the integrals are evaluated.
#[derive(Clone, Debug, PartialEq)]
pub enum Quadrature {
    /// Plain sum over every point of a finite domain.
    Discrete(Array2<f64>),
    /// Trapezoid rule on `n` equally spaced nodes of `[lo, hi]`.
    Grid1D { lo: f64, hi: f64, n: usize },
    /// Tensor-product trapezoid rule on an `n × n` grid over a box.
    Grid2D { lo: [f64; 2], hi: [f64; 2], n: usize },
}

impl Quadrature {
    /// Nodes (one per row) and their weights.
    pub fn nodes(&self) -> Result<(Array2<f64>, Array1<f64>)> {
        match self {
            Quadrature::Discrete(points) => {
                if points.nrows() == 0 {
                    return Err(SnlError::EmptyBatch("quadrature points"));
                }
                Ok((points.clone(), Array1::ones(points.nrows())))
            }
            Quadrature::Grid1D { lo, hi, n } => {
                let (x, w) = trapezoid(*lo, *hi, *n)?;
                Ok((x.insert_axis(ndarray::Axis(1)), w))
            }
            Quadrature::Grid2D { lo, hi, n } => {
                let (x0, w0) = trapezoid(lo[0], hi[0], *n)?;
                let (x1, w1) = trapezoid(lo[1], hi[1], *n)?;
                let mut pts = Array2::zeros((n * n, 2));
                let mut w = Array1::zeros(n * n);
                for i in 0..*n {
                    for j in 0..*n {
                        let k = i * n + j;
                        pts[[k, 0]] = x0[i];
                        pts[[k, 1]] = x1[j];
                        w[k] = w0[i] * w1[j];
                    }
                }
                Ok((pts, w))
            }
        }
    }
}

fn trapezoid(lo: f64, hi: f64, n: usize) -> Result<(Array1<f64>, Array1<f64>)> {
    if n < 2 || !(hi > lo) {
        return Err(SnlError::Domain(format!(
            "trapezoid grid needs n >= 2 and lo < hi, got n={n}, [{lo}, {hi}]"
        )));
    }
    let h = (hi - lo) / (n - 1) as f64;
    let x = Array1::from_shape_fn(n, |i| lo + h * i as f64);
    let mut w = Array1::from_elem(n, h);
    w[0] = h / 2.0;
    w[n - 1] = h / 2.0;
    Ok((x, w))
}

/// `KL(f1 ‖ f2)` for non-negative densities given through their logarithms.
/// Returns `+∞` when `f2` vanishes somewhere `f1` has mass.
pub fn generalized_kl(
    log_f1: &dyn Fn(ndarray::ArrayView1<f64>) -> f64,
    log_f2: &dyn Fn(ndarray::ArrayView1<f64>) -> f64,
    quadrature: &Quadrature,
) -> Result<f64> {
    let (pts, w) = quadrature.nodes()?;
    let mut total = 0.0;
    for (row, wi) in pts.rows().into_iter().zip(w.iter()) {
        let l1 = log_f1(row);
        let l2 = log_f2(row);
        let f1 = l1.exp();
        let f2 = l2.exp();
        if f1 > 0.0 && f2 == 0.0 {
            return Ok(f64::INFINITY);
        }
        let cross = if f1 > 0.0 { f1 * (l1 - l2) } else { 0.0 };
        total += wi * (cross + f2 - f1);
    }
    Ok(total)
}

/// `min_{c>0} KL(f1 ‖ c f2)` found by a line search over `log c`, returned
/// with the minimising `c`. For normalised `f1` this equals the ordinary KL
/// between the normalised pair.
pub fn min_scaled_kl(
    log_f1: &dyn Fn(ndarray::ArrayView1<f64>) -> f64,
    log_f2: &dyn Fn(ndarray::ArrayView1<f64>) -> f64,
    quadrature: &Quadrature,
    log_c_range: (f64, f64),
) -> Result<(f64, f64)> {
    let objective = |log_c: f64| -> f64 {
        let shifted = |x: ndarray::ArrayView1<f64>| log_f2(x) + log_c;
        -generalized_kl(log_f1, &shifted, quadrature).unwrap_or(f64::INFINITY)
    };
    quadrature.nodes()?;
    let (log_c, neg) = golden_section_max(objective, log_c_range.0, log_c_range.1, 1e-10);
    Ok((log_c.exp(), -neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, ArrayView1};

    fn std_normal(x: ArrayView1<f64>) -> f64 {
        -0.5 * x[0] * x[0] - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }

    fn grid() -> Quadrature {
        Quadrature::Grid1D { lo: -12.0, hi: 12.0, n: 2401 }
    }

    #[test]
    fn identical_densities_give_zero() {
        assert!(generalized_kl(&std_normal, &std_normal, &grid()).unwrap().abs() < 1e-14);
    }

    #[test]
    fn scaled_copy_gives_mass_penalty() {
        let scaled = |x: ArrayView1<f64>| std_normal(x) + 1.0;
        let kl = generalized_kl(&std_normal, &scaled, &grid()).unwrap();
        assert!((kl - (std::f64::consts::E - 2.0)).abs() < 1e-9);
    }

    #[test]
    fn min_over_scale_recovers_gaussian_kl() {
        let shifted = |x: ArrayView1<f64>| std_normal(array![x[0] - 1.0].view()) + 0.7;
        let (c, kl) = min_scaled_kl(&std_normal, &shifted, &grid(), (-5.0, 5.0)).unwrap();
        assert!((kl - 0.5).abs() < 1e-6, "{kl}");
        assert!((c - (-0.7f64).exp()).abs() < 1e-4);
    }

    #[test]
    fn missing_support_is_infinite() {
        let half = |x: ArrayView1<f64>| if x[0] < 0.0 { f64::NEG_INFINITY } else { 0.0 };
        let full = |_: ArrayView1<f64>| 0.0;
        let q = Quadrature::Discrete(array![[-1.0], [1.0]]);
        assert_eq!(generalized_kl(&full, &half, &q).unwrap(), f64::INFINITY);
        // the other way round the empty region contributes only mass
        assert_eq!(generalized_kl(&half, &full, &q).unwrap(), 1.0);
    }

    #[test]
    fn two_d_grid_integrates_product_gaussian() {
        let q = Quadrature::Grid2D { lo: [-10.0, -10.0], hi: [10.0, 10.0], n: 201 };
        let (pts, w) = q.nodes().unwrap();
        let mass: f64 = pts
            .rows()
            .into_iter()
            .zip(w.iter())
            .map(|(r, w)| w * (-0.5 * r.dot(&r)).exp() / (2.0 * std::f64::consts::PI))
            .sum();
        assert!((mass - 1.0).abs() < 1e-10);
    }

    #[test]
    fn bad_grid_rejected() {
        assert!(Quadrature::Grid1D { lo: 1.0, hi: 0.0, n: 10 }.nodes().is_err());
        assert!(Quadrature::Grid1D { lo: 0.0, hi: 1.0, n: 1 }.nodes().is_err());
    }
}
