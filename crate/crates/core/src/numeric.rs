//! Small numerically careful helpers shared by the estimators.

/// `log Σ exp(v)`; `-inf` for an empty slice or when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `log((1/n) Σ exp(v))`.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    log_sum_exp(values) - (values.len() as f64).ln()
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x) = -softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (denominator `n - 1`); zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Golden-section search for the maximiser of a unimodal function on `[lo, hi]`.
///
/// Returns `(argmax, max)`. Iterates until the bracket is narrower than `tol`.
pub fn golden_section_max<F>(mut f: F, lo: f64, hi: f64, tol: f64) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// Maximiser of a concave function on `[lo, hi]` from its derivative, by
/// bisection on the sign change. Returns an endpoint if the derivative does
/// not change sign.
pub fn concave_argmax<F>(mut derivative: F, lo: f64, hi: f64, tol: f64) -> f64
where
    F: FnMut(f64) -> f64,
{
    let (mut a, mut b) = (lo, hi);
    if derivative(a) <= 0.0 {
        return a;
    }
    if derivative(b) >= 0.0 {
        return b;
    }
    while b - a > tol {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if derivative(mid) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_handles_large_values() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(&v) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn log_mean_exp_of_zeros_is_zero() {
        assert_eq!(log_mean_exp(&[0.0; 17]), 0.0);
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }

    #[test]
    fn golden_section_finds_parabola_peak() {
        let (x, fx) = golden_section_max(|x| -(x - 1.25) * (x - 1.25) + 3.0, -10.0, 10.0, 1e-10);
        // near the peak f is flat to machine precision within ~sqrt(eps)
        assert!((x - 1.25).abs() < 1e-7);
        assert!((fx - 3.0).abs() < 1e-14);
    }

    #[test]
    fn concave_argmax_reaches_full_precision() {
        let x = concave_argmax(|x| -(x - 0.3), -5.0, 5.0, 0.0);
        assert!((x - 0.3).abs() < 1e-15);
        assert_eq!(concave_argmax(|_| 1.0, -1.0, 2.0, 1e-9), 2.0);
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        assert!((sample_std(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(sample_std(&[5.0]), 0.0);
    }
}
