//! Small numerically-stable helpers shared across modules.

/// Stable `log Σ exp(xᵢ)`; `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Sample mean and standard error `s / √n` (zero error for `n < 2`).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Trapezoid rule on a uniform grid with spacing `h`.
pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => h * (0.5 * (values[0] + values[n - 1]) + values[1..n - 1].iter().sum::<f64>()),
    }
}

/// Golden-section search for the minimiser of a unimodal `f` on `[a, b]`.
/// Returns `(argmin, min)` after the bracket shrinks below `tol`.
pub fn golden_section_min<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc <= fd {
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
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Linear interpolation on a uniform grid starting at `t0` with step `h`,
/// clamped to the end values.
pub fn interp_uniform(values: &[f64], t0: f64, h: f64, t: f64) -> f64 {
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let s = ((t - t0) / h).clamp(0.0, (n - 1) as f64);
    let i = (s.floor() as usize).min(n - 2);
    let w = s - i as f64;
    values[i] * (1.0 - w) + values[i + 1] * w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logsumexp_is_stable() {
        assert_relative_eq!(logsumexp(&[1000.0, 1000.0]), 1000.0 + 2f64.ln());
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_relative_eq!(logsumexp(&[-1e4, 0.0]), 0.0);
    }

    #[test]
    fn golden_section_finds_parabola_vertex() {
        let (x, fx) = golden_section_min(|t| (t - 0.3) * (t - 0.3) + 1.0, 0.0, 1.0, 1e-8);
        assert!((x - 0.3).abs() < 1e-7);
        assert_relative_eq!(fx, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn trapezoid_and_interp() {
        let v: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        assert_relative_eq!(trapezoid(&v, 0.1), 0.5, epsilon = 1e-14);
        assert_relative_eq!(interp_uniform(&v, 0.0, 0.1, 0.55), 0.55, epsilon = 1e-14);
        assert_eq!(interp_uniform(&v, 0.0, 0.1, 5.0), 1.0);
    }

    #[test]
    fn standard_error_scaling() {
        let xs: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        let (m, se) = mean_and_se(&xs);
        assert_relative_eq!(m, 0.5);
        assert_relative_eq!(se, (0.25f64 * 100.0 / 99.0 / 100.0).sqrt(), epsilon = 1e-12);
    }
}
