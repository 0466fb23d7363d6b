//! Small numerical helpers shared by the checks.

/// Least-squares slope of `ln y` against `ln x`, using only positive pairs.
/// Returns `None` with fewer than two usable points.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0 && a.is_finite() && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    linear_fit(&pts).map(|(slope, _)| slope)
}

/// Ordinary least-squares line through `(x, y)` pairs: `(slope, intercept)`.
pub fn linear_fit(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Eight-point Gauss-Legendre rule mapped to `[0, 1]`: `(node, weight)` pairs.
pub fn gauss_legendre_unit() -> [(f64, f64); 8] {
    const X: [f64; 4] = [
        0.183_434_642_495_649_8,
        0.525_532_409_916_329_0,
        0.796_666_477_413_626_7,
        0.960_289_856_497_536_3,
    ];
    const W: [f64; 4] = [
        0.362_683_783_378_362_0,
        0.313_706_645_877_887_3,
        0.222_381_034_453_374_5,
        0.101_228_536_290_376_3,
    ];
    let mut out = [(0.0, 0.0); 8];
    for k in 0..4 {
        out[2 * k] = (0.5 * (1.0 - X[k]), 0.5 * W[k]);
        out[2 * k + 1] = (0.5 * (1.0 + X[k]), 0.5 * W[k]);
    }
    out
}

/// Root mean square of a slice (0 for an empty slice).
pub fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let x = [0.1, 0.01, 0.001];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powi(4)).collect();
        assert!((loglog_slope(&x, &y).unwrap() - 4.0).abs() < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn quadrature_integrates_degree_15() {
        let q = gauss_legendre_unit();
        let s: f64 = q.iter().map(|(x, w)| w * x.powi(15)).sum();
        assert!((s - 1.0 / 16.0).abs() < 1e-14);
        let total: f64 = q.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-14);
    }
}
