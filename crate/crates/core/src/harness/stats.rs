use crate::error::{Error, Result};

/// Median with NaNs sorted last; NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Fraction of `flags` that are set.
pub fn frequency(flags: impl IntoIterator<Item = bool>) -> f64 {
    let (mut hits, mut total) = (0usize, 0usize);
    for f in flags {
        hits += f as usize;
        total += 1;
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Ordinary least squares of `ln y` on `ln x`: `(slope, standard error)`.
pub fn fit_loglog_slope(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} x values, {} y values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument("a slope fit needs at least 3 points".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("x values are all equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx.iter().zip(&ly).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let stderr = (sse / (lx.len() - 2) as f64 / sxx).sqrt();
    Ok((slope, stderr))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_examples() {
        let x = [1e3, 4e3, 1.6e4, 6.4e4];
        let y: Vec<f64> = x.iter().map(|v: &f64| v.powf(-0.5)).collect();
        let (s, e) = fit_loglog_slope(&x, &y).unwrap();
        assert!((s + 0.5).abs() < 1e-12 && e < 1e-12);
        let (s, _) = fit_loglog_slope(&x, &[0.3; 4]).unwrap();
        assert!(s.abs() < 1e-12);
        assert!(fit_loglog_slope(&x, &[1.0, 0.0, 1.0, 1.0]).is_err());
        assert!(fit_loglog_slope(&x[..2], &y[..2]).is_err());
    }

    #[test]
    fn slope_stderr_against_textbook_formula() {
        // Points (ln x, ln y) = (0,0), (1,1), (2,3): slope 1.5, intercept -1/6.
        let x = [1.0, 1f64.exp(), 2f64.exp()];
        let y = [1.0, 1f64.exp(), 3f64.exp()];
        let (s, e) = fit_loglog_slope(&x, &y).unwrap();
        assert!((s - 1.5).abs() < 1e-12);
        // residuals 1/6, -1/3, 1/6 -> SSE = 1/6; Sxx = 2.
        assert!((e - (1.0f64 / 6.0 / 1.0 / 2.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn median_and_frequency() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
        assert_eq!(frequency([true, false, false, true]), 0.5);
    }
}
