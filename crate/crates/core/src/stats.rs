//! Small regression helpers shared by the fitters.

use nalgebra::{DMatrix, DVector};

/// Ordinary least squares line `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Standard error of the slope (zero for fewer than three points).
    pub slope_std_error: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> LineFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
        syy += (yi - my) * (yi - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let r = yi - intercept - slope * xi;
            r * r
        })
        .sum();
    // A flat series is fitted perfectly by a zero slope.
    let r_squared = if syy > 0.0 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let slope_std_error = if x.len() > 2 && sxx > 0.0 {
        (ss_res / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    LineFit {
        slope,
        intercept,
        r_squared,
        slope_std_error,
    }
}

/// Weighted least squares line; `w` are inverse variances up to a common factor.
///
/// `r_squared` is the weighted coefficient of determination and the slope
/// error uses the weighted residual variance.
pub fn fit_line_weighted(x: &[f64], y: &[f64], w: &[f64]) -> LineFit {
    assert!(x.len() == y.len() && x.len() == w.len());
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(x, w)| w * x).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(y, w)| w * y).sum::<f64>() / sw;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for ((&xi, &yi), &wi) in x.iter().zip(y).zip(w) {
        sxx += wi * (xi - mx) * (xi - mx);
        sxy += wi * (xi - mx) * (yi - my);
        syy += wi * (yi - my) * (yi - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_res = (syy - slope * sxy).max(0.0);
    let r_squared = if syy > 0.0 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let slope_std_error = if x.len() > 2 && sxx > 0.0 {
        (ss_res / (x.len() as f64 - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    LineFit {
        slope,
        intercept,
        r_squared,
        slope_std_error,
    }
}

/// Linear least squares over arbitrary basis columns; returns coefficients and residual sum of squares.
pub fn least_squares(columns: &[Vec<f64>], y: &[f64]) -> Option<(Vec<f64>, f64)> {
    let rows = y.len();
    let cols = columns.len();
    if rows < cols || cols == 0 {
        return None;
    }
    let a = DMatrix::from_fn(rows, cols, |i, j| columns[j][i]);
    let b = DVector::from_column_slice(y);
    let svd = a.clone().svd(true, true);
    let coef = svd.solve(&b, 1e-14).ok()?;
    let residual = &a * &coef - &b;
    Some((coef.iter().copied().collect(), residual.norm_squared()))
}

pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Batch-means standard error of the mean of a correlated series.
pub fn batch_means(values: &[f64], batches: usize) -> (f64, f64) {
    let batches = batches.min(values.len()).max(1);
    let per = values.len() / batches;
    if per == 0 {
        return mean_and_std_error(values);
    }
    let means: Vec<f64> = (0..batches)
        .map(|b| values[b * per..(b + 1) * per].iter().sum::<f64>() / per as f64)
        .collect();
    mean_and_std_error(&means)
}
