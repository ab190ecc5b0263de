//! Log-linear rate fits for decaying traces.

/// Points used by [`fit_log_slope`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FitWindow {
    /// Leading fraction of the samples to drop.
    pub skip_fraction: f64,
    /// Samples stop counting once the value falls below `floor * first value in window`.
    pub floor: f64,
    /// Minimum number of points for a fit.
    pub min_points: usize,
}

impl Default for FitWindow {
    fn default() -> Self {
        Self {
            skip_fraction: 0.05,
            floor: 1e-6,
            min_points: 3,
        }
    }
}

/// Ordinary least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Slope of `ln(values)` against `t` over the window; `None` when fewer
/// than `min_points` positive samples remain.
///
/// The window ends at the first non-positive sample or the first one below
/// the floor, so roundoff noise at the end of a fast decay is not fitted.
pub fn fit_log_slope(t: &[f64], values: &[f64], window: &FitWindow) -> Option<f64> {
    let start = ((t.len() as f64) * window.skip_fraction).floor() as usize;
    let first = *values.get(start)?;
    if !(first > 0.0) {
        return None;
    }
    let cutoff = first * window.floor;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (&ti, &v) in t[start..].iter().zip(&values[start..]) {
        if !(v > 0.0 && v >= cutoff && v.is_finite()) {
            break;
        }
        xs.push(ti);
        ys.push(v.ln());
    }
    if xs.len() < window.min_points.max(2) {
        return None;
    }
    linear_fit(&xs, &ys).map(|(s, _)| s)
}
