//! Linear-interpolation quantiles (the inclusive estimator, `numpy`'s default).

/// Quantile of an already sorted sample, `q` in `[0, 1]`.
///
/// Position `q * (n - 1)` is interpolated between its neighbours. Returns
/// `None` for an empty sample.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    let n = sorted.len();
    if n == 0 {
        return None;
    }
    let q = q.clamp(0.0, 1.0);
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    })
}

/// Quantile of an unsorted sample.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

/// Median with the usual even-count midpoint.
pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_of_one_to_eight() {
        let v: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.25), Some(2.75));
        assert_eq!(quantile(&v, 0.5), Some(4.5));
        assert_eq!(quantile(&v, 0.75), Some(6.25));
    }

    #[test]
    fn median_even_and_single() {
        assert_eq!(median(&[4.0, 10.0]), Some(7.0));
        assert_eq!(median(&[3.0]), Some(3.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn extremes() {
        let v = [5.0, -1.0, 3.0];
        assert_eq!(quantile(&v, 0.0), Some(-1.0));
        assert_eq!(quantile(&v, 1.0), Some(5.0));
    }
}
