use super::DatagenError;

/// Normalized power-law weights `w_k ∝ k^{-s}` for ranks `k = 1..=n`.
pub fn zipf_weights(n: usize, s: f64) -> Result<Vec<f64>, DatagenError> {
    if n == 0 {
        return Err(DatagenError::InvalidCatalog(
            "zipf support must contain at least one class".into(),
        ));
    }
    if s <= 0.0 || !s.is_finite() {
        return Err(DatagenError::InvalidCatalog(format!(
            "zipf exponent must be positive, got {s}"
        )));
    }
    let raw: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-s)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Exponent whose zipf weights over `n` classes have `max/min == ratio`,
/// found by bisection.
pub fn fit_zipf_exponent(n: usize, ratio: f64) -> Result<f64, DatagenError> {
    if n < 2 || ratio.is_nan() || ratio <= 1.0 {
        return Err(DatagenError::InvalidCatalog(format!(
            "cannot fit a zipf exponent for n={n}, ratio={ratio}"
        )));
    }
    let spread = |s: f64| {
        let w = zipf_weights(n, s).expect("valid exponent");
        w[0] / w[n - 1]
    };
    let (mut lo, mut hi) = (1e-6, 1.0);
    while spread(hi) < ratio {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(DatagenError::InvalidCatalog(format!(
                "ratio {ratio} unreachable for n={n}"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if spread(mid) < ratio {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
