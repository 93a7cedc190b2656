use super::TilingError;

/// Otsu threshold of a 256-bin histogram.
///
/// Returns the bin `t` maximising the between-class variance of `{0..=t}` and
/// `{t+1..=255}`; the first (smallest) maximiser wins ties. Class sums are kept
/// as exact integers and only the final ratio is taken in floating point, so the
/// score of a given `t` does not depend on how the sums were accumulated.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8, TilingError> {
    let nonzero = histogram.iter().filter(|&&c| c > 0).count();
    if nonzero < 2 {
        return Err(TilingError::DegenerateHistogram);
    }
    let total: u64 = histogram.iter().sum();
    let total_mass: u128 = histogram
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * u128::from(c))
        .sum();

    let mut best_t = 0u8;
    let mut best_score = f64::NEG_INFINITY;
    let mut below_count = 0u64;
    let mut below_mass = 0u128;
    for t in 0..255usize {
        below_count += histogram[t];
        below_mass += t as u128 * u128::from(histogram[t]);
        let score = between_class_score(below_count, below_mass, total - below_count, total_mass - below_mass);
        if score > best_score {
            best_score = score;
            best_t = t as u8;
        }
    }
    Ok(best_t)
}

/// `w0·w1·(μ0−μ1)²`, written as `(S0·w1 − S1·w0)² / (w0·w1)`; zero when a class
/// is empty. Proportional to the between-class variance.
pub(crate) fn between_class_score(w0: u64, s0: u128, w1: u64, s1: u128) -> f64 {
    if w0 == 0 || w1 == 0 {
        return 0.0;
    }
    let diff = (s0 * u128::from(w1)) as i128 - (s1 * u128::from(w0)) as i128;
    let diff = diff as f64;
    diff * diff / (w0 as f64 * w1 as f64)
}

pub fn histogram(gray: &[u8]) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &g in gray {
        hist[usize::from(g)] += 1;
    }
    hist
}
