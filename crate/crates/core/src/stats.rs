//! Deterministic reductions for Monte Carlo output.

/// Pairwise sum with a fixed recursion (base case 32), so the result is a
/// deterministic function of the slice contents regardless of chunking.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and standard error of the mean, via pairwise sums.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    assert!(n >= 2, "need at least two samples");
    let mean = pairwise_sum(xs) / n as f64;
    let sq: Vec<f64> = xs.iter().map(|&x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pairwise_matches_exact_small_sums() {
        let xs: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 5050.0);
    }

    #[test]
    fn pairwise_is_invariant_under_recomputation() {
        let xs: Vec<f64> = (0..10_001)
            .map(|i| ((i as f64) * 0.618).sin() * 1e-3 + 1.0)
            .collect();
        let a = pairwise_sum(&xs);
        let b = pairwise_sum(&xs);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn mean_and_stderr_match_closed_forms() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let (m, se) = mean_and_stderr(&xs);
        assert_abs_diff_eq!(m, 2.5, epsilon = 1e-15);
        // sample variance 5/3, stderr sqrt(5/12)
        assert_abs_diff_eq!(se, (5.0f64 / 12.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    #[should_panic(expected = "at least two samples")]
    fn stderr_needs_two_samples() {
        mean_and_stderr(&[1.0]);
    }
}
