//! Chi-square helpers for the simulator's distribution checks.

use statrs::distribution::{ChiSquared, ContinuousCDF};

#[derive(Clone, Copy, Debug)]
pub struct ChiSquare {
    pub statistic: f64,
    pub df: u64,
    pub p_value: f64,
}

/// Pearson goodness-of-fit test of `observed` against the uniform
/// distribution over its bins. `None` when the test is undefined (fewer than
/// two bins or no observations).
pub fn chi_square_uniform(observed: &[u64]) -> Option<ChiSquare> {
    let bins = observed.len();
    if bins < 2 {
        return None;
    }
    let total: u64 = observed.iter().sum();
    if total == 0 {
        return None;
    }
    let expected = total as f64 / bins as f64;
    let statistic = observed
        .iter()
        .map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        })
        .sum();
    Some(finish(statistic, (bins - 1) as f64))
}

/// Two-sample chi-square homogeneity test over matching bins: are `a` and `b`
/// draws from the same distribution? Bins empty in both samples carry no
/// information and are skipped; df is the remaining bin count minus one.
pub fn chi_square_two_sample(a: &[u64], b: &[u64]) -> Option<ChiSquare> {
    assert_eq!(a.len(), b.len(), "samples must share their binning");
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    if na == 0 || nb == 0 {
        return None;
    }
    let k1 = (nb as f64 / na as f64).sqrt();
    let k2 = 1.0 / k1;
    let mut statistic = 0.0;
    let mut kept = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x + y == 0 {
            continue;
        }
        kept += 1;
        let d = k1 * x as f64 - k2 * y as f64;
        statistic += d * d / (x + y) as f64;
    }
    if kept < 2 {
        return None;
    }
    Some(finish(statistic, (kept - 1) as f64))
}

/// `(mean, low, high)` of a Binomial(n, p) count at `k_sigma` standard
/// deviations, floored at zero.
pub fn binomial_bounds(n: u64, p: f64, k_sigma: f64) -> (f64, f64, f64) {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (mean, (mean - k_sigma * sd).max(0.0), mean + k_sigma * sd)
}

fn finish(statistic: f64, df: f64) -> ChiSquare {
    let dist = ChiSquared::new(df).expect("df >= 1");
    ChiSquare { statistic, df: df as u64, p_value: dist.sf(statistic).clamp(0.0, 1.0) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(got: f64, want: f64) {
        assert!(
            (got - want).abs() <= want.abs() * 1e-9 + 1e-12,
            "got {got}, want {want}"
        );
    }

    // Reference p-values frozen from an independent chi-square
    // implementation.
    #[test]
    fn uniform_test_matches_references() {
        let t = chi_square_uniform(&[10, 20, 30, 40]).unwrap();
        close(t.statistic, 20.0);
        assert_eq!(t.df, 3);
        close(t.p_value, 0.00016974243555282632);

        let t = chi_square_uniform(&[260, 240, 255, 245, 250, 250, 248, 252]).unwrap();
        close(t.statistic, 1.032);
        assert_eq!(t.df, 7);
        close(t.p_value, 0.9942956830317382);
    }

    #[test]
    fn two_sample_test_matches_references() {
        let t = chi_square_two_sample(&[30, 20, 25, 25], &[20, 30, 25, 25]).unwrap();
        close(t.statistic, 4.0);
        assert_eq!(t.df, 3);
        close(t.p_value, 0.26146412994911117);

        let t =
            chi_square_two_sample(&[100, 110, 90, 105, 95], &[95, 105, 100, 98, 102]).unwrap();
        close(t.statistic, 1.2609102622580868);
        assert_eq!(t.df, 4);
        close(t.p_value, 0.8679719038050216);
    }

    #[test]
    fn survival_function_matches_references() {
        let d = ChiSquared::new(255.0).unwrap();
        close(d.sf(290.285), 0.06364331705207026);
        let d = ChiSquared::new(1.0).unwrap();
        close(d.sf(3.841458820694124), 0.04999999999999989);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(chi_square_uniform(&[]).is_none());
        assert!(chi_square_uniform(&[5]).is_none());
        assert!(chi_square_uniform(&[0, 0, 0]).is_none());
        assert!(chi_square_two_sample(&[0, 0], &[0, 0]).is_none());
    }

    #[test]
    fn identical_samples_score_p_one() {
        let t = chi_square_two_sample(&[10, 10, 10], &[10, 10, 10]).unwrap();
        close(t.statistic, 0.0);
        close(t.p_value, 1.0);
    }

    #[test]
    fn binomial_bounds_bracket_the_mean() {
        let (mean, lo, hi) = binomial_bounds(1_000_000, 1e-3, 3.0);
        close(mean, 1000.0);
        assert!(lo < mean && mean < hi);
        // sd = sqrt(n p (1-p)) = sqrt(999.0)
        close(hi - mean, 3.0 * 999.0f64.sqrt());
    }
}
