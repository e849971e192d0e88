//! Small numerical helpers shared by the estimators: order-fixed summation,
//! batch standard errors and seed derivation.

/// Number of groups used for batch standard errors.
pub const N_BATCHES: usize = 10;

const PAIRWISE_LEAF: usize = 32;

/// Sum with a fixed pairwise tree so the result depends only on the input
/// order, never on how work was scheduled.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Median of a sample (average of the two central values for even length).
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Contiguous index ranges splitting `n` items into `n_batches` groups.
pub fn batch_ranges(n: usize, n_batches: usize) -> Vec<std::ops::Range<usize>> {
    let b = n_batches.clamp(1, n.max(1));
    (0..b).map(|j| (j * n / b)..((j + 1) * n / b)).collect()
}

/// Batch estimate of a statistic: evaluates `stat` on each of
/// [`N_BATCHES`] contiguous groups and returns (mean, standard error of the
/// mean) over the groups.
pub fn batch_estimate<F>(n: usize, stat: F) -> (f64, f64)
where
    F: Fn(std::ops::Range<usize>) -> f64,
{
    let vals: Vec<f64> = batch_ranges(n, N_BATCHES).into_iter().map(stat).collect();
    mean_and_se(&vals)
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let m = mean(values);
    let n = values.len();
    if n < 2 {
        return (m, f64::NAN);
    }
    let ss: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    let var = pairwise_sum(&ss) / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// splitmix64 finalizer; used to derive independent sub-seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sub-seed for a labelled stage of an experiment.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(label.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// `log(mean(exp(v)))` with a max shift. `-inf` entries contribute zero.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let shifted: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    max + (pairwise_sum(&shifted) / values.len() as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let v: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 500500.0);
    }

    #[test]
    fn batches_cover_everything() {
        let r = batch_ranges(103, 10);
        assert_eq!(r.len(), 10);
        assert_eq!(r[0].start, 0);
        assert_eq!(r[9].end, 103);
        for w in r.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn log_mean_exp_handles_large_magnitudes() {
        let v = [-1000.0, -1000.0];
        assert!((log_mean_exp(&v) + 1000.0).abs() < 1e-12);
        assert_eq!(log_mean_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }
}
