//! Univariate and multivariate hypergeometric draws and log-pmfs.

use rand::Rng;

/// `ln C(n, k)`, or `None` when `k > n`.
pub fn ln_choose(n: usize, k: usize) -> Option<f64> {
    if k > n {
        return None;
    }
    let k = k.min(n - k);
    let mut acc = 0.0;
    for i in 1..=k {
        acc += ((n - k + i) as f64 / i as f64).ln();
    }
    Some(acc)
}

/// Number of successes when drawing `draws` items without replacement from
/// `total` items of which `successes` are marked. Inverse-CDF sampling over
/// the exact pmf.
pub fn sample_univariate<R: Rng + ?Sized>(
    rng: &mut R,
    total: usize,
    successes: usize,
    draws: usize,
) -> usize {
    assert!(successes <= total && draws <= total, "infeasible hypergeometric");
    let failures = total - successes;
    let lo = draws.saturating_sub(failures);
    let hi = draws.min(successes);
    if lo == hi {
        return lo;
    }
    let ln_p0 = ln_choose(successes, lo).unwrap() + ln_choose(failures, draws - lo).unwrap()
        - ln_choose(total, draws).unwrap();
    let mut p = ln_p0.exp();
    let u: f64 = rng.random();
    let mut cdf = p;
    let mut k = lo;
    while k < hi && u >= cdf {
        // pmf(k+1) / pmf(k)
        let num = ((successes - k) * (draws - k)) as f64;
        let den = ((k + 1) * (failures + k + 1 - draws)) as f64;
        p *= num / den;
        cdf += p;
        k += 1;
    }
    k
}

/// Per-category counts for `draws` items taken without replacement from
/// categories with the given capacities, via sequential univariate conditionals.
pub fn sample_multivariate<R: Rng + ?Sized>(
    rng: &mut R,
    capacities: &[usize],
    draws: usize,
) -> Vec<usize> {
    let mut remaining_total: usize = capacities.iter().sum();
    assert!(draws <= remaining_total, "more draws than items");
    let mut remaining_draws = draws;
    let mut out = Vec::with_capacity(capacities.len());
    for &cap in capacities {
        let k = sample_univariate(rng, remaining_total, cap, remaining_draws);
        out.push(k);
        remaining_total -= cap;
        remaining_draws -= k;
    }
    debug_assert_eq!(remaining_draws, 0);
    out
}

/// `ln ∏ C(cap_i, k_i) / C(Σ cap, Σ k)`, `None` when some `k_i > cap_i`.
pub fn ln_pmf_multivariate(capacities: &[usize], counts: &[usize]) -> Option<f64> {
    debug_assert_eq!(capacities.len(), counts.len());
    let mut acc = 0.0;
    for (&cap, &k) in capacities.iter().zip(counts) {
        acc += ln_choose(cap, k)?;
    }
    let total: usize = capacities.iter().sum();
    let draws: usize = counts.iter().sum();
    Some(acc - ln_choose(total, draws)?)
}
