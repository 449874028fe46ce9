use std::collections::HashMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// Every count vector with entries in `0..=cap` summing to `n`.
fn compositions(len: usize, cap: usize, n: usize) -> Vec<Vec<usize>> {
    fn go(len: usize, cap: usize, n: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == len {
            if n == 0 {
                out.push(prefix.clone());
            }
            return;
        }
        for k in 0..=cap.min(n) {
            prefix.push(k);
            go(len, cap, n - k, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    go(len, cap, n, &mut Vec::new(), &mut out);
    out
}

/// Brute-force pmf: enumerate every n-subset of the L·D slots.
fn subset_pmf(len: usize, depth: usize, n: usize) -> HashMap<Vec<usize>, f64> {
    let slots = len * depth;
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut total = 0usize;
    for mask in 0u32..(1 << slots) {
        if mask.count_ones() as usize != n {
            continue;
        }
        let mut k = vec![0; len];
        for s in 0..slots {
            if mask & (1 << s) != 0 {
                k[s / depth] += 1;
            }
        }
        *counts.entry(k).or_default() += 1;
        total += 1;
    }
    counts
        .into_iter()
        .map(|(k, c)| (k, c as f64 / total as f64))
        .collect()
}

#[test]
fn full_and_empty_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let all = binary_mask(12, 3, 4, &mut rng).unwrap();
    assert!(all.bits().iter().all(|&b| b == 0));
    let none = binary_mask(0, 3, 4, &mut rng).unwrap();
    assert!(none.bits().iter().all(|&b| b == 1));
    assert!(binary_mask(13, 3, 4, &mut rng).is_err());
}

#[test]
fn closed_form_matches_subset_enumeration() {
    for (len, depth) in [(2, 2), (3, 2), (2, 3), (4, 2), (3, 3)] {
        for n in 0..=len * depth {
            let brute = subset_pmf(len, depth, n);
            let fresh = MaskState::unmasked(len, depth);
            for k in compositions(len, depth, n) {
                let lp = forward_step_logprob(&k, &fresh).unwrap().value();
                assert!((lp.exp() - brute[&k]).abs() < 1e-12, "{len}x{depth} n={n} {k:?}");
            }
        }
    }
}

#[test]
fn two_by_two_reference_probabilities() {
    let fresh = MaskState::unmasked(2, 2);
    let p11 = forward_step_logprob(&[1, 1], &fresh).unwrap().value();
    assert!((p11 - (2.0f64 / 3.0).ln()).abs() < 1e-12);
    let p20 = forward_step_logprob(&[2, 0], &fresh).unwrap().value();
    assert!((p20.exp() - 1.0 / 6.0).abs() < 1e-12);
}

#[test]
fn binary_mask_frequencies_on_two_by_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n_draws = 100_000;
    let mut freq: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..n_draws {
        let m = binary_mask(2, 2, 2, &mut rng).unwrap();
        *freq.entry(m.masked_counts().to_vec()).or_default() += 1;
    }
    let expect = [(vec![1, 1], 2.0 / 3.0), (vec![2, 0], 1.0 / 6.0), (vec![0, 2], 1.0 / 6.0)];
    let tv: f64 = expect
        .iter()
        .map(|(k, p)| (freq.get(k).copied().unwrap_or(0) as f64 / n_draws as f64 - p).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.01, "tv {tv}");
}

#[test]
fn unmask_edge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let state = MaskState::from_counts(3, vec![2, 3, 1]).unwrap();
    let same = binary_unmask(&state, 6, &mut rng).unwrap();
    assert_eq!(same.masked_counts(), state.masked_counts());
    let open = binary_unmask(&state, 0, &mut rng).unwrap();
    assert_eq!(open.total_masked(), 0);
    assert!(binary_unmask(&state, 7, &mut rng).is_err());
}

#[test]
fn unmask_two_two_reveal_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let state = MaskState::from_counts(2, vec![2, 2]).unwrap();
    let n_draws = 100_000;
    let mut balanced = 0;
    for _ in 0..n_draws {
        let next = binary_unmask(&state, 2, &mut rng).unwrap();
        if next.masked_counts() == [1, 1] {
            balanced += 1;
        }
    }
    assert!((balanced as f64 / n_draws as f64 - 2.0 / 3.0).abs() < 0.01);
}

#[test]
fn forward_step_edge_cases() {
    let state = MaskState::from_counts(2, vec![1, 0]).unwrap();
    assert!(forward_step_logprob(&[2, 0], &state).unwrap().is_impossible());
    assert_eq!(forward_step_logprob(&[0, 0], &state).unwrap(), LogProb::Value(0.0));
    assert!(forward_step_logprob(&[0], &state).is_err());
}

#[test]
fn marginal_reference_values() {
    assert_eq!(marginal_logprob(&[0, 0], 0, 2, 2).unwrap(), LogProb::Value(0.0));
    let lp = marginal_logprob(&[1, 1], 2, 2, 2).unwrap().value();
    assert!((lp - (2.0f64 / 3.0).ln()).abs() < 1e-12);
    assert!(marginal_logprob(&[1, 1], 3, 2, 2).is_err());
    assert!(marginal_logprob(&[3, 0], 3, 2, 2).unwrap().is_impossible());
}

#[test]
fn posterior_reference_values() {
    assert_eq!(posterior_logprob(&[1, 2], &[1, 2], 3, 0).unwrap(), LogProb::Value(0.0));
    let lp = posterior_logprob(&[0, 1], &[1, 1], 2, 1).unwrap().value();
    assert!((lp.exp() - 0.5).abs() < 1e-12);
    assert!(posterior_logprob(&[2, 0], &[1, 1], 2, 0).unwrap().is_impossible());
}

#[test]
fn two_step_composition_matches_marginal() {
    let (len, depth, n1, n2) = (3, 3, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let trials = 100_000;
    let mut freq: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..trials {
        let first = binary_mask(n1, len, depth, &mut rng).unwrap();
        let capacity: Vec<usize> = (0..len).map(|i| first.visible(i)).collect();
        let k2 = hypergeom::sample_multivariate(&mut rng, &capacity, n2);
        let cum: Vec<usize> = first
            .masked_counts()
            .iter()
            .zip(&k2)
            .map(|(a, b)| a + b)
            .collect();
        *freq.entry(cum).or_default() += 1;
    }
    let tv: f64 = compositions(len, depth, n1 + n2)
        .into_iter()
        .map(|c| {
            let p = marginal_logprob(&c, n1 + n2, len, depth).unwrap().value().exp();
            (freq.get(&c).copied().unwrap_or(0) as f64 / trials as f64 - p).abs()
        })
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.02, "tv {tv}");
}

#[test]
fn unmask_for_t_steps_ends_fully_revealed() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for schedule in [Schedule::Circle, Schedule::Cosine, Schedule::Exponential { lambda: 6.0 }] {
        for steps in [1, 3, 10] {
            let mut state = MaskState::fully_masked(5, 4);
            for t in 1..=steps {
                let n = schedule.mask_count(t as f64 / steps as f64, 5, 4).unwrap();
                state = binary_unmask(&state, n, &mut rng).unwrap();
                assert_eq!(state.total_masked(), n);
            }
            assert_eq!(state.total_masked(), 0);
            assert_eq!(state.step, steps);
        }
    }
}

proptest! {
    #[test]
    fn mask_and_unmask_keep_depth_suffix(
        len in 1usize..6, depth in 1usize..6, seed in any::<u64>(), frac in 0.0f64..1.0, frac2 in 0.0f64..1.0
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = ((len * depth) as f64 * frac) as usize;
        let state = binary_mask(n, len, depth, &mut rng).unwrap();
        prop_assert_eq!(state.total_masked(), n);
        let grid = TokenGrid::from_tokens(len, depth, vec![0; len * depth]).unwrap().apply_mask(&state);
        prop_assert!(grid.check_depth_prefix().is_ok());
        let target = (n as f64 * frac2) as usize;
        let next = binary_unmask(&state, target, &mut rng).unwrap();
        prop_assert_eq!(next.total_masked(), target);
        for i in 0..len {
            prop_assert!(next.masked_count(i) <= state.masked_count(i));
        }
        let grid = TokenGrid::from_tokens(len, depth, vec![0; len * depth]).unwrap().apply_mask(&next);
        prop_assert!(grid.check_depth_prefix().is_ok());
    }
}
