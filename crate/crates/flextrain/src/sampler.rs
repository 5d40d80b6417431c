//! Activation distribution over prefix depths, configuration sampling, and
//! the expected-parameter-ratio cost model.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ResidualNet;

/// Distribution π over depths `1..=K`: `probs[k-1]` is the probability that
/// the first `k` blocks are active during a training step.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDistribution {
    probs: Vec<f64>,
}

impl ActivationDistribution {
    /// Validates non-negativity and normalization to 1 within 1e-9, then
    /// re-normalizes exactly (config files carry decimal round-off).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "probs[{i}] = {p} is negative or non-finite"
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {sum}, expected 1 within 1e-9"
            )));
        }
        let probs = probs.into_iter().map(|p| p / sum).collect();
        Ok(Self { probs })
    }

    /// Point mass on depth `k`.
    pub fn one_hot(k: usize, num_depths: usize) -> Result<Self> {
        if k == 0 || k > num_depths {
            return Err(Error::DepthOutOfRange { depth: k, max: num_depths });
        }
        let mut probs = vec![0.0; num_depths];
        probs[k - 1] = 1.0;
        Ok(Self { probs })
    }

    pub fn num_depths(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Depths (1-based) with non-zero probability, ascending.
    pub fn support(&self) -> Vec<usize> {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// Deepest depth with non-zero probability.
    pub fn max_support(&self) -> usize {
        self.support().last().copied().unwrap_or(1)
    }
}

/// Draw a depth `k ~ π` by inverse-CDF sampling; consumes exactly one
/// uniform draw from `rng`.
pub fn sample_config<R: Rng>(pi: &ActivationDistribution, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &p) in pi.probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i + 1;
        }
    }
    // guard against accumulated round-off at u ~ 1
    pi.probs.len()
}

/// `A_k`: number of tunable parameters of the depth-`k` prefix, including
/// the pre-processing layer and the decision head. `A_K` is the full count.
pub fn prefix_param_count(net: &ResidualNet, k: usize) -> Result<u64> {
    if k == 0 || k > net.num_blocks() {
        return Err(Error::DepthOutOfRange { depth: k, max: net.num_blocks() });
    }
    let p = net.params();
    let blocks: usize = p.blocks[..k].iter().map(|b| b.param_count()).sum();
    Ok((p.pre.param_count() + blocks + p.head.param_count()) as u64)
}

/// Expected fraction of parameters touched per training step:
/// `r̄ = Σ_k π_k A_k / A`.
pub fn expected_param_ratio(pi: &ActivationDistribution, net: &ResidualNet) -> Result<f64> {
    if pi.num_depths() != net.num_blocks() {
        return Err(Error::InvalidDistribution(format!(
            "distribution has {} depths, network has {} blocks",
            pi.num_depths(),
            net.num_blocks()
        )));
    }
    let counts: Vec<u64> = (1..=net.num_blocks())
        .map(|k| prefix_param_count(net, k))
        .collect::<Result<_>>()?;
    expected_param_ratio_from_counts(pi, &counts)
}

/// `r̄` over explicit per-depth parameter counts `A_1..A_K`.
pub fn expected_param_ratio_from_counts(pi: &ActivationDistribution, counts: &[u64]) -> Result<f64> {
    if pi.num_depths() != counts.len() {
        return Err(Error::InvalidDistribution(format!(
            "distribution has {} depths, got {} counts",
            pi.num_depths(),
            counts.len()
        )));
    }
    let total = *counts.last().expect("non-empty by construction") as f64;
    let expected: f64 = pi
        .probs
        .iter()
        .zip(counts.iter())
        .map(|(&p, &a)| p * a as f64)
        .sum();
    Ok(expected / total)
}

/// Result of mapping a parameter-budget fraction onto a prefix depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DepthFit {
    /// Largest `k` with `A_k <= fraction * A`, clamped to at least 1.
    pub depth: usize,
    /// Set when even `A_1` exceeds the budget and the clamp engaged.
    pub over_budget: bool,
}

/// Map a capability fraction in `(0, 1]` to the deepest affordable prefix.
pub fn fraction_to_depth(net: &ResidualNet, fraction: f64) -> Result<DepthFit> {
    if !(fraction.is_finite() && 0.0 < fraction && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "capability fraction must be in (0, 1], got {fraction}"
        )));
    }
    let total = prefix_param_count(net, net.num_blocks())? as f64;
    let budget = fraction * total;
    let mut depth = 0;
    for k in 1..=net.num_blocks() {
        if prefix_param_count(net, k)? as f64 <= budget {
            depth = k;
        } else {
            break;
        }
    }
    if depth == 0 {
        Ok(DepthFit { depth: 1, over_budget: true })
    } else {
        Ok(DepthFit { depth, over_budget: false })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_net;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_negative_and_unnormalized() {
        assert!(ActivationDistribution::new(vec![0.5, -0.5, 1.0]).is_err());
        assert!(ActivationDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(ActivationDistribution::new(vec![]).is_err());
        // within tolerance: re-normalized
        let pi = ActivationDistribution::new(vec![0.5, 0.5 + 1e-10]).unwrap();
        assert!((pi.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn one_hot_always_returns_its_depth() {
        let pi = ActivationDistribution::one_hot(4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(sample_config(&pi, &mut rng), 4);
        }
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let pi = ActivationDistribution::new(vec![0.25, 0.25, 0.5]).unwrap();
        let draw = |seed: u64| -> Vec<usize> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_config(&pi, &mut rng)).collect()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn empirical_frequencies_match_pi() {
        let pi = ActivationDistribution::new(vec![0.25, 0.25, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut counts = [0u64; 3];
        for _ in 0..n {
            counts[sample_config(&pi, &mut rng) - 1] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / n as f64;
            assert!((freq - pi.probs()[i]).abs() <= 0.01, "depth {}: {}", i + 1, freq);
        }
    }

    #[test]
    fn param_count_matches_hand_tally() {
        // input=2, hidden=4, classes=3, K=2:
        // A_1 = (2*4+4) + (4*4+4 + 4*4+4) + (4*3+3) = 67
        let net = init_net(2, 4, 3, 2, 1).unwrap();
        assert_eq!(prefix_param_count(&net, 1).unwrap(), 67);
        assert_eq!(prefix_param_count(&net, 2).unwrap(), net.param_count() as u64);
        assert!(prefix_param_count(&net, 1).unwrap() < prefix_param_count(&net, 2).unwrap());
        assert!(prefix_param_count(&net, 3).is_err());
    }

    #[test]
    fn prefix_counts_strictly_increase() {
        let net = init_net(2, 8, 3, 6, 2).unwrap();
        let counts: Vec<u64> = (1..=6).map(|k| prefix_param_count(&net, k).unwrap()).collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn paper_cost_fractions_reproduce_exactly() {
        // A_k fractions (0.15, 0.35, 1.0) with pi = (0.25, 0.25, 0.5):
        // r̄ = 0.625, and FlexTrain ÷ independent-models = 0.625 / 1.5.
        let pi = ActivationDistribution::new(vec![0.25, 0.25, 0.5]).unwrap();
        let r = expected_param_ratio_from_counts(&pi, &[15, 35, 100]).unwrap();
        assert_eq!(r, 0.625);
        let vs_independent = r / ((15.0 + 35.0 + 100.0) / 100.0);
        assert!((vs_independent - 0.625 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn one_hot_full_depth_ratio_is_one() {
        let net = init_net(2, 4, 3, 3, 1).unwrap();
        let pi = ActivationDistribution::one_hot(3, 3).unwrap();
        assert_eq!(expected_param_ratio(&pi, &net).unwrap(), 1.0);
    }

    #[test]
    fn ratio_below_one_when_full_depth_not_certain() {
        let net = init_net(2, 4, 3, 3, 1).unwrap();
        let pi = ActivationDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(expected_param_ratio(&pi, &net).unwrap() < 1.0);
    }

    #[test]
    fn fraction_maps_to_depth_with_clamp() {
        let net = init_net(2, 4, 3, 2, 1).unwrap();
        // A_1 = 67, A_2 = 107
        assert_eq!(fraction_to_depth(&net, 1.0).unwrap(), DepthFit { depth: 2, over_budget: false });
        let between = 80.0 / 107.0;
        assert_eq!(fraction_to_depth(&net, between).unwrap(), DepthFit { depth: 1, over_budget: false });
        let below_a1 = 60.0 / 107.0;
        assert_eq!(fraction_to_depth(&net, below_a1).unwrap(), DepthFit { depth: 1, over_budget: true });
        assert!(fraction_to_depth(&net, 0.0).is_err());
        assert!(fraction_to_depth(&net, 1.5).is_err());
    }

    #[test]
    fn fraction_to_depth_is_monotone() {
        let net = init_net(3, 6, 4, 5, 8).unwrap();
        let mut last = 0;
        for i in 1..=100 {
            let f = i as f64 / 100.0;
            let fit = fraction_to_depth(&net, f).unwrap();
            assert!(fit.depth >= last);
            last = fit.depth;
        }
        assert_eq!(last, 5);
    }
}
