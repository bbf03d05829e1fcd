//! Convergence diagnostics: split R-hat and rank-normalized bulk effective
//! sample size.

use serde::{Deserialize, Serialize};

use crate::stats::normal_quantile;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamDiagnostics {
    pub name: String,
    pub rhat: f64,
    pub ess_bulk: f64,
    /// Zero-variance draws; `rhat` is reported as 1 in that case.
    pub degenerate: bool,
}

/// Split each chain in half and treat the halves as chains.
fn split(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let n = c.len() / 2;
        out.push(&c[..n]);
        out.push(&c[c.len() - n..]);
    }
    out
}

fn seq_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn seq_var(xs: &[f64], mean: f64) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Split R-hat (potential scale reduction). Returns the statistic and a
/// degeneracy flag for zero-variance sequences.
pub fn split_rhat(chains: &[Vec<f64>]) -> (f64, bool) {
    let seqs = split(chains);
    let m = seqs.len();
    let n = seqs.iter().map(|s| s.len()).min().unwrap_or(0);
    if m < 2 || n < 2 {
        return (f64::NAN, true);
    }
    let means: Vec<f64> = seqs.iter().map(|s| seq_mean(s)).collect();
    let vars: Vec<f64> = seqs.iter().zip(&means).map(|(s, &mu)| seq_var(s, mu)).collect();
    let w: f64 = vars.iter().sum::<f64>() / m as f64;
    let grand = seq_mean(&means);
    let b_over_n =
        means.iter().map(|mu| (mu - grand) * (mu - grand)).sum::<f64>() / (m - 1) as f64;
    if w == 0.0 {
        // all sequences constant: identical chains converged trivially,
        // different constants can never mix
        return if b_over_n == 0.0 { (1.0, true) } else { (f64::INFINITY, true) };
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    ((var_plus / w).sqrt(), false)
}

/// Rank-normalize pooled draws (average ranks for ties, then normal scores).
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let mut flat: Vec<(f64, usize)> = Vec::with_capacity(total);
    for (idx, x) in chains.iter().flatten().enumerate() {
        flat.push((*x, idx));
    }
    flat.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut ranks = vec![0.0; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j < total && flat[j].0 == flat[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // average of ranks i+1..=j
        for item in &flat[i..j] {
            ranks[item.1] = avg_rank;
        }
        i = j;
    }
    let s = total as f64;
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut idx = 0;
    for (ci, c) in chains.iter().enumerate() {
        for i in 0..c.len() {
            let r = ranks[idx];
            out[ci][i] = normal_quantile(((r - 0.375) / (s + 0.25)).clamp(1e-12, 1.0 - 1e-12));
            idx += 1;
        }
    }
    out
}

/// Autocovariance at lag `t` with the sequence's own mean, `1/n` denominator.
fn autocov(xs: &[f64], mean: f64, lag: usize) -> f64 {
    let n = xs.len();
    let mut acc = 0.0;
    for i in 0..n - lag {
        acc += (xs[i] - mean) * (xs[i + lag] - mean);
    }
    acc / n as f64
}

/// Bulk effective sample size on rank-normalized draws, with Geyer's initial
/// monotone sequence estimator of the autocorrelation time.
pub fn bulk_ess(chains: &[Vec<f64>]) -> f64 {
    let normed = rank_normalize(chains);
    let seqs = split(&normed);
    let m = seqs.len();
    let n = seqs.iter().map(|s| s.len()).min().unwrap_or(0);
    if m < 2 || n < 4 {
        return f64::NAN;
    }
    let means: Vec<f64> = seqs.iter().map(|s| seq_mean(s)).collect();
    let vars: Vec<f64> = seqs.iter().zip(&means).map(|(s, &mu)| seq_var(s, mu)).collect();
    let w = vars.iter().sum::<f64>() / m as f64;
    if w == 0.0 {
        return f64::NAN;
    }
    let grand = seq_mean(&means);
    let b_over_n =
        means.iter().map(|mu| (mu - grand) * (mu - grand)).sum::<f64>() / (m - 1) as f64;
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;

    let mut rho = Vec::with_capacity(n);
    rho.push(1.0);
    for t in 1..n - 3 {
        let mean_acov: f64 =
            seqs.iter().zip(&means).map(|(s, &mu)| autocov(&s[..n], mu, t)).sum::<f64>()
                / m as f64;
        rho.push(1.0 - (w - mean_acov) / var_plus);
    }

    // Geyer: sum consecutive pairs while positive, enforce monotonicity.
    let mut tau = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < rho.len() {
        let pair = rho[2 * k] + rho[2 * k + 1];
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += pair;
        prev_pair = pair;
        k += 1;
    }
    let tau = (2.0 * tau - 1.0).max(1.0 / (m * n) as f64);
    (m * n) as f64 / tau
}

/// Diagnostics for one parameter across chains of thinned draws.
pub fn diagnostics_for(name: &str, chains: &[Vec<f64>]) -> ParamDiagnostics {
    let (rhat, degenerate) = split_rhat(chains);
    let rhat = if degenerate && rhat.is_infinite() { rhat } else if degenerate { 1.0 } else { rhat };
    let ess = if degenerate { f64::NAN } else { bulk_ess(chains) };
    ParamDiagnostics { name: name.to_string(), rhat, ess_bulk: ess, degenerate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn iid_chains(m: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| (0..n).map(|_| crate::sampler::kernel::standard_normal(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn constant_equal_chains_are_degenerate_with_unit_rhat() {
        let chains = vec![vec![2.0; 100], vec![2.0; 100]];
        let d = diagnostics_for("x", &chains);
        assert_eq!(d.rhat, 1.0);
        assert!(d.degenerate);
    }

    #[test]
    fn iid_normal_chains_have_rhat_near_one() {
        let chains = iid_chains(4, 1000, 21);
        let d = diagnostics_for("x", &chains);
        assert!(d.rhat > 0.99 && d.rhat < 1.02, "rhat {}", d.rhat);
        assert!(!d.degenerate);
    }

    #[test]
    fn offset_chains_have_large_rhat() {
        let mut chains = iid_chains(2, 500, 22);
        for x in chains[1].iter_mut() {
            *x += 10.0;
        }
        let d = diagnostics_for("x", &chains);
        assert!(d.rhat > 1.2, "rhat {}", d.rhat);
    }

    #[test]
    fn iid_ess_is_near_the_sample_count() {
        let chains = iid_chains(4, 1000, 23);
        let ess = bulk_ess(&chains);
        assert!(ess > 2000.0 && ess < 6000.0, "ess {ess}");
    }

    #[test]
    fn autocorrelated_chains_have_reduced_ess() {
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let phi: f64 = 0.9;
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..1000)
                    .map(|_| {
                        x = phi * x
                            + (1.0 - phi * phi).sqrt()
                                * crate::sampler::kernel::standard_normal(&mut rng);
                        x
                    })
                    .collect()
            })
            .collect();
        let ess = bulk_ess(&chains);
        // theory: n (1-phi)/(1+phi) ~ 0.0526 per draw -> about 210 of 4000
        assert!(ess > 70.0 && ess < 640.0, "ess {ess}");
        let d = diagnostics_for("x", &chains);
        assert!(d.rhat < 1.1);
    }

    #[test]
    fn rank_normalization_handles_ties() {
        let chains = vec![vec![1.0, 1.0, 2.0, 2.0], vec![3.0, 3.0, 4.0, 4.0]];
        let normed = rank_normalize(&chains);
        assert_eq!(normed[0][0], normed[0][1]);
        assert!(normed[0][0] < normed[1][0]);
    }
}
