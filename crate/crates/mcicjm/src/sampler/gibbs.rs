//! Conjugate Gibbs updates.

use nalgebra::Matrix4;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma};

use crate::error::{Error, Result};
use crate::model::N_RANEF;
use crate::sampler::kernel::standard_normal;
use crate::spline::PenaltyMatrix;

/// Draw the random-effects covariance from its inverse-Wishart conditional
/// `IW(df_prior + n, (scale_c / tau_u) I + sum_i u_i u_i')`.
pub fn gibbs_update_omega<R: Rng>(
    u_all: &[[f64; N_RANEF]],
    tau_u: f64,
    df_prior: f64,
    scale_c: f64,
    rng: &mut R,
) -> Result<Matrix4<f64>> {
    let mut s = Matrix4::identity() * (scale_c / tau_u);
    for u in u_all {
        for i in 0..N_RANEF {
            for j in 0..N_RANEF {
                s[(i, j)] += u[i] * u[j];
            }
        }
    }
    let df = df_prior + u_all.len() as f64;
    sample_inverse_wishart(&s, df, rng)
}

/// Sample from `IW(df, scale)` by Bartlett decomposition of the Wishart on
/// the precision side. Retries once with a small ridge if the scale fails to
/// factor.
pub fn sample_inverse_wishart<R: Rng>(
    scale: &Matrix4<f64>,
    df: f64,
    rng: &mut R,
) -> Result<Matrix4<f64>> {
    let p = N_RANEF;
    if df <= (p - 1) as f64 {
        return Err(Error::invalid_input(format!("inverse-Wishart needs df > {}, got {df}", p - 1)));
    }
    let chol = nalgebra::Cholesky::new(*scale)
        .or_else(|| nalgebra::Cholesky::new(scale + Matrix4::identity() * 1e-10))
        .ok_or_else(|| Error::numerical("inverse-Wishart scale accumulation is not positive definite"))?;
    // Omega^{-1} ~ Wishart(df, scale^{-1}); with scale = L L', the factor of
    // scale^{-1} is (L')^{-1}, so W = (L')^{-1} A A' L^{-1}.
    let mut a = Matrix4::zeros();
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64).map_err(|e| Error::numerical(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).max(1e-300).sqrt();
        for j in 0..i {
            a[(i, j)] = standard_normal(rng);
        }
    }
    let l = chol.l();
    // X = (L')^{-1} A, via forward substitution on L' x = a per column.
    let lt = l.transpose();
    let x = lt.solve_upper_triangular(&a).ok_or_else(|| Error::numerical("triangular solve failed"))?;
    let w = x * x.transpose();
    let w_chol = nalgebra::Cholesky::new(w)
        .ok_or_else(|| Error::numerical("Wishart draw is not positive definite"))?;
    Ok(w_chol.inverse())
}

/// Latent t-mixture weights: `lambda ~ Gamma((kappa+1)/2, (kappa + r^2 tau)/2)`
/// (shape-rate), whose marginal over the augmented normal is the t residual
/// density.
pub fn gibbs_update_mixture_weights<R: Rng>(
    residuals: &[f64],
    tau_eps: f64,
    kappa: f64,
    rng: &mut R,
    out: &mut [f64],
) {
    debug_assert!(tau_eps > 0.0);
    let shape = 0.5 * (kappa + 1.0);
    for (l, &r) in residuals.iter().enumerate() {
        let rate = 0.5 * (kappa + r * r * tau_eps);
        let g = Gamma::new(shape, 1.0 / rate).expect("gamma parameters");
        out[l] = g.sample(rng).max(1e-300);
    }
}

/// Residual precision under the mixture augmentation:
/// `Gamma(a + n/2, b + sum(lambda r^2)/2)`.
pub fn gibbs_update_tau_eps<R: Rng>(
    n_measurements: usize,
    sum_lambda_r2: f64,
    prior_shape: f64,
    prior_rate: f64,
    rng: &mut R,
) -> f64 {
    let shape = prior_shape + 0.5 * n_measurements as f64;
    let rate = prior_rate + 0.5 * sum_lambda_r2;
    Gamma::new(shape, 1.0 / rate).expect("gamma parameters").sample(rng).max(1e-300)
}

/// Smoothing precision of one P-spline block:
/// `Gamma(a + rank/2, b + coef' M coef / 2)`.
pub fn gibbs_update_tau_h0<R: Rng>(
    coef: &[f64],
    penalty: &PenaltyMatrix,
    prior_shape: f64,
    prior_rate: f64,
    rng: &mut R,
) -> f64 {
    let shape = prior_shape + 0.5 * penalty.rank_term() as f64;
    let rate = prior_rate + 0.5 * penalty.quadratic_form(coef);
    Gamma::new(shape, 1.0 / rate).expect("gamma parameters").sample(rng).max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spline::difference_penalty;
    use crate::stats::{mean_var, normal_cdf};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Two-sided Kolmogorov-Smirnov test p-value (asymptotic).
    pub(crate) fn ks_pvalue<F: Fn(f64) -> f64>(samples: &mut [f64], cdf: F) -> f64 {
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = samples.len() as f64;
        let mut d: f64 = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let f = cdf(x);
            d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
        }
        let t = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        let mut p = 0.0;
        for j in 1..=100 {
            let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
            p += sign * (-2.0 * (j as f64) * (j as f64) * t * t).exp();
        }
        (2.0 * p).clamp(0.0, 1.0)
    }

    /// Regularized lower incomplete gamma via series/continued fraction.
    fn gamma_cdf(x: f64, shape: f64, rate: f64) -> f64 {
        let x = x * rate;
        if x <= 0.0 {
            return 0.0;
        }
        let ln_g = crate::stats::ln_gamma(shape);
        if x < shape + 1.0 {
            let mut term = 1.0 / shape;
            let mut sum = term;
            for k in 1..500 {
                term *= x / (shape + k as f64);
                sum += term;
                if term < sum * 1e-15 {
                    break;
                }
            }
            (sum.ln() + shape * x.ln() - x - ln_g).exp()
        } else {
            // Lentz continued fraction for the upper tail
            let mut b = x + 1.0 - shape;
            let mut c = 1e300;
            let mut d = 1.0 / b;
            let mut h = d;
            for i in 1..500 {
                let an = -(i as f64) * (i as f64 - shape);
                b += 2.0;
                d = (an * d + b).recip();
                c = b + an / c;
                let del = c * d;
                h *= del;
                if (del - 1.0).abs() < 1e-15 {
                    break;
                }
            }
            1.0 - (shape * x.ln() - x - ln_g).exp() * h
        }
    }

    #[test]
    fn omega_prior_draw_marginal_is_inverse_gamma() {
        // With no data the (1,1) marginal of IW(df, S) is
        // InvGamma((df - p + 1)/2, S11/2).
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let tau_u = 50.0;
        let s11 = 4.0 / tau_u;
        let mut draws: Vec<f64> = (0..2000)
            .map(|_| gibbs_update_omega(&[], tau_u, 5.0, 4.0, &mut rng).unwrap()[(0, 0)])
            .collect();
        // X ~ IG(a, b) iff 1/X ~ Gamma(a, b)
        let mut inv: Vec<f64> = draws.iter().map(|x| 1.0 / x).collect();
        let p = ks_pvalue(&mut inv, |x| gamma_cdf(x, (5.0 - 4.0 + 1.0) / 2.0, s11 / 2.0));
        assert!(p > 0.01, "KS p-value {p}");
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }

    #[test]
    fn omega_posterior_mean_recovers_generating_covariance() {
        let omega0 = [
            [0.49, -0.04, -0.09, 0.01],
            [-0.04, 0.77, 0.43, -0.08],
            [-0.09, 0.43, 1.41, 1.43],
            [0.01, -0.08, 1.43, 2.60],
        ];
        let l = nalgebra::Cholesky::new(Matrix4::from_fn(|i, j| omega0[i][j])).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 5000;
        let u_all: Vec<[f64; 4]> = (0..n)
            .map(|_| {
                let z = nalgebra::Vector4::from_fn(|_, _| standard_normal(&mut rng));
                let v = l.l() * z;
                [v[0], v[1], v[2], v[3]]
            })
            .collect();
        let mut mean = Matrix4::zeros();
        let n_draws = 200;
        for _ in 0..n_draws {
            mean += gibbs_update_omega(&u_all, 50.0, 5.0, 4.0, &mut rng).unwrap() / n_draws as f64;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                num += (mean[(i, j)] - omega0[i][j]).powi(2);
                den += omega0[i][j].powi(2);
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel < 0.05, "Frobenius relative error {rel}");
    }

    #[test]
    fn omega_posterior_marginal_distribution() {
        // Against the analytic conditional: with data, the (2,2) marginal of
        // IW(df + n, S) is InvGamma((df + n - p + 1)/2, S22/2).
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let n = 40;
        let u_all: Vec<[f64; 4]> = (0..n)
            .map(|_| {
                [
                    standard_normal(&mut rng),
                    standard_normal(&mut rng),
                    standard_normal(&mut rng),
                    standard_normal(&mut rng),
                ]
            })
            .collect();
        let tau_u = 50.0;
        let mut s22 = 4.0 / tau_u;
        for u in &u_all {
            s22 += u[1] * u[1];
        }
        let df = 5.0 + n as f64;
        let mut inv: Vec<f64> = (0..2000)
            .map(|_| 1.0 / gibbs_update_omega(&u_all, tau_u, 5.0, 4.0, &mut rng).unwrap()[(1, 1)])
            .collect();
        let p = ks_pvalue(&mut inv, |x| gamma_cdf(x, (df - 3.0) / 2.0, s22 / 2.0));
        assert!(p > 0.01, "KS p-value {p}");
    }

    #[test]
    fn mixture_weights_zero_residual_distribution() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let resid = vec![0.0; 10_000];
        let mut lam = vec![0.0; 10_000];
        gibbs_update_mixture_weights(&resid, 2.0, 3.0, &mut rng, &mut lam);
        let (mean, var) = mean_var(&lam);
        // Gamma(2, 1.5): mean 4/3, variance 8/9
        let se = (var / lam.len() as f64).sqrt();
        assert!((mean - 4.0 / 3.0).abs() < 3.0 * se, "mean {mean}");
        let p = ks_pvalue(&mut lam, |x| gamma_cdf(x, 2.0, 1.5));
        assert!(p > 0.01, "KS p {p}");
    }

    #[test]
    fn mixture_weights_shrink_for_huge_residuals() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let resid = vec![1000.0; 2000];
        let tau = 1.0;
        let mut lam = vec![0.0; 2000];
        gibbs_update_mixture_weights(&resid, tau, 3.0, &mut rng, &mut lam);
        let (mean, _) = mean_var(&lam);
        let expect = (3.0 + 1.0) / (3.0 + 1000.0f64 * 1000.0 * tau);
        assert!((mean - expect).abs() < 0.5 * expect, "mean {mean} vs {expect}");
    }

    #[test]
    fn augmented_marginal_is_student_t() {
        // y sampled through the augmentation matches the t3 CDF.
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let kappa = 3.0;
        let sigma = 0.8;
        let shape = kappa / 2.0;
        let rate = kappa / 2.0;
        let mut ys: Vec<f64> = (0..10_000)
            .map(|_| {
                let lam: f64 = Gamma::new(shape, 1.0 / rate).unwrap().sample(&mut rng);
                sigma / lam.sqrt() * standard_normal(&mut rng)
            })
            .collect();
        // t3 CDF: 1/2 + (1/pi)[ (x/sqrt(3)) / (1 + x^2/3) + atan(x/sqrt(3)) ]
        let t3_cdf = |x: f64| {
            let z = x / sigma;
            0.5 + ((z / 3.0f64.sqrt()) / (1.0 + z * z / 3.0) + (z / 3.0f64.sqrt()).atan())
                / std::f64::consts::PI
        };
        let p = ks_pvalue(&mut ys, t3_cdf);
        assert!(p > 0.01, "KS p {p}");
    }

    #[test]
    fn tau_updates_have_correct_conditionals() {
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let mut draws: Vec<f64> =
            (0..2000).map(|_| gibbs_update_tau_eps(100, 3.7, 0.01, 0.01, &mut rng)).collect();
        let p = ks_pvalue(&mut draws, |x| gamma_cdf(x, 0.01 + 50.0, 0.01 + 1.85));
        assert!(p > 0.01, "tau_eps KS p {p}");

        let pen = difference_penalty(6, 2).unwrap();
        let coef = [0.2, -0.4, 0.3, 0.0, 0.5, -0.2];
        let q = pen.quadratic_form(&coef);
        let mut draws: Vec<f64> =
            (0..2000).map(|_| gibbs_update_tau_h0(&coef, &pen, 5.0, 0.5, &mut rng)).collect();
        let p = ks_pvalue(&mut draws, |x| gamma_cdf(x, 5.0 + 2.0, 0.5 + q / 2.0));
        assert!(p > 0.01, "tau_h0 KS p {p}");
    }

    #[test]
    fn normal_cdf_sane() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(1.96) - 0.975).abs() < 1e-3);
    }
}
