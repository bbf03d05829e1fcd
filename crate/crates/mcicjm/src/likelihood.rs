//! Likelihood and prior evaluation.
//!
//! The survival likelihood of a subject is one of three factors, chosen by the
//! observed status. Writing `A_j` for the probability that progression
//! happened in biopsy interval `j` and `rho` for the biopsy sensitivity:
//!
//! * censored (`F1`): either event-free, or progression in some interval `j`
//!   with all `N - j + 1` later biopsies falsely negative;
//! * detected (`F2`): progression in interval `j <= N` with the biopsies
//!   between `j` and the detection one falsely negative, and the detection
//!   biopsy positive;
//! * treated (`F3`): treatment hazard at the treatment time, times the same
//!   event-free-or-missed mixture as `F1` up to the last biopsy.
//!
//! All mixtures are accumulated in log space. Setting `rho = 1` removes every
//! missed-progression term and recovers the plain interval-censored
//! cause-specific likelihood.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    Cause, CauseHazard, EventStatus, ModelSpec, ParameterState, PatientRecord, SensitivityMode,
    SplineHazard, N_RANEF,
};
use crate::quadrature::QuadratureRule;
use crate::stats::{gamma_logpdf, ln_gamma, ln_multigamma, log_sum_exp, normal_logpdf};

/// Which survival factor a subject contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FactorKind {
    F1,
    F2,
    F3,
}

impl FactorKind {
    pub fn for_status(status: EventStatus) -> Self {
        match status {
            EventStatus::Censored => FactorKind::F1,
            EventStatus::ProgressionDetected => FactorKind::F2,
            EventStatus::Treated => FactorKind::F3,
        }
    }
}

/// The survival factor of one subject, decomposed for inspection.
#[derive(Debug, Clone, Serialize)]
pub struct SurvivalFactorBreakdown {
    pub factor: FactorKind,
    pub log_value: f64,
    /// Interval progression probabilities `A_j`, `j = 1..N`.
    pub a_values: Vec<f64>,
    /// Log of the no-progression term (`-inf` for `F2`, which has none).
    pub log_event_free_term: f64,
    /// Log of each missed-progression term, weights included.
    pub log_missed_terms: Vec<f64>,
    /// Cumulative progression hazard at the last biopsy.
    pub h_prg_last_biopsy: f64,
    /// Cumulative treatment hazard at the subject's terminal time.
    pub h_trt_terminal: f64,
    /// Set when the factor is degenerate (for example a detected progression
    /// under zero sensitivity).
    pub diagnostic: Option<String>,
}

/// Log density of the Student-t measurement model.
///
/// `sigma` is the scale (not the standard deviation) of a t with `kappa`
/// degrees of freedom.
pub fn longitudinal_logdensity(y: f64, mean: f64, sigma: f64, kappa: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid_input(format!("t residual scale must be positive, got {sigma}")));
    }
    let r = y - mean;
    Ok(ln_gamma((kappa + 1.0) / 2.0)
        - ln_gamma(kappa / 2.0)
        - 0.5 * (kappa * std::f64::consts::PI).ln()
        - sigma.ln()
        - (kappa + 1.0) / 2.0 * (r * r / (kappa * sigma * sigma)).ln_1p())
}

/// `∫_{panel} h(ν) exp(-H(ν)) dν` where `H(ν) = h_start + ∫_{lo}^{ν} h`,
/// nested Gauss-Kronrod: every outer node triggers an inner integration.
fn nested_survival_panel<H: CauseHazard>(
    rule: &QuadratureRule,
    hz: &H,
    lo: f64,
    hi: f64,
    h_start: f64,
) -> Result<f64> {
    if hi <= lo {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (nu, w) in rule.scaled(lo, hi) {
        let (inner, _) = rule.integrate(|s| hz.hazard(s), lo, nu)?;
        let v = hz.hazard(nu) * (-(h_start + inner)).exp();
        if !v.is_finite() {
            return Err(Error::NonFiniteIntegrand { node: nu });
        }
        acc += w * v;
    }
    Ok(acc)
}

pub(crate) fn panel_bounds(lo: f64, hi: f64, cuts: &[f64]) -> Vec<f64> {
    let mut bounds = vec![lo];
    bounds.extend(cuts.iter().copied().filter(|&c| c > lo && c < hi));
    bounds.push(hi);
    bounds
}

/// Interval progression probability and the hazard integral over the same
/// interval, starting from cumulative hazard `h_start` at `lo`.
fn interval_a_and_h<H: CauseHazard>(
    rule: &QuadratureRule,
    hz: &H,
    lo: f64,
    hi: f64,
    h_start: f64,
) -> Result<(f64, f64)> {
    let bounds = panel_bounds(lo, hi, hz.breakpoints());
    let mut a = 0.0;
    let mut h = h_start;
    for w in bounds.windows(2) {
        a += nested_survival_panel(rule, hz, w[0], w[1], h)?;
        let (seg, _) = rule.integrate(|s| hz.hazard(s), w[0], w[1])?;
        h += seg;
    }
    Ok((a, h - h_start))
}

fn cumulative<H: CauseHazard>(rule: &QuadratureRule, hz: &H, lo: f64, hi: f64) -> Result<f64> {
    let (v, _) = rule.integrate_split(|s| hz.hazard(s), lo, hi, hz.breakpoints())?;
    Ok(v)
}

/// Survival factor for one subject under arbitrary cause hazards.
///
/// `biopsy_times` must start at 0; `terminal` is the censoring, detection, or
/// treatment time according to `status`.
pub fn survival_factors<Hp: CauseHazard, Ht: CauseHazard>(
    rule: &QuadratureRule,
    hazard_prg: &Hp,
    hazard_trt: &Ht,
    biopsy_times: &[f64],
    status: EventStatus,
    terminal: f64,
    rho: f64,
) -> Result<SurvivalFactorBreakdown> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid_input(format!("sensitivity must be in [0, 1], got {rho}")));
    }
    let n = biopsy_times.len().saturating_sub(1);
    if status == EventStatus::ProgressionDetected && n == 0 {
        return Err(Error::invalid_input(
            "a detected progression needs at least one follow-up biopsy",
        ));
    }

    // Progression side: A_j and the cumulative hazard at each biopsy.
    let mut a_values = Vec::with_capacity(n);
    let mut h_prg = 0.0;
    for j in 1..=n {
        let (a, dh) =
            interval_a_and_h(rule, hazard_prg, biopsy_times[j - 1], biopsy_times[j], h_prg)?;
        a_values.push(a);
        h_prg += dh;
    }

    // Treatment side: cumulative hazard to the last biopsy and to terminal.
    let last_biopsy = *biopsy_times.last().unwrap_or(&0.0);
    let h_trt_last = cumulative(rule, hazard_trt, 0.0, last_biopsy)?;
    let h_trt_term = h_trt_last + cumulative(rule, hazard_trt, last_biopsy, terminal)?;
    let log_h_trt_term = if status == EventStatus::Treated {
        hazard_trt.log_hazard(terminal)
    } else {
        f64::NAN
    };

    Ok(compose_survival_factor(
        status,
        rho,
        &a_values,
        h_prg,
        h_trt_last,
        h_trt_term,
        log_h_trt_term,
    ))
}

/// Assemble the survival factor from its ingredients. Shared between the
/// reference path and the sampler's precomputed path so both compose
/// identically.
pub(crate) fn compose_survival_factor(
    status: EventStatus,
    rho: f64,
    a_values: &[f64],
    h_prg_last: f64,
    h_trt_last: f64,
    h_trt_term: f64,
    log_h_trt_term: f64,
) -> SurvivalFactorBreakdown {
    let n = a_values.len();
    let ln_rho = rho.ln();
    let ln_1m_rho = (1.0 - rho).ln();
    // weight exponent k times ln(1-rho), with 0 * ln(0) = 0 at rho = 1
    let pow_1m = |k: usize| if k == 0 { 0.0 } else { k as f64 * ln_1m_rho };

    let factor = FactorKind::for_status(status);
    let mut diagnostic = None;
    let (log_event_free_term, log_missed_terms): (f64, Vec<f64>) = match status {
        EventStatus::Censored => {
            let base = -h_prg_last - h_trt_term;
            let missed: Vec<f64> = a_values
                .iter()
                .enumerate()
                .map(|(i, a)| a.ln() + pow_1m(n - i) - h_trt_term)
                .collect();
            (base, missed)
        }
        EventStatus::ProgressionDetected => {
            let missed: Vec<f64> = a_values
                .iter()
                .enumerate()
                .map(|(i, a)| ln_rho + a.ln() + pow_1m(n - 1 - i) - h_trt_last)
                .collect();
            if rho == 0.0 {
                diagnostic =
                    Some("detected progression has zero likelihood under zero sensitivity".into());
            }
            (f64::NEG_INFINITY, missed)
        }
        EventStatus::Treated => {
            let common = log_h_trt_term - h_trt_term;
            let base = common - h_prg_last;
            let missed: Vec<f64> = a_values
                .iter()
                .enumerate()
                .map(|(i, a)| common + a.ln() + pow_1m(n - i))
                .collect();
            (base, missed)
        }
    };

    let mut terms = log_missed_terms.clone();
    terms.push(log_event_free_term);
    let log_value = log_sum_exp(&terms);

    SurvivalFactorBreakdown {
        factor,
        log_value,
        a_values: a_values.to_vec(),
        log_event_free_term,
        log_missed_terms,
        h_prg_last_biopsy: h_prg_last,
        h_trt_terminal: h_trt_term,
        diagnostic,
    }
}

/// Probability that progression occurred in biopsy interval `j` (1-based).
pub fn interval_progression_prob(
    spec: &ModelSpec,
    params: &ParameterState,
    subject_idx: usize,
    subject: &PatientRecord,
    j: usize,
) -> Result<f64> {
    let n = subject.n_intervals();
    if j == 0 || j > n {
        return Err(Error::invalid_input(format!("interval index {j} out of 1..={n}")));
    }
    let hz = SplineHazard::new(spec, params, subject_idx, subject, Cause::Progression);
    let rule = spec.rule();
    let h_start = cumulative(&rule, &hz, 0.0, subject.biopsy_times[j - 1])?;
    let scale = (-h_start).exp();
    let (a_rel, _) =
        interval_a_and_h(&rule, &hz, subject.biopsy_times[j - 1], subject.biopsy_times[j], 0.0)?;
    Ok(scale * a_rel)
}

/// Survival factor of a subject under the joint model.
pub fn survival_breakdown(
    spec: &ModelSpec,
    params: &ParameterState,
    subject_idx: usize,
    subject: &PatientRecord,
) -> Result<SurvivalFactorBreakdown> {
    let hp = SplineHazard::new(spec, params, subject_idx, subject, Cause::Progression);
    let ht = SplineHazard::new(spec, params, subject_idx, subject, Cause::Treatment);
    survival_factors(
        &spec.rule(),
        &hp,
        &ht,
        &subject.biopsy_times,
        subject.status,
        subject.terminal_time,
        params.rho,
    )
}

/// `log p(T_i, delta_i | u_i, rho, theta)`.
pub fn survival_loglik(
    spec: &ModelSpec,
    params: &ParameterState,
    subject_idx: usize,
    subject: &PatientRecord,
) -> Result<f64> {
    Ok(survival_breakdown(spec, params, subject_idx, subject)?.log_value)
}

/// Additive pieces of the log prior; `total` is their sum.
#[derive(Debug, Clone, Serialize)]
pub struct LogPriorParts {
    pub beta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub baseline: [f64; 2],
    pub tau_h0: [f64; 2],
    pub tau_eps: f64,
    pub tau_u: f64,
    pub omega: f64,
    pub rho: f64,
    pub total: f64,
}

/// Log prior density of a parameter state (up to constants that do not depend
/// on any sampled parameter; the `tau_u`-dependent normalizer of the
/// inverse-Wishart is kept).
pub fn log_prior_parts(spec: &ModelSpec, params: &ParameterState) -> LogPriorParts {
    let pr = &spec.priors;

    let beta: f64 = params.beta.iter().map(|&b| normal_logpdf(b, 0.0, pr.beta_var)).sum();
    let gamma: f64 = params.gamma.iter().map(|&g| normal_logpdf(g, 0.0, pr.coef_var)).sum();
    let alpha: f64 =
        params.alpha.iter().flatten().map(|&a| normal_logpdf(a, 0.0, pr.coef_var)).sum();

    let mut baseline = [0.0; 2];
    let mut tau_h0 = [0.0; 2];
    for cause in Cause::ALL {
        let k = cause.index();
        let tau = params.tau_h0[k];
        let pen = spec.penalty(cause);
        baseline[k] = if tau > 0.0 {
            0.5 * pen.rank_term() as f64 * tau.ln()
                - 0.5 * tau * pen.quadratic_form(&params.gamma_h0[k])
        } else {
            f64::NEG_INFINITY
        };
        tau_h0[k] = gamma_logpdf(tau, pr.tau_h0_shape, pr.tau_h0_rate);
    }

    let tau_eps = gamma_logpdf(params.tau_eps, pr.tau_eps_shape, pr.tau_eps_rate);
    let tau_u = gamma_logpdf(params.tau_u, pr.tau_u_shape, pr.tau_u_rate);

    let omega = inverse_wishart_logpdf(params, pr.omega_df, pr.omega_scale);

    let rho = match spec.sensitivity {
        SensitivityMode::Fixed { .. } => 0.0,
        SensitivityMode::Uniform { lo, hi } => {
            if params.rho >= lo && params.rho <= hi {
                -(hi - lo).ln()
            } else {
                f64::NEG_INFINITY
            }
        }
    };

    let total = beta
        + gamma
        + alpha
        + baseline.iter().sum::<f64>()
        + tau_h0.iter().sum::<f64>()
        + tau_eps
        + tau_u
        + omega
        + rho;

    LogPriorParts { beta, gamma, alpha, baseline, tau_h0, tau_eps, tau_u, omega, rho, total }
}

pub fn log_prior(spec: &ModelSpec, params: &ParameterState) -> f64 {
    log_prior_parts(spec, params).total
}

/// Inverse-Wishart log density of the random-effects covariance with scale
/// `(c / tau_u) I`; the scale-dependent normalizer stays so the `tau_u`
/// conditional is correct.
fn inverse_wishart_logpdf(params: &ParameterState, df: f64, c: f64) -> f64 {
    if !(params.tau_u > 0.0) {
        return f64::NEG_INFINITY;
    }
    let p = N_RANEF as f64;
    let omega = params.omega_matrix();
    let chol = match nalgebra::Cholesky::new(omega) {
        Some(c) => c,
        None => return f64::NEG_INFINITY,
    };
    let ln_det_omega = 2.0 * (0..N_RANEF).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
    let omega_inv = chol.inverse();
    let scale = c / params.tau_u;
    let tr = scale * omega_inv.trace();
    let ln_det_scale = p * scale.ln();
    0.5 * df * ln_det_scale - 0.5 * (df + p + 1.0) * ln_det_omega - 0.5 * tr
        - 0.5 * df * p * 2.0f64.ln()
        - ln_multigamma(N_RANEF, 0.5 * df)
}

/// `log N(u; 0, Omega)` given the Cholesky factor of `Omega`.
pub fn ranef_logpdf(chol: &nalgebra::Cholesky<f64, nalgebra::Const<4>>, u: &[f64; N_RANEF]) -> f64 {
    let ln_det = 2.0 * (0..N_RANEF).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
    let v = nalgebra::Vector4::from_column_slice(u);
    let z = chol.l().solve_lower_triangular(&v).expect("triangular solve");
    let quad = z.dot(&z);
    -0.5 * (N_RANEF as f64 * (2.0 * std::f64::consts::PI).ln() + ln_det + quad)
}

/// Likelihood contributions of one subject.
#[derive(Debug, Clone, Serialize)]
pub struct SubjectLoglik {
    pub id: String,
    pub longitudinal: f64,
    pub survival: f64,
    pub ranef: f64,
    pub survival_breakdown: SurvivalFactorBreakdown,
}

/// Full decomposition of the unnormalized log posterior.
#[derive(Debug, Clone, Serialize)]
pub struct PosteriorBreakdown {
    pub subjects: Vec<SubjectLoglik>,
    pub prior: LogPriorParts,
    pub data_loglik: f64,
    pub total: f64,
}

/// Unnormalized log posterior: per-subject longitudinal, survival, and
/// random-effect densities plus the log prior. `-inf` propagates; evaluation
/// failures caused by overflowing hazards are also reported as `-inf`.
pub fn log_posterior(
    spec: &ModelSpec,
    params: &ParameterState,
    data: &[PatientRecord],
) -> Result<f64> {
    Ok(log_posterior_breakdown(spec, params, data)?.total)
}

pub fn log_posterior_breakdown(
    spec: &ModelSpec,
    params: &ParameterState,
    data: &[PatientRecord],
) -> Result<PosteriorBreakdown> {
    params.validate(spec, data.len())?;
    let sigma = params.sigma();
    let chol = nalgebra::Cholesky::new(params.omega_matrix())
        .ok_or_else(|| Error::invalid_input("random-effects covariance is not positive definite"))?;

    let mut subjects = Vec::with_capacity(data.len());
    let mut data_loglik = 0.0;
    for (idx, subject) in data.iter().enumerate() {
        let mut longitudinal = 0.0;
        for &(t, y) in &subject.measurements {
            let m = crate::model::longitudinal_mean(spec, params, idx, subject, t)?;
            longitudinal += longitudinal_logdensity(y, m, sigma, spec.t_df)?;
        }
        let breakdown = match survival_breakdown(spec, params, idx, subject) {
            Ok(b) => b,
            Err(Error::NonFiniteIntegrand { node }) => SurvivalFactorBreakdown {
                factor: FactorKind::for_status(subject.status),
                log_value: f64::NEG_INFINITY,
                a_values: Vec::new(),
                log_event_free_term: f64::NEG_INFINITY,
                log_missed_terms: Vec::new(),
                h_prg_last_biopsy: f64::NAN,
                h_trt_terminal: f64::NAN,
                diagnostic: Some(format!("hazard overflowed at t = {node}")),
            },
            Err(e) => return Err(e),
        };
        let survival = breakdown.log_value;
        let ranef = ranef_logpdf(&chol, &params.u[idx]);
        data_loglik += longitudinal + survival + ranef;
        subjects.push(SubjectLoglik {
            id: subject.id.clone(),
            longitudinal,
            survival,
            ranef,
            survival_breakdown: breakdown,
        });
    }

    let prior = log_prior_parts(spec, params);
    let total = data_loglik + prior.total;
    Ok(PosteriorBreakdown { subjects, prior, data_loglik, total })
}
