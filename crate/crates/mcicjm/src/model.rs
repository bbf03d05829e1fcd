//! Domain data model and deterministic model evaluations.
//!
//! The joint model couples a longitudinal biomarker trajectory (log2(PSA+1)
//! against time, natural cubic splines with subject-level random effects) with
//! two cause-specific proportional hazards: latent cancer progression,
//! observed only through imperfect biopsies, and early treatment, observed
//! exactly. The hazard of cause `k` at time `t` is
//!
//! ```text
//! h_k(t) = exp( G(t)'gamma_h0_k + gamma_k * log(PSAD) + alpha_1k * m(t)
//!               + alpha_2k * (m(t) - m(t-1)) )
//! ```
//!
//! where `G` is the clamped B-spline basis of the log baseline hazard and `m`
//! is the subject's expected trajectory.

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{QuadratureRule, RuleKind};
use crate::spline::{BsplineBasis, NcsBasis, PenaltyMatrix, PenaltySpec};

pub const N_FIXED: usize = 5;
pub const N_RANEF: usize = 4;

/// Competing event causes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cause {
    #[serde(rename = "prg")]
    Progression,
    #[serde(rename = "trt")]
    Treatment,
}

impl Cause {
    pub const ALL: [Cause; 2] = [Cause::Progression, Cause::Treatment];

    pub fn index(self) -> usize {
        match self {
            Cause::Progression => 0,
            Cause::Treatment => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Cause::Progression => "prg",
            Cause::Treatment => "trt",
        }
    }
}

/// Observed event status of a subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventStatus {
    Censored,
    ProgressionDetected,
    Treated,
}

impl EventStatus {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(EventStatus::Censored),
            1 => Ok(EventStatus::ProgressionDetected),
            2 => Ok(EventStatus::Treated),
            other => Err(Error::data(format!("event indicator must be 0, 1 or 2, got {other}"))),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            EventStatus::Censored => 0,
            EventStatus::ProgressionDetected => 1,
            EventStatus::Treated => 2,
        }
    }
}

/// One subject: baseline covariates, longitudinal measurements, biopsy
/// history, and the observed outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    /// Age at start of surveillance (years).
    pub age: f64,
    /// Baseline PSA density (ng/ml^2).
    pub psad: f64,
    /// Natural log of `psad`; this is the covariate the hazards use.
    pub log_psad: f64,
    /// (time in years, log2(PSA + 1)) pairs, ordered by time.
    pub measurements: Vec<(f64, f64)>,
    /// Biopsy times, first entry always 0 (the enrollment biopsy).
    pub biopsy_times: Vec<f64>,
    pub status: EventStatus,
    /// Censoring time, detection biopsy time, or treatment time per status.
    pub terminal_time: f64,
}

impl PatientRecord {
    /// Number of biopsy intervals `N` (biopsies after the enrollment one).
    pub fn n_intervals(&self) -> usize {
        self.biopsy_times.len().saturating_sub(1)
    }

    pub fn last_biopsy(&self) -> f64 {
        *self.biopsy_times.last().unwrap_or(&0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::data(format!("subject {}: {msg}", self.id)));
        if !(self.age.is_finite() && self.psad.is_finite() && self.psad > 0.0) {
            return fail(format!("age/psad invalid ({}, {})", self.age, self.psad));
        }
        if (self.log_psad - self.psad.ln()).abs() > 1e-9 {
            return fail("log_psad is not ln(psad)".into());
        }
        if self.biopsy_times.is_empty() || self.biopsy_times[0] != 0.0 {
            return fail("biopsy times must start at 0".into());
        }
        for w in self.biopsy_times.windows(2) {
            if !(w[1] > w[0]) {
                return fail("biopsy times must be strictly increasing".into());
            }
        }
        if !self.terminal_time.is_finite() || self.terminal_time < 0.0 {
            return fail(format!("terminal time invalid ({})", self.terminal_time));
        }
        let last = self.last_biopsy();
        match self.status {
            EventStatus::ProgressionDetected => {
                if self.n_intervals() == 0 {
                    return fail("a detected progression needs at least one follow-up biopsy".into());
                }
                if (self.terminal_time - last).abs() > 1e-9 {
                    return fail("terminal time of a detected progression must be the last biopsy".into());
                }
            }
            EventStatus::Treated | EventStatus::Censored => {
                if self.terminal_time < last - 1e-12 {
                    return fail("terminal time must not precede the last biopsy".into());
                }
            }
        }
        for &(t, y) in &self.measurements {
            if !(t.is_finite() && y.is_finite()) || t < 0.0 || t > self.terminal_time + 1e-9 {
                return fail(format!("measurement at t={t} outside [0, terminal]"));
            }
        }
        Ok(())
    }
}

/// How the biopsy sensitivity enters the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SensitivityMode {
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl SensitivityMode {
    pub fn fixed(value: f64) -> Self {
        SensitivityMode::Fixed { value }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SensitivityMode::Fixed { value } => {
                if !(value > 0.0 && value <= 1.0) {
                    return Err(Error::config(format!(
                        "fixed sensitivity must be in (0, 1], got {value}"
                    )));
                }
            }
            SensitivityMode::Uniform { lo, hi } => {
                if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                    return Err(Error::config(format!(
                        "sensitivity prior bounds must satisfy 0 <= lo < hi <= 1, got [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Default number of baseline-hazard knots: the prior mode trades spline
    /// flexibility for identifiability.
    pub fn default_bh_knot_count(&self) -> usize {
        match self {
            SensitivityMode::Fixed { .. } => 11,
            SensitivityMode::Uniform { .. } => 4,
        }
    }
}

impl std::str::FromStr for SensitivityMode {
    type Err = Error;

    /// Parses `fixed:0.75` or `uniform:0.6,0.9`.
    fn from_str(s: &str) -> Result<Self> {
        let usage = || Error::config(format!("cannot parse sensitivity `{s}`; expected fixed:<rho> or uniform:<lo>,<hi>"));
        let (kind, rest) = s.split_once(':').ok_or_else(usage)?;
        let mode = match kind.trim() {
            "fixed" => SensitivityMode::Fixed { value: rest.trim().parse().map_err(|_| usage())? },
            "uniform" => {
                let (lo, hi) = rest.split_once(',').ok_or_else(usage)?;
                SensitivityMode::Uniform {
                    lo: lo.trim().parse().map_err(|_| usage())?,
                    hi: hi.trim().parse().map_err(|_| usage())?,
                }
            }
            _ => return Err(usage()),
        };
        mode.validate()?;
        Ok(mode)
    }
}

/// Prior hyperparameters. Gamma pairs are shape and rate; normal variances
/// are variances, not precisions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Variance of the normal prior on each fixed effect.
    pub beta_var: f64,
    /// Variance of the normal prior on the hazard regression coefficients.
    pub coef_var: f64,
    pub tau_eps_shape: f64,
    pub tau_eps_rate: f64,
    pub tau_u_shape: f64,
    pub tau_u_rate: f64,
    pub tau_h0_shape: f64,
    pub tau_h0_rate: f64,
    /// Degrees of freedom of the inverse-Wishart prior on the random-effects
    /// covariance (`n_u + 1`).
    pub omega_df: f64,
    /// Scalar `c` of the inverse-Wishart scale matrix `(c / tau_u) * I`.
    pub omega_scale: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            beta_var: 100.0,
            coef_var: 100.0,
            tau_eps_shape: 0.01,
            tau_eps_rate: 0.01,
            tau_u_shape: 0.5,
            tau_u_rate: 0.01,
            tau_h0_shape: 5.0,
            tau_h0_rate: 0.5,
            omega_df: (N_RANEF + 1) as f64,
            omega_scale: 4.0,
        }
    }
}

/// Structural configuration shared by the simulator, likelihood, and sampler.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ModelSpecDef", into = "ModelSpecDef")]
pub struct ModelSpec {
    pub ncs: NcsBasis,
    pub bh_basis: [BsplineBasis; 2],
    pub penalty_spec: PenaltySpec,
    pub sensitivity: SensitivityMode,
    pub priors: PriorConfig,
    pub quadrature: RuleKind,
    pub age_center: f64,
    /// Degrees of freedom of the Student-t residual distribution.
    pub t_df: f64,
    penalties: [PenaltyMatrix; 2],
    hazard_cuts: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelSpecDef {
    ncs: NcsBasis,
    bh_basis: [BsplineBasis; 2],
    penalty_spec: PenaltySpec,
    sensitivity: SensitivityMode,
    #[serde(default)]
    priors: PriorConfigOpt,
    #[serde(default)]
    quadrature: RuleKind,
    age_center: f64,
    #[serde(default = "default_t_df")]
    t_df: f64,
}

fn default_t_df() -> f64 {
    3.0
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
struct PriorConfigOpt(Option<PriorConfig>);

impl TryFrom<ModelSpecDef> for ModelSpec {
    type Error = Error;
    fn try_from(def: ModelSpecDef) -> Result<Self> {
        ModelSpec::from_parts(
            def.ncs,
            def.bh_basis,
            def.penalty_spec,
            def.sensitivity,
            def.priors.0.unwrap_or_default(),
            def.quadrature,
            def.age_center,
            def.t_df,
        )
    }
}

impl From<ModelSpec> for ModelSpecDef {
    fn from(spec: ModelSpec) -> Self {
        ModelSpecDef {
            ncs: spec.ncs,
            bh_basis: spec.bh_basis,
            penalty_spec: spec.penalty_spec,
            sensitivity: spec.sensitivity,
            priors: PriorConfigOpt(Some(spec.priors)),
            quadrature: spec.quadrature,
            age_center: spec.age_center,
            t_df: spec.t_df,
        }
    }
}

impl ModelSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        ncs: NcsBasis,
        bh_basis: [BsplineBasis; 2],
        penalty_spec: PenaltySpec,
        sensitivity: SensitivityMode,
        priors: PriorConfig,
        quadrature: RuleKind,
        age_center: f64,
        t_df: f64,
    ) -> Result<Self> {
        sensitivity.validate()?;
        if ncs.df() != 3 {
            return Err(Error::config(format!(
                "the longitudinal sub-model expects a natural spline with 3 degrees of freedom, got {}",
                ncs.df()
            )));
        }
        if !(t_df > 2.0) {
            return Err(Error::config("t residual degrees of freedom must exceed 2"));
        }
        let penalties = [
            PenaltyMatrix::new(bh_basis[0].n_basis(), penalty_spec)?,
            PenaltyMatrix::new(bh_basis[1].n_basis(), penalty_spec)?,
        ];
        let mut hazard_cuts: Vec<f64> = Vec::new();
        for b in &bh_basis {
            hazard_cuts.extend_from_slice(b.internal_knots());
        }
        // Trajectory spline knots (and their one-year echoes through the
        // yearly-change term) are curvature breakpoints of the hazard too.
        for &k in ncs.knots() {
            hazard_cuts.push(k);
            hazard_cuts.push(k + 1.0);
        }
        hazard_cuts.retain(|k| k.is_finite() && *k > 0.0);
        hazard_cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        hazard_cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

        Ok(ModelSpec {
            ncs,
            bh_basis,
            penalty_spec,
            sensitivity,
            priors,
            quadrature,
            age_center,
            t_df,
            penalties,
            hazard_cuts,
        })
    }

    /// Standard spec: shared B-spline basis shape for both causes on
    /// `[0, horizon]`, knot count defaulted from the sensitivity mode.
    pub fn build(
        ncs: NcsBasis,
        horizon: f64,
        sensitivity: SensitivityMode,
        bh_knot_count: Option<usize>,
    ) -> Result<Self> {
        let knot_count = bh_knot_count.unwrap_or_else(|| sensitivity.default_bh_knot_count());
        let basis = BsplineBasis::from_knot_count(knot_count, 3, (0.0, horizon))?;
        ModelSpec::from_parts(
            ncs,
            [basis.clone(), basis],
            PenaltySpec::default(),
            sensitivity,
            PriorConfig::default(),
            RuleKind::default(),
            62.0,
            3.0,
        )
    }

    pub fn penalty(&self, cause: Cause) -> &PenaltyMatrix {
        &self.penalties[cause.index()]
    }

    pub fn n_basis(&self, cause: Cause) -> usize {
        self.bh_basis[cause.index()].n_basis()
    }

    pub fn rule(&self) -> QuadratureRule {
        QuadratureRule::new(self.quadrature)
    }

    /// Sorted interior breakpoints across which hazard integrands lose
    /// smoothness; integration splits at these.
    pub fn hazard_cuts(&self) -> &[f64] {
        &self.hazard_cuts
    }

    pub fn horizon(&self) -> f64 {
        self.bh_basis[0].range().1
    }
}

/// One full point in parameter space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterState {
    /// Fixed effects: intercept, three spline coefficients, age.
    pub beta: [f64; N_FIXED],
    /// Per-subject random effects (intercept and spline deviations).
    pub u: Vec<[f64; N_RANEF]>,
    /// Random-effects covariance.
    pub omega: [[f64; N_RANEF]; N_RANEF],
    /// Residual precision scale: the squared scale of the t residual is
    /// `1 / tau_eps`.
    pub tau_eps: f64,
    pub tau_u: f64,
    /// Per-cause log-baseline-hazard spline coefficients.
    pub gamma_h0: [Vec<f64>; 2],
    /// Per-cause P-spline smoothing precisions.
    pub tau_h0: [f64; 2],
    /// Per-cause log-PSA-density coefficients.
    pub gamma: [f64; 2],
    /// Per-cause association parameters: `[value effect, yearly-change effect]`.
    pub alpha: [[f64; 2]; 2],
    /// Biopsy sensitivity.
    pub rho: f64,
    /// Latent t-mixture weights per subject and measurement (sampler-internal).
    #[serde(default)]
    pub lambda: Vec<Vec<f64>>,
}

impl ParameterState {
    pub fn sigma(&self) -> f64 {
        (1.0 / self.tau_eps).sqrt()
    }

    pub fn omega_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.omega[i][j])
    }

    pub fn set_omega(&mut self, m: &Matrix4<f64>) {
        for i in 0..N_RANEF {
            for j in 0..N_RANEF {
                self.omega[i][j] = m[(i, j)];
            }
        }
    }

    pub fn validate(&self, spec: &ModelSpec, n_subjects: usize) -> Result<()> {
        if self.u.len() != n_subjects {
            return Err(Error::invalid_input(format!(
                "random effects for {} subjects, dataset has {n_subjects}",
                self.u.len()
            )));
        }
        for cause in Cause::ALL {
            let k = cause.index();
            if self.gamma_h0[k].len() != spec.n_basis(cause) {
                return Err(Error::invalid_input(format!(
                    "{} baseline coefficients have length {}, basis needs {}",
                    cause.label(),
                    self.gamma_h0[k].len(),
                    spec.n_basis(cause)
                )));
            }
            if !(self.tau_h0[k] > 0.0) {
                return Err(Error::invalid_input("smoothing precisions must be positive"));
            }
        }
        if !(self.tau_eps > 0.0 && self.tau_u > 0.0) {
            return Err(Error::invalid_input("precisions must be positive"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid_input(format!("sensitivity must be in [0, 1], got {}", self.rho)));
        }
        let all_finite = self.beta.iter().all(|v| v.is_finite())
            && self.u.iter().flatten().all(|v| v.is_finite())
            && self.omega.iter().flatten().all(|v| v.is_finite())
            && self.gamma_h0.iter().flatten().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::invalid_input("parameter state contains non-finite values"));
        }
        if nalgebra::Cholesky::new(self.omega_matrix()).is_none() {
            return Err(Error::invalid_input("random-effects covariance is not positive definite"));
        }
        if self.lambda.iter().flatten().any(|&l| !(l > 0.0)) {
            return Err(Error::invalid_input("mixture weights must be positive"));
        }
        Ok(())
    }
}

/// The per-cause hazard coefficients, borrowed from a [`ParameterState`].
#[derive(Debug, Clone, Copy)]
pub struct HazardCoefs<'a> {
    pub gamma_h0: &'a [f64],
    pub gamma: f64,
    pub alpha: [f64; 2],
}

impl ParameterState {
    pub fn hazard_coefs(&self, cause: Cause) -> HazardCoefs<'_> {
        let k = cause.index();
        HazardCoefs { gamma_h0: &self.gamma_h0[k], gamma: self.gamma[k], alpha: self.alpha[k] }
    }
}

/// Everything subject-specific the trajectory needs.
#[derive(Debug, Clone, Copy)]
pub struct SubjectFrame<'a> {
    pub beta: &'a [f64; N_FIXED],
    pub u: &'a [f64; N_RANEF],
    pub age: f64,
    pub log_psad: f64,
}

const MAX_BASIS: usize = 32;

/// Fixed-effect design row at time `t`: intercept, natural spline values,
/// centered age.
pub fn longitudinal_design(spec: &ModelSpec, age: f64, t: f64) -> Result<[f64; N_FIXED]> {
    let mut c = [0.0; 3];
    spec.ncs.eval_into(t, &mut c)?;
    Ok([1.0, c[0], c[1], c[2], age - spec.age_center])
}

/// Expected trajectory `m(t)` for a subject frame.
pub fn mean_at(spec: &ModelSpec, frame: &SubjectFrame, t: f64) -> Result<f64> {
    let w = longitudinal_design(spec, frame.age, t)?;
    Ok(design_mean(&w, frame.beta, frame.u))
}

/// `m(t)` as the dot product of a design row with fixed plus random effects;
/// the random effects pad the design's leading four entries.
pub fn design_mean(w: &[f64; N_FIXED], beta: &[f64; N_FIXED], u: &[f64; N_RANEF]) -> f64 {
    let mut m = 0.0;
    for i in 0..N_FIXED {
        m += w[i] * beta[i];
    }
    for i in 0..N_RANEF {
        m += w[i] * u[i];
    }
    m
}

/// Functional form `f_k = alpha_1k m(t) + alpha_2k (m(t) - m(t-1))`.
///
/// The trajectory extrapolates linearly left of the spline boundary, which is
/// what makes `m(t-1)` well defined for `t < 1`.
pub fn functional_form_at(
    spec: &ModelSpec,
    alpha: &[f64; 2],
    frame: &SubjectFrame,
    t: f64,
) -> Result<f64> {
    let m = mean_at(spec, frame, t)?;
    let m_lag = mean_at(spec, frame, t - 1.0)?;
    Ok(alpha[0] * m + alpha[1] * (m - m_lag))
}

/// Log cause-specific hazard at `t`. Times outside the baseline basis range
/// are clamped to its boundary.
pub fn log_hazard_at(
    spec: &ModelSpec,
    coefs: &HazardCoefs,
    frame: &SubjectFrame,
    t: f64,
    cause: Cause,
) -> Result<f64> {
    let basis = &spec.bh_basis[cause.index()];
    let nb = basis.n_basis();
    assert!(nb <= MAX_BASIS);
    let mut g = [0.0; MAX_BASIS];
    basis.eval_into(t, &mut g[..nb]);
    let mut log_h0 = 0.0;
    for i in 0..nb {
        log_h0 += g[i] * coefs.gamma_h0[i];
    }
    let f = functional_form_at(spec, &coefs.alpha, frame, t)?;
    Ok(log_h0 + coefs.gamma * frame.log_psad + f)
}

pub fn hazard_at(
    spec: &ModelSpec,
    coefs: &HazardCoefs,
    frame: &SubjectFrame,
    t: f64,
    cause: Cause,
) -> Result<f64> {
    Ok(log_hazard_at(spec, coefs, frame, t, cause)?.exp())
}

/// Cumulative hazard `H_k(t)` by Gauss-Kronrod integration over `[0, t]`,
/// split at the hazard's smoothness breakpoints.
pub fn cumulative_hazard_at(
    spec: &ModelSpec,
    coefs: &HazardCoefs,
    frame: &SubjectFrame,
    t: f64,
    cause: Cause,
) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::invalid_input(format!("cumulative hazard needs t >= 0, got {t}")));
    }
    let rule = spec.rule();
    let (v, _) = rule.integrate_split(
        |s| log_hazard_at(spec, coefs, frame, s, cause).map(f64::exp).unwrap_or(f64::NAN),
        0.0,
        t,
        spec.hazard_cuts(),
    )?;
    Ok(v)
}

fn frame_for<'a>(
    params: &'a ParameterState,
    subject_idx: usize,
    subject: &'a PatientRecord,
) -> SubjectFrame<'a> {
    SubjectFrame {
        beta: &params.beta,
        u: &params.u[subject_idx],
        age: subject.age,
        log_psad: subject.log_psad,
    }
}

/// `m_i(t)` for a subject of a dataset.
pub fn longitudinal_mean(
    spec: &ModelSpec,
    params: &ParameterState,
    subject_idx: usize,
    subject: &PatientRecord,
    t: f64,
) -> Result<f64> {
    mean_at(spec, &frame_for(params, subject_idx, subject), t)
}

pub fn functional_form(
    spec: &ModelSpec,
    params: &ParameterState,
    subject_idx: usize,
    subject: &PatientRecord,
    t: f64,
    cause: Cause,
) -> Result<f64> {
    functional_form_at(
        spec,
        &params.alpha[cause.index()],
        &frame_for(params, subject_idx, subject),
        t,
    )
}

pub fn hazard(
    spec: &ModelSpec,
    params: &ParameterState,
    subject_idx: usize,
    subject: &PatientRecord,
    t: f64,
    cause: Cause,
) -> Result<f64> {
    hazard_at(
        spec,
        &params.hazard_coefs(cause),
        &frame_for(params, subject_idx, subject),
        t,
        cause,
    )
}

pub fn cumulative_hazard(
    spec: &ModelSpec,
    params: &ParameterState,
    subject_idx: usize,
    subject: &PatientRecord,
    t: f64,
    cause: Cause,
) -> Result<f64> {
    cumulative_hazard_at(
        spec,
        &params.hazard_coefs(cause),
        &frame_for(params, subject_idx, subject),
        t,
        cause,
    )
}

/// A cause-specific hazard the survival likelihood can integrate.
///
/// The model hazard implements this; tests substitute constant or
/// piecewise-constant hazards with exact closed forms through the same
/// machinery.
pub trait CauseHazard {
    fn log_hazard(&self, t: f64) -> f64;

    fn hazard(&self, t: f64) -> f64 {
        self.log_hazard(t).exp()
    }

    /// Sorted interior points across which the hazard is not smooth.
    fn breakpoints(&self) -> &[f64];
}

/// The joint model's spline hazard for one subject and cause.
pub struct SplineHazard<'a> {
    spec: &'a ModelSpec,
    coefs: HazardCoefs<'a>,
    frame: SubjectFrame<'a>,
    cause: Cause,
}

impl<'a> SplineHazard<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        params: &'a ParameterState,
        subject_idx: usize,
        subject: &'a PatientRecord,
        cause: Cause,
    ) -> Self {
        SplineHazard {
            spec,
            coefs: params.hazard_coefs(cause),
            frame: frame_for(params, subject_idx, subject),
            cause,
        }
    }

    pub fn from_frame(
        spec: &'a ModelSpec,
        coefs: HazardCoefs<'a>,
        frame: SubjectFrame<'a>,
        cause: Cause,
    ) -> Self {
        SplineHazard { spec, coefs, frame, cause }
    }
}

impl CauseHazard for SplineHazard<'_> {
    fn log_hazard(&self, t: f64) -> f64 {
        log_hazard_at(self.spec, &self.coefs, &self.frame, t, self.cause).unwrap_or(f64::NAN)
    }

    fn breakpoints(&self) -> &[f64] {
        self.spec.hazard_cuts()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spline::NcsBasis;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;

    pub(crate) fn test_spec() -> ModelSpec {
        let ncs = NcsBasis::new((0.0, 12.5), vec![2.5, 6.5]).unwrap();
        ModelSpec::build(ncs, 12.5, SensitivityMode::fixed(0.75), None).unwrap()
    }

    pub(crate) fn reference_params(spec: &ModelSpec, n_subjects: usize) -> ParameterState {
        let nb = spec.n_basis(Cause::Progression);
        ParameterState {
            beta: [2.35, 0.27, 0.62, 1.00, 0.02],
            u: vec![[0.0; 4]; n_subjects],
            omega: [
                [0.49, -0.04, -0.09, 0.01],
                [-0.04, 0.77, 0.43, -0.08],
                [-0.09, 0.43, 1.41, 1.43],
                [0.01, -0.08, 1.43, 2.60],
            ],
            tau_eps: 47.39,
            tau_u: 50.0,
            gamma_h0: [vec![-2.0; nb], vec![-4.5; nb]],
            tau_h0: [10.0, 10.0],
            gamma: [0.41, 0.25],
            alpha: [[0.16, 1.79], [0.40, 2.22]],
            rho: 0.75,
            lambda: Vec::new(),
        }
    }

    fn subject() -> PatientRecord {
        PatientRecord {
            id: "s1".into(),
            age: 62.0,
            psad: 0.1,
            log_psad: 0.1f64.ln(),
            measurements: vec![(0.0, 2.3), (0.5, 2.4)],
            biopsy_times: vec![0.0, 1.0, 2.0],
            status: EventStatus::Censored,
            terminal_time: 3.0,
        }
    }

    #[test]
    fn mean_at_origin_is_the_intercept() {
        let spec = test_spec();
        let params = reference_params(&spec, 1);
        let s = subject();
        let m = longitudinal_mean(&spec, &params, 0, &s, 0.0).unwrap();
        assert_abs_diff_eq!(m, 2.35, epsilon = 1e-12);
    }

    #[test]
    fn mean_is_constant_without_spline_terms() {
        let spec = test_spec();
        let mut params = reference_params(&spec, 1);
        params.beta = [2.35, 0.0, 0.0, 0.0, 0.02];
        let mut s = subject();
        s.age = 70.0;
        for t in [0.0, 0.7, 3.0, 9.9, 12.5] {
            let m = longitudinal_mean(&spec, &params, 0, &s, t).unwrap();
            assert_abs_diff_eq!(m, 2.35 + 0.02 * 8.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn intercept_random_effect_shifts_mean() {
        let spec = test_spec();
        let mut params = reference_params(&spec, 1);
        let s = subject();
        let before: Vec<f64> = [0.3, 1.7, 6.0]
            .iter()
            .map(|&t| longitudinal_mean(&spec, &params, 0, &s, t).unwrap())
            .collect();
        params.u[0][0] += 0.8;
        for (i, &t) in [0.3, 1.7, 6.0].iter().enumerate() {
            let after = longitudinal_mean(&spec, &params, 0, &s, t).unwrap();
            assert_abs_diff_eq!(after, before[i] + 0.8, epsilon = 1e-12);
        }
    }

    #[test]
    fn functional_form_trivial_cases() {
        let spec = test_spec();
        let mut params = reference_params(&spec, 1);
        let s = subject();
        params.alpha[0] = [0.0, 0.0];
        for t in [0.2, 1.0, 5.0] {
            assert_eq!(functional_form(&spec, &params, 0, &s, t, Cause::Progression).unwrap(), 0.0);
        }
        // constant trajectory: the yearly change vanishes
        params.alpha[0] = [0.16, 1.79];
        params.beta = [2.0, 0.0, 0.0, 0.0, 0.0];
        let f = functional_form(&spec, &params, 0, &s, 4.0, Cause::Progression).unwrap();
        assert_abs_diff_eq!(f, 0.16 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn unit_yearly_change_scales_progression_hazard_by_exp_alpha2() {
        let spec = test_spec();
        let params = reference_params(&spec, 2);
        let s = subject();
        let t = 3.0;

        // Solve for random effects giving m(t) equal for both subjects but a
        // yearly change differing by exactly one unit.
        let w_t = longitudinal_design(&spec, s.age, t).unwrap();
        let w_lag = longitudinal_design(&spec, s.age, t - 1.0).unwrap();
        let a = nalgebra::Matrix2x4::from_fn(|r, c| if r == 0 { w_t[c] } else { w_lag[c] });
        let rhs = nalgebra::Vector2::new(0.0, -1.0);
        let u_b = a.transpose() * (a * a.transpose()).try_inverse().unwrap() * rhs;

        let mut params_b = params.clone();
        params_b.u[1] = [u_b[0], u_b[1], u_b[2], u_b[3]];

        let h_a = hazard(&spec, &params, 0, &s, t, Cause::Progression).unwrap();
        let h_b = hazard(&spec, &params_b, 1, &s, t, Cause::Progression).unwrap();
        assert_abs_diff_eq!(h_b / h_a, 1.79f64.exp(), epsilon = 1e-8);
        assert_abs_diff_eq!(1.79f64.exp(), 5.99, epsilon = 0.01);
    }

    #[test]
    fn hazard_reduces_to_baseline_without_covariates() {
        let spec = test_spec();
        let mut params = reference_params(&spec, 1);
        params.gamma = [0.0, 0.0];
        params.alpha = [[0.0, 0.0], [0.0, 0.0]];
        let nb = spec.n_basis(Cause::Progression);
        params.gamma_h0[0] = (0..nb).map(|i| -3.0 + 0.1 * i as f64).collect();
        let s = subject();
        for t in [0.1, 2.0, 7.7, 12.0] {
            let h = hazard(&spec, &params, 0, &s, t, Cause::Progression).unwrap();
            let g = spec.bh_basis[0].eval(t);
            let log_h0: f64 = g.iter().zip(&params.gamma_h0[0]).map(|(a, b)| a * b).sum();
            assert_abs_diff_eq!(h, log_h0.exp(), epsilon = 1e-12 * log_h0.exp());
        }
    }

    #[test]
    fn psad_hazard_ratio_identity() {
        let spec = test_spec();
        let mut params = reference_params(&spec, 2);
        params.gamma[0] = 1.48f64.ln();
        let mut s_a = subject();
        let mut s_b = subject();
        s_b.psad = s_a.psad * 2.0;
        s_a.log_psad = s_a.psad.ln();
        s_b.log_psad = s_b.psad.ln();
        for t in [0.5, 3.3, 9.0] {
            let h_a = hazard(&spec, &params, 0, &s_a, t, Cause::Progression).unwrap();
            let h_b = hazard(&spec, &params, 1, &s_b, t, Cause::Progression).unwrap();
            let expect = (params.gamma[0] * 2.0f64.ln()).exp();
            assert_abs_diff_eq!(h_b / h_a, expect, epsilon = 1e-10);
            assert_abs_diff_eq!(expect, 1.31, epsilon = 0.005);
        }
    }

    #[test]
    fn hazard_strictly_positive_over_random_parameter_sweep() {
        let spec = test_spec();
        let mut params = reference_params(&spec, 1);
        let s = subject();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(42);
        for _ in 0..1_000_000 {
            let t: f64 = rng.random_range(0.0..12.5);
            for b in params.beta.iter_mut() {
                *b = rng.random_range(-3.0..3.0);
            }
            for v in params.u[0].iter_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
            params.gamma[0] = rng.random_range(-2.0..2.0);
            params.alpha[0] = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let h = hazard(&spec, &params, 0, &s, t, Cause::Progression).unwrap();
            assert!(h > 0.0, "hazard not positive at t={t}");
        }
    }

    #[test]
    fn cumulative_hazard_zero_at_origin_and_linear_for_flat_baseline() {
        let spec = test_spec();
        let mut params = reference_params(&spec, 1);
        params.gamma = [0.0, 0.0];
        params.alpha = [[0.0, 0.0], [0.0, 0.0]];
        let lam = 0.3f64;
        let nb = spec.n_basis(Cause::Progression);
        params.gamma_h0[0] = vec![lam.ln(); nb];
        let s = subject();
        assert_eq!(cumulative_hazard(&spec, &params, 0, &s, 0.0, Cause::Progression).unwrap(), 0.0);
        for t in [0.5, 2.0, 8.0, 12.5] {
            let h = cumulative_hazard(&spec, &params, 0, &s, t, Cause::Progression).unwrap();
            assert_abs_diff_eq!(h, lam * t, epsilon = 1e-10);
        }
    }

    #[test]
    fn cumulative_hazard_matches_dense_trapezoid() {
        let spec = test_spec();
        let mut params = reference_params(&spec, 1);
        let nb = spec.n_basis(Cause::Progression);
        params.gamma_h0[0] = (0..nb).map(|i| -2.5 + 0.6 * (i as f64 * 0.9).sin()).collect();
        params.u[0] = [0.3, -0.2, 0.4, 0.1];
        let s = subject();
        let t_end = 9.7;
        let n = 1_000_000usize;
        let dt = t_end / n as f64;
        let mut acc = 0.0;
        let mut prev = hazard(&spec, &params, 0, &s, 0.0, Cause::Progression).unwrap();
        for i in 1..=n {
            let cur = hazard(&spec, &params, 0, &s, i as f64 * dt, Cause::Progression).unwrap();
            acc += 0.5 * dt * (prev + cur);
            prev = cur;
        }
        let h = cumulative_hazard(&spec, &params, 0, &s, t_end, Cause::Progression).unwrap();
        assert!((h - acc).abs() / acc < 1e-6, "GK {h} vs trapezoid {acc}");
    }

    #[test]
    fn cumulative_hazard_monotone_on_random_grids() {
        let spec = test_spec();
        let mut params = reference_params(&spec, 1);
        let s = subject();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for _ in 0..20 {
            for v in params.u[0].iter_mut() {
                *v = rng.random_range(-1.5..1.5);
            }
            let mut ts: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..12.5)).collect();
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let hs: Vec<f64> = ts
                .iter()
                .map(|&t| cumulative_hazard(&spec, &params, 0, &s, t, Cause::Treatment).unwrap())
                .collect();
            for w in hs.windows(2) {
                assert!(w[1] >= w[0] - 1e-12);
            }
        }
    }

    #[test]
    fn design_row_matches_on_the_fly_mean() {
        let spec = test_spec();
        let params = reference_params(&spec, 1);
        let mut s = subject();
        s.age = 58.0;
        let mut params = params;
        params.u[0] = [0.2, -0.6, 0.9, 0.35];
        for t in [-0.4, 0.0, 1.3, 6.5, 14.0] {
            let w = longitudinal_design(&spec, s.age, t).unwrap();
            let direct = design_mean(&w, &params.beta, &params.u[0]);
            let m = longitudinal_mean(&spec, &params, 0, &s, t).unwrap();
            assert_eq!(direct.to_bits(), m.to_bits());
        }
    }

    #[test]
    fn patient_record_validation() {
        let good = subject();
        assert!(good.validate().is_ok());

        let mut bad = good.clone();
        bad.biopsy_times = vec![0.5, 1.0];
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.biopsy_times = vec![0.0, 1.0, 1.0];
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.status = EventStatus::ProgressionDetected;
        bad.terminal_time = 2.5;
        assert!(bad.validate().is_err());
        bad.terminal_time = 2.0;
        assert!(bad.validate().is_ok());

        let mut bad = good.clone();
        bad.terminal_time = 1.5; // before last biopsy
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.measurements.push((5.0, 2.0)); // past terminal
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sensitivity_mode_parsing() {
        let m: SensitivityMode = "fixed:0.75".parse().unwrap();
        assert_eq!(m, SensitivityMode::Fixed { value: 0.75 });
        let m: SensitivityMode = "uniform:0.6,0.9".parse().unwrap();
        assert_eq!(m, SensitivityMode::Uniform { lo: 0.6, hi: 0.9 });
        assert_eq!(m.default_bh_knot_count(), 4);
        assert!("uniform:0.9,0.6".parse::<SensitivityMode>().is_err());
        assert!("fixed:0".parse::<SensitivityMode>().is_err());
        assert!("beta:1,2".parse::<SensitivityMode>().is_err());
    }

    #[test]
    fn model_spec_round_trips_through_serde() {
        let spec = test_spec();
        let json = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.n_basis(Cause::Progression), spec.n_basis(Cause::Progression));
        assert_eq!(back.hazard_cuts(), spec.hazard_cuts());
        let v = spec.ncs.eval(4.2).unwrap();
        let v2 = back.ncs.eval(4.2).unwrap();
        assert_eq!(v, v2);
    }
}
