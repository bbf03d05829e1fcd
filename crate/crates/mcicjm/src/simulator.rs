//! Forward simulation of surveillance-style datasets from the joint model.
//!
//! Latent progression and treatment times come from the cause-specific
//! hazards by inverse-transform sampling (all-cause cumulative hazard solved
//! by bracketing and bisection, then a cause draw proportional to the
//! cause-specific hazards at the event time). The observation layer applies
//! the visit schedule: jittered biomarker measurements with t-distributed
//! noise, jittered biopsies, a per-biopsy detection draw with probability
//! `rho_true` once progression has happened, administrative censoring at the
//! horizon, and exponential dropout.
//!
//! Every subject consumes a fixed sequence of draws from its own RNG
//! substream, so datasets are reproducible and comparable across sensitivity
//! settings under common random numbers.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    mean_at, Cause, EventStatus, HazardCoefs, ModelSpec, ParameterState, PatientRecord,
    SubjectFrame, N_RANEF,
};
use crate::quadrature::QuadratureRule;
use crate::stats::{normal_cdf, normal_quantile};

/// Visit schedule configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Spacing of biomarker measurements (years).
    pub psa_interval: f64,
    /// Half-width of the uniform jitter on measurement times.
    pub psa_jitter: f64,
    /// Scheduled biopsy times (years), excluding the enrollment biopsy at 0.
    pub biopsy_times: Vec<f64>,
    /// Half-width of the uniform jitter on biopsy times.
    pub biopsy_jitter: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            psa_interval: 0.25,
            psa_jitter: 0.04,
            biopsy_times: vec![1.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0],
            biopsy_jitter: 0.1,
        }
    }
}

/// The generating parameter set plus schedule and censoring configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimTruth {
    pub spec: ModelSpec,
    pub beta: [f64; 5],
    pub omega: [[f64; N_RANEF]; N_RANEF],
    pub tau_eps: f64,
    pub gamma_h0: [Vec<f64>; 2],
    pub gamma: [f64; 2],
    pub alpha: [[f64; 2]; 2],
    pub rho_true: f64,
    pub schedule: ScheduleConfig,
    pub horizon: f64,
    /// Rate of the exponential dropout process (0 disables dropout).
    pub dropout_rate: f64,
    pub n_subjects: usize,
    pub age_mean: f64,
    pub age_sd: f64,
    pub age_range: (f64, f64),
    pub log_psad_mean: f64,
    pub log_psad_sd: f64,
}

impl Default for SimTruth {
    fn default() -> Self {
        let ncs = crate::spline::NcsBasis::new((0.0, 12.5), vec![2.5, 6.5])
            .expect("default trajectory knots");
        let spec = ModelSpec::build(ncs, 12.5, crate::model::SensitivityMode::fixed(0.75), None)
            .expect("default model spec");
        SimTruth {
            spec,
            beta: [2.35, 0.27, 0.62, 1.00, 0.02],
            omega: [
                [0.49, -0.04, -0.09, 0.01],
                [-0.04, 0.77, 0.43, -0.08],
                [-0.09, 0.43, 1.41, 1.43],
                [0.01, -0.08, 1.43, 2.60],
            ],
            tau_eps: 47.39,
            gamma_h0: [
                vec![
                    -3.02, -2.57, -2.17, -1.87, -1.78, -1.87, -2.04, -2.26, -2.51, -2.74, -2.95,
                    -3.15,
                ],
                vec![
                    -5.13, -4.55, -4.26, -4.31, -4.47, -4.65, -4.80, -4.91, -5.11, -5.37, -5.66,
                    -5.97,
                ],
            ],
            gamma: [0.41, 0.25],
            alpha: [[0.16, 1.79], [0.40, 2.22]],
            rho_true: 0.75,
            schedule: ScheduleConfig::default(),
            horizon: 12.5,
            dropout_rate: 0.185,
            n_subjects: 500,
            age_mean: 62.0,
            age_sd: 6.0,
            age_range: (40.0, 85.0),
            log_psad_mean: 0.1f64.ln(),
            log_psad_sd: 0.5,
        }
    }
}

impl SimTruth {
    /// A truth with flat baselines and no covariate effects, so both hazards
    /// are exactly constant. Useful for closed-form checks.
    pub fn constant_hazards(lambda_prg: f64, lambda_trt: f64, horizon: f64) -> Self {
        let ncs = crate::spline::NcsBasis::new((0.0, horizon), vec![horizon / 3.0, horizon / 1.5])
            .expect("knots");
        let spec = ModelSpec::build(ncs, horizon, crate::model::SensitivityMode::fixed(0.75), None)
            .expect("spec");
        let nb = spec.n_basis(Cause::Progression);
        SimTruth {
            beta: [0.0; 5],
            omega: [
                [1e-12, 0.0, 0.0, 0.0],
                [0.0, 1e-12, 0.0, 0.0],
                [0.0, 0.0, 1e-12, 0.0],
                [0.0, 0.0, 0.0, 1e-12],
            ],
            gamma_h0: [vec![lambda_prg.ln(); nb], vec![lambda_trt.ln(); nb]],
            gamma: [0.0, 0.0],
            alpha: [[0.0, 0.0], [0.0, 0.0]],
            horizon,
            dropout_rate: 0.0,
            spec,
            ..SimTruth::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho_true > 0.0 && self.rho_true <= 1.0) {
            return Err(Error::config(format!(
                "generating sensitivity must be in (0, 1], got {}",
                self.rho_true
            )));
        }
        for cause in Cause::ALL {
            if self.gamma_h0[cause.index()].len() != self.spec.n_basis(cause) {
                return Err(Error::config(format!(
                    "{} baseline coefficients do not match the basis dimension",
                    cause.label()
                )));
            }
        }
        if !(self.horizon > 0.0 && self.horizon <= self.spec.horizon() + 1e-9) {
            return Err(Error::config("horizon must be positive and inside the hazard basis range"));
        }
        if self.dropout_rate < 0.0 || !(self.tau_eps > 0.0) {
            return Err(Error::config("dropout rate must be nonnegative and tau_eps positive"));
        }
        if omega_cholesky(&self.omega).is_none() {
            return Err(Error::config("generating covariance is not positive definite"));
        }
        Ok(())
    }

    pub fn hazard_coefs(&self, cause: Cause) -> HazardCoefs<'_> {
        let k = cause.index();
        HazardCoefs { gamma_h0: &self.gamma_h0[k], gamma: self.gamma[k], alpha: self.alpha[k] }
    }

    /// The truth as a full parameter point (for likelihood evaluation).
    pub fn to_parameter_state(&self, u: Vec<[f64; N_RANEF]>) -> ParameterState {
        ParameterState {
            beta: self.beta,
            u,
            omega: self.omega,
            tau_eps: self.tau_eps,
            tau_u: 50.0,
            gamma_h0: self.gamma_h0.clone(),
            tau_h0: [10.0, 10.0],
            gamma: self.gamma,
            alpha: self.alpha,
            rho: self.rho_true,
            lambda: Vec::new(),
        }
    }
}

fn omega_cholesky(omega: &[[f64; N_RANEF]; N_RANEF]) -> Option<nalgebra::Matrix4<f64>> {
    let m = nalgebra::Matrix4::from_fn(|i, j| omega[i][j]);
    nalgebra::Cholesky::new(m).map(|c| c.l().into_owned())
}

/// Subject-level latent draws.
#[derive(Debug, Clone, Copy)]
pub struct SubjectLatents {
    pub u: [f64; N_RANEF],
    pub age: f64,
    pub log_psad: f64,
}

/// Ground truth for one simulated subject.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentRecord {
    pub id: String,
    pub u: [f64; N_RANEF],
    /// Latent progression time; `None` when progression never happens before
    /// the horizon (or the first event was treatment).
    pub progression_time: Option<f64>,
    /// Latent treatment time; `None` when treatment does not happen before
    /// the horizon.
    pub treatment_time: Option<f64>,
    /// 0 none, 1 progression, 2 treatment.
    pub first_cause: u8,
}

/// A simulated dataset with its generating latents.
#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub patients: Vec<PatientRecord>,
    pub latents: Vec<LatentRecord>,
    pub seed: u64,
}

impl SimulatedDataset {
    /// Fractions of censored, progression-detected, and treated subjects.
    pub fn status_proportions(&self) -> [f64; 3] {
        let n = self.patients.len().max(1) as f64;
        let mut counts = [0usize; 3];
        for p in &self.patients {
            counts[p.status.code() as usize] += 1;
        }
        [counts[0] as f64 / n, counts[1] as f64 / n, counts[2] as f64 / n]
    }
}

/// Draw `(u_i, age, log PSA density)` for a new subject.
pub fn draw_subject_latents<R: Rng>(truth: &SimTruth, rng: &mut R) -> SubjectLatents {
    let l = omega_cholesky(&truth.omega).expect("validated covariance");
    let z = nalgebra::Vector4::from_fn(|_, _| standard_normal(rng));
    let v = l * z;
    let u = [v[0], v[1], v[2], v[3]];

    // Truncated normal age by inverse-CDF so exactly one uniform is consumed.
    let (lo, hi) = truth.age_range;
    let a = normal_cdf((lo - truth.age_mean) / truth.age_sd);
    let b = normal_cdf((hi - truth.age_mean) / truth.age_sd);
    let p = a + (b - a) * rng.random::<f64>();
    let age = truth.age_mean + truth.age_sd * normal_quantile(p.clamp(1e-12, 1.0 - 1e-12));

    let log_psad = truth.log_psad_mean + truth.log_psad_sd * standard_normal(rng);
    SubjectLatents { u, age, log_psad }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // inverse-CDF sampling keeps the per-subject draw count fixed
    normal_quantile(rng.random::<f64>().clamp(1e-16, 1.0 - 1e-16))
}

/// Cumulative hazard tabulated on a breakpoint grid, with inversion by
/// bisection inside the bracketing segment.
struct CumGrid {
    bounds: Vec<f64>,
    cum: Vec<f64>,
}

impl CumGrid {
    fn build<F: Fn(f64) -> f64>(
        rule: &QuadratureRule,
        hazard: &F,
        cuts: &[f64],
        horizon: f64,
    ) -> Result<Self> {
        let mut bounds = vec![0.0];
        bounds.extend(cuts.iter().copied().filter(|&c| c > 0.0 && c < horizon));
        bounds.push(horizon);
        let mut cum = vec![0.0];
        for w in bounds.windows(2) {
            let (v, _) = rule.integrate(hazard, w[0], w[1])?;
            cum.push(cum.last().unwrap() + v);
        }
        Ok(CumGrid { bounds, cum })
    }

    fn total(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn value_at<F: Fn(f64) -> f64>(
        &self,
        rule: &QuadratureRule,
        hazard: &F,
        t: f64,
    ) -> Result<f64> {
        let t = t.min(*self.bounds.last().unwrap());
        let i = self.bounds[..self.bounds.len() - 1]
            .iter()
            .rposition(|&b| b <= t)
            .unwrap_or(0);
        let (v, _) = rule.integrate(hazard, self.bounds[i], t)?;
        Ok(self.cum[i] + v)
    }

    /// Smallest `t` with `H(t) = target`, or `None` when the horizon total is
    /// below the target.
    fn invert<F: Fn(f64) -> f64>(
        &self,
        rule: &QuadratureRule,
        hazard: &F,
        target: f64,
    ) -> Result<Option<f64>> {
        if target > self.total() {
            return Ok(None);
        }
        let seg = match self.cum.windows(2).position(|w| target <= w[1]) {
            Some(s) => s,
            None => return Err(Error::numerical("cumulative hazard failed to bracket its target")),
        };
        let (mut lo, mut hi) = (self.bounds[seg], self.bounds[seg + 1]);
        let h_lo = self.cum[seg];
        while hi - lo > 1e-9 {
            let mid = 0.5 * (lo + hi);
            let (v, _) = rule.integrate(hazard, self.bounds[seg], mid)?;
            if h_lo + v < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Some(0.5 * (lo + hi)))
    }
}

fn frame_of<'a>(truth: &'a SimTruth, latents: &'a SubjectLatents) -> SubjectFrame<'a> {
    SubjectFrame {
        beta: &truth.beta,
        u: &latents.u,
        age: latents.age,
        log_psad: latents.log_psad,
    }
}

fn cause_hazard_value(
    truth: &SimTruth,
    latents: &SubjectLatents,
    t: f64,
    cause: Cause,
) -> f64 {
    crate::model::log_hazard_at(
        &truth.spec,
        &truth.hazard_coefs(cause),
        &frame_of(truth, latents),
        t,
        cause,
    )
    .map(f64::exp)
    .unwrap_or(f64::NAN)
}

/// First latent event time before the horizon from the exponential deviate
/// `e`: the solution of `H_all(t) = e`.
pub fn event_time_from_deviate(
    truth: &SimTruth,
    latents: &SubjectLatents,
    e: f64,
) -> Result<Option<f64>> {
    let rule = truth.spec.rule();
    let all = |t: f64| {
        cause_hazard_value(truth, latents, t, Cause::Progression)
            + cause_hazard_value(truth, latents, t, Cause::Treatment)
    };
    let grid = CumGrid::build(&rule, &all, truth.spec.hazard_cuts(), truth.horizon)?;
    let root = grid.invert(&rule, &all, e)?;
    if let Some(t) = root {
        let check = grid.value_at(&rule, &all, t)?;
        if (check - e).abs() > 1e-6 * (1.0 + e) {
            return Err(Error::numerical(format!(
                "event-time inversion residual too large: H({t}) = {check}, target {e}"
            )));
        }
    }
    Ok(root)
}

fn pick_cause(truth: &SimTruth, latents: &SubjectLatents, t: f64, cause_u: f64) -> Cause {
    let hp = cause_hazard_value(truth, latents, t, Cause::Progression);
    let ht = cause_hazard_value(truth, latents, t, Cause::Treatment);
    if cause_u < hp / (hp + ht) {
        Cause::Progression
    } else {
        Cause::Treatment
    }
}

/// Draw the first latent event: time and cause, or `None` beyond the horizon.
pub fn invert_event_time<R: Rng>(
    truth: &SimTruth,
    latents: &SubjectLatents,
    rng: &mut R,
) -> Result<Option<(f64, Cause)>> {
    let e = -(rng.random::<f64>().max(f64::MIN_POSITIVE)).ln();
    let cause_u: f64 = rng.random();
    match event_time_from_deviate(truth, latents, e)? {
        Some(t) => Ok(Some((t, pick_cause(truth, latents, t, cause_u)))),
        None => Ok(None),
    }
}

/// Latent treatment time continued beyond a progression at `from`, or `None`
/// past the horizon.
fn continue_treatment_time(
    truth: &SimTruth,
    latents: &SubjectLatents,
    from: f64,
    e: f64,
) -> Result<Option<f64>> {
    let rule = truth.spec.rule();
    let hz = |t: f64| cause_hazard_value(truth, latents, t, Cause::Treatment);
    let grid = CumGrid::build(&rule, &hz, truth.spec.hazard_cuts(), truth.horizon)?;
    let target = grid.value_at(&rule, &hz, from)? + e;
    grid.invert(&rule, &hz, target)
}

/// All random raw material one subject consumes, drawn in a fixed order so
/// that common random numbers align across sensitivity settings.
struct SubjectDraws {
    latents: SubjectLatents,
    event_deviate: f64,
    cause_u: f64,
    continuation_deviate: f64,
    dropout_u: f64,
    biopsy_jitter: Vec<f64>,
    psa_jitter: Vec<f64>,
    biopsy_positive_u: Vec<f64>,
    psa_noise: Vec<f64>,
}

fn draw_subject_material<R: Rng>(truth: &SimTruth, rng: &mut R) -> SubjectDraws {
    let latents = draw_subject_latents(truth, rng);
    let event_deviate = -(rng.random::<f64>().max(f64::MIN_POSITIVE)).ln();
    let cause_u = rng.random();
    let continuation_deviate = -(rng.random::<f64>().max(f64::MIN_POSITIVE)).ln();
    let dropout_u = rng.random();
    let n_biopsy = truth.schedule.biopsy_times.len();
    let biopsy_jitter = (0..n_biopsy).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n_psa = (truth.horizon / truth.schedule.psa_interval).floor() as usize + 1;
    let psa_jitter = (0..n_psa).map(|_| rng.random_range(-1.0..1.0)).collect();
    let biopsy_positive_u = (0..n_biopsy).map(|_| rng.random()).collect();
    let t_dist = StudentT::new(truth.spec.t_df).expect("t distribution");
    let psa_noise = (0..n_psa).map(|_| t_dist.sample(rng)).collect();
    SubjectDraws {
        latents,
        event_deviate,
        cause_u,
        continuation_deviate,
        dropout_u,
        biopsy_jitter,
        psa_jitter,
        biopsy_positive_u,
        psa_noise,
    }
}

/// Turn one subject's pre-drawn random material into an observed record.
fn observe_subject(
    truth: &SimTruth,
    id: String,
    draws: &SubjectDraws,
) -> Result<(PatientRecord, LatentRecord)> {
    let latents = &draws.latents;

    let first = match event_time_from_deviate(truth, latents, draws.event_deviate)? {
        Some(t) => Some((t, pick_cause(truth, latents, t, draws.cause_u))),
        None => None,
    };
    let (prg_time, trt_time, first_cause) = match first {
        None => (None, None, 0u8),
        Some((t, Cause::Treatment)) => (None, Some(t), 2u8),
        Some((t, Cause::Progression)) => {
            let trt = continue_treatment_time(truth, latents, t, draws.continuation_deviate)?;
            (Some(t), trt, 1u8)
        }
    };

    // Censoring: administrative horizon plus exponential dropout.
    let censor = if truth.dropout_rate > 0.0 {
        let d = -(draws.dropout_u.max(f64::MIN_POSITIVE)).ln() / truth.dropout_rate;
        d.min(truth.horizon)
    } else {
        truth.horizon
    };

    // Biopsy walk: visits happen while the subject is untreated and on study;
    // after progression each biopsy is positive with probability rho_true.
    let mut scheduled: Vec<(f64, f64)> = truth
        .schedule
        .biopsy_times
        .iter()
        .zip(&draws.biopsy_jitter)
        .zip(&draws.biopsy_positive_u)
        .map(|((&b, &j), &u)| (b + j * truth.schedule.biopsy_jitter, u))
        .filter(|&(b, _)| b > 0.0)
        .collect();
    scheduled.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let mut biopsy_times = vec![0.0];
    let mut detection: Option<f64> = None;
    for &(b, u) in &scheduled {
        if trt_time.is_some_and(|trt| trt <= b) {
            break;
        }
        if b >= censor {
            break;
        }
        biopsy_times.push(b);
        if prg_time.is_some_and(|p| p < b) && u < truth.rho_true {
            detection = Some(b);
            break;
        }
    }

    let (status, terminal_time) = if let Some(d) = detection {
        (EventStatus::ProgressionDetected, d)
    } else if trt_time.is_some_and(|trt| trt < censor) {
        (EventStatus::Treated, trt_time.unwrap())
    } else {
        (EventStatus::Censored, censor)
    };

    // Biomarker measurements on the jittered grid, truncated at the terminal
    // time. The enrollment measurement stays exactly at zero.
    let frame = frame_of(truth, latents);
    let sigma = (1.0 / truth.tau_eps).sqrt();
    let mut measurements = Vec::new();
    for (k, (&j, &noise)) in draws.psa_jitter.iter().zip(&draws.psa_noise).enumerate() {
        let t = if k == 0 {
            0.0
        } else {
            k as f64 * truth.schedule.psa_interval + j * truth.schedule.psa_jitter
        };
        if t < 0.0 || t > terminal_time {
            continue;
        }
        let m = mean_at(&truth.spec, &frame, t)?;
        measurements.push((t, m + sigma * noise));
    }
    measurements.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let record = PatientRecord {
        id: id.clone(),
        age: latents.age,
        psad: latents.log_psad.exp(),
        log_psad: latents.log_psad,
        measurements,
        biopsy_times,
        status,
        terminal_time,
    };
    let latent = LatentRecord {
        id,
        u: latents.u,
        progression_time: prg_time,
        treatment_time: trt_time,
        first_cause,
    };
    Ok((record, latent))
}

/// Generate one observed subject: latent draws, event history, observation
/// scheme. All randomness comes from `rng` in a fixed order.
pub fn apply_observation_scheme<R: Rng>(
    truth: &SimTruth,
    id: String,
    rng: &mut R,
) -> Result<(PatientRecord, LatentRecord)> {
    let draws = draw_subject_material(truth, rng);
    observe_subject(truth, id, &draws)
}

/// Simulate a full dataset. Deterministic given `seed`; each subject uses its
/// own RNG substream, so generation order does not matter.
pub fn simulate_dataset(truth: &SimTruth, seed: u64) -> Result<SimulatedDataset> {
    truth.validate()?;
    let width = truth.n_subjects.to_string().len().max(3);
    let mut patients = Vec::with_capacity(truth.n_subjects);
    let mut latents = Vec::with_capacity(truth.n_subjects);
    for i in 0..truth.n_subjects {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(1 + i as u64);
        let id = format!("{:0width$}", i + 1, width = width);
        let (record, latent) = apply_observation_scheme(truth, id, &mut rng)?;
        record.validate().map_err(|e| {
            Error::numerical(format!("simulated record violates its invariants: {e}"))
        })?;
        patients.push(record);
        latents.push(latent);
    }
    Ok(SimulatedDataset { patients, latents, seed })
}
