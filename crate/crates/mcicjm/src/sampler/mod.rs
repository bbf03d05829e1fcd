//! Metropolis-within-Gibbs estimation of the joint model.
//!
//! Conjugate conditionals are sampled exactly: the random-effects covariance
//! (inverse-Wishart), the residual precision (Gamma, under the scale-mixture
//! augmentation of the t residuals), the P-spline smoothing precisions
//! (Gamma), and the latent mixture weights. Everything else moves by adaptive
//! Gaussian random-walk Metropolis on an unconstrained scale: fixed effects,
//! per-subject random effects, hazard coefficients, baseline spline
//! coefficients, the sensitivity (logit of its prior interval), and the
//! covariance hyperprecision (log scale, whose conditional is not a Gamma
//! under the scale matrix used here).
//!
//! Chains are independent, deterministic given the seed (per-chain RNG
//! substreams), and can run in parallel.

pub mod diagnostics;
pub mod eval;
pub mod gibbs;
pub mod kernel;

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::log_prior_parts;
use crate::model::{
    Cause, ModelSpec, ParameterState, PatientRecord, SensitivityMode, N_FIXED, N_RANEF,
};
use crate::stats::{gamma_logpdf, mean_var, normal_logpdf, quantile};
use diagnostics::ParamDiagnostics;
use eval::{DatasetGeometry, PrgValues, TrtValues};
use kernel::{standard_normal, AdaptiveScale, TARGET_BLOCK, TARGET_SCALAR};

/// Sampler run settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_chains: usize,
    /// Total iterations per chain, including adaptation.
    pub n_iterations: usize,
    pub thin: usize,
    /// Adaptation (burn-in) iterations; draws are kept only afterwards.
    pub n_adapt: usize,
    pub seed: u64,
    /// Record per-subject random effects in the output (large).
    #[serde(default)]
    pub save_random_effects: bool,
    /// Maximum chains running concurrently; 0 means all at once.
    #[serde(default)]
    pub workers: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_chains: 3,
            n_iterations: 10_000,
            thin: 10,
            n_adapt: 1000,
            seed: 1,
            save_random_effects: false,
            workers: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::config("at least one chain is required"));
        }
        if self.thin == 0 || self.n_iterations % self.thin != 0 {
            return Err(Error::config("iteration count must be divisible by the thinning interval"));
        }
        if self.n_adapt % self.thin != 0 {
            return Err(Error::config("adaptation length must be divisible by the thinning interval"));
        }
        if self.n_adapt >= self.n_iterations {
            return Err(Error::config("adaptation must be shorter than the run"));
        }
        Ok(())
    }

    pub fn draws_per_chain(&self) -> usize {
        (self.n_iterations - self.n_adapt) / self.thin
    }
}

/// Posterior summary of one monitored parameter (pooled over chains).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q500: f64,
    pub q975: f64,
}

/// Thinned draws across chains with summaries and diagnostics.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub param_names: Vec<String>,
    /// Indexed `[chain][draw][parameter]`.
    pub chains: Vec<Vec<Vec<f64>>>,
    pub summaries: Vec<ParamSummary>,
    pub diagnostics: Vec<ParamDiagnostics>,
    pub config: SamplerConfig,
}

impl PosteriorSamples {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    /// Draws of one parameter pooled across chains.
    pub fn pooled(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.index_of(name)?;
        let mut out = Vec::new();
        for chain in &self.chains {
            out.extend(chain.iter().map(|draw| draw[idx]));
        }
        Some(out)
    }

    /// Per-chain draw vectors of one parameter.
    pub fn per_chain(&self, name: &str) -> Option<Vec<Vec<f64>>> {
        let idx = self.index_of(name)?;
        Some(self.chains.iter().map(|c| c.iter().map(|d| d[idx]).collect()).collect())
    }

    pub fn to_replicate_draws(&self) -> crate::metrics::ReplicateDraws {
        let mut rep = crate::metrics::ReplicateDraws::default();
        for name in &self.param_names {
            rep.params.insert(name.clone(), self.pooled(name).unwrap());
        }
        rep
    }

    /// Names among the monitored regression parameters whose split R-hat
    /// exceeds `threshold`.
    pub fn convergence_failures(&self, threshold: f64) -> Vec<String> {
        let watched = ["beta[", "gamma[", "alpha1[", "alpha2["];
        self.diagnostics
            .iter()
            .filter(|d| watched.iter().any(|w| d.name.starts_with(w)))
            .filter(|d| !d.rhat.is_nan() && d.rhat > threshold)
            .map(|d| d.name.clone())
            .collect()
    }
}

/// Monitored parameter names, in recording order.
pub fn monitored_names(spec: &ModelSpec, n_subjects: usize, save_u: bool) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..N_FIXED {
        names.push(format!("beta[{i}]"));
    }
    for cause in Cause::ALL {
        names.push(format!("gamma[{}]", cause.label()));
        names.push(format!("alpha1[{}]", cause.label()));
        names.push(format!("alpha2[{}]", cause.label()));
    }
    for cause in Cause::ALL {
        for a in 0..spec.n_basis(cause) {
            names.push(format!("gamma_h0[{}][{a}]", cause.label()));
        }
    }
    names.push("tau_eps".into());
    names.push("sigma_eps".into());
    names.push("tau_u".into());
    names.push("tau_h0[prg]".into());
    names.push("tau_h0[trt]".into());
    for i in 0..N_RANEF {
        for j in i..N_RANEF {
            names.push(format!("omega[{i}][{j}]"));
        }
    }
    if matches!(spec.sensitivity, SensitivityMode::Uniform { .. }) {
        names.push("rho".into());
    }
    if save_u {
        for s in 0..n_subjects {
            for k in 0..N_RANEF {
                names.push(format!("u[{s}][{k}]"));
            }
        }
    }
    names
}

fn record_state(params: &ParameterState, spec: &ModelSpec, save_u: bool, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(&params.beta);
    for cause in Cause::ALL {
        let k = cause.index();
        out.push(params.gamma[k]);
        out.push(params.alpha[k][0]);
        out.push(params.alpha[k][1]);
    }
    for cause in Cause::ALL {
        out.extend_from_slice(&params.gamma_h0[cause.index()]);
    }
    out.push(params.tau_eps);
    out.push(params.sigma());
    out.push(params.tau_u);
    out.push(params.tau_h0[0]);
    out.push(params.tau_h0[1]);
    for i in 0..N_RANEF {
        for j in i..N_RANEF {
            out.push(params.omega[i][j]);
        }
    }
    if matches!(spec.sensitivity, SensitivityMode::Uniform { .. }) {
        out.push(params.rho);
    }
    if save_u {
        for u in &params.u {
            out.extend_from_slice(u);
        }
    }
}

/// Per-block adaptive proposal scales.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scales {
    beta: AdaptiveScale,
    u: Vec<AdaptiveScale>,
    gamma: [AdaptiveScale; 2],
    alpha: [AdaptiveScale; 2],
    gamma_h0: [AdaptiveScale; 2],
    rho: AdaptiveScale,
    tau_u: AdaptiveScale,
    recenter: AdaptiveScale,
    recenter_each: Vec<AdaptiveScale>,
    recenter_age: AdaptiveScale,
    gamma_level: [AdaptiveScale; 2],
}

impl Scales {
    fn new(n_subjects: usize, sigma_guess: f64) -> Self {
        Scales {
            beta: AdaptiveScale::new(sigma_guess.max(1e-3), TARGET_BLOCK),
            u: (0..n_subjects).map(|_| AdaptiveScale::new(0.3, TARGET_BLOCK)).collect(),
            gamma: [AdaptiveScale::new(0.2, TARGET_SCALAR), AdaptiveScale::new(0.2, TARGET_SCALAR)],
            alpha: [AdaptiveScale::new(0.2, TARGET_BLOCK), AdaptiveScale::new(0.2, TARGET_BLOCK)],
            gamma_h0: [
                AdaptiveScale::new(0.1, TARGET_BLOCK),
                AdaptiveScale::new(0.1, TARGET_BLOCK),
            ],
            rho: AdaptiveScale::new(0.5, TARGET_SCALAR),
            tau_u: AdaptiveScale::new(0.5, TARGET_SCALAR),
            recenter: AdaptiveScale::new(0.1, TARGET_BLOCK),
            recenter_each: (0..N_RANEF).map(|_| AdaptiveScale::new(0.1, TARGET_SCALAR)).collect(),
            recenter_age: AdaptiveScale::new(0.02, TARGET_SCALAR),
            gamma_level: [
                AdaptiveScale::new(0.3, TARGET_SCALAR),
                AdaptiveScale::new(0.3, TARGET_SCALAR),
            ],
        }
    }
}

/// Serializable chain state: restoring and continuing reproduces an
/// uninterrupted run bitwise (same seed stream).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainCheckpoint {
    pub chain_index: usize,
    pub iteration: usize,
    pub params: ParameterState,
    pub scales: Scales,
    pub rng: ChaCha12Rng,
    pub beta_shape: Vec<f64>,
    pub n_adapt: usize,
    // Likelihood caches travel with the checkpoint: recentering moves leave
    // them mathematically invariant without recomputing them, so a fresh
    // recomputation would differ from the live values at the last bit.
    caches: CheckpointCaches,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointCaches {
    prg: Vec<PrgValues>,
    trt: Vec<TrtValues>,
    log_surv: Vec<f64>,
    resid: Vec<Vec<f64>>,
    sum_lam_r2: Vec<f64>,
}

/// Shared initialization context derived from the data.
#[derive(Debug, Clone)]
pub struct InitContext {
    beta_ols: [f64; N_FIXED],
    resid_var: f64,
    /// Lower Cholesky factor of the scaled OLS covariance, row-major 5x5;
    /// shapes the fixed-effects proposal.
    beta_shape: Vec<f64>,
    crude_log_rates: [f64; 2],
}

pub fn prepare_init(spec: &ModelSpec, data: &[PatientRecord]) -> Result<InitContext> {
    let n_meas: usize = data.iter().map(|s| s.measurements.len()).sum();
    if n_meas < N_FIXED {
        return Err(Error::data("too few measurements to initialize the trajectory model"));
    }
    let mut xtx = nalgebra::Matrix5::<f64>::zeros();
    let mut xty = nalgebra::Vector5::<f64>::zeros();
    for s in data {
        for &(t, y) in &s.measurements {
            let w = crate::model::longitudinal_design(spec, s.age, t)?;
            for i in 0..N_FIXED {
                for j in 0..N_FIXED {
                    xtx[(i, j)] += w[i] * w[j];
                }
                xty[i] += w[i] * y;
            }
        }
    }
    for i in 0..N_FIXED {
        xtx[(i, i)] += 1e-8;
    }
    let chol = nalgebra::Cholesky::new(xtx)
        .ok_or_else(|| Error::numerical("longitudinal design is singular"))?;
    let beta = chol.solve(&xty);
    let mut rss = 0.0;
    for s in data {
        for &(t, y) in &s.measurements {
            let w = crate::model::longitudinal_design(spec, s.age, t)?;
            let mut m = 0.0;
            for i in 0..N_FIXED {
                m += w[i] * beta[i];
            }
            rss += (y - m) * (y - m);
        }
    }
    let resid_var = (rss / (n_meas.saturating_sub(N_FIXED).max(1)) as f64).max(1e-6);

    let cov = chol.inverse();
    let cov_chol = nalgebra::Cholesky::new(cov)
        .ok_or_else(|| Error::numerical("OLS covariance is singular"))?;
    let l = cov_chol.l();
    let mut beta_shape = vec![0.0; N_FIXED * N_FIXED];
    for i in 0..N_FIXED {
        for j in 0..=i {
            beta_shape[i * N_FIXED + j] = l[(i, j)];
        }
    }
    // scale the shape so an O(1) adaptive scalar is reasonable
    let scale_norm = (0..N_FIXED).map(|i| l[(i, i)]).fold(0.0f64, f64::max).max(1e-12);
    for v in beta_shape.iter_mut() {
        *v /= scale_norm;
    }

    let followup: f64 = data.iter().map(|s| s.terminal_time).sum::<f64>().max(1e-6);
    let n1 = data.iter().filter(|s| s.status.code() == 1).count() as f64;
    let n2 = data.iter().filter(|s| s.status.code() == 2).count() as f64;
    let crude_log_rates = [((n1 + 0.5) / followup).ln(), ((n2 + 0.5) / followup).ln()];

    Ok(InitContext {
        beta_ols: [beta[0], beta[1], beta[2], beta[3], beta[4]],
        resid_var,
        beta_shape,
        crude_log_rates,
    })
}

fn initial_state<R: Rng>(
    ctx: &InitContext,
    spec: &ModelSpec,
    data: &[PatientRecord],
    rng: &mut R,
) -> ParameterState {
    let n = data.len();
    let mut beta = ctx.beta_ols;
    for b in beta.iter_mut() {
        *b += 0.3 * standard_normal(rng);
    }
    let u = (0..n)
        .map(|_| {
            let mut v = [0.0; N_RANEF];
            for x in v.iter_mut() {
                *x = 0.1 * standard_normal(rng);
            }
            v
        })
        .collect();
    let omega_draw =
        gibbs::sample_inverse_wishart(&(nalgebra::Matrix4::identity() * 2.0), 10.0, rng)
            .unwrap_or_else(|_| nalgebra::Matrix4::identity() * 0.3);
    let mut omega = [[0.0; N_RANEF]; N_RANEF];
    for i in 0..N_RANEF {
        for j in 0..N_RANEF {
            omega[i][j] = omega_draw[(i, j)];
        }
    }
    let pr = &spec.priors;
    let tau_eps = (1.0 / ctx.resid_var) * (0.3 * standard_normal(rng)).exp();
    let tau_u = Gamma::new(pr.tau_u_shape, 1.0 / pr.tau_u_rate)
        .expect("prior")
        .sample(rng)
        .clamp(1e-3, 1e6);
    let tau_h0 = [
        Gamma::new(pr.tau_h0_shape, 1.0 / pr.tau_h0_rate).expect("prior").sample(rng),
        Gamma::new(pr.tau_h0_shape, 1.0 / pr.tau_h0_rate).expect("prior").sample(rng),
    ];
    // hazard coefficients: vague-prior draws shrunk by 0.1; baseline levels
    // anchored at the crude event rates so no chain starts at an absurd hazard
    let mut gamma = [0.0; 2];
    let mut alpha = [[0.0; 2]; 2];
    let mut gamma_h0 = [Vec::new(), Vec::new()];
    for cause in Cause::ALL {
        let k = cause.index();
        gamma[k] = 0.1 * pr.coef_var.sqrt() * standard_normal(rng);
        alpha[k] = [
            0.1 * pr.coef_var.sqrt() * standard_normal(rng),
            0.1 * pr.coef_var.sqrt() * standard_normal(rng),
        ];
        gamma_h0[k] = (0..spec.n_basis(cause))
            .map(|_| ctx.crude_log_rates[k] + 0.1 * standard_normal(rng))
            .collect();
    }
    let rho = match spec.sensitivity {
        SensitivityMode::Fixed { value } => value,
        SensitivityMode::Uniform { lo, hi } => rng.random_range(lo..hi),
    };
    let lambda = data.iter().map(|s| vec![1.0; s.measurements.len()]).collect();
    ParameterState {
        beta,
        u,
        omega,
        tau_eps,
        tau_u,
        gamma_h0,
        tau_h0,
        gamma,
        alpha,
        rho,
        lambda,
    }
}

/// One MCMC chain with its cached likelihood state.
pub struct Chain {
    spec: Arc<ModelSpec>,
    geom: Arc<DatasetGeometry>,
    rule_len: usize,
    pub params: ParameterState,
    // per-subject caches at the current state
    prg: Vec<PrgValues>,
    trt: Vec<TrtValues>,
    log_surv: Vec<f64>,
    resid: Vec<Vec<f64>>,
    sum_lam_r2: Vec<f64>,
    // proposal buffers (same shapes)
    prg_prop: Vec<PrgValues>,
    trt_prop: Vec<TrtValues>,
    log_surv_prop: Vec<f64>,
    resid_prop: Vec<Vec<f64>>,
    sum_lam_r2_prop: Vec<f64>,
    h_buf: Vec<f64>,
    scales: Scales,
    beta_shape: Vec<f64>,
    /// Per-subject lower Cholesky factors shaping the random-effect
    /// proposals (posterior-approximate from the measurement design).
    u_shapes: Vec<[f64; 16]>,
    rng: ChaCha12Rng,
    iteration: usize,
    n_adapt: usize,
    chain_index: usize,
}

impl Chain {
    /// Build a chain with initial values drawn from dispersed starting
    /// distributions, retrying on a non-finite posterior.
    pub fn new(
        spec: Arc<ModelSpec>,
        data: &[PatientRecord],
        geom: Arc<DatasetGeometry>,
        config: &SamplerConfig,
        ctx: &InitContext,
        chain_index: usize,
    ) -> Result<Self> {
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        rng.set_stream(0x1000_0000 + chain_index as u64);
        for attempt in 0..10 {
            let params = initial_state(ctx, &spec, data, &mut rng);
            let mut chain = Chain::from_params(
                spec.clone(),
                geom.clone(),
                params,
                Scales::new(data.len(), ctx.resid_var.sqrt()),
                ctx.beta_shape.clone(),
                rng.clone(),
                config.n_adapt,
                chain_index,
            );
            if chain.state_is_finite() {
                chain.resample_lambda();
                return Ok(chain);
            }
            let _ = attempt;
        }
        Err(Error::Sampler(format!(
            "chain {chain_index}: no finite starting point found in 10 attempts"
        )))
    }

    #[allow(clippy::too_many_arguments)]
    fn from_params(
        spec: Arc<ModelSpec>,
        geom: Arc<DatasetGeometry>,
        params: ParameterState,
        scales: Scales,
        beta_shape: Vec<f64>,
        rng: ChaCha12Rng,
        n_adapt: usize,
        chain_index: usize,
    ) -> Self {
        let n = geom.subjects.len();
        let rule_len = spec.rule().len();
        let u_shapes = geom.subjects.iter().map(subject_proposal_shape).collect();
        let mut chain = Chain {
            rule_len,
            prg: vec![PrgValues::default(); n],
            trt: vec![TrtValues::default(); n],
            log_surv: vec![0.0; n],
            resid: geom.subjects.iter().map(|s| vec![0.0; s.n_measurements()]).collect(),
            sum_lam_r2: vec![0.0; n],
            prg_prop: vec![PrgValues::default(); n],
            trt_prop: vec![TrtValues::default(); n],
            log_surv_prop: vec![0.0; n],
            resid_prop: geom.subjects.iter().map(|s| vec![0.0; s.n_measurements()]).collect(),
            sum_lam_r2_prop: vec![0.0; n],
            h_buf: vec![0.0; geom.max_prg_nodes.max(geom.max_trt_nodes)],
            u_shapes,
            spec,
            geom,
            params,
            scales,
            beta_shape,
            rng,
            iteration: 0,
            n_adapt,
            chain_index,
        };
        chain.refresh_all_caches();
        chain
    }

    /// Recompute every cache from the current parameters.
    fn refresh_all_caches(&mut self) {
        let n = self.geom.subjects.len();
        for i in 0..n {
            self.refresh_subject_cache(i);
        }
    }

    fn refresh_subject_cache(&mut self, i: usize) {
        let geom = self.geom.clone();
        let sg = &geom.subjects[i];
        eval::eval_progression(
            sg,
            geom.n_basis[0],
            self.rule_len,
            &self.params.hazard_coefs(Cause::Progression),
            &self.params.beta,
            &self.params.u[i],
            &mut self.h_buf,
            &mut self.prg[i],
        );
        self.trt[i] = eval::eval_treatment(
            sg,
            geom.n_basis[1],
            &self.params.hazard_coefs(Cause::Treatment),
            &self.params.beta,
            &self.params.u[i],
            &mut self.h_buf,
        );
        self.log_surv[i] = eval::compose_log_survival(sg, &self.prg[i], &self.trt[i], self.params.rho);
        eval::eval_residuals(sg, &self.params.beta, &self.params.u[i], &mut self.resid[i]);
        self.sum_lam_r2[i] = lambda_quad(&self.params.lambda[i], &self.resid[i]);
    }

    fn state_is_finite(&self) -> bool {
        self.log_surv.iter().all(|v| v.is_finite())
            && self.resid.iter().flatten().all(|v| v.is_finite())
            && log_prior_parts(&self.spec, &self.params).total.is_finite()
    }

    fn adapting(&self) -> bool {
        self.iteration < self.n_adapt
    }

    fn ln_u(&mut self) -> f64 {
        self.rng.random::<f64>().max(f64::MIN_POSITIVE).ln()
    }

    /// One full sweep over all blocks.
    pub fn step(&mut self) {
        self.resample_lambda();
        self.update_tau_eps();
        self.update_beta();
        self.update_random_effects();
        self.update_recentering();
        self.update_omega();
        self.update_tau_u();
        for cause in Cause::ALL {
            self.update_gamma_h0(cause);
            self.update_tau_h0(cause);
            self.update_gamma(cause);
            self.update_gamma_with_level(cause);
            self.update_alpha(cause);
        }
        self.update_rho();
        self.iteration += 1;
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn record(&self, save_u: bool, out: &mut Vec<f64>) {
        record_state(&self.params, &self.spec, save_u, out);
    }

    pub fn snapshot(&self) -> ChainCheckpoint {
        ChainCheckpoint {
            chain_index: self.chain_index,
            iteration: self.iteration,
            params: self.params.clone(),
            scales: self.scales.clone(),
            rng: self.rng.clone(),
            beta_shape: self.beta_shape.clone(),
            n_adapt: self.n_adapt,
            caches: CheckpointCaches {
                prg: self.prg.clone(),
                trt: self.trt.clone(),
                log_surv: self.log_surv.clone(),
                resid: self.resid.clone(),
                sum_lam_r2: self.sum_lam_r2.clone(),
            },
        }
    }

    /// Rebuild a chain from a checkpoint, continuing the interrupted run
    /// bit for bit.
    pub fn restore(
        spec: Arc<ModelSpec>,
        geom: Arc<DatasetGeometry>,
        checkpoint: ChainCheckpoint,
    ) -> Self {
        let mut chain = Chain::from_params(
            spec,
            geom,
            checkpoint.params,
            checkpoint.scales,
            checkpoint.beta_shape,
            checkpoint.rng,
            checkpoint.n_adapt,
            checkpoint.chain_index,
        );
        chain.iteration = checkpoint.iteration;
        chain.prg = checkpoint.caches.prg;
        chain.trt = checkpoint.caches.trt;
        chain.log_surv = checkpoint.caches.log_surv;
        chain.resid = checkpoint.caches.resid;
        chain.sum_lam_r2 = checkpoint.caches.sum_lam_r2;
        chain
    }

    // ----- Gibbs blocks -----

    fn resample_lambda(&mut self) {
        let n = self.geom.subjects.len();
        for i in 0..n {
            gibbs::gibbs_update_mixture_weights(
                &self.resid[i],
                self.params.tau_eps,
                self.spec.t_df,
                &mut self.rng,
                &mut self.params.lambda[i],
            );
            self.sum_lam_r2[i] = lambda_quad(&self.params.lambda[i], &self.resid[i]);
        }
    }

    fn update_tau_eps(&mut self) {
        let n_meas = self.geom.total_measurements;
        let total: f64 = self.sum_lam_r2.iter().sum();
        self.params.tau_eps = gibbs::gibbs_update_tau_eps(
            n_meas,
            total,
            self.spec.priors.tau_eps_shape,
            self.spec.priors.tau_eps_rate,
            &mut self.rng,
        );
    }

    fn update_omega(&mut self) {
        if let Ok(omega) = gibbs::gibbs_update_omega(
            &self.params.u,
            self.params.tau_u,
            self.spec.priors.omega_df,
            self.spec.priors.omega_scale,
            &mut self.rng,
        ) {
            self.params.set_omega(&omega);
        }
    }

    fn update_tau_h0(&mut self, cause: Cause) {
        let k = cause.index();
        self.params.tau_h0[k] = gibbs::gibbs_update_tau_h0(
            &self.params.gamma_h0[k],
            self.spec.penalty(cause),
            self.spec.priors.tau_h0_shape,
            self.spec.priors.tau_h0_rate,
            &mut self.rng,
        );
    }

    // ----- Metropolis blocks -----

    fn update_beta(&mut self) {
        let scale = self.scales.beta.scale();
        let mut proposal = self.params.beta;
        let z: Vec<f64> = (0..N_FIXED).map(|_| standard_normal(&mut self.rng)).collect();
        for i in 0..N_FIXED {
            let mut step = 0.0;
            for j in 0..=i {
                step += self.beta_shape[i * N_FIXED + j] * z[j];
            }
            proposal[i] += scale * step;
        }

        let pr = &self.spec.priors;
        let mut delta = 0.0;
        for i in 0..N_FIXED {
            delta += normal_logpdf(proposal[i], 0.0, pr.beta_var)
                - normal_logpdf(self.params.beta[i], 0.0, pr.beta_var);
        }

        let old_beta = self.params.beta;
        self.params.beta = proposal;
        let n = self.geom.subjects.len();
        let geom = self.geom.clone();
        let mut ok = true;
        for i in 0..n {
            let sg = &geom.subjects[i];
            eval::eval_progression(
                sg,
                geom.n_basis[0],
                self.rule_len,
                &self.params.hazard_coefs(Cause::Progression),
                &self.params.beta,
                &self.params.u[i],
                &mut self.h_buf,
                &mut self.prg_prop[i],
            );
            self.trt_prop[i] = eval::eval_treatment(
                sg,
                geom.n_basis[1],
                &self.params.hazard_coefs(Cause::Treatment),
                &self.params.beta,
                &self.params.u[i],
                &mut self.h_buf,
            );
            self.log_surv_prop[i] = eval::compose_log_survival(
                sg,
                &self.prg_prop[i],
                &self.trt_prop[i],
                self.params.rho,
            );
            eval::eval_residuals(sg, &self.params.beta, &self.params.u[i], &mut self.resid_prop[i]);
            self.sum_lam_r2_prop[i] = lambda_quad(&self.params.lambda[i], &self.resid_prop[i]);
            if !self.log_surv_prop[i].is_finite() {
                ok = false;
                break;
            }
            delta += self.log_surv_prop[i] - self.log_surv[i];
            delta -= 0.5 * self.params.tau_eps * (self.sum_lam_r2_prop[i] - self.sum_lam_r2[i]);
        }

        let accept = ok && (delta >= 0.0 || self.ln_u() < delta);
        if accept {
            std::mem::swap(&mut self.prg, &mut self.prg_prop);
            std::mem::swap(&mut self.trt, &mut self.trt_prop);
            std::mem::swap(&mut self.log_surv, &mut self.log_surv_prop);
            std::mem::swap(&mut self.resid, &mut self.resid_prop);
            std::mem::swap(&mut self.sum_lam_r2, &mut self.sum_lam_r2_prop);
        } else {
            self.params.beta = old_beta;
        }
        if self.adapting() {
            let prob = if ok { delta.min(0.0).exp() } else { 0.0 };
            self.scales.beta.update(prob);
        }
    }

    fn update_random_effects(&mut self) {
        let n = self.geom.subjects.len();
        let geom = self.geom.clone();
        let chol = match nalgebra::Cholesky::new(self.params.omega_matrix()) {
            Some(c) => c,
            None => return,
        };
        for i in 0..n {
            let scale = self.scales.u[i].scale();
            let current = self.params.u[i];
            let mut proposal = current;
            let shape = &self.u_shapes[i];
            let z = [
                standard_normal(&mut self.rng),
                standard_normal(&mut self.rng),
                standard_normal(&mut self.rng),
                standard_normal(&mut self.rng),
            ];
            for r in 0..N_RANEF {
                let mut step = 0.0;
                for c in 0..=r {
                    step += shape[r * N_RANEF + c] * z[c];
                }
                proposal[r] += scale * step;
            }

            let mut delta = crate::likelihood::ranef_logpdf(&chol, &proposal)
                - crate::likelihood::ranef_logpdf(&chol, &current);

            let sg = &geom.subjects[i];
            self.params.u[i] = proposal;
            eval::eval_progression(
                sg,
                geom.n_basis[0],
                self.rule_len,
                &self.params.hazard_coefs(Cause::Progression),
                &self.params.beta,
                &self.params.u[i],
                &mut self.h_buf,
                &mut self.prg_prop[i],
            );
            self.trt_prop[i] = eval::eval_treatment(
                sg,
                geom.n_basis[1],
                &self.params.hazard_coefs(Cause::Treatment),
                &self.params.beta,
                &self.params.u[i],
                &mut self.h_buf,
            );
            let ls = eval::compose_log_survival(
                sg,
                &self.prg_prop[i],
                &self.trt_prop[i],
                self.params.rho,
            );
            eval::eval_residuals(sg, &self.params.beta, &self.params.u[i], &mut self.resid_prop[i]);
            let slr2 = lambda_quad(&self.params.lambda[i], &self.resid_prop[i]);

            let ok = ls.is_finite();
            if ok {
                delta += ls - self.log_surv[i];
                delta -= 0.5 * self.params.tau_eps * (slr2 - self.sum_lam_r2[i]);
            }
            let accept = ok && (delta >= 0.0 || self.ln_u() < delta);
            if accept {
                self.prg[i].a.copy_from_slice(&self.prg_prop[i].a);
                self.prg[i].h_end = self.prg_prop[i].h_end;
                self.trt[i] = self.trt_prop[i];
                self.log_surv[i] = ls;
                self.resid[i].copy_from_slice(&self.resid_prop[i]);
                self.sum_lam_r2[i] = slr2;
            } else {
                self.params.u[i] = current;
            }
            if self.adapting() {
                let prob = if ok { delta.min(0.0).exp() } else { 0.0 };
                self.scales.u[i].update(prob);
            }
        }
    }

    /// Shared machinery for the three progression-side coefficient blocks.
    fn update_prg_side<FPrior, FSet>(
        &mut self,
        dim: usize,
        scale: f64,
        prior_delta: FPrior,
        set: FSet,
    ) -> (f64, bool)
    where
        FPrior: Fn(&ParameterState, &ParameterState) -> f64,
        FSet: Fn(&mut ParameterState, &[f64]),
    {
        let old = self.params.clone();
        let step: Vec<f64> =
            (0..dim).map(|_| scale * standard_normal(&mut self.rng)).collect();
        set(&mut self.params, &step);
        let mut delta = prior_delta(&self.params, &old);

        let n = self.geom.subjects.len();
        let geom = self.geom.clone();
        let mut ok = delta > f64::NEG_INFINITY;
        if ok {
            for i in 0..n {
                let sg = &geom.subjects[i];
                eval::eval_progression(
                    sg,
                    geom.n_basis[0],
                    self.rule_len,
                    &self.params.hazard_coefs(Cause::Progression),
                    &self.params.beta,
                    &self.params.u[i],
                    &mut self.h_buf,
                    &mut self.prg_prop[i],
                );
                self.log_surv_prop[i] = eval::compose_log_survival(
                    sg,
                    &self.prg_prop[i],
                    &self.trt[i],
                    self.params.rho,
                );
                if !self.log_surv_prop[i].is_finite() {
                    ok = false;
                    break;
                }
                delta += self.log_surv_prop[i] - self.log_surv[i];
            }
        }
        let accept = ok && (delta >= 0.0 || self.ln_u() < delta);
        if accept {
            std::mem::swap(&mut self.prg, &mut self.prg_prop);
            std::mem::swap(&mut self.log_surv, &mut self.log_surv_prop);
        } else {
            self.params = old;
        }
        (if ok { delta.min(0.0).exp() } else { 0.0 }, accept)
    }

    /// Shared machinery for the treatment-side coefficient blocks.
    fn update_trt_side<FPrior, FSet>(
        &mut self,
        dim: usize,
        scale: f64,
        prior_delta: FPrior,
        set: FSet,
    ) -> (f64, bool)
    where
        FPrior: Fn(&ParameterState, &ParameterState) -> f64,
        FSet: Fn(&mut ParameterState, &[f64]),
    {
        let old = self.params.clone();
        let step: Vec<f64> =
            (0..dim).map(|_| scale * standard_normal(&mut self.rng)).collect();
        set(&mut self.params, &step);
        let mut delta = prior_delta(&self.params, &old);

        let n = self.geom.subjects.len();
        let geom = self.geom.clone();
        let mut ok = delta > f64::NEG_INFINITY;
        if ok {
            for i in 0..n {
                let sg = &geom.subjects[i];
                self.trt_prop[i] = eval::eval_treatment(
                    sg,
                    geom.n_basis[1],
                    &self.params.hazard_coefs(Cause::Treatment),
                    &self.params.beta,
                    &self.params.u[i],
                    &mut self.h_buf,
                );
                self.log_surv_prop[i] = eval::compose_log_survival(
                    sg,
                    &self.prg[i],
                    &self.trt_prop[i],
                    self.params.rho,
                );
                if !self.log_surv_prop[i].is_finite() {
                    ok = false;
                    break;
                }
                delta += self.log_surv_prop[i] - self.log_surv[i];
            }
        }
        let accept = ok && (delta >= 0.0 || self.ln_u() < delta);
        if accept {
            std::mem::swap(&mut self.trt, &mut self.trt_prop);
            std::mem::swap(&mut self.log_surv, &mut self.log_surv_prop);
        } else {
            self.params = old;
        }
        (if ok { delta.min(0.0).exp() } else { 0.0 }, accept)
    }

    fn update_gamma_h0(&mut self, cause: Cause) {
        let k = cause.index();
        let scale = self.scales.gamma_h0[k].scale();
        let dim = self.spec.n_basis(cause);
        let spec = self.spec.clone();
        let prior = move |new: &ParameterState, old: &ParameterState| {
            let pen = spec.penalty(cause);
            let tau = new.tau_h0[k];
            -0.5 * tau
                * (pen.quadratic_form(&new.gamma_h0[k]) - pen.quadratic_form(&old.gamma_h0[k]))
        };
        let set = move |p: &mut ParameterState, step: &[f64]| {
            for (g, s) in p.gamma_h0[k].iter_mut().zip(step) {
                *g += s;
            }
        };
        let (prob, _) = match cause {
            Cause::Progression => self.update_prg_side(dim, scale, prior, set),
            Cause::Treatment => self.update_trt_side(dim, scale, prior, set),
        };
        if self.adapting() {
            self.scales.gamma_h0[k].update(prob);
        }
    }

    fn update_gamma(&mut self, cause: Cause) {
        let k = cause.index();
        let scale = self.scales.gamma[k].scale();
        let var = self.spec.priors.coef_var;
        let prior = move |new: &ParameterState, old: &ParameterState| {
            normal_logpdf(new.gamma[k], 0.0, var) - normal_logpdf(old.gamma[k], 0.0, var)
        };
        let set = move |p: &mut ParameterState, step: &[f64]| {
            p.gamma[k] += step[0];
        };
        let (prob, _) = match cause {
            Cause::Progression => self.update_prg_side(1, scale, prior, set),
            Cause::Treatment => self.update_trt_side(1, scale, prior, set),
        };
        if self.adapting() {
            self.scales.gamma[k].update(prob);
        }
    }

    /// Move the PSA-density coefficient together with a compensating shift of
    /// the baseline level. The two are confounded through the average
    /// covariate value, so the coupled direction accepts much larger steps
    /// than either coordinate alone.
    fn update_gamma_with_level(&mut self, cause: Cause) {
        let k = cause.index();
        let scale = self.scales.gamma_level[k].scale();
        let mean_lp: f64 = self
            .geom
            .subjects
            .iter()
            .map(|s| s.log_psad)
            .sum::<f64>()
            / self.geom.subjects.len() as f64;
        let var = self.spec.priors.coef_var;
        let spec = self.spec.clone();
        let prior = move |new: &ParameterState, old: &ParameterState| {
            let pen = spec.penalty(cause);
            let tau = new.tau_h0[k];
            normal_logpdf(new.gamma[k], 0.0, var) - normal_logpdf(old.gamma[k], 0.0, var)
                - 0.5
                    * tau
                    * (pen.quadratic_form(&new.gamma_h0[k])
                        - pen.quadratic_form(&old.gamma_h0[k]))
        };
        let set = move |p: &mut ParameterState, step: &[f64]| {
            p.gamma[k] += step[0];
            for g in p.gamma_h0[k].iter_mut() {
                *g -= step[0] * mean_lp;
            }
        };
        let (prob, _) = match cause {
            Cause::Progression => self.update_prg_side(1, scale, prior, set),
            Cause::Treatment => self.update_trt_side(1, scale, prior, set),
        };
        if self.adapting() {
            self.scales.gamma_level[k].update(prob);
        }
    }

    fn update_alpha(&mut self, cause: Cause) {
        let k = cause.index();
        let scale = self.scales.alpha[k].scale();
        let var = self.spec.priors.coef_var;
        let prior = move |new: &ParameterState, old: &ParameterState| {
            normal_logpdf(new.alpha[k][0], 0.0, var) + normal_logpdf(new.alpha[k][1], 0.0, var)
                - normal_logpdf(old.alpha[k][0], 0.0, var)
                - normal_logpdf(old.alpha[k][1], 0.0, var)
        };
        let set = move |p: &mut ParameterState, step: &[f64]| {
            p.alpha[k][0] += step[0];
            p.alpha[k][1] += step[1];
        };
        let (prob, _) = match cause {
            Cause::Progression => self.update_prg_side(2, scale, prior, set),
            Cause::Treatment => self.update_trt_side(2, scale, prior, set),
        };
        if self.adapting() {
            self.scales.alpha[k].update(prob);
        }
    }

    /// Shift the shared trajectory coordinates between the fixed effects and
    /// every subject's random effects: `beta_p += d_p`, `u_pi -= d_p`. Every
    /// trajectory `m_i(t)` (and through it the whole likelihood) is invariant
    /// under this move, so acceptance depends on the priors alone. It breaks
    /// the funnel coupling between the population level and the random
    /// effects that strangles a plain per-block walk.
    fn update_recentering(&mut self) {
        let chol = match nalgebra::Cholesky::new(self.params.omega_matrix()) {
            Some(c) => c,
            None => return,
        };
        let pr = self.spec.priors;

        // Shared trajectory coordinates, proposal shaped by the current
        // random-effects covariance.
        let scale = self.scales.recenter.scale();
        let z = nalgebra::Vector4::from_fn(|_, _| standard_normal(&mut self.rng));
        let step = chol.l() * z;
        let shift = [scale * step[0], scale * step[1], scale * step[2], scale * step[3]];
        let mut delta = 0.0;
        for p in 0..N_RANEF {
            delta += normal_logpdf(self.params.beta[p] + shift[p], 0.0, pr.beta_var)
                - normal_logpdf(self.params.beta[p], 0.0, pr.beta_var);
        }
        for u in &self.params.u {
            let moved = [u[0] - shift[0], u[1] - shift[1], u[2] - shift[2], u[3] - shift[3]];
            delta += crate::likelihood::ranef_logpdf(&chol, &moved)
                - crate::likelihood::ranef_logpdf(&chol, u);
        }
        let accept = delta >= 0.0 || self.ln_u() < delta;
        if accept {
            for p in 0..N_RANEF {
                self.params.beta[p] += shift[p];
            }
            for u in self.params.u.iter_mut() {
                for p in 0..N_RANEF {
                    u[p] -= shift[p];
                }
            }
        }
        if self.adapting() {
            self.scales.recenter.update(delta.min(0.0).exp());
        }

        // The same move one coordinate at a time, each with its own adapted
        // step size; the weakly identified trajectory directions need far
        // larger shifts than the block move can afford them.
        for p in 0..N_RANEF {
            let scale = self.scales.recenter_each[p].scale();
            let d = scale * standard_normal(&mut self.rng);
            let mut delta = normal_logpdf(self.params.beta[p] + d, 0.0, pr.beta_var)
                - normal_logpdf(self.params.beta[p], 0.0, pr.beta_var);
            for u in &self.params.u {
                let mut moved = *u;
                moved[p] -= d;
                delta += crate::likelihood::ranef_logpdf(&chol, &moved)
                    - crate::likelihood::ranef_logpdf(&chol, u);
            }
            let accept = delta >= 0.0 || self.ln_u() < delta;
            if accept {
                self.params.beta[p] += d;
                for u in self.params.u.iter_mut() {
                    u[p] -= d;
                }
            }
            if self.adapting() {
                self.scales.recenter_each[p].update(delta.min(0.0).exp());
            }
        }

        // The age coefficient loads onto the random intercepts the same way:
        // `beta_4 += d`, `u_0i -= d (age_i - center)` leaves every trajectory
        // unchanged.
        let scale = self.scales.recenter_age.scale();
        let d = scale * standard_normal(&mut self.rng);
        let mut delta = normal_logpdf(self.params.beta[4] + d, 0.0, pr.beta_var)
            - normal_logpdf(self.params.beta[4], 0.0, pr.beta_var);
        let centers: Vec<f64> =
            self.geom.subjects.iter().map(|s| s.age - self.spec.age_center).collect();
        for (u, c) in self.params.u.iter().zip(&centers) {
            let moved = [u[0] - d * c, u[1], u[2], u[3]];
            delta += crate::likelihood::ranef_logpdf(&chol, &moved)
                - crate::likelihood::ranef_logpdf(&chol, u);
        }
        let accept = delta >= 0.0 || self.ln_u() < delta;
        if accept {
            self.params.beta[4] += d;
            for (u, c) in self.params.u.iter_mut().zip(&centers) {
                u[0] -= d * c;
            }
        }
        if self.adapting() {
            self.scales.recenter_age.update(delta.min(0.0).exp());
        }
    }

    fn update_rho(&mut self) {
        let (lo, hi) = match self.spec.sensitivity {
            SensitivityMode::Fixed { .. } => return,
            SensitivityMode::Uniform { lo, hi } => (lo, hi),
        };
        let scale = self.scales.rho.scale();
        // random walk on the logit of the prior-interval position
        let p = ((self.params.rho - lo) / (hi - lo)).clamp(1e-12, 1.0 - 1e-12);
        let x = (p / (1.0 - p)).ln();
        let x_new = x + scale * standard_normal(&mut self.rng);
        let p_new = 1.0 / (1.0 + (-x_new).exp());
        let rho_new = lo + (hi - lo) * p_new;

        // Jacobian of the logit transform: d rho / d x = (hi-lo) p (1-p)
        let mut delta = (p_new.ln() + (1.0 - p_new).ln()) - (p.ln() + (1.0 - p).ln());
        let n = self.geom.subjects.len();
        let geom = self.geom.clone();
        for i in 0..n {
            self.log_surv_prop[i] =
                eval::compose_log_survival(&geom.subjects[i], &self.prg[i], &self.trt[i], rho_new);
            delta += self.log_surv_prop[i] - self.log_surv[i];
        }
        let accept = delta >= 0.0 || self.ln_u() < delta;
        if accept {
            self.params.rho = rho_new;
            std::mem::swap(&mut self.log_surv, &mut self.log_surv_prop);
        }
        if self.adapting() {
            self.scales.rho.update(delta.min(0.0).exp());
        }
    }

    fn update_tau_u(&mut self) {
        // The inverse-Wishart scale (c / tau_u) I makes this conditional
        // non-Gamma, so it moves by a random walk on log tau_u.
        let scale = self.scales.tau_u.scale();
        let pr = &self.spec.priors;
        let chol = match nalgebra::Cholesky::new(self.params.omega_matrix()) {
            Some(c) => c,
            None => return,
        };
        let tr_inv = chol.inverse().trace();
        let p = N_RANEF as f64;
        let log_density = |tau: f64| {
            gamma_logpdf(tau, pr.tau_u_shape, pr.tau_u_rate)
                + 0.5 * pr.omega_df * p * (pr.omega_scale / tau).ln()
                - 0.5 * (pr.omega_scale / tau) * tr_inv
        };
        let x = self.params.tau_u.ln();
        let x_new = x + scale * standard_normal(&mut self.rng);
        let tau_new = x_new.exp();
        // log-scale Jacobian: + (x_new - x)
        let delta = log_density(tau_new) - log_density(self.params.tau_u) + (x_new - x);
        let accept = delta >= 0.0 || self.ln_u() < delta;
        if accept {
            self.params.tau_u = tau_new;
        }
        if self.adapting() {
            self.scales.tau_u.update(if delta.is_nan() { 0.0 } else { delta.min(0.0).exp() });
        }
    }
}

/// Approximate posterior shape of one subject's random effects: the Cholesky
/// factor of `(I + tau_hat Z'Z)^{-1}` from the measurement design. Directions
/// the data barely informs keep unit scale; well-measured ones tighten.
fn subject_proposal_shape(geom: &eval::SubjectGeometry) -> [f64; 16] {
    let mut info = nalgebra::Matrix4::<f64>::identity();
    let tau_hat = 40.0;
    let n_meas = geom.n_measurements();
    for l in 0..n_meas {
        let w = &geom.meas_w[l * N_FIXED..(l + 1) * N_FIXED];
        for r in 0..N_RANEF {
            for c in 0..N_RANEF {
                info[(r, c)] += tau_hat * w[r] * w[c];
            }
        }
    }
    let cov = info.try_inverse().unwrap_or_else(nalgebra::Matrix4::identity);
    let chol = nalgebra::Cholesky::new(cov)
        .unwrap_or_else(|| nalgebra::Cholesky::new(nalgebra::Matrix4::identity()).unwrap());
    let l = chol.l();
    let mut out = [0.0; 16];
    for r in 0..N_RANEF {
        for c in 0..=r {
            out[r * N_RANEF + c] = l[(r, c)];
        }
    }
    out
}

fn lambda_quad(lambda: &[f64], resid: &[f64]) -> f64 {
    lambda.iter().zip(resid).map(|(l, r)| l * r * r).sum()
}

/// Run all chains and assemble summaries and diagnostics.
pub fn run_chains(
    spec: &ModelSpec,
    data: &[PatientRecord],
    config: &SamplerConfig,
) -> Result<PosteriorSamples> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::data("cannot fit an empty dataset"));
    }
    for s in data {
        s.validate()?;
    }
    let spec_arc = Arc::new(spec.clone());
    let geom = Arc::new(DatasetGeometry::build(spec, data)?);
    let ctx = prepare_init(spec, data)?;
    let save_u = config.save_random_effects;

    let workers = if config.workers == 0 { config.n_chains } else { config.workers };
    let mut chain_draws: Vec<Option<Vec<Vec<f64>>>> = (0..config.n_chains).map(|_| None).collect();
    let mut batch_start = 0usize;
    while batch_start < config.n_chains {
        let batch_end = (batch_start + workers).min(config.n_chains);
        let results: Vec<(usize, Result<Vec<Vec<f64>>>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = (batch_start..batch_end)
                .map(|c| {
                    let spec_arc = spec_arc.clone();
                    let geom = geom.clone();
                    let ctx = ctx.clone();
                    scope.spawn(move || {
                        let mut chain =
                            Chain::new(spec_arc, data, geom, config, &ctx, c)?;
                        let mut draws = Vec::with_capacity(config.draws_per_chain());
                        let mut buf = Vec::new();
                        for it in 1..=config.n_iterations {
                            chain.step();
                            if it > config.n_adapt && (it - config.n_adapt) % config.thin == 0 {
                                chain.record(save_u, &mut buf);
                                draws.push(buf.clone());
                            }
                        }
                        Ok(draws)
                    })
                })
                .collect();
            handles
                .into_iter()
                .enumerate()
                .map(|(off, h)| (batch_start + off, h.join().expect("chain thread panicked")))
                .collect()
        });
        for (c, r) in results {
            chain_draws[c] = Some(r?);
        }
        batch_start = batch_end;
    }

    let chains: Vec<Vec<Vec<f64>>> = chain_draws.into_iter().map(|c| c.unwrap()).collect();
    let param_names = monitored_names(spec, data.len(), save_u);

    let mut summaries = Vec::with_capacity(param_names.len());
    let mut diags = Vec::with_capacity(param_names.len());
    for (idx, name) in param_names.iter().enumerate() {
        let per_chain: Vec<Vec<f64>> =
            chains.iter().map(|c| c.iter().map(|d| d[idx]).collect()).collect();
        let pooled: Vec<f64> = per_chain.iter().flatten().copied().collect();
        let (mean, var) = mean_var(&pooled);
        let mut sorted = pooled;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        summaries.push(ParamSummary {
            name: name.clone(),
            mean,
            sd: var.sqrt(),
            q025: quantile(&sorted, 0.025),
            q500: quantile(&sorted, 0.5),
            q975: quantile(&sorted, 0.975),
        });
        diags.push(diagnostics::diagnostics_for(name, &per_chain));
    }

    Ok(PosteriorSamples {
        param_names,
        chains,
        summaries,
        diagnostics: diags,
        config: config.clone(),
    })
}
