//! Run configuration: one TOML file describing the model, sampler, and
//! simulation settings, with CLI flags overriding individual fields.

use std::path::Path;

use serde::{Deserialize, Serialize};

use mcicjm::model::{ModelSpec, PatientRecord, SensitivityMode};
use mcicjm::sampler::SamplerConfig;
use mcicjm::simulator::{ScheduleConfig, SimTruth};
use mcicjm::spline::NcsBasis;
use mcicjm::{Error, Result};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// Serialized run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub format_version: Option<u32>,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub sampler: Option<SamplerSection>,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
}

/// Model-structure settings; when absent, defaults derive from the data.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelSection {
    /// `fixed:<rho>` or `uniform:<lo>,<hi>`.
    pub sensitivity: Option<String>,
    pub ncs_boundary: Option<[f64; 2]>,
    pub ncs_internal: Option<[f64; 2]>,
    pub horizon: Option<f64>,
    pub bh_knot_count: Option<usize>,
    pub penalty_order: Option<usize>,
    pub penalty_ridge: Option<f64>,
    /// `unridged` (default) or `full`.
    pub penalty_rank: Option<String>,
    pub quadrature: Option<String>,
    pub age_center: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SamplerSection {
    pub chains: Option<usize>,
    pub iterations: Option<usize>,
    pub thin: Option<usize>,
    pub adapt: Option<usize>,
    pub seed: Option<u64>,
    pub save_random_effects: Option<bool>,
    pub workers: Option<usize>,
}

/// Overrides of the generating truth; anything unset keeps the calibrated
/// default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SimulateSection {
    pub n_subjects: Option<usize>,
    pub rho_true: Option<f64>,
    pub horizon: Option<f64>,
    pub dropout_rate: Option<f64>,
    pub psa_interval: Option<f64>,
    pub psa_jitter: Option<f64>,
    pub biopsy_times: Option<Vec<f64>>,
    pub biopsy_jitter: Option<f64>,
    pub age_mean: Option<f64>,
    pub age_sd: Option<f64>,
    pub log_psad_mean: Option<f64>,
    pub log_psad_sd: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

/// Build the generating truth from the simulate section.
pub fn build_sim_truth(cfg: &RunConfig) -> Result<SimTruth> {
    let mut truth = SimTruth::default();
    if let Some(s) = &cfg.simulate {
        if let Some(v) = s.n_subjects {
            truth.n_subjects = v;
        }
        if let Some(v) = s.rho_true {
            truth.rho_true = v;
        }
        if let Some(v) = s.horizon {
            truth.horizon = v;
        }
        if let Some(v) = s.dropout_rate {
            truth.dropout_rate = v;
        }
        let sch = ScheduleConfig {
            psa_interval: s.psa_interval.unwrap_or(truth.schedule.psa_interval),
            psa_jitter: s.psa_jitter.unwrap_or(truth.schedule.psa_jitter),
            biopsy_times: s.biopsy_times.clone().unwrap_or_else(|| truth.schedule.biopsy_times.clone()),
            biopsy_jitter: s.biopsy_jitter.unwrap_or(truth.schedule.biopsy_jitter),
        };
        truth.schedule = sch;
        if let Some(v) = s.age_mean {
            truth.age_mean = v;
        }
        if let Some(v) = s.age_sd {
            truth.age_sd = v;
        }
        if let Some(v) = s.log_psad_mean {
            truth.log_psad_mean = v;
        }
        if let Some(v) = s.log_psad_sd {
            truth.log_psad_sd = v;
        }
    }
    truth.validate()?;
    Ok(truth)
}

/// Build the model spec from the model section, deriving unspecified pieces
/// from the data: trajectory boundary knots span the observed follow-up,
/// internal knots sit at the tercile quantiles of the pooled measurement
/// times, and the hazard basis spans `[0, horizon]`.
pub fn build_model_spec(
    cfg: &RunConfig,
    sensitivity_flag: Option<&str>,
    data: &[PatientRecord],
) -> Result<ModelSpec> {
    let section = cfg.model.clone().unwrap_or_default();

    let sens_text = sensitivity_flag
        .map(str::to_string)
        .or(section.sensitivity.clone())
        .unwrap_or_else(|| "fixed:0.75".to_string());
    let sensitivity: SensitivityMode = sens_text.parse()?;

    let max_follow = data
        .iter()
        .map(|s| s.terminal_time)
        .fold(0.0f64, f64::max);
    let horizon = section.horizon.unwrap_or(if max_follow > 0.0 { max_follow } else { 12.5 });

    let boundary = section
        .ncs_boundary
        .map(|b| (b[0], b[1]))
        .unwrap_or((0.0, if max_follow > 0.0 { max_follow } else { horizon }));
    let internal = match section.ncs_internal {
        Some(k) => k,
        None => {
            let mut times: Vec<f64> = data
                .iter()
                .flat_map(|s| s.measurements.iter().map(|&(t, _)| t))
                .collect();
            if times.len() < 10 {
                return Err(Error::config(
                    "too few measurements to place trajectory knots; set ncs_internal explicitly",
                ));
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = |p: f64| mcicjm::stats::quantile(&times, p);
            let (lo, hi) = boundary;
            let k1 = q(1.0 / 3.0).clamp(lo + 1e-6, hi - 2e-6);
            let k2 = q(2.0 / 3.0).clamp(k1 + 1e-6, hi - 1e-6);
            [k1, k2]
        }
    };
    let ncs = NcsBasis::new(boundary, internal.to_vec())?;

    let mut spec = ModelSpec::build(ncs, horizon, sensitivity, section.bh_knot_count)?;
    if let Some(q) = &section.quadrature {
        spec = respec_quadrature(spec, q)?;
    }
    if section.penalty_order.is_some()
        || section.penalty_ridge.is_some()
        || section.penalty_rank.is_some()
    {
        spec = respec_penalty(spec, &section)?;
    }
    if let Some(c) = section.age_center {
        spec = respec_age_center(spec, c)?;
    }
    Ok(spec)
}

fn respec_quadrature(spec: ModelSpec, q: &str) -> Result<ModelSpec> {
    ModelSpec::from_parts(
        spec.ncs,
        spec.bh_basis,
        spec.penalty_spec,
        spec.sensitivity,
        spec.priors,
        q.parse()?,
        spec.age_center,
        spec.t_df,
    )
}

fn respec_penalty(spec: ModelSpec, section: &ModelSection) -> Result<ModelSpec> {
    let mut pen = spec.penalty_spec;
    if let Some(o) = section.penalty_order {
        pen.order = o;
    }
    if let Some(r) = section.penalty_ridge {
        pen.ridge = r;
    }
    if let Some(rank) = &section.penalty_rank {
        pen.rank_convention = match rank.as_str() {
            "unridged" => mcicjm::spline::RankConvention::Unridged,
            "full" => mcicjm::spline::RankConvention::Full,
            other => return Err(Error::config(format!("unknown penalty rank convention `{other}`"))),
        };
    }
    ModelSpec::from_parts(
        spec.ncs,
        spec.bh_basis,
        pen,
        spec.sensitivity,
        spec.priors,
        spec.quadrature,
        spec.age_center,
        spec.t_df,
    )
}

fn respec_age_center(spec: ModelSpec, center: f64) -> Result<ModelSpec> {
    ModelSpec::from_parts(
        spec.ncs,
        spec.bh_basis,
        spec.penalty_spec,
        spec.sensitivity,
        spec.priors,
        spec.quadrature,
        center,
        spec.t_df,
    )
}

/// Apply sampler-section values and flag overrides onto the defaults.
pub fn build_sampler_config(
    cfg: &RunConfig,
    chains: Option<usize>,
    iterations: Option<usize>,
    thin: Option<usize>,
    adapt: Option<usize>,
    seed: Option<u64>,
    workers: Option<usize>,
) -> Result<SamplerConfig> {
    let section = cfg.sampler.clone().unwrap_or_default();
    let mut out = SamplerConfig::default();
    if let Some(v) = section.chains {
        out.n_chains = v;
    }
    if let Some(v) = section.iterations {
        out.n_iterations = v;
    }
    if let Some(v) = section.thin {
        out.thin = v;
    }
    if let Some(v) = section.adapt {
        out.n_adapt = v;
    }
    if let Some(v) = section.save_random_effects {
        out.save_random_effects = v;
    }
    if let Some(v) = section.workers {
        out.workers = v;
    }
    let seed = seed.or(section.seed);
    out.seed = seed.ok_or_else(|| {
        Error::config("a seed is required (flag --seed or [sampler] seed in the config)")
    })?;
    if let Some(v) = chains {
        out.n_chains = v;
    }
    if let Some(v) = iterations {
        out.n_iterations = v;
    }
    if let Some(v) = thin {
        out.thin = v;
    }
    if let Some(v) = adapt {
        out.n_adapt = v;
    }
    if let Some(v) = workers {
        out.workers = v;
    }
    out.validate()?;
    Ok(out)
}
