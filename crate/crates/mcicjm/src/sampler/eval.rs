//! Precomputed quadrature geometry for fast likelihood evaluation.
//!
//! Every integral the survival likelihood needs has fixed abscissae: they
//! depend only on biopsy times, terminal times, and the hazard's smoothness
//! breakpoints, never on parameters. Spline design rows at those abscissae
//! are therefore computed once per dataset; a likelihood evaluation is then a
//! sequence of dot products and exponentials. The panel layout mirrors the
//! reference path in [`crate::likelihood`] exactly, so both produce the same
//! values.

use crate::error::Result;
use crate::likelihood::{compose_survival_factor, panel_bounds};
use crate::model::{
    longitudinal_design, Cause, EventStatus, HazardCoefs, ModelSpec, PatientRecord, N_FIXED,
    N_RANEF,
};

const W_STRIDE: usize = N_FIXED;

/// One integration panel: `rule_len` outer nodes (doubling as the hazard
/// integral over the panel) and `rule_len^2` inner nodes for the nested
/// survival integrand.
#[derive(Debug, Clone)]
struct Panel {
    outer_start: usize,
    inner_start: usize,
}

#[derive(Debug, Clone)]
struct IntervalLayout {
    panels: Vec<Panel>,
}

/// Plain hazard-integral panels (for cumulative hazards without the nested
/// survival part).
#[derive(Debug, Clone)]
struct SegmentLayout {
    start: usize,
    len: usize,
}

/// Node-level design data for one cause.
#[derive(Debug, Clone, Default)]
struct CauseNodes {
    /// Gauss-Kronrod weight per node, already scaled to its panel.
    weight: Vec<f64>,
    /// Baseline-spline row per node, row-major `n_basis` wide.
    g: Vec<f64>,
    /// Fixed-effect design at the node time.
    w: Vec<f64>,
    /// Fixed-effect design at the node time minus one year.
    w_lag: Vec<f64>,
}

impl CauseNodes {
    fn push_node(
        &mut self,
        spec: &ModelSpec,
        cause: Cause,
        age: f64,
        t: f64,
        weight: f64,
    ) -> Result<usize> {
        let idx = self.weight.len();
        self.weight.push(weight);
        let basis = &spec.bh_basis[cause.index()];
        let old = self.g.len();
        self.g.resize(old + basis.n_basis(), 0.0);
        basis.eval_into(t, &mut self.g[old..]);
        let w = longitudinal_design(spec, age, t)?;
        self.w.extend_from_slice(&w);
        let wl = longitudinal_design(spec, age, t - 1.0)?;
        self.w_lag.extend_from_slice(&wl);
        Ok(idx)
    }

    fn len(&self) -> usize {
        self.weight.len()
    }
}

/// All precomputed structure for one subject.
#[derive(Debug, Clone)]
pub struct SubjectGeometry {
    pub n_intervals: usize,
    pub status: EventStatus,
    pub age: f64,
    pub log_psad: f64,
    prg: CauseNodes,
    trt: CauseNodes,
    intervals: Vec<IntervalLayout>,
    /// Treatment-side panels over `[0, t_N]`, then over `[t_N, terminal]`.
    trt_to_last: Vec<SegmentLayout>,
    trt_to_term: Vec<SegmentLayout>,
    /// Node index of the terminal treatment hazard (treated subjects).
    trt_terminal_node: Option<usize>,
    /// Measurement design rows and outcomes.
    pub meas_w: Vec<f64>,
    pub y: Vec<f64>,
}

impl SubjectGeometry {
    pub fn n_measurements(&self) -> usize {
        self.y.len()
    }

    fn build(spec: &ModelSpec, subject: &PatientRecord) -> Result<Self> {
        let rule = spec.rule();
        let r = rule.len();
        let cuts = spec.hazard_cuts();
        let age = subject.age;

        let mut prg = CauseNodes::default();
        let mut intervals = Vec::new();
        for pair in subject.biopsy_times.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let bounds = panel_bounds(lo, hi, cuts);
            let mut panels = Vec::new();
            for b in bounds.windows(2) {
                let outer_start = prg.len();
                let outer: Vec<(f64, f64)> = rule.scaled(b[0], b[1]).collect();
                for &(t, w) in &outer {
                    prg.push_node(spec, Cause::Progression, age, t, w)?;
                }
                let inner_start = prg.len();
                for &(nu, _) in &outer {
                    for (t, w) in rule.scaled(b[0], nu) {
                        prg.push_node(spec, Cause::Progression, age, t, w)?;
                    }
                }
                panels.push(Panel { outer_start, inner_start });
            }
            intervals.push(IntervalLayout { panels });
        }

        let mut trt = CauseNodes::default();
        let last = subject.last_biopsy();
        let push_segments = |trt: &mut CauseNodes, lo: f64, hi: f64| -> Result<Vec<SegmentLayout>> {
            let mut segs = Vec::new();
            if hi <= lo {
                return Ok(segs);
            }
            for b in panel_bounds(lo, hi, cuts).windows(2) {
                let start = trt.len();
                for (t, w) in rule.scaled(b[0], b[1]) {
                    trt.push_node(spec, Cause::Treatment, age, t, w)?;
                }
                segs.push(SegmentLayout { start, len: r });
            }
            Ok(segs)
        };
        let trt_to_last = push_segments(&mut trt, 0.0, last)?;
        let trt_to_term = push_segments(&mut trt, last, subject.terminal_time)?;
        let trt_terminal_node = if subject.status == EventStatus::Treated {
            Some(trt.push_node(spec, Cause::Treatment, age, subject.terminal_time, 0.0)?)
        } else {
            None
        };

        let mut meas_w = Vec::with_capacity(subject.measurements.len() * W_STRIDE);
        let mut y = Vec::with_capacity(subject.measurements.len());
        for &(t, yv) in &subject.measurements {
            let w = longitudinal_design(spec, age, t)?;
            meas_w.extend_from_slice(&w);
            y.push(yv);
        }

        Ok(SubjectGeometry {
            n_intervals: subject.n_intervals(),
            status: subject.status,
            age,
            log_psad: subject.log_psad,
            prg,
            trt,
            intervals,
            trt_to_last,
            trt_to_term,
            trt_terminal_node,
            meas_w,
            y,
        })
    }
}

/// Geometry for a whole dataset plus scratch sizing.
#[derive(Debug, Clone)]
pub struct DatasetGeometry {
    pub subjects: Vec<SubjectGeometry>,
    pub n_basis: [usize; 2],
    pub max_prg_nodes: usize,
    pub max_trt_nodes: usize,
    pub total_measurements: usize,
}

impl DatasetGeometry {
    pub fn build(spec: &ModelSpec, data: &[PatientRecord]) -> Result<Self> {
        let subjects: Vec<SubjectGeometry> =
            data.iter().map(|s| SubjectGeometry::build(spec, s)).collect::<Result<_>>()?;
        let max_prg_nodes = subjects.iter().map(|s| s.prg.len()).max().unwrap_or(0);
        let max_trt_nodes = subjects.iter().map(|s| s.trt.len()).max().unwrap_or(0);
        let total_measurements = subjects.iter().map(|s| s.y.len()).sum();
        Ok(DatasetGeometry {
            subjects,
            n_basis: [spec.n_basis(Cause::Progression), spec.n_basis(Cause::Treatment)],
            max_prg_nodes,
            max_trt_nodes,
            total_measurements,
        })
    }
}

/// Progression-side values for one subject at one parameter point.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct PrgValues {
    pub a: Vec<f64>,
    pub h_end: f64,
}

/// Treatment-side values for one subject at one parameter point.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct TrtValues {
    pub h_last: f64,
    pub h_term: f64,
    pub log_h_term: f64,
}

/// Hazard values at all nodes of one cause, written into `h_buf`.
fn fill_hazards(
    nodes: &CauseNodes,
    n_basis: usize,
    coefs: &HazardCoefs,
    beta: &[f64; N_FIXED],
    u: &[f64; N_RANEF],
    log_psad: f64,
    h_buf: &mut [f64],
) {
    let n = nodes.len();
    let offset = coefs.gamma * log_psad;
    for i in 0..n {
        let g = &nodes.g[i * n_basis..(i + 1) * n_basis];
        let w = &nodes.w[i * W_STRIDE..(i + 1) * W_STRIDE];
        let wl = &nodes.w_lag[i * W_STRIDE..(i + 1) * W_STRIDE];
        let mut log_h0 = 0.0;
        for (gv, cv) in g.iter().zip(coefs.gamma_h0) {
            log_h0 += gv * cv;
        }
        let mut m = 0.0;
        for k in 0..N_FIXED {
            m += w[k] * beta[k];
        }
        for k in 0..N_RANEF {
            m += w[k] * u[k];
        }
        let mut m_lag = 0.0;
        for k in 0..N_FIXED {
            m_lag += wl[k] * beta[k];
        }
        for k in 0..N_RANEF {
            m_lag += wl[k] * u[k];
        }
        let log_h = log_h0 + offset + coefs.alpha[0] * m + coefs.alpha[1] * (m - m_lag);
        h_buf[i] = log_h.exp();
    }
}

/// Evaluate the progression side (interval probabilities and cumulative
/// hazard at the last biopsy).
pub fn eval_progression(
    geom: &SubjectGeometry,
    n_basis: usize,
    rule_len: usize,
    coefs: &HazardCoefs,
    beta: &[f64; N_FIXED],
    u: &[f64; N_RANEF],
    h_buf: &mut [f64],
    out: &mut PrgValues,
) {
    fill_hazards(&geom.prg, n_basis, coefs, beta, u, geom.log_psad, &mut h_buf[..geom.prg.len()]);
    out.a.clear();
    let w = &geom.prg.weight;
    let mut h_run = 0.0;
    for interval in &geom.intervals {
        let mut a_j = 0.0;
        for panel in &interval.panels {
            let o = panel.outer_start;
            let mut seg = 0.0;
            for m in 0..rule_len {
                let inner_base = panel.inner_start + m * rule_len;
                let mut inner = 0.0;
                for r in 0..rule_len {
                    inner += w[inner_base + r] * h_buf[inner_base + r];
                }
                a_j += w[o + m] * h_buf[o + m] * (-(h_run + inner)).exp();
                seg += w[o + m] * h_buf[o + m];
            }
            h_run += seg;
        }
        out.a.push(a_j);
    }
    out.h_end = h_run;
}

/// Evaluate the treatment side (cumulative hazards to the last biopsy and to
/// the terminal time, plus the terminal hazard for treated subjects).
pub fn eval_treatment(
    geom: &SubjectGeometry,
    n_basis: usize,
    coefs: &HazardCoefs,
    beta: &[f64; N_FIXED],
    u: &[f64; N_RANEF],
    h_buf: &mut [f64],
) -> TrtValues {
    fill_hazards(&geom.trt, n_basis, coefs, beta, u, geom.log_psad, &mut h_buf[..geom.trt.len()]);
    let w = &geom.trt.weight;
    let mut h_last = 0.0;
    for seg in &geom.trt_to_last {
        for i in seg.start..seg.start + seg.len {
            h_last += w[i] * h_buf[i];
        }
    }
    let mut h_term = h_last;
    for seg in &geom.trt_to_term {
        for i in seg.start..seg.start + seg.len {
            h_term += w[i] * h_buf[i];
        }
    }
    // only treated subjects have a terminal hazard factor; zero keeps the
    // value serializable and is never read for the other statuses
    let log_h_term = match geom.trt_terminal_node {
        Some(i) => h_buf[i].ln(),
        None => 0.0,
    };
    TrtValues { h_last, h_term, log_h_term }
}

/// Compose the subject's log survival factor from cached sides.
pub fn compose_log_survival(
    geom: &SubjectGeometry,
    prg: &PrgValues,
    trt: &TrtValues,
    rho: f64,
) -> f64 {
    compose_survival_factor(
        geom.status,
        rho,
        &prg.a,
        prg.h_end,
        trt.h_last,
        trt.h_term,
        trt.log_h_term,
    )
    .log_value
}

/// Residuals `y - m(t)` at the measurement rows.
pub fn eval_residuals(
    geom: &SubjectGeometry,
    beta: &[f64; N_FIXED],
    u: &[f64; N_RANEF],
    out: &mut [f64],
) {
    for (l, y) in geom.y.iter().enumerate() {
        let w = &geom.meas_w[l * W_STRIDE..(l + 1) * W_STRIDE];
        let mut m = 0.0;
        for k in 0..N_FIXED {
            m += w[k] * beta[k];
        }
        for k in 0..N_RANEF {
            m += w[k] * u[k];
        }
        out[l] = y - m;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::survival_breakdown;
    use crate::model::{ModelSpec, ParameterState, SensitivityMode};
    use crate::simulator::{simulate_dataset, SimTruth};
    use crate::spline::NcsBasis;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn fast_path_matches_reference_likelihood() {
        let mut truth = SimTruth::default();
        truth.n_subjects = 40;
        let ds = simulate_dataset(&truth, 99).unwrap();
        let spec = truth.spec.clone();
        let geom = DatasetGeometry::build(&spec, &ds.patients).unwrap();
        let rule_len = spec.rule().len();

        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        let mut params = truth.to_parameter_state(ds.latents.iter().map(|l| l.u).collect());
        for trial in 0..3 {
            if trial > 0 {
                for b in params.beta.iter_mut() {
                    *b += rng.random_range(-0.2..0.2);
                }
                for k in 0..2 {
                    params.gamma[k] += rng.random_range(-0.2..0.2);
                    params.alpha[k][0] += rng.random_range(-0.2..0.2);
                    params.alpha[k][1] += rng.random_range(-0.3..0.3);
                    for g in params.gamma_h0[k].iter_mut() {
                        *g += rng.random_range(-0.3..0.3);
                    }
                }
            }
            let mut h_buf = vec![0.0; geom.max_prg_nodes.max(geom.max_trt_nodes)];
            let mut prg = PrgValues::default();
            for (i, s) in ds.patients.iter().enumerate() {
                eval_progression(
                    &geom.subjects[i],
                    geom.n_basis[0],
                    rule_len,
                    &params.hazard_coefs(crate::model::Cause::Progression),
                    &params.beta,
                    &params.u[i],
                    &mut h_buf,
                    &mut prg,
                );
                let trt = eval_treatment(
                    &geom.subjects[i],
                    geom.n_basis[1],
                    &params.hazard_coefs(crate::model::Cause::Treatment),
                    &params.beta,
                    &params.u[i],
                    &mut h_buf,
                );
                let fast = compose_log_survival(&geom.subjects[i], &prg, &trt, params.rho);
                let reference = survival_breakdown(&spec, &params, i, s).unwrap();
                let tol = 1e-11 * (1.0 + reference.log_value.abs());
                assert!(
                    (fast - reference.log_value).abs() < tol,
                    "subject {i}: fast {fast} vs reference {}",
                    reference.log_value
                );
                for (a_fast, a_ref) in prg.a.iter().zip(&reference.a_values) {
                    assert!((a_fast - a_ref).abs() < 1e-13 + 1e-11 * a_ref.abs());
                }
            }
        }
    }

    #[test]
    fn residuals_match_direct_means() {
        let ncs = NcsBasis::new((0.0, 12.5), vec![2.5, 6.5]).unwrap();
        let spec = ModelSpec::build(ncs, 12.5, SensitivityMode::fixed(0.75), None).unwrap();
        let mut truth = SimTruth::default();
        truth.n_subjects = 5;
        let ds = simulate_dataset(&truth, 7).unwrap();
        let geom = DatasetGeometry::build(&spec, &ds.patients).unwrap();
        let params: ParameterState =
            truth.to_parameter_state(ds.latents.iter().map(|l| l.u).collect());
        for (i, s) in ds.patients.iter().enumerate() {
            let mut resid = vec![0.0; s.measurements.len()];
            eval_residuals(&geom.subjects[i], &params.beta, &params.u[i], &mut resid);
            for (l, &(t, y)) in s.measurements.iter().enumerate() {
                let m = crate::model::longitudinal_mean(&spec, &params, i, s, t).unwrap();
                assert!((resid[l] - (y - m)).abs() < 1e-12);
            }
        }
    }
}
