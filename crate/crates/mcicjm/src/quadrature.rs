//! Gauss-Kronrod quadrature on finite intervals.
//!
//! The survival likelihood needs cumulative hazards and interval progression
//! probabilities, none of which have closed forms under the spline hazard
//! model. Two fixed rules are provided: the 15-point Kronrod extension of
//! 7-point Gauss (the default) and the 7-point Kronrod extension of 3-point
//! Gauss. The difference between the Kronrod sum and the embedded Gauss sum
//! serves as a free error estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which Gauss-Kronrod pair to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Gk7,
    Gk15,
}

impl Default for RuleKind {
    fn default() -> Self {
        RuleKind::Gk15
    }
}

impl std::str::FromStr for RuleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gk7" => Ok(RuleKind::Gk7),
            "gk15" => Ok(RuleKind::Gk15),
            other => Err(Error::config(format!("unknown quadrature rule `{other}`"))),
        }
    }
}

// Positive abscissae and weights; rules are symmetric about zero. Kronrod
// nodes at even positions coincide with the embedded Gauss nodes.
const GK15_NODES: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.0,
];
const GK15_WK: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];
const GK15_WG: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

const GK7_NODES: [f64; 4] = [
    0.960491268708020,
    0.774596669241483,
    0.434243749346802,
    0.0,
];
const GK7_WK: [f64; 4] = [
    0.104656226026467,
    0.268488089868333,
    0.401397414775962,
    0.450916538658474,
];
const GK7_WG: [f64; 2] = [0.555555555555556, 0.888888888888889];

/// A fixed Gauss-Kronrod rule with nodes expanded over `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    kind: RuleKind,
    nodes: Vec<f64>,
    weights_kronrod: Vec<f64>,
    weights_gauss: Vec<f64>,
}

impl QuadratureRule {
    pub fn new(kind: RuleKind) -> Self {
        let (half_nodes, half_wk, half_wg): (&[f64], &[f64], &[f64]) = match kind {
            RuleKind::Gk15 => (&GK15_NODES, &GK15_WK, &GK15_WG),
            RuleKind::Gk7 => (&GK7_NODES, &GK7_WK, &GK7_WG),
        };
        let m = half_nodes.len();
        let n = 2 * m - 1;
        let mut nodes = vec![0.0; n];
        let mut wk = vec![0.0; n];
        let mut wg = vec![0.0; n];
        // Half tables run from the outermost node inward; the center node
        // (index m-1) is written twice with the same value. Gauss nodes of the
        // embedded rule sit at the odd half-table positions.
        for i in 0..m {
            let j_lo = i;
            let j_hi = n - 1 - i;
            nodes[j_lo] = -half_nodes[i];
            nodes[j_hi] = half_nodes[i];
            wk[j_lo] = half_wk[i];
            wk[j_hi] = half_wk[i];
            if i % 2 == 1 {
                let g = half_wg[i / 2];
                wg[j_lo] = g;
                wg[j_hi] = g;
            }
        }
        QuadratureRule { kind, nodes, weights_kronrod: wk, weights_gauss: wg }
    }

    pub fn gk15() -> Self {
        Self::new(RuleKind::Gk15)
    }

    pub fn gk7() -> Self {
        Self::new(RuleKind::Gk7)
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights_kronrod(&self) -> &[f64] {
        &self.weights_kronrod
    }

    pub fn weights_gauss(&self) -> &[f64] {
        &self.weights_gauss
    }

    /// Abscissae and Kronrod weights mapped to `[a, b]`.
    pub fn scaled(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        self.nodes
            .iter()
            .zip(&self.weights_kronrod)
            .map(move |(&x, &w)| (c + h * x, h * w))
    }

    /// Integrate `f` over `[a, b]`, returning the Kronrod value and the
    /// `|kronrod - gauss|` error estimate.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F, a: f64, b: f64) -> Result<(f64, f64)> {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::invalid_input("integration bounds must be finite"));
        }
        if a > b {
            return Err(Error::invalid_input(format!(
                "integration bounds out of order: a={a} > b={b}"
            )));
        }
        if a == b {
            return Ok((0.0, 0.0));
        }
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let mut kronrod = 0.0;
        let mut gauss = 0.0;
        for i in 0..self.nodes.len() {
            let t = c + h * self.nodes[i];
            let v = f(t);
            if !v.is_finite() {
                return Err(Error::NonFiniteIntegrand { node: t });
            }
            kronrod += self.weights_kronrod[i] * v;
            gauss += self.weights_gauss[i] * v;
        }
        Ok((h * kronrod, h * (kronrod - gauss).abs()))
    }

    /// Integrate over `[a, b]` split at the interior points of `cuts`.
    ///
    /// Used for integrands that are smooth between known breakpoints (spline
    /// knots, piecewise-constant hazard jumps) but not across them. `cuts`
    /// must be sorted; points outside `(a, b)` are ignored.
    pub fn integrate_split<F: FnMut(f64) -> f64>(
        &self,
        mut f: F,
        a: f64,
        b: f64,
        cuts: &[f64],
    ) -> Result<(f64, f64)> {
        if a > b {
            return Err(Error::invalid_input(format!(
                "integration bounds out of order: a={a} > b={b}"
            )));
        }
        let mut total = 0.0;
        let mut err = 0.0;
        let mut lo = a;
        for &c in cuts.iter().filter(|&&c| c > a && c < b) {
            let (v, e) = self.integrate(&mut f, lo, c)?;
            total += v;
            err += e;
            lo = c;
        }
        let (v, e) = self.integrate(&mut f, lo, b)?;
        Ok((total + v, err + e))
    }

    /// Nested integration: `∫_a^b outer(ν, I(ν)) dν` where
    /// `I(ν) = ∫_0^ν g` is evaluated by this same rule at every outer node.
    ///
    /// This is the shape of the interval progression probability, where the
    /// outer integrand is a hazard times the survival function of its own
    /// cumulative hazard.
    pub fn integrate_nested<G, F>(&self, a: f64, b: f64, mut g: G, mut outer: F) -> Result<f64>
    where
        G: FnMut(f64) -> f64,
        F: FnMut(f64, f64) -> f64,
    {
        if a > b {
            return Err(Error::invalid_input(format!(
                "integration bounds out of order: a={a} > b={b}"
            )));
        }
        if a == b {
            return Ok(0.0);
        }
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let mut kronrod = 0.0;
        for i in 0..self.nodes.len() {
            let nu = c + h * self.nodes[i];
            let (inner, _) = self.integrate(&mut g, 0.0, nu)?;
            let v = outer(nu, inner);
            if !v.is_finite() {
                return Err(Error::NonFiniteIntegrand { node: nu });
            }
            kronrod += self.weights_kronrod[i] * v;
        }
        Ok(h * kronrod)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn weights_sum_to_two() {
        for rule in [QuadratureRule::gk7(), QuadratureRule::gk15()] {
            let wk: f64 = rule.weights_kronrod().iter().sum();
            let wg: f64 = rule.weights_gauss().iter().sum();
            assert_abs_diff_eq!(wk, 2.0, epsilon = 1e-14);
            assert_abs_diff_eq!(wg, 2.0, epsilon = 1e-14);
            // nodes symmetric about zero
            let s: f64 = rule.nodes().iter().sum();
            assert_abs_diff_eq!(s, 0.0, epsilon = 1e-14);
            assert!(rule.weights_kronrod().iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn constant_is_exact() {
        let (v, e) = QuadratureRule::gk15().integrate(|_| 1.0, 0.0, 2.0).unwrap();
        assert_abs_diff_eq!(v, 2.0, epsilon = 1e-14);
        assert!(e < 1e-14);
        let (v, _) = QuadratureRule::gk7().integrate(|_| 1.0, 0.0, 2.0).unwrap();
        assert_abs_diff_eq!(v, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn quintic_is_exact() {
        for rule in [QuadratureRule::gk7(), QuadratureRule::gk15()] {
            let (v, _) = rule.integrate(|t| t.powi(5), 0.0, 1.0).unwrap();
            assert_abs_diff_eq!(v, 1.0 / 6.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn exponential_close_to_machine() {
        for rule in [QuadratureRule::gk7(), QuadratureRule::gk15()] {
            let (v, e) = rule.integrate(f64::exp, 0.0, 1.0).unwrap();
            let truth = std::f64::consts::E - 1.0;
            assert!((v - truth).abs() / truth < 1e-10, "{:?}: {v}", rule.kind());
            assert!((v - truth).abs() <= e.max(1e-12));
        }
    }

    #[test]
    fn linearity() {
        let rule = QuadratureRule::gk15();
        let f = |t: f64| (0.3 * t).sin() + 0.2;
        let g = |t: f64| (-0.5 * t).exp();
        let (vf, _) = rule.integrate(f, 0.0, 3.0).unwrap();
        let (vg, _) = rule.integrate(g, 0.0, 3.0).unwrap();
        let (vc, _) = rule.integrate(|t| 2.5 * f(t) - 1.5 * g(t), 0.0, 3.0).unwrap();
        assert_abs_diff_eq!(vc, 2.5 * vf - 1.5 * vg, epsilon = 1e-12);
    }

    #[test]
    fn interval_additivity_on_smooth_hazards() {
        let rule = QuadratureRule::gk15();
        let h = |t: f64| (-2.0 + 0.3 * t - 0.02 * t * t).exp();
        let (full, _) = rule.integrate(h, 0.0, 10.0).unwrap();
        let (left, _) = rule.integrate(h, 0.0, 4.3).unwrap();
        let (right, _) = rule.integrate(h, 4.3, 10.0).unwrap();
        assert!((full - (left + right)).abs() / full < 1e-8);
    }

    #[test]
    fn gk7_and_gk15_agree_within_error_estimates() {
        let corpus: Vec<Box<dyn Fn(f64) -> f64>> = vec![
            Box::new(|t| (-2.0 + 0.3 * t).exp()),
            Box::new(|t| (0.1 * t).exp() * (-0.5 * t).exp()),
            Box::new(|t| (-2.5 + (t / 4.0).sin()).exp()),
        ];
        for f in &corpus {
            let (v15, e15) = QuadratureRule::gk15().integrate(|t| f(t), 0.0, 8.0).unwrap();
            let (v7, e7) = QuadratureRule::gk7().integrate(|t| f(t), 0.0, 8.0).unwrap();
            assert!(
                (v15 - v7).abs() <= (e15 + e7).max(1e-10),
                "disagreement {} vs {} (err {} + {})",
                v15,
                v7,
                e15,
                e7
            );
        }
    }

    #[test]
    fn rejects_bad_bounds_and_reports_bad_nodes() {
        let rule = QuadratureRule::gk15();
        assert!(rule.integrate(|_| 1.0, 1.0, 0.0).is_err());
        let err = rule.integrate(|t| (t - 0.5).ln(), 0.0, 1.0).unwrap_err();
        match err {
            Error::NonFiniteIntegrand { node } => assert!((0.0..=1.0).contains(&node)),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn zero_width_interval_is_zero() {
        let rule = QuadratureRule::gk15();
        let (v, e) = rule.integrate(|t| t.exp(), 1.3, 1.3).unwrap();
        assert_eq!((v, e), (0.0, 0.0));
        let v = rule.integrate_nested(1.3, 1.3, |t| t, |_, _| 1.0).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn nested_constant_hazard_closed_form() {
        let rule = QuadratureRule::gk15();
        let lam = 0.5;
        let v = rule
            .integrate_nested(1.0, 2.0, |_| lam, |_, inner| lam * (-inner).exp())
            .unwrap();
        let truth = (-0.5f64).exp() - (-1.0f64).exp();
        assert_abs_diff_eq!(v, truth, epsilon = 1e-12);
        assert_abs_diff_eq!(truth, 0.238651, epsilon = 5e-7);
    }

    #[test]
    fn nested_log_linear_hazard_vs_dense_trapezoid() {
        let rule = QuadratureRule::gk15();
        let h = |t: f64| (0.1 * t).exp();
        let v = rule.integrate_nested(0.0, 3.0, h, |nu, inner| h(nu) * (-inner).exp()).unwrap();

        // 1e6-panel trapezoid oracle for ∫ h exp(-H), H accumulated on the grid
        let n = 1_000_000usize;
        let dt = 3.0 / n as f64;
        let mut acc = 0.0;
        let mut cum = 0.0f64;
        let mut prev = h(0.0) * (-cum).exp();
        for i in 1..=n {
            let t = i as f64 * dt;
            cum += 0.5 * dt * (h(t - dt) + h(t));
            let cur = h(t) * (-cum).exp();
            acc += 0.5 * dt * (prev + cur);
            prev = cur;
        }
        assert!((v - acc).abs() / acc < 1e-6, "nested {v} vs trapezoid {acc}");
    }

    #[test]
    fn split_integration_handles_piecewise_constant() {
        let rule = QuadratureRule::gk15();
        let f = |t: f64| if t < 1.0 { 0.2 } else { 0.7 };
        let (v, _) = rule.integrate_split(f, 0.0, 3.0, &[1.0]).unwrap();
        assert_abs_diff_eq!(v, 0.2 + 2.0 * 0.7, epsilon = 1e-12);
        // cuts outside the range are ignored
        let (v, _) = rule.integrate_split(|_| 1.0, 0.5, 1.5, &[0.0, 2.0]).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-14);
    }
}
