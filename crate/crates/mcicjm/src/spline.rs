//! Spline bases for the longitudinal trajectory and the log baseline hazards.
//!
//! Two families live here:
//!
//! * [`NcsBasis`] — natural cubic splines used for the nonlinear time trend of
//!   the biomarker. The basis is normalized so that every basis function
//!   vanishes at the left boundary knot, which keeps the model intercept
//!   separate from the spline terms. Evaluation extrapolates linearly beyond
//!   the boundary knots (the natural constraint), which matters because the
//!   hazard model needs the trajectory at `t - 1` even when `t < 1`.
//! * [`BsplineBasis`] — clamped B-splines used for the log baseline hazard,
//!   paired with [`PenaltyMatrix`] difference penalties to form the P-spline
//!   smoothing prior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Natural cubic spline basis with the left-boundary-zero normalization.
///
/// With knots `x_0 < x_1 < ... < x_{K-1}` (boundary plus internal), the j-th
/// basis function is the natural cubic interpolant of the indicator that is 1
/// at knot `j+1` and 0 at every other knot. These `K - 1` functions span
/// exactly the subspace of natural cubic splines vanishing at `x_0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "NcsBasisDef", into = "NcsBasisDef")]
pub struct NcsBasis {
    boundary: (f64, f64),
    internal: Vec<f64>,
    knots: Vec<f64>,
    // Per basis function: knot values, knot second derivatives, boundary slopes.
    funcs: Vec<NcsFunc>,
}

#[derive(Debug, Clone)]
struct NcsFunc {
    values: Vec<f64>,
    second: Vec<f64>,
    left_slope: f64,
    right_slope: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NcsBasisDef {
    boundary: (f64, f64),
    internal: Vec<f64>,
}

impl TryFrom<NcsBasisDef> for NcsBasis {
    type Error = Error;
    fn try_from(def: NcsBasisDef) -> Result<Self> {
        NcsBasis::new(def.boundary, def.internal)
    }
}

impl From<NcsBasis> for NcsBasisDef {
    fn from(b: NcsBasis) -> Self {
        NcsBasisDef { boundary: b.boundary, internal: b.internal }
    }
}

impl NcsBasis {
    pub fn new(boundary: (f64, f64), internal: Vec<f64>) -> Result<Self> {
        let (lo, hi) = boundary;
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::config(format!(
                "natural spline boundary knots must be finite and ordered, got [{lo}, {hi}]"
            )));
        }
        for w in internal.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::config("internal knots must be strictly increasing"));
            }
        }
        if internal.iter().any(|&k| !k.is_finite() || k <= lo || k >= hi) {
            return Err(Error::config(
                "internal knots must lie strictly inside the boundary interval",
            ));
        }
        let mut knots = Vec::with_capacity(internal.len() + 2);
        knots.push(lo);
        knots.extend_from_slice(&internal);
        knots.push(hi);

        let n_knots = knots.len();
        let funcs = (1..n_knots)
            .map(|target| {
                let mut values = vec![0.0; n_knots];
                values[target] = 1.0;
                NcsFunc::interpolate(&knots, values)
            })
            .collect();

        Ok(NcsBasis { boundary, internal, knots, funcs })
    }

    /// Default basis used by the model: two internal knots, so `df = 3`.
    pub fn with_default_knots(boundary: (f64, f64), internal: [f64; 2]) -> Result<Self> {
        Self::new(boundary, internal.to_vec())
    }

    pub fn df(&self) -> usize {
        self.funcs.len()
    }

    pub fn boundary(&self) -> (f64, f64) {
        self.boundary
    }

    pub fn internal_knots(&self) -> &[f64] {
        &self.internal
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Evaluate all basis functions at `t` into `out` (length `df`).
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        if !t.is_finite() {
            return Err(Error::invalid_input(format!("spline evaluation time must be finite, got {t}")));
        }
        assert_eq!(out.len(), self.df());
        for (o, f) in out.iter_mut().zip(&self.funcs) {
            *o = f.eval(&self.knots, t);
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.df()];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }
}

impl NcsFunc {
    fn interpolate(knots: &[f64], values: Vec<f64>) -> Self {
        let n = knots.len();
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();

        // Natural boundary conditions: second derivative zero at both ends.
        // Thomas algorithm on the K-2 interior equations.
        let mut second = vec![0.0; n];
        let m = n - 2;
        if m > 0 {
            let mut diag = vec![0.0; m];
            let mut upper = vec![0.0; m];
            let mut rhs = vec![0.0; m];
            for i in 0..m {
                let k = i + 1;
                diag[i] = 2.0 * (h[k - 1] + h[k]);
                upper[i] = h[k];
                rhs[i] = 6.0
                    * ((values[k + 1] - values[k]) / h[k] - (values[k] - values[k - 1]) / h[k - 1]);
            }
            for i in 1..m {
                let lower = h[i]; // sub-diagonal entry for row i is h[(i+1)-1]
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            let mut x = vec![0.0; m];
            x[m - 1] = rhs[m - 1] / diag[m - 1];
            for i in (0..m - 1).rev() {
                x[i] = (rhs[i] - upper[i] * x[i + 1]) / diag[i];
            }
            second[1..=m].copy_from_slice(&x);
        }

        let h0 = h[0];
        let hl = h[n - 2];
        let left_slope = (values[1] - values[0]) / h0 - h0 * second[1] / 6.0;
        let right_slope = (values[n - 1] - values[n - 2]) / hl + hl * second[n - 2] / 6.0;

        NcsFunc { values, second, left_slope, right_slope }
    }

    fn eval(&self, knots: &[f64], t: f64) -> f64 {
        let n = knots.len();
        if t <= knots[0] {
            return self.values[0] + self.left_slope * (t - knots[0]);
        }
        if t >= knots[n - 1] {
            return self.values[n - 1] + self.right_slope * (t - knots[n - 1]);
        }
        let i = match knots[..n - 1].iter().rposition(|&k| k <= t) {
            Some(i) => i,
            None => 0,
        };
        let h = knots[i + 1] - knots[i];
        let a = (knots[i + 1] - t) / h;
        let b = (t - knots[i]) / h;
        a * self.values[i]
            + b * self.values[i + 1]
            + ((a * a * a - a) * self.second[i] + (b * b * b - b) * self.second[i + 1])
                * h
                * h
                / 6.0
    }
}

/// Clamped B-spline basis on `[range.0, range.1]`.
///
/// `knot_count` follows the convention `n_basis = knot_count + degree - 2`:
/// the basis places `knot_count - 3` equally spaced internal knots and repeats
/// the boundary knots `degree + 1` times. A count of 11 therefore yields 12
/// cubic basis functions and a count of 4 yields 5. The clamped construction
/// keeps the partition of unity on the whole range, so a flat coefficient
/// vector represents a constant log hazard.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "BsplineBasisDef", into = "BsplineBasisDef")]
pub struct BsplineBasis {
    degree: usize,
    knot_count: usize,
    range: (f64, f64),
    knots: Vec<f64>,
    n_basis: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BsplineBasisDef {
    degree: usize,
    knot_count: usize,
    range: (f64, f64),
}

impl TryFrom<BsplineBasisDef> for BsplineBasis {
    type Error = Error;
    fn try_from(def: BsplineBasisDef) -> Result<Self> {
        BsplineBasis::from_knot_count(def.knot_count, def.degree, def.range)
    }
}

impl From<BsplineBasis> for BsplineBasisDef {
    fn from(b: BsplineBasis) -> Self {
        BsplineBasisDef { degree: b.degree, knot_count: b.knot_count, range: b.range }
    }
}

impl BsplineBasis {
    pub fn from_knot_count(knot_count: usize, degree: usize, range: (f64, f64)) -> Result<Self> {
        if degree < 1 {
            return Err(Error::config("B-spline degree must be at least 1"));
        }
        if knot_count < 3 {
            return Err(Error::config("B-spline knot count must be at least 3"));
        }
        let (lo, hi) = range;
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::config(format!(
                "B-spline range must be finite and ordered, got [{lo}, {hi}]"
            )));
        }
        let n_internal = knot_count - 3;
        let n_segments = (n_internal + 1) as f64;
        let internal: Vec<f64> = (1..=n_internal)
            .map(|i| lo + (hi - lo) * i as f64 / n_segments)
            .collect();

        let n_basis = n_internal + degree + 1;
        let mut knots = Vec::with_capacity(n_basis + degree + 1);
        for _ in 0..=degree {
            knots.push(lo);
        }
        knots.extend_from_slice(&internal);
        for _ in 0..=degree {
            knots.push(hi);
        }
        debug_assert_eq!(knots.len(), n_basis + degree + 1);
        debug_assert_eq!(n_basis, knot_count + degree - 2);

        Ok(BsplineBasis { degree, knot_count, range, knots, n_basis })
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knot_count(&self) -> usize {
        self.knot_count
    }

    pub fn range(&self) -> (f64, f64) {
        self.range
    }

    /// Internal knots, excluding the repeated boundary knots.
    pub fn internal_knots(&self) -> &[f64] {
        &self.knots[self.degree + 1..self.knots.len() - self.degree - 1]
    }

    /// Evaluate all basis functions at `t` into `out` (length `n_basis`).
    ///
    /// Times outside the knot range are clamped to the nearest boundary; the
    /// return value reports whether clamping happened.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> bool {
        assert_eq!(out.len(), self.n_basis);
        out.fill(0.0);
        let (values, span, clamped) = self.nonzero_at(t);
        for (i, v) in values.iter().enumerate() {
            out[span - self.degree + i] = *v;
        }
        clamped
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_basis];
        self.eval_into(t, &mut out);
        out
    }

    /// The `degree + 1` potentially nonzero basis values at `t`, the knot span
    /// index, and the clamping flag.
    pub fn nonzero_at(&self, t: f64) -> (Vec<f64>, usize, bool) {
        let (lo, hi) = self.range;
        let clamped = t < lo || t > hi;
        let t = t.clamp(lo, hi);
        let span = self.find_span(t);

        let p = self.degree;
        let mut values = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        values[0] = 1.0;
        for j in 1..=p {
            left[j] = t - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        (values, span, clamped)
    }

    fn find_span(&self, t: f64) -> usize {
        let p = self.degree;
        let n = self.n_basis;
        if t >= self.knots[n] {
            return n - 1;
        }
        let mut lo = p;
        let mut hi = n;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }
}

/// Which rank enters the `tau^{rank/2}` factor of the P-spline prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankConvention {
    /// Rank of the un-ridged difference penalty, `n_basis - order`.
    Unridged,
    /// Full dimension (the ridge makes the penalty matrix nonsingular).
    Full,
}

impl Default for RankConvention {
    fn default() -> Self {
        RankConvention::Unridged
    }
}

/// Configuration of the difference penalty, serialized with the model spec.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub order: usize,
    pub ridge: f64,
    #[serde(default)]
    pub rank_convention: RankConvention,
}

impl Default for PenaltySpec {
    fn default() -> Self {
        PenaltySpec { order: 2, ridge: 1e-6, rank_convention: RankConvention::Unridged }
    }
}

/// Ridge-stabilized difference penalty `M = D_r' D_r + ridge * I`.
#[derive(Debug, Clone)]
pub struct PenaltyMatrix {
    order: usize,
    dim: usize,
    ridge: f64,
    rank_term: usize,
    matrix: Vec<Vec<f64>>,
}

/// `M = D_r' D_r + 1e-6 I` with the default rank convention.
pub fn difference_penalty(n_basis: usize, order: usize) -> Result<PenaltyMatrix> {
    PenaltyMatrix::new(n_basis, PenaltySpec { order, ..PenaltySpec::default() })
}

impl PenaltyMatrix {
    pub fn new(n_basis: usize, spec: PenaltySpec) -> Result<Self> {
        if spec.order < 1 || n_basis <= spec.order {
            return Err(Error::config(format!(
                "difference penalty needs n_basis > order >= 1, got n_basis={n_basis}, order={}",
                spec.order
            )));
        }
        if !(spec.ridge > 0.0) {
            return Err(Error::config("penalty ridge must be positive"));
        }

        // r-th difference operator, built by repeated first differences.
        let mut rows: Vec<Vec<f64>> = (0..n_basis)
            .map(|i| {
                let mut row = vec![0.0; n_basis];
                row[i] = 1.0;
                row
            })
            .collect();
        for _ in 0..spec.order {
            rows = rows
                .windows(2)
                .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect())
                .collect();
        }

        // Gram matrix assembled from one dot product per unordered pair so the
        // result is symmetric at the bit level.
        let mut matrix = vec![vec![0.0; n_basis]; n_basis];
        for i in 0..n_basis {
            for j in i..n_basis {
                let v: f64 = rows.iter().map(|row| row[i] * row[j]).sum();
                matrix[i][j] = v;
                matrix[j][i] = v;
            }
            matrix[i][i] += spec.ridge;
        }

        let rank_term = match spec.rank_convention {
            RankConvention::Unridged => n_basis - spec.order,
            RankConvention::Full => n_basis,
        };

        Ok(PenaltyMatrix { order: spec.order, dim: n_basis, ridge: spec.ridge, rank_term, matrix })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn rank_term(&self) -> usize {
        self.rank_term
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[i][j]
    }

    /// `coef' M coef`, the penalty quadratic form.
    pub fn quadratic_form(&self, coef: &[f64]) -> f64 {
        assert_eq!(coef.len(), self.dim);
        let mut acc = 0.0;
        for (i, row) in self.matrix.iter().enumerate() {
            let mut inner = 0.0;
            for (j, m) in row.iter().enumerate() {
                inner += m * coef[j];
            }
            acc += coef[i] * inner;
        }
        acc
    }

    pub fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.dim, self.dim, |i, j| self.matrix[i][j])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn default_ncs() -> NcsBasis {
        NcsBasis::new((0.0, 12.5), vec![2.5, 6.5]).unwrap()
    }

    #[test]
    fn ncs_zero_at_left_boundary() {
        let b = default_ncs();
        assert_eq!(b.df(), 3);
        let v = b.eval(0.0).unwrap();
        assert_eq!(v, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn ncs_cardinal_at_knots() {
        let b = default_ncs();
        for (j, &k) in [2.5, 6.5, 12.5].iter().enumerate() {
            let v = b.eval(k).unwrap();
            for (i, x) in v.iter().enumerate() {
                assert_abs_diff_eq!(*x, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn ncs_linear_beyond_boundaries() {
        let b = default_ncs();
        // Second divided difference over three collinear points vanishes.
        for base in [13.0, 20.0, -5.0] {
            let (t0, t1, t2) = (base, base + 0.7, base + 1.4);
            // keep all three points on the same side of the knot range
            if t0 < 0.0 && t2 > 0.0 {
                continue;
            }
            let v0 = b.eval(t0).unwrap();
            let v1 = b.eval(t1).unwrap();
            let v2 = b.eval(t2).unwrap();
            for i in 0..3 {
                let dd = (v2[i] - v1[i]) / 0.7 - (v1[i] - v0[i]) / 0.7;
                assert_abs_diff_eq!(dd, 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn ncs_smoothness_at_interior_knots() {
        let b = default_ncs();
        // One-sided stencils that are exact for cubics, so each stays within a
        // single polynomial segment and a genuine derivative jump would show.
        let h = 1e-3;
        let d1 = |f: &dyn Fn(f64) -> f64, x: f64, s: f64| {
            (-11.0 * f(x) + 18.0 * f(x + s * h) - 9.0 * f(x + 2.0 * s * h)
                + 2.0 * f(x + 3.0 * s * h))
                / (6.0 * s * h)
        };
        let d2 = |f: &dyn Fn(f64) -> f64, x: f64, s: f64| {
            (2.0 * f(x) - 5.0 * f(x + s * h) + 4.0 * f(x + 2.0 * s * h) - f(x + 3.0 * s * h))
                / (h * h)
        };
        for &k in &[2.5, 6.5] {
            for i in 0..b.df() {
                let b = &b;
                let f = move |t: f64| b.eval(t).unwrap()[i];
                let scale = 1.0 + f(k).abs();
                assert!((d1(&f, k, 1.0) - d1(&f, k, -1.0)).abs() / scale < 1e-6);
                assert!((d2(&f, k, 1.0) - d2(&f, k, -1.0)).abs() / scale < 1e-6);
            }
        }
    }

    #[test]
    fn ncs_rejects_bad_knots() {
        assert!(NcsBasis::new((0.0, 10.0), vec![5.0, 3.0]).is_err());
        assert!(NcsBasis::new((0.0, 10.0), vec![0.0, 3.0]).is_err());
        assert!(NcsBasis::new((0.0, 10.0), vec![3.0, 10.0]).is_err());
        assert!(NcsBasis::new((10.0, 0.0), vec![3.0]).is_err());
        let b = default_ncs();
        assert!(b.eval(f64::NAN).is_err());
    }

    #[test]
    fn bspline_counts_match_convention() {
        let b = BsplineBasis::from_knot_count(11, 3, (0.0, 12.5)).unwrap();
        assert_eq!(b.n_basis(), 12);
        let b = BsplineBasis::from_knot_count(4, 3, (0.0, 12.5)).unwrap();
        assert_eq!(b.n_basis(), 5);
    }

    #[test]
    fn bspline_partition_of_unity() {
        let b = BsplineBasis::from_knot_count(11, 3, (0.0, 12.5)).unwrap();
        for i in 0..=1000 {
            let t = 12.5 * i as f64 / 1000.0;
            let s: f64 = b.eval(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "sum at {t} was {s}");
            assert!(b.eval(t).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn bspline_local_support_at_knot() {
        let b = BsplineBasis::from_knot_count(11, 3, (0.0, 12.5)).unwrap();
        let knot = b.internal_knots()[2];
        let nonzero = b.eval(knot).iter().filter(|&&v| v != 0.0).count();
        assert!(nonzero <= 4, "expected at most degree+1 nonzero, got {nonzero}");
    }

    #[test]
    fn bspline_clamps_out_of_range() {
        let b = BsplineBasis::from_knot_count(4, 3, (0.0, 10.0)).unwrap();
        let mut out = vec![0.0; b.n_basis()];
        assert!(b.eval_into(12.0, &mut out));
        assert_eq!(out, b.eval(10.0));
        assert!(b.eval_into(-1.0, &mut out));
        assert_eq!(out, b.eval(0.0));
        assert!(!b.eval_into(5.0, &mut out));
    }

    #[test]
    fn penalty_first_order_hand_example() {
        let p = difference_penalty(3, 1).unwrap();
        let expect = [[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                let ridge = if i == j { 1e-6 } else { 0.0 };
                assert_abs_diff_eq!(p.entry(i, j), expect[i][j] + ridge, epsilon = 0.0);
            }
        }
        assert_eq!(p.rank_term(), 2);
    }

    #[test]
    fn penalty_row_sums_are_ridge() {
        let p = difference_penalty(7, 1).unwrap();
        for i in 0..7 {
            let s: f64 = (0..7).map(|j| p.entry(i, j)).sum();
            assert_abs_diff_eq!(s, 1e-6, epsilon = 1e-15);
        }
    }

    #[test]
    fn penalty_second_order_annihilates_ramp() {
        let p = difference_penalty(12, 2).unwrap();
        let ramp: Vec<f64> = (1..=12).map(|i| i as f64).collect();
        for i in 0..12 {
            let v: f64 = (0..12).map(|j| p.entry(i, j) * ramp[j]).sum();
            assert_abs_diff_eq!(v, 1e-6 * ramp[i], epsilon = 1e-12);
        }
        assert_eq!(p.rank_term(), 10);
    }

    #[test]
    fn penalty_symmetric_and_positive_definite() {
        for (n, r) in [(5, 1), (12, 2), (13, 3)] {
            let p = difference_penalty(n, r).unwrap();
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(p.entry(i, j).to_bits(), p.entry(j, i).to_bits());
                }
            }
            assert!(nalgebra::Cholesky::new(p.to_nalgebra()).is_some());
        }
    }

    #[test]
    fn penalty_rejects_bad_order() {
        assert!(difference_penalty(3, 3).is_err());
        assert!(difference_penalty(3, 0).is_err());
        let full = PenaltyMatrix::new(
            6,
            PenaltySpec { order: 2, ridge: 1e-6, rank_convention: RankConvention::Full },
        )
        .unwrap();
        assert_eq!(full.rank_term(), 6);
    }

    #[test]
    fn penalty_quadratic_form_matches_matrix() {
        let p = difference_penalty(6, 2).unwrap();
        let coef = [0.3, -0.1, 0.7, 0.2, -0.5, 0.9];
        let mut direct = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                direct += coef[i] * p.entry(i, j) * coef[j];
            }
        }
        assert_abs_diff_eq!(p.quadratic_form(&coef), direct, epsilon = 1e-14);
    }
}
