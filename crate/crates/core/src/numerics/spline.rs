//! B-spline bases and the natural cubic spline basis used for marker trajectories.
//!
//! [`NcsBasis`] reproduces the column convention of R's `splines::ns()` with
//! `intercept = FALSE`: cubic B-splines on the augmented knot sequence, first
//! column dropped, then projected onto the null space of the second-derivative
//! constraints at both boundary knots via a Householder QR. Internally each
//! basis function is stored as one cubic polynomial per knot interval, so
//! values, derivatives and running integrals are exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// B-spline basis of a given order (4 = cubic) on a nondecreasing knot sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    knots: Vec<f64>,
    order: usize,
}

impl BSplineBasis {
    pub fn new(knots: Vec<f64>, order: usize) -> Result<Self> {
        if order == 0 || knots.len() <= order {
            return Err(Error::Usage(
                "B-spline basis needs more knots than its order".into(),
            ));
        }
        if knots.windows(2).any(|w| !(w[0] <= w[1])) || knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::Usage(
                "B-spline knots must be finite and nondecreasing".into(),
            ));
        }
        if knots[0] >= knots[knots.len() - 1] {
            return Err(Error::Usage("B-spline knots span an empty interval".into()));
        }
        Ok(BSplineBasis { knots, order })
    }

    /// Cubic B-splines with boundary knots repeated `order` times.
    pub fn with_boundary(low: f64, high: f64, internal: &[f64], order: usize) -> Result<Self> {
        if !(low < high) || internal.iter().any(|&k| !(k > low && k < high)) {
            return Err(Error::Usage(
                "internal knots must lie strictly inside the boundary knots".into(),
            ));
        }
        if internal.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Usage(
                "internal knots must be strictly increasing".into(),
            ));
        }
        let mut knots = vec![low; order];
        knots.extend_from_slice(internal);
        knots.extend(std::iter::repeat(high).take(order));
        Self::new(knots, order)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.knots.len() - self.order
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn boundary(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    // Index of the knot interval [t_mu, t_mu+1) holding x; the right boundary
    // belongs to the last nondegenerate interval.
    fn interval(&self, x: f64) -> usize {
        let t = &self.knots;
        let last = t.len() - 1;
        let mut hi = last;
        while hi > 0 && t[hi - 1] == t[last] {
            hi -= 1;
        }
        // hi - 1 is the last nondegenerate interval start
        let last_mu = hi - 1;
        if x >= t[last_mu] {
            return last_mu;
        }
        let mut mu = t.partition_point(|&k| k <= x);
        mu = mu.saturating_sub(1);
        let mut first = 0;
        while first + 1 < t.len() && t[first + 1] == t[0] {
            first += 1;
        }
        mu.max(first)
    }

    /// Values (or the `deriv`-th derivatives) of all basis functions at `x`.
    /// Outside the knot span the polynomial piece of the nearest interval is used.
    pub fn eval_deriv(&self, x: f64, deriv: usize) -> Vec<f64> {
        let t = &self.knots;
        let k = self.order;
        let n_total = t.len();
        if deriv >= k {
            return vec![0.0; self.len()];
        }
        let mu = self.interval(x);
        let base_order = k - deriv;
        // order-1 indicators
        let mut v = vec![0.0; n_total - 1];
        v[mu] = 1.0;
        for r in 2..=base_order {
            let len = n_total - r;
            let mut next = vec![0.0; len];
            for i in 0..len {
                let mut s = 0.0;
                let d1 = t[i + r - 1] - t[i];
                if d1 > 0.0 && v[i] != 0.0 {
                    s += (x - t[i]) / d1 * v[i];
                }
                let d2 = t[i + r] - t[i + 1];
                if d2 > 0.0 && v[i + 1] != 0.0 {
                    s += (t[i + r] - x) / d2 * v[i + 1];
                }
                next[i] = s;
            }
            v = next;
        }
        for r in (base_order + 1)..=k {
            let len = n_total - r;
            let mut next = vec![0.0; len];
            let rf = (r - 1) as f64;
            for i in 0..len {
                let mut s = 0.0;
                let d1 = t[i + r - 1] - t[i];
                if d1 > 0.0 {
                    s += v[i] / d1;
                }
                let d2 = t[i + r] - t[i + 1];
                if d2 > 0.0 {
                    s -= v[i + 1] / d2;
                }
                next[i] = rf * s;
            }
            v = next;
        }
        v
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        self.eval_deriv(x, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NcsKnots {
    boundary_knots: (f64, f64),
    internal_knots: Vec<f64>,
}

/// Natural cubic spline basis (no intercept column) with linear tails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NcsKnots", into = "NcsKnots")]
pub struct NcsBasis {
    boundary: (f64, f64),
    internal: Vec<f64>,
    // distinct knots low, internal..., high
    breaks: Vec<f64>,
    // coef[interval][basis][power] for the local cubic in (x - breaks[interval])
    coef: Vec<Vec<[f64; 4]>>,
    // antiderivative from `low` up to each break
    cum: Vec<Vec<f64>>,
    low_value: Vec<f64>,
    low_slope: Vec<f64>,
    high_value: Vec<f64>,
    high_slope: Vec<f64>,
}

impl TryFrom<NcsKnots> for NcsBasis {
    type Error = Error;
    fn try_from(k: NcsKnots) -> Result<Self> {
        NcsBasis::new(k.boundary_knots, &k.internal_knots)
    }
}

impl From<NcsBasis> for NcsKnots {
    fn from(b: NcsBasis) -> Self {
        NcsKnots {
            boundary_knots: b.boundary,
            internal_knots: b.internal,
        }
    }
}

/// Householder QR of a tall matrix (row-major, `rows x cols`), returning the
/// full orthogonal factor. Sign conventions follow LINPACK/LAPACK.
fn householder_q(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut a = a.to_vec();
    let mut q = vec![0.0; rows * rows];
    for i in 0..rows {
        q[i * rows + i] = 1.0;
    }
    let mut reflectors: Vec<(usize, Vec<f64>, f64)> = Vec::new();
    for l in 0..cols.min(rows - 1) {
        let norm: f64 = (l..rows)
            .map(|i| a[i * cols + l].powi(2))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = a[l * cols + l];
        let nrm = if alpha < 0.0 { -norm } else { norm };
        let mut u: Vec<f64> = (l..rows).map(|i| a[i * cols + l] / nrm).collect();
        u[0] += 1.0;
        let u1 = u[0];
        for j in l..cols {
            let dot: f64 = (l..rows).map(|i| u[i - l] * a[i * cols + j]).sum();
            let t = -dot / u1;
            for i in l..rows {
                a[i * cols + j] += t * u[i - l];
            }
        }
        reflectors.push((l, u, u1));
    }
    // Q = H_1 H_2 ... applied to the identity from the right-most reflector.
    for (l, u, u1) in reflectors.iter().rev() {
        for j in 0..rows {
            let dot: f64 = (*l..rows).map(|i| u[i - l] * q[i * rows + j]).sum();
            let t = -dot / u1;
            for i in *l..rows {
                q[i * rows + j] += t * u[i - l];
            }
        }
    }
    q
}

impl NcsBasis {
    /// Basis with the given boundary knots and strictly increasing internal knots.
    pub fn new(boundary: (f64, f64), internal: &[f64]) -> Result<Self> {
        let (low, high) = boundary;
        let bs = BSplineBasis::with_boundary(low, high, internal, 4)?;
        let n_bs = bs.len();
        let m = n_bs - 1;
        let dim = m - 2;

        // Second-derivative constraints at both boundaries (first column dropped).
        let c_low = bs.eval_deriv(low, 2);
        let c_high = bs.eval_deriv(high, 2);
        let mut ct = vec![0.0; m * 2];
        for i in 0..m {
            ct[i * 2] = c_low[i + 1];
            ct[i * 2 + 1] = c_high[i + 1];
        }
        let q = householder_q(&ct, m, 2);
        let project = |raw: &[f64]| -> Vec<f64> {
            (0..dim)
                .map(|c| (0..m).map(|i| raw[i + 1] * q[i * m + c + 2]).sum())
                .collect()
        };

        let mut breaks = vec![low];
        breaks.extend_from_slice(internal);
        breaks.push(high);
        let n_int = breaks.len() - 1;
        let mut coef = Vec::with_capacity(n_int);
        for j in 0..n_int {
            let x = breaks[j];
            let derivs: Vec<Vec<f64>> = (0..4).map(|d| project(&bs.eval_deriv(x, d))).collect();
            let fact = [1.0, 1.0, 2.0, 6.0];
            let piece: Vec<[f64; 4]> = (0..dim)
                .map(|q| {
                    let mut c = [0.0; 4];
                    for d in 0..4 {
                        c[d] = derivs[d][q] / fact[d];
                    }
                    c
                })
                .collect();
            coef.push(piece);
        }

        let mut basis = NcsBasis {
            boundary,
            internal: internal.to_vec(),
            breaks,
            coef,
            cum: Vec::new(),
            low_value: vec![0.0; dim],
            low_slope: vec![0.0; dim],
            high_value: vec![0.0; dim],
            high_slope: vec![0.0; dim],
        };
        let mut cum = vec![vec![0.0; dim]];
        for j in 0..n_int {
            let h = basis.breaks[j + 1] - basis.breaks[j];
            let prev = cum[j].clone();
            let next: Vec<f64> = (0..dim)
                .map(|q| {
                    let c = &basis.coef[j][q];
                    prev[q]
                        + c[0] * h
                        + c[1] * h * h / 2.0
                        + c[2] * h.powi(3) / 3.0
                        + c[3] * h.powi(4) / 4.0
                })
                .collect();
            cum.push(next);
        }
        basis.cum = cum;
        let hl = basis.breaks[n_int] - basis.breaks[n_int - 1];
        for q in 0..dim {
            let c0 = &basis.coef[0][q];
            basis.low_value[q] = c0[0];
            basis.low_slope[q] = c0[1];
            let c = &basis.coef[n_int - 1][q];
            basis.high_value[q] = c[0] + c[1] * hl + c[2] * hl * hl + c[3] * hl.powi(3);
            basis.high_slope[q] = c[1] + 2.0 * c[2] * hl + 3.0 * c[3] * hl * hl;
        }
        Ok(basis)
    }

    /// Knots placed at the given quantiles (type-7) of `times`.
    pub fn at_quantiles(boundary: (f64, f64), times: &[f64], probs: &[f64]) -> Result<Self> {
        let mut v: Vec<f64> = times.to_vec();
        if v.is_empty() {
            return Err(Error::Data("cannot place knots on empty data".into()));
        }
        v.sort_by(f64::total_cmp);
        let knots: Vec<f64> = probs.iter().map(|&p| quantile_sorted(&v, p)).collect();
        Self::new(boundary, &knots)
    }

    pub fn boundary_knots(&self) -> (f64, f64) {
        self.boundary
    }

    pub fn internal_knots(&self) -> &[f64] {
        &self.internal
    }

    /// All knots (boundary and internal), ascending.
    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn dimension(&self) -> usize {
        self.low_value.len()
    }

    fn piece(&self, t: f64) -> usize {
        let n_int = self.breaks.len() - 1;
        let k = self.breaks.partition_point(|&b| b <= t);
        k.saturating_sub(1).min(n_int - 1)
    }

    /// Basis values `B_1(t) .. B_d(t)` written into `out`.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let (low, high) = self.boundary;
        if t < low {
            for q in 0..out.len() {
                out[q] = self.low_value[q] + (t - low) * self.low_slope[q];
            }
        } else if t > high {
            for q in 0..out.len() {
                out[q] = self.high_value[q] + (t - high) * self.high_slope[q];
            }
        } else {
            let j = self.piece(t);
            let h = t - self.breaks[j];
            for (q, o) in out.iter_mut().enumerate() {
                let c = &self.coef[j][q];
                *o = c[0] + h * (c[1] + h * (c[2] + h * c[3]));
            }
        }
    }

    pub fn deriv_into(&self, t: f64, out: &mut [f64]) {
        let (low, high) = self.boundary;
        if t < low {
            out.copy_from_slice(&self.low_slope);
        } else if t > high {
            out.copy_from_slice(&self.high_slope);
        } else {
            let j = self.piece(t);
            let h = t - self.breaks[j];
            for (q, o) in out.iter_mut().enumerate() {
                let c = &self.coef[j][q];
                *o = c[1] + h * (2.0 * c[2] + h * 3.0 * c[3]);
            }
        }
    }

    // antiderivative measured from the low boundary knot
    fn antideriv_into(&self, t: f64, out: &mut [f64]) {
        let (low, high) = self.boundary;
        if t < low {
            let d = t - low;
            for q in 0..out.len() {
                out[q] = self.low_value[q] * d + 0.5 * self.low_slope[q] * d * d;
            }
        } else if t > high {
            let d = t - high;
            let last = self.cum.len() - 1;
            for q in 0..out.len() {
                out[q] =
                    self.cum[last][q] + self.high_value[q] * d + 0.5 * self.high_slope[q] * d * d;
            }
        } else {
            let j = self.piece(t);
            let h = t - self.breaks[j];
            for (q, o) in out.iter_mut().enumerate() {
                let c = &self.coef[j][q];
                *o = self.cum[j][q]
                    + h * (c[0] + h * (c[1] / 2.0 + h * (c[2] / 3.0 + h * c[3] / 4.0)));
            }
        }
    }

    /// Componentwise `∫_0^t B_q(s) ds`.
    pub fn integral_into(&self, t: f64, out: &mut [f64]) {
        self.antideriv_into(t, out);
        if self.boundary.0 != 0.0 {
            let mut at0 = vec![0.0; out.len()];
            self.antideriv_into(0.0, &mut at0);
            for (o, z) in out.iter_mut().zip(at0) {
                *o -= z;
            }
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension()];
        self.eval_into(t, &mut v);
        v
    }

    pub fn deriv(&self, t: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension()];
        self.deriv_into(t, &mut v);
        v
    }

    pub fn integral(&self, t: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension()];
        self.integral_into(t, &mut v);
        v
    }
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::quadrature::gk15_panels;

    fn scenario_basis() -> NcsBasis {
        NcsBasis::new((0.0, 19.0), &[2.1, 5.5]).unwrap()
    }

    // Reference values from an independent evaluation (scipy B-splines with a
    // numpy Householder QR projection, mirroring `splines::ns`).
    const GOLDEN: [(f64, [f64; 3]); 12] = [
        (0.0, [0.0, 0.0, 0.0]),
        (
            0.5,
            [
                -0.06764506514436897,
                0.15360933316332098,
                -0.08539466218618832,
            ],
        ),
        (
            1.0,
            [
                -0.12814810604071875,
                0.29883189349377687,
                -0.16612694079094834,
            ],
        ),
        (
            2.1,
            [
                -0.20091897516542184,
                0.5474700693287342,
                -0.3043501372255134,
            ],
        ),
        (
            3.0,
            [-0.16837362756051602, 0.6416644628312773, -0.356297445236171],
        ),
        (
            5.5,
            [
                0.15460990387738524,
                0.5749183247159962,
                -0.29710842167964746,
            ],
        ),
        (
            7.5,
            [
                0.35460240578447655,
                0.4731983727587468,
                -0.17864913546445474,
            ],
        ),
        (
            10.0,
            [
                0.44016530805387494,
                0.39342832055332566,
                -0.0017655376697977984,
            ],
        ),
        (
            15.0,
            [
                0.21634216501380812,
                0.34769284846188925,
                0.42120092317724334,
            ],
        ),
        (
            19.0,
            [-0.16389850720535626, 0.3690751569661355, 0.7948233502392207],
        ),
        (
            21.0,
            [-0.3677748882918349, 0.38373011882013186, 0.9840447694717029],
        ),
        (
            -1.0,
            [
                0.13767080503807771,
                -0.31001425727093046,
                0.17234345223285277,
            ],
        ),
    ];

    #[test]
    fn matches_golden_values() {
        let b = scenario_basis();
        assert_eq!(b.dimension(), 3);
        for (t, expect) in GOLDEN {
            let v = b.eval(t);
            for q in 0..3 {
                assert!(
                    (v[q] - expect[q]).abs() < 1e-12,
                    "t={t} q={q}: {} vs {}",
                    v[q],
                    expect[q]
                );
            }
        }
    }

    #[test]
    fn bspline_partition_of_unity() {
        let bs = BSplineBasis::with_boundary(0.0, 10.0, &[1.0, 4.0, 7.0], 4).unwrap();
        for x in [0.0, 0.3, 1.0, 3.9, 7.0, 9.99, 10.0] {
            let s: f64 = bs.eval(x).iter().sum();
            assert!((s - 1.0).abs() < 1e-13, "x={x}");
            let d: f64 = bs.eval_deriv(x, 1).iter().sum();
            assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn natural_condition_beyond_boundaries() {
        let b = scenario_basis();
        let h = 0.5;
        for t in [19.5, 25.0, -0.7, -3.0] {
            let (a, m, c) = (b.eval(t - h), b.eval(t), b.eval(t + h));
            for q in 0..3 {
                let dd = (a[q] - 2.0 * m[q] + c[q]) / (h * h);
                assert!(dd.abs() < 1e-8, "t={t}");
            }
        }
        // second derivative vanishes at the boundary knots themselves
        let eps = 1e-4;
        for t in [0.0 + eps, 19.0 - eps] {
            let (a, m, c) = (b.eval(t - eps), b.eval(t), b.eval(t + eps));
            for q in 0..3 {
                assert!(((a[q] - 2.0 * m[q] + c[q]) / (eps * eps)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn derivative_tail_is_constant() {
        let b = scenario_basis();
        assert_eq!(b.deriv(100.0), b.deriv(19.0 + 1e-9));
        let at = b.deriv(19.0);
        let far = b.deriv(50.0);
        for q in 0..3 {
            assert!((at[q] - far[q]).abs() < 1e-12);
        }
    }

    #[test]
    fn integral_properties() {
        let b = scenario_basis();
        assert_eq!(b.integral(0.0), vec![0.0; 3]);
        for t in [0.7, 2.1, 4.0, 12.3, 19.0, 22.0] {
            let got = b.integral(t);
            for q in 0..3 {
                let quad = gk15_panels(|s| b.eval(s)[q], 0.0, t, b.breaks());
                assert!((got[q] - quad).abs() < 1e-9, "t={t} q={q}");
            }
        }
    }

    #[test]
    fn serde_round_trip_by_knots() {
        let b = scenario_basis();
        let js = serde_json::to_string(&b).unwrap();
        assert!(js.contains("internal_knots"));
        let back: NcsBasis = serde_json::from_str(&js).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn rejects_bad_knots() {
        assert!(NcsBasis::new((0.0, 19.0), &[5.5, 2.1]).is_err());
        assert!(NcsBasis::new((0.0, 19.0), &[19.0]).is_err());
        assert!(NcsBasis::new((3.0, 1.0), &[]).is_err());
        let no_internal = NcsBasis::new((0.0, 1.0), &[]).unwrap();
        assert_eq!(no_internal.dimension(), 1);
    }

    #[test]
    fn quantile_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert!((quantile_sorted(&v, 1.0 / 3.0) - 2.0).abs() < 1e-12);
    }
}
