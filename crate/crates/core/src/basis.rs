//! Spline bases, difference penalties and fixed-node Gauss–Kronrod quadrature.
//!
//! These are the numerical kernels shared by the hazard and longitudinal code:
//! B-splines for the log-baseline hazards, natural cubic splines for
//! nonlinear marker trajectories, P-spline penalty matrices, and the 15-point
//! Kronrod extension of the 7-point Gauss rule for cumulative hazards.

use nalgebra::DMatrix;

use crate::error::{invalid, numerical, JmError, Result};

/// Largest supported B-spline degree. Rows are stored inline.
pub const MAX_DEGREE: usize = 5;

/// A B-spline basis defined by a nondecreasing knot vector and a degree.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    knots: Vec<f64>,
    degree: usize,
}

/// The nonzero entries of a B-spline basis evaluated at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisRow {
    /// Index of the first nonzero basis function.
    pub start: usize,
    pub len: usize,
    pub values: [f64; MAX_DEGREE + 1],
}

impl BasisRow {
    /// Inner product with a full coefficient vector.
    #[inline]
    pub fn dot(&self, coef: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.len {
            acc += self.values[k] * coef[self.start + k];
        }
        acc
    }

    pub fn to_dense(&self, q: usize) -> Vec<f64> {
        let mut out = vec![0.0; q];
        for k in 0..self.len {
            out[self.start + k] = self.values[k];
        }
        out
    }
}

impl SplineBasis {
    pub fn new(knots: Vec<f64>, degree: usize) -> Result<Self> {
        if degree > MAX_DEGREE {
            return Err(invalid(format!("spline degree {degree} exceeds {MAX_DEGREE}")));
        }
        if knots.len() < 2 * (degree + 1) {
            return Err(invalid(format!(
                "{} knots cannot support a degree-{degree} basis",
                knots.len()
            )));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) || knots.iter().any(|k| !k.is_finite()) {
            return Err(invalid("knot vector must be finite and nondecreasing"));
        }
        if knots[degree] >= knots[knots.len() - degree - 1] {
            return Err(invalid("knot range is empty"));
        }
        Ok(Self { knots, degree })
    }

    /// Equally spaced knots over `[lo, hi]` giving `q` basis functions, with
    /// the boundary knots replicated `degree + 1` times.
    pub fn uniform(lo: f64, hi: f64, q: usize, degree: usize) -> Result<Self> {
        if q < degree + 1 {
            return Err(invalid(format!("need at least {} basis functions", degree + 1)));
        }
        if !(hi > lo) {
            return Err(invalid(format!("empty spline range [{lo}, {hi}]")));
        }
        let segments = q - degree;
        let mut knots = Vec::with_capacity(q + degree + 1);
        knots.extend(std::iter::repeat(lo).take(degree + 1));
        for k in 1..segments {
            knots.push(lo + (hi - lo) * k as f64 / segments as f64);
        }
        knots.extend(std::iter::repeat(hi).take(degree + 1));
        Self::new(knots, degree)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions.
    pub fn len(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> (f64, f64) {
        (self.knots[self.degree], self.knots[self.len()])
    }

    /// Distinct knots strictly inside the basis range.
    pub fn interior_breaks(&self) -> Vec<f64> {
        let (lo, hi) = self.range();
        let mut out: Vec<f64> = Vec::new();
        for &k in &self.knots {
            if k > lo && k < hi && out.last().map_or(true, |&l| l < k) {
                out.push(k);
            }
        }
        out
    }

    fn span(&self, t: f64) -> usize {
        let q = self.len();
        let (_, hi) = self.range();
        if t >= hi {
            // left limit at the right boundary
            let mut s = q - 1;
            while self.knots[s] >= hi && s > self.degree {
                s -= 1;
            }
            return s;
        }
        // largest s in [degree, q-1] with knots[s] <= t
        let slice = &self.knots[self.degree..q];
        let idx = slice.partition_point(|&k| k <= t);
        self.degree + idx.saturating_sub(1)
    }

    /// Sparse evaluation: the `degree + 1` possibly-nonzero values.
    pub fn eval_row(&self, t: f64) -> Result<BasisRow> {
        let (lo, hi) = self.range();
        if !(t >= lo && t <= hi) {
            return Err(JmError::OutOfRange(t, lo, hi));
        }
        let d = self.degree;
        let span = self.span(t);
        let mut n = [0.0; MAX_DEGREE + 1];
        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        n[0] = 1.0;
        for j in 1..=d {
            left[j] = t - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        Ok(BasisRow { start: span - d, len: d + 1, values: n })
    }

    /// Dense evaluation, a vector of length `len()`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        Ok(self.eval_row(t)?.to_dense(self.len()))
    }
}

/// Convenience wrapper matching the free-function form of the operation.
pub fn bspline_eval(basis: &SplineBasis, t: f64) -> Result<Vec<f64>> {
    basis.eval(t)
}

/// Which derivative (or running integral from 0) of a basis to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Derivative {
    Value,
    First,
    Second,
    /// `∫_0^t f(s) ds`
    Integral,
}

/// Natural cubic spline basis (truncated power form), linear beyond the
/// boundary knots. With `K` knots it has `K - 1` columns (intercept excluded):
/// `t` followed by `d_k(t) - d_{K-1}(t)` for `k = 1..K-2`.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalCubicBasis {
    knots: Vec<f64>,
}

impl NaturalCubicBasis {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(invalid("natural cubic spline needs at least 2 knots"));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("natural spline knots must be strictly increasing"));
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn len(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn cube_part(x: f64, knot: f64, which: Derivative) -> f64 {
        let u = x - knot;
        match which {
            Derivative::Value => {
                if u > 0.0 {
                    u * u * u
                } else {
                    0.0
                }
            }
            Derivative::First => {
                if u > 0.0 {
                    3.0 * u * u
                } else {
                    0.0
                }
            }
            Derivative::Second => {
                if u > 0.0 {
                    6.0 * u
                } else {
                    0.0
                }
            }
            Derivative::Integral => {
                let upper = if u > 0.0 { u.powi(4) / 4.0 } else { 0.0 };
                let lower = if -knot > 0.0 { knot.powi(4) / 4.0 } else { 0.0 };
                upper - lower
            }
        }
    }

    fn d(&self, k: usize, x: f64, which: Derivative) -> f64 {
        let last = *self.knots.last().unwrap();
        let xk = self.knots[k];
        (Self::cube_part(x, xk, which) - Self::cube_part(x, last, which)) / (last - xk)
    }

    /// Evaluates column `col` (0-based).
    pub fn column(&self, col: usize, t: f64, which: Derivative) -> f64 {
        if col == 0 {
            return match which {
                Derivative::Value => t,
                Derivative::First => 1.0,
                Derivative::Second => 0.0,
                Derivative::Integral => 0.5 * t * t,
            };
        }
        let k_minus_2 = self.knots.len() - 2;
        self.d(col - 1, t, which) - self.d(k_minus_2, t, which)
    }

    pub fn eval_with(&self, t: f64, which: Derivative) -> Vec<f64> {
        (0..self.len()).map(|c| self.column(c, t, which)).collect()
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        self.eval_with(t, Derivative::Value)
    }
}

pub fn natural_cubic_eval(knots: &[f64], t: f64) -> Result<Vec<f64>> {
    Ok(NaturalCubicBasis::new(knots.to_vec())?.eval(t))
}

/// P-spline penalty `M = ΔᵀΔ + εI` with `Δ` the `order`-th difference operator.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    pub order: usize,
    pub ridge: f64,
    pub matrix: DMatrix<f64>,
}

impl PenaltyMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `γᵀ M γ`
    pub fn quad_form(&self, gamma: &[f64]) -> f64 {
        let q = self.dim();
        let mut acc = 0.0;
        for r in 0..q {
            let mut row = 0.0;
            for c in 0..q {
                row += self.matrix[(r, c)] * gamma[c];
            }
            acc += gamma[r] * row;
        }
        acc
    }

    /// `log det M`, via Cholesky.
    pub fn log_det(&self) -> Result<f64> {
        let chol = self
            .matrix
            .clone()
            .cholesky()
            .ok_or_else(|| numerical("penalty matrix is not positive definite"))?;
        Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
    }
}

/// The `(q - order) × q` difference operator.
pub fn difference_operator(q: usize, order: usize) -> DMatrix<f64> {
    let rows = q - order;
    let mut coefs = vec![0.0; order + 1];
    // (-1)^(order-k) * C(order, k)
    for (k, c) in coefs.iter_mut().enumerate() {
        let mut binom = 1.0;
        for i in 0..k {
            binom = binom * (order - i) as f64 / (i + 1) as f64;
        }
        *c = if (order - k) % 2 == 0 { binom } else { -binom };
    }
    DMatrix::from_fn(rows, q, |r, c| {
        if c >= r && c - r <= order {
            coefs[c - r]
        } else {
            0.0
        }
    })
}

pub fn difference_penalty(q: usize, order: usize, ridge: f64) -> Result<PenaltyMatrix> {
    if order < 1 || q <= order {
        return Err(invalid(format!(
            "difference penalty needs basis count > order >= 1 (got {q}, {order})"
        )));
    }
    if !(ridge >= 0.0) {
        return Err(invalid("ridge must be nonnegative"));
    }
    let delta = difference_operator(q, order);
    let mut m = delta.transpose() * &delta;
    for i in 0..q {
        m[(i, i)] += ridge;
    }
    Ok(PenaltyMatrix { order, ridge, matrix: m })
}

/// Kronrod abscissae on [-1, 1] (nonnegative half, descending; last is 0).
pub const GK15_NODES: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

/// Kronrod weights matching [`GK15_NODES`].
pub const GK15_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

/// Weights of the embedded 7-point Gauss rule (nodes `GK15_NODES[1,3,5,7]`).
pub const G7_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// The 15 (node, weight) pairs mapped onto `[a, b]`, in increasing node order.
pub fn gk15_points(a: f64, b: f64) -> [(f64, f64); 15] {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut out = [(0.0, 0.0); 15];
    for k in 0..7 {
        out[k] = (center - half * GK15_NODES[k], half * GK15_WEIGHTS[k]);
        out[14 - k] = (center + half * GK15_NODES[k], half * GK15_WEIGHTS[k]);
    }
    out[7] = (center, half * GK15_WEIGHTS[7]);
    out
}

/// 15-point Gauss–Kronrod approximation of `∫_a^b f`.
pub fn gauss_kronrod_15<F>(mut f: F, a: f64, b: f64) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    if !(a <= b) {
        return Err(invalid(format!("integration bounds out of order: [{a}, {b}]")));
    }
    if a == b {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (x, w) in gk15_points(a, b) {
        let v = f(x);
        if !v.is_finite() {
            return Err(numerical(format!("integrand is not finite at {x}")));
        }
        acc += w * v;
    }
    Ok(acc)
}

/// GK15 applied piecewise on `[a, b]` split at `breaks`.
pub fn gauss_kronrod_15_split<F>(mut f: F, a: f64, b: f64, breaks: &[f64]) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    let mut total = 0.0;
    for (lo, hi) in split_interval(a, b, breaks) {
        total += gauss_kronrod_15(&mut f, lo, hi)?;
    }
    Ok(total)
}

/// Splits `[a, b]` at the breakpoints lying strictly inside it.
pub fn split_interval(a: f64, b: f64, breaks: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut lo = a;
    for &k in breaks {
        if k > lo && k < b {
            out.push((lo, k));
            lo = k;
        }
    }
    if b > lo || out.is_empty() {
        out.push((lo, b));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Cox–de Boor recursion written directly from the definition.
    fn cox_de_boor(knots: &[f64], i: usize, d: usize, t: f64) -> f64 {
        if d == 0 {
            return if knots[i] <= t && t < knots[i + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let den1 = knots[i + d] - knots[i];
        if den1 > 0.0 {
            v += (t - knots[i]) / den1 * cox_de_boor(knots, i, d - 1, t);
        }
        let den2 = knots[i + d + 1] - knots[i + 1];
        if den2 > 0.0 {
            v += (knots[i + d + 1] - t) / den2 * cox_de_boor(knots, i + 1, d - 1, t);
        }
        v
    }

    #[test]
    fn degree_zero_is_indicator() {
        let b = SplineBasis::new(vec![0.0, 1.0, 2.0], 0).unwrap();
        assert_eq!(b.eval(0.5).unwrap(), vec![1.0, 0.0]);
        assert_eq!(b.eval(1.5).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn quadratic_matches_recursive_oracle() {
        let b = SplineBasis::uniform(0.0, 1.0, 6, 2).unwrap();
        for &t in &[0.0, 0.1, 0.3, 0.5, 0.77, 0.999] {
            let fast = b.eval(t).unwrap();
            for (i, v) in fast.iter().enumerate() {
                let slow = cox_de_boor(b.knots(), i, 2, t);
                assert!((v - slow).abs() < 1e-14, "t={t} i={i}: {v} vs {slow}");
            }
        }
    }

    #[test]
    fn right_boundary_takes_left_limit() {
        let b = SplineBasis::uniform(0.0, 10.0, 10, 2).unwrap();
        let at = b.eval(10.0).unwrap();
        let near = b.eval(10.0 - 1e-12).unwrap();
        assert!((at.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, n) in at.iter().zip(&near) {
            assert!((a - n).abs() < 1e-9);
        }
    }

    #[test]
    fn outside_range_is_an_error() {
        let b = SplineBasis::uniform(0.0, 1.0, 5, 2).unwrap();
        assert!(b.eval(-0.01).is_err());
        assert!(b.eval(1.01).is_err());
    }

    #[test]
    fn at_most_degree_plus_one_nonzero() {
        let b = SplineBasis::uniform(0.0, 3.0, 10, 3).unwrap();
        for k in 0..=30 {
            let v = b.eval(k as f64 / 10.0).unwrap();
            assert!(v.iter().filter(|x| **x != 0.0).count() <= 4);
            assert!(v.iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn penalty_small_cases() {
        let p = difference_penalty(3, 1, 0.0).unwrap();
        let want = [[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]];
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(p.matrix[(r, c)], want[r][c]);
            }
        }
        let p = difference_penalty(4, 2, 0.0).unwrap();
        let want = [
            [1.0, -2.0, 1.0, 0.0],
            [-2.0, 5.0, -4.0, 1.0],
            [1.0, -4.0, 5.0, -2.0],
            [0.0, 1.0, -2.0, 1.0],
        ];
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(p.matrix[(r, c)], want[r][c]);
            }
        }
    }

    #[test]
    fn penalty_rejects_low_basis_count() {
        assert!(difference_penalty(2, 2, 1e-6).is_err());
        assert!(difference_penalty(5, 0, 1e-6).is_err());
    }

    #[test]
    fn penalty_annihilates_constants_and_has_expected_rank() {
        for (q, u) in [(5, 1), (8, 2), (10, 3)] {
            let p = difference_penalty(q, u, 0.0).unwrap();
            let ones = DMatrix::from_element(q, 1, 1.0);
            let prod = &p.matrix * ones;
            assert!(prod.iter().all(|v| v.abs() < 1e-12));
            let delta = difference_operator(q, u);
            for r in 0..delta.nrows() {
                assert!(delta.row(r).sum().abs() < 1e-12);
            }
            let eig = p.matrix.clone().symmetric_eigen();
            let rank = eig.eigenvalues.iter().filter(|v| v.abs() > 1e-9).count();
            assert_eq!(rank, q - u);
        }
    }

    #[test]
    fn gk15_constants_checksum() {
        // Kronrod weights integrate 1 and x^2 exactly; Gauss weights too.
        let sum_k: f64 = 2.0 * GK15_WEIGHTS[..7].iter().sum::<f64>() + GK15_WEIGHTS[7];
        assert!((sum_k - 2.0).abs() < 1e-15);
        let sum_g: f64 = 2.0 * G7_WEIGHTS[..3].iter().sum::<f64>() + G7_WEIGHTS[3];
        assert!((sum_g - 2.0).abs() < 1e-15);
        let second: f64 = (0..7)
            .map(|k| 2.0 * GK15_WEIGHTS[k] * GK15_NODES[k].powi(2))
            .sum();
        assert!((second - 2.0 / 3.0).abs() < 1e-15);
        // Gauss-7 alone is exact to degree 13.
        let g12: f64 = (0..3)
            .map(|k| 2.0 * G7_WEIGHTS[k] * GK15_NODES[2 * k + 1].powi(12))
            .sum();
        assert!((g12 - 2.0 / 13.0).abs() < 1e-14);
    }

    #[test]
    fn gk15_basic_integrals() {
        let v = gauss_kronrod_15(|x| x * x, 0.0, 1.0).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        let v = gauss_kronrod_15(f64::exp, 0.0, 1.0).unwrap();
        assert!((v - (std::f64::consts::E - 1.0)).abs() < 1e-12);
        assert_eq!(gauss_kronrod_15(f64::exp, 2.0, 2.0).unwrap(), 0.0);
        assert!(gauss_kronrod_15(|_| f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn split_interval_respects_breaks() {
        let parts = split_interval(0.5, 3.5, &[0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(parts, vec![(0.5, 1.0), (1.0, 2.0), (2.0, 3.0), (3.0, 3.5)]);
        assert_eq!(split_interval(1.0, 1.0, &[0.5]), vec![(1.0, 1.0)]);
    }

    #[test]
    fn natural_spline_shape() {
        let ns = NaturalCubicBasis::new(vec![0.0, 5.0, 10.0]).unwrap();
        assert_eq!(ns.eval(3.0).len(), 2);
        assert!(NaturalCubicBasis::new(vec![1.0]).is_err());
        let f = |col: usize, t: f64| ns.column(col, t, Derivative::Value);
        for col in 0..2 {
            // linear outside the boundary knots
            for (edge, dir) in [(0.0, -1.0), (10.0, 1.0)] {
                let h = 0.5 * dir;
                let second = f(col, edge + h) - 2.0 * f(col, edge + 2.0 * h) + f(col, edge + 3.0 * h);
                assert!(second.abs() < 1e-8, "col {col} edge {edge}: {second}");
                assert_eq!(ns.column(col, edge + h, Derivative::Second), 0.0);
            }
            // and the second difference across a boundary vanishes
            for edge in [0.0, 10.0] {
                let h = 1e-3;
                let second = f(col, edge - h) - 2.0 * f(col, edge) + f(col, edge + h);
                assert!(second.abs() < 1e-8, "col {col} edge {edge}: {second}");
            }
        }
    }

    #[test]
    fn natural_spline_derivatives_match_finite_differences() {
        let ns = NaturalCubicBasis::new(vec![0.0, 2.0, 4.5, 9.0]).unwrap();
        let h = 1e-5;
        for col in 0..ns.len() {
            for &t in &[0.7, 3.1, 5.0, 8.2, 11.0] {
                let f = |x| ns.column(col, x, Derivative::Value);
                let fd1 = (f(t + h) - f(t - h)) / (2.0 * h);
                let d1 = ns.column(col, t, Derivative::First);
                assert!((fd1 - d1).abs() < 1e-6 * (1.0 + d1.abs()));
                let g = |x| ns.column(col, x, Derivative::First);
                let fd2 = (g(t + h) - g(t - h)) / (2.0 * h);
                let d2 = ns.column(col, t, Derivative::Second);
                assert!((fd2 - d2).abs() < 1e-5 * (1.0 + d2.abs()));
                let integral = gauss_kronrod_15_split(f, 0.0, t, ns.knots()).unwrap();
                let got = ns.column(col, t, Derivative::Integral);
                assert!((integral - got).abs() < 1e-10 * (1.0 + got.abs()));
            }
        }
    }
}
