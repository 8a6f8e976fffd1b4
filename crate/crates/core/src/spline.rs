//! Natural cubic spline bases of age.
//!
//! The default construction takes the cubic B-splines on the knot sequence
//! (boundary knots repeated four times), drops the first column, and
//! projects out the two directions that carry nonzero second derivatives at
//! the boundary knots (Householder QR of the constraint matrix). Outside the
//! boundary knots each column continues linearly. The intercept is not part
//! of the basis.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplineError {
    #[error("boundary knots must satisfy lo < hi, got ({0}, {1})")]
    Boundary(f64, f64),
    #[error("internal knot {0} is not strictly inside the boundary knots")]
    InternalOutside(f64),
    #[error("internal knots must be strictly ascending")]
    Unsorted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    /// Constrained B-spline construction.
    #[default]
    Bspline,
    /// Truncated power functions `x` and `d_k(x) - d_{K-1}(x)`; same span.
    TruncatedPower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalSplineDef {
    pub boundary_knots: (f64, f64),
    pub internal_knots: Vec<f64>,
}

impl NaturalSplineDef {
    pub fn new(boundary_knots: (f64, f64), internal_knots: Vec<f64>) -> Result<Self, SplineError> {
        let def = Self {
            boundary_knots,
            internal_knots,
        };
        def.validate()?;
        Ok(def)
    }

    /// Knots {0, 10, 60, 80} for log IFR.
    pub fn ifr_default() -> Self {
        Self::new((0.0, 80.0), vec![10.0, 60.0]).unwrap()
    }

    /// Knots {10, 60, 80} for logit seroprevalence.
    pub fn serology_default() -> Self {
        Self::new((10.0, 80.0), vec![60.0]).unwrap()
    }

    pub fn validate(&self) -> Result<(), SplineError> {
        let (lo, hi) = self.boundary_knots;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(SplineError::Boundary(lo, hi));
        }
        for &k in &self.internal_knots {
            if !(k > lo && k < hi) {
                return Err(SplineError::InternalOutside(k));
            }
        }
        if self.internal_knots.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(SplineError::Unsorted);
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.internal_knots.len() + 1
    }

    /// Boundary and internal knots in ascending order.
    pub fn all_knots(&self) -> Vec<f64> {
        let mut k = vec![self.boundary_knots.0];
        k.extend(&self.internal_knots);
        k.push(self.boundary_knots.1);
        k
    }
}

/// Values (or a derivative) of every order-`order` B-spline at `x`.
fn bspline_values(knots: &[f64], order: usize, x: f64, deriv: usize) -> Vec<f64> {
    let nb = knots.len() - order;
    if deriv >= order {
        return vec![0.0; nb];
    }
    if deriv > 0 {
        let lower = bspline_values(knots, order - 1, x, deriv - 1);
        let k = (order - 1) as f64;
        return (0..nb)
            .map(|i| {
                let d0 = knots[i + order - 1] - knots[i];
                let d1 = knots[i + order] - knots[i + 1];
                let a = if d0 > 0.0 { lower[i] / d0 } else { 0.0 };
                let b = if d1 > 0.0 { lower[i + 1] / d1 } else { 0.0 };
                k * (a - b)
            })
            .collect();
    }
    // Order one: indicator of the knot interval; the last nonempty interval
    // is closed on the right.
    let last = *knots.last().unwrap();
    let mut b: Vec<f64> = (0..knots.len() - 1)
        .map(|i| {
            let inside = if x >= last {
                knots[i] < knots[i + 1] && knots[i + 1] >= last
            } else {
                knots[i] <= x && x < knots[i + 1]
            };
            if inside {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    for j in 2..=order {
        for i in 0..knots.len() - j {
            let d0 = knots[i + j - 1] - knots[i];
            let d1 = knots[i + j] - knots[i + 1];
            let a = if d0 > 0.0 { (x - knots[i]) / d0 * b[i] } else { 0.0 };
            let c = if d1 > 0.0 { (knots[i + j] - x) / d1 * b[i + 1] } else { 0.0 };
            b[i] = a + c;
        }
    }
    b.truncate(nb);
    b
}

/// Householder reflectors in LINPACK layout for an `n x 2` matrix.
#[derive(Debug, Clone, PartialEq)]
struct Reflectors {
    // vectors[j] holds rows j..n of reflector j
    vectors: Vec<Vec<f64>>,
}

impl Reflectors {
    fn factor(mut cols: Vec<Vec<f64>>) -> Self {
        let n = cols[0].len();
        let p = cols.len();
        let mut vectors = Vec::with_capacity(p);
        for l in 0..p {
            let mut nrm = cols[l][l..].iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm == 0.0 {
                vectors.push(Vec::new());
                continue;
            }
            if cols[l][l] != 0.0 {
                nrm = nrm.copysign(cols[l][l]);
            }
            for v in &mut cols[l][l..] {
                *v /= nrm;
            }
            cols[l][l] += 1.0;
            let pivot = cols[l][l];
            for j in l + 1..p {
                let t = -(l..n).map(|r| cols[l][r] * cols[j][r]).sum::<f64>() / pivot;
                for r in l..n {
                    let add = t * cols[l][r];
                    cols[j][r] += add;
                }
            }
            vectors.push(cols[l][l..].to_vec());
        }
        Self { vectors }
    }

    /// Applies `Q^T` in place.
    fn apply_qt(&self, y: &mut [f64]) {
        for (j, v) in self.vectors.iter().enumerate() {
            if v.is_empty() {
                continue;
            }
            let t = -v.iter().zip(&y[j..]).map(|(a, b)| a * b).sum::<f64>() / v[0];
            for (yy, vv) in y[j..].iter_mut().zip(v) {
                *yy += t * vv;
            }
        }
    }
}

/// Evaluator for a natural spline basis.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalSplineBasis {
    def: NaturalSplineDef,
    kind: BasisKind,
    knots: Vec<f64>,
    reflectors: Reflectors,
    /// Subtracted from every evaluation; zero unless centered.
    shift: Vec<f64>,
}

impl NaturalSplineBasis {
    pub fn new(def: NaturalSplineDef) -> Result<Self, SplineError> {
        Self::with_kind(def, BasisKind::Bspline)
    }

    pub fn with_kind(def: NaturalSplineDef, kind: BasisKind) -> Result<Self, SplineError> {
        def.validate()?;
        let (lo, hi) = def.boundary_knots;
        let mut knots = vec![lo; 4];
        knots.extend(&def.internal_knots);
        knots.extend([hi; 4]);
        // Second derivatives at both boundaries, first B-spline dropped.
        let constraints: Vec<Vec<f64>> = [lo, hi]
            .iter()
            .map(|&x| bspline_values(&knots, 4, x, 2)[1..].to_vec())
            .collect();
        let reflectors = Reflectors::factor(constraints);
        let shift = vec![0.0; def.dim()];
        Ok(Self {
            def,
            kind,
            knots,
            reflectors,
            shift,
        })
    }

    /// Same span with every column shifted to average zero over `ages`, so
    /// the columns are orthogonal to the constant on that grid.
    pub fn centered_on(mut self, ages: &[f64]) -> Self {
        self.shift = vec![0.0; self.dim()];
        let mut mean = vec![0.0; self.dim()];
        for &a in ages {
            for (m, v) in mean.iter_mut().zip(self.eval(a)) {
                *m += v / ages.len() as f64;
            }
        }
        self.shift = mean;
        self
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn def(&self) -> &NaturalSplineDef {
        &self.def
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.def.dim()
    }

    pub fn eval(&self, age: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(age, &mut out);
        out
    }

    pub fn eval_into(&self, age: f64, out: &mut [f64]) {
        match self.kind {
            BasisKind::Bspline => self.eval_bspline(age, out),
            BasisKind::TruncatedPower => self.eval_truncated(age, out),
        }
        for (o, s) in out.iter_mut().zip(&self.shift) {
            *o -= s;
        }
    }

    fn eval_bspline(&self, age: f64, out: &mut [f64]) {
        let (lo, hi) = self.def.boundary_knots;
        let mut row: Vec<f64> = if age < lo || age > hi {
            let pivot = if age < lo { lo } else { hi };
            let v = bspline_values(&self.knots, 4, pivot, 0);
            let d = bspline_values(&self.knots, 4, pivot, 1);
            v.iter().zip(&d).map(|(v, d)| v + (age - pivot) * d).collect()
        } else {
            bspline_values(&self.knots, 4, age, 0)
        };
        row.remove(0);
        self.reflectors.apply_qt(&mut row);
        out.copy_from_slice(&row[2..]);
    }

    fn eval_truncated(&self, age: f64, out: &mut [f64]) {
        let k = self.def.all_knots();
        let m = k.len();
        let last = k[m - 1];
        let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
        let d = |j: usize| (cube(age - k[j]) - cube(age - last)) / (last - k[j]);
        out[0] = age;
        let tail = d(m - 2);
        for j in 0..m - 2 {
            out[j + 1] = d(j) - tail;
        }
    }
}
