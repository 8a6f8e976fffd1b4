use seroifr_core::spline::{BasisKind, NaturalSplineBasis, NaturalSplineDef};

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Natural cubic interpolant of `y` at `knots`, built from one cubic per
/// interval (4 unknowns each) with interpolation, C1, C2 and natural end
/// conditions, extended linearly outside the knots.
struct Interpolant {
    knots: Vec<f64>,
    coef: Vec<[f64; 4]>,
}

impl Interpolant {
    fn new(knots: &[f64], y: &[f64]) -> Self {
        let m = knots.len() - 1;
        let n = 4 * m;
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        let mut row = 0;
        let powers = |x: f64, d: usize| -> [f64; 4] {
            match d {
                0 => [1.0, x, x * x, x * x * x],
                1 => [0.0, 1.0, 2.0 * x, 3.0 * x * x],
                _ => [0.0, 0.0, 2.0, 6.0 * x],
            }
        };
        for i in 0..m {
            for (x, v) in [(knots[i], y[i]), (knots[i + 1], y[i + 1])] {
                a[row][4 * i..4 * i + 4].copy_from_slice(&powers(x, 0));
                b[row] = v;
                row += 1;
            }
        }
        for i in 0..m - 1 {
            for d in 1..=2 {
                let p = powers(knots[i + 1], d);
                for k in 0..4 {
                    a[row][4 * i + k] = p[k];
                    a[row][4 * (i + 1) + k] = -p[k];
                }
                row += 1;
            }
        }
        a[row][0..4].copy_from_slice(&powers(knots[0], 2));
        row += 1;
        a[row][4 * (m - 1)..4 * m].copy_from_slice(&powers(knots[m], 2));
        let x = solve(a, b);
        Self {
            knots: knots.to_vec(),
            coef: (0..m).map(|i| [x[4 * i], x[4 * i + 1], x[4 * i + 2], x[4 * i + 3]]).collect(),
        }
    }

    fn piece(&self, i: usize, x: f64, d: usize) -> f64 {
        let c = self.coef[i];
        match d {
            0 => c[0] + c[1] * x + c[2] * x * x + c[3] * x * x * x,
            _ => c[1] + 2.0 * c[2] * x + 3.0 * c[3] * x * x,
        }
    }

    fn eval(&self, x: f64) -> f64 {
        let m = self.coef.len();
        let (lo, hi) = (self.knots[0], self.knots[m]);
        if x < lo {
            return self.piece(0, lo, 0) + (x - lo) * self.piece(0, lo, 1);
        }
        if x > hi {
            return self.piece(m - 1, hi, 0) + (x - hi) * self.piece(m - 1, hi, 1);
        }
        let i = (0..m).find(|&i| x <= self.knots[i + 1]).unwrap_or(m - 1);
        self.piece(i, x, 0)
    }
}

fn defs() -> Vec<NaturalSplineDef> {
    vec![
        NaturalSplineDef::ifr_default(),
        NaturalSplineDef::serology_default(),
        NaturalSplineDef::new((5.0, 90.0), vec![20.0, 35.0, 50.0, 70.0]).unwrap(),
    ]
}

fn kinds() -> [BasisKind; 2] {
    [BasisKind::Bspline, BasisKind::TruncatedPower]
}

#[test]
fn dimensions_follow_knot_counts() {
    let ifr = NaturalSplineBasis::new(NaturalSplineDef::ifr_default()).unwrap();
    let sero = NaturalSplineBasis::new(NaturalSplineDef::serology_default()).unwrap();
    assert_eq!(ifr.dim(), 3);
    assert_eq!(sero.dim(), 2);
    assert_eq!(ifr.eval(42.0).len(), 3);
}

#[test]
fn basis_matches_direct_interpolation_oracle() {
    let probes: Vec<f64> = (0..25).map(|i| 4.0 * i as f64 + 0.37).collect();
    for def in defs() {
        let mut knots = vec![def.boundary_knots.0];
        knots.extend(&def.internal_knots);
        knots.push(def.boundary_knots.1);
        let k = knots.len();
        let cardinals: Vec<Interpolant> = (0..k)
            .map(|j| {
                let y: Vec<f64> = (0..k).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
                Interpolant::new(&knots, &y)
            })
            .collect();
        for kind in kinds() {
            let basis = NaturalSplineBasis::with_kind(def.clone(), kind).unwrap();
            // A natural spline is fixed by its knot values, so [1, B] at any
            // age is the cardinal combination of its knot values.
            let at_knots: Vec<Vec<f64>> = knots.iter().map(|&x| basis.eval(x)).collect();
            for &a in &probes {
                let got = basis.eval(a);
                let c: Vec<f64> = cardinals.iter().map(|f| f.eval(a)).collect();
                let one: f64 = c.iter().sum();
                assert!((one - 1.0).abs() < 1e-8, "partition of unity at {a}");
                for j in 0..basis.dim() {
                    let want: f64 = c.iter().zip(&at_knots).map(|(w, row)| w * row[j]).sum();
                    let scale = 1.0 + at_knots.iter().map(|r| r[j].abs()).fold(0.0, f64::max);
                    assert!((got[j] - want).abs() < 1e-8 * scale, "{kind:?} {def:?} col {j} age {a}: {} vs {want}", got[j]);
                }
            }
        }
    }
}

#[test]
fn columns_are_twice_continuously_differentiable() {
    // Central second differences are exact on a cubic piece, so linear
    // extrapolation of two of them gives f'' at the knot from either side.
    let h = 1e-3;
    for def in defs() {
        for kind in kinds() {
            let basis = NaturalSplineBasis::with_kind(def.clone(), kind).unwrap();
            for &t in &def.internal_knots {
                let v: Vec<Vec<f64>> = (-3..=3).map(|i| basis.eval(t + h * i as f64)).collect();
                let dd = |c: usize, j: usize| (v[c + 1][j] - 2.0 * v[c][j] + v[c - 1][j]) / (h * h);
                for j in 0..basis.dim() {
                    let left = 2.0 * dd(2, j) - dd(1, j);
                    let right = 2.0 * dd(4, j) - dd(5, j);
                    let slope_l = (v[3][j] - v[2][j]) / h + 0.5 * h * dd(2, j);
                    let slope_r = (v[4][j] - v[3][j]) / h - 0.5 * h * dd(4, j);
                    let scale = 1.0 + left.abs().max(right.abs());
                    assert!((left - right).abs() < 1e-4 * scale, "{kind:?} col {j} f'' {left} vs {right} at {t}");
                    let scale = 1.0 + slope_l.abs().max(slope_r.abs());
                    assert!((slope_l - slope_r).abs() < 1e-4 * scale, "{kind:?} col {j} f' {slope_l} vs {slope_r} at {t}");
                }
            }
        }
    }
}

#[test]
fn tails_are_linear() {
    for def in defs() {
        for kind in kinds() {
            let basis = NaturalSplineBasis::with_kind(def.clone(), kind).unwrap();
            let (lo, hi) = def.boundary_knots;
            for ages in [[hi + 1.0, hi + 4.0, hi + 7.0, hi + 10.0], [lo - 4.0, lo - 3.0, lo - 2.0, lo - 1.0]] {
                if ages[0] < 0.0 || ages[3] > 100.0 {
                    continue;
                }
                let v: Vec<Vec<f64>> = ages.iter().map(|&a| basis.eval(a)).collect();
                for j in 0..basis.dim() {
                    let third = v[3][j] - 3.0 * v[2][j] + 3.0 * v[1][j] - v[0][j];
                    let scale = 1.0 + v.iter().map(|r| r[j].abs()).fold(0.0, f64::max);
                    assert!(third.abs() < 1e-8 * scale, "{kind:?} col {j}: {third}");
                }
            }
        }
    }
}
