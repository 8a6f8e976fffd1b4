//! Continuous population age densities built from binned counts.
//!
//! The pipeline per location:
//! 1. expand the binned proportions into a step density,
//! 2. reshape every local bin wider than five years with the national step
//!    density so that the bin keeps its local mass,
//! 3. sample the step at ages 0..=85, add an anchor of zero at age 100 and
//!    smooth with local linear regression (tricube weights),
//! 4. lift the predictions if any is negative and renormalize to unit
//!    trapezoidal integral on the one-year grid.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AgeBin, LocationRecord, StudyDataset, AGE_CEILING};
use crate::quadrature::{QuadratureError, QuadratureMesh};

/// Local bins wider than this are reshaped by the national distribution.
pub const REFINE_WIDTH: f64 = 5.0;
/// Last age sampled from the step density before smoothing.
pub const SMOOTH_SAMPLE_MAX_AGE: u32 = 85;
pub const DEFAULT_LOESS_SPAN: f64 = 0.75;

const MASS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DensityError {
    #[error("bin proportions sum to {0}, expected 1")]
    NonNormalized(f64),
    #[error("invalid step density: {0}")]
    InvalidStep(String),
    #[error("national density has zero mass over local bin {0}")]
    ZeroNationalMass(AgeBin),
    #[error("local regression is degenerate: {0}")]
    DegenerateFit(String),
    #[error("invalid density grid: {0}")]
    InvalidGrid(String),
    #[error("empty bin {0}")]
    EmptyBin(AgeBin),
    #[error("location `{0}` has no national population table")]
    MissingNational(String),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// Piecewise-constant density with pieces `[breakpoints[i], breakpoints[i+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDensity {
    breakpoints: Vec<f64>,
    heights: Vec<f64>,
}

impl StepDensity {
    pub fn new(breakpoints: Vec<f64>, heights: Vec<f64>) -> Result<Self, DensityError> {
        if breakpoints.len() != heights.len() + 1 || heights.is_empty() {
            return Err(DensityError::InvalidStep(format!(
                "{} breakpoints for {} pieces",
                breakpoints.len(),
                heights.len()
            )));
        }
        if breakpoints.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(DensityError::InvalidStep("breakpoints must ascend".into()));
        }
        if heights.iter().any(|h| !(h.is_finite() && *h >= 0.0)) {
            return Err(DensityError::InvalidStep("heights must be nonnegative".into()));
        }
        let step = Self { breakpoints, heights };
        let mass = step.total_mass();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(DensityError::NonNormalized(mass));
        }
        Ok(step)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    /// Height at `age`; the last piece is closed on the right, zero outside.
    pub fn eval(&self, age: f64) -> f64 {
        let last = *self.breakpoints.last().unwrap();
        if age < self.breakpoints[0] || age > last {
            return 0.0;
        }
        if age == last {
            return *self.heights.last().unwrap();
        }
        let i = self.breakpoints.partition_point(|&b| b <= age) - 1;
        self.heights[i]
    }

    /// Exact integral over `[lo, hi]`.
    pub fn mass(&self, lo: f64, hi: f64) -> f64 {
        self.heights
            .iter()
            .zip(self.breakpoints.windows(2))
            .map(|(h, p)| {
                let w = (p[1].min(hi) - p[0].max(lo)).max(0.0);
                h * w
            })
            .sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass(self.breakpoints[0], *self.breakpoints.last().unwrap())
    }
}

fn check_proportions(bins: &[(AgeBin, f64)]) -> Result<Vec<(AgeBin, f64)>, DensityError> {
    if bins.is_empty() {
        return Err(DensityError::InvalidStep("no bins".into()));
    }
    let mut sorted = bins.to_vec();
    sorted.sort_by_key(|b| b.0);
    for pair in sorted.windows(2) {
        if pair[0].0.overlaps(&pair[1].0) {
            return Err(DensityError::InvalidStep(format!(
                "bins {} and {} overlap",
                pair[0].0, pair[1].0
            )));
        }
    }
    if sorted.iter().any(|b| !(b.1.is_finite() && b.1 >= 0.0)) {
        return Err(DensityError::InvalidStep("proportions must be nonnegative".into()));
    }
    let total: f64 = sorted.iter().map(|b| b.1).sum();
    if (total - 1.0).abs() > MASS_TOL {
        return Err(DensityError::NonNormalized(total));
    }
    Ok(sorted)
}

/// Pushes a piece, inserting a zero-height gap piece when needed.
fn push_piece(bp: &mut Vec<f64>, heights: &mut Vec<f64>, lo: f64, hi: f64, h: f64) {
    match bp.last() {
        None => bp.push(lo),
        Some(&end) if end < lo => {
            heights.push(0.0);
            bp.push(lo);
        }
        _ => {}
    }
    heights.push(h);
    bp.push(hi);
}

/// Height `proportion / width` on each bin.
pub fn expand_step(bins: &[(AgeBin, f64)]) -> Result<StepDensity, DensityError> {
    let sorted = check_proportions(bins)?;
    let mut bp = Vec::new();
    let mut heights = Vec::new();
    for (bin, p) in sorted {
        push_piece(&mut bp, &mut heights, bin.start(), bin.end(), p / bin.width());
    }
    StepDensity::new(bp, heights)
}

/// Reshapes each local bin wider than [`REFINE_WIDTH`] to follow the
/// national step density, scaled so that the national values at the bin's
/// integer ages sum to the local proportion. Narrower bins stay flat.
pub fn refine_with_national(
    local_bins: &[(AgeBin, f64)],
    national_step: &StepDensity,
) -> Result<StepDensity, DensityError> {
    let sorted = check_proportions(local_bins)?;
    let nat_bp = national_step.breakpoints();
    let mut bp = Vec::new();
    let mut heights = Vec::new();
    for (bin, p) in sorted {
        if bin.width() <= REFINE_WIDTH {
            push_piece(&mut bp, &mut heights, bin.start(), bin.end(), p / bin.width());
            continue;
        }
        let denom: f64 = bin.integer_ages().map(|b| national_step.eval(f64::from(b))).sum();
        if denom <= 0.0 {
            if p > 0.0 {
                return Err(DensityError::ZeroNationalMass(bin));
            }
            push_piece(&mut bp, &mut heights, bin.start(), bin.end(), 0.0);
            continue;
        }
        let mut cuts = vec![bin.start()];
        cuts.extend(nat_bp.iter().copied().filter(|&b| b > bin.start() && b < bin.end()));
        cuts.push(bin.end());
        for piece in cuts.windows(2) {
            let h = p * national_step.eval(piece[0]) / denom;
            push_piece(&mut bp, &mut heights, piece[0], piece[1], h);
        }
    }
    StepDensity::new(bp, heights)
}

/// Local linear regression with tricube weights over the `floor(span * n)`
/// nearest points, evaluated at each of `at`.
pub fn loess(xs: &[f64], ys: &[f64], span: f64, at: &[f64]) -> Result<Vec<f64>, DensityError> {
    if xs.len() != ys.len() {
        return Err(DensityError::DegenerateFit("x and y lengths differ".into()));
    }
    if !(span.is_finite() && span > 0.0) {
        return Err(DensityError::DegenerateFit(format!("span {span} must be positive")));
    }
    let mut distinct = xs.to_vec();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(DensityError::DegenerateFit(format!(
            "{} distinct sample points, need at least 4",
            distinct.len()
        )));
    }
    let n = xs.len();
    let q = ((span * n as f64).floor() as usize).clamp(3, n);
    let mut dist = vec![0.0; n];
    at.iter()
        .map(|&x0| {
            for (d, &x) in dist.iter_mut().zip(xs) {
                *d = (x - x0).abs();
            }
            let mut sorted = dist.clone();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let mut h = sorted[q - 1];
            if span > 1.0 {
                h *= span;
            }
            if h <= 0.0 {
                return Err(DensityError::DegenerateFit(format!("zero bandwidth at {x0}")));
            }
            let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ((&x, &y), &d) in xs.iter().zip(ys).zip(&dist) {
                let u = d / h;
                if u >= 1.0 {
                    continue;
                }
                let w = (1.0 - u * u * u).powi(3);
                let dx = x - x0;
                s0 += w;
                s1 += w * dx;
                s2 += w * dx * dx;
                t0 += w * y;
                t1 += w * dx * y;
            }
            let det = s0 * s2 - s1 * s1;
            if !(s0 > 0.0) || det <= 1e-12 * s0 * s2 {
                return Err(DensityError::DegenerateFit(format!(
                    "singular local design at {x0}"
                )));
            }
            Ok((s2 * t0 - s1 * t1) / det)
        })
        .collect()
}

/// Normalized density on the integer grid 0..=100, linear in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeDensity {
    values: Vec<f64>,
}

impl AgeDensity {
    /// Grid values at ages 0..=100, rescaled to unit trapezoidal integral.
    pub fn from_grid(values: Vec<f64>) -> Result<Self, DensityError> {
        let expected = AGE_CEILING as usize + 1;
        if values.len() != expected {
            return Err(DensityError::InvalidGrid(format!(
                "{} grid values, expected {expected}",
                values.len()
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DensityError::InvalidGrid("values must be finite and nonnegative".into()));
        }
        let total = grid_integral(&values);
        if !(total > 0.0) {
            return Err(DensityError::InvalidGrid("zero total mass".into()));
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / total).collect(),
        })
    }

    /// Uniform density on `[0, 100]`.
    pub fn uniform() -> Self {
        Self::from_grid(vec![1.0; AGE_CEILING as usize + 1]).unwrap()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, age: f64) -> f64 {
        let top = f64::from(AGE_CEILING);
        if !(0.0..=top).contains(&age) {
            return 0.0;
        }
        let i = (age.floor() as usize).min(AGE_CEILING as usize - 1);
        let t = age - i as f64;
        self.values[i] * (1.0 - t) + self.values[i + 1] * t
    }

    /// Trapezoidal integral over the integer grid.
    pub fn integral(&self) -> f64 {
        grid_integral(&self.values)
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "age,density")?;
        for (age, v) in self.values.iter().enumerate() {
            writeln!(out, "{age},{v}")?;
        }
        out.flush()
    }
}

fn grid_integral(values: &[f64]) -> f64 {
    values.windows(2).map(|p| 0.5 * (p[0] + p[1])).sum()
}

/// LOESS smoothing of a step density into an [`AgeDensity`].
pub fn smooth_to_density(step: &StepDensity, span: f64) -> Result<AgeDensity, DensityError> {
    let mut xs: Vec<f64> = (0..=SMOOTH_SAMPLE_MAX_AGE).map(f64::from).collect();
    let mut ys: Vec<f64> = xs.iter().map(|&a| step.eval(a)).collect();
    xs.push(f64::from(AGE_CEILING));
    ys.push(0.0);
    let grid: Vec<f64> = (0..=AGE_CEILING).map(f64::from).collect();
    let mut pred = loess(&xs, &ys, span, &grid)?;
    // The density is pinned to the anchor at the ceiling.
    *pred.last_mut().unwrap() = 0.0;
    let min = pred.iter().copied().fold(f64::INFINITY, f64::min);
    if min < 0.0 {
        for v in &mut pred {
            *v -= min;
        }
    }
    AgeDensity::from_grid(pred)
}

/// Trapezoidal mass of `f` over `bin` on the quadrature mesh.
pub fn bin_mass(f: &AgeDensity, bin: &AgeBin, mesh: &QuadratureMesh) -> Result<f64, DensityError> {
    if bin.width() <= 0.0 {
        return Err(DensityError::EmptyBin(*bin));
    }
    Ok(mesh.integrate(bin.start(), bin.end(), |a| f.eval(a))?)
}

/// Real-valued population in `bin`: total population times bin mass.
pub fn population_in_bin(
    loc: &LocationRecord,
    f: &AgeDensity,
    bin: &AgeBin,
    mesh: &QuadratureMesh,
) -> Result<f64, DensityError> {
    Ok(loc.total_population * bin_mass(f, bin, mesh)?)
}

/// Step density for a location, refined by its national table where bins
/// are wider than [`REFINE_WIDTH`].
pub fn location_step(
    loc: &LocationRecord,
    national_bins: &[(AgeBin, f64)],
) -> Result<StepDensity, DensityError> {
    let local = loc.population_proportions();
    if local.iter().all(|b| b.0.width() <= REFINE_WIDTH) {
        return expand_step(&local);
    }
    let total: f64 = national_bins.iter().map(|b| b.1).sum();
    let national: Vec<_> = national_bins.iter().map(|&(b, c)| (b, c / total)).collect();
    let national_step = expand_step(&national)?;
    refine_with_national(&local, &national_step)
}

/// Full pipeline for every location, in dataset order.
pub fn dataset_densities(ds: &StudyDataset, span: f64) -> Result<Vec<AgeDensity>, DensityError> {
    ds.locations
        .iter()
        .map(|loc| {
            let national = ds
                .national_populations
                .get(&loc.country_id)
                .ok_or_else(|| DensityError::MissingNational(loc.location_id.clone()))?;
            let step = location_step(loc, national)?;
            smooth_to_density(&step, span)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bin(lo: u32, hi: u32) -> AgeBin {
        AgeBin::span(lo, hi).unwrap()
    }

    #[test]
    fn expand_step_examples() {
        let s = expand_step(&[(bin(0, 10), 1.0)]).unwrap();
        assert_eq!(s.heights(), &[0.1]);
        let s = expand_step(&[(bin(0, 50), 0.5), (bin(50, 100), 0.5)]).unwrap();
        assert_eq!(s.heights(), &[0.01, 0.01]);
        let s = expand_step(&[(bin(20, 100), 0.6), (bin(0, 20), 0.4)]).unwrap();
        assert!((s.heights()[0] - 0.02).abs() < 1e-15);
        assert!((s.heights()[1] - 0.0075).abs() < 1e-15);
        assert_eq!(
            expand_step(&[(bin(0, 10), 0.7)]),
            Err(DensityError::NonNormalized(0.7))
        );
    }

    #[test]
    fn gaps_become_zero_pieces() {
        let s = expand_step(&[(bin(0, 10), 0.5), (bin(20, 30), 0.5)]).unwrap();
        assert_eq!(s.breakpoints(), &[0.0, 10.0, 20.0, 30.0]);
        assert_eq!(s.eval(15.0), 0.0);
        assert_eq!(s.eval(30.0), 0.05);
        assert_eq!(s.eval(31.0), 0.0);
    }

    #[test]
    fn refine_with_uniform_national_is_expand() {
        let national = expand_step(&[(AgeBin::open(0).unwrap(), 1.0)]).unwrap();
        let local = [(bin(0, 20), 0.4), (AgeBin::open(20).unwrap(), 0.6)];
        let refined = refine_with_national(&local, &national).unwrap();
        let plain = expand_step(&local).unwrap();
        for a in 0..100 {
            let a = f64::from(a) + 0.5;
            assert!((refined.eval(a) - plain.eval(a)).abs() < 1e-15);
        }
    }

    #[test]
    fn refine_with_matching_national_is_identity() {
        let bins = [(bin(0, 15), 0.3), (bin(15, 60), 0.5), (AgeBin::open(60).unwrap(), 0.2)];
        let national = expand_step(&bins).unwrap();
        let refined = refine_with_national(&bins, &national).unwrap();
        for a in 0..100 {
            let a = f64::from(a) + 0.25;
            assert!((refined.eval(a) - national.eval(a)).abs() < 1e-15);
        }
    }

    #[test]
    fn refine_zero_national_mass() {
        let national = expand_step(&[(bin(0, 50), 1.0), (AgeBin::open(50).unwrap(), 0.0)]).unwrap();
        let local = [(bin(0, 50), 0.5), (AgeBin::open(50).unwrap(), 0.5)];
        assert_eq!(
            refine_with_national(&local, &national),
            Err(DensityError::ZeroNationalMass(AgeBin::open(50).unwrap()))
        );
    }

    #[test]
    fn loess_reproduces_lines() {
        let xs: Vec<f64> = (0..30).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 0.5 * x).collect();
        let fit = loess(&xs, &ys, 0.3, &[0.0, 7.5, 29.0]).unwrap();
        for (f, x) in fit.iter().zip([0.0, 7.5, 29.0]) {
            assert!((f - (2.0 - 0.5 * x)).abs() < 1e-10);
        }
        assert!(matches!(
            loess(&[1.0, 1.0, 2.0, 3.0], &[0.0; 4], 0.75, &[1.0]),
            Err(DensityError::DegenerateFit(_))
        ));
    }

    #[test]
    fn smoothing_normalizes() {
        let step = expand_step(&[(bin(0, 20), 0.4), (AgeBin::open(20).unwrap(), 0.6)]).unwrap();
        let f = smooth_to_density(&step, DEFAULT_LOESS_SPAN).unwrap();
        assert!((f.integral() - 1.0).abs() < 1e-12);
        assert!(f.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn bin_mass_of_linear_grid() {
        let grid: Vec<f64> = (0..=100).map(|a| f64::from(a) / 5050.0).collect();
        let f = AgeDensity::from_grid(grid.clone()).unwrap();
        let scale = 1.0 / grid.windows(2).map(|p| 0.5 * (p[0] + p[1])).sum::<f64>();
        // Integral of a piecewise-linear interpolant of a/5050 over [0,10].
        let exact = scale * 50.0 / 5050.0;
        let m = bin_mass(&f, &bin(0, 10), &QuadratureMesh::default()).unwrap();
        assert!((m - exact).abs() < 1e-9);
    }
}
