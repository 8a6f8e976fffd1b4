//! Posterior summaries: curves with credible bands, IFR at a given age,
//! population IFR, the standardized age density, and the naive
//! Rogan-Gladen comparator.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::age_density::{AgeDensity, DensityError};
use crate::data::{AgeBin, DeathBinObs, SerologyBinObs, AGE_CEILING};
use crate::model::{ifr_curve, prevalence_curve, Curves, ModelError, ParameterLayout, ParameterVector};
use crate::quadrature::QuadratureMesh;
use crate::sampler::PosteriorDraws;

pub const MIN_DRAWS: usize = 100;
const Z95: f64 = 1.959_963_984_540_054;
const MIN_INFECTIONS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SummaryError {
    #[error("at least {MIN_DRAWS} draws required, got {0}")]
    InsufficientDraws(usize),
    #[error("expected infections underflow for draw {0}")]
    ZeroInfections(usize),
    #[error("sens + spec must exceed 1, got {0}")]
    DegenerateTest(f64),
    #[error("Rogan-Gladen prevalence is zero")]
    ZeroPrevalence,
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("{0}")]
    Io(String),
}

/// Natural parameters for every retained draw, chains in order.
pub fn parameter_draws(draws: &PosteriorDraws, layout: &ParameterLayout) -> Result<Vec<ParameterVector>, SummaryError> {
    draws
        .pooled()
        .map(|d| ParameterVector::from_flat(layout, d).map_err(SummaryError::from))
        .collect()
}

/// Empirical quantile with linear interpolation between order statistics.
/// `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub mean: f64,
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub lo80: f64,
    pub hi80: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Self {
        let mut s = values.to_vec();
        s.sort_by(|a, b| a.total_cmp(b));
        Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            median: quantile_sorted(&s, 0.5),
            lo95: quantile_sorted(&s, 0.025),
            hi95: quantile_sorted(&s, 0.975),
            lo80: quantile_sorted(&s, 0.1),
            hi80: quantile_sorted(&s, 0.9),
        }
    }
}

fn check_draws(params: &[ParameterVector]) -> Result<(), SummaryError> {
    if params.len() < MIN_DRAWS {
        Err(SummaryError::InsufficientDraws(params.len()))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CurveKind {
    #[serde(rename = "SERO")]
    Sero,
    #[serde(rename = "IFR")]
    Ifr,
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurveKind::Sero => "SERO",
            CurveKind::Ifr => "IFR",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub location_id: String,
    pub kind: CurveKind,
    pub ages: Vec<f64>,
    pub per_age: Vec<Quantiles>,
}

/// Per-age posterior summaries of a location's seroprevalence or IFR curve
/// on ages 0..=100.
pub fn curve_summary(
    params: &[ParameterVector],
    curves: &Curves,
    l: usize,
    location_id: &str,
    kind: CurveKind,
) -> Result<CurveSummary, SummaryError> {
    check_draws(params)?;
    let ages: Vec<f64> = (0..=AGE_CEILING).map(f64::from).collect();
    let mut values = vec![0.0; params.len()];
    let per_age = ages
        .iter()
        .map(|&a| {
            for (v, p) in values.iter_mut().zip(params) {
                *v = match kind {
                    CurveKind::Sero => prevalence_curve(curves, p, l, a),
                    CurveKind::Ifr => ifr_curve(curves, p, l, a),
                };
            }
            Quantiles::of(&values)
        })
        .collect();
    Ok(CurveSummary {
        location_id: location_id.to_string(),
        kind,
        ages,
        per_age,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchmarkFlag {
    #[serde(rename = "ABOVE")]
    Above,
    #[serde(rename = "BELOW")]
    Below,
    #[serde(rename = "OVERLAPS")]
    Overlaps,
}

impl fmt::Display for BenchmarkFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchmarkFlag::Above => "ABOVE",
            BenchmarkFlag::Below => "BELOW",
            BenchmarkFlag::Overlaps => "OVERLAPS",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeIfrSummary {
    pub location_id: String,
    pub age: f64,
    pub quantiles: Quantiles,
    pub benchmark_flag: Option<BenchmarkFlag>,
}

/// Posterior of `ifr(age)` for one location. The benchmark flag compares
/// the benchmark against the 95% interval.
pub fn ifr_at_age(
    params: &[ParameterVector],
    curves: &Curves,
    l: usize,
    location_id: &str,
    age: f64,
    benchmark: Option<f64>,
) -> Result<AgeIfrSummary, SummaryError> {
    check_draws(params)?;
    let values: Vec<f64> = params.iter().map(|p| ifr_curve(curves, p, l, age)).collect();
    let quantiles = Quantiles::of(&values);
    let benchmark_flag = benchmark.map(|b| {
        if quantiles.lo95 > b {
            BenchmarkFlag::Above
        } else if quantiles.hi95 < b {
            BenchmarkFlag::Below
        } else {
            BenchmarkFlag::Overlaps
        }
    });
    Ok(AgeIfrSummary {
        location_id: location_id.to_string(),
        age,
        quantiles,
        benchmark_flag,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DensityMode {
    #[serde(rename = "OWN_DISTRIBUTION")]
    OwnDistribution,
    #[serde(rename = "STANDARDIZED")]
    Standardized,
}

impl fmt::Display for DensityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DensityMode::OwnDistribution => "OWN_DISTRIBUTION",
            DensityMode::Standardized => "STANDARDIZED",
        })
    }
}

/// How ages are weighted when collapsing the IFR curve to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IfrWeighting {
    /// Expected deaths over expected infections.
    #[default]
    Infections,
    /// `int ifr f`.
    Population,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationIfrSummary {
    pub location_id: String,
    pub mode: DensityMode,
    pub mean: f64,
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// Population IFR of one draw under density `f` on `[0, 100]`.
pub fn population_ifr_draw(
    params: &ParameterVector,
    curves: &Curves,
    l: usize,
    f: &AgeDensity,
    mesh: &QuadratureMesh,
    weighting: IfrWeighting,
) -> Option<f64> {
    let (nodes, weights) = mesh.rule(0.0, f64::from(AGE_CEILING)).ok()?;
    let (mut num, mut den) = (0.0, 0.0);
    for (&a, &w) in nodes.iter().zip(&weights) {
        let fw = w * f.eval(a);
        let pi = match weighting {
            IfrWeighting::Infections => prevalence_curve(curves, params, l, a),
            IfrWeighting::Population => 1.0,
        };
        num += fw * pi * ifr_curve(curves, params, l, a);
        den += fw * pi;
    }
    (den >= MIN_INFECTIONS).then(|| num / den)
}

#[allow(clippy::too_many_arguments)]
pub fn population_ifr(
    params: &[ParameterVector],
    curves: &Curves,
    l: usize,
    location_id: &str,
    f: &AgeDensity,
    mesh: &QuadratureMesh,
    mode: DensityMode,
    weighting: IfrWeighting,
) -> Result<PopulationIfrSummary, SummaryError> {
    check_draws(params)?;
    let values = params
        .iter()
        .enumerate()
        .map(|(i, p)| population_ifr_draw(p, curves, l, f, mesh, weighting).ok_or(SummaryError::ZeroInfections(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let q = Quantiles::of(&values);
    Ok(PopulationIfrSummary {
        location_id: location_id.to_string(),
        mode,
        mean: q.mean,
        median: q.median,
        lo95: q.lo95,
        hi95: q.hi95,
    })
}

/// Pointwise median of the densities at each integer age, renormalized.
pub fn standardized_density(densities: &[AgeDensity]) -> Result<AgeDensity, SummaryError> {
    if densities.is_empty() {
        return Err(SummaryError::InvalidInput("no densities to standardize".into()));
    }
    let n = AGE_CEILING as usize + 1;
    let mut column = Vec::with_capacity(densities.len());
    let grid = (0..n)
        .map(|a| {
            column.clear();
            column.extend(densities.iter().map(|d| d.values()[a]));
            column.sort_by(|x, y| x.total_cmp(y));
            quantile_sorted(&column, 0.5)
        })
        .collect();
    Ok(AgeDensity::from_grid(grid)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoganGladen {
    pub estimate: f64,
    pub lo95: f64,
    pub hi95: f64,
}

fn rg_transform(p: f64, sens: f64, spec: f64) -> f64 {
    (p + spec - 1.0) / (sens + spec - 1.0)
}

/// Rogan-Gladen prevalence for a positivity rate, clamped to `[0, 1]`.
pub fn rogan_gladen_rate(positivity: f64, sens: f64, spec: f64) -> Result<f64, SummaryError> {
    if !(sens + spec > 1.0) {
        return Err(SummaryError::DegenerateTest(sens + spec));
    }
    Ok(rg_transform(positivity, sens, spec).clamp(0.0, 1.0))
}

/// Rogan-Gladen estimate with a Wald interval on the raw positivity pushed
/// through the same map. Sensitivity and specificity are treated as known.
pub fn rogan_gladen(obs: &SerologyBinObs, sens: f64, spec: f64) -> Result<RoganGladen, SummaryError> {
    if !(sens + spec > 1.0) {
        return Err(SummaryError::DegenerateTest(sens + spec));
    }
    if obs.n_tested == 0 {
        return Err(SummaryError::InvalidInput(format!("bin {} has no tests", obs.bin)));
    }
    let n = obs.n_tested as f64;
    let p = obs.n_positive as f64 / n;
    let half = Z95 * (p * (1.0 - p) / n).sqrt();
    let map = |x: f64| rg_transform(x, sens, spec).clamp(0.0, 1.0);
    Ok(RoganGladen {
        estimate: map(p),
        lo95: map(p - half),
        hi95: map(p + half),
    })
}

/// Crude IFR of a death bin: death rate over Rogan-Gladen prevalence.
pub fn naive_ifr(death: &DeathBinObs, population: f64, rg: f64) -> Result<f64, SummaryError> {
    if !(population > 0.0) {
        return Err(SummaryError::InvalidInput(format!("population {population} must be positive")));
    }
    if rg == 0.0 {
        return Err(SummaryError::ZeroPrevalence);
    }
    if !(rg > 0.0) {
        return Err(SummaryError::InvalidInput(format!("prevalence {rg} must be positive")));
    }
    Ok(death.deaths as f64 / population / rg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoganGladenRow {
    pub location_id: String,
    pub bin: AgeBin,
    pub estimate: RoganGladen,
}

fn write(path: &Path, contents: String) -> Result<(), SummaryError> {
    std::fs::write(path, contents).map_err(|e| SummaryError::Io(format!("{}: {e}", path.display())))
}

pub fn write_curves_csv(curves: &[CurveSummary], path: &Path) -> Result<(), SummaryError> {
    let mut out = String::from("location_id,kind,age,mean,median,lo95,hi95,lo80,hi80\n");
    for c in curves {
        for (a, q) in c.ages.iter().zip(&c.per_age) {
            out.push_str(&format!(
                "{},{},{a},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                c.location_id, c.kind, q.mean, q.median, q.lo95, q.hi95, q.lo80, q.hi80
            ));
        }
    }
    write(path, out)
}

pub fn write_population_ifr_csv(rows: &[PopulationIfrSummary], path: &Path) -> Result<(), SummaryError> {
    let mut out = String::from("location_id,mode,mean,median,lo95,hi95\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?}\n",
            r.location_id, r.mode, r.mean, r.median, r.lo95, r.hi95
        ));
    }
    write(path, out)
}

pub fn write_age_ifr_csv(rows: &[AgeIfrSummary], path: &Path) -> Result<(), SummaryError> {
    let mut out = String::from("location_id,median,lo80,hi80,lo95,hi95,benchmark_flag\n");
    for r in rows {
        let q = &r.quantiles;
        let flag = r.benchmark_flag.map_or_else(|| "NA".to_string(), |f| f.to_string());
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{flag}\n",
            r.location_id, q.median, q.lo80, q.hi80, q.lo95, q.hi95
        ));
    }
    write(path, out)
}

/// Bin labels use the input-file convention; an open bin has an empty `age_hi`.
pub fn write_rogan_gladen_csv(rows: &[RoganGladenRow], path: &Path) -> Result<(), SummaryError> {
    let mut out = String::from("location_id,age_lo,age_hi,estimate,lo95,hi95\n");
    for r in rows {
        let (lo, hi) = r.bin.labels();
        let hi = hi.map_or_else(String::new, |h| h.to_string());
        out.push_str(&format!(
            "{},{lo},{hi},{:?},{:?},{:?}\n",
            r.location_id, r.estimate.estimate, r.estimate.lo95, r.estimate.hi95
        ));
    }
    write(path, out)
}
