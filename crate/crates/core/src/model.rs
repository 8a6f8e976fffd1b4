//! Joint serology and IFR model: parameter layout, transforms, log posterior
//! with its exact gradient, and forward simulation.
//!
//! Seroprevalence is `logit pi(a) = gamma_0 + z(a)' gamma`, test positivity
//! is `pi sens + (1 - pi)(1 - spec)`, and `log ifr(a) = beta_0 + x(a)' beta`.
//! Binned observations see population-weighted bin averages of positivity
//! and of `pi(a) ifr(a)`, both computed by trapezoid on the quadrature mesh.
//!
//! Parameters live on three scales:
//! - natural values ([`ParameterVector`]): location coefficients as they
//!   enter the curves;
//! - coordinates: the natural values, except that in the non-centered
//!   parameterization the location IFR coefficients and country effects are
//!   stored as standardized offsets;
//! - unconstrained: coordinates with `log` applied to scales and `logit` to
//!   sensitivities and specificities, restricted to the free (not fixed)
//!   coordinates. This is the sampler's space.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::age_density::{AgeDensity, DensityError};
use crate::data::{AgeBin, StudyDataset, AGE_CEILING};
use crate::quadrature::{QuadratureError, QuadratureMesh, DEFAULT_STEP};
use crate::sampler::Target;
use crate::spline::{BasisKind, NaturalSplineBasis, NaturalSplineDef, SplineError};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MIN_BIN_MASS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model spec field `{field}`: {message}")]
    InvalidSpec { field: String, message: String },
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("bin {bin} of location `{location}` has population mass below {MIN_BIN_MASS}")]
    ZeroMassBin { location: String, bin: AgeBin },
    #[error("non-finite log density in {0}")]
    NonFinite(String),
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{name}`: {message}")]
    InvalidParameter { name: String, message: String },
    #[error("{expected} age densities required, got {got}")]
    DensityCount { expected: usize, got: usize },
}

// ---------------------------------------------------------------------------
// Priors

pub fn normal_lpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
}

/// Half-normal with scale `scale` (sd of the underlying normal), `x > 0`.
pub fn half_normal_lpdf(x: f64, scale: f64) -> f64 {
    std::f64::consts::LN_2 + normal_lpdf(x, 0.0, scale)
}

pub fn beta_lpdf(x: f64, a: f64, b: f64) -> f64 {
    let norm = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b);
    norm + xlogy(a - 1.0, x) + xlogy(b - 1.0, 1.0 - x)
}

/// `a * ln(b)` with `0 * ln(0) = 0`.
fn xlogy(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * b.ln()
    }
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

// Log pmfs are split into a data-only constant (the value at the saturated
// fit) and a deviance part that is small near a good fit. This avoids
// cancelling large terms like `d ln(mu)` and `ln(d!)` on every evaluation.

/// Binomial log pmf at the saturated fit `p = r / n`.
fn binomial_saturated(n: u64, r: u64) -> f64 {
    let (nf, rf) = (n as f64, r as f64);
    ln_choose(n, r) + xlogy(rf, rf / nf) + xlogy(nf - rf, (nf - rf) / nf)
}

/// `r ln p + (n - r) ln q` minus its value at `p = r / n`.
fn binomial_deviance(n: f64, r: f64, p: f64, q: f64) -> f64 {
    let mut v = 0.0;
    if r > 0.0 {
        v += r * (p * n / r).ln();
    }
    if n - r > 0.0 {
        v += (n - r) * (q * n / (n - r)).ln();
    }
    v
}

/// Poisson log pmf at the saturated fit `mu = d`.
fn poisson_saturated(d: u64) -> f64 {
    let df = d as f64;
    xlogy(df, df) - df - ln_gamma(df + 1.0)
}

/// `d ln(mu) - mu` minus its value at `mu = d`.
fn poisson_deviance(d: f64, mu: f64) -> f64 {
    let log_ratio = if d > 0.0 { d * (mu / d).ln() } else { 0.0 };
    log_ratio - (mu - d)
}

/// `(inv_logit(x), inv_logit(-x))` from a single exponential.
fn logistic_pair(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let big = 1.0 / (1.0 + e);
    let small = e * big;
    if x >= 0.0 {
        (big, small)
    } else {
        (small, big)
    }
}

pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + e^x)`
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Prior on a single regression coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefPrior {
    Normal { mean: f64, sd: f64 },
    /// Improper constant density.
    Flat,
    /// Uniform on `inv_logit(x)`, i.e. a standard logistic density on `x`.
    FlatOnProbability,
    /// Improper uniform on `exp(x)`.
    FlatOnRate,
}

impl CoefPrior {
    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            CoefPrior::Normal { mean, sd } => normal_lpdf(x, mean, sd),
            CoefPrior::Flat => 0.0,
            CoefPrior::FlatOnProbability => -softplus(-x) - softplus(x),
            CoefPrior::FlatOnRate => x,
        }
    }

    pub fn gradient(&self, x: f64) -> f64 {
        match *self {
            CoefPrior::Normal { mean, sd } => -(x - mean) / (sd * sd),
            CoefPrior::Flat => 0.0,
            CoefPrior::FlatOnProbability => 1.0 - 2.0 * inv_logit(x),
            CoefPrior::FlatOnRate => 1.0,
        }
    }

    fn validate(&self, field: &str) -> Result<(), ModelError> {
        if let CoefPrior::Normal { mean, sd } = *self {
            if !(mean.is_finite() && sd.is_finite() && sd > 0.0) {
                return Err(spec_err(field, "normal prior needs a finite mean and positive sd"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPrior {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub gamma_intercept: CoefPrior,
    pub gamma_spline: CoefPrior,
    pub beta_global: CoefPrior,
    /// Half-normal scale of each `sigma_i`.
    pub sigma_scale: f64,
    pub sigma_country_scale: f64,
    pub sens: BetaPrior,
    pub spec: BetaPrior,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            gamma_intercept: CoefPrior::Normal { mean: -1.0, sd: 1.5 },
            gamma_spline: CoefPrior::Normal { mean: 0.0, sd: 0.05 },
            beta_global: CoefPrior::Normal { mean: 0.0, sd: 5.0 },
            sigma_scale: 2.0,
            sigma_country_scale: 2.0,
            sens: BetaPrior { a: 10.0, b: 1.0 },
            spec: BetaPrior { a: 50.0, b: 1.0 },
        }
    }
}

fn spec_err(field: &str, message: &str) -> ModelError {
    ModelError::InvalidSpec {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub serology_knots: NaturalSplineDef,
    pub ifr_knots: NaturalSplineDef,
    pub basis: BasisKind,
    pub priors: PriorSpec,
    pub mesh_step: f64,
    pub non_centered: bool,
    /// Shift spline columns to mean zero over integer ages 0..=100 so the
    /// intercepts are curve averages rather than values at a boundary knot.
    pub centered_basis: bool,
    /// Coordinate name to fixed value (on the coordinate scale).
    pub fixed: BTreeMap<String, f64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            serology_knots: NaturalSplineDef::serology_default(),
            ifr_knots: NaturalSplineDef::ifr_default(),
            basis: BasisKind::default(),
            priors: PriorSpec::default(),
            mesh_step: DEFAULT_STEP,
            non_centered: true,
            centered_basis: true,
            fixed: BTreeMap::new(),
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ceiling = f64::from(AGE_CEILING);
        for (field, def) in [("serology_knots", &self.serology_knots), ("ifr_knots", &self.ifr_knots)] {
            def.validate()
                .map_err(|e| spec_err(field, &e.to_string()))?;
            if def.all_knots().iter().any(|&k| !(0.0..=ceiling).contains(&k)) {
                return Err(spec_err(field, "knots must lie within [0, 100]"));
            }
        }
        QuadratureMesh::new(self.mesh_step).map_err(|e| spec_err("mesh_step", &e.to_string()))?;
        let p = &self.priors;
        p.gamma_intercept.validate("priors.gamma_intercept")?;
        p.gamma_spline.validate("priors.gamma_spline")?;
        p.beta_global.validate("priors.beta_global")?;
        for (field, v) in [
            ("priors.sigma_scale", p.sigma_scale),
            ("priors.sigma_country_scale", p.sigma_country_scale),
            ("priors.sens.a", p.sens.a),
            ("priors.sens.b", p.sens.b),
            ("priors.spec.a", p.spec.a),
            ("priors.spec.b", p.spec.b),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(spec_err(field, "must be positive"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Log,
    Logit,
}

/// Index arithmetic for the coordinate vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterLayout {
    pub n_locations: usize,
    pub n_countries: usize,
    pub n_tests: usize,
    /// Serology spline dimension.
    pub p: usize,
    /// IFR spline dimension.
    pub q: usize,
}

impl ParameterLayout {
    pub fn gamma(&self, l: usize, j: usize) -> usize {
        l * (self.p + 1) + j
    }
    pub fn beta_loc(&self, l: usize, i: usize) -> usize {
        self.n_locations * (self.p + 1) + l * (self.q + 1) + i
    }
    pub fn beta_global(&self, i: usize) -> usize {
        self.n_locations * (self.p + self.q + 2) + i
    }
    pub fn beta_country(&self, c: usize) -> usize {
        self.beta_global(self.q + 1) + c
    }
    pub fn sigma(&self, i: usize) -> usize {
        self.beta_country(self.n_countries) + i
    }
    pub fn sigma_country(&self) -> usize {
        self.sigma(self.q + 1)
    }
    pub fn sens(&self, t: usize) -> usize {
        self.sigma_country() + 1 + t
    }
    pub fn spec(&self, t: usize) -> usize {
        self.sens(self.n_tests) + t
    }
    pub fn len(&self) -> usize {
        self.spec(self.n_tests)
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transform(&self, k: usize) -> Transform {
        if k >= self.sens(0) {
            Transform::Logit
        } else if k >= self.sigma(0) {
            Transform::Log
        } else {
            Transform::Identity
        }
    }
}

/// Natural-scale parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    /// Per location: intercept then spline coefficients.
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub beta_global: Vec<f64>,
    pub beta_country: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma_country: f64,
    pub sens: Vec<f64>,
    pub spec: Vec<f64>,
}

impl ParameterVector {
    /// Flat natural values in the same order as [`Model::param_names`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.gamma.iter().for_each(|g| v.extend(g));
        self.beta.iter().for_each(|b| v.extend(b));
        v.extend(&self.beta_global);
        v.extend(&self.beta_country);
        v.extend(&self.sigma);
        v.push(self.sigma_country);
        v.extend(&self.sens);
        v.extend(&self.spec);
        v
    }

    pub fn from_flat(layout: &ParameterLayout, v: &[f64]) -> Result<Self, ModelError> {
        if v.len() != layout.len() {
            return Err(ModelError::DimensionMismatch {
                expected: layout.len(),
                got: v.len(),
            });
        }
        let l = layout;
        Ok(Self {
            gamma: (0..l.n_locations)
                .map(|i| v[l.gamma(i, 0)..=l.gamma(i, l.p)].to_vec())
                .collect(),
            beta: (0..l.n_locations)
                .map(|i| v[l.beta_loc(i, 0)..=l.beta_loc(i, l.q)].to_vec())
                .collect(),
            beta_global: v[l.beta_global(0)..l.beta_country(0)].to_vec(),
            beta_country: v[l.beta_country(0)..l.sigma(0)].to_vec(),
            sigma: v[l.sigma(0)..l.sigma_country()].to_vec(),
            sigma_country: v[l.sigma_country()],
            sens: v[l.sens(0)..l.spec(0)].to_vec(),
            spec: v[l.spec(0)..l.len()].to_vec(),
        })
    }
}

/// Sensitivity-weighted positivity: `pi sens + (1 - pi)(1 - spec)`.
pub fn positivity(pi: f64, sens: f64, spec: f64) -> f64 {
    pi * sens + (1.0 - pi) * (1.0 - spec)
}

/// Population-weighted average of `g` over `bin`:
/// `int g f / int f`, both by trapezoid on the same mesh.
pub fn bin_average<G: Fn(f64) -> f64>(
    g: G,
    f: &AgeDensity,
    bin: &AgeBin,
    mesh: &QuadratureMesh,
) -> Result<f64, ModelError> {
    let (nodes, weights) = mesh.rule(bin.start(), bin.end())?;
    // Centred on the first node value so a constant integrand is exact.
    let g0 = g(nodes[0]);
    let mut num = 0.0;
    let mut den = 0.0;
    for (&a, &w) in nodes.iter().zip(&weights) {
        let fw = w * f.eval(a);
        num += fw * (g(a) - g0);
        den += fw;
    }
    if den < MIN_BIN_MASS {
        return Err(ModelError::ZeroMassBin {
            location: String::new(),
            bin: *bin,
        });
    }
    Ok(g0 + num / den)
}

/// Spline bases for both curves.
#[derive(Debug, Clone)]
pub struct Curves {
    pub serology: NaturalSplineBasis,
    pub ifr: NaturalSplineBasis,
}

impl Curves {
    pub fn new(spec: &ModelSpec) -> Result<Self, ModelError> {
        let mut serology = NaturalSplineBasis::with_kind(spec.serology_knots.clone(), spec.basis)?;
        let mut ifr = NaturalSplineBasis::with_kind(spec.ifr_knots.clone(), spec.basis)?;
        if spec.centered_basis {
            let ages: Vec<f64> = (0..=AGE_CEILING).map(f64::from).collect();
            serology = serology.centered_on(&ages);
            ifr = ifr.centered_on(&ages);
        }
        Ok(Self { serology, ifr })
    }

    pub fn logit_prevalence(&self, params: &ParameterVector, l: usize, age: f64) -> f64 {
        let g = &params.gamma[l];
        g[0] + dot(&self.serology.eval(age), &g[1..])
    }

    pub fn log_ifr(&self, params: &ParameterVector, l: usize, age: f64) -> f64 {
        let b = &params.beta[l];
        b[0] + dot(&self.ifr.eval(age), &b[1..])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seroprevalence of location `l` at `age`.
pub fn prevalence_curve(curves: &Curves, params: &ParameterVector, l: usize, age: f64) -> f64 {
    inv_logit(curves.logit_prevalence(params, l, age))
}

/// IFR of location `l` at `age`.
pub fn ifr_curve(curves: &Curves, params: &ParameterVector, l: usize, age: f64) -> f64 {
    curves.log_ifr(params, l, age).exp()
}

// ---------------------------------------------------------------------------
// Model

#[derive(Debug, Clone)]
struct BinWeights {
    /// First node of the bin in the location's node list; the bin covers a
    /// contiguous run of nodes, with zero weight on nodes from other bins.
    start: usize,
    ages: Vec<f64>,
    weights: Vec<f64>,
}

impl BinWeights {
    fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.weights.len()
    }
}

#[derive(Debug, Clone)]
struct SeroTerm {
    bin: AgeBin,
    w: BinWeights,
    n: f64,
    r: f64,
    saturated: f64,
}

#[derive(Debug, Clone)]
struct DeathTerm {
    bin: AgeBin,
    w: BinWeights,
    population: f64,
    d: f64,
    saturated: f64,
}

#[derive(Debug, Clone)]
struct LocationTerms {
    id: String,
    test: usize,
    country: usize,
    /// Spline rows at each unique node, row-major.
    z: Vec<f64>,
    x: Vec<f64>,
    n_nodes: usize,
    sero: Vec<SeroTerm>,
    deaths: Vec<DeathTerm>,
}

#[derive(Debug, Clone)]
struct TestTerms {
    x_sens: f64,
    n_sens: f64,
    x_spec: f64,
    n_spec: f64,
    saturated_sens: f64,
    saturated_spec: f64,
}

/// Log posterior broken into its additive parts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LogPosteriorTerms {
    pub prior: f64,
    pub jacobian: f64,
    pub serology: f64,
    pub validation: f64,
    pub deaths: f64,
}

impl LogPosteriorTerms {
    pub fn total(&self) -> f64 {
        self.prior + self.jacobian + self.serology + self.validation + self.deaths
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogDensityResult {
    pub value: f64,
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layout: ParameterLayout,
    curves: Curves,
    mesh: QuadratureMesh,
    dataset: StudyDataset,
    densities: Vec<AgeDensity>,
    countries: Vec<String>,
    locations: Vec<LocationTerms>,
    tests: Vec<TestTerms>,
    /// Coordinate indices of the free parameters, ascending.
    free: Vec<usize>,
    /// Fixed value per coordinate, if any.
    fixed: Vec<Option<f64>>,
    coordinate_names: Vec<String>,
    natural_names: Vec<String>,
}

impl Model {
    /// `densities` holds one age density per location, in dataset order.
    pub fn new(
        dataset: &StudyDataset,
        densities: Vec<AgeDensity>,
        spec: ModelSpec,
    ) -> Result<Self, ModelError> {
        spec.validate()?;
        if densities.len() != dataset.locations.len() {
            return Err(ModelError::DensityCount {
                expected: dataset.locations.len(),
                got: densities.len(),
            });
        }
        let curves = Curves::new(&spec)?;
        let mesh = QuadratureMesh::new(spec.mesh_step)?;
        let countries = dataset.countries();
        let layout = ParameterLayout {
            n_locations: dataset.locations.len(),
            n_countries: countries.len(),
            n_tests: dataset.tests.len(),
            p: curves.serology.dim(),
            q: curves.ifr.dim(),
        };

        let mut locations = Vec::with_capacity(dataset.locations.len());
        for (loc, f) in dataset.locations.iter().zip(&densities) {
            let test = dataset.test_index(&loc.test_id).ok_or_else(|| {
                ModelError::UnknownParameter(format!("test `{}`", loc.test_id))
            })?;
            let country = countries.iter().position(|c| *c == loc.country_id).unwrap();
            let mut node_ages: Vec<f64> = Vec::new();
            let mut rules = Vec::new();
            let bins = loc
                .serology
                .iter()
                .map(|o| o.bin)
                .chain(loc.deaths.iter().map(|o| o.bin));
            for bin in bins {
                let (nodes, weights) = mesh.rule(bin.start(), bin.end())?;
                node_ages.extend(&nodes);
                rules.push((bin, nodes, weights));
            }
            node_ages.sort_by(|a, b| a.total_cmp(b));
            node_ages.dedup();
            let index_of = |a: f64| node_ages.partition_point(|&n| n < a);
            let mut normalized = Vec::with_capacity(rules.len());
            for (bin, nodes, weights) in rules {
                let fw: Vec<f64> = nodes.iter().zip(&weights).map(|(&a, &w)| w * f.eval(a)).collect();
                let mass: f64 = fw.iter().sum();
                if mass < MIN_BIN_MASS {
                    return Err(ModelError::ZeroMassBin {
                        location: loc.location_id.clone(),
                        bin,
                    });
                }
                let start = index_of(nodes[0]);
                let end = index_of(nodes[nodes.len() - 1]) + 1;
                let mut dense = vec![0.0; end - start];
                for (&a, v) in nodes.iter().zip(&fw) {
                    dense[index_of(a) - start] = v / mass;
                }
                normalized.push(BinWeights {
                    start,
                    ages: node_ages[start..end].to_vec(),
                    weights: dense,
                });
            }
            let n_nodes = node_ages.len();
            let mut z = Vec::with_capacity(n_nodes * layout.p);
            let mut x = Vec::with_capacity(n_nodes * layout.q);
            for &a in &node_ages {
                z.extend(curves.serology.eval(a));
                x.extend(curves.ifr.eval(a));
            }
            let mut rules = normalized.into_iter();
            let sero = loc
                .serology
                .iter()
                .map(|o| SeroTerm {
                    bin: o.bin,
                    w: rules.next().unwrap(),
                    n: o.n_tested as f64,
                    r: o.n_positive as f64,
                    saturated: binomial_saturated(o.n_tested, o.n_positive),
                })
                .collect();
            let deaths = loc
                .deaths
                .iter()
                .map(|o| -> Result<DeathTerm, ModelError> {
                    Ok(DeathTerm {
                        bin: o.bin,
                        w: rules.next().unwrap(),
                        population: crate::age_density::population_in_bin(loc, f, &o.bin, &mesh)?,
                        d: o.deaths as f64,
                        saturated: poisson_saturated(o.deaths),
                    })
                })
                .collect::<Result<_, _>>()?;
            locations.push(LocationTerms {
                id: loc.location_id.clone(),
                test,
                country,
                z,
                x,
                n_nodes,
                sero,
                deaths,
            });
        }
        let tests = dataset
            .tests
            .iter()
            .map(|t| TestTerms {
                x_sens: t.x_sens as f64,
                n_sens: t.n_sens as f64,
                x_spec: t.x_spec as f64,
                n_spec: t.n_spec as f64,
                saturated_sens: binomial_saturated(t.n_sens, t.x_sens),
                saturated_spec: binomial_saturated(t.n_spec, t.x_spec),
            })
            .collect();

        let (coordinate_names, natural_names) = names(&layout, dataset, &countries, spec.non_centered);
        let mut fixed = vec![None; layout.len()];
        for (name, &value) in &spec.fixed {
            let k = coordinate_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| ModelError::UnknownParameter(name.clone()))?;
            let ok = match layout.transform(k) {
                Transform::Identity => value.is_finite(),
                Transform::Log => value.is_finite() && value > 0.0,
                Transform::Logit => (0.0..=1.0).contains(&value),
            };
            if !ok {
                return Err(ModelError::InvalidParameter {
                    name: name.clone(),
                    message: format!("fixed value {value} is outside the parameter's support"),
                });
            }
            fixed[k] = Some(value);
        }
        let free = (0..layout.len()).filter(|&k| fixed[k].is_none()).collect();

        Ok(Self {
            spec,
            layout,
            curves,
            mesh,
            dataset: dataset.clone(),
            densities,
            countries,
            locations,
            tests,
            free,
            fixed,
            coordinate_names,
            natural_names,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }
    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }
    pub fn curves(&self) -> &Curves {
        &self.curves
    }
    pub fn mesh(&self) -> &QuadratureMesh {
        &self.mesh
    }
    pub fn dataset(&self) -> &StudyDataset {
        &self.dataset
    }
    pub fn densities(&self) -> &[AgeDensity] {
        &self.densities
    }
    pub fn countries(&self) -> &[String] {
        &self.countries
    }
    /// Number of free (sampled) coordinates.
    pub fn dim(&self) -> usize {
        self.free.len()
    }
    pub fn coordinate_names(&self) -> &[String] {
        &self.coordinate_names
    }
    /// Names of natural parameters, matching [`ParameterVector::to_flat`].
    pub fn natural_names(&self) -> &[String] {
        &self.natural_names
    }
    pub fn free_coordinate_names(&self) -> Vec<String> {
        self.free.iter().map(|&k| self.coordinate_names[k].clone()).collect()
    }

    /// Whether each natural parameter is fully determined by fixed coordinates.
    pub fn natural_fixed_mask(&self) -> Vec<bool> {
        let l = &self.layout;
        let fixed = |k: usize| self.fixed[k].is_some();
        let mut mask: Vec<bool> = (0..l.len()).map(fixed).collect();
        if self.spec.non_centered {
            for c in 0..l.n_countries {
                mask[l.beta_country(c)] = fixed(l.beta_country(c)) && fixed(l.sigma_country());
            }
            for (li, loc) in self.locations.iter().enumerate() {
                for i in 0..=l.q {
                    let mut deps = vec![l.beta_loc(li, i), l.beta_global(i), l.sigma(i)];
                    if i == 0 {
                        deps.extend([l.beta_country(loc.country), l.sigma_country()]);
                    }
                    mask[l.beta_loc(li, i)] = deps.into_iter().all(fixed);
                }
            }
        }
        mask
    }

    fn check_len(&self, got: usize, expected: usize) -> Result<(), ModelError> {
        if got == expected {
            Ok(())
        } else {
            Err(ModelError::DimensionMismatch { expected, got })
        }
    }

    /// Unconstrained free vector to coordinates.
    pub fn coordinates(&self, u: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_len(u.len(), self.dim())?;
        let mut theta: Vec<f64> = self.fixed.iter().map(|f| f.unwrap_or(0.0)).collect();
        for (&k, &v) in self.free.iter().zip(u) {
            theta[k] = match self.layout.transform(k) {
                Transform::Identity => v,
                Transform::Log => v.exp(),
                Transform::Logit => inv_logit(v),
            };
        }
        Ok(theta)
    }

    /// Coordinates to the unconstrained free vector.
    pub fn unconstrain_coordinates(&self, theta: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_len(theta.len(), self.layout.len())?;
        Ok(self
            .free
            .iter()
            .map(|&k| match self.layout.transform(k) {
                Transform::Identity => theta[k],
                Transform::Log => theta[k].ln(),
                Transform::Logit => logit(theta[k]),
            })
            .collect())
    }

    pub fn natural_from_coordinates(&self, theta: &[f64]) -> Result<ParameterVector, ModelError> {
        self.check_len(theta.len(), self.layout.len())?;
        let mut v = theta.to_vec();
        if self.spec.non_centered {
            let l = &self.layout;
            for c in 0..l.n_countries {
                v[l.beta_country(c)] = theta[l.sigma_country()] * theta[l.beta_country(c)];
            }
            for (li, loc) in self.locations.iter().enumerate() {
                for i in 0..=l.q {
                    let mut b = theta[l.beta_global(i)] + theta[l.sigma(i)] * theta[l.beta_loc(li, i)];
                    if i == 0 {
                        b += v[l.beta_country(loc.country)];
                    }
                    v[l.beta_loc(li, i)] = b;
                }
            }
        }
        ParameterVector::from_flat(&self.layout, &v)
    }

    pub fn coordinates_from_natural(&self, params: &ParameterVector) -> Result<Vec<f64>, ModelError> {
        let mut theta = params.to_flat();
        self.check_len(theta.len(), self.layout.len())?;
        let l = &self.layout;
        for k in (0..l.len()).filter(|&k| self.fixed[k].is_none()) {
            self.check_support(k, theta[k], false)?;
        }
        if self.spec.non_centered {
            for c in 0..l.n_countries {
                theta[l.beta_country(c)] = params.beta_country[c] / params.sigma_country;
            }
            for (li, loc) in self.locations.iter().enumerate() {
                for i in 0..=l.q {
                    let mut centre = params.beta_global[i];
                    if i == 0 {
                        centre += params.beta_country[loc.country];
                    }
                    theta[l.beta_loc(li, i)] = (params.beta[li][i] - centre) / params.sigma[i];
                }
            }
        }
        Ok(theta)
    }

    /// Probabilities must lie in `(0, 1)`, or `[0, 1]` when `closed`.
    fn check_support(&self, k: usize, v: f64, closed: bool) -> Result<(), ModelError> {
        let ok = match self.layout.transform(k) {
            Transform::Identity => v.is_finite(),
            Transform::Log => v.is_finite() && v > 0.0,
            Transform::Logit if closed => (0.0..=1.0).contains(&v),
            Transform::Logit => v > 0.0 && v < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidParameter {
                name: self.natural_names[k].clone(),
                message: format!("value {v} is outside the parameter's support"),
            })
        }
    }

    /// Natural parameters for an unconstrained free vector.
    pub fn constrain(&self, u: &[f64]) -> Result<ParameterVector, ModelError> {
        self.natural_from_coordinates(&self.coordinates(u)?)
    }

    /// Unconstrained free vector for natural parameters. Fixed coordinates
    /// are taken from the spec, not from `params`.
    pub fn unconstrain(&self, params: &ParameterVector) -> Result<Vec<f64>, ModelError> {
        self.unconstrain_coordinates(&self.coordinates_from_natural(params)?)
    }

    pub fn log_posterior(&self, u: &[f64]) -> Result<LogDensityResult, ModelError> {
        let mut gradient = vec![0.0; self.dim()];
        let terms = self.evaluate(u, Some(&mut gradient))?;
        Ok(LogDensityResult {
            value: terms.total(),
            gradient,
        })
    }

    pub fn log_posterior_terms(&self, u: &[f64]) -> Result<LogPosteriorTerms, ModelError> {
        self.evaluate(u, None)
    }

    fn evaluate(&self, u: &[f64], grad_out: Option<&mut [f64]>) -> Result<LogPosteriorTerms, ModelError> {
        let theta = self.coordinates(u)?;
        let l = &self.layout;
        let pr = &self.spec.priors;
        let nc = self.spec.non_centered;
        let is_fixed = |k: usize| self.fixed[k].is_some();
        let mut g = vec![0.0; l.len()];
        let mut t = LogPosteriorTerms::default();

        // Priors on single coordinates; fixed ones only add constants.
        let coef = |k: usize, prior: &CoefPrior, g: &mut [f64], t: &mut LogPosteriorTerms| {
            if !is_fixed(k) {
                t.prior += prior.log_density(theta[k]);
                g[k] += prior.gradient(theta[k]);
            }
        };
        let std_normal = CoefPrior::Normal { mean: 0.0, sd: 1.0 };
        for li in 0..l.n_locations {
            coef(l.gamma(li, 0), &pr.gamma_intercept, &mut g, &mut t);
            for j in 1..=l.p {
                coef(l.gamma(li, j), &pr.gamma_spline, &mut g, &mut t);
            }
            if nc {
                for i in 0..=l.q {
                    coef(l.beta_loc(li, i), &std_normal, &mut g, &mut t);
                }
            }
        }
        for i in 0..=l.q {
            coef(l.beta_global(i), &pr.beta_global, &mut g, &mut t);
        }
        if nc {
            for c in 0..l.n_countries {
                coef(l.beta_country(c), &std_normal, &mut g, &mut t);
            }
        } else {
            let sc = theta[l.sigma_country()];
            for c in 0..l.n_countries {
                let b = theta[l.beta_country(c)];
                t.prior += normal_lpdf(b, 0.0, sc);
                g[l.beta_country(c)] -= b / (sc * sc);
                g[l.sigma_country()] += (b * b / (sc * sc) - 1.0) / sc;
            }
            for (li, loc) in self.locations.iter().enumerate() {
                for i in 0..=l.q {
                    let s = theta[l.sigma(i)];
                    let mut centre = theta[l.beta_global(i)];
                    if i == 0 {
                        centre += theta[l.beta_country(loc.country)];
                    }
                    let r = theta[l.beta_loc(li, i)] - centre;
                    t.prior += normal_lpdf(r, 0.0, s);
                    let dr = -r / (s * s);
                    g[l.beta_loc(li, i)] += dr;
                    g[l.beta_global(i)] -= dr;
                    if i == 0 {
                        g[l.beta_country(loc.country)] -= dr;
                    }
                    g[l.sigma(i)] += (r * r / (s * s) - 1.0) / s;
                }
            }
        }
        let half_normal = |k: usize, scale: f64, g: &mut [f64], t: &mut LogPosteriorTerms| {
            if !is_fixed(k) {
                t.prior += half_normal_lpdf(theta[k], scale);
                g[k] -= theta[k] / (scale * scale);
            }
        };
        for i in 0..=l.q {
            half_normal(l.sigma(i), pr.sigma_scale, &mut g, &mut t);
        }
        half_normal(l.sigma_country(), pr.sigma_country_scale, &mut g, &mut t);
        for ti in 0..l.n_tests {
            for (k, bp) in [(l.sens(ti), pr.sens), (l.spec(ti), pr.spec)] {
                if !is_fixed(k) {
                    let x = theta[k];
                    t.prior += beta_lpdf(x, bp.a, bp.b);
                    g[k] += (bp.a - 1.0) / x - (bp.b - 1.0) / (1.0 - x);
                }
            }
        }
        if !t.prior.is_finite() {
            return Err(ModelError::NonFinite("prior".into()));
        }

        // Assay validation counts.
        for (ti, tt) in self.tests.iter().enumerate() {
            let add = |k: usize, x: f64, n: f64, c: f64, g: &mut [f64]| {
                if is_fixed(k) {
                    return 0.0;
                }
                let s = theta[k];
                g[k] += x / s - (n - x) / (1.0 - s);
                c + binomial_deviance(n, x, s, 1.0 - s)
            };
            let v = add(l.sens(ti), tt.x_sens, tt.n_sens, tt.saturated_sens, &mut g)
                + add(l.spec(ti), tt.x_spec, tt.n_spec, tt.saturated_spec, &mut g);
            if !v.is_finite() {
                return Err(ModelError::NonFinite(format!(
                    "validation counts of test `{}`",
                    self.dataset.tests[ti].test_id
                )));
            }
            t.validation += v;
        }

        // Location likelihoods.
        let params = self.natural_from_coordinates(&theta)?;
        let (p_dim, q_dim) = (l.p, l.q);
        for (li, loc) in self.locations.iter().enumerate() {
            let n = loc.n_nodes;
            let gamma = &params.gamma[li];
            let beta = &params.beta[li];
            let has_deaths = !loc.deaths.is_empty();
            let mut pi = Vec::with_capacity(n);
            let mut one_minus_pi = Vec::with_capacity(n);
            let mut lambda = Vec::with_capacity(if has_deaths { n } else { 0 });
            for k in 0..n {
                let eta = gamma[0] + dot(&loc.z[k * p_dim..(k + 1) * p_dim], &gamma[1..]);
                let (a, b) = logistic_pair(eta);
                pi.push(a);
                one_minus_pi.push(b);
                if has_deaths {
                    let xi = beta[0] + dot(&loc.x[k * q_dim..(k + 1) * q_dim], &beta[1..]);
                    lambda.push(a * xi.exp());
                }
            }
            let mut d_eta = vec![0.0; n];
            let ks = l.sens(loc.test);
            let kc = l.spec(loc.test);
            let (sens, spec) = (theta[ks], theta[kc]);
            let slope = sens + spec - 1.0;
            for term in &loc.sero {
                let r = term.w.range();
                let (pi_b, om_b) = (&pi[r.clone()], &one_minus_pi[r.clone()]);
                let (mut s_pi, mut s_om) = (0.0, 0.0);
                for ((&w, &a), &b) in term.w.weights.iter().zip(pi_b).zip(om_b) {
                    s_pi += w * a;
                    s_om += w * b;
                }
                let p = sens * s_pi + (1.0 - spec) * s_om;
                let q = (1.0 - sens) * s_pi + spec * s_om;
                let v = term.saturated + binomial_deviance(term.n, term.r, p, q);
                if !v.is_finite() {
                    return Err(ModelError::NonFinite(format!(
                        "serology bin {} of location `{}`",
                        term.bin, loc.id
                    )));
                }
                t.serology += v;
                let gp = term.r / p - (term.n - term.r) / q;
                g[ks] += gp * s_pi;
                g[kc] -= gp * s_om;
                let c = gp * slope;
                let w = &term.w.weights[..];
                let de = &mut d_eta[r];
                for k in 0..w.len() {
                    de[k] += c * w[k] * pi_b[k] * om_b[k];
                }
            }
            let mut d_xi = vec![0.0; if has_deaths { n } else { 0 }];
            if has_deaths {
                for term in &loc.deaths {
                    let r = term.w.range();
                    let lam_b = &lambda[r.clone()];
                    let big_lambda: f64 = term.w.weights.iter().zip(lam_b).map(|(&w, &v)| w * v).sum();
                    let mu = term.population * big_lambda;
                    let v = term.saturated + poisson_deviance(term.d, mu);
                    if !v.is_finite() {
                        return Err(ModelError::NonFinite(format!(
                            "death bin {} of location `{}`",
                            term.bin, loc.id
                        )));
                    }
                    t.deaths += v;
                    let gl = if term.d > 0.0 {
                        term.d / big_lambda - term.population
                    } else {
                        -term.population
                    };
                    let om_b = &one_minus_pi[r.clone()];
                    let w = &term.w.weights[..];
                    let dx = &mut d_xi[r.clone()];
                    let de = &mut d_eta[r];
                    for k in 0..w.len() {
                        let c = gl * w[k] * lam_b[k];
                        dx[k] += c;
                        de[k] += c * om_b[k];
                    }
                }
            }
            // Back to coefficients.
            let mut gg = vec![0.0; p_dim + 1];
            for (z, &de) in loc.z.chunks_exact(p_dim).zip(&d_eta) {
                gg[0] += de;
                for (acc, &zj) in gg[1..].iter_mut().zip(z) {
                    *acc += de * zj;
                }
            }
            for (j, &v) in gg.iter().enumerate() {
                g[l.gamma(li, j)] += v;
            }
            if !d_xi.is_empty() {
                let mut gb = vec![0.0; q_dim + 1];
                for (x, &dx) in loc.x.chunks_exact(q_dim).zip(&d_xi) {
                    gb[0] += dx;
                    for (acc, &xi) in gb[1..].iter_mut().zip(x) {
                        *acc += dx * xi;
                    }
                }
                for (i, &gbi) in gb.iter().enumerate() {
                    if nc {
                        g[l.beta_global(i)] += gbi;
                        g[l.sigma(i)] += gbi * theta[l.beta_loc(li, i)];
                        g[l.beta_loc(li, i)] += gbi * theta[l.sigma(i)];
                        if i == 0 {
                            let kc = l.beta_country(loc.country);
                            g[kc] += gbi * theta[l.sigma_country()];
                            g[l.sigma_country()] += gbi * theta[kc];
                        }
                    } else {
                        g[l.beta_loc(li, i)] += gbi;
                    }
                }
            }
        }

        // Change of variables to the unconstrained scale.
        if let Some(out) = grad_out {
            for (slot, (&k, &uk)) in out.iter_mut().zip(self.free.iter().zip(u)) {
                *slot = match l.transform(k) {
                    Transform::Identity => g[k],
                    Transform::Log => g[k] * theta[k] + 1.0,
                    Transform::Logit => {
                        let s = theta[k];
                        g[k] * s * (1.0 - s) + 1.0 - 2.0 * inv_logit(uk)
                    }
                };
            }
        }
        for (&k, &uk) in self.free.iter().zip(u) {
            t.jacobian += match l.transform(k) {
                Transform::Identity => 0.0,
                Transform::Log => uk,
                Transform::Logit => -softplus(-uk) - softplus(uk),
            };
        }
        Ok(t)
    }

    /// Expected test positivity in serology bin `b` of location `l`.
    pub fn bin_positivity(&self, params: &ParameterVector, l: usize, b: usize) -> f64 {
        let loc = &self.locations[l];
        let term = &loc.sero[b];
        let (sens, spec) = (params.sens[loc.test], params.spec[loc.test]);
        self.bin_mean(&term.w, |a| {
            positivity(prevalence_curve(&self.curves, params, l, a), sens, spec)
        })
    }

    /// Expected death rate `Lambda` in death bin `b` of location `l`.
    pub fn bin_death_rate(&self, params: &ParameterVector, l: usize, b: usize) -> f64 {
        let term = &self.locations[l].deaths[b];
        self.bin_mean(&term.w, |a| {
            prevalence_curve(&self.curves, params, l, a) * ifr_curve(&self.curves, params, l, a)
        })
    }

    /// Real-valued population of death bin `b` of location `l`.
    pub fn death_bin_population(&self, l: usize, b: usize) -> f64 {
        self.locations[l].deaths[b].population
    }

    fn bin_mean<G: Fn(f64) -> f64>(&self, w: &BinWeights, g: G) -> f64 {
        w.ages.iter().zip(&w.weights).map(|(&a, &wk)| wk * g(a)).sum()
    }

    /// Replaces all observed counts with draws from the model at `truth`.
    pub fn simulate(&self, truth: &ParameterVector, seed: u64) -> Result<StudyDataset, ModelError> {
        let flat = truth.to_flat();
        self.check_len(flat.len(), self.layout.len())?;
        for (k, &v) in flat.iter().enumerate() {
            self.check_support(k, v, true)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = self.dataset.clone();
        for (ti, test) in ds.tests.iter_mut().enumerate() {
            test.x_sens = draw_binomial(&mut rng, test.n_sens, truth.sens[ti]);
            test.x_spec = draw_binomial(&mut rng, test.n_spec, truth.spec[ti]);
        }
        for (li, loc) in ds.locations.iter_mut().enumerate() {
            for (b, obs) in loc.serology.iter_mut().enumerate() {
                let p = self.bin_positivity(truth, li, b);
                obs.n_positive = draw_binomial(&mut rng, obs.n_tested, p);
            }
            for (b, obs) in loc.deaths.iter_mut().enumerate() {
                let mu = self.death_bin_population(li, b) * self.bin_death_rate(truth, li, b);
                obs.deaths = draw_poisson(&mut rng, mu);
            }
        }
        Ok(ds)
    }
}

fn draw_binomial(rng: &mut ChaCha8Rng, n: u64, p: f64) -> u64 {
    Binomial::new(n, p.clamp(0.0, 1.0)).map(|d| d.sample(rng)).unwrap_or(0)
}

fn draw_poisson(rng: &mut ChaCha8Rng, mu: f64) -> u64 {
    if !(mu > 0.0) {
        return 0;
    }
    Poisson::new(mu).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// Forward simulation from `truth` using `model`'s bins, sample sizes and
/// populations.
pub fn simulate_dataset(model: &Model, truth: &ParameterVector, seed: u64) -> Result<StudyDataset, ModelError> {
    model.simulate(truth, seed)
}

fn names(
    layout: &ParameterLayout,
    ds: &StudyDataset,
    countries: &[String],
    non_centered: bool,
) -> (Vec<String>, Vec<String>) {
    let mut coord = Vec::with_capacity(layout.len());
    let mut natural = Vec::with_capacity(layout.len());
    let mut both = |c: String, n: String| {
        coord.push(c);
        natural.push(n);
    };
    for loc in &ds.locations {
        for j in 0..=layout.p {
            let n = format!("gamma_{j}[{}]", loc.location_id);
            both(n.clone(), n);
        }
    }
    for loc in &ds.locations {
        for i in 0..=layout.q {
            let n = format!("beta_{i}[{}]", loc.location_id);
            let c = if non_centered {
                format!("beta_offset_{i}[{}]", loc.location_id)
            } else {
                n.clone()
            };
            both(c, n);
        }
    }
    for i in 0..=layout.q {
        let n = format!("beta_global_{i}");
        both(n.clone(), n);
    }
    for c in countries {
        let n = format!("beta_country[{c}]");
        let co = if non_centered {
            format!("beta_country_offset[{c}]")
        } else {
            n.clone()
        };
        both(co, n);
    }
    for i in 0..=layout.q {
        let n = format!("sigma_{i}");
        both(n.clone(), n);
    }
    both("sigma_country".into(), "sigma_country".into());
    for t in &ds.tests {
        let n = format!("sens[{}]", t.test_id);
        both(n.clone(), n);
    }
    for t in &ds.tests {
        let n = format!("spec[{}]", t.test_id);
        both(n.clone(), n);
    }
    (coord, natural)
}

impl Target for Model {
    fn dim(&self) -> usize {
        self.free.len()
    }

    fn log_density(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        match self.evaluate(position, Some(grad)) {
            Ok(t) => t.total(),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn param_names(&self) -> Vec<String> {
        self.natural_names.clone()
    }

    fn constrain(&self, position: &[f64]) -> Vec<f64> {
        self.constrain(position)
            .map(|p| p.to_flat())
            .unwrap_or_else(|_| vec![f64::NAN; self.layout.len()])
    }

    fn fixed_params(&self) -> Vec<bool> {
        self.natural_fixed_mask()
    }

    /// Zero except sens and spec, which sit at their posterior means given
    /// the validation counts alone. Jitter around zero starts them near
    /// 0.5, close to the sens + spec = 1 ridge, and warmup can carry a
    /// chain across it.
    fn init_center(&self) -> Vec<f64> {
        let mut center = vec![0.0; self.layout.len()];
        let (ps, pc) = (self.spec.priors.sens, self.spec.priors.spec);
        for (t, tt) in self.tests.iter().enumerate() {
            center[self.layout.sens(t)] = logit((ps.a + tt.x_sens) / (ps.a + ps.b + tt.n_sens));
            center[self.layout.spec(t)] = logit((pc.a + tt.x_spec) / (pc.a + pc.b + tt.n_spec));
        }
        self.free.iter().map(|&k| center[k]).collect()
    }

    /// Starts only where every test has sens + spec > 1. The mirrored region
    /// fits serology with positivity falling in prevalence and is separated
    /// from the bulk by a barrier chains do not cross.
    fn admissible_init(&self, position: &[f64]) -> bool {
        match self.constrain(position) {
            Ok(p) => p.sens.iter().zip(&p.spec).all(|(a, b)| a + b > 1.0),
            Err(_) => false,
        }
    }
}
