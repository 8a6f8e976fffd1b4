//! Synthetic study designs and reference parameters for simulation studies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::age_density::{dataset_densities, DensityError, DEFAULT_LOESS_SPAN};
use crate::data::{AgeBin, DataError, DeathBinObs, LocationRecord, SerologyBinObs, StudyDataset, TestValidation};
use crate::model::{Model, ModelError, ModelSpec, ParameterVector};
use crate::spline::NaturalSplineBasis;

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDesign {
    pub n_locations: usize,
    /// Country of each location; cycles if shorter than `n_locations`.
    pub countries: Vec<String>,
    pub n_per_bin: u64,
    pub population: f64,
    /// `(lo, hi)` label pairs; `None` marks an open bin.
    pub serology_bins: Vec<(u32, Option<u32>)>,
    pub death_bins: Vec<(u32, Option<u32>)>,
    pub n_sens: u64,
    pub n_spec: u64,
}

impl Default for SyntheticDesign {
    fn default() -> Self {
        Self {
            n_locations: 3,
            countries: vec!["A".into(), "A".into(), "B".into()],
            n_per_bin: 2000,
            population: 1e6,
            serology_bins: vec![(0, Some(19)), (20, Some(39)), (40, Some(59)), (60, None)],
            death_bins: (0..8).map(|k| (10 * k, Some(10 * k + 9))).chain([(80, None)]).collect(),
            n_sens: 100,
            n_spec: 300,
        }
    }
}

fn bins(labels: &[(u32, Option<u32>)]) -> Result<Vec<AgeBin>, DataError> {
    labels
        .iter()
        .map(|&(lo, hi)| {
            AgeBin::from_labels(lo, hi).map_err(|message| DataError::SchemaViolation {
                file: "<design>".into(),
                row: 0,
                column: "age_lo".into(),
                message,
            })
        })
        .collect()
}

/// Population counts in 5-year bins; older ages thin out faster for
/// higher `k` so locations differ in age structure.
fn population_profile(k: usize, total: f64) -> Vec<(AgeBin, f64)> {
    let decay = 0.018 + 0.008 * (k % 4) as f64;
    let raw: Vec<(AgeBin, f64)> = (0..20)
        .map(|j| {
            let mid = 5.0 * j as f64 + 2.5;
            let bin = AgeBin::span(5 * j, 5 * j + 5).unwrap();
            (bin, (-decay * mid).exp() * (1.0 + 0.1 * (mid / 15.0).sin()))
        })
        .collect();
    let sum: f64 = raw.iter().map(|b| b.1).sum();
    raw.into_iter().map(|(b, w)| (b, total * w / sum)).collect()
}

/// Dataset with the design's bins and sample sizes and all counts zero.
pub fn template(design: &SyntheticDesign) -> Result<StudyDataset, DataError> {
    let sero = bins(&design.serology_bins)?;
    let deaths = bins(&design.death_bins)?;
    let mut national = BTreeMap::new();
    let locations = (0..design.n_locations)
        .map(|k| {
            let country = if design.countries.is_empty() {
                "A".to_string()
            } else {
                design.countries[k % design.countries.len()].clone()
            };
            let population_bins = population_profile(k, design.population);
            national
                .entry(country.clone())
                .or_insert_with(|| population_bins.clone());
            LocationRecord {
                location_id: format!("loc{}", k + 1),
                country_id: country,
                test_id: "assay".into(),
                total_population: design.population,
                serology: sero
                    .iter()
                    .map(|&bin| SerologyBinObs {
                        bin,
                        n_tested: design.n_per_bin,
                        n_positive: 0,
                    })
                    .collect(),
                deaths: deaths.iter().map(|&bin| DeathBinObs { bin, deaths: 0 }).collect(),
                population_bins,
            }
        })
        .collect();
    let tests = vec![TestValidation {
        test_id: "assay".into(),
        n_sens: design.n_sens,
        x_sens: 0,
        n_spec: design.n_spec,
        x_spec: 0,
    }];
    StudyDataset::new(locations, tests, national)
}

/// Coefficients `c` with `c[0] + basis(a)' c[1..]` the least-squares fit
/// to `target` on ages 0..=100.
pub fn fit_coefficients<F: Fn(f64) -> f64>(basis: &NaturalSplineBasis, target: F) -> Vec<f64> {
    let k = basis.dim() + 1;
    let row_at = |a: f64| {
        let mut row = vec![1.0];
        row.extend(basis.eval(a));
        row
    };
    // Columns are scaled to unit maximum so badly scaled bases stay solvable.
    let mut scale = vec![0.0f64; k];
    for a in 0..=100 {
        for (s, v) in scale.iter_mut().zip(row_at(f64::from(a))) {
            *s = s.max(v.abs());
        }
    }
    let mut ata = vec![0.0; k * k];
    let mut atb = vec![0.0; k];
    for a in 0..=100 {
        let a = f64::from(a);
        let row: Vec<f64> = row_at(a).iter().zip(&scale).map(|(v, s)| v / s).collect();
        let y = target(a);
        for i in 0..k {
            atb[i] += row[i] * y;
            for j in 0..k {
                ata[i * k + j] += row[i] * row[j];
            }
        }
    }
    solve_spd(&mut ata, &mut atb, k);
    atb.iter().zip(&scale).map(|(c, s)| c / s).collect()
}

/// In-place Cholesky solve of a small symmetric positive definite system.
fn solve_spd(a: &mut [f64], b: &mut [f64], n: usize) {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
}

/// Reference truth for `model`: log IFR close to `-11.5 + 0.105 a`, logit
/// seroprevalence near -1 with mild age structure, a hierarchy with small
/// location and country deviations, sens 0.9 and spec 0.99.
pub fn reference_truth(model: &Model) -> ParameterVector {
    let layout = model.layout();
    let q = layout.q;
    let beta_global = fit_coefficients(&model.curves().ifr, |a| -11.5 + 0.105 * a);
    let sigma: Vec<f64> = (0..=q).map(|i| if i == 0 { 0.3 } else { 0.05 }).collect();
    let sigma_country = 0.3;
    let wobble = |k: usize, i: usize| ((k * 7 + i * 3) % 5) as f64 * 0.4 - 0.8;
    let beta_country: Vec<f64> = (0..layout.n_countries)
        .map(|c| sigma_country * wobble(c + 11, 0))
        .collect();
    let countries = model.countries();
    let mut gamma = Vec::with_capacity(layout.n_locations);
    let mut beta = Vec::with_capacity(layout.n_locations);
    for (k, loc) in model.dataset().locations.iter().enumerate() {
        let mut g = vec![-1.2 + 0.25 * (k % 3) as f64];
        g.extend((0..layout.p).map(|j| 0.04 * wobble(k, j + 1)));
        gamma.push(g);
        let c = countries.iter().position(|x| *x == loc.country_id).unwrap();
        let b = (0..=q)
            .map(|i| {
                let mut v = beta_global[i] + sigma[i] * wobble(k, i);
                if i == 0 {
                    v += beta_country[c];
                }
                v
            })
            .collect();
        beta.push(b);
    }
    ParameterVector {
        gamma,
        beta,
        beta_global,
        beta_country,
        sigma,
        sigma_country,
        sens: vec![0.9; layout.n_tests],
        spec: vec![0.99; layout.n_tests],
    }
}

/// Simulates a dataset from [`reference_truth`] on the design's template
/// and returns the model built on it, with the truth.
pub fn simulated_model(
    design: &SyntheticDesign,
    spec: ModelSpec,
    seed: u64,
) -> Result<(Model, ParameterVector), SyntheticError> {
    let tpl = template(design)?;
    let densities = dataset_densities(&tpl, DEFAULT_LOESS_SPAN)?;
    let base = Model::new(&tpl, densities.clone(), spec.clone())?;
    let truth = reference_truth(&base);
    let ds = base.simulate(&truth, seed)?;
    Ok((Model::new(&ds, densities, spec)?, truth))
}
