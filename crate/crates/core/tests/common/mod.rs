#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seroifr_core::model::{Model, ModelSpec, ParameterVector};
use seroifr_core::synthetic::{simulated_model, SyntheticDesign};

pub fn three_location(spec: ModelSpec, seed: u64) -> (Model, ParameterVector) {
    simulated_model(&SyntheticDesign::default(), spec, seed).unwrap()
}

/// Central differences, step `h`, on the unconstrained scale.
pub fn finite_difference(model: &Model, u: &[f64], h: f64) -> Vec<f64> {
    let mut x = u.to_vec();
    (0..u.len())
        .map(|k| {
            x[k] = u[k] + h;
            let up = model.log_posterior(&x).unwrap().value;
            x[k] = u[k] - h;
            let down = model.log_posterior(&x).unwrap().value;
            x[k] = u[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|g - fd| / max(|g|, |fd|, 1)` over coordinates.
pub fn max_relative_error(g: &[f64], fd: &[f64]) -> f64 {
    g.iter()
        .zip(fd)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Points near the truth, jittered uniformly by `radius` per coordinate.
pub fn random_points(model: &Model, truth: &ParameterVector, n: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    let centre = model.unconstrain(truth).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            centre
                .iter()
                .map(|c| c + radius * (2.0 * rng.random::<f64>() - 1.0))
                .collect()
        })
        .collect()
}

use std::collections::BTreeMap;

use seroifr_core::age_density::{dataset_densities, DEFAULT_LOESS_SPAN};
use seroifr_core::data::{AgeBin, DeathBinObs, LocationRecord, SerologyBinObs, StudyDataset, TestValidation};

pub fn uniform_population(total: f64) -> Vec<(AgeBin, f64)> {
    (0..20)
        .map(|j| (AgeBin::span(5 * j, 5 * j + 5).unwrap(), total / 20.0))
        .collect()
}

/// One location `L` in country `C` using test `t`.
pub fn single_location(serology: Vec<SerologyBinObs>, deaths: Vec<DeathBinObs>, test: (u64, u64, u64, u64)) -> StudyDataset {
    let population_bins = uniform_population(1e6);
    let mut national = BTreeMap::new();
    national.insert("C".to_string(), population_bins.clone());
    StudyDataset::new(
        vec![LocationRecord {
            location_id: "L".into(),
            country_id: "C".into(),
            test_id: "t".into(),
            total_population: 0.0,
            serology,
            deaths,
            population_bins,
        }],
        vec![TestValidation {
            test_id: "t".into(),
            n_sens: test.0,
            x_sens: test.1,
            n_spec: test.2,
            x_spec: test.3,
        }],
        national,
    )
    .unwrap()
}

pub fn model_for(ds: &StudyDataset, spec: ModelSpec) -> Model {
    let f = dataset_densities(ds, DEFAULT_LOESS_SPAN).unwrap();
    Model::new(ds, f, spec).unwrap()
}

/// Spec with every IFR-side coordinate of a one-location, one-country model
/// pinned: offsets and country terms at 0, scales at 1, global coefficients
/// at `beta_global`.
pub fn pin_ifr(spec: &mut ModelSpec, beta_global: &[f64]) {
    for (i, b) in beta_global.iter().enumerate() {
        spec.fixed.insert(format!("beta_global_{i}"), *b);
        spec.fixed.insert(format!("beta_offset_{i}[L]"), 0.0);
        spec.fixed.insert(format!("sigma_{i}"), 1.0);
    }
    spec.fixed.insert("beta_country_offset[C]".into(), 0.0);
    spec.fixed.insert("sigma_country".into(), 1.0);
}
