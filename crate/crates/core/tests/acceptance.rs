//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion, then a
//! summary. Exits nonzero on any FAIL only when `SEROIFR_ACCEPTANCE_STRICT`
//! is set, so the workspace test run records failures without aborting.
//!
//! Criterion 12 needs the public dataset: point `SEROIFR_DATASET_DIR` at a
//! directory holding the six input tables.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{Beta, ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use common::{finite_difference, max_relative_error, model_for, pin_ifr, random_points, single_location, three_location};
use seroifr_core::age_density::{dataset_densities, expand_step, location_step, refine_with_national, DEFAULT_LOESS_SPAN};
use seroifr_core::data::{load_dataset, AgeBin, DatasetPaths, DeathBinObs, LocationRecord, SerologyBinObs, StudyDataset};
use seroifr_core::diagnostics::{convergence_report, ess, split_rhat, Thresholds};
use seroifr_core::model::*;
use seroifr_core::quadrature::QuadratureMesh;
use seroifr_core::sampler::{sample, PosteriorDraws, SamplerConfig};
use seroifr_core::summaries::{quantile_sorted, rogan_gladen_rate};
use seroifr_core::synthetic::{simulated_model, template, SyntheticDesign};

enum Outcome {
    Pass,
    Fail,
    Skip,
}

struct Suite {
    results: Vec<(usize, Outcome)>,
}

impl Suite {
    fn record(&mut self, id: usize, name: &str, ok: bool, detail: String) {
        let tag = if ok { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2} {name}: {detail}");
        self.results.push((id, if ok { Outcome::Pass } else { Outcome::Fail }));
    }

    fn skip(&mut self, id: usize, name: &str, why: &str) {
        println!("[SKIP] {id:>2} {name}: {why}");
        self.results.push((id, Outcome::Skip));
    }
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gradient(s: &mut Suite) {
    let start = Instant::now();
    let (model, truth) = three_location(ModelSpec::default(), 4);
    let mut worst: f64 = 0.0;
    for u in random_points(&model, &truth, 20, 0.1, 5) {
        let g = model.log_posterior(&u).unwrap().gradient;
        worst = worst.max(max_relative_error(&g, &finite_difference(&model, &u, 1e-5)));
    }
    let t = start.elapsed();
    s.record(
        1,
        "gradient vs central differences",
        worst < 1e-6 && t < Duration::from_secs(60),
        format!("max rel err {worst:.2e} (< 1e-6) over 20 points, {:.1} s (< 60 s)", secs(t)),
    );
}

fn prior_quantiles(s: &mut Suite) {
    let spec_tail = 1.0 - Beta::new(50.0, 1.0).unwrap().cdf(0.95);
    let sens_tail = 1.0 - Beta::new(10.0, 1.0).unwrap().cdf(0.79);
    let closed = (1.0 - 0.95f64.powi(50), 1.0 - 0.79f64.powi(10));
    let tails_ok = (spec_tail - 0.9231).abs() < 5e-5
        && (sens_tail - 0.9053).abs() < 5e-5
        && (spec_tail - closed.0).abs() < 1e-12
        && (sens_tail - closed.1).abs() < 1e-12;

    let mut worst: f64 = 0.0;
    let ln_beta = |a: f64, b: f64| ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    for i in 1..100 {
        let x = i as f64 / 100.0;
        for (a, b) in [(50.0, 1.0), (10.0, 1.0), (2.5, 3.5)] {
            let want = (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b);
            worst = worst.max((beta_lpdf(x, a, b) - want).abs());
        }
        let z = 10.0 * x - 5.0;
        for (m, sd) in [(-1.0, 1.5), (0.0, 0.05), (0.0, 5.0)] {
            let want = -0.5 * ((z - m) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            worst = worst.max((normal_lpdf(z, m, sd) - want).abs());
        }
        let y = 5.0 * x;
        let want = (2.0 / std::f64::consts::PI).sqrt().ln() - 2f64.ln() - y * y / 8.0;
        worst = worst.max((half_normal_lpdf(y, 2.0) - want).abs());
    }
    s.record(
        2,
        "prior tail probabilities and log densities",
        tails_ok && worst < 1e-10,
        format!(
            "P(Beta(50,1) > 0.95) = {spec_tail:.4}, P(Beta(10,1) > 0.79) = {sens_tail:.4}, max lpdf err {worst:.1e}"
        ),
    );
}

fn intercept_anchors(s: &mut Suite) {
    let (model, truth) = three_location(ModelSpec::default(), 4);
    let CoefPrior::Normal { mean, sd } = model.spec().priors.gamma_intercept else {
        unreachable!()
    };
    let prior = Normal::new(mean, sd).unwrap();
    let at = |g0: f64| {
        let mut p = truth.clone();
        p.gamma[0] = vec![g0; 1].into_iter().chain(vec![0.0; model.layout().p]).collect();
        // Zero spline coefficients give a flat curve; read it at several ages.
        let v: Vec<f64> = [5.0, 40.0, 90.0].iter().map(|&a| prevalence_curve(model.curves(), &p, 0, a)).collect();
        (v[0], v.iter().all(|x| (x - v[0]).abs() < 1e-15))
    };
    let (median, flat1) = at(prior.inverse_cdf(0.5));
    let (q95, flat2) = at(prior.inverse_cdf(0.95));
    s.record(
        3,
        "intercept prior anchors",
        (median - 0.2689).abs() < 1e-4 && (q95 - 0.813).abs() < 1e-3 && flat1 && flat2,
        format!("median prevalence {median:.4} (0.2689 +- 1e-4), 95th percentile {q95:.4} (0.813 +- 1e-3)"),
    );
}

/// Monte Carlo standard error of a sample sd given the target's sd and
/// excess kurtosis.
fn sd_mcse(sd: f64, excess_kurtosis: f64, n_eff: f64) -> f64 {
    sd * ((excess_kurtosis + 2.0) / (4.0 * n_eff)).sqrt()
}

fn conjugate_serology(s: &mut Suite) {
    let start = Instant::now();
    let (n, r) = (200u64, 47u64);
    let bin = AgeBin::open(0).unwrap();
    let ds = single_location(vec![SerologyBinObs { bin, n_tested: n, n_positive: r }], vec![], (50, 45, 50, 49));
    let mut spec = ModelSpec::default();
    spec.priors.gamma_intercept = CoefPrior::FlatOnProbability;
    spec.fixed.insert("sens[t]".into(), 1.0);
    spec.fixed.insert("spec[t]".into(), 1.0);
    spec.fixed.insert("gamma_1[L]".into(), 0.0);
    spec.fixed.insert("gamma_2[L]".into(), 0.0);
    pin_ifr(&mut spec, &[-5.0, 0.0, 0.0, 0.0]);
    let model = model_for(&ds, spec);
    assert_eq!(seroifr_core::sampler::Target::dim(&model), 1);
    let config = SamplerConfig {
        chains: 4,
        warmup: 1000,
        samples: 2500,
        ..SamplerConfig::with_seed(31)
    };
    let draws = sample(&model, &config).unwrap();
    let k = draws.param_index("gamma_0[L]").unwrap();
    let pi_chains: Vec<Vec<f64>> = draws.chains_of(k).iter().map(|c| c.iter().map(|&g| inv_logit(g)).collect()).collect();
    let n_eff = ess(&pi_chains).unwrap();
    let (m, sd) = mean_sd(&pi_chains.concat());

    let (a, b) = ((r + 1) as f64, (n - r + 1) as f64);
    let want_m = a / (a + b);
    let want_sd = (a * b / ((a + b).powi(2) * (a + b + 1.0))).sqrt();
    let kurt = 6.0 * ((a - b).powi(2) * (a + b + 1.0) - a * b * (a + b + 2.0)) / (a * b * (a + b + 2.0) * (a + b + 3.0));
    let se_m = want_sd / n_eff.sqrt();
    let se_sd = sd_mcse(want_sd, kurt, n_eff);
    let t = start.elapsed();
    let ok = (m - want_m).abs() < 3.0 * se_m && (sd - want_sd).abs() < 3.0 * se_sd && n_eff >= 2000.0 && t < Duration::from_secs(120);
    s.record(
        4,
        "conjugate serology posterior",
        ok,
        format!(
            "mean {m:.5} vs {want_m:.5} (z = {:.2}), sd {sd:.5} vs {want_sd:.5} (z = {:.2}), ESS {n_eff:.0}, {:.1} s",
            (m - want_m) / se_m,
            (sd - want_sd) / se_sd,
            secs(t)
        ),
    );
}

fn conjugate_deaths(s: &mut Suite) {
    let d = 150u64;
    let bin = AgeBin::open(0).unwrap();
    let ds = single_location(vec![], vec![DeathBinObs { bin, deaths: d }], (50, 45, 50, 49));
    let mut spec = ModelSpec::default();
    spec.priors.beta_global = CoefPrior::FlatOnRate;
    spec.fixed.insert("gamma_0[L]".into(), logit(0.3));
    spec.fixed.insert("gamma_1[L]".into(), 0.0);
    spec.fixed.insert("gamma_2[L]".into(), 0.0);
    spec.fixed.insert("sens[t]".into(), 0.9);
    spec.fixed.insert("spec[t]".into(), 0.99);
    pin_ifr(&mut spec, &[0.0, 0.0, 0.0, 0.0]);
    spec.fixed.remove("beta_global_0");
    let model = model_for(&ds, spec);
    assert_eq!(seroifr_core::sampler::Target::dim(&model), 1);
    let population = model.death_bin_population(0, 0);

    let config = SamplerConfig {
        chains: 4,
        warmup: 1000,
        samples: 2500,
        ..SamplerConfig::with_seed(32)
    };
    let draws = sample(&model, &config).unwrap();
    let k = draws.param_index("beta_global_0").unwrap();
    let rate: Vec<Vec<f64>> = draws.chains_of(k).iter().map(|c| c.iter().map(|b| b.exp()).collect()).collect();
    let n_eff = ess(&rate).unwrap();
    let (m, sd) = mean_sd(&rate.concat());
    let shape = (d + 1) as f64;
    let scale = 1.0 / (0.3 * population);
    let want_m = shape * scale;
    let want_sd = shape.sqrt() * scale;
    let se_m = want_sd / n_eff.sqrt();
    let se_sd = sd_mcse(want_sd, 6.0 / shape, n_eff);
    s.record(
        5,
        "conjugate death posterior",
        (m - want_m).abs() < 3.0 * se_m && (sd - want_sd).abs() < 3.0 * se_sd,
        format!(
            "mean {m:.4e} vs {want_m:.4e} (z = {:.2}), sd {sd:.3e} vs {want_sd:.3e} (z = {:.2}), ESS {n_eff:.0}",
            (m - want_m) / se_m,
            (sd - want_sd) / se_sd
        ),
    );
}

fn interval(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    (quantile_sorted(&v, 0.025), quantile_sorted(&v, 0.975))
}

fn recovery(s: &mut Suite) {
    const REPLICATES: u64 = 20;
    let start = Instant::now();
    let mut covered: BTreeMap<String, usize> = BTreeMap::new();
    let mut worst_rhat: f64 = 0.0;
    let mut worst_ess = f64::INFINITY;
    let mut converged = 0;
    let mut errors = Vec::new();
    for rep in 1..=REPLICATES {
        let t = Instant::now();
        let (model, truth) = simulated_model(&SyntheticDesign::default(), ModelSpec::default(), rep).unwrap();
        let draws: PosteriorDraws = match sample(&model, &SamplerConfig::with_seed(1000 + rep)) {
            Ok(d) => d,
            Err(e) => {
                errors.push(format!("replicate {rep}: {e}"));
                continue;
            }
        };
        let flat = truth.to_flat();
        for (k, name) in draws.names.iter().enumerate() {
            if !(name.starts_with("gamma_0[") || name.starts_with("beta_0[")) {
                continue;
            }
            let (lo, hi) = interval(&draws.chains_of(k).concat());
            *covered.entry(name.clone()).or_default() += usize::from(lo <= flat[k] && flat[k] <= hi);
        }
        let report = convergence_report(&draws, Thresholds::default()).unwrap();
        converged += usize::from(report.pass);
        for p in report.parameters.iter().filter(|p| !p.fixed) {
            worst_rhat = worst_rhat.max(p.rhat.unwrap_or(f64::INFINITY));
            worst_ess = worst_ess.min(p.ess.unwrap_or(0.0));
        }
        eprintln!(
            "  replicate {rep:>2}: {:.0} s, rhat max {worst_rhat:.4}, ess min {worst_ess:.0} (running)",
            secs(t.elapsed())
        );
    }
    let t = start.elapsed();
    let min_cover = covered.values().copied().min().unwrap_or(0);
    let detail: Vec<String> = covered.iter().map(|(k, v)| format!("{k} {v}")).collect();
    s.record(
        6,
        "parameter recovery coverage",
        errors.is_empty() && min_cover >= 17,
        format!("95% intervals covering truth out of {REPLICATES}: {}; {}", detail.join(", "), errors.join("; ")),
    );
    s.record(
        6,
        "parameter recovery runtime",
        t < Duration::from_secs(3600),
        format!("{REPLICATES} default fits in {:.1} min (< 60 min)", t.as_secs_f64() / 60.0),
    );
    s.record(
        7,
        "convergence under default settings",
        errors.is_empty() && converged == REPLICATES as usize,
        format!(
            "{converged}/{REPLICATES} fits pass; worst rhat {worst_rhat:.4} (<= 1.01), worst ESS {worst_ess:.0} (>= 1000)"
        ),
    );
}

fn rogan_gladen_inversion(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < 1000 {
        let (pi, sens, spec): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        if sens + spec <= 1.05 {
            continue;
        }
        let back = rogan_gladen_rate(positivity(pi, sens, spec), sens, spec).unwrap();
        worst = worst.max((back - pi).abs());
        n += 1;
    }
    s.record(8, "Rogan-Gladen inverts positivity", worst < 1e-12, format!("max error {worst:.1e} over 1000 triples"));
}

fn quadrature(s: &mut Suite) {
    let bin = AgeBin::span(0, 10).unwrap();
    let f = seroifr_core::age_density::AgeDensity::uniform();
    let exact = 100.0 / 3.0;
    let err = |h: f64| (bin_average(|a| a * a, &f, &bin, &QuadratureMesh::new(h).unwrap()).unwrap() - exact).abs();
    let (e1, e2) = (err(0.25), err(0.125));
    s.record(
        9,
        "quadrature accuracy",
        e1 < 0.01 && e1 / e2 >= 3.5,
        format!(
            "bin average of a^2 on [0,10) at step 0.25 off by {e1:.5} (< 0.01; relative {:.1e}), halving step cuts error {:.2}x (>= 3.5)",
            e1 / exact,
            e1 / e2
        ),
    );
}

/// Dataset whose local bins are coarser than five years, so every
/// location goes through national refinement.
fn coarse_dataset() -> StudyDataset {
    let base = template(&SyntheticDesign {
        n_locations: 4,
        ..SyntheticDesign::default()
    })
    .unwrap();
    let cuts = [0u32, 18, 30, 45, 65, 80, 100];
    let mut locations = base.locations.clone();
    for loc in &mut locations {
        let fine = loc.population_bins.clone();
        loc.population_bins = cuts
            .windows(2)
            .map(|w| {
                let bin = AgeBin::span(w[0], w[1]).unwrap();
                let count = fine.iter().filter(|(b, _)| b.lo() >= w[0] && b.hi() < w[1]).map(|b| b.1).sum();
                (bin, count)
            })
            .collect();
    }
    StudyDataset::new(locations, base.tests.clone(), base.national_populations.clone()).unwrap()
}

fn density_pipeline(s: &mut Suite) {
    let mut datasets = vec![
        template(&SyntheticDesign::default()).unwrap(),
        template(&SyntheticDesign {
            n_locations: 8,
            ..SyntheticDesign::default()
        })
        .unwrap(),
        coarse_dataset(),
    ];
    if let Ok(dir) = std::env::var("SEROIFR_DATASET_DIR") {
        if let Ok(ds) = load_dataset(&DatasetPaths::in_dir(dir)) {
            datasets.push(ds);
        }
    }
    let (mut worst_norm, mut min_value, mut worst_expand, mut worst_refine) = (0f64, f64::INFINITY, 0f64, 0f64);
    let mut n_locations = 0;
    for ds in &datasets {
        let densities = dataset_densities(ds, DEFAULT_LOESS_SPAN).unwrap();
        for (loc, f) in ds.locations.iter().zip(&densities) {
            n_locations += 1;
            worst_norm = worst_norm.max((f.integral() - 1.0).abs());
            min_value = min_value.min(f.values().iter().copied().fold(f64::INFINITY, f64::min));
            let local = loc.population_proportions();
            let step = expand_step(&local).unwrap();
            for (b, p) in &local {
                worst_expand = worst_expand.max((step.mass(b.start(), b.end()) - p).abs());
            }
            let national = national_step(ds, loc);
            let refined = refine_with_national(&local, &national).unwrap();
            for (b, p) in &local {
                let mass = if b.width() <= 5.0 {
                    refined.mass(b.start(), b.end())
                } else {
                    b.integer_ages().map(|a| refined.eval(f64::from(a))).sum()
                };
                worst_refine = worst_refine.max((mass - p).abs());
            }
            // The pipeline's own step must agree with the refinement above.
            let pipeline = location_step(loc, &ds.national_populations[&loc.country_id]).unwrap();
            if local.iter().any(|b| b.0.width() > 5.0) {
                worst_refine = worst_refine.max(max_step_gap(&pipeline, &refined));
            }
        }
    }
    s.record(
        10,
        "age density pipeline",
        worst_norm <= 1e-6 && min_value >= 0.0 && worst_expand <= 1e-12 && worst_refine <= 1e-12,
        format!(
            "{n_locations} locations: |integral - 1| <= {worst_norm:.1e}, min value {min_value:.2e}, expand identity {worst_expand:.1e}, refine identity {worst_refine:.1e}"
        ),
    );
}

fn national_step(ds: &StudyDataset, loc: &LocationRecord) -> seroifr_core::age_density::StepDensity {
    let bins = &ds.national_populations[&loc.country_id];
    let total: f64 = bins.iter().map(|b| b.1).sum();
    expand_step(&bins.iter().map(|&(b, c)| (b, c / total)).collect::<Vec<_>>()).unwrap()
}

fn max_step_gap(a: &seroifr_core::age_density::StepDensity, b: &seroifr_core::age_density::StepDensity) -> f64 {
    (0..400).map(|i| (a.eval(i as f64 / 4.0 + 0.1) - b.eval(i as f64 / 4.0 + 0.1)).abs()).fold(0.0, f64::max)
}

fn normals(rng: &mut ChaCha8Rng, n: usize, mean: f64) -> Vec<f64> {
    (0..n).map(|_| mean + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect()
}

fn diagnostics_oracles(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let iid: Vec<Vec<f64>> = (0..3).map(|_| normals(&mut rng, 3000, 0.0)).collect();
    let iid_ratio = ess(&iid).unwrap() / 9000.0;

    let n = 20_000;
    let rho: f64 = 0.9;
    let mut x = normals(&mut rng, 1, 0.0)[0] / (1.0 - rho * rho).sqrt();
    let ar: Vec<f64> = normals(&mut rng, n, 0.0)
        .into_iter()
        .map(|e| {
            x = rho * x + e;
            x
        })
        .collect();
    let ar_ratio = ess(&[ar]).unwrap() / (n as f64 * (1.0 - rho) / (1.0 + rho));

    let split = vec![normals(&mut rng, 1000, 0.0), normals(&mut rng, 1000, 5.0)];
    let r = split_rhat(&split).unwrap();
    s.record(
        11,
        "diagnostics oracles",
        (iid_ratio - 1.0).abs() <= 0.25 && (ar_ratio - 1.0).abs() <= 0.30 && r > 2.0,
        format!("iid ESS/nominal {iid_ratio:.3}, AR(1) ESS/analytic {ar_ratio:.3}, two-mean rhat {r:.2}"),
    );
}

fn full_data(s: &mut Suite) {
    let Ok(dir) = std::env::var("SEROIFR_DATASET_DIR") else {
        s.skip(12, "full dataset check", "SEROIFR_DATASET_DIR not set");
        return;
    };
    let start = Instant::now();
    let ds = match load_dataset(&DatasetPaths::in_dir(&dir)) {
        Ok(ds) => ds,
        Err(e) => {
            s.record(12, "full dataset check", false, format!("could not load {dir}: {e}"));
            return;
        }
    };
    let densities = dataset_densities(&ds, DEFAULT_LOESS_SPAN).unwrap();
    let model = Model::new(&ds, densities, ModelSpec::default()).unwrap();
    let draws = match sample(&model, &SamplerConfig::with_seed(2020)) {
        Ok(d) => d,
        Err(e) => {
            s.record(12, "full dataset check", false, format!("sampling failed: {e}"));
            return;
        }
    };
    let params: Vec<ParameterVector> = draws
        .pooled()
        .map(|d| ParameterVector::from_flat(model.layout(), d).unwrap())
        .collect();
    let mut falling = Vec::new();
    for (l, loc) in ds.locations.iter().enumerate() {
        let slope = |p: &ParameterVector| {
            let c = model.curves();
            (c.log_ifr(p, l, 80.0) - c.log_ifr(p, l, 30.0)) / 50.0
        };
        let increasing = (30..80).all(|a| {
            let mean = |age: f64| params.iter().map(|p| model.curves().log_ifr(p, l, age)).sum::<f64>();
            mean(f64::from(a) + 1.0) > mean(f64::from(a))
        });
        let avg_slope = params.iter().map(slope).sum::<f64>() / params.len() as f64;
        if !(increasing && avg_slope > 0.0) {
            falling.push(loc.location_id.clone());
        }
    }
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    s.record(
        12,
        "full dataset check",
        falling.is_empty() && minutes <= 4.0 * 129.0,
        format!(
            "{} locations, posterior-mean log IFR not increasing on 30-80 for [{}], {minutes:.1} min (<= 516 min)",
            ds.locations.len(),
            falling.join(", ")
        ),
    );
}

fn main() {
    let start = Instant::now();
    let mut s = Suite { results: Vec::new() };
    gradient(&mut s);
    prior_quantiles(&mut s);
    intercept_anchors(&mut s);
    conjugate_serology(&mut s);
    conjugate_deaths(&mut s);
    rogan_gladen_inversion(&mut s);
    quadrature(&mut s);
    density_pipeline(&mut s);
    diagnostics_oracles(&mut s);
    recovery(&mut s);
    full_data(&mut s);

    let count = |f: fn(&Outcome) -> bool| s.results.iter().filter(|r| f(&r.1)).count();
    let (pass, fail, skip) = (
        count(|o| matches!(o, Outcome::Pass)),
        count(|o| matches!(o, Outcome::Fail)),
        count(|o| matches!(o, Outcome::Skip)),
    );
    println!(
        "acceptance: {pass} passed, {fail} failed, {skip} skipped in {:.1} min",
        start.elapsed().as_secs_f64() / 60.0
    );
    if fail > 0 && std::env::var_os("SEROIFR_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
