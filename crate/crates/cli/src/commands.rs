use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use seroifr_core::age_density::{dataset_densities, AgeDensity};
use seroifr_core::data::{crude_rates, load_dataset, write_dataset, DatasetPaths, StudyDataset};
use seroifr_core::diagnostics::{convergence_report, trace_file_name, write_diagnostics_csv, write_trace_csv, ConvergenceReport, Thresholds};
use seroifr_core::model::{Model, ParameterVector};
use seroifr_core::sampler::{diagnose_run, sample, PosteriorDraws};
use seroifr_core::summaries::*;
use seroifr_core::synthetic::{reference_truth, template, SyntheticDesign};

use crate::config::RunConfig;
use crate::{CliError, Common, EXIT_NOT_CONVERGED, EXIT_OK};

pub const DRAWS_FILE: &str = "draws.csv";
pub const STATS_FILE: &str = "sampler_stats.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const POPULATION_IFR_FILE: &str = "population_ifr.csv";
pub const AGE_IFR_FILE: &str = "age60_ifr.csv";
pub const ROGAN_GLADEN_FILE: &str = "rogan_gladen.csv";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const TRACE_DIR: &str = "traces";

const SUMMARY_AGE: f64 = 60.0;

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.out.is_some() {
        cfg.out_dir = common.out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Config("out_dir: required, set it in the config or pass --out".into()))?;
    fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn data_paths(cfg: &RunConfig) -> Result<DatasetPaths, CliError> {
    cfg.data
        .as_ref()
        .ok_or_else(|| CliError::Config("data: required for this command".into()))?
        .paths()
}

fn input_files(paths: &DatasetPaths) -> [&Path; 6] {
    [
        &paths.serology,
        &paths.deaths,
        &paths.tests,
        &paths.locations,
        &paths.population,
        &paths.national_population,
    ]
}

fn sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn fingerprints(paths: &[&Path]) -> Result<Vec<Value>, CliError> {
    paths
        .iter()
        .map(|p| Ok(json!({ "path": p, "sha256": sha256(p)? })))
        .collect()
}

fn write_manifest(dir: &Path, manifest: Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

fn manifest_base(command: &str, cfg: &RunConfig, seed: u64) -> Value {
    let mut resolved = cfg.clone();
    resolved.seed = Some(seed);
    json!({
        "command": command,
        "seroifr_version": seroifr_core::VERSION,
        "cli_version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": resolved,
    })
}

fn build_model(cfg: &RunConfig, ds: &StudyDataset) -> Result<Model, CliError> {
    let densities = dataset_densities(ds, cfg.loess_span)?;
    Ok(Model::new(ds, densities, cfg.model.clone())?)
}

/// Writes traces for every free parameter into `dir/traces`.
fn write_traces(draws: &PosteriorDraws, dir: &Path) -> Result<(), CliError> {
    let traces = dir.join(TRACE_DIR);
    fs::create_dir_all(&traces)?;
    for (k, name) in draws.names.iter().enumerate() {
        if !draws.fixed.get(k).copied().unwrap_or(false) {
            write_trace_csv(draws, k, &traces.join(trace_file_name(name)))?;
        }
    }
    Ok(())
}

fn report_convergence(report: &ConvergenceReport) {
    for g in &report.groups {
        eprintln!(
            "  {:<14} n={:<3} rhat [{:.4}, {:.4}]  ess [{:.0}, {:.0}]",
            g.group, g.count, g.rhat_min, g.rhat_max, g.ess_min, g.ess_max
        );
    }
    if report.pass {
        eprintln!("convergence: pass");
    } else {
        eprintln!("convergence: FAIL ({})", report.failing.join(", "));
    }
}

/// Writes the four summary tables and returns their file names.
fn write_summaries(model: &Model, draws: &PosteriorDraws, cfg: &RunConfig, dir: &Path) -> Result<Vec<&'static str>, CliError> {
    if draws.names != model.natural_names() {
        return Err(CliError::Run("draws do not match the model's parameters".into()));
    }
    let params = parameter_draws(draws, model.layout())?;
    let ds = model.dataset();
    let curves = model.curves();
    let mesh = model.mesh();
    let standard = standardized_density(model.densities())?;

    let mut curve_rows = Vec::new();
    let mut pop_rows = Vec::new();
    let mut age_rows = Vec::new();
    let mut rg_rows = Vec::new();
    for (l, loc) in ds.locations.iter().enumerate() {
        let id = loc.location_id.as_str();
        curve_rows.push(curve_summary(&params, curves, l, id, CurveKind::Sero)?);
        curve_rows.push(curve_summary(&params, curves, l, id, CurveKind::Ifr)?);
        let own: &AgeDensity = &model.densities()[l];
        for (f, mode) in [(own, DensityMode::OwnDistribution), (&standard, DensityMode::Standardized)] {
            pop_rows.push(population_ifr(&params, curves, l, id, f, mesh, mode, cfg.ifr_weighting)?);
        }
        age_rows.push(ifr_at_age(&params, curves, l, id, SUMMARY_AGE, cfg.benchmark_ifr_60)?);
        let test = ds
            .test_index(&loc.test_id)
            .map(|t| &ds.tests[t])
            .ok_or_else(|| CliError::Data(format!("unknown test `{}`", loc.test_id)))?;
        let (sens, spec) = crude_rates(test);
        for obs in &loc.serology {
            match rogan_gladen(obs, sens, spec) {
                Ok(estimate) => rg_rows.push(RoganGladenRow {
                    location_id: id.to_string(),
                    bin: obs.bin,
                    estimate,
                }),
                Err(e @ (SummaryError::DegenerateTest(_) | SummaryError::InvalidInput(_))) => {
                    eprintln!("warning: no Rogan-Gladen estimate for {id} bin {}: {e}", obs.bin);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    write_curves_csv(&curve_rows, &dir.join(CURVES_FILE))?;
    write_population_ifr_csv(&pop_rows, &dir.join(POPULATION_IFR_FILE))?;
    write_age_ifr_csv(&age_rows, &dir.join(AGE_IFR_FILE))?;
    write_rogan_gladen_csv(&rg_rows, &dir.join(ROGAN_GLADEN_FILE))?;
    Ok(vec![CURVES_FILE, POPULATION_IFR_FILE, AGE_IFR_FILE, ROGAN_GLADEN_FILE])
}

fn exit_for(pass: bool) -> u8 {
    if pass {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    }
}

pub fn fit(common: &Common) -> Result<u8, CliError> {
    let started = Instant::now();
    let cfg = load_config(common)?;
    let seed = cfg.seed()?;
    let paths = data_paths(&cfg)?;
    let dir = out_dir(&cfg)?;
    let ds = load_dataset(&paths)?;
    let model = build_model(&cfg, &ds)?;
    let sampler = cfg.sampler_config(seed);
    eprintln!(
        "fitting {} locations, {} free coordinates, {} chains x ({} + {})",
        ds.locations.len(),
        seroifr_core::sampler::Target::dim(&model),
        sampler.chains,
        sampler.warmup,
        sampler.samples
    );
    let draws = sample(&model, &sampler)?;

    draws.write_csv(&dir.join(DRAWS_FILE))?;
    draws.write_stats_csv(&dir.join(STATS_FILE))?;
    let report = convergence_report(&draws, cfg.thresholds)?;
    write_diagnostics_csv(&report, &dir.join(DIAGNOSTICS_FILE))?;
    write_traces(&draws, &dir)?;
    let mut outputs = vec![DRAWS_FILE, STATS_FILE, DIAGNOSTICS_FILE];
    outputs.extend(write_summaries(&model, &draws, &cfg, &dir)?);

    let run = if draws.n_chains() >= 2 {
        Some(diagnose_run(&draws, sampler.max_tree_depth)?)
    } else {
        None
    };
    if let Some(r) = &run {
        if r.total_divergences > 0 {
            eprintln!("warning: {} divergent transitions", r.total_divergences);
        }
    }
    report_convergence(&report);

    let fixed: Vec<&String> = draws.names.iter().zip(&draws.fixed).filter(|(_, f)| **f).map(|(n, _)| n).collect();
    let mut manifest = manifest_base("fit", &cfg, seed);
    manifest["inputs"] = json!(fingerprints(&input_files(&paths))?);
    manifest["outputs"] = json!(outputs);
    manifest["fixed_parameters"] = json!(fixed);
    manifest["convergence"] = json!({ "pass": report.pass, "failing": report.failing });
    manifest["sampler_report"] = json!(run);
    manifest["elapsed_seconds"] = json!(started.elapsed().as_secs_f64());
    write_manifest(&dir, manifest)?;
    Ok(exit_for(report.pass))
}

/// Reads the manifest next to a draws file, if any.
fn sibling_manifest(draws_path: &Path) -> Option<Value> {
    let dir = draws_path.parent()?;
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

fn draws_path(common: &Common, cfg: &RunConfig, draws: Option<&Path>) -> Result<PathBuf, CliError> {
    match draws {
        Some(p) => Ok(p.to_path_buf()),
        None => cfg
            .out_dir
            .as_ref()
            .or(common.out.as_ref())
            .map(|d| d.join(DRAWS_FILE))
            .ok_or_else(|| CliError::Config("no draws file: pass --draws or --out".into())),
    }
}

pub fn diagnose(common: &Common, draws: Option<&Path>) -> Result<u8, CliError> {
    let cfg = load_config(common)?;
    let path = draws_path(common, &cfg, draws)?;
    let manifest = sibling_manifest(&path);
    let thresholds: Thresholds = match (&common.config, &manifest) {
        (None, Some(m)) => serde_json::from_value(m["config"]["thresholds"].clone()).unwrap_or(cfg.thresholds),
        _ => cfg.thresholds,
    };
    let fixed_names: Vec<String> = manifest
        .as_ref()
        .and_then(|m| serde_json::from_value(m["fixed_parameters"].clone()).ok())
        .unwrap_or_default();

    let mut draws = PosteriorDraws::read_csv(&path, None)?;
    draws.fixed = draws.names.iter().map(|n| fixed_names.contains(n)).collect();
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    fs::create_dir_all(&dir)?;
    let report = convergence_report(&draws, thresholds)?;
    write_diagnostics_csv(&report, &dir.join(DIAGNOSTICS_FILE))?;
    write_traces(&draws, &dir)?;
    report_convergence(&report);
    Ok(exit_for(report.pass))
}

pub fn summarize(common: &Common, draws: Option<&Path>) -> Result<u8, CliError> {
    let cfg = load_config(common)?;
    let path = draws_path(common, &cfg, draws)?;
    let ds = load_dataset(&data_paths(&cfg)?)?;
    let model = build_model(&cfg, &ds)?;
    let mut draws = PosteriorDraws::read_csv(&path, None)?;
    draws.fixed = model.natural_fixed_mask();
    let dir = out_dir(&cfg)?;
    write_summaries(&model, &draws, &cfg, &dir)?;
    Ok(EXIT_OK)
}

pub fn simulate(common: &Common, truth: Option<&Path>) -> Result<u8, CliError> {
    let cfg = load_config(common)?;
    let seed = cfg.seed()?;
    let dir = out_dir(&cfg)?;
    let (tpl, inputs) = match &cfg.data {
        Some(d) => {
            let paths = d.paths()?;
            (load_dataset(&paths)?, input_files(&paths).map(Path::to_path_buf).to_vec())
        }
        None => (template(&cfg.synthetic.clone().unwrap_or_else(SyntheticDesign::default))?, Vec::new()),
    };
    let target = DatasetPaths::in_dir(&dir);
    for out in input_files(&target) {
        let clash = inputs
            .iter()
            .any(|i| fs::canonicalize(i).ok().zip(fs::canonicalize(out).ok()).is_some_and(|(a, b)| a == b));
        if clash {
            return Err(CliError::Config(format!("output {} would overwrite an input", out.display())));
        }
    }
    let model = build_model(&cfg, &tpl)?;
    let truth: ParameterVector = match truth {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => reference_truth(&model),
    };
    let ds = model.simulate(&truth, seed)?;
    write_dataset(&ds, &target)?;
    let mut text = serde_json::to_string_pretty(&truth)?;
    text.push('\n');
    fs::write(dir.join(TRUTH_FILE), text)?;

    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let mut manifest = manifest_base("simulate", &cfg, seed);
    manifest["inputs"] = json!(fingerprints(&inputs)?);
    manifest["outputs"] = json!(input_files(&target)
        .iter()
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()))
        .chain([TRUTH_FILE])
        .collect::<Vec<_>>());
    write_manifest(&dir, manifest)?;
    eprintln!("wrote synthetic dataset for {} locations to {}", ds.locations.len(), dir.display());
    Ok(EXIT_OK)
}
