//! Split R-hat, effective sample size, and convergence reports.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::PosteriorDraws;

/// ESS never exceeds this multiple of the total draw count.
pub const ESS_INFLATION_BOUND: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("all draws are identical")]
    ZeroVariance,
    #[error("at least one chain required")]
    NoChains,
    #[error("each chain needs at least 4 draws, got {0}")]
    TooShort(usize),
    #[error("chains have different lengths")]
    Ragged,
    #[error("no draws")]
    NoDraws,
    #[error("{0}")]
    Io(String),
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with `n - 1` denominator.
fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Each chain cut into its first and last `len / 2` draws.
fn split<'a>(chains: &'a [Vec<f64>]) -> Result<Vec<&'a [f64]>, DiagnosticsError> {
    let first = chains.first().ok_or(DiagnosticsError::NoChains)?;
    let n = first.len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(DiagnosticsError::Ragged);
    }
    if n < 4 {
        return Err(DiagnosticsError::TooShort(n));
    }
    let half = n / 2;
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        out.push(&c[..half]);
        out.push(&c[n - half..]);
    }
    let v0 = first[0];
    if chains.iter().flatten().all(|&v| v == v0) {
        return Err(DiagnosticsError::ZeroVariance);
    }
    Ok(out)
}

/// Split R-hat over the half-chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    let halves = split(chains)?;
    let n = halves[0].len() as f64;
    let w = halves.iter().map(|h| variance(h)).sum::<f64>() / halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let b = n * variance(&means);
    if w == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((((n - 1.0) / n * w + b / n) / w).sqrt())
}

/// Autocovariance at lag `t`, `1/n` normalization.
fn autocov(x: &[f64], m: f64, t: usize) -> f64 {
    let n = x.len();
    (0..n - t).map(|i| (x[i] - m) * (x[i + t] - m)).sum::<f64>() / n as f64
}

/// Effective sample size over split chains, with Geyer's initial monotone
/// sequence truncation.
pub fn ess(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    let halves = split(chains)?;
    let m = halves.len();
    let n = halves[0].len();
    let nf = n as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let acov0: Vec<f64> = halves.iter().zip(&means).map(|(h, &mu)| autocov(h, mu, 0)).collect();
    let mean_var = acov0.iter().map(|a| a * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += variance(&means);
    }
    if var_plus == 0.0 {
        return Err(DiagnosticsError::ZeroVariance);
    }
    let rho_at = |t: usize| {
        let a = halves
            .iter()
            .zip(&means)
            .map(|(h, &mu)| autocov(h, mu, t))
            .sum::<f64>()
            / m as f64;
        1.0 - (mean_var - a) / var_plus
    };

    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho_at(1);
    rho[1] = odd;
    let mut t = 1;
    while t + 5 < n && even + odd > 0.0 {
        even = rho_at(t + 1);
        odd = rho_at(t + 2);
        if even + odd >= 0.0 {
            rho[t + 1] = even;
            rho[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 {
        rho[max_t + 1] = even;
    }
    // Initial monotone sequence.
    let mut t = 1;
    while t + 2 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            let avg = 0.5 * (rho[t - 1] + rho[t]);
            rho[t + 1] = avg;
            rho[t + 2] = avg;
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let mut tau = -1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t + 1];
    tau = tau.max(1.0 / total.log10()).max(1.0 / ESS_INFLATION_BOUND);
    Ok(total / tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub rhat_max: f64,
    pub ess_min: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            rhat_max: 1.01,
            ess_min: 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDiagnostic {
    pub name: String,
    pub group: String,
    /// `None` when the draws have zero variance.
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
    pub fixed: bool,
}

impl ParameterDiagnostic {
    pub fn passes(&self, th: &Thresholds) -> bool {
        if self.fixed {
            return true;
        }
        match (self.rhat, self.ess) {
            (Some(r), Some(e)) => r <= th.rhat_max && e >= th.ess_min,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRange {
    pub group: String,
    pub count: usize,
    pub rhat_min: f64,
    pub rhat_max: f64,
    pub ess_min: f64,
    pub ess_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub thresholds: Thresholds,
    pub parameters: Vec<ParameterDiagnostic>,
    /// Ranges over free parameters with finite diagnostics.
    pub groups: Vec<GroupRange>,
    pub pass: bool,
    /// Free parameters that miss a threshold or have zero variance.
    pub failing: Vec<String>,
}

/// Parameter family from a name such as `beta_2[loc]` or `sigma_country`.
pub fn group_of(name: &str) -> &'static str {
    let base = name.split('[').next().unwrap_or(name);
    let stem = base.trim_end_matches(|c: char| c.is_ascii_digit());
    match stem {
        "gamma_" => "gamma",
        "beta_" | "beta_offset_" => "beta",
        "beta_global_" => "beta_global",
        "beta_country" | "beta_country_offset" => "beta_country",
        "sigma_" => "sigma",
        "sigma_country" => "sigma_country",
        "sens" => "sens",
        "spec" => "spec",
        _ => "other",
    }
}

pub fn convergence_report(draws: &PosteriorDraws, thresholds: Thresholds) -> Result<ConvergenceReport, DiagnosticsError> {
    if draws.n_chains() == 0 || draws.n_samples() == 0 {
        return Err(DiagnosticsError::NoDraws);
    }
    let mut parameters = Vec::with_capacity(draws.names.len());
    for (k, name) in draws.names.iter().enumerate() {
        let chains = draws.chains_of(k);
        let fixed = draws.fixed.get(k).copied().unwrap_or(false);
        let (rhat, ess) = match (split_rhat(&chains), ess(&chains)) {
            (Ok(r), Ok(e)) => (Some(r), Some(e)),
            (Err(DiagnosticsError::ZeroVariance), _) | (_, Err(DiagnosticsError::ZeroVariance)) => (None, None),
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        parameters.push(ParameterDiagnostic {
            name: name.clone(),
            group: group_of(name).to_string(),
            rhat,
            ess,
            fixed,
        });
    }
    let mut groups: Vec<GroupRange> = Vec::new();
    for p in parameters.iter().filter(|p| !p.fixed) {
        let (Some(r), Some(e)) = (p.rhat, p.ess) else { continue };
        match groups.iter_mut().find(|g| g.group == p.group) {
            Some(g) => {
                g.count += 1;
                g.rhat_min = g.rhat_min.min(r);
                g.rhat_max = g.rhat_max.max(r);
                g.ess_min = g.ess_min.min(e);
                g.ess_max = g.ess_max.max(e);
            }
            None => groups.push(GroupRange {
                group: p.group.clone(),
                count: 1,
                rhat_min: r,
                rhat_max: r,
                ess_min: e,
                ess_max: e,
            }),
        }
    }
    let failing: Vec<String> = parameters
        .iter()
        .filter(|p| !p.passes(&thresholds))
        .map(|p| p.name.clone())
        .collect();
    Ok(ConvergenceReport {
        thresholds,
        pass: failing.is_empty(),
        parameters,
        groups,
        failing,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:?}"))
}

/// `diagnostics.csv`: parameter, rhat, ess, group.
pub fn write_diagnostics_csv(report: &ConvergenceReport, path: &Path) -> Result<(), DiagnosticsError> {
    let mut out = String::from("parameter,rhat,ess,group\n");
    for p in &report.parameters {
        out.push_str(&format!("{},{},{},{}\n", p.name, fmt_opt(p.rhat), fmt_opt(p.ess), p.group));
    }
    std::fs::write(path, out).map_err(|e| DiagnosticsError::Io(format!("{}: {e}", path.display())))
}

/// `trace_<param>.csv`: chain, iteration, value.
pub fn write_trace_csv(draws: &PosteriorDraws, k: usize, path: &Path) -> Result<(), DiagnosticsError> {
    let mut out = String::from("chain,iteration,value\n");
    for (c, chain) in draws.chains_of(k).iter().enumerate() {
        for (i, v) in chain.iter().enumerate() {
            out.push_str(&format!("{c},{i},{v:?}\n"));
        }
    }
    std::fs::write(path, out).map_err(|e| DiagnosticsError::Io(format!("{}: {e}", path.display())))
}

/// File-system-safe version of a parameter name for trace exports.
pub fn trace_file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("trace_{safe}.csv")
}
