//! Convergence diagnostics and posterior summaries: split-chain potential
//! scale reduction, autocorrelation-based effective sample size with Geyer
//! initial-positive-sequence truncation, per-parameter summary tables,
//! posterior predictive checks, and trace/density exports.
//!
//! The convergence verdict is exactly: zero post-warmup divergences and
//! every parameter's split R-hat under 1.1. Tree-depth saturation is
//! reported but does not fail the verdict.

use crate::design::DesignMatrices;
use crate::posterior::Posterior;
use crate::sampler::PosteriorDraws;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// R-hat threshold for the convergence verdict.
pub const RHAT_THRESHOLD: f64 = 1.1;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("diagnostics: need at least 2 chains, got {0}")]
    TooFewChains(usize),
    #[error("diagnostics: need at least {need} draws per half-chain, got {got}")]
    TooFewDraws { need: usize, got: usize },
    #[error("diagnostics: no draws to summarize")]
    Empty,
}

/// Split every chain in half (dropping a middle element on odd lengths).
fn split_halves(series: &[Vec<f64>]) -> Vec<&[f64]> {
    let mut halves = Vec::with_capacity(series.len() * 2);
    for chain in series {
        let half = chain.len() / 2;
        halves.push(&chain[..half]);
        halves.push(&chain[chain.len() - half..]);
    }
    halves
}

fn validate(series: &[Vec<f64>]) -> Result<(), DiagnosticsError> {
    if series.len() < 2 {
        return Err(DiagnosticsError::TooFewChains(series.len()));
    }
    let half = series.iter().map(|c| c.len() / 2).min().unwrap_or(0);
    if half < 4 {
        return Err(DiagnosticsError::TooFewDraws { need: 4, got: half });
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Split-chain potential scale reduction (Gelman-Rubin). Returns `NaN` for
/// a constant parameter; callers report that as a warning and exclude the
/// parameter from the verdict.
pub fn split_rhat(series: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    validate(series)?;
    let halves = split_halves(series);
    let n = halves.iter().map(|h| h.len()).min().unwrap();
    let halves: Vec<&[f64]> = halves.iter().map(|h| &h[..n]).collect();
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let vars: Vec<f64> = halves.iter().map(|h| sample_var(h)).collect();
    let w = mean(&vars);
    if w <= 0.0 {
        return Ok(f64::NAN);
    }
    let b_over_n = sample_var(&means);
    let var_plus = w * (n as f64 - 1.0) / n as f64 + b_over_n;
    Ok((var_plus / w).sqrt())
}

/// Biased (1/n) autocovariance of one sequence at lag `t`.
fn autocov(xs: &[f64], m: f64, t: usize) -> f64 {
    let n = xs.len();
    let mut s = 0.0;
    for i in 0..n - t {
        s += (xs[i] - m) * (xs[i + t] - m);
    }
    s / n as f64
}

/// Effective sample size: split chains, combined autocorrelations, Geyer
/// initial positive sequence made monotone. Returns `NaN` for a constant
/// parameter.
pub fn effective_sample_size(series: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    validate(series)?;
    let halves = split_halves(series);
    let n = halves.iter().map(|h| h.len()).min().unwrap();
    let halves: Vec<&[f64]> = halves.iter().map(|h| &h[..n]).collect();
    let m = halves.len();
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let vars: Vec<f64> = halves.iter().map(|h| sample_var(h)).collect();
    let w = mean(&vars);
    if w <= 0.0 {
        return Ok(f64::NAN);
    }
    let var_plus = w * (n as f64 - 1.0) / n as f64 + sample_var(&means);

    let mean_acov = |t: usize| -> f64 {
        let mut s = 0.0;
        for (h, mu) in halves.iter().zip(&means) {
            s += autocov(h, *mu, t);
        }
        s / m as f64
    };

    let rho = |t: usize| -> f64 { 1.0 - (w - mean_acov(t)) / var_plus };

    // Geyer: sum consecutive pairs while positive, enforcing monotonicity
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0usize;
    while t + 1 < n {
        let pair = rho(t) + rho(t + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        prev_pair = pair;
        tau += 2.0 * pair;
        t += 2;
    }
    let total = (m * n) as f64;
    Ok((total / tau.max(1e-10)).min(total * 10.0))
}

/// Type-7 quantile (linear interpolation of order statistics) of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// One row of the fit summary, on the constrained scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub q2_5: f64,
    pub q97_5: f64,
    pub ess: f64,
    pub rhat: f64,
    pub constant: bool,
}

/// Per-parameter summaries plus the run-level convergence verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub parameters: Vec<ParamSummary>,
    /// Fixed effects re-expressed per natural covariate unit (standardized
    /// coefficient divided by twice the raw SD); factor contrasts pass
    /// through unchanged.
    pub natural_scale: Vec<ParamSummary>,
    pub divergent: usize,
    pub treedepth_saturation: usize,
    pub verdict_pass: bool,
    pub warnings: Vec<String>,
}

/// Summarize draws on the constrained scale. `natural_divisors`, when
/// given, must align with the design's X columns and produces the second,
/// natural-unit table for the fixed effects.
pub fn summarize(
    draws: &PosteriorDraws,
    posterior: &Posterior,
    natural_divisors: Option<&[f64]>,
) -> Result<FitSummary, DiagnosticsError> {
    if draws.chains.is_empty() || draws.draws_per_chain() == 0 {
        return Err(DiagnosticsError::Empty);
    }
    let names = posterior.constrained_names();
    let n_params = names.len();
    // constrained series per parameter per chain
    let mut series: Vec<Vec<Vec<f64>>> =
        vec![vec![Vec::with_capacity(draws.draws_per_chain()); draws.chains.len()]; n_params];
    for (c, chain) in draws.chains.iter().enumerate() {
        for draw in &chain.draws {
            let row = posterior.constrained_row(draw);
            for (k, v) in row.into_iter().enumerate() {
                series[k][c].push(v);
            }
        }
    }

    let mut parameters = Vec::with_capacity(n_params);
    let mut warnings = Vec::new();
    for (k, name) in names.iter().enumerate() {
        parameters.push(summarize_one(name, &series[k], &mut warnings)?);
    }

    let mut natural_scale = Vec::new();
    if let Some(div) = natural_divisors {
        // beta0 passes through; beta[j] divides by its column divisor
        natural_scale.push(ParamSummary {
            name: "beta0".to_string(),
            ..parameters[0].clone()
        });
        for j in 0..div.len() {
            let scaled: Vec<Vec<f64>> = series[1 + j]
                .iter()
                .map(|chain| chain.iter().map(|v| v / div[j]).collect())
                .collect();
            let mut dummy = Vec::new();
            let mut row = summarize_one(&names[1 + j], &scaled, &mut dummy)?;
            row.name = format!("{} per natural unit", names[1 + j]);
            natural_scale.push(row);
        }
    }

    let divergent = draws.divergent_count();
    let treedepth_saturation = draws.treedepth_saturation_count();
    for p in parameters.iter().filter(|p| !p.constant) {
        if p.rhat >= RHAT_THRESHOLD {
            warnings.push(format!(
                "parameter {} has R-hat {:.3} (threshold {RHAT_THRESHOLD})",
                p.name, p.rhat
            ));
        }
    }
    let verdict_pass = divergent == 0
        && parameters
            .iter()
            .filter(|p| !p.constant)
            .all(|p| p.rhat < RHAT_THRESHOLD);
    Ok(FitSummary {
        parameters,
        natural_scale,
        divergent,
        treedepth_saturation,
        verdict_pass,
        warnings,
    })
}

fn summarize_one(
    name: &str,
    chains: &[Vec<f64>],
    warnings: &mut Vec<String>,
) -> Result<ParamSummary, DiagnosticsError> {
    let pooled: Vec<f64> = chains.iter().flatten().cloned().collect();
    let m = mean(&pooled);
    let sd = if pooled.len() > 1 {
        sample_var(&pooled).sqrt()
    } else {
        0.0
    };
    let mut sorted = pooled;
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rhat = split_rhat(chains)?;
    let ess = effective_sample_size(chains)?;
    let constant = rhat.is_nan();
    if constant {
        warnings.push(format!(
            "parameter {name} is constant across draws; R-hat and ESS are undefined \
             and it is excluded from the verdict"
        ));
    }
    Ok(ParamSummary {
        name: name.to_string(),
        mean: m,
        sd,
        median: quantile_sorted(&sorted, 0.5),
        q2_5: quantile_sorted(&sorted, 0.025),
        q97_5: quantile_sorted(&sorted, 0.975),
        ess,
        rhat,
        constant,
    })
}

/// Aligned-text rendering of a summary table.
pub fn render_summary(summary: &FitSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<36} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8} {:>7}\n",
        "parameter", "mean", "sd", "2.5%", "median", "97.5%", "ess", "rhat"
    ));
    for p in &summary.parameters {
        out.push_str(&format!(
            "{:<36} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>8.0} {:>7.3}\n",
            p.name, p.mean, p.sd, p.q2_5, p.median, p.q97_5, p.ess, p.rhat
        ));
    }
    out.push_str(&format!(
        "divergent transitions: {}, tree-depth saturations: {}, verdict: {}\n",
        summary.divergent,
        summary.treedepth_saturation,
        if summary.verdict_pass { "PASS" } else { "FAIL" }
    ));
    out
}

/// Observed-versus-replicated comparison of success proportions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupPpc {
    pub block: String,
    pub level: String,
    pub observed: f64,
    pub replicated_mean: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpcResult {
    pub observed_proportion: f64,
    pub replicated_proportions: Vec<f64>,
    pub groups: Vec<GroupPpc>,
    /// Fitted probabilities per observation at the posterior means.
    pub fitted_at_mean: Vec<f64>,
}

/// Simulate replicated responses from `n_rep` posterior draws (evenly spaced
/// over the pooled draws) and compare overall and per-group proportions.
pub fn posterior_predictive<R: Rng>(
    draws: &PosteriorDraws,
    posterior: &Posterior,
    design: &DesignMatrices,
    rng: &mut R,
    n_rep: usize,
) -> Result<PpcResult, DiagnosticsError> {
    let per_chain = draws.draws_per_chain();
    let total = per_chain * draws.chains.len();
    if total == 0 {
        return Err(DiagnosticsError::Empty);
    }
    let n_rep = n_rep.min(total);
    let n = design.n;
    let observed_proportion = design.y.iter().sum::<f64>() / n as f64;

    // group provenance: (block label, level, member rows)
    let mut group_rows: Vec<(String, String, Vec<usize>)> = Vec::new();
    for block in &design.blocks {
        for (g, level) in block.group_levels.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&i| block.group_idx[i] == g).collect();
            group_rows.push((block.group.clone(), level.clone(), rows));
        }
    }

    let mut replicated = Vec::with_capacity(n_rep);
    let mut group_reps: Vec<Vec<f64>> = vec![Vec::with_capacity(n_rep); group_rows.len()];
    let mut mean_unconstrained = vec![0.0; draws.dim];

    for rep in 0..n_rep {
        let flat = rep * total / n_rep;
        let (c, d) = (flat / per_chain, flat % per_chain);
        let theta = &draws.chains[c].draws[d];
        let (params, _) = crate::posterior::transform(&posterior.layout, theta);
        let probs = posterior.fitted_probabilities(&params);
        let mut yrep = vec![0u8; n];
        for i in 0..n {
            yrep[i] = (rng.random::<f64>() < probs[i]) as u8;
        }
        replicated.push(yrep.iter().map(|&v| v as f64).sum::<f64>() / n as f64);
        for (gi, (_, _, rows)) in group_rows.iter().enumerate() {
            if rows.is_empty() {
                group_reps[gi].push(f64::NAN);
                continue;
            }
            let s: f64 = rows.iter().map(|&i| yrep[i] as f64).sum();
            group_reps[gi].push(s / rows.len() as f64);
        }
    }

    // posterior mean of the unconstrained draws, for the fitted curve
    for chain in &draws.chains {
        for draw in &chain.draws {
            for (k, v) in draw.iter().enumerate() {
                mean_unconstrained[k] += v;
            }
        }
    }
    for v in mean_unconstrained.iter_mut() {
        *v /= total as f64;
    }
    let (mean_params, _) = crate::posterior::transform(&posterior.layout, &mean_unconstrained);
    let fitted_at_mean = posterior.fitted_probabilities(&mean_params);

    let groups = group_rows
        .iter()
        .zip(&group_reps)
        .map(|((block, level, rows), reps)| {
            let observed = if rows.is_empty() {
                f64::NAN
            } else {
                rows.iter().map(|&i| design.y[i]).sum::<f64>() / rows.len() as f64
            };
            let mut sorted: Vec<f64> = reps.iter().cloned().filter(|v| v.is_finite()).collect();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let (lo, hi, rmean) = if sorted.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN)
            } else {
                (
                    quantile_sorted(&sorted, 0.025),
                    quantile_sorted(&sorted, 0.975),
                    mean(&sorted),
                )
            };
            GroupPpc {
                block: block.clone(),
                level: level.clone(),
                observed,
                replicated_mean: rmean,
                lo,
                hi,
            }
        })
        .collect();

    Ok(PpcResult {
        observed_proportion,
        replicated_proportions: replicated,
        groups,
        fitted_at_mean,
    })
}

/// Thinned constrained traces for plotting: rows of
/// `(parameter, chain, iteration, value)`.
pub fn thinned_traces(
    draws: &PosteriorDraws,
    posterior: &Posterior,
    max_per_chain: usize,
) -> Vec<(String, usize, usize, f64)> {
    let names = posterior.constrained_names();
    let per_chain = draws.draws_per_chain();
    let stride = (per_chain / max_per_chain.max(1)).max(1);
    let mut rows = Vec::new();
    for (c, chain) in draws.chains.iter().enumerate() {
        for d in (0..chain.draws.len()).step_by(stride) {
            let row = posterior.constrained_row(&chain.draws[d]);
            for (k, v) in row.into_iter().enumerate() {
                rows.push((names[k].clone(), c, d, v));
            }
        }
    }
    rows
}

/// Gaussian kernel density on a regular grid per parameter, for density
/// plots: rows of `(parameter, x, density)`. Constant parameters are
/// skipped.
pub fn density_grids(
    draws: &PosteriorDraws,
    posterior: &Posterior,
    grid_points: usize,
) -> Vec<(String, f64, f64)> {
    let names = posterior.constrained_names();
    let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for chain in &draws.chains {
        for draw in &chain.draws {
            let row = posterior.constrained_row(draw);
            for (k, v) in row.into_iter().enumerate() {
                pooled[k].push(v);
            }
        }
    }
    let mut rows = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let xs = &mut pooled[k];
        let n = xs.len();
        if n < 2 {
            continue;
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let sd = sample_var(xs).sqrt();
        let iqr = quantile_sorted(xs, 0.75) - quantile_sorted(xs, 0.25);
        let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
        if spread <= 0.0 {
            continue;
        }
        let h = 0.9 * spread * (n as f64).powf(-0.2);
        let (lo, hi) = (xs[0] - 3.0 * h, xs[n - 1] + 3.0 * h);
        for gi in 0..grid_points {
            let x = lo + (hi - lo) * gi as f64 / (grid_points - 1) as f64;
            let mut dens = 0.0;
            for &xi in xs.iter() {
                let z = (x - xi) / h;
                dens += (-0.5 * z * z).exp();
            }
            dens /= n as f64 * h * (2.0 * std::f64::consts::PI).sqrt();
            rows.push((name.clone(), x, dens));
        }
    }
    rows
}
