//! End-to-end run orchestration: configuration, the output-directory
//! contract, report emission, and exit codes.
//!
//! Output layout under the run directory:
//!
//! ```text
//! manifest.json          config echo, tool version, seed, input digests
//! separation.json        separation report (always written)
//! identifiability.json   identifiability report (fit runs)
//! tree.json, tree.txt    classification-tree probe (check runs)
//! fit/summary.json       posterior or frequentist fit summary
//! fit/chain-*.csv        per-chain constrained draws plus sampler stats
//! ppc/*.csv              posterior predictive exports
//! plots/*.csv            thinned traces and density grids
//! ```
//!
//! Exit codes: 0 ok; 2 formula parse error; 3 data or schema error;
//! 4 non-identifiable design; 5 fit completed but its convergence verdict
//! failed (outputs are still written). A failed verdict is a diagnosable
//! outcome, not a crash, so it gets its own code.

use crate::data::{load_csv, ColumnSchema, DataError, Dataset};
use crate::design::{build_design, check_identifiability, standardize, DesignMatrices};
use crate::diagnostics::{
    density_grids, posterior_predictive, render_summary, summarize, thinned_traces,
    DiagnosticsError,
};
use crate::formula::{parse_formula, validate_spec, FormulaError, ModelSpec};
use crate::laplace::{fit_glmm_laplace, LaplaceOptions};
use crate::mle::{detect_mle_divergence, fit_glm_irls, DivergenceVerdict, MleError};
use crate::posterior::{Posterior, PriorConfig};
use crate::sampler::{run_chains, PosteriorDraws, SamplerConfig, SamplerError};
use crate::separation::{render_report, scan_all};
use crate::sim::{write_simulated_dataset, SimError, SimScenario};
use crate::tree::{fit_tree, DEFAULT_MAX_DEPTH, DEFAULT_MIN_LEAF};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Irls,
    Laplace,
    Nuts,
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Engine::Irls => "irls",
            Engine::Laplace => "laplace",
            Engine::Nuts => "nuts",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IrlsOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions {
            tol: crate::mle::DEFAULT_IRLS_TOL,
            max_iter: crate::mle::DEFAULT_IRLS_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeOptions {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeOptions {
    fn default() -> Self {
        TreeOptions {
            max_depth: DEFAULT_MAX_DEPTH,
            min_leaf: DEFAULT_MIN_LEAF,
        }
    }
}

fn default_ppc_draws() -> usize {
    500
}

/// Full configuration of one run; JSON-loadable via `--config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub formula: String,
    pub data: PathBuf,
    pub schema: PathBuf,
    pub out: PathBuf,
    pub engine: Engine,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub priors: PriorConfig,
    #[serde(default)]
    pub irls: IrlsOptions,
    #[serde(default)]
    pub laplace: LaplaceOptions,
    #[serde(default)]
    pub tree: TreeOptions,
    #[serde(default = "default_ppc_draws")]
    pub ppc_draws: usize,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Formula(#[from] FormulaError),
    #[error("{0}")]
    Data(#[from] DataError),
    #[error("{0}")]
    Mle(#[from] MleError),
    #[error("{0}")]
    Sampler(#[from] SamplerError),
    #[error("{0}")]
    Diagnostics(#[from] DiagnosticsError),
    #[error("{0}")]
    Sim(#[from] SimError),
    #[error("run: cannot access `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("run: invalid configuration: {0}")]
    BadConfig(String),
}

impl RunError {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Formula(_) => 2,
            RunError::Data(_) | RunError::Io { .. } | RunError::Sim(_) => 3,
            RunError::BadConfig(_) => 3,
            RunError::Mle(_) | RunError::Sampler(_) | RunError::Diagnostics(_) => 1,
        }
    }
}

/// Result of a completed run (the process may still exit nonzero when the
/// verdict failed or the design is non-identifiable).
#[derive(Debug)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub verdict: String,
    /// Human-readable report for stdout.
    pub report_text: String,
}

fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| RunError::Io {
            path: parent.display().to_string(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| RunError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| RunError::BadConfig(format!("serialization failed: {e}")))?;
    write_text(path, &(text + "\n"))
}

fn read_file(path: &Path) -> Result<String, RunError> {
    std::fs::read_to_string(path).map_err(|e| RunError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything needed to reproduce a run exactly.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    data_sha256: String,
    schema_sha256: String,
    n_rows_used: usize,
    dropped_rows: usize,
    /// Missing-cell counts among dropped rows, per column.
    missing_by_column: &'a [(String, usize)],
}

fn load_inputs(config: &RunConfig) -> Result<(ModelSpec, ColumnSchema, Dataset), RunError> {
    let schema_text = read_file(&config.schema)?;
    let schema = ColumnSchema::from_json(&schema_text)?;
    let spec = parse_formula(&config.formula)?;
    validate_spec(&spec, &schema)?;
    let dataset = load_csv(&config.data, &schema)?;
    Ok((spec, schema, dataset))
}

fn write_manifest(config: &RunConfig, dataset: &Dataset) -> Result<(), RunError> {
    let data_bytes = std::fs::read(&config.data).map_err(|e| RunError::Io {
        path: config.data.display().to_string(),
        source: e,
    })?;
    let schema_bytes = std::fs::read(&config.schema).map_err(|e| RunError::Io {
        path: config.schema.display().to_string(),
        source: e,
    })?;
    let manifest = Manifest {
        tool: "sepfit",
        version: env!("CARGO_PKG_VERSION"),
        config,
        data_sha256: sha256_hex(&data_bytes),
        schema_sha256: sha256_hex(&schema_bytes),
        n_rows_used: dataset.n,
        dropped_rows: dataset.dropped_rows,
        missing_by_column: &dataset.missing_by_column,
    };
    write_json(&config.out.join("manifest.json"), &manifest)
}

/// `check`: separation scans plus the classification-tree probe. Detection
/// is information, not failure, so the exit code is 0 whenever the pipeline
/// ran.
pub fn cmd_check(config: &RunConfig) -> Result<RunOutcome, RunError> {
    let (spec, _schema, dataset) = load_inputs(config)?;
    write_manifest(config, &dataset)?;

    let report = scan_all(&dataset, &spec);
    write_json(&config.out.join("separation.json"), &report)?;

    let tree = fit_tree(&dataset, &spec, config.tree.max_depth, config.tree.min_leaf);
    write_json(&config.out.join("tree.json"), &tree)?;
    let tree_text = tree.render();
    write_text(&config.out.join("tree.txt"), &tree_text)?;

    let mut text = render_report(&report);
    text.push_str("\nclassification tree:\n");
    text.push_str(&tree_text);
    let flagged = tree.flagged_leaves().len();
    if flagged > 0 {
        text.push_str(&format!(
            "{flagged} pure leaf/leaves of size >= {} flag quasi-separation witnesses\n",
            config.tree.min_leaf
        ));
    }
    Ok(RunOutcome {
        exit_code: 0,
        verdict: report.verdict.to_string(),
        report_text: text,
    })
}

/// `fit`: run the chosen engine end-to-end. The identifiability and
/// separation reports are always written next to the fit.
pub fn cmd_fit(config: &RunConfig) -> Result<RunOutcome, RunError> {
    let (spec, _schema, dataset) = load_inputs(config)?;
    write_manifest(config, &dataset)?;

    let scaling = standardize(&dataset, &spec)?;
    let design = build_design(&dataset, &spec, &scaling)?;

    let separation = scan_all(&dataset, &spec);
    write_json(&config.out.join("separation.json"), &separation)?;

    let ident = check_identifiability(&design);
    write_json(&config.out.join("identifiability.json"), &ident)?;
    if !ident.pass {
        let text = format!(
            "design is not identifiable: n = {}, parameters = {}, all blocks full rank: {}\n",
            ident.n,
            ident.total_parameters,
            ident.blocks.iter().all(|b| b.ok)
        );
        return Ok(RunOutcome {
            exit_code: 4,
            verdict: "non-identifiable".to_string(),
            report_text: text,
        });
    }

    match config.engine {
        Engine::Irls => fit_irls(config, &design, &separation),
        Engine::Laplace => fit_laplace(config, &design),
        Engine::Nuts => fit_nuts(config, &design),
    }
}

#[derive(Serialize)]
struct GlmReport<'a> {
    fit: &'a crate::mle::GlmFit,
    verdict: &'a str,
    scaling: &'a crate::design::ScalingRecord,
}

fn fit_irls(
    config: &RunConfig,
    design: &DesignMatrices,
    separation: &crate::separation::SeparationReport,
) -> Result<RunOutcome, RunError> {
    let fit = fit_glm_irls(design, config.irls.tol, config.irls.max_iter)?;
    let verdict = match detect_mle_divergence(&fit) {
        Ok(DivergenceVerdict::Converged) => "converged",
        Ok(DivergenceVerdict::Diverging) => "diverging",
        Ok(DivergenceVerdict::Stalled) => "stalled",
        // fits shorter than the trajectory precondition: trust the flag
        Err(_) if fit.converged => "converged",
        Err(_) => "stalled",
    };
    write_json(
        &config.out.join("fit/glm.json"),
        &GlmReport {
            fit: &fit,
            verdict,
            scaling: &design.scaling,
        },
    )?;
    let mut text = format!(
        "irls: verdict {verdict} after {} iterations (max |coef| = {:.3})\n",
        fit.iterations,
        fit.max_abs_coefficient()
    );
    for (n, (c, s)) in fit
        .names
        .iter()
        .zip(fit.coefficients.iter().zip(&fit.std_errors))
    {
        text.push_str(&format!("  {n:<30} {c:>12.4} (se {s:.4})\n"));
    }
    if verdict != "converged" {
        text.push_str("separation summary:\n");
        text.push_str(&render_report(separation));
        text.push_str(
            "maximum likelihood cannot settle under (quasi-)separation; the Bayesian \
             engine (`--engine nuts`) remains estimable\n",
        );
    }
    Ok(RunOutcome {
        exit_code: if verdict == "converged" { 0 } else { 5 },
        verdict: verdict.to_string(),
        report_text: text,
    })
}

#[derive(Serialize)]
struct LaplaceReport<'a> {
    fit: &'a crate::laplace::LaplaceFit,
    verdict: &'a str,
    scaling: &'a crate::design::ScalingRecord,
}

fn fit_laplace(config: &RunConfig, design: &DesignMatrices) -> Result<RunOutcome, RunError> {
    let fit = fit_glmm_laplace(design, &config.laplace)?;
    let verdict = if fit.runaway {
        "runaway-variance"
    } else if fit.boundary {
        "boundary"
    } else if fit.converged {
        "converged"
    } else {
        "not-converged"
    };
    write_json(
        &config.out.join("fit/laplace.json"),
        &LaplaceReport {
            fit: &fit,
            verdict,
            scaling: &design.scaling,
        },
    )?;
    let mut text = format!(
        "laplace: verdict {verdict} (sigma = {:.4}, max |grad| = {:.2e}, {} iterations)\n",
        fit.sigma, fit.max_grad, fit.iterations
    );
    for (n, c) in fit.names.iter().zip(&fit.beta) {
        text.push_str(&format!("  {n:<30} {c:>12.4}\n"));
    }
    if verdict != "converged" {
        text.push_str(
            "the random-intercept variance could not be reliably estimated; \
             inspect the separation report and consider `--engine nuts`\n",
        );
    }
    Ok(RunOutcome {
        exit_code: if fit.converged { 0 } else { 5 },
        verdict: verdict.to_string(),
        report_text: text,
    })
}

#[derive(Serialize)]
struct NutsReport<'a> {
    summary: &'a crate::diagnostics::FitSummary,
    scaling: &'a crate::design::ScalingRecord,
    step_sizes: Vec<f64>,
    seed: u64,
}

fn fit_nuts(config: &RunConfig, design: &DesignMatrices) -> Result<RunOutcome, RunError> {
    config.priors.validate().map_err(RunError::BadConfig)?;
    let posterior = Posterior::new(design, config.priors.clone());
    let draws = run_chains(&posterior, &config.sampler)?;
    write_chain_csvs(config, &posterior, &draws)?;

    let summary = summarize(&draws, &posterior, Some(&design.x_natural_divisor))?;
    write_json(
        &config.out.join("fit/summary.json"),
        &NutsReport {
            summary: &summary,
            scaling: &design.scaling,
            step_sizes: draws.chains.iter().map(|c| c.step_size).collect(),
            seed: config.sampler.seed,
        },
    )?;

    // posterior predictive checks on a dedicated substream
    let mut ppc_rng = ChaCha8Rng::seed_from_u64(config.sampler.seed);
    ppc_rng.set_stream(0);
    let ppc = posterior_predictive(&draws, &posterior, design, &mut ppc_rng, config.ppc_draws)?;
    let mut overall = String::from("replicate,proportion\n");
    for (i, p) in ppc.replicated_proportions.iter().enumerate() {
        overall.push_str(&format!("{i},{p}\n"));
    }
    write_text(&config.out.join("ppc/overall.csv"), &overall)?;
    let mut groups = String::from("block,level,observed,replicated_mean,lo,hi\n");
    for g in &ppc.groups {
        groups.push_str(&format!(
            "{},{},{},{},{},{}\n",
            g.block, g.level, g.observed, g.replicated_mean, g.lo, g.hi
        ));
    }
    write_text(&config.out.join("ppc/groups.csv"), &groups)?;
    let mut fitted = String::from("row,p\n");
    for (i, p) in ppc.fitted_at_mean.iter().enumerate() {
        fitted.push_str(&format!("{i},{p}\n"));
    }
    write_text(&config.out.join("ppc/fitted.csv"), &fitted)?;

    // trace and density exports for visual checks
    let mut traces = String::from("parameter,chain,iteration,value\n");
    for (name, chain, iter, v) in thinned_traces(&draws, &posterior, 200) {
        traces.push_str(&format!("{name},{chain},{iter},{v}\n"));
    }
    write_text(&config.out.join("plots/traces.csv"), &traces)?;
    let mut densities = String::from("parameter,x,density\n");
    for (name, x, d) in density_grids(&draws, &posterior, 64) {
        densities.push_str(&format!("{name},{x},{d}\n"));
    }
    write_text(&config.out.join("plots/densities.csv"), &densities)?;

    let mut text = render_summary(&summary);
    if summary.divergent > 0 {
        text.push_str(&format!(
            "{} divergent transition(s) post-warmup: raise the target acceptance rate \
             (--adapt-delta) above {}\n",
            summary.divergent, config.sampler.adapt_delta
        ));
    }
    let verdict = if summary.verdict_pass { "pass" } else { "fail" };
    Ok(RunOutcome {
        exit_code: if summary.verdict_pass { 0 } else { 5 },
        verdict: verdict.to_string(),
        report_text: text,
    })
}

fn write_chain_csvs(
    config: &RunConfig,
    posterior: &Posterior,
    draws: &PosteriorDraws,
) -> Result<(), RunError> {
    let names = posterior.constrained_names();
    let dir = config.out.join("fit");
    std::fs::create_dir_all(&dir).map_err(|e| RunError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    for (c, chain) in draws.chains.iter().enumerate() {
        let path = dir.join(format!("chain-{}.csv", c + 1));
        let file = std::fs::File::create(&path).map_err(|e| RunError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut w = std::io::BufWriter::new(file);
        let mut header = names.join(",");
        header.push_str(",divergent,treedepth,accept,energy\n");
        let io_err = |e: std::io::Error| RunError::Io {
            path: path.display().to_string(),
            source: e,
        };
        w.write_all(header.as_bytes()).map_err(io_err)?;
        for (draw, stats) in chain.draws.iter().zip(&chain.stats) {
            let row = posterior.constrained_row(draw);
            let mut line = String::with_capacity(row.len() * 12);
            for v in row {
                line.push_str(&format!("{v},"));
            }
            line.push_str(&format!(
                "{},{},{},{}\n",
                stats.divergent as u8, stats.treedepth, stats.accept, stats.energy
            ));
            w.write_all(line.as_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

/// `simulate`: write a synthetic dataset, its schema and generating truth.
pub fn cmd_simulate(scenario_path: &Path, seed: u64, out: &Path) -> Result<RunOutcome, RunError> {
    let text = read_file(scenario_path)?;
    let scenario = SimScenario::from_json(&text)?;
    let (products, files) = write_simulated_dataset(&scenario, seed, out)?;
    let prop = products.design.y.iter().sum::<f64>() / products.design.y.len() as f64;
    Ok(RunOutcome {
        exit_code: 0,
        verdict: "ok".to_string(),
        report_text: format!(
            "wrote {} ({} rows, success proportion {:.3}), {}, {}\n",
            files.data.display(),
            products.design.n,
            prop,
            files.schema.display(),
            files.truth.display()
        ),
    })
}
