//! `sepfit`: scan binary-response regression data for (quasi-)separation,
//! demonstrate the maximum-likelihood pathology with frequentist fitters,
//! and fit the Bayesian hierarchical logistic model by NUTS.

use clap::{Args, Parser, Subcommand};
use sepfit_core::laplace::LaplaceOptions;
use sepfit_core::posterior::PriorConfig;
use sepfit_core::run::{
    cmd_check, cmd_fit, cmd_simulate, Engine, IrlsOptions, RunConfig, RunError, TreeOptions,
};
use sepfit_core::sampler::SamplerConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "sepfit",
    version,
    about = "Separation-aware Bayesian and frequentist logistic mixed-effects fitting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a dataset for separation, quasi-separation and overlap, and fit
    /// a classification-tree probe.
    Check(CommonArgs),
    /// Fit the model with the chosen engine (irls, laplace, nuts).
    Fit(FitArgs),
    /// Generate a synthetic dataset from a scenario description.
    Simulate(SimArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Mixed-model formula, e.g. "y ~ a*b + (1 + a | subj)".
    #[arg(long)]
    formula: Option<String>,
    /// Data CSV (UTF-8, header row, `NA` or empty cell = missing).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Column schema JSON.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Output directory for reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON run configuration; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Classification-tree depth cap.
    #[arg(long)]
    tree_max_depth: Option<usize>,
    /// Minimum rows per tree leaf.
    #[arg(long)]
    tree_min_leaf: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Fitting engine: irls, laplace or nuts.
    #[arg(long)]
    engine: Option<String>,
    /// Number of MCMC chains.
    #[arg(long)]
    chains: Option<usize>,
    /// Iterations per chain, including warmup.
    #[arg(long)]
    iter: Option<usize>,
    /// Warmup iterations per chain.
    #[arg(long)]
    warmup: Option<usize>,
    /// Target acceptance rate for step-size adaptation.
    #[arg(long)]
    adapt_delta: Option<f64>,
    /// Cap on trajectory doublings.
    #[arg(long)]
    max_treedepth: Option<usize>,
    /// Base RNG seed (chains use derived substreams).
    #[arg(long)]
    seed: Option<u64>,
    /// Cauchy scale of the intercept prior.
    #[arg(long)]
    prior_intercept_scale: Option<f64>,
    /// Cauchy scale of the fixed-effect priors.
    #[arg(long)]
    prior_beta_scale: Option<f64>,
    /// Half-Cauchy scale of the random-effect SD priors.
    #[arg(long)]
    prior_sd_scale: Option<f64>,
    /// Shape of the LKJ prior on correlation matrices.
    #[arg(long)]
    lkj_eta: Option<f64>,
    /// IRLS coefficient-update tolerance.
    #[arg(long)]
    irls_tol: Option<f64>,
    /// IRLS iteration cap.
    #[arg(long)]
    irls_max_iter: Option<usize>,
    /// Laplace outer gradient tolerance.
    #[arg(long)]
    laplace_tol: Option<f64>,
    /// Laplace outer iteration cap.
    #[arg(long)]
    laplace_max_iter: Option<usize>,
    /// Posterior predictive replicate count.
    #[arg(long)]
    ppc_draws: Option<usize>,
}

#[derive(Args)]
struct SimArgs {
    /// Scenario JSON describing the generating model and injections.
    #[arg(long)]
    scenario: PathBuf,
    /// RNG seed; a fixed seed reproduces the CSV byte for byte.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory for data.csv, schema.json and truth.json.
    #[arg(long)]
    out: PathBuf,
}

fn build_config(common: &CommonArgs, engine: Engine) -> Result<RunConfig, String> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read config `{}`: {e}", path.display()))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| format!("invalid config `{}`: {e}", path.display()))?
        }
        None => RunConfig {
            formula: String::new(),
            data: PathBuf::new(),
            schema: PathBuf::new(),
            out: PathBuf::new(),
            engine,
            sampler: SamplerConfig::default(),
            priors: PriorConfig::default(),
            irls: IrlsOptions::default(),
            laplace: LaplaceOptions::default(),
            tree: TreeOptions::default(),
            ppc_draws: 500,
        },
    };
    if let Some(f) = &common.formula {
        config.formula = f.clone();
    }
    if let Some(d) = &common.data {
        config.data = d.clone();
    }
    if let Some(s) = &common.schema {
        config.schema = s.clone();
    }
    if let Some(o) = &common.out {
        config.out = o.clone();
    }
    if let Some(d) = common.tree_max_depth {
        config.tree.max_depth = d;
    }
    if let Some(m) = common.tree_min_leaf {
        config.tree.min_leaf = m;
    }
    for (name, missing) in [
        ("--formula", config.formula.is_empty()),
        ("--data", config.data.as_os_str().is_empty()),
        ("--schema", config.schema.as_os_str().is_empty()),
        ("--out", config.out.as_os_str().is_empty()),
    ] {
        if missing {
            return Err(format!("{name} is required (flag or config file)"));
        }
    }
    Ok(config)
}

fn parse_engine(text: &str) -> Result<Engine, String> {
    match text {
        "irls" => Ok(Engine::Irls),
        "laplace" => Ok(Engine::Laplace),
        "nuts" => Ok(Engine::Nuts),
        other => Err(format!("unknown engine `{other}` (use irls|laplace|nuts)")),
    }
}

fn apply_fit_flags(config: &mut RunConfig, args: &FitArgs) -> Result<(), String> {
    if let Some(e) = &args.engine {
        config.engine = parse_engine(e)?;
    }
    // engine-specific options are only accepted for their engine
    let nuts_flags = [
        ("--chains", args.chains.is_some()),
        ("--iter", args.iter.is_some()),
        ("--warmup", args.warmup.is_some()),
        ("--adapt-delta", args.adapt_delta.is_some()),
        ("--max-treedepth", args.max_treedepth.is_some()),
        ("--seed", args.seed.is_some()),
        ("--prior-intercept-scale", args.prior_intercept_scale.is_some()),
        ("--prior-beta-scale", args.prior_beta_scale.is_some()),
        ("--prior-sd-scale", args.prior_sd_scale.is_some()),
        ("--lkj-eta", args.lkj_eta.is_some()),
        ("--ppc-draws", args.ppc_draws.is_some()),
    ];
    let irls_flags = [
        ("--irls-tol", args.irls_tol.is_some()),
        ("--irls-max-iter", args.irls_max_iter.is_some()),
    ];
    let laplace_flags = [
        ("--laplace-tol", args.laplace_tol.is_some()),
        ("--laplace-max-iter", args.laplace_max_iter.is_some()),
    ];
    let reject = |flags: &[(&str, bool)], engine: &str| -> Result<(), String> {
        for (name, given) in flags {
            if *given {
                return Err(format!("{name} only applies to `--engine {engine}`"));
            }
        }
        Ok(())
    };
    match config.engine {
        Engine::Nuts => {
            reject(&irls_flags, "irls")?;
            reject(&laplace_flags, "laplace")?;
        }
        Engine::Irls => {
            reject(&nuts_flags, "nuts")?;
            reject(&laplace_flags, "laplace")?;
        }
        Engine::Laplace => {
            reject(&nuts_flags, "nuts")?;
            reject(&irls_flags, "irls")?;
        }
    }
    if let Some(v) = args.chains {
        config.sampler.chains = v;
    }
    if let Some(v) = args.iter {
        config.sampler.iterations = v;
    }
    if let Some(v) = args.warmup {
        config.sampler.warmup = v;
    }
    if let Some(v) = args.adapt_delta {
        config.sampler.adapt_delta = v;
    }
    if let Some(v) = args.max_treedepth {
        config.sampler.max_treedepth = v;
    }
    if let Some(v) = args.seed {
        config.sampler.seed = v;
    }
    if let Some(v) = args.prior_intercept_scale {
        config.priors.intercept_scale = v;
    }
    if let Some(v) = args.prior_beta_scale {
        config.priors.beta_scale = v;
    }
    if let Some(v) = args.prior_sd_scale {
        config.priors.sd_scale = v;
    }
    if let Some(v) = args.lkj_eta {
        config.priors.lkj_eta = v;
    }
    if let Some(v) = args.irls_tol {
        config.irls.tol = v;
    }
    if let Some(v) = args.irls_max_iter {
        config.irls.max_iter = v;
    }
    if let Some(v) = args.laplace_tol {
        config.laplace.tol = v;
    }
    if let Some(v) = args.laplace_max_iter {
        config.laplace.max_iter = v;
    }
    if let Some(v) = args.ppc_draws {
        config.ppc_draws = v;
    }
    Ok(())
}

fn fail(code: i32, message: String) -> ExitCode {
    eprintln!("sepfit: {message}");
    ExitCode::from(code.clamp(0, 255) as u8)
}

fn finish(result: Result<sepfit_core::run::RunOutcome, RunError>) -> ExitCode {
    match result {
        Ok(outcome) => {
            print!("{}", outcome.report_text);
            if outcome.exit_code != 0 {
                eprintln!(
                    "sepfit: verdict {} (exit {})",
                    outcome.verdict, outcome.exit_code
                );
            }
            ExitCode::from(outcome.exit_code.clamp(0, 255) as u8)
        }
        Err(err) => fail(err.exit_code(), err.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Check(common) => {
            let config = match build_config(&common, Engine::Nuts) {
                Ok(c) => c,
                Err(m) => return fail(3, m),
            };
            finish(cmd_check(&config))
        }
        Command::Fit(args) => {
            let mut config = match build_config(&args.common, Engine::Nuts) {
                Ok(c) => c,
                Err(m) => return fail(3, m),
            };
            if let Err(m) = apply_fit_flags(&mut config, &args) {
                return fail(3, m);
            }
            finish(cmd_fit(&config))
        }
        Command::Simulate(args) => finish(cmd_simulate(&args.scenario, args.seed, &args.out)),
    }
}
