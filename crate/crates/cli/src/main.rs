use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use stability_core::config::AnalysisConfig;
use stability_core::error::{Error, Result};
use stability_core::oracle::{
    exact_dual_check, exact_noisy_worst_case, exact_thresholds, exact_worst_case_discrete, rho_from_alpha,
};
use stability_core::synth::{bundled_instance, generate_toy_sine_fitted, sample_discrete_instance};
use stability_core::{run_analysis, TabularDataset};

#[derive(Parser)]
#[command(name = "stability", version, about = "Worst-case subpopulation risk of a fixed model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an analysis described by a config file.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `estimator.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated alpha values; overrides `alpha_grid`.
        #[arg(long, value_delimiter = ',')]
        alpha_grid: Option<Vec<f64>>,
        /// Worker threads; results do not depend on it.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Emit a bundled synthetic dataset as CSV.
    Synth {
        /// A bundled discrete instance or `toy-sine`.
        #[arg(long)]
        instance: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print exact worst-case values for a bundled discrete instance.
    Oracle {
        #[arg(long)]
        instance: String,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        epsilon: Option<f64>,
    },
}

fn analyze(
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    alpha_grid: Option<Vec<f64>>,
    threads: Option<usize>,
) -> Result<()> {
    let mut cfg = AnalysisConfig::load(&config)?;
    if let Some(out) = out {
        cfg.output_dir = Some(out);
    }
    if let Some(seed) = seed {
        cfg.estimator.seed = seed;
    }
    if let Some(grid) = alpha_grid {
        cfg.alpha_grid = grid;
    }
    cfg.validate()?;
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let output = run_analysis(&cfg)?;
    for e in &output.curve.estimates {
        log::info!("alpha {}: r_hat {} [{}, {}]", e.alpha, e.r_hat, e.ci_lower, e.ci_upper);
    }
    let dir = cfg.output_dir.expect("validated");
    println!("{}", json!({ "status": "ok", "output_dir": dir }));
    Ok(())
}

fn synth(instance: &str, n: usize, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let data: TabularDataset = if instance == "toy-sine" {
        if n == 0 {
            return Err(Error::Config("sample size must be at least 1".into()));
        }
        generate_toy_sine_fitted(n, seed)?.0
    } else {
        sample_discrete_instance(&bundled_instance(instance)?, n, seed)?
    };
    match out {
        Some(path) => data.write_csv(&path),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            data.write_csv_to(&mut lock)?;
            lock.flush()?;
            Ok(())
        }
    }
}

fn oracle(instance: &str, alpha: f64, epsilon: Option<f64>) -> Result<()> {
    let inst = bundled_instance(instance)?;
    let worst = exact_worst_case_discrete(&inst, alpha)?;
    let mut report = json!({
        "instance": instance,
        "alpha": alpha,
        "rho": rho_from_alpha(alpha)?,
        "mean_loss": inst.mean_loss(),
        "worst_case": worst,
        "unconstrained_worst_case": exact_worst_case_discrete(&inst.merge_z_into_w(), alpha)?,
        "thresholds": exact_thresholds(&inst, alpha)?,
    });
    if alpha > 0.0 {
        report["dual"] = json!(exact_dual_check(&inst, alpha)?.1);
    }
    if let Some(eps) = epsilon {
        report["epsilon"] = json!(eps);
        report["noisy_worst_case"] = json!(exact_noisy_worst_case(&inst, alpha, eps)?);
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn fail(kind: &str, code: u8, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "exit_code": code, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("invalid arguments");
            return fail("config", 2, first.trim_start_matches("error: "));
        }
    };
    let result = match cli.command {
        Command::Analyze {
            config,
            out,
            seed,
            alpha_grid,
            threads,
        } => analyze(config, out, seed, alpha_grid, threads),
        Command::Synth { instance, n, seed, out } => synth(&instance, n, seed, out),
        Command::Oracle {
            instance,
            alpha,
            epsilon,
        } => oracle(&instance, alpha, epsilon),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.exit_code() as u8, &e.to_string()),
    }
}
