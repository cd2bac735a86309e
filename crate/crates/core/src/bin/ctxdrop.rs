use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctxdrop::dropout::Variant;
use ctxdrop::estimators::Estimator;
use ctxdrop::harness::{
    gradcheck, parse_thresholds, run_eval, run_ensemble, run_export_samples, run_train, run_uncertainty,
    EpochSummary, EvalSummary, Overrides, RunConfig,
};
use ctxdrop::{Error, Result};

/// Contextual dropout experiments on MNIST-style data.
#[derive(Parser)]
#[command(name = "ctxdrop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model, then evaluate it on the test split.
    Train(Common),
    /// Evaluate a checkpoint: records.csv and summary.json.
    Eval(Common),
    /// Evaluate a checkpoint and contrast p-values of right and wrong predictions.
    Uncertainty(Common),
    /// Train several seeds and pool their predictive samples.
    Ensemble(Common),
    /// Check gradients and statistics against their oracles.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the predictive samples of every test input.
    ExportSamples(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    noise_var: Option<f64>,
    /// Train on clean data, evaluate on noisy data.
    #[arg(long)]
    ood: bool,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated p-value thresholds, e.g. 0.01,0.05,0.1.
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let overrides = Overrides {
            seed: self.seed,
            variant: self.variant.as_deref().map(str::parse::<Variant>).transpose()?,
            estimator: self.estimator.as_deref().map(str::parse::<Estimator>).transpose()?,
            noise_var: self.noise_var,
            ood: self.ood,
            epochs: self.epochs,
            thresholds: self.threshold.as_deref().map(parse_thresholds).transpose()?,
            out: self.out.clone(),
            data_dir: self.data_dir.clone(),
        };
        overrides.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn log_epoch(e: &EpochSummary) {
    eprintln!(
        "epoch {:>3}  elbo {:>10.4}  ll {:>10.4}  kl {:>9.4}  {:.1}s",
        e.epoch + 1,
        e.elbo,
        e.log_likelihood,
        e.kl,
        e.seconds
    );
}

fn print_summary(label: &str, s: &EvalSummary) {
    let pavpu: Vec<String> = s.pavpu.iter().map(|p| format!("{:.4}", p.pavpu)).collect();
    let taus: Vec<String> = s.pavpu.iter().map(|p| p.threshold.to_string()).collect();
    println!(
        "{label}: accuracy {:.4}  PAvPU({}) {}  test LL {:.4}  degenerate {}",
        s.accuracy,
        taus.join(" / "),
        pavpu.join(" / "),
        s.test_log_likelihood,
        s.degenerate
    );
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(c) => print_summary("test", &run_train(&c.resolve()?, &mut log_epoch)?),
        Command::Eval(c) => {
            let cfg = c.resolve()?;
            print_summary("test", &run_eval(&cfg, c.checkpoint.as_deref())?);
        }
        Command::Uncertainty(c) => {
            let cfg = c.resolve()?;
            let r = run_uncertainty(&cfg, c.checkpoint.as_deref())?;
            print_summary("test", &r.summary);
            println!(
                "mean p-value: accurate {:.4}  inaccurate {:.4}",
                r.mean_p_accurate, r.mean_p_inaccurate
            );
        }
        Command::Ensemble(c) => {
            let r = run_ensemble(&c.resolve()?, &mut log_epoch)?;
            for (i, m) in r.members.iter().enumerate() {
                print_summary(&format!("member {i}"), m);
            }
            print_summary("ensemble", &r.ensemble);
        }
        Command::ExportSamples(c) => {
            let cfg = c.resolve()?;
            let n = run_export_samples(&cfg, c.checkpoint.as_deref())?;
            println!("wrote {n} sample sets to {}", cfg.out.join("samples.csv").display());
        }
        Command::Gradcheck { out } => {
            let checks = gradcheck::run_gradcheck()?;
            for c in &checks {
                println!(
                    "{} {:<40} {:.3e} (tol {:.0e})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.tolerance
                );
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("gradcheck.json"), serde_json::to_string_pretty(&checks)? + "\n")?;
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        // A failed oracle is a numeric failure.
        Ok(false) => ExitCode::from(Error::numeric("gradcheck", "").exit_code() as u8),
        Err(e) => {
            eprintln!("ctxdrop: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
