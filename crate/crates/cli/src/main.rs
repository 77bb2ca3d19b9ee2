use std::path::{Path, PathBuf};
use std::process::ExitCode;

use biapnn_cli::config::{ConfigError, ExperimentConfig, MethodChoice, KEYS};
use biapnn_cli::output::{emit_results, Summary};
use biapnn_cli::run::{run_experiment, Mode, RunError};
use biapnn_core::train::EpochRecord;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "biapnn", version, about = "Kinetic reference solvers and physics-informed networks for the semiconductor Boltzmann equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on the forward problem and score it against the reference solver.
    Forward(RunArgs),
    /// Estimate σ from synthetic observations, once per initial guess in `sigma0`.
    Inverse(RunArgs),
    /// Run the micro-macro (`method=reference`) or drift-diffusion solver.
    Reference(RunArgs),
    /// Repeat a forward (or reference) run for every Knudsen number in `eps_list`.
    Sweep(RunArgs),
    /// Tabulate the summaries of several result directories.
    Compare(CompareArgs),
    /// List the configuration keys and their defaults.
    Keys,
}

#[derive(Args)]
struct RunArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Network and observation seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Knudsen number (overrides `eps`).
    #[arg(long)]
    eps: Option<f64>,
    /// Method (overrides `method`).
    #[arg(long)]
    method: Option<String>,
    /// Extra `key=value` assignments applied after the file; one value may
    /// hold several, separated by whitespace.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Suppress progress lines.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Result directories containing `summary.json`.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Also write `compare.csv` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf), ConfigError> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for item in args.set.iter().flat_map(|s| s.split_whitespace()) {
        let (k, v) = item.split_once('=').ok_or_else(|| ConfigError {
            key: None,
            message: format!("--set `{item}` is not a key=value pair"),
        })?;
        cfg.set(k, v)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.eps {
        cfg.eps = e;
    }
    if let Some(m) = &args.method {
        cfg.set("method", m)?;
    }
    cfg.validate()?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    Ok((cfg, out))
}

fn progress(quiet: bool) -> impl FnMut(&str, &EpochRecord) {
    move |stage, r| {
        if quiet {
            return;
        }
        let phi = r.rel_error_phi.map(|e| format!(" rel_error_phi {e:.3e}")).unwrap_or_default();
        let sigma = r.sigma.map(|s| format!(" sigma {s:.5}")).unwrap_or_default();
        eprintln!(
            "[{stage}] epoch {:>6} loss {:.4e} rel_error {:.4e}{phi}{sigma}",
            r.epoch,
            r.loss.total,
            r.rel_error.unwrap_or(f64::NAN)
        );
    }
}

fn run_one(cfg: &ExperimentConfig, mode: Mode, out: &Path, quiet: bool) -> Result<Summary, RunError> {
    let bundle = run_experiment(cfg, mode, &mut progress(quiet))?;
    let files = emit_results(&bundle, out)?;
    if !quiet {
        eprintln!("wrote {} files to {}", files.len(), out.display());
    }
    Ok(Summary::from_bundle(&bundle))
}

fn report(s: &Summary) {
    let f = |x: Option<f64>| x.map(|v| format!("{v:.4e}")).unwrap_or_else(|| "-".into());
    println!(
        "{} {} {} eps={:e} rel_error_rho={} rel_error_phi={} sigma_hat={} epochs={} wall_time_s={:.1} config_hash={}",
        s.mode,
        s.problem,
        s.method,
        s.eps,
        f(s.rel_error_rho),
        f(s.rel_error_phi),
        f(s.sigma_hat),
        s.epochs,
        s.wall_time_s,
        &s.config_hash[..12]
    );
}

fn sweep(cfg: &ExperimentConfig, out: &Path, quiet: bool) -> Result<i32, RunError> {
    let mode = match cfg.method {
        MethodChoice::Neural(_) => Mode::Forward,
        _ => Mode::Reference,
    };
    let mut table = String::from("eps,rel_error_rho,rel_error_phi,status,dir\n");
    let mut code = 0;
    for &eps in &cfg.eps_list {
        let mut c = cfg.clone();
        c.eps = eps;
        let dir = out.join(format!("eps_{eps:e}"));
        let f = |x: Option<f64>| x.map(|v| format!("{v:.16e}")).unwrap_or_default();
        match run_one(&c, mode, &dir, quiet) {
            Ok(s) => {
                report(&s);
                table.push_str(&format!("{eps:e},{},{},ok,{}\n", f(s.rel_error_rho), f(s.rel_error_phi), dir.display()));
            }
            Err(e) => {
                eprintln!("eps={eps:e}: {e}");
                code = code.max(e.exit_code());
                table.push_str(&format!("{eps:e},,,failed,{}\n", dir.display()));
            }
        }
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("sweep.csv"), table)?;
    Ok(code)
}

fn compare(args: &CompareArgs) -> Result<(), RunError> {
    let mut table =
        String::from("dir,problem,method,mode,eps,rel_error_rho,rel_error_phi,sigma_hat,epochs,config_hash\n");
    let f = |x: Option<f64>| x.map(|v| format!("{v:.6e}")).unwrap_or_default();
    for d in &args.dirs {
        let s = Summary::load(&d.join("summary.json"))?;
        table.push_str(&format!(
            "{},{},{},{},{:e},{},{},{},{},{}\n",
            d.display(),
            s.problem,
            s.method,
            s.mode,
            s.eps,
            f(s.rel_error_rho),
            f(s.rel_error_phi),
            f(s.sigma_hat),
            s.epochs,
            s.config_hash
        ));
    }
    print!("{table}");
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("compare.csv"), table)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<i32, RunError> = match &cli.command {
        Command::Keys => {
            for (k, d, help) in KEYS {
                println!("{k:<22} {d:<22} {help}");
            }
            Ok(0)
        }
        Command::Compare(args) => compare(args).map(|_| 0),
        Command::Forward(a) | Command::Inverse(a) | Command::Reference(a) | Command::Sweep(a) => {
            match resolve(a) {
                Err(e) => Err(e.into()),
                Ok((cfg, out)) => match &cli.command {
                    Command::Sweep(_) => sweep(&cfg, &out, a.quiet),
                    Command::Forward(_) => run_one(&cfg, Mode::Forward, &out, a.quiet).map(|s| {
                        report(&s);
                        0
                    }),
                    Command::Inverse(_) => run_one(&cfg, Mode::Inverse, &out, a.quiet).map(|s| {
                        report(&s);
                        0
                    }),
                    _ => run_one(&cfg, Mode::Reference, &out, a.quiet).map(|s| {
                        report(&s);
                        0
                    }),
                },
            }
        }
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
