use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sqamp::experiments::{
    rwa_check, run_contrast_vs_alpha, run_gain_curve, run_phase_scan, run_sensitivity_curve,
    run_simulation, run_squeeze_phase_scan, run_unitarity_check,
};
use sqamp::fit::{extract_populations, fit_state_model, FitInit, RabiTrace, StateModel};
use sqamp::{Error, ExperimentConfig, PulseSequence, Result, SweepResult};

#[derive(Parser)]
#[command(name = "sqamp", version, about = "Squeezing-amplified displacement sensing: simulations and fits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSV, JSON and the config echo.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Gain α_f/α_i against squeeze duration.
    GainCurve(RunArgs),
    /// P↓ against the analysis phase φ.
    PhaseScan(RunArgs),
    /// Contrast against the squeeze phase θ.
    SqueezePhaseScan(RunArgs),
    /// Contrast against displacement amplitude.
    ContrastAlpha(RunArgs),
    /// Sensitivity enhancement against squeeze duration.
    Sensitivity(RunArgs),
    /// Ground-state return after squeeze and antisqueeze.
    Unitarity(RunArgs),
    /// Lab-frame drive against the rotating-wave approximation.
    RwaCheck(RunArgs),
    /// Fits a blue-sideband trace and prints the FitResult JSON.
    Fit {
        /// coherent, squeezed, displaced_squeezed or unconstrained.
        #[arg(long)]
        model: String,
        /// CSV with columns t_us,p_down,shots.
        #[arg(long)]
        trace: PathBuf,
        /// Sideband Rabi rate in kHz (initial value, or fixed with --fix-omega).
        #[arg(long, default_value_t = 1.1)]
        omega_khz: f64,
        /// Decay rate γ in 1/s.
        #[arg(long, default_value_t = 0.0)]
        gamma: f64,
        /// Starting values, e.g. `--init alpha=0.2`.
        #[arg(long, value_parser = parse_pair)]
        init: Vec<(String, f64)>,
        #[arg(long)]
        fix_omega: bool,
        #[arg(long)]
        fix_gamma: bool,
        /// Highest Fock level for the unconstrained fit.
        #[arg(long, default_value_t = 20)]
        nmax: usize,
    },
    /// Runs a pulse-sequence file with the configured noise.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Sequence text: `kind duration_us phase_rad strength [quiet]` per line.
        #[arg(long)]
        sequence: PathBuf,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    let v = v.trim().parse::<f64>().map_err(|e| format!("{k}: {e}"))?;
    Ok((k.trim().to_string(), v))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::parse(&read(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Writes `<name>.csv`, `<name>.json`, `config.cfg` and `config.sha256`.
fn write_outputs(out: &Path, res: &SweepResult) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    write(&out.join(format!("{}.csv", res.experiment)), &res.to_csv())?;
    write(&out.join(format!("{}.json", res.experiment)), &(res.to_json() + "\n"))?;
    write(&out.join("config.cfg"), &res.config)?;
    write(&out.join("config.sha256"), &format!("{}\n", res.config_hash))?;
    println!(
        "{}",
        json!({
            "experiment": res.experiment,
            "out": out.display().to_string(),
            "config_hash": res.config_hash,
            "rows": res.rows.len(),
            "failed_rows": res.status.iter().filter(|s| *s != "ok").count(),
        })
    );
    Ok(())
}

fn run_experiment(args: &RunArgs, f: fn(&ExperimentConfig) -> Result<SweepResult>) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let res = f(&cfg)?;
    write_outputs(&args.out, &res)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GainCurve(a) => run_experiment(&a, run_gain_curve),
        Command::PhaseScan(a) => run_experiment(&a, run_phase_scan),
        Command::SqueezePhaseScan(a) => run_experiment(&a, run_squeeze_phase_scan),
        Command::ContrastAlpha(a) => run_experiment(&a, run_contrast_vs_alpha),
        Command::Sensitivity(a) => run_experiment(&a, run_sensitivity_curve),
        Command::Unitarity(a) => run_experiment(&a, run_unitarity_check),
        Command::RwaCheck(a) => run_experiment(&a, rwa_check),
        Command::Fit {
            model,
            trace,
            omega_khz,
            gamma,
            init,
            fix_omega,
            fix_gamma,
            nmax,
        } => {
            let tr = RabiTrace::from_csv(read(&trace)?.as_bytes())?;
            let omega = std::f64::consts::TAU * omega_khz * 1e3;
            let res = if model == "unconstrained" {
                extract_populations(&tr, omega, gamma, nmax)?
            } else {
                let m = StateModel::parse(&model)?;
                let mut fi = FitInit::new(omega, gamma);
                for (k, v) in init {
                    fi.set(&k, v)?;
                }
                fi.fix_omega = fix_omega;
                fi.fix_gamma = fix_gamma;
                fit_state_model(&tr, m, &fi)?
            };
            println!("{}", res.to_json());
            Ok(())
        }
        Command::Simulate { run, sequence } => {
            let cfg = load_config(run.config.as_deref())?;
            let seq = PulseSequence::parse(&read(&sequence)?)?;
            let res = run_simulation(&cfg, &seq)?;
            write_outputs(&run.out, &res)
        }
    }
}

fn error_record(e: &Error) -> serde_json::Value {
    let mut rec = json!({ "error": e.kind(), "message": e.to_string() });
    match e {
        Error::Config { line, key, .. } => {
            rec["line"] = json!(line);
            rec["key"] = json!(key);
        }
        Error::Parse { line, .. } => rec["line"] = json!(line),
        _ => {}
    }
    rec
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let rec = json!({ "error": "usage", "message": e.to_string().trim_end() });
            eprintln!("{rec}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::from(1)
        }
    }
}
