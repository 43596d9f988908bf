//! Command-line front end: parse a config, dispatch one command, persist
//! results. Every command is a pure function of (config bytes, seed) to
//! output files, so repeated runs are byte-identical.

mod config;

use clap::{Parser, Subcommand, ValueEnum};
use config::{load, ConfigFile, RunManifest};
use hbcal_core::airlink::{run_training, LinkDirection, TrainingOutput};
use hbcal_core::channel::{
    sample_channel, sample_mismatch, ChannelRealization, MismatchSet, SystemConfig,
};
use hbcal_core::crc::overhead_report;
use hbcal_core::crlb::{crlb_full, AnalogTruth};
use hbcal_core::eval::run_experiment;
use hbcal_core::hac::{
    calibrate_analog, solve_digital, AnalogCalibration, AnalogInit, DigitalCalibration,
    SolverSettings,
};
use hbcal_core::channel::folded_gains;
use hbcal_core::pilots::{
    design_analog_stage, design_digital_stage, validate_pilot_lengths, AnalogStagePlan,
    DigitalStagePlan,
};
use hbcal_core::streams::substream;
use hbcal_core::Complex64;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "hbcal",
    about = "Reciprocity-calibration simulator for hybrid-beamforming mmWave links",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Path to the TOML config (for `replay`: a scenario.json).
    #[arg(long)]
    config: String,
    /// Master seed for all labeled randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: String,
    /// Result file format where applicable.
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
}

#[derive(Subcommand)]
enum Command {
    /// One full downlink+uplink calibration pass on a drawn scenario.
    Calibrate(CommonArgs),
    /// Monte-Carlo metric sweep driven by the [experiment] config section.
    Sweep(CommonArgs),
    /// Estimation lower bounds for a drawn scenario.
    Crlb(CommonArgs),
    /// Training overhead and complexity comparison for the config.
    Overhead(CommonArgs),
    /// Re-run the solvers on a saved scenario file.
    Replay(CommonArgs),
}

/// Exit 1: the inputs were rejected; exit 2: a solver/runtime failure.
enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn validation(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Crlb(a) => cmd_crlb(a),
        Command::Overhead(a) => cmd_overhead(a),
        Command::Replay(a) => cmd_replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {}", msg);
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {}", msg);
            ExitCode::from(2)
        }
    }
}

fn ensure_out_dir(path: &str) -> Result<PathBuf, CliError> {
    let p = PathBuf::from(path);
    std::fs::create_dir_all(&p)
        .map_err(|e| CliError::Validation(format!("cannot create output dir {}: {}", path, e)))?;
    Ok(p)
}

fn write_file(path: &Path, bytes: &str) -> Result<(), CliError> {
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {}", path.display(), e)))
}

fn load_validated(args: &CommonArgs) -> Result<(ConfigFile, SystemConfig, SolverSettings), CliError> {
    let file = load(&args.config).map_err(CliError::validation)?;
    let cfg = file.system.to_system_config();
    cfg.validate().map_err(CliError::validation)?;
    let settings = file.solver.to_settings().map_err(CliError::validation)?;
    Ok((file, cfg, settings))
}

fn manifest(args: &CommonArgs, command: &str) -> RunManifest {
    RunManifest {
        config_path: args.config.clone(),
        output_dir: args.out.clone(),
        master_seed: args.seed,
        command: command.to_string(),
    }
}

/// Everything needed to re-run the solvers offline.
#[derive(Serialize, Deserialize)]
struct Scenario {
    toolkit_version: String,
    master_seed: u64,
    config: SystemConfig,
    settings: SolverSettings,
    channel: ChannelRealization,
    mismatch: MismatchSet,
    downlink_digital_plan: DigitalStagePlan,
    downlink_analog_plan: AnalogStagePlan,
    uplink_digital_plan: DigitalStagePlan,
    uplink_analog_plan: AnalogStagePlan,
    downlink_training: TrainingOutput,
    uplink_training: TrainingOutput,
}

#[derive(Serialize, Deserialize)]
struct DirectionEstimates {
    digital: DigitalCalibration,
    analog: AnalogCalibration,
}

#[derive(Serialize, Deserialize)]
struct Estimates {
    toolkit_version: String,
    master_seed: u64,
    downlink: DirectionEstimates,
    uplink: DirectionEstimates,
}

fn gate_pilots(cfg: &SystemConfig, side: &str) -> Result<(), CliError> {
    let rep = validate_pilot_lengths(cfg);
    if !rep.ok {
        return Err(CliError::Validation(format!(
            "{} pilot lengths violate the minima: {}",
            side,
            rep.violations(cfg).join("; ")
        )));
    }
    Ok(())
}

fn draw_scenario(
    cfg: &SystemConfig,
    settings: &SolverSettings,
    seed: u64,
) -> Result<Scenario, CliError> {
    let rcfg = cfg.reversed();
    let ch = sample_channel(cfg, &mut substream(seed, "channel", 0));
    let mm = sample_mismatch(cfg, &mut substream(seed, "mismatch", 0));

    let mut brng = substream(seed, "beamformers", 0);
    let dl_dplan = design_digital_stage(cfg, &mut brng).map_err(CliError::validation)?;
    let dl_aplan = design_analog_stage(cfg, &mut brng);
    let mut brng_ul = substream(seed, "beamformers:ul", 0);
    let ul_dplan = design_digital_stage(&rcfg, &mut brng_ul).map_err(CliError::validation)?;
    let ul_aplan = design_analog_stage(&rcfg, &mut brng_ul);

    let dl_training = run_training(
        LinkDirection::Downlink,
        cfg,
        &ch,
        &mm,
        &dl_dplan,
        &dl_aplan,
        cfg.noise_var,
        &mut substream(seed, "noise", 0),
    );
    let ul_training = run_training(
        LinkDirection::Uplink,
        cfg,
        &ch,
        &mm,
        &ul_dplan,
        &ul_aplan,
        cfg.noise_var,
        &mut substream(seed, "noise:ul", 0),
    );

    Ok(Scenario {
        toolkit_version: TOOLKIT_VERSION.to_string(),
        master_seed: seed,
        config: cfg.clone(),
        settings: settings.clone(),
        channel: ch,
        mismatch: mm,
        downlink_digital_plan: dl_dplan,
        downlink_analog_plan: dl_aplan,
        uplink_digital_plan: ul_dplan,
        uplink_analog_plan: ul_aplan,
        downlink_training: dl_training,
        uplink_training: ul_training,
    })
}

fn solve_scenario(sc: &Scenario) -> Result<Estimates, CliError> {
    let cfg = &sc.config;
    let rcfg = cfg.reversed();
    let one = Complex64::new(1.0, 0.0);

    let dl_digital = solve_digital(
        &sc.downlink_training.y_dr,
        &sc.downlink_digital_plan.x_dr,
        sc.downlink_digital_plan.p_dr,
        one,
    )
    .map_err(CliError::runtime)?;
    let dl_analog = calibrate_analog(
        &sc.downlink_training.y_da,
        &sc.downlink_analog_plan,
        cfg,
        &sc.settings,
        AnalogInit::from_data(),
        &mut substream(sc.master_seed, "solver", 0),
    )
    .map_err(CliError::runtime)?;

    let ul_digital = solve_digital(
        &sc.uplink_training.y_dr,
        &sc.uplink_digital_plan.x_dr,
        sc.uplink_digital_plan.p_dr,
        one,
    )
    .map_err(CliError::runtime)?;
    let ul_analog = calibrate_analog(
        &sc.uplink_training.y_da,
        &sc.uplink_analog_plan,
        &rcfg,
        &sc.settings,
        AnalogInit::from_data(),
        &mut substream(sc.master_seed, "solver:ul", 0),
    )
    .map_err(CliError::runtime)?;

    Ok(Estimates {
        toolkit_version: TOOLKIT_VERSION.to_string(),
        master_seed: sc.master_seed,
        downlink: DirectionEstimates {
            digital: dl_digital,
            analog: dl_analog,
        },
        uplink: DirectionEstimates {
            digital: ul_digital,
            analog: ul_analog,
        },
    })
}

fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map_err(CliError::runtime)
}

fn cmd_calibrate(args: &CommonArgs) -> Result<(), CliError> {
    let (_, cfg, settings) = load_validated(args)?;
    gate_pilots(&cfg, "downlink")?;
    gate_pilots(&cfg.reversed(), "uplink")?;
    let out = ensure_out_dir(&args.out)?;

    let scenario = draw_scenario(&cfg, &settings, args.seed)?;
    let estimates = solve_scenario(&scenario)?;

    write_file(&out.join("scenario.json"), &to_json(&scenario)?)?;
    write_file(&out.join("estimates.json"), &to_json(&estimates)?)?;
    write_file(
        &out.join("manifest.json"),
        &to_json(&manifest(args, "calibrate"))?,
    )?;
    println!(
        "calibrate: wrote scenario.json and estimates.json to {} (downlink residual {:.3e}, \
         uplink residual {:.3e})",
        out.display(),
        estimates
            .downlink
            .analog
            .objective_trace
            .last()
            .copied()
            .unwrap_or(f64::NAN),
        estimates
            .uplink
            .analog
            .objective_trace
            .last()
            .copied()
            .unwrap_or(f64::NAN),
    );
    Ok(())
}

fn cmd_replay(args: &CommonArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        CliError::Validation(format!("cannot read scenario {}: {}", args.config, e))
    })?;
    let scenario: Scenario =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(e.to_string()))?;
    scenario.config.validate().map_err(CliError::validation)?;
    let out = ensure_out_dir(&args.out)?;
    let estimates = solve_scenario(&scenario)?;
    write_file(&out.join("estimates.json"), &to_json(&estimates)?)?;
    write_file(
        &out.join("manifest.json"),
        &to_json(&manifest(args, "replay"))?,
    )?;
    println!("replay: wrote estimates.json to {}", out.display());
    Ok(())
}

fn cmd_sweep(args: &CommonArgs) -> Result<(), CliError> {
    let (file, cfg, settings) = load_validated(args)?;
    let exp = file.experiment.as_ref().ok_or_else(|| {
        CliError::Validation("config has no [experiment] section for `sweep`".into())
    })?;
    let spec = exp
        .to_spec(cfg, settings, args.seed)
        .map_err(CliError::validation)?;
    spec.validate().map_err(CliError::validation)?;
    let out = ensure_out_dir(&args.out)?;

    let table = run_experiment(&spec).map_err(CliError::runtime)?;
    match args.format {
        OutputFormat::Csv => write_file(&out.join("results.csv"), &table.to_csv())?,
        OutputFormat::Json => write_file(&out.join("results.json"), &to_json(&table)?)?,
    }

    #[derive(Serialize)]
    struct Meta<'a> {
        toolkit_version: &'a str,
        master_seed: u64,
        spec: &'a hbcal_core::eval::ExperimentSpec,
    }
    write_file(
        &out.join("results_meta.json"),
        &to_json(&Meta {
            toolkit_version: TOOLKIT_VERSION,
            master_seed: args.seed,
            spec: &spec,
        })?,
    )?;
    write_file(
        &out.join("manifest.json"),
        &to_json(&manifest(args, "sweep"))?,
    )?;
    println!(
        "sweep: {} rows over {} values written to {}",
        table.rows.len(),
        spec.sweep_values.len(),
        out.display()
    );
    Ok(())
}

fn cmd_crlb(args: &CommonArgs) -> Result<(), CliError> {
    let (_, cfg, settings) = load_validated(args)?;
    gate_pilots(&cfg, "downlink")?;
    let out = ensure_out_dir(&args.out)?;

    let scenario = draw_scenario(&cfg, &settings, args.seed)?;
    let truth = AnalogTruth {
        t2: scenario.mismatch.t2.clone(),
        u2: scenario.mismatch.u2.clone(),
        h_alpha: folded_gains(&cfg, &scenario.channel),
        thetas: scenario.channel.thetas.clone(),
        phis: scenario.channel.phis.clone(),
    };
    let report = crlb_full(
        &cfg,
        &scenario.downlink_analog_plan,
        &truth,
        scenario.downlink_training.beta_d,
        cfg.l_dr(),
    )
    .map_err(CliError::runtime)?;

    match args.format {
        OutputFormat::Json => write_file(&out.join("crlb.json"), &to_json(&report)?)?,
        OutputFormat::Csv => {
            let mut csv = String::from("coefficient,index,crlb\n");
            let dump = |csv: &mut String, name: &str, vals: &[f64]| {
                for (i, v) in vals.iter().enumerate() {
                    csv.push_str(&format!("{},{},{}\n", name, i, v));
                }
            };
            dump(&mut csv, "u1", &report.crlb_u1);
            dump(&mut csv, "t1", &report.crlb_t1);
            dump(&mut csv, "u2", &report.crlb_u2);
            dump(&mut csv, "t2", &report.crlb_t2);
            write_file(&out.join("crlb.csv"), &csv)?;
        }
    }
    write_file(
        &out.join("manifest.json"),
        &to_json(&manifest(args, "crlb"))?,
    )?;
    println!(
        "crlb: analog information condition {:.3e}{}",
        report.fim_analog_cond,
        if report.ill_conditioned {
            " (flagged ill-conditioned)"
        } else {
            ""
        }
    );
    Ok(())
}

fn cmd_overhead(args: &CommonArgs) -> Result<(), CliError> {
    let (_, cfg, _) = load_validated(args)?;
    let report = overhead_report(&cfg);
    let out = ensure_out_dir(&args.out)?;
    match args.format {
        OutputFormat::Json => {
            let json = to_json(&report)?;
            println!("{}", json);
            write_file(&out.join("overhead.json"), &json)?;
        }
        OutputFormat::Csv => {
            let mut csv = String::from("scheme,overhead,complexity\n");
            csv.push_str(&format!(
                "CRC,{},{}\n",
                report.crc_overhead, report.crc_flops_order
            ));
            csv.push_str(&format!(
                "HAC,{},{}\n",
                report.hac_overhead, report.hac_flops_order
            ));
            print!("{}", csv);
            write_file(&out.join("overhead.csv"), &csv)?;
        }
    }
    Ok(())
}
