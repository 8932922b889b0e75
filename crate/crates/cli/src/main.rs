use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tlsloss::decomposition::{aggregate_triplets, solve_placement, HydrocarbonPlacement};
use tlsloss::design::{
    coupling_capacitance, cpw_f0, cpw_length, extract_lumped, CpwDesign, FrequencyConvention, SPEED_OF_LIGHT,
};
use tlsloss::freqshift::{fit_freq_shift, FreqShiftFitOptions, GammaRegime};
use tlsloss::lineshape::{detect_nonlinearity, fit_trace, NonlinearityReport, TraceFit, TraceFitOptions};
use tlsloss::lossmodel::fit_sweep;
use tlsloss::pipeline::format::to_canonical_json;
use tlsloss::pipeline::io::{ingest, parse_freq_shift_csv, parse_surface_table_json, parse_sweep_csv, ParseIssue};
use tlsloss::pipeline::run::{load_outputs, render_report};
use tlsloss::pipeline::{run_pipeline, write_outputs, PipelineError, RunConfig};
use tlsloss::synth::{generate_campaign, write_campaign, CampaignSpec, PopulationSpec, CAMPAIGN_CONFIG_FILE};

/// Loss-channel extraction for superconducting microwave resonators.
#[derive(Parser)]
#[command(name = "tlsloss", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Flags override `TLSLOSS_*`
/// environment variables, which override the config file.
#[derive(Args)]
struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Thermal-conductivity regime for frequency-shift fits: -1, -1/2 or -1/3.
    #[arg(long, global = true, allow_hyphen_values = true, value_parser = parse_gamma)]
    gamma: Option<GammaRegime>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

fn parse_gamma(s: &str) -> Result<GammaRegime, String> {
    s.parse()
}

#[derive(Subcommand)]
enum Command {
    /// Fit the |S21| lineshape of every trace in the given CSV files.
    FitTrace { inputs: Vec<PathBuf> },
    /// Fit Q_int(n, T) sweeps from a sweep CSV.
    FitSweep { input: PathBuf },
    /// Fit a fractional frequency shift curve.
    FitFshift { input: PathBuf },
    /// Split surface loss across interfaces from a surface-loss table.
    Decompose { table: PathBuf },
    /// Resonator design calculators.
    #[command(subcommand)]
    Design(Design),
    /// Write a synthetic campaign ready for `run`.
    Synth {
        #[arg(long, default_value_t = 3)]
        devices_per_treatment: usize,
        /// Per-point signal-to-noise ratio of the traces.
        #[arg(long, default_value_t = 40.0)]
        snr_db: f64,
    },
    /// Run the full pipeline and write the report bundle.
    Run {
        /// Trace files, directories or glob patterns; replaces the configured list.
        traces: Vec<String>,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        surface_table: Option<PathBuf>,
        /// Input-line attenuation for devices the registry does not cover.
        #[arg(long, allow_hyphen_values = true)]
        attenuation_db: Option<f64>,
    },
    /// Print the summary of a finished run.
    Report,
}

#[derive(Subcommand)]
enum Design {
    /// Quarter-wave CPW resonance frequency.
    CpwF0 {
        #[arg(long)]
        length_m: f64,
        #[arg(long)]
        eps_eff: f64,
    },
    /// Quarter-wave CPW length for a target frequency.
    CpwLength {
        #[arg(long)]
        f0_hz: f64,
        #[arg(long)]
        eps_eff: f64,
    },
    /// Coupling capacitance for a target Q_c.
    Coupling {
        #[arg(long)]
        q_c: f64,
        #[arg(long)]
        f0_hz: f64,
        #[arg(long, default_value_t = 50.0)]
        z0_ohm: f64,
    },
    /// Lumped-element extraction from a simulated meander and resonator.
    Lumped {
        #[arg(long)]
        c_l_f: f64,
        #[arg(long)]
        f_meander_hz: f64,
        #[arg(long)]
        f_resonator_hz: f64,
        #[arg(long, value_enum, default_value_t = Convention::Angular)]
        convention: Convention,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    Angular,
    Literal,
}

/// A failure with the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

fn fatal(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(g: &Global) -> Result<RunConfig, Failure> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(std::env::vars())?;
    if let Some(o) = &g.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(gm) = g.gamma {
        cfg.gamma = gm;
    }
    if let Some(j) = g.jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

/// Write JSON to `<out>/<name>` when an output directory was given,
/// otherwise to stdout.
fn emit<T: Serialize + ?Sized>(value: &T, out: Option<&Path>, name: &str) -> Result<(), Failure> {
    let text = to_canonical_json(value).map_err(|e| fatal(format!("serialization: {e}")))?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| PipelineError::io(&path, e))?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn report_issues(issues: &[ParseIssue]) {
    for i in issues {
        eprintln!("warning: {i}");
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    Ok(fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?)
}

#[derive(Serialize)]
struct TraceResult {
    label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<TraceFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nonlinearity: Option<NonlinearityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn dispatch(cli: Cli) -> Result<u8, Failure> {
    let g = &cli.global;
    match cli.command {
        Command::FitTrace { inputs } => {
            let cfg = load_config(g)?;
            let data = ingest(&inputs)?;
            report_issues(&data.issues);
            let options = TraceFitOptions::default();
            let thresholds = cfg.thresholds.nonlinearity();
            let mut failed = false;
            let results: Vec<TraceResult> = data
                .traces
                .values()
                .map(|t| match fit_trace(t, &options) {
                    Ok(fit) => TraceResult {
                        label: t.meta.label(),
                        nonlinearity: Some(detect_nonlinearity(t, &fit.params, &thresholds)),
                        fit: Some(fit),
                        error: None,
                    },
                    Err(e) => {
                        failed = true;
                        TraceResult {
                            label: t.meta.label(),
                            fit: None,
                            nonlinearity: None,
                            error: Some(e.to_string()),
                        }
                    }
                })
                .collect();
            emit(&results, g.out.as_deref(), "trace_fits.json")?;
            Ok(u8::from(failed || !data.issues.is_empty()))
        }
        Command::FitSweep { input } => {
            let cfg = load_config(g)?;
            let parsed = parse_sweep_csv(&read(&input)?, &input.display().to_string());
            report_issues(&parsed.issues);
            let options = cfg.loss_fit_options();
            let mut failed = false;
            let mut fits = Vec::new();
            for d in &parsed.items {
                match fit_sweep(d, &options) {
                    Ok(f) => fits.push(f),
                    Err(e) => {
                        failed = true;
                        eprintln!("warning: {}: {e}", d.device_id);
                    }
                }
            }
            emit(&fits, g.out.as_deref(), "sweep_fits.json")?;
            Ok(u8::from(failed || !parsed.issues.is_empty()))
        }
        Command::FitFshift { input } => {
            let cfg = load_config(g)?;
            let (data, issues) = parse_freq_shift_csv(&read(&input)?, &input.display().to_string())?;
            report_issues(&issues);
            let fit = fit_freq_shift(&data, cfg.gamma, &FreqShiftFitOptions::default())
                .map_err(|e| Failure {
                    code: 1,
                    message: e.to_string(),
                })?;
            emit(&fit, g.out.as_deref(), "freq_shift_fit.json")?;
            Ok(u8::from(!issues.is_empty()))
        }
        Command::Decompose { table } => {
            let table = parse_surface_table_json(&read(&table)?, &table.display().to_string())?;
            let result = aggregate_triplets(&table).map_err(|e| Failure {
                code: 1,
                message: e.to_string(),
            })?;
            let alternative = solve_placement(&table, HydrocarbonPlacement::MetalAirAndSubstrateAir).ok();
            #[derive(Serialize)]
            struct Out<'a> {
                decomposition: &'a tlsloss::decomposition::DecompositionResult,
                #[serde(skip_serializing_if = "Option::is_none")]
                alternative_placement: Option<tlsloss::decomposition::PlacementSolution>,
            }
            emit(
                &Out {
                    decomposition: &result,
                    alternative_placement: alternative,
                },
                g.out.as_deref(),
                "decomposition.json",
            )?;
            Ok(0)
        }
        Command::Design(d) => {
            let bad = |e: tlsloss::design::DesignError| fatal(e.to_string());
            let value = match d {
                Design::CpwF0 { length_m, eps_eff } => {
                    serde_json::json!({ "f0_hz": cpw_f0(&CpwDesign::new(length_m, eps_eff)).map_err(bad)? })
                }
                Design::CpwLength { f0_hz, eps_eff } => {
                    serde_json::json!({ "length_m": cpw_length(f0_hz, eps_eff, SPEED_OF_LIGHT).map_err(bad)? })
                }
                Design::Coupling { q_c, f0_hz, z0_ohm } => {
                    serde_json::json!({ "c_c_f": coupling_capacitance(q_c, f0_hz, z0_ohm).map_err(bad)? })
                }
                Design::Lumped {
                    c_l_f,
                    f_meander_hz,
                    f_resonator_hz,
                    convention,
                } => {
                    let conv = match convention {
                        Convention::Angular => FrequencyConvention::Angular,
                        Convention::Literal => FrequencyConvention::Literal,
                    };
                    serde_json::to_value(extract_lumped(c_l_f, f_meander_hz, f_resonator_hz, conv).map_err(bad)?)
                        .map_err(|e| fatal(e.to_string()))?
                }
            };
            emit(&value, g.out.as_deref(), "design.json")?;
            Ok(0)
        }
        Command::Synth {
            devices_per_treatment,
            snr_db,
        } => {
            let cfg = load_config(g)?;
            let mut spec = CampaignSpec {
                population: PopulationSpec {
                    devices_per_treatment,
                    ..PopulationSpec::default()
                },
                seed: cfg.seed,
                ..CampaignSpec::default()
            };
            spec.trace.snr_db = Some(snr_db);
            let campaign = generate_campaign(&spec).map_err(fatal)?;
            let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("campaign"));
            write_campaign(&campaign, &dir, cfg.seed)?;
            eprintln!(
                "wrote {} devices, {} traces; run with --config {}",
                campaign.devices.len(),
                campaign.traces.len(),
                dir.join(CAMPAIGN_CONFIG_FILE).display()
            );
            Ok(0)
        }
        Command::Run {
            traces,
            registry,
            surface_table,
            attenuation_db,
        } => {
            let mut cfg = load_config(g)?;
            if !traces.is_empty() {
                cfg.traces = traces;
            }
            if registry.is_some() {
                cfg.registry = registry;
            }
            if surface_table.is_some() {
                cfg.surface_table = surface_table;
            }
            if attenuation_db.is_some() {
                cfg.attenuation.default_db = attenuation_db;
            }
            let out = run_pipeline(&cfg)?;
            write_outputs(&out, &cfg.output_dir)?;
            print!("{}", render_report(&out));
            Ok(out.summary.status.exit_code() as u8)
        }
        Command::Report => {
            let cfg = load_config(g)?;
            let out = load_outputs(&cfg.output_dir)?;
            print!("{}", render_report(&out));
            Ok(0)
        }
    }
}
