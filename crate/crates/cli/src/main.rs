//! `crfl`: train, certify, sweep and analyse certifiably robust federated
//! learning runs from a JSON configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crfl_core::certify::{calculate_radius, AttackerTerm, RadiusContext};
use crfl_core::config::RunConfig;
use crfl_core::engine::AffineSchedule;
use crfl_core::model::ModelParams;
use crfl_core::pipeline::{self, SweepAxis};
use crfl_core::report::{self, fmt_num, Series, SweepSummaryRow};
use crfl_core::CrflError;

#[derive(Parser)]
#[command(
    name = "crfl",
    version,
    about = "Certifiably robust federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the federated model and write the checkpoint and round trace.
    Train(ConfigArgs),
    /// Certify a trained checkpoint with parameter smoothing.
    Certify {
        #[command(flatten)]
        common: ConfigArgs,
        /// Checkpoint to certify (default: <out>/model.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Round trace of the training run (default: trace.csv next to the checkpoint).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train and certify once per value of one configuration axis.
    Sweep {
        #[command(flatten)]
        common: ConfigArgs,
        /// One of sigma, R, gamma, poison_ratio, N, T.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
    },
    /// Distance between coupled benign and backdoored training runs.
    Closeness(ConfigArgs),
    /// Evaluate the certified radius for given bounds and parameters.
    RadiusCalc(RadiusArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CrflError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        Ok(cfg)
    }
}

/// Defaults are the MNIST setting with one attacker at round 10.
#[derive(Args)]
struct RadiusArgs {
    #[arg(long)]
    p_a: f64,
    #[arg(long)]
    p_b: f64,
    /// Number of identical attackers R.
    #[arg(long, default_value_t = 1)]
    attackers: usize,
    /// Aggregation weight of each attacker.
    #[arg(long, default_value_t = 0.05)]
    p: f64,
    #[arg(long, default_value_t = 10.0)]
    gamma: f64,
    #[arg(long, default_value_t = 30.0)]
    tau: f64,
    #[arg(long, default_value_t = 0.001)]
    eta: f64,
    /// q_B / n_B.
    #[arg(long, default_value_t = 0.05)]
    poison_ratio: f64,
    #[arg(long, default_value_t = 10)]
    t_adv: usize,
    /// Total rounds T.
    #[arg(long, default_value_t = 100)]
    rounds: usize,
    #[arg(long, default_value_t = 0.1)]
    rho_slope: f64,
    #[arg(long, default_value_t = 2.0)]
    rho_intercept: f64,
    /// Training noise for rounds before T.
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    /// Smoothing noise at round T.
    #[arg(long, default_value_t = 0.01)]
    sigma_final: f64,
    /// Override L_Z (default: computed from rho at t_adv).
    #[arg(long)]
    lz: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<CrflError>()
                .map_or(2, CrflError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

/// `CRFL_THREADS` caps the worker pool; the default is one worker per core.
fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("CRFL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .with_context(|| format!("CRFL_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train(args) => cmd_train(&args.load()?),
        Command::Certify {
            common,
            checkpoint,
            trace,
        } => cmd_certify(&common.load()?, checkpoint, trace),
        Command::Sweep {
            common,
            axis,
            values,
        } => cmd_sweep(&common.load()?, axis.parse()?, &values),
        Command::Closeness(args) => cmd_closeness(&args.load()?),
        Command::RadiusCalc(args) => cmd_radius_calc(&args),
    }
}

/// Writes a CSV through `write` and re-reads it with the schema validator.
fn emit_csv(path: &Path, write: impl FnOnce(&Path) -> crfl_core::Result<()>) -> anyhow::Result<()> {
    write(path)?;
    report::validate_csv(path).with_context(|| format!("re-reading {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> anyhow::Result<()> {
    let prep = pipeline::prepare(cfg, pipeline::load_data(cfg)?)?;
    let trained = pipeline::train(&prep, None)?;
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let ckpt = dir.join("model.bin");
    trained.output.params.save(&ckpt)?;
    info!("wrote {}", ckpt.display());
    emit_csv(&dir.join("trace.csv"), |p| {
        report::write_trace_csv(p, &trained.output.traces)
    })?;
    match trained.attack_success_rate {
        Some(asr) => println!(
            "train: clean test accuracy {} | attack success rate {}",
            fmt_num(trained.clean_accuracy),
            fmt_num(asr)
        ),
        None => println!(
            "train: clean test accuracy {}",
            fmt_num(trained.clean_accuracy)
        ),
    }
    Ok(())
}

fn cmd_certify(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    trace: Option<PathBuf>,
) -> anyhow::Result<()> {
    let ckpt = checkpoint.unwrap_or_else(|| cfg.output.dir.join("model.bin"));
    let params = ModelParams::load(&ckpt)?;
    let trace_path = trace.unwrap_or_else(|| ckpt.with_file_name("trace.csv"));
    let traces = if trace_path.exists() {
        Some(report::read_trace_csv(&trace_path)?)
    } else {
        None
    };
    let prep = pipeline::prepare(cfg, pipeline::load_data(cfg)?)?;
    if cfg.attack.is_none() {
        warn!("no attack block: certifying against the default threat model");
    }
    let cert = pipeline::certify(cfg, &prep, &params, traces.as_deref())?;
    let dir = &cfg.output.dir;
    emit_csv(&dir.join("certify_samples.csv"), |p| {
        report::write_samples_csv(p, &cert.results)
    })?;
    emit_csv(&dir.join("certify_curve.csv"), |p| {
        report::write_curve_csv(p, &cert.curve)
    })?;
    if cfg.output.emit_svg {
        let acc: Vec<_> = cert
            .curve
            .iter()
            .map(|c| (c.r, c.certified_accuracy))
            .collect();
        let rate: Vec<_> = cert.curve.iter().map(|c| (c.r, c.certified_rate)).collect();
        report::write_chart(
            &dir.join("certify_curve"),
            "Certified accuracy and rate",
            "radius r",
            "fraction of test set",
            &[
                Series {
                    name: "certified accuracy",
                    points: acc,
                },
                Series {
                    name: "certified rate",
                    points: rate,
                },
            ],
        )?;
    }
    let abstained = cert.results.iter().filter(|r| r.is_abstain()).count();
    println!(
        "certify: {} samples | smoothed accuracy {} | abstained {} | critical radius {}",
        cert.results.len(),
        fmt_num(cert.smoothed_accuracy),
        abstained,
        fmt_num(cert.critical_radius)
    );
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis, values: &[f64]) -> anyhow::Result<()> {
    let points = pipeline::sweep(cfg, axis, values, None)?;
    let dir = &cfg.output.dir;
    let curves: Vec<_> = points
        .iter()
        .map(|p| (p.value, p.cert.curve.clone()))
        .collect();
    let summary: Vec<_> = points
        .iter()
        .map(|p| SweepSummaryRow {
            axis_value: p.value,
            critical_radius: p.cert.critical_radius,
            clean_accuracy: p.train.clean_accuracy,
            smoothed_accuracy: p.cert.smoothed_accuracy,
            attack_success_rate: p.train.attack_success_rate,
            certified_samples: p.cert.results.iter().filter(|r| !r.is_abstain()).count(),
        })
        .collect();
    let stem = format!("sweep_{}", axis.name());
    emit_csv(&dir.join(format!("{stem}.csv")), |p| {
        report::write_sweep_csv(p, &curves)
    })?;
    emit_csv(&dir.join(format!("{stem}_summary.csv")), |p| {
        report::write_sweep_summary_csv(p, &summary)
    })?;
    if cfg.output.emit_svg {
        let names: Vec<String> = points
            .iter()
            .map(|p| format!("{axis} = {}", fmt_num(p.value)))
            .collect();
        let series: Vec<Series> = points
            .iter()
            .zip(&names)
            .map(|(p, name)| Series {
                name,
                points: p
                    .cert
                    .curve
                    .iter()
                    .map(|c| (c.r, c.certified_accuracy))
                    .collect(),
            })
            .collect();
        report::write_chart(
            &dir.join(&stem),
            &format!("Certified accuracy, sweep over {axis}"),
            "radius r",
            "certified accuracy",
            &series,
        )?;
    }
    for row in &summary {
        println!(
            "sweep {axis} = {}: critical radius {} | clean accuracy {} | smoothed accuracy {}",
            fmt_num(row.axis_value),
            fmt_num(row.critical_radius),
            fmt_num(row.clean_accuracy),
            fmt_num(row.smoothed_accuracy)
        );
    }
    Ok(())
}

fn cmd_closeness(cfg: &RunConfig) -> anyhow::Result<()> {
    let trace = pipeline::closeness(cfg, None)?;
    let dir = &cfg.output.dir;
    emit_csv(&dir.join("closeness.csv"), |p| {
        report::write_closeness_csv(p, &trace)
    })?;
    if cfg.output.emit_svg {
        let pts: Vec<_> = trace
            .rows
            .iter()
            .map(|r| (r.round as f64, r.distance))
            .collect();
        report::write_chart(
            &dir.join("closeness"),
            "Distance between backdoored and benign global models",
            "round t",
            "l2 distance",
            &[Series {
                name: "distance",
                points: pts,
            }],
        )?;
    }
    let slope = trace.post_attack_slope();
    println!(
        "closeness: t_adv {} | distance at t_adv {} | final distance {} | post-attack slope {} | non-increasing {}",
        trace.t_adv,
        fmt_num(trace.rows[trace.t_adv - 1].distance),
        fmt_num(trace.rows.last().map_or(0.0, |r| r.distance)),
        slope.map_or_else(|| "n/a".to_string(), fmt_num),
        trace.non_increasing_after_attack()
    );
    Ok(())
}

fn cmd_radius_calc(a: &RadiusArgs) -> anyhow::Result<()> {
    if a.t_adv == 0 || a.t_adv > a.rounds {
        bail!(CrflError::Config(format!(
            "t_adv = {} must be within 1..={}",
            a.t_adv, a.rounds
        )));
    }
    let rho = AffineSchedule {
        slope: a.rho_slope,
        intercept: a.rho_intercept,
    };
    let sigma_at = |t: usize| {
        if t == a.rounds {
            a.sigma_final
        } else {
            a.sigma
        }
    };
    let term = AttackerTerm {
        p: a.p,
        gamma: a.gamma,
        tau: a.tau,
        eta: a.eta,
        poison_ratio: a.poison_ratio,
    };
    let schedule = (a.t_adv + 1..=a.rounds)
        .map(|t| (rho.at(t), sigma_at(t)))
        .collect();
    let mut ctx = RadiusContext::new(
        a.t_adv,
        rho.at(a.t_adv),
        sigma_at(a.t_adv),
        vec![term; a.attackers],
        schedule,
    );
    if let Some(lz) = a.lz {
        ctx.lz = lz;
    }
    let r = calculate_radius(a.p_a, a.p_b, &ctx)?;
    // full precision here; CSV files use the 9-digit format
    println!("RAD {} saturated {}", r.value, r.saturated);
    Ok(())
}
