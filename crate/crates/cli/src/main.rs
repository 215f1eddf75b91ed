use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcm_core::harness::{
    emit_traces, load_config, monte_carlo, netdemo, run_scenario, validate_envelope, EnvelopeStudy, NetDemo,
    ScenarioConfig,
};
use mcm_core::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Multi-pursuer bearing-only tracking and net capture simulator.
#[derive(Parser)]
#[command(name = "mcm", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write traces.
    Run(ScenarioArgs),
    /// Monte Carlo over derived seeds.
    Batch {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 20)]
        trials: u64,
    },
    /// Single net launch toward a static target; exports frames.
    Netdemo(StudyArgs),
    /// Compare the simplified capture envelope with full net rollouts.
    ValidateEnvelope(StudyArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario TOML; missing keys take the sim4 defaults.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in scenario: sim4 or exp3.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl ScenarioArgs {
    fn load(&self) -> Result<ScenarioConfig, Error> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(p), _) => load_config(p)?,
            (None, Some(name)) => ScenarioConfig::preset(name)?,
            (None, None) => ScenarioConfig::sim4(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn load_study<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Error> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let body = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(path, body + "\n")?;
    Ok(())
}

/// Exit status: 0 ok, 1 bad input, 2 a run aborted.
fn execute(cli: Cli) -> Result<u8, Error> {
    match cli.cmd {
        Cmd::Run(args) => {
            let cfg = args.load()?;
            let out = run_scenario(&cfg)?;
            emit_traces(&out, &args.out)?;
            let m = &out.metrics;
            println!(
                "{}: seed {} simulated {:.2} s, position RMSE {}, velocity RMSE {}",
                m.name,
                m.seed,
                m.simulated,
                fmt_opt(m.mean_position_rmse()),
                fmt_opt(m.mean_velocity_rmse())
            );
            match (m.triggers.first(), m.verdict) {
                (Some(t), Some(v)) => println!(
                    "agent {} fired at {:.2} s: {}",
                    t.agent,
                    t.t,
                    if v.captured { "captured" } else { "missed" }
                ),
                (Some(t), None) => println!("agent {} fired at {:.2} s (not adjudicated)", t.agent, t.t),
                _ => println!("no launch"),
            }
            println!("wrote {}", args.out.display());
            Ok(0)
        }
        Cmd::Batch { scenario, trials } => {
            let cfg = scenario.load()?;
            let report = monte_carlo(&cfg, trials, cfg.seed)?;
            std::fs::create_dir_all(&scenario.out)?;
            write_json(&scenario.out.join("batch.json"), &report)?;
            let mut csv = String::from("trial,seed,verdict,trigger_time,first_enclosure_time,position_rmse,velocity_rmse\n");
            for t in &report.trials {
                let verdict = serde_json::to_value(&t.verdict).map_err(|e| Error::Io(e.to_string()))?;
                let verdict = match verdict {
                    serde_json::Value::String(s) => s,
                    _ => "aborted".into(),
                };
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    t.trial,
                    t.seed,
                    verdict,
                    fmt_opt(t.trigger_time),
                    fmt_opt(t.first_enclosure_time),
                    fmt_opt(t.position_rmse),
                    fmt_opt(t.velocity_rmse)
                );
            }
            std::fs::write(scenario.out.join("trials.csv"), csv)?;
            let s = report.summary;
            println!(
                "{}/{} captured ({:.1}%, 95% CI {:.1}-{:.1}%), {} aborted",
                s.successes,
                s.successes + s.misses,
                100.0 * s.rate,
                100.0 * s.ci_low,
                100.0 * s.ci_high,
                s.aborted
            );
            Ok(if s.aborted > 0 { 2 } else { 0 })
        }
        Cmd::Netdemo(args) => {
            let cfg: NetDemo = load_study(args.config.as_deref())?;
            let (report, traj) = netdemo(&cfg)?;
            std::fs::create_dir_all(&args.out)?;
            let frames = std::fs::File::create(args.out.join("net_frames.csv"))?;
            traj.write_frames(std::io::BufWriter::new(frames))?;
            write_json(&args.out.join("netdemo.json"), &report)?;
            match report.enclosure_delay {
                Some(d) => println!(
                    "launch at {:.2} s, target enclosed {:.3} s later, {}",
                    report.launch_time,
                    d,
                    if report.verdict.captured { "captured" } else { "mouth did not close" }
                ),
                None => println!("launch at {:.2} s, target never enclosed", report.launch_time),
            }
            Ok(0)
        }
        Cmd::ValidateEnvelope(args) => {
            let cfg: EnvelopeStudy = load_study(args.config.as_deref())?;
            let r = validate_envelope(&cfg)?;
            std::fs::create_dir_all(&args.out)?;
            write_json(&args.out.join("envelope_study.json"), &r)?;
            println!(
                "{} points, agreement {:.1}% (fp {}, fn {}), query {:.2e} s vs rollout {:.2e} s, speedup {:.1e}",
                r.points,
                100.0 * r.agreement,
                r.false_positive,
                r.false_negative,
                r.query_seconds,
                r.rollout_seconds,
                r.speedup
            );
            Ok(0)
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Aborted { .. }) { 2 } else { 1 })
        }
    }
}
