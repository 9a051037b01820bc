//! `coperc`: command-line front end of the simulator.
//!
//! Every command except `inspect` prints one JSON summary line on stdout and
//! exits 0. Failures print one JSON line `{"error": {"kind", "key",
//! "message"}}` on stderr and exit nonzero: 2 for usage errors, 3 for a failed
//! budget gate, 1 otherwise. `key` is the dotted config key when one is at
//! fault.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use coperception::eval::{pr_curve, write_sweep_csv, SuiteScore};
use coperception::harness::{
    build_suite, check_budget, family_scene, latency_sweep, run_ablation, run_suite, sweep_epsilon_c,
    write_ablation_csv, write_latency_csv, ExperimentConfig, Family, HarnessError,
};
use coperception::exec::Executor;
use coperception::message::ValuePrecision;
use coperception::protocol::{describe_payload, read_log_file, replay_round, run_round_with, Bus, RoundTrace};
use coperception::scene_sim::Scene;

#[derive(Parser)]
#[command(name = "coperc", version, about = "Supply-demand-aware collaborative perception simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Overrides of config keys; applied on top of `--config`, then validated.
#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base seed (`seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (`out_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Scenes processed concurrently (`workers`).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Suite families, repeatable (`suite.families`).
    #[arg(long = "family", global = true, value_parser = parse_family)]
    families: Vec<Family>,
    /// Scenes per family (`suite.scenes_per_family`).
    #[arg(long, global = true)]
    scenes_per_family: Option<usize>,
    /// Supply threshold at the operating point (`round.eps_c`).
    #[arg(long, global = true)]
    eps_c: Option<f32>,
    /// Demand threshold (`round.eps_a`).
    #[arg(long, global = true)]
    eps_a: Option<f32>,
    /// Channel compression ratio (`round.c0`).
    #[arg(long, global = true)]
    c0: Option<usize>,
    /// Feature value precision, `half` or `single` (`round.precision`).
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<ValuePrecision>,
    /// Late fusion on or off (`round.late_fusion`).
    #[arg(long, global = true)]
    late_fusion: Option<bool>,
    /// Per-agent budget (`budget_mbps`).
    #[arg(long, global = true)]
    budget_mbps: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the fixture suite as scene JSON files under `<out>/scenes`.
    Generate,
    /// Run rounds and write their JSON traces.
    ///
    /// With `--scene` or `--pick` one round runs and `<out>/trace.json` is
    /// written; otherwise every suite scene runs, `<out>/traces.jsonl` holds
    /// one trace per line and `<out>/pr50.csv`, `<out>/pr70.csv` the pooled
    /// precision-recall curves.
    Run {
        /// Scene JSON file.
        #[arg(long, value_name = "FILE", conflicts_with = "pick")]
        scene: Option<PathBuf>,
        /// Suite scene as `family/index`, e.g. `occlusion/3`.
        #[arg(long, value_name = "FAMILY/INDEX")]
        pick: Option<String>,
        /// Ego agent of a single round.
        #[arg(long, default_value_t = 0)]
        ego: u32,
        /// Collaborator staleness of a single round.
        #[arg(long, default_value_t = 0.0)]
        latency_ms: f64,
        /// Record the single round's wire traffic to this log.
        #[arg(long, value_name = "FILE", conflicts_with = "replay")]
        log: Option<PathBuf>,
        /// Re-run the ego side of a single round from a recorded log.
        #[arg(long, value_name = "FILE")]
        replay: Option<PathBuf>,
    },
    /// ε_c sweep with late fusion off and on; writes `<out>/sweep.csv`.
    Sweep,
    /// Module ablation ladder; writes `<out>/ablation.csv`.
    Ablate,
    /// Staleness grid; writes `<out>/latency.csv`.
    Latency,
    /// Per-agent budget check; writes `<out>/budget.json`, exits 3 on failure.
    Budget,
    /// Dump a recorded wire log, or one hex payload dump, as JSON lines.
    Inspect {
        #[arg(value_name = "FILE")]
        path: PathBuf,
        /// Treat FILE as a single hex-encoded payload instead of a log.
        #[arg(long)]
        payload: bool,
        /// Include the raw payload hex in each line.
        #[arg(long)]
        hex: bool,
    },
}

fn parse_family(s: &str) -> Result<Family, String> {
    Family::from_name(s).ok_or_else(|| format!("unknown family `{s}`"))
}

fn parse_precision(s: &str) -> Result<ValuePrecision, String> {
    match s {
        "half" => Ok(ValuePrecision::Half),
        "single" => Ok(ValuePrecision::Single),
        _ => Err(format!("unknown precision `{s}`, expected `half` or `single`")),
    }
}

/// A check that ran to completion and failed, with its own exit code.
#[derive(Debug)]
struct Failed {
    code: u8,
    kind: &'static str,
    key: Option<&'static str>,
    message: String,
}

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
            return error_line(2, "usage", None, first);
        }
    };
    match execute(cli) {
        Ok(Some(summary)) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}");
            if let Some(f) = e.downcast_ref::<Failed>() {
                error_line(f.code, f.kind, f.key, &message)
            } else if let Some(h) = e.downcast_ref::<HarnessError>() {
                error_line(1, h.kind(), h.key(), &message)
            } else if e.downcast_ref::<std::io::Error>().is_some() {
                error_line(1, "io", None, &message)
            } else {
                error_line(1, "error", None, &message)
            }
        }
    }
}

fn error_line(code: u8, kind: &str, key: Option<&str>, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "key": key, "message": message } }));
    ExitCode::from(code)
}

fn load_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = &c.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = c.workers {
        cfg.workers = v;
    }
    if !c.families.is_empty() {
        cfg.suite.families = c.families.clone();
    }
    if let Some(v) = c.scenes_per_family {
        cfg.suite.scenes_per_family = v;
    }
    if let Some(v) = c.eps_c {
        cfg.round.eps_c = v;
    }
    if let Some(v) = c.eps_a {
        cfg.round.eps_a = v;
    }
    if let Some(v) = c.c0 {
        cfg.round.c0 = v;
    }
    if let Some(v) = c.precision {
        cfg.round.precision = v;
    }
    if let Some(v) = c.late_fusion {
        cfg.round.late_fusion = v;
    }
    if let Some(v) = c.budget_mbps {
        cfg.budget_mbps = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the output directory and records the effective config in it.
fn prepare_out(cfg: &ExperimentConfig) -> anyhow::Result<&Path> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(&cfg.out_dir)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Runs the command; `Some` is the summary line for stdout.
fn execute(cli: Cli) -> anyhow::Result<Option<serde_json::Value>> {
    let cfg = load_config(&cli.common)?;
    if let Command::Inspect { path, payload, hex } = &cli.command {
        inspect(path, *payload, *hex, &cfg)?;
        return Ok(None);
    }
    let out = prepare_out(&cfg)?;
    let summary = match cli.command {
        Command::Generate => {
            let dir = out.join("scenes");
            fs::create_dir_all(&dir)?;
            let suite = build_suite(&cfg.suite, cfg.seed)?;
            for s in &suite {
                let text = s.scene.to_json().map_err(HarnessError::from)?;
                fs::write(dir.join(format!("{}_{:03}.json", s.family.name(), s.index)), text)?;
            }
            json!({ "command": "generate", "scenes": suite.len(), "dir": dir })
        }
        Command::Run {
            scene,
            pick,
            ego,
            latency_ms,
            log,
            replay,
        } => run(&cfg, out, scene, pick, ego, latency_ms, log, replay)?,
        Command::Sweep => {
            let suite = build_suite(&cfg.suite, cfg.seed)?;
            let records = sweep_epsilon_c(&cfg, &suite)?;
            let path = out.join("sweep.csv");
            write_sweep_csv(&records, create(&path)?).map_err(HarnessError::from)?;
            json!({ "command": "sweep", "scenes": suite.len(), "records": records.len(), "csv": path })
        }
        Command::Ablate => {
            let suite = build_suite(&cfg.suite, cfg.seed)?;
            let rows = run_ablation(&cfg, &suite)?;
            let path = out.join("ablation.csv");
            write_ablation_csv(&rows, create(&path)?).map_err(HarnessError::from)?;
            json!({ "command": "ablate", "scenes": suite.len(), "rows": rows.len(), "csv": path })
        }
        Command::Latency => {
            let suite = build_suite(&cfg.suite, cfg.seed)?;
            let rows = latency_sweep(&cfg, &suite)?;
            let path = out.join("latency.csv");
            write_latency_csv(&rows, create(&path)?).map_err(HarnessError::from)?;
            json!({ "command": "latency", "scenes": suite.len(), "rows": rows.len(), "csv": path })
        }
        Command::Budget => {
            let suite = build_suite(&cfg.suite, cfg.seed)?;
            let report = check_budget(&cfg, &suite)?;
            let path = out.join("budget.json");
            fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
            if !report.pass {
                let hint = match report.passing_eps_c {
                    Some(e) => format!("; eps_c = {e} passes"),
                    None => "; no grid point passes".to_string(),
                };
                return Err(Failed {
                    code: 3,
                    kind: "budget",
                    key: Some("budget_mbps"),
                    message: format!(
                        "{:.4} Mbps per agent exceeds {} Mbps at eps_c = {}{hint}",
                        report.mbps, report.budget_mbps, report.eps_c
                    ),
                }
                .into());
            }
            json!({ "command": "budget", "pass": true, "mbps": report.mbps, "budget_mbps": report.budget_mbps, "report": path })
        }
        Command::Inspect { .. } => unreachable!("handled above"),
    };
    Ok(Some(summary))
}

fn pick_scene(cfg: &ExperimentConfig, pick: &str) -> anyhow::Result<Scene> {
    let Some((family, index)) = pick.split_once('/') else {
        bail!("--pick expects FAMILY/INDEX, got `{pick}`");
    };
    let family = parse_family(family).map_err(anyhow::Error::msg)?;
    let index: usize = index.parse().with_context(|| format!("bad scene index `{index}`"))?;
    Ok(family_scene(family, index, cfg.seed, &cfg.suite.random)?)
}

#[allow(clippy::too_many_arguments)]
fn run(
    cfg: &ExperimentConfig,
    out: &Path,
    scene: Option<PathBuf>,
    pick: Option<String>,
    ego: u32,
    latency_ms: f64,
    log: Option<PathBuf>,
    replay: Option<PathBuf>,
) -> anyhow::Result<serde_json::Value> {
    let single = match (&scene, &pick) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Some(Scene::from_json(&text).map_err(HarnessError::from)?)
        }
        (None, Some(p)) => Some(pick_scene(cfg, p)?),
        (None, None) => None,
    };
    let Some(scene) = single else {
        if log.is_some() || replay.is_some() {
            bail!("--log and --replay need a single round: pass --scene or --pick");
        }
        let suite = build_suite(&cfg.suite, cfg.seed)?;
        let traces = run_suite(cfg, &suite)?;
        let path = out.join("traces.jsonl");
        let mut w = create(&path)?;
        for t in &traces {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let mut score = SuiteScore::default();
        for t in &traces {
            score.add_frame(t.output(), &t.truths);
        }
        let (at50, at70) = (pr_curve(&score.at50), pr_curve(&score.at70));
        at50.write_csv(create(&out.join("pr50.csv"))?)?;
        at70.write_csv(create(&out.join("pr70.csv"))?)?;
        return Ok(json!({ "command": "run", "rounds": traces.len(), "traces": path, "ap50": at50.ap, "ap70": at70.ap }));
    };
    let trace: RoundTrace = match &replay {
        Some(path) => {
            let entries = read_log_file(path).map_err(HarnessError::from)?;
            replay_round(&scene, ego, &cfg.round, latency_ms, &entries).map_err(HarnessError::from)?
        }
        None => {
            let mut bus = if log.is_some() { Bus::recording() } else { Bus::new() };
            let t = run_round_with(&scene, ego, &cfg.round, latency_ms, &Executor::new(cfg.workers), &mut bus)
                .map_err(HarnessError::from)?;
            if let Some(path) = &log {
                let mut w = create(path)?;
                bus.write_log(&mut w).map_err(HarnessError::from)?;
                w.flush()?;
            }
            t
        }
    };
    let path = out.join("trace.json");
    fs::write(&path, trace.to_json() + "\n")?;
    Ok(json!({
        "command": "run",
        "scene": scene.label,
        "ego": ego,
        "detections": trace.output().len(),
        "warnings": trace.warnings.len(),
        "trace": path,
    }))
}

/// Writes one JSON line per payload to stdout. A lone payload that does not
/// decode is an error; undecodable log entries are described inline.
fn inspect(path: &Path, payload: bool, with_hex: bool, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let spec = &cfg.round.grid;
    let stdout = std::io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    if payload {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let bytes = hex::decode(text.split_whitespace().collect::<String>()).context("payload is not hex")?;
        let mut v = describe_payload(&bytes, spec);
        if let Some(why) = v.get("error").and_then(|e| e.as_str()) {
            return Err(Failed { code: 1, kind: "decode", key: None, message: why.to_owned() }.into());
        }
        if with_hex {
            v["hex"] = json!(hex::encode(&bytes));
        }
        writeln!(w, "{v}")?;
        w.flush()?;
        return Ok(());
    }
    let entries = read_log_file(path).map_err(HarnessError::from)?;
    for e in &entries {
        let mut v = json!({
            "seq": e.seq,
            "scene_seed": e.scene_seed,
            "ego": e.ego,
            "from": e.envelope.from,
            "to": e.envelope.to,
            "pose": e.envelope.pose,
            "payload": describe_payload(&e.envelope.payload, spec),
        });
        if with_hex {
            v["hex"] = json!(hex::encode(&e.envelope.payload));
        }
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}
