use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use toolquery::harness::{
    ablate, default_grid, demo, full_protocol, render_ablation, render_text, stage_preprocess, stage_split,
    temperature_sweep, write_report, AblationToggle, EvalMode, HarnessError, RunConfig, SplitName, Workspace,
};
use toolquery::querygen::GeneratorMode;
use toolquery::synthetic::{write_synthetic, SyntheticSpec};

#[derive(Parser)]
#[command(name = "toolquery", version, about = "Tool retrieval with generated queries")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArg {
    /// Run configuration (JSON).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Filter the raw corpus into <run_dir>/data.
    Preprocess(ConfigArg),
    /// Split tools and requests into <run_dir>/split.
    Split(ConfigArg),
    /// Build (or reuse) the in-domain and OOD embedding indices.
    Index(ConfigArg),
    /// Generate queries for one mode and split.
    Generate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        mode: EvalMode,
        #[arg(long, default_value = "test_in_domain")]
        split: SplitName,
    },
    /// Generate and retrieve for one mode and split.
    Retrieve {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        mode: EvalMode,
        #[arg(long, default_value = "test_in_domain")]
        split: SplitName,
    },
    /// Evaluate one mode on one split and print the metric report.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        mode: EvalMode,
        #[arg(long, default_value = "test_in_domain")]
        split: SplitName,
    },
    /// Temperature sweep for a generator mode.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, default_value = "zero_shot")]
        mode: EvalMode,
        /// Comma-separated temperatures; defaults to the configured grid.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Fine-tune on gold descriptions (--sft) or run the alignment loop.
    Align {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        sft: bool,
        /// Overrides filter.iterations.
        #[arg(long)]
        iterations: Option<u32>,
    },
    /// Compare the baseline against the variants of one toggle.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        toggle: AblationToggle,
    },
    /// Collect finished evaluations into the results table.
    Report(ConfigArg),
    /// Every stage end to end, then the results table.
    Run {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Calibrate each generator temperature first.
        #[arg(long)]
        sweep: bool,
    },
    /// Write a synthetic corpus and an offline config pointing at it.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON file overriding the default synthetic parameters.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Retrieve APIs for ad-hoc utterances.
    Demo {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, default_value = "zero_shot")]
        mode: EvalMode,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(required = true)]
        utterances: Vec<String>,
    },
}

fn load(c: &ConfigArg) -> anyhow::Result<RunConfig> {
    let cfg = RunConfig::load(&c.config)?;
    cfg.validate()?;
    Ok(cfg)
}

fn generator_mode(mode: EvalMode) -> anyhow::Result<GeneratorMode> {
    mode.generator_mode()
        .ok_or_else(|| HarnessError::Config("utterance mode has no generator".into()).into())
}

fn count_lines(p: &Path) -> anyhow::Result<usize> {
    Ok(std::fs::read_to_string(p).with_context(|| p.display().to_string())?.lines().count())
}

fn run(cmd: Cmd) -> anyhow::Result<Value> {
    Ok(match cmd {
        Cmd::Preprocess(c) => {
            let (_, _, report) = stage_preprocess(&load(&c)?)?;
            serde_json::to_value(report)?
        }
        Cmd::Split(c) => {
            let cfg = load(&c)?;
            let (docs, reqs, report) = stage_preprocess(&cfg)?;
            let s = stage_split(&cfg, &docs, &reqs, Some(report))?;
            json!({
                "train": s.train.len(),
                "test_in_domain": s.test_in_domain.len(),
                "test_ood": s.test_ood.len(),
                "in_domain_apis": s.in_domain_apis.len(),
                "ood_apis": s.ood_apis.len(),
                "stats": s.stats,
            })
        }
        Cmd::Index(c) => {
            let ws = Workspace::open(load(&c)?)?;
            json!({
                "provider": ws.in_domain_index.provider_id(),
                "dimension": ws.in_domain_index.dimension(),
                "in_domain": ws.in_domain_index.len(),
                "ood": ws.ood_index.len(),
            })
        }
        Cmd::Generate { cfg, mode, split } => {
            let ws = Workspace::open(load(&cfg)?)?;
            ws.evaluate(mode, split)?;
            let p = ws.run_dir().join("generations").join(format!("{}_{}.jsonl", mode.as_str(), split.as_str()));
            json!({ "generations": p, "records": count_lines(&p)?, "generation_calls": ws.generation_calls() })
        }
        Cmd::Retrieve { cfg, mode, split } => {
            let ws = Workspace::open(load(&cfg)?)?;
            ws.evaluate(mode, split)?;
            let recs = ws.retrievals(mode, split)?;
            let failed = recs.iter().filter(|r| r.error.is_some()).count();
            let p = ws.run_dir().join("retrievals").join(format!("{}_{}.jsonl", mode.as_str(), split.as_str()));
            json!({ "retrievals": p, "records": recs.len(), "failed": failed })
        }
        Cmd::Eval { cfg, mode, split } => {
            let ws = Workspace::open(load(&cfg)?)?;
            serde_json::to_value(ws.evaluate(mode, split)?)?
        }
        Cmd::Sweep { cfg, mode, grid } => {
            let ws = Workspace::open(load(&cfg)?)?;
            let gm = generator_mode(mode)?;
            let grid = if grid.is_empty() { default_grid(&ws.config.sweep) } else { grid };
            serde_json::to_value(temperature_sweep(&ws, gm, &grid)?)?
        }
        Cmd::Align { cfg, sft, iterations } => {
            let mut config = load(&cfg)?;
            if let Some(t) = iterations {
                config.filter.iterations = t;
                config.validate()?;
            }
            let ws = Workspace::open(config)?;
            if sft {
                serde_json::to_value(ws.stage_sft()?)?
            } else {
                serde_json::to_value(ws.stage_align()?)?
            }
        }
        Cmd::Ablate { cfg, toggle } => {
            let ws = Workspace::open(load(&cfg)?)?;
            let report = ablate(&ws, toggle)?;
            eprint!("{}", render_ablation(&report));
            serde_json::to_value(report)?
        }
        Cmd::Report(c) => {
            let cfg = load(&c)?;
            let table = write_report(&cfg.run_dir)?;
            eprint!("{}", render_text(&table));
            serde_json::to_value(table)?
        }
        Cmd::Run { cfg, sweep } => {
            let summary = full_protocol(load(&cfg)?, sweep)?;
            eprint!("{}", render_text(&summary.table));
            json!({
                "reports": summary.reports.len(),
                "sweeps": summary.sweeps.iter().map(|s| json!({ "mode": s.mode, "best_temperature": s.best_temperature })).collect::<Vec<_>>(),
                "table": summary.table,
            })
        }
        Cmd::Synth { out, seed, spec } => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| p.display().to_string())?;
                    let mut s: SyntheticSpec = serde_json::from_str(&text)
                        .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?;
                    s.seed = seed;
                    s
                }
                None => SyntheticSpec::fixture(seed),
            };
            std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            let out = out.canonicalize().with_context(|| out.display().to_string())?;
            let corpus = out.join("corpus");
            let (docs, reqs) = write_synthetic(&spec, &corpus)?;
            let cfg = RunConfig::fixture(&corpus, out.join("run"), seed);
            let cp = out.join("config.json");
            std::fs::write(&cp, serde_json::to_string_pretty(&cfg)? + "\n").with_context(|| cp.display().to_string())?;
            json!({ "config": cp, "corpus": corpus, "apis": docs.len(), "requests": reqs.len() })
        }
        Cmd::Demo { cfg, mode, k, utterances } => {
            let ws = Workspace::open(load(&cfg)?)?;
            serde_json::to_value(demo(&ws, generator_mode(mode)?, &utterances, k)?)?
        }
    })
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(h) = e.downcast_ref::<HarnessError>() {
        return h.kind();
    }
    if e.downcast_ref::<toolquery::synthetic::SpecError>().is_some() {
        return "config";
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    "internal"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(v) => {
            // A closed pipe (e.g. `| head`) is not a failure.
            let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&v).expect("serializable output"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": error_kind(&e), "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
