//! Command-line front end: simulates experiments described by presets or
//! JSON configurations, writes machine-readable traces and summaries, and
//! audits the deviation/cost bounds over seeded Monte-Carlo trials.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 when the remote
//! plan is infeasible at the task start, 4 when the bound audit finds a
//! violation.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use cloudmpc::config::{self, ExperimentConfig, RunPlan};
use cloudmpc::sim::{
    run_closed_loop, summarize, verify_bounds, BatchSummary, BoundAuditReport, RunArtifacts,
    RunMode,
};
use cloudmpc::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cloudmpc",
    version,
    about = "Closed-loop simulation of remote/local MPC fusion with certified switching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate closed-loop runs and write traces, summaries, and a manifest.
    Run(RunArgs),
    /// Audit the deviation and cost certificates against seeded rollouts.
    VerifyBounds(VerifyArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Ready-made experiment: example1_scalar, example1_degenerate,
    /// example2_pendulum, or example3_vehicle.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Path to a JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path configuration override, repeatable:
    /// --override disturbance.omega=0.05 --override x0=[-9.5]
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory. Precedence: this flag, the configuration's
    /// `output_dir`, $CLOUDMPC_OUT_DIR, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Controller arrangement; `all` runs fused, cloud, and local side by
    /// side on the same seeds.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Single disturbance seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Seed list: comma-separated values and inclusive ranges, e.g.
    /// `0..19` or `3,5,10..12`.
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of seeded trials; 0 checks nothing and warns.
    #[arg(long, visible_alias = "verify-bounds-trials", default_value_t = 200)]
    trials: usize,
    /// First seed of the trial block.
    #[arg(long, default_value_t = 0)]
    seed0: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Fused,
    Cloud,
    Local,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::VerifyBounds(args) => cmd_verify(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Everything written alongside the outputs so a run can be reproduced:
/// the configuration provenance and hash, what was run, and where.
#[derive(Serialize)]
struct RunManifest {
    tool_version: String,
    config_path: Option<String>,
    config_hash: String,
    modes: Vec<RunMode>,
    seeds: Vec<u64>,
    outputs: Vec<String>,
}

/// Per-run roll-up written next to the trace.
#[derive(Serialize)]
struct RunSummary {
    name: String,
    mode: RunMode,
    seed: u64,
    horizon: usize,
    actual_cost: f64,
    terminal_cost: f64,
    x_final: Vec<f64>,
    mean_regulation_error: f64,
    constraints_met: bool,
    oracle_match: Option<f64>,
    cloud_steps: usize,
    local_steps: usize,
    /// One letter per step for fused runs: C when the remote plan's control
    /// was applied, L for the local plan's.
    switch_pattern: String,
}

#[derive(Serialize)]
struct BatchReport {
    runs: Vec<RunSummary>,
    aggregates: Vec<BatchSummary>,
}

#[derive(Serialize)]
struct AuditFile {
    tool_version: String,
    config_path: Option<String>,
    config_hash: String,
    seed0: u64,
    report: BoundAuditReport,
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let (cfg, cfg_path) = resolve_config(&args.common)?;
    let (exp, plan) = cfg.build()?;
    let modes: Vec<RunMode> = match args.mode {
        Some(ModeArg::All) => vec![RunMode::Fused, RunMode::CloudOnly, RunMode::LocalOnly],
        Some(ModeArg::Fused) => vec![RunMode::Fused],
        Some(ModeArg::Cloud) => vec![RunMode::CloudOnly],
        Some(ModeArg::Local) => vec![RunMode::LocalOnly],
        None => vec![plan.mode.unwrap_or(RunMode::Fused)],
    };
    let seeds: Vec<u64> = match (args.seed, &args.seeds) {
        (Some(s), None) => vec![s],
        (None, Some(spec)) => parse_seeds(spec)?,
        (None, None) => plan.seeds.clone(),
        (Some(_), Some(_)) => unreachable!("clap rejects --seed with --seeds"),
    };

    let dir = out_dir(&args.common.out, &plan);
    std::fs::create_dir_all(&dir)?;
    let mut outputs: Vec<String> = Vec::new();
    let mut summaries: Vec<RunSummary> = Vec::new();
    let mut by_mode: Vec<(RunMode, Vec<cloudmpc::sim::SimTrace>)> =
        modes.iter().map(|m| (*m, Vec::new())).collect();

    for (mi, mode) in modes.iter().enumerate() {
        for seed in &seeds {
            let art = run_closed_loop(&exp, *mode, *seed)?;
            let mode_name = enum_name(mode);
            let trace_name = format!("trace_{mode_name}_seed{seed}.csv");
            let summary_name = format!("summary_{mode_name}_seed{seed}.json");
            write_text(&dir.join(&trace_name), &trace_csv(&art))?;
            let summary = run_summary(&art);
            write_text(&dir.join(&summary_name), &pretty_json(&summary)?)?;
            println!(
                "{} seed {}: cost {:.4}, terminal state norm {:.4}{} -> {}",
                mode_name,
                seed,
                art.trace.actual_cost,
                l2(&art.trace.x_final),
                art.trace
                    .oracle_match
                    .map(|m| format!(", oracle match {m:.4}"))
                    .unwrap_or_default(),
                trace_name
            );
            outputs.push(trace_name);
            outputs.push(summary_name);
            summaries.push(summary);
            by_mode[mi].1.push(art.trace);
        }
    }

    if summaries.len() > 1 {
        let aggregates: Vec<BatchSummary> = by_mode
            .iter()
            .map(|(mode, traces)| summarize(*mode, traces))
            .collect();
        for agg in &aggregates {
            println!(
                "{}: {} runs, mean cost {:.4}, mean regulation error {:.4}{}",
                enum_name(&agg.mode),
                agg.runs,
                agg.mean_cost,
                agg.mean_regulation_error,
                agg.mean_oracle_match
                    .map(|m| format!(", mean oracle match {m:.4}"))
                    .unwrap_or_default(),
            );
        }
        let batch = BatchReport {
            runs: summaries,
            aggregates,
        };
        write_text(&dir.join("batch.json"), &pretty_json(&batch)?)?;
        outputs.push("batch.json".into());
    }

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_path: cfg_path.map(|p| p.display().to_string()),
        config_hash: cfg.resolved_hash()?,
        modes,
        seeds,
        outputs,
    };
    write_text(&dir.join("manifest.json"), &pretty_json(&manifest)?)?;
    println!(
        "wrote {} (config hash {})",
        dir.join("manifest.json").display(),
        &manifest.config_hash[..12]
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    let (cfg, cfg_path) = resolve_config(&args.common)?;
    let (exp, plan) = cfg.build()?;
    let dir = out_dir(&args.common.out, &plan);
    std::fs::create_dir_all(&dir)?;

    let report = if args.trials == 0 {
        eprintln!("warning: --trials 0 audits nothing; the pass is vacuous");
        BoundAuditReport {
            trials: 0,
            checks: 0,
            violations: 0,
            worst_ratio: 0.0,
            examples: vec![],
        }
    } else {
        verify_bounds(&exp, args.trials, args.seed0)?
    };

    let audit = AuditFile {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_path: cfg_path.map(|p| p.display().to_string()),
        config_hash: cfg.resolved_hash()?,
        seed0: args.seed0,
        report,
    };
    write_text(&dir.join("audit.json"), &pretty_json(&audit)?)?;
    let report = &audit.report;
    println!(
        "bounds audit ({}): {} checks over {} trials, {} violations, worst ratio {:.4}",
        exp.name, report.checks, report.trials, report.violations, report.worst_ratio
    );
    if report.violations > 0 {
        for e in &report.examples {
            eprintln!("violation: {e}");
        }
        return Ok(ExitCode::from(4));
    }
    Ok(ExitCode::SUCCESS)
}

/// Loads the configuration tree (file or bare preset reference), applies
/// `--override` patches, and parses it.
fn resolve_config(common: &CommonArgs) -> Result<(ExperimentConfig, Option<PathBuf>)> {
    let mut root: Value = match (&common.config, &common.preset) {
        (Some(path), None) => config::parse_json(&config::read_config_text(path)?)?,
        (None, Some(name)) => json!({ "preset": name }),
        (None, None) => {
            return Err(Error::Config(
                "either --preset or --config is required".into(),
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap rejects --preset with --config"),
    };
    for spec in &common.overrides {
        config::apply_override(&mut root, spec)?;
    }
    Ok((ExperimentConfig::from_value(root)?, common.config.clone()))
}

fn out_dir(flag: &Option<PathBuf>, plan: &RunPlan) -> PathBuf {
    flag.clone()
        .or_else(|| plan.output_dir.clone())
        .or_else(|| std::env::var_os("CLOUDMPC_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Inclusive-range seed syntax: `0..19` and comma-separated mixtures.
fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for token in spec.split(',') {
        let token = token.trim();
        if let Some((a, b)) = token.split_once("..") {
            let (lo, hi): (u64, u64) = match (a.parse(), b.parse()) {
                (Ok(lo), Ok(hi)) => (lo, hi),
                _ => {
                    return Err(Error::Config(format!(
                        "bad seed range `{token}` (expected e.g. 0..19)"
                    )))
                }
            };
            if hi < lo {
                return Err(Error::Config(format!("empty seed range `{token}`")));
            }
            seeds.extend(lo..=hi);
        } else {
            seeds.push(token.parse().map_err(|_| {
                Error::Config(format!("bad seed `{token}` in --seeds"))
            })?);
        }
    }
    if seeds.is_empty() {
        return Err(Error::Config("--seeds produced no seeds".into()));
    }
    Ok(seeds)
}

/// One row per control step plus a terminal state-only row, with a fixed
/// column order; certificate and oracle columns are empty outside fused
/// runs. Signs are +1 when the comparison favors the remote plan (ties
/// included, matching the switch rule).
fn trace_csv(art: &RunArtifacts) -> String {
    let trace = &art.trace;
    let n = trace.steps[0].x.len();
    let m = trace.steps[0].u.len();
    let mut head: Vec<String> = vec!["t".into()];
    head.extend((0..n).map(|i| format!("x{i}")));
    head.extend((0..m).map(|j| format!("u{j}")));
    head.extend((0..n).map(|k| format!("w{k}")));
    head.extend(
        [
            "stage_cost",
            "eps",
            "delta",
            "trusted",
            "local_status",
            "j_hat",
            "eta_hat",
            "j_bar",
            "eta_bar",
            "cert_sign",
            "choice",
            "oracle_j_cloud",
            "oracle_j_local",
            "oracle_sign",
            "oracle_choice",
            "agreed",
        ]
        .into_iter()
        .map(String::from),
    );
    let width = head.len();
    let mut lines = vec![head.join(",")];

    let oracle: HashMap<usize, &cloudmpc::sim::OracleRecord> =
        art.oracle.iter().map(|o| (o.t, o)).collect();
    for s in &trace.steps {
        let mut row: Vec<String> = vec![s.t.to_string()];
        row.extend(s.x.iter().map(fmt));
        row.extend(s.u.iter().map(fmt));
        row.extend(s.w.iter().map(fmt));
        row.push(fmt(&s.stage_cost));
        match &s.decision {
            Some(d) => {
                row.push(fmt(&d.eps));
                row.push(fmt(&d.delta));
                row.push((d.trusted as i32).to_string());
                row.push(enum_name(&d.local_status));
                row.push(fmt(&d.j_hat));
                row.push(fmt(&d.eta_hat));
                row.push(fmt(&d.j_bar));
                row.push(fmt(&d.eta_bar));
                row.push(sign((d.j_bar + d.eta_bar) - (d.j_hat + d.eta_hat)).to_string());
                row.push(enum_name(&d.choice));
            }
            None => row.extend(std::iter::repeat(String::new()).take(10)),
        }
        match oracle.get(&s.t) {
            Some(o) => {
                row.push(fmt(&o.j_cloud));
                row.push(fmt(&o.j_local));
                row.push(sign(o.j_local - o.j_cloud).to_string());
                row.push(enum_name(&o.choice));
                match &s.decision {
                    Some(d) => row.push(((d.choice == o.choice) as i32).to_string()),
                    None => row.push(String::new()),
                }
            }
            None => row.extend(std::iter::repeat(String::new()).take(5)),
        }
        debug_assert_eq!(row.len(), width);
        lines.push(row.join(","));
    }

    let mut last: Vec<String> = vec![trace.steps.len().to_string()];
    last.extend(trace.x_final.iter().map(fmt));
    last.extend(std::iter::repeat(String::new()).take(width - 1 - n));
    lines.push(last.join(","));
    lines.join("\n") + "\n"
}

fn run_summary(art: &RunArtifacts) -> RunSummary {
    let trace = &art.trace;
    let pattern: String = trace
        .steps
        .iter()
        .filter_map(|s| s.decision.as_ref())
        .map(|d| match d.choice {
            cloudmpc::fusion::Choice::Cloud => 'C',
            cloudmpc::fusion::Choice::Local => 'L',
        })
        .collect();
    let cloud_steps = pattern.chars().filter(|c| *c == 'C').count();
    RunSummary {
        name: trace.name.clone(),
        mode: trace.mode,
        seed: trace.seed,
        horizon: trace.steps.len(),
        actual_cost: trace.actual_cost,
        terminal_cost: trace.terminal_cost,
        x_final: trace.x_final.clone(),
        mean_regulation_error: trace.mean_regulation_error,
        constraints_met: trace.constraints_met.iter().all(|(_, ok)| *ok),
        oracle_match: trace.oracle_match,
        cloud_steps,
        local_steps: pattern.len() - cloud_steps,
        switch_pattern: pattern,
    }
}

/// Shortest round-trip float formatting (what `Display` guarantees for
/// f64), so reruns are byte-identical.
fn fmt(v: &f64) -> String {
    format!("{v}")
}

fn sign(v: f64) -> i32 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// The serde name of a fieldless enum variant ("fused", "cloud", ...).
fn enum_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        other => panic!("enum serialization produced {other:?}"),
    }
}

fn pretty_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn write_text(path: &std::path::Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_specs_parse_inclusively() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert_eq!(parse_seeds("1,4..6,9").unwrap(), vec![1, 4, 5, 6, 9]);
        for bad in ["", "a", "5..2", "1..b", "1,,2"] {
            assert!(parse_seeds(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn signs_follow_the_tie_to_remote_convention() {
        assert_eq!(sign(1.5), 1);
        assert_eq!(sign(-2.0), -1);
        assert_eq!(sign(0.0), 0);
        assert_eq!(sign(f64::NAN), 0);
        assert_eq!(sign(f64::INFINITY), 1);
    }
}
