mod demo;

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use certforest::hash_tree::SmtHasher;
use certforest::par::Execution;
use certforest::sim::{
    lc_fail_monte_carlo, lc_fail_probability, max_missable, run_direct_repair_analysis, run_epidemic_sim, SimMetrics,
    SimParams,
};

#[derive(Parser, Debug)]
#[command(name = "certforest", version, about = "Certificate validation forest: simulator, analyses and protocol demo")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the epidemic network simulation.
    Simulate(SimulateArgs),
    /// Repair a stale proof with random fresh proofs of the same tree.
    AnalyzeDirect(DirectArgs),
    /// Level-cache repair failure probability, closed form and Monte-Carlo.
    AnalyzeLc(LcArgs),
    /// Walk through issuance, revocation, updates and all repair paths.
    Demo(DemoArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct Output {
    /// Write results here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

impl Output {
    fn writer(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
            None => Box::new(io::stdout().lock()),
        })
    }

    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 10_000)]
    nodes: usize,
    #[arg(long, default_value_t = 4)]
    weeks: u32,
    /// Share of nodes missing each CA update; a comma list runs each.
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    missing: Vec<f64>,
    #[arg(long, default_value_t = 0.10)]
    cachers: f64,
    #[arg(long, default_value_t = 7)]
    clvl: u8,
    /// Meetings each node starts per hour.
    #[arg(long, default_value_t = 5)]
    encounters: u32,
    #[arg(long, default_value_t = 0.00028)]
    revocation_rate: f64,
    #[arg(long, default_value_t = 0.001)]
    issue_rate: f64,
    #[arg(long, default_value_t = 30)]
    giveup: u32,
    /// Seed; a comma list runs each.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seed: Vec<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct DirectArgs {
    /// Leaves in the tree.
    #[arg(long, default_value_t = 10_000)]
    nodes: usize,
    #[arg(long, default_value_t = 1_000)]
    trials: usize,
    /// Missed CA changes to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
    missed: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    giveup: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct LcArgs {
    /// Cache level; all of 4..=10 when omitted.
    #[arg(long)]
    clvl: Option<u8>,
    /// Acceptable failure probability for the largest missable count.
    #[arg(long, default_value_t = 0.10)]
    target: f64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
    missed: Vec<u32>,
    /// Monte-Carlo trials per point; 0 prints the closed form only.
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct DemoArgs {
    /// Certificates in the demo population.
    #[arg(long, default_value_t = 2_000)]
    nodes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// A configuration the parser accepted but the model rejects.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Command::Simulate(a) => simulate(a),
        Command::AnalyzeDirect(a) => analyze_direct(a),
        Command::AnalyzeLc(a) => analyze_lc(a),
        Command::Demo(a) => demo::run(a.nodes, a.seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn csv_comment(out: &mut dyn Write, config: &serde_json::Value, seed: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "# config: {config}")?;
    writeln!(out, "# seed: {seed}")?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut runs = Vec::new();
    for &missing in &a.missing {
        for &seed in &a.seed {
            let p = SimParams {
                node_count: a.nodes,
                weeks: a.weeks,
                missing_share: missing,
                cacher_share: a.cachers,
                clvl: a.clvl,
                encounters_per_node_per_hour: a.encounters,
                daily_revocation_rate: a.revocation_rate,
                weekly_issue_rate: a.issue_rate,
                give_up_threshold: a.giveup,
                rng_seed: seed,
                execution: a.output.execution(),
            };
            p.validate().map_err(|e| usage(e.to_string()))?;
            runs.push(p);
        }
    }
    let config = json!({
        "command": "simulate",
        "nodes": a.nodes, "weeks": a.weeks, "missing": a.missing, "cachers": a.cachers,
        "clvl": a.clvl, "encounters": a.encounters, "revocation_rate": a.revocation_rate,
        "issue_rate": a.issue_rate, "giveup": a.giveup,
    });
    let seeds = a.seed.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
    let mut results: Vec<(SimParams, SimMetrics)> = Vec::new();
    for p in runs {
        let t = Instant::now();
        let m = run_epidemic_sim(&p)?;
        eprintln!(
            "missing={} seed={} done in {:.1}s",
            p.missing_share,
            p.rng_seed,
            t.elapsed().as_secs_f64()
        );
        results.push((p, m));
    }

    let mut out = a.output.writer()?;
    match a.output.format {
        Format::Csv => {
            csv_comment(&mut out, &config, &seeds)?;
            let mut w = csv::Writer::from_writer(out);
            let mut header = vec!["seed", "missing_share"];
            header.extend_from_slice(SimMetrics::CSV_HEADER);
            w.write_record(&header)?;
            for (p, m) in &results {
                let mut row = vec![p.rng_seed.to_string(), p.missing_share.to_string()];
                row.extend(m.csv_row());
                w.write_record(&row)?;
            }
            w.flush()?;
        }
        Format::Json => {
            let runs: Vec<_> = results.iter().map(|(p, m)| json!({ "params": p, "metrics": m })).collect();
            let doc = json!({ "config": config, "seed": seeds, "runs": runs });
            serde_json::to_writer_pretty(&mut out, &doc)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

fn analyze_direct(a: DirectArgs) -> Result<()> {
    if a.nodes < 2 || a.trials == 0 {
        return Err(usage("--nodes must be at least 2 and --trials positive"));
    }
    let config = json!({
        "command": "analyze-direct", "nodes": a.nodes, "trials": a.trials,
        "missed": a.missed, "giveup": a.giveup,
    });
    let stats: Vec<_> = a
        .missed
        .iter()
        .map(|&m| {
            run_direct_repair_analysis(SmtHasher::sha256(), a.nodes, m, a.trials, a.giveup, a.seed, a.output.execution())
        })
        .collect();
    let mut out = a.output.writer()?;
    match a.output.format {
        Format::Csv => {
            csv_comment(&mut out, &config, a.seed)?;
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["missed_updates", "first_fail_rate", "first10_fail_rate", "fail_rate", "avg_tries"])?;
            for s in &stats {
                w.write_record([
                    s.missed_updates.to_string(),
                    format!("{:.4}", s.first_fail_rate),
                    format!("{:.4}", s.first10_fail_rate),
                    format!("{:.4}", s.fail_rate),
                    format!("{:.3}", s.avg_tries),
                ])?;
            }
            w.flush()?;
        }
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, &json!({ "config": config, "seed": a.seed, "results": stats }))?;
            writeln!(out)?;
        }
    }
    Ok(())
}

fn analyze_lc(a: LcArgs) -> Result<()> {
    let levels: Vec<u8> = match a.clvl {
        Some(c) if c == 0 || c > certforest::repair::MAX_CACHE_LEVEL => {
            return Err(usage(format!("--clvl must lie in 1..={}", certforest::repair::MAX_CACHE_LEVEL)))
        }
        Some(c) => vec![c],
        None => (4..=10).collect(),
    };
    if !(0.0..1.0).contains(&a.target) {
        return Err(usage("--target must lie in [0, 1)"));
    }
    let config = json!({
        "command": "analyze-lc", "clvl": levels, "target": a.target,
        "missed": a.missed, "trials": a.trials,
    });
    let mut rows = Vec::new();
    for &clvl in &levels {
        for &m in &a.missed {
            let closed = lc_fail_probability(clvl, m);
            let mc = (a.trials > 0).then(|| lc_fail_monte_carlo(clvl, m, a.trials, a.seed ^ (u64::from(clvl) << 32) ^ u64::from(m), a.output.execution()));
            rows.push((clvl, m, closed, mc));
        }
    }
    let maxes: Vec<(u8, u32, usize)> = levels
        .iter()
        .map(|&c| (c, max_missable(c, a.target), 32usize << c))
        .collect();
    let mut out = a.output.writer()?;
    match a.output.format {
        Format::Csv => {
            csv_comment(&mut out, &config, a.seed)?;
            for (c, m, bytes) in &maxes {
                writeln!(out, "# clvl {c}: max m = {m} at target {}, cache {bytes} bytes per epoch", a.target)?;
            }
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["clvl", "missed_updates", "closed_form", "monte_carlo", "std_error"])?;
            for (clvl, m, closed, mc) in &rows {
                w.write_record([
                    clvl.to_string(),
                    m.to_string(),
                    format!("{closed:.6}"),
                    mc.map_or(String::new(), |e| format!("{:.6}", e.fail_rate)),
                    mc.map_or(String::new(), |e| format!("{:.6}", e.std_error)),
                ])?;
            }
            w.flush()?;
        }
        Format::Json => {
            let points: Vec<_> = rows
                .iter()
                .map(|(clvl, m, closed, mc)| json!({ "clvl": clvl, "missed_updates": m, "closed_form": closed, "monte_carlo": mc }))
                .collect();
            let max: Vec<_> = maxes
                .iter()
                .map(|(c, m, bytes)| json!({ "clvl": c, "max_missed": m, "cache_bytes": bytes }))
                .collect();
            serde_json::to_writer_pretty(&mut out, &json!({ "config": config, "seed": a.seed, "max": max, "points": points }))?;
            writeln!(out)?;
        }
    }
    Ok(())
}
