//! Benchmark scoring of checkpoints and cross-arm report merging.

use crate::generate::load_for_sampling;
use crate::util::{
    begin_run, finish_run, read_json, sha256_file, sha256_hex, write_json, OverrideArgs, RunStamp,
};
use serde::Serialize;
use spritediff_core::eval::{aggregate, evaluate_bench, rows_csv, EvalConfig, MetricsReport};
use spritediff_core::scene::corpus::BenchmarkSpec;
use spritediff_core::{Error, Result};
use std::path::PathBuf;

#[derive(clap::Args, Debug)]
pub struct EvaluateArgs {
    /// Repeatable `ARM=PATH` checkpoint binding, one report per arm.
    #[arg(long = "checkpoint", value_name = "ARM=PATH", required = true)]
    pub checkpoints: Vec<String>,
    /// Arms scored with plain cross-attention, repeatable.
    #[arg(long = "vanilla", value_name = "ARM")]
    pub vanilla: Vec<String>,
    /// Benchmark spec JSON; the built-in benchmark when absent.
    #[arg(long)]
    pub bench: Option<PathBuf>,
    /// Directory for per-arm reports.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: OverrideArgs,
}

fn arm_ok(arm: &str) -> bool {
    !arm.is_empty()
        && arm
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let spec = match &args.bench {
        Some(p) => BenchmarkSpec::load(p)?,
        None => BenchmarkSpec::standard(),
    };
    let mut bindings: Vec<(String, PathBuf)> = Vec::new();
    for b in &args.checkpoints {
        let (arm, path) = b
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("checkpoint binding {b:?} is not ARM=PATH")))?;
        if !arm_ok(arm) {
            return Err(Error::Config(format!(
                "arm name {arm:?} must be lowercase letters, digits, _ or -"
            )));
        }
        if bindings.iter().any(|(a, _)| a == arm) {
            return Err(Error::Config(format!("arm {arm:?} bound twice")));
        }
        bindings.push((arm.to_string(), PathBuf::from(path)));
    }
    for v in &args.vanilla {
        if !bindings.iter().any(|(a, _)| a == v) {
            return Err(Error::Config(format!("vanilla arm {v:?} has no checkpoint")));
        }
    }

    let bench_hash = sha256_hex(serde_json::to_string(&spec)?.as_bytes());
    let mut stamp = RunStamp::new("evaluate", &bench_hash).input(
        "overrides",
        format!("{:?} {:?}", args.overrides.set, args.overrides.rest),
    );
    for (arm, path) in &bindings {
        let mode = if args.vanilla.contains(arm) { "vanilla" } else { "routed" };
        stamp = stamp.input(arm, format!("{}:{mode}", sha256_file(path)?));
    }
    let stamp_path = args.out.join("run.json");
    let done = begin_run(&stamp_path, &stamp)?;
    if done
        && bindings
            .iter()
            .all(|(arm, _)| args.out.join(format!("report_{arm}.json")).exists())
    {
        println!("already complete: {}", args.out.display());
        return Ok(());
    }

    for (arm, path) in &bindings {
        let (model, cfg, ckpt_hash) = load_for_sampling(path, &args.overrides)?;
        let schedule = cfg.schedule()?;
        let eval_cfg = EvalConfig::calibrated(cfg.model.height, cfg.model.width, cfg.model.frames)?;
        let use_sdca = !args.vanilla.contains(arm);
        let rows = evaluate_bench(&model, &schedule, &cfg.sampler, &spec, use_sdca, &eval_cfg)?;
        let report = MetricsReport {
            arm: arm.clone(),
            aggregate: aggregate(&rows)?,
            eval: eval_cfg,
            config_hash: cfg.hash(),
            checkpoint_hash: ckpt_hash,
            rows,
        };
        write_json(&args.out.join(format!("report_{arm}.json")), &report)?;
        std::fs::write(args.out.join(format!("rows_{arm}.csv")), rows_csv(&report.rows))?;
        let a = &report.aggregate;
        println!(
            "arm {arm}: dino {:.3} clip_t {:.3} t_cons {:.3} dync {:.3} missing {:.3}",
            a.dino, a.clip_t, a.t_cons, a.dync, a.missing_rate
        );
    }
    finish_run(&stamp_path, &stamp)?;
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct ReportArgs {
    /// Report files or directories holding `report_*.json`, repeatable.
    #[arg(long = "runs", required = true)]
    pub runs: Vec<PathBuf>,
    /// Directory for the merged table.
    #[arg(long)]
    pub out: PathBuf,
}

/// One table line per arm.
#[derive(Debug, Serialize)]
struct SummaryRow {
    arm: String,
    rows: usize,
    dino: f32,
    clip_t: f32,
    t_cons: f32,
    dync: f32,
    missing_rate: f32,
    config_hash: String,
    checkpoint_hash: String,
}

pub fn report(args: ReportArgs) -> Result<()> {
    let mut files = Vec::new();
    for r in &args.runs {
        if r.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(r)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("report_") && n.ends_with(".json"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(r.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Config("no report files under --runs".into()));
    }

    let mut stamp = RunStamp::new("report", "");
    let mut table: Vec<SummaryRow> = Vec::new();
    for f in &files {
        stamp = stamp.input(&f.display().to_string(), sha256_file(f)?);
        let rep: MetricsReport = read_json(f)?;
        let redo = aggregate(&rep.rows)?;
        let a = &rep.aggregate;
        let consistent = redo.rows == a.rows
            && redo.dino == a.dino
            && redo.clip_t == a.clip_t
            && redo.t_cons == a.t_cons
            && redo.dync == a.dync
            && redo.missing_rate == a.missing_rate;
        if !consistent {
            return Err(Error::Contract(format!(
                "stored aggregate in {} does not match its rows",
                f.display()
            )));
        }
        if table.iter().any(|row| row.arm == rep.arm) {
            return Err(Error::Config(format!("arm {:?} appears twice", rep.arm)));
        }
        table.push(SummaryRow {
            arm: rep.arm,
            rows: a.rows,
            dino: a.dino,
            clip_t: a.clip_t,
            t_cons: a.t_cons,
            dync: a.dync,
            missing_rate: a.missing_rate,
            config_hash: rep.config_hash,
            checkpoint_hash: rep.checkpoint_hash,
        });
    }
    table.sort_by(|x, y| x.arm.cmp(&y.arm));

    let stamp_path = args.out.join("run.json");
    if begin_run(&stamp_path, &stamp)? && args.out.join("summary.json").exists() {
        println!("already complete: {}", args.out.display());
        return Ok(());
    }
    write_json(&args.out.join("summary.json"), &table)?;
    let mut csv = String::from("arm,rows,dino,clip_t,t_cons,dync,missing_rate\n");
    for row in &table {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.arm, row.rows, row.dino, row.clip_t, row.t_cons, row.dync, row.missing_rate
        ));
    }
    std::fs::write(args.out.join("summary.csv"), csv)?;
    finish_run(&stamp_path, &stamp)?;
    println!("{} arms summarized at {}", table.len(), args.out.display());
    Ok(())
}
