//! Output files of a run.
//!
//! Everything under the output directory except `timing.jsonl` is a pure
//! function of the config and seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cyclic_dp_core::federation::{Mode, StopReason};
use serde_json::{json, Value};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::fsutil::write_atomic;
use crate::error::Result;
use crate::runner::JobResult;

pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const LEDGER_LOG: &str = "ledger.jsonl";
pub const TIMING_LOG: &str = "timing.jsonl";
pub const RESOLVED_CONFIG: &str = "config.toml";

/// Seed-averaged results for one (site count, arm) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub mode: Mode,
    pub n_sites: usize,
    pub auroc: f64,
    /// Mean of the per-run maximum site ε; `None` for non-private arms.
    pub epsilon: Option<f64>,
    pub steps: f64,
    pub runs: usize,
}

/// Cells in job order (site count, then arm).
pub fn aggregate(results: &[JobResult]) -> Vec<Cell> {
    let mut cells: Vec<Cell> = Vec::new();
    for r in results {
        let (mode, k) = (r.job.mode, r.job.n_sites);
        let eps = r.row.max_epsilon;
        match cells.iter_mut().find(|c| c.mode == mode && c.n_sites == k) {
            Some(c) => {
                c.auroc += r.row.auroc;
                c.epsilon = c.epsilon.zip(eps).map(|(a, b)| a + b);
                c.steps += r.row.steps as f64;
                c.runs += 1;
            }
            None => cells.push(Cell {
                mode,
                n_sites: k,
                auroc: r.row.auroc,
                epsilon: eps,
                steps: r.row.steps as f64,
                runs: 1,
            }),
        }
    }
    for c in &mut cells {
        let n = c.runs as f64;
        c.auroc /= n;
        c.epsilon = c.epsilon.map(|e| e / n);
        c.steps /= n;
    }
    cells
}

fn grid_axes(cells: &[Cell]) -> (Vec<usize>, Vec<Mode>) {
    let mut counts: Vec<usize> = Vec::new();
    let mut modes: Vec<Mode> = Vec::new();
    for c in cells {
        if !counts.contains(&c.n_sites) {
            counts.push(c.n_sites);
        }
        if !modes.contains(&c.mode) {
            modes.push(c.mode);
        }
    }
    (counts, modes)
}

fn cell(cells: &[Cell], k: usize, m: Mode) -> Option<&Cell> {
    cells.iter().find(|c| c.n_sites == k && c.mode == m)
}

fn table(out: &mut String, cells: &[Cell], value: impl Fn(&Cell) -> String) {
    let (counts, modes) = grid_axes(cells);
    let mut rows = vec![std::iter::once("sites".to_string())
        .chain(modes.iter().map(|m| m.name().to_string()))
        .collect::<Vec<_>>()];
    for &k in &counts {
        rows.push(
            std::iter::once(k.to_string())
                .chain(modes.iter().map(|&m| cell(cells, k, m).map_or("-".into(), &value)))
                .collect(),
        );
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (v, w))| if j == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
    }
}

/// Aligned text report: test AUROC and max site ε by number of sites and arm.
pub fn render_text(cfg: &ExperimentConfig, cells: &[Cell]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "seed {}  repeats {}  epochs {}  sigma {}  batch {}  delta {}  epsilon target {}",
        cfg.seed,
        cfg.repeats,
        cfg.training.epochs,
        cfg.training.noise_multiplier,
        cfg.training.batch_size,
        cfg.budget.delta,
        cfg.budget.epsilon
    )
    .unwrap();
    writeln!(out).unwrap();
    writeln!(out, "Test AUROC").unwrap();
    table(&mut out, cells, |c| format!("{:.4}", c.auroc));
    writeln!(out).unwrap();
    writeln!(out, "Max site epsilon").unwrap();
    table(&mut out, cells, |c| c.epsilon.map_or("n/a".into(), |e| format!("{e:.4}")));
    writeln!(out).unwrap();
    writeln!(out, "Mean optimizer steps").unwrap();
    table(&mut out, cells, |c| format!("{:.1}", c.steps));
    out
}

fn stop_json(s: &StopReason) -> Value {
    match s {
        StopReason::Completed => json!({ "kind": "completed" }),
        StopReason::Converged { epoch } => json!({ "kind": "converged", "epoch": epoch }),
        StopReason::AllSitesExhausted { epoch } => {
            json!({ "kind": "all_sites_exhausted", "epoch": epoch })
        }
    }
}

pub fn render_json(cfg: &ExperimentConfig, cells: &[Cell], results: &[JobResult]) -> String {
    let (counts, modes) = grid_axes(cells);
    let grid = |f: &dyn Fn(&Cell) -> Value| -> Value {
        counts
            .iter()
            .map(|&k| {
                modes
                    .iter()
                    .map(|&m| cell(cells, k, m).map_or(Value::Null, f))
                    .collect::<Value>()
            })
            .collect()
    };
    let runs: Vec<Value> = results
        .iter()
        .map(|r| {
            json!({
                "arm": r.job.mode.name(),
                "n_sites": r.job.n_sites,
                "seed": r.job.seed,
                "auroc": r.row.auroc,
                "max_epsilon": r.row.max_epsilon,
                "steps": r.row.steps,
                "stop": stop_json(&r.record.stop),
            })
        })
        .collect();
    let doc = json!({
        "seed": cfg.seed,
        "repeats": cfg.repeats,
        "delta": cfg.budget.delta,
        "epsilon_target": cfg.budget.epsilon,
        "arms": modes.iter().map(|m| m.name()).collect::<Vec<_>>(),
        "site_counts": counts,
        "auroc": grid(&|c| json!(c.auroc)),
        "max_epsilon": grid(&|c| c.epsilon.map_or(Value::Null, |e| json!(e))),
        "steps": grid(&|c| json!(c.steps)),
        "runs": runs,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("json");
    s.push('\n');
    s
}

fn run_key(r: &JobResult) -> Value {
    json!({ "arm": r.job.mode.name(), "n_sites": r.job.n_sites, "seed": r.job.seed })
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Value::Object(a), Value::Object(b)) = (&mut base, extra) {
        a.extend(b);
    }
    base
}

/// One line per (run, epoch, site visit).
pub fn render_metrics(results: &[JobResult]) -> String {
    let mut out = String::new();
    for r in results {
        for rec in r.record.epochs.iter().flatten() {
            let mean = (!rec.losses.is_empty())
                .then(|| rec.losses.iter().sum::<f64>() / rec.losses.len() as f64);
            let line = merge(
                run_key(r),
                json!({
                    "epoch": rec.epoch,
                    "site": rec.site_id,
                    "steps": rec.steps,
                    "mean_loss": mean,
                    "losses": rec.losses,
                    "epsilon": rec.epsilon.map(|e| e.0),
                    "best_order": rec.epsilon.map(|e| e.1),
                    "ledger_steps": rec.ledger_steps,
                    "deactivated": rec.deactivated,
                }),
            );
            out.push_str(&line.to_string());
            out.push('\n');
        }
    }
    out
}

/// Final accountant state of every private site.
pub fn render_ledgers(results: &[JobResult], delta: f64) -> String {
    let mut out = String::new();
    for r in results {
        for l in &r.record.ledgers {
            let line = merge(
                run_key(r),
                json!({
                    "site": l.site_id,
                    "q": l.q,
                    "sigma": l.sigma,
                    "steps": l.steps,
                    "delta": delta,
                    "epsilon": l.epsilon,
                    "best_order": l.best_order,
                }),
            );
            out.push_str(&line.to_string());
            out.push('\n');
        }
    }
    out
}

pub fn render_timing(results: &[JobResult]) -> String {
    let mut out = String::new();
    for r in results {
        let secs = r.record.wall_time.map(|d| d.as_secs_f64());
        out.push_str(&merge(run_key(r), json!({ "wall_time_s": secs })).to_string());
        out.push('\n');
    }
    out
}

pub fn checkpoint_dir(root: &Path, r: &JobResult) -> PathBuf {
    root.join("checkpoints")
        .join(r.job.mode.name())
        .join(format!("sites{}", r.job.n_sites))
        .join(format!("seed{}", r.job.seed))
}

/// Writes every artifact; each file goes through temp-then-rename.
pub fn write_all(cfg: &ExperimentConfig, results: &[JobResult]) -> Result<Vec<Cell>> {
    let root = &cfg.output_dir;
    let cells = aggregate(results);
    for r in results {
        let dir = checkpoint_dir(root, r);
        for (e, p) in r.record.epoch_params.iter().enumerate() {
            checkpoint::save(&dir.join(format!("epoch{}.cdpw", e + 1)), p)?;
        }
        checkpoint::save(&dir.join("final.cdpw"), &r.record.final_params)?;
    }
    write_atomic(&root.join(METRICS_LOG), render_metrics(results).as_bytes())?;
    write_atomic(
        &root.join(LEDGER_LOG),
        render_ledgers(results, cfg.budget.delta).as_bytes(),
    )?;
    write_atomic(&root.join(TIMING_LOG), render_timing(results).as_bytes())?;
    write_atomic(&root.join(RESOLVED_CONFIG), cfg.to_toml().as_bytes())?;
    write_atomic(&root.join(REPORT_JSON), render_json(cfg, &cells, results).as_bytes())?;
    write_atomic(&root.join(REPORT_TXT), render_text(cfg, &cells).as_bytes())?;
    Ok(cells)
}
