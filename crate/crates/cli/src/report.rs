use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use vtao_core::model::Checkpoint;
use vtao_core::rl::{Aggregate, LogRow};

use crate::commands::{EvalSummary, RunInfo, EVAL_FILE, RUN_FILE, TRAIN_LOG};
use crate::plot::{line_chart, Series};

pub const TABLE_FILE: &str = "comparison.tsv";

/// Percentages with one decimal, `63.0 ± 4.0`.
pub fn pm(a: Aggregate) -> String {
    format!("{:.1} ± {:.1}", 100.0 * a.mean, 100.0 * a.std)
}

struct Run {
    label: String,
    eval: EvalSummary,
    log: Vec<LogRow>,
    pretrain_loss: Vec<(f64, f64)>,
}

fn load_run(dir: &Path) -> Result<Run> {
    let eval_path = dir.join(EVAL_FILE);
    let eval: EvalSummary = serde_json::from_str(
        &fs::read_to_string(&eval_path).with_context(|| format!("{} has no {EVAL_FILE}", dir.display()))?,
    )
    .with_context(|| format!("parsing {}", eval_path.display()))?;
    let info: Option<RunInfo> = fs::read_to_string(dir.join(RUN_FILE)).ok().and_then(|s| serde_json::from_str(&s).ok());
    let label = info
        .as_ref()
        .map(|i| i.label.clone())
        .unwrap_or_else(|| dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let log = match fs::read_to_string(dir.join(TRAIN_LOG)) {
        Ok(text) => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).with_context(|| format!("bad row in {}", dir.join(TRAIN_LOG).display())))
            .collect::<Result<_>>()?,
        Err(_) => Vec::new(),
    };
    let pretrain_loss = info
        .and_then(|i| Checkpoint::load(&i.encoder).ok())
        .map(|ck| ck.history.iter().map(|h| (h.step as f64, h.loss.total)).collect())
        .unwrap_or_default();
    Ok(Run { label, eval, log, pretrain_loss })
}

pub fn table(rows: &[(String, Option<Aggregate>, Option<Aggregate>)]) -> String {
    let cell = |a: &Option<Aggregate>| a.map(pm).unwrap_or_else(|| "-".into());
    let mut t = String::from("Baseline\tSeen\tUnseen\n");
    for (label, seen, unseen) in rows {
        t += &format!("{label}\t{}\t{}\n", cell(seen), cell(unseen));
    }
    t
}

/// Comparison table plus reward, success and pretraining-loss curves.
/// Reads nothing but the given run directories.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    if runs.is_empty() {
        bail!("no run directories given");
    }
    let runs: Vec<Run> = runs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    fs::create_dir_all(out)?;
    let rows: Vec<_> = runs.iter().map(|r| (r.label.clone(), r.eval.seen, r.eval.unseen)).collect();
    let text = table(&rows);
    fs::write(out.join(TABLE_FILE), &text)?;
    print!("{text}");

    let curve = |f: &dyn Fn(&LogRow) -> Option<f64>| -> Vec<Series> {
        runs.iter()
            .map(|r| Series {
                label: r.label.clone(),
                points: r.log.iter().filter_map(|row| f(row).map(|y| (row.iteration as f64, y))).collect(),
            })
            .collect()
    };
    let plots = [
        ("reward.svg", line_chart("Mean step reward", "iteration", "reward", &curve(&|r| Some(r.reward.total)))),
        ("success.svg", line_chart("Success rate (last 10)", "iteration", "rate", &curve(&|r| r.success_rate))),
        (
            "pretrain_loss.svg",
            line_chart(
                "Pretraining loss",
                "step",
                "loss",
                &runs.iter().map(|r| Series { label: r.label.clone(), points: r.pretrain_loss.clone() }).collect::<Vec<_>>(),
            ),
        ),
    ];
    for (name, svg) in plots {
        fs::write(out.join(name), svg)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_mirrors_seen_unseen_columns() {
        let a = Aggregate { mean: 0.63, std: 0.04 };
        let b = Aggregate { mean: 0.51, std: 0.07 };
        let t = table(&[("v1".into(), Some(a), Some(b)), ("v2".into(), Some(b), None)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "Baseline\tSeen\tUnseen");
        assert_eq!(lines[1], "v1\t63.0 ± 4.0\t51.0 ± 7.0");
        assert_eq!(lines[2], "v2\t51.0 ± 7.0\t-");
    }
}
