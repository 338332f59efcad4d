use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::train::TrainHistory;

/// Serialize a run's history as the metrics CSV:
/// `iter,phase,fmd,residual,bleu2,bleu3,selfbleu2,selfbleu3,wall_ms`.
/// Update rows leave the BLEU columns empty; eval rows carry the
/// held-out distance in the fmd column. An optional extra column (the
/// cipher task appends `accuracy`) goes between the BLEU block and
/// `wall_ms`.
pub fn write_metrics_csv(history: &TrainHistory, path: &Path) -> Result<()> {
    write_metrics_csv_with(history, path, None)
}

pub fn write_metrics_csv_with(
    history: &TrainHistory,
    path: &Path,
    accuracy_by_iter: Option<&[(usize, f64)]>,
) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    let acc_col = accuracy_by_iter.is_some();
    if acc_col {
        writeln!(
            out,
            "iter,phase,fmd,residual,bleu2,bleu3,selfbleu2,selfbleu3,accuracy,wall_ms"
        )?;
    } else {
        writeln!(out, "iter,phase,fmd,residual,bleu2,bleu3,selfbleu2,selfbleu3,wall_ms")?;
    }

    // Interleave step and eval records in iteration order, steps first.
    let mut step_i = 0;
    let mut eval_i = 0;
    while step_i < history.steps.len() || eval_i < history.evals.len() {
        let step_iter = history.steps.get(step_i).map(|s| s.iter);
        let eval_iter = history.evals.get(eval_i).map(|e| e.iter);
        let take_step = match (step_iter, eval_iter) {
            (Some(s), Some(e)) => s <= e,
            (Some(_), None) => true,
            _ => false,
        };
        if take_step {
            let s = &history.steps[step_i];
            step_i += 1;
            if acc_col {
                writeln!(
                    out,
                    "{},{},{},{},,,,,,{}",
                    s.iter, s.phase, s.fmd, s.residual, s.wall_ms
                )?;
            } else {
                writeln!(
                    out,
                    "{},{},{},{},,,,,{}",
                    s.iter, s.phase, s.fmd, s.residual, s.wall_ms
                )?;
            }
        } else {
            let e = &history.evals[eval_i];
            eval_i += 1;
            if let Some(table) = accuracy_by_iter {
                let acc = table
                    .iter()
                    .find(|(it, _)| *it == e.iter)
                    .map(|(_, a)| a.to_string())
                    .unwrap_or_default();
                writeln!(
                    out,
                    "{},eval,{},{},{},{},{},{},{},{}",
                    e.iter,
                    e.heldout_fmd,
                    e.residual,
                    e.bleu2,
                    e.bleu3,
                    e.self_bleu2,
                    e.self_bleu3,
                    acc,
                    e.wall_ms
                )?;
            } else {
                writeln!(
                    out,
                    "{},eval,{},{},{},{},{},{},{}",
                    e.iter,
                    e.heldout_fmd,
                    e.residual,
                    e.bleu2,
                    e.bleu3,
                    e.self_bleu2,
                    e.self_bleu3,
                    e.wall_ms
                )?;
            }
        }
    }
    Ok(())
}
