//! Read-only summaries of run directories.

use std::fmt::Write as _;
use std::path::Path;

use super::artifacts::{read_csv, read_json};
use super::{
    AppError, CompareRow, PredictorMetrics, RunConfig, TopEntry, COMPARE_FILE, CONFIG_FILE, ITERATIONS_FILE,
    METRICS_FILE, TOP_FILE,
};
use crate::search::IterationRow;

/// Summarizes whatever artifacts `dir` holds. Reads only; nothing in `dir` is
/// created or modified.
pub fn report(dir: &Path) -> Result<String, AppError> {
    if !dir.is_dir() {
        return Err(AppError::usage("from", format!("{} is not a directory", dir.display())));
    }
    let mut out = String::new();
    if !section(dir, &mut out)? {
        return Err(AppError::usage("from", format!("{} holds no run artifacts", dir.display())));
    }
    Ok(out)
}

fn section(dir: &Path, out: &mut String) -> Result<bool, AppError> {
    let mut found = false;
    let config = dir.join(CONFIG_FILE);
    if config.is_file() {
        found = true;
        let c = RunConfig::load(&config).map_err(|e| AppError::runtime(config.display(), e))?;
        let _ = writeln!(
            out,
            "{}: {} run, seed {}, {:?} strategy, {:?} reward",
            dir.display(),
            c.mode,
            c.search.seed,
            c.search.strategy,
            c.search.signal
        );
    }

    let iterations = dir.join(ITERATIONS_FILE);
    if iterations.is_file() {
        found = true;
        let rows: Vec<IterationRow> = read_csv(&iterations)?;
        let evaluated: usize = rows.iter().map(|r| r.completed).sum();
        let failed: usize = rows.iter().map(|r| r.failed).sum();
        let _ = writeln!(out, "{} iterations, {} evaluated, {} failed", rows.len(), evaluated, failed);
        let _ = writeln!(out, "{:>8} {:>6} {:>12} {:>12} {:>12}", "epsilon", "iters", "mean reward", "max reward", "mean acc");
        for stage in rows.chunk_by(|a, b| a.epsilon == b.epsilon) {
            let n = stage.len() as f64;
            let mean_reward = stage.iter().map(|r| r.mean_reward).sum::<f64>() / n;
            let max_reward = stage.iter().map(|r| r.max_reward).fold(f64::NEG_INFINITY, f64::max);
            let mean_acc = stage.iter().map(|r| r.mean_accuracy).sum::<f64>() / n;
            let _ = writeln!(
                out,
                "{:>8.1} {:>6} {:>12.4} {:>12.4} {:>12.4}",
                stage[0].epsilon,
                stage.len(),
                mean_reward,
                max_reward,
                mean_acc
            );
        }
    }

    let top = dir.join(TOP_FILE);
    if top.is_file() {
        found = true;
        let entries: Vec<TopEntry> = read_json(&top)?;
        for e in entries.iter().take(5) {
            let rescored = match (e.true_accuracy, e.true_reward) {
                (Some(a), Some(r)) => format!(", rescored reward {r:.4} accuracy {a:.4}"),
                _ => String::new(),
            };
            let _ = writeln!(
                out,
                "#{} reward {:.4} accuracy {:.4}{rescored}, {} FLOPs: {}",
                e.rank, e.reward, e.accuracy, e.complexity.flops, e.text
            );
        }
    }

    let metrics = dir.join(METRICS_FILE);
    if metrics.is_file() {
        found = true;
        let m: PredictorMetrics = read_json(&metrics)?;
        let _ = writeln!(
            out,
            "predictor: {} training structures, {} steps, final epoch loss {:.3e}, held-out Spearman {:.4} over {}, MAE {:.4}",
            m.train_samples, m.steps, m.final_epoch_loss, m.heldout_spearman, m.heldout_samples, m.heldout_mae
        );
    }

    let compare = dir.join(COMPARE_FILE);
    if compare.is_file() {
        found = true;
        let rows: Vec<CompareRow> = read_csv(&compare)?;
        if let Some(last) = rows.last() {
            let _ = writeln!(
                out,
                "top-5 after {} iterations: reward {:.4} (Q-learning) vs {:.4} (random), accuracy {:.4} vs {:.4}",
                last.iteration,
                last.qlearning_top5_reward,
                last.random_top5_reward,
                last.qlearning_top5_accuracy,
                last.random_top5_accuracy
            );
        }
    }

    for sub in ["predictor", "qlearning", "random"] {
        let path = dir.join(sub);
        if path.is_dir() {
            let mut inner = String::new();
            if section(&path, &mut inner)? {
                found = true;
                let _ = writeln!(out, "[{sub}]");
                out.push_str(&inner);
            }
        }
    }
    Ok(found)
}
