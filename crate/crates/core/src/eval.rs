//! Micro/macro element and step accuracy, per-history token accounting, and
//! report rendering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baselines::HistoryMode;
use crate::env::{Episode, Operation};
use crate::error::{Error, Result};
use crate::model::{predict, step_input_from_episode, ModelParams};
use crate::scalar::Scalar;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepResult {
    pub task_id: String,
    pub step_index: usize,
    pub predicted_element: usize,
    pub predicted_op: Operation,
    pub gold_ids: Vec<usize>,
    pub gold_op: Operation,
}

impl StepResult {
    /// Correct iff the predicted element is one of the acceptable elements.
    pub fn element_correct(&self) -> bool {
        self.gold_ids.contains(&self.predicted_element)
    }

    /// Correct iff both the element and the operation are right.
    pub fn step_correct(&self) -> bool {
        self.element_correct() && self.predicted_op == self.gold_op
    }
}

fn micro(results: &[StepResult], correct: impl Fn(&StepResult) -> bool) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Message("no step results to aggregate".into()));
    }
    let hits = results.iter().filter(|r| correct(r)).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Per-task mean of a per-step predicate, then averaged over tasks. Tasks
/// appear only through their results, so zero-step tasks are naturally
/// excluded (the generator never emits them).
fn macro_mean(results: &[StepResult], correct: impl Fn(&StepResult) -> bool) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Message("no step results to aggregate".into()));
    }
    let mut per_task: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in results {
        let e = per_task.entry(&r.task_id).or_insert((0, 0));
        e.0 += correct(r) as usize;
        e.1 += 1;
    }
    let sum: f64 = per_task
        .values()
        .map(|&(hits, n)| hits as f64 / n as f64)
        .sum();
    Ok(sum / per_task.len() as f64)
}

pub fn element_accuracy(results: &[StepResult]) -> Result<f64> {
    micro(results, StepResult::element_correct)
}

pub fn step_accuracy(results: &[StepResult]) -> Result<f64> {
    micro(results, StepResult::step_correct)
}

pub fn macro_element_accuracy(results: &[StepResult]) -> Result<f64> {
    macro_mean(results, StepResult::element_correct)
}

pub fn macro_step_accuracy(results: &[StepResult]) -> Result<f64> {
    macro_mean(results, StepResult::step_correct)
}

/// Teacher-forced evaluation of a model over episodes, in deterministic
/// episode-then-step order.
pub fn evaluate_model<S: Scalar>(
    params: &ModelParams<S>,
    episodes: &[Episode],
) -> Result<Vec<StepResult>> {
    let n_max = params.config.compressor.max_histories;
    let mut out = Vec::new();
    for ep in episodes {
        for (t, step) in ep.steps.iter().enumerate() {
            let input = step_input_from_episode(ep, t, n_max);
            let pred = predict(&input, params)?;
            out.push(StepResult {
                task_id: ep.task_id.clone(),
                step_index: t,
                predicted_element: pred.chosen.0,
                predicted_op: pred.chosen.1,
                gold_ids: step.gold_ids.clone(),
                gold_op: step.gold_op,
            });
        }
    }
    Ok(out)
}

// ---- token accounting --------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub max: usize,
    pub histories: usize,
}

impl TokenStats {
    fn from_counts(counts: &[usize]) -> TokenStats {
        if counts.is_empty() {
            return TokenStats {
                mean: 0.0,
                std: 0.0,
                max: 0,
                histories: 0,
            };
        }
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<usize>() as f64 / n;
        let var = counts
            .iter()
            .map(|&c| (c as f64 - mean) * (c as f64 - mean))
            .sum::<f64>()
            / n;
        TokenStats {
            mean,
            std: var.sqrt(),
            max: counts.iter().copied().max().unwrap_or(0),
            histories: counts.len(),
        }
    }

    /// Table-style rendering, e.g. "8±0".
    pub fn display(&self) -> String {
        fn fmt(x: f64) -> String {
            if (x - x.round()).abs() < 1e-9 {
                format!("{}", x.round() as i64)
            } else {
                format!("{x:.1}")
            }
        }
        format!("{}\u{b1}{}", fmt(self.mean), fmt(self.std))
    }
}

/// Exact per-history counts of the encoder-consumed history tokens for a mode
/// over a dataset. The compressor always consumes exactly Q per history; mode
/// `None` consumes nothing.
pub fn token_accounting(
    mode: HistoryMode,
    episodes: &[Episode],
    queries: usize,
    max_histories: usize,
    baselines: &crate::baselines::BaselineConfig,
) -> Result<TokenStats> {
    let mut counts: Vec<usize> = Vec::new();
    for ep in episodes {
        for t in 0..ep.steps.len() {
            let input = step_input_from_episode(ep, t, max_histories);
            match mode {
                HistoryMode::None => {}
                HistoryMode::Ours => {
                    counts.extend(std::iter::repeat(queries).take(input.histories.len()));
                }
                m => {
                    let streams = crate::baselines::baseline_encode(m, &input.histories, baselines)?;
                    counts.extend(streams.iter().map(|s| s.len()));
                }
            }
        }
    }
    Ok(TokenStats::from_counts(&counts))
}

// ---- reports -------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub label: String,
    pub element_acc: f64,
    pub macro_element_acc: f64,
    pub step_acc: f64,
    pub macro_step_acc: f64,
    pub tokens: TokenStats,
    pub steps: usize,
    pub tasks: usize,
}

impl Report {
    pub fn from_results(label: &str, results: &[StepResult], tokens: TokenStats) -> Result<Report> {
        let mut tasks: Vec<&str> = results.iter().map(|r| r.task_id.as_str()).collect();
        tasks.sort_unstable();
        tasks.dedup();
        Ok(Report {
            label: label.to_string(),
            element_acc: element_accuracy(results)?,
            macro_element_acc: macro_element_accuracy(results)?,
            step_acc: step_accuracy(results)?,
            macro_step_acc: macro_step_accuracy(results)?,
            tokens,
            steps: results.len(),
            tasks: tasks.len(),
        })
    }
}

/// Aligned plain-text table over several reports (one row per model).
pub fn render_report_table(reports: &[Report]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<12} {:>11} {:>17} {:>8} {:>14} {:>16} {:>14}\n",
        "model", "element_acc", "macro_element_acc", "step_acc", "macro_step_acc", "tokens/history", "max_tokens"
    ));
    for r in reports {
        s.push_str(&format!(
            "{:<12} {:>11.4} {:>17.4} {:>8.4} {:>14.4} {:>16} {:>14}\n",
            r.label,
            r.element_acc,
            r.macro_element_acc,
            r.step_acc,
            r.macro_step_acc,
            r.tokens.display(),
            r.tokens.max
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The reference fixture: two tasks with steps [3, 1], element pattern
    /// [T, T, F | T], and one operation error on a correct-element step.
    fn fixture() -> Vec<StepResult> {
        let r = |task: &str, step: usize, el_ok: bool, op_ok: bool| StepResult {
            task_id: task.to_string(),
            step_index: step,
            predicted_element: if el_ok { 1 } else { 9 },
            predicted_op: if op_ok { Operation::Click } else { Operation::Type },
            gold_ids: vec![1, 2],
            gold_op: Operation::Click,
        };
        vec![
            r("a", 0, true, true),
            r("a", 1, true, false), // the op error on a correct element
            r("a", 2, false, true),
            r("b", 0, true, true),
        ]
    }

    #[test]
    fn reference_fixture_metrics_exact() {
        let results = fixture();
        assert!((element_accuracy(&results).unwrap() - 0.75).abs() < 1e-9);
        assert!((macro_element_accuracy(&results).unwrap() - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-9);
        assert!((step_accuracy(&results).unwrap() - 0.5).abs() < 1e-9);
        // step pattern per task: [T,F,F | T] -> macro (1/3 + 1) / 2
        assert!((macro_step_accuracy(&results).unwrap() - (1.0 / 3.0 + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn acceptable_set_counts_any_member() {
        let r = StepResult {
            task_id: "t".into(),
            step_index: 0,
            predicted_element: 2, // second acceptable id
            predicted_op: Operation::Click,
            gold_ids: vec![1, 2],
            gold_op: Operation::Click,
        };
        assert!(r.element_correct());
        assert!((element_accuracy(&[r]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn element_accuracy_never_below_step_accuracy() {
        let results = fixture();
        assert!(element_accuracy(&results).unwrap() >= step_accuracy(&results).unwrap());
    }

    #[test]
    fn macro_equals_micro_for_equal_task_lengths() {
        let mut results = fixture();
        results.pop();
        // now a single task: macro == micro
        assert!(
            (macro_element_accuracy(&results).unwrap() - element_accuracy(&results).unwrap())
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn empty_results_rejected() {
        assert!(element_accuracy(&[]).is_err());
        assert!(macro_step_accuracy(&[]).is_err());
    }

    #[test]
    fn token_stats_for_constant_and_empty_counts() {
        let s = TokenStats::from_counts(&[8, 8, 8, 8]);
        assert_eq!(s.mean, 8.0);
        assert_eq!(s.std, 0.0);
        assert_eq!(s.max, 8);
        assert_eq!(s.display(), "8\u{b1}0");

        let none = TokenStats::from_counts(&[]);
        assert_eq!(none.display(), "0\u{b1}0");
        assert_eq!(none.max, 0);

        let varied = TokenStats::from_counts(&[4, 8]);
        assert!((varied.mean - 6.0).abs() < 1e-12);
        assert!((varied.std - 2.0).abs() < 1e-12);
    }

    #[test]
    fn accounting_matches_modes() {
        use crate::env::{SplitCounts, TaskKind, TaskSpec};
        let spec = TaskSpec {
            kind: TaskKind::MemoryRecall,
            num_items: 4,
            episode_len: 3,
            verbosity: 10,
            memory_depth: 1,
            vocab_seed: 0,
        };
        let _ = SplitCounts {
            train: 0,
            val: 0,
            test: 0,
        };
        let eps: Vec<Episode> = (0..4)
            .map(|s| crate::env::generate_episode(&spec, s).unwrap())
            .collect();
        let bl = crate::baselines::BaselineConfig::default();

        let ours = token_accounting(HistoryMode::Ours, &eps, 8, 5, &bl).unwrap();
        assert_eq!(ours.display(), "8\u{b1}0");
        assert_eq!(ours.max, 8);

        let none = token_accounting(HistoryMode::None, &eps, 8, 5, &bl).unwrap();
        assert_eq!(none.display(), "0\u{b1}0");

        let trunc = token_accounting(HistoryMode::Truncate, &eps, 8, 5, &bl).unwrap();
        assert_eq!(trunc.display(), "16\u{b1}0"); // all states longer than 16

        let paper_q = token_accounting(HistoryMode::Ours, &eps, 256, 5, &bl).unwrap();
        assert_eq!(paper_q.display(), "256\u{b1}0");

        let pruned = token_accounting(HistoryMode::Prune, &eps, 8, 5, &bl).unwrap();
        assert!(pruned.std > 0.0, "pruning counts should vary: {pruned:?}");
    }
}
