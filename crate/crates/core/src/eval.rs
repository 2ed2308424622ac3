//! Exact-match evaluation, the two stream-level accuracy summaries, and
//! per-action probability traces for forgetting diagnostics.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::grammar::{lf_to_actions, ActionId, BoundGrammar};
use crate::lf::LogicalForm;
use crate::nn::{BatchExample, Parser};

/// Exact match on canonical s-expression text.
pub fn exact_match(pred: &LogicalForm, gold: &LogicalForm) -> bool {
    pred.canonical_text() == gold.canonical_text()
}

/// Correct/total counts for one (eval task, checkpoint) cell. Keeping the
/// raw counts lets the combined metric stay instance-weighted without any
/// re-derivation from rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccCell {
    pub correct: usize,
    pub total: usize,
}

impl AccCell {
    pub fn acc(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Lower-triangular accuracy table: `rows[k][i]` is the test accuracy on
/// task `i` measured after training through task `k` (`i <= k`).
#[derive(Debug, Clone, Default)]
pub struct EvalResult {
    pub rows: Vec<Vec<AccCell>>,
}

impl EvalResult {
    /// Appends the evaluation row after one more task; the row must cover
    /// exactly the tasks seen so far.
    pub fn push_row(&mut self, row: Vec<AccCell>) {
        assert_eq!(row.len(), self.rows.len() + 1, "row k must have k+1 cells");
        self.rows.push(row);
    }

    pub fn acc(&self, eval_task: usize, after_task: usize) -> f64 {
        self.rows[after_task][eval_task].acc()
    }

    /// Unweighted mean of per-task accuracies after task `after_task`.
    pub fn acc_avg(&self, after_task: usize) -> f64 {
        let row = &self.rows[after_task];
        row.iter().map(|c| c.acc()).sum::<f64>() / row.len() as f64
    }

    /// Accuracy over the concatenation of all seen test sets
    /// (instance-weighted, not task-weighted).
    pub fn acc_whole(&self, after_task: usize) -> f64 {
        let row = &self.rows[after_task];
        let correct: usize = row.iter().map(|c| c.correct).sum();
        let total: usize = row.iter().map(|c| c.total).sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }
}

/// Parses every example and counts exact matches. Decode failures
/// (timeout, dead-end states) count as wrong answers rather than aborting
/// the evaluation; genuine usage errors still propagate.
pub fn evaluate_split(
    parser: &Parser,
    examples: &[Example],
    bound: &BoundGrammar,
    task: usize,
    beam_width: usize,
) -> Result<AccCell> {
    let mut correct = 0;
    for ex in examples {
        let tokens = parser.vocab.ids(&ex.utterance);
        match parser.parse(&tokens, bound, task, beam_width) {
            Ok(decoded) => {
                if exact_match(&decoded.lf, &ex.lf) {
                    correct += 1;
                }
            }
            Err(Error::ParseTimeout { .. }) | Err(Error::NoApplicableActions { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(AccCell { correct, total: examples.len() })
}

/// Actions that belong to at least two task grammars.
pub fn cross_task_action_ids(grammars: &[BoundGrammar]) -> BTreeSet<ActionId> {
    let mut membership: BTreeMap<ActionId, usize> = BTreeMap::new();
    for g in grammars {
        for &a in &g.inventory {
            *membership.entry(a).or_insert(0) += 1;
        }
    }
    membership.into_iter().filter(|&(_, n)| n >= 2).map(|(a, _)| a).collect()
}

/// Stream position of the first grammar whose inventory holds the action.
pub fn origin_task_of(action: ActionId, grammars: &[BoundGrammar]) -> Option<usize> {
    grammars.iter().position(|g| g.inventory.contains(&action))
}

/// Teacher-forced mean conditional probability of each gold action over a
/// dataset: for every occurrence of an action in a gold sequence, the
/// model's probability of that action given the gold prefix, averaged per
/// action. Actions with no occurrence are absent from the map.
pub fn mean_gold_action_probs(
    parser: &Parser,
    examples: &[Example],
    bound: &BoundGrammar,
    task: usize,
) -> Result<BTreeMap<ActionId, f64>> {
    let mut sums: BTreeMap<ActionId, (f64, usize)> = BTreeMap::new();
    for ex in examples {
        let tokens = parser.vocab.ids(&ex.utterance);
        let actions = lf_to_actions(&ex.lf, bound)?;
        let ex = BatchExample { tokens: &tokens, actions: &actions, bound, task };
        for (action, prob) in parser.sequence_step_probs(&ex)? {
            let slot = sums.entry(action).or_insert((0.0, 0));
            slot.0 += prob;
            slot.1 += 1;
        }
    }
    Ok(sums.into_iter().map(|(a, (s, n))| (a, s / n as f64)).collect())
}

/// Evolution of one action's mean gold-prefix probability across training
/// checkpoints.
#[derive(Debug, Clone)]
pub struct ActionProbTrace {
    pub action_id: ActionId,
    pub action_text: String,
    pub origin_task: usize,
    pub cross_task: bool,
    /// One mean probability per post-task checkpoint.
    pub mean_probs: Vec<f64>,
}

/// Assembles traces from per-checkpoint probability means (all computed
/// on the same dataset, so the key sets agree).
pub fn build_traces(
    snapshot_means: &[BTreeMap<ActionId, f64>],
    action_text: impl Fn(ActionId) -> String,
    grammars: &[BoundGrammar],
) -> Vec<ActionProbTrace> {
    let Some(first) = snapshot_means.first() else {
        return Vec::new();
    };
    let cross = cross_task_action_ids(grammars);
    first
        .keys()
        .map(|&a| ActionProbTrace {
            action_id: a,
            action_text: action_text(a),
            origin_task: origin_task_of(a, grammars).unwrap_or(0),
            cross_task: cross.contains(&a),
            mean_probs: snapshot_means
                .iter()
                .map(|m| *m.get(&a).expect("snapshots share a dataset, hence keys"))
                .collect(),
        })
        .collect()
}
