//! Corpus loading and synthetic task-stream generation.
//!
//! Real data arrives as a JSONL corpus plus one grammar file per task.
//! The synthetic generator manufactures a stream of tasks whose grammars
//! share a controllable number of textually identical rules (and leaf
//! tokens), with template frequencies drawn from a Zipf distribution so
//! the data is imbalanced the way hand-written corpora are.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{lf_to_actions, ActionRegistry, Grammar};
use crate::lf::LogicalForm;

/// One utterance/logical-form pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub utterance: Vec<String>,
    pub lf: LogicalForm,
}

/// One task's grammar and its three data splits.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub name: String,
    pub grammar: Grammar,
    pub grammar_text: String,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskData {
    pub fn split(&self, name: &str) -> &[Example] {
        match name {
            "train" => &self.train,
            "valid" => &self.valid,
            "test" => &self.test,
            other => panic!("unknown split '{other}'"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    task: String,
    split: String,
    utterance: String,
    lf: String,
}

/// Loads a JSONL corpus (`{task, split, utterance, lf}` per line) plus one
/// `<task>.grammar` file per task from `grammar_dir`. Tasks come back in
/// first-appearance order, with every logical form checked to parse and to
/// be derivable under its task grammar.
pub fn load_corpus(corpus_path: &Path, grammar_dir: &Path) -> Result<Vec<TaskData>> {
    let text = fs::read_to_string(corpus_path)?;
    let mut order: Vec<String> = Vec::new();
    let mut parsed: Vec<(usize, String, String, Vec<String>, LogicalForm)> = Vec::new();

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            msg: e.to_string(),
        })?;
        if !matches!(rec.split.as_str(), "train" | "valid" | "test") {
            return Err(Error::MalformedRecord {
                line: line_no,
                msg: format!("unknown split '{}'", rec.split),
            });
        }
        let tokens: Vec<String> = rec.utterance.split_whitespace().map(String::from).collect();
        if tokens.is_empty() {
            return Err(Error::MalformedRecord {
                line: line_no,
                msg: "empty utterance".into(),
            });
        }
        let lf = LogicalForm::parse(&rec.lf).map_err(|e| Error::MalformedRecord {
            line: line_no,
            msg: format!("bad lf: {e}"),
        })?;
        if !order.contains(&rec.task) {
            order.push(rec.task.clone());
        }
        parsed.push((line_no, rec.task, rec.split, tokens, lf));
    }

    let mut tasks = Vec::with_capacity(order.len());
    for name in &order {
        let grammar_path = grammar_dir.join(format!("{name}.grammar"));
        let grammar_text = fs::read_to_string(&grammar_path).map_err(|e| Error::Config {
            msg: format!("cannot read grammar for task '{name}' at {}: {e}", grammar_path.display()),
        })?;
        let grammar = Grammar::parse(name, &grammar_text)?;
        let mut registry = ActionRegistry::new();
        let bound = registry.bind(grammar.clone());

        let mut task = TaskData {
            name: name.clone(),
            grammar,
            grammar_text,
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
        };
        for (line_no, task_name, split, tokens, lf) in &parsed {
            if task_name != name {
                continue;
            }
            lf_to_actions(lf, &bound).map_err(|e| Error::NotDerivable {
                example: Some(*line_no),
                msg: format!("task '{name}': {e}"),
            })?;
            let ex = Example { utterance: tokens.clone(), lf: lf.clone() };
            match split.as_str() {
                "train" => task.train.push(ex),
                "valid" => task.valid.push(ex),
                _ => task.test.push(ex),
            }
        }
        tasks.push(task);
    }
    Ok(tasks)
}

/// Writes `corpus.jsonl` plus one `<task>.grammar` per task into `dir`.
pub fn save_corpus(tasks: &[TaskData], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut lines = String::new();
    for task in tasks {
        fs::write(dir.join(format!("{}.grammar", task.name)), &task.grammar_text)?;
        for (split, examples) in
            [("train", &task.train), ("valid", &task.valid), ("test", &task.test)]
        {
            for ex in examples.iter() {
                let rec = Record {
                    task: task.name.clone(),
                    split: split.to_string(),
                    utterance: ex.utterance.join(" "),
                    lf: ex.lf.canonical_text().to_string(),
                };
                lines.push_str(&serde_json::to_string(&rec)?);
                lines.push('\n');
            }
        }
    }
    fs::write(dir.join("corpus.jsonl"), lines)?;
    Ok(())
}

/// Parameters of the synthetic task-stream generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Number of tasks in the stream.
    pub num_tasks: usize,
    /// Operation rules with identical text in every task's grammar.
    pub shared_rule_count: usize,
    /// Operation rules private to each task.
    pub private_rule_count: usize,
    /// Entity tokens shared by all tasks / private per task.
    pub shared_ent_tokens: usize,
    pub private_ent_tokens: usize,
    /// Modifier tokens shared by all tasks / private per task.
    pub shared_mod_tokens: usize,
    pub private_mod_tokens: usize,
    /// Zipf exponent for LF-template frequencies; 0 = uniform.
    pub template_skew: f64,
    /// Examples generated per task, split 70/10/20 into train/valid/test.
    pub examples_per_task: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_tasks: 5,
            shared_rule_count: 5,
            private_rule_count: 4,
            shared_ent_tokens: 8,
            private_ent_tokens: 6,
            shared_mod_tokens: 2,
            private_mod_tokens: 2,
            template_skew: 1.2,
            examples_per_task: 200,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config { msg });
        if self.num_tasks == 0 {
            return err("num_tasks must be at least 1".into());
        }
        if self.private_rule_count == 0 && self.shared_rule_count == 0 {
            return err("need at least one operation rule per task".into());
        }
        if self.shared_ent_tokens + self.private_ent_tokens == 0 {
            return err("need at least one entity token".into());
        }
        if self.shared_mod_tokens + self.private_mod_tokens == 0 {
            return err("need at least one modifier token".into());
        }
        if !(self.template_skew >= 0.0 && self.template_skew.is_finite()) {
            return err(format!("template_skew must be finite and >= 0, got {}", self.template_skew));
        }
        if self.examples_per_task == 0 {
            return err("examples_per_task must be at least 1".into());
        }
        Ok(())
    }
}

/// Every task grammar embeds the same two structural productions, so they
/// are cross-task by construction whenever the stream has two or more
/// tasks; the cross-task APPLY count is exactly `shared_rule_count + 2`.
pub const STRUCTURAL_RULE_COUNT: usize = 2;

fn task_name(t: usize) -> String {
    format!("t{}", t + 1)
}

fn grammar_text_for(spec: &SynthSpec, t: usize) -> String {
    let name = task_name(t);
    let mut ents: Vec<String> = (0..spec.shared_ent_tokens).map(|j| format!("ent_s{}", j + 1)).collect();
    ents.extend((0..spec.private_ent_tokens).map(|j| format!("ent_{name}_{}", j + 1)));
    let mut mods: Vec<String> = (0..spec.shared_mod_tokens).map(|j| format!("mod_s{}", j + 1)).collect();
    mods.extend((0..spec.private_mod_tokens).map(|j| format!("mod_{name}_{}", j + 1)));

    let mut text = String::from("start Q\n");
    text.push_str(&format!("slot ent : {}\n", ents.join(" ")));
    text.push_str(&format!("slot mod : {}\n", mods.join(" ")));
    text.push_str("# operations shared across the stream\n");
    for i in 0..spec.shared_rule_count {
        text.push_str(&format!("Q -> ( op_s{} E )\n", i + 1));
    }
    text.push_str("# operations specific to this task\n");
    for i in 0..spec.private_rule_count {
        text.push_str(&format!("Q -> ( op_{name}_{} E )\n", i + 1));
    }
    text.push_str("# argument structure\n");
    text.push_str("E -> slot(ent)\n");
    text.push_str("E -> ( refine slot(ent) slot(mod) )\n");
    text
}

/// Zipf weights (1/rank^skew) over `n` templates: positions
/// `private_start..n` (a task's own templates) take the top ranks in index
/// order; the shared positions `0..private_start` fill the tail. Each
/// task's examples are therefore dominated by its private templates while
/// the shared inventory forms a consistent low-frequency core — the
/// structural imbalance that memory samplers have to cope with. (With no
/// private rules the rotation is a no-op and the shared templates take the
/// head in index order.)
fn zipf_weights(n: usize, private_start: usize, skew: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (private_start..n).collect();
    order.extend(0..private_start);
    let mut weights = vec![0.0; n];
    for (rank, &item) in order.iter().enumerate() {
        weights[item] = 1.0 / ((rank + 1) as f64).powf(skew);
    }
    weights
}

/// Surface-word assignment for one symbol family (operations or entities)
/// in one task.
///
/// The family's surface vocabulary is shared by the whole stream: `shared`
/// stable words (`<prefix>1..`), one per shared symbol, plus a volatile
/// pool of `2 * privates` words. Each task claims `privates` consecutive
/// pool slots (a window starting at `task_index * step`, wrapping) for its
/// private symbols, and each unclaimed pool word replaces the stable word
/// of the shared symbol at `slot % shared` for that task. With fewer free
/// slots than shared symbols, at least one shared symbol per task keeps
/// its stable word, and the window rotation varies which, so every stable
/// word keeps appearing somewhere in the stream.
///
/// The rotation is what makes sequential training on the stream
/// destructive. A pool word names one task's private concept until a later
/// task's window moves past it, at which point that word is retrained as a
/// replacement name for a shared symbol. Shared symbols are in every
/// task's candidate set, so the new reading competes directly with the
/// earlier task's private reading of the same word and overwrites it.
/// Within a window the top-frequency private symbols sit at the
/// latest-claimed slots, so an earlier task's dominant words are
/// overwritten later and its performance decays progressively rather than
/// in one step.
struct WordTable {
    prefix: &'static str,
    shared: usize,
    /// Pool slot assigned to each private symbol, in symbol order.
    claimed: Vec<usize>,
    /// Replacement pool slot for each shared symbol, if a slot is free.
    synonym: Vec<Option<usize>>,
}

impl WordTable {
    fn new(prefix: &'static str, shared: usize, privates: usize, task_index: usize, step: usize) -> Self {
        let pool = 2 * privates;
        let claimed: Vec<usize> = (0..privates)
            .map(|i| (task_index * step + (privates - 1 - i)) % pool)
            .collect();
        let mut synonym = vec![None; shared];
        if shared > 0 {
            for slot in 0..pool {
                if !claimed.contains(&slot) {
                    let target = slot % shared;
                    if synonym[target].is_none() {
                        synonym[target] = Some(slot);
                    }
                }
            }
        }
        WordTable { prefix, shared, claimed, synonym }
    }

    /// Surface word for symbol `idx` (shared symbols first, then private).
    fn word(&self, idx: usize) -> String {
        if idx < self.shared {
            match self.synonym[idx] {
                Some(slot) => format!("{}{}", self.prefix, self.shared + slot + 1),
                None => format!("{}{}", self.prefix, idx + 1),
            }
        } else {
            let slot = self.claimed[idx - self.shared];
            format!("{}{}", self.prefix, self.shared + slot + 1)
        }
    }
}

/// Generates the full task stream described by `spec`. Logical forms use
/// per-task symbol names; utterances use one position-based surface
/// vocabulary shared by all tasks, so private symbols at the same position
/// collide on the surface across tasks (see the comment inside).
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<TaskData>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tasks = Vec::with_capacity(spec.num_tasks);

    // Every task has the same number of templates, entities and modifiers,
    // so frequency profiles are comparable position-by-position across the
    // stream (see `zipf_weights` for how the head is placed and rotated).
    let template_count = (spec.shared_rule_count + spec.private_rule_count) * 2;
    let ent_count = spec.shared_ent_tokens + spec.private_ent_tokens;
    let mod_count = spec.shared_mod_tokens + spec.private_mod_tokens;

    for t in 0..spec.num_tasks {
        // Templates come in (plain, refined) pairs per operation, hence the
        // factor of two; every task weights the same positions the same way.
        let template_dist = WeightedIndex::new(zipf_weights(
            template_count,
            spec.shared_rule_count * 2,
            spec.template_skew,
        ))
        .expect("nonempty template weights");
        // The Zipf exponent shapes template frequencies only; leaf tokens
        // are drawn uniformly, so every surface word of a family carries
        // comparable mass and no single word dominates a task.

        // Word tables implement the rotating claim/synonym scheme (see
        // `WordTable`). Each family rotates half a window per task, so the
        // words one task leans on are overwritten over the following two
        // tasks rather than all at once.
        let op_table = WordTable::new(
            "verb",
            spec.shared_rule_count,
            spec.private_rule_count,
            t,
            (spec.private_rule_count / 2).max(1),
        );
        let ent_table = WordTable::new(
            "noun",
            spec.shared_ent_tokens,
            spec.private_ent_tokens,
            t,
            (spec.private_ent_tokens / 2).max(1),
        );
        let name = task_name(t);
        let grammar_text = grammar_text_for(spec, t);
        let grammar = Grammar::parse(&name, &grammar_text)?;

        let ops: Vec<String> = (0..spec.shared_rule_count)
            .map(|i| format!("op_s{}", i + 1))
            .chain((0..spec.private_rule_count).map(|i| format!("op_{name}_{}", i + 1)))
            .collect();
        let ents = grammar.slot_vocab("ent").to_vec();
        let mods = grammar.slot_vocab("mod").to_vec();

        debug_assert_eq!(ents.len(), ent_count);
        debug_assert_eq!(mods.len(), mod_count);

        // Utterances draw on one surface vocabulary shared by the whole
        // stream (`verbN` / `nounN` / `adjN`); the per-task `WordTable`s
        // decide which word names which symbol. Without that sharing the
        // tasks would not interact at all under per-task candidate masking
        // and the stream could not exhibit forgetting.
        let mut examples = Vec::with_capacity(spec.examples_per_task);
        for _ in 0..spec.examples_per_task {
            let template = template_dist.sample(&mut rng);
            let op_idx = template / 2;
            let op = &ops[op_idx];
            let refined = template % 2 == 1;
            let ent_idx = rng.random_range(0..ent_count);
            let ent = &ents[ent_idx];
            let verb = op_table.word(op_idx);
            let noun = ent_table.word(ent_idx);
            // Plain and refined verbalizations share length and word
            // positions (only the middle token differs), so what the
            // encoder learns about a verb or noun in one variant carries
            // over to the other instead of being keyed to sequence shape.
            let (lf_text, utterance) = if refined {
                let mod_idx = rng.random_range(0..mod_count);
                let m = &mods[mod_idx];
                (
                    format!("({op} (refine {ent} {m}))"),
                    vec![verb, format!("adj{}", mod_idx + 1), noun],
                )
            } else {
                (format!("({op} {ent})"), vec![verb, "the".to_string(), noun])
            };
            examples.push(Example { utterance, lf: LogicalForm::parse(&lf_text)? });
        }

        let n = examples.len();
        let train_end = n * 7 / 10;
        let valid_end = train_end + n / 10;
        let test = examples.split_off(valid_end);
        let valid = examples.split_off(train_end);
        tasks.push(TaskData {
            name,
            grammar,
            grammar_text,
            train: examples,
            valid,
            test,
        });
    }
    Ok(tasks)
}

/// How many actions the stream's grammars share.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapSummary {
    /// Size of the union of all task action inventories.
    pub total_actions: usize,
    /// Actions present in at least two task inventories.
    pub cross_task_actions: usize,
    pub cross_task_fraction: f64,
    /// Cross-task actions that are rule applications (vs. token fills).
    pub cross_task_applies: usize,
    pub per_task_actions: Vec<usize>,
}

/// Binds every grammar to one registry and counts inventory overlap.
pub fn overlap_summary(tasks: &[TaskData]) -> OverlapSummary {
    let mut registry = ActionRegistry::new();
    let bounds: Vec<_> = tasks.iter().map(|t| registry.bind(t.grammar.clone())).collect();
    let mut membership = vec![0usize; registry.len()];
    for bound in &bounds {
        for &a in &bound.inventory {
            membership[a] += 1;
        }
    }
    let cross: Vec<usize> = (0..registry.len()).filter(|&a| membership[a] >= 2).collect();
    let cross_task_applies = cross
        .iter()
        .filter(|&&a| registry.key(a).starts_with("APPLY "))
        .count();
    OverlapSummary {
        total_actions: registry.len(),
        cross_task_actions: cross.len(),
        cross_task_fraction: cross.len() as f64 / registry.len() as f64,
        cross_task_applies,
        per_task_actions: bounds.iter().map(|b| b.inventory.len()).collect(),
    }
}
