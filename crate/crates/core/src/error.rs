//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used by every fallible operation in the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// The s-expression text could not be parsed. `pos` is the byte offset
    /// of the offending character.
    #[error("malformed logical form at byte {pos}: {msg}")]
    MalformedLf { pos: usize, msg: String },

    /// A grammar file line failed to parse.
    #[error("grammar syntax error at line {line}: {msg}")]
    GrammarSyntax { line: usize, msg: String },

    /// The grammar parsed but is structurally unusable (undeclared symbol,
    /// unproductive nonterminal, empty slot vocabulary, ...).
    #[error("invalid grammar: {msg}")]
    GrammarInvalid { msg: String },

    /// No derivation of the logical form exists under the grammar.
    #[error("logical form not derivable{}: {msg}", fmt_example(.example))]
    NotDerivable { example: Option<usize>, msg: String },

    /// More than one leftmost derivation of the logical form exists.
    #[error("ambiguous derivation: {msg}")]
    AmbiguousDerivation { msg: String },

    /// An action sequence contained an action that is not applicable at
    /// the given step.
    #[error("invalid action at step {step}: {msg}")]
    InvalidAction { step: usize, msg: String },

    /// An action sequence ended before the derivation was complete.
    #[error("action sequence ends with an incomplete tree")]
    IncompleteTree,

    /// The parser was asked to encode an utterance with no tokens.
    #[error("empty utterance")]
    EmptyUtterance,

    /// Decoding reached a state with no applicable actions.
    #[error("no applicable actions at decode step {step}")]
    NoApplicableActions { step: usize },

    /// Decoding did not finish within the step budget.
    #[error("decoding exceeded {max_steps} steps")]
    ParseTimeout { max_steps: usize },

    /// A clustering routine was given fewer points than clusters.
    #[error("insufficient points: need at least {need}, have {have}")]
    InsufficientPoints { have: usize, need: usize },

    /// A sampler or trainer was handed an empty memory or dataset.
    #[error("empty memory")]
    EmptyMemory,

    /// A corpus or memory JSONL line failed to parse or validate.
    #[error("malformed record at line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {msg}")]
    Config { msg: String },

    /// A checkpoint could not be read back.
    #[error("checkpoint error: {msg}")]
    Checkpoint { msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn fmt_example(example: &Option<usize>) -> String {
    match example {
        Some(i) => format!(" (example {i})"),
        None => String::new(),
    }
}
