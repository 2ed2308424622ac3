//! Task grammars and the transition system that links logical forms to
//! action sequences.
//!
//! A grammar file is line-oriented:
//!
//! ```text
//! # comment
//! start Q
//! slot ent : city river lake
//! Q -> ( count E )
//! E -> slot(ent)
//! ```
//!
//! * `start X` names the start nonterminal (required, exactly once).
//! * `slot NAME : tok tok ...` declares a slot type and its leaf vocabulary.
//! * `LHS -> rhs` declares a production. The rhs is an s-expression
//!   template: `(` `)` group a tree node whose head must be a plain symbol;
//!   `slot(NAME)` references a declared slot; a symbol that appears as an
//!   LHS anywhere in the file is a nonterminal reference; any other symbol
//!   is a literal leaf. A template may nest, so one production can emit a
//!   multi-level tree fragment.
//!
//! Derivation expands the leftmost frontier hole first. An `APPLY` action
//! grafts a production's template into a nonterminal hole; a `GEN` action
//! fills a slot hole with one token from the slot's vocabulary. Every
//! grammar is required to be unambiguous: each derivable tree has exactly
//! one leftmost derivation.
//!
//! Actions are interned in a global, append-only [`ActionRegistry`] keyed
//! by canonical text, so a production or slot token that appears verbatim
//! in several task grammars is the *same* action everywhere.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::error::{Error, Result};
use crate::lf::{AstNode, LogicalForm};

/// Globally unique action identifier (index into the registry).
pub type ActionId = usize;

/// One rhs element of a production template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Template {
    /// A concrete leaf symbol.
    Literal(String),
    /// A hole to be expanded by a production of the named nonterminal.
    NonTerm(String),
    /// A hole to be filled by one token of the named slot type.
    Slot(String),
    /// An internal tree node with a fixed head symbol and nested items.
    Node { head: String, items: Vec<Template> },
}

impl Template {
    fn write_canonical(&self, out: &mut String) {
        match self {
            Template::Literal(s) => out.push_str(s),
            Template::NonTerm(s) => out.push_str(s),
            Template::Slot(s) => {
                out.push_str("slot(");
                out.push_str(s);
                out.push(')');
            }
            Template::Node { head, items } => {
                out.push_str("( ");
                out.push_str(head);
                for item in items {
                    out.push(' ');
                    item.write_canonical(out);
                }
                out.push_str(" )");
            }
        }
    }
}

/// A single production.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub lhs: String,
    pub template: Template,
    /// Canonical `LHS -> rhs` text; identical text in two grammars means
    /// the same action.
    pub text: String,
}

/// A parsed and validated task grammar.
#[derive(Debug, Clone)]
pub struct Grammar {
    pub name: String,
    pub start: String,
    pub rules: Vec<Rule>,
    /// Slot type -> leaf vocabulary, in declaration order (deduplicated).
    pub slots: BTreeMap<String, Vec<String>>,
    rules_by_lhs: BTreeMap<String, Vec<usize>>,
    /// Minimum height of a finished tree derivable from each nonterminal.
    nt_min_height: BTreeMap<String, usize>,
}

impl Grammar {
    /// Parses and validates grammar text. `name` is used in diagnostics and
    /// to identify the task the grammar belongs to.
    pub fn parse(name: &str, text: &str) -> Result<Grammar> {
        let mut start: Option<String> = None;
        let mut slots: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut raw_rules: Vec<(usize, String, Vec<String>)> = Vec::new();

        for (lineno, raw_line) in text.lines().enumerate() {
            let line = lineno + 1;
            let content = match raw_line.find('#') {
                Some(i) => &raw_line[..i],
                None => raw_line,
            };
            let content = content.trim();
            if content.is_empty() {
                continue;
            }
            let syntax = |msg: &str| Error::GrammarSyntax { line, msg: msg.to_string() };

            if let Some(rest) = content.strip_prefix("start ") {
                if start.is_some() {
                    return Err(syntax("duplicate start declaration"));
                }
                let sym = rest.trim();
                if sym.is_empty() || sym.split_whitespace().count() != 1 {
                    return Err(syntax("start expects exactly one symbol"));
                }
                start = Some(sym.to_string());
            } else if let Some(rest) = content.strip_prefix("slot ") {
                let (sname, vocab) = rest
                    .split_once(':')
                    .ok_or_else(|| syntax("slot declaration needs ':'"))?;
                let sname = sname.trim();
                if sname.is_empty() || sname.split_whitespace().count() != 1 {
                    return Err(syntax("slot expects exactly one name before ':'"));
                }
                if slots.contains_key(sname) {
                    return Err(syntax(&format!("duplicate slot declaration '{sname}'")));
                }
                let mut tokens = Vec::new();
                for tok in vocab.split_whitespace() {
                    if !tokens.iter().any(|t| t == tok) {
                        tokens.push(tok.to_string());
                    }
                }
                if tokens.is_empty() {
                    return Err(syntax(&format!("slot '{sname}' has an empty vocabulary")));
                }
                slots.insert(sname.to_string(), tokens);
            } else if let Some((lhs, rhs)) = content.split_once("->") {
                let lhs = lhs.trim();
                if lhs.is_empty() || lhs.split_whitespace().count() != 1 {
                    return Err(syntax("production expects exactly one LHS symbol"));
                }
                let rhs_tokens: Vec<String> = rhs
                    .split_whitespace()
                    .map(str::to_string)
                    .collect();
                if rhs_tokens.is_empty() {
                    return Err(syntax("production has an empty rhs"));
                }
                raw_rules.push((line, lhs.to_string(), rhs_tokens));
            } else {
                return Err(syntax("expected 'start', 'slot', or a production"));
            }
        }

        let start = start.ok_or_else(|| Error::GrammarInvalid {
            msg: format!("grammar '{name}' has no start declaration"),
        })?;
        if raw_rules.is_empty() {
            return Err(Error::GrammarInvalid { msg: format!("grammar '{name}' has no productions") });
        }

        let nonterminals: BTreeSet<String> =
            raw_rules.iter().map(|(_, lhs, _)| lhs.clone()).collect();

        let mut rules = Vec::new();
        for (line, lhs, tokens) in &raw_rules {
            let mut pos = 0usize;
            let template = parse_template(tokens, &mut pos, &nonterminals, &slots, *line)?;
            if pos != tokens.len() {
                return Err(Error::GrammarSyntax {
                    line: *line,
                    msg: "trailing tokens after rhs template".to_string(),
                });
            }
            let mut text = String::new();
            text.push_str(lhs);
            text.push_str(" -> ");
            template.write_canonical(&mut text);
            rules.push(Rule { lhs: lhs.clone(), template, text });
        }

        let mut rules_by_lhs: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, rule) in rules.iter().enumerate() {
            rules_by_lhs.entry(rule.lhs.clone()).or_default().push(i);
        }

        if !nonterminals.contains(&start) {
            return Err(Error::GrammarInvalid {
                msg: format!("start symbol '{start}' has no productions"),
            });
        }

        let nt_min_height = compute_min_heights(&rules, &nonterminals).map_err(|nt| {
            Error::GrammarInvalid {
                msg: format!("nonterminal '{nt}' derives no finite tree"),
            }
        })?;

        Ok(Grammar {
            name: name.to_string(),
            start,
            rules,
            slots,
            rules_by_lhs,
            nt_min_height,
        })
    }

    pub fn rules_of(&self, nonterminal: &str) -> &[usize] {
        self.rules_by_lhs
            .get(nonterminal)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn slot_vocab(&self, slot: &str) -> &[String] {
        self.slots.get(slot).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn parse_template(
    tokens: &[String],
    pos: &mut usize,
    nonterminals: &BTreeSet<String>,
    slots: &BTreeMap<String, Vec<String>>,
    line: usize,
) -> Result<Template> {
    let syntax = |msg: String| Error::GrammarSyntax { line, msg };
    let Some(tok) = tokens.get(*pos) else {
        return Err(syntax("unexpected end of rhs".to_string()));
    };
    if tok == "(" {
        *pos += 1;
        let head = tokens
            .get(*pos)
            .ok_or_else(|| syntax("unclosed '(' in rhs".to_string()))?;
        if head == "(" || head == ")" || head.starts_with("slot(") || nonterminals.contains(head)
        {
            return Err(syntax(format!(
                "template head must be a literal symbol, found '{head}'"
            )));
        }
        let head = head.clone();
        *pos += 1;
        let mut items = Vec::new();
        loop {
            match tokens.get(*pos) {
                Some(t) if t == ")" => {
                    *pos += 1;
                    if items.is_empty() {
                        return Err(syntax("template node needs at least one item".to_string()));
                    }
                    return Ok(Template::Node { head, items });
                }
                Some(_) => items.push(parse_template(tokens, pos, nonterminals, slots, line)?),
                None => return Err(syntax("unclosed '(' in rhs".to_string())),
            }
        }
    } else if tok == ")" {
        Err(syntax("unexpected ')' in rhs".to_string()))
    } else if let Some(inner) = tok.strip_prefix("slot(").and_then(|r| r.strip_suffix(')')) {
        if !slots.contains_key(inner) {
            return Err(syntax(format!("undeclared slot type '{inner}'")));
        }
        *pos += 1;
        Ok(Template::Slot(inner.to_string()))
    } else if nonterminals.contains(tok.as_str()) {
        let t = Template::NonTerm(tok.clone());
        *pos += 1;
        Ok(t)
    } else {
        let t = Template::Literal(tok.clone());
        *pos += 1;
        Ok(t)
    }
}

/// Fixpoint computation of the minimum finished-tree height per
/// nonterminal. Returns the offending nonterminal if one can never finish.
fn compute_min_heights(
    rules: &[Rule],
    nonterminals: &BTreeSet<String>,
) -> std::result::Result<BTreeMap<String, usize>, String> {
    const INF: usize = usize::MAX / 4;
    let mut heights: BTreeMap<String, usize> =
        nonterminals.iter().map(|nt| (nt.clone(), INF)).collect();
    loop {
        let mut changed = false;
        for rule in rules {
            let h = template_height(&rule.template, &heights);
            let entry = heights.get_mut(&rule.lhs).expect("lhs is a nonterminal");
            if h < *entry {
                *entry = h;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    if let Some((nt, _)) = heights.iter().find(|(_, &h)| h >= INF) {
        return Err(nt.clone());
    }
    Ok(heights)
}

fn template_height(template: &Template, heights: &BTreeMap<String, usize>) -> usize {
    const INF: usize = usize::MAX / 4;
    match template {
        Template::Literal(_) | Template::Slot(_) => 1,
        Template::NonTerm(nt) => *heights.get(nt).unwrap_or(&INF),
        Template::Node { items, .. } => {
            let worst = items
                .iter()
                .map(|i| template_height(i, heights))
                .max()
                .unwrap_or(1);
            worst.saturating_add(1)
        }
    }
}

/// What a parser action does, in grammar-local terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionKind {
    /// Expand the top nonterminal hole with the rule at this index in the
    /// owning grammar.
    Apply { rule: usize },
    /// Fill the top slot hole with this token.
    Gen { slot: String, token: String },
}

/// A transition action, carrying both its global registry id and its
/// grammar-local payload. Identity (equality, ordering, hashing) is by
/// global id: textually identical productions in two grammars compare
/// equal even though their local rule indices differ.
#[derive(Debug, Clone)]
pub struct Action {
    pub id: ActionId,
    pub kind: ActionKind,
}

impl PartialEq for Action {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}
impl Eq for Action {}
impl PartialOrd for Action {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Action {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.id.cmp(&other.id)
    }
}
impl std::hash::Hash for Action {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.id.hash(state);
    }
}

/// Append-only global action registry. Actions are keyed by canonical text
/// (`APPLY <rule text>` / `GEN <slot> <token>`); interning an existing key
/// returns the existing id, so ids are stable and the registry only grows.
#[derive(Debug, Clone, Default)]
pub struct ActionRegistry {
    keys: Vec<String>,
    by_key: BTreeMap<String, ActionId>,
}

impl ActionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, key: &str) -> ActionId {
        if let Some(&id) = self.by_key.get(key) {
            return id;
        }
        let id = self.keys.len();
        self.keys.push(key.to_string());
        self.by_key.insert(key.to_string(), id);
        id
    }

    pub fn lookup(&self, key: &str) -> Option<ActionId> {
        self.by_key.get(key).copied()
    }

    /// Canonical text of an action.
    pub fn key(&self, id: ActionId) -> &str {
        &self.keys[id]
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// All registered keys, in id order.
    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    /// Interns every action of `grammar` (one APPLY per production, one GEN
    /// per slot token) and returns the grammar bound to its global ids.
    pub fn bind(&mut self, grammar: Grammar) -> BoundGrammar {
        let apply_ids: Vec<ActionId> = grammar
            .rules
            .iter()
            .map(|r| self.intern(&format!("APPLY {}", r.text)))
            .collect();
        let mut gen_ids = BTreeMap::new();
        for (slot, vocab) in &grammar.slots {
            for token in vocab {
                let id = self.intern(&format!("GEN {slot} {token}"));
                gen_ids.insert((slot.clone(), token.clone()), id);
            }
        }
        let mut inventory: BTreeSet<ActionId> = apply_ids.iter().copied().collect();
        inventory.extend(gen_ids.values().copied());
        BoundGrammar { grammar, apply_ids, gen_ids, inventory }
    }
}

/// A grammar bound to the global action registry.
#[derive(Debug, Clone)]
pub struct BoundGrammar {
    pub grammar: Grammar,
    /// Global id of each production's APPLY action, indexed by rule.
    pub apply_ids: Vec<ActionId>,
    /// Global id of each `(slot, token)` GEN action.
    pub gen_ids: BTreeMap<(String, String), ActionId>,
    /// Every action this grammar can ever make applicable.
    pub inventory: BTreeSet<ActionId>,
}

impl BoundGrammar {
    pub fn apply_action(&self, rule: usize) -> Action {
        Action { id: self.apply_ids[rule], kind: ActionKind::Apply { rule } }
    }

    pub fn gen_action(&self, slot: &str, token: &str) -> Option<Action> {
        let id = *self.gen_ids.get(&(slot.to_string(), token.to_string()))?;
        Some(Action {
            id,
            kind: ActionKind::Gen { slot: slot.to_string(), token: token.to_string() },
        })
    }
}

/// A pending hole on the derivation frontier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Hole {
    NonTerm { node: usize, symbol: String },
    Slot { node: usize, slot: String },
}

#[derive(Debug, Clone)]
struct BuildNode {
    label: Option<String>,
    children: Vec<usize>,
}

/// A partial derivation: the tree under construction plus the frontier
/// stack. Expansion is depth-first and leftmost: the top of the stack is
/// always the leftmost unfinished hole.
#[derive(Debug, Clone)]
pub struct DerivState {
    nodes: Vec<BuildNode>,
    stack: Vec<Hole>,
}

impl DerivState {
    pub fn new(grammar: &Grammar) -> Self {
        let nodes = vec![BuildNode { label: None, children: Vec::new() }];
        let stack = vec![Hole::NonTerm { node: 0, symbol: grammar.start.clone() }];
        DerivState { nodes, stack }
    }

    pub fn is_complete(&self) -> bool {
        self.stack.is_empty()
    }

    /// The hole that the next action must address, if any.
    pub fn frontier(&self) -> Option<&Hole> {
        self.stack.last()
    }

    /// Number of actions taken so far is not tracked here; `step` is only
    /// used to report where an invalid action occurred.
    pub fn apply(&mut self, bound: &BoundGrammar, action: &Action, step: usize) -> Result<()> {
        let invalid = |msg: String| Error::InvalidAction { step, msg };
        let Some(hole) = self.stack.pop() else {
            return Err(invalid("derivation is already complete".to_string()));
        };
        match (&hole, &action.kind) {
            (Hole::NonTerm { node, symbol }, ActionKind::Apply { rule }) => {
                let Some(r) = bound.grammar.rules.get(*rule) else {
                    self.stack.push(hole.clone());
                    return Err(invalid(format!("rule index {rule} out of range")));
                };
                if r.lhs != *symbol {
                    self.stack.push(hole.clone());
                    return Err(invalid(format!(
                        "rule expands '{}' but frontier expects '{symbol}'",
                        r.lhs
                    )));
                }
                let mut holes = Vec::new();
                self.graft(*node, &r.template, &mut holes);
                // Push in reverse so the leftmost new hole is on top.
                for h in holes.into_iter().rev() {
                    self.stack.push(h);
                }
                Ok(())
            }
            (Hole::Slot { node, slot }, ActionKind::Gen { slot: s, token }) => {
                if s != slot {
                    self.stack.push(hole.clone());
                    return Err(invalid(format!(
                        "GEN fills slot '{s}' but frontier expects '{slot}'"
                    )));
                }
                if !bound.grammar.slot_vocab(slot).iter().any(|t| t == token) {
                    self.stack.push(hole.clone());
                    return Err(invalid(format!(
                        "token '{token}' is not in the vocabulary of slot '{slot}'"
                    )));
                }
                self.nodes[*node].label = Some(token.clone());
                Ok(())
            }
            (Hole::NonTerm { symbol, .. }, ActionKind::Gen { .. }) => {
                self.stack.push(hole.clone());
                Err(invalid(format!("GEN action at a nonterminal hole '{symbol}'")))
            }
            (Hole::Slot { slot, .. }, ActionKind::Apply { .. }) => {
                self.stack.push(hole.clone());
                Err(invalid(format!("APPLY action at a slot hole '{slot}'")))
            }
        }
    }

    /// Instantiates `template` at an existing placeholder node, collecting
    /// new holes in left-to-right order.
    fn graft(&mut self, node: usize, template: &Template, holes: &mut Vec<Hole>) {
        match template {
            Template::Literal(l) => self.nodes[node].label = Some(l.clone()),
            Template::NonTerm(nt) => {
                holes.push(Hole::NonTerm { node, symbol: nt.clone() });
            }
            Template::Slot(s) => holes.push(Hole::Slot { node, slot: s.clone() }),
            Template::Node { head, items } => {
                self.nodes[node].label = Some(head.clone());
                for item in items {
                    let child = self.nodes.len();
                    self.nodes.push(BuildNode { label: None, children: Vec::new() });
                    self.nodes[node].children.push(child);
                    self.graft(child, item, holes);
                }
            }
        }
    }

    /// Every action applicable at the current frontier, sorted by global
    /// id. Empty exactly when the derivation is complete.
    pub fn applicable(&self, bound: &BoundGrammar) -> Vec<Action> {
        let mut actions = match self.stack.last() {
            None => Vec::new(),
            Some(Hole::NonTerm { symbol, .. }) => bound
                .grammar
                .rules_of(symbol)
                .iter()
                .map(|&r| bound.apply_action(r))
                .collect(),
            Some(Hole::Slot { slot, .. }) => bound
                .grammar
                .slot_vocab(slot)
                .iter()
                .map(|tok| {
                    bound
                        .gen_action(slot, tok)
                        .expect("vocabulary tokens are interned at bind time")
                })
                .collect(),
        };
        actions.sort();
        actions
    }

    /// Finishes the derivation into a logical form. Fails with
    /// [`Error::IncompleteTree`] while holes remain.
    pub fn into_lf(self) -> Result<LogicalForm> {
        if !self.stack.is_empty() {
            return Err(Error::IncompleteTree);
        }
        Ok(LogicalForm::from_root(self.extract(0)))
    }

    fn extract(&self, node: usize) -> AstNode {
        let n = &self.nodes[node];
        AstNode {
            label: n.label.clone().expect("complete derivations label every node"),
            children: n.children.iter().map(|&c| self.extract(c)).collect(),
        }
    }
}

/// Replays an action sequence into a logical form. Fails with
/// [`Error::InvalidAction`] at the first inapplicable action and
/// [`Error::IncompleteTree`] if the sequence ends early.
pub fn actions_to_lf(actions: &[Action], bound: &BoundGrammar) -> Result<LogicalForm> {
    let mut state = DerivState::new(&bound.grammar);
    for (step, action) in actions.iter().enumerate() {
        state.apply(bound, action, step)?;
    }
    state.into_lf()
}

/// Finds the unique leftmost derivation of `lf` under the grammar.
///
/// Fails with [`Error::NotDerivable`] when no derivation exists and
/// [`Error::AmbiguousDerivation`] when more than one does.
pub fn lf_to_actions(lf: &LogicalForm, bound: &BoundGrammar) -> Result<Vec<Action>> {
    derive_symbol(bound, &bound.grammar.start, lf.root()).map_err(|e| match e {
        DeriveFail::NotDerivable => Error::NotDerivable {
            example: None,
            msg: format!("'{}' under grammar '{}'", lf.canonical_text(), bound.grammar.name),
        },
        DeriveFail::Ambiguous => Error::AmbiguousDerivation {
            msg: format!("'{}' under grammar '{}'", lf.canonical_text(), bound.grammar.name),
        },
    })
}

enum DeriveFail {
    NotDerivable,
    Ambiguous,
}

/// A matching subgoal produced by aligning a template against a subtree.
enum Goal<'a> {
    Expand(&'a str, &'a AstNode),
    Fill(&'a str, &'a str),
}

fn derive_symbol(
    bound: &BoundGrammar,
    symbol: &str,
    node: &AstNode,
) -> std::result::Result<Vec<Action>, DeriveFail> {
    let mut found: Option<Vec<Action>> = None;
    for &r in bound.grammar.rules_of(symbol) {
        let rule = &bound.grammar.rules[r];
        let mut goals = Vec::new();
        if !match_template(&bound.grammar, &rule.template, node, &mut goals) {
            continue;
        }
        let mut candidate = vec![bound.apply_action(r)];
        let mut complete = true;
        for goal in goals {
            match goal {
                Goal::Expand(nt, sub) => match derive_symbol(bound, nt, sub) {
                    Ok(actions) => candidate.extend(actions),
                    Err(DeriveFail::Ambiguous) => return Err(DeriveFail::Ambiguous),
                    Err(DeriveFail::NotDerivable) => {
                        complete = false;
                        break;
                    }
                },
                Goal::Fill(slot, token) => {
                    let action = bound
                        .gen_action(slot, token)
                        .expect("match_template checked vocabulary membership");
                    candidate.push(action);
                }
            }
        }
        if complete {
            if found.is_some() {
                return Err(DeriveFail::Ambiguous);
            }
            found = Some(candidate);
        }
    }
    found.ok_or(DeriveFail::NotDerivable)
}

/// Structural alignment of a template against a subtree. Pushes subgoals in
/// left-to-right order, matching the order in which [`DerivState::apply`]
/// exposes the corresponding holes.
fn match_template<'a>(
    grammar: &'a Grammar,
    template: &'a Template,
    node: &'a AstNode,
    goals: &mut Vec<Goal<'a>>,
) -> bool {
    match template {
        Template::Literal(l) => node.children.is_empty() && node.label == *l,
        Template::NonTerm(nt) => {
            goals.push(Goal::Expand(nt, node));
            true
        }
        Template::Slot(slot) => {
            if !node.children.is_empty() {
                return false;
            }
            if !grammar.slot_vocab(slot).iter().any(|t| *t == node.label) {
                return false;
            }
            goals.push(Goal::Fill(slot, &node.label));
            true
        }
        Template::Node { head, items } => {
            if node.label != *head || node.children.len() != items.len() {
                return false;
            }
            for (item, child) in items.iter().zip(&node.children) {
                if !match_template(grammar, item, child, goals) {
                    return false;
                }
            }
            true
        }
    }
}

/// Union of the action sequences of every logical form in `lfs`. On
/// failure the index of the offending logical form is attached.
pub fn action_set_of<'a>(
    lfs: impl IntoIterator<Item = &'a LogicalForm>,
    bound: &BoundGrammar,
) -> Result<BTreeSet<ActionId>> {
    let mut set = BTreeSet::new();
    for (i, lf) in lfs.into_iter().enumerate() {
        let actions = lf_to_actions(lf, bound).map_err(|e| match e {
            Error::NotDerivable { msg, .. } => Error::NotDerivable { example: Some(i), msg },
            other => other,
        })?;
        set.extend(actions.into_iter().map(|a| a.id));
    }
    Ok(set)
}

/// Samples a random derivable logical form. Productions whose minimum
/// finished height fits the remaining depth budget are preferred; when none
/// fit, the shallowest production is taken so sampling always terminates.
pub fn sample_lf<R: Rng>(grammar: &Grammar, rng: &mut R, max_depth: usize) -> LogicalForm {
    fn expand<R: Rng>(
        grammar: &Grammar,
        symbol: &str,
        rng: &mut R,
        budget: usize,
    ) -> AstNode {
        let rule_idx = grammar.rules_of(symbol);
        let fitting: Vec<usize> = rule_idx
            .iter()
            .copied()
            .filter(|&r| template_height(&grammar.rules[r].template, &grammar.nt_min_height) <= budget)
            .collect();
        let r = if fitting.is_empty() {
            *rule_idx
                .iter()
                .min_by_key(|&&r| template_height(&grammar.rules[r].template, &grammar.nt_min_height))
                .expect("validated grammars have productions for every nonterminal")
        } else {
            fitting[rng.random_range(0..fitting.len())]
        };
        instantiate(grammar, &grammar.rules[r].template, rng, budget)
    }

    fn instantiate<R: Rng>(
        grammar: &Grammar,
        template: &Template,
        rng: &mut R,
        budget: usize,
    ) -> AstNode {
        match template {
            Template::Literal(l) => AstNode::leaf(l.clone()),
            Template::Slot(slot) => {
                let vocab = grammar.slot_vocab(slot);
                AstNode::leaf(vocab[rng.random_range(0..vocab.len())].clone())
            }
            Template::NonTerm(nt) => expand(grammar, nt, rng, budget),
            Template::Node { head, items } => AstNode {
                label: head.clone(),
                children: items
                    .iter()
                    .map(|i| instantiate(grammar, i, rng, budget.saturating_sub(1)))
                    .collect(),
            },
        }
    }

    LogicalForm::from_root(expand(grammar, &grammar.start, rng, max_depth.max(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const COUNT_GRAMMAR: &str = "\
# a two-level grammar
start Q
slot ent : city river lake
Q -> ( count E )
E -> slot(ent)
";

    fn bound(text: &str) -> (ActionRegistry, BoundGrammar) {
        let mut reg = ActionRegistry::new();
        let g = Grammar::parse("test", text).unwrap();
        let b = reg.bind(g);
        (reg, b)
    }

    #[test]
    fn parses_grammar_and_builds_inventory() {
        let (reg, b) = bound(COUNT_GRAMMAR);
        assert_eq!(b.grammar.start, "Q");
        assert_eq!(b.grammar.rules.len(), 2);
        assert_eq!(b.grammar.rules[0].text, "Q -> ( count E )");
        assert_eq!(b.grammar.rules[1].text, "E -> slot(ent)");
        assert_eq!(b.grammar.slot_vocab("ent"), ["city", "river", "lake"]);
        // 2 APPLY + 3 GEN actions.
        assert_eq!(reg.len(), 5);
        assert_eq!(b.inventory.len(), 5);
    }

    #[test]
    fn rejects_bad_grammar_files() {
        let cases = [
            ("start Q\nQ -> ( count E )\n", "undeclared nonterminal E is a literal, fine"),
            ("slot ent : a\nQ -> slot(ent)\n", "missing start"),
            ("start Q\nslot ent :\nQ -> slot(ent)\n", "empty slot vocab"),
            ("start Q\nQ -> slot(ent)\n", "undeclared slot"),
            ("start Q\nQ -> ( f Q )\n", "no finite tree"),
            ("start Q\nQ -> ( f )\n", "empty template node"),
            ("start Q\nwat\n", "unknown line"),
        ];
        // Case 0 actually parses (E is a literal there); all others must fail.
        assert!(Grammar::parse("t", cases[0].0).is_ok());
        for (text, why) in &cases[1..] {
            assert!(Grammar::parse("t", text).is_err(), "expected failure: {why}");
        }
    }

    #[test]
    fn strips_comments_and_blank_lines() {
        let g = Grammar::parse(
            "t",
            "# header\n\nstart Q   # trailing\nslot ent : a b # vocab\nQ -> slot(ent)\n",
        )
        .unwrap();
        assert_eq!(g.slot_vocab("ent"), ["a", "b"]);
    }

    #[test]
    fn converts_lf_to_actions_and_back() {
        let (reg, b) = bound(COUNT_GRAMMAR);
        let lf = LogicalForm::parse("(count city)").unwrap();
        let actions = lf_to_actions(&lf, &b).unwrap();
        let texts: Vec<&str> = actions.iter().map(|a| reg.key(a.id)).collect();
        assert_eq!(
            texts,
            ["APPLY Q -> ( count E )", "APPLY E -> slot(ent)", "GEN ent city"]
        );
        assert_eq!(actions_to_lf(&actions, &b).unwrap(), lf);
    }

    #[test]
    fn reports_not_derivable_and_ambiguous() {
        let (_, b) = bound(COUNT_GRAMMAR);
        let bad = LogicalForm::parse("(count ocean)").unwrap();
        assert!(matches!(
            lf_to_actions(&bad, &b),
            Err(Error::NotDerivable { .. })
        ));

        let ambiguous = "\
start Q
slot ent : x
Q -> ( f A )
Q -> ( f B )
A -> slot(ent)
B -> slot(ent)
";
        let (_, b2) = bound(ambiguous);
        let lf = LogicalForm::parse("(f x)").unwrap();
        assert!(matches!(
            lf_to_actions(&lf, &b2),
            Err(Error::AmbiguousDerivation { .. })
        ));
    }

    #[test]
    fn invalid_and_incomplete_sequences_are_rejected() {
        let (_, b) = bound(COUNT_GRAMMAR);
        let lf = LogicalForm::parse("(count city)").unwrap();
        let actions = lf_to_actions(&lf, &b).unwrap();

        // Dropping the final GEN leaves a hole.
        assert!(matches!(
            actions_to_lf(&actions[..2], &b),
            Err(Error::IncompleteTree)
        ));

        // A GEN action at the start addresses a nonterminal hole.
        let gen = b.gen_action("ent", "city").unwrap();
        match actions_to_lf(&[gen], &b) {
            Err(Error::InvalidAction { step, .. }) => assert_eq!(step, 0),
            other => panic!("unexpected: {other:?}"),
        }

        // Extra actions after completion are invalid at their step index.
        let mut extended = actions.clone();
        extended.push(extended[0].clone());
        match actions_to_lf(&extended, &b) {
            Err(Error::InvalidAction { step, .. }) => assert_eq!(step, 3),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn applicable_actions_follow_the_frontier() {
        let (_, b) = bound(COUNT_GRAMMAR);
        let mut state = DerivState::new(&b.grammar);
        let at_start = state.applicable(&b);
        assert_eq!(at_start.len(), 1);
        assert!(matches!(at_start[0].kind, ActionKind::Apply { rule: 0 }));

        state.apply(&b, &at_start[0], 0).unwrap();
        let at_e = state.applicable(&b);
        assert_eq!(at_e.len(), 1);
        assert!(matches!(at_e[0].kind, ActionKind::Apply { rule: 1 }));

        state.apply(&b, &at_e[0], 1).unwrap();
        let at_slot = state.applicable(&b);
        assert_eq!(at_slot.len(), 3, "one GEN per vocabulary token");

        state.apply(&b, &at_slot[0], 2).unwrap();
        assert!(state.is_complete());
        assert!(state.applicable(&b).is_empty());
    }

    #[test]
    fn nested_templates_expand_depth_first_leftmost() {
        let text = "\
start Q
slot ent : a b
slot mod : m n
Q -> ( top ( pair slot(ent) slot(mod) ) E )
E -> slot(ent)
";
        let (_, b) = bound(text);
        let lf = LogicalForm::parse("(top (pair a m) b)").unwrap();
        let actions = lf_to_actions(&lf, &b).unwrap();
        assert_eq!(actions_to_lf(&actions, &b).unwrap(), lf);
        // APPLY Q-rule, GEN a, GEN m, APPLY E-rule, GEN b.
        assert_eq!(actions.len(), 5);
        assert!(matches!(actions[1].kind, ActionKind::Gen { ref token, .. } if token == "a"));
        assert!(matches!(actions[2].kind, ActionKind::Gen { ref token, .. } if token == "m"));
        assert!(matches!(actions[4].kind, ActionKind::Gen { ref token, .. } if token == "b"));
    }

    #[test]
    fn registry_is_append_only_and_order_invariant_as_a_set() {
        let g1 = "start Q\nslot ent : x y\nQ -> ( f E )\nE -> slot(ent)\n";
        let g2 = "start Q\nslot ent : x z\nQ -> ( f E )\nQ -> ( g E )\nE -> slot(ent)\n";

        let mut reg_a = ActionRegistry::new();
        reg_a.bind(Grammar::parse("t1", g1).unwrap());
        let before = reg_a.len();
        reg_a.bind(Grammar::parse("t2", g2).unwrap());
        assert!(reg_a.len() > before, "new actions only extend the registry");

        let mut reg_b = ActionRegistry::new();
        reg_b.bind(Grammar::parse("t2", g2).unwrap());
        reg_b.bind(Grammar::parse("t1", g1).unwrap());

        let set_a: BTreeSet<&String> = reg_a.keys().iter().collect();
        let set_b: BTreeSet<&String> = reg_b.keys().iter().collect();
        assert_eq!(set_a, set_b, "registration order changes ids, not the set");

        // Shared actions share one id within a registry.
        let (ra, rb) = (
            reg_a.lookup("APPLY Q -> ( f E )").unwrap(),
            reg_a.lookup("APPLY E -> slot(ent)").unwrap(),
        );
        assert_ne!(ra, rb);
        assert_eq!(reg_a.lookup("GEN ent x"), reg_a.lookup("GEN ent x"));
    }

    #[test]
    fn action_set_of_reports_offending_example() {
        let (_, b) = bound(COUNT_GRAMMAR);
        let good = LogicalForm::parse("(count city)").unwrap();
        let bad = LogicalForm::parse("(count ocean)").unwrap();
        let set = action_set_of([&good], &b).unwrap();
        assert_eq!(set.len(), 3);
        match action_set_of([&good, &bad], &b) {
            Err(Error::NotDerivable { example: Some(1), .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn sampled_lfs_round_trip_through_actions() {
        let text = "\
start Q
slot ent : a b c d
slot mod : m n
Q -> ( find E )
Q -> ( both E E )
E -> slot(ent)
E -> ( refine slot(ent) slot(mod) )
";
        let (_, b) = bound(text);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let lf = sample_lf(&b.grammar, &mut rng, 4);
            let actions = lf_to_actions(&lf, &b).unwrap();
            assert_eq!(actions_to_lf(&actions, &b).unwrap(), lf);
        }
    }
}
