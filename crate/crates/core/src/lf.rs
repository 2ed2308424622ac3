//! S-expression logical forms and a graph-matching similarity between them.
//!
//! A logical form is an ordered labeled tree written as an s-expression:
//! `(a (b c) d)` is a root `a` with children `b` (which has child `c`) and
//! `d`. The head of a list is always an atom and names the node; the
//! remaining elements are its children.
//!
//! Similarity between two trees is computed by decomposing each into
//! *triples* — one instance triple per node and one relation triple per
//! edge — and searching for the one-to-one node mapping that matches the
//! most triples of the source tree inside the destination tree. For trees
//! of up to [`EXACT_SEARCH_MAX_NODES`] nodes the search is exhaustive;
//! beyond that a restarted hill-climbing search is used.

use crate::error::{Error, Result};

/// Largest tree size (node count) for which the mapping search is exact.
pub const EXACT_SEARCH_MAX_NODES: usize = 8;

/// Number of hill-climbing restarts used by [`smatch_directed`] on trees
/// too large for exhaustive search.
pub const DEFAULT_RESTARTS: usize = 4;

/// One node of a logical-form tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AstNode {
    pub label: String,
    pub children: Vec<AstNode>,
}

impl AstNode {
    pub fn leaf(label: impl Into<String>) -> Self {
        AstNode { label: label.into(), children: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(AstNode::node_count).sum::<usize>()
    }
}

/// A parsed logical form together with its canonical text.
///
/// The canonical text uses single spaces between siblings and no other
/// whitespace; atom case is preserved. Two logical forms are equal exactly
/// when their canonical texts are equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LogicalForm {
    root: AstNode,
    text: String,
}

impl LogicalForm {
    /// Parses s-expression text. Fails with [`Error::MalformedLf`] on
    /// unbalanced parentheses, an empty expression, a non-atom head, a
    /// parenthesized list with no arguments, or trailing input.
    pub fn parse(text: &str) -> Result<Self> {
        parse_lf(text)
    }

    pub fn from_root(root: AstNode) -> Self {
        let text = serialize(&root);
        LogicalForm { root, text }
    }

    pub fn root(&self) -> &AstNode {
        &self.root
    }

    /// Canonical single-space rendering of the tree.
    pub fn canonical_text(&self) -> &str {
        &self.text
    }

    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }

    /// Decomposes the tree into instance and relation triples. Node ids are
    /// assigned by depth-first preorder, so the root is always id 0.
    pub fn triples(&self) -> TripleSet {
        let flat = FlatTree::build(&self.root);
        let instances = flat.labels.iter().cloned().enumerate().collect();
        // One relation per non-root node, listed in child preorder.
        let relations = (1..flat.len())
            .map(|child| {
                let (parent, ordinal) = flat.parent[child].expect("non-root nodes have parents");
                (parent, ordinal, child)
            })
            .collect();
        TripleSet { instances, relations }
    }
}

impl std::fmt::Display for LogicalForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text)
    }
}

/// Triple decomposition of a tree.
///
/// Instance triples are `(node_id, label)` pairs (the middle "instance"
/// marker is implicit). Relation triples are `(parent_id, ordinal, child_id)`
/// where `ordinal` is the child's position under its parent; the ordinal
/// acts as the relation's slot name, so the first child of any node fills
/// slot 0, the second slot 1, and so on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleSet {
    pub instances: Vec<(usize, String)>,
    pub relations: Vec<(usize, usize, usize)>,
}

impl TripleSet {
    pub fn len(&self) -> usize {
        self.instances.len() + self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Parses s-expression text into a [`LogicalForm`].
pub fn parse_lf(text: &str) -> Result<LogicalForm> {
    let tokens = tokenize(text)?;
    let mut pos = 0usize;
    let root = parse_expr(&tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(malformed(tokens[pos].pos, "trailing input after expression"));
    }
    Ok(LogicalForm::from_root(root))
}

/// Renders a tree in canonical form (single spaces, no trailing whitespace).
pub fn serialize(node: &AstNode) -> String {
    let mut out = String::new();
    write_node(node, &mut out);
    out
}

fn write_node(node: &AstNode, out: &mut String) {
    if node.children.is_empty() {
        out.push_str(&node.label);
    } else {
        out.push('(');
        out.push_str(&node.label);
        for child in &node.children {
            out.push(' ');
            write_node(child, out);
        }
        out.push(')');
    }
}

#[derive(Debug)]
struct Token {
    pos: usize,
    kind: TokenKind,
}

#[derive(Debug)]
enum TokenKind {
    Open,
    Close,
    Atom(String),
}

fn malformed(pos: usize, msg: &str) -> Error {
    Error::MalformedLf { pos, msg: msg.to_string() }
}

fn tokenize(text: &str) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0usize;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_whitespace() {
            i += 1;
        } else if c == '(' {
            tokens.push(Token { pos: i, kind: TokenKind::Open });
            i += 1;
        } else if c == ')' {
            tokens.push(Token { pos: i, kind: TokenKind::Close });
            i += 1;
        } else {
            let start = i;
            while i < bytes.len() {
                let c = bytes[i] as char;
                if c.is_whitespace() || c == '(' || c == ')' {
                    break;
                }
                i += 1;
            }
            tokens.push(Token {
                pos: start,
                kind: TokenKind::Atom(text[start..i].to_string()),
            });
        }
    }
    if tokens.is_empty() {
        return Err(malformed(text.len(), "empty expression"));
    }
    Ok(tokens)
}

fn parse_expr(tokens: &[Token], pos: &mut usize) -> Result<AstNode> {
    let Some(tok) = tokens.get(*pos) else {
        let at = tokens.last().map(|t| t.pos + 1).unwrap_or(0);
        return Err(malformed(at, "unexpected end of input"));
    };
    match &tok.kind {
        TokenKind::Atom(a) => {
            *pos += 1;
            Ok(AstNode::leaf(a.clone()))
        }
        TokenKind::Close => Err(malformed(tok.pos, "unexpected ')'")),
        TokenKind::Open => {
            let open_pos = tok.pos;
            *pos += 1;
            let head = match tokens.get(*pos) {
                Some(Token { kind: TokenKind::Atom(a), .. }) => {
                    *pos += 1;
                    a.clone()
                }
                Some(t) => return Err(malformed(t.pos, "expected atom as list head")),
                None => return Err(malformed(open_pos, "unclosed '('")),
            };
            let mut children = Vec::new();
            loop {
                match tokens.get(*pos) {
                    Some(Token { kind: TokenKind::Close, pos: cp }) => {
                        let cp = *cp;
                        *pos += 1;
                        if children.is_empty() {
                            return Err(malformed(cp, "list with a head but no arguments"));
                        }
                        return Ok(AstNode { label: head, children });
                    }
                    Some(_) => children.push(parse_expr(tokens, pos)?),
                    None => return Err(malformed(open_pos, "unclosed '('")),
                }
            }
        }
    }
}

/// Preorder-indexed view of a tree used by the mapping search.
struct FlatTree {
    labels: Vec<String>,
    children: Vec<Vec<usize>>,
    /// `parent[i] = Some((p, ordinal))` for every non-root node.
    parent: Vec<Option<(usize, usize)>>,
}

impl FlatTree {
    fn build(root: &AstNode) -> FlatTree {
        let mut flat = FlatTree { labels: Vec::new(), children: Vec::new(), parent: Vec::new() };
        flat.push(root, None);
        flat
    }

    fn push(&mut self, node: &AstNode, parent: Option<(usize, usize)>) -> usize {
        let id = self.labels.len();
        self.labels.push(node.label.clone());
        self.children.push(Vec::new());
        self.parent.push(parent);
        for (ordinal, child) in node.children.iter().enumerate() {
            let cid = self.push(child, Some((id, ordinal)));
            self.children[id].push(cid);
        }
        id
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    /// Total number of triples: one instance per node plus one relation per
    /// non-root node.
    fn triple_count(&self) -> usize {
        2 * self.len() - 1
    }
}

/// Counts source triples matched under a full candidate mapping.
///
/// An instance triple `(i, label)` matches when `i` maps to a destination
/// node with the same label. A relation triple `(p, k, c)` matches when both
/// endpoints map, both endpoint labels match, and the image of `c` is the
/// `k`-th child of the image of `p` in the destination.
fn matched_triples(src: &FlatTree, dst: &FlatTree, mapping: &[Option<usize>]) -> usize {
    let mut matched = 0usize;
    for i in 0..src.len() {
        let Some(j) = mapping[i] else { continue };
        if src.labels[i] != dst.labels[j] {
            continue;
        }
        matched += 1;
        // The parent edge of `i` is decided once both endpoints are mapped
        // and label-matched; checking it at the child side visits each edge
        // exactly once.
        if let Some((p, ordinal)) = src.parent[i] {
            if let Some(pj) = mapping[p] {
                if src.labels[p] == dst.labels[pj]
                    && dst.children[pj].get(ordinal) == Some(&j)
                {
                    matched += 1;
                }
            }
        }
    }
    matched
}

/// Exhaustive best-mapping search. Every maximal injective mapping (all of
/// the smaller side mapped) is enumerated; leaving a node unmapped can never
/// gain triples, so maximal mappings contain an optimum.
fn best_mapping_exhaustive(src: &FlatTree, dst: &FlatTree) -> usize {
    let ns = src.len();
    let nd = dst.len();
    let mut mapping: Vec<Option<usize>> = vec![None; ns];
    let mut used = vec![false; nd];
    let mut best = 0usize;
    search(src, dst, 0, &mut mapping, &mut used, 0, &mut best);
    return best;

    fn search(
        src: &FlatTree,
        dst: &FlatTree,
        i: usize,
        mapping: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        matched: usize,
        best: &mut usize,
    ) {
        let ns = src.len();
        if i == ns {
            *best = (*best).max(matched);
            return;
        }
        // Upper bound: every undecided node can contribute at most its
        // instance triple plus its parent edge.
        let remaining = (ns - i) * 2;
        if matched + remaining <= *best {
            return;
        }
        for j in 0..dst.len() {
            if used[j] {
                continue;
            }
            used[j] = true;
            mapping[i] = Some(j);
            search(src, dst, i + 1, mapping, used, matched + gain(src, dst, mapping, i), best);
            mapping[i] = None;
            used[j] = false;
        }
        // Leaving `i` unmapped is only necessary when the remaining source
        // nodes after `i` can still cover every unused destination node;
        // otherwise some destination node would go unused and the mapping
        // would not be maximal.
        let unused = used.iter().filter(|u| !**u).count();
        if ns - i - 1 >= unused {
            search(src, dst, i + 1, mapping, used, matched, best);
        }
    }

    /// Triples newly decided by assigning source node `i` (processed in
    /// preorder, so the parent of `i` is already decided).
    fn gain(src: &FlatTree, dst: &FlatTree, mapping: &[Option<usize>], i: usize) -> usize {
        let j = mapping[i].expect("node i was just assigned");
        if src.labels[i] != dst.labels[j] {
            return 0;
        }
        let mut g = 1;
        if let Some((p, ordinal)) = src.parent[i] {
            if let Some(pj) = mapping[p] {
                if src.labels[p] == dst.labels[pj]
                    && dst.children[pj].get(ordinal) == Some(&j)
                {
                    g += 1;
                }
            }
        }
        g
    }
}

/// Restarted hill-climbing over maximal injective mappings.
///
/// Restart 0 starts from a greedy label-match assignment; later restarts
/// start from seeded random assignments. Moves are (a) swapping the images
/// of two source nodes (either may be unmapped) and (b) remapping a source
/// node to an unused destination node. The best-scoring move is taken until
/// no move improves the score.
fn best_mapping_hill(src: &FlatTree, dst: &FlatTree, restarts: usize) -> usize {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let ns = src.len();
    let nd = dst.len();
    let mut best = 0usize;
    for r in 0..restarts.max(1) {
        let mut mapping: Vec<Option<usize>> = vec![None; ns];
        if r == 0 {
            // Greedy: preorder scan, first unused destination with an equal
            // label; then fill remaining nodes to keep the mapping maximal.
            let mut used = vec![false; nd];
            for i in 0..ns {
                if let Some(j) =
                    (0..nd).find(|&j| !used[j] && dst.labels[j] == src.labels[i])
                {
                    used[j] = true;
                    mapping[i] = Some(j);
                }
            }
            let mut free: Vec<usize> = (0..nd).filter(|&j| !used[j]).collect();
            for i in 0..ns {
                if mapping[i].is_none() {
                    if let Some(j) = free.first().copied() {
                        free.remove(0);
                        mapping[i] = Some(j);
                    }
                }
            }
        } else {
            // Seeded random maximal injection; independent of caller state
            // so the similarity function stays pure.
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5317_AC1D ^ (r as u64));
            let mut dst_idx: Vec<usize> = (0..nd).collect();
            dst_idx.shuffle(&mut rng);
            let mut src_idx: Vec<usize> = (0..ns).collect();
            src_idx.shuffle(&mut rng);
            for (slot, &i) in src_idx.iter().enumerate() {
                if slot < nd {
                    mapping[i] = Some(dst_idx[slot]);
                }
            }
        }

        let mut score = matched_triples(src, dst, &mapping);
        loop {
            let mut best_move: Option<(usize, usize, Option<usize>, Option<usize>)> = None;
            let mut best_gain = 0isize;
            // Swap moves.
            for a in 0..ns {
                for b in (a + 1)..ns {
                    if mapping[a].is_none() && mapping[b].is_none() {
                        continue;
                    }
                    let (ma, mb) = (mapping[a], mapping[b]);
                    let mut cand = mapping.clone();
                    cand[a] = mb;
                    cand[b] = ma;
                    let s = matched_triples(src, dst, &cand) as isize - score as isize;
                    if s > best_gain {
                        best_gain = s;
                        best_move = Some((a, b, mb, ma));
                    }
                }
            }
            // Remap-to-unused moves.
            let used: Vec<bool> = {
                let mut u = vec![false; nd];
                for m in mapping.iter().flatten() {
                    u[*m] = true;
                }
                u
            };
            for a in 0..ns {
                for (j, _) in used.iter().enumerate().filter(|(_, u)| !**u) {
                    let mut cand = mapping.clone();
                    cand[a] = Some(j);
                    let s = matched_triples(src, dst, &cand) as isize - score as isize;
                    if s > best_gain {
                        best_gain = s;
                        best_move = Some((a, a, Some(j), Some(j)));
                    }
                }
            }
            match best_move {
                Some((a, b, na, nb)) if best_gain > 0 => {
                    mapping[a] = na;
                    if b != a {
                        mapping[b] = nb;
                    }
                    score = (score as isize + best_gain) as usize;
                }
                _ => break,
            }
        }
        best = best.max(score);
    }
    best
}

/// Fraction of `src`'s triples matched in `dst` under the best one-to-one
/// node mapping found. Exact when both trees have at most
/// [`EXACT_SEARCH_MAX_NODES`] nodes, otherwise hill-climbing with
/// [`DEFAULT_RESTARTS`] restarts. Always in `[0, 1]`.
pub fn smatch_directed(src: &LogicalForm, dst: &LogicalForm) -> f64 {
    let fs = FlatTree::build(&src.root);
    let fd = FlatTree::build(&dst.root);
    if fs.len() <= EXACT_SEARCH_MAX_NODES && fd.len() <= EXACT_SEARCH_MAX_NODES {
        best_mapping_exhaustive(&fs, &fd) as f64 / fs.triple_count() as f64
    } else {
        best_mapping_hill(&fs, &fd, DEFAULT_RESTARTS) as f64 / fs.triple_count() as f64
    }
}

/// Exhaustive-search variant, exposed for verification against the
/// hill-climbing path. Cost grows factorially with tree size; intended for
/// small trees only.
pub fn smatch_directed_exhaustive(src: &LogicalForm, dst: &LogicalForm) -> f64 {
    let fs = FlatTree::build(&src.root);
    let fd = FlatTree::build(&dst.root);
    best_mapping_exhaustive(&fs, &fd) as f64 / fs.triple_count() as f64
}

/// Hill-climbing variant with a configurable restart count, exposed so it
/// can be exercised on trees small enough for exhaustive verification.
pub fn smatch_directed_hill(src: &LogicalForm, dst: &LogicalForm, restarts: usize) -> f64 {
    let fs = FlatTree::build(&src.root);
    let fd = FlatTree::build(&dst.root);
    best_mapping_hill(&fs, &fd, restarts) as f64 / fs.triple_count() as f64
}

/// Symmetric similarity: the mean of the two directed scores. Symmetric by
/// construction (`a + b` and `b + a` are the same f64 sum) and exactly 1.0
/// for identical trees within the exact-search size range.
pub fn lf_similarity(a: &LogicalForm, b: &LogicalForm) -> f64 {
    (smatch_directed(a, b) + smatch_directed(b, a)) / 2.0
}

/// Distance form of [`lf_similarity`]: `1 - similarity`, in `[0, 1]`.
pub fn lf_distance(a: &LogicalForm, b: &LogicalForm) -> f64 {
    1.0 - lf_similarity(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lf(text: &str) -> LogicalForm {
        LogicalForm::parse(text).unwrap()
    }

    #[test]
    fn parses_and_canonicalizes() {
        let form = lf("( a  ( b c )   d )");
        assert_eq!(form.canonical_text(), "(a (b c) d)");
        assert_eq!(form.node_count(), 4);
        let atom = lf("  city ");
        assert_eq!(atom.canonical_text(), "city");
        assert_eq!(atom.node_count(), 1);
    }

    #[test]
    fn round_trips_canonical_text() {
        for text in ["(a (b c) d)", "x", "(f (g h i) (j k))"] {
            let form = lf(text);
            assert_eq!(LogicalForm::parse(form.canonical_text()).unwrap(), form);
        }
    }

    #[test]
    fn rejects_malformed_input() {
        for bad in ["", "   ", "(a b", "a)", "((a) b)", "(a)", "()", "(a b) c"] {
            match LogicalForm::parse(bad) {
                Err(Error::MalformedLf { .. }) => {}
                other => panic!("expected MalformedLf for {bad:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn malformed_error_reports_position() {
        match LogicalForm::parse("(a b") {
            Err(Error::MalformedLf { pos, .. }) => assert_eq!(pos, 0),
            other => panic!("unexpected: {other:?}"),
        }
        match LogicalForm::parse("(a b) c") {
            Err(Error::MalformedLf { pos, .. }) => assert_eq!(pos, 6),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn triples_use_preorder_ids_and_child_ordinals() {
        let form = lf("(a (b c) d)");
        let t = form.triples();
        assert_eq!(
            t.instances,
            vec![
                (0, "a".to_string()),
                (1, "b".to_string()),
                (2, "c".to_string()),
                (3, "d".to_string())
            ]
        );
        assert_eq!(t.relations, vec![(0, 0, 1), (1, 0, 2), (0, 1, 3)]);
        assert_eq!(t.len(), 7);
    }

    #[test]
    fn directed_score_counts_matched_triples_under_best_mapping() {
        // (a b) vs (a c): of the three source triples only the root's
        // instance matches; the edge fails because the child labels differ.
        let ab = lf("(a b)");
        let ac = lf("(a c)");
        assert_eq!(smatch_directed(&ab, &ac), 1.0 / 3.0);
        assert_eq!(smatch_directed(&ac, &ab), 1.0 / 3.0);
        assert_eq!(lf_similarity(&ab, &ac), 1.0 / 3.0);
    }

    #[test]
    fn directed_score_is_asymmetric_for_subtrees() {
        // "x" embeds entirely inside "(a x)" (1/1), while only one of the
        // three triples of "(a x)" matches inside "x".
        let x = lf("x");
        let ax = lf("(a x)");
        assert_eq!(smatch_directed(&x, &ax), 1.0);
        assert_eq!(smatch_directed(&ax, &x), 1.0 / 3.0);
        assert_eq!(lf_similarity(&x, &ax), (1.0 + 1.0 / 3.0) / 2.0);
    }

    #[test]
    fn identical_trees_have_similarity_one() {
        for text in ["x", "(a b)", "(a (b c) d)", "(f (g h i) (j k l))"] {
            let form = lf(text);
            assert_eq!(lf_similarity(&form, &form), 1.0);
            assert_eq!(lf_distance(&form, &form), 0.0);
        }
    }

    #[test]
    fn disjoint_labels_have_similarity_zero() {
        let a = lf("(a b)");
        let z = lf("(y z)");
        assert_eq!(lf_similarity(&a, &z), 0.0);
        assert_eq!(lf_distance(&a, &z), 1.0);
    }

    #[test]
    fn hill_climbing_matches_exhaustive_on_small_examples() {
        let pairs = [
            ("(a (b c) d)", "(a (b x) d)"),
            ("(f (g h) (g h))", "(f (g h) k)"),
            ("(a b c d e)", "(a e d c b)"),
            ("(p (q r) s)", "(p s (q r))"),
        ];
        for (s, t) in pairs {
            let (s, t) = (lf(s), lf(t));
            let exact = smatch_directed_exhaustive(&s, &t);
            let hill = smatch_directed_hill(&s, &t, DEFAULT_RESTARTS);
            assert!(hill <= exact + 1e-15, "hill exceeded exhaustive on {s} vs {t}");
            assert_eq!(hill, exact, "hill missed optimum on {s} vs {t}");
        }
    }

    /// Strategy for random trees of at most eight nodes over a small label
    /// alphabet (repeated labels exercise the mapping search).
    fn small_tree() -> impl Strategy<Value = AstNode> {
        let label = prop::sample::select(vec!["a", "b", "c", "d", "e"]);
        label.prop_map(AstNode::leaf).prop_recursive(3, 8, 3, |inner| {
            (
                prop::sample::select(vec!["a", "b", "c", "f", "g"]),
                prop::collection::vec(inner, 1..3),
            )
                .prop_map(|(l, children)| AstNode { label: l.to_string(), children })
        })
    }

    proptest! {
        #[test]
        fn parse_of_serialized_tree_round_trips(root in small_tree()) {
            let form = LogicalForm::from_root(root);
            let reparsed = LogicalForm::parse(form.canonical_text()).unwrap();
            prop_assert_eq!(reparsed, form);
        }

        #[test]
        fn similarity_is_symmetric_bounded_and_reflexive(
            a in small_tree(),
            b in small_tree(),
        ) {
            let (a, b) = (LogicalForm::from_root(a), LogicalForm::from_root(b));
            prop_assume!(a.node_count() <= EXACT_SEARCH_MAX_NODES);
            prop_assume!(b.node_count() <= EXACT_SEARCH_MAX_NODES);
            let s_ab = lf_similarity(&a, &b);
            let s_ba = lf_similarity(&b, &a);
            prop_assert_eq!(s_ab.to_bits(), s_ba.to_bits());
            prop_assert!((0.0..=1.0).contains(&s_ab));
            prop_assert_eq!(lf_similarity(&a, &a), 1.0);
        }

        #[test]
        fn hill_climbing_never_exceeds_exhaustive(
            a in small_tree(),
            b in small_tree(),
        ) {
            let (a, b) = (LogicalForm::from_root(a), LogicalForm::from_root(b));
            let exact = smatch_directed_exhaustive(&a, &b);
            let hill = smatch_directed_hill(&a, &b, DEFAULT_RESTARTS);
            prop_assert!(hill <= exact + 1e-15);
        }
    }
}
