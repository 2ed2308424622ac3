//! Replay-memory selection.
//!
//! The main sampler clusters a task's training set by tree-edit similarity
//! of logical forms (K-medoids over `1 - similarity`), then fills one
//! memory slot per cluster, coordinate-ascending on the Shannon entropy of
//! the memory's action histogram so rare actions get represented. Baseline
//! samplers: uniform random, k-means over encoder features, plain
//! K-medoids medoids, and unconstrained greedy entropy.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{lf_to_actions, Action, ActionId, BoundGrammar};
use crate::lf::{lf_distance, LogicalForm};

/// Borrowed view of one training instance, as samplers need it.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'a> {
    pub utterance: &'a [String],
    pub lf: &'a LogicalForm,
    pub actions: &'a [Action],
}

/// One stored replay instance.
#[derive(Debug, Clone)]
pub struct MemoryEntry {
    pub source_task: usize,
    /// Cluster the entry represents, for samplers that cluster.
    pub cluster_id: Option<usize>,
    pub utterance: Vec<String>,
    pub lf: LogicalForm,
    pub actions: Vec<Action>,
}

/// A fixed-capacity set of replay instances.
#[derive(Debug, Clone, Default)]
pub struct Memory {
    pub entries: Vec<MemoryEntry>,
    pub capacity: usize,
}

impl Memory {
    fn from_indices(
        items: &[SampleView],
        indices: &[usize],
        clusters: Option<&[usize]>,
        source_task: usize,
        capacity: usize,
    ) -> Memory {
        let entries = indices
            .iter()
            .enumerate()
            .map(|(slot, &i)| MemoryEntry {
                source_task,
                cluster_id: clusters.map(|c| c[slot]),
                utterance: items[i].utterance.to_vec(),
                lf: items[i].lf.clone(),
                actions: items[i].actions.to_vec(),
            })
            .collect();
        Memory { entries, capacity }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Exact action frequencies over a set of action sequences, optionally
/// restricted to a support set.
#[derive(Debug, Clone)]
pub struct ActionHistogram {
    pub counts: BTreeMap<ActionId, u64>,
    pub total: u64,
}

impl ActionHistogram {
    pub fn from_sequences<'a>(
        sequences: impl IntoIterator<Item = &'a [Action]>,
        support: Option<&BTreeSet<ActionId>>,
    ) -> ActionHistogram {
        let mut counts = BTreeMap::new();
        let mut total = 0;
        for seq in sequences {
            for a in seq {
                if support.map_or(true, |s| s.contains(&a.id)) {
                    *counts.entry(a.id).or_insert(0) += 1;
                    total += 1;
                }
            }
        }
        ActionHistogram { counts, total }
    }

    pub fn probability(&self, a: ActionId) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            *self.counts.get(&a).unwrap_or(&0) as f64 / self.total as f64
        }
    }

    /// Shannon entropy in nats; zero counts contribute nothing and an
    /// empty histogram has entropy 0.
    pub fn entropy(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let n = self.total as f64;
        -self
            .counts
            .values()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.ln()
            })
            .sum::<f64>()
    }
}

/// Entropy of a memory's action histogram restricted to `support`.
pub fn memory_entropy(memory: &Memory, support: &BTreeSet<ActionId>) -> f64 {
    ActionHistogram::from_sequences(
        memory.entries.iter().map(|e| e.actions.as_slice()),
        Some(support),
    )
    .entropy()
}

/// Incrementally maintained entropy of an action multiset, using
/// `H = ln N - (1/N) sum n_i ln n_i` so sequence insertions and removals
/// are O(sequence length).
#[derive(Debug, Clone)]
struct EntropyAccumulator {
    support: BTreeSet<ActionId>,
    counts: BTreeMap<ActionId, u64>,
    total: u64,
    sum_n_ln_n: f64,
}

impl EntropyAccumulator {
    fn new(support: &BTreeSet<ActionId>) -> Self {
        EntropyAccumulator {
            support: support.clone(),
            counts: BTreeMap::new(),
            total: 0,
            sum_n_ln_n: 0.0,
        }
    }

    fn bump(&mut self, a: ActionId, delta: i64) {
        if !self.support.contains(&a) {
            return;
        }
        let slot = self.counts.entry(a).or_insert(0);
        let before = *slot as f64;
        *slot = slot.checked_add_signed(delta).expect("negative action count");
        let after = *slot as f64;
        self.total = self.total.checked_add_signed(delta).expect("negative total");
        let term = |n: f64| if n > 0.0 { n * n.ln() } else { 0.0 };
        self.sum_n_ln_n += term(after) - term(before);
    }

    fn add(&mut self, actions: &[Action]) {
        for a in actions {
            self.bump(a.id, 1);
        }
    }

    fn remove(&mut self, actions: &[Action]) {
        for a in actions {
            self.bump(a.id, -1);
        }
    }

    fn entropy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            let n = self.total as f64;
            n.ln() - self.sum_n_ln_n / n
        }
    }
}

/// Full pairwise logical-form distance matrix (symmetric, zero diagonal).
pub fn pairwise_lf_distances(lfs: &[&LogicalForm]) -> Vec<Vec<f64>> {
    let n = lfs.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let dist = lf_distance(lfs[i], lfs[j]);
            d[i][j] = dist;
            d[j][i] = dist;
        }
    }
    d
}

/// A K-medoids run: per-point cluster assignment, the medoid point of each
/// cluster, and the total point-to-medoid distance.
#[derive(Debug, Clone)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub medoids: Vec<usize>,
    pub cost: f64,
}

fn assign_to_medoids(dists: &[Vec<f64>], medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut assignment = vec![0; dists.len()];
    let mut cost = 0.0;
    for (i, row) in dists.iter().enumerate() {
        // A medoid belongs to its own cluster. Without this pin, a medoid
        // tied at distance zero with a duplicate-valued lower-index medoid
        // would migrate there and leave its cluster empty.
        if let Some(own) = medoids.iter().position(|&m| m == i) {
            assignment[i] = own;
            continue;
        }
        let mut best = 0;
        for (j, &m) in medoids.iter().enumerate().skip(1) {
            if row[m] < row[medoids[best]] {
                best = j;
            }
        }
        assignment[i] = best;
        cost += row[medoids[best]];
    }
    (assignment, cost)
}

/// K-medoids by alternating assignment and per-cluster medoid updates.
/// Initialization is the farthest-point heuristic from a seeded first
/// point; every tie anywhere resolves to the lowest index, so the result
/// is a pure function of the distance matrix and seed.
pub fn kmedoids(dists: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    let n = dists.len();
    if k > n || k == 0 {
        return Err(Error::InsufficientPoints { have: n, need: k.max(1) });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut medoids = vec![rng.random_range(0..n)];
    while medoids.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if medoids.contains(&i) {
                continue;
            }
            let score = medoids.iter().map(|&m| dists[i][m]).fold(f64::INFINITY, f64::min);
            if best.map_or(true, |(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        medoids.push(best.expect("k <= n leaves a point available").0);
    }

    let (mut assignment, mut cost) = assign_to_medoids(dists, &medoids);
    for _ in 0..100 {
        for (j, medoid) in medoids.iter_mut().enumerate() {
            let members: Vec<usize> =
                (0..n).filter(|&i| assignment[i] == j).collect();
            let mut best_point = *medoid;
            let mut best_total = members.iter().map(|&q| dists[*medoid][q]).sum::<f64>();
            for &p in &members {
                let total: f64 = members.iter().map(|&q| dists[p][q]).sum();
                if total < best_total {
                    best_point = p;
                    best_total = total;
                }
            }
            *medoid = best_point;
        }
        let (next_assignment, next_cost) = assign_to_medoids(dists, &medoids);
        if next_cost < cost {
            assignment = next_assignment;
            cost = next_cost;
        } else {
            break;
        }
    }
    Ok(Clustering { assignment, medoids, cost })
}

/// Uniform sample without replacement, in dataset order. Asking for more
/// than the dataset holds returns the whole dataset.
pub fn sample_random(items: &[SampleView], source_task: usize, m: usize, seed: u64) -> Memory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..items.len()).collect();
    indices.shuffle(&mut rng);
    indices.truncate(m);
    indices.sort_unstable();
    Memory::from_indices(items, &indices, None, source_task, m)
}

fn euclid2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// K-means over per-instance feature vectors, then the instance nearest
/// each centroid. Should two centroids claim the same instance, remaining
/// slots are backfilled with the lowest-index unused instances so the
/// memory always holds `m` distinct instances.
pub fn sample_fss(
    items: &[SampleView],
    features: &[Vec<f64>],
    source_task: usize,
    m: usize,
    seed: u64,
) -> Result<Memory> {
    let n = items.len();
    assert_eq!(n, features.len(), "one feature vector per instance");
    if m > n || m == 0 {
        return Err(Error::InsufficientPoints { have: n, need: m.max(1) });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init: Vec<usize> = (0..n).collect();
    init.shuffle(&mut rng);
    let mut centroids: Vec<Vec<f64>> = init[..m].iter().map(|&i| features[i].clone()).collect();

    let mut assignment = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut next = vec![0; n];
        for (i, f) in features.iter().enumerate() {
            let mut best = 0;
            let mut best_d = euclid2(f, &centroids[0]);
            for (j, c) in centroids.iter().enumerate().skip(1) {
                let d = euclid2(f, c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            next[i] = best;
        }
        let converged = next == assignment;
        assignment = next;
        if converged {
            break;
        }
        for (j, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == j).collect();
            if members.is_empty() {
                continue; // keep the previous centroid
            }
            for v in centroid.iter_mut() {
                *v = 0.0;
            }
            for &i in &members {
                for (v, x) in centroid.iter_mut().zip(&features[i]) {
                    *v += x;
                }
            }
            for v in centroid.iter_mut() {
                *v /= members.len() as f64;
            }
        }
    }

    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    let mut used = vec![false; n];
    let mut clusters = Vec::with_capacity(m);
    for (j, c) in centroids.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in features.iter().enumerate() {
            let d = euclid2(f, c);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("nonempty dataset");
        if !used[i] {
            used[i] = true;
            chosen.push(i);
            clusters.push(j);
        }
    }
    for i in 0..n {
        if chosen.len() == m {
            break;
        }
        if !used[i] {
            used[i] = true;
            chosen.push(i);
            clusters.push(usize::MAX);
        }
    }
    let clusters: Vec<usize> = clusters
        .iter()
        .map(|&j| if j == usize::MAX { 0 } else { j })
        .collect();
    Ok(Memory::from_indices(items, &chosen, Some(&clusters), source_task, m))
}

/// K-medoids over logical-form distance; the memory is the medoids
/// themselves.
pub fn sample_lfs(items: &[SampleView], source_task: usize, m: usize, seed: u64) -> Result<Memory> {
    let lfs: Vec<&LogicalForm> = items.iter().map(|v| v.lf).collect();
    let dists = pairwise_lf_distances(&lfs);
    let clustering = kmedoids(&dists, m, seed)?;
    let clusters: Vec<usize> = (0..m).collect();
    Ok(Memory::from_indices(items, &clustering.medoids, Some(&clusters), source_task, m))
}

/// Coordinate ascent on memory entropy under the one-entry-per-cluster
/// constraint: starting from the medoids, each cluster slot in turn is
/// replaced by its entropy-maximizing member (ties keep the incumbent,
/// then prefer the lowest index) until a full pass changes nothing.
pub fn dlfs_indices(
    items: &[SampleView],
    clustering: &Clustering,
    support: &BTreeSet<ActionId>,
    max_rounds: usize,
) -> Vec<usize> {
    let k = clustering.medoids.len();
    let members: Vec<Vec<usize>> = (0..k)
        .map(|j| {
            (0..items.len())
                .filter(|&i| clustering.assignment[i] == j)
                .collect()
        })
        .collect();
    let mut slots: Vec<usize> = clustering.medoids.clone();
    let mut acc = EntropyAccumulator::new(support);
    for &s in &slots {
        acc.add(items[s].actions);
    }

    for _ in 0..max_rounds {
        let mut changed = false;
        for j in 0..k {
            let incumbent = slots[j];
            let mut best = incumbent;
            let mut best_h = acc.entropy();
            for &candidate in &members[j] {
                if candidate == incumbent {
                    continue;
                }
                acc.remove(items[slots[j]].actions);
                acc.add(items[candidate].actions);
                let h = acc.entropy();
                // Undo the trial swap; `best` tracks the winner so far.
                acc.remove(items[candidate].actions);
                acc.add(items[slots[j]].actions);
                if h > best_h {
                    best = candidate;
                    best_h = h;
                }
            }
            if best != incumbent {
                acc.remove(items[slots[j]].actions);
                acc.add(items[best].actions);
                slots[j] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    slots
}

pub const DEFAULT_DLFS_ROUNDS: usize = 10;

/// The diversity sampler: cluster by logical-form distance, then balance
/// the memory's action distribution by per-cluster coordinate ascent.
pub fn sample_dlfs(
    items: &[SampleView],
    support: &BTreeSet<ActionId>,
    source_task: usize,
    m: usize,
    max_rounds: usize,
    seed: u64,
) -> Result<Memory> {
    let lfs: Vec<&LogicalForm> = items.iter().map(|v| v.lf).collect();
    let dists = pairwise_lf_distances(&lfs);
    let clustering = kmedoids(&dists, m, seed)?;
    let slots = dlfs_indices(items, &clustering, support, max_rounds);
    let clusters: Vec<usize> = (0..m).collect();
    Ok(Memory::from_indices(items, &slots, Some(&clusters), source_task, m))
}

/// Greedy unconstrained entropy maximization: repeatedly add the instance
/// that most increases the memory's action entropy (ties to the lowest
/// index). The seed is accepted for interface symmetry; the procedure is
/// deterministic.
pub fn sample_balance(
    items: &[SampleView],
    support: &BTreeSet<ActionId>,
    source_task: usize,
    m: usize,
    _seed: u64,
) -> Memory {
    let n = items.len();
    let target = m.min(n);
    let mut acc = EntropyAccumulator::new(support);
    let mut used = vec![false; n];
    let mut chosen = Vec::with_capacity(target);
    for _ in 0..target {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if used[i] {
                continue;
            }
            acc.add(items[i].actions);
            let h = acc.entropy();
            acc.remove(items[i].actions);
            if best.map_or(true, |(_, bh)| h > bh) {
                best = Some((i, h));
            }
        }
        let (i, _) = best.expect("target <= n");
        used[i] = true;
        acc.add(items[i].actions);
        chosen.push(i);
    }
    Memory::from_indices(items, &chosen, None, source_task, m)
}

/// Training sets with more distinct actions than this use a sampled
/// action subset as the entropy support.
pub const ACTION_SUBSET_THRESHOLD: usize = 300;

/// Weighted sample of `h` distinct actions without replacement, weights
/// proportional to histogram counts. Zero-count actions are never chosen;
/// if `h` covers every represented action, all of them are returned.
pub fn sample_action_subset(hist: &ActionHistogram, h: usize, seed: u64) -> BTreeSet<ActionId> {
    let mut remaining: Vec<(ActionId, u64)> = hist
        .counts
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(&a, &c)| (a, c))
        .collect();
    if h >= remaining.len() {
        return remaining.into_iter().map(|(a, _)| a).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = BTreeSet::new();
    for _ in 0..h {
        let total: u64 = remaining.iter().map(|(_, c)| c).sum();
        let mut x = rng.random_range(0..total);
        let mut idx = remaining.len() - 1;
        for (i, (_, c)) in remaining.iter().enumerate() {
            if x < *c {
                idx = i;
                break;
            }
            x -= c;
        }
        picked.insert(remaining.remove(idx).0);
    }
    picked
}

#[derive(Serialize, Deserialize)]
struct MemoryRecord {
    source_task: usize,
    cluster: Option<usize>,
    utterance: String,
    lf: String,
}

/// Writes a memory as JSONL, one entry per line.
pub fn save_memory(memory: &Memory, path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in &memory.entries {
        let rec = MemoryRecord {
            source_task: e.source_task,
            cluster: e.cluster_id,
            utterance: e.utterance.join(" "),
            lf: e.lf.canonical_text().to_string(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reloads a memory, rebuilding each entry's action sequence under its
/// source task's grammar.
pub fn load_memory(path: &Path, grammars: &[BoundGrammar]) -> Result<Memory> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MemoryRecord = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        let bound = grammars.get(rec.source_task).ok_or_else(|| Error::MalformedRecord {
            line: idx + 1,
            msg: format!("unknown source task {}", rec.source_task),
        })?;
        let lf = LogicalForm::parse(&rec.lf)?;
        let actions = lf_to_actions(&lf, bound)?;
        entries.push(MemoryEntry {
            source_task: rec.source_task,
            cluster_id: rec.cluster,
            utterance: rec.utterance.split_whitespace().map(String::from).collect(),
            lf,
            actions,
        });
    }
    let capacity = entries.len();
    Ok(Memory { entries, capacity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{ActionRegistry, Grammar};

    const GRAMMAR: &str = "\
start Q
slot ent : alpha beta gamma delta
slot mod : big small rare
Q -> ( count E )
Q -> ( list E )
Q -> ( sum E )
E -> slot(ent)
E -> ( refine slot(ent) slot(mod) )
";

    struct Fixture {
        bound: BoundGrammar,
        data: Vec<(Vec<String>, LogicalForm, Vec<Action>)>,
    }

    impl Fixture {
        fn generate(n: usize, seed: u64) -> Fixture {
            let mut registry = ActionRegistry::new();
            let bound = registry.bind(Grammar::parse("toy", GRAMMAR).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..n)
                .map(|i| {
                    let lf = crate::grammar::sample_lf(&bound.grammar, &mut rng, 4);
                    let actions = lf_to_actions(&lf, &bound).unwrap();
                    (vec![format!("u{i}")], lf, actions)
                })
                .collect();
            Fixture { bound, data }
        }

        fn from_lf_texts(texts: &[&str]) -> Fixture {
            let mut registry = ActionRegistry::new();
            let bound = registry.bind(Grammar::parse("toy", GRAMMAR).unwrap());
            let data = texts
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let lf = LogicalForm::parse(t).unwrap();
                    let actions = lf_to_actions(&lf, &bound).unwrap();
                    (vec![format!("u{i}")], lf, actions)
                })
                .collect();
            Fixture { bound, data }
        }

        fn views(&self) -> Vec<SampleView<'_>> {
            self.data
                .iter()
                .map(|(u, lf, a)| SampleView { utterance: u, lf, actions: a })
                .collect()
        }

        fn support(&self) -> BTreeSet<ActionId> {
            self.bound.inventory.clone()
        }
    }

    fn entry_lfs(memory: &Memory) -> Vec<String> {
        memory.entries.iter().map(|e| e.lf.canonical_text().to_string()).collect()
    }

    /// Dataset index of each entry, recovered through the per-instance
    /// utterance tag the fixtures assign.
    fn entry_indices(memory: &Memory) -> Vec<usize> {
        memory
            .entries
            .iter()
            .map(|e| e.utterance[0].strip_prefix('u').unwrap().parse().unwrap())
            .collect()
    }

    #[test]
    fn entropy_of_uniform_histogram_is_log_m() {
        let fx = Fixture::from_lf_texts(&["(count alpha)"]);
        let gen_ids: Vec<ActionId> = ["alpha", "beta", "gamma"]
            .iter()
            .map(|t| fx.bound.gen_action("ent", t).unwrap().id)
            .collect();
        let support: BTreeSet<ActionId> = gen_ids.iter().copied().collect();
        let seqs: Vec<Vec<Action>> = ["alpha", "beta", "gamma"]
            .iter()
            .map(|t| vec![fx.bound.gen_action("ent", t).unwrap()])
            .collect();
        let hist = ActionHistogram::from_sequences(
            seqs.iter().map(|s| s.as_slice()),
            Some(&support),
        );
        assert!((hist.entropy() - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_a_single_repeated_action_is_zero() {
        let fx = Fixture::from_lf_texts(&["(count alpha)"]);
        let a = fx.bound.gen_action("ent", "alpha").unwrap();
        let seq = vec![a.clone(), a.clone(), a];
        let hist = ActionHistogram::from_sequences([seq.as_slice()], None);
        assert_eq!(hist.entropy(), 0.0);
    }

    #[test]
    fn entropy_of_two_two_four_counts_matches_hand_arithmetic() {
        let fx = Fixture::from_lf_texts(&["(count alpha)"]);
        let mk = |t: &str, n: usize| -> Vec<Action> {
            (0..n).map(|_| fx.bound.gen_action("ent", t).unwrap()).collect()
        };
        let seqs = [mk("alpha", 2), mk("beta", 2), mk("gamma", 4)];
        let hist = ActionHistogram::from_sequences(seqs.iter().map(|s| s.as_slice()), None);
        let expected = -(0.25f64 * 0.25f64.ln() + 0.25 * 0.25f64.ln() + 0.5 * 0.5f64.ln());
        assert!((hist.entropy() - expected).abs() < 1e-12);
        assert!((hist.entropy() - 1.039_720_770_839_917_9).abs() < 1e-12);
    }

    #[test]
    fn incremental_entropy_matches_recomputation_through_many_swaps() {
        let fx = Fixture::generate(40, 5);
        let views = fx.views();
        let support = fx.support();
        let mut acc = EntropyAccumulator::new(&support);
        let mut in_set: Vec<usize> = (0..8).collect();
        for &i in &in_set {
            acc.add(views[i].actions);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let slot = rng.random_range(0..in_set.len());
            let replacement = rng.random_range(0..views.len());
            acc.remove(views[in_set[slot]].actions);
            acc.add(views[replacement].actions);
            in_set[slot] = replacement;

            let scratch = ActionHistogram::from_sequences(
                in_set.iter().map(|&i| views[i].actions),
                Some(&support),
            )
            .entropy();
            assert!((acc.entropy() - scratch).abs() < 1e-12);
        }
    }

    #[test]
    fn kmedoids_with_k_equal_n_puts_every_point_on_its_own_medoid() {
        let fx = Fixture::from_lf_texts(&[
            "(count alpha)",
            "(list beta)",
            "(sum gamma)",
            "(count (refine delta big))",
        ]);
        let lfs: Vec<&LogicalForm> = fx.data.iter().map(|(_, lf, _)| lf).collect();
        let dists = pairwise_lf_distances(&lfs);
        let c = kmedoids(&dists, 4, 0).unwrap();
        assert_eq!(c.cost, 0.0);
        let mut medoids = c.medoids.clone();
        medoids.sort_unstable();
        assert_eq!(medoids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn kmedoids_separates_two_groups_of_identical_lfs() {
        let fx = Fixture::from_lf_texts(&[
            "(count alpha)",
            "(list (refine beta small))",
            "(count alpha)",
            "(list (refine beta small))",
            "(count alpha)",
        ]);
        let lfs: Vec<&LogicalForm> = fx.data.iter().map(|(_, lf, _)| lf).collect();
        let dists = pairwise_lf_distances(&lfs);
        let c = kmedoids(&dists, 2, 3).unwrap();
        assert_eq!(c.cost, 0.0);
        let group_a: BTreeSet<usize> = [0, 2, 4].into_iter().collect();
        let cluster_of_a = c.assignment[0];
        for i in 0..5 {
            if group_a.contains(&i) {
                assert_eq!(c.assignment[i], cluster_of_a);
            } else {
                assert_ne!(c.assignment[i], cluster_of_a);
            }
        }
    }

    /// Exhaustive K-medoids oracle: best assignment over all medoid
    /// combinations of size k.
    fn exhaustive_kmedoids_cost(dists: &[Vec<f64>], k: usize) -> f64 {
        fn combos(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for i in start..n {
                cur.push(i);
                combos(n, k, i + 1, cur, out);
                cur.pop();
            }
        }
        let mut all = Vec::new();
        combos(dists.len(), k, 0, &mut Vec::new(), &mut all);
        all.iter()
            .map(|medoids| assign_to_medoids(dists, medoids).1)
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn kmedoids_on_twelve_points_matches_the_exhaustive_optimum() {
        let fx = Fixture::generate(12, 21);
        let lfs: Vec<&LogicalForm> = fx.data.iter().map(|(_, lf, _)| lf).collect();
        let dists = pairwise_lf_distances(&lfs);
        let opt = exhaustive_kmedoids_cost(&dists, 3);

        // Mean cost of random medoid triples, the baseline the local
        // search must beat.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut random_costs = Vec::new();
        for _ in 0..50 {
            let mut idx: Vec<usize> = (0..12).collect();
            idx.shuffle(&mut rng);
            random_costs.push(assign_to_medoids(&dists, &idx[..3]).1);
        }
        let mean_random: f64 = random_costs.iter().sum::<f64>() / random_costs.len() as f64;

        for seed in 0..6 {
            let c = kmedoids(&dists, 3, seed).unwrap();

            // Assignment must be nearest-medoid consistent.
            for (i, row) in dists.iter().enumerate() {
                let assigned = row[c.medoids[c.assignment[i]]];
                for &m in &c.medoids {
                    assert!(assigned <= row[m] + 1e-15);
                }
            }

            // The local search can never beat the exhaustive oracle...
            assert!(c.cost >= opt - 1e-12, "beat the oracle: {} < {opt}", c.cost);
            // ...and lands at most 25% above it here, well under the
            // random baseline.
            assert!(c.cost <= opt * 1.25 + 1e-12, "too far from optimum: {} vs {opt}", c.cost);
            assert!(c.cost <= mean_random, "worse than random medoids: {} vs {mean_random}", c.cost);
        }
    }

    #[test]
    fn kmedoids_with_duplicates_never_leaves_a_cluster_empty() {
        // More clusters than distinct LF values: duplicate-valued medoids
        // are forced, and each must still anchor its own cluster.
        let fx = Fixture::from_lf_texts(&[
            "(count alpha)",
            "(count alpha)",
            "(count alpha)",
            "(list beta)",
            "(list beta)",
        ]);
        let views = fx.views();
        let lfs: Vec<&LogicalForm> = fx.data.iter().map(|(_, lf, _)| lf).collect();
        let dists = pairwise_lf_distances(&lfs);
        let c = kmedoids(&dists, 4, 0).unwrap();
        let mut sizes = vec![0usize; 4];
        for &a in &c.assignment {
            sizes[a] += 1;
        }
        assert!(sizes.iter().all(|&s| s > 0), "empty cluster: {sizes:?}");
        for (j, &m) in c.medoids.iter().enumerate() {
            assert_eq!(c.assignment[m], j, "medoid {m} must live in its own cluster");
        }
        let support = fx.support();
        let slots = dlfs_indices(&views, &c, &support, DEFAULT_DLFS_ROUNDS);
        let distinct: BTreeSet<usize> = slots.iter().copied().collect();
        assert_eq!(distinct.len(), 4, "selected rows must be distinct: {slots:?}");
    }

    #[test]
    fn kmedoids_rejects_more_clusters_than_points() {
        let fx = Fixture::from_lf_texts(&["(count alpha)", "(list beta)"]);
        let lfs: Vec<&LogicalForm> = fx.data.iter().map(|(_, lf, _)| lf).collect();
        let dists = pairwise_lf_distances(&lfs);
        let err = kmedoids(&dists, 3, 0).unwrap_err();
        assert!(matches!(err, Error::InsufficientPoints { have: 2, need: 3 }));
    }

    #[test]
    fn random_sampler_is_deterministic_and_caps_at_dataset_size() {
        let fx = Fixture::generate(10, 2);
        let views = fx.views();
        let a = sample_random(&views, 0, 4, 7);
        let b = sample_random(&views, 0, 4, 7);
        assert_eq!(entry_indices(&a), entry_indices(&b));
        assert_eq!(a.len(), 4);
        let distinct: BTreeSet<usize> = entry_indices(&a).into_iter().collect();
        assert_eq!(distinct.len(), 4, "sampling is without replacement");
        let all = sample_random(&views, 0, 99, 7);
        assert_eq!(entry_indices(&all), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn fss_selects_nearest_to_centroid_instances() {
        let fx = Fixture::generate(9, 4);
        let views = fx.views();
        // Three obvious groups in feature space.
        let features: Vec<Vec<f64>> = (0..9)
            .map(|i| vec![(i / 3) as f64 * 10.0, ((i % 3) as f64) * 0.1])
            .collect();
        let mem = sample_fss(&views, &features, 0, 3, 0).unwrap();
        assert_eq!(mem.len(), 3);
        let mut chosen_groups: Vec<usize> =
            entry_indices(&mem).into_iter().map(|i| i / 3).collect();
        chosen_groups.sort_unstable();
        chosen_groups.dedup();
        assert_eq!(chosen_groups.len(), 3, "one pick per feature group");
    }

    #[test]
    fn fss_with_identical_features_still_returns_distinct_instances() {
        let fx = Fixture::generate(6, 11);
        let views = fx.views();
        let features = vec![vec![1.0, 2.0]; 6];
        let mem = sample_fss(&views, &features, 0, 4, 5).unwrap();
        assert_eq!(mem.len(), 4);
        let distinct: BTreeSet<usize> = entry_indices(&mem).into_iter().collect();
        assert_eq!(distinct.len(), 4, "collapsed features must still yield distinct rows");
    }

    #[test]
    fn fss_covers_the_whole_dataset_when_m_equals_n() {
        let fx = Fixture::generate(5, 12);
        let views = fx.views();
        let features: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let mem = sample_fss(&views, &features, 0, 5, 1).unwrap();
        assert_eq!(mem.len(), 5);
    }

    #[test]
    fn dlfs_respects_the_one_entry_per_cluster_constraint() {
        let fx = Fixture::generate(30, 6);
        let views = fx.views();
        let support = fx.support();
        let mem = sample_dlfs(&views, &support, 2, 5, DEFAULT_DLFS_ROUNDS, 3).unwrap();
        assert_eq!(mem.len(), 5);
        let clusters: BTreeSet<usize> =
            mem.entries.iter().map(|e| e.cluster_id.unwrap()).collect();
        assert_eq!(clusters.len(), 5, "cluster ids must be pairwise distinct");
        for e in &mem.entries {
            assert_eq!(e.source_task, 2);
        }
    }

    #[test]
    fn dlfs_entropy_dominates_the_medoid_initialization() {
        for seed in 0..10 {
            let fx = Fixture::generate(24, 100 + seed);
            let views = fx.views();
            let support = fx.support();
            let lfs_mem = sample_lfs(&views, 0, 4, seed).unwrap();
            let dlfs_mem = sample_dlfs(&views, &support, 0, 4, DEFAULT_DLFS_ROUNDS, seed).unwrap();
            let h_lfs = memory_entropy(&lfs_mem, &support);
            let h_dlfs = memory_entropy(&dlfs_mem, &support);
            assert!(
                h_dlfs >= h_lfs - 1e-12,
                "seed {seed}: coordinate ascent lost entropy ({h_dlfs} < {h_lfs})"
            );
        }
    }

    /// Brute-force oracle: the best one-per-cluster selection by entropy.
    fn exhaustive_dlfs_entropy(
        views: &[SampleView],
        clustering: &Clustering,
        support: &BTreeSet<ActionId>,
    ) -> f64 {
        let k = clustering.medoids.len();
        let members: Vec<Vec<usize>> = (0..k)
            .map(|j| {
                (0..views.len())
                    .filter(|&i| clustering.assignment[i] == j)
                    .collect()
            })
            .collect();
        fn rec(
            members: &[Vec<usize>],
            views: &[SampleView],
            support: &BTreeSet<ActionId>,
            j: usize,
            picked: &mut Vec<usize>,
            best: &mut f64,
        ) {
            if j == members.len() {
                let h = ActionHistogram::from_sequences(
                    picked.iter().map(|&i| views[i].actions),
                    Some(support),
                )
                .entropy();
                if h > *best {
                    *best = h;
                }
                return;
            }
            for &i in &members[j] {
                picked.push(i);
                rec(members, views, support, j + 1, picked, best);
                picked.pop();
            }
        }
        let mut best = f64::NEG_INFINITY;
        rec(&members, views, support, 0, &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn dlfs_never_exceeds_and_usually_matches_the_brute_force_optimum() {
        // Random trials kept inside the brute-force-friendly envelope
        // (at most 5 instances per cluster, at most 8 clusters).
        let mut meta = ChaCha8Rng::seed_from_u64(42);
        let mut hits = 0;
        let mut done = 0;
        while done < 100 {
            let k = meta.random_range(2..=8usize);
            let n = meta.random_range(k..=(5 * k).min(24));
            let seed = meta.random_range(0..1_000_000u64);
            let fx = Fixture::generate(n, seed);
            let views = fx.views();
            let support = fx.support();
            let lfs: Vec<&LogicalForm> = views.iter().map(|v| v.lf).collect();
            let dists = pairwise_lf_distances(&lfs);
            let clustering = kmedoids(&dists, k, seed).unwrap();
            let mut sizes = vec![0usize; k];
            for &a in &clustering.assignment {
                sizes[a] += 1;
            }
            if sizes.iter().any(|&s| s > 5) {
                continue;
            }
            let slots = dlfs_indices(&views, &clustering, &support, DEFAULT_DLFS_ROUNDS);
            let h = ActionHistogram::from_sequences(
                slots.iter().map(|&i| views[i].actions),
                Some(&support),
            )
            .entropy();
            let opt = exhaustive_dlfs_entropy(&views, &clustering, &support);
            assert!(
                h <= opt + 1e-12,
                "trial {done}: ascent beat brute force ({h} > {opt})"
            );
            if h >= opt - 1e-12 {
                hits += 1;
            }
            done += 1;
        }
        assert!(hits >= 90, "optimum hit rate too low: {hits}/100");
    }

    #[test]
    fn dlfs_differs_from_lfs_when_an_entropy_swap_exists() {
        // One cluster of near-identical common LFs whose medoid repeats the
        // dominant actions, plus a rare-action variant in the same cluster:
        // the ascent should swap the rare variant in.
        let fx = Fixture::from_lf_texts(&[
            "(count alpha)",
            "(count alpha)",
            "(count alpha)",
            "(count (refine alpha rare))",
            "(list beta)",
            "(list beta)",
        ]);
        let views = fx.views();
        let support = fx.support();
        let lfs_mem = sample_lfs(&views, 0, 2, 1).unwrap();
        let dlfs_mem = sample_dlfs(&views, &support, 0, 2, DEFAULT_DLFS_ROUNDS, 1).unwrap();
        let h_lfs = memory_entropy(&lfs_mem, &support);
        let h_dlfs = memory_entropy(&dlfs_mem, &support);
        assert!(h_dlfs > h_lfs + 1e-9, "expected a strict improvement: {h_dlfs} vs {h_lfs}");
        assert_ne!(entry_lfs(&lfs_mem), entry_lfs(&dlfs_mem));
        assert!(entry_lfs(&dlfs_mem).contains(&"(count (refine alpha rare))".to_string()));
    }

    #[test]
    fn identical_action_multisets_keep_the_medoids() {
        let fx = Fixture::from_lf_texts(&[
            "(count alpha)",
            "(count alpha)",
            "(list beta)",
            "(list beta)",
        ]);
        let views = fx.views();
        // Support restricted to structural actions shared by every
        // instance makes the objective constant across selections.
        let apply_e: BTreeSet<ActionId> = fx
            .bound
            .inventory
            .iter()
            .copied()
            .filter(|&a| fx.bound.apply_ids.contains(&a))
            .collect();
        let lfs: Vec<&LogicalForm> = views.iter().map(|v| v.lf).collect();
        let dists = pairwise_lf_distances(&lfs);
        let clustering = kmedoids(&dists, 2, 0).unwrap();
        let slots = dlfs_indices(&views, &clustering, &apply_e, DEFAULT_DLFS_ROUNDS);
        assert_eq!(slots, clustering.medoids, "constant objective must keep incumbents");
    }

    #[test]
    fn balance_picks_the_highest_entropy_instance_first() {
        let fx = Fixture::from_lf_texts(&[
            "(count alpha)",
            "(count (refine beta big))",
            "(count alpha)",
        ]);
        let views = fx.views();
        let support = fx.support();
        let mem = sample_balance(&views, &support, 0, 1, 0);
        assert_eq!(mem.len(), 1);
        // The refine example has more distinct actions, hence higher
        // own-histogram entropy.
        assert_eq!(mem.entries[0].lf.canonical_text(), "(count (refine beta big))");
        let capped = sample_balance(&views, &support, 0, 50, 0);
        assert_eq!(capped.len(), 3);
    }

    #[test]
    fn action_subset_returns_everything_when_h_is_large() {
        let fx = Fixture::generate(10, 3);
        let views = fx.views();
        let hist = ActionHistogram::from_sequences(views.iter().map(|v| v.actions), None);
        let all = sample_action_subset(&hist, 1000, 0);
        let nonzero: BTreeSet<ActionId> = hist
            .counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .map(|(&a, _)| a)
            .collect();
        assert_eq!(all, nonzero);
    }

    #[test]
    fn action_subset_never_contains_zero_count_actions() {
        let fx = Fixture::from_lf_texts(&["(count alpha)", "(count alpha)"]);
        let views = fx.views();
        let support = fx.support();
        let hist = ActionHistogram::from_sequences(views.iter().map(|v| v.actions), Some(&support));
        for seed in 0..50 {
            let subset = sample_action_subset(&hist, 2, seed);
            for a in &subset {
                assert!(*hist.counts.get(a).unwrap_or(&0) > 0);
            }
        }
    }

    #[test]
    fn action_subset_frequencies_follow_the_weights() {
        // Two actions with counts 3:1; h=1 must pick the first about 75%
        // of the time across many seeds.
        let fx = Fixture::from_lf_texts(&["(count alpha)"]);
        let a = fx.bound.gen_action("ent", "alpha").unwrap();
        let b = fx.bound.gen_action("ent", "beta").unwrap();
        let seq_a = vec![a.clone(), a.clone(), a.clone()];
        let seq_b = vec![b];
        let hist = ActionHistogram::from_sequences(
            [seq_a.as_slice(), seq_b.as_slice()].into_iter(),
            None,
        );
        let a_id = seq_a[0].id;
        let mut picked_a = 0;
        let trials = 10_000;
        for seed in 0..trials {
            let subset = sample_action_subset(&hist, 1, seed);
            assert_eq!(subset.len(), 1);
            if subset.contains(&a_id) {
                picked_a += 1;
            }
        }
        let freq = picked_a as f64 / trials as f64;
        assert!((freq - 0.75).abs() < 0.02, "empirical frequency {freq}");
    }

    #[test]
    fn memory_round_trips_through_jsonl() {
        let fx = Fixture::generate(12, 8);
        let views = fx.views();
        let support = fx.support();
        let mem = sample_dlfs(&views, &support, 0, 4, DEFAULT_DLFS_ROUNDS, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memory.jsonl");
        save_memory(&mem, &path).unwrap();
        let grammars = vec![fx.bound.clone()];
        let loaded = load_memory(&path, &grammars).unwrap();
        assert_eq!(loaded.len(), mem.len());
        for (a, b) in mem.entries.iter().zip(&loaded.entries) {
            assert_eq!(a.source_task, b.source_task);
            assert_eq!(a.cluster_id, b.cluster_id);
            assert_eq!(a.utterance, b.utterance);
            assert_eq!(a.lf.canonical_text(), b.lf.canonical_text());
            assert_eq!(a.actions, b.actions);
        }
    }
}
