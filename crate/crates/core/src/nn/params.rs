//! Parameter storage, gradient buffers, trainability masks, and the Adam
//! optimizer.
//!
//! Every scalar parameter lives in exactly one named tensor, and every
//! tensor carries exactly one [`Partition`] tag: either globally shared or
//! owned by one task. Tensors are initialized from a generator seeded by
//! the tensor *name* mixed with the model seed, so a tensor's initial value
//! does not depend on the order in which tensors were created.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Ownership tag for a tensor: shared across all tasks, or specific to one
/// task (identified by its 0-based position in the training stream).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    Global,
    Task(usize),
}

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named `rows x cols` tensor (vectors use `cols == 1`), stored row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub partition: Partition,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// How a tensor is filled at creation time.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Uniform in `(-a, a)`.
    Uniform(f64),
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
}

/// Stable 64-bit seed for a named tensor under a master seed.
pub fn name_seed(master: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the master seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ master.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// All parameters of a model.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    #[serde(skip)]
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds the name index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.by_name = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
    }

    pub fn add(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        partition: Partition,
        init: Init,
        master_seed: u64,
    ) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate tensor name '{name}'"
        );
        let mut data = vec![0.0; rows * cols];
        match init {
            Init::Zeros => {}
            Init::Uniform(a) => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(master_seed, name));
                for v in &mut data {
                    *v = rng.random_range(-a..a);
                }
            }
            Init::Xavier => {
                let a = (6.0 / (rows as f64 + cols as f64)).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(master_seed, name));
                for v in &mut data {
                    *v = rng.random_range(-a..a);
                }
            }
        }
        let id = ParamId(self.tensors.len());
        self.tensors.push(Tensor {
            name: name.to_string(),
            rows,
            cols,
            data,
            partition,
        });
        self.by_name.insert(name.to_string(), id.0);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies every tensor's data, aligned with tensor ids.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.data.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        assert_eq!(snapshot.len(), self.tensors.len());
        for (t, s) in self.tensors.iter_mut().zip(snapshot) {
            t.data.copy_from_slice(s);
        }
    }
}

/// Per-tensor gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradStore {
    pub slots: Vec<Vec<f64>>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradStore {
            slots: store.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn slot(&self, id: ParamId) -> &[f64] {
        &self.slots[id.0]
    }

    pub fn slot_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.slots[id.0]
    }

    /// Zeroes every slot not allowed by the mask, so masked-out parameters
    /// see an exactly-zero gradient.
    pub fn apply_mask(&mut self, mask: &TrainMask) {
        for (i, slot) in self.slots.iter_mut().enumerate() {
            if !mask.allow[i] {
                slot.fill(0.0);
            }
        }
    }
}

/// Per-tensor trainability mask.
#[derive(Debug, Clone)]
pub struct TrainMask {
    pub allow: Vec<bool>,
}

impl TrainMask {
    pub fn all(store: &ParamStore) -> Self {
        TrainMask { allow: vec![true; store.len()] }
    }

    pub fn none(store: &ParamStore) -> Self {
        TrainMask { allow: vec![false; store.len()] }
    }

    /// Allows every tensor whose partition satisfies the predicate.
    pub fn allowing(store: &ParamStore, pred: impl Fn(Partition) -> bool) -> Self {
        TrainMask {
            allow: store.tensors().iter().map(|t| pred(t.partition)).collect(),
        }
    }

    pub fn allow_id(&mut self, id: ParamId) {
        self.allow[id.0] = true;
    }

    pub fn allows(&self, id: ParamId) -> bool {
        self.allow[id.0]
    }

    pub fn is_empty(&self) -> bool {
        self.allow.iter().all(|a| !a)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment estimates with a per-coordinate step counter.
///
/// Coordinates whose gradient is exactly zero are skipped entirely: their
/// moments, step counters, and values stay bitwise unchanged. Masked-out
/// parameters therefore never move, because [`GradStore::apply_mask`]
/// zeroes their gradients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: Vec<Vec<u64>>,
}

impl AdamState {
    pub fn zeros_like(store: &ParamStore) -> Self {
        AdamState {
            m: store.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: store.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            t: store.tensors().iter().map(|t| vec![0; t.len()]).collect(),
        }
    }
}

/// One Adam update over every coordinate with a nonzero gradient.
pub fn adam_step(store: &mut ParamStore, grads: &GradStore, state: &mut AdamState, lr: f64) {
    for (ti, tensor) in store.tensors.iter_mut().enumerate() {
        let g = &grads.slots[ti];
        let m = &mut state.m[ti];
        let v = &mut state.v[ti];
        let t = &mut state.t[ti];
        for j in 0..tensor.data.len() {
            let gj = g[j];
            if gj == 0.0 {
                continue;
            }
            t[j] += 1;
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
            let m_hat = m[j] / (1.0 - ADAM_BETA1.powi(t[j] as i32));
            let v_hat = v[j] / (1.0 - ADAM_BETA2.powi(t[j] as i32));
            tensor.data[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(names: &[&str]) -> ParamStore {
        let mut s = ParamStore::new();
        for n in names {
            s.add(n, 2, 3, Partition::Global, Init::Uniform(0.1), 7);
        }
        s
    }

    #[test]
    fn init_depends_on_name_and_seed_not_creation_order() {
        let mut a = ParamStore::new();
        a.add("x", 2, 2, Partition::Global, Init::Uniform(0.1), 7);
        a.add("y", 2, 2, Partition::Global, Init::Uniform(0.1), 7);
        let mut b = ParamStore::new();
        b.add("y", 2, 2, Partition::Global, Init::Uniform(0.1), 7);
        b.add("x", 2, 2, Partition::Global, Init::Uniform(0.1), 7);
        assert_eq!(a.tensor(a.id("x").unwrap()).data, b.tensor(b.id("x").unwrap()).data);
        assert_eq!(a.tensor(a.id("y").unwrap()).data, b.tensor(b.id("y").unwrap()).data);
        assert_ne!(a.tensor(ParamId(0)).data, a.tensor(ParamId(1)).data);

        let mut c = ParamStore::new();
        c.add("x", 2, 2, Partition::Global, Init::Uniform(0.1), 8);
        assert_ne!(a.tensor(a.id("x").unwrap()).data, c.tensor(c.id("x").unwrap()).data);
    }

    #[test]
    fn zero_gradient_leaves_parameters_bitwise_unchanged() {
        let mut s = store_with(&["w"]);
        let before = s.snapshot();
        let grads = GradStore::zeros_like(&s);
        let mut adam = AdamState::zeros_like(&s);
        for _ in 0..5 {
            adam_step(&mut s, &grads, &mut adam, 0.1);
        }
        assert_eq!(s.snapshot(), before);
        assert!(adam.t[0].iter().all(|&t| t == 0));
    }

    #[test]
    fn constant_gradient_converges_to_sign_steps() {
        let mut s = ParamStore::new();
        let id = s.add("w", 1, 2, Partition::Global, Init::Zeros, 0);
        let mut grads = GradStore::zeros_like(&s);
        grads.slot_mut(id).copy_from_slice(&[0.5, -2.0]);
        let mut adam = AdamState::zeros_like(&s);
        let lr = 0.01;
        let mut prev = s.tensor(id).data.clone();
        for step in 0..300 {
            adam_step(&mut s, &grads, &mut adam, lr);
            let cur = s.tensor(id).data.clone();
            if step > 200 {
                // With constant gradient, m_hat -> g and v_hat -> g^2, so the
                // per-step move approaches lr * sign(g).
                let d0 = prev[0] - cur[0];
                let d1 = prev[1] - cur[1];
                assert!((d0 - lr).abs() < 1e-6, "step was {d0}");
                assert!((d1 + lr).abs() < 1e-6, "step was {d1}");
            }
            prev = cur;
        }
    }

    #[test]
    fn masked_tensors_never_move() {
        let mut s = store_with(&["frozen", "live"]);
        let frozen = s.id("frozen").unwrap();
        let live = s.id("live").unwrap();
        let before_frozen = s.tensor(frozen).data.clone();
        let before_live = s.tensor(live).data.clone();

        let mut grads = GradStore::zeros_like(&s);
        grads.slot_mut(frozen).fill(1.0);
        grads.slot_mut(live).fill(1.0);
        let mut mask = TrainMask::none(&s);
        mask.allow_id(live);
        grads.apply_mask(&mask);

        let mut adam = AdamState::zeros_like(&s);
        adam_step(&mut s, &grads, &mut adam, 0.1);
        assert_eq!(s.tensor(frozen).data, before_frozen);
        assert_ne!(s.tensor(live).data, before_live);
    }

    #[test]
    fn snapshot_restore_round_trips() {
        let mut s = store_with(&["a", "b"]);
        let snap = s.snapshot();
        s.tensor_mut(ParamId(0)).data[0] += 1.0;
        s.restore(&snap);
        assert_eq!(s.snapshot(), snap);
    }

    #[test]
    fn partition_masks_select_by_tag() {
        let mut s = ParamStore::new();
        s.add("g", 1, 1, Partition::Global, Init::Zeros, 0);
        s.add("t0", 1, 1, Partition::Task(0), Init::Zeros, 0);
        s.add("t1", 1, 1, Partition::Task(1), Init::Zeros, 0);
        let m = TrainMask::allowing(&s, |p| matches!(p, Partition::Global | Partition::Task(1)));
        assert!(m.allows(s.id("g").unwrap()));
        assert!(!m.allows(s.id("t0").unwrap()));
        assert!(m.allows(s.id("t1").unwrap()));
    }
}
