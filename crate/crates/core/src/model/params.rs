//! Named parameter storage and the forward-pass context that binds stored
//! tensors to tape leaves.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use vaeinfo_tensor::{Array, BnMode, BnStats, Grads, Tape, Var};

use crate::rng::Rng;

/// Exponential-average factor for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub value: Array,
    /// False for normalization running statistics.
    pub trainable: bool,
}

/// Parameters and buffers keyed by dotted names such as `g.up2.conv.w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.get(name).map(|e| &e.value)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Trainable scalars under `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|(k, e)| e.trainable && k.starts_with(prefix)).map(|(_, e)| e.value.len()).sum()
    }

    /// SHA-256 over names, shapes and bit patterns of entries under `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, e) in self.entries.range(prefix.to_string()..).take_while(|(k, _)| k.starts_with(prefix)) {
            h.update(name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// How parameters missing from the store are treated.
enum Missing {
    Panic,
    Init(RefCell<Rng>),
}

/// State of one forward pass.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    store: RefCell<ParamStore>,
    missing: Missing,
    /// Batch statistics (train) or running statistics (inference).
    pub train: bool,
    /// Whether parameters become differentiable leaves.
    grad: bool,
    leaves: RefCell<BTreeMap<String, Var<'t>>>,
    bn_stats: RefCell<Vec<(String, BnStats)>>,
}

/// He-normal initializer or a constant fill.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    He { fan_in: usize },
    Const(f64),
}

impl<'t> Ctx<'t> {
    /// Forward over an existing store. The store is moved in and handed
    /// back by [`Ctx::finish`].
    pub fn new(tape: &'t Tape, store: ParamStore, train: bool, grad: bool) -> Self {
        Self {
            tape,
            store: RefCell::new(store),
            missing: Missing::Panic,
            train,
            grad,
            leaves: RefCell::new(BTreeMap::new()),
            bn_stats: RefCell::new(Vec::new()),
        }
    }

    /// Forward that creates parameters on first use, drawing from `rng`.
    pub fn initializing(tape: &'t Tape, rng: Rng) -> Self {
        Self { missing: Missing::Init(RefCell::new(rng)), ..Self::new(tape, ParamStore::default(), true, false) }
    }

    fn fetch(&self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Array {
        if let Some(e) = self.store.borrow().entries.get(name) {
            assert_eq!(e.value.shape(), shape, "parameter {name} has shape {:?}, expected {shape:?}", e.value.shape());
            return e.value.clone();
        }
        let Missing::Init(rng) = &self.missing else {
            panic!("parameter {name} missing from the store");
        };
        let n: usize = shape.iter().product();
        let data = match init {
            Init::He { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = rng.borrow_mut();
                (0..n).map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut *rng)).collect()
            }
            Init::Const(c) => vec![c; n],
        };
        let value = Array::new(shape.to_vec(), data);
        self.store.borrow_mut().entries.insert(name.to_string(), Entry { value: value.clone(), trainable });
        value
    }

    /// The leaf bound to parameter `name`; repeated calls share one leaf.
    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Var<'t> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return *v;
        }
        let value = self.fetch(name, shape, init, true);
        let v = if self.grad { self.tape.param(value) } else { self.tape.constant(value) };
        self.leaves.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Batch normalization over axis 1 with parameters under `name`.
    pub fn batch_norm(&self, name: &str, x: Var<'t>) -> Var<'t> {
        let c = x.shape()[1];
        let gamma = self.param(&format!("{name}.gamma"), &[c], Init::Const(1.0));
        let beta = self.param(&format!("{name}.beta"), &[c], Init::Const(0.0));
        let mean = self.fetch(&format!("{name}.running_mean"), &[c], Init::Const(0.0), false);
        let var = self.fetch(&format!("{name}.running_var"), &[c], Init::Const(1.0), false);
        if self.train {
            let (y, stats) = x.batch_norm(&gamma, &beta, BnMode::Train);
            self.bn_stats.borrow_mut().push((name.to_string(), stats.expect("train mode yields stats")));
            y
        } else {
            x.batch_norm(&gamma, &beta, BnMode::Eval { mean: mean.data(), var: var.data() }).0
        }
    }

    /// Leaves created so far, by parameter name.
    pub fn leaves(&self) -> BTreeMap<String, Var<'t>> {
        self.leaves.borrow().clone()
    }

    /// Extracts gradients for every trainable leaf.
    pub fn gradients(&self, mut grads: Grads) -> BTreeMap<String, Array> {
        self.leaves
            .borrow()
            .iter()
            .filter_map(|(name, v)| grads.take(*v).map(|g| (name.clone(), g)))
            .collect()
    }

    /// Returns the store with running statistics folded in from every
    /// training-mode batch norm of this pass, in call order.
    pub fn finish(self) -> ParamStore {
        let mut store = self.store.into_inner();
        for (name, stats) in self.bn_stats.into_inner() {
            let unbias = if stats.count > 1 { stats.count as f64 / (stats.count - 1) as f64 } else { 1.0 };
            for (key, batch, scale) in [("running_mean", &stats.mean, 1.0), ("running_var", &stats.var, unbias)] {
                let entry = store.entries.get_mut(&format!("{name}.{key}")).expect("buffer created with layer");
                for (r, b) in entry.value.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * scale;
                }
            }
        }
        store
    }

    /// Returns the store without touching running statistics.
    pub fn into_store(self) -> ParamStore {
        self.store.into_inner()
    }
}
