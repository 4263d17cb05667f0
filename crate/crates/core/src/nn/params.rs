use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Mutex;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Initialization schemes for newly created parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal with the given std, resampled outside ±2σ.
    TruncNormal { std: f64 },
    /// He-normal, `std = sqrt(2 / fan)`.
    Kaiming { fan: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Param,
    Buffer,
}

#[derive(Clone)]
struct Entry {
    var: Var,
    kind: Kind,
}

/// Named, seed-initialized storage for every trainable parameter and running buffer.
///
/// Layers never own their weights: they look them up here by dotted name when constructed,
/// so several network views (graph-tracked for training, detached for inference) can share the
/// same storage.
pub struct ParamStore {
    entries: Mutex<BTreeMap<String, Entry>>,
    rng: Mutex<ChaCha8Rng>,
    dtype: DType,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("entries", &self.lock().len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            entries: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, Entry>> {
        self.entries.lock().expect("parameter store poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Builder whose tensors participate in autograd.
    pub fn builder(&self) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
            detached: false,
        }
    }

    /// Builder whose tensors share storage with the parameters but are invisible to autograd.
    pub fn detached_builder(&self) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
            detached: true,
        }
    }

    fn sample(&self, shape: &Shape, init: Init) -> Result<Tensor> {
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::TruncNormal { std } => {
                let mut rng = self.rng.lock().expect("rng poisoned");
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut *rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::Kaiming { fan } => {
                let std = (2.0 / fan.max(1) as f64).sqrt();
                let mut rng = self.rng.lock().expect("rng poisoned");
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| normal.sample(&mut *rng)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape.clone(), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    fn get_or_create(&self, name: &str, shape: Shape, init: Init, kind: Kind) -> Result<Var> {
        if let Some(entry) = self.lock().get(name) {
            if entry.var.shape() != &shape {
                return Err(Error::Config(format!(
                    "parameter {name}: stored shape {:?}, requested {:?}",
                    entry.var.shape(),
                    shape
                )));
            }
            return Ok(entry.var.clone());
        }
        let var = Var::from_tensor(&self.sample(&shape, init)?)?;
        self.lock().insert(
            name.to_string(),
            Entry {
                var: var.clone(),
                kind,
            },
        );
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock().get(name).map(|e| e.var.clone())
    }

    /// Trainable parameters in name order.
    pub fn named_params(&self) -> Vec<(String, Var)> {
        self.named(Kind::Param)
    }

    pub fn named_buffers(&self) -> Vec<(String, Var)> {
        self.named(Kind::Buffer)
    }

    fn named(&self, kind: Kind) -> Vec<(String, Var)> {
        self.lock()
            .iter()
            .filter(|(_, e)| e.kind == kind)
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    /// Total number of trainable scalar parameters.
    pub fn num_params(&self) -> usize {
        self.lock()
            .values()
            .filter(|e| e.kind == Kind::Param)
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// Snapshot of every parameter and buffer, keyed by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.lock()
            .iter()
            .map(|(n, e)| (n.clone(), e.var.as_detached_tensor()))
            .collect()
    }

    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.lock()
            .iter()
            .map(|(n, e)| (n.clone(), e.var.dims().to_vec()))
            .collect()
    }

    /// Overwrites every entry from `tensors`. The name sets and shapes must match exactly;
    /// otherwise nothing is written and the error lists every difference.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let entries = self.lock();
        let mut diff = String::new();
        for (name, entry) in entries.iter() {
            match tensors.get(name) {
                None => writeln!(diff, "  missing: {name} {:?}", entry.var.dims()).unwrap(),
                Some(t) if t.dims() != entry.var.dims() => writeln!(
                    diff,
                    "  shape: {name} expected {:?}, found {:?}",
                    entry.var.dims(),
                    t.dims()
                )
                .unwrap(),
                Some(_) => {}
            }
        }
        for (name, t) in tensors {
            if !entries.contains_key(name) {
                writeln!(diff, "  unexpected: {name} {:?}", t.dims()).unwrap();
            }
        }
        if !diff.is_empty() {
            return Err(Error::CheckpointMismatch(diff));
        }
        for (name, entry) in entries.iter() {
            entry.var.set(&tensors[name].to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies values for every name present in both stores with equal shapes; returns the count.
    pub fn copy_matching_from(&self, other: &ParamStore) -> Result<usize> {
        let src = other.tensors();
        let mut copied = 0;
        for (name, entry) in self.lock().iter() {
            if let Some(t) = src.get(name) {
                if t.dims() == entry.var.dims() {
                    entry.var.set(&t.to_dtype(self.dtype)?)?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }

    /// Draws a fresh seed from the store RNG (used for per-run derived randomness).
    pub fn next_seed(&self) -> u64 {
        self.rng.lock().expect("rng poisoned").random()
    }
}

/// Hierarchical name scope over a [`ParamStore`].
#[derive(Clone)]
pub struct ParamBuilder<'a> {
    store: &'a ParamStore,
    prefix: String,
    detached: bool,
}

impl<'a> ParamBuilder<'a> {
    /// Pushes a name segment.
    pub fn pp(&self, segment: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            segment.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, segment.as_ref())
        };
        Self {
            store: self.store,
            prefix,
            detached: self.detached,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let var = self
            .store
            .get_or_create(&self.full_name(name), shape.into(), init, Kind::Param)?;
        Ok(if self.detached {
            var.as_detached_tensor()
        } else {
            var.as_tensor().clone()
        })
    }

    /// Non-trainable state such as batch-norm running statistics.
    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.store
            .get_or_create(&self.full_name(name), shape.into(), init, Kind::Buffer)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn is_detached(&self) -> bool {
        self.detached
    }
}
