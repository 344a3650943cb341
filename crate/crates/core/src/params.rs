//! Named parameter storage shared by every model component.
//!
//! Components declare their parameters through a [`ParamBuilder`] while they
//! are constructed. The first declaration of a name creates and initializes
//! the variable (seeded by the store seed and the parameter name); later
//! declarations, e.g. when the model is rebuilt with a different trainable
//! set, reuse the stored variable.
//!
//! A shape-only store never allocates: every declaration returns a zero-stride
//! view of a single scalar. It exists so that parameter accounting can be run
//! at full ViT-B dimensions on a laptop.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal distribution truncated at two standard deviations.
    TruncNormal { std: f64 },
    Normal { std: f64 },
    Zeros,
    Ones,
    Constant(f64),
}

impl Init {
    /// Default for projection and embedding weights.
    pub const PROJ: Init = Init::TruncNormal { std: 0.02 };

    /// Truncated normal with variance `1 / fan_in`, for weights feeding a linear map.
    pub fn fan_in(fan_in: usize) -> Init {
        Init::TruncNormal { std: (1.0 / fan_in.max(1) as f64).sqrt() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable weight; counted in parameter reports.
    Weight,
    /// Fixed tensor stored with the model (e.g. Fourier feature matrices); never trained or counted.
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry {
    shape: Vec<usize>,
    kind: ParamKind,
    var: Option<Var>,
}

/// Which parameters participate in autodiff when a model is built.
#[derive(Clone)]
pub enum Tracking {
    /// Nothing is tracked (inference).
    None,
    /// Every weight is tracked, including frozen ones. Used to probe gradient flow.
    All,
    /// Only names accepted by the predicate are tracked.
    Select(Arc<dyn Fn(&str) -> bool + Send + Sync>),
}

impl Tracking {
    fn tracks(&self, name: &str) -> bool {
        match self {
            Tracking::None => false,
            Tracking::All => true,
            Tracking::Select(pred) => pred(name),
        }
    }
}

impl std::fmt::Debug for Tracking {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tracking::None => write!(f, "Tracking::None"),
            Tracking::All => write!(f, "Tracking::All"),
            Tracking::Select(_) => write!(f, "Tracking::Select(..)"),
        }
    }
}

#[derive(Clone)]
pub struct ParamStore {
    entries: Arc<Mutex<BTreeMap<String, Entry>>>,
    seed: u64,
    shape_only: bool,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("shape_only", &self.shape_only)
            .field("len", &self.lock().len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Arc::default(),
            seed,
            shape_only: false,
            device: Device::Cpu,
        }
    }

    pub fn shape_only() -> Self {
        Self {
            shape_only: true,
            ..Self::new(0)
        }
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<String, Entry>> {
        // A poisoned lock only means another thread panicked mid-insert of an
        // unrelated entry; the map itself is still consistent.
        self.entries.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn builder(&self, tracking: Tracking) -> ParamBuilder {
        ParamBuilder {
            store: self.clone(),
            prefix: String::new(),
            tracking,
        }
    }

    fn declare(&self, name: &str, shape: &[usize], init: Init, kind: ParamKind) -> Result<Option<Var>> {
        let mut entries = self.lock();
        if let Some(entry) = entries.get(name) {
            if entry.shape != shape {
                return Err(Error::Load(format!(
                    "parameter `{name}` has shape {:?}, model expects {shape:?}",
                    entry.shape
                )));
            }
            return Ok(entry.var.clone());
        }
        let var = if self.shape_only {
            None
        } else {
            Some(self.init_var(name, shape, init)?)
        };
        entries.insert(
            name.to_string(),
            Entry {
                shape: shape.to_vec(),
                kind,
                var: var.clone(),
            },
        );
        Ok(var)
    }

    fn init_var(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c as f32; n],
            Init::Normal { std } => {
                let mut rng = substream(self.seed, &format!("init/{name}"));
                (0..n)
                    .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
                    .collect()
            }
            Init::TruncNormal { std } => {
                let mut rng = substream(self.seed, &format!("init/{name}"));
                (0..n)
                    .map(|_| loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            break (z * std) as f32;
                        }
                    })
                    .collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?;
        Ok(Var::from_tensor(&t)?)
    }

    /// Inserts (or replaces) a parameter with the given values.
    pub fn insert(&self, name: &str, value: &Tensor, kind: ParamKind) -> Result<()> {
        let value = value.to_dtype(DType::F32)?;
        let mut entries = self.lock();
        match entries.get(name).and_then(|e| e.var.clone()) {
            Some(var) if var.dims() == value.dims() => var.set(&value)?,
            _ => {
                entries.insert(
                    name.to_string(),
                    Entry {
                        shape: value.dims().to_vec(),
                        kind,
                        var: Some(Var::from_tensor(&value)?),
                    },
                );
            }
        }
        Ok(())
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.lock().get(name).and_then(|e| e.var.clone())
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.lock().get(name).map(|e| e.kind)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.lock().contains_key(name)
    }

    /// All entries in name order: `(name, shape, kind)`.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        self.lock()
            .iter()
            .map(|(k, e)| (k.clone(), e.shape.clone(), e.kind))
            .collect()
    }

    /// Materialized variables in name order.
    pub fn vars(&self) -> Vec<(String, Var, ParamKind)> {
        self.lock()
            .iter()
            .filter_map(|(k, e)| e.var.clone().map(|v| (k.clone(), v, e.kind)))
            .collect()
    }

    /// Flat copy of every parameter's values, for before/after comparisons.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        let mut out = BTreeMap::new();
        for (name, var, _) in self.vars() {
            out.insert(name, var.as_tensor().flatten_all()?.to_vec1::<f32>()?);
        }
        Ok(out)
    }

    /// Deep copy: the new store owns fresh storage.
    pub fn deep_clone(&self) -> Result<ParamStore> {
        let copy = ParamStore {
            entries: Arc::default(),
            seed: self.seed,
            shape_only: self.shape_only,
            device: self.device.clone(),
        };
        {
            let src = self.lock();
            let mut dst = copy.lock();
            for (name, e) in src.iter() {
                let var = match &e.var {
                    Some(v) => Some(Var::from_tensor(&v.as_tensor().copy()?)?),
                    None => None,
                };
                dst.insert(
                    name.clone(),
                    Entry {
                        shape: e.shape.clone(),
                        kind: e.kind,
                        var,
                    },
                );
            }
        }
        Ok(copy)
    }

    /// Overwrites every parameter whose name satisfies `filter` with Gaussian noise.
    pub fn perturb(&self, filter: impl Fn(&str) -> bool, std: f64, seed: u64) -> Result<usize> {
        let mut touched = 0;
        for (name, var, kind) in self.vars() {
            if kind != ParamKind::Weight || !filter(&name) {
                continue;
            }
            let mut rng = substream(seed, &format!("perturb/{name}"));
            let n = var.elem_count();
            let data: Vec<f32> = (0..n)
                .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
                .collect();
            var.set(&Tensor::from_vec(data, var.shape(), &self.device)?)?;
            touched += 1;
        }
        Ok(touched)
    }

    /// Sets every parameter whose name satisfies `filter` to a constant.
    pub fn fill(&self, filter: impl Fn(&str) -> bool, value: f64) -> Result<usize> {
        let mut touched = 0;
        for (name, var, _) in self.vars() {
            if filter(&name) {
                var.set(&var.as_tensor().ones_like()?.affine(value, 0.0)?)?;
                touched += 1;
            }
        }
        Ok(touched)
    }
}

/// Declares parameters under a dotted name prefix.
#[derive(Clone, Debug)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
    tracking: Tracking,
}

impl ParamBuilder {
    pub fn pp(&self, segment: impl std::fmt::Display) -> ParamBuilder {
        let prefix = if self.prefix.is_empty() {
            segment.to_string()
        } else {
            format!("{}.{}", self.prefix, segment)
        };
        ParamBuilder {
            store: self.store.clone(),
            prefix,
            tracking: self.tracking.clone(),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn placeholder(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros((), DType::F32, self.device())?.broadcast_as(shape)?)
    }

    pub fn get(&self, name: &str, shape: impl Into<Vec<usize>>, init: Init) -> Result<Tensor> {
        let shape = shape.into();
        let full = self.full_name(name);
        match self.store.declare(&full, &shape, init, ParamKind::Weight)? {
            None => self.placeholder(&shape),
            Some(var) if self.tracking.tracks(&full) => Ok(var.as_tensor().clone()),
            Some(var) => Ok(var.as_detached_tensor()),
        }
    }

    pub fn buffer(&self, name: &str, shape: impl Into<Vec<usize>>, init: Init) -> Result<Tensor> {
        let shape = shape.into();
        let full = self.full_name(name);
        match self.store.declare(&full, &shape, init, ParamKind::Buffer)? {
            None => self.placeholder(&shape),
            Some(var) => Ok(var.as_detached_tensor()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn redeclaration_reuses_storage() {
        let store = ParamStore::new(3);
        let b = store.builder(Tracking::All).pp("enc");
        let a = b.get("w", vec![2, 3], Init::PROJ).unwrap();
        let again = b.get("w", vec![2, 3], Init::Zeros).unwrap();
        assert_eq!(a.to_vec2::<f32>().unwrap(), again.to_vec2::<f32>().unwrap());
        assert!(b.get("w", vec![3, 2], Init::PROJ).is_err());
        assert!(store.contains("enc.w"));
    }

    #[test]
    fn init_depends_on_name_not_order() {
        let s1 = ParamStore::new(11);
        let s2 = ParamStore::new(11);
        let b1 = s1.builder(Tracking::None);
        let b2 = s2.builder(Tracking::None);
        let x1 = b1.get("x", vec![4], Init::PROJ).unwrap();
        let _y1 = b1.get("y", vec![4], Init::PROJ).unwrap();
        let _y2 = b2.get("y", vec![4], Init::PROJ).unwrap();
        let x2 = b2.get("x", vec![4], Init::PROJ).unwrap();
        assert_eq!(x1.to_vec1::<f32>().unwrap(), x2.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn truncated_normal_is_bounded() {
        let store = ParamStore::new(1);
        let w = store
            .builder(Tracking::None)
            .get("w", vec![4096], Init::TruncNormal { std: 0.02 })
            .unwrap();
        let v = w.to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.abs() <= 0.04 + 1e-7));
        let mean = v.iter().sum::<f32>() / v.len() as f32;
        assert!(mean.abs() < 2e-3);
    }

    #[test]
    fn shape_only_store_does_not_allocate() {
        let store = ParamStore::shape_only();
        let t = store
            .builder(Tracking::None)
            .get("huge", vec![50_000, 50_000], Init::PROJ)
            .unwrap();
        assert_eq!(t.dims(), &[50_000, 50_000]);
        assert!(store.var("huge").is_none());
        assert_eq!(store.shapes()[0].1, vec![50_000, 50_000]);
    }

    #[test]
    fn tracking_controls_gradient_participation() {
        let store = ParamStore::new(0);
        let pred: Arc<dyn Fn(&str) -> bool + Send + Sync> = Arc::new(|n: &str| n == "a");
        let b = store.builder(Tracking::Select(pred));
        let a = b.get("a", vec![2], Init::Ones).unwrap();
        let c = b.get("c", vec![2], Init::Ones).unwrap();
        let loss = (a.sum_all().unwrap() + c.sum_all().unwrap()).unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(&store.var("a").unwrap()).is_some());
        assert!(grads.get(&store.var("c").unwrap()).is_none());
    }
}
