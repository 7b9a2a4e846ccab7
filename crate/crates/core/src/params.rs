//! Named parameter storage shared by every module.
//!
//! Each parameter is a candle [`Var`] registered under a dotted name such as
//! `llm.base.layer0.attn.q.w`. Initial values are drawn from a generator
//! derived from the store seed and the parameter name, so initialization does
//! not depend on construction order.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::budget::Role;
use crate::error::{Error, Result};
use crate::util::derived_rng;

#[derive(Clone, Debug)]
pub struct Param {
    name: Arc<str>,
    var: Var,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn shape(&self) -> Vec<usize> {
        self.var.as_tensor().dims().to_vec()
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub param: Param,
    pub role: Role,
}

/// Component a parameter belongs to, e.g. `llm.lora` or `outproj.video`.
pub fn module_of(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default();
    match first {
        "llm" | "outproj" | "diffusion" | "conditioner" | "encoder" => match parts.next() {
            Some(second) => format!("{first}.{second}"),
            None => first.to_string(),
        },
        _ => first.to_string(),
    }
}

pub struct ParamStore {
    seed: u64,
    dtype: DType,
    device: Device,
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            seed,
            dtype,
            device: Device::Cpu,
            entries: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn register(&mut self, name: &str, shape: &[usize], data: Vec<f64>, role: Role) -> Result<Param> {
        if self.entries.contains_key(name) {
            return Err(Error::InvalidInput(format!("duplicate parameter {name}")));
        }
        let tensor = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let param = Param {
            name: Arc::from(name),
            var: Var::from_tensor(&tensor)?,
        };
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                param: param.clone(),
                role,
            },
        );
        Ok(param)
    }

    /// Gaussian init with standard deviation `std`.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, role: Role) -> Result<Param> {
        let mut rng = derived_rng(self.seed, name);
        let numel: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let data = (0..numel).map(|_| dist.sample(&mut rng)).collect();
        self.register(name, shape, data, role)
    }

    /// Uniform init on `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, role: Role) -> Result<Param> {
        let mut rng = derived_rng(self.seed, name);
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.register(name, shape, data, role)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, role: Role) -> Result<Param> {
        let numel: usize = shape.iter().product();
        self.register(name, shape, vec![value; numel], role)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> {
        self.entries.keys().filter(move |n| n.starts_with(prefix))
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, e)| e.param.var.as_tensor().elem_count() as u64)
            .sum()
    }

    /// Values of a parameter as `f32`, row-major.
    pub fn values_f32(&self, name: &str) -> Result<Vec<f32>> {
        let entry = self
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))?;
        Ok(entry
            .param
            .var
            .as_tensor()
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1()?)
    }

    /// Overwrite a parameter from row-major `f32` values of the same shape.
    pub fn set_values_f32(&self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<()> {
        let entry = self.get(name).ok_or_else(|| Error::ShapeMismatch {
            name: name.to_string(),
            detail: "no such tensor in the target configuration".into(),
        })?;
        let have = entry.param.shape();
        if have != shape {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                detail: format!("expected {have:?}, found {shape:?}"),
            });
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        entry.param.var.set(&t)?;
        Ok(())
    }

    /// Raw little-endian bytes of every parameter, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<u8>>> {
        let mut out = BTreeMap::new();
        for (name, entry) in &self.entries {
            let t = entry.param.var.as_tensor().flatten_all()?;
            let bytes = match self.dtype {
                DType::F64 => t
                    .to_vec1::<f64>()?
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect(),
                _ => t
                    .to_dtype(DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect(),
            };
            out.insert(name.clone(), bytes);
        }
        Ok(out)
    }
}

/// Forward-pass context: train/eval mode, which parameters are tracked for
/// gradients, and the dropout generator.
pub struct Ctx<'a> {
    train: bool,
    trainable: Option<&'a BTreeSet<String>>,
    rng: RefCell<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    /// Eval mode; no parameter is tracked.
    pub fn eval() -> Ctx<'static> {
        static EMPTY: BTreeSet<String> = BTreeSet::new();
        Ctx {
            train: false,
            trainable: Some(&EMPTY),
            rng: RefCell::new(derived_rng(0, "eval")),
        }
    }

    /// Train mode tracking only the parameters in `trainable`.
    pub fn train(trainable: &'a BTreeSet<String>, seed: u64) -> Self {
        Ctx {
            train: true,
            trainable: Some(trainable),
            rng: RefCell::new(derived_rng(seed, "dropout")),
        }
    }

    /// Every parameter tracked; used by gradient checks.
    pub fn track_all(train: bool, seed: u64) -> Ctx<'static> {
        Ctx {
            train,
            trainable: None,
            rng: RefCell::new(derived_rng(seed, "dropout")),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn is_tracked(&self, name: &str) -> bool {
        self.trainable.map_or(true, |set| set.contains(name))
    }

    /// The tensor behind `p`, detached from the graph unless tracked.
    pub fn p(&self, p: &Param) -> Tensor {
        if self.is_tracked(p.name()) {
            p.var.as_tensor().clone()
        } else {
            p.var.as_tensor().detach()
        }
    }

    /// Inverted dropout; identity in eval mode or when `rate == 0`.
    pub fn dropout(&self, x: &Tensor, rate: f64) -> Result<Tensor> {
        if !self.train || rate <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - rate;
        let n = x.elem_count();
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }

    pub fn with_rng<T>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> T {
        f(&mut self.rng.borrow_mut())
    }
}
