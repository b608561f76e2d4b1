//! Named, tagged parameter storage.
//!
//! Every trainable tensor of the model is registered through a
//! [`ParamBuilder`] under a dotted name and exactly one [`ParamTag`]. Each
//! parameter draws its initial values from an RNG seeded by `(seed, name)`,
//! so adding or removing modules never changes the initialisation of the
//! others. A census builder records shapes without allocating, which lets
//! large configurations be counted cheaply.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamTag {
    BaseEncoder,
    Adapter,
    Cbam,
    PromptEncoder,
    MaskDecoder,
}

impl ParamTag {
    pub const ALL: [ParamTag; 5] = [
        ParamTag::BaseEncoder,
        ParamTag::Adapter,
        ParamTag::Cbam,
        ParamTag::PromptEncoder,
        ParamTag::MaskDecoder,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ParamTag::BaseEncoder => "base_encoder",
            ParamTag::Adapter => "adapter",
            ParamTag::Cbam => "cbam",
            ParamTag::PromptEncoder => "prompt_encoder",
            ParamTag::MaskDecoder => "mask_decoder",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            ParamTag::BaseEncoder => 0,
            ParamTag::Adapter => 1,
            ParamTag::Cbam => 2,
            ParamTag::PromptEncoder => 3,
            ParamTag::MaskDecoder => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.code() == code)
    }
}

impl std::fmt::Display for ParamTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-bound, bound)
    Uniform(f64),
    /// N(0, std²)
    Normal(f64),
}

impl Init {
    /// PyTorch's default for linear layers: U(±1/√fan_in).
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tag: ParamTag,
    pub var: Var,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.var.elem_count()
    }
}

/// Ordered collection of the model's parameters.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    fn new(dtype: DType, device: Device) -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn total_elems(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    /// Overwrites the value of `name` in place; modules holding the tensor
    /// observe the new value.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
        if p.var.dims() != value.dims() {
            return Err(Error::shape(p.var.dims(), value.dims()));
        }
        p.var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Copies every parameter value to the host as `f64`.
    pub fn snapshot(&self) -> Result<Snapshot> {
        let mut values = BTreeMap::new();
        for p in &self.params {
            let v = p.var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            values.insert(p.name.clone(), (p.tag, v));
        }
        Ok(Snapshot { values })
    }
}

/// Host copy of all parameter values keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub values: BTreeMap<String, (ParamTag, Vec<f64>)>,
}

enum Mode {
    Alloc { seed: u64, dtype: DType, device: Device },
    Census,
}

struct State {
    mode: Mode,
    store: ParamStore,
    census: Vec<(String, ParamTag, Vec<usize>)>,
}

/// Scoped handle used by module constructors to register parameters.
#[derive(Clone)]
pub struct ParamBuilder {
    state: Rc<RefCell<State>>,
    prefix: String,
    tag: ParamTag,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self::from_store(ParamStore::new(dtype, device.clone()), seed)
    }

    /// Continues registering into an existing store.
    pub fn from_store(store: ParamStore, seed: u64) -> Self {
        let mode = Mode::Alloc {
            seed,
            dtype: store.dtype,
            device: store.device.clone(),
        };
        Self {
            state: Rc::new(RefCell::new(State {
                mode,
                store,
                census: Vec::new(),
            })),
            prefix: String::new(),
            tag: ParamTag::BaseEncoder,
        }
    }

    /// Shape-only builder. Registered tensors are zero-strided broadcasts
    /// and must not be used for computation.
    pub fn census() -> Self {
        Self {
            state: Rc::new(RefCell::new(State {
                mode: Mode::Census,
                store: ParamStore::new(DType::F32, Device::Cpu),
                census: Vec::new(),
            })),
            prefix: String::new(),
            tag: ParamTag::BaseEncoder,
        }
    }

    pub fn is_census(&self) -> bool {
        matches!(self.state.borrow().mode, Mode::Census)
    }

    pub fn dtype(&self) -> DType {
        match &self.state.borrow().mode {
            Mode::Alloc { dtype, .. } => *dtype,
            Mode::Census => DType::F32,
        }
    }

    pub fn device(&self) -> Device {
        match &self.state.borrow().mode {
            Mode::Alloc { device, .. } => device.clone(),
            Mode::Census => Device::Cpu,
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        Self {
            state: self.state.clone(),
            prefix: if self.prefix.is_empty() {
                name.to_string()
            } else {
                format!("{}.{}", self.prefix, name)
            },
            tag: self.tag,
        }
    }

    pub fn tagged(&self, tag: ParamTag) -> Self {
        Self {
            tag,
            ..self.clone()
        }
    }

    pub fn tag(&self) -> ParamTag {
        self.tag
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut st = self.state.borrow_mut();
        if st.store.index.contains_key(&full) || st.census.iter().any(|(n, _, _)| *n == full) {
            return Err(Error::InvalidState(format!("parameter '{full}' registered twice")));
        }
        match &st.mode {
            Mode::Census => {
                st.census.push((full, self.tag, shape.to_vec()));
                Ok(Tensor::zeros((), DType::F32, &Device::Cpu)?.broadcast_as(shape)?)
            }
            Mode::Alloc {
                seed,
                dtype,
                device,
            } => {
                let values = init_values(*seed, &full, shape.iter().product(), init);
                let t = Tensor::from_vec(values, shape, device)?.to_dtype(*dtype)?;
                let var = Var::from_tensor(&t)?;
                let tensor = var.as_tensor().clone();
                let idx = st.store.params.len();
                st.store.index.insert(full.clone(), idx);
                st.store.params.push(Param {
                    name: full,
                    tag: self.tag,
                    var,
                });
                Ok(tensor)
            }
        }
    }

    /// Consumes the builder and returns the populated store. All scoped
    /// handles derived from this builder must have been dropped.
    pub fn into_store(self) -> Result<ParamStore> {
        let state = Rc::try_unwrap(self.state)
            .map_err(|_| Error::InvalidState("parameter builder still shared".into()))?;
        Ok(state.into_inner().store)
    }

    /// Registered shapes, for census builders (and allocated builders alike).
    pub fn entries(&self) -> Vec<(String, ParamTag, Vec<usize>)> {
        let st = self.state.borrow();
        match st.mode {
            Mode::Census => st.census.clone(),
            Mode::Alloc { .. } => st
                .store
                .params
                .iter()
                .map(|p| (p.name.clone(), p.tag, p.var.dims().to_vec()))
                .collect(),
        }
    }
}

fn init_values(seed: u64, name: &str, n: usize, init: Init) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Uniform(b) => {
            let d = Uniform::new_inclusive(-b, b);
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_independent_of_registration_order() {
        let a = ParamBuilder::new(7, DType::F32, &Device::Cpu);
        let x1 = a.pp("m").param("w", &[3, 4], Init::Normal(1.0)).unwrap();
        let b = ParamBuilder::new(7, DType::F32, &Device::Cpu);
        b.pp("other").param("w", &[5], Init::Normal(1.0)).unwrap();
        let x2 = b.pp("m").param("w", &[3, 4], Init::Normal(1.0)).unwrap();
        assert_eq!(
            x1.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x2.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn duplicate_names_rejected() {
        let b = ParamBuilder::new(0, DType::F32, &Device::Cpu);
        b.param("w", &[2], Init::Zeros).unwrap();
        assert!(b.param("w", &[2], Init::Zeros).is_err());
    }

    #[test]
    fn census_records_without_allocating() {
        let b = ParamBuilder::census();
        let t = b.pp("big").tagged(ParamTag::Adapter).param("w", &[4096, 4096], Init::Zeros).unwrap();
        assert_eq!(t.dims(), &[4096, 4096]);
        let e = b.entries();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].0, "big.w");
        assert_eq!(e[0].1, ParamTag::Adapter);
    }

    #[test]
    fn assign_updates_shared_tensor() {
        let b = ParamBuilder::new(1, DType::F64, &Device::Cpu);
        let t = b.param("w", &[2], Init::Zeros).unwrap();
        let store = b.into_store().unwrap();
        store
            .assign("w", &Tensor::new(&[1.5f64, -2.0], &Device::Cpu).unwrap())
            .unwrap();
        assert_eq!(t.to_vec1::<f64>().unwrap(), vec![1.5, -2.0]);
        assert!(store.assign("nope", &t).is_err());
    }
}
