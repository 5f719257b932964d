use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Named trainable tensors of one network.
///
/// A frozen store hands out detached tensors, so no gradient ever reaches
/// its variables.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    frozen: bool,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            frozen: false,
        }
    }

    pub fn device() -> Device {
        Device::Cpu
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        Ok(if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }

    pub(crate) fn insert(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let t = t.to_dtype(self.dtype)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    /// Flattened `f32` copies of every parameter in name order.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let data = v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                Ok((k.clone(), v.dims().to_vec(), data))
            })
            .collect()
    }

    /// Overwrites existing parameters in place; every name must already be
    /// present with the same shape, and every parameter must be covered.
    pub fn import(&mut self, arrays: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        let mut seen = 0;
        for (name, shape, data) in arrays {
            let Some(var) = self.vars.get(name) else {
                continue;
            };
            if var.dims() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, file has {shape:?}",
                    var.dims()
                )));
            }
            let t = Tensor::from_slice(data, shape.as_slice(), &Self::device())?.to_dtype(self.dtype)?;
            var.set(&t)?;
            seen += 1;
        }
        if seen != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint covers {seen} of {} parameters",
                self.vars.len()
            )));
        }
        Ok(())
    }

    /// Deep copy with fresh variables.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new(self.dtype);
        out.frozen = self.frozen;
        for (k, v) in &self.vars {
            out.vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(out)
    }

    /// Bitwise equality of every parameter.
    pub fn same_values(&self, other: &Self) -> Result<bool> {
        if self.vars.len() != other.vars.len() {
            return Ok(false);
        }
        for ((ka, a), (kb, b)) in self.vars.iter().zip(&other.vars) {
            if ka != kb || a.dims() != b.dims() {
                return Ok(false);
            }
            let xa = a.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let xb = b.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if xa.iter().zip(&xb).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Creates missing parameters from a seeded generator and fetches existing
/// ones, so one code path both initializes and rebinds a network.
pub(crate) struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.store.vars.contains_key(name) {
            let t = self.store.get(name)?;
            if t.dims() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.dims()
                )));
            }
            return Ok(t);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0f32, std as f32)
                    .map_err(|e| Error::Config(format!("bad init std: {e}")))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &ParamStore::device())?;
        self.store.insert(name, &t)?;
        self.store.get(name)
    }
}
