//! Named, seeded parameter storage and checkpoint I/O.
//!
//! Every learnable tensor lives in a [`ParamStore`] under a dotted module
//! path (`analysis.stage0.block1.attn.qkv.weight`). Initial values are drawn
//! from a ChaCha stream seeded by `(store seed, path)`, so a parameter's
//! initial value does not depend on construction order.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Init {
    /// Normal(0, std) truncated at two standard deviations.
    TruncNormal(f64),
    Uniform(f64, f64),
    Const(f64),
    Values(Vec<f64>),
}

impl Init {
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 2.0 {
                            break v * std;
                        }
                    })
                    .collect()
            }
            Init::Uniform(lo, hi) => (0..n).map(|_| rng.random_range(*lo..*hi)).collect(),
            Init::Const(v) => vec![*v; n],
            Init::Values(v) => v.clone(),
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Parameters in lexicographic path order.
    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn create(&mut self, name: String, shape: &[usize], init: &Init) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&name));
        let values = init.sample(n, &mut rng);
        if values.len() != n {
            return Err(Error::Config(format!(
                "parameter {name}: {} initial values for {n} elements",
                values.len()
            )));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    /// Overwrite one parameter. The value is cast to the store dtype.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn save(&self, path: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
        let tensors: Vec<(&str, &Tensor)> = self.vars.iter().map(|(k, v)| (k.as_str(), v.as_tensor())).collect();
        save_tensors(path, tensors, metadata)
    }

    /// Load every parameter from a checkpoint written by [`ParamStore::save`].
    /// The checkpoint must contain exactly this store's parameter set.
    pub fn load(&self, path: &Path) -> Result<BTreeMap<String, String>> {
        let (tensors, metadata) = load_tensors(path, &self.device)?;
        for name in self.vars.keys() {
            if !tensors.contains_key(name) {
                return Err(Error::Checkpoint(format!(
                    "{} is missing parameter {name}",
                    path.display()
                )));
            }
        }
        for (name, t) in &tensors {
            let var = self.vars.get(name).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "{} has unexpected parameter {name} (wrong model config?)",
                    path.display()
                ))
            })?;
            if var.dims() != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?} vs model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(metadata)
    }
}

pub(crate) fn save_tensors<'a>(
    path: &Path,
    tensors: Vec<(&'a str, &'a Tensor)>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let meta: HashMap<String, String> = metadata.clone().into_iter().collect();
    let bytes = safetensors::serialize(tensors, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Metadata of a safetensors file without materializing its tensors.
pub fn read_metadata(path: &Path) -> Result<BTreeMap<String, String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(header.metadata().clone().unwrap_or_default().into_iter().collect())
}

pub(crate) fn load_tensors(
    path: &Path,
    device: &Device,
) -> Result<(HashMap<String, Tensor>, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let metadata = header.metadata().clone().unwrap_or_default().into_iter().collect();
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    Ok((tensors, metadata))
}

/// A prefix view into a [`ParamStore`] used while building modules.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        Scope {
            prefix: self.path(name.as_ref()),
            store: self.store,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let path = self.path(name);
        self.store.create(path, shape, &init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_independent_of_creation_order() {
        let mut a = ParamStore::new(7, DType::F64);
        let mut b = ParamStore::new(7, DType::F64);
        let (a1, a2) = {
            let mut s = a.root();
            (
                s.param("x", &[4], Init::TruncNormal(1.0)).unwrap(),
                s.param("y", &[4], Init::TruncNormal(1.0)).unwrap(),
            )
        };
        let (b2, b1) = {
            let mut s = b.root();
            (
                s.param("y", &[4], Init::TruncNormal(1.0)).unwrap(),
                s.param("x", &[4], Init::TruncNormal(1.0)).unwrap(),
            )
        };
        assert_eq!(a1.to_vec1::<f64>().unwrap(), b1.to_vec1::<f64>().unwrap());
        assert_eq!(a2.to_vec1::<f64>().unwrap(), b2.to_vec1::<f64>().unwrap());
        assert_ne!(a1.to_vec1::<f64>().unwrap(), a2.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let mut a = ParamStore::new(1, DType::F32);
        a.root().pp("m").param("w", &[3, 5], Init::TruncNormal(0.3)).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("quality_id".to_string(), "2".to_string());
        a.save(&path, &meta).unwrap();

        let mut b = ParamStore::new(99, DType::F32);
        b.root().pp("m").param("w", &[3, 5], Init::Const(0.0)).unwrap();
        let got = b.load(&path).unwrap();
        assert_eq!(got, meta);
        let wa: Vec<u32> = a
            .get("m.w")
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let wb: Vec<u32> = b
            .get("m.w")
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(wa, wb);
    }

    #[test]
    fn load_rejects_foreign_parameter_sets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let mut a = ParamStore::new(1, DType::F32);
        a.root().param("w", &[2], Init::Const(1.0)).unwrap();
        a.save(&path, &BTreeMap::new()).unwrap();
        let mut b = ParamStore::new(1, DType::F32);
        b.root().param("v", &[2], Init::Const(1.0)).unwrap();
        assert!(matches!(b.load(&path), Err(Error::Checkpoint(_))));
    }
}
