//! Named parameter store with seeded initialization.
//!
//! candle's CPU device cannot be seeded, so parameters are created here from
//! a ChaCha stream keyed by the store seed and the parameter name. Creating
//! the same model twice with the same seed gives bit-identical weights,
//! independent of construction order.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{FanInOut, NormalOrUniform};
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<BTreeMap<String, Var>>>,
    seed: u64,
    dtype: DType,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("dtype", &self.dtype)
            .field("tensors", &self.len())
            .finish()
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(name.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn init_values(init: Init, shape: &Shape, seed: u64) -> Vec<f64> {
    let n = shape.elem_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match init {
        Init::Const(v) => vec![v; n],
        Init::Randn { mean, stdev } => (0..n)
            .map(|_| mean + stdev * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
        Init::Kaiming { dist, fan, non_linearity } => {
            let fan = match fan {
                FanInOut::FanIn => FanInOut::FanIn.for_shape(shape),
                FanInOut::FanOut => FanInOut::FanOut.for_shape(shape),
            };
            let std = non_linearity.gain() / (fan.max(1) as f64).sqrt();
            match dist {
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                NormalOrUniform::Normal => (0..n)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            }
        }
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn var_builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), self.dtype, Device::Cpu)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("param store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_scalars(&self) -> usize {
        self.vars_with_prefix("").iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().expect("param store poisoned").get(name).cloned()
    }

    /// Variables whose name starts with `prefix`, sorted by name.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.inner
            .lock()
            .expect("param store poisoned")
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars_with_prefix("").into_iter().map(|(_, v)| v).collect()
    }

    /// Copy every `src_prefix*` tensor onto the matching `dst_prefix*` tensor.
    pub fn copy_prefix(&self, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, var) in self.vars_with_prefix(src_prefix) {
            let target = format!("{dst_prefix}{}", &name[src_prefix.len()..]);
            if let Some(dst) = self.get(&target) {
                dst.set(var.as_tensor())?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Snapshot of all parameter values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars_with_prefix("")
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in values {
            match self.get(name) {
                Some(v) => v.set(&t.to_dtype(self.dtype)?)?,
                None => return Err(Error::Checkpoint(format!("unknown parameter `{name}`"))),
            }
        }
        Ok(())
    }

    /// Save all parameters as safetensors with string metadata.
    pub fn save(&self, path: &Path, metadata: BTreeMap<String, String>) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .vars_with_prefix("")
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect();
        let meta: std::collections::HashMap<String, String> = metadata.into_iter().collect();
        safetensors::serialize_to_file(tensors, Some(meta), path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Load parameters saved with [`ParamStore::save`]. Every stored tensor
    /// must already exist in this store with the same shape.
    pub fn load(&self, path: &Path) -> Result<BTreeMap<String, String>> {
        let bytes = std::fs::read(path)?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let metadata: BTreeMap<String, String> = header
            .metadata()
            .clone()
            .map(|m| m.into_iter().collect())
            .unwrap_or_default();
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        for (name, t) in tensors {
            let var = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if var.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    var.shape()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(metadata)
    }
}

impl candle_nn::var_builder::SimpleBackend for ParamStore {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut map = self.inner.lock().expect("param store poisoned");
        if let Some(v) = map.get(name) {
            if v.shape() != &s {
                candle_core::bail!("parameter `{name}` exists with shape {:?}, requested {:?}", v.shape(), s);
            }
            return v.as_tensor().to_dtype(dtype);
        }
        let data = init_values(h, &s, name_seed(self.seed, name));
        let t = Tensor::from_vec(data, s, dev)?.to_dtype(dtype)?;
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        map.insert(name.to_string(), v);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.inner.lock().expect("param store poisoned").get(name) {
            Some(v) => v.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("missing parameter `{name}`"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.inner.lock().expect("param store poisoned").contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let a = ParamStore::new(7, DType::F32);
        let b = ParamStore::new(7, DType::F32);
        let ta = a.var_builder().get_with_hints((3, 4), "w", candle_nn::init::DEFAULT_KAIMING_NORMAL).unwrap();
        // different construction order in b
        b.var_builder().get_with_hints(2, "z", Init::Const(0.0)).unwrap();
        let tb = b.var_builder().get_with_hints((3, 4), "w", candle_nn::init::DEFAULT_KAIMING_NORMAL).unwrap();
        let diff = (ta - tb).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        let a = ParamStore::new(1, DType::F32);
        a.var_builder().get_with_hints((2, 3), "layer.w", Init::Randn { mean: 0.0, stdev: 1.0 }).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("config_hash".to_string(), "abc".to_string());
        a.save(&path, meta).unwrap();

        let b = ParamStore::new(2, DType::F32);
        b.var_builder().get_with_hints((2, 3), "layer.w", Init::Const(0.0)).unwrap();
        let meta = b.load(&path).unwrap();
        assert_eq!(meta.get("config_hash").map(String::as_str), Some("abc"));
        let wa = a.get("layer.w").unwrap();
        let wb = b.get("layer.w").unwrap();
        assert_eq!(
            wa.as_tensor().to_vec2::<f32>().unwrap(),
            wb.as_tensor().to_vec2::<f32>().unwrap()
        );
    }
}
