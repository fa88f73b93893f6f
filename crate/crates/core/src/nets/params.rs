//! Named parameter storage with seeded initialization, and an Adam optimizer
//! whose state can be checkpointed exactly.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±bound`.
    Uniform(f64),
    Normal(f64),
}

impl Init {
    /// He-style uniform bound for a layer followed by a leaky ReLU of `slope`.
    pub fn kaiming(fan_in: usize, slope: f64) -> Self {
        Init::Uniform((6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt())
    }
}

/// Every learnable tensor of every network, keyed by a `/`-separated path.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
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

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Returns the named parameter, creating it on first use. The initial
    /// value depends only on the store seed and the name.
    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(s) => {
                let d = Normal::new(0.0, s).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Names under any of the given network prefixes.
    pub fn names_under(&self, prefixes: &[&str]) -> Vec<String> {
        self.vars
            .keys()
            .filter(|k| prefixes.iter().any(|p| under(k, p)))
            .cloned()
            .collect()
    }

    pub fn binder(&mut self, prefix: &str, trainable: bool) -> Binder<'_> {
        Binder {
            store: self,
            prefix: prefix.to_string(),
            trainable,
        }
    }

    /// SHA-256 over the raw bytes of every parameter under `prefix`.
    pub fn digest(&self, prefix: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.vars.iter().filter(|(k, _)| under(k, prefix)) {
            h.update(name.as_bytes());
            h.update(tensor_bytes(var.as_tensor())?);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn export(&self, ckpt: &mut Checkpoint) -> Result<()> {
        for (name, var) in &self.vars {
            ckpt.put_tensor(&format!("param/{name}"), var.as_tensor())?;
        }
        Ok(())
    }

    /// Loads every parameter stored in `ckpt`, overwriting existing values
    /// in place so that bound networks observe the change.
    pub fn import(&mut self, ckpt: &Checkpoint) -> Result<usize> {
        let mut count = 0;
        for name in ckpt.names_with_prefix("param/") {
            let key = &name["param/".len()..];
            let t = ckpt.tensor(&name, &self.device)?.to_dtype(self.dtype)?;
            match self.vars.get(key) {
                Some(v) => {
                    if v.dims() != t.dims() {
                        return Err(Error::Checkpoint(format!(
                            "parameter {key}: stored shape {:?} vs network {:?}",
                            t.dims(),
                            v.dims()
                        )));
                    }
                    v.set(&t)?;
                }
                None => {
                    self.vars.insert(key.to_string(), Var::from_tensor(&t)?);
                }
            }
            count += 1;
        }
        Ok(count)
    }
}

fn under(name: &str, prefix: &str) -> bool {
    name == prefix || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'/'))
}

pub(crate) fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

/// Creates parameters under a path prefix. Frozen binders hand out detached
/// tensors, so nothing downstream can produce a gradient for them.
pub struct Binder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    trainable: bool,
}

impl Binder<'_> {
    pub fn sub(&mut self, name: &str) -> Binder<'_> {
        Binder {
            prefix: format!("{}/{name}", self.prefix),
            trainable: self.trainable,
            store: self.store,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let var = self
            .store
            .get_or_init(&format!("{}/{name}", self.prefix), shape, init)?;
        Ok(if self.trainable {
            var.as_tensor().clone()
        } else {
            var.as_detached_tensor()
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled when their global L2 norm exceeds this; 0 disables.
    #[serde(default)]
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.0,
        }
    }
}

/// Adam over a fixed set of parameter names.
pub struct Adam {
    pub name: String,
    pub cfg: AdamConfig,
    params: Vec<String>,
    steps: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(name: &str, store: &ParamStore, params: Vec<String>, cfg: AdamConfig) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for p in &params {
            let var = store
                .get(p)
                .ok_or_else(|| Error::Config(format!("optimizer {name}: unknown parameter {p}")))?;
            let z = var.as_tensor().zeros_like()?;
            moments.insert(p.clone(), (z.clone(), z));
        }
        Ok(Self {
            name: name.to_string(),
            cfg,
            params,
            steps: 0,
            moments,
        })
    }

    pub fn params(&self) -> &[String] {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update with learning rate `lr`. Parameters without a gradient keep
    /// their value and moments.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);

        let mut scale = 1.0;
        if self.cfg.clip_norm > 0.0 {
            let mut sq = 0.0;
            for p in &self.params {
                if let Some(g) = grads.get(store.get(p).unwrap().as_tensor()) {
                    sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                }
            }
            let norm = sq.sqrt();
            if norm > self.cfg.clip_norm {
                scale = self.cfg.clip_norm / norm;
            }
        }

        for p in &self.params {
            let var = store.get(p).unwrap();
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // leaf gradients can still carry backprop ops; moments must not keep the step's graph alive
            let g = if scale != 1.0 { (g * scale)? } else { g.clone() }.detach();
            let (m, v) = self.moments.get_mut(p).unwrap();
            *m = ((&*m * b1)? + (&g * (1.0 - b1))?)?.detach();
            *v = ((&*v * b2)? + (g.sqr()? * (1.0 - b2))?)?.detach();
            let denom = ((&*v / c2)?.sqrt()? + self.cfg.eps)?;
            let update = ((&*m / c1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
        }
        Ok(())
    }

    pub fn export(&self, ckpt: &mut Checkpoint) -> Result<()> {
        for (p, (m, v)) in &self.moments {
            ckpt.put_tensor(&format!("adam/{}/m/{p}", self.name), m)?;
            ckpt.put_tensor(&format!("adam/{}/v/{p}", self.name), v)?;
        }
        ckpt.meta
            .insert(format!("adam/{}/steps", self.name), self.steps.into());
        Ok(())
    }

    pub fn import(&mut self, ckpt: &Checkpoint, device: &Device) -> Result<()> {
        let key = format!("adam/{}/steps", self.name);
        self.steps = ckpt
            .meta
            .get(&key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
        for (p, (m, v)) in self.moments.iter_mut() {
            let dtype = m.dtype();
            *m = ckpt
                .tensor(&format!("adam/{}/m/{p}", self.name), device)?
                .to_dtype(dtype)?;
            *v = ckpt
                .tensor(&format!("adam/{}/v/{p}", self.name), device)?
                .to_dtype(dtype)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamStore::new(7, DType::F32);
        let mut b = ParamStore::new(7, DType::F32);
        a.get_or_init("x/w", &[3, 4], Init::Uniform(1.0)).unwrap();
        b.get_or_init("y/w", &[2], Init::Uniform(1.0)).unwrap();
        b.get_or_init("x/w", &[3, 4], Init::Uniform(1.0)).unwrap();
        assert_eq!(a.digest("x").unwrap(), b.digest("x").unwrap());
        let mut c = ParamStore::new(8, DType::F32);
        c.get_or_init("x/w", &[3, 4], Init::Uniform(1.0)).unwrap();
        assert_ne!(a.digest("x").unwrap(), c.digest("x").unwrap());
    }

    #[test]
    fn shape_conflict_is_an_error() {
        let mut s = ParamStore::new(0, DType::F32);
        s.get_or_init("w", &[2], Init::Zeros).unwrap();
        assert!(s.get_or_init("w", &[3], Init::Zeros).is_err());
    }

    #[test]
    fn frozen_binder_blocks_gradients() {
        let mut s = ParamStore::new(0, DType::F64);
        let live = s.binder("a", true).param("w", &[3], Init::Ones).unwrap();
        let frozen = s.binder("b", false).param("w", &[3], Init::Ones).unwrap();
        let loss = (live + frozen).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(s.get("a/w").unwrap().as_tensor()).is_some());
        assert!(grads.get(s.get("b/w").unwrap().as_tensor()).is_none());
    }

    #[test]
    fn prefixes_match_whole_segments() {
        let mut s = ParamStore::new(0, DType::F32);
        for n in ["e_mot/w", "e_mot2/w", "e_mot/sub/b"] {
            s.get_or_init(n, &[1], Init::Zeros).unwrap();
        }
        assert_eq!(s.names_under(&["e_mot"]), vec!["e_mot/sub/b", "e_mot/w"]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut s = ParamStore::new(0, DType::F64);
        let w = s.binder("q", true).param("w", &[4], Init::Uniform(2.0)).unwrap();
        let mut opt = Adam::new("q", &s, s.names_under(&["q"]), AdamConfig::default()).unwrap();
        let target = Tensor::new(&[1.0f64, -2.0, 0.5, 3.0], &Device::Cpu).unwrap();
        for _ in 0..2000 {
            let loss = (&w - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&s, &loss.backward().unwrap(), 0.05).unwrap();
        }
        let err = (&w - &target).unwrap().abs().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn moments_do_not_hold_the_graph() {
        let mut s = ParamStore::new(1, DType::F64);
        let w = s.get_or_init("w", &[3, 3], Init::Normal(1.0)).unwrap();
        let x = s.get_or_init("x", &[3, 3], Init::Normal(1.0)).unwrap();
        let mut opt = Adam::new("a", &s, vec!["w".into(), "x".into()], AdamConfig::default()).unwrap();
        // a product of two variables gives gradients that are themselves tracked
        let loss = w.as_tensor().matmul(x.as_tensor()).unwrap().sqr().unwrap().sum_all().unwrap();
        opt.step(&s, &loss.backward().unwrap(), 0.1).unwrap();
        for (m, v) in opt.moments.values() {
            assert!(!m.track_op() && !v.track_op());
        }
    }
}
