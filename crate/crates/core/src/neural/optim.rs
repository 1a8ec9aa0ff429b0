use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Checkpoint, NeuralError, Tensor};

/// Named parameters plus AdamW moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    step: u64,
    seed: u64,
    frozen: BTreeSet<String>,
    trainable_prefixes: Option<Vec<String>>,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            step: 0,
            seed,
            frozen: BTreeSet::new(),
            trainable_prefixes: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Deterministic generator for initializing a named parameter.
    pub fn init_rng(&self, name: &str) -> ChaCha8Rng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(self.seed ^ h)
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.first.insert(name.to_string(), Tensor::zeros(value.shape()));
        self.second.insert(name.to_string(), Tensor::zeros(value.shape()));
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Restricts training to parameters whose names start with one of the
    /// given prefixes; `None` makes every parameter trainable again.
    pub fn set_trainable_prefixes(&mut self, prefixes: Option<Vec<String>>) {
        self.trainable_prefixes = prefixes;
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        if self.frozen.contains(name) {
            return false;
        }
        match &self.trainable_prefixes {
            None => true,
            Some(p) => p.iter().any(|pre| name.starts_with(pre.as_str())),
        }
    }

    /// One decoupled-weight-decay Adam update. Gradients are validated in
    /// full before any parameter is touched.
    pub fn optimizer_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        opt: &AdamW,
        lr: f64,
        weight_decay: f64,
    ) -> Result<(), NeuralError> {
        for (name, g) in grads {
            let p = self.params.get(name).ok_or_else(|| NeuralError::MissingParameter(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(NeuralError::Shape {
                    op: "optimizer_step",
                    detail: format!("{}: param {:?} grad {:?}", name, p.shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(NeuralError::Divergence(format!("non-finite gradient for `{}`", name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        for (name, g) in grads {
            if !self.is_trainable(name) {
                continue;
            }
            let p = self.params.get_mut(name).expect("validated");
            let m = self.first.get_mut(name).expect("moment");
            let v = self.second.get_mut(name).expect("moment");
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data())
            {
                *mv = opt.beta1 * *mv + (1.0 - opt.beta1) * gv;
                *vv = opt.beta2 * *vv + (1.0 - opt.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + opt.eps) + weight_decay * *pv);
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, metadata: BTreeMap<String, String>) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (k, v) in &self.params {
            tensors.insert(format!("param/{}", k), v.clone());
        }
        for (k, v) in &self.first {
            tensors.insert(format!("adam.m/{}", k), v.clone());
        }
        for (k, v) in &self.second {
            tensors.insert(format!("adam.v/{}", k), v.clone());
        }
        let mut metadata = metadata;
        metadata.insert("store.step".into(), self.step.to_string());
        metadata.insert("store.seed".into(), self.seed.to_string());
        Checkpoint { metadata, tensors }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NeuralError> {
        let parse = |key: &str| -> Result<u64, NeuralError> {
            ckpt.metadata
                .get(key)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| NeuralError::Checkpoint { offset: 0, detail: format!("missing metadata `{}`", key) })
        };
        let mut store = Self::new(parse("store.seed")?);
        store.step = parse("store.step")?;
        for (k, v) in &ckpt.tensors {
            if let Some(name) = k.strip_prefix("param/") {
                store.params.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix("adam.m/") {
                store.first.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix("adam.v/") {
                store.second.insert(name.to_string(), v.clone());
            }
        }
        for name in store.params.keys() {
            let shape = store.params[name].shape().to_vec();
            for buf in [&store.first, &store.second] {
                match buf.get(name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    _ => {
                        return Err(NeuralError::Checkpoint {
                            offset: 0,
                            detail: format!("optimizer state for `{}` missing or misshapen", name),
                        })
                    }
                }
            }
        }
        Ok(store)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Linear warmup to `base_lr` over `warmup_steps`, then cosine decay to zero
/// at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
