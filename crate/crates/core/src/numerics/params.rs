use rand::Rng;
use rand_distr::StandardNormal;

use super::{Checkpoint, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub trainable: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| F::of(std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, F::of(value)))
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Appends every parameter to a checkpoint, prefixing names with `scope`.
    pub fn save_into(&self, ckpt: &mut Checkpoint, scope: &str) {
        for p in &self.params {
            ckpt.insert(format!("{scope}{}", p.name), p.value.cast());
        }
    }

    /// Overwrites parameter values from a checkpoint; every parameter must be
    /// present with a matching shape.
    pub fn load_from(&mut self, ckpt: &Checkpoint, scope: &str) -> Result<()> {
        for p in &mut self.params {
            let key = format!("{scope}{}", p.name);
            let t = ckpt.get(&key).ok_or_else(|| Error::MissingArray(key.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "array {key} has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay and global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Vec<F>]) -> Result<f64> {
        if grads.len() != store.len() {
            return Err(Error::shape(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = store.iter().map(|p| vec![F::zero(); p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient norm is {norm} at step {}",
                self.step
            )));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let lr_t = F::of(self.lr * bc2.sqrt() / bc1);
        let eps = F::of(self.eps);
        let decay = F::of(1.0 - self.lr * self.weight_decay);
        let scale = F::of(scale);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i][j] * scale;
                m[j] = b1 * m[j] + (F::one() - b1) * g;
                v[j] = b2 * v[j] + (F::one() - b2) * g * g;
                *w = *w * decay - lr_t * m[j] / (v[j].sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

/// Element-wise sum of per-shard parameter gradients.
pub fn sum_grads<F: Real>(mut shards: Vec<Vec<Vec<F>>>) -> Vec<Vec<F>> {
    let Some(mut total) = shards.pop() else {
        return Vec::new();
    };
    for shard in shards {
        for (t, s) in total.iter_mut().zip(shard) {
            for (a, b) in t.iter_mut().zip(s) {
                *a += b;
            }
        }
    }
    total
}

/// Scales every gradient in place.
pub fn scale_grads<F: Real>(grads: &mut [Vec<F>], c: f64) {
    let c = F::of(c);
    for g in grads.iter_mut().flatten() {
        *g *= c;
    }
}

/// Linear warmup to `base`, then cosine decay to `base * floor` at `total`.
pub fn lr_at(step: u64, total: u64, base: f64, warmup: u64, floor: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let frac = ((step - warmup) as f64 / span).min(1.0);
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}
