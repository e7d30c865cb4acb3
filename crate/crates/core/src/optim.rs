//! Named parameters and SGD with momentum, weight decay and a step schedule.

use serde::{Deserialize, Serialize};

use crate::error::{PctError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable tensor plus its momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub momentum: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let momentum = Tensor::zeros(value.shape());
        Self {
            value: value.with_requires_grad(true),
            momentum,
        }
    }
}

/// Insertion-ordered parameter registry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.params.push(Param::new(value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param)> {
        self.names
            .iter()
            .zip(&self.params)
            .enumerate()
            .map(|(i, (n, p))| (ParamId(i), n.as_str(), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.set_grad(None);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.round_to_f32();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, multiplier)`: from `epoch` on, the base rate is multiplied by
    /// the product of every multiplier reached so far.
    pub schedule: Vec<(usize, f64)>,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(PctError::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PctError::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(PctError::Config("weight decay must be nonnegative".into()));
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(PctError::Config(
                "schedule epochs must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.learning_rate, |lr, (_, mult)| lr * mult)
    }
}

/// One momentum-SGD update over `ids`:
/// `v ← μ·v + g + λ·w`, `w ← w − lr(epoch)·v`, then the gradient is cleared.
pub fn sgd_step(
    store: &mut ParamStore,
    ids: &[ParamId],
    cfg: &OptimizerConfig,
    epoch: usize,
) -> Result<()> {
    if let Some(&missing) = ids.iter().find(|&&id| store.get(id).value.grad().is_none()) {
        return Err(PctError::Contract(format!(
            "parameter {} has no gradient",
            store.name(missing)
        )));
    }
    let lr = cfg.lr_at(epoch);
    for &id in ids {
        let p = store.get_mut(id);
        let grad = p.value.take_grad().expect("checked above");
        let velocity = p.momentum.data_mut();
        for ((v, g), w) in velocity.iter_mut().zip(&grad).zip(p.value.data()) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * w;
        }
        for (w, v) in p.value.data_mut().iter_mut().zip(p.momentum.data()) {
            *w -= lr * v;
        }
    }
    Ok(())
}

/// Rescales the gradients of `ids` so that their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping. Parameters without a
/// gradient are skipped.
pub fn clip_grad_norm(store: &mut ParamStore, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = ids
        .iter()
        .filter_map(|&id| store.get(id).value.grad())
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for &id in ids {
            let p = store.get_mut(id);
            if let Some(g) = p.value.take_grad() {
                p.value.set_grad(Some(g.into_iter().map(|v| v * k).collect()));
            }
        }
    }
    norm
}
