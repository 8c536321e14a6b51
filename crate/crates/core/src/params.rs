//! Named parameter registry with batch-norm running statistics.

use std::collections::BTreeMap;

use crate::autodiff::{BatchNormState, BatchStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    /// Frozen parameters are bound as constants and skipped by the optimizer.
    pub frozen: bool,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param {
            value,
            grad: None,
            frozen: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    params: BTreeMap<String, Param>,
    batchnorm: BTreeMap<String, BatchNormState>,
}

/// Tape handles of every parameter bound for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Gradient of a loss with respect to every trainable parameter, keyed by name.
pub type ParamGrads = BTreeMap<String, Tensor>;

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn insert_batchnorm(&mut self, name: impl Into<String>, state: BatchNormState) {
        self.batchnorm.insert(name.into(), state);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn batchnorm(&self, name: &str) -> Result<&BatchNormState> {
        self.batchnorm
            .get(name)
            .ok_or_else(|| Error::MissingParam(format!("{name} (batchnorm state)")))
    }

    pub fn batchnorm_mut(&mut self, name: &str) -> Result<&mut BatchNormState> {
        self.batchnorm
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(format!("{name} (batchnorm state)")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn batchnorm_iter(&self) -> impl Iterator<Item = (&str, &BatchNormState)> {
        self.batchnorm.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Places every parameter on `tape`; frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), !p.frozen)))
            .collect();
        Bindings { vars }
    }

    /// Places every parameter on `tape` as a constant (inference).
    pub fn bind_constants(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), false)))
            .collect();
        Bindings { vars }
    }

    /// Extracts per-parameter gradients after a backward pass. Trainable
    /// parameters the loss does not reach get zero gradients.
    pub fn collect_grads(&self, bindings: &Bindings, grads: &Gradients) -> ParamGrads {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(name, p)| {
                let g = bindings
                    .vars
                    .get(name)
                    .and_then(|&v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }

    /// Adds `grads` into each parameter's accumulator.
    pub fn accumulate_grads(&mut self, grads: &ParamGrads) {
        for (name, g) in grads {
            if let Some(p) = self.params.get_mut(name) {
                match &mut p.grad {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn apply_batch_stats(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (name, stats) in updates {
            self.batchnorm_mut(name)?.update(stats);
        }
        Ok(())
    }

    /// Copy with every tensor and running statistic rounded through `f32`,
    /// the checkpoint storage precision.
    pub fn rounded_to_f32(&self) -> ModelParams {
        let params = self
            .params
            .iter()
            .map(|(k, p)| {
                let mut q = Param::new(p.value.round_to_f32());
                q.frozen = p.frozen;
                (k.clone(), q)
            })
            .collect();
        let batchnorm = self
            .batchnorm
            .iter()
            .map(|(k, s)| {
                let round = |v: &Vec<f64>| v.iter().map(|&x| x as f32 as f64).collect();
                let state = BatchNormState {
                    running_mean: round(&s.running_mean),
                    running_var: round(&s.running_var),
                    momentum: s.momentum,
                    eps: s.eps,
                };
                (k.clone(), state)
            })
            .collect();
        ModelParams { params, batchnorm }
    }
}
