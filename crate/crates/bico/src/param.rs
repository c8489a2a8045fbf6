//! Named parameter store with per-parameter trainable flags and Adam state.

use crate::error::{BicoError, Result};
use crate::graph::{Graph, Gradients, ValueId};
use crate::tensor::{sc, Scalar, Tensor};
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct Param<S: Scalar> {
    pub value: Tensor<S>,
    pub trainable: bool,
    m: Tensor<S>,
    v: Tensor<S>,
    step: u64,
}

impl<S: Scalar> Param<S> {
    fn new(value: Tensor<S>, trainable: bool) -> Self {
        let m = Tensor::zeros(value.dims());
        let v = Tensor::zeros(value.dims());
        Param {
            value,
            trainable,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Map name -> parameter. BTreeMap keeps iteration (and hashing) order
/// deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar> {
    params: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>, trainable: bool) {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        self.params.insert(name.to_string(), Param::new(value, trainable));
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        self.params.remove(name).map(|p| p.value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).map(|p| p.trainable).unwrap_or(false)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .trainable = trainable;
    }

    /// Set the trainable flag of every parameter from a predicate on its name.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = pred(name);
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable_where(|_| false);
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, p) in &self.params {
            out.insert(name, p.value.cast::<T>(), p.trainable);
        }
        out
    }

    /// Exact equality of all parameter values (dims and bits).
    pub fn values_bit_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().all(|(k, p)| {
                other
                    .params
                    .get(k)
                    .map(|q| p.value.bit_eq(&q.value))
                    .unwrap_or(false)
            })
    }
}

/// Graph-side handle to a store: every parameter inserted as a leaf, with
/// `requires_grad` tracking its trainable flag.
pub struct StoreNodes {
    pub ids: BTreeMap<String, ValueId>,
}

impl StoreNodes {
    pub fn bind<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>) -> Self {
        let mut ids = BTreeMap::new();
        for (name, p) in store.iter() {
            let id = if p.trainable {
                g.param(p.value.clone())
            } else {
                g.leaf(p.value.clone())
            };
            ids.insert(name.to_string(), id);
        }
        StoreNodes { ids }
    }

    /// Bind with every parameter gradient-enabled regardless of flags
    /// (used by the gradient checker).
    pub fn bind_all_trainable<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>) -> Self {
        let mut ids = BTreeMap::new();
        for (name, p) in store.iter() {
            ids.insert(name.to_string(), g.param(p.value.clone()));
        }
        StoreNodes { ids }
    }

    pub fn id(&self, name: &str) -> ValueId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound in graph"))
    }

    /// Collect gradients for the store's trainable parameters. A parameter
    /// the loss does not depend on gets an explicit zero gradient.
    pub fn grads<S: Scalar>(
        &self,
        g: &Graph<S>,
        grads: &Gradients<S>,
        store: &ParamStore<S>,
    ) -> BTreeMap<String, Tensor<S>> {
        let mut out = BTreeMap::new();
        for (name, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            let id = self.id(name);
            let gt = grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(id).dims()));
            out.insert(name.to_string(), gt);
        }
        out
    }
}

/// Standard bias-corrected Adam update, applied only to trainable
/// parameters. Non-trainable parameters are never touched, even when a
/// gradient is supplied for them.
pub fn adam_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &BTreeMap<String, Tensor<S>>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    for (name, p) in store.params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let g = grads
            .get(name)
            .ok_or_else(|| BicoError::MissingGradient { name: name.clone() })?;
        if g.dims() != p.value.dims() {
            return Err(BicoError::dim(
                "adam_step",
                format!(
                    "gradient dims {:?} != parameter `{}` dims {:?}",
                    g.dims(),
                    name,
                    p.value.dims()
                ),
            ));
        }
        p.step += 1;
        let t = p.step;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        let (b1, b2) = (sc::<S>(beta1), sc::<S>(beta2));
        let (ob1, ob2) = (sc::<S>(1.0 - beta1), sc::<S>(1.0 - beta2));
        let inv_bc1 = sc::<S>(1.0 / bc1);
        let inv_bc2 = sc::<S>(1.0 / bc2);
        let lr_s = sc::<S>(lr);
        let eps_s = sc::<S>(eps);
        let md = p.m.data_mut();
        let vd = p.v.data_mut();
        let pd = p.value.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + ob1 * gi;
            vd[i] = b2 * vd[i] + ob2 * gi * gi;
            let mhat = md[i] * inv_bc1;
            let vhat = vd[i] * inv_bc2;
            pd[i] = pd[i] - lr_s * mhat / (vhat.sqrt() + eps_s);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_matches_hand_evaluation() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("theta", Tensor::scalar(0.0), true);
        let mut grads = BTreeMap::new();
        grads.insert("theta".to_string(), Tensor::scalar(1.0));
        adam_step(&mut store, &grads, 1e-4, 0.9, 0.999, 1e-8).unwrap();
        let got = store.get("theta").scalar_value();
        // m_hat = 1, v_hat = 1, theta' = -lr / (1 + eps)
        assert!(
            (got - (-9.99999990e-5)).abs() <= 1e-12,
            "theta' = {got:e}"
        );
        assert_eq!(store.params["theta"].step, 1);
    }

    #[test]
    fn frozen_parameter_never_moves() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("frozen", Tensor::scalar(5.0), false);
        let mut grads = BTreeMap::new();
        grads.insert("frozen".to_string(), Tensor::scalar(123.0));
        adam_step(&mut store, &grads, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(store.get("frozen").scalar_value(), 5.0);
        assert_eq!(store.params["frozen"].step, 0);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", Tensor::full(&[2, 2], 1.5), true);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[2, 2]));
        adam_step(&mut store, &grads, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert!(store.get("w").bit_eq(&Tensor::full(&[2, 2], 1.5)));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0), true);
        let grads = BTreeMap::new();
        let err = adam_step(&mut store, &grads, 0.1, 0.9, 0.999, 1e-8).unwrap_err();
        assert!(err.to_string().contains("w"));
    }
}
