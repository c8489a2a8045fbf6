//! Finite-difference verification of analytic gradients.
//!
//! Runs at f64: 32-bit central differences cannot reliably resolve the
//! tolerances this harness enforces.

use crate::error::{BicoError, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// A deterministic scalar loss over a parameter store, with analytic
/// gradients for its trainable parameters.
pub trait CheckedLoss {
    fn loss(&self, store: &ParamStore<f64>) -> Result<f64>;
    fn gradients(&self, store: &ParamStore<f64>) -> Result<BTreeMap<String, Tensor<f64>>>;
}

/// Adapter building a `CheckedLoss` from two closures.
pub struct FnLoss<L, G> {
    pub loss_fn: L,
    pub grad_fn: G,
}

impl<L, G> CheckedLoss for FnLoss<L, G>
where
    L: Fn(&ParamStore<f64>) -> Result<f64>,
    G: Fn(&ParamStore<f64>) -> Result<BTreeMap<String, Tensor<f64>>>,
{
    fn loss(&self, store: &ParamStore<f64>) -> Result<f64> {
        (self.loss_fn)(store)
    }
    fn gradients(&self, store: &ParamStore<f64>) -> Result<BTreeMap<String, Tensor<f64>>> {
        (self.grad_fn)(store)
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub epsilon: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.per_param {
            writeln!(
                f,
                "{:<28} max_rel_err={:.3e}  (coord {}, analytic {:+.6e}, numeric {:+.6e}, {} checked)",
                p.name, p.max_rel_err, p.worst_coord, p.worst_analytic, p.worst_numeric, p.coords_checked
            )?;
        }
        write!(f, "overall max relative error: {:.3e}", self.max_rel_err())
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// For `sample_count` randomly selected coordinates of every trainable
/// parameter, compare the analytic gradient against the central difference
/// (loss(x+eps) - loss(x-eps)) / (2 eps).
pub fn finite_diff_check(
    loss: &dyn CheckedLoss,
    store: &mut ParamStore<f64>,
    epsilon: f64,
    sample_count: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let analytic = loss.gradients(store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = store.trainable_names();
    let mut per_param = Vec::new();

    for name in names {
        let numel = store.get(&name).numel();
        let coords: Vec<usize> = if numel <= sample_count {
            (0..numel).collect()
        } else {
            // sample without replacement
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < sample_count {
                picked.insert(rng.gen_range(0..numel));
            }
            picked.into_iter().collect()
        };

        let a_tensor = analytic
            .get(&name)
            .ok_or_else(|| BicoError::MissingGradient { name: name.clone() })?;

        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_coord: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            coords_checked: coords.len(),
        };

        for &ci in &coords {
            let orig = store.get(&name).data()[ci];
            store.get_mut(&name).data_mut()[ci] = orig + epsilon;
            let lp = loss.loss(store)?;
            store.get_mut(&name).data_mut()[ci] = orig - epsilon;
            let lm = loss.loss(store)?;
            store.get_mut(&name).data_mut()[ci] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(BicoError::NonFiniteLoss {
                    context: format!("perturbing parameter `{}` coordinate {}", name, ci),
                });
            }
            let numeric = (lp - lm) / (2.0 * epsilon);
            let a = a_tensor.data()[ci];
            let rel = rel_err(a, numeric);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_coord = ci;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        per_param.push(check);
    }

    Ok(GradCheckReport {
        per_param,
        epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::param::StoreNodes;

    fn linear_loss() -> impl CheckedLoss {
        // L(theta) = sum(c .* theta), exact for central differences
        FnLoss {
            loss_fn: |store: &ParamStore<f64>| {
                let t = store.get("theta");
                Ok(t.data().iter().enumerate().map(|(i, &v)| (i as f64 + 0.5) * v).sum())
            },
            grad_fn: |store: &ParamStore<f64>| {
                let t = store.get("theta");
                let g = Tensor::from_fn(t.dims(), |i| i as f64 + 0.5);
                let mut m = BTreeMap::new();
                m.insert("theta".to_string(), g);
                Ok(m)
            },
        }
    }

    #[test]
    fn linear_loss_is_exact() {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::from_fn(&[2, 3], |i| 0.1 * i as f64), true);
        let report = finite_diff_check(&linear_loss(), &mut store, 1e-5, 16, 0).unwrap();
        assert!(report.max_rel_err() <= 1e-9, "{}", report);
    }

    #[test]
    fn independent_parameter_has_zero_both_ways() {
        let loss = FnLoss {
            loss_fn: |store: &ParamStore<f64>| Ok(store.get("used").scalar_value().powi(2)),
            grad_fn: |store: &ParamStore<f64>| {
                let mut m = BTreeMap::new();
                m.insert(
                    "used".to_string(),
                    Tensor::scalar(2.0 * store.get("used").scalar_value()),
                );
                m.insert("unused".to_string(), Tensor::zeros(&[1, 1]));
                Ok(m)
            },
        };
        let mut store = ParamStore::new();
        store.insert("used", Tensor::scalar(0.7), true);
        store.insert("unused", Tensor::scalar(3.0), true);
        let report = finite_diff_check(&loss, &mut store, 1e-5, 4, 0).unwrap();
        let unused = report.per_param.iter().find(|p| p.name == "unused").unwrap();
        assert_eq!(unused.worst_analytic, 0.0);
        assert!(unused.worst_numeric.abs() < 1e-10);
        assert!(report.passes(1e-6));
    }

    #[test]
    fn non_finite_loss_names_parameter_and_coordinate() {
        let loss = FnLoss {
            loss_fn: |store: &ParamStore<f64>| {
                let v = store.get("theta").data()[1];
                Ok(if v > 1.0 { f64::NAN } else { v })
            },
            grad_fn: |_: &ParamStore<f64>| {
                let mut m = BTreeMap::new();
                m.insert("theta".to_string(), Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
                Ok(m)
            },
        };
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap(), true);
        let err = finite_diff_check(&loss, &mut store, 0.5, 2, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("theta") && msg.contains('1'), "{msg}");
    }

    #[test]
    fn graph_loss_roundtrip_through_checker() {
        // a small composite graph checked end to end via the harness
        let build = |store: &ParamStore<f64>| -> Result<(f64, BTreeMap<String, Tensor<f64>>)> {
            let mut g: Graph<f64> = Graph::new();
            let nodes = StoreNodes::bind(&mut g, store);
            let x = g.leaf(Tensor::from_fn(&[3, 4], |i| (i as f64) * 0.17 - 1.0));
            let h = g.linear(x, nodes.id("w"), nodes.id("b"))?;
            let h = g.gelu(h);
            let target = g.leaf(Tensor::from_fn(&[3, 5], |i| (i as f64) * 0.05));
            let loss = g.mse(h, target)?;
            let grads = g.backward(loss)?;
            Ok((
                g.value(loss).scalar_value(),
                nodes.grads(&g, &grads, store),
            ))
        };
        let loss = FnLoss {
            loss_fn: move |s: &ParamStore<f64>| Ok(build(s)?.0),
            grad_fn: move |s: &ParamStore<f64>| Ok(build(s)?.1),
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        store.insert("w", Tensor::randn(&[4, 5], 0.6, &mut rng), true);
        store.insert("b", Tensor::randn(&[1, 5], 0.2, &mut rng), true);
        let report = finite_diff_check(&loss, &mut store, 1e-5, 8, 1).unwrap();
        assert!(report.passes(1e-6), "{}", report);
    }
}
