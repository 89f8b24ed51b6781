use crate::error::{Error, Result};
use crate::model::ParameterStore;
use crate::nn::Tensor;

/// Adam with bias correction. Moments are kept per parameter in store order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn check_layout(&self, store: &ParameterStore) -> Result<()> {
        let ok = self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .all(|(id, p)| self.m[id.0].shape() == p.value.shape() && self.v[id.0].shape() == p.value.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::Format("optimizer state does not match the parameter layout".into()))
        }
    }

    /// One update from the gradients in `store`. Frozen parameters and their
    /// moments are left untouched.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) -> Result<()> {
        self.check_layout(store)?;
        for p in store.iter_mut().filter(|p| p.trainable) {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (k, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let g = p.grad.data();
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales trainable gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}
