//! Adam optimizer over a named parameter store. Moment accumulators live in
//! f64 regardless of the training scalar, so tiny squared gradients do not
//! flush to zero.

use std::collections::BTreeMap;

use anyhow::Result;
use tctr_core::params::ParamStore;
use tctr_core::scalar::Scalar;
use tctr_core::tensor::Tensor;

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update from the gradients currently held by the store.
    pub fn step<S: Scalar>(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let value = store.value(&name)?;
            let dims = value.dims().to_vec();
            let n = value.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let grad = store.grad(&name)?;
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                let g = grad.data()[i].to_f64().unwrap();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let x = value.data()[i].to_f64().unwrap();
                next.push(S::lit(x - lr * m_hat / (v_hat.sqrt() + self.eps)));
            }
            store.set_value(&name, Tensor::from_vec(&dims, next)?)?;
        }
        Ok(())
    }
}
