//! AdamW: moment-estimate updates with decoupled weight decay.

use std::collections::BTreeMap;

/// Moment hyperparameters follow the standard published defaults; the
/// recipe's table names only the optimizer family.
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over named parameter/gradient pairs. With `lr == 0` the
    /// parameters are bitwise unchanged (moments still advance).
    pub fn step(&mut self, lr: f64, params: &mut [(String, &mut Vec<f64>)], grads: &[(String, Vec<f64>)]) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for ((pname, p), (gname, g)) in params.iter_mut().zip(grads) {
            debug_assert_eq!(pname, gname, "parameter/gradient order must agree");
            let m = self
                .m
                .entry(pname.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            let v = self
                .v
                .entry(pname.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + EPS) + self.weight_decay * p[i]);
            }
        }
    }
}
