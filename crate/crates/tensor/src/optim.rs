use crate::params::{ParamGrads, ParamStore};
use crate::real::Real;

/// AdamW with decoupled weight decay. Decay is applied to matrices only
/// (rank >= 2); biases, norm gains and tokens are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<F: Real>(&mut self, store: &mut ParamStore<F>, grads: &ParamGrads<F>) {
        if self.m.len() != store.len() {
            self.m = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (k, (x, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi.to_f64_lossy();
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gi;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                let mut xv = x.to_f64_lossy();
                xv -= self.lr * decay * xv;
                xv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                *x = F::from_f64_lossy(xv);
            }
        }
    }
}
