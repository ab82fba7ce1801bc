use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Deref;

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::{invalid, Result};
use crate::gradcheck::relative_error;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return invalid("param_store", format!("duplicate parameter name {name}"));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push((name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].0
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same parameters, converted element type. Ids stay valid.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradients for every parameter of a store, aligned by [`ParamId`].
#[derive(Debug, Clone)]
pub struct ParamGrads<F> {
    pub grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> ParamGrads<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|x| {
                let v = x.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            let s = F::from_f64_lossy(max_norm / norm);
            for t in self.grads.iter_mut().flatten() {
                t.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }
}

/// One forward/backward pass over a parameter store.
///
/// Parameters are bound to tape leaves lazily on first use.
pub struct Session<'s, F: Real> {
    tape: Tape<F>,
    store: &'s ParamStore<F>,
    bound: RefCell<Vec<Option<Var>>>,
    trainable: bool,
}

impl<'s, F: Real> Deref for Session<'s, F> {
    type Target = Tape<F>;

    fn deref(&self) -> &Tape<F> {
        &self.tape
    }
}

impl<'s, F: Real> Session<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable: true,
        }
    }

    /// Session whose parameters are recorded as constants.
    pub fn inference(store: &'s ParamStore<F>) -> Self {
        Self {
            trainable: false,
            ..Self::new(store)
        }
    }

    pub fn tape(&self) -> &Tape<F> {
        &self.tape
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return Ok(v);
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.trainable)?;
        self.bound.borrow_mut()[id.0] = Some(v);
        Ok(v)
    }

    pub fn backward(&self, loss: Var) -> Result<ParamGrads<F>> {
        let g = self.tape.backward(loss)?;
        let grads = self
            .bound
            .borrow()
            .iter()
            .map(|b| b.map(|v| g.get(v)))
            .collect();
        Ok(ParamGrads { grads })
    }
}

/// Central-difference check of the gradients of `loss` with respect to the
/// parameters in `store`. At most `max_coords` randomly chosen coordinates of
/// each parameter tensor are probed (all of them when `None`).
pub fn grad_check_params(
    store: &ParamStore<f64>,
    loss: impl Fn(&Session<f64>) -> Result<Var>,
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<f64> {
    let session = Session::new(store);
    let out = loss(&session)?;
    let grads = session.backward(out)?;
    let mut probe = store.clone();
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let sess = Session::inference(s);
        let v = loss(&sess)?;
        Ok(sess.value(v).item())
    };
    let mut worst = 0f64;
    for id in store.ids() {
        let n = store.get(id).len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let x0 = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x0 + eps;
            let fp = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0 - eps;
            let fm = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0;
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(analytic, (fp - fm) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
