use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{add_linear, fourier_features};
use crate::params::{ParamGroup, ParamStore};
use crate::tape::{Graph, Var};

const FREQS: [f64; 8] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
const HIDDEN: usize = 32;

/// Adaptive loss weight `w(t)`: Fourier time features, one SiLU hidden layer,
/// scalar output. The output layer starts at zero so `w = 0` initially.
#[derive(Debug, Clone)]
pub struct WeightHead {
    store: ParamStore,
    hidden: (usize, usize),
    out: (usize, usize),
}

impl WeightHead {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144);
        let mut store = ParamStore::new();
        let hidden = add_linear(&mut store, &mut rng, "head.l0", ParamGroup::Head, 2 * FREQS.len(), HIDDEN, 1.0);
        let out = add_linear(&mut store, &mut rng, "head.out", ParamGroup::Head, HIDDEN, 1, 0.0);
        Self { store, hidden, out }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.store.set_group_trainable(ParamGroup::Head, on);
    }

    /// `w(t)` for each time, shape `[B]`.
    pub fn forward<'g>(&self, g: &'g Graph, t: &[f64]) -> Var<'g> {
        let f = g.constant(fourier_features(t, &FREQS));
        let h = f
            .linear(g.param(&self.store, self.hidden.0), g.param(&self.store, self.hidden.1))
            .silu();
        h.linear(g.param(&self.store, self.out.0), g.param(&self.store, self.out.1))
            .reshape(&[t.len()])
    }

    pub fn eval(&self, t: f64) -> f64 {
        let g = Graph::no_grad();
        self.forward(&g, &[t]).item()
    }

    /// Values for a batch of times.
    pub fn eval_batch(&self, t: &[f64]) -> ArrayD<f64> {
        let g = Graph::no_grad();
        let v = self.forward(&g, t).value();
        ArrayD::from_shape_vec(IxDyn(&[t.len()]), v.iter().copied().collect()).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_initialized_and_finite() {
        let h = WeightHead::new(3);
        for k in 0..100 {
            let t = std::f64::consts::FRAC_PI_2 * k as f64 / 99.0;
            let w = h.eval(t);
            assert_eq!(w, 0.0);
        }
    }

    #[test]
    fn gradient_reaches_head_only_when_trainable() {
        let mut h = WeightHead::new(3);
        let g = Graph::new();
        let w = h.forward(&g, &[0.3, 0.9]).sum();
        let grads = g.backward(w);
        assert!(grads.param(h.store().key(h.out.1)).is_some());
        h.set_trainable(false);
        let g = Graph::new();
        let w = h.forward(&g, &[0.3, 0.9]).sum();
        let grads = g.backward(w);
        assert_eq!(grads.params().count(), 0);
    }
}
