use ndarray::{Array2, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{add_linear, fourier_features, fourier_features_dt, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore, Tensor};
use crate::tape::{sigmoid, Graph, Var};

/// Time frequencies of the MLP input features. Kept low so that central
/// differences with step 1e-3 stay accurate.
const FREQS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

/// Fully connected SiLU network on `R^2` with Fourier time features.
#[derive(Debug, Clone)]
pub struct ToyMlp {
    spec: NetworkSpec,
    store: ParamStore,
    layers: Vec<(usize, usize)>,
}

impl ToyMlp {
    pub fn build(spec: &NetworkSpec) -> Result<Self> {
        let NetworkSpec::ToyMlp { width, depth, seed } = *spec else {
            return Err(Error::Network("not a toy_mlp spec".into()));
        };
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(depth + 1);
        let mut fan_in = 2 + 2 * FREQS.len();
        for l in 0..depth {
            layers.push(add_linear(&mut store, &mut rng, &format!("mlp.l{l}"), ParamGroup::Mlp, fan_in, width, 1.0));
            fan_in = width;
        }
        layers.push(add_linear(&mut store, &mut rng, "mlp.out", ParamGroup::Mlp, fan_in, 2, 1.0));
        Ok(Self {
            spec: spec.clone(),
            store,
            layers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    fn input(x: &Tensor, t: &[f64]) -> Array2<f64> {
        let x2 = x.view().into_dimensionality::<Ix2>().expect("toy states are [B, 2]");
        let f = fourier_features(t, &FREQS);
        let f2 = f.view().into_dimensionality::<Ix2>().unwrap();
        ndarray::concatenate(ndarray::Axis(1), &[x2, f2]).expect("batch sizes agree")
    }
}

impl Network for ToyMlp {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn state_shape(&self) -> Vec<usize> {
        vec![2]
    }

    fn forward<'g>(&self, g: &'g Graph, x: Var<'g>, t: &[f64]) -> Var<'g> {
        let feats = g.constant(fourier_features(t, &FREQS));
        let mut h = Var::concat(&[x, feats]);
        let last = self.layers.len() - 1;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = h.linear(g.param(&self.store, w), g.param(&self.store, b));
            if l < last {
                h = h.silu();
            }
        }
        h
    }

    fn jvp(&self, x: &Tensor, t: &[f64], dx: &Tensor, dt: &[f64]) -> Option<(Tensor, Tensor)> {
        let mut h = Self::input(x, t);
        let dx2 = dx.view().into_dimensionality::<Ix2>().ok()?;
        let df = fourier_features_dt(t, dt, &FREQS);
        let mut dh = ndarray::concatenate(
            ndarray::Axis(1),
            &[dx2, df.view().into_dimensionality::<Ix2>().unwrap()],
        )
        .ok()?;
        let last = self.layers.len() - 1;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let wv = self.store.value(w).view().into_dimensionality::<Ix2>().unwrap().to_owned();
            let bv = self.store.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
            let z = h.dot(&wv.t()) + &bv;
            let dz = dh.dot(&wv.t());
            if l < last {
                h = z.mapv(|v| v * sigmoid(v));
                let slope = z.mapv(|v| {
                    let s = sigmoid(v);
                    s * (1.0 + v * (1.0 - s))
                });
                dh = dz * &slope;
            } else {
                h = z;
                dh = dz;
            }
        }
        Some((h.into_dyn(), dh.into_dyn()))
    }
}
