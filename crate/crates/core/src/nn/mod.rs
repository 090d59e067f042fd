//! Network builders: the toy MLP, the split-decoder convolutional net and the
//! adaptive loss-weight head, plus checkpoint persistence.

mod checkpoint;
mod head;
mod mlp;
mod unet;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore, Tensor};
use crate::tape::{Graph, Var};

pub use checkpoint::{Checkpoint, Phase, CKPT_MAGIC, CKPT_VERSION};
pub use head::WeightHead;
pub use mlp::ToyMlp;
pub use unet::SplitConvNet;

/// A denoiser `F(x, t)` acting on batches of normalized states.
///
/// `x` has shape `[B, ..state_shape]` and `t` holds one time per sample.
pub trait Network: Send + Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Per-sample state shape, e.g. `[2]` or `[2, n, n]`.
    fn state_shape(&self) -> Vec<usize>;
    fn forward<'g>(&self, g: &'g Graph, x: Var<'g>, t: &[f64]) -> Var<'g>;

    /// Exact forward-mode derivative `(F, dF)` along `(dx, dt)`, if available.
    fn jvp(&self, _x: &Tensor, _t: &[f64], _dx: &Tensor, _dt: &[f64]) -> Option<(Tensor, Tensor)> {
        None
    }

    /// `Some(unchanged)` when a frozen backbone checksum is recorded.
    fn frozen_audit(&self) -> Option<bool> {
        None
    }

    /// Whether the output channels come from separate decoders.
    fn is_partitioned(&self) -> bool {
        false
    }

    /// Forward pass without recording gradients.
    fn eval(&self, x: &Tensor, t: &[f64]) -> Tensor {
        let g = Graph::no_grad();
        let y = self.forward(&g, g.constant(x.clone()), t);
        (*y.value()).clone()
    }
}

/// Architecture description stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NetworkSpec {
    ToyMlp {
        width: usize,
        depth: usize,
        seed: u64,
    },
    SplitConv {
        n: usize,
        widths: [usize; 3],
        temb_dim: usize,
        seed: u64,
    },
}

impl NetworkSpec {
    pub fn toy_default(seed: u64) -> Self {
        NetworkSpec::ToyMlp {
            width: 128,
            depth: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NetworkSpec::ToyMlp { width, depth, .. } => {
                if width == 0 || depth == 0 {
                    return Err(Error::Network("mlp width and depth must be positive".into()));
                }
            }
            NetworkSpec::SplitConv { n, widths, temb_dim, .. } => {
                if n < 4 || n % 4 != 0 {
                    return Err(Error::Network(format!(
                        "grid size {n} must be a positive multiple of 4 for two pooling levels"
                    )));
                }
                if widths.iter().any(|&w| w == 0 || w % 4 != 0) || temb_dim < 2 || temb_dim % 2 != 0 {
                    return Err(Error::Network(format!(
                        "channel widths {widths:?} must be positive multiples of 4, temb_dim even"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Any network that can live in a checkpoint.
#[derive(Debug, Clone)]
pub enum Net {
    Mlp(ToyMlp),
    Split(SplitConvNet),
}

impl Net {
    pub fn build(spec: &NetworkSpec) -> Result<Net> {
        spec.validate()?;
        Ok(match spec {
            NetworkSpec::ToyMlp { .. } => Net::Mlp(ToyMlp::build(spec)?),
            NetworkSpec::SplitConv { .. } => Net::Split(SplitConvNet::build(spec)?),
        })
    }

    pub fn spec(&self) -> NetworkSpec {
        match self {
            Net::Mlp(m) => m.spec().clone(),
            Net::Split(s) => s.spec().clone(),
        }
    }

    pub fn as_split(&self) -> Option<&SplitConvNet> {
        match self {
            Net::Split(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_split_mut(&mut self) -> Option<&mut SplitConvNet> {
        match self {
            Net::Split(s) => Some(s),
            _ => None,
        }
    }
}

impl Network for Net {
    fn store(&self) -> &ParamStore {
        match self {
            Net::Mlp(m) => m.store(),
            Net::Split(s) => s.store(),
        }
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Net::Mlp(m) => m.store_mut(),
            Net::Split(s) => s.store_mut(),
        }
    }

    fn state_shape(&self) -> Vec<usize> {
        match self {
            Net::Mlp(m) => m.state_shape(),
            Net::Split(s) => s.state_shape(),
        }
    }

    fn forward<'g>(&self, g: &'g Graph, x: Var<'g>, t: &[f64]) -> Var<'g> {
        match self {
            Net::Mlp(m) => m.forward(g, x, t),
            Net::Split(s) => s.forward(g, x, t),
        }
    }

    fn jvp(&self, x: &Tensor, t: &[f64], dx: &Tensor, dt: &[f64]) -> Option<(Tensor, Tensor)> {
        match self {
            Net::Mlp(m) => m.jvp(x, t, dx, dt),
            Net::Split(s) => s.jvp(x, t, dx, dt),
        }
    }

    fn frozen_audit(&self) -> Option<bool> {
        self.as_split().and_then(|s| s.frozen_audit())
    }

    fn is_partitioned(&self) -> bool {
        self.as_split().is_some_and(|s| s.is_split())
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initializer.
pub(crate) fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let b = gain / (fan_in as f64).sqrt();
    if b == 0.0 {
        return ArrayD::zeros(IxDyn(shape));
    }
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-b..b)).collect()).expect("shape")
}

/// Adds a dense layer `out x in` and returns `(weight, bias)` indices.
pub(crate) fn add_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    group: ParamGroup,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
) -> (usize, usize) {
    let w = store.add(format!("{name}.w"), group, init_uniform(rng, &[fan_out, fan_in], fan_in, gain));
    let b = store.add(format!("{name}.b"), group, init_uniform(rng, &[fan_out], fan_in, gain));
    (w, b)
}

/// `[sin(w t), cos(w t)]` features for the given angular frequencies.
pub(crate) fn fourier_features(t: &[f64], freqs: &[f64]) -> Tensor {
    let k = freqs.len();
    let mut v = Vec::with_capacity(t.len() * 2 * k);
    for &ti in t {
        v.extend(freqs.iter().map(|w| (w * ti).sin()));
        v.extend(freqs.iter().map(|w| (w * ti).cos()));
    }
    ArrayD::from_shape_vec(IxDyn(&[t.len(), 2 * k]), v).expect("shape")
}

/// Derivative of [`fourier_features`] with respect to `t`, scaled by `dt`.
pub(crate) fn fourier_features_dt(t: &[f64], dt: &[f64], freqs: &[f64]) -> Tensor {
    let k = freqs.len();
    let mut v = Vec::with_capacity(t.len() * 2 * k);
    for (&ti, &d) in t.iter().zip(dt) {
        v.extend(freqs.iter().map(|w| w * (w * ti).cos() * d));
        v.extend(freqs.iter().map(|w| -w * (w * ti).sin() * d));
    }
    ArrayD::from_shape_vec(IxDyn(&[t.len(), 2 * k]), v).expect("shape")
}
