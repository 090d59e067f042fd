//! Coefficient/source sampling, classical forward solves and paired datasets.

mod io;
mod solver;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid2D, GridField, JointState, PdeKind};

pub use io::{DType, MAGIC, FORMAT_VERSION};
pub use solver::solve_forward;

pub const GENERATOR_VERSION: &str = concat!("ecm-datagen/", env!("CARGO_PKG_VERSION"));

/// Default tolerance on `||R||_2 h^2` for generated samples.
pub const SOLVER_TOL: f64 = 1e-8;

/// Gaussian random field parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrfSpec {
    /// Smoothing length as a fraction of the domain side.
    pub length_scale: f64,
    pub variance: f64,
    pub seed: u64,
}

impl Default for GrfSpec {
    fn default() -> Self {
        Self {
            length_scale: 0.1,
            variance: 1.0,
            seed: 0,
        }
    }
}

impl GrfSpec {
    fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0) || self.length_scale >= 1.0 {
            return Err(Error::Datagen(format!(
                "length scale must lie in (0, 1), got {}",
                self.length_scale
            )));
        }
        if !(self.variance > 0.0) || !self.variance.is_finite() {
            return Err(Error::Datagen(format!("variance must be positive, got {}", self.variance)));
        }
        Ok(())
    }
}

/// Two-level piecewise-constant Darcy permeability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DarcyCoeffSpec {
    pub low: f64,
    pub high: f64,
    /// Fraction of pixels assigned the low level.
    pub threshold: f64,
}

impl Default for DarcyCoeffSpec {
    fn default() -> Self {
        Self {
            low: 3.0,
            high: 12.0,
            threshold: 0.5,
        }
    }
}

impl DarcyCoeffSpec {
    fn validate(&self) -> Result<()> {
        if !(self.low > 0.0 && self.low < self.high) {
            return Err(Error::Datagen(format!(
                "need 0 < low < high, got low = {}, high = {}",
                self.low, self.high
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Datagen(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// In-place 2-D FFT of a row-major `n x n` buffer.
fn fft2(buf: &mut [Complex64], n: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    fft.process(buf);
    let mut col = vec![Complex64::default(); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = buf[i * n + j];
        }
        fft.process(&mut col);
        for i in 0..n {
            buf[i * n + j] = col[i];
        }
    }
}

/// Draws a stationary GRF by Gaussian low-pass filtering of white noise.
///
/// The field is then standardized to zero mean and the requested variance.
pub fn sample_grf(spec: &GrfSpec, grid: Grid2D) -> Result<GridField> {
    spec.validate()?;
    let n = grid.n();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut buf: Vec<Complex64> = (0..n * n)
        .map(|_| Complex64::new(StandardNormal.sample(&mut rng), 0.0))
        .collect();
    fft2(&mut buf, n, false);
    let two_pi = 2.0 * std::f64::consts::PI;
    let freq = |k: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    let l2 = spec.length_scale * spec.length_scale;
    for i in 0..n {
        for j in 0..n {
            let w2 = (two_pi * freq(i)).powi(2) + (two_pi * freq(j)).powi(2);
            buf[i * n + j] *= (-0.5 * w2 * l2).exp();
        }
    }
    fft2(&mut buf, n, true);
    let vals: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let m = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / m;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    if !(var > 0.0) {
        return Err(Error::Datagen("degenerate random field".into()));
    }
    let scale = (spec.variance / var).sqrt();
    let values = Array2::from_shape_vec((n, n), vals.iter().map(|v| (v - mean) * scale).collect())
        .expect("shape");
    GridField::new(grid, values)
}

/// Binarizes a GRF at its empirical quantile: the `threshold * n^2` lowest
/// pixels (by rank) take `low`, the rest take `high`.
pub fn sample_darcy_coeff(spec: &DarcyCoeffSpec, grf: &GrfSpec, grid: Grid2D) -> Result<GridField> {
    spec.validate()?;
    let field = sample_grf(grf, grid)?;
    let vals = field.as_slice();
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&x, &y| vals[x].total_cmp(&vals[y]).then(x.cmp(&y)));
    let n_low = (spec.threshold * vals.len() as f64).round() as usize;
    let mut out = vec![spec.high; vals.len()];
    for &idx in &order[..n_low] {
        out[idx] = spec.low;
    }
    GridField::new(grid, Array2::from_shape_vec((grid.n(), grid.n()), out).expect("shape"))
}

/// Per-channel mean and standard deviation, in `[a, u]` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl NormStats {
    pub fn new(mean: [f64; 2], std: [f64; 2]) -> Result<Self> {
        for c in 0..2 {
            if !mean[c].is_finite() || !std[c].is_finite() || std[c] <= 0.0 {
                return Err(Error::Datagen(format!(
                    "channel {c}: invalid normalization stats mean = {}, std = {}",
                    mean[c], std[c]
                )));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn identity() -> Self {
        Self {
            mean: [0.0; 2],
            std: [1.0; 2],
        }
    }

    /// Population statistics over every pixel of every sample.
    pub fn compute(samples: &[JointState]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Datagen("cannot compute stats of an empty set".into()));
        }
        let mut mean = [0.0; 2];
        let mut std = [0.0; 2];
        for c in 0..2 {
            let field = |s: &JointState| if c == 0 { s.a.as_slice().to_vec() } else { s.u.as_slice().to_vec() };
            let mut count = 0.0;
            let mut sum = 0.0;
            for s in samples {
                let f = field(s);
                count += f.len() as f64;
                sum += f.iter().sum::<f64>();
            }
            let m = sum / count;
            let mut ss = 0.0;
            for s in samples {
                ss += field(s).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            mean[c] = m;
            std[c] = (ss / count).sqrt();
        }
        Self::new(mean, std)
    }

    pub fn normalize(&self, s: &JointState) -> Result<JointState> {
        self.affine(s, |v, c| (v - self.mean[c]) / self.std[c])
    }

    pub fn denormalize(&self, s: &JointState) -> Result<JointState> {
        self.affine(s, |v, c| v * self.std[c] + self.mean[c])
    }

    fn affine(&self, s: &JointState, f: impl Fn(f64, usize) -> f64) -> Result<JointState> {
        NormStats::new(self.mean, self.std)?;
        let g = s.grid();
        let a = s.a.values().mapv(|v| f(v, 0));
        let u = s.u.values().mapv(|v| f(v, 1));
        JointState::new(GridField::new(g, a)?, GridField::new(g, u)?)
    }
}

/// Paired coefficient/solution samples of one PDE family.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: PdeKind,
    pub grid: Grid2D,
    pub seed: u64,
    pub samples: Vec<JointState>,
    pub norm_stats: NormStats,
}

/// Knobs for [`generate_dataset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenOptions {
    pub grf: GrfSpec,
    pub darcy: DarcyCoeffSpec,
    pub tol: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            grf: GrfSpec::default(),
            darcy: DarcyCoeffSpec::default(),
            tol: SOLVER_TOL,
        }
    }
}

/// Seed of sample `index` in a dataset with master seed `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn generate_one(kind: PdeKind, grid: Grid2D, seed: u64, opts: &GenOptions) -> Result<JointState> {
    let grf = GrfSpec { seed, ..opts.grf };
    let a = match kind {
        PdeKind::Darcy => sample_darcy_coeff(&opts.darcy, &grf, grid)?,
        _ => sample_grf(&grf, grid)?,
    };
    let u = solve_forward(kind, &a, opts.tol)?;
    JointState::new(a, u)
}

/// Generates `count` samples in parallel. Output is independent of thread count.
pub fn generate_dataset(kind: PdeKind, count: usize, grid: Grid2D, seed: u64, opts: &GenOptions) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Datagen("count must be at least 1".into()));
    }
    kind.validate()?;
    let samples: Vec<JointState> = (0..count)
        .into_par_iter()
        .map(|i| {
            generate_one(kind, grid, sample_seed(seed, i as u64), opts).map_err(|e| Error::Sample {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let norm_stats = NormStats::compute(&samples)?;
    Ok(Dataset {
        kind,
        grid,
        seed,
        samples,
        norm_stats,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Batch tensor `[B, 2, n, n]` of the selected samples, normalized with `stats`.
    pub fn batch(&self, indices: &[usize], stats: &NormStats) -> crate::params::Tensor {
        let n = self.grid.n();
        let m = n * n;
        let mut v = Vec::with_capacity(indices.len() * 2 * m);
        for &i in indices {
            let s = &self.samples[i];
            v.extend(s.a.as_slice().iter().map(|x| (x - stats.mean[0]) / stats.std[0]));
            v.extend(s.u.as_slice().iter().map(|x| (x - stats.mean[1]) / stats.std[1]));
        }
        ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[indices.len(), 2, n, n]), v).expect("shape")
    }

    /// First `k` samples as a new dataset sharing the kind and stats.
    pub fn take(&self, k: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().take(k).cloned().collect(),
            ..self.clone()
        }
    }
}
