//! Multi-step consistency sampling and the measurement-constrained solver.

use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::{noise, ConsistencyModel, T_START};
use crate::datagen::NormStats;
use crate::error::{Error, Result};
use crate::grid::{Grid2D, GridField, JointState};
use crate::nn::Network;
use crate::params::Tensor;

pub const SIGMA_MAX: f64 = 80.0;
pub const SIGMA_MIN: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Geometric noise ladder mapped through `t = arctan(sigma / sigma_d)`.
    SigmaUniform,
    /// Evenly spaced in `t`.
    TUniform,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sigma_uniform" => Ok(ScheduleKind::SigmaUniform),
            "t_uniform" => Ok(ScheduleKind::TUniform),
            other => Err(Error::Inference(format!("unknown schedule `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::SigmaUniform => "sigma_uniform",
            ScheduleKind::TUniform => "t_uniform",
        }
    }
}

/// Times `t_0 > t_1 > ... > t_N`, with `t_0 = pi/2 - 1e-3` and `t_N = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSchedule {
    times: Vec<f64>,
}

impl TimeSchedule {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        let s = Self { times };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() < 2 {
            return Err(Error::Inference("a schedule needs at least two times".into()));
        }
        if self.times.iter().any(|t| !(0.0..=std::f64::consts::FRAC_PI_2).contains(t)) {
            return Err(Error::Inference("schedule times must lie in [0, pi/2]".into()));
        }
        if self.times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Inference("schedule must be strictly decreasing".into()));
        }
        Ok(())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of loop steps `N` (entries minus one).
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind, sigma_d: f64) -> Result<TimeSchedule> {
    if steps < 1 {
        return Err(Error::Inference("schedule needs N >= 1".into()));
    }
    let nf = steps as f64;
    let mut times: Vec<f64> = (0..=steps)
        .map(|k| match kind {
            ScheduleKind::SigmaUniform => {
                let sigma = SIGMA_MAX * (SIGMA_MIN / SIGMA_MAX).powf(k as f64 / nf);
                (sigma / sigma_d).atan()
            }
            ScheduleKind::TUniform => T_START * (1.0 - k as f64 / nf),
        })
        .collect();
    times[0] = T_START;
    times[steps] = 0.0;
    TimeSchedule::new(times)
}

/// Binary observation mask shaped `[2, n, n]`; 1 marks observed entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    values: Tensor,
}

impl Mask {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.ndim() != 3 || values.shape()[0] != 2 {
            return Err(Error::Inference(format!("mask must be [2, n, n], got {:?}", values.shape())));
        }
        if let Some(v) = values.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::Inference(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self { values })
    }

    /// Whole-channel mask: channel 0 is `a`, channel 1 is `u`.
    pub fn channel(grid: Grid2D, channel: usize) -> Self {
        let n = grid.n();
        let values = ArrayD::from_shape_fn(IxDyn(&[2, n, n]), |i| if i[0] == channel { 1.0 } else { 0.0 });
        Self { values }
    }

    /// Forward problem: the coefficient is observed.
    pub fn coefficient(grid: Grid2D) -> Self {
        Self::channel(grid, 0)
    }

    /// Inverse problem: the solution is observed.
    pub fn solution(grid: Grid2D) -> Self {
        Self::channel(grid, 1)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape.len() < 3 || shape[shape.len() - 3..] != *self.values.shape() {
            return Err(Error::Inference(format!(
                "mask {:?} does not match state {shape:?}",
                self.values.shape()
            )));
        }
        Ok(())
    }
}

/// `M * x_obs + (1 - M) * x_hat` on `[.., 2, n, n]` tensors (mask broadcast over the batch).
pub fn project_tensor(x_hat: &Tensor, x_obs: &Tensor, m: &Mask) -> Result<Tensor> {
    if x_hat.shape() != x_obs.shape() {
        return Err(Error::Inference("projection operands differ in shape".into()));
    }
    m.check(x_hat.shape())?;
    let mv = m.values.as_slice().expect("standard layout");
    let per = mv.len();
    let mut out = x_hat.as_standard_layout().into_owned();
    let obs = x_obs.as_standard_layout();
    let os = out.as_slice_mut().expect("standard layout");
    let bs = obs.as_slice().expect("standard layout");
    for (k, (o, b)) in os.iter_mut().zip(bs).enumerate() {
        // selection rather than arithmetic keeps observed entries bit-exact
        if mv[k % per] == 1.0 {
            *o = *b;
        }
    }
    Ok(out)
}

/// Hard projection of a joint state onto the observations.
pub fn project(x_hat: &JointState, x_obs: &JointState, m: &Mask) -> Result<JointState> {
    let g = x_hat.grid();
    if x_obs.grid() != g {
        return Err(Error::Inference("projection operands live on different grids".into()));
    }
    let n = g.n();
    let to_t = |s: &JointState| ArrayD::from_shape_vec(IxDyn(&[2, n, n]), s.to_flat()).expect("shape");
    let p = project_tensor(&to_t(x_hat), &to_t(x_obs), m)?;
    JointState::from_flat(g, p.as_slice().expect("standard layout"))
}

/// Output of an unconditional sampling run, in the model's (normalized) space.
#[derive(Debug, Clone)]
pub struct SampleRun {
    pub samples: Tensor,
    pub nfe: u64,
    pub seconds: f64,
    pub schedule: TimeSchedule,
    pub seed: u64,
}

impl SampleRun {
    /// Denormalized joint states of a PDE sampling run.
    pub fn states(&self, grid: Grid2D, stats: &NormStats) -> Result<Vec<JointState>> {
        tensor_to_states(&self.samples, grid, stats)
    }
}

pub fn tensor_to_states(x: &Tensor, grid: Grid2D, stats: &NormStats) -> Result<Vec<JointState>> {
    let n = grid.n();
    let m = n * n;
    if x.ndim() != 4 || x.shape()[1..] != [2, n, n] {
        return Err(Error::Inference(format!("expected [B, 2, {n}, {n}], got {:?}", x.shape())));
    }
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    xs.chunks_exact(2 * m)
        .map(|c| {
            let f = |ch: usize| {
                let v: Vec<f64> = c[ch * m..(ch + 1) * m]
                    .iter()
                    .map(|v| v * stats.std[ch] + stats.mean[ch])
                    .collect();
                GridField::new(grid, ndarray::Array2::from_shape_vec((n, n), v).expect("shape"))
            };
            JointState::new(f(0)?, f(1)?)
        })
        .collect()
}

fn state_tensor(s: &JointState, stats: &NormStats) -> Tensor {
    let n = s.grid().n();
    let m = n * n;
    let mut v = s.to_flat();
    for (k, x) in v.iter_mut().enumerate() {
        let c = k / m;
        *x = (*x - stats.mean[c]) / stats.std[c];
    }
    ArrayD::from_shape_vec(IxDyn(&[1, 2, n, n]), v).expect("shape")
}

/// Multistep consistency sampling of `count` states in one batch.
///
/// Entries of the schedule equal to 0 are returned as output without an
/// evaluation, so the counter grows by the number of positive times.
pub fn sample_unconditional<N: Network>(
    model: &ConsistencyModel<N>,
    count: usize,
    schedule: &TimeSchedule,
    seed: u64,
) -> Result<SampleRun> {
    schedule.validate()?;
    if count == 0 {
        return Err(Error::Inference("count must be positive".into()));
    }
    let shape: Vec<usize> = std::iter::once(count).chain(model.net.state_shape()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    let before = model.evals();
    let times = schedule.times();
    let z = noise(&mut rng, &shape, model.sigma_d);
    let mut x_hat = model.output(&z, &vec![times[0]; count])?;
    for &t in &times[1..] {
        if t == 0.0 {
            break;
        }
        let zn = noise(&mut rng, &shape, model.sigma_d);
        let x_t = &x_hat * t.cos() + &zn * t.sin();
        x_hat = model.output(&x_t, &vec![t; count])?;
    }
    Ok(SampleRun {
        samples: x_hat,
        nfe: model.evals() - before,
        seconds: start.elapsed().as_secs_f64(),
        schedule: schedule.clone(),
        seed,
    })
}

/// Result of one measurement-constrained solve, in physical units.
#[derive(Debug, Clone)]
pub struct ConstrainedRun {
    pub state: JointState,
    pub nfe: u64,
    pub seconds: f64,
    pub schedule: TimeSchedule,
    pub seed: u64,
}

/// Measurement-constrained consistency sampling.
///
/// Initial estimate from pure noise, projection, then for each `t_n`:
/// renoise, consistency update and projection. Uses `N + 1` evaluations.
pub fn solve_constrained<N: Network>(
    model: &ConsistencyModel<N>,
    x_obs: &JointState,
    mask: &Mask,
    stats: &NormStats,
    schedule: &TimeSchedule,
    seed: u64,
) -> Result<ConstrainedRun> {
    schedule.validate()?;
    let grid = x_obs.grid();
    let n = grid.n();
    if model.net.state_shape() != [2, n, n] {
        return Err(Error::Inference(format!(
            "model state {:?} does not match a {n}x{n} grid",
            model.net.state_shape()
        )));
    }
    mask.check(&[1, 2, n, n])?;
    let mv = mask.values().as_slice().expect("standard layout");
    let flat = x_obs.to_flat();
    if let Some(k) = (0..flat.len()).find(|&k| mv[k] == 1.0 && !flat[k].is_finite()) {
        return Err(Error::Inference(format!("observed entry {k} is not finite")));
    }
    let obs = state_tensor(x_obs, stats);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    let before = model.evals();
    let times = schedule.times();
    let shape = [1, 2, n, n];
    let x0 = noise(&mut rng, &shape, model.sigma_d);
    let mut x_hat = project_tensor(&model.output(&x0, &[times[0]])?, &obs, mask)?;
    for &t in &times[1..] {
        let z = noise(&mut rng, &shape, model.sigma_d);
        let x_t = &x_hat * t.cos() + &z * t.sin();
        x_hat = project_tensor(&model.output(&x_t, &[t])?, &obs, mask)?;
    }
    let nfe = model.evals() - before;
    let seconds = start.elapsed().as_secs_f64();
    // final projection in physical units makes observed entries bit-exact
    let est = tensor_to_states(&x_hat, grid, stats)?.remove(0);
    let state = project(&est, x_obs, mask)?;
    Ok(ConstrainedRun {
        state,
        nfe,
        seconds,
        schedule: schedule.clone(),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub steps: usize,
    pub nfe: u64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub seconds: Vec<f64>,
}

/// Median wall-clock of constrained solves at batch size 1. One warm-up run
/// is discarded.
pub fn benchmark_walltime<N: Network>(
    model: &ConsistencyModel<N>,
    x_obs: &JointState,
    mask: &Mask,
    stats: &NormStats,
    schedule: &TimeSchedule,
    repeats: usize,
) -> Result<WallClock> {
    let repeats = repeats.max(1);
    solve_constrained(model, x_obs, mask, stats, schedule, 0)?;
    let mut seconds = Vec::with_capacity(repeats);
    let mut nfe = 0;
    for r in 0..repeats {
        let run = solve_constrained(model, x_obs, mask, stats, schedule, r as u64 + 1)?;
        nfe = run.nfe;
        seconds.push(run.seconds);
    }
    let mut sorted = seconds.clone();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    let median = if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    };
    Ok(WallClock {
        steps: schedule.steps(),
        nfe,
        median,
        min: sorted[0],
        max: sorted[k - 1],
        seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shapes() {
        let s = make_schedule(1, ScheduleKind::SigmaUniform, 1.0).unwrap();
        assert_eq!(s.times(), &[T_START, 0.0]);
        for kind in [ScheduleKind::SigmaUniform, ScheduleKind::TUniform] {
            let s = make_schedule(16, kind, 1.0).unwrap();
            assert_eq!(s.times().len(), 17);
            assert!(s.times().windows(2).all(|w| w[1] < w[0]));
        }
        let s = make_schedule(2, ScheduleKind::TUniform, 1.0).unwrap();
        assert!((s.times()[1] - (std::f64::consts::FRAC_PI_2 - 1e-3) / 2.0).abs() < 1e-9);
        assert!(make_schedule(0, ScheduleKind::TUniform, 1.0).is_err());
    }

    #[test]
    fn mask_rejects_non_binary() {
        let v = ArrayD::from_elem(IxDyn(&[2, 3, 3]), 0.5);
        assert!(Mask::new(v).is_err());
    }

    #[test]
    fn projection_extremes() {
        let g = Grid2D::new(5).unwrap();
        let a = JointState::new(GridField::constant(g, 1.0), GridField::constant(g, 2.0)).unwrap();
        let b = JointState::new(GridField::constant(g, 3.0), GridField::constant(g, 4.0)).unwrap();
        let ones = Mask::new(ArrayD::ones(IxDyn(&[2, 5, 5]))).unwrap();
        let zeros = Mask::new(ArrayD::zeros(IxDyn(&[2, 5, 5]))).unwrap();
        assert_eq!(project(&a, &b, &ones).unwrap(), b);
        assert_eq!(project(&a, &b, &zeros).unwrap(), a);
        let p = project(&a, &b, &Mask::coefficient(g)).unwrap();
        assert_eq!(p.a, b.a);
        assert_eq!(p.u, a.u);
    }
}
