//! TrigFlow parameterization, noising, tangent targets and the two-step operator.
//!
//! States are batches `[B, ..]` with one time per sample. Noise draws carry the
//! `sigma_d` scale, so `x_t = cos(t) x0 + sin(t) z` throughout.

use std::f64::consts::FRAC_PI_2;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::JointState;
use crate::nn::Network;
use crate::params::Tensor;
use crate::tape::{Graph, Var};

/// Largest time used by the training-time two-step term.
pub const T_TRAIN: f64 = 1.56;
/// First time of every sampling schedule.
pub const T_START: f64 = FRAC_PI_2 - 1e-3;
/// Step of the finite-difference tangent fallback.
pub const FD_EPS: f64 = 1e-3;

/// A time in `[0, pi/2]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TimePoint(f64);

impl TimePoint {
    pub fn new(t: f64) -> Result<Self> {
        check_time(t)?;
        Ok(Self(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=FRAC_PI_2).contains(&t) {
        return Err(Error::TimeRange(t));
    }
    Ok(())
}

fn check_times(t: &[f64]) -> Result<()> {
    t.iter().try_for_each(|&v| check_time(v))
}

/// Multiplies sample `b` of `x` by `c[b]`.
pub fn scale_rows(x: &Tensor, c: &[f64]) -> Tensor {
    let b = x.shape()[0];
    assert_eq!(b, c.len(), "one coefficient per sample");
    let inner = x.len() / b;
    let mut out = x.as_standard_layout().into_owned();
    for (chunk, &s) in out.as_slice_mut().unwrap().chunks_mut(inner).zip(c) {
        chunk.iter_mut().for_each(|v| *v *= s);
    }
    out
}

fn cos_all(t: &[f64]) -> Vec<f64> {
    t.iter().map(|v| v.cos()).collect()
}

fn sin_all(t: &[f64]) -> Vec<f64> {
    t.iter().map(|v| v.sin()).collect()
}

/// Gaussian noise shaped like `shape` with standard deviation `sigma_d`.
pub fn noise<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], sigma_d: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            sigma_d * e
        })
        .collect();
    Tensor::from_shape_vec(shape.to_vec(), v).expect("shape")
}

/// `x_t = cos(t) x0 + sin(t) z` and its tangent `cos(t) z - sin(t) x0`.
pub fn forward_diffuse(x0: &Tensor, z: &Tensor, t: &[f64]) -> Result<(Tensor, Tensor)> {
    check_times(t)?;
    if x0.shape() != z.shape() {
        return Err(Error::Consistency(format!("shape mismatch {:?} vs {:?}", x0.shape(), z.shape())));
    }
    let (c, s) = (cos_all(t), sin_all(t));
    let xt = scale_rows(x0, &c) + scale_rows(z, &s);
    let neg_s: Vec<f64> = s.iter().map(|v| -v).collect();
    let xdot = scale_rows(z, &c) + scale_rows(x0, &neg_s);
    Ok((xt, xdot))
}

/// Single-state convenience wrapper over [`forward_diffuse`].
pub fn forward_diffuse_state(x0: &JointState, z: &JointState, t: TimePoint) -> Result<(JointState, JointState)> {
    let g = x0.grid();
    let shape = [1, 2 * g.n() * g.n()];
    let a = Tensor::from_shape_vec(shape.to_vec(), x0.to_flat()).expect("shape");
    let b = Tensor::from_shape_vec(shape.to_vec(), z.to_flat()).expect("shape");
    let (xt, xd) = forward_diffuse(&a, &b, &[t.value()])?;
    Ok((
        JointState::from_flat(g, xt.as_slice().unwrap())?,
        JointState::from_flat(g, xd.as_slice().unwrap())?,
    ))
}

/// A network wrapped in the TrigFlow parameterization, with an evaluation tally.
pub struct ConsistencyModel<N> {
    pub net: N,
    pub sigma_d: f64,
    evals: AtomicU64,
}

impl<N: Network> ConsistencyModel<N> {
    pub fn new(net: N, sigma_d: f64) -> Self {
        Self {
            net,
            sigma_d,
            evals: AtomicU64::new(0),
        }
    }

    /// Total number of consistency evaluations so far.
    pub fn evals(&self) -> u64 {
        self.evals.load(Ordering::SeqCst)
    }

    pub fn into_net(self) -> N {
        self.net
    }

    /// `F(x / sigma_d, t)` without touching the tally.
    pub fn velocity(&self, x: &Tensor, t: &[f64]) -> Tensor {
        self.net.eval(&(x / self.sigma_d), t)
    }

    /// Raw `cos(t) x - sin(t) sigma_d F(x / sigma_d, t)` with no range check or tally.
    fn f_raw(&self, x: &Tensor, t: &[f64]) -> Tensor {
        let fv = self.velocity(x, t);
        let ms: Vec<f64> = t.iter().map(|v| -v.sin() * self.sigma_d).collect();
        scale_rows(x, &cos_all(t)) + scale_rows(&fv, &ms)
    }

    /// The consistency map. Increments the tally by exactly one.
    pub fn output(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        check_times(t)?;
        if x.shape()[0] != t.len() {
            return Err(Error::Consistency("one time per sample required".into()));
        }
        self.evals.fetch_add(1, Ordering::SeqCst);
        let out = self.f_raw(x, t);
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::Consistency(format!("non-finite network output at flat index {i}")));
        }
        Ok(out)
    }

    /// Differentiable consistency map on the tape. Increments the tally.
    pub fn output_var<'g>(&self, g: &'g Graph, x: Var<'g>, t: &[f64]) -> Var<'g> {
        self.evals.fetch_add(1, Ordering::SeqCst);
        let fv = self.net.forward(g, x.scale(1.0 / self.sigma_d), t);
        let ms: Vec<f64> = t.iter().map(|v| -v.sin() * self.sigma_d).collect();
        x.mul_rows(&cos_all(t)).add(fv.mul_rows(&ms))
    }

    /// `(f(x, t), F(x / sigma_d, t))` from a single network evaluation on the tape.
    pub fn output_velocity_var<'g>(&self, g: &'g Graph, x: &Tensor, t: &[f64]) -> (Var<'g>, Var<'g>) {
        self.evals.fetch_add(1, Ordering::SeqCst);
        let fv = self.net.forward(g, g.constant(x / self.sigma_d), t);
        let ms: Vec<f64> = t.iter().map(|v| -v.sin() * self.sigma_d).collect();
        let f = fv.mul_rows(&ms).add_const(&scale_rows(x, &cos_all(t)));
        (f, fv)
    }

    pub fn output_state(&self, x: &JointState, t: TimePoint) -> Result<JointState> {
        let g = x.grid();
        let shape: Vec<usize> = std::iter::once(1).chain(self.net.state_shape()).collect();
        let xt = Tensor::from_shape_vec(shape, x.to_flat())
            .map_err(|_| Error::Consistency("state does not match the network shape".into()))?;
        let y = self.output(&xt, &[t.value()])?;
        JointState::from_flat(g, y.as_slice().unwrap())
    }
}

/// How the total time derivative of the teacher map is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TangentMode {
    /// Forward mode when the network offers it, else finite differences.
    Auto,
    Exact,
    FiniteDifference,
}

/// Teacher-side regression target for consistency training.
#[derive(Debug, Clone)]
pub struct TangentTarget {
    pub y: Tensor,
    pub x_t: Tensor,
    pub xdot: Tensor,
    /// Teacher velocity `F(x_t / sigma_d, t)`.
    pub teacher: Tensor,
    /// Directional derivative of the teacher map along `(xdot, 1)`.
    pub df_dt: Tensor,
}

/// Directional derivative of `(x, t) -> f(x, t)` along `(dx, 1)`.
pub fn total_derivative<N: Network>(
    model: &ConsistencyModel<N>,
    x: &Tensor,
    dx: &Tensor,
    t: &[f64],
    mode: TangentMode,
) -> Result<(Tensor, Tensor)> {
    let sd = model.sigma_d;
    let ones = vec![1.0; t.len()];
    let exact = match mode {
        TangentMode::FiniteDifference => None,
        _ => model.net.jvp(&(x / sd), t, &(dx / sd), &ones),
    };
    let (c, s) = (cos_all(t), sin_all(t));
    match exact {
        Some((fv, dfv)) => {
            // d/dt [cos t x - sin t sd F] = -sin t x + cos t dx - cos t sd F - sin t sd dF
            let ms: Vec<f64> = s.iter().map(|v| -v).collect();
            let mcs: Vec<f64> = c.iter().map(|v| -v * sd).collect();
            let mss: Vec<f64> = s.iter().map(|v| -v * sd).collect();
            let d = scale_rows(x, &ms) + scale_rows(dx, &c) + scale_rows(&fv, &mcs) + scale_rows(&dfv, &mss);
            Ok((fv, d))
        }
        None if mode == TangentMode::Exact => {
            Err(Error::Consistency("network has no forward-mode derivative".into()))
        }
        None => {
            let fv = model.velocity(x, t);
            let tp: Vec<f64> = t.iter().map(|v| v + FD_EPS).collect();
            let tm: Vec<f64> = t.iter().map(|v| v - FD_EPS).collect();
            let step = dx * FD_EPS;
            let d = (model.f_raw(&(x + &step), &tp) - model.f_raw(&(x - &step), &tm)) / (2.0 * FD_EPS);
            Ok((fv, d))
        }
    }
}

/// `y_t = F(x_t / sigma_d, t) + cos(t) * df/dt` under the teacher weights.
///
/// The teacher is evaluated without a tape, so no gradient can reach it.
pub fn tangent_target<N: Network>(
    teacher: &ConsistencyModel<N>,
    x0: &Tensor,
    z: &Tensor,
    t: &[f64],
    mode: TangentMode,
) -> Result<TangentTarget> {
    let (x_t, xdot) = forward_diffuse(x0, z, t)?;
    let (teacher_f, df_dt) = total_derivative(teacher, &x_t, &xdot, t, mode)?;
    if let Some(i) = df_dt.iter().position(|v| !v.is_finite()) {
        let b = i / (df_dt.len() / t.len());
        return Err(Error::Consistency(format!("non-finite tangent at t = {}", t[b])));
    }
    let y = &teacher_f + &scale_rows(&df_dt, &cos_all(t));
    Ok(TangentTarget {
        y,
        x_t,
        xdot,
        teacher: teacher_f,
        df_dt,
    })
}

/// Log-normal proposal over `tan(t)`: `tau ~ N(p_mean, p_std)`, `t = arctan(e^tau / sigma_d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeProposal {
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for TimeProposal {
    fn default() -> Self {
        Self {
            p_mean: -1.0,
            p_std: 1.4,
        }
    }
}

pub fn sample_training_time<R: Rng + ?Sized>(rng: &mut R, p: &TimeProposal, sigma_d: f64) -> TimePoint {
    let normal = Normal::new(p.p_mean, p.p_std).expect("finite proposal");
    loop {
        let tau: f64 = normal.sample(rng);
        let t = (tau.exp() / sigma_d).atan();
        // extreme tails round to the closed endpoints in f64; redraw those
        if t > 0.0 && t < FRAC_PI_2 {
            return TimePoint(t);
        }
    }
}

/// Draw from the proposal restricted to `(0, upper)`.
pub fn sample_time_below<R: Rng + ?Sized>(rng: &mut R, p: &TimeProposal, sigma_d: f64, upper: f64) -> TimePoint {
    loop {
        let t = sample_training_time(rng, p, sigma_d);
        if t.0 < upper {
            return t;
        }
    }
}

/// `f(sin(t') z' + cos(t') f(z, T), t')`. Exactly two evaluations.
pub fn two_step_operator<N: Network>(
    model: &ConsistencyModel<N>,
    z: &Tensor,
    z2: &Tensor,
    big_t: TimePoint,
    t2: TimePoint,
) -> Result<Tensor> {
    if t2.0 >= big_t.0 {
        return Err(Error::Consistency(format!("t' = {} must be below T = {}", t2.0, big_t.0)));
    }
    let b = z.shape()[0];
    let x_hat = model.output(z, &vec![big_t.0; b])?;
    let renoised = &x_hat * t2.0.cos() + z2 * t2.0.sin();
    model.output(&renoised, &vec![t2.0; b])
}

/// Differentiable two-step operator with per-sample `t'`.
pub fn two_step_var<'g, N: Network>(
    model: &ConsistencyModel<N>,
    g: &'g Graph,
    z: &Tensor,
    z2: &Tensor,
    big_t: f64,
    t2: &[f64],
) -> Var<'g> {
    let b = z.shape()[0];
    let x_hat = model.output_var(g, g.constant(z.clone()), &vec![big_t; b]);
    let renoised = x_hat
        .mul_rows(&cos_all(t2))
        .add(g.constant(scale_rows(z2, &sin_all(t2))));
    model.output_var(g, renoised, t2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{NetworkSpec, ToyMlp};
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `F(x, t) = c * x`, with an exact jvp.
    struct Linear {
        store: ParamStore,
        c: f64,
    }

    impl Network for Linear {
        fn store(&self) -> &ParamStore {
            &self.store
        }
        fn store_mut(&mut self) -> &mut ParamStore {
            &mut self.store
        }
        fn state_shape(&self) -> Vec<usize> {
            vec![2]
        }
        fn forward<'g>(&self, _g: &'g Graph, x: Var<'g>, _t: &[f64]) -> Var<'g> {
            x.scale(self.c)
        }
        fn jvp(&self, x: &Tensor, _t: &[f64], dx: &Tensor, _dt: &[f64]) -> Option<(Tensor, Tensor)> {
            Some((x * self.c, dx * self.c))
        }
    }

    fn stub(c: f64) -> ConsistencyModel<Linear> {
        ConsistencyModel::new(
            Linear {
                store: ParamStore::new(),
                c,
            },
            1.0,
        )
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        noise(rng, shape, 1.0)
    }

    #[test]
    fn diffuse_endpoints_and_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_t(&mut rng, &[1, 6]);
        let z = rand_t(&mut rng, &[1, 6]);
        let (xt, xd) = forward_diffuse(&x0, &z, &[0.0]).unwrap();
        assert_eq!(xt, x0);
        assert_eq!(xd, z);
        let (xt, xd) = forward_diffuse(&x0, &z, &[FRAC_PI_2]).unwrap();
        assert!((&xt - &z).iter().all(|v| v.abs() < 1e-15));
        assert!((&xd + &x0).iter().all(|v| v.abs() < 1e-15));
        let e = 1e-5;
        let (p, _) = forward_diffuse(&x0, &z, &[0.7 + e]).unwrap();
        let (m, _) = forward_diffuse(&x0, &z, &[0.7 - e]).unwrap();
        let (_, d) = forward_diffuse(&x0, &z, &[0.7]).unwrap();
        let fd = (p - m) / (2.0 * e);
        assert!((&fd - &d).iter().all(|v| v.abs() < 1e-8));
        assert!(forward_diffuse(&x0, &z, &[1.6]).is_err());
    }

    #[test]
    fn output_boundary_and_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, &[3, 2]);
        let m = stub(0.0);
        assert_eq!(m.output(&x, &[0.0; 3]).unwrap(), x);
        let y = m.output(&x, &[0.4; 3]).unwrap();
        assert!((&y - &(&x * 0.4f64.cos())).iter().all(|v| v.abs() < 1e-15));
        let id = stub(1.0);
        let y = id.output(&x, &[std::f64::consts::FRAC_PI_4; 3]).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-15));
        assert_eq!(id.evals(), 1);
    }

    #[test]
    fn tangent_of_zero_stub_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_t(&mut rng, &[4, 2]);
        let z = rand_t(&mut rng, &[4, 2]);
        let t = [0.1, 0.5, 0.9, 1.4];
        for mode in [TangentMode::Exact, TangentMode::FiniteDifference] {
            let tt = tangent_target(&stub(0.0), &x0, &z, &t, mode).unwrap();
            let (xt, xd) = forward_diffuse(&x0, &z, &t).unwrap();
            for b in 0..4 {
                let (c, s) = (t[b].cos(), t[b].sin());
                for k in 0..2 {
                    let want = c * (-s * xt[[b, k]] + c * xd[[b, k]]);
                    assert!((tt.y[[b, k]] - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn tangent_of_linear_network_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = rand_t(&mut rng, &[3, 2]);
        let z = rand_t(&mut rng, &[3, 2]);
        let t = [0.3, 0.8, 1.2];
        let m = stub(1.0);
        let (xt, xd) = forward_diffuse(&x0, &z, &t).unwrap();
        for mode in [TangentMode::Exact, TangentMode::FiniteDifference] {
            let tt = tangent_target(&m, &x0, &z, &t, mode).unwrap();
            for b in 0..3 {
                let (c, s) = (t[b].cos(), t[b].sin());
                for k in 0..2 {
                    // f = (cos t - sin t) x
                    let df = (-s - c) * xt[[b, k]] + (c - s) * xd[[b, k]];
                    let want = xt[[b, k]] + c * df;
                    assert!((tt.y[[b, k]] - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn mlp_exact_tangent_agrees_with_finite_difference() {
        let net = ToyMlp::build(&NetworkSpec::ToyMlp {
            width: 32,
            depth: 3,
            seed: 9,
        })
        .unwrap();
        let m = ConsistencyModel::new(net, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_t(&mut rng, &[8, 2]);
        let z = rand_t(&mut rng, &[8, 2]);
        let t = [0.9; 8];
        let a = tangent_target(&m, &x0, &z, &t, TangentMode::Exact).unwrap();
        let b = tangent_target(&m, &x0, &z, &t, TangentMode::FiniteDifference).unwrap();
        let num: f64 = (&a.df_dt - &b.df_dt).iter().map(|v| v * v).sum::<f64>().sqrt();
        let den: f64 = a.df_dt.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-3, "relative {}", num / den);
        let again = tangent_target(&m, &x0, &z, &t, TangentMode::Exact).unwrap();
        assert_eq!(a.y, again.y);
    }

    #[test]
    fn training_time_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = TimeProposal::default();
        let mut ts: Vec<f64> = (0..100_000).map(|_| sample_training_time(&mut rng, &p, 1.0).value()).collect();
        assert!(ts.iter().all(|&t| t > 0.0 && t < FRAC_PI_2));
        ts.sort_by(f64::total_cmp);
        let median = ts[50_000];
        assert!((median - (-1f64).exp().atan()).abs() < 0.01);
    }

    #[test]
    fn two_step_counts_and_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = rand_t(&mut rng, &[2, 2]);
        let z2 = rand_t(&mut rng, &[2, 2]);
        let m = stub(0.5);
        let big = TimePoint::new(T_TRAIN).unwrap();
        let out = two_step_operator(&m, &z, &z2, big, TimePoint::new(0.0).unwrap()).unwrap();
        assert_eq!(m.evals(), 2);
        let one = m.output(&z, &[T_TRAIN; 2]).unwrap();
        assert_eq!(out, one);
        assert!(two_step_operator(&m, &z, &z2, big, TimePoint::new(1.57).unwrap()).is_err());
    }

    #[test]
    fn two_step_zero_stub_hand_evaluation() {
        let z = Tensor::from_shape_vec(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let z2 = Tensor::from_shape_vec(vec![1, 2], vec![0.5, 0.25]).unwrap();
        let m = stub(0.0);
        let (tb, tp) = (FRAC_PI_2, std::f64::consts::FRAC_PI_4);
        let out = two_step_operator(&m, &z, &z2, TimePoint::new(tb).unwrap(), TimePoint::new(tp).unwrap()).unwrap();
        for k in 0..2 {
            let xhat = tb.cos() * z[[0, k]];
            let want = tp.cos() * (tp.sin() * z2[[0, k]] + tp.cos() * xhat);
            assert!((out[[0, k]] - want).abs() < 1e-15);
        }
    }
}
