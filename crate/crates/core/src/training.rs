//! Flow pretraining, Stage-1 consistency training and Stage-2 min-max
//! physics fine-tuning, plus the joint-training ablation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::{
    forward_diffuse, noise, sample_time_below, sample_training_time, scale_rows, total_derivative,
    ConsistencyModel, TangentMode, TimeProposal, T_TRAIN,
};
use crate::datagen::NormStats;
use crate::error::{Error, Result};
use crate::eval::ManifoldSpec;
use crate::grid::PdeKind;
use crate::nn::{Network, Phase, WeightHead};
use crate::optim::AdamW;
use crate::params::Tensor;
use crate::tape::{sigmoid, Graph, Var};

/// Hyperparameters of one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Learning rate of the network (and weight head).
    pub lr: f64,
    /// Ascent rate of the loss gates.
    pub lr_lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps, applied after `epochs`.
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub lambda_init: [f64; 3],
    pub boundary_weight: f64,
    pub proposal: TimeProposal,
    /// Fixed first time of the two-step operator.
    pub two_step_t: f64,
    pub tangent: TangentMode,
    /// When set, the tangent `cos(t) df/dt` is divided by `||.|| + c`.
    pub tangent_norm: Option<f64>,
    /// Frozen-checksum audit period in steps; 0 disables auditing.
    pub audit_every: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults of each phase: LR, batch size, epochs and gate initialization.
    pub fn for_phase(phase: Phase) -> Self {
        let (lr, batch_size, epochs) = match phase {
            Phase::Pretrain | Phase::Init => (1e-3, 16, 10),
            Phase::Stage1 => (1e-3, 2, 8),
            Phase::Stage2 | Phase::Stage2JointAblation => (1e-4, 2, 1),
        };
        Self {
            phase,
            lr,
            lr_lambda: 1.0,
            batch_size,
            epochs,
            max_steps: None,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            lambda_init: [10.0, -10.0, -10.0],
            boundary_weight: 1.0,
            proposal: TimeProposal::default(),
            two_step_t: T_TRAIN,
            tangent: TangentMode::Auto,
            tangent_norm: None,
            audit_every: 1,
            log_every: 50,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.lr_lambda >= 0.0 && self.lr_lambda.is_finite()) {
            return bad("lambda ascent rate must be non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive");
        }
        if self.weight_decay < 0.0 || self.boundary_weight < 0.0 {
            return bad("weight decay and boundary weight must be non-negative");
        }
        if !(self.proposal.p_std > 0.0) {
            return bad("time proposal std must be positive");
        }
        if !(self.two_step_t > 0.0 && self.two_step_t < std::f64::consts::FRAC_PI_2) {
            return bad("two-step time must lie in (0, pi/2)");
        }
        if self.lambda_init.iter().any(|v| !v.is_finite()) {
            return bad("lambda_init must be finite");
        }
        Ok(())
    }
}

/// Learnable loss gates `sigma(lambda_i)`, updated by plain gradient ascent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SAWeights {
    pub lambda: [f64; 3],
}

impl SAWeights {
    pub fn new(lambda: [f64; 3]) -> Self {
        Self { lambda }
    }

    pub fn gates(&self) -> [f64; 3] {
        self.lambda.map(sigmoid)
    }

    /// `lambda_i += eta * sigma'(lambda_i) * component_i`.
    pub fn ascend(&mut self, components: [f64; 3], eta: f64) {
        for (l, c) in self.lambda.iter_mut().zip(components) {
            let s = sigmoid(*l);
            *l += eta * s * (1.0 - s) * c;
        }
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Stage 2: raw consistency, single-step and two-step terms.
    /// Stage 1: mean `||F - y||^2 / D`, mean `w(t)`, 0. Pretraining: mean squared error, 0, 0.
    pub components: [f64; 3],
    pub gates: [f64; 3],
    pub lambda: [f64; 3],
    pub grad_norm: f64,
    pub checksum_ok: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub phase: Phase,
    pub records: Vec<StepRecord>,
    /// Samples dropped because their tangent was non-finite.
    pub skipped_samples: usize,
    pub checkpoint: Option<PathBuf>,
}

impl StageReport {
    fn new(phase: Phase) -> Self {
        Self {
            phase,
            records: Vec::new(),
            skipped_samples: 0,
            checkpoint: None,
        }
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    /// Mean loss over the first and last `k` steps.
    pub fn loss_trend(&self, k: usize) -> (f64, f64) {
        let n = self.records.len();
        let k = k.min(n).max(1);
        let mean = |r: &[StepRecord]| r.iter().map(|s| s.loss).sum::<f64>() / r.len().max(1) as f64;
        (mean(&self.records[..k.min(n)]), mean(&self.records[n.saturating_sub(k)..]))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "step,epoch,loss,c0,c1,c2,gate0,gate1,gate2,lambda0,lambda1,lambda2,grad_norm,checksum_ok\n",
        );
        for r in &self.records {
            let ok = match r.checksum_ok {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
                r.step,
                r.epoch,
                r.loss,
                r.components[0],
                r.components[1],
                r.components[2],
                r.gates[0],
                r.gates[1],
                r.gates[2],
                r.lambda[0],
                r.lambda[1],
                r.lambda[2],
                r.grad_norm,
                ok
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// The constraint whose residual drives Stage 2.
#[derive(Debug, Clone, PartialEq)]
pub enum Physics {
    /// PDE residual on denormalized `[B, 2, n, n]` states.
    Pde { kind: PdeKind, stats: NormStats, n: usize },
    /// Algebraic constraint `g(x)` on raw `[B, 2]` points.
    Manifold(ManifoldSpec),
}

impl Physics {
    /// Per-sample squared normalized residual, `(||R||_2 h^2)^2` or `g(x)^2`.
    pub fn residual_sq<'g>(&self, x: Var<'g>) -> Var<'g> {
        match self {
            Physics::Pde { kind, stats, n } => {
                let (a, u) = self.denormalized(x, stats, *n);
                let h = 1.0 / (*n as f64 - 1.0);
                Var::pde_residual(*kind, a, u, h).sum_sq_rows().scale(h.powi(4))
            }
            Physics::Manifold(spec) => {
                let gv = spec.g_var(x);
                gv.mul(gv)
            }
        }
    }

    /// Per-sample `||u on the boundary||^2 h`, PDE only.
    pub fn boundary_sq<'g>(&self, x: Var<'g>) -> Option<Var<'g>> {
        match self {
            Physics::Pde { stats, n, .. } => {
                let (_, u) = self.denormalized(x, stats, *n);
                let b = u.shape()[0];
                let n = *n;
                let ring = ArrayD::from_shape_fn(IxDyn(&[b, n, n]), |i| {
                    if i[1] == 0 || i[2] == 0 || i[1] == n - 1 || i[2] == n - 1 {
                        1.0
                    } else {
                        0.0
                    }
                });
                let h = 1.0 / (n as f64 - 1.0);
                Some(u.mul_const(&ring).sum_sq_rows().scale(h))
            }
            Physics::Manifold(_) => None,
        }
    }

    fn denormalized<'g>(&self, x: Var<'g>, stats: &NormStats, n: usize) -> (Var<'g>, Var<'g>) {
        let b = x.shape()[0];
        let d = x.channel_affine(&stats.std, &stats.mean);
        (d.narrow(0, 1).reshape(&[b, n, n]), d.narrow(1, 1).reshape(&[b, n, n]))
    }
}

/// Which channels the consistency term of Stage 2 regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsistencyChannels {
    /// Full state (toy problems and the joint ablation).
    All,
    /// The solution channel only, under the frozen backbone.
    Solution,
}

fn rows_finite(t: &Tensor) -> Vec<bool> {
    let b = t.shape()[0];
    let inner = t.len() / b.max(1);
    let s = t.as_standard_layout();
    let s = s.as_slice().expect("standard layout");
    (0..b)
        .map(|i| s[i * inner..(i + 1) * inner].iter().all(|v| v.is_finite()))
        .collect()
}

fn gather(data: &Tensor, idx: &[usize]) -> Tensor {
    data.select(Axis(0), idx)
}

/// Teacher target `F^- + cos(t) df/dt`, optionally tangent-normalized, with
/// the noised input it belongs to. Rows whose tangent is non-finite are
/// returned in the mask as `false`.
struct Target {
    x_t: Tensor,
    y: Tensor,
    keep: Vec<bool>,
}

fn teacher_target<N: Network>(
    model: &ConsistencyModel<N>,
    x0: &Tensor,
    z: &Tensor,
    t: &[f64],
    cfg: &TrainConfig,
) -> Result<Target> {
    let (x_t, xdot) = forward_diffuse(x0, z, t)?;
    let (fv, dfdt) = total_derivative(model, &x_t, &xdot, t, cfg.tangent)?;
    let cos: Vec<f64> = t.iter().map(|v| v.cos()).collect();
    let mut tangent = scale_rows(&dfdt, &cos);
    if let Some(c) = cfg.tangent_norm {
        let b = t.len();
        let inner = tangent.len() / b;
        let norms: Vec<f64> = tangent
            .as_slice()
            .expect("standard layout")
            .chunks_exact(inner)
            .map(|r| 1.0 / (r.iter().map(|v| v * v).sum::<f64>().sqrt() + c))
            .collect();
        tangent = scale_rows(&tangent, &norms);
    }
    let keep = rows_finite(&tangent);
    Ok(Target {
        x_t,
        y: fv + tangent,
        keep,
    })
}

fn check_components(c: &[f64; 3], names: [&str; 3]) -> Result<()> {
    for (v, n) in c.iter().zip(names) {
        if !v.is_finite() {
            return Err(Error::Training(format!("non-finite {n} term ({v})")));
        }
    }
    Ok(())
}

/// Shuffled minibatch index lists for every epoch, truncated by `max_steps`.
fn batches(rng: &mut ChaCha8Rng, count: usize, cfg: &TrainConfig) -> Vec<(usize, Vec<usize>)> {
    let bs = cfg.batch_size.min(count);
    let mut out = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..count).collect();
        idx.shuffle(rng);
        for chunk in idx.chunks_exact(bs) {
            out.push((epoch, chunk.to_vec()));
        }
    }
    if let Some(m) = cfg.max_steps {
        out.truncate(m);
    }
    out
}

fn check_data(data: &Tensor, shape: &[usize]) -> Result<()> {
    if data.ndim() != shape.len() + 1 || &data.shape()[1..] != shape {
        return Err(Error::Training(format!(
            "data shape {:?} does not match the network state shape {shape:?}",
            data.shape()
        )));
    }
    if data.shape()[0] == 0 {
        return Err(Error::Training("empty training set".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("training data contains non-finite values".into()));
    }
    Ok(())
}

/// Velocity-matching loss `mean ||F(x_t / sigma_d, t) - xdot / sigma_d||^2 / D`.
pub fn pretrain_loss<'g, N: Network>(
    g: &'g Graph,
    model: &ConsistencyModel<N>,
    x0: &Tensor,
    z: &Tensor,
    t: &[f64],
) -> Result<Var<'g>> {
    let (x_t, xdot) = forward_diffuse(x0, z, t)?;
    let d = (x0.len() / t.len()) as f64;
    let fv = model.net.forward(g, g.constant(&x_t / model.sigma_d), t);
    let target = xdot / model.sigma_d;
    Ok(fv.add_const(&-target).sum_sq_rows().mean().scale(1.0 / d))
}

/// Flow pretraining of `model` in place.
pub fn pretrain_flow<N: Network>(model: &mut ConsistencyModel<N>, data: &Tensor, cfg: &TrainConfig) -> Result<StageReport> {
    cfg.validate()?;
    check_data(data, &model.net.state_shape())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut report = StageReport::new(Phase::Pretrain);
    for (step, (epoch, idx)) in batches(&mut rng, data.shape()[0], cfg).into_iter().enumerate() {
        let x0 = gather(data, &idx);
        let z = noise(&mut rng, x0.shape(), model.sigma_d);
        let t: Vec<f64> = idx
            .iter()
            .map(|_| sample_training_time(&mut rng, &cfg.proposal, model.sigma_d).value())
            .collect();
        let g = Graph::new();
        let loss = pretrain_loss(&g, model, &x0, &z, &t)?;
        let lv = loss.item();
        check_components(&[lv, 0.0, 0.0], ["velocity", "", ""])?;
        let grads = g.backward(loss);
        let gn = opt.step(&mut [model.net.store_mut()], &grads, cfg.grad_clip)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("pretrain step {step} epoch {epoch} loss {lv:.4e}");
        }
        report.records.push(StepRecord {
            step,
            epoch,
            loss: lv,
            components: [lv, 0.0, 0.0],
            gates: [1.0, 0.0, 0.0],
            lambda: [0.0; 3],
            grad_norm: gn,
            checksum_ok: None,
        });
    }
    Ok(report)
}

/// `e^w ||r||^2 / D - w`, per sample.
pub fn adaptive_weighted<'g>(sq: Var<'g>, w: Var<'g>, d: f64) -> Var<'g> {
    w.exp().mul(sq).scale(1.0 / d).sub(w)
}

/// Terms of one Stage-1 loss evaluation.
pub struct Stage1Terms<'g> {
    pub total: Var<'g>,
    /// Mean `||F - y||^2 / D` over kept samples.
    pub mse: f64,
    pub mean_w: f64,
    /// Number of samples dropped for a non-finite tangent.
    pub skipped: usize,
}

/// Adaptive-weighted consistency loss. The target is built from a detached
/// copy of the current weights, so only `F` and `w` receive gradients.
#[allow(clippy::too_many_arguments)]
pub fn stage1_loss<'g, N: Network>(
    g: &'g Graph,
    model: &ConsistencyModel<N>,
    head: &WeightHead,
    x0: &Tensor,
    z: &Tensor,
    t: &[f64],
    cfg: &TrainConfig,
) -> Result<Option<Stage1Terms<'g>>> {
    let target = teacher_target(model, x0, z, t, cfg)?;
    let kept: Vec<usize> = (0..t.len()).filter(|&i| target.keep[i]).collect();
    let skipped = t.len() - kept.len();
    if kept.is_empty() {
        return Ok(None);
    }
    let t: Vec<f64> = kept.iter().map(|&i| t[i]).collect();
    let x_t = gather(&target.x_t, &kept);
    let y = gather(&target.y, &kept);
    let d = (x_t.len() / t.len()) as f64;
    let fv = model.net.forward(g, g.constant(&x_t / model.sigma_d), &t);
    let sq = fv.add_const(&-y).sum_sq_rows();
    let w = head.forward(g, &t);
    let mse = sq.value().mean().unwrap_or(0.0) / d;
    let mean_w = w.value().mean().unwrap_or(0.0);
    Ok(Some(Stage1Terms {
        total: adaptive_weighted(sq, w, d).mean(),
        mse,
        mean_w,
        skipped,
    }))
}

/// Stage-1 consistency training of `model` and `head` in place.
pub fn train_stage1<N: Network>(
    model: &mut ConsistencyModel<N>,
    head: &mut WeightHead,
    data: &Tensor,
    cfg: &TrainConfig,
) -> Result<StageReport> {
    cfg.validate()?;
    check_data(data, &model.net.state_shape())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut report = StageReport::new(Phase::Stage1);
    for (step, (epoch, idx)) in batches(&mut rng, data.shape()[0], cfg).into_iter().enumerate() {
        let x0 = gather(data, &idx);
        let z = noise(&mut rng, x0.shape(), model.sigma_d);
        let t: Vec<f64> = idx
            .iter()
            .map(|_| sample_training_time(&mut rng, &cfg.proposal, model.sigma_d).value())
            .collect();
        let g = Graph::new();
        let Some(terms) = stage1_loss(&g, model, head, &x0, &z, &t, cfg)? else {
            log::warn!("stage1 step {step}: every tangent in the batch was non-finite, skipped");
            report.skipped_samples += idx.len();
            continue;
        };
        if terms.skipped > 0 {
            log::warn!("stage1 step {step}: {} samples with non-finite tangent skipped", terms.skipped);
        }
        report.skipped_samples += terms.skipped;
        let lv = terms.total.item();
        check_components(&[lv, terms.mse, terms.mean_w], ["stage1 loss", "mse", "weight"])?;
        let grads = g.backward(terms.total);
        let gn = opt.step(&mut [model.net.store_mut(), head.store_mut()], &grads, cfg.grad_clip)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("stage1 step {step} epoch {epoch} loss {lv:.4e} mse {:.4e} w {:.3}", terms.mse, terms.mean_w);
        }
        report.records.push(StepRecord {
            step,
            epoch,
            loss: lv,
            components: [terms.mse, terms.mean_w, 0.0],
            gates: [1.0, 0.0, 0.0],
            lambda: [0.0; 3],
            grad_norm: gn,
            checksum_ok: None,
        });
    }
    Ok(report)
}

/// Random draws of one Stage-2 minibatch.
#[derive(Debug, Clone)]
pub struct Stage2Batch {
    pub x0: Tensor,
    pub z: Tensor,
    pub t: Vec<f64>,
    /// Initial noise of the two-step operator.
    pub z_two: Tensor,
    /// Renoising noise of the two-step operator.
    pub z_renoise: Tensor,
    /// Second time of the two-step operator, below `two_step_t`.
    pub t2: Vec<f64>,
}

impl Stage2Batch {
    pub fn draw(rng: &mut ChaCha8Rng, x0: Tensor, sigma_d: f64, cfg: &TrainConfig) -> Self {
        let b = x0.shape()[0];
        let shape = x0.shape().to_vec();
        let z = noise(rng, &shape, sigma_d);
        let t = (0..b)
            .map(|_| sample_training_time(rng, &cfg.proposal, sigma_d).value())
            .collect();
        let z_two = noise(rng, &shape, sigma_d);
        let z_renoise = noise(rng, &shape, sigma_d);
        let t2 = (0..b)
            .map(|_| sample_time_below(rng, &cfg.proposal, sigma_d, cfg.two_step_t).value())
            .collect();
        Self {
            x0,
            z,
            t,
            z_two,
            z_renoise,
            t2,
        }
    }
}

/// Terms of one Stage-2 loss evaluation.
pub struct Stage2Terms<'g> {
    pub total: Var<'g>,
    /// Raw (ungated) batch means: consistency, single-step residual plus
    /// weighted boundary penalty, two-step residual.
    pub components: [f64; 3],
    /// Boundary part of the single-step component (already weighted).
    pub boundary: f64,
    /// Number of channels entering the consistency term.
    pub consistency_channels: usize,
    /// Fingerprints of the noised input consumed by the consistency and the
    /// single-step residual terms.
    pub trajectory: [u64; 2],
}

/// FNV-1a over the bit patterns of a tensor.
pub fn fingerprint(t: &Tensor) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in t.iter() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Gated min-max objective of Stage 2, with the current weights as teacher.
pub fn stage2_loss<'g, N: Network>(
    g: &'g Graph,
    model: &ConsistencyModel<N>,
    sa: &SAWeights,
    batch: &Stage2Batch,
    physics: &Physics,
    channels: ConsistencyChannels,
    cfg: &TrainConfig,
) -> Result<Stage2Terms<'g>> {
    stage2_loss_with_teacher(g, model, model, sa, batch, physics, channels, cfg)
}

/// [`stage2_loss`] with an explicit (detached) teacher.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss_with_teacher<'g, N: Network>(
    g: &'g Graph,
    model: &ConsistencyModel<N>,
    teacher: &ConsistencyModel<N>,
    sa: &SAWeights,
    batch: &Stage2Batch,
    physics: &Physics,
    channels: ConsistencyChannels,
    cfg: &TrainConfig,
) -> Result<Stage2Terms<'g>> {
    let target = teacher_target(teacher, &batch.x0, &batch.z, &batch.t, cfg)?;
    if let Some(i) = target.keep.iter().position(|k| !k) {
        return Err(Error::Training(format!("non-finite tangent at t = {}", batch.t[i])));
    }
    // one network evaluation feeds both the consistency and the single-step term
    let (f, fv) = model.output_velocity_var(g, &target.x_t, &batch.t);
    let xt_print = fingerprint(&target.x_t);
    let diff = fv.add_const(&-target.y);
    let (diff, nch) = match channels {
        ConsistencyChannels::All => (diff, diff.shape().get(1).copied().unwrap_or(1)),
        ConsistencyChannels::Solution => {
            if diff.shape().len() != 4 {
                return Err(Error::Training("solution-channel consistency needs [B, 2, n, n] states".into()));
            }
            (diff.narrow(1, 1), 1)
        }
    };
    let c0 = diff.sum_sq_rows().mean();
    let interior = physics.residual_sq(f).mean();
    let (c1, boundary) = match physics.boundary_sq(f) {
        Some(bq) => {
            let bq = bq.mean().scale(cfg.boundary_weight);
            let bv = bq.item();
            (interior.add(bq), bv)
        }
        None => (interior, 0.0),
    };
    let fhat = crate::consistency::two_step_var(model, g, &batch.z_two, &batch.z_renoise, cfg.two_step_t, &batch.t2);
    let c2 = physics.residual_sq(fhat).mean();
    let components = [c0.item(), c1.item(), c2.item()];
    check_components(&components, ["consistency", "single-step residual", "two-step residual"])?;
    let gates = sa.gates();
    let total = c0.scale(gates[0]).add(c1.scale(gates[1])).add(c2.scale(gates[2]));
    Ok(Stage2Terms {
        total,
        components,
        boundary,
        consistency_channels: nch,
        trajectory: [xt_print, xt_print],
    })
}

/// Channel selection implied by the phase and the network.
pub fn consistency_channels<N: Network>(net: &N, phase: Phase) -> ConsistencyChannels {
    if phase == Phase::Stage2 && net.is_partitioned() {
        ConsistencyChannels::Solution
    } else {
        ConsistencyChannels::All
    }
}

/// One descent step on the network and one ascent step on the gates.
pub fn minmax_step<N: Network>(
    model: &mut ConsistencyModel<N>,
    sa: &mut SAWeights,
    opt: &mut AdamW,
    batch: &Stage2Batch,
    physics: &Physics,
    cfg: &TrainConfig,
    step: usize,
    epoch: usize,
) -> Result<StepRecord> {
    let channels = consistency_channels(&model.net, cfg.phase);
    let g = Graph::new();
    let terms = stage2_loss(&g, model, sa, batch, physics, channels, cfg)?;
    let lv = terms.total.item();
    let grads = g.backward(terms.total);
    let store = model.net.store();
    for (i, p) in store.iter() {
        if !p.trainable {
            let zero = grads.param(store.key(i)).is_none_or(|gr| gr.iter().all(|v| *v == 0.0));
            if !zero {
                return Err(Error::Training(format!("frozen parameter {} received a gradient at step {step}", p.name)));
            }
        }
    }
    let gn = opt.step(&mut [model.net.store_mut()], &grads, cfg.grad_clip)?;
    sa.ascend(terms.components, cfg.lr_lambda);
    let audit = cfg.audit_every > 0 && step % cfg.audit_every == 0;
    let checksum_ok = if audit { model.net.frozen_audit() } else { None };
    if checksum_ok == Some(false) {
        return Err(Error::Training(format!("frozen backbone changed at step {step}")));
    }
    Ok(StepRecord {
        step,
        epoch,
        loss: lv,
        components: terms.components,
        gates: sa.gates(),
        lambda: sa.lambda,
        grad_norm: gn,
        checksum_ok,
    })
}

/// Stage-2 min-max fine-tuning (or the joint ablation) of `model` in place.
pub fn train_stage2<N: Network>(
    model: &mut ConsistencyModel<N>,
    sa: &mut SAWeights,
    data: &Tensor,
    physics: &Physics,
    cfg: &TrainConfig,
) -> Result<StageReport> {
    cfg.validate()?;
    check_data(data, &model.net.state_shape())?;
    match cfg.phase {
        Phase::Stage2 => {
            if model.net.is_partitioned() && model.net.frozen_audit().is_none() {
                return Err(Error::Training("stage 2 requires the frozen backbone".into()));
            }
        }
        Phase::Stage2JointAblation => {
            if model.net.frozen_audit().is_some() {
                return Err(Error::Training("the joint ablation requires an unfrozen network".into()));
            }
        }
        p => return Err(Error::Training(format!("train_stage2 called with phase {}", p.name()))),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut report = StageReport::new(cfg.phase);
    for (step, (epoch, idx)) in batches(&mut rng, data.shape()[0], cfg).into_iter().enumerate() {
        let batch = Stage2Batch::draw(&mut rng, gather(data, &idx), model.sigma_d, cfg);
        let rec = minmax_step(model, sa, &mut opt, &batch, physics, cfg, step, epoch)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!(
                "{} step {step} loss {:.4e} terms [{:.3e} {:.3e} {:.3e}] lambda [{:.2} {:.2} {:.2}]",
                cfg.phase.name(),
                rec.loss,
                rec.components[0],
                rec.components[1],
                rec.components[2],
                rec.lambda[0],
                rec.lambda[1],
                rec.lambda[2]
            );
        }
        report.records.push(rec);
    }
    Ok(report)
}
