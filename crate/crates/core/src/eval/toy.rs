//! 2D toy manifolds with algebraic constraint functions.

use std::f64::consts::PI;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyModel;
use crate::error::{Error, Result};
use crate::inference::{make_schedule, sample_unconditional, ScheduleKind};
use crate::nn::{NetworkSpec, Phase, ToyMlp, WeightHead};
use crate::params::Tensor;
use crate::tape::Var;
use crate::training::{pretrain_flow, train_stage1, train_stage2, Physics, SAWeights, StageReport, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum ManifoldSpec {
    /// `x1^2 + x2^2 - r^2`.
    Circle { radius: f64 },
    /// `(x1/a)^2 + (x2/b)^2 - 1`.
    Ellipse { a: f64, b: f64 },
    /// Product of two ellipse constraints centred at `(+-offset, 0)`.
    DoubleEllipse { a: f64, b: f64, offset: f64 },
}

impl ManifoldSpec {
    pub fn circle() -> Self {
        ManifoldSpec::Circle { radius: 1.0 }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "circle" => Ok(Self::circle()),
            "ellipse" => Ok(ManifoldSpec::Ellipse { a: 1.5, b: 0.75 }),
            "double_ellipse" => Ok(ManifoldSpec::DoubleEllipse {
                a: 0.8,
                b: 0.5,
                offset: 1.0,
            }),
            other => Err(Error::Eval(format!("unknown manifold `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ManifoldSpec::Circle { .. } => "circle",
            ManifoldSpec::Ellipse { .. } => "ellipse",
            ManifoldSpec::DoubleEllipse { .. } => "double_ellipse",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ManifoldSpec::Circle { radius } => radius > 0.0,
            ManifoldSpec::Ellipse { a, b } => a > 0.0 && b > 0.0,
            // components must not overlap so the product has two separate loops
            ManifoldSpec::DoubleEllipse { a, b, offset } => a > 0.0 && b > 0.0 && offset > a,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Eval(format!("invalid manifold parameters {self:?}")))
        }
    }

    /// Centres of the connected components.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        match *self {
            ManifoldSpec::DoubleEllipse { offset, .. } => vec![[-offset, 0.0], [offset, 0.0]],
            _ => vec![[0.0, 0.0]],
        }
    }

    pub fn g(&self, x: [f64; 2]) -> f64 {
        match *self {
            ManifoldSpec::Circle { radius } => x[0] * x[0] + x[1] * x[1] - radius * radius,
            ManifoldSpec::Ellipse { a, b } => ellipse(x, 0.0, a, b),
            ManifoldSpec::DoubleEllipse { a, b, offset } => ellipse(x, -offset, a, b) * ellipse(x, offset, a, b),
        }
    }

    /// `g` on a batch `[B, 2]`, differentiable, returning `[B]`.
    pub fn g_var<'g>(&self, x: Var<'g>) -> Var<'g> {
        let b = x.shape()[0];
        match *self {
            ManifoldSpec::Circle { radius } => x.sum_sq_rows().add_scalar(-radius * radius),
            ManifoldSpec::Ellipse { a, b: bb } => ellipse_var(x, b, 0.0, a, bb),
            ManifoldSpec::DoubleEllipse { a, b: bb, offset } => {
                ellipse_var(x, b, -offset, a, bb).mul(ellipse_var(x, b, offset, a, bb))
            }
        }
    }

    /// `count` points exactly on the manifold, spread uniformly in angle.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Tensor {
        let mut v = Vec::with_capacity(2 * count);
        for i in 0..count {
            let th = rng.random::<f64>() * 2.0 * PI;
            let p = match *self {
                ManifoldSpec::Circle { radius } => [radius * th.cos(), radius * th.sin()],
                ManifoldSpec::Ellipse { a, b } => [a * th.cos(), b * th.sin()],
                ManifoldSpec::DoubleEllipse { a, b, offset } => {
                    let c = if i % 2 == 0 { -offset } else { offset };
                    [c + a * th.cos(), b * th.sin()]
                }
            };
            v.extend(p);
        }
        ArrayD::from_shape_vec(IxDyn(&[count, 2]), v).expect("shape")
    }

    /// Fraction of occupied angle bins, `bins` per component, with bin edges
    /// starting at `offset` radians. Each point is assigned to the nearest centre.
    pub fn angular_coverage(&self, points: &Tensor, bins: usize, offset: f64) -> f64 {
        let centers = self.centers();
        let mut hit = vec![false; bins * centers.len()];
        for p in points.rows_2d() {
            let (k, c) = centers
                .iter()
                .enumerate()
                .min_by(|a, b| dist2(p, *a.1).total_cmp(&dist2(p, *b.1)))
                .expect("at least one centre");
            let ang = (p[1] - c[1]).atan2(p[0] - c[0]) - offset;
            let frac = ang.rem_euclid(2.0 * PI) / (2.0 * PI);
            let bin = ((frac * bins as f64) as usize).min(bins - 1);
            hit[k * bins + bin] = true;
        }
        hit.iter().filter(|h| **h).count() as f64 / hit.len() as f64
    }

    /// Mean of `|g|` over the rows of `points`.
    pub fn mean_abs_g(&self, points: &Tensor) -> f64 {
        let rows = points.rows_2d();
        rows.iter().map(|p| self.g(*p).abs()).sum::<f64>() / rows.len().max(1) as f64
    }
}

fn ellipse(x: [f64; 2], cx: f64, a: f64, b: f64) -> f64 {
    let (u, v) = ((x[0] - cx) / a, x[1] / b);
    u * u + v * v - 1.0
}

fn ellipse_var<'g>(x: Var<'g>, batch: usize, cx: f64, a: f64, b: f64) -> Var<'g> {
    let shift = ArrayD::from_shape_fn(IxDyn(&[batch, 2]), |i| if i[1] == 0 { -cx } else { 0.0 });
    let scale = ArrayD::from_shape_fn(IxDyn(&[batch, 2]), |i| if i[1] == 0 { 1.0 / a } else { 1.0 / b });
    x.add_const(&shift).mul_const(&scale).sum_sq_rows().add_scalar(-1.0)
}

fn dist2(p: [f64; 2], c: [f64; 2]) -> f64 {
    (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)
}

trait Rows2d {
    fn rows_2d(&self) -> Vec<[f64; 2]>;
}

impl Rows2d for Tensor {
    fn rows_2d(&self) -> Vec<[f64; 2]> {
        self.as_standard_layout()
            .as_slice()
            .expect("standard layout")
            .chunks_exact(2)
            .map(|c| [c[0], c[1]])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyMode {
    /// Pretraining, Stage 1, then Stage 2 with the constraint residual.
    TwoStage,
    /// The composite Stage-2 objective optimized from scratch.
    DirectPhysics,
}

impl ToyMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "two_stage" => Ok(ToyMode::TwoStage),
            "direct_physics" => Ok(ToyMode::DirectPhysics),
            other => Err(Error::Eval(format!("unknown toy mode `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ToyMode::TwoStage => "two_stage",
            ToyMode::DirectPhysics => "direct_physics",
        }
    }
}

/// Everything the toy study needs. Sizes are not given by the method
/// description, so these are desk choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub net: NetworkSpec,
    pub sigma_d: f64,
    pub train_points: usize,
    pub eval_samples: usize,
    /// Sampling steps; 2 gives two network evaluations.
    pub sample_steps: usize,
    pub bins: usize,
    pub pretrain: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Composite-loss run of the direct mode.
    pub direct: TrainConfig,
    pub seed: u64,
}

impl ToyConfig {
    pub fn desk(seed: u64) -> Self {
        let mut pretrain = TrainConfig::for_phase(Phase::Pretrain);
        pretrain.batch_size = 128;
        pretrain.epochs = 40;
        pretrain.seed = seed ^ 1;
        let mut stage1 = TrainConfig::for_phase(Phase::Stage1);
        stage1.batch_size = 128;
        stage1.epochs = 40;
        stage1.seed = seed ^ 2;
        let mut stage2 = TrainConfig::for_phase(Phase::Stage2);
        stage2.batch_size = 128;
        stage2.epochs = 10;
        stage2.lr = 1e-4;
        stage2.lr_lambda = 1e4;
        stage2.seed = seed ^ 3;
        let mut direct = stage2.clone();
        direct.lr = 1e-3;
        direct.epochs = pretrain.epochs + stage1.epochs + stage2.epochs;
        direct.lambda_init = [10.0, 10.0, 10.0];
        direct.seed = seed ^ 4;
        Self {
            net: NetworkSpec::toy_default(seed),
            sigma_d: 1.0,
            train_points: 4096,
            eval_samples: 2000,
            sample_steps: 2,
            bins: 36,
            pretrain,
            stage1,
            stage2,
            direct,
            seed,
        }
    }
}

/// Sample-quality metrics after one phase of the toy study.
#[derive(Debug, Clone)]
pub struct ToyStage {
    pub name: String,
    pub samples: Tensor,
    pub abs_g: Vec<f64>,
    pub mean_abs_g: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub spec: ManifoldSpec,
    pub mode: ToyMode,
    pub data: Tensor,
    pub stages: Vec<ToyStage>,
    pub reports: Vec<StageReport>,
}

impl ToyOutcome {
    pub fn stage(&self, name: &str) -> Option<&ToyStage> {
        self.stages.iter().find(|s| s.name == name)
    }
}

fn measure(
    spec: &ManifoldSpec,
    model: &ConsistencyModel<ToyMlp>,
    cfg: &ToyConfig,
    name: &str,
) -> Result<ToyStage> {
    let schedule = make_schedule(cfg.sample_steps, ScheduleKind::SigmaUniform, cfg.sigma_d)?;
    let run = sample_unconditional(model, cfg.eval_samples, &schedule, cfg.seed ^ 0x5eed)?;
    let abs_g: Vec<f64> = run.samples.rows_2d().iter().map(|p| spec.g(*p).abs()).collect();
    if abs_g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eval(format!("{name}: non-finite toy samples")));
    }
    Ok(ToyStage {
        name: name.to_string(),
        mean_abs_g: abs_g.iter().sum::<f64>() / abs_g.len() as f64,
        coverage: spec.angular_coverage(&run.samples, cfg.bins, 0.0),
        abs_g,
        samples: run.samples,
    })
}

/// Trains on points of `spec` and measures constraint error and coverage.
pub fn train_toy(spec: ManifoldSpec, mode: ToyMode, cfg: &ToyConfig) -> Result<ToyOutcome> {
    use rand::SeedableRng;
    spec.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let data = spec.sample(&mut rng, cfg.train_points);
    let mut model = ConsistencyModel::new(ToyMlp::build(&cfg.net)?, cfg.sigma_d);
    let physics = Physics::Manifold(spec);
    let mut stages = Vec::new();
    let mut reports = Vec::new();
    match mode {
        ToyMode::TwoStage => {
            reports.push(pretrain_flow(&mut model, &data, &cfg.pretrain)?);
            let mut head = WeightHead::new(cfg.seed ^ 7);
            reports.push(train_stage1(&mut model, &mut head, &data, &cfg.stage1)?);
            stages.push(measure(&spec, &model, cfg, "stage1")?);
            let mut sa = SAWeights::new(cfg.stage2.lambda_init);
            reports.push(train_stage2(&mut model, &mut sa, &data, &physics, &cfg.stage2)?);
            stages.push(measure(&spec, &model, cfg, "stage2")?);
        }
        ToyMode::DirectPhysics => {
            let mut sa = SAWeights::new(cfg.direct.lambda_init);
            reports.push(train_stage2(&mut model, &mut sa, &data, &physics, &cfg.direct)?);
            stages.push(measure(&spec, &model, cfg, "direct")?);
        }
    }
    Ok(ToyOutcome {
        spec,
        mode,
        data,
        stages,
        reports,
    })
}
