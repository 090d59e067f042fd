//! End-to-end PDE study: data, pretraining, Stage 1, Stage 2, the joint
//! ablation, and the comparisons between phases.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{coeff_histogram, eval_forward, eval_unconditional, CoeffHistogram, EvalReport};
use crate::consistency::ConsistencyModel;
use crate::datagen::{generate_dataset, DType, Dataset, GenOptions};
use crate::error::{Error, Result};
use crate::grid::{Grid2D, PdeKind};
use crate::inference::{make_schedule, sample_unconditional, ScheduleKind};
use crate::nn::{Checkpoint, Net, NetworkSpec, Phase, WeightHead};
use crate::params::Tensor;
use crate::training::{pretrain_flow, train_stage1, train_stage2, Physics, SAWeights, StageReport, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeStudyConfig {
    pub kind: PdeKind,
    pub n: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub data_seed: u64,
    pub net: NetworkSpec,
    pub sigma_d: f64,
    pub pretrain: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Joint-training ablation, started from the Stage-1 weights.
    pub ablation: Option<TrainConfig>,
    pub uncond_count: usize,
    pub uncond_nfe: usize,
    pub hist_count: usize,
    pub forward_steps: Vec<usize>,
    pub schedule: ScheduleKind,
    pub eval_seed: u64,
    /// Phase checkpoints are reused from here when their inputs match.
    pub cache_dir: Option<PathBuf>,
}

impl PdeStudyConfig {
    /// Desk-scale Darcy study on a 32x32 grid.
    pub fn desk_darcy(seed: u64) -> Self {
        let mut pretrain = TrainConfig::for_phase(Phase::Pretrain);
        pretrain.epochs = 5;
        pretrain.seed = seed ^ 0x11;
        let mut stage1 = TrainConfig::for_phase(Phase::Stage1);
        stage1.epochs = 4;
        stage1.seed = seed ^ 0x22;
        let mut stage2 = TrainConfig::for_phase(Phase::Stage2);
        stage2.lr_lambda = 3e4;
        stage2.audit_every = 10;
        stage2.seed = seed ^ 0x33;
        let mut ablation = stage2.clone();
        ablation.phase = Phase::Stage2JointAblation;
        ablation.audit_every = 0;
        Self {
            kind: PdeKind::Darcy,
            n: 32,
            train_count: 2048,
            test_count: 64,
            data_seed: seed,
            net: NetworkSpec::SplitConv {
                n: 32,
                widths: [16, 32, 64],
                temb_dim: 32,
                seed: seed ^ 0x44,
            },
            sigma_d: 1.0,
            pretrain,
            stage1,
            stage2,
            ablation: Some(ablation),
            uncond_count: 64,
            uncond_nfe: 2,
            hist_count: 128,
            forward_steps: vec![16],
            schedule: ScheduleKind::SigmaUniform,
            eval_seed: seed ^ 0x55,
            cache_dir: None,
        }
    }
}

/// Metrics of one trained phase.
#[derive(Debug, Clone)]
pub struct PhaseEval {
    pub phase: Phase,
    pub unconditional: EvalReport,
    pub forward: Option<EvalReport>,
    pub histogram: CoeffHistogram,
    /// Per-channel std of normalized unconditional samples.
    pub sample_std: [f64; 2],
}

impl PhaseEval {
    pub fn mean_residual(&self) -> f64 {
        let g = format!("nfe={}", self.unconditional.rows[0].nfe);
        self.unconditional.aggregate(&g, "residual").map_or(f64::NAN, |a| a.mean)
    }

    pub fn mean_forward_h1(&self, steps: usize) -> Option<f64> {
        self.forward
            .as_ref()
            .and_then(|r| r.aggregate(&format!("steps={steps}"), "rel_h1"))
            .map(|a| a.mean)
    }
}

#[derive(Debug, Clone)]
pub struct PdeStudyOutcome {
    pub stage1: PhaseEval,
    pub stage2: PhaseEval,
    pub ablation: Option<PhaseEval>,
    /// Reference residual of the test data itself.
    pub data_residual: f64,
    /// Logs of the phases trained in this run (cached phases have none).
    pub reports: Vec<StageReport>,
    pub frozen_intact: bool,
    pub seconds: f64,
}

fn digest(parts: &[&dyn erased::Json]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.json().as_bytes());
    }
    hex::encode(h.finalize())[..16].to_string()
}

mod erased {
    pub trait Json {
        fn json(&self) -> String;
    }
    impl<T: serde::Serialize> Json for T {
        fn json(&self) -> String {
            serde_json::to_string(self).expect("config serializes")
        }
    }
}

fn cached(dir: Option<&Path>, name: &str) -> Option<PathBuf> {
    dir.map(|d| d.join(name))
}

fn load_or<T>(
    path: Option<PathBuf>,
    load: impl Fn(&Path) -> Result<T>,
    make: impl FnOnce() -> Result<T>,
    save: impl Fn(&T, &Path) -> Result<()>,
) -> Result<T> {
    if let Some(p) = &path {
        if p.exists() {
            log::info!("reusing {}", p.display());
            return load(p);
        }
    }
    let v = make()?;
    if let Some(p) = &path {
        save(&v, p)?;
    }
    Ok(v)
}

fn normalized(data: &Dataset, stats: &crate::datagen::NormStats) -> Tensor {
    let idx: Vec<usize> = (0..data.len()).collect();
    data.batch(&idx, stats)
}

fn channel_std(x: &Tensor) -> [f64; 2] {
    let s = x.shape();
    let (b, m) = (s[0], s[2] * s[3]);
    let xs = x.as_slice().expect("standard layout");
    let mut out = [0.0; 2];
    for (c, o) in out.iter_mut().enumerate() {
        let vals: Vec<f64> = (0..b).flat_map(|i| xs[(i * 2 + c) * m..(i * 2 + c + 1) * m].iter().copied()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        *o = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    }
    out
}

fn evaluate(
    cfg: &PdeStudyConfig,
    ck: &Checkpoint,
    test: &Dataset,
    with_forward: bool,
) -> Result<PhaseEval> {
    let grid = Grid2D::new(cfg.n)?;
    let stats = ck.norm_stats;
    let model = ConsistencyModel::new(ck.net.clone(), cfg.sigma_d);
    let (unconditional, _) = eval_unconditional(&model, cfg.kind, grid, &stats, cfg.uncond_count, cfg.uncond_nfe, cfg.eval_seed)?;
    let schedule = make_schedule(cfg.uncond_nfe, ScheduleKind::SigmaUniform, cfg.sigma_d)?;
    let hist_run = sample_unconditional(&model, cfg.hist_count, &schedule, cfg.eval_seed ^ 0x4157)?;
    let histogram = coeff_histogram(&hist_run.states(grid, &stats)?, 60)?;
    let forward = if with_forward {
        Some(eval_forward(&model, test, &stats, &cfg.forward_steps, cfg.schedule, cfg.eval_seed)?)
    } else {
        None
    };
    Ok(PhaseEval {
        phase: ck.phase,
        unconditional,
        forward,
        histogram,
        sample_std: channel_std(&hist_run.samples),
    })
}

/// Runs (or resumes from cache) the full study and evaluates each phase.
pub fn run_pde_study(cfg: &PdeStudyConfig) -> Result<PdeStudyOutcome> {
    let start = Instant::now();
    let dir = cfg.cache_dir.as_deref();
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let grid = Grid2D::new(cfg.n)?;
    let opts = GenOptions::default();
    let data_key = digest(&[&cfg.kind, &cfg.n, &cfg.train_count, &cfg.test_count, &cfg.data_seed]);
    let load_data = |p: &Path| Dataset::load(p);
    let save_data = |d: &Dataset, p: &Path| d.save(p, DType::F64);
    let train = load_or(
        cached(dir, &format!("train-{data_key}.ecmd")),
        load_data,
        || generate_dataset(cfg.kind, cfg.train_count, grid, cfg.data_seed, &opts),
        save_data,
    )?;
    let test = load_or(
        cached(dir, &format!("test-{data_key}.ecmd")),
        load_data,
        || generate_dataset(cfg.kind, cfg.test_count, grid, cfg.data_seed ^ 0x7e57, &opts),
        save_data,
    )?;
    let stats = train.norm_stats;
    let x = normalized(&train, &stats);
    let mut reports = Vec::new();
    let save_ck = |c: &Checkpoint, p: &Path| c.save(p);

    let pre_key = digest(&[&data_key, &cfg.net, &cfg.pretrain, &cfg.sigma_d]);
    let pre = load_or(cached(dir, &format!("pretrain-{pre_key}.ckpt")), Checkpoint::load, || {
        let mut model = ConsistencyModel::new(Net::build(&cfg.net)?, cfg.sigma_d);
        reports.push(pretrain_flow(&mut model, &x, &cfg.pretrain)?);
        Ok(Checkpoint {
            phase: Phase::Pretrain,
            net: model.into_net(),
            head: WeightHead::new(cfg.pretrain.seed),
            norm_stats: stats,
            kind: Some(cfg.kind),
            lambda: None,
        })
    }, save_ck)?;

    let s1_key = digest(&[&pre_key, &cfg.stage1]);
    let s1 = load_or(cached(dir, &format!("stage1-{s1_key}.ckpt")), Checkpoint::load, || {
        let mut model = ConsistencyModel::new(pre.net.clone(), cfg.sigma_d);
        let mut head = pre.head.clone();
        reports.push(train_stage1(&mut model, &mut head, &x, &cfg.stage1)?);
        Ok(Checkpoint {
            phase: Phase::Stage1,
            net: model.into_net(),
            head,
            norm_stats: stats,
            kind: Some(cfg.kind),
            lambda: None,
        })
    }, save_ck)?;

    let physics = Physics::Pde {
        kind: cfg.kind,
        stats,
        n: cfg.n,
    };
    let s2_key = digest(&[&s1_key, &cfg.stage2]);
    let s2 = load_or(cached(dir, &format!("stage2-{s2_key}.ckpt")), Checkpoint::load, || {
        let mut net = s1.net.clone();
        let split = net
            .as_split_mut()
            .ok_or_else(|| Error::Eval("the PDE study needs the split-decoder network".into()))?;
        split.activate_split();
        split.freeze_backbone();
        let mut model = ConsistencyModel::new(net, cfg.sigma_d);
        let mut sa = SAWeights::new(cfg.stage2.lambda_init);
        reports.push(train_stage2(&mut model, &mut sa, &x, &physics, &cfg.stage2)?);
        Ok(Checkpoint {
            phase: Phase::Stage2,
            net: model.into_net(),
            head: s1.head.clone(),
            norm_stats: stats,
            kind: Some(cfg.kind),
            lambda: Some(sa.lambda),
        })
    }, save_ck)?;
    let frozen_intact = s2.net.as_split().is_some_and(|s| {
        s.frozen_checksum() == Some(s.backbone_checksum().as_str())
            && s1.net.as_split().is_some_and(|p| p.backbone_checksum() == s.backbone_checksum())
    });

    let ablation_ck = match &cfg.ablation {
        Some(acfg) => {
            let key = digest(&[&s1_key, acfg]);
            Some(load_or(cached(dir, &format!("ablation-{key}.ckpt")), Checkpoint::load, || {
                let mut net = s1.net.clone();
                if let Some(split) = net.as_split_mut() {
                    split.activate_split();
                    split.unfreeze_all();
                }
                let mut model = ConsistencyModel::new(net, cfg.sigma_d);
                let mut sa = SAWeights::new(acfg.lambda_init);
                reports.push(train_stage2(&mut model, &mut sa, &x, &physics, acfg)?);
                Ok(Checkpoint {
                    phase: Phase::Stage2JointAblation,
                    net: model.into_net(),
                    head: s1.head.clone(),
                    norm_stats: stats,
                    kind: Some(cfg.kind),
                    lambda: Some(sa.lambda),
                })
            }, save_ck)?)
        }
        None => None,
    };

    let data_residual = test
        .samples
        .iter()
        .map(|s| crate::grid::normalized_residual_norm(cfg.kind, s))
        .sum::<Result<f64>>()?
        / test.len() as f64;
    log::info!("evaluating stage 1");
    let stage1 = evaluate(cfg, &s1, &test, true)?;
    log::info!("evaluating stage 2");
    let stage2 = evaluate(cfg, &s2, &test, true)?;
    let ablation = match &ablation_ck {
        Some(ck) => {
            log::info!("evaluating the joint ablation");
            Some(evaluate(cfg, ck, &test, false)?)
        }
        None => None,
    };
    Ok(PdeStudyOutcome {
        stage1,
        stage2,
        ablation,
        data_residual,
        reports,
        frozen_intact,
        seconds: start.elapsed().as_secs_f64(),
    })
}
