use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ecm_core::datagen::DType;
use ecm_core::eval::{self, emit_report, EvalReport, Task};
use ecm_core::inference::{benchmark_walltime, WallClock};
use ecm_core::training::{pretrain_flow, train_stage1, train_stage2};
use ecm_core::{
    generate_dataset, make_schedule, solve_constrained, Checkpoint, ConsistencyModel, Dataset, GenOptions, Grid2D,
    JointState, ManifoldSpec, Mask, Net, NormStats, PdeKind, Phase, Physics, RunConfig, SAWeights, StageReport,
    ToyMode, WeightHead,
};

mod rundir;

use rundir::{init_logging, RunDir, OUTPUT_ROOT_ENV};

#[derive(Parser)]
#[command(name = "ecm", version = env!("CARGO_PKG_VERSION"), about = "Physics-informed consistency models for elliptic PDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set stage2.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Root for run directories. Also read from ECM_OUTPUT_ROOT.
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,
    /// Exact run directory to use instead of a fresh one under the root.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PdeArg {
    Darcy,
    Poisson,
    Helmholtz,
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum EvalTask {
    Forward,
    Inverse,
    Uncond,
    /// Full pipeline from data generation to the three-phase comparison.
    Study,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired coefficient/solution dataset.
    GenData {
        #[arg(long, value_enum)]
        pde: PdeArg,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Helmholtz wavenumber.
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DTypeArg,
        #[command(flatten)]
        common: Common,
    },
    /// Flow-matching pretraining from a fresh network.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: consistency training with adaptive weighting.
    Train1 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2: physics-informed fine-tuning with the backbone frozen.
    Train2 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Train every parameter jointly instead (ablation).
        #[arg(long)]
        ablation: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Unconditional multistep sampling.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory for the outputs.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruct solutions from the coefficients stored in a dataset file.
    SolveForward {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        coeff: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruct coefficients from the solutions stored in a dataset file.
    Invert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        solution: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a test set, or run the whole study.
    Eval {
        #[arg(long, value_enum)]
        task: EvalTask,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated step counts.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Two-dimensional constraint-manifold experiment.
    Toy {
        #[arg(long, default_value = "circle")]
        shape: String,
        #[arg(long, default_value = "two_stage")]
        mode: String,
        #[command(flatten)]
        common: Common,
    },
    /// Wall-clock time of constrained sampling at batch size 1.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![16, 64])]
        steps: Vec<usize>,
        /// Dataset whose first sample provides the observation.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Train1 { common, .. }
            | Command::Train2 { common, .. }
            | Command::Sample { common, .. }
            | Command::SolveForward { common, .. }
            | Command::Invert { common, .. }
            | Command::Eval { common, .. }
            | Command::Toy { common, .. }
            | Command::Bench { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Train1 { .. } => "train1",
            Command::Train2 { .. } => "train2",
            Command::Sample { .. } => "sample",
            Command::SolveForward { .. } => "solve-forward",
            Command::Invert { .. } => "invert",
            Command::Eval { .. } => "eval",
            Command::Toy { .. } => "toy",
            Command::Bench { .. } => "bench",
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::parse_file(p)?,
        None => RunConfig::default(),
    };
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(root) = c.output_root.clone().or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from)) {
        cfg.output_root = root;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Everything a subcommand needs besides its own flags.
struct Ctx {
    cfg: RunConfig,
    dir: RunDir,
}

impl Ctx {
    fn open(cmd: &Command, mut cfg: RunConfig, explicit: Option<&Path>, seed: u64, argv: &[String]) -> Result<Self> {
        cfg.check_paths()?;
        let dir = RunDir::create(cmd.name(), &cfg.output_root, explicit)?;
        init_logging(&dir.file("log.txt"))?;
        dir.record(&cfg, argv, seed)?;
        log::info!("{} {} in {}", cmd.name(), rundir::version_stamp(), dir.path.display());
        cfg.output_root = dir.path.clone();
        Ok(Self { cfg, dir })
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("cannot load dataset {}", path.display()))
}

fn load_ckpt(path: &Path, expect: &[Phase]) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    ensure!(
        expect.contains(&ck.phase),
        "checkpoint {} is from phase {}, expected one of {:?}",
        path.display(),
        ck.phase.name(),
        expect.iter().map(|p| p.name()).collect::<Vec<_>>()
    );
    Ok(ck)
}

fn ckpt_kind(ck: &Checkpoint) -> Result<PdeKind> {
    ck.kind.context("checkpoint carries no PDE kind")
}

fn ckpt_grid(ck: &Checkpoint) -> Result<Grid2D> {
    let n = ck.net.as_split().context("checkpoint does not hold a grid network")?.grid_n();
    Ok(Grid2D::new(n)?)
}

fn check_match(ck: &Checkpoint, data: &Dataset) -> Result<()> {
    let (kind, grid) = (ckpt_kind(ck)?, ckpt_grid(ck)?);
    ensure!(
        kind == data.kind && grid == data.grid,
        "checkpoint is for {} on n = {}, dataset is {} on n = {}",
        kind.name(),
        grid.n(),
        data.kind.name(),
        data.grid.n()
    );
    Ok(())
}

fn normalized(data: &Dataset, stats: &NormStats) -> ecm_core::Tensor {
    let idx: Vec<usize> = (0..data.len()).collect();
    data.batch(&idx, stats)
}

fn finish_training(ctx: &Ctx, report: &StageReport, ck: &Checkpoint) -> Result<()> {
    report.write_csv(&ctx.dir.file("train_log.csv"))?;
    let path = ctx.dir.file("checkpoint.ckpt");
    ck.save(&path)?;
    if let Some(last) = report.last() {
        log::info!("{} finished after {} steps, final loss {:.4e}", report.phase.name(), last.step + 1, last.loss);
    }
    println!("{}", path.display());
    Ok(())
}

/// Runs `steps` constrained solves over every sample of `data` with mask `mask`.
fn conditional(
    ctx: &Ctx,
    ck: &Checkpoint,
    data: &Dataset,
    mask: &Mask,
    steps: usize,
    seed: u64,
    task: Task,
) -> Result<()> {
    check_match(ck, data)?;
    let model = ConsistencyModel::new(ck.net.clone(), ctx.cfg.sigma_d);
    let schedule = make_schedule(steps, ctx.cfg.schedule, ctx.cfg.sigma_d)?;
    let mut report = EvalReport::new(task);
    report.echo("steps", steps);
    report.echo("seed", seed);
    let mut states = Vec::with_capacity(data.len());
    for (i, obs) in data.samples.iter().enumerate() {
        let run = solve_constrained(&model, obs, mask, &ck.norm_stats, &schedule, seed.wrapping_add(i as u64))?;
        let (metric, err) = match task {
            Task::Forward => ("rel_h1", ecm_core::grid::relative_h1(&run.state.u, &obs.u)),
            _ => ("rel_l2", ecm_core::grid::relative_l2(&run.state.a, &obs.a)),
        };
        match err {
            Ok(e) => report.push(&format!("steps={steps}"), i, metric, e, run.nfe),
            Err(e) => log::warn!("sample {i}: no reference in the input file ({e})"),
        }
        states.push(run.state);
    }
    write_states(ctx, data.kind, data.grid, seed, states)?;
    emit_report(&report, &ctx.dir.path)?;
    print!("{}", report.summary_text());
    Ok(())
}

fn write_states(ctx: &Ctx, kind: PdeKind, grid: Grid2D, seed: u64, samples: Vec<JointState>) -> Result<()> {
    let norm_stats = NormStats::compute(&samples)?;
    let out = Dataset {
        kind,
        grid,
        seed,
        samples,
        norm_stats,
    };
    out.save(&ctx.dir.file("samples.ecmd"), DType::F64)?;
    Ok(())
}

fn write_walltime(ctx: &Ctx, rows: &[WallClock]) -> Result<String> {
    let mut table = String::from("method,steps,nfe,median_s,min_s,max_s\n");
    for r in rows {
        table += &format!("consistency,{},{},{:.6},{:.6},{:.6}\n", r.steps, r.nfe, r.median, r.min, r.max);
    }
    std::fs::write(ctx.dir.file("walltime.csv"), &table)?;
    Ok(table)
}

fn run(cmd: Command, argv: &[String]) -> Result<()> {
    let common = cmd.common().clone();
    let mut cfg = load_config(&common)?;
    let explicit = common.run_dir.clone();
    match &cmd {
        Command::GenData {
            pde,
            n,
            count,
            seed,
            out,
            k,
            dtype,
            ..
        } => {
            cfg.kind = match pde {
                PdeArg::Darcy => PdeKind::Darcy,
                PdeArg::Poisson => PdeKind::Poisson,
                PdeArg::Helmholtz => PdeKind::helmholtz(*k)?,
            };
            cfg.n = *n;
            cfg.train_count = *count;
            cfg.data_seed = *seed;
            ensure!(!out.exists(), "refusing to overwrite {}", out.display());
            let ctx = Ctx::open(&cmd, cfg, explicit.as_deref(), *seed, argv)?;
            let grid = Grid2D::new(*n)?;
            let data = generate_dataset(ctx.cfg.kind, *count, grid, *seed, &GenOptions::default())?;
            let dtype = match dtype {
                DTypeArg::F32 => DType::F32,
                DTypeArg::F64 => DType::F64,
            };
            data.save(out, dtype)?;
            log::info!("wrote {} samples to {}", data.len(), out.display());
            println!("{}", out.display());
        }
        Command::Pretrain { data, .. } => {
            let data = load_data(data)?;
            cfg.kind = data.kind;
            cfg.n = data.grid.n();
            let seed = cfg.pretrain.seed;
            let ctx = Ctx::open(&cmd, cfg, explicit.as_deref(), seed, argv)?;
            let stats = data.norm_stats;
            let x = normalized(&data, &stats);
            let mut model = ConsistencyModel::new(Net::build(&ctx.cfg.net_spec())?, ctx.cfg.sigma_d);
            let report = pretrain_flow(&mut model, &x, &ctx.cfg.pretrain)?;
            let ck = Checkpoint {
                phase: Phase::Pretrain,
                net: model.into_net(),
                head: WeightHead::new(ctx.cfg.pretrain.seed),
                norm_stats: stats,
                kind: Some(data.kind),
                lambda: None,
            };
            finish_training(&ctx, &report, &ck)?;
        }
        Command::Train1 { data, ckpt, .. } => {
            let data = load_data(data)?;
            let ck = load_ckpt(ckpt, &[Phase::Init, Phase::Pretrain])?;
            check_match(&ck, &data)?;
            cfg.kind = data.kind;
            cfg.n = data.grid.n();
            let seed = cfg.stage1.seed;
            let ctx = Ctx::open(&cmd, cfg, explicit.as_deref(), seed, argv)?;
            let x = normalized(&data, &ck.norm_stats);
            let mut model = ConsistencyModel::new(ck.net.clone(), ctx.cfg.sigma_d);
            let mut head = ck.head.clone();
            let report = train_stage1(&mut model, &mut head, &x, &ctx.cfg.stage1)?;
            let out = Checkpoint {
                phase: Phase::Stage1,
                net: model.into_net(),
                head,
                ..ck
            };
            finish_training(&ctx, &report, &out)?;
        }
        Command::Train2 { data, ckpt, ablation, .. } => {
            let data = load_data(data)?;
            let ck = load_ckpt(ckpt, &[Phase::Stage1])?;
            check_match(&ck, &data)?;
            cfg.kind = data.kind;
            cfg.n = data.grid.n();
            let tcfg = if *ablation { cfg.ablation.clone() } else { cfg.stage2.clone() };
            let ctx = Ctx::open(&cmd, cfg, explicit.as_deref(), tcfg.seed, argv)?;
            let mut net = ck.net.clone();
            let split = net.as_split_mut().context("stage 2 needs the split-decoder network")?;
            split.activate_split();
            if *ablation {
                split.unfreeze_all();
            } else {
                split.freeze_backbone();
            }
            let physics = Physics::Pde {
                kind: data.kind,
                stats: ck.norm_stats,
                n: data.grid.n(),
            };
            let x = normalized(&data, &ck.norm_stats);
            let mut model = ConsistencyModel::new(net, ctx.cfg.sigma_d);
            let mut sa = SAWeights::new(tcfg.lambda_init);
            let report = train_stage2(&mut model, &mut sa, &x, &physics, &tcfg)?;
            let out = Checkpoint {
                phase: tcfg.phase,
                net: model.into_net(),
                lambda: Some(sa.lambda),
                ..ck
            };
            finish_training(&ctx, &report, &out)?;
        }
        Command::Sample {
            ckpt, steps, count, seed, out, ..
        } => {
            if let Some(s) = steps {
                cfg.sample_steps = *s;
            }
            if let Some(c) = count {
                cfg.sample_count = *c;
            }
            if let Some(s) = seed {
                cfg.sample_seed = *s;
            }
            let ck = Checkpoint::load(ckpt)?;
            let (kind, grid) = (ckpt_kind(&ck)?, ckpt_grid(&ck)?);
            let dir = out.clone().or(explicit);
            let seed = cfg.sample_seed;
            let ctx = Ctx::open(&cmd, cfg, dir.as_deref(), seed, argv)?;
            let c = &ctx.cfg;
            let model = ConsistencyModel::new(ck.net.clone(), c.sigma_d);
            let (report, states) =
                eval::eval_unconditional(&model, kind, grid, &ck.norm_stats, c.sample_count, c.sample_steps, c.sample_seed)?;
            write_states(&ctx, kind, grid, c.sample_seed, states)?;
            emit_report(&report, &ctx.dir.path)?;
            print!("{}", report.summary_text());
        }
        Command::SolveForward {
            ckpt, coeff, steps, seed, ..
        } => {
            let ck = Checkpoint::load(ckpt)?;
            let data = load_data(coeff)?;
            let steps = steps.unwrap_or(cfg.eval_steps[0]);
            let seed = seed.unwrap_or(cfg.eval_seed);
            let ctx = Ctx::open(&cmd, cfg, explicit.as_deref(), seed, argv)?;
            conditional(&ctx, &ck, &data, &Mask::coefficient(data.grid), steps, seed, Task::Forward)?;
        }
        Command::Invert {
            ckpt, solution, steps, seed, ..
        } => {
            let ck = Checkpoint::load(ckpt)?;
            let data = load_data(solution)?;
            ensure!(data.kind != PdeKind::Darcy, "the inverse task is defined for Poisson and Helmholtz data");
            let steps = steps.unwrap_or(cfg.eval_steps[0]);
            let seed = seed.unwrap_or(cfg.eval_seed);
            let ctx = Ctx::open(&cmd, cfg, explicit.as_deref(), seed, argv)?;
            conditional(&ctx, &ck, &data, &Mask::solution(data.grid), steps, seed, Task::Inverse)?;
        }
        Command::Eval {
            task, ckpt, data, steps, ..
        } => {
            if !steps.is_empty() {
                cfg.eval_steps = steps.clone();
            }
            let seed = cfg.eval_seed;
            if *task == EvalTask::Study {
                let ctx = Ctx::open(&cmd, cfg, explicit.as_deref(), seed, argv)?;
                return run_study(&ctx);
            }
            let ck = Checkpoint::load(ckpt.as_deref().context("--ckpt is required for this task")?)?;
            let ctx = Ctx::open(&cmd, cfg, explicit.as_deref(), seed, argv)?;
            let c = &ctx.cfg;
            let model = ConsistencyModel::new(ck.net.clone(), c.sigma_d);
            let report = match task {
                EvalTask::Uncond => {
                    let (kind, grid) = (ckpt_kind(&ck)?, ckpt_grid(&ck)?);
                    let nfe = steps.first().copied().unwrap_or(c.sample_steps);
                    eval::eval_unconditional(&model, kind, grid, &ck.norm_stats, c.eval_count, nfe, seed)?.0
                }
                EvalTask::Forward | EvalTask::Inverse => {
                    let data = load_data(data.as_deref().context("--data is required for this task")?)?;
                    check_match(&ck, &data)?;
                    if *task == EvalTask::Forward {
                        eval::eval_forward(&model, &data, &ck.norm_stats, &c.eval_steps, c.schedule, seed)?
                    } else {
                        eval::eval_inverse(&model, &data, &ck.norm_stats, &c.eval_steps, c.schedule, seed)?
                    }
                }
                EvalTask::Study => unreachable!(),
            };
            emit_report(&report, &ctx.dir.path)?;
            print!("{}", report.summary_text());
        }
        Command::Toy { shape, mode, .. } => {
            let spec = ManifoldSpec::parse(shape)?;
            let mode = ToyMode::parse(mode)?;
            let seed = cfg.toy.seed;
            let ctx = Ctx::open(&cmd, cfg, explicit.as_deref(), seed, argv)?;
            let (report, outcome) = eval::run_toy_experiment(spec, mode, &ctx.cfg.toy)?;
            emit_report(&report, &ctx.dir.path)?;
            for st in &outcome.stages {
                let mean = st.abs_g.iter().sum::<f64>() / st.abs_g.len().max(1) as f64;
                println!("{:<10} mean |g| {:.4e}  coverage {}/{}", st.name, mean, st.coverage, ctx.cfg.toy.bins);
            }
        }
        Command::Bench {
            ckpt, steps, data, repeats, ..
        } => {
            ensure!(!steps.is_empty(), "--steps needs at least one value");
            let ck = Checkpoint::load(ckpt)?;
            let (kind, grid) = (ckpt_kind(&ck)?, ckpt_grid(&ck)?);
            let ctx = Ctx::open(&cmd, cfg, explicit.as_deref(), 0, argv)?;
            let obs = match data {
                Some(p) => {
                    let d = load_data(p)?;
                    check_match(&ck, &d)?;
                    d.samples[0].clone()
                }
                None => generate_dataset(kind, 1, grid, ctx.cfg.data_seed, &GenOptions::default())?.samples.remove(0),
            };
            let model = ConsistencyModel::new(ck.net.clone(), ctx.cfg.sigma_d);
            let mask = Mask::coefficient(grid);
            let rows = steps
                .iter()
                .map(|&s| {
                    let schedule = make_schedule(s, ctx.cfg.schedule, ctx.cfg.sigma_d)?;
                    Ok(benchmark_walltime(&model, &obs, &mask, &ck.norm_stats, &schedule, *repeats)?)
                })
                .collect::<Result<Vec<_>>>()?;
            print!("{}", write_walltime(&ctx, &rows)?);
        }
    }
    Ok(())
}

fn run_study(ctx: &Ctx) -> Result<()> {
    let mut study = ctx.cfg.study();
    study.cache_dir = Some(ctx.dir.file("cache"));
    let out = eval::run_pde_study(&study)?;
    for r in &out.reports {
        r.write_csv(&ctx.dir.file(&format!("train_log_{}.csv", r.phase.name())))?;
    }
    let mut summary = format!("data residual {:.4e}\nfrozen backbone intact: {}\n", out.data_residual, out.frozen_intact);
    let phases = [Some(&out.stage1), Some(&out.stage2), out.ablation.as_ref()];
    for pe in phases.into_iter().flatten() {
        let sub = ctx.dir.file(pe.phase.name());
        emit_report(&pe.unconditional, &sub.join("unconditional"))?;
        if let Some(f) = &pe.forward {
            emit_report(f, &sub.join("forward"))?;
        }
        let mut hist = EvalReport::new(Task::Unconditional);
        hist.push("histogram", 0, "low_mass", pe.histogram.low_mass, 0);
        hist.push("histogram", 0, "high_mass", pe.histogram.high_mass, 0);
        hist.figures.push(pe.histogram.figure("coefficient_histogram"));
        emit_report(&hist, &sub.join("histogram"))?;
        summary += &format!(
            "{}: residual {:.4e}, low/high mass {:.3}/{:.3}",
            pe.phase.name(),
            pe.mean_residual(),
            pe.histogram.low_mass,
            pe.histogram.high_mass
        );
        for &s in &study.forward_steps {
            if let Some(h1) = pe.mean_forward_h1(s) {
                summary += &format!(", forward H1 at N={s} {h1:.4e}");
            }
        }
        summary.push('\n');
    }
    summary += &format!("seconds {:.1}\n", out.seconds);
    std::fs::write(ctx.dir.file("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let module = e
                .chain()
                .find_map(|c| c.downcast_ref::<ecm_core::Error>())
                .map_or("cli", ecm_core::Error::module);
            eprintln!("error: {e:#} (module: {module})");
            ExitCode::from(1)
        }
    }
}
