//! Versioned run configuration in a flat `key = value` format.
//!
//! Every key has a default. Values equal to the reference training
//! hyperparameters carry the `paper` label in the echo; reduced desk-scale
//! values carry `desk`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::consistency::TangentMode;
use crate::error::{Error, Result};
use crate::eval::{PdeStudyConfig, ToyConfig};
use crate::grid::PdeKind;
use crate::inference::ScheduleKind;
use crate::nn::{NetworkSpec, Phase};
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Phase blocks of the config, in key-prefix order.
pub const PHASES: [&str; 4] = ["pretrain", "stage1", "stage2", "ablation"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kind: PdeKind,
    pub n: usize,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub train_count: usize,
    pub test_count: usize,
    pub data_seed: u64,
    pub widths: [usize; 3],
    pub temb_dim: usize,
    pub net_seed: u64,
    pub sigma_d: f64,
    pub pretrain: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub ablation: TrainConfig,
    pub sample_steps: usize,
    pub sample_count: usize,
    pub sample_seed: u64,
    pub schedule: ScheduleKind,
    pub eval_steps: Vec<usize>,
    pub eval_count: usize,
    pub eval_seed: u64,
    pub hist_count: usize,
    pub toy: ToyConfig,
    pub output_root: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let study = PdeStudyConfig::desk_darcy(0);
        let NetworkSpec::SplitConv { widths, temb_dim, .. } = study.net else {
            unreachable!("the desk study uses the split network")
        };
        Self {
            kind: study.kind,
            n: study.n,
            train_data: None,
            test_data: None,
            train_count: study.train_count,
            test_count: study.test_count,
            data_seed: 0,
            widths,
            temb_dim,
            net_seed: 0,
            sigma_d: study.sigma_d,
            pretrain: study.pretrain,
            stage1: study.stage1,
            stage2: study.stage2,
            ablation: study.ablation.expect("desk study runs the ablation"),
            sample_steps: 2,
            sample_count: 16,
            sample_seed: 0,
            schedule: ScheduleKind::SigmaUniform,
            eval_steps: vec![16, 32, 64],
            eval_count: 64,
            eval_seed: 0,
            hist_count: study.hist_count,
            toy: ToyConfig::desk(0),
            output_root: PathBuf::from("runs"),
        }
    }
}

/// Reference hyperparameter of a key, when there is one.
fn reference_value(key: &str, kind: PdeKind) -> Option<String> {
    let stage2_epochs = if kind == PdeKind::Darcy { "1" } else { "2" };
    let v = match key {
        "pretrain.lr" | "stage1.lr" => "0.001",
        "stage2.lr" | "ablation.lr" => "0.0001",
        "pretrain.batch_size" => "16",
        "stage1.batch_size" | "stage2.batch_size" | "ablation.batch_size" => "2",
        "pretrain.epochs" => "10",
        "stage1.epochs" => "8",
        "stage2.epochs" | "ablation.epochs" => stage2_epochs,
        "stage2.lambda_init" | "ablation.lambda_init" => "10,-10,-10",
        "grid_n" => "128",
        "eval_count" => "256",
        "helmholtz_k" => "1",
        _ => return None,
    };
    Some(v.to_string())
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("key `{key}`: expected {what}, got `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse_num(key, p.trim(), what)).collect()
}

fn opt_f64(key: &str, v: &str) -> Result<Option<f64>> {
    let x: f64 = parse_num(key, v, "a number")?;
    Ok((x > 0.0).then_some(x))
}

fn fmt_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn tangent_name(m: TangentMode) -> &'static str {
    match m {
        TangentMode::Auto => "auto",
        TangentMode::Exact => "exact",
        TangentMode::FiniteDifference => "finite_difference",
    }
}

fn set_train(c: &mut TrainConfig, field: &str, key: &str, v: &str) -> Result<()> {
    match field {
        "lr" => c.lr = parse_num(key, v, "a number")?,
        "lr_lambda" => c.lr_lambda = parse_num(key, v, "a number")?,
        "batch_size" => c.batch_size = parse_num(key, v, "an integer")?,
        "epochs" => c.epochs = parse_num(key, v, "an integer")?,
        "max_steps" => {
            let m: usize = parse_num(key, v, "an integer")?;
            c.max_steps = (m > 0).then_some(m);
        }
        "weight_decay" => c.weight_decay = parse_num(key, v, "a number")?,
        "grad_clip" => c.grad_clip = opt_f64(key, v)?,
        "lambda_init" => {
            let l: Vec<f64> = parse_list(key, v, "three numbers")?;
            c.lambda_init = l
                .try_into()
                .map_err(|_| Error::Config(format!("key `{key}`: expected three numbers, got `{v}`")))?;
        }
        "boundary_weight" => c.boundary_weight = parse_num(key, v, "a number")?,
        "p_mean" => c.proposal.p_mean = parse_num(key, v, "a number")?,
        "p_std" => c.proposal.p_std = parse_num(key, v, "a number")?,
        "two_step_t" => c.two_step_t = parse_num(key, v, "a number")?,
        "tangent" => {
            c.tangent = match v {
                "auto" => TangentMode::Auto,
                "exact" => TangentMode::Exact,
                "finite_difference" => TangentMode::FiniteDifference,
                _ => return Err(Error::Config(format!("key `{key}`: unknown tangent mode `{v}`"))),
            }
        }
        "tangent_norm" => c.tangent_norm = opt_f64(key, v)?,
        "audit_every" => c.audit_every = parse_num(key, v, "an integer")?,
        "log_every" => c.log_every = parse_num(key, v, "an integer")?,
        "seed" => c.seed = parse_num(key, v, "an integer")?,
        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
    }
    Ok(())
}

fn train_entries(prefix: &str, c: &TrainConfig) -> Vec<(String, String)> {
    let k = |f: &str| format!("{prefix}.{f}");
    vec![
        (k("lr"), c.lr.to_string()),
        (k("lr_lambda"), c.lr_lambda.to_string()),
        (k("batch_size"), c.batch_size.to_string()),
        (k("epochs"), c.epochs.to_string()),
        (k("max_steps"), c.max_steps.unwrap_or(0).to_string()),
        (k("weight_decay"), c.weight_decay.to_string()),
        (k("grad_clip"), c.grad_clip.unwrap_or(0.0).to_string()),
        (k("lambda_init"), fmt_list(&c.lambda_init)),
        (k("boundary_weight"), c.boundary_weight.to_string()),
        (k("p_mean"), c.proposal.p_mean.to_string()),
        (k("p_std"), c.proposal.p_std.to_string()),
        (k("two_step_t"), c.two_step_t.to_string()),
        (k("tangent"), tangent_name(c.tangent).to_string()),
        (k("tangent_norm"), c.tangent_norm.unwrap_or(0.0).to_string()),
        (k("audit_every"), c.audit_every.to_string()),
        (k("log_every"), c.log_every.to_string()),
        (k("seed"), c.seed.to_string()),
    ]
}

impl RunConfig {
    /// Parses a config file; see [`RunConfig::parse_str`].
    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Applies every `key = value` line on top of the defaults. `#` starts a
    /// comment. Unknown or repeated keys are errors.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        let mut helmholtz_k: Option<f64> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("key `{key}` given twice")));
            }
            seen.push(key.to_string());
            if key == "helmholtz_k" {
                helmholtz_k = Some(parse_num(key, value, "a number")?);
                continue;
            }
            cfg.set(key, value)?;
        }
        if let Some(k) = helmholtz_k {
            match cfg.kind {
                PdeKind::Helmholtz { .. } => cfg.kind = PdeKind::helmholtz(k)?,
                _ => return Err(Error::Config("key `helmholtz_k` needs pde = helmholtz".into())),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let num = |what| move |x: &str| parse_num::<u64>(key, x, what);
        match key {
            "schema_version" => {
                let s: u32 = parse_num(key, v, "an integer")?;
                if s != SCHEMA_VERSION {
                    return Err(Error::Config(format!(
                        "key `schema_version`: found {s}, this build reads {SCHEMA_VERSION}"
                    )));
                }
            }
            "pde" => {
                let k = match self.kind {
                    PdeKind::Helmholtz { k } => k,
                    _ => 1.0,
                };
                self.kind = PdeKind::parse(v, k).map_err(|_| Error::Config(format!("key `pde`: unknown PDE `{v}`")))?;
            }
            "grid_n" => self.n = parse_num(key, v, "an integer")?,
            "data.train" => self.train_data = Some(PathBuf::from(v)),
            "data.test" => self.test_data = Some(PathBuf::from(v)),
            "data.train_count" => self.train_count = parse_num(key, v, "an integer")?,
            "data.test_count" => self.test_count = parse_num(key, v, "an integer")?,
            "data.seed" => self.data_seed = num("an integer")(v)?,
            "net.widths" => {
                let w: Vec<usize> = parse_list(key, v, "three integers")?;
                self.widths = w
                    .try_into()
                    .map_err(|_| Error::Config(format!("key `{key}`: expected three integers, got `{v}`")))?;
            }
            "net.temb_dim" => self.temb_dim = parse_num(key, v, "an integer")?,
            "net.seed" => self.net_seed = num("an integer")(v)?,
            "sigma_d" => self.sigma_d = parse_num(key, v, "a number")?,
            "sample.steps" => self.sample_steps = parse_num(key, v, "an integer")?,
            "sample.count" => self.sample_count = parse_num(key, v, "an integer")?,
            "sample.seed" => self.sample_seed = num("an integer")(v)?,
            "sample.schedule" => self.schedule = ScheduleKind::parse(v).map_err(|e| Error::Config(format!("key `{key}`: {e}")))?,
            "eval.steps" => self.eval_steps = parse_list(key, v, "integers")?,
            "eval_count" => self.eval_count = parse_num(key, v, "an integer")?,
            "eval.seed" => self.eval_seed = num("an integer")(v)?,
            "eval.hist_count" => self.hist_count = parse_num(key, v, "an integer")?,
            "toy.train_points" => self.toy.train_points = parse_num(key, v, "an integer")?,
            "toy.eval_samples" => self.toy.eval_samples = parse_num(key, v, "an integer")?,
            "toy.seed" => self.toy.seed = num("an integer")(v)?,
            "output_root" => self.output_root = PathBuf::from(v),
            _ => {
                let (prefix, field) = key
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
                let c = match prefix {
                    "pretrain" => &mut self.pretrain,
                    "stage1" => &mut self.stage1,
                    "stage2" => &mut self.stage2,
                    "ablation" => &mut self.ablation,
                    "toy_pretrain" => &mut self.toy.pretrain,
                    "toy_stage1" => &mut self.toy.stage1,
                    "toy_stage2" => &mut self.toy.stage2,
                    "toy_direct" => &mut self.toy.direct,
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                };
                set_train(c, field, key, v)?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        self.net_spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        for (name, c) in [
            ("pretrain", &self.pretrain),
            ("stage1", &self.stage1),
            ("stage2", &self.stage2),
            ("ablation", &self.ablation),
        ] {
            c.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if self.train_count == 0 || self.test_count == 0 || self.eval_count == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if self.sample_steps == 0 || self.eval_steps.iter().any(|s| *s == 0) {
            return Err(Error::Config("step counts must be positive".into()));
        }
        if !(self.sigma_d > 0.0) {
            return Err(Error::Config("sigma_d must be positive".into()));
        }
        Ok(())
    }

    /// Checks that every referenced input file exists.
    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.train_data, &self.test_data].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("dataset {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn net_spec(&self) -> NetworkSpec {
        NetworkSpec::SplitConv {
            n: self.n,
            widths: self.widths,
            temb_dim: self.temb_dim,
            seed: self.net_seed,
        }
    }

    /// Training config of a phase with the per-phase defaults applied.
    pub fn train_config(&self, phase: Phase) -> &TrainConfig {
        match phase {
            Phase::Init | Phase::Pretrain => &self.pretrain,
            Phase::Stage1 => &self.stage1,
            Phase::Stage2 => &self.stage2,
            Phase::Stage2JointAblation => &self.ablation,
        }
    }

    /// All keys with their resolved values, in echo order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let s = |k: &str, v: String| (k.to_string(), v);
        let mut e = vec![
            s("schema_version", SCHEMA_VERSION.to_string()),
            s("pde", self.kind.name().to_string()),
        ];
        if let PdeKind::Helmholtz { k } = self.kind {
            e.push(s("helmholtz_k", k.to_string()));
        }
        e.extend([
            s("grid_n", self.n.to_string()),
            s("data.train_count", self.train_count.to_string()),
            s("data.test_count", self.test_count.to_string()),
            s("data.seed", self.data_seed.to_string()),
        ]);
        if let Some(p) = &self.train_data {
            e.push(s("data.train", p.display().to_string()));
        }
        if let Some(p) = &self.test_data {
            e.push(s("data.test", p.display().to_string()));
        }
        e.extend([
            s("net.widths", fmt_list(&self.widths)),
            s("net.temb_dim", self.temb_dim.to_string()),
            s("net.seed", self.net_seed.to_string()),
            s("sigma_d", self.sigma_d.to_string()),
        ]);
        for (p, c) in PHASES.iter().zip([&self.pretrain, &self.stage1, &self.stage2, &self.ablation]) {
            e.extend(train_entries(p, c));
        }
        e.extend([
            s("sample.steps", self.sample_steps.to_string()),
            s("sample.count", self.sample_count.to_string()),
            s("sample.seed", self.sample_seed.to_string()),
            s("sample.schedule", self.schedule.name().to_string()),
            s("eval.steps", fmt_list(&self.eval_steps)),
            s("eval_count", self.eval_count.to_string()),
            s("eval.seed", self.eval_seed.to_string()),
            s("eval.hist_count", self.hist_count.to_string()),
            s("toy.train_points", self.toy.train_points.to_string()),
            s("toy.eval_samples", self.toy.eval_samples.to_string()),
            s("toy.seed", self.toy.seed.to_string()),
        ]);
        for (p, c) in [
            ("toy_pretrain", &self.toy.pretrain),
            ("toy_stage1", &self.toy.stage1),
            ("toy_stage2", &self.toy.stage2),
            ("toy_direct", &self.toy.direct),
        ] {
            e.extend(train_entries(p, c));
        }
        e.push(s("output_root", self.output_root.display().to_string()));
        e
    }

    /// Resolved config with a `paper` or `desk` label on every line. The
    /// output parses back to the same config.
    pub fn echo(&self) -> String {
        let mut out = String::from("# resolved run configuration\n");
        for (k, v) in self.entries() {
            let label = match reference_value(&k, self.kind) {
                Some(p) if values_equal(&p, &v) => "paper",
                _ => "desk",
            };
            let _ = writeln!(out, "{k} = {v}  # {label}");
        }
        out
    }

    /// Study settings for the end-to-end PDE pipeline.
    pub fn study(&self) -> PdeStudyConfig {
        let mut ablation = self.ablation.clone();
        ablation.phase = Phase::Stage2JointAblation;
        PdeStudyConfig {
            kind: self.kind,
            n: self.n,
            train_count: self.train_count,
            test_count: self.test_count,
            data_seed: self.data_seed,
            net: self.net_spec(),
            sigma_d: self.sigma_d,
            pretrain: self.pretrain.clone(),
            stage1: self.stage1.clone(),
            stage2: self.stage2.clone(),
            ablation: Some(ablation),
            uncond_count: self.eval_count,
            uncond_nfe: self.sample_steps,
            hist_count: self.hist_count,
            forward_steps: self.eval_steps.clone(),
            schedule: self.schedule,
            eval_seed: self.eval_seed,
            cache_dir: None,
        }
    }
}

fn values_equal(a: &str, b: &str) -> bool {
    let nums = |s: &str| s.split(',').map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>();
    match (nums(a), nums(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse_str("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse_str("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn lambda_init_parses() {
        let c = RunConfig::parse_str("stage2.lambda_init = 10,-10,-10").unwrap();
        assert_eq!(c.stage2.lambda_init, [10.0, -10.0, -10.0]);
    }

    #[test]
    fn strict_keys_and_types() {
        let e = RunConfig::parse_str("stage2.lamda_init = 1,2,3").unwrap_err();
        assert!(e.to_string().contains("stage2.lamda_init"));
        let e = RunConfig::parse_str("grid_n = big").unwrap_err();
        assert!(e.to_string().contains("grid_n"));
        let e = RunConfig::parse_str("schema_version = 9").unwrap_err();
        assert!(e.to_string().contains("schema_version"));
        assert!(RunConfig::parse_str("grid_n = 32\ngrid_n = 32").is_err());
    }

    #[test]
    fn echo_round_trips_and_labels() {
        let mut c = RunConfig::default();
        c.stage1.epochs = 8;
        c.kind = PdeKind::helmholtz(1.0).unwrap();
        let text = c.echo();
        assert!(text.contains("stage1.epochs = 8  # paper"));
        assert!(text.contains("stage2.lambda_init = 10,-10,-10  # paper"));
        assert!(text.contains("grid_n = 32  # desk"));
        assert_eq!(RunConfig::parse_str(&text).unwrap(), c);
    }
}
