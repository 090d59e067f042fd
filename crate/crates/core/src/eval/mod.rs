//! Evaluation pipelines and report emission.

mod render;
pub mod study;
pub mod toy;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyModel;
use crate::datagen::{Dataset, NormStats};
use crate::error::{Error, Result};
use crate::grid::{normalized_residual_norm_lenient, relative_h1, relative_l2, residual_lenient, JointState, PdeKind};
use crate::inference::{make_schedule, sample_unconditional, solve_constrained, Mask, ScheduleKind};
use crate::nn::Network;

pub use study::{run_pde_study, PdeStudyConfig, PdeStudyOutcome, PhaseEval};
pub use toy::{train_toy, ManifoldSpec, ToyConfig, ToyMode, ToyOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Forward,
    Inverse,
    Unconditional,
    Toy,
    Bench,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Forward => "forward",
            Task::Inverse => "inverse",
            Task::Unconditional => "unconditional",
            Task::Toy => "toy",
            Task::Bench => "bench",
        }
    }
}

/// One per-sample metric value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Experimental condition, e.g. `steps=16` or `stage2`.
    pub group: String,
    pub index: usize,
    pub metric: String,
    pub value: f64,
    pub nfe: u64,
}

/// Summary statistics of one `(group, metric)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub group: String,
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub nfe: u64,
}

/// Something to draw next to the tables.
#[derive(Debug, Clone, PartialEq)]
pub enum Figure {
    /// Side-by-side scalar fields of equal size, each normalized on its own.
    Fields { name: String, n: usize, panels: Vec<Vec<f64>> },
    Histogram { name: String, lo: f64, hi: f64, counts: Vec<usize> },
    /// Line chart of one or more series over a shared x axis.
    Curves { name: String, series: Vec<Vec<f64>> },
    Scatter { name: String, points: Vec<[f64; 2]> },
}

impl Figure {
    pub fn name(&self) -> &str {
        match self {
            Figure::Fields { name, .. }
            | Figure::Histogram { name, .. }
            | Figure::Curves { name, .. }
            | Figure::Scatter { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub rows: Vec<MetricRow>,
    /// Resolved settings echoed into the summary.
    pub config: Vec<(String, String)>,
    pub figures: Vec<Figure>,
}

impl EvalReport {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            rows: Vec::new(),
            config: Vec::new(),
            figures: Vec::new(),
        }
    }

    pub fn push(&mut self, group: &str, index: usize, metric: &str, value: f64, nfe: u64) {
        self.rows.push(MetricRow {
            group: group.to_string(),
            index,
            metric: metric.to_string(),
            value,
            nfe,
        });
    }

    pub fn echo(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.to_string(), value.to_string()));
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Eval("report has no samples".into()));
        }
        if let Some(r) = self.rows.iter().find(|r| !r.value.is_finite()) {
            return Err(Error::Eval(format!("non-finite {} in group {} sample {}", r.metric, r.group, r.index)));
        }
        Ok(())
    }

    /// Aggregates in first-appearance order of `(group, metric)`.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let k = (r.group.clone(), r.metric.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(group, metric)| {
                let sel: Vec<&MetricRow> = self.rows.iter().filter(|r| r.group == group && r.metric == metric).collect();
                let vals: Vec<f64> = sel.iter().map(|r| r.value).collect();
                let (mean, median, std) = summary(&vals);
                Aggregate {
                    nfe: sel.first().map_or(0, |r| r.nfe),
                    group,
                    metric,
                    count: vals.len(),
                    mean,
                    median,
                    std,
                }
            })
            .collect()
    }

    pub fn aggregate(&self, group: &str, metric: &str) -> Option<Aggregate> {
        self.aggregates().into_iter().find(|a| a.group == group && a.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,index,metric,value,nfe\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:?},{}", r.group, r.index, r.metric, r.value, r.nfe);
        }
        s
    }

    /// Parses the rows written by [`EvalReport::to_csv`].
    pub fn rows_from_csv(text: &str) -> Result<Vec<MetricRow>> {
        let bad = |l: usize| Error::Format(format!("malformed report row {l}"));
        let mut lines = text.lines();
        if lines.next() != Some("group,index,metric,value,nfe") {
            return Err(Error::Format("unexpected report header".into()));
        }
        lines
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, l)| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 5 {
                    return Err(bad(i + 2));
                }
                Ok(MetricRow {
                    group: f[0].to_string(),
                    index: f[1].parse().map_err(|_| bad(i + 2))?,
                    metric: f[2].to_string(),
                    value: f[3].parse().map_err(|_| bad(i + 2))?,
                    nfe: f[4].parse().map_err(|_| bad(i + 2))?,
                })
            })
            .collect()
    }

    pub fn summary_text(&self) -> String {
        let mut s = format!("task: {}\n", self.task.name());
        for (k, v) in &self.config {
            let _ = writeln!(s, "  {k} = {v}");
        }
        let _ = writeln!(s, "\n{:<24} {:<16} {:>6} {:>12} {:>12} {:>12} {:>5}", "group", "metric", "count", "mean", "median", "std", "nfe");
        for a in self.aggregates() {
            let _ = writeln!(
                s,
                "{:<24} {:<16} {:>6} {:>12.4e} {:>12.4e} {:>12.4e} {:>5}",
                a.group, a.metric, a.count, a.mean, a.median, a.std, a.nfe
            );
        }
        s
    }
}

fn summary(v: &[f64]) -> (f64, f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    let median = if k % 2 == 1 { s[k / 2] } else { 0.5 * (s[k / 2 - 1] + s[k / 2]) };
    (mean, median, std)
}

/// Writes `results.csv`, `summary.txt` and one PNG per figure into `out_dir`.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    report.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let csv = out_dir.join("results.csv");
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    written.push(csv);
    let txt = out_dir.join("summary.txt");
    std::fs::write(&txt, report.summary_text()).map_err(|e| Error::io(&txt, e))?;
    written.push(txt);
    for fig in &report.figures {
        let path = out_dir.join(format!("{}.png", fig.name()));
        render::render(fig)
            .save(&path)
            .map_err(|e| Error::Eval(format!("cannot write {}: {e}", path.display())))?;
        written.push(path);
    }
    Ok(written)
}

/// Pixel histogram of coefficient channels with the mass near each mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeffHistogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    /// Fraction of pixels within 1 of the low mode.
    pub low_mass: f64,
    /// Fraction of pixels within 1 of the high mode.
    pub high_mass: f64,
}

impl CoeffHistogram {
    /// `low_mass / high_mass`, infinite when the high mode is empty.
    pub fn ratio(&self) -> f64 {
        self.low_mass / self.high_mass
    }

    pub fn figure(&self, name: &str) -> Figure {
        Figure::Histogram {
            name: name.to_string(),
            lo: self.lo,
            hi: self.hi,
            counts: self.counts.clone(),
        }
    }
}

pub const COEFF_LOW: f64 = 3.0;
pub const COEFF_HIGH: f64 = 12.0;

/// Histogram of every `a` pixel over `[0, 15]` in `bins` bins.
pub fn coeff_histogram(states: &[JointState], bins: usize) -> Result<CoeffHistogram> {
    if states.is_empty() || bins == 0 {
        return Err(Error::Eval("coefficient histogram needs states and bins".into()));
    }
    let (lo, hi) = (0.0, 15.0);
    let mut counts = vec![0usize; bins];
    let (mut low, mut high, mut total) = (0usize, 0usize, 0usize);
    for s in states {
        for &v in s.a.as_slice() {
            if !v.is_finite() {
                return Err(Error::Eval("non-finite coefficient value".into()));
            }
            total += 1;
            if (v - COEFF_LOW).abs() <= 1.0 {
                low += 1;
            }
            if (v - COEFF_HIGH).abs() <= 1.0 {
                high += 1;
            }
            let b = (((v - lo) / (hi - lo)) * bins as f64).floor().clamp(0.0, bins as f64 - 1.0) as usize;
            counts[b] += 1;
        }
    }
    Ok(CoeffHistogram {
        lo,
        hi,
        counts,
        low_mass: low as f64 / total as f64,
        high_mass: high as f64 / total as f64,
    })
}

fn field_panels(states: &[(&str, &JointState)], kind: PdeKind, n: usize, name: &str) -> Result<Figure> {
    let mut panels = Vec::new();
    for (_, s) in states {
        let r = residual_lenient(kind, s)?;
        panels.push(s.a.as_slice().to_vec());
        panels.push(s.u.as_slice().to_vec());
        panels.push(r.as_slice().iter().map(|v| v.abs()).collect());
    }
    Ok(Figure::Fields {
        name: name.to_string(),
        n,
        panels,
    })
}

/// Forward problem: observe `a`, reconstruct `u`, relative H1 error per step count.
pub fn eval_forward<N: Network>(
    model: &ConsistencyModel<N>,
    test: &Dataset,
    stats: &NormStats,
    steps_list: &[usize],
    schedule: ScheduleKind,
    seed: u64,
) -> Result<EvalReport> {
    conditional(model, test, stats, steps_list, schedule, seed, Task::Forward)
}

/// Inverse problem: observe `u`, reconstruct `a`, relative L2 error per step count.
pub fn eval_inverse<N: Network>(
    model: &ConsistencyModel<N>,
    test: &Dataset,
    stats: &NormStats,
    steps_list: &[usize],
    schedule: ScheduleKind,
    seed: u64,
) -> Result<EvalReport> {
    if test.kind == PdeKind::Darcy {
        return Err(Error::Eval("the inverse task is defined for Poisson and Helmholtz data".into()));
    }
    conditional(model, test, stats, steps_list, schedule, seed, Task::Inverse)
}

fn conditional<N: Network>(
    model: &ConsistencyModel<N>,
    test: &Dataset,
    stats: &NormStats,
    steps_list: &[usize],
    kind: ScheduleKind,
    seed: u64,
    task: Task,
) -> Result<EvalReport> {
    if test.is_empty() || steps_list.is_empty() {
        return Err(Error::Eval("need at least one test sample and one step count".into()));
    }
    let mask = match task {
        Task::Forward => Mask::coefficient(test.grid),
        _ => Mask::solution(test.grid),
    };
    let mut report = EvalReport::new(task);
    report.echo("pde", test.kind.name());
    report.echo("test_samples", test.len());
    report.echo("schedule", kind.name());
    report.echo("seed", seed);
    for &steps in steps_list {
        let schedule = make_schedule(steps, kind, model.sigma_d)?;
        let group = format!("steps={steps}");
        for (i, truth) in test.samples.iter().enumerate() {
            let run = solve_constrained(model, truth, &mask, stats, &schedule, seed.wrapping_add(i as u64))?;
            let err = match task {
                Task::Forward => relative_h1(&run.state.u, &truth.u)?,
                _ => relative_l2(&run.state.a, &truth.a)?,
            };
            let metric = if task == Task::Forward { "rel_h1" } else { "rel_l2" };
            report.push(&group, i, metric, err, run.nfe);
            if i == 0 {
                report.figures.push(field_panels(
                    &[("truth", truth), ("estimate", &run.state)],
                    test.kind,
                    test.grid.n(),
                    &format!("{}_steps{steps}_sample0", task.name()),
                )?);
            }
        }
    }
    Ok(report)
}

/// Unconditional samples at `nfe` evaluations, scored by the normalized residual.
pub fn eval_unconditional<N: Network>(
    model: &ConsistencyModel<N>,
    kind: PdeKind,
    grid: crate::grid::Grid2D,
    stats: &NormStats,
    count: usize,
    nfe: usize,
    seed: u64,
) -> Result<(EvalReport, Vec<JointState>)> {
    let schedule = make_schedule(nfe, ScheduleKind::SigmaUniform, model.sigma_d)?;
    let run = sample_unconditional(model, count, &schedule, seed)?;
    let states = run.states(grid, stats)?;
    let mut report = EvalReport::new(Task::Unconditional);
    report.echo("pde", kind.name());
    report.echo("count", count);
    report.echo("seed", seed);
    let group = format!("nfe={}", run.nfe);
    for (i, s) in states.iter().enumerate() {
        report.push(&group, i, "residual", normalized_residual_norm_lenient(kind, s)?, run.nfe);
    }
    let shown: Vec<(&str, &JointState)> = states.iter().take(3).map(|s| ("sample", s)).collect();
    report.figures.push(field_panels(&shown, kind, grid.n(), "unconditional_residual_maps")?);
    if kind == PdeKind::Darcy {
        report.figures.push(coeff_histogram(&states, 60)?.figure("coefficient_histogram"));
    }
    Ok((report, states))
}

/// Toy study as a report: per-sample `|g|` and the coverage of every phase.
pub fn run_toy_experiment(spec: ManifoldSpec, mode: ToyMode, cfg: &ToyConfig) -> Result<(EvalReport, ToyOutcome)> {
    let out = train_toy(spec, mode, cfg)?;
    let mut report = EvalReport::new(Task::Toy);
    report.echo("shape", spec.name());
    report.echo("mode", mode.name());
    report.echo("seed", cfg.seed);
    report.echo("train_points", cfg.train_points);
    report.echo("eval_samples", cfg.eval_samples);
    let nfe = cfg.sample_steps as u64;
    for st in &out.stages {
        for (i, g) in st.abs_g.iter().enumerate() {
            report.push(&st.name, i, "abs_g", *g, nfe);
        }
        report.push(&st.name, 0, "coverage", st.coverage, nfe);
        report.figures.push(Figure::Scatter {
            name: format!("toy_{}_{}", mode.name(), st.name),
            points: st.samples.as_slice().expect("standard layout").chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        });
    }
    for r in &out.reports {
        report.figures.push(Figure::Curves {
            name: format!("toy_{}_{}_loss", mode.name(), r.phase.name()),
            series: vec![r.records.iter().map(|s| s.loss).collect()],
        });
    }
    Ok((report, out))
}
