//! Experiment drivers behind the command line tool: configuration, synthetic
//! data, single runs, parameter sweeps, diagnostics and the kernel self-test.
//!
//! Every driver writes into an output directory it is given and returns an
//! in-memory summary. Replicate `r` of a sweep uses seed `seed + r` for both
//! its dataset and its feature bank.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    check_trajectory_bounds, first_certified_q, init_condition, q_threshold_sweep, verify_pl_along_run, PlContext,
    PlReport, PlStepCheck, TrajectoryCheck,
};
use crate::embedding::{EmbeddingPair, EmbeddingVariant};
use crate::error::{Error, Result};
use crate::flow::{ControlPath, Dataset, FlowModel};
use crate::io::{fmt17, read_dataset_csv, write_dataset_csv};
use crate::kernels::{beta, derivatives_at_zero, eval_kernel, kappa, kernel_deficit, KernelSpec};
use crate::rff::FeatureBank;
use crate::trainer::{init_control, train_from, TrainConfig, TrainLog, TrainOutcome, TrainRecord, TrainStatus};

/// RNG stream for synthetic datasets.
const DATA_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NuValue {
    Number(f64),
    Name(String),
}

impl NuValue {
    pub fn to_spec(&self) -> Result<KernelSpec> {
        match self {
            NuValue::Number(nu) => KernelSpec::matern(*nu),
            NuValue::Name(s) => s.parse(),
        }
    }

    pub fn from_spec(spec: KernelSpec) -> Self {
        if spec.is_gaussian() {
            NuValue::Name("inf".into())
        } else {
            NuValue::Number(spec.nu())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    SweepQ,
    SweepQInt,
    Diagnose,
    KernelSelftest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KappaChoice {
    Analytic,
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub d: usize,
    pub d_out: usize,
    pub noise: f64,
    /// CSV dataset; replaces the synthetic generator when set.
    pub dataset: Option<String>,
    pub nu: NuValue,
    pub q: usize,
    pub q_int: usize,
    pub steps: usize,
    pub eta: f64,
    pub max_steps: usize,
    pub target_loss: f64,
    pub init_scale: f64,
    pub seed: u64,
    /// `canonical` or `experiment`; unset picks the command default.
    pub embedding: Option<String>,
    pub backtracking: bool,
    pub track_spectrum: bool,
    pub q_values: Vec<usize>,
    /// `sweep-q` uses `q_int = q_int_factor * q`.
    pub q_int_factor: usize,
    pub q_int_values: Vec<usize>,
    pub replicates: usize,
    /// Ball radius `R` for the convergence diagnostics.
    pub radius: f64,
    /// `empirical` (bank κ̂) or `analytic` (κ of the kernel).
    pub kappa: String,
    pub diagnose_q_values: Vec<usize>,
    /// Discretisation slack numerator for the trajectory estimates.
    pub lemma_slack: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 10,
            d: 2,
            d_out: 2,
            noise: 0.2,
            dataset: None,
            nu: NuValue::Number(2.5),
            q: 30,
            q_int: 64,
            steps: 32,
            eta: 1.0,
            max_steps: 500,
            target_loss: 1e-10,
            init_scale: 0.0,
            seed: 0,
            embedding: None,
            backtracking: true,
            track_spectrum: true,
            q_values: vec![2, 8, 32],
            q_int_factor: 2,
            q_int_values: vec![8, 30, 120],
            replicates: 12,
            radius: 1.0,
            kappa: "empirical".into(),
            diagnose_q_values: (1..=20).map(|k| 1usize << k).collect(),
            lemma_slack: 5.0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn spec(&self) -> Result<KernelSpec> {
        self.nu.to_spec()
    }

    pub fn variant(&self, command: Command) -> Result<EmbeddingVariant> {
        match &self.embedding {
            Some(s) => s.parse(),
            None => Ok(match command {
                Command::Diagnose => EmbeddingVariant::Canonical,
                _ => EmbeddingVariant::Experiment,
            }),
        }
    }

    pub fn kappa_choice(&self) -> Result<KappaChoice> {
        match self.kappa.trim().to_ascii_lowercase().as_str() {
            "empirical" => Ok(KappaChoice::Empirical),
            "analytic" => Ok(KappaChoice::Analytic),
            other => Err(Error::Config(format!(
                "kappa must be 'empirical' or 'analytic', got '{other}'"
            ))),
        }
    }

    pub fn validate(&self, command: Command) -> Result<()> {
        self.spec()?;
        self.variant(command)?;
        self.kappa_choice()?;
        if self.n == 0 || self.d == 0 || self.d_out == 0 {
            return Err(Error::Config("n, d and d_out must be at least 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be nonnegative, got {}", self.noise)));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!("radius must be positive, got {}", self.radius)));
        }
        if !(self.lemma_slack >= 0.0) {
            return Err(Error::Config("lemma_slack must be nonnegative".into()));
        }
        match command {
            Command::SweepQ if self.q_values.is_empty() || self.q_int_factor == 0 => Err(Error::Config(
                "sweep-q needs nonempty q_values and q_int_factor >= 1".into(),
            )),
            Command::SweepQInt if self.q_int_values.is_empty() => {
                Err(Error::Config("sweep-qint needs nonempty q_int_values".into()))
            }
            Command::Diagnose if self.diagnose_q_values.is_empty() => {
                Err(Error::Config("diagnose needs nonempty diagnose_q_values".into()))
            }
            _ => self
                .train_config(self.q, self.q_int, self.seed, EmbeddingVariant::Experiment)?
                .validate(),
        }
    }

    pub fn train_config(&self, q: usize, q_int: usize, seed: u64, variant: EmbeddingVariant) -> Result<TrainConfig> {
        Ok(TrainConfig {
            eta: self.eta,
            max_steps: self.max_steps,
            target_loss: self.target_loss,
            seed,
            init_scale: self.init_scale,
            steps: self.steps,
            q,
            q_int,
            spec: self.spec()?,
            variant,
            backtracking: self.backtracking,
            track_spectrum: self.track_spectrum,
        })
    }

    /// Dataset from the CSV file if configured, else synthetic with `seed`.
    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        match &self.dataset {
            Some(path) => {
                let f = File::open(path).map_err(|e| Error::Config(format!("cannot open dataset {path}: {e}")))?;
                let (xs, ys) = read_dataset_csv(BufReader::new(f))?;
                Dataset::new(xs, ys)
            }
            None => synth_dataset(self.n, self.d, self.d_out, self.noise, seed),
        }
    }

    /// The configuration with command defaults filled in.
    pub fn resolved(&self, command: Command) -> Result<Self> {
        let mut out = self.clone();
        out.embedding = Some(self.variant(command)?.to_string());
        out.nu = NuValue::from_spec(self.spec()?);
        Ok(out)
    }

    pub fn write_resolved(&self, command: Command, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.resolved(command)?).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join("config.resolved.json"), text + "\n")?;
        Ok(())
    }
}

/// `x ~ N(0, I_d)`, `y = -x + noise ε`; when `d != d'` the targets are pure
/// noise. ChaCha8 stream 2; redraws until no two inputs coincide.
pub fn synth_dataset(n: usize, d: usize, d_out: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 || d_out == 0 {
        return Err(Error::InvalidDimension(format!(
            "synthetic dataset needs n, d, d' >= 1, got {n}, {d}, {d_out}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);
    loop {
        let mut draw = |len: usize| DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x = draw(d);
            let eps = draw(d_out);
            let y = if d == d_out { -&x + eps * noise } else { eps * noise };
            xs.push(x);
            ys.push(y);
        }
        let data = Dataset::new(xs, ys)?;
        if data.separation() > 0.0 {
            return Ok(data);
        }
    }
}

/// Result of one training run together with its diagnostics.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub report: PlReport,
    pub pl_checks: Vec<PlStepCheck>,
}

impl RunResult {
    pub fn log(&self) -> &TrainLog {
        &self.outcome.log
    }

    pub fn pl_upper_passes(&self) -> usize {
        self.pl_checks.iter().filter(|c| c.upper_ok).count()
    }

    pub fn pl_lower_passes(&self) -> usize {
        self.pl_checks.iter().filter(|c| c.lower_ok).count()
    }
}

fn kappa_for(choice: KappaChoice, bank: &FeatureBank) -> f64 {
    match choice {
        KappaChoice::Analytic => kappa(bank.spec()),
        KappaChoice::Empirical => bank.kappa_hat(),
    }
}

/// Trains one configuration and checks the PL sandwich along the run.
pub fn run_single(cfg: &TrainConfig, data: &Dataset, radius: f64, choice: KappaChoice) -> Result<RunResult> {
    cfg.validate()?;
    let bank = FeatureBank::sample(cfg.q, cfg.q_int, cfg.spec, cfg.seed)?;
    let pair = EmbeddingPair::new(cfg.variant, cfg.q, data.d(), data.d_out())?;
    let model = FlowModel::new(bank, pair)?;
    let start = init_control(cfg, model.bank())?;
    let report = start_report(&model, &start, data, radius, choice)?;
    let mut outcome = train_from(cfg, model, start, data)?;
    outcome.log.report = Some(report.clone());
    let pl_checks = verify_pl_along_run(&outcome.log, &report);
    Ok(RunResult {
        outcome,
        report,
        pl_checks,
    })
}

fn start_report(
    model: &FlowModel,
    start: &ControlPath,
    data: &Dataset,
    radius: f64,
    choice: KappaChoice,
) -> Result<PlReport> {
    let k = kappa_for(choice, model.bank());
    let grad = model.gradient(start, data)?;
    let ctx = PlContext::new(data, model.pair(), model.bank().spec(), k)?
        .with_empirical_lambda(grad.bundle.min_gram_eigenvalue());
    init_condition(&ctx, radius, start.norm(), grad.loss)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn write_run_files(dir: &Path, run: &RunResult, data: &Dataset) -> Result<()> {
    create_dir(dir)?;
    run.log()
        .write_csv(BufWriter::new(File::create(dir.join("train_log.csv"))?))?;
    fs::write(dir.join("pl_report.txt"), run.report.to_text())?;
    write_pl_checks(&dir.join("pl_checks.csv"), &run.pl_checks)?;
    write_dataset_csv(
        BufWriter::new(File::create(dir.join("dataset.csv"))?),
        data.inputs(),
        data.targets(),
    )?;
    run.outcome
        .control
        .write_to(BufWriter::new(File::create(dir.join("control.bin"))?))?;
    run.outcome
        .model
        .bank()
        .write_to(BufWriter::new(File::create(dir.join("bank.bin"))?))?;
    Ok(())
}

fn write_pl_checks(path: &Path, checks: &[PlStepCheck]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "step,grad_sq_norm,lower_bound,upper_bound,lower_ok,upper_ok,required_lambda"
    )?;
    for c in checks {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            c.step,
            fmt17(c.grad_sq_norm),
            fmt17(c.lower_bound),
            fmt17(c.upper_bound),
            c.lower_ok,
            c.upper_ok,
            fmt17(c.required_lambda)
        )?;
    }
    Ok(())
}

/// Single `train` run written to `out`.
pub fn run_train(config: &ExperimentConfig, out: &Path) -> Result<RunResult> {
    config.validate(Command::Train)?;
    create_dir(out)?;
    config.write_resolved(Command::Train, out)?;
    let data = config.dataset(config.seed)?;
    let cfg = config.train_config(config.q, config.q_int, config.seed, config.variant(Command::Train)?)?;
    let run = run_single(&cfg, &data, config.radius, config.kappa_choice()?)?;
    write_run_files(out, &run, &data)?;
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Q,
    QInt,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Q => "q",
            SweepParam::QInt => "qint",
        }
    }

    fn command(self) -> Command {
        match self {
            SweepParam::Q => Command::SweepQ,
            SweepParam::QInt => Command::SweepQInt,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub replicate: usize,
    pub seed: u64,
    pub result: std::result::Result<RunResult, String>,
}

impl SweepRun {
    pub fn status(&self) -> String {
        match &self.result {
            Ok(r) => r.log().status.to_string(),
            Err(e) => format!("error: {e}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub param: usize,
    pub q: usize,
    pub q_int: usize,
    pub runs: Vec<SweepRun>,
    pub mean_loss: Vec<f64>,
    pub std_loss: Vec<f64>,
}

impl SweepCell {
    pub fn final_mean_loss(&self) -> f64 {
        *self.mean_loss.last().expect("nonempty curve")
    }
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub param: SweepParam,
    pub cells: Vec<SweepCell>,
    pub csv_path: PathBuf,
}

/// Loss curve padded to `len` entries by holding its final value.
fn padded_losses(log: &TrainLog, len: usize) -> Vec<f64> {
    let mut l = log.losses();
    let last = *l.last().unwrap_or(&f64::NAN);
    l.resize(len, last);
    l
}

fn aggregate(curves: &[Vec<f64>], len: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![f64::NAN; len];
    let mut std = vec![f64::NAN; len];
    if curves.is_empty() {
        return (mean, std);
    }
    let n = curves.len() as f64;
    for k in 0..len {
        let m = curves.iter().map(|c| c[k]).sum::<f64>() / n;
        let var = if curves.len() > 1 {
            curves.iter().map(|c| (c[k] - m).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        mean[k] = m;
        std[k] = var.sqrt();
    }
    (mean, std)
}

/// Sweep over `q` (with `q_int = q_int_factor q`) or over `q_int` at fixed
/// `q`, `replicates` seeds per cell, on a pool of `jobs` workers.
pub fn run_sweep(config: &ExperimentConfig, param: SweepParam, out: &Path, jobs: usize) -> Result<SweepSummary> {
    let command = param.command();
    config.validate(command)?;
    let variant = config.variant(command)?;
    let choice = config.kappa_choice()?;
    create_dir(out)?;
    config.write_resolved(command, out)?;

    let cells: Vec<(usize, usize, usize)> = match param {
        SweepParam::Q => config
            .q_values
            .iter()
            .map(|&q| (q, q, config.q_int_factor * q))
            .collect(),
        SweepParam::QInt => config.q_int_values.iter().map(|&qi| (qi, config.q, qi)).collect(),
    };
    let tasks: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..config.replicates).map(move |r| (c, r)))
        .collect();

    let run_task = |&(c, r): &(usize, usize)| -> SweepRun {
        let (p, q, q_int) = cells[c];
        let seed = config.seed.wrapping_add(r as u64);
        let result = (|| -> Result<RunResult> {
            let data = config.dataset(seed)?;
            let cfg = config.train_config(q, q_int, seed, variant)?;
            let run = run_single(&cfg, &data, config.radius, choice)?;
            let dir = out
                .join("runs")
                .join(format!("{}_{p}", param.name()))
                .join(format!("seed_{seed}"));
            write_run_files(&dir, &run, &data)?;
            Ok(run)
        })()
        .map_err(|e| e.to_string());
        SweepRun {
            replicate: r,
            seed,
            result,
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut results: Vec<SweepRun> = pool.install(|| tasks.par_iter().map(run_task).collect());

    let len = config.max_steps + 1;
    let mut summary_cells = Vec::with_capacity(cells.len());
    for (c, &(p, q, q_int)) in cells.iter().enumerate().rev() {
        let runs: Vec<SweepRun> = results.split_off(c * config.replicates);
        let curves: Vec<Vec<f64>> = runs
            .iter()
            .filter_map(|r| r.result.as_ref().ok())
            .filter(|r| !matches!(r.log().status, TrainStatus::Diverged { .. }))
            .map(|r| padded_losses(r.log(), len))
            .collect();
        let (mean_loss, std_loss) = aggregate(&curves, len);
        summary_cells.push(SweepCell {
            param: p,
            q,
            q_int,
            runs,
            mean_loss,
            std_loss,
        });
    }
    summary_cells.reverse();

    let csv_path = out.join(format!("sweep_{}.csv", param.name()));
    let mut w = BufWriter::new(File::create(&csv_path)?);
    writeln!(w, "param,step,mean_loss,std_loss")?;
    for cell in &summary_cells {
        for k in 0..len {
            writeln!(
                w,
                "{},{k},{},{}",
                cell.param,
                fmt17(cell.mean_loss[k]),
                fmt17(cell.std_loss[k])
            )?;
        }
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(out.join(format!("sweep_{}_status.csv", param.name())))?);
    writeln!(
        w,
        "param,replicate,seed,status,steps,final_loss,pl_lower_pass,pl_upper_pass"
    )?;
    for cell in &summary_cells {
        for run in &cell.runs {
            let (steps, final_loss, lo, up) = match &run.result {
                Ok(r) => (
                    r.log().records.len(),
                    fmt17(r.log().final_loss().unwrap_or(f64::NAN)),
                    r.pl_lower_passes(),
                    r.pl_upper_passes(),
                ),
                Err(_) => (0, fmt17(f64::NAN), 0, 0),
            };
            writeln!(
                w,
                "{},{},{},{},{steps},{final_loss},{lo},{up}",
                cell.param,
                run.replicate,
                run.seed,
                run.status().replace(',', ";")
            )?;
        }
    }
    w.flush()?;

    Ok(SweepSummary {
        param,
        cells: summary_cells,
        csv_path,
    })
}

/// One named pass/fail line.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

#[derive(Debug, Clone)]
pub struct DiagnoseSummary {
    pub report: PlReport,
    pub checks: Vec<Check>,
    /// Smallest certified and satisfied `q` of the threshold sweep, when
    /// no checkpoint was given.
    pub q_star: Option<usize>,
}

impl DiagnoseSummary {
    /// The PL and trajectory checks; the initial condition is informative.
    pub fn checks_passed(&self) -> bool {
        self.checks
            .iter()
            .filter(|c| c.name != "init_condition")
            .all(|c| c.passed)
    }
}

/// Trained state to diagnose: control and feature bank files.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub control: PathBuf,
    pub bank: PathBuf,
}

fn point_checks(
    model: &FlowModel,
    control: &ControlPath,
    data: &Dataset,
    report: &PlReport,
    slack: f64,
) -> Result<(Vec<Check>, TrajectoryCheck)> {
    let grad = model.gradient(control, data)?;
    let v_norm = control.norm();
    let log = TrainLog {
        records: vec![TrainRecord {
            step: 0,
            loss: grad.loss,
            grad_sq_norm: grad.sq_norm(),
            v_norm,
            v_dist_init: 0.0,
            eta: f64::NAN,
            lambda_min_traj: grad.bundle.min_gram_eigenvalue(),
            wallclock: 0.0,
        }],
        status: TrainStatus::MaxSteps,
        report: None,
    };
    let pl = verify_pl_along_run(&log, report)[0];
    let traj = check_trajectory_bounds(&grad.bundle, data, model.pair(), report.kappa_used, v_norm, slack)?;
    let checks = vec![
        Check::new(
            "pl_upper",
            pl.upper_ok,
            format!(
                "grad_sq_norm={} upper={}",
                fmt17(pl.grad_sq_norm),
                fmt17(pl.upper_bound)
            ),
        ),
        Check::new(
            "pl_lower",
            pl.lower_ok,
            format!(
                "grad_sq_norm={} lower={} required_lambda={}",
                fmt17(pl.grad_sq_norm),
                fmt17(pl.lower_bound),
                fmt17(pl.required_lambda)
            ),
        ),
        Check::new(
            "trajectory_separation",
            traj.separation_ok(),
            format!("min_ratio={}", fmt17(traj.separation_ratio)),
        ),
        Check::new(
            "adjoint_sandwich",
            traj.adjoint_ok(),
            format!(
                "lower_ratio={} upper_ratio={}",
                fmt17(traj.adjoint_lower_ratio),
                fmt17(traj.adjoint_upper_ratio)
            ),
        ),
    ];
    Ok((checks, traj))
}

/// Largest bank built for the zero-control check after a threshold sweep.
const MAX_DIAGNOSE_BANK: usize = 1 << 22;

/// Diagnostics at a checkpoint, or the q-threshold sweep at `v⁰ = 0`.
pub fn run_diagnose(config: &ExperimentConfig, out: &Path, checkpoint: Option<&Checkpoint>) -> Result<DiagnoseSummary> {
    config.validate(Command::Diagnose)?;
    create_dir(out)?;
    config.write_resolved(Command::Diagnose, out)?;
    let data = config.dataset(config.seed)?;
    if data.separation() <= 0.0 {
        return Err(Error::DegenerateData("two inputs coincide (separation 0)".into()));
    }
    let spec = config.spec()?;
    let variant = config.variant(Command::Diagnose)?;

    let (report, mut checks, q_star) = match checkpoint {
        Some(cp) => {
            let bank = FeatureBank::read_from(BufReader::new(File::open(&cp.bank)?))?;
            let control = ControlPath::read_from(BufReader::new(File::open(&cp.control)?))?;
            let pair = EmbeddingPair::new(variant, bank.q(), data.d(), data.d_out())?;
            let model = FlowModel::new(bank, pair)?;
            let k = kappa_for(config.kappa_choice()?, model.bank());
            let grad = model.gradient(&control, &data)?;
            let ctx = PlContext::new(&data, model.pair(), model.bank().spec(), k)?
                .with_empirical_lambda(grad.bundle.min_gram_eigenvalue());
            let report = init_condition(&ctx, config.radius, control.norm(), grad.loss)?;
            let (checks, _) = point_checks(&model, &control, &data, &report, config.lemma_slack)?;
            (report, checks, None)
        }
        None => {
            let k = kappa(spec);
            let points = q_threshold_sweep(&data, spec, k, config.radius, &config.diagnose_q_values)?;
            let mut w = BufWriter::new(File::create(out.join("q_threshold.csv"))?);
            writeln!(
                w,
                "q,sigma_min_A,sigma_B,lambda_lower,lambda_certified,loss0,init_lhs,mu,init_satisfied"
            )?;
            for p in &points {
                let r = &p.report;
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{}",
                    p.q,
                    fmt17(r.sigma_min_a),
                    fmt17(r.sigma_max_b),
                    fmt17(r.lambda_lower),
                    r.lambda_certified,
                    fmt17(r.loss0),
                    fmt17(r.init_lhs),
                    fmt17(r.mu),
                    r.init_satisfied
                )?;
            }
            w.flush()?;
            let q_star = first_certified_q(&points);
            let chosen = points
                .iter()
                .find(|p| Some(p.q) == q_star)
                .unwrap_or_else(|| points.last().expect("nonempty sweep"));
            let mut checks = Vec::new();
            let q_int = config.q_int;
            if chosen.q.saturating_mul(q_int) <= MAX_DIAGNOSE_BANK {
                let bank = FeatureBank::sample(chosen.q, q_int, spec, config.seed)?;
                let pair = EmbeddingPair::new(EmbeddingVariant::Canonical, chosen.q, data.d(), data.d_out())?;
                let model = FlowModel::new(bank, pair)?;
                let zero = ControlPath::zeros(config.steps, chosen.q, model.bank().width())?;
                let (c, _) = point_checks(&model, &zero, &data, &chosen.report, config.lemma_slack)?;
                checks = c;
            }
            (chosen.report.clone(), checks, q_star)
        }
    };

    checks.insert(
        0,
        Check::new(
            "init_condition",
            report.init_satisfied,
            format!(
                "init_lhs={} R={} certified={}{}",
                fmt17(report.init_lhs),
                fmt17(report.r),
                report.lambda_certified,
                q_star.map_or(String::new(), |q| format!(" q_star={q}"))
            ),
        ),
    );
    fs::write(out.join("pl_report.txt"), report.to_text())?;
    let mut lines: String = checks.iter().map(|c| c.line() + "\n").collect();
    if checkpoint.is_none() && q_star.is_none() {
        lines.push_str("NOTE no swept q satisfies the certified condition\n");
    }
    fs::write(out.join("checks.txt"), lines)?;
    Ok(DiagnoseSummary { report, checks, q_star })
}

/// Median absolute error of the RFF kernel over `pairs` points and `banks`
/// independent banks of width `q_int`.
pub fn rff_median_error(
    spec: KernelSpec,
    q: usize,
    pairs: &[(DVector<f64>, DVector<f64>)],
    exact: &[f64],
    q_int: usize,
    banks: usize,
    seed: u64,
) -> Result<f64> {
    let mut errs = Vec::with_capacity(pairs.len() * banks);
    for b in 0..banks {
        let bank = FeatureBank::sample(q, q_int, spec, seed.wrapping_add(b as u64))?;
        for ((z, zp), k) in pairs.iter().zip(exact) {
            errs.push((bank.kernel(z, zp)? - k).abs());
        }
    }
    errs.sort_by(f64::total_cmp);
    let m = errs.len();
    Ok(if m % 2 == 1 {
        errs[m / 2]
    } else {
        0.5 * (errs[m / 2 - 1] + errs[m / 2])
    })
}

/// Random point pairs in `R^q` with `|z - z'|` uniform on `[0, r_max]`.
pub fn random_pairs(q: usize, count: usize, r_max: f64, seed: u64) -> Vec<(DVector<f64>, DVector<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    (0..count)
        .map(|_| {
            let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut dir = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
            dir /= dir.norm();
            let r: f64 = rng.random::<f64>() * r_max;
            let zp = &z + dir * r;
            (z, zp)
        })
        .collect()
}

/// Per-coordinate second moment of a bank and its Monte-Carlo standard
/// error.
pub fn frequency_variance(bank: &FeatureBank) -> (f64, f64) {
    let vals: Vec<f64> = bank.omegas().iter().map(|w| w * w).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Kernel, frequency and constant checks for `spec`. `negative_control`
/// compares the sampled moments against the wrong smoothness.
pub fn run_kernel_selftest(spec: KernelSpec, negative_control: bool) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let (neg_k2, k4) = derivatives_at_zero(spec);

    let kg = kappa(KernelSpec::gaussian());
    checks.push(Check::new(
        "kappa_gaussian",
        (kg - (2.0 + 3f64.sqrt())).abs() <= 1e-12,
        format!("kappa={}", fmt17(kg)),
    ));
    let k = kappa(spec);
    checks.push(Check::new(
        "kappa_decomposition",
        k == 1.0 + neg_k2.sqrt() + k4.sqrt(),
        format!("kappa={} neg_k2={} k4={}", fmt17(k), fmt17(neg_k2), fmt17(k4)),
    ));

    let k0 = eval_kernel(spec, 0.0)?;
    checks.push(Check::new(
        "normalisation",
        (k0 - 1.0).abs() <= 1e-12,
        format!("k(0)={}", fmt17(k0)),
    ));

    let h = 1e-3;
    let (e1, e2) = (kernel_deficit(spec, h)?, kernel_deficit(spec, 2.0 * h)?);
    let d2 = -2.0 * e1 / (h * h);
    let d4 = (8.0 * e1 - 2.0 * e2) / h.powi(4);
    let moment_target = if negative_control {
        let wrong = if spec.is_gaussian() {
            KernelSpec::matern(3.0)?
        } else {
            KernelSpec::matern(spec.nu() + 1.0)?
        };
        derivatives_at_zero(wrong)
    } else {
        (neg_k2, k4)
    };
    let rel2 = (-d2 - moment_target.0).abs() / moment_target.0;
    let rel4 = (d4 - moment_target.1).abs() / moment_target.1;
    checks.push(Check::new(
        "moments_finite_difference",
        rel2 <= 1e-4 && rel4 <= 1e-4,
        format!("rel_err_k2={} rel_err_k4={}", fmt17(rel2), fmt17(rel4)),
    ));

    let mut mono = true;
    let mut prev = k0;
    for i in 1..=200 {
        let v = eval_kernel(spec, i as f64 * 0.1)?;
        mono &= v < prev;
        prev = v;
    }
    checks.push(Check::new("strictly_decreasing", mono, "grid=0.1..20".into()));

    for n in [2usize, 50] {
        let b = beta(spec, n)?;
        let kb = eval_kernel(spec, b)?;
        checks.push(Check::new(
            &format!("beta_root_n{n}"),
            (kb - 0.5 / n as f64).abs() <= 1e-8,
            format!("beta={} k(beta)={}", fmt17(b), fmt17(kb)),
        ));
    }

    let bank = FeatureBank::sample(2, 100_000, spec, 0)?;
    let (var, se) = frequency_variance(&bank);
    let target = if negative_control { moment_target.0 } else { neg_k2 };
    checks.push(Check::new(
        "frequency_variance",
        (var - target).abs() <= 3.0 * se,
        format!("variance={} target={} se={}", fmt17(var), fmt17(target), fmt17(se)),
    ));

    let pairs = random_pairs(2, 200, 5.0, 7);
    let exact = pairs
        .iter()
        .map(|(z, zp)| eval_kernel(spec, (z - zp).norm()))
        .collect::<Result<Vec<_>>>()?;
    let coarse = rff_median_error(spec, 2, &pairs, &exact, 1024, 50, 1000)?;
    let fine = rff_median_error(spec, 2, &pairs, &exact, 4096, 50, 2000)?;
    let ratio = coarse / fine;
    checks.push(Check::new(
        "rff_concentration",
        (1.3..=3.1).contains(&ratio),
        format!(
            "median_1024={} median_4096={} ratio={}",
            fmt17(coarse),
            fmt17(fine),
            fmt17(ratio)
        ),
    ));
    Ok(checks)
}
