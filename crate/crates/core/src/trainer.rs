//! Full-batch gradient descent on the control.
//!
//! The update is `v ← v − η ∇L(v)` with the `L²` gradient. With
//! backtracking on, a trial that increases the loss (or diverges) is
//! rejected and `η` is halved; `η` never grows back.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diagnostics::PlReport;
use crate::embedding::{EmbeddingPair, EmbeddingVariant};
use crate::error::{Error, Result};
use crate::flow::{ControlPath, Dataset, FlowModel};
use crate::io::fmt17;
use crate::kernels::KernelSpec;
use crate::rff::FeatureBank;

/// Halvings allowed before a step is declared stalled.
pub const MAX_HALVINGS: usize = 60;

/// RNG stream for random initial controls; banks use stream 0.
const INIT_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub max_steps: usize,
    pub target_loss: f64,
    pub seed: u64,
    pub init_scale: f64,
    pub steps: usize,
    pub q: usize,
    pub q_int: usize,
    pub spec: KernelSpec,
    pub variant: EmbeddingVariant,
    pub backtracking: bool,
    /// Record the smallest trajectory Gram eigenvalue at every step.
    pub track_spectrum: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            max_steps: 500,
            target_loss: 1e-10,
            seed: 0,
            init_scale: 0.0,
            steps: 32,
            q: 30,
            q_int: 64,
            spec: KernelSpec::matern(2.5).expect("valid smoothness"),
            variant: EmbeddingVariant::Experiment,
            backtracking: true,
            track_spectrum: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !(self.target_loss >= 0.0) {
            return Err(Error::Config(format!(
                "target_loss must be nonnegative, got {}",
                self.target_loss
            )));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!(
                "init_scale must be nonnegative, got {}",
                self.init_scale
            )));
        }
        if self.steps == 0 || self.q == 0 || self.q_int == 0 {
            return Err(Error::Config("steps, q and q_int must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_sq_norm: f64,
    pub v_norm: f64,
    pub v_dist_init: f64,
    /// Step size accepted for the move out of this iterate (for the last
    /// record, the step size that would have been tried next).
    pub eta: f64,
    /// Smallest Gram eigenvalue over the steps of the trajectory, or NaN
    /// when not tracked.
    pub lambda_min_traj: f64,
    pub wallclock: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainStatus {
    Converged,
    MaxSteps,
    /// The forward pass blew up at `layer` while evaluating iterate `iteration`.
    Diverged {
        iteration: usize,
        layer: usize,
        norm: f64,
    },
    /// No trial step decreased the loss after [`MAX_HALVINGS`] halvings.
    Stalled,
}

impl fmt::Display for TrainStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainStatus::Converged => f.write_str("converged"),
            TrainStatus::MaxSteps => f.write_str("max-steps"),
            TrainStatus::Diverged { .. } => f.write_str("diverged"),
            TrainStatus::Stalled => f.write_str("stalled"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub status: TrainStatus,
    pub report: Option<PlReport>,
}

pub const LOG_HEADER: &str = "step,loss,grad_sq_norm,v_norm,v_dist_init,eta";

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{LOG_HEADER}")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.step,
                fmt17(r.loss),
                fmt17(r.grad_sq_norm),
                fmt17(r.v_norm),
                fmt17(r.v_dist_init),
                fmt17(r.eta)
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub control: ControlPath,
    pub model: FlowModel,
}

/// Initial control: zero when `init_scale = 0`, else i.i.d.
/// `N(0, init_scale² q^{-3/2})` entries drawn from ChaCha8 stream 1.
pub fn init_control(config: &TrainConfig, bank: &FeatureBank) -> Result<ControlPath> {
    let mut c = ControlPath::zeros(config.steps, bank.q(), bank.width())?;
    if config.init_scale == 0.0 {
        return Ok(c);
    }
    let sd = config.init_scale * (bank.q() as f64).powf(-0.75);
    let normal = Normal::new(0.0, sd).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(INIT_STREAM);
    let weights = (0..config.steps)
        .map(|_| DMatrix::from_fn(bank.q(), bank.width(), |_, _| normal.sample(&mut rng)))
        .collect();
    c = ControlPath::from_weights(weights)?;
    Ok(c)
}

/// Builds the model for `config` and trains from [`init_control`].
pub fn gd_train(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let bank = FeatureBank::sample(config.q, config.q_int, config.spec, config.seed)?;
    let pair = EmbeddingPair::new(config.variant, config.q, data.d(), data.d_out())?;
    let model = FlowModel::new(bank, pair)?;
    let control = init_control(config, model.bank())?;
    train_from(config, model, control, data)
}

/// Gradient descent from an explicit model and starting control.
pub fn train_from(config: &TrainConfig, model: FlowModel, start: ControlPath, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    if start.steps() != config.steps {
        return Err(Error::Config(format!(
            "starting control has {} steps, config asks for {}",
            start.steps(),
            config.steps
        )));
    }
    let clock = Instant::now();
    let mut control = start.clone();
    let mut eta = config.eta;
    let mut records = Vec::new();
    let mut status = TrainStatus::MaxSteps;

    for k in 0..=config.max_steps {
        let grad = match model.gradient(&control, data) {
            Ok(g) => g,
            Err(Error::Divergence { step, norm }) => {
                status = TrainStatus::Diverged {
                    iteration: k,
                    layer: step,
                    norm,
                };
                break;
            }
            Err(e) => return Err(e),
        };
        let loss = grad.loss;
        let mut record = TrainRecord {
            step: k,
            loss,
            grad_sq_norm: grad.sq_norm(),
            v_norm: control.norm(),
            v_dist_init: control.dist(&start),
            eta,
            lambda_min_traj: if config.track_spectrum {
                grad.bundle.min_gram_eigenvalue()
            } else {
                f64::NAN
            },
            wallclock: 0.0,
        };
        if loss <= config.target_loss {
            record.wallclock = clock.elapsed().as_secs_f64();
            records.push(record);
            status = TrainStatus::Converged;
            break;
        }
        if k == config.max_steps {
            record.wallclock = clock.elapsed().as_secs_f64();
            records.push(record);
            break;
        }
        let direction = grad.l2_gradient();
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let mut trial = control.clone();
            trial.add_scaled(-eta, &direction);
            if !config.backtracking {
                accepted = Some(trial);
                break;
            }
            match model.risk(&trial, data) {
                Ok(l) if l <= loss => {
                    accepted = Some(trial);
                    break;
                }
                Ok(_) | Err(Error::Divergence { .. }) => eta *= 0.5,
                Err(e) => return Err(e),
            }
        }
        record.eta = eta;
        record.wallclock = clock.elapsed().as_secs_f64();
        records.push(record);
        match accepted {
            Some(next) => control = next,
            None => {
                status = TrainStatus::Stalled;
                break;
            }
        }
    }

    Ok(TrainOutcome {
        log: TrainLog {
            records,
            status,
            report: None,
        },
        control,
        model,
    })
}
