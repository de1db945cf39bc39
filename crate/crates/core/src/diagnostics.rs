//! Kernel-matrix spectra, Polyak-Lojasiewicz constants, the local
//! convergence condition and trajectory estimates.
//!
//! The matrix-valued kernel is `K(z, z') = k(z - z') Id_q`, so the `Nq × Nq`
//! kernel matrix is `G ⊗ Id_q` for the scalar Gram matrix `G`. Everything
//! here works with `G`.
//!
//! The kernel-matrix constants are replaced by computable surrogates:
//! `Λ ≤ N` because `|k| ≤ 1`, and `λ ≥ 1/2` whenever the embedded points
//! stay at least `β(N)` apart (diagonal dominance). When that separation
//! cannot be guaranteed, `λ` falls back to the smallest Gram eigenvalue
//! observed along a trajectory and the report is marked as not certified.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::embedding::{build_embedding, EmbeddingPair};
use crate::error::{Error, Result};
use crate::flow::{Dataset, TrajectoryBundle};
use crate::io::{fmt17, parse_key_values};
use crate::kernels::{beta, eval_kernel, KernelSpec};
use crate::rff::FeatureBank;
use crate::trainer::TrainLog;

/// Relative slack for floating-point rounding when comparing two sides of
/// an inequality that hold exactly in real arithmetic.
const ROUNDING: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub enum KernelSource<'a> {
    Exact(KernelSpec),
    Features(&'a FeatureBank),
}

/// Scalar Gram matrix `(k(z^i, z^j))_{ij}`.
pub fn gram_matrix(points: &[DVector<f64>], source: KernelSource<'_>) -> Result<DMatrix<f64>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::InvalidInput("gram matrix of no points".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points of unequal dimension".into()));
    }
    let mut g = DMatrix::identity(n, n);
    match source {
        KernelSource::Exact(spec) => {
            for i in 0..n {
                for j in (i + 1)..n {
                    let v = eval_kernel(spec, (&points[i] - &points[j]).norm())?;
                    g[(i, j)] = v;
                    g[(j, i)] = v;
                }
            }
        }
        KernelSource::Features(bank) => {
            let feats = points.iter().map(|p| bank.feature_map(p)).collect::<Result<Vec<_>>>()?;
            for i in 0..n {
                g[(i, i)] = feats[i].norm_squared();
                for j in (i + 1)..n {
                    let v = feats[i].dot(&feats[j]);
                    g[(i, j)] = v;
                    g[(j, i)] = v;
                }
            }
        }
    }
    Ok(g)
}

/// `(λ_min, λ_max)` of a symmetric matrix.
pub fn lambda_bounds(gram: &DMatrix<f64>) -> Result<(f64, f64)> {
    if !gram.is_square() || gram.nrows() == 0 {
        return Err(Error::Shape(format!(
            "expected a non-empty square matrix, got {:?}",
            gram.shape()
        )));
    }
    let asym = (gram - gram.transpose()).abs().max();
    if asym > 1e-8 {
        return Err(Error::InvalidInput(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let sym = (gram + gram.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    Ok((eig.min(), eig.max()))
}

/// Data-dependent inputs of the convergence constants.
#[derive(Debug, Clone)]
pub struct PlContext {
    pub n: usize,
    pub separation: f64,
    pub sigma_min_a: f64,
    pub sigma_min_b: f64,
    pub sigma_max_b: f64,
    pub spec: KernelSpec,
    pub kappa: f64,
    /// Smallest Gram eigenvalue seen along a trajectory, used when
    /// diagonal dominance cannot be certified.
    pub empirical_lambda: Option<f64>,
}

impl PlContext {
    pub fn new(data: &Dataset, pair: &EmbeddingPair, spec: KernelSpec, kappa: f64) -> Result<Self> {
        let separation = data.separation();
        if separation <= 0.0 {
            return Err(Error::DegenerateData("two inputs coincide (separation 0)".into()));
        }
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::InvalidInput(format!("kappa must be positive, got {kappa}")));
        }
        Ok(Self {
            n: data.len(),
            separation,
            sigma_min_a: pair.sigma_min_a(),
            sigma_min_b: pair.sigma_min_b(),
            sigma_max_b: pair.sigma_max_b(),
            spec,
            kappa,
            empirical_lambda: None,
        })
    }

    pub fn with_empirical_lambda(mut self, lambda: f64) -> Self {
        self.empirical_lambda = Some(lambda);
        self
    }

    /// `m(r)` from Gram lower bound `lambda`.
    pub fn m_at(&self, lambda: f64, r: f64) -> f64 {
        self.sigma_min_b.powi(2) * lambda.max(0.0) * (-2.0 * self.kappa * r).exp() / self.n as f64
    }

    /// `M(r)` with `Λ = N`.
    pub fn big_m_at(&self, r: f64) -> f64 {
        self.sigma_max_b.powi(2) * (2.0 * self.kappa * r).exp()
    }

    /// Gram lower bound valid on the ball of radius `r_total`, and whether it
    /// is certified.
    pub fn lambda_surrogate(&self, r_total: f64) -> Result<(f64, bool, f64)> {
        if self.n == 1 {
            return Ok((1.0, true, 0.0));
        }
        let b = beta(self.spec, self.n)?;
        let spread = self.sigma_min_a * self.separation * (-self.kappa * r_total).exp();
        if spread >= b {
            return Ok((0.5, true, b));
        }
        match self.empirical_lambda {
            Some(l) => Ok((l.max(0.0), false, b)),
            None => Err(Error::InvalidInput(
                "diagonal dominance not certified and no empirical Gram eigenvalue supplied".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlConstants {
    pub lambda: f64,
    pub certified: bool,
    pub m: f64,
    pub big_m: f64,
}

/// `m(R_total)` and `M(R_total)`.
pub fn pl_constants(ctx: &PlContext, r_total: f64) -> Result<PlConstants> {
    if !(r_total >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "radius must be nonnegative, got {r_total}"
        )));
    }
    let (lambda, certified, _) = ctx.lambda_surrogate(r_total)?;
    Ok(PlConstants {
        lambda,
        certified,
        m: ctx.m_at(lambda, r_total),
        big_m: ctx.big_m_at(r_total),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlReport {
    pub r: f64,
    pub r0: f64,
    pub n: usize,
    pub separation: f64,
    pub sigma_min_a: f64,
    pub sigma_min_b: f64,
    pub sigma_max_b: f64,
    pub kappa_used: f64,
    pub beta: f64,
    pub lambda_lower: f64,
    pub lambda_certified: bool,
    pub lambda_upper: f64,
    pub loss0: f64,
    pub m_r: f64,
    pub big_m_r: f64,
    pub mu: f64,
    pub init_lhs: f64,
    pub init_satisfied: bool,
}

/// Local convergence condition at radius `r` around a start of norm `r0`.
pub fn init_condition(ctx: &PlContext, r: f64, r0: f64, loss0: f64) -> Result<PlReport> {
    if !(r > 0.0) || !(r0 >= 0.0) {
        return Err(Error::InvalidInput(format!("need R > 0 and R0 >= 0, got {r}, {r0}")));
    }
    if !(loss0 >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "initial loss must be nonnegative, got {loss0}"
        )));
    }
    let r_total = r + r0;
    let (lambda, certified, b) = ctx.lambda_surrogate(r_total)?;
    let n = ctx.n as f64;
    let big_lambda = n;
    let init_lhs = if loss0 == 0.0 {
        0.0
    } else {
        8f64.sqrt() * ctx.sigma_max_b * (n * big_lambda * loss0).sqrt() * (3.0 * ctx.kappa * r_total).exp()
            / (ctx.sigma_min_b.powi(2) * lambda)
    };
    Ok(PlReport {
        r,
        r0,
        n: ctx.n,
        separation: ctx.separation,
        sigma_min_a: ctx.sigma_min_a,
        sigma_min_b: ctx.sigma_min_b,
        sigma_max_b: ctx.sigma_max_b,
        kappa_used: ctx.kappa,
        beta: b,
        lambda_lower: lambda,
        lambda_certified: certified,
        lambda_upper: big_lambda,
        loss0,
        m_r: ctx.m_at(lambda, r),
        big_m_r: ctx.big_m_at(r),
        mu: ctx.m_at(lambda, r_total),
        init_lhs,
        init_satisfied: init_lhs <= r,
    })
}

impl PlReport {
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let f = |k: &str, v: f64| (k.to_string(), fmt17(v));
        vec![
            f("R", self.r),
            f("R0", self.r0),
            ("N".into(), self.n.to_string()),
            f("separation", self.separation),
            f("sigma_min_A", self.sigma_min_a),
            f("sigma_min_B", self.sigma_min_b),
            f("sigma_max_B", self.sigma_max_b),
            f("kappa_used", self.kappa_used),
            f("beta", self.beta),
            f("lambda_lower", self.lambda_lower),
            ("lambda_certified".into(), self.lambda_certified.to_string()),
            f("Lambda_upper", self.lambda_upper),
            f("loss0", self.loss0),
            f("m_R", self.m_r),
            f("M_R", self.big_m_r),
            f("mu", self.mu),
            f("init_lhs", self.init_lhs),
            ("init_satisfied".into(), self.init_satisfied.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_key_values()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let map = parse_key_values(text)?;
        let get = |k: &str| -> Result<&String> {
            map.get(k)
                .ok_or_else(|| Error::Format(format!("report is missing '{k}'")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("'{k}' is not a number")))
        };
        let flag = |k: &str| -> Result<bool> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("'{k}' is not a boolean")))
        };
        Ok(Self {
            r: num("R")?,
            r0: num("R0")?,
            n: get("N")?
                .parse()
                .map_err(|_| Error::Format("'N' is not an integer".into()))?,
            separation: num("separation")?,
            sigma_min_a: num("sigma_min_A")?,
            sigma_min_b: num("sigma_min_B")?,
            sigma_max_b: num("sigma_max_B")?,
            kappa_used: num("kappa_used")?,
            beta: num("beta")?,
            lambda_lower: num("lambda_lower")?,
            lambda_certified: flag("lambda_certified")?,
            lambda_upper: num("Lambda_upper")?,
            loss0: num("loss0")?,
            m_r: num("m_R")?,
            big_m_r: num("M_R")?,
            mu: num("mu")?,
            init_lhs: num("init_lhs")?,
            init_satisfied: flag("init_satisfied")?,
        })
    }
}

/// Outcome of the PL sandwich `2 m L ≤ ‖∇L‖² ≤ 2 M L` at one logged step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlStepCheck {
    pub step: usize,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub grad_sq_norm: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
    /// Gram eigenvalue that would make the lower bound an equality.
    pub required_lambda: f64,
}

/// Checks every logged step with `m`, `M` taken at the logged `‖v^k‖`, the
/// logged trajectory `λ_min` for `m` and `Λ = N` for `M`.
pub fn verify_pl_along_run(log: &TrainLog, report: &PlReport) -> Vec<PlStepCheck> {
    let n = report.n as f64;
    let k = report.kappa_used;
    log.records
        .iter()
        .map(|rec| {
            let loss = rec.loss;
            let per_lambda = 2.0 * report.sigma_min_b.powi(2) * (-2.0 * k * rec.v_norm).exp() * loss / n;
            let lambda = rec.lambda_min_traj;
            let lower_bound = if lambda.is_nan() {
                f64::NAN
            } else {
                per_lambda * lambda.max(0.0)
            };
            let upper_bound = 2.0 * report.sigma_max_b.powi(2) * (2.0 * k * rec.v_norm).exp() * loss;
            let g = rec.grad_sq_norm;
            PlStepCheck {
                step: rec.step,
                lower_bound,
                upper_bound,
                grad_sq_norm: g,
                lower_ok: lower_bound * (1.0 - ROUNDING) <= g,
                upper_ok: g <= upper_bound * (1.0 + ROUNDING),
                required_lambda: if per_lambda > 0.0 {
                    g / per_lambda
                } else {
                    f64::INFINITY
                },
            }
        })
        .collect()
}

/// Linear-rate and boundedness checks at one logged step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateCheck {
    pub step: usize,
    pub loss: f64,
    /// `Π_{j<k} (1 − η_j μ) L(v⁰)` with the accepted step sizes `η_j`.
    pub rate_bound: f64,
    pub rate_ok: bool,
    pub ball_ok: bool,
}

/// `L(v^k) ≤ Π_{j<k}(1 − η_j μ) L(v⁰) (1 + tol)` and `‖v^k − v⁰‖ ≤ R`.
pub fn verify_rate_along_run(log: &TrainLog, report: &PlReport, tol: f64) -> Vec<RateCheck> {
    let mut out = Vec::with_capacity(log.records.len());
    let Some(first) = log.records.first() else {
        return out;
    };
    let mut bound = first.loss;
    for (k, rec) in log.records.iter().enumerate() {
        if k > 0 {
            bound *= 1.0 - log.records[k - 1].eta * report.mu;
        }
        out.push(RateCheck {
            step: rec.step,
            loss: rec.loss,
            rate_bound: bound,
            rate_ok: rec.loss <= bound * (1.0 + tol),
            ball_ok: rec.v_dist_init <= report.r,
        });
    }
    out
}

/// Worst-case ratios for the trajectory separation and adjoint estimates.
///
/// `separation_ratio` is the smallest `‖z^i_l − z^j_l‖ / bound`; the
/// lower and upper adjoint ratios are `min ‖a^i_l‖ / lower` and
/// `max ‖a^i_l‖ / upper`. Each bound carries the slack `ε = slack / L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryCheck {
    pub separation_ratio: f64,
    pub adjoint_lower_ratio: f64,
    pub adjoint_upper_ratio: f64,
}

impl TrajectoryCheck {
    pub fn separation_ok(&self) -> bool {
        self.separation_ratio >= 1.0
    }

    pub fn adjoint_ok(&self) -> bool {
        self.adjoint_lower_ratio >= 1.0 && self.adjoint_upper_ratio <= 1.0
    }
}

pub fn check_trajectory_bounds(
    bundle: &TrajectoryBundle,
    data: &Dataset,
    pair: &EmbeddingPair,
    kappa: f64,
    v_norm: f64,
    slack: f64,
) -> Result<TrajectoryCheck> {
    let n = data.len();
    if bundle.states.len() != n || bundle.adjoints.len() != n {
        return Err(Error::Shape("trajectory bundle does not match the dataset".into()));
    }
    let steps = bundle.states[0].len() - 1;
    let eps = slack / steps as f64;
    let shrink = (-kappa * v_norm).exp();
    let grow = (kappa * v_norm).exp();
    let nf = n as f64;

    let mut separation_ratio = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = (&data.inputs()[i] - &data.inputs()[j]).norm();
            let bound = pair.sigma_min_a() * shrink * dx * (1.0 - eps);
            if bound <= 0.0 {
                continue;
            }
            for l in 0..=steps {
                let dz = (&bundle.states[i][l] - &bundle.states[j][l]).norm();
                separation_ratio = separation_ratio.min(dz / bound);
            }
        }
    }

    let (mut lower_ratio, mut upper_ratio) = (f64::INFINITY, 0.0_f64);
    for i in 0..n {
        let resid = (pair.b() * &bundle.states[i][steps] - &data.targets()[i]).norm();
        if resid == 0.0 {
            continue;
        }
        let lower = pair.sigma_min_b() / nf * shrink * resid * (1.0 - eps);
        let upper = pair.sigma_max_b() / nf * grow * resid * (1.0 + eps);
        for a in &bundle.adjoints[i] {
            let na = a.norm();
            if lower > 0.0 {
                lower_ratio = lower_ratio.min(na / lower);
            }
            upper_ratio = upper_ratio.max(na / upper);
        }
    }
    Ok(TrajectoryCheck {
        separation_ratio,
        adjoint_lower_ratio: lower_ratio,
        adjoint_upper_ratio: upper_ratio,
    })
}

/// One row of the q-threshold sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdPoint {
    pub q: usize,
    pub report: PlReport,
}

/// Local condition for the canonical embedding at `v⁰ = 0`, for each `q`.
///
/// At zero control the trajectory is `z_t = A_q x` and the output is
/// `B_q A_q x`, which does not depend on `q`, so the whole sweep is
/// analytic. The fallback Gram eigenvalue is that of the exact kernel at
/// the embedded inputs.
pub fn q_threshold_sweep(
    data: &Dataset,
    spec: KernelSpec,
    kappa: f64,
    r: f64,
    qs: &[usize],
) -> Result<Vec<ThresholdPoint>> {
    let mut out = Vec::with_capacity(qs.len());
    for &q in qs {
        let pair = build_embedding(q, data.d(), data.d_out())?;
        let embedded: Vec<DVector<f64>> = data.inputs().iter().map(|x| pair.a() * x).collect();
        let loss0 = data
            .inputs()
            .iter()
            .zip(data.targets())
            .map(|(x, y)| (pair.b() * (pair.a() * x) - y).norm_squared())
            .sum::<f64>()
            / (2.0 * data.len() as f64);
        let (lmin, _) = lambda_bounds(&gram_matrix(&embedded, KernelSource::Exact(spec))?)?;
        let ctx = PlContext::new(data, &pair, spec, kappa)?.with_empirical_lambda(lmin);
        out.push(ThresholdPoint {
            q,
            report: init_condition(&ctx, r, 0.0, loss0)?,
        });
    }
    Ok(out)
}

/// Smallest swept `q` whose report is certified and satisfied.
pub fn first_certified_q(points: &[ThresholdPoint]) -> Option<usize> {
    points
        .iter()
        .find(|p| p.report.init_satisfied && p.report.lambda_certified)
        .map(|p| p.q)
}

/// Summary counts of a PL check.
pub fn pl_pass_counts(checks: &[PlStepCheck]) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::new();
    m.insert("steps", checks.len());
    m.insert("lower_ok", checks.iter().filter(|c| c.lower_ok).count());
    m.insert("upper_ok", checks.iter().filter(|c| c.upper_ok).count());
    m
}
