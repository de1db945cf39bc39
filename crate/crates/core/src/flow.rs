//! The discretised flow `z_{l+1} = z_l + dt W_l φ(z_l)`, `z_0 = A x`, its
//! output `B z_L`, the empirical risk and its exact gradient.
//!
//! Gradients are the discrete adjoint of the Euler scheme. With the
//! convention `a^i_l = ∂L/∂z^i_l`:
//!
//! ```text
//! a^i_L = (1/N) B^T (B z^i_L - y^i)
//! a^i_l = a^i_{l+1} + dt (W_l Dφ(z^i_l))^T a^i_{l+1}
//! ∂L/∂W_l = dt Σ_i a^i_{l+1} φ(z^i_l)^T
//! ```
//!
//! The costate of the continuous backward equation is `p = -a`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::embedding::{separation, EmbeddingPair};
use crate::error::{Error, Result};
use crate::io::{read_f64, read_header, read_u64, write_header, RecordKind};
use crate::rff::FeatureBank;

/// States whose norm exceeds this abort the forward pass.
pub const DIVERGENCE_NORM: f64 = 1e8;

/// Piecewise-constant control `t ↦ W_l` on `L` uniform steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    weights: Vec<DMatrix<f64>>,
}

impl ControlPath {
    pub fn zeros(steps: usize, q: usize, width: usize) -> Result<Self> {
        if steps == 0 || q == 0 || width == 0 {
            return Err(Error::InvalidDimension(format!(
                "control needs L, q, width >= 1, got {steps}, {q}, {width}"
            )));
        }
        Ok(Self {
            weights: vec![DMatrix::zeros(q, width); steps],
        })
    }

    pub fn from_weights(weights: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = weights
            .first()
            .ok_or_else(|| Error::InvalidDimension("control needs at least one step".into()))?;
        let shape = first.shape();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::InvalidDimension("empty weight matrix".into()));
        }
        if weights.iter().any(|w| w.shape() != shape) {
            return Err(Error::Shape("weight matrices of unequal shape".into()));
        }
        Ok(Self { weights })
    }

    pub fn steps(&self) -> usize {
        self.weights.len()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps() as f64
    }

    pub fn q(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn width(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn entry(&self, step: usize, row: usize, col: usize) -> f64 {
        self.weights[step][(row, col)]
    }

    pub fn entry_mut(&mut self, step: usize, row: usize, col: usize) -> &mut f64 {
        &mut self.weights[step][(row, col)]
    }

    /// `L²([0,1])` inner product `Σ_l dt <W_l, W'_l>_F`.
    pub fn inner(&self, other: &Self) -> f64 {
        self.dt()
            * self
                .weights
                .iter()
                .zip(&other.weights)
                .map(|(a, b)| a.dot(b))
                .sum::<f64>()
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn dist(&self, other: &Self) -> f64 {
        let dt = self.dt();
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| dt * (a - b).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            *w += o * alpha;
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w * s).collect(),
        }
    }

    /// Same path on `2L` steps.
    pub fn refined(&self) -> Self {
        Self {
            weights: self.weights.iter().flat_map(|w| [w.clone(), w.clone()]).collect(),
        }
    }

    /// Binary record: header, `L`, `q`, `width`, then each `W_l` row-major.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        write_header(&mut w, RecordKind::ControlPath)?;
        for v in [self.steps(), self.q(), self.width()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for m in &self.weights {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    w.write_all(&m[(i, j)].to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        read_header(&mut r, RecordKind::ControlPath)?;
        let steps = read_u64(&mut r)? as usize;
        let q = read_u64(&mut r)? as usize;
        let width = read_u64(&mut r)? as usize;
        let total = steps.checked_mul(q).and_then(|v| v.checked_mul(width));
        if steps == 0 || q == 0 || width == 0 || total.is_none_or(|t| t > (1 << 32)) {
            return Err(Error::Format(format!(
                "implausible control dimensions {steps} x {q} x {width}"
            )));
        }
        let mut weights = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut m = DMatrix::zeros(q, width);
            for i in 0..q {
                for j in 0..width {
                    m[(i, j)] = read_f64(&mut r)?;
                }
            }
            weights.push(m);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after control", rest.len())));
        }
        Self::from_weights(weights)
    }

    /// Loads a control and rejects it unless its shape matches.
    pub fn read_expecting<R: Read>(r: R, steps: usize, q: usize, width: usize) -> Result<Self> {
        let c = Self::read_from(r)?;
        if (c.steps(), c.q(), c.width()) != (steps, q, width) {
            return Err(Error::Shape(format!(
                "control is {} x {} x {}, expected {steps} x {q} x {width}",
                c.steps(),
                c.q(),
                c.width()
            )));
        }
        Ok(c)
    }
}

/// `√(Σ_l dt ‖W_l‖_F²)`.
pub fn control_norm(control: &ControlPath) -> f64 {
    control.norm()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<DVector<f64>>,
    targets: Vec<DVector<f64>>,
    r0: f64,
}

impl Dataset {
    pub fn new(inputs: Vec<DVector<f64>>, targets: Vec<DVector<f64>>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidInput("dataset is empty".into()));
        }
        if inputs.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let d = inputs[0].len();
        let d_out = targets[0].len();
        if d == 0 || d_out == 0 {
            return Err(Error::InvalidDimension("zero-dimensional samples".into()));
        }
        if inputs.iter().any(|x| x.len() != d) || targets.iter().any(|y| y.len() != d_out) {
            return Err(Error::Shape("samples of unequal dimension".into()));
        }
        if inputs.iter().chain(&targets).any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidInput("non-finite sample value".into()));
        }
        let r0 = inputs.iter().map(|x| x.norm()).fold(0.0, f64::max);
        Ok(Self { inputs, targets, r0 })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn d(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn d_out(&self) -> usize {
        self.targets[0].len()
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[DVector<f64>] {
        &self.targets
    }

    /// Largest input norm.
    pub fn r0(&self) -> f64 {
        self.r0
    }

    /// Minimum pairwise input distance; infinite for a single sample.
    pub fn separation(&self) -> f64 {
        if self.len() < 2 {
            return f64::INFINITY;
        }
        separation(&self.inputs).unwrap_or(0.0)
    }
}

/// Forward states, adjoints and features for every sample.
#[derive(Debug, Clone)]
pub struct TrajectoryBundle {
    /// `states[i][l] = z^i_l`, `l = 0..=L`.
    pub states: Vec<Vec<DVector<f64>>>,
    /// `adjoints[i][l] = ∂L/∂z^i_l`, `l = 0..=L`.
    pub adjoints: Vec<Vec<DVector<f64>>>,
    /// `features[i][l] = φ(z^i_l)`, `l = 0..L`.
    pub features: Vec<Vec<DVector<f64>>>,
}

impl TrajectoryBundle {
    /// Feature-space Gram matrix `(k̂(z^i_l, z^j_l))_{ij}` at step `l < L`.
    pub fn gram_at(&self, step: usize) -> DMatrix<f64> {
        let n = self.features.len();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = self.features[i][step].dot(&self.features[j][step]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    /// Smallest Gram eigenvalue over the steps `0..L` that enter the gradient.
    pub fn min_gram_eigenvalue(&self) -> f64 {
        let steps = self.features.first().map_or(0, |f| f.len());
        (0..steps)
            .map(|l| SymmetricEigen::new(self.gram_at(l)).eigenvalues.min())
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct Gradient {
    /// Euclidean partial derivatives `∂L/∂W_l`.
    pub partials: ControlPath,
    pub bundle: TrajectoryBundle,
    pub loss: f64,
}

impl Gradient {
    /// Riesz representative in the `L²` metric of [`ControlPath::inner`]:
    /// `(∂L/∂W_l) / dt`.
    pub fn l2_gradient(&self) -> ControlPath {
        self.partials.scaled(1.0 / self.partials.dt())
    }

    /// `‖∇L‖²` in the `L²` metric, `Σ_l ‖∂L/∂W_l‖_F² / dt`.
    pub fn sq_norm(&self) -> f64 {
        let dt = self.partials.dt();
        self.partials.weights().iter().map(|g| g.norm_squared()).sum::<f64>() / dt
    }
}

/// Feature bank plus the fixed embedding.
#[derive(Debug, Clone)]
pub struct FlowModel {
    bank: FeatureBank,
    pair: EmbeddingPair,
}

struct Scratch {
    proj: DVector<f64>,
    phi: DVector<f64>,
}

impl FlowModel {
    pub fn new(bank: FeatureBank, pair: EmbeddingPair) -> Result<Self> {
        if bank.q() != pair.q() {
            return Err(Error::Shape(format!(
                "feature bank has q = {}, embedding has q = {}",
                bank.q(),
                pair.q()
            )));
        }
        Ok(Self { bank, pair })
    }

    pub fn bank(&self) -> &FeatureBank {
        &self.bank
    }

    pub fn pair(&self) -> &EmbeddingPair {
        &self.pair
    }

    fn scratch(&self) -> Scratch {
        Scratch {
            proj: DVector::zeros(self.bank.q_int()),
            phi: DVector::zeros(self.bank.width()),
        }
    }

    fn check_control(&self, control: &ControlPath) -> Result<()> {
        if control.q() != self.bank.q() || control.width() != self.bank.width() {
            return Err(Error::Shape(format!(
                "control weights are {} x {}, model expects {} x {}",
                control.q(),
                control.width(),
                self.bank.q(),
                self.bank.width()
            )));
        }
        Ok(())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.d() != self.pair.d() || data.d_out() != self.pair.d_out() {
            return Err(Error::Shape(format!(
                "dataset is {} -> {}, embedding is {} -> {}",
                data.d(),
                data.d_out(),
                self.pair.d(),
                self.pair.d_out()
            )));
        }
        Ok(())
    }

    fn integrate(
        &self,
        control: &ControlPath,
        z0: DVector<f64>,
        scratch: &mut Scratch,
        mut features: Option<&mut Vec<DVector<f64>>>,
    ) -> Result<Vec<DVector<f64>>> {
        let dt = control.dt();
        let mut states = Vec::with_capacity(control.steps() + 1);
        states.push(z0);
        for (l, w) in control.weights().iter().enumerate() {
            let z = &states[l];
            self.bank.features_into(z, &mut scratch.proj, &mut scratch.phi);
            let mut next = z.clone();
            next.gemv(dt, w, &scratch.phi, 1.0);
            let norm = next.norm();
            if !norm.is_finite() || norm > DIVERGENCE_NORM {
                return Err(Error::Divergence { step: l + 1, norm });
            }
            if let Some(f) = features.as_deref_mut() {
                f.push(scratch.phi.clone());
            }
            states.push(next);
        }
        Ok(states)
    }

    /// Latent states `z_0 = A x, …, z_L`.
    pub fn forward(&self, control: &ControlPath, x: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        self.check_control(control)?;
        if x.len() != self.pair.d() {
            return Err(Error::Shape(format!(
                "input has dimension {}, expected {}",
                x.len(),
                self.pair.d()
            )));
        }
        let mut s = self.scratch();
        self.integrate(control, self.pair.a() * x, &mut s, None)
    }

    /// Flow started from an arbitrary latent point.
    pub fn forward_latent(&self, control: &ControlPath, z0: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        self.check_control(control)?;
        if z0.len() != self.bank.q() {
            return Err(Error::Shape(format!(
                "latent point has dimension {}, expected {}",
                z0.len(),
                self.bank.q()
            )));
        }
        let mut s = self.scratch();
        self.integrate(control, z0.clone(), &mut s, None)
    }

    /// `F(v, x) = B z_L`.
    pub fn output(&self, control: &ControlPath, x: &DVector<f64>) -> Result<DVector<f64>> {
        let states = self.forward(control, x)?;
        Ok(self.pair.b() * states.last().expect("at least one state"))
    }

    /// `(1/2N) Σ_i ‖F(v, x^i) − y^i‖²`.
    pub fn risk(&self, control: &ControlPath, data: &Dataset) -> Result<f64> {
        self.check_control(control)?;
        self.check_data(data)?;
        let mut s = self.scratch();
        let mut total = 0.0;
        for (x, y) in data.inputs().iter().zip(data.targets()) {
            let states = self.integrate(control, self.pair.a() * x, &mut s, None)?;
            let out = self.pair.b() * states.last().expect("at least one state");
            total += (out - y).norm_squared();
        }
        Ok(total / (2.0 * data.len() as f64))
    }

    /// Loss, exact partial derivatives and the trajectory bundle.
    pub fn gradient(&self, control: &ControlPath, data: &Dataset) -> Result<Gradient> {
        self.check_control(control)?;
        self.check_data(data)?;
        let n = data.len() as f64;
        let dt = control.dt();
        let steps = control.steps();
        let omegas = self.bank.omegas();
        let half = self.bank.q_int();
        let mut s = self.scratch();
        let mut partials = ControlPath::zeros(steps, self.bank.q(), self.bank.width())?;
        let mut bundle = TrajectoryBundle {
            states: Vec::with_capacity(data.len()),
            adjoints: Vec::with_capacity(data.len()),
            features: Vec::with_capacity(data.len()),
        };
        let mut loss = 0.0;
        let mut u = DVector::zeros(self.bank.width());
        let mut coeff = DVector::zeros(half);

        // Samples in index order; each ∂L/∂W_l accumulates i = 0, 1, … so
        // the result is bit-reproducible.
        for (x, y) in data.inputs().iter().zip(data.targets()) {
            let mut feats = Vec::with_capacity(steps);
            let states = self.integrate(control, self.pair.a() * x, &mut s, Some(&mut feats))?;
            let resid = self.pair.b() * &states[steps] - y;
            loss += resid.norm_squared();

            let mut adj = vec![DVector::zeros(self.bank.q()); steps + 1];
            adj[steps] = self.pair.b().tr_mul(&resid) / n;
            for l in (0..steps).rev() {
                let phi = &feats[l];
                partials.weights[l].ger(dt, &adj[l + 1], phi, 1.0);
                // Dφ(z)^T W^T a = Ω^T c with c_j = φ_j u_{n+j} − φ_{n+j} u_j.
                u.gemv_tr(1.0, &control.weights[l], &adj[l + 1], 0.0);
                for j in 0..half {
                    coeff[j] = phi[j] * u[half + j] - phi[half + j] * u[j];
                }
                let mut a = adj[l + 1].clone();
                a.gemv_tr(dt, omegas, &coeff, 1.0);
                adj[l] = a;
            }
            bundle.states.push(states);
            bundle.adjoints.push(adj);
            bundle.features.push(feats);
        }
        Ok(Gradient {
            partials,
            bundle,
            loss: loss / (2.0 * n),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingVariant;
    use crate::kernels::KernelSpec;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn model(q: usize, q_int: usize, d: usize) -> FlowModel {
        let bank = FeatureBank::sample(q, q_int, KernelSpec::matern(3.0).unwrap(), 1).unwrap();
        let pair = EmbeddingPair::new(EmbeddingVariant::Experiment, q, d, d).unwrap();
        FlowModel::new(bank, pair).unwrap()
    }

    #[test]
    fn zero_control_keeps_states() {
        let m = model(3, 4, 2);
        let c = ControlPath::zeros(4, 3, 8).unwrap();
        let x = v(&[0.5, -1.0]);
        let states = m.forward(&c, &x).unwrap();
        let z0 = m.pair().a() * &x;
        assert!(states.iter().all(|z| *z == z0));
        assert_eq!(m.output(&c, &x).unwrap(), x);
    }

    #[test]
    fn single_step_is_one_euler_update() {
        let m = model(2, 3, 2);
        let mut c = ControlPath::zeros(1, 2, 6).unwrap();
        *c.entry_mut(0, 0, 1) = 0.7;
        *c.entry_mut(0, 1, 4) = -1.3;
        let x = v(&[0.2, 0.9]);
        let z0 = m.pair().a() * &x;
        let expected = &z0 + &c.weights()[0] * m.bank().feature_map(&z0).unwrap();
        let states = m.forward(&c, &x).unwrap();
        assert!((&states[1] - expected).norm() < 1e-15);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let m = model(2, 2, 2);
        let mut c = ControlPath::zeros(3, 2, 4).unwrap();
        for l in 0..3 {
            for i in 0..2 {
                for j in 0..4 {
                    *c.entry_mut(l, i, j) = 1e9;
                }
            }
        }
        match m.forward(&c, &v(&[0.0, 0.0])) {
            Err(Error::Divergence { step, .. }) => assert_eq!(step, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn risk_examples() {
        let m = model(2, 3, 2);
        let c = ControlPath::zeros(2, 2, 6).unwrap();
        let (x, y) = (v(&[1.0, 2.0]), v(&[-1.0, 0.5]));
        let one = Dataset::new(vec![x.clone()], vec![y.clone()]).unwrap();
        let expected = (&x - &y).norm_squared() / 2.0;
        assert!((m.risk(&c, &one).unwrap() - expected).abs() < 1e-15);
        let two = Dataset::new(vec![x.clone(), x.clone()], vec![y.clone(), y.clone()]).unwrap();
        assert!((m.risk(&c, &two).unwrap() - expected).abs() < 1e-15);
        let exact = Dataset::new(vec![x.clone()], vec![x.clone()]).unwrap();
        assert_eq!(m.risk(&c, &exact).unwrap(), 0.0);
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let m = model(3, 5, 2);
        let mut c = ControlPath::zeros(3, 3, 10).unwrap();
        *c.entry_mut(1, 2, 3) = 0.4;
        let xs = vec![v(&[0.1, 0.2]), v(&[-0.3, 0.5])];
        let ys: Vec<_> = xs.iter().map(|x| m.output(&c, x).unwrap()).collect();
        let data = Dataset::new(xs, ys).unwrap();
        let g = m.gradient(&c, &data).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.partials.weights().iter().all(|w| w.iter().all(|e| *e == 0.0)));
    }

    #[test]
    fn one_step_hand_gradient() {
        // N = 1, L = 1, A = B = I, W_0 = 0: ∂L/∂W_0 = (x − y) φ(x)^T.
        let bank = FeatureBank::sample(2, 3, KernelSpec::gaussian(), 4).unwrap();
        let pair = EmbeddingPair::new(EmbeddingVariant::Experiment, 2, 2, 2).unwrap();
        let m = FlowModel::new(bank, pair).unwrap();
        let c = ControlPath::zeros(1, 2, 6).unwrap();
        let (x, y) = (v(&[0.4, -0.8]), v(&[1.0, 0.1]));
        let data = Dataset::new(vec![x.clone()], vec![y.clone()]).unwrap();
        let g = m.gradient(&c, &data).unwrap();
        let expected = (&x - &y) * m.bank().feature_map(&x).unwrap().transpose();
        assert!((&g.partials.weights()[0] - expected).abs().max() < 1e-15);
        let bundle = &g.bundle;
        assert_eq!(bundle.states[0][0], x);
        assert_eq!(bundle.adjoints[0][1], &x - &y);
    }

    #[test]
    fn control_norm_examples() {
        assert_eq!(control_norm(&ControlPath::zeros(3, 2, 2).unwrap()), 0.0);
        let mut c = ControlPath::zeros(1, 1, 1).unwrap();
        *c.entry_mut(0, 0, 0) = 2.0;
        assert_eq!(control_norm(&c), 2.0);
        let w = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 4.0]);
        let c = ControlPath::from_weights(vec![w; 4]).unwrap();
        assert!((control_norm(&c) - 5.0).abs() < 1e-15);
        assert!((control_norm(&c.refined()) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let m = model(3, 4, 2);
        assert!(matches!(
            m.forward(&ControlPath::zeros(2, 3, 7).unwrap(), &v(&[0.0, 0.0])),
            Err(Error::Shape(_))
        ));
        assert!(m.forward(&ControlPath::zeros(2, 3, 8).unwrap(), &v(&[0.0])).is_err());
        assert!(ControlPath::zeros(0, 3, 8).is_err());
        assert!(ControlPath::from_weights(vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 3)]).is_err());
        assert!(Dataset::new(vec![], vec![]).is_err());
        assert!(Dataset::new(vec![v(&[1.0])], vec![v(&[1.0]), v(&[2.0])]).is_err());
    }

    #[test]
    fn control_round_trip() {
        let mut c = ControlPath::zeros(3, 2, 4).unwrap();
        *c.entry_mut(2, 1, 3) = -0.125;
        *c.entry_mut(0, 0, 0) = 1e-300;
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(ControlPath::read_from(&buf[..]).unwrap(), c);
        assert!(ControlPath::read_expecting(&buf[..], 3, 2, 5).is_err());
        assert!(ControlPath::read_from(&buf[..buf.len() - 1]).is_err());
        let mut bank_buf = Vec::new();
        FeatureBank::sample(2, 2, KernelSpec::gaussian(), 0)
            .unwrap()
            .write_to(&mut bank_buf)
            .unwrap();
        assert!(matches!(ControlPath::read_from(&bank_buf[..]), Err(Error::Format(_))));
    }
}
