//! Random Fourier features for the Matérn family.
//!
//! A [`FeatureBank`] holds `q_int` frequencies `ω^j ∈ R^q` drawn from the
//! multivariate t distribution with `2 nu` degrees of freedom. The complex
//! feature map `z ↦ q_int^{-1/2} (e^{i<z, ω^j>})_j` is stored in its real
//! form: a vector of length `2 q_int` whose first half holds the cosines and
//! second half the sines, both scaled by `q_int^{-1/2}`.
//!
//! Sampling uses ChaCha8 (`rand_chacha`) seeded through `seed_from_u64`, on
//! stream 0. Each row draws `q` standard normals (ziggurat, `rand_distr`)
//! followed by one chi-squared variate `u` with `2 nu` degrees of freedom,
//! and the row is `Y / sqrt(u / (2 nu))`. `u` is a sum of squared normals
//! when `2 nu` is an even integer up to 64, and a Marsaglia–Tsang gamma draw
//! `Gamma(nu, 2)` otherwise. For `nu = inf` the row is `Y` itself.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::io::{read_f64, read_header, read_u64, write_header, RecordKind};
use crate::kernels::KernelSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    /// `q_int × q`, row `j` is `ω^j`.
    omegas: DMatrix<f64>,
    spec: KernelSpec,
    seed: u64,
}

const SUM_OF_SQUARES_MAX_DOF: f64 = 64.0;

impl FeatureBank {
    pub fn sample(q: usize, q_int: usize, spec: KernelSpec, seed: u64) -> Result<Self> {
        if q == 0 || q_int == 0 {
            return Err(Error::InvalidDimension(format!(
                "feature bank needs q >= 1 and q_int >= 1, got q = {q}, q_int = {q_int}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dof = 2.0 * spec.nu();
        let gamma = if spec.is_gaussian() || use_sum_of_squares(dof) {
            None
        } else {
            Some(Gamma::new(spec.nu(), 2.0).map_err(|e| Error::InvalidInput(e.to_string()))?)
        };
        let mut omegas = DMatrix::zeros(q_int, q);
        let mut row = vec![0.0; q];
        for j in 0..q_int {
            for y in row.iter_mut() {
                *y = StandardNormal.sample(&mut rng);
            }
            let scale = if spec.is_gaussian() {
                1.0
            } else {
                let u = match &gamma {
                    None => chi_squared_by_squares(&mut rng, dof as usize),
                    Some(g) => g.sample(&mut rng),
                };
                1.0 / (u / dof).sqrt()
            };
            for (i, y) in row.iter().enumerate() {
                omegas[(j, i)] = y * scale;
            }
        }
        Ok(Self { omegas, spec, seed })
    }

    /// Wraps explicit frequencies; `omegas` is `q_int × q`.
    pub fn from_omegas(omegas: DMatrix<f64>, spec: KernelSpec, seed: u64) -> Result<Self> {
        if omegas.nrows() == 0 || omegas.ncols() == 0 {
            return Err(Error::InvalidDimension("empty frequency matrix".into()));
        }
        if omegas.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("non-finite frequency".into()));
        }
        Ok(Self { omegas, spec, seed })
    }

    pub fn q(&self) -> usize {
        self.omegas.ncols()
    }

    pub fn q_int(&self) -> usize {
        self.omegas.nrows()
    }

    /// Length of the real feature vector, `2 q_int`.
    pub fn width(&self) -> usize {
        2 * self.q_int()
    }

    pub fn omegas(&self) -> &DMatrix<f64> {
        &self.omegas
    }

    pub fn spec(&self) -> KernelSpec {
        self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn feature_map(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(z)?;
        let mut proj = DVector::zeros(self.q_int());
        let mut out = DVector::zeros(self.width());
        self.features_into(z, &mut proj, &mut out);
        Ok(out)
    }

    /// Unchecked feature evaluation into caller-provided buffers.
    pub(crate) fn features_into(&self, z: &DVector<f64>, proj: &mut DVector<f64>, out: &mut DVector<f64>) {
        let n = self.q_int();
        proj.gemv(1.0, &self.omegas, z, 0.0);
        let scale = 1.0 / (n as f64).sqrt();
        let (cos, sin) = out.as_mut_slice().split_at_mut(n);
        for ((c, s), &p) in cos.iter_mut().zip(sin.iter_mut()).zip(proj.iter()) {
            let (sp, cp) = p.sin_cos();
            *c = cp * scale;
            *s = sp * scale;
        }
    }

    /// Monte-Carlo kernel estimate `(1/q_int) Σ_j cos<z - z', ω^j>`.
    pub fn kernel(&self, z: &DVector<f64>, z_prime: &DVector<f64>) -> Result<f64> {
        self.check_dim(z)?;
        self.check_dim(z_prime)?;
        let diff = z - z_prime;
        let proj = &self.omegas * diff;
        Ok(proj.iter().map(|p| p.cos()).sum::<f64>() / self.q_int() as f64)
    }

    /// `(1/q_int) Σ_j ω^j (ω^j)^T`, which equals `Dφ(z)^T Dφ(z)` for every `z`.
    pub fn second_moment_matrix(&self) -> DMatrix<f64> {
        self.omegas.tr_mul(&self.omegas) / self.q_int() as f64
    }

    /// Empirical admissibility constant of the feature space:
    /// `sup‖φ‖ + sqrt(λ_max(M2)) + sqrt(P4)`.
    ///
    /// `sup‖φ‖ = 1` exactly. `M2` is the frequency second-moment matrix, so
    /// the middle term is exactly `sup_z ‖Dφ(z)‖`. `P4` bounds
    /// `max_{|θ|=1} (1/q_int) Σ_j <ω^j, θ>^4` from above, see
    /// [`fourth_moment_bound`].
    pub fn kappa_hat(&self) -> f64 {
        let m2 = self.second_moment_matrix();
        let lmax = SymmetricEigen::new(m2).eigenvalues.max().max(0.0);
        1.0 + lmax.sqrt() + fourth_moment_bound(&self.omegas).sqrt()
    }

    fn check_dim(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.q() {
            return Err(Error::Shape(format!(
                "point has dimension {}, feature bank expects {}",
                z.len(),
                self.q()
            )));
        }
        Ok(())
    }

    /// Binary record: header, `nu`, `q`, `q_int`, `seed`, then the
    /// frequencies row-major, all little-endian 64-bit.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        write_header(&mut w, RecordKind::FeatureBank)?;
        w.write_all(&self.spec.nu().to_le_bytes())?;
        w.write_all(&(self.q() as u64).to_le_bytes())?;
        w.write_all(&(self.q_int() as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for j in 0..self.q_int() {
            for i in 0..self.q() {
                w.write_all(&self.omegas[(j, i)].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        read_header(&mut r, RecordKind::FeatureBank)?;
        let nu = read_f64(&mut r)?;
        let spec = if nu.is_infinite() && nu > 0.0 {
            KernelSpec::gaussian()
        } else {
            KernelSpec::matern(nu)?
        };
        let q = read_u64(&mut r)? as usize;
        let q_int = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        if q == 0 || q_int == 0 || q.checked_mul(q_int).is_none_or(|n| n > (1 << 32)) {
            return Err(Error::Format(format!("implausible bank dimensions {q_int} x {q}")));
        }
        let mut omegas = DMatrix::zeros(q_int, q);
        for j in 0..q_int {
            for i in 0..q {
                omegas[(j, i)] = read_f64(&mut r)?;
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after feature bank",
                rest.len()
            )));
        }
        Self::from_omegas(omegas, spec, seed)
    }

    /// Loads a bank and rejects it unless it has the expected dimensions.
    pub fn read_expecting<R: Read>(r: R, q: usize, q_int: usize) -> Result<Self> {
        let bank = Self::read_from(r)?;
        if bank.q() != q || bank.q_int() != q_int {
            return Err(Error::Shape(format!(
                "feature bank is {} x {}, expected q_int = {q_int}, q = {q}",
                bank.q_int(),
                bank.q()
            )));
        }
        Ok(bank)
    }
}

fn use_sum_of_squares(dof: f64) -> bool {
    dof.fract() == 0.0 && (dof as u64).is_multiple_of(2) && dof <= SUM_OF_SQUARES_MAX_DOF
}

fn chi_squared_by_squares<R: Rng>(rng: &mut R, dof: usize) -> f64 {
    (0..dof)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x * x
        })
        .sum()
}

/// Certified upper bound on `max_{|θ|=1} (1/n) Σ_j <ω^j, θ>^4`.
///
/// Writing `<ω, θ>^2 = <ω ω^T, θ θ^T>_F`, the quartic is the quadratic form
/// `Q(S) = (1/n) Σ_j <ω^j ω^jT, S>^2` restricted to rank-one `S = θθ^T`.
/// `T(S) = (tr S)^2 - ‖S‖_F^2` vanishes on rank-one `S`, so for every `c`
/// the top eigenvalue of `Q - c T` over unit-Frobenius symmetric matrices is
/// an upper bound. The bound is minimised over `c >= 0` (it is convex in
/// `c`). For `q <= 2` the minimum equals the true maximum; for spherically
/// symmetric frequency laws it converges to `k''''(0)` as `n` grows.
pub fn fourth_moment_bound(omegas: &DMatrix<f64>) -> f64 {
    let n = omegas.nrows();
    let q = omegas.ncols();
    let m = q * (q + 1) / 2;
    // ψ(ω): coordinates of ωω^T in an orthonormal basis of symmetric
    // matrices (E_ii, (E_ij + E_ji)/√2), diagonal entries first.
    let mut psi = DMatrix::zeros(n, m);
    let sqrt2 = std::f64::consts::SQRT_2;
    for j in 0..n {
        let mut col = q;
        for a in 0..q {
            let wa = omegas[(j, a)];
            psi[(j, a)] = wa * wa;
            for b in (a + 1)..q {
                psi[(j, col)] = sqrt2 * wa * omegas[(j, b)];
                col += 1;
            }
        }
    }
    let mut e = DVector::zeros(m);
    for a in 0..q {
        e[a] = 1.0;
    }

    // Work in span{ψ_j} ∪ {e} when that is smaller than the full space; the
    // form Q - c e e^T vanishes on the orthogonal complement.
    let (gram, e_red, has_complement) = if n + 1 < m {
        let mut basis = DMatrix::zeros(m, n + 1);
        basis.column_mut(0).copy_from(&e);
        for j in 0..n {
            basis.column_mut(j + 1).copy_from(&psi.row(j).transpose());
        }
        let qr = basis.qr();
        let p = qr.q();
        let psi_red = &psi * &p;
        let g = psi_red.tr_mul(&psi_red) / n as f64;
        (g, p.tr_mul(&e), true)
    } else {
        (psi.tr_mul(&psi) / n as f64, e, false)
    };

    let eig = SymmetricEigen::new(gram);
    let lambdas = eig.eigenvalues.clone();
    let w = eig.eigenvectors.tr_mul(&e_red);
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| lambdas[a].total_cmp(&lambdas[b]));
    let top = *order.last().unwrap();
    let second = if order.len() >= 2 {
        Some(order[order.len() - 2])
    } else {
        None
    };
    let e_norm2 = e_red.norm_squared();

    let downdated_top = |c: f64| -> f64 {
        let l_top = lambdas[top];
        let mut lo = l_top - c * e_norm2;
        if let Some(s) = second {
            lo = lo.max(lambdas[s]);
        }
        let mut hi = l_top;
        if c == 0.0 || w[top] * w[top] <= f64::MIN_POSITIVE {
            return l_top;
        }
        // Secular equation 1 - c Σ w_i² / (λ_i - μ) = 0, decreasing in μ.
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let f = 1.0
                - c * w
                    .iter()
                    .zip(lambdas.iter())
                    .map(|(wi, li)| wi * wi / (li - mid))
                    .sum::<f64>();
            if f > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut top_val = hi;
        if has_complement {
            top_val = top_val.max(0.0);
        }
        top_val
    };
    let bound = |c: f64| downdated_top(c) + c;

    let inv_phi = 0.5 * (5.0_f64.sqrt() - 1.0);
    let (mut a, mut b) = (0.0_f64, lambdas[top].max(0.0));
    let mut best = bound(0.0);
    if b > 0.0 {
        let mut x1 = b - inv_phi * (b - a);
        let mut x2 = a + inv_phi * (b - a);
        let (mut f1, mut f2) = (bound(x1), bound(x2));
        for _ in 0..120 {
            if b - a <= 1e-13 * b {
                break;
            }
            if f1 < f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - inv_phi * (b - a);
                f1 = bound(x1);
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + inv_phi * (b - a);
                f2 = bound(x2);
            }
        }
        best = best.min(f1).min(f2).min(bound(0.5 * (a + b)));
    }
    best.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quartic(omegas: &DMatrix<f64>, theta: &[f64]) -> f64 {
        let n = omegas.nrows();
        (0..n)
            .map(|j| {
                let p: f64 = (0..theta.len()).map(|i| omegas[(j, i)] * theta[i]).sum();
                p.powi(4)
            })
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn zero_dimensions_are_rejected() {
        assert!(FeatureBank::sample(0, 4, KernelSpec::gaussian(), 0).is_err());
        assert!(FeatureBank::sample(2, 0, KernelSpec::gaussian(), 0).is_err());
    }

    #[test]
    fn same_seed_same_bank() {
        let spec = KernelSpec::matern(3.0).unwrap();
        let a = FeatureBank::sample(3, 50, spec, 11).unwrap();
        let b = FeatureBank::sample(3, 50, spec, 11).unwrap();
        assert_eq!(a, b);
        let c = FeatureBank::sample(3, 50, spec, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn non_integer_dof_uses_gamma_path() {
        let spec = KernelSpec::matern(2.7).unwrap();
        let bank = FeatureBank::sample(2, 20_000, spec, 3).unwrap();
        let var = bank.omegas().iter().map(|w| w * w).sum::<f64>() / 40_000.0;
        // ν/(ν−1) = 1.588; heavy tails make the MC error large, keep it loose.
        assert!((var - 2.7 / 1.7).abs() < 0.2, "{var}");
    }

    #[test]
    fn features_at_origin() {
        let bank = FeatureBank::sample(2, 16, KernelSpec::gaussian(), 0).unwrap();
        let phi = bank.feature_map(&DVector::zeros(2)).unwrap();
        for j in 0..16 {
            assert_eq!(phi[j], 0.25);
            assert_eq!(phi[16 + j], 0.0);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let bank = FeatureBank::sample(2, 4, KernelSpec::gaussian(), 0).unwrap();
        assert!(matches!(bank.feature_map(&DVector::zeros(3)), Err(Error::Shape(_))));
        assert!(bank.kernel(&DVector::zeros(2), &DVector::zeros(1)).is_err());
    }

    #[test]
    fn kernel_matches_inner_product() {
        let bank = FeatureBank::sample(3, 64, KernelSpec::matern(3.0).unwrap(), 5).unwrap();
        let z = DVector::from_vec(vec![0.3, -1.0, 0.7]);
        let zp = DVector::from_vec(vec![-0.2, 0.4, 1.1]);
        let ip = bank.feature_map(&z).unwrap().dot(&bank.feature_map(&zp).unwrap());
        let k = bank.kernel(&z, &zp).unwrap();
        assert!((ip - k).abs() < 1e-14);
        assert_eq!(bank.kernel(&z, &z).unwrap(), 1.0);
        assert_eq!(k.to_bits(), bank.kernel(&zp, &z).unwrap().to_bits());
    }

    #[test]
    fn kappa_hat_of_zero_frequency() {
        let bank = FeatureBank::from_omegas(DMatrix::zeros(1, 3), KernelSpec::gaussian(), 0).unwrap();
        assert_eq!(bank.kappa_hat(), 1.0);
        let bank = FeatureBank::from_omegas(DMatrix::zeros(1, 1), KernelSpec::gaussian(), 0).unwrap();
        assert_eq!(bank.kappa_hat(), 1.0);
    }

    #[test]
    fn fourth_moment_bound_in_one_dimension_is_exact() {
        let om = DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]);
        let exact = (1.0 + 16.0 + 0.0625) / 3.0;
        assert!((fourth_moment_bound(&om) - exact).abs() < 1e-12);
    }

    #[test]
    fn fourth_moment_bound_is_tight_in_two_dimensions() {
        let bank = FeatureBank::sample(2, 300, KernelSpec::matern(3.0).unwrap(), 9).unwrap();
        let om = bank.omegas();
        let scan = (0..20_000)
            .map(|k| {
                let a = std::f64::consts::PI * k as f64 / 20_000.0;
                quartic(om, &[a.cos(), a.sin()])
            })
            .fold(0.0, f64::max);
        let bound = fourth_moment_bound(om);
        assert!(bound >= scan * (1.0 - 1e-12), "{bound} < {scan}");
        assert!(bound <= scan * (1.0 + 1e-6), "{bound} vs {scan}");
    }

    #[test]
    fn fourth_moment_bound_dominates_samples_in_higher_dimension() {
        for &(q, n) in &[(3usize, 10usize), (5, 200), (6, 8)] {
            let bank = FeatureBank::sample(q, n, KernelSpec::gaussian(), q as u64).unwrap();
            let om = bank.omegas();
            let bound = fourth_moment_bound(om);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut best: f64 = 0.0;
            for _ in 0..2000 {
                let mut th: Vec<f64> = (0..q).map(|_| StandardNormal.sample(&mut rng)).collect();
                let nrm = th.iter().map(|x| x * x).sum::<f64>().sqrt();
                th.iter_mut().for_each(|x| *x /= nrm);
                best = best.max(quartic(om, &th));
            }
            for j in 0..n {
                let th: Vec<f64> = om.row(j).iter().copied().collect();
                let nrm = th.iter().map(|x| x * x).sum::<f64>().sqrt();
                let th: Vec<f64> = th.iter().map(|x| x / nrm).collect();
                best = best.max(quartic(om, &th));
            }
            assert!(bound >= best * (1.0 - 1e-12), "q={q}: {bound} < {best}");
            // never worse than the coarse bound (1/n) Σ ‖ω‖^4
            let coarse = (0..n).map(|j| om.row(j).norm_squared().powi(2)).sum::<f64>() / n as f64;
            assert!(bound <= coarse * (1.0 + 1e-12));
        }
    }

    #[test]
    fn bank_round_trip_and_rejections() {
        let bank = FeatureBank::sample(3, 7, KernelSpec::matern(3.0).unwrap(), 42).unwrap();
        let mut buf = Vec::new();
        bank.write_to(&mut buf).unwrap();
        assert_eq!(FeatureBank::read_from(&buf[..]).unwrap(), bank);
        assert!(matches!(
            FeatureBank::read_expecting(&buf[..], 3, 8),
            Err(Error::Shape(_))
        ));
        let mut truncated = buf.clone();
        truncated.truncate(buf.len() - 3);
        assert!(FeatureBank::read_from(&truncated[..]).is_err());
        let mut bad_version = buf.clone();
        bad_version[4] = 99;
        assert!(matches!(
            FeatureBank::read_from(&bad_version[..]),
            Err(Error::Format(_))
        ));
        let g = FeatureBank::sample(2, 3, KernelSpec::gaussian(), 1).unwrap();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        assert!(FeatureBank::read_from(&buf[..]).unwrap().spec().is_gaussian());
    }
}
