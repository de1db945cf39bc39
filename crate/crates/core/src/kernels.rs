//! Radial Matérn kernels defined through their frequency distribution.
//!
//! For smoothness `nu` the frequency law projected on any unit direction is
//! the unit-scale Student-t with `2 nu` degrees of freedom, so
//! `k(r) = E[cos(r s)]`, `s ~ t_{2 nu}`. The Student-t is a normal scale
//! mixture `s = Y / sqrt(w)` with `w ~ Gamma(nu, rate nu)`, which gives the
//! equivalent non-oscillatory form `k(r) = E_w[exp(-r^2 / (2 w))]`. That
//! form is what [`eval_kernel`] integrates: its integrand is positive and
//! log-concave in `ln w`, so both `k` and `1 - k` come out with full relative
//! accuracy. `nu = inf` is the Gaussian kernel `exp(-r^2 / 2)`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{OnceLock, RwLock};

use crate::error::{Error, Result};
use crate::quadrature::integrate_breakpoints;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    nu: f64,
}

impl KernelSpec {
    /// Matérn kernel of smoothness `nu`; `f64::INFINITY` selects the Gaussian.
    pub fn matern(nu: f64) -> Result<Self> {
        if nu.is_nan() || nu <= 2.0 {
            return Err(Error::InvalidKernel { nu });
        }
        Ok(Self { nu })
    }

    pub const fn gaussian() -> Self {
        Self { nu: f64::INFINITY }
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn is_gaussian(&self) -> bool {
        self.nu.is_infinite()
    }

    /// Variance of each frequency coordinate, `-k''(0)`.
    pub fn frequency_variance(&self) -> f64 {
        derivatives_at_zero(*self).0
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_gaussian() {
            write!(f, "inf")
        } else {
            write!(f, "{}", self.nu)
        }
    }
}

impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "inf" | "infinity" | "+inf" | "gaussian" => Ok(Self::gaussian()),
            _ => {
                let nu: f64 = t
                    .parse()
                    .map_err(|_| Error::Config(format!("cannot parse smoothness '{s}'")))?;
                Self::matern(nu)
            }
        }
    }
}

/// `(-k''(0), k''''(0))`, the second and fourth moments of one frequency
/// coordinate.
pub fn derivatives_at_zero(spec: KernelSpec) -> (f64, f64) {
    if spec.is_gaussian() {
        return (1.0, 3.0);
    }
    let nu = spec.nu;
    (nu / (nu - 1.0), 3.0 * nu * nu / ((nu - 1.0) * (nu - 2.0)))
}

/// Admissibility constant `sqrt(k(0)) + sqrt(-k''(0)) + sqrt(k''''(0))`.
pub fn kappa(spec: KernelSpec) -> f64 {
    let (neg_k2, k4) = derivatives_at_zero(spec);
    1.0 + neg_k2.sqrt() + k4.sqrt()
}

/// `k(r)` to (at least) 1e-10 absolute accuracy; in practice the relative
/// error is a few ulps.
pub fn eval_kernel(spec: KernelSpec, r: f64) -> Result<f64> {
    Ok(kernel_pair(spec, r)?.0)
}

/// `1 - k(r)`, accurate relative to its own magnitude for small `r`.
pub fn kernel_deficit(spec: KernelSpec, r: f64) -> Result<f64> {
    Ok(kernel_pair(spec, r)?.1)
}

/// Radius beyond which `k <= 1 / (2 n)`.
pub fn beta(spec: KernelSpec, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("beta needs N >= 2, got {n}")));
    }
    let target = 0.5 / n as f64;
    let (mut lo, mut hi) = (0.0_f64, 100.0_f64);
    while eval_kernel(spec, hi)? > target {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::InvalidInput("beta bracket overflow".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-14 * hi.max(1.0) {
            break;
        }
        if eval_kernel(spec, mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

type Cache = RwLock<HashMap<(u64, u64), (f64, f64)>>;

fn cache() -> &'static Cache {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

const CACHE_LIMIT: usize = 1 << 16;

fn kernel_pair(spec: KernelSpec, r: f64) -> Result<(f64, f64)> {
    if !(r >= 0.0) || r.is_infinite() {
        return Err(Error::InvalidInput(format!(
            "kernel radius must be finite and >= 0, got {r}"
        )));
    }
    if r == 0.0 {
        return Ok((1.0, 0.0));
    }
    if spec.is_gaussian() {
        let h = -0.5 * r * r;
        return Ok((h.exp(), -h.exp_m1()));
    }
    let key = (spec.nu.to_bits(), r.to_bits());
    if let Some(v) = cache().read().ok().and_then(|c| c.get(&key).copied()) {
        return Ok(v);
    }
    let v = mixture_pair(spec.nu, r);
    if let Ok(mut c) = cache().write() {
        if c.len() >= CACHE_LIMIT {
            c.clear();
        }
        c.insert(key, v);
    }
    Ok(v)
}

fn log_normaliser(nu: f64) -> f64 {
    let key = (nu.to_bits(), 0_u64);
    if let Some(v) = cache().read().ok().and_then(|c| c.get(&key).copied()) {
        return v.0;
    }
    let v = log_integral(|t| nu * (t - t.exp_m1()));
    if let Ok(mut c) = cache().write() {
        c.insert(key, (v, 0.0));
    }
    v
}

fn mixture_pair(nu: f64, r: f64) -> (f64, f64) {
    let log_norm = log_normaliser(nu);
    let half_r2 = 0.5 * r * r;
    let log_deficit = log_integral(|t| nu * (t - t.exp_m1()) + (-(-half_r2 * (-t).exp()).exp_m1()).ln());
    let deficit = (log_deficit - log_norm).exp();
    if deficit < 0.5 {
        return (1.0 - deficit, deficit);
    }
    let log_k = log_integral(|t| nu * (t - t.exp_m1()) - half_r2 * (-t).exp());
    let k = (log_k - log_norm).exp();
    (k, 1.0 - k)
}

/// `ln ∫ exp(g(t)) dt` over the real line for a concave `g`.
fn log_integral<G: Fn(f64) -> f64>(g: G) -> f64 {
    // Golden-section search for the mode.
    let inv_phi = 0.5 * (5.0_f64.sqrt() - 1.0);
    let (mut a, mut b) = (-300.0_f64, 60.0_f64);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut gc, mut gd) = (g(c), g(d));
    for _ in 0..200 {
        if b - a < 1e-12 {
            break;
        }
        if gc > gd {
            b = d;
            d = c;
            gd = gc;
            c = b - inv_phi * (b - a);
            gc = g(c);
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + inv_phi * (b - a);
            gd = g(d);
        }
    }
    let mode = 0.5 * (a + b);
    let peak = g(mode);

    let curvature = |h: f64| -(g(mode + h) - 2.0 * peak + g(mode - h)) / (h * h);
    let mut width = 1.0;
    let c1 = curvature(1e-3);
    if c1 > 0.0 && c1.is_finite() {
        width = 1.0 / c1.sqrt();
        let c2 = curvature(0.1 * width);
        if c2 > 0.0 && c2.is_finite() {
            width = 1.0 / c2.sqrt();
        }
    }

    // Breakpoints at mode ± width·{0.5, 1, 2, 3, 4, 6, 8, ...} until the
    // integrand has dropped by e^-60 relative to the peak.
    let mut left = vec![];
    let mut right = vec![];
    for side in [-1.0_f64, 1.0] {
        let pts = if side < 0.0 { &mut left } else { &mut right };
        let mut off = 0.5;
        loop {
            let t = mode + side * off * width;
            pts.push(t);
            if g(t) < peak - 60.0 || off > 1e6 {
                break;
            }
            off = if off < 4.0 {
                off + if off < 1.0 { 0.5 } else { 1.0 }
            } else {
                off * 1.5
            };
        }
    }
    let mut bps: Vec<f64> = left.into_iter().rev().collect();
    bps.push(mode);
    bps.extend(right);

    let res = integrate_breakpoints(|t| (g(t) - peak).exp(), &bps, 0.0, 1e-15, 4000);
    peak + res.value.ln()
}
