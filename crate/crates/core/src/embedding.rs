//! Fixed linear maps into and out of the latent space `R^q`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Which pair of matrices to build.
///
/// * `Canonical`: `A = q^{-1/4} (I_d, …, I_d, 0)^T` with `⌊q/d⌋` identity
///   blocks and `B = q^{1/4} (I_{d'}, 0, …, 0)`. Balanced singular values,
///   used by the convergence diagnostics.
/// * `Experiment`: `A = (I_d, 0, …, 0)^T` and `B = (I_{d'}, …, I_{d'}, 0)`
///   with `⌊q/d'⌋` blocks, the unnormalised pair used for training sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingVariant {
    Canonical,
    Experiment,
}

impl fmt::Display for EmbeddingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingVariant::Canonical => "canonical",
            EmbeddingVariant::Experiment => "experiment",
        })
    }
}

impl FromStr for EmbeddingVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "canonical" => Ok(Self::Canonical),
            "experiment" => Ok(Self::Experiment),
            other => Err(Error::Config(format!("unknown embedding variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    variant: EmbeddingVariant,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    sigma_min_a: f64,
    sigma_min_b: f64,
    sigma_max_b: f64,
}

impl EmbeddingPair {
    pub fn new(variant: EmbeddingVariant, q: usize, d: usize, d_out: usize) -> Result<Self> {
        if d == 0 || d_out == 0 || q < d.max(d_out) {
            return Err(Error::InvalidDimension(format!(
                "embedding needs q >= max(d, d') >= 1, got q = {q}, d = {d}, d' = {d_out}"
            )));
        }
        let in_blocks = q / d;
        let out_blocks = q / d_out;
        let mut a = DMatrix::zeros(q, d);
        let mut b = DMatrix::zeros(d_out, q);
        let qf = q as f64;
        let (a_scale, b_scale, a_copies, b_copies) = match variant {
            EmbeddingVariant::Canonical => (qf.powf(-0.25), qf.powf(0.25), in_blocks, 1),
            EmbeddingVariant::Experiment => (1.0, 1.0, 1, out_blocks),
        };
        for blk in 0..a_copies {
            for i in 0..d {
                a[(blk * d + i, i)] = a_scale;
            }
        }
        for blk in 0..b_copies {
            for i in 0..d_out {
                b[(i, blk * d_out + i)] = b_scale;
            }
        }
        // A^T A and B B^T are multiples of the identity, so the singular
        // values are exact closed forms.
        let sigma_min_a = a_scale * (a_copies as f64).sqrt();
        let sigma_b = b_scale * (b_copies as f64).sqrt();
        Ok(Self {
            variant,
            a,
            b,
            sigma_min_a,
            sigma_min_b: sigma_b,
            sigma_max_b: sigma_b,
        })
    }

    pub fn variant(&self) -> EmbeddingVariant {
        self.variant
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn q(&self) -> usize {
        self.a.nrows()
    }

    pub fn d(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }

    pub fn sigma_min_a(&self) -> f64 {
        self.sigma_min_a
    }

    /// `σ_min(B^T)`: smallest of the `d'` singular values of `B`.
    pub fn sigma_min_b(&self) -> f64 {
        self.sigma_min_b
    }

    pub fn sigma_max_b(&self) -> f64 {
        self.sigma_max_b
    }
}

/// Canonical pair `(A_q, B_q)`.
pub fn build_embedding(q: usize, d: usize, d_out: usize) -> Result<EmbeddingPair> {
    EmbeddingPair::new(EmbeddingVariant::Canonical, q, d, d_out)
}

/// Minimum pairwise Euclidean distance.
pub fn separation(points: &[DVector<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "separation needs at least 2 points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points of unequal dimension".into()));
    }
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            best = best.min((&points[i] - &points[j]).norm());
        }
    }
    Ok(best)
}
