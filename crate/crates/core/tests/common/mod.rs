#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rkhs_flow::embedding::EmbeddingVariant;
use rkhs_flow::{ControlPath, Dataset, EmbeddingPair, FeatureBank, FlowModel, KernelSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(99);
    r
}

pub fn gauss_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * r.sample::<f64, _>(StandardNormal))
}

pub fn random_control(r: &mut ChaCha8Rng, steps: usize, q: usize, width: usize, scale: f64) -> ControlPath {
    let w = (0..steps)
        .map(|_| DMatrix::from_fn(q, width, |_, _| scale * r.sample::<f64, _>(StandardNormal)))
        .collect();
    ControlPath::from_weights(w).unwrap()
}

pub struct Instance {
    pub model: FlowModel,
    pub control: ControlPath,
    pub data: Dataset,
}

/// Random model, control and data of the given sizes.
#[allow(clippy::too_many_arguments)]
pub fn random_instance(
    seed: u64,
    n: usize,
    d: usize,
    q: usize,
    q_int: usize,
    steps: usize,
    spec: KernelSpec,
    w_scale: f64,
) -> Instance {
    let mut r = rng(seed);
    let bank = FeatureBank::sample(q, q_int, spec, seed).unwrap();
    let pair = EmbeddingPair::new(EmbeddingVariant::Experiment, q, d, d).unwrap();
    let model = FlowModel::new(bank, pair).unwrap();
    let control = random_control(&mut r, steps, q, 2 * q_int, w_scale);
    let xs = (0..n).map(|_| gauss_vec(&mut r, d, 1.0)).collect();
    let ys = (0..n).map(|_| gauss_vec(&mut r, d, 1.0)).collect();
    Instance {
        model,
        control,
        data: Dataset::new(xs, ys).unwrap(),
    }
}

/// `max |adjoint − central difference| / max |central difference|`.
pub fn gradient_fd_error(inst: &Instance, h: f64) -> f64 {
    let g = inst.model.gradient(&inst.control, &inst.data).unwrap();
    let c = &inst.control;
    let (mut num, mut den) = (0.0_f64, 0.0_f64);
    for l in 0..c.steps() {
        for i in 0..c.q() {
            for j in 0..c.width() {
                let mut plus = c.clone();
                *plus.entry_mut(l, i, j) += h;
                let mut minus = c.clone();
                *minus.entry_mut(l, i, j) -= h;
                let fd = (inst.model.risk(&plus, &inst.data).unwrap() - inst.model.risk(&minus, &inst.data).unwrap())
                    / (2.0 * h);
                num = num.max((g.partials.entry(l, i, j) - fd).abs());
                den = den.max(fd.abs());
            }
        }
    }
    num / den
}
