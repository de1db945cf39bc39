//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or overruns its time budget.

mod common;

use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::Rng;
use rkhs_flow::diagnostics::{
    check_trajectory_bounds, first_certified_q, gram_matrix, lambda_bounds, q_threshold_sweep, verify_rate_along_run,
};
use rkhs_flow::embedding::build_embedding;
use rkhs_flow::experiment::{random_pairs, rff_median_error, run_sweep, ExperimentConfig, SweepParam, SweepSummary};
use rkhs_flow::kernels::{beta, derivatives_at_zero, eval_kernel, kappa};
use rkhs_flow::trainer::{init_control, train_from, TrainConfig};
use rkhs_flow::{ControlPath, Dataset, EmbeddingVariant, FeatureBank, FlowModel, KernelSource, KernelSpec};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn kappa_anchors() -> Outcome {
    let kg = kappa(KernelSpec::gaussian());
    let mut ok = (kg - (2.0 + 3f64.sqrt())).abs() <= 1e-12;
    let expected = [
        (3.0, 1.5, 13.5),
        (4.0, 4.0 / 3.0, 8.0),
        (10.0, 10.0 / 9.0, 300.0 / 72.0),
    ];
    for (nu, a, b) in expected {
        let (neg_k2, k4) = derivatives_at_zero(KernelSpec::matern(nu).unwrap());
        ok &= neg_k2 == nu / (nu - 1.0) && k4 == 3.0 * nu * nu / ((nu - 1.0) * (nu - 2.0));
        ok &= (neg_k2 - a).abs() <= 1e-15 && (k4 - b).abs() <= 1e-14;
    }
    outcome(ok, format!("kappa(inf)={kg:.15}"))
}

/// Sample variance of one frequency coordinate and its standard error.
fn coordinate_variance(bank: &FeatureBank, col: usize) -> (f64, f64) {
    let w = bank.omegas().column(col);
    let n = w.len() as f64;
    let mean = w.sum() / n;
    let dev: Vec<f64> = w.iter().map(|x| (x - mean).powi(2)).collect();
    let var = dev.iter().sum::<f64>() / (n - 1.0);
    let m4 = dev.iter().map(|d| d * d).sum::<f64>() / n;
    (var, ((m4 - var * var) / n).sqrt())
}

fn frequency_moments() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for (spec, target) in [(KernelSpec::matern(3.0).unwrap(), 1.5), (KernelSpec::gaussian(), 1.0)] {
        let bank = FeatureBank::sample(2, 100_000, spec, 0).unwrap();
        for col in 0..2 {
            let (var, se) = coordinate_variance(&bank, col);
            let z = (var - target) / se;
            ok &= z.abs() <= 3.0;
            detail.push(format!("nu={spec} coord{col} var={var:.5} z={z:.2}"));
        }
    }
    outcome(ok, detail.join(", "))
}

fn rff_concentration() -> Outcome {
    let spec = KernelSpec::matern(3.0).unwrap();
    let pairs = random_pairs(2, 200, 5.0, 11);
    let exact: Vec<f64> = pairs
        .iter()
        .map(|(z, zp)| eval_kernel(spec, (z - zp).norm()).unwrap())
        .collect();
    let coarse = rff_median_error(spec, 2, &pairs, &exact, 1024, 50, 10_000).unwrap();
    let fine = rff_median_error(spec, 2, &pairs, &exact, 4096, 50, 20_000).unwrap();
    let ratio = coarse / fine;
    outcome(
        (1.3..=3.1).contains(&ratio),
        format!("median 1024={coarse:.3e} 4096={fine:.3e} ratio={ratio:.3}"),
    )
}

fn gradient_oracle() -> Outcome {
    let spec = KernelSpec::matern(3.0).unwrap();
    let mut worst = 0.0_f64;
    for seed in 0..20 {
        let inst = common::random_instance(seed, 4, 2, 3, 8, 5, spec, 1.0);
        worst = worst.max(common::gradient_fd_error(&inst, 1e-5));
    }
    outcome(worst <= 1e-5, format!("20 instances, max relative error {worst:.3e}"))
}

fn separated_points(rng: &mut rand_chacha::ChaCha8Rng, n: usize, min_dist: f64) -> Vec<DVector<f64>> {
    let side = min_dist * (n as f64).sqrt() * 2.0;
    let mut pts: Vec<DVector<f64>> = Vec::with_capacity(n);
    while pts.len() < n {
        let p = DVector::from_fn(2, |_, _| rng.random::<f64>() * side);
        if pts.iter().all(|o| (o - &p).norm() >= min_dist) {
            pts.push(p);
        }
    }
    pts
}

fn diagonal_dominance() -> Outcome {
    let mut worst = f64::INFINITY;
    let mut sets = 0;
    let mut rng = common::rng(5);
    for spec in [KernelSpec::matern(3.0).unwrap(), KernelSpec::gaussian()] {
        for n in [5usize, 10, 20] {
            let b = beta(spec, n).unwrap();
            for _ in 0..100 {
                let pts = separated_points(&mut rng, n, b);
                let g = gram_matrix(&pts, KernelSource::Exact(spec)).unwrap();
                worst = worst.min(lambda_bounds(&g).unwrap().0);
                sets += 1;
            }
        }
    }
    outcome(worst >= 0.5, format!("{sets} point sets, min lambda_min {worst:.4}"))
}

fn beta_anchor() -> Outcome {
    let mut ok = true;
    let mut worst = 0.0_f64;
    for spec in [KernelSpec::matern(3.0).unwrap(), KernelSpec::gaussian()] {
        for n in [2usize, 50] {
            let b = beta(spec, n).unwrap();
            let err = (eval_kernel(spec, b).unwrap() - 0.5 / n as f64).abs();
            worst = worst.max(err);
            ok &= err <= 1e-8;
        }
    }
    let b2 = beta(KernelSpec::gaussian(), 2).unwrap();
    ok &= (b2 - (2.0 * 4f64.ln()).sqrt()).abs() <= 1e-6;
    outcome(ok, format!("max |k(beta) - 1/2N| {worst:.2e}, beta(inf,2)={b2:.10}"))
}

fn fig1_config() -> ExperimentConfig {
    ExperimentConfig::default()
}

fn fig1_sweeps(dir: &std::path::Path) -> (SweepSummary, SweepSummary) {
    let cfg = fig1_config();
    let a = run_sweep(&cfg, SweepParam::Q, &dir.join("a"), 1).unwrap();
    let b = run_sweep(&cfg, SweepParam::QInt, &dir.join("b"), 1).unwrap();
    (a, b)
}

fn pl_sandwich(a: &SweepSummary, b: &SweepSummary) -> Outcome {
    let (mut steps, mut upper, mut lower, mut runs, mut errors) = (0, 0, 0, 0, 0);
    for cell in a.cells.iter().chain(&b.cells) {
        for run in &cell.runs {
            match &run.result {
                Ok(r) => {
                    runs += 1;
                    steps += r.pl_checks.len();
                    upper += r.pl_upper_passes();
                    lower += r.pl_lower_passes();
                }
                Err(_) => errors += 1,
            }
        }
    }
    outcome(
        errors == 0 && upper == steps && lower == steps,
        format!("{runs} runs, {steps} steps: upper {upper}/{steps}, lower {lower}/{steps}, errors {errors}"),
    )
}

fn rate_certificate() -> Outcome {
    let spec = KernelSpec::gaussian();
    let k = kappa(spec);
    let radius = 0.1;
    let xs = vec![DVector::from_vec(vec![-1.0, 0.0]), DVector::from_vec(vec![1.0, 0.0])];
    let ys: Vec<DVector<f64>> = xs.iter().map(|x| x + DVector::from_vec(vec![0.0, 0.01])).collect();
    let data = Dataset::new(xs, ys).unwrap();
    let qs: Vec<usize> = (1..=12).map(|e| 1usize << e).collect();
    let points = q_threshold_sweep(&data, spec, k, radius, &qs).unwrap();
    let Some(q) = first_certified_q(&points) else {
        return outcome(false, "no certified q in the sweep".into());
    };
    let report = points.iter().find(|p| p.q == q).unwrap().report.clone();

    let q_int = 1024;
    let cfg = TrainConfig {
        eta: 1.0 / report.big_m_r,
        max_steps: 200,
        steps: 32,
        q,
        q_int,
        spec,
        variant: EmbeddingVariant::Canonical,
        ..TrainConfig::default()
    };
    let bank = FeatureBank::sample(q, q_int, spec, 0).unwrap();
    let model = FlowModel::new(bank, build_embedding(q, 2, 2).unwrap()).unwrap();
    let start = init_control(&cfg, model.bank()).unwrap();
    let out = train_from(&cfg, model, start, &data).unwrap();
    let checks = verify_rate_along_run(&out.log, &report, 1e-9);
    let rate = checks.iter().filter(|c| c.rate_ok).count();
    let ball = checks.iter().filter(|c| c.ball_ok).count();
    let max_dist = out.log.records.iter().map(|r| r.v_dist_init).fold(0.0, f64::max);
    let ok = report.init_satisfied
        && report.lambda_certified
        && (out.log.records[0].loss - report.loss0).abs() <= 1e-15
        && rate == checks.len()
        && ball == checks.len();
    outcome(
        ok,
        format!(
            "q*={q} mu={:.4} init_lhs={:.4} R={radius}, {} steps ({}), rate {rate}/{n}, ball {ball}/{n}, max dist {max_dist:.3e}",
            report.mu,
            report.init_lhs,
            checks.len(),
            out.log.status,
            n = checks.len()
        ),
    )
}

fn fig1_ordering(a: &SweepSummary, b: &SweepSummary) -> Outcome {
    let fa: Vec<f64> = a.cells.iter().map(|c| c.final_mean_loss()).collect();
    let fb: Vec<f64> = b.cells.iter().map(|c| c.final_mean_loss()).collect();
    let nonincreasing = fa.windows(2).all(|w| w[1] <= w[0]);
    let qint8 = b.cells.iter().find(|c| c.param == 8).map(|c| c.final_mean_loss());
    let qint120 = b.cells.iter().find(|c| c.param == 120).map(|c| c.final_mean_loss());
    let poor = matches!((qint8, qint120), (Some(x), Some(y)) if x > y);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" ");
    outcome(
        nonincreasing && poor,
        format!("(a) q=2,8,32: {}; (b) q_int=8,30,120: {}", fmt(&fa), fmt(&fb)),
    )
}

fn lemma_one() -> Outcome {
    let spec = KernelSpec::matern(3.0).unwrap();
    let (mut worst_sep, mut worst_lo, mut worst_up) = (f64::INFINITY, f64::INFINITY, 0.0_f64);
    let mut all_ok = true;
    for i in 0..20u64 {
        let data = rkhs_flow::experiment::synth_dataset(6, 2, 2, 0.2, 100 + i).unwrap();
        let cfg = TrainConfig {
            eta: 1.0,
            max_steps: 40,
            steps: 64,
            q: 4,
            q_int: 16,
            spec,
            seed: i,
            init_scale: 0.05 + 0.1 * i as f64,
            ..TrainConfig::default()
        };
        let bank = FeatureBank::sample(cfg.q, cfg.q_int, spec, i).unwrap();
        let model = FlowModel::new(bank, build_embedding(cfg.q, 2, 2).unwrap()).unwrap();
        let start = init_control(&cfg, model.bank()).unwrap();
        let (model, control): (FlowModel, ControlPath) = if i % 2 == 0 {
            (model, start)
        } else {
            let out = train_from(&cfg, model, start, &data).unwrap();
            (out.model, out.control)
        };
        let k = model.bank().kappa_hat();
        let grad = model.gradient(&control, &data).unwrap();
        let c = check_trajectory_bounds(&grad.bundle, &data, model.pair(), k, control.norm(), 5.0).unwrap();
        all_ok &= c.separation_ok() && c.adjoint_ok();
        worst_sep = worst_sep.min(c.separation_ratio);
        worst_lo = worst_lo.min(c.adjoint_lower_ratio);
        worst_up = worst_up.max(c.adjoint_upper_ratio);
    }
    outcome(
        all_ok,
        format!("20 controls (10 trained), min sep ratio {worst_sep:.3}, min adj lower ratio {worst_lo:.3}, max adj upper ratio {worst_up:.3}"),
    )
}

fn determinism(a: &SweepSummary, dir: &std::path::Path) -> Outcome {
    let mut cfg = fig1_config();
    cfg.q_values = vec![cfg.q_values[0]];
    let rerun = run_sweep(&cfg, SweepParam::Q, &dir.join("rerun"), 1).unwrap();
    let first_param = a.cells[0].param.to_string() + ",";
    let read = |p: &std::path::Path| std::fs::read_to_string(p).unwrap();
    let original: Vec<String> = read(&a.csv_path)
        .lines()
        .filter(|l| l.starts_with(&first_param))
        .map(String::from)
        .collect();
    let again: Vec<String> = read(&rerun.csv_path).lines().skip(1).map(String::from).collect();
    let same_summary = original == again && !original.is_empty();
    let log_path = |root: &std::path::Path| {
        root.join("runs")
            .join(format!("q_{}", a.cells[0].param))
            .join("seed_0")
            .join("train_log.csv")
    };
    let same_log = read(&log_path(&dir.join("a"))) == read(&log_path(&dir.join("rerun")));
    outcome(
        same_summary && same_log,
        format!(
            "{} summary rows identical: {same_summary}, seed-0 log identical: {same_log}",
            original.len()
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut failures = 0;
    let mut report = |id: usize, name: &str, budget: Duration, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let elapsed = t.elapsed();
        let in_time = elapsed <= budget;
        let pass = o.passed && in_time;
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {id:>2} {} {name}: {} [{:.2}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    };
    let secs = Duration::from_secs;

    report(1, "kappa anchors", secs(1), &mut kappa_anchors);
    report(2, "frequency moments", secs(5), &mut frequency_moments);
    report(3, "rff concentration", secs(30), &mut rff_concentration);
    report(4, "gradient oracle", secs(30), &mut gradient_oracle);
    report(5, "diagonal dominance", secs(10), &mut diagonal_dominance);
    report(6, "beta root anchor", secs(5), &mut beta_anchor);

    let t = Instant::now();
    let (a, b) = fig1_sweeps(dir.path());
    let fig1_time = t.elapsed();
    report(7, "pl sandwich along fig1 runs", secs(300), &mut || pl_sandwich(&a, &b));
    report(8, "rate and boundedness certificate", secs(120), &mut rate_certificate);
    report(9, "fig1 qualitative ordering", secs(300), &mut || {
        let mut o = fig1_ordering(&a, &b);
        o.detail += &format!(", sweeps took {:.1}s", fig1_time.as_secs_f64());
        o.passed &= fig1_time <= secs(300);
        o
    });
    report(10, "trajectory bounds", secs(60), &mut lemma_one);
    report(11, "sweep determinism", secs(60), &mut || determinism(&a, dir.path()));

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 11 acceptance criteria passed");
}
