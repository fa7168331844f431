//! Acceptance suite: one test per exit criterion, each printing a PASS line
//! with the measured figure (run with `--nocapture` to see them).
//!
//! Runtime budgets are asserted in optimized builds (`cargo test --release`);
//! unoptimized builds still run every check for substance and print the
//! elapsed time.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;
use std::time::Instant;

use linest_core::bundled;
use linest_core::harness::{run_experiment, true_parameter_vector, ExperimentConfig};
use linest_core::network::{
    assemble_bus_admittance, BusAdmittance, ParameterIndex, DEFAULT_COND_BOUND,
};
use linest_core::powerflow::{injections, parameter_jacobian, state_jacobian, StateIndex};
use linest_core::sim::{simulate, solve_equilibrium, true_state_matrix, SimOptions};
use linest_core::stage1::{
    covariances, estimate_state_matrix, sample_mean, state_matrix, CovNormalization,
    CovariancePair, Stage1Options,
};
use linest_core::stage2::{
    broyden_refine, run_pipeline, Aggregation, BroydenOptions, PipelineOptions, RefinementProblem,
};

fn assert_budget(name: &str, elapsed: f64, budget: f64) {
    if cfg!(debug_assertions) {
        eprintln!(
            "[acceptance] {name}: {elapsed:.2}s (budget {budget}s asserted in release builds)"
        );
    } else {
        assert!(
            elapsed < budget,
            "{name} took {elapsed:.2}s, budget {budget}s"
        );
    }
}

fn mape_of(truth: &DVector<f64>, est: &DVector<f64>, at: usize, len: usize) -> f64 {
    let t: Vec<f64> = truth.rows(at, len).iter().copied().collect();
    let e: Vec<f64> = est.rows(at, len).iter().copied().collect();
    linest_core::harness::mape(&t, &e).unwrap().percent
}

// --- independent helpers for criterion 1 (kept free of the library's
// matrix-log path: plain Taylor series exponential) ---

fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let squarings = (a.amax() * n as f64).log2().ceil().max(0.0) as u32 + 4;
    let scaled = a / 2f64.powi(squarings as i32);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = DMatrix::<f64>::identity(n, n);
    for k in 1..40 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if term.amax() < 1e-18 {
            break;
        }
    }
    let mut out = sum;
    for _ in 0..squarings {
        out = &out * &out;
    }
    out
}

/// Criterion 1: exact-covariance recovery of the state matrix across 100
/// random stable systems sized 4 to 20.
#[test]
fn criterion_1_exact_covariance_recovery() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let dt = 0.1;
    let mut worst = 0.0f64;
    for trial in 0..100usize {
        let n = 4 + trial % 17; // 4..=20
        let raw = DMatrix::from_fn(n, n, |_, _| {
            let x: f64 = rng.sample(StandardNormal);
            x / (n as f64).sqrt()
        });
        let max_re = raw
            .complex_eigenvalues()
            .iter()
            .map(|e| e.re)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut a = raw;
        for i in 0..n {
            a[(i, i)] -= max_re + 0.5;
        }
        let w = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c0 = &w * w.transpose() + DMatrix::identity(n, n);
        let cov = CovariancePair {
            c_lag: expm(&(&a * dt)) * &c0,
            c0,
            lag: 1,
            dt_lag: dt,
        };
        let a_hat = estimate_state_matrix(&cov, &Stage1Options::default()).unwrap();
        worst = worst.max((&a_hat - &a).norm() / a.norm());
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(worst < 1e-8, "worst relative recovery error {worst:.3e}");
    assert_budget("criterion 1", elapsed, 10.0);
    println!(
        "[acceptance] criterion 1 (exact-covariance recovery): PASS \
         (worst rel err {worst:.2e} over 100 draws, {elapsed:.2}s)"
    );
}

/// Criterion 2: analytic state and parameter Jacobians match central finite
/// differences within 1e-6 relative error on 20 randomized operating points.
#[test]
fn criterion_2_jacobian_correctness() {
    let start = Instant::now();
    let net = bundled::four_bus();
    let adm = assemble_bus_admittance(&net, DEFAULT_COND_BOUND).unwrap();
    let params = ParameterIndex::new(&net);
    let angles = StateIndex::non_slack(&adm);
    let truth = true_parameter_vector(&net, &params).unwrap();
    let npair = params.pair_count();
    let nbp = adm.dim();
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(0x1ACB);
    let mut worst = 0.0f64;
    // relative error with a floor scaled to the block magnitude: near-zero
    // entries are compared against the block scale, not their own size,
    // keeping the check meaningful against finite-difference roundoff
    let scale = {
        let jac = state_jacobian(
            &adm,
            &DVector::from_element(nbp, 1.0),
            &DVector::from_fn(nbp, |r, _| adm.index.label(r).1.nominal_angle()),
            &angles,
        );
        jac.full().amax()
    };
    let rel = move |got: f64, want: f64| (got - want).abs() / want.abs().max(1e-3 * scale);

    for _ in 0..20 {
        let v = DVector::from_fn(nbp, |_, _| {
            1.0 + 0.02 * rng.sample::<f64, _>(StandardNormal)
        });
        let d = DVector::from_fn(nbp, |r, _| {
            adm.index.label(r).1.nominal_angle() + 0.02 * rng.sample::<f64, _>(StandardNormal)
        });

        // state Jacobian
        let jac = state_jacobian(&adm, &v, &d, &angles);
        let stack = |v: &DVector<f64>, d: &DVector<f64>| -> DVector<f64> {
            let (p, q) = injections(&adm, v, d).unwrap();
            let m = angles.len();
            let mut out = DVector::zeros(2 * m);
            for (a, &r) in angles.rows().iter().enumerate() {
                out[a] = p[r];
                out[m + a] = q[r];
            }
            out
        };
        for (c, &j) in angles.rows().iter().enumerate() {
            let mut dp = d.clone();
            let mut dm = d.clone();
            dp[j] += h;
            dm[j] -= h;
            let fd = (stack(&v, &dp) - stack(&v, &dm)) / (2.0 * h);
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[j] += h;
            vm[j] -= h;
            let fdv = (stack(&vp, &d) - stack(&vm, &d)) / (2.0 * h);
            for a in 0..angles.len() {
                worst = worst.max(rel(jac.j_p_delta[(a, c)], fd[a]));
                worst = worst.max(rel(jac.j_q_delta[(a, c)], fd[angles.len() + a]));
                worst = worst.max(rel(jac.j_p_v[(a, c)], fdv[a]));
                worst = worst.max(rel(jac.j_q_v[(a, c)], fdv[angles.len() + a]));
            }
        }

        // parameter Jacobian at the true parameters
        let blocks = params.blocks_from_theta(&net, &truth);
        let cand = BusAdmittance::from_blocks(&net, &blocks);
        let pj = parameter_jacobian(&net, &cand, &v, &d, &params, &angles);
        for k in 0..2 * npair {
            let mut tp = truth.clone();
            let mut tm = truth.clone();
            tp[k] += h;
            tm[k] -= h;
            let eval = |th: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
                let blocks = params.blocks_from_theta(&net, th);
                let cand = BusAdmittance::from_blocks(&net, &blocks);
                injections(&cand, &v, &d).unwrap()
            };
            let (pp, qp) = eval(&tp);
            let (pm, qm) = eval(&tm);
            for r in 0..nbp {
                let (ap, aq) = if k < npair {
                    (pj.dp_dg[(r, k)], pj.dq_dg[(r, k)])
                } else {
                    (pj.dp_db[(r, k - npair)], pj.dq_db[(r, k - npair)])
                };
                worst = worst.max(rel(ap, (pp[r] - pm[r]) / (2.0 * h)));
                worst = worst.max(rel(aq, (qp[r] - qm[r]) / (2.0 * h)));
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(worst < 1e-6, "worst relative Jacobian error {worst:.3e}");
    assert_budget("criterion 2", elapsed, 5.0);
    println!(
        "[acceptance] criterion 2 (Jacobian correctness): PASS \
         (worst rel err {worst:.2e} on 20 operating points, {elapsed:.2}s)"
    );
}

/// Criterion 3: noiseless end-to-end recovery on the bundled 4-bus feeder at
/// 3600 samples: refinement beats stage 1 and lands under 5% susceptance
/// MAPE.
#[test]
fn criterion_3_noiseless_end_to_end() {
    let start = Instant::now();
    let net = bundled::four_bus();
    let adm = assemble_bus_admittance(&net, DEFAULT_COND_BOUND).unwrap();
    let dynamics = bundled::four_bus_dynamics(&net);
    let op = solve_equilibrium(&adm, &dynamics).unwrap();
    let series = simulate(
        &adm,
        &dynamics,
        &op,
        0.04,
        3600,
        1001,
        &SimOptions::default(),
    )
    .unwrap();
    let output = run_pipeline(&net, &adm, &dynamics, &series, &PipelineOptions::default()).unwrap();
    let truth = true_parameter_vector(&net, &output.params).unwrap();
    let npair = output.params.pair_count();
    let s1_b = mape_of(&truth, output.initial_theta(), npair, npair);
    let s2_b = mape_of(&truth, output.refined_theta(), npair, npair);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(s2_b < s1_b, "refined {s2_b:.3}% vs initial {s1_b:.3}%");
    assert!(s2_b < 5.0, "refined susceptance MAPE {s2_b:.3}%");
    assert_budget("criterion 3", elapsed, 30.0);
    println!(
        "[acceptance] criterion 3 (noiseless end-to-end): PASS \
         (MAPE(B) initial {s1_b:.2}% -> refined {s2_b:.2e}%, {elapsed:.2}s)"
    );
}

/// Criterion 4: from 10% uniformly perturbed true parameters with noiseless
/// measurements, the refinement reaches a 1e-8 mismatch within 50 iterations
/// in all 20 seeded trials.
#[test]
fn criterion_4_broyden_convergence() {
    let start = Instant::now();
    let net = bundled::four_bus();
    let adm = assemble_bus_admittance(&net, DEFAULT_COND_BOUND).unwrap();
    let dynamics = bundled::four_bus_dynamics(&net);
    let op = solve_equilibrium(&adm, &dynamics).unwrap();
    let series = simulate(&adm, &dynamics, &op, 0.04, 2400, 77, &SimOptions::default()).unwrap();
    let params = ParameterIndex::new(&net);
    let truth = true_parameter_vector(&net, &params).unwrap();
    let problem = RefinementProblem::new(
        adm.index.len(),
        &series,
        StateIndex::non_slack(&adm),
        Aggregation::default(),
    );
    let mut converged = 0usize;
    let mut max_iters = 0usize;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + trial);
        let theta0 = DVector::from_fn(truth.len(), |k, _| {
            let u: f64 = rng.gen_range(-1.0..1.0);
            truth[k] * (1.0 + 0.1 * u)
        });
        let result =
            broyden_refine(&net, &params, &problem, &theta0, &BroydenOptions::default()).unwrap();
        if result.converged && result.iterations <= 50 && result.final_norm < 1e-8 {
            converged += 1;
        }
        max_iters = max_iters.max(result.iterations);
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(converged, 20, "only {converged}/20 trials converged");
    println!(
        "[acceptance] criterion 4 (Broyden convergence): PASS \
         (20/20 trials, worst iteration count {max_iters}, {elapsed:.2}s)"
    );
}

/// Criterion 5: the median refined susceptance MAPE is non-decreasing across
/// the measurement-noise sweep.
#[test]
fn criterion_5_noise_degradation_pattern() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let feeder = dir.path().join("four_bus.json");
    let dynamics = dir.path().join("four_bus_dynamics.json");
    std::fs::write(&feeder, bundled::FOUR_BUS_JSON).unwrap();
    std::fs::write(&dynamics, bundled::FOUR_BUS_DYNAMICS_JSON).unwrap();
    let config = ExperimentConfig {
        feeder,
        dynamics,
        samples: 3600,
        dt: 0.04,
        lag: 1,
        noise_levels: vec![1e-6, 1e-5, 1e-4, 1e-3],
        replicates: 20,
        master_seed: 360360,
        substeps: 10,
        snapshots: 8,
        output_dir: dir.path().join("out"),
        workers: None,
    };
    let report = run_experiment(&config).unwrap();
    let medians: Vec<f64> = report
        .levels
        .iter()
        .map(|l| l.stage2_b.expect("every level has successes").median)
        .collect();
    let failures: usize = report.levels.iter().map(|l| l.failures).sum();
    let elapsed = start.elapsed().as_secs_f64();
    for w in medians.windows(2) {
        assert!(
            w[1] >= w[0],
            "median MAPE(B) decreased along the sweep: {medians:?}"
        );
    }
    assert_budget("criterion 5", elapsed, 600.0);
    println!(
        "[acceptance] criterion 5 (noise-degradation pattern): PASS \
         (medians {medians:?}, {failures} failures, {elapsed:.2}s)"
    );
}

/// Criterion 6: one full two-stage estimation on the 13-bus-scale feeder
/// completes within 5 seconds.
#[test]
fn criterion_6_timing_order() {
    let net = bundled::thirteen_bus();
    let adm = assemble_bus_admittance(&net, DEFAULT_COND_BOUND).unwrap();
    let dynamics = bundled::thirteen_bus_dynamics(&net);
    let op = solve_equilibrium(&adm, &dynamics).unwrap();
    let series = simulate(&adm, &dynamics, &op, 0.04, 3600, 13, &SimOptions::default()).unwrap();
    let start = Instant::now();
    let output = run_pipeline(&net, &adm, &dynamics, &series, &PipelineOptions::default()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(output.refined.converged);
    let truth = true_parameter_vector(&net, &output.params).unwrap();
    let npair = output.params.pair_count();
    let s2_b = mape_of(&truth, output.refined_theta(), npair, npair);
    assert!(s2_b < 5.0, "13-bus refined susceptance MAPE {s2_b:.3}%");
    assert_budget("criterion 6", elapsed, 5.0);
    println!(
        "[acceptance] criterion 6 (timing order): PASS \
         (pipeline {elapsed:.2}s on the 13-bus feeder, refined MAPE(B) {s2_b:.2e}%)"
    );
}

/// Criterion 7: two `evaluate` executions with the same config and master
/// seed produce byte-identical results files.
#[test]
fn criterion_7_determinism() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let feeder = dir.path().join("four_bus.json");
    let dynamics = dir.path().join("four_bus_dynamics.json");
    std::fs::write(&feeder, bundled::FOUR_BUS_JSON).unwrap();
    std::fs::write(&dynamics, bundled::FOUR_BUS_DYNAMICS_JSON).unwrap();
    let config = serde_json::json!({
        "feeder": feeder,
        "dynamics": dynamics,
        "samples": 1200,
        "dt": 0.04,
        "lag": 1,
        "noise_levels": [1e-5, 1e-4],
        "replicates": 3,
        "master_seed": 20240811,
        "output_dir": dir.path().join("unused"),
    });
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

    let run = |out: &Path| {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_linest"))
            .args(["evaluate", "--config"])
            .arg(&config_path)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    };
    let out_a = dir.path().join("run_a");
    let out_b = dir.path().join("run_b");
    run(&out_a);
    run(&out_b);
    let bytes_a = std::fs::read(out_a.join("results.csv")).unwrap();
    let bytes_b = std::fs::read(out_b.join("results.csv")).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(
        bytes_a, bytes_b,
        "results.csv differs between identical runs"
    );
    println!(
        "[acceptance] criterion 7 (determinism): PASS \
         (byte-identical results.csv, {} bytes, {elapsed:.2}s)",
        bytes_a.len()
    );
}

/// Criterion 8: the nonlinear simulator's stationary covariance matches the
/// Lyapunov solution of the linearized system within 15% at 50,000 samples.
#[test]
fn criterion_8_simulator_fidelity() {
    let start = Instant::now();
    let net = bundled::four_bus();
    let adm = assemble_bus_admittance(&net, DEFAULT_COND_BOUND).unwrap();
    let dynamics = bundled::four_bus_dynamics(&net);
    let op = solve_equilibrium(&adm, &dynamics).unwrap();
    let (a, b, state) = true_state_matrix(&adm, &dynamics, &op);

    // independent Lyapunov solve via the Kronecker system
    let m = a.nrows();
    let mut big = DMatrix::<f64>::zeros(m * m, m * m);
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                big[(k * m + i, k * m + j)] += a[(i, j)];
                big[(j * m + i, k * m + i)] += a[(j, k)];
            }
        }
    }
    let q = &b * b.transpose();
    let rhs = DVector::from_fn(m * m, |t, _| -q[(t % m, t / m)]);
    let solved = big.lu().solve(&rhs).unwrap();
    let c_oracle = DMatrix::from_fn(m, m, |i, j| solved[j * m + i]);

    let series = simulate(
        &adm,
        &dynamics,
        &op,
        0.04,
        50_000,
        88,
        &SimOptions::default(),
    )
    .unwrap();
    let f = state_matrix(&series, &state);
    let cov = covariances(&f, 1, 0.04, CovNormalization::SampleSize).unwrap();
    let rel = (&cov.c0 - &c_oracle).norm() / c_oracle.norm();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        rel < 0.15,
        "stationary covariance off by {:.2}%",
        100.0 * rel
    );
    // and the mean stays where it should
    let mu = sample_mean(&f);
    for k in 0..state.len() {
        assert!((mu[k] - op.delta[state.rows()[k]]).abs() < 1e-2);
    }
    println!(
        "[acceptance] criterion 8 (simulator fidelity): PASS \
         (relative Frobenius error {:.2}%, {elapsed:.2}s)",
        100.0 * rel
    );
}
