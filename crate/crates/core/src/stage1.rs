//! Stage 1: lagged covariance estimation, matrix-logarithm recovery of the
//! state matrix, WLS load time constants, and the initial per-branch (G*, B*)
//! extraction.
//!
//! The state vector stacks the dynamic bus-phase angles first, then the
//! magnitudes, matching the simulator's linearization A = -T^{-1} J. The
//! estimated state matrix therefore unscales to the injection Jacobian as
//! J = -T A.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::network::{BusAdmittance, NetworkModel, ParameterIndex, Phase};
use crate::powerflow::{state_jacobian, StateIndex};
use crate::sim::{LoadDynamics, MeasurementSeries};

#[derive(Debug, Error)]
pub enum Stage1Error {
    #[error("degenerate samples: the state covariance has vanishing variance")]
    DegenerateSamples,
    #[error("zero-lag covariance is singular even after ridge regularization")]
    SingularCovariance,
    #[error("matrix logarithm branch failure: {0}")]
    LogBranch(String),
    #[error("lag must satisfy 1 <= K < S (got K = {lag}, S = {samples})")]
    InvalidLag { lag: usize, samples: usize },
    #[error(
        "non-positive time constant at bus {bus} phase {phase} (slope {beta:.3e}): insufficient excitation or a static load"
    )]
    NonPositiveTau { bus: usize, phase: Phase, beta: f64 },
    #[error("series does not cover the dynamic state (missing bus {bus} phase {phase})")]
    MissingChannel { bus: usize, phase: Phase },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Zero-lag and lagged sample covariances of the stacked state.
#[derive(Debug, Clone)]
pub struct CovariancePair {
    pub c0: DMatrix<f64>,
    pub c_lag: DMatrix<f64>,
    pub lag: usize,
    pub dt_lag: f64,
}

/// Normalization of the lagged covariance estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovNormalization {
    /// 1/(S-1), as the estimator is usually written.
    #[default]
    SampleSize,
    /// 1/(S-K-1), matching the number of product terms.
    LagAdjusted,
}

/// Stack the dynamic state rows of a series into the (2m x S) state matrix
/// [angles; magnitudes].
pub fn state_matrix(series: &MeasurementSeries, state: &StateIndex) -> DMatrix<f64> {
    let m = state.len();
    let s = series.samples();
    let mut f = DMatrix::zeros(2 * m, s);
    for (k, &r) in state.rows().iter().enumerate() {
        for c in 0..s {
            f[(k, c)] = series.delta[(r, c)];
            f[(m + k, c)] = series.v[(r, c)];
        }
    }
    f
}

/// Arithmetic mean of the state columns.
pub fn sample_mean(states: &DMatrix<f64>) -> DVector<f64> {
    let s = states.ncols() as f64;
    DVector::from_fn(states.nrows(), |r, _| states.row(r).sum() / s)
}

/// The zero-lag and K-lag sample covariances, both centered on the full-series
/// mean.
pub fn covariances(
    states: &DMatrix<f64>,
    lag: usize,
    dt: f64,
    normalization: CovNormalization,
) -> Result<CovariancePair, Stage1Error> {
    let s = states.ncols();
    if lag == 0 || lag >= s {
        return Err(Stage1Error::InvalidLag { lag, samples: s });
    }
    let mu = sample_mean(states);
    let mut centered = states.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mu;
    }
    let c0 = &centered * centered.transpose() / (s as f64 - 1.0);
    if c0.trace() <= f64::MIN_POSITIVE * states.nrows() as f64 {
        return Err(Stage1Error::DegenerateSamples);
    }
    let denom = match normalization {
        CovNormalization::SampleSize => s as f64 - 1.0,
        CovNormalization::LagAdjusted => (s - lag) as f64 - 1.0,
    };
    let later = centered.columns(lag, s - lag);
    let earlier = centered.columns(0, s - lag);
    let c_lag = later * earlier.transpose() / denom;
    Ok(CovariancePair {
        c0,
        c_lag,
        lag,
        dt_lag: lag as f64 * dt,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct Stage1Options {
    /// Ridge added to C(0) as eps * trace / m before inversion.
    pub ridge: f64,
    /// Imaginary residue above which the log re-realization warns.
    pub imag_warn: f64,
    /// Condition bound on the per-pair normal equations; worse branches are
    /// flagged and keep a zero initial estimate.
    pub cond_bound: f64,
    pub normalization: CovNormalization,
    /// Weights on the four stacked Jacobian entries of the per-pair WLS
    /// system [J_Pd, J_PV, J_Qd, J_QV]; None is the identity weight.
    pub wls_weights: Option<[f64; 4]>,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Stage1Options {
            ridge: 1e-12,
            imag_warn: 1e-8,
            cond_bound: 1e12,
            normalization: CovNormalization::default(),
            wls_weights: None,
        }
    }
}

/// Recover the state matrix from the covariance pair:
/// A = log(C(lag) C(0)^{-1}) / (K dt).
pub fn estimate_state_matrix(
    cov: &CovariancePair,
    options: &Stage1Options,
) -> Result<DMatrix<f64>, Stage1Error> {
    let m = cov.c0.nrows();
    let mut c0 = cov.c0.clone();
    let ridge = options.ridge * c0.trace() / m as f64;
    for i in 0..m {
        c0[(i, i)] += ridge;
    }
    let inv = c0
        .lu()
        .try_inverse()
        .ok_or(Stage1Error::SingularCovariance)?;
    let ratio = &cov.c_lag * inv;
    let log = linalg::log_matrix_real(&ratio).map_err(|e| match e {
        LinalgError::LogBranch { .. } | LinalgError::SchurFailure => {
            Stage1Error::LogBranch(e.to_string())
        }
    })?;
    if log.imag_residue > options.imag_warn {
        log::warn!(
            "state-matrix logarithm discarded imaginary residue {:.3e}",
            log.imag_residue
        );
    }
    Ok(log.matrix / cov.dt_lag)
}

/// Estimated load time constants per dynamic bus-phase.
#[derive(Debug, Clone)]
pub struct TimeConstants {
    pub tau_p: DVector<f64>,
    pub tau_q: DVector<f64>,
}

/// Regress finite-difference angle (magnitude) increments on the deviation of
/// P (Q) from its sample mean; the slope is 1/tau.
pub fn estimate_time_constants(
    series: &MeasurementSeries,
    state: &StateIndex,
) -> Result<TimeConstants, Stage1Error> {
    let s = series.samples();
    assert!(s >= 3, "need at least three samples");
    let m = state.len();
    let mut tau_p = DVector::zeros(m);
    let mut tau_q = DVector::zeros(m);
    for (k, &r) in state.rows().iter().enumerate() {
        let (bus, phase) = series.labels[r];
        tau_p[k] = increment_slope(&series.delta, &series.p, r, series.dt)
            .and_then(positive_tau)
            .ok_or(Stage1Error::NonPositiveTau {
                bus,
                phase,
                beta: increment_slope(&series.delta, &series.p, r, series.dt).unwrap_or(f64::NAN),
            })?;
        tau_q[k] = increment_slope(&series.v, &series.q, r, series.dt)
            .and_then(positive_tau)
            .ok_or(Stage1Error::NonPositiveTau {
                bus,
                phase,
                beta: increment_slope(&series.v, &series.q, r, series.dt).unwrap_or(f64::NAN),
            })?;
    }
    Ok(TimeConstants { tau_p, tau_q })
}

fn positive_tau(beta: f64) -> Option<f64> {
    (beta > 0.0).then(|| 1.0 / beta)
}

/// WLS slope (W = I) of state increments against the mean-centered driving
/// channel; None when the regressor has no variance.
fn increment_slope(
    states: &DMatrix<f64>,
    drive: &DMatrix<f64>,
    row: usize,
    dt: f64,
) -> Option<f64> {
    let s = states.ncols();
    let mean = drive.row(row).sum() / s as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..s - 1 {
        let u = (states[(row, k + 1)] - states[(row, k)]) / dt;
        let l = mean - drive[(row, k)];
        num += l * u;
        den += l * l;
    }
    (den > 0.0).then(|| num / den)
}

/// The stage-1 intermediate products: the estimated state matrix, its
/// unscaled Jacobian blocks, the time constants and the state sample mean.
#[derive(Debug, Clone)]
pub struct EstimatedState {
    pub a_hat: DMatrix<f64>,
    pub j_p_delta: DMatrix<f64>,
    pub j_p_v: DMatrix<f64>,
    pub j_q_delta: DMatrix<f64>,
    pub j_q_v: DMatrix<f64>,
    pub tau: TimeConstants,
    pub mean_x: DVector<f64>,
}

impl EstimatedState {
    /// Unscale the state matrix with the estimated time constants: J = -T A,
    /// angle rows scaled by tau_p, magnitude rows by tau_q.
    pub fn from_state_matrix(
        a_hat: DMatrix<f64>,
        tau: TimeConstants,
        mean_x: DVector<f64>,
    ) -> EstimatedState {
        let m = tau.tau_p.len();
        assert_eq!(a_hat.nrows(), 2 * m);
        let mut j = a_hat.clone();
        for c in 0..2 * m {
            for k in 0..m {
                j[(k, c)] *= -tau.tau_p[k];
                j[(m + k, c)] *= -tau.tau_q[k];
            }
        }
        EstimatedState {
            j_p_delta: j.view((0, 0), (m, m)).into_owned(),
            j_p_v: j.view((0, m), (m, m)).into_owned(),
            j_q_delta: j.view((m, 0), (m, m)).into_owned(),
            j_q_v: j.view((m, m), (m, m)).into_owned(),
            a_hat,
            tau,
            mean_x,
        }
    }
}

/// How each branch's initial parameters were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchPath {
    /// Both endpoints are dynamic states: per-pair 4x2 WLS on the
    /// off-diagonal Jacobian entries.
    Direct,
    /// One endpoint is stateless (slack or static): recovered from the
    /// diagonal-block entries at the dynamic endpoint after subtracting the
    /// already-estimated branches.
    ResidualAnchored,
    /// Not observable from the state matrix (both endpoints stateless, or an
    /// ill-conditioned system); the initial estimate stays zero.
    Flagged,
}

/// Initial line parameter estimates in the shared parameter ordering.
#[derive(Debug, Clone)]
pub struct InitialParameters {
    pub theta: DVector<f64>,
    pub branch_path: Vec<BranchPath>,
}

/// Recover initial (G*, B*) per branch and active phase pair from the
/// estimated Jacobian blocks at the mean operating point.
#[allow(clippy::too_many_arguments)]
pub fn extract_initial_parameters(
    est: &EstimatedState,
    v_mean: &DVector<f64>,
    delta_mean: &DVector<f64>,
    net: &NetworkModel,
    adm_index: &crate::network::BusPhaseIndex,
    state: &StateIndex,
    params: &ParameterIndex,
    options: &Stage1Options,
) -> Result<InitialParameters, Stage1Error> {
    let npair = params.pair_count();
    let mut theta = DVector::zeros(2 * npair);
    let mut branch_path = vec![BranchPath::Flagged; net.branches.len()];

    let stateful = |bus: usize, phase: Phase| -> Option<usize> {
        adm_index.row(bus, phase).and_then(|r| state.position(r))
    };

    // Pass 1: branches whose endpoints are both dynamic.
    for (bi, br) in net.branches.iter().enumerate() {
        let from_ok = br.phases.iter().all(|p| stateful(br.from, p).is_some());
        let to_ok = br.phases.iter().all(|p| stateful(br.to, p).is_some());
        if !(from_ok && to_ok) {
            continue;
        }
        let mut ok = true;
        for n in br.phases.iter() {
            for p in br.phases.iter() {
                let a = stateful(br.from, n).unwrap();
                let b = stateful(br.to, p).unwrap();
                let u = [
                    est.j_p_delta[(a, b)],
                    est.j_p_v[(a, b)],
                    est.j_q_delta[(a, b)],
                    est.j_q_v[(a, b)],
                ];
                let ri = adm_index.row(br.from, n).unwrap();
                let rj = adm_index.row(br.to, p).unwrap();
                let vi = v_mean[ri];
                let vj = v_mean[rj];
                let (s, c) = (delta_mean[ri] - delta_mean[rj]).sin_cos();
                // coefficients of [G; B] in the four off-diagonal entries
                let l = DMatrix::from_row_slice(
                    4,
                    2,
                    &[
                        -vi * vj * s,
                        vi * vj * c,
                        -vi * c,
                        -vi * s,
                        vi * vj * c,
                        vi * vj * s,
                        -vi * s,
                        vi * c,
                    ],
                );
                match solve_wls(&l, &u, options.wls_weights.as_ref(), options.cond_bound) {
                    Some(beta) => {
                        let k = params.slot(bi, n, p).unwrap();
                        theta[k] = beta.0;
                        theta[npair + k] = beta.1;
                    }
                    None => {
                        ok = false;
                    }
                }
            }
        }
        branch_path[bi] = if ok {
            BranchPath::Direct
        } else {
            BranchPath::Flagged
        };
    }

    // Pass 2: branches with exactly one dynamic endpoint, anchored at it.
    // The diagonal-block Jacobian entries of the anchor bus are linear in the
    // remaining parameters; coefficients come from one-hot parameter probes.
    let mut anchors: Vec<usize> = Vec::new();
    for (bi, br) in net.branches.iter().enumerate() {
        if branch_path[bi] != BranchPath::Flagged {
            continue;
        }
        let from_ok = br.phases.iter().all(|p| stateful(br.from, p).is_some());
        let to_ok = br.phases.iter().all(|p| stateful(br.to, p).is_some());
        let anchor = match (from_ok, to_ok) {
            (true, false) => br.from,
            (false, true) => br.to,
            _ => continue,
        };
        if !anchors.contains(&anchor) {
            anchors.push(anchor);
        }
    }

    for anchor in anchors {
        // unknown slots: every pair of every still-flagged branch at this bus
        let mut slots: Vec<usize> = Vec::new();
        let mut branches_here: Vec<usize> = Vec::new();
        for (bi, br) in net.branches.iter().enumerate() {
            if branch_path[bi] != BranchPath::Flagged || (br.from != anchor && br.to != anchor) {
                continue;
            }
            branches_here.push(bi);
            for n in br.phases.iter() {
                for p in br.phases.iter() {
                    slots.push(params.slot(bi, n, p).unwrap());
                }
            }
        }
        if slots.is_empty() {
            continue;
        }

        // rows: the four diagonal-block entries over the anchor's state pairs
        let anchor_phases: Vec<Phase> = net
            .bus_by_id(anchor)
            .expect("validated bus")
            .phases
            .iter()
            .filter(|&p| stateful(anchor, p).is_some())
            .collect();
        let entry_rows: Vec<(usize, usize)> = anchor_phases
            .iter()
            .flat_map(|&n| {
                anchor_phases
                    .iter()
                    .map(move |&p| (stateful(anchor, n).unwrap(), stateful(anchor, p).unwrap()))
            })
            .collect();

        let observed = |blocks: &EstimatedState, (a, b): (usize, usize)| {
            [
                blocks.j_p_delta[(a, b)],
                blocks.j_p_v[(a, b)],
                blocks.j_q_delta[(a, b)],
                blocks.j_q_v[(a, b)],
            ]
        };
        let probe = |probe_theta: &DVector<f64>| -> Vec<[f64; 4]> {
            let blocks = params.blocks_from_theta(net, probe_theta);
            let adm = BusAdmittance::from_blocks(net, &blocks);
            let jac = state_jacobian(&adm, v_mean, delta_mean, state);
            entry_rows
                .iter()
                .map(|&(a, b)| {
                    [
                        jac.j_p_delta[(a, b)],
                        jac.j_p_v[(a, b)],
                        jac.j_q_delta[(a, b)],
                        jac.j_q_v[(a, b)],
                    ]
                })
                .collect()
        };

        // residual after subtracting the already-estimated branches
        let known = probe(&theta);
        let nrows = 4 * entry_rows.len();
        let mut rhs = DVector::zeros(nrows);
        for (r, &e) in entry_rows.iter().enumerate() {
            let obs = observed(est, e);
            for blk in 0..4 {
                rhs[4 * r + blk] = obs[blk] - known[r][blk];
            }
        }
        // one-hot coefficient columns (the entries are linear in theta)
        let ncols = 2 * slots.len();
        let mut lmat = DMatrix::zeros(nrows, ncols);
        for (c, &slot) in slots.iter().enumerate() {
            for (comp, col) in [(slot, 2 * c), (npair + slot, 2 * c + 1)] {
                let mut unit = DVector::zeros(2 * npair);
                unit[comp] = 1.0;
                let cols = probe(&unit);
                for (r, vals) in cols.iter().enumerate() {
                    for blk in 0..4 {
                        lmat[(4 * r + blk, col)] = vals[blk];
                    }
                }
            }
        }

        let solution = solve_least_squares(&lmat, &rhs, options.cond_bound);
        match solution {
            Some(sol) => {
                for (c, &slot) in slots.iter().enumerate() {
                    theta[slot] = sol[2 * c];
                    theta[npair + slot] = sol[2 * c + 1];
                }
                for bi in &branches_here {
                    branch_path[*bi] = BranchPath::ResidualAnchored;
                }
            }
            None => {
                for bi in &branches_here {
                    branch_path[*bi] = BranchPath::Flagged;
                }
            }
        }
    }

    Ok(InitialParameters { theta, branch_path })
}

/// Weighted least squares beta = (L^T W L)^{-1} L^T W U on the 4x2 per-pair
/// system; identity weights unless overridden. None when the normal
/// equations are ill-conditioned.
fn solve_wls(
    l: &DMatrix<f64>,
    u: &[f64; 4],
    weights: Option<&[f64; 4]>,
    cond_bound: f64,
) -> Option<(f64, f64)> {
    let lt_w = match weights {
        None => l.transpose(),
        Some(w) => {
            let mut lt = l.transpose();
            for (c, &wc) in w.iter().enumerate() {
                for r in 0..2 {
                    lt[(r, c)] *= wc;
                }
            }
            lt
        }
    };
    let lt_l = &lt_w * l;
    let det = lt_l[(0, 0)] * lt_l[(1, 1)] - lt_l[(0, 1)] * lt_l[(1, 0)];
    let trace = lt_l[(0, 0)] + lt_l[(1, 1)];
    if det.abs() <= (trace * trace) / cond_bound || det == 0.0 {
        return None;
    }
    let uvec = DVector::from_row_slice(u);
    let lt_u = lt_w * uvec;
    let g = (lt_l[(1, 1)] * lt_u[0] - lt_l[(0, 1)] * lt_u[1]) / det;
    let b = (lt_l[(0, 0)] * lt_u[1] - lt_l[(1, 0)] * lt_u[0]) / det;
    Some((g, b))
}

fn solve_least_squares(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    cond_bound: f64,
) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 0.0 || smax / smin > cond_bound {
        return None;
    }
    svd.solve(b, 0.0).ok()
}

/// Diagnostic dump of the stage-1 intermediates for offline inspection.
pub fn dump_diagnostics(
    est: &EstimatedState,
    cov: &CovariancePair,
    dir: &std::path::Path,
) -> Result<(), Stage1Error> {
    std::fs::create_dir_all(dir)?;
    write_matrix_csv(&dir.join("a_hat.csv"), &est.a_hat)?;
    write_matrix_csv(&dir.join("c0.csv"), &cov.c0)?;
    write_matrix_csv(&dir.join("c_lag.csv"), &cov.c_lag)?;
    let mut tau = String::from("row,tau_p,tau_q\n");
    for k in 0..est.tau.tau_p.len() {
        tau.push_str(&format!("{k},{},{}\n", est.tau.tau_p[k], est.tau.tau_q[k]));
    }
    std::fs::write(dir.join("tau.csv"), tau)?;
    Ok(())
}

fn write_matrix_csv(path: &std::path::Path, m: &DMatrix<f64>) -> Result<(), Stage1Error> {
    let mut text = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Convenience wrapper running the whole stage: covariances, state matrix,
/// time constants, and the initial parameter extraction.
pub fn run_stage1(
    net: &NetworkModel,
    adm: &BusAdmittance,
    dynamics: &LoadDynamics,
    series: &MeasurementSeries,
    lag: usize,
    params: &ParameterIndex,
    options: &Stage1Options,
) -> Result<(EstimatedState, InitialParameters), Stage1Error> {
    let state = dynamics.dynamic_state(adm);
    for &r in state.rows() {
        let (bus, phase) = adm.index.label(r);
        if series.labels.get(r) != Some(&(bus, phase)) {
            return Err(Stage1Error::MissingChannel { bus, phase });
        }
    }
    let states = state_matrix(series, &state);
    let cov = covariances(&states, lag, series.dt, options.normalization)?;
    let a_hat = estimate_state_matrix(&cov, options)?;
    let tau = estimate_time_constants(series, &state)?;
    let mean_x = sample_mean(&states);
    let est = EstimatedState::from_state_matrix(a_hat, tau, mean_x);
    let (v_mean, d_mean, _, _) = series.channel_means();
    let initial = extract_initial_parameters(
        &est, &v_mean, &d_mean, net, &adm.index, &state, params, options,
    )?;
    Ok((est, initial))
}
