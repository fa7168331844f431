//! Stage 2: Broyden quasi-Newton refinement of the stage-1 parameter
//! estimates on the power-mismatch equations.
//!
//! The residual is the measured-minus-modeled injection stack; the initial
//! inverse-Jacobian approximation is the Moore-Penrose pseudo-inverse of the
//! analytic parameter Jacobian, and subsequent iterations apply the good
//! Broyden rank-one update.

use nalgebra::{DMatrix, DVector};
use std::path::Path;
use thiserror::Error;

use crate::linalg::pseudo_inverse;
use crate::network::{BranchAdmittance, BusAdmittance, NetworkModel, ParameterIndex};
use crate::powerflow::{injections, parameter_jacobian, PowerFlowError, StateIndex};
use crate::sim::{LoadDynamics, MeasurementSeries};
use crate::stage1::{self, BranchPath, InitialParameters, Stage1Error, Stage1Options};

#[derive(Debug, Error)]
pub enum Stage2Error {
    #[error(transparent)]
    Stage1(#[from] Stage1Error),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error("parameter vector has {got} entries, expected {expected}")]
    BadParameterLength { expected: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// How measurements enter the mismatch system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Time-averaged V, delta, P, Q with joint angle corrections. The system
    /// is a single snapshot and may be rank-deficient on small feeders; the
    /// pseudo-inverse then takes the minimum-norm step.
    TimeAveraged,
    /// The given number of evenly spaced snapshots stacked as extra rows,
    /// angles taken as measured. Over-determines the parameters.
    Snapshots(usize),
}

impl Default for Aggregation {
    fn default() -> Self {
        Aggregation::Snapshots(8)
    }
}

/// One measured operating snapshot: voltages, angles and injections.
type Snapshot = (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>);

/// The refinement problem: measured injections against candidate parameters.
#[derive(Debug, Clone)]
pub struct RefinementProblem {
    snapshots: Vec<Snapshot>,
    adjust_angles: bool,
    angle_index: StateIndex,
}

impl RefinementProblem {
    pub fn new(
        adm_index_len: usize,
        series: &MeasurementSeries,
        angle_index: StateIndex,
        aggregation: Aggregation,
    ) -> RefinementProblem {
        assert_eq!(series.bus_phases(), adm_index_len);
        match aggregation {
            Aggregation::TimeAveraged => {
                let (v, d, p, q) = series.channel_means();
                RefinementProblem {
                    snapshots: vec![(v, d, p, q)],
                    adjust_angles: true,
                    angle_index,
                }
            }
            Aggregation::Snapshots(k) => {
                let k = k.max(1).min(series.samples());
                let stride = (series.samples() / k).max(1);
                let snapshots = (0..k)
                    .map(|i| {
                        let s = (i * stride).min(series.samples() - 1);
                        (
                            series.v.column(s).into_owned(),
                            series.delta.column(s).into_owned(),
                            series.p.column(s).into_owned(),
                            series.q.column(s).into_owned(),
                        )
                    })
                    .collect();
                RefinementProblem {
                    snapshots,
                    adjust_angles: false,
                    angle_index,
                }
            }
        }
    }

    /// Rows of the stacked mismatch vector.
    pub fn rows(&self) -> usize {
        self.snapshots.iter().map(|(v, ..)| 2 * v.len()).sum()
    }

    fn angle_unknowns(&self) -> usize {
        if self.adjust_angles {
            self.angle_index.len()
        } else {
            0
        }
    }
}

/// Measured-minus-modeled [P; Q] stack at the candidate parameters. For the
/// angle-adjusting mode, `angle_shift` perturbs the snapshot angles at the
/// state rows.
pub fn mismatch(
    net: &NetworkModel,
    params: &ParameterIndex,
    problem: &RefinementProblem,
    theta: &DVector<f64>,
    angle_shift: Option<&DVector<f64>>,
) -> Result<DVector<f64>, Stage2Error> {
    if theta.len() != 2 * params.pair_count() {
        return Err(Stage2Error::BadParameterLength {
            expected: 2 * params.pair_count(),
            got: theta.len(),
        });
    }
    let blocks = params.blocks_from_theta(net, theta);
    let adm = BusAdmittance::from_blocks(net, &blocks);
    let mut out = DVector::zeros(problem.rows());
    let mut at = 0;
    for (v, d, p_meas, q_meas) in &problem.snapshots {
        let mut d_used = d.clone();
        if let Some(shift) = angle_shift {
            for (k, &r) in problem.angle_index.rows().iter().enumerate() {
                d_used[r] += shift[k];
            }
        }
        let (p, q) = injections(&adm, v, &d_used)?;
        let n = v.len();
        for r in 0..n {
            out[at + r] = p_meas[r] - p[r];
            out[at + n + r] = q_meas[r] - q[r];
        }
        at += 2 * n;
    }
    Ok(out)
}

fn stacked_jacobian(
    net: &NetworkModel,
    params: &ParameterIndex,
    problem: &RefinementProblem,
    theta: &DVector<f64>,
    angle_shift: Option<&DVector<f64>>,
) -> DMatrix<f64> {
    let npair = params.pair_count();
    let blocks = params.blocks_from_theta(net, theta);
    let adm = BusAdmittance::from_blocks(net, &blocks);
    let ncols = 2 * npair + problem.angle_unknowns();
    let mut jac = DMatrix::zeros(problem.rows(), ncols);
    let mut at = 0;
    for (v, d, _, _) in &problem.snapshots {
        let mut d_used = d.clone();
        if let Some(shift) = angle_shift {
            for (k, &r) in problem.angle_index.rows().iter().enumerate() {
                d_used[r] += shift[k];
            }
        }
        let pj = parameter_jacobian(net, &adm, v, &d_used, params, &problem.angle_index);
        let n = v.len();
        jac.view_mut((at, 0), (n, npair)).copy_from(&pj.dp_dg);
        jac.view_mut((at, npair), (n, npair)).copy_from(&pj.dp_db);
        jac.view_mut((at + n, 0), (n, npair)).copy_from(&pj.dq_dg);
        jac.view_mut((at + n, npair), (n, npair))
            .copy_from(&pj.dq_db);
        if problem.adjust_angles {
            let m = problem.angle_index.len();
            jac.view_mut((at, 2 * npair), (n, m))
                .copy_from(&pj.dp_ddelta);
            jac.view_mut((at + n, 2 * npair), (n, m))
                .copy_from(&pj.dq_ddelta);
        }
        at += 2 * n;
    }
    jac
}

#[derive(Debug, Clone, Copy)]
pub struct BroydenOptions {
    /// Infinity-norm mismatch target, pu.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Per-iteration cap on the parameter step, as a fraction of the current
    /// parameter norm.
    pub step_cap_fraction: f64,
    /// Recompute the analytic Jacobian every r iterations; None keeps strict
    /// Broyden updates after the first linearization.
    pub relinearize_every: Option<usize>,
    /// Relative singular-value cutoff of the pseudo-inverse.
    pub pinv_eps: f64,
    /// Consecutive mismatch-norm increases tolerated before declaring
    /// divergence.
    pub diverge_patience: usize,
}

impl Default for BroydenOptions {
    fn default() -> Self {
        BroydenOptions {
            tolerance: 1e-8,
            max_iterations: 50,
            step_cap_fraction: 0.1,
            relinearize_every: None,
            pinv_eps: 1e-12,
            diverge_patience: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefinementOutcome {
    Converged,
    MaxIterationsExceeded,
    DivergingIterates,
}

/// Refined parameters plus the iteration trace. `converged` is true iff the
/// final mismatch norm met the tolerance; otherwise the best iterate seen is
/// returned.
#[derive(Debug, Clone)]
pub struct RefinementResult {
    pub theta: DVector<f64>,
    pub iterations: usize,
    pub final_norm: f64,
    pub converged: bool,
    pub outcome: RefinementOutcome,
    /// Infinity-norm mismatch after each iteration, starting at the seed.
    pub residual_history: Vec<f64>,
}

/// Good-Broyden iteration on the mismatch system, seeded with the analytic
/// parameter Jacobian's pseudo-inverse.
pub fn broyden_refine(
    net: &NetworkModel,
    params: &ParameterIndex,
    problem: &RefinementProblem,
    theta0: &DVector<f64>,
    options: &BroydenOptions,
) -> Result<RefinementResult, Stage2Error> {
    let npair = params.pair_count();
    if theta0.len() != 2 * npair {
        return Err(Stage2Error::BadParameterLength {
            expected: 2 * npair,
            got: theta0.len(),
        });
    }
    let n_angle = problem.angle_unknowns();
    let mut theta = theta0.clone();
    let mut shift = DVector::zeros(n_angle);
    let shift_arg = |s: &DVector<f64>| if n_angle > 0 { Some(s.clone()) } else { None };

    let mut f = mismatch(net, params, problem, &theta, shift_arg(&shift).as_ref())?;
    let mut norm = f.amax();
    let mut history = vec![norm];
    let mut best = (theta.clone(), norm);

    let jac = stacked_jacobian(net, params, problem, &theta, shift_arg(&shift).as_ref());
    let mut h = pseudo_inverse(&jac, options.pinv_eps);

    let mut growth_streak = 0usize;
    let mut iterations = 0usize;
    while norm > options.tolerance && iterations < options.max_iterations {
        if let Some(every) = options.relinearize_every {
            if iterations > 0 && iterations.is_multiple_of(every) {
                let jac =
                    stacked_jacobian(net, params, problem, &theta, shift_arg(&shift).as_ref());
                h = pseudo_inverse(&jac, options.pinv_eps);
            }
        }
        let mut step = &h * &f;
        let theta_step_norm = step.rows(0, 2 * npair).norm();
        let cap = options.step_cap_fraction * theta.norm().max(1e-9);
        if theta_step_norm > cap {
            step *= cap / theta_step_norm;
        }
        let theta_new = &theta + step.rows(0, 2 * npair);
        let shift_new = if n_angle > 0 {
            &shift + step.rows(2 * npair, n_angle)
        } else {
            shift.clone()
        };
        let f_new = mismatch(
            net,
            params,
            problem,
            &theta_new,
            shift_arg(&shift_new).as_ref(),
        )?;
        let norm_new = f_new.amax();

        // good Broyden update of the inverse approximation: the secant pairs
        // the step with the drop in the mismatch
        let y = &f - &f_new;
        let hy = &h * &y;
        let denom = step.dot(&hy);
        if denom.abs() > 1e-300 {
            let correction = (&step - &hy) * (step.transpose() * &h) / denom;
            h += correction;
        }

        theta = theta_new;
        shift = shift_new;
        f = f_new;
        iterations += 1;
        if norm_new >= norm {
            growth_streak += 1;
        } else {
            growth_streak = 0;
        }
        norm = norm_new;
        history.push(norm);
        if norm < best.1 {
            best = (theta.clone(), norm);
        }
        if growth_streak >= options.diverge_patience {
            return Ok(RefinementResult {
                theta: best.0,
                iterations,
                final_norm: best.1,
                converged: false,
                outcome: RefinementOutcome::DivergingIterates,
                residual_history: history,
            });
        }
    }

    let converged = norm <= options.tolerance;
    if !converged {
        log::debug!("refinement stopped at {iterations} iterations with mismatch {norm:.3e}");
    }
    let (theta, final_norm) = if converged { (theta, norm) } else { best };
    Ok(RefinementResult {
        theta,
        iterations,
        final_norm,
        converged,
        outcome: if converged {
            RefinementOutcome::Converged
        } else {
            RefinementOutcome::MaxIterationsExceeded
        },
        residual_history: history,
    })
}

/// Options for the end-to-end pipeline.
#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    pub lag: usize,
    pub stage1: Stage1Options,
    pub aggregation: Aggregation,
    pub broyden: BroydenOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            lag: 1,
            stage1: Stage1Options::default(),
            aggregation: Aggregation::default(),
            broyden: BroydenOptions::default(),
        }
    }
}

/// Everything the two stages produce for one measurement series.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub initial: InitialParameters,
    pub refined: RefinementResult,
    pub params: ParameterIndex,
}

impl PipelineOutput {
    pub fn initial_theta(&self) -> &DVector<f64> {
        &self.initial.theta
    }

    pub fn refined_theta(&self) -> &DVector<f64> {
        &self.refined.theta
    }

    pub fn branch_path(&self) -> &[BranchPath] {
        &self.initial.branch_path
    }
}

/// The end-to-end two-stage pipeline: covariance regression for the initial
/// estimates, then Broyden refinement on the mismatch equations.
pub fn run_pipeline(
    net: &NetworkModel,
    adm: &BusAdmittance,
    dynamics: &LoadDynamics,
    series: &MeasurementSeries,
    options: &PipelineOptions,
) -> Result<PipelineOutput, Stage2Error> {
    let params = ParameterIndex::new(net);
    let series = series
        .aligned_to(&adm.index)
        .map_err(|e| Stage1Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
    let (_, initial) = stage1::run_stage1(
        net,
        adm,
        dynamics,
        &series,
        options.lag,
        &params,
        &options.stage1,
    )?;
    let problem = RefinementProblem::new(
        adm.index.len(),
        &series,
        StateIndex::non_slack(adm),
        options.aggregation,
    );
    let refined = broyden_refine(net, &params, &problem, &initial.theta, &options.broyden)?;
    Ok(PipelineOutput {
        initial,
        refined,
        params,
    })
}

/// Write the estimate document: one row per branch and active phase pair,
/// with true values included when the generating admittances are known.
pub fn write_estimates(
    path: &Path,
    net: &NetworkModel,
    output: &PipelineOutput,
    truth: Option<&[BranchAdmittance]>,
) -> Result<(), Stage2Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "from",
        "to",
        "n",
        "p",
        "G_true",
        "G_init",
        "G_refined",
        "B_true",
        "B_init",
        "B_refined",
    ])?;
    let npair = output.params.pair_count();
    for (k, (bi, n, p)) in output.params.iter() {
        let br = &net.branches[bi];
        let (g_true, b_true) = match truth {
            Some(t) => (
                format!("{}", t[bi].g[(n.index(), p.index())]),
                format!("{}", t[bi].b[(n.index(), p.index())]),
            ),
            None => (String::new(), String::new()),
        };
        w.write_record(&[
            format!("{}", br.from),
            format!("{}", br.to),
            n.to_string(),
            p.to_string(),
            g_true,
            format!("{}", output.initial.theta[k]),
            format!("{}", output.refined.theta[k]),
            b_true,
            format!("{}", output.initial.theta[npair + k]),
            format!("{}", output.refined.theta[npair + k]),
        ])?;
    }
    w.flush()?;
    Ok(())
}
