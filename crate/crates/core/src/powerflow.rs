//! Polar power injections on the assembled bus admittance, Newton-Raphson
//! operating points, and analytic Jacobians with respect to both the states
//! (V, delta) and the line parameters (G, B).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::network::{BusAdmittance, NetworkModel, ParameterIndex, Phase};

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("dimension mismatch: expected {expected} bus-phase entries, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("power flow did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
}

/// Subset of bus-phase rows treated as state variables (angle + magnitude
/// each). Power flow uses all non-slack rows; the load dynamics use the
/// dynamic rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct StateIndex {
    rows: Vec<usize>,
}

impl StateIndex {
    pub fn new(rows: Vec<usize>) -> StateIndex {
        StateIndex { rows }
    }

    pub fn non_slack(adm: &BusAdmittance) -> StateIndex {
        StateIndex {
            rows: adm.index.non_slack_rows(),
        }
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn position(&self, row: usize) -> Option<usize> {
        self.rows.iter().position(|&r| r == row)
    }
}

/// A steady state: per bus-phase voltage magnitude (pu), angle (rad), and the
/// injections evaluated from them.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub v: DVector<f64>,
    pub delta: DVector<f64>,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

impl OperatingPoint {
    pub fn from_states(
        adm: &BusAdmittance,
        v: DVector<f64>,
        delta: DVector<f64>,
    ) -> OperatingPoint {
        let (p, q) = injections(adm, &v, &delta).expect("dimensions fixed by construction");
        OperatingPoint { v, delta, p, q }
    }

}

/// Active and reactive injections per bus-phase:
/// P_i = V_i sum_j V_j (G_ij cos d_ij + B_ij sin d_ij), Q analogous with
/// sin / -cos, summed over the assembled bus admittance.
pub fn injections(
    adm: &BusAdmittance,
    v: &DVector<f64>,
    delta: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), PowerFlowError> {
    let n = adm.dim();
    if v.len() != n || delta.len() != n {
        return Err(PowerFlowError::DimensionMismatch {
            expected: n,
            got: v.len().min(delta.len()),
        });
    }
    let mut p = DVector::zeros(n);
    let mut q = DVector::zeros(n);
    for i in 0..n {
        let mut pi = 0.0;
        let mut qi = 0.0;
        for j in 0..n {
            let g = adm.g(i, j);
            let b = adm.b(i, j);
            if g == 0.0 && b == 0.0 {
                continue;
            }
            let dd = delta[i] - delta[j];
            let (s, c) = dd.sin_cos();
            pi += v[j] * (g * c + b * s);
            qi += v[j] * (g * s - b * c);
        }
        p[i] = v[i] * pi;
        q[i] = v[i] * qi;
    }
    Ok((p, q))
}

/// The four dense state-Jacobian blocks over a common row/column state set.
#[derive(Debug, Clone)]
pub struct StateJacobian {
    pub j_p_delta: DMatrix<f64>,
    pub j_p_v: DMatrix<f64>,
    pub j_q_delta: DMatrix<f64>,
    pub j_q_v: DMatrix<f64>,
}

impl StateJacobian {
    /// Stacked [J_Pd J_PV; J_Qd J_QV].
    pub fn full(&self) -> DMatrix<f64> {
        let m = self.j_p_delta.nrows();
        let mut out = DMatrix::zeros(2 * m, 2 * m);
        out.view_mut((0, 0), (m, m)).copy_from(&self.j_p_delta);
        out.view_mut((0, m), (m, m)).copy_from(&self.j_p_v);
        out.view_mut((m, 0), (m, m)).copy_from(&self.j_q_delta);
        out.view_mut((m, m), (m, m)).copy_from(&self.j_q_v);
        out
    }
}

/// Analytic Jacobian of the injections at the given state, restricted to the
/// rows and columns of `index`. Diagonal entries sum over every energized
/// bus-phase (slack included).
pub fn state_jacobian(
    adm: &BusAdmittance,
    v: &DVector<f64>,
    delta: &DVector<f64>,
    index: &StateIndex,
) -> StateJacobian {
    let m = index.len();
    let n = adm.dim();
    let mut jpd = DMatrix::zeros(m, m);
    let mut jpv = DMatrix::zeros(m, m);
    let mut jqd = DMatrix::zeros(m, m);
    let mut jqv = DMatrix::zeros(m, m);
    for (a, &i) in index.rows().iter().enumerate() {
        for (c, &j) in index.rows().iter().enumerate() {
            if i == j {
                let mut sp = 0.0;
                let mut sq = 0.0;
                let mut spv = 0.0;
                let mut sqv = 0.0;
                for k in 0..n {
                    if k == i {
                        continue;
                    }
                    let g = adm.g(i, k);
                    let b = adm.b(i, k);
                    if g == 0.0 && b == 0.0 {
                        continue;
                    }
                    let (s, cc) = (delta[i] - delta[k]).sin_cos();
                    sp += v[k] * (-g * s + b * cc);
                    sq += v[k] * (g * cc + b * s);
                    spv += v[k] * (g * cc + b * s);
                    sqv += v[k] * (g * s - b * cc);
                }
                jpd[(a, c)] = v[i] * sp;
                jqd[(a, c)] = v[i] * sq;
                jpv[(a, c)] = 2.0 * v[i] * adm.g(i, i) + spv;
                jqv[(a, c)] = -2.0 * v[i] * adm.b(i, i) + sqv;
            } else {
                let g = adm.g(i, j);
                let b = adm.b(i, j);
                let (s, cc) = (delta[i] - delta[j]).sin_cos();
                jpd[(a, c)] = v[i] * v[j] * (g * s - b * cc);
                jqd[(a, c)] = -v[i] * v[j] * (g * cc + b * s);
                jpv[(a, c)] = v[i] * (g * cc + b * s);
                jqv[(a, c)] = v[i] * (g * s - b * cc);
            }
        }
    }
    StateJacobian {
        j_p_delta: jpd,
        j_p_v: jpv,
        j_q_delta: jqd,
        j_q_v: jqv,
    }
}

/// Load setpoints over all bus-phases; slack entries are ignored by the
/// solver.
#[derive(Debug, Clone)]
pub struct Setpoints {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Infinity-norm residual target in pu.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Step halvings allowed when a full Newton step increases the residual.
    pub max_halvings: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tolerance: 1e-8,
            max_iterations: 50,
            max_halvings: 4,
        }
    }
}

/// Newton-Raphson power flow over the non-slack bus-phases. The slack bus is
/// held at V = 1 pu and its phase-native angles.
pub fn solve_power_flow(
    adm: &BusAdmittance,
    setpoints: &Setpoints,
    options: &SolveOptions,
) -> Result<OperatingPoint, PowerFlowError> {
    let n = adm.dim();
    if setpoints.p.len() != n || setpoints.q.len() != n {
        return Err(PowerFlowError::DimensionMismatch {
            expected: n,
            got: setpoints.p.len().min(setpoints.q.len()),
        });
    }
    let index = StateIndex::non_slack(adm);
    let m = index.len();
    let mut v = DVector::from_element(n, 1.0);
    let mut delta = DVector::from_fn(n, |r, _| adm.index.label(r).1.nominal_angle());

    let residual = |v: &DVector<f64>, d: &DVector<f64>| -> Result<DVector<f64>, PowerFlowError> {
        let (p, q) = injections(adm, v, d)?;
        let mut r = DVector::zeros(2 * m);
        for (a, &row) in index.rows().iter().enumerate() {
            r[a] = setpoints.p[row] - p[row];
            r[m + a] = setpoints.q[row] - q[row];
        }
        Ok(r)
    };

    let mut r = residual(&v, &delta)?;
    let mut r_norm = r.amax();
    for iteration in 0..options.max_iterations {
        if r_norm < options.tolerance {
            return Ok(OperatingPoint::from_states(adm, v, delta));
        }
        let jac = state_jacobian(adm, &v, &delta, &index).full();
        let step = jac.lu().solve(&r).ok_or(PowerFlowError::NonConvergence {
            iterations: iteration,
            residual: r_norm,
        })?;

        let mut scale = 1.0;
        let mut halvings = 0;
        loop {
            let mut v_new = v.clone();
            let mut d_new = delta.clone();
            for (a, &row) in index.rows().iter().enumerate() {
                d_new[row] += scale * step[a];
                v_new[row] += scale * step[m + a];
            }
            let r_new = residual(&v_new, &d_new)?;
            let n_new = r_new.amax();
            if n_new.is_finite() && (n_new < r_norm || halvings >= options.max_halvings) {
                v = v_new;
                delta = d_new;
                r = r_new;
                r_norm = n_new;
                break;
            }
            scale *= 0.5;
            halvings += 1;
        }
        if !r_norm.is_finite() {
            return Err(PowerFlowError::NonConvergence {
                iterations: iteration + 1,
                residual: r_norm,
            });
        }
    }
    if r_norm < options.tolerance {
        return Ok(OperatingPoint::from_states(adm, v, delta));
    }
    Err(PowerFlowError::NonConvergence {
        iterations: options.max_iterations,
        residual: r_norm,
    })
}

/// Sensitivities of the injections to the line parameters and to the state
/// angles. Rows cover every energized bus-phase (slack included); parameter
/// columns follow the shared [`ParameterIndex`] ordering; angle columns cover
/// the rows of the supplied state index.
#[derive(Debug, Clone)]
pub struct ParameterJacobian {
    pub dp_dg: DMatrix<f64>,
    pub dp_db: DMatrix<f64>,
    pub dq_dg: DMatrix<f64>,
    pub dq_db: DMatrix<f64>,
    pub dp_ddelta: DMatrix<f64>,
    pub dq_ddelta: DMatrix<f64>,
}

/// Sensitivity of the injections at every bus-phase to one branch parameter
/// pair (G_ij^{n,p}, B_ij^{n,p}). Returns (dP/dG, dQ/dG, dP/dB, dQ/dB)
/// columns; all zeros when no branch joins the two bus ids (u_ij = 0).
#[allow(clippy::too_many_arguments)]
pub fn injection_sensitivity(
    net: &NetworkModel,
    adm: &BusAdmittance,
    v: &DVector<f64>,
    delta: &DVector<f64>,
    from: usize,
    to: usize,
    n: Phase,
    p: Phase,
) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
    let nbp = adm.dim();
    let mut dp_dg = DVector::zeros(nbp);
    let mut dq_dg = DVector::zeros(nbp);
    let mut dp_db = DVector::zeros(nbp);
    let mut dq_db = DVector::zeros(nbp);
    if !net.connected(from, to) {
        return (dp_dg, dq_dg, dp_db, dq_db);
    }
    let idx = &adm.index;
    let (rn, rp) = match (idx.row(from, n), idx.row(to, p)) {
        (Some(a), Some(b)) => (a, b),
        _ => return (dp_dg, dq_dg, dp_db, dq_db),
    };
    // near-end rows (i, n) and (i, p); far-end rows via the transpose block
    let rfn = idx.row(from, p).expect("phase validated");
    let rtn = idx.row(to, n).expect("phase validated");

    // P_i^n picks up the parameter through Y_ii[n,p] (+) and Y_ij[n,p] (-):
    let (s_ii, c_ii) = (delta[rn] - delta[rfn]).sin_cos();
    let (s_ij, c_ij) = (delta[rn] - delta[rp]).sin_cos();
    dp_dg[rn] = v[rn] * v[rfn] * c_ii - v[rn] * v[rp] * c_ij;
    dp_db[rn] = v[rn] * v[rfn] * s_ii - v[rn] * v[rp] * s_ij;
    dq_dg[rn] = v[rn] * v[rfn] * s_ii - v[rn] * v[rp] * s_ij;
    dq_db[rn] = -(v[rn] * v[rfn] * c_ii - v[rn] * v[rp] * c_ij);

    // P_j^p picks it up through Y_jj[p,n] (transpose) and Y_ji[p,n]:
    let (s_jj, c_jj) = (delta[rp] - delta[rtn]).sin_cos();
    let (s_ji, c_ji) = (delta[rp] - delta[rn]).sin_cos();
    dp_dg[rp] += v[rp] * v[rtn] * c_jj - v[rp] * v[rn] * c_ji;
    dp_db[rp] += v[rp] * v[rtn] * s_jj - v[rp] * v[rn] * s_ji;
    dq_dg[rp] += v[rp] * v[rtn] * s_jj - v[rp] * v[rn] * s_ji;
    dq_db[rp] += -(v[rp] * v[rtn] * c_jj - v[rp] * v[rn] * c_ji);

    (dp_dg, dq_dg, dp_db, dq_db)
}

/// Assembles the full parameter Jacobian at the given state. `adm` must be
/// the admittance the candidate parameters describe so that the angle columns
/// are consistent with them.
pub fn parameter_jacobian(
    net: &NetworkModel,
    adm: &BusAdmittance,
    v: &DVector<f64>,
    delta: &DVector<f64>,
    params: &ParameterIndex,
    angles: &StateIndex,
) -> ParameterJacobian {
    let nbp = adm.dim();
    let npair = params.pair_count();
    let mut dp_dg = DMatrix::zeros(nbp, npair);
    let mut dp_db = DMatrix::zeros(nbp, npair);
    let mut dq_dg = DMatrix::zeros(nbp, npair);
    let mut dq_db = DMatrix::zeros(nbp, npair);
    for (k, (bi, n, p)) in params.iter() {
        let br = &net.branches[bi];
        let (pg, qg, pb, qb) = injection_sensitivity(net, adm, v, delta, br.from, br.to, n, p);
        dp_dg.set_column(k, &pg);
        dq_dg.set_column(k, &qg);
        dp_db.set_column(k, &pb);
        dq_db.set_column(k, &qb);
    }

    // angle columns: all bus-phase rows against the state angles
    let m = angles.len();
    let mut dp_dd = DMatrix::zeros(nbp, m);
    let mut dq_dd = DMatrix::zeros(nbp, m);
    for (c, &j) in angles.rows().iter().enumerate() {
        for i in 0..nbp {
            if i == j {
                let mut sp = 0.0;
                let mut sq = 0.0;
                for k in 0..nbp {
                    if k == i {
                        continue;
                    }
                    let g = adm.g(i, k);
                    let b = adm.b(i, k);
                    if g == 0.0 && b == 0.0 {
                        continue;
                    }
                    let (s, cc) = (delta[i] - delta[k]).sin_cos();
                    sp += v[k] * (-g * s + b * cc);
                    sq += v[k] * (g * cc + b * s);
                }
                dp_dd[(i, c)] = v[i] * sp;
                dq_dd[(i, c)] = v[i] * sq;
            } else {
                let g = adm.g(i, j);
                let b = adm.b(i, j);
                if g == 0.0 && b == 0.0 {
                    continue;
                }
                let (s, cc) = (delta[i] - delta[j]).sin_cos();
                dp_dd[(i, c)] = v[i] * v[j] * (g * s - b * cc);
                dq_dd[(i, c)] = -v[i] * v[j] * (g * cc + b * s);
            }
        }
    }

    ParameterJacobian {
        dp_dg,
        dp_db,
        dq_dg,
        dq_db,
        dp_ddelta: dp_dd,
        dq_ddelta: dq_dd,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{
        assemble_bus_admittance, BaseSpec, BranchImpedance, Bus, NetworkModel, PhaseSet,
        DEFAULT_COND_BOUND,
    };
    use approx::assert_relative_eq;
    use nalgebra::Complex;
    use nalgebra::Matrix3;

    fn two_bus(g: f64, b: f64) -> (NetworkModel, BusAdmittance) {
        let y = Complex::new(g, b);
        let mut z = Matrix3::zeros();
        z[(0, 0)] = y.inv();
        let net = NetworkModel::new(
            BaseSpec {
                s_base_kva: 1000.0,
                v_base_kv: 4.16,
            },
            vec![
                Bus {
                    id: 0,
                    phases: PhaseSet::new(&[Phase::A]),
                    is_slack: true,
                },
                Bus {
                    id: 1,
                    phases: PhaseSet::new(&[Phase::A]),
                    is_slack: false,
                },
            ],
            vec![BranchImpedance {
                from: 0,
                to: 1,
                phases: PhaseSet::new(&[Phase::A]),
                z,
            }],
        )
        .unwrap();
        let adm = assemble_bus_admittance(&net, DEFAULT_COND_BOUND).unwrap();
        (net, adm)
    }

    #[test]
    fn two_bus_no_angle_difference_transfers_nothing() {
        let (_, adm) = two_bus(1.0, 0.0);
        let v = DVector::from_element(2, 1.0);
        let d = DVector::zeros(2);
        let (p, q) = injections(&adm, &v, &d).unwrap();
        assert_relative_eq!(p[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(p[1], 0.0, epsilon = 1e-14);
        assert_relative_eq!(q[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (_, adm) = two_bus(1.0, 0.0);
        let v = DVector::from_element(3, 1.0);
        let d = DVector::zeros(2);
        assert!(matches!(
            injections(&adm, &v, &d),
            Err(PowerFlowError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_setpoints_give_flat_solution() {
        let net = crate::bundled::four_bus();
        let adm = assemble_bus_admittance(&net, DEFAULT_COND_BOUND).unwrap();
        let n = adm.dim();
        let sp = Setpoints {
            p: DVector::zeros(n),
            q: DVector::zeros(n),
        };
        let op = solve_power_flow(&adm, &sp, &SolveOptions::default()).unwrap();
        for r in 0..n {
            assert_relative_eq!(op.v[r], 1.0, epsilon = 1e-9);
            let nominal = adm.index.label(r).1.nominal_angle();
            assert_relative_eq!(op.delta[r], nominal, epsilon = 1e-9);
        }
    }

    #[test]
    fn infeasible_setpoint_reports_nonconvergence() {
        let (_, adm) = two_bus(1.0, -2.0);
        let mut p = DVector::zeros(2);
        let mut q = DVector::zeros(2);
        p[1] = -50.0; // far beyond the line's transfer capability
        q[1] = -50.0;
        assert!(matches!(
            solve_power_flow(&adm, &Setpoints { p, q }, &SolveOptions::default()),
            Err(PowerFlowError::NonConvergence { .. })
        ));
    }

    #[test]
    fn single_branch_angle_sensitivity_at_zero_difference() {
        // with branch susceptance B and d_ij = 0, the derivative of P_i with
        // respect to the angle difference is -V_i V_j B; the per-state column
        // dP_i/d delta_j is its negative.
        let branch_b = -4.0;
        let (_, adm) = two_bus(0.0, branch_b);
        let v = DVector::from_element(2, 1.0);
        let d = DVector::zeros(2);
        let full_idx = StateIndex::new(vec![0, 1]);
        let full = state_jacobian(&adm, &v, &d, &full_idx);
        let wrt_difference = -full.j_p_delta[(0, 1)];
        assert_relative_eq!(wrt_difference, -branch_b, max_relative = 1e-12);
        // the diagonal balances the off-diagonal column
        assert_relative_eq!(
            full.j_p_delta[(1, 1)],
            -full.j_p_delta[(1, 0)],
            max_relative = 1e-12
        );
    }

    #[test]
    fn slack_state_unchanged_by_solve() {
        let net = crate::bundled::four_bus();
        let adm = assemble_bus_admittance(&net, DEFAULT_COND_BOUND).unwrap();
        let n = adm.dim();
        let mut p = DVector::zeros(n);
        let mut q = DVector::zeros(n);
        for r in adm.index.non_slack_rows() {
            p[r] = -0.02;
            q[r] = -0.01;
        }
        let op = solve_power_flow(&adm, &Setpoints { p, q }, &SolveOptions::default()).unwrap();
        for &r in adm.index.slack_rows() {
            assert_eq!(op.v[r], 1.0);
            assert_eq!(op.delta[r], adm.index.label(r).1.nominal_angle());
        }
    }

    #[test]
    fn disconnected_pair_has_zero_sensitivity() {
        let net = crate::bundled::four_bus();
        let adm = assemble_bus_admittance(&net, DEFAULT_COND_BOUND).unwrap();
        let v = DVector::from_element(adm.dim(), 1.0);
        let d = DVector::zeros(adm.dim());
        // buses 0 and 3 share no branch
        let (pg, qg, pb, qb) = injection_sensitivity(&net, &adm, &v, &d, 0, 3, Phase::A, Phase::A);
        assert_eq!(pg.amax(), 0.0);
        assert_eq!(qg.amax(), 0.0);
        assert_eq!(pb.amax(), 0.0);
        assert_eq!(qb.amax(), 0.0);
    }

    #[test]
    fn parameter_sensitivity_vanishes_at_flat_equal_voltage() {
        // V_i = V_j = 1 and equal angles: dP/dG = 1 - cos(0) = 0, dP/dB = -sin(0) = 0
        let (net, adm) = two_bus(1.5, -3.0);
        let v = DVector::from_element(2, 1.0);
        let d = DVector::zeros(2);
        let (pg, _, pb, _) = injection_sensitivity(&net, &adm, &v, &d, 0, 1, Phase::A, Phase::A);
        assert_relative_eq!(pg[1], 0.0, epsilon = 1e-14);
        assert_relative_eq!(pb[1], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn parameter_jacobian_symmetry_relations() {
        // exact relations from the injection equations:
        // dQ/dB = -dP/dG and dQ/dG = dP/dB, entrywise
        let net = crate::bundled::four_bus();
        let adm = assemble_bus_admittance(&net, DEFAULT_COND_BOUND).unwrap();
        let params = ParameterIndex::new(&net);
        let n = adm.dim();
        let v = DVector::from_fn(n, |r, _| 1.0 + 0.01 * (r as f64 * 0.7).sin());
        let d = DVector::from_fn(n, |r, _| {
            adm.index.label(r).1.nominal_angle() + 0.02 * (r as f64 * 1.3).cos()
        });
        let angles = StateIndex::non_slack(&adm);
        let jac = parameter_jacobian(&net, &adm, &v, &d, &params, &angles);
        assert!((&jac.dq_db + &jac.dp_dg).amax() < 1e-12);
        assert!((&jac.dq_dg - &jac.dp_db).amax() < 1e-12);
    }
}
