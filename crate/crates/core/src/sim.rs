//! Synthetic micro-PMU series from the stochastic dynamic load model.
//!
//! Each dynamic load integrates
//!   d(delta)/dt = (P_set (1 + sigma_p xi_p) - P(V, delta)) / tau_p
//!   d(V)/dt     = (Q_set (1 + sigma_q xi_q) - Q(V, delta)) / tau_q
//! with independent standard Gaussian draws per bus-phase per step, the
//! injections re-evaluated from the full nonlinear map at every step, and the
//! slack bus-phases held fixed. Around the equilibrium this linearizes to the
//! Ornstein-Uhlenbeck form dx/dt = A x + B xi with A = -T^{-1} J (the minus
//! sign comes from the load equations: a positive injection surplus drives the
//! state back down), which is what stage 1 recovers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::network::{BusAdmittance, NetworkModel, Phase};
use crate::powerflow::{
    injections, solve_power_flow, state_jacobian, OperatingPoint, PowerFlowError, Setpoints,
    SolveOptions, StateIndex,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dynamics schema error: {0}")]
    Schema(String),
    #[error("bus {bus} phase {phase}: {problem}")]
    InvalidLoad {
        bus: usize,
        phase: Phase,
        problem: String,
    },
    #[error(
        "simulation diverged at sample {sample}: bus {bus} phase {phase} left the stable region"
    )]
    Divergence {
        sample: usize,
        bus: usize,
        phase: Phase,
    },
    #[error("measurement noise level {sigma:e} exceeds the {tve:e} total vector error bound")]
    NoiseExceedsTve { sigma: f64, tve: f64 },
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("metadata error: {0}")]
    Meta(#[from] serde_json::Error),
}

/// Load model of one bus-phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadParams {
    pub tau_p: f64,
    pub tau_q: f64,
    pub sigma_p: f64,
    pub sigma_q: f64,
    pub p_set: f64,
    pub q_set: f64,
    /// Constant-power load (the tau -> 0 limit): held at its setpoints
    /// algebraically and excluded from the dynamic state.
    #[serde(default, rename = "static")]
    pub is_static: bool,
}

/// Per bus-phase load dynamics, aligned with the feeder's bus-phase index.
#[derive(Debug, Clone)]
pub struct LoadDynamics {
    entries: Vec<Option<LoadParams>>,
    labels: Vec<(usize, Phase)>,
}

#[derive(Serialize, Deserialize)]
struct DynamicsDoc {
    loads: Vec<LoadDoc>,
}

#[derive(Serialize, Deserialize)]
struct LoadDoc {
    bus: usize,
    phase: char,
    #[serde(flatten)]
    params: LoadParams,
}

impl LoadDynamics {
    pub fn new(
        net: &NetworkModel,
        loads: &[(usize, Phase, LoadParams)],
    ) -> Result<LoadDynamics, SimError> {
        let adm_index = crate::network::BusPhaseIndex::new(net);
        let mut entries: Vec<Option<LoadParams>> = vec![None; adm_index.len()];
        let mut labels = Vec::with_capacity(adm_index.len());
        for r in 0..adm_index.len() {
            labels.push(adm_index.label(r));
        }
        for &(bus, phase, params) in loads {
            let row = adm_index.row(bus, phase).ok_or(SimError::InvalidLoad {
                bus,
                phase,
                problem: "no such energized bus-phase".into(),
            })?;
            if !params.is_static && (params.tau_p <= 0.0 || params.tau_q <= 0.0) {
                return Err(SimError::InvalidLoad {
                    bus,
                    phase,
                    problem: "time constants must be strictly positive for dynamic loads".into(),
                });
            }
            if params.sigma_p < 0.0 || params.sigma_q < 0.0 {
                return Err(SimError::InvalidLoad {
                    bus,
                    phase,
                    problem: "noise intensities must be nonnegative".into(),
                });
            }
            entries[row] = Some(params);
        }
        let slack = net.buses[net.slack_index()].id;
        for (r, label) in labels.iter().enumerate() {
            if label.0 != slack && entries[r].is_none() {
                return Err(SimError::InvalidLoad {
                    bus: label.0,
                    phase: label.1,
                    problem: "no load dynamics declared".into(),
                });
            }
            if label.0 == slack && entries[r].is_some() {
                return Err(SimError::InvalidLoad {
                    bus: label.0,
                    phase: label.1,
                    problem: "the slack bus carries no load dynamics".into(),
                });
            }
        }
        Ok(LoadDynamics { entries, labels })
    }

    pub fn load(net: &NetworkModel, path: &Path) -> Result<LoadDynamics, SimError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(net, &text)
    }

    pub fn from_str(net: &NetworkModel, text: &str) -> Result<LoadDynamics, SimError> {
        let doc: DynamicsDoc =
            serde_json::from_str(text).map_err(|e| SimError::Schema(e.to_string()))?;
        let loads = doc
            .loads
            .iter()
            .map(|l| {
                let phase = match l.phase {
                    'a' | 'A' => Phase::A,
                    'b' | 'B' => Phase::B,
                    'c' | 'C' => Phase::C,
                    other => {
                        return Err(SimError::Schema(format!("invalid phase letter {other:?}")))
                    }
                };
                Ok((l.bus, phase, l.params))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(net, &loads)
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        let doc = DynamicsDoc {
            loads: self
                .iter_loads()
                .map(|(bus, phase, params)| LoadDoc {
                    bus,
                    phase: phase.letter(),
                    params,
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }

    pub fn params_at(&self, row: usize) -> Option<&LoadParams> {
        self.entries[row].as_ref()
    }

    pub fn iter_loads(&self) -> impl Iterator<Item = (usize, Phase, LoadParams)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(r, e)| e.map(|p| (self.labels[r].0, self.labels[r].1, p)))
    }

    /// Setpoint vectors over all bus-phases (zeros on the slack).
    pub fn setpoints(&self) -> Setpoints {
        let n = self.entries.len();
        Setpoints {
            p: DVector::from_fn(n, |r, _| self.entries[r].map_or(0.0, |e| e.p_set)),
            q: DVector::from_fn(n, |r, _| self.entries[r].map_or(0.0, |e| e.q_set)),
        }
    }

    /// Rows of the dynamic (non-slack, non-static) bus-phases: the OU state.
    pub fn dynamic_state(&self, adm: &BusAdmittance) -> StateIndex {
        let rows = adm
            .index
            .non_slack_rows()
            .into_iter()
            .filter(|&r| matches!(self.entries[r], Some(p) if !p.is_static))
            .collect();
        StateIndex::new(rows)
    }

    /// Rows of static (constant-power) bus-phases.
    pub fn static_rows(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(r, e)| match e {
                Some(p) if p.is_static => Some(r),
                _ => None,
            })
            .collect()
    }
}

/// Solve the steady state at the declared setpoints.
pub fn solve_equilibrium(
    adm: &BusAdmittance,
    dynamics: &LoadDynamics,
) -> Result<OperatingPoint, SimError> {
    Ok(solve_power_flow(
        adm,
        &dynamics.setpoints(),
        &SolveOptions::default(),
    )?)
}

/// Uniformly sampled micro-PMU style series of V, delta, P, Q per bus-phase.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSeries {
    pub dt: f64,
    pub seed: u64,
    pub labels: Vec<(usize, Phase)>,
    /// One column per sample, one row per bus-phase.
    pub v: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl MeasurementSeries {
    pub fn samples(&self) -> usize {
        self.v.ncols()
    }

    pub fn bus_phases(&self) -> usize {
        self.v.nrows()
    }

    /// Reorder the bus-phase rows to match an admittance index (e.g. after
    /// reading a CSV written against a different bus ordering).
    pub fn aligned_to(
        &self,
        index: &crate::network::BusPhaseIndex,
    ) -> Result<MeasurementSeries, SimError> {
        if self.labels.len() != index.len() {
            return Err(SimError::Schema(format!(
                "series covers {} bus-phases, feeder has {}",
                self.labels.len(),
                index.len()
            )));
        }
        let mut perm = Vec::with_capacity(index.len());
        for r in 0..index.len() {
            let (bus, phase) = index.label(r);
            let src = self.labels.iter().position(|&l| l == (bus, phase)).ok_or(
                SimError::InvalidLoad {
                    bus,
                    phase,
                    problem: "bus-phase missing from the measurement series".into(),
                },
            )?;
            perm.push(src);
        }
        let reorder =
            |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(perm[r], c)]);
        Ok(MeasurementSeries {
            dt: self.dt,
            seed: self.seed,
            labels: (0..index.len()).map(|r| index.label(r)).collect(),
            v: reorder(&self.v),
            delta: reorder(&self.delta),
            p: reorder(&self.p),
            q: reorder(&self.q),
        })
    }

    /// Per bus-phase time averages of each channel.
    pub fn channel_means(&self) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
        let mean = |m: &DMatrix<f64>| {
            DVector::from_fn(m.nrows(), |r, _| m.row(r).sum() / m.ncols() as f64)
        };
        (
            mean(&self.v),
            mean(&self.delta),
            mean(&self.p),
            mean(&self.q),
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Integration sub-steps per recorded sample.
    pub substeps: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { substeps: 10 }
    }
}

/// Euler-Maruyama integration of the dynamic load model coupled to the
/// nonlinear injection map. Deterministic for a given seed.
pub fn simulate(
    adm: &BusAdmittance,
    dynamics: &LoadDynamics,
    initial: &OperatingPoint,
    dt: f64,
    samples: usize,
    seed: u64,
    options: &SimOptions,
) -> Result<MeasurementSeries, SimError> {
    assert!(dt > 0.0, "sample interval must be positive");
    assert!(samples >= 2, "need at least two samples");
    assert!(options.substeps >= 1);
    let n = adm.dim();
    let dynamic = dynamics.dynamic_state(adm);
    let static_rows = dynamics.static_rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let h = dt / options.substeps as f64;
    let sqrt_h = h.sqrt();
    let m = dynamic.len();
    let tau_p: Vec<f64> = dynamic
        .rows()
        .iter()
        .map(|&r| dynamics.params_at(r).unwrap().tau_p)
        .collect();
    let tau_q: Vec<f64> = dynamic
        .rows()
        .iter()
        .map(|&r| dynamics.params_at(r).unwrap().tau_q)
        .collect();
    let drive_p: Vec<f64> = dynamic
        .rows()
        .iter()
        .map(|&r| {
            let e = dynamics.params_at(r).unwrap();
            e.p_set * e.sigma_p
        })
        .collect();
    let drive_q: Vec<f64> = dynamic
        .rows()
        .iter()
        .map(|&r| {
            let e = dynamics.params_at(r).unwrap();
            e.q_set * e.sigma_q
        })
        .collect();
    let set_p: Vec<f64> = dynamic
        .rows()
        .iter()
        .map(|&r| dynamics.params_at(r).unwrap().p_set)
        .collect();
    let set_q: Vec<f64> = dynamic
        .rows()
        .iter()
        .map(|&r| dynamics.params_at(r).unwrap().q_set)
        .collect();

    let mut v = initial.v.clone();
    let mut delta = initial.delta.clone();
    let mut out_v = DMatrix::zeros(n, samples);
    let mut out_d = DMatrix::zeros(n, samples);
    let mut out_p = DMatrix::zeros(n, samples);
    let mut out_q = DMatrix::zeros(n, samples);

    for s in 0..samples {
        let (p, q) = injections(adm, &v, &delta)?;
        check_region(adm, &v, &delta, s)?;
        out_v.set_column(s, &v);
        out_d.set_column(s, &delta);
        out_p.set_column(s, &p);
        out_q.set_column(s, &q);
        if s + 1 == samples {
            break;
        }
        for _ in 0..options.substeps {
            let (p, q) = injections(adm, &v, &delta)?;
            for k in 0..m {
                let r = dynamic.rows()[k];
                let xi_p: f64 = rng.sample(StandardNormal);
                let xi_q: f64 = rng.sample(StandardNormal);
                delta[r] +=
                    h * (set_p[k] - p[r]) / tau_p[k] + sqrt_h * drive_p[k] * xi_p / tau_p[k];
                v[r] += h * (set_q[k] - q[r]) / tau_q[k] + sqrt_h * drive_q[k] * xi_q / tau_q[k];
            }
            if !static_rows.is_empty() {
                hold_static(adm, dynamics, &static_rows, &mut v, &mut delta)?;
            }
        }
    }

    Ok(MeasurementSeries {
        dt,
        seed,
        labels: (0..n).map(|r| adm.index.label(r)).collect(),
        v: out_v,
        delta: out_d,
        p: out_p,
        q: out_q,
    })
}

fn check_region(
    adm: &BusAdmittance,
    v: &DVector<f64>,
    delta: &DVector<f64>,
    sample: usize,
) -> Result<(), SimError> {
    use std::f64::consts::FRAC_PI_2;
    for r in 0..adm.dim() {
        let (bus, phase) = adm.index.label(r);
        let off_nominal = (delta[r] - phase.nominal_angle()).abs();
        if !v[r].is_finite()
            || !delta[r].is_finite()
            || off_nominal > FRAC_PI_2
            || v[r] < 0.5
            || v[r] > 1.5
        {
            return Err(SimError::Divergence { sample, bus, phase });
        }
    }
    Ok(())
}

/// Algebraic correction for constant-power (tau -> 0) loads: a few Newton
/// steps over the static bus-phases only, holding everything else.
fn hold_static(
    adm: &BusAdmittance,
    dynamics: &LoadDynamics,
    static_rows: &[usize],
    v: &mut DVector<f64>,
    delta: &mut DVector<f64>,
) -> Result<(), SimError> {
    let index = StateIndex::new(static_rows.to_vec());
    let m = index.len();
    for _ in 0..5 {
        let (p, q) = injections(adm, v, delta)?;
        let mut resid = DVector::zeros(2 * m);
        for (a, &r) in index.rows().iter().enumerate() {
            let e = dynamics.params_at(r).unwrap();
            resid[a] = e.p_set - p[r];
            resid[m + a] = e.q_set - q[r];
        }
        if resid.amax() < 1e-11 {
            return Ok(());
        }
        let jac = state_jacobian(adm, v, delta, &index).full();
        let step = match jac.lu().solve(&resid) {
            Some(s) => s,
            None => return Ok(()), // leave the state as integrated
        };
        for (a, &r) in index.rows().iter().enumerate() {
            delta[r] += step[a];
            v[r] += step[m + a];
        }
    }
    Ok(())
}

/// Additive measurement noise sized against a total vector error budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Std of the magnitude perturbation, pu.
    pub sigma_v: f64,
    /// Std of the angle perturbation, rad.
    pub sigma_delta: f64,
    /// Relative std of the power-channel perturbations (scaled by each
    /// channel's mean magnitude).
    pub sigma_pq_rel: f64,
    /// Total vector error budget the combined V/angle noise must respect.
    pub tve_bound: f64,
}

pub const DEFAULT_TVE_BOUND: f64 = 0.01;

impl NoiseSpec {
    /// A noise level sets all three stds; the combined 3-sigma vector error
    /// must stay inside the TVE budget.
    pub fn from_level(sigma: f64) -> Result<NoiseSpec, SimError> {
        Self::with_tve_budget(sigma, DEFAULT_TVE_BOUND)
    }

    pub fn with_tve_budget(sigma: f64, tve_bound: f64) -> Result<NoiseSpec, SimError> {
        let spec = NoiseSpec {
            sigma_v: sigma,
            sigma_delta: sigma,
            sigma_pq_rel: sigma,
            tve_bound,
        };
        if 3.0 * (spec.sigma_v.powi(2) + spec.sigma_delta.powi(2)).sqrt() > tve_bound {
            return Err(SimError::NoiseExceedsTve {
                sigma,
                tve: tve_bound,
            });
        }
        Ok(spec)
    }

    /// The largest level the budget admits: 3-sigma of the combined
    /// magnitude/angle error equals the bound.
    pub fn at_tve_bound(tve_bound: f64) -> NoiseSpec {
        let sigma = tve_bound / (3.0 * 2f64.sqrt());
        NoiseSpec {
            sigma_v: sigma,
            sigma_delta: sigma,
            sigma_pq_rel: sigma,
            tve_bound,
        }
    }

    pub fn zero() -> NoiseSpec {
        NoiseSpec {
            sigma_v: 0.0,
            sigma_delta: 0.0,
            sigma_pq_rel: 0.0,
            tve_bound: DEFAULT_TVE_BOUND,
        }
    }
}

/// Independent zero-mean Gaussian perturbations per sample: absolute on V and
/// delta, relative (to the channel mean magnitude) on P and Q. Deterministic
/// for a given seed.
pub fn add_measurement_noise(
    series: &MeasurementSeries,
    noise: &NoiseSpec,
    seed: u64,
) -> MeasurementSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = series.bus_phases();
    let s = series.samples();
    let mut out = series.clone();
    let (_, _, p_mean, q_mean) = series.channel_means();
    for col in 0..s {
        for row in 0..n {
            let dv: f64 = rng.sample(StandardNormal);
            let dd: f64 = rng.sample(StandardNormal);
            let dp: f64 = rng.sample(StandardNormal);
            let dq: f64 = rng.sample(StandardNormal);
            out.v[(row, col)] += noise.sigma_v * dv;
            out.delta[(row, col)] += noise.sigma_delta * dd;
            out.p[(row, col)] += noise.sigma_pq_rel * p_mean[row].abs() * dp;
            out.q[(row, col)] += noise.sigma_pq_rel * q_mean[row].abs() * dq;
        }
    }
    out
}

/// The linearized system matrices at the operating point: A = -T^{-1} J over
/// the dynamic states and the diagonal noise input matrix B.
pub fn true_state_matrix(
    adm: &BusAdmittance,
    dynamics: &LoadDynamics,
    op: &OperatingPoint,
) -> (DMatrix<f64>, DMatrix<f64>, StateIndex) {
    let dynamic = dynamics.dynamic_state(adm);
    let m = dynamic.len();
    let jac = state_jacobian(adm, &op.v, &op.delta, &dynamic);
    let mut a = jac.full();
    let mut b = DMatrix::zeros(2 * m, 2 * m);
    for (k, &r) in dynamic.rows().iter().enumerate() {
        let e = dynamics.params_at(r).unwrap();
        for c in 0..2 * m {
            a[(k, c)] *= -1.0 / e.tau_p;
            a[(m + k, c)] *= -1.0 / e.tau_q;
        }
        b[(k, k)] = e.p_set * e.sigma_p / e.tau_p;
        b[(m + k, m + k)] = e.q_set * e.sigma_q / e.tau_q;
    }
    (a, b, dynamic)
}

// ---------------------------------------------------------------------------
// Measurement CSV + sidecar metadata
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SeriesMeta {
    dt: f64,
    samples: usize,
    seed: u64,
}

pub fn meta_path(csv_path: &Path) -> std::path::PathBuf {
    let mut os = csv_path.as_os_str().to_owned();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}

/// Writes `t,bus,phase,V,delta,P,Q` rows (one per sample and bus-phase) plus
/// a `<path>.meta.json` sidecar with the sample interval and seed.
pub fn write_series_csv(series: &MeasurementSeries, path: &Path) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "bus", "phase", "V", "delta", "P", "Q"])?;
    for s in 0..series.samples() {
        let t = s as f64 * series.dt;
        for (r, &(bus, phase)) in series.labels.iter().enumerate() {
            w.write_record(&[
                format!("{t}"),
                format!("{bus}"),
                phase.to_string(),
                format!("{}", series.v[(r, s)]),
                format!("{}", series.delta[(r, s)]),
                format!("{}", series.p[(r, s)]),
                format!("{}", series.q[(r, s)]),
            ])?;
        }
    }
    w.flush()?;
    let meta = SeriesMeta {
        dt: series.dt,
        samples: series.samples(),
        seed: series.seed,
    };
    std::fs::write(meta_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_series_csv(path: &Path) -> Result<MeasurementSeries, SimError> {
    let meta: SeriesMeta = serde_json::from_str(&std::fs::read_to_string(meta_path(path))?)?;
    let mut reader = csv::Reader::from_path(path)?;
    let mut labels: Vec<(usize, Phase)> = Vec::new();
    let mut rows: Vec<(f64, usize, Phase, f64, f64, f64, f64)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| -> Result<&str, SimError> {
            record
                .get(i)
                .ok_or_else(|| SimError::Schema(format!("short measurement row: {record:?}")))
        };
        let parse = |s: &str| -> Result<f64, SimError> {
            s.parse()
                .map_err(|_| SimError::Schema(format!("invalid number {s:?}")))
        };
        let t = parse(field(0)?)?;
        let bus = field(1)?
            .parse::<usize>()
            .map_err(|_| SimError::Schema(format!("invalid bus id {:?}", &record[1])))?;
        let phase = match field(2)? {
            "a" => Phase::A,
            "b" => Phase::B,
            "c" => Phase::C,
            other => return Err(SimError::Schema(format!("invalid phase {other:?}"))),
        };
        rows.push((
            t,
            bus,
            phase,
            parse(field(3)?)?,
            parse(field(4)?)?,
            parse(field(5)?)?,
            parse(field(6)?)?,
        ));
    }
    for &(t, bus, phase, ..) in &rows {
        if t == 0.0 {
            labels.push((bus, phase));
        }
    }
    let n = labels.len();
    if n == 0 || !rows.len().is_multiple_of(n) {
        return Err(SimError::Schema(
            "measurement rows do not form complete samples".into(),
        ));
    }
    let s = rows.len() / n;
    if s != meta.samples {
        return Err(SimError::Schema(format!(
            "metadata declares {} samples, file holds {s}",
            meta.samples
        )));
    }
    let mut series = MeasurementSeries {
        dt: meta.dt,
        seed: meta.seed,
        labels,
        v: DMatrix::zeros(n, s),
        delta: DMatrix::zeros(n, s),
        p: DMatrix::zeros(n, s),
        q: DMatrix::zeros(n, s),
    };
    for (k, &(_, _, _, v, d, p, q)) in rows.iter().enumerate() {
        let col = k / n;
        let row = k % n;
        series.v[(row, col)] = v;
        series.delta[(row, col)] = d;
        series.p[(row, col)] = p;
        series.q[(row, col)] = q;
    }
    Ok(series)
}
