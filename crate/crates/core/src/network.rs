//! Multiphase feeder model: buses with partial phase sets, branches with 3x3
//! complex impedance blocks, bus admittance assembly, and feeder file I/O.
//!
//! Branches may span one to three phases; rows and columns of missing phases
//! are structurally zero and only the active submatrix is ever inverted.

use nalgebra::{Complex, DMatrix, Matrix3};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;
use thiserror::Error;

use crate::linalg;

pub type C64 = Complex<f64>;

/// Condition-number bound above which an active impedance submatrix is
/// treated as singular.
pub const DEFAULT_COND_BOUND: f64 = 1e12;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("branch ({from},{to}): active impedance submatrix is singular (cond {cond:.3e} > {bound:.3e})")]
    SingularImpedance {
        from: usize,
        to: usize,
        cond: f64,
        bound: f64,
    },
    #[error("feeder schema error: {0}")]
    Schema(String),
    #[error("branch ({from},{to}) uses phase {phase} absent at bus {bus}")]
    PhaseConsistency {
        from: usize,
        to: usize,
        bus: usize,
        phase: Phase,
    },
    #[error("feeder graph is not connected (bus {0} unreachable from the slack)")]
    Disconnected(usize),
    #[error("feeder must declare exactly one slack bus, found {0}")]
    SlackCount(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for NetworkError {
    fn from(e: serde_json::Error) -> Self {
        NetworkError::Schema(format!(
            "invalid feeder document at line {}, column {}: {e}",
            e.line(),
            e.column()
        ))
    }
}

/// One of the three phase conductors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn from_index(i: usize) -> Phase {
        Self::ALL[i]
    }

    /// Nominal angle of the phase conductor in a balanced system (radians).
    pub fn nominal_angle(self) -> f64 {
        use std::f64::consts::PI;
        match self {
            Phase::A => 0.0,
            Phase::B => -2.0 * PI / 3.0,
            Phase::C => 2.0 * PI / 3.0,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Phase::A => 'a',
            Phase::B => 'b',
            Phase::C => 'c',
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Nonempty subset of {a, b, c}, stored as a bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub fn new(phases: &[Phase]) -> PhaseSet {
        let mut mask = 0u8;
        for p in phases {
            mask |= 1 << p.index();
        }
        assert!(mask != 0, "phase set must be nonempty");
        PhaseSet(mask)
    }

    pub fn parse(s: &str) -> Result<PhaseSet, NetworkError> {
        let mut mask = 0u8;
        for c in s.chars() {
            let p = match c {
                'a' | 'A' => Phase::A,
                'b' | 'B' => Phase::B,
                'c' | 'C' => Phase::C,
                _ => {
                    return Err(NetworkError::Schema(format!(
                        "invalid phase letter {c:?} in {s:?}"
                    )))
                }
            };
            mask |= 1 << p.index();
        }
        if mask == 0 {
            return Err(NetworkError::Schema("empty phase set".into()));
        }
        Ok(PhaseSet(mask))
    }

    pub fn contains(self, p: Phase) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn is_subset_of(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub phases: PhaseSet,
    pub is_slack: bool,
}

/// Series impedance block of one branch, in per-unit. Rows/columns of phases
/// outside `phases` are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchImpedance {
    pub from: usize,
    pub to: usize,
    pub phases: PhaseSet,
    pub z: Matrix3<C64>,
}

/// Per-branch admittance split into conductance and susceptance, per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchAdmittance {
    pub from: usize,
    pub to: usize,
    pub phases: PhaseSet,
    pub g: Matrix3<f64>,
    pub b: Matrix3<f64>,
}

impl BranchAdmittance {
    pub fn as_complex(&self) -> Matrix3<C64> {
        Matrix3::from_fn(|i, j| C64::new(self.g[(i, j)], self.b[(i, j)]))
    }
}

/// Per-unit base of a feeder document.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseSpec {
    pub s_base_kva: f64,
    pub v_base_kv: f64,
}

impl BaseSpec {
    /// Base impedance in ohms.
    pub fn z_base_ohm(&self) -> f64 {
        1000.0 * self.v_base_kv * self.v_base_kv / self.s_base_kva
    }
}

/// A multiphase feeder: buses, one slack, and series-impedance branches.
/// Immutable after construction; connectivity indicators are implied by the
/// branch list.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub base: BaseSpec,
    pub buses: Vec<Bus>,
    pub branches: Vec<BranchImpedance>,
    slack: usize,
    id_to_index: HashMap<usize, usize>,
}

impl NetworkModel {
    pub fn new(
        base: BaseSpec,
        buses: Vec<Bus>,
        branches: Vec<BranchImpedance>,
    ) -> Result<NetworkModel, NetworkError> {
        let mut id_to_index = HashMap::new();
        for (k, bus) in buses.iter().enumerate() {
            if id_to_index.insert(bus.id, k).is_some() {
                return Err(NetworkError::Schema(format!("duplicate bus id {}", bus.id)));
            }
        }
        let slacks: Vec<usize> = buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_slack)
            .map(|(k, _)| k)
            .collect();
        if slacks.len() != 1 {
            return Err(NetworkError::SlackCount(slacks.len()));
        }

        let net = NetworkModel {
            base,
            buses,
            branches,
            slack: slacks[0],
            id_to_index,
        };

        let mut seen = HashSet::new();
        for br in &net.branches {
            for end in [br.from, br.to] {
                let bus = net.bus_by_id(end).ok_or_else(|| {
                    NetworkError::Schema(format!("branch references unknown bus {end}"))
                })?;
                for p in br.phases.iter() {
                    if !bus.phases.contains(p) {
                        return Err(NetworkError::PhaseConsistency {
                            from: br.from,
                            to: br.to,
                            bus: end,
                            phase: p,
                        });
                    }
                }
            }
            if !seen.insert((br.from.min(br.to), br.from.max(br.to))) {
                return Err(NetworkError::Schema(format!(
                    "duplicate branch ({}, {})",
                    br.from, br.to
                )));
            }
            for i in 0..3 {
                for j in 0..3 {
                    let active = br.phases.contains(Phase::from_index(i))
                        && br.phases.contains(Phase::from_index(j));
                    if !active && br.z[(i, j)] != C64::new(0.0, 0.0) {
                        return Err(NetworkError::Schema(format!(
                            "branch ({}, {}): nonzero impedance entry outside phase set {}",
                            br.from, br.to, br.phases
                        )));
                    }
                    // passive lines are reciprocal
                    let gap = (br.z[(i, j)] - br.z[(j, i)]).norm();
                    if gap > 1e-9 * br.z[(i, j)].norm().max(1e-9) {
                        return Err(NetworkError::Schema(format!(
                            "branch ({}, {}): impedance block is not symmetric at ({i}, {j})",
                            br.from, br.to
                        )));
                    }
                }
            }
        }
        net.check_connected()?;
        Ok(net)
    }

    fn check_connected(&self) -> Result<(), NetworkError> {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for br in &self.branches {
            let (i, j) = (self.index_of(br.from), self.index_of(br.to));
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([self.slack]);
        seen[self.slack] = true;
        while let Some(k) = queue.pop_front() {
            for &m in &adj[k] {
                if !seen[m] {
                    seen[m] = true;
                    queue.push_back(m);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(k) => Err(NetworkError::Disconnected(self.buses[k].id)),
            None => Ok(()),
        }
    }

    pub fn slack_index(&self) -> usize {
        self.slack
    }

    pub fn bus_by_id(&self, id: usize) -> Option<&Bus> {
        self.id_to_index.get(&id).map(|&k| &self.buses[k])
    }

    pub fn index_of(&self, id: usize) -> usize {
        self.id_to_index[&id]
    }

    /// Connectivity indicator: 1 iff a branch joins the two bus ids.
    pub fn connected(&self, i: usize, j: usize) -> bool {
        self.branches
            .iter()
            .any(|b| (b.from == i && b.to == j) || (b.from == j && b.to == i))
    }
}

/// Inverts the active-phase submatrix of a branch impedance into conductance
/// and susceptance blocks; missing-phase rows and columns stay exactly zero.
pub fn invert_branch_impedance(
    branch: &BranchImpedance,
    cond_bound: f64,
) -> Result<BranchAdmittance, NetworkError> {
    let phases: Vec<usize> = branch.phases.iter().map(Phase::index).collect();
    let k = phases.len();
    let sub = DMatrix::<C64>::from_fn(k, k, |i, j| branch.z[(phases[i], phases[j])]);

    let cond = linalg::condition_number(&sub);
    if !cond.is_finite() || cond > cond_bound {
        return Err(NetworkError::SingularImpedance {
            from: branch.from,
            to: branch.to,
            cond,
            bound: cond_bound,
        });
    }
    let inv = sub
        .lu()
        .try_inverse()
        .ok_or(NetworkError::SingularImpedance {
            from: branch.from,
            to: branch.to,
            cond,
            bound: cond_bound,
        })?;

    let mut g = Matrix3::zeros();
    let mut b = Matrix3::zeros();
    for (i, &pi) in phases.iter().enumerate() {
        for (j, &pj) in phases.iter().enumerate() {
            g[(pi, pj)] = inv[(i, j)].re;
            b[(pi, pj)] = inv[(i, j)].im;
        }
    }
    Ok(BranchAdmittance {
        from: branch.from,
        to: branch.to,
        phases: branch.phases,
        g,
        b,
    })
}

/// Index of energized (bus, phase) pairs, in bus file order with phases a < b < c.
#[derive(Debug, Clone, PartialEq)]
pub struct BusPhaseIndex {
    entries: Vec<(usize, Phase)>,
    lookup: HashMap<(usize, Phase), usize>,
    slack_rows: Vec<usize>,
}

impl BusPhaseIndex {
    pub fn new(net: &NetworkModel) -> BusPhaseIndex {
        let mut entries = Vec::new();
        let mut lookup = HashMap::new();
        let mut slack_rows = Vec::new();
        for bus in &net.buses {
            for p in bus.phases.iter() {
                lookup.insert((bus.id, p), entries.len());
                if bus.is_slack {
                    slack_rows.push(entries.len());
                }
                entries.push((bus.id, p));
            }
        }
        BusPhaseIndex {
            entries,
            lookup,
            slack_rows,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn row(&self, bus: usize, phase: Phase) -> Option<usize> {
        self.lookup.get(&(bus, phase)).copied()
    }

    pub fn label(&self, row: usize) -> (usize, Phase) {
        self.entries[row]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, (usize, Phase))> + '_ {
        self.entries.iter().copied().enumerate()
    }

    pub fn slack_rows(&self) -> &[usize] {
        &self.slack_rows
    }

    /// Rows of all non-slack bus-phases, in index order.
    pub fn non_slack_rows(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|r| !self.slack_rows.contains(r))
            .collect()
    }
}

/// Assembled bus admittance over the energized bus-phase pairs.
///
/// Off-diagonal block (i,j) is -Y_ij, the diagonal block at bus i sums Y_ij of
/// incident branches. For a (possibly nonsymmetric) candidate branch block the
/// far end uses the transpose, preserving reciprocity.
#[derive(Debug, Clone)]
pub struct BusAdmittance {
    pub index: BusPhaseIndex,
    matrix: DMatrix<C64>,
}

impl BusAdmittance {
    /// Assemble from arbitrary per-branch admittance blocks (aligned with
    /// `net.branches`).
    pub fn from_blocks(net: &NetworkModel, blocks: &[Matrix3<C64>]) -> BusAdmittance {
        assert_eq!(blocks.len(), net.branches.len());
        let index = BusPhaseIndex::new(net);
        let n = index.len();
        let mut m = DMatrix::<C64>::zeros(n, n);
        for (br, y) in net.branches.iter().zip(blocks) {
            for n_ph in br.phases.iter() {
                for p_ph in br.phases.iter() {
                    let v = y[(n_ph.index(), p_ph.index())];
                    let rn = index.row(br.from, n_ph).expect("validated phase");
                    let rp = index.row(br.to, p_ph).expect("validated phase");
                    let rfn = index.row(br.from, p_ph).expect("validated phase");
                    let rtp = index.row(br.to, n_ph).expect("validated phase");
                    m[(rn, rfn)] += v;
                    m[(rp, rtp)] += v; // far-end diagonal uses the transpose
                    m[(rn, rp)] -= v;
                    m[(rp, rn)] -= v;
                }
            }
        }
        BusAdmittance { index, matrix: m }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn entry(&self, r: usize, c: usize) -> C64 {
        self.matrix[(r, c)]
    }

    pub fn g(&self, r: usize, c: usize) -> f64 {
        self.matrix[(r, c)].re
    }

    pub fn b(&self, r: usize, c: usize) -> f64 {
        self.matrix[(r, c)].im
    }

    /// Lookup by (bus id, phase) pairs.
    pub fn block(&self, i: (usize, Phase), j: (usize, Phase)) -> Option<C64> {
        let r = self.index.row(i.0, i.1)?;
        let c = self.index.row(j.0, j.1)?;
        Some(self.matrix[(r, c)])
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }
}

/// Inverts every branch and assembles the bus admittance of the feeder.
pub fn assemble_bus_admittance(
    net: &NetworkModel,
    cond_bound: f64,
) -> Result<BusAdmittance, NetworkError> {
    let blocks: Vec<Matrix3<C64>> = net
        .branches
        .iter()
        .map(|br| invert_branch_impedance(br, cond_bound).map(|y| y.as_complex()))
        .collect::<Result<_, _>>()?;
    Ok(BusAdmittance::from_blocks(net, &blocks))
}

/// Fixed enumeration of the estimable line parameters: branches in file
/// order, active phase pairs (n, p) row-major within each branch. The reduced
/// parameter vector is [all G entries; all B entries] in this order.
#[derive(Debug, Clone)]
pub struct ParameterIndex {
    pairs: Vec<(usize, Phase, Phase)>,
    lookup: HashMap<(usize, Phase, Phase), usize>,
}

impl ParameterIndex {
    pub fn new(net: &NetworkModel) -> ParameterIndex {
        let mut pairs = Vec::new();
        let mut lookup = HashMap::new();
        for (bi, br) in net.branches.iter().enumerate() {
            for n in br.phases.iter() {
                for p in br.phases.iter() {
                    lookup.insert((bi, n, p), pairs.len());
                    pairs.push((bi, n, p));
                }
            }
        }
        ParameterIndex { pairs, lookup }
    }

    /// Number of (branch, phase pair) slots; the parameter vector has twice
    /// this length.
    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn pair(&self, k: usize) -> (usize, Phase, Phase) {
        self.pairs[k]
    }

    pub fn slot(&self, branch: usize, n: Phase, p: Phase) -> Option<usize> {
        self.lookup.get(&(branch, n, p)).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, (usize, Phase, Phase))> + '_ {
        self.pairs.iter().copied().enumerate()
    }

    /// True per-branch admittances flattened into a parameter vector.
    pub fn theta_from_branches(&self, admittances: &[BranchAdmittance]) -> nalgebra::DVector<f64> {
        let np = self.pair_count();
        let mut theta = nalgebra::DVector::zeros(2 * np);
        for (k, (bi, n, p)) in self.iter() {
            theta[k] = admittances[bi].g[(n.index(), p.index())];
            theta[np + k] = admittances[bi].b[(n.index(), p.index())];
        }
        theta
    }

    /// Expand a parameter vector into per-branch complex admittance blocks.
    pub fn blocks_from_theta(
        &self,
        net: &NetworkModel,
        theta: &nalgebra::DVector<f64>,
    ) -> Vec<Matrix3<C64>> {
        assert_eq!(theta.len(), 2 * self.pair_count());
        let np = self.pair_count();
        let mut blocks = vec![Matrix3::<C64>::zeros(); net.branches.len()];
        for (k, (bi, n, p)) in self.iter() {
            blocks[bi][(n.index(), p.index())] = C64::new(theta[k], theta[np + k]);
        }
        blocks
    }
}

// ---------------------------------------------------------------------------
// Feeder file format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FeederDoc {
    base: BaseSpec,
    buses: Vec<BusDoc>,
    branches: Vec<BranchDoc>,
}

#[derive(Serialize, Deserialize)]
struct BusDoc {
    id: usize,
    phases: String,
    #[serde(default)]
    is_slack: bool,
}

#[derive(Serialize, Deserialize)]
struct BranchDoc {
    from: usize,
    to: usize,
    phases: String,
    z_real: [[f64; 3]; 3],
    z_imag: [[f64; 3]; 3],
    unit: String,
}

/// Loads a feeder document; impedances declared in ohms are converted to
/// per-unit on the document's base.
pub fn load_network(path: &Path) -> Result<NetworkModel, NetworkError> {
    let text = std::fs::read_to_string(path)?;
    load_network_str(&text)
}

pub fn load_network_str(text: &str) -> Result<NetworkModel, NetworkError> {
    let doc: FeederDoc = serde_json::from_str(text)?;
    if doc.base.s_base_kva <= 0.0 || doc.base.v_base_kv <= 0.0 {
        return Err(NetworkError::Schema(
            "base powers and voltages must be positive".into(),
        ));
    }
    let buses = doc
        .buses
        .iter()
        .map(|b| {
            Ok(Bus {
                id: b.id,
                phases: PhaseSet::parse(&b.phases)?,
                is_slack: b.is_slack,
            })
        })
        .collect::<Result<Vec<_>, NetworkError>>()?;
    let z_base = doc.base.z_base_ohm();
    let branches = doc
        .branches
        .iter()
        .map(|br| {
            let scale = match br.unit.as_str() {
                "pu" => 1.0,
                "ohm" => 1.0 / z_base,
                other => {
                    return Err(NetworkError::Schema(format!(
                        "branch ({}, {}): unknown impedance unit {other:?}",
                        br.from, br.to
                    )))
                }
            };
            let z =
                Matrix3::from_fn(|i, j| C64::new(br.z_real[i][j] * scale, br.z_imag[i][j] * scale));
            Ok(BranchImpedance {
                from: br.from,
                to: br.to,
                phases: PhaseSet::parse(&br.phases)?,
                z,
            })
        })
        .collect::<Result<Vec<_>, NetworkError>>()?;
    NetworkModel::new(doc.base, buses, branches)
}

/// Saves a feeder in per-unit; `load_network(save_network(net))` round-trips
/// bit-exactly on all numeric fields.
pub fn save_network(net: &NetworkModel, path: &Path) -> Result<(), NetworkError> {
    let doc = FeederDoc {
        base: net.base,
        buses: net
            .buses
            .iter()
            .map(|b| BusDoc {
                id: b.id,
                phases: b.phases.to_string(),
                is_slack: b.is_slack,
            })
            .collect(),
        branches: net
            .branches
            .iter()
            .map(|br| {
                let mut z_real = [[0.0; 3]; 3];
                let mut z_imag = [[0.0; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        z_real[i][j] = br.z[(i, j)].re;
                        z_imag[i][j] = br.z[(i, j)].im;
                    }
                }
                BranchDoc {
                    from: br.from,
                    to: br.to,
                    phases: br.phases.to_string(),
                    z_real,
                    z_imag,
                    unit: "pu".into(),
                }
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(NetworkError::from)?;
    std::fs::write(path, text)?;
    Ok(())
}
