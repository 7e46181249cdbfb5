//! Network topology, nodal admittance assembly, outage switching, island
//! classification and Kron reduction.
//!
//! Buses are numbered `1..=M`. Branches are series elements only: the nodal
//! matrix satisfies `Y_ii = Σ_e y_ie` and `Y_ie = -y_ie`, so every row sums to
//! zero.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod feeders;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BusId(pub usize);

impl BusId {
    /// Zero-based matrix row of this bus.
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Unordered bus pair, stored with the smaller id first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BranchKey(pub BusId, pub BusId);

impl BranchKey {
    pub fn new(a: BusId, b: BusId) -> Self {
        if a <= b {
            BranchKey(a, b)
        } else {
            BranchKey(b, a)
        }
    }

    pub fn from_pair(a: usize, b: usize) -> Self {
        Self::new(BusId(a), BusId(b))
    }
}

impl fmt::Display for BranchKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.0, self.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    pub admittance: Complex64,
    pub in_service: bool,
}

impl Branch {
    pub fn new(from: usize, to: usize, admittance: Complex64) -> Self {
        Branch {
            from: BusId(from),
            to: BusId(to),
            admittance,
            in_service: true,
        }
    }

    pub fn key(&self) -> BranchKey {
        BranchKey::new(self.from, self.to)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridTopology {
    bus_count: usize,
    branches: Vec<Branch>,
    slack: BTreeSet<BusId>,
    der: BTreeSet<BusId>,
}

impl GridTopology {
    /// Validates endpoint ranges, self loops, duplicate pairs and zero
    /// admittances. Parallel branches must be merged by the caller.
    pub fn new(
        bus_count: usize,
        branches: Vec<Branch>,
        slack: impl IntoIterator<Item = BusId>,
        der: impl IntoIterator<Item = BusId>,
    ) -> Result<Self> {
        let topo = GridTopology {
            bus_count,
            branches,
            slack: slack.into_iter().collect(),
            der: der.into_iter().collect(),
        };
        topo.validate()?;
        Ok(topo)
    }

    fn validate(&self) -> Result<()> {
        let check = |bus: BusId| {
            if bus.0 == 0 || bus.0 > self.bus_count {
                Err(Error::BusOutOfRange {
                    bus,
                    bus_count: self.bus_count,
                })
            } else {
                Ok(())
            }
        };
        for bus in self.slack.iter().chain(self.der.iter()) {
            check(*bus)?;
        }
        let mut seen = BTreeSet::new();
        for br in &self.branches {
            check(br.from)?;
            check(br.to)?;
            if br.from == br.to {
                return Err(Error::SelfLoop {
                    from: br.from,
                    to: br.to,
                });
            }
            if !seen.insert(br.key()) {
                return Err(Error::DuplicateBranch {
                    from: br.from,
                    to: br.to,
                });
            }
            if br.in_service && br.admittance.norm() == 0.0 {
                return Err(Error::ZeroAdmittance {
                    from: br.from,
                    to: br.to,
                });
            }
        }
        Ok(())
    }

    pub fn bus_count(&self) -> usize {
        self.bus_count
    }

    pub fn buses(&self) -> impl Iterator<Item = BusId> {
        (1..=self.bus_count).map(BusId)
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn slack(&self) -> &BTreeSet<BusId> {
        &self.slack
    }

    pub fn der(&self) -> &BTreeSet<BusId> {
        &self.der
    }

    pub fn is_slack(&self, bus: BusId) -> bool {
        self.slack.contains(&bus)
    }

    pub fn non_slack_buses(&self) -> Vec<BusId> {
        self.buses().filter(|b| !self.is_slack(*b)).collect()
    }

    pub fn branch(&self, key: BranchKey) -> Option<&Branch> {
        self.branches.iter().find(|b| b.key() == key)
    }

    pub fn in_service(&self) -> impl Iterator<Item = &Branch> {
        self.branches.iter().filter(|b| b.in_service)
    }

    /// Keys of in-service branches, sorted.
    pub fn branch_keys(&self) -> Vec<BranchKey> {
        let mut keys: Vec<_> = self.in_service().map(Branch::key).collect();
        keys.sort();
        keys
    }

    /// In-service neighbours of `bus`, ascending.
    pub fn neighbors(&self, bus: BusId) -> Vec<BusId> {
        let mut out: Vec<BusId> = self
            .in_service()
            .filter_map(|b| {
                if b.from == bus {
                    Some(b.to)
                } else if b.to == bus {
                    Some(b.from)
                } else {
                    None
                }
            })
            .collect();
        out.sort();
        out
    }

    pub fn with_der(&self, der: impl IntoIterator<Item = BusId>) -> Result<Self> {
        GridTopology::new(
            self.bus_count,
            self.branches.clone(),
            self.slack.iter().copied(),
            der,
        )
    }

    /// Nodal admittance matrix over all buses.
    pub fn admittance(&self) -> Result<AdmittanceMatrix> {
        self.validate()?;
        let m = self.bus_count;
        let mut y = DMatrix::<Complex64>::zeros(m, m);
        for br in self.in_service() {
            let (i, j) = (br.from.index(), br.to.index());
            y[(i, j)] -= br.admittance;
            y[(j, i)] -= br.admittance;
            y[(i, i)] += br.admittance;
            y[(j, j)] += br.admittance;
        }
        Ok(AdmittanceMatrix {
            buses: self.buses().collect(),
            values: y,
        })
    }

    /// Copy of the topology with the listed branches switched out of service.
    pub fn apply_outage(&self, out: &[BranchKey]) -> Result<Self> {
        let mut next = self.clone();
        for key in out {
            let br = next
                .branches
                .iter_mut()
                .find(|b| b.key() == *key)
                .ok_or(Error::UnknownBranch {
                    from: key.0,
                    to: key.1,
                })?;
            if !br.in_service {
                return Err(Error::BranchOutOfService {
                    from: key.0,
                    to: key.1,
                });
            }
            br.in_service = false;
        }
        Ok(next)
    }

    /// Connected components of the in-service graph, ordered by their
    /// smallest bus.
    pub fn islands(&self) -> Vec<Island> {
        let mut parent: Vec<usize> = (0..self.bus_count).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for br in self.in_service() {
            let a = find(&mut parent, br.from.index());
            let b = find(&mut parent, br.to.index());
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        let mut groups: BTreeMap<usize, Vec<BusId>> = BTreeMap::new();
        for bus in self.buses() {
            let root = find(&mut parent, bus.index());
            groups.entry(root).or_default().push(bus);
        }
        let mut islands: Vec<Island> = groups
            .into_values()
            .map(|buses| {
                let kind = if buses.iter().any(|b| self.slack.contains(b)) {
                    IslandKind::SlackConnected
                } else if buses.iter().any(|b| self.der.contains(b)) {
                    IslandKind::DerBacked
                } else {
                    IslandKind::Dead
                };
                Island { buses, kind }
            })
            .collect();
        islands.sort_by_key(|i| i.buses[0]);
        islands
    }

    /// True when every bus shares a component with a slack bus.
    pub fn is_slack_connected(&self) -> bool {
        self.islands()
            .iter()
            .all(|i| i.kind == IslandKind::SlackConnected)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IslandKind {
    SlackConnected,
    DerBacked,
    Dead,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Island {
    pub buses: Vec<BusId>,
    pub kind: IslandKind,
}

impl Island {
    pub fn contains(&self, bus: BusId) -> bool {
        self.buses.binary_search(&bus).is_ok()
    }
}

/// Complex nodal matrix with the bus id of every row.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmittanceMatrix {
    buses: Vec<BusId>,
    values: DMatrix<Complex64>,
}

impl AdmittanceMatrix {
    pub fn new(buses: Vec<BusId>, values: DMatrix<Complex64>) -> Result<Self> {
        if values.nrows() != buses.len() || values.ncols() != buses.len() {
            return Err(Error::DimensionMismatch {
                expected: buses.len(),
                found: values.nrows(),
            });
        }
        Ok(AdmittanceMatrix { buses, values })
    }

    pub fn dim(&self) -> usize {
        self.buses.len()
    }

    pub fn buses(&self) -> &[BusId] {
        &self.buses
    }

    pub fn values(&self) -> &DMatrix<Complex64> {
        &self.values
    }

    pub fn position(&self, bus: BusId) -> Option<usize> {
        self.buses.iter().position(|b| *b == bus)
    }

    fn positions(&self, buses: &[BusId]) -> Result<Vec<usize>> {
        buses
            .iter()
            .map(|b| {
                self.position(*b).ok_or(Error::BusOutOfRange {
                    bus: *b,
                    bus_count: self.dim(),
                })
            })
            .collect()
    }

    /// Principal submatrix over `buses`, in the given order.
    pub fn submatrix(&self, buses: &[BusId]) -> Result<AdmittanceMatrix> {
        let pos = self.positions(buses)?;
        let values = self.values.select_rows(&pos).select_columns(&pos);
        Ok(AdmittanceMatrix {
            buses: buses.to_vec(),
            values,
        })
    }
}

/// LU solve that refuses numerically singular systems.
pub(crate) fn solve_complex(
    a: &DMatrix<Complex64>,
    b: &DMatrix<Complex64>,
) -> Option<DMatrix<Complex64>> {
    if a.nrows() == 0 {
        return Some(DMatrix::zeros(0, b.ncols()));
    }
    let scale = a.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    let lu = a.clone().lu();
    let min_pivot = lu
        .u()
        .diagonal()
        .iter()
        .map(|v| v.norm())
        .fold(f64::INFINITY, f64::min);
    if min_pivot <= 1e-12 * scale {
        return None;
    }
    lu.solve(b)
}

/// Eliminates every bus not in `keep`:
/// `Ỹ = Y_AA - Y_AB Y_BB⁻¹ Y_BA`, rows ordered as `keep`.
pub fn kron_reduce(y: &AdmittanceMatrix, keep: &[BusId]) -> Result<AdmittanceMatrix> {
    let keep_pos = y.positions(keep)?;
    let elim: Vec<usize> = (0..y.dim()).filter(|p| !keep_pos.contains(p)).collect();
    let v = &y.values;
    let y_aa = v.select_rows(&keep_pos).select_columns(&keep_pos);
    if elim.is_empty() {
        return AdmittanceMatrix::new(keep.to_vec(), y_aa);
    }
    let y_ab = v.select_rows(&keep_pos).select_columns(&elim);
    let y_ba = v.select_rows(&elim).select_columns(&keep_pos);
    let y_bb = v.select_rows(&elim).select_columns(&elim);
    let x = solve_complex(&y_bb, &y_ba).ok_or_else(|| Error::SingularBlock {
        block: "eliminated",
        buses: elim.iter().map(|p| y.buses[*p]).collect(),
    })?;
    AdmittanceMatrix::new(keep.to_vec(), y_aa - y_ab * x)
}
