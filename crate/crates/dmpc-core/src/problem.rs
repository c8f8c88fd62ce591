//! Partially separable problems with consensus coupling.
//!
//! A problem is a list of per-subsystem evaluators plus a set of copy/original
//! pairings. The pairings induce consensus groups (one original together with
//! all of its copies) and the averaging operator used by the solvers, which is
//! the orthogonal projection onto the consensus subspace and acts as the
//! arithmetic group mean.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Address of one decision variable: subsystem index plus local offset.
///
/// Stacking order across subsystems is subsystem-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct VarRef {
    pub subsystem: usize,
    pub index: usize,
}

impl VarRef {
    pub fn new(subsystem: usize, index: usize) -> Self {
        Self { subsystem, index }
    }
}

/// One copy/original pairing; the copy variable mirrors the original.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConsensusPair {
    pub copy: VarRef,
    pub original: VarRef,
}

#[derive(Debug, Error)]
pub enum CouplingError {
    #[error("address ({subsystem}, {index}) is out of range")]
    DanglingAddress { subsystem: usize, index: usize },
    #[error("copy address ({subsystem}, {index}) appears in more than one pair")]
    DuplicateCopy { subsystem: usize, index: usize },
    #[error("address ({subsystem}, {index}) is used both as a copy and as an original")]
    CopyIsOriginal { subsystem: usize, index: usize },
    #[error("stacked vector has length {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

/// Consensus structure: copy/original pairs and the derived groups.
///
/// Every row of the implied coupling matrix E has exactly one +1 and one -1,
/// and every copy appears in exactly one pair, which keeps E full row rank.
#[derive(Debug, Clone)]
pub struct ConsensusCoupling {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    total_dim: usize,
    pairs: Vec<ConsensusPair>,
    /// groups[g] = stacked indices of one original (first entry) and its copies
    groups: Vec<Vec<usize>>,
    /// per stacked index: the group it belongs to, if any
    entry_group: Vec<Option<usize>>,
}

impl ConsensusCoupling {
    /// Builds the coupling for subsystem dimensions `dims` from copy/original
    /// pairs.
    pub fn new(dims: &[usize], pairs: &[ConsensusPair]) -> Result<Self, CouplingError> {
        let mut offsets = Vec::with_capacity(dims.len() + 1);
        let mut total = 0usize;
        for &d in dims {
            offsets.push(total);
            total += d;
        }
        let stack = |v: VarRef| -> Result<usize, CouplingError> {
            if v.subsystem >= dims.len() || v.index >= dims[v.subsystem] {
                return Err(CouplingError::DanglingAddress {
                    subsystem: v.subsystem,
                    index: v.index,
                });
            }
            Ok(offsets[v.subsystem] + v.index)
        };
        let mut is_copy = vec![false; total];
        let mut original_group: Vec<Option<usize>> = vec![None; total];
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for pair in pairs {
            let c = stack(pair.copy)?;
            let o = stack(pair.original)?;
            if is_copy[c] {
                return Err(CouplingError::DuplicateCopy {
                    subsystem: pair.copy.subsystem,
                    index: pair.copy.index,
                });
            }
            is_copy[c] = true;
            if original_group[c].is_some() || c == o {
                return Err(CouplingError::CopyIsOriginal {
                    subsystem: pair.copy.subsystem,
                    index: pair.copy.index,
                });
            }
            let g = match original_group[o] {
                Some(g) => g,
                None => {
                    groups.push(vec![o]);
                    original_group[o] = Some(groups.len() - 1);
                    groups.len() - 1
                }
            };
            groups[g].push(c);
        }
        // a copy that later shows up as an original breaks the one-original
        // invariant
        for (idx, grp) in original_group.iter().enumerate() {
            if grp.is_some() && is_copy[idx] {
                let (subsystem, index) = unstack(&offsets, dims, idx);
                return Err(CouplingError::CopyIsOriginal { subsystem, index });
            }
        }
        let mut entry_group = vec![None; total];
        for (g, members) in groups.iter().enumerate() {
            for &m in members {
                entry_group[m] = Some(g);
            }
        }
        Ok(Self {
            dims: dims.to_vec(),
            offsets,
            total_dim: total,
            pairs: pairs.to_vec(),
            groups,
            entry_group,
        })
    }

    pub fn num_subsystems(&self) -> usize {
        self.dims.len()
    }

    pub fn subsystem_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn offset(&self, subsystem: usize) -> usize {
        self.offsets[subsystem]
    }

    pub fn pairs(&self) -> &[ConsensusPair] {
        &self.pairs
    }

    /// Number of coupling rows n_c (= number of copies).
    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn stacked_index(&self, v: VarRef) -> usize {
        self.offsets[v.subsystem] + v.index
    }

    /// Projects the stacked vector onto the consensus subspace: every group is
    /// replaced by its arithmetic mean, uncoupled entries pass through.
    pub fn average(&self, z: &DVector<f64>) -> Result<DVector<f64>, CouplingError> {
        if z.len() != self.total_dim {
            return Err(CouplingError::DimensionMismatch {
                got: z.len(),
                expected: self.total_dim,
            });
        }
        let mut out = z.clone();
        self.average_in_place(&mut out);
        Ok(out)
    }

    /// In-place variant of [`average`](Self::average); `z` must be stacked to
    /// the total dimension. Group means are accumulated in member order, so
    /// results are identical regardless of caller parallelism.
    pub fn average_in_place(&self, z: &mut DVector<f64>) {
        assert_eq!(z.len(), self.total_dim, "stacked dimension mismatch");
        for members in &self.groups {
            let mut sum = 0.0;
            for &m in members {
                sum += z[m];
            }
            let mean = sum / members.len() as f64;
            for &m in members {
                z[m] = mean;
            }
        }
    }

    /// Splits one stacked vector into per-subsystem vectors.
    pub fn unstack(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        assert_eq!(z.len(), self.total_dim);
        self.dims
            .iter()
            .enumerate()
            .map(|(i, &d)| DVector::from_column_slice(&z.as_slice()[self.offsets[i]..self.offsets[i] + d]))
            .collect()
    }

    /// Concatenates per-subsystem vectors in subsystem-major order.
    pub fn stack(&self, parts: &[DVector<f64>]) -> DVector<f64> {
        assert_eq!(parts.len(), self.dims.len());
        let mut out = DVector::zeros(self.total_dim);
        for (i, p) in parts.iter().enumerate() {
            assert_eq!(p.len(), self.dims[i], "subsystem {i} dimension mismatch");
            out.rows_mut(self.offsets[i], self.dims[i]).copy_from(p);
        }
        out
    }

    /// Checks the dual initialization condition: the group means of `gamma`
    /// vanish to `tol` and uncoupled entries are exactly zero.
    pub fn check_dual_condition(&self, gamma: &DVector<f64>, tol: f64) -> bool {
        if gamma.len() != self.total_dim {
            return false;
        }
        for members in &self.groups {
            let mean: f64 = members.iter().map(|&m| gamma[m]).sum::<f64>() / members.len() as f64;
            if mean.abs() > tol {
                return false;
            }
        }
        for i in 0..self.total_dim {
            if self.entry_group[i].is_none() && gamma[i] != 0.0 {
                return false;
            }
        }
        true
    }

    /// Largest deviation of any group member from its group mean; zero when
    /// the vector is consensus-feasible.
    pub fn consensus_violation(&self, z: &DVector<f64>) -> f64 {
        let mut worst = 0.0f64;
        for members in &self.groups {
            let mean: f64 = members.iter().map(|&m| z[m]).sum::<f64>() / members.len() as f64;
            for &m in members {
                worst = worst.max((z[m] - mean).abs());
            }
        }
        worst
    }

    /// Assembles the coupling matrix E explicitly (one +1/-1 row per pair).
    /// Intended for small instances and cross-checks.
    pub fn assemble_e(&self) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.pairs.len(), self.total_dim);
        for (r, pair) in self.pairs.iter().enumerate() {
            e[(r, self.stacked_index(pair.copy))] = 1.0;
            e[(r, self.stacked_index(pair.original))] = -1.0;
        }
        e
    }
}

fn unstack(offsets: &[usize], dims: &[usize], stacked: usize) -> (usize, usize) {
    for (i, &off) in offsets.iter().enumerate() {
        if stacked < off + dims[i] {
            return (i, stacked - off);
        }
    }
    unreachable!("stacked index out of range")
}

/// Per-subsystem evaluators for a partially separable problem.
///
/// Evaluators must be deterministic. Jacobians are reported dense per
/// subsystem; cross-subsystem sparsity lives only in the coupling.
pub trait SubsystemModel: Send + Sync {
    /// Decision-vector dimension n_z of this subsystem.
    fn dim(&self) -> usize;
    fn num_eq(&self) -> usize;
    fn num_ineq(&self) -> usize;

    fn objective(&self, z: &DVector<f64>) -> f64;
    fn objective_gradient(&self, z: &DVector<f64>) -> DVector<f64>;
    /// Gauss-Newton Hessian of the objective at `z`.
    fn gauss_newton_hessian(&self, z: &DVector<f64>) -> DMatrix<f64>;

    fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64>;
    /// Jacobian of the equality constraints, shape (num_eq, dim).
    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64>;

    fn ineq_constraints(&self, z: &DVector<f64>) -> DVector<f64>;
    /// Jacobian of the inequality constraints, shape (num_ineq, dim).
    fn ineq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64>;

    /// Exact Hessian of the Lagrangian, if the model provides one.
    fn lagrangian_hessian(
        &self,
        _z: &DVector<f64>,
        _nu: &DVector<f64>,
        _mu: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        None
    }
}

/// Maps the first predicted input out of a subsystem decision vector, together
/// with its box bounds.
#[derive(Debug, Clone)]
pub struct InputMap {
    /// For each subsystem, local offsets of u[0] within z_i.
    pub indices: Vec<Vec<usize>>,
    /// Per-subsystem lower input bounds (same length as indices).
    pub lower: Vec<DVector<f64>>,
    /// Per-subsystem upper input bounds.
    pub upper: Vec<DVector<f64>>,
}

/// A partially separable problem: subsystem evaluators plus consensus
/// coupling.
pub struct PartialNlp {
    subsystems: Vec<std::sync::Arc<dyn SubsystemModel>>,
    coupling: ConsensusCoupling,
    input_map: Option<InputMap>,
}

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("subsystem {subsystem}: evaluator dimension mismatch ({what})")]
    EvaluatorShape { subsystem: usize, what: String },
    #[error(transparent)]
    Coupling(#[from] CouplingError),
}

impl PartialNlp {
    pub fn new(
        subsystems: Vec<Box<dyn SubsystemModel>>,
        coupling: ConsensusCoupling,
    ) -> Result<Self, ProblemError> {
        let dims: Vec<usize> = subsystems.iter().map(|s| s.dim()).collect();
        if dims != coupling.subsystem_dims() {
            return Err(ProblemError::EvaluatorShape {
                subsystem: 0,
                what: format!(
                    "coupling dims {:?} do not match evaluator dims {:?}",
                    coupling.subsystem_dims(),
                    dims
                ),
            });
        }
        Ok(Self {
            subsystems: subsystems.into_iter().map(std::sync::Arc::from).collect(),
            coupling,
            input_map: None,
        })
    }

    pub fn with_input_map(mut self, map: InputMap) -> Self {
        self.input_map = Some(map);
        self
    }

    pub fn num_subsystems(&self) -> usize {
        self.subsystems.len()
    }

    pub fn subsystem(&self, i: usize) -> &dyn SubsystemModel {
        self.subsystems[i].as_ref()
    }

    pub fn subsystems(&self) -> &[std::sync::Arc<dyn SubsystemModel>] {
        &self.subsystems
    }

    pub fn coupling(&self) -> &ConsensusCoupling {
        &self.coupling
    }

    pub fn input_map(&self) -> Option<&InputMap> {
        self.input_map.as_ref()
    }

    pub fn total_dim(&self) -> usize {
        self.coupling.total_dim()
    }

    /// Sum of the subsystem objectives at a stacked point.
    pub fn objective(&self, z: &[DVector<f64>]) -> f64 {
        self.subsystems
            .iter()
            .zip(z)
            .map(|(s, zi)| s.objective(zi))
            .sum()
    }
}

/// Primal/dual iterate carried by the solvers.
///
/// `z` and `z_bar` are per-subsystem primal vectors, `gamma` the consensus
/// duals, `nu`/`mu` the local equality/inequality multipliers from the latest
/// subsystem solves.
#[derive(Debug, Clone)]
pub struct IterateState {
    pub z: Vec<DVector<f64>>,
    pub z_bar: Vec<DVector<f64>>,
    pub gamma: Vec<DVector<f64>>,
    pub nu: Vec<DVector<f64>>,
    pub mu: Vec<DVector<f64>>,
}

impl IterateState {
    /// All-zero state matching the problem's dimensions (satisfies the dual
    /// initialization condition).
    pub fn zeros(nlp: &PartialNlp) -> Self {
        let z: Vec<DVector<f64>> = nlp
            .subsystems()
            .iter()
            .map(|s| DVector::zeros(s.dim()))
            .collect();
        let nu = nlp
            .subsystems()
            .iter()
            .map(|s| DVector::zeros(s.num_eq()))
            .collect();
        let mu = nlp
            .subsystems()
            .iter()
            .map(|s| DVector::zeros(s.num_ineq()))
            .collect();
        Self {
            z: z.clone(),
            z_bar: z.clone(),
            gamma: z,
            nu,
            mu,
        }
    }

    /// Zero state for raw subsystem dimensions (QP-level use).
    pub fn zeros_for_dims(dims: &[usize], eq_dims: &[usize], ineq_dims: &[usize]) -> Self {
        let z: Vec<DVector<f64>> = dims.iter().map(|&d| DVector::zeros(d)).collect();
        Self {
            z: z.clone(),
            z_bar: z.clone(),
            gamma: z,
            nu: eq_dims.iter().map(|&d| DVector::zeros(d)).collect(),
            mu: ineq_dims.iter().map(|&d| DVector::zeros(d)).collect(),
        }
    }

    pub fn stacked_z(&self, coupling: &ConsensusCoupling) -> DVector<f64> {
        coupling.stack(&self.z)
    }

    pub fn stacked_z_bar(&self, coupling: &ConsensusCoupling) -> DVector<f64> {
        coupling.stack(&self.z_bar)
    }

    pub fn stacked_gamma(&self, coupling: &ConsensusCoupling) -> DVector<f64> {
        coupling.stack(&self.gamma)
    }
}
