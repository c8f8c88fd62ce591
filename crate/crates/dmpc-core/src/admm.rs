//! Two-block consensus ADMM over subsystem QPs.
//!
//! Each iteration runs a parallel local solve of every subsystem's augmented
//! QP, a group-mean averaging barrier, and a dual ascent step
//! gamma += rho * (z - z_bar). Early termination is available on the
//! centralized KKT residual. Group means are reduced in a fixed order, so
//! results are identical for any worker count.

use nalgebra::DVector;
use rayon::prelude::*;
use thiserror::Error;

use crate::problem::{ConsensusCoupling, IterateState, PartialNlp};
use crate::qp::{
    qp_kkt_breakdown, QpData, QpError, QpSettings, QpSolution, QpSolver, QpStatus,
};

#[derive(Debug, Clone)]
pub struct AdmmConfig {
    /// Consensus penalty parameter rho > 0.
    pub rho: f64,
    /// Iteration cap l_max.
    pub l_max: usize,
    /// Early termination tolerance on the centralized KKT residual; `None`
    /// runs the full budget.
    pub kkt_tol: Option<f64>,
    /// Residual check cadence; the residual costs a full constraint pass.
    pub kkt_check_period: usize,
    /// Tolerance of the inner subsystem QP solves.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            l_max: 1000,
            kkt_tol: None,
            kkt_check_period: 10,
            inner_tol: 1e-6,
            inner_max_iter: 4000,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdmmStats {
    pub iterations_run: usize,
    /// (iteration, residual) at every check.
    pub kkt_history: Vec<(usize, f64)>,
    pub per_iteration_time_s: Vec<f64>,
    /// Final status of each subsystem's local solve.
    pub per_subsystem_solve_status: Vec<QpStatus>,
    /// Total inner splitting iterations across all subsystem solves.
    pub inner_iterations_total: usize,
}

#[derive(Debug, Error)]
pub enum AdmmError {
    #[error("invalid initialization: {0}")]
    InvalidInit(String),
    #[error("subsystem {subsystem} local QP is primal infeasible")]
    LocalInfeasible { subsystem: usize },
    #[error("subsystem count mismatch between QPs ({qps}) and coupling ({coupling})")]
    SubsystemMismatch { qps: usize, coupling: usize },
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("state is missing multipliers for subsystem {subsystem}")]
    MissingMultipliers { subsystem: usize },
}

/// Tolerance for accepting a warm-start dual/consensus initialization.
const INIT_TOL: f64 = 1e-8;

/// Runs consensus ADMM on the subsystem QPs.
///
/// `init.gamma` must satisfy the dual initialization condition and
/// `init.z_bar` must be consensus feasible. Returns the final averaged primal
/// `z_bar`, consensus duals `gamma`, the last local primals and their local
/// multipliers, plus iteration statistics.
pub fn admm_solve(
    qps: &[QpData],
    coupling: &ConsensusCoupling,
    init: &IterateState,
    cfg: &AdmmConfig,
) -> Result<(IterateState, AdmmStats), AdmmError> {
    let s = qps.len();
    if s != coupling.num_subsystems() {
        return Err(AdmmError::SubsystemMismatch {
            qps: s,
            coupling: coupling.num_subsystems(),
        });
    }
    for (i, qp) in qps.iter().enumerate() {
        if qp.n() != coupling.subsystem_dims()[i] {
            return Err(AdmmError::InvalidInit(format!(
                "subsystem {i} QP dimension {} does not match coupling {}",
                qp.n(),
                coupling.subsystem_dims()[i]
            )));
        }
        if init.nu[i].len() != qp.num_eq() || init.mu[i].len() != qp.num_ineq() {
            return Err(AdmmError::MissingMultipliers { subsystem: i });
        }
    }
    assert!(cfg.rho > 0.0, "rho must be positive");
    assert!(cfg.l_max >= 1, "l_max must be at least 1");
    let gamma_stacked = init.stacked_gamma(coupling);
    if !coupling.check_dual_condition(&gamma_stacked, INIT_TOL) {
        return Err(AdmmError::InvalidInit(
            "gamma violates the dual initialization condition".into(),
        ));
    }
    let zbar_stacked = init.stacked_z_bar(coupling);
    if coupling.consensus_violation(&zbar_stacked) > INIT_TOL {
        return Err(AdmmError::InvalidInit(
            "z_bar is not consensus feasible".into(),
        ));
    }

    // One augmented solver per subsystem; H_i + rho I and the constraints are
    // fixed for the whole run, only the linear cost changes per iteration.
    let inner_settings = QpSettings {
        tol: cfg.inner_tol,
        max_iter: cfg.inner_max_iter,
        ..QpSettings::default()
    };
    let mut solvers: Vec<QpSolver> = Vec::with_capacity(s);
    for qp in qps {
        let augmented = crate::qp::build_local_subproblem(
            qp,
            &DVector::zeros(qp.n()),
            &DVector::zeros(qp.n()),
            cfg.rho,
        )?;
        solvers.push(QpSolver::new(augmented, inner_settings.clone())?);
    }

    let mut state = init.clone();
    let mut stats = AdmmStats {
        per_subsystem_solve_status: vec![QpStatus::Solved; s],
        ..AdmmStats::default()
    };

    // pre-check: a fixed-point initialization terminates without iterating
    if let Some(tol) = cfg.kkt_tol {
        let r = qp_residual(qps, coupling, &state);
        stats.kkt_history.push((0, r));
        if r <= tol {
            return Ok((state, stats));
        }
    }

    for l in 1..=cfg.l_max {
        let started = std::time::Instant::now();
        // Step 3: parallel local argmin of the augmented Lagrangians
        let solutions: Vec<QpSolution> = solvers
            .par_iter_mut()
            .enumerate()
            .map(|(i, solver)| {
                let q_aug = &qps[i].q + &state.gamma[i] - &state.z_bar[i] * cfg.rho;
                solver.update_linear_cost(&q_aug);
                solver.warm_start(&state.z[i], &state.nu[i], &state.mu[i]);
                solver.solve()
            })
            .collect();
        for (i, sol) in solutions.iter().enumerate() {
            if sol.status == QpStatus::Infeasible {
                return Err(AdmmError::LocalInfeasible { subsystem: i });
            }
            stats.per_subsystem_solve_status[i] = sol.status;
            stats.inner_iterations_total += sol.iterations;
        }
        for (i, sol) in solutions.into_iter().enumerate() {
            state.z[i] = sol.z;
            state.nu[i] = sol.nu;
            state.mu[i] = sol.mu;
        }
        // Step 4: averaging barrier (fixed reduction order)
        let mut stacked = state.stacked_z(coupling);
        coupling.average_in_place(&mut stacked);
        state.z_bar = coupling.unstack(&stacked);
        // Step 5: dual ascent
        for i in 0..s {
            let mut g = std::mem::take(&mut state.gamma[i]);
            g += (&state.z[i] - &state.z_bar[i]) * cfg.rho;
            state.gamma[i] = g;
        }
        stats.iterations_run = l;
        stats.per_iteration_time_s.push(started.elapsed().as_secs_f64());

        if let Some(tol) = cfg.kkt_tol {
            if l % cfg.kkt_check_period == 0 || l == cfg.l_max {
                let r = qp_residual(qps, coupling, &state);
                stats.kkt_history.push((l, r));
                if r <= tol {
                    break;
                }
            }
        }
    }
    Ok((state, stats))
}

/// Centralized KKT residual of a QP-level iterate: the infinity norm over the
/// per-subsystem stationarity/feasibility/complementarity blocks and the
/// consensus deviation of the local primals.
pub fn qp_residual(qps: &[QpData], coupling: &ConsensusCoupling, state: &IterateState) -> f64 {
    let mut r = 0.0f64;
    for (i, qp) in qps.iter().enumerate() {
        let b = qp_kkt_breakdown(qp, &state.z[i], &state.nu[i], &state.mu[i]);
        let mut grad = qp.h.mul_vec(&state.z[i]) + &qp.q + &state.gamma[i];
        if qp.num_eq() > 0 {
            grad += qp.a_eq.mul_transpose_vec(&state.nu[i]);
        }
        if qp.num_ineq() > 0 {
            grad += qp.a_ineq.mul_transpose_vec(&state.mu[i]);
        }
        // the breakdown's stationarity term omits gamma; recompute it here
        r = r
            .max(grad.amax())
            .max(b.eq_feasibility)
            .max(b.ineq_feasibility)
            .max(b.dual_feasibility)
            .max(b.complementarity);
    }
    let stacked = state.stacked_z(coupling);
    r.max(coupling.consensus_violation(&stacked))
}

/// Centralized KKT residual of an iterate for a partially separable problem,
/// with stationarity grad f + Jg' nu + Jh' mu + gamma per subsystem and the
/// coupling term evaluated as per-group deviations of the local primals.
pub fn kkt_residual(nlp: &PartialNlp, state: &IterateState) -> Result<f64, AdmmError> {
    let mut r = 0.0f64;
    for i in 0..nlp.num_subsystems() {
        let sub = nlp.subsystem(i);
        if state.nu[i].len() != sub.num_eq() || state.mu[i].len() != sub.num_ineq() {
            return Err(AdmmError::MissingMultipliers { subsystem: i });
        }
        let z = &state.z[i];
        let mut grad = sub.objective_gradient(z) + &state.gamma[i];
        if sub.num_eq() > 0 {
            grad += sub.eq_jacobian(z).transpose() * &state.nu[i];
        }
        if sub.num_ineq() > 0 {
            grad += sub.ineq_jacobian(z).transpose() * &state.mu[i];
        }
        r = r.max(grad.amax());
        if sub.num_eq() > 0 {
            r = r.max(sub.eq_constraints(z).amax());
        }
        if sub.num_ineq() > 0 {
            let h = sub.ineq_constraints(z);
            for (hj, muj) in h.iter().zip(state.mu[i].iter()) {
                r = r.max(hj.max(0.0));
                r = r.max((-muj).max(0.0));
                r = r.max((hj * muj).abs());
            }
        }
    }
    let stacked = state.stacked_z(nlp.coupling());
    Ok(r.max(nlp.coupling().consensus_violation(&stacked)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{ConsensusPair, VarRef};
    use crate::qp::QuadraticSubsystem;
    use crate::sparse::CsrMatrix;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    /// min (z1-1)^2 + (z2+1)^2 with consensus z1 = z2.
    fn two_scalar_problem() -> (Vec<QpData>, ConsensusCoupling) {
        let qp1 = QpData::unconstrained(CsrMatrix::from_diagonal(&[2.0]), dvec(&[-2.0])).unwrap();
        let qp2 = QpData::unconstrained(CsrMatrix::from_diagonal(&[2.0]), dvec(&[2.0])).unwrap();
        let coupling = ConsensusCoupling::new(
            &[1, 1],
            &[ConsensusPair {
                copy: VarRef::new(1, 0),
                original: VarRef::new(0, 0),
            }],
        )
        .unwrap();
        (vec![qp1, qp2], coupling)
    }

    fn zero_state(qps: &[QpData], coupling: &ConsensusCoupling) -> IterateState {
        IterateState::zeros_for_dims(
            coupling.subsystem_dims(),
            &qps.iter().map(|q| q.num_eq()).collect::<Vec<_>>(),
            &qps.iter().map(|q| q.num_ineq()).collect::<Vec<_>>(),
        )
    }

    #[test]
    fn scalar_consensus_converges_to_zero() {
        let (qps, coupling) = two_scalar_problem();
        let init = zero_state(&qps, &coupling);
        let cfg = AdmmConfig {
            rho: 1.0,
            l_max: 2000,
            kkt_tol: Some(1e-6),
            inner_tol: 1e-9,
            ..AdmmConfig::default()
        };
        let (state, stats) = admm_solve(&qps, &coupling, &init, &cfg).unwrap();
        assert!(stats.iterations_run < 2000, "should terminate early");
        assert_relative_eq!(state.z_bar[0][0], 0.0, epsilon = 1e-5);
        assert_relative_eq!(state.z_bar[1][0], 0.0, epsilon = 1e-5);
    }

    #[test]
    fn fixed_point_initialization_needs_no_progress() {
        let (qps, coupling) = two_scalar_problem();
        let mut init = zero_state(&qps, &coupling);
        init.gamma[0][0] = 2.0;
        init.gamma[1][0] = -2.0;
        let cfg = AdmmConfig {
            rho: 1.0,
            l_max: 100,
            kkt_tol: Some(1e-8),
            ..AdmmConfig::default()
        };
        let (_, stats) = admm_solve(&qps, &coupling, &init, &cfg).unwrap();
        assert_eq!(stats.iterations_run, 0);
        assert!(stats.kkt_history[0].1 <= 1e-8);
    }

    #[test]
    fn limit_matches_dense_kkt_oracle_on_random_coupled_qp() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        // two subsystems of dim 3 with one consensus pair; strongly convex
        let mut qps = Vec::new();
        for _ in 0..2 {
            let m = DMatrix::<f64>::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            let h = &m * m.transpose() + DMatrix::identity(3, 3);
            let q = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            qps.push(
                QpData::new(
                    CsrMatrix::from_dense(&h),
                    q,
                    CsrMatrix::zeros(0, 3),
                    DVector::zeros(0),
                    CsrMatrix::zeros(0, 3),
                    DVector::zeros(0),
                )
                .unwrap(),
            );
        }
        let coupling = ConsensusCoupling::new(
            &[3, 3],
            &[ConsensusPair {
                copy: VarRef::new(1, 0),
                original: VarRef::new(0, 2),
            }],
        )
        .unwrap();
        // dense oracle: stacked KKT with the explicit coupling row
        let n = 6;
        let mut big_h = DMatrix::zeros(n, n);
        big_h.view_mut((0, 0), (3, 3)).copy_from(&qps[0].h.to_dense());
        big_h.view_mut((3, 3), (3, 3)).copy_from(&qps[1].h.to_dense());
        let mut big_q = DVector::zeros(n);
        big_q.rows_mut(0, 3).copy_from(&qps[0].q);
        big_q.rows_mut(3, 3).copy_from(&qps[1].q);
        let e = coupling.assemble_e();
        let mut kkt = DMatrix::zeros(n + 1, n + 1);
        kkt.view_mut((0, 0), (n, n)).copy_from(&big_h);
        kkt.view_mut((n, 0), (1, n)).copy_from(&e);
        kkt.view_mut((0, n), (n, 1)).copy_from(&e.transpose());
        let mut rhs = DVector::zeros(n + 1);
        rhs.rows_mut(0, n).copy_from(&(-&big_q));
        let sol = kkt.lu().solve(&rhs).unwrap();
        let z_star = sol.rows(0, n).into_owned();

        let init = zero_state(&qps, &coupling);
        let cfg = AdmmConfig {
            rho: 1.0,
            l_max: 5000,
            kkt_tol: Some(1e-7),
            ..AdmmConfig::default()
        };
        let (state, _) = admm_solve(&qps, &coupling, &init, &cfg).unwrap();
        let zbar = state.stacked_z_bar(&coupling);
        assert!((zbar - z_star).amax() <= 1e-4);
    }

    #[test]
    fn dual_condition_preserved_along_iterations() {
        let (qps, coupling) = two_scalar_problem();
        let init = zero_state(&qps, &coupling);
        let cfg = AdmmConfig {
            rho: 2.0,
            l_max: 50,
            kkt_tol: None,
            ..AdmmConfig::default()
        };
        let (state, _) = admm_solve(&qps, &coupling, &init, &cfg).unwrap();
        let gamma = state.stacked_gamma(&coupling);
        assert!(coupling.check_dual_condition(&gamma, 1e-10));
        // members of each group carry the bitwise-identical averaged value
        let zbar = state.stacked_z_bar(&coupling);
        for group in coupling.groups() {
            for &m in group {
                assert_eq!(zbar[m], zbar[group[0]]);
            }
        }
    }

    #[test]
    fn bad_dual_init_is_rejected() {
        let (qps, coupling) = two_scalar_problem();
        let mut init = zero_state(&qps, &coupling);
        init.gamma[0][0] = 1.0;
        init.gamma[1][0] = 1.0; // group mean 1 != 0
        let cfg = AdmmConfig::default();
        assert!(matches!(
            admm_solve(&qps, &coupling, &init, &cfg),
            Err(AdmmError::InvalidInit(_))
        ));
    }

    #[test]
    fn uncoupled_subsystem_converges_at_first_check() {
        // no coupling: consensus trivially satisfied, inner solve does the work
        let qp = QpData::unconstrained(CsrMatrix::identity(2), dvec(&[1.0, -2.0])).unwrap();
        let coupling = ConsensusCoupling::new(&[2], &[]).unwrap();
        let init = zero_state(&[qp.clone()], &coupling);
        let cfg = AdmmConfig {
            rho: 0.1,
            l_max: 1000,
            kkt_tol: Some(1e-3),
            kkt_check_period: 10,
            ..AdmmConfig::default()
        };
        let (state, stats) = admm_solve(&[qp], &coupling, &init, &cfg).unwrap();
        assert!(stats.iterations_run <= 10, "one check period suffices");
        assert_relative_eq!(state.z[0][0], -1.0, epsilon = 1e-4);
        assert_relative_eq!(state.z[0][1], 2.0, epsilon = 1e-4);
    }

    #[test]
    fn nlp_residual_matches_qp_residual_on_quadratics() {
        let (qps, coupling) = two_scalar_problem();
        let init = zero_state(&qps, &coupling);
        let cfg = AdmmConfig {
            rho: 1.0,
            l_max: 37,
            kkt_tol: None,
            ..AdmmConfig::default()
        };
        let (state, _) = admm_solve(&qps, &coupling, &init, &cfg).unwrap();
        let r_qp = qp_residual(&qps, &coupling, &state);
        let subs: Vec<Box<dyn crate::problem::SubsystemModel>> = qps
            .iter()
            .map(|q| Box::new(QuadraticSubsystem::new(q.clone())) as Box<dyn crate::problem::SubsystemModel>)
            .collect();
        let nlp = PartialNlp::new(subs, coupling).unwrap();
        let r_nlp = kkt_residual(&nlp, &state).unwrap();
        assert_relative_eq!(r_qp, r_nlp, epsilon = 1e-12);
    }

    #[test]
    fn exact_kkt_point_has_zero_residual() {
        // min 0.5(z-2)^2 -> z*=2, no constraints, gamma 0
        let qp = QpData::unconstrained(CsrMatrix::identity(1), dvec(&[-2.0])).unwrap();
        let coupling = ConsensusCoupling::new(&[1], &[]).unwrap();
        let mut state = zero_state(&[qp.clone()], &coupling);
        state.z[0][0] = 2.0;
        let subs: Vec<Box<dyn crate::problem::SubsystemModel>> =
            vec![Box::new(QuadraticSubsystem::new(qp))];
        let nlp = PartialNlp::new(subs, coupling).unwrap();
        assert!(kkt_residual(&nlp, &state).unwrap() <= 1e-12);
    }

    #[test]
    fn residual_reduces_to_gradient_norm_with_zero_duals() {
        // feasible primal, zero duals, nonzero gradient
        let qp = QpData::unconstrained(CsrMatrix::identity(2), dvec(&[0.3, -0.8])).unwrap();
        let coupling = ConsensusCoupling::new(&[2], &[]).unwrap();
        let state = zero_state(&[qp.clone()], &coupling);
        let subs: Vec<Box<dyn crate::problem::SubsystemModel>> =
            vec![Box::new(QuadraticSubsystem::new(qp))];
        let nlp = PartialNlp::new(subs, coupling).unwrap();
        let r = kkt_residual(&nlp, &state).unwrap();
        assert_relative_eq!(r, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn residual_is_lipschitz_near_a_solution() {
        use rand::{Rng, SeedableRng};
        // perturbation of size 1e-3 changes r by at most L * 1e-3 with L
        // estimated by finite differences along the same direction
        let qp = QpData::unconstrained(
            CsrMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])),
            dvec(&[-1.0, 0.5]),
        )
        .unwrap();
        let coupling = ConsensusCoupling::new(&[2], &[]).unwrap();
        // exact solution of Hz = -q
        let h = qp.h.to_dense();
        let z_star = h.clone().lu().solve(&(-&qp.q)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let dir = DVector::from_fn(2, |_, _| rng.gen_range(-1.0f64..1.0)).normalize();
        let subs: Vec<Box<dyn crate::problem::SubsystemModel>> =
            vec![Box::new(QuadraticSubsystem::new(qp))];
        let nlp = PartialNlp::new(subs, coupling.clone()).unwrap();
        let r_at = |z: DVector<f64>| {
            let mut state = IterateState::zeros_for_dims(&[2], &[0], &[0]);
            state.z[0] = z;
            kkt_residual(&nlp, &state).unwrap()
        };
        let h_fd = 1e-6;
        let lipschitz = (r_at(&z_star + &dir * h_fd) - r_at(z_star.clone())) / h_fd;
        let r_pert = r_at(&z_star + &dir * 1e-3);
        assert!(r_pert <= lipschitz * 1e-3 * 1.5 + 1e-9);
    }
}
