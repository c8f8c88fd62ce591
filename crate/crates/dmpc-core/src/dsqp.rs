//! Bi-level decentralized SQP: outer constraint linearization with a
//! Gauss-Newton Hessian, inner consensus ADMM on the resulting convex QP, and
//! the real-time control-step driver with warm starting.
//!
//! The inner QP is posed in step coordinates d = z - z_k. Because every outer
//! iterate is the averaged output of the previous inner run, the step problem
//! starts from a consensus-feasible d_bar = 0 and the carried duals satisfy
//! the averaging condition unchanged.

use nalgebra::DVector;
use rayon::prelude::*;
use thiserror::Error;

use crate::admm::{admm_solve, kkt_residual, AdmmConfig, AdmmError};
use crate::problem::{IterateState, PartialNlp, SubsystemModel};
use crate::qp::QpData;
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone)]
pub struct DsqpConfig {
    /// Outer SQP iterations per solve.
    pub k_max: usize,
    /// Inner ADMM iterations per outer iteration.
    pub l_max: usize,
    /// Consensus penalty parameter.
    pub rho: f64,
    /// Optional outer early termination on the NLP KKT residual.
    pub kkt_tol: Option<f64>,
    /// Use the exact Lagrangian Hessian instead of Gauss-Newton.
    pub exact_hessian: bool,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
}

impl Default for DsqpConfig {
    fn default() -> Self {
        Self {
            k_max: 1,
            l_max: 10,
            rho: 1.0,
            kkt_tol: None,
            exact_hessian: false,
            inner_tol: 1e-6,
            inner_max_iter: 4000,
        }
    }
}

/// Warm-start state carried across control steps: primal and consensus-dual
/// iterates plus the local multipliers from the latest subsystem solves.
#[derive(Debug, Clone)]
pub struct RtiState {
    pub z: Vec<DVector<f64>>,
    pub gamma: Vec<DVector<f64>>,
    pub nu: Vec<DVector<f64>>,
    pub mu: Vec<DVector<f64>>,
    pub step_index: usize,
    /// Set when the optimizer failed during the last control step and the
    /// previous input was held.
    pub degraded: bool,
}

impl RtiState {
    pub fn cold_start(nlp: &PartialNlp) -> Self {
        let it = IterateState::zeros(nlp);
        Self {
            z: it.z,
            gamma: it.gamma,
            nu: it.nu,
            mu: it.mu,
            step_index: 0,
            degraded: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DsqpStats {
    pub outer_iterations: usize,
    /// (outer iteration, NLP KKT residual) at each outer check.
    pub kkt_history: Vec<(usize, f64)>,
    /// Total inner ADMM iterations over all outer iterations.
    pub inner_iterations_total: usize,
    pub per_outer_time_s: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum DsqpError {
    #[error("evaluator returned a non-finite value during linearization")]
    NonFiniteLinearization,
    #[error("inner solver failed at outer iteration {outer}: {source}")]
    Inner {
        outer: usize,
        #[source]
        source: AdmmError,
    },
    #[error("invalid initialization: {0}")]
    InvalidInit(String),
    #[error("exact Hessian requested but the model does not provide one")]
    ExactHessianUnavailable,
    #[error("problem has no input map; cannot extract a control")]
    MissingInputMap,
}

/// Linearizes one subsystem at `z_k` into a convex QP in step coordinates
/// d = z - z_k: Gauss-Newton Hessian, gradient of f, equalities
/// Jg d = -g and inequalities Jh d <= -h.
pub fn linearize(sub: &dyn SubsystemModel, z_k: &DVector<f64>) -> Result<QpData, DsqpError> {
    let h = sub.gauss_newton_hessian(z_k);
    linearize_with_hessian(sub, z_k, CsrMatrix::from_dense(&h))
}

fn linearize_with_hessian(
    sub: &dyn SubsystemModel,
    z_k: &DVector<f64>,
    h: CsrMatrix,
) -> Result<QpData, DsqpError> {
    let q = sub.objective_gradient(z_k);
    let (a_eq, b_eq) = if sub.num_eq() > 0 {
        (
            CsrMatrix::from_dense(&sub.eq_jacobian(z_k)),
            -sub.eq_constraints(z_k),
        )
    } else {
        (CsrMatrix::zeros(0, sub.dim()), DVector::zeros(0))
    };
    let (a_ineq, b_ineq) = if sub.num_ineq() > 0 {
        (
            CsrMatrix::from_dense(&sub.ineq_jacobian(z_k)),
            -sub.ineq_constraints(z_k),
        )
    } else {
        (CsrMatrix::zeros(0, sub.dim()), DVector::zeros(0))
    };
    let finite = q.iter().all(|v| v.is_finite())
        && b_eq.iter().all(|v| v.is_finite())
        && b_ineq.iter().all(|v| v.is_finite())
        && h.values().iter().all(|v| v.is_finite())
        && a_eq.values().iter().all(|v| v.is_finite())
        && a_ineq.values().iter().all(|v| v.is_finite());
    if !finite {
        return Err(DsqpError::NonFiniteLinearization);
    }
    QpData::new(h, q, a_eq, b_eq, a_ineq, b_ineq).map_err(|_| DsqpError::NonFiniteLinearization)
}

/// Runs k_max outer iterations of decentralized SQP on the problem, each
/// building the step QP at the current iterate and solving it with l_max
/// inner ADMM iterations initialized from the carried duals.
pub fn dsqp_solve(
    nlp: &PartialNlp,
    init: &RtiState,
    cfg: &DsqpConfig,
) -> Result<(RtiState, DsqpStats), DsqpError> {
    assert!(cfg.k_max >= 1, "k_max must be at least 1");
    assert!(cfg.l_max >= 1, "l_max must be at least 1");
    let coupling = nlp.coupling();
    let gamma_stacked = coupling.stack(&init.gamma);
    if !coupling.check_dual_condition(&gamma_stacked, 1e-8) {
        return Err(DsqpError::InvalidInit(
            "gamma violates the dual initialization condition".into(),
        ));
    }
    let mut state = init.clone();
    let mut stats = DsqpStats::default();
    let admm_cfg = AdmmConfig {
        rho: cfg.rho,
        l_max: cfg.l_max,
        kkt_tol: None,
        inner_tol: cfg.inner_tol,
        inner_max_iter: cfg.inner_max_iter,
        ..AdmmConfig::default()
    };
    for k in 0..cfg.k_max {
        let started = std::time::Instant::now();
        // derivative evaluation in parallel across subsystems
        let qps: Vec<QpData> = nlp
            .subsystems()
            .par_iter()
            .enumerate()
            .map(|(i, sub)| {
                if cfg.exact_hessian {
                    let h = sub
                        .lagrangian_hessian(&state.z[i], &state.nu[i], &state.mu[i])
                        .ok_or(DsqpError::ExactHessianUnavailable)?;
                    linearize_with_hessian(sub.as_ref(), &state.z[i], CsrMatrix::from_dense(&h))
                } else {
                    linearize(sub.as_ref(), &state.z[i])
                }
            })
            .collect::<Result<_, _>>()?;
        // inner ADMM in step coordinates: d_bar starts at 0 (consensus
        // feasible because the outer iterate is an averaged output)
        let inner_init = IterateState {
            z: state.z.iter().map(|zi| DVector::zeros(zi.len())).collect(),
            z_bar: state.z.iter().map(|zi| DVector::zeros(zi.len())).collect(),
            gamma: state.gamma.clone(),
            nu: state.nu.clone(),
            mu: state.mu.clone(),
        };
        let (inner_out, inner_stats) = admm_solve(&qps, coupling, &inner_init, &admm_cfg)
            .map_err(|source| DsqpError::Inner { outer: k, source })?;
        stats.inner_iterations_total += inner_stats.iterations_run;
        // outer update: averaged step output, carried duals
        let local_abs: Vec<DVector<f64>> = state
            .z
            .iter()
            .zip(&inner_out.z)
            .map(|(zk, d)| zk + d)
            .collect();
        state.z = state
            .z
            .iter()
            .zip(&inner_out.z_bar)
            .map(|(zk, d)| zk + d)
            .collect();
        state.gamma = inner_out.gamma;
        state.nu = inner_out.nu;
        state.mu = inner_out.mu;
        stats.outer_iterations = k + 1;
        stats.per_outer_time_s.push(started.elapsed().as_secs_f64());
        if let Some(tol) = cfg.kkt_tol {
            // residual at the local primals where the multipliers certify the
            // linearized constraints; coupling term from the same points
            let probe = IterateState {
                z: local_abs,
                z_bar: state.z.clone(),
                gamma: state.gamma.clone(),
                nu: state.nu.clone(),
                mu: state.mu.clone(),
            };
            let r = kkt_residual(nlp, &probe).map_err(|source| DsqpError::Inner {
                outer: k,
                source,
            })?;
            stats.kkt_history.push((k + 1, r));
            if r <= tol {
                break;
            }
        }
    }
    Ok((state, stats))
}

/// Extracts the first predicted input of every subsystem, clamped to its box.
pub fn extract_first_input(
    nlp: &PartialNlp,
    z: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>, DsqpError> {
    let map = nlp.input_map().ok_or(DsqpError::MissingInputMap)?;
    let mut out = Vec::with_capacity(map.indices.len());
    for (i, idx) in map.indices.iter().enumerate() {
        let mut u = DVector::zeros(idx.len());
        for (j, &col) in idx.iter().enumerate() {
            u[j] = z[i][col].clamp(map.lower[i][j], map.upper[i][j]);
        }
        out.push(u);
    }
    Ok(out)
}

/// One real-time iteration: k_max SQP iterations with l_max ADMM iterations
/// each, warm-started from `state`, returning the first predicted input and
/// the new warm-start state (no horizon shifting).
///
/// On an inner failure the controller keeps the previous solution, returns
/// its first input, and flags the state as degraded.
pub fn rti_control_step(
    nlp_t: &PartialNlp,
    state: &RtiState,
    cfg: &DsqpConfig,
) -> Result<(Vec<DVector<f64>>, RtiState), DsqpError> {
    if cfg.l_max == 0 || cfg.k_max == 0 {
        // zero-iteration budget: apply the warm start's first input unchanged
        let u0 = extract_first_input(nlp_t, &state.z)?;
        let mut next = state.clone();
        next.step_index += 1;
        next.degraded = false;
        return Ok((u0, next));
    }
    match dsqp_solve(nlp_t, state, cfg) {
        Ok((mut next, _stats)) => {
            let u0 = extract_first_input(nlp_t, &next.z)?;
            next.step_index = state.step_index + 1;
            next.degraded = false;
            Ok((u0, next))
        }
        Err(DsqpError::MissingInputMap) => Err(DsqpError::MissingInputMap),
        Err(_) => {
            let u0 = extract_first_input(nlp_t, &state.z)?;
            let mut next = state.clone();
            next.step_index += 1;
            next.degraded = true;
            Ok((u0, next))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{ConsensusCoupling, ConsensusPair, InputMap, VarRef};
    use crate::qp::{QpData, QuadraticSubsystem};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    /// min 0.5 (z-2)^2 subject to z^2 = 1.
    struct ScalarConstrained;

    impl SubsystemModel for ScalarConstrained {
        fn dim(&self) -> usize {
            1
        }
        fn num_eq(&self) -> usize {
            1
        }
        fn num_ineq(&self) -> usize {
            0
        }
        fn objective(&self, z: &DVector<f64>) -> f64 {
            0.5 * (z[0] - 2.0).powi(2)
        }
        fn objective_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
            dvec(&[z[0] - 2.0])
        }
        fn gauss_newton_hessian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 1.0)
        }
        fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
            dvec(&[z[0] * z[0] - 1.0])
        }
        fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 2.0 * z[0])
        }
        fn ineq_constraints(&self, _z: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(0)
        }
        fn ineq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::zeros(0, 1)
        }
    }

    #[test]
    fn linearize_hand_example() {
        // g(z) = z^2 - 1 at z_k = 2: equality 4 d + 3 = 0 -> d = -0.75
        let sub = ScalarConstrained;
        let qp = linearize(&sub, &dvec(&[2.0])).unwrap();
        assert_relative_eq!(qp.a_eq.to_dense()[(0, 0)], 4.0);
        assert_relative_eq!(qp.b_eq[0], -3.0);
        let d = qp.b_eq[0] / qp.a_eq.to_dense()[(0, 0)];
        assert_relative_eq!(d, -0.75);
    }

    #[test]
    fn gauss_newton_hessian_constant_for_quadratics() {
        let qp = QpData::unconstrained(
            crate::sparse::CsrMatrix::from_diagonal(&[3.0, 0.5]),
            dvec(&[1.0, -1.0]),
        )
        .unwrap();
        let sub = QuadraticSubsystem::new(qp);
        let h1 = sub.gauss_newton_hessian(&dvec(&[0.0, 0.0]));
        let h2 = sub.gauss_newton_hessian(&dvec(&[17.0, -3.0]));
        assert_eq!(h1, h2);
    }

    fn coupled_qp_nlp() -> (PartialNlp, DVector<f64>) {
        // two subsystems, one consensus pair; oracle by dense stacked KKT
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut qps = Vec::new();
        for _ in 0..2 {
            let m = DMatrix::<f64>::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
            let h = &m * m.transpose() + DMatrix::identity(2, 2);
            let q = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            qps.push(
                QpData::new(
                    crate::sparse::CsrMatrix::from_dense(&h),
                    q,
                    crate::sparse::CsrMatrix::zeros(0, 2),
                    DVector::zeros(0),
                    crate::sparse::CsrMatrix::zeros(0, 2),
                    DVector::zeros(0),
                )
                .unwrap(),
            );
        }
        let coupling = ConsensusCoupling::new(
            &[2, 2],
            &[ConsensusPair {
                copy: VarRef::new(1, 0),
                original: VarRef::new(0, 1),
            }],
        )
        .unwrap();
        let n = 4;
        let mut big_h = DMatrix::zeros(n, n);
        big_h
            .view_mut((0, 0), (2, 2))
            .copy_from(&qps[0].h.to_dense());
        big_h
            .view_mut((2, 2), (2, 2))
            .copy_from(&qps[1].h.to_dense());
        let mut big_q = DVector::zeros(n);
        big_q.rows_mut(0, 2).copy_from(&qps[0].q);
        big_q.rows_mut(2, 2).copy_from(&qps[1].q);
        let e = coupling.assemble_e();
        let mut kkt = DMatrix::zeros(n + 1, n + 1);
        kkt.view_mut((0, 0), (n, n)).copy_from(&big_h);
        kkt.view_mut((n, 0), (1, n)).copy_from(&e);
        kkt.view_mut((0, n), (n, 1)).copy_from(&e.transpose());
        let mut rhs = DVector::zeros(n + 1);
        rhs.rows_mut(0, n).copy_from(&(-&big_q));
        let sol = kkt.lu().solve(&rhs).unwrap();
        let z_star = sol.rows(0, n).into_owned();
        let subs: Vec<Box<dyn SubsystemModel>> = qps
            .into_iter()
            .map(|q| Box::new(QuadraticSubsystem::new(q)) as Box<dyn SubsystemModel>)
            .collect();
        (PartialNlp::new(subs, coupling).unwrap(), z_star)
    }

    #[test]
    fn one_outer_iteration_is_exact_on_qps() {
        let (nlp, z_star) = coupled_qp_nlp();
        let init = RtiState::cold_start(&nlp);
        let cfg = DsqpConfig {
            k_max: 1,
            l_max: 10_000,
            rho: 1.0,
            inner_tol: 1e-9,
            ..DsqpConfig::default()
        };
        let (out, stats) = dsqp_solve(&nlp, &init, &cfg).unwrap();
        assert_eq!(stats.outer_iterations, 1);
        let z = nlp.coupling().stack(&out.z);
        assert!((z - z_star).amax() <= 1e-4);
    }

    #[test]
    fn scalar_nlp_converges_in_six_outer_iterations() {
        // Newton on the KKT system of min 0.5(z-2)^2 s.t. z^2 = 1 confirms the
        // solution z* = 1 (stationarity (z-2) + 2 z nu = 0 -> nu* = 0.5)
        let mut z = 0.5f64;
        let mut nu = 0.0f64;
        for _ in 0..50 {
            let r1 = (z - 2.0) + 2.0 * z * nu;
            let r2 = z * z - 1.0;
            let j11 = 1.0 + 2.0 * nu;
            let j12 = 2.0 * z;
            // solve [[j11, j12],[j12, 0]] [dz, dnu] = -[r1, r2]
            let dz = -r2 / j12;
            let dnu = (-r1 - j11 * dz) / j12;
            z += dz;
            nu += dnu;
        }
        assert_relative_eq!(z, 1.0, epsilon = 1e-12);
        assert_relative_eq!(nu, 0.5, epsilon = 1e-12);

        let subs: Vec<Box<dyn SubsystemModel>> = vec![Box::new(ScalarConstrained)];
        let coupling = ConsensusCoupling::new(&[1], &[]).unwrap();
        let nlp = PartialNlp::new(subs, coupling).unwrap();
        let mut init = RtiState::cold_start(&nlp);
        init.z[0][0] = 0.5;
        let cfg = DsqpConfig {
            k_max: 6,
            l_max: 5,
            rho: 1.0,
            kkt_tol: Some(1e-8),
            inner_tol: 1e-11,
            ..DsqpConfig::default()
        };
        let (out, stats) = dsqp_solve(&nlp, &init, &cfg).unwrap();
        assert_relative_eq!(out.z[0][0], 1.0, epsilon = 1e-7);
        let (_, r) = *stats.kkt_history.last().unwrap();
        assert!(r <= 1e-8, "final residual {r}");
    }

    #[test]
    fn budget_is_exactly_kmax_times_lmax() {
        let (nlp, _) = coupled_qp_nlp();
        let init = RtiState::cold_start(&nlp);
        let cfg = DsqpConfig {
            k_max: 3,
            l_max: 7,
            rho: 1.0,
            ..DsqpConfig::default()
        };
        let (_, stats) = dsqp_solve(&nlp, &init, &cfg).unwrap();
        assert_eq!(stats.inner_iterations_total, 21);
    }

    #[test]
    fn control_step_extracts_clamped_input() {
        // min (u - 1)^2 s.t. u <= 0.3: optimizer lands at the bound up to
        // tolerance, extraction clamps exactly
        let h = crate::sparse::CsrMatrix::from_diagonal(&[2.0]);
        let ai = crate::sparse::CsrMatrix::from_triplets(1, 1, &[(0, 0, 1.0)]);
        let qp = QpData::new(
            h,
            dvec(&[-2.0]),
            crate::sparse::CsrMatrix::zeros(0, 1),
            DVector::zeros(0),
            ai,
            dvec(&[0.3]),
        )
        .unwrap();
        let subs: Vec<Box<dyn SubsystemModel>> = vec![Box::new(QuadraticSubsystem::new(qp))];
        let coupling = ConsensusCoupling::new(&[1], &[]).unwrap();
        let nlp = PartialNlp::new(subs, coupling)
            .unwrap()
            .with_input_map(InputMap {
                indices: vec![vec![0]],
                lower: vec![dvec(&[-0.3])],
                upper: vec![dvec(&[0.3])],
            });
        let state = RtiState::cold_start(&nlp);
        let cfg = DsqpConfig {
            k_max: 1,
            l_max: 50,
            rho: 1.0,
            ..DsqpConfig::default()
        };
        let (u0, next) = rti_control_step(&nlp, &state, &cfg).unwrap();
        assert!(u0[0][0] <= 0.3);
        assert!((u0[0][0] - 0.3).abs() <= 1e-4);
        assert!(!next.degraded);
        assert_eq!(next.step_index, 1);
    }

    #[test]
    fn zero_budget_holds_previous_input() {
        let (nlp, _) = coupled_qp_nlp();
        let nlp = nlp.with_input_map(InputMap {
            indices: vec![vec![0], vec![1]],
            lower: vec![dvec(&[-10.0]), dvec(&[-10.0])],
            upper: vec![dvec(&[10.0]), dvec(&[10.0])],
        });
        let mut state = RtiState::cold_start(&nlp);
        state.z[0][0] = 0.25;
        let cfg = DsqpConfig {
            k_max: 1,
            l_max: 0,
            ..DsqpConfig::default()
        };
        let (u0, next) = rti_control_step(&nlp, &state, &cfg).unwrap();
        assert_eq!(u0[0][0], 0.25);
        assert_eq!(next.z[0][0], 0.25);
        assert_eq!(next.step_index, 1);
    }

    #[test]
    fn equilibrium_fixed_point_stays_at_origin() {
        // feasible unconstrained minimum at the origin: the control step must
        // return exactly zero and leave the iterate at the fixed point
        let qp = QpData::unconstrained(crate::sparse::CsrMatrix::identity(2), DVector::zeros(2))
            .unwrap();
        let subs: Vec<Box<dyn SubsystemModel>> = vec![Box::new(QuadraticSubsystem::new(qp))];
        let coupling = ConsensusCoupling::new(&[2], &[]).unwrap();
        let nlp = PartialNlp::new(subs, coupling)
            .unwrap()
            .with_input_map(InputMap {
                indices: vec![vec![1]],
                lower: vec![dvec(&[-1.0])],
                upper: vec![dvec(&[1.0])],
            });
        let state = RtiState::cold_start(&nlp);
        let cfg = DsqpConfig {
            k_max: 2,
            l_max: 5,
            rho: 1.0,
            ..DsqpConfig::default()
        };
        let (u0, next) = rti_control_step(&nlp, &state, &cfg).unwrap();
        assert_eq!(u0[0][0], 0.0);
        assert_eq!(next.z[0][0], 0.0);
        assert_eq!(next.z[0][1], 0.0);
    }
}
