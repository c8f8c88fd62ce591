//! Convex QP engine for the subsystem subproblems and the stacked reference
//! solves.
//!
//! The method is operator splitting with over-relaxation: the iteration
//! alternates a linear solve with the cached factorization of
//! P + sigma*I + A' R A, a projection onto the constraint interval, and a dual
//! ascent step. Equality rows get a stiffer penalty than inequality rows, the
//! problem data is Ruiz-equilibrated once at setup, and convergence is
//! declared on the full unscaled KKT residual, checked periodically. A
//! Schur-complement polish step refines candidate active sets to high
//! accuracy, which is what the centralized reference solver relies on.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::sparse::{CsrMatrix, EnvelopeChol, FactorError};

/// One subsystem's convex QP:
/// minimize 1/2 z'Hz + q'z  s.t.  Aeq z = beq,  Aineq z <= bineq.
#[derive(Debug, Clone)]
pub struct QpData {
    pub h: CsrMatrix,
    pub q: DVector<f64>,
    pub a_eq: CsrMatrix,
    pub b_eq: DVector<f64>,
    pub a_ineq: CsrMatrix,
    pub b_ineq: DVector<f64>,
}

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Hessian is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("Hessian is not positive semidefinite within tolerance")]
    NotPsd,
    #[error("factorization failed: {0}")]
    Factorization(#[from] FactorError),
}

impl QpData {
    pub fn new(
        h: CsrMatrix,
        q: DVector<f64>,
        a_eq: CsrMatrix,
        b_eq: DVector<f64>,
        a_ineq: CsrMatrix,
        b_ineq: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = q.len();
        if h.nrows() != n || h.ncols() != n {
            return Err(QpError::Dimension(format!(
                "H is {}x{}, expected {n}x{n}",
                h.nrows(),
                h.ncols()
            )));
        }
        if a_eq.ncols() != n || a_eq.nrows() != b_eq.len() {
            return Err(QpError::Dimension("equality block shape".into()));
        }
        if a_ineq.ncols() != n || a_ineq.nrows() != b_ineq.len() {
            return Err(QpError::Dimension("inequality block shape".into()));
        }
        Ok(Self {
            h,
            q,
            a_eq,
            b_eq,
            a_ineq,
            b_ineq,
        })
    }

    pub fn unconstrained(h: CsrMatrix, q: DVector<f64>) -> Result<Self, QpError> {
        let n = q.len();
        Self::new(
            h,
            q,
            CsrMatrix::zeros(0, n),
            DVector::zeros(0),
            CsrMatrix::zeros(0, n),
            DVector::zeros(0),
        )
    }

    pub fn from_dense(
        h: &DMatrix<f64>,
        q: &DVector<f64>,
        a_eq: &DMatrix<f64>,
        b_eq: &DVector<f64>,
        a_ineq: &DMatrix<f64>,
        b_ineq: &DVector<f64>,
    ) -> Result<Self, QpError> {
        Self::new(
            CsrMatrix::from_dense(h),
            q.clone(),
            CsrMatrix::from_dense(a_eq),
            b_eq.clone(),
            CsrMatrix::from_dense(a_ineq),
            b_ineq.clone(),
        )
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn num_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn num_ineq(&self) -> usize {
        self.b_ineq.len()
    }

    /// Checks symmetry (1e-12) and positive semidefiniteness (eigenvalues
    /// >= -1e-10, certified by a shifted Cholesky attempt).
    pub fn validate(&self) -> Result<(), QpError> {
        let ht = self.h.transpose();
        let mut asym = 0.0f64;
        let d = self.h.to_dense();
        let dt = ht.to_dense();
        for r in 0..d.nrows() {
            for c in 0..d.ncols() {
                asym = asym.max((d[(r, c)] - dt[(r, c)]).abs());
            }
        }
        if asym > 1e-12 {
            return Err(QpError::NotSymmetric(asym));
        }
        let mut shifted = self.h.clone();
        let n = self.n();
        let eye = CsrMatrix::from_diagonal(&vec![1.0000001e-10; n]);
        shifted = add_sparse(&shifted, &eye);
        match EnvelopeChol::new(&shifted) {
            Ok(_) => Ok(()),
            Err(_) => Err(QpError::NotPsd),
        }
    }
}

fn add_sparse(a: &CsrMatrix, b: &CsrMatrix) -> CsrMatrix {
    let mut trips = Vec::with_capacity(a.nnz() + b.nnz());
    for r in 0..a.nrows() {
        let (cols, vals) = a.row(r);
        for (c, v) in cols.iter().zip(vals) {
            trips.push((r, *c, *v));
        }
    }
    for r in 0..b.nrows() {
        let (cols, vals) = b.row(r);
        for (c, v) in cols.iter().zip(vals) {
            trips.push((r, *c, *v));
        }
    }
    CsrMatrix::from_triplets(a.nrows(), a.ncols(), &trips)
}

/// Builds one subsystem's augmented subproblem for the consensus penalty:
/// Hessian H + rho*I, gradient q + gamma - rho*z_bar, constraints unchanged.
pub fn build_local_subproblem(
    qp: &QpData,
    z_bar: &DVector<f64>,
    gamma: &DVector<f64>,
    rho: f64,
) -> Result<QpData, QpError> {
    assert!(rho > 0.0, "rho must be positive");
    let n = qp.n();
    if z_bar.len() != n || gamma.len() != n {
        return Err(QpError::Dimension(format!(
            "z_bar/gamma length {} / {}, expected {n}",
            z_bar.len(),
            gamma.len()
        )));
    }
    let h = add_sparse(&qp.h, &CsrMatrix::from_diagonal(&vec![rho; n]));
    let q = &qp.q + gamma - z_bar * rho;
    Ok(QpData {
        h,
        q,
        a_eq: qp.a_eq.clone(),
        b_eq: qp.b_eq.clone(),
        a_ineq: qp.a_ineq.clone(),
        b_ineq: qp.b_ineq.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub nu: DVector<f64>,
    pub mu: DVector<f64>,
    pub status: QpStatus,
    pub kkt: f64,
    pub iterations: usize,
}

/// Breakdown of the KKT residual terms; `max()` is the reported residual.
#[derive(Debug, Clone, Copy)]
pub struct KktBreakdown {
    pub stationarity: f64,
    pub eq_feasibility: f64,
    pub ineq_feasibility: f64,
    pub dual_feasibility: f64,
    pub complementarity: f64,
}

impl KktBreakdown {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.eq_feasibility)
            .max(self.ineq_feasibility)
            .max(self.dual_feasibility)
            .max(self.complementarity)
    }
}

/// Full KKT residual of a candidate primal/dual triple for `data`.
pub fn qp_kkt_breakdown(
    data: &QpData,
    z: &DVector<f64>,
    nu: &DVector<f64>,
    mu: &DVector<f64>,
) -> KktBreakdown {
    let mut grad = data.h.mul_vec(z) + &data.q;
    if data.num_eq() > 0 {
        grad += data.a_eq.mul_transpose_vec(nu);
    }
    if data.num_ineq() > 0 {
        grad += data.a_ineq.mul_transpose_vec(mu);
    }
    let stationarity = grad.amax();
    let eq_feasibility = if data.num_eq() > 0 {
        (data.a_eq.mul_vec(z) - &data.b_eq).amax()
    } else {
        0.0
    };
    let (ineq_feasibility, dual_feasibility, complementarity) = if data.num_ineq() > 0 {
        let slack = data.a_ineq.mul_vec(z) - &data.b_ineq;
        let viol = slack.iter().fold(0.0f64, |m, &s| m.max(s.max(0.0)));
        let dual = mu.iter().fold(0.0f64, |m, &v| m.max((-v).max(0.0)));
        let compl = slack
            .iter()
            .zip(mu.iter())
            .fold(0.0f64, |m, (&s, &u)| m.max((s * u).abs()));
        (viol, dual, compl)
    } else {
        (0.0, 0.0, 0.0)
    };
    KktBreakdown {
        stationarity,
        eq_feasibility,
        ineq_feasibility,
        dual_feasibility,
        complementarity,
    }
}

/// Solver settings; defaults match the inner subproblem role.
#[derive(Debug, Clone)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub rho: f64,
    pub rho_eq_scale: f64,
    pub check_period: usize,
    pub scaling_iters: usize,
    pub adaptive_rho: bool,
    pub adapt_period: usize,
    /// Try a Schur polish when a check lands below `polish_trigger`.
    pub polish: bool,
    pub polish_trigger: f64,
    pub max_polish_attempts: usize,
    /// Attempt an equality-only direct solve before iterating; pays off when
    /// no inequality is active, as in the stacked reference solves.
    pub direct_equality_first: bool,
    pub infeasibility_tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 4000,
            sigma: 1e-6,
            alpha: 1.6,
            rho: 0.1,
            rho_eq_scale: 1e3,
            check_period: 25,
            scaling_iters: 10,
            adaptive_rho: true,
            adapt_period: 100,
            polish: true,
            polish_trigger: 1e-3,
            max_polish_attempts: 10,
            direct_equality_first: false,
            infeasibility_tol: 1e-7,
        }
    }
}

impl QpSettings {
    /// High-accuracy profile used by the centralized reference solver.
    pub fn oracle(tol: f64) -> Self {
        Self {
            tol,
            max_iter: 20_000,
            polish: true,
            polish_trigger: 1e-2,
            direct_equality_first: true,
            ..Self::default()
        }
    }
}

/// Operator-splitting QP solver with a cached factorization.
///
/// The constraint matrices are fixed at construction; the linear cost may be
/// updated between solves, which is what the consensus iteration exploits.
pub struct QpSolver {
    data: QpData,
    settings: QpSettings,
    // scaled data
    p_s: CsrMatrix,
    c_s: CsrMatrix,
    q_s: DVector<f64>,
    l_s: DVector<f64>,
    u_s: DVector<f64>,
    d_scale: DVector<f64>,
    e_scale: DVector<f64>,
    cost_scale: f64,
    rho_vec: Vec<f64>,
    rho_bar: f64,
    chol: Option<EnvelopeChol>,
    // iterates (scaled)
    x: DVector<f64>,
    y: DVector<f64>,
    zc: DVector<f64>,
}

impl QpSolver {
    pub fn new(data: QpData, settings: QpSettings) -> Result<Self, QpError> {
        let n = data.n();
        let m = data.num_eq() + data.num_ineq();
        let c = data.a_eq.vstack(&data.a_ineq);
        let mut l = DVector::from_element(m, f64::NEG_INFINITY);
        let mut u = DVector::zeros(m);
        for i in 0..data.num_eq() {
            l[i] = data.b_eq[i];
            u[i] = data.b_eq[i];
        }
        for i in 0..data.num_ineq() {
            u[data.num_eq() + i] = data.b_ineq[i];
        }

        // Ruiz equilibration of [[P, C'], [C, 0]] plus cost normalization.
        let mut p_s = data.h.clone();
        let mut c_s = c;
        let mut q_s = data.q.clone();
        let mut d_scale = DVector::from_element(n, 1.0);
        let mut e_scale = DVector::from_element(m, 1.0);
        let mut cost_scale = 1.0f64;
        for _ in 0..settings.scaling_iters {
            let p_cols = p_s.col_inf_norms();
            let c_cols = c_s.col_inf_norms();
            let mut dx = vec![1.0f64; n];
            for j in 0..n {
                let norm = p_cols[j].max(c_cols[j]);
                if norm > 0.0 {
                    dx[j] = 1.0 / norm.sqrt();
                }
            }
            let c_rows = c_s.row_inf_norms();
            let mut de = vec![1.0f64; m];
            for k in 0..m {
                if c_rows[k] > 0.0 {
                    de[k] = 1.0 / c_rows[k].sqrt();
                }
            }
            p_s.scale_rows(&dx);
            p_s.scale_cols(&dx);
            c_s.scale_rows(&de);
            c_s.scale_cols(&dx);
            for j in 0..n {
                q_s[j] *= dx[j];
                d_scale[j] *= dx[j];
            }
            for k in 0..m {
                e_scale[k] *= de[k];
            }
            // cost normalization
            let p_cols = p_s.col_inf_norms();
            let mean_p = if n > 0 {
                p_cols.iter().sum::<f64>() / n as f64
            } else {
                0.0
            };
            let denom = mean_p.max(q_s.amax());
            if denom > 0.0 {
                let g = 1.0 / denom;
                p_s.scale_values(g);
                q_s *= g;
                cost_scale *= g;
            }
        }
        let mut l_s = l.clone();
        let mut u_s = u.clone();
        for k in 0..m {
            if l_s[k].is_finite() {
                l_s[k] *= e_scale[k];
            }
            u_s[k] *= e_scale[k];
        }

        let mut solver = Self {
            p_s,
            c_s,
            q_s,
            l_s,
            u_s,
            d_scale,
            e_scale,
            cost_scale,
            rho_vec: Vec::new(),
            rho_bar: settings.rho,
            chol: None,
            x: DVector::zeros(n),
            y: DVector::zeros(m),
            zc: DVector::zeros(m),
            data,
            settings,
        };
        solver.set_rho(solver.settings.rho)?;
        Ok(solver)
    }

    fn set_rho(&mut self, rho_bar: f64) -> Result<(), QpError> {
        let m_eq = self.data.num_eq();
        let m = self.y.len();
        self.rho_bar = rho_bar;
        self.rho_vec = (0..m)
            .map(|k| {
                if k < m_eq {
                    rho_bar * self.settings.rho_eq_scale
                } else {
                    rho_bar
                }
            })
            .collect();
        let normal = self
            .p_s
            .normal_matrix(self.settings.sigma, &self.c_s, &self.rho_vec);
        match &mut self.chol {
            Some(chol) => chol.refactor(&normal)?,
            None => self.chol = Some(EnvelopeChol::new(&normal)?),
        }
        Ok(())
    }

    /// Replaces the linear cost; the cached factorization is kept.
    pub fn update_linear_cost(&mut self, q: &DVector<f64>) {
        assert_eq!(q.len(), self.data.n());
        self.data.q = q.clone();
        for j in 0..q.len() {
            self.q_s[j] = q[j] * self.d_scale[j] * self.cost_scale;
        }
    }

    /// Warm-starts primal and dual iterates (unscaled).
    pub fn warm_start(&mut self, z: &DVector<f64>, nu: &DVector<f64>, mu: &DVector<f64>) {
        let n = self.data.n();
        let m_eq = self.data.num_eq();
        assert_eq!(z.len(), n);
        assert_eq!(nu.len(), m_eq);
        assert_eq!(mu.len(), self.data.num_ineq());
        for j in 0..n {
            self.x[j] = z[j] / self.d_scale[j];
        }
        for k in 0..self.y.len() {
            let raw = if k < m_eq { nu[k] } else { mu[k - m_eq] };
            self.y[k] = raw * self.cost_scale / self.e_scale[k];
        }
        self.zc = self.c_s.mul_vec(&self.x);
        // keep z inside the interval so the first dual step is meaningful
        for k in 0..self.zc.len() {
            self.zc[k] = self.zc[k].clamp(self.l_s[k], self.u_s[k]);
        }
    }

    pub fn data(&self) -> &QpData {
        &self.data
    }

    fn unscaled_solution(&self) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let n = self.data.n();
        let m_eq = self.data.num_eq();
        let m_in = self.data.num_ineq();
        let mut z = DVector::zeros(n);
        for j in 0..n {
            z[j] = self.x[j] * self.d_scale[j];
        }
        let mut nu = DVector::zeros(m_eq);
        let mut mu = DVector::zeros(m_in);
        for k in 0..self.y.len() {
            let v = self.y[k] * self.e_scale[k] / self.cost_scale;
            if k < m_eq {
                nu[k] = v;
            } else {
                mu[k - m_eq] = v.max(0.0);
            }
        }
        (z, nu, mu)
    }

    /// Runs the splitting iteration until the full KKT residual meets the
    /// tolerance, the iteration limit is hit, or primal infeasibility is
    /// certified.
    pub fn solve(&mut self) -> QpSolution {
        let tol = self.settings.tol;
        let mut polish_attempts = 0usize;

        // A warm start at the exact solution must return without iterating.
        let (z0, nu0, mu0) = self.unscaled_solution();
        let r0 = qp_kkt_breakdown(&self.data, &z0, &nu0, &mu0).max();
        if r0 <= tol {
            return QpSolution {
                z: z0,
                nu: nu0,
                mu: mu0,
                status: QpStatus::Solved,
                kkt: r0,
                iterations: 0,
            };
        }
        let mut best: Option<(f64, DVector<f64>, DVector<f64>, DVector<f64>)> =
            Some((r0, z0, nu0, mu0));

        if self.settings.direct_equality_first {
            if let Some((z, nu, mu, r)) = self.try_polish(&[]) {
                if r <= tol {
                    return QpSolution {
                        z,
                        nu,
                        mu,
                        status: QpStatus::Solved,
                        kkt: r,
                        iterations: 0,
                    };
                }
            }
        }

        let n = self.data.n();
        let m = self.y.len();
        let alpha = self.settings.alpha;
        let sigma = self.settings.sigma;
        let mut iter = 0usize;
        while iter < self.settings.max_iter {
            iter += 1;
            // x-step: (P + sigma I + C' R C) xt = sigma x - q + C'(R z - y)
            let mut rhs = DVector::zeros(n);
            for j in 0..n {
                rhs[j] = sigma * self.x[j] - self.q_s[j];
            }
            if m > 0 {
                let mut w = DVector::zeros(m);
                for k in 0..m {
                    w[k] = self.rho_vec[k] * self.zc[k] - self.y[k];
                }
                rhs += self.c_s.mul_transpose_vec(&w);
            }
            let xt = self.chol.as_ref().expect("factorization present").solve(&rhs);
            let zt = self.c_s.mul_vec(&xt);
            // relaxation and projection
            let mut dy_inf = 0.0f64;
            let mut delta_y = DVector::zeros(m);
            for j in 0..n {
                self.x[j] = alpha * xt[j] + (1.0 - alpha) * self.x[j];
            }
            for k in 0..m {
                let zr = alpha * zt[k] + (1.0 - alpha) * self.zc[k];
                let v = zr + self.y[k] / self.rho_vec[k];
                let znew = v.clamp(self.l_s[k], self.u_s[k]);
                let dy = self.rho_vec[k] * (zr - znew);
                delta_y[k] = dy;
                dy_inf = dy_inf.max(dy.abs());
                self.y[k] += dy;
                self.zc[k] = znew;
            }

            let checking = iter % self.settings.check_period == 0 || iter == self.settings.max_iter;
            if checking {
                let (z, nu, mu) = self.unscaled_solution();
                let r = qp_kkt_breakdown(&self.data, &z, &nu, &mu).max();
                if best.as_ref().map(|b| r < b.0).unwrap_or(true) {
                    best = Some((r, z.clone(), nu.clone(), mu.clone()));
                }
                if r <= tol {
                    return QpSolution {
                        z,
                        nu,
                        mu,
                        status: QpStatus::Solved,
                        kkt: r,
                        iterations: iter,
                    };
                }
                if self.settings.polish
                    && r <= self.settings.polish_trigger
                    && polish_attempts < self.settings.max_polish_attempts
                {
                    polish_attempts += 1;
                    let active: Vec<usize> = (0..self.data.num_ineq())
                        .filter(|&k| self.y[self.data.num_eq() + k] > 0.0)
                        .collect();
                    if let Some((pz, pnu, pmu, pr)) = self.try_polish(&active) {
                        if pr <= tol {
                            return QpSolution {
                                z: pz,
                                nu: pnu,
                                mu: pmu,
                                status: QpStatus::Solved,
                                kkt: pr,
                                iterations: iter,
                            };
                        }
                        if best.as_ref().map(|b| pr < b.0).unwrap_or(true) {
                            best = Some((pr, pz, pnu, pmu));
                        }
                    }
                }
                // primal infeasibility certificate
                if m > 0 && dy_inf > 0.0 {
                    let eps = self.settings.infeasibility_tol * dy_inf;
                    let at_dy = self.c_s.mul_transpose_vec(&delta_y);
                    if at_dy.amax() <= eps {
                        let mut support = 0.0f64;
                        let mut valid = true;
                        for k in 0..m {
                            let v = delta_y[k];
                            if v > 0.0 {
                                support += self.u_s[k] * v;
                            } else if v < 0.0 {
                                if self.l_s[k].is_finite() {
                                    support += self.l_s[k] * v;
                                } else {
                                    valid = false;
                                    break;
                                }
                            }
                        }
                        if valid && support < -eps {
                            let (z, nu, mu) = self.unscaled_solution();
                            let r = qp_kkt_breakdown(&self.data, &z, &nu, &mu).max();
                            return QpSolution {
                                z,
                                nu,
                                mu,
                                status: QpStatus::Infeasible,
                                kkt: r,
                                iterations: iter,
                            };
                        }
                    }
                }
                // residual-balancing penalty update
                if self.settings.adaptive_rho && iter % self.settings.adapt_period == 0 {
                    self.maybe_adapt_rho();
                }
            }
        }
        let (r, z, nu, mu) = best.expect("at least the initial iterate was recorded");
        QpSolution {
            z,
            nu,
            mu,
            status: QpStatus::MaxIter,
            kkt: r,
            iterations: self.settings.max_iter,
        }
    }

    fn maybe_adapt_rho(&mut self) {
        let m = self.y.len();
        if m == 0 {
            return;
        }
        let cx = self.c_s.mul_vec(&self.x);
        let mut rp = 0.0f64;
        let mut denom_p = 1e-12f64;
        for k in 0..m {
            rp = rp.max((cx[k] - self.zc[k]).abs());
            denom_p = denom_p.max(cx[k].abs()).max(self.zc[k].abs());
        }
        let px = self.p_s.mul_vec(&self.x);
        let cty = self.c_s.mul_transpose_vec(&self.y);
        let mut rd = 0.0f64;
        let mut denom_d = 1e-12f64;
        for j in 0..self.x.len() {
            rd = rd.max((px[j] + self.q_s[j] + cty[j]).abs());
            denom_d = denom_d
                .max(px[j].abs())
                .max(cty[j].abs())
                .max(self.q_s[j].abs());
        }
        let ratio = ((rp / denom_p) / (rd / denom_d).max(1e-16)).sqrt();
        if ratio > 5.0 || ratio < 0.2 {
            let new_rho = (self.rho_bar * ratio).clamp(1e-6, 1e6);
            if self.set_rho(new_rho).is_err() {
                // keep the previous factorization; the iteration remains valid
            }
        }
    }

    /// Equality-constrained solve on the given active inequality rows via a
    /// regularized Schur complement with iterative refinement. Returns the
    /// candidate triple and its full KKT residual.
    fn try_polish(
        &self,
        active_ineq: &[usize],
    ) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, f64)> {
        let data = &self.data;
        let n = data.n();
        let m_eq = data.num_eq();
        let m_act = m_eq + active_ineq.len();

        let p_diag_only = data.h.is_diagonal();
        if !p_diag_only && n > 3000 {
            return None;
        }
        let delta = 1e-9
            * (1.0
                + data
                    .h
                    .diagonal()
                    .iter()
                    .fold(0.0f64, |mx, &v| mx.max(v.abs())));

        // stacked active constraint matrix and rhs
        let mut trips = Vec::new();
        for r in 0..m_eq {
            let (cols, vals) = data.a_eq.row(r);
            for (c, v) in cols.iter().zip(vals) {
                trips.push((r, *c, *v));
            }
        }
        for (ri, &k) in active_ineq.iter().enumerate() {
            let (cols, vals) = data.a_ineq.row(k);
            for (c, v) in cols.iter().zip(vals) {
                trips.push((m_eq + ri, *c, *v));
            }
        }
        let a_act = CsrMatrix::from_triplets(m_act, n, &trips);
        let mut b_act = DVector::zeros(m_act);
        for r in 0..m_eq {
            b_act[r] = data.b_eq[r];
        }
        for (ri, &k) in active_ineq.iter().enumerate() {
            b_act[m_eq + ri] = data.b_ineq[k];
        }

        // P-tilde solve operator
        enum PInv {
            Diag(Vec<f64>),
            Chol(EnvelopeChol),
        }
        let pinv = if p_diag_only {
            let mut d = data.h.diagonal();
            for v in &mut d {
                *v = 1.0 / (*v + delta);
            }
            PInv::Diag(d)
        } else {
            let shifted = add_sparse(&data.h, &CsrMatrix::from_diagonal(&vec![delta; n]));
            PInv::Chol(EnvelopeChol::new(&shifted).ok()?)
        };
        let apply_pinv = |v: &DVector<f64>| -> DVector<f64> {
            match &pinv {
                PInv::Diag(d) => {
                    let mut out = v.clone();
                    for j in 0..out.len() {
                        out[j] *= d[j];
                    }
                    out
                }
                PInv::Chol(ch) => ch.solve(v),
            }
        };

        // Schur complement S = A Pinv A' + delta I
        let schur = if m_act > 0 {
            let s = match &pinv {
                PInv::Diag(d) => a_act.gram_rows(d, delta),
                PInv::Chol(_) => {
                    // dense fallback for small non-diagonal problems
                    let mut s = DMatrix::zeros(m_act, m_act);
                    for r in 0..m_act {
                        let mut e = DVector::zeros(m_act);
                        e[r] = 1.0;
                        let col = a_act.mul_vec(&apply_pinv(&a_act.mul_transpose_vec(&e)));
                        for c in 0..m_act {
                            s[(c, r)] = col[c];
                        }
                        s[(r, r)] += delta;
                    }
                    CsrMatrix::from_dense(&s)
                }
            };
            Some(EnvelopeChol::new(&s).ok()?)
        } else {
            None
        };

        let solve_reg = |r1: &DVector<f64>, r2: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
            // [P+dI, A'; A, -dI][dx; dl] = [r1; r2]
            if let Some(schur) = &schur {
                let rhs = a_act.mul_vec(&apply_pinv(r1)) - r2;
                let dl = schur.solve(&rhs);
                let dx = apply_pinv(&(r1 - a_act.mul_transpose_vec(&dl)));
                (dx, dl)
            } else {
                (apply_pinv(r1), DVector::zeros(0))
            }
        };

        let (mut x, mut lam) = solve_reg(&(-&data.q), &b_act);
        for _ in 0..3 {
            let mut r1 = -(data.h.mul_vec(&x)) - &data.q;
            if m_act > 0 {
                r1 -= a_act.mul_transpose_vec(&lam);
            }
            let r2 = &b_act - a_act.mul_vec(&x);
            let (dx, dl) = solve_reg(&r1, &r2);
            x += dx;
            lam += dl;
        }

        let nu = DVector::from_fn(m_eq, |r, _| lam[r]);
        let mut mu = DVector::zeros(data.num_ineq());
        for (ri, &k) in active_ineq.iter().enumerate() {
            mu[k] = lam[m_eq + ri].max(0.0);
        }
        if !x.iter().all(|v| v.is_finite()) {
            return None;
        }
        let r = qp_kkt_breakdown(data, &x, &nu, &mu).max();
        Some((x, nu, mu, r))
    }
}

/// A QP viewed through the generic subsystem-evaluator interface.
///
/// Lets the NLP-level machinery (residuals, linearization, the reference
/// solver) run unchanged on quadratic problems.
pub struct QuadraticSubsystem {
    data: QpData,
}

impl QuadraticSubsystem {
    pub fn new(data: QpData) -> Self {
        Self { data }
    }

    pub fn data(&self) -> &QpData {
        &self.data
    }
}

impl crate::problem::SubsystemModel for QuadraticSubsystem {
    fn dim(&self) -> usize {
        self.data.n()
    }

    fn num_eq(&self) -> usize {
        self.data.num_eq()
    }

    fn num_ineq(&self) -> usize {
        self.data.num_ineq()
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&self.data.h.mul_vec(z)) + self.data.q.dot(z)
    }

    fn objective_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        self.data.h.mul_vec(z) + &self.data.q
    }

    fn gauss_newton_hessian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        self.data.h.to_dense()
    }

    fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        self.data.a_eq.mul_vec(z) - &self.data.b_eq
    }

    fn eq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        self.data.a_eq.to_dense()
    }

    fn ineq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        self.data.a_ineq.mul_vec(z) - &self.data.b_ineq
    }

    fn ineq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        self.data.a_ineq.to_dense()
    }

    fn lagrangian_hessian(
        &self,
        _z: &DVector<f64>,
        _nu: &DVector<f64>,
        _mu: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        Some(self.data.h.to_dense())
    }
}

/// One-shot solve with optional warm start.
pub fn solve_qp(
    data: &QpData,
    warm: Option<&QpSolution>,
    tol: f64,
    max_iter: usize,
) -> Result<QpSolution, QpError> {
    assert!(tol > 0.0, "tolerance must be positive");
    let settings = QpSettings {
        tol,
        max_iter,
        ..QpSettings::default()
    };
    let mut solver = QpSolver::new(data.clone(), settings)?;
    if let Some(w) = warm {
        solver.warm_start(&w.z, &w.nu, &w.mu);
    }
    Ok(solver.solve())
}
