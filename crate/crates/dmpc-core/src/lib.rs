//! Decentralized model predictive control toolkit.
//!
//! Solvers for partially separable optimal control problems — consensus ADMM
//! over subsystem QPs and a bi-level decentralized SQP scheme — together with
//! a meshed power-network frequency-control benchmark and a high-accuracy
//! centralized reference solver.

pub mod admm;
pub mod dsqp;
pub mod grid;
pub mod oracle;
pub mod problem;
pub mod qp;
pub mod sparse;
