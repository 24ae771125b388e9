//! Desk-scale laboratory for soft preference optimization (SPO) on exact
//! tabular policies.
//!
//! The crate keeps everything small enough to verify by brute force: policies
//! are explicit probability vectors, preference data is a finite weighted atom
//! list, expectations are exact sums, and every analytic gradient can be
//! checked against finite differences. The modules layer as follows:
//!
//! * [`simplex`]: validated probability vectors, projection, softmax targets.
//! * [`prefdata`]: reward tables and exactly consistent preference data
//!   (Bradley-Terry pairwise, n-ary best-of-n, Plackett-Luce rankings).
//! * [`losses`]: the SPO loss family with closed-form gradients, plus the DPO
//!   baseline and the separability symmetry check.
//! * [`oracle`]: independent brute-force verifiers (finite differences, grid
//!   minimization, exhaustive expectations).
//! * [`dynamics`]: projected gradient flow on the product of simplices, with
//!   convergence detection and Lyapunov monitoring.
//! * [`seqkl`]: a toy autoregressive token model, exact sequence/token-wise KL
//!   by enumeration, and the batch-staleness probe.

pub mod dynamics;
pub mod error;
pub mod losses;
pub mod oracle;
pub mod prefdata;
pub mod seqkl;
pub mod simplex;

pub use error::{Error, Result};
