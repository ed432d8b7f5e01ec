//! Bilevel Bayesian optimization over finite discretized domains.
//!
//! The solver ("BILBO") maintains one Gaussian-process surrogate per blackbox
//! function, restricts its search to confidence-bound trusted sets, and queries
//! a single function per iteration. The crate is organized as:
//!
//! - [`grid`]: uniform discretization of the joint upper/lower domain
//! - [`mask`]: dense bitset masks over grid points
//! - [`gp`]: Matern 5/2 GP regression, exact posteriors, MLE hyperparameter fits
//! - [`problems`]: benchmark bilevel problems (BraninHoo+GoldsteinPrice, SMD variants)
//! - [`trusted`]: confidence bounds and the trusted feasible / lower-optimal sets
//! - [`bilbo`]: the decoupled query loop and final-point estimators
//! - [`baselines`]: TrustedRand and Nested comparison algorithms
//! - [`oracle`]: brute-force ground truth and regret computations
//! - [`harness`]: experiment configs, seeded runs, CSV output, audits

pub mod baselines;
pub mod bilbo;
pub mod gp;
pub mod grid;
pub mod harness;
pub mod mask;
pub mod oracle;
pub mod problems;
pub mod trusted;
