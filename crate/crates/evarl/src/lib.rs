//! Evaluation-aware reinforcement learning on exactly solvable tabular MDPs.
//!
//! This crate trains policies that are simultaneously high-return and
//! accurately evaluable from a few rollouts in an assessment environment,
//! and numerically certifies the theory behind that trade-off:
//!
//! - [`mdp`] — finite-horizon tabular MDPs, gridworlds, rollouts and exact
//!   values by backward induction;
//! - [`autodiff`] — a small reverse-mode engine for the transformer value
//!   predictor and MLP policies, with a finite-difference gradient checker;
//! - [`predictor`] — behavior-conditioned state-value predictors (linear
//!   attention and transformer) plus their replay buffer and training step;
//! - [`policy`] — categorical policies, score-function policy gradients and
//!   the evaluation-aware gradient;
//! - [`trainer`] — the two-stage co-learning loop (warmup, predictor
//!   updates, policy updates) with CSV logging;
//! - [`ope`] — off-policy evaluation baselines (MC, TIS, PDIS, DR, FQE) and
//!   an error benchmark against exact ground truth;
//! - [`theory`] — the vectorized Bellman-relaxed objective, closed-form
//!   hard/soft solutions, their correspondence, and exact monotonicity
//!   experiments;
//! - [`enumeration`] — exact expectations on tiny MDPs for oracle checks.
//!
//! The `evarl` command-line tool in the companion crate drives the
//! experiment configurations; the `book/` directory contains a guided tour
//! whose code snippets double as doc-tests.

pub mod autodiff;
pub mod enumeration;
pub mod error;
pub mod mdp;
pub mod ope;
pub mod policy;
pub mod predictor;
pub mod theory;
// pub mod trainer;

pub use error::{Error, Result};

// #[cfg(doctest)]
// mod book_doctests;
