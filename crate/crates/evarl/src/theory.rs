//! Executable verification of the evaluation-aware trade-off theory.
//!
//! The Bellman-relaxed objective treats the state-value vector V as a free
//! variable. With the linear-attention predictor the vector of estimates is
//! `W V` for a row-stochastic matrix `W = diag(F 1)^-1 F`, so the expected
//! squared prediction error becomes the quadratic form `V' Q V` with
//! `Q = (I - W)' diag(mu) (I - W)` — symmetric positive semi-definite by
//! construction. The hard-constrained problem (maximize mu'V subject to
//! `V' Q V <= eps^2`) and its soft companion (`mu'V - beta V' Q V`) then
//! have closed forms through the pseudo-inverse of Q, and this module
//! checks the whole story numerically: convexity, the closed forms, the
//! soft/hard correspondence, and the monotonicity of return and error in
//! beta on exactly solvable instances.
//!
//! One structural fact drives the edge-case handling: `W 1 = 1`, so the
//! all-ones vector is always in the nullspace of an instance built from a
//! similarity matrix (a convex combination of returns reproduces constants
//! exactly) and a probability vector mu is never inside its row space.
//! Such instances are genuinely unbounded and are reported as such;
//! bounded behavior needs a general PSD Q supplied directly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{exact_values, sample_random_mdp, DeterministicPolicy, Policy, TabularMdp};
use crate::policy::{DifferentiablePolicy, TabularPolicy};
use crate::predictor::Similarity;

/// Relative eigenvalue cutoff for the pseudo-inverse.
const PINV_CUTOFF: f64 = 1e-10;
/// Tolerance for "mu lies in the row space of Q".
const RANGE_TOL: f64 = 1e-8;

/// A vectorized Bellman-relaxed instance: start distribution, similarity
/// matrix (when built from one), and the PSD quadratic form Q.
///
/// States are canonically reordered so the assessment states occupy the
/// first `k` indices; `perm` records the mapping (canonical -> original).
/// All stored vectors/matrices live in the canonical basis; the
/// `*_original` helpers translate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QclpProblem {
    pub n: usize,
    pub k: usize,
    mu: Vec<f64>,
    q: Vec<f64>,
    /// Similarity matrix F (first k columns populated), canonical basis.
    f: Option<Vec<f64>>,
    /// Prediction operator W = diag(F 1)^-1 F, canonical basis.
    w: Option<Vec<f64>>,
    perm: Vec<usize>,
    pub epsilon: Option<f64>,
    pub beta: Option<f64>,
}

impl QclpProblem {
    /// Build the vectorized instance from a similarity function over
    /// original state indices. `assessment_states` lists the k start
    /// states (distinct, in order); `mu` is the start distribution in
    /// original indexing.
    pub fn build_vectorized(
        n: usize,
        assessment_states: &[usize],
        similarity: &dyn Fn(usize, usize) -> f64,
        mu_original: &[f64],
    ) -> Result<Self> {
        let k = assessment_states.len();
        if k == 0 || k > n {
            return Err(Error::invalid("need 1..=n assessment states"));
        }
        if mu_original.len() != n {
            return Err(Error::invalid("mu length mismatch"));
        }
        let mut seen = assessment_states.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != k || *seen.last().unwrap() >= n {
            return Err(Error::invalid("assessment states must be distinct and valid"));
        }
        // Canonical order: assessment states first, remaining states in
        // ascending original index.
        let mut perm = assessment_states.to_vec();
        for s in 0..n {
            if !assessment_states.contains(&s) {
                perm.push(s);
            }
        }
        let mu: Vec<f64> = perm.iter().map(|&s| mu_original[s]).collect();

        let mut f = vec![0.0; n * n];
        for i in 0..n {
            for (j, &sj) in assessment_states.iter().enumerate() {
                f[i * n + j] = similarity(perm[i], sj);
            }
        }
        // Row sums; every row must keep positive mass on the assessment
        // columns for the prediction operator to exist.
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            let row_sum: f64 = f[i * n..(i + 1) * n].iter().sum();
            if row_sum <= 0.0 {
                return Err(Error::DegenerateSimilarity { sum: row_sum });
            }
            for j in 0..k {
                w[i * n + j] = f[i * n + j] / row_sum;
            }
        }
        // Q = (I - W)' diag(mu) (I - W).
        let mut q = vec![0.0; n * n];
        for r in 0..n {
            // row r of M = I - W
            for i in 0..n {
                let m_ri = if r == i { 1.0 } else { 0.0 } - w[r * n + i];
                if m_ri == 0.0 || mu[r] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let m_rj = if r == j { 1.0 } else { 0.0 } - w[r * n + j];
                    q[i * n + j] += m_ri * mu[r] * m_rj;
                }
            }
        }
        Ok(QclpProblem {
            n,
            k,
            mu,
            q,
            f: Some(f),
            w: Some(w),
            perm,
            epsilon: None,
            beta: None,
        })
    }

    /// General instance from an explicit symmetric PSD matrix (identity
    /// permutation, no similarity structure).
    pub fn from_parts(mu: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        let n = mu.len();
        if q.len() != n * n {
            return Err(Error::invalid("Q must be n x n"));
        }
        for i in 0..n {
            for j in 0..i {
                if (q[i * n + j] - q[j * n + i]).abs() > 1e-12 {
                    return Err(Error::invalid("Q must be symmetric within 1e-12"));
                }
            }
        }
        Ok(QclpProblem {
            n,
            k: 0,
            mu,
            q,
            f: None,
            w: None,
            perm: (0..n).collect(),
            epsilon: None,
            beta: None,
        })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn f_matrix(&self) -> Option<&[f64]> {
        self.f.as_deref()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Map an original-indexed vector into the canonical basis.
    pub fn to_canonical(&self, v_original: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&s| v_original[s]).collect()
    }

    /// VᵀQV for an original-indexed value vector: the mu-weighted mean
    /// squared prediction error of the linear predictor on V.
    pub fn prediction_mse(&self, v_original: &[f64]) -> f64 {
        let v = self.to_canonical(v_original);
        quadratic_form(&self.q, &v)
    }

    /// Gradient of [`QclpProblem::prediction_mse`] with respect to V, in
    /// original indexing: 2 Q V.
    pub fn prediction_mse_gradient(&self, v_original: &[f64]) -> Vec<f64> {
        let v = self.to_canonical(v_original);
        let g = mat_vec(&self.q, &v);
        let mut out = vec![0.0; self.n];
        for (c, &orig) in self.perm.iter().enumerate() {
            out[orig] = 2.0 * g[c];
        }
        out
    }

    /// Predicted value vector W V in original indexing (only for
    /// similarity-built instances).
    pub fn predictions(&self, v_original: &[f64]) -> Option<Vec<f64>> {
        let w = self.w.as_deref()?;
        let v = self.to_canonical(v_original);
        let pred = mat_vec_full(w, &v);
        let mut out = vec![0.0; self.n];
        for (c, &orig) in self.perm.iter().enumerate() {
            out[orig] = pred[c];
        }
        Some(out)
    }

    /// mu'V in original indexing.
    pub fn objective(&self, v_original: &[f64]) -> f64 {
        self.perm
            .iter()
            .enumerate()
            .map(|(c, &orig)| self.mu[c] * v_original[orig])
            .sum()
    }

    fn eigen(&self) -> (DMatrix<f64>, DVector<f64>) {
        let m = DMatrix::from_row_slice(self.n, self.n, &self.q);
        let eig = m.symmetric_eigen();
        (eig.eigenvectors, eig.eigenvalues)
    }

    /// Smallest eigenvalue of Q (the convexity certificate).
    pub fn min_eigenvalue(&self) -> f64 {
        let (_, vals) = self.eigen();
        vals.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Eigendecomposition split into (vectors, eigenvalues, cutoff):
    /// eigenvalues at or below the cutoff count as the nullspace.
    fn eigen_with_cutoff(&self) -> (DMatrix<f64>, DVector<f64>, f64) {
        let (vecs, vals) = self.eigen();
        let max = vals.iter().copied().fold(0.0_f64, f64::max);
        (vecs, vals, PINV_CUTOFF * max.max(f64::MIN_POSITIVE))
    }

    /// Pseudo-inverse applied to a canonical-basis vector.
    fn pinv_apply(&self, x: &[f64]) -> Vec<f64> {
        let (vecs, vals, cutoff) = self.eigen_with_cutoff();
        let xv = DVector::from_column_slice(x);
        let mut out = DVector::zeros(self.n);
        for i in 0..self.n {
            if vals[i] > cutoff {
                let u = vecs.column(i);
                out += u * (u.dot(&xv) / vals[i]);
            }
        }
        out.as_slice().to_vec()
    }

    /// Orthonormal basis of the (numerical) nullspace of Q.
    pub fn nullspace_basis(&self) -> Vec<Vec<f64>> {
        let (vecs, vals, cutoff) = self.eigen_with_cutoff();
        (0..self.n)
            .filter(|&i| vals[i] <= cutoff)
            .map(|i| vecs.column(i).as_slice().to_vec())
            .collect()
    }

    /// Component of mu outside the row space of Q (canonical basis).
    /// A nonzero component certifies an unbounded objective.
    pub fn mu_nullspace_component(&self) -> Vec<f64> {
        let (vecs, vals, cutoff) = self.eigen_with_cutoff();
        let mu = DVector::from_column_slice(&self.mu);
        let mut out = DVector::zeros(self.n);
        for i in 0..self.n {
            if vals[i] <= cutoff {
                let u = vecs.column(i);
                out += u * u.dot(&mu);
            }
        }
        out.as_slice().to_vec()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn quadratic_form(q: &[f64], v: &[f64]) -> f64 {
    let n = v.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += q[i * n + j] * v[j];
        }
        total += v[i] * row;
    }
    total
}

fn mat_vec(q: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| (0..n).map(|j| q[i * n + j] * v[j]).sum())
        .collect()
}

fn mat_vec_full(w: &[f64], v: &[f64]) -> Vec<f64> {
    mat_vec(w, v)
}

/// Outcome of the hard-constrained solve.
#[derive(Debug, Clone)]
pub enum HardSolution {
    Bounded {
        /// Optimal objective mu'V* = eps * sqrt(mu' Q^+ mu).
        value: f64,
        /// Maximizer (canonical basis).
        v_star: Vec<f64>,
        /// V*' Q V*, which must equal eps^2 at the optimum.
        constraint_value: f64,
    },
    Unbounded {
        /// Normalized nullspace direction along which mu'V grows without
        /// bound while the constraint stays satisfied.
        direction: Vec<f64>,
    },
}

/// Closed-form solution of `max mu'V s.t. V'QV <= eps^2` through the
/// pseudo-inverse of Q. Detects and reports the unbounded case (mu outside
/// the row space of Q).
pub fn solve_hard_relaxed(problem: &QclpProblem, epsilon: f64) -> Result<HardSolution> {
    if epsilon < 0.0 {
        return Err(Error::invalid("epsilon must be nonnegative"));
    }
    let null_comp = problem.mu_nullspace_component();
    let null_norm = norm(&null_comp);
    let mu_norm = norm(&problem.mu).max(f64::MIN_POSITIVE);
    if null_norm > RANGE_TOL * mu_norm {
        let direction = null_comp.iter().map(|x| x / null_norm).collect();
        return Ok(HardSolution::Unbounded { direction });
    }
    let pinv_mu = problem.pinv_apply(&problem.mu);
    let radius_sq: f64 = problem.mu.iter().zip(&pinv_mu).map(|(a, b)| a * b).sum();
    if epsilon == 0.0 || radius_sq <= 0.0 {
        return Ok(HardSolution::Bounded {
            value: 0.0,
            v_star: vec![0.0; problem.n],
            constraint_value: 0.0,
        });
    }
    let scale = epsilon / radius_sq.sqrt();
    let v_star: Vec<f64> = pinv_mu.iter().map(|x| x * scale).collect();
    let value = epsilon * radius_sq.sqrt();
    let constraint_value = quadratic_form(&problem.q, &v_star);
    Ok(HardSolution::Bounded {
        value,
        v_star,
        constraint_value,
    })
}

/// Solution set of the soft problem `max mu'V - beta V'QV`: the particular
/// (minimum-norm) solution of the first-order condition `Q V = mu / (2
/// beta)` plus the nullspace of Q. `consistent` is false when mu has a
/// nullspace component, in which case no stationary point exists and the
/// objective is unbounded along that component.
#[derive(Debug, Clone)]
pub struct SoftSolution {
    pub v_star: Vec<f64>,
    pub nullspace: Vec<Vec<f64>>,
    /// || Q v* - mu / (2 beta) ||.
    pub residual: f64,
    pub consistent: bool,
}

pub fn solve_soft_relaxed(problem: &QclpProblem, beta: f64) -> Result<SoftSolution> {
    if beta <= 0.0 {
        return Err(Error::invalid("beta must be positive"));
    }
    let target: Vec<f64> = problem.mu.iter().map(|m| m / (2.0 * beta)).collect();
    let v_star = problem.pinv_apply(&target);
    let qv = mat_vec(&problem.q, &v_star);
    let residual = norm(
        &qv.iter()
            .zip(&target)
            .map(|(a, b)| a - b)
            .collect::<Vec<f64>>(),
    );
    let consistent = residual <= RANGE_TOL * norm(&target).max(f64::MIN_POSITIVE);
    Ok(SoftSolution {
        v_star,
        nullspace: problem.nullspace_basis(),
        residual,
        consistent,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Numeric record of one soft -> hard -> beta roundtrip.
#[derive(Debug, Clone)]
pub struct RoundtripReport {
    pub soft_value: f64,
    pub eps_sq: f64,
    pub hard_value: f64,
    pub beta_recovered: f64,
    /// |hard_value - soft_value|.
    pub objective_gap: f64,
    /// |beta_recovered - beta|.
    pub beta_gap: f64,
    /// Soft objective at the hard maximizer minus soft optimum (should be
    /// >= -tolerance: the hard optimum attains the soft optimum).
    pub soft_attainment_gap: f64,
}

/// Solve the soft problem at `beta`, set eps^2 to the attained constraint
/// value, re-solve the hard problem at that eps, and verify that the
/// objectives agree and that `beta = mu'V* / (2 eps^2)` is recovered.
pub fn verify_theorem1_roundtrip(problem: &QclpProblem, beta: f64) -> Result<RoundtripReport> {
    let soft = solve_soft_relaxed(problem, beta)?;
    if !soft.consistent {
        return Err(Error::invalid(
            "instance is unbounded (mu outside the row space of Q)",
        ));
    }
    let mu_v: f64 = problem
        .mu
        .iter()
        .zip(&soft.v_star)
        .map(|(a, b)| a * b)
        .sum();
    let eps_sq = quadratic_form(&problem.q, &soft.v_star);
    let eps = eps_sq.max(0.0).sqrt();
    let hard = solve_hard_relaxed(problem, eps)?;
    let (hard_value, v_hard) = match hard {
        HardSolution::Bounded { value, v_star, .. } => (value, v_star),
        HardSolution::Unbounded { .. } => {
            return Err(Error::invalid("hard problem unbounded on a bounded instance"))
        }
    };
    let beta_recovered = if eps_sq > 0.0 {
        mu_v / (2.0 * eps_sq)
    } else {
        f64::NAN
    };
    // Soft objective attained by the hard maximizer.
    let soft_at_hard = problem
        .mu
        .iter()
        .zip(&v_hard)
        .map(|(a, b)| a * b)
        .sum::<f64>()
        - beta * quadratic_form(&problem.q, &v_hard);
    let soft_opt = mu_v - beta * eps_sq;
    Ok(RoundtripReport {
        soft_value: mu_v,
        eps_sq,
        hard_value,
        beta_recovered,
        objective_gap: (hard_value - mu_v).abs(),
        beta_gap: (beta_recovered - beta).abs(),
        soft_attainment_gap: soft_at_hard - soft_opt,
    })
}

/// One point of the enumerated policy frontier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub beta: f64,
    pub j: f64,
    pub zeta_sq: f64,
    pub j_hat: f64,
    pub policy_actions: Vec<usize>,
    /// True when the point came from exact enumeration rather than
    /// gradient ascent.
    pub exact: bool,
}

/// Maximize `J - beta zeta^2` over deterministic policies by exhaustive
/// enumeration (values by backward induction, zeta^2 through the
/// vectorized quadratic form). Falls back to softmax gradient ascent when
/// `n_actions^n_states` exceeds `enumeration_guard`.
pub fn brute_force_policy_frontier(
    mdp: &TabularMdp,
    assessment_states: &[usize],
    similarity: &Similarity,
    betas: &[f64],
    enumeration_guard: usize,
) -> Result<Vec<FrontierPoint>> {
    let problem = problem_for_mdp(mdp, assessment_states, similarity)?;
    let count = (mdp.n_actions as f64).powi(mdp.n_states as i32);
    if count <= enumeration_guard as f64 {
        let mut evaluated: Vec<(Vec<usize>, f64, f64, f64)> = Vec::with_capacity(count as usize);
        for actions in crate::enumeration::deterministic_policies(mdp.n_states, mdp.n_actions) {
            let policy = DeterministicPolicy::new(actions.clone(), mdp.n_actions);
            let v = exact_values(mdp, &policy);
            let j = problem.objective(&v);
            let zeta_sq = problem.prediction_mse(&v);
            let predictions = problem.predictions(&v).expect("similarity instance");
            let j_hat = mdp
                .start_dist()
                .iter()
                .zip(&predictions)
                .map(|(m, p)| m * p)
                .sum();
            evaluated.push((actions, j, zeta_sq, j_hat));
        }
        let mut frontier = Vec::with_capacity(betas.len());
        for &beta in betas {
            // Lexicographic tie-break: strict improvement required to move
            // off an earlier policy.
            let mut best = 0;
            let mut best_obj = f64::NEG_INFINITY;
            for (i, (_, j, zeta_sq, _)) in evaluated.iter().enumerate() {
                let obj = j - beta * zeta_sq;
                if obj > best_obj {
                    best_obj = obj;
                    best = i;
                }
            }
            let (actions, j, zeta_sq, j_hat) = &evaluated[best];
            frontier.push(FrontierPoint {
                beta,
                j: *j,
                zeta_sq: *zeta_sq,
                j_hat: *j_hat,
                policy_actions: actions.clone(),
                exact: true,
            });
        }
        Ok(frontier)
    } else {
        let mut frontier = Vec::with_capacity(betas.len());
        for &beta in betas {
            let policy = optimize_soft_objective(mdp, &problem, beta, 2000, 0.1);
            let v = exact_values(mdp, &policy);
            let predictions = problem.predictions(&v).expect("similarity instance");
            frontier.push(FrontierPoint {
                beta,
                j: problem.objective(&v),
                zeta_sq: problem.prediction_mse(&v),
                j_hat: mdp
                    .start_dist()
                    .iter()
                    .zip(&predictions)
                    .map(|(m, p)| m * p)
                    .sum(),
                policy_actions: Vec::new(),
                exact: false,
            });
        }
        Ok(frontier)
    }
}

/// Build the vectorized instance for an MDP using its state embeddings.
pub fn problem_for_mdp(
    mdp: &TabularMdp,
    assessment_states: &[usize],
    similarity: &Similarity,
) -> Result<QclpProblem> {
    let sim = |i: usize, j: usize| similarity.eval(mdp.embedding(i), mdp.embedding(j));
    QclpProblem::build_vectorized(mdp.n_states, assessment_states, &sim, mdp.start_dist())
}

/// Exact gradient of the soft objective `mu'V(theta) - beta V(theta)'Q
/// V(theta)` for a tabular softmax policy, by reverse-mode differentiation
/// of the backward induction (adjoint recursion).
pub fn soft_objective_gradient(
    mdp: &TabularMdp,
    problem: &QclpProblem,
    policy: &TabularPolicy,
    beta: f64,
) -> (f64, Vec<f64>) {
    let n = mdp.n_states;
    let na = mdp.n_actions;
    let horizon = mdp.horizon;
    let probs: Vec<Vec<f64>> = (0..n).map(|s| policy.action_probs(s)).collect();

    // Forward pass: keep the whole value table.
    let mut v = vec![vec![0.0; n]; horizon + 1];
    for t in (0..horizon).rev() {
        for s in 0..n {
            let mut acc = 0.0;
            for a in 0..na {
                let pa = probs[s][a];
                if pa == 0.0 {
                    continue;
                }
                let row = mdp.transition_row(s, a);
                let mut next = 0.0;
                for (sn, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        next += p * v[t + 1][sn];
                    }
                }
                acc += pa * (mdp.reward(s, a) + mdp.gamma * next);
            }
            v[t][s] = acc;
        }
    }

    let objective = problem.objective(&v[0]) - beta * problem.prediction_mse(&v[0]);

    // dL/dV_0 = mu - beta * 2 Q V_0, both in original indexing.
    let mse_grad = problem.prediction_mse_gradient(&v[0]);
    let mut lambda: Vec<f64> = (0..n)
        .map(|s| {
            let mu_s = problem
                .permutation()
                .iter()
                .position(|&orig| orig == s)
                .map(|c| problem.mu()[c])
                .unwrap_or(0.0);
            mu_s - beta * mse_grad[s]
        })
        .collect();

    // Adjoint sweep through the induction.
    let mut grad = vec![0.0; n * na];
    for t in 0..horizon {
        let mut next_lambda = vec![0.0; n];
        for s in 0..n {
            let l = lambda[s];
            if l == 0.0 {
                continue;
            }
            // dV_t(s)/dpi(a|s) = A_t(s, a), then softmax backward per row.
            let mut dpi = vec![0.0; na];
            for a in 0..na {
                let row = mdp.transition_row(s, a);
                let mut next = 0.0;
                for (sn, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        next += p * v[t + 1][sn];
                    }
                }
                dpi[a] = l * (mdp.reward(s, a) + mdp.gamma * next);
            }
            let dot: f64 = dpi.iter().zip(&probs[s]).map(|(d, p)| d * p).sum();
            for b in 0..na {
                grad[s * na + b] += probs[s][b] * (dpi[b] - dot);
            }
            // Propagate to V_{t+1}.
            for a in 0..na {
                let pa = probs[s][a];
                if pa == 0.0 {
                    continue;
                }
                let row = mdp.transition_row(s, a);
                for (sn, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        next_lambda[sn] += l * pa * mdp.gamma * p;
                    }
                }
            }
        }
        lambda = next_lambda;
    }
    (objective, grad)
}

/// Deterministic gradient ascent on the exact soft objective from a
/// zero-logit initialization.
pub fn optimize_soft_objective(
    mdp: &TabularMdp,
    problem: &QclpProblem,
    beta: f64,
    steps: usize,
    step_size: f64,
) -> TabularPolicy {
    let mut policy = TabularPolicy::zeros(mdp.n_states, mdp.n_actions);
    for _ in 0..steps {
        let (_, grad) = soft_objective_gradient(mdp, problem, &policy, beta);
        let logits = policy.params_mut().get_mut("logits").expect("logits");
        for (l, g) in logits.data.iter_mut().zip(&grad) {
            *l += step_size * g;
        }
    }
    policy
}

/// Configuration of the randomized beta-sweep experiment: many random
/// deterministic-dynamics MDPs, a softmax policy trained per beta on the
/// exact soft objective, aggregated error/return statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub trials: usize,
    pub betas: Vec<f64>,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub horizon: usize,
    pub assessment_states: Vec<usize>,
    pub similarity: Similarity,
    pub ascent_steps: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            trials: 1000,
            betas: vec![0.0, 0.01, 0.1, 1.0, 10.0],
            n_states: 5,
            n_actions: 2,
            gamma: 0.9,
            horizon: 50,
            assessment_states: vec![0, 2],
            similarity: Similarity::Rbf { sigma: 1.5 },
            ascent_steps: 2000,
            step_size: 0.1,
            seed: 0,
        }
    }
}

/// Per-(trial, beta) outcome.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrialPoint {
    pub zeta_sq: f64,
    pub j: f64,
    pub j_hat: f64,
}

/// Aggregated sweep statistics for one beta.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub mean_zeta_sq: f64,
    pub se_zeta_sq: f64,
    pub mean_j: f64,
    pub se_j: f64,
    pub mean_sq_j_err: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// `per_beta[b][trial]`, trials aligned across betas (same MDP per
    /// trial index).
    pub per_beta: Vec<Vec<TrialPoint>>,
}

/// Run the randomized beta sweep. Trials are independent and run in
/// parallel; results merge in trial order, so the output is a pure
/// function of the config.
pub fn run_beta_sweep_experiment(config: &SweepConfig) -> Result<SweepResult> {
    use rand::SeedableRng;
    let betas = config.betas.clone();
    let per_trial: Vec<Vec<TrialPoint>> = (0..config.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(trial as u64 + 1);
            let mdp = sample_random_mdp(
                config.n_states,
                config.n_actions,
                true,
                config.gamma,
                config.horizon,
                &mut rng,
            )
            .expect("valid sweep dimensions");
            let problem = problem_for_mdp(&mdp, &config.assessment_states, &config.similarity)
                .expect("valid sweep instance");
            betas
                .iter()
                .map(|&beta| {
                    let policy = optimize_soft_objective(
                        &mdp,
                        &problem,
                        beta,
                        config.ascent_steps,
                        config.step_size,
                    );
                    let v = exact_values(&mdp, &policy);
                    let predictions = problem.predictions(&v).expect("similarity instance");
                    let j_hat = mdp
                        .start_dist()
                        .iter()
                        .zip(&predictions)
                        .map(|(m, p)| m * p)
                        .sum();
                    TrialPoint {
                        zeta_sq: problem.prediction_mse(&v),
                        j: problem.objective(&v),
                        j_hat,
                    }
                })
                .collect()
        })
        .collect();

    let mut per_beta = vec![Vec::with_capacity(config.trials); betas.len()];
    for trial_points in &per_trial {
        for (b, point) in trial_points.iter().enumerate() {
            per_beta[b].push(*point);
        }
    }

    let rows = betas
        .iter()
        .enumerate()
        .map(|(b, &beta)| {
            let points = &per_beta[b];
            let n = points.len() as f64;
            let stats = |xs: &[f64]| {
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                (mean, (var / n).sqrt())
            };
            let (mean_zeta_sq, se_zeta_sq) = stats(&points.iter().map(|p| p.zeta_sq).collect::<Vec<_>>());
            let (mean_j, se_j) = stats(&points.iter().map(|p| p.j).collect::<Vec<_>>());
            let mean_sq_j_err =
                points.iter().map(|p| (p.j - p.j_hat) * (p.j - p.j_hat)).sum::<f64>() / n;
            SweepRow {
                beta,
                mean_zeta_sq,
                se_zeta_sq,
                mean_j,
                se_j,
                mean_sq_j_err,
                n_trials: points.len(),
            }
        })
        .collect();

    Ok(SweepResult { rows, per_beta })
}
