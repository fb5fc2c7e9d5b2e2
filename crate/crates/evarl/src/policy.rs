//! Categorical policies and their score-function gradients: the standard
//! reward-to-go policy gradient and the evaluation-aware gradient that adds
//! the predictability penalty.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGrads, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::mdp::{discounted_return, Policy, TabularMdp, Trajectory};
use crate::predictor::{AssessmentDataset, LinearPredictor, TransformerPredictor, ValuePredictor};

/// Softmax with max-shift; single code path shared by both policy kinds.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// A policy whose log-probabilities are differentiable in its parameters.
pub trait DifferentiablePolicy: Policy {
    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// Weighted sum of score terms: sum_j coeff_j * grad log pi(a_j | s_j).
    fn weighted_score_grads(&self, items: &[ScoreItem]) -> Result<ParamGrads>;
}

/// One (state, action, coefficient) contribution to a score-function
/// gradient estimate.
#[derive(Debug, Clone, Copy)]
pub struct ScoreItem {
    pub state: usize,
    pub action: usize,
    pub coeff: f64,
}

/// Tabular softmax policy: one logit per (state, action).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    params: ParamSet,
}

impl TabularPolicy {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        let mut params = ParamSet::new();
        params
            .push("logits", vec![n_states, n_actions], vec![0.0; n_states * n_actions])
            .expect("fresh set");
        TabularPolicy {
            n_states,
            n_actions,
            params,
        }
    }

    pub fn from_logits(n_states: usize, n_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != n_states * n_actions {
            return Err(Error::invalid("logits length mismatch"));
        }
        let mut params = ParamSet::new();
        params.push("logits", vec![n_states, n_actions], logits)?;
        Ok(TabularPolicy {
            n_states,
            n_actions,
            params,
        })
    }

    pub fn logits(&self) -> &[f64] {
        &self.params.get("logits").expect("logits").data
    }

    fn logits_row(&self, state: usize) -> &[f64] {
        &self.logits()[state * self.n_actions..][..self.n_actions]
    }
}

impl Policy for TabularPolicy {
    fn action_probs(&self, state: usize) -> Vec<f64> {
        softmax(self.logits_row(state))
    }
}

impl DifferentiablePolicy for TabularPolicy {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn weighted_score_grads(&self, items: &[ScoreItem]) -> Result<ParamGrads> {
        let mut grads = ParamGrads::zeros_like(&self.params);
        let g = grads.get_mut("logits").expect("logits");
        for item in items {
            if item.state >= self.n_states {
                return Err(Error::InvalidState {
                    state: item.state,
                    n_states: self.n_states,
                });
            }
            if item.action >= self.n_actions {
                return Err(Error::InvalidAction {
                    action: item.action,
                    n_actions: self.n_actions,
                });
            }
            // grad_logits log pi(a|s) = onehot(a) - pi(.|s), on row s.
            let probs = softmax(self.logits_row(item.state));
            let row = &mut g[item.state * self.n_actions..][..self.n_actions];
            for (b, &p) in probs.iter().enumerate() {
                let indicator = if b == item.action { 1.0 } else { 0.0 };
                row[b] += item.coeff * (indicator - p);
            }
        }
        Ok(grads)
    }
}

/// Two-layer MLP policy over state embeddings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpPolicy {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub hidden: usize,
    embeddings: Vec<Vec<f64>>,
    params: ParamSet,
}

impl MlpPolicy {
    /// Build a policy over `mdp`'s state embeddings.
    pub fn init(mdp: &TabularMdp, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::invalid("hidden width must be positive"));
        }
        let obs_dim = mdp.embed_dim();
        let mut params = ParamSet::new();
        let mut dense = |params: &mut ParamSet, name: &str, rows: usize, cols: usize| -> Result<()> {
            let bound = 1.0 / (rows as f64).sqrt();
            let w: Vec<f64> = (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(format!("{name}_w"), vec![rows, cols], w)?;
            params.push(format!("{name}_b"), vec![cols], vec![0.0; cols])?;
            Ok(())
        };
        dense(&mut params, "fc1", obs_dim, hidden)?;
        dense(&mut params, "fc2", hidden, mdp.n_actions)?;
        let embeddings = (0..mdp.n_states).map(|s| mdp.embedding(s).to_vec()).collect();
        Ok(MlpPolicy {
            obs_dim,
            n_actions: mdp.n_actions,
            hidden,
            embeddings,
            params,
        })
    }

    fn logits_graph(
        &self,
        graph: &mut Graph,
        param_ids: &[crate::autodiff::NodeId],
        state: usize,
    ) -> Result<crate::autodiff::NodeId> {
        let x = graph.constant(
            Tensor::new(vec![1, self.obs_dim], self.embeddings[state].clone()).expect("embedding"),
        );
        let h = graph.matmul(x, param_ids[0])?;
        let h = graph.add(h, param_ids[1])?;
        let h = graph.relu(h);
        let out = graph.matmul(h, param_ids[2])?;
        graph.add(out, param_ids[3])
    }
}

impl Policy for MlpPolicy {
    fn action_probs(&self, state: usize) -> Vec<f64> {
        let mut graph = Graph::new();
        let param_ids: Vec<_> = self
            .params
            .entries()
            .iter()
            .map(|p| graph.constant(Tensor::new(p.shape.clone(), p.data.clone()).expect("param")))
            .collect();
        let logits = self
            .logits_graph(&mut graph, &param_ids, state)
            .expect("mlp forward");
        softmax(graph.value(logits).data())
    }
}

impl DifferentiablePolicy for MlpPolicy {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn weighted_score_grads(&self, items: &[ScoreItem]) -> Result<ParamGrads> {
        let mut grads = ParamGrads::zeros_like(&self.params);
        if items.is_empty() {
            return Ok(grads);
        }
        let mut graph = Graph::new();
        let param_ids = self.params.leaves(&mut graph);
        let mut surrogate = None;
        for item in items {
            if item.state >= self.embeddings.len() {
                return Err(Error::InvalidState {
                    state: item.state,
                    n_states: self.embeddings.len(),
                });
            }
            let logits = self.logits_graph(&mut graph, &param_ids, item.state)?;
            let logp = graph.log_softmax(logits, 1)?;
            let mut mask = vec![0.0; self.n_actions];
            mask[item.action] = 1.0;
            let mask = graph.constant(Tensor::new(vec![1, self.n_actions], mask)?);
            let picked = graph.mul(logp, mask)?;
            let picked = graph.sum(picked);
            let term = graph.scale(picked, item.coeff);
            surrogate = Some(match surrogate {
                None => term,
                Some(acc) => graph.add(acc, term)?,
            });
        }
        let loss = surrogate.expect("non-empty items");
        let back = graph.backward(loss)?;
        for (p, &id) in self.params.entries().iter().zip(&param_ids) {
            if let (Some(slot), Some(g)) = (grads.get_mut(&p.name), back.wrt(id)) {
                slot.copy_from_slice(g);
            }
        }
        Ok(grads)
    }
}

/// Evaluation-policy softened toward uniform: (1 - eps) pi + eps / |A|.
/// The standard construction for benchmark behavior policies.
pub struct SoftenedPolicy<'a, P: Policy> {
    pub base: &'a P,
    pub epsilon: f64,
    pub n_actions: usize,
}

impl<'a, P: Policy> SoftenedPolicy<'a, P> {
    pub fn new(base: &'a P, epsilon: f64, n_actions: usize) -> Self {
        SoftenedPolicy {
            base,
            epsilon,
            n_actions,
        }
    }
}

impl<P: Policy> Policy for SoftenedPolicy<'_, P> {
    fn action_probs(&self, state: usize) -> Vec<f64> {
        let u = self.epsilon / self.n_actions as f64;
        self.base
            .action_probs(state)
            .iter()
            .map(|p| (1.0 - self.epsilon) * p + u)
            .collect()
    }
}

/// A gradient estimate plus its diagnostic scalars.
#[derive(Debug, Clone)]
pub struct GradientEstimate {
    pub grads: ParamGrads,
    /// Mean discounted deployment return over the batch.
    pub mean_return: f64,
    /// Mean squared residual (g - V_hat)^2 over the batch; zero when no
    /// penalty was applied.
    pub mean_penalty: f64,
}

/// Reward-to-go discounted from the episode start: G_t = sum_{t' >= t}
/// gamma^{t'} r_{t'}. Using the from-start discounting keeps the estimator
/// exactly unbiased for grad E[g(h)].
fn reward_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut tails = vec![0.0; rewards.len()];
    let mut tail = 0.0;
    for (t, &r) in rewards.iter().enumerate().rev() {
        tail = r + gamma * tail;
        tails[t] = tail;
    }
    let mut w = 1.0;
    for t in 0..rewards.len() {
        tails[t] *= w;
        w *= gamma;
    }
    tails
}

fn reinforce_items(
    trajectories: &[Trajectory],
    gamma: f64,
    baseline: Option<&[f64]>,
    items: &mut Vec<ScoreItem>,
) {
    let n = trajectories.len() as f64;
    for traj in trajectories {
        let togo = reward_to_go(&traj.rewards, gamma);
        let mut w = 1.0;
        for t in 0..traj.len() {
            let b = baseline.map_or(0.0, |b| w * b[traj.states[t]]);
            items.push(ScoreItem {
                state: traj.states[t],
                action: traj.actions[t],
                coeff: (togo[t] - b) / n,
            });
            w *= gamma;
        }
    }
}

/// Standard score-function policy gradient with reward-to-go and an
/// optional per-state baseline (discounted to match the from-start
/// reward-to-go).
pub fn reinforce_gradient(
    policy: &impl DifferentiablePolicy,
    trajectories: &[Trajectory],
    gamma: f64,
    baseline: Option<&[f64]>,
) -> Result<GradientEstimate> {
    if trajectories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut items = Vec::new();
    reinforce_items(trajectories, gamma, baseline, &mut items);
    let grads = policy.weighted_score_grads(&items)?;
    let mean_return = trajectories
        .iter()
        .map(|t| discounted_return(t, gamma))
        .sum::<f64>()
        / trajectories.len() as f64;
    Ok(GradientEstimate {
        grads,
        mean_return,
        mean_penalty: 0.0,
    })
}

/// How the predictability-penalty gradient is estimated from samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyGradientForm {
    /// Trajectory-level score-function estimator of
    /// grad E[(g - V_hat)^2]: the squared residual weights the summed
    /// scores of the deployment trajectory and of every assessment
    /// trajectory. Exactly unbiased; the default.
    ScoreFunction,
    /// Two-factor product form 2 (g - V_hat)(grad g - grad V_hat) with each
    /// grad term replaced by its per-trajectory score estimate. Mirrors the
    /// expanded-update expression; carries a correlation bias that the
    /// enumeration tests quantify.
    ResidualProduct,
}

impl Default for PenaltyGradientForm {
    fn default() -> Self {
        PenaltyGradientForm::ScoreFunction
    }
}

/// Predictors usable inside the evaluation-aware gradient: prediction plus
/// sensitivity to each assessment return.
pub trait ConditionedPredictor: ValuePredictor {
    fn predict_with_return_grads(
        &self,
        query: &[f64],
        data: &AssessmentDataset,
    ) -> Result<(f64, Vec<f64>)>;
}

impl ConditionedPredictor for LinearPredictor {
    fn predict_with_return_grads(
        &self,
        query: &[f64],
        data: &AssessmentDataset,
    ) -> Result<(f64, Vec<f64>)> {
        if data.entries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let weights: Vec<f64> = data
            .entries
            .iter()
            .map(|e| self.similarity.eval(query, &e.embedding))
            .collect();
        let den: f64 = weights.iter().sum();
        if den <= 0.0 {
            return Err(Error::DegenerateSimilarity { sum: den });
        }
        let value = weights
            .iter()
            .zip(&data.entries)
            .map(|(w, e)| w * e.ret)
            .sum::<f64>()
            / den;
        let grads = weights.iter().map(|w| w / den).collect();
        Ok((value, grads))
    }
}

impl ConditionedPredictor for TransformerPredictor {
    fn predict_with_return_grads(
        &self,
        query: &[f64],
        data: &AssessmentDataset,
    ) -> Result<(f64, Vec<f64>)> {
        TransformerPredictor::predict_with_return_grads(self, query, data)
    }
}

/// Everything the penalty term needs beyond the deployment batch.
pub struct PenaltyContext<'a, Pr: ConditionedPredictor> {
    pub predictor: &'a Pr,
    /// Assessment dataset built from `assess_trajectories` (same order).
    pub data: &'a AssessmentDataset,
    pub assess_trajectories: &'a [Trajectory],
    pub assess_gamma: f64,
    pub beta: f64,
    pub form: PenaltyGradientForm,
}

/// Evaluation-aware policy gradient: the standard policy-gradient term
/// minus `2 beta` times the predictability-penalty term. With `beta = 0`
/// this is exactly [`reinforce_gradient`].
pub fn evarl_gradient<Pr: ConditionedPredictor>(
    policy: &impl DifferentiablePolicy,
    mdp: &TabularMdp,
    deploy_trajectories: &[Trajectory],
    baseline: Option<&[f64]>,
    ctx: &PenaltyContext<'_, Pr>,
) -> Result<GradientEstimate> {
    if ctx.beta < 0.0 {
        return Err(Error::invalid(format!("beta {} must be >= 0", ctx.beta)));
    }
    if ctx.beta == 0.0 {
        return reinforce_gradient(policy, deploy_trajectories, mdp.gamma, baseline);
    }
    if deploy_trajectories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ctx.data.k() != ctx.assess_trajectories.len() {
        return Err(Error::invalid(
            "assessment dataset and trajectories disagree on k",
        ));
    }

    let n = deploy_trajectories.len() as f64;
    let k = ctx.assess_trajectories.len();
    let mut items = Vec::new();
    reinforce_items(deploy_trajectories, mdp.gamma, baseline, &mut items);

    // Residuals and predictor sensitivities per deployment episode.
    let mut residuals = Vec::with_capacity(deploy_trajectories.len());
    let mut return_grads = Vec::with_capacity(deploy_trajectories.len());
    let mut mean_return = 0.0;
    for traj in deploy_trajectories {
        let g = discounted_return(traj, mdp.gamma);
        mean_return += g / n;
        let query = mdp.embedding(traj.states[0]);
        let (v_hat, dg) = ctx.predictor.predict_with_return_grads(query, ctx.data)?;
        residuals.push(g - v_hat);
        return_grads.push(dg);
    }
    let mean_penalty = residuals.iter().map(|r| r * r).sum::<f64>() / n;

    // Penalty contribution as per-step score coefficients.
    match ctx.form {
        PenaltyGradientForm::ScoreFunction => {
            // -beta * mean_j r_j^2 * (S_D^j + sum_i S_A^i)
            for (traj, r) in deploy_trajectories.iter().zip(&residuals) {
                let c = -ctx.beta * r * r / n;
                for t in 0..traj.len() {
                    items.push(ScoreItem {
                        state: traj.states[t],
                        action: traj.actions[t],
                        coeff: c,
                    });
                }
            }
            let shared = -ctx.beta * mean_penalty;
            for traj in ctx.assess_trajectories {
                for t in 0..traj.len() {
                    items.push(ScoreItem {
                        state: traj.states[t],
                        action: traj.actions[t],
                        coeff: shared,
                    });
                }
            }
        }
        PenaltyGradientForm::ResidualProduct => {
            // -2 beta mean_j r_j (g_D^j S_D^j - sum_i dVhat_j/dg_i g_A^i S_A^i)
            for (j, traj) in deploy_trajectories.iter().enumerate() {
                let g = discounted_return(traj, mdp.gamma);
                let c = -2.0 * ctx.beta * residuals[j] * g / n;
                for t in 0..traj.len() {
                    items.push(ScoreItem {
                        state: traj.states[t],
                        action: traj.actions[t],
                        coeff: c,
                    });
                }
            }
            for (i, traj) in ctx.assess_trajectories.iter().enumerate() {
                let g_a = discounted_return(traj, ctx.assess_gamma);
                let weight: f64 = (0..deploy_trajectories.len())
                    .map(|j| residuals[j] * return_grads[j][i])
                    .sum::<f64>()
                    / n;
                let c = 2.0 * ctx.beta * weight * g_a;
                for t in 0..traj.len() {
                    items.push(ScoreItem {
                        state: traj.states[t],
                        action: traj.actions[t],
                        coeff: c,
                    });
                }
            }
            let _ = k;
        }
    }

    let grads = policy.weighted_score_grads(&items)?;
    Ok(GradientEstimate {
        grads,
        mean_return,
        mean_penalty,
    })
}

/// Gradient-ascent step: params += learning_rate * grads.
pub fn apply_update(
    policy: &mut impl DifferentiablePolicy,
    estimate: &GradientEstimate,
    learning_rate: f64,
) -> Result<()> {
    policy.params_mut().apply_step(&estimate.grads, learning_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enumeration::enumerate_from_start_dist;
    use crate::mdp::{exact_performance, sample_random_mdp};
    use crate::predictor::Similarity;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn action_probs_uniform_for_zero_logits() {
        let policy = TabularPolicy::zeros(2, 4);
        let p = policy.action_probs(0);
        for &v in &p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn action_probs_saturate() {
        let policy = TabularPolicy::from_logits(1, 2, vec![10.0, -10.0]).unwrap();
        let p = policy.action_probs(0);
        assert!((p[0] - 1.0).abs() < 1e-4);
        assert!(p[1] < 1e-4);
    }

    #[test]
    fn action_probs_normalized_for_random_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-30.0..30.0)).collect();
            let policy = TabularPolicy::from_logits(2, 3, logits).unwrap();
            for s in 0..2 {
                let sum: f64 = policy.action_probs(s).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    fn bandit(rewards: [f64; 2]) -> TabularMdp {
        TabularMdp::new(
            1,
            2,
            vec![1.0, 1.0],
            rewards.to_vec(),
            1.0,
            vec![1.0],
            1,
        )
        .unwrap()
    }

    #[test]
    fn zero_returns_zero_gradient() {
        let policy = TabularPolicy::zeros(1, 2);
        let trajs = vec![Trajectory {
            states: vec![0, 0],
            actions: vec![1],
            rewards: vec![0.0],
        }];
        let est = reinforce_gradient(&policy, &trajs, 1.0, None).unwrap();
        assert_eq!(est.grads.max_abs(), 0.0);
    }

    /// Exact expected gradient of an estimator over all trajectories.
    fn expected_gradient<P: DifferentiablePolicy>(
        mdp: &TabularMdp,
        policy: &P,
        horizon: usize,
        f: impl Fn(&Trajectory) -> Result<GradientEstimate>,
    ) -> ParamGrads {
        let mut total = ParamGrads::zeros_like(policy.params());
        for wt in enumerate_from_start_dist(mdp, policy, horizon).unwrap() {
            let est = f(&wt.trajectory).unwrap();
            total.add_scaled(&est.grads, wt.prob);
        }
        total
    }

    fn finite_diff_objective(
        policy: &TabularPolicy,
        objective: impl Fn(&TabularPolicy) -> f64,
    ) -> Vec<f64> {
        let h = 1e-5;
        let logits = policy.logits().to_vec();
        let mut grad = vec![0.0; logits.len()];
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus[i] += h;
            let mut minus = logits.clone();
            minus[i] -= h;
            let p_pol =
                TabularPolicy::from_logits(policy.n_states, policy.n_actions, plus).unwrap();
            let m_pol =
                TabularPolicy::from_logits(policy.n_states, policy.n_actions, minus).unwrap();
            grad[i] = (objective(&p_pol) - objective(&m_pol)) / (2.0 * h);
        }
        grad
    }

    #[test]
    fn reinforce_expectation_matches_exact_performance_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mdp = sample_random_mdp(2, 2, false, 0.9, 2, &mut rng).unwrap();
        let policy =
            TabularPolicy::from_logits(2, 2, vec![0.3, -0.2, 0.1, 0.6]).unwrap();
        let expected = expected_gradient(&mdp, &policy, 2, |t| {
            reinforce_gradient(&policy, std::slice::from_ref(t), 0.9, None)
        });
        let fd = finite_diff_objective(&policy, |p| exact_performance(&mdp, p));
        let got = expected.get("logits").unwrap();
        for (a, b) in got.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn reinforce_with_baseline_stays_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mdp = sample_random_mdp(2, 2, false, 0.8, 2, &mut rng).unwrap();
        let policy = TabularPolicy::from_logits(2, 2, vec![0.5, 0.0, -0.4, 0.2]).unwrap();
        let baseline = vec![0.7, -0.3];
        let expected = expected_gradient(&mdp, &policy, 2, |t| {
            reinforce_gradient(&policy, std::slice::from_ref(t), 0.8, Some(&baseline))
        });
        let fd = finite_diff_objective(&policy, |p| exact_performance(&mdp, p));
        let got = expected.get("logits").unwrap();
        for (a, b) in got.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn bandit_ascent_reaches_optimum() {
        let mdp = bandit([1.0, 0.0]);
        let mut policy = TabularPolicy::zeros(1, 2);
        let mut last_j = exact_performance(&mdp, &policy);
        for _ in 0..300 {
            let est = expected_gradient(&mdp, &policy, 1, |t| {
                reinforce_gradient(&policy, std::slice::from_ref(t), 1.0, None)
            });
            policy.params_mut().apply_step(&est, 0.5).unwrap();
            let j = exact_performance(&mdp, &policy);
            assert!(j >= last_j - 1e-12, "performance decreased: {last_j} -> {j}");
            last_j = j;
        }
        assert!(policy.action_probs(0)[0] > 0.99);
    }

    #[test]
    fn apply_update_examples() {
        let mut policy = TabularPolicy::zeros(1, 2);
        let mut grads = ParamGrads::zeros_like(policy.params());
        grads.get_mut("logits").unwrap().copy_from_slice(&[1.0, -1.0]);
        let est = GradientEstimate {
            grads,
            mean_return: 0.0,
            mean_penalty: 0.0,
        };
        apply_update(&mut policy, &est, 0.0).unwrap();
        assert_eq!(policy.logits(), &[0.0, 0.0]);
        // Two half steps equal one full step.
        let mut a = policy.clone();
        apply_update(&mut a, &est, 0.05).unwrap();
        apply_update(&mut a, &est, 0.05).unwrap();
        let mut b = policy.clone();
        apply_update(&mut b, &est, 0.1).unwrap();
        for (x, y) in a.logits().iter().zip(b.logits()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn beta_zero_is_bitwise_reinforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = sample_random_mdp(3, 2, false, 0.9, 4, &mut rng).unwrap();
        let policy = TabularPolicy::zeros(3, 2);
        let trajs: Vec<Trajectory> = (0..4)
            .map(|s| crate::mdp::rollout(&mdp, &policy, s % 3, 4, &mut rng).unwrap())
            .collect();
        let assess = vec![crate::mdp::rollout(&mdp, &policy, 0, 4, &mut rng).unwrap()];
        let data = AssessmentDataset::new(vec![crate::predictor::AssessmentEntry {
            embedding: vec![0.0],
            ret: discounted_return(&assess[0], 1.0),
        }]);
        let predictor = LinearPredictor::new(Similarity::Rbf { sigma: 1.0 });
        let ctx = PenaltyContext {
            predictor: &predictor,
            data: &data,
            assess_trajectories: &assess,
            assess_gamma: 1.0,
            beta: 0.0,
            form: PenaltyGradientForm::ScoreFunction,
        };
        let a = evarl_gradient(&policy, &mdp, &trajs, None, &ctx).unwrap();
        let b = reinforce_gradient(&policy, &trajs, 0.9, None).unwrap();
        for ((_, ga), (_, gb)) in a.grads.entries().iter().zip(b.grads.entries()) {
            for (x, y) in ga.iter().zip(gb) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn negative_beta_rejected() {
        let mdp = bandit([1.0, 0.0]);
        let policy = TabularPolicy::zeros(1, 2);
        let predictor = LinearPredictor::new(Similarity::Rbf { sigma: 1.0 });
        let data = AssessmentDataset::default();
        let ctx = PenaltyContext {
            predictor: &predictor,
            data: &data,
            assess_trajectories: &[],
            assess_gamma: 1.0,
            beta: -0.5,
            form: PenaltyGradientForm::ScoreFunction,
        };
        assert!(evarl_gradient(&policy, &mdp, &[], None, &ctx).is_err());
    }

    #[test]
    fn perfect_predictor_zeroes_the_penalty() {
        // Deterministic single-action chain: g is constant, predictor with
        // that constant gives zero residual, so the evarl gradient equals
        // the plain policy gradient even at large beta.
        let mdp = TabularMdp::new(
            1,
            2,
            vec![1.0, 1.0],
            vec![0.5, 0.5],
            1.0,
            vec![1.0],
            2,
        )
        .unwrap();
        let policy = TabularPolicy::zeros(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trajs: Vec<Trajectory> = (0..3)
            .map(|_| crate::mdp::rollout(&mdp, &policy, 0, 2, &mut rng).unwrap())
            .collect();
        let assess = vec![crate::mdp::rollout(&mdp, &policy, 0, 2, &mut rng).unwrap()];
        let data = AssessmentDataset::new(vec![crate::predictor::AssessmentEntry {
            embedding: vec![0.0],
            ret: 1.0, // equals every deployment return
        }]);
        let predictor = LinearPredictor::new(Similarity::Rbf { sigma: 1.0 });
        for form in [
            PenaltyGradientForm::ScoreFunction,
            PenaltyGradientForm::ResidualProduct,
        ] {
            let ctx = PenaltyContext {
                predictor: &predictor,
                data: &data,
                assess_trajectories: &assess,
                assess_gamma: 1.0,
                beta: 5.0,
                form,
            };
            let a = evarl_gradient(&policy, &mdp, &trajs, None, &ctx).unwrap();
            let b = reinforce_gradient(&policy, &trajs, 1.0, None).unwrap();
            assert_eq!(a.mean_penalty, 0.0);
            for ((_, ga), (_, gb)) in a.grads.entries().iter().zip(b.grads.entries()) {
                for (x, y) in ga.iter().zip(gb) {
                    assert!((x - y).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn evarl_expectation_matches_exact_objective_gradient() {
        // k = 1 linear predictor on an enumerable 2-state MDP. The exact
        // expectation of the default (score-function) estimator must match
        // finite differences of E[g_D] - beta E[(g_D - g_A)^2]; the
        // residual-product form must deviate by exactly
        // -beta (grad E[g_D^2] + grad E[g_A^2]).
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mdp = sample_random_mdp(2, 2, false, 0.9, 2, &mut rng).unwrap();
        let policy = TabularPolicy::from_logits(2, 2, vec![0.4, -0.3, -0.1, 0.2]).unwrap();
        let beta = 0.1;
        let assess_gamma = 1.0;
        let horizon = 2;
        let predictor = LinearPredictor::new(Similarity::Rbf { sigma: 1.0 });

        let deploy_all = |p: &TabularPolicy| enumerate_from_start_dist(&mdp, p, horizon).unwrap();
        let assess_all = |p: &TabularPolicy| {
            crate::enumeration::enumerate_trajectories(&mdp, p, 0, horizon).unwrap()
        };

        let objective = |p: &TabularPolicy| -> f64 {
            let mut total = 0.0;
            for a in &assess_all(p) {
                let g_a = discounted_return(&a.trajectory, assess_gamma);
                for d in &deploy_all(p) {
                    let g_d = discounted_return(&d.trajectory, mdp.gamma);
                    total += a.prob * d.prob * (g_d - beta * (g_d - g_a) * (g_d - g_a));
                }
            }
            total
        };
        let fd = finite_diff_objective(&policy, objective);

        let expected_for = |form: PenaltyGradientForm| -> Vec<f64> {
            let mut total = ParamGrads::zeros_like(policy.params());
            for a in &assess_all(&policy) {
                let g_a = discounted_return(&a.trajectory, assess_gamma);
                let data = AssessmentDataset::new(vec![crate::predictor::AssessmentEntry {
                    embedding: mdp.embedding(0).to_vec(),
                    ret: g_a,
                }]);
                let assess_slice = std::slice::from_ref(&a.trajectory);
                for d in &deploy_all(&policy) {
                    let ctx = PenaltyContext {
                        predictor: &predictor,
                        data: &data,
                        assess_trajectories: assess_slice,
                        assess_gamma,
                        beta,
                        form,
                    };
                    let est = evarl_gradient(
                        &policy,
                        &mdp,
                        std::slice::from_ref(&d.trajectory),
                        None,
                        &ctx,
                    )
                    .unwrap();
                    total.add_scaled(&est.grads, a.prob * d.prob);
                }
            }
            total.get("logits").unwrap().to_vec()
        };

        let score_form = expected_for(PenaltyGradientForm::ScoreFunction);
        for (a, b) in score_form.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6, "score form: {a} vs fd {b}");
        }

        // Correlation bias of the product form, quantified exactly.
        let product_form = expected_for(PenaltyGradientForm::ResidualProduct);
        let second_moment = |p: &TabularPolicy| -> f64 {
            deploy_all(p)
                .iter()
                .map(|d| {
                    let g = discounted_return(&d.trajectory, mdp.gamma);
                    d.prob * g * g
                })
                .sum::<f64>()
                + assess_all(p)
                    .iter()
                    .map(|a| {
                        let g = discounted_return(&a.trajectory, assess_gamma);
                        a.prob * g * g
                    })
                    .sum::<f64>()
        };
        let fd_second = finite_diff_objective(&policy, second_moment);
        let mut bias_seen = 0.0_f64;
        for i in 0..4 {
            let predicted = -beta * fd_second[i];
            let observed = product_form[i] - score_form[i];
            bias_seen = bias_seen.max(observed.abs());
            assert!(
                (observed - predicted).abs() < 1e-6,
                "bias[{i}]: observed {observed} vs predicted {predicted}"
            );
        }
        assert!(bias_seen > 1e-4, "product-form bias unexpectedly small");
    }

    #[test]
    fn mlp_policy_scores_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut mdp = sample_random_mdp(3, 2, false, 0.9, 3, &mut rng).unwrap();
        mdp.set_embeddings(2, vec![0.1, 0.9, 0.5, 0.5, 0.9, 0.1])
            .unwrap();
        let policy = MlpPolicy::init(&mdp, 4, &mut rng).unwrap();
        let items = vec![
            ScoreItem {
                state: 0,
                action: 1,
                coeff: 0.7,
            },
            ScoreItem {
                state: 2,
                action: 0,
                coeff: -0.4,
            },
        ];
        let grads = policy.weighted_score_grads(&items).unwrap();
        // Finite differences of sum_j coeff_j log pi(a_j | s_j).
        let h = 1e-5;
        let objective = |p: &MlpPolicy| -> f64 {
            items
                .iter()
                .map(|it| it.coeff * p.action_probs(it.state)[it.action].ln())
                .sum()
        };
        for entry in policy.params().entries() {
            let analytic = grads.get(&entry.name).unwrap();
            for i in 0..entry.data.len() {
                let mut plus = policy.clone();
                plus.params_mut().get_mut(&entry.name).unwrap().data[i] += h;
                let mut minus = policy.clone();
                minus.params_mut().get_mut(&entry.name).unwrap().data[i] -= h;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
                assert!(
                    (analytic[i] - numeric).abs() < 1e-6,
                    "{}[{i}]: {} vs {numeric}",
                    entry.name,
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn softmax_rows_stay_normalized_after_updates() {
        let mdp = bandit([1.0, -1.0]);
        let mut policy = TabularPolicy::zeros(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let trajs: Vec<Trajectory> = (0..4)
                .map(|_| crate::mdp::rollout(&mdp, &policy, 0, 1, &mut rng).unwrap())
                .collect();
            let est = reinforce_gradient(&policy, &trajs, 1.0, None).unwrap();
            apply_update(&mut policy, &est, 0.2).unwrap();
            let sum: f64 = policy.action_probs(0).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
