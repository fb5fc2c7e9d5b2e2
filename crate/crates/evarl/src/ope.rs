//! Off-policy evaluation baselines: Monte Carlo, trajectory importance
//! sampling, per-decision importance sampling, doubly robust, and fitted
//! Q-evaluation, plus an error benchmark against exact tabular ground
//! truth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    discounted_return, exact_performance, rollout, sample_index, Policy, TabularMdp, Trajectory,
};
use crate::policy::SoftenedPolicy;

/// Trajectories logged under a behavior policy, with the per-step behavior
/// probabilities pi_b(a_t | s_t) needed for reweighting.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BehaviorDataset {
    pub trajectories: Vec<Trajectory>,
    /// One vector per trajectory, one probability per step, each in (0, 1].
    pub behavior_probs: Vec<Vec<f64>>,
}

impl BehaviorDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectories.len() != self.behavior_probs.len() {
            return Err(Error::invalid("trajectory/probability count mismatch"));
        }
        for (traj, probs) in self.trajectories.iter().zip(&self.behavior_probs) {
            if traj.len() != probs.len() {
                return Err(Error::invalid("per-step probability length mismatch"));
            }
            for (&p, (&s, &a)) in probs.iter().zip(traj.states.iter().zip(&traj.actions)) {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::UnsupportedAction { state: s, action: a });
                }
            }
        }
        Ok(())
    }

    /// Collect `n` on-policy trajectories under `behavior`, recording its
    /// action probabilities, with start states drawn from the MDP's start
    /// distribution.
    pub fn collect(
        mdp: &TabularMdp,
        behavior: &impl Policy,
        n: usize,
        horizon: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut trajectories = Vec::with_capacity(n);
        let mut behavior_probs = Vec::with_capacity(n);
        for _ in 0..n {
            let s0 = sample_index(mdp.start_dist(), rng);
            let traj = rollout(mdp, behavior, s0, horizon, rng)?;
            let probs = traj
                .states
                .iter()
                .zip(&traj.actions)
                .map(|(&s, &a)| behavior.action_probs(s)[a])
                .collect();
            trajectories.push(traj);
            behavior_probs.push(probs);
        }
        let data = BehaviorDataset {
            trajectories,
            behavior_probs,
        };
        data.validate()?;
        Ok(data)
    }

    /// Serialize as JSON lines (one trajectory + probabilities per line).
    pub fn dump_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (t, p) in self.trajectories.iter().zip(&self.behavior_probs) {
            out.push_str(&serde_json::to_string(&(t, p))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn load_jsonl(text: &str) -> Result<Self> {
        let mut data = BehaviorDataset::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (t, p): (Trajectory, Vec<f64>) = serde_json::from_str(line)?;
            data.trajectories.push(t);
            data.behavior_probs.push(p);
        }
        data.validate()?;
        Ok(data)
    }
}

/// On-policy Monte Carlo estimate: the mean return.
pub fn mc_estimate(trajectories: &[Trajectory], gamma: f64) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(trajectories
        .iter()
        .map(|t| discounted_return(t, gamma))
        .sum::<f64>()
        / trajectories.len() as f64)
}

fn step_ratio(
    eval: &impl Policy,
    traj: &Trajectory,
    probs: &[f64],
    t: usize,
) -> Result<f64> {
    let (s, a) = (traj.states[t], traj.actions[t]);
    let pb = probs[t];
    if pb <= 0.0 {
        return Err(Error::UnsupportedAction { state: s, action: a });
    }
    Ok(eval.action_probs(s)[a] / pb)
}

/// Trajectory importance sampling: mean of g(h) times the full-trajectory
/// likelihood ratio.
pub fn tis_estimate(data: &BehaviorDataset, eval: &impl Policy, gamma: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (traj, probs) in data.trajectories.iter().zip(&data.behavior_probs) {
        let mut w = 1.0;
        for t in 0..traj.len() {
            w *= step_ratio(eval, traj, probs, t)?;
        }
        total += w * discounted_return(traj, gamma);
    }
    Ok(total / data.len() as f64)
}

/// Per-decision importance sampling: each reward is weighted by the ratio
/// product up to its own step only.
pub fn pdis_estimate(data: &BehaviorDataset, eval: &impl Policy, gamma: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (traj, probs) in data.trajectories.iter().zip(&data.behavior_probs) {
        let mut w = 1.0;
        let mut disc = 1.0;
        for t in 0..traj.len() {
            w *= step_ratio(eval, traj, probs, t)?;
            total += disc * w * traj.rewards[t];
            disc *= gamma;
        }
    }
    Ok(total / data.len() as f64)
}

/// Time-indexed value tables for the doubly robust control variates:
/// `v[t][s]` for t in 0..=horizon and `q[t][s][a]` for t in 0..horizon.
/// Zero tables reduce DR to PDIS exactly.
#[derive(Debug, Clone, Default)]
pub struct ValueTables {
    pub q: Vec<Vec<Vec<f64>>>,
    pub v: Vec<Vec<f64>>,
}

impl ValueTables {
    pub fn zeros(horizon: usize, n_states: usize, n_actions: usize) -> Self {
        ValueTables {
            q: vec![vec![vec![0.0; n_actions]; n_states]; horizon],
            v: vec![vec![0.0; n_states]; horizon + 1],
        }
    }

    fn v_at(&self, t: usize, s: usize) -> f64 {
        self.v.get(t).map_or(0.0, |row| row[s])
    }

    fn q_at(&self, t: usize, s: usize, a: usize) -> f64 {
        self.q.get(t).map_or(0.0, |row| row[s][a])
    }
}

/// Doubly robust estimate: PDIS-weighted temporal-difference corrections
/// around the approximate value functions.
pub fn dr_estimate(
    data: &BehaviorDataset,
    eval: &impl Policy,
    tables: &ValueTables,
    gamma: f64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (traj, probs) in data.trajectories.iter().zip(&data.behavior_probs) {
        let mut acc = tables.v_at(0, traj.states[0]);
        let mut w = 1.0;
        let mut disc = 1.0;
        for t in 0..traj.len() {
            w *= step_ratio(eval, traj, probs, t)?;
            let td = traj.rewards[t] + gamma * tables.v_at(t + 1, traj.states[t + 1])
                - tables.q_at(t, traj.states[t], traj.actions[t]);
            acc += disc * w * td;
            disc *= gamma;
        }
        total += acc;
    }
    Ok(total / data.len() as f64)
}

/// Result of fitted Q-evaluation: the fitted table, the performance
/// estimate, and any coverage warnings for (state, action) pairs the
/// evaluation policy visits but the data never covers.
#[derive(Debug, Clone)]
pub struct FqeResult {
    pub q: Vec<Vec<Vec<f64>>>,
    pub j_estimate: f64,
    pub coverage_warnings: Vec<(usize, usize)>,
}

/// Fitted Q-evaluation in the tabular limit: fit an empirical model
/// (transition frequencies and mean rewards) from the data, then run
/// backward induction under the evaluation policy. Least squares over
/// indicator features is exactly the empirical average, so this matches
/// iterative fitted regression without the optimizer noise.
pub fn fqe_estimate(
    data: &BehaviorDataset,
    eval: &impl Policy,
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    gamma: f64,
) -> Result<FqeResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts = vec![0.0f64; n_states * n_actions];
    let mut reward_sum = vec![0.0f64; n_states * n_actions];
    let mut next_counts = vec![0.0f64; n_states * n_actions * n_states];
    for traj in &data.trajectories {
        for t in 0..traj.len() {
            let (s, a, sn) = (traj.states[t], traj.actions[t], traj.states[t + 1]);
            counts[s * n_actions + a] += 1.0;
            reward_sum[s * n_actions + a] += traj.rewards[t];
            next_counts[(s * n_actions + a) * n_states + sn] += 1.0;
        }
    }

    let mut q = vec![vec![vec![0.0; n_actions]; n_states]; horizon];
    let mut v_next = vec![0.0; n_states];
    for t in (0..horizon).rev() {
        let mut v_here = vec![0.0; n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                let c = counts[s * n_actions + a];
                if c == 0.0 {
                    continue; // uncovered pair: Q stays zero, flagged below
                }
                let r = reward_sum[s * n_actions + a] / c;
                let mut next_v = 0.0;
                for sn in 0..n_states {
                    let cn = next_counts[(s * n_actions + a) * n_states + sn];
                    if cn > 0.0 {
                        next_v += (cn / c) * v_next[sn];
                    }
                }
                q[t][s][a] = r + gamma * next_v;
            }
            let probs = eval.action_probs(s);
            v_here[s] = probs
                .iter()
                .enumerate()
                .map(|(a, &p)| p * q[t][s][a])
                .sum();
        }
        v_next = v_here;
    }

    let mut coverage_warnings = Vec::new();
    for s in 0..n_states {
        let probs = eval.action_probs(s);
        for a in 0..n_actions {
            if counts[s * n_actions + a] == 0.0 && probs[a] > 0.0 {
                coverage_warnings.push((s, a));
            }
        }
    }

    // J from the empirical start-state distribution of the data.
    let mut j = 0.0;
    for traj in &data.trajectories {
        let s0 = traj.states[0];
        let probs = eval.action_probs(s0);
        j += probs
            .iter()
            .enumerate()
            .map(|(a, &p)| p * q[0][s0][a])
            .sum::<f64>();
    }
    j /= data.len() as f64;

    Ok(FqeResult {
        q,
        j_estimate: j,
        coverage_warnings,
    })
}

/// Which estimator a benchmark row refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    Mc,
    Tis,
    Pdis,
    Dr,
    Fqe,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Mc => "mc",
            EstimatorKind::Tis => "tis",
            EstimatorKind::Pdis => "pdis",
            EstimatorKind::Dr => "dr",
            EstimatorKind::Fqe => "fqe",
        }
    }

    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Mc,
        EstimatorKind::Tis,
        EstimatorKind::Pdis,
        EstimatorKind::Dr,
        EstimatorKind::Fqe,
    ];
}

/// One row of the benchmark table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub estimator: String,
    pub mae: f64,
    pub se: f64,
    pub n_data: usize,
}

/// Benchmark configuration: how much data each estimator sees and how the
/// behavior policy is built.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    /// Trajectories per trial (every estimator sees the same data).
    pub n_data: usize,
    pub trials: usize,
    /// Behavior policy: evaluation policy softened toward uniform.
    pub behavior_epsilon: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            n_data: 64,
            trials: 16,
            behavior_epsilon: 0.2,
        }
    }
}

/// Run every estimator on identical behavior data and report the mean
/// absolute error of the performance estimate against exact ground truth,
/// with its standard error over trials.
pub fn benchmark_mae(
    estimators: &[EstimatorKind],
    mdp: &TabularMdp,
    eval: &impl Policy,
    config: &BenchmarkConfig,
    rng: &mut impl Rng,
) -> Result<Vec<BenchmarkRow>> {
    let j_true = exact_performance(mdp, eval);
    let behavior = SoftenedPolicy::new(eval, config.behavior_epsilon, mdp.n_actions);
    // DR control variates: exact value tables under the evaluation policy.
    let v = crate::mdp::exact_value_table(mdp, eval, mdp.horizon, mdp.gamma);
    let q = crate::mdp::exact_q_table(mdp, eval, mdp.horizon, mdp.gamma);
    let tables = ValueTables { q, v };

    let mut errors: Vec<Vec<f64>> = vec![Vec::new(); estimators.len()];
    for _ in 0..config.trials {
        let data = BehaviorDataset::collect(mdp, &behavior, config.n_data, mdp.horizon, rng)?;
        for (i, kind) in estimators.iter().enumerate() {
            let estimate = match kind {
                EstimatorKind::Mc => {
                    // MC is on-policy: fresh rollouts under the evaluation
                    // policy with the same data budget.
                    let mut trajs = Vec::with_capacity(config.n_data);
                    for _ in 0..config.n_data {
                        let s0 = sample_index(mdp.start_dist(), rng);
                        trajs.push(rollout(mdp, eval, s0, mdp.horizon, rng)?);
                    }
                    mc_estimate(&trajs, mdp.gamma)?
                }
                EstimatorKind::Tis => tis_estimate(&data, eval, mdp.gamma)?,
                EstimatorKind::Pdis => pdis_estimate(&data, eval, mdp.gamma)?,
                EstimatorKind::Dr => dr_estimate(&data, eval, &tables, mdp.gamma)?,
                EstimatorKind::Fqe => {
                    fqe_estimate(&data, eval, mdp.n_states, mdp.n_actions, mdp.horizon, mdp.gamma)?
                        .j_estimate
                }
            };
            errors[i].push((estimate - j_true).abs());
        }
    }

    Ok(estimators
        .iter()
        .zip(&errors)
        .map(|(kind, errs)| {
            let n = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / n;
            let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
            BenchmarkRow {
                estimator: kind.name().to_string(),
                mae: mean,
                se: (var / n).sqrt(),
                n_data: config.n_data,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enumeration::enumerate_from_start_dist;
    use crate::mdp::{exact_q_table, exact_value_table, sample_random_mdp};
    use crate::policy::TabularPolicy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset_from(
        mdp: &TabularMdp,
        behavior: &impl Policy,
        n: usize,
        seed: u64,
    ) -> BehaviorDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BehaviorDataset::collect(mdp, behavior, n, mdp.horizon, &mut rng).unwrap()
    }

    #[test]
    fn mc_simple_means() {
        let t = |r: f64| Trajectory {
            states: vec![0, 0],
            actions: vec![0],
            rewards: vec![r],
        };
        assert_eq!(mc_estimate(&[t(3.0)], 1.0).unwrap(), 3.0);
        assert_eq!(mc_estimate(&[t(2.0), t(4.0)], 1.0).unwrap(), 3.0);
        assert!(mc_estimate(&[], 1.0).is_err());
    }

    #[test]
    fn is_family_reduces_to_mc_on_policy() {
        // pi = pi_b: unit weights make TIS, PDIS and DR(0,0) equal MC.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mdp = sample_random_mdp(3, 2, false, 0.9, 5, &mut rng).unwrap();
        let policy = TabularPolicy::from_logits(3, 2, vec![0.4, -0.1, 0.0, 0.3, -0.5, 0.2]).unwrap();
        let data = dataset_from(&mdp, &policy, 32, 1);
        let mc = mc_estimate(&data.trajectories, 0.9).unwrap();
        let tis = tis_estimate(&data, &policy, 0.9).unwrap();
        let pdis = pdis_estimate(&data, &policy, 0.9).unwrap();
        let zeros = ValueTables::zeros(5, 3, 2);
        let dr = dr_estimate(&data, &policy, &zeros, 0.9).unwrap();
        assert!((tis - mc).abs() < 1e-12, "tis {tis} vs mc {mc}");
        assert!((pdis - mc).abs() < 1e-12);
        assert!((dr - pdis).abs() < 1e-12);
    }

    #[test]
    fn pdis_equals_tis_on_horizon_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = sample_random_mdp(3, 2, false, 1.0, 1, &mut rng).unwrap();
        let behavior = TabularPolicy::zeros(3, 2);
        let eval = TabularPolicy::from_logits(3, 2, vec![0.9, -0.9, 0.0, 0.5, -0.2, 0.1]).unwrap();
        let data = dataset_from(&mdp, &behavior, 64, 2);
        let tis = tis_estimate(&data, &eval, 1.0).unwrap();
        let pdis = pdis_estimate(&data, &eval, 1.0).unwrap();
        assert!((tis - pdis).abs() < 1e-12);
    }

    #[test]
    fn dr_with_zero_tables_equals_pdis() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mdp = sample_random_mdp(4, 3, false, 0.8, 6, &mut rng).unwrap();
        let behavior = TabularPolicy::zeros(4, 3);
        let eval =
            TabularPolicy::from_logits(4, 3, (0..12).map(|i| (i as f64) * 0.1 - 0.5).collect())
                .unwrap();
        let data = dataset_from(&mdp, &behavior, 40, 5);
        let zeros = ValueTables::zeros(6, 4, 3);
        let dr = dr_estimate(&data, &eval, &zeros, 0.8).unwrap();
        let pdis = pdis_estimate(&data, &eval, 0.8).unwrap();
        assert!((dr - pdis).abs() < 1e-12);
    }

    #[test]
    fn is_estimators_unbiased_under_enumeration() {
        // Exact expectation over all behavior trajectories equals J of the
        // evaluation policy for TIS, PDIS and DR.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mdp = sample_random_mdp(2, 2, false, 0.9, 3, &mut rng).unwrap();
        let behavior =
            TabularPolicy::from_logits(2, 2, vec![0.2, -0.2, -0.3, 0.4]).unwrap();
        let eval = TabularPolicy::from_logits(2, 2, vec![-0.5, 0.5, 0.8, -0.1]).unwrap();
        let j = exact_performance(&mdp, &eval);
        let v = exact_value_table(&mdp, &eval, 3, 0.9);
        let q = exact_q_table(&mdp, &eval, 3, 0.9);
        let tables = ValueTables { q, v };

        let mut tis_mean = 0.0;
        let mut pdis_mean = 0.0;
        let mut dr_mean = 0.0;
        for wt in enumerate_from_start_dist(&mdp, &behavior, 3).unwrap() {
            let probs: Vec<f64> = wt
                .trajectory
                .states
                .iter()
                .zip(&wt.trajectory.actions)
                .map(|(&s, &a)| behavior.action_probs(s)[a])
                .collect();
            let data = BehaviorDataset {
                trajectories: vec![wt.trajectory.clone()],
                behavior_probs: vec![probs],
            };
            tis_mean += wt.prob * tis_estimate(&data, &eval, 0.9).unwrap();
            pdis_mean += wt.prob * pdis_estimate(&data, &eval, 0.9).unwrap();
            dr_mean += wt.prob * dr_estimate(&data, &eval, &tables, 0.9).unwrap();
        }
        assert!((tis_mean - j).abs() < 1e-10, "TIS {tis_mean} vs J {j}");
        assert!((pdis_mean - j).abs() < 1e-10, "PDIS {pdis_mean} vs J {j}");
        assert!((dr_mean - j).abs() < 1e-10, "DR {dr_mean} vs J {j}");
    }

    #[test]
    fn pdis_variance_no_worse_on_long_horizon() {
        // Late actions never affect early rewards, so per-decision weights
        // cut variance relative to full-trajectory weights.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mdp = sample_random_mdp(3, 2, false, 1.0, 8, &mut rng).unwrap();
        let behavior = TabularPolicy::zeros(3, 2);
        let eval = TabularPolicy::from_logits(3, 2, vec![0.6, -0.6, 0.3, -0.3, -0.4, 0.4]).unwrap();
        let mut tis_vals = Vec::new();
        let mut pdis_vals = Vec::new();
        for trial in 0..100 {
            let data = dataset_from(&mdp, &behavior, 16, 100 + trial);
            tis_vals.push(tis_estimate(&data, &eval, 1.0).unwrap());
            pdis_vals.push(pdis_estimate(&data, &eval, 1.0).unwrap());
        }
        let var = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
        };
        assert!(
            var(&pdis_vals) <= var(&tis_vals),
            "PDIS variance {} vs TIS {}",
            var(&pdis_vals),
            var(&tis_vals)
        );
    }

    #[test]
    fn dr_with_exact_tables_centers_on_value() {
        // pi = pi_b and exact Q/V: per-trajectory estimate is V(s_0) plus
        // zero-mean corrections; the trial mean lands within 3 SE of J.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mdp = sample_random_mdp(3, 2, false, 0.9, 5, &mut rng).unwrap();
        let policy = TabularPolicy::from_logits(3, 2, vec![0.3, -0.3, 0.1, 0.2, -0.1, 0.4]).unwrap();
        let j = exact_performance(&mdp, &policy);
        let v = exact_value_table(&mdp, &policy, 5, 0.9);
        let q = exact_q_table(&mdp, &policy, 5, 0.9);
        let tables = ValueTables { q, v };
        let mut vals = Vec::new();
        for trial in 0..200 {
            let data = dataset_from(&mdp, &policy, 8, 500 + trial);
            vals.push(dr_estimate(&data, &policy, &tables, 0.9).unwrap());
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let se = (var / n).sqrt();
        assert!((mean - j).abs() <= 3.0 * se + 1e-9, "mean {mean} vs J {j} (se {se})");
    }

    #[test]
    fn fqe_recovers_exact_q_under_full_coverage() {
        // Deterministic dynamics with a covering behavior policy: the
        // empirical model is exact, so FQE matches backward induction.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mdp = sample_random_mdp(3, 2, true, 0.9, 4, &mut rng).unwrap();
        let behavior = TabularPolicy::zeros(3, 2);
        let eval = TabularPolicy::from_logits(3, 2, vec![0.5, -0.5, -0.2, 0.2, 0.0, 0.3]).unwrap();
        // Large enough sample to cover every reachable (s, a).
        let data = dataset_from(&mdp, &behavior, 400, 3);
        let fqe = fqe_estimate(&data, &eval, 3, 2, 4, 0.9).unwrap();
        let q_exact = exact_q_table(&mdp, &eval, 4, 0.9);
        for t in 0..4 {
            for s in 0..3 {
                for a in 0..2 {
                    // Only compare covered pairs; uncovered ones are flagged.
                    if fqe.q[t][s][a] != 0.0 || q_exact[t][s][a] == 0.0 {
                        assert!(
                            (fqe.q[t][s][a] - q_exact[t][s][a]).abs() < 1e-10,
                            "q[{t}][{s}][{a}]"
                        );
                    }
                }
            }
        }
        assert!(fqe.coverage_warnings.is_empty());
    }

    #[test]
    fn fqe_zero_rewards_and_bandit_means() {
        // Zero-reward MDP: zero table.
        let mdp = TabularMdp::new(
            2,
            2,
            vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
            vec![0.0; 4],
            0.9,
            vec![0.5, 0.5],
            3,
        )
        .unwrap();
        let behavior = TabularPolicy::zeros(2, 2);
        let data = dataset_from(&mdp, &behavior, 50, 4);
        let fqe = fqe_estimate(&data, &behavior, 2, 2, 3, 0.9).unwrap();
        for t in 0..3 {
            for s in 0..2 {
                for a in 0..2 {
                    assert_eq!(fqe.q[t][s][a], 0.0);
                }
            }
        }

        // Single-state bandit: fitted Q equals per-action sample means.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let bandit = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![0.7, 0.2], 1.0, vec![1.0], 1)
            .unwrap();
        let uniform = TabularPolicy::zeros(1, 2);
        let data = BehaviorDataset::collect(&bandit, &uniform, 100, 1, &mut rng).unwrap();
        let fqe = fqe_estimate(&data, &uniform, 1, 2, 1, 1.0).unwrap();
        // Rewards are deterministic per action here, so the sample mean is
        // the reward itself.
        assert!((fqe.q[0][0][0] - 0.7).abs() < 1e-12);
        assert!((fqe.q[0][0][1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn fqe_flags_uncovered_pairs() {
        let bandit =
            TabularMdp::new(1, 2, vec![1.0, 1.0], vec![0.7, 0.2], 1.0, vec![1.0], 1).unwrap();
        // Behavior that only ever takes action 0.
        let behavior = TabularPolicy::from_logits(1, 2, vec![60.0, -60.0]).unwrap();
        let eval = TabularPolicy::zeros(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let data = BehaviorDataset::collect(&bandit, &behavior, 30, 1, &mut rng).unwrap();
        let fqe = fqe_estimate(&data, &eval, 1, 2, 1, 1.0).unwrap();
        assert_eq!(fqe.coverage_warnings, vec![(0, 1)]);
    }

    #[test]
    fn tis_rejects_zero_behavior_probability() {
        let data = BehaviorDataset {
            trajectories: vec![Trajectory {
                states: vec![0, 0],
                actions: vec![1],
                rewards: vec![1.0],
            }],
            behavior_probs: vec![vec![0.0]],
        };
        let eval = TabularPolicy::zeros(1, 2);
        assert!(matches!(
            tis_estimate(&data, &eval, 1.0),
            Err(Error::UnsupportedAction { state: 0, action: 1 })
        ));
    }

    #[test]
    fn tis_within_3se_of_exact_performance() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mdp = sample_random_mdp(2, 2, false, 0.9, 3, &mut rng).unwrap();
        let behavior = TabularPolicy::zeros(2, 2);
        let eval = TabularPolicy::from_logits(2, 2, vec![0.8, -0.8, -0.6, 0.6]).unwrap();
        let j = exact_performance(&mdp, &eval);
        let mut vals = Vec::new();
        for trial in 0..400 {
            let data = dataset_from(&mdp, &behavior, 16, 900 + trial);
            vals.push(tis_estimate(&data, &eval, 0.9).unwrap());
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let se = (var / n).sqrt();
        assert!((mean - j).abs() <= 3.0 * se + 1e-9, "mean {mean} vs J {j} (se {se})");
    }

    #[test]
    fn benchmark_schema_and_mc_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mdp = sample_random_mdp(4, 2, false, 0.9, 5, &mut rng).unwrap();
        let policy = TabularPolicy::from_logits(4, 2, (0..8).map(|i| 0.1 * i as f64).collect())
            .unwrap();
        let rows = benchmark_mae(
            &EstimatorKind::ALL,
            &mdp,
            &policy,
            &BenchmarkConfig {
                n_data: 32,
                trials: 8,
                behavior_epsilon: 0.2,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(rows.len(), 5);
        for row in &rows {
            assert_eq!(row.n_data, 32);
            assert!(row.mae.is_finite() && row.se.is_finite());
        }

        // MC error shrinks roughly like 1/sqrt(N) over budget doublings.
        let mut maes = Vec::new();
        for &n in &[16usize, 64, 256] {
            let rows = benchmark_mae(
                &[EstimatorKind::Mc],
                &mdp,
                &policy,
                &BenchmarkConfig {
                    n_data: n,
                    trials: 24,
                    behavior_epsilon: 0.2,
                },
                &mut rng,
            )
            .unwrap();
            maes.push(rows[0].mae);
        }
        assert!(maes[2] < maes[0], "MAE did not shrink: {maes:?}");
    }
}
