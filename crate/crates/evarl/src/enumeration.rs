//! Exact expectations over small MDPs by explicit trajectory enumeration.
//!
//! Everything here is exponential in the horizon and exists to cross-check
//! sampling estimators and gradient estimators on instances small enough to
//! enumerate.

use crate::error::Result;
use crate::mdp::{Policy, TabularMdp, Trajectory};

/// A trajectory together with its exact probability under the policy and
/// dynamics.
#[derive(Debug, Clone)]
pub struct WeightedTrajectory {
    pub trajectory: Trajectory,
    pub prob: f64,
}

/// All trajectories of length `horizon` from `start_state` with positive
/// probability. Size grows as `(n_actions * n_states)^horizon`.
pub fn enumerate_trajectories(
    mdp: &TabularMdp,
    policy: &impl Policy,
    start_state: usize,
    horizon: usize,
) -> Result<Vec<WeightedTrajectory>> {
    mdp.check_state(start_state)?;
    let mut out = Vec::new();
    let mut traj = Trajectory {
        states: vec![start_state],
        actions: Vec::new(),
        rewards: Vec::new(),
    };
    extend(mdp, policy, horizon, 1.0, &mut traj, &mut out);
    Ok(out)
}

fn extend(
    mdp: &TabularMdp,
    policy: &impl Policy,
    horizon: usize,
    prob: f64,
    traj: &mut Trajectory,
    out: &mut Vec<WeightedTrajectory>,
) {
    if traj.actions.len() == horizon {
        out.push(WeightedTrajectory {
            trajectory: traj.clone(),
            prob,
        });
        return;
    }
    let s = *traj.states.last().unwrap();
    let probs = policy.action_probs(s);
    for (a, &pa) in probs.iter().enumerate() {
        if pa <= 0.0 {
            continue;
        }
        let row = mdp.transition_row(s, a);
        for (sn, &pt) in row.iter().enumerate() {
            if pt <= 0.0 {
                continue;
            }
            traj.actions.push(a);
            traj.rewards.push(mdp.reward(s, a));
            traj.states.push(sn);
            extend(mdp, policy, horizon, prob * pa * pt, traj, out);
            traj.actions.pop();
            traj.rewards.pop();
            traj.states.pop();
        }
    }
}

/// All trajectories from the start distribution, weighted by
/// `mu(s0) * P(h | s0)`.
pub fn enumerate_from_start_dist(
    mdp: &TabularMdp,
    policy: &impl Policy,
    horizon: usize,
) -> Result<Vec<WeightedTrajectory>> {
    let mut out = Vec::new();
    for (s0, &mu) in mdp.start_dist().iter().enumerate() {
        if mu <= 0.0 {
            continue;
        }
        for mut wt in enumerate_trajectories(mdp, policy, s0, horizon)? {
            wt.prob *= mu;
            out.push(wt);
        }
    }
    Ok(out)
}

/// Exact expectation of `f` over trajectories from the start distribution.
pub fn expectation(
    mdp: &TabularMdp,
    policy: &impl Policy,
    horizon: usize,
    f: impl Fn(&Trajectory) -> f64,
) -> Result<f64> {
    let trajs = enumerate_from_start_dist(mdp, policy, horizon)?;
    Ok(trajs.iter().map(|wt| wt.prob * f(&wt.trajectory)).sum())
}

/// Iterate over every deterministic policy (one action per state) as an
/// action-assignment vector, in lexicographic order.
pub fn deterministic_policies(n_states: usize, n_actions: usize) -> DeterministicPolicies {
    DeterministicPolicies {
        n_states,
        n_actions,
        next: Some(vec![0; n_states]),
    }
}

pub struct DeterministicPolicies {
    n_states: usize,
    n_actions: usize,
    next: Option<Vec<usize>>,
}

impl Iterator for DeterministicPolicies {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        for i in (0..self.n_states).rev() {
            succ[i] += 1;
            if succ[i] < self.n_actions {
                self.next = Some(succ);
                break;
            }
            succ[i] = 0;
        }
        Some(current)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{discounted_return, exact_performance, sample_random_mdp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Uniform(usize);

    impl Policy for Uniform {
        fn action_probs(&self, _s: usize) -> Vec<f64> {
            vec![1.0 / self.0 as f64; self.0]
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mdp = sample_random_mdp(2, 2, false, 0.9, 3, &mut rng).unwrap();
        let trajs = enumerate_from_start_dist(&mdp, &Uniform(2), 3).unwrap();
        let total: f64 = trajs.iter().map(|wt| wt.prob).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn expected_return_matches_backward_induction() {
        // Path-sum route vs backward-induction route.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mdp = sample_random_mdp(3, 2, false, 0.7, 3, &mut rng).unwrap();
        let policy = Uniform(2);
        let j_enum = expectation(&mdp, &policy, 3, |t| discounted_return(t, 0.7)).unwrap();
        let j_exact = exact_performance(&mdp, &policy);
        assert!((j_enum - j_exact).abs() < 1e-12);
    }

    #[test]
    fn deterministic_policy_count() {
        let all: Vec<_> = deterministic_policies(3, 2).collect();
        assert_eq!(all.len(), 8);
        assert_eq!(all[0], vec![0, 0, 0]);
        assert_eq!(all[7], vec![1, 1, 1]);
    }
}
