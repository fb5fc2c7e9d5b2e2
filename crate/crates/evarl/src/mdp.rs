//! Finite-horizon tabular MDPs: construction, rollouts, returns and exact
//! value computation by backward induction.
//!
//! The same [`TabularMdp`] type serves as the deployment environment and,
//! paired with an [`AssessmentSpec`], as the assessment environment.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for probability-vector normalization checks.
pub const PROB_TOL: f64 = 1e-12;

/// A stochastic policy over a finite action space.
pub trait Policy {
    /// Probability of each action in the given state. Must sum to 1.
    fn action_probs(&self, state: usize) -> Vec<f64>;

    /// Sample an action by inverse-CDF over [`Policy::action_probs`].
    fn sample_action(&self, state: usize, rng: &mut impl Rng) -> usize {
        let probs = self.action_probs(state);
        sample_index(&probs, rng)
    }
}

/// Deterministic tabular policy: one fixed action per state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicPolicy {
    pub actions: Vec<usize>,
    pub n_actions: usize,
}

impl DeterministicPolicy {
    pub fn new(actions: Vec<usize>, n_actions: usize) -> Self {
        DeterministicPolicy { actions, n_actions }
    }
}

impl Policy for DeterministicPolicy {
    fn action_probs(&self, state: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.n_actions];
        p[self.actions[state]] = 1.0;
        p
    }
}

/// Draw an index from an (unnormalized is tolerated, but callers pass
/// normalized) probability vector with a single uniform draw.
pub(crate) fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Finite-horizon tabular MDP with explicit transition and reward tensors.
///
/// `transitions` is row-major `[state, action, next_state]`, `rewards` is
/// `[state, action]`. Each state also carries an embedding vector used by
/// function-approximation policies and the value predictors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    transitions: Vec<f64>,
    rewards: Vec<f64>,
    pub gamma: f64,
    start_dist: Vec<f64>,
    pub horizon: usize,
    embed_dim: usize,
    embeddings: Vec<f64>,
}

impl TabularMdp {
    /// Validate and build an MDP. Embeddings default to the scalar state
    /// index; override with [`TabularMdp::set_embeddings`].
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        gamma: f64,
        start_dist: Vec<f64>,
        horizon: usize,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("n_states and n_actions must be positive"));
        }
        if horizon == 0 {
            return Err(Error::invalid("horizon must be positive"));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::invalid(format!("gamma {gamma} outside [0, 1]")));
        }
        if transitions.len() != n_states * n_actions * n_states {
            return Err(Error::invalid("transition tensor has wrong length"));
        }
        if rewards.len() != n_states * n_actions {
            return Err(Error::invalid("reward tensor has wrong length"));
        }
        if start_dist.len() != n_states {
            return Err(Error::invalid("start distribution has wrong length"));
        }
        check_prob_vector(&start_dist, "start_dist")?;
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transitions[(s * n_actions + a) * n_states..][..n_states];
                check_prob_vector(row, "transition row")?;
            }
        }
        let embeddings = (0..n_states).map(|s| s as f64).collect();
        Ok(TabularMdp {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
            start_dist,
            horizon,
            embed_dim: 1,
            embeddings,
        })
    }

    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.n_actions + a) * self.n_states + next]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.transitions[(s * self.n_actions + a) * self.n_states..][..self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn start_dist(&self) -> &[f64] {
        &self.start_dist
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Embedding vector for one state.
    pub fn embedding(&self, s: usize) -> &[f64] {
        &self.embeddings[s * self.embed_dim..][..self.embed_dim]
    }

    /// Replace the per-state embedding table (`n_states` rows of `dim`).
    pub fn set_embeddings(&mut self, dim: usize, table: Vec<f64>) -> Result<()> {
        if dim == 0 || table.len() != self.n_states * dim {
            return Err(Error::invalid("embedding table has wrong length"));
        }
        self.embed_dim = dim;
        self.embeddings = table;
        Ok(())
    }

    pub fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.n_states {
            return Err(Error::InvalidState {
                state: s,
                n_states: self.n_states,
            });
        }
        Ok(())
    }

    /// Serialize to a JSON document (dimension header + row-major tensors).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mdp: TabularMdp = serde_json::from_str(text)?;
        // Re-validate: the document may have been edited by hand.
        let mut out = TabularMdp::new(
            mdp.n_states,
            mdp.n_actions,
            mdp.transitions,
            mdp.rewards,
            mdp.gamma,
            mdp.start_dist,
            mdp.horizon,
        )?;
        out.set_embeddings(mdp.embed_dim, mdp.embeddings)?;
        Ok(out)
    }
}

fn check_prob_vector(p: &[f64], what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &v in p {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid(format!("{what} has negative or non-finite entry")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::invalid(format!("{what} sums to {sum}, expected 1")));
    }
    Ok(())
}

/// Start states, horizon and discount of an assessment environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssessmentSpec {
    pub start_states: Vec<usize>,
    pub horizon: usize,
    pub gamma: f64,
}

impl AssessmentSpec {
    pub fn new(start_states: Vec<usize>, horizon: usize, gamma: f64) -> Result<Self> {
        if start_states.is_empty() {
            return Err(Error::invalid("assessment needs at least one start state"));
        }
        let mut seen = start_states.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != start_states.len() {
            return Err(Error::invalid("assessment start states must be distinct"));
        }
        if horizon == 0 {
            return Err(Error::invalid("assessment horizon must be positive"));
        }
        Ok(AssessmentSpec {
            start_states,
            horizon,
            gamma,
        })
    }

    pub fn k(&self) -> usize {
        self.start_states.len()
    }
}

/// An assessment environment: dynamics plus the fixed start-state list.
///
/// The default constructor shares the deployment dynamics; distinct
/// dynamics are supported through [`AssessmentEnv::with_dynamics`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssessmentEnv {
    pub mdp: TabularMdp,
    pub spec: AssessmentSpec,
}

impl AssessmentEnv {
    pub fn shared_dynamics(deploy: &TabularMdp, spec: AssessmentSpec) -> Result<Self> {
        Self::with_dynamics(deploy.clone(), spec)
    }

    pub fn with_dynamics(mdp: TabularMdp, spec: AssessmentSpec) -> Result<Self> {
        for &s in &spec.start_states {
            mdp.check_state(s)?;
        }
        Ok(AssessmentEnv { mdp, spec })
    }
}

/// On-policy trajectory: `states` has one more entry than `actions` and
/// `rewards`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Sample a trajectory of exactly `horizon` steps. Reproducible given an
/// identical random source.
pub fn rollout(
    mdp: &TabularMdp,
    policy: &impl Policy,
    start_state: usize,
    horizon: usize,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    mdp.check_state(start_state)?;
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut s = start_state;
    states.push(s);
    for _ in 0..horizon {
        let a = policy.sample_action(s, rng);
        rewards.push(mdp.reward(s, a));
        let next = sample_index(mdp.transition_row(s, a), rng);
        actions.push(a);
        states.push(next);
        s = next;
    }
    Ok(Trajectory {
        states,
        actions,
        rewards,
    })
}

/// Discounted return g(h) = sum_t gamma^t r_t, evaluated Horner-style from
/// the tail so deterministic rollouts reproduce backward-induction values
/// bit for bit.
pub fn discounted_return(traj: &Trajectory, gamma: f64) -> f64 {
    let mut g = 0.0;
    for &r in traj.rewards.iter().rev() {
        g = r + gamma * g;
    }
    g
}

/// Finite-horizon state values at every step: `table[t][s]` is the expected
/// discounted return of following `policy` from `s` with `horizon - t` steps
/// left, discounted from step `t` (so `table[horizon]` is all zeros).
pub fn exact_value_table(
    mdp: &TabularMdp,
    policy: &impl Policy,
    horizon: usize,
    gamma: f64,
) -> Vec<Vec<f64>> {
    let n = mdp.n_states;
    let mut table = vec![vec![0.0; n]; horizon + 1];
    for t in (0..horizon).rev() {
        for s in 0..n {
            let probs = policy.action_probs(s);
            let mut v = 0.0;
            for (a, &pa) in probs.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                let row = mdp.transition_row(s, a);
                let mut next_v = 0.0;
                for (sn, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        next_v += p * table[t + 1][sn];
                    }
                }
                v += pa * (mdp.reward(s, a) + gamma * next_v);
            }
            table[t][s] = v;
        }
    }
    table
}

/// State-value vector V(s) at the MDP's own horizon and discount.
pub fn exact_values(mdp: &TabularMdp, policy: &impl Policy) -> Vec<f64> {
    exact_value_table(mdp, policy, mdp.horizon, mdp.gamma)
        .into_iter()
        .next()
        .unwrap()
}

/// Finite-horizon action values `q[t][s][a]`, consistent with
/// [`exact_value_table`].
pub fn exact_q_table(
    mdp: &TabularMdp,
    policy: &impl Policy,
    horizon: usize,
    gamma: f64,
) -> Vec<Vec<Vec<f64>>> {
    let v = exact_value_table(mdp, policy, horizon, gamma);
    let n = mdp.n_states;
    let mut q = vec![vec![vec![0.0; mdp.n_actions]; n]; horizon];
    for t in 0..horizon {
        for s in 0..n {
            for a in 0..mdp.n_actions {
                let row = mdp.transition_row(s, a);
                let mut next_v = 0.0;
                for (sn, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        next_v += p * v[t + 1][sn];
                    }
                }
                q[t][s][a] = mdp.reward(s, a) + gamma * next_v;
            }
        }
    }
    q
}

/// Overall performance J = E_{s ~ mu} V(s).
pub fn exact_performance(mdp: &TabularMdp, policy: &impl Policy) -> f64 {
    let v = exact_values(mdp, policy);
    dot(mdp.start_dist(), &v)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gridworld construction parameters. Actions are up/right/down/left; a slip
/// moves perpendicular to the intended direction with probability
/// `slip / 2` each side. Goal cells are absorbing with zero reward; the goal
/// bonus is folded into `R(s, a)` as the expected entry reward.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    pub goals: Vec<(usize, usize)>,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub slip: f64,
    pub horizon: usize,
    pub gamma: f64,
}

impl Default for GridworldSpec {
    fn default() -> Self {
        GridworldSpec {
            width: 4,
            height: 4,
            goals: vec![(3, 3)],
            step_reward: 0.0,
            goal_reward: 1.0,
            slip: 0.1,
            horizon: 20,
            gamma: 0.95,
        }
    }
}

const DIRS: [(isize, isize); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

/// Build a gridworld MDP. States are rasterized `y * width + x`; embeddings
/// are normalized cell centers in (0, 1)^2; the start distribution is
/// uniform over non-goal cells.
pub fn make_gridworld(spec: &GridworldSpec) -> Result<TabularMdp> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 {
        return Err(Error::invalid("grid dimensions must be at least 1"));
    }
    if !(0.0..=1.0).contains(&spec.slip) {
        return Err(Error::invalid("slip probability outside [0, 1]"));
    }
    for &(x, y) in &spec.goals {
        if x >= w || y >= h {
            return Err(Error::invalid(format!("goal ({x}, {y}) outside {w}x{h} grid")));
        }
    }
    let n = w * h;
    let n_actions = 4;
    let is_goal = |s: usize| spec.goals.iter().any(|&(x, y)| y * w + x == s);

    let mut transitions = vec![0.0; n * n_actions * n];
    let mut rewards = vec![0.0; n * n_actions];
    for s in 0..n {
        let (x, y) = (s % w, s / w);
        for a in 0..n_actions {
            let row = &mut transitions[(s * n_actions + a) * n..][..n];
            if is_goal(s) {
                row[s] = 1.0;
                continue;
            }
            // Intended direction plus the two perpendicular slips.
            let moves = [
                (a, 1.0 - spec.slip),
                ((a + 1) % 4, spec.slip / 2.0),
                ((a + 3) % 4, spec.slip / 2.0),
            ];
            for (dir, p) in moves {
                if p == 0.0 {
                    continue;
                }
                let (dx, dy) = DIRS[dir];
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                let dest = if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    s
                } else {
                    ny as usize * w + nx as usize
                };
                row[dest] += p;
            }
            let goal_mass: f64 = spec
                .goals
                .iter()
                .map(|&(gx, gy)| row[gy * w + gx])
                .sum();
            rewards[s * n_actions + a] = spec.step_reward + spec.goal_reward * goal_mass;
        }
    }

    let non_goal = (0..n).filter(|&s| !is_goal(s)).count();
    let start_dist: Vec<f64> = if non_goal == 0 {
        let mut d = vec![0.0; n];
        d[0] = 1.0;
        d
    } else {
        (0..n)
            .map(|s| if is_goal(s) { 0.0 } else { 1.0 / non_goal as f64 })
            .collect()
    };

    let mut mdp = TabularMdp::new(
        n,
        n_actions,
        transitions,
        rewards,
        spec.gamma,
        start_dist,
        spec.horizon,
    )?;
    let mut table = Vec::with_capacity(n * 2);
    for s in 0..n {
        let (x, y) = (s % w, s / w);
        table.push((x as f64 + 0.5) / w as f64);
        table.push((y as f64 + 0.5) / h as f64);
    }
    mdp.set_embeddings(2, table)?;
    Ok(mdp)
}

/// Sample an MDP with uniform Dirichlet transition rows (or one-hot rows in
/// deterministic mode) and uniform rewards in [0, 1).
pub fn sample_random_mdp(
    n_states: usize,
    n_actions: usize,
    deterministic: bool,
    gamma: f64,
    horizon: usize,
    rng: &mut impl Rng,
) -> Result<TabularMdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::invalid("n_states and n_actions must be positive"));
    }
    let mut transitions = vec![0.0; n_states * n_actions * n_states];
    let mut rewards = vec![0.0; n_states * n_actions];
    for s in 0..n_states {
        for a in 0..n_actions {
            let row = &mut transitions[(s * n_actions + a) * n_states..][..n_states];
            if deterministic {
                let next = rng.random_range(0..n_states);
                row[next] = 1.0;
            } else {
                // Exponential draws normalized: Dirichlet(1, ..., 1).
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    let u: f64 = rng.random::<f64>();
                    *v = -(1.0 - u).ln();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
                renormalize(row);
            }
            rewards[s * n_actions + a] = rng.random::<f64>();
        }
    }
    let start_dist = vec![1.0 / n_states as f64; n_states];
    let mut d = start_dist.clone();
    renormalize(&mut d);
    TabularMdp::new(n_states, n_actions, transitions, rewards, gamma, d, horizon)
}

/// Force an almost-normalized nonnegative vector to sum to exactly 1 by
/// adjusting its largest entry.
fn renormalize(p: &mut [f64]) {
    let sum: f64 = p.iter().sum();
    let imax = p
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    p[imax] += 1.0 - sum;
}
