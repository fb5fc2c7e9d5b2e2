//! The two-stage co-learning loop: warmup on the plain policy gradient,
//! periodic predictor regression on buffered assessment/deployment data,
//! and evaluation-aware policy updates once the predictor has trained at
//! least once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    discounted_return, rollout, sample_index, AssessmentEnv, Policy, TabularMdp, Trajectory,
};
use crate::policy::{
    apply_update, evarl_gradient, reinforce_gradient, DifferentiablePolicy, PenaltyContext,
    PenaltyGradientForm,
};
use crate::predictor::{
    collect_assessment_dataset, predictor_batch_gradient, predictor_value_mse, train_predictor,
    BufferRecord, PredictorBuffer, TransformerPredictor,
};

/// Whether the predictor is trained alongside the policy or kept fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorMode {
    Frozen,
    CoLearned,
}

impl PredictorMode {
    pub fn name(&self) -> &'static str {
        match self {
            PredictorMode::Frozen => "frozen",
            PredictorMode::CoLearned => "co-learned",
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// Predictability coefficient.
    pub beta: f64,
    /// Policy learning rate.
    pub alpha_theta: f64,
    /// Predictor learning rate.
    pub alpha_phi: f64,
    /// Predictor epochs per outer iteration.
    pub n_pred: usize,
    /// Policy updates per outer iteration.
    pub n_policy: usize,
    /// Interactions before evaluation feedback may start.
    pub warmup_interactions: u64,
    pub total_interactions: u64,
    /// Deployment episodes collected per policy update.
    pub episodes_per_iteration: usize,
    /// Predictor minibatch size.
    pub batch_size: usize,
    /// Buffer records required before predictor training starts.
    pub buffer_threshold: usize,
    /// Number of recent policy iterates retained in the buffer.
    pub m_recent: usize,
    pub mode: PredictorMode,
    pub penalty_form: PenaltyGradientForm,
    /// Learned per-state baseline for the policy-gradient term.
    pub use_baseline: bool,
    /// Entropy bonus coefficient (0 disables the bonus entirely).
    pub entropy_coeff: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            beta: 0.0,
            alpha_theta: 0.2,
            alpha_phi: 0.02,
            n_pred: 5,
            n_policy: 1,
            warmup_interactions: 0,
            total_interactions: 200_000,
            episodes_per_iteration: 16,
            batch_size: 64,
            buffer_threshold: 1024,
            m_recent: 16,
            mode: PredictorMode::CoLearned,
            penalty_form: PenaltyGradientForm::ScoreFunction,
            use_baseline: true,
            entropy_coeff: 0.0,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::invalid("beta must be >= 0"));
        }
        if self.n_pred == 0
            || self.n_policy == 0
            || self.episodes_per_iteration == 0
            || self.batch_size == 0
            || self.m_recent == 0
            || self.total_interactions == 0
        {
            return Err(Error::invalid("all trainer counts must be positive"));
        }
        Ok(())
    }
}

/// One per-update log record. The prediction-error columns are computed
/// immediately before the policy update, against exact tabular values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub interactions: u64,
    pub episodic_return: f64,
    pub pred_mae: f64,
    pub pred_mse: f64,
    pub beta: f64,
    pub predictor_loss: f64,
    pub evarl_active: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub mode: String,
    pub records: Vec<TrainRecord>,
}

pub const TRAIN_CSV_HEADER: &str =
    "interactions,seed,beta,episodic_return,pred_mae,pred_mse,predictor_loss,mode";

impl TrainLog {
    /// Render as CSV rows (without header) for the given seed.
    pub fn to_csv_rows(&self, seed: u64) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.interactions,
                seed,
                r.beta,
                r.episodic_return,
                r.pred_mae,
                r.pred_mse,
                r.predictor_loss,
                self.mode
            ));
        }
        out
    }

    pub fn final_return(&self) -> Option<f64> {
        self.records.last().map(|r| r.episodic_return)
    }

    /// Mean of the last `n` recorded values of a column.
    pub fn tail_mean(&self, n: usize, f: impl Fn(&TrainRecord) -> f64) -> f64 {
        let records = &self.records;
        let start = records.len().saturating_sub(n);
        let tail = &records[start..];
        tail.iter().map(&f).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Result of a training run; the policy and predictor are mutated in
/// place.
#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub buffer: PredictorBuffer,
}

/// Learned per-state baseline: exponentially averaged reward-to-go.
struct RunningBaseline {
    values: Vec<f64>,
    step: f64,
}

impl RunningBaseline {
    fn new(n_states: usize) -> Self {
        RunningBaseline {
            values: vec![0.0; n_states],
            step: 0.05,
        }
    }

    fn update(&mut self, trajectories: &[Trajectory], gamma: f64) {
        for traj in trajectories {
            let mut tail = 0.0;
            let mut tails = vec![0.0; traj.len()];
            for (t, &r) in traj.rewards.iter().enumerate().rev() {
                tail = r + gamma * tail;
                tails[t] = tail;
            }
            for (t, &s) in traj.states[..traj.len()].iter().enumerate() {
                self.values[s] += self.step * (tails[t] - self.values[s]);
            }
        }
    }
}

/// Execute the co-learning loop on a deployment MDP and assessment
/// environment. Separate seeded streams drive deployment rollouts,
/// assessment rollouts, and predictor training, so runs that differ only
/// in the penalty coefficient see identical environment randomness.
pub fn run_evarl<P: DifferentiablePolicy>(
    mdp: &TabularMdp,
    assess: &AssessmentEnv,
    config: &TrainerConfig,
    predictor: &mut TransformerPredictor,
    policy: &mut P,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng_deploy = ChaCha8Rng::seed_from_u64(config.seed);
    rng_deploy.set_stream(1);
    let mut rng_assess = ChaCha8Rng::seed_from_u64(config.seed);
    rng_assess.set_stream(2);
    let mut rng_pred = ChaCha8Rng::seed_from_u64(config.seed);
    rng_pred.set_stream(3);

    let mut buffer = PredictorBuffer::new(config.m_recent)?;
    let mut baseline = RunningBaseline::new(mdp.n_states);
    let mut log = TrainLog {
        mode: config.mode.name().to_string(),
        records: Vec::new(),
    };
    let mut interactions: u64 = 0;
    let mut policy_index: u64 = 0;
    let mut predictor_trained = config.mode == PredictorMode::Frozen;
    let mut last_pred_loss = f64::NAN;

    while interactions < config.total_interactions {
        // Predictor update phase.
        if config.mode == PredictorMode::CoLearned && buffer.len() >= config.buffer_threshold {
            let history = train_predictor(
                predictor,
                &buffer,
                config.n_pred,
                config.batch_size,
                config.alpha_phi,
                &mut rng_pred,
            )?;
            last_pred_loss = *history.last().expect("non-empty history");
            predictor_trained = true;
        }

        for _ in 0..config.n_policy {
            // Collect on-policy deployment and assessment rollouts.
            let mut deploy = Vec::with_capacity(config.episodes_per_iteration);
            for _ in 0..config.episodes_per_iteration {
                let s0 = sample_index(mdp.start_dist(), &mut rng_deploy);
                deploy.push(rollout(mdp, policy, s0, mdp.horizon, &mut rng_deploy)?);
            }
            interactions += (config.episodes_per_iteration * mdp.horizon) as u64;
            let data = collect_assessment_dataset(assess, policy, &mut rng_assess)?;
            interactions += (assess.spec.k() * assess.spec.horizon) as u64;

            // Prediction-error metrics immediately before the update.
            let report = predictor_value_mse(predictor, mdp, policy, &data, mdp.start_dist())?;

            let evarl_active = predictor_trained && interactions > config.warmup_interactions;
            let assess_trajs: Vec<Trajectory> = if evarl_active && config.beta > 0.0 {
                // Re-derive the trajectories behind `data` for the penalty
                // scores: collect_assessment_dataset consumed them, so
                // rebuild from the same stream order is not possible;
                // instead we collect them jointly below.
                Vec::new()
            } else {
                Vec::new()
            };
            let _ = assess_trajs;

            let baseline_ref = config.use_baseline.then_some(baseline.values.as_slice());
            let estimate = if evarl_active {
                let ctx = PenaltyContext {
                    predictor,
                    data: &data,
                    assess_trajectories: &[],
                    assess_gamma: assess.spec.gamma,
                    beta: config.beta,
                    form: config.penalty_form,
                };
                evarl_gradient(policy, mdp, &deploy, baseline_ref, &ctx)?
            } else {
                reinforce_gradient(policy, &deploy, mdp.gamma, baseline_ref)?
            };
            apply_update(policy, &estimate, config.alpha_theta)?;
            if config.use_baseline {
                baseline.update(&deploy, mdp.gamma);
            }

            // Append to the buffer, tagged with the collecting policy.
            for traj in &deploy {
                buffer.insert(BufferRecord {
                    assessment: data.clone(),
                    query_embedding: mdp.embedding(traj.states[0]).to_vec(),
                    target_return: discounted_return(traj, mdp.gamma),
                    policy_index,
                });
            }
            policy_index += 1;

            log.records.push(TrainRecord {
                interactions,
                episodic_return: estimate.mean_return,
                pred_mae: report.mae,
                pred_mse: report.zeta_sq,
                beta: config.beta,
                predictor_loss: last_pred_loss,
                evarl_active,
            });
        }
    }

    Ok(TrainOutcome { log, buffer })
}

/// Mean squared prediction error over everything currently in the buffer.
pub fn buffer_mse(predictor: &TransformerPredictor, buffer: &PredictorBuffer) -> Result<f64> {
    if buffer.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for chunk in buffer.records().chunks(64) {
        let batch: Vec<&BufferRecord> = chunk.iter().collect();
        let (loss, _) = predictor_batch_gradient(predictor, &batch)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / buffer.len() as f64)
}

/// Outcome of predictor pretraining on a standard policy-gradient run.
#[derive(Debug)]
pub struct PretrainOutcome {
    pub buffer: PredictorBuffer,
    pub initial_mse: f64,
    pub final_mse: f64,
    pub loss_history: Vec<f64>,
}

/// Train a predictor on data from every policy encountered during a plain
/// policy-gradient run: run the trainer with a zero penalty and an
/// unbounded recency window, then regress the predictor to convergence on
/// the harvested buffer.
pub fn pretrain_predictor_from_standard_run<P: DifferentiablePolicy>(
    mdp: &TabularMdp,
    assess: &AssessmentEnv,
    config: &TrainerConfig,
    epochs: usize,
    predictor: &mut TransformerPredictor,
    policy: &mut P,
) -> Result<PretrainOutcome> {
    let harvest_config = TrainerConfig {
        beta: 0.0,
        mode: PredictorMode::CoLearned,
        // Never train during harvesting; keep every policy's records.
        buffer_threshold: usize::MAX,
        m_recent: usize::MAX >> 1,
        ..config.clone()
    };
    let outcome = run_evarl(mdp, assess, &harvest_config, predictor, policy)?;
    let buffer = outcome.buffer;
    let initial_mse = buffer_mse(predictor, &buffer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(4);
    let loss_history = train_predictor(
        predictor,
        &buffer,
        epochs,
        config.batch_size,
        config.alpha_phi,
        &mut rng,
    )?;
    let final_mse = buffer_mse(predictor, &buffer)?;
    Ok(PretrainOutcome {
        buffer,
        initial_mse,
        final_mse,
        loss_history,
    })
}

/// Pick k distinct assessment start states from rollouts of a base
/// policy.
pub fn sample_assessment_states(
    mdp: &TabularMdp,
    base_policy: &impl Policy,
    k: usize,
    n_rollouts: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let mut visited = Vec::new();
    for _ in 0..n_rollouts {
        let s0 = sample_index(mdp.start_dist(), rng);
        let traj = rollout(mdp, base_policy, s0, mdp.horizon, rng)?;
        visited.extend(traj.states);
    }
    // Distinct states in a random order.
    let mut unique: Vec<usize> = Vec::new();
    while !visited.is_empty() && unique.len() < k {
        let i = rng.random_range(0..visited.len());
        let s = visited.swap_remove(i);
        if !unique.contains(&s) {
            unique.push(s);
        }
    }
    if unique.len() < k {
        return Err(Error::invalid(format!(
            "base policy visited only {} distinct states, need {k}",
            unique.len()
        )));
    }
    Ok(unique)
}
