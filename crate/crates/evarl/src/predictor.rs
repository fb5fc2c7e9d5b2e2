//! Behavior-conditioned state-value predictors.
//!
//! A predictor maps a query state to an estimate of its deployment value,
//! conditioned on the assessment dataset: the k (start-state, return) pairs
//! gathered by rolling the policy out in the assessment environment. Two
//! predictors are provided: the closed-form linear-attention form
//! (similarity-weighted average of assessment returns) and a trainable
//! transformer encoder.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autodiff::{Gradients, Graph, NodeId, ParamGrads, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::mdp::{discounted_return, exact_values, rollout, AssessmentEnv, Policy, TabularMdp};

/// One (start-state embedding, return) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssessmentEntry {
    pub embedding: Vec<f64>,
    pub ret: f64,
}

/// The assessment dataset: ordered (start-state, return) pairs. Order
/// matters — the transformer's positional embeddings follow it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AssessmentDataset {
    pub entries: Vec<AssessmentEntry>,
}

impl AssessmentDataset {
    pub fn new(entries: Vec<AssessmentEntry>) -> Self {
        AssessmentDataset { entries }
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.ret).collect()
    }
}

/// Roll the policy out once from each assessment start state, in spec
/// order, and package the (embedding, return) pairs.
pub fn collect_assessment_dataset(
    env: &AssessmentEnv,
    policy: &impl Policy,
    rng: &mut impl Rng,
) -> Result<AssessmentDataset> {
    let mut entries = Vec::with_capacity(env.spec.k());
    for &s in &env.spec.start_states {
        let traj = rollout(&env.mdp, policy, s, env.spec.horizon, rng)?;
        entries.push(AssessmentEntry {
            embedding: env.mdp.embedding(s).to_vec(),
            ret: discounted_return(&traj, env.spec.gamma),
        });
    }
    Ok(AssessmentDataset::new(entries))
}

/// Assessment dataset with returns replaced by exact state values; in the
/// deterministic setting this coincides with sampled rollouts.
pub fn assessment_dataset_from_values(env: &AssessmentEnv, values: &[f64]) -> AssessmentDataset {
    let entries = env
        .spec
        .start_states
        .iter()
        .map(|&s| AssessmentEntry {
            embedding: env.mdp.embedding(s).to_vec(),
            ret: values[s],
        })
        .collect();
    AssessmentDataset::new(entries)
}

/// Anything that predicts a query state's value from assessment behavior.
pub trait ValuePredictor {
    fn predict(&self, query: &[f64], data: &AssessmentDataset) -> Result<f64>;
}

/// Similarity between state embeddings, strictly positive by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Similarity {
    /// exp(-||a - b||^2 / (2 sigma^2)).
    Rbf { sigma: f64 },
    /// Explicit matrix keyed by integer state-index embeddings.
    IndexMatrix { values: Vec<Vec<f64>> },
}

impl Similarity {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::Rbf { sigma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                // Floor at the smallest normal so strict positivity survives
                // floating-point underflow at extreme distances.
                (-d2 / (2.0 * sigma * sigma)).exp().max(f64::MIN_POSITIVE)
            }
            Similarity::IndexMatrix { values } => {
                let i = a[0].round() as usize;
                let j = b[0].round() as usize;
                values[i][j]
            }
        }
    }
}

impl Default for Similarity {
    fn default() -> Self {
        Similarity::Rbf { sigma: 1.0 }
    }
}

/// The closed-form linear-attention predictor: a similarity-weighted
/// average of the assessment returns. Output always lies within
/// [min g, max g].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub similarity: Similarity,
}

impl LinearPredictor {
    pub fn new(similarity: Similarity) -> Self {
        LinearPredictor { similarity }
    }
}

impl ValuePredictor for LinearPredictor {
    fn predict(&self, query: &[f64], data: &AssessmentDataset) -> Result<f64> {
        if data.entries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for e in &data.entries {
            let w = self.similarity.eval(query, &e.embedding);
            num += w * e.ret;
            den += w;
        }
        if den <= 0.0 {
            return Err(Error::DegenerateSimilarity { sum: den });
        }
        Ok(num / den)
    }
}

/// Transformer predictor architecture parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub obs_dim: usize,
    pub k: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.k == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::invalid("transformer dimensions must be positive"));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::invalid(format!(
                "heads {} must divide hidden dim {}",
                self.heads, self.hidden
            )));
        }
        Ok(())
    }
}

/// Pre-norm transformer encoder over the 2k+1 token sequence
/// [state tokens | return tokens | query token], reading the prediction
/// from the final (query) token. Assessment-state tokens get positions
/// 0..k-1; the return tokens and the query token all share position k.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerPredictor {
    pub config: TransformerConfig,
    params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct PredictorCheckpoint {
    config: TransformerConfig,
    params: ParamSet,
}

impl TransformerPredictor {
    pub fn init(config: TransformerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let mut params = ParamSet::new();
        fn dense(
            params: &mut ParamSet,
            name: &str,
            rows: usize,
            cols: usize,
            rng: &mut impl Rng,
        ) -> Result<()> {
            let bound = 1.0 / (rows as f64).sqrt();
            let w: Vec<f64> = (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(format!("{name}_w"), vec![rows, cols], w)?;
            params.push(format!("{name}_b"), vec![cols], vec![0.0; cols])?;
            Ok(())
        }
        dense(&mut params, "state_proj", config.obs_dim, h, rng)?;
        dense(&mut params, "return_proj", 1, h, rng)?;
        dense(&mut params, "query_proj", config.obs_dim, h, rng)?;
        let pos: Vec<f64> = (0..(config.k + 1) * h)
            .map(|_| 0.02 * rng.random_range(-1.0..1.0))
            .collect();
        params.push("pos", vec![config.k + 1, h], pos)?;
        for l in 0..config.layers {
            params.push(format!("l{l}_ln1_scale"), vec![h], vec![1.0; h])?;
            params.push(format!("l{l}_ln1_bias"), vec![h], vec![0.0; h])?;
            dense(&mut params, &format!("l{l}_attn_q"), h, h, rng)?;
            dense(&mut params, &format!("l{l}_attn_k"), h, h, rng)?;
            dense(&mut params, &format!("l{l}_attn_v"), h, h, rng)?;
            dense(&mut params, &format!("l{l}_attn_o"), h, h, rng)?;
            params.push(format!("l{l}_ln2_scale"), vec![h], vec![1.0; h])?;
            params.push(format!("l{l}_ln2_bias"), vec![h], vec![0.0; h])?;
            dense(&mut params, &format!("l{l}_ff1"), h, h, rng)?;
            dense(&mut params, &format!("l{l}_ff2"), h, h, rng)?;
        }
        dense(&mut params, "head", h, 1, rng)?;
        Ok(TransformerPredictor { config, params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_inputs(&self, query: &[f64], data: &AssessmentDataset) -> Result<()> {
        if data.k() != self.config.k {
            return Err(Error::invalid(format!(
                "assessment dataset has {} entries, predictor expects k = {}",
                data.k(),
                self.config.k
            )));
        }
        if query.len() != self.config.obs_dim {
            return Err(Error::ShapeMismatch {
                op: "transformer_predict",
                left: vec![query.len()],
                right: vec![self.config.obs_dim],
            });
        }
        for e in &data.entries {
            if e.embedding.len() != self.config.obs_dim {
                return Err(Error::ShapeMismatch {
                    op: "transformer_predict",
                    left: vec![e.embedding.len()],
                    right: vec![self.config.obs_dim],
                });
            }
        }
        Ok(())
    }

    /// Build the forward pass on `graph`. `param_ids` must follow the
    /// parameter-set order; `returns` is the `[k, 1]` return-token input.
    fn build_forward(
        &self,
        graph: &mut Graph,
        param_ids: &[NodeId],
        query: NodeId,
        states: NodeId,
        returns: NodeId,
    ) -> Result<NodeId> {
        let idx = |name: &str| -> usize {
            self.params
                .entries()
                .iter()
                .position(|p| p.name == name)
                .expect("parameter name")
        };
        let p = |name: &str| param_ids[idx(name)];
        let k = self.config.k;

        let dense = |g: &mut Graph, x: NodeId, name: &str| -> Result<NodeId> {
            let xw = g.matmul(x, p(&format!("{name}_w")))?;
            g.add(xw, p(&format!("{name}_b")))
        };

        let mut state_tokens = dense(graph, states, "state_proj")?;
        let mut return_tokens = dense(graph, returns, "return_proj")?;
        let mut query_token = dense(graph, query, "query_proj")?;

        let state_positions: Vec<usize> = (0..k).collect();
        let pos_states = graph.embed_lookup(p("pos"), &state_positions)?;
        let pos_last_rows = graph.embed_lookup(p("pos"), &vec![k; k])?;
        let pos_last = graph.embed_lookup(p("pos"), &[k])?;
        state_tokens = graph.add(state_tokens, pos_states)?;
        return_tokens = graph.add(return_tokens, pos_last_rows)?;
        query_token = graph.add(query_token, pos_last)?;

        let mut x = graph.concat(&[state_tokens, return_tokens, query_token], 0)?;
        for l in 0..self.config.layers {
            let normed = graph.layer_norm(x, 1)?;
            let scaled = graph.mul(normed, p(&format!("l{l}_ln1_scale")))?;
            let y = graph.add(scaled, p(&format!("l{l}_ln1_bias")))?;
            let q = dense(graph, y, &format!("l{l}_attn_q"))?;
            let key = dense(graph, y, &format!("l{l}_attn_k"))?;
            let v = dense(graph, y, &format!("l{l}_attn_v"))?;
            let att = graph.attention(q, key, v, self.config.heads)?;
            let att = dense(graph, att, &format!("l{l}_attn_o"))?;
            x = graph.add(x, att)?;

            let normed = graph.layer_norm(x, 1)?;
            let scaled = graph.mul(normed, p(&format!("l{l}_ln2_scale")))?;
            let y = graph.add(scaled, p(&format!("l{l}_ln2_bias")))?;
            let y = dense(graph, y, &format!("l{l}_ff1"))?;
            let y = graph.relu(y);
            let y = dense(graph, y, &format!("l{l}_ff2"))?;
            x = graph.add(x, y)?;
        }
        let last = graph.slice_rows(x, 2 * k, 2 * k + 1)?;
        dense(graph, last, "head")
    }

    fn input_tensors(&self, query: &[f64], data: &AssessmentDataset) -> (Tensor, Tensor, Tensor) {
        let k = self.config.k;
        let obs = self.config.obs_dim;
        let states = Tensor::new(
            vec![k, obs],
            data.entries
                .iter()
                .flat_map(|e| e.embedding.clone())
                .collect(),
        )
        .expect("validated");
        let returns = Tensor::new(vec![k, 1], data.returns()).expect("validated");
        let q = Tensor::new(vec![1, obs], query.to_vec()).expect("validated");
        (q, states, returns)
    }

    /// Prediction plus the gradient of the prediction with respect to each
    /// assessment return.
    pub fn predict_with_return_grads(
        &self,
        query: &[f64],
        data: &AssessmentDataset,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_inputs(query, data)?;
        let mut graph = Graph::new();
        let param_ids: Vec<NodeId> = self
            .params
            .entries()
            .iter()
            .map(|p| {
                graph.constant(Tensor::new(p.shape.clone(), p.data.clone()).expect("validated"))
            })
            .collect();
        let (q, states, returns) = self.input_tensors(query, data);
        let qn = graph.constant(q);
        let sn = graph.constant(states);
        let rn = graph.leaf(returns);
        let out = self.build_forward(&mut graph, &param_ids, qn, sn, rn)?;
        let value = graph.value(out).item();
        let grads = graph.backward(out)?;
        let dg = grads
            .wrt(rn)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; data.k()]);
        Ok((value, dg))
    }

    /// One training forward over a batch inside an existing graph: returns
    /// the per-record prediction nodes. `param_ids` come from
    /// [`ParamSet::leaves`] when gradients are needed.
    fn batch_predictions(
        &self,
        graph: &mut Graph,
        param_ids: &[NodeId],
        batch: &[&BufferRecord],
    ) -> Result<Vec<NodeId>> {
        let mut preds = Vec::with_capacity(batch.len());
        for rec in batch {
            let (q, states, returns) = self.input_tensors(&rec.query_embedding, &rec.assessment);
            let qn = graph.constant(q);
            let sn = graph.constant(states);
            let rn = graph.constant(returns);
            preds.push(self.build_forward(graph, param_ids, qn, sn, rn)?);
        }
        Ok(preds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = PredictorCheckpoint {
            config: self.config.clone(),
            params: self.params.clone(),
        };
        std::fs::write(path, serde_json::to_string(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: PredictorCheckpoint = serde_json::from_str(&text)?;
        doc.config.validate()?;
        Ok(TransformerPredictor {
            config: doc.config,
            params: doc.params,
        })
    }
}

impl ValuePredictor for TransformerPredictor {
    fn predict(&self, query: &[f64], data: &AssessmentDataset) -> Result<f64> {
        self.check_inputs(query, data)?;
        let mut graph = Graph::new();
        let param_ids: Vec<NodeId> = self
            .params
            .entries()
            .iter()
            .map(|p| {
                graph.constant(Tensor::new(p.shape.clone(), p.data.clone()).expect("validated"))
            })
            .collect();
        let (q, states, returns) = self.input_tensors(query, data);
        let qn = graph.constant(q);
        let sn = graph.constant(states);
        let rn = graph.constant(returns);
        let out = self.build_forward(&mut graph, &param_ids, qn, sn, rn)?;
        Ok(graph.value(out).item())
    }
}

/// One predictor-training record: an assessment dataset, a deployment
/// query state and its observed return, tagged with the policy iterate
/// that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BufferRecord {
    pub assessment: AssessmentDataset,
    pub query_embedding: Vec<f64>,
    pub target_return: f64,
    pub policy_index: u64,
}

/// Replay buffer retaining records from the `m` most recent policy
/// iterates.
#[derive(Debug, Clone)]
pub struct PredictorBuffer {
    records: Vec<BufferRecord>,
    m: u64,
    latest: u64,
}

impl PredictorBuffer {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("buffer must retain at least one policy"));
        }
        Ok(PredictorBuffer {
            records: Vec::new(),
            m: m as u64,
            latest: 0,
        })
    }

    /// Insert a record and evict everything older than `m` policies.
    pub fn insert(&mut self, record: BufferRecord) {
        self.latest = self.latest.max(record.policy_index);
        self.records.push(record);
        let cutoff = self.latest.saturating_sub(self.m - 1);
        self.records.retain(|r| r.policy_index >= cutoff);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[BufferRecord] {
        &self.records
    }

    /// Serialize as JSON lines for experiment resumption.
    pub fn dump_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn load_jsonl(text: &str, m: usize) -> Result<Self> {
        let mut buf = PredictorBuffer::new(m)?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            buf.insert(serde_json::from_str(line)?);
        }
        Ok(buf)
    }
}

/// Stochastic-gradient training of the transformer on buffered
/// (assessment, deployment return) records. Returns the per-batch loss
/// history, `epochs * ceil(len / batch_size)` entries long.
pub fn train_predictor(
    predictor: &mut TransformerPredictor,
    buffer: &PredictorBuffer,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if buffer.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&BufferRecord> = chunk.iter().map(|&i| &buffer.records()[i]).collect();
            let (loss, grads) = predictor_batch_gradient(predictor, &batch)?;
            predictor.params_mut().apply_step(&grads, -learning_rate)?;
            history.push(loss);
        }
    }
    Ok(history)
}

/// MSE loss over a batch and its gradient with respect to the predictor
/// parameters.
pub fn predictor_batch_gradient(
    predictor: &TransformerPredictor,
    batch: &[&BufferRecord],
) -> Result<(f64, ParamGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut graph = Graph::new();
    let param_ids = predictor.params().leaves(&mut graph);
    let preds = predictor.batch_predictions(&mut graph, &param_ids, batch)?;
    let pred_vec = graph.concat(&preds, 0)?;
    let targets = Tensor::new(
        vec![batch.len(), 1],
        batch.iter().map(|r| r.target_return).collect(),
    )?;
    let target_node = graph.constant(targets);
    let loss = graph.mse_loss(pred_vec, target_node)?;
    let loss_value = graph.value(loss).item();
    let grads = graph.backward(loss)?;
    Ok((
        loss_value,
        collect_param_grads(predictor.params(), &param_ids, &grads),
    ))
}

pub(crate) fn collect_param_grads(
    params: &ParamSet,
    ids: &[NodeId],
    grads: &Gradients,
) -> ParamGrads {
    let mut out = ParamGrads::zeros_like(params);
    for (p, &id) in params.entries().iter().zip(ids) {
        if let (Some(slot), Some(g)) = (out.get_mut(&p.name), grads.wrt(id)) {
            slot.copy_from_slice(g);
        }
    }
    out
}

/// Value-prediction error of a predictor on an MDP: the mu-weighted mean
/// squared error (zeta^2) together with the mu-weighted mean absolute
/// error and the per-state absolute errors.
#[derive(Debug, Clone)]
pub struct ValueErrorReport {
    pub zeta_sq: f64,
    pub mae: f64,
    pub abs_errors: Vec<f64>,
    pub estimates: Vec<f64>,
    pub exact: Vec<f64>,
}

/// Compare a predictor's estimates against exact values, weighting the
/// errors by `mu` (pass the MDP's start distribution for the deployment
/// weighting).
pub fn predictor_value_mse(
    predictor: &dyn ValuePredictor,
    mdp: &TabularMdp,
    policy: &impl Policy,
    data: &AssessmentDataset,
    mu: &[f64],
) -> Result<ValueErrorReport> {
    let exact = exact_values(mdp, policy);
    let mut estimates = Vec::with_capacity(mdp.n_states);
    let mut zeta_sq = 0.0;
    let mut mae = 0.0;
    let mut abs_errors = Vec::with_capacity(mdp.n_states);
    for s in 0..mdp.n_states {
        let est = predictor.predict(mdp.embedding(s), data)?;
        let err = exact[s] - est;
        zeta_sq += mu[s] * err * err;
        mae += mu[s] * err.abs();
        abs_errors.push(err.abs());
        estimates.push(est);
    }
    Ok(ValueErrorReport {
        zeta_sq,
        mae,
        abs_errors,
        estimates,
        exact,
    })
}

/// Predictor-based performance estimate: the mu-weighted mean of the
/// value predictions (exact weighting in the tabular setting).
pub fn estimate_performance(
    predictor: &dyn ValuePredictor,
    mdp: &TabularMdp,
    data: &AssessmentDataset,
) -> Result<f64> {
    let mut j_hat = 0.0;
    for (s, &mu) in mdp.start_dist().iter().enumerate() {
        if mu > 0.0 {
            j_hat += mu * predictor.predict(mdp.embedding(s), data)?;
        }
    }
    Ok(j_hat)
}
