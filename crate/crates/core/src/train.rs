//! Dataset construction, the composite training loss, and the optimizer.
//!
//! The loss is L = phi_e * L_E + phi_s * L_S: a weighted per-example binary
//! cross entropy on the final probability, plus an in-batch sampled softmax
//! over tower dot products with logQ correction. The softmax term trains the
//! towers only; it never touches the projection layer.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::ConfigMap;
use crate::domain::{
    default_action_set, default_weight_table, fnv1a64, unified_label, EngagementEvent, ItemId,
    QueryKey, RequestContext, UnifiedLabel,
};
use crate::iqp::SignalStore;
use crate::model::{
    self, backward_item, backward_query, embed_item, embed_query, score, score_backward, Grads,
    ItemFeatures, ItemRecord, ModelError, ModelParams, SequenceEntry, Tensor,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training examples fall before the split time")]
    EmptySplit,
    #[error("sampled softmax needs at least 2 rows, found {found}")]
    BatchTooSmall { found: usize },
    #[error("probability {value} outside (0, 1)")]
    BadProbability { value: f64 },
    #[error("non-finite loss at step {step}: L_E={l_e}, L_S={l_s}")]
    NonFiniteLoss { step: u64, l_e: f64, l_s: f64 },
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One training row: everything both towers and the projection consume.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub query: QueryKey,
    pub context: RequestContext,
    pub sequence: Vec<SequenceEntry>,
    pub features: ItemFeatures,
    pub iqp: Vec<f64>,
    pub label: UnifiedLabel,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub phi_e: f64,
    pub phi_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            phi_e: 1.0,
            phi_s: 0.01,
        }
    }
}

/// Streaming exact item-occurrence counts over the training stream. At desk
/// scale there is no need to approximate the sampling distribution.
#[derive(Clone, Debug, Default)]
pub struct FrequencyEstimator {
    counts: BTreeMap<ItemId, u64>,
    total_seen: u64,
}

impl FrequencyEstimator {
    pub fn new() -> Self {
        FrequencyEstimator::default()
    }

    pub fn observe(&mut self, item: ItemId) {
        *self.counts.entry(item).or_insert(0) += 1;
        self.total_seen += 1;
    }

    pub fn total_seen(&self) -> u64 {
        self.total_seen
    }

    /// Q(p) in (0, 1]. An item never seen is treated as a single occurrence;
    /// before anything at all is seen the distribution degenerates to 1.
    pub fn q(&self, item: ItemId) -> f64 {
        if self.total_seen == 0 {
            return 1.0;
        }
        let count = self.counts.get(&item).copied().unwrap_or(1).max(1);
        count as f64 / self.total_seen as f64
    }
}

/// Adaptive-moment optimizer state, one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros = |src: &BTreeMap<String, Tensor>| {
            src.iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(&t.shape)))
                .collect()
        };
        OptimizerState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(&params.tensors),
            v: zeros(&params.tensors),
        }
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, tensor) in params.tensors.iter_mut() {
            let g = &grads.tensors[name];
            let m = self.m.get_mut(name).expect("moment tensor");
            let v = self.v.get_mut(name).expect("moment tensor");
            for i in 0..tensor.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                tensor.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Weighted mean binary cross entropy and its per-example d(loss)/d(p).
pub fn engagement_loss(
    probabilities: &[f64],
    labels: &[UnifiedLabel],
) -> Result<(f64, Vec<f64>), TrainError> {
    assert_eq!(probabilities.len(), labels.len());
    let n = probabilities.len() as f64;
    let mut total = 0.0;
    let mut d_p = Vec::with_capacity(probabilities.len());
    for (&p, label) in probabilities.iter().zip(labels) {
        if !(p > 0.0 && p < 1.0) {
            return Err(TrainError::BadProbability { value: p });
        }
        let u = label.as_f64();
        let w = label.weight;
        total += -w * (u * p.ln() + (1.0 - u) * (1.0 - p).ln());
        d_p.push(w / n * ((1.0 - u) / (1.0 - p) - u / p));
    }
    Ok((total / n, d_p))
}

/// In-batch sampled softmax once the logQ-corrected logits are fixed:
/// logits[i][j] = q_i . p_j - log_q[j]; rows with a false label contribute
/// nothing. Returns the loss and gradients for both embedding matrices.
pub fn sampled_softmax_from_logq(
    q_embs: &[Vec<f64>],
    i_embs: &[Vec<f64>],
    labels: &[bool],
    log_q: &[f64],
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>), TrainError> {
    let b = q_embs.len();
    if b < 2 {
        return Err(TrainError::BatchTooSmall { found: b });
    }
    assert_eq!(i_embs.len(), b);
    assert_eq!(labels.len(), b);
    assert_eq!(log_q.len(), b);
    let dim = q_embs[0].len();
    let mut loss = 0.0;
    let mut d_q = vec![vec![0.0; dim]; b];
    let mut d_i = vec![vec![0.0; dim]; b];
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        if !labels[i] {
            continue;
        }
        let logits: Vec<f64> = (0..b)
            .map(|j| model::dot(&q_embs[i], &i_embs[j]) - log_q[j])
            .collect();
        let soft = model::softmax(&logits);
        loss += -inv_b * soft[i].ln();
        for j in 0..b {
            let d_logit = inv_b * (soft[j] - if j == i { 1.0 } else { 0.0 });
            if d_logit == 0.0 {
                continue;
            }
            for k in 0..dim {
                d_q[i][k] += d_logit * i_embs[j][k];
                d_i[j][k] += d_logit * q_embs[i][k];
            }
        }
    }
    Ok((loss, d_q, d_i))
}

/// logQ-corrected in-batch softmax against the live frequency estimator.
pub fn sampled_softmax_loss(
    q_embs: &[Vec<f64>],
    i_embs: &[Vec<f64>],
    items: &[ItemId],
    labels: &[bool],
    freq: &FrequencyEstimator,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>), TrainError> {
    let log_q: Vec<f64> = items.iter().map(|&it| freq.q(it).ln()).collect();
    sampled_softmax_from_logq(q_embs, i_embs, labels, &log_q)
}

pub fn composite_loss(l_e: f64, l_s: f64, weights: &LossWeights) -> f64 {
    weights.phi_e * l_e + weights.phi_s * l_s
}

/// Composite loss and full parameter gradients for one batch. The frequency
/// estimator is read, never updated; callers own the update schedule.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    batch: &[TrainExample],
    weights: &LossWeights,
    freq: &FrequencyEstimator,
) -> Result<(f64, f64, f64, Grads), TrainError> {
    assert!(!batch.is_empty(), "empty training batch");
    let cfg = &params.config;
    let mut grads = Grads::zeros_like(params);
    let n = batch.len();

    let mut q_embs = Vec::with_capacity(n);
    let mut i_embs = Vec::with_capacity(n);
    let mut q_caches = Vec::with_capacity(n);
    let mut i_caches = Vec::with_capacity(n);
    let mut breakdowns = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    for ex in batch {
        let (q, i) = if cfg.use_towers {
            let (q, qc) = embed_query(&ex.query, &ex.context, &ex.sequence, params);
            let (i, ic) = embed_item(&ex.features, params);
            q_caches.push(Some(qc));
            i_caches.push(Some(ic));
            (q, i)
        } else {
            q_caches.push(None);
            i_caches.push(None);
            (Vec::new(), Vec::new())
        };
        let bd = score(&q, &i, &ex.iqp, params)?;
        probs.push(bd.probability);
        breakdowns.push(bd);
        q_embs.push(q);
        i_embs.push(i);
    }

    let labels: Vec<UnifiedLabel> = batch.iter().map(|e| e.label).collect();
    let (l_e, d_p) = engagement_loss(&probs, &labels)?;

    // The softmax term needs in-batch negatives and tower dot products; a
    // trailing singleton batch or a tower-free variant contributes none.
    let (l_s, d_q_s, d_i_s) = if cfg.use_towers && weights.phi_s > 0.0 && n >= 2 {
        let items: Vec<ItemId> = batch.iter().map(|e| e.features.item).collect();
        let gates: Vec<bool> = batch.iter().map(|e| e.label.value).collect();
        sampled_softmax_loss(&q_embs, &i_embs, &items, &gates, freq)?
    } else {
        (0.0, Vec::new(), Vec::new())
    };

    for idx in 0..n {
        // Chain the BCE gradient through the sigmoid to the raw score.
        let p = probs[idx];
        let d_raw = weights.phi_e * d_p[idx] * p * (1.0 - p);
        let (mut d_q, mut d_i) = score_backward(
            params,
            &q_embs[idx],
            &i_embs[idx],
            &breakdowns[idx],
            d_raw,
            &mut grads,
        );
        if cfg.use_towers {
            if !d_q_s.is_empty() {
                for (a, b) in d_q.iter_mut().zip(&d_q_s[idx]) {
                    *a += weights.phi_s * b;
                }
                for (a, b) in d_i.iter_mut().zip(&d_i_s[idx]) {
                    *a += weights.phi_s * b;
                }
            }
            backward_query(
                params,
                q_caches[idx].as_ref().expect("tower cache"),
                &d_q,
                &mut grads,
            );
            backward_item(
                params,
                i_caches[idx].as_ref().expect("tower cache"),
                &d_i,
                &mut grads,
            );
        }
    }

    Ok((composite_loss(l_e, l_s, weights), l_e, l_s, grads))
}

/// Forward-only composite loss, used by the finite-difference harness.
pub fn batch_loss(
    params: &ModelParams,
    batch: &[TrainExample],
    weights: &LossWeights,
    freq: &FrequencyEstimator,
) -> Result<f64, TrainError> {
    let cfg = &params.config;
    let n = batch.len();
    let mut q_embs = Vec::with_capacity(n);
    let mut i_embs = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    for ex in batch {
        let (q, i) = if cfg.use_towers {
            (
                embed_query(&ex.query, &ex.context, &ex.sequence, params).0,
                embed_item(&ex.features, params).0,
            )
        } else {
            (Vec::new(), Vec::new())
        };
        probs.push(score(&q, &i, &ex.iqp, params)?.probability);
        q_embs.push(q);
        i_embs.push(i);
    }
    let labels: Vec<UnifiedLabel> = batch.iter().map(|e| e.label).collect();
    let (l_e, _) = engagement_loss(&probs, &labels)?;
    let l_s = if cfg.use_towers && weights.phi_s > 0.0 && n >= 2 {
        let items: Vec<ItemId> = batch.iter().map(|e| e.features.item).collect();
        let gates: Vec<bool> = batch.iter().map(|e| e.label.value).collect();
        sampled_softmax_loss(&q_embs, &i_embs, &items, &gates, freq)?.0
    } else {
        0.0
    };
    Ok(composite_loss(l_e, l_s, weights))
}

/// Max relative error between the analytic composite-loss gradient and
/// central finite differences, swept over every parameter.
pub fn grad_check(
    params: &ModelParams,
    batch: &[TrainExample],
    weights: &LossWeights,
    freq: &FrequencyEstimator,
    epsilon: f64,
) -> Result<f64, TrainError> {
    let (_, _, _, grads) = batch_loss_and_grads(params, batch, weights, freq)?;
    let loss = |p: &ModelParams| batch_loss(p, batch, weights, freq).expect("finite loss");
    Ok(model::fd_max_rel_err(params, &loss, &grads, epsilon))
}

/// One optimizer step. Observes the batch items in the frequency estimator
/// first, then descends the composite loss.
pub fn train_step(
    batch: &[TrainExample],
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    weights: &LossWeights,
    freq: &mut FrequencyEstimator,
) -> Result<(f64, f64, f64), TrainError> {
    for ex in batch {
        freq.observe(ex.features.item);
    }
    let (l, l_e, l_s, grads) = batch_loss_and_grads(params, batch, weights, freq)?;
    if !l.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step: opt.step + 1,
            l_e,
            l_s,
        });
    }
    opt.apply(params, &grads);
    Ok((l, l_e, l_s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: f64,
    pub weights: LossWeights,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            seed: 42,
            lr: 1e-3,
            batch_size: 64,
            epochs: 1.5,
            weights: LossWeights::default(),
        }
    }
}

impl TrainOptions {
    pub fn from_config_map(m: &ConfigMap) -> Result<Self, crate::config::ConfigError> {
        let d = TrainOptions::default();
        Ok(TrainOptions {
            seed: m.get_u64("seed", d.seed)?,
            lr: m.get_f64("lr", d.lr)?,
            batch_size: m.get_usize("batch_size", d.batch_size)?,
            epochs: m.get_f64("epochs", d.epochs)?,
            weights: LossWeights {
                phi_e: m.get_f64("phi_e", d.weights.phi_e)?,
                phi_s: m.get_f64("phi_s", d.weights.phi_s)?,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainStats {
    pub steps: u64,
    pub final_loss: f64,
    pub final_l_e: f64,
    pub final_l_s: f64,
}

/// Full training loop: per-pass seeded shuffles, fractional final pass,
/// one metrics line per step. Deterministic for a given seed and dataset.
pub fn train_loop(
    params: &mut ModelParams,
    examples: &[TrainExample],
    opts: &TrainOptions,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainStats, TrainError> {
    assert!(!examples.is_empty(), "empty training set");
    let mut opt = OptimizerState::new(params, opts.lr);
    let mut freq = FrequencyEstimator::new();
    let mut stats = TrainStats {
        steps: 0,
        final_loss: 0.0,
        final_l_e: 0.0,
        final_l_s: 0.0,
    };
    if let Some(w) = metrics.as_deref_mut() {
        writeln!(w, "# step\tL\tL_E\tL_S").map_err(|source| TrainError::Io {
            path: "<metrics>".to_string(),
            source,
        })?;
    }

    let n = examples.len();
    let full_passes = opts.epochs.floor() as usize;
    let tail = ((opts.epochs - opts.epochs.floor()) * n as f64).floor() as usize;
    for pass in 0..full_passes + usize::from(tail > 0) {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(pass as u64));
        order.shuffle(&mut rng);
        let take = if pass < full_passes { n } else { tail };
        for chunk in order[..take].chunks(opts.batch_size) {
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (l, l_e, l_s) = train_step(&batch, params, &mut opt, &opts.weights, &mut freq)?;
            stats.steps = opt.step;
            stats.final_loss = l;
            stats.final_l_e = l_e;
            stats.final_l_s = l_s;
            if let Some(w) = metrics.as_deref_mut() {
                writeln!(w, "{}\t{}\t{}\t{}", opt.step, l, l_e, l_s).map_err(|source| {
                    TrainError::Io {
                        path: "<metrics>".to_string(),
                        source,
                    }
                })?;
            }
        }
    }
    Ok(stats)
}

pub fn train_loop_to_file(
    params: &mut ModelParams,
    examples: &[TrainExample],
    opts: &TrainOptions,
    metrics_path: &Path,
) -> Result<TrainStats, TrainError> {
    let mut file = std::fs::File::create(metrics_path).map_err(|source| TrainError::Io {
        path: metrics_path.display().to_string(),
        source,
    })?;
    train_loop(params, examples, opts, Some(&mut file))
}

/// Per-user engaged history, ascending by time, for sequence assembly.
pub(crate) fn engaged_history(
    events: &[EngagementEvent],
) -> BTreeMap<u64, Vec<&EngagementEvent>> {
    let action_set = default_action_set();
    let mut history: BTreeMap<u64, Vec<&EngagementEvent>> = BTreeMap::new();
    for ev in events {
        if action_set.contains(&ev.action) {
            history.entry(ev.user_id).or_default().push(ev);
        }
    }
    for events in history.values_mut() {
        events.sort_by_key(|e| e.timestamp);
    }
    history
}

/// The user's engagement sequence as of `timestamp`: strictly earlier events
/// only, most recent first, capped. Events on unknown items are skipped.
pub(crate) fn sequence_before(
    history: &BTreeMap<u64, Vec<&EngagementEvent>>,
    items: &BTreeMap<ItemId, ItemRecord>,
    user_id: u64,
    timestamp: i64,
    seq_cap: usize,
) -> Vec<SequenceEntry> {
    let mut sequence = Vec::new();
    let Some(past) = history.get(&user_id) else {
        return sequence;
    };
    for ev in past.iter().rev() {
        if ev.timestamp >= timestamp {
            continue;
        }
        let Some(past_item) = items.get(&ev.item) else {
            continue;
        };
        let content: Vec<f32> = past_item.features.content.iter().map(|&v| v as f32).collect();
        sequence.push(SequenceEntry {
            item_embedding: crate::domain::EmbeddingVec::new(content)
                .expect("catalog embeddings are finite"),
            action: ev.action,
            age_seconds: timestamp - ev.timestamp,
        });
        if sequence.len() == seq_cap {
            break;
        }
    }
    sequence
}

/// Everything build_dataset reads besides the event log itself.
pub struct DatasetInputs<'a> {
    pub events: &'a [EngagementEvent],
    pub users: &'a BTreeMap<u64, RequestContext>,
    pub items: &'a BTreeMap<ItemId, ItemRecord>,
    pub signals: &'a SignalStore,
}

/// Deterministic keep/drop decision for impression-only rows, independent of
/// iteration order and of the split point.
fn keep_negative(seed: u64, session_id: u64, query: &QueryKey, item: ItemId, rate: f64) -> bool {
    let mut key = Vec::with_capacity(32);
    key.extend_from_slice(&seed.to_le_bytes());
    key.extend_from_slice(&session_id.to_le_bytes());
    key.extend_from_slice(&query.key_hash.to_le_bytes());
    key.extend_from_slice(&item.0.to_le_bytes());
    let u = fnv1a64(&key) as f64 / (u64::MAX as f64 + 1.0);
    u < rate
}

/// Temporal split into train/test example sets.
///
/// Events are grouped into (session, query, item) presentation groups; each
/// group becomes one example stamped with its earliest event time. Positives
/// are always kept; impression-only groups survive with probability
/// `downsample_rate` (hash-derived, so the choice is reproducible). Groups
/// at or before the signal store's as_of are dropped: every retained
/// example's interaction features come from a store sealed strictly before
/// the example happened.
pub fn build_dataset(
    inputs: &DatasetInputs,
    split_time: i64,
    downsample_rate: f64,
    seed: u64,
    seq_cap: usize,
) -> Result<(Vec<TrainExample>, Vec<TrainExample>), TrainError> {
    let action_set = default_action_set();
    let weight_table = default_weight_table();
    let history = engaged_history(inputs.events);

    let mut groups: BTreeMap<(u64, QueryKey, ItemId), Vec<EngagementEvent>> = BTreeMap::new();
    for ev in inputs.events {
        groups
            .entry((ev.session_id, ev.query.clone(), ev.item))
            .or_default()
            .push(ev.clone());
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for ((session_id, query, item), group) in groups {
        let timestamp = group.iter().map(|e| e.timestamp).min().expect("nonempty");
        if timestamp <= inputs.signals.as_of {
            continue;
        }
        let Some(record) = inputs.items.get(&item) else {
            continue;
        };
        let label = unified_label(&group, &action_set, &weight_table);
        if !label.value && !keep_negative(seed, session_id, &query, item, downsample_rate) {
            continue;
        }
        let user_id = group[0].user_id;
        let context = inputs
            .users
            .get(&user_id)
            .cloned()
            .unwrap_or_else(|| RequestContext::new(user_id));

        let sequence = sequence_before(&history, inputs.items, user_id, timestamp, seq_cap);
        let iqp = inputs.signals.lookup_features(item, &query, Some(&context));
        let example = TrainExample {
            query,
            context,
            sequence,
            features: record.features.clone(),
            iqp,
            label,
            timestamp,
        };
        if timestamp < split_time {
            train.push(example);
        } else {
            test.push(example);
        }
    }
    if train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let sort_key = |e: &TrainExample| {
        (
            e.timestamp,
            e.context.user_id,
            e.query.key_hash,
            e.features.item,
        )
    };
    train.sort_by_key(sort_key);
    test.sort_by_key(sort_key);
    Ok((train, test))
}
