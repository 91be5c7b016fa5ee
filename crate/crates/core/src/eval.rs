//! Offline evaluation: ranking and session metrics, a lexical baseline,
//! query popularity segmentation, synthetic log generation, and the
//! remove-one ablation harness.
//!
//! All metrics are pure functions; request-level evaluation parallelizes
//! with order-independent aggregation. Synthetic generation is fully
//! deterministic for a given config.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::ConfigMap;
use crate::domain::{
    default_action_set, default_weight_table, fnv1a64, normalize_query, unified_label, ActionType,
    Device, EngagementEvent, ItemId, QueryKey, RequestContext,
};
use crate::iqp::{QueryRequest, SignalStore};
use crate::model::{
    embed_item, embed_query, score, ItemFeatures, ItemRecord, ModelConfig, ModelError,
    ModelParams, SequenceEntry,
};
use crate::train::{
    engaged_history, sequence_before, train_loop, TrainError, TrainExample, TrainOptions,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no input to aggregate over")]
    EmptyInput,
    #[error("invalid synthetic config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} line {line_no}: {msg}")]
    Parse {
        path: String,
        line_no: usize,
        msg: String,
    },
}

/// Whether any positive lands in the top k by descending score. Ties rank in
/// ascending input order, so candidates must be listed in their tie-break
/// order (ascending item id). Returns None when the request has no positive;
/// callers skip and count those.
pub fn hits_at_k(scores: &[f64], labels: &[bool], k: usize) -> Result<Option<bool>, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if !labels.iter().any(|&l| l) {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(Some(order.iter().take(k).any(|&i| labels[i])))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    pub proximity_weight: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: 1.2,
            b: 0.75,
            proximity_weight: 0.5,
        }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Corpus-level statistics the lexical baseline needs: document frequency
/// per token and the average document length in tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusStats {
    pub doc_count: usize,
    pub avg_len: f64,
    doc_freq: BTreeMap<String, usize>,
}

impl CorpusStats {
    pub fn build<'a>(docs: impl IntoIterator<Item = &'a str>) -> Self {
        let mut doc_count = 0usize;
        let mut total_len = 0usize;
        let mut doc_freq: BTreeMap<String, usize> = BTreeMap::new();
        for doc in docs {
            doc_count += 1;
            let tokens = tokenize(doc);
            total_len += tokens.len();
            for token in tokens.into_iter().collect::<BTreeSet<_>>() {
                *doc_freq.entry(token).or_insert(0) += 1;
            }
        }
        let avg_len = if doc_count == 0 {
            0.0
        } else {
            total_len as f64 / doc_count as f64
        };
        CorpusStats {
            doc_count,
            avg_len,
            doc_freq,
        }
    }

    /// Always-positive idf: ln(1 + (N - df + 0.5) / (df + 0.5)).
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.doc_freq.get(token).copied().unwrap_or(0) as f64;
        let n = self.doc_count as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

/// Token-match score between a query and one document: BM25 over the
/// document text plus a bonus per query bigram whose tokens appear adjacent
/// in the document, saturated like an ordinary term and weighted by the
/// smaller of the two token idfs. Zero iff no query token occurs.
pub fn bm25_proximity(
    query: &QueryKey,
    doc_text: &str,
    stats: &CorpusStats,
    params: &Bm25Params,
) -> f64 {
    let q_tokens = tokenize(&query.normalized_text);
    let d_tokens = tokenize(doc_text);
    if q_tokens.is_empty() || d_tokens.is_empty() {
        return 0.0;
    }
    let mut tf: BTreeMap<&str, f64> = BTreeMap::new();
    for t in &d_tokens {
        *tf.entry(t).or_insert(0.0) += 1.0;
    }
    let len_ratio = if stats.avg_len > 0.0 {
        d_tokens.len() as f64 / stats.avg_len
    } else {
        0.0
    };
    let norm = params.k1 * (1.0 - params.b + params.b * len_ratio);
    let saturate = |count: f64| count * (params.k1 + 1.0) / (count + norm);

    let mut total = 0.0;
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for t in &q_tokens {
        if !seen.insert(t) {
            continue;
        }
        if let Some(&count) = tf.get(t.as_str()) {
            total += stats.idf(t) * saturate(count);
        }
    }
    let mut seen_pairs: BTreeSet<(&str, &str)> = BTreeSet::new();
    for pair in q_tokens.windows(2) {
        if !seen_pairs.insert((&pair[0], &pair[1])) {
            continue;
        }
        let adjacent = d_tokens
            .windows(2)
            .filter(|w| w[0] == pair[0] && w[1] == pair[1])
            .count() as f64;
        if adjacent > 0.0 {
            let idf = stats.idf(&pair[0]).min(stats.idf(&pair[1]));
            total += params.proximity_weight * idf * saturate(adjacent);
        }
    }
    total
}

/// Query popularity segment by yearly search frequency.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Segment {
    Head,
    Torso,
    Tail,
    Single,
}

impl Segment {
    pub const ALL: [Segment; 4] = [Segment::Head, Segment::Torso, Segment::Tail, Segment::Single];

    pub fn as_str(self) -> &'static str {
        match self {
            Segment::Head => "head",
            Segment::Torso => "torso",
            Segment::Tail => "tail",
            Segment::Single => "single",
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Partition queries by frequency: SINGLE holds frequency-one queries; the
/// rest are walked in descending frequency, and a query is HEAD while the
/// volume before it is under 50% of the non-single total, TORSO under 80%,
/// TAIL after that. Descending-frequency ties order by query text so the
/// assignment is deterministic.
pub fn segment_queries(freq: &BTreeMap<QueryKey, u64>) -> BTreeMap<QueryKey, Segment> {
    let mut segments = BTreeMap::new();
    let mut ranked: Vec<(&QueryKey, u64)> = Vec::new();
    for (query, &count) in freq {
        if count <= 1 {
            segments.insert(query.clone(), Segment::Single);
        } else {
            ranked.push((query, count));
        }
    }
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let total: u64 = ranked.iter().map(|(_, c)| c).sum();
    let mut before = 0u64;
    for (query, count) in ranked {
        let covered = before as f64 / total as f64;
        let segment = if covered < 0.5 {
            Segment::Head
        } else if covered < 0.8 {
            Segment::Torso
        } else {
            Segment::Tail
        };
        segments.insert(query.clone(), segment);
        before += count;
    }
    segments
}

pub fn query_frequency(requests: &[QueryRequest]) -> BTreeMap<QueryKey, u64> {
    let mut freq = BTreeMap::new();
    for req in requests {
        *freq.entry(req.query.clone()).or_insert(0) += 1;
    }
    freq
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchRecord {
    pub timestamp: i64,
    pub query: QueryKey,
    pub feed: Vec<(ItemId, Vec<ActionType>)>,
}

/// One search session: time-ordered searches sharing an intent.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionLog {
    pub session_id: u64,
    pub searches: Vec<SearchRecord>,
}

fn search_fulfilled(search: &SearchRecord) -> bool {
    search
        .feed
        .iter()
        .any(|(_, actions)| actions.iter().any(|a| a.is_fulfilling()))
}

/// Fraction of sessions with a fulfilling action anywhere in the session.
pub fn sifr(sessions: &[SessionLog]) -> Result<f64, EvalError> {
    if sessions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let fulfilled = sessions
        .iter()
        .filter(|s| s.searches.iter().any(search_fulfilled))
        .count();
    Ok(fulfilled as f64 / sessions.len() as f64)
}

/// Fraction of sessions whose first search feed already carries a
/// fulfilling action. Never exceeds sifr on the same sessions.
pub fn f1s(sessions: &[SessionLog]) -> Result<f64, EvalError> {
    if sessions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let fulfilled = sessions
        .iter()
        .filter(|s| s.searches.first().is_some_and(search_fulfilled))
        .count();
    Ok(fulfilled as f64 / sessions.len() as f64)
}

/// Write session logs readable by [`read_sessions`]: one line per search,
/// `session_id\ttimestamp\tquery\tfeed`, feed a comma list of
/// `item:action|action...` (bare `item:` for impression-only, `-` when empty).
pub fn write_sessions(sessions: &[SessionLog], path: &Path) -> Result<(), EvalError> {
    let mut out = String::from("# session_id\ttimestamp\tquery\tfeed\n");
    for session in sessions {
        for search in &session.searches {
            let feed = if search.feed.is_empty() {
                "-".to_string()
            } else {
                search
                    .feed
                    .iter()
                    .map(|(item, actions)| {
                        let joined = actions
                            .iter()
                            .map(|a| a.as_str())
                            .collect::<Vec<_>>()
                            .join("|");
                        format!("{}:{}", item.0, joined)
                    })
                    .collect::<Vec<_>>()
                    .join(",")
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                session.session_id, search.timestamp, search.query.normalized_text, feed
            ));
        }
    }
    std::fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Read session logs written by [`write_sessions`]. Consecutive lines with
/// the same session_id form one session; a change of id starts the next.
pub fn read_sessions(path: &Path) -> Result<Vec<SessionLog>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut sessions: Vec<SessionLog> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| EvalError::Parse {
            path: path.display().to_string(),
            line_no: idx + 1,
            msg,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad(format!("expected 4 columns, found {}", cols.len())));
        }
        let session_id: u64 = cols[0]
            .parse()
            .map_err(|_| bad(format!("bad session_id {:?}", cols[0])))?;
        let timestamp: i64 = cols[1]
            .parse()
            .map_err(|_| bad(format!("bad timestamp {:?}", cols[1])))?;
        let query = normalize_query(cols[2]).map_err(|_| bad(format!("bad query {:?}", cols[2])))?;
        let mut feed = Vec::new();
        if cols[3] != "-" {
            for part in cols[3].split(',') {
                let (item_str, actions_str) = part
                    .split_once(':')
                    .ok_or_else(|| bad(format!("bad feed entry {part:?}")))?;
                let item: u64 = item_str
                    .parse()
                    .map_err(|_| bad(format!("bad item id {item_str:?}")))?;
                let mut actions = Vec::new();
                for name in actions_str.split('|').filter(|s| !s.is_empty()) {
                    let action = ActionType::from_str(name)
                        .map_err(|_| bad(format!("bad action {name:?}")))?;
                    actions.push(action);
                }
                feed.push((ItemId(item), actions));
            }
        }
        let record = SearchRecord {
            timestamp,
            query,
            feed,
        };
        match sessions.last_mut() {
            Some(last) if last.session_id == session_id => last.searches.push(record),
            _ => sessions.push(SessionLog {
                session_id,
                searches: vec![record],
            }),
        }
    }
    Ok(sessions)
}

/// Knobs for the synthetic log generator. Queries, items, and users carry
/// latent topics; engagement probability per impression is
/// base_rate(query topic) scaled by a topic-match boost, the item's
/// popularity factor, the user's topic affinity, and a fixed per-pair quirk.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub topic_count: usize,
    pub item_count: usize,
    pub query_count: usize,
    pub user_count: usize,
    pub days: u32,
    /// Per-topic engagement base rates, cycled when shorter than topic_count.
    pub base_rates: Vec<f64>,
    /// Query popularity follows rank^(-zipf_exponent).
    pub zipf_exponent: f64,
    /// Multiplier when the query's topic matches the item's.
    pub topic_boost: f64,
    /// Multiplier when the user's affinity topic matches the item's.
    pub affinity_boost: f64,
    /// Item popularity factor spread: uniform in [1 - amp, 1 + amp].
    pub popularity_amp: f64,
    /// Per-(query, item) multiplier spread, hash-derived: [1 - amp, 1 + amp].
    pub quirk_amp: f64,
    pub requests_per_day: usize,
    pub feed_size: usize,
    pub content_dim: usize,
    pub rate_count: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            topic_count: 8,
            item_count: 400,
            query_count: 300,
            user_count: 60,
            days: 45,
            base_rates: vec![0.08, 0.1, 0.12, 0.14],
            zipf_exponent: 1.1,
            topic_boost: 4.0,
            affinity_boost: 1.5,
            popularity_amp: 0.25,
            quirk_amp: 0.5,
            requests_per_day: 120,
            feed_size: 12,
            content_dim: 32,
            rate_count: 4,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    /// Build from flat config keys named after the fields; `base_rates` is a
    /// comma list. Missing keys keep their defaults; the result is validated.
    pub fn from_config_map(m: &ConfigMap) -> Result<Self, EvalError> {
        let d = SyntheticConfig::default();
        let err = |e: crate::config::ConfigError| EvalError::BadConfig(e.to_string());
        let base_rates = match m.get_str("base_rates") {
            None => d.base_rates,
            Some(spec) => spec
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<f64>()
                        .map_err(|_| EvalError::BadConfig(format!("bad base rate {:?}", p.trim())))
                })
                .collect::<Result<_, _>>()?,
        };
        let cfg = SyntheticConfig {
            topic_count: m.get_usize("topic_count", d.topic_count).map_err(err)?,
            item_count: m.get_usize("item_count", d.item_count).map_err(err)?,
            query_count: m.get_usize("query_count", d.query_count).map_err(err)?,
            user_count: m.get_usize("user_count", d.user_count).map_err(err)?,
            days: m.get_u64("days", d.days as u64).map_err(err)? as u32,
            base_rates,
            zipf_exponent: m.get_f64("zipf_exponent", d.zipf_exponent).map_err(err)?,
            topic_boost: m.get_f64("topic_boost", d.topic_boost).map_err(err)?,
            affinity_boost: m.get_f64("affinity_boost", d.affinity_boost).map_err(err)?,
            popularity_amp: m.get_f64("popularity_amp", d.popularity_amp).map_err(err)?,
            quirk_amp: m.get_f64("quirk_amp", d.quirk_amp).map_err(err)?,
            requests_per_day: m
                .get_usize("requests_per_day", d.requests_per_day)
                .map_err(err)?,
            feed_size: m.get_usize("feed_size", d.feed_size).map_err(err)?,
            content_dim: m.get_usize("content_dim", d.content_dim).map_err(err)?,
            rate_count: m.get_usize("rate_count", d.rate_count).map_err(err)?,
            seed: m.get_u64("seed", d.seed).map_err(err)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |msg: &str| Err(EvalError::BadConfig(msg.to_string()));
        if self.topic_count < 1
            || self.item_count < 1
            || self.query_count < 1
            || self.user_count < 1
            || self.days < 1
            || self.requests_per_day < 1
            || self.feed_size < 1
            || self.content_dim < 1
            || self.rate_count < 1
        {
            return bad("all counts must be at least 1");
        }
        if self.base_rates.is_empty() || self.base_rates.iter().any(|&r| r <= 0.0 || r >= 1.0) {
            return bad("base rates must lie in (0, 1)");
        }
        if self.zipf_exponent <= 0.0 {
            return bad("zipf exponent must be positive");
        }
        if self.topic_boost <= 0.0 || self.affinity_boost <= 0.0 {
            return bad("boosts must be positive");
        }
        if !(0.0..1.0).contains(&self.popularity_amp) || !(0.0..1.0).contains(&self.quirk_amp) {
            return bad("amplitudes must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Everything one generator run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub events: Vec<EngagementEvent>,
    pub requests: Vec<QueryRequest>,
    pub items: Vec<ItemRecord>,
    pub users: BTreeMap<u64, RequestContext>,
    pub sessions: Vec<SessionLog>,
    pub item_topics: BTreeMap<ItemId, usize>,
    pub query_topics: BTreeMap<QueryKey, usize>,
}

const SECONDS_PER_DAY: i64 = 86_400;

/// Deterministic per-pair engagement quirk, independent of draw order.
fn pair_quirk(seed: u64, query: &QueryKey, item: ItemId, amp: f64) -> f64 {
    let mut key = Vec::with_capacity(24);
    key.extend_from_slice(&seed.to_le_bytes());
    key.extend_from_slice(&query.key_hash.to_le_bytes());
    key.extend_from_slice(&item.0.to_le_bytes());
    let u = fnv1a64(&key) as f64 / u64::MAX as f64;
    1.0 + amp * (2.0 * u - 1.0)
}

/// Generate a reproducible engagement log: events (impressions and
/// engagements), the query request stream, the item catalog, user contexts,
/// and sessionized views of the same traffic. Identical configs produce
/// identical output.
pub fn generate_synthetic_logs(config: &SyntheticConfig) -> Result<SyntheticData, EvalError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Item catalog: topic, popularity factor, content near a topic centroid.
    let centroids: Vec<Vec<f64>> = (0..config.topic_count)
        .map(|_| (0..config.content_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut items = Vec::with_capacity(config.item_count);
    let mut item_topics = BTreeMap::new();
    let mut popularity = BTreeMap::new();
    let mut by_topic: Vec<Vec<ItemId>> = vec![Vec::new(); config.topic_count];
    for i in 0..config.item_count {
        let item = ItemId(i as u64 + 1);
        let topic = rng.gen_range(0..config.topic_count);
        let pop = 1.0 + config.popularity_amp * (2.0 * rng.gen::<f64>() - 1.0);
        let content: Vec<f64> = centroids[topic]
            .iter()
            .map(|&c| 0.8 * c + 0.2 * rng.gen_range(-1.0..1.0))
            .collect();
        let mut rates: Vec<f64> = (0..config.rate_count).map(|_| rng.gen::<f64>()).collect();
        rates[0] = (pop - 0.5).clamp(0.0, 1.0);
        items.push(ItemRecord {
            features: ItemFeatures {
                item,
                rates,
                content,
            },
            title: format!("topic{topic} item{i} piece{}", i % 7),
        });
        item_topics.insert(item, topic);
        popularity.insert(item, pop);
        by_topic[topic].push(item);
    }

    // Queries: topic plus a query-unique token, Zipf-weighted by rank.
    let mut queries = Vec::with_capacity(config.query_count);
    let mut query_topics = BTreeMap::new();
    for j in 0..config.query_count {
        let topic = rng.gen_range(0..config.topic_count);
        let query = normalize_query(&format!("topic{topic} q{j}")).expect("nonempty");
        query_topics.insert(query.clone(), topic);
        queries.push((query, topic));
    }
    let mut zipf_cum = Vec::with_capacity(config.query_count);
    let mut acc = 0.0;
    for rank in 1..=config.query_count {
        acc += 1.0 / (rank as f64).powf(config.zipf_exponent);
        zipf_cum.push(acc);
    }
    let zipf_total = acc;

    // Users: context plus a latent affinity topic.
    const COUNTRIES: [&str; 6] = ["us", "gb", "de", "fr", "jp", "br"];
    const LANGUAGES: [&str; 5] = ["en", "de", "fr", "ja", "pt"];
    let mut users = BTreeMap::new();
    let mut affinity = BTreeMap::new();
    for u in 1..=config.user_count as u64 {
        let mut ctx = RequestContext::new(u);
        ctx.country = COUNTRIES[rng.gen_range(0..COUNTRIES.len())].to_string();
        ctx.device = match rng.gen_range(0..3) {
            0 => Device::Mobile,
            1 => Device::Desktop,
            _ => Device::Tablet,
        };
        ctx.language = LANGUAGES[rng.gen_range(0..LANGUAGES.len())].to_string();
        ctx.age_bucket = rng.gen_range(0..8);
        ctx.gender_bucket = rng.gen_range(0..4);
        users.insert(u, ctx);
        affinity.insert(u, rng.gen_range(0..config.topic_count));
    }

    let mut events = Vec::new();
    let mut requests = Vec::new();
    let mut sessions = Vec::new();
    let mut session_id = 0u64;
    for day in 0..config.days as i64 {
        let day_start = day * SECONDS_PER_DAY + 1;
        let mut remaining = config.requests_per_day;
        while remaining > 0 {
            session_id += 1;
            let user_id = rng.gen_range(1..=config.user_count as u64);
            let user_affinity = affinity[&user_id];
            let length = match rng.gen::<f64>() {
                u if u < 0.6 => 1,
                u if u < 0.9 => 2,
                _ => 3,
            }
            .min(remaining);
            remaining -= length;
            let base_ts = day_start + rng.gen_range(0..SECONDS_PER_DAY - 3_600);
            let mut searches = Vec::with_capacity(length);
            for s in 0..length {
                let ts = base_ts + s as i64 * 120;
                let u = rng.gen::<f64>() * zipf_total;
                let q_idx = zipf_cum.partition_point(|&c| c <= u).min(config.query_count - 1);
                let (query, q_topic) = &queries[q_idx];
                requests.push(QueryRequest {
                    timestamp: ts,
                    user_id,
                    query: query.clone(),
                });

                // Feed: mostly on-topic candidates with a uniform remainder.
                let pool = &by_topic[*q_topic];
                let mut feed_items = Vec::new();
                let mut seen = BTreeSet::new();
                let mut attempts = 0;
                while feed_items.len() < config.feed_size.min(config.item_count)
                    && attempts < config.feed_size * 20
                {
                    attempts += 1;
                    let item = if !pool.is_empty() && rng.gen::<f64>() < 0.7 {
                        pool[rng.gen_range(0..pool.len())]
                    } else {
                        ItemId(rng.gen_range(1..=config.item_count as u64))
                    };
                    if seen.insert(item) {
                        feed_items.push(item);
                    }
                }

                let base_rate = config.base_rates[*q_topic % config.base_rates.len()];
                let mut feed = Vec::with_capacity(feed_items.len());
                for item in feed_items {
                    events.push(EngagementEvent {
                        timestamp: ts,
                        user_id,
                        query: query.clone(),
                        item,
                        action: ActionType::Impression,
                        surface: "search".to_string(),
                        session_id,
                    });
                    let topic = item_topics[&item];
                    let mut p = base_rate * popularity[&item];
                    if topic == *q_topic {
                        p *= config.topic_boost;
                    }
                    if topic == user_affinity {
                        p *= config.affinity_boost;
                    }
                    p *= pair_quirk(config.seed, query, item, config.quirk_amp);
                    let mut actions = Vec::new();
                    if rng.gen::<f64>() < p.clamp(0.0, 0.95) {
                        let action = match rng.gen::<f64>() {
                            u if u < 0.45 => ActionType::Click,
                            u if u < 0.65 => ActionType::LongClick,
                            u if u < 0.85 => ActionType::Save,
                            u if u < 0.95 => ActionType::Download,
                            _ => ActionType::Screenshot,
                        };
                        events.push(EngagementEvent {
                            timestamp: ts + 30,
                            user_id,
                            query: query.clone(),
                            item,
                            action,
                            surface: "search".to_string(),
                            session_id,
                        });
                        actions.push(action);
                    }
                    feed.push((item, actions));
                }
                searches.push(SearchRecord {
                    timestamp: ts,
                    query: query.clone(),
                    feed,
                });
            }
            sessions.push(SessionLog {
                session_id,
                searches,
            });
        }
    }
    events.sort_by_key(|e| e.timestamp);
    requests.sort_by_key(|r| r.timestamp);

    Ok(SyntheticData {
        events,
        requests,
        items,
        users,
        sessions,
        item_topics,
        query_topics,
    })
}

/// One impressed candidate of an evaluation request.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCandidate {
    pub features: ItemFeatures,
    pub label: bool,
    pub actions: BTreeSet<ActionType>,
}

/// One impressed feed of the temporal test split, candidates in ascending
/// item order (the rank tie-break order).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRequest {
    pub query: QueryKey,
    pub context: RequestContext,
    pub sequence: Vec<SequenceEntry>,
    pub candidates: Vec<EvalCandidate>,
    pub timestamp: i64,
}

/// Assemble test-side evaluation requests from the raw log: one request per
/// (session, query) feed whose impression time falls at or after
/// `split_time`, with the same leakage guard and sequence assembly as
/// dataset construction. Feeds are never downsampled.
pub fn build_eval_requests(
    inputs: &crate::train::DatasetInputs,
    split_time: i64,
    seq_cap: usize,
) -> Vec<EvalRequest> {
    let action_set = default_action_set();
    let weight_table = default_weight_table();
    let history = engaged_history(inputs.events);

    let mut feeds: BTreeMap<(u64, QueryKey), BTreeMap<ItemId, Vec<EngagementEvent>>> =
        BTreeMap::new();
    for ev in inputs.events {
        feeds
            .entry((ev.session_id, ev.query.clone()))
            .or_default()
            .entry(ev.item)
            .or_default()
            .push(ev.clone());
    }

    let mut requests = Vec::new();
    for ((_, query), groups) in feeds {
        let timestamp = groups
            .values()
            .flat_map(|g| g.iter().map(|e| e.timestamp))
            .min()
            .expect("nonempty feed");
        if timestamp < split_time || timestamp <= inputs.signals.as_of {
            continue;
        }
        let user_id = groups.values().next().expect("nonempty")[0].user_id;
        let context = inputs
            .users
            .get(&user_id)
            .cloned()
            .unwrap_or_else(|| RequestContext::new(user_id));
        let mut candidates = Vec::new();
        for (item, group) in &groups {
            let Some(record) = inputs.items.get(item) else {
                continue;
            };
            let label = unified_label(group, &action_set, &weight_table);
            let actions: BTreeSet<ActionType> = group
                .iter()
                .filter(|e| e.action != ActionType::Impression)
                .map(|e| e.action)
                .collect();
            candidates.push(EvalCandidate {
                features: record.features.clone(),
                label: label.value,
                actions,
            });
        }
        if candidates.is_empty() {
            continue;
        }
        let sequence = sequence_before(&history, inputs.items, user_id, timestamp, seq_cap);
        requests.push(EvalRequest {
            query,
            context,
            sequence,
            candidates,
            timestamp,
        });
    }
    requests.sort_by(|a, b| {
        (a.timestamp, a.context.user_id, a.query.key_hash).cmp(&(
            b.timestamp,
            b.context.user_id,
            b.query.key_hash,
        ))
    });
    requests
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HitsReport {
    /// Requests with at least one positive under the active label.
    pub evaluated: usize,
    /// Requests skipped for lack of a positive.
    pub skipped: usize,
    /// Mean hit indicator over evaluated requests.
    pub hits: f64,
}

/// Score every candidate of every request with the model plus signal store
/// and aggregate HITS@k. `action` narrows positives to candidates carrying
/// that action; None uses the unified label.
pub fn evaluate_hits(
    params: &ModelParams,
    signals: &SignalStore,
    requests: &[EvalRequest],
    k: usize,
    action: Option<ActionType>,
) -> Result<HitsReport, EvalError> {
    let cfg = &params.config;
    let outcomes: Vec<Option<bool>> = requests
        .par_iter()
        .map(|req| {
            let q_emb: Vec<f64> = if cfg.use_towers {
                embed_query(&req.query, &req.context, &req.sequence, params).0
            } else {
                Vec::new()
            };
            let mut scores = Vec::with_capacity(req.candidates.len());
            let mut labels = Vec::with_capacity(req.candidates.len());
            for cand in &req.candidates {
                let i_emb: Vec<f64> = if cfg.use_towers {
                    embed_item(&cand.features, params).0
                } else {
                    Vec::new()
                };
                let iqp =
                    signals.lookup_features(cand.features.item, &req.query, Some(&req.context));
                let bd = score(&q_emb, &i_emb, &iqp, params)?;
                scores.push(bd.raw_score);
                labels.push(match action {
                    None => cand.label,
                    Some(a) => cand.actions.contains(&a),
                });
            }
            hits_at_k(&scores, &labels, k)
        })
        .collect::<Result<_, EvalError>>()?;

    let mut report = HitsReport::default();
    let mut hit_count = 0usize;
    for outcome in outcomes {
        match outcome {
            None => report.skipped += 1,
            Some(hit) => {
                report.evaluated += 1;
                hit_count += usize::from(hit);
            }
        }
    }
    if report.evaluated > 0 {
        report.hits = hit_count as f64 / report.evaluated as f64;
    }
    Ok(report)
}

/// Model components the remove-one ablation can drop. Removal disables the
/// component's inputs and strips its parameters before training, so the
/// variant trains without the capacity rather than merely zeroing it at
/// evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationTarget {
    UserEngagementSequence,
    CrossInteractionFeatures,
    ParallelMaskNet,
}

impl AblationTarget {
    pub const ALL: [AblationTarget; 3] = [
        AblationTarget::UserEngagementSequence,
        AblationTarget::CrossInteractionFeatures,
        AblationTarget::ParallelMaskNet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationTarget::UserEngagementSequence => "sequence",
            AblationTarget::CrossInteractionFeatures => "interactions",
            AblationTarget::ParallelMaskNet => "masknet",
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        match self {
            AblationTarget::UserEngagementSequence => cfg.use_sequence = false,
            AblationTarget::CrossInteractionFeatures => cfg.use_iqp = false,
            AblationTarget::ParallelMaskNet => cfg.use_masknet = false,
        }
    }
}

impl fmt::Display for AblationTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sequence" => Ok(AblationTarget::UserEngagementSequence),
            "interactions" => Ok(AblationTarget::CrossInteractionFeatures),
            "masknet" => Ok(AblationTarget::ParallelMaskNet),
            other => Err(format!(
                "unknown ablation target {other:?}; expected sequence, interactions, or masknet"
            )),
        }
    }
}

/// One line of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub metric: String,
    pub segment: String,
    pub variant: String,
    pub value: f64,
    pub delta_vs_base: f64,
}

pub fn rows_to_tsv(rows: &[ReportRow]) -> String {
    let mut out = String::from("metric\tsegment\tvariant\tvalue\tdelta_vs_base\n");
    for row in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            row.metric, row.segment, row.variant, row.value, row.delta_vs_base
        ));
    }
    out
}

/// Shared data one train-plus-evaluate run consumes.
pub struct EvalDataset<'a> {
    pub train: &'a [TrainExample],
    pub requests: &'a [EvalRequest],
    pub signals: &'a SignalStore,
    pub opts: &'a TrainOptions,
    pub k: usize,
}

/// Train one config from scratch and report HITS@k on the test requests.
pub fn train_and_eval(
    cfg: &ModelConfig,
    data: &EvalDataset,
) -> Result<(ModelParams, HitsReport), EvalError> {
    let mut params = ModelParams::init(cfg.clone(), data.opts.seed);
    train_loop(&mut params, data.train, data.opts, None)?;
    let report = evaluate_hits(&params, data.signals, data.requests, data.k, None)?;
    Ok((params, report))
}

fn metric_rows(
    params: &ModelParams,
    data: &EvalDataset,
    overall: HitsReport,
) -> Result<Vec<(String, f64)>, EvalError> {
    let k = data.k;
    let mut rows = vec![(format!("hits@{k}"), overall.hits)];
    for action in [ActionType::Save, ActionType::LongClick] {
        let report = evaluate_hits(params, data.signals, data.requests, k, Some(action))?;
        rows.push((
            format!("hits@{k}:{}", action.as_str()),
            report.hits,
        ));
    }
    Ok(rows)
}

/// Remove-one ablation: train the base config and each ablated variant on
/// identical data, seed, and budget, then report HITS@k overall and per
/// fulfilling action with deltas relative to base (absolute when the base
/// value is zero).
pub fn ablation_run(
    base_cfg: &ModelConfig,
    removals: &[AblationTarget],
    data: &EvalDataset,
) -> Result<Vec<ReportRow>, EvalError> {
    let (base_params, base_overall) = train_and_eval(base_cfg, data)?;
    let base_metrics = metric_rows(&base_params, data, base_overall)?;
    let mut rows: Vec<ReportRow> = base_metrics
        .iter()
        .map(|(metric, value)| ReportRow {
            metric: metric.clone(),
            segment: "all".to_string(),
            variant: "base".to_string(),
            value: *value,
            delta_vs_base: 0.0,
        })
        .collect();
    for removal in removals {
        let mut cfg = base_cfg.clone();
        removal.apply(&mut cfg);
        let (params, overall) = train_and_eval(&cfg, data)?;
        let variant = format!("minus-{removal}");
        for ((metric, value), (_, base_value)) in
            metric_rows(&params, data, overall)?.iter().zip(&base_metrics)
        {
            let delta = if *base_value == 0.0 {
                *value
            } else {
                (*value - *base_value) / *base_value
            };
            rows.push(ReportRow {
                metric: metric.clone(),
                segment: "all".to_string(),
                variant: variant.clone(),
                value: *value,
                delta_vs_base: delta,
            });
        }
    }
    Ok(rows)
}
