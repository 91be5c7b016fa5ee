//! Query-item engagement priors over sliding windows.
//!
//! For every (item, query) pair we track how often the item was engaged for
//! that query (C(p,q)) and how often the query was asked (C(q)), over several
//! trailing windows. The smoothed ratio (C(p,q)+alpha)/(C(q)+beta) is the
//! signal score; each item retains only its top-K queries per window.
//!
//! Counts are sharded by day so a store can be advanced one day at a time:
//! add the new day's shard, expire the oldest, and the result is bit-identical
//! to recounting the whole window from scratch.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::config::ConfigMap;
use crate::domain::{
    fnv1a64, normalize_query, ActionType, EngagementEvent, ItemId, QueryKey, RequestContext,
};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Day index of a timestamp. Day `d` owns the half-open-from-below interval
/// `(d*86400, (d+1)*86400]`, so a timestamp exactly on a midnight boundary
/// belongs to the day that just ended.
pub fn day_index(ts: i64) -> i64 {
    (ts - 1).div_euclid(SECONDS_PER_DAY)
}

#[derive(Debug, Error)]
pub enum IqpError {
    #[error("record at {timestamp} is later than as_of {as_of}")]
    EventAfterAsOf { timestamp: i64, as_of: i64 },
    #[error("as_of {as_of} must be a positive multiple of 86400")]
    MisalignedAsOf { as_of: i64 },
    #[error("delta must cover exactly day {expected_day}, found {found}")]
    NonAdjacentDelta { expected_day: i64, found: String },
    #[error("window mismatch: base {base}, delta {delta}")]
    WindowMismatch { base: String, delta: String },
    #[error("cannot restrict a {have}-day store to {wanted} days")]
    WindowTooLong { wanted: u32, have: u32 },
    #[error("{path} line {line_no}: {msg}")]
    Parse {
        path: String,
        line_no: usize,
        msg: String,
    },
    #[error("{path}: bad binary store: {msg}")]
    BadBinary { path: String, msg: String },
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub name: String,
    pub length_days: u32,
}

impl WindowSpec {
    pub fn new(name: &str, length_days: u32) -> Self {
        WindowSpec {
            name: name.to_string(),
            length_days,
        }
    }
}

impl fmt::Display for WindowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name, self.length_days)
    }
}

/// Trailing windows the signal is computed over.
pub fn default_windows() -> Vec<WindowSpec> {
    vec![
        WindowSpec::new("7d", 7),
        WindowSpec::new("90d", 90),
        WindowSpec::new("1y", 365),
        WindowSpec::new("2y", 730),
    ]
}

/// Request context dimensions a signal can be conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ContextDim {
    Country,
    Device,
    Gender,
}

impl ContextDim {
    pub fn as_str(self) -> &'static str {
        match self {
            ContextDim::Country => "country",
            ContextDim::Device => "device",
            ContextDim::Gender => "gender",
        }
    }

    /// The discrete context value this dimension takes for a request.
    pub fn value_of(self, ctx: &RequestContext) -> String {
        match self {
            ContextDim::Country => ctx.country.clone(),
            ContextDim::Device => ctx.device.as_str().to_string(),
            ContextDim::Gender => ctx.gender_bucket.to_string(),
        }
    }
}

impl FromStr for ContextDim {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "country" => Ok(ContextDim::Country),
            "device" => Ok(ContextDim::Device),
            "gender" => Ok(ContextDim::Gender),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub min_query_count: u64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            alpha: 1.0,
            beta: 20.0,
            min_query_count: 5,
        }
    }
}

/// One slot of the signal feature vector: a window, optionally conditioned
/// on a context dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotSpec {
    pub window: WindowSpec,
    pub context: Option<ContextDim>,
}

impl SlotSpec {
    pub fn name(&self) -> String {
        match self.context {
            None => self.window.name.clone(),
            Some(dim) => format!("{}@{}", self.window.name, dim.as_str()),
        }
    }
}

/// Full configuration of the signal build.
#[derive(Clone, Debug, PartialEq)]
pub struct IqpConfig {
    pub windows: Vec<WindowSpec>,
    pub context_variants: Vec<(WindowSpec, ContextDim)>,
    pub k: usize,
    pub smoothing: SmoothingConfig,
    pub engagement_actions: BTreeSet<ActionType>,
}

impl Default for IqpConfig {
    fn default() -> Self {
        let ninety = WindowSpec::new("90d", 90);
        IqpConfig {
            windows: default_windows(),
            context_variants: vec![
                (ninety.clone(), ContextDim::Country),
                (ninety.clone(), ContextDim::Device),
                (ninety, ContextDim::Gender),
            ],
            k: 100,
            smoothing: SmoothingConfig::default(),
            engagement_actions: crate::domain::default_action_set(),
        }
    }
}

impl IqpConfig {
    /// Build from flat config keys, defaults filling the gaps. Windows are
    /// `name:days` comma lists (`iqp_windows`), context variants add `@dim`
    /// (`iqp_context_windows`), actions are a comma list (`iqp_actions`).
    pub fn from_config_map(m: &ConfigMap) -> Result<Self, crate::config::ConfigError> {
        use crate::config::ConfigError;
        let d = IqpConfig::default();
        let bad = |key: &str, value: &str, wanted: &'static str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            wanted,
        };
        let parse_window = |key: &str, part: &str| -> Result<WindowSpec, ConfigError> {
            let (name, days) = part
                .split_once(':')
                .ok_or_else(|| bad(key, part, "name:days"))?;
            let length_days: u32 = days.parse().map_err(|_| bad(key, part, "name:days"))?;
            Ok(WindowSpec::new(name, length_days))
        };
        let windows = match m.get_str("iqp_windows") {
            None => d.windows,
            Some(spec) => spec
                .split(',')
                .map(|p| parse_window("iqp_windows", p.trim()))
                .collect::<Result<_, _>>()?,
        };
        let context_variants = match m.get_str("iqp_context_windows") {
            None => d.context_variants,
            Some(spec) => spec
                .split(',')
                .map(|p| {
                    let part = p.trim();
                    let (win, dim) = part
                        .split_once('@')
                        .ok_or_else(|| bad("iqp_context_windows", part, "name:days@dim"))?;
                    let window = parse_window("iqp_context_windows", win)?;
                    let dim = ContextDim::from_str(dim)
                        .map_err(|_| bad("iqp_context_windows", part, "name:days@dim"))?;
                    Ok((window, dim))
                })
                .collect::<Result<_, ConfigError>>()?,
        };
        let engagement_actions = match m.get_str("iqp_actions") {
            None => d.engagement_actions,
            Some(spec) => spec
                .split(',')
                .map(|p| {
                    ActionType::from_str(p.trim())
                        .map_err(|_| bad("iqp_actions", p.trim(), "action name"))
                })
                .collect::<Result<_, ConfigError>>()?,
        };
        Ok(IqpConfig {
            windows,
            context_variants,
            k: m.get_usize("iqp_k", d.k)?,
            smoothing: SmoothingConfig {
                alpha: m.get_f64("iqp_alpha", d.smoothing.alpha)?,
                beta: m.get_f64("iqp_beta", d.smoothing.beta)?,
                min_query_count: m.get_u64("iqp_min_query_count", d.smoothing.min_query_count)?,
            },
            engagement_actions,
        })
    }

    /// Global slots first, then context variants, in declared order.
    pub fn slots(&self) -> Vec<SlotSpec> {
        let mut slots: Vec<SlotSpec> = self
            .windows
            .iter()
            .map(|w| SlotSpec {
                window: w.clone(),
                context: None,
            })
            .collect();
        for (w, dim) in &self.context_variants {
            slots.push(SlotSpec {
                window: w.clone(),
                context: Some(*dim),
            });
        }
        slots
    }

    pub fn feature_count(&self) -> usize {
        self.windows.len() + self.context_variants.len()
    }

    fn longest_window(&self) -> WindowSpec {
        self.windows
            .iter()
            .max_by_key(|w| w.length_days)
            .cloned()
            .expect("at least one window")
    }
}

/// A search request row: who asked what, when. Sits beside the engagement
/// log so query volume C(q) counts requests rather than engagements.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRequest {
    pub timestamp: i64,
    pub user_id: u64,
    pub query: QueryKey,
}

pub fn parse_request_line(line: &str, line_no: usize) -> Result<QueryRequest, IqpError> {
    let cols: Vec<&str> = line.split('\t').collect();
    let bad = |msg: String| IqpError::Parse {
        path: String::new(),
        line_no,
        msg,
    };
    if cols.len() != 3 {
        return Err(bad(format!("expected 3 columns, found {}", cols.len())));
    }
    let timestamp: i64 = cols[0]
        .parse()
        .map_err(|_| bad(format!("bad timestamp {:?}", cols[0])))?;
    let user_id: u64 = cols[1]
        .parse()
        .map_err(|_| bad(format!("bad user_id {:?}", cols[1])))?;
    let query = normalize_query(cols[2]).map_err(|_| bad(format!("bad query {:?}", cols[2])))?;
    Ok(QueryRequest {
        timestamp,
        user_id,
        query,
    })
}

pub fn format_request_line(req: &QueryRequest) -> String {
    format!("{}\t{}\t{}", req.timestamp, req.user_id, req.query.normalized_text)
}

pub fn read_requests(path: &Path) -> Result<Vec<QueryRequest>, IqpError> {
    let file = File::open(path).map_err(|source| IqpError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| IqpError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(parse_request_line(trimmed, idx + 1).map_err(|e| match e {
            IqpError::Parse { line_no, msg, .. } => IqpError::Parse {
                path: path.display().to_string(),
                line_no,
                msg,
            },
            other => other,
        })?);
    }
    Ok(out)
}

/// Write a request log readable by [`read_requests`].
pub fn write_requests(requests: &[QueryRequest], path: &Path) -> Result<(), IqpError> {
    let mut out = String::from("# timestamp\tuser_id\tquery\n");
    for req in requests {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            req.timestamp, req.user_id, req.query.normalized_text
        ));
    }
    std::fs::write(path, out).map_err(|source| IqpError::Io {
        path: path.display().to_string(),
        source,
    })
}

type PairKey = (ItemId, QueryKey);

/// Counts for a single day.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DayShard {
    pub day: i64,
    pub pair_counts: BTreeMap<PairKey, u64>,
    pub query_counts: BTreeMap<QueryKey, u64>,
}

impl DayShard {
    fn empty(day: i64) -> Self {
        DayShard {
            day,
            ..DayShard::default()
        }
    }
}

/// Sliding-window counts: aggregates plus the per-day shards they were
/// summed from, so the window can advance without recounting history.
#[derive(Clone, Debug, PartialEq)]
pub struct CountStore {
    pub window: WindowSpec,
    pub as_of: i64,
    pair_counts: BTreeMap<PairKey, u64>,
    query_counts: BTreeMap<QueryKey, u64>,
    daily_shards: Vec<DayShard>,
}

fn check_as_of(as_of: i64) -> Result<(), IqpError> {
    if as_of <= 0 || as_of % SECONDS_PER_DAY != 0 {
        return Err(IqpError::MisalignedAsOf { as_of });
    }
    Ok(())
}

impl CountStore {
    /// A store with every shard present but empty.
    pub fn empty(window: WindowSpec, as_of: i64) -> Result<Self, IqpError> {
        check_as_of(as_of)?;
        let end_day = as_of / SECONDS_PER_DAY;
        let shards = (end_day - i64::from(window.length_days)..end_day)
            .map(DayShard::empty)
            .collect();
        Ok(CountStore {
            window,
            as_of,
            pair_counts: BTreeMap::new(),
            query_counts: BTreeMap::new(),
            daily_shards: shards,
        })
    }

    pub fn pair_count(&self, item: ItemId, query: &QueryKey) -> u64 {
        self.pair_counts
            .get(&(item, query.clone()))
            .copied()
            .unwrap_or(0)
    }

    pub fn query_count(&self, query: &QueryKey) -> u64 {
        self.query_counts.get(query).copied().unwrap_or(0)
    }

    pub fn pair_counts(&self) -> &BTreeMap<PairKey, u64> {
        &self.pair_counts
    }

    pub fn query_counts(&self) -> &BTreeMap<QueryKey, u64> {
        &self.query_counts
    }

    pub fn daily_shards(&self) -> &[DayShard] {
        &self.daily_shards
    }

    /// True iff the aggregates equal the shard sums and the shards cover
    /// exactly the window. Cheap enough to run in tests after every mutation.
    pub fn is_consistent(&self) -> bool {
        let end_day = self.as_of / SECONDS_PER_DAY;
        let expected_days: Vec<i64> =
            (end_day - i64::from(self.window.length_days)..end_day).collect();
        let actual_days: Vec<i64> = self.daily_shards.iter().map(|s| s.day).collect();
        if expected_days != actual_days {
            return false;
        }
        let mut pairs: BTreeMap<PairKey, u64> = BTreeMap::new();
        let mut queries: BTreeMap<QueryKey, u64> = BTreeMap::new();
        for shard in &self.daily_shards {
            for (k, v) in &shard.pair_counts {
                *pairs.entry(k.clone()).or_insert(0) += v;
            }
            for (k, v) in &shard.query_counts {
                *queries.entry(k.clone()).or_insert(0) += v;
            }
        }
        pairs == self.pair_counts && queries == self.query_counts
    }

    /// Narrow to a shorter window ending at the same as_of. Equal to having
    /// accumulated with the shorter window directly.
    pub fn restrict(&self, target: &WindowSpec) -> Result<CountStore, IqpError> {
        if target.length_days > self.window.length_days {
            return Err(IqpError::WindowTooLong {
                wanted: target.length_days,
                have: self.window.length_days,
            });
        }
        let keep = self.daily_shards.len() - target.length_days as usize;
        let shards: Vec<DayShard> = self.daily_shards[keep..].to_vec();
        let mut store = CountStore {
            window: target.clone(),
            as_of: self.as_of,
            pair_counts: BTreeMap::new(),
            query_counts: BTreeMap::new(),
            daily_shards: shards,
        };
        store.rebuild_aggregates();
        Ok(store)
    }

    fn rebuild_aggregates(&mut self) {
        self.pair_counts.clear();
        self.query_counts.clear();
        for shard in &self.daily_shards {
            for (k, v) in &shard.pair_counts {
                *self.pair_counts.entry(k.clone()).or_insert(0) += v;
            }
            for (k, v) in &shard.query_counts {
                *self.query_counts.entry(k.clone()).or_insert(0) += v;
            }
        }
    }
}

fn accumulate_iter<'a, E, R>(
    events: E,
    requests: R,
    window: &WindowSpec,
    engagement_actions: &BTreeSet<ActionType>,
    as_of: i64,
) -> Result<CountStore, IqpError>
where
    E: IntoIterator<Item = &'a EngagementEvent>,
    R: IntoIterator<Item = &'a QueryRequest>,
{
    let mut store = CountStore::empty(window.clone(), as_of)?;
    let end_day = as_of / SECONDS_PER_DAY;
    let first_day = end_day - i64::from(window.length_days);
    let shard_for = |day: i64| (day - first_day) as usize;

    for event in events {
        if event.timestamp > as_of {
            return Err(IqpError::EventAfterAsOf {
                timestamp: event.timestamp,
                as_of,
            });
        }
        if !engagement_actions.contains(&event.action) {
            continue;
        }
        let day = day_index(event.timestamp);
        if day < first_day {
            continue;
        }
        let shard = &mut store.daily_shards[shard_for(day)];
        *shard
            .pair_counts
            .entry((event.item, event.query.clone()))
            .or_insert(0) += 1;
        *store
            .pair_counts
            .entry((event.item, event.query.clone()))
            .or_insert(0) += 1;
    }
    for req in requests {
        if req.timestamp > as_of {
            return Err(IqpError::EventAfterAsOf {
                timestamp: req.timestamp,
                as_of,
            });
        }
        let day = day_index(req.timestamp);
        if day < first_day {
            continue;
        }
        let shard = &mut store.daily_shards[shard_for(day)];
        *shard.query_counts.entry(req.query.clone()).or_insert(0) += 1;
        *store.query_counts.entry(req.query.clone()).or_insert(0) += 1;
    }
    Ok(store)
}

/// Count engagements and requests inside the window ending at `as_of`.
/// Records after `as_of` are an error; records before the window are skipped.
pub fn accumulate_counts(
    events: &[EngagementEvent],
    requests: &[QueryRequest],
    window: &WindowSpec,
    engagement_actions: &BTreeSet<ActionType>,
    as_of: i64,
) -> Result<CountStore, IqpError> {
    accumulate_iter(events.iter(), requests.iter(), window, engagement_actions, as_of)
}

/// Counts for the single day ending at `day_end`, packaged as a merge delta
/// carrying `window`'s spec. Records outside that day are skipped (or
/// rejected if in the future), matching `accumulate_counts` semantics.
pub fn accumulate_delta_day(
    events: &[EngagementEvent],
    requests: &[QueryRequest],
    window: &WindowSpec,
    engagement_actions: &BTreeSet<ActionType>,
    day_end: i64,
) -> Result<CountStore, IqpError> {
    let one_day = WindowSpec::new(&window.name, 1);
    let mut store = accumulate_counts(events, requests, &one_day, engagement_actions, day_end)?;
    store.window = window.clone();
    Ok(store)
}

/// Advance `base` by one day: add `delta`'s single shard, expire the oldest.
/// The result is bit-identical to recounting the new window from scratch.
pub fn merge_counts(base: &CountStore, delta: &CountStore) -> Result<CountStore, IqpError> {
    if base.window != delta.window {
        return Err(IqpError::WindowMismatch {
            base: base.window.to_string(),
            delta: delta.window.to_string(),
        });
    }
    let expected_day = base.as_of / SECONDS_PER_DAY;
    if delta.daily_shards.len() != 1 {
        return Err(IqpError::NonAdjacentDelta {
            expected_day,
            found: format!("{} shards", delta.daily_shards.len()),
        });
    }
    let delta_shard = &delta.daily_shards[0];
    if delta_shard.day != expected_day {
        return Err(IqpError::NonAdjacentDelta {
            expected_day,
            found: format!("day {}", delta_shard.day),
        });
    }

    let mut merged = base.clone();
    merged.as_of += SECONDS_PER_DAY;
    let expired = merged.daily_shards.remove(0);
    merged.daily_shards.push(delta_shard.clone());

    for (k, v) in &delta_shard.pair_counts {
        *merged.pair_counts.entry(k.clone()).or_insert(0) += v;
    }
    for (k, v) in &delta_shard.query_counts {
        *merged.query_counts.entry(k.clone()).or_insert(0) += v;
    }
    for (k, v) in &expired.pair_counts {
        let remaining = merged.pair_counts.get_mut(k).expect("aggregate covers shard");
        *remaining -= v;
        if *remaining == 0 {
            merged.pair_counts.remove(k);
        }
    }
    for (k, v) in &expired.query_counts {
        let remaining = merged.query_counts.get_mut(k).expect("aggregate covers shard");
        *remaining -= v;
        if *remaining == 0 {
            merged.query_counts.remove(k);
        }
    }
    Ok(merged)
}

/// Smoothed engagement-rate scores for every counted pair.
///
/// Emits (C(p,q)+alpha)/(C(q)+beta) for pairs with C(p,q) > 0 whose query
/// cleared `min_query_count`. Queries with zero recorded requests but counted
/// engagements still emit (C(q)=0) only when the floor is zero.
pub fn compute_iqp(
    counts: &CountStore,
    smoothing: &SmoothingConfig,
) -> BTreeMap<PairKey, f64> {
    let mut scores = BTreeMap::new();
    for ((item, query), &cpq) in &counts.pair_counts {
        if cpq == 0 {
            continue;
        }
        let cq = counts.query_count(query);
        if cq < smoothing.min_query_count {
            continue;
        }
        let score = (cpq as f64 + smoothing.alpha) / (cq as f64 + smoothing.beta);
        scores.insert((*item, query.clone()), score);
    }
    scores
}

/// A signal candidate before retention: the lookup key, its score, and the
/// raw pair count used for tie-breaking.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredKey {
    pub key_hash: u64,
    pub key_text: String,
    pub score: f64,
    pub pair_count: u64,
}

/// Keep the K best-scoring keys: score descending, then larger pair count,
/// then smaller hash.
pub fn topk_retain(mut scored: Vec<ScoredKey>, k: usize) -> Vec<ScoredKey> {
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then(b.pair_count.cmp(&a.pair_count))
            .then(a.key_hash.cmp(&b.key_hash))
    });
    scored.truncate(k);
    scored
}

/// One retained signal entry. For context-conditioned slots the key text is
/// the query composed with the context value.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalEntry {
    pub key_hash: u64,
    pub key_text: String,
    pub score: f64,
}

/// Composite lookup key for a context-conditioned slot. '%' and '@' inside
/// either part are escaped, so the composition is injective.
pub fn compose_context_key(query_text: &str, ctx_value: &str) -> String {
    fn esc(s: &str) -> String {
        s.replace('%', "%25").replace('@', "%40")
    }
    format!("{}@{}", esc(query_text), esc(ctx_value))
}

/// The sealed per-item signal store: for each item and slot, the top-K keys
/// with their scores, sorted by the retention order.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalStore {
    pub k: usize,
    pub as_of: i64,
    pub slots: Vec<SlotSpec>,
    pub items: BTreeMap<ItemId, Vec<Vec<SignalEntry>>>,
}

impl SignalStore {
    pub fn slot_names(&self) -> Vec<String> {
        self.slots.iter().map(SlotSpec::name).collect()
    }

    pub fn feature_count(&self) -> usize {
        self.slots.len()
    }

    /// The signal feature vector for (item, query) under an optional request
    /// context: one float per slot, 0.0 where the key is not retained.
    /// Context slots are zero when no context is supplied.
    pub fn lookup_features(
        &self,
        item: ItemId,
        query: &QueryKey,
        context: Option<&RequestContext>,
    ) -> Vec<f64> {
        let mut features = vec![0.0; self.slots.len()];
        let Some(per_slot) = self.items.get(&item) else {
            return features;
        };
        for (idx, slot) in self.slots.iter().enumerate() {
            let key_text = match slot.context {
                None => query.normalized_text.clone(),
                Some(dim) => match context {
                    None => continue,
                    Some(ctx) => compose_context_key(&query.normalized_text, &dim.value_of(ctx)),
                },
            };
            let key_hash = fnv1a64(key_text.as_bytes());
            for entry in &per_slot[idx] {
                if entry.key_hash == key_hash && entry.key_text == key_text {
                    features[idx] = entry.score;
                    break;
                }
            }
        }
        features
    }
}

/// Per-context-key count stores over one window: each store equals
/// `accumulate_counts` restricted to records whose extracted key matches.
pub fn conditioned_counts<F>(
    events: &[EngagementEvent],
    requests: &[QueryRequest],
    window: &WindowSpec,
    engagement_actions: &BTreeSet<ActionType>,
    as_of: i64,
    extract: F,
) -> Result<BTreeMap<String, CountStore>, IqpError>
where
    F: Fn(u64) -> String,
{
    let mut event_groups: BTreeMap<String, Vec<&EngagementEvent>> = BTreeMap::new();
    for event in events {
        event_groups.entry(extract(event.user_id)).or_default().push(event);
    }
    let mut request_groups: BTreeMap<String, Vec<&QueryRequest>> = BTreeMap::new();
    for req in requests {
        request_groups.entry(extract(req.user_id)).or_default().push(req);
    }
    let keys: BTreeSet<String> = event_groups
        .keys()
        .chain(request_groups.keys())
        .cloned()
        .collect();
    let mut out = BTreeMap::new();
    for key in keys {
        let evs = event_groups.remove(&key).unwrap_or_default();
        let reqs = request_groups.remove(&key).unwrap_or_default();
        let store = accumulate_iter(
            evs.into_iter(),
            reqs.into_iter(),
            window,
            engagement_actions,
            as_of,
        )?;
        out.insert(key, store);
    }
    Ok(out)
}

/// Context key extractor backed by a user attribute table; users missing
/// from the table land in the "?" bucket so the partition stays total.
pub fn user_context_extractor(
    users: &BTreeMap<u64, RequestContext>,
    dim: ContextDim,
) -> impl Fn(u64) -> String + '_ {
    move |user_id| match users.get(&user_id) {
        Some(ctx) => dim.value_of(ctx),
        None => "?".to_string(),
    }
}

/// All count stores needed to build (and later advance) a signal store:
/// one global store at the longest window, plus per-context-key stores for
/// each conditioned dimension at its own window.
#[derive(Clone, Debug, PartialEq)]
pub struct CountsBundle {
    pub as_of: i64,
    pub engagement_actions: BTreeSet<ActionType>,
    pub global: CountStore,
    pub contexts: BTreeMap<(ContextDim, String), CountStore>,
}

fn dim_windows(config: &IqpConfig) -> BTreeMap<ContextDim, WindowSpec> {
    let mut out: BTreeMap<ContextDim, WindowSpec> = BTreeMap::new();
    for (window, dim) in &config.context_variants {
        let entry = out.entry(*dim).or_insert_with(|| window.clone());
        if window.length_days > entry.length_days {
            *entry = window.clone();
        }
    }
    out
}

/// Count everything the configured slots need, as of `as_of`.
pub fn build_counts_bundle(
    events: &[EngagementEvent],
    requests: &[QueryRequest],
    users: &BTreeMap<u64, RequestContext>,
    config: &IqpConfig,
    as_of: i64,
) -> Result<CountsBundle, IqpError> {
    let global = accumulate_counts(
        events,
        requests,
        &config.longest_window(),
        &config.engagement_actions,
        as_of,
    )?;
    let mut contexts = BTreeMap::new();
    for (dim, window) in dim_windows(config) {
        let stores = conditioned_counts(
            events,
            requests,
            &window,
            &config.engagement_actions,
            as_of,
            user_context_extractor(users, dim),
        )?;
        for (key, store) in stores {
            contexts.insert((dim, key), store);
        }
    }
    Ok(CountsBundle {
        as_of,
        engagement_actions: config.engagement_actions.clone(),
        global,
        contexts,
    })
}

/// One day of new counts in bundle shape, ready to merge onto a base bundle.
pub fn build_delta_bundle(
    events: &[EngagementEvent],
    requests: &[QueryRequest],
    users: &BTreeMap<u64, RequestContext>,
    config: &IqpConfig,
    day_end: i64,
) -> Result<CountsBundle, IqpError> {
    let base = build_counts_bundle(events, requests, users, config, day_end)?;
    let single = |store: &CountStore| -> CountStore {
        let mut delta = store.clone();
        let last = delta.daily_shards.pop().expect("window has at least one day");
        delta.daily_shards = vec![last];
        delta.rebuild_aggregates();
        delta
    };
    // Counting with the full window and keeping only the newest shard gives
    // exactly the new day's records (older ones cannot land in that shard).
    let mut bundle = CountsBundle {
        as_of: day_end,
        engagement_actions: base.engagement_actions,
        global: single(&base.global),
        contexts: BTreeMap::new(),
    };
    for (key, store) in &base.contexts {
        bundle.contexts.insert(key.clone(), single(store));
    }
    Ok(bundle)
}

/// Advance a bundle by one day. Context keys new to the delta start from an
/// empty base; keys absent from the delta still expire their oldest shard.
pub fn merge_bundle(base: &CountsBundle, delta: &CountsBundle) -> Result<CountsBundle, IqpError> {
    let mut merged = CountsBundle {
        as_of: base.as_of + SECONDS_PER_DAY,
        engagement_actions: base.engagement_actions.clone(),
        global: merge_counts(&base.global, &delta.global)?,
        contexts: BTreeMap::new(),
    };
    let all_keys: BTreeSet<(ContextDim, String)> = base
        .contexts
        .keys()
        .chain(delta.contexts.keys())
        .cloned()
        .collect();
    for key in all_keys {
        let (window, day) = match (base.contexts.get(&key), delta.contexts.get(&key)) {
            (Some(b), _) => (b.window.clone(), b.as_of / SECONDS_PER_DAY),
            (None, Some(d)) => (d.window.clone(), d.as_of / SECONDS_PER_DAY - 1),
            (None, None) => unreachable!("key came from the union of both maps"),
        };
        let empty_base;
        let base_store = match base.contexts.get(&key) {
            Some(b) => b,
            None => {
                empty_base = CountStore::empty(window.clone(), day * SECONDS_PER_DAY)?;
                &empty_base
            }
        };
        let empty_delta;
        let delta_store = match delta.contexts.get(&key) {
            Some(d) => d,
            None => {
                empty_delta = accumulate_delta_day(
                    &[],
                    &[],
                    &window,
                    &merged.engagement_actions,
                    (day + 1) * SECONDS_PER_DAY,
                )?;
                &empty_delta
            }
        };
        let store = merge_counts(base_store, delta_store)?;
        // A never-seen key whose delta is also empty would be all zeros;
        // keep it anyway so repeated merges stay aligned.
        merged.contexts.insert(key, store);
    }
    Ok(merged)
}

/// Score every counted key and retain the per-item top-K for each slot.
pub fn build_signal_store(
    bundle: &CountsBundle,
    config: &IqpConfig,
) -> Result<SignalStore, IqpError> {
    let slots = config.slots();
    let mut per_item: BTreeMap<ItemId, Vec<Vec<ScoredKey>>> = BTreeMap::new();
    let blank = || vec![Vec::new(); slots.len()];

    for (slot_idx, slot) in slots.iter().enumerate() {
        match slot.context {
            None => {
                let counts = bundle.global.restrict(&slot.window)?;
                let scores = compute_iqp(&counts, &config.smoothing);
                for ((item, query), score) in scores {
                    let cpq = counts.pair_count(item, &query);
                    per_item.entry(item).or_insert_with(blank)[slot_idx].push(ScoredKey {
                        key_hash: query.key_hash,
                        key_text: query.normalized_text,
                        score: score.min(1.0),
                        pair_count: cpq,
                    });
                }
            }
            Some(dim) => {
                for ((store_dim, ctx_value), store) in &bundle.contexts {
                    if *store_dim != dim {
                        continue;
                    }
                    let counts = store.restrict(&slot.window)?;
                    let scores = compute_iqp(&counts, &config.smoothing);
                    for ((item, query), score) in scores {
                        let cpq = counts.pair_count(item, &query);
                        let key_text =
                            compose_context_key(&query.normalized_text, ctx_value);
                        per_item.entry(item).or_insert_with(blank)[slot_idx].push(ScoredKey {
                            key_hash: fnv1a64(key_text.as_bytes()),
                            key_text,
                            score: score.min(1.0),
                            pair_count: cpq,
                        });
                    }
                }
            }
        }
    }

    let mut items = BTreeMap::new();
    for (item, slot_lists) in per_item {
        let retained: Vec<Vec<SignalEntry>> = slot_lists
            .into_iter()
            .map(|list| {
                topk_retain(list, config.k)
                    .into_iter()
                    .map(|s| SignalEntry {
                        key_hash: s.key_hash,
                        key_text: s.key_text,
                        score: s.score,
                    })
                    .collect()
            })
            .collect();
        items.insert(item, retained);
    }
    Ok(SignalStore {
        k: config.k,
        as_of: bundle.as_of,
        slots,
        items,
    })
}

fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '%' => out.push_str("%25"),
            ':' => out.push_str("%3A"),
            ',' => out.push_str("%2C"),
            _ => out.push(ch),
        }
    }
    out
}

fn unescape_field(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            if i + 2 >= bytes.len() + 1 {
                return Err(format!("dangling escape in {s:?}"));
            }
            let hex = s
                .get(i + 1..i + 3)
                .ok_or_else(|| format!("dangling escape in {s:?}"))?;
            let code = u8::from_str_radix(hex, 16).map_err(|_| format!("bad escape in {s:?}"))?;
            out.push(code as char);
            i += 3;
        } else {
            let ch = s[i..].chars().next().expect("in bounds");
            out.push(ch);
            i += ch.len_utf8();
        }
    }
    Ok(out)
}

fn format_window_list(windows: &[WindowSpec]) -> String {
    if windows.is_empty() {
        return "-".to_string();
    }
    windows
        .iter()
        .map(WindowSpec::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn format_variant_list(slots: &[SlotSpec]) -> String {
    let variants: Vec<String> = slots
        .iter()
        .filter_map(|s| {
            s.context
                .map(|dim| format!("{}@{}:{}", s.window.name, dim.as_str(), s.window.length_days))
        })
        .collect();
    if variants.is_empty() {
        "-".to_string()
    } else {
        variants.join(",")
    }
}

/// Write the signal store as TSV: the `IQP v1` header, an `# as_of` line,
/// then one row per item with comma-joined hash:text:score triples per slot.
pub fn write_signal_store_text(store: &SignalStore, path: &Path) -> Result<(), IqpError> {
    let io_err = |source| IqpError::Io {
        path: path.display().to_string(),
        source,
    };
    let globals: Vec<WindowSpec> = store
        .slots
        .iter()
        .filter(|s| s.context.is_none())
        .map(|s| s.window.clone())
        .collect();
    let mut out = String::new();
    out.push_str(&format!(
        "IQP v1\t{}\t{}\t{}\n",
        store.k,
        format_window_list(&globals),
        format_variant_list(&store.slots),
    ));
    out.push_str(&format!("# as_of {}\n", store.as_of));
    for (item, slot_lists) in &store.items {
        out.push_str(&item.to_string());
        for list in slot_lists {
            out.push('\t');
            if list.is_empty() {
                out.push('-');
                continue;
            }
            let triples: Vec<String> = list
                .iter()
                .map(|e| format!("{}:{}:{}", e.key_hash, escape_field(&e.key_text), e.score))
                .collect();
            out.push_str(&triples.join(","));
        }
        out.push('\n');
    }
    let mut file = File::create(path).map_err(io_err)?;
    file.write_all(out.as_bytes()).map_err(io_err)?;
    Ok(())
}

fn parse_window_token(token: &str) -> Result<WindowSpec, String> {
    let (name, days) = token
        .rsplit_once(':')
        .ok_or_else(|| format!("bad window {token:?}"))?;
    let length_days: u32 = days.parse().map_err(|_| format!("bad window {token:?}"))?;
    Ok(WindowSpec::new(name, length_days))
}

pub fn read_signal_store_text(path: &Path) -> Result<SignalStore, IqpError> {
    let text = std::fs::read_to_string(path).map_err(|source| IqpError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let perr = |line_no: usize, msg: String| IqpError::Parse {
        path: path.display().to_string(),
        line_no,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| perr(1, "empty store file".to_string()))?;
    let head_cols: Vec<&str> = header.split('\t').collect();
    if head_cols.len() != 4 || head_cols[0] != "IQP v1" {
        return Err(perr(1, format!("bad header {header:?}")));
    }
    let k: usize = head_cols[1]
        .parse()
        .map_err(|_| perr(1, format!("bad K {:?}", head_cols[1])))?;
    let mut slots = Vec::new();
    if head_cols[2] != "-" {
        for token in head_cols[2].split(',') {
            let window = parse_window_token(token).map_err(|m| perr(1, m))?;
            slots.push(SlotSpec {
                window,
                context: None,
            });
        }
    }
    if head_cols[3] != "-" {
        for token in head_cols[3].split(',') {
            let (name_dim, days) = token
                .rsplit_once(':')
                .ok_or_else(|| perr(1, format!("bad variant {token:?}")))?;
            let (wname, dim) = name_dim
                .split_once('@')
                .ok_or_else(|| perr(1, format!("bad variant {token:?}")))?;
            let dim = ContextDim::from_str(dim)
                .map_err(|_| perr(1, format!("unknown context dimension {dim:?}")))?;
            let length_days: u32 = days
                .parse()
                .map_err(|_| perr(1, format!("bad variant {token:?}")))?;
            slots.push(SlotSpec {
                window: WindowSpec::new(wname, length_days),
                context: Some(dim),
            });
        }
    }

    let mut as_of = 0;
    let mut items = BTreeMap::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# as_of ") {
            as_of = rest
                .trim()
                .parse()
                .map_err(|_| perr(line_no, format!("bad as_of {rest:?}")))?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != slots.len() + 1 {
            return Err(perr(
                line_no,
                format!("expected {} columns, found {}", slots.len() + 1, cols.len()),
            ));
        }
        let item: u64 = cols[0]
            .parse()
            .map_err(|_| perr(line_no, format!("bad item id {:?}", cols[0])))?;
        let mut slot_lists = Vec::with_capacity(slots.len());
        for col in &cols[1..] {
            if *col == "-" {
                slot_lists.push(Vec::new());
                continue;
            }
            let mut entries = Vec::new();
            for triple in col.split(',') {
                let parts: Vec<&str> = triple.split(':').collect();
                if parts.len() != 3 {
                    return Err(perr(line_no, format!("bad triple {triple:?}")));
                }
                let key_hash: u64 = parts[0]
                    .parse()
                    .map_err(|_| perr(line_no, format!("bad hash {:?}", parts[0])))?;
                let key_text = unescape_field(parts[1]).map_err(|m| perr(line_no, m))?;
                let score: f64 = parts[2]
                    .parse()
                    .map_err(|_| perr(line_no, format!("bad score {:?}", parts[2])))?;
                entries.push(SignalEntry {
                    key_hash,
                    key_text,
                    score,
                });
            }
            slot_lists.push(entries);
        }
        items.insert(ItemId(item), slot_lists);
    }
    Ok(SignalStore {
        k,
        as_of,
        slots,
        items,
    })
}

const BINARY_MAGIC: &[u8; 6] = b"IQPB1\0";

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// Length-prefixed little-endian form of the signal store.
pub fn write_signal_store_binary(store: &SignalStore, path: &Path) -> Result<(), IqpError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(BINARY_MAGIC);
    buf.extend_from_slice(&(store.k as u32).to_le_bytes());
    buf.extend_from_slice(&store.as_of.to_le_bytes());
    buf.extend_from_slice(&(store.slots.len() as u32).to_le_bytes());
    for slot in &store.slots {
        put_str(&mut buf, &slot.name());
        buf.extend_from_slice(&slot.window.length_days.to_le_bytes());
    }
    buf.extend_from_slice(&(store.items.len() as u64).to_le_bytes());
    for (item, slot_lists) in &store.items {
        buf.extend_from_slice(&item.0.to_le_bytes());
        for list in slot_lists {
            buf.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for entry in list {
                buf.extend_from_slice(&entry.key_hash.to_le_bytes());
                put_str(&mut buf, &entry.key_text);
                buf.extend_from_slice(&entry.score.to_le_bytes());
            }
        }
    }
    std::fs::write(path, &buf).map_err(|source| IqpError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IqpError> {
        if self.pos + n > self.bytes.len() {
            return Err(IqpError::BadBinary {
                path: self.path.clone(),
                msg: format!("truncated at offset {}", self.pos),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, IqpError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IqpError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, IqpError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, IqpError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, IqpError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| IqpError::BadBinary {
            path: self.path.clone(),
            msg: "invalid utf-8 string".to_string(),
        })
    }
}

pub fn read_signal_store_binary(path: &Path) -> Result<SignalStore, IqpError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| IqpError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let mut r = ByteReader {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(BINARY_MAGIC.len())? != BINARY_MAGIC {
        return Err(IqpError::BadBinary {
            path: path.display().to_string(),
            msg: "bad magic".to_string(),
        });
    }
    let k = r.u32()? as usize;
    let as_of = r.i64()?;
    let n_slots = r.u32()? as usize;
    let mut slots = Vec::with_capacity(n_slots);
    for _ in 0..n_slots {
        let name = r.string()?;
        let length_days = r.u32()?;
        let slot = match name.split_once('@') {
            None => SlotSpec {
                window: WindowSpec::new(&name, length_days),
                context: None,
            },
            Some((wname, dim)) => SlotSpec {
                window: WindowSpec::new(wname, length_days),
                context: Some(ContextDim::from_str(dim).map_err(|_| IqpError::BadBinary {
                    path: path.display().to_string(),
                    msg: format!("unknown context dimension {dim:?}"),
                })?),
            },
        };
        slots.push(slot);
    }
    let n_items = r.u64()? as usize;
    let mut items = BTreeMap::new();
    for _ in 0..n_items {
        let item = ItemId(r.u64()?);
        let mut slot_lists = Vec::with_capacity(n_slots);
        for _ in 0..n_slots {
            let n = r.u32()? as usize;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let key_hash = r.u64()?;
                let key_text = r.string()?;
                let score = r.f64()?;
                entries.push(SignalEntry {
                    key_hash,
                    key_text,
                    score,
                });
            }
            slot_lists.push(entries);
        }
        items.insert(item, slot_lists);
    }
    Ok(SignalStore {
        k,
        as_of,
        slots,
        items,
    })
}

/// Write a counts bundle: header, then each store under an `S` scope line
/// with `D`/`Q`/`P` lines for every day in its window (empty days included).
pub fn write_counts_bundle(bundle: &CountsBundle, path: &Path) -> Result<(), IqpError> {
    let mut out = String::new();
    let actions: Vec<&str> = bundle
        .engagement_actions
        .iter()
        .map(|a| a.as_str())
        .collect();
    out.push_str(&format!(
        "IQPCOUNTS v1\t{}\t{}\n",
        bundle.as_of,
        actions.join(",")
    ));
    let write_store = |scope: &str, store: &CountStore, out: &mut String| {
        out.push_str(&format!("S\t{}\t{}\n", scope, store.window));
        for shard in &store.daily_shards {
            out.push_str(&format!("D\t{}\n", shard.day));
            for (query, count) in &shard.query_counts {
                out.push_str(&format!("Q\t{}\t{}\n", query.normalized_text, count));
            }
            for ((item, query), count) in &shard.pair_counts {
                out.push_str(&format!(
                    "P\t{}\t{}\t{}\n",
                    item, query.normalized_text, count
                ));
            }
        }
    };
    write_store("global", &bundle.global, &mut out);
    for ((dim, key), store) in &bundle.contexts {
        write_store(&format!("{}={}", dim.as_str(), key), store, &mut out);
    }
    std::fs::write(path, &out).map_err(|source| IqpError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_counts_bundle(path: &Path) -> Result<CountsBundle, IqpError> {
    let text = std::fs::read_to_string(path).map_err(|source| IqpError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let perr = |line_no: usize, msg: String| IqpError::Parse {
        path: path.display().to_string(),
        line_no,
        msg,
    };
    let mut lines = text.lines().enumerate().peekable();
    let (_, header) = lines
        .next()
        .ok_or_else(|| perr(1, "empty bundle".to_string()))?;
    let head: Vec<&str> = header.split('\t').collect();
    if head.len() != 3 || head[0] != "IQPCOUNTS v1" {
        return Err(perr(1, format!("bad header {header:?}")));
    }
    let as_of: i64 = head[1]
        .parse()
        .map_err(|_| perr(1, format!("bad as_of {:?}", head[1])))?;
    let mut engagement_actions = BTreeSet::new();
    for token in head[2].split(',').filter(|t| !t.is_empty()) {
        let action = ActionType::from_str(token)
            .map_err(|_| perr(1, format!("unknown action {token:?}")))?;
        engagement_actions.insert(action);
    }

    struct RawStore {
        scope: String,
        window: WindowSpec,
        shards: Vec<DayShard>,
    }
    let mut stores: Vec<RawStore> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        match cols[0] {
            "S" => {
                if cols.len() != 3 {
                    return Err(perr(line_no, "S line needs scope and window".to_string()));
                }
                let window = parse_window_token(cols[2]).map_err(|m| perr(line_no, m))?;
                stores.push(RawStore {
                    scope: cols[1].to_string(),
                    window,
                    shards: Vec::new(),
                });
            }
            "D" => {
                let store = stores
                    .last_mut()
                    .ok_or_else(|| perr(line_no, "D line before any S line".to_string()))?;
                if cols.len() != 2 {
                    return Err(perr(line_no, "D line needs a day index".to_string()));
                }
                let day: i64 = cols[1]
                    .parse()
                    .map_err(|_| perr(line_no, format!("bad day {:?}", cols[1])))?;
                store.shards.push(DayShard::empty(day));
            }
            "Q" => {
                let shard = stores
                    .last_mut()
                    .and_then(|s| s.shards.last_mut())
                    .ok_or_else(|| perr(line_no, "Q line before any D line".to_string()))?;
                if cols.len() != 3 {
                    return Err(perr(line_no, "Q line needs query and count".to_string()));
                }
                let query = normalize_query(cols[1])
                    .map_err(|_| perr(line_no, format!("bad query {:?}", cols[1])))?;
                let count: u64 = cols[2]
                    .parse()
                    .map_err(|_| perr(line_no, format!("bad count {:?}", cols[2])))?;
                shard.query_counts.insert(query, count);
            }
            "P" => {
                let shard = stores
                    .last_mut()
                    .and_then(|s| s.shards.last_mut())
                    .ok_or_else(|| perr(line_no, "P line before any D line".to_string()))?;
                if cols.len() != 4 {
                    return Err(perr(
                        line_no,
                        "P line needs item, query, count".to_string(),
                    ));
                }
                let item: u64 = cols[1]
                    .parse()
                    .map_err(|_| perr(line_no, format!("bad item {:?}", cols[1])))?;
                let query = normalize_query(cols[2])
                    .map_err(|_| perr(line_no, format!("bad query {:?}", cols[2])))?;
                let count: u64 = cols[3]
                    .parse()
                    .map_err(|_| perr(line_no, format!("bad count {:?}", cols[3])))?;
                shard.pair_counts.insert((ItemId(item), query), count);
            }
            other => {
                return Err(perr(line_no, format!("unknown record tag {other:?}")));
            }
        }
    }

    let mut global = None;
    let mut contexts = BTreeMap::new();
    for raw in stores {
        let mut store = CountStore {
            window: raw.window,
            as_of: (raw.shards.last().map(|s| s.day + 1).unwrap_or(0)) * SECONDS_PER_DAY,
            pair_counts: BTreeMap::new(),
            query_counts: BTreeMap::new(),
            daily_shards: raw.shards,
        };
        store.rebuild_aggregates();
        if raw_scope_is_global(&raw.scope) {
            global = Some(store);
        } else {
            let (dim, key) = raw
                .scope
                .split_once('=')
                .ok_or_else(|| perr(0, format!("bad scope {:?}", raw.scope)))?;
            let dim = ContextDim::from_str(dim)
                .map_err(|_| perr(0, format!("unknown context dimension {dim:?}")))?;
            contexts.insert((dim, key.to_string()), store);
        }
    }
    let global = global.ok_or_else(|| perr(0, "bundle has no global store".to_string()))?;
    Ok(CountsBundle {
        as_of,
        engagement_actions,
        global,
        contexts,
    })
}

fn raw_scope_is_global(scope: &str) -> bool {
    scope == "global"
}
