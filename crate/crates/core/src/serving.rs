//! Offline batch inference into a forward index, and online pre-ranking.
//!
//! The index snapshot holds one entry per item: its tower embedding plus its
//! retained interaction signals, keyed for binary search. Online, the query
//! embedding is computed once per request and every candidate costs one index
//! lookup, one dot product, and one pass through the compiled projection
//! tree. Selection keeps a bounded heap of the requested size rather than
//! sorting the full candidate list.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{normalize_query, Device, EmbeddingVec, ItemId, QueryKey, RequestContext};
use crate::iqp::{compose_context_key, ContextDim, SignalEntry, SignalStore, SlotSpec, WindowSpec};
use crate::model::{
    self, embed_item, embed_query, flop_count, ItemRecord, ModelError, ModelParams, ScoreBreakdown,
    SequenceEntry,
};

#[derive(Debug, Error)]
pub enum ServingError {
    #[error("item {0} has malformed features")]
    MissingFeatures(ItemId),
    #[error("duplicate item {0} in index build")]
    DuplicateItem(ItemId),
    #[error("projection expects {expected} weights, found {found}")]
    LayoutMismatch { expected: usize, found: usize },
    #[error("request has no candidates")]
    EmptyCandidates,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("model checkpoint digest does not match the index snapshot")]
    DigestMismatch,
    #[error("snapshot {path} is invalid: {msg}")]
    BadSnapshot { path: String, msg: String },
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One item in the forward index: embedding plus its per-slot interaction
/// signals, each slot sorted by key hash for binary search.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardIndexEntry {
    pub item: ItemId,
    pub embedding: EmbeddingVec,
    pub iqp: Vec<Vec<SignalEntry>>,
}

/// Sealed, immutable forward index.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexSnapshot {
    pub model_digest: [u8; 32],
    pub iqp_digest: [u8; 32],
    pub build_time: i64,
    pub embed_dim: usize,
    pub slots: Vec<SlotSpec>,
    entries: Vec<ForwardIndexEntry>,
}

impl IndexSnapshot {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ForwardIndexEntry] {
        &self.entries
    }

    pub fn lookup(&self, item: ItemId) -> Option<&ForwardIndexEntry> {
        self.entries
            .binary_search_by_key(&item, |e| e.item)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn item_ids(&self) -> Vec<ItemId> {
        self.entries.iter().map(|e| e.item).collect()
    }
}

/// Offline inference: one forward-index entry per catalog item. Items whose
/// feature vectors do not fit the model are skipped and reported (or abort
/// the build when `strict`). Partition-parallel; output order follows input.
pub fn batch_inference(
    items: &[ItemRecord],
    params: &ModelParams,
    signals: &SignalStore,
    strict: bool,
) -> Result<(Vec<ForwardIndexEntry>, Vec<ItemId>), ServingError> {
    let cfg = &params.config;
    let results: Vec<Result<ForwardIndexEntry, ItemId>> = items
        .par_iter()
        .map(|rec| {
            let f = &rec.features;
            if f.rates.len() != cfg.rate_count || f.content.len() != cfg.content_dim {
                return Err(f.item);
            }
            let embedding = if cfg.use_towers {
                let (emb, _) = embed_item(f, params);
                EmbeddingVec::new(emb.iter().map(|&v| v as f32).collect())
                    .expect("tower output is finite")
            } else {
                EmbeddingVec::zeros(cfg.embed_dim)
            };
            let mut iqp: Vec<Vec<SignalEntry>> = match signals.items.get(&f.item) {
                Some(per_slot) => per_slot.clone(),
                None => vec![Vec::new(); signals.slots.len()],
            };
            for slot in &mut iqp {
                slot.sort_by(|a, b| {
                    a.key_hash
                        .cmp(&b.key_hash)
                        .then_with(|| a.key_text.cmp(&b.key_text))
                });
            }
            Ok(ForwardIndexEntry {
                item: f.item,
                embedding,
                iqp,
            })
        })
        .collect();

    let mut entries = Vec::with_capacity(items.len());
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(e) => entries.push(e),
            Err(item) if strict => return Err(ServingError::MissingFeatures(item)),
            Err(item) => skipped.push(item),
        }
    }
    Ok((entries, skipped))
}

/// Seal entries into a snapshot sorted by item id.
pub fn build_index(
    mut entries: Vec<ForwardIndexEntry>,
    model_digest: [u8; 32],
    iqp_digest: [u8; 32],
    build_time: i64,
    embed_dim: usize,
    slots: Vec<SlotSpec>,
) -> Result<IndexSnapshot, ServingError> {
    entries.sort_by_key(|e| e.item);
    for pair in entries.windows(2) {
        if pair[0].item == pair[1].item {
            return Err(ServingError::DuplicateItem(pair[0].item));
        }
    }
    Ok(IndexSnapshot {
        model_digest,
        iqp_digest,
        build_time,
        embed_dim,
        slots,
        entries,
    })
}

pub fn file_digest(path: &Path) -> Result<[u8; 32], ServingError> {
    let bytes = std::fs::read(path).map_err(|source| ServingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(Sha256::digest(&bytes).into())
}

pub fn digest_hex(digest: &[u8; 32]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

const SNAPSHOT_MAGIC: &[u8; 6] = b"IRIDX1";

pub fn write_snapshot(snapshot: &IndexSnapshot, path: &Path) -> Result<(), ServingError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SNAPSHOT_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&snapshot.model_digest);
    buf.extend_from_slice(&snapshot.iqp_digest);
    buf.extend_from_slice(&snapshot.build_time.to_le_bytes());
    buf.extend_from_slice(&(snapshot.embed_dim as u32).to_le_bytes());
    let lp = |buf: &mut Vec<u8>, s: &str| {
        buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.as_bytes());
    };
    buf.extend_from_slice(&(snapshot.slots.len() as u32).to_le_bytes());
    for slot in &snapshot.slots {
        lp(&mut buf, &slot.window.name);
        buf.extend_from_slice(&slot.window.length_days.to_le_bytes());
        lp(&mut buf, slot.context.map(|c| c.as_str()).unwrap_or(""));
    }
    buf.extend_from_slice(&(snapshot.entries.len() as u64).to_le_bytes());
    for entry in &snapshot.entries {
        buf.extend_from_slice(&entry.item.0.to_le_bytes());
        for &v in entry.embedding.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for slot in &entry.iqp {
            buf.extend_from_slice(&(slot.len() as u32).to_le_bytes());
            for sig in slot {
                buf.extend_from_slice(&sig.key_hash.to_le_bytes());
                lp(&mut buf, &sig.key_text);
                buf.extend_from_slice(&sig.score.to_le_bytes());
            }
        }
    }
    std::fs::write(path, &buf).map_err(|source| ServingError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct SnapReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> SnapReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ServingError> {
        if self.pos + n > self.bytes.len() {
            return Err(ServingError::BadSnapshot {
                path: self.path.clone(),
                msg: format!("truncated at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ServingError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ServingError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, ServingError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, ServingError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ServingError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, ServingError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| ServingError::BadSnapshot {
            path: self.path.clone(),
            msg: "non-utf8 string".to_string(),
        })
    }
}

pub fn read_snapshot(path: &Path) -> Result<IndexSnapshot, ServingError> {
    let bytes = std::fs::read(path).map_err(|source| ServingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut r = SnapReader {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    let bad = |msg: &str| ServingError::BadSnapshot {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    if r.take(6)? != SNAPSHOT_MAGIC {
        return Err(bad("bad magic"));
    }
    if r.u32()? != 1 {
        return Err(bad("unsupported version"));
    }
    let model_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let iqp_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let build_time = r.i64()?;
    let embed_dim = r.u32()? as usize;
    let n_slots = r.u32()? as usize;
    let mut slots = Vec::with_capacity(n_slots);
    for _ in 0..n_slots {
        let name = r.string()?;
        let length_days = r.u32()?;
        let ctx = r.string()?;
        let context = if ctx.is_empty() {
            None
        } else {
            Some(
                ctx.parse::<ContextDim>()
                    .map_err(|_| bad(&format!("unknown context dimension {ctx:?}")))?,
            )
        };
        slots.push(SlotSpec {
            window: WindowSpec { name, length_days },
            context,
        });
    }
    let n_entries = r.u64()? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    let mut last_item: Option<ItemId> = None;
    for _ in 0..n_entries {
        let item = ItemId(r.u64()?);
        if let Some(prev) = last_item {
            if prev >= item {
                return Err(bad("entries out of order"));
            }
        }
        last_item = Some(item);
        let mut values = Vec::with_capacity(embed_dim);
        for _ in 0..embed_dim {
            values.push(r.f32()?);
        }
        let embedding = EmbeddingVec::new(values)
            .map_err(|_| bad(&format!("non-finite embedding for item {item}")))?;
        let mut iqp = Vec::with_capacity(n_slots);
        for _ in 0..n_slots {
            let n = r.u32()? as usize;
            let mut slot = Vec::with_capacity(n);
            for _ in 0..n {
                let key_hash = r.u64()?;
                let key_text = r.string()?;
                let score = r.f64()?;
                slot.push(SignalEntry {
                    key_hash,
                    key_text,
                    score,
                });
            }
            iqp.push(slot);
        }
        entries.push(ForwardIndexEntry {
            item,
            embedding,
            iqp,
        });
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(IndexSnapshot {
        model_digest,
        iqp_digest,
        build_time,
        embed_dim,
        slots,
        entries,
    })
}

/// The projection layer re-expressed as a structured query tree.
#[derive(Clone, Debug, PartialEq)]
pub enum StructuredQueryNode {
    WeightedSum {
        children: Vec<StructuredQueryNode>,
        weights: Vec<f64>,
        bias: f64,
    },
    FeatureLeaf(usize),
    DotLeaf,
}

impl StructuredQueryNode {
    pub fn evaluate(&self, dot: f64, features: &[f64]) -> f64 {
        match self {
            StructuredQueryNode::DotLeaf => dot,
            StructuredQueryNode::FeatureLeaf(slot) => features.get(*slot).copied().unwrap_or(0.0),
            StructuredQueryNode::WeightedSum {
                children,
                weights,
                bias,
            } => {
                let mut acc = *bias;
                for (child, w) in children.iter().zip(weights) {
                    acc += w * child.evaluate(dot, features);
                }
                acc
            }
        }
    }

    /// Arithmetic cost under the serving convention: a k-ary weighted sum
    /// costs 2k-1 (bias free), a dot leaf costs 2*dim-1, a feature fetch is
    /// free.
    fn op_count(&self, embed_dim: usize) -> u64 {
        match self {
            StructuredQueryNode::DotLeaf => 2 * embed_dim as u64 - 1,
            StructuredQueryNode::FeatureLeaf(_) => 0,
            StructuredQueryNode::WeightedSum { children, .. } => {
                let own = 2 * children.len() as u64 - 1;
                own + children.iter().map(|c| c.op_count(embed_dim)).sum::<u64>()
            }
        }
    }
}

/// Flatten the projection layer into a weighted sum over the tower dot
/// product and the interaction feature slots.
pub fn compile_projection(
    params: &ModelParams,
    slot_count: usize,
) -> Result<StructuredQueryNode, ServingError> {
    let w = &params.tensor("proj_w").data;
    let bias = params.tensor("proj_b").data[0];
    if w.len() != 1 + slot_count {
        return Err(ServingError::LayoutMismatch {
            expected: 1 + slot_count,
            found: w.len(),
        });
    }
    let mut children = vec![StructuredQueryNode::DotLeaf];
    for slot in 0..slot_count {
        children.push(StructuredQueryNode::FeatureLeaf(slot));
    }
    Ok(StructuredQueryNode::WeightedSum {
        children,
        weights: w.clone(),
        bias,
    })
}

/// One pre-ranking request.
#[derive(Clone, Debug)]
pub struct PrerankRequest {
    pub query: String,
    pub context: RequestContext,
    pub sequence: Vec<SequenceEntry>,
    pub candidates: Vec<ItemId>,
    pub n_out: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PrerankStats {
    pub candidates_scored: u64,
    pub missing_candidates: u64,
    pub flops_per_candidate: u64,
}

/// Descending score, ascending item id on ties.
#[derive(Clone, Copy, Debug, PartialEq)]
struct RankKey {
    score: f64,
    item: ItemId,
}

impl Eq for RankKey {}

impl Ord for RankKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.item.cmp(&self.item))
    }
}

impl PartialOrd for RankKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The per-slot lookup keys for one (query, context) pair: global slots use
/// the query itself, conditioned slots a composite of query and context
/// value.
fn slot_keys(slots: &[SlotSpec], query: &QueryKey, context: &RequestContext) -> Vec<(u64, String)> {
    slots
        .iter()
        .map(|slot| match slot.context {
            None => (query.key_hash, query.normalized_text.clone()),
            Some(dim) => {
                let key = compose_context_key(&query.normalized_text, &dim.value_of(context));
                (crate::domain::fnv1a64(key.as_bytes()), key)
            }
        })
        .collect()
}

fn fetch_features(entry: &ForwardIndexEntry, keys: &[(u64, String)]) -> Vec<f64> {
    let mut features = vec![0.0; keys.len()];
    for (slot_idx, (hash, text)) in keys.iter().enumerate() {
        let slot = &entry.iqp[slot_idx];
        let start = slot.partition_point(|s| s.key_hash < *hash);
        for sig in &slot[start..] {
            if sig.key_hash != *hash {
                break;
            }
            if sig.key_text == *text {
                features[slot_idx] = sig.score;
                break;
            }
        }
    }
    features
}

fn dot_mixed(q: &[f64], e: &EmbeddingVec) -> f64 {
    let mut acc = 0.0;
    for (a, b) in q.iter().zip(e.values()) {
        acc += a * f64::from(*b);
    }
    acc
}

/// Pre-rank candidates against the snapshot: bounded-heap top-N selection
/// with descending score and ascending item id on ties. Candidates absent
/// from the index score negative infinity and therefore land last.
pub fn prerank_instrumented(
    request: &PrerankRequest,
    snapshot: &IndexSnapshot,
    params: &ModelParams,
) -> Result<(Vec<(ItemId, f64)>, PrerankStats), ServingError> {
    if request.candidates.is_empty() {
        return Err(ServingError::EmptyCandidates);
    }
    if request.n_out == 0 {
        return Err(ServingError::InvalidRequest(
            "n_out must be at least 1".to_string(),
        ));
    }
    let cfg = &params.config;
    let query =
        normalize_query(&request.query).map_err(|e| ServingError::InvalidRequest(e.to_string()))?;
    // One query-tower pass per request, shared by every candidate.
    let q_emb: Vec<f64> = if cfg.use_towers {
        embed_query(&query, &request.context, &request.sequence, params).0
    } else {
        Vec::new()
    };
    let tree = if cfg.use_iqp {
        Some(compile_projection(params, snapshot.slots.len())?)
    } else {
        None
    };
    let keys = slot_keys(&snapshot.slots, &query, &request.context);

    let mut stats = PrerankStats::default();
    stats.flops_per_candidate = match &tree {
        Some(t) => {
            if cfg.use_towers {
                t.op_count(cfg.embed_dim)
            } else {
                // A disabled tower contributes no dot product arithmetic.
                t.op_count(cfg.embed_dim) - (2 * cfg.embed_dim as u64 - 1)
            }
        }
        None => 2 * cfg.embed_dim as u64 - 1,
    };

    // Min-heap of the worst kept key; beats full sort for n_out << |C|.
    let mut heap: BinaryHeap<std::cmp::Reverse<RankKey>> =
        BinaryHeap::with_capacity(request.n_out + 1);
    for &item in &request.candidates {
        stats.candidates_scored += 1;
        let score = match snapshot.lookup(item) {
            None => {
                stats.missing_candidates += 1;
                f64::NEG_INFINITY
            }
            Some(entry) => {
                let dot = if cfg.use_towers {
                    dot_mixed(&q_emb, &entry.embedding)
                } else {
                    0.0
                };
                match &tree {
                    Some(t) => {
                        let features = fetch_features(entry, &keys);
                        t.evaluate(dot, &features)
                    }
                    None => dot,
                }
            }
        };
        let key = RankKey { score, item };
        if heap.len() < request.n_out {
            heap.push(std::cmp::Reverse(key));
        } else if key > heap.peek().expect("nonempty heap").0 {
            heap.pop();
            heap.push(std::cmp::Reverse(key));
        }
    }
    let mut kept: Vec<RankKey> = heap.into_iter().map(|r| r.0).collect();
    kept.sort_by(|a, b| b.cmp(a));
    Ok((kept.into_iter().map(|k| (k.item, k.score)).collect(), stats))
}

pub fn prerank(
    request: &PrerankRequest,
    snapshot: &IndexSnapshot,
    params: &ModelParams,
) -> Result<Vec<(ItemId, f64)>, ServingError> {
    prerank_instrumented(request, snapshot, params).map(|(ranked, _)| ranked)
}

/// Per-item scoring detail for explain responses.
pub fn explain_candidate(
    item: ItemId,
    query: &QueryKey,
    context: &RequestContext,
    sequence: &[SequenceEntry],
    snapshot: &IndexSnapshot,
    params: &ModelParams,
) -> Result<Option<ScoreBreakdown>, ServingError> {
    let Some(entry) = snapshot.lookup(item) else {
        return Ok(None);
    };
    let cfg = &params.config;
    let q_emb: Vec<f64> = if cfg.use_towers {
        embed_query(query, context, sequence, params).0
    } else {
        Vec::new()
    };
    let i_emb: Vec<f64> = if cfg.use_towers {
        entry.embedding.to_f64()
    } else {
        Vec::new()
    };
    let keys = slot_keys(&snapshot.slots, query, context);
    let features = fetch_features(entry, &keys);
    Ok(Some(model::score(&q_emb, &i_emb, &features, params)?))
}

/// Shared serving state. The snapshot slot supports atomic replacement:
/// requests clone the current Arc and finish on whatever snapshot they
/// started with.
pub struct ServeState {
    snapshot: RwLock<Arc<IndexSnapshot>>,
    params: Arc<ModelParams>,
}

impl ServeState {
    pub fn new(snapshot: IndexSnapshot, params: ModelParams) -> Self {
        ServeState {
            snapshot: RwLock::new(Arc::new(snapshot)),
            params: Arc::new(params),
        }
    }

    pub fn snapshot(&self) -> Arc<IndexSnapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn swap_snapshot(&self, snapshot: IndexSnapshot) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(snapshot);
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Refuse to serve when the loaded checkpoint is not the one the index
    /// was built from.
    pub fn verify_digest(&self, checkpoint_path: &Path) -> Result<(), ServingError> {
        let digest = file_digest(checkpoint_path)?;
        if digest != self.snapshot().model_digest {
            return Err(ServingError::DigestMismatch);
        }
        Ok(())
    }
}

/// Parse the protocol's context field: comma `k=v` pairs over
/// user/country/device/language/age/gender, or `-`/empty for the default.
pub fn parse_context(text: &str) -> Result<RequestContext, String> {
    let mut ctx = RequestContext::new(0);
    if text == "-" || text.is_empty() {
        return Ok(ctx);
    }
    for pair in text.split(',') {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| format!("bad context pair {pair:?}"))?;
        match key {
            "user" => ctx.user_id = value.parse().map_err(|_| format!("bad user {value:?}"))?,
            "country" => ctx.country = value.to_string(),
            "device" => {
                ctx.device = match value {
                    "mobile" => Device::Mobile,
                    "desktop" => Device::Desktop,
                    "tablet" => Device::Tablet,
                    _ => return Err(format!("bad device {value:?}")),
                }
            }
            "language" => ctx.language = value.to_string(),
            "age" => ctx.age_bucket = value.parse().map_err(|_| format!("bad age {value:?}"))?,
            "gender" => {
                ctx.gender_bucket = value.parse().map_err(|_| format!("bad gender {value:?}"))?
            }
            _ => return Err(format!("unknown context key {key:?}")),
        }
    }
    Ok(ctx)
}

/// One protocol request per line, tab-separated:
/// request_id, query, context (k=v pairs or "-"), candidates ("@all" or a
/// comma list), n_out, explain (0/1). Responses echo the request id: an OK
/// line with ranked item:score pairs, then one EXPLAIN line per ranked item
/// when requested. Malformed requests get an ERR line; the connection stays
/// open.
pub fn handle_request(state: &ServeState, line: &str) -> String {
    let fields: Vec<&str> = line.split('\t').collect();
    let request_id = fields.first().copied().unwrap_or("-");
    let fail = |msg: &str| format!("{request_id}\tERR\tBAD_REQUEST\t{msg}");
    if fields.len() != 6 {
        return fail(&format!("expected 6 fields, found {}", fields.len()));
    }
    let snapshot = state.snapshot();
    let context = match parse_context(fields[2]) {
        Ok(c) => c,
        Err(msg) => return fail(&msg),
    };
    let candidates: Vec<ItemId> = if fields[3] == "@all" {
        snapshot.item_ids()
    } else {
        let mut out = Vec::new();
        for tok in fields[3].split(',').filter(|t| !t.is_empty()) {
            match tok.parse::<u64>() {
                Ok(id) => out.push(ItemId(id)),
                Err(_) => return fail(&format!("bad candidate id {tok:?}")),
            }
        }
        out
    };
    let n_out: usize = match fields[4].parse() {
        Ok(n) => n,
        Err(_) => return fail(&format!("bad n_out {:?}", fields[4])),
    };
    let explain = match fields[5] {
        "0" => false,
        "1" => true,
        other => return fail(&format!("bad explain flag {other:?}")),
    };
    let request = PrerankRequest {
        query: fields[1].to_string(),
        context,
        sequence: Vec::new(),
        candidates,
        n_out,
    };
    let ranked = match prerank(&request, &snapshot, state.params()) {
        Ok(r) => r,
        Err(e) => return fail(&e.to_string()),
    };
    let pairs: Vec<String> = ranked
        .iter()
        .map(|(item, score)| format!("{item}:{score}"))
        .collect();
    let mut response = format!("{request_id}\tOK\t{}\t{}", ranked.len(), pairs.join(","));
    if explain {
        let query = match normalize_query(&request.query) {
            Ok(q) => q,
            Err(e) => return fail(&e.to_string()),
        };
        for (item, _) in &ranked {
            let detail =
                explain_candidate(*item, &query, &request.context, &[], &snapshot, state.params());
            match detail {
                Ok(Some(bd)) => {
                    let iqp: Vec<String> = bd.iqp_features.iter().map(f64::to_string).collect();
                    response.push_str(&format!(
                        "\n{request_id}\tEXPLAIN\t{item}\t{}\t{}\t{}\t{}",
                        bd.dot,
                        bd.raw_score,
                        bd.probability,
                        iqp.join(",")
                    ));
                }
                Ok(None) => {
                    response.push_str(&format!("\n{request_id}\tEXPLAIN\t{item}\tmissing"));
                }
                Err(e) => return fail(&e.to_string()),
            }
        }
    }
    response
}

fn serve_connection(state: &ServeState, stream: TcpStream) {
    let peer = stream.try_clone();
    let Ok(write_half) = peer else { return };
    let mut writer = std::io::BufWriter::new(write_half);
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if line.is_empty() {
            continue;
        }
        let response = handle_request(state, &line);
        if writeln!(writer, "{response}").and_then(|_| writer.flush()).is_err() {
            break;
        }
    }
}

/// Blocking accept loop, one thread per connection. All handlers share the
/// same immutable state.
pub fn serve_loop(listener: TcpListener, state: Arc<ServeState>) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let state = Arc::clone(&state);
        std::thread::spawn(move || serve_connection(&state, stream));
    }
    Ok(())
}

/// Candidate arithmetic of the configured serving path; agrees with
/// flop_count on tower-plus-interaction configs by construction.
pub fn serving_flops(params: &ModelParams, slot_count: usize) -> Result<u64, ServingError> {
    if params.config.use_iqp {
        let tree = compile_projection(params, slot_count)?;
        let mut ops = tree.op_count(params.config.embed_dim);
        if !params.config.use_towers {
            ops -= 2 * params.config.embed_dim as u64 - 1;
        }
        Ok(ops)
    } else {
        Ok(flop_count(&params.config, false))
    }
}
