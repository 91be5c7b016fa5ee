//! The two-tower scorer.
//!
//! A query tower embeds (query text, request context, recent-engagement
//! sequence) and an item tower embeds (item id, engagement rates, content
//! embedding), both to `embed_dim` floats. The final score is an affine mix
//! of the tower dot product with the query-item interaction features, through
//! a sigmoid.
//!
//! All math runs in f64; 32-bit floats appear only in checkpoint files and
//! embedding storage. Forward passes return caches holding every
//! intermediate needed by the matching analytic backward pass.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::ConfigMap;
use crate::domain::{fnv1a64, ActionType, EmbeddingVec, ItemId, QueryKey, RequestContext};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{what}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("checkpoint {path} is invalid: {msg}")]
    BadCheckpoint { path: String, msg: String },
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

/// Row-major dense tensor of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has a shape")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// y = W x for W: [out, in].
fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(cols, x.len());
    let mut y = vec![0.0; rows];
    for r in 0..rows {
        y[r] = dot(&w.data[r * cols..(r + 1) * cols], x);
    }
    y
}

/// dx += W^T y.
fn matvec_t_acc(w: &Tensor, y: &[f64], dx: &mut [f64]) {
    let (rows, cols) = (w.shape[0], w.shape[1]);
    for r in 0..rows {
        let yr = y[r];
        if yr == 0.0 {
            continue;
        }
        let row = &w.data[r * cols..(r + 1) * cols];
        for c in 0..cols {
            dx[c] += row[c] * yr;
        }
    }
}

/// gw += y ⊗ x for gw: [len(y), len(x)].
fn outer_acc(gw: &mut Tensor, y: &[f64], x: &[f64]) {
    let cols = gw.shape[1];
    debug_assert_eq!(cols, x.len());
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &mut gw.data[r * cols..(r + 1) * cols];
        for c in 0..cols {
            row[c] += yr * x[c];
        }
    }
}

fn add_acc(g: &mut Tensor, y: &[f64]) {
    for (gv, yv) in g.data.iter_mut().zip(y) {
        *gv += yv;
    }
}

fn relu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| v.max(0.0)).collect()
}

fn relu_grad(z: &[f64], d: &[f64]) -> Vec<f64> {
    z.iter()
        .zip(d)
        .map(|(&zv, &dv)| if zv > 0.0 { dv } else { 0.0 })
        .collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Ages are bucketed {<1h, <1d, <7d, <30d, >=30d}.
pub const TIME_BUCKETS: usize = 5;

pub fn time_bucket(age_seconds: i64) -> usize {
    const HOUR: i64 = 3_600;
    const DAY: i64 = 86_400;
    if age_seconds < HOUR {
        0
    } else if age_seconds < DAY {
        1
    } else if age_seconds < 7 * DAY {
        2
    } else if age_seconds < 30 * DAY {
        3
    } else {
        4
    }
}

/// One engaged item in the user's recent history.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEntry {
    pub item_embedding: EmbeddingVec,
    pub action: ActionType,
    pub age_seconds: i64,
}

/// Item-side tower inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemFeatures {
    pub item: ItemId,
    pub rates: Vec<f64>,
    pub content: Vec<f64>,
}

/// Catalog row: tower inputs plus the display title used by text baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemRecord {
    pub features: ItemFeatures,
    pub title: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub token_vocab: usize,
    pub token_dim: usize,
    pub item_vocab: usize,
    pub item_id_dim: usize,
    pub content_dim: usize,
    pub rate_count: usize,
    pub action_vocab: usize,
    pub action_dim: usize,
    pub time_buckets: usize,
    pub time_dim: usize,
    pub ctx_dim: usize,
    pub country_vocab: usize,
    pub device_vocab: usize,
    pub language_vocab: usize,
    pub age_vocab: usize,
    pub gender_vocab: usize,
    pub seq_max_len: usize,
    pub masknet_blocks: usize,
    pub mask_hidden: usize,
    pub block_out: usize,
    pub query_hidden: Vec<usize>,
    pub item_hidden: Vec<usize>,
    pub iqp_feature_count: usize,
    pub use_towers: bool,
    pub use_iqp: bool,
    pub use_sequence: bool,
    pub use_masknet: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            token_vocab: 4096,
            token_dim: 32,
            item_vocab: 8192,
            item_id_dim: 32,
            content_dim: 32,
            rate_count: 4,
            action_vocab: 8,
            action_dim: 8,
            time_buckets: TIME_BUCKETS,
            time_dim: 8,
            ctx_dim: 8,
            country_vocab: 32,
            device_vocab: 3,
            language_vocab: 16,
            age_vocab: 8,
            gender_vocab: 4,
            seq_max_len: 100,
            masknet_blocks: 2,
            mask_hidden: 32,
            block_out: 64,
            query_hidden: vec![128],
            item_hidden: vec![128],
            iqp_feature_count: 7,
            use_towers: true,
            use_iqp: true,
            use_sequence: true,
            use_masknet: true,
        }
    }
}

fn format_widths(widths: &[usize]) -> String {
    widths
        .iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_widths(s: &str) -> Vec<usize> {
    s.split(',')
        .filter(|t| !t.is_empty())
        .filter_map(|t| t.trim().parse().ok())
        .collect()
}

impl ModelConfig {
    pub fn seq_entry_dim(&self) -> usize {
        self.content_dim + self.action_dim + self.time_dim
    }

    pub fn query_input_dim(&self) -> usize {
        let mut dim = self.token_dim + 5 * self.ctx_dim;
        if self.use_sequence {
            dim += 2 * self.seq_entry_dim();
        }
        dim
    }

    pub fn item_input_dim(&self) -> usize {
        self.item_id_dim + self.rate_count + self.content_dim
    }

    fn ff_input_dim(&self, tower_input: usize) -> usize {
        if self.use_masknet {
            self.masknet_blocks * self.block_out
        } else {
            tower_input
        }
    }

    pub fn to_config_map(&self) -> ConfigMap {
        let mut m = ConfigMap::new();
        m.set("embed_dim", self.embed_dim);
        m.set("token_vocab", self.token_vocab);
        m.set("token_dim", self.token_dim);
        m.set("item_vocab", self.item_vocab);
        m.set("item_id_dim", self.item_id_dim);
        m.set("content_dim", self.content_dim);
        m.set("rate_count", self.rate_count);
        m.set("action_vocab", self.action_vocab);
        m.set("action_dim", self.action_dim);
        m.set("time_buckets", self.time_buckets);
        m.set("time_dim", self.time_dim);
        m.set("ctx_dim", self.ctx_dim);
        m.set("country_vocab", self.country_vocab);
        m.set("device_vocab", self.device_vocab);
        m.set("language_vocab", self.language_vocab);
        m.set("age_vocab", self.age_vocab);
        m.set("gender_vocab", self.gender_vocab);
        m.set("seq_max_len", self.seq_max_len);
        m.set("masknet_blocks", self.masknet_blocks);
        m.set("mask_hidden", self.mask_hidden);
        m.set("block_out", self.block_out);
        m.set("query_hidden", format_widths(&self.query_hidden));
        m.set("item_hidden", format_widths(&self.item_hidden));
        m.set("iqp_feature_count", self.iqp_feature_count);
        m.set("use_towers", self.use_towers);
        m.set("use_iqp", self.use_iqp);
        m.set("use_sequence", self.use_sequence);
        m.set("use_masknet", self.use_masknet);
        m
    }

    pub fn from_config_map(m: &ConfigMap) -> Result<Self, ModelError> {
        let d = ModelConfig::default();
        Ok(ModelConfig {
            embed_dim: m.get_usize("embed_dim", d.embed_dim)?,
            token_vocab: m.get_usize("token_vocab", d.token_vocab)?,
            token_dim: m.get_usize("token_dim", d.token_dim)?,
            item_vocab: m.get_usize("item_vocab", d.item_vocab)?,
            item_id_dim: m.get_usize("item_id_dim", d.item_id_dim)?,
            content_dim: m.get_usize("content_dim", d.content_dim)?,
            rate_count: m.get_usize("rate_count", d.rate_count)?,
            action_vocab: m.get_usize("action_vocab", d.action_vocab)?,
            action_dim: m.get_usize("action_dim", d.action_dim)?,
            time_buckets: m.get_usize("time_buckets", d.time_buckets)?,
            time_dim: m.get_usize("time_dim", d.time_dim)?,
            ctx_dim: m.get_usize("ctx_dim", d.ctx_dim)?,
            country_vocab: m.get_usize("country_vocab", d.country_vocab)?,
            device_vocab: m.get_usize("device_vocab", d.device_vocab)?,
            language_vocab: m.get_usize("language_vocab", d.language_vocab)?,
            age_vocab: m.get_usize("age_vocab", d.age_vocab)?,
            gender_vocab: m.get_usize("gender_vocab", d.gender_vocab)?,
            seq_max_len: m.get_usize("seq_max_len", d.seq_max_len)?,
            masknet_blocks: m.get_usize("masknet_blocks", d.masknet_blocks)?,
            mask_hidden: m.get_usize("mask_hidden", d.mask_hidden)?,
            block_out: m.get_usize("block_out", d.block_out)?,
            query_hidden: m
                .get_str("query_hidden")
                .map(parse_widths)
                .unwrap_or(d.query_hidden),
            item_hidden: m
                .get_str("item_hidden")
                .map(parse_widths)
                .unwrap_or(d.item_hidden),
            iqp_feature_count: m.get_usize("iqp_feature_count", d.iqp_feature_count)?,
            use_towers: m.get_bool("use_towers", d.use_towers)?,
            use_iqp: m.get_bool("use_iqp", d.use_iqp)?,
            use_sequence: m.get_bool("use_sequence", d.use_sequence)?,
            use_masknet: m.get_bool("use_masknet", d.use_masknet)?,
        })
    }
}

/// Per-candidate arithmetic at serving time, under the convention that an
/// n-dim inner product costs 2n-1 operations and bias adds are free.
pub fn flop_count(config: &ModelConfig, with_interactions: bool) -> u64 {
    let tower_dot = 2 * config.embed_dim as u64 - 1;
    if !with_interactions {
        return tower_dot;
    }
    let projection_inputs = 1 + config.iqp_feature_count as u64;
    tower_dot + (2 * projection_inputs - 1)
}

fn tower_specs(
    specs: &mut Vec<(String, Vec<usize>)>,
    cfg: &ModelConfig,
    prefix: &str,
    input_dim: usize,
    hidden: &[usize],
) {
    if cfg.use_masknet {
        for j in 0..cfg.masknet_blocks {
            specs.push((format!("{prefix}_mask{j}_w1"), vec![cfg.mask_hidden, input_dim]));
            specs.push((format!("{prefix}_mask{j}_b1"), vec![cfg.mask_hidden]));
            specs.push((format!("{prefix}_mask{j}_w2"), vec![input_dim, cfg.mask_hidden]));
            specs.push((format!("{prefix}_mask{j}_b2"), vec![input_dim]));
            specs.push((format!("{prefix}_block{j}_w"), vec![cfg.block_out, input_dim]));
            specs.push((format!("{prefix}_block{j}_b"), vec![cfg.block_out]));
        }
    }
    let mut dims = vec![cfg.ff_input_dim(input_dim)];
    dims.extend_from_slice(hidden);
    dims.push(cfg.embed_dim);
    for l in 0..dims.len() - 1 {
        specs.push((format!("{prefix}_ff{l}_w"), vec![dims[l + 1], dims[l]]));
        specs.push((format!("{prefix}_ff{l}_b"), vec![dims[l + 1]]));
    }
}

/// Every tensor the configured model owns, in a fixed order. Disabled
/// components contribute no tensors at all.
fn tensor_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut specs = Vec::new();
    if cfg.use_towers {
        specs.push(("token_table".to_string(), vec![cfg.token_vocab, cfg.token_dim]));
        specs.push(("ctx_country".to_string(), vec![cfg.country_vocab, cfg.ctx_dim]));
        specs.push(("ctx_device".to_string(), vec![cfg.device_vocab, cfg.ctx_dim]));
        specs.push(("ctx_language".to_string(), vec![cfg.language_vocab, cfg.ctx_dim]));
        specs.push(("ctx_age".to_string(), vec![cfg.age_vocab, cfg.ctx_dim]));
        specs.push(("ctx_gender".to_string(), vec![cfg.gender_vocab, cfg.ctx_dim]));
        if cfg.use_sequence {
            specs.push(("action_table".to_string(), vec![cfg.action_vocab, cfg.action_dim]));
            specs.push(("time_table".to_string(), vec![cfg.time_buckets, cfg.time_dim]));
            specs.push(("pool_v".to_string(), vec![cfg.seq_entry_dim()]));
            specs.push(("pool_time_bias".to_string(), vec![cfg.time_buckets]));
            specs.push(("attn_w".to_string(), vec![cfg.token_dim, cfg.seq_entry_dim()]));
        }
        specs.push(("item_table".to_string(), vec![cfg.item_vocab, cfg.item_id_dim]));
        tower_specs(&mut specs, cfg, "q", cfg.query_input_dim(), &cfg.query_hidden);
        tower_specs(&mut specs, cfg, "i", cfg.item_input_dim(), &cfg.item_hidden);
    }
    specs.push(("proj_w".to_string(), vec![1 + cfg.iqp_feature_count]));
    specs.push(("proj_b".to_string(), vec![1]));
    specs
}

fn is_bias(name: &str) -> bool {
    name.ends_with("_b")
        || name.ends_with("_b1")
        || name.ends_with("_b2")
        || name == "pool_time_bias"
}

/// All learnable state: the config and its named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Fresh parameters: weights uniform in +-1/sqrt(fan_in), biases zero.
    /// The same seed always yields the same tensors.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in tensor_specs(&config) {
            let mut t = Tensor::zeros(&shape);
            if !is_bias(&name) {
                let fan_in = *shape.last().expect("non-empty shape") as f64;
                let scale = 1.0 / fan_in.sqrt();
                for v in &mut t.data {
                    *v = rng.gen_range(-scale..scale);
                }
            }
            tensors.insert(name, t);
        }
        ModelParams { config, tensors }
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing tensor {name:?}"))
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing tensor {name:?}"))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// Gradient accumulator, one tensor per parameter tensor.
#[derive(Clone, Debug)]
pub struct Grads {
    pub tensors: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let tensors = params
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), Tensor::zeros(&t.shape)))
            .collect();
        Grads { tensors }
    }

    pub fn reset(&mut self) {
        for t in self.tensors.values_mut() {
            t.data.fill(0.0);
        }
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing gradient tensor {name:?}"))
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            for v in &mut t.data {
                *v *= factor;
            }
        }
    }
}

pub fn hash_token(token: &str, vocab: usize) -> usize {
    (fnv1a64(token.as_bytes()) % vocab as u64) as usize
}

fn hash_item(item: ItemId, vocab: usize) -> usize {
    (fnv1a64(&item.0.to_le_bytes()) % vocab as u64) as usize
}

pub fn token_ids(query: &QueryKey, vocab: usize) -> Vec<usize> {
    query
        .normalized_text
        .split(' ')
        .map(|t| hash_token(t, vocab))
        .collect()
}

fn context_ids(ctx: &RequestContext, cfg: &ModelConfig) -> [usize; 5] {
    [
        hash_token(&ctx.country, cfg.country_vocab),
        (ctx.device as usize) % cfg.device_vocab,
        hash_token(&ctx.language, cfg.language_vocab),
        (ctx.age_bucket as usize) % cfg.age_vocab,
        (ctx.gender_bucket as usize) % cfg.gender_vocab,
    ]
}

const CTX_TABLES: [&str; 5] = ["ctx_country", "ctx_device", "ctx_language", "ctx_age", "ctx_gender"];

/// Mean of hashed-token embedding rows over the query's whitespace tokens.
pub fn embed_tokens(query: &QueryKey, params: &ModelParams) -> Vec<f64> {
    let table = params.tensor("token_table");
    let ids = token_ids(query, params.config.token_vocab);
    let mut out = vec![0.0; params.config.token_dim];
    for &id in &ids {
        for (o, v) in out.iter_mut().zip(table.row(id)) {
            *o += v;
        }
    }
    let inv = 1.0 / ids.len() as f64;
    for o in &mut out {
        *o *= inv;
    }
    out
}

#[derive(Clone, Debug)]
struct EntryCache {
    e: Vec<f64>,
    we: Vec<f64>, // attn_w * e, reused by the attention backward
    action_idx: usize,
    time_idx: usize,
}

fn build_entry(params: &ModelParams, entry: &SequenceEntry) -> EntryCache {
    let cfg = &params.config;
    assert_eq!(
        entry.item_embedding.dim(),
        cfg.content_dim,
        "sequence entry content embedding has the wrong dimension"
    );
    let action_idx = ActionType::ALL
        .iter()
        .position(|&a| a == entry.action)
        .expect("closed action set")
        % cfg.action_vocab;
    let time_idx = time_bucket(entry.age_seconds).min(cfg.time_buckets - 1);
    let mut e = Vec::with_capacity(cfg.seq_entry_dim());
    e.extend(entry.item_embedding.to_f64());
    e.extend_from_slice(params.tensor("action_table").row(action_idx));
    e.extend_from_slice(params.tensor("time_table").row(time_idx));
    let we = matvec(params.tensor("attn_w"), &e);
    EntryCache {
        e,
        we,
        action_idx,
        time_idx,
    }
}

#[derive(Clone, Debug, Default)]
struct BlockCache {
    z1: Vec<f64>,
    h1: Vec<f64>,
    sp_in: Vec<f64>,
    mask: Vec<f64>,
    xm: Vec<f64>,
    z2: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
struct MaskCache {
    blocks: Vec<BlockCache>,
}

#[derive(Clone, Debug, Default)]
struct FfCache {
    inputs: Vec<Vec<f64>>, // input to each layer
    zs: Vec<Vec<f64>>,     // pre-activation of each layer
}

fn masknet_forward(params: &ModelParams, prefix: &str, x: &[f64]) -> (Vec<f64>, MaskCache) {
    let cfg = &params.config;
    let mut out = Vec::with_capacity(cfg.masknet_blocks * cfg.block_out);
    let mut cache = MaskCache::default();
    for j in 0..cfg.masknet_blocks {
        let w1 = params.tensor(&format!("{prefix}_mask{j}_w1"));
        let b1 = params.tensor(&format!("{prefix}_mask{j}_b1"));
        let w2 = params.tensor(&format!("{prefix}_mask{j}_w2"));
        let b2 = params.tensor(&format!("{prefix}_mask{j}_b2"));
        let v = params.tensor(&format!("{prefix}_block{j}_w"));
        let c = params.tensor(&format!("{prefix}_block{j}_b"));

        let mut z1 = matvec(w1, x);
        for (z, b) in z1.iter_mut().zip(&b1.data) {
            *z += b;
        }
        let h1 = relu(&z1);
        let mut sp_in = matvec(w2, &h1);
        for (z, b) in sp_in.iter_mut().zip(&b2.data) {
            *z += b;
        }
        let mask: Vec<f64> = sp_in.iter().map(|&z| softplus(z)).collect();
        let xm: Vec<f64> = x.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let mut z2 = matvec(v, &xm);
        for (z, b) in z2.iter_mut().zip(&c.data) {
            *z += b;
        }
        out.extend(relu(&z2));
        cache.blocks.push(BlockCache {
            z1,
            h1,
            sp_in,
            mask,
            xm,
            z2,
        });
    }
    (out, cache)
}

fn masknet_backward(
    params: &ModelParams,
    prefix: &str,
    x: &[f64],
    cache: &MaskCache,
    d_out: &[f64],
    dx: &mut [f64],
    grads: &mut Grads,
) {
    let cfg = &params.config;
    for (j, block) in cache.blocks.iter().enumerate() {
        let d_block = &d_out[j * cfg.block_out..(j + 1) * cfg.block_out];
        let dz2 = relu_grad(&block.z2, d_block);

        outer_acc(grads.get_mut(&format!("{prefix}_block{j}_w")), &dz2, &block.xm);
        add_acc(grads.get_mut(&format!("{prefix}_block{j}_b")), &dz2);

        let v = params.tensor(&format!("{prefix}_block{j}_w"));
        let mut dxm = vec![0.0; x.len()];
        matvec_t_acc(v, &dz2, &mut dxm);

        let mut dsp = vec![0.0; x.len()];
        for i in 0..x.len() {
            dx[i] += dxm[i] * block.mask[i];
            dsp[i] = dxm[i] * x[i] * sigmoid(block.sp_in[i]);
        }

        outer_acc(grads.get_mut(&format!("{prefix}_mask{j}_w2")), &dsp, &block.h1);
        add_acc(grads.get_mut(&format!("{prefix}_mask{j}_b2")), &dsp);

        let w2 = params.tensor(&format!("{prefix}_mask{j}_w2"));
        let mut dh1 = vec![0.0; block.h1.len()];
        matvec_t_acc(w2, &dsp, &mut dh1);
        let dz1 = relu_grad(&block.z1, &dh1);

        outer_acc(grads.get_mut(&format!("{prefix}_mask{j}_w1")), &dz1, x);
        add_acc(grads.get_mut(&format!("{prefix}_mask{j}_b1")), &dz1);

        let w1 = params.tensor(&format!("{prefix}_mask{j}_w1"));
        matvec_t_acc(w1, &dz1, dx);
    }
}

fn ff_layer_count(params: &ModelParams, prefix: &str) -> usize {
    (0..)
        .take_while(|l| params.tensors.contains_key(&format!("{prefix}_ff{l}_w")))
        .count()
}

fn ff_forward(params: &ModelParams, prefix: &str, x: Vec<f64>) -> (Vec<f64>, FfCache) {
    let layers = ff_layer_count(params, prefix);
    let mut cache = FfCache::default();
    let mut a = x;
    for l in 0..layers {
        let w = params.tensor(&format!("{prefix}_ff{l}_w"));
        let b = params.tensor(&format!("{prefix}_ff{l}_b"));
        let mut z = matvec(w, &a);
        for (zv, bv) in z.iter_mut().zip(&b.data) {
            *zv += bv;
        }
        let next = if l + 1 < layers { relu(&z) } else { z.clone() };
        cache.inputs.push(a);
        cache.zs.push(z);
        a = next;
    }
    (a, cache)
}

fn ff_backward(
    params: &ModelParams,
    prefix: &str,
    cache: &FfCache,
    d_out: &[f64],
    grads: &mut Grads,
) -> Vec<f64> {
    let layers = cache.inputs.len();
    let mut d = d_out.to_vec();
    for l in (0..layers).rev() {
        // The last layer is linear; hidden layers pass through relu.
        let dz = if l + 1 < layers {
            relu_grad(&cache.zs[l], &d)
        } else {
            d
        };
        outer_acc(grads.get_mut(&format!("{prefix}_ff{l}_w")), &dz, &cache.inputs[l]);
        add_acc(grads.get_mut(&format!("{prefix}_ff{l}_b")), &dz);
        let w = params.tensor(&format!("{prefix}_ff{l}_w"));
        let mut dx = vec![0.0; cache.inputs[l].len()];
        matvec_t_acc(w, &dz, &mut dx);
        d = dx;
    }
    d
}

/// Everything the query-tower backward pass needs.
#[derive(Clone, Debug)]
pub struct QueryCache {
    token_ids: Vec<usize>,
    ctx_ids: [usize; 5],
    token_emb: Vec<f64>,
    entries: Vec<EntryCache>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    x: Vec<f64>,
    mask: Option<MaskCache>,
    ff: FfCache,
}

/// Everything the item-tower backward pass needs.
#[derive(Clone, Debug)]
pub struct ItemCache {
    item_idx: usize,
    x: Vec<f64>,
    mask: Option<MaskCache>,
    ff: FfCache,
}

/// Attention-weighted history pool, spec'd by the query token embedding:
/// beta = softmax((t . attn_w e_i) / sqrt(entry_dim)).
fn attention_weights(params: &ModelParams, token_emb: &[f64], entries: &[EntryCache]) -> Vec<f64> {
    let scale = 1.0 / (params.config.seq_entry_dim() as f64).sqrt();
    let logits: Vec<f64> = entries
        .iter()
        .map(|en| dot(token_emb, &en.we) * scale)
        .collect();
    softmax(&logits)
}

/// Recency-and-content weighted history pool:
/// alpha = softmax(pool_v . e_i + pool_time_bias[bucket_i]).
fn pool_weights(params: &ModelParams, entries: &[EntryCache]) -> Vec<f64> {
    let v = params.tensor("pool_v");
    let tb = params.tensor("pool_time_bias");
    let logits: Vec<f64> = entries
        .iter()
        .map(|en| dot(&v.data, &en.e) + tb.data[en.time_idx])
        .collect();
    softmax(&logits)
}

fn weighted_sum(weights: &[f64], entries: &[EntryCache]) -> Vec<f64> {
    let dim = entries.first().map(|e| e.e.len()).unwrap_or(0);
    let mut out = vec![0.0; dim];
    for (w, en) in weights.iter().zip(entries) {
        for (o, v) in out.iter_mut().zip(&en.e) {
            *o += w * v;
        }
    }
    out
}

/// Interest pool over the engagement history (empty history -> zero vector).
pub fn weighted_pool(sequence: &[SequenceEntry], params: &ModelParams) -> Vec<f64> {
    if sequence.is_empty() {
        return vec![0.0; params.config.seq_entry_dim()];
    }
    let entries: Vec<EntryCache> = sequence.iter().map(|s| build_entry(params, s)).collect();
    let alpha = pool_weights(params, &entries);
    weighted_sum(&alpha, &entries)
}

/// Query-focused pool over the engagement history.
pub fn query_cross_attention(
    sequence: &[SequenceEntry],
    token_emb: &[f64],
    params: &ModelParams,
) -> Vec<f64> {
    if sequence.is_empty() {
        return vec![0.0; params.config.seq_entry_dim()];
    }
    let entries: Vec<EntryCache> = sequence.iter().map(|s| build_entry(params, s)).collect();
    let beta = attention_weights(params, token_emb, &entries);
    weighted_sum(&beta, &entries)
}

/// One parallel mask block in isolation: softplus-masked input through a
/// linear+relu transform.
pub fn masknet_block(input: &[f64], params: &ModelParams, prefix: &str, block: usize) -> Vec<f64> {
    let single = {
        let mut p = params.clone();
        p.config.masknet_blocks = block + 1;
        p
    };
    let (out, _) = masknet_forward(&single, prefix, input);
    out[block * params.config.block_out..(block + 1) * params.config.block_out].to_vec()
}

/// Query tower forward pass. The sequence is truncated to the most recent
/// `seq_max_len` entries (callers pass most-recent-first).
pub fn embed_query(
    query: &QueryKey,
    context: &RequestContext,
    sequence: &[SequenceEntry],
    params: &ModelParams,
) -> (Vec<f64>, QueryCache) {
    let cfg = &params.config;
    assert!(cfg.use_towers, "query tower is disabled in this config");
    let token_ids = token_ids(query, cfg.token_vocab);
    let token_emb = embed_tokens(query, params);
    let ctx_ids = context_ids(context, cfg);

    let mut x = Vec::with_capacity(cfg.query_input_dim());
    x.extend_from_slice(&token_emb);
    for (table, &id) in CTX_TABLES.iter().zip(&ctx_ids) {
        x.extend_from_slice(params.tensor(table).row(id));
    }

    let (entries, alpha, beta) = if cfg.use_sequence {
        let seq = &sequence[..sequence.len().min(cfg.seq_max_len)];
        let entries: Vec<EntryCache> = seq.iter().map(|s| build_entry(params, s)).collect();
        let (alpha, beta) = if entries.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            (
                pool_weights(params, &entries),
                attention_weights(params, &token_emb, &entries),
            )
        };
        let u_p = if entries.is_empty() {
            vec![0.0; cfg.seq_entry_dim()]
        } else {
            weighted_sum(&alpha, &entries)
        };
        let u_q = if entries.is_empty() {
            vec![0.0; cfg.seq_entry_dim()]
        } else {
            weighted_sum(&beta, &entries)
        };
        x.extend_from_slice(&u_p);
        x.extend_from_slice(&u_q);
        (entries, alpha, beta)
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };

    let (h, mask) = if cfg.use_masknet {
        let (h, cache) = masknet_forward(params, "q", &x);
        (h, Some(cache))
    } else {
        (x.clone(), None)
    };
    let (out, ff) = ff_forward(params, "q", h);
    debug_assert_eq!(out.len(), cfg.embed_dim);
    (
        out,
        QueryCache {
            token_ids,
            ctx_ids,
            token_emb,
            entries,
            alpha,
            beta,
            x,
            mask,
            ff,
        },
    )
}

/// Item tower forward pass.
pub fn embed_item(features: &ItemFeatures, params: &ModelParams) -> (Vec<f64>, ItemCache) {
    let cfg = &params.config;
    assert!(cfg.use_towers, "item tower is disabled in this config");
    assert_eq!(features.rates.len(), cfg.rate_count, "rate vector length");
    assert_eq!(features.content.len(), cfg.content_dim, "content embedding length");
    let item_idx = hash_item(features.item, cfg.item_vocab);
    let mut x = Vec::with_capacity(cfg.item_input_dim());
    x.extend_from_slice(params.tensor("item_table").row(item_idx));
    x.extend_from_slice(&features.rates);
    x.extend_from_slice(&features.content);

    let (h, mask) = if cfg.use_masknet {
        let (h, cache) = masknet_forward(params, "i", &x);
        (h, Some(cache))
    } else {
        (x.clone(), None)
    };
    let (out, ff) = ff_forward(params, "i", h);
    debug_assert_eq!(out.len(), cfg.embed_dim);
    (
        out,
        ItemCache {
            item_idx,
            x,
            mask,
            ff,
        },
    )
}

/// Backpropagate d(loss)/d(query embedding) into parameter gradients.
pub fn backward_query(
    params: &ModelParams,
    cache: &QueryCache,
    d_out: &[f64],
    grads: &mut Grads,
) {
    let cfg = &params.config;
    let d_h = ff_backward(params, "q", &cache.ff, d_out, grads);
    let mut dx = vec![0.0; cache.x.len()];
    match &cache.mask {
        Some(mask) => masknet_backward(params, "q", &cache.x, mask, &d_h, &mut dx, grads),
        None => dx.copy_from_slice(&d_h),
    }

    // Split dx back into the concatenated inputs.
    let mut offset = 0;
    let mut d_token = dx[offset..offset + cfg.token_dim].to_vec();
    offset += cfg.token_dim;
    for (table, &id) in CTX_TABLES.iter().zip(&cache.ctx_ids) {
        let g = grads.get_mut(table);
        let row = g.row_mut(id);
        for (rv, dv) in row.iter_mut().zip(&dx[offset..offset + cfg.ctx_dim]) {
            *rv += dv;
        }
        offset += cfg.ctx_dim;
    }

    if cfg.use_sequence && !cache.entries.is_empty() {
        let entry_dim = cfg.seq_entry_dim();
        let du_p = &dx[offset..offset + entry_dim];
        let du_q = &dx[offset + entry_dim..offset + 2 * entry_dim];
        let n = cache.entries.len();
        let mut d_e: Vec<Vec<f64>> = vec![vec![0.0; entry_dim]; n];

        // u_q = sum beta_i e_i with beta = softmax(t . (attn_w e_i) / sqrt(d)).
        let scale = 1.0 / (entry_dim as f64).sqrt();
        let d_beta: Vec<f64> = cache.entries.iter().map(|en| dot(du_q, &en.e)).collect();
        let beta_dot: f64 = cache.beta.iter().zip(&d_beta).map(|(b, d)| b * d).sum();
        let attn_w = params.tensor("attn_w");
        let mut wt_t = vec![0.0; entry_dim]; // attn_w^T token_emb
        matvec_t_acc(attn_w, &cache.token_emb, &mut wt_t);
        for i in 0..n {
            for (dv, duv) in d_e[i].iter_mut().zip(du_q) {
                *dv += cache.beta[i] * duv;
            }
            let d_logit = cache.beta[i] * (d_beta[i] - beta_dot) * scale;
            if d_logit != 0.0 {
                for (tv, wev) in d_token.iter_mut().zip(&cache.entries[i].we) {
                    *tv += d_logit * wev;
                }
                outer_acc(
                    grads.get_mut("attn_w"),
                    &{
                        let mut scaled = cache.token_emb.clone();
                        for s in &mut scaled {
                            *s *= d_logit;
                        }
                        scaled
                    },
                    &cache.entries[i].e,
                );
                for (dv, wv) in d_e[i].iter_mut().zip(&wt_t) {
                    *dv += d_logit * wv;
                }
            }
        }

        // u_p = sum alpha_i e_i with alpha = softmax(v . e_i + tb[bucket_i]).
        let d_alpha: Vec<f64> = cache.entries.iter().map(|en| dot(du_p, &en.e)).collect();
        let alpha_dot: f64 = cache.alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
        let pool_v = params.tensor("pool_v").data.clone();
        for i in 0..n {
            for (dv, duv) in d_e[i].iter_mut().zip(du_p) {
                *dv += cache.alpha[i] * duv;
            }
            let d_s = cache.alpha[i] * (d_alpha[i] - alpha_dot);
            if d_s != 0.0 {
                add_acc(grads.get_mut("pool_v"), &{
                    let mut scaled = cache.entries[i].e.clone();
                    for s in &mut scaled {
                        *s *= d_s;
                    }
                    scaled
                });
                grads.get_mut("pool_time_bias").data[cache.entries[i].time_idx] += d_s;
                for (dv, vv) in d_e[i].iter_mut().zip(&pool_v) {
                    *dv += d_s * vv;
                }
            }
        }

        // Entry embeddings split into [content | action row | time row];
        // content is input data and takes no gradient.
        for (en, de) in cache.entries.iter().zip(&d_e) {
            let a0 = cfg.content_dim;
            let t0 = a0 + cfg.action_dim;
            let g_action = grads.get_mut("action_table");
            for (gv, dv) in g_action.row_mut(en.action_idx).iter_mut().zip(&de[a0..t0]) {
                *gv += dv;
            }
            let g_time = grads.get_mut("time_table");
            for (gv, dv) in g_time.row_mut(en.time_idx).iter_mut().zip(&de[t0..]) {
                *gv += dv;
            }
        }
    }

    // Token mean: each token row receives d_token / T.
    let inv = 1.0 / cache.token_ids.len() as f64;
    let g_tokens = grads.get_mut("token_table");
    for &id in &cache.token_ids {
        for (gv, dv) in g_tokens.row_mut(id).iter_mut().zip(&d_token) {
            *gv += dv * inv;
        }
    }
}

/// Backpropagate d(loss)/d(item embedding) into parameter gradients.
pub fn backward_item(params: &ModelParams, cache: &ItemCache, d_out: &[f64], grads: &mut Grads) {
    let cfg = &params.config;
    let d_h = ff_backward(params, "i", &cache.ff, d_out, grads);
    let mut dx = vec![0.0; cache.x.len()];
    match &cache.mask {
        Some(mask) => masknet_backward(params, "i", &cache.x, mask, &d_h, &mut dx, grads),
        None => dx.copy_from_slice(&d_h),
    }
    // Only the item-id slice is learned; rates and content are input data.
    let g = grads.get_mut("item_table");
    for (gv, dv) in g
        .row_mut(cache.item_idx)
        .iter_mut()
        .zip(&dx[..cfg.item_id_dim])
    {
        *gv += dv;
    }
}

/// Affine projection over the tower dot product and interaction features.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBreakdown {
    pub dot: f64,
    pub iqp_features: Vec<f64>,
    pub raw_score: f64,
    pub probability: f64,
}

/// raw = w_0 * (q . i) + sum_k w_k * iqp_k + b; probability = sigmoid(raw).
/// Disabled components contribute zero: no towers -> dot = 0, no
/// interactions -> features treated as zero.
pub fn score(
    q_emb: &[f64],
    i_emb: &[f64],
    iqp: &[f64],
    params: &ModelParams,
) -> Result<ScoreBreakdown, ModelError> {
    let cfg = &params.config;
    let f = cfg.iqp_feature_count;
    if cfg.use_towers {
        if q_emb.len() != cfg.embed_dim {
            return Err(ModelError::DimensionMismatch {
                what: "query embedding",
                expected: cfg.embed_dim,
                found: q_emb.len(),
            });
        }
        if i_emb.len() != cfg.embed_dim {
            return Err(ModelError::DimensionMismatch {
                what: "item embedding",
                expected: cfg.embed_dim,
                found: i_emb.len(),
            });
        }
    }
    if cfg.use_iqp && iqp.len() != f {
        return Err(ModelError::DimensionMismatch {
            what: "interaction feature vector",
            expected: f,
            found: iqp.len(),
        });
    }
    let w = params.tensor("proj_w");
    let b = params.tensor("proj_b").data[0];
    let dot_qi = if cfg.use_towers { dot(q_emb, i_emb) } else { 0.0 };
    let features: Vec<f64> = if cfg.use_iqp {
        iqp.to_vec()
    } else {
        vec![0.0; f]
    };
    let mut raw = w.data[0] * dot_qi + b;
    for (k, &feat) in features.iter().enumerate() {
        raw += w.data[1 + k] * feat;
    }
    Ok(ScoreBreakdown {
        dot: dot_qi,
        iqp_features: features,
        raw_score: raw,
        probability: sigmoid(raw),
    })
}

/// Backward through the projection given d(loss)/d(raw score). Returns the
/// gradients flowing into the two tower embeddings.
pub fn score_backward(
    params: &ModelParams,
    q_emb: &[f64],
    i_emb: &[f64],
    breakdown: &ScoreBreakdown,
    d_raw: f64,
    grads: &mut Grads,
) -> (Vec<f64>, Vec<f64>) {
    let cfg = &params.config;
    let w0 = params.tensor("proj_w").data[0];
    {
        let gw = grads.get_mut("proj_w");
        gw.data[0] += d_raw * breakdown.dot;
        for (k, &feat) in breakdown.iqp_features.iter().enumerate() {
            gw.data[1 + k] += d_raw * feat;
        }
        grads.get_mut("proj_b").data[0] += d_raw;
    }
    if !cfg.use_towers {
        return (Vec::new(), Vec::new());
    }
    let d_dot = d_raw * w0;
    let dq: Vec<f64> = i_emb.iter().map(|&v| d_dot * v).collect();
    let di: Vec<f64> = q_emb.iter().map(|&v| d_dot * v).collect();
    (dq, di)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"IRCKPT1\0";

/// Write the checkpoint: magic, version, config text, then each tensor as
/// name + shape prefix + 32-bit little-endian floats, in sorted name order.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    let config_text = params.config.to_config_map().to_text();
    buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());
    buf.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &params.tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for &d in &tensor.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &tensor.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, &buf).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let bad = |msg: &str| ModelError::BadCheckpoint {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], ModelError> {
        if pos + n > bytes.len() {
            return Err(ModelError::BadCheckpoint {
                path: path.display().to_string(),
                msg: format!("truncated at offset {pos}"),
            });
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != 1 {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let config_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let config_text =
        std::str::from_utf8(take(config_len)?).map_err(|_| bad("config block is not utf-8"))?;
    let mut config_map = ConfigMap::new();
    for (idx, line) in config_text.lines().enumerate() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(&format!("bad config line {}", idx + 1)))?;
        config_map.set(k, v);
    }
    let config = ModelConfig::from_config_map(&config_map)?;

    let n_tensors = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| bad("tensor name is not utf-8"))?
            .to_string();
        let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(len * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        tensors.insert(name, Tensor { shape, data });
    }

    // The tensor set must be exactly what the config declares.
    for (name, shape) in tensor_specs(&config) {
        match tensors.get(&name) {
            None => return Err(bad(&format!("missing tensor {name:?}"))),
            Some(t) if t.shape != shape => {
                return Err(bad(&format!(
                    "tensor {name:?} has shape {:?}, expected {shape:?}",
                    t.shape
                )))
            }
            Some(_) => {}
        }
    }
    if tensors.len() != tensor_specs(&config).len() {
        return Err(bad("checkpoint carries unexpected tensors"));
    }
    Ok(ModelParams { config, tensors })
}

/// Items catalog: one row per item: id, title, engagement rates, content
/// embedding (both comma-joined). '#' lines are skipped.
pub fn read_items(path: &Path) -> Result<Vec<ItemRecord>, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let bad = |line_no: usize, msg: String| ModelError::BadCheckpoint {
        path: path.display().to_string(),
        msg: format!("line {line_no}: {msg}"),
    };
    let mut items = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad(line_no, format!("expected 4 columns, found {}", cols.len())));
        }
        let id: u64 = cols[0]
            .parse()
            .map_err(|_| bad(line_no, format!("bad item id {:?}", cols[0])))?;
        let parse_floats = |s: &str| -> Result<Vec<f64>, ModelError> {
            s.split(',')
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| bad(line_no, format!("bad float {t:?}")))
                })
                .collect()
        };
        items.push(ItemRecord {
            features: ItemFeatures {
                item: ItemId(id),
                rates: parse_floats(cols[2])?,
                content: parse_floats(cols[3])?,
            },
            title: cols[1].to_string(),
        });
    }
    Ok(items)
}

pub fn write_items(items: &[ItemRecord], path: &Path) -> Result<(), ModelError> {
    let mut out = String::from("# item_id\ttitle\trates\tcontent\n");
    let join = |vals: &[f64]| {
        vals.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    for rec in items {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            rec.features.item,
            rec.title,
            join(&rec.features.rates),
            join(&rec.features.content)
        ));
    }
    std::fs::write(path, &out).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Tiny config whose full parameter set stays under 500 floats, small enough
/// for finite-difference sweeps over every parameter.
#[cfg(test)]
pub(crate) fn toy_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 3,
        token_vocab: 5,
        token_dim: 2,
        item_vocab: 4,
        item_id_dim: 2,
        content_dim: 2,
        rate_count: 1,
        action_vocab: 8,
        action_dim: 1,
        time_buckets: TIME_BUCKETS,
        time_dim: 1,
        ctx_dim: 1,
        country_vocab: 2,
        device_vocab: 3,
        language_vocab: 2,
        age_vocab: 2,
        gender_vocab: 2,
        seq_max_len: 4,
        masknet_blocks: 2,
        mask_hidden: 2,
        block_out: 2,
        query_hidden: vec![],
        item_hidden: vec![],
        iqp_feature_count: 2,
        use_towers: true,
        use_iqp: true,
        use_sequence: true,
        use_masknet: true,
    }
}

/// Central-difference sweep over every parameter. Returns the max relative
/// error between analytic and numeric gradients. Only sensible for configs
/// small enough to perturb exhaustively.
pub(crate) fn fd_max_rel_err(
    params: &ModelParams,
    loss: &dyn Fn(&ModelParams) -> f64,
    analytic: &Grads,
    eps: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    for name in names {
        let len = params.tensor(&name).len();
        for idx in 0..len {
            let mut plus = params.clone();
            plus.tensor_mut(&name).data[idx] += eps;
            let mut minus = params.clone();
            minus.tensor_mut(&name).data[idx] -= eps;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let exact = analytic.tensors[&name].data[idx];
            let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
