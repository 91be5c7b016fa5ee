//! Engagement-driven search pre-ranking.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`domain`]: identifiers, engagement events, labels, log parsing.
//! - [`iqp`]: query-item engagement priors built from logs over sliding
//!   windows, with incremental daily updates and top-K retention.
//! - [`model`]: the two-tower scorer with sequence pooling, query cross
//!   attention, in-tower mask blocks, and a final projection that mixes the
//!   tower dot product with interaction features.
//! - [`train`]: dataset construction, composite loss, analytic gradients,
//!   and the optimization loop.
//! - [`serving`]: offline batch inference into a forward-index snapshot and
//!   online pre-ranking over a structured query tree.
//! - [`eval`]: HITS@K, session metrics, a proximity BM25 baseline, query
//!   popularity segmentation, synthetic log generation, and ablations.
//! - [`config`]: flat key-value config files shared by the CLI stages.

pub mod config;
pub mod domain;
pub mod eval;
pub mod iqp;
pub mod model;
pub mod serving;
pub mod train;

pub use domain::{
    ActionType, EmbeddingVec, EngagementEvent, ItemId, QueryKey, RequestContext, UnifiedLabel,
};
pub use eval::{Segment, SessionLog, SyntheticConfig};
pub use iqp::{CountStore, IqpConfig, SignalStore, SmoothingConfig, WindowSpec};
pub use model::{ModelConfig, ModelParams, ScoreBreakdown};
pub use serving::{ForwardIndexEntry, IndexSnapshot, PrerankRequest, StructuredQueryNode};
