//! Entropy-guided KV-cache compression for multimodal decoders.
//!
//! The pipeline encodes a prompt with a seeded toy decoder ([`model`]),
//! measures how diffuse each layer's cross-modal attention is ([`entropy`]),
//! turns those entropies into per-layer token budgets ([`allocator`]) and
//! shrinks every layer's cache to its budget by score-based selection plus
//! nearest-neighbour average merging ([`compressor`]). [`harness`] wires the
//! stages together, generates synthetic workloads and reads/writes traces.

pub mod allocator;
pub mod compressor;
pub mod entropy;
pub mod error;
pub mod harness;
pub mod kvcache;
pub mod model;
pub mod numerics;

pub use allocator::{AllocationPlan, CompressionConfig, LayerBudget, Strategy};
pub use compressor::{LayerReport, MergeAssignment, SelectionResult};
pub use entropy::{CrossModalAttention, EntropyProfile, LayerEntropyRecord};
pub use error::{Error, Result, TraceError};
pub use kvcache::{CachedToken, LayerKVCache, MemoryModel, Modality};
pub use model::{Model, ModelConfig, PromptEncoding, PromptSequence, ScoreScale};
pub use numerics::Matrix;
