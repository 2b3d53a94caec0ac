//! Modality-tagged per-layer KV caches and the KV memory footprint model.

use serde::{Deserialize, Serialize};

use crate::allocator::AllocationPlan;
use crate::error::{contract_err, shape_err, Result};
use crate::numerics::Matrix;

const GIB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Vision,
}

impl Modality {
    pub fn as_char(self) -> char {
        match self {
            Modality::Text => 'T',
            Modality::Vision => 'V',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'T' | 't' => Some(Modality::Text),
            'V' | 'v' => Some(Modality::Vision),
            _ => None,
        }
    }
}

/// Identity of one cache row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedToken {
    pub original_position: usize,
    pub modality: Modality,
    /// Number of original tokens averaged into this row.
    pub merged_count: usize,
}

impl CachedToken {
    pub fn new(original_position: usize, modality: Modality) -> Self {
        Self {
            original_position,
            modality,
            merged_count: 1,
        }
    }
}

/// Keys and values of one layer, one `tokens x head_dim` matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKVCache {
    layer_index: usize,
    head_dim: usize,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    meta: Vec<CachedToken>,
}

impl LayerKVCache {
    pub fn new(layer_index: usize, keys: Vec<Matrix>, values: Vec<Matrix>, meta: Vec<CachedToken>) -> Result<Self> {
        if keys.is_empty() || keys.len() != values.len() {
            return shape_err(format!(
                "layer {layer_index}: {} key heads vs {} value heads",
                keys.len(),
                values.len()
            ));
        }
        let (tokens, head_dim) = keys[0].shape();
        for m in keys.iter().chain(&values) {
            if m.shape() != (tokens, head_dim) {
                return shape_err(format!(
                    "layer {layer_index}: head matrix {:?} differs from {:?}",
                    m.shape(),
                    (tokens, head_dim)
                ));
            }
        }
        if meta.len() != tokens {
            return shape_err(format!(
                "layer {layer_index}: {} metadata entries for {tokens} tokens",
                meta.len()
            ));
        }
        if meta.iter().any(|t| t.merged_count == 0) {
            return contract_err("merged_count must be at least 1");
        }
        Ok(Self {
            layer_index,
            head_dim,
            keys,
            values,
            meta,
        })
    }

    pub fn empty(layer_index: usize, num_heads: usize, head_dim: usize) -> Self {
        Self {
            layer_index,
            head_dim,
            keys: vec![Matrix::with_cols(head_dim); num_heads],
            values: vec![Matrix::with_cols(head_dim); num_heads],
            meta: Vec::new(),
        }
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn num_heads(&self) -> usize {
        self.keys.len()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn keys(&self) -> &[Matrix] {
        &self.keys
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn meta(&self) -> &[CachedToken] {
        &self.meta
    }

    /// Appends one token given its full-width key and value rows
    /// (`num_heads * head_dim` wide, heads laid out contiguously).
    pub fn append(&mut self, key: &[f64], value: &[f64], token: CachedToken) -> Result<()> {
        let width = self.num_heads() * self.head_dim;
        if key.len() != width || value.len() != width {
            return shape_err(format!(
                "append expects rows of width {width}, got {} and {}",
                key.len(),
                value.len()
            ));
        }
        for (h, (k, v)) in self.keys.iter_mut().zip(self.values.iter_mut()).enumerate() {
            let span = h * self.head_dim..(h + 1) * self.head_dim;
            k.push_row(&key[span.clone()])?;
            v.push_row(&value[span])?;
        }
        self.meta.push(token);
        Ok(())
    }

    /// Cache restricted to `indices`, in the given order.
    pub fn gather(&self, indices: &[usize]) -> LayerKVCache {
        LayerKVCache {
            layer_index: self.layer_index,
            head_dim: self.head_dim,
            keys: self.keys.iter().map(|m| m.select_rows(indices)).collect(),
            values: self.values.iter().map(|m| m.select_rows(indices)).collect(),
            meta: indices.iter().map(|&i| self.meta[i]).collect(),
        }
    }

    pub(crate) fn from_parts_unchecked(
        layer_index: usize,
        head_dim: usize,
        keys: Vec<Matrix>,
        values: Vec<Matrix>,
        meta: Vec<CachedToken>,
    ) -> Self {
        Self {
            layer_index,
            head_dim,
            keys,
            values,
            meta,
        }
    }

    /// Row indices of text and vision tokens, each in cache order.
    pub fn partition_by_modality(&self) -> (Vec<usize>, Vec<usize>) {
        partition_by_modality(self.meta.iter().map(|t| t.modality))
    }

    /// Total number of original tokens represented by the cache rows.
    pub fn represented_tokens(&self) -> usize {
        self.meta.iter().map(|t| t.merged_count).sum()
    }
}

pub fn partition_by_modality(tags: impl IntoIterator<Item = Modality>) -> (Vec<usize>, Vec<usize>) {
    let mut text = Vec::new();
    let mut vision = Vec::new();
    for (i, m) in tags.into_iter().enumerate() {
        match m {
            Modality::Text => text.push(i),
            Modality::Vision => vision.push(i),
        }
    }
    (text, vision)
}

/// Footprint model for KV storage: tokens x layers x heads x head_dim x (K and V) x bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub bytes_per_element: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub kv_factor: usize,
}

impl MemoryModel {
    /// fp16 storage of keys and values.
    pub fn fp16(num_layers: usize, num_heads: usize, head_dim: usize) -> Self {
        Self {
            bytes_per_element: 2,
            num_layers,
            num_heads,
            head_dim,
            kv_factor: 2,
        }
    }

    /// 32 layers, 32 heads, head_dim 128, fp16: a 7B-class decoder.
    pub fn seven_b_fp16() -> Self {
        Self::fp16(32, 32, 128)
    }

    /// The same shape, counted at the engine's own 8-byte precision.
    pub fn engine(&self) -> Self {
        Self {
            bytes_per_element: std::mem::size_of::<f64>(),
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bytes_per_element == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.head_dim == 0
            || self.kv_factor == 0
        {
            return contract_err(format!("memory model counts must be positive: {self:?}"));
        }
        Ok(())
    }

    /// Bytes for one token in one layer.
    pub fn bytes_per_token_layer(&self) -> u128 {
        (self.bytes_per_element * self.num_heads * self.head_dim * self.kv_factor) as u128
    }

    /// GiB for `total_tokens` cached in every layer.
    pub fn estimate_memory(&self, total_tokens: usize) -> f64 {
        let bytes = total_tokens as u128 * self.num_layers as u128 * self.bytes_per_token_layer();
        bytes as f64 / GIB
    }

    /// GiB for a per-layer plan, with `decoded` uncompressed tokens appended to every layer.
    pub fn estimate_memory_per_layer(&self, plan: &AllocationPlan, decoded: usize) -> Result<f64> {
        if plan.num_layers() != self.num_layers {
            return shape_err(format!(
                "plan covers {} layers, memory model has {}",
                plan.num_layers(),
                self.num_layers
            ));
        }
        let tokens: u128 = plan.layers().iter().map(|l| (l.budget + decoded) as u128).sum();
        Ok((tokens * self.bytes_per_token_layer()) as f64 / GIB)
    }

    /// GiB for caches as they actually are (ragged token counts per layer).
    pub fn estimate_caches(&self, caches: &[LayerKVCache]) -> f64 {
        let tokens: u128 = caches.iter().map(|c| c.len() as u128).sum();
        (tokens * self.bytes_per_token_layer()) as f64 / GIB
    }

    /// Smallest token count whose footprint reaches `gib`.
    pub fn tokens_for_gib(&self, gib: f64) -> usize {
        let per_token = self.num_layers as f64 * self.bytes_per_token_layer() as f64 / GIB;
        (gib / per_token).ceil() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::{AllocationPlan, LayerBudget};
    use proptest::prelude::*;

    fn tags(s: &str) -> Vec<Modality> {
        s.chars().map(|c| Modality::from_char(c).unwrap()).collect()
    }

    fn cache_with(tags: &[Modality]) -> LayerKVCache {
        let mut c = LayerKVCache::empty(0, 2, 2);
        for (i, &m) in tags.iter().enumerate() {
            let row = [i as f64; 4];
            c.append(&row, &row, CachedToken::new(i, m)).unwrap();
        }
        c
    }

    #[test]
    fn partition_examples() {
        let (t, v) = cache_with(&tags("TTTT")).partition_by_modality();
        assert_eq!(t, vec![0, 1, 2, 3]);
        assert!(v.is_empty());
        let (t, v) = cache_with(&tags("TVVT")).partition_by_modality();
        assert_eq!(t, vec![0, 3]);
        assert_eq!(v, vec![1, 2]);
    }

    #[test]
    fn append_splits_heads() {
        let mut c = LayerKVCache::empty(3, 2, 2);
        c.append(
            &[1.0, 2.0, 3.0, 4.0],
            &[5.0, 6.0, 7.0, 8.0],
            CachedToken::new(0, Modality::Text),
        )
        .unwrap();
        assert_eq!(c.keys()[0].row(0), &[1.0, 2.0]);
        assert_eq!(c.keys()[1].row(0), &[3.0, 4.0]);
        assert_eq!(c.values()[1].row(0), &[7.0, 8.0]);
        assert!(c.append(&[1.0], &[1.0], CachedToken::new(1, Modality::Text)).is_err());
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn new_rejects_ragged_heads() {
        let k = vec![Matrix::zeros(2, 2), Matrix::zeros(3, 2)];
        let v = vec![Matrix::zeros(2, 2), Matrix::zeros(2, 2)];
        let meta = vec![CachedToken::new(0, Modality::Text); 2];
        assert!(LayerKVCache::new(0, k, v, meta).is_err());
    }

    #[test]
    fn memory_examples() {
        let m = MemoryModel::seven_b_fp16();
        assert_eq!(m.estimate_memory(0), 0.0);
        assert_eq!(m.estimate_memory(1024), 0.5);
        let implied = m.tokens_for_gib(2.42);
        assert_eq!(implied, 4957);
        assert!((m.estimate_memory(implied) - 2.42).abs() < 0.01);
        assert_eq!(m.engine().estimate_memory(1024), 2.0);
    }

    #[test]
    fn per_layer_memory_reduces_to_uniform() {
        let m = MemoryModel::fp16(4, 2, 8);
        let full = AllocationPlan::from_layers((0..4).map(|_| LayerBudget::from_budget(1.0, 100, 100, 0.75)).collect());
        assert_eq!(m.estimate_memory_per_layer(&full, 7).unwrap(), m.estimate_memory(107));
        let fifth = AllocationPlan::from_layers((0..4).map(|_| LayerBudget::from_budget(0.2, 20, 100, 0.75)).collect());
        assert_eq!(
            m.estimate_memory_per_layer(&fifth, 0).unwrap(),
            0.2 * m.estimate_memory(100)
        );
        let short = AllocationPlan::from_layers(vec![LayerBudget::from_budget(1.0, 1, 1, 0.75)]);
        assert!(m.estimate_memory_per_layer(&short, 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_law(raw in prop::collection::vec(any::<bool>(), 0..40)) {
            let tags: Vec<Modality> = raw.iter().map(|&b| if b { Modality::Text } else { Modality::Vision }).collect();
            let (t, v) = partition_by_modality(tags.iter().copied());
            let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..tags.len()).collect::<Vec<_>>());
            prop_assert!(t.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(v.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn memory_linear_and_monotone(a in 0usize..100_000, b in 0usize..100_000) {
            let m = MemoryModel::seven_b_fp16();
            let sum = m.estimate_memory(a) + m.estimate_memory(b);
            prop_assert!((m.estimate_memory(a + b) - sum).abs() <= 1e-12 * sum.max(1.0));
            if a < b {
                prop_assert!(m.estimate_memory(a) < m.estimate_memory(b));
            }
        }
    }
}
