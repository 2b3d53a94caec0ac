//! Cross-modal attention entropy per layer.
//!
//! For each layer the text queries are scored against the vision keys and
//! the vision queries against the text keys. Scores are softmaxed per head,
//! averaged over heads and renormalised, and the entropy of the averaged
//! rows is what a layer reports. A layer's cross-modal entropy is the sum of
//! the mean row entropies of both directions: low when the layer focuses on
//! a few cross-modal pairs, `ln n_text + ln n_vision` when it is uniform.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kvcache::{partition_by_modality, Modality};
use crate::model::{causal_attention, mean_rows_normalised, ModelConfig, PromptEncoding};
use crate::numerics::{row_entropy, softmax_in_place, Matrix};

/// Head-averaged attention between the two modalities of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalAttention {
    /// Text queries over vision keys, `n_text x n_vision`.
    pub a_tv: Matrix,
    /// Vision queries over text keys, `n_vision x n_text`.
    pub a_vt: Matrix,
    pub layer_index: usize,
}

/// Per-head queries and keys of one layer over the whole prompt.
#[derive(Debug, Clone, Copy)]
pub struct LayerQueryKeys<'a> {
    pub queries: &'a [Matrix],
    pub keys: &'a [Matrix],
}

/// Entropy terms for one layer. `e_tv` and `e_vt` are mean `Σ p ln p`
/// (non-positive); `e_cm = -(e_tv + e_vt)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerEntropy {
    pub e_tv: f64,
    pub e_vt: f64,
    pub e_cm: f64,
}

/// Head-averaged softmax of `q[rows] · k[cols]ᵀ`. With `causal`, a query
/// only sees keys at earlier or equal positions; queries that see nothing
/// are dropped from the result.
fn directional_attention(
    q_heads: &[Matrix],
    k_heads: &[Matrix],
    rows: &[usize],
    cols: &[usize],
    divisor: f64,
    causal: bool,
) -> Result<Matrix> {
    let visible_rows: Vec<usize> = if causal {
        rows.iter()
            .copied()
            .filter(|&r| cols.first().is_some_and(|&c| c <= r))
            .collect()
    } else {
        rows.to_vec()
    };
    if visible_rows.is_empty() || cols.is_empty() {
        return Ok(Matrix::zeros(0, cols.len()));
    }
    let mut per_head = Vec::with_capacity(q_heads.len());
    for (q, k) in q_heads.iter().zip(k_heads) {
        let qs = q.select_rows(&visible_rows);
        let ks = k.select_rows(cols);
        let mut scores = qs.matmul_transposed(&ks)?;
        for (i, &r) in visible_rows.iter().enumerate() {
            let row = scores.row_mut(i);
            if causal {
                for (v, &c) in row.iter_mut().zip(cols) {
                    if c > r {
                        *v = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_in_place(row, divisor);
        }
        per_head.push(scores);
    }
    Ok(mean_rows_normalised(&per_head))
}

fn check_heads(q: &[Matrix], k: &[Matrix], tokens: usize) -> Result<()> {
    if q.is_empty() || q.len() != k.len() {
        return shape_err(format!("{} query heads vs {} key heads", q.len(), k.len()));
    }
    for m in q.iter().chain(k) {
        if m.rows() != tokens || m.cols() != q[0].cols() {
            return shape_err(format!(
                "head matrix {:?} does not cover {tokens} tokens of width {}",
                m.shape(),
                q[0].cols()
            ));
        }
    }
    Ok(())
}

/// Cross-modal attention of one layer. Fails with
/// [`Error::DegenerateModality`] when either modality is absent.
pub fn cross_modal_attention(
    layer: LayerQueryKeys<'_>,
    modality: &[Modality],
    divisor: f64,
    causal: bool,
    layer_index: usize,
) -> Result<CrossModalAttention> {
    check_heads(layer.queries, layer.keys, modality.len())?;
    let (text, vision) = partition_by_modality(modality.iter().copied());
    if text.is_empty() || vision.is_empty() {
        return Err(Error::DegenerateModality {
            layer: layer_index,
            missing: if text.is_empty() { "text" } else { "vision" },
        });
    }
    Ok(CrossModalAttention {
        a_tv: directional_attention(layer.queries, layer.keys, &text, &vision, divisor, causal)?,
        a_vt: directional_attention(layer.queries, layer.keys, &vision, &text, divisor, causal)?,
        layer_index,
    })
}

/// Mean row entropy of a probability matrix (0 for a matrix without rows).
pub fn mean_row_entropy(a: &Matrix) -> Result<f64> {
    if a.rows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for row in a.iter_rows() {
        total += row_entropy(row)?;
    }
    Ok(total / a.rows() as f64)
}

pub fn layer_entropy(a: &CrossModalAttention) -> Result<LayerEntropy> {
    let e_tv = -mean_row_entropy(&a.a_tv)?;
    let e_vt = -mean_row_entropy(&a.a_vt)?;
    let e_cm = -(e_tv + e_vt);
    debug_assert!(e_cm >= 0.0);
    Ok(LayerEntropy { e_tv, e_vt, e_cm })
}

/// One CSV row of an entropy profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerEntropyRecord {
    pub layer_index: usize,
    pub n_text: usize,
    pub n_vision: usize,
    pub e_tv: f64,
    pub e_vt: f64,
    pub e_cm: f64,
}

impl LayerEntropyRecord {
    /// A layer whose prompt lacks one modality; `e_cm` then holds the mean
    /// row entropy of the full causal self-attention.
    pub fn is_degenerate(&self) -> bool {
        self.n_text == 0 || self.n_vision == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyProfile {
    records: Vec<LayerEntropyRecord>,
}

impl EntropyProfile {
    pub fn from_records(records: Vec<LayerEntropyRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Contract("an entropy profile needs at least one layer".into()));
        }
        if records.iter().any(|r| !r.e_cm.is_finite()) {
            return Err(Error::Contract("entropy values must be finite".into()));
        }
        Ok(Self { records })
    }

    /// Profile straight from per-layer entropies (counts unknown, recorded as 0).
    pub fn from_values(e_cm: &[f64]) -> Result<Self> {
        Self::from_records(
            e_cm.iter()
                .enumerate()
                .map(|(l, &e)| LayerEntropyRecord {
                    layer_index: l,
                    n_text: 0,
                    n_vision: 0,
                    e_tv: 0.0,
                    e_vt: 0.0,
                    e_cm: e,
                })
                .collect(),
        )
    }

    pub fn records(&self) -> &[LayerEntropyRecord] {
        &self.records
    }

    pub fn num_layers(&self) -> usize {
        self.records.len()
    }

    pub fn e_cm(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.e_cm).collect()
    }

    pub fn has_degenerate_layers(&self) -> bool {
        self.records.iter().any(LayerEntropyRecord::is_degenerate)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let records = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<LayerEntropyRecord>, _>>()?;
        Self::from_records(records)
    }
}

/// Entropy profile over all layers of a prompt.
pub fn profile(
    layers: &[LayerQueryKeys<'_>],
    modality: &[Modality],
    divisor: f64,
    causal: bool,
) -> Result<EntropyProfile> {
    if layers.is_empty() {
        return Err(Error::Contract("profile needs at least one layer".into()));
    }
    let (text, vision) = partition_by_modality(modality.iter().copied());
    let mut records = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let record = match cross_modal_attention(*layer, modality, divisor, causal, l) {
            Ok(cm) => {
                let e = layer_entropy(&cm)?;
                LayerEntropyRecord {
                    layer_index: l,
                    n_text: cm.a_tv.rows(),
                    n_vision: cm.a_vt.rows(),
                    e_tv: e.e_tv,
                    e_vt: e.e_vt,
                    e_cm: e.e_cm,
                }
            }
            Err(Error::DegenerateModality { .. }) => {
                let heads = layer
                    .queries
                    .iter()
                    .zip(layer.keys)
                    .map(|(q, k)| causal_attention(q, k, divisor))
                    .collect::<Result<Vec<_>>>()?;
                let e = mean_row_entropy(&mean_rows_normalised(&heads))?;
                LayerEntropyRecord {
                    layer_index: l,
                    n_text: text.len(),
                    n_vision: vision.len(),
                    e_tv: 0.0,
                    e_vt: 0.0,
                    e_cm: e,
                }
            }
            Err(e) => return Err(e),
        };
        records.push(record);
    }
    EntropyProfile::from_records(records)
}

/// Profile of an encoded prompt.
pub fn profile_encoding(enc: &PromptEncoding, cfg: &ModelConfig, causal: bool) -> Result<EntropyProfile> {
    let layers: Vec<LayerQueryKeys<'_>> = enc
        .layers
        .iter()
        .map(|l| LayerQueryKeys {
            queries: &l.projections.q,
            keys: &l.projections.k,
        })
        .collect();
    profile(&layers, &enc.modality, cfg.score_divisor(), causal)
}
