//! Per-layer token selection and merging.
//!
//! Tokens are scored by the attention they accumulate over the prompt,
//! text tokens are lifted above every vision token, a recent window is kept
//! unconditionally and the best-scoring remaining tokens fill the rest of
//! the budget. Tokens that do not make the cut are either dropped or folded
//! into their most similar kept token by plain averaging.

use serde::Serialize;

use crate::allocator::{CompressionConfig, LayerBudget};
use crate::error::{contract_err, shape_err, Result};
use crate::kvcache::{CachedToken, LayerKVCache, Modality};
use crate::numerics::{cosine_unchecked, Matrix};

/// Outcome of selection over one layer's prompt tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Kept indices in positional order (top-scored, then the recent window).
    pub conserved: Vec<usize>,
    /// Indices not kept, in positional order.
    pub less_important: Vec<usize>,
    /// Scores used for ranking.
    pub scores: Vec<f64>,
    /// Size of the recent window actually kept.
    pub recent: usize,
}

/// Where each dropped token goes when merging.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeAssignment {
    /// For each less-important token, the column (position in the conserved
    /// list) it merges into.
    pub target: Vec<usize>,
    /// Number of tokens merged into each conserved token.
    pub group_sizes: Vec<usize>,
}

/// Per-layer compression summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerReport {
    pub layer: usize,
    pub full_len: usize,
    pub budget: usize,
    pub recent: usize,
    pub important: usize,
    pub retained: usize,
    pub evicted: usize,
    pub merged: usize,
}

/// Column sums of a (head-averaged, causal) attention matrix.
pub fn cumulative_scores(attn: &Matrix) -> Result<Vec<f64>> {
    if attn.rows() != attn.cols() || attn.rows() == 0 {
        return shape_err(format!(
            "cumulative scores need a non-empty square attention matrix, got {:?}",
            attn.shape()
        ));
    }
    let mut scores = vec![0.0; attn.cols()];
    for row in attn.iter_rows() {
        for (s, a) in scores.iter_mut().zip(row) {
            *s += a;
        }
    }
    Ok(scores)
}

/// Adds the pre-boost maximum score to every text token's score.
pub fn boost_text(scores: &[f64], text_indices: &[usize]) -> Result<Vec<f64>> {
    let mut out = scores.to_vec();
    if text_indices.is_empty() {
        return Ok(out);
    }
    if let Some(&bad) = text_indices.iter().find(|&&i| i >= scores.len()) {
        return shape_err(format!("text index {bad} out of range for {} scores", scores.len()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for &i in text_indices {
        out[i] += max;
    }
    Ok(out)
}

/// Keeps the last `recent` tokens plus the `important` best-scoring tokens
/// before them (ties go to the lower index). If the budget covers the whole
/// prompt nothing is dropped.
pub fn select_conserved(scores: &[f64], recent: usize, important: usize) -> SelectionResult {
    let n = scores.len();
    if recent + important >= n {
        return SelectionResult {
            conserved: (0..n).collect(),
            less_important: Vec::new(),
            scores: scores.to_vec(),
            recent: recent.min(n),
        };
    }
    let pool = n - recent;
    let mut ranked: Vec<usize> = (0..pool).collect();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = vec![false; n];
    for &i in ranked.iter().take(important) {
        keep[i] = true;
    }
    keep[pool..].iter_mut().for_each(|k| *k = true);
    let (conserved, less_important): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| keep[i]);
    SelectionResult {
        conserved,
        less_important,
        scores: scores.to_vec(),
        recent,
    }
}

/// Cosine similarity of every `k_less` row against every `k_conserved` row.
pub fn similarity_matrix(k_less: &Matrix, k_conserved: &Matrix) -> Result<Matrix> {
    if k_less.cols() != k_conserved.cols() {
        return shape_err(format!(
            "key widths differ: {} vs {}",
            k_less.cols(),
            k_conserved.cols()
        ));
    }
    let mut out = Matrix::zeros(k_less.rows(), k_conserved.rows());
    for (i, a) in k_less.iter_rows().enumerate() {
        for (j, b) in k_conserved.iter_rows().enumerate() {
            out.set(i, j, cosine_unchecked(a, b));
        }
    }
    Ok(out)
}

/// Row-wise argmax, lowest column on ties.
pub fn assign_nearest(sim: &Matrix) -> Result<MergeAssignment> {
    if sim.cols() == 0 {
        return contract_err("no conserved tokens to merge into");
    }
    let mut group_sizes = vec![0; sim.cols()];
    let target = sim
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            group_sizes[best] += 1;
            best
        })
        .collect();
    Ok(MergeAssignment { target, group_sizes })
}

/// Replaces each conserved row (keys and values, every head) by the mean of
/// itself and the rows assigned to it; returns the cache of conserved rows.
pub fn merge_average(cache: &LayerKVCache, sel: &SelectionResult, asg: &MergeAssignment) -> Result<LayerKVCache> {
    if asg.target.len() != sel.less_important.len()
        || asg.group_sizes.len() != sel.conserved.len()
        || asg.target.iter().any(|&t| t >= sel.conserved.len())
    {
        return contract_err("merge assignment does not match the selection");
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); sel.conserved.len()];
    for (&src, &dst) in sel.less_important.iter().zip(&asg.target) {
        groups[dst].push(src);
    }
    let average = |m: &Matrix| -> Matrix {
        let mut out = m.select_rows(&sel.conserved);
        for (j, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let row = out.row_mut(j);
            for &i in members {
                row.iter_mut().zip(m.row(i)).for_each(|(a, b)| *a += b);
            }
            let count = (members.len() + 1) as f64;
            row.iter_mut().for_each(|a| *a /= count);
        }
        out
    };
    let keys = cache.keys().iter().map(average).collect();
    let values = cache.values().iter().map(average).collect();
    let meta = sel
        .conserved
        .iter()
        .zip(&groups)
        .map(|(&c, members)| {
            let base = cache.meta()[c];
            CachedToken {
                merged_count: base.merged_count + members.iter().map(|&i| cache.meta()[i].merged_count).sum::<usize>(),
                ..base
            }
        })
        .collect();
    Ok(LayerKVCache::from_parts_unchecked(
        cache.layer_index(),
        cache.head_dim(),
        keys,
        values,
        meta,
    ))
}

/// Similarity of dropped to kept keys, averaged over heads.
pub fn head_mean_similarity(cache: &LayerKVCache, sel: &SelectionResult, targets: &[usize]) -> Result<Matrix> {
    let mut total: Option<Matrix> = None;
    for k in cache.keys() {
        let sim = similarity_matrix(&k.select_rows(&sel.less_important), &k.select_rows(targets))?;
        match total.as_mut() {
            Some(t) => t.add_assign(&sim)?,
            None => total = Some(sim),
        }
    }
    let mut total = total.expect("caches have at least one head");
    total.scale(1.0 / cache.num_heads() as f64);
    Ok(total)
}

/// Full selection + merge (or eviction) for one layer.
///
/// `attn` is the layer's head-averaged prompt attention.
pub fn compress_layer(
    cache: &LayerKVCache,
    attn: &Matrix,
    budget: &LayerBudget,
    cfg: &CompressionConfig,
) -> Result<(LayerKVCache, LayerReport)> {
    let n = cache.len();
    if attn.shape() != (n, n) {
        return shape_err(format!(
            "attention {:?} does not match a cache of {n} tokens",
            attn.shape()
        ));
    }
    if budget.full_len != n {
        return shape_err(format!(
            "budget planned for {} tokens, cache holds {n}",
            budget.full_len
        ));
    }
    let mut report = LayerReport {
        layer: cache.layer_index(),
        full_len: n,
        budget: budget.budget,
        recent: budget.recent,
        important: budget.important,
        retained: n,
        evicted: 0,
        merged: 0,
    };
    if budget.budget >= n {
        return Ok((cache.clone(), report));
    }

    let mut scores = cumulative_scores(attn)?;
    if cfg.text_boost_enabled {
        let text: Vec<usize> = cache
            .meta()
            .iter()
            .enumerate()
            .filter(|(_, t)| t.modality == Modality::Text)
            .map(|(i, _)| i)
            .collect();
        scores = boost_text(&scores, &text)?;
    }
    let sel = select_conserved(&scores, budget.recent, budget.important);
    report.retained = sel.conserved.len();

    if !cfg.merge_enabled || sel.less_important.is_empty() {
        report.evicted = sel.less_important.len();
        return Ok((cache.gather(&sel.conserved), report));
    }

    // merge targets: every conserved token, or only the top-scored ones
    let candidates: Vec<usize> = if cfg.merge_into_recent || sel.recent >= sel.conserved.len() {
        (0..sel.conserved.len()).collect()
    } else {
        (0..sel.conserved.len() - sel.recent).collect()
    };
    let target_rows: Vec<usize> = candidates.iter().map(|&c| sel.conserved[c]).collect();
    let sim = head_mean_similarity(cache, &sel, &target_rows)?;
    let local = assign_nearest(&sim)?;
    let mut group_sizes = vec![0; sel.conserved.len()];
    let target: Vec<usize> = local
        .target
        .iter()
        .map(|&t| {
            group_sizes[candidates[t]] += 1;
            candidates[t]
        })
        .collect();
    let asg = MergeAssignment { target, group_sizes };
    report.merged = sel.less_important.len();
    Ok((merge_average(cache, &sel, &asg)?, report))
}
