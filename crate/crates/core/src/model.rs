//! A seeded toy multimodal decoder.
//!
//! Every layer is multi-head attention plus a residual connection; there is
//! no MLP, layer norm or output projection. Prompt encoding fills one
//! [`LayerKVCache`] per layer and records the per-head attention so the
//! compression pipeline can score tokens against ground truth. Decoding
//! appends to the caches and reads them back through softmax attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::kvcache::{CachedToken, LayerKVCache, Modality};
use crate::numerics::{dot, matmul, softmax_in_place, Matrix};

/// Half-width of the uniform weight distribution.
pub const WEIGHT_RANGE: f64 = 0.1;

/// Divisor applied to attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreScale {
    /// `sqrt(head_dim)`, the usual multi-head convention.
    #[default]
    HeadDim,
    /// `sqrt(model_dim)`, as written for single-head attention.
    ModelDim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub score_scale: ScoreScale,
}

impl ModelConfig {
    pub fn new(num_layers: usize, num_heads: usize, model_dim: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            num_layers,
            num_heads,
            model_dim,
            seed,
            score_scale: ScoreScale::HeadDim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.model_dim == 0 {
            return Err(Error::Config(format!(
                "layers, heads and model_dim must be positive ({self:?})"
            )));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Divisor for `q·k` logits.
    pub fn score_divisor(&self) -> f64 {
        match self.score_scale {
            ScoreScale::HeadDim => (self.head_dim() as f64).sqrt(),
            ScoreScale::ModelDim => (self.model_dim as f64).sqrt(),
        }
    }
}

/// Token embeddings with their modality tags. Positions are the row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSequence {
    embeddings: Matrix,
    modality: Vec<Modality>,
}

impl PromptSequence {
    pub fn new(embeddings: Matrix, modality: Vec<Modality>) -> Result<Self> {
        if embeddings.rows() == 0 {
            return contract_err("a prompt needs at least one token");
        }
        if modality.len() != embeddings.rows() {
            return shape_err(format!(
                "{} modality tags for {} embeddings",
                modality.len(),
                embeddings.rows()
            ));
        }
        Ok(Self { embeddings, modality })
    }

    /// Uniform(-1, 1) embeddings drawn from `seed`.
    pub fn random(modality: Vec<Modality>, model_dim: usize, seed: u64) -> Result<Self> {
        let emb = Matrix::seeded_uniform(modality.len(), model_dim, -1.0, 1.0, seed);
        Self::new(emb, modality)
    }

    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn modality(&self) -> &[Modality] {
        &self.modality
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        0..self.len()
    }
}

/// Query, key and value projections of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl LayerWeights {
    /// Deterministic in `(seed, layer)`: each layer draws from its own ChaCha stream.
    pub fn generate(seed: u64, layer: usize, model_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(layer as u64);
        let mut draw = || Matrix::random_uniform(model_dim, model_dim, -WEIGHT_RANGE, WEIGHT_RANGE, &mut rng);
        let w_q = draw();
        let w_k = draw();
        let w_v = draw();
        Self { w_q, w_k, w_v }
    }
}

/// Full-width projections of a block of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl Projections {
    pub fn split(&self, num_heads: usize) -> Result<HeadProjections> {
        Ok(HeadProjections {
            q: split_heads(&self.q, num_heads)?,
            k: split_heads(&self.k, num_heads)?,
            v: split_heads(&self.v, num_heads)?,
        })
    }
}

/// Per-head projections, `tokens x head_dim` each.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjections {
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

pub fn project_qkv(x: &Matrix, w: &LayerWeights) -> Result<Projections> {
    if x.cols() != w.w_q.rows() {
        return shape_err(format!(
            "embedding width {} does not match model_dim {}",
            x.cols(),
            w.w_q.rows()
        ));
    }
    Ok(Projections {
        q: matmul(x, &w.w_q)?,
        k: matmul(x, &w.w_k)?,
        v: matmul(x, &w.w_v)?,
    })
}

pub fn split_heads(m: &Matrix, num_heads: usize) -> Result<Vec<Matrix>> {
    if num_heads == 0 || !m.cols().is_multiple_of(num_heads) {
        return shape_err(format!("{} columns cannot split into {num_heads} heads", m.cols()));
    }
    let hd = m.cols() / num_heads;
    (0..num_heads).map(|h| m.column_block(h * hd, hd)).collect()
}

/// Causal softmax attention of `q` over `k`, one probability row per query.
pub fn causal_attention(q: &Matrix, k: &Matrix, divisor: f64) -> Result<Matrix> {
    let mut scores = q.matmul_transposed(k)?;
    for i in 0..scores.rows() {
        let row = scores.row_mut(i);
        for v in row.iter_mut().skip(i + 1) {
            *v = f64::NEG_INFINITY;
        }
        softmax_in_place(row, divisor);
    }
    Ok(scores)
}

/// Everything prompt encoding produces for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub projections: HeadProjections,
    /// Causal attention per head, `prompt_len x prompt_len`.
    pub attention: Vec<Matrix>,
}

impl LayerTrace {
    /// Head-averaged attention, rows renormalised.
    pub fn mean_attention(&self) -> Matrix {
        mean_rows_normalised(&self.attention)
    }
}

/// Averages same-shaped probability matrices and renormalises every row.
pub fn mean_rows_normalised(heads: &[Matrix]) -> Matrix {
    let mut out = heads[0].clone();
    for a in &heads[1..] {
        out.add_assign(a).expect("heads share a shape");
    }
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEncoding {
    pub caches: Vec<LayerKVCache>,
    pub layers: Vec<LayerTrace>,
    /// Final hidden state of the last prompt token; the first decode input.
    pub last_hidden: Vec<f64>,
    pub modality: Vec<Modality>,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    weights: Vec<LayerWeights>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = (0..cfg.num_layers)
            .map(|l| LayerWeights::generate(cfg.seed, l, cfg.model_dim))
            .collect();
        Ok(Self { cfg, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &[LayerWeights] {
        &self.weights
    }

    pub fn prompt_encode(&self, prompt: &PromptSequence) -> Result<PromptEncoding> {
        let cfg = &self.cfg;
        let divisor = cfg.score_divisor();
        let mut x = prompt.embeddings().clone();
        let meta: Vec<CachedToken> = prompt
            .modality()
            .iter()
            .enumerate()
            .map(|(i, &m)| CachedToken::new(i, m))
            .collect();

        let mut caches = Vec::with_capacity(cfg.num_layers);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for (l, w) in self.weights.iter().enumerate() {
            let heads = project_qkv(&x, w)?.split(cfg.num_heads)?;
            let mut attention = Vec::with_capacity(cfg.num_heads);
            let mut mixed = Matrix::zeros(x.rows(), cfg.model_dim);
            let hd = cfg.head_dim();
            for h in 0..cfg.num_heads {
                let a = causal_attention(&heads.q[h], &heads.k[h], divisor)?;
                let out = matmul(&a, &heads.v[h])?;
                for r in 0..out.rows() {
                    mixed.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(out.row(r));
                }
                attention.push(a);
            }
            caches.push(LayerKVCache::new(l, heads.k.clone(), heads.v.clone(), meta.clone())?);
            layers.push(LayerTrace {
                projections: heads,
                attention,
            });
            x.add_assign(&mixed)?;
        }
        let last_hidden = x.row(x.rows() - 1).to_vec();
        Ok(PromptEncoding {
            caches,
            layers,
            last_hidden,
            modality: prompt.modality().to_vec(),
        })
    }

    /// One autoregressive step: append the token's K/V to every layer,
    /// attend over the cache, and return the final hidden state.
    pub fn decode_step(&self, token: &[f64], caches: &mut [LayerKVCache]) -> Result<Vec<f64>> {
        let cfg = &self.cfg;
        if token.len() != cfg.model_dim {
            return shape_err(format!(
                "token width {} does not match model_dim {}",
                token.len(),
                cfg.model_dim
            ));
        }
        if caches.len() != cfg.num_layers {
            return shape_err(format!("{} caches for a {}-layer model", caches.len(), cfg.num_layers));
        }
        if caches.iter().any(LayerKVCache::is_empty) {
            return contract_err("decode requires non-empty caches");
        }
        let divisor = cfg.score_divisor();
        let mut x = token.to_vec();
        for (w, cache) in self.weights.iter().zip(caches.iter_mut()) {
            let row = Matrix::from_vec(1, cfg.model_dim, x.clone())?;
            let p = project_qkv(&row, w)?;
            let position = cache
                .meta()
                .iter()
                .map(|t| t.original_position)
                .max()
                .map_or(0, |p| p + 1);
            cache.append(p.k.row(0), p.v.row(0), CachedToken::new(position, Modality::Text))?;
            let out = attention_readout(p.q.row(0), cache, divisor)?;
            x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
        }
        Ok(x)
    }

    /// Greedy decoding: each output embedding is fed back as the next input.
    pub fn decode_n(&self, first_input: &[f64], steps: usize, caches: &mut [LayerKVCache]) -> Result<Vec<Vec<f64>>> {
        if steps == 0 {
            return contract_err("decode_n needs at least one step");
        }
        let mut outputs = Vec::with_capacity(steps);
        let mut x = first_input.to_vec();
        for _ in 0..steps {
            x = self.decode_step(&x, caches)?;
            outputs.push(x.clone());
        }
        Ok(outputs)
    }
}

/// `softmax(q Kᵀ / divisor) V` for every head of one cache, heads concatenated.
pub fn attention_readout(query: &[f64], cache: &LayerKVCache, divisor: f64) -> Result<Vec<f64>> {
    let hd = cache.head_dim();
    if query.len() != hd * cache.num_heads() {
        return shape_err(format!(
            "query width {} does not match {} heads of {hd}",
            query.len(),
            cache.num_heads()
        ));
    }
    if cache.is_empty() {
        return contract_err("attention over an empty cache");
    }
    let mut out = vec![0.0; query.len()];
    for (h, (k, v)) in cache.keys().iter().zip(cache.values()).enumerate() {
        let q = &query[h * hd..(h + 1) * hd];
        let mut weights: Vec<f64> = k.iter_rows().map(|kr| dot(q, kr)).collect();
        softmax_in_place(&mut weights, divisor);
        let dst = &mut out[h * hd..(h + 1) * hd];
        for (wt, vr) in weights.iter().zip(v.iter_rows()) {
            for (o, x) in dst.iter_mut().zip(vr) {
                *o += wt * x;
            }
        }
    }
    Ok(out)
}
