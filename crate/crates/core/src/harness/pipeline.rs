//! End-to-end runs: encode, profile, allocate, compress, decode, score.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::allocator::{allocate, AllocationPlan, CompressionConfig};
use crate::compressor::{compress_layer, LayerReport};
use crate::entropy::{profile, profile_encoding, EntropyProfile, LayerQueryKeys};
use crate::error::{contract_err, Result};
use crate::harness::trace::{TraceFile, TraceHeader};
use crate::harness::workload::Workload;
use crate::kvcache::{LayerKVCache, MemoryModel};
use crate::model::{attention_readout, causal_attention, mean_rows_normalised, Model, PromptEncoding, ScoreScale};
use crate::numerics::{cosine_similarity, Matrix};

pub const DEFAULT_DECODE_STEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub decode_steps: usize,
    /// Wall-clock decode timing; off keeps reports byte-for-byte reproducible.
    pub measure_timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            decode_steps: DEFAULT_DECODE_STEPS,
            measure_timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub layer: usize,
    pub n_text: usize,
    pub n_vision: usize,
    pub degenerate: bool,
    pub e_cm: f64,
    pub alpha: f64,
    pub budget: usize,
    pub recent: usize,
    pub important: usize,
    pub retained: usize,
    pub evicted: usize,
    pub merged: usize,
    pub memory_gib: f64,
    /// Needles that still have their own row in this layer.
    pub needles_kept: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub strategy: String,
    pub merge: bool,
    pub text_boost: bool,
    pub rho: f64,
    pub prompt_len: usize,
    pub decode_steps: usize,
    pub full_memory_gib: f64,
    pub memory_gib: f64,
    pub memory_ratio: f64,
    /// Mean cosine between full-cache and compressed-cache outputs.
    pub fidelity: Option<f64>,
    pub needle_retention: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub full_ms_per_step: f64,
    pub compressed_ms_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub layers: Vec<LayerRow>,
    pub summary: RunSummary,
    pub timing: Option<Timing>,
}

impl RunReport {
    pub fn write_layers_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.layers {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// `key,value` rows; timing rows only when measured.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let s = &self.summary;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut rows = vec![
            ("strategy", s.strategy.clone()),
            ("merge", s.merge.to_string()),
            ("text_boost", s.text_boost.to_string()),
            ("rho", s.rho.to_string()),
            ("prompt_len", s.prompt_len.to_string()),
            ("decode_steps", s.decode_steps.to_string()),
            ("full_memory_gib", s.full_memory_gib.to_string()),
            ("memory_gib", s.memory_gib.to_string()),
            ("memory_ratio", s.memory_ratio.to_string()),
            ("fidelity", opt(s.fidelity)),
            ("needle_retention", opt(s.needle_retention)),
        ];
        if let Some(t) = self.timing {
            rows.push(("full_ms_per_step", t.full_ms_per_step.to_string()));
            rows.push(("compressed_ms_per_step", t.compressed_ms_per_step.to_string()));
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["key", "value"])?;
        for (k, v) in rows {
            out.write_record([k, v.as_str()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Cosine that is exactly 1 for bitwise-equal vectors.
pub fn output_fidelity(full: &[Vec<f64>], compressed: &[Vec<f64>]) -> Result<f64> {
    if full.is_empty() || full.len() != compressed.len() {
        return contract_err("fidelity needs equally many, non-zero outputs");
    }
    let mut total = 0.0;
    for (a, b) in full.iter().zip(compressed) {
        total += if a == b {
            1.0
        } else {
            cosine_similarity(a, b)?.clamp(-1.0, 1.0)
        };
    }
    Ok(total / full.len() as f64)
}

fn needles_kept(cache: &LayerKVCache, needles: &[usize]) -> usize {
    needles
        .iter()
        .filter(|&&n| cache.meta().iter().any(|t| t.original_position == n))
        .count()
}

/// Fraction of (layer, needle) pairs where the needle still has its own row.
pub fn needle_retention(caches: &[LayerKVCache], needles: &[usize]) -> Option<f64> {
    if needles.is_empty() || caches.is_empty() {
        return None;
    }
    let kept: usize = caches.iter().map(|c| needles_kept(c, needles)).sum();
    Some(kept as f64 / (caches.len() * needles.len()) as f64)
}

/// Everything about a prompt that does not depend on the compression
/// settings, so several configurations can share one encoding.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub encoding: PromptEncoding,
    pub profile: EntropyProfile,
    pub causal_cross_attention: bool,
    /// Head-averaged prompt attention per layer.
    pub attention: Vec<Matrix>,
    pub reference: Vec<Vec<f64>>,
    pub reference_secs: f64,
    pub needles: Vec<usize>,
    pub decode_steps: usize,
}

pub fn prepare(
    model: &Model,
    workload: &Workload,
    causal_cross_attention: bool,
    decode_steps: usize,
) -> Result<PreparedRun> {
    let encoding = model.prompt_encode(&workload.prompt)?;
    let profile = profile_encoding(&encoding, model.config(), causal_cross_attention)?;
    let attention = encoding.layers.iter().map(|l| l.mean_attention()).collect();
    let mut caches = encoding.caches.clone();
    let start = Instant::now();
    let reference = model.decode_n(&encoding.last_hidden, decode_steps, &mut caches)?;
    let reference_secs = start.elapsed().as_secs_f64();
    Ok(PreparedRun {
        encoding,
        profile,
        causal_cross_attention,
        attention,
        reference,
        reference_secs,
        needles: workload.needles.clone(),
        decode_steps,
    })
}

fn compress_all(
    caches: &[LayerKVCache],
    attention: &[Matrix],
    plan: &AllocationPlan,
    cfg: &CompressionConfig,
) -> Result<(Vec<LayerKVCache>, Vec<LayerReport>)> {
    caches
        .iter()
        .zip(attention)
        .zip(plan.layers())
        .map(|((c, a), b)| compress_layer(c, a, b, cfg))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

fn layer_rows(
    profile: &EntropyProfile,
    plan: &AllocationPlan,
    compressed: (&[LayerKVCache], &[LayerReport]),
    needles: &[usize],
    mem: &MemoryModel,
    decoded: usize,
) -> Vec<LayerRow> {
    let (caches, reports) = compressed;
    profile
        .records()
        .iter()
        .zip(plan.layers())
        .zip(reports.iter().zip(caches))
        .map(|((r, b), (rep, cache))| LayerRow {
            layer: rep.layer,
            n_text: r.n_text,
            n_vision: r.n_vision,
            degenerate: r.is_degenerate(),
            e_cm: r.e_cm,
            alpha: b.alpha,
            budget: b.budget,
            recent: b.recent,
            important: b.important,
            retained: rep.retained,
            evicted: rep.evicted,
            merged: rep.merged,
            memory_gib: ((b.budget + decoded) as u128 * mem.bytes_per_token_layer()) as f64 / (1u64 << 30) as f64,
            needles_kept: (!needles.is_empty()).then(|| needles_kept(cache, needles)),
        })
        .collect()
}

fn summary(cfg: &CompressionConfig, plan: &AllocationPlan, mem: &MemoryModel, decoded: usize) -> Result<RunSummary> {
    let prompt_len = plan.layers().first().map_or(0, |l| l.full_len);
    let full_memory_gib = mem.estimate_memory(prompt_len + decoded);
    let memory_gib = mem.estimate_memory_per_layer(plan, decoded)?;
    Ok(RunSummary {
        strategy: cfg.strategy.name().to_string(),
        merge: cfg.merge_enabled,
        text_boost: cfg.text_boost_enabled,
        rho: cfg.rho,
        prompt_len,
        decode_steps: decoded,
        full_memory_gib,
        memory_gib,
        memory_ratio: memory_gib / full_memory_gib,
        fidelity: None,
        needle_retention: None,
    })
}

fn mem_model(model: &Model) -> MemoryModel {
    let mc = model.config();
    MemoryModel::fp16(mc.num_layers, mc.num_heads, mc.head_dim())
}

/// Compresses a prepared prompt under `cfg` and decodes from the result.
pub fn run_prepared(
    model: &Model,
    prep: &PreparedRun,
    cfg: &CompressionConfig,
    measure_timing: bool,
) -> Result<RunReport> {
    cfg.validate()?;
    if cfg.causal_cross_attention != prep.causal_cross_attention {
        return contract_err("prepared profile was computed with a different cross-attention mask");
    }
    let full_len: Vec<usize> = prep.encoding.caches.iter().map(LayerKVCache::len).collect();
    let plan = allocate(Some(&prep.profile), cfg, &full_len)?;
    let (mut caches, reports) = compress_all(&prep.encoding.caches, &prep.attention, &plan, cfg)?;
    let needles = needle_retention(&caches, &prep.needles);
    let layers = layer_rows(
        &prep.profile,
        &plan,
        (&caches, &reports),
        &prep.needles,
        &mem_model(model),
        prep.decode_steps,
    );

    let start = Instant::now();
    let outputs = model.decode_n(&prep.encoding.last_hidden, prep.decode_steps, &mut caches)?;
    let compressed_secs = start.elapsed().as_secs_f64();

    let mut s = summary(cfg, &plan, &mem_model(model), prep.decode_steps)?;
    s.fidelity = Some(output_fidelity(&prep.reference, &outputs)?);
    s.needle_retention = needles;
    let per_step = |secs: f64| secs * 1e3 / prep.decode_steps as f64;
    Ok(RunReport {
        layers,
        summary: s,
        timing: measure_timing.then(|| Timing {
            full_ms_per_step: per_step(prep.reference_secs),
            compressed_ms_per_step: per_step(compressed_secs),
        }),
    })
}

/// Synthetic-workload run.
pub fn run_pipeline(
    model: &Model,
    workload: &Workload,
    cfg: &CompressionConfig,
    opts: RunOptions,
) -> Result<RunReport> {
    let prep = prepare(model, workload, cfg.causal_cross_attention, opts.decode_steps)?;
    run_prepared(model, &prep, cfg, opts.measure_timing)
}

fn trace_divisor(h: &TraceHeader, scale: ScoreScale) -> f64 {
    match scale {
        ScoreScale::HeadDim => (h.head_dim as f64).sqrt(),
        ScoreScale::ModelDim => (h.model_dim as f64).sqrt(),
    }
}

fn trace_queries(trace: &TraceFile) -> Result<Vec<&[Matrix]>> {
    trace
        .layers
        .iter()
        .map(|l| l.queries.as_deref())
        .collect::<Option<_>>()
        .ok_or_else(|| crate::Error::Contract("trace has no queries to profile".into()))
}

/// Entropy profile of a dumped trace; needs per-head queries.
pub fn trace_profile(trace: &TraceFile, causal: bool, scale: ScoreScale) -> Result<EntropyProfile> {
    let queries = trace_queries(trace)?;
    let qk: Vec<LayerQueryKeys<'_>> = queries
        .iter()
        .zip(&trace.layers)
        .map(|(q, l)| LayerQueryKeys {
            queries: q,
            keys: &l.keys,
        })
        .collect();
    profile(&qk, &trace.header.modality, trace_divisor(&trace.header, scale), causal)
}

/// Trace output of [`run_trace`]: the report and the compressed caches.
#[derive(Debug, Clone)]
pub struct TraceRun {
    pub report: RunReport,
    pub caches: Vec<LayerKVCache>,
}

/// Runs the compression stages on a dumped trace.
///
/// Without model weights there is no decoding. Fidelity is instead the mean,
/// over layers, of the cosine between attention readouts of the last prompt
/// query against the full and the compressed cache. Traces need queries for
/// the entropy profile; attention is recomputed from Q/K when absent.
pub fn run_trace(trace: &TraceFile, cfg: &CompressionConfig, scale: ScoreScale) -> Result<TraceRun> {
    cfg.validate()?;
    let h = &trace.header;
    let divisor = trace_divisor(h, scale);
    let queries = trace_queries(trace)?;
    let prof = trace_profile(trace, cfg.causal_cross_attention, scale)?;
    let attention = trace
        .layers
        .iter()
        .zip(&queries)
        .map(|(l, q)| match &l.attention {
            Some(a) => Ok(a.clone()),
            None => {
                let heads = q
                    .iter()
                    .zip(&l.keys)
                    .map(|(q, k)| causal_attention(q, k, divisor))
                    .collect::<Result<Vec<_>>>()?;
                Ok(mean_rows_normalised(&heads))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let full = trace.to_caches()?;
    let full_len: Vec<usize> = full.iter().map(LayerKVCache::len).collect();
    let plan = allocate(Some(&prof), cfg, &full_len)?;
    let (caches, reports) = compress_all(&full, &attention, &plan, cfg)?;

    let mut probes_full = Vec::with_capacity(full.len());
    let mut probes_comp = Vec::with_capacity(full.len());
    for ((f, c), q) in full.iter().zip(&caches).zip(&queries) {
        let last = q[0].rows() - 1;
        let probe: Vec<f64> = q.iter().flat_map(|m| m.row(last).iter().copied()).collect();
        probes_full.push(attention_readout(&probe, f, divisor)?);
        probes_comp.push(attention_readout(&probe, c, divisor)?);
    }
    let mem = MemoryModel::fp16(h.num_layers, h.num_heads, h.head_dim);
    let mut s = summary(cfg, &plan, &mem, 0)?;
    s.fidelity = Some(output_fidelity(&probes_full, &probes_comp)?);
    Ok(TraceRun {
        report: RunReport {
            layers: layer_rows(&prof, &plan, (&caches, &reports), &[], &mem, 0),
            summary: s,
            timing: None,
        },
        caches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::Strategy;
    use crate::harness::workload::{generate_workload, WorkloadSpec};
    use crate::model::ModelConfig;

    fn setup() -> (Model, Workload) {
        let model = Model::new(ModelConfig::new(2, 2, 8, 7).unwrap()).unwrap();
        let spec = WorkloadSpec {
            seed: 7,
            layout: "t2,v10,t4".parse().unwrap(),
            needles: 2,
            ..WorkloadSpec::default()
        };
        let w = generate_workload(&spec, &model).unwrap();
        (model, w)
    }

    #[test]
    fn identity_at_full_ratio() {
        let (model, w) = setup();
        for strategy in Strategy::ALL {
            let cfg = CompressionConfig {
                strategy,
                ..CompressionConfig::with_rho(1.0)
            };
            let r = run_pipeline(&model, &w, &cfg, RunOptions::default()).unwrap();
            assert_eq!(r.summary.fidelity, Some(1.0));
            assert_eq!(r.summary.memory_ratio, 1.0);
            assert_eq!(r.summary.needle_retention, Some(1.0));
        }
    }

    #[test]
    fn memory_matches_plan_estimate() {
        let (model, w) = setup();
        let cfg = CompressionConfig::with_rho(0.5);
        let r = run_pipeline(&model, &w, &cfg, RunOptions::default()).unwrap();
        let mem = MemoryModel::fp16(2, 2, 4);
        let plan = AllocationPlan::from_layers(
            r.layers
                .iter()
                .map(|l| crate::allocator::LayerBudget {
                    alpha: l.alpha,
                    budget: l.budget,
                    recent: l.recent,
                    important: l.important,
                    full_len: 16,
                })
                .collect(),
        );
        assert_eq!(r.summary.memory_gib, mem.estimate_memory_per_layer(&plan, 8).unwrap());
        let per_layer: f64 = r.layers.iter().map(|l| l.memory_gib).sum();
        assert!((per_layer - r.summary.memory_gib).abs() < 1e-15);
        assert!(r.summary.memory_ratio < 1.0);
    }

    #[test]
    fn reports_are_reproducible() {
        let (model, w) = setup();
        let cfg = CompressionConfig::with_rho(0.3);
        let csv = |r: &RunReport| {
            let mut a = Vec::new();
            r.write_layers_csv(&mut a).unwrap();
            r.write_summary_csv(&mut a).unwrap();
            a
        };
        let a = run_pipeline(&model, &w, &cfg, RunOptions::default()).unwrap();
        let b = run_pipeline(&model, &w, &cfg, RunOptions::default()).unwrap();
        assert_eq!(csv(&a), csv(&b));
    }

    #[test]
    fn trace_run_matches_identity() {
        let (model, w) = setup();
        let enc = model.prompt_encode(&w.prompt).unwrap();
        let trace = TraceFile::from_encoding(model.config(), &enc).unwrap();
        let run = run_trace(&trace, &CompressionConfig::with_rho(1.0), ScoreScale::HeadDim).unwrap();
        assert_eq!(run.report.summary.fidelity, Some(1.0));
        assert_eq!(run.caches, trace.to_caches().unwrap());
        let half = run_trace(&trace, &CompressionConfig::with_rho(0.5), ScoreScale::HeadDim).unwrap();
        assert!(half.caches.iter().all(|c| c.len() < 16));
    }
}
