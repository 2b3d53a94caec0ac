//! Strategy sweeps over workloads and compression ratios.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;

use crate::allocator::{CompressionConfig, Strategy};
use crate::error::{Error, Result};
use crate::harness::pipeline::{prepare, run_prepared, RunOptions, RunReport};
use crate::harness::workload::Workload;
use crate::model::Model;

/// Named compression configurations compared against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Entropy-guided allocation, text boost, average merging.
    Meda,
    /// As `Meda` with every layer at the same ratio.
    MedaUniformAlloc,
    /// As `Meda` with dropped tokens evicted instead of merged.
    MedaNoMerge,
    /// Uniform allocation, plain score eviction, no text boost.
    UniformEvict,
    /// Linear layer schedule, plain score eviction, no text boost.
    Pyramid,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Meda,
        Variant::MedaUniformAlloc,
        Variant::MedaNoMerge,
        Variant::UniformEvict,
        Variant::Pyramid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Meda => "meda",
            Variant::MedaUniformAlloc => "meda-uniform-alloc",
            Variant::MedaNoMerge => "meda-no-merge",
            Variant::UniformEvict => "uniform-evict",
            Variant::Pyramid => "pyramid",
        }
    }

    /// Configuration at ratio `rho`; other fields come from `base`.
    pub fn config(self, base: &CompressionConfig, rho: f64) -> CompressionConfig {
        let with = |strategy, merge_enabled, text_boost_enabled| CompressionConfig {
            rho,
            strategy,
            merge_enabled,
            text_boost_enabled,
            ..*base
        };
        match self {
            Variant::Meda => with(Strategy::Meda, true, true),
            Variant::MedaUniformAlloc => with(Strategy::Uniform, true, true),
            Variant::MedaNoMerge => with(Strategy::Meda, false, true),
            Variant::UniformEvict => with(Strategy::Uniform, false, false),
            Variant::Pyramid => with(Strategy::Pyramid, false, false),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// One (variant, ratio) cell averaged over the workloads.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub strategy: String,
    pub rho: f64,
    pub fidelity: f64,
    pub needle_retention: Option<f64>,
    pub memory_gib: f64,
    pub latency_ms_per_token: Option<f64>,
}

/// Runs every variant at every ratio on each workload, reusing one prompt
/// encoding per workload. Results are indexed `[workload][rho][variant]`.
pub fn evaluate(
    model: &Model,
    workloads: &[Workload],
    rhos: &[f64],
    variants: &[Variant],
    base: &CompressionConfig,
    opts: RunOptions,
) -> Result<Vec<Vec<Vec<RunReport>>>> {
    if workloads.is_empty() || rhos.is_empty() || variants.is_empty() {
        return Err(Error::Config("comparison needs workloads, ratios and variants".into()));
    }
    workloads
        .iter()
        .map(|w| {
            let prep = prepare(model, w, base.causal_cross_attention, opts.decode_steps)?;
            rhos.iter()
                .map(|&rho| {
                    variants
                        .iter()
                        .map(|v| run_prepared(model, &prep, &v.config(base, rho), opts.measure_timing))
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Mean metrics per (variant, ratio), variants outermost.
pub fn compare_strategies(
    model: &Model,
    workloads: &[Workload],
    rhos: &[f64],
    variants: &[Variant],
    base: &CompressionConfig,
    opts: RunOptions,
) -> Result<Vec<ComparisonRow>> {
    let runs = evaluate(model, workloads, rhos, variants, base, opts)?;
    let n = workloads.len() as f64;
    let mut rows = Vec::with_capacity(variants.len() * rhos.len());
    for (vi, v) in variants.iter().enumerate() {
        for (ri, &rho) in rhos.iter().enumerate() {
            let cell: Vec<&RunReport> = runs.iter().map(|w| &w[ri][vi]).collect();
            let mean = |f: &dyn Fn(&RunReport) -> f64| cell.iter().map(|r| f(r)).sum::<f64>() / n;
            let retention: Option<Vec<f64>> = cell.iter().map(|r| r.summary.needle_retention).collect();
            let latency: Option<Vec<f64>> = cell
                .iter()
                .map(|r| r.timing.map(|t| t.compressed_ms_per_step))
                .collect();
            rows.push(ComparisonRow {
                strategy: v.name().to_string(),
                rho,
                fidelity: mean(&|r| r.summary.fidelity.unwrap_or(f64::NAN)),
                needle_retention: retention.map(|r| r.iter().sum::<f64>() / n),
                memory_gib: mean(&|r| r.summary.memory_gib),
                latency_ms_per_token: latency.map(|l| l.iter().sum::<f64>() / n),
            });
        }
    }
    Ok(rows)
}

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::workload::{generate_workload, WorkloadSpec};
    use crate::model::ModelConfig;

    fn fixture() -> (Model, Vec<Workload>) {
        let model = Model::new(ModelConfig::new(2, 2, 8, 3).unwrap()).unwrap();
        let w = generate_workload(
            &WorkloadSpec {
                seed: 3,
                layout: "t2,v12,t3".parse().unwrap(),
                needles: 1,
                ..WorkloadSpec::default()
            },
            &model,
        )
        .unwrap();
        (model, vec![w])
    }

    #[test]
    fn full_ratio_rows_are_identical() {
        let (model, ws) = fixture();
        let rows = compare_strategies(
            &model,
            &ws,
            &[1.0],
            &Variant::ALL,
            &CompressionConfig::default(),
            RunOptions::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows
            .iter()
            .all(|r| r.fidelity == 1.0 && r.needle_retention == Some(1.0)));
    }

    #[test]
    fn grid_is_cartesian() {
        let (model, ws) = fixture();
        let rhos: Vec<f64> = (1..=8).map(|i| i as f64 / 10.0).collect();
        let rows = compare_strategies(
            &model,
            &ws,
            &rhos,
            &[Variant::Meda, Variant::Pyramid],
            &CompressionConfig::default(),
            RunOptions::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 16);
        assert_eq!(rows.iter().filter(|r| r.strategy == "pyramid").count(), 8);
        let mut csv = Vec::new();
        write_comparison_csv(&rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("strategy,rho,fidelity,needle_retention,memory_gib,latency_ms_per_token\n"));
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("h2o".parse::<Variant>().is_err());
    }
}
