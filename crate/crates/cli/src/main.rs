//! `entrokv` command-line front end.

mod config;

use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use entrokv::allocator::allocate;
use entrokv::entropy::profile_encoding;
use entrokv::harness::{
    compare_strategies, generate_workload, run_pipeline, run_trace, trace_profile, write_comparison_csv, RunOptions,
    TraceFile, Variant,
};
use entrokv::{EntropyProfile, Error, Model, PromptEncoding};

use config::{Config, Overrides};

#[derive(Debug, Parser)]
#[command(name = "entrokv", version, about = "Entropy-guided KV-cache compression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-layer cross-modal entropy as CSV
    Profile(Overrides),
    /// Per-layer budget plan as CSV
    Allocate(Overrides),
    /// Compress a trace and write the compressed caches as a trace
    Compress(Overrides),
    /// End-to-end run on a synthetic workload
    Run(Overrides),
    /// Sweep every strategy over a grid of ratios
    Compare(Overrides),
    /// Write the prompt encoding of a synthetic workload as a trace
    Dump(Overrides),
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn encode(cfg: &Config) -> anyhow::Result<(Model, PromptEncoding)> {
    let model = Model::new(cfg.model_config()?)?;
    let workload = generate_workload(&cfg.workload, &model)?;
    let enc = model.prompt_encode(&workload.prompt)?;
    Ok((model, enc))
}

fn load_trace(o: &Overrides) -> anyhow::Result<Option<TraceFile>> {
    o.trace
        .as_deref()
        .map(|p| TraceFile::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()
}

/// Entropy profile and full per-layer lengths, from a trace or a synthetic prompt.
fn profile_of(o: &Overrides, cfg: &Config) -> anyhow::Result<(EntropyProfile, Vec<usize>)> {
    let causal = cfg.compression.causal_cross_attention;
    match load_trace(o)? {
        Some(t) => {
            let lens = t.layers.iter().map(|l| l.len()).collect();
            Ok((trace_profile(&t, causal, cfg.model.score_scale)?, lens))
        }
        None => {
            let (model, enc) = encode(cfg)?;
            let lens = vec![enc.modality.len(); model.config().num_layers];
            Ok((profile_encoding(&enc, model.config(), causal)?, lens))
        }
    }
}

fn required<'a>(p: Option<&'a Path>, what: &str) -> anyhow::Result<&'a Path> {
    p.ok_or_else(|| Error::Config(format!("--{what} is required")).into())
}

fn execute(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Profile(o) => {
            let cfg = o.resolve()?;
            let (profile, _) = profile_of(&o, &cfg)?;
            profile.write_csv(output(o.out.as_deref())?)?;
        }
        Command::Allocate(o) => {
            let cfg = o.resolve()?;
            let (profile, lens) = profile_of(&o, &cfg)?;
            allocate(Some(&profile), &cfg.compression, &lens)?.write_csv(output(o.out.as_deref())?)?;
        }
        Command::Compress(o) => {
            let cfg = o.resolve()?;
            let input = required(o.trace.as_deref(), "trace")?;
            let out = required(o.out.as_deref(), "out")?;
            let trace = TraceFile::load(input).with_context(|| format!("loading {}", input.display()))?;
            let run = run_trace(&trace, &cfg.compression, cfg.model.score_scale)?;
            TraceFile::from_caches(trace.header.clone(), &run.caches)?.save(out)?;
            run.report.write_summary_csv(io::stdout().lock())?;
        }
        Command::Run(o) => {
            let cfg = o.resolve()?;
            let model = Model::new(cfg.model_config()?)?;
            let workload = generate_workload(&cfg.workload, &model)?;
            let opts = RunOptions {
                decode_steps: cfg.run.decode_steps,
                measure_timing: cfg.run.timing,
            };
            let report = run_pipeline(&model, &workload, &cfg.compression, opts)?;
            match o.out.as_deref() {
                Some(dir) => {
                    fs::create_dir_all(dir)?;
                    report.write_layers_csv(output(Some(&dir.join("layers.csv")))?)?;
                    report.write_summary_csv(output(Some(&dir.join("summary.csv")))?)?;
                }
                None => {
                    report.write_layers_csv(io::stdout().lock())?;
                    println!();
                    report.write_summary_csv(io::stdout().lock())?;
                }
            }
        }
        Command::Compare(o) => {
            let cfg = o.resolve()?;
            let model = Model::new(cfg.model_config()?)?;
            let workloads = (0..cfg.run.workloads as u64)
                .map(|i| {
                    let mut spec = cfg.workload.clone();
                    spec.seed += i;
                    generate_workload(&spec, &model)
                })
                .collect::<entrokv::Result<Vec<_>>>()?;
            let opts = RunOptions {
                decode_steps: cfg.run.decode_steps,
                measure_timing: cfg.run.timing,
            };
            let rows = compare_strategies(&model, &workloads, &cfg.run.rhos, &Variant::ALL, &cfg.compression, opts)?;
            write_comparison_csv(&rows, output(o.out.as_deref())?)?;
        }
        Command::Dump(o) => {
            let cfg = o.resolve()?;
            let out = required(o.out.as_deref(), "out")?;
            let (model, enc) = encode(&cfg)?;
            let trace = TraceFile::from_encoding(model.config(), &enc)?;
            trace.save(out)?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Error>() {
        return e.exit_code() as u8;
    }
    if err.downcast_ref::<io::Error>().is_some() {
        return 6;
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
