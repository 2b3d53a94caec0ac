use std::path::Path;
use std::process::{Command, Output};

use entrokv::harness::TraceFile;

fn entrokv(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entrokv"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL: [&str; 8] = ["--layers", "2", "--heads", "2", "--dim", "8", "--prompt-len", "24"];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

#[test]
fn profile_and_allocate_write_one_row_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let profile = stdout(&entrokv(&with_small(&["profile", "--seed", "1"]), dir.path()));
    assert_eq!(profile.lines().count(), 3);
    assert!(profile.starts_with("layer_index,n_text,n_vision,e_tv,e_vt,e_cm"));

    let plan = stdout(&entrokv(
        &with_small(&["allocate", "--seed", "1", "--rho", "0.5"]),
        dir.path(),
    ));
    let budgets: usize = plan
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(budgets, 24);
}

#[test]
fn dump_then_compress_roundtrips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    stdout(&entrokv(
        &with_small(&["dump", "--seed", "2", "--out", "full.ekvt"]),
        dir.path(),
    ));
    let full = TraceFile::load(&dir.path().join("full.ekvt")).unwrap();
    assert!(full.has_queries());

    let summary = stdout(&entrokv(
        &[
            "compress",
            "--trace",
            "full.ekvt",
            "--rho",
            "0.5",
            "--out",
            "small.jsonl",
        ],
        dir.path(),
    ));
    assert!(summary.contains("memory_ratio,0.5"));
    let small = TraceFile::load(&dir.path().join("small.jsonl")).unwrap();
    assert_eq!(small.layers.iter().map(|l| l.len()).sum::<usize>(), 24);

    // a compressed trace has no queries left to profile
    let again = entrokv(&["profile", "--trace", "small.jsonl"], dir.path());
    assert_eq!(again.status.code(), Some(4));
}

#[test]
fn run_is_reproducible_and_honours_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("exp.toml"),
        "[model]\nlayers = 2\nheads = 2\ndim = 8\nseed = 4\n\n[workload]\nseed = 4\nlayout = \"t2,v20,t4\"\nneedles = 2\n\n[compression]\nrho = 0.3\nstrategy = \"pyramid\"\n",
    )
    .unwrap();
    let a = stdout(&entrokv(&["run", "--config", "exp.toml"], dir.path()));
    let b = stdout(&entrokv(&["run", "--config", "exp.toml"], dir.path()));
    assert_eq!(a, b);
    assert!(a.contains("strategy,pyramid"));
    assert!(a.contains("prompt_len,26"));
    assert!(!a.contains("needle_retention,\n"));

    stdout(&entrokv(
        &["run", "--config", "exp.toml", "--no-merge", "--out", "report"],
        dir.path(),
    ));
    let summary = std::fs::read_to_string(dir.path().join("report/summary.csv")).unwrap();
    assert!(summary.contains("merge,false"));
    assert!(dir.path().join("report/layers.csv").exists());
}

#[test]
fn compare_emits_every_variant_and_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let csv = stdout(&entrokv(&with_small(&["compare", "--seed", "0"]), dir.path()));
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(
        rows[0],
        "strategy,rho,fidelity,needle_retention,memory_gib,latency_ms_per_token"
    );
    assert_eq!(rows.len(), 1 + 5 * 8);
    for name in [
        "meda",
        "meda-uniform-alloc",
        "meda-no-merge",
        "uniform-evict",
        "pyramid",
    ] {
        assert_eq!(rows.iter().filter(|r| r.starts_with(&format!("{name},"))).count(), 8);
    }
}

#[test]
fn errors_map_to_category_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| entrokv(args, dir.path()).status.code();

    assert_eq!(code(&["run", "--rho", "0"]), Some(2));
    assert_eq!(code(&["run", "--heads", "3", "--dim", "8"]), Some(2));
    assert_eq!(code(&["compress", "--out", "x.ekvt"]), Some(2));

    std::fs::write(dir.path().join("empty.ekvt"), b"").unwrap();
    assert_eq!(code(&["compress", "--trace", "empty.ekvt", "--out", "x.ekvt"]), Some(5));

    std::fs::write(dir.path().join("junk.ekvt"), b"NOPE and some more bytes than a header").unwrap();
    assert_eq!(code(&["profile", "--trace", "junk.ekvt"]), Some(5));

    assert_eq!(code(&["profile", "--trace", "missing.ekvt"]), Some(6));
    assert_eq!(code(&["run", "--strategy", "greedy"]), Some(2));
}
