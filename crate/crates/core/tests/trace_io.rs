use entrokv::harness::{run_trace, TraceFile};
use entrokv::{CompressionConfig, Error, Modality, Model, ModelConfig, PromptSequence, ScoreScale, TraceError};

fn seed7_trace() -> TraceFile {
    let cfg = ModelConfig::new(2, 2, 8, 7).unwrap();
    let tags: Vec<Modality> = "TTVVVVVVVVVVTTTT"
        .chars()
        .map(|c| Modality::from_char(c).unwrap())
        .collect();
    let prompt = PromptSequence::random(tags, 8, 7).unwrap();
    let enc = Model::new(cfg).unwrap().prompt_encode(&prompt).unwrap();
    TraceFile::from_encoding(&cfg, &enc).unwrap()
}

fn load_err(bytes: &[u8]) -> TraceError {
    match TraceFile::from_bytes(bytes) {
        Err(Error::Trace(e)) => e,
        other => panic!("expected a trace error, got {other:?}"),
    }
}

#[test]
fn files_roundtrip_in_both_encodings() {
    let trace = seed7_trace();
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("t.ekvt");
    let txt = dir.path().join("t.jsonl");
    trace.save(&bin).unwrap();
    trace.save(&txt).unwrap();
    let a = TraceFile::load(&bin).unwrap();
    let b = TraceFile::load(&txt).unwrap();
    assert_eq!(a, trace);
    assert_eq!(b, trace);
    assert_eq!(std::fs::read(&txt).unwrap()[0], b'{');
    assert_eq!(&std::fs::read(&bin).unwrap()[..4], b"EKVT");
}

#[test]
fn compressed_trace_survives_roundtrip() {
    let trace = seed7_trace();
    let run = run_trace(&trace, &CompressionConfig::with_rho(0.5), ScoreScale::HeadDim).unwrap();
    let small = TraceFile::from_caches(trace.header.clone(), &run.caches).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.ekvt");
    small.save(&path).unwrap();
    let back = TraceFile::load(&path).unwrap();
    assert_eq!(back, small);
    // traces store f32, so merged means come back rounded
    for (got, want) in back.to_caches().unwrap().iter().zip(&run.caches) {
        assert_eq!(got.meta(), want.meta());
        for (a, b) in got.keys().iter().zip(want.keys()) {
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| (x - y).abs() <= 1e-6 * y.abs().max(1.0)));
        }
    }
    assert!(!back.has_queries());
}

#[test]
fn corruptions_give_distinct_errors() {
    let mut bytes = Vec::new();
    seed7_trace().write_binary(&mut bytes).unwrap();

    assert!(matches!(load_err(&[]), TraceError::Truncated(_)));
    assert!(matches!(load_err(&bytes[..20]), TraceError::Truncated(_)));
    assert!(matches!(load_err(&bytes[..bytes.len() - 3]), TraceError::Truncated(_)));

    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(
        load_err(&version),
        TraceError::VersionMismatch { found: 9, .. }
    ));

    let mut length = bytes.clone();
    length[24] += 1;
    assert!(matches!(load_err(&length), TraceError::ShapeInconsistent(_)));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(load_err(&magic), TraceError::Malformed(_)));

    let mut text = Vec::new();
    seed7_trace().write_jsonl(&mut text).unwrap();
    let cut = text.iter().position(|&b| b == b'\n').unwrap() + 1;
    assert!(matches!(
        load_err(&text[..cut]),
        TraceError::Truncated(_) | TraceError::ShapeInconsistent(_)
    ));
    assert!(matches!(load_err(b"{not json"), TraceError::Malformed(_)));
}
