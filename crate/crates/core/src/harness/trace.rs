//! Trace files: per-layer Q/K/V tensors (and optionally attention) dumped
//! from a model run, in a binary or a line-delimited JSON encoding.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! magic "EKVT" | version u32 | L u32 | H u32 | D u32 | head_dim u32
//! | prompt_len u32 | payload_len u64
//! payload:
//!   prompt modality tags, one byte each (0 text, 1 vision)
//!   per layer:
//!     layer_index u32 | tokens n u32 | flags u8 (1 = queries, 2 = attention)
//!     positions u32 x n | merged counts u32 x n | modality u8 x n
//!     per head: [queries n x head_dim f32] keys f32 | values f32
//!     [head-averaged attention n x n f32]
//! ```
//!
//! The JSON encoding has a header line followed by one line per layer with
//! the same fields. Tensor values are stored as 32-bit floats in both, so a
//! trace built from 64-bit data is rounded once on construction and is then
//! stable across any number of save/load cycles.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TraceError};
use crate::kvcache::{CachedToken, LayerKVCache, Modality};
use crate::model::{ModelConfig, PromptEncoding};
use crate::numerics::Matrix;

pub const TRACE_MAGIC: &[u8; 4] = b"EKVT";
pub const TRACE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4 + 8;
const FLAG_QUERIES: u8 = 1;
const FLAG_ATTENTION: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEncoding {
    Binary,
    Jsonl,
}

impl TraceEncoding {
    /// `.jsonl` / `.json` paths are text, everything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "json") => Self::Jsonl,
            _ => Self::Binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceHeader {
    pub version: u32,
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub modality: Vec<Modality>,
}

impl TraceHeader {
    pub fn prompt_len(&self) -> usize {
        self.modality.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceLayer {
    pub layer_index: usize,
    pub tokens: Vec<CachedToken>,
    pub queries: Option<Vec<Matrix>>,
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    /// Head-averaged causal attention over this layer's tokens.
    pub attention: Option<Matrix>,
}

impl TraceLayer {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn to_cache(&self) -> Result<LayerKVCache> {
        LayerKVCache::new(
            self.layer_index,
            self.keys.clone(),
            self.values.clone(),
            self.tokens.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub layers: Vec<TraceLayer>,
}

fn to_f32_precision(m: &Matrix) -> Matrix {
    let data = m.data().iter().map(|&x| x as f32 as f64).collect();
    Matrix::from_vec(m.rows(), m.cols(), data).expect("rounding keeps shape and finiteness")
}

fn inconsistent<T>(msg: impl Into<String>) -> Result<T> {
    Err(TraceError::ShapeInconsistent(msg.into()).into())
}

impl TraceFile {
    /// Builds a trace and checks it; tensors are rounded to f32 precision.
    pub fn new(header: TraceHeader, layers: Vec<TraceLayer>) -> Result<Self> {
        let round = |ms: &[Matrix]| ms.iter().map(to_f32_precision).collect::<Vec<_>>();
        let layers = layers
            .into_iter()
            .map(|l| TraceLayer {
                queries: l.queries.as_deref().map(round),
                keys: round(&l.keys),
                values: round(&l.values),
                attention: l.attention.as_ref().map(to_f32_precision),
                ..l
            })
            .collect();
        let t = Self { header, layers };
        t.validate()?;
        Ok(t)
    }

    /// Full prompt trace with queries and head-averaged attention.
    pub fn from_encoding(cfg: &ModelConfig, enc: &PromptEncoding) -> Result<Self> {
        let layers = enc
            .caches
            .iter()
            .zip(&enc.layers)
            .map(|(c, l)| TraceLayer {
                layer_index: c.layer_index(),
                tokens: c.meta().to_vec(),
                queries: Some(l.projections.q.clone()),
                keys: c.keys().to_vec(),
                values: c.values().to_vec(),
                attention: Some(l.mean_attention()),
            })
            .collect();
        Self::new(header_for(cfg, &enc.modality), layers)
    }

    /// Cache-only trace (no queries or attention), e.g. after compression.
    pub fn from_caches(header: TraceHeader, caches: &[LayerKVCache]) -> Result<Self> {
        let layers = caches
            .iter()
            .map(|c| TraceLayer {
                layer_index: c.layer_index(),
                tokens: c.meta().to_vec(),
                queries: None,
                keys: c.keys().to_vec(),
                values: c.values().to_vec(),
                attention: None,
            })
            .collect();
        Self::new(header, layers)
    }

    pub fn to_caches(&self) -> Result<Vec<LayerKVCache>> {
        self.layers.iter().map(TraceLayer::to_cache).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.version != TRACE_VERSION {
            return Err(TraceError::VersionMismatch {
                found: h.version,
                expected: TRACE_VERSION,
            }
            .into());
        }
        if h.num_layers == 0 || h.num_heads == 0 || h.head_dim == 0 || h.prompt_len() == 0 {
            return inconsistent("trace dimensions must be positive");
        }
        if h.num_heads * h.head_dim != h.model_dim {
            return inconsistent(format!(
                "{} heads of {} do not make model_dim {}",
                h.num_heads, h.head_dim, h.model_dim
            ));
        }
        if self.layers.len() != h.num_layers {
            return inconsistent(format!(
                "header declares {} layers, found {}",
                h.num_layers,
                self.layers.len()
            ));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let n = layer.len();
            if layer.layer_index != l {
                return inconsistent(format!("layer {l} is labelled {}", layer.layer_index));
            }
            if n == 0 {
                return inconsistent(format!("layer {l} has no tokens"));
            }
            let heads = std::iter::once(&layer.keys)
                .chain(std::iter::once(&layer.values))
                .chain(layer.queries.iter());
            for group in heads {
                if group.len() != h.num_heads || group.iter().any(|m| m.shape() != (n, h.head_dim)) {
                    return inconsistent(format!(
                        "layer {l}: expected {} heads of {n}x{}",
                        h.num_heads, h.head_dim
                    ));
                }
            }
            if let Some(a) = &layer.attention {
                if a.shape() != (n, n) {
                    return inconsistent(format!("layer {l}: attention {:?} for {n} tokens", a.shape()));
                }
            }
            if layer.tokens.iter().any(|t| t.merged_count == 0) {
                return inconsistent(format!("layer {l}: zero merged count"));
            }
        }
        Ok(())
    }

    pub fn has_queries(&self) -> bool {
        self.layers.iter().all(|l| l.queries.is_some())
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let h = &self.header;
        let mut payload = Vec::new();
        payload.extend(h.modality.iter().map(|&m| modality_byte(m)));
        for layer in &self.layers {
            put_u32(&mut payload, layer.layer_index)?;
            put_u32(&mut payload, layer.len())?;
            let flags = (u8::from(layer.queries.is_some()) * FLAG_QUERIES)
                | (u8::from(layer.attention.is_some()) * FLAG_ATTENTION);
            payload.push(flags);
            for t in &layer.tokens {
                put_u32(&mut payload, t.original_position)?;
            }
            for t in &layer.tokens {
                put_u32(&mut payload, t.merged_count)?;
            }
            payload.extend(layer.tokens.iter().map(|t| modality_byte(t.modality)));
            for head in 0..h.num_heads {
                if let Some(q) = &layer.queries {
                    put_f32s(&mut payload, &q[head]);
                }
                put_f32s(&mut payload, &layer.keys[head]);
                put_f32s(&mut payload, &layer.values[head]);
            }
            if let Some(a) = &layer.attention {
                put_f32s(&mut payload, a);
            }
        }
        let mut head = Vec::with_capacity(HEADER_LEN);
        head.extend_from_slice(TRACE_MAGIC);
        for v in [
            h.version as usize,
            h.num_layers,
            h.num_heads,
            h.model_dim,
            h.head_dim,
            h.prompt_len(),
        ] {
            put_u32(&mut head, v)?;
        }
        head.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        w.write_all(&head)?;
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_binary_bytes(&bytes)
    }

    pub fn from_binary_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(TraceError::Truncated(format!(
                "{} bytes is shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            ))
            .into());
        }
        if &bytes[..4] != TRACE_MAGIC {
            return Err(TraceError::Malformed("missing EKVT magic".into()).into());
        }
        let mut cur = Cursor { bytes, pos: 4 };
        let version = cur.u32()?;
        if version != TRACE_VERSION {
            return Err(TraceError::VersionMismatch {
                found: version,
                expected: TRACE_VERSION,
            }
            .into());
        }
        let num_layers = cur.u32()? as usize;
        let num_heads = cur.u32()? as usize;
        let model_dim = cur.u32()? as usize;
        let head_dim = cur.u32()? as usize;
        let prompt_len = cur.u32()? as usize;
        let payload_len = cur.u64()?;
        let available = (bytes.len() - HEADER_LEN) as u64;
        if available < payload_len {
            return Err(
                TraceError::Truncated(format!("payload declares {payload_len} bytes, {available} present")).into(),
            );
        }
        if available > payload_len {
            return inconsistent(format!(
                "{} bytes after the declared {payload_len}-byte payload",
                available - payload_len
            ));
        }
        if num_heads == 0 || head_dim == 0 || num_heads * head_dim != model_dim {
            return inconsistent(format!(
                "{num_heads} heads of {head_dim} do not make model_dim {model_dim}"
            ));
        }
        // past this point every short read means the header lied about shapes
        let mut body = Cursor {
            bytes: &bytes[HEADER_LEN..],
            pos: 0,
        };
        let payload = (|| -> Result<TraceFile> {
            let modality = body
                .take(prompt_len)?
                .iter()
                .map(|&b| byte_modality(b))
                .collect::<Result<Vec<_>>>()?;
            let mut layers = Vec::with_capacity(num_layers.min(1024));
            for _ in 0..num_layers {
                let layer_index = body.u32()? as usize;
                let n = body.u32()? as usize;
                let flags = body.take(1)?[0];
                if flags & !(FLAG_QUERIES | FLAG_ATTENTION) != 0 {
                    return Err(TraceError::Malformed(format!("unknown layer flags {flags:#x}")).into());
                }
                let positions = (0..n).map(|_| body.u32()).collect::<Result<Vec<_>>>()?;
                let merged = (0..n).map(|_| body.u32()).collect::<Result<Vec<_>>>()?;
                let tags = body.take(n)?.to_vec();
                let tokens = positions
                    .iter()
                    .zip(&merged)
                    .zip(&tags)
                    .map(|((&p, &m), &t)| {
                        Ok(CachedToken {
                            original_position: p as usize,
                            modality: byte_modality(t)?,
                            merged_count: m as usize,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let has_q = flags & FLAG_QUERIES != 0;
                let mut queries = Vec::new();
                let mut keys = Vec::with_capacity(num_heads);
                let mut values = Vec::with_capacity(num_heads);
                for _ in 0..num_heads {
                    if has_q {
                        queries.push(body.matrix(n, head_dim)?);
                    }
                    keys.push(body.matrix(n, head_dim)?);
                    values.push(body.matrix(n, head_dim)?);
                }
                let attention = if flags & FLAG_ATTENTION != 0 {
                    Some(body.matrix(n, n)?)
                } else {
                    None
                };
                layers.push(TraceLayer {
                    layer_index,
                    tokens,
                    queries: has_q.then_some(queries),
                    keys,
                    values,
                    attention,
                });
            }
            if body.pos != body.bytes.len() {
                return inconsistent(format!("{} unread payload bytes", body.bytes.len() - body.pos));
            }
            Ok(TraceFile {
                header: TraceHeader {
                    version,
                    num_layers,
                    num_heads,
                    model_dim,
                    head_dim,
                    modality,
                },
                layers,
            })
        })();
        let trace = payload.map_err(|e| match e {
            Error::Trace(TraceError::Truncated(msg)) => {
                TraceError::ShapeInconsistent(format!("payload shorter than its shapes: {msg}")).into()
            }
            other => other,
        })?;
        trace.validate()?;
        Ok(trace)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let h = &self.header;
        let header = JsonHeader {
            format: "entrokv-trace".into(),
            version: h.version,
            num_layers: h.num_layers,
            num_heads: h.num_heads,
            model_dim: h.model_dim,
            head_dim: h.head_dim,
            prompt_len: h.prompt_len(),
            modality: h.modality.iter().map(|m| m.as_char()).collect(),
        };
        writeln!(w, "{}", to_json(&header)?)?;
        for layer in &self.layers {
            let rec = JsonLayer {
                layer_index: layer.layer_index,
                tokens: layer.len(),
                positions: layer.tokens.iter().map(|t| t.original_position).collect(),
                merged_counts: layer.tokens.iter().map(|t| t.merged_count).collect(),
                modality: layer.tokens.iter().map(|t| t.modality.as_char()).collect(),
                queries: layer.queries.as_ref().map(|q| q.iter().map(json_matrix).collect()),
                keys: layer.keys.iter().map(json_matrix).collect(),
                values: layer.values.iter().map(json_matrix).collect(),
                attention: layer.attention.as_ref().map(json_matrix),
            };
            writeln!(w, "{}", to_json(&rec)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let first = match lines.next() {
            Some(line) => line?,
            None => return Err(TraceError::Truncated("empty trace".into()).into()),
        };
        let header: JsonHeader = from_json(&first)?;
        if header.format != "entrokv-trace" {
            return Err(TraceError::Malformed(format!("unknown format `{}`", header.format)).into());
        }
        if header.version != TRACE_VERSION {
            return Err(TraceError::VersionMismatch {
                found: header.version,
                expected: TRACE_VERSION,
            }
            .into());
        }
        let modality = parse_tags(&header.modality)?;
        if modality.len() != header.prompt_len {
            return inconsistent(format!(
                "prompt_len {} but {} modality tags",
                header.prompt_len,
                modality.len()
            ));
        }
        let mut layers = Vec::with_capacity(header.num_layers.min(1024));
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonLayer = from_json(&line)?;
            let tags = parse_tags(&rec.modality)?;
            if rec.positions.len() != rec.tokens || rec.merged_counts.len() != rec.tokens || tags.len() != rec.tokens {
                return inconsistent(format!(
                    "layer {}: token metadata does not match {} tokens",
                    rec.layer_index, rec.tokens
                ));
            }
            let tokens = rec
                .positions
                .iter()
                .zip(&rec.merged_counts)
                .zip(tags)
                .map(|((&p, &m), t)| CachedToken {
                    original_position: p,
                    modality: t,
                    merged_count: m,
                })
                .collect();
            let heads = |ms: Vec<JsonMatrix>| ms.into_iter().map(matrix_from_json).collect::<Result<Vec<_>>>();
            layers.push(TraceLayer {
                layer_index: rec.layer_index,
                tokens,
                queries: rec.queries.map(heads).transpose()?,
                keys: heads(rec.keys)?,
                values: heads(rec.values)?,
                attention: rec.attention.map(matrix_from_json).transpose()?,
            });
        }
        if layers.len() < header.num_layers {
            return Err(TraceError::Truncated(format!(
                "header declares {} layers, found {}",
                header.num_layers,
                layers.len()
            ))
            .into());
        }
        let trace = TraceFile {
            header: TraceHeader {
                version: header.version,
                num_layers: header.num_layers,
                num_heads: header.num_heads,
                model_dim: header.model_dim,
                head_dim: header.head_dim,
                modality,
            },
            layers,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        match TraceEncoding::from_path(path) {
            TraceEncoding::Binary => self.write_binary(&mut f)?,
            TraceEncoding::Jsonl => self.write_jsonl(&mut f)?,
        }
        f.flush()?;
        Ok(())
    }

    /// Loads either encoding, detected from the leading bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match bytes.first() {
            None => Err(TraceError::Truncated("empty trace".into()).into()),
            Some(b'{') => Self::read_jsonl(bytes),
            Some(_) => Self::from_binary_bytes(bytes),
        }
    }
}

/// Header for a prompt of `modality` under `cfg`.
pub fn header_for(cfg: &ModelConfig, modality: &[Modality]) -> TraceHeader {
    TraceHeader {
        version: TRACE_VERSION,
        num_layers: cfg.num_layers,
        num_heads: cfg.num_heads,
        model_dim: cfg.model_dim,
        head_dim: cfg.head_dim(),
        modality: modality.to_vec(),
    }
}

fn modality_byte(m: Modality) -> u8 {
    match m {
        Modality::Text => 0,
        Modality::Vision => 1,
    }
}

fn byte_modality(b: u8) -> Result<Modality> {
    match b {
        0 => Ok(Modality::Text),
        1 => Ok(Modality::Vision),
        _ => Err(TraceError::Malformed(format!("modality byte {b}")).into()),
    }
}

fn parse_tags(s: &str) -> Result<Vec<Modality>> {
    s.chars()
        .map(|c| Modality::from_char(c).ok_or_else(|| TraceError::Malformed(format!("modality tag `{c}`")).into()))
        .collect()
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| TraceError::ShapeInconsistent(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(buf: &mut Vec<u8>, m: &Matrix) {
    for &x in m.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(TraceError::Truncated(format!(
                "need {n} bytes at offset {}, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            ))
            .into()),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let count = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| TraceError::ShapeInconsistent(format!("{rows}x{cols} overflows")))?;
        let data = self
            .take(count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Matrix::from_vec(rows, cols, data).map_err(|_| TraceError::Malformed("non-finite tensor value".into()).into())
    }
}

#[derive(Serialize, Deserialize)]
struct JsonHeader {
    format: String,
    version: u32,
    num_layers: usize,
    num_heads: usize,
    model_dim: usize,
    head_dim: usize,
    prompt_len: usize,
    modality: String,
}

#[derive(Serialize, Deserialize)]
struct JsonMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct JsonLayer {
    layer_index: usize,
    tokens: usize,
    positions: Vec<usize>,
    merged_counts: Vec<usize>,
    modality: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    queries: Option<Vec<JsonMatrix>>,
    keys: Vec<JsonMatrix>,
    values: Vec<JsonMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attention: Option<JsonMatrix>,
}

fn json_matrix(m: &Matrix) -> JsonMatrix {
    JsonMatrix {
        rows: m.rows(),
        cols: m.cols(),
        data: m.data().iter().map(|&x| x as f32).collect(),
    }
}

fn matrix_from_json(m: JsonMatrix) -> Result<Matrix> {
    if m.data.len() != m.rows * m.cols {
        return inconsistent(format!("{}x{} matrix with {} values", m.rows, m.cols, m.data.len()));
    }
    Matrix::from_vec(m.rows, m.cols, m.data.into_iter().map(f64::from).collect())
        .map_err(|_| TraceError::Malformed("non-finite tensor value".into()).into())
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| TraceError::Malformed(e.to_string()).into())
}

fn from_json<T: for<'de> Deserialize<'de>>(line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| {
        if e.is_eof() {
            TraceError::Truncated(e.to_string()).into()
        } else {
            TraceError::Malformed(e.to_string()).into()
        }
    })
}
