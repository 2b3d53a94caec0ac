//! Scalar reference implementations used as test oracles. Everything here is
//! written with plain nested vectors and explicit loops, independent of the
//! library's matrix code.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn draw(rows: usize, cols: usize, low: f64, high: f64, rng: &mut ChaCha8Rng) -> Rows {
    let mut out = vec![vec![0.0; cols]; rows];
    for r in 0..rows {
        for c in 0..cols {
            out[r][c] = rng.gen_range(low..high);
        }
    }
    out
}

pub fn embeddings(rows: usize, dim: usize, seed: u64) -> Rows {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw(rows, dim, -1.0, 1.0, &mut rng)
}

/// (W_Q, W_K, W_V) of one layer.
pub fn weights(seed: u64, layer: usize, dim: usize) -> (Rows, Rows, Rows) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64);
    let q = draw(dim, dim, -0.1, 0.1, &mut rng);
    let k = draw(dim, dim, -0.1, 0.1, &mut rng);
    let v = draw(dim, dim, -0.1, 0.1, &mut rng);
    (q, k, v)
}

pub fn project(x: &[f64], w: &Rows) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for c in 0..cols {
        let mut s = 0.0;
        for (j, xj) in x.iter().enumerate() {
            s += xj * w[j][c];
        }
        out[c] = s;
    }
    out
}

/// Softmax of `logits / div` with max subtraction.
pub fn softmax(logits: &[f64], div: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / div).collect();
    let mut max = f64::NEG_INFINITY;
    for &s in &scaled {
        if s > max {
            max = s;
        }
    }
    let mut e: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = e.iter().sum();
    for x in e.iter_mut() {
        *x /= total;
    }
    e
}

pub fn head_dot(a: &[f64], b: &[f64], h: usize, hd: usize) -> f64 {
    let mut s = 0.0;
    for i in h * hd..(h + 1) * hd {
        s += a[i] * b[i];
    }
    s
}

/// One layer of full-width Q, K, V rows plus per-head causal attention.
pub struct OracleLayer {
    pub q: Rows,
    pub k: Rows,
    pub v: Rows,
    pub attention: Vec<Rows>,
}

pub struct OracleEncoding {
    pub layers: Vec<OracleLayer>,
    pub last_hidden: Vec<f64>,
}

pub fn encode(x0: &Rows, seed: u64, num_layers: usize, heads: usize) -> OracleEncoding {
    let n = x0.len();
    let dim = x0[0].len();
    let hd = dim / heads;
    let div = (hd as f64).sqrt();
    let mut x = x0.clone();
    let mut layers = Vec::new();
    for l in 0..num_layers {
        let (wq, wk, wv) = weights(seed, l, dim);
        let q: Rows = x.iter().map(|r| project(r, &wq)).collect();
        let k: Rows = x.iter().map(|r| project(r, &wk)).collect();
        let v: Rows = x.iter().map(|r| project(r, &wv)).collect();
        let mut attention = Vec::new();
        let mut mixed = vec![vec![0.0; dim]; n];
        for h in 0..heads {
            let mut a = vec![vec![0.0; n]; n];
            for i in 0..n {
                let logits: Vec<f64> = (0..=i).map(|j| head_dot(&q[i], &k[j], h, hd)).collect();
                let p = softmax(&logits, div);
                for j in 0..=i {
                    a[i][j] = p[j];
                    for c in h * hd..(h + 1) * hd {
                        mixed[i][c] += p[j] * v[j][c];
                    }
                }
            }
            attention.push(a);
        }
        for i in 0..n {
            for c in 0..dim {
                x[i][c] += mixed[i][c];
            }
        }
        layers.push(OracleLayer { q, k, v, attention });
    }
    OracleEncoding {
        last_hidden: x[n - 1].clone(),
        layers,
    }
}

/// Per-layer cache as full-width key/value rows.
#[derive(Clone)]
pub struct OracleCache {
    pub k: Rows,
    pub v: Rows,
}

pub fn decode_step(token: &[f64], caches: &mut [OracleCache], seed: u64, heads: usize) -> Vec<f64> {
    let dim = token.len();
    let hd = dim / heads;
    let div = (hd as f64).sqrt();
    let mut x = token.to_vec();
    for (l, cache) in caches.iter_mut().enumerate() {
        let (wq, wk, wv) = weights(seed, l, dim);
        let q = project(&x, &wq);
        cache.k.push(project(&x, &wk));
        cache.v.push(project(&x, &wv));
        let mut out = vec![0.0; dim];
        for h in 0..heads {
            let logits: Vec<f64> = cache.k.iter().map(|k| head_dot(&q, k, h, hd)).collect();
            let p = softmax(&logits, div);
            for (j, pj) in p.iter().enumerate() {
                for c in h * hd..(h + 1) * hd {
                    out[c] += pj * cache.v[j][c];
                }
            }
        }
        for c in 0..dim {
            x[c] += out[c];
        }
    }
    x
}

/// Head-averaged matrices, each row renormalised.
pub fn head_average(per_head: &[Rows]) -> Rows {
    let rows = per_head[0].len();
    let cols = per_head[0][0].len();
    let mut out = vec![vec![0.0; cols]; rows];
    for m in per_head {
        for r in 0..rows {
            for c in 0..cols {
                out[r][c] += m[r][c] / per_head.len() as f64;
            }
        }
    }
    for row in out.iter_mut() {
        let s: f64 = row.iter().sum();
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    out
}

/// Head-averaged softmax of queries `qs` against keys `ks` (no mask).
pub fn cross_attention(q: &Rows, k: &Rows, qs: &[usize], ks: &[usize], heads: usize) -> Rows {
    let hd = q[0].len() / heads;
    let div = (hd as f64).sqrt();
    let per_head: Vec<Rows> = (0..heads)
        .map(|h| {
            qs.iter()
                .map(|&i| {
                    let logits: Vec<f64> = ks.iter().map(|&j| head_dot(&q[i], &k[j], h, hd)).collect();
                    softmax(&logits, div)
                })
                .collect()
        })
        .collect();
    head_average(&per_head)
}

pub fn mean_entropy(a: &Rows) -> f64 {
    let mut total = 0.0;
    for row in a {
        for &p in row {
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    total / a.len() as f64
}

pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Every `k`-subset of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Exhaustive selection: the last `recent` tokens plus the `important`-subset
/// of the rest with the largest summed score; among equal sums the
/// lexicographically smallest subset wins.
pub fn brute_force_select(scores: &[f64], recent: usize, important: usize) -> Vec<usize> {
    let n = scores.len();
    if recent + important >= n {
        return (0..n).collect();
    }
    let pool = n - recent;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for s in subsets(pool, important) {
        let total: f64 = s.iter().map(|&i| scores[i]).sum();
        let better = match &best {
            None => true,
            Some((b, _)) => total > *b + 1e-9,
        };
        if better {
            best = Some((total, s));
        }
    }
    let mut keep = best.map(|b| b.1).unwrap_or_default();
    keep.extend(pool..n);
    keep
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

pub fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
