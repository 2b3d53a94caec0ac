//! Synthetic multimodal prompts.
//!
//! Text and vision tokens are drawn around two modality centroids with
//! uniform noise. Optional needle tokens are vision tokens pushed along a
//! direction that both text and vision queries score highly against, so
//! they collect concentrated attention. How strongly a needle stands out in
//! a given layer follows a linear ramp over depth (`needle_ramp`), which
//! gives layers with diffuse attention early and focused attention late.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::Modality;
use crate::model::{Model, PromptSequence};
use crate::numerics::{matmul, norm, Matrix};

/// Ordered blocks of same-modality tokens, e.g. `t2,v240,t14`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Layout {
    blocks: Vec<(Modality, usize)>,
}

impl Layout {
    pub fn new(blocks: Vec<(Modality, usize)>) -> Result<Self> {
        if blocks.iter().all(|&(_, n)| n == 0) {
            return Err(Error::Config("layout has no tokens".into()));
        }
        Ok(Self { blocks })
    }

    /// A short text prefix, a vision block, then a text question
    /// (`question` tokens) at the end.
    pub fn question_after_image(prompt_len: usize, prefix: usize, question: usize) -> Result<Self> {
        if prefix + question > prompt_len {
            return Err(Error::Config(format!(
                "{prefix} prefix and {question} question tokens exceed a prompt of {prompt_len}"
            )));
        }
        Self::new(vec![
            (Modality::Text, prefix),
            (Modality::Vision, prompt_len - prefix - question),
            (Modality::Text, question),
        ])
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|&(_, n)| n).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tags(&self) -> Vec<Modality> {
        self.blocks
            .iter()
            .flat_map(|&(m, n)| std::iter::repeat_n(m, n))
            .collect()
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .blocks
            .iter()
            .map(|&(m, n)| format!("{}{n}", m.as_char().to_ascii_lowercase()))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let blocks = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| {
                let mut chars = p.chars();
                let m = chars
                    .next()
                    .and_then(Modality::from_char)
                    .ok_or_else(|| Error::Config(format!("bad layout block `{p}`")))?;
                let n = chars
                    .as_str()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad layout block `{p}`")))?;
                Ok((m, n))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(blocks)
    }
}

impl TryFrom<String> for Layout {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Layout> for String {
    fn from(l: Layout) -> String {
        l.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub seed: u64,
    pub layout: Layout,
    /// Number of vision tokens turned into needles.
    pub needles: usize,
    /// Distance of each modality centroid from the origin.
    pub centroid_norm: f64,
    /// Half-width of the per-coordinate uniform noise.
    pub noise: f64,
    /// Length of the needle offset.
    pub needle_strength: f64,
    /// Relative needle salience at the first and last layer.
    pub needle_ramp: (f64, f64),
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            layout: Layout::question_after_image(256, 0, 8).expect("valid default layout"),
            needles: 0,
            centroid_norm: 8.0,
            noise: 1.0,
            needle_strength: 30.0,
            needle_ramp: (0.25, 1.0),
        }
    }
}

/// A generated prompt plus the positions of its needles (ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub prompt: PromptSequence,
    pub needles: Vec<usize>,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Direction in embedding space that raises the scores of queries built from
/// `query_dirs` in every layer, each layer's contribution weighted by the ramp.
fn needle_direction(model: &Model, query_dirs: &[&[f64]], ramp: (f64, f64)) -> Result<Vec<f64>> {
    let cfg = model.config();
    let d = cfg.model_dim;
    let hd = cfg.head_dim();
    let layers = cfg.num_layers;
    let mut dir = vec![0.0; d];
    for (l, w) in model.weights().iter().enumerate() {
        let weight = if layers == 1 {
            ramp.1
        } else {
            ramp.0 + (ramp.1 - ramp.0) * l as f64 / (layers - 1) as f64
        };
        for &u in query_dirs {
            let q = matmul(&Matrix::from_vec(1, d, u.to_vec())?, &w.w_q)?;
            // key-side direction: sum over heads of W_K^h q_h
            let mut g = vec![0.0; d];
            for h in 0..cfg.num_heads {
                let qh = &q.row(0)[h * hd..(h + 1) * hd];
                for (r, gr) in g.iter_mut().enumerate() {
                    let krow = &w.w_k.row(r)[h * hd..(h + 1) * hd];
                    *gr += krow.iter().zip(qh).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            let gn = norm(&g);
            if gn > 0.0 {
                dir.iter_mut().zip(&g).for_each(|(a, b)| *a += weight * b / gn);
            }
        }
    }
    let n = norm(&dir);
    if n == 0.0 {
        return Err(Error::Config("needle direction vanished".into()));
    }
    Ok(dir.into_iter().map(|x| x / n).collect())
}

/// Deterministic prompt for `spec` under `model`'s weights.
pub fn generate_workload(spec: &WorkloadSpec, model: &Model) -> Result<Workload> {
    let tags = spec.layout.tags();
    let d = model.config().model_dim;
    let vision: Vec<usize> = tags
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == Modality::Vision)
        .map(|(i, _)| i)
        .collect();
    if spec.needles > vision.len() {
        return Err(Error::Config(format!(
            "{} needles requested but only {} vision tokens",
            spec.needles,
            vision.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let text_dir = unit_vector(d, &mut rng);
    let vision_dir = unit_vector(d, &mut rng);

    let mut emb = Matrix::zeros(tags.len(), d);
    for (i, &m) in tags.iter().enumerate() {
        let centre = match m {
            Modality::Text => &text_dir,
            Modality::Vision => &vision_dir,
        };
        for (x, c) in emb.row_mut(i).iter_mut().zip(centre) {
            *x = spec.centroid_norm * c + rng.gen_range(-spec.noise..=spec.noise);
        }
    }

    // needles avoid the first and last few vision tokens
    let mut needles = Vec::with_capacity(spec.needles);
    if spec.needles > 0 {
        let margin = (vision.len() / 8).min((vision.len() - spec.needles) / 2);
        let pool = &vision[margin..vision.len() - margin];
        needles = sample(&mut rng, pool.len(), spec.needles)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        needles.sort_unstable();
        let dir = needle_direction(model, &[&text_dir, &vision_dir], spec.needle_ramp)?;
        for &n in &needles {
            for (x, v) in emb.row_mut(n).iter_mut().zip(&dir) {
                *x += spec.needle_strength * v;
            }
        }
    }
    Ok(Workload {
        prompt: PromptSequence::new(emb, tags)?,
        needles,
    })
}
