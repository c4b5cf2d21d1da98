//! Visual prompts: synthesis from annotations, box-restricted encoding,
//! batch aggregation and top-K negative selection.
//!
//! A prompt box is read through a `G×G` grid of bilinear samples per pyramid
//! level. Sample coordinates are clamped to the cells that overlap the box
//! interior, so nothing outside the box reaches the embedding.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataengine::{DatasetManifest, Scene, Split};
use crate::error::{Error, Result};
use crate::geometry::{jitter_box, BBox, JitterSpec};
use crate::numcore::{GradTape, ParamSet, Tensor, Var};
use crate::rng::Rng;

/// Smallest prompt side, in cells of the coarsest level.
pub const MIN_EXTENT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualPrompt {
    pub category_id: u32,
    pub bbox: BBox,
    pub polarity: Polarity,
    pub source_image_id: u64,
}

/// Multi-scale features of one image; level `j` has stride `strides[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    /// `C×H_j×W_j` per level.
    pub levels: Vec<Tensor>,
    pub strides: Vec<usize>,
    pub width: usize,
    pub height: usize,
}

/// A pyramid already on a tape.
#[derive(Clone, Debug)]
pub struct PyramidVars {
    pub levels: Vec<Var>,
    pub strides: Vec<usize>,
    pub width: usize,
    pub height: usize,
}

impl PyramidVars {
    pub fn from_pyramid(tape: &mut GradTape, p: &FeaturePyramid) -> Self {
        PyramidVars {
            levels: p.levels.iter().map(|l| tape.constant(l.clone())).collect(),
            strides: p.strides.clone(),
            width: p.width,
            height: p.height,
        }
    }

    pub fn to_pyramid(&self, tape: &GradTape) -> FeaturePyramid {
        FeaturePyramid {
            levels: self.levels.iter().map(|v| tape.value(*v).clone()).collect(),
            strides: self.strides.clone(),
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEncoderConfig {
    /// Embedding width `D`.
    pub dim: usize,
    /// Pyramid channel count `C`.
    pub channels: usize,
    /// Negative queries `K`.
    pub k: usize,
    /// Sampling grid side `G`.
    pub grid: usize,
    pub levels: usize,
    pub ffn_hidden: usize,
}

impl Default for PromptEncoderConfig {
    fn default() -> Self {
        PromptEncoderConfig {
            dim: 64,
            channels: 32,
            k: 3,
            grid: 4,
            levels: 3,
            ffn_hidden: 128,
        }
    }
}

impl PromptEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0
            || self.channels == 0
            || self.k == 0
            || self.grid == 0
            || self.levels == 0
            || self.ffn_hidden == 0
        {
            return Err(Error::Invalid(format!("prompt encoder config {self:?}")));
        }
        Ok(())
    }
}

/// Adds every `prompt.*` tensor to `params`.
pub fn init_prompt_params(
    cfg: &PromptEncoderConfig,
    params: &mut ParamSet,
    rng: &mut Rng,
) -> Result<()> {
    cfg.validate()?;
    let (d, c, h) = (cfg.dim, cfg.channels, cfg.ffn_hidden);
    params.init_uniform("prompt.q_pos", &[1, d], 1.0, rng);
    params.init_uniform("prompt.q_neg", &[cfg.k, d], 1.0, rng);
    params.init_glorot("prompt.w_q", d, d, rng);
    params.init_glorot("prompt.w_k", c, d, rng);
    params.init_glorot("prompt.w_v", c, d, rng);
    params.init_glorot("prompt.w_o", d, d, rng);
    for name in ["prompt.sa_q", "prompt.sa_k", "prompt.sa_v", "prompt.sa_o"] {
        params.init_glorot(name, d, d, rng);
    }
    params.init_glorot("prompt.ff1", d, h, rng);
    params.init_filled("prompt.ff1.b", &[h], 0.0);
    params.init_glorot("prompt.ff2", h, d, rng);
    params.init_filled("prompt.ff2.b", &[d], 0.0);
    for ln in ["prompt.ln1", "prompt.ln2"] {
        params.init_filled(&format!("{ln}.g"), &[d], 1.0);
        params.init_filled(&format!("{ln}.b"), &[d], 0.0);
    }
    Ok(())
}

/// One positive from mild jitter of a uniformly drawn ground-truth box of
/// `category`, and `k` negatives from strong jitters of that same box.
pub fn generate_training_prompts(
    scene: &Scene,
    category: u32,
    pos_spec: &JitterSpec,
    neg_spec: &JitterSpec,
    k: usize,
    rng: &mut Rng,
) -> Result<(VisualPrompt, Vec<VisualPrompt>)> {
    let boxes = scene.boxes_of(category);
    if boxes.is_empty() {
        return Err(Error::MissingCategory(category));
    }
    let g = boxes[rng.gen_range(0..boxes.len())];
    let (w, h) = (scene.width as f64, scene.height as f64);
    let prompt = |bbox, polarity| VisualPrompt {
        category_id: category,
        bbox,
        polarity,
        source_image_id: scene.image_id,
    };
    let positive = prompt(jitter_box(&g, pos_spec, w, h, rng)?, Polarity::Positive);
    let negatives = (0..k)
        .map(|_| {
            Ok(prompt(
                jitter_box(&g, neg_spec, w, h, rng)?,
                Polarity::Negative,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((positive, negatives))
}

/// Sample coordinates of `bbox` on one level, clamped to cells overlapping the box interior.
pub fn prompt_sample_points(
    bbox: &BBox,
    level_h: usize,
    level_w: usize,
    stride: usize,
    grid: usize,
) -> Vec<(f64, f64)> {
    let s = stride as f64;
    let span = |lo: f64, len: f64, n: usize| {
        let first = (lo / s).floor().max(0.0);
        let last = (((lo + len) / s).ceil() - 1.0)
            .min((n - 1) as f64)
            .max(first);
        (first, last)
    };
    let (x_lo, x_hi) = span(bbox.x, bbox.w, level_w);
    let (y_lo, y_hi) = span(bbox.y, bbox.h, level_h);
    let mut out = Vec::with_capacity(grid * grid);
    for j in 0..grid {
        for i in 0..grid {
            let px = bbox.x + (i as f64 + 0.5) / grid as f64 * bbox.w;
            let py = bbox.y + (j as f64 + 0.5) / grid as f64 * bbox.h;
            out.push((
                (px / s - 0.5).clamp(x_lo, x_hi),
                (py / s - 0.5).clamp(y_lo, y_hi),
            ));
        }
    }
    out
}

fn check_prompt_box(bbox: &BBox, pyramid: &PyramidVars) -> Result<()> {
    bbox.validate().map_err(|e| Error::Encode(e.to_string()))?;
    if !bbox.inside(pyramid.width as f64, pyramid.height as f64) {
        return Err(Error::Encode(format!(
            "box {bbox:?} outside {}×{} image",
            pyramid.width, pyramid.height
        )));
    }
    let coarsest = *pyramid.strides.iter().max().unwrap_or(&1) as f64;
    if bbox.w / coarsest < MIN_EXTENT || bbox.h / coarsest < MIN_EXTENT {
        return Err(Error::Encode(format!(
            "box {bbox:?} collapses on the coarsest level"
        )));
    }
    Ok(())
}

/// Grid samples of `bbox` across all levels, `(L·G²)×C`.
fn sample_box(tape: &mut GradTape, pyramid: &PyramidVars, bbox: &BBox, grid: usize) -> Result<Var> {
    let mut parts = Vec::with_capacity(pyramid.levels.len());
    for (l, &fm) in pyramid.levels.iter().enumerate() {
        let (h, w) = {
            let d = tape.value(fm).dims();
            (d[1], d[2])
        };
        let pts = prompt_sample_points(bbox, h, w, pyramid.strides[l], grid);
        parts.push(tape.bilinear_sample(fm, &pts)?);
    }
    tape.concat_rows(&parts)
}

fn param(tape: &mut GradTape, params: &ParamSet, name: &str) -> Result<Var> {
    params.var(tape, name)
}

/// Encodes a group of boxes that share one self-attention step; `queries` holds one row per box.
fn encode_group(
    tape: &mut GradTape,
    params: &ParamSet,
    cfg: &PromptEncoderConfig,
    pyramid: &PyramidVars,
    boxes: &[BBox],
    queries: Var,
) -> Result<Var> {
    let scale = 1.0 / (cfg.dim as f64).sqrt();
    let w_q = param(tape, params, "prompt.w_q")?;
    let w_k = param(tape, params, "prompt.w_k")?;
    let w_v = param(tape, params, "prompt.w_v")?;
    let w_o = param(tape, params, "prompt.w_o")?;
    let qw = tape.matmul(queries, w_q)?;
    let mut rows = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        let samples = sample_box(tape, pyramid, b, cfg.grid)?;
        let k = tape.matmul(samples, w_k)?;
        let v = tape.matmul(samples, w_v)?;
        let q = tape.gather_rows(qw, &[i])?;
        let logits = tape.matmul_bt(q, k)?;
        let logits = tape.scale(logits, scale)?;
        let attn = tape.softmax_rows(logits)?;
        let pooled = tape.matmul(attn, v)?;
        rows.push(tape.matmul(pooled, w_o)?);
    }
    let x = tape.concat_rows(&rows)?;

    let sa_q = param(tape, params, "prompt.sa_q")?;
    let sa_k = param(tape, params, "prompt.sa_k")?;
    let sa_v = param(tape, params, "prompt.sa_v")?;
    let sa_o = param(tape, params, "prompt.sa_o")?;
    let q = tape.matmul(x, sa_q)?;
    let k = tape.matmul(x, sa_k)?;
    let v = tape.matmul(x, sa_v)?;
    let logits = tape.matmul_bt(q, k)?;
    let logits = tape.scale(logits, scale)?;
    let attn = tape.softmax_rows(logits)?;
    let mixed = tape.matmul(attn, v)?;
    let mixed = tape.matmul(mixed, sa_o)?;
    let x = tape.add(x, mixed)?;
    let (g1, b1) = (
        param(tape, params, "prompt.ln1.g")?,
        param(tape, params, "prompt.ln1.b")?,
    );
    let x = tape.layer_norm(x, g1, b1)?;

    let ff1 = param(tape, params, "prompt.ff1")?;
    let ff1_b = param(tape, params, "prompt.ff1.b")?;
    let ff2 = param(tape, params, "prompt.ff2")?;
    let ff2_b = param(tape, params, "prompt.ff2.b")?;
    let hdn = tape.matmul(x, ff1)?;
    let hdn = tape.add_row(hdn, ff1_b)?;
    let hdn = tape.silu(hdn)?;
    let f = tape.matmul(hdn, ff2)?;
    let f = tape.add_row(f, ff2_b)?;
    let x = tape.add(x, f)?;
    let (g2, b2) = (
        param(tape, params, "prompt.ln2.g")?,
        param(tape, params, "prompt.ln2.b")?,
    );
    tape.layer_norm(x, g2, b2)
}

/// Embeds boxes of one polarity, one row each (not normalized).
///
/// Positives are encoded one at a time with `Q_P`. Negatives go in groups of
/// `K`, box `i` of a group reading query row `i` of `Q_N`.
pub fn encode_prompts(
    tape: &mut GradTape,
    params: &ParamSet,
    cfg: &PromptEncoderConfig,
    pyramid: &PyramidVars,
    boxes: &[BBox],
    polarity: Polarity,
) -> Result<Var> {
    if boxes.is_empty() {
        return Err(Error::Count {
            needed: 1,
            available: 0,
        });
    }
    if pyramid.levels.len() != cfg.levels || pyramid.strides.len() != cfg.levels {
        return Err(Error::Shape(format!(
            "pyramid has {} levels, encoder expects {}",
            pyramid.levels.len(),
            cfg.levels
        )));
    }
    for b in boxes {
        check_prompt_box(b, pyramid)?;
    }
    let mut rows = Vec::new();
    match polarity {
        Polarity::Positive => {
            let q = param(tape, params, "prompt.q_pos")?;
            for b in boxes {
                rows.push(encode_group(
                    tape,
                    params,
                    cfg,
                    pyramid,
                    std::slice::from_ref(b),
                    q,
                )?);
            }
        }
        Polarity::Negative => {
            let q_all = param(tape, params, "prompt.q_neg")?;
            for chunk in boxes.chunks(cfg.k) {
                let idx: Vec<usize> = (0..chunk.len()).collect();
                let q = tape.gather_rows(q_all, &idx)?;
                rows.push(encode_group(tape, params, cfg, pyramid, chunk, q)?);
            }
        }
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        tape.concat_rows(&rows)
    }
}

/// Encodes one prompt against a fixed pyramid; returns a `D` vector.
pub fn encode_prompt(
    prompt: &VisualPrompt,
    pyramid: &FeaturePyramid,
    params: &ParamSet,
    cfg: &PromptEncoderConfig,
) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let pv = PyramidVars::from_pyramid(&mut tape, pyramid);
    let v = encode_prompts(&mut tape, params, cfg, &pv, &[prompt.bbox], prompt.polarity)?;
    tape.value(v).reshape(&[cfg.dim])
}

/// Mean of the rows, renormalized to unit length, on the tape.
pub fn aggregate_positives_on(tape: &mut GradTape, rows: &[Var]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::Count {
            needed: 1,
            available: 0,
        });
    }
    let all = if rows.len() == 1 {
        rows[0]
    } else {
        tape.concat_rows(rows)?
    };
    let mean = tape.mean_rows(all)?;
    tape.normalize_rows(mean)
}

/// Per-category mean of batch embeddings, renormalized; one `1×D` or `D` tensor per image.
pub fn aggregate_positives(embeddings: &[Tensor]) -> Result<Tensor> {
    let first = embeddings.first().ok_or(Error::Count {
        needed: 1,
        available: 0,
    })?;
    let d = first.len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Shape("embeddings differ in width".into()));
    }
    let mut tape = GradTape::new();
    let rows: Vec<Var> = embeddings
        .iter()
        .map(|e| Ok(tape.constant(e.reshape(&[1, d])?)))
        .collect::<Result<_>>()?;
    let out = aggregate_positives_on(&mut tape, &rows)?;
    tape.value(out).reshape(&[d])
}

/// Indices of the `k` candidates most similar to `anchor` by dot product,
/// ties to the lower index, returned in ascending index order.
pub fn select_topk_negatives(candidates: &Tensor, anchor: &[f64], k: usize) -> Result<Vec<usize>> {
    if candidates.dims().len() != 2 || candidates.cols() != anchor.len() {
        return Err(Error::Shape(format!(
            "candidates {:?} against a {}-wide anchor",
            candidates.dims(),
            anchor.len()
        )));
    }
    let n = candidates.rows();
    if n < k {
        return Err(Error::Count {
            needed: k,
            available: n,
        });
    }
    let sims: Vec<f64> = (0..n)
        .map(|i| {
            candidates
                .row(i)
                .iter()
                .zip(anchor)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    Ok(top)
}

/// Normalizes candidate rows and keeps the top `k` against the anchor row `anchor` (`1×D`).
pub fn select_negatives_on(
    tape: &mut GradTape,
    candidates: Var,
    anchor: Var,
    k: usize,
) -> Result<Var> {
    let normed = tape.normalize_rows(candidates)?;
    let anchor_row = tape.value(anchor).data().to_vec();
    let idx = select_topk_negatives(tape.value(normed), &anchor_row, k)?;
    tape.gather_rows(normed, &idx)
}

/// Fixed evaluation prompts of one category.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryPrompt {
    pub category_id: u32,
    /// Unit `D` vector.
    pub positive: Tensor,
    /// `K×D`, unit rows.
    pub negatives: Tensor,
}

/// Draws `n` training images holding `category` (with replacement when fewer
/// exist), takes one ground-truth box per image as the positive and `k` strong
/// jitters of it as negative candidates, averages the positives and keeps the
/// top `k` negatives.
#[allow(clippy::too_many_arguments)]
pub fn build_visualg_prompts(
    manifest: &DatasetManifest,
    category: u32,
    n: usize,
    k: usize,
    neg_spec: &JitterSpec,
    params: &ParamSet,
    cfg: &PromptEncoderConfig,
    pyramid_of: &mut dyn FnMut(&Scene) -> Result<FeaturePyramid>,
    rng: &mut Rng,
) -> Result<CategoryPrompt> {
    if n == 0 || k == 0 {
        return Err(Error::Invalid(format!("visual prompt counts n={n}, k={k}")));
    }
    let pool: Vec<&Scene> = manifest
        .split_scenes(Split::Train)
        .filter(|s| s.count(category) > 0)
        .collect();
    if pool.is_empty() {
        return Err(Error::MissingCategory(category));
    }
    let picks: Vec<&Scene> = if pool.len() >= n {
        pool.choose_multiple(rng, n).copied().collect()
    } else {
        (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    };
    let mut tape = GradTape::new();
    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    for scene in picks {
        let boxes = scene.boxes_of(category);
        let g = boxes[rng.gen_range(0..boxes.len())];
        let (w, h) = (scene.width as f64, scene.height as f64);
        let neg_boxes = (0..k)
            .map(|_| jitter_box(&g, neg_spec, w, h, rng))
            .collect::<Result<Vec<_>>>()?;
        let pyramid = pyramid_of(scene)?;
        let pv = PyramidVars::from_pyramid(&mut tape, &pyramid);
        positives.push(encode_prompts(
            &mut tape,
            params,
            cfg,
            &pv,
            &[g],
            Polarity::Positive,
        )?);
        negatives.push(encode_prompts(
            &mut tape,
            params,
            cfg,
            &pv,
            &neg_boxes,
            Polarity::Negative,
        )?);
    }
    let anchor = aggregate_positives_on(&mut tape, &positives)?;
    let candidates = tape.concat_rows(&negatives)?;
    let negs = select_negatives_on(&mut tape, candidates, anchor, k)?;
    Ok(CategoryPrompt {
        category_id: category,
        positive: tape.value(anchor).reshape(&[cfg.dim])?,
        negatives: tape.value(negs).clone(),
    })
}

pub const BANK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankRow {
    pub category_id: u32,
    pub polarity: Polarity,
    pub vector: Vec<f64>,
}

/// Stored prompt embeddings, one row per vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub version: u32,
    pub dim: usize,
    pub rows: Vec<BankRow>,
}

impl PromptBank {
    pub fn from_prompts(prompts: &[CategoryPrompt]) -> Result<Self> {
        let dim = prompts.first().map_or(0, |p| p.positive.len());
        let mut rows = Vec::new();
        for p in prompts {
            if p.positive.len() != dim || (!p.negatives.is_empty() && p.negatives.cols() != dim) {
                return Err(Error::Shape(format!(
                    "category {} prompt width",
                    p.category_id
                )));
            }
            rows.push(BankRow {
                category_id: p.category_id,
                polarity: Polarity::Positive,
                vector: p.positive.data().to_vec(),
            });
            for r in 0..p.negatives.rows() {
                rows.push(BankRow {
                    category_id: p.category_id,
                    polarity: Polarity::Negative,
                    vector: p.negatives.row(r).to_vec(),
                });
            }
        }
        Ok(PromptBank {
            version: BANK_VERSION,
            dim,
            rows,
        })
    }

    /// Regroups rows by category, in order of first appearance.
    pub fn to_prompts(&self) -> Result<Vec<CategoryPrompt>> {
        let mut order: Vec<u32> = Vec::new();
        for r in &self.rows {
            if r.vector.len() != self.dim {
                return Err(Error::Shape(format!(
                    "bank row of width {} in a {}-wide bank",
                    r.vector.len(),
                    self.dim
                )));
            }
            if !order.contains(&r.category_id) {
                order.push(r.category_id);
            }
        }
        order
            .into_iter()
            .map(|c| {
                let pos: Vec<&BankRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.category_id == c && r.polarity == Polarity::Positive)
                    .collect();
                let [p] = pos.as_slice() else {
                    return Err(Error::Invalid(format!(
                        "category {c} needs exactly one positive row"
                    )));
                };
                let negs: Vec<Vec<f64>> = self
                    .rows
                    .iter()
                    .filter(|r| r.category_id == c && r.polarity == Polarity::Negative)
                    .map(|r| r.vector.clone())
                    .collect();
                let negatives = if negs.is_empty() {
                    Tensor::zeros(&[0, self.dim])
                } else {
                    Tensor::from_rows(&negs)?
                };
                Ok(CategoryPrompt {
                    category_id: c,
                    positive: Tensor::new(vec![self.dim], p.vector.clone())?,
                    negatives,
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bank: PromptBank = serde_json::from_slice(&bytes)?;
        if bank.version != BANK_VERSION {
            return Err(Error::Invalid(format!(
                "prompt bank version {}",
                bank.version
            )));
        }
        Ok(bank)
    }
}
