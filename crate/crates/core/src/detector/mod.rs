//! Toy query-based detector.
//!
//! A strided-conv pyramid feeds a shallow decoder. Each decoder layer runs
//! self-attention over the queries, cross-attention over the flattened
//! coarser pyramid cells, a grid read of every query's current box, an FFN
//! and a box refinement head. Query class embeddings are compared with prompt
//! embeddings to score categories.

mod checkpoint;
mod infer;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{GradTape, ParamSet, Tensor, Var};
use crate::prompt::{init_prompt_params, PromptEncoderConfig, PyramidVars};
use crate::rng::Rng;

pub use crate::prompt::FeaturePyramid;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting,
    model_version, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use infer::{
    build_eval_prompts, detect_scene, image_features, prompt_set, prompts_from_boxes, run_detector,
    DetectorOutput,
};
pub use train::{
    forward_train, train, AdamW, StepDiagnostics, StepRecord, TrainConfig, TrainOutcome,
    BACKBONE_PREFIX,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Pyramid channels `C`.
    pub channels: usize,
    /// Embedding width `D`, shared by queries and prompts.
    pub dim: usize,
    pub levels: usize,
    pub num_queries: usize,
    pub decoder_layers: usize,
    /// Grid side for prompt and query box reads.
    pub grid: usize,
    /// Negative prompts per category `K`.
    pub k: usize,
    pub ffn_hidden: usize,
    /// First pyramid level the decoder cross-attends to.
    pub memory_level: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_size: 64,
            in_channels: 3,
            channels: 32,
            dim: 64,
            levels: 3,
            num_queries: 20,
            decoder_layers: 2,
            grid: 4,
            k: 3,
            ffn_hidden: 128,
            memory_level: 1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.in_channels,
            self.channels,
            self.dim,
            self.levels,
            self.num_queries,
            self.decoder_layers,
            self.grid,
            self.k,
            self.ffn_hidden,
        ];
        if positive.contains(&0) {
            return Err(Error::Invalid(format!("detector config {self:?}")));
        }
        if self.memory_level >= self.levels {
            return Err(Error::Invalid(format!(
                "memory level {} with {} levels",
                self.memory_level, self.levels
            )));
        }
        if !self.image_size.is_multiple_of(1 << self.levels) {
            return Err(Error::Invalid(format!(
                "image size {} not divisible by {}",
                self.image_size,
                1 << self.levels
            )));
        }
        if !self.dim.is_multiple_of(4) {
            return Err(Error::Invalid(format!(
                "dim {} must be a multiple of 4",
                self.dim
            )));
        }
        Ok(())
    }

    pub fn strides(&self) -> Vec<usize> {
        (0..self.levels).map(|l| 2 << l).collect()
    }

    pub fn prompt_config(&self) -> PromptEncoderConfig {
        PromptEncoderConfig {
            dim: self.dim,
            channels: self.channels,
            k: self.k,
            grid: self.grid,
            levels: self.levels,
            ffn_hidden: self.ffn_hidden,
        }
    }

    /// Cells in the decoder memory.
    pub fn memory_cells(&self) -> usize {
        (self.memory_level..self.levels)
            .map(|l| {
                let n = self.image_size >> (l + 1);
                n * n
            })
            .sum()
    }
}

/// Named tensors plus the configuration they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: DetectorConfig,
    pub params: ParamSet,
}

impl ModelParams {
    pub fn init(config: DetectorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let (c, d, h) = (config.channels, config.dim, config.ffn_hidden);
        let mut cin = config.in_channels;
        for l in 0..config.levels {
            let bound = (6.0 / ((cin + c) * 9) as f64).sqrt();
            p.init_uniform(&format!("backbone.conv{l}.w"), &[c, cin, 3, 3], bound, rng);
            p.init_filled(&format!("backbone.conv{l}.b"), &[c], 0.0);
            cin = c;
        }
        p.init_glorot("decoder.mem", c, d, rng);
        p.init_uniform("decoder.level_emb", &[config.levels, d], 0.1, rng);
        p.init_uniform("decoder.query", &[config.num_queries, d], 1.0, rng);
        // reference boxes start spread over the image at a fixed small size
        let mut refs = Vec::with_capacity(config.num_queries * 4);
        let logit = |v: f64| (v / (1.0 - v)).ln();
        for _ in 0..config.num_queries {
            use rand::Rng as _;
            refs.push(logit(rng.gen_range(0.1..0.9)));
            refs.push(logit(rng.gen_range(0.1..0.9)));
            refs.push(logit(0.2));
            refs.push(logit(0.2));
        }
        p.insert(
            "decoder.ref",
            Tensor::new(vec![config.num_queries, 4], refs)?,
        );
        let g2c = config.grid * config.grid * c;
        for t in 0..config.decoder_layers {
            let n = |s: &str| format!("decoder.{t}.{s}");
            for s in [
                "sa_q", "sa_k", "sa_v", "sa_o", "ca_q", "ca_k", "ca_v", "ca_o",
            ] {
                p.init_glorot(&n(s), d, d, rng);
            }
            p.init_glorot(&n("box_pos"), 4, d, rng);
            for l in 0..config.levels {
                p.init_glorot(&n(&format!("roi{l}")), g2c, d, rng);
            }
            p.init_glorot(&n("ff1"), d, h, rng);
            p.init_filled(&n("ff1.b"), &[h], 0.0);
            p.init_glorot(&n("ff2"), h, d, rng);
            p.init_filled(&n("ff2.b"), &[d], 0.0);
            for ln in ["ln1", "ln2", "ln3", "ln4"] {
                p.init_filled(&n(&format!("{ln}.g")), &[d], 1.0);
                p.init_filled(&n(&format!("{ln}.b")), &[d], 0.0);
            }
            p.init_glorot(&n("box1"), d, d, rng);
            p.init_filled(&n("box1.b"), &[d], 0.0);
            p.init_uniform(&n("box2"), &[d, 4], 1e-3, rng);
            p.init_filled(&n("box2.b"), &[4], 0.0);
        }
        p.init_glorot("head.cls", d, d, rng);
        init_prompt_params(&config.prompt_config(), &mut p, rng)?;
        Ok(ModelParams { config, params: p })
    }

    pub fn var(&self, tape: &mut GradTape, name: &str) -> Result<Var> {
        self.params.var(tape, name)
    }
}

/// Pyramid of one image on the tape.
pub fn encode_image(
    tape: &mut GradTape,
    model: &ModelParams,
    pixels: &Tensor,
) -> Result<PyramidVars> {
    let cfg = &model.config;
    let expected = [cfg.in_channels, cfg.image_size, cfg.image_size];
    if pixels.dims() != expected {
        return Err(Error::Shape(format!(
            "pixels {:?}, expected {expected:?}",
            pixels.dims()
        )));
    }
    let mut x = tape.constant(pixels.clone());
    let mut levels = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        let w = model.var(tape, &format!("backbone.conv{l}.w"))?;
        let b = model.var(tape, &format!("backbone.conv{l}.b"))?;
        let y = tape.conv2d(x, w, b, 2, 1)?;
        x = tape.silu(y)?;
        levels.push(x);
    }
    Ok(PyramidVars {
        levels,
        strides: cfg.strides(),
        width: cfg.image_size,
        height: cfg.image_size,
    })
}

/// Sinusoidal encoding of cell centers, `cells×D`; a quarter of the channels each for sin x, cos x, sin y, cos y.
pub fn positional_encoding(h: usize, w: usize, dim: usize) -> Tensor {
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let mut row = vec![0.0; dim];
            for i in 0..quarter {
                let freq = std::f64::consts::PI * 2f64.powf(i as f64 * 4.0 / quarter as f64);
                row[i] = (u * freq).sin();
                row[quarter + i] = (u * freq).cos();
                row[2 * quarter + i] = (v * freq).sin();
                row[3 * quarter + i] = (v * freq).cos();
            }
            out.extend(row);
        }
    }
    Tensor::new(vec![h * w, dim], out).expect("sized by construction")
}

/// Decoder outputs of one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    /// `N_q×D` class embeddings.
    pub embed: Var,
    /// `N_q×4` normalized `(cx, cy, w, h)`.
    pub boxes: Var,
}

/// Flattened memory cells: keys carry positional and level encodings, values do not.
pub struct Memory {
    pub keys: Var,
    pub values: Var,
    /// Cell order used for `keys`/`values`, as `(level, cell)`.
    pub cells: Vec<(usize, usize)>,
}

pub fn build_memory(
    tape: &mut GradTape,
    model: &ModelParams,
    pyramid: &PyramidVars,
) -> Result<Memory> {
    let cfg = &model.config;
    let mut parts = Vec::new();
    let mut pos_rows = Vec::new();
    let mut level_idx = Vec::new();
    let mut cells = Vec::new();
    for l in cfg.memory_level..cfg.levels {
        let fm = pyramid.levels[l];
        let (h, w) = {
            let d = tape.value(fm).dims();
            (d[1], d[2])
        };
        parts.push(tape.cells(fm)?);
        pos_rows.extend_from_slice(positional_encoding(h, w, cfg.dim).data());
        level_idx.extend(std::iter::repeat_n(l, h * w));
        cells.extend((0..h * w).map(|c| (l, c)));
    }
    let flat = tape.concat_rows(&parts)?;
    let w_mem = model.var(tape, "decoder.mem")?;
    let values = tape.matmul(flat, w_mem)?;
    let pos = tape.constant(Tensor::new(vec![cells.len(), cfg.dim], pos_rows)?);
    let lvl = model.var(tape, "decoder.level_emb")?;
    let lvl = tape.gather_rows(lvl, &level_idx)?;
    let keys = tape.add(values, pos)?;
    let keys = tape.add(keys, lvl)?;
    Ok(Memory {
        keys,
        values,
        cells,
    })
}

fn attention(tape: &mut GradTape, q: Var, k: Var, v: Var, dim: usize) -> Result<Var> {
    let logits = tape.matmul_bt(q, k)?;
    let logits = tape.scale(logits, 1.0 / (dim as f64).sqrt())?;
    let a = tape.softmax_rows(logits)?;
    tape.matmul(a, v)
}

fn layer_norm(tape: &mut GradTape, model: &ModelParams, x: Var, name: &str) -> Result<Var> {
    let g = model.var(tape, &format!("{name}.g"))?;
    let b = model.var(tape, &format!("{name}.b"))?;
    tape.layer_norm(x, g, b)
}

fn linear(tape: &mut GradTape, model: &ModelParams, x: Var, name: &str) -> Result<Var> {
    let w = model.var(tape, name)?;
    let y = tape.matmul(x, w)?;
    let bias = format!("{name}.b");
    if model.params.contains(&bias) {
        let b = model.var(tape, &bias)?;
        tape.add_row(y, b)
    } else {
        Ok(y)
    }
}

/// Grid reads of every query box on one level, `N_q×(G²·C)`.
fn read_boxes(
    tape: &mut GradTape,
    model: &ModelParams,
    fm: Var,
    stride: usize,
    boxes: Var,
) -> Result<Var> {
    let cfg = &model.config;
    let g = cfg.grid;
    let nq = tape.value(boxes).rows();
    let c = tape.value(fm).dims()[0];
    let scale = cfg.image_size as f64 / stride as f64;
    // x = scale·(cx + a_i·w) − 0.5 with a_i the grid offset from the center
    let mut ax = vec![0.0; 4 * g * g];
    let mut ay = vec![0.0; 4 * g * g];
    for j in 0..g {
        for i in 0..g {
            let p = j * g + i;
            let (ai, aj) = (
                (i as f64 + 0.5) / g as f64 - 0.5,
                (j as f64 + 0.5) / g as f64 - 0.5,
            );
            ax[p] = scale;
            ax[2 * g * g + p] = scale * ai;
            ay[g * g + p] = scale;
            ay[3 * g * g + p] = scale * aj;
        }
    }
    let ax = tape.constant(Tensor::new(vec![4, g * g], ax)?);
    let ay = tape.constant(Tensor::new(vec![4, g * g], ay)?);
    let half = tape.constant(Tensor::filled(&[g * g], -0.5));
    let xs = tape.matmul(boxes, ax)?;
    let xs = tape.add_row(xs, half)?;
    let ys = tape.matmul(boxes, ay)?;
    let ys = tape.add_row(ys, half)?;
    let s = tape.sample_at(fm, xs, ys)?;
    tape.reshape(s, &[nq, g * g * c])
}

/// Cross-attention of layer `t` from queries `x` (at `boxes`) into `memory`.
pub fn cross_attend(
    tape: &mut GradTape,
    model: &ModelParams,
    t: usize,
    x: Var,
    boxes: Var,
    memory: &Memory,
) -> Result<Var> {
    let n = |s: &str| format!("decoder.{t}.{s}");
    let bpos = linear(tape, model, boxes, &n("box_pos"))?;
    let xq = tape.add(x, bpos)?;
    let q = linear(tape, model, xq, &n("ca_q"))?;
    let k = linear(tape, model, memory.keys, &n("ca_k"))?;
    let v = linear(tape, model, memory.values, &n("ca_v"))?;
    let a = attention(tape, q, k, v, model.config.dim)?;
    linear(tape, model, a, &n("ca_o"))
}

/// Runs the decoder; returns one [`LayerVars`] per layer, last layer last.
pub fn decode_queries(
    tape: &mut GradTape,
    model: &ModelParams,
    pyramid: &PyramidVars,
) -> Result<Vec<LayerVars>> {
    let cfg = &model.config;
    let d = cfg.dim;
    let memory = build_memory(tape, model, pyramid)?;
    let mut x = model.var(tape, "decoder.query")?;
    let mut logits = model.var(tape, "decoder.ref")?;
    let mut boxes = tape.sigmoid(logits)?;
    let cls = model.var(tape, "head.cls")?;
    let mut out = Vec::with_capacity(cfg.decoder_layers);
    for t in 0..cfg.decoder_layers {
        let n = |s: &str| format!("decoder.{t}.{s}");

        let q = linear(tape, model, x, &n("sa_q"))?;
        let k = linear(tape, model, x, &n("sa_k"))?;
        let v = linear(tape, model, x, &n("sa_v"))?;
        let a = attention(tape, q, k, v, d)?;
        let a = linear(tape, model, a, &n("sa_o"))?;
        let y = tape.add(x, a)?;
        x = layer_norm(tape, model, y, &n("ln1"))?;

        let a = cross_attend(tape, model, t, x, boxes, &memory)?;
        let y = tape.add(x, a)?;
        x = layer_norm(tape, model, y, &n("ln2"))?;

        let mut roi = None;
        for l in 0..cfg.levels {
            let r = read_boxes(tape, model, pyramid.levels[l], pyramid.strides[l], boxes)?;
            let r = linear(tape, model, r, &n(&format!("roi{l}")))?;
            roi = Some(match roi {
                None => r,
                Some(acc) => tape.add(acc, r)?,
            });
        }
        let y = tape.add(x, roi.expect("at least one level"))?;
        x = layer_norm(tape, model, y, &n("ln3"))?;

        let h = linear(tape, model, x, &n("ff1"))?;
        let h = tape.silu(h)?;
        let f = linear(tape, model, h, &n("ff2"))?;
        let y = tape.add(x, f)?;
        x = layer_norm(tape, model, y, &n("ln4"))?;

        let h = linear(tape, model, x, &n("box1"))?;
        let h = tape.silu(h)?;
        let delta = linear(tape, model, h, &n("box2"))?;
        logits = tape.add(logits, delta)?;
        boxes = tape.sigmoid(logits)?;

        let embed = tape.matmul(x, cls)?;
        out.push(LayerVars { embed, boxes });
    }
    Ok(out)
}
