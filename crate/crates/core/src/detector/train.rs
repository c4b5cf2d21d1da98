use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{decode_queries, encode_image, DetectorConfig, ModelParams};
use crate::dataengine::{build_category_index, construct_batch, DatasetManifest, Scene};
use crate::error::{Error, Result};
use crate::geometry::{to_cxcywh_norm, JitterSpec};
use crate::losses::{
    focal_loss_logit, giou_loss, l1_box_loss, nnh_loss, total_loss, FocalConfig, LossComponents,
    LossWeights, NnhConfig,
};
use crate::matching::{build_cost_matrix, hungarian, MatchWeights};
use crate::numcore::{sigmoid_scalar, GradTape, ParamSet, Tensor, Var};
use crate::prompt::{
    aggregate_positives_on, encode_prompts, generate_training_prompts, select_negatives_on,
    Polarity,
};
use crate::rng::{stream, Rng};
use crate::scoring::{sample_mode_indicator, ModePolicy, DEFAULT_BETA};

/// Parameters under this prefix train at `lr_backbone`.
pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_others: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode_policy: ModePolicy,
    pub beta: f64,
    pub eta: f64,
    /// Negative prompts per category; 0 trains positives only.
    pub k: usize,
    pub focal: FocalConfig,
    pub weights: LossWeights,
    pub match_weights: MatchWeights,
    pub pos_jitter: JitterSpec,
    pub neg_jitter: JitterSpec,
    /// Global gradient-norm cap; 0 disables it.
    pub grad_clip: f64,
    pub aux_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 400,
            batch_size: 6,
            lr_backbone: 1e-3,
            lr_others: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            mode_policy: ModePolicy::Bernoulli(0.5),
            beta: DEFAULT_BETA,
            eta: NnhConfig::default().eta,
            k: 3,
            focal: FocalConfig::default(),
            weights: LossWeights::default(),
            match_weights: MatchWeights::default(),
            pos_jitter: JitterSpec::positive(),
            neg_jitter: JitterSpec::negative(),
            grad_clip: 1.0,
            aux_loss: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &DetectorConfig) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if !(self.lr_backbone >= 0.0 && self.lr_others >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Invalid(
                "learning rates and weight decay must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Invalid(format!("beta {} outside [0, 1)", self.beta)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Invalid(format!("eta {}", self.eta)));
        }
        if self.k > model.k {
            return Err(Error::Invalid(format!(
                "k {} exceeds the model's {} negative queries",
                self.k, model.k
            )));
        }
        self.mode_policy.validate()?;
        self.weights.validate()?;
        self.match_weights.validate()
    }
}

/// Loss, its parts and parameter gradients of one step.
#[derive(Clone, Debug)]
pub struct StepDiagnostics {
    pub loss: f64,
    pub components: LossComponents,
    pub num_gt: usize,
    pub mode_indicator: u8,
    pub grads: BTreeMap<String, Tensor>,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub loss_components: LossComponents,
    pub mode_indicator: u8,
}

struct Seeds {
    list: Vec<(Var, Tensor)>,
}

impl Seeds {
    fn add(&mut self, v: Var, g: Vec<f64>, dims: &[usize]) -> Result<()> {
        self.list.push((v, Tensor::new(dims.to_vec(), g)?));
        Ok(())
    }
}

/// Loss and gradients of one batch with a given mode indicator.
///
/// Each image gets one positive and `k` negative prompts per category it
/// holds; positives are averaged per category over the batch and negatives
/// pooled and cut to the top `k`. Every image is then scored against every
/// category of the batch.
pub fn forward_train(
    model: &ModelParams,
    scenes: &[&Scene],
    cfg: &TrainConfig,
    mode_indicator: u8,
    rng: &mut Rng,
) -> Result<StepDiagnostics> {
    if scenes.is_empty() {
        return Err(Error::Count {
            needed: 1,
            available: 0,
        });
    }
    let mcfg = &model.config;
    let pcfg = mcfg.prompt_config();
    let k = cfg.k;
    let mut tape = GradTape::new();

    let mut pyramids = Vec::with_capacity(scenes.len());
    for s in scenes {
        pyramids.push(encode_image(&mut tape, model, &s.pixels)?);
    }
    let mut pos: BTreeMap<u32, Vec<Var>> = BTreeMap::new();
    let mut neg: BTreeMap<u32, Vec<Var>> = BTreeMap::new();
    for (i, s) in scenes.iter().enumerate() {
        for cat in s.category_counts().into_keys() {
            let (p, n) =
                generate_training_prompts(s, cat, &cfg.pos_jitter, &cfg.neg_jitter, k, rng)?;
            let pv = encode_prompts(
                &mut tape,
                &model.params,
                &pcfg,
                &pyramids[i],
                &[p.bbox],
                Polarity::Positive,
            )?;
            pos.entry(cat).or_default().push(pv);
            if k > 0 {
                let boxes: Vec<_> = n.iter().map(|v| v.bbox).collect();
                let nv = encode_prompts(
                    &mut tape,
                    &model.params,
                    &pcfg,
                    &pyramids[i],
                    &boxes,
                    Polarity::Negative,
                )?;
                neg.entry(cat).or_default().push(nv);
            }
        }
    }
    let cats: Vec<u32> = pos.keys().copied().collect();
    let mut vp_rows = Vec::with_capacity(cats.len());
    let mut vn_rows = Vec::with_capacity(cats.len());
    for c in &cats {
        let anchor = aggregate_positives_on(&mut tape, &pos[c])?;
        vp_rows.push(anchor);
        if k > 0 {
            let cand = tape.concat_rows(&neg[c])?;
            vn_rows.push(select_negatives_on(&mut tape, cand, anchor, k)?);
        }
    }
    let vp = tape.concat_rows(&vp_rows)?;
    let vn = if k > 0 {
        Some(tape.concat_rows(&vn_rows)?)
    } else {
        None
    };

    let num_gt: usize = scenes
        .iter()
        .map(|s| s.annotations.len())
        .sum::<usize>()
        .max(1);
    let norm = 1.0 / num_gt as f64;
    let w = &cfg.weights;
    let nnh = NnhConfig { eta: cfg.eta };
    let m = cats.len();
    let mut comp = LossComponents::default();
    let mut seeds = Seeds { list: Vec::new() };

    for (i, s) in scenes.iter().enumerate() {
        let layers = decode_queries(&mut tape, model, &pyramids[i])?;
        let gt: Vec<(u32, [f64; 4])> = s
            .annotations
            .iter()
            .map(|a| {
                Ok((
                    a.category_id,
                    to_cxcywh_norm(&a.bbox, s.width as f64, s.height as f64)?,
                ))
            })
            .collect::<Result<_>>()?;
        let last = layers.len() - 1;
        for (t, layer) in layers.iter().enumerate() {
            if t != last && !cfg.aux_loss {
                continue;
            }
            let s_p = tape.matmul_bt(layer.embed, vp)?;
            let need_sn = vn.is_some() && (mode_indicator == 1 || (t == last && w.w_hinge > 0.0));
            let s_n = match vn {
                Some(vn) if need_sn => Some(tape.matmul_bt(layer.embed, vn)?),
                _ => None,
            };
            let logits = match s_n {
                Some(sn) if mode_indicator == 1 => {
                    let strongest = tape.group_max(sn, k)?;
                    let shift = tape.scale(strongest, cfg.beta)?;
                    tape.sub(s_p, shift)?
                }
                _ => s_p,
            };
            let z = tape.value(logits).clone();
            let nq = z.rows();
            let probs = z.map(sigmoid_scalar);
            let boxes = tape.value(layer.boxes).clone();
            let pred: Vec<[f64; 4]> = (0..nq)
                .map(|q| {
                    let r = boxes.row(q);
                    [r[0], r[1], r[2], r[3]]
                })
                .collect();
            let cost = build_cost_matrix(&probs, &cats, &pred, &gt, &cfg.match_weights)?;
            let assignment = hungarian(&cost);
            let col_of = |cat: u32| {
                cats.iter()
                    .position(|c| *c == cat)
                    .expect("gt category is prompted")
            };

            let mut target = vec![false; nq * m];
            for &(q, g) in &assignment.pairs {
                target[q * m + col_of(gt[g].0)] = true;
            }
            let mut d_logits = vec![0.0; nq * m];
            for (idx, &zv) in z.data().iter().enumerate() {
                let (l, dz) = focal_loss_logit(zv, target[idx], &cfg.focal);
                comp.cls += l * norm;
                d_logits[idx] = w.w_cls * dz * norm;
            }
            seeds.add(logits, d_logits, &[nq, m])?;

            let mut d_boxes = vec![0.0; nq * 4];
            for &(q, g) in &assignment.pairs {
                let (l1, g1) = l1_box_loss(&pred[q], &gt[g].1);
                let (lg, gg) = giou_loss(&pred[q], &gt[g].1);
                comp.l1 += l1 * norm;
                comp.giou += lg * norm;
                for c in 0..4 {
                    d_boxes[q * 4 + c] += (w.w_l1 * g1[c] + w.w_giou * gg[c]) * norm;
                }
            }
            seeds.add(layer.boxes, d_boxes, &[nq, 4])?;

            if let Some(sn) = s_n.filter(|_| t == last && w.w_hinge > 0.0) {
                let sp_val = tape.value(s_p).clone();
                let sn_val = tape.value(sn).clone();
                let mut d_sp = vec![0.0; nq * m];
                let mut d_sn = vec![0.0; nq * m * k];
                for &(q, g) in &assignment.pairs {
                    let c = col_of(gt[g].0);
                    let negs = &sn_val.row(q)[c * k..(c + 1) * k];
                    let (l, dp, dn) = nnh_loss(sp_val.at(q, c), negs, &nnh)?;
                    comp.hinge += l * norm;
                    d_sp[q * m + c] += w.w_hinge * dp * norm;
                    for (j, v) in dn.iter().enumerate() {
                        d_sn[q * m * k + c * k + j] += w.w_hinge * v * norm;
                    }
                }
                seeds.add(s_p, d_sp, &[nq, m])?;
                seeds.add(sn, d_sn, &[nq, m * k])?;
            }
        }
    }
    let loss = total_loss(&comp, w);
    let grads = tape.backward(&seeds.list)?.params();
    Ok(StepDiagnostics {
        loss,
        components: comp,
        num_gt,
        mode_indicator,
        grads,
    })
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ..Default::default()
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor>,
        lr_of: impl Fn(&str) -> f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.dims() != g.dims() {
                return Err(Error::Shape(format!(
                    "gradient of {name} is {:?}, param {:?}",
                    g.dims(),
                    p.dims()
                )));
            }
            let lr = lr_of(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let data = p.data_mut();
            for j in 0..g.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                data[j] = data[j] * (1.0 - lr * weight_decay) - lr * update;
            }
        }
        Ok(())
    }
}

fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub records: Vec<StepRecord>,
}

impl TrainOutcome {
    /// Exponential moving average of the logged loss, one value per step.
    pub fn smoothed_losses(&self, alpha: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.records.len());
        let mut acc = None;
        for r in &self.records {
            let next = match acc {
                None => r.loss,
                Some(a) => alpha * a + (1.0 - alpha) * r.loss,
            };
            acc = Some(next);
            out.push(next);
        }
        out
    }
}

/// Trains a fresh model. Batches, prompt jitter, mode indicators and the
/// initialization each draw from their own stream of `cfg.seed`.
pub fn train(
    manifest: &DatasetManifest,
    model_cfg: DetectorConfig,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate(&model_cfg)?;
    let mut model = ModelParams::init(model_cfg, &mut stream(cfg.seed, "init"))?;
    let index = build_category_index(manifest);
    let mut batch_rng = stream(cfg.seed, "batch");
    let mut jitter_rng = stream(cfg.seed, "jitter");
    let mut mode_rng = stream(cfg.seed, "mode");
    let mut opt = AdamW::new();
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let ids = construct_batch(manifest, &index, cfg.batch_size, &mut batch_rng)?;
        let scenes: Vec<&Scene> = ids
            .iter()
            .map(|id| {
                manifest
                    .scene(*id)
                    .ok_or_else(|| Error::NotFound(format!("scene {id}")))
            })
            .collect::<Result<_>>()?;
        let indicator = sample_mode_indicator(cfg.mode_policy, &mut mode_rng);
        let mut diag = forward_train(&model, &scenes, cfg, indicator, &mut jitter_rng)?;
        let bad_grad = diag
            .grads
            .iter()
            .find(|(_, g)| !g.is_finite())
            .map(|(n, _)| n.clone());
        if !diag.loss.is_finite() || bad_grad.is_some() {
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "loss {} components {:?} batch {ids:?} non-finite gradient {:?}",
                    diag.loss, diag.components, bad_grad
                ),
            });
        }
        clip_gradients(&mut diag.grads, cfg.grad_clip);
        let lr_of = |name: &str| {
            if name.starts_with(BACKBONE_PREFIX) {
                cfg.lr_backbone
            } else {
                cfg.lr_others
            }
        };
        opt.step(&mut model.params, &diag.grads, lr_of, cfg.weight_decay)?;
        let record = StepRecord {
            step,
            loss: diag.loss,
            loss_components: diag.components,
            mode_indicator: indicator,
        };
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
        }
        log::debug!("step {step} loss {:.5} indicator {indicator}", diag.loss);
        records.push(record);
    }
    Ok(TrainOutcome { model, records })
}
