use std::collections::HashMap;

use super::{decode_queries, encode_image, ModelParams};
use crate::dataengine::{DatasetManifest, Scene};
use crate::error::{Error, Result};
use crate::geometry::{from_cxcywh_norm, jitter_box, BBox, JitterSpec};
use crate::numcore::{GradTape, Tensor};
use crate::prompt::{
    aggregate_positives, build_visualg_prompts, encode_prompts, select_topk_negatives,
    CategoryPrompt, FeaturePyramid, Polarity, PyramidVars,
};
use crate::rng::Rng;
use crate::scoring::{infer_detections, Detection, InferenceMode, PromptSet};

/// Final-layer outputs for one image.
#[derive(Clone, Debug)]
pub struct DetectorOutput {
    /// `N_q×D`
    pub queries: Tensor,
    /// Pixel boxes, one per query.
    pub boxes: Vec<BBox>,
    pub pyramid: FeaturePyramid,
}

pub fn image_features(model: &ModelParams, pixels: &Tensor) -> Result<FeaturePyramid> {
    let mut tape = GradTape::new();
    let pv = encode_image(&mut tape, model, pixels)?;
    Ok(pv.to_pyramid(&tape))
}

pub fn run_detector(model: &ModelParams, pixels: &Tensor) -> Result<DetectorOutput> {
    let mut tape = GradTape::new();
    let pv = encode_image(&mut tape, model, pixels)?;
    let layers = decode_queries(&mut tape, model, &pv)?;
    let last = layers
        .last()
        .ok_or_else(|| Error::Invalid("decoder has no layers".into()))?;
    let size = model.config.image_size as f64;
    let raw = tape.value(last.boxes);
    let boxes = (0..raw.rows())
        .map(|q| {
            let r = raw.row(q);
            from_cxcywh_norm([r[0], r[1], r[2], r[3]], size, size)
        })
        .collect::<Result<_>>()?;
    Ok(DetectorOutput {
        queries: tape.value(last.embed).clone(),
        boxes,
        pyramid: pv.to_pyramid(&tape),
    })
}

/// Visual prompts for every category of the manifest, built from training images.
pub fn build_eval_prompts(
    model: &ModelParams,
    manifest: &DatasetManifest,
    n: usize,
    k: usize,
    neg_spec: &JitterSpec,
    rng: &mut Rng,
) -> Result<Vec<CategoryPrompt>> {
    let pcfg = model.config.prompt_config();
    let mut cache: HashMap<u64, FeaturePyramid> = HashMap::new();
    let mut pyramid_of = |scene: &Scene| -> Result<FeaturePyramid> {
        if let Some(p) = cache.get(&scene.image_id) {
            return Ok(p.clone());
        }
        let p = image_features(model, &scene.pixels)?;
        cache.insert(scene.image_id, p.clone());
        Ok(p)
    };
    let mut out = Vec::with_capacity(manifest.categories.len());
    for cat in &manifest.categories {
        let has_train = manifest
            .split_scenes(crate::dataengine::Split::Train)
            .any(|s| s.count(cat.id) > 0);
        if !has_train {
            log::warn!(
                "category {} has no training instance; no prompt built",
                cat.id
            );
            continue;
        }
        out.push(build_visualg_prompts(
            manifest,
            cat.id,
            n,
            k,
            neg_spec,
            &model.params,
            &pcfg,
            &mut pyramid_of,
            rng,
        )?);
    }
    Ok(out)
}

/// Stacks category prompts; negatives are dropped unless `with_negatives`.
pub fn prompt_set(prompts: &[CategoryPrompt], with_negatives: bool) -> Result<PromptSet> {
    let categories = prompts.iter().map(|p| p.category_id).collect();
    let rows: Vec<Vec<f64>> = prompts.iter().map(|p| p.positive.data().to_vec()).collect();
    let positives = if rows.is_empty() {
        Tensor::zeros(&[0, 0])
    } else {
        Tensor::from_rows(&rows)?
    };
    let negatives = prompts
        .iter()
        .map(|p| (with_negatives && p.negatives.rows() > 0).then(|| p.negatives.clone()))
        .collect();
    PromptSet::new(categories, positives, negatives)
}

/// Runs the detector on one image against fixed prompts.
pub fn detect_scene(
    model: &ModelParams,
    pixels: &Tensor,
    prompts: &PromptSet,
    beta: f64,
    mode: InferenceMode,
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let out = run_detector(model, pixels)?;
    let prompts = match mode {
        InferenceMode::PositiveOnly => prompts.positive_only(),
        _ => prompts.clone(),
    };
    infer_detections(
        &out.queries,
        &out.boxes,
        &prompts,
        beta,
        mode,
        score_threshold,
    )
}

/// Prompts drawn on the image being searched.
///
/// Positives of one category are averaged. In auto-suggested mode each
/// category gets `k` strong jitters of its own boxes; in user-curated mode
/// the given negative boxes are shared by every category, cut to the `k`
/// closest to each category's positive.
#[allow(clippy::too_many_arguments)]
pub fn prompts_from_boxes(
    model: &ModelParams,
    pyramid: &FeaturePyramid,
    positives: &[(u32, BBox)],
    negatives: &[BBox],
    mode: InferenceMode,
    k: usize,
    neg_spec: &JitterSpec,
    rng: &mut Rng,
) -> Result<PromptSet> {
    let pcfg = model.config.prompt_config();
    let mut tape = GradTape::new();
    let pv = PyramidVars::from_pyramid(&mut tape, pyramid);
    let mut categories: Vec<u32> = positives.iter().map(|p| p.0).collect();
    categories.sort_unstable();
    categories.dedup();
    let (w, h) = (pyramid.width as f64, pyramid.height as f64);
    let shared = if mode == InferenceMode::UserCurated {
        if negatives.is_empty() {
            return Err(Error::MissingNegatives);
        }
        let v = encode_prompts(
            &mut tape,
            &model.params,
            &pcfg,
            &pv,
            negatives,
            Polarity::Negative,
        )?;
        Some(tape.value(v).clone())
    } else {
        None
    };
    let mut rows = Vec::with_capacity(categories.len());
    let mut negs = Vec::with_capacity(categories.len());
    for &cat in &categories {
        let boxes: Vec<BBox> = positives
            .iter()
            .filter(|p| p.0 == cat)
            .map(|p| p.1)
            .collect();
        let v = encode_prompts(
            &mut tape,
            &model.params,
            &pcfg,
            &pv,
            &boxes,
            Polarity::Positive,
        )?;
        let enc = tape.value(v);
        let singles: Vec<Tensor> = (0..enc.rows())
            .map(|r| Tensor::new(vec![enc.cols()], enc.row(r).to_vec()))
            .collect::<Result<_>>()?;
        let anchor = aggregate_positives(&singles)?;
        let candidates = match mode {
            InferenceMode::PositiveOnly => None,
            InferenceMode::UserCurated => shared.clone(),
            InferenceMode::AutoSuggested if k == 0 => None,
            InferenceMode::AutoSuggested => {
                let mut jittered = Vec::with_capacity(k * boxes.len());
                for b in &boxes {
                    for _ in 0..k {
                        jittered.push(jitter_box(b, neg_spec, w, h, rng)?);
                    }
                }
                let v = encode_prompts(
                    &mut tape,
                    &model.params,
                    &pcfg,
                    &pv,
                    &jittered,
                    Polarity::Negative,
                )?;
                Some(tape.value(v).clone())
            }
        };
        negs.push(match candidates {
            Some(c) => Some(top_negatives(&c, anchor.data(), k)?),
            None => None,
        });
        rows.push(anchor.into_data());
    }
    let pos = if rows.is_empty() {
        Tensor::zeros(&[0, 0])
    } else {
        Tensor::from_rows(&rows)?
    };
    PromptSet::new(categories, pos, negs)
}

fn top_negatives(candidates: &Tensor, anchor: &[f64], k: usize) -> Result<Tensor> {
    let normed: Vec<Vec<f64>> = (0..candidates.rows())
        .map(|r| {
            let row = candidates.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter().map(|v| v / n).collect()
        })
        .collect();
    let normed = Tensor::from_rows(&normed)?;
    let keep = k.clamp(1, normed.rows());
    let idx = select_topk_negatives(&normed, anchor, keep)?;
    Tensor::from_rows(
        &idx.iter()
            .map(|&i| normed.row(i).to_vec())
            .collect::<Vec<_>>(),
    )
}
