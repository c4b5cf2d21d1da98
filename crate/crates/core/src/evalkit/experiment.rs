use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    compute_ap, confusable_false_positives, counting_mae, DetectionRecord, EvalConfig, EvalResult,
};
use crate::dataengine::{frequency_buckets, BucketThresholds, DatasetManifest, Split};
use crate::detector::{
    build_eval_prompts, prompt_set, run_detector, train, DetectorConfig, DetectorOutput,
    ModelParams, TrainConfig,
};
use crate::error::{Error, Result};
use crate::geometry::JitterSpec;
use crate::prompt::CategoryPrompt;
use crate::rng::stream;
use crate::scoring::{infer_detections, score_cells, InferenceMode, ModePolicy, DEFAULT_BETA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub mode: InferenceMode,
    pub beta: f64,
    /// Training images averaged into each category's positive prompt.
    pub n_pos: usize,
    /// Negative prompts kept per category.
    pub k: usize,
    pub neg_jitter: JitterSpec,
    pub eval: EvalConfig,
    pub buckets: BucketThresholds,
    /// Score at which a detection counts for counting error and confusion counts.
    pub count_threshold: f64,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            mode: InferenceMode::AutoSuggested,
            beta: DEFAULT_BETA,
            n_pos: 8,
            k: 3,
            neg_jitter: JitterSpec::negative(),
            eval: EvalConfig::default(),
            buckets: BucketThresholds::default(),
            count_threshold: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub result: EvalResult,
    pub detections: Vec<DetectionRecord>,
    /// Confusable-pair cross-category false positives at `count_threshold`.
    pub confusable_fp: usize,
    pub counting_mae: f64,
}

/// Final-layer outputs for every validation image.
pub fn detector_outputs(
    model: &ModelParams,
    manifest: &DatasetManifest,
) -> Result<Vec<(u64, DetectorOutput)>> {
    manifest
        .split_scenes(Split::Val)
        .map(|s| Ok((s.image_id, run_detector(model, &s.pixels)?)))
        .collect()
}

/// Scores precomputed outputs against fixed prompts.
pub fn evaluate_outputs(
    outputs: &[(u64, DetectorOutput)],
    manifest: &DatasetManifest,
    prompts: &[CategoryPrompt],
    settings: &EvalSettings,
) -> Result<EvalOutcome> {
    let set = prompt_set(prompts, settings.mode != InferenceMode::PositiveOnly)?;
    let mut detections = Vec::new();
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    let mut gts = Vec::new();
    for (image_id, out) in outputs {
        let scene = manifest
            .scene(*image_id)
            .ok_or_else(|| Error::NotFound(format!("scene {image_id}")))?;
        gts.extend_from_slice(&scene.annotations);
        let cells = score_cells(
            &out.queries,
            &out.boxes,
            &set,
            settings.beta,
            settings.mode,
            0.0,
        )?;
        detections.extend(cells.iter().map(|d| DetectionRecord {
            image_id: *image_id,
            category_id: d.category_id,
            bbox: d.bbox,
            score: d.probability,
        }));
        let best = infer_detections(
            &out.queries,
            &out.boxes,
            &set,
            settings.beta,
            settings.mode,
            settings.count_threshold,
        )?;
        for (cat, n) in scene.category_counts() {
            predicted.push(best.iter().filter(|d| d.category_id == cat).count());
            truth.push(n);
        }
    }
    let buckets = frequency_buckets(manifest, settings.buckets);
    let result = compute_ap(&detections, &gts, &settings.eval).with_buckets(&buckets);
    let confusable_fp = confusable_false_positives(
        &detections,
        &gts,
        &manifest.pairs(),
        settings.count_threshold,
        0.5,
    );
    Ok(EvalOutcome {
        result,
        detections,
        confusable_fp,
        counting_mae: counting_mae(&predicted, &truth)?,
    })
}

fn eval_prompts(
    model: &ModelParams,
    manifest: &DatasetManifest,
    settings: &EvalSettings,
) -> Result<Vec<CategoryPrompt>> {
    let mut rng = stream(settings.seed, "prompts");
    build_eval_prompts(
        model,
        manifest,
        settings.n_pos,
        settings.k,
        &settings.neg_jitter,
        &mut rng,
    )
}

/// Builds prompts from the training split and evaluates on the validation split.
pub fn evaluate_model(
    model: &ModelParams,
    manifest: &DatasetManifest,
    settings: &EvalSettings,
) -> Result<EvalOutcome> {
    let prompts = eval_prompts(model, manifest, settings)?;
    let outputs = detector_outputs(model, manifest)?;
    evaluate_outputs(&outputs, manifest, &prompts, settings)
}

/// Everything needed to train and evaluate one model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: DetectorConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Beta,
    Eta,
    K,
    NPos,
    ModePolicy,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Beta => "beta",
            SweepAxis::Eta => "eta",
            SweepAxis::K => "K",
            SweepAxis::NPos => "N_pos",
            SweepAxis::ModePolicy => "mode_policy",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "beta" => Ok(SweepAxis::Beta),
            "eta" => Ok(SweepAxis::Eta),
            "K" | "k" => Ok(SweepAxis::K),
            "N_pos" | "n_pos" => Ok(SweepAxis::NPos),
            "mode_policy" => Ok(SweepAxis::ModePolicy),
            other => Err(Error::Invalid(format!("sweep axis {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: String,
    pub ap: f64,
    pub ap_r: Option<f64>,
    pub ap_c: Option<f64>,
    pub ap_f: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
    pub results: Vec<EvalResult>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| format!("{x:.6}"))
}

impl SweepReport {
    fn push(&mut self, axis_value: String, result: EvalResult) {
        self.rows.push(SweepRow {
            axis_value,
            ap: result.ap,
            ap_r: result.ap_r,
            ap_c: result.ap_c,
            ap_f: result.ap_f,
            seed: self.seed,
        });
        self.results.push(result);
    }

    /// Absent buckets are written as `na`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis_value,ap,ap_r,ap_c,ap_f,seed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{},{},{},{}\n",
                r.axis_value,
                r.ap,
                cell(r.ap_r),
                cell(r.ap_c),
                cell(r.ap_f),
                r.seed
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("sweep over {} (seed {})\n", self.axis, self.seed);
        let best = self.rows.iter().max_by(|a, b| a.ap.total_cmp(&b.ap));
        for r in &self.rows {
            let mark = if best.map(|b| b.axis_value == r.axis_value) == Some(true) {
                " *"
            } else {
                ""
            };
            out.push_str(&format!("  {:>28}  AP {:.4}{mark}\n", r.axis_value, r.ap));
        }
        out
    }
}

fn parse_f64(v: &str) -> Result<f64> {
    v.trim()
        .parse()
        .map_err(|_| Error::Invalid(format!("grid value {v:?}")))
}

fn parse_usize(v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Invalid(format!("grid value {v:?}")))
}

/// Runs one evaluation per grid value with `seed` shared by training and evaluation.
///
/// Inference-side axes (beta, K, N_pos) reuse `checkpoint`, training one from
/// `base` when none is given. Training-side axes retrain per value; mode
/// policies are each evaluated positive-only and auto-suggested, labelled
/// `policy|mode`.
pub fn run_sweep(
    axis: SweepAxis,
    grid: &[String],
    base: &ExperimentConfig,
    manifest: &DatasetManifest,
    seed: u64,
    checkpoint: Option<&ModelParams>,
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::Invalid("empty sweep grid".into()));
    }
    let mut base = base.clone();
    base.train.seed = seed;
    base.eval.seed = seed;
    let mut report = SweepReport {
        axis,
        seed,
        rows: Vec::new(),
        results: Vec::new(),
    };
    match axis {
        SweepAxis::Beta | SweepAxis::K | SweepAxis::NPos => {
            let trained;
            let model = match checkpoint {
                Some(m) => m,
                None => {
                    trained = train(manifest, base.model, &base.train, None)?.model;
                    &trained
                }
            };
            let outputs = detector_outputs(model, manifest)?;
            let shared = match axis {
                SweepAxis::Beta => Some(eval_prompts(model, manifest, &base.eval)?),
                _ => None,
            };
            for v in grid {
                let mut s = base.eval.clone();
                match axis {
                    SweepAxis::Beta => s.beta = parse_f64(v)?,
                    SweepAxis::K => s.k = parse_usize(v)?,
                    _ => s.n_pos = parse_usize(v)?,
                }
                let prompts = match &shared {
                    Some(p) => p.clone(),
                    None => eval_prompts(model, manifest, &s)?,
                };
                let out = evaluate_outputs(&outputs, manifest, &prompts, &s)?;
                log::info!("{axis}={v}: AP {:.4}", out.result.ap);
                report.push(v.trim().to_string(), out.result);
            }
        }
        SweepAxis::Eta => {
            for v in grid {
                let mut t = base.train.clone();
                t.eta = parse_f64(v)?;
                let model = train(manifest, base.model, &t, None)?.model;
                let out = evaluate_model(&model, manifest, &base.eval)?;
                log::info!("{axis}={v}: AP {:.4}", out.result.ap);
                report.push(v.trim().to_string(), out.result);
            }
        }
        SweepAxis::ModePolicy => {
            for v in grid {
                let mut t = base.train.clone();
                t.mode_policy = v.parse::<ModePolicy>()?;
                let model = train(manifest, base.model, &t, None)?.model;
                let prompts = eval_prompts(&model, manifest, &base.eval)?;
                let outputs = detector_outputs(&model, manifest)?;
                for mode in [InferenceMode::PositiveOnly, InferenceMode::AutoSuggested] {
                    let s = EvalSettings {
                        mode,
                        ..base.eval.clone()
                    };
                    let out = evaluate_outputs(&outputs, manifest, &prompts, &s)?;
                    log::info!("{axis}={v} {mode}: AP {:.4}", out.result.ap);
                    report.push(format!("{}|{mode}", t.mode_policy), out.result);
                }
            }
        }
    }
    Ok(report)
}

/// Writes detections as a JSON array of `{image_id, category_id, bbox, score}`.
pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
