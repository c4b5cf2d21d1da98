use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};

use negprompt_core::dataengine::{load_dataset, save_dataset, synthesize_dataset, DatasetManifest};
use negprompt_core::detector::{load_checkpoint, save_checkpoint, train, ModelParams};
use negprompt_core::evalkit::{
    evaluate_model, run_sweep, write_detections, ExperimentConfig, SweepAxis,
};
use negprompt_core::geometry::BBox;
use negprompt_service::{handle_infer, AppState, InferRequest, NegativePrompt, PositivePrompt};

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.npck";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "eval.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const DETECTIONS_FILE: &str = "detections.json";

pub fn run(cfg: RunConfig) -> anyhow::Result<()> {
    match cfg.command.as_str() {
        "gen-data" => gen_data(&cfg),
        "train" => train_cmd(cfg),
        "eval" => eval_cmd(&cfg),
        "sweep" => sweep_cmd(cfg),
        "infer" => infer_cmd(&cfg),
        "serve" => serve_cmd(&cfg),
        other => bail!("unknown command {other}"),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| anyhow!("--{flag} is required (or set paths.{flag} in the config file)"))
}

fn dataset(cfg: &RunConfig) -> anyhow::Result<DatasetManifest> {
    let dir = required(&cfg.paths.data, "data")?;
    Ok(load_dataset(dir)?)
}

fn checkpoint(cfg: &RunConfig) -> anyhow::Result<ModelParams> {
    let path = required(&cfg.paths.checkpoint, "checkpoint")?;
    Ok(load_checkpoint(path)?)
}

fn gen_data(cfg: &RunConfig) -> anyhow::Result<()> {
    let manifest = synthesize_dataset(&cfg.data)?;
    save_dataset(&manifest, &cfg.paths.out)?;
    cfg.write(&cfg.paths.out)?;
    println!(
        "{} scenes ({} train, {} val) in {}",
        manifest.scenes.len(),
        manifest.train.len(),
        manifest.val.len(),
        cfg.paths.out.display()
    );
    Ok(())
}

fn train_cmd(mut cfg: RunConfig) -> anyhow::Result<()> {
    let manifest = dataset(&cfg)?;
    cfg.model.image_size = manifest.config.image_size;
    let out = cfg.paths.out.clone();
    cfg.write(&out)?;
    let mut log = BufWriter::new(File::create(out.join(METRICS_FILE)).context("metrics log")?);
    let outcome = train(&manifest, cfg.model, &cfg.train, Some(&mut log))?;
    log.flush()?;
    save_checkpoint(&outcome.model, &out.join(CHECKPOINT_FILE))?;
    let smoothed = outcome.smoothed_losses(0.9);
    if let (Some(first), Some(last)) = (smoothed.first(), smoothed.last()) {
        println!(
            "trained {} steps, smoothed loss {first:.4} -> {last:.4}",
            cfg.train.steps
        );
    }
    println!("checkpoint: {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| format!("{x:.6}"))
}

fn eval_cmd(cfg: &RunConfig) -> anyhow::Result<()> {
    let manifest = dataset(cfg)?;
    let model = checkpoint(cfg)?;
    cfg.write(&cfg.paths.out)?;
    let outcome = evaluate_model(&model, &manifest, &cfg.eval)?;
    let r = &outcome.result;
    let csv = format!(
        "mode,beta,ap,ap_r,ap_c,ap_f,counting_mae,confusable_fp,seed\n{},{},{:.6},{},{},{},{:.6},{},{}\n",
        cfg.eval.mode,
        cfg.eval.beta,
        r.ap,
        opt(r.ap_r),
        opt(r.ap_c),
        opt(r.ap_f),
        outcome.counting_mae,
        outcome.confusable_fp,
        cfg.eval.seed
    );
    std::fs::write(cfg.paths.out.join(EVAL_FILE), &csv)?;
    write_detections(&cfg.paths.out.join(DETECTIONS_FILE), &outcome.detections)?;
    print!("{csv}");
    Ok(())
}

fn sweep_cmd(mut cfg: RunConfig) -> anyhow::Result<()> {
    let axis: SweepAxis = cfg.sweep.axis.parse()?;
    let manifest = dataset(&cfg)?;
    cfg.model.image_size = manifest.config.image_size;
    let model = match cfg.paths.checkpoint {
        Some(_) => Some(checkpoint(&cfg)?),
        None => None,
    };
    cfg.write(&cfg.paths.out)?;
    let base = ExperimentConfig {
        model: cfg.model,
        train: cfg.train.clone(),
        eval: cfg.eval.clone(),
    };
    let report = run_sweep(
        axis,
        &cfg.sweep.grid,
        &base,
        &manifest,
        cfg.seed,
        model.as_ref(),
    )?;
    std::fs::write(cfg.paths.out.join(SWEEP_FILE), report.to_csv())?;
    print!("{}", report.summary());
    Ok(())
}

fn parse_box(s: &str) -> anyhow::Result<BBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| anyhow!("box {s:?}: expected x,y,w,h"))?;
    let [x, y, w, h] = v[..] else {
        bail!("box {s:?}: expected x,y,w,h");
    };
    Ok(BBox::new(x, y, w, h)?)
}

fn parse_positive(s: &str) -> anyhow::Result<PositivePrompt> {
    let (name, b) = s
        .split_once(':')
        .ok_or_else(|| anyhow!("positive {s:?}: expected NAME:x,y,w,h"))?;
    Ok(PositivePrompt {
        category_name: name.to_string(),
        bbox: parse_box(b)?,
    })
}

fn infer_cmd(cfg: &RunConfig) -> anyhow::Result<()> {
    let manifest = dataset(cfg)?;
    let model = checkpoint(cfg)?;
    let scene = cfg
        .infer
        .scene
        .ok_or_else(|| anyhow!("--scene is required"))?;
    let req = InferRequest {
        scene_id: Some(scene),
        pixels: None,
        positives: cfg
            .infer
            .positives
            .iter()
            .map(|s| parse_positive(s))
            .collect::<anyhow::Result<_>>()?,
        negatives: cfg
            .infer
            .negatives
            .iter()
            .map(|s| parse_box(s).map(|bbox| NegativePrompt { bbox }))
            .collect::<anyhow::Result<_>>()?,
        mode: cfg.eval.mode,
        beta: Some(cfg.eval.beta),
        k: Some(cfg.eval.k),
        score_threshold: cfg.infer.score_threshold,
        seed: cfg.seed,
        timing: false,
    };
    let state = AppState::new(model, manifest)?;
    cfg.write(&cfg.paths.out)?;
    let resp = handle_infer(&state, &req)?;
    let text = serde_json::to_string_pretty(&resp)?;
    std::fs::write(cfg.paths.out.join(DETECTIONS_FILE), &text)?;
    for d in &resp.detections {
        println!(
            "{:<12} p={:.4} delta={:+.4} box=({:.1},{:.1},{:.1},{:.1})",
            d.category_name,
            d.probability,
            d.suppressed_delta,
            d.bbox.x,
            d.bbox.y,
            d.bbox.w,
            d.bbox.h
        );
    }
    Ok(())
}

fn serve_cmd(cfg: &RunConfig) -> anyhow::Result<()> {
    let addr: SocketAddr = cfg
        .serve
        .bind
        .parse()
        .with_context(|| format!("bind address {:?}", cfg.serve.bind))?;
    let state = AppState::load(
        required(&cfg.paths.checkpoint, "checkpoint")?,
        required(&cfg.paths.data, "data")?,
    )?;
    cfg.write(&cfg.paths.out)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(negprompt_service::serve(state, addr))?;
    Ok(())
}
