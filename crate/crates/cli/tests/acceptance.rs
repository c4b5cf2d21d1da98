//! End-to-end acceptance checks, one PASS/FAIL line each.
//!
//! Trend checks train real models through the `negprompt` binary and take tens
//! of minutes on one core. Set `ACCEPTANCE_ONLY=P1,P4` to run a subset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng as _;

use negprompt_core::dataengine::{
    load_dataset, synthesize_dataset, Annotation, Scene, SynthConfig,
};
use negprompt_core::detector::{
    decode_checkpoint, encode_checkpoint, forward_train, image_features, train, DetectorConfig,
    ModelParams, TrainConfig,
};
use negprompt_core::evalkit::{
    compute_ap, evaluate_model, DetectionRecord, EvalConfig, EvalSettings,
};
use negprompt_core::geometry::{giou, iou, jitter_box, BBox, JitterSpec};
use negprompt_core::losses::{
    focal_loss, focal_loss_logit, giou_loss, l1_box_loss, nnh_loss, FocalConfig, NnhConfig,
};
use negprompt_core::matching::{hungarian, CostMatrix};
use negprompt_core::numcore::{
    grad_check, grad_check_coords, sigmoid_scalar, GradCheckReport, Tensor,
};
use negprompt_core::prompt::{encode_prompt, FeaturePyramid, Polarity, VisualPrompt};
use negprompt_core::rng::stream;
use negprompt_core::scoring::{
    infer_detections, nnc_cell, nnc_probability, similarity, InferenceMode, PromptSet,
};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- P1

fn tally(
    r: &GradCheckReport,
    probes: &mut usize,
    worst: &mut f64,
    what: &str,
) -> Result<(), String> {
    ensure(r.passed, format!("{what}: {r:?}"))?;
    *probes += r.checked;
    *worst = worst.max(r.max_rel_error);
    Ok(())
}

fn random_box(rng: &mut negprompt_core::rng::Rng) -> [f64; 4] {
    [
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.05..0.5),
        rng.gen_range(0.05..0.5),
    ]
}

fn p1_gradients() -> Check {
    let start = Instant::now();
    let mut rng = stream(101, "p1");
    let (mut loss_probes, mut loss_worst) = (0, 0.0f64);
    let focal = FocalConfig::default();
    let nnh = NnhConfig::default();
    for i in 0..100 {
        let pos = i % 2 == 0;
        let z: f64 = rng.gen_range(-6.0..6.0);
        let (_, dz) = focal_loss_logit(z, pos, &focal);
        let r = grad_check(
            |x| Ok(focal_loss_logit(x[0], pos, &focal).0),
            &[z],
            &[dz],
            1e-5,
            1e-4,
        )
        .map_err(err)?;
        tally(&r, &mut loss_probes, &mut loss_worst, "focal")?;
        let p: f64 = rng.gen_range(0.01..0.99);
        let (_, dp) = focal_loss(p, pos, &focal);
        let r = grad_check(
            |x| Ok(focal_loss(x[0], pos, &focal).0),
            &[p],
            &[dp],
            1e-6,
            1e-4,
        )
        .map_err(err)?;
        tally(&r, &mut loss_probes, &mut loss_worst, "focal(p)")?;

        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, d_sp, d_sn) = nnh_loss(x[0], &x[1..], &nnh).map_err(err)?;
        let analytic: Vec<f64> = std::iter::once(d_sp).chain(d_sn).collect();
        let r = grad_check(
            |v| Ok(nnh_loss(v[0], &v[1..], &nnh)?.0),
            &x,
            &analytic,
            1e-6,
            1e-4,
        )
        .map_err(err)?;
        tally(&r, &mut loss_probes, &mut loss_worst, "nnh")?;

        let (p, t) = (random_box(&mut rng), random_box(&mut rng));
        let (_, g) = l1_box_loss(&p, &t);
        let r = grad_check(
            |x| Ok(l1_box_loss(&[x[0], x[1], x[2], x[3]], &t).0),
            &p,
            &g,
            1e-5,
            1e-4,
        )
        .map_err(err)?;
        tally(&r, &mut loss_probes, &mut loss_worst, "l1")?;
        let (_, g) = giou_loss(&p, &t);
        let r = grad_check(
            |x| Ok(giou_loss(&[x[0], x[1], x[2], x[3]], &t).0),
            &p,
            &g,
            1e-5,
            1e-4,
        )
        .map_err(err)?;
        tally(&r, &mut loss_probes, &mut loss_worst, "giou")?;
    }
    ensure(
        loss_probes >= 100,
        format!("only {loss_probes} loss probes"),
    )?;

    // end-to-end micro-batch on a tiny detector
    let manifest = synthesize_dataset(&SynthConfig {
        num_scenes: 8,
        num_categories: 4,
        confusable_pairs: SynthConfig::consecutive_pairs(1),
        image_size: 16,
        min_object: 4,
        max_object: 7,
        max_overlap: 0.3,
        seed: 3,
        ..SynthConfig::default()
    })
    .map_err(err)?;
    let model_cfg = DetectorConfig {
        image_size: 16,
        channels: 4,
        dim: 8,
        num_queries: 4,
        grid: 2,
        k: 2,
        ffn_hidden: 8,
        ..DetectorConfig::default()
    };
    let model = ModelParams::init(model_cfg, &mut stream(4, "init")).map_err(err)?;
    let scenes: Vec<&Scene> = manifest
        .scenes
        .iter()
        .filter(|s| !s.annotations.is_empty())
        .take(2)
        .collect();
    let train_cfg = TrainConfig {
        batch_size: 2,
        k: 2,
        ..TrainConfig::default()
    };
    let names = [
        "backbone.conv0.w",
        "backbone.conv2.b",
        "decoder.query",
        "decoder.ref",
        "decoder.0.roi1",
        "decoder.1.ca_q",
        "decoder.1.box2",
        "head.cls",
        "prompt.q_neg",
        "prompt.w_k",
    ];
    let (mut e2e_probes, mut e2e_worst) = (0, 0.0f64);
    for indicator in [0u8, 1] {
        let diag = forward_train(
            &model,
            &scenes,
            &train_cfg,
            indicator,
            &mut stream(5, "jitter"),
        )
        .map_err(err)?;
        let mut prng = stream(u64::from(indicator), "probe");
        for name in names {
            let base = model.params.get(name).map_err(err)?.clone();
            for _ in 0..5 {
                let i = prng.gen_range(0..base.len());
                let analytic = diag.grads.get(name).map_or(0.0, |g| g.data()[i]);
                let f =
                    |x: &[f64]| {
                        let mut p = model.clone();
                        let mut data = base.data().to_vec();
                        data[i] = x[0];
                        *p.params.get_mut(name)? = Tensor::new(base.dims().to_vec(), data)?;
                        Ok(forward_train(
                            &p,
                            &scenes,
                            &train_cfg,
                            indicator,
                            &mut stream(5, "jitter"),
                        )?
                        .loss)
                    };
                let r = grad_check_coords(f, &[base.data()[i]], &[analytic], &[0], 1e-6, 1e-3)
                    .map_err(err)?;
                tally(
                    &r,
                    &mut e2e_probes,
                    &mut e2e_worst,
                    &format!("{name}[{i}] indicator {indicator}"),
                )?;
            }
        }
    }
    ensure(
        e2e_probes >= 100,
        format!("only {e2e_probes} end-to-end probes"),
    )?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "{loss_probes} loss probes (max rel err {loss_worst:.1e}), {e2e_probes} end-to-end probes (max rel err {e2e_worst:.1e}), {secs:.1}s"
    ))
}

// ---------------------------------------------------------------- P2

/// Every injection of the shorter side into the longer one, cheapest kept.
fn exhaustive_pairs(rows: usize, cols: usize, data: &[f64]) -> Vec<(usize, usize)> {
    fn go(
        i: usize,
        n: usize,
        m: usize,
        at: &dyn Fn(usize, usize) -> f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        best: &mut (f64, Vec<usize>),
    ) {
        if i == n {
            let total: f64 = cur.iter().enumerate().map(|(a, &b)| at(a, b)).sum();
            if total < best.0 {
                *best = (total, cur.clone());
            }
            return;
        }
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                go(i + 1, n, m, at, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let transposed = rows > cols;
    let (n, m) = if transposed {
        (cols, rows)
    } else {
        (rows, cols)
    };
    let at = |a: usize, b: usize| {
        if transposed {
            data[b * cols + a]
        } else {
            data[a * cols + b]
        }
    };
    let mut best = (f64::INFINITY, Vec::new());
    go(
        0,
        n,
        m,
        &at,
        &mut vec![false; m],
        &mut Vec::new(),
        &mut best,
    );
    best.1
        .into_iter()
        .enumerate()
        .map(|(a, b)| if transposed { (b, a) } else { (a, b) })
        .collect()
}

fn row_order_cost(pairs: &[(usize, usize)], cols: usize, data: &[f64]) -> f64 {
    let mut p = pairs.to_vec();
    p.sort_unstable();
    p.iter().map(|&(r, c)| data[r * cols + c]).sum()
}

fn p2_matching() -> Check {
    let start = Instant::now();
    let worked = CostMatrix::from_rows(&[
        vec![4.0, 1.0, 3.0],
        vec![2.0, 0.0, 5.0],
        vec![3.0, 2.0, 2.0],
    ])
    .map_err(err)?;
    let a = hungarian(&worked);
    ensure(
        a.total_cost == 5.0,
        format!("worked example cost {}", a.total_cost),
    )?;
    ensure(
        a.pairs == vec![(1, 0), (0, 1), (2, 2)],
        format!("worked example pairs {:?}", a.pairs),
    )?;
    let mut rng = stream(202, "p2");
    for case in 0..200 {
        let rows = rng.gen_range(1..=7);
        let cols = rng.gen_range(1..=5);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let c = CostMatrix::new(rows, cols, data.clone()).map_err(err)?;
        let fast = hungarian(&c);
        let slow = exhaustive_pairs(rows, cols, &data);
        let (fc, sc) = (
            row_order_cost(&fast.pairs, cols, &data),
            row_order_cost(&slow, cols, &data),
        );
        ensure(
            fc == sc,
            format!("case {case} ({rows}x{cols}): {fc} vs {sc}"),
        )?;
        ensure(
            fast.pairs.len() == rows.min(cols),
            format!("case {case}: {} pairs", fast.pairs.len()),
        )?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "worked example cost 5, 200 random matrices equal, {secs:.2}s"
    ))
}

// ---------------------------------------------------------------- P3

/// Length of `[a, b] ∩ [c, d]` summed cell by cell over an `n`-cell raster of `[lo, lo + n·cell]`.
fn raster_length(lo: f64, cell: f64, n: usize, spans: &[(f64, f64)]) -> f64 {
    let a = spans.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let b = spans.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let mut covered = 0.0;
    for i in 0..n {
        let c0 = lo + i as f64 * cell;
        let c1 = c0 + cell;
        covered += (b.min(c1) - a.max(c0)).max(0.0) / cell;
    }
    covered * cell
}

fn raster_iou_giou(a: &BBox, b: &BBox, n: usize) -> (f64, f64) {
    let (lx, ly) = (a.x.min(b.x), a.y.min(b.y));
    let (hx, hy) = (a.x2().max(b.x2()), a.y2().max(b.y2()));
    let (cx, cy) = ((hx - lx) / n as f64, (hy - ly) / n as f64);
    let area = |xs: &[(f64, f64)], ys: &[(f64, f64)]| {
        raster_length(lx, cx, n, xs) * raster_length(ly, cy, n, ys)
    };
    let (ax, ay, bx, by) = ((a.x, a.x2()), (a.y, a.y2()), (b.x, b.x2()), (b.y, b.y2()));
    let inter = area(&[ax, bx], &[ay, by]);
    let union = area(&[ax], &[ay]) + area(&[bx], &[by]) - inter;
    let enclose = area(&[(lx, hx)], &[(ly, hy)]);
    (inter / union, inter / union - (enclose - union) / enclose)
}

fn p3_geometry() -> Check {
    let start = Instant::now();
    let b = |x, y, w, h| BBox::new(x, y, w, h).unwrap();
    let (a, c) = (b(0.0, 0.0, 2.0, 2.0), b(1.0, 1.0, 2.0, 2.0));
    ensure(
        (iou(&a, &c) - 1.0 / 7.0).abs() < 1e-12,
        format!("iou anchor {}", iou(&a, &c)),
    )?;
    ensure(
        (giou(&a, &c) + 5.0 / 63.0).abs() < 1e-12,
        format!("giou anchor {}", giou(&a, &c)),
    )?;
    let (ri, rg) = raster_iou_giou(&a, &c, 2000);
    ensure(
        (ri - 1.0 / 7.0).abs() < 1e-3 && (rg + 5.0 / 63.0).abs() < 1e-3,
        "raster anchors",
    )?;
    let mut rng = stream(303, "p3");
    let mut worst = 0.0f64;
    for case in 0..10_000 {
        let mut rb = || {
            b(
                rng.gen_range(0.0..50.0),
                rng.gen_range(0.0..50.0),
                rng.gen_range(0.5..30.0),
                rng.gen_range(0.5..30.0),
            )
        };
        let (p, q) = (rb(), rb());
        let (ri, rg) = raster_iou_giou(&p, &q, 2000);
        let (i, g) = (iou(&p, &q), giou(&p, &q));
        worst = worst.max((ri - i).abs()).max((rg - g).abs());
        ensure(
            (ri - i).abs() < 1e-3 && (rg - g).abs() < 1e-3,
            format!("case {case}: {i} {g} vs raster {ri} {rg}"),
        )?;
        ensure(g <= i, format!("case {case}: giou {g} > iou {i}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "anchors 1/7 and -5/63, 10k pairs max |diff| {worst:.1e}, {secs:.1}s"
    ))
}

// ---------------------------------------------------------------- P4

fn random_matrix(rng: &mut negprompt_core::rng::Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn p4_nnc() -> Check {
    let p = nnc_cell(2.0, Some(3.0), 0.3, 1);
    ensure(
        (p - 0.75026).abs() < 1e-5,
        format!("sigma(1.1) fixture {p}"),
    )?;
    let p = nnc_cell(2.0, Some(3.0), 0.3, 0);
    ensure(
        (p - 0.88080).abs() < 1e-5,
        format!("sigma(2.0) fixture {p}"),
    )?;
    let mut rng = stream(404, "p4");
    for case in 0..10_000 {
        let (nq, m, d) = (
            rng.gen_range(1..5),
            rng.gen_range(1..4),
            rng.gen_range(1..5),
        );
        let queries = random_matrix(&mut rng, nq, d);
        let negatives = (0..m)
            .map(|_| {
                let k = rng.gen_range(0..4);
                (k > 0).then(|| random_matrix(&mut rng, k, d))
            })
            .collect();
        let prompts = PromptSet::new(
            (0..m as u32).collect(),
            random_matrix(&mut rng, m, d),
            negatives,
        )
        .map_err(err)?;
        let s = similarity(&queries, &prompts).map_err(err)?;
        let plain = nnc_probability(&s, 0.3, 0).map_err(err)?;
        let zero_beta = nnc_probability(&s, 0.0, 1).map_err(err)?;
        let positive_only: Vec<f64> = s.s_p.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        ensure(
            plain.data() == positive_only.as_slice(),
            format!("case {case}: indicator 0 differs"),
        )?;
        ensure(
            zero_beta.data() == positive_only.as_slice(),
            format!("case {case}: beta 0 differs"),
        )?;

        let (b1, b2): (f64, f64) = (rng.gen_range(0.0..0.9), rng.gen_range(0.0..0.9));
        let (lo, hi) = (b1.min(b2), b1.max(b2));
        let p_lo = nnc_probability(&s, lo, 1).map_err(err)?;
        let p_hi = nnc_probability(&s, hi, 1).map_err(err)?;
        for q in 0..nq {
            for c in 0..m {
                let i = q * m + c;
                if let Some(mx) = s.max_negative(q, c) {
                    // larger beta lowers the probability iff the strongest negative is positive
                    let ok = if mx >= 0.0 {
                        p_hi.data()[i] <= p_lo.data()[i]
                    } else {
                        p_hi.data()[i] >= p_lo.data()[i]
                    };
                    ensure(ok, format!("case {case}: beta monotonicity at ({q},{c})"))?;
                    let raised =
                        nnc_cell(s.s_p.at(q, c), Some(mx + rng.gen_range(0.0..1.0)), hi, 1);
                    ensure(
                        raised <= p_hi.data()[i],
                        format!("case {case}: max S_N monotonicity"),
                    )?;
                }
            }
        }

        // the detection pipeline agrees: beta 0 and positive-only mode give identical output
        let boxes: Vec<BBox> = (0..nq)
            .map(|i| BBox::new(i as f64, 0.0, 1.0, 1.0).unwrap())
            .collect();
        let a = infer_detections(
            &queries,
            &boxes,
            &prompts,
            0.3,
            InferenceMode::PositiveOnly,
            0.0,
        )
        .map_err(err)?;
        let b = infer_detections(
            &queries,
            &boxes,
            &prompts,
            0.0,
            InferenceMode::AutoSuggested,
            0.0,
        )
        .map_err(err)?;
        let strip = |v: &[negprompt_core::scoring::Detection]| {
            v.iter()
                .map(|d| (d.query, d.category_id, d.probability.to_bits()))
                .collect::<Vec<_>>()
        };
        ensure(
            strip(&a) == strip(&b),
            format!("case {case}: beta 0 pipeline differs"),
        )?;
    }
    Ok("fixtures 0.75026 / 0.88080, bit-equal beta=0 and indicator=0 paths, monotone on 10k tensors".into())
}

// ---------------------------------------------------------------- P5

fn p5_nnh() -> Check {
    let cfg = NnhConfig::default();
    let f = |s_p: f64, s_n: &[f64]| nnh_loss(s_p, s_n, &cfg).map(|r| r.0).map_err(err);
    ensure(f(1.0, &[0.5, 0.9])? == 0.1, "fixture 0.1")?;
    ensure(f(2.0, &[0.5, 1.7])? == 0.0, "fixture 0")?;
    ensure(f(0.0, &[0.5])? == 0.8, "fixture 0.8")?;
    let mut rng = stream(505, "p5");
    for case in 0..10_000 {
        let k = rng.gen_range(1..6);
        let s_p: f64 = rng.gen_range(-2.0..2.0);
        let s_n: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let base = f(s_p, &s_n)?;
        let c: f64 = rng.gen_range(-3.0..3.0);
        let moved: Vec<f64> = s_n.iter().map(|v| v + c).collect();
        ensure(
            (f(s_p + c, &moved)? - base).abs() < 1e-12,
            format!("case {case}: translation"),
        )?;
        let up: f64 = rng.gen_range(0.0..1.0);
        ensure(
            f(s_p + up, &s_n)? <= base,
            format!("case {case}: S_P monotonicity"),
        )?;
        let mut raised = s_n.clone();
        let j = rng.gen_range(0..k);
        raised[j] += up;
        ensure(
            f(s_p, &raised)? >= base,
            format!("case {case}: S_N monotonicity"),
        )?;
    }
    Ok(
        "fixtures 0.1 / 0 / 0.8 exact, translation invariance and monotonicity on 10k inputs"
            .into(),
    )
}

// ---------------------------------------------------------------- P6

/// Reference AP with plain loops: interpolated precision is the best precision
/// among all ranks whose recall reaches the level.
fn brute_force_ap(dets: &[DetectionRecord], gts: &[Annotation], thresholds: &[f64]) -> f64 {
    let mut cats: Vec<u32> = gts.iter().map(|g| g.category_id).collect();
    cats.sort_unstable();
    cats.dedup();
    if cats.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &cats {
        let mine: Vec<&Annotation> = gts.iter().filter(|g| g.category_id == c).collect();
        let mut ds: Vec<&DetectionRecord> = dets.iter().filter(|d| d.category_id == c).collect();
        ds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut per_t = 0.0;
        for &t in thresholds {
            let mut matched = vec![false; mine.len()];
            let mut tp = 0.0;
            let mut points = Vec::new();
            for (rank, d) in ds.iter().enumerate() {
                let mut pick = None;
                let mut pick_iou = -1.0;
                for (j, g) in mine.iter().enumerate() {
                    if matched[j] || g.image_id != d.image_id {
                        continue;
                    }
                    let v = iou(&d.bbox, &g.bbox);
                    if v >= t && v > pick_iou {
                        pick = Some(j);
                        pick_iou = v;
                    }
                }
                if let Some(j) = pick {
                    matched[j] = true;
                    tp += 1.0;
                }
                points.push((tp / mine.len() as f64, tp / (rank + 1) as f64));
            }
            let sum: f64 = (0..=100)
                .map(|k| {
                    let r = k as f64 / 100.0;
                    points
                        .iter()
                        .filter(|(rec, _)| *rec >= r)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum();
            per_t += sum / 101.0;
        }
        total += per_t / thresholds.len() as f64;
    }
    total / cats.len() as f64
}

fn p6_ap() -> Check {
    let bx = |x, y, w, h| BBox::new(x, y, w, h).unwrap();
    let gts = [Annotation {
        id: 0,
        image_id: 0,
        category_id: 1,
        bbox: bx(0.0, 0.0, 10.0, 10.0),
    }];
    let dets = [DetectionRecord {
        image_id: 0,
        category_id: 1,
        bbox: bx(0.0, 0.0, 10.0, 9.0),
        score: 0.99,
    }];
    let ap = compute_ap(&dets, &gts, &EvalConfig::default()).ap;
    ensure(ap == 0.9, format!("IoU-0.9 fixture gives {ap}"))?;

    let cfg = EvalConfig::default();
    let mut rng = stream(606, "p6");
    let mut worst = 0.0f64;
    for case in 0..500 {
        let mut gts = Vec::new();
        let mut taken = std::collections::BTreeSet::new();
        for id in 0..rng.gen_range(1..10u64) {
            let (img, cat, cell) = (
                rng.gen_range(0..4u64),
                rng.gen_range(0..3u32),
                rng.gen_range(0..4usize),
            );
            if !taken.insert((img, cat, cell)) {
                continue;
            }
            let (ox, oy) = ((cell % 2) as f64 * 25.0, (cell / 2) as f64 * 25.0);
            gts.push(Annotation {
                id,
                image_id: img,
                category_id: cat,
                bbox: bx(
                    ox + rng.gen_range(0.0..8.0),
                    oy + rng.gen_range(0.0..8.0),
                    rng.gen_range(4.0..12.0),
                    rng.gen_range(4.0..12.0),
                ),
            });
        }
        let mut dets = Vec::new();
        for _ in 0..rng.gen_range(0..12) {
            let g = &gts[rng.gen_range(0..gts.len())];
            let s = rng.gen_range(0.8..1.2);
            dets.push(DetectionRecord {
                image_id: g.image_id,
                category_id: g.category_id,
                bbox: bx(
                    g.bbox.x + rng.gen_range(-2.0..2.0),
                    g.bbox.y + rng.gen_range(-2.0..2.0),
                    g.bbox.w * s,
                    g.bbox.h * s,
                ),
                score: rng.gen_range(0.0..1.0),
            });
        }
        for _ in 0..rng.gen_range(0..5) {
            dets.push(DetectionRecord {
                image_id: rng.gen_range(0..4),
                category_id: rng.gen_range(0..3),
                bbox: bx(
                    rng.gen_range(0.0..40.0),
                    rng.gen_range(0.0..40.0),
                    rng.gen_range(2.0..20.0),
                    rng.gen_range(2.0..20.0),
                ),
                score: rng.gen_range(0.0..1.0),
            });
        }
        let fast = compute_ap(&dets, &gts, &cfg).ap;
        let slow = brute_force_ap(&dets, &gts, &cfg.iou_thresholds);
        worst = worst.max((fast - slow).abs());
        ensure(
            (fast - slow).abs() < 1e-6,
            format!("case {case}: {fast} vs {slow}"),
        )?;
    }
    Ok(format!(
        "IoU-0.9 fixture AP = 0.9, 500 random cases max |diff| {worst:.1e}"
    ))
}

// ---------------------------------------------------------------- CLI helpers

fn negprompt(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_negprompt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!(
            "negprompt {args:?}: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Columns of the single data row of an eval CSV.
fn eval_row(dir: &Path) -> Result<BTreeMap<String, String>, String> {
    let text = std::fs::read_to_string(dir.join("eval.csv")).map_err(err)?;
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().ok_or("empty eval.csv")?.split(',').collect();
    let row: Vec<&str> = lines.next().ok_or("no eval row")?.split(',').collect();
    Ok(head
        .iter()
        .zip(row)
        .map(|(h, v)| (h.to_string(), v.to_string()))
        .collect())
}

fn field(row: &BTreeMap<String, String>, name: &str) -> Result<f64, String> {
    row.get(name)
        .ok_or(format!("no column {name}"))?
        .parse()
        .map_err(err)
}

/// `axis_value → ap` from a sweep CSV.
fn sweep_rows(dir: &Path) -> Result<BTreeMap<String, f64>, String> {
    let text = std::fs::read_to_string(dir.join("sweep.csv")).map_err(err)?;
    text.lines()
        .skip(1)
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            Ok((cols[0].to_string(), cols[1].parse().map_err(err)?))
        })
        .collect()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    corpus: Option<PathBuf>,
    positive_only: Option<PathBuf>,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Workspace {
            _dir: dir,
            root,
            corpus: None,
            positive_only: None,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// The default hard-negative corpus: 20 categories, 4 confusable pairs, seed 0.
    fn corpus(&mut self) -> Result<PathBuf, String> {
        if let Some(c) = &self.corpus {
            return Ok(c.clone());
        }
        let dir = self.path("corpus");
        negprompt(&["gen-data", "--seed", "0", "--out", s(&dir)])?;
        self.corpus = Some(dir.clone());
        Ok(dir)
    }
}

const POSITIVE_ONLY_TOML: &str = r#"
[model]
memory_level = 2

[train]
steps = 3000
mode_policy = "fixed_0"
k = 0
"#;

const POLICY_TOML: &str = r#"
[model]
memory_level = 2

[train]
steps = 1500
k = 3
"#;

// ---------------------------------------------------------------- P7

fn p7_training_free_nnc(ws: &mut Workspace) -> Check {
    let start = Instant::now();
    let data = ws.corpus()?;
    let cfg = ws.path("positive_only.toml");
    std::fs::write(&cfg, POSITIVE_ONLY_TOML).map_err(err)?;
    let run = ws.path("positive_only");
    negprompt(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&run),
    ])?;
    let ckpt = run.join("checkpoint.npck");
    ws.positive_only = Some(ckpt.clone());
    let mut rows = Vec::new();
    for (name, mode, beta) in [
        ("plain", "positive_only", "0.3"),
        ("beta0", "auto_suggested", "0"),
        ("beta03", "auto_suggested", "0.3"),
    ] {
        let out = ws.path(&format!("p7_{name}"));
        negprompt(&[
            "eval",
            "--data",
            s(&data),
            "--checkpoint",
            s(&ckpt),
            "--mode",
            mode,
            "--beta",
            beta,
            "--out",
            s(&out),
        ])?;
        rows.push(eval_row(&out)?);
    }
    let secs = start.elapsed().as_secs_f64();
    let (ap_plain, ap0, ap3) = (
        field(&rows[0], "ap")?,
        field(&rows[1], "ap")?,
        field(&rows[2], "ap")?,
    );
    let (fp0, fp3) = (
        field(&rows[1], "confusable_fp")?,
        field(&rows[2], "confusable_fp")?,
    );
    let detail = format!(
        "AP positive_only {ap_plain:.4}, auto beta=0 {ap0:.4}, auto beta=0.3 {ap3:.4}; confusable FPs {fp0} -> {fp3}; {:.1} min",
        secs / 60.0
    );
    ensure(ap3 > ap0, format!("AP not higher at beta 0.3: {detail}"))?;
    ensure(
        ap3 > ap_plain,
        format!("auto_suggested not above positive_only: {detail}"),
    )?;
    ensure(
        fp0 > 0.0 && fp3 <= 0.8 * fp0,
        format!("confusable FPs did not drop 20%: {detail}"),
    )?;
    ensure(secs < 15.0 * 60.0, format!("pipeline too slow: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- P8

fn p8_mode_switching(ws: &mut Workspace) -> Check {
    let data = ws.corpus()?;
    let cfg = ws.path("policy.toml");
    std::fs::write(&cfg, POLICY_TOML).map_err(err)?;
    let out = ws.path("p8");
    negprompt(&[
        "sweep",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--axis",
        "mode_policy",
        "--grid",
        "fixed_0,fixed_1,bernoulli(0.5)",
        "--out",
        s(&out),
    ])?;
    let rows = sweep_rows(&out)?;
    let ap = |policy: &str, mode: &str| {
        rows.get(&format!("{policy}|{mode}"))
            .copied()
            .ok_or(format!("missing row {policy}|{mode}"))
    };
    let mut detail = Vec::new();
    for mode in ["positive_only", "auto_suggested"] {
        let (f0, f1, b) = (
            ap("fixed_0", mode)?,
            ap("fixed_1", mode)?,
            ap("bernoulli(0.5)", mode)?,
        );
        detail.push(format!(
            "{mode}: fixed_0 {f0:.4} fixed_1 {f1:.4} bernoulli {b:.4}"
        ));
        ensure(
            b >= f0.max(f1) - 0.01,
            format!(
                "bernoulli more than 1 AP below the best fixed policy; {}",
                detail.join("; ")
            ),
        )?;
    }
    let (f0, b) = (
        ap("fixed_0", "auto_suggested")?,
        ap("bernoulli(0.5)", "auto_suggested")?,
    );
    ensure(
        b >= f0,
        format!(
            "bernoulli below fixed_0 in joint mode; {}",
            detail.join("; ")
        ),
    )?;
    Ok(detail.join("; "))
}

// ---------------------------------------------------------------- P9

fn p9_beta_peak(ws: &mut Workspace) -> Check {
    let data = ws.corpus()?;
    let ckpt = match &ws.positive_only {
        Some(c) => c.clone(),
        None => {
            let cfg = ws.path("positive_only.toml");
            std::fs::write(&cfg, POSITIVE_ONLY_TOML).map_err(err)?;
            let run = ws.path("positive_only");
            negprompt(&[
                "train",
                "--config",
                s(&cfg),
                "--data",
                s(&data),
                "--out",
                s(&run),
            ])?;
            run.join("checkpoint.npck")
        }
    };
    let out = ws.path("p9");
    negprompt(&[
        "sweep",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--axis",
        "beta",
        "--grid",
        "0,0.1,0.3,0.5,0.9",
        "--out",
        s(&out),
    ])?;
    let rows = sweep_rows(&out)?;
    let get = |k: &str| rows.get(k).copied().ok_or(format!("missing beta {k}"));
    let interior = get("0.1")?.max(get("0.3")?).max(get("0.5")?);
    let (edge0, edge9) = (get("0")?, get("0.9")?);
    let detail = rows
        .iter()
        .map(|(k, v)| format!("beta {k}: {v:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(
        interior > edge0 && interior > edge9,
        format!("no interior peak: {detail}"),
    )?;
    Ok(detail)
}

// ---------------------------------------------------------------- P10

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn p10_determinism(ws: &mut Workspace) -> Check {
    let (d1, d2) = (ws.path("p10_data_a"), ws.path("p10_data_b"));
    for d in [&d1, &d2] {
        negprompt(&["gen-data", "--seed", "7", "--scenes", "120", "--out", s(d)])?;
    }
    ensure(
        snapshot(&d1) == snapshot(&d2),
        "gen-data differs between runs",
    )?;
    let (t1, t2) = (ws.path("p10_train_a"), ws.path("p10_train_b"));
    for t in [&t1, &t2] {
        negprompt(&[
            "train",
            "--data",
            s(&d1),
            "--steps",
            "50",
            "--seed",
            "7",
            "--out",
            s(t),
        ])?;
    }
    ensure(
        snapshot(&t1) == snapshot(&t2),
        "50-step training differs between runs",
    )?;
    let ckpt = t1.join("checkpoint.npck");
    let (e1, e2) = (ws.path("p10_eval_a"), ws.path("p10_eval_b"));
    for e in [&e1, &e2] {
        negprompt(&[
            "eval",
            "--data",
            s(&d1),
            "--checkpoint",
            s(&ckpt),
            "--seed",
            "7",
            "--out",
            s(e),
        ])?;
    }
    ensure(snapshot(&e1) == snapshot(&e2), "eval differs between runs")?;

    // in-memory model vs its checkpoint round trip
    let manifest = load_dataset(&d1).map_err(err)?;
    let cfg = TrainConfig {
        steps: 50,
        seed: 7,
        ..TrainConfig::default()
    };
    let model = train(&manifest, DetectorConfig::default(), &cfg, None)
        .map_err(err)?
        .model;
    let bytes = encode_checkpoint(&model).map_err(err)?;
    ensure(
        bytes == std::fs::read(&ckpt).map_err(err)?,
        "library and CLI checkpoints differ",
    )?;
    let restored = decode_checkpoint(&bytes).map_err(err)?;
    ensure(
        encode_checkpoint(&restored).map_err(err)? == bytes,
        "re-encoding changes the checkpoint",
    )?;
    let settings = EvalSettings {
        seed: 7,
        ..EvalSettings::default()
    };
    let a = evaluate_model(&model, &manifest, &settings).map_err(err)?;
    let b = evaluate_model(&restored, &manifest, &settings).map_err(err)?;
    ensure(
        a.detections == b.detections && a.result == b.result,
        "round-tripped checkpoint evaluates differently",
    )?;
    Ok(format!(
        "gen-data, 50-step train and eval byte-identical across reruns; round-trip eval bit-exact ({} detections)",
        a.detections.len()
    ))
}

// ---------------------------------------------------------------- P11

/// Copy of `pyr` with noise added to every cell whose footprint misses `b`.
fn perturb_outside(
    pyr: &FeaturePyramid,
    b: &BBox,
    rng: &mut negprompt_core::rng::Rng,
) -> FeaturePyramid {
    let mut out = pyr.clone();
    for (l, level) in out.levels.iter_mut().enumerate() {
        let st = pyr.strides[l] as f64;
        let (c, h, w) = (level.dims()[0], level.dims()[1], level.dims()[2]);
        let mut data = level.data().to_vec();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let hit_x = (x as f64 + 1.0) * st > b.x && (x as f64) * st < b.x2();
                    let hit_y = (y as f64 + 1.0) * st > b.y && (y as f64) * st < b.y2();
                    if !(hit_x && hit_y) {
                        data[(ch * h + y) * w + x] += rng.gen_range(-5.0..5.0);
                    }
                }
            }
        }
        *level = Tensor::new(vec![c, h, w], data).unwrap();
    }
    out
}

fn p11_prompt_encoder() -> Check {
    let model =
        ModelParams::init(DetectorConfig::default(), &mut stream(11, "init")).map_err(err)?;
    let manifest = synthesize_dataset(&SynthConfig {
        num_scenes: 4,
        seed: 11,
        ..SynthConfig::default()
    })
    .map_err(err)?;
    let pcfg = model.config.prompt_config();
    let mut rng = stream(1111, "p11");
    let mut checked = 0;
    for scene in &manifest.scenes {
        let pyr = image_features(&model, &scene.pixels).map_err(err)?;
        for _ in 0..50 {
            let (x, y) = (rng.gen_range(0.0..48.0), rng.gen_range(0.0..48.0));
            let b = BBox::new(
                x,
                y,
                rng.gen_range(2.0..64.0 - x),
                rng.gen_range(2.0..64.0 - y),
            )
            .map_err(err)?;
            let noisy = perturb_outside(&pyr, &b, &mut rng);
            for polarity in [Polarity::Positive, Polarity::Negative] {
                let prompt = VisualPrompt {
                    category_id: 0,
                    bbox: b,
                    polarity,
                    source_image_id: scene.image_id,
                };
                let clean = encode_prompt(&prompt, &pyr, &model.params, &pcfg).map_err(err)?;
                let moved = encode_prompt(&prompt, &noisy, &model.params, &pcfg).map_err(err)?;
                ensure(clean == moved, format!("embedding moved for {b:?}"))?;
                checked += 1;
            }
        }
    }
    let (pos, neg) = (JitterSpec::positive(), JitterSpec::negative());
    let (mut sum_pos, mut sum_neg) = (0.0, 0.0);
    for seed in 0..1000u64 {
        let mut r = stream(seed, "jitter");
        let g = BBox::new(
            r.gen_range(8.0..30.0),
            r.gen_range(8.0..30.0),
            r.gen_range(6.0..20.0),
            r.gen_range(6.0..20.0),
        )
        .map_err(err)?;
        sum_pos += iou(&g, &jitter_box(&g, &pos, 64.0, 64.0, &mut r).map_err(err)?);
        sum_neg += iou(&g, &jitter_box(&g, &neg, 64.0, 64.0, &mut r).map_err(err)?);
    }
    let (mp, mn) = (sum_pos / 1000.0, sum_neg / 1000.0);
    ensure(
        mp > mn,
        format!("mean IoU positive {mp:.3} <= negative {mn:.3}"),
    )?;
    Ok(format!("{checked} embeddings bit-identical under out-of-box noise; mean jitter IoU {mp:.3} (pos) vs {mn:.3} (neg)"))
}

// ---------------------------------------------------------------- driver

type Runner = Box<dyn FnOnce(&mut Workspace) -> Check>;

fn main() {
    // libtest flags (e.g. from `cargo test -- --nocapture`) are accepted and ignored
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_uppercase()).collect());
    let wanted = |id: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == id));
    let mut ws = Workspace::new();
    let checks: Vec<(&str, Runner)> = vec![
        ("P1", Box::new(|_| p1_gradients())),
        ("P2", Box::new(|_| p2_matching())),
        ("P3", Box::new(|_| p3_geometry())),
        ("P4", Box::new(|_| p4_nnc())),
        ("P5", Box::new(|_| p5_nnh())),
        ("P6", Box::new(|_| p6_ap())),
        ("P7", Box::new(p7_training_free_nnc)),
        ("P8", Box::new(p8_mode_switching)),
        ("P9", Box::new(p9_beta_peak)),
        ("P10", Box::new(p10_determinism)),
        ("P11", Box::new(|_| p11_prompt_encoder())),
    ];
    let mut failed = 0;
    let total = Instant::now();
    for (id, check) in checks {
        if !wanted(id) {
            continue;
        }
        let start = Instant::now();
        let outcome = check(&mut ws);
        let took = Duration::from_secs_f64(start.elapsed().as_secs_f64());
        match outcome {
            Ok(detail) => println!("{id} PASS {detail} [{took:.1?}]"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL {detail} [{took:.1?}]");
            }
        }
    }
    println!("acceptance: {failed} failed [{:.1?}]", total.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
