use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{
    buckets_from_counts, Annotation, Category, DatasetManifest, Scene, ShapeFamily, Signature,
    SynthConfig,
};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::numcore::Tensor;
use crate::rng::{indexed_stream, stream, Rng};

const PLACEMENT_ATTEMPTS: usize = 50;
const ASPECTS: [f64; 3] = [1.0, 1.7, 0.6];
const TEXTURES: [f64; 3] = [0.0, 2.0, 3.0];

/// Normalized `1/rank^s` weights for ranks `1..=n`.
pub fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-exponent)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn partner_map(cfg: &SynthConfig) -> Result<BTreeMap<u32, u32>> {
    let n = cfg.num_categories as u32;
    let mut map = BTreeMap::new();
    for &(a, b) in &cfg.confusable_pairs {
        if a >= n || b >= n || a == b {
            return Err(Error::Invalid(format!(
                "confusable pair ({a}, {b}) with {n} categories"
            )));
        }
        if map.contains_key(&a) || map.contains_key(&b) {
            return Err(Error::Invalid(format!(
                "category in more than one pair: ({a}, {b})"
            )));
        }
        map.insert(a, b);
        map.insert(b, a);
    }
    Ok(map)
}

#[allow(clippy::needless_range_loop)]
fn signatures(cfg: &SynthConfig, partners: &BTreeMap<u32, u32>) -> Vec<Signature> {
    let n = cfg.num_categories;
    let mut sigs: Vec<Option<Signature>> = vec![None; n];
    let mut k = 0usize;
    for c in 0..n {
        // the higher id of a pair is derived from the lower one
        if partners.get(&(c as u32)).is_some_and(|&p| (p as usize) < c) {
            continue;
        }
        let hue = (k as f64 * 0.618_033_988_75 + 0.05).fract();
        sigs[c] = Some(Signature {
            family: ShapeFamily::ALL[k % 4],
            color: hsv(hue, 0.75, 0.9),
            texture_freq: TEXTURES[(k / 4) % 3],
            texture_angle: [
                0.0,
                std::f64::consts::FRAC_PI_2,
                std::f64::consts::FRAC_PI_4,
            ][(k / 12) % 3],
            aspect: ASPECTS[(k / 4 + k / 12) % 3],
        });
        k += 1;
    }
    for c in 0..n {
        if sigs[c].is_some() {
            continue;
        }
        let base = sigs[partners[&(c as u32)] as usize].expect("lower id filled first");
        let d = cfg.pair_color_delta;
        let mut color = base.color;
        color[0] = if color[0] + d <= 1.0 {
            color[0] + d
        } else {
            color[0] - d
        };
        color[1] = if color[1] - d >= 0.0 {
            color[1] - d
        } else {
            color[1] + d
        };
        sigs[c] = Some(Signature { color, ..base });
    }
    sigs.into_iter()
        .map(|s| s.expect("every category assigned"))
        .collect()
}

fn sample_excluding(weights: &[f64], excluded: &BTreeSet<u32>, rng: &mut Rng) -> Option<u32> {
    let w: Vec<f64> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            if excluded.contains(&(i as u32)) {
                0.0
            } else {
                w
            }
        })
        .collect();
    WeightedIndex::new(&w).ok().map(|d| d.sample(rng) as u32)
}

/// Categories and instance counts of one scene, before placement.
type Plan = Vec<(u32, usize)>;

fn plan_scenes(cfg: &SynthConfig, weights: &[f64], partners: &BTreeMap<u32, u32>) -> Vec<Plan> {
    let mut rng = stream(cfg.seed, "data.plan");
    let mut plans: Vec<Plan> = Vec::with_capacity(cfg.num_scenes);
    for _ in 0..cfg.num_scenes {
        let mut used = BTreeSet::new();
        let primary = sample_excluding(weights, &used, &mut rng).expect("weights are positive");
        used.insert(primary);
        let mut plan = vec![(primary, rng.gen_range(3..=5))];
        let partner = partners.get(&primary).copied();
        if let Some(p) = partner {
            used.insert(p);
        }
        for _ in 0..rng.gen_range(1..=2) {
            if let Some(c) = sample_excluding(weights, &used, &mut rng) {
                used.insert(c);
                plan.push((c, rng.gen_range(1..=2)));
            }
        }
        if let Some(p) = partner {
            if rng.gen_bool(cfg.distractor_rate) {
                plan.push((p, rng.gen_range(1..=2)));
            }
        }
        plans.push(plan);
    }
    // every category shows up in at least two scenes (or every scene, if fewer)
    let need = cfg.num_scenes.min(2);
    for c in 0..cfg.num_categories as u32 {
        let mut holders: Vec<usize> = (0..plans.len())
            .filter(|&i| plans[i].iter().any(|e| e.0 == c))
            .collect();
        while holders.len() < need {
            let free: Vec<usize> = (0..plans.len()).filter(|i| !holders.contains(i)).collect();
            let i = *free.choose(&mut rng).expect("need ≤ num_scenes");
            plans[i].push((c, 1));
            holders.push(i);
        }
    }
    plans
}

fn object_box(sig: &Signature, cfg: &SynthConfig, rng: &mut Rng) -> (usize, usize) {
    let s = rng.gen_range(cfg.min_object as f64..=cfg.max_object as f64);
    let w = (s * sig.aspect.sqrt()).round().max(4.0) as usize;
    let h = (s / sig.aspect.sqrt()).round().max(4.0) as usize;
    (w.min(cfg.image_size), h.min(cfg.image_size))
}

fn place(
    plan: &Plan,
    sigs: &[Signature],
    cfg: &SynthConfig,
    image_id: u64,
    rng: &mut Rng,
) -> Result<Vec<(u32, BBox)>> {
    let size = cfg.image_size;
    let mut placed: Vec<(u32, BBox)> = Vec::new();
    for &(cat, count) in plan {
        for _ in 0..count {
            let (w, h) = object_box(&sigs[cat as usize], cfg, rng);
            let mut ok = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let x = rng.gen_range(0..=size - w) as f64;
                let y = rng.gen_range(0..=size - h) as f64;
                let b = BBox::new(x, y, w as f64, h as f64)?;
                if placed.iter().all(|(_, o)| iou(o, &b) <= cfg.max_overlap) {
                    ok = Some(b);
                    break;
                }
            }
            let b = ok.ok_or(Error::Placement {
                scene: image_id,
                category: cat,
            })?;
            placed.push((cat, b));
        }
    }
    Ok(placed)
}

fn inside_shape(family: ShapeFamily, u: f64, v: f64) -> bool {
    let (a, b) = (2.0 * u - 1.0, 2.0 * v - 1.0);
    match family {
        ShapeFamily::Rect => true,
        ShapeFamily::Ellipse => a * a + b * b <= 1.0,
        ShapeFamily::Cross => a.abs() <= 1.0 / 3.0 || b.abs() <= 1.0 / 3.0,
        ShapeFamily::Ring => {
            let r2 = a * a + b * b;
            (0.3..=1.0).contains(&r2)
        }
    }
}

/// Renders objects in order onto a noisy gray background; values are rounded to `f32`.
pub fn render_scene(size: usize, objects: &[(Signature, BBox)], rng: &mut Rng) -> Tensor {
    let hw = size * size;
    let mut px = vec![0.0f64; 3 * hw];
    let base = rng.gen_range(0.3..0.5);
    for i in 0..hw {
        let g = base + rng.gen_range(-0.04..0.04);
        for c in 0..3 {
            px[c * hw + i] = g;
        }
    }
    for (sig, b) in objects {
        let gain = rng.gen_range(0.95..1.05);
        let span = b.w.max(b.h);
        let (ct, st) = (sig.texture_angle.cos(), sig.texture_angle.sin());
        let (x0, y0) = (b.x as usize, b.y as usize);
        let (x1, y1) = ((b.x2() as usize).min(size), (b.y2() as usize).min(size));
        for yy in y0..y1 {
            for xx in x0..x1 {
                let (fx, fy) = (xx as f64 + 0.5 - b.x, yy as f64 + 0.5 - b.y);
                if !inside_shape(sig.family, fx / b.w, fy / b.h) {
                    continue;
                }
                let t = (fx * ct + fy * st) / span;
                let stripe = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * sig.texture_freq * t).cos();
                let shade = if sig.texture_freq > 0.0 {
                    0.65 + 0.35 * stripe
                } else {
                    1.0
                };
                let noise = rng.gen_range(-0.02..0.02);
                for c in 0..3 {
                    px[c * hw + yy * size + xx] = sig.color[c] * shade * gain + noise;
                }
            }
        }
    }
    let data = px
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0) as f32 as f64)
        .collect();
    Tensor::new(vec![3, size, size], data).expect("finite pixels")
}

fn split(cfg: &SynthConfig, scenes: &[Scene]) -> (Vec<u64>, Vec<u64>) {
    let mut rng = stream(cfg.seed, "data.split");
    let mut ids: Vec<u64> = scenes.iter().map(|s| s.image_id).collect();
    if ids.len() < 2 {
        return (ids, Vec::new());
    }
    ids.shuffle(&mut rng);
    let n_val = ((ids.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, ids.len() - 1);
    let mut val: BTreeSet<u64> = ids[..n_val].iter().copied().collect();
    let cats = |id: u64| -> BTreeSet<u32> {
        scenes[id as usize]
            .annotations
            .iter()
            .map(|a| a.category_id)
            .collect()
    };
    let covered = |set: &BTreeSet<u64>, c: u32| set.iter().any(|&id| cats(id).contains(&c));
    // move scenes across the split until every category is on both sides, where possible
    for c in 0..cfg.num_categories as u32 {
        let train: BTreeSet<u64> = ids.iter().copied().filter(|id| !val.contains(id)).collect();
        if !covered(&val, c) {
            let donor = train.iter().copied().find(|&id| {
                cats(id).contains(&c)
                    && cats(id)
                        .iter()
                        .all(|&o| train.iter().any(|&t| t != id && cats(t).contains(&o)))
            });
            if let Some(id) = donor {
                val.insert(id);
            }
        }
        let train: BTreeSet<u64> = ids.iter().copied().filter(|id| !val.contains(id)).collect();
        if !covered(&train, c) {
            let donor = val.iter().copied().find(|&id| {
                cats(id).contains(&c)
                    && cats(id)
                        .iter()
                        .all(|&o| val.iter().any(|&v| v != id && cats(v).contains(&o)))
            });
            if let Some(id) = donor {
                val.remove(&id);
            }
        }
    }
    let mut train: Vec<u64> = ids.iter().copied().filter(|id| !val.contains(id)).collect();
    train.sort_unstable();
    (train, val.into_iter().collect())
}

/// Generates a full corpus; identical configs give identical manifests and pixels.
pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<DatasetManifest> {
    if cfg.num_categories == 0 || cfg.num_scenes == 0 {
        return Err(Error::Invalid(
            "need at least one scene and one category".into(),
        ));
    }
    if cfg.min_object < 4 || cfg.min_object > cfg.max_object || cfg.max_object > cfg.image_size {
        return Err(Error::Invalid(format!(
            "object sizes {}..{} for image {}",
            cfg.min_object, cfg.max_object, cfg.image_size
        )));
    }
    if !(0.0..=1.0).contains(&cfg.distractor_rate) || !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::Invalid("rates must lie in [0, 1]".into()));
    }
    let partners = partner_map(cfg)?;
    let sigs = signatures(cfg, &partners);
    let weights = zipf_weights(cfg.num_categories, cfg.zipf_exponent);
    let plans = plan_scenes(cfg, &weights, &partners);

    let mut scenes = Vec::with_capacity(plans.len());
    let mut next_ann = 0u64;
    for (i, plan) in plans.iter().enumerate() {
        let image_id = i as u64;
        let mut rng = indexed_stream(cfg.seed, "data.scene", image_id);
        let objects = place(plan, &sigs, cfg, image_id, &mut rng)?;
        let drawn: Vec<(Signature, BBox)> = objects
            .iter()
            .map(|&(c, b)| (sigs[c as usize], b))
            .collect();
        let pixels = render_scene(cfg.image_size, &drawn, &mut rng);
        let annotations = objects
            .iter()
            .map(|&(category_id, bbox)| {
                next_ann += 1;
                Annotation {
                    id: next_ann - 1,
                    image_id,
                    category_id,
                    bbox,
                }
            })
            .collect();
        scenes.push(Scene {
            image_id,
            width: cfg.image_size,
            height: cfg.image_size,
            pixels,
            annotations,
        });
    }

    let (train, val) = split(cfg, &scenes);
    let mut counts: BTreeMap<u32, usize> = (0..cfg.num_categories as u32).map(|c| (c, 0)).collect();
    for id in &train {
        for a in &scenes[*id as usize].annotations {
            *counts.entry(a.category_id).or_insert(0) += 1;
        }
    }
    let buckets = buckets_from_counts(&counts, cfg.buckets);
    let categories = (0..cfg.num_categories)
        .map(|c| {
            let id = c as u32;
            Category {
                id,
                name: format!("{}-{c:02}", sigs[c].family.name()),
                bucket: buckets[&id],
                frequency: weights[c],
                partner: partners.get(&id).copied(),
                signature: sigs[c],
            }
        })
        .collect();
    Ok(DatasetManifest {
        config: cfg.clone(),
        categories,
        scenes,
        train,
        val,
    })
}
