use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{DatasetManifest, Scene, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Images holding more than three instances of each category.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CategoryIndex {
    pub entries: BTreeMap<u32, Vec<u64>>,
}

impl CategoryIndex {
    pub fn images(&self, category: u32) -> &[u64] {
        self.entries
            .get(&category)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn is_empty(&self) -> bool {
        self.entries.values().all(Vec::is_empty)
    }
}

/// Indexes the training split.
pub fn build_category_index(manifest: &DatasetManifest) -> CategoryIndex {
    index_scenes(manifest.split_scenes(Split::Train))
}

pub(crate) fn index_scenes<'a>(scenes: impl Iterator<Item = &'a Scene>) -> CategoryIndex {
    let mut entries: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for s in scenes {
        for (cat, n) in s.category_counts() {
            if n > 3 {
                entries.entry(cat).or_default().push(s.image_id);
            }
        }
    }
    CategoryIndex { entries }
}

/// Second-most-frequent category of a scene, ties to the lower id; the only category if there is one.
pub fn link_category(scene: &Scene) -> Option<u32> {
    ranked_categories(scene)
        .into_iter()
        .nth(1)
        .or_else(|| ranked_categories(scene).first().copied())
}

fn ranked_categories(scene: &Scene) -> Vec<u32> {
    let mut ranked: Vec<(u32, usize)> = scene.category_counts().into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().map(|(c, _)| c).collect()
}

/// Seed image plus `batch_size - 1` images sharing its link category.
///
/// When the link category indexes no other image, the most frequent category
/// is tried, then the remaining categories by count, then a fresh seed image.
pub fn construct_batch(
    manifest: &DatasetManifest,
    index: &CategoryIndex,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<u64>> {
    if batch_size < 1 {
        return Err(Error::Construction("batch size must be positive".into()));
    }
    if index.is_empty() {
        return Err(Error::Construction(
            "no category has an indexed image".into(),
        ));
    }
    let mut seeds: Vec<u64> = manifest.train.clone();
    seeds.shuffle(rng);
    for seed in seeds {
        let Some(scene) = manifest.scene(seed) else {
            continue;
        };
        let ranked = ranked_categories(scene);
        let mut order: Vec<u32> = Vec::new();
        if let Some(c) = link_category(scene) {
            order.push(c);
        }
        for c in ranked {
            if !order.contains(&c) {
                order.push(c);
            }
        }
        for (attempt, cat) in order.iter().enumerate() {
            let mut pool: Vec<u64> = index
                .images(*cat)
                .iter()
                .copied()
                .filter(|&i| i != seed)
                .collect();
            if pool.is_empty() {
                continue;
            }
            if attempt > 0 {
                log::debug!("batch seed {seed}: link category empty, fell back to category {cat}");
            }
            let mut batch = vec![seed];
            let need = batch_size - 1;
            if pool.len() >= need {
                pool.shuffle(rng);
                batch.extend_from_slice(&pool[..need]);
            } else {
                batch.extend_from_slice(&pool);
                while batch.len() < batch_size {
                    batch.push(pool[rng.gen_range(0..pool.len())]);
                }
            }
            return Ok(batch);
        }
        log::debug!("batch seed {seed}: no category indexes another image, reseeding");
    }
    Err(Error::Construction(
        "no seed image shares an indexed category".into(),
    ))
}
