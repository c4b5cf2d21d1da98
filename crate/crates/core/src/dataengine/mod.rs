//! Synthetic long-tailed scenes with confusable category pairs.
//!
//! Scenes are small RGB images holding textured shapes. Each category has a
//! signature (shape family, color, texture, aspect); paired categories share
//! everything except a small color offset, which makes them hard negatives
//! for one another.

mod index;
mod io;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::numcore::Tensor;

pub use index::{build_category_index, construct_batch, link_category, CategoryIndex};
pub use io::{
    decode_pixels, encode_pixels, load_dataset, read_pixels, save_dataset, write_pixels,
    PIXEL_MAGIC, PIXEL_VERSION,
};
pub use synth::{render_scene, synthesize_dataset, zipf_weights};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image_id: u64,
    pub width: usize,
    pub height: usize,
    /// `3×H×W`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub annotations: Vec<Annotation>,
}

impl Scene {
    pub fn count(&self, category: u32) -> usize {
        self.annotations
            .iter()
            .filter(|a| a.category_id == category)
            .count()
    }

    /// Instance count per category present, ordered by category id.
    pub fn category_counts(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for a in &self.annotations {
            *out.entry(a.category_id).or_insert(0) += 1;
        }
        out
    }

    pub fn boxes_of(&self, category: u32) -> Vec<BBox> {
        self.annotations
            .iter()
            .filter(|a| a.category_id == category)
            .map(|a| a.bbox)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Rect,
    Ellipse,
    Cross,
    Ring,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [
        ShapeFamily::Rect,
        ShapeFamily::Ellipse,
        ShapeFamily::Cross,
        ShapeFamily::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Rect => "rect",
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Ring => "ring",
        }
    }
}

/// Visual identity of a category.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub family: ShapeFamily,
    pub color: [f64; 3],
    /// Stripe cycles across the box; 0 means flat fill.
    pub texture_freq: f64,
    pub texture_angle: f64,
    /// Width over height.
    pub aspect: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Rare,
    Common,
    Frequent,
}

impl Bucket {
    pub fn name(self) -> &'static str {
        match self {
            Bucket::Rare => "rare",
            Bucket::Common => "common",
            Bucket::Frequent => "frequent",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
    pub bucket: Bucket,
    /// Sampling weight, normalized over all categories.
    pub frequency: f64,
    pub partner: Option<u32>,
    pub signature: Signature,
}

/// Bucket cut-offs on training-split instance counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BucketThresholds {
    /// Inclusive upper bounds on the raw count.
    Absolute { rare_max: usize, common_max: usize },
    /// Inclusive upper bounds as fractions of the largest category count.
    Relative { rare_max: f64, common_max: f64 },
}

impl Default for BucketThresholds {
    fn default() -> Self {
        BucketThresholds::Relative {
            rare_max: 0.1,
            common_max: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_scenes: usize,
    pub num_categories: usize,
    pub confusable_pairs: Vec<(u32, u32)>,
    pub zipf_exponent: f64,
    pub image_size: usize,
    pub seed: u64,
    /// Chance that a scene also holds instances of its primary category's partner.
    pub distractor_rate: f64,
    /// Per-channel color offset between paired categories.
    pub pair_color_delta: f64,
    pub min_object: usize,
    pub max_object: usize,
    pub max_overlap: f64,
    pub val_fraction: f64,
    pub buckets: BucketThresholds,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_scenes: 300,
            num_categories: 20,
            confusable_pairs: Self::consecutive_pairs(4),
            zipf_exponent: 1.0,
            image_size: 64,
            seed: 0,
            distractor_rate: 0.5,
            pair_color_delta: 0.08,
            min_object: 9,
            max_object: 15,
            max_overlap: 0.15,
            val_fraction: 0.2,
            buckets: BucketThresholds::default(),
        }
    }
}

impl SynthConfig {
    /// Pairs `(0,1), (2,3), ...`.
    pub fn consecutive_pairs(n: u32) -> Vec<(u32, u32)> {
        (0..n).map(|i| (2 * i, 2 * i + 1)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub config: SynthConfig,
    pub categories: Vec<Category>,
    pub scenes: Vec<Scene>,
    pub train: Vec<u64>,
    pub val: Vec<u64>,
}

impl DatasetManifest {
    pub fn scene(&self, image_id: u64) -> Option<&Scene> {
        // ids are dense and assigned in order
        self.scenes
            .get(image_id as usize)
            .filter(|s| s.image_id == image_id)
            .or_else(|| self.scenes.iter().find(|s| s.image_id == image_id))
    }

    pub fn category(&self, id: u32) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn category_by_name(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn split_scenes(&self, split: Split) -> impl Iterator<Item = &Scene> {
        let ids = match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        };
        ids.iter().filter_map(|id| self.scene(*id))
    }

    /// Total instances per category over the given scenes.
    pub fn instance_counts<'a>(
        &self,
        scenes: impl Iterator<Item = &'a Scene>,
    ) -> BTreeMap<u32, usize> {
        let mut counts: BTreeMap<u32, usize> = self.categories.iter().map(|c| (c.id, 0)).collect();
        for s in scenes {
            for a in &s.annotations {
                *counts.entry(a.category_id).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn pairs(&self) -> Vec<(u32, u32)> {
        self.config.confusable_pairs.clone()
    }
}

/// Buckets each category by its training-split instance count.
pub fn frequency_buckets(
    manifest: &DatasetManifest,
    thresholds: BucketThresholds,
) -> BTreeMap<u32, Bucket> {
    let counts = manifest.instance_counts(manifest.split_scenes(Split::Train));
    buckets_from_counts(&counts, thresholds)
}

pub fn buckets_from_counts(
    counts: &BTreeMap<u32, usize>,
    thresholds: BucketThresholds,
) -> BTreeMap<u32, Bucket> {
    let max = counts.values().copied().max().unwrap_or(0) as f64;
    counts
        .iter()
        .map(|(&id, &n)| {
            let (rare, common) = match thresholds {
                BucketThresholds::Absolute {
                    rare_max,
                    common_max,
                } => (n <= rare_max, n <= common_max),
                BucketThresholds::Relative {
                    rare_max,
                    common_max,
                } => (n as f64 <= rare_max * max, n as f64 <= common_max * max),
            };
            let bucket = if rare {
                Bucket::Rare
            } else if common {
                Bucket::Common
            } else {
                Bucket::Frequent
            };
            (id, bucket)
        })
        .collect()
}
