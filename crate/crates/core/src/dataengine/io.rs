use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Annotation, Bucket, Category, DatasetManifest, Scene, Signature, SynthConfig};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numcore::Tensor;

pub const PIXEL_MAGIC: &[u8; 4] = b"NPPX";
pub const PIXEL_VERSION: u32 = 1;
const MANIFEST_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    id: u64,
    width: usize,
    height: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    id: u64,
    image_id: u64,
    category_id: u32,
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct CategoryRecord {
    id: u32,
    name: String,
    bucket: Bucket,
    frequency: f64,
    partner: Option<u32>,
    signature: Signature,
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    train: Vec<u64>,
    val: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct Info {
    version: u32,
    config: SynthConfig,
    split: SplitRecord,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    info: Info,
    images: Vec<ImageRecord>,
    annotations: Vec<AnnotationRecord>,
    categories: Vec<CategoryRecord>,
}

/// Flat pixel payload: magic, version, then `C, H, W` as `u32` LE, then `f32` LE values.
pub fn encode_pixels(t: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = match t.dims() {
        [c, h, w] => [*c, *h, *w],
        d => return Err(Error::Shape(format!("pixels must be C×H×W, got {d:?}"))),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(PIXEL_MAGIC);
    for v in [PIXEL_VERSION, c as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_pixels(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != PIXEL_MAGIC {
        return Err(Error::Invalid("not a pixel payload".into()));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if word(0) != PIXEL_VERSION {
        return Err(Error::Invalid(format!("pixel payload version {}", word(0))));
    }
    let dims = vec![word(1) as usize, word(2) as usize, word(3) as usize];
    let n: usize = dims.iter().product();
    if bytes.len() != HEADER_LEN + 4 * n {
        return Err(Error::Invalid(format!(
            "pixel payload of {} bytes for dims {dims:?}",
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(dims, data)
}

pub fn write_pixels(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_pixels(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_pixels(path: &Path) -> Result<Tensor> {
    decode_pixels(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn pixel_file(id: u64) -> String {
    format!("pixels/{id:06}.bin")
}

/// Writes `manifest.json` and one pixel file per scene under `dir`.
pub fn save_dataset(m: &DatasetManifest, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("pixels")).map_err(|e| Error::io(dir, e))?;
    let file = ManifestFile {
        info: Info {
            version: MANIFEST_VERSION,
            config: m.config.clone(),
            split: SplitRecord {
                train: m.train.clone(),
                val: m.val.clone(),
            },
        },
        images: m
            .scenes
            .iter()
            .map(|s| ImageRecord {
                id: s.image_id,
                width: s.width,
                height: s.height,
                file: pixel_file(s.image_id),
            })
            .collect(),
        annotations: m
            .scenes
            .iter()
            .flat_map(|s| s.annotations.iter())
            .map(|a| AnnotationRecord {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                bbox: [a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h],
            })
            .collect(),
        categories: m
            .categories
            .iter()
            .map(|c| CategoryRecord {
                id: c.id,
                name: c.name.clone(),
                bucket: c.bucket,
                frequency: c.frequency,
                partner: c.partner,
                signature: c.signature,
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&file)?).map_err(|e| Error::io(&path, e))?;
    for s in &m.scenes {
        write_pixels(&dir.join(pixel_file(s.image_id)), &s.pixels)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let file: ManifestFile = serde_json::from_slice(&text)?;
    if file.info.version != MANIFEST_VERSION {
        return Err(Error::Invalid(format!(
            "manifest version {}",
            file.info.version
        )));
    }
    let mut scenes = Vec::with_capacity(file.images.len());
    for img in &file.images {
        let pixels = read_pixels(&dir.join(&img.file))?;
        if pixels.dims() != [3, img.height, img.width] {
            return Err(Error::Shape(format!(
                "image {} pixels {:?}",
                img.id,
                pixels.dims()
            )));
        }
        scenes.push(Scene {
            image_id: img.id,
            width: img.width,
            height: img.height,
            pixels,
            annotations: Vec::new(),
        });
    }
    for a in &file.annotations {
        let scene = scenes
            .iter_mut()
            .find(|s| s.image_id == a.image_id)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "annotation {} for unknown image {}",
                    a.id, a.image_id
                ))
            })?;
        let [x, y, w, h] = a.bbox;
        scene.annotations.push(Annotation {
            id: a.id,
            image_id: a.image_id,
            category_id: a.category_id,
            bbox: BBox::new(x, y, w, h)?,
        });
    }
    let categories = file
        .categories
        .into_iter()
        .map(|c| Category {
            id: c.id,
            name: c.name,
            bucket: c.bucket,
            frequency: c.frequency,
            partner: c.partner,
            signature: c.signature,
        })
        .collect();
    Ok(DatasetManifest {
        config: file.info.config,
        categories,
        scenes,
        train: file.info.split.train,
        val: file.info.split.val,
    })
}
