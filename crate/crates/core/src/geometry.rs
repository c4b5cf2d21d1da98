//! Axis-aligned boxes, overlap measures and prompt jitter.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Boxes below this area count as collapsed.
pub const MIN_AREA: f64 = 1e-6;
/// Draws attempted before a jitter gives up.
pub const JITTER_ATTEMPTS: usize = 8;

/// Box in pixels: top-left corner plus width and height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Invalid(format!("box {self:?}")));
        }
        Ok(())
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// True when the box lies within `[0, width]×[0, height]`.
    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x2() <= width && self.y2() <= height
    }

    /// Intersection with the image rectangle, or `None` if nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let x1 = self.x.max(0.0);
        let y1 = self.y.max(0.0);
        let x2 = self.x2().min(width);
        let y2 = self.y2().min(height);
        (x2 > x1 && y2 > y1).then_some(BBox {
            x: x1,
            y: y1,
            w: x2 - x1,
            h: y2 - y1,
        })
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    iw * ih
}

fn enclosing_area(a: &BBox, b: &BBox) -> f64 {
    (a.x2().max(b.x2()) - a.x.min(b.x)) * (a.y2().max(b.y2()) - a.y.min(b.y))
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let enclose = enclosing_area(a, b);
    if union <= 0.0 || enclose <= 0.0 {
        return -1.0;
    }
    // rounding can put the enclosing area a hair under the union
    inter / union - ((enclose - union) / enclose).max(0.0)
}

/// Normalized `(cx, cy, w, h)` of a box inside a `width×height` image.
pub fn to_cxcywh_norm(b: &BBox, width: f64, height: f64) -> Result<[f64; 4]> {
    const SLACK: f64 = 1e-9;
    if b.x < -SLACK || b.y < -SLACK || b.x2() > width + SLACK || b.y2() > height + SLACK {
        return Err(Error::Range(format!(
            "box {b:?} outside {width}×{height} image"
        )));
    }
    let (cx, cy) = b.center();
    Ok([cx / width, cy / height, b.w / width, b.h / height])
}

pub fn from_cxcywh_norm(v: [f64; 4], width: f64, height: f64) -> Result<BBox> {
    let w = v[2] * width;
    let h = v[3] * height;
    BBox::new(v[0] * width - 0.5 * w, v[1] * height - 0.5 * h, w, h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterMode {
    ShiftCenter,
    ShiftSize,
    ShiftBoth,
}

impl JitterMode {
    pub const ALL: [JitterMode; 3] = [
        JitterMode::ShiftCenter,
        JitterMode::ShiftSize,
        JitterMode::ShiftBoth,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterSpec {
    /// Modes drawn uniformly per jitter.
    pub modes: Vec<JitterMode>,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl JitterSpec {
    pub fn new(scale_lo: f64, scale_hi: f64) -> Result<Self> {
        Self::with_modes(&JitterMode::ALL, scale_lo, scale_hi)
    }

    pub fn with_modes(modes: &[JitterMode], scale_lo: f64, scale_hi: f64) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::Invalid("jitter spec needs at least one mode".into()));
        }
        if !(0.0..=1.0).contains(&scale_lo)
            || !(0.0..=1.0).contains(&scale_hi)
            || scale_lo > scale_hi
        {
            return Err(Error::Invalid(format!(
                "jitter range [{scale_lo}, {scale_hi}]"
            )));
        }
        Ok(JitterSpec {
            modes: modes.to_vec(),
            scale_lo,
            scale_hi,
        })
    }

    /// Mild jitter for positive prompts, `[0, 0.3]`.
    pub fn positive() -> Self {
        Self::new(0.0, 0.3).expect("static range")
    }

    /// Strong jitter for negative prompts, `[0.7, 1.0]`.
    pub fn negative() -> Self {
        Self::new(0.7, 1.0).expect("static range")
    }
}

/// One sampled perturbation, in fractions of the box size.
///
/// The center moves by `(dx·w, dy·h)`; the size becomes `(w·(1+sw), h·(1+sh))`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JitterDraw {
    pub dx: f64,
    pub dy: f64,
    pub sw: f64,
    pub sh: f64,
}

fn draw_magnitude(spec: &JitterSpec, rng: &mut Rng) -> f64 {
    if spec.scale_hi > spec.scale_lo {
        rng.gen_range(spec.scale_lo..=spec.scale_hi)
    } else {
        spec.scale_lo
    }
}

fn draw_shift(spec: &JitterSpec, rng: &mut Rng) -> (f64, f64) {
    let u = draw_magnitude(spec, rng);
    let theta = rng.gen_range(0.0..2.0 * PI);
    (u * theta.cos(), u * theta.sin())
}

fn draw_size(spec: &JitterSpec, rng: &mut Rng) -> (f64, f64) {
    let u = draw_magnitude(spec, rng);
    let sign = |up: bool| if up { u } else { -u };
    let sw = sign(rng.gen_bool(0.5));
    let sh = sign(rng.gen_bool(0.5));
    (sw, sh)
}

pub fn draw_jitter(spec: &JitterSpec, rng: &mut Rng) -> JitterDraw {
    let mode = spec.modes[rng.gen_range(0..spec.modes.len())];
    match mode {
        JitterMode::ShiftCenter => {
            let (dx, dy) = draw_shift(spec, rng);
            JitterDraw {
                dx,
                dy,
                sw: 0.0,
                sh: 0.0,
            }
        }
        JitterMode::ShiftSize => {
            let (sw, sh) = draw_size(spec, rng);
            JitterDraw {
                dx: 0.0,
                dy: 0.0,
                sw,
                sh,
            }
        }
        JitterMode::ShiftBoth => {
            let (dx, dy) = draw_shift(spec, rng);
            let (sw, sh) = draw_size(spec, rng);
            JitterDraw { dx, dy, sw, sh }
        }
    }
}

/// Applies a draw without clipping or validation; the size may collapse to zero.
pub fn apply_jitter(g: &BBox, d: JitterDraw) -> BBox {
    let w = g.w * (1.0 + d.sw);
    let h = g.h * (1.0 + d.sh);
    BBox {
        x: g.x + d.dx * g.w + 0.5 * (g.w - w),
        y: g.y + d.dy * g.h + 0.5 * (g.h - h),
        w,
        h,
    }
}

/// Jitters `g` inside a `width×height` image, clipping to the image when needed.
pub fn jitter_box(
    g: &BBox,
    spec: &JitterSpec,
    width: f64,
    height: f64,
    rng: &mut Rng,
) -> Result<BBox> {
    g.validate()?;
    for _ in 0..JITTER_ATTEMPTS {
        let b = apply_jitter(g, draw_jitter(spec, rng));
        let b = if b.inside(width, height) {
            Some(b)
        } else {
            b.clip(width, height)
        };
        if let Some(b) = b {
            if b.w > 0.0 && b.h > 0.0 && b.area() >= MIN_AREA {
                return Ok(b);
            }
        }
    }
    Err(Error::DegenerateJitter {
        attempts: JITTER_ATTEMPTS,
    })
}
