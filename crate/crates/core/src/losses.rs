//! Training objectives with analytic gradients.
//!
//! Box losses take normalized `(cx, cy, w, h)` 4-vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-12;
/// Lower bound on decoded box sides inside the GIoU loss.
pub const SIDE_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnhConfig {
    pub eta: f64,
}

impl Default for NnhConfig {
    fn default() -> Self {
        NnhConfig { eta: 0.3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_hinge: f64,
    pub w_l1: f64,
    pub w_giou: f64,
    /// Slot for a denoising term; nothing feeds it.
    pub w_dn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_cls: 1.0,
            w_hinge: 1.0,
            w_l1: 5.0,
            w_giou: 2.0,
            w_dn: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_cls, self.w_hinge, self.w_l1, self.w_giou, self.w_dn];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invalid(format!("loss weights {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub hinge: f64,
    pub l1: f64,
    pub giou: f64,
    pub dn: f64,
}

impl std::ops::AddAssign for LossComponents {
    fn add_assign(&mut self, o: Self) {
        self.cls += o.cls;
        self.hinge += o.hinge;
        self.l1 += o.l1;
        self.giou += o.giou;
        self.dn += o.dn;
    }
}

impl LossComponents {
    pub fn scaled(self, s: f64) -> Self {
        LossComponents {
            cls: self.cls * s,
            hinge: self.hinge * s,
            l1: self.l1 * s,
            giou: self.giou * s,
            dn: self.dn * s,
        }
    }
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.w_cls * c.cls + w.w_hinge * c.hinge + w.w_l1 * c.l1 + w.w_giou * c.giou + w.w_dn * c.dn
}

/// Focal loss of one probability and its derivative with respect to that probability.
pub fn focal_loss(prob: f64, is_positive: bool, cfg: &FocalConfig) -> (f64, f64) {
    let (pt, alpha_t, sign) = if is_positive {
        (prob, cfg.alpha, 1.0)
    } else {
        (1.0 - prob, 1.0 - cfg.alpha, -1.0)
    };
    let clamped = pt.max(PROB_CLAMP);
    let one_minus = 1.0 - pt;
    let modulator = one_minus.powf(cfg.gamma);
    let loss = -alpha_t * modulator * clamped.ln();
    let d_mod = if cfg.gamma == 0.0 || one_minus <= 0.0 {
        0.0
    } else {
        cfg.gamma * one_minus.powf(cfg.gamma - 1.0)
    };
    let d_log = if pt > PROB_CLAMP { modulator / pt } else { 0.0 };
    let d_pt = alpha_t * (d_mod * clamped.ln() - d_log);
    (loss, sign * d_pt)
}

/// Focal loss and its derivative with respect to the logit `z`, `prob = σ(z)`.
pub fn focal_loss_logit(z: f64, is_positive: bool, cfg: &FocalConfig) -> (f64, f64) {
    let p = crate::numcore::sigmoid_scalar(z);
    let (loss, d_p) = focal_loss(p, is_positive, cfg);
    (loss, d_p * p * (1.0 - p))
}

/// Mean hinge `max(0, S_N,i − S_P + η)` over the negatives, with gradients for `S_P` and each `S_N,i`.
pub fn nnh_loss(s_p: f64, s_n: &[f64], cfg: &NnhConfig) -> Result<(f64, f64, Vec<f64>)> {
    if s_n.is_empty() {
        return Err(Error::Count {
            needed: 1,
            available: 0,
        });
    }
    let k = s_n.len() as f64;
    let mut loss = 0.0;
    let mut d_sp = 0.0;
    let mut d_sn = vec![0.0; s_n.len()];
    for (i, &n) in s_n.iter().enumerate() {
        let m = n - s_p + cfg.eta;
        if m > 0.0 {
            loss += m;
            d_sp -= 1.0 / k;
            d_sn[i] = 1.0 / k;
        }
    }
    Ok((loss / k, d_sp, d_sn))
}

pub fn l1_box_loss(pred: &[f64; 4], target: &[f64; 4]) -> (f64, [f64; 4]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d = pred[i] - target[i];
        loss += d.abs();
        grad[i] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    (loss, grad)
}

struct Corners {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

fn corners(b: &[f64; 4]) -> (Corners, bool, bool) {
    let (w_clamped, h_clamped) = (b[2] < SIDE_CLAMP, b[3] < SIDE_CLAMP);
    let (w, h) = (b[2].max(SIDE_CLAMP), b[3].max(SIDE_CLAMP));
    (
        Corners {
            x1: b[0] - 0.5 * w,
            y1: b[1] - 0.5 * h,
            x2: b[0] + 0.5 * w,
            y2: b[1] + 0.5 * h,
        },
        w_clamped,
        h_clamped,
    )
}

/// `1 − GIoU(pred, target)` and its gradient with respect to `pred`.
///
/// Sides below [`SIDE_CLAMP`] are clamped and get zero gradient.
pub fn giou_loss(pred: &[f64; 4], target: &[f64; 4]) -> (f64, [f64; 4]) {
    let (p, w_clamped, h_clamped) = corners(pred);
    let (t, _, _) = corners(target);

    let iw = p.x2.min(t.x2) - p.x1.max(t.x1);
    let ih = p.y2.min(t.y2) - p.y1.max(t.y1);
    let overlaps = iw > 0.0 && ih > 0.0;
    let (iw, ih) = if overlaps { (iw, ih) } else { (0.0, 0.0) };
    let inter = iw * ih;
    let (pw, ph) = (p.x2 - p.x1, p.y2 - p.y1);
    let union = pw * ph + (t.x2 - t.x1) * (t.y2 - t.y1) - inter;
    let ew = p.x2.max(t.x2) - p.x1.min(t.x1);
    let eh = p.y2.max(t.y2) - p.y1.min(t.y1);
    let enclose = ew * eh;
    let loss = 2.0 - inter / union - union / enclose;

    // partials of I, pred area A and E with respect to x1, x2, y1, y2
    let on = |cond: bool, v: f64| if overlaps && cond { v } else { 0.0 };
    let d_i = [
        on(p.x1 > t.x1, -ih),
        on(p.x2 < t.x2, ih),
        on(p.y1 > t.y1, -iw),
        on(p.y2 < t.y2, iw),
    ];
    let d_a = [-ph, ph, -pw, pw];
    let d_e = [
        if p.x1 < t.x1 { -eh } else { 0.0 },
        if p.x2 > t.x2 { eh } else { 0.0 },
        if p.y1 < t.y1 { -ew } else { 0.0 },
        if p.y2 > t.y2 { ew } else { 0.0 },
    ];
    let mut d = [0.0; 4];
    for k in 0..4 {
        let d_u = d_a[k] - d_i[k];
        d[k] = -d_i[k] / union + inter * d_u / (union * union) - d_u / enclose
            + union * d_e[k] / (enclose * enclose);
    }
    let (dx1, dx2, dy1, dy2) = (d[0], d[1], d[2], d[3]);
    let grad = [
        dx1 + dx2,
        dy1 + dy2,
        if w_clamped { 0.0 } else { 0.5 * (dx2 - dx1) },
        if h_clamped { 0.0 } else { 0.5 * (dy2 - dy1) },
    ];
    (loss, grad)
}
