//! Bipartite assignment between predictions (rows) and ground-truth instances (columns).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{giou_loss, l1_box_loss};
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub c_cls: f64,
    pub c_l1: f64,
    pub c_giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            c_cls: 2.0,
            c_l1: 5.0,
            c_giou: 2.0,
        }
    }
}

impl MatchWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.c_cls, self.c_l1, self.c_giou]
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::Invalid(format!("match weights {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries for a {rows}×{cols} cost matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("cost matrix has a non-finite entry".into()));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged cost rows".into()));
        }
        CostMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by column.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    fn from_pairs(cost: &CostMatrix, mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_by_key(|&(r, c)| (c, r));
        let total_cost = pairs.iter().fold(0.0, |acc, &(r, c)| acc + cost.at(r, c));
        Assignment { pairs, total_cost }
    }

    /// Column matched to each row, if any.
    pub fn row_to_col(&self, rows: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; rows];
        for &(r, c) in &self.pairs {
            out[r] = Some(c);
        }
        out
    }
}

/// `entry(q, g) = c_cls·(−prob[q, cat(g)]) + c_l1·L1 + c_giou·(1 − GIoU)`.
///
/// `categories` names the columns of `probs`; boxes are normalized `(cx, cy, w, h)`.
pub fn build_cost_matrix(
    probs: &Tensor,
    categories: &[u32],
    pred_boxes: &[[f64; 4]],
    gt: &[(u32, [f64; 4])],
    w: &MatchWeights,
) -> Result<CostMatrix> {
    w.validate()?;
    if probs.dims().len() != 2
        || probs.rows() != pred_boxes.len()
        || probs.cols() != categories.len()
    {
        return Err(Error::Shape(format!(
            "probs {:?} with {} boxes and {} categories",
            probs.dims(),
            pred_boxes.len(),
            categories.len()
        )));
    }
    let cols: Vec<usize> = gt
        .iter()
        .map(|(cat, _)| {
            categories
                .iter()
                .position(|c| c == cat)
                .ok_or(Error::MissingCategory(*cat))
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(pred_boxes.len() * gt.len());
    for (q, pb) in pred_boxes.iter().enumerate() {
        for (g, (_, gb)) in gt.iter().enumerate() {
            let cls = -probs.at(q, cols[g]);
            let l1 = l1_box_loss(pb, gb).0;
            let giou = giou_loss(pb, gb).0;
            data.push(w.c_cls * cls + w.c_l1 * l1 + w.c_giou * giou);
        }
    }
    CostMatrix::new(pred_boxes.len(), gt.len(), data)
}

/// Minimum-cost assignment covering the smaller side completely.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    if cost.rows == 0 || cost.cols == 0 {
        return Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        };
    }
    // a[i][j] with n ≤ m
    let transposed = cost.cols > cost.rows;
    let (n, m) = if transposed {
        (cost.rows, cost.cols)
    } else {
        (cost.cols, cost.rows)
    };
    let a = |i: usize, j: usize| {
        if transposed {
            cost.at(i, j)
        } else {
            cost.at(j, i)
        }
    };

    // potentials, 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let pairs = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| {
            if transposed {
                (p[j] - 1, j - 1)
            } else {
                (j - 1, p[j] - 1)
            }
        })
        .collect();
    Assignment::from_pairs(cost, pairs)
}

pub const BRUTE_FORCE_MAX_COLS: usize = 8;

/// Exhaustive minimum over injections of columns into rows.
pub fn brute_force_assign(cost: &CostMatrix) -> Result<Assignment> {
    if cost.cols > BRUTE_FORCE_MAX_COLS {
        return Err(Error::Refused(format!(
            "brute force over {} columns (limit {BRUTE_FORCE_MAX_COLS})",
            cost.cols
        )));
    }
    if cost.rows < cost.cols {
        return Err(Error::Refused(format!(
            "brute force needs rows ≥ cols, got {}×{}",
            cost.rows, cost.cols
        )));
    }
    struct Search<'a> {
        cost: &'a CostMatrix,
        used: Vec<bool>,
        current: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }
    fn dfs(s: &mut Search, col: usize, acc: f64) {
        if col == s.cost.cols {
            if s.best.as_ref().is_none_or(|(b, _)| acc < *b) {
                s.best = Some((acc, s.current.clone()));
            }
            return;
        }
        for r in 0..s.cost.rows {
            if s.used[r] {
                continue;
            }
            s.used[r] = true;
            s.current.push(r);
            dfs(s, col + 1, acc + s.cost.at(r, col));
            s.current.pop();
            s.used[r] = false;
        }
    }
    let mut s = Search {
        cost,
        used: vec![false; cost.rows],
        current: Vec::new(),
        best: None,
    };
    dfs(&mut s, 0, 0.0);
    let rows = s.best.map(|(_, r)| r).unwrap_or_default();
    Ok(Assignment::from_pairs(
        cost,
        rows.into_iter().enumerate().map(|(c, r)| (r, c)).collect(),
    ))
}
