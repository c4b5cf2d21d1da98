//! Query/prompt similarities and negative-suppressed probabilities.
//!
//! The calibrated probability for query `q` and category `m` is
//! `σ(S_P[q,m] − b·β·max_i S_N[q,m,i])` with `b ∈ {0, 1}` the mode indicator.
//! A category with no negatives gets no suppression term.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numcore::{matmul_bt, sigmoid_scalar, Tensor};
use crate::rng::Rng;

pub const DEFAULT_BETA: f64 = 0.3;

/// How the mode indicator is drawn each training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModePolicy {
    Fixed0,
    Fixed1,
    Bernoulli(f64),
}

impl ModePolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModePolicy::Bernoulli(p) if !(0.0..=1.0).contains(p) => {
                Err(Error::Invalid(format!("bernoulli probability {p}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ModePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModePolicy::Fixed0 => write!(f, "fixed_0"),
            ModePolicy::Fixed1 => write!(f, "fixed_1"),
            ModePolicy::Bernoulli(p) => write!(f, "bernoulli({p})"),
        }
    }
}

impl FromStr for ModePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "fixed_0" => return Ok(ModePolicy::Fixed0),
            "fixed_1" => return Ok(ModePolicy::Fixed1),
            _ => {}
        }
        let inner = s
            .strip_prefix("bernoulli(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::Invalid(format!("mode policy {s:?}")))?;
        let p: f64 = inner
            .trim()
            .parse()
            .map_err(|_| Error::Invalid(format!("mode policy {s:?}")))?;
        let policy = ModePolicy::Bernoulli(p);
        policy.validate()?;
        Ok(policy)
    }
}

impl Serialize for ModePolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModePolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NncConfig {
    pub beta: f64,
    pub mode_policy: ModePolicy,
}

impl Default for NncConfig {
    fn default() -> Self {
        NncConfig {
            beta: DEFAULT_BETA,
            mode_policy: ModePolicy::Bernoulli(0.5),
        }
    }
}

impl NncConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Invalid(format!("beta {} outside [0, 1)", self.beta)));
        }
        self.mode_policy.validate()
    }
}

pub fn sample_mode_indicator(policy: ModePolicy, rng: &mut Rng) -> u8 {
    match policy {
        ModePolicy::Fixed0 => 0,
        ModePolicy::Fixed1 => 1,
        ModePolicy::Bernoulli(p) => u8::from(rng.gen_bool(p)),
    }
}

/// Aggregated prompts, one row per category; negative counts may differ per category.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub categories: Vec<u32>,
    /// `M×D`
    pub positives: Tensor,
    /// One `K_m×D` block per category, `None` when that category has no negatives.
    pub negatives: Vec<Option<Tensor>>,
}

impl PromptSet {
    pub fn new(
        categories: Vec<u32>,
        positives: Tensor,
        negatives: Vec<Option<Tensor>>,
    ) -> Result<Self> {
        if positives.dims().len() != 2
            || positives.rows() != categories.len()
            || negatives.len() != categories.len()
        {
            return Err(Error::Shape(format!(
                "{} categories, positives {:?}, {} negative blocks",
                categories.len(),
                positives.dims(),
                negatives.len()
            )));
        }
        let d = positives.cols();
        if negatives
            .iter()
            .flatten()
            .any(|n| n.dims().len() != 2 || n.cols() != d)
        {
            return Err(Error::Shape(
                "negative width differs from positive width".into(),
            ));
        }
        Ok(PromptSet {
            categories,
            positives,
            negatives,
        })
    }

    pub fn has_negatives(&self) -> bool {
        self.negatives.iter().any(Option::is_some)
    }

    /// Same positives with every negative dropped.
    pub fn positive_only(&self) -> PromptSet {
        PromptSet {
            categories: self.categories.clone(),
            positives: self.positives.clone(),
            negatives: vec![None; self.categories.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityScores {
    /// `N_q×M`
    pub s_p: Tensor,
    /// Per category, `N_q×K_m` (or `None`).
    pub s_n: Vec<Option<Tensor>>,
}

impl SimilarityScores {
    /// Largest negative similarity of cell `(q, m)`.
    pub fn max_negative(&self, q: usize, m: usize) -> Option<f64> {
        self.s_n[m]
            .as_ref()
            .map(|t| t.row(q).iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }
}

pub fn similarity(queries: &Tensor, prompts: &PromptSet) -> Result<SimilarityScores> {
    let s_p = matmul_bt(queries, &prompts.positives)?;
    let s_n = prompts
        .negatives
        .iter()
        .map(|n| n.as_ref().map(|n| matmul_bt(queries, n)).transpose())
        .collect::<Result<_>>()?;
    Ok(SimilarityScores { s_p, s_n })
}

/// Calibrated probability for one cell.
pub fn nnc_cell(s_p: f64, max_s_n: Option<f64>, beta: f64, indicator: u8) -> f64 {
    match max_s_n {
        Some(m) if indicator == 1 => sigmoid_scalar(s_p - beta * m),
        _ => sigmoid_scalar(s_p),
    }
}

pub fn nnc_probability(s: &SimilarityScores, beta: f64, indicator: u8) -> Result<Tensor> {
    if indicator > 1 {
        return Err(Error::Invalid(format!("mode indicator {indicator}")));
    }
    let (nq, m) = (s.s_p.rows(), s.s_p.cols());
    let mut out = Vec::with_capacity(nq * m);
    for q in 0..nq {
        for c in 0..m {
            out.push(nnc_cell(
                s.s_p.at(q, c),
                s.max_negative(q, c),
                beta,
                indicator,
            ));
        }
    }
    Tensor::new(vec![nq, m], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    PositiveOnly,
    AutoSuggested,
    UserCurated,
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceMode::PositiveOnly => "positive_only",
            InferenceMode::AutoSuggested => "auto_suggested",
            InferenceMode::UserCurated => "user_curated",
        })
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "positive_only" => Ok(InferenceMode::PositiveOnly),
            "auto_suggested" => Ok(InferenceMode::AutoSuggested),
            "user_curated" => Ok(InferenceMode::UserCurated),
            other => Err(Error::Invalid(format!("inference mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub query: usize,
    pub category_id: u32,
    pub bbox: BBox,
    pub probability: f64,
    /// Probability of the same query and category with the suppression term off.
    pub positive_only_probability: f64,
}

impl Detection {
    pub fn suppressed_delta(&self) -> f64 {
        self.positive_only_probability - self.probability
    }
}

fn scored_cells(
    queries: &Tensor,
    boxes: &[BBox],
    prompts: &PromptSet,
    beta: f64,
    mode: InferenceMode,
) -> Result<Option<(SimilarityScores, Tensor)>> {
    if boxes.len() != queries.rows() {
        return Err(Error::Shape(format!(
            "{} boxes for {} queries",
            boxes.len(),
            queries.rows()
        )));
    }
    if mode == InferenceMode::UserCurated && !prompts.has_negatives() {
        return Err(Error::MissingNegatives);
    }
    if prompts.categories.is_empty() {
        return Ok(None);
    }
    let scores = similarity(queries, prompts)?;
    let indicator = u8::from(mode != InferenceMode::PositiveOnly);
    let probs = nnc_probability(&scores, beta, indicator)?;
    Ok(Some((scores, probs)))
}

fn sort_detections(out: &mut [Detection]) {
    out.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then(a.query.cmp(&b.query))
            .then(a.category_id.cmp(&b.category_id))
    });
}

/// Per query, the best category by calibrated probability, kept when it reaches `score_threshold`.
///
/// Results are sorted by descending probability, ties by query index.
pub fn infer_detections(
    queries: &Tensor,
    boxes: &[BBox],
    prompts: &PromptSet,
    beta: f64,
    mode: InferenceMode,
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let Some((scores, probs)) = scored_cells(queries, boxes, prompts, beta, mode)? else {
        return Ok(Vec::new());
    };
    let m = prompts.categories.len();
    let mut out = Vec::new();
    for (q, bbox) in boxes.iter().enumerate() {
        let mut best = 0;
        for c in 1..m {
            if probs.at(q, c) > probs.at(q, best) {
                best = c;
            }
        }
        if probs.at(q, best) < score_threshold {
            continue;
        }
        out.push(Detection {
            query: q,
            category_id: prompts.categories[best],
            bbox: *bbox,
            probability: probs.at(q, best),
            positive_only_probability: sigmoid_scalar(scores.s_p.at(q, best)),
        });
    }
    sort_detections(&mut out);
    Ok(out)
}

/// Every (query, category) cell reaching `score_threshold`, sorted like [`infer_detections`].
pub fn score_cells(
    queries: &Tensor,
    boxes: &[BBox],
    prompts: &PromptSet,
    beta: f64,
    mode: InferenceMode,
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let Some((scores, probs)) = scored_cells(queries, boxes, prompts, beta, mode)? else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for (q, bbox) in boxes.iter().enumerate() {
        for (c, &category_id) in prompts.categories.iter().enumerate() {
            let p = probs.at(q, c);
            if p >= score_threshold {
                out.push(Detection {
                    query: q,
                    category_id,
                    bbox: *bbox,
                    probability: p,
                    positive_only_probability: sigmoid_scalar(scores.s_p.at(q, c)),
                });
            }
        }
    }
    sort_detections(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Independent logistic: exp via its Taylor series.
    fn oracle_sigmoid(x: f64) -> f64 {
        let y = -x;
        let (mut term, mut sum) = (1.0f64, 1.0f64);
        for n in 1..60 {
            term *= y / n as f64;
            sum += term;
        }
        1.0 / (1.0 + sum)
    }

    fn scores(s_p: f64, s_n: &[f64]) -> SimilarityScores {
        SimilarityScores {
            s_p: Tensor::new(vec![1, 1], vec![s_p]).unwrap(),
            s_n: vec![Some(Tensor::new(vec![1, s_n.len()], s_n.to_vec()).unwrap())],
        }
    }

    #[test]
    fn nnc_fixtures() {
        let s = scores(2.0, &[1.0, 3.0, 0.5]);
        let joint = nnc_probability(&s, 0.3, 1).unwrap().data()[0];
        assert_abs_diff_eq!(joint, oracle_sigmoid(1.1), epsilon = 1e-12);
        assert_abs_diff_eq!(joint, 0.75026, epsilon = 1e-5);
        let pos = nnc_probability(&s, 0.3, 0).unwrap().data()[0];
        assert_abs_diff_eq!(pos, oracle_sigmoid(2.0), epsilon = 1e-12);
        assert_abs_diff_eq!(pos, 0.88080, epsilon = 1e-5);
        assert_eq!(
            nnc_probability(&s, 0.0, 1).unwrap().data()[0],
            sigmoid_scalar(2.0)
        );
    }

    #[test]
    fn similarity_fixtures() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let p = PromptSet::new(
            vec![0],
            Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            vec![None],
        )
        .unwrap();
        assert_eq!(similarity(&q, &p).unwrap().s_p.data(), &[1.0]);
        let p = PromptSet::new(
            vec![0],
            Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap(),
            vec![None],
        )
        .unwrap();
        assert_eq!(similarity(&q, &p).unwrap().s_p.data(), &[0.0]);

        let mut rng = stream(0, "sim");
        let rand = |rng: &mut crate::rng::Rng, r, c| {
            Tensor::new(
                vec![r, c],
                (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let q = rand(&mut rng, 3, 2);
        let negs = vec![Some(rand(&mut rng, 2, 2)), Some(rand(&mut rng, 2, 2))];
        let p = PromptSet::new(vec![4, 7], rand(&mut rng, 2, 2), negs).unwrap();
        let s = similarity(&q, &p).unwrap();
        assert_eq!(s.s_p.dims(), &[3, 2]);
        assert!(s.s_n.iter().all(|t| t.as_ref().unwrap().dims() == [3, 2]));
        assert!(similarity(&rand(&mut rng, 3, 5), &p).is_err());
    }

    #[test]
    fn mode_indicator_sampling() {
        let mut rng = stream(1, "mode");
        assert_eq!(sample_mode_indicator(ModePolicy::Fixed1, &mut rng), 1);
        assert_eq!(sample_mode_indicator(ModePolicy::Fixed0, &mut rng), 0);
        assert!((0..1000).all(|_| sample_mode_indicator(ModePolicy::Bernoulli(0.0), &mut rng) == 0));
        let mean = (0..10_000)
            .map(|_| sample_mode_indicator(ModePolicy::Bernoulli(0.5), &mut rng) as f64)
            .sum::<f64>()
            / 10_000.0;
        assert!((0.48..=0.52).contains(&mean), "{mean}");
    }

    #[test]
    fn policy_text_round_trip() {
        for p in [
            ModePolicy::Fixed0,
            ModePolicy::Fixed1,
            ModePolicy::Bernoulli(0.25),
        ] {
            assert_eq!(p.to_string().parse::<ModePolicy>().unwrap(), p);
        }
        assert!("bernoulli(1.5)".parse::<ModePolicy>().is_err());
        assert!("sometimes".parse::<ModePolicy>().is_err());
        assert!(NncConfig {
            beta: 1.0,
            ..NncConfig::default()
        }
        .validate()
        .is_err());
    }

    fn one_query(s_p: f64, negs: Option<Vec<f64>>) -> (Tensor, PromptSet) {
        // query e0; positive s_p·e0; negatives v·e0 give similarity v
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let pos = Tensor::from_rows(&[vec![s_p, 0.0]]).unwrap();
        let neg = negs.map(|v| {
            Tensor::from_rows(&v.iter().map(|&x| vec![x, 0.0]).collect::<Vec<_>>()).unwrap()
        });
        (q, PromptSet::new(vec![3], pos, vec![neg]).unwrap())
    }

    #[test]
    fn infer_fixtures() {
        let b = [BBox::new(0.0, 0.0, 4.0, 4.0).unwrap()];
        let (q, p) = one_query(2.0, None);
        let d = infer_detections(&q, &b, &p, 0.3, InferenceMode::PositiveOnly, 0.5).unwrap();
        assert_eq!(d.len(), 1);
        assert_abs_diff_eq!(d[0].probability, 0.88080, epsilon = 1e-5);
        assert_eq!(d[0].category_id, 3);
        assert!(
            infer_detections(&q, &b, &p, 0.3, InferenceMode::PositiveOnly, 1.0)
                .unwrap()
                .is_empty()
        );
        assert!(matches!(
            infer_detections(&q, &b, &p, 0.3, InferenceMode::UserCurated, 0.5),
            Err(Error::MissingNegatives)
        ));
        // a negative equal to the query lowers its probability
        let (q, p) = one_query(2.0, Some(vec![1.0]));
        let d = infer_detections(&q, &b, &p, 0.3, InferenceMode::UserCurated, 0.0).unwrap();
        assert!(d[0].probability < 0.88080);
        assert!(d[0].suppressed_delta() > 0.0);
    }

    #[test]
    fn score_cells_keeps_every_category() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let pos = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.1]]).unwrap();
        let p = PromptSet::new(vec![5, 9], pos, vec![None, None]).unwrap();
        let boxes = vec![BBox::new(0.0, 0.0, 2.0, 2.0).unwrap(); 2];
        let all = score_cells(&q, &boxes, &p, 0.3, InferenceMode::PositiveOnly, 0.0).unwrap();
        assert_eq!(all.len(), 4);
        assert_eq!((all[0].query, all[0].category_id), (0, 5));
        assert_eq!((all[1].query, all[1].category_id), (1, 9));
        assert_abs_diff_eq!(all[1].probability, 0.75026, epsilon = 1e-5);
        // the two zero-similarity cells tie at 0.5 and fall back to query order
        assert_eq!((all[2].query, all[3].query), (0, 1));
        let best = infer_detections(&q, &boxes, &p, 0.3, InferenceMode::PositiveOnly, 0.0).unwrap();
        assert_eq!(best.len(), 2);
        assert_eq!(
            score_cells(&q, &boxes, &p, 0.3, InferenceMode::PositiveOnly, 0.6)
                .unwrap()
                .len(),
            2
        );
    }

    #[test]
    fn ranking_ignores_monotone_transform() {
        let mut rng = stream(2, "rank");
        let q = Tensor::new(
            vec![8, 3],
            (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let pos = Tensor::new(
            vec![2, 3],
            (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let p = PromptSet::new(vec![0, 1], pos.clone(), vec![None, None]).unwrap();
        let boxes = vec![BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(); 8];
        let d = infer_detections(&q, &boxes, &p, 0.3, InferenceMode::PositiveOnly, 0.0).unwrap();
        // scaling similarities by 3 is a strictly increasing transform of every probability
        let p3 = PromptSet::new(vec![0, 1], pos.map(|v| 3.0 * v), vec![None, None]).unwrap();
        let d3 = infer_detections(&q, &boxes, &p3, 0.3, InferenceMode::PositiveOnly, 0.0).unwrap();
        let order = |d: &[Detection]| {
            d.iter()
                .map(|x| (x.query, x.category_id))
                .collect::<Vec<_>>()
        };
        assert_eq!(order(&d), order(&d3));
    }

    fn arb_cell() -> impl Strategy<Value = (f64, Vec<f64>, f64)> {
        (
            -5.0f64..5.0,
            proptest::collection::vec(-5.0f64..5.0, 1..5),
            0.0f64..0.99,
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        #[test]
        fn monotone_in_beta_and_negatives((s_p, s_n, beta) in arb_cell(), db in 0.0f64..0.5, bump in 0.0f64..2.0) {
            let max = s_n.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = nnc_cell(s_p, Some(max), beta, 1);
            let b2 = (beta + db).min(0.999);
            if max >= 0.0 {
                prop_assert!(nnc_cell(s_p, Some(max), b2, 1) <= p);
            }
            prop_assert!(nnc_cell(s_p, Some(max + bump), beta, 1) <= p);
            if beta > 0.0 && bump > 1e-6 {
                prop_assert!(nnc_cell(s_p, Some(max + bump), beta, 1) < p);
            }
            prop_assert!(nnc_cell(s_p + bump, Some(max), beta, 1) >= p);
        }

        #[test]
        fn indicator_zero_is_positive_only((s_p, s_n, beta) in arb_cell()) {
            let s = scores(s_p, &s_n);
            let plain = SimilarityScores { s_p: s.s_p.clone(), s_n: vec![None] };
            prop_assert_eq!(nnc_probability(&s, beta, 0).unwrap(), nnc_probability(&plain, beta, 1).unwrap());
            prop_assert_eq!(nnc_probability(&s, 0.0, 1).unwrap(), nnc_probability(&plain, 0.0, 1).unwrap());
        }

        #[test]
        fn only_the_max_negative_matters((s_p, s_n, beta) in arb_cell(), shrink in 0.0f64..3.0) {
            let max = s_n.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lowered: Vec<f64> = s_n.iter().map(|&v| if v < max { v - shrink } else { v }).collect();
            prop_assert_eq!(
                nnc_probability(&scores(s_p, &s_n), beta, 1).unwrap(),
                nnc_probability(&scores(s_p, &lowered), beta, 1).unwrap()
            );
        }
    }
}
