//! Consensus ground truth and localization scoring: consensus maps, cIoU,
//! success rate with confidence interval, AUC, per-subject IoU, baselines.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::ResponseMap;
use crate::error::{Error, Result};
use crate::objectives::GroundTruthAttention;

/// Axis-aligned box in pixels. Pixel `(row, col)` is covered when its
/// center `(col + 0.5, row + 0.5)` lies in `[x, x + w) x [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (cx, cy) = (col as f64 + 0.5, row as f64 + 0.5);
        self.x <= cx && cx < self.x + self.w && self.y <= cy && cy < self.y + self.h
    }

    /// Pixel index range `[lo, hi)` covered along one axis.
    fn span(start: f64, len: f64, limit: usize) -> (usize, usize) {
        // centers k + 0.5 with start <= k + 0.5 < start + len
        let lo = (start - 0.5).ceil().max(0.0);
        let hi = (start + len - 0.5).ceil().max(0.0);
        (
            (lo as usize).min(limit),
            (hi as usize).min(limit),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Object,
    Ambient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectAnnotation {
    pub subject_id: String,
    pub tag: Tag,
    pub boxes: Vec<BoundingBox>,
}

impl SubjectAnnotation {
    /// Binary mask of the union of this subject's boxes.
    pub fn mask(&self, height: usize, width: usize) -> Vec<f64> {
        let mut m = vec![0.0; height * width];
        for b in &self.boxes {
            let (r0, r1) = BoundingBox::span(b.y, b.h, height);
            let (c0, c1) = BoundingBox::span(b.x, b.w, width);
            for r in r0..r1 {
                m[r * width + c0..r * width + c1].fill(1.0);
            }
        }
        m
    }
}

/// All subjects' opinions for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub subjects: Vec<SubjectAnnotation>,
}

impl Annotation {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    /// Subjects tagged as object; ambient opinions are filtered out.
    pub fn object_subjects(&self) -> Vec<SubjectAnnotation> {
        self.subjects
            .iter()
            .filter(|s| s.tag == Tag::Object)
            .cloned()
            .collect()
    }
}

/// `g = min(sum_j b_j / consensus_count, 1)` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub consensus_count: usize,
    pub subjects: usize,
}

impl ConsensusMap {
    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&g| g == 0.0)
    }

    /// Grid-resolution target: a cell is positive when any pixel it covers
    /// has full consensus (`g >= 1`). Cell `(r, c)` covers pixel rows
    /// `[r * factor, (r + 1) * factor)` and likewise for columns.
    pub fn grid_attention(&self, rows: usize, cols: usize, factor: usize) -> Result<GroundTruthAttention> {
        if rows * factor > self.height || cols * factor > self.width {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} grid at factor {factor} exceeds the {}x{} map",
                self.height, self.width
            )));
        }
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let hit = (r * factor..(r + 1) * factor).any(|y| {
                    (c * factor..(c + 1) * factor).any(|x| self.values[y * self.width + x] >= 1.0)
                });
                if hit {
                    t[r * cols + c] = 1.0;
                }
            }
        }
        GroundTruthAttention::new(rows, cols, t)
    }
}

pub const DEFAULT_CONSENSUS: usize = 2;

pub fn consensus_map(
    subjects: &[SubjectAnnotation],
    height: usize,
    width: usize,
    consensus_count: usize,
) -> Result<ConsensusMap> {
    if subjects.is_empty() {
        return Err(Error::Empty("no subject annotations".into()));
    }
    if consensus_count == 0 {
        return Err(Error::InvalidArgument("consensus count must be positive".into()));
    }
    if let Some(s) = subjects.iter().find(|s| s.tag != Tag::Object) {
        return Err(Error::InvalidArgument(format!(
            "subject {} is tagged ambient; filter ambient opinions first",
            s.subject_id
        )));
    }
    let mut counts = vec![0usize; height * width];
    for s in subjects {
        for (c, m) in counts.iter_mut().zip(s.mask(height, width)) {
            if m > 0.0 {
                *c += 1;
            }
        }
    }
    let k = consensus_count as f64;
    let values = counts.iter().map(|&c| (c as f64 / k).min(1.0)).collect();
    Ok(ConsensusMap {
        height,
        width,
        values,
        consensus_count,
        subjects: subjects.len(),
    })
}

fn ciou_values(response: &[f64], g: &[f64], tau: f64) -> Result<f64> {
    let mut inter = 0.0;
    let mut total = 0.0;
    let mut outside = 0usize;
    for (&r, &gi) in response.iter().zip(g) {
        total += gi;
        if r > tau {
            if gi > 0.0 {
                inter += gi;
            } else {
                outside += 1;
            }
        }
    }
    if total == 0.0 {
        return Err(Error::EmptyGroundTruth);
    }
    Ok(inter / (total + outside as f64))
}

/// Consensus IoU: `sum_{A} g / (sum g + |A \ G|)` with `A = {response > tau}`
/// and `G = {g > 0}`.
pub fn ciou(response: &ResponseMap, g: &ConsensusMap, tau: f64) -> Result<f64> {
    if (response.height, response.width) != (g.height, g.width) {
        return Err(Error::DimensionMismatch(format!(
            "response is {}x{}, consensus map is {}x{}",
            response.height, response.width, g.height, g.width
        )));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("threshold {tau} outside [0, 1]")));
    }
    ciou_values(&response.values, &g.values, tau)
}

/// Fraction of successful samples and the 95% normal-approximation
/// half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRate {
    pub rate: f64,
    pub half_width: f64,
    pub n: usize,
}

pub const Z_95: f64 = 1.96;

/// Share of `scores` at or above `threshold`. The interval half-width is
/// `1.96 * sqrt(p (1 - p) / n)`; a single sample carries no information
/// about its spread, so it reports the widest meaningful half-width, 1.
pub fn success_rate(scores: &[f64], threshold: f64) -> Result<SuccessRate> {
    if scores.is_empty() {
        return Err(Error::Empty("no scored samples".into()));
    }
    let n = scores.len();
    let hits = scores.iter().filter(|&&s| s >= threshold).count();
    let rate = hits as f64 / n as f64;
    let half_width = if n == 1 {
        1.0
    } else {
        Z_95 * (rate * (1.0 - rate) / n as f64).sqrt()
    };
    Ok(SuccessRate { rate, half_width, n })
}

/// Area under the success-rate curve over success thresholds
/// `0.00, 0.01, ..., 1.00` (trapezoid rule).
pub fn auc(scores: &[f64]) -> Result<f64> {
    let curve = success_curve(scores)?;
    Ok(curve
        .windows(2)
        .map(|w| 0.5 * (w[0] + w[1]) * 0.01)
        .sum())
}

/// Success rate at each of the 101 thresholds used by [`auc`].
pub fn success_curve(scores: &[f64]) -> Result<Vec<f64>> {
    (0..=100)
        .map(|k| success_rate(scores, k as f64 / 100.0).map(|s| s.rate))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject_id: String,
    pub iou: f64,
}

/// cIoU against each object-tagged subject's own binary map. Ambient
/// subjects are skipped; subjects with empty maps are skipped as well.
pub fn per_subject_iou(
    response: &ResponseMap,
    annotation: &Annotation,
    tau: f64,
) -> Result<Vec<SubjectScore>> {
    let mut out = Vec::new();
    for s in annotation.subjects.iter().filter(|s| s.tag == Tag::Object) {
        let b = s.mask(response.height, response.width);
        match ciou_values(&response.values, &b, tau) {
            Ok(iou) => out.push(SubjectScore {
                subject_id: s.subject_id.clone(),
                iou,
            }),
            Err(Error::EmptyGroundTruth) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    RandomPattern,
    CenterBox,
}

impl BaselineMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::RandomPattern => "random_pattern",
            Self::CenterBox => "center_box",
        }
    }
}

/// I.i.d. uniform noise, or a binary centered box of half the frame's side
/// lengths covering `[h/4, h/4 + h/2) x [w/4, w/4 + w/2)`.
pub fn baseline(height: usize, width: usize, mode: BaselineMode, rng: &mut impl Rng) -> ResponseMap {
    let values = match mode {
        BaselineMode::RandomPattern => (0..height * width).map(|_| rng.gen::<f64>()).collect(),
        BaselineMode::CenterBox => {
            let (r0, c0) = (height / 4, width / 4);
            let (r1, c1) = (r0 + height / 2, c0 + width / 2);
            let mut v = vec![0.0; height * width];
            for r in r0..r1 {
                v[r * width + c0..r * width + c1].fill(1.0);
            }
            v
        }
    };
    ResponseMap {
        height,
        width,
        values,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Pixel threshold applied to the response map.
    pub tau: f64,
    /// cIoU at or above this counts as a successful localization.
    pub success_threshold: f64,
    pub consensus_count: usize,
    /// Seed for the random-pattern baseline.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            success_threshold: 0.5,
            consensus_count: DEFAULT_CONSENSUS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub ciou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub name: String,
    pub success: SuccessRate,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRow {
    pub subject_id: String,
    pub mean_iou: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub samples: Vec<SampleScore>,
    /// Ids excluded because no object-tagged consensus remained.
    pub skipped: Vec<String>,
    pub method: MethodRow,
    pub per_subject: Vec<SubjectRow>,
    pub baselines: Vec<MethodRow>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<16} {:>8} {:>10} {:>8}\n",
            "method", "cIoU", "95% CI", "AUC"
        ));
        for row in std::iter::once(&self.method).chain(&self.baselines) {
            s.push_str(&format!(
                "{:<16} {:>8.3} {:>10} {:>8.3}\n",
                row.name,
                row.success.rate,
                format!("+/-{:.3}", row.success.half_width),
                row.auc
            ));
        }
        if !self.per_subject.is_empty() {
            s.push_str("\nsubject          mean IoU  samples\n");
            for r in &self.per_subject {
                s.push_str(&format!("{:<16} {:>8.3} {:>8}\n", r.subject_id, r.mean_iou, r.samples));
            }
        }
        s.push_str(&format!(
            "\nscored {} samples, skipped {}\n",
            self.samples.len(),
            self.skipped.len()
        ));
        s
    }
}

fn method_row(name: &str, scores: &[f64], threshold: f64) -> Result<MethodRow> {
    Ok(MethodRow {
        name: name.to_string(),
        success: success_rate(scores, threshold)?,
        auc: auc(scores)?,
    })
}

/// Scores predictions against annotations. Predictions without an
/// annotation are an error; annotations whose object consensus is empty are
/// skipped and listed in the report.
pub fn evaluate(
    predictions: &[(String, ResponseMap)],
    annotations: &BTreeMap<String, Annotation>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed);
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    let mut per_subject: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut random_scores = Vec::new();
    let mut center_scores = Vec::new();
    for (id, response) in predictions {
        let ann = annotations
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no annotation for prediction {id}")))?;
        let objects = ann.object_subjects();
        if objects.is_empty() {
            skipped.push(id.clone());
            continue;
        }
        let g = consensus_map(&objects, response.height, response.width, config.consensus_count)?;
        if g.is_empty() {
            skipped.push(id.clone());
            continue;
        }
        samples.push(SampleScore {
            id: id.clone(),
            ciou: ciou(response, &g, config.tau)?,
        });
        for s in per_subject_iou(response, ann, config.tau)? {
            let e = per_subject.entry(s.subject_id).or_insert((0.0, 0));
            e.0 += s.iou;
            e.1 += 1;
        }
        let rnd = baseline(response.height, response.width, BaselineMode::RandomPattern, &mut rng);
        random_scores.push(ciou(&rnd, &g, config.tau)?);
        let center = baseline(response.height, response.width, BaselineMode::CenterBox, &mut rng);
        center_scores.push(ciou(&center, &g, config.tau)?);
    }
    let scores: Vec<f64> = samples.iter().map(|s| s.ciou).collect();
    Ok(EvalReport {
        config: *config,
        method: method_row("model", &scores, config.success_threshold)?,
        baselines: vec![
            method_row(BaselineMode::RandomPattern.name(), &random_scores, config.success_threshold)?,
            method_row(BaselineMode::CenterBox.name(), &center_scores, config.success_threshold)?,
        ],
        per_subject: per_subject
            .into_iter()
            .map(|(subject_id, (sum, n))| SubjectRow {
                subject_id,
                mean_iou: sum / n as f64,
                samples: n,
            })
            .collect(),
        samples,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn subject(id: &str, boxes: &[(f64, f64, f64, f64)]) -> SubjectAnnotation {
        SubjectAnnotation {
            subject_id: id.into(),
            tag: Tag::Object,
            boxes: boxes
                .iter()
                .map(|&(x, y, w, h)| BoundingBox { x, y, w, h })
                .collect(),
        }
    }

    #[test]
    fn consensus_values() {
        let subjects = vec![
            subject("a", &[(0.0, 0.0, 4.0, 4.0)]),
            subject("b", &[(0.0, 0.0, 2.0, 2.0)]),
            subject("c", &[(0.0, 0.0, 1.0, 1.0)]),
        ];
        let g = consensus_map(&subjects, 4, 4, 2).unwrap();
        assert_eq!(g.values[0], 1.0); // all three
        assert_eq!(g.values[1], 1.0); // a and b
        assert_eq!(g.values[3], 0.5); // a only
        let h = consensus_map(&subjects[1..], 4, 4, 2).unwrap();
        assert_eq!(h.values[15], 0.0);
        assert!(consensus_map(&[], 4, 4, 2).is_err());
        let mut amb = subjects[0].clone();
        amb.tag = Tag::Ambient;
        assert!(consensus_map(&[amb], 4, 4, 2).is_err());
    }

    #[test]
    fn ciou_cases() {
        let g = ConsensusMap {
            height: 1,
            width: 3,
            values: vec![1.0, 0.5, 0.0],
            consensus_count: 2,
            subjects: 3,
        };
        let r = ResponseMap::new(1, 3, vec![0.9, 0.1, 0.8]).unwrap();
        assert!((ciou(&r, &g, 0.5).unwrap() - 0.4).abs() < 1e-15);

        let bin = ConsensusMap {
            values: vec![1.0, 1.0, 0.0],
            ..g.clone()
        };
        let perfect = ResponseMap::new(1, 3, vec![1.0, 1.0, 0.0]).unwrap();
        assert_eq!(ciou(&perfect, &bin, 0.5).unwrap(), 1.0);
        let disjoint = ResponseMap::new(1, 3, vec![0.0, 0.0, 1.0]).unwrap();
        assert_eq!(ciou(&disjoint, &bin, 0.5).unwrap(), 0.0);
        let zero = ConsensusMap {
            values: vec![0.0; 3],
            ..g
        };
        assert!(matches!(ciou(&perfect, &zero, 0.5), Err(Error::EmptyGroundTruth)));
    }

    #[test]
    fn success_rate_cases() {
        let all = success_rate(&[1.0; 10], 0.5).unwrap();
        assert_eq!((all.rate, all.half_width), (1.0, 0.0));
        let half: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let s = success_rate(&half, 0.5).unwrap();
        assert_eq!(s.rate, 0.5);
        assert!((s.half_width - 1.96 * (0.25f64 / 100.0).sqrt()).abs() < 1e-15);
        assert!((s.half_width - 0.098).abs() < 1e-12);
        let one = success_rate(&[0.7], 0.5).unwrap();
        assert_eq!((one.rate, one.half_width), (1.0, 1.0));
        assert!(success_rate(&[], 0.5).is_err());
    }

    #[test]
    fn auc_cases() {
        assert!((auc(&[1.0; 5]).unwrap() - 1.0).abs() < 1e-12);
        // the curve is 1 at threshold 0 and 0 afterwards: one half trapezoid
        assert!((auc(&[0.0; 5]).unwrap() - 0.005).abs() < 1e-15);
    }

    #[test]
    fn center_box_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = baseline(320, 320, BaselineMode::CenterBox, &mut rng);
        for r in [0, 79, 80, 239, 240, 319] {
            for c in [0, 79, 80, 239, 240, 319] {
                let inside = (80..240).contains(&r) && (80..240).contains(&c);
                assert_eq!(m.get(r, c), if inside { 1.0 } else { 0.0 });
            }
        }
        let gt = subject("a", &[(80.0, 80.0, 160.0, 160.0)]);
        let g = consensus_map(&[gt.clone(), gt.clone(), gt], 320, 320, 2).unwrap();
        assert_eq!(ciou(&m, &g, 0.5).unwrap(), 1.0);

        let a = baseline(8, 8, BaselineMode::RandomPattern, &mut ChaCha8Rng::seed_from_u64(4));
        let b = baseline(8, 8, BaselineMode::RandomPattern, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn per_subject_cases() {
        let same = subject("s", &[(2.0, 2.0, 4.0, 4.0)]);
        let ann = Annotation {
            id: "x".into(),
            subjects: vec![
                SubjectAnnotation { subject_id: "0".into(), ..same.clone() },
                SubjectAnnotation { subject_id: "1".into(), ..same.clone() },
                SubjectAnnotation { subject_id: "2".into(), ..same.clone() },
            ],
        };
        let mut resp = vec![0.0; 64];
        for r in 1..5 {
            for c in 1..5 {
                resp[r * 8 + c] = 1.0;
            }
        }
        let resp = ResponseMap::new(8, 8, resp).unwrap();
        let g = consensus_map(&ann.object_subjects(), 8, 8, 2).unwrap();
        let c = ciou(&resp, &g, 0.5).unwrap();
        for s in per_subject_iou(&resp, &ann, 0.5).unwrap() {
            assert_eq!(s.iou, c);
        }

        let mut far = ann.clone();
        far.subjects[2].boxes = vec![BoundingBox { x: 6.0, y: 6.0, w: 2.0, h: 2.0 }];
        far.subjects.push(SubjectAnnotation {
            subject_id: "amb".into(),
            tag: Tag::Ambient,
            boxes: vec![],
        });
        let scores = per_subject_iou(&resp, &far, 0.5).unwrap();
        assert_eq!(scores.len(), 3);
        assert_eq!(scores[2].iou, 0.0);
    }

    #[test]
    fn grid_attention_max_pools_full_consensus() {
        let s = subject("a", &[(4.0, 0.0, 1.0, 1.0)]);
        let g = consensus_map(&[s.clone(), s], 8, 8, 2).unwrap();
        let t = g.grid_attention(2, 2, 4).unwrap();
        assert_eq!(t.values, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn evaluate_perfect_predictions() {
        let s = subject("a", &[(2.0, 2.0, 4.0, 4.0)]);
        let ann = Annotation {
            id: "p".into(),
            subjects: vec![s.clone(), s.clone(), s],
        };
        let g = consensus_map(&ann.subjects, 8, 8, 2).unwrap();
        let resp = ResponseMap::new(8, 8, g.values.clone()).unwrap();
        let mut anns = BTreeMap::new();
        anns.insert("p".to_string(), ann);
        anns.insert(
            "amb".to_string(),
            Annotation {
                id: "amb".into(),
                subjects: vec![SubjectAnnotation {
                    subject_id: "0".into(),
                    tag: Tag::Ambient,
                    boxes: vec![],
                }],
            },
        );
        let preds = vec![("p".to_string(), resp.clone()), ("amb".to_string(), resp)];
        let r = evaluate(&preds, &anns, &EvalConfig::default()).unwrap();
        assert_eq!(r.method.success.rate, 1.0);
        assert_eq!(r.skipped, vec!["amb".to_string()]);
        assert!(r.to_table().contains("center_box"));
    }

    fn brute_force_ciou(resp: &[f64], g: &[f64], tau: f64) -> f64 {
        let a: Vec<usize> = (0..resp.len()).filter(|&i| resp[i] > tau).collect();
        let num: f64 = a.iter().map(|&i| g[i]).filter(|&v| v > 0.0).fold(0.0, |s, v| s + v);
        let den: f64 = g.iter().fold(0.0, |s, v| s + v);
        let outside = a.iter().filter(|&&i| g[i] == 0.0).count();
        num / (den + outside as f64)
    }

    proptest! {
        #[test]
        fn ciou_in_unit_interval_and_matches_brute_force(
            resp in prop::collection::vec(0.0f64..1.0, 64),
            boxes in prop::collection::vec((0u8..8, 0u8..8, 1u8..8, 1u8..8), 3),
            tau in 0.0f64..1.0,
        ) {
            let subjects: Vec<_> = boxes
                .iter()
                .enumerate()
                .map(|(i, &(x, y, w, h))| subject(&i.to_string(), &[(x as f64, y as f64, w as f64, h as f64)]))
                .collect();
            let g = consensus_map(&subjects, 8, 8, 2).unwrap();
            let r = ResponseMap::new(8, 8, resp.clone()).unwrap();
            let c = ciou(&r, &g, tau).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
            prop_assert_eq!(c, brute_force_ciou(&resp, &g.values, tau));
        }

        #[test]
        fn consensus_is_permutation_invariant(
            boxes in prop::collection::vec((0u8..8, 0u8..8, 1u8..8, 1u8..8), 3),
        ) {
            let subjects: Vec<_> = boxes
                .iter()
                .enumerate()
                .map(|(i, &(x, y, w, h))| subject(&i.to_string(), &[(x as f64, y as f64, w as f64, h as f64)]))
                .collect();
            let a = consensus_map(&subjects, 8, 8, 2).unwrap();
            let rev: Vec<_> = subjects.iter().rev().cloned().collect();
            let b = consensus_map(&rev, 8, 8, 2).unwrap();
            prop_assert_eq!(a.values, b.values);
        }

        #[test]
        fn binary_ciou_is_classical_iou(
            resp in prop::collection::vec(any::<bool>(), 36),
            gt in prop::collection::vec(any::<bool>(), 36),
        ) {
            prop_assume!(gt.iter().any(|&b| b));
            let r = ResponseMap::new(6, 6, resp.iter().map(|&b| b as u8 as f64).collect()).unwrap();
            let g = ConsensusMap {
                height: 6,
                width: 6,
                values: gt.iter().map(|&b| b as u8 as f64).collect(),
                consensus_count: 1,
                subjects: 1,
            };
            let inter = resp.iter().zip(&gt).filter(|(a, b)| **a && **b).count();
            let union = resp.iter().zip(&gt).filter(|(a, b)| **a || **b).count();
            prop_assert!((ciou(&r, &g, 0.5).unwrap() - inter as f64 / union as f64).abs() < 1e-15);
        }

        #[test]
        fn ci_halves_when_samples_quadruple(n in 2usize..200, frac in 0.01f64..0.99) {
            let hits = ((frac * n as f64) as usize).clamp(1, n - 1);
            let make = |scale: usize| -> Vec<f64> {
                (0..n * scale).map(|i| if i < hits * scale { 1.0 } else { 0.0 }).collect()
            };
            let a = success_rate(&make(1), 0.5).unwrap();
            let b = success_rate(&make(4), 0.5).unwrap();
            prop_assert!((b.half_width / a.half_width - 0.5).abs() <= 0.025);
        }
    }
}
