//! Training objectives: the distance-ratio triplet loss, the supervised
//! attention cross-entropy, their gated combination, and a finite-difference
//! gradient checker.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, GridMap};
use crate::error::{Error, Result};

/// Distances from the visual embedding to the positive and negative sound
/// embeddings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletDistances {
    pub d_pos: f64,
    pub d_neg: f64,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn triplet_distances(f_v: &[f64], f_s_pos: &[f64], f_s_neg: &[f64]) -> Result<TripletDistances> {
    if f_v.len() != f_s_pos.len() || f_v.len() != f_s_neg.len() {
        return Err(Error::DimensionMismatch(format!(
            "embedding lengths differ: f_v {}, f_s+ {}, f_s- {}",
            f_v.len(),
            f_s_pos.len(),
            f_s_neg.len()
        )));
    }
    let all = f_v.iter().chain(f_s_pos).chain(f_s_neg);
    if all.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding".into()));
    }
    Ok(TripletDistances {
        d_pos: euclidean(f_v, f_s_pos),
        d_neg: euclidean(f_v, f_s_neg),
    })
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `|| softmax(d_pos, d_neg) - (0, 1) ||^2`, which equals
/// `2 * logistic(d_pos - d_neg)^2`.
pub fn distance_ratio_loss(d: &TripletDistances) -> f64 {
    let p = logistic(d.d_pos - d.d_neg);
    2.0 * p * p
}

/// `(dL/dd_pos, dL/dd_neg)` of [`distance_ratio_loss`].
pub fn distance_ratio_grad(d: &TripletDistances) -> (f64, f64) {
    let p = logistic(d.d_pos - d.d_neg);
    let g = 4.0 * p * p * (1.0 - p);
    (g, -g)
}

/// Binary target attention on the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthAttention {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl GroundTruthAttention {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} target cells for a {rows}x{cols} grid",
                values.len()
            )));
        }
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("ground-truth attention must be binary".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }
}

fn check_supervision(alpha: &AttentionMap, gt: &GroundTruthAttention) -> Result<f64> {
    if alpha.rows() != gt.rows || alpha.cols() != gt.cols {
        return Err(Error::DimensionMismatch(format!(
            "attention is {}x{}, target is {}x{}",
            alpha.rows(),
            alpha.cols(),
            gt.rows,
            gt.cols
        )));
    }
    let k = gt.positives();
    if k == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    if alpha.values.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::InvalidArgument("attention weights must be strictly positive".into()));
    }
    Ok(k as f64)
}

/// `-sum_i gt_i log(alpha_i)`, optionally divided by the number of target
/// cells.
pub fn supervised_attention_loss_with(
    alpha: &AttentionMap,
    gt: &GroundTruthAttention,
    normalized: bool,
) -> Result<f64> {
    let k = check_supervision(alpha, gt)?;
    let mut loss = 0.0;
    for (a, t) in alpha.values.iter().zip(&gt.values) {
        if *t != 0.0 {
            loss -= t * a.ln();
        }
    }
    Ok(if normalized { loss / k } else { loss })
}

pub fn supervised_attention_loss(alpha: &AttentionMap, gt: &GroundTruthAttention) -> Result<f64> {
    supervised_attention_loss_with(alpha, gt, false)
}

/// Gradient of the supervised loss with respect to the pre-softmax scores:
/// `alpha_i * sum(gt) - gt_i` (scaled by `1/sum(gt)` when normalized).
pub fn supervised_score_grad(
    alpha: &AttentionMap,
    gt: &GroundTruthAttention,
    normalized: bool,
) -> Result<Vec<f64>> {
    let k = check_supervision(alpha, gt)?;
    let scale = if normalized { 1.0 / k } else { 1.0 };
    let total: f64 = gt.values.iter().sum();
    Ok(alpha
        .values
        .iter()
        .zip(&gt.values)
        .map(|(a, t)| scale * (a * total - t))
        .collect())
}

/// Per-term weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub unsupervised: f64,
    pub supervised: f64,
    /// Divide the cross-entropy by the number of target cells.
    pub normalize_supervised: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            unsupervised: 1.0,
            supervised: 1.0,
            normalize_supervised: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_u: f64,
    pub l_s: f64,
    /// 1 when the sample carries an annotation, else 0.
    pub lambda: f64,
    pub l_total: f64,
}

/// `w_U * L_U + lambda * w_S * L_S`, with `lambda = 0` when `gt` is absent.
/// The supervised term is never evaluated for unannotated samples.
pub fn combined_loss(
    f_v: &[f64],
    f_s_pos: &[f64],
    f_s_neg: &[f64],
    alpha: &AttentionMap,
    gt: Option<&GroundTruthAttention>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let d = triplet_distances(f_v, f_s_pos, f_s_neg)?;
    let l_u = distance_ratio_loss(&d);
    combine(l_u, alpha, gt, weights)
}

pub(crate) fn combine(
    l_u: f64,
    alpha: &AttentionMap,
    gt: Option<&GroundTruthAttention>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let unsup = weights.unsupervised * l_u;
    match gt {
        None => Ok(LossBreakdown {
            l_u,
            l_s: 0.0,
            lambda: 0.0,
            l_total: unsup,
        }),
        Some(gt) => {
            let l_s = supervised_attention_loss_with(alpha, gt, weights.normalize_supervised)?;
            Ok(LossBreakdown {
                l_u,
                l_s,
                lambda: 1.0,
                l_total: unsup + weights.supervised * l_s,
            })
        }
    }
}

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn value(&self, params: &[f64]) -> Result<f64>;
    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>>;

    /// Identifier of the differentiable piece containing `params`, for
    /// piecewise-smooth objectives. Probes whose finite-difference stencil
    /// straddles two pieces are skipped.
    fn region(&self, _params: &[f64]) -> Result<Option<u64>> {
        Ok(None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: Option<usize>,
    pub probes_used: usize,
    pub probes_skipped: usize,
}

/// Compares analytic partial derivatives to central differences at the given
/// coordinates.
pub fn gradient_check_at(
    objective: &impl Objective,
    params: &[f64],
    indices: &[usize],
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let eps = options.eps;
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside (0, 1e-2]")));
    }
    let analytic = objective.gradient(params)?;
    if analytic.len() != params.len() {
        return Err(Error::DimensionMismatch("gradient length differs from parameter count".into()));
    }
    let base_region = objective.region(params)?;
    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: None,
        probes_used: 0,
        probes_skipped: 0,
    };
    for &i in indices {
        if i >= params.len() {
            return Err(Error::InvalidArgument(format!("probe index {i} out of range")));
        }
        let orig = p[i];
        p[i] = orig + eps;
        let plus = objective.value(&p)?;
        let plus_region = objective.region(&p)?;
        p[i] = orig - eps;
        let minus = objective.value(&p)?;
        let minus_region = objective.region(&p)?;
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at probe {i}")));
        }
        if plus_region != base_region || minus_region != base_region {
            report.probes_skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(options.floor);
        report.probes_used += 1;
        if report.worst_index.is_none() || rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

/// [`gradient_check_at`] on `probe_count` uniformly drawn coordinates.
pub fn gradient_check(
    objective: &impl Objective,
    params: &[f64],
    probe_count: usize,
    options: &GradCheckOptions,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    if params.is_empty() {
        return Err(Error::Empty("no parameters to probe".into()));
    }
    let indices: Vec<usize> = (0..probe_count).map(|_| rng.gen_range(0..params.len())).collect();
    gradient_check_at(objective, params, &indices, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn triplet_distance_cases() {
        let d = triplet_distances(&[0.0, 0.0], &[3.0, 4.0], &[0.0, 1.0]).unwrap();
        assert_eq!((d.d_pos, d.d_neg), (5.0, 1.0));
        let s = triplet_distances(&[0.0, 0.0], &[0.0, 1.0], &[3.0, 4.0]).unwrap();
        assert_eq!((s.d_pos, s.d_neg), (1.0, 5.0));
        let z = triplet_distances(&[1.0, 2.0], &[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(z.d_pos, 0.0);
        assert!(triplet_distances(&[1.0], &[1.0, 2.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn distance_ratio_cases() {
        let eq = TripletDistances { d_pos: 3.0, d_neg: 3.0 };
        assert_eq!(distance_ratio_loss(&eq), 0.5);
        let far = TripletDistances { d_pos: 0.0, d_neg: 800.0 };
        assert!(distance_ratio_loss(&far) < 1e-300);
        let one = TripletDistances { d_pos: 1.0, d_neg: 0.0 };
        // 2 * (e / (1 + e))^2, e/(1+e) = 0.7310585786300049
        assert!((distance_ratio_loss(&one) - 1.068893290777046).abs() < 1e-12);
    }

    #[test]
    fn distance_ratio_equals_softmax_form() {
        let d = TripletDistances { d_pos: 0.7, d_neg: 1.9 };
        let (ep, en) = (d.d_pos.exp(), d.d_neg.exp());
        let dp = ep / (ep + en);
        let dn = en / (ep + en);
        let direct = dp * dp + (dn - 1.0) * (dn - 1.0);
        assert!((distance_ratio_loss(&d) - direct).abs() < 1e-15);
    }

    fn alpha(values: Vec<f64>) -> AttentionMap {
        AttentionMap {
            rows: 1,
            cols: values.len(),
            values,
        }
    }

    #[test]
    fn supervised_loss_cases() {
        let eps = 1e-6;
        let a = alpha(vec![1.0 - eps, eps / 2.0, eps / 2.0]);
        let gt = GroundTruthAttention::new(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((supervised_attention_loss(&a, &gt).unwrap() - eps).abs() < 1e-9);

        let m = 16usize;
        let uniform = alpha(vec![1.0 / m as f64; m]);
        let mut t = vec![0.0; m];
        t[1] = 1.0;
        t[5] = 1.0;
        t[9] = 1.0;
        let gt = GroundTruthAttention::new(1, m, t).unwrap();
        let l = supervised_attention_loss(&uniform, &gt).unwrap();
        assert!((l - 3.0 * (m as f64).ln()).abs() < 1e-12);
        let ln = supervised_attention_loss_with(&uniform, &gt, true).unwrap();
        assert!((ln - (m as f64).ln()).abs() < 1e-12);

        let empty = GroundTruthAttention::new(1, m, vec![0.0; m]).unwrap();
        assert!(matches!(
            supervised_attention_loss(&uniform, &empty),
            Err(Error::EmptyGroundTruth)
        ));
        assert!(GroundTruthAttention::new(1, 2, vec![0.5, 1.0]).is_err());
        let zero = alpha(vec![0.0, 1.0]);
        let gt2 = GroundTruthAttention::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(supervised_attention_loss(&zero, &gt2).is_err());
    }

    #[test]
    fn combined_gate_and_weights() {
        let f_v = [0.1, 0.2, -0.3];
        let pos = [0.0, 0.5, 0.1];
        let neg = [1.0, -1.0, 0.4];
        let a = alpha(vec![0.6, 0.3, 0.1]);
        let d = triplet_distances(&f_v, &pos, &neg).unwrap();
        let l_u = distance_ratio_loss(&d);

        let w = LossWeights {
            unsupervised: 0.7,
            ..Default::default()
        };
        let none = combined_loss(&f_v, &pos, &neg, &a, None, &w).unwrap();
        assert_eq!(none.l_total.to_bits(), (0.7 * l_u).to_bits());
        assert_eq!((none.l_s, none.lambda), (0.0, 0.0));

        let gt = GroundTruthAttention::new(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let l_s = -(0.3f64).ln();
        let sup = LossWeights {
            unsupervised: 0.0,
            ..Default::default()
        };
        let only = combined_loss(&f_v, &pos, &neg, &a, Some(&gt), &sup).unwrap();
        assert!((only.l_total - l_s).abs() < 1e-15);

        let half = LossWeights {
            unsupervised: 0.5,
            supervised: 0.5,
            normalize_supervised: false,
        };
        let both = combined_loss(&f_v, &pos, &neg, &a, Some(&gt), &half).unwrap();
        assert!((both.l_total - (l_u + l_s) / 2.0).abs() < 1e-15);

        let empty = GroundTruthAttention::new(1, 3, vec![0.0; 3]).unwrap();
        assert!(combined_loss(&f_v, &pos, &neg, &a, Some(&empty), &half).is_err());
    }

    struct Quadratic;

    impl Objective for Quadratic {
        fn value(&self, p: &[f64]) -> Result<f64> {
            Ok(p.iter().map(|x| x * x).sum())
        }
        fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
            Ok(p.iter().map(|x| 2.0 * x).collect())
        }
    }

    #[test]
    fn quadratic_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let r = gradient_check(&Quadratic, &p, 40, &GradCheckOptions::default(), &mut rng).unwrap();
        assert_eq!(r.probes_used, 40);
        assert!(r.max_relative_error <= 1e-9, "{r:?}");
    }

    struct Wrong;

    impl Objective for Wrong {
        fn value(&self, p: &[f64]) -> Result<f64> {
            Ok(p.iter().map(|x| x * x).sum())
        }
        fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
            Ok(p.iter().map(|x| 3.0 * x).collect())
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let r = gradient_check_at(&Wrong, &[1.0, -2.0], &[0, 1], &GradCheckOptions::default()).unwrap();
        assert!((r.max_relative_error - 1.0 / 3.0).abs() < 1e-6);
    }

    struct Abs;

    impl Objective for Abs {
        fn value(&self, p: &[f64]) -> Result<f64> {
            Ok(p[0].abs())
        }
        fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![p[0].signum()])
        }
        fn region(&self, p: &[f64]) -> Result<Option<u64>> {
            Ok(Some((p[0] > 0.0) as u64))
        }
    }

    #[test]
    fn kink_probes_are_skipped_and_bad_eps_rejected() {
        let opts = GradCheckOptions::default();
        let r = gradient_check_at(&Abs, &[1e-7], &[0], &opts).unwrap();
        assert_eq!((r.probes_used, r.probes_skipped), (0, 1));
        let bad = GradCheckOptions { eps: 0.5, ..opts };
        assert!(gradient_check_at(&Abs, &[1.0], &[0], &bad).is_err());
    }

    #[test]
    fn supervised_score_grad_matches_differences() {
        let a = [0.3, -0.2, 0.9, 0.1];
        let gt = GroundTruthAttention::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let softmax = |a: &[f64]| {
            let e: Vec<f64> = a.iter().map(|x| x.exp()).collect();
            let s: f64 = e.iter().sum();
            AttentionMap {
                rows: 2,
                cols: 2,
                values: e.iter().map(|x| x / s).collect(),
            }
        };
        for normalized in [false, true] {
            let g = supervised_score_grad(&softmax(&a), &gt, normalized).unwrap();
            for i in 0..4 {
                let mut p = a;
                p[i] += 1e-6;
                let up = supervised_attention_loss_with(&softmax(&p), &gt, normalized).unwrap();
                p[i] -= 2e-6;
                let dn = supervised_attention_loss_with(&softmax(&p), &gt, normalized).unwrap();
                assert!((g[i] - (up - dn) / 2e-6).abs() < 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn loss_range_and_monotonicity(dp in 0.0f64..30.0, dn in 0.0f64..30.0, step in 1e-3f64..5.0) {
            let d = TripletDistances { d_pos: dp, d_neg: dn };
            let l = distance_ratio_loss(&d);
            prop_assert!((0.0..2.0).contains(&l));
            let further = TripletDistances { d_pos: dp + step, d_neg: dn };
            prop_assert!(distance_ratio_loss(&further) >= l);
            prop_assert!(distance_ratio_grad(&d).0 >= 0.0);
        }

        #[test]
        fn distance_ratio_grad_matches_differences(dp in 0.0f64..10.0, dn in 0.0f64..10.0) {
            let (gp, gn) = distance_ratio_grad(&TripletDistances { d_pos: dp, d_neg: dn });
            let f = |p: f64, n: f64| distance_ratio_loss(&TripletDistances { d_pos: p, d_neg: n });
            let e = 1e-6;
            prop_assert!((gp - (f(dp + e, dn) - f(dp - e, dn)) / (2.0 * e)).abs() < 1e-7);
            prop_assert!((gn - (f(dp, dn + e) - f(dp, dn - e)) / (2.0 * e)).abs() < 1e-7);
        }
    }
}
