//! The two-stream model: sound encoder, visual encoder and the attention
//! module joined into one differentiable triplet objective.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    self, AttentionMap, ContextVector, Mechanism, ScoreMap,
};
use crate::error::{Error, Result};
use crate::objectives::{
    self, distance_ratio_grad, distance_ratio_loss, GroundTruthAttention, LossBreakdown,
    LossWeights, Objective, TripletDistances,
};
use crate::raster::Raster;
use crate::sound_net::{self, SoundContext, SoundEmbedding, SoundNetConfig, SoundNetParams};
use crate::visual_net::{self, FeatureGrid, VisualConfig, VisualEmbedding, VisualNetParams};

/// Accumulates the activation pattern of a forward pass (rectifier signs,
/// pooling winners) into a hash identifying the piecewise-linear region.
pub struct RegionHasher(DefaultHasher);

impl RegionHasher {
    pub fn new() -> Self {
        Self(DefaultHasher::new())
    }

    pub fn mask(&mut self, values: &[f64]) {
        let mut word = 0u64;
        for (i, v) in values.iter().enumerate() {
            if *v > 0.0 {
                word |= 1 << (i % 64);
            }
            if i % 64 == 63 {
                self.0.write_u64(word);
                word = 0;
            }
        }
        self.0.write_u64(word);
        self.0.write_usize(values.len());
    }

    pub fn indices(&mut self, idx: &[usize]) {
        for &i in idx {
            self.0.write_usize(i);
        }
        self.0.write_usize(idx.len());
    }

    pub fn finish(&self) -> u64 {
        self.0.finish()
    }
}

impl Default for RegionHasher {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStreamConfig {
    pub sound: SoundNetConfig,
    pub visual: VisualConfig,
    pub mechanism: Mechanism,
    /// Scale `f_v` and `f_s` to unit length before the triplet distances.
    #[serde(default)]
    pub normalize_embeddings: bool,
}

impl Default for TwoStreamConfig {
    fn default() -> Self {
        Self {
            sound: SoundNetConfig::soundnet(),
            visual: VisualConfig::vgg16(),
            mechanism: Mechanism::Cos,
            normalize_embeddings: false,
        }
    }
}

impl TwoStreamConfig {
    pub fn toy(mechanism: Mechanism) -> Self {
        Self {
            sound: SoundNetConfig::toy(),
            visual: VisualConfig::toy(),
            mechanism,
            normalize_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sound.validate()?;
        self.visual.validate()?;
        if self.visual.grid_channels() != self.sound.context_dim {
            return Err(Error::Config(format!(
                "visual grid has {} channels but the sound context has {}",
                self.visual.grid_channels(),
                self.sound.context_dim
            )));
        }
        if self.visual.embedding_dim != self.sound.final_conv_channels() {
            return Err(Error::Config(format!(
                "visual embedding has {} entries but the sound embedding has {}",
                self.visual.embedding_dim,
                self.sound.final_conv_channels()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStreamParams {
    pub config: TwoStreamConfig,
    pub sound: SoundNetParams,
    pub visual: VisualNetParams,
}

impl TwoStreamParams {
    pub fn init(config: &TwoStreamConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let sound = SoundNetParams::init(&config.sound, rng)?;
        let visual = VisualNetParams::init(&config.visual, rng)?;
        Ok(Self {
            config: config.clone(),
            sound,
            visual,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            sound: self.sound.zeros_like(),
            visual: self.visual.zeros_like(),
        }
    }

    /// Named parameter tensors in their fixed serialization order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut t = self.sound.tensors();
        t.extend(self.visual.tensors());
        t
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut t = self.sound.tensors_mut();
        t.extend(self.visual.tensors_mut());
        t
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {n} parameters",
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let len = t.len();
            t.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter tensor {name}")));
            }
        }
        Ok(())
    }
}

/// Everything the model infers for one frame and its audio window.
#[derive(Debug, Clone)]
pub struct Localization {
    pub grid: FeatureGrid,
    pub scores: ScoreMap,
    pub attention: AttentionMap,
    pub context: ContextVector,
    pub f_v: VisualEmbedding,
    pub f_s: SoundEmbedding,
    pub h: SoundContext,
}

/// Runs both encoders and the attention module.
pub fn localize(params: &TwoStreamParams, frame: &Raster, waveform: &[f64]) -> Result<Localization> {
    let sound = sound_net::forward_cached(waveform, &params.sound)?;
    let visual = visual_net::forward_cached(frame, &params.visual)?;
    localize_with(params, visual.grid, sound.f_s, sound.h)
}

/// Attention and embedding for a precomputed grid and sound encoding.
pub fn localize_with(
    params: &TwoStreamParams,
    grid: FeatureGrid,
    f_s: Vec<f64>,
    h: Vec<f64>,
) -> Result<Localization> {
    let scores = attention::attention_scores(&grid, &h, params.config.mechanism)?;
    let alpha = attention::softmax_normalize(&scores);
    let context = attention::context_vector(&grid, &alpha)?;
    let f_v = visual_net::embed_context(&context.0, &params.visual)?;
    Ok(Localization {
        grid,
        scores,
        attention: alpha,
        context,
        f_v,
        f_s: SoundEmbedding(f_s),
        h: SoundContext(h),
    })
}

/// Encodes a waveform into `(f_s, h)`.
pub fn encode_sound(params: &TwoStreamParams, waveform: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = sound_net::forward_cached(waveform, &params.sound)?;
    Ok((c.f_s, c.h))
}

/// One training example: a frame, its own audio, audio from another record,
/// and an optional target attention.
#[derive(Debug, Clone, Copy)]
pub struct TripletInput<'a> {
    pub frame: &'a Raster,
    pub positive: &'a [f64],
    pub negative: &'a [f64],
    pub gt: Option<&'a GroundTruthAttention>,
}

fn unit(v: &[f64]) -> (Vec<f64>, f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        (v.iter().map(|x| x / n).collect(), n)
    } else {
        (v.to_vec(), 0.0)
    }
}

/// Back-propagates through `u = x / |x|`.
fn unit_backward(u: &[f64], n: f64, du: &[f64]) -> Vec<f64> {
    if n == 0.0 {
        return du.to_vec();
    }
    let dot: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
    u.iter().zip(du).map(|(a, g)| (g - dot * a) / n).collect()
}

struct TripletForward {
    pos: sound_net::SoundCache,
    neg: sound_net::SoundCache,
    visual: visual_net::VisualCache,
    scores: ScoreMap,
    score_cache: attention::ScoreCache,
    alpha: AttentionMap,
    embed: visual_net::EmbedCache,
    breakdown: LossBreakdown,
}

fn triplet_forward(
    params: &TwoStreamParams,
    input: &TripletInput,
    weights: &LossWeights,
) -> Result<TripletForward> {
    let pos = sound_net::forward_cached(input.positive, &params.sound)?;
    let neg = sound_net::forward_cached(input.negative, &params.sound)?;
    let visual = visual_net::forward_cached(input.frame, &params.visual)?;
    let (scores, score_cache) =
        attention::scores_cached(&visual.grid, &pos.h, params.config.mechanism)?;
    let alpha = attention::softmax_normalize(&scores);
    let z = attention::context_vector(&visual.grid, &alpha)?;
    let embed = visual_net::embed_cached(&z.0, &params.visual);
    let (fv, fp, fn_) = if params.config.normalize_embeddings {
        (unit(&embed.f_v).0, unit(&pos.f_s).0, unit(&neg.f_s).0)
    } else {
        (embed.f_v.clone(), pos.f_s.clone(), neg.f_s.clone())
    };
    let d = objectives::triplet_distances(&fv, &fp, &fn_)?;
    let gt = if weights.supervised == 0.0 { None } else { input.gt };
    let mut breakdown = objectives::combine(distance_ratio_loss(&d), &alpha, gt, weights)?;
    if input.gt.is_some() && gt.is_none() {
        breakdown.lambda = 1.0;
    }
    Ok(TripletForward {
        pos,
        neg,
        visual,
        scores,
        score_cache,
        alpha,
        embed,
        breakdown,
    })
}

/// Loss terms of one triplet.
pub fn triplet_loss(
    params: &TwoStreamParams,
    input: &TripletInput,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    Ok(triplet_forward(params, input, weights)?.breakdown)
}

/// Loss terms of one triplet; adds the parameter gradient of `L_total` into
/// `grad`.
pub fn triplet_loss_and_grad(
    params: &TwoStreamParams,
    input: &TripletInput,
    weights: &LossWeights,
    grad: &mut TwoStreamParams,
) -> Result<LossBreakdown> {
    let fw = triplet_forward(params, input, weights)?;
    let grid = &fw.visual.grid;
    let normalize = params.config.normalize_embeddings;

    let (fv, nv) = if normalize { unit(&fw.embed.f_v) } else { (fw.embed.f_v.clone(), 1.0) };
    let (fp, np) = if normalize { unit(&fw.pos.f_s) } else { (fw.pos.f_s.clone(), 1.0) };
    let (fq, nq) = if normalize { unit(&fw.neg.f_s) } else { (fw.neg.f_s.clone(), 1.0) };
    let d = TripletDistances {
        d_pos: fw.breakdown_distance(&fv, &fp),
        d_neg: fw.breakdown_distance(&fv, &fq),
    };
    let (gp, gn) = distance_ratio_grad(&d);
    let (gp, gn) = (gp * weights.unsupervised, gn * weights.unsupervised);
    let dim = fv.len();
    let mut dfv = vec![0.0; dim];
    let mut dfp = vec![0.0; dim];
    let mut dfq = vec![0.0; dim];
    if d.d_pos > 0.0 {
        for k in 0..dim {
            let u = (fv[k] - fp[k]) / d.d_pos;
            dfv[k] += gp * u;
            dfp[k] -= gp * u;
        }
    }
    if d.d_neg > 0.0 {
        for k in 0..dim {
            let u = (fv[k] - fq[k]) / d.d_neg;
            dfv[k] += gn * u;
            dfq[k] -= gn * u;
        }
    }
    if normalize {
        dfv = unit_backward(&fv, nv, &dfv);
        dfp = unit_backward(&fp, np, &dfp);
        dfq = unit_backward(&fq, nq, &dfq);
    }

    let dz = visual_net::embed_backward(&fw.embed, &params.visual, &dfv, &mut grad.visual);
    let m = grid.cells();
    let dd = grid.dim;
    let mut d_grid = vec![0.0; grid.data.len()];
    let mut d_alpha = vec![0.0; m];
    for i in 0..m {
        let v = grid.cell(i);
        d_alpha[i] = v.iter().zip(&dz).map(|(a, b)| a * b).sum();
        let a = fw.alpha.values[i];
        for (g, z) in d_grid[i * dd..(i + 1) * dd].iter_mut().zip(&dz) {
            *g += a * z;
        }
    }
    let mut d_scores = attention::softmax_backward(&fw.alpha.values, &d_alpha);
    if weights.supervised != 0.0 {
        if let Some(gt) = input.gt {
            let g = objectives::supervised_score_grad(&fw.alpha, gt, weights.normalize_supervised)?;
            for (ds, gs) in d_scores.iter_mut().zip(g) {
                *ds += weights.supervised * gs;
            }
        }
    }
    let (d_grid_scores, dh) = attention::scores_backward(
        grid,
        &fw.pos.h,
        fw.scores.mechanism,
        &fw.score_cache,
        &d_scores,
    );
    for (a, b) in d_grid.iter_mut().zip(&d_grid_scores) {
        *a += b;
    }
    visual_net::backward_grid(&fw.visual, &params.visual, &d_grid, &mut grad.visual);
    sound_net::backward(&fw.pos, &params.sound, &dfp, &dh, &mut grad.sound);
    let zero_h = vec![0.0; dh.len()];
    sound_net::backward(&fw.neg, &params.sound, &dfq, &zero_h, &mut grad.sound);
    Ok(fw.breakdown)
}

impl TripletForward {
    fn breakdown_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    fn region(&self) -> u64 {
        let mut h = RegionHasher::new();
        self.pos.fingerprint(&mut h);
        self.neg.fingerprint(&mut h);
        self.visual.fingerprint(&mut h);
        if self.scores.mechanism == Mechanism::Relu {
            h.mask(&self.score_cache.cosines);
        }
        self.embed.fingerprint(&mut h);
        h.finish()
    }
}

/// Which scalar a [`TripletObjective`] exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Unsupervised,
    Supervised,
    Total,
}

/// A triplet loss viewed as a function of the flattened model parameters.
pub struct TripletObjective<'a> {
    pub template: &'a TwoStreamParams,
    pub input: TripletInput<'a>,
    pub weights: LossWeights,
}

impl<'a> TripletObjective<'a> {
    /// Objective for one of the loss terms in isolation.
    pub fn for_term(
        template: &'a TwoStreamParams,
        input: TripletInput<'a>,
        term: LossTerm,
        normalize_supervised: bool,
    ) -> Self {
        let weights = match term {
            LossTerm::Unsupervised => LossWeights {
                unsupervised: 1.0,
                supervised: 0.0,
                normalize_supervised,
            },
            LossTerm::Supervised => LossWeights {
                unsupervised: 0.0,
                supervised: 1.0,
                normalize_supervised,
            },
            LossTerm::Total => LossWeights {
                normalize_supervised,
                ..LossWeights::default()
            },
        };
        Self {
            template,
            input,
            weights,
        }
    }

    fn with_params(&self, flat: &[f64]) -> Result<TwoStreamParams> {
        let mut p = self.template.clone();
        p.set_flat(flat)?;
        Ok(p)
    }
}

impl Objective for TripletObjective<'_> {
    fn value(&self, flat: &[f64]) -> Result<f64> {
        let p = self.with_params(flat)?;
        Ok(triplet_loss(&p, &self.input, &self.weights)?.l_total)
    }

    fn gradient(&self, flat: &[f64]) -> Result<Vec<f64>> {
        let p = self.with_params(flat)?;
        let mut g = p.zeros_like();
        triplet_loss_and_grad(&p, &self.input, &self.weights, &mut g)?;
        Ok(g.to_flat())
    }

    fn region(&self, flat: &[f64]) -> Result<Option<u64>> {
        let p = self.with_params(flat)?;
        Ok(Some(triplet_forward(&p, &self.input, &self.weights)?.region()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{gradient_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut impl Rng, h: usize, w: usize) -> Raster {
        let data = (0..h * w * 3).map(|_| rng.gen::<f64>()).collect();
        Raster::new(h, w, 3, data).unwrap()
    }

    fn random_wave(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn default_config_is_consistent_and_toy_is_small() {
        TwoStreamConfig::default().validate().unwrap();
        let toy = TwoStreamConfig::toy(Mechanism::Relu);
        toy.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = TwoStreamParams::init(&toy, &mut rng).unwrap();
        assert!(p.num_params() < 100_000);
        let mut bad = toy.clone();
        bad.sound.context_dim += 1;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = TwoStreamParams::init(&TwoStreamConfig::toy(Mechanism::Cos), &mut rng).unwrap();
        let flat = p.to_flat();
        let mut q = p.zeros_like();
        q.set_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn localize_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = TwoStreamParams::init(&TwoStreamConfig::toy(Mechanism::Cos), &mut rng).unwrap();
        let frame = random_frame(&mut rng, 32, 32);
        let wave = random_wave(&mut rng, 2000);
        let loc = localize(&p, &frame, &wave).unwrap();
        assert_eq!((loc.grid.rows, loc.grid.cols), (8, 8));
        assert_eq!(loc.attention.values.len(), 64);
        assert_eq!(loc.f_v.0.len(), loc.f_s.0.len());
        assert_eq!(loc.h.0.len(), p.config.sound.context_dim);
    }

    #[test]
    fn triplet_gradients_match_differences() {
        for (seed, mech, normalize) in [
            (3, Mechanism::Cos, false),
            (4, Mechanism::Relu, false),
            (5, Mechanism::Cos, true),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cfg = TwoStreamConfig::toy(mech);
            cfg.normalize_embeddings = normalize;
            let p = TwoStreamParams::init(&cfg, &mut rng).unwrap();
            let frame = random_frame(&mut rng, 16, 16);
            let pos = random_wave(&mut rng, 600);
            let neg = random_wave(&mut rng, 600);
            let mut t = vec![0.0; 16];
            t[5] = 1.0;
            t[6] = 1.0;
            let gt = GroundTruthAttention::new(4, 4, t).unwrap();
            let input = TripletInput {
                frame: &frame,
                positive: &pos,
                negative: &neg,
                gt: Some(&gt),
            };
            for term in [LossTerm::Unsupervised, LossTerm::Supervised, LossTerm::Total] {
                let obj = TripletObjective::for_term(&p, input, term, false);
                let r = gradient_check(&obj, &p.to_flat(), 30, &GradCheckOptions::default(), &mut rng)
                    .unwrap();
                assert!(r.probes_used > 0);
                assert!(r.max_relative_error <= 1e-4, "{mech:?} {term:?} {r:?}");
            }
        }
    }

    #[test]
    fn zero_supervised_weight_ignores_annotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = TwoStreamParams::init(&TwoStreamConfig::toy(Mechanism::Cos), &mut rng).unwrap();
        let frame = random_frame(&mut rng, 16, 16);
        let pos = random_wave(&mut rng, 600);
        let neg = random_wave(&mut rng, 600);
        let gt = GroundTruthAttention::new(4, 4, vec![1.0; 16]).unwrap();
        let w = LossWeights {
            supervised: 0.0,
            ..Default::default()
        };
        let mut g1 = p.zeros_like();
        let mut g2 = p.zeros_like();
        let with = TripletInput {
            frame: &frame,
            positive: &pos,
            negative: &neg,
            gt: Some(&gt),
        };
        let without = TripletInput { gt: None, ..with };
        let a = triplet_loss_and_grad(&p, &with, &w, &mut g1).unwrap();
        let b = triplet_loss_and_grad(&p, &without, &LossWeights::default(), &mut g2).unwrap();
        assert_eq!(a.l_total.to_bits(), b.l_total.to_bits());
        assert_eq!(g1, g2);
    }
}
