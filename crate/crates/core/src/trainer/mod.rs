//! Triplet sampling, the optimization loop for every supervision regime,
//! checkpoints, and the synthetic corpus generator.

pub mod checkpoint;
pub mod manifest;
pub mod optim;
pub mod synthetic;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Mechanism;
use crate::audio::{extract_window, load_audio, resample, DEFAULT_SAMPLE_RATE, DEFAULT_WINDOW_SECONDS};
use crate::error::{Error, Result};
use crate::evaluation::{consensus_map, Annotation, DEFAULT_CONSENSUS};
use crate::model::{triplet_loss, triplet_loss_and_grad, TripletInput, TwoStreamConfig, TwoStreamParams};
use crate::objectives::{GroundTruthAttention, LossBreakdown, LossWeights};
use crate::raster::{load_raster, Raster};

pub use checkpoint::{Checkpoint, RngState, FORMAT_VERSION};
pub use manifest::{DatasetManifest, ManifestRecord};
pub use optim::{AdamConfig, AdamState};
pub use synthetic::{generate_orbit, generate_synthetic, GlyphTruth, OrbitSpec, SyntheticDataset, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub steps: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub model: TwoStreamConfig,
    pub window_s: f64,
    pub sample_rate: u32,
    /// Annotators that must agree before a pixel counts as a target.
    pub consensus_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 30,
            adam: AdamConfig::default(),
            steps: 1000,
            seed: 0,
            weights: LossWeights::default(),
            model: TwoStreamConfig::default(),
            window_s: DEFAULT_WINDOW_SECONDS,
            sample_rate: DEFAULT_SAMPLE_RATE,
            consensus_count: DEFAULT_CONSENSUS,
        }
    }
}

impl TrainConfig {
    /// Toy encoders sized for the synthetic corpus: 0.5 s windows at 4 kHz
    /// and 32x32 frames.
    pub fn toy(mechanism: Mechanism) -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            model: TwoStreamConfig::toy(mechanism),
            window_s: 0.5,
            sample_rate: 4000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.window_s > 0.0) || self.sample_rate == 0 {
            return Err(Error::Config("window length and sample rate must be positive".into()));
        }
        if self.consensus_count == 0 {
            return Err(Error::Config("consensus count must be positive".into()));
        }
        let w = &self.weights;
        if !(w.unsupervised >= 0.0 && w.supervised >= 0.0 && w.unsupervised.is_finite() && w.supervised.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {w:?}")));
        }
        self.adam.validate()?;
        self.model.validate()
    }
}

/// Decoded training data: one frame, one positive window, an optional grid
/// target and an optional class label per record.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub ids: Vec<String>,
    pub frames: Vec<Raster>,
    pub windows: Vec<Vec<f64>>,
    pub targets: Vec<Option<GroundTruthAttention>>,
    pub labels: Vec<Option<String>>,
}

impl TrainingSet {
    /// Decodes every record once: frames, windows around `center_time_s`
    /// at the configured rate, and grid targets from annotations.
    pub fn load(manifest: &DatasetManifest, config: &TrainConfig) -> Result<Self> {
        let n = manifest.len();
        let mut set = Self {
            ids: Vec::with_capacity(n),
            frames: Vec::with_capacity(n),
            windows: Vec::with_capacity(n),
            targets: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
        };
        let factor = config.model.visual.downsample_factor();
        let min_len = config.model.sound.min_input_len();
        for r in &manifest.records {
            let frame = load_raster(manifest.resolve(&r.frame_path))?;
            let mut clip = load_audio(manifest.resolve(&r.audio_path))?;
            if clip.sample_rate() != config.sample_rate {
                clip = resample(&clip, config.sample_rate)?;
            }
            let window = extract_window(&clip, r.center_time_s, config.window_s)?;
            if window.len() < min_len {
                return Err(Error::InputTooSmall(format!(
                    "{}-sample window for record {}; the sound encoder needs {min_len}",
                    window.len(),
                    r.id
                )));
            }
            let target = match &r.annotation_ref {
                Some(p) => {
                    let ann = Annotation::load(manifest.resolve(p))?;
                    let subjects = ann.object_subjects();
                    if subjects.is_empty() {
                        // every annotator heard ambient sound: nothing to localize
                        None
                    } else {
                        let g = consensus_map(&subjects, frame.height, frame.width, config.consensus_count)?;
                        let (rows, cols) = config.model.visual.grid_dims(frame.height, frame.width);
                        Some(g.grid_attention(rows, cols, factor)?)
                    }
                }
                None => None,
            };
            set.ids.push(r.id.clone());
            set.frames.push(frame);
            set.windows.push(window.samples);
            set.targets.push(target);
            set.labels.push(r.label.clone());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn input(&self, index: usize, negative: usize) -> TripletInput<'_> {
        TripletInput {
            frame: &self.frames[index],
            positive: &self.windows[index],
            negative: &self.windows[negative],
            gt: self.targets[index].as_ref(),
        }
    }
}

/// Picks the negative-audio record for `index`: uniform over the other
/// records, excluding those that share its label when labels are known.
pub fn sample_negative(labels: &[Option<String>], index: usize, rng: &mut impl Rng) -> Result<usize> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::InvalidArgument("triplets need at least two records".into()));
    }
    if index >= n {
        return Err(Error::InvalidArgument(format!("record {index} of {n}")));
    }
    let own = labels[index].as_ref();
    let differs = |j: usize| match (own, labels[j].as_ref()) {
        (Some(a), Some(b)) => a != b,
        _ => true,
    };
    let candidates: Vec<usize> = (0..n).filter(|&j| j != index && differs(j)).collect();
    if candidates.is_empty() {
        // every other record shares the label; fall back to any other one
        let k = rng.gen_range(0..n - 1);
        return Ok(if k >= index { k + 1 } else { k });
    }
    Ok(candidates[rng.gen_range(0..candidates.len())])
}

/// The frame and positive window of record `index` and the window of a
/// sampled negative record.
pub fn sample_triplet<'a>(
    set: &'a TrainingSet,
    index: usize,
    rng: &mut impl Rng,
) -> Result<(&'a Raster, &'a [f64], &'a [f64])> {
    let j = sample_negative(&set.labels, index, rng)?;
    Ok((&set.frames[index], &set.windows[index], &set.windows[j]))
}

/// Batch means of one optimizer step, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub l_u: f64,
    pub l_s: f64,
    pub l_total: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub params: TwoStreamParams,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    /// Seeds the generator, draws the initial weights, zeroes the moments.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = TwoStreamParams::init(&config.model, &mut rng)?;
        let adam = AdamState::new(params.num_params());
        Ok(Self {
            config: config.clone(),
            params,
            adam,
            rng,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt.config()?;
        config.validate()?;
        Ok(Self {
            config,
            params: ckpt.params.clone(),
            adam: ckpt.adam.clone(),
            rng: ckpt.rng.restore(),
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let echo = TrainConfig {
            steps: self.step,
            ..self.config.clone()
        };
        Ok(Checkpoint {
            version: FORMAT_VERSION,
            config_echo: serde_json::to_string_pretty(&echo)?,
            seed: self.config.seed,
            step: self.step,
            rng: RngState::capture(&self.rng),
            params: self.params.clone(),
            adam: self.adam.clone(),
        })
    }

    /// One minibatch: records drawn with replacement, gradients summed in
    /// draw order and averaged, then one optimizer update.
    pub fn step(&mut self, set: &TrainingSet) -> Result<StepLog> {
        let n = set.len();
        let batch = self.config.batch_size;
        let mut grad = self.params.zeros_like();
        let (mut l_u, mut l_s, mut l_total) = (0.0, 0.0, 0.0);
        for _ in 0..batch {
            let i = self.rng.gen_range(0..n);
            let j = sample_negative(&set.labels, i, &mut self.rng)?;
            let b = triplet_loss_and_grad(&self.params, &set.input(i, j), &self.config.weights, &mut grad)?;
            l_u += b.l_u;
            l_s += b.l_s;
            l_total += b.l_total;
        }
        let scale = 1.0 / batch as f64;
        let log = StepLog {
            step: self.step,
            l_u: l_u * scale,
            l_s: l_s * scale,
            l_total: l_total * scale,
        };
        if !log.l_total.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss: log.l_total,
            });
        }
        for t in grad.tensors_mut() {
            for g in t.iter_mut() {
                *g *= scale;
            }
        }
        self.adam.step(&mut self.params, &grad, self.config.learning_rate, &self.config.adam);
        self.step += 1;
        Ok(log)
    }

    pub fn run(&mut self, set: &TrainingSet, steps: u64) -> Result<Vec<StepLog>> {
        (0..steps).map(|_| self.step(set)).collect()
    }
}

/// Trains from a fresh initialization for `config.steps` steps.
pub fn train(manifest: &DatasetManifest, config: &TrainConfig) -> Result<(Checkpoint, Vec<StepLog>)> {
    let mut trainer = Trainer::new(config)?;
    if config.steps == 0 {
        return Ok((trainer.checkpoint()?, Vec::new()));
    }
    let set = TrainingSet::load(manifest, config)?;
    let logs = trainer.run(&set, config.steps)?;
    Ok((trainer.checkpoint()?, logs))
}

/// CSV with columns `step,L_U,L_S,L_total`.
pub fn write_loss_csv(path: impl AsRef<Path>, logs: &[StepLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,L_U,L_S,L_total")?;
    for l in logs {
        writeln!(f, "{},{},{},{}", l.step, l.l_u, l.l_s, l.l_total)?;
    }
    f.flush()?;
    Ok(())
}

/// Fixed evaluation triplets: every record once, negatives drawn from a
/// generator seeded with `seed`.
pub fn held_out_pairs(set: &TrainingSet, seed: u64) -> Result<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..set.len())
        .map(|i| Ok((i, sample_negative(&set.labels, i, &mut rng)?)))
        .collect()
}

/// Mean loss terms over the given triplets, without gradients.
pub fn mean_loss(
    params: &TwoStreamParams,
    set: &TrainingSet,
    pairs: &[(usize, usize)],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown {
        l_u: 0.0,
        l_s: 0.0,
        lambda: 0.0,
        l_total: 0.0,
    };
    for &(i, j) in pairs {
        let b = triplet_loss(params, &set.input(i, j), weights)?;
        acc.l_u += b.l_u;
        acc.l_s += b.l_s;
        acc.lambda += b.lambda;
        acc.l_total += b.l_total;
    }
    let k = pairs.len().max(1) as f64;
    Ok(LossBreakdown {
        l_u: acc.l_u / k,
        l_s: acc.l_s / k,
        lambda: acc.lambda / k,
        l_total: acc.l_total / k,
    })
}
