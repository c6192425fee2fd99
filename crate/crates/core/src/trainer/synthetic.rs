//! Synthetic audio-visual corpus: each class pairs a tone signature with a
//! colored glyph drawn at a random position over a noise background.
//!
//! With a confound class, every frame of that class also carries a large
//! striped band ("road") along the bottom. The band predicts the class as
//! well as the glyph does, which is what lets unsupervised training latch
//! onto it.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioClip};
use crate::error::{Error, Result};
use crate::evaluation::{Annotation, BoundingBox, SubjectAnnotation, Tag};
use crate::pano::lonlat_to_pixel;
use crate::raster::Raster;
use crate::trainer::manifest::{DatasetManifest, ManifestRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlyphShape {
    Square,
    Disk,
    Cross,
    Triangle,
}

impl GlyphShape {
    /// Whether offset `(dy, dx)` inside a `size x size` box is inked.
    pub fn covers(self, dy: usize, dx: usize, size: usize) -> bool {
        let c = (size as f64 - 1.0) / 2.0;
        let (y, x) = (dy as f64, dx as f64);
        match self {
            GlyphShape::Square => true,
            GlyphShape::Disk => (y - c).powi(2) + (x - c).powi(2) <= (size as f64 / 2.0).powi(2),
            GlyphShape::Cross => {
                let half = (size as f64 / 4.0).max(0.5);
                (x - c).abs() <= half || (y - c).abs() <= half
            }
            GlyphShape::Triangle => (x - c).abs() <= (y + 1.0) / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Tone frequencies in Hz.
    pub frequencies: Vec<f64>,
    /// Amplitude of the additive uniform noise.
    pub noise: f64,
    pub shape: GlyphShape,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: Vec<ClassSpec>,
    /// Square canvas side in pixels.
    pub canvas: usize,
    pub glyph_size: usize,
    /// Half-width of the per-pixel background noise around mid gray.
    pub background_noise: f64,
    pub sample_rate: u32,
    pub clip_s: f64,
    /// Class index whose frames always carry the striped band.
    #[serde(default)]
    pub confound_class: Option<usize>,
    pub train: usize,
    pub test: usize,
    /// How many training records carry an annotation reference; `None`
    /// annotates all of them. Test records are always annotated.
    #[serde(default)]
    pub annotated_train: Option<usize>,
    /// Extra training records pairing a silent glyph with broadband noise
    /// of random level, labeled `ambient` and annotated as such.
    #[serde(default)]
    pub ambient_train: usize,
    /// Peak amplitude of ambient noise; each clip draws its level from
    /// `[0, ambient_level]`.
    #[serde(default = "default_ambient_level")]
    pub ambient_level: f64,
    /// Random solid rectangles painted over the noise before any glyph,
    /// so glyph cells are not the only flat colored regions.
    #[serde(default)]
    pub background_patches: usize,
    /// Silent glyphs of other classes drawn in every frame, never
    /// overlapping the sounding one.
    #[serde(default)]
    pub distractors: usize,
    /// Maximum per-edge jitter of the simulated annotators, in pixels.
    pub jitter: usize,
    pub seed: u64,
}

fn default_ambient_level() -> f64 {
    0.5
}

pub const AMBIENT_LABEL: &str = "ambient";

const PALETTE: [(GlyphShape, [f64; 3], [f64; 2]); 6] = [
    (GlyphShape::Square, [1.0, 0.0, 0.0], [220.0, 550.0]),
    (GlyphShape::Disk, [0.0, 1.0, 0.0], [330.0, 770.0]),
    (GlyphShape::Cross, [0.0, 0.0, 1.0], [440.0, 990.0]),
    (GlyphShape::Triangle, [1.0, 1.0, 0.0], [660.0, 1210.0]),
    (GlyphShape::Disk, [1.0, 0.0, 1.0], [275.0, 1430.0]),
    (GlyphShape::Square, [0.0, 1.0, 1.0], [385.0, 1650.0]),
];

impl SyntheticSpec {
    /// Small 32x32 preset with up to six built-in classes.
    pub fn toy(classes: usize, train: usize, test: usize, seed: u64) -> Self {
        let classes = (0..classes.min(PALETTE.len()))
            .map(|k| {
                let (shape, color, f) = PALETTE[k];
                ClassSpec {
                    name: format!("class{k}"),
                    frequencies: f.to_vec(),
                    noise: 0.05,
                    shape,
                    color,
                }
            })
            .collect();
        Self {
            classes,
            canvas: 32,
            glyph_size: 8,
            background_noise: 0.25,
            sample_rate: 4000,
            clip_s: 1.0,
            confound_class: None,
            train,
            test,
            annotated_train: None,
            ambient_train: 0,
            ambient_level: default_ambient_level(),
            background_patches: 20,
            distractors: 0,
            jitter: 1,
            seed,
        }
    }

    /// Rows `[canvas - band, canvas)` hold the confound band.
    pub fn band_rows(&self) -> usize {
        self.canvas * 3 / 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one class".into()));
        }
        for (i, a) in self.classes.iter().enumerate() {
            if a.frequencies.is_empty() || a.frequencies.iter().any(|f| !(*f > 0.0)) {
                return Err(Error::Config(format!("class {} has invalid frequencies", a.name)));
            }
            for b in &self.classes[i + 1..] {
                if a.frequencies == b.frequencies {
                    return Err(Error::Config(format!(
                        "classes {} and {} share a tone signature",
                        a.name, b.name
                    )));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.ambient_level) {
            return Err(Error::Config(format!("ambient level {} outside [0, 1]", self.ambient_level)));
        }
        if self.sample_rate == 0 || !(self.clip_s > 0.0) {
            return Err(Error::Config("sample rate and clip length must be positive".into()));
        }
        if let Some(c) = self.confound_class {
            if c >= self.classes.len() {
                return Err(Error::Config(format!("confound class {c} does not exist")));
            }
        }
        let room = if self.confound_class.is_some() {
            self.canvas.saturating_sub(self.band_rows())
        } else {
            self.canvas
        };
        if self.distractors >= self.classes.len() {
            return Err(Error::Config(format!(
                "{} distractors need more than {} classes",
                self.distractors,
                self.classes.len()
            )));
        }
        if self.glyph_size == 0 || self.glyph_size > room {
            return Err(Error::InvalidArgument(format!(
                "a {}-pixel glyph does not fit a {}-pixel canvas",
                self.glyph_size, room
            )));
        }
        Ok(())
    }
}

/// Where the glyph of one record was drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphTruth {
    pub id: String,
    pub class: usize,
    pub label: String,
    /// Top-left corner and side of the glyph box, in pixels.
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub confounded: bool,
    /// The glyph is silent and the audio is ambient noise.
    #[serde(default)]
    pub ambient: bool,
}

impl GlyphTruth {
    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox {
            x: self.col as f64,
            y: self.row as f64,
            w: self.size as f64,
            h: self.size as f64,
        }
    }

    /// Grid cells (row-major) whose pixel footprint meets the glyph box.
    pub fn grid_mask(&self, rows: usize, cols: usize, factor: usize) -> Vec<bool> {
        let (r0, r1) = (self.row / factor, (self.row + self.size - 1) / factor);
        let (c0, c1) = (self.col / factor, (self.col + self.size - 1) / factor);
        let mut m = vec![false; rows * cols];
        for r in r0..=r1.min(rows - 1) {
            for c in c0..=c1.min(cols - 1) {
                m[r * cols + c] = true;
            }
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub root: PathBuf,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub train_truth: Vec<GlyphTruth>,
    pub test_truth: Vec<GlyphTruth>,
}

/// Tone mixture with random phases plus uniform noise.
pub fn class_waveform(class: &ClassSpec, sample_rate: u32, len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let amp = 0.8 / class.frequencies.len() as f64;
    let phases: Vec<f64> = class.frequencies.iter().map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let rate = sample_rate as f64;
    (0..len)
        .map(|n| {
            let t = n as f64 / rate;
            let tone: f64 = class
                .frequencies
                .iter()
                .zip(&phases)
                .map(|(f, p)| amp * (2.0 * PI * f * t + p).sin())
                .sum();
            let noise = if class.noise > 0.0 {
                rng.gen_range(-class.noise..class.noise)
            } else {
                0.0
            };
            (tone + noise).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Uniform noise in `[-level, level]`.
pub fn ambient_waveform(level: f64, len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len)
        .map(|_| if level > 0.0 { rng.gen_range(-level..=level) } else { 0.0 })
        .collect()
}

/// Mid-gray canvas with independent uniform noise on every channel.
pub fn noise_canvas(height: usize, width: usize, amplitude: f64, rng: &mut impl Rng) -> Raster {
    let data = (0..height * width * 3)
        .map(|_| {
            if amplitude > 0.0 {
                0.5 + rng.gen_range(-amplitude..amplitude)
            } else {
                0.5
            }
        })
        .collect();
    Raster {
        height,
        width,
        channels: 3,
        data,
    }
}

/// Paints `count` axis-aligned rectangles with sides in `[size / 2,
/// 3 * size / 2]` and uniformly random colors.
pub fn draw_patches(raster: &mut Raster, count: usize, size: usize, rng: &mut impl Rng) {
    let (lo, hi) = ((size / 2).max(1), (3 * size / 2).max(1));
    for _ in 0..count {
        let h = rng.gen_range(lo..=hi).min(raster.height);
        let w = rng.gen_range(lo..=hi).min(raster.width);
        let r0 = rng.gen_range(0..=raster.height - h);
        let c0 = rng.gen_range(0..=raster.width - w);
        let color = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                raster.set_rgb(r, c, color);
            }
        }
    }
}

/// Inks a glyph with top-left corner `(row, col)`; columns wrap around.
pub fn draw_glyph(raster: &mut Raster, class: &ClassSpec, row: usize, col: usize, size: usize) {
    for dy in 0..size {
        for dx in 0..size {
            if class.shape.covers(dy, dx, size) && row + dy < raster.height {
                raster.set_rgb(row + dy, (col + dx) % raster.width, class.color);
            }
        }
    }
}

/// Horizontal dark/light stripes, two rows each, over the bottom rows.
pub fn draw_band(raster: &mut Raster, rows: usize) {
    for r in raster.height - rows..raster.height {
        let v = if (r / 2) % 2 == 0 { 0.1 } else { 0.9 };
        for c in 0..raster.width {
            raster.set_rgb(r, c, [v, v, v]);
        }
    }
}

fn overlaps(a: (usize, usize), b: (usize, usize), size: usize) -> bool {
    a.0 < b.0 + size && b.0 < a.0 + size && a.1 < b.1 + size && b.1 < a.1 + size
}

/// Class and top-left corner of each distractor: distinct classes other
/// than `class`, positions by rejection so no two glyphs overlap.
fn place_distractors(
    spec: &SyntheticSpec,
    class: usize,
    anchor: (usize, usize),
    max_row: usize,
    max_col: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize, usize)>> {
    if spec.distractors == 0 {
        return Ok(Vec::new());
    }
    let mut others: Vec<usize> = (0..spec.classes.len()).filter(|&k| k != class).collect();
    let mut placed = vec![anchor];
    let mut out = Vec::with_capacity(spec.distractors);
    for _ in 0..spec.distractors {
        let k = others.swap_remove(rng.gen_range(0..others.len()));
        let mut tries = 0;
        let pos = loop {
            let p = (rng.gen_range(0..=max_row), rng.gen_range(0..=max_col));
            if !placed.iter().any(|&q| overlaps(p, q, spec.glyph_size)) {
                break p;
            }
            tries += 1;
            if tries > 10_000 {
                return Err(Error::InvalidArgument(format!(
                    "cannot fit {} distractors on a {}-pixel canvas",
                    spec.distractors, spec.canvas
                )));
            }
        };
        placed.push(pos);
        out.push((k, pos.0, pos.1));
    }
    Ok(out)
}

fn jittered(truth: &GlyphTruth, jitter: usize, canvas: usize, rng: &mut impl Rng) -> BoundingBox {
    let j = jitter as i64;
    let mut d = || if j > 0 { rng.gen_range(-j..=j) } else { 0 };
    let x0 = (truth.col as i64 + d()).clamp(0, canvas as i64 - 1);
    let y0 = (truth.row as i64 + d()).clamp(0, canvas as i64 - 1);
    let x1 = ((truth.col + truth.size) as i64 + d()).clamp(x0 + 1, canvas as i64);
    let y1 = ((truth.row + truth.size) as i64 + d()).clamp(y0 + 1, canvas as i64);
    BoundingBox {
        x: x0 as f64,
        y: y0 as f64,
        w: (x1 - x0) as f64,
        h: (y1 - y0) as f64,
    }
}

/// Writes frames, clips, annotations, `train.jsonl`, `test.jsonl` and
/// `truth.json` under `out`. The same spec always yields the same bytes.
pub fn generate_synthetic(spec: &SyntheticSpec, out: impl AsRef<Path>) -> Result<SyntheticDataset> {
    spec.validate()?;
    let out = out.as_ref();
    for sub in ["frames", "audio", "annotations"] {
        std::fs::create_dir_all(out.join(sub))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_classes = spec.classes.len();
    let clip_len = (spec.clip_s * spec.sample_rate as f64).round() as usize;
    let band = spec.band_rows();
    let max_row = if spec.confound_class.is_some() {
        spec.canvas - band - spec.glyph_size
    } else {
        spec.canvas - spec.glyph_size
    };
    let max_col = spec.canvas - spec.glyph_size;

    let mut split = |name: &str, count: usize, ambient: usize, annotated: usize| -> Result<(PathBuf, Vec<GlyphTruth>)> {
        let mut records = Vec::with_capacity(count + ambient);
        let mut truths = Vec::with_capacity(count + ambient);
        for i in 0..count + ambient {
            let is_ambient = i >= count;
            let class = if is_ambient { rng.gen_range(0..n_classes) } else { i % n_classes };
            let cs = &spec.classes[class];
            let id = if is_ambient {
                format!("{name}-ambient-{:05}", i - count)
            } else {
                format!("{name}-{i:05}")
            };
            let row = rng.gen_range(0..=max_row);
            let col = rng.gen_range(0..=max_col);
            let confounded = spec.confound_class == Some(class);
            let mut frame = noise_canvas(spec.canvas, spec.canvas, spec.background_noise, &mut rng);
            draw_patches(&mut frame, spec.background_patches, spec.glyph_size, &mut rng);
            if confounded {
                draw_band(&mut frame, band);
            }
            for (k, r, c) in place_distractors(spec, class, (row, col), max_row, max_col, &mut rng)? {
                draw_glyph(&mut frame, &spec.classes[k], r, c, spec.glyph_size);
            }
            draw_glyph(&mut frame, cs, row, col, spec.glyph_size);
            let wave = if is_ambient {
                let level = rng.gen_range(0.0..=spec.ambient_level);
                ambient_waveform(level, clip_len, &mut rng)
            } else {
                class_waveform(cs, spec.sample_rate, clip_len, &mut rng)
            };
            let label = if is_ambient { AMBIENT_LABEL.to_string() } else { cs.name.clone() };
            let truth = GlyphTruth {
                id: id.clone(),
                class,
                label: label.clone(),
                row,
                col,
                size: spec.glyph_size,
                confounded,
                ambient: is_ambient,
            };
            let subjects = (0..3)
                .map(|s| SubjectAnnotation {
                    subject_id: format!("s{s}"),
                    tag: if is_ambient { Tag::Ambient } else { Tag::Object },
                    boxes: vec![jittered(&truth, spec.jitter, spec.canvas, &mut rng)],
                })
                .collect();
            let frame_rel = PathBuf::from(format!("frames/{id}.png"));
            let audio_rel = PathBuf::from(format!("audio/{id}.wav"));
            let ann_rel = PathBuf::from(format!("annotations/{id}.json"));
            frame.save_png(out.join(&frame_rel))?;
            write_wav(out.join(&audio_rel), &AudioClip::new(wave, spec.sample_rate)?)?;
            Annotation {
                id: id.clone(),
                subjects,
            }
            .save(out.join(&ann_rel))?;
            records.push(ManifestRecord {
                id,
                frame_path: frame_rel,
                audio_path: audio_rel,
                center_time_s: spec.clip_s / 2.0,
                annotation_ref: (i < annotated).then_some(ann_rel),
                label: Some(label),
            });
            truths.push(truth);
        }
        let path = out.join(format!("{name}.jsonl"));
        DatasetManifest::new(out, records)?.save(&path)?;
        Ok((path, truths))
    };

    let (train_manifest, train_truth) = split(
        "train",
        spec.train,
        spec.ambient_train,
        spec.annotated_train.unwrap_or(spec.train + spec.ambient_train),
    )?;
    let (test_manifest, test_truth) = split("test", spec.test, 0, spec.test)?;
    let all: Vec<&GlyphTruth> = train_truth.iter().chain(&test_truth).collect();
    std::fs::write(out.join("truth.json"), serde_json::to_vec_pretty(&all)?)?;
    std::fs::write(out.join("synth.json"), serde_json::to_vec_pretty(spec)?)?;
    Ok(SyntheticDataset {
        root: out.to_path_buf(),
        train_manifest,
        test_manifest,
        train_truth,
        test_truth,
    })
}

/// Reads the `truth.json` written by [`generate_synthetic`].
pub fn load_truth(path: impl AsRef<Path>) -> Result<Vec<GlyphTruth>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// A glyph circling the equator of an equirectangular sequence while its
/// class signature plays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitSpec {
    pub class: ClassSpec,
    /// Frame height; width is twice this.
    pub height: usize,
    pub frames: usize,
    pub fps: f64,
    pub start_longitude: f64,
    pub degrees_per_frame: f64,
    pub latitude: f64,
    pub glyph_size: usize,
    pub background_noise: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl OrbitSpec {
    pub fn toy(class: ClassSpec, seed: u64) -> Self {
        Self {
            class,
            height: 64,
            frames: 200,
            fps: 10.0,
            start_longitude: -100.0,
            degrees_per_frame: 1.0,
            latitude: 0.0,
            glyph_size: 8,
            background_noise: 0.25,
            sample_rate: 4000,
            seed,
        }
    }

    pub fn longitude_at(&self, frame: usize) -> f64 {
        crate::pano::wrap_longitude(self.start_longitude + self.degrees_per_frame * frame as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub timestamps: Vec<f64>,
}

/// Writes `frames/NNNNN.png`, `timing.json`, `audio.wav`, `truth.csv`
/// (frame, longitude, latitude of the glyph center) and `orbit.json`.
pub fn generate_orbit(spec: &OrbitSpec, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    let (h, w) = (spec.height, spec.height * 2);
    if spec.glyph_size == 0 || spec.glyph_size > h || spec.frames == 0 || !(spec.fps > 0.0) {
        return Err(Error::InvalidArgument("degenerate orbit spec".into()));
    }
    std::fs::create_dir_all(out.join("frames"))?;
    std::fs::write(out.join("orbit.json"), serde_json::to_vec_pretty(spec)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut timestamps = Vec::with_capacity(spec.frames);
    let mut truth = std::io::BufWriter::new(std::fs::File::create(out.join("truth.csv"))?);
    writeln!(truth, "frame,longitude,latitude")?;
    let half = spec.glyph_size as f64 / 2.0;
    for k in 0..spec.frames {
        let lon = spec.longitude_at(k);
        let (x, y) = lonlat_to_pixel(lon, spec.latitude, w, h);
        let col = (x - half + 0.5).round().rem_euclid(w as f64) as usize;
        let row = (y - half + 0.5).round().clamp(0.0, (h - spec.glyph_size) as f64) as usize;
        let mut frame = noise_canvas(h, w, spec.background_noise, &mut rng);
        draw_glyph(&mut frame, &spec.class, row, col, spec.glyph_size);
        frame.save_png(out.join(format!("frames/{k:05}.png")))?;
        timestamps.push(k as f64 / spec.fps);
        writeln!(truth, "{k},{lon},{}", spec.latitude)?;
    }
    truth.flush()?;
    std::fs::write(out.join("timing.json"), serde_json::to_vec_pretty(&FrameTiming { timestamps })?)?;
    let len = ((spec.frames as f64 / spec.fps + 1.0) * spec.sample_rate as f64).round() as usize;
    let wave = class_waveform(&spec.class, spec.sample_rate, len, &mut rng);
    write_wav(out.join("audio.wav"), &AudioClip::new(wave, spec.sample_rate)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn two_classes_ten_samples_are_balanced() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::toy(2, 10, 4, 3);
        let ds = generate_synthetic(&spec, dir.path()).unwrap();
        let m = DatasetManifest::load(&ds.train_manifest).unwrap();
        assert_eq!(m.len(), 10);
        let c0 = m.records.iter().filter(|r| r.label.as_deref() == Some("class0")).count();
        assert_eq!(c0, 5);
        assert!(m.records.iter().all(|r| r.annotation_ref.is_some()));
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut spec = SyntheticSpec::toy(3, 6, 3, 11);
        spec.confound_class = Some(1);
        spec.annotated_train = Some(2);
        generate_synthetic(&spec, a.path()).unwrap();
        generate_synthetic(&spec, b.path()).unwrap();
        let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
        assert!(!ta.is_empty());
        assert_eq!(ta, tb);
    }

    #[test]
    fn glyph_position_is_uniform_without_confound() {
        // Chi-square on the glyph's top-left cell in a 5x5 partition of the
        // 25 admissible positions per axis, 1000 draws. 24 degrees of
        // freedom: the 0.01 upper quantile is 42.98.
        let spec = SyntheticSpec::toy(4, 1000, 0, 5);
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&spec, dir.path()).unwrap();
        let span = spec.canvas - spec.glyph_size + 1;
        let mut counts = [0usize; 25];
        for t in &ds.train_truth {
            counts[(t.row * 5 / span) * 5 + t.col * 5 / span] += 1;
        }
        let expected = 1000.0 / 25.0;
        let chi: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi < 42.98, "chi-square {chi}");
    }

    #[test]
    fn confounded_frames_carry_the_band_and_glyphs_avoid_it() {
        let mut spec = SyntheticSpec::toy(2, 8, 0, 9);
        spec.confound_class = Some(0);
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&spec, dir.path()).unwrap();
        let band = spec.band_rows();
        for t in &ds.train_truth {
            assert!(t.row + t.size <= spec.canvas - band);
            let f = crate::raster::load_raster(dir.path().join(format!("frames/{}.png", t.id))).unwrap();
            let striped = (spec.canvas - band..spec.canvas)
                .all(|r| (0..spec.canvas).all(|c| f.get(r, c, 0) < 0.15 || f.get(r, c, 0) > 0.85));
            assert_eq!(striped, t.confounded);
        }
    }

    #[test]
    fn oversized_glyph_is_rejected() {
        let mut spec = SyntheticSpec::toy(2, 2, 2, 0);
        spec.glyph_size = 40;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(generate_synthetic(&spec, dir.path()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn annotations_cover_the_glyph_with_consensus() {
        let spec = SyntheticSpec::toy(2, 4, 0, 2);
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&spec, dir.path()).unwrap();
        for t in &ds.train_truth {
            let a = Annotation::load(dir.path().join(format!("annotations/{}.json", t.id))).unwrap();
            assert_eq!(a.subjects.len(), 3);
            let g = crate::evaluation::consensus_map(&a.subjects, 32, 32, 2).unwrap();
            // the glyph center is inside every jittered box
            let (cr, cc) = (t.row + t.size / 2, t.col + t.size / 2);
            assert_eq!(g.values[cr * 32 + cc], 1.0);
        }
    }

    #[test]
    fn orbit_truth_advances_one_degree_per_frame() {
        let spec = OrbitSpec {
            frames: 5,
            height: 16,
            ..OrbitSpec::toy(SyntheticSpec::toy(1, 0, 0, 0).classes[0].clone(), 1)
        };
        let dir = tempfile::tempdir().unwrap();
        generate_orbit(&spec, dir.path()).unwrap();
        let timing: FrameTiming =
            serde_json::from_slice(&std::fs::read(dir.path().join("timing.json")).unwrap()).unwrap();
        assert_eq!(timing.timestamps, vec![0.0, 0.1, 0.2, 0.3, 0.4]);
        assert_eq!(spec.longitude_at(3) - spec.longitude_at(2), 1.0);
        assert!(dir.path().join("frames/00004.png").exists());
    }
}
