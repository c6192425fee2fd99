//! `soundloc`: every pipeline stage as a subcommand.
//!
//! Configuration is resolved in three layers, later ones winning: the
//! `--preset` defaults, the `--config` TOML file, then explicit flags. The
//! merged result is written as `config.toml` into each output directory.
//! Environment variables are never read.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad usage, 3 invalid
//! configuration, 4 missing input.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

use soundloc::attention::{read_sidecar, write_heatmap_png, write_sidecar};
use soundloc::model::{LossTerm, TripletObjective};
use soundloc::objectives::GradCheckOptions;
use soundloc::pano::write_trajectory_csv;
use soundloc::retrieval::{build_index, knn_filtered, Aggregation};
use soundloc::trainer::{write_loss_csv, OrbitSpec, TrainingSet};
use soundloc::{
    evaluate, extract_window, full_resolution_response, gradient_check, load_audio, load_raster,
    load_sequence, localize, render_nfov, resample, saliency_sequence, smooth_trajectory,
    weighted_center, Annotation, Checkpoint, DatasetManifest, EmbeddingIndex, Error, Mechanism,
    Metric, Modality, PseudoLabelSet, RunConfig, SyntheticSpec, TrainConfig, Trainer,
    TripletInput, TwoStreamParams, ViewCenter,
};

const CHECKPOINT_FILE: &str = "checkpoint.sloc";

#[derive(Parser)]
#[command(name = "soundloc", version, about = "Attention-based sound source localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic glyph-and-tone corpus, or a 360-degree orbit sequence.
    Synth(SynthArgs),
    /// Write a freshly initialized checkpoint.
    Init(InitArgs),
    /// Train on a manifest, or resume from a checkpoint.
    Train(TrainArgs),
    /// Heatmap PNG and float sidecar for one frame and its audio.
    Localize(LocalizeArgs),
    /// Score predicted maps against annotations (cIoU, AUC, baselines).
    Eval(EvalArgs),
    /// Build or load an embedding index and report cross-modal retrieval.
    Retrieve(RetrieveArgs),
    /// Saliency, smoothed camera path and perspective crops for a 360-degree sequence.
    Pano(PanoArgs),
    /// Compare analytic and finite-difference gradients of every loss term.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Paper-scale encoders, 20 s windows at 22.05 kHz.
    Full,
    /// Small encoders for the synthetic corpus, 0.5 s windows at 4 kHz.
    Toy,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults the config file and flags are layered over [default: full, toy for gradcheck].
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Attention mechanism: cos or relu.
    #[arg(long, value_parser = serde_enum::<Mechanism>)]
    mechanism: Option<Mechanism>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON dataset spec; when given, the size flags below are ignored.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 500)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Class whose frames also carry the striped confounder band.
    #[arg(long)]
    confound: Option<usize>,
    /// Training records that keep their annotation [default: all].
    #[arg(long)]
    annotated: Option<usize>,
    /// Extra training records pairing a plain frame with ambient noise.
    #[arg(long)]
    ambient: Option<usize>,
    /// Glyphs of other classes drawn silently on each frame.
    #[arg(long)]
    distractors: Option<usize>,
    /// Random colored rectangles in the background.
    #[arg(long)]
    patches: Option<usize>,
    /// Write a 200-frame orbit sequence of this class instead of a corpus.
    #[arg(long)]
    orbit: Option<usize>,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory; receives checkpoint.sloc and config.toml.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// JSONL manifest of training records.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory; receives checkpoint.sloc, loss.csv and config.toml.
    #[arg(long)]
    out: PathBuf,
    /// Total optimizer steps, counting those already in a resumed checkpoint.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Weight of the supervised attention term (0 disables it).
    #[arg(long)]
    supervised_weight: Option<f64>,
    /// Continue from this checkpoint; its model and optimizer settings are kept.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    frame: PathBuf,
    #[arg(long)]
    audio: PathBuf,
    /// Window center in seconds [default: middle of the clip].
    #[arg(long)]
    center_time: Option<f64>,
    /// Output directory; receives heatmap.png, response.f32 and config.toml.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory of `<id>.f32` response sidecars.
    #[arg(long, requires = "annotations", conflicts_with_all = ["checkpoint", "manifest"])]
    predictions: Option<PathBuf>,
    /// Directory of `<id>.json` annotations.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Predict with this checkpoint on the annotated records of --manifest.
    #[arg(long, requires = "manifest")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    /// Annotators that must agree for a pixel to count.
    #[arg(long)]
    consensus: Option<usize>,
    /// Output directory; receives report.json, report.txt and config.toml.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Records to embed; also the source of labels unless --labels is given.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Load this index instead of embedding the manifest.
    #[arg(long, conflicts_with = "manifest")]
    index: Option<PathBuf>,
    /// JSON pseudo-labels: `{id: [labels]}` or `{"image": {..}, "audio": {..}}`.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_parser = serde_enum::<Metric>)]
    metric: Option<Metric>,
    #[arg(long, value_parser = serde_enum::<Aggregation>)]
    aggregation: Option<Aggregation>,
    #[arg(long)]
    trials: Option<usize>,
    /// Also list the nearest neighbors of this id in both directions.
    #[arg(long)]
    query: Option<String>,
    /// Output directory; receives index.bin, report.json, report.txt and config.toml.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PanoArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of equirectangular PNG frames, processed in name order.
    #[arg(long)]
    frames: PathBuf,
    /// JSON `{"timestamps": [...]}`; without it frames are --stride seconds apart.
    #[arg(long)]
    timing: Option<PathBuf>,
    #[arg(long)]
    audio: PathBuf,
    #[arg(long)]
    stride: Option<f64>,
    /// Audio window per frame in seconds [default: the model's training window].
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    fov: Option<f64>,
    /// Largest camera move between frames, degrees.
    #[arg(long)]
    max_step: Option<f64>,
    /// Output directory; receives saliency/, crops/, trajectory.csv and config.toml.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Parameter coordinates probed per loss term.
    #[arg(long, default_value_t = 50)]
    probes: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Failed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Core(e.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Core(e) => write!(f, "{e}"),
            Self::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Core(Error::Config(_)) => 3,
            Self::Core(Error::MissingFile(_)) => 4,
            _ => 1,
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Parses an enum through its serde names so flags and config files agree.
fn serde_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn resolve(args: &ConfigArgs, default: Preset) -> CliResult<RunConfig> {
    let base = match args.preset.unwrap_or(default) {
        Preset::Full => RunConfig::default(),
        Preset::Toy => RunConfig {
            train: TrainConfig::toy(Mechanism::Cos),
            ..RunConfig::default()
        },
    };
    match &args.config {
        None => Ok(base),
        Some(p) => {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()).into());
            }
            Ok(RunConfig::layered(&base, &std::fs::read_to_string(p)?)?)
        }
    }
}

fn resolve_model(args: &ModelArgs, default: Preset) -> CliResult<RunConfig> {
    let mut run = resolve(&args.config, default)?;
    if let Some(s) = args.seed {
        run.train.seed = s;
    }
    if let Some(m) = args.mechanism {
        run.train.model.mechanism = m;
    }
    Ok(run)
}

fn require(path: &Path) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()).into())
    }
}

fn prepare_out(dir: &Path, run: &RunConfig) -> CliResult {
    std::fs::create_dir_all(dir)?;
    run.echo(dir)?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, TrainConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let config = ckpt.config()?;
    Ok((ckpt, config))
}

fn synth(a: SynthArgs) -> CliResult {
    let mut spec = match &a.spec {
        Some(p) => {
            require(p)?;
            serde_json::from_slice(&std::fs::read(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::toy(a.classes, a.train, a.test, a.seed),
    };
    if let Some(c) = a.orbit {
        let class = spec
            .classes
            .get(c)
            .cloned()
            .ok_or_else(|| Error::Config(format!("orbit class {c} out of range")))?;
        soundloc::trainer::generate_orbit(&OrbitSpec::toy(class, a.seed), &a.out)?;
        println!("wrote orbit sequence to {}", a.out.display());
        return Ok(());
    }
    if a.confound.is_some() {
        spec.confound_class = a.confound;
    }
    if a.annotated.is_some() {
        spec.annotated_train = a.annotated;
    }
    if let Some(n) = a.ambient {
        spec.ambient_train = n;
    }
    if let Some(n) = a.distractors {
        spec.distractors = n;
    }
    if let Some(n) = a.patches {
        spec.background_patches = n;
    }
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let ds = soundloc::generate_synthetic(&spec, &a.out)?;
    println!(
        "wrote {} train and {} test records to {}",
        ds.train_truth.len(),
        ds.test_truth.len(),
        ds.root.display()
    );
    Ok(())
}

fn init(a: InitArgs) -> CliResult {
    let run = resolve_model(&a.model, Preset::Full)?;
    run.validate()?;
    let trainer = Trainer::new(&run.train)?;
    prepare_out(&a.out, &run)?;
    trainer.checkpoint()?.save(a.out.join(CHECKPOINT_FILE))?;
    println!("initialized {} parameters", trainer.params.num_params());
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let mut run = resolve_model(&a.model, Preset::Full)?;
    let resumed = match &a.resume {
        Some(p) => {
            let (ckpt, config) = load_checkpoint(p)?;
            run.train = TrainConfig {
                steps: run.train.steps,
                ..config
            };
            Some(Trainer::from_checkpoint(&ckpt)?)
        }
        None => None,
    };
    if let Some(s) = a.steps {
        run.train.steps = s;
    }
    if let Some(lr) = a.lr {
        run.train.learning_rate = lr;
    }
    if let Some(b) = a.batch {
        run.train.batch_size = b;
    }
    if let Some(w) = a.supervised_weight {
        run.train.weights.supervised = w;
    }
    run.validate()?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut trainer = match resumed {
        Some(mut t) => {
            t.config = run.train.clone();
            t
        }
        None => Trainer::new(&run.train)?,
    };
    let remaining = run.train.steps.checked_sub(trainer.step).ok_or_else(|| {
        Error::Config(format!(
            "checkpoint is at step {}, past the requested {}",
            trainer.step, run.train.steps
        ))
    })?;
    prepare_out(&a.out, &run)?;
    let logs = if remaining == 0 {
        Vec::new()
    } else {
        let set = TrainingSet::load(&manifest, &run.train)?;
        trainer.run(&set, remaining)?
    };
    write_loss_csv(a.out.join("loss.csv"), &logs)?;
    trainer.checkpoint()?.save(a.out.join(CHECKPOINT_FILE))?;
    if let Some(last) = logs.last() {
        println!(
            "step {}: L_U {:.6} L_S {:.6} total {:.6}",
            last.step + 1,
            last.l_u,
            last.l_s,
            last.l_total
        );
    }
    println!("checkpoint at step {} in {}", trainer.step, a.out.display());
    Ok(())
}

/// Loads a clip at the model's rate and cuts the window around `center`.
fn model_window(path: &Path, config: &TrainConfig, center: Option<f64>) -> CliResult<Vec<f64>> {
    let mut clip = load_audio(path)?;
    if clip.sample_rate() != config.sample_rate {
        clip = resample(&clip, config.sample_rate)?;
    }
    let t = center.unwrap_or(clip.duration_s() / 2.0);
    Ok(extract_window(&clip, t, config.window_s)?.samples)
}

fn localize_cmd(a: LocalizeArgs) -> CliResult {
    let (ckpt, config) = load_checkpoint(&a.checkpoint)?;
    let run = RunConfig {
        train: config,
        ..RunConfig::default()
    };
    let frame = load_raster(&a.frame)?;
    let window = model_window(&a.audio, &run.train, a.center_time)?;
    let loc = localize(&ckpt.params, &frame, &window)?;
    let response = full_resolution_response(&loc.attention, frame.height, frame.width)?;
    prepare_out(&a.out, &run)?;
    write_heatmap_png(a.out.join("heatmap.png"), &response)?;
    write_sidecar(a.out.join("response.f32"), &response)?;
    println!("wrote heatmap.png and response.f32 to {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let mut run = resolve(&a.config, Preset::Full)?;
    if let Some(t) = a.tau {
        run.eval.tau = t;
    }
    if let Some(c) = a.consensus {
        run.eval.consensus_count = c;
    }
    let mut predictions = Vec::new();
    let mut annotations = BTreeMap::new();
    if let Some(dir) = &a.predictions {
        let ann_dir = a.annotations.as_ref().expect("clap enforces --annotations");
        run.validate()?;
        require(dir)?;
        require(ann_dir)?;
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.retain(|p| p.extension().is_some_and(|e| e == "f32"));
        paths.sort();
        for p in paths {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let ann = ann_dir.join(format!("{id}.json"));
            require(&ann)?;
            annotations.insert(id.clone(), Annotation::load(&ann)?);
            predictions.push((id, read_sidecar(&p)?));
        }
        prepare_out(&a.out, &run)?;
    } else if let (Some(ck), Some(mf)) = (&a.checkpoint, &a.manifest) {
        let (ckpt, config) = load_checkpoint(ck)?;
        run.train = config;
        run.validate()?;
        let manifest = DatasetManifest::load(mf)?;
        let set = TrainingSet::load(&manifest, &run.train)?;
        prepare_out(&a.out, &run)?;
        let pred_dir = a.out.join("predictions");
        std::fs::create_dir_all(&pred_dir)?;
        for (i, r) in manifest.records.iter().enumerate() {
            let Some(ann) = &r.annotation_ref else { continue };
            annotations.insert(r.id.clone(), Annotation::load(manifest.resolve(ann))?);
            let frame = &set.frames[i];
            let loc = localize(&ckpt.params, frame, &set.windows[i])?;
            let response = full_resolution_response(&loc.attention, frame.height, frame.width)?;
            write_sidecar(pred_dir.join(format!("{}.f32", r.id)), &response)?;
            predictions.push((r.id.clone(), response));
        }
    } else {
        return Err(Error::Config(
            "eval needs --predictions with --annotations, or --checkpoint with --manifest".into(),
        )
        .into());
    }
    if predictions.is_empty() {
        return Err(Error::Empty("no predictions to evaluate".into()).into());
    }
    let report = evaluate(&predictions, &annotations, &run.eval)?;
    let table = report.to_table();
    std::fs::write(a.out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    std::fs::write(a.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn manifest_labels(manifest: &DatasetManifest) -> CliResult<PseudoLabelSet> {
    let mut map = BTreeMap::new();
    for r in &manifest.records {
        let label = r.label.clone().ok_or_else(|| {
            Error::Config(format!("record {} has no label; pass --labels", r.id))
        })?;
        map.insert(r.id.clone(), vec![label]);
    }
    Ok(PseudoLabelSet::shared(map))
}

fn retrieve(a: RetrieveArgs) -> CliResult {
    let mut run = resolve(&a.config, Preset::Full)?;
    let s = &mut run.retrieval;
    if let Some(k) = a.k {
        s.k = k;
    }
    if let Some(m) = a.metric {
        s.metric = m;
    }
    if let Some(g) = a.aggregation {
        s.aggregation = g;
    }
    if let Some(t) = a.trials {
        s.trials = t;
    }
    let (ckpt, config) = load_checkpoint(&a.checkpoint)?;
    run.train = config;
    run.validate()?;
    let (index, mut labels) = match (&a.index, &a.manifest) {
        (Some(p), _) => (EmbeddingIndex::load(p)?, None),
        (None, Some(mf)) => {
            let manifest = DatasetManifest::load(mf)?;
            let set = TrainingSet::load(&manifest, &run.train)?;
            let samples = (0..set.len()).map(|i| (set.ids[i].as_str(), &set.frames[i], set.windows[i].as_slice()));
            let index = build_index(&ckpt.params, samples, run.retrieval.metric)?;
            let labels = if a.labels.is_none() { Some(manifest_labels(&manifest)?) } else { None };
            (index, labels)
        }
        (None, None) => return Err(Error::Config("retrieve needs --manifest or --index".into()).into()),
    };
    if let Some(p) = &a.labels {
        labels = Some(PseudoLabelSet::load(p)?);
    }
    let labels = labels.ok_or_else(|| Error::Config("a loaded index needs --labels".into()))?;
    if index.metric != run.retrieval.metric {
        return Err(Error::Config(format!(
            "index was built with {:?} distance but the config asks for {:?}",
            index.metric, run.retrieval.metric
        ))
        .into());
    }
    prepare_out(&a.out, &run)?;
    index.save(a.out.join("index.bin"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.retrieval.seed);
    let options = run.retrieval.options();
    let report = soundloc::retrieval_report(&index, &labels, run.retrieval.trials, &options, &mut rng)?;
    let mut table = report.to_table();
    if let Some(q) = &a.query {
        for (from, to) in [(Modality::Image, Modality::Audio), (Modality::Audio, Modality::Image)] {
            let entry = index
                .get(from, q)
                .ok_or_else(|| Error::InvalidArgument(format!("{q} is not in the index")))?;
            let hits = knn_filtered(&entry.vector, &index, options.k, index.metric, |e| {
                e.modality == to && !(options.exclude_self && e.id == *q)
            })?;
            table.push_str(&format!("\n{from:?} {q} -> {to:?}:\n"));
            for h in hits {
                let l = labels.labels(to, &h.id).map(|l| l.join(",")).unwrap_or_default();
                table.push_str(&format!("  {:<16} {:>10.4}  {l}\n", h.id, h.distance));
            }
        }
    }
    std::fs::write(a.out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    std::fs::write(a.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn pano(a: PanoArgs) -> CliResult {
    let mut run = resolve(&a.config, Preset::Full)?;
    let p = &mut run.pano;
    if let Some(s) = a.stride {
        p.stride_s = s;
    }
    if a.window.is_some() {
        p.window_s = a.window;
    }
    if let Some(f) = a.fov {
        p.fov_deg = f;
    }
    if let Some(m) = a.max_step {
        p.max_step_deg = m;
    }
    let (ckpt, config) = load_checkpoint(&a.checkpoint)?;
    run.train = config;
    run.pano.window_s.get_or_insert(run.train.window_s);
    run.validate()?;
    let p = &run.pano;
    let frames = load_sequence(&a.frames, a.timing.as_deref(), p.stride_s)?;
    let mut clip = load_audio(&a.audio)?;
    if clip.sample_rate() != run.train.sample_rate {
        clip = resample(&clip, run.train.sample_rate)?;
    }
    let window = p.window_s.unwrap_or(run.train.window_s);
    let maps = saliency_sequence(&frames, &clip, &ckpt.params, window, p.source)?;
    let centers = maps
        .iter()
        .map(|m| Ok(weighted_center(m)?.unwrap_or(ViewCenter::new(0.0, 0.0, 0.0))))
        .collect::<soundloc::Result<Vec<_>>>()?;
    let trajectory = smooth_trajectory(&centers, p.max_step_deg, p.hold, p.fov_deg)?;
    prepare_out(&a.out, &run)?;
    for sub in ["saliency", "crops"] {
        std::fs::create_dir_all(a.out.join(sub))?;
    }
    for (k, (map, (frame, c))) in maps.iter().zip(frames.iter().zip(&trajectory.centers)).enumerate() {
        write_heatmap_png(a.out.join(format!("saliency/{k:05}.png")), map)?;
        render_nfov(&frame.raster, c, p.fov_deg, p.crop_height, p.crop_width)?
            .save_png(a.out.join(format!("crops/{k:05}.png")))?;
    }
    let timestamps: Vec<f64> = frames.iter().map(|f| f.timestamp_s).collect();
    write_trajectory_csv(a.out.join("trajectory.csv"), &timestamps, &trajectory)?;
    println!("tracked {} frames into {}", frames.len(), a.out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let run = resolve_model(&a.model, Preset::Toy)?;
    run.validate()?;
    let model = &run.train.model;
    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
    let params = TwoStreamParams::init(model, &mut rng)?;
    // A 4x4 grid and twice the shortest waveform the sound encoder accepts.
    let side = 4 * model.visual.downsample_factor();
    let data = (0..side * side * 3).map(|_| rng.gen::<f64>()).collect();
    let frame = soundloc::Raster::new(side, side, 3, data)?;
    let n = 2 * model.sound.min_input_len();
    let pos: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let neg: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (rows, cols) = model.visual.grid_dims(side, side);
    let mut target = vec![0.0; rows * cols];
    for t in target.iter_mut() {
        *t = f64::from(rng.gen_bool(0.25));
    }
    target[rng.gen_range(0..rows * cols)] = 1.0;
    let gt = soundloc::GroundTruthAttention::new(rows, cols, target)?;
    let input = TripletInput {
        frame: &frame,
        positive: &pos,
        negative: &neg,
        gt: Some(&gt),
    };
    let flat = params.to_flat();
    let mut worst: f64 = 0.0;
    println!("{:<14} {:>14} {:>8} {:>8}", "term", "max rel err", "probes", "skipped");
    for term in [LossTerm::Unsupervised, LossTerm::Supervised, LossTerm::Total] {
        let objective = TripletObjective::for_term(&params, input, term, run.train.weights.normalize_supervised);
        let r = gradient_check(&objective, &flat, a.probes, &GradCheckOptions::default(), &mut rng)?;
        println!(
            "{:<14} {:>14.3e} {:>8} {:>8}",
            format!("{term:?}"),
            r.max_relative_error,
            r.probes_used,
            r.probes_skipped
        );
        worst = worst.max(r.max_relative_error);
    }
    if worst > a.tolerance {
        return Err(CliError::Failed(format!(
            "gradient check failed: {worst:.3e} exceeds {:.1e}",
            a.tolerance
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Init(a) => init(a),
        Command::Train(a) => train(a),
        Command::Localize(a) => localize_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Pano(a) => pano(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
