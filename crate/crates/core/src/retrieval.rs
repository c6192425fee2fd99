//! Nearest-neighbour search in the shared embedding space, pseudo-label
//! scoring, and associative (one modality held fixed) retrieval.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, TwoStreamParams};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Audio,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Self::Image => Self::Audio,
            Self::Audio => Self::Image,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "euclidean" => Ok(Self::Euclidean),
            other => Err(Error::InvalidArgument(format!(
                "unknown metric '{other}' (expected cosine or euclidean)"
            ))),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine distance `1 - cos` or Euclidean distance. Under the cosine metric
/// a zero-norm `b` is treated as orthogonal to everything.
pub fn distance(a: &[f64], b: &[f64], metric: Metric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    match metric {
        Metric::Euclidean => Ok(a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()),
        Metric::Cosine => {
            let na = norm(a);
            if na == 0.0 {
                return Err(Error::ZeroNorm("cosine query".into()));
            }
            let nb = norm(b);
            if nb == 0.0 {
                return Ok(1.0);
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            Ok(1.0 - (dot / (na * nb)).clamp(-1.0, 1.0))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub modality: Modality,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub metric: Metric,
    pub dim: usize,
    entries: Vec<IndexEntry>,
    keys: BTreeSet<(Modality, String)>,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    metric: Metric,
    dim: usize,
    entries: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    id: String,
    modality: Modality,
}

impl EmbeddingIndex {
    pub fn new(metric: Metric, dim: usize) -> Self {
        Self {
            metric,
            dim,
            entries: Vec::new(),
            keys: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, entry: IndexEntry) -> Result<()> {
        if entry.vector.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "entry {} has {} values, index holds {}",
                entry.id,
                entry.vector.len(),
                self.dim
            )));
        }
        if !self.keys.insert((entry.modality, entry.id.clone())) {
            return Err(Error::InvalidArgument(format!(
                "duplicate {:?} entry {}",
                entry.modality, entry.id
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, modality: Modality, id: &str) -> Option<&IndexEntry> {
        self.entries
            .iter()
            .find(|e| e.modality == modality && e.id == id)
    }

    /// `u32` header length, JSON header, then every vector as little-endian
    /// `f32` in entry order.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = IndexHeader {
            metric: self.metric,
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .map(|e| HeaderEntry {
                    id: e.id.clone(),
                    modality: e.modality,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(4 + json.len() + 4 * self.dim * self.entries.len());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.entries {
            for &v in &e.vector {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("malformed index: {m}"));
        if bytes.len() < 4 {
            return Err(bad("missing header length"));
        }
        let hlen = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(4..4 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: IndexHeader = serde_json::from_slice(json)?;
        let body = &bytes[4 + hlen..];
        if body.len() != 4 * header.dim * header.entries.len() {
            return Err(bad("vector block length does not match the header"));
        }
        let mut index = Self::new(header.metric, header.dim);
        let mut floats = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        for h in header.entries {
            let vector = floats.by_ref().take(header.dim).collect();
            index.insert(IndexEntry {
                id: h.id,
                modality: h.modality,
                vector,
            })?;
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::decode(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub modality: Modality,
    pub distance: f64,
}

/// The `k` entries nearest to `query`, ties broken by ascending id.
pub fn knn(query: &[f64], index: &EmbeddingIndex, k: usize, metric: Metric) -> Result<Vec<Neighbor>> {
    knn_filtered(query, index, k, metric, |_| true)
}

/// [`knn`] restricted to entries accepted by `keep`.
pub fn knn_filtered(
    query: &[f64],
    index: &EmbeddingIndex,
    k: usize,
    metric: Metric,
    keep: impl Fn(&IndexEntry) -> bool,
) -> Result<Vec<Neighbor>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if index.is_empty() {
        return Err(Error::Empty("index has no entries".into()));
    }
    if metric == Metric::Cosine && norm(query) == 0.0 {
        return Err(Error::ZeroNorm("cosine query".into()));
    }
    let mut scored = Vec::new();
    for e in index.entries.iter().filter(|e| keep(e)) {
        scored.push(Neighbor {
            id: e.id.clone(),
            modality: e.modality,
            distance: distance(query, &e.vector, metric)?,
        });
    }
    scored.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.id.cmp(&b.id))
            .then_with(|| a.modality.cmp(&b.modality))
    });
    scored.truncate(k);
    Ok(scored)
}

/// Labels per id for each modality.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelSet {
    pub image: BTreeMap<String, Vec<String>>,
    pub audio: BTreeMap<String, Vec<String>>,
}

impl PseudoLabelSet {
    /// The same labels for both modalities of every id.
    pub fn shared(labels: BTreeMap<String, Vec<String>>) -> Self {
        Self {
            image: labels.clone(),
            audio: labels,
        }
    }

    pub fn labels(&self, modality: Modality, id: &str) -> Result<&[String]> {
        let map = match modality {
            Modality::Image => &self.image,
            Modality::Audio => &self.audio,
        };
        match map.get(id) {
            Some(l) if !l.is_empty() => Ok(l),
            _ => Err(Error::InvalidArgument(format!(
                "no pseudo-labels for {modality:?} {id}"
            ))),
        }
    }

    /// Accepts either `{"image": {..}, "audio": {..}}` or a flat
    /// `{id: [labels]}` map applied to both modalities.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let split = value
            .as_object()
            .map(|o| o.keys().all(|k| k == "image" || k == "audio") && !o.is_empty())
            .unwrap_or(false);
        if split {
            Ok(serde_json::from_value(value)?)
        } else {
            Ok(Self::shared(serde_json::from_value(value)?))
        }
    }
}

/// One flag per neighbor label set: does it share a label with the query.
pub fn pseudo_label_success(query: &[String], neighbors: &[&[String]]) -> Result<Vec<bool>> {
    if query.is_empty() {
        return Err(Error::Empty("query has no pseudo-labels".into()));
    }
    let q: BTreeSet<&String> = query.iter().collect();
    neighbors
        .iter()
        .map(|set| {
            if set.is_empty() {
                Err(Error::InvalidArgument("neighbor has no pseudo-labels".into()))
            } else {
                Ok(set.iter().any(|l| q.contains(l)))
            }
        })
        .collect()
}

/// How per-neighbor flags combine into a per-query score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Fraction of the retrieved neighbors sharing a label with the query.
    #[default]
    PerNeighbor,
    /// 1 if any retrieved neighbor shares a label with the query.
    AnyNeighbor,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_neighbor" => Ok(Self::PerNeighbor),
            "any_neighbor" => Ok(Self::AnyNeighbor),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregation '{other}' (expected per_neighbor or any_neighbor)"
            ))),
        }
    }
}

impl Aggregation {
    pub fn score(self, flags: &[bool]) -> f64 {
        if flags.is_empty() {
            return 0.0;
        }
        match self {
            Self::PerNeighbor => flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64,
            Self::AnyNeighbor => flags.iter().any(|&f| f) as u8 as f64,
        }
    }
}

/// Which entries count as queries and which as the gallery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Direction {
    pub query: Modality,
    pub gallery: Modality,
}

impl Direction {
    pub const IMAGE_TO_AUDIO: Self = Self {
        query: Modality::Image,
        gallery: Modality::Audio,
    };
    pub const AUDIO_TO_IMAGE: Self = Self {
        query: Modality::Audio,
        gallery: Modality::Image,
    };
}

/// Options shared by model retrieval and the random baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalOptions {
    pub k: usize,
    pub aggregation: Aggregation,
    /// Drop gallery entries carrying the query's own id (its paired sample).
    pub exclude_self: bool,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        Self {
            k: 10,
            aggregation: Aggregation::PerNeighbor,
            exclude_self: true,
        }
    }
}

fn score_query(
    query: &IndexEntry,
    ids: &[&str],
    labels: &PseudoLabelSet,
    gallery: Modality,
    aggregation: Aggregation,
) -> Result<f64> {
    let q = labels.labels(query.modality, &query.id)?;
    let sets = ids
        .iter()
        .map(|id| labels.labels(gallery, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregation.score(&pseudo_label_success(q, &sets)?))
}

/// Mean pseudo-label success of top-`k` retrieval over every query entry.
pub fn retrieval_success(
    index: &EmbeddingIndex,
    labels: &PseudoLabelSet,
    direction: Direction,
    options: &RetrievalOptions,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for q in index.entries.iter().filter(|e| e.modality == direction.query) {
        let hits = knn_filtered(&q.vector, index, options.k, index.metric, |e| {
            e.modality == direction.gallery && !(options.exclude_self && e.id == q.id)
        })?;
        let ids: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
        total += score_query(q, &ids, labels, direction.gallery, options.aggregation)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty(format!("no {:?} queries in the index", direction.query)));
    }
    Ok(total / n as f64)
}

/// Mean success of `trials` random draws: a uniformly chosen query scored
/// against `k` gallery entries drawn uniformly without replacement.
pub fn random_baseline(
    index: &EmbeddingIndex,
    labels: &PseudoLabelSet,
    direction: Direction,
    trials: usize,
    options: &RetrievalOptions,
    rng: &mut impl Rng,
) -> Result<f64> {
    let queries: Vec<&IndexEntry> = index
        .entries
        .iter()
        .filter(|e| e.modality == direction.query)
        .collect();
    if queries.is_empty() || trials == 0 {
        return Err(Error::Empty("no queries or trials for the random baseline".into()));
    }
    let mut total = 0.0;
    for _ in 0..trials {
        let q = queries[rng.gen_range(0..queries.len())];
        let gallery: Vec<&str> = index
            .entries
            .iter()
            .filter(|e| e.modality == direction.gallery && !(options.exclude_self && e.id == q.id))
            .map(|e| e.id.as_str())
            .collect();
        if gallery.len() < options.k {
            return Err(Error::InvalidArgument(format!(
                "gallery of {} entries is smaller than k = {}",
                gallery.len(),
                options.k
            )));
        }
        let picks: Vec<&str> = sample(rng, gallery.len(), options.k)
            .into_iter()
            .map(|i| gallery[i])
            .collect();
        total += score_query(q, &picks, labels, direction.gallery, options.aggregation)?;
    }
    Ok(total / trials as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k: usize,
    pub trials: usize,
    pub aggregation: Aggregation,
    pub image_to_audio: f64,
    pub audio_to_image: f64,
    pub random_image_to_audio: f64,
    pub random_audio_to_image: f64,
}

impl RetrievalReport {
    pub fn to_table(&self) -> String {
        format!(
            "{:<16} {:>10} {:>10}\n{:<16} {:>10.3} {:>10.3}\n{:<16} {:>10.3} {:>10.3}\n",
            format!("top-{}", self.k),
            "img->aud",
            "aud->img",
            "model",
            self.image_to_audio,
            self.audio_to_image,
            format!("random ({})", self.trials),
            self.random_image_to_audio,
            self.random_audio_to_image
        )
    }
}

/// Model and random-baseline success in both directions.
pub fn retrieval_report(
    index: &EmbeddingIndex,
    labels: &PseudoLabelSet,
    trials: usize,
    options: &RetrievalOptions,
    rng: &mut impl Rng,
) -> Result<RetrievalReport> {
    let i2a = Direction::IMAGE_TO_AUDIO;
    let a2i = Direction::AUDIO_TO_IMAGE;
    Ok(RetrievalReport {
        k: options.k,
        trials,
        aggregation: options.aggregation,
        image_to_audio: retrieval_success(index, labels, i2a, options)?,
        audio_to_image: retrieval_success(index, labels, a2i, options)?,
        random_image_to_audio: random_baseline(index, labels, i2a, trials, options, rng)?,
        random_audio_to_image: random_baseline(index, labels, a2i, trials, options, rng)?,
    })
}

/// Index entries for a set of paired samples: `f_v` of each frame attended
/// by its own audio (image modality) and `f_s` of each waveform (audio
/// modality).
pub fn build_index<'a>(
    params: &TwoStreamParams,
    samples: impl IntoIterator<Item = (&'a str, &'a Raster, &'a [f64])>,
    metric: Metric,
) -> Result<EmbeddingIndex> {
    let mut index = EmbeddingIndex::new(metric, params.config.visual.embedding_dim);
    for (id, frame, wave) in samples {
        let loc = model::localize(params, frame, wave)?;
        index.insert(IndexEntry {
            id: id.to_string(),
            modality: Modality::Image,
            vector: loc.f_v.0,
        })?;
        index.insert(IndexEntry {
            id: id.to_string(),
            modality: Modality::Audio,
            vector: loc.f_s.0,
        })?;
    }
    Ok(index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociativeMode {
    /// Keep `X`'s frame, swap in `Y`'s audio.
    FixVisual,
    /// Keep `X`'s audio, swap in `Y`'s frame.
    FixAudio,
}

/// A sample whose modalities may be partially missing.
#[derive(Debug, Clone, Copy)]
pub struct AssociativeSample<'a> {
    pub frame: Option<&'a Raster>,
    pub waveform: Option<&'a [f64]>,
}

/// Distance between `f_v(X_v, X_s)` and the visual embedding obtained by
/// replacing one modality of `X` with `Y`'s.
pub fn associative_embed(
    x: &AssociativeSample,
    y: &AssociativeSample,
    mode: AssociativeMode,
    params: &TwoStreamParams,
    metric: Metric,
) -> Result<f64> {
    let missing = |what: &str| Error::InvalidArgument(format!("associative query needs {what}"));
    let xv = x.frame.ok_or_else(|| missing("the query frame"))?;
    let xs = x.waveform.ok_or_else(|| missing("the query audio"))?;
    let base = model::localize(params, xv, xs)?.f_v.0;
    let other = match mode {
        AssociativeMode::FixVisual => {
            let ys = y.waveform.ok_or_else(|| missing("the gallery audio"))?;
            model::localize(params, xv, ys)?.f_v.0
        }
        AssociativeMode::FixAudio => {
            let yv = y.frame.ok_or_else(|| missing("the gallery frame"))?;
            model::localize(params, yv, xs)?.f_v.0
        }
    };
    distance(&base, &other, metric)
}
