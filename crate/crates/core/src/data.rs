//! Manifests, chunking and batching.
//!
//! A loader turns manifest entries into fixed-length chunks of
//! `frame_length` STFT frames (a trailing remainder shorter than that is
//! dropped) and yields [`Batch`]es holding exactly two tensor lists:
//! `inputs` for the model and `labels` for the loss. The label layout is
//! chosen by the loss; see [`crate::losses`] for the table.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, synth_mixture, write_wav, MixtureTriple, SynthSpec};
use crate::dsp::{self, Spectrogram, StftConfig, DEFAULT_LOG_FLOOR_DB};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::losses::{Loss, MiKind};
use crate::models::ModelKind;
use crate::rng;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureOptions {
    pub data_path: PathBuf,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::frame_length")]
    pub frame_length: usize,
    #[serde(default = "defaults::window_size")]
    pub window_size: usize,
    #[serde(default = "defaults::hop_size")]
    pub hop_size: usize,
    #[serde(default = "defaults::db_threshold")]
    pub db_threshold: f64,
}

mod defaults {
    pub fn batch_size() -> usize {
        8
    }
    pub fn frame_length() -> usize {
        400
    }
    pub fn window_size() -> usize {
        256
    }
    pub fn hop_size() -> usize {
        64
    }
    pub fn db_threshold() -> f64 {
        -20.0
    }
}

impl FeatureOptions {
    pub fn new(data_path: impl Into<PathBuf>) -> Self {
        Self {
            data_path: data_path.into(),
            batch_size: defaults::batch_size(),
            frame_length: defaults::frame_length(),
            window_size: defaults::window_size(),
            hop_size: defaults::hop_size(),
            db_threshold: defaults::db_threshold(),
        }
    }

    pub fn stft(&self) -> Result<StftConfig> {
        StftConfig::new(self.window_size, self.hop_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.frame_length == 0 {
            return Err(Error::invalid("batch_size and frame_length must be positive"));
        }
        if !self.db_threshold.is_finite() {
            return Err(Error::invalid("db_threshold must be finite"));
        }
        self.stft().map(|_| ())
    }

    /// Manifest location: `data_path` itself if it names a `.json` file,
    /// otherwise `data_path/manifest.json`.
    pub fn manifest_path(&self) -> PathBuf {
        if self.data_path.extension().is_some_and(|e| e == "json") {
            self.data_path.clone()
        } else {
            self.data_path.join(MANIFEST_FILE)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    /// Split of corpus item `index`: 8 train, 1 valid, 1 test per ten.
    pub fn for_index(index: usize) -> Split {
        match index % 10 {
            8 => Split::Valid,
            9 => Split::Test,
            _ => Split::Train,
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub mix: PathBuf,
    pub sources: Vec<PathBuf>,
    pub split: Split,
}

impl ManifestEntry {
    /// Utterance id: the explicit `id`, else the mixture file stem.
    pub fn utt_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| {
            self.mix
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sample_rate: u32,
    pub num_sources: usize,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative entry paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::invalid("manifest has no entries"));
        }
        for e in &self.entries {
            if e.sources.len() != self.num_sources {
                return Err(Error::invalid(format!(
                    "entry {} has {} sources, manifest declares {}",
                    e.utt_id(),
                    e.sources.len(),
                    self.num_sources
                )));
            }
            for p in std::iter::once(&e.mix).chain(&e.sources) {
                let full = self.resolve(p);
                if !full.exists() {
                    return Err(Error::io(
                        full,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Read the mixture and sources of one entry.
    pub fn read_entry(&self, e: &ManifestEntry) -> Result<MixtureTriple> {
        let mix = read_wav(self.resolve(&e.mix))?;
        let sources = e
            .sources
            .iter()
            .map(|p| read_wav(self.resolve(p)))
            .collect::<Result<Vec<_>>>()?;
        MixtureTriple::new(e.utt_id(), mix, sources)
    }
}

/// Write `count` synthetic mixtures (plus their sources) as PCM16 WAVs under
/// `out_dir/wav/` and a `manifest.json` describing them.
pub fn generate_synthetic_manifest(
    out_dir: impl AsRef<Path>,
    count: usize,
    spec: &SynthSpec,
    seed: u64,
) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::invalid("empty corpus: count must be positive"));
    }
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let entries = exec::map_range(Exec::default(), count, |i| -> Result<ManifestEntry> {
        let triple = synth_mixture(spec, rng::derive_seed(seed, i as u64))?;
        let id = format!("utt{i:05}");
        let mix = PathBuf::from("wav").join(format!("{id}_mix.wav"));
        write_wav(out_dir.join(&mix), &triple.mixture)?;
        let mut sources = Vec::with_capacity(triple.sources.len());
        for (k, s) in triple.sources.iter().enumerate() {
            let p = PathBuf::from("wav").join(format!("{id}_s{}.wav", k + 1));
            write_wav(out_dir.join(&p), s)?;
            sources.push(p);
        }
        Ok(ManifestEntry {
            id: Some(id),
            mix,
            sources,
            split: Split::for_index(i),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        sample_rate: spec.sample_rate,
        num_sources: spec.num_sources,
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// One-hot dominant-speaker labels, `N × S` row-major. Ties go to the
/// lowest speaker index.
pub fn dominant_speaker_labels(clean_mags: &[&[f64]]) -> Result<Vec<f64>> {
    let first = clean_mags
        .first()
        .ok_or_else(|| Error::invalid("dominant_speaker_labels needs at least one source"))?;
    if clean_mags.iter().any(|m| m.len() != first.len()) {
        return Err(Error::shape("dominant_speaker_labels", "source sizes differ"));
    }
    let s = clean_mags.len();
    let mut y = vec![0.0; first.len() * s];
    for i in 0..first.len() {
        let mut best = 0;
        for k in 1..s {
            if clean_mags[k][i] > clean_mags[best][i] {
                best = k;
            }
        }
        y[i * s + best] = 1.0;
    }
    Ok(y)
}

/// Features and label material for one chunk of `frame_length` frames.
#[derive(Clone, Debug)]
pub struct Chunk {
    pub utt_id: String,
    pub start_frame: usize,
    pub mix: Spectrogram,
    pub sources: Vec<Spectrogram>,
    pub log_mag: Vec<f64>,
    /// `N × S` one-hot dominant speaker.
    pub y: Vec<f64>,
    /// `N` voice-activity weights.
    pub w: Vec<f64>,
}

/// Cut one utterance into chunks. Weights use the utterance-wide maxima.
pub fn chunk_utterance(
    triple: &MixtureTriple,
    stft: &StftConfig,
    frame_length: usize,
    db_threshold: f64,
) -> Result<Vec<Chunk>> {
    let plan = dsp::Stft::new(*stft)?;
    let mix = plan.analyze(triple.mixture.samples())?;
    let sources = triple
        .sources
        .iter()
        .map(|s| plan.analyze(s.samples()))
        .collect::<Result<Vec<_>>>()?;
    let mags: Vec<&[f64]> = sources.iter().map(|s| s.magnitude.as_slice()).collect();
    let w = dsp::va_weights(&mags, db_threshold)?;
    let y = dominant_speaker_labels(&mags)?;
    let log_mag = dsp::log_magnitude(&mix.magnitude, DEFAULT_LOG_FLOOR_DB);
    let (f, s) = (mix.bins, sources.len());
    let n_chunks = mix.frames / frame_length;
    Ok((0..n_chunks)
        .map(|c| {
            let start = c * frame_length;
            let bins = start * f..(start + frame_length) * f;
            Chunk {
                utt_id: triple.id.clone(),
                start_frame: start,
                mix: mix.frames_range(start, frame_length),
                sources: sources
                    .iter()
                    .map(|sp| sp.frames_range(start, frame_length))
                    .collect(),
                log_mag: log_mag[bins.clone()].to_vec(),
                y: y[bins.start * s..bins.end * s].to_vec(),
                w: w[bins].to_vec(),
            }
        })
        .collect())
}

/// The two-list batch contract.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<Tensor>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.inputs.first().map_or(0, |t| t.shape()[0])
    }
}

#[derive(Clone, Debug)]
pub struct DataLoader {
    chunks: Vec<Chunk>,
    batch_size: usize,
    frame_length: usize,
    bins: usize,
    num_sources: usize,
    loss: Loss,
    seed: u64,
    shuffle: bool,
}

impl DataLoader {
    /// Build from in-memory triples.
    pub fn from_triples(
        options: &FeatureOptions,
        model: ModelKind,
        loss: Loss,
        triples: &[MixtureTriple],
        seed: u64,
        shuffle: bool,
    ) -> Result<Self> {
        options.validate()?;
        if !model.is_compatible(loss.kind) {
            return Err(Error::invalid(format!(
                "model `{}` is not compatible with loss `{}`",
                model.key(),
                loss.kind.key()
            )));
        }
        let first = triples
            .first()
            .ok_or_else(|| Error::invalid("no utterances for loader"))?;
        let num_sources = first.sources.len();
        if triples.iter().any(|t| t.sources.len() != num_sources) {
            return Err(Error::invalid("inconsistent source count across utterances"));
        }
        let stft = options.stft()?;
        let per_utt = exec::try_map_with(Exec::default(), triples, |t| {
            chunk_utterance(t, &stft, options.frame_length, options.db_threshold)
        })?;
        Ok(Self {
            chunks: per_utt.into_iter().flatten().collect(),
            batch_size: options.batch_size,
            frame_length: options.frame_length,
            bins: stft.num_bins(),
            num_sources,
            loss,
            seed,
            shuffle,
        })
    }

    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn num_sources(&self) -> usize {
        self.num_sources
    }

    pub fn num_batches(&self) -> usize {
        self.chunks.len().div_ceil(self.batch_size)
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    /// Chunk order for `epoch`: a seeded shuffle, or identity when shuffling is off.
    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.chunks.len()).collect();
        if self.shuffle {
            let mut r = rng::stream(rng::derive_seed(self.seed, epoch as u64), rng::tags::SHUFFLE);
            idx.shuffle(&mut r);
        }
        idx
    }

    /// Batches of one epoch, in order. The last batch may be smaller.
    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Batch> + '_ {
        let order = self.order(epoch);
        let bs = self.batch_size;
        (0..self.num_batches()).map(move |b| {
            let ids = &order[b * bs..((b + 1) * bs).min(order.len())];
            self.assemble(ids)
        })
    }

    fn assemble(&self, ids: &[usize]) -> Batch {
        let b = ids.len();
        let (t, f, s) = (self.frame_length, self.bins, self.num_sources);
        let n = t * f;
        let stack = |get: &dyn Fn(&Chunk) -> &[f64], shape: Vec<usize>| {
            let mut data = Vec::with_capacity(shape.iter().product());
            for &i in ids {
                data.extend_from_slice(get(&self.chunks[i]));
            }
            Tensor::new(shape, data).expect("chunk sizes are uniform")
        };
        let tf = vec![b, t, f];
        let inputs = vec![stack(&|c| &c.log_mag, tf.clone())];
        let mut labels = Vec::new();
        if self.loss.kind.uses_embeddings() {
            labels.push(stack(&|c| &c.y, vec![b, n, s]));
            if self.loss.needs_weights() {
                labels.push(stack(&|c| &c.w, vec![b, n]));
            }
        }
        match self.loss.kind.mi_kind() {
            Some(MiKind::Msa) => {
                labels.push(stack(&|c| &c.mix.magnitude, tf.clone()));
                for k in 0..s {
                    labels.push(stack(&|c| &c.sources[k].magnitude, tf.clone()));
                }
            }
            Some(MiKind::Tpsa) => {
                labels.push(stack(&|c| &c.mix.magnitude, tf.clone()));
                labels.push(stack(&|c| &c.mix.phase, tf.clone()));
                for k in 0..s {
                    labels.push(stack(&|c| &c.sources[k].magnitude, tf.clone()));
                    labels.push(stack(&|c| &c.sources[k].phase, tf.clone()));
                }
            }
            None => {}
        }
        Batch { inputs, labels }
    }
}

/// Loader over one split of a manifest.
pub fn build_loader(
    options: &FeatureOptions,
    model: ModelKind,
    loss: Loss,
    manifest: &Manifest,
    split: Split,
    shuffle_seed: u64,
    shuffle: bool,
) -> Result<DataLoader> {
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::invalid(format!("no {split:?} entries in manifest")));
    }
    let triples = exec::try_map_with(Exec::default(), &entries, |e| manifest.read_entry(e))?;
    DataLoader::from_triples(options, model, loss, &triples, shuffle_seed, shuffle)
}
