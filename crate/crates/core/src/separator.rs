//! Inference: model outputs to separated waveforms.
//!
//! Mask models multiply their masks with the mixture magnitude and reuse
//! the mixture phase. Embedding models cluster the embeddings of active
//! bins with k-means and turn the assignment into binary masks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, Waveform};
use crate::data::{FeatureOptions, Manifest, Split};
use crate::dsp::{self, Spectrogram, Stft, StftConfig, DEFAULT_LOG_FLOOR_DB};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::metrics::estimate_file_name;
use crate::models::{Model, ModelKind};
use crate::rng;
use crate::tensor::{ParamStore, Tensor};
use crate::trainer::load_checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// Ideal binary mask: 1 for the dominant source of each bin.
    Ibm,
    /// Ideal ratio mask `|S_c| / Σ|S_k|`.
    Irm,
    /// Phase-sensitive mask, truncated to `[0, 1]`.
    Psm,
}

/// Oracle masks from clean references, one `T × F` mask per source.
pub fn oracle_masks(kind: MaskKind, mix: &Spectrogram, clean: &[Spectrogram]) -> Result<Vec<Vec<f64>>> {
    if clean.is_empty() {
        return Err(Error::invalid("oracle masks need at least one source"));
    }
    let n = mix.magnitude.len();
    if clean.iter().any(|c| c.frames != mix.frames || c.bins != mix.bins) {
        return Err(Error::shape("oracle_masks", "source and mixture spectrograms differ in size"));
    }
    let s = clean.len();
    let mut masks = vec![vec![0.0; n]; s];
    for i in 0..n {
        match kind {
            MaskKind::Ibm => {
                let mut best = 0;
                for k in 1..s {
                    if clean[k].magnitude[i] > clean[best].magnitude[i] {
                        best = k;
                    }
                }
                masks[best][i] = 1.0;
            }
            MaskKind::Irm => {
                let total: f64 = clean.iter().map(|c| c.magnitude[i]).sum();
                for k in 0..s {
                    masks[k][i] = if total > 0.0 {
                        clean[k].magnitude[i] / total
                    } else {
                        1.0 / s as f64
                    };
                }
            }
            MaskKind::Psm => {
                let x = mix.magnitude[i];
                for k in 0..s {
                    masks[k][i] = if x > 0.0 {
                        let c = &clean[k];
                        (c.magnitude[i] * (mix.phase[i] - c.phase[i]).cos() / x).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    Ok(masks)
}

/// Masked mixture magnitude with mixture phase, then inverse STFT.
pub fn apply_masks(mix: &Spectrogram, masks: &[Vec<f64>], config: &StftConfig, sample_rate: u32) -> Result<Vec<Waveform>> {
    let plan = Stft::new(*config)?;
    masks
        .iter()
        .map(|m| {
            if m.len() != mix.magnitude.len() {
                return Err(Error::shape("apply_masks", "mask size differs from the spectrogram"));
            }
            let spec = Spectrogram {
                frames: mix.frames,
                bins: mix.bins,
                magnitude: m.iter().zip(&mix.magnitude).map(|(a, b)| a * b).collect(),
                phase: mix.phase.clone(),
            };
            Waveform::new(plan.synthesize(&spec)?, sample_rate)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Masks,
    Clustering,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparationResult {
    pub estimates: Vec<Waveform>,
    pub method: Method,
    /// The `T × F` masks applied, one per source.
    pub masks: Vec<Vec<f64>>,
    /// Cluster of every bin, for the clustering path.
    pub assignments: Option<Vec<usize>>,
    pub chunks: usize,
}

/// Settings shared by both inference paths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceOptions {
    pub stft: StftConfig,
    pub frame_length: usize,
    /// Bins more than this many dB below the loudest mixture bin are silent.
    pub db_threshold: f64,
    pub seed: u64,
}

impl InferenceOptions {
    pub fn from_features(fo: &FeatureOptions, seed: u64) -> Result<Self> {
        Ok(Self {
            stft: fo.stft()?,
            frame_length: fo.frame_length,
            db_threshold: fo.db_threshold,
            seed,
        })
    }
}

/// Run the model chunk by chunk; returns per-chunk outputs and the mixture spectrogram.
fn infer_chunks(mixture: &Waveform, model: &Model, store: &ParamStore, opts: &InferenceOptions) -> Result<(Spectrogram, Vec<Vec<Tensor>>)> {
    if opts.frame_length == 0 {
        return Err(Error::invalid("frame_length must be positive"));
    }
    let mix = dsp::stft(mixture, &opts.stft)?;
    let log_mag = dsp::log_magnitude(&mix.magnitude, DEFAULT_LOG_FLOOR_DB);
    let f = mix.bins;
    let mut outs = Vec::new();
    let mut start = 0;
    while start < mix.frames {
        let len = opts.frame_length.min(mix.frames - start);
        let x = Tensor::new(vec![1, len, f], log_mag[start * f..(start + len) * f].to_vec())?;
        outs.push(model.infer(store, &x)?);
        start += len;
    }
    Ok((mix, outs))
}

pub fn separate_with_masks(mixture: &Waveform, model: &Model, store: &ParamStore, opts: &InferenceOptions) -> Result<SeparationResult> {
    if !model.kind().has_mask_head() {
        return Err(Error::invalid(format!("model `{}` has no mask head", model.kind().key())));
    }
    let (mix, chunks) = infer_chunks(mixture, model, store, opts)?;
    let mut masks = vec![Vec::with_capacity(mix.magnitude.len()); model.num_speakers()];
    for out in &chunks {
        for (acc, m) in masks.iter_mut().zip(model.masks_from_outputs(out)?) {
            acc.extend_from_slice(m.data());
        }
    }
    let estimates = apply_masks(&mix, &masks, &opts.stft, mixture.sample_rate())?;
    Ok(SeparationResult {
        estimates,
        method: Method::Masks,
        masks,
        assignments: None,
        chunks: chunks.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    pub inertia: f64,
}

pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_once(points: &[f64], dim: usize, k: usize, rng: &mut rng::Rng) -> KMeans {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    // k-means++ seeding
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids)).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(row(i), &centroids[start..]));
        }
    }

    let mut assignments = vec![0; n];
    let mut prev = f64::INFINITY;
    let mut inertia = f64::INFINITY;
    for _ in 0..KMEANS_MAX_ITER {
        inertia = 0.0;
        for i in 0..n {
            let (c, d) = nearest(row(i), &centroids, dim);
            assignments[i] = c;
            inertia += d;
        }
        if prev.is_finite() && (prev - inertia).abs() <= KMEANS_TOL * prev.max(f64::MIN_POSITIVE) {
            break;
        }
        prev = inertia;
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    KMeans {
        assignments,
        centroids,
        inertia,
    }
}

/// k-means with k-means++ seeding, keeping the best of
/// [`KMEANS_RESTARTS`] runs. Each restart draws from its own seeded stream,
/// so the result does not depend on `exec`.
pub fn kmeans(exec: Exec, points: &[f64], dim: usize, k: usize, seed: u64) -> Result<KMeans> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::shape("kmeans", format!("{} values do not form rows of {dim}", points.len())));
    }
    let n = points.len() / dim;
    if k == 0 || n < k {
        return Err(Error::invalid(format!("cannot form {k} clusters from {n} points")));
    }
    let runs = exec::map_range(exec, KMEANS_RESTARTS, |r| {
        let mut rng = rng::stream(rng::derive_seed(seed, r as u64), rng::tags::KMEANS);
        kmeans_once(points, dim, k, &mut rng)
    });
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.inertia < runs[best].inertia {
            best = i;
        }
    }
    Ok(runs.into_iter().nth(best).expect("at least one restart"))
}

/// Cluster the embedding rows of active bins; silent bins go to cluster 0.
pub fn cluster_embeddings(exec: Exec, embeddings: &[f64], dim: usize, active: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    if embeddings.len() != active.len() * dim {
        return Err(Error::shape("cluster_embeddings", "embeddings and activity differ in length"));
    }
    let idx: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
    if idx.len() < k {
        return Err(Error::invalid(format!(
            "only {} active bins for {k} clusters",
            idx.len()
        )));
    }
    let mut pts = Vec::with_capacity(idx.len() * dim);
    for &i in &idx {
        pts.extend_from_slice(&embeddings[i * dim..(i + 1) * dim]);
    }
    let km = kmeans(exec, &pts, dim, k, seed)?;
    let mut out = vec![0; active.len()];
    for (&i, &c) in idx.iter().zip(&km.assignments) {
        out[i] = c;
    }
    Ok(out)
}

pub fn separate_with_clustering(
    mixture: &Waveform,
    model: &Model,
    store: &ParamStore,
    opts: &InferenceOptions,
    k: usize,
) -> Result<SeparationResult> {
    if !model.kind().has_embedding_head() {
        return Err(Error::invalid(format!("model `{}` has no embedding head", model.kind().key())));
    }
    let (mix, chunks) = infer_chunks(mixture, model, store, opts)?;
    let dim = model.config().embedding_dim;
    let mut emb = Vec::with_capacity(mix.magnitude.len() * dim);
    for out in &chunks {
        emb.extend_from_slice(out[0].data());
    }
    let active: Vec<bool> = dsp::va_weights(&[&mix.magnitude], opts.db_threshold)?
        .into_iter()
        .map(|w| w > 0.0)
        .collect();
    let assignments = cluster_embeddings(Exec::default(), &emb, dim, &active, k, opts.seed)?;
    let mut masks = vec![vec![0.0; assignments.len()]; k];
    for (i, &c) in assignments.iter().enumerate() {
        masks[c][i] = 1.0;
    }
    let estimates = apply_masks(&mix, &masks, &opts.stft, mixture.sample_rate())?;
    Ok(SeparationResult {
        estimates,
        method: Method::Clustering,
        masks,
        assignments: Some(assignments),
        chunks: chunks.len(),
    })
}

/// Mask path for mask-producing models, clustering for embedding-only ones.
pub fn separate(mixture: &Waveform, model: &Model, store: &ParamStore, opts: &InferenceOptions) -> Result<SeparationResult> {
    match model.kind() {
        ModelKind::Dc => separate_with_clustering(mixture, model, store, opts, model.num_speakers()),
        ModelKind::Upit | ModelKind::Chimera => separate_with_masks(mixture, model, store, opts),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparatedUtterance {
    pub id: String,
    pub method: Method,
    pub files: Vec<PathBuf>,
}

/// Separate every entry of `split`, writing `<utt>_s<k>.wav` into `out_dir`.
pub fn separate_corpus(
    checkpoint: impl AsRef<Path>,
    manifest: &Manifest,
    split: Split,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<SeparatedUtterance>> {
    let (model, store, ckpt) = load_checkpoint(checkpoint)?;
    if manifest.num_sources != model.num_speakers() {
        return Err(Error::Checkpoint(format!(
            "checkpoint separates {} sources, manifest has {}",
            model.num_speakers(),
            manifest.num_sources
        )));
    }
    let opts = InferenceOptions::from_features(&ckpt.config.feature_options, ckpt.seed)?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::invalid(format!("no {split:?} entries in manifest")));
    }
    exec::try_map_with(Exec::default(), &entries, |e| {
        let id = e.utt_id();
        let mix = read_wav(manifest.resolve(&e.mix))?;
        let res = separate(&mix, &model, &store, &opts)?;
        let mut files = Vec::with_capacity(res.estimates.len());
        for (k, est) in res.estimates.iter().enumerate() {
            let p = out_dir.join(estimate_file_name(&id, k));
            write_wav(&p, est)?;
            files.push(p);
        }
        Ok(SeparatedUtterance {
            id,
            method: res.method,
            files,
        })
    })
}
