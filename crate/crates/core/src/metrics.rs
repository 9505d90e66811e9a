//! Permutation-aligned SDR evaluation.
//!
//! SDR here is projection based: the estimate is split into its projection
//! onto the reference and a residual, over the whole utterance.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::read_wav;
use crate::data::{Manifest, Split};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::losses::enumerate_permutations;

/// Upper bound on reported SDR; exact reconstructions would otherwise be infinite.
pub const SDR_CAP_DB: f64 = 60.0;

/// Projection SDR in dB, clamped to `[-SDR_CAP_DB, SDR_CAP_DB]`.
pub fn sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::shape(
            "sdr",
            format!("estimate has {} samples, reference {}", estimate.len(), reference.len()),
        ));
    }
    let rr: f64 = reference.iter().map(|r| r * r).sum();
    if rr == 0.0 {
        return Err(Error::domain("sdr", "reference is all zero"));
    }
    let er: f64 = estimate.iter().zip(reference).map(|(e, r)| e * r).sum();
    let alpha = er / rr;
    let (mut target, mut resid) = (0.0, 0.0);
    for (e, r) in estimate.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        resid += (e - t) * (e - t);
    }
    let db = if resid == 0.0 {
        SDR_CAP_DB
    } else if target == 0.0 {
        -SDR_CAP_DB
    } else {
        10.0 * (target / resid).log10()
    };
    Ok(db.clamp(-SDR_CAP_DB, SDR_CAP_DB))
}

/// Best assignment of estimates to references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pairing {
    /// `perm[k]` is the estimate matched to reference `k`.
    pub perm: Vec<usize>,
    /// SDR of each reference under `perm`.
    pub sdr: Vec<f64>,
    pub mean: f64,
}

/// Try every assignment, keep the one with the highest mean SDR. Ties keep
/// the lexicographically first permutation.
pub fn eval_pairing(estimates: &[&[f64]], references: &[&[f64]]) -> Result<Pairing> {
    let s = references.len();
    if estimates.len() != s {
        return Err(Error::Arity {
            what: "estimates",
            expected: s,
            got: estimates.len(),
        });
    }
    if s == 0 {
        return Err(Error::invalid("eval_pairing needs at least one reference"));
    }
    // table[k][j]: reference k scored against estimate j
    let table = references
        .iter()
        .map(|r| estimates.iter().map(|e| sdr(e, r)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<Pairing> = None;
    for perm in enumerate_permutations(s)? {
        let scores: Vec<f64> = perm.iter().enumerate().map(|(k, &j)| table[k][j]).collect();
        let mean = scores.iter().sum::<f64>() / s as f64;
        if best.as_ref().is_none_or(|b| mean > b.mean) {
            best = Some(Pairing {
                perm,
                sdr: scores,
                mean,
            });
        }
    }
    Ok(best.expect("at least one permutation"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttReport {
    pub id: String,
    pub perm: Vec<usize>,
    pub sdr: Vec<f64>,
    pub mean_sdr: f64,
    /// Mean SDR with the mixture used as every estimate.
    pub baseline_sdr: f64,
    pub improvement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: Vec<UttReport>,
    pub mean_sdr: f64,
    pub baseline_sdr: f64,
    pub improvement: f64,
}

impl EvalReport {
    pub fn from_utterances(utterances: Vec<UttReport>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::invalid("no utterances to report"));
        }
        let n = utterances.len() as f64;
        let mean_sdr = utterances.iter().map(|u| u.mean_sdr).sum::<f64>() / n;
        let baseline_sdr = utterances.iter().map(|u| u.baseline_sdr).sum::<f64>() / n;
        Ok(Self {
            utterances,
            mean_sdr,
            baseline_sdr,
            improvement: mean_sdr - baseline_sdr,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table, one row per utterance plus a mean row.
    pub fn to_table(&self) -> String {
        let width = self
            .utterances
            .iter()
            .map(|u| u.id.len())
            .max()
            .unwrap_or(0)
            .max(9);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>9}  sources",
            "utterance", "sdr", "mixture", "gain"
        );
        for u in &self.utterances {
            let per: Vec<String> = u.sdr.iter().map(|v| format!("{v:.2}")).collect();
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.2}  {:>9.2}  {:>9.2}  {}",
                u.id,
                u.mean_sdr,
                u.baseline_sdr,
                u.improvement,
                per.join(" ")
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.2}  {:>9.2}  {:>9.2}",
            "mean", self.mean_sdr, self.baseline_sdr, self.improvement
        );
        out
    }
}

/// Score one utterance. Signals are trimmed to the shortest length first,
/// since reconstruction drops the samples the last frame does not cover.
pub fn eval_utterance(
    id: &str,
    estimates: &[&[f64]],
    references: &[&[f64]],
    mixture: &[f64],
) -> Result<UttReport> {
    let len = estimates
        .iter()
        .chain(references)
        .map(|x| x.len())
        .chain(std::iter::once(mixture.len()))
        .min()
        .unwrap_or(0);
    let est: Vec<&[f64]> = estimates.iter().map(|x| &x[..len]).collect();
    let refs: Vec<&[f64]> = references.iter().map(|x| &x[..len]).collect();
    let mix = &mixture[..len];
    let p = eval_pairing(&est, &refs)?;
    let base = refs
        .iter()
        .map(|r| sdr(mix, r))
        .collect::<Result<Vec<_>>>()?;
    let baseline_sdr = base.iter().sum::<f64>() / base.len() as f64;
    Ok(UttReport {
        id: id.to_string(),
        perm: p.perm,
        sdr: p.sdr,
        mean_sdr: p.mean,
        baseline_sdr,
        improvement: p.mean - baseline_sdr,
    })
}

/// File name of estimate `k` (0-based) for an utterance.
pub fn estimate_file_name(utt_id: &str, k: usize) -> String {
    format!("{utt_id}_s{}.wav", k + 1)
}

/// Evaluate every entry of `split` against `<utt>_s<k>.wav` files in `estimates_dir`.
pub fn eval_corpus(manifest: &Manifest, split: Split, estimates_dir: impl AsRef<Path>) -> Result<EvalReport> {
    let dir = estimates_dir.as_ref();
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::invalid(format!("no {split:?} entries in manifest")));
    }
    let paths: Vec<Vec<PathBuf>> = entries
        .iter()
        .map(|e| {
            (0..manifest.num_sources)
                .map(|k| dir.join(estimate_file_name(&e.utt_id(), k)))
                .collect()
        })
        .collect();
    let missing: Vec<String> = entries
        .iter()
        .zip(&paths)
        .filter(|(_, ps)| ps.iter().any(|p| !p.exists()))
        .map(|(e, _)| e.utt_id())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingEstimates(missing));
    }
    let jobs: Vec<_> = entries.iter().zip(&paths).collect();
    let utterances = exec::try_map_with(Exec::default(), &jobs, |(e, ps)| {
        let triple = manifest.read_entry(e)?;
        let est = ps.iter().map(read_wav).collect::<Result<Vec<_>>>()?;
        let est: Vec<&[f64]> = est.iter().map(|w| w.samples()).collect();
        let refs: Vec<&[f64]> = triple.sources.iter().map(|w| w.samples()).collect();
        eval_utterance(&triple.id, &est, &refs, triple.mixture.samples())
    })?;
    EvalReport::from_utterances(utterances)
}
