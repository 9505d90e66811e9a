//! Training objectives.
//!
//! Every loss takes the model's `outputs` list and the loader's `labels`
//! list and checks their arity and shapes before doing anything else.
//!
//! | key            | outputs              | labels                                            |
//! |----------------|----------------------|---------------------------------------------------|
//! | `dc`           | `[V]`                | `[Y]`                                             |
//! | `dc_weighted`  | `[V]`                | `[Y, W]`                                          |
//! | `mi_msa`       | `[M]` or `[M1..MS]`  | `[|X|, |S1|..|SS|]`                               |
//! | `mi_tpsa`      | `[M]` or `[M1..MS]`  | `[|X|, θX, |S1|, θ1, .., |SS|, θS]`               |
//! | `chimera_msa`  | `[V, M1..MS]`        | `[Y, (W), |X|, |S1|..|SS|]`                       |
//! | `chimera_tpsa` | `[V, M1..MS]`        | `[Y, (W), |X|, θX, |S1|, θ1, .., |SS|, θS]`       |
//!
//! `V` is `B × N × D`, `Y` is `B × N × S`, `W` is `B × N`; masks and spectra
//! are `B × T × F` (a single mask output may also be `B × T × F × S`).
//! `W` appears in the chimera labels only when the weighted DC variant is
//! selected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_ALPHA: f64 = 0.975;
pub const MAX_SPEAKERS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dc,
    DcWeighted,
    MiMsa,
    MiTpsa,
    ChimeraMsa,
    ChimeraTpsa,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Dc,
        LossKind::DcWeighted,
        LossKind::MiMsa,
        LossKind::MiTpsa,
        LossKind::ChimeraMsa,
        LossKind::ChimeraTpsa,
    ];

    pub fn key(self) -> &'static str {
        match self {
            LossKind::Dc => "dc",
            LossKind::DcWeighted => "dc_weighted",
            LossKind::MiMsa => "mi_msa",
            LossKind::MiTpsa => "mi_tpsa",
            LossKind::ChimeraMsa => "chimera_msa",
            LossKind::ChimeraTpsa => "chimera_tpsa",
        }
    }

    pub fn from_key(key: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.key() == key)
            .ok_or_else(|| Error::invalid(format!("unknown loss `{key}`")))
    }

    pub fn mi_kind(self) -> Option<MiKind> {
        match self {
            LossKind::MiMsa | LossKind::ChimeraMsa => Some(MiKind::Msa),
            LossKind::MiTpsa | LossKind::ChimeraTpsa => Some(MiKind::Tpsa),
            _ => None,
        }
    }

    pub fn uses_embeddings(self) -> bool {
        !matches!(self, LossKind::MiMsa | LossKind::MiTpsa)
    }

    pub fn uses_masks(self) -> bool {
        self.mi_kind().is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiKind {
    Msa,
    Tpsa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcKind {
    #[default]
    Classic,
    Weighted,
}

/// How the mask-inference L1 sum is reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MiReduction {
    /// Divide by `B·T·F·S`: per-item sums divided by `T·F·S`, averaged over the batch.
    #[default]
    PerElement,
    /// Per-item sums averaged over the batch.
    Sum,
}

fn arity(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Arity {
            what,
            expected,
            got,
        })
    }
}

/// All `S!` permutations of `0..S` in lexicographic order.
pub fn enumerate_permutations(s: usize) -> Result<Vec<Vec<usize>>> {
    if s == 0 || s > MAX_SPEAKERS {
        return Err(Error::invalid(format!(
            "permutation enumeration supports 1..={MAX_SPEAKERS} speakers, got {s}"
        )));
    }
    let mut cur: Vec<usize> = (0..s).collect();
    let mut out = vec![cur.clone()];
    loop {
        let Some(i) = (0..s.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            break;
        };
        let j = (i + 1..s).rev().find(|&j| cur[j] > cur[i]).expect("pivot exists");
        cur.swap(i, j);
        cur[i + 1..].reverse();
        out.push(cur.clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------- deep clustering

fn dc_shapes(g: &Graph, v: Var, y: Var) -> Result<(usize, usize, usize, usize)> {
    let (sv, sy) = (g.shape(v), g.shape(y));
    if sv.len() != 3 || sy.len() != 3 {
        return Err(Error::shape("loss_dc", format!("V {sv:?}, Y {sy:?}")));
    }
    if sv[0] != sy[0] {
        return Err(Error::shape(
            "loss_dc",
            format!("batch size {} vs {}", sv[0], sy[0]),
        ));
    }
    if sv[1] != sy[1] {
        return Err(Error::shape("loss_dc", format!("bins {} vs {}", sv[1], sy[1])));
    }
    Ok((sv[0], sv[1], sv[2], sy[2]))
}

fn frobenius_sq_of_gram(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let at = g.transpose(a)?;
    let m = g.matmul(at, b)?;
    let sq = g.mul(m, m)?;
    Ok(g.sum(sq))
}

/// Batch mean of `‖VᵀV‖² − 2‖VᵀY‖² + ‖YᵀY‖²`, one item at a time.
fn dc_expanded(g: &mut Graph, v: Var, y: Var) -> Result<Var> {
    let (b, n, d, s) = dc_shapes(g, v, y)?;
    let mut terms = Vec::with_capacity(b);
    for i in 0..b {
        let vi = g.slice(v, 0, i, 1)?;
        let vi = g.reshape(vi, &[n, d])?;
        let yi = g.slice(y, 0, i, 1)?;
        let yi = g.reshape(yi, &[n, s])?;
        let vv = frobenius_sq_of_gram(g, vi, vi)?;
        let vy = frobenius_sq_of_gram(g, vi, yi)?;
        let yy = frobenius_sq_of_gram(g, yi, yi)?;
        let vy2 = g.scale(vy, 2.0);
        let t = g.sub(vv, vy2)?;
        terms.push(g.add(t, yy)?);
    }
    let flat = terms
        .iter()
        .map(|&t| g.reshape(t, &[1]))
        .collect::<Result<Vec<_>>>()?;
    let all = g.concat(&flat, 0)?;
    g.mean(all)
}

/// Classic deep-clustering loss; `outputs = [V]`, `labels = [Y]`.
pub fn loss_dc_classic(g: &mut Graph, outputs: &[Var], labels: &[Var]) -> Result<Var> {
    arity("loss_dc outputs", 1, outputs.len())?;
    arity("loss_dc labels", 1, labels.len())?;
    dc_expanded(g, outputs[0], labels[0])
}

/// Expand `w` (`B × N`) to `B × N × width` holding `sqrt(w)`.
fn sqrt_weights(w: &Tensor, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(w.len() * width);
    for &x in w.data() {
        let r = x.max(0.0).sqrt();
        data.extend(std::iter::repeat_n(r, width));
    }
    let mut shape = w.shape().to_vec();
    shape.push(width);
    Tensor::new(shape, data).expect("sizes agree")
}

/// Voice-activity weighted deep-clustering loss; `labels = [Y, W]`.
pub fn loss_dc_weighted(g: &mut Graph, outputs: &[Var], labels: &[Var]) -> Result<Var> {
    arity("loss_dc_weighted outputs", 1, outputs.len())?;
    arity("loss_dc_weighted labels", 2, labels.len())?;
    let (v, y, w) = (outputs[0], labels[0], labels[1]);
    let (b, n, d, s) = dc_shapes(g, v, y)?;
    if g.shape(w) != [b, n] {
        return Err(Error::shape(
            "loss_dc_weighted",
            format!("W {:?}, expected [{b}, {n}]", g.shape(w)),
        ));
    }
    let wt = g.value(w).clone();
    let wv = g.constant(sqrt_weights(&wt, d));
    let wy = g.constant(sqrt_weights(&wt, s));
    let vw = g.mul(v, wv)?;
    let yw = g.mul(y, wy)?;
    dc_expanded(g, vw, yw)
}

// ---------------------------------------------------------------- mask inference

/// Outcome of the utterance-level permutation search for one batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct PitChoice {
    /// `perm[c]` is the reference assigned to output `c`.
    pub perm: Vec<usize>,
    pub cost: f64,
    /// Cost of every permutation, in lexicographic order.
    pub all_costs: Vec<f64>,
}

/// Utterance-level PIT search on plain `B × T × F` tensors.
///
/// Cost of assigning output `c` to reference `s` is
/// `Σ |mask_c ⊙ mix − target_s|` over the item's bins. Ties resolve to the
/// lexicographically first permutation.
pub fn pit_assign(
    exec: Exec,
    masks: &[Tensor],
    mix: &Tensor,
    targets: &[Tensor],
) -> Result<Vec<PitChoice>> {
    let s = masks.len();
    arity("pit_assign targets", s, targets.len())?;
    let perms = enumerate_permutations(s)?;
    let shape = mix.shape();
    if shape.is_empty() || masks.iter().chain(targets).any(|t| t.shape() != shape) {
        return Err(Error::shape("pit_assign", "masks, mixture and targets differ"));
    }
    let b = shape[0];
    let per = mix.len() / b.max(1);
    let choices = exec::map_range(exec, b, |i| {
        let r = i * per..(i + 1) * per;
        let x = &mix.data()[r.clone()];
        let mut pair = vec![0.0; s * s];
        for c in 0..s {
            let m = &masks[c].data()[r.clone()];
            for t in 0..s {
                let tgt = &targets[t].data()[r.clone()];
                pair[c * s + t] = m
                    .iter()
                    .zip(x)
                    .zip(tgt)
                    .map(|((m, x), y)| (m * x - y).abs())
                    .sum();
            }
        }
        let all_costs: Vec<f64> = perms
            .iter()
            .map(|p| p.iter().enumerate().map(|(c, &t)| pair[c * s + t]).sum())
            .collect();
        let mut best = 0;
        for (k, &cost) in all_costs.iter().enumerate() {
            if cost < all_costs[best] {
                best = k;
            }
        }
        PitChoice {
            perm: perms[best].clone(),
            cost: all_costs[best],
            all_costs,
        }
    });
    Ok(choices)
}

/// `cos(d)` evaluated as `sin(π/2 − |d|)` after wrapping `d` into
/// `[−π, π]`, which is exact at multiples of a quarter turn.
fn phase_cos(d: f64) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI, TAU};
    let d = if d > PI {
        d - TAU
    } else if d < -PI {
        d + TAU
    } else {
        d
    };
    (FRAC_PI_2 - d.abs()).sin()
}

/// Truncated phase-sensitive target `clamp(|S| cos(θX − θS), 0, |X|)`.
pub fn tpsa_target(mix_mag: &Tensor, mix_phase: &Tensor, src_mag: &Tensor, src_phase: &Tensor) -> Result<Tensor> {
    let shape = mix_mag.shape();
    if [mix_phase, src_mag, src_phase].iter().any(|t| t.shape() != shape) {
        return Err(Error::shape("tpsa_target", "spectra differ in shape"));
    }
    let data = (0..mix_mag.len())
        .map(|i| {
            let v = src_mag.data()[i] * phase_cos(mix_phase.data()[i] - src_phase.data()[i]);
            v.clamp(0.0, mix_mag.data()[i])
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Split mask outputs into one `B × T × F` var per speaker.
fn mask_vars(g: &mut Graph, outputs: &[Var], s: usize) -> Result<Vec<Var>> {
    if outputs.len() == 1 && g.shape(outputs[0]).len() == 4 {
        let m = outputs[0];
        let shape = g.shape(m).to_vec();
        arity("mask speakers", s, shape[3])?;
        (0..s)
            .map(|c| {
                let sl = g.slice(m, 3, c, 1)?;
                g.reshape(sl, &shape[..3])
            })
            .collect()
    } else {
        arity("mask outputs", s, outputs.len())?;
        Ok(outputs.to_vec())
    }
}

fn mi_loss(
    g: &mut Graph,
    masks: &[Var],
    mix: Var,
    targets: Vec<Tensor>,
    reduction: MiReduction,
) -> Result<Var> {
    let s = masks.len();
    let shape = g.shape(mix).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("loss_mi", format!("mixture {shape:?}")));
    }
    for &m in masks {
        if g.shape(m) != shape.as_slice() {
            return Err(Error::shape(
                "loss_mi",
                format!("mask {:?} vs mixture {shape:?}", g.shape(m)),
            ));
        }
    }
    let mask_vals: Vec<Tensor> = masks.iter().map(|&m| g.value(m).clone()).collect();
    let choices = pit_assign(Exec::default(), &mask_vals, g.value(mix), &targets)?;
    let (b, per) = (shape[0], shape[1] * shape[2]);
    let mut total: Option<Var> = None;
    for (c, &m) in masks.iter().enumerate() {
        let mut tgt = Vec::with_capacity(b * per);
        for (i, ch) in choices.iter().enumerate() {
            tgt.extend_from_slice(&targets[ch.perm[c]].data()[i * per..(i + 1) * per]);
        }
        let tgt = g.constant(Tensor::new(shape.clone(), tgt)?);
        let est = g.mul(m, mix)?;
        let diff = g.sub(est, tgt)?;
        let a = g.abs(diff);
        let sum = g.sum(a);
        total = Some(match total {
            Some(t) => g.add(t, sum)?,
            None => sum,
        });
    }
    let total = total.expect("at least one speaker");
    let denom = match reduction {
        MiReduction::PerElement => (b * per * s) as f64,
        MiReduction::Sum => b as f64,
    };
    Ok(g.scale(total, 1.0 / denom))
}

fn msa_parts(g: &Graph, labels: &[Var]) -> Result<(Var, Vec<Tensor>)> {
    let s = labels.len().saturating_sub(1);
    if s == 0 {
        return Err(Error::Arity {
            what: "loss_mi_msa labels",
            expected: 2,
            got: labels.len(),
        });
    }
    Ok((labels[0], labels[1..].iter().map(|&l| g.value(l).clone()).collect()))
}

fn tpsa_parts(g: &Graph, labels: &[Var]) -> Result<(Var, Vec<Tensor>)> {
    if labels.len() < 4 || labels.len() % 2 != 0 {
        return Err(Error::invalid(format!(
            "loss_mi_tpsa needs [|X|, θX, (|S|, θ) per speaker], got {} labels (missing phase?)",
            labels.len()
        )));
    }
    let (mix, mix_ph) = (g.value(labels[0]), g.value(labels[1]));
    let targets = labels[2..]
        .chunks(2)
        .map(|p| tpsa_target(mix, mix_ph, g.value(p[0]), g.value(p[1])))
        .collect::<Result<Vec<_>>>()?;
    Ok((labels[0], targets))
}

/// PIT mask-inference loss with an explicit target kind and reduction.
pub fn loss_mi(
    g: &mut Graph,
    kind: MiKind,
    outputs: &[Var],
    labels: &[Var],
    reduction: MiReduction,
) -> Result<Var> {
    let (mix, targets) = match kind {
        MiKind::Msa => msa_parts(g, labels)?,
        MiKind::Tpsa => tpsa_parts(g, labels)?,
    };
    let masks = mask_vars(g, outputs, targets.len())?;
    mi_loss(g, &masks, mix, targets, reduction)
}

/// Magnitude spectrum approximation with utterance-level PIT and L1 distance.
pub fn loss_mi_msa(g: &mut Graph, outputs: &[Var], labels: &[Var]) -> Result<Var> {
    loss_mi(g, MiKind::Msa, outputs, labels, MiReduction::PerElement)
}

/// Truncated phase-sensitive approximation with utterance-level PIT.
pub fn loss_mi_tpsa(g: &mut Graph, outputs: &[Var], labels: &[Var]) -> Result<Var> {
    loss_mi(g, MiKind::Tpsa, outputs, labels, MiReduction::PerElement)
}

// ---------------------------------------------------------------- chimera

/// `α · L_DC / N + (1 − α) · L_MI` with `N` the number of T-F bins per chunk.
pub fn loss_chimera(
    g: &mut Graph,
    outputs: &[Var],
    labels: &[Var],
    alpha: f64,
    mi_kind: MiKind,
    dc_kind: DcKind,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("chimera alpha {alpha} outside [0, 1]")));
    }
    if outputs.len() < 2 {
        return Err(Error::Arity {
            what: "loss_chimera outputs",
            expected: 3,
            got: outputs.len(),
        });
    }
    let s = outputs.len() - 1;
    let dc_labels = match dc_kind {
        DcKind::Classic => 1,
        DcKind::Weighted => 2,
    };
    let mi_labels = match mi_kind {
        MiKind::Msa => 1 + s,
        MiKind::Tpsa => 2 + 2 * s,
    };
    arity("loss_chimera labels", dc_labels + mi_labels, labels.len())?;
    let v = outputs[0];
    let n = *g
        .shape(v)
        .get(1)
        .ok_or_else(|| Error::shape("loss_chimera", "embedding must be B×N×D"))?;
    let dc = match dc_kind {
        DcKind::Classic => loss_dc_classic(g, &outputs[..1], &labels[..1])?,
        DcKind::Weighted => loss_dc_weighted(g, &outputs[..1], &labels[..2])?,
    };
    let mi = loss_mi(
        g,
        mi_kind,
        &outputs[1..],
        &labels[dc_labels..],
        MiReduction::PerElement,
    )?;
    let dc = g.scale(dc, alpha);
    let n = g.constant(Tensor::scalar(n as f64));
    let dc = g.div(dc, n)?;
    let mi = g.scale(mi, 1.0 - alpha);
    g.add(dc, mi)
}

/// A configured objective, selected by its string key.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Loss {
    pub kind: LossKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub chimera_dc: DcKind,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl Loss {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            alpha: DEFAULT_ALPHA,
            chimera_dc: DcKind::Classic,
        }
    }

    /// Whether the labels carry voice-activity weights.
    pub fn needs_weights(&self) -> bool {
        match self.kind {
            LossKind::DcWeighted => true,
            LossKind::ChimeraMsa | LossKind::ChimeraTpsa => self.chimera_dc == DcKind::Weighted,
            _ => false,
        }
    }

    pub fn label_arity(&self, s: usize) -> usize {
        let dc = if self.kind.uses_embeddings() {
            1 + usize::from(self.needs_weights())
        } else {
            0
        };
        let mi = match self.kind.mi_kind() {
            Some(MiKind::Msa) => 1 + s,
            Some(MiKind::Tpsa) => 2 + 2 * s,
            None => 0,
        };
        dc + mi
    }

    pub fn compute(&self, g: &mut Graph, outputs: &[Var], labels: &[Var]) -> Result<Var> {
        match self.kind {
            LossKind::Dc => loss_dc_classic(g, outputs, labels),
            LossKind::DcWeighted => loss_dc_weighted(g, outputs, labels),
            LossKind::MiMsa => loss_mi_msa(g, outputs, labels),
            LossKind::MiTpsa => loss_mi_tpsa(g, outputs, labels),
            LossKind::ChimeraMsa => {
                loss_chimera(g, outputs, labels, self.alpha, MiKind::Msa, self.chimera_dc)
            }
            LossKind::ChimeraTpsa => {
                loss_chimera(g, outputs, labels, self.alpha, MiKind::Tpsa, self.chimera_dc)
            }
        }
    }
}
