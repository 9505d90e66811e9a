//! Independent reference computations shared by the integration tests and
//! the acceptance runner. Nothing here calls the code under test for the
//! quantity being checked.
#![allow(dead_code)]

pub mod criteria;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfsep::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// `B × N × S` one-hot labels with uniformly drawn speakers.
pub fn one_hot(r: &mut ChaCha8Rng, b: usize, n: usize, s: usize) -> Tensor {
    let mut data = vec![0.0; b * n * s];
    for row in data.chunks_mut(s) {
        row[r.random_range(0..s)] = 1.0;
    }
    Tensor::new(vec![b, n, s], data).unwrap()
}

/// Binary `B × N` weights.
pub fn binary(r: &mut ChaCha8Rng, b: usize, n: usize) -> Tensor {
    Tensor::new(vec![b, n], (0..b * n).map(|_| f64::from(r.random_range(0..2u8))).collect()).unwrap()
}

/// `Σ_b Σ_ij w_i w_j (v_i·v_j − y_i·y_j)² / B` by forming both affinity matrices.
pub fn naive_dc(v: &Tensor, y: &Tensor, w: Option<&Tensor>) -> f64 {
    let (b, n, d) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let s = y.shape()[2];
    let mut total = 0.0;
    for bi in 0..b {
        let vr = |i: usize| &v.data()[(bi * n + i) * d..][..d];
        let yr = |i: usize| &y.data()[(bi * n + i) * s..][..s];
        let wt = |i: usize| w.map_or(1.0, |w| w.data()[bi * n + i]);
        let mut item = 0.0;
        for i in 0..n {
            for j in 0..n {
                let a: f64 = vr(i).iter().zip(vr(j)).map(|(p, q)| p * q).sum();
                let c: f64 = yr(i).iter().zip(yr(j)).map(|(p, q)| p * q).sum();
                item += wt(i) * wt(j) * (a - c) * (a - c);
            }
        }
        total += item;
    }
    total / b as f64
}

/// All permutations of `0..s`, generated recursively (order irrelevant).
pub fn all_perms(s: usize) -> Vec<Vec<usize>> {
    fn go(rest: &mut Vec<usize>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(cur.clone());
            return;
        }
        for k in 0..rest.len() {
            let x = rest.remove(k);
            cur.push(x);
            go(rest, cur, out);
            cur.pop();
            rest.insert(k, x);
        }
    }
    let mut out = Vec::new();
    go(&mut (0..s).collect(), &mut Vec::new(), &mut out);
    out
}

/// L1 cost of one item under one assignment `perm[c] = target index`.
pub fn assignment_cost(masks: &[Tensor], mix: &Tensor, targets: &[Tensor], item: usize, perm: &[usize]) -> f64 {
    let per = mix.len() / mix.shape()[0];
    let r = item * per..(item + 1) * per;
    perm.iter()
        .enumerate()
        .map(|(c, &t)| {
            r.clone()
                .map(|i| (masks[c].data()[i] * mix.data()[i] - targets[t].data()[i]).abs())
                .sum::<f64>()
        })
        .sum()
}

/// Utterance-level PIT loss normalised by `B·T·F·S`; `perm = None` searches
/// all assignments, `Some(p)` fixes one for every item.
pub fn naive_mi(masks: &[Tensor], mix: &Tensor, targets: &[Tensor], perm: Option<&[usize]>) -> f64 {
    let s = masks.len();
    let b = mix.shape()[0];
    let mut total = 0.0;
    for item in 0..b {
        total += match perm {
            Some(p) => assignment_cost(masks, mix, targets, item, p),
            None => all_perms(s)
                .iter()
                .map(|p| assignment_cost(masks, mix, targets, item, p))
                .fold(f64::INFINITY, f64::min),
        };
    }
    total / (mix.len() * s) as f64
}

/// `clamp(|S| cos(θX − θS), 0, |X|)` with the library's own `cos`.
pub fn naive_tpsa(mix: f64, mix_ph: f64, src: f64, src_ph: f64) -> f64 {
    (src * (mix_ph - src_ph).cos()).clamp(0.0, mix)
}

/// SNR in dB of `est` against `reference` over `range`.
pub fn snr_db(reference: &[f64], est: &[f64], range: std::ops::Range<usize>) -> f64 {
    let (mut sig, mut err) = (0.0, 0.0);
    for i in range {
        sig += reference[i] * reference[i];
        err += (reference[i] - est[i]).powi(2);
    }
    10.0 * (sig / err).log10()
}
