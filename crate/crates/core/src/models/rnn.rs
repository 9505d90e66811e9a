//! Recurrent layers unrolled over time from core graph ops.
//!
//! Sequences are kept time-major as `(T·B) × features` so that the input
//! projection for all steps is a single matmul and each step's slice is a
//! contiguous row block.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Lstm,
    Gru,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` bound.
pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

pub(crate) fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// Affine map `x·W + b` on the last axis of a 2-D input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = init_bound(input);
        Ok(Self {
            w: store.add(format!("{name}.w"), uniform(rng, &[input, output], bound))?,
            b: store.add(format!("{name}.b"), uniform(rng, &[output], bound))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
struct Direction {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

impl Direction {
    fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cell: CellKind,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let g = cell.gates() * hidden;
        let bound = init_bound(hidden);
        Ok(Self {
            w_ih: store.add(format!("{name}.w_ih"), uniform(rng, &[input, g], bound))?,
            w_hh: store.add(format!("{name}.w_hh"), uniform(rng, &[hidden, g], bound))?,
            b_ih: store.add(format!("{name}.b_ih"), uniform(rng, &[g], bound))?,
            b_hh: store.add(format!("{name}.b_hh"), uniform(rng, &[g], bound))?,
        })
    }

    /// Run over `x` (`(T·B) × I`, time-major); returns `(T·B) × H`.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cell: CellKind,
        x: Var,
        frames: usize,
        batch: usize,
        hidden: usize,
        reverse: bool,
    ) -> Result<Var> {
        let w_ih = g.param(store, self.w_ih);
        let w_hh = g.param(store, self.w_hh);
        let b_ih = g.param(store, self.b_ih);
        let b_hh = g.param(store, self.b_hh);
        let proj = g.matmul(x, w_ih)?;
        let proj = g.add_bias(proj, b_ih)?;
        let mut h = g.constant(Tensor::zeros(&[batch, hidden]));
        let mut c = g.constant(Tensor::zeros(&[batch, hidden]));
        let mut outs = Vec::with_capacity(frames);
        for step in 0..frames {
            let t = if reverse { frames - 1 - step } else { step };
            let xt = g.slice(proj, 0, t * batch, batch)?;
            let rec = g.matmul(h, w_hh)?;
            let rec = g.add_bias(rec, b_hh)?;
            h = match cell {
                CellKind::Lstm => {
                    let gates = g.add(xt, rec)?;
                    let i = g.slice(gates, 1, 0, hidden)?;
                    let f = g.slice(gates, 1, hidden, hidden)?;
                    let cand = g.slice(gates, 1, 2 * hidden, hidden)?;
                    let o = g.slice(gates, 1, 3 * hidden, hidden)?;
                    let i = g.sigmoid(i);
                    let f = g.sigmoid(f);
                    let cand = g.tanh(cand);
                    let o = g.sigmoid(o);
                    let keep = g.mul(f, c)?;
                    let write = g.mul(i, cand)?;
                    c = g.add(keep, write)?;
                    let tc = g.tanh(c);
                    g.mul(o, tc)?
                }
                CellKind::Gru => {
                    let xr = g.slice(xt, 1, 0, hidden)?;
                    let xz = g.slice(xt, 1, hidden, hidden)?;
                    let xn = g.slice(xt, 1, 2 * hidden, hidden)?;
                    let hr = g.slice(rec, 1, 0, hidden)?;
                    let hz = g.slice(rec, 1, hidden, hidden)?;
                    let hn = g.slice(rec, 1, 2 * hidden, hidden)?;
                    let r = g.add(xr, hr)?;
                    let r = g.sigmoid(r);
                    let z = g.add(xz, hz)?;
                    let z = g.sigmoid(z);
                    let gated = g.mul(r, hn)?;
                    let n = g.add(xn, gated)?;
                    let n = g.tanh(n);
                    // h' = (1 - z)·n + z·h = n + z·(h - n)
                    let d = g.sub(h, n)?;
                    let zd = g.mul(z, d)?;
                    g.add(n, zd)?
                }
            };
            outs.push(h);
        }
        if reverse {
            outs.reverse();
        }
        g.concat(&outs, 0)
    }
}

/// Stack of bidirectional recurrent layers with dropout between layers.
#[derive(Clone, Debug)]
pub struct BiRnn {
    cell: CellKind,
    hidden: usize,
    dropout: f64,
    layers: Vec<(Direction, Direction)>,
}

impl BiRnn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cell: CellKind,
        input: usize,
        hidden: usize,
        num_layers: usize,
        dropout: f64,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let inp = if l == 0 { input } else { 2 * hidden };
            let fwd = Direction::new(store, rng, &format!("{name}.l{l}.fwd"), cell, inp, hidden)?;
            let bwd = Direction::new(store, rng, &format!("{name}.l{l}.bwd"), cell, inp, hidden)?;
            layers.push((fwd, bwd));
        }
        Ok(Self {
            cell,
            hidden,
            dropout,
            layers,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// `x` is `(T·B) × I` time-major; returns `(T·B) × 2H`. Dropout is
    /// applied between layers when `dropout_rng` is given.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: Var,
        frames: usize,
        batch: usize,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        for (l, (fwd, bwd)) in self.layers.iter().enumerate() {
            if l > 0 && self.dropout > 0.0 {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    let keep = 1.0 - self.dropout;
                    let mask = Tensor::from_fn(g.shape(x), |_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    let m = g.constant(mask);
                    x = g.mul(x, m)?;
                }
            }
            let hf = fwd.forward(g, store, self.cell, x, frames, batch, self.hidden, false)?;
            let hb = bwd.forward(g, store, self.cell, x, frames, batch, self.hidden, true)?;
            x = g.concat(&[hf, hb], 1)?;
        }
        Ok(x)
    }
}
