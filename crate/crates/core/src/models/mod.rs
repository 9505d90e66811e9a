//! Mask-estimation and embedding networks.
//!
//! All three networks share the same bidirectional recurrent trunk over
//! normalised log-magnitude frames and differ only in their heads:
//!
//! * `upit`: linear → sigmoid → `[M]`, `M` shaped `B × T × F × S`.
//! * `dc`: linear → tanh → per-bin L2 normalisation → `[V]`, `B × (T·F) × D`.
//! * `chimera`: both heads on one trunk → `[V, M1, .., MS]`.

mod rnn;

pub use rnn::{init_bound, BiRnn, CellKind, Linear};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::rng::{self, Rng};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dc,
    Upit,
    Chimera,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Dc, ModelKind::Upit, ModelKind::Chimera];

    pub fn key(self) -> &'static str {
        match self {
            ModelKind::Dc => "dc",
            ModelKind::Upit => "upit",
            ModelKind::Chimera => "chimera",
        }
    }

    /// Loss keys this model's outputs can feed.
    pub fn compatible_losses(self) -> &'static [LossKind] {
        match self {
            ModelKind::Dc => &[LossKind::Dc, LossKind::DcWeighted],
            ModelKind::Upit => &[LossKind::MiMsa, LossKind::MiTpsa],
            ModelKind::Chimera => &[LossKind::ChimeraMsa, LossKind::ChimeraTpsa],
        }
    }

    pub fn is_compatible(self, loss: LossKind) -> bool {
        self.compatible_losses().contains(&loss)
    }

    pub fn has_mask_head(self) -> bool {
        !matches!(self, ModelKind::Dc)
    }

    pub fn has_embedding_head(self) -> bool {
        !matches!(self, ModelKind::Upit)
    }

    pub fn output_arity(self, num_speakers: usize) -> usize {
        match self {
            ModelKind::Dc | ModelKind::Upit => 1,
            ModelKind::Chimera => 1 + num_speakers,
        }
    }
}

/// Fixed affine normalisation applied to the dB features before the trunk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for InputNorm {
    fn default() -> Self {
        Self {
            mean: -40.0,
            std: 40.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub dropout: f64,
    pub num_speakers: usize,
    pub embedding_dim: usize,
    pub cell: CellKind,
    pub input_norm: InputNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 129,
            output_dim: 129,
            hidden_dim: 300,
            num_layers: 3,
            dropout: 0.3,
            num_speakers: 2,
            embedding_dim: 20,
            cell: CellKind::Lstm,
            input_norm: InputNorm::default(),
        }
    }
}

impl ModelConfig {
    /// CPU-sized configuration: 2 layers of 64 hidden units.
    pub fn desk() -> Self {
        Self {
            hidden_dim: 64,
            num_layers: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.input_dim == 0 || self.input_dim != self.output_dim {
            return bad(format!(
                "input_dim {} and output_dim {} must be equal and positive",
                self.input_dim, self.output_dim
            ));
        }
        if self.hidden_dim == 0 || self.num_layers == 0 {
            return bad("hidden_dim and num_layers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.num_speakers == 0 || self.embedding_dim == 0 {
            return bad("num_speakers and embedding_dim must be positive".into());
        }
        if !(self.input_norm.std > 0.0) {
            return bad("input_norm.std must be positive".into());
        }
        Ok(())
    }
}

/// A network definition bound to parameter ids in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    kind: ModelKind,
    config: ModelConfig,
    trunk: BiRnn,
    mask_head: Option<Linear>,
    embedding_head: Option<Linear>,
}

/// Build a model and draw its parameters from the seeded init stream.
pub fn init_parameters(kind: ModelKind, config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = rng::stream(seed, rng::tags::INIT);
    let model = Model::build(kind, config, &mut store, &mut rng)?;
    Ok((model, store))
}

impl Model {
    fn build(kind: ModelKind, config: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let trunk = BiRnn::new(
            store,
            rng,
            "trunk",
            config.cell,
            config.input_dim,
            config.hidden_dim,
            config.num_layers,
            config.dropout,
        )?;
        let width = trunk.output_dim();
        let embedding_head = kind
            .has_embedding_head()
            .then(|| {
                Linear::new(
                    store,
                    rng,
                    "head_emb",
                    width,
                    config.output_dim * config.embedding_dim,
                )
            })
            .transpose()?;
        let mask_head = kind
            .has_mask_head()
            .then(|| {
                Linear::new(
                    store,
                    rng,
                    "head_mask",
                    width,
                    config.output_dim * config.num_speakers,
                )
            })
            .transpose()?;
        Ok(Self {
            kind,
            config: config.clone(),
            trunk,
            mask_head,
            embedding_head,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_speakers(&self) -> usize {
        self.config.num_speakers
    }

    /// Forward pass. `inputs` must be exactly `[log_mag]` with shape
    /// `B × T × F`. Passing `dropout_rng` enables training-mode dropout.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[Var],
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Vec<Var>> {
        if inputs.len() != 1 {
            return Err(Error::Arity {
                what: "model inputs",
                expected: 1,
                got: inputs.len(),
            });
        }
        let shape = g.shape(inputs[0]).to_vec();
        if shape.len() != 3 || shape[2] != self.config.input_dim || shape[1] == 0 {
            return Err(Error::shape(
                "model input",
                format!("expected B×T×{}, got {shape:?}", self.config.input_dim),
            ));
        }
        let (b, t, f) = (shape[0], shape[1], shape[2]);
        let norm = self.config.input_norm;
        let x = {
            let v = g.value(inputs[0]);
            let mut tm = vec![0.0; v.len()];
            // B×T×F -> T×B×F, normalised
            for bi in 0..b {
                for ti in 0..t {
                    let src = &v.data()[(bi * t + ti) * f..][..f];
                    let dst = &mut tm[(ti * b + bi) * f..][..f];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = (s - norm.mean) / norm.std;
                    }
                }
            }
            Tensor::new(vec![t * b, f], tm)?
        };
        let x = g.constant(x);
        let h = self.trunk.forward(g, store, x, t, b, dropout_rng)?;
        let s = self.config.num_speakers;
        let fo = self.config.output_dim;

        let embedding = match &self.embedding_head {
            Some(head) => {
                let d = self.config.embedding_dim;
                let e = head.forward(g, store, h)?;
                let e = g.tanh(e);
                let e = g.reshape(e, &[t, b, fo, d])?;
                let e = g.permute(e, &[1, 0, 2, 3])?;
                let e = g.normalize_last(e, NORM_EPS)?;
                Some(g.reshape(e, &[b, t * fo, d])?)
            }
            None => None,
        };
        let masks = match &self.mask_head {
            Some(head) => {
                let m = head.forward(g, store, h)?;
                let m = g.sigmoid(m);
                let m = g.reshape(m, &[t, b, fo, s])?;
                Some(g.permute(m, &[1, 0, 2, 3])?)
            }
            None => None,
        };
        Ok(match self.kind {
            ModelKind::Dc => vec![embedding.expect("dc has an embedding head")],
            ModelKind::Upit => vec![masks.expect("upit has a mask head")],
            ModelKind::Chimera => {
                let m = masks.expect("chimera has a mask head");
                let mut out = vec![embedding.expect("chimera has an embedding head")];
                for c in 0..s {
                    let mc = g.slice(m, 3, c, 1)?;
                    out.push(g.reshape(mc, &[b, t, fo])?);
                }
                out
            }
        })
    }

    /// Inference-mode forward pass returning plain tensors.
    pub fn infer(&self, store: &ParamStore, features: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let outs = self.forward(&mut g, store, &[x], None)?;
        Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Per-speaker masks (`B × T × F` each) from inference outputs.
    pub fn masks_from_outputs(&self, outputs: &[Tensor]) -> Result<Vec<Tensor>> {
        match self.kind {
            ModelKind::Dc => Err(Error::invalid("model has no mask head")),
            ModelKind::Chimera => Ok(outputs[1..].to_vec()),
            ModelKind::Upit => {
                let m = &outputs[0];
                let sh = m.shape();
                let (lead, s) = (sh[0] * sh[1] * sh[2], sh[3]);
                (0..s)
                    .map(|c| {
                        let data = (0..lead).map(|i| m.data()[i * s + c]).collect();
                        Tensor::new(sh[..3].to_vec(), data)
                    })
                    .collect()
            }
        }
    }
}

/// Number of scalar weights whose name starts with `prefix`.
pub fn count_params(store: &ParamStore, prefix: &str) -> usize {
    store
        .iter()
        .filter(|p| p.name().starts_with(prefix))
        .map(|p| p.value().len())
        .sum()
}
