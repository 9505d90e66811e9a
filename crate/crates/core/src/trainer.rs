//! Optimise, validate, stop early, checkpoint.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{build_loader, Batch, DataLoader, Manifest, Split};
use crate::error::{Error, Result};
use crate::losses::Loss;
use crate::models::{init_parameters, Model, ModelConfig, ModelKind};
use crate::rng;
use crate::tensor::{clip_gradients, Adam, AdamState, Graph, ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const BEST_CHECKPOINT: &str = "best.json";
pub const LATEST_CHECKPOINT: &str = "latest.json";
pub const METRICS_LOG: &str = "metrics.jsonl";

/// Patience counter over validation losses. Only a strict decrease below
/// the best value seen so far counts as improvement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    /// Record one epoch's validation loss; returns whether it improved.
    pub fn observe(&mut self, epoch: usize, valid_loss: f64) -> bool {
        let improved = self.best.is_none_or(|b| valid_loss < b);
        if improved {
            self.best = Some(valid_loss);
            self.best_epoch = epoch;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.since_improvement >= self.patience
    }
}

/// One epoch of work as seen by [`run_schedule`].
pub trait EpochRunner {
    /// Train for epoch `epoch` (1-based) and return the validation loss.
    fn run_epoch(&mut self, epoch: usize) -> Result<f64>;

    /// Called after the stopper has seen the epoch's loss.
    fn end_epoch(&mut self, _epoch: usize, _stopper: &EarlyStopping, _improved: bool) -> Result<()> {
        Ok(())
    }
}

/// Run epochs `first..=max_epochs` until patience runs out. Returns the
/// last epoch run.
pub fn run_schedule(
    runner: &mut impl EpochRunner,
    stopper: &mut EarlyStopping,
    first: usize,
    max_epochs: usize,
) -> Result<usize> {
    let mut last = first.saturating_sub(1);
    for epoch in first..=max_epochs {
        let valid = runner.run_epoch(epoch)?;
        let improved = stopper.observe(epoch, valid);
        runner.end_epoch(epoch, stopper, improved)?;
        last = epoch;
        if stopper.should_stop() {
            break;
        }
    }
    Ok(last)
}

/// Mean of per-batch losses weighted by batch size.
pub fn weighted_mean(losses: &[(f64, usize)]) -> Result<f64> {
    let n: usize = losses.iter().map(|&(_, b)| b).sum();
    if n == 0 {
        return Err(Error::invalid("no batches to average"));
    }
    Ok(losses.iter().map(|&(l, b)| l * b as f64).sum::<f64>() / n as f64)
}

fn batch_loss(g: &mut Graph, model: &Model, store: &ParamStore, loss: &Loss, batch: &Batch, dropout: Option<&mut rng::Rng>) -> Result<crate::tensor::Var> {
    let inputs: Vec<_> = batch.inputs.iter().map(|t| g.constant(t.clone())).collect();
    let labels: Vec<_> = batch.labels.iter().map(|t| g.constant(t.clone())).collect();
    let outputs = model.forward(g, store, &inputs, dropout)?;
    loss.compute(g, &outputs, &labels)
}

/// Mean validation loss, dropout off, parameters untouched.
pub fn validate(model: &Model, store: &ParamStore, loader: &DataLoader, loss: &Loss) -> Result<f64> {
    let mut losses = Vec::with_capacity(loader.num_batches());
    for batch in loader.epoch(0) {
        let mut g = Graph::new();
        let l = batch_loss(&mut g, model, store, loss, &batch, None)?;
        losses.push((g.value(l).item().unwrap_or(f64::NAN), batch.size()));
    }
    if losses.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    weighted_mean(&losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Last completed epoch.
    pub epoch: usize,
    pub stopper: EarlyStopping,
    pub optimizer: AdamState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model_key: ModelKind,
    pub model: ModelConfig,
    pub seed: u64,
    pub config: TrainConfig,
    pub params: Vec<SavedParam>,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn capture(config: &TrainConfig, store: &ParamStore, state: TrainState) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model_key: config.model_key,
            model: config.model.clone(),
            seed: config.seed,
            config: config.clone(),
            params: store
                .iter()
                .map(|p| SavedParam {
                    name: p.name().to_string(),
                    shape: p.value().shape().to_vec(),
                    values: p.value().data().to_vec(),
                })
                .collect(),
            state,
        }
    }

    /// Write via a temporary file and rename, so readers never see a partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string(self).map_err(|e| Error::json(path.display().to_string(), e))?;
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let version = serde_json::from_str::<serde_json::Value>(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
            .get("version")
            .and_then(|v| v.as_u64());
        if version != Some(u64::from(CHECKPOINT_VERSION)) {
            return Err(Error::Checkpoint(format!(
                "{}: version {version:?} is not supported (expected {CHECKPOINT_VERSION})",
                path.display()
            )));
        }
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Rebuild the model and fill its parameters. Fails without side effects
    /// if any parameter is missing, extra, or the wrong shape.
    pub fn restore(&self) -> Result<(Model, ParamStore)> {
        if self.model_key != self.config.model_key || self.model != self.config.model {
            return Err(Error::Checkpoint("model section disagrees with stored config".into()));
        }
        let (model, mut store) = init_parameters(self.model_key, &self.model, self.seed)?;
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for saved in &self.params {
            let id = store
                .id(&saved.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", saved.name)))?;
            let p = store.get_mut(id);
            if p.value().shape() != saved.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, model expects {:?}",
                    saved.name,
                    saved.shape,
                    p.value().shape()
                )));
            }
            *p.value_mut() = Tensor::new(saved.shape.clone(), saved.values.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter `{}`: {e}", saved.name)))?;
        }
        Ok((model, store))
    }
}

/// Read a checkpoint and rebuild its model.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, ParamStore, Checkpoint)> {
    let ckpt = Checkpoint::read(path)?;
    let (model, store) = ckpt.restore()?;
    Ok((model, store, ckpt))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub last_epoch: usize,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub skipped_steps: usize,
    pub records: Vec<EpochRecord>,
    pub best_checkpoint: PathBuf,
    pub latest_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
}

type Progress = Box<dyn FnMut(&EpochRecord)>;

pub struct Trainer {
    config: TrainConfig,
    model: Model,
    store: ParamStore,
    optimizer: Adam,
    loss: Loss,
    train: DataLoader,
    valid: DataLoader,
    stopper: EarlyStopping,
    start_epoch: usize,
    dir: PathBuf,
    log: Option<File>,
    records: Vec<EpochRecord>,
    skipped_steps: usize,
    progress: Option<Progress>,
}

impl Trainer {
    /// Load the manifest named by the config and set up a fresh run.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (train, valid) = loaders_for(&config)?;
        Self::from_loaders(config, train, valid)
    }

    pub fn from_loaders(config: TrainConfig, train: DataLoader, valid: DataLoader) -> Result<Self> {
        config.validate()?;
        if train.num_sources() != config.model.num_speakers {
            return Err(Error::invalid(format!(
                "corpus has {} sources, model is configured for {}",
                train.num_sources(),
                config.model.num_speakers
            )));
        }
        let (model, store) = init_parameters(config.model_key, &config.model, config.seed)?;
        Ok(Self {
            optimizer: Adam::new(config.optimizer.lr),
            loss: config.loss(),
            stopper: EarlyStopping::new(config.patience),
            start_epoch: 1,
            dir: config.checkpoint_dir(),
            log: None,
            records: Vec::new(),
            skipped_steps: 0,
            progress: None,
            config,
            model,
            store,
            train,
            valid,
        })
    }

    /// Continue from a saved checkpoint. The model section of `config`
    /// must match the checkpoint.
    pub fn resume(config: TrainConfig, checkpoint: impl AsRef<Path>) -> Result<Self> {
        config.validate()?;
        let (train, valid) = loaders_for(&config)?;
        Self::resume_with_loaders(config, checkpoint, train, valid)
    }

    pub fn resume_with_loaders(
        config: TrainConfig,
        checkpoint: impl AsRef<Path>,
        train: DataLoader,
        valid: DataLoader,
    ) -> Result<Self> {
        let (model, store, ckpt) = load_checkpoint(checkpoint)?;
        if ckpt.model_key != config.model_key || ckpt.model != config.model || ckpt.seed != config.seed {
            return Err(Error::Checkpoint("checkpoint does not match the configured model or seed".into()));
        }
        let mut t = Self::from_loaders(config, train, valid)?;
        t.model = model;
        t.store = store;
        t.optimizer.state = ckpt.state.optimizer;
        t.stopper = ckpt.state.stopper;
        t.stopper.patience = t.config.patience;
        t.start_epoch = ckpt.state.epoch + 1;
        Ok(t)
    }

    /// Callback invoked after every epoch.
    pub fn on_epoch(mut self, f: impl FnMut(&EpochRecord) + 'static) -> Self {
        self.progress = Some(Box::new(f));
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// One pass over the training batches; returns the size-weighted mean loss.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
        let [lo, hi] = self.config.optimizer.clip;
        let epoch_seed = rng::derive_seed(self.config.seed, epoch as u64);
        let mut losses = Vec::with_capacity(self.train.num_batches());
        for (bi, batch) in self.train.epoch(epoch).enumerate() {
            let mut dropout = rng::stream(rng::derive_seed(epoch_seed, bi as u64), rng::tags::DROPOUT);
            let mut g = Graph::new();
            let l = batch_loss(&mut g, &self.model, &self.store, &self.loss, &batch, Some(&mut dropout))?;
            let value = g.value(l).item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            self.store.zero_grad();
            g.backward(l, &mut self.store)?;
            clip_gradients(&mut self.store, lo, hi)?;
            match self.optimizer.step(&mut self.store) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient(_)) => self.skipped_steps += 1,
                Err(e) => return Err(e),
            }
            losses.push((value, batch.size()));
        }
        weighted_mean(&losses)
    }

    pub fn validate(&self) -> Result<f64> {
        validate(&self.model, &self.store, &self.valid, &self.loss)
    }

    fn open_log(&mut self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.dir.join(METRICS_LOG);
        let fresh = self.start_epoch == 1;
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if fresh {
            let header = serde_json::json!({
                "config": self.config,
                "lr": self.config.optimizer.lr,
            });
            writeln!(file, "{header}").map_err(|e| Error::io(&path, e))?;
        }
        self.log = Some(file);
        Ok(())
    }

    /// Run to completion or early stop.
    pub fn run(mut self) -> Result<TrainOutcome> {
        self.open_log()?;
        let mut stopper = self.stopper.clone();
        let (first, max_epochs) = (self.start_epoch, self.config.max_epochs);
        let last = if first > 1 && stopper.should_stop() {
            first - 1
        } else {
            run_schedule(&mut self, &mut stopper, first, max_epochs)?
        };
        Ok(TrainOutcome {
            last_epoch: last,
            best_epoch: stopper.best_epoch,
            best_valid_loss: stopper.best.unwrap_or(f64::NAN),
            skipped_steps: self.skipped_steps,
            records: self.records,
            best_checkpoint: self.dir.join(BEST_CHECKPOINT),
            latest_checkpoint: self.dir.join(LATEST_CHECKPOINT),
            metrics_log: self.dir.join(METRICS_LOG),
        })
    }
}

impl EpochRunner for Trainer {
    fn run_epoch(&mut self, epoch: usize) -> Result<f64> {
        let started = Instant::now();
        let train_loss = self.train_epoch(epoch)?;
        let valid_loss = self.validate()?;
        self.records.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        Ok(valid_loss)
    }

    fn end_epoch(&mut self, epoch: usize, stopper: &EarlyStopping, improved: bool) -> Result<()> {
        let state = TrainState {
            epoch,
            stopper: stopper.clone(),
            optimizer: self.optimizer.state.clone(),
        };
        let ckpt = Checkpoint::capture(&self.config, &self.store, state);
        if improved {
            ckpt.save(self.dir.join(BEST_CHECKPOINT))?;
        }
        ckpt.save(self.dir.join(LATEST_CHECKPOINT))?;
        let record = self.records.last().expect("run_epoch pushed a record");
        if let Some(log) = &mut self.log {
            let line = serde_json::to_string(record).expect("record serializes");
            writeln!(log, "{line}").map_err(|e| Error::io(self.dir.join(METRICS_LOG), e))?;
        }
        if let Some(f) = &mut self.progress {
            f(record);
        }
        Ok(())
    }
}

fn loaders_for(config: &TrainConfig) -> Result<(DataLoader, DataLoader)> {
    let manifest = Manifest::load(config.feature_options.manifest_path())?;
    let loss = config.loss();
    let fo = &config.feature_options;
    let train = build_loader(fo, config.model_key, loss, &manifest, Split::Train, config.seed, true)?;
    let valid = build_loader(fo, config.model_key, loss, &manifest, Split::Valid, config.seed, false)?;
    Ok((train, valid))
}

/// Train from a config, loading data from its manifest.
pub fn train(config: TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(config)?.run()
}
