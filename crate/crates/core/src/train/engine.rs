//! The epoch loop shared by all three stages, and its resumable state.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, AdamState, FlatAdam, PlateauScheduler};
use super::stages::simulate_cascade;
use super::{frame_starts, CascadeConfig, EpochLog, SelectionMetric, TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::metrics::acpr_of;
use crate::nn::{
    cascade_batch_grad, cascade_loss, supervised_batch_grad, supervised_loss, ActQuant, BatchGrad, FrameRef,
    ModelFile, Real, TResDeltaGru, DeltaThresholds,
};
use crate::quant::{QParam, QuantModelConfig, QuantPoint, QuantizedModel, ScaleTable};
use crate::signal::IQSequence;

pub const TRAIN_STATE_FORMAT: &str = "dpdlab-train-state";
const TRAIN_STATE_VERSION: u32 = 1;

/// What the model is fitted to.
#[derive(Debug, Clone, Copy)]
pub enum Task<'a, T> {
    /// `model(x) ≈ y` (PA behavioral modeling).
    Supervised {
        x: &'a IQSequence,
        y: &'a IQSequence,
        val_x: &'a IQSequence,
        val_y: &'a IQSequence,
    },
    /// `pa(model(x)) ≈ G·x` with `pa` frozen.
    Cascade {
        pa: &'a TResDeltaGru<T>,
        x: &'a IQSequence,
        val_x: &'a IQSequence,
        cfg: &'a CascadeConfig,
    },
}

/// Trainable power-of-two scales.
///
/// Latent `log2` scales are continuous and updated by AdamW from the STE
/// scale gradients; forward passes use the published values
/// `round(latent)`, which are refreshed at the end of every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QatState {
    pub cfg: QuantModelConfig,
    pub train_scales: bool,
    pub scale_lr: f64,
    pub weight_names: Vec<String>,
    pub points: Vec<QuantPoint>,
    pub latent: Vec<f64>,
    pub adam: FlatAdam,
    pub published: ScaleTable,
}

impl QatState {
    pub fn new(cfg: QuantModelConfig, table: ScaleTable, train_scales: bool, scale_lr: f64) -> Self {
        let weight_names: Vec<String> = table.weights.keys().cloned().collect();
        let points: Vec<QuantPoint> = table.activations.keys().copied().collect();
        let latent: Vec<f64> = weight_names
            .iter()
            .map(|n| table.weights[n] as f64)
            .chain(points.iter().map(|p| table.activations[p] as f64))
            .collect();
        Self {
            cfg,
            train_scales,
            scale_lr,
            adam: FlatAdam::new(latent.len()),
            weight_names,
            points,
            latent,
            published: table,
        }
    }

    fn published_log2(&self, i: usize) -> i32 {
        let nw = self.weight_names.len();
        if i < nw {
            self.published.weights[&self.weight_names[i]]
        } else {
            self.published.activations[&self.points[i - nw]]
        }
    }

    /// Snaps the latent scales to powers of two and publishes them.
    pub fn publish(&mut self) {
        let nw = self.weight_names.len();
        for (i, &l) in self.latent.iter().enumerate() {
            let k = l.round() as i32;
            if i < nw {
                self.published.weights.insert(self.weight_names[i].clone(), k);
            } else {
                self.published.activations.insert(self.points[i - nw], k);
            }
        }
    }

    pub fn quantized(&self, model: &TResDeltaGru<f64>) -> Result<QuantizedModel> {
        QuantizedModel::new(model, self.cfg, self.published.clone())
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    /// Completed epochs.
    pub epoch: usize,
    pub model: TResDeltaGru<T>,
    pub adam: AdamState<T>,
    pub scheduler: PlateauScheduler,
    pub best_metric: Option<f64>,
    pub best_model: TResDeltaGru<T>,
    pub best_scales: Option<ScaleTable>,
    pub log: TrainLog,
    pub qat: Option<QatState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainStateFile {
    format: String,
    version: u32,
    epoch: usize,
    model: ModelFile,
    adam_m: ModelFile,
    adam_v: ModelFile,
    adam_t: u64,
    scheduler: PlateauScheduler,
    best_metric: Option<f64>,
    best_model: ModelFile,
    best_scales: Option<ScaleTable>,
    log: TrainLog,
    qat: Option<QatState>,
}

impl<T: Real> TrainState<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = TrainStateFile {
            format: TRAIN_STATE_FORMAT.into(),
            version: TRAIN_STATE_VERSION,
            epoch: self.epoch,
            model: ModelFile::from_model(&self.model),
            adam_m: ModelFile::from_model(&self.adam.m),
            adam_v: ModelFile::from_model(&self.adam.v),
            adam_t: self.adam.t,
            scheduler: self.scheduler,
            best_metric: self.best_metric,
            best_model: ModelFile::from_model(&self.best_model),
            best_scales: self.best_scales.clone(),
            log: self.log.clone(),
            qat: self.qat.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::Format(e.to_string()))?;
        fsutil::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fsutil::read_to_string(path)?;
        let f: TrainStateFile =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if f.format != TRAIN_STATE_FORMAT || f.version != TRAIN_STATE_VERSION {
            return Err(Error::Format(format!(
                "{}: expected {TRAIN_STATE_FORMAT} v{TRAIN_STATE_VERSION}, found {} v{}",
                path.display(),
                f.format,
                f.version
            )));
        }
        Ok(Self {
            epoch: f.epoch,
            model: f.model.to_model()?,
            adam: AdamState {
                m: f.adam_m.to_model()?,
                v: f.adam_v.to_model()?,
                t: f.adam_t,
            },
            scheduler: f.scheduler,
            best_metric: f.best_metric,
            best_model: f.best_model.to_model()?,
            best_scales: f.best_scales,
            log: f.log,
            qat: f.qat,
        })
    }
}

pub struct Trainer<'a, T: Real> {
    task: Task<'a, T>,
    cfg: TrainConfig,
    frames: Vec<FrameRef>,
    val_frames: Vec<FrameRef>,
    pool: Option<rayon::ThreadPool>,
    state: TrainState<T>,
}

struct Eval {
    val_mse: f64,
    val_acpr: Option<f64>,
    gamma: f64,
}

impl<'a, T: Real> Trainer<'a, T> {
    /// Starts from `model`; the initial model is evaluated and becomes the
    /// first selection candidate.
    pub fn new(task: Task<'a, T>, cfg: TrainConfig, model: TResDeltaGru<T>, qat: Option<QatState>) -> Result<Self> {
        let state = TrainState {
            epoch: 0,
            adam: AdamState::new(&model),
            scheduler: PlateauScheduler::new(cfg.lr, cfg.scheduler),
            best_metric: None,
            best_model: model.clone(),
            best_scales: qat.as_ref().map(|q| q.published.clone()),
            model,
            log: TrainLog::default(),
            qat,
        };
        let mut t = Self::from_state(task, cfg, state)?;
        let init = t.with_pool(|t| -> Result<(f64, Eval)> {
            let (fwd, aq) = t.forward_model(&t.state.model, t.state.qat.as_ref(), 0)?;
            let train = t.loss(&fwd, &t.frames, aq.as_ref(), false);
            Ok((train, t.evaluate(&fwd, aq.as_ref())?))
        })?;
        let (train, ev) = init;
        t.state.log.initial_train_mse = Some(train);
        t.state.best_metric = Some(t.metric(&ev));
        Ok(t)
    }

    /// Continues from a saved state.
    pub fn from_state(task: Task<'a, T>, cfg: TrainConfig, state: TrainState<T>) -> Result<Self> {
        cfg.validate()?;
        state.model.validate()?;
        let (x, val_x) = match task {
            Task::Supervised { x, y, val_x, val_y } => {
                if x.len() != y.len() || val_x.len() != val_y.len() {
                    return Err(Error::shape("input and output sequences differ in length"));
                }
                (x, val_x)
            }
            Task::Cascade { pa, x, val_x, cfg: c } => {
                c.validate()?;
                if pa.tcn.is_some() || pa.input_size() != state.model.input_size() {
                    return Err(Error::shape("PA model must be a GRU+FC over the same features"));
                }
                (x, val_x)
            }
        };
        if x.is_empty() || val_x.is_empty() {
            return Err(Error::EmptyDataset("training or validation split".into()));
        }
        let frames = frame_starts(x.len(), cfg.frame_length, cfg.frame_stride)?;
        let val_frames = frame_starts(val_x.len(), cfg.frame_length.min(val_x.len()), cfg.frame_length)?;
        let pool = match cfg.threads {
            Some(n) => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::invalid(format!("thread pool: {e}")))?,
            ),
            None => None,
        };
        Ok(Self {
            task,
            cfg,
            frames,
            val_frames,
            pool,
            state,
        })
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn into_state(self) -> TrainState<T> {
        self.state
    }

    fn with_pool<R: Send>(&mut self, f: impl FnOnce(&mut Self) -> R + Send) -> R
    where
        Self: Send,
    {
        match self.pool.take() {
            Some(pool) => {
                let r = pool.install(|| f(self));
                self.pool = Some(pool);
                r
            }
            None => f(self),
        }
    }

    fn dense_warmup(&self) -> usize {
        match self.task {
            Task::Cascade { cfg, .. } => cfg.dense_warmup_epochs,
            Task::Supervised { .. } => 0,
        }
    }

    /// The model the forward pass sees: quantized weights and activation
    /// quantizers during QAT, dense thresholds during warm-up epochs.
    fn forward_model(
        &self,
        latent: &TResDeltaGru<T>,
        qat: Option<&QatState>,
        epoch: usize,
    ) -> Result<(TResDeltaGru<T>, Option<ActQuant<T>>)> {
        let (mut m, aq) = match qat {
            Some(q) => {
                let qm = q.quantized(&latent.cast::<f64>())?;
                (qm.model.cast::<T>(), Some(qm.act_quant::<T>()))
            }
            None => (latent.clone(), None),
        };
        if epoch < self.dense_warmup() {
            m.thresholds = DeltaThresholds::DENSE;
        }
        Ok((m, aq))
    }

    fn batch_grad(&self, model: &TResDeltaGru<T>, frames: &[FrameRef], aq: Option<&ActQuant<T>>) -> Result<BatchGrad<T>> {
        let w = self.cfg.warmup;
        match self.task {
            Task::Supervised { x, y, .. } => supervised_batch_grad(model, x.samples(), y.samples(), frames, w, aq),
            Task::Cascade { pa, x, cfg, .. } => cascade_batch_grad(model, pa, x.samples(), frames, w, cfg.target_gain, aq),
        }
    }

    fn loss(&self, model: &TResDeltaGru<T>, frames: &[FrameRef], aq: Option<&ActQuant<T>>, val: bool) -> f64 {
        let w = self.cfg.warmup;
        match self.task {
            Task::Supervised { x, y, val_x, val_y } => {
                let (a, b) = if val { (val_x, val_y) } else { (x, y) };
                supervised_loss(model, a.samples(), b.samples(), frames, w, aq)
            }
            Task::Cascade { pa, x, val_x, cfg } => {
                let a = if val { val_x } else { x };
                cascade_loss(model, pa, a.samples(), frames, w, cfg.target_gain, aq)
            }
        }
    }

    fn evaluate(&self, fwd: &TResDeltaGru<T>, aq: Option<&ActQuant<T>>) -> Result<Eval> {
        let val_mse = self.loss(fwd, &self.val_frames, aq, true);
        match self.task {
            Task::Supervised { .. } => Ok(Eval {
                val_mse,
                val_acpr: None,
                gamma: 0.0,
            }),
            Task::Cascade { pa, val_x, cfg, .. } => {
                let qm = match &self.state.qat {
                    Some(q) => Some(q.quantized(&fwd.cast::<f64>())?),
                    None => None,
                };
                let out = simulate_cascade(fwd, qm.as_ref(), pa, val_x)?;
                let val_acpr = acpr_of(&out.y, &cfg.acpr)?.avg_dbc;
                Ok(Eval {
                    val_mse,
                    val_acpr: Some(val_acpr),
                    gamma: out.sparsity.gamma,
                })
            }
        }
    }

    fn metric(&self, ev: &Eval) -> f64 {
        match (self.task, self.cfg.selection_metric, ev.val_acpr) {
            (Task::Cascade { .. }, SelectionMetric::ValAcpr, Some(a)) => a,
            _ => ev.val_mse,
        }
    }

    /// Runs one epoch and returns its log row.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        self.with_pool(|t| t.run_epoch_inner())
    }

    fn run_epoch_inner(&mut self) -> Result<EpochLog> {
        let epoch = self.state.epoch;
        let mut order = self.frames.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let lr = self.state.scheduler.lr;
        let (mut loss_sum, mut n_frames) = (0.0, 0usize);
        for batch in order.chunks(self.cfg.batch_size) {
            let (fwd, aq) = self.forward_model(&self.state.model, self.state.qat.as_ref(), epoch)?;
            let bg = self.batch_grad(&fwd, batch, aq.as_ref())?;
            loss_sum += bg.loss * batch.len() as f64;
            n_frames += batch.len();
            let mut g = bg.grads;
            let scale_grads = match &self.state.qat {
                Some(q) => Some(weight_ste(q, &self.state.model, &mut g, &bg.act)?),
                None => None,
            };
            if let Some(c) = self.cfg.grad_clip_norm {
                let norm = g.sum_sq().sqrt();
                if norm > c {
                    g.scale(T::of(c / norm));
                }
            }
            adamw_step(&mut self.state.model, &g, &mut self.state.adam, &self.cfg.optimizer, lr)?;
            if let (Some(q), Some(sg)) = (self.state.qat.as_mut(), scale_grads) {
                if q.train_scales {
                    let dl: Vec<f64> = sg
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * (q.published_log2(i) as f64).exp2() * std::f64::consts::LN_2)
                        .collect();
                    let lr_s = q.scale_lr;
                    q.adam.step(&mut q.latent, &dl, &self.cfg.optimizer, lr_s, false)?;
                }
            }
        }
        if let Some(q) = self.state.qat.as_mut() {
            q.publish();
        }
        let (fwd, aq) = self.forward_model(&self.state.model, self.state.qat.as_ref(), epoch + 1)?;
        let ev = self.evaluate(&fwd, aq.as_ref())?;
        let metric = self.metric(&ev);
        let next_lr = self.state.scheduler.step(metric)?;
        self.state.epoch += 1;
        if self.state.best_metric.map_or(true, |b| metric < b) {
            self.state.best_metric = Some(metric);
            self.state.best_model = self.state.model.clone();
            self.state.best_scales = self.state.qat.as_ref().map(|q| q.published.clone());
            self.state.log.best_epoch = Some(self.state.epoch);
        }
        let row = EpochLog {
            epoch: self.state.epoch,
            train_mse: loss_sum / n_frames.max(1) as f64,
            val_mse: ev.val_mse,
            val_acpr: ev.val_acpr,
            lr,
            gamma: ev.gamma,
        };
        log::info!(
            "epoch {} train {:.3e} val {:.3e} acpr {:?} lr {:.1e} -> {:.1e} gamma {:.3}",
            row.epoch,
            row.train_mse,
            row.val_mse,
            row.val_acpr,
            lr,
            next_lr,
            row.gamma
        );
        self.state.log.epochs.push(row);
        Ok(row)
    }

    /// Trains until `cfg.epochs` epochs are complete.
    pub fn run(mut self) -> Result<TrainState<T>> {
        while self.state.epoch < self.cfg.epochs {
            self.run_epoch()?;
        }
        Ok(self.state)
    }
}

/// Masks weight gradients by the weight quantizers' clip ranges and
/// collects scale gradients (weights first, then activation points).
fn weight_ste<T: Real>(q: &QatState, latent: &TResDeltaGru<T>, g: &mut TResDeltaGru<T>, act: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; q.latent.len()];
    for ((name, gw), (_, w)) in g.tensors_mut().into_iter().zip(latent.tensors()) {
        let idx = q
            .weight_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("no scale for weight `{name}`")))?;
        let qp = QParam::<T>::from_spec(&q.published.weight_spec(&q.cfg, name)?);
        let mut gs = 0.0;
        for (gv, &wv) in gw.iter_mut().zip(w) {
            let (a, b) = qp.backward(wv, *gv);
            *gv = a;
            gs += b.f64();
        }
        out[idx] = gs;
    }
    let nw = q.weight_names.len();
    for (i, p) in q.points.iter().enumerate() {
        out[nw + i] = act[p.index()];
    }
    Ok(out)
}
