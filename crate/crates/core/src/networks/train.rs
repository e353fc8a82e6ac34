//! Training loops: single-phase Base training and three-phase TL training,
//! with per-epoch validation, early stopping and resumable state.

use std::str::FromStr;

use deepssm_nn::{Adam, AdamConfig, Graph, Mode, NnError, ParamId, Schedule, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{focal_c_heuristic, latent_c_heuristic, FocalParams, PairLoss, FOCAL_A_LATENT, FOCAL_A_PARTICLE};
use super::model::{Architecture, BaseDeepSsm, DeepSsm, TlDeepSsm};
use crate::error::{CoreError, Result};
use crate::rng::stream_rng;
use crate::shape::{common_size, CorrespondenceSet};
use crate::shape_stats::ShapeModel;
use crate::volume::{Grid, Volume};

const SPLIT_STREAM: u64 = 0x5350_4c49_54;
const EPOCH_STREAM: u64 = 0x4550_4f43_48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Base,
    Tl,
    BaseFocal,
    TlFocal,
}

impl Variant {
    pub fn is_tl(self) -> bool {
        matches!(self, Variant::Tl | Variant::TlFocal)
    }

    pub fn is_focal(self) -> bool {
        matches!(self, Variant::BaseFocal | Variant::TlFocal)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Tl => "tl",
            Variant::BaseFocal => "base-focal",
            Variant::TlFocal => "tl-focal",
        }
    }
}

impl FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "tl" => Ok(Variant::Tl),
            "base-focal" => Ok(Variant::BaseFocal),
            "tl-focal" => Ok(Variant::TlFocal),
            other => Err(CoreError::Invalid(format!(
                "unknown variant {other:?} (expected base, tl, base-focal or tl-focal)"
            ))),
        }
    }
}

/// Supervision target of the Base variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseTarget {
    /// Loss on the reconstructed correspondences.
    Correspondences,
    /// Loss on the PCA scores.
    Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub base_target: BaseTarget,
    pub architecture: Architecture,
    /// Number of PCA modes for Base; `None` picks the count reaching `variance_fraction`.
    pub num_modes: Option<usize>,
    pub variance_fraction: f64,
    pub latent_dim: usize,
    pub ae_hidden: usize,
    pub batch_size: usize,
    /// Epoch budget of the Base variant.
    pub epochs: usize,
    pub ae_epochs: usize,
    pub tflank_epochs: usize,
    pub joint_epochs: usize,
    pub learning_rate: f64,
    /// Constant rate of the TL autoencoder phase.
    pub ae_learning_rate: f64,
    pub weight_decay: f64,
    /// Epochs without validation improvement before a phase stops.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub focal_a: f64,
    pub focal_a_latent: f64,
    /// Particle focal threshold; `None` uses the percentile heuristic on the training shapes.
    pub focal_c: Option<f64>,
    /// Latent focal threshold; `None` uses the heuristic on autoencoder codes after phase one.
    pub focal_c_latent: Option<f64>,
    /// Pause after this many epochs in total (for checkpoint/resume).
    pub stop_after_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Base,
            base_target: BaseTarget::Correspondences,
            architecture: Architecture::desk(),
            num_modes: None,
            variance_fraction: 0.99,
            latent_dim: 64,
            ae_hidden: 256,
            batch_size: 8,
            epochs: 100,
            ae_epochs: 500,
            tflank_epochs: 50,
            joint_epochs: 25,
            learning_rate: 1e-3,
            ae_learning_rate: 1e-4,
            weight_decay: deepssm_nn::optim::DEFAULT_WEIGHT_DECAY,
            patience: 10,
            val_fraction: 0.1,
            seed: 0,
            focal_a: FOCAL_A_PARTICLE,
            focal_a_latent: FOCAL_A_LATENT,
            focal_c: None,
            focal_c_latent: None,
            stop_after_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Invalid(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2 for batch normalization, got {}", self.batch_size));
        }
        let epochs = if self.variant.is_tl() {
            vec![self.ae_epochs, self.tflank_epochs, self.joint_epochs]
        } else {
            vec![self.epochs]
        };
        if epochs.iter().any(|&e| e == 0) {
            return bad("every phase needs >= 1 epoch".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if !(self.variance_fraction > 0.0 && self.variance_fraction <= 1.0) {
            return bad(format!("variance_fraction must be in (0, 1], got {}", self.variance_fraction));
        }
        for (name, lr) in [("learning_rate", self.learning_rate), ("ae_learning_rate", self.ae_learning_rate)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if self.variant.is_focal() && !(self.focal_a > 0.0 && self.focal_a_latent > 0.0) {
            return bad("focal sharpness must be positive".into());
        }
        Ok(())
    }
}

/// Volumes (standardized) paired with flattened correspondences.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub grid: Grid,
    inputs: Vec<Vec<f64>>,
    pub shapes: Vec<Vec<f64>>,
}

impl TrainingSet {
    pub fn new(volumes: &[Volume], shapes: &[CorrespondenceSet]) -> Result<Self> {
        if volumes.len() != shapes.len() || volumes.is_empty() {
            return Err(CoreError::Dimension(format!("{} volumes vs {} shapes", volumes.len(), shapes.len())));
        }
        common_size(shapes)?;
        let grid = volumes[0].grid;
        if let Some(v) = volumes.iter().find(|v| v.grid.dims != grid.dims) {
            return Err(CoreError::Dimension(format!("mixed volume grids {:?} and {:?}", grid.dims, v.grid.dims)));
        }
        Ok(Self {
            grid,
            inputs: volumes.iter().map(Volume::standardized).collect(),
            shapes: shapes.iter().map(CorrespondenceSet::flatten).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.shapes[0].len() / 3
    }

    fn input_batch(&self, idx: &[usize]) -> Result<Tensor> {
        let [d, h, w] = self.grid.tensor_shape();
        let data = idx.iter().flat_map(|&i| self.inputs[i].iter().copied()).collect();
        Ok(Tensor::new(vec![idx.len(), 1, d, h, w], data)?)
    }

    fn rows(rows: &[Vec<f64>], idx: &[usize]) -> Result<Tensor> {
        let k = rows[idx[0]].len();
        Ok(Tensor::new(vec![idx.len(), k], idx.iter().flat_map(|&i| rows[i].iter().copied()).collect())?)
    }

    fn shape_population(&self, idx: &[usize]) -> Result<Vec<CorrespondenceSet>> {
        idx.iter().map(|&i| CorrespondenceSet::from_flat(format!("{i}"), &self.shapes[i])).collect()
    }
}

/// Seeded train/validation split; validation gets `round(n * fraction)` samples (at least one
/// when the fraction is positive).
pub fn train_val_split(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, SPLIT_STREAM));
    let n_val = if val_fraction > 0.0 { ((n as f64 * val_fraction).round() as usize).max(1) } else { 0 };
    if n < n_val + 2 {
        return Err(CoreError::Invalid(format!("{n} samples leave fewer than 2 for training")));
    }
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Splits a shuffled order into batches, folding a trailing single sample into
/// the previous batch (batch norm needs two samples).
fn make_batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().map_or(false, |b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Base,
    Autoencoder,
    TFlank,
    Joint,
}

impl PhaseKind {
    /// Loss weights `(λ1, λ2)` on the autoencoder and latent-regression terms.
    pub fn lambdas(self) -> (f64, f64) {
        match self {
            PhaseKind::Base => (0.0, 0.0),
            PhaseKind::Autoencoder => (1.0, 0.0),
            PhaseKind::TFlank => (0.0, 1.0),
            PhaseKind::Joint => (1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Phase {
    kind: PhaseKind,
    epochs: usize,
    lr: f64,
    schedule: Schedule,
}

fn phases(config: &TrainConfig) -> Vec<Phase> {
    let cosine = |epochs: usize| Schedule::CosineAnnealing { total_steps: epochs as u64 };
    if config.variant.is_tl() {
        vec![
            Phase {
                kind: PhaseKind::Autoencoder,
                epochs: config.ae_epochs,
                lr: config.ae_learning_rate,
                schedule: Schedule::Constant,
            },
            Phase {
                kind: PhaseKind::TFlank,
                epochs: config.tflank_epochs,
                lr: config.learning_rate,
                schedule: cosine(config.tflank_epochs),
            },
            Phase {
                kind: PhaseKind::Joint,
                epochs: config.joint_epochs,
                lr: config.learning_rate,
                schedule: cosine(config.joint_epochs),
            },
        ]
    } else {
        vec![Phase { kind: PhaseKind::Base, epochs: config.epochs, lr: config.learning_rate, schedule: cosine(config.epochs) }]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    /// 1-based epoch count over all phases.
    pub epoch: usize,
    pub phase: PhaseKind,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// CSV with header `epoch,phase,train_loss,val_loss,lr`.
pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,phase,train_loss,val_loss,lr\n");
    for r in history {
        let phase = serde_json::to_value(r.phase).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, phase, r.train_loss, r.val_loss, r.lr));
    }
    out
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub phase: usize,
    pub phase_epoch: usize,
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub since_best: usize,
    pub best: Option<Vec<Tensor>>,
    pub adam: Adam,
    pub focal_c_latent: Option<f64>,
    pub history: Vec<HistoryRow>,
    pub finished: bool,
}

/// Serializable scalar part of [`TrainState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStateMeta {
    pub phase: usize,
    pub phase_epoch: usize,
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub since_best: usize,
    pub adam_step: u64,
    pub focal_c_latent: Option<f64>,
    pub history: Vec<HistoryRow>,
    pub finished: bool,
}

impl TrainState {
    fn fresh(weight_decay: f64) -> Self {
        Self {
            phase: 0,
            phase_epoch: 0,
            epoch: 0,
            best_val: None,
            since_best: 0,
            best: None,
            adam: Adam::new(adam_config(weight_decay)),
            focal_c_latent: None,
            history: Vec::new(),
            finished: false,
        }
    }

    pub fn meta(&self) -> TrainStateMeta {
        TrainStateMeta {
            phase: self.phase,
            phase_epoch: self.phase_epoch,
            epoch: self.epoch,
            best_val: self.best_val,
            since_best: self.since_best,
            adam_step: self.adam.steps_taken(),
            focal_c_latent: self.focal_c_latent,
            history: self.history.clone(),
            finished: self.finished,
        }
    }

    pub fn from_meta(
        meta: TrainStateMeta,
        weight_decay: f64,
        best: Option<Vec<Tensor>>,
        moments: Vec<(usize, Tensor, Tensor)>,
    ) -> Self {
        Self {
            phase: meta.phase,
            phase_epoch: meta.phase_epoch,
            epoch: meta.epoch,
            best_val: meta.best_val,
            since_best: meta.since_best,
            best,
            adam: Adam::restore(adam_config(weight_decay), meta.adam_step, moments),
            focal_c_latent: meta.focal_c_latent,
            history: meta.history,
            finished: meta.finished,
        }
    }
}

fn adam_config(weight_decay: f64) -> AdamConfig {
    AdamConfig { weight_decay, ..AdamConfig::default() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Finished,
    /// Stopped at `stop_after_epoch`; the state can be saved and resumed.
    Paused,
}

/// Loss weights and comparison rules of the TL objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TlLoss {
    pub lambda_auto: f64,
    pub lambda_tf: f64,
    pub auto: PairLoss,
    pub latent: PairLoss,
}

/// `λ1 L(C, h(g(C))) + λ2 L(g(C), f(I))` on a batch of correspondences `c` and volumes `x`.
pub fn loss_tl(g: &mut Graph, model: &mut TlDeepSsm, c: Var, x: Var, loss: TlLoss, mode: Mode) -> Result<Var> {
    if loss.lambda_auto == 0.0 && loss.lambda_tf == 0.0 {
        return Err(CoreError::Invalid("TL loss needs a nonzero weight".into()));
    }
    let s = model.encode(g, c)?;
    let mut total: Option<Var> = None;
    if loss.lambda_auto != 0.0 {
        let rec = model.decode(g, s)?;
        let l = loss.auto.apply(g, rec, c)?;
        total = Some(g.scale(l, loss.lambda_auto)?);
    }
    if loss.lambda_tf != 0.0 {
        let f = model.image_latent(g, x, mode)?;
        let l = loss.latent.apply(g, f, s)?;
        let l = g.scale(l, loss.lambda_tf)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(total.expect("at least one term"))
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: DeepSsm,
    pub state: TrainState,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    /// PCA scores of every sample (Base with score supervision).
    scores: Option<Vec<Vec<f64>>>,
    focal_c: Option<f64>,
}

fn training_error(epoch: usize, e: CoreError) -> CoreError {
    match e {
        CoreError::Nn(NnError::NonFinite(what)) => {
            CoreError::Training(format!("non-finite value in {what} during epoch {}", epoch + 1))
        }
        other => other,
    }
}

impl Trainer {
    /// Fits the shape model/normalization on the training split and initializes the network.
    pub fn new(config: TrainConfig, data: &TrainingSet) -> Result<Self> {
        config.validate()?;
        let (train_idx, _) = train_val_split(data.len(), config.val_fraction, config.seed)?;
        let train_shapes = data.shape_population(&train_idx)?;
        let model = if config.variant.is_tl() {
            let mut m = TlDeepSsm::build(
                config.architecture.clone(),
                data.grid,
                data.num_points(),
                config.latent_dim,
                config.ae_hidden,
                config.seed,
            )?;
            let flat: Vec<Vec<f64>> = train_idx.iter().map(|&i| data.shapes[i].clone()).collect();
            m.set_normalization(&flat)?;
            DeepSsm::Tl(m)
        } else {
            let full = ShapeModel::fit_full(&train_shapes)?;
            let k = match config.num_modes {
                Some(k) => k,
                None => full.modes_for_fraction(config.variance_fraction)?,
            };
            let sm = full.truncated(k)?;
            DeepSsm::Base(BaseDeepSsm::new(config.architecture.clone(), data.grid, &sm, config.seed)?)
        };
        let state = TrainState::fresh(config.weight_decay);
        Self::resume(config, model, state, data)
    }

    /// Continues from a saved model and state with the same config and data.
    pub fn resume(config: TrainConfig, model: DeepSsm, state: TrainState, data: &TrainingSet) -> Result<Self> {
        config.validate()?;
        if model.grid().dims != data.grid.dims || model.num_points() != data.num_points() {
            return Err(CoreError::Dimension("model input grid or particle count differs from the data".into()));
        }
        let (train_idx, val_idx) = train_val_split(data.len(), config.val_fraction, config.seed)?;
        let scores = match (&model, config.base_target) {
            (DeepSsm::Base(m), BaseTarget::Scores) => {
                let sm = m.shape_model()?;
                Some(data.shapes.iter().map(|s| sm.project_flat(s)).collect::<Result<Vec<_>>>()?)
            }
            _ => None,
        };
        let focal_c = if config.variant.is_focal() {
            Some(match config.focal_c {
                Some(c) => c,
                None => {
                    let shapes: Vec<Vec<f64>> = train_idx.iter().map(|&i| data.shapes[i].clone()).collect();
                    let d = shapes[0].len();
                    let mean: Vec<f64> =
                        (0..d).map(|k| shapes.iter().map(|s| s[k]).sum::<f64>() / shapes.len() as f64).collect();
                    focal_c_heuristic(&shapes, &mean)?
                }
            })
        } else {
            None
        };
        Ok(Self { config, model, state, train_idx, val_idx, scores, focal_c })
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val_idx
    }

    fn particle_loss(&self) -> Result<PairLoss> {
        Ok(match self.focal_c {
            Some(c) => PairLoss::FocalParticle(FocalParams::new(self.config.focal_a, c)?),
            None => PairLoss::SquaredL2,
        })
    }

    fn latent_loss(&self) -> Result<PairLoss> {
        if !self.config.variant.is_focal() {
            return Ok(PairLoss::SquaredL2);
        }
        let c = self
            .state
            .focal_c_latent
            .ok_or_else(|| CoreError::Training("latent focal threshold not initialized".into()))?;
        Ok(PairLoss::FocalVector(FocalParams::new(self.config.focal_a_latent, c)?))
    }

    fn batch_loss(&mut self, g: &mut Graph, data: &TrainingSet, idx: &[usize], kind: PhaseKind, mode: Mode) -> Result<Var> {
        let x = g.constant(data.input_batch(idx)?)?;
        let c = g.constant(TrainingSet::rows(&data.shapes, idx)?)?;
        let particle = self.particle_loss()?;
        match (kind, &mut self.model) {
            (PhaseKind::Base, DeepSsm::Base(m)) => {
                let (scores, corr) = m.forward(g, x, mode)?;
                match &self.scores {
                    Some(all) => {
                        let z = g.constant(TrainingSet::rows(all, idx)?)?;
                        PairLoss::SquaredL2.apply(g, scores, z)
                    }
                    None => particle.apply(g, corr, c),
                }
            }
            (kind, DeepSsm::Tl(_)) if kind != PhaseKind::Base => {
                let (lambda_auto, lambda_tf) = kind.lambdas();
                let latent = if lambda_tf != 0.0 { self.latent_loss()? } else { PairLoss::SquaredL2 };
                let DeepSsm::Tl(m) = &mut self.model else { unreachable!() };
                loss_tl(g, m, c, x, TlLoss { lambda_auto, lambda_tf, auto: particle, latent }, mode)
            }
            _ => Err(CoreError::Training(format!("phase {kind:?} does not apply to this model"))),
        }
    }

    fn set_trainable(&mut self, kind: PhaseKind) {
        if let DeepSsm::Tl(m) = &mut self.model {
            let (ae, tf) = (m.autoencoder_ids(), m.t_flank_ids());
            let (ae_on, tf_on) = match kind {
                PhaseKind::Autoencoder => (true, false),
                PhaseKind::TFlank => (false, true),
                _ => (true, true),
            };
            m.store.set_requires_grad(&ae, ae_on);
            m.store.set_requires_grad(&tf, tf_on);
        }
    }

    fn snapshot(&self) -> Vec<Tensor> {
        self.model.store().iter().map(|(_, p)| p.value.clone()).collect()
    }

    fn restore(&mut self, values: &[Tensor]) {
        for (p, v) in self.model.store_mut().params_mut().iter_mut().zip(values) {
            p.value = v.clone();
        }
    }

    /// Latent codes of the training shapes under the current autoencoder.
    fn training_latents(&self, data: &TrainingSet) -> Result<Vec<Vec<f64>>> {
        let DeepSsm::Tl(m) = &self.model else { return Ok(Vec::new()) };
        let mut g = Graph::new();
        let c = g.constant(TrainingSet::rows(&data.shapes, &self.train_idx)?)?;
        let s = m.encode(&mut g, c)?;
        Ok(g.value(s).data().chunks(m.latent_dim).map(<[f64]>::to_vec).collect())
    }

    fn start_phase(&mut self, data: &TrainingSet, kind: PhaseKind) -> Result<()> {
        if kind == PhaseKind::TFlank && self.config.variant.is_focal() && self.state.focal_c_latent.is_none() {
            self.state.focal_c_latent = Some(match self.config.focal_c_latent {
                Some(c) => c,
                None => latent_c_heuristic(&self.training_latents(data)?)?,
            });
        }
        Ok(())
    }

    fn run_epoch(&mut self, data: &TrainingSet, phase: Phase) -> Result<(f64, f64, f64)> {
        let lr = phase.schedule.rate(phase.lr, self.state.phase_epoch as u64);
        let mut order = self.train_idx.clone();
        order.shuffle(&mut stream_rng(self.config.seed ^ EPOCH_STREAM, self.state.epoch as u64));
        let mut total = 0.0;
        for batch in make_batches(&order, self.config.batch_size) {
            self.model.store_mut().zero_grad();
            let mut g = Graph::new();
            let loss = self.batch_loss(&mut g, data, &batch, phase.kind, Mode::Train)?;
            total += g.value(loss).item() * batch.len() as f64;
            g.backward(loss)?;
            g.accumulate_param_grads(self.model.store_mut())?;
            self.state.adam.step(self.model.store_mut(), lr)?;
        }
        let train_loss = total / order.len() as f64;
        let val_loss = if self.val_idx.is_empty() {
            train_loss
        } else {
            let mut v = 0.0;
            for batch in self.val_idx.clone().chunks(self.config.batch_size) {
                let mut g = Graph::new();
                let loss = self.batch_loss(&mut g, data, batch, phase.kind, Mode::Eval)?;
                v += g.value(loss).item() * batch.len() as f64;
            }
            v / self.val_idx.len() as f64
        };
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(CoreError::Training(format!("loss became non-finite in epoch {}", self.state.epoch + 1)));
        }
        Ok((train_loss, val_loss, lr))
    }

    /// Trains until every phase ends or `stop_after_epoch` is reached.
    pub fn run(&mut self, data: &TrainingSet) -> Result<Progress> {
        let plan = phases(&self.config);
        while self.state.phase < plan.len() {
            let phase = plan[self.state.phase];
            self.set_trainable(phase.kind);
            if self.state.phase_epoch == 0 {
                self.start_phase(data, phase.kind)?;
            }
            let epoch = self.state.epoch;
            let (train_loss, val_loss, lr) = self.run_epoch(data, phase).map_err(|e| training_error(epoch, e))?;
            self.state.epoch += 1;
            self.state.phase_epoch += 1;
            self.state.history.push(HistoryRow { epoch: self.state.epoch, phase: phase.kind, train_loss, val_loss, lr });
            log::info!(
                "epoch {} ({:?} {}/{}): train {train_loss:.6} val {val_loss:.6} lr {lr:.2e}",
                self.state.epoch,
                phase.kind,
                self.state.phase_epoch,
                phase.epochs
            );
            if self.state.best_val.map_or(true, |b| val_loss < b) {
                self.state.best_val = Some(val_loss);
                self.state.best = Some(self.snapshot());
                self.state.since_best = 0;
            } else {
                self.state.since_best += 1;
            }
            if self.state.phase_epoch >= phase.epochs || self.state.since_best >= self.config.patience {
                if let Some(best) = self.state.best.take() {
                    self.restore(&best);
                }
                self.state.phase += 1;
                self.state.phase_epoch = 0;
                self.state.best_val = None;
                self.state.since_best = 0;
                self.state.adam = Adam::new(adam_config(self.config.weight_decay));
            }
            if self.config.stop_after_epoch == Some(self.state.epoch) && self.state.phase < plan.len() {
                return Ok(Progress::Paused);
            }
        }
        self.state.finished = true;
        self.set_trainable(PhaseKind::Joint);
        Ok(Progress::Finished)
    }
}

/// Trains the Base variant (`config.variant` must be `base` or `base-focal`).
pub fn train_base(data: &TrainingSet, config: TrainConfig) -> Result<(BaseDeepSsm, Vec<HistoryRow>)> {
    if config.variant.is_tl() {
        return Err(CoreError::Invalid("train_base needs a base variant".into()));
    }
    let mut t = Trainer::new(config, data)?;
    t.run(data)?;
    match t.model {
        DeepSsm::Base(m) => Ok((m, t.state.history)),
        DeepSsm::Tl(_) => unreachable!(),
    }
}

/// Trains the TL variant through its three phases.
pub fn train_tl(data: &TrainingSet, config: TrainConfig) -> Result<(TlDeepSsm, Vec<HistoryRow>)> {
    if !config.variant.is_tl() {
        return Err(CoreError::Invalid("train_tl needs a tl variant".into()));
    }
    let mut t = Trainer::new(config, data)?;
    t.run(data)?;
    match t.model {
        DeepSsm::Tl(m) => Ok((m, t.state.history)),
        DeepSsm::Base(_) => unreachable!(),
    }
}

/// Checksum over a set of parameter tensors.
pub fn checksum(model: &DeepSsm, ids: &[ParamId]) -> u64 {
    model.store().checksum(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_never_end_with_a_single_sample() {
        let order: Vec<usize> = (0..9).collect();
        let b = make_batches(&order, 4);
        assert_eq!(b, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7, 8]]);
        assert_eq!(make_batches(&order[..8], 4).len(), 2);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (t, v) = train_val_split(20, 0.1, 3).unwrap();
        assert_eq!((t.len(), v.len()), (18, 2));
        assert!(v.iter().all(|i| !t.contains(i)));
        assert_eq!(train_val_split(20, 0.1, 3).unwrap(), (t, v));
        assert!(train_val_split(2, 0.5, 0).is_err());
    }

    #[test]
    fn variant_names() {
        for v in ["base", "tl", "base-focal", "tl-focal"] {
            assert_eq!(v.parse::<Variant>().unwrap().name(), v);
        }
        assert!("deep".parse::<Variant>().is_err());
    }
}
