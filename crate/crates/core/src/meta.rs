//! Cross-network meta-training, target fine-tuning, and single-network
//! training of GDN.
//!
//! Each epoch adapts the shared parameters to every auxiliary task with a
//! few plain gradient steps, draws a fresh batch per task, evaluates the
//! loss gradient at the adapted parameters, and moves the shared
//! parameters against the sum of those gradients (first-order meta-update).
//!
//! The update rule itself lives in [`fomaml_step`], generic over
//! [`Objective`], so it can be exercised on toy objectives as well as GDN.

use std::sync::Arc;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::{AttributedGraph, PropagatedFeatures};
use crate::loss::{loss_and_grad, LossConfig, LossSettings};
use crate::metrics;
use crate::model::{self, forward_backward, init_params, GdnGradients, GdnParams};
use crate::rng::{self, Rng, Stream};

/// One network's few-shot detection task.
#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub graph: Arc<AttributedGraph>,
    pub propagated: Arc<PropagatedFeatures>,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
}

impl Task {
    pub fn new(
        name: impl Into<String>,
        graph: Arc<AttributedGraph>,
        propagated: Arc<PropagatedFeatures>,
        labeled: Vec<usize>,
        unlabeled: Vec<usize>,
    ) -> Result<Self> {
        let n = graph.num_nodes();
        if propagated.num_nodes() != n {
            return Err(Error::Shape(format!(
                "propagated features have {} rows for {} nodes",
                propagated.num_nodes(),
                n
            )));
        }
        if labeled.is_empty() {
            return Err(Error::Config("task needs at least one labeled anomaly".into()));
        }
        if labeled.len() > unlabeled.len() {
            return Err(Error::Config(format!(
                "{} labeled anomalies exceed {} unlabeled nodes",
                labeled.len(),
                unlabeled.len()
            )));
        }
        let mut seen = vec![0u8; n];
        for (set, &node) in labeled
            .iter()
            .map(|v| (1u8, v))
            .chain(unlabeled.iter().map(|v| (2u8, v)))
        {
            if node >= n {
                return Err(Error::IndexOutOfRange {
                    index: node,
                    num_nodes: n,
                });
            }
            if seen[node] != 0 {
                let what = if seen[node] == set { "repeated" } else { "both labeled and unlabeled" };
                return Err(Error::Config(format!("node {node} is {what}")));
            }
            seen[node] = set;
        }
        Ok(Task {
            name: name.into(),
            graph,
            propagated,
            labeled,
            unlabeled,
        })
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn feature_dim(&self) -> usize {
        self.propagated.dim()
    }

    /// Same task with a different unlabeled pool.
    pub fn with_unlabeled(&self, unlabeled: Vec<usize>) -> Result<Self> {
        Task::new(
            self.name.clone(),
            self.graph.clone(),
            self.propagated.clone(),
            self.labeled.clone(),
            unlabeled,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub meta_lr: f64,
    pub inner_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub fine_tune_epochs: usize,
    /// Validation AUC is checked every this many epochs during fine-tuning
    /// and single-network training when a validation set is supplied.
    pub validate_every: usize,
    pub encoder_dim: usize,
    pub hidden_dim: usize,
    pub sgc_degree: usize,
    pub loss: LossSettings,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 0.01,
            meta_lr: 0.001,
            inner_steps: 5,
            epochs: 1000,
            batch_size: 16,
            fine_tune_epochs: 100,
            validate_every: 10,
            encoder_dim: 64,
            hidden_dim: 512,
            sgc_degree: 2,
            loss: LossSettings::default(),
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.inner_lr >= 0.0) || !self.inner_lr.is_finite() {
            return bad(format!("inner_lr must be finite and >= 0, got {}", self.inner_lr));
        }
        if !(self.meta_lr >= 0.0) || !self.meta_lr.is_finite() {
            return bad(format!("meta_lr must be finite and >= 0, got {}", self.meta_lr));
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1".into());
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return bad(format!("batch_size must be even and positive, got {}", self.batch_size));
        }
        if self.validate_every == 0 {
            return bad("validate_every must be at least 1".into());
        }
        if self.encoder_dim == 0 || self.hidden_dim == 0 {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn resolve_loss(&self) -> Result<LossConfig> {
        self.loss.resolve(&mut rng::stream(self.seed, Stream::Reference))
    }

    /// The initialization every trainer starts from for this seed.
    pub fn init(&self, d: usize) -> Result<GdnParams> {
        init_params(
            d,
            self.encoder_dim,
            self.hidden_dim,
            &mut rng::stream(self.seed, Stream::Init),
        )
    }
}

/// A batch drawn from one task: unlabeled nodes (label 0) then labeled
/// anomalies (label 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub nodes: Vec<usize>,
    pub labels: Vec<u8>,
}

/// Draws `b/2` unlabeled nodes without replacement and `b/2` labeled
/// anomalies. Labeled anomalies are drawn with replacement only when fewer
/// than `b/2` exist.
pub fn sample_batch(task: &Task, b: usize, rng: &mut Rng) -> Result<Batch> {
    if b == 0 || !b.is_multiple_of(2) {
        return Err(Error::Config(format!("batch size must be even and positive, got {b}")));
    }
    let half = b / 2;
    if task.unlabeled.len() < half {
        return Err(Error::Config(format!(
            "task {:?} has {} unlabeled nodes, batch needs {half}",
            task.name,
            task.unlabeled.len()
        )));
    }
    let mut nodes = Vec::with_capacity(b);
    nodes.extend(
        index::sample(rng, task.unlabeled.len(), half)
            .into_iter()
            .map(|k| task.unlabeled[k]),
    );
    if task.labeled.len() >= half {
        nodes.extend(
            index::sample(rng, task.labeled.len(), half)
                .into_iter()
                .map(|k| task.labeled[k]),
        );
    } else {
        for _ in 0..half {
            nodes.push(task.labeled[rng.gen_range(0..task.labeled.len())]);
        }
    }
    let mut labels = vec![0u8; half];
    labels.resize(b, 1);
    Ok(Batch { nodes, labels })
}

/// A stochastic objective the first-order meta-update can drive.
pub trait Objective: Sync {
    type Params: Clone + Send + Sync;
    type Grad: Clone + Send;
    type Batch;

    fn sample(&self, rng: &mut Rng) -> Result<Self::Batch>;
    fn loss_and_gradient(&self, params: &Self::Params, batch: &Self::Batch) -> Result<(f64, Self::Grad)>;
    /// `params - lr * grad`.
    fn step(&self, params: &Self::Params, grad: &Self::Grad, lr: f64) -> Result<Self::Params>;
    fn accumulate(&self, total: &mut Self::Grad, grad: &Self::Grad);
}

/// Result of one first-order meta-update.
#[derive(Debug, Clone)]
pub struct MetaStep<P> {
    pub params: P,
    /// Loss at the adapted parameters on each task's fresh batch.
    pub task_losses: Vec<f64>,
}

/// Per-task random streams, kept across epochs.
#[derive(Debug, Clone)]
pub struct TaskStreams {
    pub inner: Rng,
    pub meta: Rng,
}

impl TaskStreams {
    pub fn for_task(seed: u64, task: usize) -> Self {
        TaskStreams {
            inner: rng::stream(seed, Stream::InnerBatch(task)),
            meta: rng::stream(seed, Stream::MetaBatch(task)),
        }
    }
}

/// Runs `steps` plain gradient steps from `params`; returns the adapted
/// parameters. The input is left untouched.
pub fn adapt<O: Objective>(
    objective: &O,
    params: &O::Params,
    steps: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<O::Params> {
    let mut current = params.clone();
    for _ in 0..steps {
        let batch = objective.sample(rng)?;
        let (loss, grad) = objective.loss_and_gradient(&current, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                detail: "non-finite loss during inner adaptation".into(),
            });
        }
        current = objective.step(&current, &grad, lr)?;
    }
    Ok(current)
}

/// One first-order meta-update over `objectives`.
///
/// Tasks are adapted independently (in parallel when `exec` allows); the
/// gradients are summed in task order, so the result does not depend on the
/// execution mode.
pub fn fomaml_step<O: Objective>(
    objectives: &[O],
    params: &O::Params,
    streams: &mut [TaskStreams],
    inner_steps: usize,
    inner_lr: f64,
    meta_lr: f64,
    exec: Exec,
) -> Result<MetaStep<O::Params>> {
    if objectives.is_empty() {
        return Err(Error::Config("meta-update needs at least one task".into()));
    }
    if streams.len() != objectives.len() {
        return Err(Error::Config("one stream pair per task required".into()));
    }
    let jobs: Vec<(&O, TaskStreams)> = objectives.iter().zip(streams.iter().cloned()).collect();
    let outcomes = exec.map(&jobs, |_, (objective, streams)| {
        let mut streams = streams.clone();
        let adapted = adapt(*objective, params, inner_steps, inner_lr, &mut streams.inner)?;
        let batch = objective.sample(&mut streams.meta)?;
        let (loss, grad) = objective.loss_and_gradient(&adapted, &batch)?;
        Ok::<_, Error>((loss, grad, streams))
    });

    let mut task_losses = Vec::with_capacity(objectives.len());
    let mut total: Option<O::Grad> = None;
    for (slot, outcome) in streams.iter_mut().zip(outcomes) {
        let (loss, grad, next) = outcome?;
        *slot = next;
        task_losses.push(loss);
        match total.as_mut() {
            None => total = Some(grad),
            Some(t) => objectives[0].accumulate(t, &grad),
        }
    }
    let total = total.expect("at least one task");
    let params = objectives[0].step(params, &total, meta_lr)?;
    Ok(MetaStep {
        params,
        task_losses,
    })
}

/// GDN deviation-loss objective on one task.
pub struct GdnObjective<'a> {
    pub task: &'a Task,
    pub loss: &'a LossConfig,
    pub batch_size: usize,
}

impl Objective for GdnObjective<'_> {
    type Params = GdnParams;
    type Grad = GdnGradients;
    type Batch = Batch;

    fn sample(&self, rng: &mut Rng) -> Result<Batch> {
        sample_batch(self.task, self.batch_size, rng)
    }

    fn loss_and_gradient(&self, params: &GdnParams, batch: &Batch) -> Result<(f64, GdnGradients)> {
        batch_loss_and_gradient(params, &self.task.propagated, batch, self.loss)
    }

    fn step(&self, params: &GdnParams, grad: &GdnGradients, lr: f64) -> Result<GdnParams> {
        params.apply_gradient_step(grad, lr)
    }

    fn accumulate(&self, total: &mut GdnGradients, grad: &GdnGradients) {
        total.add_assign(grad);
    }
}

/// Deviation loss of a batch and its gradient with respect to the parameters.
pub fn batch_loss_and_gradient(
    params: &GdnParams,
    feats: &PropagatedFeatures,
    batch: &Batch,
    loss: &LossConfig,
) -> Result<(f64, GdnGradients)> {
    forward_backward(params, feats, &batch.nodes, |scores| {
        loss_and_grad(scores, &batch.labels, loss)
    })
}

/// Adapts `params` to `task` with `cfg.inner_steps` steps at rate `cfg.inner_lr`.
pub fn inner_adapt(
    params: &GdnParams,
    task: &Task,
    cfg: &MetaConfig,
    loss: &LossConfig,
    rng: &mut Rng,
) -> Result<GdnParams> {
    let objective = GdnObjective {
        task,
        loss,
        batch_size: cfg.batch_size,
    };
    adapt(&objective, params, cfg.inner_steps, cfg.inner_lr, rng)
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: GdnParams,
    pub epoch: usize,
    pub streams: Vec<TaskStreams>,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    /// Fresh state: initialized parameters and per-task streams.
    pub fn new(cfg: &MetaConfig, num_tasks: usize, feature_dim: usize) -> Result<Self> {
        Ok(TrainState {
            params: cfg.init(feature_dim)?,
            epoch: 0,
            streams: (0..num_tasks).map(|i| TaskStreams::for_task(cfg.seed, i)).collect(),
            loss_history: Vec::new(),
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_losses: Vec<f64>,
    pub meta_loss: f64,
}

/// Processes every auxiliary task once and applies the meta-update.
pub fn meta_epoch(
    mut state: TrainState,
    tasks: &[Task],
    cfg: &MetaConfig,
    loss: &LossConfig,
) -> Result<(TrainState, EpochRecord)> {
    let objectives: Vec<GdnObjective<'_>> = tasks
        .iter()
        .map(|task| GdnObjective {
            task,
            loss,
            batch_size: cfg.batch_size,
        })
        .collect();
    let step = fomaml_step(
        &objectives,
        &state.params,
        &mut state.streams,
        cfg.inner_steps,
        cfg.inner_lr,
        cfg.meta_lr,
        cfg.exec,
    )
    .map_err(|e| match e {
        Error::Diverged { detail, .. } => Error::Diverged {
            epoch: state.epoch,
            detail,
        },
        other => other,
    })?;
    let meta_loss = step.task_losses.iter().sum::<f64>() / step.task_losses.len() as f64;
    if !meta_loss.is_finite() || !step.params.all_finite() {
        return Err(Error::Diverged {
            epoch: state.epoch,
            detail: format!("meta-loss {meta_loss}"),
        });
    }
    let record = EpochRecord {
        epoch: state.epoch,
        task_losses: step.task_losses,
        meta_loss,
    };
    state.params = step.params;
    state.epoch += 1;
    state.loss_history.push(meta_loss);
    Ok((state, record))
}

fn check_tasks(tasks: &[Task]) -> Result<usize> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::Config("meta-training needs at least one auxiliary task".into()))?;
    let d = first.feature_dim();
    if let Some(t) = tasks.iter().find(|t| t.feature_dim() != d) {
        return Err(Error::Shape(format!(
            "task {:?} has feature dimension {}, expected {d}",
            t.name,
            t.feature_dim()
        )));
    }
    Ok(d)
}

/// Meta-trains from a fresh initialization for `cfg.epochs` epochs.
pub fn train_meta(aux_tasks: &[Task], cfg: &MetaConfig) -> Result<GdnParams> {
    Ok(train_meta_with(aux_tasks, cfg, |_, _| Ok(()))?.params)
}

/// As [`train_meta`], calling `observe` after every epoch (for logging and
/// periodic checkpoints).
pub fn train_meta_with<F>(aux_tasks: &[Task], cfg: &MetaConfig, mut observe: F) -> Result<TrainState>
where
    F: FnMut(&EpochRecord, &GdnParams) -> Result<()>,
{
    cfg.validate()?;
    let d = check_tasks(aux_tasks)?;
    let loss = cfg.resolve_loss()?;
    let mut state = TrainState::new(cfg, aux_tasks.len(), d)?;
    for _ in 0..cfg.epochs {
        let (next, record) = meta_epoch(state, aux_tasks, cfg, &loss)?;
        observe(&record, &next.params)?;
        state = next;
    }
    Ok(state)
}

/// Held-out nodes used to pick the best checkpoint during training.
#[derive(Debug, Clone)]
pub struct Validation {
    pub nodes: Vec<usize>,
    pub labels: Vec<u8>,
}

impl Validation {
    pub fn auc(&self, params: &GdnParams, feats: &PropagatedFeatures) -> Result<f64> {
        let batch = model::forward(params, feats, &self.nodes)?;
        metrics::auc_roc(&batch.scores, &self.labels)
    }
}

/// Outcome of a validated training run.
#[derive(Debug, Clone)]
pub struct Trained {
    pub params: GdnParams,
    /// Epoch whose parameters were kept (0 means the starting point).
    pub best_epoch: usize,
    pub best_validation_auc: Option<f64>,
    pub initial_validation_auc: Option<f64>,
    pub loss_history: Vec<f64>,
}

fn plain_training(
    start: GdnParams,
    task: &Task,
    cfg: &MetaConfig,
    loss: &LossConfig,
    lr: f64,
    epochs: usize,
    mut rng: Rng,
    validation: Option<&Validation>,
) -> Result<Trained> {
    let objective = GdnObjective {
        task,
        loss,
        batch_size: cfg.batch_size,
    };
    let feats = &task.propagated;
    let initial = validation.map(|v| v.auc(&start, feats)).transpose()?;
    let mut best = (start.clone(), 0usize, initial);
    let mut params = start;
    let mut history = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let batch = objective.sample(&mut rng)?;
        let (value, grad) = objective.loss_and_gradient(&params, &batch)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("loss {value}"),
            });
        }
        history.push(value);
        params = params.apply_gradient_step(&grad, lr)?;
        if let Some(v) = validation {
            if epoch % cfg.validate_every == 0 || epoch == epochs {
                let auc = v.auc(&params, feats)?;
                if best.2.is_none_or(|b| auc > b) {
                    best = (params.clone(), epoch, Some(auc));
                }
            }
        }
    }
    if validation.is_none() {
        best = (params, epochs, None);
    }
    Ok(Trained {
        params: best.0,
        best_epoch: best.1,
        best_validation_auc: best.2,
        initial_validation_auc: initial,
        loss_history: history,
    })
}

/// Fine-tunes `params` on the target task for `cfg.fine_tune_epochs` steps
/// at rate `cfg.inner_lr`.
pub fn fine_tune(params: &GdnParams, target: &Task, cfg: &MetaConfig) -> Result<GdnParams> {
    Ok(fine_tune_validated(params, target, cfg, None)?.params)
}

/// Fine-tuning with best-validation-AUC checkpoint selection. The starting
/// parameters are a candidate, so the kept validation AUC never drops below
/// the initial one.
pub fn fine_tune_validated(
    params: &GdnParams,
    target: &Task,
    cfg: &MetaConfig,
    validation: Option<&Validation>,
) -> Result<Trained> {
    cfg.validate()?;
    if params.input_dim() != target.feature_dim() {
        return Err(Error::Shape(format!(
            "checkpoint expects {} features, target has {}",
            params.input_dim(),
            target.feature_dim()
        )));
    }
    let loss = cfg.resolve_loss()?;
    plain_training(
        params.clone(),
        target,
        cfg,
        &loss,
        cfg.inner_lr,
        cfg.fine_tune_epochs,
        rng::stream(cfg.seed, Stream::FineTune),
        validation,
    )
}

/// GDN trained on one network alone, `cfg.epochs` steps at `cfg.inner_lr`.
pub fn train_single(task: &Task, cfg: &MetaConfig) -> Result<GdnParams> {
    Ok(train_single_validated(task, cfg, None)?.params)
}

/// Single-network training with optional best-validation selection.
///
/// Batches come from the same stream the meta-trainer uses for task 0's
/// meta-update batches, so with a zero inner rate and one task the two
/// trainers walk identical trajectories.
pub fn train_single_validated(
    task: &Task,
    cfg: &MetaConfig,
    validation: Option<&Validation>,
) -> Result<Trained> {
    cfg.validate()?;
    let loss = cfg.resolve_loss()?;
    let start = cfg.init(task.feature_dim())?;
    plain_training(
        start,
        task,
        cfg,
        &loss,
        cfg.inner_lr,
        cfg.epochs,
        rng::stream(cfg.seed, Stream::MetaBatch(0)),
        validation,
    )
}
