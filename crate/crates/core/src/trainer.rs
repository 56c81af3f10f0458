//! Simultaneous training of the embedding model and the quality head, plus
//! the two ablations: CCS instead of CR as regression target, and fitting the
//! head on top of a frozen model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiability::{record_from_cosines, ClassifiabilityRecord};
use crate::error::{Error, Result};
use crate::geometry::dot;
use crate::losses::{arcface_loss, combined_loss, smooth_l1, CombinedLoss, LossConfig};
use crate::model::{Gradients, HeadInput, ModelState, Trace};

/// Quantity the head learns to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    #[default]
    Cr,
    Ccs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    #[default]
    Simultaneous,
    OnTop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub batch_size: usize,
    pub total_iterations: usize,
    pub lr: f64,
    /// Iterations at which the learning rate is divided by 10. `None` scales
    /// the 20K/28K-of-32K schedule to `total_iterations`.
    pub lr_milestones: Option<Vec<usize>>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// The angular margin grows linearly from 0 to `loss.margin` over this
    /// many iterations. 0 applies the full margin from the first step.
    #[serde(default)]
    pub margin_warmup: usize,
    pub seed: u64,
    pub target_mode: TargetMode,
    pub training_mode: TrainingMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            batch_size: 64,
            total_iterations: 5000,
            lr: 0.1,
            lr_milestones: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            margin_warmup: 0,
            seed: 0,
            target_mode: TargetMode::Cr,
            training_mode: TrainingMode::Simultaneous,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0
            || !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.momentum)
            || !(self.weight_decay >= 0.0)
        {
            return Err(Error::Config(format!(
                "invalid optimizer settings: batch_size={} lr={} momentum={} weight_decay={}",
                self.batch_size, self.lr, self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn milestones(&self) -> Vec<usize> {
        match &self.lr_milestones {
            Some(m) => m.clone(),
            None => default_milestones(self.total_iterations),
        }
    }

    /// Learning rate in effect at the 0-based `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let drops = self.milestones().iter().filter(|&&m| iteration >= m).count();
        self.lr / 10f64.powi(drops as i32)
    }

    /// Loss settings in effect at the 0-based `iteration`.
    pub fn loss_at(&self, iteration: usize) -> LossConfig {
        let mut loss = self.loss;
        if iteration < self.margin_warmup {
            loss.margin *= (iteration + 1) as f64 / self.margin_warmup as f64;
        }
        loss
    }
}

/// `⌊0.625·T⌋` and `⌊0.875·T⌋`.
pub fn default_milestones(total_iterations: usize) -> Vec<usize> {
    vec![total_iterations * 5 / 8, total_iterations * 7 / 8]
}

/// Per-iteration training summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub arc_loss: f64,
    pub cr_loss: f64,
    pub total_loss: f64,
    pub mean_ccs: f64,
    pub mean_nnccs: f64,
}

/// In-memory labeled training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Dimension {
                expected: inputs.len(),
                actual: labels.len(),
            });
        }
        if inputs.is_empty() {
            return Err(Error::Config("empty dataset".into()));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn check_classes(&self, classes: usize) -> Result<()> {
        let mut seen = vec![false; classes];
        for (i, &y) in self.labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::Label { label: y, classes }.at_sample(i));
            }
            seen[y] = true;
        }
        let present = seen.iter().filter(|&&s| s).count();
        if present < classes {
            return Err(Error::Config(format!(
                "dataset covers {present} of {classes} classes"
            )));
        }
        Ok(())
    }
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
    momentum: f64,
}

impl Sgd {
    pub fn new(state: &ModelState, momentum: f64) -> Self {
        Self {
            velocity: state.slices().iter().map(|s| vec![0.0; s.len()]).collect(),
            momentum,
        }
    }

    /// Applies one update to the parameter slices selected by `range`
    /// (indices into the checkpoint slice order). `grads` must already
    /// include weight decay.
    fn step(&mut self, state: &mut ModelState, grads: &Gradients, lr: f64, range: std::ops::Range<usize>) {
        let mu = self.momentum;
        for (k, (p, g)) in state.slices_mut().into_iter().zip(grads.slices()).enumerate() {
            if !range.contains(&k) {
                continue;
            }
            let v = &mut self.velocity[k];
            for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

/// Epoch-wise seeded shuffler; batches may straddle epoch boundaries.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn target_of(r: &ClassifiabilityRecord, mode: TargetMode) -> f64 {
    match mode {
        TargetMode::Cr => r.cr,
        TargetMode::Ccs => r.ccs,
    }
}

/// Forward traces, the flattened cosine matrix and classifiability records
/// for a batch.
pub struct BatchForward {
    pub traces: Vec<Trace>,
    pub cosines: Vec<f64>,
    pub records: Vec<ClassifiabilityRecord>,
}

pub fn forward_batch(
    state: &ModelState,
    inputs: &[&[f64]],
    labels: &[usize],
    eps: f64,
) -> Result<BatchForward> {
    let classes = state.num_classes();
    let mut traces = Vec::with_capacity(inputs.len());
    let mut cosines = Vec::with_capacity(inputs.len() * classes);
    let mut records = Vec::with_capacity(inputs.len());
    for (i, (x, &y)) in inputs.iter().zip(labels).enumerate() {
        let t = state.forward_trace(x).map_err(|e| e.at_sample(i))?;
        records.push(record_from_cosines(&t.output.cosines, y, eps).map_err(|e| e.at_sample(i))?);
        cosines.extend_from_slice(&t.output.cosines);
        traces.push(t);
    }
    Ok(BatchForward {
        traces,
        cosines,
        records,
    })
}

/// Regression targets from the current model, detached from the graph.
pub fn compute_targets(
    state: &ModelState,
    inputs: &[&[f64]],
    labels: &[usize],
    loss: &LossConfig,
    mode: TargetMode,
) -> Result<Vec<f64>> {
    Ok(forward_batch(state, inputs, labels, loss.eps)?
        .records
        .iter()
        .map(|r| target_of(r, mode))
        .collect())
}

fn combined_from_forward(
    fwd: &BatchForward,
    classes: usize,
    labels: &[usize],
    targets: &[f64],
    loss: &LossConfig,
) -> Result<CombinedLoss> {
    let arc = arcface_loss(&fwd.cosines, classes, labels, loss.scale, loss.margin)?;
    let preds: Vec<f64> = fwd.traces.iter().map(|t| t.output.quality).collect();
    let reg = smooth_l1(&preds, targets, loss.beta)?;
    combined_loss(arc, reg, loss.lambda)
}

/// Combined loss and its gradient for fixed regression `targets`. Weight
/// decay is not included.
pub fn loss_and_gradients(
    state: &ModelState,
    inputs: &[&[f64]],
    labels: &[usize],
    targets: &[f64],
    loss: &LossConfig,
) -> Result<(CombinedLoss, Gradients)> {
    let fwd = forward_batch(state, inputs, labels, loss.eps)?;
    let combined = combined_from_forward(&fwd, state.num_classes(), labels, targets, loss)?;
    let grads = backprop(state, &fwd, &combined);
    Ok((combined, grads))
}

/// Combined loss value for fixed targets, without gradients.
pub fn objective(
    state: &ModelState,
    inputs: &[&[f64]],
    labels: &[usize],
    targets: &[f64],
    loss: &LossConfig,
) -> Result<f64> {
    let fwd = forward_batch(state, inputs, labels, loss.eps)?;
    Ok(combined_from_forward(&fwd, state.num_classes(), labels, targets, loss)?.value)
}

fn backprop(state: &ModelState, fwd: &BatchForward, loss: &CombinedLoss) -> Gradients {
    let classes = state.num_classes();
    let mut grads = Gradients::zeros_like(state);
    for (i, t) in fwd.traces.iter().enumerate() {
        let gc = &loss.grad_cosines[i * classes..(i + 1) * classes];
        state.backward(t, gc, loss.grad_prediction[i], &mut grads, true);
    }
    state.finish_center_gradients(&mut grads);
    grads
}

fn gather<'a>(data: &'a Dataset, idx: &[usize]) -> (Vec<&'a [f64]>, Vec<usize>) {
    (
        idx.iter().map(|&i| data.inputs[i].as_slice()).collect(),
        idx.iter().map(|&i| data.labels[i]).collect(),
    )
}

fn report(iteration: usize, loss: &CombinedLoss, records: &[ClassifiabilityRecord]) -> StepReport {
    let n = records.len() as f64;
    StepReport {
        iteration,
        arc_loss: loss.arc_value,
        cr_loss: loss.reg_value,
        total_loss: loss.value,
        mean_ccs: records.iter().map(|r| r.ccs).sum::<f64>() / n,
        mean_nnccs: records.iter().map(|r| r.nnccs).sum::<f64>() / n,
    }
}

fn finish_update(state: &mut ModelState, iteration: usize, loss: f64) -> Result<()> {
    state
        .centers
        .renormalize()
        .map_err(|_| Error::Divergence { iteration, loss })?;
    if !state.is_finite() {
        return Err(Error::Divergence { iteration, loss });
    }
    Ok(())
}

/// One simultaneous step: forward, detached targets, combined loss, backprop
/// through margin logits, centers, head and backbone, SGD update, center
/// renormalization.
pub fn train_step(
    state: &mut ModelState,
    sgd: &mut Sgd,
    inputs: &[&[f64]],
    labels: &[usize],
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<StepReport> {
    if inputs.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let loss_cfg = &cfg.loss_at(iteration);
    let fwd = forward_batch(state, inputs, labels, loss_cfg.eps)?;
    let targets: Vec<f64> = fwd
        .records
        .iter()
        .map(|r| target_of(r, cfg.target_mode))
        .collect();
    let combined = combined_from_forward(&fwd, state.num_classes(), labels, &targets, loss_cfg)?;
    if !combined.value.is_finite() {
        return Err(Error::Divergence {
            iteration,
            loss: combined.value,
        });
    }
    let mut grads = backprop(state, &fwd, &combined);
    grads.add_weight_decay(state, cfg.weight_decay);
    let all = 0..state.slices().len();
    sgd.step(state, &grads, cfg.lr_at(iteration), all);
    finish_update(state, iteration, combined.value)?;
    Ok(report(iteration, &combined, &fwd.records))
}

/// One ArcFace-only step: the head is neither read nor updated.
pub fn arcface_step(
    state: &mut ModelState,
    sgd: &mut Sgd,
    inputs: &[&[f64]],
    labels: &[usize],
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<StepReport> {
    let loss_cfg = &cfg.loss_at(iteration);
    let fwd = forward_batch(state, inputs, labels, loss_cfg.eps)?;
    let arc = arcface_loss(
        &fwd.cosines,
        state.num_classes(),
        labels,
        loss_cfg.scale,
        loss_cfg.margin,
    )?;
    if !arc.value.is_finite() {
        return Err(Error::Divergence {
            iteration,
            loss: arc.value,
        });
    }
    let classes = state.num_classes();
    let mut grads = Gradients::zeros_like(state);
    for (i, t) in fwd.traces.iter().enumerate() {
        state.backward(
            t,
            &arc.grad[i * classes..(i + 1) * classes],
            0.0,
            &mut grads,
            true,
        );
    }
    state.finish_center_gradients(&mut grads);
    grads.add_weight_decay(state, cfg.weight_decay);
    let body = 0..state.body_slice_count();
    sgd.step(state, &grads, cfg.lr_at(iteration), body);
    finish_update(state, iteration, arc.value)?;
    let n = fwd.records.len() as f64;
    Ok(StepReport {
        iteration,
        arc_loss: arc.value,
        cr_loss: 0.0,
        total_loss: arc.value,
        mean_ccs: fwd.records.iter().map(|r| r.ccs).sum::<f64>() / n,
        mean_nnccs: fwd.records.iter().map(|r| r.nnccs).sum::<f64>() / n,
    })
}

type StepFn = fn(&mut ModelState, &mut Sgd, &[&[f64]], &[usize], &TrainConfig, usize) -> Result<StepReport>;

fn run(
    mut state: ModelState,
    data: &Dataset,
    cfg: &TrainConfig,
    step: StepFn,
) -> Result<(ModelState, Vec<StepReport>)> {
    cfg.validate()?;
    data.check_classes(state.num_classes())?;
    let mut sgd = Sgd::new(&state, cfg.momentum);
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let mut reports = Vec::with_capacity(cfg.total_iterations);
    for it in 0..cfg.total_iterations {
        let idx = sampler.next_batch(cfg.batch_size);
        let (xs, ys) = gather(data, &idx);
        reports.push(step(&mut state, &mut sgd, &xs, &ys, cfg, it)?);
    }
    Ok((state, reports))
}

/// Simultaneous training for `cfg.total_iterations` steps.
pub fn train(state: ModelState, data: &Dataset, cfg: &TrainConfig) -> Result<(ModelState, Vec<StepReport>)> {
    if cfg.training_mode != TrainingMode::Simultaneous {
        return Err(Error::Config(
            "train() runs simultaneous mode; use train_on_top".into(),
        ));
    }
    run(state, data, cfg, train_step)
}

/// Plain ArcFace training of backbone and centers (no quality head), used to
/// produce frozen models for on-top fitting and evaluation.
pub fn train_arcface(
    state: ModelState,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelState, Vec<StepReport>)> {
    run(state, data, cfg, arcface_step)
}

/// Fits only the head of a frozen model against targets computed once from
/// that model. Returns the new state and the per-iteration Smooth-L1 loss.
pub fn train_on_top(
    frozen: &ModelState,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelState, Vec<f64>)> {
    if cfg.training_mode != TrainingMode::OnTop {
        return Err(Error::Config(
            "train_on_top requires training_mode = on_top".into(),
        ));
    }
    cfg.validate()?;
    data.check_classes(frozen.num_classes())?;
    let xs: Vec<&[f64]> = data.inputs.iter().map(|v| v.as_slice()).collect();
    let fwd = forward_batch(frozen, &xs, &data.labels, cfg.loss.eps)?;
    let targets: Vec<f64> = fwd
        .records
        .iter()
        .map(|r| target_of(r, cfg.target_mode))
        .collect();
    let features: Vec<&[f64]> = fwd
        .traces
        .iter()
        .map(|t| match frozen.config().head_input {
            HeadInput::Raw => t.output.embedding.as_slice(),
            HeadInput::Normalized => t.output.normalized.as_slice(),
        })
        .collect();

    let mut state = frozen.clone();
    let mut sgd = Sgd::new(&state, cfg.momentum);
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let head = state.body_slice_count()..state.slices().len();
    let mut losses = Vec::with_capacity(cfg.total_iterations);
    for it in 0..cfg.total_iterations {
        let idx = sampler.next_batch(cfg.batch_size);
        let preds: Vec<f64> = idx
            .iter()
            .map(|&i| dot(&state.head_weight, features[i]) + state.head_bias)
            .collect();
        let batch_targets: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
        let reg = smooth_l1(&preds, &batch_targets, cfg.loss.beta)?;
        if !reg.value.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                loss: reg.value,
            });
        }
        let mut grads = Gradients::zeros_like(&state);
        for (&i, &g) in idx.iter().zip(&reg.grad) {
            grads
                .head_weight
                .iter_mut()
                .zip(features[i])
                .for_each(|(gw, f)| *gw += g * f);
            grads.head_bias += g;
        }
        grads.add_weight_decay(&state, cfg.weight_decay);
        sgd.step(&mut state, &grads, cfg.lr_at(it), head.clone());
        if !state.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                loss: reg.value,
            });
        }
        losses.push(reg.value);
    }
    Ok((state, losses))
}
