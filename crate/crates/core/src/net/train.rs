//! Exact backpropagation and SGD-with-momentum training.
//!
//! The current task's head gets cross-entropy against the batch labels. When a
//! teacher is supplied, every earlier head additionally gets a distillation
//! term pulling its outputs toward the teacher's outputs for the same head; the
//! distillation terms are averaged over those heads and scaled by
//! `lambda_kd`.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{ce_grad, ce_loss, kd_grad, kd_loss};
use super::model::{LayerWeights, Model};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KdMode {
    None,
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub lambda_kd: f64,
    pub kd_temperature: f64,
    pub kd_mode: KdMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small-scale profile used by default.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.1,
            lr_decay_epochs: vec![],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            lambda_kd: 1.0,
            kd_temperature: 2.0,
            kd_mode: KdMode::Output,
            seed: 0,
        }
    }

    /// Full-length schedule: 200 epochs, lr 0.1 decayed by 0.1 at epochs 80
    /// and 120, batch 64, momentum 0.9.
    pub fn paper() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            lr: 0.1,
            lr_decay_epochs: vec![80, 120],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return invalid("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return invalid(format!("lr must be nonnegative, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return invalid(format!("lr_decay_factor must be in (0, 1], got {}", self.lr_decay_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.lambda_kd >= 0.0 && self.lambda_kd.is_finite()) {
            return invalid(format!("lambda_kd must be nonnegative, got {}", self.lambda_kd));
        }
        if !(self.kd_temperature > 0.0) {
            return invalid(format!("kd_temperature must be positive, got {}", self.kd_temperature));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }
}

/// A minibatch for one task. `labels` index into that task's head.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
    pub task: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
}

/// Parameter-shaped gradient (or momentum) buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub feature_layers: Vec<LayerWeights>,
    pub heads: Vec<LayerWeights>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        let z = |l: &LayerWeights| LayerWeights::zeros(l.rows(), l.cols());
        Self {
            feature_layers: model.feature_layers.iter().map(z).collect(),
            heads: model.heads.iter().map(z).collect(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &LayerWeights> {
        self.feature_layers.iter().chain(&self.heads)
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }
}

/// SGD with heavy-ball momentum: `v = mu * v + g; w -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: Gradients,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Gradients::zeros_like(model),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64) {
        let mu = self.momentum;
        let params = model.feature_layers.iter_mut().chain(model.heads.iter_mut());
        let vel = self.velocity.feature_layers.iter_mut().chain(self.velocity.heads.iter_mut());
        let grad = grads.feature_layers.iter().chain(&grads.heads);
        for ((p, v), g) in params.zip(vel).zip(grad) {
            v.weight.zip_mut_with(&g.weight, |vi, &gi| *vi = mu * *vi + gi);
            v.bias.zip_mut_with(&g.bias, |vi, &gi| *vi = mu * *vi + gi);
            p.weight.scaled_add(-lr, &v.weight);
            p.bias.scaled_add(-lr, &v.bias);
        }
    }
}

fn check_teacher(student: &Model, teacher: &Model, task: usize) -> Result<()> {
    if teacher.input_width() != student.input_width() {
        return invalid("teacher input width differs from student");
    }
    if teacher.heads.len() < task {
        return invalid(format!(
            "teacher has {} heads, needs {task} to distill task {}",
            teacher.heads.len(),
            task + 1
        ));
    }
    if teacher.head_sizes()[..task] != student.head_sizes()[..task] {
        return invalid("teacher head sizes differ from student's old heads");
    }
    Ok(())
}

/// Total loss and its exact gradient for one batch.
pub fn loss_and_gradients(
    model: &Model,
    batch: &Batch<'_>,
    teacher: Option<&Model>,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    if batch.task >= model.heads.len() {
        return invalid(format!("task {} has no head", batch.task + 1));
    }
    let trace = model.forward_traced(batch.x)?;
    let mut head_grads: Vec<Option<Array2<f64>>> = vec![None; model.heads.len()];

    let ce = ce_loss(trace.head_logits[batch.task].view(), batch.labels)?;
    head_grads[batch.task] = Some(ce_grad(trace.head_logits[batch.task].view(), batch.labels)?);

    let mut kd = 0.0;
    if let Some(teacher) = teacher {
        check_teacher(model, teacher, batch.task)?;
        let old = batch.task;
        if old > 0 {
            let t_trace = teacher.forward_traced(batch.x)?;
            let scale = cfg.lambda_kd / old as f64;
            for h in 0..old {
                let s = trace.head_logits[h].view();
                let t = t_trace.head_logits[h].view();
                kd += kd_loss(s, t, cfg.kd_temperature)? / old as f64;
                head_grads[h] = Some(kd_grad(s, t, cfg.kd_temperature)? * scale);
            }
        }
    }

    let mut grads = Gradients::zeros_like(model);
    let top = trace.activations.last().expect("feature layers");
    let mut d_act = Array2::<f64>::zeros(top.dim());
    for (h, g) in head_grads.iter().enumerate() {
        if let Some(g) = g {
            grads.heads[h].weight = g.t().dot(top);
            grads.heads[h].bias = g.sum_axis(Axis(0));
            d_act += &g.dot(&model.heads[h].weight);
        }
    }
    for l in (0..model.feature_layers.len()).rev() {
        let mut dz = d_act;
        dz.zip_mut_with(&trace.pre_activations[l], |d, &z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        });
        let input = if l == 0 { batch.x.to_owned() } else { trace.activations[l - 1].clone() };
        grads.feature_layers[l].weight = dz.t().dot(&input);
        grads.feature_layers[l].bias = dz.sum_axis(Axis(0));
        d_act = dz.dot(&model.feature_layers[l].weight);
    }

    let total = ce + cfg.lambda_kd * kd;
    Ok((LossBreakdown { ce, kd, total }, grads))
}

fn check_teacher_presence(teacher: Option<&Model>, task: usize, cfg: &TrainConfig) -> Result<()> {
    let wants_teacher = cfg.kd_mode == KdMode::Output && task > 0;
    match (wants_teacher, teacher.is_some()) {
        (true, false) => invalid("distillation enabled but no teacher given"),
        (false, true) => invalid("teacher given but distillation is disabled for this task"),
        _ => Ok(()),
    }
}

/// One SGD update on `L_ce + lambda * L_kd`. Returns the pre-update losses.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Sgd,
    batch: &Batch<'_>,
    teacher: Option<&Model>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    check_teacher_presence(teacher, batch.task, cfg)?;
    let (loss, grads) = loss_and_gradients(model, batch, teacher, cfg)?;
    optimizer.step(model, &grads, lr);
    Ok(loss)
}

/// Trains `model` on one task's data for `cfg.epochs` epochs with per-epoch
/// seeded shuffling. Returns the mean loss of each epoch.
pub fn train_task(
    model: &mut Model,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    task: usize,
    teacher: Option<&Model>,
    cfg: &TrainConfig,
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    check_teacher_presence(teacher, task, cfg)?;
    if x.nrows() != labels.len() || labels.is_empty() {
        return invalid("training data must be non-empty with one label per row");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Sgd::new(model, cfg.momentum);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut sum = LossBreakdown::default();
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let bx = x.select(Axis(0), chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let batch = Batch {
                x: bx.view(),
                labels: &by,
                task,
            };
            let loss = train_step(model, &mut optimizer, &batch, teacher, cfg, lr)?;
            sum.ce += loss.ce;
            sum.kd += loss.kd;
            sum.total += loss.total;
            batches += 1;
        }
        let n = batches as f64;
        history.push(LossBreakdown {
            ce: sum.ce / n,
            kd: sum.kd / n,
            total: sum.total / n,
        });
    }
    Ok(history)
}

/// Scalar loss only; used by finite-difference checks.
pub fn total_loss(model: &Model, batch: &Batch<'_>, teacher: Option<&Model>, cfg: &TrainConfig) -> Result<f64> {
    Ok(loss_and_gradients(model, batch, teacher, cfg)?.0.total)
}
