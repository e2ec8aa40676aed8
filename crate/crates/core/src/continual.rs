//! Sequential training driver, evaluation metrics and the pathway probe.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{align_and_fuse_with_report, FusionConfig, FusionReport, HeadFusion, LayerPolicy};
use crate::data::{Dataset, Task, TaskStream};
use crate::error::{invalid, Result};
use crate::matching::PlanMode;
use crate::net::{train_task, HeadSelector, KdMode, Model, TrainConfig};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Max-similarity matching in shallow layers, min-similarity in the last
    /// `n_deep` feature layers.
    Lwi,
    /// Max-similarity matching in every layer.
    AllMax,
    /// One model trained on each task in turn, no fusion, no distillation.
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub strategy: Strategy,
    /// Channels per task compared by the pathway overlap.
    pub top_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Small-scale profile: 8-64-64 MLP, short training, hard matching with
    /// old heads carried verbatim.
    pub fn desk() -> Self {
        Self {
            hidden: vec![64, 64],
            train: TrainConfig::desk(),
            fusion: FusionConfig {
                policy: LayerPolicy {
                    mode: PlanMode::Hard,
                    ..LayerPolicy::default()
                },
                heads: HeadFusion::Carry,
                ..FusionConfig::default()
            },
            strategy: Strategy::Lwi,
            top_k: 10,
        }
    }

    /// Long schedule with the library's fusion defaults.
    pub fn paper() -> Self {
        Self {
            train: TrainConfig::paper(),
            fusion: FusionConfig::default(),
            ..Self::desk()
        }
    }
}

/// Per-step metrics of a run. Steps and tasks are 0-based in memory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    /// Row `s` holds task-aware accuracy (%) on tasks `0..=s` after step `s`.
    pub acc_matrix: Vec<Vec<f64>>,
    /// Task-agnostic accuracy (%) over tasks `0..=s` after step `s`.
    pub agnostic_acc: Vec<f64>,
    /// Average forgetting after step `s`, for `s >= 1`.
    pub forgetting: Vec<f64>,
    /// Final-model activation level per channel, one vector per task.
    pub activation_levels: Vec<Vec<f64>>,
}

impl MetricsLog {
    /// Mean task-aware accuracy over all tasks after the last step.
    pub fn final_average_accuracy(&self) -> f64 {
        self.acc_matrix.last().map_or(0.0, |r| r.iter().sum::<f64>() / r.len() as f64)
    }

    pub fn final_forgetting(&self) -> Option<f64> {
        self.forgetting.last().copied()
    }

    /// Writes `acc_matrix.csv`, `agnostic.csv`, `forgetting.csv` and
    /// `activations.csv` into `dir`. Steps, tasks and channels are 1-based.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut acc = String::from("step,task,accuracy\n");
        for (s, row) in self.acc_matrix.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                writeln!(acc, "{},{},{v:.6}", s + 1, j + 1).unwrap();
            }
        }
        fs::write(dir.join("acc_matrix.csv"), acc)?;

        let mut agn = String::from("step,accuracy\n");
        for (s, v) in self.agnostic_acc.iter().enumerate() {
            writeln!(agn, "{},{v:.6}", s + 1).unwrap();
        }
        fs::write(dir.join("agnostic.csv"), agn)?;

        let mut fgt = String::from("step,forgetting\n");
        for (s, v) in self.forgetting.iter().enumerate() {
            writeln!(fgt, "{},{v:.6}", s + 2).unwrap();
        }
        fs::write(dir.join("forgetting.csv"), fgt)?;

        fs::write(dir.join("activations.csv"), activations_csv(&self.activation_levels))?;
        Ok(())
    }
}

pub fn activations_csv(levels: &[Vec<f64>]) -> String {
    let mut out = String::from("task_id,channel_index,level\n");
    for (t, lv) in levels.iter().enumerate() {
        for (c, v) in lv.iter().enumerate() {
            writeln!(out, "{},{},{v:.6}", t + 1, c + 1).unwrap();
        }
    }
    out
}

/// Snapshot of the result model after one step, for callers that persist them.
pub struct StepOutcome<'a> {
    pub step: usize,
    pub model: &'a Model,
    pub fusion: Option<&'a FusionReport>,
}

fn train_config_for(cfg: &TrainConfig, root: u64, task: usize, distill: bool) -> TrainConfig {
    TrainConfig {
        seed: seed::derive(root, 1000 + task as u64),
        kd_mode: if distill { cfg.kd_mode } else { KdMode::None },
        ..cfg.clone()
    }
}

fn head_rng(root: u64, task: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed::derive(root, 2000 + task as u64))
}

/// Trains a fresh model on the first task alone with cross-entropy.
pub fn train_supervised(task: &Task, hidden: &[usize], cfg: &TrainConfig) -> Result<Model> {
    if hidden.is_empty() {
        return invalid("at least one hidden layer is required");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, 1));
    let mut model = Model::init(task.train.width(), hidden, &[task.class_count()], &mut rng);
    let tcfg = train_config_for(cfg, cfg.seed, 0, false);
    train_task(&mut model, task.train.x(), &task.train.labels, 0, None, &tcfg)?;
    Ok(model)
}

/// Runs the whole stream. See [`run_lwi_with`].
pub fn run_lwi(stream: &TaskStream, cfg: &RunConfig) -> Result<(Model, MetricsLog)> {
    run_lwi_with(stream, cfg, |_| Ok(()))
}

/// Trains the tasks in order and evaluates the result model after each.
///
/// Task 1 trains a fresh model with cross-entropy. Each later task appends a
/// head to a copy of the current result model, trains it with distillation
/// against that model, and fuses the two (strategies `lwi` and `all_max`).
/// `finetune` keeps training the single model instead. `on_step` sees the
/// result model after every step.
pub fn run_lwi_with(
    stream: &TaskStream,
    cfg: &RunConfig,
    mut on_step: impl FnMut(StepOutcome<'_>) -> Result<()>,
) -> Result<(Model, MetricsLog)> {
    if stream.is_empty() {
        return invalid("task stream is empty");
    }
    cfg.train.validate()?;
    let n_layers = cfg.hidden.len();
    let mut fusion = cfg.fusion;
    if cfg.strategy == Strategy::AllMax {
        fusion.policy.n_deep = 0;
    }
    if cfg.strategy != Strategy::Finetune {
        fusion.validate(n_layers)?;
    }
    if cfg.top_k == 0 {
        return invalid("top_k must be at least 1");
    }

    let root = cfg.train.seed;
    let mut log = MetricsLog::default();
    let mut current = train_supervised(&stream.tasks[0], &cfg.hidden, &cfg.train)?;
    record_step(&mut log, &current, &stream.tasks[..1])?;
    on_step(StepOutcome {
        step: 0,
        model: &current,
        fusion: None,
    })?;

    for (t, task) in stream.tasks.iter().enumerate().skip(1) {
        let mut student = current.clone();
        student.add_head(task.class_count(), &mut head_rng(root, t));
        let report = match cfg.strategy {
            Strategy::Finetune => {
                let tcfg = train_config_for(&cfg.train, root, t, false);
                train_task(&mut student, task.train.x(), &task.train.labels, t, None, &tcfg)?;
                current = student;
                None
            }
            Strategy::Lwi | Strategy::AllMax => {
                let distill = cfg.train.kd_mode == KdMode::Output;
                let tcfg = train_config_for(&cfg.train, root, t, distill);
                let teacher = distill.then_some(&current);
                train_task(&mut student, task.train.x(), &task.train.labels, t, teacher, &tcfg)?;
                let (fused, report) = align_and_fuse_with_report(&current, &student, &fusion)?;
                current = fused;
                Some(report)
            }
        };
        record_step(&mut log, &current, &stream.tasks[..=t])?;
        on_step(StepOutcome {
            step: t,
            model: &current,
            fusion: report.as_ref(),
        })?;
    }

    log.activation_levels = stream
        .tasks
        .iter()
        .enumerate()
        .map(|(t, task)| activation_levels(&current, &task.test, t))
        .collect::<Result<_>>()?;
    Ok((current, log))
}

fn record_step(log: &mut MetricsLog, model: &Model, seen: &[Task]) -> Result<()> {
    log.acc_matrix.push(eval_task_aware(model, seen)?);
    log.agnostic_acc.push(eval_task_agnostic(model, seen)?);
    if let Some(&f) = forgetting(&log.acc_matrix).last() {
        log.forgetting.push(f);
    }
    Ok(())
}

fn check_heads(model: &Model, tasks: &[Task]) -> Result<()> {
    if model.heads.len() != tasks.len() {
        return invalid(format!(
            "model has {} heads but {} tasks are evaluated",
            model.heads.len(),
            tasks.len()
        ));
    }
    for (i, (h, t)) in model.head_sizes().iter().zip(tasks).enumerate() {
        if *h != t.class_count() {
            return invalid(format!(
                "head {} has {h} outputs but task {} has {} classes",
                i + 1,
                i + 1,
                t.class_count()
            ));
        }
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Percentage of rows whose argmax equals the label.
pub fn accuracy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    let correct = logits
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &y)| argmax(*row) == y)
        .count();
    100.0 * correct as f64 / labels.len() as f64
}

/// Accuracy (%) of each task's test split using only that task's head.
pub fn eval_task_aware(model: &Model, tasks: &[Task]) -> Result<Vec<f64>> {
    check_heads(model, tasks)?;
    tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let logits = model.forward(task.test.x(), HeadSelector::One(t))?;
            Ok(accuracy(logits.view(), &task.test.labels))
        })
        .collect()
}

/// Accuracy (%) over the pooled test splits, taking the argmax across all
/// heads and comparing against the label's global class index.
pub fn eval_task_agnostic(model: &Model, tasks: &[Task]) -> Result<f64> {
    check_heads(model, tasks)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for task in tasks {
        let logits = model.forward(task.test.x(), HeadSelector::All)?;
        for (row, &y) in logits.axis_iter(Axis(0)).zip(&task.test.labels) {
            if argmax(row) == task.class_offset + y {
                correct += 1;
            }
        }
        total += task.test.len();
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// Reference accuracy that forgetting is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForgettingReference {
    /// Best accuracy on the task at any step up to and including the current
    /// one. Forgetting is never negative.
    BestSoFar,
    /// Best accuracy at steps strictly before the current one. Improvements
    /// show up as negative forgetting (backward transfer).
    BestBefore,
}

/// Average forgetting per step with the [`ForgettingReference::BestSoFar`]
/// reference. Entry `i` belongs to step `i + 1`; step 0 has none, so fewer
/// than two rows give an empty result.
pub fn forgetting(acc_matrix: &[Vec<f64>]) -> Vec<f64> {
    forgetting_with(acc_matrix, ForgettingReference::BestSoFar)
}

pub fn forgetting_with(acc_matrix: &[Vec<f64>], reference: ForgettingReference) -> Vec<f64> {
    (1..acc_matrix.len())
        .map(|s| {
            let last = match reference {
                ForgettingReference::BestSoFar => s,
                ForgettingReference::BestBefore => s - 1,
            };
            let drops: Vec<f64> = (0..s)
                .map(|j| {
                    let best = (j..=last).map(|t| acc_matrix[t][j]).fold(f64::NEG_INFINITY, f64::max);
                    best - acc_matrix[s][j]
                })
                .collect();
            drops.iter().sum::<f64>() / drops.len() as f64
        })
        .collect()
}

/// Mean absolute post-ReLU activation per channel of the last feature layer.
pub fn activation_levels(model: &Model, task_data: &Dataset, task_id: usize) -> Result<Vec<f64>> {
    if task_data.is_empty() {
        return invalid("activation probe needs at least one example");
    }
    model.head(task_id)?;
    let h = model.features(task_data.x())?;
    Ok(h.mapv(f64::abs).mean_axis(Axis(0)).expect("non-empty").to_vec())
}

fn top_k_indices(levels: &[f64], k: usize) -> BTreeSet<usize> {
    let mut idx: Vec<usize> = (0..levels.len()).collect();
    idx.sort_by(|&a, &b| levels[b].total_cmp(&levels[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).collect()
}

/// Jaccard index of the two top-`k` channel sets.
pub fn pathway_overlap(levels_a: &[f64], levels_b: &[f64], top_k: usize) -> Result<f64> {
    if top_k == 0 {
        return invalid("top_k must be at least 1");
    }
    if levels_a.len() != levels_b.len() {
        return invalid(format!(
            "activation vectors differ in length: {} vs {}",
            levels_a.len(),
            levels_b.len()
        ));
    }
    if top_k > levels_a.len() {
        return invalid(format!("top_k = {top_k} exceeds {} channels", levels_a.len()));
    }
    let a = top_k_indices(levels_a, top_k);
    let b = top_k_indices(levels_b, top_k);
    let inter = a.intersection(&b).count();
    let union = a.union(&b).count();
    Ok(inter as f64 / union as f64)
}

/// Overlap for every task pair `(i, j)` with `i < j`.
pub fn pairwise_overlaps(levels: &[Vec<f64>], top_k: usize) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for i in 0..levels.len() {
        for j in i + 1..levels.len() {
            out.push((i, j, pathway_overlap(&levels[i], &levels[j], top_k)?));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::LayerWeights;
    use ndarray::{array, Array1, Array2};

    fn task(x: Array2<f64>, labels: Vec<usize>, classes: usize, offset: usize) -> Task {
        let d = Dataset::new(x, labels, classes).unwrap();
        Task {
            train: d.clone(),
            test: d,
            class_offset: offset,
        }
    }

    /// One feature layer copying the 3 inputs; head reads them directly.
    fn passthrough(heads: Vec<LayerWeights>) -> Model {
        Model::new(vec![LayerWeights::new(Array2::eye(3), Array1::zeros(3)).unwrap()], heads).unwrap()
    }

    #[test]
    fn task_aware_fixture() {
        let head = LayerWeights::new(Array2::eye(3), Array1::zeros(3)).unwrap();
        let model = passthrough(vec![head]);
        let x = array![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]];
        let t = task(x, vec![0, 1, 0], 3, 0);
        let acc = eval_task_aware(&model, &[t]).unwrap();
        assert!((acc[0] - 200.0 / 3.0).abs() < 1e-9);
        assert!((acc[0] - 66.667).abs() < 1e-3);
    }

    #[test]
    fn constant_logits_pick_class_zero() {
        let model = passthrough(vec![LayerWeights::zeros(2, 3)]);
        let x = Array2::ones((4, 3));
        let t = task(x, vec![0, 1, 1, 1], 2, 0);
        assert_eq!(eval_task_aware(&model, &[t]).unwrap(), vec![25.0]);
    }

    #[test]
    fn single_head_agnostic_equals_aware() {
        let head = LayerWeights::new(array![[1.0, -1.0, 0.0], [0.0, 1.0, 1.0]], array![0.0, 0.1]).unwrap();
        let model = passthrough(vec![head]);
        let x = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.5], [0.3, 0.3, 0.0], [0.0, 0.0, 0.0]];
        let t = task(x, vec![0, 1, 0, 0], 2, 0);
        let ts = [t];
        assert_eq!(eval_task_agnostic(&model, &ts).unwrap(), eval_task_aware(&model, &ts).unwrap()[0]);
    }

    #[test]
    fn agnostic_uses_global_index() {
        // Head 1 has 2 classes, head 2 has 3. Input lights up global output 3.
        let h1 = LayerWeights::zeros(2, 3);
        let h2 = LayerWeights::new(array![[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 0.0, 0.0]], Array1::zeros(3)).unwrap();
        let model = passthrough(vec![h1, h2]);
        let t1 = task(array![[0.0, 1.0, 0.0]], vec![0], 2, 0);
        let right = task(array![[1.0, 0.0, 0.0]], vec![1], 3, 2);
        let wrong = task(array![[1.0, 0.0, 0.0]], vec![2], 3, 2);
        let logits = model.forward(array![[1.0, 0.0, 0.0]].view(), HeadSelector::All).unwrap();
        assert_eq!(argmax(logits.row(0)), 3);
        assert_eq!(eval_task_agnostic(&model, &[t1.clone(), right]).unwrap(), 100.0);
        assert_eq!(eval_task_agnostic(&model, &[t1, wrong]).unwrap(), 50.0);
    }

    #[test]
    fn head_count_mismatch() {
        let model = passthrough(vec![LayerWeights::zeros(2, 3)]);
        let t = task(Array2::ones((1, 3)), vec![0], 2, 0);
        assert!(eval_task_aware(&model, &[t.clone(), t.clone()]).is_err());
        assert!(eval_task_agnostic(&model, &[t.clone(), t]).is_err());
    }

    #[test]
    fn forgetting_cases() {
        let constant = vec![vec![80.0], vec![80.0, 70.0], vec![80.0, 70.0, 60.0]];
        assert_eq!(forgetting(&constant), vec![0.0, 0.0]);
        assert!(forgetting(&constant[..1]).is_empty());

        let improving = vec![vec![50.0], vec![60.0, 50.0], vec![70.0, 60.0, 50.0]];
        let f = forgetting_with(&improving, ForgettingReference::BestBefore);
        assert!(f.iter().all(|&v| v < 0.0), "{f:?}");
        assert_eq!(forgetting(&improving), vec![0.0, 0.0]);
    }

    #[test]
    fn activation_level_cases() {
        let zero = Model::new(vec![LayerWeights::zeros(4, 3)], vec![LayerWeights::zeros(2, 4)]).unwrap();
        let d = Dataset::new(array![[1.0, 2.0, 3.0], [-1.0, 0.0, 2.0]], vec![0, 1], 2).unwrap();
        let lv = activation_levels(&zero, &d, 0).unwrap();
        assert_eq!(lv, vec![0.0; 4]);

        // Channel 0 = relu(x0), channel 1 = relu(x0 - x1).
        let layer = LayerWeights::new(array![[1.0, 0.0, 0.0], [1.0, -1.0, 0.0]], Array1::zeros(2)).unwrap();
        let m = Model::new(vec![layer], vec![LayerWeights::zeros(2, 2)]).unwrap();
        let lv = activation_levels(&m, &d, 0).unwrap();
        // rows: (1, 2) -> (1, 0); (-1, 0) -> (0, 0)
        assert_eq!(lv, vec![0.5, 0.0]);
        assert!(activation_levels(&m, &d, 1).is_err());
    }

    #[test]
    fn overlap_cases() {
        let a: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert_eq!(pathway_overlap(&a, &a, 10).unwrap(), 1.0);
        let b: Vec<f64> = (0..20).map(|i| -(i as f64)).collect();
        assert_eq!(pathway_overlap(&a, &b, 10).unwrap(), 0.0);
        // Top 10 of a is 10..20; c puts 15..20 and 0..5 on top.
        let c: Vec<f64> = (0..20).map(|i| if !(5..15).contains(&i) { 1.0 } else { 0.0 }).collect();
        assert!((pathway_overlap(&a, &c, 10).unwrap() - 5.0 / 15.0).abs() < 1e-12);
        assert!(pathway_overlap(&a, &b, 0).is_err());
        assert!(pathway_overlap(&a, &b[..5], 3).is_err());
    }

    #[test]
    fn csv_export_shapes() {
        let log = MetricsLog {
            acc_matrix: vec![vec![90.0], vec![85.0, 95.0]],
            agnostic_acc: vec![90.0, 80.0],
            forgetting: vec![5.0],
            activation_levels: vec![vec![0.5, 0.25], vec![0.0, 1.0]],
        };
        let dir = tempfile::tempdir().unwrap();
        log.write_csv(dir.path()).unwrap();
        let acc = fs::read_to_string(dir.path().join("acc_matrix.csv")).unwrap();
        assert_eq!(acc, "step,task,accuracy\n1,1,90.000000\n2,1,85.000000\n2,2,95.000000\n");
        let fg = fs::read_to_string(dir.path().join("forgetting.csv")).unwrap();
        assert_eq!(fg, "step,forgetting\n2,5.000000\n");
        let act = fs::read_to_string(dir.path().join("activations.csv")).unwrap();
        assert_eq!(act.lines().count(), 5);
    }

    #[test]
    fn empty_stream_rejected() {
        let s = TaskStream { tasks: vec![] };
        assert!(run_lwi(&s, &RunConfig::default()).is_err());
    }
}
