//! Layer-wise channel alignment and fusion of two models.
//!
//! Layers are processed in order. At layer `l` the old model's incoming
//! weights are first re-indexed by the previous layer's plan, then its
//! channels (weight rows) are matched against the new model's channels and
//! reordered by the current plan, and finally the two layers are mixed with
//! coefficient `k` on the old side.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::matching::{adaptive_match, assignment_score, round_to_permutation, MatchConfig, PlanMode, SimilarityMatrix, TransportPlan};
use crate::net::{LayerWeights, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerPolicy {
    /// Number of final feature layers matched on negated similarity.
    pub n_deep: usize,
    pub metric: Metric,
    pub mode: PlanMode,
}

impl Default for LayerPolicy {
    fn default() -> Self {
        Self {
            n_deep: 1,
            metric: Metric::Euclidean,
            mode: PlanMode::Soft,
        }
    }
}

/// Weight `k` given to the aligned old model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FusionWeight {
    Fixed(f64),
    Schedule(KSchedule),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KSchedule {
    /// `k = t / (t + 1)` when the old model holds `t` tasks, so every task
    /// ends up with equal weight.
    EqualWeight,
}

impl FusionWeight {
    pub fn resolve(&self, old_tasks: usize) -> f64 {
        match self {
            Self::Fixed(k) => *k,
            Self::Schedule(KSchedule::EqualWeight) => old_tasks as f64 / (old_tasks as f64 + 1.0),
        }
    }
}

/// What happens to heads the old model already has.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadFusion {
    /// Mix re-indexed old heads with the new model's copies using `k`.
    Fuse,
    /// Keep the re-indexed old heads verbatim.
    Carry,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub k: FusionWeight,
    pub policy: LayerPolicy,
    #[serde(rename = "match")]
    pub match_cfg: MatchConfig,
    pub heads: HeadFusion,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            k: FusionWeight::Schedule(KSchedule::EqualWeight),
            policy: LayerPolicy::default(),
            match_cfg: MatchConfig::default(),
            heads: HeadFusion::Fuse,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, n_feature_layers: usize) -> Result<()> {
        if let FusionWeight::Fixed(k) = self.k {
            if !(0.0..=1.0).contains(&k) {
                return invalid(format!("fusion coefficient k must be in [0, 1], got {k}"));
            }
        }
        if self.policy.n_deep > n_feature_layers {
            return invalid(format!(
                "n_deep = {} exceeds the {n_feature_layers} feature layers",
                self.policy.n_deep
            ));
        }
        self.match_cfg.validate()
    }
}

/// Per-layer record of how a fusion matched channels.
#[derive(Clone, Debug)]
pub struct LayerMatch {
    /// 1-based feature layer index.
    pub layer: usize,
    pub deep: bool,
    /// Score of the plan against the unnegated similarity.
    pub score: f64,
    /// Solver status before any rounding to a permutation.
    pub converged: bool,
    pub iterations: usize,
    pub plan: TransportPlan,
}

#[derive(Clone, Debug)]
pub struct FusionReport {
    pub k: f64,
    pub layers: Vec<LayerMatch>,
}

/// Channel similarity between two layers of equal shape, one row per channel.
///
/// Euclidean scores are negated distances so that higher is more similar.
/// Cosine pairs involving a zero row score 0. Biases are ignored.
pub fn layer_similarity(old_aligned: &LayerWeights, new: &LayerWeights, metric: Metric) -> Result<SimilarityMatrix> {
    if old_aligned.shape() != new.shape() {
        return invalid(format!(
            "layer shapes differ: {:?} vs {:?}",
            old_aligned.shape(),
            new.shape()
        ));
    }
    let (a, b) = (&old_aligned.weight, &new.weight);
    let n = a.nrows();
    let values = match metric {
        Metric::Euclidean => Array2::from_shape_fn((n, n), |(i, j)| {
            -a.row(i)
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        }),
        Metric::Cosine => {
            let norms = |m: &Array2<f64>| -> Vec<f64> { m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect() };
            let (na, nb) = (norms(a), norms(b));
            Array2::from_shape_fn((n, n), |(i, j)| {
                if na[i] == 0.0 || nb[j] == 0.0 {
                    0.0
                } else {
                    a.row(i).dot(&b.row(j)) / (na[i] * nb[j])
                }
            })
        }
    };
    SimilarityMatrix::new(values)
}

/// Flags layer `layer_index` (1-based) as deep when it is among the last
/// `policy.n_deep` feature layers. The similarity passes through unchanged.
pub fn apply_layer_policy(
    sim: SimilarityMatrix,
    layer_index: usize,
    policy: &LayerPolicy,
    n_feature_layers: usize,
) -> Result<(SimilarityMatrix, bool)> {
    if layer_index == 0 || layer_index > n_feature_layers {
        return invalid(format!(
            "layer index {layer_index} outside 1..={n_feature_layers}"
        ));
    }
    if policy.n_deep > n_feature_layers {
        return invalid(format!(
            "n_deep = {} exceeds the {n_feature_layers} feature layers",
            policy.n_deep
        ));
    }
    let deep = layer_index > n_feature_layers - policy.n_deep;
    Ok((sim, deep))
}

/// `weight * p_prev`: re-index input columns by the previous layer's plan.
pub fn permute_incoming(w: &LayerWeights, p_prev: &TransportPlan) -> Result<LayerWeights> {
    if w.cols() != p_prev.size() {
        return invalid(format!(
            "layer has {} inputs, plan is {}x{}",
            w.cols(),
            p_prev.size(),
            p_prev.size()
        ));
    }
    Ok(LayerWeights {
        weight: w.weight.dot(&p_prev.matrix()),
        bias: w.bias.clone(),
    })
}

/// `p^T * weight` and `p^T * bias`: move channel rows to their matched slots.
pub fn permute_outgoing(w: &LayerWeights, p: &TransportPlan) -> Result<LayerWeights> {
    if w.rows() != p.size() {
        return invalid(format!(
            "layer has {} channels, plan is {}x{}",
            w.rows(),
            p.size(),
            p.size()
        ));
    }
    let pt = p.matrix().reversed_axes();
    Ok(LayerWeights {
        weight: pt.dot(&w.weight),
        bias: pt.dot(&w.bias),
    })
}

fn mix(old: &LayerWeights, new: &LayerWeights, k: f64) -> LayerWeights {
    let blend = |o: f64, n: f64| k * o + (1.0 - k) * n;
    let mut weight = old.weight.clone();
    weight.zip_mut_with(&new.weight, |o, &n| *o = blend(*o, n));
    let mut bias = old.bias.clone();
    bias.zip_mut_with(&new.bias, |o, &n| *o = blend(*o, n));
    LayerWeights { weight, bias }
}

fn check_compatible(old: &Model, new: &Model) -> Result<()> {
    let (a, b) = (old.architecture(), new.architecture());
    if a.input_width != b.input_width || a.feature_widths != b.feature_widths {
        return invalid(format!(
            "feature extractors differ: {}-{:?} vs {}-{:?}",
            a.input_width, a.feature_widths, b.input_width, b.feature_widths
        ));
    }
    if b.head_sizes.len() < a.head_sizes.len() || b.head_sizes[..a.head_sizes.len()] != a.head_sizes[..] {
        return invalid(format!(
            "new model heads {:?} do not extend old model heads {:?}",
            b.head_sizes, a.head_sizes
        ));
    }
    Ok(())
}

/// Aligns `model_old` to `model_new` layer by layer and mixes them.
pub fn align_and_fuse(model_old: &Model, model_new: &Model, cfg: &FusionConfig) -> Result<Model> {
    align_and_fuse_with_report(model_old, model_new, cfg).map(|(m, _)| m)
}

pub fn align_and_fuse_with_report(
    model_old: &Model,
    model_new: &Model,
    cfg: &FusionConfig,
) -> Result<(Model, FusionReport)> {
    check_compatible(model_old, model_new)?;
    let n_layers = model_old.feature_layers.len();
    cfg.validate(n_layers)?;
    let k = cfg.k.resolve(model_old.heads.len());

    let mut fused_layers = Vec::with_capacity(n_layers);
    let mut matches = Vec::with_capacity(n_layers);
    let mut prev_plan: Option<TransportPlan> = None;
    for (i, (old, new)) in model_old.feature_layers.iter().zip(&model_new.feature_layers).enumerate() {
        let layer = i + 1;
        let old_in = match &prev_plan {
            None => old.clone(),
            Some(p) => permute_incoming(old, p)?,
        };
        let sim = layer_similarity(&old_in, new, cfg.policy.metric)?;
        let (sim, deep) = apply_layer_policy(sim, layer, &cfg.policy, n_layers)?;
        let mut plan = adaptive_match(&sim, &cfg.match_cfg, deep)?;
        let (converged, iterations) = (plan.converged(), plan.iterations());
        if cfg.policy.mode == PlanMode::Hard {
            plan = round_to_permutation(&plan)?;
        }
        let aligned = permute_outgoing(&old_in, &plan)?;
        fused_layers.push(mix(&aligned, new, k));
        matches.push(LayerMatch {
            layer,
            deep,
            score: assignment_score(&sim, &plan)?,
            converged,
            iterations,
            plan: plan.clone(),
        });
        prev_plan = Some(plan);
    }

    let head_plan = round_to_permutation(prev_plan.as_ref().expect("at least one feature layer"))?;
    let mut heads = Vec::with_capacity(model_new.heads.len());
    for (h, new_head) in model_new.heads.iter().enumerate() {
        let fused = match model_old.heads.get(h) {
            Some(old_head) => {
                let aligned = permute_incoming(old_head, &head_plan)?;
                match cfg.heads {
                    HeadFusion::Fuse => mix(&aligned, new_head, k),
                    HeadFusion::Carry => aligned,
                }
            }
            None => new_head.clone(),
        };
        heads.push(fused);
    }

    let model = Model::new(fused_layers, heads)?;
    Ok((model, FusionReport { k, layers: matches }))
}
