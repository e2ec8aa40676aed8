//! Experiment configuration files.
//!
//! One TOML or JSON document (chosen by extension) describes a whole run:
//!
//! ```toml
//! profile = "desk"          # base values: "desk" (default) or "paper"
//! seed = 0                  # the only source of randomness
//! output_dir = "runs/desk"  # relative to the config file
//! strategy = "lwi"          # lwi | all_max | finetune
//! hidden = [64, 64]
//! top_k = 10
//!
//! [data]
//! kind = "synthetic"        # synthetic | idx | csv
//!
//! [train]                   # overrides individual fields of the profile
//! epochs = 30
//!
//! [fusion]
//! k = "equal_weight"
//! ```
//!
//! Every key is optional and unknown keys are rejected.

use std::path::{Path, PathBuf};

use lwi_core::continual::{RunConfig, Strategy};
use lwi_core::data::{self, SyntheticSpec, TaskStream};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl Profile {
    pub fn base(self) -> RunConfig {
        match self {
            Self::Desk => RunConfig::desk(),
            Self::Paper => RunConfig::paper(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticData {
    pub dim: usize,
    pub classes_per_task: usize,
    pub tasks: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    pub separation: f64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            dim: s.dim,
            classes_per_task: s.classes_per_task,
            tasks: s.tasks,
            samples_per_class: s.samples_per_class,
            cluster_spread: s.cluster_spread,
            separation: s.separation,
        }
    }
}

impl SyntheticData {
    pub fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            dim: self.dim,
            classes_per_task: self.classes_per_task,
            tasks: self.tasks,
            samples_per_class: self.samples_per_class,
            cluster_spread: self.cluster_spread,
            separation: self.separation,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxData {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    /// Without a separate test pair, 20% of each class is held out.
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    pub tasks: usize,
    /// Assign classes to tasks in seeded random order instead of label order.
    #[serde(default)]
    pub shuffle_classes: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    pub path: PathBuf,
    pub label_column: String,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    pub tasks: usize,
    #[serde(default)]
    pub shuffle_classes: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataConfig {
    Synthetic(SyntheticData),
    Idx(IdxData),
    Csv(CsvData),
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::Synthetic(SyntheticData::default())
    }
}

impl DataConfig {
    /// Builds the task stream. Relative paths resolve against `base_dir`.
    pub fn load(&self, seed: u64, base_dir: &Path) -> CliResult<TaskStream> {
        let shuffle = |on: bool| on.then_some(seed);
        let stream = match self {
            Self::Synthetic(s) => data::gen_synthetic(&s.spec(seed)),
            Self::Idx(d) => {
                let train = data::load_idx(base_dir.join(&d.train_images), base_dir.join(&d.train_labels))
                    .map_err(CliError::usage)?;
                let test = match (&d.test_images, &d.test_labels) {
                    (Some(i), Some(l)) => Some(data::load_idx(base_dir.join(i), base_dir.join(l)).map_err(CliError::usage)?),
                    (None, None) => None,
                    _ => return Err(CliError::usage("data: test_images and test_labels must be given together")),
                };
                data::split_classes_with(&train, test.as_ref(), d.tasks, shuffle(d.shuffle_classes))
            }
            Self::Csv(d) => {
                let (train, map) = data::load_csv(base_dir.join(&d.path), &d.label_column).map_err(CliError::usage)?;
                let test = match &d.test_path {
                    Some(p) => {
                        let (test, test_map) = data::load_csv(base_dir.join(p), &d.label_column).map_err(CliError::usage)?;
                        let to_train = test_map
                            .iter()
                            .map(|name| {
                                map.iter().position(|m| m == name).ok_or_else(|| {
                                    CliError::usage(format!("data: test label {name:?} does not occur in the training CSV"))
                                })
                            })
                            .collect::<CliResult<Vec<usize>>>()?;
                        let labels = test.labels.iter().map(|&l| to_train[l]).collect();
                        Some(data::Dataset::new(test.features, labels, train.class_count).map_err(CliError::usage)?)
                    }
                    None => None,
                };
                data::split_classes_with(&train, test.as_ref(), d.tasks, shuffle(d.shuffle_classes))
            }
        };
        stream.map_err(|e| CliError::usage(format!("data: {e}")))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    profile: Profile,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    strategy: Option<Strategy>,
    #[serde(default)]
    hidden: Option<Vec<usize>>,
    #[serde(default)]
    top_k: Option<usize>,
    #[serde(default)]
    data: Option<DataConfig>,
    #[serde(default)]
    train: Option<Map<String, Value>>,
    #[serde(default)]
    fusion: Option<Map<String, Value>>,
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub run: RunConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, json, base_dir).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str, json: bool, base_dir: PathBuf) -> CliResult<Self> {
        let raw: RawConfig = if json {
            serde_json::from_str(text).map_err(CliError::usage)?
        } else {
            toml::from_str(text).map_err(|e| CliError::usage(e.to_string().trim_end()))?
        };
        let mut run = raw.profile.base();
        if let Some(overrides) = raw.train {
            if overrides.contains_key("seed") {
                return Err(CliError::usage("[train]: use the top-level `seed` key instead of `seed`"));
            }
            run.train = merge("train", &run.train, overrides)?;
        }
        if let Some(overrides) = raw.fusion {
            run.fusion = merge("fusion", &run.fusion, overrides)?;
        }
        run.train.seed = raw.seed;
        if let Some(s) = raw.strategy {
            run.strategy = s;
        }
        if let Some(h) = raw.hidden {
            run.hidden = h;
        }
        if let Some(k) = raw.top_k {
            run.top_k = k;
        }
        let cfg = Self {
            profile: raw.profile,
            seed: raw.seed,
            output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("runs").join(format!("seed-{}", raw.seed))),
            data: raw.data.unwrap_or_default(),
            run,
            base_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let run = &self.run;
        if run.hidden.is_empty() || run.hidden.contains(&0) {
            return Err(CliError::usage("hidden: at least one layer, every width at least 1"));
        }
        if run.top_k == 0 || run.top_k > *run.hidden.last().unwrap() {
            return Err(CliError::usage(format!(
                "top_k: must be between 1 and the last hidden width {}",
                run.hidden.last().unwrap()
            )));
        }
        run.train.validate().map_err(|e| CliError::usage(format!("[train]: {e}")))?;
        if run.strategy != Strategy::Finetune {
            run.fusion
                .validate(run.hidden.len())
                .map_err(|e| CliError::usage(format!("[fusion]: {e}")))?;
        }
        if let DataConfig::Synthetic(s) = &self.data {
            s.spec(self.seed).validate().map_err(|e| CliError::usage(format!("[data]: {e}")))?;
        }
        Ok(())
    }

    pub fn output_path(&self) -> PathBuf {
        self.base_dir.join(&self.output_dir)
    }

    pub fn load_stream(&self) -> CliResult<TaskStream> {
        self.data.load(self.seed, &self.base_dir)
    }
}

/// Overlays `overrides` on the serialized `base` and decodes the result, so
/// unknown keys surface as errors naming the key.
fn merge<T: Serialize + for<'de> Deserialize<'de>>(section: &str, base: &T, overrides: Map<String, Value>) -> CliResult<T> {
    let mut value = serde_json::to_value(base).expect("config types serialize");
    deep_merge(&mut value, Value::Object(overrides));
    serde_json::from_value(value).map_err(|e| CliError::usage(format!("[{section}]: {e}")))
}

fn deep_merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => deep_merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lwi_core::align::{FusionWeight, HeadFusion};
    use lwi_core::matching::PlanMode;

    fn parse(text: &str) -> CliResult<ExperimentConfig> {
        ExperimentConfig::parse(text, false, PathBuf::new())
    }

    #[test]
    fn empty_config_is_the_desk_profile() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.run, RunConfig::desk());
        assert_eq!(cfg.data, DataConfig::default());
    }

    #[test]
    fn overrides_apply_field_by_field() {
        let cfg = parse(
            "profile = \"paper\"\nseed = 4\n[train]\nepochs = 3\n[fusion]\nk = 0.25\n[fusion.policy]\nmode = \"hard\"\n",
        )
        .unwrap();
        assert_eq!(cfg.run.train.epochs, 3);
        assert_eq!(cfg.run.train.lr_decay_epochs, vec![80, 120]);
        assert_eq!(cfg.run.train.seed, 4);
        assert_eq!(cfg.run.fusion.k, FusionWeight::Fixed(0.25));
        assert_eq!(cfg.run.fusion.policy.mode, PlanMode::Hard);
        assert_eq!(cfg.run.fusion.policy.n_deep, 1);
        assert_eq!(cfg.run.fusion.heads, HeadFusion::Fuse);
    }

    #[test]
    fn unknown_keys_are_named() {
        for text in ["foo = 1", "[train]\nfoo = 1", "[fusion.policy]\nfoo = 1", "[data]\nkind = \"synthetic\"\nfoo = 1"] {
            let err = parse(text).unwrap_err();
            assert_eq!(err.code, 2);
            assert!(err.message.contains("foo"), "{text}: {}", err.message);
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "[train]\nlr = -1.0",
            "[fusion.policy]\nn_deep = 5",
            "[fusion]\nk = 2.0",
            "top_k = 0",
            "hidden = []",
            "[train]\nseed = 3",
            "[data]\nkind = \"synthetic\"\ntasks = 0",
        ] {
            assert_eq!(parse(text).unwrap_err().code, 2, "{text}");
        }
    }

    #[test]
    fn json_configs_parse_too() {
        let cfg = ExperimentConfig::parse(
            r#"{"seed": 2, "data": {"kind": "synthetic", "tasks": 2}, "train": {"epochs": 1}}"#,
            true,
            PathBuf::new(),
        )
        .unwrap();
        assert_eq!(cfg.run.train.epochs, 1);
        assert_eq!(cfg.data, DataConfig::Synthetic(SyntheticData { tasks: 2, ..SyntheticData::default() }));
    }
}
