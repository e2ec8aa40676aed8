//! Task streams: synthetic Gaussian clusters, class splits, IDX and CSV input.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Fraction of each class held out for evaluation.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.nrows() == 0 {
            return invalid("dataset must contain at least one example");
        }
        if features.nrows() != labels.len() {
            return invalid(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return invalid(format!("label {bad} out of range for {class_count} classes"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return invalid("features must be finite");
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    fn subset(&self, rows: &[usize], relabel: impl Fn(usize) -> usize, class_count: usize) -> Result<Self> {
        Dataset::new(
            self.features.select(Axis(0), rows),
            rows.iter().map(|&r| relabel(self.labels[r])).collect(),
            class_count,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
    /// Global index of this task's first class.
    pub class_offset: usize,
}

impl Task {
    pub fn class_count(&self) -> usize {
        self.train.class_count
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>) -> Result<Self> {
        validate_tasks(&tasks)?;
        Ok(Self { tasks })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_width(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.train.width())
    }

    pub fn head_sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(Task::class_count).collect()
    }
}

/// Checks offsets are contiguous from 0 and every split shares one width.
pub fn validate_tasks(tasks: &[Task]) -> Result<()> {
    let width = tasks.first().map(|t| t.train.width());
    let mut offset = 0;
    for (i, t) in tasks.iter().enumerate() {
        if t.class_offset != offset {
            return invalid(format!(
                "task {} has class offset {}, expected {offset}",
                i + 1,
                t.class_offset
            ));
        }
        if t.test.class_count != t.train.class_count {
            return invalid(format!("task {} train and test class counts differ", i + 1));
        }
        if Some(t.train.width()) != width || Some(t.test.width()) != width {
            return invalid(format!("task {} feature width differs from task 1", i + 1));
        }
        offset += t.train.class_count;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub classes_per_task: usize,
    pub tasks: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    /// Distance of every class mean from the origin, in units of
    /// `cluster_spread`.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 8,
            classes_per_task: 2,
            tasks: 4,
            samples_per_class: 200,
            cluster_spread: 1.0,
            separation: 6.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.classes_per_task == 0 || self.tasks == 0 {
            return invalid("dim, classes_per_task and tasks must be at least 1");
        }
        if self.samples_per_class < 2 {
            return invalid("samples_per_class must be at least 2 to hold out a test example");
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return invalid(format!("cluster_spread must be positive, got {}", self.cluster_spread));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return invalid(format!("separation must be positive, got {}", self.separation));
        }
        Ok(())
    }

    fn test_per_class(&self) -> usize {
        let n = self.samples_per_class;
        ((n as f64 * TEST_FRACTION).round() as usize).clamp(1, n - 1)
    }
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Class means on a sphere of radius `separation * spread`. Placement is
/// re-drawn (up to a fixed budget) until every pair of means is at least one
/// radius apart; the best draw is kept otherwise.
pub fn class_means(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = spec.tasks * spec.classes_per_task;
    let radius = spec.separation * spec.cluster_spread;
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for _ in 0..1000 {
        let means: Vec<Vec<f64>> = (0..n)
            .map(|_| random_unit(spec.dim, rng).into_iter().map(|x| x * radius).collect())
            .collect();
        let d = min_pairwise_distance(&means);
        if d >= radius {
            return means;
        }
        if best.as_ref().is_none_or(|(bd, _)| d > *bd) {
            best = Some((d, means));
        }
    }
    best.expect("at least one draw").1
}

/// Seeded Gaussian-cluster task stream. Each class keeps its last
/// `TEST_FRACTION` of samples as the test split.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<TaskStream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(spec, &mut rng);
    let n_test = spec.test_per_class();
    let n_train = spec.samples_per_class - n_test;
    let c = spec.classes_per_task;

    let mut tasks = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let mut train = (Vec::new(), Vec::new());
        let mut test = (Vec::new(), Vec::new());
        for local in 0..c {
            let mean = &means[t * c + local];
            for s in 0..spec.samples_per_class {
                let (xs, ys) = if s < n_train { &mut train } else { &mut test };
                for m in mean {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    xs.push(m + spec.cluster_spread * noise);
                }
                ys.push(local);
            }
        }
        let build = |(xs, ys): (Vec<f64>, Vec<usize>)| {
            let n = ys.len();
            Dataset::new(Array2::from_shape_vec((n, spec.dim), xs).expect("sized"), ys, c)
        };
        tasks.push(Task {
            train: build(train)?,
            test: build(test)?,
            class_offset: t * c,
        });
    }
    TaskStream::new(tasks)
}

/// Splits classes into `tasks` contiguous groups in label order, holding out
/// the last `TEST_FRACTION` of each class's examples for testing.
pub fn split_classes(full: &Dataset, tasks: usize) -> Result<TaskStream> {
    split_classes_with(full, None, tasks, None)
}

/// General form of [`split_classes`]. With `test` given, it is split the same
/// way instead of holding out from `full`. With `shuffle_seed`, classes are
/// assigned to tasks in a seeded random order instead of label order.
pub fn split_classes_with(
    full: &Dataset,
    test: Option<&Dataset>,
    tasks: usize,
    shuffle_seed: Option<u64>,
) -> Result<TaskStream> {
    if tasks == 0 {
        return invalid("task count must be at least 1");
    }
    let c = full.class_count;
    if !c.is_multiple_of(tasks) {
        return invalid(format!(
            "{c} classes cannot be split evenly into {tasks} tasks (remainder {})",
            c % tasks
        ));
    }
    if let Some(t) = test {
        if t.class_count != c || t.width() != full.width() {
            return invalid("test set class count or width differs from training set");
        }
    }
    let per_task = c / tasks;
    let mut order: Vec<usize> = (0..c).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }

    let by_class = |d: &Dataset| -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); c];
        for (i, &l) in d.labels.iter().enumerate() {
            rows[l].push(i);
        }
        rows
    };
    let full_rows = by_class(full);
    let test_rows = test.map(by_class);

    let mut out = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let group = &order[t * per_task..(t + 1) * per_task];
        let local: HashMap<usize, usize> = group.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for &class in group {
            let rows = &full_rows[class];
            match &test_rows {
                Some(tr) => {
                    train_idx.extend_from_slice(rows);
                    test_idx.extend_from_slice(&tr[class]);
                }
                None => {
                    if rows.len() < 2 {
                        return invalid(format!("class {class} has fewer than 2 examples to split"));
                    }
                    let n_test = ((rows.len() as f64 * TEST_FRACTION).round() as usize).clamp(1, rows.len() - 1);
                    let cut = rows.len() - n_test;
                    train_idx.extend_from_slice(&rows[..cut]);
                    test_idx.extend_from_slice(&rows[cut..]);
                }
            }
        }
        let relabel = |l: usize| local[&l];
        let test_src = test.unwrap_or(full);
        out.push(Task {
            train: full.subset(&train_idx, relabel, per_task)?,
            test: test_src.subset(&test_idx, relabel, per_task)?,
            class_offset: t * per_task,
        });
    }
    TaskStream::new(out)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(Error::Format {
            offset: offset as u64,
            message: "truncated header".into(),
        })
}

/// Parses IDX image bytes into `(count, width, pixels / 255)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Array2<f64>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES:#010x}"),
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let width = rows * cols;
    let need = count * width;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format {
            offset: (16 + body.len()) as u64,
            message: format!("truncated image data: need {need} pixel bytes, found {}", body.len()),
        });
    }
    if body.len() > need {
        return Err(Error::Format {
            offset: (16 + need) as u64,
            message: format!("{} trailing bytes after image data", body.len() - need),
        });
    }
    Ok(Array2::from_shape_fn((count, width), |(i, j)| body[i * width + j] as f64 / 255.0))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS:#010x}"),
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Format {
            offset: (8 + body.len().min(count)) as u64,
            message: format!("label file declares {count} labels but holds {}", body.len()),
        });
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair. Class count is `max label + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let features = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != features.nrows() {
        return Err(Error::Format {
            offset: 4,
            message: format!(
                "label count {} does not match image count {}",
                labels.len(),
                features.nrows()
            ),
        });
    }
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, class_count)
}

/// Dense label index to the original label text, in first-appearance order.
pub type LabelMap = Vec<String>;

/// Loads a numeric CSV with a header row. Every column other than
/// `label_column` is a feature.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<(Dataset, LabelMap)> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text, label_column)
}

pub fn parse_csv(text: &str, label_column: &str) -> Result<(Dataset, LabelMap)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Config(format!("label column {label_column:?} not found in header")))?;
    let width = headers.len() - 1;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut map: LabelMap = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (i, cell) in record.iter().enumerate() {
            if i == label_idx {
                let key = cell.trim().to_string();
                let next = map.len();
                let dense = *index.entry(key.clone()).or_insert_with(|| {
                    map.push(key);
                    next
                });
                labels.push(dense);
            } else {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("non-numeric value {cell:?} in column {:?}", &headers[i]),
                })?;
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    let n = labels.len();
    let features = Array2::from_shape_vec((n, width), features).expect("rectangular");
    Ok((Dataset::new(features, labels, map.len())?, map))
}
