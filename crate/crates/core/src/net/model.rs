use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{invalid, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Dense layer. `weight` maps the previous layer's activations (columns) to
/// this layer's pre-activations (rows).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerWeights {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        let (rows, cols) = weight.dim();
        if rows == 0 || cols == 0 {
            return invalid(format!("layer must be at least 1x1, got {rows}x{cols}"));
        }
        if bias.len() != rows {
            return invalid(format!("bias length {} does not match {rows} rows", bias.len()));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return invalid("layer parameters must be finite");
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            weight: Array2::zeros((rows, cols)),
            bias: Array1::zeros(rows),
        }
    }

    /// Uniform in +-1/sqrt(fan_in) for weights and biases.
    pub fn init_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound));
        let bias = Array1::from_shape_simple_fn(rows, || rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn rows(&self) -> usize {
        self.weight.nrows()
    }

    pub fn cols(&self) -> usize {
        self.weight.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weight.dim()
    }

    fn affine(&self, input: ArrayView2<'_, f64>) -> Array2<f64> {
        input.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_width: usize,
    pub feature_widths: Vec<usize>,
    pub head_sizes: Vec<usize>,
}

/// Multi-head MLP: ReLU feature layers followed by one linear head per task.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub feature_layers: Vec<LayerWeights>,
    pub heads: Vec<LayerWeights>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadSelector {
    All,
    One(usize),
}

/// Intermediate values of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Pre-activations of each feature layer.
    pub pre_activations: Vec<Array2<f64>>,
    /// Post-ReLU outputs of each feature layer.
    pub activations: Vec<Array2<f64>>,
    /// Logits of every head, in head order.
    pub head_logits: Vec<Array2<f64>>,
}

impl Model {
    pub fn new(feature_layers: Vec<LayerWeights>, heads: Vec<LayerWeights>) -> Result<Self> {
        let model = Self {
            feature_layers,
            heads,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_layers.is_empty() {
            return invalid("model needs at least one feature layer");
        }
        for (i, pair) in self.feature_layers.windows(2).enumerate() {
            if pair[1].cols() != pair[0].rows() {
                return invalid(format!(
                    "feature layer {} expects width {}, previous layer outputs {}",
                    i + 2,
                    pair[1].cols(),
                    pair[0].rows()
                ));
            }
        }
        let width = self.feature_width();
        for (i, head) in self.heads.iter().enumerate() {
            if head.cols() != width {
                return invalid(format!(
                    "head {} expects width {}, feature extractor outputs {width}",
                    i + 1,
                    head.cols()
                ));
            }
        }
        Ok(())
    }

    /// Random model with the given hidden widths and head sizes.
    pub fn init<R: Rng>(input_width: usize, hidden: &[usize], head_sizes: &[usize], rng: &mut R) -> Self {
        assert!(!hidden.is_empty(), "at least one hidden layer");
        let mut feature_layers = Vec::with_capacity(hidden.len());
        let mut prev = input_width;
        for &w in hidden {
            feature_layers.push(LayerWeights::init_uniform(w, prev, rng));
            prev = w;
        }
        let heads = head_sizes
            .iter()
            .map(|&c| LayerWeights::init_uniform(c, prev, rng))
            .collect();
        Self {
            feature_layers,
            heads,
        }
    }

    pub fn add_head<R: Rng>(&mut self, classes: usize, rng: &mut R) {
        let width = self.feature_width();
        self.heads.push(LayerWeights::init_uniform(classes, width, rng));
    }

    pub fn input_width(&self) -> usize {
        self.feature_layers[0].cols()
    }

    pub fn feature_width(&self) -> usize {
        self.feature_layers.last().map_or(0, LayerWeights::rows)
    }

    pub fn head_sizes(&self) -> Vec<usize> {
        self.heads.iter().map(LayerWeights::rows).collect()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_width: self.input_width(),
            feature_widths: self.feature_layers.iter().map(LayerWeights::rows).collect(),
            head_sizes: self.head_sizes(),
        }
    }

    /// Post-ReLU output of the last feature layer.
    pub fn features(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = x.to_owned();
        for layer in &self.feature_layers {
            h = layer.affine(h.view()).mapv_into(relu);
        }
        Ok(h)
    }

    /// Logits of the selected heads, concatenated in head order.
    pub fn forward(&self, x: ArrayView2<'_, f64>, heads: HeadSelector) -> Result<Array2<f64>> {
        let h = self.features(x)?;
        match heads {
            HeadSelector::One(t) => Ok(self.head(t)?.affine(h.view())),
            HeadSelector::All => {
                let logits: Vec<Array2<f64>> = self.heads.iter().map(|hd| hd.affine(h.view())).collect();
                let views: Vec<_> = logits.iter().map(|l| l.view()).collect();
                if views.is_empty() {
                    return Ok(Array2::zeros((x.nrows(), 0)));
                }
                Ok(ndarray::concatenate(Axis(1), &views).expect("heads share batch size"))
            }
        }
    }

    /// Forward pass keeping every intermediate, for backprop and probes.
    pub fn forward_traced(&self, x: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut pre_activations = Vec::with_capacity(self.feature_layers.len());
        let mut activations = Vec::with_capacity(self.feature_layers.len());
        let mut h = x.to_owned();
        for layer in &self.feature_layers {
            let z = layer.affine(h.view());
            h = z.mapv(relu);
            pre_activations.push(z);
            activations.push(h.clone());
        }
        let head_logits = self.heads.iter().map(|hd| hd.affine(h.view())).collect();
        Ok(ForwardTrace {
            pre_activations,
            activations,
            head_logits,
        })
    }

    pub fn head(&self, task: usize) -> Result<&LayerWeights> {
        self.heads.get(task).ok_or_else(|| {
            crate::Error::InvalidInput(format!(
                "unknown head {task}, model has {} heads",
                self.heads.len()
            ))
        })
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_width() {
            return invalid(format!(
                "input width {} does not match model input width {}",
                x.ncols(),
                self.input_width()
            ));
        }
        Ok(())
    }

    /// All parameters, layers then heads, weights row-major before biases.
    pub fn parameters(&self) -> impl Iterator<Item = &f64> {
        self.feature_layers
            .iter()
            .chain(&self.heads)
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}
