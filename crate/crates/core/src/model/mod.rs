//! The gesture network: assembly, parameter accounting, inference, and the
//! two on-disk artifacts (training checkpoint and deployed model).

mod format;

pub use format::{
    load_artifact, load_checkpoint, load_deployed, read_artifact, save_checkpoint, save_deployed,
    write_checkpoint, write_deployed, Artifact, FORMAT_VERSION, MAGIC,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{softmax_rows, Activation, Cache, ConvLayer, DenseLayer, DropoutLayer, Layer, Mode};
use crate::quantize::QuantParams;
use crate::tensor::{Scalar, Shape, StoredTensor, Tensor};
use crate::train::{he_init, AdamState};
use crate::{Error, Result};

/// Input sizes the dataset is prepared at.
pub const STANDARD_INPUT_SIZES: [usize; 4] = [64, 96, 128, 256];

/// Parameter tensors of every graph, in the order of [`ModelGraph::params`].
pub const PARAM_NAMES: [&str; 8] = [
    "conv1.kernels",
    "conv1.bias",
    "conv2.kernels",
    "conv2.bias",
    "dense1.weights",
    "dense1.bias",
    "dense2.weights",
    "dense2.bias",
];

/// Hyper-shape of the network. Filter counts are fields (not constants) so
/// that channel pruning can shrink them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub input_size: usize,
    pub num_classes: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub dense_units: usize,
    /// Rates of the dropout after pool 1, after pool 2 and after flatten.
    pub dropout: [f32; 3],
}

impl GraphConfig {
    pub fn new(input_size: usize, num_classes: usize) -> Self {
        GraphConfig {
            input_size,
            num_classes,
            conv1_filters: 32,
            conv2_filters: 64,
            dense_units: 128,
            dropout: [0.25, 0.25, 0.5],
        }
    }

    /// Spatial extent after the second pooling stage.
    pub fn final_extent(&self) -> Result<usize> {
        let mut s = self.input_size;
        for stage in 1..=2 {
            if s < 3 || (s - 2) < 2 {
                return Err(Error::config(format!(
                    "input size {} does not survive conv/pool stage {stage}",
                    self.input_size
                )));
            }
            s = (s - 2) / 2;
        }
        if s == 0 {
            return Err(Error::config(format!(
                "input size {} collapses to zero",
                self.input_size
            )));
        }
        Ok(s)
    }

    pub fn flatten_len(&self) -> Result<usize> {
        let s = self.final_extent()?;
        Ok(s * s * self.conv2_filters)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        if self.conv1_filters == 0 || self.conv2_filters == 0 || self.dense_units == 0 {
            return Err(Error::config("layer widths must be positive"));
        }
        for r in self.dropout {
            DropoutLayer::new(r)?;
        }
        self.final_extent().map(|_| ())
    }

    /// Parameter count implied by the configuration alone.
    pub fn param_count(&self) -> Result<usize> {
        let conv1 = 9 * 3 * self.conv1_filters + self.conv1_filters;
        let conv2 = 9 * self.conv1_filters * self.conv2_filters + self.conv2_filters;
        let dense1 = self.flatten_len()? * self.dense_units + self.dense_units;
        let dense2 = self.dense_units * self.num_classes + self.num_classes;
        Ok(conv1 + conv2 + dense1 + dense2)
    }
}

/// Ordered layer list: Conv(32) → MaxPool → Dropout → Conv(64) → MaxPool →
/// Dropout → Flatten → Dropout → Dense(128, ReLU) → Dense(classes, softmax).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph<T = f32> {
    config: GraphConfig,
    layers: Vec<Layer<T>>,
}

/// Everything the forward pass in training mode keeps for backprop.
pub struct ForwardTrace<T> {
    caches: Vec<Cache<T>>,
}

/// Builds the network for `input_size` and `num_classes` with He-initialized
/// weights drawn from a ChaCha stream seeded by `seed`.
pub fn build(input_size: usize, num_classes: usize, seed: u64) -> Result<ModelGraph<f32>> {
    ModelGraph::init(GraphConfig::new(input_size, num_classes), seed)
}

pub fn param_count<T: Scalar>(graph: &ModelGraph<T>) -> usize {
    graph.param_count()
}

impl<T: Scalar> ModelGraph<T> {
    pub fn init(config: GraphConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c1, c2, d1) = (config.conv1_filters, config.conv2_filters, config.dense_units);
        let flat = config.flatten_len()?;
        let conv1 = ConvLayer::new(
            he_init(&[3, 3, 3, c1], 27, &mut rng)?,
            Tensor::zeros([c1])?,
            Activation::Relu,
        )?;
        let conv2 = ConvLayer::new(
            he_init(&[3, 3, c1, c2], 9 * c1, &mut rng)?,
            Tensor::zeros([c2])?,
            Activation::Relu,
        )?;
        let dense1 = DenseLayer::new(
            he_init(&[flat, d1], flat, &mut rng)?,
            Tensor::zeros([d1])?,
            Activation::Relu,
        )?;
        let dense2 = DenseLayer::new(
            he_init(&[d1, config.num_classes], d1, &mut rng)?,
            Tensor::zeros([config.num_classes])?,
            Activation::Softmax,
        )?;
        Self::from_params(config, conv1, conv2, dense1, dense2)
    }

    pub fn from_params(
        config: GraphConfig,
        conv1: ConvLayer<T>,
        conv2: ConvLayer<T>,
        dense1: DenseLayer<T>,
        dense2: DenseLayer<T>,
    ) -> Result<Self> {
        config.validate()?;
        let [r1, r2, r3] = config.dropout;
        let graph = ModelGraph {
            config,
            layers: vec![
                Layer::Conv(conv1),
                Layer::MaxPool,
                Layer::Dropout(DropoutLayer::new(r1)?),
                Layer::Conv(conv2),
                Layer::MaxPool,
                Layer::Dropout(DropoutLayer::new(r2)?),
                Layer::Flatten,
                Layer::Dropout(DropoutLayer::new(r3)?),
                Layer::Dense(dense1),
                Layer::Dense(dense2),
            ],
        };
        graph.activation_shapes(1)?;
        Ok(graph)
    }

    /// Rebuilds a graph from parameter tensors in [`ModelGraph::param_names`]
    /// order.
    pub fn from_param_tensors(config: GraphConfig, mut params: Vec<Tensor<T>>) -> Result<Self> {
        if params.len() != 8 {
            return Err(Error::shape(format!(
                "expected 8 parameter tensors, got {}",
                params.len()
            )));
        }
        let mut next = || params.remove(0);
        let conv1 = ConvLayer::new(next(), next(), Activation::Relu)?;
        let conv2 = ConvLayer::new(next(), next(), Activation::Relu)?;
        let dense1 = DenseLayer::new(next(), next(), Activation::Relu)?;
        let dense2 = DenseLayer::new(next(), next(), Activation::Softmax)?;
        let expect = [
            (conv1.in_channels(), 3, "conv1 input channels"),
            (conv1.out_channels(), config.conv1_filters, "conv1 filters"),
            (conv2.in_channels(), config.conv1_filters, "conv2 input channels"),
            (conv2.out_channels(), config.conv2_filters, "conv2 filters"),
            (dense1.inputs(), config.flatten_len()?, "dense1 inputs"),
            (dense1.outputs(), config.dense_units, "dense1 units"),
            (dense2.inputs(), config.dense_units, "dense2 inputs"),
            (dense2.outputs(), config.num_classes, "dense2 units"),
        ];
        for (got, want, what) in expect {
            if got != want {
                return Err(Error::shape(format!("{what}: tensor has {got}, config says {want}")));
            }
        }
        Self::from_params(config, conv1, conv2, dense1, dense2)
    }

    pub fn config(&self) -> &GraphConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Human-readable layer labels, e.g. `conv1`, `pool1`, `dropout1`.
    pub fn layer_labels(&self) -> Vec<String> {
        let (mut conv, mut pool, mut drop, mut dense) = (0, 0, 0, 0);
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(_) => {
                    conv += 1;
                    format!("conv{conv}")
                }
                Layer::MaxPool => {
                    pool += 1;
                    format!("pool{pool}")
                }
                Layer::Dropout(_) => {
                    drop += 1;
                    format!("dropout{drop}")
                }
                Layer::Flatten => "flatten".to_string(),
                Layer::Dense(_) => {
                    dense += 1;
                    format!("dense{dense}")
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// `(label, parameter count)` for every layer, parameterless ones included.
    pub fn layer_param_counts(&self) -> Vec<(String, usize)> {
        self.layer_labels()
            .into_iter()
            .zip(self.layers.iter().map(Layer::param_count))
            .collect()
    }

    /// Names of the parameter tensors in canonical order.
    pub fn param_names(&self) -> Vec<String> {
        PARAM_NAMES.iter().map(|s| s.to_string()).collect()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn into_param_tensors(self) -> Vec<Tensor<T>> {
        self.layers
            .into_iter()
            .flat_map(|l| match l {
                Layer::Conv(c) => vec![c.kernels, c.bias],
                Layer::Dense(d) => vec![d.weights, d.bias],
                _ => Vec::new(),
            })
            .collect()
    }

    /// `(label, output shape)` for every layer given a batch size, starting
    /// with the input itself.
    pub fn activation_shapes(&self, batch: usize) -> Result<Vec<(String, Shape)>> {
        let s = self.config.input_size;
        let mut shape = Shape::new([batch, s, s, 3])?;
        let mut out = vec![("input".to_string(), shape.clone())];
        for (label, layer) in self.layer_labels().into_iter().zip(&self.layers) {
            shape = layer.output_shape(&shape)?;
            out.push((label, shape.clone()));
        }
        Ok(out)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size;
        match *x.dims() {
            [_, h, w, 3] if h == s && w == s => Ok(()),
            _ => Err(Error::shape(format!(
                "model expects (N,{s},{s},3) input, got {}",
                x.shape()
            ))),
        }
    }

    /// Training-mode forward returning logits and the per-layer caches.
    pub fn forward_train(&self, x: &Tensor<T>, mode: &mut Mode<'_>) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward(&act, mode)?;
            caches.push(cache);
            act = y;
        }
        Ok((act, ForwardTrace { caches }))
    }

    /// Backpropagates the gradient of the loss with respect to the logits.
    /// Returns parameter gradients in [`ModelGraph::params`] order.
    pub fn backward(&self, trace: &ForwardTrace<T>, dlogits: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if trace.caches.len() != self.layers.len() {
            return Err(Error::shape("forward trace does not belong to this graph"));
        }
        let mut grads: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.layers.len());
        let mut upstream = dlogits.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(&trace.caches).enumerate().rev() {
            let g = layer.backward(cache, &upstream, i > 0)?;
            grads.push(g.params);
            if let Some(dx) = g.input {
                upstream = dx;
            }
        }
        grads.reverse();
        Ok(grads.into_iter().flatten().collect())
    }

    /// Inference-mode logits. `observe` is called with the input and with
    /// the output of every conv/dense layer (labels `input`, `conv1`, ...)
    /// and may modify them in place.
    pub fn logits_observed(
        &self,
        x: &Tensor<T>,
        observe: &mut dyn FnMut(&str, &mut Tensor<T>),
    ) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut act = x.clone();
        observe("input", &mut act);
        for (label, layer) in self.layer_labels().iter().zip(&self.layers) {
            act = layer.infer(&act)?;
            if matches!(layer, Layer::Conv(_) | Layer::Dense(_)) {
                observe(label, &mut act);
            }
        }
        Ok(act)
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.logits_observed(x, &mut |_, _| {})
    }

    /// Class probabilities for an `(N,H,W,3)` batch.
    pub fn predict_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        softmax_rows(&self.logits(x)?)
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(ConvLayer {
                    kernels: c.kernels.cast(),
                    bias: c.bias.cast(),
                    activation: c.activation,
                }),
                Layer::Dense(d) => Layer::Dense(DenseLayer {
                    weights: d.weights.cast(),
                    bias: d.bias.cast(),
                    activation: d.activation,
                }),
                Layer::MaxPool => Layer::MaxPool,
                Layer::Dropout(d) => Layer::Dropout(*d),
                Layer::Flatten => Layer::Flatten,
            })
            .collect();
        ModelGraph {
            config: self.config,
            layers,
        }
    }
}

/// Anything that maps a normalized image batch to class probabilities.
pub trait Classifier {
    fn graph_config(&self) -> &GraphConfig;

    /// Probabilities for an `(N, S, S, 3)` batch of pixels in `[0, 1]`.
    fn predict_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;

    /// Probabilities for a single `(S, S, 3)` image.
    fn infer(&self, image: &Tensor<f32>) -> Result<Vec<f32>> {
        let s = self.graph_config().input_size;
        if image.dims() != [s, s, 3] {
            return Err(Error::shape(format!(
                "model expects a ({s},{s},3) image, got {}",
                image.shape()
            )));
        }
        let batch = image.clone().reshape([1, s, s, 3])?;
        Ok(self.predict_batch(&batch)?.into_data())
    }
}

impl Classifier for ModelGraph<f32> {
    fn graph_config(&self) -> &GraphConfig {
        &self.config
    }

    fn predict_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        ModelGraph::predict_batch(self, x)
    }
}

/// Training artifact: f32 weights plus Adam's first and second moments for
/// every weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub graph: ModelGraph<f32>,
    pub optimizer: AdamState,
    /// Number of completed training epochs.
    pub epoch: u32,
    pub best_val_loss: f64,
}

impl Checkpoint {
    /// Untrained checkpoint with zeroed optimizer moments.
    pub fn fresh(graph: ModelGraph<f32>) -> Self {
        let optimizer = AdamState::new(&graph.params());
        Checkpoint {
            graph,
            optimizer,
            epoch: 0,
            best_val_loss: f64::INFINITY,
        }
    }

    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }
}

impl Classifier for Checkpoint {
    fn graph_config(&self) -> &GraphConfig {
        &self.graph.config
    }

    fn predict_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.graph.predict_batch(x)
    }
}

/// Storage precision of a deployed model's weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F16,
    I8,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f16" => Ok(Precision::F16),
            "i8" | "int8" => Ok(Precision::I8),
            other => Err(Error::config(format!("unknown precision '{other}'"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F16 => "f16",
            Precision::I8 => "i8",
        })
    }
}

/// Inference artifact: weights at one storage precision, no optimizer
/// state. For `i8` models, activations listed in `activation_qparams` are
/// fake-quantized (quantize then dequantize) during inference.
#[derive(Clone, Debug)]
pub struct DeployedModel {
    precision: Precision,
    tensors: Vec<(String, StoredTensor)>,
    activation_qparams: Vec<(String, QuantParams)>,
    graph: ModelGraph<f32>,
}

impl DeployedModel {
    pub fn new(
        config: GraphConfig,
        precision: Precision,
        tensors: Vec<(String, StoredTensor)>,
        activation_qparams: Vec<(String, QuantParams)>,
    ) -> Result<Self> {
        if tensors.len() != PARAM_NAMES.len()
            || tensors.iter().zip(PARAM_NAMES).any(|((n, _), e)| n != e)
        {
            return Err(Error::shape(format!(
                "deployed tensors must be {PARAM_NAMES:?} in order"
            )));
        }
        let params = tensors.iter().map(|(_, t)| t.to_f32()).collect();
        let graph = ModelGraph::from_param_tensors(config, params)?;
        Ok(DeployedModel {
            precision,
            tensors,
            activation_qparams,
            graph,
        })
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn config(&self) -> &GraphConfig {
        self.graph.config()
    }

    pub fn tensors(&self) -> &[(String, StoredTensor)] {
        &self.tensors
    }

    pub fn activation_qparams(&self) -> &[(String, QuantParams)] {
        &self.activation_qparams
    }

    /// The weights widened/dequantized to f32.
    pub fn graph(&self) -> &ModelGraph<f32> {
        &self.graph
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.payload_bytes()).sum()
    }
}

impl Classifier for DeployedModel {
    fn graph_config(&self) -> &GraphConfig {
        self.graph.config()
    }

    fn predict_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if self.activation_qparams.is_empty() {
            return self.graph.predict_batch(x);
        }
        let logits = self.graph.logits_observed(x, &mut |label, act| {
            if let Some((_, q)) = self.activation_qparams.iter().find(|(n, _)| n == label) {
                act.map_inplace(|v| q.fake_quantize(v));
            }
        })?;
        softmax_rows(&logits)
    }
}

/// Strips optimizer state and converts weights to `precision`. `f16` and
/// `i8` delegate to [`crate::quantize::quantize_model`]; `i8` needs a
/// representative set for activation calibration.
pub fn export_deployed(
    ckpt: &Checkpoint,
    precision: Precision,
    calib: Option<&crate::data::LabeledDataset>,
) -> Result<DeployedModel> {
    match precision {
        Precision::F32 => {
            let names = ckpt.graph.param_names();
            let tensors = names
                .into_iter()
                .zip(ckpt.graph.params())
                .map(|(n, t)| (n, StoredTensor::from_f32(t)))
                .collect();
            DeployedModel::new(*ckpt.graph.config(), Precision::F32, tensors, Vec::new())
        }
        Precision::F16 | Precision::I8 => crate::quantize::quantize_model(ckpt, precision, calib),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn placeholder_params(config: &GraphConfig) -> Result<Vec<Tensor<f32>>> {
        let (c1, c2, d1) = (config.conv1_filters, config.conv2_filters, config.dense_units);
        let flat = config.flatten_len()?;
        Ok(vec![
            Tensor::zeros([3, 3, 3, c1])?,
            Tensor::zeros([c1])?,
            Tensor::zeros([3, 3, c1, c2])?,
            Tensor::zeros([c2])?,
            Tensor::zeros([flat, d1])?,
            Tensor::zeros([d1])?,
            Tensor::zeros([d1, config.num_classes])?,
            Tensor::zeros([config.num_classes])?,
        ])
    }

    #[test]
    fn table_one_parameter_counts() {
        let g = build(256, 5, 0).unwrap();
        let counts: Vec<usize> = g
            .layer_param_counts()
            .into_iter()
            .map(|(_, c)| c)
            .filter(|&c| c > 0)
            .collect();
        assert_eq!(counts, [896, 18_496, 31_490_176, 645]);
        assert_eq!(g.param_count(), 31_510_213);
    }

    #[test]
    fn parameter_counts_per_size() {
        assert_eq!(GraphConfig::new(64, 5).param_count().unwrap(), 1_625_797);
        assert_eq!(GraphConfig::new(96, 5).param_count().unwrap(), 3_985_093);
        assert_eq!(GraphConfig::new(128, 5).param_count().unwrap(), 7_392_965);
        for (size, extent) in [(64, 14), (96, 22), (128, 30), (256, 62)] {
            let expect = 896 + 18_496 + (extent * extent * 64 * 128 + 128) + 645;
            let cfg = GraphConfig::new(size, 5);
            assert_eq!(cfg.param_count().unwrap(), expect);
            assert_eq!(build(size, 5, 1).unwrap().param_count(), expect);
        }
    }

    #[test]
    fn dense_only_count_is_additive() {
        let g = build(64, 5, 0).unwrap();
        let conv: usize = g
            .layers()
            .iter()
            .filter(|l| matches!(l, Layer::Conv(_)))
            .map(Layer::param_count)
            .sum();
        let dense: usize = g
            .layers()
            .iter()
            .filter(|l| matches!(l, Layer::Dense(_)))
            .map(Layer::param_count)
            .sum();
        assert_eq!(conv, 896 + 18_496);
        assert_eq!(conv + dense, g.param_count());
    }

    #[test]
    fn shape_chain() {
        let chains = [
            (64, [62, 31, 29, 14]),
            (96, [94, 47, 45, 22]),
            (128, [126, 63, 61, 30]),
            (256, [254, 127, 125, 62]),
        ];
        for (size, [c1, p1, c2, p2]) in chains {
            let g = GraphConfig::new(size, 5);
            let g = ModelGraph::<f32>::from_param_tensors(g, placeholder_params(&g).unwrap()).unwrap();
            let shapes = g.activation_shapes(1).unwrap();
            let dims: Vec<Vec<usize>> = shapes.iter().map(|(_, s)| s.dims().to_vec()).collect();
            assert_eq!(dims[1], [1, c1, c1, 32]);
            assert_eq!(dims[2], [1, p1, p1, 32]);
            assert_eq!(dims[4], [1, c2, c2, 64]);
            assert_eq!(dims[5], [1, p2, p2, 64]);
            assert_eq!(dims[7], [1, p2 * p2 * 64]);
            assert_eq!(dims[10], [1, 5]);
        }
    }

    #[test]
    fn too_small_inputs_rejected() {
        assert!(matches!(build(9, 5, 0), Err(Error::Config(_))));
        assert!(build(10, 5, 0).is_ok());
        assert!(matches!(build(64, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_model_is_uniform() {
        let cfg = GraphConfig::new(12, 5);
        let g = ModelGraph::<f32>::from_param_tensors(cfg, placeholder_params(&cfg).unwrap()).unwrap();
        let p = g.infer(&Tensor::zeros([12, 12, 3]).unwrap()).unwrap();
        assert_eq!(p, vec![0.2; 5]);
        assert!(g.infer(&Tensor::zeros([13, 12, 3]).unwrap()).is_err());
    }

    #[test]
    fn inference_is_deterministic_and_normalized() {
        let g = build(16, 5, 4).unwrap();
        let img = Tensor::from_vec(
            [16, 16, 3],
            (0..16 * 16 * 3).map(|i| ((i * 37) % 255) as f32 / 255.0).collect(),
        )
        .unwrap();
        let a = g.infer(&img).unwrap();
        let b = g.infer(&img).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(build(12, 3, 9).unwrap(), build(12, 3, 9).unwrap());
        assert_ne!(build(12, 3, 9).unwrap(), build(12, 3, 10).unwrap());
    }
}
