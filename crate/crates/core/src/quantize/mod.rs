//! Post-training optimization: half-precision and int8-affine export with
//! calibration on a representative set, and structured channel pruning.

mod prune;

pub use prune::{apply_prune, plan_pruning, prune_channels, ConvTarget, PruneSpec, Ranking};

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::model::{Checkpoint, DeployedModel, ModelGraph, Precision, PARAM_NAMES};
use crate::tensor::{Storage, StoredTensor, Tensor};
use crate::train::image_batch;
use crate::{Error, Result};

/// Parameters of the affine map `x = scale · (q − zero_point)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::numeric(format!("quantization scale must be positive, got {scale}")));
        }
        if !(-128..=127).contains(&zero_point) {
            return Err(Error::numeric(format!("zero point {zero_point} outside [-128, 127]")));
        }
        Ok(QuantParams { scale, zero_point })
    }

    /// Scale 1, zero point 0.
    pub fn identity() -> Self {
        QuantParams {
            scale: 1.0,
            zero_point: 0,
        }
    }

    /// `clamp(round_half_even(x / scale) + zero_point, -128, 127)`.
    #[inline]
    pub fn quantize(&self, x: f32) -> i8 {
        let q = (x / self.scale).round_ties_even() + self.zero_point as f32;
        // NaN maps to the zero point's code via the saturating cast of 0.
        q.clamp(-128.0, 127.0) as i8
    }

    #[inline]
    pub fn dequantize(&self, q: i8) -> f32 {
        self.scale * (q as i32 - self.zero_point) as f32
    }

    /// Quantize then dequantize.
    #[inline]
    pub fn fake_quantize(&self, x: f32) -> f32 {
        self.dequantize(self.quantize(x))
    }
}

/// Maps `[min, max]` (widened to contain 0) onto `[-128, 127]`.
pub fn make_qparams(min: f32, max: f32) -> Result<QuantParams> {
    if !(min.is_finite() && max.is_finite()) {
        return Err(Error::numeric(format!("non-finite calibration range [{min}, {max}]")));
    }
    if min > max {
        return Err(Error::numeric(format!("empty calibration range [{min}, {max}]")));
    }
    let (lo, hi) = (min.min(0.0) as f64, max.max(0.0) as f64);
    if lo == hi {
        return Ok(QuantParams::identity());
    }
    let scale = (hi - lo) / 255.0;
    let zero_point = ((-lo / scale).round() - 128.0).clamp(-128.0, 127.0) as i32;
    // Round the scale toward zero so both range ends still reach the
    // extreme codes.
    let mut s = scale as f32;
    if s as f64 > scale {
        s = s.next_down();
    }
    QuantParams::new(s, zero_point)
}

pub fn quantize_tensor(t: &Tensor<f32>, qp: QuantParams) -> StoredTensor {
    let codes = t.data().iter().map(|&x| qp.quantize(x)).collect();
    StoredTensor::new(t.shape().clone(), Storage::I8(codes), Some(qp)).expect("i8 storage with qparams")
}

pub fn dequantize_tensor(t: &StoredTensor) -> Result<Tensor<f32>> {
    match (t.storage(), t.quant()) {
        (Storage::I8(_), Some(_)) => Ok(t.to_f32()),
        _ => Err(Error::format(0, format!("{} tensor carries no quantization parameters", t.dtype()))),
    }
}

/// Observed range of one tensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRange {
    pub min: f32,
    pub max: f32,
    /// Number of values folded into the range.
    pub count: u64,
}

impl TensorRange {
    pub fn of(values: &[f32]) -> Option<Self> {
        let mut r: Option<TensorRange> = None;
        for &v in values {
            r = Some(match r {
                None => TensorRange { min: v, max: v, count: 1 },
                Some(r) => TensorRange {
                    min: r.min.min(v),
                    max: r.max.max(v),
                    count: r.count + 1,
                },
            });
        }
        r
    }

    pub fn merge(self, other: TensorRange) -> TensorRange {
        TensorRange {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
            count: self.count + other.count,
        }
    }

    pub fn qparams(&self) -> Result<QuantParams> {
        make_qparams(self.min, self.max)
    }
}

/// Ranges of every weight tensor (from the values themselves) and of the
/// observed activations (`input`, `conv1`, `conv2`, `dense1`, `dense2`)
/// over a representative set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub weights: Vec<(String, TensorRange)>,
    pub activations: Vec<(String, TensorRange)>,
    pub samples: usize,
}

impl CalibrationStats {
    pub fn activation(&self, label: &str) -> Option<TensorRange> {
        self.activations.iter().find(|(n, _)| n == label).map(|(_, r)| *r)
    }

    pub fn weight(&self, name: &str) -> Option<TensorRange> {
        self.weights.iter().find(|(n, _)| n == name).map(|(_, r)| *r)
    }
}

const CALIB_BATCH: usize = 32;

pub fn calibrate(graph: &ModelGraph<f32>, calib: &LabeledDataset) -> Result<CalibrationStats> {
    check_calib(graph, calib)?;
    let weights = graph
        .param_names()
        .into_iter()
        .zip(graph.params())
        .filter_map(|(n, t)| TensorRange::of(t.data()).map(|r| (n, r)))
        .collect();
    let mut activations: Vec<(String, TensorRange)> = Vec::new();
    for chunk in calib.items().chunks(CALIB_BATCH) {
        let x = image_batch(chunk.iter().map(|(img, _)| img))?;
        graph.logits_observed(&x, &mut |label, act| {
            let Some(r) = TensorRange::of(act.data()) else { return };
            match activations.iter_mut().find(|(n, _)| n == label) {
                Some((_, acc)) => *acc = acc.merge(r),
                None => activations.push((label.to_string(), r)),
            }
        })?;
    }
    Ok(CalibrationStats {
        weights,
        activations,
        samples: calib.len(),
    })
}

fn check_calib(graph: &ModelGraph<f32>, calib: &LabeledDataset) -> Result<()> {
    if calib.is_empty() {
        return Err(Error::config("representative set is empty"));
    }
    let s = graph.config().input_size;
    match calib.extent() {
        Some((h, w)) if h == s && w == s => Ok(()),
        Some((h, w)) => Err(Error::config(format!(
            "representative images are {w}x{h}, model expects {s}x{s}"
        ))),
        None => Err(Error::config("representative images differ in size")),
    }
}

/// Activations that get fake-quantized at i8 inference; the logits stay f32.
pub const QUANTIZED_ACTIVATIONS: [&str; 4] = ["input", "conv1", "conv2", "dense1"];

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

/// Converts a checkpoint's weights to `precision`. Biases stay f32 at every
/// precision; `i8` quantizes each kernel/weight matrix per tensor and
/// calibrates activation ranges on `calib`, which it requires.
pub fn quantize_model(ckpt: &Checkpoint, precision: Precision, calib: Option<&LabeledDataset>) -> Result<DeployedModel> {
    let graph = &ckpt.graph;
    let config = *graph.config();
    let named = PARAM_NAMES.iter().map(|n| n.to_string()).zip(graph.params());
    match precision {
        Precision::F32 => crate::model::export_deployed(ckpt, Precision::F32, None),
        Precision::F16 => {
            let tensors = named
                .map(|(n, t)| {
                    let st = if is_bias(&n) {
                        StoredTensor::from_f32(t)
                    } else {
                        StoredTensor::to_f16(t)
                    };
                    (n, st)
                })
                .collect();
            DeployedModel::new(config, Precision::F16, tensors, Vec::new())
        }
        Precision::I8 => {
            let calib = calib.ok_or_else(|| Error::config("i8 quantization requires a representative set"))?;
            let stats = calibrate(graph, calib)?;
            let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
            for (n, t) in named {
                let st = if is_bias(&n) {
                    StoredTensor::from_f32(t)
                } else {
                    let r = stats.weight(&n).expect("every weight tensor is non-empty");
                    quantize_tensor(t, r.qparams()?)
                };
                tensors.push((n, st));
            }
            let mut acts = Vec::new();
            for label in QUANTIZED_ACTIVATIONS {
                let r = stats
                    .activation(label)
                    .ok_or_else(|| Error::config(format!("no calibration data for activation {label}")))?;
                acts.push((label.to_string(), r.qparams()?));
            }
            DeployedModel::new(config, Precision::I8, tensors, acts)
        }
    }
}
