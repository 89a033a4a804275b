//! Forward and backward passes for the layer kinds of the gesture network:
//! valid 3x3 convolution, 2x2 max-pooling, ReLU, dense, softmax and
//! inverted dropout. Activations are NHWC; convolution kernels are
//! `[3, 3, Cin, Cout]`.

use rand::{Rng, RngCore};

use crate::tensor::{gemm_acc, MatRef, Scalar, Shape, Tensor};
use crate::{Error, Result};

/// Spatial extent of every convolution kernel.
pub const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    /// Marks the classifier head. Layer forwards emit logits; the softmax
    /// is applied by the model at inference and fused into the loss in
    /// training.
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T = f32> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(kernels: Tensor<T>, bias: Tensor<T>, activation: Activation) -> Result<Self> {
        match kernels.dims() {
            &[KERNEL, KERNEL, _, cout] if bias.dims() == [cout] => Ok(ConvLayer {
                kernels,
                bias,
                activation,
            }),
            _ => Err(Error::shape(format!(
                "conv kernels {} / bias {} are not [3,3,Cin,Cout] / [Cout]",
                kernels.shape(),
                bias.shape()
            ))),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.dims()[3]
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, activation: Activation) -> Result<Self> {
        match weights.dims() {
            &[_, out] if bias.dims() == [out] => Ok(DenseLayer {
                weights,
                bias,
                activation,
            }),
            _ => Err(Error::shape(format!(
                "dense weights {} / bias {} are not [In,Out] / [Out]",
                weights.shape(),
                bias.shape()
            ))),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutLayer {
    rate: f32,
}

impl DropoutLayer {
    pub fn new(rate: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} not in [0, 1)")));
        }
        Ok(DropoutLayer { rate })
    }

    pub fn rate(&self) -> f32 {
        self.rate
    }
}

/// Whether a forward pass is part of training (dropout active) or inference.
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Infer,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Gradients of one layer: one tensor per parameter (kernel/weights, then
/// bias) and, when requested, the gradient with respect to the input.
#[derive(Clone, Debug)]
pub struct LayerGrads<T = f32> {
    pub params: Vec<Tensor<T>>,
    pub input: Option<Tensor<T>>,
}

fn nhwc(x: &Shape) -> Result<(usize, usize, usize, usize)> {
    match *x.dims() {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::shape(format!("expected an NHWC tensor, got {x}"))),
    }
}

/// Unrolls every 3x3 window of one `h x w x c` image into a row of `cols`,
/// ordered `(di, dj, channel)` to match the kernel layout.
fn im2col<T: Scalar>(img: &[T], h: usize, w: usize, c: usize, cols: &mut [T]) {
    let (oh, ow) = (h - 2, w - 2);
    let kdim = KERNEL * KERNEL * c;
    for i in 0..oh {
        for j in 0..ow {
            let row = &mut cols[(i * ow + j) * kdim..(i * ow + j + 1) * kdim];
            for di in 0..KERNEL {
                let src = ((i + di) * w + j) * c;
                let dst = di * KERNEL * c;
                row[dst..dst + KERNEL * c].copy_from_slice(&img[src..src + KERNEL * c]);
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], h: usize, w: usize, c: usize, img: &mut [T]) {
    let (oh, ow) = (h - 2, w - 2);
    let kdim = KERNEL * KERNEL * c;
    for i in 0..oh {
        for j in 0..ow {
            let row = &cols[(i * ow + j) * kdim..(i * ow + j + 1) * kdim];
            for di in 0..KERNEL {
                let dst = ((i + di) * w + j) * c;
                let src = di * KERNEL * c;
                for (d, &s) in img[dst..dst + KERNEL * c]
                    .iter_mut()
                    .zip(&row[src..src + KERNEL * c])
                {
                    *d = *d + s;
                }
            }
        }
    }
}

fn check_conv_input<T: Scalar>(layer: &ConvLayer<T>, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, h, w, c) = nhwc(x.shape())?;
    if h < KERNEL || w < KERNEL {
        return Err(Error::shape(format!(
            "conv input {} is smaller than the 3x3 kernel",
            x.shape()
        )));
    }
    if c != layer.in_channels() {
        return Err(Error::shape(format!(
            "conv input has {c} channels, kernel expects {}",
            layer.in_channels()
        )));
    }
    Ok((n, h, w, c))
}

/// Valid (unpadded, stride 1) convolution through im2col + GEMM.
/// Each output is `bias[o]` plus the window products summed in
/// `(di, dj, channel)` order.
pub fn conv2d_forward<T: Scalar>(layer: &ConvLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = check_conv_input(layer, x)?;
    let (oh, ow, cout) = (h - 2, w - 2, layer.out_channels());
    let kdim = KERNEL * KERNEL * c;
    let pixels = oh * ow;
    let mut out = vec![T::zero(); n * pixels * cout];
    let mut cols = vec![T::zero(); pixels * kdim];
    let bias = layer.bias.data();
    for s in 0..n {
        im2col(&x.data()[s * h * w * c..(s + 1) * h * w * c], h, w, c, &mut cols);
        let out_s = &mut out[s * pixels * cout..(s + 1) * pixels * cout];
        for px in out_s.chunks_exact_mut(cout) {
            px.copy_from_slice(bias);
        }
        gemm_acc(
            pixels,
            kdim,
            cout,
            MatRef::row_major(&cols, kdim),
            MatRef::row_major(layer.kernels.data(), cout),
            out_s,
        );
    }
    Tensor::from_vec([n, oh, ow, cout], out)
}

/// Gradients of [`conv2d_forward`] given its input `x` and the upstream
/// gradient `dy` of its (pre-activation) output.
pub fn conv2d_backward<T: Scalar>(
    layer: &ConvLayer<T>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
    need_input: bool,
) -> Result<LayerGrads<T>> {
    let (n, h, w, c) = check_conv_input(layer, x)?;
    let (oh, ow, cout) = (h - 2, w - 2, layer.out_channels());
    if dy.dims() != [n, oh, ow, cout] {
        return Err(Error::shape(format!(
            "conv upstream gradient {} does not match output ({n},{oh},{ow},{cout})",
            dy.shape()
        )));
    }
    let kdim = KERNEL * KERNEL * c;
    let pixels = oh * ow;
    let mut dk = vec![T::zero(); kdim * cout];
    let mut db = vec![T::zero(); cout];
    let mut dx = if need_input {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut cols = vec![T::zero(); pixels * kdim];
    let mut dcols = if need_input {
        vec![T::zero(); pixels * kdim]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let dy_s = &dy.data()[s * pixels * cout..(s + 1) * pixels * cout];
        im2col(&x.data()[s * h * w * c..(s + 1) * h * w * c], h, w, c, &mut cols);
        gemm_acc(
            kdim,
            pixels,
            cout,
            MatRef::transposed(&cols, kdim),
            MatRef::row_major(dy_s, cout),
            &mut dk,
        );
        for px in dy_s.chunks_exact(cout) {
            for (b, &g) in db.iter_mut().zip(px) {
                *b = *b + g;
            }
        }
        if need_input {
            dcols.iter_mut().for_each(|v| *v = T::zero());
            gemm_acc(
                pixels,
                cout,
                kdim,
                MatRef::row_major(dy_s, cout),
                MatRef::transposed(layer.kernels.data(), cout),
                &mut dcols,
            );
            col2im_add(&dcols, h, w, c, &mut dx[s * h * w * c..(s + 1) * h * w * c]);
        }
    }
    Ok(LayerGrads {
        params: vec![
            Tensor::from_parts(layer.kernels.shape().clone(), dk),
            Tensor::from_parts(layer.bias.shape().clone(), db),
        ],
        input: if need_input {
            Some(Tensor::from_parts(x.shape().clone(), dx))
        } else {
            None
        },
    })
}

/// Flat input offsets of the winning element of every pooling window.
pub type ArgmaxMap = Vec<u32>;

/// 2x2 stride-2 max pooling; an odd trailing row or column is dropped.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, ArgmaxMap)> {
    let (n, h, w, c) = nhwc(x.shape())?;
    if h < 2 || w < 2 {
        return Err(Error::shape(format!(
            "max-pool input {} is smaller than 2x2",
            x.shape()
        )));
    }
    if x.len() > u32::MAX as usize {
        return Err(Error::shape("max-pool input too large for argmax map"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    let data = x.data();
    for s in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let at = |di: usize, dj: usize| ((s * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                    let mut best = at(0, 0);
                    for idx in [at(0, 1), at(1, 0), at(1, 1)] {
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    arg.push(best as u32);
                }
            }
        }
    }
    Ok((Tensor::from_vec([n, oh, ow, c], out)?, arg))
}

/// Routes each upstream gradient to the position that won its window.
pub fn maxpool2_backward<T: Scalar>(
    input_shape: &Shape,
    argmax: &[u32],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    if dy.len() != argmax.len() {
        return Err(Error::shape(format!(
            "max-pool gradient {} does not match cached argmax map of {} entries",
            dy.shape(),
            argmax.len()
        )));
    }
    let mut dx = vec![T::zero(); input_shape.numel()];
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        let slot = dx
            .get_mut(idx as usize)
            .ok_or_else(|| Error::shape("argmax index outside max-pool input"))?;
        *slot = *slot + g;
    }
    Ok(Tensor::from_parts(input_shape.clone(), dx))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gates `dy` by the sign of the cached activation. `activated` may be
/// either the ReLU input or its output; both are positive on the same set.
pub fn relu_backward<T: Scalar>(activated: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if activated.dims() != dy.dims() {
        return Err(Error::shape(format!(
            "relu gradient {} does not match cached {}",
            dy.shape(),
            activated.shape()
        )));
    }
    let data = activated
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&a, &g)| if a > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(dy.shape().clone(), data))
}

fn check_dense_input<T: Scalar>(layer: &DenseLayer<T>, x: &Tensor<T>) -> Result<usize> {
    match *x.dims() {
        [n, inputs] if inputs == layer.inputs() => Ok(n),
        _ => Err(Error::shape(format!(
            "dense input {} does not match weights {}",
            x.shape(),
            layer.weights.shape()
        ))),
    }
}

/// `y = x · W + b` for each row of `x`.
pub fn dense_forward<T: Scalar>(layer: &DenseLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = check_dense_input(layer, x)?;
    let (inputs, outputs) = (layer.inputs(), layer.outputs());
    let mut out = Vec::with_capacity(n * outputs);
    for _ in 0..n {
        out.extend_from_slice(layer.bias.data());
    }
    gemm_acc(
        n,
        inputs,
        outputs,
        MatRef::row_major(x.data(), inputs),
        MatRef::row_major(layer.weights.data(), outputs),
        &mut out,
    );
    Tensor::from_vec([n, outputs], out)
}

pub fn dense_backward<T: Scalar>(
    layer: &DenseLayer<T>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
    need_input: bool,
) -> Result<LayerGrads<T>> {
    let n = check_dense_input(layer, x)?;
    let (inputs, outputs) = (layer.inputs(), layer.outputs());
    if dy.dims() != [n, outputs] {
        return Err(Error::shape(format!(
            "dense upstream gradient {} does not match output ({n},{outputs})",
            dy.shape()
        )));
    }
    let mut dw = vec![T::zero(); inputs * outputs];
    gemm_acc(
        inputs,
        n,
        outputs,
        MatRef::transposed(x.data(), inputs),
        MatRef::row_major(dy.data(), outputs),
        &mut dw,
    );
    let mut db = vec![T::zero(); outputs];
    for row in dy.data().chunks_exact(outputs) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    let input = if need_input {
        let mut dx = vec![T::zero(); n * inputs];
        gemm_acc(
            n,
            outputs,
            inputs,
            MatRef::row_major(dy.data(), outputs),
            MatRef::transposed(layer.weights.data(), outputs),
            &mut dx,
        );
        Some(Tensor::from_parts(x.shape().clone(), dx))
    } else {
        None
    };
    Ok(LayerGrads {
        params: vec![
            Tensor::from_parts(layer.weights.shape().clone(), dw),
            Tensor::from_parts(layer.bias.shape().clone(), db),
        ],
        input,
    })
}

/// Numerically stable softmax (scores shifted by their maximum).
pub fn softmax<T: Scalar>(scores: &[T]) -> Result<Vec<T>> {
    if scores.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite softmax input {bad:?}")));
    }
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Row-wise softmax of an `[N, C]` score matrix.
pub fn softmax_rows<T: Scalar>(scores: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, c] = scores.dims() else {
        return Err(Error::shape(format!(
            "softmax_rows expects [N,C], got {}",
            scores.shape()
        )));
    };
    let mut out = Vec::with_capacity(scores.len());
    for row in scores.data().chunks_exact(c) {
        out.extend(softmax(row)?);
    }
    Ok(Tensor::from_parts(scores.shape().clone(), out))
}

/// Per-element multipliers drawn in training mode: 0 for dropped units,
/// `1 / (1 - rate)` for kept ones.
pub type DropoutMask<T> = Vec<T>;

/// Inverted dropout. Inference mode is the identity and returns no mask.
pub fn dropout_forward<T: Scalar>(
    layer: &DropoutLayer,
    x: &Tensor<T>,
    mode: &mut Mode<'_>,
) -> Result<(Tensor<T>, Option<DropoutMask<T>>)> {
    let rng = match mode {
        Mode::Infer => return Ok((x.clone(), None)),
        Mode::Train(rng) => rng,
    };
    let keep = 1.0 - layer.rate as f64;
    let scale = T::from_f64(1.0 / keep);
    let mask: Vec<T> = if layer.rate == 0.0 {
        vec![T::one(); x.len()]
    } else {
        (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect()
    };
    let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::from_parts(x.shape().clone(), out), Some(mask)))
}

pub fn dropout_backward<T: Scalar>(mask: Option<&[T]>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    match mask {
        None => Ok(dy.clone()),
        Some(m) if m.len() == dy.len() => Ok(Tensor::from_parts(
            dy.shape().clone(),
            dy.data().iter().zip(m).map(|(&g, &k)| g * k).collect(),
        )),
        Some(m) => Err(Error::shape(format!(
            "dropout gradient {} does not match cached mask of {} entries",
            dy.shape(),
            m.len()
        ))),
    }
}

/// One entry of a sequential network.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T = f32> {
    Conv(ConvLayer<T>),
    MaxPool,
    Dropout(DropoutLayer),
    Flatten,
    Dense(DenseLayer<T>),
}

/// State saved by [`Layer::forward`] for the matching backward call.
#[derive(Clone, Debug)]
pub enum Cache<T = f32> {
    Conv { input: Tensor<T>, output: Tensor<T> },
    MaxPool { input_shape: Shape, argmax: ArgmaxMap },
    Dropout { mask: Option<DropoutMask<T>> },
    Flatten { input_shape: Shape },
    Dense { input: Tensor<T>, output: Tensor<T> },
}

impl<T: Scalar> Layer<T> {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.param_count(),
            Layer::Dense(d) => d.param_count(),
            _ => 0,
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&c.kernels, &c.bias],
            Layer::Dense(d) => vec![&d.weights, &d.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.kernels, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weights, &mut d.bias],
            _ => Vec::new(),
        }
    }

    /// Output shape for a given input shape, without computing anything.
    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        match self {
            Layer::Conv(c) => {
                let (n, h, w, ch) = nhwc(input)?;
                if h < KERNEL || w < KERNEL || ch != c.in_channels() {
                    return Err(Error::shape(format!("conv cannot consume {input}")));
                }
                Shape::new([n, h - 2, w - 2, c.out_channels()])
            }
            Layer::MaxPool => {
                let (n, h, w, ch) = nhwc(input)?;
                if h < 2 || w < 2 {
                    return Err(Error::shape(format!("max-pool cannot consume {input}")));
                }
                Shape::new([n, h / 2, w / 2, ch])
            }
            Layer::Dropout(_) => Ok(input.clone()),
            Layer::Flatten => {
                let n = input.dims()[0];
                Shape::new([n, input.numel() / n])
            }
            Layer::Dense(d) => match *input.dims() {
                [n, i] if i == d.inputs() => Shape::new([n, d.outputs()]),
                _ => Err(Error::shape(format!("dense cannot consume {input}"))),
            },
        }
    }

    /// Runs the layer, applying its ReLU if it has one. Softmax heads
    /// return logits.
    pub fn forward(&self, x: &Tensor<T>, mode: &mut Mode<'_>) -> Result<(Tensor<T>, Cache<T>)> {
        match self {
            Layer::Conv(c) => {
                let mut y = conv2d_forward(c, x)?;
                if c.activation == Activation::Relu {
                    y = relu(&y);
                }
                Ok((
                    y.clone(),
                    Cache::Conv {
                        input: x.clone(),
                        output: y,
                    },
                ))
            }
            Layer::MaxPool => {
                let (y, argmax) = maxpool2_forward(x)?;
                Ok((
                    y,
                    Cache::MaxPool {
                        input_shape: x.shape().clone(),
                        argmax,
                    },
                ))
            }
            Layer::Dropout(d) => {
                let (y, mask) = dropout_forward(d, x, mode)?;
                Ok((y, Cache::Dropout { mask }))
            }
            Layer::Flatten => {
                let n = x.dims()[0];
                let y = x.clone().reshape([n, x.len() / n])?;
                Ok((
                    y,
                    Cache::Flatten {
                        input_shape: x.shape().clone(),
                    },
                ))
            }
            Layer::Dense(d) => {
                let mut y = dense_forward(d, x)?;
                if d.activation == Activation::Relu {
                    y = relu(&y);
                }
                Ok((
                    y.clone(),
                    Cache::Dense {
                        input: x.clone(),
                        output: y,
                    },
                ))
            }
        }
    }

    /// Inference-only forward that keeps no cache.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(c) => {
                let y = conv2d_forward(c, x)?;
                Ok(if c.activation == Activation::Relu { relu(&y) } else { y })
            }
            Layer::MaxPool => Ok(maxpool2_forward(x)?.0),
            Layer::Dropout(_) => Ok(x.clone()),
            Layer::Flatten => {
                let n = x.dims()[0];
                x.clone().reshape([n, x.len() / n])
            }
            Layer::Dense(d) => {
                let y = dense_forward(d, x)?;
                Ok(if d.activation == Activation::Relu { relu(&y) } else { y })
            }
        }
    }

    /// Gradients of this layer given its forward cache and the gradient of
    /// its output.
    pub fn backward(&self, cache: &Cache<T>, dy: &Tensor<T>, need_input: bool) -> Result<LayerGrads<T>> {
        match (self, cache) {
            (Layer::Conv(c), Cache::Conv { input, output }) => {
                let dz = if c.activation == Activation::Relu {
                    relu_backward(output, dy)?
                } else {
                    dy.clone()
                };
                conv2d_backward(c, input, &dz, need_input)
            }
            (Layer::MaxPool, Cache::MaxPool { input_shape, argmax }) => Ok(LayerGrads {
                params: Vec::new(),
                input: Some(maxpool2_backward(input_shape, argmax, dy)?),
            }),
            (Layer::Dropout(_), Cache::Dropout { mask }) => Ok(LayerGrads {
                params: Vec::new(),
                input: Some(dropout_backward(mask.as_deref(), dy)?),
            }),
            (Layer::Flatten, Cache::Flatten { input_shape }) => Ok(LayerGrads {
                params: Vec::new(),
                input: Some(dy.clone().reshape(input_shape.dims().to_vec())?),
            }),
            (Layer::Dense(d), Cache::Dense { input, output }) => {
                let dz = if d.activation == Activation::Relu {
                    relu_backward(output, dy)?
                } else {
                    dy.clone()
                };
                dense_backward(d, input, &dz, need_input)
            }
            _ => Err(Error::shape("layer cache does not belong to this layer kind")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Six nested loops, no unrolling.
    fn direct_conv(layer: &ConvLayer<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (n, h, w, c) = nhwc(x.shape()).unwrap();
        let cout = layer.out_channels();
        let mut out = Tensor::zeros([n, h - 2, w - 2, cout]).unwrap();
        for s in 0..n {
            for i in 0..h - 2 {
                for j in 0..w - 2 {
                    for o in 0..cout {
                        let mut acc = layer.bias.data()[o];
                        for di in 0..3 {
                            for dj in 0..3 {
                                for ch in 0..c {
                                    acc += x.get(&[s, i + di, j + dj, ch]).unwrap()
                                        * layer.kernels.get(&[di, dj, ch, o]).unwrap();
                                }
                            }
                        }
                        let off = out.shape().offset(&[s, i, j, o]).unwrap();
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_shape_and_bias_only() {
        let k = Tensor::<f32>::zeros([3, 3, 3, 4]).unwrap();
        let b = Tensor::from_vec([4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let layer = ConvLayer::new(k, b, Activation::Linear).unwrap();
        let x = Tensor::full([1, 10, 12, 3], 0.3).unwrap();
        let y = conv2d_forward(&layer, &x).unwrap();
        assert_eq!(y.dims(), [1, 8, 10, 4]);
        for px in y.data().chunks(4) {
            assert_eq!(px, [0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = ConvLayer::new(
            rand_tensor(&mut rng, &[3, 3, 2, 3]),
            rand_tensor(&mut rng, &[3]),
            Activation::Linear,
        )
        .unwrap();
        let x = rand_tensor(&mut rng, &[2, 5, 5, 2]);
        let fast = conv2d_forward(&layer, &x).unwrap();
        let slow = direct_conv(&layer, &x);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_errors() {
        let layer = ConvLayer::new(
            Tensor::<f32>::zeros([3, 3, 2, 1]).unwrap(),
            Tensor::zeros([1]).unwrap(),
            Activation::Linear,
        )
        .unwrap();
        let wrong_c = Tensor::zeros([1, 5, 5, 3]).unwrap();
        assert!(matches!(conv2d_forward(&layer, &wrong_c), Err(Error::Shape(_))));
        let tiny = Tensor::zeros([1, 2, 5, 2]).unwrap();
        assert!(matches!(conv2d_forward(&layer, &tiny), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_floor_semantics() {
        let x = Tensor::<f32>::full([1, 5, 7, 2], 3.0).unwrap();
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.dims(), [1, 2, 3, 2]);
        assert!(y.data().iter().all(|&v| v == 3.0));
        assert_eq!(arg.len(), y.len());
        assert!(maxpool2_forward(&Tensor::<f32>::zeros([1, 1, 4, 1]).unwrap()).is_err());
    }

    #[test]
    fn maxpool_backward_routes_to_winner() {
        let x = Tensor::<f32>::from_vec([1, 2, 2, 1], vec![1.0, 4.0, 2.0, 3.0]).unwrap();
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let dy = Tensor::from_vec([1, 1, 1, 1], vec![2.5]).unwrap();
        let dx = maxpool2_backward(x.shape(), &arg, &dy).unwrap();
        assert_eq!(dx.data(), &[0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::<f32>::from_vec([3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = relu(&x);
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&r), r);
        let neg = Tensor::<f32>::full([4], -0.5).unwrap();
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = Tensor::<f32>::from_vec([2], vec![0.1, 3.0]).unwrap();
        let dy = Tensor::from_vec([2], vec![-7.0, 0.25]).unwrap();
        assert_eq!(relu_backward(&pos, &dy).unwrap(), dy);
    }

    #[test]
    fn dense_cases() {
        let layer = DenseLayer::new(
            Tensor::<f32>::eye(2).unwrap(),
            Tensor::from_vec([2], vec![1.0, 1.0]).unwrap(),
            Activation::Linear,
        )
        .unwrap();
        let x = Tensor::from_vec([1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(dense_forward(&layer, &x).unwrap().data(), &[2.0, 2.0]);

        let zero = DenseLayer::new(
            Tensor::<f32>::zeros([3, 2]).unwrap(),
            Tensor::from_vec([2], vec![0.5, -0.5]).unwrap(),
            Activation::Linear,
        )
        .unwrap();
        let x = Tensor::full([4, 3], 9.0).unwrap();
        let y = dense_forward(&zero, &x).unwrap();
        assert!(y.data().chunks(2).all(|r| r == [0.5, -0.5]));
        assert!(dense_forward(&zero, &Tensor::zeros([4, 2]).unwrap()).is_err());
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&[0.0f64; 5]).unwrap();
        assert!(u.iter().all(|&p| (p - 0.2).abs() < 1e-12));
        let s = softmax(&[1.0f64, 2.0, 3.0]).unwrap();
        let shifted = softmax(&[101.0f64, 102.0, 103.0]).unwrap();
        // Reference values from evaluating e^s / Σ e^s by hand at high precision.
        let expect = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for ((a, b), e) in s.iter().zip(&shifted).zip(expect) {
            assert!((a - e).abs() < 1e-9);
            assert!((a - b).abs() < 1e-12);
        }
        let big = softmax(&[1000.0f32, 0.0]).unwrap();
        assert!((big[0] - 1.0).abs() < 1e-6);
        assert!(matches!(softmax(&[f32::NAN]), Err(Error::Numeric(_))));
        assert!(softmax::<f32>(&[]).is_err());
    }

    #[test]
    fn dropout_modes() {
        let x = Tensor::<f32>::from_vec([4], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let half = DropoutLayer::new(0.5).unwrap();
        let (y, mask) = dropout_forward(&half, &x, &mut Mode::Infer).unwrap();
        assert_eq!(y, x);
        assert!(mask.is_none());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let none = DropoutLayer::new(0.0).unwrap();
        let (y, mask) = dropout_forward(&none, &x, &mut Mode::Train(&mut rng)).unwrap();
        assert_eq!(y, x);
        assert!(mask.unwrap().iter().all(|&m| m == 1.0));

        assert!(matches!(DropoutLayer::new(1.0), Err(Error::Config(_))));
        assert!(DropoutLayer::new(-0.1).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let layer = DropoutLayer::new(0.5).unwrap();
        let x = Tensor::<f64>::from_vec([4], vec![0.5, 1.0, 1.5, 2.0]).unwrap();
        let trials = 10_000;
        let mut total = 0.0;
        for _ in 0..trials {
            let (y, _) = dropout_forward(&layer, &x, &mut Mode::Train(&mut rng)).unwrap();
            total += y.data().iter().sum::<f64>() / 4.0;
        }
        let mean = total / trials as f64;
        assert!((mean - 1.25).abs() / 1.25 < 0.02, "mean {mean}");
    }

    /// Central-difference check of `grad` against `loss(t)` for every entry
    /// of `t`.
    fn fd_check(t: &mut Tensor<f64>, grad: &Tensor<f64>, loss: &dyn Fn(&Tensor<f64>) -> f64) {
        let h = 1e-6;
        for i in 0..t.len() {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + h;
            let up = loss(t);
            t.data_mut()[i] = orig - h;
            let down = loss(t);
            t.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.data()[i];
            let scale = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / scale < 1e-6,
                "entry {i}: analytic {analytic} numeric {numeric}"
            );
        }
    }

    fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layer = ConvLayer::new(
            rand_tensor(&mut rng, &[3, 3, 2, 3]),
            rand_tensor(&mut rng, &[3]),
            Activation::Linear,
        )
        .unwrap();
        let mut x = rand_tensor(&mut rng, &[2, 5, 4, 2]);
        let r = rand_tensor(&mut rng, &[2, 3, 2, 3]);
        let g = conv2d_backward(&layer, &x, &r, true).unwrap();

        let lx = |x: &Tensor<f64>| weighted_sum(&conv2d_forward(&layer, x).unwrap(), &r);
        fd_check(&mut x, g.input.as_ref().unwrap(), &lx);
        let mut k = layer.kernels.clone();
        let lk = |k: &Tensor<f64>| {
            let l = ConvLayer::new(k.clone(), layer.bias.clone(), Activation::Linear).unwrap();
            weighted_sum(&conv2d_forward(&l, &x).unwrap(), &r)
        };
        fd_check(&mut k, &g.params[0], &lk);
        let mut b = layer.bias.clone();
        let lb = |b: &Tensor<f64>| {
            let l = ConvLayer::new(layer.kernels.clone(), b.clone(), Activation::Linear).unwrap();
            weighted_sum(&conv2d_forward(&l, &x).unwrap(), &r)
        };
        fd_check(&mut b, &g.params[1], &lb);
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let layer = DenseLayer::new(
            rand_tensor(&mut rng, &[6, 4]),
            rand_tensor(&mut rng, &[4]),
            Activation::Linear,
        )
        .unwrap();
        let mut x = rand_tensor(&mut rng, &[3, 6]);
        let r = rand_tensor(&mut rng, &[3, 4]);
        let g = dense_backward(&layer, &x, &r, true).unwrap();
        let lx = |x: &Tensor<f64>| weighted_sum(&dense_forward(&layer, x).unwrap(), &r);
        fd_check(&mut x, g.input.as_ref().unwrap(), &lx);
        let mut w = layer.weights.clone();
        let lw = |w: &Tensor<f64>| {
            let l = DenseLayer::new(w.clone(), layer.bias.clone(), Activation::Linear).unwrap();
            weighted_sum(&dense_forward(&l, &x).unwrap(), &r)
        };
        fd_check(&mut w, &g.params[0], &lw);
    }
}
