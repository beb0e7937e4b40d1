//! Sequential layer stacks with a loss head.
//!
//! The specialised models elsewhere build their graphs by hand; this is the
//! generic entry point used for small standalone networks and probes.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{ConvGeom, Graph, Var};
use crate::init::glorot_uniform;
use crate::ops::LOG_EPS;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Flatten,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Softmax,
}

impl Layer {
    pub fn dense(name: &str, inputs: usize, outputs: usize) -> Self {
        Layer::Dense {
            name: name.into(),
            inputs,
            outputs,
            bias: true,
        }
    }

    pub fn conv(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Layer::Conv2d {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }
}

/// Layers applied in order to a batch whose per-item shape is `input_shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Loss applied to the network output `[batch, n]`.
#[derive(Clone, Debug)]
pub enum LossHead {
    /// Sum of all outputs.
    Sum,
    /// Mean over rows of `-sum_j t_j ln(max(y_j, 1e-8))`; the network is
    /// expected to end in `Softmax`.
    CrossEntropy(Tensor),
    /// Mean squared error against a target of the output's shape.
    Mse(Tensor),
    /// Mean binary cross-entropy of sigmoid outputs against 0/1 labels.
    Bce(Tensor),
}

impl Sequential {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Self {
        Self { input_shape, layers }
    }

    /// Per-item output shape, or a shape error naming the first bad layer.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut s = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            s = match layer {
                Layer::Dense { inputs, outputs, .. } => {
                    if s != [*inputs] {
                        return shape_err(format!("layer {i}: dense expects [{inputs}], got {s:?}"));
                    }
                    vec![*outputs]
                }
                Layer::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    if s.len() != 3 || s[0] != *in_ch {
                        return shape_err(format!("layer {i}: conv expects [{in_ch}, h, w], got {s:?}"));
                    }
                    let Some((h, w)) = ConvGeom::out_dims(s[1], s[2], *kernel, *stride, *pad) else {
                        return shape_err(format!("layer {i}: conv kernel {kernel} does not fit {s:?}"));
                    };
                    vec![*out_ch, h, w]
                }
                Layer::Flatten => vec![s.iter().product()],
                Layer::Softmax if s.len() != 1 => {
                    return shape_err(format!("layer {i}: softmax needs a flat input, got {s:?}"));
                }
                _ => s,
            };
        }
        Ok(s)
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        self.output_shape()?;
        let mut p = ParamSet::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense {
                    name,
                    inputs,
                    outputs,
                    bias,
                } => {
                    p.insert(format!("{name}.w"), glorot_uniform(rng, &[*inputs, *outputs], *inputs, *outputs))?;
                    if *bias {
                        p.insert(format!("{name}.b"), Tensor::zeros(vec![*outputs]))?;
                    }
                }
                Layer::Conv2d {
                    name,
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => {
                    let fan = in_ch * kernel * kernel;
                    p.insert(
                        format!("{name}.w"),
                        glorot_uniform(rng, &[*out_ch, *in_ch, *kernel, *kernel], fan, out_ch * kernel * kernel),
                    )?;
                    p.insert(format!("{name}.b"), Tensor::zeros(vec![*out_ch]))?;
                }
                _ => {}
            }
        }
        Ok(p)
    }

    /// Records the stack on `g`. `x` has shape `[batch, input_shape...]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.output_shape()?;
        let s = g.shape(x);
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return shape_err(format!("input {s:?} for per-item shape {:?}", self.input_shape));
        }
        let batch = s[0];
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Dense { name, bias, .. } => {
                    let w = g.param(&format!("{name}.w"))?;
                    let b = if *bias { Some(g.param(&format!("{name}.b"))?) } else { None };
                    g.dense(h, w, b)?
                }
                Layer::Conv2d { name, stride, pad, .. } => {
                    let w = g.param(&format!("{name}.w"))?;
                    let b = g.param(&format!("{name}.b"))?;
                    g.conv2d(h, w, b, *stride, *pad)?
                }
                Layer::Flatten => {
                    let n = g.value(h).len() / batch;
                    g.reshape(h, vec![batch, n])?
                }
                Layer::LeakyRelu(s) => g.leaky_relu(h, *s),
                Layer::Tanh => g.tanh(h),
                Layer::Sigmoid => g.sigmoid(h),
                Layer::Softmax => g.softmax_rows(h),
            };
        }
        Ok(h)
    }

    /// Records network plus loss head; returns the scalar loss var.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<'_, T>, input: &Tensor, head: &LossHead) -> Result<Var> {
        let x = g.input(input.cast());
        let y = self.forward(g, x)?;
        let rows = g.shape(y)[0] as f64;
        let check = |t: &Tensor, y_shape: &[usize]| {
            if t.shape() != y_shape {
                shape_err(format!("loss target {:?} vs output {y_shape:?}", t.shape()))
            } else {
                Ok(())
            }
        };
        Ok(match head {
            LossHead::Sum => g.sum(y),
            LossHead::CrossEntropy(t) => {
                check(t, g.shape(y))?;
                let ln = g.ln_clamped(y, LOG_EPS);
                let w = g.mul_const(ln, t.cast())?;
                let s = g.sum(w);
                g.scale(s, -1.0 / rows)
            }
            LossHead::Mse(t) => {
                check(t, g.shape(y))?;
                let target = g.input(t.cast());
                let d = g.sub(y, target)?;
                let s = g.sum_squares(d);
                g.scale(s, 1.0 / g.value(y).len() as f64)
            }
            LossHead::Bce(t) => {
                check(t, g.shape(y))?;
                let n = g.value(y).len() as f64;
                let ln_p = g.ln_clamped(y, LOG_EPS);
                let pos = g.mul_const(ln_p, t.cast())?;
                let q = g.one_minus(y);
                let ln_q = g.ln_clamped(q, LOG_EPS);
                let neg = g.mul_const(ln_q, t.map(|v| 1.0 - v).cast())?;
                let both = g.add(pos, neg)?;
                let s = g.sum(both);
                g.scale(s, -1.0 / n)
            }
        })
    }
}

/// One forward/backward pass: returns the loss and adds the gradients of
/// every trainable parameter into `params`.
pub fn forward_backward(params: &mut ParamSet, net: &Sequential, input: &Tensor, head: &LossHead) -> Result<f32> {
    let (loss, grads) = {
        let mut g = Graph::new(&*params);
        let l = net.loss(&mut g, input, head)?;
        (g.item(l), g.backward(l)?)
    };
    params.accumulate(&grads)?;
    Ok(loss)
}
