//! Model specs, parameter containers, and the tape-lowered forward pass.
//!
//! Layer vocabulary is deliberately small: strided conv, dense, relu,
//! hardtanh, flatten. Convolution is lowered to `im2col` + matmul so its
//! backward (and backward-of-backward) falls out of the primitive set.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tape::{ConvGeom, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Dense { output: usize },
    Relu,
    Hardtanh,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: String,
    /// Input image dimensions (channels, height, width); batch is implicit.
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Activation shape while walking a spec: image-like or flattened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Image { c: usize, h: usize, w: usize },
    Flat { f: usize },
}

impl ModelSpec {
    /// Checks layer wiring and returns the activation shape after each layer.
    /// Errors name the offending layer index.
    pub fn validate(&self) -> Result<Vec<Shape>> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config("input dimensions must be nonzero"));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        let mut cur = Shape::Image { c, h, w };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (layer, cur) {
                (LayerSpec::Conv2d { out_channels, kernel, stride, padding }, Shape::Image { c, h, w }) => {
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(Error::config(format!(
                            "layer {}: conv2d parameters must be nonzero",
                            i
                        )));
                    }
                    if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                        return Err(Error::config(format!(
                            "layer {}: kernel {} exceeds padded input {}x{}",
                            i,
                            kernel,
                            h + 2 * padding,
                            w + 2 * padding
                        )));
                    }
                    let _ = c;
                    let ho = (h + 2 * padding - kernel) / stride + 1;
                    let wo = (w + 2 * padding - kernel) / stride + 1;
                    Shape::Image { c: *out_channels, h: ho, w: wo }
                }
                (LayerSpec::Conv2d { .. }, Shape::Flat { .. }) => {
                    return Err(Error::config(format!(
                        "layer {}: conv2d requires an image-shaped input (it was flattened earlier)",
                        i
                    )));
                }
                (LayerSpec::Dense { output }, Shape::Flat { .. }) => {
                    if *output == 0 {
                        return Err(Error::config(format!("layer {}: dense output must be nonzero", i)));
                    }
                    Shape::Flat { f: *output }
                }
                (LayerSpec::Dense { .. }, Shape::Image { .. }) => {
                    return Err(Error::config(format!(
                        "layer {}: dense requires a flattened input; insert flatten first",
                        i
                    )));
                }
                (LayerSpec::Flatten, Shape::Image { c, h, w }) => Shape::Flat { f: c * h * w },
                (LayerSpec::Flatten, Shape::Flat { .. }) => {
                    return Err(Error::config(format!("layer {}: input is already flat", i)));
                }
                (LayerSpec::Relu, s) | (LayerSpec::Hardtanh, s) => s,
            };
            out.push(cur);
        }
        match (self.layers.last(), out.last()) {
            (Some(LayerSpec::Dense { .. }), Some(Shape::Flat { f })) if *f == self.classes => Ok(out),
            _ => Err(Error::config(format!(
                "model must end with a dense layer producing {} classes",
                self.classes
            ))),
        }
    }

    /// Parameter tensor shapes in storage order (weight then bias per
    /// parameterised layer) with each tensor's fan-in.
    pub fn param_shapes(&self) -> Result<Vec<(Vec<usize>, usize)>> {
        let shapes = self.validate()?;
        let mut cur = Shape::Image { c: self.input.0, h: self.input.1, w: self.input.2 };
        let mut params = Vec::new();
        for (layer, after) in self.layers.iter().zip(&shapes) {
            match (layer, cur) {
                (LayerSpec::Conv2d { out_channels, kernel, .. }, Shape::Image { c, .. }) => {
                    let fan_in = c * kernel * kernel;
                    params.push((vec![*out_channels, c, *kernel, *kernel], fan_in));
                    params.push((vec![*out_channels], fan_in));
                }
                (LayerSpec::Dense { output }, Shape::Flat { f }) => {
                    params.push((vec![*output, f], f));
                    params.push((vec![*output], f));
                }
                _ => {}
            }
            cur = *after;
        }
        Ok(params)
    }

    /// Index into the parameter list of the last dense layer's weight.
    pub fn final_dense_weight_index(&self) -> Result<usize> {
        self.validate()?;
        let mut idx = 0usize;
        let mut last = None;
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv2d { .. } => idx += 2,
                LayerSpec::Dense { .. } => {
                    last = Some(idx);
                    idx += 2;
                }
                _ => {}
            }
        }
        last.ok_or_else(|| Error::config("model has no dense layer"))
    }

    // ── presets ──

    /// Two strided conv layers and two dense layers over 28x28 grayscale.
    pub fn mnist_dnn() -> ModelSpec {
        ModelSpec {
            name: "mnist_dnn".into(),
            input: (1, 28, 28),
            classes: 10,
            layers: vec![
                LayerSpec::Conv2d { out_channels: 12, kernel: 5, stride: 2, padding: 2 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { out_channels: 24, kernel: 5, stride: 2, padding: 2 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { output: 120 },
                LayerSpec::Relu,
                LayerSpec::Dense { output: 10 },
            ],
        }
    }

    /// One hidden layer over a small input; the workhorse for fast tests.
    pub fn tiny_mlp(input: (usize, usize, usize), hidden: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            name: format!("tiny_mlp_{}", hidden),
            input,
            classes,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { output: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { output: classes },
            ],
        }
    }

    /// Linear softmax classifier.
    pub fn linear_probe(input: (usize, usize, usize), classes: usize) -> ModelSpec {
        ModelSpec {
            name: "linear_probe".into(),
            input,
            classes,
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { output: classes }],
        }
    }
}

/// Flat parameter store; order matches `ModelSpec::param_shapes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Per-parameter gradients, congruent with `ModelParams.tensors`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        ParamGrads {
            grads: params.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    /// Squared L2 norm over the concatenation of all gradients.
    pub fn sq_norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum()
    }
}

/// Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// deterministic in `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    let shapes = spec.param_shapes()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut tensors = Vec::with_capacity(shapes.len());
    for (shape, fan_in) in shapes {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        tensors.push(Tensor::from_parts(shape, data));
    }
    Ok(ModelParams { tensors })
}

/// Node handles of a built forward graph.
pub struct GraphIds {
    pub params: Vec<NodeId>,
    pub input: NodeId,
    pub logits: NodeId,
}

/// Lowers the spec onto `tape` with fresh leaves for parameters and input.
/// `x` must be [batch, c, h, w] matching the spec input.
pub fn build_forward(tape: &mut Tape, spec: &ModelSpec, params: &ModelParams, x: &Tensor) -> Result<GraphIds> {
    let expected = spec.param_shapes()?;
    if expected.len() != params.tensors.len() {
        return Err(Error::input(format!(
            "parameter count mismatch: spec has {}, got {}",
            expected.len(),
            params.tensors.len()
        )));
    }
    for (i, ((shape, _), t)) in expected.iter().zip(&params.tensors).enumerate() {
        if shape != t.shape() {
            return Err(Error::input(format!(
                "parameter {} shape mismatch: spec {:?}, got {:?}",
                i,
                shape,
                t.shape()
            )));
        }
    }
    let (c0, h0, w0) = spec.input;
    if x.shape().len() != 4 || x.shape()[1..] != [c0, h0, w0] {
        return Err(Error::input(format!(
            "input must be [batch, {}, {}, {}], got {:?}",
            c0,
            h0,
            w0,
            x.shape()
        )));
    }
    let batch = x.shape()[0];
    if batch == 0 {
        return Err(Error::input("empty batch"));
    }

    let param_ids: Vec<NodeId> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let input = tape.leaf(x.clone());

    let mut cur = input;
    let mut cur_shape = Shape::Image { c: c0, h: h0, w: w0 };
    let mut pi = 0usize;
    for layer in &spec.layers {
        match (layer, cur_shape) {
            (LayerSpec::Conv2d { out_channels, kernel, stride, padding }, Shape::Image { c, h, w }) => {
                let g = ConvGeom { n: batch, c, h, w, k: *kernel, stride: *stride, pad: *padding };
                let (ho, wo) = (g.out_h(), g.out_w());
                let s = ho * wo;
                let w_id = param_ids[pi];
                let b_id = param_ids[pi + 1];
                pi += 2;
                let w_mat = tape.reshape(w_id, vec![*out_channels, c * kernel * kernel]);
                let cols = tape.im2col(cur, g);
                let y = tape.matmul(w_mat, cols);
                let bb = tape.broadcast_cols(b_id, batch * s);
                let yb = tape.add(y, bb);
                let nf = tape.batch_to_front(yb, *out_channels, batch, s);
                cur = tape.reshape(nf, vec![batch, *out_channels, ho, wo]);
                cur_shape = Shape::Image { c: *out_channels, h: ho, w: wo };
            }
            (LayerSpec::Dense { output }, Shape::Flat { .. }) => {
                let w_id = param_ids[pi];
                let b_id = param_ids[pi + 1];
                pi += 2;
                let wt = tape.transpose(w_id);
                let y = tape.matmul(cur, wt);
                let bb = tape.broadcast_rows(b_id, batch);
                cur = tape.add(y, bb);
                cur_shape = Shape::Flat { f: *output };
            }
            (LayerSpec::Relu, s) => {
                cur = tape.relu(cur);
                cur_shape = s;
            }
            (LayerSpec::Hardtanh, s) => {
                cur = tape.hardtanh(cur);
                cur_shape = s;
            }
            (LayerSpec::Flatten, Shape::Image { c, h, w }) => {
                cur = tape.reshape(cur, vec![batch, c * h * w]);
                cur_shape = Shape::Flat { f: c * h * w };
            }
            _ => unreachable!("validate() admitted an ill-formed layer sequence"),
        }
    }
    Ok(GraphIds { params: param_ids, input, logits: cur })
}

/// Forward pass returning logits plus the live tape and node handles.
pub fn forward(spec: &ModelSpec, params: &ModelParams, x: &Tensor) -> Result<(Tensor, Tape, GraphIds)> {
    let mut tape = Tape::new();
    let ids = build_forward(&mut tape, spec, params, x)?;
    let logits = tape.value(ids.logits).clone();
    Ok((logits, tape, ids))
}

/// Mean cross-entropy loss and its gradient with respect to every parameter.
pub fn loss_and_param_grads(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor,
    labels: &[usize],
) -> Result<(f64, ParamGrads)> {
    if labels.len() != x.shape()[0] {
        return Err(Error::input(format!(
            "batch has {} images but {} labels",
            x.shape()[0],
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= spec.classes) {
        return Err(Error::input(format!("label {} out of range for {} classes", bad, spec.classes)));
    }
    let mut tape = Tape::new();
    let ids = build_forward(&mut tape, spec, params, x)?;
    let loss = tape.cross_entropy(ids.logits, labels);
    let loss_v = tape.value(loss).item();
    if !loss_v.is_finite() {
        return Err(Error::numeric(format!("non-finite loss {}", loss_v)));
    }
    let adj = tape.backward(loss, &ids.params);
    let grads = ids
        .params
        .iter()
        .zip(adj)
        .map(|(&p, a)| tape.grad_of(a, p))
        .collect::<Vec<_>>();
    Ok((loss_v, ParamGrads { grads }))
}

/// Argmax class predictions for a batch.
pub fn predict(spec: &ModelSpec, params: &ModelParams, x: &Tensor) -> Result<Vec<usize>> {
    let (logits, _, _) = forward(spec, params, x)?;
    let classes = spec.classes;
    let n = x.shape()[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let mut best = 0usize;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_dnn_validates_with_expected_shapes() {
        let spec = ModelSpec::mnist_dnn();
        let shapes = spec.validate().unwrap();
        assert_eq!(shapes[0], Shape::Image { c: 12, h: 14, w: 14 });
        assert_eq!(shapes[2], Shape::Image { c: 24, h: 7, w: 7 });
        assert_eq!(*shapes.last().unwrap(), Shape::Flat { f: 10 });
        let params = spec.param_shapes().unwrap();
        assert_eq!(params.len(), 8);
        assert_eq!(params[0].0, vec![12, 1, 5, 5]);
        assert_eq!(params[4].0, vec![120, 1176]);
    }

    #[test]
    fn dense_on_image_input_is_rejected_with_layer_index() {
        let spec = ModelSpec {
            name: "bad".into(),
            input: (1, 4, 4),
            classes: 2,
            layers: vec![LayerSpec::Dense { output: 2 }],
        };
        let err = spec.validate().unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{}", err);
    }

    #[test]
    fn model_must_terminate_in_class_dense() {
        let spec = ModelSpec {
            name: "bad".into(),
            input: (1, 4, 4),
            classes: 3,
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { output: 5 }],
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn build_model_is_deterministic_and_bounded() {
        let spec = ModelSpec::tiny_mlp((1, 4, 4), 8, 3);
        let a = build_model(&spec, 7).unwrap();
        let b = build_model(&spec, 7).unwrap();
        assert_eq!(a, b);
        let c = build_model(&spec, 8).unwrap();
        assert_ne!(a, c);
        let bound = 1.0 / (16f64).sqrt();
        assert!(a.tensors[0].data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn forward_shapes_and_grad_congruence() {
        let spec = ModelSpec::mnist_dnn();
        let params = build_model(&spec, 1).unwrap();
        let x = Tensor::full(vec![2, 1, 28, 28], 0.5);
        let (logits, _, _) = forward(&spec, &params, &x).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        let (loss, grads) = loss_and_param_grads(&spec, &params, &x, &[3, 7]).unwrap();
        assert!(loss.is_finite());
        assert_eq!(grads.grads.len(), params.tensors.len());
        for (g, p) in grads.grads.iter().zip(&params.tensors) {
            assert_eq!(g.shape(), p.shape());
        }
    }

    #[test]
    fn final_dense_weight_index_walks_params() {
        assert_eq!(ModelSpec::mnist_dnn().final_dense_weight_index().unwrap(), 6);
        assert_eq!(ModelSpec::tiny_mlp((1, 4, 4), 8, 3).final_dense_weight_index().unwrap(), 2);
    }
}
