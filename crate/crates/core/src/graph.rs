//! Static layer graphs and the reverse-mode pass over them.

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerGrad, LayerKind};
use crate::tensor::Tensor;

/// An ordered sequence of layers with a designated "last convolutional"
/// activation whose channels are the maps `A^k` explained by the saliency
/// methods.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    name: String,
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<Layer>,
    designated_layer: usize,
    /// `shapes[0]` is the input, `shapes[l + 1]` the output of layer `l`.
    shapes: Vec<Vec<usize>>,
}

/// Activations recorded by one forward pass. `activations[0]` is the input
/// and `activations[l + 1]` is the output of layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTape {
    activations: Vec<Tensor>,
}

impl ForwardTape {
    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }

    /// Output of layer `layer`.
    pub fn activation(&self, layer: usize) -> &Tensor {
        &self.activations[layer + 1]
    }

    /// Final layer output: the class scores `S`.
    pub fn scores(&self) -> &Tensor {
        self.activations
            .last()
            .expect("tape holds at least the input")
    }

    pub(crate) fn raw(&self) -> &[Tensor] {
        &self.activations
    }
}

/// A forward tape paired with `∂S^c/∂(activation)` for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    forward: ForwardTape,
    gradients: Vec<Tensor>,
    target_class: usize,
}

impl GradientTape {
    pub fn target_class(&self) -> usize {
        self.target_class
    }

    pub fn scores(&self) -> &Tensor {
        self.forward.scores()
    }

    pub fn forward_tape(&self) -> &ForwardTape {
        &self.forward
    }

    pub fn activation(&self, layer: usize) -> &Tensor {
        self.forward.activation(layer)
    }

    /// `∂S^c / ∂(output of layer)`.
    pub fn gradient(&self, layer: usize) -> &Tensor {
        &self.gradients[layer + 1]
    }

    /// `∂S^c / ∂(input)`.
    pub fn input_gradient(&self) -> &Tensor {
        &self.gradients[0]
    }

    pub(crate) fn raw_gradients(&self) -> &[Tensor] {
        &self.gradients
    }
}

/// Parameter gradients for every layer; `None` for parameterless layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Option<LayerGrad>>);

impl ParamGrads {
    pub fn zeros(graph: &ModelGraph) -> Self {
        ParamGrads(graph.layers.iter().map(Layer::zero_grad).collect())
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, factor: f64) -> Result<()> {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            if let (Some(a), Some(b)) = (a, b) {
                a.add_scaled(b, factor)?;
            }
        }
        Ok(())
    }

    /// All gradient entries flattened in parameter declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.0
            .iter()
            .flatten()
            .flat_map(|g| g.weight.data().iter().chain(g.bias.data()).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.0
            .iter()
            .flatten()
            .all(|g| g.weight.is_finite() && g.bias.is_finite())
    }
}

impl ModelGraph {
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        num_classes: usize,
        layers: Vec<Layer>,
        designated_layer: usize,
    ) -> Result<Self> {
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            layer.check_params()?;
            let prev = shapes.last().unwrap();
            let next = layer.output_shape(prev).ok_or_else(|| Error::LayerShape {
                layer: i,
                expected: layer_input_hint(layer),
                got: prev.clone(),
            })?;
            shapes.push(next);
        }
        if shapes.last() != Some(&vec![num_classes]) {
            return Err(Error::invalid(format!(
                "final layer must emit {num_classes} scores, emits {:?}",
                shapes.last()
            )));
        }
        if designated_layer >= layers.len() {
            return Err(Error::LayerOutOfRange {
                layer: designated_layer,
                num_layers: layers.len(),
            });
        }
        let kind = layers[designated_layer].kind();
        let after_conv = designated_layer > 0
            && kind == LayerKind::Relu
            && layers[designated_layer - 1].kind() == LayerKind::Conv2d;
        if kind != LayerKind::Conv2d && !after_conv {
            return Err(Error::invalid(
                "designated activation layer must be a conv layer or a relu directly after one",
            ));
        }
        let ds = &shapes[designated_layer + 1];
        if ds.len() != 3 || ds[1] < 2 || ds[2] < 2 {
            return Err(Error::invalid(format!(
                "designated activation must have spatial extent of at least 2x2, got {ds:?}"
            )));
        }
        Ok(ModelGraph {
            name: name.into(),
            input_shape,
            num_classes,
            layers,
            designated_layer,
            shapes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn designated_layer(&self) -> usize {
        self.designated_layer
    }

    /// Shape of the designated activation maps, `[K, H, W]`.
    pub fn designated_shape(&self) -> &[usize] {
        &self.shapes[self.designated_layer + 1]
    }

    /// Output shape of layer `layer`.
    pub fn layer_output_shape(&self, layer: usize) -> &[usize] {
        &self.shapes[layer + 1]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// All parameters flattened in declaration order (weight then bias,
    /// layer by layer).
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .flat_map(|(w, b)| w.data().iter().chain(b.data()).copied())
            .collect()
    }

    /// Overwrites all parameters from a flat slice in declaration order.
    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter update".into()));
        }
        let mut offset = 0;
        for (w, b) in self.layers.iter_mut().filter_map(Layer::params_mut) {
            for t in [w, b] {
                let n = t.len();
                t.data_mut().copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Ensures the graph ends with its class scores and does not contain
    /// a softmax on the scoring path.
    pub fn head_is_piecewise_linear(&self) -> bool {
        self.layers[self.designated_layer + 1..]
            .iter()
            .all(Layer::is_piecewise_linear)
    }

    /// Head of the graph as a GAP followed by a single dense layer, if it has
    /// that structure. Returns the dense weight `[num_classes, K]`.
    pub fn gap_dense_weights(&self) -> Option<&Tensor> {
        let head = &self.layers[self.designated_layer + 1..];
        match head {
            [Layer::GlobalAvgPool, Layer::Dense { weight, .. }] => Some(weight),
            _ => None,
        }
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes {
            return Err(Error::ClassOutOfRange {
                class,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<ForwardTape> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::LayerShape {
                layer: 0,
                expected: self.input_shape.clone(),
                got: input.shape().to_vec(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(activations.last().unwrap());
            if !out.is_finite() {
                return Err(Error::NonFinite(format!("layer {i}")));
            }
            activations.push(out);
        }
        Ok(ForwardTape { activations })
    }

    /// Class scores only.
    pub fn scores(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input)?.scores().clone())
    }

    /// Replays the layers after `layer`, treating `activation` as that
    /// layer's output, and returns the final scores.
    pub fn forward_from(&self, layer: usize, activation: &Tensor) -> Result<Tensor> {
        if layer >= self.layers.len() {
            return Err(Error::LayerOutOfRange {
                layer,
                num_layers: self.layers.len(),
            });
        }
        if activation.shape() != self.shapes[layer + 1].as_slice() {
            return Err(Error::LayerShape {
                layer,
                expected: self.shapes[layer + 1].clone(),
                got: activation.shape().to_vec(),
            });
        }
        let mut x = activation.clone();
        for (i, l) in self.layers.iter().enumerate().skip(layer + 1) {
            x = l.forward(&x);
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("layer {i}")));
            }
        }
        Ok(x)
    }

    /// One-hot seed on `S^c` propagated back through every layer.
    pub fn backward(&self, tape: &ForwardTape, class: usize) -> Result<GradientTape> {
        self.check_class(class)?;
        let seed = one_hot(self.num_classes, class);
        let gradients = self.backprop(tape, self.layers.len(), seed, None, false)?;
        Ok(GradientTape {
            forward: tape.clone(),
            gradients,
            target_class: class,
        })
    }

    /// Gradient of every class score w.r.t. the designated activation.
    pub fn designated_gradients_all_classes(&self, tape: &ForwardTape) -> Result<Vec<Tensor>> {
        let start = self.layers.len();
        let d = self.designated_layer + 1;
        (0..self.num_classes)
            .map(|c| {
                let mut grads =
                    self.backprop_until(tape, start, one_hot(self.num_classes, c), d, None, false)?;
                Ok(grads.swap_remove(d))
            })
            .collect()
    }

    /// Guided backpropagation: at every relu the flowing gradient is zeroed
    /// wherever the forward input is non-positive or the incoming gradient
    /// is non-positive. Returns the input-space map.
    pub fn guided_backward(&self, tape: &ForwardTape, class: usize) -> Result<Tensor> {
        self.check_class(class)?;
        let seed = one_hot(self.num_classes, class);
        let mut grads = self.backprop(tape, self.layers.len(), seed, None, true)?;
        Ok(grads.swap_remove(0))
    }

    /// Propagates `seed` (the gradient w.r.t. activation index `start`) back
    /// to the input. Returns gradients for activation indices `0..=start`,
    /// and accumulates parameter gradients when `params` is given.
    pub fn backprop(
        &self,
        tape: &ForwardTape,
        start: usize,
        seed: Tensor,
        params: Option<&mut ParamGrads>,
        guided: bool,
    ) -> Result<Vec<Tensor>> {
        self.backprop_until(tape, start, seed, 0, params, guided)
    }

    fn backprop_until(
        &self,
        tape: &ForwardTape,
        start: usize,
        seed: Tensor,
        stop: usize,
        mut params: Option<&mut ParamGrads>,
        guided: bool,
    ) -> Result<Vec<Tensor>> {
        let acts = tape.raw();
        if acts.len() != self.layers.len() + 1 {
            return Err(Error::invalid("tape was not produced by this graph"));
        }
        if start > self.layers.len() {
            return Err(Error::LayerOutOfRange {
                layer: start,
                num_layers: self.layers.len(),
            });
        }
        if seed.shape() != acts[start].shape() {
            return Err(Error::Shape {
                context: "backprop seed",
                lhs: acts[start].shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Tensor> = acts[..=start]
            .iter()
            .map(|a| Tensor::zeros(a.shape()))
            .collect();
        grads[start] = seed;
        for l in (stop..start).rev() {
            let layer = &self.layers[l];
            let grad_out = &grads[l + 1];
            if let Some(pg) = params.as_deref_mut() {
                if let Some(acc) = pg.0[l].as_mut() {
                    layer.accumulate_param_grad(&acts[l], grad_out, acc, true);
                }
            }
            let grad_in = if guided && matches!(layer, Layer::Relu) {
                acts[l]
                    .zip_map(grad_out, |x, g| if x > 0.0 && g > 0.0 { g } else { 0.0 })
                    .expect("relu shapes")
            } else {
                layer.backward(&acts[l], &acts[l + 1], grad_out)
            };
            if !grad_in.is_finite() {
                return Err(Error::NonFinite(format!("backward through layer {l}")));
            }
            grads[l] = grad_in;
        }
        Ok(grads)
    }

    /// Central-difference estimate of `∂S^c/∂(output of layer)`, perturbing
    /// each element in turn and replaying the rest of the graph.
    pub fn finite_difference(
        &self,
        input: &Tensor,
        class: usize,
        layer: usize,
        h: f64,
    ) -> Result<Tensor> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::invalid(format!(
                "finite-difference step must be > 0, got {h}"
            )));
        }
        self.check_class(class)?;
        let tape = self.forward(input)?;
        if layer >= self.layers.len() {
            return Err(Error::LayerOutOfRange {
                layer,
                num_layers: self.layers.len(),
            });
        }
        let base = tape.activation(layer).clone();
        let mut out = Tensor::zeros(base.shape());
        let mut probe = base.clone();
        for i in 0..base.len() {
            let a = base.data()[i];
            probe.data_mut()[i] = a + h;
            let plus = self.forward_from(layer, &probe)?.data()[class];
            probe.data_mut()[i] = a - h;
            let minus = self.forward_from(layer, &probe)?.data()[class];
            probe.data_mut()[i] = a;
            out.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        Ok(out)
    }

    /// Central-difference estimate of `∂S^c/∂(input)`.
    pub fn finite_difference_input(&self, input: &Tensor, class: usize, h: f64) -> Result<Tensor> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::invalid(format!(
                "finite-difference step must be > 0, got {h}"
            )));
        }
        self.check_class(class)?;
        let mut out = Tensor::zeros(input.shape());
        let mut probe = input.clone();
        for i in 0..input.len() {
            let a = input.data()[i];
            probe.data_mut()[i] = a + h;
            let plus = self.scores(&probe)?.data()[class];
            probe.data_mut()[i] = a - h;
            let minus = self.scores(&probe)?.data()[class];
            probe.data_mut()[i] = a;
            out.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        Ok(out)
    }
}

pub(crate) fn one_hot(n: usize, class: usize) -> Tensor {
    Tensor::from_fn(&[n], |i| if i == class { 1.0 } else { 0.0 })
}

fn layer_input_hint(layer: &Layer) -> Vec<usize> {
    match layer {
        Layer::Conv2d { weight, .. } => vec![weight.shape()[1], 0, 0],
        Layer::Dense { weight, .. } => vec![weight.shape()[1]],
        _ => vec![],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn tiny_cnn() -> ModelGraph {
        let conv_w = Tensor::from_fn(&[2, 1, 2, 2], |i| {
            [0.5, -0.3, 0.8, 0.1, -0.6, 0.4, 0.2, 0.9][i]
        });
        let layers = vec![
            Layer::conv2d(conv_w, t(&[2], &[0.1, -0.2]), 1, 0).unwrap(),
            Layer::Relu,
            Layer::Flatten,
            Layer::dense(
                Tensor::from_fn(&[2, 8], |i| ((i * 5 % 7) as f64 - 3.0) / 4.0),
                t(&[2], &[0.0, 0.1]),
            )
            .unwrap(),
        ];
        ModelGraph::new("tiny", vec![1, 3, 3], 2, layers, 1).unwrap()
    }

    #[test]
    fn dense_identity_forward() {
        let layers = vec![Layer::dense(t(&[2, 2], &[1., 0., 0., 1.]), t(&[2], &[0., 0.])).unwrap()];
        // a dense-only graph has no valid designated conv layer
        assert!(ModelGraph::new("d", vec![2], 2, layers.clone(), 0).is_err());
        let layer = &layers[0];
        let x = t(&[2], &[1., 2.]);
        assert_eq!(layer.forward(&x).data(), &[1., 2.]);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let g = tiny_cnn();
        let err = g.forward(&Tensor::zeros(&[1, 4, 4])).unwrap_err();
        assert!(matches!(err, Error::LayerShape { layer: 0, .. }));

        let bad = vec![
            Layer::conv2d(Tensor::zeros(&[2, 1, 2, 2]), Tensor::zeros(&[2]), 1, 0).unwrap(),
            Layer::Relu,
            Layer::Flatten,
            Layer::dense(Tensor::zeros(&[2, 7]), Tensor::zeros(&[2])).unwrap(),
        ];
        let err = ModelGraph::new("bad", vec![1, 3, 3], 2, bad, 1).unwrap_err();
        assert!(matches!(err, Error::LayerShape { layer: 3, .. }), "{err}");
    }

    #[test]
    fn backward_rejects_bad_class() {
        let g = tiny_cnn();
        let tape = g.forward(&Tensor::filled(&[1, 3, 3], 0.5)).unwrap();
        assert!(matches!(
            g.backward(&tape, 2),
            Err(Error::ClassOutOfRange {
                class: 2,
                num_classes: 2
            })
        ));
    }

    #[test]
    fn backward_matches_finite_difference() {
        let g = tiny_cnn();
        let x = Tensor::from_fn(&[1, 3, 3], |i| (i as f64 * 0.37).sin());
        let tape = g.forward(&x).unwrap();
        for class in 0..2 {
            let gt = g.backward(&tape, class).unwrap();
            for layer in 0..4 {
                let fd = g.finite_difference(&x, class, layer, 1e-4).unwrap();
                for (a, b) in gt.gradient(layer).data().iter().zip(fd.data()) {
                    assert!((a - b).abs() < 1e-8, "layer {layer}: {a} vs {b}");
                }
            }
            let fd_in = g.finite_difference_input(&x, class, 1e-4).unwrap();
            for (a, b) in gt.input_gradient().data().iter().zip(fd_in.data()) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn finite_difference_rejects_non_positive_step() {
        let g = tiny_cnn();
        let x = Tensor::zeros(&[1, 3, 3]);
        assert!(g.finite_difference(&x, 0, 0, 0.0).is_err());
        assert!(g.finite_difference(&x, 0, 0, -1e-4).is_err());
    }

    #[test]
    fn guided_relu_gates() {
        let x = t(&[2], &[-1.0, 2.0]);
        let up = t(&[2], &[1.0, -1.0]);
        let gated = x
            .zip_map(&up, |x, g| if x > 0.0 && g > 0.0 { g } else { 0.0 })
            .unwrap();
        assert_eq!(gated.data(), &[0.0, 0.0]);

        // Through a graph: relu input [3] with upstream 2 passes unchanged.
        let layers = vec![
            Layer::conv2d(t(&[1, 1, 1, 1], &[1.0]), t(&[1], &[0.0]), 1, 0).unwrap(),
            Layer::Relu,
            Layer::Flatten,
            Layer::dense(t(&[1, 4], &[2.0, 2.0, -2.0, 2.0]), t(&[1], &[0.0])).unwrap(),
        ];
        let g = ModelGraph::new("g", vec![1, 2, 2], 1, layers, 1).unwrap();
        let tape = g.forward(&t(&[1, 2, 2], &[3.0, -1.0, 3.0, 3.0])).unwrap();
        let guided = g.guided_backward(&tape, 0).unwrap();
        assert_eq!(guided.data(), &[2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn guided_equals_plain_without_relu() {
        let layers = vec![
            Layer::conv2d(
                Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64 - 3.5),
                Tensor::zeros(&[2]),
                1,
                0,
            )
            .unwrap(),
            Layer::Flatten,
            Layer::dense(
                Tensor::from_fn(&[3, 8], |i| (i as f64 * 0.7).cos()),
                Tensor::zeros(&[3]),
            )
            .unwrap(),
        ];
        let g = ModelGraph::new("lin", vec![1, 3, 3], 3, layers, 0).unwrap();
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f64 - 4.0);
        let tape = g.forward(&x).unwrap();
        for c in 0..3 {
            let plain = g.backward(&tape, c).unwrap();
            assert_eq!(
                &g.guided_backward(&tape, c).unwrap(),
                plain.input_gradient()
            );
        }
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let g = tiny_cnn();
        let x = Tensor::from_fn(&[1, 3, 3], |i| (i as f64).sqrt());
        assert_eq!(g.forward(&x).unwrap(), g.forward(&x).unwrap());
    }

    #[test]
    fn flat_params_round_trip() {
        let mut g = tiny_cnn();
        let p = g.flat_params();
        assert_eq!(p.len(), g.param_count());
        let shifted: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
        g.set_flat_params(&shifted).unwrap();
        assert_eq!(g.flat_params(), shifted);
        assert!(g.set_flat_params(&p[1..]).is_err());
    }
}
