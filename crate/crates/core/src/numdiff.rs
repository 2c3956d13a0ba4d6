//! Finite-difference stencils, and a gradient checker that compares every
//! layer's backward pass with them.
//!
//! These serve as independent oracles for analytic derivatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{one_hot, ModelGraph, ParamGrads};
use crate::layers::LayerKind;
use crate::tensor::Tensor;

/// Default step for first-order checks.
pub const DEFAULT_STEP: f64 = 1e-4;

/// `(f(a + h) - f(a - h)) / 2h`
pub fn central_difference(f: impl Fn(f64) -> f64, a: f64, h: f64) -> f64 {
    (f(a + h) - f(a - h)) / (2.0 * h)
}

/// Fourth-order accurate central stencil for the second derivative.
pub fn second_derivative(f: impl Fn(f64) -> f64, a: f64, h: f64) -> f64 {
    (-f(a + 2.0 * h) + 16.0 * f(a + h) - 30.0 * f(a) + 16.0 * f(a - h) - f(a - 2.0 * h))
        / (12.0 * h * h)
}

/// Fourth-order accurate central stencil for the third derivative.
pub fn third_derivative(f: impl Fn(f64) -> f64, a: f64, h: f64) -> f64 {
    (-f(a + 3.0 * h) + 8.0 * f(a + 2.0 * h) - 13.0 * f(a + h) + 13.0 * f(a - h)
        - 8.0 * f(a - 2.0 * h)
        + f(a - 3.0 * h))
        / (8.0 * h * h * h)
}

/// `|a - b| / max(|a|, |b|)`, falling back to the absolute difference when
/// both magnitudes are below `floor`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < floor {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Magnitude below which errors are judged absolutely rather than relatively.
pub const NEAR_ZERO: f64 = 1e-8;

/// Result of checking one gradient target of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub layer: usize,
    pub kind: LayerKind,
    /// `input`, `weight` or `bias`.
    pub target: &'static str,
    pub points: usize,
    /// Worst relative error among points whose magnitude reaches
    /// [`NEAR_ZERO`].
    pub max_relative_error: f64,
    /// Worst absolute error among the remaining points.
    pub max_absolute_error: f64,
}

impl GradientCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.points > 0 && self.max_relative_error < rel_tol && self.max_absolute_error < NEAR_ZERO
    }
}

/// Compares `∂S^c/∂x` from backprop with central differences at `points`
/// random elements of every layer's input, and of every weight and bias.
///
/// Points where the one-sided differences disagree straddle a kink (relu,
/// max-pool ties) and are redrawn.
pub fn check_graph_gradients(
    graph: &ModelGraph,
    input: &Tensor,
    class: usize,
    points: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<GradientCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = graph.forward(input)?;
    let back = graph.backward(&tape, class)?;
    let mut params = ParamGrads::zeros(graph);
    graph.backprop(
        &tape,
        graph.layers().len(),
        one_hot(graph.num_classes(), class),
        Some(&mut params),
        false,
    )?;
    let mut out = Vec::new();

    for (l, layer) in graph.layers().iter().enumerate() {
        let (base, analytic) = if l == 0 {
            (tape.input(), back.input_gradient())
        } else {
            (tape.activation(l - 1), back.gradient(l - 1))
        };
        let mut probe = base.clone();
        let mut eval = |i: usize, v: f64| -> Result<f64> {
            probe.data_mut()[i] = v;
            let s = if l == 0 {
                graph.scores(&probe)?
            } else {
                graph.forward_from(l - 1, &probe)?
            };
            probe.data_mut()[i] = base.data()[i];
            Ok(s.data()[class])
        };
        let check = sample_points(&mut rng, base.data(), analytic.data(), points, h, &mut eval)?;
        out.push(GradientCheck {
            layer: l,
            kind: layer.kind(),
            target: "input",
            ..check
        });
    }

    let flat = graph.flat_params();
    let analytic = params.flatten();
    let mut offset = 0;
    for (l, layer) in graph.layers().iter().enumerate() {
        let Some((w, b)) = layer.params() else {
            continue;
        };
        for (target, n) in [("weight", w.len()), ("bias", b.len())] {
            let range = offset..offset + n;
            let mut probe = graph.clone();
            let mut values = flat.clone();
            let mut eval = |i: usize, v: f64| -> Result<f64> {
                values[offset + i] = v;
                probe.set_flat_params(&values)?;
                values[offset + i] = flat[offset + i];
                Ok(probe.scores(input)?.data()[class])
            };
            let check = sample_points(
                &mut rng,
                &flat[range.clone()],
                &analytic[range],
                points,
                h,
                &mut eval,
            )?;
            out.push(GradientCheck {
                layer: l,
                kind: layer.kind(),
                target,
                ..check
            });
            offset += n;
        }
    }
    Ok(out)
}

fn sample_points(
    rng: &mut ChaCha8Rng,
    base: &[f64],
    analytic: &[f64],
    points: usize,
    h: f64,
    eval: &mut dyn FnMut(usize, f64) -> Result<f64>,
) -> Result<GradientCheck> {
    let mut check = GradientCheck {
        layer: 0,
        kind: LayerKind::Flatten,
        target: "",
        points: 0,
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
    };
    for _ in 0..points * 50 {
        if check.points == points || base.is_empty() {
            break;
        }
        let i = rng.gen_range(0..base.len());
        let a = base[i];
        let (plus, mid, minus) = (eval(i, a + h)?, eval(i, a)?, eval(i, a - h)?);
        let (fwd, bwd) = ((plus - mid) / h, (mid - minus) / h);
        if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()) + 1e-7 {
            continue;
        }
        let fd = (plus - minus) / (2.0 * h);
        let g = analytic[i];
        if g.abs().max(fd.abs()) < NEAR_ZERO {
            check.max_absolute_error = check.max_absolute_error.max((g - fd).abs());
        } else {
            check.max_relative_error = check
                .max_relative_error
                .max(relative_error(g, fd, NEAR_ZERO));
        }
        check.points += 1;
    }
    Ok(check)
}
