//! Pixel-wise gradient weights `α^{kc}_{ij}`.
//!
//! The general form divides the second derivative of the class score `Y^c`
//! by twice itself plus the map's activation sum times the third
//! derivative. Only diagonal derivatives are used. For `Y^c = exp(S^c)` over a
//! piecewise-linear network both derivatives are `exp(S^c)` times a power of
//! `g = ∂S^c/∂A`, and the exponential cancels. For the softmax score the
//! derivatives follow from the per-class gradients `∂S^k/∂A`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominators at or below this magnitude yield `α = 0`.
pub const ALPHA_EPS: f64 = 1e-12;

/// Per-pixel gradient weights, shaped `[K, H, W]` like the activations.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMap {
    values: Tensor,
}

impl AlphaMap {
    /// Wraps externally supplied weights (e.g. hand-crafted ones).
    pub fn new(values: Tensor) -> Result<Self> {
        values.chw()?;
        Ok(AlphaMap { values })
    }

    /// `α ≡ 1/Z` with `Z = H·W`, the weighting under which Grad-CAM++
    /// reduces to Grad-CAM.
    pub fn uniform(shape: &[usize]) -> Result<Self> {
        let [_, h, w] = *shape else {
            return Err(Error::invalid(format!(
                "alpha shape must be [K, H, W], got {shape:?}"
            )));
        };
        Ok(AlphaMap {
            values: Tensor::filled(shape, 1.0 / (h * w) as f64),
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// `α = d2 / (2·d2 + Σ_ab A_ab · d3)` per map, zero where the denominator
/// vanishes.
pub fn alpha_from_derivatives(
    second: &Tensor,
    third: &Tensor,
    activations: &Tensor,
) -> Result<AlphaMap> {
    let (k, h, w) = activations.chw()?;
    second.expect_same_shape(activations, "alpha second derivative")?;
    third.expect_same_shape(activations, "alpha third derivative")?;
    let plane = h * w;
    let mut out = vec![0.0; k * plane];
    for m in 0..k {
        let range = m * plane..(m + 1) * plane;
        let act_sum: f64 = activations.data()[range.clone()].iter().sum();
        for i in range {
            let d2 = second.data()[i];
            let den = 2.0 * d2 + act_sum * third.data()[i];
            out[i] = if den.abs() <= ALPHA_EPS || !den.is_finite() {
                0.0
            } else {
                d2 / den
            };
        }
    }
    Ok(AlphaMap {
        values: Tensor::from_raw(activations.shape().to_vec(), out),
    })
}

/// Closed-form weights for `Y^c = exp(S^c)`:
/// `α = g² / (2g² + Σ_ab A_ab · g³)` with `g = ∂S^c/∂A`.
pub fn alpha_exponential(gradients: &Tensor, activations: &Tensor) -> Result<AlphaMap> {
    gradients.expect_same_shape(activations, "alpha_exponential")?;
    let second = gradients.map(|g| g * g);
    let third = gradients.map(|g| g * g * g);
    alpha_from_derivatives(&second, &third, activations)
}

/// First three diagonal derivatives of a score function w.r.t. each
/// activation pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDerivatives {
    pub first: Tensor,
    pub second: Tensor,
    pub third: Tensor,
}

/// Diagonal derivatives of `Y^c = softmax(S)_c` for a network whose scores
/// are piecewise linear in `A` (so `∂²S/∂A² = 0`).
///
/// `class_gradients[k]` holds `∂S^k/∂A` for every class `k`.
pub fn softmax_derivatives(
    class: usize,
    scores: &[f64],
    class_gradients: &[Tensor],
) -> Result<ScoreDerivatives> {
    let n = scores.len();
    if class_gradients.len() != n {
        return Err(Error::MissingInput("per-class gradients for every class"));
    }
    if class >= n {
        return Err(Error::ClassOutOfRange {
            class,
            num_classes: n,
        });
    }
    let shape = class_gradients[0].shape().to_vec();
    for g in class_gradients {
        g.expect_same_shape(&class_gradients[0], "per-class gradients")?;
    }
    let y = crate::layers::softmax(scores);
    let len = class_gradients[0].len();
    let mut first = vec![0.0; len];
    let mut second = vec![0.0; len];
    let mut third = vec![0.0; len];
    let mut y1 = vec![0.0; n];
    let mut y2 = vec![0.0; n];
    for i in 0..len {
        let g = |k: usize| class_gradients[k].data()[i];
        let gbar: f64 = (0..n).map(|k| y[k] * g(k)).sum();
        for k in 0..n {
            y1[k] = y[k] * (g(k) - gbar);
        }
        let gbar1: f64 = (0..n).map(|k| y1[k] * g(k)).sum();
        for k in 0..n {
            y2[k] = y1[k] * (g(k) - gbar) - y[k] * gbar1;
        }
        let gbar2: f64 = (0..n).map(|k| y2[k] * g(k)).sum();
        let dc = g(class) - gbar;
        first[i] = y1[class];
        second[i] = y2[class];
        third[i] = y2[class] * dc - 2.0 * y1[class] * gbar1 - y[class] * gbar2;
    }
    Ok(ScoreDerivatives {
        first: Tensor::from_raw(shape.clone(), first),
        second: Tensor::from_raw(shape.clone(), second),
        third: Tensor::from_raw(shape, third),
    })
}

/// Closed-form weights for the softmax score.
pub fn alpha_softmax(
    class: usize,
    scores: &[f64],
    class_gradients: &[Tensor],
    activations: &Tensor,
) -> Result<AlphaMap> {
    let d = softmax_derivatives(class, scores, class_gradients)?;
    alpha_from_derivatives(&d.second, &d.third, activations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff::{relative_error, second_derivative, third_derivative};
    use proptest::prelude::*;

    #[test]
    fn zero_gradients_give_zero_alpha() {
        let a = Tensor::filled(&[2, 3, 3], 1.5);
        let g = Tensor::zeros(&[2, 3, 3]);
        let alpha = alpha_exponential(&g, &a).unwrap();
        assert!(alpha.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_half_gradient_on_2x2() {
        // 0.25 / (2 * 0.25 + 4 * 0.125) = 0.25
        let a = Tensor::filled(&[1, 2, 2], 1.0);
        let g = Tensor::filled(&[1, 2, 2], 0.5);
        let alpha = alpha_exponential(&g, &a).unwrap();
        for &v in alpha.values().data() {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn uniform_case_matches_finite_differences_of_exp_linear_score() {
        // S(a) = 0.5 * a along one pixel, Y = exp(S).
        let y = |a: f64| (0.5 * a).exp();
        let d2 = second_derivative(y, 0.0, 1e-2);
        let d3 = third_derivative(y, 0.0, 1e-2);
        let alpha = d2 / (2.0 * d2 + 4.0 * d3);
        assert!(relative_error(alpha, 0.25, 1e-12) < 1e-6);
    }

    #[test]
    fn single_class_softmax_is_constant() {
        let g = vec![Tensor::from_fn(&[1, 2, 2], |i| i as f64 - 1.5)];
        let a = Tensor::filled(&[1, 2, 2], 2.0);
        let alpha = alpha_softmax(0, &[3.0], &g, &a).unwrap();
        assert!(alpha.values().data().iter().all(|&v| v == 0.0));
        let d = softmax_derivatives(0, &[3.0], &g).unwrap();
        assert!(d.first.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_derivatives_match_stencils_for_equal_logits() {
        // Identical logits and identical gradients: Y^c is constant along
        // every pixel direction.
        let g = Tensor::from_fn(&[1, 2, 2], |i| 0.3 * i as f64 - 0.4);
        let grads = vec![g.clone(), g.clone()];
        let d = softmax_derivatives(0, &[1.0, 1.0], &grads).unwrap();
        for i in 0..4 {
            let gi = g.data()[i];
            let y = |t: f64| crate::layers::softmax(&[1.0 + gi * t, 1.0 + gi * t])[0];
            let fd2 = second_derivative(y, 0.0, 1e-2);
            let fd3 = third_derivative(y, 0.0, 1e-2);
            assert!((d.first.data()[i]).abs() < 1e-15);
            assert!((d.second.data()[i] - fd2).abs() < 1e-10);
            assert!((d.third.data()[i] - fd3).abs() < 1e-8);
        }
    }

    #[test]
    fn missing_class_gradients_rejected() {
        let g = vec![Tensor::zeros(&[1, 2, 2])];
        let a = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(
            alpha_softmax(0, &[1.0, 2.0], &g, &a),
            Err(Error::MissingInput(_))
        ));
    }

    proptest! {
        #[test]
        fn alpha_is_always_finite(
            grads in proptest::collection::vec(-1e3f64..1e3, 8),
            acts in proptest::collection::vec(0.0f64..1e3, 8),
            zero_mask in proptest::collection::vec(any::<bool>(), 8),
        ) {
            let g: Vec<f64> = grads.iter().zip(&zero_mask).map(|(&g, &z)| if z { 0.0 } else { g }).collect();
            let gt = Tensor::new(vec![2, 2, 2], g).unwrap();
            let at = Tensor::new(vec![2, 2, 2], acts).unwrap();
            let alpha = alpha_exponential(&gt, &at).unwrap();
            prop_assert!(alpha.values().is_finite());
            for (a, g) in alpha.values().data().iter().zip(gt.data()) {
                if *g == 0.0 { prop_assert_eq!(*a, 0.0); }
            }
        }

        #[test]
        fn softmax_alpha_is_always_finite(
            scores in proptest::collection::vec(-20f64..20.0, 3),
            grads in proptest::collection::vec(-10f64..10.0, 12),
            acts in proptest::collection::vec(0.0f64..10.0, 4),
        ) {
            let g: Vec<Tensor> = grads.chunks(4)
                .map(|c| Tensor::new(vec![1, 2, 2], c.to_vec()).unwrap())
                .collect();
            let a = Tensor::new(vec![1, 2, 2], acts).unwrap();
            let alpha = alpha_softmax(1, &scores, &g, &a).unwrap();
            prop_assert!(alpha.values().is_finite());
        }
    }
}
