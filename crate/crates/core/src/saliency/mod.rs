//! Class-conditional saliency maps: CAM, Grad-CAM, Grad-CAM++ and the
//! Grad-CAM++ variant that admits negative gradients.
//!
//! Every method produces feature-map weights `w^c_k` and combines the
//! designated activations as `L^c = relu(Σ_k w^c_k A^k)`.
//!
//! For the exponential score `Y^c = exp(S^c)` the positive factor
//! `exp(S^c)` in `∂Y^c/∂A` is never materialised: weights are computed from
//! `g = ∂S^c/∂A` directly, so maps differ from the literal formula by a
//! per-image positive constant that min-max normalisation removes.

mod alpha;
mod maps;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use alpha::{
    alpha_exponential, alpha_from_derivatives, alpha_softmax, softmax_derivatives, AlphaMap,
    ScoreDerivatives, ALPHA_EPS,
};
pub(crate) use maps::upsample_bilinear_adjoint;
pub use maps::{
    explanation_map, guided_fuse, min_max_normalize, normalize_threshold, upsample_bilinear,
};

use crate::error::{Error, Result};
use crate::graph::{GradientTape, ModelGraph};
use crate::layers::softmax;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "cam")]
    Cam,
    #[serde(rename = "grad-cam")]
    GradCam,
    #[serde(rename = "grad-cam++")]
    GradCamPP,
    /// Grad-CAM++ without the relu on gradients.
    #[serde(rename = "grad-cam++perp")]
    GradCamPPPerp,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Cam,
        Method::GradCam,
        Method::GradCamPP,
        Method::GradCamPPPerp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cam => "cam",
            Method::GradCam => "grad-cam",
            Method::GradCamPP => "grad-cam++",
            Method::GradCamPPPerp => "grad-cam++perp",
        }
    }

    /// True for methods that need pixel-wise `α` weights.
    pub fn uses_alpha(self) -> bool {
        matches!(self, Method::GradCamPP | Method::GradCamPPPerp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cam" => Ok(Method::Cam),
            "grad-cam" | "grad_cam" | "gradcam" => Ok(Method::GradCam),
            "grad-cam++" | "grad_cam_pp" | "gradcam++" => Ok(Method::GradCamPP),
            "grad-cam++perp" | "grad_cam_pp_perp" | "grad-cam++-perp" => Ok(Method::GradCamPPPerp),
            other => Err(Error::UnknownMethod(other.to_string())),
        }
    }
}

/// The smooth class score `Y^c` whose derivatives define `α`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFunction {
    #[default]
    Exponential,
    Softmax,
}

/// A class-conditional saliency map at feature-map resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub values: Tensor,
    pub class_index: usize,
    pub method: Method,
}

/// Method-specific inputs to [`feature_weights`].
#[derive(Debug, Clone, Copy, Default)]
pub struct WeightInputs<'a> {
    pub class: usize,
    /// `∂Y^c/∂A`, shaped `[K, H, W]`. Required by every gradient method.
    pub gradients: Option<&'a Tensor>,
    /// Required by the Grad-CAM++ methods.
    pub alpha: Option<&'a AlphaMap>,
    /// `[num_classes, K]` dense weights following global average pooling.
    /// Required by CAM.
    pub gap_dense_weights: Option<&'a Tensor>,
}

/// Per-feature-map weights `w^c_k`.
///
/// * CAM: row `c` of the dense weights after GAP.
/// * Grad-CAM: `(1/Z) Σ_ij ∂Y^c/∂A^k_ij`.
/// * Grad-CAM++: `Σ_ij α_ij relu(∂Y^c/∂A^k_ij)`.
/// * Grad-CAM++⊥: `Σ_ij α_ij ∂Y^c/∂A^k_ij`.
pub fn feature_weights(method: Method, inputs: WeightInputs<'_>) -> Result<Tensor> {
    if method == Method::Cam {
        let w = inputs
            .gap_dense_weights
            .ok_or(Error::MissingInput("dense weights for CAM"))?;
        let [classes, k] = *w.shape() else {
            return Err(Error::invalid("CAM dense weights must be [classes, K]"));
        };
        if inputs.class >= classes {
            return Err(Error::ClassOutOfRange {
                class: inputs.class,
                num_classes: classes,
            });
        }
        return Tensor::vector(w.data()[inputs.class * k..(inputs.class + 1) * k].to_vec());
    }

    let grads = inputs
        .gradients
        .ok_or(Error::MissingInput("gradients of the class score"))?;
    let (k, h, w) = grads.chw()?;
    let plane = h * w;
    let per_map = |f: &dyn Fn(usize) -> f64| -> Tensor {
        Tensor::from_raw(
            vec![k],
            (0..k)
                .map(|m| (m * plane..(m + 1) * plane).map(f).sum())
                .collect(),
        )
    };
    let g = grads.data();
    match method {
        Method::GradCam => {
            // same rounding as Grad-CAM++ under a uniform alpha of 1/Z
            let inv_z = 1.0 / plane as f64;
            Ok(per_map(&|i| inv_z * g[i]))
        }
        Method::GradCamPP | Method::GradCamPPPerp => {
            let alpha = inputs
                .alpha
                .ok_or(Error::MissingInput("alpha map for Grad-CAM++"))?;
            alpha
                .values()
                .expect_same_shape(grads, "alpha vs gradients")?;
            let a = alpha.values().data();
            if method == Method::GradCamPP {
                Ok(per_map(&|i| a[i] * g[i].max(0.0)))
            } else {
                Ok(per_map(&|i| a[i] * g[i]))
            }
        }
        Method::Cam => unreachable!(),
    }
}

/// `relu(Σ_k w_k A^k)` over the `[K, H, W]` activations.
pub fn saliency_values(weights: &Tensor, activations: &Tensor) -> Result<Tensor> {
    let (k, h, w) = activations.chw()?;
    if weights.shape() != [k] {
        return Err(Error::Shape {
            context: "saliency weights",
            lhs: weights.shape().to_vec(),
            rhs: vec![k],
        });
    }
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for (m, &wk) in weights.data().iter().enumerate() {
        for (o, &a) in out
            .iter_mut()
            .zip(&activations.data()[m * plane..(m + 1) * plane])
        {
            *o += wk * a;
        }
    }
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(Tensor::from_raw(vec![h, w], out))
}

pub fn saliency(
    method: Method,
    class_index: usize,
    weights: &Tensor,
    activations: &Tensor,
) -> Result<SaliencyMap> {
    Ok(SaliencyMap {
        values: saliency_values(weights, activations)?,
        class_index,
        method,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplainOptions {
    pub score: ScoreFunction,
    /// Replace `α` by `1/Z` for the Grad-CAM++ methods.
    pub uniform_alpha: bool,
}

/// Everything computed while explaining one image.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub class: usize,
    pub probabilities: Vec<f64>,
    pub weights: Tensor,
    pub alpha: Option<AlphaMap>,
    pub saliency: SaliencyMap,
    pub tape: GradientTape,
    /// Index of the layer whose output holds the maps `A^k`.
    pub designated_layer: usize,
}

impl Explanation {
    /// Saliency upsampled to `h x w` and min-max normalised to `[0, 1]`.
    pub fn normalized_upsampled(&self, h: usize, w: usize) -> Result<Tensor> {
        Ok(min_max_normalize(&upsample_bilinear(
            &self.saliency.values,
            h,
            w,
        )?))
    }

    pub fn activations(&self) -> &Tensor {
        self.tape.activation(self.designated_layer)
    }

    /// `∂S^c/∂A` at the designated layer.
    pub fn gradients(&self) -> &Tensor {
        self.tape.gradient(self.designated_layer)
    }
}

/// Runs forward and backward passes and computes the saliency map for
/// `class` (or the predicted class when `None`).
pub fn explain(
    graph: &ModelGraph,
    image: &Tensor,
    method: Method,
    class: Option<usize>,
    options: ExplainOptions,
) -> Result<Explanation> {
    let dense = if method == Method::Cam {
        Some(graph.gap_dense_weights().ok_or(Error::CamRequiresGap)?)
    } else {
        None
    };
    let fwd = graph.forward(image)?;
    let scores = fwd.scores().data().to_vec();
    let probabilities = softmax(&scores);
    let class = match class {
        Some(c) => {
            graph.check_class(c)?;
            c
        }
        None => fwd.scores().argmax(),
    };
    let tape = graph.backward(&fwd, class)?;
    let d = graph.designated_layer();
    let acts = tape.activation(d);
    let g = tape.gradient(d);

    // Grad-CAM always uses the raw score gradient; the ++ methods use the
    // derivative of the configured smooth score.
    let (alpha, score_grad) = if !method.uses_alpha() {
        (None, g.clone())
    } else {
        match options.score {
            ScoreFunction::Exponential => {
                let alpha = if options.uniform_alpha {
                    AlphaMap::uniform(acts.shape())?
                } else {
                    alpha_exponential(g, acts)?
                };
                (Some(alpha), g.clone())
            }
            ScoreFunction::Softmax => {
                let per_class = graph.designated_gradients_all_classes(&fwd)?;
                let derivs = softmax_derivatives(class, &scores, &per_class)?;
                let alpha = if options.uniform_alpha {
                    AlphaMap::uniform(acts.shape())?
                } else {
                    alpha_from_derivatives(&derivs.second, &derivs.third, acts)?
                };
                (Some(alpha), derivs.first)
            }
        }
    };

    let weights = feature_weights(
        method,
        WeightInputs {
            class,
            gradients: Some(&score_grad),
            alpha: alpha.as_ref(),
            gap_dense_weights: dense,
        },
    )?;
    let saliency = saliency(method, class, &weights, acts)?;
    Ok(Explanation {
        class,
        probabilities,
        weights,
        alpha,
        saliency,
        tape,
        designated_layer: d,
    })
}
