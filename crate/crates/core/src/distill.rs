//! Explanation-driven distillation: a student is trained on cross-entropy
//! plus a penalty on the distance between its saliency maps and a frozen
//! teacher's, optionally with the temperature-softened logit loss.
//!
//! The saliency penalty is differentiated through the student's own
//! gradient computation. For a head that is piecewise linear after the
//! designated layer, `g = ∂S^c/∂A` is locally constant in `A` and
//! multilinear in the head weights, so the second-order term reduces to a
//! forward tangent pass through the head with activation masks held fixed.
//! The result is exact wherever the network is differentiable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ForwardTape, ModelGraph, ParamGrads};
use crate::layers::{log_softmax, softmax};
use crate::saliency::{
    alpha_exponential, explain, feature_weights, min_max_normalize, upsample_bilinear,
    upsample_bilinear_adjoint, ExplainOptions, Method, WeightInputs,
};
use crate::tensor::Tensor;
use crate::zoo::{cross_entropy, cross_entropy_step, fit, EpochLoss, LabeledImage, TrainConfig};

/// How the two saliency maps are scaled before comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapNormalization {
    /// Compare raw maps.
    None,
    /// Min-max normalise each map to `[0, 1]` first.
    #[default]
    MinMax,
}

/// Which parts of the saliency map are differentiated. Every factor,
/// including `α`, is differentiated.
pub const ALPHA_GRADIENT: &str = "full";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the saliency-matching term.
    pub lambda_interpret: f64,
    pub use_kd: bool,
    pub kd_temperature: f64,
    pub saliency_method: Method,
    pub normalization: MapNormalization,
    pub train: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda_interpret: 0.01,
            use_kd: false,
            kd_temperature: 4.0,
            saliency_method: Method::GradCamPP,
            normalization: MapNormalization::MinMax,
            train: TrainConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_interpret >= 0.0 && self.lambda_interpret.is_finite()) {
            return Err(Error::invalid(
                "lambda_interpret must be finite and non-negative",
            ));
        }
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            return Err(Error::invalid("kd_temperature must be positive"));
        }
        if self.saliency_method == Method::Cam {
            return Err(Error::invalid(
                "distillation needs a gradient-based saliency method, not cam",
            ));
        }
        self.train.validate()
    }
}

fn prepare(map: &Tensor, h: usize, w: usize, norm: MapNormalization) -> Result<Tensor> {
    let up = upsample_bilinear(map, h, w)?;
    Ok(match norm {
        MapNormalization::None => up,
        MapNormalization::MinMax => min_max_normalize(&up),
    })
}

fn common_size(a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ah, aw) = a.hw()?;
    let (bh, bw) = b.hw()?;
    Ok((ah.max(bh), aw.max(bw)))
}

/// Squared L2 distance between two `[H, W]` saliency maps after bringing
/// both to the larger resolution and applying `norm`.
pub fn interpret_distance(
    student_map: &Tensor,
    teacher_map: &Tensor,
    norm: MapNormalization,
) -> Result<f64> {
    let (h, w) = common_size(student_map, teacher_map)?;
    let s = prepare(student_map, h, w, norm)?;
    let t = prepare(teacher_map, h, w, norm)?;
    Ok(s.zip_map(&t, |a, b| a - b)?.sq_norm())
}

/// Saliency-matching loss for one image and class.
pub fn interpret_loss(
    student: &ModelGraph,
    teacher: &ModelGraph,
    image: &Tensor,
    class: usize,
    method: Method,
    norm: MapNormalization,
) -> Result<f64> {
    let opts = ExplainOptions::default();
    let s = explain(student, image, method, Some(class), opts)?;
    let t = explain(teacher, image, method, Some(class), opts)?;
    interpret_distance(&s.saliency.values, &t.saliency.values, norm)
}

fn check_logits(student: &[f64], teacher: &[f64], temperature: f64) -> Result<()> {
    if student.len() != teacher.len() {
        return Err(Error::invalid(format!(
            "logit counts differ: student {} vs teacher {}",
            student.len(),
            teacher.len()
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("temperature must be positive"));
    }
    Ok(())
}

fn soften(logits: &[f64], temperature: f64) -> Vec<f64> {
    logits.iter().map(|z| z / temperature).collect()
}

/// `T² · KL(softmax(teacher/T) ‖ softmax(student/T))`.
pub fn kd_loss(student_logits: &[f64], teacher_logits: &[f64], temperature: f64) -> Result<f64> {
    check_logits(student_logits, teacher_logits, temperature)?;
    let ls = log_softmax(&soften(student_logits, temperature));
    let lt = log_softmax(&soften(teacher_logits, temperature));
    let kl: f64 = lt
        .iter()
        .zip(&ls)
        .map(|(&t, &s)| {
            if t.exp() == 0.0 {
                0.0
            } else {
                t.exp() * (t - s)
            }
        })
        .sum();
    Ok(temperature * temperature * kl)
}

/// Gradient of [`kd_loss`] w.r.t. the student logits: `T (p_s − p_t)`.
fn kd_grad(student_logits: &[f64], teacher_logits: &[f64], temperature: f64) -> Vec<f64> {
    let ps = softmax(&soften(student_logits, temperature));
    let pt = softmax(&soften(teacher_logits, temperature));
    ps.iter()
        .zip(&pt)
        .map(|(s, t)| temperature * (s - t))
        .collect()
}

/// Accumulates `scale · ∂ℓ/∂θ` for `ℓ = ‖prep(L_s) − teacher_map‖²` into
/// `grads` and returns `ℓ`. `teacher_map` must already be prepared at a
/// resolution no smaller than the student's designated maps.
#[allow(clippy::too_many_arguments)]
fn interpret_backward(
    graph: &ModelGraph,
    fwd: &ForwardTape,
    class: usize,
    method: Method,
    teacher_map: &Tensor,
    norm: MapNormalization,
    scale: f64,
    grads: &mut ParamGrads,
) -> Result<f64> {
    if !graph.head_is_piecewise_linear() {
        return Err(Error::invalid(
            "saliency gradients need a piecewise-linear head after the designated layer",
        ));
    }
    let d = graph.designated_layer();
    let primal = graph.backward(fwd, class)?;
    let acts = primal.activation(d);
    let g = primal.gradient(d);
    let (k, h, w) = acts.chw()?;
    let plane = h * w;
    let (th, tw) = teacher_map.hw()?;

    let alpha = match method {
        Method::GradCamPP | Method::GradCamPPPerp => Some(alpha_exponential(g, acts)?),
        Method::GradCam => None,
        Method::Cam => return Err(Error::invalid("cam has no gradient path to distil through")),
    };
    let weights = feature_weights(
        method,
        WeightInputs {
            class,
            gradients: Some(g),
            alpha: alpha.as_ref(),
            gap_dense_weights: None,
        },
    )?;
    let (a, gd, wd) = (acts.data(), g.data(), weights.data());
    let mut z = vec![0.0; plane];
    for m in 0..k {
        for (zp, &av) in z.iter_mut().zip(&a[m * plane..(m + 1) * plane]) {
            *zp += wd[m] * av;
        }
    }
    let u = Tensor::from_raw(vec![h, w], z.iter().map(|v| v.max(0.0)).collect());
    let up = upsample_bilinear(&u, th, tw)?;
    let n = match norm {
        MapNormalization::None => up.clone(),
        MapNormalization::MinMax => min_max_normalize(&up),
    };
    let diff = n.zip_map(teacher_map, |x, t| x - t)?;
    let loss = diff.sq_norm();
    let v = diff.map(|e| 2.0 * scale * e);

    // back through the normalisation
    let grad_up = match norm {
        MapNormalization::None => v,
        MapNormalization::MinMax => {
            let (lo, hi) = (up.min(), up.max());
            let r = hi - lo;
            if r <= 0.0 {
                Tensor::zeros(up.shape())
            } else {
                let mut gv = v.map(|x| x / r);
                let (imin, imax) = (up.argmin(), up.argmax());
                let (mut to_min, mut to_max) = (0.0, 0.0);
                for (&vp, &np) in v.data().iter().zip(n.data()) {
                    to_min += vp * (np - 1.0);
                    to_max -= vp * np;
                }
                gv.data_mut()[imin] += to_min / r;
                gv.data_mut()[imax] += to_max / r;
                gv
            }
        }
    };
    let grad_u = upsample_bilinear_adjoint(&grad_up, h, w);
    let grad_z: Vec<f64> = grad_u
        .data()
        .iter()
        .zip(&z)
        .map(|(&gu, &zv)| if zv > 0.0 { gu } else { 0.0 })
        .collect();

    let mut grad_a = vec![0.0; k * plane];
    let mut grad_g = vec![0.0; k * plane];
    let inv_z = 1.0 / plane as f64;
    #[allow(clippy::needless_range_loop)]
    for m in 0..k {
        let range = m * plane..(m + 1) * plane;
        let dw: f64 = grad_z
            .iter()
            .zip(&a[range.clone()])
            .map(|(x, y)| x * y)
            .sum();
        let s: f64 = a[range.clone()].iter().sum();
        let mut ds = 0.0;
        for (p, i) in range.clone().enumerate() {
            grad_a[i] = grad_z[p] * wd[m];
            let gv = gd[i];
            let (phi_g, phi_s) = match &alpha {
                None => (inv_z, 0.0),
                Some(al) => {
                    let av = al.values().data()[i];
                    // α = 1/(2 + s·g) wherever it is non-zero
                    let (da_dg, da_ds) = if av == 0.0 {
                        (0.0, 0.0)
                    } else {
                        (-s * av * av, -gv * av * av)
                    };
                    if method == Method::GradCamPP {
                        let rg = gv.max(0.0);
                        (da_dg * rg + if gv > 0.0 { av } else { 0.0 }, da_ds * rg)
                    } else {
                        (da_dg * gv + av, da_ds * gv)
                    }
                }
            };
            grad_g[i] = dw * phi_g;
            ds += dw * phi_s;
        }
        for i in range {
            grad_a[i] += ds;
        }
    }

    // body: A depends on the parameters up to the designated layer
    let shape = acts.shape().to_vec();
    graph.backprop(
        fwd,
        d + 1,
        Tensor::from_raw(shape.clone(), grad_a),
        Some(grads),
        false,
    )?;

    // head: <grad_g, g> is the derivative of S^c along grad_g; push that
    // tangent forward and pair it with the primal gradients
    let layers = graph.layers();
    let raw = fwd.raw();
    let primal_grads = primal.raw_gradients();
    let mut tangent = Tensor::from_raw(shape, grad_g);
    for l in d + 1..layers.len() {
        if let Some(acc) = grads.0[l].as_mut() {
            layers[l].accumulate_param_grad(&tangent, &primal_grads[l + 1], acc, false);
        }
        if l + 1 < layers.len() {
            tangent = layers[l].jvp(&raw[l], &raw[l + 1], &tangent);
        }
    }
    Ok(loss)
}

/// Per-example teacher outputs, computed once since the teacher is frozen.
struct Guided<'a, S> {
    sample: &'a S,
    teacher_map: Option<Tensor>,
    teacher_logits: Vec<f64>,
}

impl<S: LabeledImage> LabeledImage for Guided<'_, S> {
    fn image(&self) -> &Tensor {
        self.sample.image()
    }

    fn label(&self) -> usize {
        self.sample.label()
    }
}

fn guide<'a, S: LabeledImage>(
    student: &ModelGraph,
    teacher: &ModelGraph,
    data: &'a [S],
    config: &DistillConfig,
) -> Result<Vec<Guided<'a, S>>> {
    if teacher.num_classes() != student.num_classes() {
        return Err(Error::invalid(
            "teacher and student disagree on the number of classes",
        ));
    }
    let sd = student.designated_shape();
    data.iter()
        .map(|sample| {
            let fwd = teacher.forward(sample.image())?;
            let teacher_logits = fwd.scores().data().to_vec();
            let teacher_map = if config.lambda_interpret > 0.0 {
                let ex = explain(
                    teacher,
                    sample.image(),
                    config.saliency_method,
                    Some(sample.label()),
                    ExplainOptions::default(),
                )?;
                let (h, w) = ex.saliency.values.hw()?;
                Some(prepare(
                    &ex.saliency.values,
                    h.max(sd[1]),
                    w.max(sd[2]),
                    config.normalization,
                )?)
            } else {
                None
            };
            Ok(Guided {
                sample,
                teacher_map,
                teacher_logits,
            })
        })
        .collect()
}

/// One example's loss terms, with `scale ·` its gradient added to `grads`.
fn student_step<S: LabeledImage>(
    model: &ModelGraph,
    item: &Guided<'_, S>,
    config: &DistillConfig,
    grads: &mut ParamGrads,
) -> Result<EpochLoss> {
    let label = item.label();
    let (ce, kd, tape) = if config.use_kd {
        model.check_class(label)?;
        let tape = model.forward(item.image())?;
        let logits = tape.scores().data();
        let (ce, mut seed) = cross_entropy(logits, label);
        let kd = kd_loss(logits, &item.teacher_logits, config.kd_temperature)?;
        for (s, k) in
            seed.iter_mut()
                .zip(kd_grad(logits, &item.teacher_logits, config.kd_temperature))
        {
            *s += k;
        }
        let seed = Tensor::new(vec![seed.len()], seed)?;
        model.backprop(&tape, model.layers().len(), seed, Some(grads), false)?;
        (ce, kd, tape)
    } else {
        let (ce, tape) = cross_entropy_step(model, item.image(), label, grads)?;
        (ce, 0.0, tape)
    };
    let mut total = ce + kd;
    let mut interpret = 0.0;
    if let Some(tm) = &item.teacher_map {
        let lambda = config.lambda_interpret;
        interpret = interpret_backward(
            model,
            &tape,
            label,
            config.saliency_method,
            tm,
            config.normalization,
            lambda,
            grads,
        )?;
        total += lambda * interpret;
    }
    Ok(EpochLoss {
        total,
        cross_entropy: ce,
        interpret,
        kd,
    })
}

/// Mean over `batch` of `CE + λ·L_interpret (+ L_KD)`.
pub fn exp_student_loss<S: LabeledImage>(
    batch: &[S],
    student: &ModelGraph,
    teacher: &ModelGraph,
    config: &DistillConfig,
) -> Result<EpochLoss> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let items = guide(student, teacher, batch, config)?;
    let mut sum = EpochLoss::default();
    for item in &items {
        let mut scratch = ParamGrads::zeros(student);
        let l = student_step(student, item, config, &mut scratch)?;
        sum.total += l.total;
        sum.cross_entropy += l.cross_entropy;
        sum.interpret += l.interpret;
        sum.kd += l.kd;
    }
    let n = items.len() as f64;
    Ok(EpochLoss {
        total: sum.total / n,
        cross_entropy: sum.cross_entropy / n,
        interpret: sum.interpret / n,
        kd: sum.kd / n,
    })
}

/// Gradient of `L_interpret` for one example w.r.t. all student parameters,
/// flattened in declaration order.
pub fn interpret_loss_gradient(
    student: &ModelGraph,
    teacher: &ModelGraph,
    image: &Tensor,
    class: usize,
    method: Method,
    norm: MapNormalization,
) -> Result<(f64, Vec<f64>)> {
    let config = DistillConfig {
        lambda_interpret: 1.0,
        saliency_method: method,
        normalization: norm,
        ..DistillConfig::default()
    };
    config.validate()?;
    let sample = (image.clone(), class);
    let items = guide(student, teacher, std::slice::from_ref(&sample), &config)?;
    let tm = items[0].teacher_map.as_ref().expect("lambda is positive");
    let fwd = student.forward(image)?;
    let mut grads = ParamGrads::zeros(student);
    let loss = interpret_backward(student, &fwd, class, method, tm, norm, 1.0, &mut grads)?;
    Ok((loss, grads.flatten()))
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: ModelGraph,
    pub trace: Vec<EpochLoss>,
}

/// Trains `student` against `teacher`. The teacher is only read.
pub fn distill_train<S: LabeledImage>(
    student: &ModelGraph,
    teacher: &ModelGraph,
    data: &[S],
    config: &DistillConfig,
) -> Result<DistillOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let items = guide(student, teacher, data, config)?;
    let (student, trace) = fit(student, &items, &config.train, |model, item, grads| {
        student_step(model, item, config, grads)
    })?;
    Ok(DistillOutcome { student, trace })
}
