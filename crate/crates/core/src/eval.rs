//! Dataset-level evaluation: faithfulness, localization and occlusion
//! curves for a set of saliency methods.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::layers::softmax;
use crate::metrics::{
    average_drop, localization_iou, occlusion_mask, pct_increase_confidence, validate_theta_grid,
    win_pct, ConfidencePair, RocPoint,
};
use crate::saliency::{explain, explanation_map, normalize_threshold, ExplainOptions, Method};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    /// Thresholds for the localization metric.
    pub deltas: Vec<f64>,
    pub options: ExplainOptions,
    /// Worker threads; results do not depend on this.
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            methods: vec![Method::GradCam, Method::GradCamPP],
            deltas: vec![0.0, 0.25, 0.5],
            options: ExplainOptions::default(),
            jobs: 1,
        }
    }
}

impl EvalConfig {
    fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::invalid("no saliency methods requested"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::invalid(format!("method {m} requested twice")));
            }
        }
        if self.deltas.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::invalid("thresholds must lie in [0, 1]"));
        }
        if self.jobs == 0 {
            return Err(Error::invalid("jobs must be at least 1"));
        }
        Ok(())
    }
}

/// One method's outcome on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    /// Confidence in the predicted class on the explanation map alone.
    pub explained_confidence: f64,
    /// `100 (Y − O) / Y`, negative when confidence rose.
    pub relative_drop: f64,
    /// Localization per threshold, for the ground-truth class.
    pub loc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: usize,
    pub label: usize,
    pub predicted: usize,
    pub full_confidence: f64,
    pub outcomes: Vec<MethodOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocRow {
    pub delta: f64,
    pub mean_loc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub average_drop_pct: f64,
    pub pct_increase_confidence: f64,
    pub mean_loc: Vec<LocRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRecord {
    pub method_a: Method,
    pub method_b: Method,
    pub win_pct_a: f64,
    pub win_pct_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_images: usize,
    pub deltas: Vec<f64>,
    pub summaries: Vec<MethodSummary>,
    pub win_pct: Vec<WinRecord>,
    pub roc_points: Vec<RocPoint>,
    pub images: Vec<ImageRecord>,
}

impl MetricsReport {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn wins(&self, a: Method, b: Method) -> Option<(f64, f64)> {
        self.win_pct.iter().find_map(|w| {
            if w.method_a == a && w.method_b == b {
                Some((w.win_pct_a, w.win_pct_b))
            } else if w.method_a == b && w.method_b == a {
                Some((w.win_pct_b, w.win_pct_a))
            } else {
                None
            }
        })
    }
}

/// Runs `f` over `items` on a pool of `jobs` threads, keeping input order.
pub(crate) fn par_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync + Send,
{
    if jobs <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
}

/// Confidence of `class` when the model sees only `mask ∘ image`.
fn masked_confidence(
    graph: &ModelGraph,
    image: &Tensor,
    mask: &Tensor,
    class: usize,
) -> Result<f64> {
    let e = explanation_map(mask, image)?;
    Ok(softmax(graph.scores(&e)?.data())[class])
}

fn evaluate_image(
    graph: &ModelGraph,
    id: usize,
    sample: &Sample,
    config: &EvalConfig,
) -> Result<ImageRecord> {
    let (_, h, w) = sample.image.chw()?;
    let boxes = sample.boxes_for(sample.label);
    let mut outcomes = Vec::with_capacity(config.methods.len());
    let mut predicted = 0;
    let mut full = 0.0;
    for &method in &config.methods {
        let ex = explain(graph, &sample.image, method, None, config.options)?;
        predicted = ex.class;
        full = ex.probabilities[ex.class];
        let map = ex.normalized_upsampled(h, w)?;
        let explained = masked_confidence(graph, &sample.image, &map, ex.class)?;

        let loc_map = if ex.class == sample.label {
            map
        } else {
            explain(
                graph,
                &sample.image,
                method,
                Some(sample.label),
                config.options,
            )?
            .normalized_upsampled(h, w)?
        };
        let loc = if boxes.is_empty() {
            Vec::new()
        } else {
            config
                .deltas
                .iter()
                .map(|&d| localization_iou(&normalize_threshold(&loc_map, d)?, &boxes))
                .collect::<Result<_>>()?
        };
        outcomes.push(MethodOutcome {
            method,
            explained_confidence: explained,
            relative_drop: ConfidencePair::new(full, explained).relative_drop(),
            loc,
        });
    }
    Ok(ImageRecord {
        image_id: id,
        label: sample.label,
        predicted,
        full_confidence: full,
        outcomes,
    })
}

/// Evaluates every method on every sample. Faithfulness metrics explain the
/// predicted class; localization explains the ground-truth class, whose
/// boxes are known.
pub fn evaluate(
    graph: &ModelGraph,
    samples: &[Sample],
    config: &EvalConfig,
) -> Result<MetricsReport> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let images = par_map(samples, config.jobs, |i, s| {
        evaluate_image(graph, i, s, config)
    })?;

    let mut summaries = Vec::with_capacity(config.methods.len());
    for (m, &method) in config.methods.iter().enumerate() {
        let pairs: Vec<ConfidencePair> = images
            .iter()
            .map(|r| ConfidencePair {
                full: r.full_confidence,
                explained: r.outcomes[m].explained_confidence,
                class_index: r.predicted,
                image_id: r.image_id,
            })
            .collect();
        let mean_loc = config
            .deltas
            .iter()
            .enumerate()
            .map(|(d, &delta)| {
                let vals: Vec<f64> = images
                    .iter()
                    .filter_map(|r| r.outcomes[m].loc.get(d).copied())
                    .collect();
                let mean_loc = if vals.is_empty() {
                    0.0
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                };
                LocRow { delta, mean_loc }
            })
            .collect();
        summaries.push(MethodSummary {
            method,
            average_drop_pct: average_drop(&pairs)?,
            pct_increase_confidence: pct_increase_confidence(&pairs)?,
            mean_loc,
        });
    }

    let drops =
        |m: usize| -> Vec<f64> { images.iter().map(|r| r.outcomes[m].relative_drop).collect() };
    let mut wins = Vec::new();
    for a in 0..config.methods.len() {
        for b in a + 1..config.methods.len() {
            let (pa, pb) = win_pct(&drops(a), &drops(b))?;
            wins.push(WinRecord {
                method_a: config.methods[a],
                method_b: config.methods[b],
                win_pct_a: pa,
                win_pct_b: pb,
            });
        }
    }

    Ok(MetricsReport {
        num_images: images.len(),
        deltas: config.deltas.clone(),
        summaries,
        win_pct: wins,
        roc_points: Vec::new(),
        images,
    })
}

/// Occlusion study: for each `θ`, pixels of the upsampled map below its
/// `θ`-quantile are zeroed and the relative confidence `100 · O / Y` in the
/// predicted class is averaged over the samples.
pub fn occlusion_roc(
    graph: &ModelGraph,
    images: &[Tensor],
    method: Method,
    theta_grid: &[f64],
    options: ExplainOptions,
    jobs: usize,
) -> Result<Vec<RocPoint>> {
    validate_theta_grid(theta_grid)?;
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_image = par_map(images, jobs.max(1), |_, image| {
        let (_, h, w) = image.chw()?;
        let ex = explain(graph, image, method, None, options)?;
        let full = ex.probabilities[ex.class];
        let map = crate::saliency::upsample_bilinear(&ex.saliency.values, h, w)?;
        theta_grid
            .iter()
            .map(|&theta| {
                let (mask, frac) = occlusion_mask(&map, theta)?;
                let o = masked_confidence(graph, image, &mask, ex.class)?;
                Ok((100.0 * (o / full), frac))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let n = images.len() as f64;
    Ok(theta_grid
        .iter()
        .enumerate()
        .map(|(t, &theta)| RocPoint {
            theta,
            relative_confidence: per_image.iter().map(|p| p[t].0).sum::<f64>() / n,
            area_fraction: per_image.iter().map(|p| p[t].1).sum::<f64>() / n,
        })
        .collect())
}

/// Aligned text rendering of a report: one column per method.
pub fn format_table(report: &MetricsReport) -> String {
    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    let cells = |f: &dyn Fn(&MethodSummary) -> f64| -> Vec<String> {
        report
            .summaries
            .iter()
            .map(|s| format!("{:.2}", f(s)))
            .collect()
    };
    rows.push(("Average Drop %".into(), cells(&|s| s.average_drop_pct)));
    rows.push((
        "% Incr. in Confidence".into(),
        cells(&|s| s.pct_increase_confidence),
    ));
    for (d, delta) in report.deltas.iter().enumerate() {
        rows.push((
            format!("mean Loc (delta = {delta})"),
            cells(&|s| s.mean_loc[d].mean_loc),
        ));
    }
    let header: Vec<String> = report
        .summaries
        .iter()
        .map(|s| s.method.to_string())
        .collect();
    let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
    let col_w: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r.1[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();

    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "Metric");
    for (h, w) in header.iter().zip(&col_w) {
        let _ = write!(out, "  {h:>w$}");
    }
    out.push('\n');
    for (label, vals) in &rows {
        let _ = write!(out, "{label:<label_w$}");
        for (v, w) in vals.iter().zip(&col_w) {
            let _ = write!(out, "  {v:>w$}");
        }
        out.push('\n');
    }
    if !report.win_pct.is_empty() {
        out.push_str("\nWin %\n");
        for wr in &report.win_pct {
            let _ = writeln!(
                out,
                "{} vs {}: {:.2} / {:.2}",
                wr.method_a, wr.method_b, wr.win_pct_a, wr.win_pct_b
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenerateConfig};
    use crate::zoo::{build_model, Architecture};

    fn small_set() -> Vec<Sample> {
        generate(&GenerateConfig {
            seed: 1,
            num_samples: 6,
            multi_instance_prob: 0.5,
            ..GenerateConfig::default()
        })
        .unwrap()
        .samples
    }

    #[test]
    fn report_shape_and_wins_sum_to_100() {
        let g = build_model(Architecture::Student, 2);
        let data = small_set();
        let r = evaluate(&g, &data, &EvalConfig::default()).unwrap();
        assert_eq!(r.num_images, 6);
        assert_eq!(r.win_pct.len(), 1);
        let w = &r.win_pct[0];
        assert_eq!(w.win_pct_a + w.win_pct_b, 100.0);
        for s in &r.summaries {
            assert_eq!(s.mean_loc.len(), 3);
            assert!((0.0..=100.0).contains(&s.average_drop_pct));
        }
        let table = format_table(&r);
        assert!(table.contains("mean Loc (delta = 0.25)"));
    }

    #[test]
    fn parallel_matches_serial() {
        let g = build_model(Architecture::Student, 3);
        let data = small_set();
        let serial = evaluate(&g, &data, &EvalConfig::default()).unwrap();
        let par = evaluate(
            &g,
            &data,
            &EvalConfig {
                jobs: 3,
                ..EvalConfig::default()
            },
        )
        .unwrap();
        assert_eq!(serial, par);
    }

    #[test]
    fn cam_needs_gap_model() {
        let data = small_set();
        let cfg = EvalConfig {
            methods: vec![Method::Cam],
            ..EvalConfig::default()
        };
        assert!(matches!(
            evaluate(&build_model(Architecture::Teacher, 0), &data, &cfg),
            Err(Error::CamRequiresGap)
        ));
        assert!(evaluate(&build_model(Architecture::GapCam, 0), &data, &cfg).is_ok());
    }

    #[test]
    fn roc_starts_at_100_and_area_shrinks() {
        let g = build_model(Architecture::Student, 5);
        let images: Vec<Tensor> = small_set().into_iter().map(|s| s.image).collect();
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let pts = occlusion_roc(
            &g,
            &images,
            Method::GradCamPP,
            &grid,
            ExplainOptions::default(),
            1,
        )
        .unwrap();
        assert_eq!(pts[0].relative_confidence, 100.0);
        assert_eq!(pts[0].area_fraction, 1.0);
        for w in pts.windows(2) {
            assert!(w[1].area_fraction <= w[0].area_fraction);
        }
        assert!(occlusion_roc(
            &g,
            &images,
            Method::GradCamPP,
            &[],
            ExplainOptions::default(),
            1
        )
        .is_err());
    }

    #[test]
    fn empty_inputs_rejected() {
        let g = build_model(Architecture::Student, 0);
        assert!(matches!(
            evaluate(&g, &[], &EvalConfig::default()),
            Err(Error::EmptyDataset)
        ));
    }
}
