//! One function per subcommand. Each writes its artifacts and a
//! `report.json` into the `--out` directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use xcam_core::data::{self, Dataset, GenerateConfig, Sample};
use xcam_core::distill::{distill_train, DistillConfig, MapNormalization, ALPHA_GRADIENT};
use xcam_core::eval::{evaluate as run_eval, format_table, occlusion_roc, EvalConfig};
use xcam_core::metrics::roc_csv;
use xcam_core::saliency::{
    explain as run_explain, explanation_map, guided_fuse, normalize_threshold, upsample_bilinear,
    ExplainOptions, Method, ScoreFunction,
};
use xcam_core::zoo::{build_model, error_rate, train as run_train, Architecture, TrainConfig};
use xcam_core::{checkpoint, pnm, Tensor};

use crate::render::{render_heatmap, signed_to_unit};
use crate::report::{InputError, OutDir};
use crate::{Common, Training};

fn input_error(msg: String) -> anyhow::Error {
    anyhow::Error::new(InputError(msg))
}

fn parse_method(name: &str) -> Result<Method> {
    name.parse::<Method>()
        .with_context(|| "expected cam, grad-cam, grad-cam++ or grad-cam++perp".to_string())
}

fn parse_score(name: &str) -> Result<ScoreFunction> {
    match name {
        "exp" | "exponential" => Ok(ScoreFunction::Exponential),
        "softmax" => Ok(ScoreFunction::Softmax),
        other => Err(input_error(format!(
            "unknown score `{other}`; expected exp or softmax"
        ))),
    }
}

fn parse_normalization(name: &str) -> Result<MapNormalization> {
    match name {
        "min-max" | "minmax" => Ok(MapNormalization::MinMax),
        "none" => Ok(MapNormalization::None),
        other => Err(input_error(format!(
            "unknown normalization `{other}`; expected min-max or none"
        ))),
    }
}

fn select_split<'a>(dataset: &'a Dataset, split: &str) -> Result<&'a [Sample]> {
    let samples = match split {
        "train" => dataset.train(),
        "val" => dataset.val(),
        "all" => &dataset.samples[..],
        other => {
            return Err(input_error(format!(
                "unknown split `{other}`; expected train, val or all"
            )))
        }
    };
    if samples.is_empty() {
        return Err(input_error(format!("the {split} split is empty")));
    }
    Ok(samples)
}

fn load_model(path: &Path) -> Result<xcam_core::ModelGraph> {
    checkpoint::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_data(path: &Path) -> Result<Dataset> {
    data::load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn train_config(common: &Common, t: &Training) -> TrainConfig {
    TrainConfig {
        learning_rate: t.learning_rate,
        momentum: t.momentum,
        epochs: t.epochs,
        batch_size: t.batch_size,
        seed: common.seed,
    }
}

pub fn generate(
    common: &Common,
    num_samples: usize,
    size: usize,
    multi_instance_prob: f64,
    train_fraction: f64,
) -> Result<()> {
    let config = GenerateConfig {
        seed: common.seed,
        num_samples,
        size,
        multi_instance_prob,
        train_fraction,
    };
    let dataset = data::generate(&config)?;
    let mut out = OutDir::create(&common.out, common.wall_time)?;
    data::save_dataset(&dataset, &common.out)?;
    for name in ["manifest.json", "labels.json"] {
        out.artifact(name);
    }
    out.artifact("images");
    let splits = &dataset.manifest.splits;
    let multi = dataset
        .samples
        .iter()
        .filter(|s| s.instance_count > 1)
        .count();
    out.finish(
        "generate",
        serde_json::to_value(config)?,
        json!({ "train": splits.train, "val": splits.val, "multi_instance": multi }),
    )
}

pub fn train(common: &Common, model: &str, data_dir: &Path, training: &Training) -> Result<()> {
    let arch: Architecture = model.parse()?;
    let dataset = load_data(data_dir)?;
    let config = train_config(common, training);
    let (graph, trace) = run_train(&build_model(arch, common.seed), dataset.train(), &config)?;

    let mut out = OutDir::create(&common.out, common.wall_time)?;
    checkpoint::save(&graph, out.artifact("model.ckpt"))?;
    out.write_json("trace.json", &trace)?;
    let mut metrics = json!({
        "parameters": graph.param_count(),
        "final_loss": trace.last().map(|e| e.total),
        "train_error": error_rate(&graph, dataset.train())?,
    });
    if !dataset.val().is_empty() {
        metrics["val_error"] = json!(error_rate(&graph, dataset.val())?);
    }
    log::info!("trained {arch}: {metrics}");
    out.finish(
        "train",
        json!({ "model": arch, "data": data_dir, "train": config }),
        metrics,
    )
}

pub struct ExplainArgs {
    pub common: Common,
    pub model: PathBuf,
    pub image: PathBuf,
    pub method: String,
    pub class: Option<usize>,
    pub delta: Option<f64>,
    pub score: String,
    pub force_uniform_alpha: bool,
}

#[derive(Serialize)]
struct SaliencyDump<'a> {
    method: &'a str,
    class: usize,
    shape: &'a [usize],
    weights: &'a [f64],
    values: &'a [f64],
}

pub fn explain(args: &ExplainArgs) -> Result<()> {
    let guided = args.method == "guided-grad-cam++";
    let method = if guided {
        Method::GradCamPP
    } else {
        parse_method(&args.method)?
    };
    let options = ExplainOptions {
        score: parse_score(&args.score)?,
        uniform_alpha: args.force_uniform_alpha,
    };
    if let Some(d) = args.delta {
        if !(0.0..=1.0).contains(&d) {
            return Err(input_error(format!("--delta must lie in [0, 1], got {d}")));
        }
    }
    let graph = load_model(&args.model)?;
    let image = pnm::read_image(&args.image)?;
    let (_, h, w) = image.chw()?;
    let ex = run_explain(&graph, &image, method, args.class, options)?;
    let map = ex.normalized_upsampled(h, w)?;

    let mut out = OutDir::create(&args.common.out, args.common.wall_time)?;
    pnm::write_graymap_scaled(out.artifact("saliency.pgm"), &ex.saliency.values)?;
    out.write_json(
        "saliency.json",
        &SaliencyDump {
            method: &args.method,
            class: ex.class,
            shape: ex.saliency.values.shape(),
            weights: ex.weights.data(),
            values: ex.saliency.values.data(),
        },
    )?;
    pnm::write_image(out.artifact("overlay.ppm"), &render_heatmap(&map, &image)?)?;
    pnm::write_image(
        out.artifact("explanation.ppm"),
        &explanation_map(&map, &image)?,
    )?;
    if let Some(d) = args.delta {
        let mask = normalize_threshold(&upsample_bilinear(&ex.saliency.values, h, w)?, d)?;
        pnm::write_image(out.artifact("mask.pgm"), &mask)?;
    }
    if guided {
        let gb = graph.guided_backward(ex.tape.forward_tape(), ex.class)?;
        let fused: Tensor = guided_fuse(&gb, &map)?;
        pnm::write_image(out.artifact("guided.ppm"), &signed_to_unit(&fused))?;
    }
    out.finish(
        "explain",
        json!({
            "model": args.model,
            "image": args.image,
            "method": args.method,
            "class": args.class,
            "delta": args.delta,
            "score": options.score,
            "force_uniform_alpha": args.force_uniform_alpha,
        }),
        json!({
            "class": ex.class,
            "confidence": ex.probabilities[ex.class],
            "probabilities": ex.probabilities,
        }),
    )
}

fn eval_methods(names: &[String]) -> Result<Vec<Method>> {
    let mut methods = Vec::with_capacity(names.len());
    for name in names {
        let m = parse_method(name.trim())?;
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    if methods.is_empty() {
        return Err(input_error("no methods given".into()));
    }
    Ok(methods)
}

pub fn evaluate(
    common: &Common,
    model: &Path,
    data_dir: &Path,
    methods: &[String],
    deltas: &[f64],
    split: &str,
    jobs: usize,
) -> Result<()> {
    let config = EvalConfig {
        methods: eval_methods(methods)?,
        deltas: deltas.to_vec(),
        jobs: jobs.max(1),
        ..EvalConfig::default()
    };
    let graph = load_model(model)?;
    let dataset = load_data(data_dir)?;
    let report = run_eval(&graph, select_split(&dataset, split)?, &config)?;
    let table = format_table(&report);
    println!("{table}");

    let mut out = OutDir::create(&common.out, common.wall_time)?;
    out.write_json("metrics.json", &report)?;
    out.write_text("metrics.txt", &table)?;
    out.finish(
        "evaluate",
        json!({ "model": model, "data": data_dir, "split": split, "eval": config }),
        json!({ "num_images": report.num_images, "summaries": report.summaries, "win_pct": report.win_pct }),
    )
}

pub struct DistillArgs {
    pub common: Common,
    pub model: PathBuf,
    pub data: PathBuf,
    pub lambda_interpret: f64,
    pub kd: bool,
    pub temperature: f64,
    pub method: String,
    pub normalization: String,
    pub training: Training,
}

#[derive(Serialize)]
struct DistillRow {
    loss_function: String,
    lambda_interpret: f64,
    use_kd: bool,
    test_error_pct: f64,
    checkpoint: String,
    trace: Vec<xcam_core::EpochLoss>,
}

pub fn distill(args: &DistillArgs) -> Result<()> {
    let method = parse_method(&args.method)?;
    let normalization = parse_normalization(&args.normalization)?;
    let teacher = load_model(&args.model)?;
    let dataset = load_data(&args.data)?;
    let test = select_split(&dataset, "val")?;
    let base = DistillConfig {
        lambda_interpret: args.lambda_interpret,
        use_kd: false,
        kd_temperature: args.temperature,
        saliency_method: method,
        normalization,
        train: train_config(&args.common, &args.training),
    };
    base.validate()?;

    let mut variants = vec![
        ("cross-ent", false, false),
        ("cross-ent + interpret", true, false),
    ];
    if args.kd {
        variants.push(("cross-ent + kd", false, true));
        variants.push(("cross-ent + interpret + kd", true, true));
    }
    let init = build_model(Architecture::Student, args.common.seed);
    let mut out = OutDir::create(&args.common.out, args.common.wall_time)?;
    let mut rows = Vec::with_capacity(variants.len());
    for (name, interpret, kd) in variants {
        let config = DistillConfig {
            lambda_interpret: if interpret {
                args.lambda_interpret
            } else {
                0.0
            },
            use_kd: kd,
            ..base.clone()
        };
        let outcome = distill_train(&init, &teacher, dataset.train(), &config)
            .with_context(|| format!("training student with {name}"))?;
        let test_error_pct = 100.0 * error_rate(&outcome.student, test)?;
        log::info!("{name}: test error {test_error_pct:.2}%");
        let file = format!("student_{}.ckpt", name.replace(" + ", "_").replace('-', ""));
        checkpoint::save(&outcome.student, out.artifact(&file))?;
        rows.push(DistillRow {
            loss_function: name.to_string(),
            lambda_interpret: config.lambda_interpret,
            use_kd: kd,
            test_error_pct,
            checkpoint: file,
            trace: outcome.trace,
        });
    }

    let width = rows
        .iter()
        .map(|r| r.loss_function.len())
        .max()
        .unwrap_or(0);
    let mut table = format!("{:<width$}  {:>12}\n", "Loss function", "Test error %");
    for r in &rows {
        table.push_str(&format!(
            "{:<width$}  {:>12.2}\n",
            r.loss_function, r.test_error_pct
        ));
    }
    print!("{table}");
    let flags = json!({ "alpha_gradient": ALPHA_GRADIENT, "normalization": normalization });
    out.write_json("distill.json", &json!({ "flags": flags, "rows": rows }))?;
    out.write_text("distill.txt", &table)?;
    out.finish(
        "distill",
        json!({ "teacher": args.model, "data": args.data, "kd": args.kd, "distill": base }),
        json!({
            "flags": flags,
            "test_error_pct": rows.iter().map(|r| (r.loss_function.clone(), json!(r.test_error_pct))).collect::<serde_json::Map<_, _>>(),
        }),
    )
}

pub fn roc(
    common: &Common,
    model: &Path,
    data_dir: &Path,
    method: &str,
    theta_grid: &[f64],
    split: &str,
    jobs: usize,
) -> Result<()> {
    let method = parse_method(method)?;
    let graph = load_model(model)?;
    let dataset = load_data(data_dir)?;
    let images: Vec<Tensor> = select_split(&dataset, split)?
        .iter()
        .map(|s| s.image.clone())
        .collect();
    let points = occlusion_roc(
        &graph,
        &images,
        method,
        theta_grid,
        ExplainOptions::default(),
        jobs.max(1),
    )?;
    let csv = roc_csv(&points);
    print!("{csv}");

    let mut out = OutDir::create(&common.out, common.wall_time)?;
    out.write_text("roc.csv", &csv)?;
    out.write_json("roc.json", &points)?;
    out.finish(
        "roc",
        json!({ "model": model, "data": data_dir, "method": method, "theta_grid": theta_grid, "split": split }),
        json!({ "num_images": images.len(), "points": points }),
    )
}

pub fn ablate(
    common: &Common,
    model: &Path,
    data_dir: &Path,
    split: &str,
    jobs: usize,
) -> Result<()> {
    let config = EvalConfig {
        methods: vec![Method::GradCamPP, Method::GradCamPPPerp],
        jobs: jobs.max(1),
        ..EvalConfig::default()
    };
    let graph = load_model(model)?;
    let dataset = load_data(data_dir)?;
    let report = run_eval(&graph, select_split(&dataset, split)?, &config)?;
    let table = format_table(&report);
    println!("{table}");

    let drop = |m| report.summary(m).map(|s| s.average_drop_pct);
    let metrics = json!({
        "num_images": report.num_images,
        "average_drop_pct": {
            "grad-cam++": drop(Method::GradCamPP),
            "grad-cam++perp": drop(Method::GradCamPPPerp),
        },
        "win_pct": report.wins(Method::GradCamPP, Method::GradCamPPPerp),
    });
    let mut out = OutDir::create(&common.out, common.wall_time)?;
    out.write_json("ablation.json", &report)?;
    out.write_text("ablation.txt", &table)?;
    out.finish(
        "ablate",
        json!({ "model": model, "data": data_dir, "split": split, "eval": config }),
        metrics,
    )
}
