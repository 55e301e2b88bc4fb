use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use rcn_core::backbone::BackboneConfig;
use rcn_core::episodes::{
    generate_synthetic, ingest_directory, write_directory, AugmentPolicy, Image, LabeledDataset,
    PixelBox, Split, SyntheticSpec,
};
use rcn_core::explainer::contributions;
use rcn_core::interpret::{
    export_heatmap, importance, normalize, outline, ram, region_weight_matrix, to_rgb,
    ImportanceReport,
};
use rcn_core::matcher::SimilarityMetric;
use rcn_core::model::{ModelConfig, RcnModel, MODEL_FILE};
use rcn_core::tensor::{Tensor, MANIFEST_FILE};
use rcn_core::trainer::{
    evaluate, train, EvalReport, OracleScorer, RandomScorer, RcnScorer, Scorer, StopReason,
    TrainConfig, CHECKPOINT_DIR, LOG_FILE,
};

use crate::{
    user_error, DataArgs, EvalArgs, ExplainArgs, GeneralizeArgs, GlobalArgs, ScorerArg, SynthArgs,
    TrainArgs,
};

/// Every command writes this file into its output directory.
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const IMPORTANCE_FILE: &str = "importance.json";
pub const EXPLANATION_FILE: &str = "explanation.json";

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Directory(PathBuf),
}

pub fn load_dataset(args: &DataArgs) -> Result<(LabeledDataset, DataSource)> {
    match &args.data {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(user_error(format!(
                    "dataset directory {} does not exist",
                    dir.display()
                )));
            }
            let d = ingest_directory(dir)
                .with_context(|| format!("cannot read dataset {}", dir.display()))?;
            Ok((d, DataSource::Directory(dir.clone())))
        }
        None => {
            let spec = SyntheticSpec {
                seed: args.synth_seed,
                ..Default::default()
            };
            Ok((generate_synthetic(&spec)?, DataSource::Synthetic(spec)))
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("cannot write {}", path.display()))
}

/// Records everything needed to repeat a run next to its artifacts.
pub fn write_config_echo(
    global: &GlobalArgs,
    command: &str,
    details: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(&global.out)
        .with_context(|| format!("cannot create {}", global.out.display()))?;
    let echo = json!({
        "format": "rcn-run-config",
        "version": 1,
        "rcn_version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "global": global,
        "details": details,
        "artifact_formats": {
            "parameters": { "manifest": MANIFEST_FILE, "format": "rcn-params", "version": 1 },
            "model": MODEL_FILE,
            "train_log": "json-lines",
        },
    });
    write_json(&global.out.join(RUN_CONFIG_FILE), &echo)
}

fn load_model(checkpoint: &Path, dataset: &LabeledDataset) -> Result<RcnModel<f32>> {
    if !checkpoint.join(MODEL_FILE).exists() {
        return Err(user_error(format!(
            "no checkpoint found at {}",
            checkpoint.display()
        )));
    }
    let model = RcnModel::<f32>::load(checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))?;
    if model.config.backbone.image_size != dataset.image_size {
        return Err(user_error(format!(
            "checkpoint expects {:?} images, dataset has {:?}",
            model.config.backbone.image_size, dataset.image_size
        )));
    }
    Ok(model)
}

pub fn cmd_synth(global: &GlobalArgs, args: &SynthArgs) -> Result<PathBuf> {
    let spec = SyntheticSpec {
        classes: args.classes,
        per_class: args.per_class,
        image_size: args.image_size,
        splits: args.splits,
        seed: global.seed,
        ..Default::default()
    };
    spec.validate().map_err(|e| user_error(e.to_string()))?;
    let dataset = generate_synthetic(&spec)?;
    write_config_echo(global, "synth", json!({ "args": args, "spec": spec }))?;
    write_directory(&dataset, &global.out)?;
    println!(
        "wrote {} images of {} classes to {}",
        dataset.samples.len(),
        dataset.num_classes(),
        global.out.display()
    );
    Ok(global.out.clone())
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub stop: StopReason,
    pub iterations: usize,
    pub best_val: Option<f64>,
    pub test: Option<EvalReport>,
    pub checkpoint: PathBuf,
    pub elapsed_secs: f64,
}

pub fn train_configs(
    args: &TrainArgs,
    dataset: &LabeledDataset,
    seed: u64,
) -> Result<(ModelConfig, TrainConfig)> {
    let mut backbone = BackboneConfig::preset(&args.backbone, dataset.image_size)
        .map_err(|e| user_error(e.to_string()))?;
    if let Some(hw) = args.hw {
        backbone = backbone
            .with_grid(hw as usize)
            .map_err(|e| user_error(e.to_string()))?;
    }
    backbone.validate().map_err(|e| user_error(e.to_string()))?;
    let mut model = ModelConfig::new(backbone, args.head, SimilarityMetric::new(args.metric));
    model.aggregation = args.aggregation.into();
    let cfg = TrainConfig {
        learning_rate: args.lr,
        plateau_patience: args.patience,
        iterations: args.iterations,
        episodes_per_iteration: args.episodes_per_iteration,
        val_episodes: args.val_episodes,
        test_episodes: args.test_episodes,
        way: args.episode.way,
        shot: args.episode.shot,
        train_queries: args.train_queries.unwrap_or(args.episode.queries),
        eval_queries: args.episode.queries,
        augment: if args.no_augment {
            AugmentPolicy::disabled()
        } else {
            AugmentPolicy::default()
        },
        time_budget_secs: args.time_budget,
        seed,
        ..Default::default()
    };
    cfg.validate().map_err(|e| user_error(e.to_string()))?;
    let needed = [
        (Split::Train, true),
        (Split::Val, cfg.val_episodes > 0),
        (Split::Test, cfg.test_episodes > 0),
    ];
    for (split, used) in needed {
        let have = dataset.classes(split).len();
        if used && have < cfg.way {
            return Err(user_error(format!(
                "{split:?} split has {have} classes, fewer than --way {}",
                cfg.way
            )));
        }
    }
    Ok((model, cfg))
}

pub fn cmd_train(global: &GlobalArgs, args: &TrainArgs) -> Result<TrainSummary> {
    let start = Instant::now();
    let (dataset, source) = load_dataset(&args.data)?;
    let (model_cfg, cfg) = train_configs(args, &dataset, global.seed)?;
    write_config_echo(
        global,
        "train",
        json!({ "args": args, "data": source, "model": model_cfg, "train": cfg }),
    )?;
    let model = RcnModel::<f32>::new(model_cfg, global.seed)?;
    let outcome = train(model, &dataset, &cfg, Some(&global.out))?;
    let test = if cfg.test_episodes > 0 && !outcome.log.is_empty() {
        let scorer = RcnScorer::new(&outcome.model, &dataset, Split::Test)?;
        let seed = global.seed.wrapping_add(2);
        let r = evaluate(
            &scorer,
            &dataset,
            Split::Test,
            cfg.test_episodes,
            cfg.way,
            cfg.shot,
            cfg.eval_queries,
            seed,
        )?;
        println!("test accuracy: {r}");
        Some(r)
    } else {
        None
    };
    let summary = TrainSummary {
        stop: outcome.stop,
        iterations: outcome.log.len(),
        best_val: outcome.best_val,
        test,
        checkpoint: global.out.join(CHECKPOINT_DIR),
        elapsed_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&global.out.join(TRAIN_SUMMARY_FILE), &summary)?;
    println!(
        "checkpoint: {} ({} iterations, log in {})",
        summary.checkpoint.display(),
        summary.iterations,
        global.out.join(LOG_FILE).display()
    );
    if outcome.stop == StopReason::Diverged {
        anyhow::bail!("training diverged (non-finite loss); the last good checkpoint was kept");
    }
    Ok(summary)
}

pub fn cmd_eval(global: &GlobalArgs, args: &EvalArgs) -> Result<EvalReport> {
    let (dataset, source) = load_dataset(&args.data)?;
    write_config_echo(global, "eval", json!({ "args": args, "data": source }))?;
    let split: Split = args.split.into();
    let model;
    let rcn;
    let scorer: &dyn Scorer = match args.scorer {
        ScorerArg::Oracle => &OracleScorer,
        ScorerArg::Random => &RandomScorer,
        ScorerArg::Model => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| user_error("--checkpoint is required with --scorer model"))?;
            model = load_model(path, &dataset)?;
            rcn = RcnScorer::new(&model, &dataset, split)?;
            &rcn
        }
    };
    let e = &args.episode;
    let report = evaluate(
        scorer,
        &dataset,
        split,
        args.episodes,
        e.way,
        e.shot,
        e.queries,
        global.seed,
    )
    .map_err(|err| user_error(err.to_string()))?;
    write_json(&global.out.join(EVAL_REPORT_FILE), &report)?;
    println!("{report}");
    Ok(report)
}

fn pick(rng: &mut ChaCha8Rng, items: &[usize], what: &str) -> Result<usize> {
    items
        .choose(rng)
        .copied()
        .ok_or_else(|| user_error(format!("no {what} to choose from")))
}

fn check_sample(dataset: &LabeledDataset, index: usize) -> Result<()> {
    if index >= dataset.samples.len() {
        return Err(user_error(format!(
            "sample {index} is out of range (dataset has {})",
            dataset.samples.len()
        )));
    }
    Ok(())
}

/// Nearest-neighbour enlargement so small images stay legible.
fn enlarge(image: &Image, factor: usize) -> Image {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    Tensor::from_fn(&[c, h * factor, w * factor], |i| {
        let x = i % (w * factor);
        let y = (i / (w * factor)) % (h * factor);
        let ch = i / (w * factor * h * factor);
        src[(ch * h + y / factor) * w + x / factor]
    })
}

fn scale_box(b: PixelBox, f: usize) -> PixelBox {
    PixelBox {
        x0: b.x0 * f,
        y0: b.y0 * f,
        x1: b.x1 * f,
        y1: b.y1 * f,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExplainSummary {
    pub support: usize,
    pub query: usize,
    pub same_class: bool,
    pub score: f32,
    pub weights: Vec<f32>,
    pub region_scores: Vec<f32>,
    pub contributions: Vec<f32>,
    pub ram: Vec<f32>,
    pub heatmap: PathBuf,
}

pub fn cmd_explain(global: &GlobalArgs, args: &ExplainArgs) -> Result<ExplainSummary> {
    let (dataset, source) = load_dataset(&args.data)?;
    let model = load_model(&args.checkpoint, &dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(global.seed);
    let pool: Vec<usize> = dataset
        .classes(args.split.into())
        .into_iter()
        .flat_map(|c| dataset.samples_of(c).iter().copied())
        .collect();
    let support = match args.support {
        Some(i) => i,
        None => pick(&mut rng, &pool, "samples in the split")?,
    };
    check_sample(&dataset, support)?;
    let query = match args.query {
        Some(i) => i,
        None => {
            let mates: Vec<usize> = dataset
                .samples_of(dataset.samples[support].class)
                .iter()
                .copied()
                .filter(|&i| i != support)
                .collect();
            pick(&mut rng, &mates, "other samples of the support's class")?
        }
    };
    check_sample(&dataset, query)?;
    write_config_echo(
        global,
        "explain",
        json!({ "args": args, "data": source, "support": support, "query": query }),
    )?;

    let (s_img, q_img) = (dataset.image(support), dataset.image(query));
    let analysis = model.analyze_pair(s_img, q_img)?;
    let map = ram(&analysis.weight, &analysis.maps, dataset.image_size)?;
    let heatmap = global.out.join("ram_query.png");
    export_heatmap(&map, q_img, &heatmap)?;
    to_rgb(s_img).save(global.out.join("support.png"))?;
    to_rgb(q_img).save(global.out.join("query.png"))?;
    let summary = ExplainSummary {
        support,
        query,
        same_class: dataset.samples[support].class == dataset.samples[query].class,
        score: analysis.score,
        weights: analysis.weight.values.data().to_vec(),
        region_scores: analysis.region_scores.values.data().to_vec(),
        contributions: contributions(&analysis.weight, &analysis.region_scores)?,
        ram: map.values.data().to_vec(),
        heatmap,
    };
    write_json(&global.out.join(EXPLANATION_FILE), &summary)?;
    println!(
        "similarity {:.4} for support {support} / query {query}; heatmap {}",
        summary.score,
        summary.heatmap.display()
    );
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct GeneralizeSummary {
    pub class: usize,
    pub class_name: String,
    pub support: usize,
    pub queries: Vec<usize>,
    pub report: ImportanceReport,
    pub top_region: usize,
    pub top_box: PixelBox,
    /// Ground-truth part box of the support sample, when the dataset has one.
    pub part_box: Option<PixelBox>,
    pub top_overlaps_part: Option<bool>,
}

fn resolve_class(
    dataset: &LabeledDataset,
    split: Split,
    class: Option<&str>,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    match class {
        Some(name) => {
            if let Some(i) = dataset.class_names.iter().position(|n| n == name) {
                return Ok(i);
            }
            match name.parse::<usize>() {
                Ok(i) if i < dataset.num_classes() => Ok(i),
                _ => Err(user_error(format!("unknown class `{name}`"))),
            }
        }
        None => pick(rng, &dataset.classes(split), "classes in the split"),
    }
}

pub fn cmd_generalize(global: &GlobalArgs, args: &GeneralizeArgs) -> Result<GeneralizeSummary> {
    let (dataset, source) = load_dataset(&args.data)?;
    let model = load_model(&args.checkpoint, &dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(global.seed);
    let class = match args.support {
        Some(s) => {
            check_sample(&dataset, s)?;
            dataset.samples[s].class
        }
        None => resolve_class(&dataset, args.split.into(), args.class.as_deref(), &mut rng)?,
    };
    let members = dataset.samples_of(class);
    let support = match args.support {
        Some(s) => s,
        None => pick(&mut rng, members, "samples in the class")?,
    };
    let mut others: Vec<usize> = members.iter().copied().filter(|&i| i != support).collect();
    others.shuffle(&mut rng);
    others.truncate(args.queries);
    if others.len() < 2 {
        return Err(user_error(format!(
            "class `{}` needs at least 3 samples for region importance",
            dataset.class_names[class]
        )));
    }
    others.sort_unstable();
    write_config_echo(
        global,
        "generalize",
        json!({ "args": args, "data": source, "class": class, "support": support, "queries": others }),
    )?;

    let queries: Vec<&Image> = others.iter().map(|&i| dataset.image(i)).collect();
    let matrix =
        region_weight_matrix(&model, dataset.image(support), &queries).map_err(|e| match e {
            rcn_core::Error::Degenerate(m) => {
                user_error(format!("degenerate support sample {support}: {m}"))
            }
            other => other.into(),
        })?;
    let report = importance(&matrix)?;
    let grid = report.grid;
    let top_region = report.top_region();
    let top_box = PixelBox::of_region(top_region, grid, dataset.image_size);
    let part_box = dataset.samples[support].part_box;
    let summary = GeneralizeSummary {
        class,
        class_name: dataset.class_names[class].clone(),
        support,
        queries: others,
        top_region,
        top_box,
        top_overlaps_part: part_box.map(|p| p.overlaps(&top_box)),
        part_box,
        report,
    };
    write_json(&global.out.join(IMPORTANCE_FILE), &summary)?;
    write_ranked_overlay(
        &summary,
        dataset.image(support),
        dataset.image_size,
        &global.out.join("ranked_regions.png"),
    )?;
    println!(
        "class {} support {support}: top region {} (row {}, col {}){}",
        summary.class_name,
        top_region,
        top_region / grid.1,
        top_region % grid.1,
        match summary.top_overlaps_part {
            Some(true) => ", overlaps the part box",
            Some(false) => ", misses the part box",
            None => "",
        }
    );
    Ok(summary)
}

/// Support image with importance added to the red channel, top region outlined in red
/// and the known part box in green.
fn write_ranked_overlay(
    s: &GeneralizeSummary,
    base: &Image,
    size: (usize, usize),
    path: &Path,
) -> Result<()> {
    let grid = s.report.grid;
    let values: Vec<f64> = s.report.regions.iter().map(|r| r.importance).collect();
    let norm = normalize(&values);
    let mut cell_heat = vec![0.0f32; grid.0 * grid.1];
    for (r, t) in s.report.regions.iter().zip(norm) {
        cell_heat[r.region] = t;
    }
    let (h, w) = size;
    let mut img = base.clone();
    let red = &mut img.data_mut()[..h * w];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * grid.0 / h) * grid.1 + x * grid.1 / w;
            red[y * w + x] = 0.6 * red[y * w + x] + 0.4 * cell_heat[cell];
        }
    }
    let factor = (256 / h.max(w)).max(1);
    let mut big = enlarge(&img, factor);
    big = outline(&big, scale_box(s.top_box, factor), [1.0, 0.0, 0.0]);
    if let Some(p) = s.part_box {
        big = outline(&big, scale_box(p, factor), [0.0, 1.0, 0.0]);
    }
    to_rgb(&big)
        .save(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}
