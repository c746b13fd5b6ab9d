//! Operator CLI: dataset synthesis, curriculum training, fused inference,
//! upper-bound analysis, ablation sweeps, and the gradient check.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data/format error,
//! 3 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vitp::config::RunConfig;
use vitp::error::{Error, Result};
use vitp::io;
use vitp::metrics::{
    evaluate_dataset, upper_bound_relabel, GroundTruth, MetricReport, UpperBoundMode,
};
use vitp::model::{gradient_check, ModelConfig, VitP};
use vitp::pipeline::{
    classify_proposals, instance_inference, panoptic_inference, semantic_inference, FusionConfig,
    PointRule, SegResult, Taxonomy,
};
use vitp::synth::{self, ground_truth_from_annotation, Split};
use vitp::trainer::{train, TrainStage};
use vitp::util::derive_seed;

#[derive(Parser)]
#[command(name = "vitp", version, about = "Point-prompted mask classification pipeline")]
struct Cli {
    /// JSON run configuration; omitted sections use documented defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the synth/train/eval seeds in one go
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Box,
    Point,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Semantic,
    Instance,
    Panoptic,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Point,
    Mask,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    Points,
    Rule,
    Alpha,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Val,
    Train,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset plus simulated proposal files
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train one curriculum stage and write a checkpoint + JSONL log
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to start from (box -> point hand-off)
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        /// Leave the point encoder and head freshly initialized on load
        #[arg(long)]
        fresh_head: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify proposals at selected points, fuse, assemble, evaluate
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        /// Overrides eval.point_rule from the config
        #[arg(long)]
        point_rule: Option<PointRuleArg>,
        /// Overrides fusion.alpha from the config
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relabel proposals with ground truth and evaluate the upper bound
    UpperBound {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one axis and emit a CSV of PQ / AP / mIoU
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated grid values (numbers, or rules for --axis rule)
        #[arg(long)]
        grid: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        /// Required for rule/alpha sweeps; points sweeps retrain instead
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full-model gradient check against central finite differences
    Gradcheck {
        /// Deliberately corrupt one analytic gradient (self-test hook)
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PointRuleArg {
    Highest,
    Central,
    Random,
}

impl From<PointRuleArg> for PointRule {
    fn from(v: PointRuleArg) -> Self {
        match v {
            PointRuleArg::Highest => PointRule::Highest,
            PointRuleArg::Central => PointRule::Central,
            PointRuleArg::Random => PointRule::Random,
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    match cli.command {
        Command::Synth { out_dir } => cmd_synth(&cfg, &out_dir),
        Command::Train {
            stage,
            data,
            init_checkpoint,
            fresh_head,
            out,
        } => cmd_train(&cfg, stage, &data, init_checkpoint.as_deref(), fresh_head, &out),
        Command::Infer {
            checkpoint,
            data,
            proposals,
            point_rule,
            alpha,
            task,
            split,
            out,
        } => cmd_infer(
            &cfg, &checkpoint, &data, &proposals, point_rule, alpha, task, split, &out,
        ),
        Command::UpperBound {
            data,
            proposals,
            mode,
            task,
            split,
            out,
        } => cmd_upper_bound(&cfg, &data, &proposals, mode, task, split, out.as_deref()),
        Command::Ablate {
            axis,
            grid,
            data,
            proposals,
            checkpoint,
            out,
        } => cmd_ablate(&cfg, axis, &grid, &data, &proposals, checkpoint.as_deref(), &out),
        Command::Gradcheck { corrupt } => cmd_gradcheck(&cfg, corrupt),
    }
}

fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let synth_cfg = cfg.synth.to_synth_config();
    let dataset = synth::generate(&synth_cfg)?;
    io::write_dataset(&dataset, out_dir)?;
    let proposals = synth::proposals_for_dataset(&dataset, &synth_cfg)?;
    let prop_dir = out_dir.join("proposals");
    std::fs::create_dir_all(&prop_dir)?;
    let mut total_proposals = 0usize;
    for (img, set) in dataset.images.iter().zip(&proposals) {
        total_proposals += set.len();
        io::write_proposals(
            set,
            &prop_dir.join(format!("prop_{:06}.vtp", img.index)),
            io::MaskStorage::F32,
        )?;
    }
    io::write_json(
        &out_dir.join("run_config.json"),
        &serde_json::json!({ "command": "synth", "config": cfg }),
    )?;
    let train_n = dataset.split_images(Split::Train).len();
    let val_n = dataset.split_images(Split::Val).len();
    println!(
        "wrote {} images ({} train / {} val), {} proposals, {} classes -> {}",
        dataset.images.len(),
        train_n,
        val_n,
        total_proposals,
        dataset.taxonomy.num_classes(),
        out_dir.display()
    );
    Ok(())
}

fn model_config_checked(cfg: &RunConfig, taxonomy: &Taxonomy, data_size: (usize, usize)) -> Result<ModelConfig> {
    let mc = cfg.model.to_model_config();
    mc.validate()?;
    if mc.num_classes != taxonomy.num_classes() {
        return Err(Error::Config(format!(
            "model.num_classes {} != dataset classes {}",
            mc.num_classes,
            taxonomy.num_classes()
        )));
    }
    if mc.image_size != data_size {
        return Err(Error::Config(format!(
            "model.image_size {:?} != dataset image size {:?}",
            mc.image_size, data_size
        )));
    }
    Ok(mc)
}

fn cmd_train(
    cfg: &RunConfig,
    stage: StageArg,
    data: &Path,
    init_checkpoint: Option<&Path>,
    fresh_head: bool,
    out: &Path,
) -> Result<()> {
    let dataset = io::read_dataset(data)?;
    let first = dataset
        .images
        .first()
        .ok_or_else(|| Error::InvalidInput("dataset has no images".into()))?;
    let mc = model_config_checked(cfg, &dataset.taxonomy, (first.height, first.width))?;
    let stage = match stage {
        StageArg::Box => TrainStage::Box,
        StageArg::Point => TrainStage::Point,
    };
    let train_cfg = cfg.to_train_config(stage)?;
    let mut model = VitP::<f32>::new(mc, train_cfg.seed)?;
    let mut load_report = None;
    if let Some(ckpt_path) = init_checkpoint {
        let tensors = io::read_checkpoint(ckpt_path)?;
        load_report = Some(model.load_pretrained(&tensors, fresh_head)?);
    }
    let outcome = train(&model, &dataset, &train_cfg)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    io::write_checkpoint(&model.params, out)?;

    let mut log_path = out.to_path_buf();
    log_path.set_extension("log.jsonl");
    let mut lines = String::new();
    lines.push_str(
        &serde_json::to_string(&serde_json::json!({
            "kind": "run",
            "command": "train",
            "stage": match stage { TrainStage::Box => "box", TrainStage::Point => "point" },
            "config": cfg,
            "loaded": load_report.as_ref().map(|r| r.loaded.len()),
            "initialized": load_report.as_ref().map(|r| &r.initialized),
        }))
        .expect("json"),
    );
    lines.push('\n');
    for record in &outcome.log {
        lines.push_str(&serde_json::to_string(record).expect("json"));
        lines.push('\n');
    }
    std::fs::write(&log_path, lines)?;

    println!(
        "trained {} steps; checkpoint -> {}; log -> {}",
        outcome.total_steps,
        out.display(),
        log_path.display()
    );
    if let Some(acc) = outcome.final_val_accuracy {
        println!("final val point accuracy: {:.4}", acc);
    }
    Ok(())
}

struct TaskFlags {
    semantic: bool,
    instance: bool,
    panoptic: bool,
}

impl TaskFlags {
    fn from(task: TaskArg) -> Self {
        TaskFlags {
            semantic: matches!(task, TaskArg::Semantic | TaskArg::All),
            instance: matches!(task, TaskArg::Instance | TaskArg::All),
            panoptic: matches!(task, TaskArg::Panoptic | TaskArg::All),
        }
    }
}

enum Scorer<'a> {
    Model {
        model: &'a VitP<f32>,
        rule: PointRule,
        fusion: FusionConfig,
        seed: u64,
    },
    UpperBound(UpperBoundMode),
}

struct EvalRun {
    metrics: BTreeMap<String, MetricReport>,
    dropped: usize,
    images: usize,
}

#[allow(clippy::too_many_arguments)]
fn score_and_evaluate(
    cfg: &RunConfig,
    dataset: &synth::Dataset,
    proposals_dir: &Path,
    scorer: &Scorer,
    tasks: &TaskFlags,
    split: SplitArg,
    out_dir: Option<&Path>,
) -> Result<EvalRun> {
    let images: Vec<&synth::AnnotatedImage> = match split {
        SplitArg::Val => dataset.split_images(Split::Val),
        SplitArg::Train => dataset.split_images(Split::Train),
        SplitArg::All => dataset.images.iter().collect(),
    };
    if images.is_empty() {
        return Err(Error::InvalidInput("selected split has no images".into()));
    }
    let k = dataset.taxonomy.num_classes();
    let mut dropped = 0usize;
    let mut semantic_pairs: Vec<(SegResult, GroundTruth)> = Vec::new();
    let mut panoptic_pairs: Vec<(SegResult, GroundTruth)> = Vec::new();
    let mut instance_pairs: Vec<(SegResult, GroundTruth)> = Vec::new();
    for ann in images.iter() {
        let prop_path = proposals_dir.join(format!("prop_{:06}.vtp", ann.index));
        let raw = io::read_proposals(&prop_path)?;
        if raw.num_classes() != k {
            return Err(Error::Format {
                path: prop_path.display().to_string(),
                msg: format!("proposal K={} vs taxonomy K={}", raw.num_classes(), k),
            });
        }
        let gt = ground_truth_from_annotation(ann, &dataset.taxonomy);
        let (scored, d) = match scorer {
            Scorer::Model { model, rule, fusion, seed } => {
                let image = vitp::model::image_tensor_from_rgb::<f32>(&ann.rgb, ann.height, ann.width)?;
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(*seed, &[ann.index as u64, 0x52]));
                let rng_opt = if *rule == PointRule::Random { Some(&mut rng) } else { None };
                classify_proposals(model, &image, &raw, *rule, fusion, rng_opt)?
            }
            Scorer::UpperBound(mode) => upper_bound_relabel(&raw, &gt, *mode)?,
        };
        dropped += d;
        if tasks.semantic {
            let result = semantic_inference(&scored);
            if let Some(dir) = out_dir {
                io::write_seg_result(&result, dir, ann.index, k)?;
            }
            semantic_pairs.push((result, gt.clone()));
        }
        if tasks.panoptic {
            let result = panoptic_inference(
                &scored,
                &dataset.taxonomy,
                cfg.eval.object_thresh,
                cfg.eval.overlap_thresh,
            );
            if let Some(dir) = out_dir {
                io::write_seg_result(&result, dir, ann.index, k)?;
            }
            panoptic_pairs.push((result, gt.clone()));
        }
        if tasks.instance {
            let result = instance_inference(&scored, &dataset.taxonomy, cfg.eval.score_thresh);
            if let Some(dir) = out_dir {
                io::write_seg_result(&result, dir, ann.index, k)?;
            }
            instance_pairs.push((result, gt.clone()));
        }
    }
    let mut metrics = BTreeMap::new();
    if tasks.semantic {
        metrics.insert("semantic".to_string(), evaluate_dataset(&semantic_pairs, k)?);
    }
    if tasks.panoptic {
        metrics.insert("panoptic".to_string(), evaluate_dataset(&panoptic_pairs, k)?);
    }
    if tasks.instance {
        metrics.insert("instance".to_string(), evaluate_dataset(&instance_pairs, k)?);
    }
    Ok(EvalRun {
        metrics,
        dropped,
        images: images.len(),
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    proposals: &Path,
    point_rule: Option<PointRuleArg>,
    alpha: Option<f64>,
    task: TaskArg,
    split: SplitArg,
    out: &Path,
) -> Result<()> {
    let dataset = io::read_dataset(data)?;
    let first = dataset
        .images
        .first()
        .ok_or_else(|| Error::InvalidInput("dataset has no images".into()))?;
    let mc = model_config_checked(cfg, &dataset.taxonomy, (first.height, first.width))?;
    let model = VitP::<f32>::new(mc, 0)?;
    io::apply_checkpoint(&model.params, &io::read_checkpoint(checkpoint)?)?;

    let rule: PointRule = match point_rule {
        Some(r) => r.into(),
        None => cfg.eval.point_rule.parse()?,
    };
    let fusion = FusionConfig {
        alpha: alpha.unwrap_or(cfg.fusion.alpha),
        epsilon_floor: cfg.fusion.epsilon_floor,
    };
    fusion.validate()?;
    let tasks = TaskFlags::from(task);
    std::fs::create_dir_all(out)?;
    let scorer = Scorer::Model {
        model: &model,
        rule,
        fusion,
        seed: cfg.eval.seed,
    };
    let run = score_and_evaluate(cfg, &dataset, proposals, &scorer, &tasks, split, Some(out))?;
    let report = serde_json::json!({
        "command": "infer",
        "config": cfg,
        "point_rule": format!("{:?}", rule).to_lowercase(),
        "alpha": fusion.alpha,
        "images": run.images,
        "dropped_proposals": run.dropped,
        "metrics": run.metrics,
    });
    io::write_json(&out.join("report.json"), &report)?;
    for (task, m) in &run.metrics {
        println!("{}: {:.4}", task, m.value);
    }
    Ok(())
}

fn cmd_upper_bound(
    cfg: &RunConfig,
    data: &Path,
    proposals: &Path,
    mode: ModeArg,
    task: TaskArg,
    split: SplitArg,
    out: Option<&Path>,
) -> Result<()> {
    let dataset = io::read_dataset(data)?;
    let mode = match mode {
        ModeArg::Point => UpperBoundMode::Point,
        ModeArg::Mask => UpperBoundMode::Mask,
    };
    let tasks = TaskFlags::from(task);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let run = score_and_evaluate(
        cfg,
        &dataset,
        proposals,
        &Scorer::UpperBound(mode),
        &tasks,
        split,
        out,
    )?;
    let report = serde_json::json!({
        "command": "upper-bound",
        "config": cfg,
        "mode": match mode { UpperBoundMode::Point => "point", UpperBoundMode::Mask => "mask" },
        "images": run.images,
        "dropped_proposals": run.dropped,
        "metrics": run.metrics,
    });
    if let Some(dir) = out {
        io::write_json(&dir.join("report.json"), &report)?;
    }
    for (task, m) in &run.metrics {
        println!("{}: {:.4}", task, m.value);
    }
    Ok(())
}

fn metric_or_nan(run: &EvalRun, task: &str) -> f64 {
    run.metrics.get(task).map(|m| m.value).unwrap_or(f64::NAN)
}

fn cmd_ablate(
    cfg: &RunConfig,
    axis: AxisArg,
    grid: &str,
    data: &Path,
    proposals: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let dataset = io::read_dataset(data)?;
    let first = dataset
        .images
        .first()
        .ok_or_else(|| Error::InvalidInput("dataset has no images".into()))?;
    let mc = model_config_checked(cfg, &dataset.taxonomy, (first.height, first.width))?;
    let tasks = TaskFlags {
        semantic: true,
        instance: true,
        panoptic: true,
    };
    let values: Vec<String> = grid
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Error::InvalidInput("empty --grid".into()));
    }
    let mut rows: Vec<(String, f64, f64, f64)> = Vec::new();
    let need_checkpoint = || -> Result<VitP<f32>> {
        let path = checkpoint
            .ok_or_else(|| Error::InvalidInput("--checkpoint required for this axis".into()))?;
        let model = VitP::<f32>::new(mc.clone(), 0)?;
        io::apply_checkpoint(&model.params, &io::read_checkpoint(path)?)?;
        Ok(model)
    };
    match axis {
        AxisArg::Alpha => {
            let model = need_checkpoint()?;
            let rule: PointRule = cfg.eval.point_rule.parse()?;
            for v in &values {
                let alpha: f64 = v
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad alpha '{}'", v)))?;
                let fusion = FusionConfig {
                    alpha,
                    epsilon_floor: cfg.fusion.epsilon_floor,
                };
                fusion.validate()?;
                let scorer = Scorer::Model {
                    model: &model,
                    rule,
                    fusion,
                    seed: cfg.eval.seed,
                };
                let run =
                    score_and_evaluate(cfg, &dataset, proposals, &scorer, &tasks, SplitArg::Val, None)?;
                rows.push((
                    v.clone(),
                    metric_or_nan(&run, "panoptic"),
                    metric_or_nan(&run, "instance"),
                    metric_or_nan(&run, "semantic"),
                ));
            }
        }
        AxisArg::Rule => {
            let model = need_checkpoint()?;
            for v in &values {
                let rule: PointRule = v.parse()?;
                let scorer = Scorer::Model {
                    model: &model,
                    rule,
                    fusion: cfg.fusion,
                    seed: cfg.eval.seed,
                };
                let run =
                    score_and_evaluate(cfg, &dataset, proposals, &scorer, &tasks, SplitArg::Val, None)?;
                rows.push((
                    v.clone(),
                    metric_or_nan(&run, "panoptic"),
                    metric_or_nan(&run, "instance"),
                    metric_or_nan(&run, "semantic"),
                ));
            }
        }
        AxisArg::Points => {
            for v in &values {
                let n: usize = v
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad point count '{}'", v)))?;
                let mut train_cfg = cfg.to_train_config(TrainStage::Point)?;
                train_cfg.points_per_image = n;
                let model = VitP::<f32>::new(mc.clone(), train_cfg.seed)?;
                train(&model, &dataset, &train_cfg)?;
                let rule: PointRule = cfg.eval.point_rule.parse()?;
                let scorer = Scorer::Model {
                    model: &model,
                    rule,
                    fusion: cfg.fusion,
                    seed: cfg.eval.seed,
                };
                let run =
                    score_and_evaluate(cfg, &dataset, proposals, &scorer, &tasks, SplitArg::Val, None)?;
                rows.push((
                    v.clone(),
                    metric_or_nan(&run, "panoptic"),
                    metric_or_nan(&run, "instance"),
                    metric_or_nan(&run, "semantic"),
                ));
            }
        }
    }
    let mut csv = String::from("config,pq,ap,miou\n");
    for (v, pq, ap, miou) in &rows {
        csv.push_str(&format!("{},{:.6},{:.6},{:.6}\n", v, pq, ap, miou));
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, &csv)?;
    print!("{}", csv);
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, corrupt: bool) -> Result<()> {
    let tiny = ModelConfig {
        image_size: (8, 8),
        patch_size: 4,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        num_classes: 3,
        mlp_ratio: 2.0,
        channels: 3,
    };
    let start = std::time::Instant::now();
    let report = gradient_check(&tiny, cfg.train.seed, corrupt)?;
    let elapsed = start.elapsed().as_secs_f64();
    let pass = report.max_rel_err < 1e-4;
    println!(
        "gradcheck {}: max_rel_err={:.3e} at {} ({} elements, {:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        report.max_rel_err,
        report.worst_param,
        report.params_checked,
        elapsed
    );
    if pass {
        Ok(())
    } else {
        Err(Error::GradCheckFailed {
            max_rel_err: report.max_rel_err,
        })
    }
}
