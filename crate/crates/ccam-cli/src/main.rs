//! Command-line surface for the localization pipeline.
//!
//! Subcommands: `synth` generates the synthetic dataset, `train` fits the
//! classifier, `eval` runs the full localization pipeline into a CSV report,
//! `render` writes ranked activation-map heatmaps, and `gradcheck` verifies
//! every analytic gradient against central finite differences.
//!
//! Exit codes: 0 success, 1 flag/validation error, 2 runtime or check
//! failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ccam::cam::{ccam, class_map, gt_known_ccam, rank_classes, ClassRanking};
use ccam::combine::{parse_combination, split_combination_list, CombinationFn, TopBottom};
use ccam::gradcheck::GRAD_TOLERANCE;
use ccam::localization::{bbox_from_map, normalize_map, BoxPx};
use ccam::metrics::{aggregate, EvalRecord, MetricRow};
use ccam::model::{grad_check_model, train, Model, ModelConfig, TrainConfig, IN_CHANNELS};
use ccam::storage::{
    load_checkpoint, load_tensor, read_manifest, render_heatmap, save_checkpoint, save_tensor,
    write_manifest, write_report, HeatmapStyle, ManifestEntry,
};
use ccam::synth::{generate, SynthConfig};
use ccam::tensor::{bilinear_resize, Tensor};

#[derive(Parser)]
#[command(name = "ccam", version, about = "Weakly supervised localization with combinational class activation maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (train + test manifests).
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of classes.
        #[arg(long, default_value_t = 8)]
        classes: usize,
        /// Training images per class (the test split gets one fifth).
        #[arg(long = "per-class", default_value_t = 250)]
        per_class: usize,
        /// Square image side length.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the classifier on a dataset manifest.
    Train {
        /// Training manifest path.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Enable the low-level non-local block.
        #[arg(long = "nl-low")]
        nl_low: bool,
        /// Enable the high-level non-local block.
        #[arg(long = "nl-high")]
        nl_high: bool,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the localization pipeline and write a CSV metric report.
    Eval {
        /// Evaluation manifest path.
        #[arg(long)]
        data: PathBuf,
        /// Trained checkpoint path.
        #[arg(long)]
        ckpt: PathBuf,
        /// Combination function spec(s); `;`- or comma-separated sweep.
        #[arg(long)]
        combine: Option<String>,
        /// Threshold fraction for box extraction.
        #[arg(long, default_value_t = 0.2)]
        tau: f64,
        /// Report CSV output path.
        #[arg(long)]
        out: PathBuf,
        /// Also compute GT-known localization (extra pass per image).
        #[arg(long = "gt-known")]
        gt_known: bool,
    },
    /// Render ranked activation maps and the combined map for one image.
    Render {
        /// Dataset manifest that contains the image.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Image id from the manifest.
        #[arg(long = "image-id")]
        image_id: String,
        #[arg(long)]
        combine: Option<String>,
        #[arg(long, default_value_t = 0.2)]
        tau: f64,
        /// Output directory for the 7 heatmaps.
        #[arg(long)]
        out: PathBuf,
        /// gray (PGM) or color (PPM).
        #[arg(long, default_value = "color")]
        style: String,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Model size: small (16x16, K=3) or medium (24x24, K=4).
        #[arg(long, default_value = "small")]
        size: String,
        /// Debug hook: corrupt one analytic gradient to prove the check bites.
        #[arg(long = "inject-fault", hide = true)]
        inject_fault: bool,
    },
}

/// Validation problems exit 1, runtime/check failures exit 2.
enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

fn validation(err: impl std::fmt::Display) -> CliError {
    CliError::Validation(err.to_string())
}

fn runtime(err: impl std::fmt::Display) -> CliError {
    CliError::Runtime(err.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help / --version are not errors.
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            if matches!(err, CliError::Validation(_)) {
                eprintln!("run `ccam --help` for usage");
            }
            ExitCode::from(err.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            out,
            classes,
            per_class,
            size,
            seed,
        } => cmd_synth(&out, classes, per_class, size, seed),
        Command::Train {
            data,
            out,
            nl_low,
            nl_high,
            epochs,
            lr,
            batch,
            seed,
        } => cmd_train(&data, &out, nl_low, nl_high, epochs, lr, batch, seed),
        Command::Eval {
            data,
            ckpt,
            combine,
            tau,
            out,
            gt_known,
        } => cmd_eval(&data, &ckpt, combine.as_deref(), tau, &out, gt_known),
        Command::Render {
            data,
            ckpt,
            image_id,
            combine,
            tau,
            out,
            style,
        } => cmd_render(&data, &ckpt, &image_id, combine.as_deref(), tau, &out, &style),
        Command::Gradcheck {
            seed,
            size,
            inject_fault,
        } => cmd_gradcheck(seed, &size, inject_fault),
    }
}

fn cmd_synth(
    out: &Path,
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<(), CliError> {
    // Blob side lengths scale with the image: 3/8..5/8 of the side.
    let cfg = SynthConfig {
        classes,
        per_class_train: per_class,
        per_class_test: (per_class / 5).max(1),
        image_size: size,
        blob_min: (size * 7 / 16).max(1),
        blob_max: size * 5 / 8,
        seed,
        ..SynthConfig::default()
    };
    cfg.validate().map_err(validation)?;
    let dataset = generate(&cfg).map_err(runtime)?;

    let tensor_dir = out.join("tensors");
    std::fs::create_dir_all(&tensor_dir).map_err(runtime)?;
    for (split, samples) in [("train", &dataset.train), ("test", &dataset.test)] {
        let mut entries = Vec::with_capacity(samples.len());
        for sample in samples {
            let rel = format!("tensors/{}.tnsr", sample.id);
            save_tensor(&out.join(&rel), &sample.image).map_err(runtime)?;
            entries.push(ManifestEntry {
                id: sample.id.clone(),
                tensor_path: rel,
                label: sample.label,
                boxes: sample.boxes.clone(),
            });
        }
        write_manifest(&out.join(format!("{split}.manifest")), &entries).map_err(runtime)?;
        println!("{split}: {} images", samples.len());
    }
    println!(
        "wrote dataset to {} ({} classes, seed {})",
        out.display(),
        classes,
        seed
    );
    Ok(())
}

struct LoadedSample {
    id: String,
    image: Tensor,
    label: usize,
    boxes: Vec<BoxPx>,
}

fn load_dataset(manifest: &Path) -> Result<Vec<LoadedSample>, CliError> {
    let entries = read_manifest(manifest).map_err(runtime)?;
    if entries.is_empty() {
        return Err(CliError::Runtime(format!(
            "manifest {} is empty",
            manifest.display()
        )));
    }
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::with_capacity(entries.len());
    for entry in entries {
        let image = load_tensor(&base.join(&entry.tensor_path)).map_err(runtime)?;
        if image.rank() != 3 || image.shape()[0] != IN_CHANNELS {
            return Err(CliError::Runtime(format!(
                "image {} has shape {:?}, expected [{IN_CHANNELS}, H, W]",
                entry.id,
                image.shape()
            )));
        }
        samples.push(LoadedSample {
            id: entry.id,
            image,
            label: entry.label,
            boxes: entry.boxes,
        });
    }
    Ok(samples)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    out: &Path,
    nl_low: bool,
    nl_high: bool,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<(), CliError> {
    if batch == 0 {
        return Err(CliError::Validation("batch size must be positive".into()));
    }
    let samples = load_dataset(data)?;
    let (h, w) = (samples[0].image.shape()[1], samples[0].image.shape()[2]);
    let classes = samples.iter().map(|s| s.label).max().unwrap() + 1;
    if classes < 2 {
        return Err(CliError::Runtime("dataset has fewer than 2 classes".into()));
    }
    let cfg = ModelConfig::for_dataset(h, w, classes, nl_low, nl_high, seed);
    cfg.validate().map_err(validation)?;

    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let tc = TrainConfig { epochs, lr, batch };
    let (model, curve) = train(&images, &labels, &cfg, &tc).map_err(runtime)?;

    let mut log = String::new();
    for (epoch, loss) in curve.iter().enumerate() {
        println!("epoch {:>3}  loss {loss:.6}", epoch + 1);
        log.push_str(&format!("{}\t{loss}\n", epoch + 1));
    }
    let log_path = out.with_extension("loss.txt");
    std::fs::write(&log_path, log).map_err(runtime)?;

    let mut extra = BTreeMap::new();
    extra.insert("epochs".to_string(), epochs.to_string());
    extra.insert(
        "final_loss".to_string(),
        curve.last().copied().unwrap_or(f64::NAN).to_string(),
    );
    save_checkpoint(out, &model.to_checkpoint(&extra)).map_err(runtime)?;
    println!("checkpoint written to {}", out.display());
    println!("loss log written to {}", log_path.display());
    Ok(())
}

type NamedCombine = (String, Box<dyn CombinationFn>);

/// Parse `--combine`, falling back to top-1 & bottom-10 clipped to the
/// class count (with a warning) when absent.
fn resolve_combines(spec: Option<&str>, classes: usize) -> Result<Vec<NamedCombine>, CliError> {
    match spec {
        Some(list) => {
            let mut combines: Vec<NamedCombine> = Vec::new();
            for item in split_combination_list(list) {
                let parsed = parse_combination(&item).map_err(validation)?;
                combines.push((parsed.to_string(), parsed));
            }
            if combines.is_empty() {
                return Err(CliError::Validation("empty --combine list".into()));
            }
            Ok(combines)
        }
        None => {
            let bottom = if 1 + 10 > classes {
                let clipped = classes - 1;
                eprintln!(
                    "warning: default topbot:i=1,b=10 clipped to b={clipped} for {classes} classes"
                );
                clipped
            } else {
                10
            };
            let f = TopBottom::new(1, bottom);
            Ok(vec![(f.to_string(), Box::new(f))])
        }
    }
}

struct ImageOutcome {
    record: EvalRecord,
    gtknown_record: Option<EvalRecord>,
}

/// Forward → rank → combine → box for one image.
fn evaluate_image(
    model: &Model,
    sample: &LoadedSample,
    combine: &dyn CombinationFn,
    tau: f64,
    gt_known: bool,
) -> Result<ImageOutcome, CliError> {
    let out = model.forward(&sample.image).map_err(runtime)?;
    let ranking = rank_classes(&out.pooled, &model.params.fc_w).map_err(runtime)?;
    let top5 = ranking.top(5.min(ranking.num_classes()));
    let (h, w) = (model.config.image_h, model.config.image_w);

    let map = ccam(&out.features, &model.params.fc_w, &ranking, combine).map_err(runtime)?;
    let pred_box = bbox_from_map(&map, tau, h, w).map_err(validation)?;
    let record = EvalRecord {
        id: sample.id.clone(),
        gt_label: sample.label,
        gt_boxes: sample.boxes.clone(),
        top5: top5.clone(),
        pred_box,
    };

    let gtknown_record = if gt_known {
        let gmap = gt_known_ccam(
            &out.features,
            &model.params.fc_w,
            sample.label,
            &ranking,
            combine,
        )
        .map_err(runtime)?;
        let gbox = bbox_from_map(&gmap, tau, h, w).map_err(validation)?;
        Some(EvalRecord {
            pred_box: gbox,
            ..record.clone()
        })
    } else {
        None
    };

    Ok(ImageOutcome {
        record,
        gtknown_record,
    })
}

fn cmd_eval(
    data: &Path,
    ckpt: &Path,
    combine: Option<&str>,
    tau: f64,
    out: &Path,
    gt_known: bool,
) -> Result<(), CliError> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(CliError::Validation(format!(
            "tau must be in (0,1), got {tau}"
        )));
    }
    let checkpoint = load_checkpoint(ckpt).map_err(runtime)?;
    let model = Model::from_checkpoint(&checkpoint).map_err(runtime)?;
    let combines = resolve_combines(combine, model.config.classes)?;

    let mut samples = load_dataset(data)?;
    samples.sort_by(|a, b| a.id.cmp(&b.id));

    let mut rows: Vec<MetricRow> = Vec::new();
    for (name, function) in &combines {
        let mut records = Vec::with_capacity(samples.len());
        let mut gtknown_records = Vec::with_capacity(samples.len());
        for sample in &samples {
            let outcome = evaluate_image(&model, sample, function.as_ref(), tau, gt_known)?;
            records.push(outcome.record);
            if let Some(r) = outcome.gtknown_record {
                gtknown_records.push(r);
            }
        }
        let report = aggregate(&records).map_err(runtime)?;
        let mut block: Vec<MetricRow> = report
            .rows
            .iter()
            .filter(|r| r.metric != "gtknown_loc_err")
            .cloned()
            .collect();
        if gt_known {
            let greport = aggregate(&gtknown_records).map_err(runtime)?;
            block.push(greport.row("gtknown_loc_err").unwrap().clone());
        }
        // Qualify metric names only when sweeping several functions.
        if combines.len() > 1 {
            for row in &mut block {
                row.metric = format!("{}[{}]", row.metric, name);
            }
        }
        for row in &block {
            println!(
                "{:<40} {:>8.3}%  ({}/{} correct)",
                row.metric, row.error_pct, row.correct, row.total
            );
        }
        rows.extend(block);
    }
    write_report(out, &rows).map_err(runtime)?;
    println!("report written to {}", out.display());
    Ok(())
}

fn rank_clamped(ranking: &ClassRanking, rank: i64) -> usize {
    let k = ranking.num_classes() as i64;
    ranking.class_at(rank.clamp(1, k) as usize)
}

fn cmd_render(
    data: &Path,
    ckpt: &Path,
    image_id: &str,
    combine: Option<&str>,
    tau: f64,
    out: &Path,
    style: &str,
) -> Result<(), CliError> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(CliError::Validation(format!(
            "tau must be in (0,1), got {tau}"
        )));
    }
    let style: HeatmapStyle = style.parse().map_err(validation)?;
    let checkpoint = load_checkpoint(ckpt).map_err(runtime)?;
    let model = Model::from_checkpoint(&checkpoint).map_err(runtime)?;
    let combines = resolve_combines(combine, model.config.classes)?;
    if combines.len() != 1 {
        return Err(CliError::Validation(
            "render expects exactly one --combine function".into(),
        ));
    }
    let samples = load_dataset(data)?;
    let sample = samples
        .iter()
        .find(|s| s.id == image_id)
        .ok_or_else(|| CliError::Runtime(format!("image id {image_id:?} not in manifest")))?;

    std::fs::create_dir_all(out).map_err(runtime)?;
    let outp = model.forward(&sample.image).map_err(runtime)?;
    let ranking = rank_classes(&outp.pooled, &model.params.fc_w).map_err(runtime)?;
    let (h, w) = (model.config.image_h, model.config.image_w);
    let function = combines[0].1.as_ref();

    let map = ccam(&outp.features, &model.params.fc_w, &ranking, function).map_err(runtime)?;
    let pred_box = bbox_from_map(&map, tau, h, w).map_err(validation)?;

    let k = ranking.num_classes() as i64;
    let mut jobs: Vec<(String, Tensor)> = Vec::new();
    for (idx, rank) in [1, 2, 3].iter().enumerate() {
        let class = rank_clamped(&ranking, *rank);
        let m = class_map(&outp.features, &model.params.fc_w, class).map_err(runtime)?;
        jobs.push((format!("map_top{}", idx + 1), m));
    }
    for (idx, rank) in [k - 2, k - 1, k].iter().enumerate() {
        let class = rank_clamped(&ranking, *rank);
        let m = class_map(&outp.features, &model.params.fc_w, class).map_err(runtime)?;
        jobs.push((format!("map_bot{}", 3 - idx), m));
    }
    jobs.push(("map_ccam".to_string(), map));

    for (name, raw) in jobs {
        let resized = bilinear_resize(&raw, h, w).map_err(runtime)?;
        let normalized = normalize_map(&resized).map_err(runtime)?;
        let path = out.join(format!("{name}.{}", style.extension()));
        render_heatmap(&normalized, &path, style, Some(pred_box)).map_err(runtime)?;
        println!("wrote {}", path.display());
    }
    println!(
        "predicted box: ({}, {}, {}, {})",
        pred_box.x0, pred_box.y0, pred_box.x1, pred_box.y1
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64, size: &str, inject_fault: bool) -> Result<(), CliError> {
    let cfg = match size {
        "small" => ModelConfig::gradcheck_small(seed),
        "medium" => ModelConfig::for_dataset(24, 24, 4, true, true, seed),
        other => {
            return Err(CliError::Validation(format!(
                "unknown size {other:?} (expected small|medium)"
            )))
        }
    };
    let report = grad_check_model(&cfg, seed, inject_fault).map_err(runtime)?;
    for group in &report.groups {
        println!(
            "{:<12} max rel err {:.3e}  ({} components)",
            group.name, group.max_rel_error, group.components
        );
    }
    let worst = report.max_rel_error();
    if report.passed() {
        println!("gradcheck PASS: max rel err {worst:.3e} <= {GRAD_TOLERANCE:.0e}");
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradcheck FAIL: max rel err {worst:.3e} > {GRAD_TOLERANCE:.0e}"
        )))
    }
}
