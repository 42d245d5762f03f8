mod config;
mod png;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sfas_core::data::{balanced_head, few_shot_split, generate_dataset, load_dataset, save_dataset, RawDataset, Sample};
use sfas_core::manifest::{file_sha256, RunManifest};
use sfas_core::metrics::{
    emit_classification, emit_segmentation_table, emit_tables, segmentation_report, RunRecord, SegmentationRow,
};
use sfas_core::model::{load_checkpoint, predicted_masks, save_checkpoint, SfasModel};
use sfas_core::optim::OptimizerKind;
use sfas_core::seg::{segment_chip, CannyParams, SegMethod};
use sfas_core::train::{evaluate, history_hash, save_history, train, Batch, EvalReport, MaskSource, TrainConfig};
use sfas_core::{BnMode, Scalar};

use config::{FileConfig, Precision};

#[derive(Parser, Debug)]
#[command(name = "sfas", version, about = "Few-shot recognition with an auxiliary segmentation task")]
struct Cli {
    /// TOML file with `precision`, `[generate]` and `[train]` settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Numeric precision for training and inference.
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset file.
    Generate(GenerateArgs),
    /// Train one model on a few-shot split.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Score classical (and optionally learned) segmentation on the test split.
    Segment(SegmentArgs),
    /// Train with and without the segmentation loss over k values and seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    per_class_train: Option<usize>,
    #[arg(long)]
    per_class_test: Option<usize>,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    /// Also export the first few chips and masks of each split as PNG.
    #[arg(long)]
    png_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    png_count: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MaskSourceArg {
    Manual,
    Otsu,
    Canny,
}

impl From<MaskSourceArg> for MaskSource {
    fn from(m: MaskSourceArg) -> Self {
        match m {
            MaskSourceArg::Manual => MaskSource::Manual,
            MaskSourceArg::Otsu => MaskSource::Otsu,
            MaskSourceArg::Canny => MaskSource::Canny,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

/// Training knobs shared by `train` and `ablate`.
#[derive(Args, Debug)]
struct TrainKnobs {
    #[arg(long)]
    loops: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long, value_enum)]
    mask_source: Option<MaskSourceArg>,
    /// Loops between periodic test evaluations (0 disables).
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Score only this many test samples (class-balanced) at the end.
    #[arg(long)]
    test_limit: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k_labeled: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train recognition only.
    #[arg(long)]
    no_seg_loss: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    knobs: TrainKnobs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    test_limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SegmentMethodArg {
    Otsu,
    Canny,
    Learned,
    All,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    method: SegmentMethodArg,
    /// Checkpoint for the learned decoder; required by `learned`, optional for `all`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    test_limit: Option<usize>,
    /// Export this many predicted masks per method as PNG.
    #[arg(long, default_value_t = 0)]
    png_count: usize,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [5usize, 10, 20])]
    k_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    knobs: TrainKnobs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Calls a generic command with the scalar type picked at run time.
macro_rules! dispatch {
    ($p:expr, $f:ident($($arg:expr),*)) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let precision = cli.precision.or(file.precision).unwrap_or_default();
    match cli.command {
        Command::Generate(a) => cmd_generate(a, &file),
        Command::Train(a) => dispatch!(precision, cmd_train(a, &file, precision)),
        Command::Eval(a) => dispatch!(precision, cmd_eval(a)),
        Command::Segment(a) => dispatch!(precision, cmd_segment(a)),
        Command::Ablate(a) => dispatch!(precision, cmd_ablate(a, &file, precision)),
    }
}

fn cmd_generate(a: GenerateArgs, file: &FileConfig) -> Result<()> {
    let mut cfg = file.generate.clone();
    if let Some(c) = a.classes {
        cfg.num_classes = c;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.per_class_train {
        cfg.per_class_train = n;
    }
    if let Some(n) = a.per_class_test {
        cfg.per_class_test = n;
    }
    let raw = generate_dataset(&cfg)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_dataset(&raw, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(dir) = &a.png_dir {
        fs::create_dir_all(dir)?;
        for (split, samples) in [("train", &raw.train), ("test", &raw.test)] {
            for s in balanced_head(samples, a.png_count) {
                let stem = format!("{split}_{:05}_{}", s.id(), s.meta.class_name);
                png::save_chip(&s.image, &dir.join(format!("{stem}.png")))?;
                if let Some(m) = &s.mask {
                    png::save_mask(m, &dir.join(format!("{stem}_mask.png")))?;
                }
            }
        }
    }
    println!(
        "wrote {}: {} classes, {} train, {} test, sha256 {}",
        a.out.display(),
        raw.num_classes(),
        raw.train.len(),
        raw.test.len(),
        file_sha256(&a.out)?
    );
    Ok(())
}

fn apply_knobs(cfg: &mut TrainConfig, k: &TrainKnobs) {
    if let Some(v) = k.loops {
        cfg.loops = v;
    }
    if let Some(v) = k.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = k.lr {
        cfg.learning_rate = v;
    }
    if let Some(o) = k.optimizer {
        cfg.optimizer = match o {
            OptimizerArg::Adam => OptimizerKind::default(),
            OptimizerArg::Sgd => OptimizerKind::Sgd { momentum: 0.0 },
        };
    }
    if let Some(m) = k.mask_source {
        cfg.mask_source = m.into();
    }
    if let Some(v) = k.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = k.eval_samples {
        cfg.eval_samples = v;
    }
}

fn load(path: &Path) -> Result<RawDataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn test_subset(raw: &RawDataset, limit: Option<usize>) -> Vec<Sample> {
    match limit {
        Some(n) => balanced_head(&raw.test, n),
        None => raw.test.clone(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

const EVAL_CHUNK: usize = 32;

fn emit_eval(report: &EvalReport, dir: &Path) -> Result<()> {
    if let Some(r) = &report.recognition {
        emit_classification(r, dir)?;
    }
    if let Some(s) = &report.segmentation {
        let row = SegmentationRow {
            method: "learned".into(),
            report: *s,
        };
        emit_segmentation_table(&[row], dir)?;
    }
    Ok(())
}

fn cmd_train<T: Scalar>(a: TrainArgs, file: &FileConfig, precision: Precision) -> Result<()> {
    let mut cfg = file.train.clone();
    apply_knobs(&mut cfg, &a.knobs);
    if let Some(k) = a.k_labeled {
        cfg.k_labeled_per_class = k;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.no_seg_loss {
        cfg.use_segmentation = false;
    }
    let raw = load(&a.data)?;
    let split = few_shot_split(&raw, cfg.k_labeled_per_class, cfg.seed)?;
    fs::create_dir_all(&a.out)?;
    let out = train::<T>(&cfg, &split)?;

    let ckpt = a.out.join("checkpoint.sfas");
    save_checkpoint(&out.model, &ckpt)?;
    save_history(&out.history, a.out.join("history.csv"))?;
    write_json(&a.out.join("evals.json"), &out.evals)?;
    if let Some(auto) = &out.autoseg {
        write_json(&a.out.join("autoseg.json"), auto)?;
    }
    let mut model = out.model;
    let report = evaluate(&mut model, &test_subset(&raw, a.knobs.test_limit), &raw.class_names, EVAL_CHUNK)?;
    emit_eval(&report, &a.out)?;

    let mut manifest = RunManifest::new(cfg.clone(), vec![cfg.seed], file_sha256(&a.data)?, precision.name());
    manifest.checkpoint_sha256 = Some(file_sha256(&ckpt)?);
    manifest.history_sha256 = Some(history_hash(&out.history));
    manifest.save(a.out.join("manifest.json"))?;

    let last = out.history.last();
    println!(
        "trained {} loops: final l_r {:.4}, test accuracy {:.4}; outputs in {}",
        out.history.len(),
        last.map_or(f64::NAN, |r| r.l_r),
        report.recognition.map_or(f64::NAN, |r| r.overall_accuracy),
        a.out.display()
    );
    Ok(())
}

fn load_model<T: Scalar>(path: &Path, raw: &RawDataset) -> Result<SfasModel<T>> {
    let model: SfasModel<T> = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if model.num_classes() != raw.num_classes() {
        bail!(
            "checkpoint has {} classes but the dataset has {}",
            model.num_classes(),
            raw.num_classes()
        );
    }
    Ok(model)
}

fn cmd_eval<T: Scalar>(a: EvalArgs) -> Result<()> {
    let raw = load(&a.data)?;
    let mut model = load_model::<T>(&a.checkpoint, &raw)?;
    let report = evaluate(&mut model, &test_subset(&raw, a.test_limit), &raw.class_names, EVAL_CHUNK)?;
    fs::create_dir_all(&a.out)?;
    emit_eval(&report, &a.out)?;
    if let Some(r) = &report.recognition {
        println!("overall accuracy {:.4}", r.overall_accuracy);
        for (name, acc) in r.class_names.iter().zip(&r.per_class_accuracy) {
            println!("  {name:<10} {acc:.4}");
        }
    }
    if let Some(s) = &report.segmentation {
        println!("segmentation iou {:.4} accuracy {:.4}", s.iou, s.accuracy);
    }
    Ok(())
}

fn learned_masks<T: Scalar>(model: &mut SfasModel<T>, samples: &[Sample]) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Sample> = part.iter().collect();
        let b = Batch::<T>::from_samples(&refs, 0)?;
        let f = model.extractor_forward(&b.images, BnMode::Eval)?;
        let masks = predicted_masks(&model.decoder_forward(&f, BnMode::Eval)?);
        out.extend(masks.chunks(sfas_core::CHIP_PIXELS).map(<[u8]>::to_vec));
    }
    Ok(out)
}

fn cmd_segment<T: Scalar>(a: SegmentArgs) -> Result<()> {
    let raw = load(&a.data)?;
    let samples = test_subset(&raw, a.test_limit);
    let gt: Vec<u8> = samples
        .iter()
        .map(|s| s.mask.clone().context("test sample without a mask"))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let mut methods: Vec<&str> = match a.method {
        SegmentMethodArg::Otsu => vec!["otsu"],
        SegmentMethodArg::Canny => vec!["canny"],
        SegmentMethodArg::Learned => vec!["learned"],
        SegmentMethodArg::All => vec!["otsu", "canny", "learned"],
    };
    if a.checkpoint.is_none() {
        if a.method == SegmentMethodArg::Learned {
            bail!("--method learned needs --checkpoint");
        }
        methods.retain(|&m| m != "learned");
    }
    fs::create_dir_all(&a.out)?;
    let canny = CannyParams::default();
    let mut rows = Vec::new();
    for method in methods {
        let masks: Vec<Vec<u8>> = match method {
            "learned" => {
                let path = a.checkpoint.as_deref().expect("checked above");
                learned_masks(&mut load_model::<T>(path, &raw)?, &samples)?
            }
            name => {
                let m = if name == "otsu" { SegMethod::Otsu } else { SegMethod::Canny };
                samples
                    .iter()
                    .map(|s| Ok(segment_chip(&s.image, m, &canny)?.0))
                    .collect::<Result<_>>()?
            }
        };
        for (s, m) in samples.iter().zip(&masks).take(a.png_count) {
            png::save_mask(m, &a.out.join(format!("{method}_{:05}.png", s.id())))?;
        }
        let report = segmentation_report(&masks.concat(), &gt)?;
        println!(
            "{method:<8} target {:.4} background {:.4} accuracy {:.4} iou {:.4}",
            report.target_acc, report.background_acc, report.accuracy, report.iou
        );
        rows.push(SegmentationRow {
            method: method.into(),
            report,
        });
    }
    emit_segmentation_table(&rows, &a.out)?;
    Ok(())
}

fn cmd_ablate<T: Scalar>(a: AblateArgs, file: &FileConfig, precision: Precision) -> Result<()> {
    let raw = load(&a.data)?;
    let test = test_subset(&raw, a.knobs.test_limit);
    let mut base = file.train.clone();
    apply_knobs(&mut base, &a.knobs);
    fs::create_dir_all(&a.out)?;
    let mut records = Vec::new();
    for &k in &a.k_list {
        for &seed in &a.seeds {
            let split = few_shot_split(&raw, k, seed)?;
            for (variant, use_seg) in [("with_seg", true), ("without_seg", false)] {
                let cfg = TrainConfig {
                    k_labeled_per_class: k,
                    seed,
                    use_segmentation: use_seg,
                    ..base.clone()
                };
                let mut model = train::<T>(&cfg, &split)?.model;
                let report = evaluate(&mut model, &test, &raw.class_names, EVAL_CHUNK)?
                    .recognition
                    .context("test split has no labels")?;
                println!("k={k} seed={seed} {variant}: accuracy {:.4}", report.overall_accuracy);
                records.push(RunRecord {
                    k_labeled: k,
                    seed,
                    variant: variant.into(),
                    accuracy: report.overall_accuracy,
                    report,
                });
            }
        }
    }
    emit_tables(&records, &a.out)?;
    let manifest = RunManifest::new(base, a.seeds.clone(), file_sha256(&a.data)?, precision.name());
    manifest.save(a.out.join("manifest.json"))?;
    Ok(())
}
