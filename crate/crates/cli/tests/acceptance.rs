//! Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any
//! fails. Pass criterion names as arguments to run a subset, e.g.
//! `cargo test -p sfas-cli --test acceptance -- otsu determinism`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfas_core::data::{
    derive_seed, few_shot_split, generate_dataset, load_dataset, read_dataset, render_chip, save_dataset,
    write_dataset, GeneratorConfig, PoseJitter, RawDataset, ShapeFamily,
};
use sfas_core::loss::{alpha, recognition_loss, segmentation_loss};
use sfas_core::metrics::segmentation_report;
use sfas_core::model::Part;
use sfas_core::seg::{otsu_threshold, segment_chip, CannyParams, SegMethod};
use sfas_core::tensor::{BnMode, Shape, Tensor};
use sfas_core::train::{evaluate, train, BatchSampler, TrainConfig, Trainer};
use sfas_core::{Error, Model32};

const GRAD_TOL: f64 = 1e-4;
const ELEMENTWISE_TOL: f64 = 1e-6;
const LOSS_TOL: f64 = 1e-9;
const ROUTING_LOOPS: usize = 100;
const OTSU_IMAGES: u64 = 100;
const ROUND_TRIP_SAMPLES: usize = 1000;

// Synthetic benchmark settings; see the README for why these differ from
// the library defaults.
const BENCH_ROTATION_DEG: f64 = 0.0;
const BENCH_SHIFT: f64 = 8.0;
const BENCH_BATCH: usize = 8;
const BENCH_LR: f64 = 1e-3;
const CONVERGENCE_K: usize = 20;
const CONVERGENCE_LOOPS: usize = 2000;
const CONVERGENCE_DROP: f64 = 0.5;
const ABLATION_KS: [usize; 2] = [5, 10];
const ABLATION_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const ABLATION_LOOPS: usize = 300;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn gradients() -> Result<Vec<Verdict>> {
    let mut worst_layer = (String::new(), 0.0f64);
    for (layer, checks) in common::layer_suite() {
        let w = common::worst(&checks);
        if w.rel_err >= worst_layer.1 {
            worst_layer = (format!("{layer} {}", w.name), w.rel_err);
        }
    }
    let elementwise = common::elementwise_suite().into_iter().map(|(_, e)| e).fold(0.0, f64::max);
    let attention = common::attention_suite().into_iter().map(|(_, e)| e).fold(0.0, f64::max);
    let seg = common::seg_composition(4);
    let rec = common::rec_composition(4);
    let (seg, rec) = (common::worst(&seg).rel_err, common::worst(&rec).rel_err);
    let pass = worst_layer.1 < GRAD_TOL && attention < GRAD_TOL && seg < GRAD_TOL && rec < GRAD_TOL && elementwise < ELEMENTWISE_TOL;
    Ok(vec![verdict(
        pass,
        format!(
            "worst layer {:.1e} ({}), attention {attention:.1e}, extractor+decoder {seg:.1e}, extractor+classifier {rec:.1e} (tol {GRAD_TOL:.0e}); elementwise {elementwise:.1e} (tol {ELEMENTWISE_TOL:.0e})",
            worst_layer.1, worst_layer.0
        ),
    )])
}

fn equations() -> Result<Vec<Verdict>> {
    let uniform = Tensor::<f64>::full(Shape::new(4, 10, 1, 1), 0.1);
    let l_r = recognition_loss(&uniform, &[0, 3, 7, 9])?;
    let zeros = Tensor::<f64>::zeros(Shape::new(2, 2, 80, 80));
    let mask: Vec<u8> = (0..2 * 6400).map(|i| (i % 7 == 0) as u8).collect();
    let l_s = segmentation_loss(&zeros, &mask)?;
    let alphas = [alpha(1)?, alpha(2)?, alpha(10)?];
    let pass = (l_r - 10f64.ln()).abs() <= LOSS_TOL && (l_s - 2f64.ln()).abs() <= LOSS_TOL && alphas == [0.0, 0.5, 0.9];
    Ok(vec![verdict(
        pass,
        format!("L_R - ln10 = {:.1e}, L_S - ln2 = {:.1e}, alpha(1,2,10) = {alphas:?}", l_r - 10f64.ln(), l_s - 2f64.ln()),
    )])
}

fn routing() -> Result<Vec<Verdict>> {
    let raw = generate_dataset(&GeneratorConfig { per_class_train: 12, per_class_test: 0, seed: 5, ..Default::default() })?;
    let split = few_shot_split(&raw, 2, 5)?;
    let cfg = TrainConfig { learning_rate: BENCH_LR, ..Default::default() };
    let mut trainer = Trainer::new(Model32::new(10, 5)?, &cfg)?;
    let mut unl = BatchSampler::new(split.unlabeled.iter().collect(), 4, 1)?;
    let mut lab = BatchSampler::new(split.labeled.iter().collect(), 4, 2)?;
    let mut violations = Vec::new();
    let (c0, d0) = (trainer.model.part_hash(Part::Classifier), trainer.model.part_hash(Part::Decoder));
    for _ in 0..ROUTING_LOOPS {
        let r = trainer.training_loop_step(unl.next_batch()?, lab.next_batch()?, true)?;
        let h = r.hashes.context("instrumented step without hashes")?;
        if h.classifier_before_phase1 != h.classifier_after_phase1 {
            violations.push(format!("loop {} phase 1 touched the classifier", r.t));
        }
        if h.decoder_before_phase2 != h.decoder_after_phase2 {
            violations.push(format!("loop {} phase 2 touched the decoder", r.t));
        }
    }
    // Both heads must still have trained, or the check above is vacuous.
    let moved = trainer.model.part_hash(Part::Classifier) != c0 && trainer.model.part_hash(Part::Decoder) != d0;
    Ok(vec![verdict(
        violations.is_empty() && moved,
        if violations.is_empty() {
            format!("{ROUTING_LOOPS} loops, heads unchanged by the other phase, both heads trained: {moved}")
        } else {
            violations.join("; ")
        },
    )])
}

fn shapes() -> Result<Vec<Verdict>> {
    let mut m = Model32::new(10, 0)?;
    let x = Tensor::<f32>::full(Shape::new(2, 1, 80, 80), 0.5);
    let blocks: Vec<usize> = m.extractor_trace(&x, BnMode::Train)?.iter().map(|t| t.shape().h).collect();
    let f = m.extractor_forward(&x, BnMode::Train)?;
    let ups: Vec<usize> = m
        .decoder_trace(&f, BnMode::Train)?
        .iter()
        .filter(|(n, _)| n.starts_with("up") && !n.contains('_'))
        .map(|(_, t)| t.shape().h)
        .collect();
    let logits = m.decoder_forward(&f, BnMode::Train)?.shape();
    let p = m.classifier_forward(&f, BnMode::Train)?;
    let simplex = (0..2).all(|n| {
        let row = p.item(n);
        row.iter().all(|&v| v >= 0.0) && (row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5
    });
    let pass = blocks == [40, 20, 10] && ups == [20, 40, 80] && logits == Shape::new(2, 2, 80, 80) && p.shape() == Shape::new(2, 10, 1, 1) && simplex;
    Ok(vec![verdict(
        pass,
        format!("extractor 80->{blocks:?}, decoder 10->{ups:?}, logits {logits:?}, probabilities {:?} on simplex: {simplex}", p.shape()),
    )])
}

fn bench_dataset() -> Result<RawDataset> {
    Ok(generate_dataset(&GeneratorConfig {
        per_class_train: 270,
        per_class_test: 30,
        jitter: PoseJitter { max_rotation_deg: BENCH_ROTATION_DEG, max_shift: BENCH_SHIFT, ..Default::default() },
        ..Default::default()
    })?)
}

fn bench_config(k: usize, seed: u64, seg: bool, loops: usize) -> TrainConfig {
    TrainConfig {
        batch_size: BENCH_BATCH,
        learning_rate: BENCH_LR,
        loops,
        k_labeled_per_class: k,
        seed,
        use_segmentation: seg,
        eval_every: 0,
        ..Default::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn synthetic() -> Result<Vec<Verdict>> {
    let raw = bench_dataset()?;
    let mut out = Vec::new();

    // (a) the recognition loss falls by half between the first and last tenth
    let split = few_shot_split(&raw, CONVERGENCE_K, 1)?;
    let run = train::<f32>(&bench_config(CONVERGENCE_K, 1, true, CONVERGENCE_LOOPS), &split)?;
    let tenth = CONVERGENCE_LOOPS / 10;
    let mean = |rows: &[sfas_core::train::HistoryRow]| rows.iter().map(|r| r.l_r).sum::<f64>() / rows.len() as f64;
    let (first, last) = (mean(&run.history[..tenth]), mean(&run.history[CONVERGENCE_LOOPS - tenth..]));
    let drop = 1.0 - last / first;
    out.push(verdict(
        drop >= CONVERGENCE_DROP,
        format!("(a) k={CONVERGENCE_K}, {CONVERGENCE_LOOPS} loops: mean L_R {first:.4} -> {last:.4}, drop {:.1}% (need >= {:.0}%)", 100.0 * drop, 100.0 * CONVERGENCE_DROP),
    ));

    // (b) the segmentation loss helps at small k; (c) its decoder beats the
    // classical baselines
    let mut ablation = Vec::new();
    let mut learned_iou = Vec::new();
    let mut cells = Vec::new();
    for k in ABLATION_KS {
        let (mut with, mut without) = (Vec::new(), Vec::new());
        for seed in ABLATION_SEEDS {
            let split = few_shot_split(&raw, k, seed)?;
            for (seg, accs) in [(true, &mut with), (false, &mut without)] {
                let mut model = train::<f32>(&bench_config(k, seed, seg, ABLATION_LOOPS), &split)?.model;
                let rep = evaluate(&mut model, &split.test, &split.class_names, 32)?;
                accs.push(rep.recognition.context("test split without labels")?.overall_accuracy);
                if seg {
                    learned_iou.push(rep.segmentation.context("test split without masks")?.iou);
                }
            }
        }
        let (mw, mo) = (median(with.clone()), median(without.clone()));
        ablation.push(mw > mo);
        cells.push(format!("k={k}: {mw:.3} vs {mo:.3} (with {with:.3?}, without {without:.3?})"));
    }
    out.push(verdict(
        ablation.iter().all(|&b| b),
        format!("(b) median test accuracy with vs without segmentation loss over seeds {ABLATION_SEEDS:?}: {}", cells.join("; ")),
    ));

    let canny = CannyParams::default();
    let gt: Vec<u8> = raw.test.iter().flat_map(|s| s.mask.clone().unwrap_or_default()).collect();
    let baseline = |method| -> Result<f64> {
        let pred: Vec<u8> = raw
            .test
            .iter()
            .map(|s| Ok(segment_chip(&s.image, method, &canny)?.0))
            .collect::<Result<Vec<_>, Error>>()?
            .concat();
        Ok(segmentation_report(&pred, &gt)?.iou)
    };
    let (otsu, canny_iou) = (baseline(SegMethod::Otsu)?, baseline(SegMethod::Canny)?);
    let learned = median(learned_iou);
    out.push(verdict(
        learned > otsu && learned > canny_iou,
        format!("(c) test IoU: otsu {otsu:.3}, canny {canny_iou:.3}, learned decoder (median of with-seg runs) {learned:.3}"),
    ));
    Ok(out)
}

/// Exhaustive between-class-variance search over the 255 cuts of a 256-bin
/// histogram, first maximum wins.
fn otsu_oracle(image: &[f64]) -> (usize, Vec<u8>) {
    let lo = image.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bins: Vec<usize> = image.iter().map(|&v| (((v - lo) * 256.0 / (hi - lo)) as usize).min(255)).collect();
    let n = image.len() as f64;
    let mut best = (0, f64::NEG_INFINITY);
    for cut in 0..255 {
        let (mut n0, mut s0, mut s1) = (0.0, 0.0, 0.0);
        for &b in &bins {
            if b <= cut {
                n0 += 1.0;
                s0 += b as f64;
            } else {
                s1 += b as f64;
            }
        }
        let n1 = n - n0;
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let var = (n0 / n) * (n1 / n) * (s0 / n0 - s1 / n1).powi(2);
        if var > best.1 {
            best = (cut, var);
        }
    }
    (best.0, bins.iter().map(|&b| u8::from(b > best.0)).collect())
}

fn otsu() -> Result<Vec<Verdict>> {
    let mut mismatches = Vec::new();
    for i in 0..OTSU_IMAGES {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let image: Vec<f64> = if i % 2 == 0 {
            render_chip(ShapeFamily::ALL[(i / 2 % 10) as usize], derive_seed(99, i), &PoseJitter::default()).image
        } else {
            let modes: Vec<f64> = (0..rng.random_range(1..4)).map(|_| rng.random_range(0.0..1.0)).collect();
            (0..6400).map(|_| modes[rng.random_range(0..modes.len())] + rng.random_range(-0.2..0.2)).collect()
        };
        let r = otsu_threshold(&image)?;
        let (cut, mask) = otsu_oracle(&image);
        if r.bin != Some(cut) || r.mask != mask {
            mismatches.push(format!("image {i}: {:?} vs oracle {cut}", r.bin));
        }
    }
    Ok(vec![verdict(
        mismatches.is_empty(),
        if mismatches.is_empty() { format!("{OTSU_IMAGES} images, chosen cut and mask identical to the exhaustive search") } else { mismatches.join("; ") },
    )])
}

fn sfas(args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_sfas")).args(args).output()?;
    ensure!(out.status.success(), "sfas {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn manifest(dir: &Path) -> Result<serde_json::Value> {
    Ok(serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?)
}

fn determinism() -> Result<Vec<Verdict>> {
    let dir = tempfile::tempdir()?;
    let data = dir.path().join("data.sfds");
    let p = |q: &Path| q.to_str().unwrap().to_string();
    sfas(&["generate", "--per-class-train", "20", "--per-class-test", "5", "--seed", "8", "--out", &p(&data)])?;
    let mut times = Vec::new();
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let start = Instant::now();
        sfas(&[
            "train", "--data", &p(&data), "--k-labeled", "5", "--seed", "3", "--loops", "40", "--batch-size", "8",
            "--lr", "1e-3", "--eval-every", "20", "--precision", "f32", "--out", &p(&out),
        ])?;
        times.push(start.elapsed().as_secs_f64());
        let m = manifest(&out)?;
        let bytes = std::fs::read(out.join("checkpoint.sfas"))?;
        hashes.push((m["checkpoint_sha256"].clone(), m["history_sha256"].clone(), bytes));
    }
    let same = hashes[0] == hashes[1];
    Ok(vec![verdict(
        same,
        format!(
            "checkpoint {} / history {} identical across runs: {same} ({:.1}s, {:.1}s)",
            hashes[0].0.as_str().unwrap_or("?").get(..12).unwrap_or("?"),
            hashes[0].1.as_str().unwrap_or("?").get(..12).unwrap_or("?"),
            times[0],
            times[1]
        ),
    )])
}

fn round_trip() -> Result<Vec<Verdict>> {
    let per_class = ROUND_TRIP_SAMPLES / 20;
    let raw = generate_dataset(&GeneratorConfig { per_class_train: per_class, per_class_test: per_class, seed: 4, ..Default::default() })?;
    ensure!(raw.train.len() + raw.test.len() == ROUND_TRIP_SAMPLES);
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("d.sfds");
    save_dataset(&raw, &path)?;
    let equal = load_dataset(&path)? == raw;
    let mut bytes = Vec::new();
    write_dataset(&raw, &mut bytes)?;
    let cuts = [bytes.len() / 3, bytes.len() - 7];
    let offsets: Vec<Option<u64>> = cuts
        .iter()
        .map(|&cut| match read_dataset(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) if offset <= cut as u64 => Some(offset),
            _ => None,
        })
        .collect();
    let detected = offsets.iter().all(Option::is_some);
    Ok(vec![verdict(
        equal && detected,
        format!("{ROUND_TRIP_SAMPLES} samples deep-equal after save/load: {equal}; truncations at {cuts:?} reported at offsets {offsets:?}"),
    )])
}

type Criterion = fn() -> Result<Vec<Verdict>>;

const CRITERIA: [(&str, Criterion); 8] = [
    ("gradients", gradients),
    ("equations", equations),
    ("routing", routing),
    ("shapes", shapes),
    ("synthetic", synthetic),
    ("otsu", otsu),
    ("determinism", determinism),
    ("round-trip", round_trip),
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let verdicts = run().unwrap_or_else(|e| vec![verdict(false, format!("error: {e:#}"))]);
        let secs = start.elapsed().as_secs_f64();
        for v in verdicts {
            println!("{} {name}: {} [{secs:.1}s]", if v.pass { "PASS" } else { "FAIL" }, v.detail);
            failed += usize::from(!v.pass);
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
