use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use gbh::config::{Profile, RunConfig};
use gbh::data::{
    adaptive_anchors, anchor_coverage, letterboxed_shapes, list_image_ids, load_gray, load_sample, load_split,
    load_subset, mixed_spec, preprocess_crop, scratch_heavy_spec, synth_corpus, write_dataset, write_sample,
    write_split, DatasetSplit, Subset, KMEANS_MAX_ITERATIONS,
};
use gbh::detect::DetectionRecord;
use gbh::error::Error;
use gbh::infer::{evaluate_model, forward_heads, predict};
use gbh::model::checkpoint;
use gbh::model::{Architecture, Model, ModelVariant};
use gbh::train::{EpochStats, Trainer};
use gbh::Result;
use image::{GrayImage, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::draw;

/// Command result; `Partial(n)` means `n` items failed but the run finished.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Done,
    Partial(usize),
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn data_root(cfg: &RunConfig) -> Result<&Path> {
    let root = cfg.data.as_deref().ok_or_else(|| config_err("`data` (dataset root) is not set"))?;
    if !root.is_dir() {
        return Err(config_err(format!("dataset root {} does not exist", root.display())));
    }
    Ok(root)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_err(format!("{what} {} does not exist", path.display())))
    }
}

pub fn preprocess(raw: &Path, out: &Path, crop: u32, seed: u64, train_fraction: f64) -> Result<Outcome> {
    if !raw.is_dir() {
        return Err(config_err(format!("raw directory {} does not exist", raw.display())));
    }
    if !(0.0..=1.0).contains(&train_fraction) || crop == 0 {
        return Err(config_err("train_fraction must be in [0, 1] and crop positive"));
    }
    if out.exists() && fs::canonicalize(out)? == fs::canonicalize(raw)? {
        return Err(config_err("output directory must differ from the raw directory"));
    }
    ensure_dir(out)?;
    let mut failed = Vec::new();
    // crops grouped by the raw image they came from, so a split never
    // separates crops of one panel
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let ids = list_image_ids(raw)?;
    for id in &ids {
        let sample = match load_sample(raw, id) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("{id}: {e}");
                failed.push(id.clone());
                continue;
            }
        };
        let crops = preprocess_crop(&sample, crop);
        if crops.is_empty() {
            log::info!("{id}: no crop (no defects or not larger than {crop}px)");
        }
        for c in &crops {
            write_sample(out, c)?;
        }
        groups.insert(id.clone(), crops.into_iter().map(|c| c.id).collect());
    }
    let mut order: Vec<&String> = groups.keys().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total: usize = groups.values().map(Vec::len).sum();
    let target = (total as f64 * train_fraction).round() as usize;
    let mut split = DatasetSplit::default();
    for raw_id in order {
        let members = &groups[raw_id];
        let dst = if split.train.len() < target { &mut split.train } else { &mut split.val };
        dst.extend(members.iter().cloned());
    }
    split.train.sort();
    split.val.sort();
    write_split(out, &split)?;
    println!(
        "raw images {}, crops {}, train {}, val {}, failed {}",
        ids.len(),
        total,
        split.train.len(),
        split.val.len(),
        failed.len()
    );
    if failed.is_empty() {
        Ok(Outcome::Done)
    } else {
        eprintln!("failed: {}", failed.join(", "));
        Ok(Outcome::Partial(failed.len()))
    }
}

fn fitted_variant(cfg: &RunConfig, train: &[gbh::data::AnnotatedImage]) -> ModelVariant {
    let v = cfg.model_variant();
    if !cfg.auto_anchors {
        return v;
    }
    let shapes = letterboxed_shapes(train, v.input_size as u32);
    let fit = adaptive_anchors(&shapes, v.head_strides(), KMEANS_MAX_ITERATIONS);
    if fit.fallback {
        v
    } else {
        v.with_anchors(fit.anchors)
    }
}

pub fn anchors(cfg: &RunConfig) -> Result<Outcome> {
    let root = data_root(cfg)?;
    let train = load_subset(root, Subset::Train)?;
    let v = cfg.model_variant();
    let shapes = letterboxed_shapes(&train, v.input_size as u32);
    let fit = adaptive_anchors(&shapes, v.head_strides(), KMEANS_MAX_ITERATIONS);
    println!(
        "{} boxes, {} heads, {} iterations{}",
        shapes.len(),
        fit.anchors.len(),
        fit.iterations,
        if fit.fallback { " (fallback constants)" } else { "" }
    );
    for (stride, set) in v.head_strides().iter().zip(&fit.anchors) {
        let s: Vec<String> = set.iter().map(|a| format!("{:.1}x{:.1}", a[0], a[1])).collect();
        println!("stride {stride:>2}: {}", s.join("  "));
    }
    println!("coverage at ratio gate 4: {:.4}", anchor_coverage(&shapes, &fit.anchors, 4.0));
    Ok(Outcome::Done)
}

#[allow(clippy::too_many_arguments)]
pub fn synth(out: &Path, train: usize, val: usize, size: u32, scale: f64, seed: u64, mix: &str) -> Result<Outcome> {
    let spec_for = match mix {
        "mixed" => mixed_spec::<ChaCha8Rng>,
        "scratch-heavy" => scratch_heavy_spec::<ChaCha8Rng>,
        _ => return Err(config_err(format!("unknown mix `{mix}` (expected mixed or scratch-heavy)"))),
    };
    if !(scale > 0.0) || size < 32 {
        return Err(config_err("scale must be positive and size at least 32"));
    }
    let t = synth_corpus(seed, "synth_", 0, train, size, |r| spec_for(r, scale))?;
    let v = synth_corpus(seed, "synth_", train, val, size, |r| spec_for(r, scale))?;
    write_dataset(out, &t, &v)?;
    let boxes: usize = t.iter().chain(&v).map(|s| s.boxes.len()).sum();
    println!("wrote {} train + {} val images ({boxes} boxes) to {}", t.len(), v.len(), out.display());
    Ok(Outcome::Done)
}

fn append_line(file: &mut File, line: &str) -> Result<()> {
    writeln!(file, "{line}")?;
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<Outcome> {
    // everything is checked before the first epoch
    let root = data_root(cfg)?;
    let split = load_split(root)?;
    if split.train.is_empty() {
        return Err(config_err("training split is empty"));
    }
    if let Some(r) = &cfg.resume {
        require_file(r, "resume checkpoint")?;
    }
    ensure_parent(&cfg.checkpoint)?;
    ensure_dir(&cfg.out_dir)?;

    let train = load_subset(root, Subset::Train)?;
    let mut trainer = match &cfg.resume {
        Some(r) => {
            let ck = checkpoint::load(r, Some(&cfg.model_variant()))?;
            Trainer::resume(ck, cfg.train_options())?
        }
        None => Trainer::new(fitted_variant(cfg, &train), cfg.train_options())?,
    };
    let resumed = trainer.epoch > 0;
    let open = |name: &str, header: &str| -> Result<File> {
        let path = cfg.out_dir.join(name);
        let mut f = OpenOptions::new()
            .create(true)
            .append(resumed)
            .write(true)
            .truncate(!resumed)
            .open(path)?;
        if !resumed {
            append_line(&mut f, header)?;
        }
        Ok(f)
    };
    let mut losses = open("losses.csv", "epoch,train_loss,box,obj,cls,val_loss")?;
    let mut pr = open("train_pr.csv", "epoch,precision,recall,mAP")?;
    println!(
        "training {} ({} params) on {} images from epoch {} to {}",
        trainer.model.variant.arch,
        trainer.model.count_params(),
        train.len(),
        trainer.epoch,
        cfg.epochs
    );
    let t0 = Instant::now();
    trainer.fit(&train, |t, s: &EpochStats| {
        append_line(
            &mut losses,
            &format!("{},{:.8},{:.8},{:.8},{:.8},", s.epoch, s.loss, s.box_, s.obj, s.cls),
        )?;
        let mut msg = format!("epoch {:>4} loss {:.5}", s.epoch, s.loss);
        if cfg.eval_every > 0 && s.epoch % cfg.eval_every == 0 {
            let r = evaluate_model(&t.model, &train, cfg.conf, cfg.nms_iou, cfg.match_iou)?;
            append_line(&mut pr, &format!("{},{:.6},{:.6},{:.6}", s.epoch, r.precision, r.recall, r.map))?;
            let _ = write!(msg, "  P {:.3} R {:.3} mAP {:.3}", r.precision, r.recall, r.map);
        }
        if cfg.save_every > 0 && s.epoch % cfg.save_every == 0 {
            t.save(&cfg.checkpoint)?;
        }
        println!("{msg}  ({:.1}s)", t0.elapsed().as_secs_f64());
        Ok(())
    })?;
    trainer.save(&cfg.checkpoint)?;
    println!("saved {}", cfg.checkpoint.display());

    // the validation split is read only now, after the last epoch
    let val = load_subset(root, Subset::Val)?;
    if !val.is_empty() {
        let vl = trainer.eval_loss(&val)?;
        append_line(&mut losses, &format!("final,,,,,{:.8}", vl.total))?;
        let report = evaluate_model(&trainer.model, &val, cfg.conf, cfg.nms_iou, cfg.match_iou)?;
        fs::write(cfg.out_dir.join("val_report.csv"), report.to_csv())?;
        fs::write(cfg.out_dir.join("val_pr_curves.csv"), report.pr_curves_csv())?;
        println!("validation loss {:.5}\n{}", vl.total, report.to_table());
    }
    Ok(Outcome::Done)
}

pub fn eval(cfg: &RunConfig, split: &str) -> Result<Outcome> {
    let subset: Subset = split.parse()?;
    let root = data_root(cfg)?;
    require_file(&cfg.checkpoint, "checkpoint")?;
    ensure_dir(&cfg.out_dir)?;
    let ck = checkpoint::load(&cfg.checkpoint, Some(&cfg.model_variant()))?;
    let samples = load_subset(root, subset)?;
    let report = evaluate_model(&ck.model, &samples, cfg.conf, cfg.nms_iou, cfg.match_iou)?;
    fs::write(cfg.out_dir.join(format!("eval_{split}.csv")), report.to_csv())?;
    fs::write(cfg.out_dir.join(format!("eval_{split}_pr_curves.csv")), report.pr_curves_csv())?;
    print!("{}", report.to_table());
    Ok(Outcome::Done)
}

pub fn detect(cfg: &RunConfig, images: &[std::path::PathBuf], annotate: Option<&Path>) -> Result<Outcome> {
    require_file(&cfg.checkpoint, "checkpoint")?;
    if let Some(dir) = annotate {
        ensure_dir(dir)?;
    }
    let model = checkpoint::load(&cfg.checkpoint, None)?.model;
    let mut failed = 0;
    for path in images {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let t0 = Instant::now();
        let img = match load_gray(path) {
            Ok(i) => i,
            Err(e) => {
                eprintln!("{e}");
                failed += 1;
                continue;
            }
        };
        let dets = predict(&model, &[&img], cfg.conf, cfg.nms_iou)?.remove(0);
        let secs = t0.elapsed().as_secs_f64();
        for d in &dets {
            let rec = DetectionRecord {
                image: stem.clone(),
                class_name: gbh::data::CLASSES.get(d.class).copied().unwrap_or("unknown").to_string(),
                confidence: d.confidence,
                bbox: d.bbox,
            };
            println!("{rec}");
        }
        println!("# time {} {:.4}s", path.display(), secs);
        if let Some(dir) = annotate {
            let out = dir.join(format!("{stem}.det.png"));
            draw::annotate(&img, &dets).save(&out).map_err(|e| Error::Image {
                path: out.clone(),
                msg: e.to_string(),
            })?;
        }
    }
    if failed > 0 && failed == images.len() {
        Ok(Outcome::Partial(failed))
    } else {
        Ok(Outcome::Done)
    }
}

fn variant_for(name: &str, profile: &str, input_size: Option<usize>) -> Result<ModelVariant> {
    let arch: Architecture = name.parse().map_err(|e: Error| config_err(e.to_string()))?;
    let v = match profile.parse::<Profile>()? {
        Profile::Full => ModelVariant::new(arch),
        Profile::Tiny => ModelVariant::tiny(arch),
    };
    let v = match input_size {
        Some(s) => v.with_input_size(s),
        None => v,
    };
    v.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(v)
}

/// One benchmark row.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub variant: String,
    pub params: usize,
    pub modules: usize,
    pub gflops: f64,
    pub median_latency: f64,
}

/// Median single-image forward latency over `reps` runs (after one warm-up).
pub fn bench_rows(variants: &[String], profile: &str, input_size: Option<usize>, reps: usize) -> Result<Vec<BenchRow>> {
    let parsed = variants
        .iter()
        .map(|n| variant_for(n, profile, input_size))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for v in parsed {
        let size = v.input_size as u32;
        let model = Model::new(v, 0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = GrayImage::from_fn(size, size, |_, _| Luma([rng.gen()]));
        forward_heads(&model, &[&img])?;
        let mut times: Vec<f64> = (0..reps.max(1))
            .map(|_| {
                let t0 = Instant::now();
                forward_heads(&model, &[&img]).map(|_| t0.elapsed().as_secs_f64())
            })
            .collect::<Result<_>>()?;
        times.sort_by(f64::total_cmp);
        let n = times.len();
        let median = if n % 2 == 1 { times[n / 2] } else { (times[n / 2 - 1] + times[n / 2]) / 2.0 };
        rows.push(BenchRow {
            variant: model.variant.arch.to_string(),
            params: model.count_params(),
            modules: model.count_modules(),
            gflops: model.count_flops(size as usize) as f64 / 1e9,
            median_latency: median,
        });
    }
    Ok(rows)
}

pub fn bench(variants: &[String], profile: &str, input_size: Option<usize>, reps: usize, csv: Option<&Path>) -> Result<Outcome> {
    if let Some(p) = csv {
        ensure_parent(p)?;
    }
    let rows = bench_rows(variants, profile, input_size, reps)?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    println!(
        "host: {} {}, {threads} hardware threads (forward runs single-threaded); {reps} reps, median",
        std::env::consts::OS,
        std::env::consts::ARCH
    );
    println!("{:<10} {:>10} {:>8} {:>9} {:>12}", "variant", "params", "modules", "GFLOPs", "latency (s)");
    let mut text = String::from("variant,params,modules,gflops,median_latency_s\n");
    for r in &rows {
        println!(
            "{:<10} {:>10} {:>8} {:>9.2} {:>12.4}",
            r.variant, r.params, r.modules, r.gflops, r.median_latency
        );
        let _ = writeln!(
            text,
            "{},{},{},{:.4},{:.6}",
            r.variant, r.params, r.modules, r.gflops, r.median_latency
        );
    }
    if let Some(p) = csv {
        fs::write(p, text)?;
    }
    Ok(Outcome::Done)
}

pub fn param_count(variant: &str, profile: &str, input_size: Option<usize>) -> Result<Outcome> {
    let v = variant_for(variant, profile, input_size)?;
    let size = v.input_size;
    let model = Model::new(v, 0)?;
    println!(
        "{} params {} modules {} GFLOPs@{size} {:.2}",
        model.variant.arch,
        model.count_params(),
        model.count_modules(),
        model.count_flops(size) as f64 / 1e9
    );
    Ok(Outcome::Done)
}
