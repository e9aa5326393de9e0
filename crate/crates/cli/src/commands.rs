use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use xbound::checkpoint;
use xbound::data::{
    augment, load_dataset, load_image_png, load_mask_png, mark_points, overlay, read_mask_png, read_split,
    save_image_png, save_mask_png, synth_lesion, write_dataset,
};
use xbound::keypoints::generate_keypoint_map;
use xbound::metrics::{evaluate, MetricSummary};
use xbound::objectives::build_label_pyramid;
use xbound::train::{train_step, TrainItem};
use xbound::{AdamW, BinaryMask, MetricReport, ModelConfig, Sample, XBoundFormer};

use crate::config::{usage, RunConfig, SweepKind};

pub const REPORT: &str = "report.json";
pub const LOSS_LOG: &str = "loss.csv";
pub const BEST: &str = "best.ckpt";
pub const LAST: &str = "last.ckpt";
pub const MANIFEST: &str = "manifest.json";

const SHUFFLE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| usage("no output directory (use --out)"))?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn data_root(cfg: &RunConfig) -> Result<&Path> {
    cfg.data.as_deref().ok_or_else(|| usage("no dataset (use --data)"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    variant: Option<&'a str>,
    version: &'a str,
    config: &'a RunConfig,
    model: Option<ModelConfig>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    outcome: serde_json::Value,
}

fn write_manifest(
    out: &Path,
    command: &str,
    variant: Option<&str>,
    cfg: &RunConfig,
    outcome: serde_json::Value,
) -> Result<()> {
    let manifest = Manifest {
        command,
        variant,
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        model: cfg.model().ok(),
        outcome,
    };
    write_json(&out.join(MANIFEST), &manifest)
}

/// PNG stems of a directory, sorted.
fn png_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// `<root>/<sub>` when it exists, otherwise `root` itself.
fn subdir_or_root(root: &Path, sub: &str) -> PathBuf {
    let nested = root.join(sub);
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let samples = (0..cfg.synth_count as u64)
        .map(|i| synth_lesion(&cfg.synth_params(cfg.seed + i)).map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    write_dataset(&out, &samples)?;
    let ids: String = samples.iter().map(|s| format!("{}\n", s.id)).collect();
    std::fs::write(out.join("all.txt"), ids)?;
    write_manifest(&out, "synth", None, cfg, json!({ "samples": samples.len() }))?;
    eprintln!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

pub fn keypoints(cfg: &RunConfig) -> Result<()> {
    let root = data_root(cfg)?;
    let out = out_dir(cfg)?;
    let masks = subdir_or_root(root, "masks");
    let images = root.join("images");
    let mut total = 0;
    let ids = png_ids(&masks)?;
    for id in &ids {
        let mask = read_mask_png(masks.join(format!("{id}.png")))?;
        let map =
            generate_keypoint_map(&mask, cfg.keypoint_radius, cfg.keypoint_k).map_err(|e| usage(e.to_string()))?;
        let points = map.positions();
        total += points.len();
        xbound::data::save_gray_png(&map.to_u8(), out.join("keypoints").join(format!("{id}.png")))?;
        let image_path = images.join(format!("{id}.png"));
        let (h, w) = mask.dims();
        let base = if image_path.is_file() && h == w {
            load_image_png(&image_path, h)?
        } else {
            let gray = mask.to_f64();
            ndarray::Array3::from_shape_fn((3, h, w), |(_, r, c)| gray[[r, c]])
        };
        save_image_png(
            &mark_points(&base, &points),
            out.join("overlays").join(format!("{id}.png")),
        )?;
    }
    write_manifest(
        &out,
        "keypoints",
        None,
        cfg,
        json!({ "masks": ids.len(), "keypoints": total }),
    )?;
    eprintln!("{} masks, {total} key points", ids.len());
    Ok(())
}

fn load_model(cfg: &RunConfig, out: &Path) -> Result<XBoundFormer> {
    let path = cfg.checkpoint.clone().unwrap_or_else(|| out.join(BEST));
    let expected = cfg.model()?;
    checkpoint::load(&path, &expected).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn select(samples: &[Sample], split: Option<&Path>) -> Result<Vec<Sample>> {
    let Some(path) = split else {
        return Ok(samples.to_vec());
    };
    let ids = read_split(path)?;
    ids.iter()
        .map(|id| {
            samples
                .iter()
                .find(|s| &s.id == id)
                .cloned()
                .ok_or_else(|| anyhow::anyhow!("split {} names unknown sample {id}", path.display()))
        })
        .collect()
}

fn load_splits(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let root = data_root(cfg)?;
    let (samples, report) = load_dataset(root, cfg.input_size)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if samples.is_empty() {
        bail!("no image/mask pairs under {}", root.display());
    }
    let train = select(&samples, cfg.train_split.as_deref())?;
    let val = match &cfg.val_split {
        Some(p) => select(&samples, Some(p))?,
        None => train.clone(),
    };
    if train.is_empty() || val.is_empty() {
        bail!("empty training or validation split");
    }
    Ok((train, val))
}

fn report_for(model: &XBoundFormer, samples: &[Sample], threshold: f64) -> Result<MetricReport> {
    let per_sample = samples
        .iter()
        .map(|s| Ok(evaluate(s.id.clone(), &model.predict(&s.image, threshold)?, &s.mask)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_samples(per_sample))
}

fn mean_dice(report: &MetricReport) -> f64 {
    report.mean.dice.unwrap_or(0.0)
}

/// Trains one configuration under `out` and returns the validation report of the
/// best checkpoint.
pub fn train_run(cfg: &RunConfig, out: &Path, variant: Option<&str>) -> Result<MetricReport> {
    cfg.validate_training()?;
    std::fs::create_dir_all(out)?;
    write_manifest(out, "train", variant, cfg, serde_json::Value::Null)?;
    let (train, val) = load_splits(cfg)?;
    let model_cfg = cfg.model()?;
    let weights = cfg.loss_weights()?;
    let mut model = XBoundFormer::new(model_cfg, cfg.seed)?;
    let mut opt = AdamW::new(&model.params, cfg.optimizer());
    let base_labels = train
        .iter()
        .map(|s| build_label_pyramid(&s.mask, cfg.keypoint_radius, cfg.keypoint_k))
        .collect::<xbound::Result<Vec<_>>>()?;

    let mut log = BufWriter::new(File::create(out.join(LOSS_LOG))?);
    writeln!(log, "step,seg_loss,map_loss,total")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    let mut best: Option<(f64, usize)> = None;
    let epochs = if cfg.epochs == 0 { usize::MAX } else { cfg.epochs };
    let capped = |step: usize| cfg.max_steps > 0 && step >= cfg.max_steps;

    'epochs: for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (images, labels): (Vec<_>, Vec<_>) = if cfg.augment {
                chunk
                    .iter()
                    .map(|&i| {
                        let s = augment(&train[i], rng.random());
                        let l = build_label_pyramid(&s.mask, cfg.keypoint_radius, cfg.keypoint_k)?;
                        Ok((s.image, l))
                    })
                    .collect::<xbound::Result<Vec<_>>>()?
                    .into_iter()
                    .unzip()
            } else {
                chunk
                    .iter()
                    .map(|&i| (train[i].image.clone(), base_labels[i].clone()))
                    .unzip()
            };
            let batch: Vec<TrainItem> = images
                .iter()
                .zip(&labels)
                .map(|(image, labels)| TrainItem { image, labels })
                .collect();
            let loss =
                train_step(&mut model, &mut opt, &batch, weights).with_context(|| format!("training step {step}"))?;
            writeln!(log, "{step},{},{},{}", loss.seg, loss.map, loss.total)?;
            if cfg.log_every > 0 && step.is_multiple_of(cfg.log_every) {
                eprintln!(
                    "step {step} seg {:.4} map {:.4} total {:.4}",
                    loss.seg, loss.map, loss.total
                );
            }
            step += 1;
            if capped(step) {
                break;
            }
        }
        let last_epoch = capped(step) || epoch + 1 == epochs;
        if (epoch + 1) % cfg.val_every == 0 || last_epoch {
            let dice = mean_dice(&report_for(&model, &val, cfg.threshold)?);
            if best.is_none_or(|(b, _)| dice > b) {
                best = Some((dice, step));
                checkpoint::save(&model, out.join(BEST))?;
            }
            eprintln!("epoch {} step {step} validation dice {dice:.2}", epoch + 1);
        }
        if last_epoch {
            break 'epochs;
        }
    }
    log.flush()?;
    checkpoint::save(&model, out.join(LAST))?;

    let best_model = checkpoint::load(out.join(BEST), &model.config)?;
    let report = report_for(&best_model, &val, cfg.threshold)?;
    write_json(&out.join(REPORT), &report)?;
    let (best_dice, best_step) = best.unwrap_or((0.0, 0));
    write_manifest(
        out,
        "train",
        variant,
        cfg,
        json!({ "steps": step, "best_step": best_step, "best_validation_dice": best_dice,
                "parameters": model.params.num_scalars() }),
    )?;
    Ok(report)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let report = train_run(cfg, &out, None)?;
    print_summary(&report.mean);
    Ok(())
}

fn print_summary(mean: &MetricSummary) {
    let f = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.2}"));
    println!(
        "Dice {}  IoU {}  ASSD {}  HD95 {}",
        f(mean.dice),
        f(mean.iou),
        f(mean.assd),
        f(mean.hd95)
    );
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let root = data_root(cfg)?;
    let report = match &cfg.predictions {
        Some(pred_dir) => {
            let masks = subdir_or_root(root, "masks");
            let per_sample = png_ids(&masks)?
                .into_iter()
                .map(|id| {
                    let gt = load_mask_png(masks.join(format!("{id}.png")), cfg.input_size)?;
                    let pred_path = pred_dir.join(format!("{id}.png"));
                    if !pred_path.is_file() {
                        bail!("no prediction for {id} in {}", pred_dir.display());
                    }
                    let pred = load_mask_png(pred_path, cfg.input_size)?;
                    Ok(evaluate(id, &pred, &gt)?)
                })
                .collect::<Result<Vec<_>>>()?;
            MetricReport::from_samples(per_sample)
        }
        None => {
            let model = load_model(cfg, &out)?;
            let (_, val) = load_splits(cfg)?;
            report_for(&model, &val, cfg.threshold)?
        }
    };
    write_json(&out.join(REPORT), &report)?;
    write_manifest(&out, "eval", None, cfg, json!({ "samples": report.samples.len() }))?;
    print_summary(&report.mean);
    Ok(())
}

pub fn predict(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let root = data_root(cfg)?;
    let model = load_model(cfg, &out)?;
    let images = subdir_or_root(root, "images");
    let ids = png_ids(&images)?;
    for id in &ids {
        let image = load_image_png(images.join(format!("{id}.png")), cfg.input_size)?;
        let mask: BinaryMask = model.predict(&image, cfg.threshold)?;
        save_mask_png(&mask, out.join("predictions").join(format!("{id}.png")))?;
        save_image_png(&overlay(&image, &mask), out.join("overlays").join(format!("{id}.png")))?;
    }
    write_manifest(&out, "predict", None, cfg, json!({ "images": ids.len() }))?;
    eprintln!("predicted {} masks", ids.len());
    Ok(())
}

/// Named configurations of a sweep.
pub fn sweep_variants(cfg: &RunConfig) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    match cfg.sweep {
        SweepKind::Ablation => {
            let (n_im, n_ex) = (cfg.n_im.max(1), cfg.n_ex.max(1));
            vec![
                (
                    "baseline".into(),
                    with(&|c| (c.n_im, c.n_ex, c.x_bound) = (0, 0, false)),
                ),
                ("im".into(), with(&|c| (c.n_im, c.n_ex, c.x_bound) = (n_im, 0, false))),
                (
                    "im_ex".into(),
                    with(&|c| (c.n_im, c.n_ex, c.x_bound) = (n_im, n_ex, false)),
                ),
                (
                    "full".into(),
                    with(&|c| (c.n_im, c.n_ex, c.x_bound) = (n_im, n_ex, true)),
                ),
            ]
        }
        SweepKind::Lambda => cfg
            .sweep_lambdas
            .iter()
            .map(|&l| (format!("lambda_{l}"), with(&|c| c.lambda = l)))
            .collect(),
        SweepKind::Blocks => cfg
            .sweep_blocks
            .iter()
            .map(|&(i, e)| {
                let name = format!("im{i}_ex{e}");
                (
                    name,
                    with(&|c| (c.n_im, c.n_ex, c.x_bound) = (i, e, c.x_bound && e > 0)),
                )
            })
            .collect(),
    }
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let variants = sweep_variants(cfg);
    if variants.is_empty() {
        return Err(usage("sweep grid is empty"));
    }
    for (_, c) in &variants {
        c.validate_training()?;
    }
    write_manifest(&out, "sweep", None, cfg, json!({ "variants": variants.len() }))?;
    let mut rows = Vec::new();
    for (name, c) in &variants {
        eprintln!("== {name}");
        let report = train_run(c, &out.join(name), Some(name))?;
        rows.push(json!({
            "variant": name,
            "n_im": c.n_im,
            "n_ex": c.n_ex,
            "x_bound": c.x_bound,
            "lambda": c.lambda,
            "mean": report.mean,
            "undefined_count": report.undefined_count,
        }));
    }
    write_json(&out.join("sweep.json"), &rows)?;
    for row in &rows {
        println!("{}  dice {}", row["variant"], row["mean"]["dice"]);
    }
    Ok(())
}
