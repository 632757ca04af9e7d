use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use contour_saliency::checkpoint;
use contour_saliency::data::augment::{resize_image, resize_mask};
use contour_saliency::data::{pnm, Dataset, DatasetSpec};
use contour_saliency::gradcheck::{model_check, primitive_suite, CheckRow, TOLERANCE};
use contour_saliency::loss::LossWeights;
use contour_saliency::maps::Plane;
use contour_saliency::metrics::{evaluate, MetricsConfig};
use contour_saliency::model::Network;
use contour_saliency::morphology::{contour_weight_map, WeightMapConfig};
use contour_saliency::trainer::{history_csv, loss_csv, train, TrainConfig};
use contour_saliency::Tensor;

use crate::args::{self, Cli, Command, Common, SplitArg};
use crate::config;
use crate::UsageError;

pub fn run(cli: Cli, resolved: &[(String, String)]) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        ensure!(n > 0, UsageError("--threads must be positive".into()));
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(a, resolved),
        Command::Train(a) => train_cmd(a, resolved),
        Command::Eval(a) => eval(a, resolved),
        Command::Infer(a) => infer(a, resolved),
        Command::Weightmap(a) => weightmap(a, resolved),
        Command::Attn(a) => attn(a, resolved),
        Command::GradCheck(a) => grad_check(a, resolved),
    }
}

/// Creates the output directory, refusing to write into a nonempty one
/// unless forced. Records the resolved configuration inside it.
fn prepare_out(out: &Path, force: bool, resolved: &[(String, String)]) -> Result<()> {
    if out.exists() {
        ensure!(out.is_dir(), UsageError(format!("{} is not a directory", out.display())));
        let nonempty = fs::read_dir(out)?.next().is_some();
        if nonempty && !force {
            bail!(UsageError(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), config::render(resolved))?;
    Ok(())
}

fn prepare(common: &Common, resolved: &[(String, String)]) -> Result<()> {
    prepare_out(&common.out, common.force, resolved)
}

fn weight_map_config(a: &args::WeightMapArgs) -> WeightMapConfig {
    WeightMapConfig {
        k: a.k,
        se_size: a.se_size,
        gauss_size: a.gauss_size,
        gauss_sigma: a.gauss_sigma,
    }
}

fn metrics_config(beta_sq: f64, band_radius: usize) -> MetricsConfig {
    MetricsConfig {
        beta_sq,
        boundary_band_radius: band_radius,
        ..Default::default()
    }
}

fn gen_data(a: args::GenData, resolved: &[(String, String)]) -> Result<ExitCode> {
    let spec = DatasetSpec {
        count: a.count,
        test_count: a.test_count.unwrap_or(a.count / 6),
        base_size: a.base_size,
        crop_size: a.crop_size,
        seed: a.seed,
    };
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    prepare(&a.common, resolved)?;
    let data = Dataset::generate(&spec)?;
    data.write(&a.common.out)?;
    println!(
        "wrote {} scenes ({} train, {} test) to {}",
        spec.count,
        data.train.len(),
        data.test.len(),
        a.common.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(a: args::Train, resolved: &[(String, String)]) -> Result<ExitCode> {
    let model = a.model.config();
    let cfg = TrainConfig {
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        encoder_lr_scale: a.encoder_lr_scale,
        batch_size: a.batch_size,
        epochs: a.epochs,
        lr_step_epochs: a.lr_step_epochs,
        lr_decay: if a.steep_lr_decay { 0.05 } else { a.lr_decay },
        seed: a.seed,
        ablation: a.ablation,
        loss_weights: a.loss_weights.map(|per_level| LossWeights {
            per_level,
            final_p: a.final_weight,
        }),
        weight_map: weight_map_config(&a.weight_map),
        metrics: metrics_config(a.beta_sq, a.band_radius),
        base_size: a.base_size,
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    cfg.weights_for(model.levels).map_err(|e| UsageError(e.to_string()))?;
    let data = Dataset::read(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let out = &a.common.out;
    prepare(&a.common, resolved)?;

    let mut rows = Vec::new();
    let outcome = train::<f32>(&model, &data, &cfg, |r| {
        println!(
            "epoch {:>3}/{} lr={:.3e} loss={:.4} max_fbeta={:.4} mae={:.4} boundary_mae={:.4}",
            r.epoch, cfg.epochs, r.lr, r.loss, r.max_fbeta, r.mae, r.boundary_mae
        );
        rows.push(r.clone());
        // keep a readable history while long runs progress
        let _ = fs::write(out.join("history.csv"), history_csv(&rows));
    })?;
    fs::write(out.join("history.csv"), history_csv(&outcome.history))?;
    fs::write(out.join("losses.csv"), loss_csv(&outcome.history, model.levels))?;
    checkpoint::save(&out.join("best.cskt"), &outcome.best)?;
    checkpoint::save(&out.join("last.cskt"), &outcome.last)?;
    println!(
        "best max_fbeta {:.4} at epoch {}; checkpoints in {}",
        outcome.history[outcome.best_epoch - 1].max_fbeta,
        outcome.best_epoch,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// `(id, split)` rows of a dataset manifest.
fn manifest(dir: &Path) -> Result<Vec<(String, String)>> {
    let path = dir.join("manifest.csv");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let mut fields = line.split(',');
        match (fields.next(), fields.next()) {
            (Some(id), Some(split)) => rows.push((id.to_string(), split.to_string())),
            _ => bail!("malformed manifest line `{line}` in {}", path.display()),
        }
    }
    Ok(rows)
}

fn select(dir: &Path, split: SplitArg) -> Result<Vec<String>> {
    let ids: Vec<String> = manifest(dir)?
        .into_iter()
        .filter(|(_, s)| match split {
            SplitArg::All => true,
            SplitArg::Train => s == "train",
            SplitArg::Test => s == "test",
        })
        .map(|(id, _)| id)
        .collect();
    ensure!(!ids.is_empty(), "no samples in the selected split of {}", dir.display());
    Ok(ids)
}

fn eval(a: args::Eval, resolved: &[(String, String)]) -> Result<ExitCode> {
    let metrics = metrics_config(a.beta_sq, a.band_radius);
    metrics.validate().map_err(|e| UsageError(e.to_string()))?;
    let ids = select(&a.data, a.split)?;
    let mut preds = Vec::with_capacity(ids.len());
    let mut masks = Vec::with_capacity(ids.len());
    for id in &ids {
        let pred = pnm::read_saliency(&a.pred.join(format!("{id}.pgm")))?;
        let mask = pnm::read_mask(&a.data.join(format!("masks/{id}.pgm")))?;
        let (h, w) = pred.dims();
        // predictions live at the network resolution
        masks.push(resize_mask(&mask, h, w));
        preds.push(pred);
    }
    prepare(&a.common, resolved)?;
    let report = evaluate(&preds, &masks, &metrics)?;
    fs::write(a.common.out.join("pr_curve.csv"), report.pr_csv())?;
    fs::write(a.common.out.join("report.txt"), report.summary())?;
    print!("{}", report.summary());
    Ok(ExitCode::SUCCESS)
}

/// Images to run a network on: `(name, 3×S×S image)` pairs, resized to the
/// network input.
fn load_inputs(
    data: Option<&PathBuf>,
    image: Option<&PathBuf>,
    split: SplitArg,
    limit: usize,
    size: usize,
) -> Result<Vec<(String, Tensor<f64>)>> {
    let resize = |img: Tensor<f64>| resize_image(&img, size, size);
    match (data, image) {
        (Some(dir), None) => select(dir, split)?
            .into_iter()
            .take(limit)
            .map(|id| {
                let img = pnm::read_rgb(&dir.join(format!("images/{id}.ppm")))?;
                Ok((id, resize(img)))
            })
            .collect(),
        (None, Some(path)) => {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            Ok(vec![(stem, resize(pnm::read_rgb(path)?))])
        }
        _ => bail!(UsageError("give exactly one of --data and --image".into())),
    }
}

fn batch(images: &[&Tensor<f64>]) -> Result<Tensor<f32>> {
    let shape = images[0].shape();
    let data: Vec<f32> = images.iter().flat_map(|t| t.data().iter().map(|&v| v as f32)).collect();
    Ok(Tensor::new([images.len(), shape[0], shape[1], shape[2]], data)?)
}

fn infer(a: args::Infer, resolved: &[(String, String)]) -> Result<ExitCode> {
    let net: Network<f32> = checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let size = net.config().input_size;
    let inputs = load_inputs(a.data.as_ref(), a.image.as_ref(), a.split, usize::MAX, size)?;
    prepare(&a.common, resolved)?;
    for chunk in inputs.chunks(8) {
        let imgs: Vec<&Tensor<f64>> = chunk.iter().map(|(_, t)| t).collect();
        let maps = net.predict(&batch(&imgs)?)?;
        for ((name, _), map) in chunk.iter().zip(&maps) {
            pnm::write_saliency(&a.common.out.join(format!("{name}.pgm")), map)?;
        }
    }
    println!("wrote {} saliency maps to {}", inputs.len(), a.common.out.display());
    Ok(ExitCode::SUCCESS)
}

fn weightmap(a: args::Weightmap, resolved: &[(String, String)]) -> Result<ExitCode> {
    let cfg = weight_map_config(&a.weight_map);
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let mask = pnm::read_mask(&a.mask)?;
    prepare(&a.common, resolved)?;
    let w = contour_weight_map(&mask, &cfg)?;
    let (h, wd) = w.dims();
    let mut csv = String::new();
    for row in w.data().chunks(wd) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    fs::write(a.common.out.join("weight.csv"), csv)?;
    // 1 → 0, k + 1 → 255
    let span = if cfg.k > 0.0 { cfg.k } else { 1.0 };
    let bytes = w
        .data()
        .iter()
        .map(|v| (255.0 * ((v - 1.0) / span).clamp(0.0, 1.0)).round() as u8)
        .collect();
    pnm::write_gray(&a.common.out.join("weight.pgm"), h, wd, bytes)?;
    println!("weight map {h}x{wd}: min {} max {}", w.plane().min(), w.plane().max());
    Ok(ExitCode::SUCCESS)
}

/// Rescales a plane to the full byte range (constant planes map to 0).
fn min_max_bytes(p: &Plane) -> Vec<u8> {
    let (lo, hi) = (p.min(), p.max());
    let span = hi - lo;
    p.data()
        .iter()
        .map(|&v| if span > 0.0 { (255.0 * (v - lo) / span).round() as u8 } else { 0 })
        .collect()
}

fn attn(a: args::Attn, resolved: &[(String, String)]) -> Result<ExitCode> {
    let net: Network<f32> = checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    ensure!(
        net.config().hgam_enabled,
        UsageError(format!("{} was trained without attention", a.checkpoint.display()))
    );
    let size = net.config().input_size;
    let inputs = load_inputs(a.data.as_ref(), a.image.as_ref(), a.split, a.count, size)?;
    prepare(&a.common, resolved)?;
    for (name, img) in &inputs {
        let maps = net.attention_maps(&batch(&[img])?)?;
        for (level, plane) in maps[0].iter().enumerate() {
            let (h, w) = plane.dims();
            let path = a.common.out.join(format!("{name}_att{}.pgm", level + 1));
            pnm::write_gray(&path, h, w, min_max_bytes(plane))?;
        }
        let pred = net.predict(&batch(&[img])?)?;
        pnm::write_saliency(&a.common.out.join(format!("{name}_pred.pgm")), &pred[0])?;
    }
    println!("wrote attention maps of {} images to {}", inputs.len(), a.common.out.display());
    Ok(ExitCode::SUCCESS)
}

fn grad_check(a: args::GradCheck, resolved: &[(String, String)]) -> Result<ExitCode> {
    if let Some(out) = &a.out {
        prepare_out(out, a.force, resolved)?;
    }
    let start = std::time::Instant::now();
    let mut rows: Vec<CheckRow> = primitive_suite(a.seed)?;
    rows.push(model_check(a.seed, a.probes)?);
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    println!("{:width$}  {:>12}  {:>6}  {:>7}  result", "check", "max rel err", "probes", "skipped");
    let mut csv = String::from("check,max_rel_err,probes,skipped,passed\n");
    for r in &rows {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:width$}  {:>12.3e}  {:>6}  {:>7}  {verdict}",
            r.name, r.max_rel_err, r.probes, r.skipped
        );
        csv.push_str(&format!("{},{},{},{},{}\n", r.name, r.max_rel_err, r.probes, r.skipped, r.passed()));
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!(
        "{} checks, {failed} failed (tolerance {TOLERANCE:e}) in {:.2?}",
        rows.len(),
        start.elapsed()
    );
    if let Some(out) = &a.out {
        fs::write(out.join("gradcheck.csv"), csv)?;
    }
    if failed > 0 {
        bail!("{failed} gradient checks exceeded the tolerance");
    }
    Ok(ExitCode::SUCCESS)
}
