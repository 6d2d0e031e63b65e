//! Subcommand implementations.

use crate::config::{DataConfig, ExperimentConfig, Precision};
use crate::plot::{write_line_plot, Series, COLORS};
use anyhow::{bail, Context, Result};
use idm_core::datagen::{save_dataset, ClassMap, Corpus, DatasetManifest, LabeledSample};
use idm_core::model::checkpoint::{load_checkpoint, save_checkpoint};
use idm_core::model::{init_model, ModelState, TeacherState};
use idm_core::pipeline::{build_benchmark, pick_target, pick_target_by_id, BenchmarkData, BenchmarkSpec};
use idm_core::scalar::Scalar;
use idm_core::selection::{select_batch, write_records_csv, MemoryBank};
use idm_core::styletx::{compute_stats, stylize};
use idm_core::tensor::{Image, LabelMap};
use idm_core::trainer::{
    adapt_one_shot, eval_model, pretrain_source, write_metrics_csv, OneShotTarget,
};
use std::fs;
use std::path::Path;

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn benchmark_spec(cfg: &ExperimentConfig) -> BenchmarkSpec {
    BenchmarkSpec {
        scene: cfg.scene.clone(),
        shift: cfg.shift.clone(),
        source_count: cfg.data.source_count,
        target_pool_count: cfg.data.target_pool_count,
        eval_count: cfg.data.eval_count,
    }
}

/// Generate the paired corpora, or ingest them from configured directories.
fn load_or_generate(cfg: &ExperimentConfig) -> Result<BenchmarkData> {
    match (&cfg.data.source_dir, &cfg.data.target_dir) {
        (None, None) => Ok(build_benchmark(&benchmark_spec(cfg))?),
        (Some(src), Some(tgt)) => ingest_data(&cfg.data, src, tgt, cfg.scene.num_classes),
        _ => bail!("data.source_dir and data.target_dir must be set together"),
    }
}

fn ingest_data(
    data: &DataConfig,
    source_dir: &Path,
    target_dir: &Path,
    num_classes: u8,
) -> Result<BenchmarkData> {
    let class_map = ClassMap::identity(num_classes);
    let source = idm_core::datagen::ingest_folder(source_dir, &class_map)?;
    if source.is_empty() {
        bail!("no samples found under {}", source_dir.display());
    }
    let target: Vec<LabeledSample> = idm_core::datagen::ingest_folder(target_dir, &class_map)?;
    if target.is_empty() {
        bail!("no samples found under {}", target_dir.display());
    }
    let _ = data;
    Ok(BenchmarkData {
        corpus: Corpus::from_samples(source, num_classes)?,
        target_pool: target.clone(),
        eval_set: target,
        num_classes,
    })
}

pub fn gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let data = load_or_generate(cfg)?;
    ensure_dir(out_dir)?;
    save_dataset(&data.corpus.samples, data.num_classes, &out_dir.join("source"))?;
    save_dataset(&data.target_pool, data.num_classes, &out_dir.join("target"))?;
    save_dataset(&data.eval_set, data.num_classes, &out_dir.join("eval"))?;
    println!(
        "wrote {} source / {} target-pool / {} eval samples under {}",
        data.corpus.samples.len(),
        data.target_pool.len(),
        data.eval_set.len(),
        out_dir.display()
    );
    Ok(())
}

fn source_eval_set(cfg: &ExperimentConfig) -> Result<Vec<LabeledSample>> {
    let spec = idm_core::datagen::SceneSpec {
        rng_seed: cfg.scene.rng_seed.wrapping_add(0x5EED),
        ..cfg.scene.clone()
    };
    Ok(idm_core::datagen::generate_source(&spec, 16)?)
}

pub fn pretrain(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let data = load_or_generate(cfg)?;
    match cfg.experiment.precision {
        Precision::F32 => pretrain_typed::<f32>(cfg, &data, out_dir),
        Precision::F64 => pretrain_typed::<f64>(cfg, &data, out_dir),
    }
}

fn pretrain_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &BenchmarkData,
    out_dir: &Path,
) -> Result<()> {
    let src_eval = source_eval_set(cfg)?;
    let (model, metrics) = pretrain_source::<T>(&data.corpus, &cfg.train, Some(&src_eval))?;
    let ckpt = out_dir.join("source.ckpt");
    save_checkpoint(&model, &ckpt)?;
    let csv = out_dir.join("pretrain_metrics.csv");
    let mut buf = Vec::new();
    write_metrics_csv(&metrics, &mut buf)?;
    fs::write(&csv, buf)?;
    let src_miou = metrics.iter().rev().find_map(|r| r.miou);
    let tgt_miou = eval_model(&model, &data.eval_set)?.miou;
    println!("checkpoint: {}", ckpt.display());
    if let Some(m) = src_miou {
        println!("source-domain mIoU: {m:.4}");
    }
    println!("target-domain mIoU (source-only): {tgt_miou:.4}");
    Ok(())
}

pub fn adapt(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    checkpoint: Option<&Path>,
    target_id: Option<String>,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let data = load_or_generate(cfg)?;
    let default_ckpt = out_dir.join("source.ckpt");
    let ckpt = checkpoint.unwrap_or(&default_ckpt);
    if !ckpt.exists() {
        bail!(
            "checkpoint {} not found; run `idm pretrain` first or pass --checkpoint",
            ckpt.display()
        );
    }
    let target_id = target_id.or_else(|| cfg.experiment.target_id.clone());
    match cfg.experiment.precision {
        Precision::F32 => adapt_typed::<f32>(cfg, &data, ckpt, target_id, out_dir),
        Precision::F64 => adapt_typed::<f64>(cfg, &data, ckpt, target_id, out_dir),
    }
}

fn resolve_target(
    data: &BenchmarkData,
    target_id: Option<&str>,
    seed: u64,
) -> Result<OneShotTarget> {
    match target_id {
        Some(id) => pick_target_by_id(data, id)
            .with_context(|| format!("target id {id} not found in the target pool")),
        None => Ok(pick_target(data, seed)),
    }
}

fn adapt_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &BenchmarkData,
    ckpt: &Path,
    target_id: Option<String>,
    out_dir: &Path,
) -> Result<()> {
    let model = load_checkpoint::<T>(ckpt)?;
    let source_miou = eval_model(&model, &data.eval_set)?.miou;
    let target = resolve_target(data, target_id.as_deref(), cfg.train.seed)?;
    println!("adapting to target {}", target.id);
    let result = adapt_one_shot(&model, &data.corpus, &target, &cfg.train, Some(&data.eval_set))?;
    let final_miou = idm_core::pipeline::harvest_snapshots(&result.metrics)
        .last()
        .map(|&(_, m)| m)
        .unwrap_or(source_miou);

    let adapted = out_dir.join(format!("adapted-{}.ckpt", cfg.train.seed));
    save_checkpoint(&result.model, &adapted)?;
    let mut buf = Vec::new();
    write_metrics_csv(&result.metrics, &mut buf)?;
    fs::write(out_dir.join(format!("adapt_metrics-{}.csv", cfg.train.seed)), buf)?;
    result
        .manifest
        .write_json(&out_dir.join(format!("run_manifest-{}.json", cfg.train.seed)))?;
    if cfg.experiment.plot {
        let snapshots = idm_core::pipeline::harvest_snapshots(&result.metrics);
        let mut points = vec![(0.0, source_miou)];
        points.extend(snapshots.iter().map(|&(i, m)| ((i + 1) as f64, m)));
        write_line_plot(
            &out_dir.join(format!("convergence-{}.svg", cfg.train.seed)),
            "one-shot adaptation",
            "iteration",
            "mIoU",
            &[Series {
                label: format!("seed {}", cfg.train.seed),
                points,
                color: COLORS[0],
            }],
        )?;
    }
    println!("source-only mIoU: {source_miou:.4}");
    println!("adapted mIoU:     {final_miou:.4}  ({:+.4})", final_miou - source_miou);
    println!("checkpoint: {}", adapted.display());
    Ok(())
}

/// Read a directory of label PNGs: either `<dir>/labels/*.png` or a flat
/// `<dir>/*.png`.
fn read_label_dir(dir: &Path, num_classes: u8) -> Result<Vec<(String, LabelMap)>> {
    let labels_dir = if dir.join("labels").is_dir() {
        dir.join("labels")
    } else {
        dir.to_path_buf()
    };
    let map = ClassMap::identity(num_classes);
    let mut entries: Vec<String> = fs::read_dir(&labels_dir)
        .with_context(|| format!("reading {}", labels_dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension().map(|x| x == "png").unwrap_or(false) {
                p.file_stem().map(|s| s.to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    entries.sort();
    let mut out = Vec::with_capacity(entries.len());
    for id in entries {
        let path = labels_dir.join(format!("{id}.png"));
        let gray = image::open(&path)
            .with_context(|| format!("decoding {}", path.display()))?
            .into_luma8();
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        let mut label = LabelMap::filled(h, w, 0);
        for y in 0..h {
            for x in 0..w {
                label.set(y, x, map.map(gray.get_pixel(x as u32, y as u32)[0]));
            }
        }
        out.push((id, label));
    }
    Ok(out)
}

fn manifest_classes(dir: &Path) -> Option<u8> {
    let path = dir.join(idm_core::datagen::DATASET_MANIFEST_FILE);
    let text = fs::read_to_string(path).ok()?;
    let manifest: DatasetManifest = serde_json::from_str(&text).ok()?;
    Some(manifest.num_classes)
}

pub fn eval(
    pred_dir: Option<&Path>,
    truth_dir: Option<&Path>,
    checkpoint: Option<&Path>,
    data_dir: Option<&Path>,
    num_classes: Option<u8>,
) -> Result<()> {
    let report = match (pred_dir, truth_dir, checkpoint, data_dir) {
        (Some(pred), Some(truth), None, None) => {
            let classes = num_classes
                .or_else(|| manifest_classes(truth))
                .or_else(|| manifest_classes(pred))
                .context("pass --num-classes (no dataset manifest found)")?;
            let preds = read_label_dir(pred, classes)?;
            let truths = read_label_dir(truth, classes)?;
            if preds.len() != truths.len() {
                bail!("{} predictions vs {} truths", preds.len(), truths.len());
            }
            let mut cm = idm_core::eval::ConfusionMatrix::new(classes as usize);
            for ((pid, p), (tid, t)) in preds.iter().zip(&truths) {
                if pid != tid {
                    bail!("id mismatch: {pid} vs {tid}");
                }
                cm.accumulate(p, t)?;
            }
            idm_core::eval::miou(&cm, preds.len())?
        }
        (None, None, Some(ckpt), Some(dir)) => {
            let classes = num_classes
                .or_else(|| manifest_classes(dir))
                .context("pass --num-classes (no dataset manifest found)")?;
            let samples = idm_core::datagen::ingest_folder(dir, &ClassMap::identity(classes))?;
            if samples.is_empty() {
                bail!("no samples under {}", dir.display());
            }
            let model = load_checkpoint::<f32>(ckpt)?;
            eval_model(&model, &samples)?
        }
        _ => bail!("pass either --pred-dir/--truth-dir or --checkpoint/--data-dir"),
    };
    println!("images: {}", report.num_images);
    println!("pixel accuracy: {:.4}", report.pixel_acc);
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        match iou {
            Some(v) => println!("class {c}: IoU {v:.4}"),
            None => println!("class {c}: absent"),
        }
    }
    println!("mIoU: {:.4}", report.miou);
    Ok(())
}

pub fn select_dry_run(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    checkpoint: Option<&Path>,
    pool: usize,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let data = load_or_generate(cfg)?;
    let model: ModelState<f32> = match checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => {
            log::warn!("no checkpoint given; scoring with an untrained teacher");
            init_model(&cfg.train.arch(data.num_classes as usize), cfg.train.seed)
        }
    };
    let teacher = TeacherState::from_student(&model, cfg.train.ema_alpha);
    let target = resolve_target(&data, cfg.experiment.target_id.as_deref(), cfg.train.seed)?;
    let stats = compute_stats(target.read());
    let pool: Vec<_> = (0..pool)
        .map(|slot| {
            let sample = idm_core::trainer::rare_class_sample(
                &data.corpus,
                cfg.train.rcs_temperature,
                idm_core::seeds::derive(cfg.train.seed, idm_core::seeds::stream::DRAW, slot as u64),
            );
            idm_core::styletx::stylize_with(
                sample,
                &stats,
                idm_core::styletx::StatOffsets::sample_seeded(idm_core::seeds::derive(
                    cfg.train.seed,
                    idm_core::seeds::stream::STYLE,
                    slot as u64,
                )),
                cfg.train.norm_mode,
            )
        })
        .collect::<idm_core::Result<_>>()?;
    let outcome = select_batch(
        &pool,
        &teacher,
        &MemoryBank::new(data.num_classes as usize),
        &cfg.train.selection,
    )?;
    let csv_path = out_dir.join("selection.csv");
    let mut buf = Vec::new();
    write_records_csv(&outcome.records, &mut buf)?;
    fs::write(&csv_path, buf)?;
    println!(
        "scored {} candidates, accepted {}; records at {}",
        outcome.records.len(),
        outcome.accepted.len(),
        csv_path.display()
    );
    Ok(())
}

fn save_image_png(img: &Image, path: &Path) -> Result<()> {
    let mut rgb = image::RgbImage::new(img.w as u32, img.h as u32);
    for y in 0..img.h {
        for x in 0..img.w {
            let px = [
                (img.at(0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.at(1, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.at(2, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    rgb.save(path).with_context(|| format!("writing {}", path.display()))
}

fn save_label_png(label: &LabelMap, path: &Path) -> Result<()> {
    let mut gray = image::GrayImage::new(label.w as u32, label.h as u32);
    for y in 0..label.h {
        for x in 0..label.w {
            gray.put_pixel(x as u32, y as u32, image::Luma([label.at(y, x)]));
        }
    }
    gray.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn stylize_dry_run(cfg: &ExperimentConfig, out_dir: &Path, count: usize) -> Result<()> {
    let dir = out_dir.join("stylized");
    ensure_dir(&dir)?;
    let data = load_or_generate(cfg)?;
    let target = resolve_target(&data, cfg.experiment.target_id.as_deref(), cfg.train.seed)?;
    save_image_png(target.read(), &dir.join("target.png"))?;
    for i in 0..count.min(data.corpus.samples.len()) {
        let sample = &data.corpus.samples[i];
        let stylized = stylize(
            sample,
            target.read(),
            idm_core::seeds::derive(cfg.train.seed, 91, i as u64),
            cfg.train.norm_mode,
        )?;
        save_image_png(&sample.image, &dir.join(format!("{}-original.png", sample.id)))?;
        save_image_png(&stylized.image, &dir.join(format!("{}-stylized.png", sample.id)))?;
    }
    println!("stylized images under {}", dir.display());
    Ok(())
}

pub fn mix_dry_run(cfg: &ExperimentConfig, out_dir: &Path, count: usize) -> Result<()> {
    let dir = out_dir.join("mixed");
    ensure_dir(&dir)?;
    let data = load_or_generate(cfg)?;
    let target_sample = data.target_pool[0].clone();
    let target = OneShotTarget::new(target_sample.image.clone(), target_sample.id.clone());
    let stats = compute_stats(target.read());
    let grid = idm_core::mixing::choose_grid(
        target_sample.image.h,
        target_sample.image.w,
        cfg.train.p_patches,
    )?;
    for i in 0..count.min(data.corpus.samples.len()) {
        let sample = &data.corpus.samples[i];
        let stylized = idm_core::styletx::stylize_with(
            sample,
            &stats,
            idm_core::styletx::StatOffsets::ZERO,
            cfg.train.norm_mode,
        )?;
        let mixed = idm_core::mixing::patch_mix(
            &stylized,
            target.read(),
            &target_sample.label,
            grid,
            cfg.train.mix_ratio,
            idm_core::seeds::derive(cfg.train.seed, 92, i as u64),
        )?;
        save_image_png(&mixed.image, &dir.join(format!("{}-image.png", sample.id)))?;
        save_label_png(&mixed.label, &dir.join(format!("{}-label.png", sample.id)))?;
        let mask_json = serde_json::to_string_pretty(&mixed.mask)?;
        fs::write(dir.join(format!("{}-mask.json", sample.id)), mask_json)?;
    }
    println!("mixed triples under {}", dir.display());
    Ok(())
}

pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    match cfg.experiment.precision {
        Precision::F32 => run_experiment_typed::<f32>(cfg, out_dir),
        Precision::F64 => run_experiment_typed::<f64>(cfg, out_dir),
    }
}

fn run_experiment_typed<T: Scalar>(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let data = load_or_generate(cfg)?;
    let src_eval = source_eval_set(cfg)?;
    println!(
        "corpus: {} source / {} target-pool / {} eval images",
        data.corpus.samples.len(),
        data.target_pool.len(),
        data.eval_set.len()
    );

    println!("pretraining {} iterations...", cfg.train.source_iters);
    let (source_model, pre_metrics) =
        pretrain_source::<T>(&data.corpus, &cfg.train, Some(&src_eval))?;
    save_checkpoint(&source_model, &out_dir.join("source.ckpt"))?;
    let mut buf = Vec::new();
    write_metrics_csv(&pre_metrics, &mut buf)?;
    fs::write(out_dir.join("pretrain_metrics.csv"), buf)?;
    let source_miou = eval_model(&source_model, &data.eval_set)?.miou;
    println!("source-only target mIoU: {source_miou:.4}");

    let mut all_series = Vec::new();
    let mut summary = String::from("seed,target_id,source_miou,final_miou,gain\n");
    let mut gains = Vec::new();
    for (si, &seed) in cfg.experiment.seeds.iter().enumerate() {
        let mut train = cfg.train.clone();
        train.seed = seed;
        let target = resolve_target(&data, cfg.experiment.target_id.as_deref(), seed)?;
        let target_id = target.id.clone();
        println!("seed {seed}: adapting to {target_id} ...");
        let result = adapt_one_shot(&source_model, &data.corpus, &target, &train, Some(&data.eval_set))?;
        let snapshots = idm_core::pipeline::harvest_snapshots(&result.metrics);
        let final_miou = snapshots.last().map(|&(_, m)| m).unwrap_or(source_miou);
        save_checkpoint(&result.model, &out_dir.join(format!("adapted-{seed}.ckpt")))?;
        let mut buf = Vec::new();
        write_metrics_csv(&result.metrics, &mut buf)?;
        fs::write(out_dir.join(format!("adapt_metrics-{seed}.csv")), buf)?;
        result
            .manifest
            .write_json(&out_dir.join(format!("run_manifest-{seed}.json")))?;
        println!(
            "seed {seed}: final mIoU {final_miou:.4} ({:+.4})",
            final_miou - source_miou
        );
        let mut points = vec![(0.0, source_miou)];
        points.extend(snapshots.iter().map(|&(i, m)| ((i + 1) as f64, m)));
        all_series.push(Series {
            label: format!("seed {seed}"),
            points,
            color: COLORS[si % COLORS.len()],
        });
        summary.push_str(&format!(
            "{seed},{target_id},{source_miou:.6},{final_miou:.6},{:.6}\n",
            final_miou - source_miou
        ));
        gains.push(final_miou - source_miou);
    }
    fs::write(out_dir.join("summary.csv"), summary)?;
    if cfg.experiment.plot {
        write_line_plot(
            &out_dir.join("convergence.svg"),
            "one-shot adaptation",
            "iteration",
            "mIoU",
            &all_series,
        )?;
    }
    let mean_gain = gains.iter().sum::<f64>() / gains.len().max(1) as f64;
    println!("mean gain over {} seeds: {mean_gain:+.4}", gains.len());
    println!("artifacts under {}", out_dir.display());
    Ok(())
}

pub fn sweep(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    match cfg.experiment.precision {
        Precision::F32 => sweep_typed::<f32>(cfg, out_dir),
        Precision::F64 => sweep_typed::<f64>(cfg, out_dir),
    }
}

fn sweep_typed<T: Scalar>(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let data = load_or_generate(cfg)?;
    println!("pretraining shared source model...");
    let (source_model, _) = pretrain_source::<T>(&data.corpus, &cfg.train, None)?;
    let source_miou = eval_model(&source_model, &data.eval_set)?.miou;
    println!("source-only target mIoU: {source_miou:.4}");

    let mut rows = String::from("axis,value,mean_final_miou,mean_gain,seeds\n");
    let mut run_point = |label: &str, value: String, train: idm_core::trainer::TrainConfig| -> Result<()> {
        let mut finals = Vec::new();
        for &seed in &cfg.experiment.seeds {
            let run = idm_core::pipeline::run_adaptation(&source_model, &data, &train, seed)?;
            finals.push(run.final_miou);
        }
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        println!("{label}={value}: mean final mIoU {mean:.4} ({:+.4})", mean - source_miou);
        rows.push_str(&format!(
            "{label},{value},{mean:.6},{:.6},{}\n",
            mean - source_miou,
            finals.len()
        ));
        Ok(())
    };

    for &p in &cfg.sweep.p_patches {
        let mut train = cfg.train.clone();
        train.p_patches = p;
        run_point("p_patches", p.to_string(), train)?;
    }
    for &v in &cfg.sweep.lambda_ent {
        let mut train = cfg.train.clone();
        train.selection.lambda_ent = v;
        run_point("lambda_ent", v.to_string(), train)?;
    }
    for &v in &cfg.sweep.lambda_sim {
        let mut train = cfg.train.clone();
        train.selection.lambda_sim = v;
        run_point("lambda_sim", v.to_string(), train)?;
    }
    for &v in &cfg.sweep.k {
        let mut train = cfg.train.clone();
        train.selection.k = v;
        run_point("k", v.to_string(), train)?;
    }
    if cfg.sweep.ablation {
        for bits in 0..8u8 {
            let (ssm, patchmix, pim) = (bits & 4 != 0, bits & 2 != 0, bits & 1 != 0);
            let train = cfg.train.clone().with_toggles(ssm, patchmix, pim);
            run_point(
                "ablation",
                format!("ssm={}|patchmix={}|pim={}", ssm as u8, patchmix as u8, pim as u8),
                train,
            )?;
        }
    }
    let path = out_dir.join("sweep.csv");
    fs::write(&path, rows)?;
    println!("sweep table at {}", path.display());
    Ok(())
}
