//! Calibration probe: times pretraining and adaptation on the synthetic
//! benchmark and prints the numbers the acceptance thresholds rest on.
//! Not part of the test suite; run with `cargo run --example calibrate`.

use idm_core::pipeline::{build_benchmark, run_adaptation, BenchmarkSpec};
use idm_core::trainer::{eval_model, pretrain_source, TrainConfig};
use std::time::Instant;

fn main() {
    let spec = BenchmarkSpec::shapes_world(7);
    let t0 = Instant::now();
    let data = build_benchmark(&spec).unwrap();
    println!("datagen: {:.2}s", t0.elapsed().as_secs_f64());

    let cfg = TrainConfig::desk_scale();
    println!(
        "config: source_iters={} adapt_iters={} lr={} widths={:?}",
        cfg.source_iters, cfg.adapt_iters, cfg.lr, cfg.widths
    );

    // held-out source eval
    let src_eval_spec = idm_core::datagen::SceneSpec {
        rng_seed: 1234,
        ..spec.scene.clone()
    };
    let src_eval = idm_core::datagen::generate_source(&src_eval_spec, 16).unwrap();

    let t0 = Instant::now();
    let (model, pre_metrics) = pretrain_source::<f32>(&data.corpus, &cfg, Some(&src_eval)).unwrap();
    let pretrain_secs = t0.elapsed().as_secs_f64();
    let last_src_miou = pre_metrics.iter().rev().find_map(|r| r.miou).unwrap();
    println!("pretrain: {pretrain_secs:.1}s source-mIoU={last_src_miou:.4}");

    let src_only = eval_model(&model, &data.eval_set).unwrap().miou;
    println!("source-only target mIoU: {src_only:.4}");

    for seed in [101u64, 202, 303] {
        let t0 = Instant::now();
        let run = run_adaptation(&model, &data, &cfg, seed).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let at50 = run.miou_at(50).unwrap_or(f64::NAN);
        let accepted: usize = run.result.metrics.iter().map(|r| r.accepted).sum();
        let empty = run
            .result
            .metrics
            .iter()
            .filter(|r| r.accepted == 0)
            .count();
        println!(
            "seed {seed}: adapt {secs:.1}s final={:.4} gain={:+.4} @50={at50:.4} gain50={:+.4} accepted={accepted} empty_iters={empty}",
            run.final_miou,
            run.gain(),
            at50 - run.source_only_miou,
        );
        let sims: Vec<f64> = run
            .result
            .metrics
            .iter()
            .take(5)
            .map(|r| r.mean_entropy)
            .collect();
        println!("  first-5 mean entropies: {sims:?}");
    }
}
