//! Measures the component-toggle arms on the synthetic benchmark to check
//! the expected ordering before the thresholds are pinned in tests.
//! Run with `cargo run --release --example ablate`.

use idm_core::pipeline::{build_benchmark, run_adaptation, BenchmarkSpec};
use idm_core::trainer::{pretrain_source, TrainConfig};
use std::time::Instant;

fn main() {
    let spec = BenchmarkSpec::shapes_world(7);
    let data = build_benchmark(&spec).unwrap();
    let cfg = TrainConfig::desk_scale();
    let (model, _) = pretrain_source::<f32>(&data.corpus, &cfg, None).unwrap();
    println!("pretrained.");

    let arms = [
        ("baseline", (false, false, false)),
        ("ssm", (true, false, false)),
        ("ssm+pim", (true, false, true)),
        ("full", (true, true, true)),
    ];
    for (name, (ssm, pm, pim)) in arms {
        let arm_cfg = cfg.clone().with_toggles(ssm, pm, pim);
        let mut finals = Vec::new();
        let t0 = Instant::now();
        for seed in [101u64, 202, 303] {
            let run = run_adaptation(&model, &data, &arm_cfg, seed).unwrap();
            finals.push(run.final_miou);
        }
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        println!(
            "{name:8} mean={mean:.4} per-seed={finals:?} ({:.0}s)",
            t0.elapsed().as_secs_f64()
        );
    }
}
