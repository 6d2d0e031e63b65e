//! The synthetic-domain benchmark: paired ShapesWorld corpora with a fixed
//! statistic shift, plus the experiment steps (pretrain, source-only
//! baseline, adaptation, evaluation) shared by the CLI and the test suite.

use crate::datagen::{apply_domain_shift, generate_source, Corpus, DomainShift, LabeledSample, SceneSpec};
use crate::error::Result;
use crate::model::ModelState;
use crate::scalar::Scalar;
use crate::seeds::{self, stream};
use crate::trainer::{adapt_one_shot, AdaptResult, MetricsRow, OneShotTarget, TrainConfig};

/// Generation parameters for one paired-domain benchmark.
#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub scene: SceneSpec,
    pub shift: DomainShift,
    pub source_count: usize,
    pub target_pool_count: usize,
    pub eval_count: usize,
}

impl BenchmarkSpec {
    /// 64x64 / 8-class scenes under a contrast-compressing channel shift:
    /// strong enough to hurt the source model, fully recoverable by
    /// statistic-matching stylization.
    pub fn shapes_world(seed: u64) -> Self {
        BenchmarkSpec {
            scene: SceneSpec {
                width: 64,
                height: 64,
                num_classes: 8,
                shapes_per_image: 5,
                rng_seed: seed,
            },
            shift: DomainShift {
                mean_offset: vec![0.16, -0.10, 0.12],
                std_scale: vec![0.55, 0.60, 0.50],
                texture_noise: 0.02,
            },
            source_count: 48,
            target_pool_count: 8,
            eval_count: 24,
        }
    }
}

/// Materialized benchmark corpora. The adaptation target is drawn from
/// `target_pool`; `eval_set` stays disjoint from it.
#[derive(Debug, Clone)]
pub struct BenchmarkData {
    pub corpus: Corpus,
    pub target_pool: Vec<LabeledSample>,
    pub eval_set: Vec<LabeledSample>,
    pub num_classes: u8,
}

/// Generate the source corpus and the shifted target-domain pool/eval sets.
pub fn build_benchmark(spec: &BenchmarkSpec) -> Result<BenchmarkData> {
    let source = generate_source(&spec.scene, spec.source_count)?;
    let corpus = Corpus::from_samples(source, spec.scene.num_classes)?;

    let shift_into_target = |count: usize, tag: u64| -> Result<Vec<LabeledSample>> {
        let scene = SceneSpec {
            rng_seed: seeds::derive(spec.scene.rng_seed, stream::SHIFT, tag),
            ..spec.scene.clone()
        };
        generate_source(&scene, count)?
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut shifted = apply_domain_shift(
                    s,
                    &spec.shift,
                    seeds::derive(scene.rng_seed, stream::SHIFT, i as u64),
                )?;
                shifted.id = format!("tgt{tag}-{i:05}");
                Ok(shifted)
            })
            .collect()
    };
    let target_pool = shift_into_target(spec.target_pool_count, 1)?;
    let eval_set = shift_into_target(spec.eval_count, 2)?;
    Ok(BenchmarkData {
        corpus,
        target_pool,
        eval_set,
        num_classes: spec.scene.num_classes,
    })
}

/// Pick the one-shot target image from the pool by seed.
pub fn pick_target(data: &BenchmarkData, seed: u64) -> OneShotTarget {
    let idx = (seeds::derive(seed, stream::DRAW, 17) as usize) % data.target_pool.len();
    let sample = &data.target_pool[idx];
    OneShotTarget::new(sample.image.clone(), sample.id.clone())
}

/// Pick the target by id (CLI path).
pub fn pick_target_by_id(data: &BenchmarkData, id: &str) -> Option<OneShotTarget> {
    data.target_pool
        .iter()
        .find(|s| s.id == id)
        .map(|s| OneShotTarget::new(s.image.clone(), s.id.clone()))
}

/// Outcome of one adaptation run on the benchmark.
#[derive(Debug)]
pub struct BenchmarkRun<T> {
    pub result: AdaptResult<T>,
    pub source_only_miou: f64,
    pub final_miou: f64,
    /// (iteration, mIoU) snapshots harvested from the metrics stream.
    pub snapshots: Vec<(usize, f64)>,
}

impl<T> BenchmarkRun<T> {
    pub fn gain(&self) -> f64 {
        self.final_miou - self.source_only_miou
    }

    /// mIoU at the earliest snapshot taken at or after `iter`.
    pub fn miou_at(&self, iter: usize) -> Option<f64> {
        self.snapshots
            .iter()
            .find(|&&(i, _)| i + 1 >= iter)
            .map(|&(_, m)| m)
    }
}

/// Adapt `source_model` to a seed-picked target and evaluate against the
/// shifted eval set.
pub fn run_adaptation<T: Scalar>(
    source_model: &ModelState<T>,
    data: &BenchmarkData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<BenchmarkRun<T>> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let target = pick_target(data, seed);
    let source_only_miou = crate::trainer::eval_model(source_model, &data.eval_set)?.miou;
    let result = adapt_one_shot(source_model, &data.corpus, &target, &cfg, Some(&data.eval_set))?;
    let snapshots = harvest_snapshots(&result.metrics);
    let final_miou = snapshots
        .last()
        .map(|&(_, m)| m)
        .unwrap_or(source_only_miou);
    Ok(BenchmarkRun {
        result,
        source_only_miou,
        final_miou,
        snapshots,
    })
}

pub fn harvest_snapshots(metrics: &[MetricsRow]) -> Vec<(usize, f64)> {
    metrics
        .iter()
        .filter_map(|r| r.miou.map(|m| (r.iter, m)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_data_shapes() {
        let spec = BenchmarkSpec {
            source_count: 6,
            target_pool_count: 3,
            eval_count: 4,
            ..BenchmarkSpec::shapes_world(3)
        };
        let data = build_benchmark(&spec).unwrap();
        assert_eq!(data.corpus.samples.len(), 6);
        assert_eq!(data.target_pool.len(), 3);
        assert_eq!(data.eval_set.len(), 4);
        // target/eval ids are disjoint
        for t in &data.target_pool {
            assert!(data.eval_set.iter().all(|e| e.id != t.id));
        }
    }

    #[test]
    fn target_pick_is_deterministic_per_seed() {
        let spec = BenchmarkSpec {
            source_count: 4,
            target_pool_count: 5,
            eval_count: 2,
            ..BenchmarkSpec::shapes_world(4)
        };
        let data = build_benchmark(&spec).unwrap();
        let a = pick_target(&data, 11);
        let b = pick_target(&data, 11);
        assert_eq!(a.id, b.id);
        let by_id = pick_target_by_id(&data, &a.id).unwrap();
        assert_eq!(by_id.id, a.id);
    }

    #[test]
    fn shift_changes_images_but_not_labels() {
        let spec = BenchmarkSpec::shapes_world(5);
        let data = build_benchmark(&spec).unwrap();
        // shifted images live in [0,1] and labels are valid classes
        for s in data.target_pool.iter().chain(&data.eval_set) {
            assert!(s.image.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
            s.validate(spec.scene.num_classes).unwrap();
        }
    }
}
