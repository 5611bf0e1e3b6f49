//! Synthetic oriented-grating textures and the benchmark built on them.

use std::f64::consts::{PI, TAU};

use cskn::epls::PretrainConfig;
use cskn::evalkit::{precision_at_q, predict, rank_by_euclidean, top1_accuracy, train_svm, SvmConfig};
use cskn::kernel_layer::{InputKind, LayerConfig, Parallelism};
use cskn::network::{forward_network, train_network};
use cskn::{FeatureMap, ModelBundle, NetworkSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::Result;

/// Grating texture classes: class `k` of `n` is oriented at `k·π/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GratingSet {
    pub classes: usize,
    pub side: usize,
    /// Spatial period in pixels.
    pub period: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
}

impl Default for GratingSet {
    fn default() -> Self {
        Self {
            classes: 3,
            side: 64,
            period: 8.0,
            noise: 0.1,
        }
    }
}

impl GratingSet {
    pub fn label(class: usize) -> String {
        format!("grating{class}")
    }

    /// One image of `class` with random phase, intensities around `[0, 1]`.
    pub fn image(&self, class: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let theta = class as f64 * PI / self.classes as f64;
        let (dx, dy) = (theta.cos() * TAU / self.period, theta.sin() * TAU / self.period);
        let phase = rng.gen::<f64>() * TAU;
        let normal = Normal::new(0.0, self.noise).expect("noise level is finite");
        let noise: Vec<f64> = (0..self.side * self.side).map(|_| normal.sample(rng)).collect();
        let side = self.side;
        FeatureMap::from_fn(side, side, |r, c| {
            0.5 + 0.5 * (dx * c as f64 + dy * r as f64 + phase).sin() + noise[r * side + c]
        })
        .expect("grating values are finite")
    }

    /// `count` images cycling through the classes, with their labels.
    pub fn sample(&self, count: usize, seed: u64) -> (Vec<FeatureMap>, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| (self.image(i % self.classes, &mut rng), Self::label(i % self.classes)))
            .unzip()
    }
}

/// The desk-scale two-layer network: a 16-orientation gradient layer and a
/// 64-filter patch layer, with training budgets cut to suit 64×64 inputs.
pub fn benchmark_spec(seed: u64) -> NetworkSpec {
    let layer = |kind, e, f, n1| LayerConfig {
        num_training_pairs: 20_000,
        ..LayerConfig::new(kind, e, f, n1)
    };
    let mut spec = NetworkSpec::new(
        vec![layer(InputKind::Gradient, 1, 2, 16), layer(InputKind::Patch, 2, 4, 64)],
        64,
    );
    spec.seed = seed;
    spec.pool_size = 20_000;
    spec.pretrain = PretrainConfig {
        batch_size: 500,
        patches_per_epoch: 20_000,
        epochs: 3,
        ..PretrainConfig::default()
    };
    spec
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub model: ModelBundle,
    pub top1: f64,
    pub precision_at_1: f64,
    pub train_images: usize,
    pub test_images: usize,
}

/// Trains on 60 gratings, fits the SVM, and scores 30 held-out ones.
pub fn run_benchmark(seed: u64, parallelism: Parallelism) -> Result<BenchmarkOutcome> {
    let set = GratingSet::default();
    let (train, train_labels) = set.sample(60, seed);
    let (test, test_labels) = set.sample(30, seed.wrapping_add(1));
    let mut spec = benchmark_spec(seed);
    spec.train.parallelism = parallelism;
    let model = train_network(&train, &spec)?;

    let describe = |images: &[FeatureMap]| -> Result<Vec<Vec<f64>>> {
        let run = |im: &FeatureMap| forward_network(im, &model).map(|d| d.values);
        Ok(match parallelism {
            Parallelism::Reference => images.iter().map(run).collect::<cskn::Result<_>>()?,
            Parallelism::Parallel => images.par_iter().map(run).collect::<cskn::Result<_>>()?,
        })
    };
    let train_desc = describe(&train)?;
    let test_desc = describe(&test)?;

    let classifier = train_svm(&train_desc, &train_labels, &SvmConfig::default())?;
    let predicted: Vec<String> = predict(&test_desc, &classifier)?.into_iter().map(|p| p.label).collect();
    let top1 = top1_accuracy(&predicted, &test_labels)?;

    let mut hits = 0.0;
    for (qi, q) in test_desc.iter().enumerate() {
        let run = rank_by_euclidean(qi, q, &train_desc)?.with_relevance(|g| train_labels[g] == test_labels[qi]);
        hits += precision_at_q(&run, 1)?;
    }
    Ok(BenchmarkOutcome {
        model,
        top1,
        precision_at_1: hits / test_desc.len() as f64,
        train_images: train.len(),
        test_images: test.len(),
    })
}
