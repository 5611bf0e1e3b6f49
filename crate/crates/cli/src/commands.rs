//! What each subcommand does, independent of argument parsing.

use std::collections::BTreeSet;
use std::path::Path;

use cskn::evalkit::{precision_at_q, predict, rank_by_euclidean, roc_auc, top1_accuracy, train_svm, SvmConfig};
use cskn::kernel_layer::Parallelism;
use cskn::network::{forward_network, train_network};
use cskn::{FeatureMap, ModelBundle};
use log::{info, warn};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::image::load_image;
use crate::manifest::{DatasetManifest, Entry, Split};
use crate::persist::{load_model, save_descriptors, save_model, DescriptorSet};
use crate::report::Report;

pub const THREADS_ENV: &str = "CSKN_THREADS";

/// Reads `CSKN_THREADS`: unset or 0 selects the single-worker reference
/// mode; `n > 0` sizes the global worker pool and enables parallel
/// reductions.
pub fn parallelism_from_env() -> Result<Parallelism> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(Parallelism::Reference);
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a count, got '{raw}'")))?;
    if n == 0 {
        return Ok(Parallelism::Reference);
    }
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        warn!("worker pool already initialized; {THREADS_ENV}={n} not applied");
    }
    Ok(Parallelism::Parallel)
}

fn load_images(manifest: &DatasetManifest, entries: &[&Entry], side: usize, channels: usize, mode: Parallelism) -> Result<Vec<FeatureMap>> {
    let load = |e: &&Entry| load_image(&manifest.resolve(e), side, channels);
    match mode {
        Parallelism::Reference => entries.iter().map(load).collect(),
        Parallelism::Parallel => entries.par_iter().map(load).collect(),
    }
}

/// Descriptors of `entries` in order.
pub fn describe(model: &ModelBundle, manifest: &DatasetManifest, entries: &[&Entry], mode: Parallelism) -> Result<Vec<Vec<f64>>> {
    let run = |e: &&Entry| -> Result<Vec<f64>> {
        let image = load_image(&manifest.resolve(e), model.input_size, model.input_channels)?;
        Ok(forward_network(&image, model)?.values)
    };
    match mode {
        Parallelism::Reference => entries.iter().map(run).collect(),
        Parallelism::Parallel => entries.par_iter().map(run).collect(),
    }
}

pub fn train(config: &RunConfig, manifest: &DatasetManifest, out: &Path, mode: Parallelism) -> Result<ModelBundle> {
    let entries = manifest.training()?;
    let images = load_images(manifest, &entries, config.spec.input_size, config.input_channels, mode)?;
    info!("training on {} images", images.len());
    let mut spec = config.spec.clone();
    spec.train.parallelism = mode;
    let model = train_network(&images, &spec)?;
    save_model(&model, out)?;
    Ok(model)
}

pub fn extract(model_path: &Path, manifest: &DatasetManifest, out: &Path, mode: Parallelism) -> Result<DescriptorSet> {
    let model = load_model(model_path)?;
    let entries: Vec<&Entry> = manifest.entries.iter().collect();
    if entries.is_empty() {
        return Err(CliError::Data("manifest has no entries".into()));
    }
    let rows = describe(&model, manifest, &entries, mode)?;
    let set = DescriptorSet {
        paths: entries.iter().map(|e| e.path.clone()).collect(),
        labels: entries.iter().map(|e| e.label.clone()).collect(),
        dim: model.descriptor_len(),
        // stored at single precision; keep the in-memory copy identical
        values: rows.into_iter().flatten().map(|v| f64::from(v as f32)).collect(),
    };
    save_descriptors(&set, out)?;
    Ok(set)
}

/// Query selection for `retrieve`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Queries {
    /// Every test entry.
    TestSplit,
    /// Manifest paths, as written in the manifest.
    Paths(Vec<String>),
}

impl std::str::FromStr for Queries {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "test" {
            return Ok(Queries::TestSplit);
        }
        let paths: Vec<String> = s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect();
        if paths.is_empty() {
            return Err(CliError::Usage("--queries needs 'test' or a list of manifest paths".into()));
        }
        Ok(Queries::Paths(paths))
    }
}

/// Mean precision at each Q over the queries, gallery = train entries,
/// relevance = identical label. A Q beyond the gallery size is evaluated
/// at the gallery size.
pub fn retrieve(model_path: &Path, manifest: &DatasetManifest, queries: &Queries, qs: &[usize], mode: Parallelism) -> Result<Report> {
    if qs.is_empty() || qs.contains(&0) {
        return Err(CliError::Usage("--q needs positive counts".into()));
    }
    let model = load_model(model_path)?;
    let gallery = manifest.training()?;
    let query_entries: Vec<&Entry> = match queries {
        Queries::TestSplit => manifest.split(Split::Test),
        Queries::Paths(paths) => paths
            .iter()
            .map(|p| {
                manifest
                    .entries
                    .iter()
                    .find(|e| &e.path == p)
                    .ok_or_else(|| CliError::Usage(format!("query '{p}' is not in the manifest")))
            })
            .collect::<Result<_>>()?,
    };
    if query_entries.is_empty() {
        return Err(CliError::Data("no query images".into()));
    }
    let gallery_desc = describe(&model, manifest, &gallery, mode)?;
    let query_desc = describe(&model, manifest, &query_entries, mode)?;

    let runs = query_desc
        .iter()
        .zip(&query_entries)
        .enumerate()
        .map(|(i, (q, entry))| {
            Ok(rank_by_euclidean(i, q, &gallery_desc)?.with_relevance(|g| gallery[g].label == entry.label))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = Report::new();
    report.count("queries", runs.len());
    report.count("gallery", gallery.len());
    for &q in qs {
        let depth = if q > gallery.len() {
            warn!("Q = {q} exceeds the gallery of {}; using the whole gallery", gallery.len());
            gallery.len()
        } else {
            q
        };
        let total: f64 = runs.iter().map(|r| precision_at_q(r, depth)).sum::<cskn::Result<f64>>()?;
        report.number(format!("precision@{q}"), total / runs.len() as f64);
    }
    Ok(report)
}

/// SVM on train descriptors, scored on test entries: top-1 accuracy and
/// one-vs-rest AUC per class.
pub fn classify(model_path: &Path, manifest: &DatasetManifest, mode: Parallelism) -> Result<Report> {
    let model = load_model(model_path)?;
    let train_entries = manifest.training()?;
    let test_entries = manifest.split(Split::Test);
    if test_entries.is_empty() {
        return Err(CliError::Data("manifest has no test entries".into()));
    }
    let train_desc = describe(&model, manifest, &train_entries, mode)?;
    let test_desc = describe(&model, manifest, &test_entries, mode)?;
    let train_labels: Vec<String> = train_entries.iter().map(|e| e.label.clone()).collect();
    let test_labels: Vec<String> = test_entries.iter().map(|e| e.label.clone()).collect();

    let classifier = train_svm(&train_desc, &train_labels, &SvmConfig::default())?;
    let predictions = predict(&test_desc, &classifier)?;
    let predicted: Vec<&str> = predictions.iter().map(|p| p.label.as_str()).collect();
    let truths: Vec<&str> = test_labels.iter().map(String::as_str).collect();

    let mut report = Report::new();
    report.count("train_images", train_entries.len());
    report.count("test_images", test_entries.len());
    report.number("top1_accuracy", top1_accuracy(&predicted, &truths)?);
    let mut aucs = Vec::new();
    for (k, label) in classifier.labels.iter().enumerate() {
        let scores: Vec<f64> = predictions.iter().map(|p| p.scores[k]).collect();
        let truth: Vec<bool> = test_labels.iter().map(|t| t == label).collect();
        match roc_auc(&scores, &truth) {
            Ok(auc) => {
                report.number(format!("auc/{label}"), auc);
                aucs.push(auc);
            }
            Err(cskn::Error::UndefinedMetric(_)) => {
                warn!("AUC for class '{label}' is undefined on this test split");
                report.text(format!("auc/{label}"), "undefined");
            }
            Err(e) => return Err(e.into()),
        }
    }
    let unseen: BTreeSet<&str> = truths
        .iter()
        .copied()
        .filter(|t| !classifier.labels.iter().any(|l| l == t))
        .collect();
    if !unseen.is_empty() {
        warn!("test labels never seen in training: {unseen:?}");
    }
    if aucs.is_empty() {
        report.text("mean_auc", "undefined");
    } else {
        report.number("mean_auc", aucs.iter().sum::<f64>() / aucs.len() as f64);
    }
    Ok(report)
}

/// The built-in grating benchmark; returns the report and the trained model.
pub fn evaluate(seed: u64, mode: Parallelism) -> Result<(Report, ModelBundle)> {
    let outcome = crate::synth::run_benchmark(seed, mode)?;
    let mut report = Report::new();
    report.count("seed", seed as usize);
    report.count("train_images", outcome.train_images);
    report.count("test_images", outcome.test_images);
    report.count("descriptor_length", outcome.model.descriptor_len());
    report.number("top1_accuracy", outcome.top1);
    report.number("precision@1", outcome.precision_at_1);
    for (i, rec) in outcome.model.provenance.layers.iter().enumerate() {
        report.number(format!("layer{}/initial_loss", i + 1), rec.initial_loss);
        report.number(format!("layer{}/final_loss", i + 1), rec.final_loss);
    }
    Ok((report, outcome.model))
}
