//! Quick invariant checks against the brute-force oracles, run by `cskn selftest`.

use cskn::epls::{epls_epoch_step, InhibitorState};
use cskn::evalkit::{precision_at_q, roc_auc, RetrievalRun};
use cskn::featmap::{build_gradient_map, extract_subpatches};
use cskn::kernel_layer::{
    activation_h, approx_kernel, objective_and_gradient, spatial_pool_g, LayerParams, PairBatch,
};
use cskn::network::spp_pool;
use cskn::oracle::{exact_match_kernel, finite_diff_gradient, gradient_relative_error};
use cskn::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(&mut ChaCha8Rng) -> Result<String, String>;

const CHECKS: &[(&str, Check)] = &[
    ("kernel_fit_gradient", gradient_check),
    ("exact_kernel_symmetry", exact_kernel_check),
    ("approx_kernel_cauchy_schwarz", approx_kernel_check),
    ("gradient_map_directions", gradient_map_check),
    ("epls_balance", epls_check),
    ("pyramid_pooling", spp_check),
    ("retrieval_and_auc", metrics_check),
    ("model_round_trip", persistence_check),
];

pub fn run_selftest(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CHECKS
        .iter()
        .map(|&(name, check)| {
            let (passed, detail) = match check(&mut rng) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckOutcome { name, passed, detail }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn random_map(rng: &mut ChaCha8Rng, side: usize, channels: usize) -> FeatureMap {
    let v = (0..side * side * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FeatureMap::new(side, side, channels, v).expect("finite values")
}

fn gradient_check(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (d, n1, pairs) = (rng.gen_range(1..=5), rng.gen_range(1..=8), rng.gen_range(1..=20));
        let alpha = rng.gen_range(0.5..1.5);
        // off the unit sphere, where a filter can coincide with every pair
        // and leave only round-off in the gradient
        let mut filters: Vec<f64> = (0..n1).flat_map(|_| unit(rng, d)).collect();
        filters.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        let weights: Vec<f64> = (0..n1).map(|_| rng.gen_range(0.05..1.0)).collect();
        let list: Vec<_> = (0..pairs).map(|_| (unit(rng, d), unit(rng, d))).collect();
        let batch = PairBatch::from_pairs(&list, alpha).map_err(|e| e.to_string())?;
        let params = LayerParams::new(filters.clone(), d, weights.clone(), alpha, 1.0).map_err(|e| e.to_string())?;
        let ev = objective_and_gradient(&params, &batch).map_err(|e| e.to_string())?;
        let nw = filters.len();
        let x: Vec<f64> = filters.iter().chain(&weights).copied().collect();
        let loss = |x: &[f64]| {
            let p = LayerParams::new(x[..nw].to_vec(), d, x[nw..].to_vec(), alpha, 1.0).expect("valid params");
            objective_and_gradient(&p, &batch).expect("matching batch").loss
        };
        let numeric = finite_diff_gradient(loss, &x, 1e-5).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = ev.grad_filters.iter().chain(&ev.grad_weights).copied().collect();
        worst = worst.max(gradient_relative_error(&analytic, &numeric, ev.loss).map_err(|e| e.to_string())?);
    }
    ensure(worst < 1e-4, || format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn exact_kernel_check(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let (a, b) = (random_map(rng, 5, 2), random_map(rng, 5, 2));
    let k = |x: &FeatureMap, y: &FeatureMap| exact_match_kernel(x, y, 2, 0.8, 1.0).map_err(|e| e.to_string());
    let (ab, ba, aa, bb) = (k(&a, &b)?, k(&b, &a)?, k(&a, &a)?, k(&b, &b)?);
    ensure(ab == ba, || format!("K(A,B) = {ab} but K(B,A) = {ba}"))?;
    ensure(ab * ab <= aa * bb * (1.0 + 1e-12), || "Cauchy-Schwarz violated".into())?;
    let scaled = k(&a.scaled(3.0).map_err(|e| e.to_string())?, &b)?;
    ensure((scaled - 3.0 * ab).abs() <= 1e-9 * ab.abs(), || format!("scaling gave {scaled}, expected {}", 3.0 * ab))?;
    Ok(format!("K(A,B) = {ab:.6}"))
}

fn approx_kernel_check(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let filters: Vec<f64> = (0..6).flat_map(|_| unit(rng, 4)).collect();
    let params = LayerParams::new(filters, 4, vec![0.5; 6], 0.8, 2f64.sqrt()).map_err(|e| e.to_string())?;
    let embed = |m: &FeatureMap| -> Result<FeatureMap, String> {
        let grid = extract_subpatches(m, 2).map_err(|e| e.to_string())?;
        let h = activation_h(&grid, &params).map_err(|e| e.to_string())?;
        spatial_pool_g(&h, params.beta, 2).map_err(|e| e.to_string())
    };
    let (a, b) = (embed(&random_map(rng, 7, 1))?, embed(&random_map(rng, 7, 1))?);
    let k = |x: &FeatureMap, y: &FeatureMap| approx_kernel(x, y).map_err(|e| e.to_string());
    let (ab, ba, aa, bb) = (k(&a, &b)?, k(&b, &a)?, k(&a, &a)?, k(&b, &b)?);
    ensure(ab == ba && aa >= 0.0 && bb >= 0.0, || "asymmetric or negative".into())?;
    ensure(ab * ab <= aa * bb * (1.0 + 1e-12), || "Cauchy-Schwarz violated".into())?;
    Ok(format!("normalized similarity {:.4}", ab / (aa * bb).sqrt()))
}

fn gradient_map_check(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let noisy = FeatureMap::new(9, 9, 1, (0..81).map(|_| rng.gen::<f64>()).collect()).map_err(|e| e.to_string())?;
    let g = build_gradient_map(&noisy).map_err(|e| e.to_string())?;
    for (m, d) in g.magnitude.iter().zip(&g.direction) {
        if *m > 0.0 {
            let n = d[0] * d[0] + d[1] * d[1];
            ensure((n - 1.0).abs() < 1e-6, || format!("direction norm² {n}"))?;
        }
    }
    Ok(format!("{}x{} gradient map", g.width, g.height))
}

fn epls_check(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let (n, n_h) = (1003, 7);
    let mut state = InhibitorState::new(n_h, n).map_err(|e| e.to_string())?;
    let mut done = 0;
    while done < n {
        let rows = 64.min(n - done);
        let outputs: Vec<f64> = (0..rows * n_h).map(|_| rng.gen()).collect();
        let (t, next) = epls_epoch_step(&outputs, &state).map_err(|e| e.to_string())?;
        ensure(t.active_columns().len() == rows, || "row without a winner".into())?;
        state = next;
        done += rows;
    }
    let (lo, hi) = (n / n_h, n.div_ceil(n_h));
    let counts = state.selection_counts();
    ensure(counts.iter().all(|&c| (lo..=hi).contains(&c)), || format!("counts {counts:?}"))?;
    Ok(format!("counts within [{lo}, {hi}]"))
}

fn spp_check(_: &mut ChaCha8Rng) -> Result<String, String> {
    let mut v = vec![0.0; 16];
    v[0] = 7.0;
    let map = FeatureMap::new(4, 4, 1, v).map_err(|e| e.to_string())?;
    let d = spp_pool(&map, &[1, 2]).map_err(|e| e.to_string())?;
    ensure(d.values == [7.0, 7.0, 0.0, 0.0, 0.0], || format!("got {:?}", d.values))?;
    let big = FeatureMap::zeros(13, 13, 16).map_err(|e| e.to_string())?;
    let len = spp_pool(&big, &[1, 2, 3, 6]).map_err(|e| e.to_string())?.len();
    ensure(len == 16 * 50, || format!("descriptor length {len}"))?;
    Ok("spike example and 50-bin length".into())
}

fn metrics_check(_: &mut ChaCha8Rng) -> Result<String, String> {
    let auc = roc_auc(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).map_err(|e| e.to_string())?;
    ensure((auc - 0.75).abs() < 1e-12, || format!("AUC {auc}"))?;
    let run = RetrievalRun {
        query: 0,
        ranking: (0..5).collect(),
        distances: vec![0.0; 5],
        relevant: vec![true, false, true, true, false],
    };
    let p = precision_at_q(&run, 5).map_err(|e| e.to_string())?;
    ensure(p == 0.6, || format!("precision@5 {p}"))?;
    Ok("AUC 0.75 and precision@5 0.6".into())
}

fn persistence_check(rng: &mut ChaCha8Rng) -> Result<String, String> {
    use cskn::kernel_layer::{InputKind, LayerConfig};
    use cskn::network::{Provenance, TrainedLayer, FORMAT_VERSION};

    let layer = |kind, e, f, n1: usize, dim: usize, rng: &mut ChaCha8Rng| -> Result<TrainedLayer, String> {
        let filters = (0..n1 * dim).map(|_| f64::from(rng.gen::<f32>())).collect();
        let weights = (0..n1).map(|_| f64::from(rng.gen::<f32>() + 1e-3)).collect();
        let params = LayerParams::new(filters, dim, weights, rng.gen(), 1.5).map_err(|e| e.to_string())?;
        Ok(TrainedLayer {
            config: LayerConfig::new(kind, e, f, n1),
            params,
        })
    };
    let model = cskn::ModelBundle {
        format_version: FORMAT_VERSION,
        input_size: 16,
        input_channels: 1,
        layers: vec![
            layer(InputKind::Gradient, 1, 2, 4, 2, rng)?,
            layer(InputKind::Patch, 2, 2, 3, 16, rng)?,
        ],
        pyramid_levels: vec![1, 2, 3],
        provenance: Provenance::default(),
    };
    let bytes = crate::persist::encode_model(&model);
    let back = crate::persist::decode_model(&bytes).map_err(|e| e.to_string())?;
    ensure(back == model, || "decoded model differs".into())?;
    ensure(crate::persist::encode_model(&back) == bytes, || "re-encoding differs".into())?;
    Ok(format!("{} bytes", bytes.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for outcome in run_selftest(0) {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }
}
