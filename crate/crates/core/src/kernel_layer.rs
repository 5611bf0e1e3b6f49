//! A single kernel layer: the finite-dimensional embedding of the Gaussian
//! match kernel, its smoothing hyperparameters and the least-squares fit of
//! the filters to sampled sub-patch pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featmap::{FeatureMap, SubPatch, SubPatchGrid};
use crate::optim::{self, LbfgsbOptions, Termination};

/// Lower bound applied to every mixture weight during training.
pub const WEIGHT_FLOOR: f64 = 1e-8;

/// Pairs drawn when estimating the distance quantile of a large sample.
pub const ALPHA_MAX_PAIRS: usize = 100_000;

/// Pairs per work unit in [`Parallelism::Parallel`] mode.
const PAIR_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputKind {
    /// Raw contrast-normalized image patches.
    Patch,
    /// 1×1 sub-patches of the first-difference gradient.
    Gradient,
}

impl InputKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InputKind::Patch => "patch",
            InputKind::Gradient => "gradient",
        }
    }
}

impl std::str::FromStr for InputKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(InputKind::Patch),
            "gradient" => Ok(InputKind::Gradient),
            other => Err(Error::invalid(format!("unknown input kind '{other}'"))),
        }
    }
}

/// Hyperparameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerConfig {
    pub input_kind: InputKind,
    pub sub_patch_size: usize,
    pub subsampling_factor: usize,
    pub num_filters: usize,
    pub alpha_quantile: f64,
    pub num_training_pairs: usize,
    pub seed: u64,
}

impl LayerConfig {
    pub fn new(
        input_kind: InputKind,
        sub_patch_size: usize,
        subsampling_factor: usize,
        num_filters: usize,
    ) -> Self {
        Self {
            input_kind,
            sub_patch_size,
            subsampling_factor,
            num_filters,
            alpha_quantile: 0.1,
            num_training_pairs: 400_000,
            seed: 0,
        }
    }

    /// Checks the config for use as layer `index` (0-based).
    pub fn validate(&self, index: usize) -> Result<()> {
        if self.sub_patch_size == 0 || self.subsampling_factor == 0 || self.num_filters == 0 {
            return Err(Error::invalid(
                "sub-patch size, sub-sampling factor and filter count must be positive",
            ));
        }
        if self.num_training_pairs == 0 {
            return Err(Error::invalid("number of training pairs must be positive"));
        }
        if !(self.alpha_quantile > 0.0 && self.alpha_quantile < 1.0) {
            return Err(Error::invalid(format!(
                "alpha quantile must lie in (0, 1), got {}",
                self.alpha_quantile
            )));
        }
        if self.input_kind == InputKind::Gradient {
            if index != 0 {
                return Err(Error::invalid("gradient input is only allowed on the first layer"));
            }
            if self.sub_patch_size != 1 {
                return Err(Error::invalid("gradient input uses 1x1 sub-patches"));
            }
            if self.num_filters < 2 {
                return Err(Error::invalid("gradient layer needs at least 2 orientations"));
            }
        }
        Ok(())
    }

    /// Sub-patch dimensionality given the channel count of the layer input.
    pub fn patch_dim(&self, input_channels: usize) -> usize {
        input_channels * self.sub_patch_size * self.sub_patch_size
    }

    pub fn beta(&self) -> f64 {
        compute_beta(self.subsampling_factor)
    }
}

/// Trained parameters of one layer. `filters` is `num_filters × dim`,
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    filters: Vec<f64>,
    dim: usize,
    weights: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl LayerParams {
    pub fn new(filters: Vec<f64>, dim: usize, weights: Vec<f64>, alpha: f64, beta: f64) -> Result<Self> {
        if dim == 0 || weights.is_empty() || filters.len() != dim * weights.len() {
            return Err(Error::invalid(format!(
                "filter matrix of {} values does not match {} filters of dimension {dim}",
                filters.len(),
                weights.len()
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite() && beta > 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("alpha and beta must be positive, got {alpha}, {beta}")));
        }
        if weights.iter().any(|&b| !(b >= 0.0) || !b.is_finite()) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        if filters.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("filters must be finite"));
        }
        Ok(Self {
            filters,
            dim,
            weights,
            alpha,
            beta,
        })
    }

    pub fn num_filters(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn filters(&self) -> &[f64] {
        &self.filters
    }

    pub fn filter(&self, i: usize) -> &[f64] {
        &self.filters[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Rounds every filter and weight to the nearest `f32`, the precision the
    /// model file stores.
    pub fn quantize_f32(&mut self) {
        for v in self.filters.iter_mut().chain(self.weights.iter_mut()) {
            *v = f64::from(*v as f32);
        }
    }
}

/// Row-aligned pairs of normalized sub-patches with their Gaussian
/// similarity targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub dim: usize,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub targets: Vec<f64>,
}

impl PairBatch {
    /// Builds a batch from explicit vectors, computing targets with `alpha`.
    pub fn from_pairs(pairs: &[(Vec<f64>, Vec<f64>)], alpha: f64) -> Result<Self> {
        let dim = pairs.first().map_or(0, |p| p.0.len());
        if dim == 0 {
            return Err(Error::invalid("pair batch must be nonempty"));
        }
        let mut batch = PairBatch {
            dim,
            left: Vec::with_capacity(pairs.len() * dim),
            right: Vec::with_capacity(pairs.len() * dim),
            targets: Vec::with_capacity(pairs.len()),
        };
        for (a, b) in pairs {
            if a.len() != dim || b.len() != dim {
                return Err(Error::invalid("pair vectors must share one dimension"));
            }
            batch.push(a, b, alpha);
        }
        Ok(batch)
    }

    fn push(&mut self, a: &[f64], b: &[f64], alpha: f64) {
        self.left.extend_from_slice(a);
        self.right.extend_from_slice(b);
        self.targets.push(gaussian_similarity(a, b, alpha));
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn left_row(&self, p: usize) -> &[f64] {
        &self.left[p * self.dim..(p + 1) * self.dim]
    }

    pub fn right_row(&self, p: usize) -> &[f64] {
        &self.right[p * self.dim..(p + 1) * self.dim]
    }
}

/// `exp(-‖a - b‖² / (2α²))`
pub fn gaussian_similarity(a: &[f64], b: &[f64], alpha: f64) -> f64 {
    (-sq_dist(a, b) / (2.0 * alpha * alpha)).exp()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn empirical_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("quantile of an empty set"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile level {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Quantile of pairwise Euclidean distances between the nonzero vectors of
/// `sample`. All pairs are used when there are at most
/// [`ALPHA_MAX_PAIRS`]; otherwise that many distinct-index pairs are drawn
/// uniformly with the seeded generator.
pub fn estimate_alpha(sample: &[&[f64]], quantile: f64, seed: u64) -> Result<f64> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::invalid(format!("quantile must lie in (0, 1), got {quantile}")));
    }
    let nonzero: Vec<&[f64]> = sample
        .iter()
        .copied()
        .filter(|v| v.iter().any(|&x| x != 0.0))
        .collect();
    let n = nonzero.len();
    if n < 2 {
        return Err(Error::degenerate(format!(
            "alpha estimation needs at least 2 nonzero sub-patches, got {n}"
        )));
    }
    let all_pairs = n * (n - 1) / 2;
    let distances: Vec<f64> = if all_pairs <= ALPHA_MAX_PAIRS {
        let mut d = Vec::with_capacity(all_pairs);
        for i in 0..n {
            for j in i + 1..n {
                d.push(sq_dist(nonzero[i], nonzero[j]).sqrt());
            }
        }
        d
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..ALPHA_MAX_PAIRS)
            .map(|_| {
                let i = rng.gen_range(0..n);
                let mut j = rng.gen_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                sq_dist(nonzero[i], nonzero[j]).sqrt()
            })
            .collect()
    };
    let alpha = empirical_quantile(&distances, quantile)?;
    if !(alpha > 0.0) {
        return Err(Error::degenerate(
            "pairwise distance quantile is zero; alpha would vanish",
        ));
    }
    Ok(alpha)
}

/// Spatial smoothing width from the sub-sampling factor: `factor / √2`.
pub fn compute_beta(subsampling_factor: usize) -> f64 {
    subsampling_factor as f64 / std::f64::consts::SQRT_2
}

/// Evaluates `‖s‖ [√b_i exp(-‖W_i - s̃‖² / α²)]_i` on every sub-patch of the
/// grid. The output map has one channel per filter.
pub fn activation_h(patches: &SubPatchGrid, params: &LayerParams) -> Result<FeatureMap> {
    if patches.is_empty() {
        return Err(Error::invalid("activation of an empty sub-patch grid"));
    }
    if patches.dim() != params.dim {
        return Err(Error::invalid(format!(
            "sub-patch dimension {} does not match filter dimension {}",
            patches.dim(),
            params.dim
        )));
    }
    let n1 = params.num_filters();
    let inv_a2 = 1.0 / (params.alpha * params.alpha);
    let sqrt_b: Vec<f64> = params.weights.iter().map(|b| b.sqrt()).collect();
    let mut values = vec![0.0; patches.len() * n1];
    for (p, out) in patches.iter().zip(values.chunks_exact_mut(n1)) {
        if p.norm == 0.0 {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o = p.norm * sqrt_b[i] * (-sq_dist(params.filter(i), &p.normalized) * inv_a2).exp();
        }
    }
    Ok(FeatureMap::from_raw_unchecked(patches.cols, patches.rows, n1, values))
}

/// Output size of [`spatial_pool_g`] along one axis.
pub fn pooled_len(input_len: usize, subsampling_factor: usize) -> usize {
    input_len.div_ceil(subsampling_factor)
}

/// Gaussian spatial pooling `g(u) = Σ_z exp(-‖u - z‖² / (2β²)) h(z)`.
///
/// Output locations sit at `k·f + ⌊f/2⌋` along each axis; weights beyond a
/// radius of `3β` are dropped.
pub fn spatial_pool_g(h_map: &FeatureMap, beta: f64, subsampling_factor: usize) -> Result<FeatureMap> {
    if subsampling_factor == 0 {
        return Err(Error::invalid("sub-sampling factor must be positive"));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let (w, h, c) = (h_map.width(), h_map.height(), h_map.channels());
    let f = subsampling_factor;
    let (out_w, out_h) = (pooled_len(w, f), pooled_len(h, f));
    let radius = 3.0 * beta;
    // offsets beyond the map extent never contribute
    let r = radius.floor().min(w.max(h) as f64) as isize;
    let r2_max = radius * radius;
    let inv = 1.0 / (2.0 * beta * beta);

    // weights[(dr + r) * (2r + 1) + (dc + r)]
    let side = (2 * r + 1) as usize;
    let mut kernel = vec![0.0; side * side];
    for dr in -r..=r {
        for dc in -r..=r {
            let d2 = (dr * dr + dc * dc) as f64;
            if d2 <= r2_max {
                kernel[(dr + r) as usize * side + (dc + r) as usize] = (-d2 * inv).exp();
            }
        }
    }

    let src = h_map.values();
    let mut out = vec![0.0; out_w * out_h * c];
    for orow in 0..out_h {
        let ur = (orow * f + f / 2) as isize;
        for ocol in 0..out_w {
            let uc = (ocol * f + f / 2) as isize;
            let acc = &mut out[(orow * out_w + ocol) * c..(orow * out_w + ocol + 1) * c];
            for zr in (ur - r).max(0)..=(ur + r).min(h as isize - 1) {
                let krow = ((zr - ur) + r) as usize * side;
                for zc in (uc - r).max(0)..=(uc + r).min(w as isize - 1) {
                    let wgt = kernel[krow + ((zc - uc) + r) as usize];
                    if wgt == 0.0 {
                        continue;
                    }
                    let s = (zr as usize * w + zc as usize) * c;
                    for (a, v) in acc.iter_mut().zip(&src[s..s + c]) {
                        *a += wgt * v;
                    }
                }
            }
        }
    }
    Ok(FeatureMap::from_raw_unchecked(out_w, out_h, c, out))
}

/// `Σ_u g(u; A)ᵀ g(u; B)` for two pooled maps of identical shape.
pub fn approx_kernel(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    if (a.width(), a.height(), a.channels()) != (b.width(), b.height(), b.channels()) {
        return Err(Error::invalid(format!(
            "kernel maps differ in shape: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum())
}

/// How objective evaluations are reduced over pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    /// One sequential pass; bit-reproducible.
    #[default]
    Reference,
    /// Fixed-size chunks evaluated on the rayon pool and summed in chunk
    /// order. Agrees with the reference to about 1e-10 relative.
    Parallel,
}

/// Loss of the least-squares kernel fit and its exact gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub loss: f64,
    /// Same layout as [`LayerParams::filters`].
    pub grad_filters: Vec<f64>,
    pub grad_weights: Vec<f64>,
}

struct Partial {
    loss: f64,
    // Σ_p r b_i e_i  and  Σ_p r b_i e_i (s + s')
    coef: Vec<f64>,
    moment: Vec<f64>,
    grad_weights: Vec<f64>,
}

impl Partial {
    fn zeros(n1: usize, dim: usize) -> Self {
        Self {
            loss: 0.0,
            coef: vec![0.0; n1],
            moment: vec![0.0; n1 * dim],
            grad_weights: vec![0.0; n1],
        }
    }

    fn add(&mut self, other: &Partial) {
        self.loss += other.loss;
        for (a, b) in self.coef.iter_mut().zip(&other.coef) {
            *a += b;
        }
        for (a, b) in self.moment.iter_mut().zip(&other.moment) {
            *a += b;
        }
        for (a, b) in self.grad_weights.iter_mut().zip(&other.grad_weights) {
            *a += b;
        }
    }
}

fn accumulate(filters: &[f64], weights: &[f64], inv_a2: f64, batch: &PairBatch, range: std::ops::Range<usize>) -> Partial {
    let dim = batch.dim;
    let n1 = weights.len();
    let mut acc = Partial::zeros(n1, dim);
    let mut e = vec![0.0; n1];
    let mut sum = vec![0.0; dim];
    for p in range {
        let (s, t) = (batch.left_row(p), batch.right_row(p));
        let mut approx = 0.0;
        for (i, ei) in e.iter_mut().enumerate() {
            let w = &filters[i * dim..(i + 1) * dim];
            let d = sq_dist(w, s) + sq_dist(w, t);
            *ei = (-d * inv_a2).exp();
            approx += weights[i] * *ei;
        }
        let r = batch.targets[p] - approx;
        acc.loss += r * r;
        for (k, v) in sum.iter_mut().enumerate() {
            *v = s[k] + t[k];
        }
        for i in 0..n1 {
            acc.grad_weights[i] -= 2.0 * r * e[i];
            let c = r * weights[i] * e[i];
            if c == 0.0 {
                continue;
            }
            acc.coef[i] += c;
            for (m, v) in acc.moment[i * dim..(i + 1) * dim].iter_mut().zip(&sum) {
                *m += c * v;
            }
        }
    }
    acc
}

fn evaluate(filters: &[f64], weights: &[f64], alpha: f64, batch: &PairBatch, mode: Parallelism) -> ObjectiveEval {
    let dim = batch.dim;
    let n1 = weights.len();
    let inv_a2 = 1.0 / (alpha * alpha);
    let total = match mode {
        Parallelism::Reference => accumulate(filters, weights, inv_a2, batch, 0..batch.len()),
        Parallelism::Parallel => {
            let chunks: Vec<Partial> = (0..batch.len().div_ceil(PAIR_CHUNK))
                .into_par_iter()
                .map(|k| {
                    let end = ((k + 1) * PAIR_CHUNK).min(batch.len());
                    accumulate(filters, weights, inv_a2, batch, k * PAIR_CHUNK..end)
                })
                .collect();
            let mut total = Partial::zeros(n1, dim);
            for c in &chunks {
                total.add(c);
            }
            total
        }
    };
    // dL/dW_i = (4/α²) Σ_p r b_i e_i (2 W_i - s - s')
    let scale = 4.0 * inv_a2;
    let mut grad_filters = vec![0.0; n1 * dim];
    for i in 0..n1 {
        for k in 0..dim {
            let idx = i * dim + k;
            grad_filters[idx] = scale * (2.0 * filters[idx] * total.coef[i] - total.moment[idx]);
        }
    }
    ObjectiveEval {
        loss: total.loss,
        grad_filters,
        grad_weights: total.grad_weights,
    }
}

/// Sum over pairs of `(target - Σ_i b_i e^{-‖W_i - s̃‖²/α²} e^{-‖W_i - s̃'‖²/α²})²`
/// and its analytic gradient with respect to every filter and weight.
pub fn objective_and_gradient(params: &LayerParams, batch: &PairBatch) -> Result<ObjectiveEval> {
    objective_and_gradient_with(params, batch, Parallelism::Reference)
}

pub fn objective_and_gradient_with(
    params: &LayerParams,
    batch: &PairBatch,
    mode: Parallelism,
) -> Result<ObjectiveEval> {
    if batch.is_empty() {
        return Err(Error::invalid("objective over an empty pair batch"));
    }
    if batch.dim != params.dim {
        return Err(Error::invalid(format!(
            "pair dimension {} does not match filter dimension {}",
            batch.dim, params.dim
        )));
    }
    Ok(evaluate(&params.filters, &params.weights, params.alpha, batch, mode))
}

/// Mean squared residual of `params` on `batch`.
pub fn mean_squared_residual(params: &LayerParams, batch: &PairBatch) -> Result<f64> {
    Ok(objective_and_gradient(params, batch)?.loss / batch.len() as f64)
}

/// Optimizer settings and reduction mode for [`train_layer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub optimizer: LbfgsbOptions,
    pub parallelism: Parallelism,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            optimizer: LbfgsbOptions {
                memory: 10,
                pg_tol: 1e-5,
                max_iter: 200,
                initial_step: 1.0,
                max_backtracks: 40,
            },
            parallelism: Parallelism::Reference,
        }
    }
}

/// Result of [`train_layer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFit {
    pub params: LayerParams,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub termination: Termination,
}

/// Fits filters and weights to the pair batch with the bounded quasi-Newton
/// optimizer. Filters are unbounded; weights stay above [`WEIGHT_FLOOR`].
pub fn train_layer(
    pairs: &PairBatch,
    config: &LayerConfig,
    init: &LayerParams,
    opts: &TrainOptions,
) -> Result<LayerFit> {
    if init.num_filters() != config.num_filters {
        return Err(Error::invalid(format!(
            "init has {} filters, config asks for {}",
            init.num_filters(),
            config.num_filters
        )));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("training needs at least one pair"));
    }
    if pairs.dim != init.dim {
        return Err(Error::invalid(format!(
            "pair dimension {} does not match filter dimension {}",
            pairs.dim, init.dim
        )));
    }
    let nw = init.filters.len();
    let n = nw + init.num_filters();
    let mut x0 = init.filters.clone();
    x0.extend_from_slice(&init.weights);
    let mut lower = vec![f64::NEG_INFINITY; n];
    lower[nw..].fill(WEIGHT_FLOOR);
    let upper = vec![f64::INFINITY; n];
    let alpha = init.alpha;

    let result = optim::minimize(
        |x, g| {
            let ev = evaluate(&x[..nw], &x[nw..], alpha, pairs, opts.parallelism);
            g[..nw].copy_from_slice(&ev.grad_filters);
            g[nw..].copy_from_slice(&ev.grad_weights);
            ev.loss
        },
        &x0,
        &lower,
        &upper,
        &opts.optimizer,
    )?;

    let mut params = init.clone();
    params.filters.copy_from_slice(&result.x[..nw]);
    params.weights.copy_from_slice(&result.x[nw..]);
    Ok(LayerFit {
        params,
        initial_loss: result.initial_f,
        final_loss: result.f,
        iterations: result.iterations,
        termination: result.termination,
    })
}

/// Draws `count` pairs uniformly with replacement from the nonzero-norm
/// sub-patches of `pool`, with targets computed at `alpha`.
pub fn sample_training_pairs(pool: &[SubPatch], count: usize, alpha: f64, seed: u64) -> Result<PairBatch> {
    let nonzero: Vec<&SubPatch> = pool.iter().filter(|p| p.norm > 0.0).collect();
    if nonzero.len() < 2 {
        return Err(Error::degenerate(format!(
            "pair sampling needs at least 2 nonzero sub-patches, got {}",
            nonzero.len()
        )));
    }
    if count == 0 {
        return Err(Error::invalid("pair count must be positive"));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let dim = nonzero[0].dim();
    if nonzero.iter().any(|p| p.dim() != dim) {
        return Err(Error::invalid("sub-patches in the pool differ in dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = PairBatch {
        dim,
        left: Vec::with_capacity(count * dim),
        right: Vec::with_capacity(count * dim),
        targets: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let a = nonzero[rng.gen_range(0..nonzero.len())];
        let b = nonzero[rng.gen_range(0..nonzero.len())];
        batch.push(&a.normalized, &b.normalized, alpha);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featmap::extract_subpatches;

    fn params(filters: Vec<f64>, dim: usize, weights: Vec<f64>, alpha: f64) -> LayerParams {
        LayerParams::new(filters, dim, weights, alpha, 1.0).unwrap()
    }

    #[test]
    fn beta_rule() {
        assert!((compute_beta(4) - 2.828_427_124_746_19).abs() < 1e-12);
        assert!((compute_beta(2) - 1.414_213_562_373_095).abs() < 1e-12);
        assert!((compute_beta(1) - 0.707_106_781_186_547_5).abs() < 1e-12);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(empirical_quantile(&[5.0, 1.0, 4.0, 2.0, 3.0], 0.5).unwrap(), 3.0);
        assert!((empirical_quantile(&[0.0, 10.0], 0.25).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn alpha_of_two_vectors_is_their_distance() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        for q in [0.1, 0.5, 0.9] {
            let alpha = estimate_alpha(&[&a, &b], q, 0).unwrap();
            assert!((alpha - 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_rejects_degenerate_samples() {
        let a = [1.0, 0.0];
        let z = [0.0, 0.0];
        assert!(matches!(estimate_alpha(&[&a, &z], 0.1, 0), Err(Error::DegenerateSample(_))));
        assert!(matches!(estimate_alpha(&[&a, &a, &a], 0.1, 0), Err(Error::DegenerateSample(_))));
        assert!(estimate_alpha(&[&a, &[0.0, 1.0]], 1.5, 0).is_err());
    }

    #[test]
    fn activation_matches_hand_evaluation() {
        let p = params(vec![1.0, 0.0, 0.0, 1.0], 2, vec![1.0, 1.0], 1.0);
        let map = FeatureMap::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let h = activation_h(&extract_subpatches(&map, 1).unwrap(), &p).unwrap();
        assert_eq!(h.channels(), 2);
        assert!((h.values()[0] - 1.0).abs() < 1e-15);
        assert!((h.values()[1] - (-2f64).exp()).abs() < 1e-15);
        assert!((h.values()[1] - 0.135_335).abs() < 1e-6);
    }

    #[test]
    fn activation_of_zero_patch_is_zero() {
        let p = params(vec![0.3, 0.4], 2, vec![2.0], 0.5);
        let map = FeatureMap::zeros(3, 3, 2).unwrap();
        let h = activation_h(&extract_subpatches(&map, 1).unwrap(), &p).unwrap();
        assert!(h.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activation_scales_with_patch_norm() {
        let p = params(vec![0.6, 0.8, 1.0, 0.0, -0.2, 0.3], 2, vec![0.5, 2.0, 1.0], 0.7);
        let map = FeatureMap::new(1, 1, 2, vec![0.3, -0.4]).unwrap();
        let base = activation_h(&extract_subpatches(&map, 1).unwrap(), &p).unwrap();
        let scaled = activation_h(&extract_subpatches(&map.scaled(3.0).unwrap(), 1).unwrap(), &p).unwrap();
        for (a, b) in base.values().iter().zip(scaled.values()) {
            assert!((3.0 * a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn activation_rejects_dimension_mismatch() {
        let p = params(vec![1.0, 0.0, 0.0], 3, vec![1.0], 1.0);
        let map = FeatureMap::zeros(2, 2, 1).unwrap();
        assert!(activation_h(&extract_subpatches(&map, 1).unwrap(), &p).is_err());
    }

    #[test]
    fn pooling_center_spike() {
        let mut v = vec![0.0; 9];
        v[4] = 1.0;
        let h = FeatureMap::new(3, 3, 1, v).unwrap();
        let g = spatial_pool_g(&h, 1.0, 1).unwrap();
        assert_eq!((g.width(), g.height()), (3, 3));
        assert_eq!(g.at(1, 1)[0], 1.0);
        for (r, c) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
            assert!((g.at(r, c)[0] - 0.606_530_659_712_633_4).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_constant_with_wide_beta() {
        let n = 5;
        let h = FeatureMap::new(n, n, 2, vec![0.7; n * n * 2]).unwrap();
        let g = spatial_pool_g(&h, 1e6, 1).unwrap();
        for v in g.values() {
            assert!((v - 0.7 * (n * n) as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling_output_grid() {
        let h = FeatureMap::zeros(7, 5, 3).unwrap();
        let g = spatial_pool_g(&h, 2.0, 2).unwrap();
        assert_eq!((g.width(), g.height(), g.channels()), (4, 3, 3));
        // stride 2, offset 1: output (0,0) sits on input (1,1)
        let mut v = vec![0.0; 25];
        v[6] = 4.0;
        let h = FeatureMap::new(5, 5, 1, v).unwrap();
        assert_eq!(spatial_pool_g(&h, 0.5, 2).unwrap().at(0, 0)[0], 4.0);
    }

    #[test]
    fn pooling_truncates_beyond_three_beta() {
        let mut v = vec![0.0; 16];
        v[0] = 1.0;
        let h = FeatureMap::new(16, 1, 1, v).unwrap();
        let g = spatial_pool_g(&h, 1.0, 1).unwrap();
        assert!(g.at(0, 3)[0] > 0.0);
        assert_eq!(g.at(0, 4)[0], 0.0);
    }

    #[test]
    fn approx_kernel_basics() {
        let a = FeatureMap::new(1, 1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(approx_kernel(&a, &a).unwrap(), 25.0);
        let z = FeatureMap::zeros(1, 1, 2).unwrap();
        assert_eq!(approx_kernel(&a, &z).unwrap(), 0.0);
        let b = FeatureMap::zeros(1, 2, 2).unwrap();
        assert!(approx_kernel(&a, &b).is_err());
    }

    #[test]
    fn objective_perfect_fit_is_zero() {
        let s = vec![0.6, 0.8];
        let batch = PairBatch::from_pairs(&[(s.clone(), s.clone())], 0.5).unwrap();
        assert_eq!(batch.targets, vec![1.0]);
        let p = params(s, 2, vec![1.0], 0.5);
        let ev = objective_and_gradient(&p, &batch).unwrap();
        assert_eq!(ev.loss, 0.0);
    }

    #[test]
    fn objective_at_zero_weights() {
        let pairs = vec![
            (vec![1.0, 0.0], vec![0.0, 1.0]),
            (vec![0.6, 0.8], vec![0.8, 0.6]),
        ];
        let alpha = 0.9;
        let batch = PairBatch::from_pairs(&pairs, alpha).unwrap();
        let w = vec![0.2, -0.1, 0.5, 0.5];
        let p = params(w.clone(), 2, vec![0.0, 0.0], alpha);
        let ev = objective_and_gradient(&p, &batch).unwrap();
        let sum_t2: f64 = batch.targets.iter().map(|t| t * t).sum();
        assert!((ev.loss - sum_t2).abs() < 1e-14);
        for i in 0..2 {
            let wi = &w[i * 2..i * 2 + 2];
            let expect: f64 = -2.0
                * pairs
                    .iter()
                    .zip(&batch.targets)
                    .map(|((a, b), t)| {
                        t * (-sq_dist(wi, a) / (alpha * alpha)).exp()
                            * (-sq_dist(wi, b) / (alpha * alpha)).exp()
                    })
                    .sum::<f64>();
            assert!((ev.grad_weights[i] - expect).abs() < 1e-14);
        }
        // with every weight at zero the filters receive no gradient
        assert!(ev.grad_filters.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn parallel_mode_agrees_with_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool: Vec<SubPatch> = (0..200)
            .map(|i| SubPatch::from_raw((0, i), (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let batch = sample_training_pairs(&pool, 10_000, 0.8, 1).unwrap();
        let w: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = params(w, 4, vec![0.3; 6], 0.8);
        let a = objective_and_gradient_with(&p, &batch, Parallelism::Reference).unwrap();
        let b = objective_and_gradient_with(&p, &batch, Parallelism::Parallel).unwrap();
        assert!((a.loss - b.loss).abs() <= 1e-10 * a.loss.abs());
        for (x, y) in a.grad_filters.iter().zip(&b.grad_filters).chain(a.grad_weights.iter().zip(&b.grad_weights)) {
            assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-3));
        }
    }

    #[test]
    fn pair_sampling_is_seeded() {
        let pool = vec![
            SubPatch::from_raw((0, 0), vec![1.0, 0.0]),
            SubPatch::from_raw((0, 1), vec![0.0, 0.0]),
            SubPatch::from_raw((0, 2), vec![0.0, 2.0]),
        ];
        let a = sample_training_pairs(&pool, 50, 0.7, 9).unwrap();
        let b = sample_training_pairs(&pool, 50, 0.7, 9).unwrap();
        assert_eq!(a, b);
        let other = (-2.0 / (2.0 * 0.49f64)).exp();
        for p in 0..a.len() {
            let (l, r) = (a.left_row(p), a.right_row(p));
            assert!(l != [0.0, 0.0] && r != [0.0, 0.0]);
            if l == r {
                assert_eq!(a.targets[p], 1.0);
            } else {
                assert!((a.targets[p] - other).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pair_sampling_needs_two_nonzero() {
        let pool = vec![
            SubPatch::from_raw((0, 0), vec![1.0, 0.0]),
            SubPatch::from_raw((0, 1), vec![0.0, 0.0]),
        ];
        assert!(matches!(sample_training_pairs(&pool, 5, 1.0, 0), Err(Error::DegenerateSample(_))));
    }

    #[test]
    fn training_keeps_weights_above_floor() {
        let pool: Vec<SubPatch> = (0..8)
            .map(|k| {
                let t = k as f64 * 0.7;
                SubPatch::from_raw((0, k), vec![t.cos(), t.sin()])
            })
            .collect();
        let batch = sample_training_pairs(&pool, 200, 0.5, 4).unwrap();
        let cfg = LayerConfig::new(InputKind::Patch, 1, 1, 3);
        let init = params(vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0], 2, vec![0.0; 3], 0.5);
        let fit = train_layer(&batch, &cfg, &init, &TrainOptions::default()).unwrap();
        assert!(fit.params.weights().iter().all(|&b| b >= WEIGHT_FLOOR));
        assert!(fit.final_loss <= fit.initial_loss);
    }

    #[test]
    fn training_from_optimum_is_stationary() {
        let s = vec![0.6, 0.8];
        let batch = PairBatch::from_pairs(&[(s.clone(), s.clone())], 0.5).unwrap();
        let init = params(s, 2, vec![1.0], 0.5);
        let cfg = LayerConfig::new(InputKind::Patch, 1, 1, 1);
        let fit = train_layer(&batch, &cfg, &init, &TrainOptions::default()).unwrap();
        assert!(fit.iterations <= 1);
        assert_eq!(fit.final_loss, 0.0);
        assert_eq!(fit.params, init);
    }

    #[test]
    fn config_validation() {
        let mut c = LayerConfig::new(InputKind::Gradient, 1, 4, 16);
        assert!(c.validate(0).is_ok());
        assert!(c.validate(1).is_err());
        c.sub_patch_size = 2;
        assert!(c.validate(0).is_err());
        let mut c = LayerConfig::new(InputKind::Patch, 2, 2, 100);
        c.alpha_quantile = 1.0;
        assert!(c.validate(0).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(LayerParams::new(vec![0.0; 4], 2, vec![1.0, -1.0], 1.0, 1.0).is_err());
        assert!(LayerParams::new(vec![0.0; 3], 2, vec![1.0, 1.0], 1.0, 1.0).is_err());
        assert!(LayerParams::new(vec![0.0; 4], 2, vec![1.0, 1.0], 0.0, 1.0).is_err());
    }
}
