//! Sparse-target pre-training.
//!
//! Every mini-batch of layer responses is turned into a one-hot target
//! matrix: each row activates exactly one output, and a per-output inhibitor
//! keeps outputs from being selected more than their share of the epoch.
//! The layer is then nudged toward the target by an RMS-normalized SGD step.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featmap::SubPatch;
use crate::kernel_layer::{sq_dist, LayerConfig, LayerParams, WEIGHT_FLOOR};

/// Added to the RMS denominator of the adaptive step.
pub const ADAPTIVE_EPSILON: f64 = 1e-8;

/// One-hot target rows, stored as the active column of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTarget {
    cols: usize,
    active: Vec<usize>,
    pub active_value: f64,
    pub inactive_value: f64,
}

impl SparseTarget {
    pub fn rows(&self) -> usize {
        self.active.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Active column of every row.
    pub fn active_columns(&self) -> &[usize] {
        &self.active
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        if self.active[row] == col {
            self.active_value
        } else {
            self.inactive_value
        }
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![self.inactive_value; self.rows() * self.cols];
        for (r, &k) in self.active.iter().enumerate() {
            out[r * self.cols + k] = self.active_value;
        }
        out
    }
}

/// Per-output selection accumulator for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct InhibitorState {
    accumulators: Vec<f64>,
    counts: Vec<usize>,
    epoch_total: usize,
    // outputs whose count has reached ⌈N/N_h⌉ while N_h does not divide N
    over_quota: usize,
}

impl InhibitorState {
    pub fn new(num_outputs: usize, epoch_total: usize) -> Result<Self> {
        if num_outputs == 0 || epoch_total == 0 {
            return Err(Error::invalid("inhibitor needs positive output count and epoch size"));
        }
        Ok(Self {
            accumulators: vec![0.0; num_outputs],
            counts: vec![0; num_outputs],
            epoch_total,
            over_quota: 0,
        })
    }

    pub fn accumulators(&self) -> &[f64] {
        &self.accumulators
    }

    pub fn selection_counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn epoch_total(&self) -> usize {
        self.epoch_total
    }

    pub fn num_outputs(&self) -> usize {
        self.counts.len()
    }

    fn increment(&self) -> f64 {
        self.num_outputs() as f64 / self.epoch_total as f64
    }

    /// Whether output `j` has reached maximal inhibition. Outputs may be
    /// selected `⌊N/N_h⌋` times, and `N mod N_h` of them once more, so a full
    /// epoch assigns every output either `⌊N/N_h⌋` or `⌈N/N_h⌉` rows.
    pub fn is_saturated(&self, j: usize) -> bool {
        let quota = self.epoch_total / self.num_outputs();
        let extra = self.epoch_total % self.num_outputs();
        let c = self.counts[j];
        c > quota || (c == quota && self.over_quota >= extra)
    }

    fn select(&mut self, j: usize) {
        let quota = self.epoch_total / self.num_outputs();
        self.counts[j] += 1;
        if self.counts[j] == quota + 1 {
            self.over_quota += 1;
        }
        self.accumulators[j] = self.counts[j] as f64 * self.increment();
    }
}

/// Rescales `values` to `[0, 1]` over the whole slice; a constant slice maps
/// to all zeros.
pub fn min_max_normalize(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if span > 0.0 {
        for v in values.iter_mut() {
            *v = (*v - lo) / span;
        }
    } else {
        values.fill(0.0);
    }
}

fn select_rows(outputs: &[f64], num_outputs: usize, state: &mut InhibitorState, row_offset: usize) -> Result<Vec<usize>> {
    let mut normalized = outputs.to_vec();
    min_max_normalize(&mut normalized);
    let mut active = Vec::with_capacity(outputs.len() / num_outputs);
    for (n, row) in normalized.chunks_exact(num_outputs).enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, &o) in row.iter().enumerate() {
            if state.is_saturated(j) {
                continue;
            }
            let score = o - state.accumulators[j];
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((j, score));
            }
        }
        let (k, _) = best.ok_or(Error::CapacityExhausted { row: row_offset + n })?;
        state.select(k);
        active.push(k);
    }
    Ok(active)
}

/// Builds the one-hot target for a mini-batch of responses (`N_b × N_h`,
/// row-major) and returns the advanced inhibitor state.
pub fn epls_epoch_step(outputs: &[f64], state: &InhibitorState) -> Result<(SparseTarget, InhibitorState)> {
    let n_h = state.num_outputs();
    if outputs.is_empty() || outputs.len() % n_h != 0 {
        return Err(Error::invalid(format!(
            "{} outputs do not form rows of {n_h}",
            outputs.len()
        )));
    }
    if outputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("layer outputs must be finite"));
    }
    let mut next = state.clone();
    let active = select_rows(outputs, n_h, &mut next, 0)?;
    Ok((
        SparseTarget {
            cols: n_h,
            active,
            active_value: 1.0,
            inactive_value: 0.0,
        },
        next,
    ))
}

/// Relabels active and inactive entries.
pub fn remap_targets(t: &SparseTarget, active: f64, inactive: f64) -> Result<SparseTarget> {
    if active == inactive {
        return Err(Error::invalid("active and inactive values must differ"));
    }
    Ok(SparseTarget {
        active_value: active,
        inactive_value: inactive,
        ..t.clone()
    })
}

/// Mini-batch and step-size settings for [`pretrain_layer`].
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub patches_per_epoch: usize,
    pub epochs: usize,
    pub base_step: f64,
    /// Exponential smoothing of the squared-gradient average.
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1000,
            patches_per_epoch: 100_000,
            epochs: 5,
            base_step: 0.01,
            smoothing: 0.99,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patches_per_epoch == 0 || self.epochs == 0 {
            return Err(Error::invalid("pre-training counts must be positive"));
        }
        if !(self.base_step > 0.0) || !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::invalid("base step must be positive and smoothing in [0, 1)"));
        }
        Ok(())
    }
}

/// Outcome of [`pretrain_layer`].
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainFit {
    pub params: LayerParams,
    /// Mean squared target error per row, one entry per SGD step.
    pub loss_trace: Vec<f64>,
    /// Per-output selection counts at the end of every epoch.
    pub epoch_counts: Vec<Vec<usize>>,
}

// √b_i exp(-‖W_i - s‖² / α²) for one normalized patch
fn responses(filters: &[f64], weights: &[f64], dim: usize, inv_a2: f64, s: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = weights[i].sqrt() * (-sq_dist(&filters[i * dim..(i + 1) * dim], s) * inv_a2).exp();
    }
}

/// Fits a layer to sparse targets, producing the starting point for
/// [`crate::kernel_layer::train_layer`].
///
/// Filters start at distinct random pool patches and weights at `1/n₁`. The
/// fitted responses are the per-patch activations without the patch-norm
/// factor; targets are built from their min–max normalization.
pub fn pretrain_layer(
    pool: &[SubPatch],
    config: &LayerConfig,
    alpha: f64,
    pcfg: &PretrainConfig,
) -> Result<PretrainFit> {
    pcfg.validate()?;
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let n_h = config.num_filters;
    let nonzero: Vec<&SubPatch> = pool.iter().filter(|p| p.norm > 0.0).collect();
    if nonzero.len() < n_h {
        return Err(Error::degenerate(format!(
            "pre-training {n_h} filters needs as many nonzero sub-patches, got {}",
            nonzero.len()
        )));
    }
    let dim = nonzero[0].dim();
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);

    let mut filters = Vec::with_capacity(n_h * dim);
    for i in index::sample(&mut rng, nonzero.len(), n_h).into_vec() {
        filters.extend_from_slice(&nonzero[i].normalized);
    }
    let mut weights = vec![1.0 / n_h as f64; n_h];
    let inv_a2 = 1.0 / (alpha * alpha);

    let mut sq_filters = vec![0.0; n_h * dim];
    let mut sq_weights = vec![0.0; n_h];
    let mut step_count = 0i32;
    let mut loss_trace = Vec::new();
    let mut epoch_counts = Vec::with_capacity(pcfg.epochs);

    for _ in 0..pcfg.epochs {
        let mut state = InhibitorState::new(n_h, pcfg.patches_per_epoch)?;
        let picks: Vec<usize> = (0..pcfg.patches_per_epoch)
            .map(|_| rng.gen_range(0..nonzero.len()))
            .collect();
        for (b, batch) in picks.chunks(pcfg.batch_size).enumerate() {
            let rows = batch.len();
            let mut out = vec![0.0; rows * n_h];
            for (row, &pi) in out.chunks_exact_mut(n_h).zip(batch) {
                responses(&filters, &weights, dim, inv_a2, &nonzero[pi].normalized, row);
            }
            let active = select_rows(&out, n_h, &mut state, b * pcfg.batch_size)?;

            let mut loss = 0.0;
            let mut g_filters = vec![0.0; n_h * dim];
            let mut g_weights = vec![0.0; n_h];
            let scale = 1.0 / rows as f64;
            for ((row, &k), &pi) in out.chunks_exact(n_h).zip(&active).zip(batch) {
                let s = &nonzero[pi].normalized;
                for (i, &o) in row.iter().enumerate() {
                    let t = if i == k { 1.0 } else { 0.0 };
                    let r = o - t;
                    loss += r * r;
                    let d_out = 2.0 * r * scale;
                    // ∂o/∂b = o / (2b),  ∂o/∂W = o (2/α²)(s - W)
                    g_weights[i] += d_out * o / (2.0 * weights[i]);
                    let c = d_out * o * 2.0 * inv_a2;
                    for (gk, (sk, wk)) in g_filters[i * dim..(i + 1) * dim]
                        .iter_mut()
                        .zip(s.iter().zip(&filters[i * dim..(i + 1) * dim]))
                    {
                        *gk += c * (sk - wk);
                    }
                }
            }
            let loss = loss * scale;
            if !loss.is_finite() {
                return Err(Error::NumericFailure {
                    iteration: loss_trace.len(),
                    message: "pre-training loss is not finite".into(),
                });
            }
            loss_trace.push(loss);

            step_count += 1;
            let correction = 1.0 - pcfg.smoothing.powi(step_count);
            let rho = pcfg.smoothing;
            let adapt = |theta: &mut [f64], grad: &[f64], sq: &mut [f64]| {
                for ((p, &g), v) in theta.iter_mut().zip(grad).zip(sq.iter_mut()) {
                    *v = rho * *v + (1.0 - rho) * g * g;
                    let rms = (*v / correction).sqrt();
                    *p -= pcfg.base_step * g / (rms + ADAPTIVE_EPSILON);
                }
            };
            adapt(&mut filters, &g_filters, &mut sq_filters);
            adapt(&mut weights, &g_weights, &mut sq_weights);
            for b in weights.iter_mut() {
                *b = b.max(WEIGHT_FLOOR);
            }
        }
        epoch_counts.push(state.selection_counts().to_vec());
    }

    let params = LayerParams::new(filters, dim, weights, alpha, config.beta())?;
    Ok(PretrainFit {
        params,
        loss_trace,
        epoch_counts,
    })
}

/// Orientation filters for the gradient layer, before `α` and `β` are known.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationFilters {
    pub filters: Vec<f64>,
    pub weights: Vec<f64>,
}

impl OrientationFilters {
    pub fn into_params(self, alpha: f64, beta: f64) -> Result<LayerParams> {
        LayerParams::new(self.filters, 2, self.weights, alpha, beta)
    }
}

/// `n` unit vectors `[cos(2πi/n), sin(2πi/n)]` with weights `1/n`.
pub fn init_gradient_layer(num_orientations: usize) -> Result<OrientationFilters> {
    if num_orientations < 2 {
        return Err(Error::invalid("need at least 2 orientations"));
    }
    let n = num_orientations as f64;
    let filters = (0..num_orientations)
        .flat_map(|i| {
            let t = std::f64::consts::TAU * i as f64 / n;
            [t.cos(), t.sin()]
        })
        .collect();
    Ok(OrientationFilters {
        filters,
        weights: vec![1.0 / n; num_orientations],
    })
}
