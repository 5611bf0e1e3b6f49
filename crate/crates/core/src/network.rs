//! Multi-layer networks: feedforward evaluation, spatial pyramid pooling and
//! the layer-by-layer unsupervised training pipeline.

use log::{debug, info, warn};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::epls::{self, PretrainConfig, ADAPTIVE_EPSILON};
use crate::error::{Error, Result};
use crate::featmap::{build_gradient_map, extract_subpatches, FeatureMap, SubPatch};
use crate::kernel_layer::{
    activation_h, compute_beta, estimate_alpha, sample_training_pairs, spatial_pool_g, train_layer,
    InputKind, LayerConfig, LayerParams, Parallelism, TrainOptions, WEIGHT_FLOOR,
};
use crate::optim::LbfgsbOptions;

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_PYRAMID: [usize; 4] = [1, 2, 3, 6];
pub const DEFAULT_INPUT_SIZE: usize = 200;

/// One trained layer of a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedLayer {
    pub config: LayerConfig,
    pub params: LayerParams,
}

/// Per-layer training record kept in the model provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub pool_size: usize,
    /// Kernel-fit loss at the pre-trained initialization.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
}

/// How a bundle was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub seed: u64,
    pub pretrain: PretrainConfig,
    pub optimizer: LbfgsbOptions,
    pub weight_floor: f64,
    pub adaptive_epsilon: f64,
    pub layers: Vec<LayerRecord>,
}

impl Default for Provenance {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain: PretrainConfig::default(),
            optimizer: TrainOptions::default().optimizer,
            weight_floor: WEIGHT_FLOOR,
            adaptive_epsilon: ADAPTIVE_EPSILON,
            layers: Vec::new(),
        }
    }
}

/// Everything needed to turn an `m × m` image into a descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub format_version: u32,
    pub input_size: usize,
    pub input_channels: usize,
    pub layers: Vec<TrainedLayer>,
    pub pyramid_levels: Vec<usize>,
    pub provenance: Provenance,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("model has no layers"));
        }
        validate_levels(&self.pyramid_levels)?;
        if self.input_size == 0 || self.input_channels == 0 {
            return Err(Error::invalid("input size and channels must be positive"));
        }
        let mut channels = self.input_channels;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.config.validate(i)?;
            let expect = match layer.config.input_kind {
                InputKind::Gradient => {
                    if self.input_channels != 1 {
                        return Err(Error::invalid("gradient input requires single-channel images"));
                    }
                    2
                }
                InputKind::Patch => layer.config.patch_dim(channels),
            };
            if layer.params.dim() != expect {
                return Err(Error::invalid(format!(
                    "layer {i}: filter dimension {} but input provides {expect}",
                    layer.params.dim()
                )));
            }
            if layer.params.num_filters() != layer.config.num_filters {
                return Err(Error::invalid(format!(
                    "layer {i}: {} filters but config asks for {}",
                    layer.params.num_filters(),
                    layer.config.num_filters
                )));
            }
            channels = layer.config.num_filters;
        }
        Ok(())
    }

    /// Length of the descriptors this model produces.
    pub fn descriptor_len(&self) -> usize {
        let p = self.layers.last().map_or(0, |l| l.config.num_filters);
        p * self.pyramid_levels.iter().map(|n| n * n).sum::<usize>()
    }
}

fn validate_levels(levels: &[usize]) -> Result<()> {
    if levels.is_empty() || levels[0] == 0 || levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "pyramid levels must be positive and strictly increasing, got {levels:?}"
        )));
    }
    Ok(())
}

/// Fixed-length output of spatial pyramid pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidDescriptor {
    pub values: Vec<f64>,
    /// Start of each level's block in `values`.
    pub level_offsets: Vec<usize>,
    pub channels: usize,
}

impl PyramidDescriptor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

// (start, len) of window i out of n along an axis of length x
fn pyramid_window(x: usize, n: usize, i: usize) -> (usize, usize) {
    if x < n {
        (i * x / n, 1)
    } else {
        let start = i * (x / n);
        let win = x.div_ceil(n);
        (start, win.min(x - start))
    }
}

/// Max-pools each channel over an `n × n` grid of windows for every level.
///
/// Windows are `⌈x/n⌉` wide with stride `⌊x/n⌋`, clipped to the map. Levels
/// are concatenated in order, windows row-major, channels fastest.
pub fn spp_pool(map: &FeatureMap, levels: &[usize]) -> Result<PyramidDescriptor> {
    validate_levels(levels)?;
    let (w, h, c) = (map.width(), map.height(), map.channels());
    let finest = *levels.last().unwrap();
    if w < finest || h < finest {
        warn!("{w}x{h} map is smaller than the {finest}x{finest} pyramid level; windows repeat");
    }
    let mut values = Vec::with_capacity(c * levels.iter().map(|n| n * n).sum::<usize>());
    let mut level_offsets = Vec::with_capacity(levels.len());
    for &n in levels {
        level_offsets.push(values.len());
        for i in 0..n {
            let (r0, rl) = pyramid_window(h, n, i);
            for j in 0..n {
                let (c0, cl) = pyramid_window(w, n, j);
                let mut best = vec![f64::NEG_INFINITY; c];
                for r in r0..r0 + rl {
                    for col in c0..c0 + cl {
                        for (b, &v) in best.iter_mut().zip(map.at(r, col)) {
                            *b = b.max(v);
                        }
                    }
                }
                values.extend(best);
            }
        }
    }
    Ok(PyramidDescriptor {
        values,
        level_offsets,
        channels: c,
    })
}

/// The map a network's first layer consumes: the image itself, or the
/// two-channel first-difference gradient.
pub fn input_map(image: &FeatureMap, first: &LayerConfig) -> Result<FeatureMap> {
    match first.input_kind {
        InputKind::Patch => Ok(image.clone()),
        InputKind::Gradient => Ok(build_gradient_map(image)?.to_feature_map()),
    }
}

/// Sub-patch extraction, activation and Gaussian pooling for one layer.
pub fn forward_layer(input: &FeatureMap, config: &LayerConfig, params: &LayerParams) -> Result<FeatureMap> {
    let patches = extract_subpatches(input, config.sub_patch_size)?;
    let h = activation_h(&patches, params)?;
    spatial_pool_g(&h, params.beta, config.subsampling_factor)
}

/// Runs every layer of `model` and returns the last feature map.
pub fn forward_maps(image: &FeatureMap, model: &ModelBundle) -> Result<FeatureMap> {
    let m = model.input_size;
    if image.width() != m || image.height() != m || image.channels() != model.input_channels {
        return Err(Error::invalid(format!(
            "model expects {m}x{m}x{} images, got {}x{}x{}",
            model.input_channels,
            image.width(),
            image.height(),
            image.channels()
        )));
    }
    let first = &model
        .layers
        .first()
        .ok_or_else(|| Error::invalid("model has no layers"))?
        .config;
    let mut map = input_map(image, first)?;
    for layer in &model.layers {
        map = forward_layer(&map, &layer.config, &layer.params)?;
    }
    Ok(map)
}

/// Image to pyramid descriptor.
pub fn forward_network(image: &FeatureMap, model: &ModelBundle) -> Result<PyramidDescriptor> {
    spp_pool(&forward_maps(image, model)?, &model.pyramid_levels)
}

/// Everything [`train_network`] needs besides the images.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerConfig>,
    pub pretrain: PretrainConfig,
    pub pyramid_levels: Vec<usize>,
    pub input_size: usize,
    /// Upper bound on sub-patches harvested per layer.
    pub pool_size: usize,
    pub seed: u64,
    pub train: TrainOptions,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerConfig>, input_size: usize) -> Self {
        Self {
            layers,
            pretrain: PretrainConfig::default(),
            pyramid_levels: DEFAULT_PYRAMID.to_vec(),
            input_size,
            pool_size: 100_000,
            seed: 0,
            train: TrainOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(i).map_err(|e| e.in_layer(i))?;
        }
        validate_levels(&self.pyramid_levels)?;
        self.pretrain.validate()?;
        if self.pool_size < 2 || self.input_size == 0 {
            return Err(Error::invalid("pool size must be at least 2 and input size positive"));
        }
        Ok(())
    }
}

/// Stream-separated seed for one layer stage.
fn derive_seed(base: u64, layer: usize, stage: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base
        .wrapping_add((layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stage.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn harvest(maps: &[FeatureMap], patch_size: usize, pool_size: usize, seed: u64) -> Result<Vec<SubPatch>> {
    let per_map = pool_size.div_ceil(maps.len()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = Vec::with_capacity(pool_size.min(per_map * maps.len()));
    for map in maps {
        let grid = extract_subpatches(map, patch_size)?;
        let nonzero: Vec<SubPatch> = grid.patches.into_iter().filter(|p| p.norm > 0.0).collect();
        if nonzero.len() <= per_map {
            pool.extend(nonzero);
        } else {
            let mut picks = index::sample(&mut rng, nonzero.len(), per_map).into_vec();
            picks.sort_unstable();
            pool.extend(picks.into_iter().map(|i| nonzero[i].clone()));
        }
    }
    Ok(pool)
}

fn map_all<F>(maps: &[FeatureMap], mode: Parallelism, f: F) -> Result<Vec<FeatureMap>>
where
    F: Fn(&FeatureMap) -> Result<FeatureMap> + Sync + Send,
{
    match mode {
        Parallelism::Reference => maps.iter().map(f).collect(),
        Parallelism::Parallel => maps.par_iter().map(f).collect(),
    }
}

/// Trains a network layer by layer on unlabeled images.
///
/// For each layer: harvest sub-patches from the current maps, set α from the
/// distance quantile and β from the sub-sampling factor, initialize (sparse
/// pre-training, or orientation filters for a gradient layer), fit the kernel
/// approximation on sampled pairs, then push every image through the new
/// layer. Parameters are rounded to `f32` as each layer is sealed.
pub fn train_network(images: &[FeatureMap], spec: &NetworkSpec) -> Result<ModelBundle> {
    spec.validate()?;
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("training needs at least one image"))?;
    let m = spec.input_size;
    let channels = first.channels();
    if let Some(bad) = images
        .iter()
        .position(|im| im.width() != m || im.height() != m || im.channels() != channels)
    {
        return Err(Error::invalid(format!(
            "image {bad} does not match the {m}x{m}x{channels} input shape"
        )));
    }
    let mode = spec.train.parallelism;
    let mut maps = map_all(images, mode, |im| input_map(im, &spec.layers[0]))
        .map_err(|e| e.in_layer(0))?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut records = Vec::with_capacity(spec.layers.len());

    for (li, config) in spec.layers.iter().enumerate() {
        let stage = |k: u64| derive_seed(spec.seed ^ config.seed, li, k);
        let run = || -> Result<(LayerParams, LayerRecord)> {
            let pool = harvest(&maps, config.sub_patch_size, spec.pool_size, stage(0))?;
            let sample: Vec<&[f64]> = pool.iter().map(|p| p.normalized.as_slice()).collect();
            let alpha = estimate_alpha(&sample, config.alpha_quantile, stage(1))?;
            let beta = compute_beta(config.subsampling_factor);
            info!("layer {li}: pool {} sub-patches, alpha {alpha:.5}, beta {beta:.5}", pool.len());

            let init = match config.input_kind {
                InputKind::Gradient => epls::init_gradient_layer(config.num_filters)?.into_params(alpha, beta)?,
                InputKind::Patch => {
                    let pcfg = PretrainConfig {
                        seed: stage(2),
                        ..spec.pretrain.clone()
                    };
                    epls::pretrain_layer(&pool, config, alpha, &pcfg)?.params
                }
            };
            let pairs = sample_training_pairs(&pool, config.num_training_pairs, alpha, stage(3))?;
            let fit = train_layer(&pairs, config, &init, &spec.train)?;
            debug!(
                "layer {li}: loss {:.6e} -> {:.6e} in {} iterations ({:?})",
                fit.initial_loss, fit.final_loss, fit.iterations, fit.termination
            );
            let mut params = fit.params;
            params.quantize_f32();
            Ok((
                params,
                LayerRecord {
                    pool_size: pool.len(),
                    initial_loss: fit.initial_loss,
                    final_loss: fit.final_loss,
                    iterations: fit.iterations,
                },
            ))
        };
        let (params, record) = run().map_err(|e| e.in_layer(li))?;
        maps = map_all(&maps, mode, |map| forward_layer(map, config, &params)).map_err(|e| e.in_layer(li))?;
        layers.push(TrainedLayer {
            config: config.clone(),
            params,
        });
        records.push(record);
    }

    let bundle = ModelBundle {
        format_version: FORMAT_VERSION,
        input_size: m,
        input_channels: channels,
        layers,
        pyramid_levels: spec.pyramid_levels.clone(),
        provenance: Provenance {
            seed: spec.seed,
            pretrain: spec.pretrain.clone(),
            optimizer: spec.train.optimizer,
            weight_floor: WEIGHT_FLOOR,
            adaptive_epsilon: ADAPTIVE_EPSILON,
            layers: records,
        },
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spp_hand_enumerated_spike() {
        let mut v = vec![0.0; 16];
        v[0] = 7.0;
        let map = FeatureMap::new(4, 4, 1, v).unwrap();
        let d = spp_pool(&map, &[1, 2]).unwrap();
        assert_eq!(d.values, vec![7.0, 7.0, 0.0, 0.0, 0.0]);
        assert_eq!(d.level_offsets, vec![0, 1]);
    }

    #[test]
    fn spp_default_levels_give_fifty_bins() {
        let map = FeatureMap::from_fn(6, 6, |r, c| (r * 6 + c) as f64).unwrap();
        let d = spp_pool(&map, &DEFAULT_PYRAMID).unwrap();
        assert_eq!(d.len(), 50);
        assert_eq!(d.values[0], 35.0);
        // the 6x6 level is the map itself
        assert_eq!(&d.values[14..], map.values());
    }

    #[test]
    fn spp_of_constant_map() {
        let map = FeatureMap::new(5, 5, 3, vec![0.25; 75]).unwrap();
        let d = spp_pool(&map, &DEFAULT_PYRAMID).unwrap();
        assert_eq!(d.len(), 150);
        assert!(d.values.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn spp_non_divisible_windows() {
        // x = 5, n = 2: windows [0, 3) and [2, 5)
        let map = FeatureMap::from_fn(5, 1, |_, c| c as f64).unwrap();
        assert_eq!(pyramid_window(5, 2, 0), (0, 3));
        assert_eq!(pyramid_window(5, 2, 1), (2, 3));
        let d = spp_pool(&map, &[2]).unwrap();
        // one row: every vertical window is the single row
        assert_eq!(d.values, vec![2.0, 4.0, 2.0, 4.0]);
    }

    #[test]
    fn spp_small_map_repeats_cells() {
        let map = FeatureMap::from_fn(2, 2, |r, c| (r * 2 + c) as f64).unwrap();
        let d = spp_pool(&map, &[1, 3]).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.values[0], 3.0);
        assert_eq!(&d.values[1..], &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 2.0, 2.0, 3.0]);
    }

    #[test]
    fn spp_rejects_bad_levels() {
        let map = FeatureMap::zeros(4, 4, 1).unwrap();
        assert!(spp_pool(&map, &[2, 1]).is_err());
        assert!(spp_pool(&map, &[0, 1]).is_err());
        assert!(spp_pool(&map, &[]).is_err());
    }

    #[test]
    fn seeds_are_separated() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(9, 2, 3), derive_seed(9, 2, 3));
    }

    proptest! {
        #[test]
        fn spp_is_monotone(
            v in proptest::collection::vec(0.0f64..1.0, 49),
            bump in proptest::collection::vec(0.0f64..0.5, 49),
        ) {
            let a = FeatureMap::new(7, 7, 1, v.clone()).unwrap();
            let b = FeatureMap::new(7, 7, 1, v.iter().zip(&bump).map(|(x, y)| x + y).collect()).unwrap();
            let da = spp_pool(&a, &DEFAULT_PYRAMID).unwrap();
            let db = spp_pool(&b, &DEFAULT_PYRAMID).unwrap();
            for (x, y) in da.values.iter().zip(&db.values) {
                prop_assert!(y >= x);
            }
        }
    }
}
