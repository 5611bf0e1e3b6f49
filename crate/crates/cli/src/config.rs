//! `key = value` run configuration with `[layerN]` sections.
//!
//! ```text
//! seed = 7
//! input_size = 64
//! input_channels = 1
//! pyramid_levels = 1, 2, 3, 6
//!
//! [layer1]
//! input = gradient
//! sub_patch_size = 1
//! subsampling_factor = 2
//! num_filters = 16
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cskn::kernel_layer::{InputKind, LayerConfig};
use cskn::NetworkSpec;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: NetworkSpec,
    /// 1 for grayscale (RGB files are reduced to luma), 3 for RGB.
    pub input_channels: usize,
    /// Default model path for `train` when `--out` is absent.
    pub output: Option<PathBuf>,
}

#[derive(Default)]
struct LayerDraft {
    input: Option<InputKind>,
    sub_patch_size: Option<usize>,
    subsampling_factor: Option<usize>,
    num_filters: Option<usize>,
    alpha_quantile: Option<f64>,
    num_training_pairs: Option<usize>,
    seed: Option<u64>,
}

fn parse_value<T: FromStr>(key: &str, value: &str, lineno: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("config line {lineno}: bad value '{value}' for '{key}'")))
}

// "3" or "3x3"
fn parse_side(key: &str, value: &str, lineno: usize) -> Result<usize> {
    match value.split_once('x') {
        Some((a, b)) if a.trim() == b.trim() => parse_value(key, a.trim(), lineno),
        Some(_) => Err(CliError::Usage(format!(
            "config line {lineno}: '{key}' must be square, got '{value}'"
        ))),
        None => parse_value(key, value, lineno),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = NetworkSpec::new(Vec::new(), cskn::network::DEFAULT_INPUT_SIZE);
        let mut output = None;
        let mut input_channels = 1;
        let mut drafts: Vec<LayerDraft> = Vec::new();
        let mut section: Option<usize> = None;

        for (n, raw) in text.lines().enumerate() {
            let lineno = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let idx: usize = name
                    .trim()
                    .strip_prefix("layer")
                    .and_then(|d| d.parse().ok())
                    .filter(|&i| i >= 1)
                    .ok_or_else(|| CliError::Usage(format!("config line {lineno}: unknown section [{name}]")))?;
                if idx != drafts.len() + 1 {
                    return Err(CliError::Usage(format!(
                        "config line {lineno}: expected [layer{}], found [{name}]",
                        drafts.len() + 1
                    )));
                }
                drafts.push(LayerDraft::default());
                section = Some(idx - 1);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| CliError::Usage(format!("config line {lineno}: expected 'key = value'")))?;

            match section {
                None => match key {
                    "seed" => spec.seed = parse_value(key, value, lineno)?,
                    "input_size" => spec.input_size = parse_value(key, value, lineno)?,
                    "input_channels" => input_channels = parse_value(key, value, lineno)?,
                    "pool_size" => spec.pool_size = parse_value(key, value, lineno)?,
                    "pyramid_levels" => {
                        spec.pyramid_levels = value
                            .split(',')
                            .map(|v| parse_value(key, v.trim(), lineno))
                            .collect::<Result<_>>()?
                    }
                    "batch_size" => spec.pretrain.batch_size = parse_value(key, value, lineno)?,
                    "patches_per_epoch" => spec.pretrain.patches_per_epoch = parse_value(key, value, lineno)?,
                    "epochs" => spec.pretrain.epochs = parse_value(key, value, lineno)?,
                    "base_step" => spec.pretrain.base_step = parse_value(key, value, lineno)?,
                    "smoothing" => spec.pretrain.smoothing = parse_value(key, value, lineno)?,
                    "max_iterations" => spec.train.optimizer.max_iter = parse_value(key, value, lineno)?,
                    "output" => output = Some(PathBuf::from(value)),
                    _ => return Err(CliError::Usage(format!("config line {lineno}: unknown key '{key}'"))),
                },
                Some(i) => {
                    let d = &mut drafts[i];
                    match key {
                        "input" => {
                            d.input = Some(value.parse().map_err(|e: cskn::Error| {
                                CliError::Usage(format!("config line {lineno}: {e}"))
                            })?)
                        }
                        "sub_patch_size" => d.sub_patch_size = Some(parse_side(key, value, lineno)?),
                        "subsampling_factor" => d.subsampling_factor = Some(parse_value(key, value, lineno)?),
                        "num_filters" => d.num_filters = Some(parse_value(key, value, lineno)?),
                        "alpha_quantile" => d.alpha_quantile = Some(parse_value(key, value, lineno)?),
                        "num_training_pairs" => d.num_training_pairs = Some(parse_value(key, value, lineno)?),
                        "seed" => d.seed = Some(parse_value(key, value, lineno)?),
                        _ => {
                            return Err(CliError::Usage(format!(
                                "config line {lineno}: unknown key '{key}' in [layer{}]",
                                i + 1
                            )))
                        }
                    }
                }
            }
        }

        for (i, d) in drafts.into_iter().enumerate() {
            let missing = |what: &str| CliError::Usage(format!("[layer{}] is missing '{what}'", i + 1));
            let mut layer = LayerConfig::new(
                d.input.unwrap_or(InputKind::Patch),
                d.sub_patch_size.ok_or_else(|| missing("sub_patch_size"))?,
                d.subsampling_factor.ok_or_else(|| missing("subsampling_factor"))?,
                d.num_filters.ok_or_else(|| missing("num_filters"))?,
            );
            if let Some(q) = d.alpha_quantile {
                layer.alpha_quantile = q;
            }
            if let Some(p) = d.num_training_pairs {
                layer.num_training_pairs = p;
            }
            if let Some(s) = d.seed {
                layer.seed = s;
            }
            spec.layers.push(layer);
        }
        spec.validate().map_err(|e| CliError::Usage(format!("config: {e}")))?;
        if input_channels != 1 && input_channels != 3 {
            return Err(CliError::Usage(format!("config: input_channels must be 1 or 3, got {input_channels}")));
        }
        if input_channels != 1 && spec.layers[0].input_kind == InputKind::Gradient {
            return Err(CliError::Usage("config: a gradient first layer needs input_channels = 1".into()));
        }
        Ok(Self {
            spec,
            input_channels,
            output,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text)
    }

    /// Text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let levels: Vec<String> = s.pyramid_levels.iter().map(usize::to_string).collect();
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", s.seed);
        let _ = writeln!(out, "input_size = {}", s.input_size);
        let _ = writeln!(out, "input_channels = {}", self.input_channels);
        let _ = writeln!(out, "pyramid_levels = {}", levels.join(", "));
        let _ = writeln!(out, "pool_size = {}", s.pool_size);
        let _ = writeln!(out, "batch_size = {}", s.pretrain.batch_size);
        let _ = writeln!(out, "patches_per_epoch = {}", s.pretrain.patches_per_epoch);
        let _ = writeln!(out, "epochs = {}", s.pretrain.epochs);
        let _ = writeln!(out, "base_step = {:?}", s.pretrain.base_step);
        let _ = writeln!(out, "smoothing = {:?}", s.pretrain.smoothing);
        let _ = writeln!(out, "max_iterations = {}", s.train.optimizer.max_iter);
        if let Some(p) = &self.output {
            let _ = writeln!(out, "output = {}", p.display());
        }
        for (i, l) in s.layers.iter().enumerate() {
            let _ = writeln!(out, "\n[layer{}]", i + 1);
            let _ = writeln!(out, "input = {}", l.input_kind.as_str());
            let _ = writeln!(out, "sub_patch_size = {}", l.sub_patch_size);
            let _ = writeln!(out, "subsampling_factor = {}", l.subsampling_factor);
            let _ = writeln!(out, "num_filters = {}", l.num_filters);
            let _ = writeln!(out, "alpha_quantile = {:?}", l.alpha_quantile);
            let _ = writeln!(out, "num_training_pairs = {}", l.num_training_pairs);
            let _ = writeln!(out, "seed = {}", l.seed);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const IMAGECLEF: &str = "
        # color images, raw patches
        input_size = 200
        input_channels = 3
        [layer1]
        sub_patch_size = 2x2
        subsampling_factor = 2
        num_filters = 100
        [layer2]
        sub_patch_size = 2x2
        subsampling_factor = 4
        num_filters = 800
    ";

    #[test]
    fn parses_table_style_config() {
        let c = RunConfig::parse(IMAGECLEF).unwrap();
        let l = &c.spec.layers;
        assert_eq!(l.len(), 2);
        assert_eq!((l[0].sub_patch_size, l[0].subsampling_factor, l[0].num_filters), (2, 2, 100));
        assert_eq!((l[1].sub_patch_size, l[1].subsampling_factor, l[1].num_filters), (2, 4, 800));
        assert_eq!(l[0].input_kind, InputKind::Patch);
        assert_eq!(l[0].num_training_pairs, 400_000);
        assert_eq!(c.spec.pyramid_levels, vec![1, 2, 3, 6]);
        assert_eq!(c.input_channels, 3);
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::parse(IMAGECLEF).unwrap();
        c.spec.seed = 42;
        c.spec.pretrain.base_step = 0.003;
        c.spec.layers[1].alpha_quantile = 0.05;
        c.output = Some(PathBuf::from("out/model.cskn"));
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_typos_and_gaps() {
        let bad = [
            "sed = 1\n[layer1]\nsub_patch_size = 1\nsubsampling_factor = 1\nnum_filters = 2\n",
            "[layer1]\nsub_patch_size = 1\nsubsampling_factor = 1\nnum_filter = 2\n",
            "[layer2]\nsub_patch_size = 1\nsubsampling_factor = 1\nnum_filters = 2\n",
            "[layer1]\nsub_patch_size = 2x3\nsubsampling_factor = 1\nnum_filters = 2\n",
            "[layer1]\nsub_patch_size = 1\nnum_filters = 2\n",
            "[layer1]\ninput = sobel\nsub_patch_size = 1\nsubsampling_factor = 1\nnum_filters = 2\n",
            "seed = 1\n",
            "input_channels = 3\n[layer1]\ninput = gradient\nsub_patch_size = 1\nsubsampling_factor = 1\nnum_filters = 2\n",
            "[layer1]\ninput = patch\nsub_patch_size = 1\nsubsampling_factor = 1\nnum_filters = 2\n\
             [layer2]\ninput = gradient\nsub_patch_size = 1\nsubsampling_factor = 1\nnum_filters = 2\n",
        ];
        for text in bad {
            assert!(matches!(RunConfig::parse(text), Err(CliError::Usage(_))), "{text}");
        }
    }
}
