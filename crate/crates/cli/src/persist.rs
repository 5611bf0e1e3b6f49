//! Binary model and descriptor files.
//!
//! Layout: 4 magic bytes, format version (`u32` LE), payload length (`u64`
//! LE), payload. Integers are little-endian `u64`, scalars `f64`, and arrays
//! are `f32` LE preceded by their rank (`u32`) and row-major dimensions
//! (`u64` each). Filters and weights are therefore stored at single
//! precision; trained models are already rounded to it, so they round-trip
//! bitwise.

use std::path::Path;

use cskn::epls::PretrainConfig;
use cskn::kernel_layer::{InputKind, LayerConfig, LayerParams};
use cskn::network::{LayerRecord, Provenance, TrainedLayer, FORMAT_VERSION};
use cskn::optim::LbfgsbOptions;
use cskn::ModelBundle;

use crate::error::{CliError, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"CSKN";
pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"CSKD";
pub const DESCRIPTOR_VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("collection too large for the file format"));
    }

    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn array(&mut self, dims: &[usize], values: &[f64]) {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        self.len(dims.len());
        for &d in dims {
            self.usize(d);
        }
        for &v in values {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn finish(self, magic: &[u8; 4], version: u32) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.buf.len() + 16);
        out.extend_from_slice(magic);
        out.extend_from_slice(&version.to_le_bytes());
        out.extend_from_slice(&(self.buf.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.buf);
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CliError::format(
                field,
                format!("truncated: needs {n} bytes at payload offset {}", self.pos),
            )
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn fixed<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        Ok(self.take(N, field)?.try_into().expect("slice of requested length"))
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.fixed::<1>(field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.fixed(field)?))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.fixed(field)?))
    }

    fn usize(&mut self, field: &str) -> Result<usize> {
        let v = self.u64(field)?;
        usize::try_from(v).map_err(|_| CliError::format(field, format!("value {v} out of range")))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.fixed(field)?))
    }

    fn len(&mut self, field: &str) -> Result<usize> {
        Ok(self.u32(field)? as usize)
    }

    fn str(&mut self, field: &str) -> Result<String> {
        let n = self.len(field)?;
        String::from_utf8(self.take(n, field)?.to_vec()).map_err(|_| CliError::format(field, "invalid UTF-8"))
    }

    fn array(&mut self, field: &str, rank: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let got = self.len(field)?;
        if got != rank {
            return Err(CliError::format(field, format!("expected rank {rank}, found {got}")));
        }
        let dims = (0..rank).map(|_| self.usize(field)).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| CliError::format(field, "dimensions overflow"))?;
        let raw = self.take(count * 4, field)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
            .collect();
        Ok((dims, values))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(CliError::format(
                "payload_length",
                format!("{} unread bytes after the last field", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn open<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Reader<'a>> {
    if bytes.get(..4) != Some(magic.as_slice()) {
        return Err(CliError::format(
            "magic",
            format!("expected {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut head = Reader { bytes, pos: 4 };
    let found = head.u32("format_version")?;
    if found != version {
        return Err(CliError::format(
            "format_version",
            format!("file has version {found}, this build reads {version}"),
        ));
    }
    let len = head.usize("payload_length")?;
    let payload = &bytes[head.pos..];
    if payload.len() != len {
        return Err(CliError::format(
            "payload_length",
            format!("header announces {len} bytes, file holds {}", payload.len()),
        ));
    }
    Ok(Reader { bytes: payload, pos: 0 })
}

pub fn encode_model(model: &ModelBundle) -> Vec<u8> {
    let mut w = Writer::default();
    w.usize(model.input_size);
    w.usize(model.input_channels);
    w.len(model.pyramid_levels.len());
    for &n in &model.pyramid_levels {
        w.usize(n);
    }

    let p = &model.provenance;
    w.u64(p.seed);
    w.usize(p.pretrain.batch_size);
    w.usize(p.pretrain.patches_per_epoch);
    w.usize(p.pretrain.epochs);
    w.f64(p.pretrain.base_step);
    w.f64(p.pretrain.smoothing);
    w.u64(p.pretrain.seed);
    w.usize(p.optimizer.memory);
    w.f64(p.optimizer.pg_tol);
    w.usize(p.optimizer.max_iter);
    w.f64(p.optimizer.initial_step);
    w.usize(p.optimizer.max_backtracks);
    w.f64(p.weight_floor);
    w.f64(p.adaptive_epsilon);
    w.len(p.layers.len());
    for r in &p.layers {
        w.usize(r.pool_size);
        w.f64(r.initial_loss);
        w.f64(r.final_loss);
        w.usize(r.iterations);
    }

    w.len(model.layers.len());
    for layer in &model.layers {
        let c = &layer.config;
        w.u8(match c.input_kind {
            InputKind::Patch => 0,
            InputKind::Gradient => 1,
        });
        w.usize(c.sub_patch_size);
        w.usize(c.subsampling_factor);
        w.usize(c.num_filters);
        w.f64(c.alpha_quantile);
        w.usize(c.num_training_pairs);
        w.u64(c.seed);
        let params = &layer.params;
        w.f64(params.alpha);
        w.f64(params.beta);
        w.array(&[params.num_filters(), params.dim()], params.filters());
        w.array(&[params.num_filters()], params.weights());
    }
    w.finish(MODEL_MAGIC, model.format_version)
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelBundle> {
    let mut r = open(bytes, MODEL_MAGIC, FORMAT_VERSION)?;
    let input_size = r.usize("input_size")?;
    let input_channels = r.usize("input_channels")?;
    let n_levels = r.len("pyramid_levels")?;
    let pyramid_levels = (0..n_levels).map(|_| r.usize("pyramid_levels")).collect::<Result<_>>()?;

    let seed = r.u64("provenance.seed")?;
    let pretrain = PretrainConfig {
        batch_size: r.usize("provenance.pretrain.batch_size")?,
        patches_per_epoch: r.usize("provenance.pretrain.patches_per_epoch")?,
        epochs: r.usize("provenance.pretrain.epochs")?,
        base_step: r.f64("provenance.pretrain.base_step")?,
        smoothing: r.f64("provenance.pretrain.smoothing")?,
        seed: r.u64("provenance.pretrain.seed")?,
    };
    let optimizer = LbfgsbOptions {
        memory: r.usize("provenance.optimizer.memory")?,
        pg_tol: r.f64("provenance.optimizer.pg_tol")?,
        max_iter: r.usize("provenance.optimizer.max_iter")?,
        initial_step: r.f64("provenance.optimizer.initial_step")?,
        max_backtracks: r.usize("provenance.optimizer.max_backtracks")?,
    };
    let weight_floor = r.f64("provenance.weight_floor")?;
    let adaptive_epsilon = r.f64("provenance.adaptive_epsilon")?;
    let n_records = r.len("provenance.layers")?;
    let records = (0..n_records)
        .map(|_| {
            Ok(LayerRecord {
                pool_size: r.usize("provenance.layers.pool_size")?,
                initial_loss: r.f64("provenance.layers.initial_loss")?,
                final_loss: r.f64("provenance.layers.final_loss")?,
                iterations: r.usize("provenance.layers.iterations")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n_layers = r.len("layers")?;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for i in 0..n_layers {
        let field = |name: &str| format!("layers[{i}].{name}");
        let input_kind = match r.u8(&field("input_kind"))? {
            0 => InputKind::Patch,
            1 => InputKind::Gradient,
            other => return Err(CliError::format(field("input_kind"), format!("unknown tag {other}"))),
        };
        let config = LayerConfig {
            input_kind,
            sub_patch_size: r.usize(&field("sub_patch_size"))?,
            subsampling_factor: r.usize(&field("subsampling_factor"))?,
            num_filters: r.usize(&field("num_filters"))?,
            alpha_quantile: r.f64(&field("alpha_quantile"))?,
            num_training_pairs: r.usize(&field("num_training_pairs"))?,
            seed: r.u64(&field("seed"))?,
        };
        let alpha = r.f64(&field("alpha"))?;
        let beta = r.f64(&field("beta"))?;
        let (fdims, filters) = r.array(&field("filters"), 2)?;
        let (wdims, weights) = r.array(&field("weights"), 1)?;
        if wdims[0] != fdims[0] {
            return Err(CliError::format(
                field("weights"),
                format!("{} weights for {} filters", wdims[0], fdims[0]),
            ));
        }
        let params = LayerParams::new(filters, fdims[1], weights, alpha, beta)
            .map_err(|e| CliError::format(field("filters"), e.to_string()))?;
        layers.push(TrainedLayer { config, params });
    }
    r.done()?;

    let model = ModelBundle {
        format_version: FORMAT_VERSION,
        input_size,
        input_channels,
        layers,
        pyramid_levels,
        provenance: Provenance {
            seed,
            pretrain,
            optimizer,
            weight_floor,
            adaptive_epsilon,
            layers: records,
        },
    };
    model
        .validate()
        .map_err(|e| CliError::format("layers", e.to_string()))?;
    Ok(model)
}

pub fn save_model(model: &ModelBundle, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model)).map_err(CliError::io(path))
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    decode_model(&std::fs::read(path).map_err(CliError::io(path))?)
}

/// Descriptors of a set of manifest entries, one row each.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub paths: Vec<String>,
    pub labels: Vec<String>,
    pub dim: usize,
    /// `paths.len() × dim`, row-major, at single precision.
    pub values: Vec<f64>,
}

impl DescriptorSet {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

pub fn encode_descriptors(set: &DescriptorSet) -> Vec<u8> {
    let mut w = Writer::default();
    w.len(set.len());
    for (p, l) in set.paths.iter().zip(&set.labels) {
        w.str(p);
        w.str(l);
    }
    w.array(&[set.len(), set.dim], &set.values);
    w.finish(DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION)
}

pub fn decode_descriptors(bytes: &[u8]) -> Result<DescriptorSet> {
    let mut r = open(bytes, DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION)?;
    let n = r.len("entries")?;
    let mut paths = Vec::with_capacity(n.min(1 << 16));
    let mut labels = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        paths.push(r.str("entries.path")?);
        labels.push(r.str("entries.label")?);
    }
    let (dims, values) = r.array("descriptors", 2)?;
    if dims[0] != n {
        return Err(CliError::format("descriptors", format!("{} rows for {n} entries", dims[0])));
    }
    r.done()?;
    Ok(DescriptorSet {
        paths,
        labels,
        dim: dims[1],
        values,
    })
}

pub fn save_descriptors(set: &DescriptorSet, path: &Path) -> Result<()> {
    std::fs::write(path, encode_descriptors(set)).map_err(CliError::io(path))
}

pub fn load_descriptors(path: &Path) -> Result<DescriptorSet> {
    decode_descriptors(&std::fs::read(path).map_err(CliError::io(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> ModelBundle {
        let config = LayerConfig::new(InputKind::Patch, 2, 2, 3);
        let filters: Vec<f64> = (0..12).map(|i| f64::from(i as f32 * 0.1f32)).collect();
        let params = LayerParams::new(filters, 4, vec![0.5, 0.25, 1e-8f32 as f64], 0.3, 2f64.sqrt()).unwrap();
        ModelBundle {
            format_version: FORMAT_VERSION,
            input_size: 8,
            input_channels: 1,
            layers: vec![TrainedLayer { config, params }],
            pyramid_levels: vec![1, 2],
            provenance: Provenance {
                layers: vec![LayerRecord {
                    pool_size: 49,
                    initial_loss: 1.5,
                    final_loss: 0.25,
                    iterations: 12,
                }],
                ..Provenance::default()
            },
        }
    }

    #[test]
    fn model_round_trip() {
        let m = tiny_model();
        let bytes = encode_model(&m);
        assert_eq!(&bytes[..4], b"CSKN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(decode_model(&bytes).unwrap(), m);
        assert_eq!(encode_model(&decode_model(&bytes).unwrap()), bytes);
    }

    #[test]
    fn corruption_names_the_field() {
        let bytes = encode_model(&tiny_model());
        let field_of = |b: &[u8]| match decode_model(b) {
            Err(CliError::Format { field, .. }) => field,
            other => panic!("expected a format error, got {other:?}"),
        };
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(field_of(&bad), "magic");
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(field_of(&bad), "format_version");
        assert_eq!(field_of(&bytes[..bytes.len() - 3]), "payload_length");
        // consistent header, payload cut inside the layer block
        let cut = bytes.len() - 10;
        let mut short = bytes[..cut].to_vec();
        short[8..16].copy_from_slice(&((cut - 16) as u64).to_le_bytes());
        assert_eq!(field_of(&short), "layers[0].weights");
    }

    #[test]
    fn descriptor_round_trip() {
        let set = DescriptorSet {
            paths: vec!["a.pgm".into(), "b/c.pgm".into()],
            labels: vec!["x".into(), "y".into()],
            dim: 3,
            values: vec![0.0, 0.5, 1.25, 2.0, 0.125, 3.0],
        };
        let bytes = encode_descriptors(&set);
        assert_eq!(&bytes[..4], b"CSKD");
        assert_eq!(decode_descriptors(&bytes).unwrap(), set);
        assert!(decode_model(&bytes).is_err());
    }
}
