//! Binary checkpoints. Layout, all integers little-endian:
//!
//! ```text
//! magic   b"PLM1"
//! version u32 (currently 1)
//! config  u32 byte length, then that many bytes of key=value lines
//! params  u32 tensor count, then per tensor:
//!           name    u16 byte length + bytes
//!           rank    u8
//!           extents rank x u32
//!           data    product(extents) x f32, raw bits
//! opt     u8 flag; when 1: step counter u64, then the first and
//!         second moment tables, each in the tensor record layout
//!         above (rank 1)
//! ```
//!
//! The config text carries every hyperparameter plus the init seed, so
//! a checkpoint alone reconstructs the model. Saving the result of a
//! load yields byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::OptimizerState;
use crate::error::{Error, Result};
use crate::model::{HeadKind, Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"PLM1";
const VERSION: u32 = 1;

fn config_text(config: &ModelConfig, seed: u64) -> String {
    format!(
        "hidden_size={}\nnum_layers={}\nnum_heads={}\nffn_size={}\nmax_positions={}\n\
         vocab_size={}\ndropout={}\npre_ln={}\nseed={}\n",
        config.hidden_size,
        config.num_layers,
        config.num_heads,
        config.ffn_size,
        config.max_positions,
        config.vocab_size,
        config.dropout,
        config.pre_ln,
        seed
    )
}

fn parse_config_text(text: &str) -> Result<(ModelConfig, u64)> {
    let mut config = ModelConfig::new(1, 1, 1);
    let mut seed = 0u64;
    let mut seen = 0u32;
    for line in text.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("checkpoint config line '{line}' has no '='")))?;
        fn parsed<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value.parse().map_err(|_| {
                Error::Config(format!("checkpoint config value '{value}' for '{key}'"))
            })
        }
        match key {
            "hidden_size" => config.hidden_size = parsed(key, value)?,
            "num_layers" => config.num_layers = parsed(key, value)?,
            "num_heads" => config.num_heads = parsed(key, value)?,
            "ffn_size" => config.ffn_size = parsed(key, value)?,
            "max_positions" => config.max_positions = parsed(key, value)?,
            "vocab_size" => config.vocab_size = parsed(key, value)?,
            "dropout" => config.dropout = parsed(key, value)?,
            "pre_ln" => config.pre_ln = parsed(key, value)?,
            "seed" => seed = parsed(key, value)?,
            _ => return Err(Error::Config(format!("unknown checkpoint config key '{key}'"))),
        }
        seen += 1;
    }
    if seen != 9 {
        return Err(Error::Config(format!("checkpoint config has {seen} keys, expected 9")));
    }
    Ok((config, seed))
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::CheckpointTruncated(format!("while reading {what}")))?;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.bytes(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        String::from_utf8(self.bytes(len, what)?)
            .map_err(|_| Error::CheckpointTruncated(format!("non-utf8 {what}")))
    }

    fn f32_data(&mut self, numel: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.bytes(numel * 4, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    /// One tensor record: (name, extents, data).
    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name = self.string("tensor name")?;
        let rank = self.u8(&format!("rank of '{name}'"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32(&format!("extents of '{name}'"))? as usize);
        }
        let numel: usize = dims.iter().product();
        let data = self.f32_data(numel, &format!("data of '{name}'"))?;
        Ok((name, dims, data))
    }
}

fn write_tensor<W: Write>(w: &mut W, name: &str, dims: &[usize], data: &[f32]) -> Result<()> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| Error::InvalidArgument(format!("tensor name '{name}' exceeds 65535 bytes")))?;
    w.write_all(&name_len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[u8::try_from(dims.len())
        .map_err(|_| Error::InvalidArgument(format!("tensor '{name}' rank exceeds 255")))?])?;
    for &d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("tensor '{name}' extent {d} too large")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn write_moment_table<W: Write>(w: &mut W, table: &IndexMap<String, Vec<f32>>) -> Result<()> {
    w.write_all(&(table.len() as u32).to_le_bytes())?;
    for (name, data) in table {
        write_tensor(w, name, &[data.len()], data)?;
    }
    Ok(())
}

fn read_moment_table<R: Read>(r: &mut Reader<R>) -> Result<IndexMap<String, Vec<f32>>> {
    let count = r.u32("moment table count")? as usize;
    let mut table = IndexMap::new();
    for _ in 0..count {
        let (name, _, data) = r.tensor()?;
        table.insert(name, data);
    }
    Ok(table)
}

/// Writes a model (and optionally its optimizer state) to `path`.
pub fn save_checkpoint(
    model: &Model<f32>,
    state: Option<&OptimizerState<f32>>,
    path: &Path,
) -> Result<()> {
    let file = File::create(path).map_err(|e| {
        Error::Config(format!("cannot create checkpoint {}: {e}", path.display()))
    })?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let text = config_text(&model.config, model.seed);
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, tensor) in &model.params {
        write_tensor(&mut w, name, tensor.dims(), tensor.data())?;
    }
    match state {
        None => w.write_all(&[0u8])?,
        Some(s) => {
            w.write_all(&[1u8])?;
            w.write_all(&s.t.to_le_bytes())?;
            write_moment_table(&mut w, &s.m)?;
            write_moment_table(&mut w, &s.v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Maps a parameter prefix back to its head, so loaded head tensors can
/// be validated against the shapes that head would create.
fn head_for_prefix(prefix: &str) -> Option<HeadKind> {
    match prefix {
        "head.contact" => Some(HeadKind::Contact),
        "head.value" => Some(HeadKind::Regress),
        _ => {
            if let Some(c) = prefix.strip_prefix("head.tok") {
                return c.parse().ok().map(|classes| HeadKind::TokenClass { classes });
            }
            if let Some(c) = prefix.strip_prefix("head.seq") {
                return c.parse().ok().map(|classes| HeadKind::SeqClass { classes });
            }
            None
        }
    }
}

fn expected_shape(
    name: &str,
    config: &ModelConfig,
    encoder_spec: &IndexMap<String, Vec<usize>>,
) -> Result<Vec<usize>> {
    if let Some(dims) = encoder_spec.get(name) {
        return Ok(dims.clone());
    }
    let prefix = name
        .rsplit_once(".fc")
        .map(|(p, _)| p)
        .and_then(head_for_prefix)
        .ok_or_else(|| Error::Config(format!("checkpoint has unknown tensor '{name}'")))?;
    let spec = prefix.param_spec(config)?;
    spec.into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, dims)| dims)
        .ok_or_else(|| Error::Config(format!("checkpoint has unknown tensor '{name}'")))
}

/// Reads a checkpoint back into a model and optional optimizer state.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, Option<OptimizerState<f32>>)> {
    let file = File::open(path).map_err(|e| {
        Error::Config(format!("cannot open checkpoint {}: {e}", path.display()))
    })?;
    let mut r = Reader { inner: BufReader::new(file) };
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::CheckpointMagic { found: magic.try_into().expect("4 bytes") });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion { expected: VERSION, found: version });
    }
    let text_len = r.u32("config length")? as usize;
    let text = String::from_utf8(r.bytes(text_len, "config text")?)
        .map_err(|_| Error::CheckpointTruncated("non-utf8 config text".into()))?;
    let (config, seed) = parse_config_text(&text)?;
    config.validate()?;

    let encoder_spec: IndexMap<String, Vec<usize>> = config.param_spec().into_iter().collect();
    let count = r.u32("tensor count")? as usize;
    let mut params = IndexMap::new();
    for _ in 0..count {
        let (name, dims, data) = r.tensor()?;
        let expected = expected_shape(&name, &config, &encoder_spec)?;
        if dims != expected {
            return Err(Error::Shape {
                op: "load_checkpoint",
                details: format!("tensor '{name}' has shape {dims:?}, expected {expected:?}"),
            });
        }
        let tensor = Tensor::new(dims, data)?.with_requires_grad(true);
        if params.insert(name.clone(), tensor).is_some() {
            return Err(Error::Config(format!("checkpoint repeats tensor '{name}'")));
        }
    }
    for name in encoder_spec.keys() {
        if !params.contains_key(name) {
            return Err(Error::CheckpointTruncated(format!("missing encoder tensor '{name}'")));
        }
    }
    let model = Model { config, seed, params };

    let state = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let t = r.u64("optimizer step")?;
            let m = read_moment_table(&mut r)?;
            let v = read_moment_table(&mut r)?;
            Some(OptimizerState { t, m, v })
        }
        f => return Err(Error::CheckpointTruncated(format!("optimizer flag byte {f}"))),
    };
    Ok((model, state))
}

/// Loads a checkpoint and verifies it matches an expected config.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &ModelConfig,
) -> Result<(Model<f32>, Option<OptimizerState<f32>>)> {
    let (model, state) = load_checkpoint(path)?;
    if &model.config != expected {
        return Err(Error::Config(format!(
            "checkpoint config {:?} does not match expected {:?}",
            model.config, expected
        )));
    }
    Ok((model, state))
}
