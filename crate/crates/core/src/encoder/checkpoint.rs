//! "MBRT" checkpoint files.
//!
//! ```text
//! "MBRT" | version u32 | vocab_size u32 | hidden_size u32 | n_layers u32 |
//!   n_heads u32 | ffn_size u32 | max_positions u32 | dropout f32 | seed u32 |
//!   tensor count u32 | per tensor: name length u32 | name UTF-8 | rank u32 |
//!   dims u32 each | f32 values row-major
//! ```

use std::fs;
use std::path::Path;

use super::model::{EncoderConfig, EncoderModel};
use crate::embedstore::{check_magic, Reader};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"MBRT";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, n: usize, what: &str) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint<T: Scalar>(model: &EncoderModel<T>) -> Result<Vec<u8>> {
    let cfg = model.config();
    let mut out = Vec::with_capacity(64 + 4 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, cfg.vocab_size, "vocab_size")?;
    put_u32(&mut out, cfg.hidden_size, "hidden_size")?;
    put_u32(&mut out, cfg.n_layers, "n_layers")?;
    put_u32(&mut out, cfg.n_heads, "n_heads")?;
    put_u32(&mut out, cfg.ffn_size, "ffn_size")?;
    put_u32(&mut out, cfg.max_positions, "max_positions")?;
    out.extend_from_slice(&cfg.dropout.to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    let specs = model.specs();
    put_u32(&mut out, specs.len(), "tensor count")?;
    for (spec, data) in specs.iter().zip(model.tensors()) {
        put_u32(&mut out, spec.name.len(), "name length")?;
        out.extend_from_slice(spec.name.as_bytes());
        put_u32(&mut out, spec.dims.len(), "rank")?;
        for &d in &spec.dims {
            put_u32(&mut out, d, "dim")?;
        }
        for x in data {
            out.extend_from_slice(&x.as_f32().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<EncoderModel<T>> {
    let mut r = Reader::new(bytes);
    check_magic(&mut r, MAGIC, VERSION)?;
    let mut field = |what| r.u32(what).map(|v| v as usize);
    let vocab_size = field("vocab_size")?;
    let hidden_size = field("hidden_size")?;
    let n_layers = field("n_layers")?;
    let n_heads = field("n_heads")?;
    let ffn_size = field("ffn_size")?;
    let max_positions = field("max_positions")?;
    let dropout = f32::from_le_bytes(r.take(4, "dropout")?.try_into().unwrap());
    let seed = r.u32("seed")?;
    let config = EncoderConfig {
        vocab_size,
        hidden_size,
        n_layers,
        n_heads,
        ffn_size,
        max_positions,
        dropout,
        seed,
    };
    config.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let specs = super::model::tensor_specs(&config);
    let count = r.u32("tensor count")? as usize;
    if count != specs.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, config implies {}",
            specs.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for spec in &specs {
        let name_len = r.u32("tensor name length")? as usize;
        let name = r.string(name_len, "tensor name")?;
        if name != spec.name {
            return Err(Error::Format(format!("expected tensor {}, found {name}", spec.name)));
        }
        let rank = r.u32("tensor rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("tensor dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != spec.dims {
            return Err(Error::Format(format!(
                "tensor {name} has dims {dims:?}, expected {:?}",
                spec.dims
            )));
        }
        tensors.push(r.f32s(spec.len(), &name)?);
    }
    r.finish()?;
    EncoderModel::from_tensors(config, tensors)
}

pub fn write_checkpoint<T: Scalar>(model: &EncoderModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<EncoderModel<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
