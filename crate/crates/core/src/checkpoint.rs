//! Binary checkpoint format.
//!
//! ```text
//! "CSKT"  u32 version  u32 record count
//! per record: u32 name length, UTF-8 name, u32 rank, rank × u32 dims,
//!             product(dims) × f32 values
//! ```
//!
//! All integers and floats are little-endian. Besides the parameters, a
//! rank-0 `meta.input_size` record stores the input resolution; every other
//! model setting is recovered from parameter names and shapes.

use std::io::{Read, Write};
use std::path::Path;

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network};
use crate::params::{Group, ParamStore};
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"CSKT";
pub const VERSION: u32 = 1;

const INPUT_SIZE: &str = "meta.input_size";

/// One named array.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_records(out: &mut impl Write, records: &[Record]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        out.write_all(&(r.name.len() as u32).to_le_bytes())?;
        out.write_all(r.name.as_bytes())?;
        out.write_all(&(r.shape.len() as u32).to_le_bytes())?;
        for &d in &r.shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &r.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input
        .read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_records(input: &mut impl Read) -> Result<Vec<Record>> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (this build reads {VERSION})"
        )));
    }
    let count = read_u32(input)?;
    let mut records = Vec::new();
    for _ in 0..count {
        let len = read_u32(input)? as usize;
        let mut name = vec![0u8; len];
        input
            .read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated record name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let rank = read_u32(input)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("`{name}` has implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u32(input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        input
            .read_exact(&mut bytes)
            .map_err(|_| Error::Checkpoint(format!("truncated data for `{name}`")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(Record { name, shape, data });
    }
    Ok(records)
}

pub fn save<E: Element>(path: &Path, net: &Network<E>) -> Result<()> {
    let mut records = vec![Record {
        name: INPUT_SIZE.into(),
        shape: vec![],
        data: vec![net.config().input_size as f32],
    }];
    records.extend(net.params().iter().map(|p| Record {
        name: p.name.clone(),
        shape: p.value.shape().to_vec(),
        data: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
    }));
    let mut buf = Vec::new();
    write_records(&mut buf, &records)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn dim(records: &[Record], name: &str, axis: usize) -> Result<usize> {
    records
        .iter()
        .find(|r| r.name == name)
        .and_then(|r| r.shape.get(axis).copied())
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
}

/// Reconstructs the model configuration from record names and shapes.
pub fn infer_config(records: &[Record]) -> Result<ModelConfig> {
    let input_size = records
        .iter()
        .find(|r| r.name == INPUT_SIZE)
        .and_then(|r| r.data.first())
        .ok_or_else(|| Error::Checkpoint(format!("missing `{INPUT_SIZE}`")))?;
    let levels = (1..)
        .take_while(|i| records.iter().any(|r| r.name == format!("enc.{i}.conv1.weight")))
        .count();
    let per_level = |prefix: &str| -> Result<Vec<usize>> {
        (1..=levels)
            .map(|i| dim(records, &format!("{prefix}.{i}.conv1.weight"), 0))
            .collect()
    };
    let hgam_enabled = records.iter().any(|r| r.name == "hgam.1.fuse.weight");
    let config = ModelConfig {
        levels,
        input_size: *input_size as usize,
        encoder_channels: per_level("enc")?,
        decoder_channels: per_level("dec")?,
        head_channels: dim(records, "head.u.1.weight", 0)?,
        hgam_enabled,
        msg_channels: if hgam_enabled {
            dim(records, "hgam.1.fuse.weight", 0)?
        } else {
            ModelConfig::toy().msg_channels
        },
        attention: AttentionConfig::default(),
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("inconsistent model: {e}")))?;
    Ok(config)
}

pub fn load<E: Element>(path: &Path) -> Result<Network<E>> {
    let bytes = std::fs::read(path)?;
    let records = read_records(&mut bytes.as_slice())?;
    let config = infer_config(&records)?;
    let mut values = ParamStore::new();
    for r in records.iter().filter(|r| r.name != INPUT_SIZE) {
        let t = Tensor::new(r.shape.clone(), r.data.iter().map(|&v| E::from_f64(v as f64)).collect())?;
        values.insert(&r.name, Group::Rest, t)?;
    }
    Network::from_params(config, values)
}
