//! Binary checkpoint format.
//!
//! ```text
//! "MTL1"                      4 bytes magic
//! version                     u32 little-endian
//! manifest length             u32 little-endian, in bytes
//! manifest                    UTF-8 text (see below)
//! parameters                  f32 little-endian, manifest order
//! ```
//!
//! The manifest has one `key = value` line per backbone setting followed
//! by one `param <name> <d0>x<d1>x...` line per tensor in declaration
//! order.

use std::fs;
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, MtlNetwork};
use crate::nn::NamedParam;

pub const MAGIC: &[u8; 4] = b"MTL1";
pub const VERSION: u32 = 1;

fn manifest(net: &MtlNetwork<f32>) -> String {
    let c = net.config();
    let mut out = String::new();
    out.push_str(&format!("variant = {}\n", c.variant));
    out.push_str(&format!("feature_dim = {}\n", c.feature_dim));
    out.push_str(&format!("trunk_width = {}\n", c.trunk_width));
    out.push_str(&format!("heads = {}\n", c.heads));
    out.push_str(&format!("reduction = {}\n", c.reduction));
    out.push_str(&format!("image_size = {}\n", c.image_size));
    for p in net.params().iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("param {} {}\n", p.name, dims.join("x")));
    }
    out
}

pub fn to_bytes(net: &MtlNetwork<f32>) -> Vec<u8> {
    let manifest = manifest(net);
    let mut buf = Vec::with_capacity(12 + manifest.len() + 4 * net.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    buf.extend_from_slice(manifest.as_bytes());
    for p in net.params().iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::load("checkpoint truncated in header"))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::load(format!("checkpoint manifest: `{key}` is not an integer: {value}")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<MtlNetwork<f32>> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::load("not a checkpoint: bad magic bytes"));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(Error::load(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(bytes, 8)? as usize;
    let body = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::load("checkpoint truncated in manifest"))?;
    let text = std::str::from_utf8(body).map_err(|_| Error::load("checkpoint manifest is not UTF-8"))?;

    let mut config = BackboneConfig::default();
    let mut layout: Vec<(String, Vec<usize>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix("param ") {
            let (name, dims) = rest
                .split_once(' ')
                .ok_or_else(|| Error::load(format!("manifest line {}: malformed param entry", lineno + 1)))?;
            let shape = dims
                .split('x')
                .map(|d| parse_usize(name, d))
                .collect::<Result<Vec<_>>>()?;
            layout.push((name.to_string(), shape));
            continue;
        }
        let (key, value) = line
            .split_once(" = ")
            .ok_or_else(|| Error::load(format!("manifest line {}: expected `key = value`", lineno + 1)))?;
        match key {
            "variant" => config.variant = value.parse().map_err(|e: Error| Error::load(e.to_string()))?,
            "feature_dim" => config.feature_dim = parse_usize(key, value)?,
            "trunk_width" => config.trunk_width = parse_usize(key, value)?,
            "heads" => config.heads = parse_usize(key, value)?,
            "reduction" => config.reduction = parse_usize(key, value)?,
            "image_size" => config.image_size = parse_usize(key, value)?,
            other => return Err(Error::load(format!("manifest: unknown key `{other}`"))),
        }
    }

    let mut net = MtlNetwork::<f32>::build(&config, 0).map_err(|e| Error::load(e.to_string()))?;
    let mut offset = 12 + len;
    let mut values = Vec::with_capacity(layout.len());
    for (name, shape) in layout {
        let numel: usize = shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * numel)
            .ok_or_else(|| Error::load(format!("checkpoint truncated in parameter {name}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        values.push(NamedParam {
            name,
            value: Tensor::new(shape, data)?,
        });
        offset += 4 * numel;
    }
    if offset != bytes.len() {
        return Err(Error::load(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - offset
        )));
    }
    net.params_mut().load_values(values)?;
    Ok(net)
}

pub fn save(net: &MtlNetwork<f32>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<MtlNetwork<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
