//! Binary weight file.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "VIPLOWTS"
//! version  u32
//! config   12 × u32  patch, image, embed, heads, layers, mlp_ratio,
//!                    node, edge, attn, branches, steps, verbs
//! count    u32
//! count × { name_len u32, name bytes (UTF-8), rank u32,
//!           rank × u32 extents, f32 payload (row-major) }
//! ```

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::backbone::{interpolate_pos_embed, ViTConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;
use crate::pose_graph::GraphConfig;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"VIPLOWTS";
pub const VERSION: u32 = 1;
const MAX_RANK: u32 = 8;

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit in u32")))
}

fn config_words(c: &ModelConfig) -> [usize; 12] {
    let (v, g) = (&c.vit, &c.graph);
    [
        v.patch_size,
        v.image_size,
        v.embed_dim,
        v.num_heads,
        v.num_layers,
        v.mlp_ratio,
        g.node_dim,
        g.edge_dim,
        g.attn_dim,
        g.mbf_branches,
        g.steps,
        c.num_verbs,
    ]
}

fn config_from_words(w: [usize; 12]) -> ModelConfig {
    ModelConfig {
        vit: ViTConfig {
            patch_size: w[0],
            image_size: w[1],
            embed_dim: w[2],
            num_heads: w[3],
            num_layers: w[4],
            mlp_ratio: w[5],
        },
        graph: GraphConfig {
            node_dim: w[6],
            edge_dim: w[7],
            attn_dim: w[8],
            mbf_branches: w[9],
            steps: w[10],
        },
        num_verbs: w[11],
    }
}

pub fn write_weights<T: Scalar, W: Write>(model: &Model<T>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    for v in config_words(model.config()) {
        w.write_u32::<LittleEndian>(u32_of(v, "config value")?)?;
    }
    let mut m = model.clone();
    let params = m.named_params_mut();
    w.write_u32::<LittleEndian>(u32_of(params.len(), "tensor count")?)?;
    for (name, t) in params {
        w.write_u32::<LittleEndian>(u32_of(name.len(), "name length")?)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(u32_of(t.shape().len(), "rank")?)?;
        for &e in t.shape() {
            w.write_u32::<LittleEndian>(u32_of(e, "extent")?)?;
        }
        for v in t.data() {
            w.write_f32::<LittleEndian>(v.to_f32().unwrap_or(f32::NAN))?;
        }
    }
    Ok(())
}

pub fn weights_to_bytes<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_weights(model, &mut buf)?;
    Ok(buf)
}

pub fn save_weights<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, weights_to_bytes(model)?)?;
    Ok(())
}

struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn read_exact_u32(r: &mut Cursor<&[u8]>, what: &str) -> Result<u32> {
    r.read_u32::<LittleEndian>()
        .map_err(|_| parse_err(format!("truncated weight file reading {what}")))
}

/// Parses a weight file and checks every declared parameter is present
/// exactly once with matching extents. A position embedding stored for a
/// different square grid is resized bilinearly.
pub fn weights_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| parse_err("weight file shorter than its header"))?;
    if &magic != MAGIC {
        return Err(parse_err("not a weight file (bad magic)"));
    }
    let version = read_exact_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(parse_err(format!("unsupported weight file version {version}")));
    }
    let mut words = [0usize; 12];
    for w in words.iter_mut() {
        *w = read_exact_u32(&mut r, "config")? as usize;
    }
    let config = config_from_words(words);
    config.validate()?;

    let count = read_exact_u32(&mut r, "tensor count")?;
    let mut raw: BTreeMap<String, RawTensor> = BTreeMap::new();
    for _ in 0..count {
        let len = read_exact_u32(&mut r, "name length")? as usize;
        if len > bytes.len() {
            return Err(parse_err("name length exceeds file size"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| parse_err("truncated tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| parse_err("tensor name is not UTF-8"))?;
        let rank = read_exact_u32(&mut r, "rank")?;
        if rank > MAX_RANK {
            return Err(parse_err(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_exact_u32(&mut r, "extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|n| n.saturating_mul(4) <= bytes.len())
            .ok_or_else(|| parse_err(format!("tensor {name} larger than the file")))?;
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|_| parse_err(format!("truncated payload for {name}")))?;
        if raw.insert(name.clone(), RawTensor { shape, data }).is_some() {
            return Err(Error::Config(format!("parameter {name} appears twice")));
        }
    }
    if (r.position() as usize) != bytes.len() {
        return Err(parse_err("trailing bytes after the last tensor"));
    }

    let mut model = Model::<T>::random(config, 0)?;
    let side = config.vit.grid_side();
    for (name, slot) in model.named_params_mut() {
        let t = raw
            .remove(&name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        let mut tensor = Tensor::new(t.shape.clone(), t.data.into_iter().map(|v| T::narrow(v as f64)).collect())?;
        if tensor.shape() != slot.shape() && name == "vit.pos_embed" && t.shape.len() == 2 {
            let from = ((t.shape[0].saturating_sub(1)) as f64).sqrt().round() as usize;
            if from * from + 1 == t.shape[0] && t.shape[1] == slot.shape()[1] {
                tensor = interpolate_pos_embed(&tensor, from, side)?;
            }
        }
        if tensor.shape() != slot.shape() {
            return Err(Error::Config(format!(
                "parameter {name} has extents {:?}, expected {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    if let Some(name) = raw.keys().next() {
        return Err(Error::Config(format!("unknown parameter {name}")));
    }
    Ok(model)
}

pub fn load_weights<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path)?;
    weights_from_bytes(&bytes)
}
