//! Checkpoint files: a short TOML manifest describing the architecture,
//! followed by raw tensor snapshots in declaration order. Values are
//! stored as little-endian f64 regardless of the in-memory element type,
//! so an f32 model round-trips exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::ConnectionMatrix;
use crate::dtype::{real, Real};
use crate::error::{Error, Result};
use crate::nn::{ConvBlock, MaskedConvBlock, Network, SuperNet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RNCK";

fn malformed(path: &Path, offset: u64, reason: &str) -> Error {
    Error::MalformedFile {
        path: path.display().to_string(),
        offset,
        reason: reason.to_string(),
    }
}

fn write_tensor<E: Real, W: Write>(w: &mut W, t: &Tensor<E>) -> std::io::Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, offset: &mut u64, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| malformed(path, *offset, "truncated u32"))?;
    *offset += 4;
    Ok(u32::from_le_bytes(buf))
}

fn read_tensor<E: Real, R: Read>(r: &mut R, offset: &mut u64, path: &Path) -> Result<Tensor<E>> {
    let rank = read_u32(r, offset, path)? as usize;
    if rank > 8 {
        return Err(malformed(path, *offset - 4, "implausible tensor rank"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, offset, path)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut buf)
            .map_err(|_| malformed(path, *offset, "truncated tensor data"))?;
        *offset += 8;
        data.push(real::<E>(f64::from_le_bytes(buf)));
    }
    Tensor::new(shape, data)
}

/// Write `meta` (TOML text) and the tensors, in order, to `path`.
pub fn save_checkpoint<E: Real>(path: &Path, meta: &str, tensors: &[&Tensor<E>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<E: Real>(path: &Path) -> Result<(String, Vec<Tensor<E>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| malformed(path, 0, "truncated magic"))?;
    offset += 4;
    if &magic != MAGIC {
        return Err(malformed(path, 0, "bad magic (not a checkpoint)"));
    }
    let meta_len = read_u32(&mut r, &mut offset, path)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)
        .map_err(|_| malformed(path, offset, "truncated manifest"))?;
    offset += meta_len as u64;
    let meta = String::from_utf8(meta).map_err(|_| malformed(path, 4, "manifest not utf-8"))?;
    let count = read_u32(&mut r, &mut offset, path)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(read_tensor(&mut r, &mut offset, path)?);
    }
    Ok((meta, tensors))
}

#[derive(Serialize, Deserialize)]
struct NetworkMeta {
    kind: String,
    input_channels: usize,
    num_classes: usize,
    channels: Vec<usize>,
    pool_after: Vec<bool>,
}

/// Tensor order: block weights, fc weight, fc bias.
pub fn save_network<E: Real>(path: &Path, net: &Network<E>) -> Result<()> {
    let meta = NetworkMeta {
        kind: "network".into(),
        input_channels: net.input_channels,
        num_classes: net.num_classes,
        channels: net.blocks.iter().map(|b| b.out_channels()).collect(),
        pool_after: net.blocks.iter().map(|b| b.pool_after).collect(),
    };
    let meta = toml::to_string(&meta).map_err(|e| Error::Config {
        message: format!("checkpoint manifest: {e}"),
    })?;
    save_checkpoint(path, &meta, &net.params())
}

pub fn load_network<E: Real>(path: &Path) -> Result<Network<E>> {
    let (meta, tensors) = load_checkpoint::<E>(path)?;
    let meta: NetworkMeta =
        toml::from_str(&meta).map_err(|_| malformed(path, 8, "bad network manifest"))?;
    if meta.kind != "network" {
        return Err(malformed(path, 8, "checkpoint is not a network"));
    }
    let n = meta.channels.len();
    if meta.pool_after.len() != n || tensors.len() != n + 2 {
        return Err(malformed(path, 8, "manifest and tensor count disagree"));
    }
    let mut blocks = Vec::with_capacity(n);
    let mut ci = meta.input_channels;
    for (i, (&co, &pool)) in meta.channels.iter().zip(&meta.pool_after).enumerate() {
        let w = &tensors[i];
        if w.shape() != [co, ci, crate::nn::KERNEL, crate::nn::KERNEL] {
            return Err(malformed(path, 8, "block weight shape mismatch"));
        }
        blocks.push(ConvBlock {
            weight: w.clone(),
            pool_after: pool,
        });
        ci = co;
    }
    let fc_w = tensors[n].clone();
    let fc_b = tensors[n + 1].clone();
    if fc_w.shape() != [ci, meta.num_classes] || fc_b.shape() != [meta.num_classes] {
        return Err(malformed(path, 8, "classifier shape mismatch"));
    }
    Ok(Network {
        input_channels: meta.input_channels,
        num_classes: meta.num_classes,
        blocks,
        fc_w,
        fc_b,
    })
}

#[derive(Serialize, Deserialize)]
struct SupernetMeta {
    kind: String,
    input_channels: usize,
    num_classes: usize,
    choices: Vec<Vec<usize>>,
    pool_after: Vec<bool>,
    /// 0 x 0 means no connection matrix was trained.
    conn_rows: usize,
    conn_cols: usize,
}

/// Tensor order: block weights, fc weight, fc bias, block mask logits,
/// then the connection matrix if present.
pub fn save_supernet<E: Real>(
    path: &Path,
    sn: &SuperNet<E>,
    conn: Option<&ConnectionMatrix<E>>,
) -> Result<()> {
    let meta = SupernetMeta {
        kind: "supernet".into(),
        input_channels: sn.input_channels,
        num_classes: sn.num_classes,
        choices: sn.blocks.iter().map(|b| b.choices.clone()).collect(),
        pool_after: sn.blocks.iter().map(|b| b.pool_after).collect(),
        conn_rows: conn.map(|c| c.n_s()).unwrap_or(0),
        conn_cols: conn.map(|c| c.n_t()).unwrap_or(0),
    };
    let meta = toml::to_string(&meta).map_err(|e| Error::Config {
        message: format!("checkpoint manifest: {e}"),
    })?;
    let mut tensors = sn.params();
    tensors.extend(sn.mask_logits());
    if let Some(c) = conn {
        tensors.push(&c.logits);
    }
    save_checkpoint(path, &meta, &tensors)
}

pub fn load_supernet<E: Real>(path: &Path) -> Result<(SuperNet<E>, Option<ConnectionMatrix<E>>)> {
    let (meta, tensors) = load_checkpoint::<E>(path)?;
    let meta: SupernetMeta =
        toml::from_str(&meta).map_err(|_| malformed(path, 8, "bad supernet manifest"))?;
    if meta.kind != "supernet" {
        return Err(malformed(path, 8, "checkpoint is not a supernet"));
    }
    let n = meta.choices.len();
    let has_conn = meta.conn_rows > 0 && meta.conn_cols > 0;
    let expected = 2 * n + 2 + usize::from(has_conn);
    if meta.pool_after.len() != n || tensors.len() != expected {
        return Err(malformed(path, 8, "manifest and tensor count disagree"));
    }
    let mut blocks = Vec::with_capacity(n);
    let mut ci = meta.input_channels;
    for (i, (choices, &pool)) in meta.choices.iter().zip(&meta.pool_after).enumerate() {
        let cmax = *choices
            .last()
            .ok_or_else(|| malformed(path, 8, "empty choice list"))?;
        let w = &tensors[i];
        let logits = &tensors[n + 2 + i];
        if w.shape() != [cmax, ci, crate::nn::KERNEL, crate::nn::KERNEL]
            || logits.shape() != [choices.len()]
        {
            return Err(malformed(path, 8, "supernet block shape mismatch"));
        }
        blocks.push(MaskedConvBlock {
            weight: w.clone(),
            choices: choices.clone(),
            logits: logits.clone(),
            pool_after: pool,
        });
        ci = cmax;
    }
    let fc_w = tensors[n].clone();
    let fc_b = tensors[n + 1].clone();
    if fc_w.shape() != [ci, meta.num_classes] || fc_b.shape() != [meta.num_classes] {
        return Err(malformed(path, 8, "classifier shape mismatch"));
    }
    let conn = if has_conn {
        let logits = tensors.last().unwrap();
        if logits.shape() != [meta.conn_rows, meta.conn_cols] {
            return Err(malformed(path, 8, "connection matrix shape mismatch"));
        }
        let mut c = ConnectionMatrix::new(meta.conn_rows, meta.conn_cols);
        c.logits = logits.clone();
        Some(c)
    } else {
        None
    };
    Ok((
        SuperNet {
            input_channels: meta.input_channels,
            num_classes: meta.num_classes,
            blocks,
            fc_w,
            fc_b,
        },
        conn,
    ))
}
