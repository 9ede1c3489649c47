//! `BBTN` weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BBTN"  version:u32
//! input_rank:u32  input_dims:u32 * rank
//! layer_count:u32
//! per layer: record_len:u32  record bytes
//!     kind:u8 then kind-specific fields
//!         dense          inputs:u32 outputs:u32
//!         conv2d         in:u32 out:u32 kernel:u32 stride:u32 padding:u32
//!         instance_norm  channels:u32 affine:u8 eps:f64
//!         relu, softmax  (nothing)
//! params: f64 * param_count, in flatten order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::layer::{Conv2dSpec, Layer};
use super::network::Network;
use crate::error::{Error, Result};
use crate::tensor::{read_u32, read_u64};

const MAGIC: &[u8; 4] = b"BBTN";
const VERSION: u32 = 1;

const TAG_DENSE: u8 = 0;
const TAG_CONV: u8 = 1;
const TAG_NORM: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_SOFTMAX: u8 = 4;

fn encode_layer(layer: &Layer) -> Vec<u8> {
    let mut rec = Vec::new();
    let put = |v: usize, rec: &mut Vec<u8>| rec.extend_from_slice(&(v as u32).to_le_bytes());
    match layer {
        Layer::Dense {
            inputs, outputs, ..
        } => {
            rec.push(TAG_DENSE);
            put(*inputs, &mut rec);
            put(*outputs, &mut rec);
        }
        Layer::Conv2d { spec, .. } => {
            rec.push(TAG_CONV);
            for v in [
                spec.in_channels,
                spec.out_channels,
                spec.kernel,
                spec.stride,
                spec.padding,
            ] {
                put(v, &mut rec);
            }
        }
        Layer::InstanceNorm {
            channels,
            eps,
            affine,
        } => {
            rec.push(TAG_NORM);
            put(*channels, &mut rec);
            rec.push(affine.is_some() as u8);
            rec.extend_from_slice(&eps.to_le_bytes());
        }
        Layer::Relu => rec.push(TAG_RELU),
        Layer::Softmax => rec.push(TAG_SOFTMAX),
    }
    rec
}

fn decode_layer(rec: &[u8]) -> Result<Layer> {
    let bad = || Error::Format(format!("malformed layer record of {} bytes", rec.len()));
    let (&tag, mut rest) = rec.split_first().ok_or_else(bad)?;
    let take_u32 = |rest: &mut &[u8]| -> Result<usize> {
        if rest.len() < 4 {
            return Err(bad());
        }
        let (head, tail) = rest.split_at(4);
        *rest = tail;
        Ok(u32::from_le_bytes(head.try_into().unwrap()) as usize)
    };
    let layer = match tag {
        TAG_DENSE => {
            let inputs = take_u32(&mut rest)?;
            let outputs = take_u32(&mut rest)?;
            Layer::dense(inputs, outputs)
        }
        TAG_CONV => {
            let spec = Conv2dSpec {
                in_channels: take_u32(&mut rest)?,
                out_channels: take_u32(&mut rest)?,
                kernel: take_u32(&mut rest)?,
                stride: take_u32(&mut rest)?,
                padding: take_u32(&mut rest)?,
            };
            Layer::conv2d(spec)
        }
        TAG_NORM => {
            let channels = take_u32(&mut rest)?;
            if rest.len() < 9 {
                return Err(bad());
            }
            let affine = rest[0] != 0;
            let eps = f64::from_le_bytes(rest[1..9].try_into().unwrap());
            rest = &rest[9..];
            let mut layer = if affine {
                Layer::instance_norm_affine(channels)
            } else {
                Layer::instance_norm(channels)
            };
            if let Layer::InstanceNorm { eps: e, .. } = &mut layer {
                *e = eps;
            }
            layer
        }
        TAG_RELU => Layer::Relu,
        TAG_SOFTMAX => Layer::Softmax,
        other => return Err(Error::Format(format!("unknown layer kind tag {other}"))),
    };
    if !rest.is_empty() {
        return Err(bad());
    }
    Ok(layer)
}

pub fn write_network<W: Write>(net: &Network, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(net.input_shape().len() as u32).to_le_bytes())?;
    for &d in net.input_shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(net.layers().len() as u32).to_le_bytes())?;
    for layer in net.layers() {
        let rec = encode_layer(layer);
        w.write_all(&(rec.len() as u32).to_le_bytes())?;
        w.write_all(&rec)?;
    }
    for v in net.params_vec() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_network<R: Read>(mut r: R) -> Result<Network> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad network magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported network version {version}"
        )));
    }
    let rank = read_u32(&mut r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("bad input rank {rank}")));
    }
    let input_shape = (0..rank)
        .map(|_| read_u32(&mut r).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = read_u32(&mut r)? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        if len > 64 {
            return Err(Error::Format(format!(
                "layer record too long ({len} bytes)"
            )));
        }
        let mut rec = vec![0u8; len];
        r.read_exact(&mut rec)?;
        layers.push(decode_layer(&rec)?);
    }
    let mut net = Network::new(input_shape, layers)?;
    let params = (0..net.param_count())
        .map(|_| read_u64(&mut r).map(f64::from_bits))
        .collect::<Result<Vec<_>>>()?;
    net.set_params(&params)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    Ok(net)
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_network(net, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    read_network(BufReader::new(File::open(path)?))
}
