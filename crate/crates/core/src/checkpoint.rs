//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"PPRN"
//! version u32 (currently 1)
//! arch    n_nodes, in_channels, heads, conv_filters, n_classes: u32 each
//! act     u8 (0 = relu, 1 = identity)
//! count   u32 number of latent tensors
//! tensor  ndim: u8, dims: u32 each, data: f64 little-endian each
//! ```
//!
//! Loading validates the header, the per-tensor shapes against the
//! architecture, and the total entry count against the closed-form
//! parameter formula.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::gcn::{Activation, GcnArchitecture, GcnModel};
use crate::tensor::{Tensor, TensorError};

const MAGIC: &[u8; 4] = b"PPRN";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint is truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("tensor {index} has shape {got:?}, expected {want:?}")]
    ShapeMismatch {
        index: usize,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("entry count {got} does not match architecture formula {want}")]
    CountMismatch { got: usize, want: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn save_checkpoint(model: &GcnModel, path: &Path) -> Result<(), CheckpointError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let arch = &model.arch;
    for v in [
        arch.n_nodes,
        arch.in_channels,
        arch.heads,
        arch.conv_filters,
        arch.n_classes,
    ] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    out.write_all(&[match arch.activation {
        Activation::Relu => 0u8,
        Activation::Identity => 1u8,
    }])?;
    let latents = model.latents();
    out.write_all(&(latents.len() as u32).to_le_bytes())?;
    for tensor in latents {
        out.write_all(&[tensor.shape().len() as u8])?;
        for &d in tensor.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<GcnModel, CheckpointError> {
    let mut reader = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut reader)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }

    let n_nodes = read_u32(&mut reader)? as usize;
    let in_channels = read_u32(&mut reader)? as usize;
    let heads = read_u32(&mut reader)? as usize;
    let conv_filters = read_u32(&mut reader)? as usize;
    let n_classes = read_u32(&mut reader)? as usize;
    let activation = match read_u8(&mut reader)? {
        0 => Activation::Relu,
        1 => Activation::Identity,
        other => return Err(CheckpointError::Corrupt(format!("activation tag {other}"))),
    };
    let arch = GcnArchitecture {
        n_nodes,
        in_channels,
        heads,
        conv_filters,
        n_classes,
        activation,
    };
    arch.validate()
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

    let count = read_u32(&mut reader)? as usize;
    if count != 2 * heads + 1 {
        return Err(CheckpointError::Corrupt(format!(
            "expected {} latent tensors, found {count}",
            2 * heads + 1
        )));
    }

    let mut expected: Vec<Vec<usize>> = Vec::with_capacity(count);
    for _ in 0..heads {
        expected.push(vec![n_nodes, n_nodes]);
    }
    for _ in 0..heads {
        expected.push(vec![in_channels, conv_filters]);
    }
    expected.push(vec![n_nodes * conv_filters, n_classes]);

    let mut tensors = Vec::with_capacity(count);
    let mut total = 0usize;
    for (index, want) in expected.iter().enumerate() {
        let ndim = read_u8(&mut reader)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut reader)? as usize);
        }
        if &shape != want {
            return Err(CheckpointError::ShapeMismatch {
                index,
                got: shape,
                want: want.clone(),
            });
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(read_f64(&mut reader)?);
        }
        total += numel;
        tensors.push(Tensor::new(shape, data)?);
    }
    if total != arch.param_count() {
        return Err(CheckpointError::CountMismatch {
            got: total,
            want: arch.param_count(),
        });
    }

    let mut iter = tensors.into_iter();
    let adjacency: Vec<Tensor> = iter.by_ref().take(heads).collect();
    let conv: Vec<Tensor> = iter.by_ref().take(heads).collect();
    let fc = iter.next().expect("count checked above");
    Ok(GcnModel {
        arch,
        adjacency,
        conv,
        fc,
    })
}

fn read_u8(r: &mut impl Read) -> Result<u8, CheckpointError> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)
        .map_err(|_| CheckpointError::Corrupt("unexpected end of file".into()))?;
    Ok(buf[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| CheckpointError::Corrupt("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| CheckpointError::Corrupt("unexpected end of file".into()))?;
    Ok(f64::from_le_bytes(buf))
}
