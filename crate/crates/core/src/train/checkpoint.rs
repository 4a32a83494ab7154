//! Binary checkpoint format.
//!
//! ```text
//! "RGDN" | version u32 | channels u32 | topology hash u64 | features u32
//! | kernel u32 | active r,h,d as 3 bytes
//! | for r, h, d: for each layer: tensor count u32, then tensors
//! | for r, h, d: for each normalized layer: running mean, running var
//! | config length u64 | config JSON
//! ```
//!
//! A tensor is four `u32` dims followed by little-endian `f32` values. All
//! integers are little-endian.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gdu::{init_params, GduParams, SubnetId, Subnets, Topology};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"RGDN";
pub const VERSION: u32 = 1;

/// Parameters and the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: GduParams<T>,
    pub config: TrainConfig,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for d in t.shape().dims() {
        put_u32(out, d);
    }
    for &v in t.data() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
}

pub fn encode<T: Scalar>(params: &GduParams<T>, config: &TrainConfig) -> Result<Vec<u8>> {
    let topo = params.topology;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, topo.channels);
    out.extend_from_slice(&topo.hash().to_le_bytes());
    put_u32(&mut out, topo.features);
    put_u32(&mut out, topo.kernel_size);
    let s = params.subnets;
    out.extend_from_slice(&[s.r as u8, s.h as u8, s.d as u8]);
    for id in SubnetId::ALL {
        for layer in &params.subnet(id).layers {
            let mut tensors = vec![&layer.weight];
            tensors.extend(&layer.bias);
            if let Some(bn) = &layer.bn {
                tensors.push(&bn.gamma);
                tensors.push(&bn.beta);
            }
            put_u32(&mut out, tensors.len());
            for t in tensors {
                put_tensor(&mut out, t);
            }
        }
    }
    for id in SubnetId::ALL {
        for bn in params.subnet(id).layers.iter().filter_map(|l| l.bn.as_ref()) {
            put_tensor(&mut out, &bn.running_mean);
            put_tensor(&mut out, &bn.running_var);
        }
    }
    let json = serde_json::to_vec(config)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("truncated file".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn tensor_into<T: Scalar>(&mut self, dst: &mut Tensor<T>, what: &str) -> Result<()> {
        let dims = [self.u32()?, self.u32()?, self.u32()?, self.u32()?];
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        if shape != dst.shape() {
            return Err(Error::Checkpoint(format!(
                "{what}: stored shape {shape}, expected {}",
                dst.shape()
            )));
        }
        let raw = self.bytes(4 * shape.numel())?;
        for (d, c) in dst.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            *d = T::from_f64_lossy(v as f64);
        }
        Ok(())
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader(Cursor::new(bytes));
    if r.bytes(4)? != MAGIC {
        return Err(Error::Checkpoint("not an RGDN checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let channels = r.u32()?;
    let hash = r.u64()?;
    let features = r.u32()?;
    let kernel_size = r.u32()?;
    let topology = Topology {
        channels,
        features,
        kernel_size,
    };
    if topology.hash() != hash {
        return Err(Error::Checkpoint(format!(
            "topology hash mismatch: file has {hash:016x}, this build expects {:016x}",
            topology.hash()
        )));
    }
    let flags = r.bytes(3)?;
    let subnets = Subnets {
        r: flags[0] != 0,
        h: flags[1] != 0,
        d: flags[2] != 0,
    };
    let mut params =
        init_params::<T>(topology, subnets, 0).map_err(|e| Error::Checkpoint(format!("bad topology: {e}")))?;
    for id in SubnetId::ALL {
        for (i, layer) in params.subnet_mut(id).layers.iter_mut().enumerate() {
            let what = format!("{} layer {}", id.name(), i + 1);
            let mut tensors = vec![&mut layer.weight];
            tensors.extend(layer.bias.as_mut());
            if let Some(bn) = layer.bn.as_mut() {
                tensors.push(&mut bn.gamma);
                tensors.push(&mut bn.beta);
            }
            let count = r.u32()?;
            if count != tensors.len() {
                return Err(Error::Checkpoint(format!(
                    "{what}: {count} tensors stored, expected {}",
                    tensors.len()
                )));
            }
            for t in tensors {
                r.tensor_into(t, &what)?;
            }
        }
    }
    for id in SubnetId::ALL {
        for (i, layer) in params.subnet_mut(id).layers.iter_mut().enumerate() {
            if let Some(bn) = layer.bn.as_mut() {
                let what = format!("{} layer {} running stats", id.name(), i + 1);
                r.tensor_into(&mut bn.running_mean, &what)?;
                r.tensor_into(&mut bn.running_var, &what)?;
            }
        }
    }
    let len = r.u64()? as usize;
    let json = r.bytes(len)?;
    let config: TrainConfig = serde_json::from_slice(&json)?;
    if r.0.position() as usize != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after configuration".into()));
    }
    Ok(Checkpoint { params, config })
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save_checkpoint<T: Scalar>(path: &Path, params: &GduParams<T>, config: &TrainConfig) -> Result<()> {
    let bytes = encode(params, config)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
