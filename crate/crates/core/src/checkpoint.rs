//! Bit-exact binary model checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "SKSCKPT\0" | version u32 | m u64 | l u64 | N u64 | activation u8
//! | policy descriptor (u64 length + UTF-8)
//! | learnable only: channels u64, nets u64, per net: n_min u64, reduction u64,
//!   adapters u64, per adapter: dim u64, ratio u64
//! | params u64 | per param: rank u64, dims u64.., requires_grad u8, f64 data
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scaling::{Adapter, CalibNet, Learnable, PolicyDescriptor, ScalingPolicy};
use crate::tensor::Tensor;
use crate::unet::{Activation, BlockParams, UNetModel};

pub const MAGIC: &[u8; 8] = b"SKSCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &UNetModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<UNetModel> {
    from_bytes(&fs::read(path)?)
}

pub fn to_bytes(model: &UNetModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [model.m, model.l, model.n] {
        put_u64(&mut out, v);
    }
    out.push(match model.activation {
        Activation::Relu => 0,
        Activation::Identity => 1,
    });
    let desc = model.policy.descriptor().to_string();
    put_u64(&mut out, desc.len());
    out.extend_from_slice(desc.as_bytes());
    if let ScalingPolicy::Learnable(lrn) = &model.policy {
        put_u64(&mut out, lrn.channels);
        put_u64(&mut out, lrn.nets.len());
        for net in &lrn.nets {
            put_u64(&mut out, net.n_min);
            put_u64(&mut out, net.reduction);
            put_u64(&mut out, net.adapters.len());
            for a in &net.adapters {
                put_u64(&mut out, a.dim);
                put_u64(&mut out, a.ratio);
            }
        }
    }
    let params = model.params();
    put_u64(&mut out, params.len());
    for p in params {
        put_u64(&mut out, p.shape().len());
        for &d in p.shape() {
            put_u64(&mut out, d);
        }
        out.push(p.requires_grad as u8);
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<UNetModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let (m, l, n) = (r.u64()?, r.u64()?, r.u64()?);
    let activation = match r.take(1)?[0] {
        0 => Activation::Relu,
        1 => Activation::Identity,
        b => return Err(Error::Format(format!("bad activation tag {b}"))),
    };
    let dlen = r.u64()?;
    let desc = std::str::from_utf8(r.take(dlen)?)
        .map_err(|_| Error::Format("policy descriptor is not UTF-8".into()))?;
    let desc: PolicyDescriptor = desc
        .parse()
        .map_err(|e| Error::Format(format!("policy descriptor: {e}")))?;

    // Learnable structure first, filled with placeholders until the tensors.
    let policy = match desc {
        PolicyDescriptor::Unit => ScalingPolicy::Unit,
        PolicyDescriptor::Universal(kappa) => ScalingPolicy::Universal { kappa },
        PolicyDescriptor::Cs(kappa) => ScalingPolicy::ExponentialCS { kappa },
        PolicyDescriptor::ReverseCs(kappa) => ScalingPolicy::ReverseCS { kappa },
        PolicyDescriptor::Learnable { per_connection } => {
            let channels = r.u64()?;
            let count = r.u64()?;
            let mut nets = Vec::new();
            for _ in 0..count {
                let (n_min, reduction) = (r.u64()?, r.u64()?);
                let mut net = CalibNet::zeros(n_min, reduction);
                for _ in 0..r.u64()? {
                    let (dim, ratio) = (r.u64()?, r.u64()?);
                    let e = Tensor::scalar(0.0);
                    net.adapters.push(Adapter {
                        dim,
                        ratio,
                        enc_w1: e.clone(),
                        enc_w2: e.clone(),
                        dec_w1: e.clone(),
                        dec_w2: e,
                    });
                }
                nets.push(net);
            }
            ScalingPolicy::Learnable(Learnable {
                channels,
                per_connection,
                nets,
            })
        }
    };
    let placeholder = BlockParams { weights: Vec::new() };
    let mut model = UNetModel {
        m,
        l,
        n,
        encoders: vec![placeholder.clone(); n],
        decoders: vec![placeholder.clone(); n],
        middle: placeholder,
        policy,
        activation,
    };
    for b in model
        .encoders
        .iter_mut()
        .chain(model.decoders.iter_mut())
        .chain([&mut model.middle])
    {
        b.weights = vec![Tensor::scalar(0.0); l];
    }

    let count = r.u64()?;
    let mut slots = model.params_mut();
    if slots.len() != count {
        return Err(Error::Format(format!(
            "expected {} tensors, file has {count}",
            slots.len()
        )));
    }
    for slot in slots.iter_mut() {
        let rank = r.u64()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let requires_grad = r.take(1)?[0] != 0;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        **slot = Tensor::new(shape, data)
            .map_err(|e| Error::Format(format!("tensor: {e}")))?
            .with_requires_grad(requires_grad);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes".into()));
    }
    model
        .validate()
        .map_err(|e| Error::Format(format!("inconsistent model: {e}")))?;
    Ok(model)
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format("size overflow".into()))
    }
}
