//! Binary checkpoints: architecture header followed by little-endian f64 data.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::{Adam, Arch, Policy};

pub const CHECKPOINT_EXTENSION: &str = "foldact-ckpt";

const POLICY_MAGIC: &[u8; 8] = b"FOLDACT\0";
const OPTIM_MAGIC: &[u8; 8] = b"FAADAM\0\0";
const FORMAT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, x: u32) -> Result<()> {
    Ok(w.write_all(&x.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, x: u64) -> Result<()> {
    Ok(w.write_all(&x.to_le_bytes())?)
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    Ok(w.write_all(&buf)?)
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get(r)?))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(get(r)?))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn check_magic(r: &mut impl Read, magic: &[u8; 8]) -> Result<()> {
    if &get::<8>(r)? != magic {
        return Err(Error::format("checkpoint", "bad magic bytes"));
    }
    let v = get_u32(r)?;
    if v != FORMAT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported format version {v}")));
    }
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, policy: &Policy) -> Result<()> {
    let a = policy.arch();
    w.write_all(POLICY_MAGIC)?;
    put_u32(w, FORMAT_VERSION)?;
    for x in [a.vocab_size, a.d_model, a.n_layers, a.n_heads, a.window] {
        put_u32(w, x as u32)?;
    }
    put_u64(w, policy.version())?;
    put_u64(w, policy.num_params() as u64)?;
    put_f64s(w, policy.params())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Policy> {
    check_magic(r, POLICY_MAGIC)?;
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = get_u32(r)? as usize;
    }
    let arch = Arch { vocab_size: dims[0], d_model: dims[1], n_layers: dims[2], n_heads: dims[3], window: dims[4] };
    let version = get_u64(r)?;
    let n = get_u64(r)? as usize;
    if n != arch.param_count() {
        return Err(Error::format("checkpoint", format!("{n} parameters recorded, architecture needs {}", arch.param_count())));
    }
    let params = get_f64s(r, n)?;
    Policy::from_params(arch, params, version)
}

impl Adam {
    pub fn write_state(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(OPTIM_MAGIC)?;
        put_u32(w, FORMAT_VERSION)?;
        put_f64s(w, &[self.lr, self.beta1, self.beta2, self.eps])?;
        put_u64(w, self.t)?;
        put_u64(w, self.m.len() as u64)?;
        put_f64s(w, &self.m)?;
        put_f64s(w, &self.v)
    }

    pub fn read_state(r: &mut impl Read) -> Result<Self> {
        check_magic(r, OPTIM_MAGIC)?;
        let (lr, b1, b2, eps) = (get_f64(r)?, get_f64(r)?, get_f64(r)?, get_f64(r)?);
        let t = get_u64(r)?;
        let n = get_u64(r)? as usize;
        let m = get_f64s(r, n)?;
        let v = get_f64s(r, n)?;
        Ok(Adam::from_parts(lr, b1, b2, eps, t, m, v))
    }
}
