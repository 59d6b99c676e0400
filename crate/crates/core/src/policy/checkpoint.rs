//! Binary checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CKRL"
//! 4       4     version (u32) = 1
//! 8       4     obs_dim (u32)
//! 12      4     number of trunk layers L (u32)
//! 16      4*L   trunk widths (u32 each)
//! ..      4     vocab_size (u32)
//! ..      4     chunk_len (u32)
//! ..      4     tokens_per_action (u32)
//! ..      4     value_hidden (u32)
//! ..      8     parameter count N (u64)
//! ..      8*N   parameters (f64 each)
//! ```

use super::{Architecture, PolicyError, PolicyNet};
use std::io::{Read, Write};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKRL";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, x: usize) -> Result<(), PolicyError> {
    let x = u32::try_from(x).map_err(|_| PolicyError::Checkpoint("field exceeds u32".into()))?;
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize, PolicyError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub(super) fn save<W: Write>(net: &PolicyNet, mut w: W) -> Result<(), PolicyError> {
    let a = &net.arch;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    put_u32(&mut w, a.obs_dim)?;
    put_u32(&mut w, a.trunk_widths.len())?;
    for &width in &a.trunk_widths {
        put_u32(&mut w, width)?;
    }
    put_u32(&mut w, a.vocab_size)?;
    put_u32(&mut w, a.chunk_len)?;
    put_u32(&mut w, a.tokens_per_action)?;
    put_u32(&mut w, a.value_hidden)?;
    w.write_all(&(net.theta.len() as u64).to_le_bytes())?;
    for x in &net.theta {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(super) fn load<R: Read>(mut r: R) -> Result<PolicyNet, PolicyError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(PolicyError::Checkpoint("bad magic".into()));
    }
    let version = get_u32(&mut r)? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(PolicyError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let obs_dim = get_u32(&mut r)?;
    let layers = get_u32(&mut r)?;
    if layers > 64 {
        return Err(PolicyError::Checkpoint("implausible layer count".into()));
    }
    let trunk_widths = (0..layers)
        .map(|_| get_u32(&mut r))
        .collect::<Result<Vec<_>, _>>()?;
    let arch = Architecture {
        obs_dim,
        trunk_widths,
        vocab_size: get_u32(&mut r)?,
        chunk_len: get_u32(&mut r)?,
        tokens_per_action: get_u32(&mut r)?,
        value_hidden: get_u32(&mut r)?,
    };
    let mut nb = [0u8; 8];
    r.read_exact(&mut nb)?;
    let n = u64::from_le_bytes(nb) as usize;
    let expected = super::Layout::new(&arch).total;
    if n != expected {
        return Err(PolicyError::Checkpoint(format!(
            "parameter count {n} does not match architecture ({expected})"
        )));
    }
    let mut theta = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut nb)?;
        theta.push(f64::from_le_bytes(nb));
    }
    PolicyNet::from_parts(arch, theta)
}
