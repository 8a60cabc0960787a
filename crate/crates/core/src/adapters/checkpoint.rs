//! Private checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PLRM" | version u8 | cfg_len u32 | cfg JSON | init_seed u64 | n_layers u32
//!   n_layers × ( layer u32 | 3 × matrix )
//! has_embedding u8 | [matrix]
//! matrix = rows u32 | cols u32 | rows·cols × f32
//! ```
//!
//! `init_seed` identifies the public pair the weights were trained against. A
//! mismatch is detectable but loading one is allowed (the integrity ablation
//! does exactly that).

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::{AdapterConfig, DeviceAdapterWeights};

const MAGIC: &[u8; 4] = b"PLRM";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PrivateCheckpoint {
    pub config: AdapterConfig,
    pub weights: DeviceAdapterWeights,
    /// Present only when the tied embedding was trained.
    pub embedding: Option<Matrix>,
}

impl PrivateCheckpoint {
    /// Whether the stored `M` was trained against the public pair with `seed`.
    pub fn pairs_with(&self, seed: u64) -> bool {
        self.weights.init_seed == seed
    }
}

fn write_matrix(w: &mut impl Write, m: &Matrix) -> Result<()> {
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_matrix(r: &mut impl Read) -> Result<Matrix> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let n = rows
        .checked_mul(cols)
        .filter(|n| *n <= (1 << 30))
        .ok_or_else(|| Error::input("checkpoint matrix too large"))?;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &PrivateCheckpoint) -> Result<()> {
    let cfg = serde_json::to_vec(&ckpt.config).map_err(|e| Error::internal(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&ckpt.weights.init_seed.to_le_bytes())?;
    w.write_all(&(ckpt.weights.layers.len() as u32).to_le_bytes())?;
    for (&layer, ms) in &ckpt.weights.layers {
        w.write_all(&(layer as u32).to_le_bytes())?;
        for m in ms {
            write_matrix(w, m)?;
        }
    }
    match &ckpt.embedding {
        Some(e) => {
            w.write_all(&[1])?;
            write_matrix(w, e)?;
        }
        None => w.write_all(&[0])?,
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<PrivateCheckpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::input("not a private checkpoint (bad magic)"));
    }
    let version = read_u8(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::input(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = read_u32(r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)?;
    let config: AdapterConfig =
        serde_json::from_slice(&cfg).map_err(|e| Error::input(format!("checkpoint config: {e}")))?;
    let init_seed = read_u64(r)?;
    let n = read_u32(r)? as usize;
    let mut weights = DeviceAdapterWeights {
        init_seed,
        layers: Default::default(),
    };
    for _ in 0..n {
        let layer = read_u32(r)? as usize;
        let ms = [read_matrix(r)?, read_matrix(r)?, read_matrix(r)?];
        for m in &ms {
            if m.shape() != (config.r_c2d, config.r_d2c) {
                return Err(Error::input(format!(
                    "checkpoint layer {layer} has M of shape {:?}, config says {:?}",
                    m.shape(),
                    (config.r_c2d, config.r_d2c)
                )));
            }
        }
        weights.layers.insert(layer, ms);
    }
    let embedding = match read_u8(r)? {
        0 => None,
        1 => Some(read_matrix(r)?),
        f => return Err(Error::input(format!("bad embedding flag {f}"))),
    };
    Ok(PrivateCheckpoint {
        config,
        weights,
        embedding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_rejects_garbage() {
        let cfg = AdapterConfig::new(2, 3, vec![0, 2], 5);
        let mut weights = DeviceAdapterWeights::zeros(&cfg);
        weights.layers.get_mut(&2).unwrap()[1].set(1, 2, -3.5);
        let ckpt = PrivateCheckpoint {
            config: cfg,
            weights,
            embedding: Some(Matrix::from_fn(2, 2, |r, c| (r + c) as f32)),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        assert!(back.pairs_with(5) && !back.pairs_with(6));

        buf[0] = b'X';
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
        assert!(read_checkpoint(&mut &b"PLRM"[..]).is_err());
    }
}
