//! Binary adapter checkpoints: magic, adapter kind and dimensions, the hash
//! of the run configuration, then every parameter as a little-endian `f64`.

use std::io::{Read, Write};

use super::{Adapter, AdapterKind};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LADP";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not an adapter checkpoint")]
    BadMagic,
    #[error("unknown adapter kind tag {0}")]
    UnknownKind(u8),
    #[error("checkpoint declares {declared} parameters, shape implies {expected}")]
    ShapeMismatch { declared: u64, expected: usize },
}

pub fn write_checkpoint(adapter: &Adapter, config_hash: u64, mut out: impl Write) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&[match adapter.kind() {
        AdapterKind::Linear => 0u8,
        AdapterKind::Residual => 1u8,
    }])?;
    for dim in [adapter.input_dim(), adapter.hidden_dim(), adapter.output_dim()] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    out.write_all(&config_hash.to_le_bytes())?;
    let params = adapter.to_flat();
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

/// Returns the adapter and the configuration hash stored with it.
pub fn read_checkpoint(mut input: impl Read) -> Result<(Adapter, u64), CheckpointError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut tag = [0u8; 1];
    input.read_exact(&mut tag)?;
    let mut u32_buf = [0u8; 4];
    let mut dims = [0usize; 3];
    for dim in &mut dims {
        input.read_exact(&mut u32_buf)?;
        *dim = u32::from_le_bytes(u32_buf) as usize;
    }
    let mut u64_buf = [0u8; 8];
    input.read_exact(&mut u64_buf)?;
    let config_hash = u64::from_le_bytes(u64_buf);
    input.read_exact(&mut u64_buf)?;
    let declared = u64::from_le_bytes(u64_buf);
    let [in_dim, hidden, _out_dim] = dims;
    let mut adapter = match tag[0] {
        0 => Adapter::linear_identity(in_dim),
        1 => Adapter::residual(in_dim, hidden, 0),
        other => return Err(CheckpointError::UnknownKind(other)),
    };
    if declared != adapter.n_params() as u64 {
        return Err(CheckpointError::ShapeMismatch { declared, expected: adapter.n_params() });
    }
    let mut params = vec![0.0; adapter.n_params()];
    for p in &mut params {
        input.read_exact(&mut u64_buf)?;
        *p = f64::from_le_bytes(u64_buf);
    }
    adapter.set_flat(&params).expect("length checked above");
    Ok((adapter, config_hash))
}
