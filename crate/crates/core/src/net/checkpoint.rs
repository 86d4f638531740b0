//! Denoiser checkpoint format.
//!
//! ```text
//! magic        8 bytes   "PNPNET1\0"
//! n_layers     u32 LE
//! channels     u32 LE
//! kernel       u32 LE
//! activation   u32 LE    0 = softplus-shifted, 1 = relu, 2 = identity
//! global_skip  u32 LE    always 1
//! n_params     u64 LE
//! theta        n_params × f64 LE
//! ```
//!
//! `theta` holds, for each layer from input to output, the weights in
//! `[out][in][ky][kx]` order followed by the biases.

use std::path::Path;

use super::{Activation, ArchConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::sim::io::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PNPNET1\0";
const HEADER_LEN: usize = 8 + 5 * 4 + 8;

pub fn encode_checkpoint(params: &DenoiserParams) -> Vec<u8> {
    let a = &params.arch;
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * params.theta.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [a.n_layers as u32, a.channels as u32, a.kernel as u32, a.activation.code(), a.global_skip as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(params.theta.len() as u64).to_le_bytes());
    for t in &params.theta {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<DenoiserParams> {
    let bad = |reason: String| Error::Format { path: origin.to_path_buf(), reason };
    if bytes.len() < HEADER_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing PNPNET1 header".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().unwrap());
    let activation = Activation::from_code(word(3)).ok_or_else(|| bad(format!("unknown activation code {}", word(3))))?;
    let arch = ArchConfig {
        n_layers: word(0) as usize,
        channels: word(1) as usize,
        kernel: word(2) as usize,
        activation,
        global_skip: word(4) != 0,
    };
    let n = u64::from_le_bytes(bytes[28..36].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * n {
        return Err(bad(format!("expected {n} parameters, payload holds {} bytes", body.len())));
    }
    let theta = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    DenoiserParams::new(arch, theta).map_err(|e| bad(e.to_string()))
}

pub fn write_checkpoint(path: &Path, params: &DenoiserParams) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn read_checkpoint(path: &Path) -> Result<DenoiserParams> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::MissingPrerequisite { path: path.to_path_buf(), reason: "checkpoint not found".into() }
        }
        _ => Error::Io(e),
    })?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let arch = ArchConfig { n_layers: 3, channels: 4, kernel: 5, activation: Activation::Relu, global_skip: true };
        let p = DenoiserParams::init(arch, 42).unwrap();
        let bytes = encode_checkpoint(&p);
        assert_eq!(&bytes[..8], b"PNPNET1\0");
        assert_eq!(bytes.len(), HEADER_LEN + 8 * arch.n_params());
        assert_eq!(decode_checkpoint(&bytes, Path::new("mem")).unwrap(), p);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let p = DenoiserParams::zeros(ArchConfig::default()).unwrap();
        let mut bytes = encode_checkpoint(&p);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8], Path::new("mem")).is_err());
        bytes[20] = 9; // activation code
        assert!(decode_checkpoint(&bytes, Path::new("mem")).is_err());
    }
}
