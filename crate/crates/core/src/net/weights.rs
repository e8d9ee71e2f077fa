//! `NWW1` weight files.
//!
//! Layout (little-endian): magic `NWW1`, version u16, config hash u64, tensor
//! count u32, then per tensor: name length u16, UTF-8 name, rank u8, extents
//! as u32, and the f64 payload.

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::config::ModelConfig;
use crate::binio::{check_version, expect_eof, read_magic, write_atomic};
use crate::error::{truncated, Error, Result};
use crate::graph::ParameterSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NWW1";
pub const VERSION: u16 = 1;

pub fn encode_weights(w: &mut impl Write, params: &ParameterSet, config_hash: u64) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u16::<LE>(VERSION)?;
    w.write_u64::<LE>(config_hash)?;
    w.write_u32::<LE>(params.len() as u32)?;
    for (name, t) in params.iter() {
        w.write_u16::<LE>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(t.shape().len() as u8)?;
        for &e in t.shape() {
            w.write_u32::<LE>(e as u32)?;
        }
        for &v in t.data() {
            w.write_f64::<LE>(v)?;
        }
    }
    Ok(())
}

/// Decode a weights stream, returning the stored config hash and tensors.
pub fn decode_weights(r: &mut impl Read) -> Result<(u64, ParameterSet)> {
    let t = truncated("weights");
    read_magic(r, MAGIC, "weights")?;
    check_version(r.read_u16::<LE>().map_err(&t)?, VERSION)?;
    let hash = r.read_u64::<LE>().map_err(&t)?;
    let count = r.read_u32::<LE>().map_err(&t)?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let len = r.read_u16::<LE>().map_err(&t)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(&t)?;
        let name = String::from_utf8(name).map_err(|_| Error::Data("weights: tensor name not UTF-8".into()))?;
        let rank = r.read_u8().map_err(&t)? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Data(format!("weights: tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LE>().map_err(&t)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        r.read_f64_into::<LE>(&mut data).map_err(&t)?;
        params.push(name, Tensor::new(shape, data)?);
    }
    Ok((hash, params))
}

pub fn save_weights(path: &Path, params: &ParameterSet, config: &ModelConfig) -> Result<()> {
    write_atomic(path, |w| encode_weights(w, params, config.hash()))
}

/// Load weights written for `config`; a file from any other config is rejected.
pub fn load_weights(path: &Path, config: &ModelConfig) -> Result<ParameterSet> {
    let mut r = BufReader::new(File::open(path)?);
    let (hash, params) = decode_weights(&mut r)?;
    expect_eof(&mut r, "weights")?;
    if hash != config.hash() {
        return Err(Error::ConfigHashMismatch { expected: config.hash(), found: hash });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::build_model;

    #[test]
    fn round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.nww");
        let cfg = ModelConfig::tiny();
        let (_, params) = build_model(&cfg, 11).unwrap();
        save_weights(&path, &params, &cfg).unwrap();
        let back = load_weights(&path, &cfg).unwrap();
        assert_eq!(back, params);

        let bytes = std::fs::read(&path).unwrap();
        let mut again = Vec::new();
        encode_weights(&mut again, &back, cfg.hash()).unwrap();
        assert_eq!(bytes, again);

        match load_weights(&path, &ModelConfig::canonical()) {
            Err(Error::ConfigHashMismatch { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.nww");
        let cfg = ModelConfig::tiny();
        let (_, params) = build_model(&cfg, 1).unwrap();
        save_weights(&path, &params, &cfg).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_weights(&path, &cfg), Err(Error::TruncatedFile(_))));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_weights(&path, &cfg), Err(Error::BadMagic { .. })));

        let mut bad = bytes;
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_weights(&path, &cfg), Err(Error::UnsupportedVersion { .. })));
    }
}
