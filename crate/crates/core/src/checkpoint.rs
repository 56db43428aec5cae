//! Binary checkpoint format.
//!
//! Layout (all integers u32 little-endian): magic `LSEG`, version, the
//! network config (depth, base_channels, layers, head_channels,
//! input_channels), parameter count, then per parameter in name order:
//! name length, UTF-8 name, rank, dims, and the f32 data.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::NetworkConfig;
use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LSEG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: ParameterSet<f32>,
}

fn put(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn take(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put(w, VERSION as usize)?;
        let c = &self.config;
        for v in [c.depth, c.base_channels, c.layers, c.head_channels, c.input_channels] {
            put(w, v)?;
        }
        put(w, self.params.len())?;
        for (name, t) in self.params.iter() {
            put(w, name.len())?;
            w.write_all(name.as_bytes())?;
            put(w, t.rank())?;
            for &d in t.shape() {
                put(w, d)?;
            }
            let mut buf = Vec::with_capacity(4 * t.len());
            t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = take(r)?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = NetworkConfig {
            depth: take(r)?,
            base_channels: take(r)?,
            layers: take(r)?,
            head_channels: take(r)?,
            input_channels: take(r)?,
        };
        config.validate()?;
        let count = take(r)?;
        let mut params = ParameterSet::new();
        for _ in 0..count {
            let len = take(r)?;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)
                .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(format!("parameter name: {e}")))?;
            let rank = take(r)?;
            let shape = (0..rank).map(|_| take(r)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; 4 * n];
            r.read_exact(&mut bytes)
                .map_err(|e| Error::Checkpoint(format!("truncated data for `{name}`: {e}")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        let expected = crate::model::init_params(&config, 0)?;
        expected.check_congruent(&params)?;
        Ok(Self { config, params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = bytes.as_slice();
        let ck = Self::read_from(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(ck)
    }
}
