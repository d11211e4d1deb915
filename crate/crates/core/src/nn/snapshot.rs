//! Binary model snapshots.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "SRCMLP\0\0" | version | scalar width in bytes | layer count | sizes...
//! weights of each layer, row-major, little-endian scalars
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Mlp;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"SRCMLP\0\0";
pub const SNAPSHOT_VERSION: u32 = 1;

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<u32> {
    let end = *at + 4;
    let raw = bytes
        .get(*at..end)
        .ok_or_else(|| Error::Format("snapshot header truncated".into()))?;
    *at = end;
    Ok(u32::from_le_bytes(raw.try_into().expect("4 bytes")))
}

impl<T: Scalar> Mlp<T> {
    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.num_synapses() * T::BYTES);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        out.extend_from_slice(&(self.layer_sizes.len() as u32).to_le_bytes());
        for &s in &self.layer_sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for w in &self.weights {
            for &v in w.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != SNAPSHOT_MAGIC {
            return Err(Error::Format("not a model snapshot (bad magic)".into()));
        }
        let mut at = 8;
        let version = read_u32(bytes, &mut at)?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!(
                "unsupported snapshot version {version}"
            )));
        }
        let width = read_u32(bytes, &mut at)? as usize;
        if width != T::BYTES {
            return Err(Error::Format(format!(
                "snapshot stores {width}-byte scalars, expected {}",
                T::BYTES
            )));
        }
        let n_layers = read_u32(bytes, &mut at)? as usize;
        if n_layers < 2 {
            return Err(Error::Format(format!("snapshot declares {n_layers} layers")));
        }
        let sizes = (0..n_layers)
            .map(|_| read_u32(bytes, &mut at).map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        let expected: usize = sizes.windows(2).map(|p| p[0] * p[1]).sum::<usize>() * width;
        if bytes.len() - at != expected {
            return Err(Error::Format(format!(
                "snapshot payload is {} bytes, header implies {expected}",
                bytes.len() - at
            )));
        }
        let mut weights = Vec::with_capacity(n_layers - 1);
        for pair in sizes.windows(2) {
            let n = pair[0] * pair[1];
            let data = bytes[at..at + n * width]
                .chunks_exact(width)
                .map(T::read_le)
                .collect();
            at += n * width;
            weights.push(Matrix::new(pair[0], pair[1], data)?);
        }
        Mlp::from_weights(weights)
    }

    pub fn write_snapshot(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_snapshot_bytes())?;
        Ok(())
    }

    pub fn read_snapshot(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_snapshot_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_snapshot_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_snapshot_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_weights;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(sizes in proptest::collection::vec(1usize..6, 2..5), seed in any::<u64>()) {
            let mlp = init_weights::<f64>(&sizes, seed).unwrap();
            let back = Mlp::<f64>::from_snapshot_bytes(&mlp.to_snapshot_bytes()).unwrap();
            prop_assert_eq!(back, mlp);
        }
    }

    #[test]
    fn rejects_corruption() {
        let mlp = init_weights::<f64>(&[3, 2], 1).unwrap();
        let bytes = mlp.to_snapshot_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Mlp::<f64>::from_snapshot_bytes(&bad), Err(Error::Format(_))));

        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(Mlp::<f64>::from_snapshot_bytes(truncated), Err(Error::Format(_))));

        // header says 3x3 but payload is 3x2
        let mut bad = bytes.clone();
        bad[24..28].copy_from_slice(&3u32.to_le_bytes());
        assert!(Mlp::<f64>::from_snapshot_bytes(&bad).is_err());

        assert!(Mlp::<f32>::from_snapshot_bytes(&bytes).is_err());
    }
}
