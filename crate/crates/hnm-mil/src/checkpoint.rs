//! Model checkpoint container.
//!
//! One file holds the encoder and aggregator together: magic `MILP`,
//! little-endian u32 version=1, u32 header length, a JSON architecture
//! header, u64 value count, then the parameters as f64 little-endian in a
//! fixed order (encoder layers as weight/bias pairs, projection, then
//! `w_ins`, `w_bag`, `w_q`). Values stay f64 end to end, so a save/load
//! round trip is bit-exact.

use crate::aggregator::AggregatorParams;
use crate::encoder::{EncoderArch, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"MILP";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    encoder: EncoderArch,
    query_dim: usize,
}

/// A trained model pair ready for evaluation or further iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderParams,
    pub aggregator: AggregatorParams,
}

fn format_err(file: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        file: file.to_path_buf(),
        offset,
        message: message.into(),
    }
}

/// Tensor shapes implied by the header, in blob order.
fn expected_shapes(header: &Header) -> Vec<Vec<usize>> {
    let dims = &header.encoder.dims;
    let l = *dims.last().unwrap();
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    for w in dims.windows(2) {
        shapes.push(vec![w[0], w[1]]);
        shapes.push(vec![w[1]]);
    }
    shapes.push(vec![l, header.encoder.proj_dim]);
    shapes.push(vec![l]);
    shapes.push(vec![l]);
    shapes.push(vec![l, header.query_dim]);
    shapes
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            encoder: self.encoder.arch.clone(),
            query_dim: self.aggregator.w_q.cols(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let tensors: Vec<Tensor> = self
            .encoder
            .flat()
            .into_iter()
            .chain(self.aggregator.flat())
            .collect();
        let count: usize = tensors.iter().map(|t| t.len()).sum();

        let mut buf = Vec::with_capacity(20 + header_json.len() + count * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_json);
        buf.extend_from_slice(&(count as u64).to_le_bytes());
        for t in &tensors {
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        if bytes.len() < 12 {
            return Err(format_err(path, 0, "file shorter than header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(format_err(path, 0, "bad magic, expected MILP"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(format_err(path, 4, format!("unsupported version {version}")));
        }
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let blob_start = 12 + json_len + 8;
        if bytes.len() < blob_start {
            return Err(format_err(path, 12, "truncated architecture header"));
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + json_len])
            .map_err(|e| format_err(path, 12, format!("architecture header parse: {e}")))?;
        header.encoder.validate()?;
        if header.query_dim == 0 {
            return Err(format_err(path, 12, "query_dim must be positive"));
        }

        let shapes = expected_shapes(&header);
        let expected_count: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let count =
            u64::from_le_bytes(bytes[12 + json_len..blob_start].try_into().unwrap()) as usize;
        if count != expected_count {
            return Err(format_err(
                path,
                (12 + json_len) as u64,
                format!("architecture implies {expected_count} values, file declares {count}"),
            ));
        }
        if bytes.len() != blob_start + count * 8 {
            return Err(format_err(
                path,
                blob_start as u64,
                format!(
                    "expected {} bytes of parameters, file has {}",
                    count * 8,
                    bytes.len() - blob_start
                ),
            ));
        }

        let mut offset = blob_start;
        let mut tensors = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
                if !v.is_finite() {
                    return Err(format_err(path, offset as u64, "non-finite parameter value"));
                }
                data.push(v);
                offset += 8;
            }
            tensors.push(Tensor::new(shape, data).expect("shape matches count"));
        }

        let n_layers = header.encoder.dims.len() - 1;
        let mut it = tensors.into_iter();
        let layers: Vec<(Tensor, Tensor)> = (0..n_layers)
            .map(|_| (it.next().unwrap(), it.next().unwrap()))
            .collect();
        let proj = it.next().unwrap();
        let aggregator = AggregatorParams {
            w_ins: it.next().unwrap(),
            w_bag: it.next().unwrap(),
            w_q: it.next().unwrap(),
        };
        Ok(Checkpoint {
            encoder: EncoderParams {
                arch: header.encoder,
                layers,
                proj,
            },
            aggregator,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn demo_checkpoint(seed: u64) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(
            EncoderArch {
                dims: vec![5, 7, 3],
                proj_dim: 4,
                normalize: true,
            },
            &mut rng,
        )
        .unwrap();
        let aggregator = AggregatorParams::init(3, 6, &mut rng);
        Checkpoint { encoder, aggregator }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = demo_checkpoint(3);
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        demo_checkpoint(5).save(&a).unwrap();
        demo_checkpoint(5).save(&b).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        demo_checkpoint(1).save(&path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));

        let mut truncated = good.clone();
        truncated.truncate(truncated.len() - 8);
        fs::write(&path, &truncated).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("bytes"), "{err}");

        let mut bad_version = good;
        bad_version[4] = 9;
        fs::write(&path, &bad_version).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
