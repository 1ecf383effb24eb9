use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Architecture, Encoder, EncoderConfig};
use crate::error::{Error, IoContext, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

const MAGIC: &[u8; 8] = b"HTRIPCKP";
const WEIGHTS_FILE: &str = "weights.bin";
const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub version: u32,
    pub architecture: Architecture,
    pub embedding_dim: usize,
    pub input_shape: (usize, usize, usize),
    pub normalize_embeddings: bool,
    pub num_classes: Option<usize>,
    pub margin: f64,
    pub seed: u64,
    pub step: u64,
}

impl CheckpointMetadata {
    pub fn for_encoder(encoder: &Encoder, margin: f64, seed: u64, step: u64) -> Self {
        let c = encoder.config();
        CheckpointMetadata {
            version: CHECKPOINT_VERSION,
            architecture: c.architecture,
            embedding_dim: c.embedding_dim,
            input_shape: c.input_shape,
            normalize_embeddings: c.normalize_embeddings,
            num_classes: encoder.num_classes(),
            margin,
            seed,
            step,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_shape: self.input_shape,
            embedding_dim: self.embedding_dim,
            architecture: self.architecture,
            normalize_embeddings: self.normalize_embeddings,
        }
    }
}

/// Writes `weights.bin` and `metadata.json` into `dir`. The weight file is
/// magic, version, tensor count, then length-prefixed little-endian `f32`
/// tensors (parameters, then running statistics), then a SHA-256 of all
/// preceding bytes.
pub fn save_checkpoint(dir: &Path, encoder: &Encoder, meta: &CheckpointMetadata) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let store = encoder.store();
    let tensors: Vec<&[f32]> = store
        .params
        .iter()
        .map(|p| p.value.as_slice())
        .chain(store.buffers.iter().map(|b| b.as_slice()))
        .collect();
    let mut buf = Vec::with_capacity(16 + store.num_params() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&meta.version.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    write_atomic(&dir.join(WEIGHTS_FILE), &buf)?;
    let json = serde_json::to_vec_pretty(meta)?;
    write_atomic(&dir.join(METADATA_FILE), &json)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).at(&tmp)?;
    f.write_all(bytes).at(&tmp)?;
    f.sync_all().at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Restores an encoder saved by [`save_checkpoint`]. Nothing is returned
/// unless the whole file verifies.
pub fn load_checkpoint(dir: &Path) -> Result<(Encoder, CheckpointMetadata)> {
    let meta_path = dir.join(METADATA_FILE);
    let meta_bytes = fs::read(&meta_path).at(&meta_path)?;
    let meta: CheckpointMetadata =
        serde_json::from_slice(&meta_bytes).map_err(|e| Error::Parse {
            path: meta_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible {
            path: meta_path,
            found: meta.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&path).at(&path)?;
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return Err(Error::Checksum(path));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest || &body[..MAGIC.len()] != MAGIC {
        return Err(Error::Checksum(path));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let bad = || Error::Checksum(path.clone());
    let version = r.u32().ok_or_else(bad)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible {
            path,
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut encoder = Encoder::build(meta.encoder_config(), meta.num_classes, 0)?;
    let count = r.u32().ok_or_else(bad)? as usize;
    let store = encoder.store_mut();
    let expected = store.params.len() + store.buffers.len();
    if count != expected {
        return Err(Error::Contract(format!(
            "{} holds {count} tensors, the {} architecture has {expected}",
            path.display(),
            meta.architecture
        )));
    }
    let n_params = store.params.len();
    for k in 0..count {
        let len = r.u64().ok_or_else(bad)? as usize;
        let target = if k < n_params {
            &mut store.params[k].value
        } else {
            &mut store.buffers[k - n_params]
        };
        if len != target.len() {
            return Err(Error::Contract(format!(
                "tensor {k} in {} has {len} values, expected {}",
                path.display(),
                target.len()
            )));
        }
        let raw = r.take(len * 4).ok_or_else(bad)?;
        for (v, chunk) in target.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    if r.pos != body.len() {
        return Err(bad());
    }
    Ok((encoder, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn probe() -> Tensor {
        let data = (0..2 * 3 * 128 * 128)
            .map(|i| ((i * 7919) % 256) as f32 / 255.0)
            .collect();
        Tensor::from_vec([2, 3, 128, 128], data)
    }

    #[test]
    fn round_trip_preserves_embeddings_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let mut enc = Encoder::new(EncoderConfig::small_conv(), 7).unwrap();
        // Move running statistics away from their initial values.
        enc.forward_train(&probe(), false).unwrap();
        let meta = CheckpointMetadata::for_encoder(&enc, 0.25, 7, 42);
        save_checkpoint(dir.path(), &enc, &meta).unwrap();
        let (back, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m, meta);
        assert_eq!(m.margin, 0.25);
        assert_eq!(m.embedding_dim, 128);
        assert_eq!(
            enc.embed_batch(&probe()).unwrap(),
            back.embed_batch(&probe()).unwrap()
        );
    }

    #[test]
    fn corrupted_weights_fail_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let enc = Encoder::new(EncoderConfig::small_conv(), 1).unwrap();
        save_checkpoint(
            dir.path(),
            &enc,
            &CheckpointMetadata::for_encoder(&enc, 0.25, 1, 0),
        )
        .unwrap();
        let p = dir.path().join(WEIGHTS_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes[100] ^= 0xff;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Checksum(_))
        ));
    }

    #[test]
    fn version_mismatch_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let enc = Encoder::new(EncoderConfig::small_conv(), 1).unwrap();
        let mut meta = CheckpointMetadata::for_encoder(&enc, 0.25, 1, 0);
        meta.version = 99;
        save_checkpoint(dir.path(), &enc, &meta).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Incompatible { found: 99, .. })
        ));
    }
}
