//! Row-aligned embedding matrices and their on-disk form.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledPatchSet, TissueClass};
use crate::error::{Error, IoContext, Result};
use crate::jsonl;
use crate::nn::{images_to_tensor, Encoder};

const MAGIC: &[u8; 4] = b"EMBM";
pub const EMBEDDING_FILE_VERSION: u32 = 1;

/// Inference batch size used when none is given.
pub const DEFAULT_EMBED_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub item_id: String,
    pub label: TissueClass,
}

/// One embedding per item, in dataset order, with aligned ids and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub values: Array2<f32>,
    pub item_ids: Vec<String>,
    pub labels: Vec<TissueClass>,
}

impl EmbeddingMatrix {
    pub fn new(
        values: Array2<f32>,
        item_ids: Vec<String>,
        labels: Vec<TissueClass>,
    ) -> Result<Self> {
        if values.nrows() != item_ids.len() || item_ids.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} rows, {} ids, {} labels",
                values.nrows(),
                item_ids.len(),
                labels.len()
            )));
        }
        Ok(EmbeddingMatrix {
            values,
            item_ids,
            labels,
        })
    }

    pub fn empty(dim: usize) -> Self {
        EmbeddingMatrix {
            values: Array2::zeros((0, dim)),
            item_ids: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.values.mapv(f64::from)
    }

    /// Rows restricted to `positions`, in the given order.
    pub fn select(&self, positions: &[usize]) -> Self {
        EmbeddingMatrix {
            values: self.values.select(ndarray::Axis(0), positions),
            item_ids: positions
                .iter()
                .map(|&i| self.item_ids[i].clone())
                .collect(),
            labels: positions.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Sidecar path used next to a matrix file.
    pub fn labels_path(path: &Path) -> PathBuf {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".labels.jsonl");
        path.with_file_name(name)
    }

    /// Writes the binary matrix to `path` and the labels next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).at(path)?;
        let mut w = BufWriter::new(f);
        let mut header = Vec::with_capacity(24);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&EMBEDDING_FILE_VERSION.to_le_bytes());
        header.extend_from_slice(&(self.len() as u64).to_le_bytes());
        header.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        w.write_all(&header).at(path)?;
        for v in self.values.iter() {
            w.write_all(&v.to_le_bytes()).at(path)?;
        }
        w.flush().at(path)?;
        let records: Vec<LabelRecord> = self
            .item_ids
            .iter()
            .zip(&self.labels)
            .map(|(id, &label)| LabelRecord {
                item_id: id.clone(),
                label,
            })
            .collect();
        jsonl::write(&Self::labels_path(path), &records)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message,
        };
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(parse("not an embedding matrix file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != EMBEDDING_FILE_VERSION {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                found: version,
                expected: EMBEDDING_FILE_VERSION,
            });
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let dim = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let body = &bytes[24..];
        if body.len() != rows * dim * 4 {
            return Err(parse(format!(
                "header promises {rows}×{dim} values, body has {} bytes",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let values = Array2::from_shape_vec((rows, dim), data).expect("checked length");
        let records: Vec<LabelRecord> = jsonl::read(&Self::labels_path(path))?;
        let (item_ids, labels) = records.into_iter().map(|r| (r.item_id, r.label)).unzip();
        Self::new(values, item_ids, labels)
    }
}

/// Embeds every patch in dataset order, `batch_size` images at a time.
/// Results do not depend on the batch size.
pub fn extract_embeddings(
    dataset: &LabeledPatchSet,
    encoder: &Encoder,
    batch_size: usize,
) -> Result<EmbeddingMatrix> {
    let dim = encoder.config().embedding_dim;
    if dataset.is_empty() {
        return Ok(EmbeddingMatrix::empty(dim));
    }
    let batch_size = batch_size.max(1);
    let mut values = Array2::zeros((dataset.len(), dim));
    for (b, chunk) in dataset.items().chunks(batch_size).enumerate() {
        let images: Vec<_> = chunk.iter().map(|p| &p.image).collect();
        let e = encoder.embed_batch(&images_to_tensor(&images)?)?;
        let start = b * batch_size;
        values
            .slice_mut(ndarray::s![start..start + chunk.len(), ..])
            .assign(&e);
    }
    EmbeddingMatrix::new(
        values,
        dataset.items().iter().map(|p| p.item_id.clone()).collect(),
        dataset.labels(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EncoderConfig;
    use crate::synthetic::tissue_patch_set;

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = EmbeddingMatrix::new(
            ndarray::array![[1.0, -2.5], [0.0, 3.25], [7.0, 8.0]],
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                TissueClass::Debris,
                TissueClass::ImmuneCells,
                TissueClass::Debris,
            ],
        )
        .unwrap();
        let p = dir.path().join("emb.bin");
        m.write(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"EMBM");
        assert_eq!(bytes.len(), 24 + 6 * 4);
        assert_eq!(EmbeddingMatrix::read(&p).unwrap(), m);
    }

    #[test]
    fn sixteen_items_aligned() {
        let set = tissue_patch_set(2, 0);
        assert_eq!(set.len(), 16);
        let enc = Encoder::new(EncoderConfig::small_conv(), 0).unwrap();
        let m = extract_embeddings(&set, &enc, 32).unwrap();
        assert_eq!(m.values.dim(), (16, 128));
        assert_eq!(m.labels, set.labels());
        assert_eq!(m.item_ids[3], set.items()[3].item_id);
    }

    #[test]
    fn batched_equals_unbatched() {
        let set = tissue_patch_set(5, 1);
        let enc = Encoder::new(EncoderConfig::small_conv(), 2).unwrap();
        let a = extract_embeddings(&set, &enc, 32).unwrap();
        let b = extract_embeddings(&set, &enc, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_set_gives_empty_matrix() {
        let set = LabeledPatchSet::new(Vec::new(), Default::default()).unwrap();
        let enc = Encoder::new(EncoderConfig::small_conv(), 0).unwrap();
        let m = extract_embeddings(&set, &enc, 32).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.dim(), 128);
    }
}
