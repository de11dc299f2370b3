//! `MOL1` embedding files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "MOL1" version=1 num_samples num_layers N d label_arity
//! per sample: label_arity × u32 label payload,
//!             num_layers × (N·d) f32 values, row-major, layers in order
//! ```
//!
//! `label_arity = 1` stores a class index; larger arities store a 0/1
//! membership vector. A dataset directory holds one file per modality and
//! split (`train_image.mol`, `train_text.mol`, ...) plus `manifest.cfg`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, EncodedDataset, EncodedSample, Label, Modality, Sample, TaskMode};
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::numerics::Matrix;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"MOL1";
pub const EMBEDDING_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub label: Vec<u32>,
    /// `num_layers` matrices of shape `N × d`.
    pub layers: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub num_layers: usize,
    pub tokens: usize,
    pub dim: usize,
    pub label_arity: usize,
    pub records: Vec<EmbeddingRecord>,
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

impl EmbeddingFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let per_layer = self.tokens * self.dim;
        let mut out = Vec::with_capacity(
            HEADER_LEN + self.records.len() * (self.label_arity + self.num_layers * per_layer) * 4,
        );
        out.extend_from_slice(&EMBEDDING_MAGIC);
        for v in [
            EMBEDDING_VERSION,
            to_u32(self.records.len(), "num_samples")?,
            to_u32(self.num_layers, "num_layers")?,
            to_u32(self.tokens, "N")?,
            to_u32(self.dim, "d")?,
            to_u32(self.label_arity, "label_arity")?,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (i, rec) in self.records.iter().enumerate() {
            if rec.label.len() != self.label_arity || rec.layers.len() != self.num_layers {
                return Err(Error::Format(format!("record {i} disagrees with the header")));
            }
            for &l in &rec.label {
                out.extend_from_slice(&l.to_le_bytes());
            }
            for layer in &rec.layers {
                if layer.shape() != (self.tokens, self.dim) {
                    return Err(Error::shape("save_embeddings", layer.shape(), (self.tokens, self.dim)));
                }
                for &v in layer.as_slice() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Validates the full layout before building anything, so a bad file
    /// never yields a partial result.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                needed: HEADER_LEN,
                available: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != EMBEDDING_MAGIC {
            return Err(Error::BadMagic {
                expected: EMBEDDING_MAGIC,
                found: magic,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                needed: HEADER_LEN,
                available: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let version = word(0);
        if version != EMBEDDING_VERSION {
            return Err(Error::BadVersion {
                expected: EMBEDDING_VERSION,
                found: version,
            });
        }
        let [num_samples, num_layers, tokens, dim, label_arity] =
            [word(1), word(2), word(3), word(4), word(5)].map(|v| v as usize);
        if label_arity == 0 || num_layers == 0 {
            return Err(Error::Format("label_arity and num_layers must be positive".into()));
        }
        let per_layer = tokens
            .checked_mul(dim)
            .ok_or_else(|| Error::Format("N·d overflows".into()))?;
        let record_len = num_layers
            .checked_mul(per_layer)
            .and_then(|v| v.checked_add(label_arity))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format("record size overflows".into()))?;
        let needed = num_samples
            .checked_mul(record_len)
            .and_then(|v| v.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        if bytes.len() < needed {
            return Err(Error::Truncated {
                needed,
                available: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(Error::TrailingBytes(bytes.len() - needed));
        }

        let mut records = Vec::with_capacity(num_samples);
        let mut pos = HEADER_LEN;
        let mut next = || {
            let b: [u8; 4] = bytes[pos..pos + 4].try_into().expect("length checked");
            pos += 4;
            b
        };
        for _ in 0..num_samples {
            let label = (0..label_arity).map(|_| u32::from_le_bytes(next())).collect();
            let mut layers = Vec::with_capacity(num_layers);
            for _ in 0..num_layers {
                let data: Vec<f64> = (0..per_layer).map(|_| f32::from_le_bytes(next()) as f64).collect();
                let m = Matrix::from_vec(tokens, dim, data)?;
                if !m.is_finite() {
                    return Err(Error::Format("non-finite embedding value".into()));
                }
                layers.push(m);
            }
            records.push(EmbeddingRecord { label, layers });
        }
        Ok(Self {
            num_layers,
            tokens,
            dim,
            label_arity,
            records,
        })
    }
}

pub fn save_embeddings(file: &EmbeddingFile, path: &Path) -> Result<()> {
    let bytes = file.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingFile::from_bytes(&bytes)
}

fn encode_label(label: &Label) -> Vec<u32> {
    match label {
        Label::Single(c) => vec![*c as u32],
        Label::Multi(mask) => mask.iter().map(|&b| b as u32).collect(),
    }
}

fn decode_label(payload: &[u32], task: TaskMode) -> Result<Label> {
    match task {
        TaskMode::SingleLabel => Ok(Label::Single(payload[0] as usize)),
        TaskMode::MultiLabel => payload
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format(format!("membership value {other} is not 0/1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Label::Multi),
    }
}

fn modality_file(dataset: &Dataset, modality: Modality) -> Result<EmbeddingFile> {
    let first = dataset
        .samples
        .first()
        .ok_or_else(|| Error::Contract("cannot save an empty dataset".into()))?;
    let (tokens, dim) = first.features(modality).shape();
    let label_arity = match dataset.task {
        TaskMode::SingleLabel => 1,
        TaskMode::MultiLabel => dataset.num_classes,
    };
    Ok(EmbeddingFile {
        num_layers: 1,
        tokens,
        dim,
        label_arity,
        records: dataset
            .samples
            .iter()
            .map(|s| EmbeddingRecord {
                label: encode_label(&s.label),
                layers: vec![s.features(modality).clone()],
            })
            .collect(),
    })
}

fn split_path(dir: &Path, split: &str, modality: Modality) -> PathBuf {
    dir.join(format!("{split}_{}.mol", modality.as_str()))
}

/// Writes `{split}_image.mol`, `{split}_text.mol` and `manifest.cfg`.
pub fn save_split(dir: &Path, split: &str, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for m in [Modality::Image, Modality::Text] {
        save_embeddings(&modality_file(dataset, m)?, &split_path(dir, split, m))?;
    }
    let mut manifest = KvFile::default();
    manifest.insert("num_classes", dataset.num_classes.to_string());
    manifest.insert("task", dataset.task.as_str());
    let path = dir.join("manifest.cfg");
    fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))
}

/// A loaded split: raw features when the files hold one layer, otherwise
/// precomputed per-layer embeddings that bypass the stub encoders.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitData {
    Raw(Dataset),
    Encoded(EncodedDataset),
}

impl SplitData {
    pub fn num_classes(&self) -> usize {
        match self {
            SplitData::Raw(d) => d.num_classes,
            SplitData::Encoded(d) => d.num_classes,
        }
    }

    pub fn task(&self) -> TaskMode {
        match self {
            SplitData::Raw(d) => d.task,
            SplitData::Encoded(d) => d.task,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SplitData::Raw(d) => d.len(),
            SplitData::Encoded(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn load_split(dir: &Path, split: &str) -> Result<SplitData> {
    let image = load_embeddings(&split_path(dir, split, Modality::Image))?;
    let text = load_embeddings(&split_path(dir, split, Modality::Text))?;
    if image.records.len() != text.records.len() || image.num_layers != text.num_layers {
        return Err(Error::Format(format!(
            "image and text files disagree: {} vs {} samples, {} vs {} layers",
            image.records.len(),
            text.records.len(),
            image.num_layers,
            text.num_layers
        )));
    }
    if image.records.is_empty() {
        return Err(Error::Format("split has no samples".into()));
    }

    let manifest_path = dir.join("manifest.cfg");
    let manifest = match fs::read_to_string(&manifest_path) {
        Ok(text) => Some(KvFile::parse(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(&manifest_path, e)),
    };
    let task = match manifest.as_ref().and_then(|m| m.get("task")) {
        Some(t) => TaskMode::parse(t).ok_or_else(|| Error::Format(format!("unknown task {t:?}")))?,
        None if image.label_arity == 1 => TaskMode::SingleLabel,
        None => TaskMode::MultiLabel,
    };
    let num_classes = match manifest.as_ref().map(|m| m.parsed::<usize>("num_classes")).transpose()?.flatten() {
        Some(k) => k,
        None => match task {
            TaskMode::SingleLabel => image.records.iter().map(|r| r.label[0] as usize + 1).max().unwrap_or(0),
            TaskMode::MultiLabel => image.label_arity,
        },
    };

    let mut labels = Vec::with_capacity(image.records.len());
    for (i, (a, b)) in image.records.iter().zip(&text.records).enumerate() {
        if a.label != b.label {
            return Err(Error::Format(format!("sample {i}: image and text labels differ")));
        }
        let label = decode_label(&a.label, task)?;
        label.validate(num_classes, task)?;
        labels.push(label);
    }

    if image.num_layers == 1 {
        let samples = image
            .records
            .into_iter()
            .zip(text.records)
            .zip(labels)
            .map(|((mut a, mut b), label)| Sample {
                image: a.layers.remove(0),
                text: b.layers.remove(0),
                label,
            })
            .collect();
        let ds = Dataset {
            samples,
            num_classes,
            task,
        };
        ds.validate()?;
        Ok(SplitData::Raw(ds))
    } else {
        let samples = image
            .records
            .into_iter()
            .zip(text.records)
            .zip(labels)
            .map(|((a, b), label)| EncodedSample {
                image_layers: a.layers,
                text_layers: b.layers,
                label,
            })
            .collect();
        Ok(SplitData::Encoded(EncodedDataset {
            samples,
            num_classes,
            task,
        }))
    }
}
