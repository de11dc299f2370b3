//! Frozen stub encoders, the synthetic paired-modality generator and the
//! binary embedding file format.

mod embfile;
mod encoder;
mod synthetic;

pub use embfile::{
    load_embeddings, load_split, save_embeddings, save_split, EmbeddingFile, EmbeddingRecord,
    SplitData, EMBEDDING_MAGIC, EMBEDDING_VERSION,
};
pub use encoder::{paired_layers, EncoderConfig, EncoderStack};
pub use synthetic::{generate_synthetic, generate_train_test, SyntheticSpec};

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::Image => Modality::Text,
            Modality::Text => Modality::Image,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TaskMode {
    /// One class per sample, softmax cross-entropy.
    #[default]
    SingleLabel,
    /// Any subset of classes, per-class sigmoid.
    MultiLabel,
}

impl TaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskMode::SingleLabel => "single",
            TaskMode::MultiLabel => "multi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single" | "single-label" => Some(TaskMode::SingleLabel),
            "multi" | "multi-label" => Some(TaskMode::MultiLabel),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Label {
    Single(usize),
    Multi(Vec<bool>),
}

impl Label {
    pub fn validate(&self, num_classes: usize, task: TaskMode) -> Result<()> {
        match (self, task) {
            (Label::Single(c), TaskMode::SingleLabel) if *c < num_classes => Ok(()),
            (Label::Multi(v), TaskMode::MultiLabel) if v.len() == num_classes => Ok(()),
            _ => Err(Error::Contract(format!(
                "label {self:?} invalid for {num_classes} classes in {} mode",
                task.as_str()
            ))),
        }
    }

    /// Membership vector over `num_classes` classes.
    pub fn to_mask(&self, num_classes: usize) -> Vec<bool> {
        match self {
            Label::Single(c) => (0..num_classes).map(|k| k == *c).collect(),
            Label::Multi(v) => v.clone(),
        }
    }
}

/// One image-text pair of raw (pre-encoder) token features.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Matrix,
    pub text: Matrix,
    pub label: Label,
}

impl Sample {
    pub fn features(&self, modality: Modality) -> &Matrix {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn features_mut(&mut self, modality: Modality) -> &mut Matrix {
        match modality {
            Modality::Image => &mut self.image,
            Modality::Text => &mut self.text,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub task: TaskMode,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Contract("at least two classes are required".into()));
        }
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::Contract("dataset is empty".into()))?;
        let (ishape, tshape) = (first.image.shape(), first.text.shape());
        for s in &self.samples {
            s.label.validate(self.num_classes, self.task)?;
            if s.image.shape() != ishape || s.text.shape() != tshape {
                return Err(Error::shape("dataset", ishape, s.image.shape()));
            }
            s.image.ensure_finite("dataset image features")?;
            s.text.ensure_finite("dataset text features")?;
        }
        Ok(())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            for (k, on) in s.label.to_mask(self.num_classes).into_iter().enumerate() {
                counts[k] += on as usize;
            }
        }
        counts
    }
}

/// Per-layer encoder outputs of one sample, ready for the tunable modules.
///
/// `image_layers` and `text_layers` hold the last `k` layers of each stack
/// in forward order; the final entry of each is the final embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub image_layers: Vec<Matrix>,
    pub text_layers: Vec<Matrix>,
    pub label: Label,
}

impl EncodedSample {
    pub fn final_embedding(&self, modality: Modality) -> &Matrix {
        let layers = match modality {
            Modality::Image => &self.image_layers,
            Modality::Text => &self.text_layers,
        };
        layers.last().expect("encoded sample has at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub samples: Vec<EncodedSample>,
    pub num_classes: usize,
    pub task: TaskMode,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
