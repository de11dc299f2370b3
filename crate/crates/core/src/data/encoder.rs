use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Modality;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    /// Width of the raw token features fed to the stack.
    pub raw_dim: usize,
    /// Per-layer embedding width `d_m`.
    pub dim: usize,
    pub depth: usize,
    pub tokens: usize,
    /// Standard deviation multiplier of the frozen layer weights.
    pub gain: f64,
}

/// Frozen random-projection stack standing in for a pretrained backbone.
///
/// `x₀ = raw · P`, then `x_l = tanh(x_{l−1} · W_l)` for `l = 1..depth`.
/// Every weight lives in the shared [`ParamStore`] with its frozen flag set.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub modality: Modality,
    pub config: EncoderConfig,
    pub seed: u64,
    input_proj: ParamId,
    layers: Vec<ParamId>,
}

impl EncoderStack {
    pub fn new(store: &mut ParamStore, modality: Modality, config: EncoderConfig, seed: u64) -> Result<Self> {
        if config.depth == 0 || config.dim == 0 || config.raw_dim == 0 {
            return Err(Error::InvalidConfig(format!("degenerate encoder config {config:?}")));
        }
        let tag = match modality {
            Modality::Image => 0x1111_u64,
            Modality::Text => 0x2222_u64,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let prefix = format!("encoder.{}", modality.as_str());
        let proj = Matrix::gaussian(&mut rng, config.raw_dim, config.dim, 1.0 / (config.raw_dim as f64).sqrt());
        let input_proj = store.frozen(format!("{prefix}.proj"), proj)?;
        let mut layers = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let w = Matrix::gaussian(&mut rng, config.dim, config.dim, config.gain / (config.dim as f64).sqrt());
            layers.push(store.frozen(format!("{prefix}.layer{}", l + 1), w)?);
        }
        Ok(Self {
            modality,
            config,
            seed,
            input_proj,
            layers,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        std::iter::once(self.input_proj).chain(self.layers.iter().copied())
    }

    /// All `depth` layer outputs, each `tokens × dim`.
    pub fn encode(&self, store: &ParamStore, raw: &Matrix) -> Result<Vec<Matrix>> {
        if raw.cols() != self.config.raw_dim || raw.rows() != self.config.tokens {
            return Err(Error::shape(
                "encode",
                raw.shape(),
                (self.config.tokens, self.config.raw_dim),
            ));
        }
        let mut x = raw.matmul(store.value(self.input_proj))?;
        let mut out = Vec::with_capacity(self.layers.len());
        for &w in &self.layers {
            x = x.matmul(store.value(w))?.map(f64::tanh);
            out.push(x.clone());
        }
        Ok(out)
    }

    /// The last `count` layer outputs in forward order.
    pub fn encode_last(&self, store: &ParamStore, raw: &Matrix, count: usize) -> Result<Vec<Matrix>> {
        if count == 0 || count > self.depth() {
            return Err(Error::InvalidConfig(format!(
                "cannot take the last {count} of {} {} layers",
                self.depth(),
                self.modality
            )));
        }
        let mut all = self.encode(store, raw)?;
        Ok(all.split_off(all.len() - count))
    }
}

/// Pairs the last `count` layers of two stacks by reverse index, so the
/// final layers meet even when depths differ. Returns `(image, text)`
/// layer indices in forward order.
pub fn paired_layers(image_depth: usize, text_depth: usize, count: usize) -> Result<Vec<(usize, usize)>> {
    if count == 0 || count > image_depth || count > text_depth {
        return Err(Error::InvalidConfig(format!(
            "cannot pair {count} layers of stacks with depth {image_depth} and {text_depth}"
        )));
    }
    Ok((0..count)
        .rev()
        .map(|back| (image_depth - 1 - back, text_depth - 1 - back))
        .collect())
}
