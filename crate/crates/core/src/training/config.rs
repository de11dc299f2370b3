use sha2::{Digest, Sha256};

use crate::data::TaskMode;
use crate::error::{Error, Result};
use crate::fusion::LossWeights;
use crate::kv::KvFile;
use crate::molt::{CcaConfig, CorrelationNorm, MoltConfig, LAYER_NORM_EPS};
use crate::numerics::linalg::EIGEN_FLOOR;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelKind {
    /// Inserted modules plus the fusion head.
    #[default]
    Molt,
    /// Linear classifier on concatenated mean-pooled final embeddings.
    Baseline,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Molt => "molt",
            ModelKind::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "molt" => Some(ModelKind::Molt),
            "baseline" => Some(ModelKind::Baseline),
            _ => None,
        }
    }
}

/// Graph switches, all on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub cross_attention: bool,
    pub cca_loss: bool,
    pub learnable_m: bool,
    pub fusion: bool,
    pub fbp: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            cross_attention: true,
            cca_loss: true,
            learnable_m: true,
            fusion: true,
            fbp: true,
        }
    }
}

impl Toggles {
    /// The full model followed by each switch turned off on its own.
    pub fn ablation_grid() -> Vec<(&'static str, Toggles)> {
        let full = Toggles::default();
        vec![
            ("full", full),
            ("no-cross-attention", Toggles { cross_attention: false, ..full }),
            ("no-cca-loss", Toggles { cca_loss: false, ..full }),
            ("no-learnable-m", Toggles { learnable_m: false, ..full }),
            ("no-fusion", Toggles { fusion: false, ..full }),
            ("no-fbp", Toggles { fbp: false, ..full }),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Number of paired layers `L_s` that receive a module.
    pub num_layers: usize,
    pub stride: usize,
    pub common_dim: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub image_depth: usize,
    pub text_depth: usize,
    pub encoder_gain: f64,
    pub ridge: f64,
    pub cca_mode: CorrelationNorm,
    pub task: TaskMode,
    pub toggles: Toggles,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Molt,
            learning_rate: 4e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 200,
            seed: 0,
            weights: LossWeights::default(),
            num_layers: 4,
            stride: 4,
            common_dim: 16,
            image_dim: 48,
            text_dim: 32,
            image_depth: 6,
            text_depth: 6,
            encoder_gain: 1.5,
            ridge: 1e-3,
            cca_mode: CorrelationNorm::TraceNorm,
            task: TaskMode::SingleLabel,
            toggles: Toggles::default(),
            grad_clip: None,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "alpha",
    "batch_size",
    "beta",
    "cca_loss",
    "cca_mode",
    "common_dim",
    "cross_attention",
    "encoder_gain",
    "epochs",
    "fbp",
    "fusion",
    "grad_clip",
    "image_depth",
    "image_dim",
    "layers",
    "learnable_m",
    "lr",
    "model",
    "ridge",
    "seed",
    "stride",
    "task",
    "text_depth",
    "text_dim",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        msg: format!("cannot parse {key} = {value:?}"),
    })
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config {
            line,
            msg: format!("{key} must be true/false, got {value:?}"),
        }),
    }
}

impl TrainConfig {
    /// Sets one key; `line` is reported in errors (0 for overrides).
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let v = value.trim();
        match key {
            "model" => {
                self.model = ModelKind::parse(v).ok_or_else(|| Error::Config {
                    line,
                    msg: format!("model must be molt or baseline, got {v:?}"),
                })?
            }
            "lr" => self.learning_rate = parse_value(key, v, line)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, v, line)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, v, line)?,
            "adam_eps" => self.adam_eps = parse_value(key, v, line)?,
            "batch_size" => self.batch_size = parse_value(key, v, line)?,
            "epochs" => self.epochs = parse_value(key, v, line)?,
            "seed" => self.seed = parse_value(key, v, line)?,
            "alpha" => self.weights.alpha = parse_value(key, v, line)?,
            "beta" => self.weights.beta = parse_value(key, v, line)?,
            "layers" => self.num_layers = parse_value(key, v, line)?,
            "stride" => self.stride = parse_value(key, v, line)?,
            "common_dim" => self.common_dim = parse_value(key, v, line)?,
            "image_dim" => self.image_dim = parse_value(key, v, line)?,
            "text_dim" => self.text_dim = parse_value(key, v, line)?,
            "image_depth" => self.image_depth = parse_value(key, v, line)?,
            "text_depth" => self.text_depth = parse_value(key, v, line)?,
            "encoder_gain" => self.encoder_gain = parse_value(key, v, line)?,
            "ridge" => self.ridge = parse_value(key, v, line)?,
            "cca_mode" => {
                self.cca_mode = CorrelationNorm::parse(v).ok_or_else(|| Error::Config {
                    line,
                    msg: format!("cca_mode must be trace or frobenius, got {v:?}"),
                })?
            }
            "task" => {
                self.task = TaskMode::parse(v).ok_or_else(|| Error::Config {
                    line,
                    msg: format!("task must be single or multi, got {v:?}"),
                })?
            }
            "cross_attention" => self.toggles.cross_attention = parse_bool(key, v, line)?,
            "cca_loss" => self.toggles.cca_loss = parse_bool(key, v, line)?,
            "learnable_m" => self.toggles.learnable_m = parse_bool(key, v, line)?,
            "fusion" => self.toggles.fusion = parse_bool(key, v, line)?,
            "fbp" => self.toggles.fbp = parse_bool(key, v, line)?,
            "grad_clip" => {
                let c: f64 = parse_value(key, v, line)?;
                self.grad_clip = (c > 0.0).then_some(c);
            }
            _ => {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    /// Defaults overridden by every entry of `kv`.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, line, value) in kv.iter() {
            cfg.set(key, value, line)?;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text)?)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec.split_once('=').ok_or_else(|| Error::Config {
            line: 0,
            msg: format!("override must be key=value, got {spec:?}"),
        })?;
        self.set(k.trim(), v, 0)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        let t = &self.toggles;
        let entries: [(&str, String); 27] = [
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("alpha", self.weights.alpha.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta", self.weights.beta.to_string()),
            ("cca_loss", t.cca_loss.to_string()),
            ("cca_mode", self.cca_mode.as_str().to_string()),
            ("common_dim", self.common_dim.to_string()),
            ("cross_attention", t.cross_attention.to_string()),
            ("encoder_gain", self.encoder_gain.to_string()),
            ("epochs", self.epochs.to_string()),
            ("fbp", t.fbp.to_string()),
            ("fusion", t.fusion.to_string()),
            ("grad_clip", self.grad_clip.unwrap_or(0.0).to_string()),
            ("image_depth", self.image_depth.to_string()),
            ("image_dim", self.image_dim.to_string()),
            ("layers", self.num_layers.to_string()),
            ("learnable_m", t.learnable_m.to_string()),
            ("lr", self.learning_rate.to_string()),
            ("model", self.model.as_str().to_string()),
            ("ridge", self.ridge.to_string()),
            ("seed", self.seed.to_string()),
            ("stride", self.stride.to_string()),
            ("task", self.task.as_str().to_string()),
            ("text_depth", self.text_depth.to_string()),
            ("text_dim", self.text_dim.to_string()),
        ];
        for (k, v) in entries {
            kv.insert(k, v);
        }
        kv
    }

    /// Canonical text: every key, sorted, one per line.
    pub fn render(&self) -> String {
        self.to_kv().render()
    }

    /// First eight bytes of the SHA-256 of the canonical text.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.render().as_bytes());
        u64::from_be_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
    }

    /// `α` as it enters the gradient.
    pub fn effective_alpha(&self) -> f64 {
        if self.toggles.cca_loss && self.model == ModelKind::Molt {
            self.weights.alpha
        } else {
            0.0
        }
    }

    pub fn molt_config(&self) -> MoltConfig {
        MoltConfig {
            common_dim: self.common_dim,
            stride: self.stride,
            cross_attention: self.toggles.cross_attention,
            fbp: self.toggles.fbp,
            ln_eps: LAYER_NORM_EPS,
        }
    }

    pub fn cca_config(&self) -> CcaConfig {
        CcaConfig {
            ridge: self.ridge,
            mode: self.cca_mode,
            eigen_floor: EIGEN_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.ridge > 0.0) {
            return bad(format!("ridge must be > 0, got {}", self.ridge));
        }
        if self.image_dim == 0 || self.text_dim == 0 || self.image_depth == 0 || self.text_depth == 0 {
            return bad("encoder dimensions and depths must be >= 1".into());
        }
        if self.num_layers == 0 || self.num_layers > self.image_depth || self.num_layers > self.text_depth {
            return bad(format!(
                "layers = {} must lie in 1..=min({}, {})",
                self.num_layers, self.image_depth, self.text_depth
            ));
        }
        self.weights.validate()?;
        self.molt_config().validate()?;
        if self.effective_alpha() == 0.0 && self.weights.beta == 0.0 {
            return bad(
                "no gradient path: beta is 0 and the correlation loss is disabled or unused, \
                 so nothing would be trained"
                    .into(),
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 4e-4);
        assert_eq!((c.adam_beta1, c.adam_beta2, c.adam_eps), (0.9, 0.999, 1e-8));
        assert_eq!((c.weights.alpha, c.weights.beta), (0.1, 0.9));
        assert_eq!((c.num_layers, c.stride), (4, 4));
        assert_eq!(c.toggles, Toggles::default());
        assert!(c.grad_clip.is_none());
        c.validate().unwrap();
    }

    #[test]
    fn render_parse_round_trip() {
        let mut c = TrainConfig::default();
        c.apply_override("lr=0.001").unwrap();
        c.apply_override("fbp = off").unwrap();
        c.apply_override("cca_mode=frobenius").unwrap();
        let back = TrainConfig::parse(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(TrainConfig::default().hash(), c.hash());
        assert_eq!(c.to_kv().iter().count(), CONFIG_KEYS.len());
        for (k, (key, _, _)) in CONFIG_KEYS.iter().zip(c.to_kv().iter()) {
            assert_eq!(*k, key);
        }
    }

    #[test]
    fn errors_carry_lines() {
        let err = TrainConfig::parse("lr = 0.1\n\nbogus = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
        let err = TrainConfig::parse("epochs = many\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
    }

    #[test]
    fn no_gradient_path_is_rejected() {
        let mut c = TrainConfig::default();
        c.toggles.cca_loss = false;
        c.weights.beta = 0.0;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("no gradient path"));
        c.toggles.cca_loss = true;
        c.validate().unwrap();
    }
}
