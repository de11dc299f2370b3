use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Label, Sample, TaskMode};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Parameters of the synthetic paired-modality task.
///
/// Each sample draws an image cluster `c_i` and a text cluster `c_t`. In
/// cross-modal mode the class is `(c_i + c_t) mod K`, so neither modality
/// determines it alone. Token features are a per-cluster prototype, plus a
/// weaker class prototype that both modalities share, plus Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub cross_modal: bool,
    pub task: TaskMode,
    pub image_tokens: usize,
    pub text_tokens: usize,
    pub image_raw_dim: usize,
    pub text_raw_dim: usize,
    pub cluster_scale: f64,
    pub shared_scale: f64,
    pub noise_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_samples: 400,
            num_classes: 4,
            seed: 0,
            cross_modal: true,
            task: TaskMode::SingleLabel,
            image_tokens: 16,
            text_tokens: 12,
            image_raw_dim: 24,
            text_raw_dim: 20,
            cluster_scale: 1.0,
            shared_scale: 0.5,
            noise_scale: 0.8,
        }
    }
}

/// Rounds through `f32` so the values survive the embedding file bitwise.
fn to_f32_grid(m: Matrix) -> Matrix {
    m.map(|v| v as f32 as f64)
}

struct Prototypes {
    clusters: Vec<Matrix>,
    shared: Vec<Matrix>,
}

fn prototypes(rng: &mut ChaCha8Rng, k: usize, tokens: usize, dim: usize, spec: &SyntheticSpec) -> Prototypes {
    Prototypes {
        clusters: (0..k).map(|_| Matrix::gaussian(rng, tokens, dim, spec.cluster_scale)).collect(),
        shared: (0..k).map(|_| Matrix::gaussian(rng, tokens, dim, spec.shared_scale)).collect(),
    }
}

fn features(rng: &mut ChaCha8Rng, protos: &Prototypes, cluster: usize, class: usize, noise: f64) -> Matrix {
    let base = &protos.clusters[cluster];
    let mut m = Matrix::gaussian(rng, base.rows(), base.cols(), noise);
    m.add_assign(base).expect("prototype shape");
    m.add_assign(&protos.shared[class]).expect("prototype shape");
    to_f32_grid(m)
}

/// Deterministic per seed; single-label classes are balanced to within one
/// sample.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let k = spec.num_classes;
    if k < 2 {
        return Err(Error::Contract(format!("num_classes must be >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let image_protos = prototypes(&mut rng, k, spec.image_tokens, spec.image_raw_dim, spec);
    let text_protos = prototypes(&mut rng, k, spec.text_tokens, spec.text_raw_dim, spec);

    let mut classes: Vec<usize> = (0..spec.num_samples).map(|n| n % k).collect();
    classes.shuffle(&mut rng);

    let mut samples = Vec::with_capacity(spec.num_samples);
    for &class in &classes {
        let (ci, ct) = if spec.cross_modal {
            let ci = rng.random_range(0..k);
            (ci, (class + k - ci) % k)
        } else {
            (class, class)
        };
        let image = features(&mut rng, &image_protos, ci, class, spec.noise_scale);
        let text = features(&mut rng, &text_protos, ct, class, spec.noise_scale);
        let label = match spec.task {
            TaskMode::SingleLabel => Label::Single(class),
            TaskMode::MultiLabel => {
                let mut mask = vec![false; k];
                mask[class] = true;
                mask[(ct + k - ci) % k] = true;
                Label::Multi(mask)
            }
        };
        samples.push(Sample { image, text, label });
    }
    Ok(Dataset {
        samples,
        num_classes: k,
        task: spec.task,
    })
}

/// A training set of `spec.num_samples` and a held-out set of
/// `test_samples` drawn from the same prototypes.
pub fn generate_train_test(spec: &SyntheticSpec, test_samples: usize) -> Result<(Dataset, Dataset)> {
    let mut all = generate_synthetic(&SyntheticSpec {
        num_samples: spec.num_samples + test_samples,
        ..spec.clone()
    })?;
    let test = all.samples.split_off(spec.num_samples);
    let test = Dataset {
        samples: test,
        num_classes: all.num_classes,
        task: all.task,
    };
    Ok((all, test))
}
