//! The full model (frozen encoders, one inserted module per paired layer,
//! fusion head) and the linear baseline, both over a shared parameter
//! store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{EncoderConfig, EncoderStack};
use crate::data::{Dataset, EncodedDataset, EncodedSample, Label, Modality, SplitData, TaskMode};
use crate::error::{Error, Result};
use crate::fusion::{argmax, classification_loss, fusion_forward, FusionConfig, FusionParams};
use crate::molt::{cca_loss, cca_value_and_grad, molt_forward, Absence, MoltLayerParams};
use crate::numerics::{sigmoid, Matrix, NodeId, ParamId, ParamStore, Tape};
use crate::par;
use crate::training::{ModelKind, TrainConfig};

/// Token counts and widths of the inputs a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputShape {
    /// Raw token features that go through the frozen stub encoders.
    Raw {
        image_tokens: usize,
        image_raw_dim: usize,
        text_tokens: usize,
        text_raw_dim: usize,
    },
    /// Precomputed per-layer embeddings; the stub encoders are bypassed.
    Encoded {
        image_tokens: usize,
        image_dim: usize,
        text_tokens: usize,
        text_dim: usize,
        num_layers: usize,
    },
}

impl InputShape {
    pub fn of_dataset(ds: &Dataset) -> Result<Self> {
        let s = ds
            .samples
            .first()
            .ok_or_else(|| Error::Contract("dataset is empty".into()))?;
        Ok(InputShape::Raw {
            image_tokens: s.image.rows(),
            image_raw_dim: s.image.cols(),
            text_tokens: s.text.rows(),
            text_raw_dim: s.text.cols(),
        })
    }

    pub fn of_split(split: &SplitData) -> Result<Self> {
        match split {
            SplitData::Raw(ds) => Self::of_dataset(ds),
            SplitData::Encoded(ds) => {
                let s = ds
                    .samples
                    .first()
                    .ok_or_else(|| Error::Contract("dataset is empty".into()))?;
                Ok(InputShape::Encoded {
                    image_tokens: s.image_layers[0].rows(),
                    image_dim: s.image_layers[0].cols(),
                    text_tokens: s.text_layers[0].rows(),
                    text_dim: s.text_layers[0].cols(),
                    num_layers: s.image_layers.len(),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Head {
    Molt {
        layers: Vec<MoltLayerParams>,
        fusion: FusionParams,
    },
    Baseline {
        w: ParamId,
        b: ParamId,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub input: InputShape,
    pub num_classes: usize,
    pub store: ParamStore,
    encoders: Option<(EncoderStack, EncoderStack)>,
    head: Head,
}

/// Nodes of one sample's forward graph.
#[derive(Debug)]
pub struct SampleGraph {
    pub tape: Tape,
    pub logits: NodeId,
    pub ce: Option<NodeId>,
    /// Pooled `(h_i, h_t)` per paired layer; empty for the baseline or
    /// under absence.
    pub pairs: Vec<(NodeId, NodeId)>,
}

/// Loss terms and accuracy summed or averaged over one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_cca: f64,
    pub correct: usize,
    pub count: usize,
}

const INIT_TAG: u64 = 0x6d6f_6c74_2d69_6e69;

impl Model {
    pub fn new(config: TrainConfig, input: InputShape, num_classes: usize) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least two classes, got {num_classes}")));
        }
        let mut store = ParamStore::new();
        let (encoders, image_dim, text_dim) = match input {
            InputShape::Raw {
                image_tokens,
                image_raw_dim,
                text_tokens,
                text_raw_dim,
            } => {
                let stack = |store: &mut ParamStore, m, raw_dim, dim, depth, tokens| {
                    EncoderStack::new(
                        store,
                        m,
                        EncoderConfig {
                            raw_dim,
                            dim,
                            depth,
                            tokens,
                            gain: config.encoder_gain,
                        },
                        config.seed,
                    )
                };
                let ie = stack(&mut store, Modality::Image, image_raw_dim, config.image_dim, config.image_depth, image_tokens)?;
                let te = stack(&mut store, Modality::Text, text_raw_dim, config.text_dim, config.text_depth, text_tokens)?;
                (Some((ie, te)), config.image_dim, config.text_dim)
            }
            InputShape::Encoded {
                image_dim,
                text_dim,
                num_layers,
                ..
            } => {
                if num_layers < config.num_layers {
                    return Err(Error::InvalidConfig(format!(
                        "embedding files hold {num_layers} layers but {} are paired",
                        config.num_layers
                    )));
                }
                (None, image_dim, text_dim)
            }
        };

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ INIT_TAG);
        let head = match config.model {
            ModelKind::Molt => {
                let layers = (0..config.num_layers)
                    .map(|l| MoltLayerParams::new(&mut store, &format!("molt{l}"), image_dim, text_dim, config.common_dim, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                if !config.toggles.cross_attention {
                    for p in &layers {
                        for id in [p.q_image, p.k_text, p.v_text, p.q_text, p.k_image, p.v_image] {
                            store.set_frozen(id, true);
                        }
                    }
                }
                let fusion = FusionParams::new(
                    &mut store,
                    &FusionConfig {
                        num_layers: config.num_layers,
                        robust_dim: config.molt_config().robust_dim(),
                        common_dim: config.common_dim,
                        image_dim,
                        text_dim,
                        num_classes,
                        fusion: config.toggles.fusion,
                        learnable_m: config.toggles.learnable_m,
                    },
                    &mut rng,
                )?;
                Head::Molt { layers, fusion }
            }
            ModelKind::Baseline => {
                let inp = image_dim + text_dim;
                let w = store.tunable(
                    "baseline.w",
                    Matrix::gaussian(&mut rng, inp, num_classes, 1.0 / (inp as f64).sqrt()),
                )?;
                let b = store.tunable("baseline.b", Matrix::zeros(1, num_classes))?;
                Head::Baseline { w, b }
            }
        };
        Ok(Self {
            config,
            input,
            num_classes,
            store,
            encoders,
            head,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.model
    }

    pub fn task(&self) -> TaskMode {
        self.config.task
    }

    /// Encoder weights, empty when inputs are precomputed embeddings.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        match &self.encoders {
            Some((i, t)) => i.param_ids().chain(t.param_ids()).collect(),
            None => Vec::new(),
        }
    }

    /// Layers the head consumes per modality.
    fn layers_needed(&self) -> usize {
        match self.head {
            Head::Molt { .. } => self.config.num_layers,
            Head::Baseline { .. } => 1,
        }
    }

    fn check_labels(&self, task: TaskMode, num_classes: usize) -> Result<()> {
        if task != self.config.task || num_classes != self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "data is {} with {num_classes} classes, model expects {} with {}",
                task.as_str(),
                self.config.task.as_str(),
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Runs the frozen encoders and keeps the layers the head needs.
    pub fn encode(&self, ds: &Dataset) -> Result<EncodedDataset> {
        self.check_labels(ds.task, ds.num_classes)?;
        let (ie, te) = self
            .encoders
            .as_ref()
            .ok_or_else(|| Error::Contract("model consumes precomputed embeddings, not raw features".into()))?;
        let count = self.layers_needed();
        let samples = par::try_map_indexed(ds.len(), |n| -> Result<EncodedSample> {
            let s = &ds.samples[n];
            Ok(EncodedSample {
                image_layers: ie.encode_last(&self.store, &s.image, count)?,
                text_layers: te.encode_last(&self.store, &s.text, count)?,
                label: s.label.clone(),
            })
        })?;
        Ok(EncodedDataset {
            samples,
            num_classes: ds.num_classes,
            task: ds.task,
        })
    }

    /// Encodes raw splits; trims precomputed ones to the needed layers.
    pub fn prepare(&self, split: &SplitData) -> Result<EncodedDataset> {
        let shape = InputShape::of_split(split)?;
        let compatible = match (shape, self.input) {
            (InputShape::Raw { .. }, InputShape::Raw { .. }) => shape == self.input,
            (
                InputShape::Encoded {
                    image_tokens,
                    image_dim,
                    text_tokens,
                    text_dim,
                    num_layers,
                },
                InputShape::Encoded {
                    image_tokens: it,
                    image_dim: id,
                    text_tokens: tt,
                    text_dim: td,
                    ..
                },
            ) => (image_tokens, image_dim, text_tokens, text_dim) == (it, id, tt, td) && num_layers >= self.config.num_layers,
            _ => false,
        };
        if !compatible {
            return Err(Error::Contract(format!(
                "data shape {shape:?} does not match the model input {:?}",
                self.input
            )));
        }
        match split {
            SplitData::Raw(ds) => self.encode(ds),
            SplitData::Encoded(ds) => {
                self.check_labels(ds.task, ds.num_classes)?;
                let count = self.layers_needed();
                let samples = ds
                    .samples
                    .iter()
                    .map(|s| {
                        if s.image_layers.len() != s.text_layers.len() {
                            return Err(Error::Format("per-sample layer counts differ".into()));
                        }
                        Ok(EncodedSample {
                            image_layers: s.image_layers[s.image_layers.len() - count..].to_vec(),
                            text_layers: s.text_layers[s.text_layers.len() - count..].to_vec(),
                            label: s.label.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(EncodedDataset {
                    samples,
                    num_classes: ds.num_classes,
                    task: ds.task,
                })
            }
        }
    }

    /// Builds one sample's graph against `store`.
    pub fn sample_graph(&self, store: &ParamStore, s: &EncodedSample, absence: Absence, with_loss: bool) -> Result<SampleGraph> {
        let mut tape = Tape::new();
        let (logits, pairs) = self.sample_on_tape(&mut tape, store, s, absence)?;
        let ce = if with_loss {
            Some(classification_loss(&mut tape, logits, &s.label, self.config.task)?)
        } else {
            None
        };
        Ok(SampleGraph { tape, logits, ce, pairs })
    }

    fn sample_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: &EncodedSample,
        absence: Absence,
    ) -> Result<(NodeId, Vec<(NodeId, NodeId)>)> {
        match &self.head {
            Head::Molt { layers, fusion } => {
                let cfg = self.config.molt_config();
                let n = layers.len();
                if s.image_layers.len() < n || s.text_layers.len() < n {
                    return Err(Error::Contract(format!("sample carries fewer than {n} layers")));
                }
                let (i0, t0) = (s.image_layers.len() - n, s.text_layers.len() - n);
                let mut robust = Vec::with_capacity(n);
                let mut pairs = Vec::with_capacity(n);
                let mut last = (None, None);
                for (l, p) in layers.iter().enumerate() {
                    let xi = if absence.is_absent(Modality::Image) {
                        None
                    } else {
                        Some(tape.leaf(s.image_layers[i0 + l].clone())?)
                    };
                    let xt = if absence.is_absent(Modality::Text) {
                        None
                    } else {
                        Some(tape.leaf(s.text_layers[t0 + l].clone())?)
                    };
                    let out = molt_forward(tape, store, p, xi, xt, &cfg)?;
                    robust.push(out.robust);
                    if let Some(pair) = out.cca_pair {
                        pairs.push(pair);
                    }
                    last = (xi, xt);
                }
                let logits = fusion_forward(tape, store, fusion, &robust, last.0, last.1)?;
                Ok((logits, pairs))
            }
            Head::Baseline { w, b } => {
                let pooled = |m: Modality, x: &Matrix| {
                    if absence.is_absent(m) {
                        Matrix::zeros(1, x.cols())
                    } else {
                        x.column_means()
                    }
                };
                let ei = s.final_embedding(Modality::Image);
                let et = s.final_embedding(Modality::Text);
                let features = Matrix::hstack(&[&pooled(Modality::Image, ei), &pooled(Modality::Text, et)])?;
                let x = tape.leaf(features)?;
                let w = tape.param(store, *w)?;
                let b = tape.param(store, *b)?;
                let z = tape.matmul(x, w)?;
                Ok((tape.add_row(z, b)?, Vec::new()))
            }
        }
    }

    /// Whether a logit row counts as an exact match of `label`.
    pub fn is_correct(&self, logits: &[f64], label: &Label) -> bool {
        match label {
            Label::Single(c) => argmax(logits) == *c,
            Label::Multi(mask) => logits.iter().zip(mask).all(|(&z, &on)| (sigmoid(z) >= 0.5) == on),
        }
    }

    /// Logit rows for every sample.
    pub fn predict(&self, data: &EncodedDataset, absence: Absence) -> Result<Vec<Vec<f64>>> {
        par::try_map_indexed(data.len(), |n| -> Result<Vec<f64>> {
            let g = self.sample_graph(&self.store, &data.samples[n], absence, false)?;
            Ok(g.tape.value(g.logits).row(0).to_vec())
        })
    }

    /// Batch loss statistics and parameter gradients.
    ///
    /// Each sample runs on its own tape. The correlation loss is computed
    /// over the stacked pooled pairs and its per-row gradients are fed back
    /// as extra seeds of each sample's backward pass.
    pub fn batch_gradients(&self, batch: &[&EncodedSample]) -> Result<(BatchStats, Vec<(ParamId, Matrix)>)> {
        let b = batch.len();
        if b < 2 {
            return Err(Error::Contract(format!("batch of {b} is too small for the correlation loss")));
        }
        let graphs = par::try_map_indexed(b, |n| self.sample_graph(&self.store, batch[n], Absence::None, true))?;

        let beta = self.config.weights.beta;
        let alpha = self.config.effective_alpha();
        let mut stats = BatchStats {
            count: b,
            ..BatchStats::default()
        };
        for (g, s) in graphs.iter().zip(batch) {
            stats.loss_ce += g.tape.scalar(g.ce.expect("loss requested")) / b as f64;
            if self.is_correct(g.tape.value(g.logits).row(0), &s.label) {
                stats.correct += 1;
            }
        }

        let num_pairs = graphs[0].pairs.len();
        let mut cca_grads = Vec::with_capacity(num_pairs);
        if num_pairs > 0 {
            let cca_cfg = self.config.cca_config();
            for l in 0..num_pairs {
                let hi: Vec<&Matrix> = graphs.iter().map(|g| g.tape.value(g.pairs[l].0)).collect();
                let ht: Vec<&Matrix> = graphs.iter().map(|g| g.tape.value(g.pairs[l].1)).collect();
                let out = cca_value_and_grad(&Matrix::vstack(&hi)?, &Matrix::vstack(&ht)?, &cca_cfg)?;
                stats.loss_cca += out.loss / num_pairs as f64;
                cca_grads.push(out);
            }
        }
        stats.loss_total = alpha * stats.loss_cca + beta * stats.loss_ce;

        let per_sample = par::try_map_indexed(b, |n| -> Result<Vec<(ParamId, Matrix)>> {
            let g = &graphs[n];
            let mut seeds = vec![(g.ce.expect("loss requested"), Matrix::filled(1, 1, beta / b as f64))];
            if alpha > 0.0 {
                let w = alpha / num_pairs as f64;
                for (l, out) in cca_grads.iter().enumerate() {
                    let (pi, pt) = g.pairs[l];
                    seeds.push((pi, Matrix::row_vector(out.grad_image.row(n)).scale(w)));
                    seeds.push((pt, Matrix::row_vector(out.grad_text.row(n)).scale(w)));
                }
            }
            let grads = g.tape.backward_seeded(&seeds)?;
            Ok(g.tape.param_grads(&grads))
        })?;

        let mut summed: Vec<Option<Matrix>> = vec![None; self.store.len()];
        for grads in per_sample {
            for (id, g) in grads {
                match &mut summed[id.index()] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        let out = self
            .store
            .ids()
            .zip(summed)
            .filter_map(|(id, g)| g.map(|g| (id, g)))
            .collect();
        Ok((stats, out))
    }

    /// The same batch objective as [`Model::batch_gradients`], built as one
    /// graph on a single tape.
    pub fn batch_loss_on_tape(&self, tape: &mut Tape, store: &ParamStore, batch: &[&EncodedSample]) -> Result<NodeId> {
        let b = batch.len();
        let mut ce_terms = Vec::with_capacity(b);
        let mut pairs = Vec::with_capacity(b);
        for s in batch {
            let (logits, p) = self.sample_on_tape(tape, store, s, Absence::None)?;
            ce_terms.push((classification_loss(tape, logits, &s.label, self.config.task)?, self.config.weights.beta / b as f64));
            pairs.push(p);
        }
        let mut terms = ce_terms;
        let alpha = self.config.effective_alpha();
        let num_pairs = pairs[0].len();
        if alpha > 0.0 && num_pairs > 0 {
            let cca_cfg = self.config.cca_config();
            for l in 0..num_pairs {
                let hi: Vec<NodeId> = pairs.iter().map(|p| p[l].0).collect();
                let ht: Vec<NodeId> = pairs.iter().map(|p| p[l].1).collect();
                let si = tape.stack_rows(&hi)?;
                let st = tape.stack_rows(&ht)?;
                terms.push((cca_loss(tape, si, st, &cca_cfg)?, alpha / num_pairs as f64));
            }
        }
        tape.combine(&terms)
    }
}

impl Model {
    /// Convenience: builds a model sized for `ds` from `config`.
    pub fn for_dataset(config: TrainConfig, ds: &Dataset) -> Result<Self> {
        ds.validate()?;
        let input = InputShape::of_dataset(ds)?;
        Model::new(config, input, ds.num_classes)
    }

    /// Builds a model sized for a loaded split.
    pub fn for_split(config: TrainConfig, split: &SplitData) -> Result<Self> {
        if let SplitData::Raw(ds) = split {
            ds.validate()?;
        }
        Model::new(config, InputShape::of_split(split)?, split.num_classes())
    }
}
