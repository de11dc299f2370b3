//! Central-difference checks of every differentiable building block. Each
//! case returns the worst relative error for one seed.

use molt_core::data::{generate_synthetic, Dataset, Label, SyntheticSpec, TaskMode};
use molt_core::fusion::{classify, mix_layers, readout_attention, total_loss, FusionConfig, FusionParams, LossWeights};
use molt_core::model::Model;
use molt_core::molt::{
    cca_loss, cross_attend, fbp, project_to_common, residual_norm, CcaConfig, CorrelationNorm, MoltLayerParams,
};
use molt_core::numerics::{finite_diff_check, tape_objective, Matrix, NodeId, ParamId, ParamStore, Tape};
use molt_core::training::TrainConfig;
use molt_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SEEDS: [u64; 3] = [1, 2, 3];
pub const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `Σ out ⊙ W` for a fixed random `W`, so every output entry matters.
fn probe(tape: &mut Tape, out: NodeId, seed: u64) -> Result<NodeId> {
    let (r, c) = tape.shape(out);
    let w = tape.leaf(Matrix::gaussian(&mut rng(seed ^ 0xfeed), r, c, 1.0))?;
    let prod = tape.hadamard(out, w)?;
    tape.sum(prod)
}

fn probe_pair(tape: &mut Tape, (a, b): (NodeId, NodeId), seed: u64) -> Result<NodeId> {
    let pa = probe(tape, a, seed)?;
    let pb = probe(tape, b, seed + 1)?;
    tape.add(pa, pb)
}

fn err<B>(store: &ParamStore, build: B) -> f64
where
    B: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let report = finite_diff_check(store, H, tape_objective(build)).unwrap();
    assert!(report.checked > 0);
    report.max_rel_error
}

fn gaussian_param(store: &mut ParamStore, name: &str, r: usize, c: usize, seed: u64) -> ParamId {
    store.tunable(name, Matrix::gaussian(&mut rng(seed), r, c, 1.0)).unwrap()
}

pub fn matmul(seed: u64) -> f64 {
    let mut s = ParamStore::new();
    let a = gaussian_param(&mut s, "a", 3, 4, seed);
    let b = gaussian_param(&mut s, "b", 4, 2, seed + 10);
    err(&s, |t, st| {
        let (a, b) = (t.param(st, a)?, t.param(st, b)?);
        let out = t.matmul(a, b)?;
        probe(t, out, seed)
    })
}

pub fn softmax_rows(seed: u64) -> f64 {
    let mut s = ParamStore::new();
    let x = gaussian_param(&mut s, "x", 3, 5, seed);
    err(&s, |t, st| {
        let x = t.param(st, x)?;
        let out = t.softmax_rows(x)?;
        probe(t, out, seed)
    })
}

pub fn layer_norm(seed: u64) -> f64 {
    let mut s = ParamStore::new();
    let x = gaussian_param(&mut s, "x", 3, 6, seed);
    let g = gaussian_param(&mut s, "g", 1, 6, seed + 1);
    let b = gaussian_param(&mut s, "b", 1, 6, seed + 2);
    err(&s, |t, st| {
        let (x, g, b) = (t.param(st, x)?, t.param(st, g)?, t.param(st, b)?);
        let out = t.layer_norm(x, g, b, 1e-5)?;
        probe(t, out, seed)
    })
}

pub fn l2_normalize(seed: u64) -> f64 {
    let mut s = ParamStore::new();
    let x = gaussian_param(&mut s, "x", 1, 5, seed);
    err(&s, |t, st| {
        let x = t.param(st, x)?;
        let out = t.l2_normalize(x, 1e-12)?;
        probe(t, out, seed)
    })
}

pub fn sum_pool_stride(seed: u64) -> f64 {
    let mut s = ParamStore::new();
    let x = gaussian_param(&mut s, "x", 1, 8, seed);
    err(&s, |t, st| {
        let x = t.param(st, x)?;
        let out = t.sum_pool_stride(x, 4)?;
        probe(t, out, seed)
    })
}

/// A layer's parameters and token inputs, all tunable.
struct Layer {
    store: ParamStore,
    p: MoltLayerParams,
    image: ParamId,
    text: ParamId,
}

fn layer(seed: u64) -> Layer {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let p = MoltLayerParams::new(&mut store, "l", 5, 3, 4, &mut r).unwrap();
    // Non-trivial norm parameters.
    for id in [p.gamma_image, p.beta_image, p.gamma_text, p.beta_text] {
        *store.value_mut(id) = Matrix::gaussian(&mut r, 1, 4, 1.0);
    }
    let image = gaussian_param(&mut store, "image", 3, 5, seed + 100);
    let text = gaussian_param(&mut store, "text", 2, 3, seed + 200);
    Layer { store, p, image, text }
}

pub fn project_to_common_case(seed: u64) -> f64 {
    let l = layer(seed);
    err(&l.store, |t, st| {
        let (i, x) = (t.param(st, l.image)?, t.param(st, l.text)?);
        let pair = project_to_common(t, st, &l.p, i, x)?;
        probe_pair(t, pair, seed)
    })
}

pub fn cross_attend_case(seed: u64) -> f64 {
    let l = layer(seed);
    err(&l.store, |t, st| {
        let (i, x) = (t.param(st, l.image)?, t.param(st, l.text)?);
        let (ic, tc) = project_to_common(t, st, &l.p, i, x)?;
        let pair = cross_attend(t, st, &l.p, ic, tc)?;
        probe_pair(t, pair, seed)
    })
}

pub fn residual_norm_case(seed: u64) -> f64 {
    let l = layer(seed);
    err(&l.store, |t, st| {
        let (i, x) = (t.param(st, l.image)?, t.param(st, l.text)?);
        let (ic, tc) = project_to_common(t, st, &l.p, i, x)?;
        let (hi, ht) = cross_attend(t, st, &l.p, ic, tc)?;
        let pair = residual_norm(t, st, &l.p, hi, ic, ht, tc, 1e-5)?;
        probe_pair(t, pair, seed)
    })
}

pub fn fbp_case(seed: u64) -> f64 {
    let mut s = ParamStore::new();
    let a = gaussian_param(&mut s, "a", 1, 8, seed);
    let b = gaussian_param(&mut s, "b", 1, 8, seed + 1);
    err(&s, |t, st| {
        let (a, b) = (t.param(st, a)?, t.param(st, b)?);
        let out = fbp(t, a, b, 4)?;
        probe(t, out, seed)
    })
}

pub fn cca_loss_case(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for mode in [CorrelationNorm::TraceNorm, CorrelationNorm::Frobenius] {
        let mut s = ParamStore::new();
        let a = gaussian_param(&mut s, "a", 16, 3, seed);
        // Partly correlated with `a` so the correlations are well separated.
        let mixed = s.value(a).scale(0.7).add(&Matrix::gaussian(&mut rng(seed + 1), 16, 3, 1.0)).unwrap();
        let b = s.tunable("b", mixed).unwrap();
        let cfg = CcaConfig {
            mode,
            ..CcaConfig::default()
        };
        worst = worst.max(err(&s, |t, st| {
            let (a, b) = (t.param(st, a)?, t.param(st, b)?);
            cca_loss(t, a, b, &cfg)
        }));
    }
    worst
}

struct FusionSetup {
    store: ParamStore,
    f: FusionParams,
    reps: Vec<ParamId>,
    e_image: ParamId,
    e_text: ParamId,
}

fn fusion_setup(seed: u64) -> FusionSetup {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let cfg = FusionConfig {
        num_layers: 3,
        robust_dim: 2,
        common_dim: 4,
        image_dim: 5,
        text_dim: 3,
        num_classes: 3,
        fusion: true,
        learnable_m: true,
    };
    let f = FusionParams::new(&mut store, &cfg, &mut r).unwrap();
    *store.value_mut(f.m) = Matrix::gaussian(&mut r, 1, 3, 1.0);
    if let Some(ro) = &f.readout {
        *store.value_mut(ro.gamma) = Matrix::gaussian(&mut r, 1, 4, 1.0);
        *store.value_mut(ro.beta) = Matrix::gaussian(&mut r, 1, 4, 1.0);
    }
    let reps = (0..3).map(|l| gaussian_param(&mut store, &format!("h{l}"), 1, 2, seed + l)).collect();
    let e_image = gaussian_param(&mut store, "ei", 4, 5, seed + 10);
    let e_text = gaussian_param(&mut store, "et", 3, 3, seed + 11);
    FusionSetup {
        store,
        f,
        reps,
        e_image,
        e_text,
    }
}

pub fn mix_layers_case(seed: u64) -> f64 {
    let fs = fusion_setup(seed);
    err(&fs.store, |t, st| {
        let nodes = fs.reps.iter().map(|&id| t.param(st, id)).collect::<Result<Vec<_>>>()?;
        let out = mix_layers(t, st, &fs.f, &nodes)?;
        probe(t, out, seed)
    })
}

pub fn readout_attention_case(seed: u64) -> f64 {
    let fs = fusion_setup(seed);
    let ro = fs.f.readout.clone().unwrap();
    let mut worst: f64 = 0.0;
    for (use_i, use_t) in [(true, true), (true, false), (false, true)] {
        worst = worst.max(err(&fs.store, |t, st| {
            let hr = t.param(st, fs.reps[0])?;
            let e_i = if use_i { Some(t.param(st, fs.e_image)?) } else { None };
            let e_t = if use_t { Some(t.param(st, fs.e_text)?) } else { None };
            let pair = readout_attention(t, st, &ro, hr, e_i, e_t)?;
            probe_pair(t, pair, seed)
        }));
    }
    worst
}

pub fn classify_case(seed: u64) -> f64 {
    let mut fs = fusion_setup(seed);
    let ro = fs.f.readout.clone().unwrap();
    let a = gaussian_param(&mut fs.store, "a", 1, 4, seed + 20);
    let b = gaussian_param(&mut fs.store, "b", 1, 4, seed + 21);
    err(&fs.store, |t, st| {
        let (a, b) = (t.param(st, a)?, t.param(st, b)?);
        let out = classify(t, st, &fs.f, &ro, a, b)?;
        probe(t, out, seed)
    })
}

pub fn total_loss_case(seed: u64) -> f64 {
    let mut s = ParamStore::new();
    let z = gaussian_param(&mut s, "z", 1, 4, seed);
    let l1 = gaussian_param(&mut s, "cca1", 1, 1, seed + 1);
    let l2 = gaussian_param(&mut s, "cca2", 1, 1, seed + 2);
    let w = LossWeights::default();
    let mut worst: f64 = 0.0;
    for (label, task) in [
        (Label::Single(2), TaskMode::SingleLabel),
        (Label::Multi(vec![true, false, true, false]), TaskMode::MultiLabel),
    ] {
        worst = worst.max(err(&s, |t, st| {
            let (z, a, b) = (t.param(st, z)?, t.param(st, l1)?, t.param(st, l2)?);
            total_loss(t, z, &label, task, &[a, b], &w)
        }));
    }
    worst
}

pub fn small_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    for kv in [
        "common_dim=4",
        "stride=2",
        "layers=2",
        "image_dim=5",
        "text_dim=4",
        "image_depth=3",
        "text_depth=2",
    ] {
        c.apply_override(kv).unwrap();
    }
    c
}

pub fn small_data(seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        num_samples: 4,
        seed,
        image_tokens: 3,
        text_tokens: 2,
        image_raw_dim: 4,
        text_raw_dim: 3,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

/// The whole model's batch loss on two samples, every tunable entry.
pub fn whole_model_case(seed: u64) -> f64 {
    let data = small_data(seed);
    let model = Model::for_dataset(small_config(seed), &data).unwrap();
    let enc = model.encode(&data).unwrap();
    let batch: Vec<_> = enc.samples[..2].iter().collect();
    err(&model.store, |t, st| model.batch_loss_on_tape(t, st, &batch))
}

pub type Case = (&'static str, fn(u64) -> f64);

pub fn cases() -> Vec<Case> {
    vec![
        ("matmul", matmul),
        ("softmax_rows", softmax_rows),
        ("layer_norm", layer_norm),
        ("l2_normalize", l2_normalize),
        ("sum_pool_stride", sum_pool_stride),
        ("project_to_common", project_to_common_case),
        ("cross_attend", cross_attend_case),
        ("residual_norm", residual_norm_case),
        ("cca_loss", cca_loss_case),
        ("fbp", fbp_case),
        ("mix_layers", mix_layers_case),
        ("readout_attention", readout_attention_case),
        ("classify", classify_case),
        ("total_loss", total_loss_case),
        ("whole_model", whole_model_case),
    ]
}
