//! Evaluation under modality absence and Gaussian input noise, metric
//! computation and deterministic JSON/CSV reports.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, EncodedDataset, Label, Modality, SplitData, TaskMode};
use crate::error::{Error, Result};
use crate::fusion::argmax;
use crate::model::Model;
use crate::molt::Absence;
use crate::numerics::{sigmoid, Matrix};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Clean,
    TextAbsent,
    ImageAbsent,
    Noise,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Clean => "clean",
            ScenarioKind::TextAbsent => "text-absent",
            ScenarioKind::ImageAbsent => "image-absent",
            ScenarioKind::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "clean" => Some(ScenarioKind::Clean),
            "text-absent" => Some(ScenarioKind::TextAbsent),
            "image-absent" => Some(ScenarioKind::ImageAbsent),
            "noise" => Some(ScenarioKind::Noise),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseTarget {
    Image,
    Text,
    #[default]
    Both,
}

impl NoiseTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseTarget::Image => "image",
            NoiseTarget::Text => "text",
            NoiseTarget::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "image" => Some(NoiseTarget::Image),
            "text" => Some(NoiseTarget::Text),
            "both" => Some(NoiseTarget::Both),
            _ => None,
        }
    }

    pub fn covers(self, m: Modality) -> bool {
        matches!(
            (self, m),
            (NoiseTarget::Both, _) | (NoiseTarget::Image, Modality::Image) | (NoiseTarget::Text, Modality::Text)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalScenario {
    pub kind: ScenarioKind,
    /// Noise amplitude as a fraction of the per-feature standard deviation.
    pub p: f64,
    pub target: NoiseTarget,
    pub seed: u64,
}

impl EvalScenario {
    pub fn clean() -> Self {
        Self {
            kind: ScenarioKind::Clean,
            p: 0.0,
            target: NoiseTarget::Both,
            seed: 0,
        }
    }

    pub fn absent(m: Modality) -> Self {
        Self {
            kind: match m {
                Modality::Image => ScenarioKind::ImageAbsent,
                Modality::Text => ScenarioKind::TextAbsent,
            },
            ..Self::clean()
        }
    }

    pub fn noise(p: f64, target: NoiseTarget, seed: u64) -> Self {
        Self {
            kind: ScenarioKind::Noise,
            p,
            target,
            seed,
        }
    }

    pub fn absence(&self) -> Absence {
        match self.kind {
            ScenarioKind::TextAbsent => Absence::Text,
            ScenarioKind::ImageAbsent => Absence::Image,
            _ => Absence::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ScenarioKind::Noise && !(self.p >= 0.0 && self.p.is_finite()) {
            return Err(Error::Contract(format!("noise fraction must be >= 0, got {}", self.p)));
        }
        Ok(())
    }
}

/// Noise fractions of the noised-modality grid.
pub const NOISE_GRID: [f64; 4] = [0.01, 0.05, 0.10, 0.20];

/// Clean, both absences, then the noise grid on both modalities.
pub fn standard_scenarios(seed: u64) -> Vec<EvalScenario> {
    let mut out = vec![
        EvalScenario::clean(),
        EvalScenario::absent(Modality::Text),
        EvalScenario::absent(Modality::Image),
    ];
    out.extend(NOISE_GRID.iter().map(|&p| EvalScenario::noise(p, NoiseTarget::Both, seed)));
    out
}

/// Population standard deviation of every raw feature column, pooled
/// over all samples and token rows.
pub fn feature_std(ds: &Dataset, m: Modality) -> Result<Vec<f64>> {
    let first = ds
        .samples
        .first()
        .ok_or_else(|| Error::Contract("dataset is empty".into()))?;
    let cols = first.features(m).cols();
    let mut sum = vec![0.0; cols];
    let mut sq = vec![0.0; cols];
    let mut count = 0usize;
    for s in &ds.samples {
        let x = s.features(m);
        for r in 0..x.rows() {
            for (c, &v) in x.row(r).iter().enumerate() {
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        count += x.rows();
    }
    let n = count as f64;
    Ok(sum
        .iter()
        .zip(&sq)
        .map(|(&s, &q)| {
            let mean = s / n;
            (q / n - mean * mean).max(0.0).sqrt()
        })
        .collect())
}

/// `features + ε` with `ε ~ N(0, (p·σ_c)²)` per entry of column `c`.
/// `p = 0` returns the input unchanged.
pub fn inject_noise(features: &Matrix, p: f64, sigma: &[f64], seed: u64) -> Result<Matrix> {
    if !(p >= 0.0 && p.is_finite()) {
        return Err(Error::Contract(format!("noise fraction must be >= 0, got {p}")));
    }
    if sigma.len() != features.cols() {
        return Err(Error::shape("inject_noise", features.shape(), (1, sigma.len())));
    }
    if p == 0.0 {
        return Ok(features.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = features.clone();
    for r in 0..out.rows() {
        for (v, &s) in out.row_mut(r).iter_mut().zip(sigma) {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += p * s * e;
        }
    }
    Ok(out)
}

/// Seed for one sample and modality, so noise does not depend on
/// evaluation order.
fn noise_seed(seed: u64, sample: usize, m: Modality) -> u64 {
    let tag = match m {
        Modality::Image => 1u64,
        Modality::Text => 2u64,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((sample as u64) << 2 | tag)
}

/// The evaluation set with noise added to the targeted modalities.
pub fn noisy_dataset(ds: &Dataset, p: f64, target: NoiseTarget, seed: u64) -> Result<Dataset> {
    let mut out = ds.clone();
    for m in [Modality::Image, Modality::Text] {
        if !target.covers(m) {
            continue;
        }
        let sigma = feature_std(ds, m)?;
        let noisy = par::try_map_indexed(ds.len(), |n| {
            inject_noise(ds.samples[n].features(m), p, &sigma, noise_seed(seed, n, m))
        })?;
        for (s, x) in out.samples.iter_mut().zip(noisy) {
            *s.features_mut(m) = x;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub n: usize,
}

/// Thresholded prediction for one logit row.
pub fn decide(logits: &[f64], task: TaskMode) -> Label {
    match task {
        TaskMode::SingleLabel => Label::Single(argmax(logits)),
        TaskMode::MultiLabel => Label::Multi(logits.iter().map(|&z| sigmoid(z) >= 0.5).collect()),
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Exact-match accuracy plus micro and macro F1 over one-vs-rest counts.
pub fn compute_metrics(predictions: &[Label], labels: &[Label], num_classes: usize) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Contract("cannot score an empty evaluation set".into()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let mut exact = 0usize;
    for (p, y) in predictions.iter().zip(labels) {
        let (pm, ym) = (p.to_mask(num_classes), y.to_mask(num_classes));
        if pm == ym {
            exact += 1;
        }
        for k in 0..num_classes {
            match (pm[k], ym[k]) {
                (true, true) => tp[k] += 1,
                (true, false) => fp[k] += 1,
                (false, true) => fn_[k] += 1,
                (false, false) => {}
            }
        }
    }
    let sum = |v: &[usize]| v.iter().sum::<usize>();
    let macro_f1 = (0..num_classes).map(|k| f1(tp[k], fp[k], fn_[k])).sum::<f64>() / num_classes as f64;
    Ok(Metrics {
        accuracy: exact as f64 / labels.len() as f64,
        f1_micro: f1(sum(&tp), sum(&fp), sum(&fn_)),
        f1_macro: macro_f1,
        n: labels.len(),
    })
}

/// Metrics of `model` on already encoded data.
pub fn evaluate_encoded(model: &Model, data: &EncodedDataset, absence: Absence) -> Result<Metrics> {
    let logits = model.predict(data, absence)?;
    let preds: Vec<Label> = logits.iter().map(|z| decide(z, data.task)).collect();
    let labels: Vec<Label> = data.samples.iter().map(|s| s.label.clone()).collect();
    compute_metrics(&preds, &labels, data.num_classes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub scenario: EvalScenario,
    pub baseline: bool,
    pub metrics: Metrics,
}

/// Evaluates every scenario. Noise is applied to raw features before the
/// frozen encoders, so it needs a raw split.
pub fn run_scenarios(model: &Model, split: &SplitData, scenarios: &[EvalScenario]) -> Result<Vec<ScenarioResult>> {
    if scenarios.is_empty() {
        return Err(Error::Contract("no scenarios to run".into()));
    }
    let clean = model.prepare(split)?;
    let baseline = model.kind() == crate::training::ModelKind::Baseline;
    scenarios
        .iter()
        .map(|sc| {
            sc.validate()?;
            let metrics = match sc.kind {
                ScenarioKind::Noise => {
                    let SplitData::Raw(ds) = split else {
                        return Err(Error::Contract(
                            "noise is injected into raw features; precomputed embeddings cannot be noised".into(),
                        ));
                    };
                    let noisy = noisy_dataset(ds, sc.p, sc.target, sc.seed)?;
                    evaluate_encoded(model, &model.encode(&noisy)?, Absence::None)?
                }
                _ => evaluate_encoded(model, &clean, sc.absence())?,
            };
            Ok(ScenarioResult {
                scenario: *sc,
                baseline,
                metrics,
            })
        })
        .collect()
}

/// Rows ordered as clean, absence, then noise, baseline before the full
/// model inside each group.
pub fn robust_rows(baseline: &[ScenarioResult], model: &[ScenarioResult]) -> Vec<ScenarioResult> {
    let group = |k: &ScenarioKind| match k {
        ScenarioKind::Clean => 0,
        ScenarioKind::TextAbsent | ScenarioKind::ImageAbsent => 1,
        ScenarioKind::Noise => 2,
    };
    let mut rows = Vec::new();
    for g in 0..3 {
        for set in [baseline, model] {
            rows.extend(set.iter().filter(|r| group(&r.scenario.kind) == g).cloned());
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub config_hash: u64,
    pub rows: Vec<ScenarioResult>,
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

impl MetricsReport {
    /// Keys sorted, floats at six decimals, one scenario object per line.
    pub fn to_json(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{{\"config_hash\":\"{:016x}\",\"scenarios\":[", self.config_hash));
        for (i, r) in self.rows.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let m = &r.metrics;
            out.push_str(&format!(
                "\n{{\"accuracy\":{},\"baseline\":{},\"f1_macro\":{},\"f1_micro\":{},\"kind\":\"{}\",\"n\":{},\"p\":{},\"target\":\"{}\"}}",
                num(m.accuracy),
                r.baseline,
                num(m.f1_macro),
                num(m.f1_micro),
                r.scenario.kind.as_str(),
                m.n,
                num(r.scenario.p),
                r.scenario.target.as_str()
            ));
        }
        out.push_str("\n]}\n");
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("config_hash,kind,target,p,baseline,accuracy,f1_micro,f1_macro,n\n");
        for r in &self.rows {
            let m = &r.metrics;
            out.push_str(&format!(
                "{:016x},{},{},{},{},{},{},{},{}\n",
                self.config_hash,
                r.scenario.kind.as_str(),
                r.scenario.target.as_str(),
                num(r.scenario.p),
                r.baseline,
                num(m.accuracy),
                num(m.f1_micro),
                num(m.f1_macro),
                m.n
            ));
        }
        out
    }
}
