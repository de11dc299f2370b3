//! Train-and-score helpers shared by the command line and the trend tests.

use crate::data::SplitData;
use crate::error::Result;
use crate::model::Model;
use crate::molt::Absence;
use crate::robustness::{evaluate_encoded, Metrics};
use crate::training::{train, ModelKind, Toggles, TrainConfig, Trainer};

/// Builds a model for `data` and trains it for `config.epochs`.
pub fn fit(config: TrainConfig, data: &SplitData) -> Result<Trainer> {
    let model = Model::for_split(config, data)?;
    let encoded = model.prepare(data)?;
    train(model, &encoded)
}

/// Clean metrics of a trained model on `data`.
pub fn score(model: &Model, data: &SplitData) -> Result<Metrics> {
    evaluate_encoded(model, &model.prepare(data)?, Absence::None)
}

/// The baseline counterpart of `config`: same seed, schedule and encoders.
pub fn baseline_config(config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        model: ModelKind::Baseline,
        ..config.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub metrics: Metrics,
}

/// Trains every variant of `grid` for every seed and scores it on `test`.
pub fn run_ablation(
    base: &TrainConfig,
    train_data: &SplitData,
    test_data: &SplitData,
    seeds: &[u64],
    grid: &[(&str, Toggles)],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(seeds.len() * grid.len());
    for &seed in seeds {
        for (name, toggles) in grid {
            let config = TrainConfig {
                seed,
                toggles: *toggles,
                model: ModelKind::Molt,
                ..base.clone()
            };
            let trained = fit(config, train_data)?;
            rows.push(AblationRow {
                variant: name.to_string(),
                seed,
                metrics: score(&trained.model, test_data)?,
            });
        }
    }
    Ok(rows)
}

/// Mean held-out accuracy of one variant over its seeds.
pub fn mean_accuracy(rows: &[AblationRow], variant: &str) -> Option<f64> {
    let acc: Vec<f64> = rows
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| r.metrics.accuracy)
        .collect();
    (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,seed,accuracy,f1_micro,f1_macro,n\n");
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{}\n",
            r.variant, r.seed, m.accuracy, m.f1_micro, m.f1_macro, m.n
        ));
    }
    out
}
