//! Train-and-evaluate runs over one or more seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Encoded;
use crate::embeddings::PairLexicon;
use crate::error::Result;
use crate::metrics::{evaluate, f1_binary, predict, seed_average, AveragedReport, EvalReport};
use crate::model::{InjectionMode, Model, ModelConfig};
use crate::train::{train, TrainConfig, TrainOutcome};

/// Model used for the synthetic task: two blocks of width 32, injection
/// right after the embeddings. Weights start at std 0.2; at the usual 0.02
/// the zero gate receives almost no gradient at this width and the
/// injection path never gets going.
pub fn synth_model_config(vocab_size: usize, ext_dim: usize, mode: InjectionMode) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 32,
        heads: 4,
        ffn: 64,
        injection_mode: mode,
        injection_layer: 0,
        init_std: 0.2,
        ..ModelConfig::desk(vocab_size, ext_dim)
    }
}

/// Long, patient schedule: the pairwise rule is picked up only after a
/// plateau of 15 to 30 epochs.
pub fn synth_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 50,
        batch_size: 16,
        learning_rate: 3e-3,
        seed: 0,
        eval_every: 50,
        patience: 100,
        freeze_gate: false,
    }
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    /// Parameters of the best dev evaluation.
    pub model: Model,
    pub outcome: TrainOutcome,
    pub dev_report: EvalReport,
}

/// Initializes a model from `train_cfg.seed`, fine-tunes it on `train_set`
/// with dev-F1 early stopping, then evaluates the kept parameters on `dev`.
pub fn run_seed(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[Encoded],
    dev: &[Encoded],
    lexicon: Option<&PairLexicon>,
) -> Result<SeedRun> {
    let mut model = Model::new(model_cfg.clone(), &mut ChaCha8Rng::seed_from_u64(train_cfg.seed))?;
    let golds: Vec<usize> = dev.iter().map(|e| e.label).collect();
    let outcome = train(&mut model, train_set, train_cfg, |m| {
        f1_binary(&predict(m, dev)?, &golds)
    })?;
    let dev_report = evaluate(&model, dev, lexicon)?;
    log::info!(
        "seed {}: {} steps, best dev f1 {:.4} at step {}",
        train_cfg.seed,
        outcome.steps,
        dev_report.f1,
        outcome.best_step
    );
    Ok(SeedRun {
        seed: train_cfg.seed,
        model,
        outcome,
        dev_report,
    })
}

/// Runs every seed in turn and averages the dev reports.
pub fn run_seeds(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    train_set: &[Encoded],
    dev: &[Encoded],
    lexicon: Option<&PairLexicon>,
) -> Result<(Vec<SeedRun>, AveragedReport)> {
    let runs = seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            run_seed(model_cfg, &cfg, train_set, dev, lexicon)
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.dev_report.clone()).collect();
    let avg = seed_average(&reports)?;
    Ok((runs, avg))
}
