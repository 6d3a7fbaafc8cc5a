//! Mini-batch Adam fine-tuning with periodic dev evaluation, early stopping
//! and best-checkpoint retention.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Encoded;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{InjectionParams, Model};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Steps between dev evaluations.
    pub eval_every: usize,
    /// Consecutive non-improving evaluations tolerated before stopping.
    pub patience: usize,
    /// Keeps the gate at its initial value; with a zero gate the run
    /// matches an injection-free model.
    pub freeze_gate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            eval_every: 50,
            patience: 3,
            freeze_gate: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::Config(
                "epochs, batch_size, eval_every and patience must all be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Counts evaluations since the last improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records a score; returns whether it is a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        match self.best {
            Some(b) if score <= b => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some(score);
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    pub epoch: usize,
    /// Mean training loss over the steps since the previous evaluation.
    pub train_loss: f64,
    pub dev_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EvalPoint>,
    pub best_step: usize,
    pub best_dev_f1: f64,
    pub steps: usize,
    pub stopped_early: bool,
    /// Most frequent training label (ties go to 0).
    pub majority_label: usize,
}

impl TrainOutcome {
    /// `step,epoch,train_loss,dev_f1` rows.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("step,epoch,train_loss,dev_f1\n");
        for p in &self.history {
            s.push_str(&format!("{},{},{:.6},{:.6}\n", p.step, p.epoch, p.train_loss, p.dev_f1));
        }
        s
    }
}

/// Trains `model` in place and leaves it holding the parameters of the
/// best dev evaluation. `dev_score` is called every `eval_every` steps and
/// once more after the last step if that step was not already evaluated.
pub fn train<F>(model: &mut Model, train_set: &[Encoded], cfg: &TrainConfig, mut dev_score: F) -> Result<TrainOutcome>
where
    F: FnMut(&Model) -> Result<f64>,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(bad) = train_set.iter().find(|e| e.label > 1) {
        return Err(Error::Data(format!("label {} is not binary", bad.label)));
    }
    let positives = train_set.iter().filter(|e| e.label == 1).count();
    let majority_label = usize::from(2 * positives > train_set.len());

    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut state = AdamState::new(&model.params);
    if cfg.freeze_gate {
        if let InjectionParams::Gated { gate, .. } = model.layout.injection {
            state.freeze(gate);
        }
    }

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<(ParamStore, usize)> = None;
    let mut history = Vec::new();
    let mut step = 0;
    let mut loss_sum = 0.0;
    let mut loss_steps = 0;
    let mut stopped_early = false;
    let mut last_eval_step = None;

    let mut evaluate = |model: &Model,
                        step: usize,
                        epoch: usize,
                        loss_sum: &mut f64,
                        loss_steps: &mut usize,
                        history: &mut Vec<EvalPoint>,
                        best: &mut Option<(ParamStore, usize)>|
     -> Result<bool> {
        let dev_f1 = dev_score(model)?;
        history.push(EvalPoint {
            step,
            epoch,
            train_loss: if *loss_steps == 0 {
                f64::NAN
            } else {
                *loss_sum / *loss_steps as f64
            },
            dev_f1,
        });
        *loss_sum = 0.0;
        *loss_steps = 0;
        if stopper.observe(dev_f1) {
            *best = Some((model.params.clone(), step));
        }
        log::debug!("step {step} epoch {epoch}: dev f1 {dev_f1:.4}");
        Ok(stopper.should_stop())
    };

    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        for chunk in order.chunks(cfg.batch_size) {
            let grads = {
                let mut g = Graph::with_params(&model.params);
                let batch: Vec<_> = chunk
                    .iter()
                    .map(|&i| {
                        let e = &train_set[i];
                        (&e.seq, e.injection.as_ref(), e.label)
                    })
                    .collect();
                let loss = model.batch_loss(&mut g, &batch)?;
                let value = g.value(loss).item()?;
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        step: step + 1,
                        loss: value,
                    });
                }
                loss_sum += value;
                loss_steps += 1;
                let grads = g.backward(loss)?;
                g.param_grads(&grads)
            };
            state.step(&mut model.params, &grads, &adam)?;
            step += 1;

            if step % cfg.eval_every == 0 {
                last_eval_step = Some(step);
                if evaluate(
                    model,
                    step,
                    epoch,
                    &mut loss_sum,
                    &mut loss_steps,
                    &mut history,
                    &mut best,
                )? {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }
    if last_eval_step != Some(step) {
        evaluate(
            model,
            step,
            cfg.epochs - 1,
            &mut loss_sum,
            &mut loss_steps,
            &mut history,
            &mut best,
        )?;
    }

    let (params, best_step) = best.expect("at least one evaluation ran");
    model.params = params;
    Ok(TrainOutcome {
        best_dev_f1: stopper.best().expect("at least one evaluation ran"),
        best_step,
        history,
        steps: step,
        stopped_early,
        majority_label,
    })
}
