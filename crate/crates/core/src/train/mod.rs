//! Training loop with minibatch Adam and early stopping on validation F1,
//! plus metrics, the ablation grid and the cost model.

mod ablation;
mod adam;
mod cost;
mod metrics;

pub use ablation::{ablate, write_ablation_csv, AblationCell, AblationGrid, AblationResult};
pub use adam::{adam_step, AdamState, ParamLayout};
pub use cost::{estimate_cost, format_cost_table, CostReport};
pub use metrics::{bce_loss, compute_metrics, evaluate, MetricReport};

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward_eval, init_params, train_step, ModelConfig, ModelParams, SampleBatch,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.epsilon <= 0.0 {
            return Err(Error::Config("learning_rate and epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must be in [0, 1)".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// One epoch of the training record.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val: MetricReport,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    /// Validation had a single class, so early stopping fell back to loss.
    pub single_class_val: bool,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Minibatch BCE training with seeded shuffling, Adam updates, per-epoch
/// validation and best-parameter restoration.
pub fn train(
    train_set: &SampleBatch,
    val_set: &SampleBatch,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    train_config.validate()?;
    let mut params = init_params(model_config, train_config.seed)?;
    let mut history = TrainHistory::default();
    if train_config.max_epochs == 0 {
        return Ok((params, history));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Precondition(
            "training needs non-empty train and validation sets".into(),
        ));
    }

    let val_labels = val_set.labels();
    let single_class = val_labels.iter().all(|&y| y == val_labels[0]);
    if single_class {
        log::warn!("validation set has a single class; early stopping on validation loss");
        history.single_class_val = true;
    }

    let layout = ParamLayout::of(&params);
    let mut flat = params.flatten();
    let mut state = AdamState::new(flat.len());
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(mix(train_config.seed, 0xA11CE, 0));
    let mut best: Option<(f64, Vec<f64>, ModelParams, usize)> = None;
    let mut since_best = 0usize;

    for epoch in 0..train_config.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        for i in 0..order.len().saturating_sub(1) {
            let j = shuffle_rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(train_config.batch_size).enumerate() {
            let batch = SampleBatch {
                items: chunk.iter().map(|&i| train_set.items[i].clone()).collect(),
            };
            let dropout_seed = mix(train_config.seed, epoch as u64 + 1, step as u64 + 1);
            let out = train_step(&batch, &params, model_config, dropout_seed)?;
            adam_step(&mut flat, &out.grads, &mut state, train_config, &layout)?;
            params.assign_flat(&flat)?;
            params.external.update_running(&out.bn_stats);
            loss_sum += out.loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;

        let val_probs = forward_eval(val_set, &params, model_config)?;
        let val_metrics = compute_metrics(&val_probs, &val_labels, model_config.threshold)?;
        let val_loss = bce_loss(&val_probs, &val_labels)?;
        let criterion = if single_class { -val_loss } else { val_metrics.f1 };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val: val_metrics,
        });

        let improved = best.as_ref().map_or(true, |(b, ..)| criterion > *b);
        if improved {
            best = Some((criterion, flat.clone(), params.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train_config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    if let Some((_, _, best_params, best_epoch)) = best {
        params = best_params;
        history.best_epoch = Some(best_epoch);
    }
    Ok((params, history))
}

/// `history.csv`: one row per epoch with train loss and validation metrics.
pub fn write_history_csv<W: Write>(mut w: W, history: &TrainHistory) -> Result<()> {
    writeln!(
        w,
        "epoch,train_loss,val_loss,val_rmse,val_mae,val_mape,val_accuracy,val_precision,val_recall,val_f1"
    )?;
    for e in &history.epochs {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.train_loss,
            e.val_loss,
            e.val.rmse,
            e.val.mae,
            e.val.mape_percent,
            e.val.accuracy,
            e.val.precision,
            e.val.recall,
            e.val.f1
        )?;
    }
    Ok(())
}
