//! Outer minimisation: plain SGD training, NAT (FGSM-augmented retraining)
//! and PAT (PGD adversarial training, static augmentation or per-batch).

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack, craft_adversarial_set, mix_seed, AttackConfig, AttackMethod};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::numerics::{loss_and_grad_params, pairwise_sum, sgd_update, LabeledBatch, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Standard,
    Nat,
    Pat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PatStyle {
    /// Craft one adversarial copy of the training set against the initial
    /// model, append it, then train normally.
    #[default]
    AugmentStatic,
    /// Re-craft adversarial examples against the current parameters for
    /// every minibatch and step on their loss.
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: TrainMode,
    /// Attack used to build adversarial examples (NAT and PAT only).
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub pat_style: PatStyle,
}

impl TrainConfig {
    pub fn standard(epochs: usize, batch_size: usize, learning_rate: f64) -> Self {
        Self {
            epochs,
            batch_size,
            learning_rate,
            seed: 0,
            mode: TrainMode::Standard,
            attack: None,
            pat_style: PatStyle::AugmentStatic,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_defense(mut self, mode: TrainMode, attack: AttackConfig) -> Self {
        self.mode = mode;
        self.attack = Some(attack);
        self
    }

    pub fn with_pat_style(mut self, style: PatStyle) -> Self {
        self.pat_style = style;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs must be ≥ 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be ≥ 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be finite and ≥ 0, got {}",
                self.learning_rate
            )));
        }
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        Ok(())
    }

    fn require_attack(&self) -> Result<&AttackConfig> {
        self.attack
            .as_ref()
            .ok_or_else(|| Error::config(format!("{:?} training needs an attack config", self.mode)))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    /// Wall-clock seconds, including any adversarial crafting.
    pub wall_time: f64,
}

fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64));
    order.shuffle(&mut rng);
    order
}

fn step(model: &mut Model, images: &Tensor, labels: &[usize], lr: f64, epoch: usize) -> Result<f64> {
    let (loss, grads) = loss_and_grad_params(model, images, labels)?;
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::TrainingDiverged { epoch, loss });
    }
    sgd_update(model.params_mut(), &grads, lr)?;
    if model.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::TrainingDiverged { epoch, loss: f64::INFINITY });
    }
    Ok(loss)
}

fn finish_epoch(history: &mut Vec<f64>, weighted: &[f64], n: usize, epoch: usize) -> Result<()> {
    let mean = pairwise_sum(weighted) / n as f64;
    if !mean.is_finite() {
        return Err(Error::TrainingDiverged { epoch, loss: mean });
    }
    history.push(mean);
    Ok(())
}

/// Minibatch SGD on the mean cross-entropy of `data`. The input model is
/// left untouched; a trained copy is returned.
pub fn train(model: &Model, data: &LabeledBatch, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::input("training on an empty dataset"));
    }
    let started = Instant::now();
    let mut model = model.clone();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_order(data.len(), config.seed, epoch);
        let mut weighted = Vec::new();
        for batch in order.chunks(config.batch_size) {
            let x = data.images().gather(batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let loss = step(&mut model, &x, &y, config.learning_rate, epoch)?;
            weighted.push(loss * batch.len() as f64);
        }
        finish_epoch(&mut history, &weighted, data.len(), epoch)?;
    }
    Ok(TrainOutcome {
        model,
        loss_history: history,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

fn augment(model: &Model, data: &LabeledBatch, attack_config: &AttackConfig) -> Result<LabeledBatch> {
    let adv = craft_adversarial_set(model, data, attack_config)?;
    data.concat(&adv.adversarial_batch(data.num_classes())?)
}

fn retrain_on(model: &Model, data: &LabeledBatch, config: &TrainConfig, started: Instant) -> Result<TrainOutcome> {
    let mut outcome = train(model, data, &TrainConfig { mode: TrainMode::Standard, ..config.clone() })?;
    outcome.wall_time = started.elapsed().as_secs_f64();
    Ok(outcome)
}

/// Naive adversarial training: append single-step FGSM examples crafted
/// against the initial model, then train normally.
pub fn nat_train(model: &Model, data: &LabeledBatch, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let base = config.require_attack()?;
    let fgsm = AttackConfig {
        method: AttackMethod::Fgsm,
        ..base.clone()
    };
    let augmented = augment(model, data, &fgsm)?;
    retrain_on(model, &augmented, config, started)
}

/// PGD adversarial training in the configured [`PatStyle`].
pub fn pat_train(model: &Model, data: &LabeledBatch, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let attack_config = config.require_attack()?;
    match config.pat_style {
        PatStyle::AugmentStatic => {
            let augmented = augment(model, data, attack_config)?;
            retrain_on(model, &augmented, config, started)
        }
        PatStyle::PerBatch => {
            let mut model = model.clone();
            let mut history = Vec::with_capacity(config.epochs);
            for epoch in 0..config.epochs {
                let order = epoch_order(data.len(), config.seed, epoch);
                let attack_seed = mix_seed(attack_config.seed, epoch as u64);
                let mut weighted = Vec::new();
                for batch in order.chunks(config.batch_size) {
                    let snapshot = &model;
                    let crafted = batch
                        .par_iter()
                        .map(|&i| {
                            let x = data.images().select(i);
                            let y = [data.labels()[i]];
                            let per_sample = AttackConfig {
                                seed: attack_seed,
                                ..attack_config.clone()
                            }
                            .for_sample(i as u64);
                            attack(snapshot, &x, &y, &per_sample).map(|(x_star, _)| x_star)
                        })
                        .collect::<Result<Vec<Tensor>>>()?;
                    let x = Tensor::concat(&crafted.iter().collect::<Vec<_>>())?;
                    let y: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
                    let loss = step(&mut model, &x, &y, config.learning_rate, epoch)?;
                    weighted.push(loss * batch.len() as f64);
                }
                finish_epoch(&mut history, &weighted, data.len(), epoch)?;
            }
            Ok(TrainOutcome {
                model,
                loss_history: history,
                wall_time: started.elapsed().as_secs_f64(),
            })
        }
    }
}

/// Dispatches on `config.mode`.
pub fn defend(model: &Model, data: &LabeledBatch, config: &TrainConfig) -> Result<TrainOutcome> {
    match config.mode {
        TrainMode::Standard => train(model, data, config),
        TrainMode::Nat => nat_train(model, data, config),
        TrainMode::Pat => pat_train(model, data, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{accuracy, build_model, Architecture, ModelConfig};

    /// Two Gaussian-free clusters in a 1×1×2 "image", split by x0 > x1.
    fn separable() -> LabeledBatch {
        let mut vals = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let t = i as f64 / 20.0;
            vals.extend_from_slice(&[0.6 + 0.3 * t, 0.1 + 0.2 * t]);
            labels.push(0);
            vals.extend_from_slice(&[0.1 + 0.2 * t, 0.6 + 0.3 * t]);
            labels.push(1);
        }
        LabeledBatch::new(Tensor::new(vec![40, 1, 1, 2], vals).unwrap(), labels, 2).unwrap()
    }

    fn linear_model() -> Model {
        build_model(&ModelConfig::new(Architecture::Linear, [1, 1, 2], 2).with_seed(1)).unwrap()
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let data = separable();
        let out = train(&linear_model(), &data, &TrainConfig::standard(50, 8, 0.5)).unwrap();
        assert_eq!(accuracy(&out.model, &data).unwrap(), 1.0);
        assert_eq!(out.loss_history.len(), 50);
        assert!(out.loss_history.last().unwrap() < &out.loss_history[0]);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = separable();
        let m = linear_model();
        let out = train(&m, &data, &TrainConfig::standard(3, 8, 0.0)).unwrap();
        assert_eq!(out.model, m);
        assert!(out.loss_history.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable();
        let cfg = TrainConfig::standard(4, 7, 0.3).with_seed(11);
        let a = train(&linear_model(), &data, &cfg).unwrap();
        let b = train(&linear_model(), &data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn divergence_is_reported() {
        // Identical inputs with conflicting labels keep the gradient alive.
        let data = LabeledBatch::new(Tensor::full(&[4, 1, 1, 2], 1.0), vec![0, 1, 0, 1], 2).unwrap();
        let err = train(&linear_model(), &data, &TrainConfig::standard(20, 1, f64::MAX)).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { .. }), "{err}");
    }

    #[test]
    fn zero_epsilon_defenses_equal_duplicated_training() {
        let data = separable();
        let m = linear_model();
        let base = TrainConfig::standard(3, 8, 0.2).with_seed(5);
        let doubled = train(&m, &data.concat(&data).unwrap(), &base).unwrap();
        let zero = AttackConfig::pgd(0.0, 0.01, 5).with_random_start(true);
        let pat = pat_train(&m, &data, &base.clone().with_defense(TrainMode::Pat, zero.clone())).unwrap();
        let nat = nat_train(&m, &data, &base.clone().with_defense(TrainMode::Nat, zero)).unwrap();
        assert_eq!(pat.model, doubled.model);
        assert_eq!(nat.model, doubled.model);
    }

    #[test]
    fn per_batch_single_step_is_fgsm_training() {
        let data = separable();
        let m = linear_model();
        let eps = 0.05;
        let base = TrainConfig::standard(2, 8, 0.2).with_seed(2).with_pat_style(PatStyle::PerBatch);
        let pgd1 = pat_train(&m, &data, &base.clone().with_defense(TrainMode::Pat, AttackConfig::pgd(eps, eps, 1))).unwrap();
        let fgsm = pat_train(&m, &data, &base.with_defense(TrainMode::Pat, AttackConfig::fgsm(eps))).unwrap();
        assert_eq!(pgd1.model, fgsm.model);
    }

    #[test]
    fn missing_attack_is_config_error() {
        let data = separable();
        let cfg = TrainConfig {
            mode: TrainMode::Pat,
            ..TrainConfig::standard(1, 8, 0.1)
        };
        assert!(matches!(pat_train(&linear_model(), &data, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn input_dataset_is_not_mutated() {
        let data = separable();
        let copy = data.clone();
        let cfg = TrainConfig::standard(1, 8, 0.1).with_defense(TrainMode::Pat, AttackConfig::pgd(0.1, 0.05, 2));
        pat_train(&linear_model(), &data, &cfg).unwrap();
        assert_eq!(data, copy);
    }
}
