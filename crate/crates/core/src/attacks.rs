//! Inner maximisation: FGSM, L∞-projected PGD, clean-candidate selection and
//! the empirical adversarial risk.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{model_fingerprint, predict_batched, Model};
use crate::numerics::{argmax, cross_entropy, forward, loss_and_grad_input, pairwise_sum, LabeledBatch, Tensor};

/// Slack allowed on the L∞ ball when checking iterates.
pub const BALL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Fgsm,
    #[default]
    Pgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "target")]
pub enum AttackMode {
    /// Push the prediction away from the true label.
    #[default]
    Untargeted,
    /// Pull the prediction towards the given class.
    Targeted(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(default)]
    pub method: AttackMethod,
    /// L∞ radius, in intensity units.
    pub epsilon: f64,
    /// Per-iteration step α.
    pub step_size: f64,
    pub steps: usize,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default)]
    pub mode: AttackMode,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    pub fn pgd(epsilon: f64, step_size: f64, steps: usize) -> Self {
        Self {
            method: AttackMethod::Pgd,
            epsilon,
            step_size,
            steps,
            random_start: false,
            mode: AttackMode::Untargeted,
            seed: 0,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            method: AttackMethod::Fgsm,
            epsilon,
            step_size: epsilon.max(f64::MIN_POSITIVE),
            steps: 1,
            random_start: false,
            mode: AttackMode::Untargeted,
            seed: 0,
        }
    }

    pub fn with_random_start(mut self, on: bool) -> Self {
        self.random_start = on;
        self
    }

    pub fn with_mode(mut self, mode: AttackMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config(format!("epsilon must lie in [0, 1], got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if self.steps < 1 {
            return Err(Error::config("steps must be ≥ 1"));
        }
        Ok(())
    }

    /// Copy whose RNG seed is specific to sample `index`.
    pub fn for_sample(&self, index: u64) -> Self {
        let mut c = self.clone();
        c.seed = mix_seed(self.seed, index);
        c
    }
}

/// SplitMix64 finaliser over `(seed, stream)`.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamps `candidate` into `[anchor − ε, anchor + ε] ∩ [0, 1]` elementwise.
pub fn project(anchor: &Tensor, candidate: &Tensor, epsilon: f64) -> Result<Tensor> {
    anchor.zip_map(candidate, |a, c| {
        let lo = (a - epsilon).max(0.0);
        let hi = (a + epsilon).min(1.0);
        c.max(lo).min(hi)
    })
}

fn check_box(x: &Tensor) -> Result<()> {
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::input("attack input must lie in the [0, 1] intensity box"));
    }
    Ok(())
}

fn labels_for(mode: AttackMode, y: &[usize], k: usize) -> Result<Vec<usize>> {
    match mode {
        AttackMode::Untargeted => Ok(y.to_vec()),
        AttackMode::Targeted(t) if t < k => Ok(vec![t; y.len()]),
        AttackMode::Targeted(t) => Err(Error::config(format!("target class {t} out of range for {k} classes"))),
    }
}

/// Ascent direction `±sgn(∇ₓL)` (descent towards the target when targeted),
/// together with the loss at `x`.
fn signed_gradient(model: &Model, x: &Tensor, labels: &[usize], mode: AttackMode) -> Result<(f64, Tensor)> {
    let (loss, g) = loss_and_grad_input(model, x, labels)?;
    let dir = match mode {
        AttackMode::Untargeted => 1.0,
        AttackMode::Targeted(_) => -1.0,
    };
    Ok((loss, g.map(|v| dir * sign(v))))
}

/// `clip(x + ε·sgn(∇ₓL(θ, x, y)))` with `sgn(0) = 0`.
pub fn fgsm(model: &Model, x: &Tensor, y: &[usize], epsilon: f64) -> Result<Tensor> {
    fgsm_with_mode(model, x, y, epsilon, AttackMode::Untargeted)
}

fn fgsm_with_mode(model: &Model, x: &Tensor, y: &[usize], epsilon: f64, mode: AttackMode) -> Result<Tensor> {
    check_box(x)?;
    let labels = labels_for(mode, y, model.num_classes())?;
    let (_, s) = signed_gradient(model, x, &labels, mode)?;
    x.zip_map(&s, |a, d| (a + epsilon * d).clamp(0.0, 1.0))
}

/// Per-iterate record of a PGD run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PgdTrace {
    /// ‖xᵗ − x‖∞ for t = 0..=steps.
    pub linf: Vec<f64>,
    /// Coordinates outside [0, 1], summed over all iterates.
    pub out_of_box: usize,
    /// Loss of the attacked labels at xᵗ for t = 0..steps.
    pub losses: Vec<f64>,
}

impl PgdTrace {
    /// Number of iterates that left the ε-ball (beyond [`BALL_TOLERANCE`]).
    pub fn ball_violations(&self, epsilon: f64) -> usize {
        self.linf.iter().filter(|&&d| d > epsilon + BALL_TOLERANCE).count()
    }
}

/// Projected gradient sign method:
/// `xᵗ⁺¹ = Π(x, xᵗ + α·sgn(∇ₓL))` for `steps` iterations.
pub fn pgd(model: &Model, x: &Tensor, y: &[usize], config: &AttackConfig) -> Result<(Tensor, PgdTrace)> {
    config.validate()?;
    check_box(x)?;
    let labels = labels_for(config.mode, y, model.num_classes())?;
    let eps = config.epsilon;
    let mut trace = PgdTrace::default();
    let mut current = if config.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let jittered = x.map(|v| v + (2.0 * rng.gen::<f64>() - 1.0) * eps);
        project(x, &jittered, eps)?
    } else {
        x.clone()
    };
    let record = |t: &mut PgdTrace, it: &Tensor| -> Result<()> {
        t.linf.push(it.sub(x)?.max_abs());
        t.out_of_box += it.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        Ok(())
    };
    record(&mut trace, &current)?;
    for _ in 0..config.steps {
        let (loss, s) = signed_gradient(model, &current, &labels, config.mode)?;
        trace.losses.push(loss);
        let stepped = current.zip_map(&s, |a, d| a + config.step_size * d)?;
        current = project(x, &stepped, eps)?;
        record(&mut trace, &current)?;
    }
    Ok((current, trace))
}

/// Runs the configured attack on a single batch.
pub fn attack(model: &Model, x: &Tensor, y: &[usize], config: &AttackConfig) -> Result<(Tensor, Option<PgdTrace>)> {
    match config.method {
        AttackMethod::Fgsm => {
            config.validate()?;
            Ok((fgsm_with_mode(model, x, y, config.epsilon, config.mode)?, None))
        }
        AttackMethod::Pgd => pgd(model, x, y, config).map(|(x, t)| (x, Some(t))),
    }
}

/// Correctly classified samples of `test_data`; when more than `max_count`
/// qualify, a seeded uniform subset of that size, kept in original order.
pub fn select_candidates(model: &Model, test_data: &LabeledBatch, max_count: usize, seed: u64) -> Result<LabeledBatch> {
    if test_data.is_empty() {
        return Err(Error::input("candidate selection on an empty test set"));
    }
    let preds = predict_batched(model, test_data.images())?;
    let correct: Vec<usize> = preds
        .iter()
        .zip(test_data.labels())
        .enumerate()
        .filter(|(_, (p, y))| p == y)
        .map(|(i, _)| i)
        .collect();
    if correct.is_empty() {
        return Err(Error::EmptyCandidates(test_data.len()));
    }
    let chosen = if correct.len() > max_count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks: Vec<usize> = sample(&mut rng, correct.len(), max_count)
            .into_iter()
            .map(|j| correct[j])
            .collect();
        picks.sort_unstable();
        picks
    } else {
        correct
    };
    Ok(test_data.subset(&chosen))
}

/// Mean over samples of `L(θ, pgd(x), y)`, the plug-in estimate of the
/// robust risk. Samples are attacked independently with per-sample seeds.
pub fn estimate_adversarial_risk(model: &Model, data: &LabeledBatch, config: &AttackConfig) -> Result<f64> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::input("risk of an empty batch"));
    }
    let losses = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = data.images().select(i);
            let y = [data.labels()[i]];
            let (x_star, _) = attack(model, &x, &y, &config.for_sample(i as u64))?;
            cross_entropy(&forward(model, &x_star)?, &y)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&losses) / losses.len() as f64)
}

/// Fraction of `data` still classified correctly after attacking every
/// sample (already misclassified samples count as failures).
pub fn robust_accuracy(model: &Model, data: &LabeledBatch, config: &AttackConfig) -> Result<f64> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::input("robust accuracy of an empty batch"));
    }
    let hits = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = data.images().select(i);
            let y = data.labels()[i];
            let (x_star, _) = attack(model, &x, &[y], &config.for_sample(i as u64))?;
            Ok(argmax(forward(model, &x_star)?.data()) == y)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialRecord {
    /// 1×C×H×W clean input.
    pub x: Tensor,
    pub x_star: Tensor,
    /// `x_star − x`.
    pub delta: Tensor,
    pub y_true: usize,
    /// Model output distribution at `x_star`.
    pub adv_output: Vec<f64>,
    /// Seconds spent crafting `x_star`.
    pub crafting_time: f64,
    #[serde(skip)]
    pub trace: Option<PgdTrace>,
}

/// Aligned clean/adversarial pairs produced by one attack against one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialSet {
    pub config: AttackConfig,
    pub model_id: String,
    pub records: Vec<AdversarialRecord>,
}

impl AdversarialSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Untargeted: the prediction left the true class. Targeted: it reached
    /// the target.
    pub fn is_success(&self, record: &AdversarialRecord) -> bool {
        let pred = argmax(&record.adv_output);
        match self.config.mode {
            AttackMode::Untargeted => pred != record.y_true,
            AttackMode::Targeted(t) => pred == t,
        }
    }

    pub fn successes(&self) -> impl Iterator<Item = &AdversarialRecord> {
        self.records.iter().filter(|r| self.is_success(r))
    }

    /// Adversarial inputs as an N×C×H×W batch with their true labels.
    pub fn adversarial_batch(&self, num_classes: usize) -> Result<LabeledBatch> {
        let parts: Vec<&Tensor> = self.records.iter().map(|r| &r.x_star).collect();
        LabeledBatch::new(
            Tensor::concat(&parts)?,
            self.records.iter().map(|r| r.y_true).collect(),
            num_classes,
        )
    }
}

/// Attacks every sample of `candidates` independently (in parallel, with
/// per-sample seeds) and records the outcome.
pub fn craft_adversarial_set(model: &Model, candidates: &LabeledBatch, config: &AttackConfig) -> Result<AdversarialSet> {
    config.validate()?;
    let records = (0..candidates.len())
        .into_par_iter()
        .map(|i| {
            let x = candidates.images().select(i);
            let y = candidates.labels()[i];
            let started = Instant::now();
            let (x_star, trace) = attack(model, &x, &[y], &config.for_sample(i as u64))?;
            let crafting_time = started.elapsed().as_secs_f64();
            let adv_output = forward(model, &x_star)?.into_data();
            let delta = x_star.sub(&x)?;
            Ok(AdversarialRecord {
                x,
                x_star,
                delta,
                y_true: y,
                adv_output,
                crafting_time,
                trace,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdversarialSet {
        config: config.clone(),
        model_id: model_fingerprint(model),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Model;
    use crate::numerics::{Layer, Network};

    /// Two-class model with logits (0, w·x + b) on a single pixel.
    fn logistic(w: f64, b: f64) -> Model {
        let layers = vec![
            Layer::Flatten,
            Layer::linear(
                Tensor::new(vec![2, 1], vec![0.0, w]).unwrap(),
                Tensor::scalar_vec(&[0.0, b]),
            ),
        ];
        Model::from_network([1, 1, 1], 2, Network::new(layers)).unwrap()
    }

    fn px(v: f64) -> Tensor {
        Tensor::full(&[1, 1, 1, 1], v)
    }

    #[test]
    fn project_cases() {
        let a = Tensor::scalar_vec(&[0.5, 0.5, 0.05]);
        let c = Tensor::scalar_vec(&[0.55, 0.9, -0.3]);
        let p = project(&a, &c, 0.1).unwrap();
        assert_eq!(p.data()[0], 0.55);
        assert!((p.data()[1] - 0.6).abs() < 1e-15);
        assert_eq!(p.data()[2], 0.0);
    }

    #[test]
    fn fgsm_logistic_oracle() {
        let m = logistic(1.0, 0.0);
        let out = fgsm(&m, &px(0.5), &[1], 0.1).unwrap();
        assert!((out.data()[0] - 0.4).abs() < 1e-15);
        assert_eq!(fgsm(&m, &px(0.5), &[1], 0.0).unwrap(), px(0.5));
    }

    #[test]
    fn fgsm_clamps_at_box() {
        // Label 0: the loss grows with x, so the step points up.
        let m = logistic(1.0, 0.0);
        assert_eq!(fgsm(&m, &px(1.0), &[0], 0.3).unwrap().data()[0], 1.0);
    }

    #[test]
    fn pgd_zero_epsilon_is_identity() {
        let m = logistic(2.0, -0.3);
        let cfg = AttackConfig::pgd(0.0, 0.05, 12).with_random_start(true);
        let (x_star, trace) = pgd(&m, &px(0.37), &[1], &cfg).unwrap();
        assert_eq!(x_star, px(0.37));
        assert_eq!(trace.ball_violations(0.0), 0);
    }

    #[test]
    fn pgd_linear_closed_form() {
        // Constant gradient sign −1 for label 1: x moves down by α·steps.
        let m = logistic(1.0, 0.0);
        let cfg = AttackConfig::pgd(0.2, 0.04, 4);
        let (x_star, trace) = pgd(&m, &px(0.6), &[1], &cfg).unwrap();
        assert!((x_star.data()[0] - 0.44).abs() < 1e-12);
        assert_eq!(trace.linf.len(), 5);
        assert_eq!(trace.losses.len(), 4);
        assert!(trace.losses.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn targeted_descends_towards_target() {
        let m = logistic(1.0, 0.0);
        let cfg = AttackConfig::pgd(0.2, 0.05, 4).with_mode(AttackMode::Targeted(1));
        let (x_star, _) = pgd(&m, &px(0.5), &[0], &cfg).unwrap();
        assert!((x_star.data()[0] - 0.7).abs() < 1e-12);
        let bad = AttackConfig::pgd(0.2, 0.05, 4).with_mode(AttackMode::Targeted(5));
        assert!(matches!(pgd(&m, &px(0.5), &[0], &bad), Err(Error::Config(_))));
    }

    #[test]
    fn pgd_one_step_equals_fgsm() {
        let m = logistic(-1.5, 0.2);
        for &v in &[0.0, 0.1, 0.5, 0.97, 1.0] {
            for &eps in &[0.0, 0.03, 0.3] {
                let f = fgsm(&m, &px(v), &[0], eps).unwrap();
                let cfg = AttackConfig::pgd(eps, eps.max(1e-300), 1);
                let (p, _) = pgd(&m, &px(v), &[0], &cfg).unwrap();
                assert!(f.bitwise_eq(&p), "x={v} eps={eps}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::pgd(1.5, 0.1, 1).validate().is_err());
        assert!(AttackConfig::pgd(0.1, 0.0, 1).validate().is_err());
        assert!(AttackConfig::pgd(0.1, 0.1, 0).validate().is_err());
        assert!(AttackConfig::pgd(0.1, 0.1, 1).validate().is_ok());
    }

    #[test]
    fn inputs_outside_box_rejected() {
        let m = logistic(1.0, 0.0);
        assert!(fgsm(&m, &px(1.2), &[0], 0.1).is_err());
    }

    #[test]
    fn candidates_only_correct() {
        let m = logistic(1.0, 0.0); // predicts 1 iff x > 0
        let imgs = Tensor::new(vec![4, 1, 1, 1], vec![0.2, 0.8, 0.0, 0.6]).unwrap();
        let data = LabeledBatch::new(imgs, vec![1, 1, 0, 0], 2).unwrap();
        let c = select_candidates(&m, &data, 10, 0).unwrap();
        assert_eq!(c.labels(), &[1, 1, 0]);
        let c2 = select_candidates(&m, &data, 2, 9).unwrap();
        assert_eq!(c2.len(), 2);
        assert_eq!(c2, select_candidates(&m, &data, 2, 9).unwrap());
        let wrong = LabeledBatch::new(Tensor::full(&[2, 1, 1, 1], 0.5), vec![0, 0], 2).unwrap();
        assert!(matches!(select_candidates(&m, &wrong, 5, 0), Err(Error::EmptyCandidates(2))));
    }

    #[test]
    fn risk_matches_closed_form_inner_max() {
        // Loss for label 1 is softplus(−x); its max over |δ| ≤ ε is at x − ε.
        let m = logistic(1.0, 0.0);
        let imgs = Tensor::new(vec![3, 1, 1, 1], vec![0.3, 0.5, 0.9]).unwrap();
        let data = LabeledBatch::new(imgs, vec![1, 1, 1], 2).unwrap();
        let eps = 0.2;
        let cfg = AttackConfig::pgd(eps, 0.05, 10);
        let est = estimate_adversarial_risk(&m, &data, &cfg).unwrap();
        let analytic: f64 = [0.3f64, 0.5, 0.9]
            .iter()
            .map(|&x| (1.0 + (-(x - eps)).exp()).ln())
            .sum::<f64>()
            / 3.0;
        assert!((est - analytic).abs() < 1e-6, "{est} vs {analytic}");
        let clean = crate::numerics::loss(&m, data.images(), data.labels()).unwrap();
        let zero = estimate_adversarial_risk(&m, &data, &AttackConfig::pgd(0.0, 0.05, 10)).unwrap();
        assert!((zero - clean).abs() < 1e-15);
        let small = estimate_adversarial_risk(&m, &data, &AttackConfig::pgd(0.1, 0.05, 10)).unwrap();
        assert!(est >= small);
    }
}
