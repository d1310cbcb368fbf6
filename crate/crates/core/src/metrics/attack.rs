//! Attack utility metrics over an [`AdversarialSet`].
//!
//! MR and CC average over every record; the remaining metrics average over
//! successful records only and come back as `None` when there are none.
//! Means are taken over sorted values so that record order never matters.

use log::warn;
use serde::{Deserialize, Serialize};

use super::image::{gaussian_blur, perturbation_sensitivity, ssim, BlurSpec};
use crate::attacks::{AdversarialSet, AttackMode};
use crate::error::{Error, Result};
use crate::models::{predict_batched, Model};
use crate::numerics::{argmax, order_free_mean, Tensor};

/// Coordinates with `|δᵢ|` at or below this count as unchanged for L0.
pub const L0_THRESHOLD: f64 = 1e-12;

fn require_records(adv: &AdversarialSet) -> Result<()> {
    if adv.is_empty() {
        return Err(Error::input("metric over an empty adversarial set"));
    }
    Ok(())
}

/// Misclassification ratio: fraction of records where the attack succeeded.
pub fn mr(adv: &AdversarialSet) -> Result<f64> {
    require_records(adv)?;
    Ok(adv.successes().count() as f64 / adv.len() as f64)
}

/// Mean confidence of the adversarial (predicted) class over successes.
pub fn acac(adv: &AdversarialSet) -> Option<f64> {
    let vals: Vec<f64> = adv.successes().map(|r| r.adv_output[argmax(&r.adv_output)]).collect();
    order_free_mean(&vals)
}

/// Mean confidence of the true class over successes.
pub fn actc(adv: &AdversarialSet) -> Option<f64> {
    let vals: Vec<f64> = adv.successes().map(|r| r.adv_output[r.y_true]).collect();
    order_free_mean(&vals)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    L0,
    L1,
    L2,
    Linf,
}

pub fn norm(values: &[f64], p: Norm) -> f64 {
    match p {
        Norm::L0 => values.iter().filter(|v| v.abs() > L0_THRESHOLD).count() as f64,
        Norm::L1 => values.iter().map(|v| v.abs()).sum(),
        Norm::L2 => values.iter().map(|v| v * v).sum::<f64>().sqrt(),
        Norm::Linf => values.iter().fold(0.0, |m, v| m.max(v.abs())),
    }
}

/// Average relative distortion ‖δ‖ₚ / ‖x‖ₚ for all four norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aldp {
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
    /// Successful records skipped because ‖x‖ₚ = 0.
    pub skipped: usize,
}

impl Aldp {
    pub fn get(&self, p: Norm) -> f64 {
        match p {
            Norm::L0 => self.l0,
            Norm::L1 => self.l1,
            Norm::L2 => self.l2,
            Norm::Linf => self.linf,
        }
    }
}

/// Mean of ‖δ‖ₚ / ‖x‖ₚ over successes for one norm, plus the skip count.
pub fn aldp_single(adv: &AdversarialSet, p: Norm) -> (Option<f64>, usize) {
    let mut ratios = Vec::new();
    let mut skipped = 0;
    for r in adv.successes() {
        let base = norm(r.x.data(), p);
        if base == 0.0 {
            skipped += 1;
            continue;
        }
        ratios.push(norm(r.delta.data(), p) / base);
    }
    (order_free_mean(&ratios), skipped)
}

pub fn aldp(adv: &AdversarialSet) -> Option<Aldp> {
    let (l0, skipped) = aldp_single(adv, Norm::L0);
    if skipped > 0 {
        warn!("ALDp skipped {skipped} records with an all-zero clean input");
    }
    Some(Aldp {
        l0: l0?,
        l1: aldp_single(adv, Norm::L1).0?,
        l2: aldp_single(adv, Norm::L2).0?,
        linf: aldp_single(adv, Norm::Linf).0?,
        skipped,
    })
}

/// Mean SSIM between clean and adversarial images over successes, with
/// negative values clamped to 0.
pub fn ass(adv: &AdversarialSet) -> Result<Option<f64>> {
    let mut vals = Vec::new();
    let mut clamped = 0;
    for r in adv.successes() {
        let s = ssim(&r.x, &r.x_star)?;
        if s < 0.0 {
            clamped += 1;
        }
        vals.push(s.clamp(0.0, 1.0));
    }
    if clamped > 0 {
        warn!("ASS clamped {clamped} negative SSIM values to 0");
    }
    Ok(order_free_mean(&vals))
}

/// Mean perturbation sensitivity distance over successes.
pub fn psd(adv: &AdversarialSet) -> Result<Option<f64>> {
    let vals = adv
        .successes()
        .map(|r| perturbation_sensitivity(&r.x, &r.delta))
        .collect::<Result<Vec<f64>>>()?;
    Ok(order_free_mean(&vals))
}

/// Mean gap between the adversarial class probability and the runner-up.
pub fn nte(adv: &AdversarialSet) -> Option<f64> {
    let vals: Vec<f64> = adv
        .successes()
        .map(|r| {
            let top = argmax(&r.adv_output);
            let runner_up = r
                .adv_output
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != top)
                .fold(0.0f64, |m, (_, &v)| m.max(v));
            r.adv_output[top] - runner_up
        })
        .collect();
    order_free_mean(&vals)
}

/// Fraction of successful adversarial examples that stay successful after a
/// Gaussian blur.
pub fn rgb_robustness(adv: &AdversarialSet, model: &Model, blur: &BlurSpec) -> Result<Option<f64>> {
    let winners: Vec<_> = adv.successes().collect();
    if winners.is_empty() {
        return Ok(None);
    }
    let stacked = Tensor::concat(&winners.iter().map(|r| &r.x_star).collect::<Vec<_>>())?;
    let preds = predict_batched(model, &gaussian_blur(&stacked, blur)?)?;
    let survived = winners
        .iter()
        .zip(&preds)
        .filter(|(r, &p)| match adv.config.mode {
            AttackMode::Untargeted => p != r.y_true,
            AttackMode::Targeted(t) => p == t,
        })
        .count();
    Ok(Some(survived as f64 / winners.len() as f64))
}

/// Mean crafting time in seconds over all records.
pub fn cc(adv: &AdversarialSet) -> Result<f64> {
    require_records(adv)?;
    let times: Vec<f64> = adv.records.iter().map(|r| r.crafting_time).collect();
    Ok(order_free_mean(&times).unwrap_or(0.0))
}

/// All attack utility metrics for one adversarial set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub mr: f64,
    pub acac: Option<f64>,
    pub actc: Option<f64>,
    pub aldp: Option<Aldp>,
    pub ass: Option<f64>,
    pub psd: Option<f64>,
    pub nte: Option<f64>,
    pub rgb: Option<f64>,
    /// Seconds per example.
    pub cc: f64,
    pub records: usize,
    pub successes: usize,
}

impl AttackReport {
    /// Copy with the wall-clock-derived field zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        Self { cc: 0.0, ..self.clone() }
    }
}

pub fn attack_report(adv: &AdversarialSet, model: &Model, blur: &BlurSpec) -> Result<AttackReport> {
    Ok(AttackReport {
        mr: mr(adv)?,
        acac: acac(adv),
        actc: actc(adv),
        aldp: aldp(adv),
        ass: ass(adv)?,
        psd: psd(adv)?,
        nte: nte(adv),
        rgb: rgb_robustness(adv, model, blur)?,
        cc: cc(adv)?,
        records: adv.len(),
        successes: adv.successes().count(),
    })
}
