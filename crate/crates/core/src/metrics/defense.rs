//! Defense utility metrics comparing a raw model with its defense-enhanced
//! counterpart on the same test set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{forward_batched, Model};
use crate::numerics::{argmax, order_free_mean, LabeledBatch, Tensor};

/// Jensen–Shannon divergence in nats, `½·KL(p‖m) + ½·KL(q‖m)` with
/// `m = ½(p + q)`; lies in [0, ln 2].
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    fn kl_to_mid(a: f64, m: f64) -> f64 {
        if a > 0.0 {
            a * (a / m).ln()
        } else {
            0.0
        }
    }
    let (mut kp, mut kq) = (0.0, 0.0);
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        kp += kl_to_mid(a, m);
        kq += kl_to_mid(b, m);
    }
    (0.5 * (kp + kq)).clamp(0.0, std::f64::consts::LN_2)
}

/// CAV from already-computed rectify and sacrifice ratios.
pub fn cav_from_rates(crr: f64, csr: f64) -> f64 {
    crr - csr
}

/// Model outputs on a shared test set.
pub struct PairedOutputs<'a> {
    pub raw: &'a Tensor,
    pub defended: &'a Tensor,
    pub labels: &'a [usize],
}

impl PairedOutputs<'_> {
    fn check(&self) -> Result<()> {
        if self.raw.shape() != self.defended.shape() || self.raw.batch_len() != self.labels.len() {
            return Err(Error::input("raw and defended outputs must cover the same samples"));
        }
        if self.labels.is_empty() {
            return Err(Error::input("defense metrics over an empty test set"));
        }
        Ok(())
    }

    fn correctness(&self) -> Vec<(bool, bool)> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, &y)| (argmax(self.raw.item(i)) == y, argmax(self.defended.item(i)) == y))
            .collect()
    }

    fn shared_correct(&self) -> Vec<usize> {
        self.correctness()
            .iter()
            .enumerate()
            .filter(|(_, &(a, b))| a && b)
            .map(|(i, _)| i)
            .collect()
    }

    /// (cav, crr, csr) as fractions of the test set.
    pub fn cav_crr_csr(&self) -> Result<(f64, f64, f64)> {
        self.check()?;
        let n = self.labels.len() as f64;
        let c = self.correctness();
        let rectified = c.iter().filter(|&&(a, b)| !a && b).count() as f64;
        let sacrificed = c.iter().filter(|&&(a, b)| a && !b).count() as f64;
        let (crr, csr) = (rectified / n, sacrificed / n);
        Ok((cav_from_rates(crr, csr), crr, csr))
    }

    pub fn accuracies(&self) -> Result<(f64, f64)> {
        self.check()?;
        let n = self.labels.len() as f64;
        let c = self.correctness();
        Ok((
            c.iter().filter(|p| p.0).count() as f64 / n,
            c.iter().filter(|p| p.1).count() as f64 / n,
        ))
    }

    /// Mean |P_raw[y] − P_def[y]| over samples both models classify correctly.
    pub fn ccv(&self) -> Result<Option<f64>> {
        self.check()?;
        let vals: Vec<f64> = self
            .shared_correct()
            .into_iter()
            .map(|i| (self.raw.item(i)[self.labels[i]] - self.defended.item(i)[self.labels[i]]).abs())
            .collect();
        Ok(order_free_mean(&vals))
    }

    /// Mean JS divergence between the two output distributions over samples
    /// both models classify correctly.
    pub fn cos(&self) -> Result<Option<f64>> {
        self.check()?;
        let vals: Vec<f64> = self
            .shared_correct()
            .into_iter()
            .map(|i| js_divergence(self.raw.item(i), self.defended.item(i)))
            .collect();
        Ok(order_free_mean(&vals))
    }
}

fn outputs(raw: &Model, defended: &Model, test: &LabeledBatch) -> Result<(Tensor, Tensor)> {
    if test.is_empty() {
        return Err(Error::input("defense metrics over an empty test set"));
    }
    Ok((forward_batched(raw, test.images())?, forward_batched(defended, test.images())?))
}

pub fn cav_crr_csr(raw: &Model, defended: &Model, test: &LabeledBatch) -> Result<(f64, f64, f64)> {
    let (a, b) = outputs(raw, defended, test)?;
    PairedOutputs { raw: &a, defended: &b, labels: test.labels() }.cav_crr_csr()
}

pub fn ccv(raw: &Model, defended: &Model, test: &LabeledBatch) -> Result<Option<f64>> {
    let (a, b) = outputs(raw, defended, test)?;
    PairedOutputs { raw: &a, defended: &b, labels: test.labels() }.ccv()
}

pub fn cos(raw: &Model, defended: &Model, test: &LabeledBatch) -> Result<Option<f64>> {
    let (a, b) = outputs(raw, defended, test)?;
    PairedOutputs { raw: &a, defended: &b, labels: test.labels() }.cos()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub acc_raw: f64,
    pub acc_defended: f64,
    pub cav: f64,
    pub crr: f64,
    pub csr: f64,
    pub ccv: Option<f64>,
    /// Mean JS divergence, natural log.
    pub cos: Option<f64>,
    /// Wall-clock seconds of the defense training, when known.
    #[serde(default)]
    pub train_time: Option<f64>,
}

impl DefenseReport {
    pub fn without_timing(&self) -> Self {
        Self {
            train_time: None,
            ..self.clone()
        }
    }
}

pub fn defense_report(raw: &Model, defended: &Model, test: &LabeledBatch) -> Result<DefenseReport> {
    let (a, b) = outputs(raw, defended, test)?;
    defense_report_from_outputs(&PairedOutputs {
        raw: &a,
        defended: &b,
        labels: test.labels(),
    })
}

pub fn defense_report_from_outputs(paired: &PairedOutputs<'_>) -> Result<DefenseReport> {
    let (cav, crr, csr) = paired.cav_crr_csr()?;
    let (acc_raw, acc_defended) = paired.accuracies()?;
    Ok(DefenseReport {
        acc_raw,
        acc_defended,
        cav,
        crr,
        csr,
        ccv: paired.ccv()?,
        cos: paired.cos()?,
        train_time: None,
    })
}
