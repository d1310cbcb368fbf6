//! Attack and defense utility metrics.

mod attack;
mod defense;
mod image;

pub use attack::{
    acac, actc, aldp, aldp_single, ass, attack_report, cc, mr, norm, nte, psd, rgb_robustness, Aldp, AttackReport,
    Norm, L0_THRESHOLD,
};
pub use defense::{
    cav_crr_csr, cav_from_rates, ccv, cos, defense_report, defense_report_from_outputs, js_divergence,
    DefenseReport, PairedOutputs,
};
pub use image::{gaussian_blur, perturbation_sensitivity, ssim, BlurSpec, PSD_STD_FLOOR, SSIM_WINDOW};
