mod common;

use advkit::attacks::{
    craft_adversarial_set, fgsm, pgd, project, AdversarialRecord, AdversarialSet, AttackConfig, BALL_TOLERANCE,
};
use advkit::harness::container::{Cursor, TensorContainer};
use advkit::metrics::{
    acac, actc, aldp, ass, cc, js_divergence, mr, nte, psd, ssim, Norm, PairedOutputs,
};
use advkit::numerics::{softmax, LabeledBatch, Tensor};
use common::{random_batch, random_model};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn distribution(rng: &mut ChaCha8Rng, k: usize, temp: f64) -> Vec<f64> {
    let z = Tensor::from_fn(&[1, k], |_| rng.gen_range(-temp..temp));
    softmax(&z).into_data()
}

/// Random adversarial set over 3×6×6 images (a mix of successes and
/// failures, some all-zero inputs).
fn random_set(seed: u64, n: usize) -> AdversarialSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(2..6);
    let records = (0..n)
        .map(|i| {
            let zero = i % 7 == 6;
            let x = Tensor::from_fn(&[1, 3, 6, 6], |_| if zero { 0.0 } else { rng.gen_range(0.0..1.0) });
            let x_star = x.map(|v| (v + rng.gen_range(-0.2..0.2f64)).clamp(0.0, 1.0));
            AdversarialRecord {
                delta: x_star.sub(&x).unwrap(),
                x,
                x_star,
                y_true: rng.gen_range(0..k),
                adv_output: distribution(&mut rng, k, 6.0),
                crafting_time: rng.gen_range(0.0..0.01),
                trace: None,
            }
        })
        .collect();
    AdversarialSet {
        config: AttackConfig::pgd(0.2, 0.05, 5),
        model_id: "random".into(),
        records,
    }
}

fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projection_lands_in_ball_and_box(seed in any::<u64>(), eps in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_fn(&[2, 1, 3, 3], |_| rng.gen_range(0.0..1.0));
        let c = Tensor::from_fn(&[2, 1, 3, 3], |_| rng.gen_range(-1.0..2.0));
        let p = project(&a, &c, eps).unwrap();
        for ((&pv, &av), &cv) in p.data().iter().zip(a.data()).zip(c.data()) {
            prop_assert!((pv - av).abs() <= eps + BALL_TOLERANCE);
            prop_assert!((0.0..=1.0).contains(&pv));
            if (cv - av).abs() <= eps && (0.0..=1.0).contains(&cv) {
                prop_assert_eq!(pv, cv);
            }
        }
        prop_assert!(project(&a, &p, eps).unwrap().bitwise_eq(&p));
    }

    #[test]
    fn attacks_stay_in_ball(seed in 0u64..5000, eps in 0.0f64..0.4, steps in 1usize..8, rs in any::<bool>()) {
        let model = random_model(seed);
        let (x, y) = random_batch(&model, 2, seed);
        let cfg = AttackConfig::pgd(eps, eps / 2.0 + 1e-3, steps).with_random_start(rs).with_seed(seed);
        let (x_star, trace) = pgd(&model, &x, &y, &cfg).unwrap();
        prop_assert_eq!(trace.ball_violations(eps), 0);
        prop_assert_eq!(trace.out_of_box, 0);
        prop_assert_eq!(trace.linf.len(), steps + 1);
        prop_assert!(x_star.sub(&x).unwrap().max_abs() <= eps + BALL_TOLERANCE);
        let f = fgsm(&model, &x, &y, eps).unwrap();
        prop_assert!(f.sub(&x).unwrap().max_abs() <= eps + BALL_TOLERANCE);
        prop_assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn set_metric_invariants(seed in any::<u64>(), n in 1usize..24) {
        let set = random_set(seed, n);
        let m = mr(&set).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        if let (Some(a), Some(t)) = (acac(&set), actc(&set)) {
            prop_assert!(a >= t);
        }
        if let Some(v) = nte(&set) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if let Some(v) = ass(&set).unwrap() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if let Some(a) = aldp(&set) {
            for p in [Norm::L0, Norm::L1, Norm::L2, Norm::Linf] {
                prop_assert!(a.get(p) >= 0.0);
            }
        }

        let mut shuffled = set.clone();
        shuffled.records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        prop_assert_eq!(mr(&shuffled).unwrap(), m);
        prop_assert!(close(acac(&set), acac(&shuffled), 1e-12));
        prop_assert!(close(actc(&set), actc(&shuffled), 1e-12));
        prop_assert!(close(nte(&set), nte(&shuffled), 1e-12));
        prop_assert!(close(ass(&set).unwrap(), ass(&shuffled).unwrap(), 1e-12));
        prop_assert!(close(psd(&set).unwrap(), psd(&shuffled).unwrap(), 1e-12));
        prop_assert!((cc(&set).unwrap() - cc(&shuffled).unwrap()).abs() <= 1e-12);
        match (aldp(&set), aldp(&shuffled)) {
            (Some(a), Some(b)) => {
                for p in [Norm::L0, Norm::L1, Norm::L2, Norm::Linf] {
                    prop_assert!((a.get(p) - b.get(p)).abs() <= 1e-12);
                }
            }
            (None, None) => {}
            _ => prop_assert!(false),
        }
    }

    #[test]
    fn aldp_is_zero_at_zero_and_homogeneous(seed in any::<u64>(), c in 0.1f64..3.0) {
        let set = random_set(seed, 8);
        let scaled = |factor: f64| {
            let mut s = set.clone();
            for r in &mut s.records {
                r.delta = r.delta.map(|d| d * factor);
                r.x_star = r.x.zip_map(&r.delta, |a, b| a + b).unwrap();
            }
            s
        };
        if let Some(zero) = aldp(&scaled(0.0)) {
            prop_assert_eq!((zero.l0, zero.l1, zero.l2, zero.linf), (0.0, 0.0, 0.0, 0.0));
        }
        if let (Some(a), Some(b)) = (aldp(&set), aldp(&scaled(c))) {
            for p in [Norm::L1, Norm::L2, Norm::Linf] {
                prop_assert!((b.get(p) - c * a.get(p)).abs() <= 1e-12 * (1.0 + b.get(p)));
            }
        }
    }

    #[test]
    fn js_symmetric_and_bounded(seed in any::<u64>(), k in 2usize..12, temp in 0.1f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = distribution(&mut rng, k, temp);
        let q = distribution(&mut rng, k, temp);
        let (a, b) = (js_divergence(&p, &q), js_divergence(&q, &p));
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&a));
        prop_assert!(js_divergence(&p, &p).abs() <= 1e-15);
    }

    #[test]
    fn ssim_self_and_symmetry(seed in any::<u64>(), c in 1usize..4, h in 3usize..12, w in 3usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_fn(&[1, c, h, w], |_| rng.gen_range(0.0..1.0));
        let b = Tensor::from_fn(&[1, c, h, w], |_| rng.gen_range(0.0..1.0));
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn cav_identity(seed in any::<u64>(), n in 1usize..60, k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::new(vec![n, k], (0..n).flat_map(|_| distribution(&mut rng, k, 3.0)).collect()).unwrap();
        let def = Tensor::new(vec![n, k], (0..n).flat_map(|_| distribution(&mut rng, k, 3.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let p = PairedOutputs { raw: &raw, defended: &def, labels: &labels };
        let (cav, crr, csr) = p.cav_crr_csr().unwrap();
        let (acc_raw, acc_def) = p.accuracies().unwrap();
        prop_assert_eq!(cav, crr - csr);
        prop_assert!((cav - (acc_def - acc_raw)).abs() <= 1e-12);
        if let Some(v) = p.cos().unwrap() {
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&v));
        }
        let swapped = PairedOutputs { raw: &def, defended: &raw, labels: &labels };
        prop_assert!(close(p.cos().unwrap(), swapped.cos().unwrap(), 1e-12));
    }

    #[test]
    fn tensor_container_round_trip(seed in any::<u64>(), dims in proptest::collection::vec(1usize..5, 1..5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(&dims, |_| f64::from_bits(rng.gen::<u64>() & 0x7fef_ffff_ffff_ffff));
        let mut bytes = Vec::new();
        TensorContainer::from_tensor(&t).encode(&mut bytes);
        prop_assert_eq!(bytes.len(), 4 + 1 + 8 + 8 * dims.len() + 8 * t.len());
        let mut cursor = Cursor::new(&bytes, "prop");
        let back = TensorContainer::decode(&mut cursor).unwrap().into_tensor().unwrap();
        prop_assert!(back.bitwise_eq(&t));
    }
}

#[test]
fn crafted_sets_satisfy_acac_over_actc() {
    for seed in 0..10 {
        let model = random_model(seed);
        let (x, y) = random_batch(&model, 12, seed);
        let data = LabeledBatch::new(x, y, model.num_classes()).unwrap();
        let set = craft_adversarial_set(&model, &data, &AttackConfig::pgd(0.3, 0.05, 10)).unwrap();
        if let (Some(a), Some(t)) = (acac(&set), actc(&set)) {
            assert!(a >= t);
        }
    }
}
