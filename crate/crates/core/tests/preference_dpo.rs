use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unitforge::ctc::{ctc_brute_force, UnitSequence};
use unitforge::data::{EmotionLabel, Language};
use unitforge::decoder::*;
use unitforge::nn::normal_tensor;
use unitforge::preference::*;
use unitforge::tensor::{finite_difference_check_params, Tape, Tensor};

fn toy(seed: u64, tgm: bool) -> SpeechDecoder {
    SpeechDecoder::new(SpeechDecoderConfig {
        mode: DecoderMode::Nar,
        layers: 2,
        experts: 2,
        dim: 4,
        heads: 2,
        vocab_nar: 4,
        vocab_ar: 6,
        upsample: 3,
        max_units: 5,
        max_context: 3,
        tgm,
        seed,
    })
    .unwrap()
}

fn random_units(rng: &mut ChaCha8Rng, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(1..4)).collect()
}

/// A pair over a 2-row context (6 frames) with distinct feasible targets.
fn random_pair(rng: &mut ChaCha8Rng) -> PreferencePair {
    let cond = normal_tensor(rng, &[2, 4], 1.0);
    let text = Tensor::new(vec![1, 4], cond.row(1).to_vec()).unwrap();
    loop {
        let (nw, nl) = (rng.random_range(1..=2), rng.random_range(1..=2));
        let w = UnitSequence::new(random_units(rng, nw)).unwrap();
        let l = UnitSequence::new(random_units(rng, nl)).unwrap();
        if w != l {
            return PreferencePair::new(Language::A, EmotionLabel::Happy, cond, text, w, l).unwrap();
        }
    }
}

fn margin(policy: &SpeechDecoder, reference: &SpeechDecoder, p: &PreferencePair) -> f64 {
    let (w, l) = pair_scores(policy, p).unwrap();
    let (rw, rl) = pair_scores(reference, p).unwrap();
    (w - rw) - (l - rl)
}

#[test]
fn policy_likelihood_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for tgm in [false, true] {
        let dec = toy(11, tgm);
        for _ in 0..10 {
            let p = random_pair(&mut rng);
            let lp = dec.nar_log_probs(&p.cond, tgm.then_some(&p.text)).unwrap();
            for y in [&p.winner, &p.loser] {
                let mut tape = Tape::new();
                let v = policy_log_likelihood(&mut tape, &dec, &dec.store, &p.cond, &p.text, y).unwrap();
                let got = tape.item(v).unwrap();
                let oracle = -ctc_brute_force(&lp, y).unwrap();
                assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
            }
        }
    }
}

#[test]
fn fresh_policy_first_logged_loss_is_ln2() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs: Vec<_> = (0..6).map(|_| random_pair(&mut rng)).collect();
    let base = toy(2, false);
    let reference = frozen_reference(&base);
    let mut policy = frozen_reference(&base);
    let cfg = DpoConfig {
        epochs: 1,
        batch: 3,
        ..DpoConfig::default()
    };
    let rows = train_dpo(&mut policy, &reference, &pairs, &cfg).unwrap();
    assert!((rows[0].loss - std::f64::consts::LN_2).abs() < 1e-6);
    assert_eq!(rows[0].mean_margin, 0.0);
    let csv = dpo_metrics_csv(&rows);
    assert!(csv.starts_with("step,loss,mean_margin,preference_accuracy\n"));
    assert_eq!(csv.lines().count(), rows.len() + 1);
}

#[test]
fn one_step_increases_margin_on_twenty_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..20 {
        let pair = random_pair(&mut rng);
        let base = toy(100 + i, false);
        let reference = frozen_reference(&base);
        let mut policy = frozen_reference(&base);
        let cfg = DpoConfig {
            lr: 1e-3,
            batch: 1,
            epochs: 1,
            warmup_ratio: 0.0,
            ..DpoConfig::default()
        };
        assert_eq!(margin(&policy, &reference, &pair), 0.0);
        train_dpo(&mut policy, &reference, std::slice::from_ref(&pair), &cfg).unwrap();
        let m = margin(&policy, &reference, &pair);
        assert!(m > 0.0, "pair {i}: margin {m}");
    }
}

#[test]
fn reference_is_bit_identical_after_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pairs: Vec<_> = (0..8).map(|_| random_pair(&mut rng)).collect();
    let base = toy(7, true);
    let reference = frozen_reference(&base);
    let snapshot: Vec<Vec<u64>> = reference
        .store
        .iter()
        .map(|(_, p)| p.value.data().iter().map(|x| x.to_bits()).collect())
        .collect();
    let mut policy = frozen_reference(&base);
    let cfg = DpoConfig {
        epochs: 3,
        batch: 4,
        lr: 1e-2,
        ..DpoConfig::default()
    };
    train_dpo(&mut policy, &reference, &pairs, &cfg).unwrap();
    let after: Vec<Vec<u64>> = reference
        .store
        .iter()
        .map(|(_, p)| p.value.data().iter().map(|x| x.to_bits()).collect())
        .collect();
    assert_eq!(snapshot, after);
    assert!(!policy.store.any_trainable(), "policy is frozen after training");
    assert_ne!(margin(&policy, &reference, &pairs[0]), 0.0);
}

#[test]
fn trained_policy_prefers_winners() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pairs: Vec<_> = (0..16).map(|_| random_pair(&mut rng)).collect();
    let base = toy(9, false);
    let reference = frozen_reference(&base);
    let mut policy = frozen_reference(&base);
    let before = preference_accuracy(&policy, &pairs).unwrap();
    let cfg = DpoConfig {
        epochs: 60,
        batch: 8,
        lr: 1e-2,
        beta: 0.5,
        ..DpoConfig::default()
    };
    let rows = train_dpo(&mut policy, &reference, &pairs, &cfg).unwrap();
    let after = preference_accuracy(&policy, &pairs).unwrap();
    assert!(after >= 0.95, "accuracy {before} -> {after}");
    assert!(rows.last().unwrap().loss < rows[0].loss);
}

#[test]
fn dpo_objective_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for tgm in [false, true] {
        let base = toy(12, tgm);
        let reference = frozen_reference(&base);
        let mut policy = toy(13, tgm);
        policy.store.set_trainable("", true);
        let pair = random_pair(&mut rng);
        let mut store = policy.store.clone();
        let err = finite_difference_check_params(
            &mut store,
            |tape, s| ctc_dpo_loss(tape, &policy, s, &reference, &pair, 0.7),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "tgm {tgm}: relative error {err}");
    }
}

#[test]
fn null_policy_accuracy_is_near_half() {
    let mut accs = Vec::new();
    for seed in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let dec = toy(seed, false);
        let pairs: Vec<_> = (0..40)
            .map(|_| {
                let mut p = random_pair(&mut rng);
                if p.winner.len() != p.loser.len() {
                    let n = p.winner.len();
                    p.loser = loop {
                        let l = UnitSequence::new(random_units(&mut rng, n)).unwrap();
                        if l != p.winner {
                            break l;
                        }
                    };
                }
                p
            })
            .collect();
        accs.push(preference_accuracy(&dec, &pairs).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.1, "mean null accuracy {mean} ({accs:?})");
}

#[test]
fn contract_errors() {
    let policy = toy(1, false);
    let reference = frozen_reference(&policy);
    assert!(matches!(preference_accuracy(&policy, &[]), Err(unitforge::Error::Contract(_))));
    let ar = SpeechDecoder::new(SpeechDecoderConfig {
        mode: DecoderMode::Ar,
        ..policy.config.clone()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random_pair(&mut rng);
    let mut tape = Tape::new();
    assert!(matches!(
        ctc_dpo_loss(&mut tape, &ar, &ar.store, &reference, &p, 0.1),
        Err(unitforge::Error::Contract(_))
    ));
    assert!(ctc_dpo_loss(&mut tape, &policy, &policy.store, &reference, &p, 0.0).is_err());
    assert!(DpoConfig {
        beta: -1.0,
        ..DpoConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn doubling_beta_doubles_the_argument() {
    for m in [1.0, -1.0] {
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        assert!((dpo_loss_value(m, 0.2) + sig(0.2 * m).ln()).abs() < 1e-12);
        assert!((dpo_loss_value(m, 0.2) - dpo_loss_value(2.0 * m, 0.1)).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn loss_is_positive_and_vanishes_with_margin(m in -50.0f64..50.0, beta in 0.01f64..2.0) {
        prop_assert!(dpo_loss_value(m, beta) > 0.0);
        let far = dpo_loss_value(m.abs() * 1e3 + 1e3, beta);
        prop_assert!(far < 1e-6, "{far}");
        prop_assert!(dpo_loss_value(m + 1.0, beta) < dpo_loss_value(m, beta));
    }

    #[test]
    fn margin_gradient_sign_is_beta_independent(m in -20.0f64..20.0, b1 in 0.01f64..3.0, b2 in 0.01f64..3.0) {
        let grad = |beta: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::scalar(m), true);
            let z = tape.scale(x, beta).unwrap();
            let ls = tape.log_sigmoid(z).unwrap();
            let loss = tape.scale(ls, -1.0).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap()[0]
        };
        let (g1, g2) = (grad(b1), grad(b2));
        prop_assert!(g1 < 0.0 && g2 < 0.0, "{g1} {g2}");
        prop_assert!((g1 - (-b1 * (1.0 - 1.0 / (1.0 + (-b1 * m).exp())))).abs() < 1e-12);
    }
}
