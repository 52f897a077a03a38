use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unitforge::alignment::{Backbone, BackboneConfig};
use unitforge::ctc::UnitSequence;
use unitforge::data::*;
use unitforge::decoder::*;
use unitforge::nn::normal_tensor;
use unitforge::tensor::Tensor;

fn small(mode: DecoderMode, tgm: bool, seed: u64) -> SpeechDecoder {
    SpeechDecoder::new(SpeechDecoderConfig {
        mode,
        layers: 2,
        experts: 2,
        dim: 8,
        heads: 2,
        vocab_nar: 8,
        vocab_ar: 12,
        upsample: 4,
        max_units: 6,
        max_context: 4,
        tgm,
        seed,
    })
    .unwrap()
}

fn context(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let rows = rng.random_range(2..=4);
    let cond = normal_tensor(rng, &[rows, 8], 1.0);
    let n = rng.random_range(1..=rows);
    let text = Tensor::new(vec![n, 8], cond.data()[(rows - n) * 8..].to_vec()).unwrap();
    (cond, text)
}

fn example(rng: &mut ChaCha8Rng, units: Vec<u32>) -> DecoderExample {
    let (cond, text) = context(rng);
    DecoderExample {
        lang: Language::A,
        emotion: EmotionLabel::Neutral,
        cond,
        text,
        units: UnitSequence::new(units).unwrap(),
    }
}

#[test]
fn checkpoint_round_trip_generates_identically() {
    let dir = tempfile::tempdir().unwrap();
    for (mode, tgm) in [(DecoderMode::Nar, true), (DecoderMode::Nar, false), (DecoderMode::Ar, true)] {
        let dec = small(mode, tgm, 5);
        let path = dir.path().join(format!("{mode}-{tgm}.oomn"));
        dec.save(&path).unwrap();
        let back = SpeechDecoder::load(&path).unwrap();
        assert_eq!(back.config, dec.config);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let (cond, text) = context(&mut rng);
            let a = dec.generate(&cond, Some(&text)).unwrap();
            let b = back.generate(&cond, Some(&text)).unwrap();
            assert_eq!(a, b);
            if mode == DecoderMode::Nar {
                let la = dec.nar_log_probs(&cond, Some(&text)).unwrap();
                let lb = back.nar_log_probs(&cond, Some(&text)).unwrap();
                assert!(la.data().iter().zip(lb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}

#[test]
fn loading_without_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.oomn");
    small(DecoderMode::Nar, false, 1).save(&path).unwrap();
    std::fs::remove_file(config_path(&path)).unwrap();
    assert!(matches!(SpeechDecoder::load(&path), Err(unitforge::Error::Io { .. })));
}

#[test]
fn step_count_law() {
    let nar = small(DecoderMode::Nar, false, 2);
    let ar = small(DecoderMode::Ar, false, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (cond, _) = context(&mut rng);
        assert_eq!(nar.generate(&cond, None).unwrap().steps, 1);
        let g = ar.generate(&cond, None).unwrap();
        if g.truncated {
            assert_eq!(g.units.len(), ar.config.max_units);
            assert_eq!(g.steps, g.units.len());
        } else {
            assert_eq!(g.steps, g.units.len() + 1);
        }
        assert!(!g.units.as_slice().contains(&ar.config.eos()));
    }
}

#[test]
fn generation_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (cond, text) = context(&mut rng);
    for mode in [DecoderMode::Nar, DecoderMode::Ar] {
        let dec = small(mode, true, 8);
        assert_eq!(dec.generate(&cond, Some(&text)).unwrap(), dec.generate(&cond, Some(&text)).unwrap());
    }
}

#[test]
fn nar_output_length_is_upsampled_context() {
    let dec = small(DecoderMode::Nar, true, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let (cond, text) = context(&mut rng);
        let lp = dec.nar_log_probs(&cond, Some(&text)).unwrap();
        assert_eq!(lp.shape(), &[4 * cond.rows(), 8]);
    }
}

#[test]
fn ar_overfits_a_single_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ex = example(&mut rng, vec![3, 5, 5, 2]);
    let mut dec = small(DecoderMode::Ar, false, 4);
    let opts = DecoderTrainOptions {
        lr: 1e-2,
        batch: 1,
        epochs: 300,
        warmup_ratio: 0.05,
        seed: 0,
    };
    let report = train_decoder(&mut dec, std::slice::from_ref(&ex), &opts).unwrap();
    assert!(report.final_loss() < 0.01, "final teacher-forced loss {}", report.final_loss());
    assert!(report.curve[0].loss > 1.0);
    let g = dec.generate(&ex.cond, None).unwrap();
    assert_eq!(g.units, ex.units);
    assert_eq!(g.steps, 5);
}

#[test]
fn nar_overfit_reaches_zero_uer() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let examples: Vec<DecoderExample> = (0..4)
        .map(|i| {
            let units: Vec<u32> = (0..3).map(|k| 1 + ((i + k) % 7) as u32).collect();
            example(&mut rng, units)
        })
        .collect();
    let mut dec = small(DecoderMode::Nar, false, 7);
    let opts = DecoderTrainOptions {
        lr: 1e-2,
        batch: 4,
        epochs: 400,
        warmup_ratio: 0.05,
        seed: 0,
    };
    let report = train_decoder(&mut dec, &examples, &opts).unwrap();
    assert!(report.final_loss() < 0.05, "{}", report.final_loss());
    let uer = evaluate_uer(&dec, &examples).unwrap();
    assert_eq!(uer.overall, 0.0);
    assert_eq!(uer.samples, 4);
}

#[test]
fn loss_curve_csv_has_one_row_per_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let examples: Vec<DecoderExample> = (0..5).map(|_| example(&mut rng, vec![1, 2])).collect();
    let mut dec = small(DecoderMode::Nar, true, 1);
    let opts = DecoderTrainOptions {
        epochs: 2,
        batch: 2,
        ..DecoderTrainOptions::default()
    };
    let r = train_decoder(&mut dec, &examples, &opts).unwrap();
    let csv = r.csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss,mode,tgm_flag"));
    assert_eq!(lines.count(), 6);
    assert!(csv.lines().nth(1).unwrap().ends_with(",nar,on"));
}

#[test]
fn decoder_training_leaves_backbone_untouched() {
    let world = World::new(DEFAULT_WORLD_SEED);
    let backbone = Backbone::new(BackboneConfig::default(), &world).unwrap();
    let before = backbone.checksum("");
    let spec = CorpusSpec {
        supervised: 8,
        ..CorpusSpec::default()
    };
    let recs = gen_supervised_corpus(&spec, &world).unwrap();
    let examples = decoder_examples(&backbone, &recs).unwrap();
    let mut dec = SpeechDecoder::new(SpeechDecoderConfig::default()).unwrap();
    let opts = DecoderTrainOptions {
        epochs: 1,
        ..DecoderTrainOptions::default()
    };
    train_decoder(&mut dec, &examples, &opts).unwrap();
    assert_eq!(backbone.checksum(""), before);
}

#[test]
fn default_corpus_is_feasible_for_default_decoder() {
    let world = World::new(DEFAULT_WORLD_SEED);
    let backbone = Backbone::new(BackboneConfig::default(), &world).unwrap();
    let recs = gen_supervised_corpus(&CorpusSpec::default(), &world).unwrap();
    let examples = decoder_examples(&backbone, &recs).unwrap();
    for mode in [DecoderMode::Nar, DecoderMode::Ar] {
        let dec = SpeechDecoder::new(SpeechDecoderConfig {
            mode,
            ..SpeechDecoderConfig::default()
        })
        .unwrap();
        for ex in &examples {
            assert_eq!(dec.infeasibility(ex), None);
            if mode == DecoderMode::Nar {
                assert!(dec.config.upsample * ex.cond.rows() >= 2 * ex.units.len() + 1);
            }
        }
    }
}

#[test]
fn wrong_record_kind_is_a_kind_mismatch() {
    let world = World::new(DEFAULT_WORLD_SEED);
    let backbone = Backbone::new(BackboneConfig::default(), &world).unwrap();
    let spec = CorpusSpec {
        preference: 2,
        ..CorpusSpec::default()
    };
    let recs = gen_preference_corpus(&spec, &world).unwrap();
    assert!(matches!(
        decoder_examples(&backbone, &recs),
        Err(unitforge::Error::KindMismatch(_))
    ));
}

#[test]
fn config_file_round_trips() {
    let text = "# decoder\nmode = ar\nlayers = 3\nexperts = 2\ndim = 16\nheads = 4\nvocab = 300\nlambda = 6\ntgm = off\nseed = 11\nlr = 0.001\n";
    let (cfg, opts) = SpeechDecoderConfig::parse(text).unwrap();
    assert_eq!(cfg.mode, DecoderMode::Ar);
    assert_eq!(cfg.vocab_ar, 300);
    assert_eq!(cfg.upsample, 6);
    assert!(!cfg.tgm);
    assert_eq!(opts.lr, 0.001);
    let (again, opts2) = SpeechDecoderConfig::parse(&cfg.to_kv(Some(&opts))).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(opts2, opts);
    assert!(SpeechDecoderConfig::parse("colour = red").is_err());
    assert!(SpeechDecoderConfig::parse("vocab_nar = 300\nvocab_ar = 200").is_err());
}
