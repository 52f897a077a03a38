//! CTC-DPO: direct preference optimization where each response likelihood is
//! the CTC marginal of a NAR decoder, against a frozen reference decoder.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{Backbone, StageId, StageSchedule};
use crate::ctc::{ctc_loss, UnitSequence};
use crate::data::{emotion_oracle_classify, EmotionLabel, Language, Payload, SampleRecord};
use crate::decoder::{DecoderMode, SpeechDecoder};
use crate::error::{Error, Result};
use crate::tensor::{train_step, warmup_lr, AdamW, AdamWConfig, ParamStore, Tape, Tensor, Var};

/// Conditioning plus an emotion-consistent winner and a neutral loser.
#[derive(Clone, Debug)]
pub struct PreferencePair {
    pub lang: Language,
    pub emotion: EmotionLabel,
    pub cond: Tensor,
    pub text: Tensor,
    pub winner: UnitSequence,
    pub loser: UnitSequence,
}

impl PreferencePair {
    pub fn new(
        lang: Language,
        emotion: EmotionLabel,
        cond: Tensor,
        text: Tensor,
        winner: UnitSequence,
        loser: UnitSequence,
    ) -> Result<Self> {
        if winner == loser {
            return Err(Error::Data("preference winner and loser are identical".into()));
        }
        Ok(PreferencePair {
            lang,
            emotion,
            cond,
            text,
            winner,
            loser,
        })
    }
}

/// Conditions every preference record on the frozen backbone.
pub fn preference_pairs(backbone: &Backbone, records: &[SampleRecord]) -> Result<Vec<PreferencePair>> {
    records
        .iter()
        .map(|r| match &r.payload {
            Payload::Preference {
                lang,
                emotion,
                context,
                response,
                winner,
                loser,
            } => {
                let (cond, text) = backbone.condition_features(context, response)?;
                PreferencePair::new(*lang, *emotion, cond, text, winner.clone(), loser.clone())
            }
            other => Err(Error::KindMismatch(format!("{}: expected preference, got {}", r.id, other.kind()))),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub seed: u64,
}

impl Default for DpoConfig {
    /// Warmup and seed follow the stage-V schedule. The schedule's learning
    /// rate drives the policy to insert prosody units everywhere within a few
    /// epochs, so a smaller rate with more, larger batches is used.
    fn default() -> Self {
        let s = StageSchedule::default_for(StageId::V);
        DpoConfig {
            beta: 0.1,
            lr: 5e-5,
            batch: 16,
            epochs: 20,
            warmup_ratio: s.warmup_ratio,
            seed: s.seed,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta {} must be positive", self.beta)));
        }
        if self.batch == 0 || self.epochs == 0 || !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("invalid DPO settings {self:?}")));
        }
        Ok(())
    }
}

fn require_nar(d: &SpeechDecoder) -> Result<()> {
    if d.mode() != DecoderMode::Nar {
        return Err(Error::Contract("CTC-DPO needs a NAR decoder".into()));
    }
    Ok(())
}

fn guidance<'a>(d: &SpeechDecoder, text: &'a Tensor) -> Option<&'a Tensor> {
    d.config.tgm.then_some(text)
}

/// `log pi(y | cond)` as a tape node: the negated CTC loss.
pub fn policy_log_likelihood(
    tape: &mut Tape,
    decoder: &SpeechDecoder,
    store: &ParamStore,
    cond: &Tensor,
    text: &Tensor,
    y: &UnitSequence,
) -> Result<Var> {
    require_nar(decoder)?;
    let lp = decoder.nar_forward(tape, store, cond, guidance(decoder, text))?;
    let nll = ctc_loss(tape, lp, y)?;
    tape.scale(nll, -1.0)
}

/// Winner and loser log-likelihoods from a single decoder pass.
fn pair_log_likelihoods(
    tape: &mut Tape,
    decoder: &SpeechDecoder,
    store: &ParamStore,
    pair: &PreferencePair,
) -> Result<(Var, Var)> {
    require_nar(decoder)?;
    let lp = decoder.nar_forward(tape, store, &pair.cond, guidance(decoder, &pair.text))?;
    let w = ctc_loss(tape, lp, &pair.winner)?;
    let l = ctc_loss(tape, lp, &pair.loser)?;
    Ok((tape.scale(w, -1.0)?, tape.scale(l, -1.0)?))
}

/// `(log pi(y_w), log pi(y_l))` as plain values.
pub fn pair_scores(decoder: &SpeechDecoder, pair: &PreferencePair) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let (w, l) = pair_log_likelihoods(&mut tape, decoder, &decoder.store, pair)?;
    Ok((tape.item(w)?, tape.item(l)?))
}

fn check_reference(reference: &SpeechDecoder) -> Result<()> {
    require_nar(reference)?;
    if reference.store.any_trainable() {
        return Err(Error::Contract("the DPO reference decoder must be frozen".into()));
    }
    Ok(())
}

/// `-ln sigmoid(beta * m)` for a margin node `m`.
fn dpo_objective(tape: &mut Tape, margin: Var, beta: f64) -> Result<Var> {
    let z = tape.scale(margin, beta)?;
    let ls = tape.log_sigmoid(z)?;
    tape.scale(ls, -1.0)
}

/// Closed form of the per-pair objective, `-ln sigmoid(beta * margin)`.
pub fn dpo_loss_value(margin: f64, beta: f64) -> f64 {
    let z = beta * margin;
    // -ln sigmoid(z) = ln(1 + e^{-z}), evaluated stably
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Per-pair CTC-DPO loss: `-ln sigmoid(beta * [(pi_w - ref_w) - (pi_l - ref_l)])`
/// in log space. Gradients reach only `policy_store`.
pub fn ctc_dpo_loss(
    tape: &mut Tape,
    policy: &SpeechDecoder,
    policy_store: &ParamStore,
    reference: &SpeechDecoder,
    pair: &PreferencePair,
    beta: f64,
) -> Result<Var> {
    check_reference(reference)?;
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta {beta} must be positive")));
    }
    let (rw, rl) = pair_scores(reference, pair)?;
    let (w, l) = pair_log_likelihoods(tape, policy, policy_store, pair)?;
    let m = margin_node(tape, w, l, rw - rl)?;
    dpo_objective(tape, m, beta)
}

fn margin_node(tape: &mut Tape, w: Var, l: Var, reference_gap: f64) -> Result<Var> {
    let d = tape.sub(w, l)?;
    let c = tape.constant(Tensor::scalar(-reference_gap));
    tape.add(d, c)
}

/// Fraction of pairs where the decoder scores the winner above the loser.
pub fn preference_accuracy(decoder: &SpeechDecoder, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("preference accuracy over an empty pair set".into()));
    }
    let mut ok = 0usize;
    for p in pairs {
        let (w, l) = pair_scores(decoder, p)?;
        ok += usize::from(w > l);
    }
    Ok(ok as f64 / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoRow {
    pub step: usize,
    pub loss: f64,
    pub mean_margin: f64,
    pub preference_accuracy: f64,
}

pub fn dpo_metrics_csv(rows: &[DpoRow]) -> String {
    let mut s = String::from("step,loss,mean_margin,preference_accuracy\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.mean_margin, r.preference_accuracy));
    }
    s
}

/// Trains `policy` against the frozen `reference` with mean loss over each
/// batch. Each logged row describes the batch before its update.
pub fn train_dpo(
    policy: &mut SpeechDecoder,
    reference: &SpeechDecoder,
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
) -> Result<Vec<DpoRow>> {
    cfg.validate()?;
    check_reference(reference)?;
    require_nar(policy)?;
    if pairs.is_empty() {
        return Err(Error::Data("no preference pairs".into()));
    }
    let gaps: Vec<f64> = pairs
        .iter()
        .map(|p| pair_scores(reference, p).map(|(w, l)| w - l))
        .collect::<Result<_>>()?;
    policy.store.set_trainable("", true);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..AdamWConfig::default()
        },
        &policy.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = pairs.len().div_ceil(cfg.batch) * cfg.epochs;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rows = Vec::with_capacity(total);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let lr = warmup_lr(cfg.lr, step, total, cfg.warmup_ratio);
            let mut stats = (0.0, 0usize);
            let mut store = std::mem::take(&mut policy.store);
            let pol: &SpeechDecoder = policy;
            let result = train_step(&mut store, &mut opt, lr, |tape, s| {
                let mut acc: Option<Var> = None;
                for &i in chunk {
                    let (w, l) = pair_log_likelihoods(tape, pol, s, &pairs[i])?;
                    let (wv, lv) = (tape.item(w)?, tape.item(l)?);
                    stats.0 += wv - lv - gaps[i];
                    stats.1 += usize::from(wv > lv);
                    let m = margin_node(tape, w, l, gaps[i])?;
                    let loss = dpo_objective(tape, m, cfg.beta)?;
                    acc = Some(match acc {
                        None => loss,
                        Some(a) => tape.add(a, loss)?,
                    });
                }
                tape.scale(acc.expect("nonempty batch"), 1.0 / chunk.len() as f64)
            });
            policy.store = store;
            let loss = result?;
            rows.push(DpoRow {
                step,
                loss,
                mean_margin: stats.0 / chunk.len() as f64,
                preference_accuracy: stats.1 as f64 / chunk.len() as f64,
            });
            step += 1;
        }
    }
    policy.store.freeze_all();
    Ok(rows)
}

/// Copy of `decoder` with every parameter frozen, for use as a reference.
pub fn frozen_reference(decoder: &SpeechDecoder) -> SpeechDecoder {
    let mut r = decoder.clone();
    r.store.freeze_all();
    r
}

/// Emotion-oracle accuracy of generated speech, overall and per language
/// and per emotion, as (correct, total) counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmotionReport {
    pub correct: usize,
    pub total: usize,
    pub per_language: BTreeMap<Language, (usize, usize)>,
    pub per_emotion: BTreeMap<EmotionLabel, (usize, usize)>,
}

impl EmotionReport {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn language_accuracy(&self, lang: Language) -> f64 {
        self.per_language
            .get(&lang)
            .map_or(0.0, |&(c, n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
    }
}

/// Generates for every pair's context and checks the oracle label against
/// the context emotion.
pub fn emotion_accuracy(decoder: &SpeechDecoder, pairs: &[PreferencePair]) -> Result<EmotionReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("emotion accuracy over an empty set".into()));
    }
    let mut r = EmotionReport::default();
    for p in pairs {
        let g = decoder.generate(&p.cond, guidance(decoder, &p.text))?;
        let hit = usize::from(emotion_oracle_classify(&g.units) == p.emotion);
        r.correct += hit;
        r.total += 1;
        let e = r.per_language.entry(p.lang).or_default();
        e.0 += hit;
        e.1 += 1;
        let e = r.per_emotion.entry(p.emotion).or_default();
        e.0 += hit;
        e.1 += 1;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::SpeechDecoderConfig;
    use crate::nn::normal_tensor;

    fn tiny(seed: u64) -> SpeechDecoder {
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
            tgm: false,
            seed,
        })
        .unwrap()
    }

    fn pair(seed: u64) -> PreferencePair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PreferencePair::new(
            Language::A,
            EmotionLabel::Happy,
            normal_tensor(&mut rng, &[2, 4], 1.0),
            normal_tensor(&mut rng, &[2, 4], 1.0),
            UnitSequence::new(vec![3, 1, 2]).unwrap(),
            UnitSequence::new(vec![1, 2]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn equal_policies_give_ln2() {
        let policy = tiny(1);
        let reference = frozen_reference(&policy);
        let mut tape = Tape::new();
        let l = ctc_dpo_loss(&mut tape, &policy, &policy.store, &reference, &pair(2), 0.1).unwrap();
        assert!((tape.item(l).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn trainable_reference_is_rejected() {
        let policy = tiny(1);
        let mut reference = policy.clone();
        reference.store.set_trainable("", true);
        let mut tape = Tape::new();
        assert!(matches!(
            ctc_dpo_loss(&mut tape, &policy, &policy.store, &reference, &pair(2), 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn closed_form_matches_tape() {
        for (m, beta) in [(1.0, 0.1), (-1.0, 0.1), (1.0, 0.2), (-1.0, 0.2), (30.0, 1.0)] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::scalar(m));
            let l = dpo_objective(&mut tape, x, beta).unwrap();
            let expect = -(1.0 / (1.0 + f64::exp(-beta * m))).ln();
            assert!((tape.item(l).unwrap() - expect).abs() < 1e-12);
            assert!((dpo_loss_value(m, beta) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_winner_and_loser_rejected() {
        let y = UnitSequence::new(vec![1]).unwrap();
        let t = Tensor::zeros(&[1, 4]);
        assert!(PreferencePair::new(Language::A, EmotionLabel::Sad, t.clone(), t, y.clone(), y).is_err());
    }
}
