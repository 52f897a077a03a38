//! Synthetic world, corpora and file formats.
//!
//! Two toy "languages" share one text vocabulary but own disjoint word
//! blocks and disjoint speech-unit subranges. Speech is a deterministic
//! unit synthesizer: every word maps to a fixed 2-3 unit code and emotion
//! is carried by prosody units. Speech and image "features" are fixed
//! random vectors per latent symbol plus Gaussian noise.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ctc::{UnitSequence, BLANK};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

pub const BOS: u32 = 0;
pub const SEP: u32 = 1;
pub const EOS: u32 = 2;
const SPECIALS: u32 = 3;

pub const ATTRIBUTES: usize = 5;
pub const VALUES_PER_ATTRIBUTE: usize = 4;
pub const QUESTION_WORDS: usize = 4;
pub const FILLER_WORDS: usize = 6;
/// Templates per language: one per (attribute, question word).
pub const TEMPLATES: usize = ATTRIBUTES * QUESTION_WORDS;
/// Question words at or above this index are never used for instruction tuning.
pub const HELD_OUT_QUESTION_WORD: usize = 3;

const VALUE_OFFSET: u32 = 0;
const ATTR_OFFSET: u32 = VALUE_OFFSET + (ATTRIBUTES * VALUES_PER_ATTRIBUTE) as u32;
const QWORD_OFFSET: u32 = ATTR_OFFSET + ATTRIBUTES as u32;
const CUE_OFFSET: u32 = QWORD_OFFSET + QUESTION_WORDS as u32;
const FILLER_OFFSET: u32 = CUE_OFFSET + 9;
const WORDS_PER_LANGUAGE: u32 = FILLER_OFFSET + FILLER_WORDS as u32;

pub const TEXT_VOCAB: usize = (SPECIALS + 2 * WORDS_PER_LANGUAGE) as usize;

/// Speech-unit vocabulary (blank included).
pub const UNIT_VOCAB: usize = 64;
const CONTENT_UNITS: u32 = 22;
const PROSODY_UNITS: u32 = 9;

/// Default fixed seed for the world tables (codes and feature vectors).
pub const DEFAULT_WORLD_SEED: u64 = 0x5eed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmotionLabel {
    AngryDisgusted,
    Fearful,
    Happy,
    Neutral,
    Other,
    Sad,
    Surprised,
    Trust,
    Anticipation,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 9] = [
        EmotionLabel::AngryDisgusted,
        EmotionLabel::Fearful,
        EmotionLabel::Happy,
        EmotionLabel::Neutral,
        EmotionLabel::Other,
        EmotionLabel::Sad,
        EmotionLabel::Surprised,
        EmotionLabel::Trust,
        EmotionLabel::Anticipation,
    ];

    pub fn index(self) -> usize {
        EmotionLabel::ALL.iter().position(|&e| e == self).unwrap_or(0)
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::AngryDisgusted => "angry_disgusted",
            EmotionLabel::Fearful => "fearful",
            EmotionLabel::Happy => "happy",
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Other => "other",
            EmotionLabel::Sad => "sad",
            EmotionLabel::Surprised => "surprised",
            EmotionLabel::Trust => "trust",
            EmotionLabel::Anticipation => "anticipation",
        }
    }

    /// Every label except neutral, in index order.
    pub fn expressive() -> impl Iterator<Item = EmotionLabel> {
        EmotionLabel::ALL.into_iter().filter(|&e| e != EmotionLabel::Neutral)
    }

    /// Prosody slot within a language's prosody range; "other" owns two.
    fn prosody_slots(self) -> &'static [u32] {
        match self {
            EmotionLabel::AngryDisgusted => &[0],
            EmotionLabel::Fearful => &[1],
            EmotionLabel::Happy => &[2],
            EmotionLabel::Neutral => &[],
            EmotionLabel::Other => &[3, 4],
            EmotionLabel::Sad => &[5],
            EmotionLabel::Surprised => &[6],
            EmotionLabel::Trust => &[7],
            EmotionLabel::Anticipation => &[8],
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EmotionLabel::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown emotion {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Language {
    #[serde(rename = "a")]
    A,
    #[serde(rename = "b")]
    B,
}

impl Language {
    pub const BOTH: [Language; 2] = [Language::A, Language::B];

    pub fn index(self) -> usize {
        match self {
            Language::A => 0,
            Language::B => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Language::A => "a",
            Language::B => "b",
        }
    }

    fn word_base(self) -> u32 {
        SPECIALS + self.index() as u32 * WORDS_PER_LANGUAGE
    }

    /// Inclusive unit id range owned by this language (content and prosody).
    pub fn unit_range(self) -> std::ops::RangeInclusive<u32> {
        match self {
            Language::A => 1..=CONTENT_UNITS + PROSODY_UNITS,
            Language::B => CONTENT_UNITS + PROSODY_UNITS + 1..=(UNIT_VOCAB as u32 - 1),
        }
    }

    /// Content units: everything in the range below the prosody block.
    fn content_units(self) -> std::ops::Range<u32> {
        *self.unit_range().start()..self.prosody_base()
    }

    fn prosody_base(self) -> u32 {
        *self.unit_range().end() + 1 - PROSODY_UNITS
    }

    /// Tokens of this language's word block.
    pub fn words(self) -> std::ops::Range<u32> {
        self.word_base()..self.word_base() + WORDS_PER_LANGUAGE
    }

    pub fn value_word(self, attribute: usize, value: usize) -> u32 {
        self.word_base() + VALUE_OFFSET + (attribute * VALUES_PER_ATTRIBUTE + value) as u32
    }

    pub fn attribute_word(self, attribute: usize) -> u32 {
        self.word_base() + ATTR_OFFSET + attribute as u32
    }

    pub fn question_word(self, q: usize) -> u32 {
        self.word_base() + QWORD_OFFSET + q as u32
    }

    pub fn emotion_cue(self, e: EmotionLabel) -> u32 {
        self.word_base() + CUE_OFFSET + e.index() as u32
    }

    pub fn filler_word(self, i: usize) -> u32 {
        self.word_base() + FILLER_OFFSET + i as u32
    }

    /// Words a spoken response may use: attribute values and fillers.
    pub fn response_words(self) -> Vec<u32> {
        let mut w: Vec<u32> = (0..ATTRIBUTES * VALUES_PER_ATTRIBUTE)
            .map(|i| self.word_base() + VALUE_OFFSET + i as u32)
            .collect();
        w.extend((0..FILLER_WORDS).map(|i| self.filler_word(i)));
        w
    }

    pub fn of_token(token: u32) -> Option<Language> {
        Language::BOTH.into_iter().find(|l| l.words().contains(&token))
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A question template: ask about `attribute` using question word `phrasing`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Template {
    pub attribute: usize,
    pub phrasing: usize,
}

impl Template {
    pub fn all() -> impl Iterator<Item = Template> {
        (0..ATTRIBUTES).flat_map(|attribute| (0..QUESTION_WORDS).map(move |phrasing| Template { attribute, phrasing }))
    }

    pub fn index(self) -> usize {
        self.attribute * QUESTION_WORDS + self.phrasing
    }

    pub fn is_held_out(self) -> bool {
        self.phrasing >= HELD_OUT_QUESTION_WORD
    }

    pub fn question(self, lang: Language) -> Vec<u32> {
        vec![lang.question_word(self.phrasing), lang.attribute_word(self.attribute)]
    }

    /// Answers restate the attribute before giving its value.
    pub fn answer(self, lang: Language, attributes: &[usize]) -> Vec<u32> {
        vec![
            lang.attribute_word(self.attribute),
            lang.value_word(self.attribute, attributes[self.attribute]),
        ]
    }
}

/// Analytic chance accuracy of a QA template set: uniform over the attribute's values.
pub fn qa_chance_accuracy() -> f64 {
    1.0 / VALUES_PER_ATTRIBUTE as f64
}

/// Width of the latent content vector every token owns.
pub const LATENT_DIM: usize = 32;

/// Fixed tables derived from the world seed: word unit codes, a latent
/// content vector per token, and the speech and image feature vectors,
/// which are fixed random linear encodings of those latents.
#[derive(Clone, Debug)]
pub struct World {
    seed: u64,
    codes: Vec<Vec<u32>>,
    latents: Vec<Vec<f64>>,
    speech_vectors: Vec<Vec<f64>>,
    image_vectors: Vec<Vec<f64>>,
    pub speech_dim: usize,
    pub image_dim: usize,
}

impl World {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut codes = vec![Vec::new(); TEXT_VOCAB];
        for lang in Language::BOTH {
            let mut used: Vec<Vec<u32>> = Vec::new();
            let units = lang.content_units();
            for w in lang.words() {
                let code = loop {
                    let len = rng.random_range(2..=3);
                    let c: Vec<u32> = (0..len).map(|_| rng.random_range(units.clone())).collect();
                    let clash = used.iter().any(|u| u.starts_with(&c) || c.starts_with(u));
                    if !clash {
                        break c;
                    }
                };
                used.push(code.clone());
                codes[w as usize] = code;
            }
        }
        let speech_dim = 48;
        let image_dim = 40;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
        let latents: Vec<Vec<f64>> = (0..TEXT_VOCAB).map(|_| draw(&mut rng, LATENT_DIM)).collect();
        // encoders: [out, LATENT_DIM] with unit-variance outputs
        let encoder = |rng: &mut ChaCha8Rng, out: usize| -> Vec<Vec<f64>> {
            let s = 1.0 / (LATENT_DIM as f64).sqrt();
            (0..out).map(|_| draw(rng, LATENT_DIM).into_iter().map(|x| x * s).collect()).collect()
        };
        let encode = |m: &[Vec<f64>], z: &[f64]| -> Vec<f64> {
            m.iter().map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum()).collect()
        };
        let speech_map = encoder(&mut rng, speech_dim);
        let image_map = encoder(&mut rng, image_dim);
        let speech_vectors = latents.iter().map(|z| encode(&speech_map, z)).collect();
        let image_vectors = (0..ATTRIBUTES * VALUES_PER_ATTRIBUTE)
            .map(|i| {
                let word = Language::A.value_word(i / VALUES_PER_ATTRIBUTE, i % VALUES_PER_ATTRIBUTE);
                encode(&image_map, &latents[word as usize])
            })
            .collect();
        World {
            seed,
            codes,
            latents,
            speech_vectors,
            image_vectors,
            speech_dim,
            image_dim,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `[TEXT_VOCAB, LATENT_DIM]` table of token latents.
    pub fn latent_table(&self) -> Tensor {
        Tensor::new(vec![TEXT_VOCAB, LATENT_DIM], self.latents.concat()).expect("latent table shape")
    }

    pub fn code(&self, token: u32) -> Option<&[u32]> {
        self.codes.get(token as usize).filter(|c| !c.is_empty()).map(Vec::as_slice)
    }

    /// Toy speech synthesizer. Every fourth word (starting at the first)
    /// is preceded by the emotion's prosody unit; neutral adds none.
    pub fn synthesize_speech_units(&self, tokens: &[u32], emotion: EmotionLabel, lang: Language) -> Result<UnitSequence> {
        let slots = emotion.prosody_slots();
        let mut units = Vec::with_capacity(tokens.len() * 4);
        for (i, &tok) in tokens.iter().enumerate() {
            if Language::of_token(tok) != Some(lang) {
                return Err(Error::Data(format!("token {tok} is not a {lang} word")));
            }
            if i % 4 == 0 && !slots.is_empty() {
                units.push(lang.prosody_base() + slots[(i / 4) % slots.len()]);
            }
            units.extend_from_slice(self.code(tok).expect("every word has a code"));
        }
        UnitSequence::new(units)
    }

    /// Drops prosody units and parses the rest back into words.
    pub fn units_to_text(&self, units: &UnitSequence) -> Result<Vec<u32>> {
        let content: Vec<u32> = units.as_slice().iter().copied().filter(|&u| prosody_emotion(u).is_none()).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < content.len() {
            let hit = [2usize, 3].into_iter().find_map(|len| {
                let piece = content.get(i..i + len)?;
                let tok = self.codes.iter().position(|c| c.as_slice() == piece)?;
                Some((tok as u32, len))
            });
            match hit {
                Some((tok, len)) => {
                    out.push(tok);
                    i += len;
                }
                None => return Err(Error::Data(format!("no word code at unit offset {i}"))),
            }
        }
        Ok(out)
    }

    /// One noisy feature frame per token.
    pub fn speech_features<R: Rng>(&self, tokens: &[u32], noise: f64, rng: &mut R) -> Result<Tensor> {
        let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let mut data = Vec::with_capacity(tokens.len() * self.speech_dim);
        for &t in tokens {
            let v = self
                .speech_vectors
                .get(t as usize)
                .ok_or_else(|| Error::Data(format!("token {t} outside text vocabulary")))?;
            data.extend(v.iter().map(|x| x + normal.sample(rng)));
        }
        Tensor::new(vec![tokens.len(), self.speech_dim], data)
    }

    /// One noisy patch per attribute.
    pub fn image_features<R: Rng>(&self, attributes: &[usize], noise: f64, rng: &mut R) -> Result<Tensor> {
        if attributes.len() != ATTRIBUTES || attributes.iter().any(|&v| v >= VALUES_PER_ATTRIBUTE) {
            return Err(Error::Data(format!("bad attribute vector {attributes:?}")));
        }
        let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let mut data = Vec::with_capacity(ATTRIBUTES * self.image_dim);
        for (a, &v) in attributes.iter().enumerate() {
            let base = &self.image_vectors[a * VALUES_PER_ATTRIBUTE + v];
            data.extend(base.iter().map(|x| x + normal.sample(rng)));
        }
        Tensor::new(vec![ATTRIBUTES, self.image_dim], data)
    }

    /// Caption in language A: the value word of every attribute in order.
    pub fn caption(&self, attributes: &[usize]) -> Vec<u32> {
        attributes
            .iter()
            .enumerate()
            .map(|(a, &v)| Language::A.value_word(a, v))
            .collect()
    }
}

/// Emotion owning a prosody unit id, if any.
pub fn prosody_emotion(unit: u32) -> Option<EmotionLabel> {
    for lang in Language::BOTH {
        let base = lang.prosody_base();
        if (base..base + PROSODY_UNITS).contains(&unit) {
            let slot = unit - base;
            return EmotionLabel::ALL.into_iter().find(|e| e.prosody_slots().contains(&slot));
        }
    }
    None
}

/// Emotion classifier verdict; `tie` is set when the vote was split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmotionVerdict {
    pub label: EmotionLabel,
    pub tie: bool,
}

/// Majority vote over prosody units; none present means neutral, ties go
/// to the smallest label index.
pub fn emotion_oracle_verdict(units: &UnitSequence) -> EmotionVerdict {
    let mut votes = [0usize; 9];
    for &u in units.as_slice() {
        if let Some(e) = prosody_emotion(u) {
            votes[e.index()] += 1;
        }
    }
    let best = votes.iter().copied().max().unwrap_or(0);
    if best == 0 {
        return EmotionVerdict {
            label: EmotionLabel::Neutral,
            tie: false,
        };
    }
    let winners: Vec<usize> = (0..9).filter(|&i| votes[i] == best).collect();
    EmotionVerdict {
        label: EmotionLabel::ALL[winners[0]],
        tie: winners.len() > 1,
    }
}

pub fn emotion_oracle_classify(units: &UnitSequence) -> EmotionLabel {
    emotion_oracle_verdict(units).label
}

/// Levenshtein distance between unit sequences divided by the reference length.
pub fn unit_error_rate(reference: &UnitSequence, hypothesis: &UnitSequence) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("unit error rate needs a nonempty reference".into()));
    }
    Ok(edit_distance(reference.as_slice(), hypothesis.as_slice()) as f64 / reference.len() as f64)
}

pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest unit sequence a response of `words` words can synthesize to.
pub fn max_units_for(words: usize) -> usize {
    3 * words + words.div_ceil(4)
}

/// Generator settings for every corpus role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub world_seed: u64,
    /// Speech-text pairs (stage I).
    pub speech_text: usize,
    /// Image-caption pairs (stage II).
    pub image_text: usize,
    /// Image instruction samples (stage III).
    pub instruct: usize,
    /// Supervised speech-generation samples (decoder training).
    pub supervised: usize,
    /// Emotion preference pairs.
    pub preference: usize,
    /// Fraction of language-A samples in the supervised corpus.
    pub lang_a_fraction: f64,
    pub lengths_a: (usize, usize),
    pub lengths_b: (usize, usize),
    pub noise: f64,
    /// Probability that a supervised target actually carries its context's emotion.
    pub emotion_render_rate: f64,
    /// Decoder upsampling factor the corpora must be feasible for.
    pub upsample: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            world_seed: DEFAULT_WORLD_SEED,
            speech_text: 512,
            image_text: 512,
            instruct: 128,
            supervised: 512,
            preference: 64,
            lang_a_fraction: 0.5,
            lengths_a: (2, 6),
            lengths_b: (4, 8),
            noise: 0.1,
            emotion_render_rate: 0.75,
            upsample: 8,
        }
    }
}

impl CorpusSpec {
    pub fn lengths(&self, lang: Language) -> (usize, usize) {
        match lang {
            Language::A => self.lengths_a,
            Language::B => self.lengths_b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lang_a_fraction) {
            return Err(Error::Config(format!("lang_a_fraction {} outside [0, 1]", self.lang_a_fraction)));
        }
        if !(0.0..=1.0).contains(&self.emotion_render_rate) {
            return Err(Error::Config(format!(
                "emotion_render_rate {} outside [0, 1]",
                self.emotion_render_rate
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be finite and nonnegative", self.noise)));
        }
        if self.speech_text < 4 * self.instruct || self.image_text < 4 * self.instruct {
            return Err(Error::Config(format!(
                "alignment corpora must dwarf the instruction set: speech_text {} and image_text {} must each be >= 4 x instruct {}",
                self.speech_text, self.image_text, self.instruct
            )));
        }
        for lang in Language::BOTH {
            let (lo, hi) = self.lengths(lang);
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("lengths_{lang} ({lo}, {hi}) must satisfy 1 <= min <= max")));
            }
            for n in lo..=hi {
                let need = 2 * max_units_for(n) + 1;
                if self.upsample * n < need {
                    return Err(Error::Config(format!(
                        "feasibility constraint upsample * T_c >= 2 * |y| + 1 fails for {lang} responses of {n} words: {} * {n} < {need}",
                        self.upsample
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Feature matrix stored as base64 little-endian f32.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBlob {
    pub shape: Vec<usize>,
    pub f32le: String,
}

impl FeatureBlob {
    pub fn encode(t: &Tensor) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * 4);
        for &x in t.data() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        FeatureBlob {
            shape: t.shape().to_vec(),
            f32le: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.f32le)
            .map_err(|e| Error::Data(format!("bad feature payload: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Data("feature payload is not a whole number of f32".into()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    SpeechText {
        lang: Language,
        tokens: Vec<u32>,
        features: FeatureBlob,
    },
    ImageText {
        attributes: Vec<usize>,
        caption: Vec<u32>,
        features: FeatureBlob,
    },
    Instruct {
        lang: Language,
        attributes: Vec<usize>,
        template: Template,
        question: Vec<u32>,
        answer: Vec<u32>,
        features: FeatureBlob,
    },
    SupervisedUnits {
        lang: Language,
        emotion: EmotionLabel,
        context: Vec<u32>,
        response: Vec<u32>,
        units: UnitSequence,
    },
    Preference {
        lang: Language,
        emotion: EmotionLabel,
        context: Vec<u32>,
        response: Vec<u32>,
        winner: UnitSequence,
        loser: UnitSequence,
    },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::SpeechText { .. } => "speech_text",
            Payload::ImageText { .. } => "image_text",
            Payload::Instruct { .. } => "instruct",
            Payload::SupervisedUnits { .. } => "supervised_units",
            Payload::Preference { .. } => "preference",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub schema: u32,
    pub id: String,
    #[serde(flatten)]
    pub payload: Payload,
}

impl SampleRecord {
    pub fn new(id: String, payload: Payload) -> Self {
        SampleRecord {
            schema: SCHEMA_VERSION,
            id,
            payload,
        }
    }

    /// Schema and vocabulary checks.
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Data(format!("{}: unsupported schema {}", self.id, self.schema)));
        }
        let units_ok = |u: &UnitSequence| u.as_slice().iter().all(|&x| x != BLANK && (x as usize) < UNIT_VOCAB);
        let text_ok = |t: &[u32]| t.iter().all(|&x| (x as usize) < TEXT_VOCAB);
        let ok = match &self.payload {
            Payload::SpeechText { tokens, features, .. } => text_ok(tokens) && features.shape.first() == Some(&tokens.len()),
            Payload::ImageText { attributes, caption, .. } => attributes.len() == ATTRIBUTES && text_ok(caption),
            Payload::Instruct { question, answer, .. } => text_ok(question) && !answer.is_empty() && text_ok(answer),
            Payload::SupervisedUnits { context, response, units, .. } => {
                text_ok(context) && text_ok(response) && units_ok(units)
            }
            Payload::Preference { context, response, winner, loser, .. } => {
                text_ok(context) && text_ok(response) && units_ok(winner) && units_ok(loser) && winner != loser
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!("{}: {} record fails schema checks", self.id, self.payload.kind())))
        }
    }
}

pub fn write_jsonl<W: Write>(w: &mut W, records: &[SampleRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

fn role_rng(seed: u64, role: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ role.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn random_attributes<R: Rng>(rng: &mut R) -> Vec<usize> {
    (0..ATTRIBUTES).map(|_| rng.random_range(0..VALUES_PER_ATTRIBUTE)).collect()
}

/// Context that precedes a spoken response: the emotion cue and a question.
pub fn dialogue_context(lang: Language, emotion: EmotionLabel, template: Template) -> Vec<u32> {
    let mut c = vec![BOS, lang.emotion_cue(emotion)];
    c.extend(template.question(lang));
    c.push(SEP);
    c
}

fn random_response<R: Rng>(spec: &CorpusSpec, lang: Language, rng: &mut R) -> Vec<u32> {
    let (lo, hi) = spec.lengths(lang);
    let n = rng.random_range(lo..=hi);
    let words = lang.response_words();
    (0..n).map(|_| words[rng.random_range(0..words.len())]).collect()
}

/// Speech-text pairs over random word strings and questions of both languages.
pub fn gen_speech_text_corpus(spec: &CorpusSpec, world: &World) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    let mut rng = role_rng(spec.seed, 1);
    let mut out = Vec::with_capacity(spec.speech_text);
    for i in 0..spec.speech_text {
        let lang = if rng.random_bool(0.5) { Language::A } else { Language::B };
        let tokens: Vec<u32> = if rng.random_bool(0.5) {
            let t = Template::all().nth(rng.random_range(0..TEMPLATES)).expect("template");
            t.question(lang)
        } else {
            let n = rng.random_range(2..=6);
            let words: Vec<u32> = lang.words().collect();
            (0..n).map(|_| words[rng.random_range(0..words.len())]).collect()
        };
        let features = FeatureBlob::encode(&world.speech_features(&tokens, spec.noise, &mut rng)?);
        out.push(SampleRecord::new(format!("st-{i:06}"), Payload::SpeechText { lang, tokens, features }));
    }
    Ok(out)
}

pub fn gen_image_text_corpus(spec: &CorpusSpec, world: &World) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    let mut rng = role_rng(spec.seed, 2);
    let mut out = Vec::with_capacity(spec.image_text);
    for i in 0..spec.image_text {
        let attributes = random_attributes(&mut rng);
        let caption = world.caption(&attributes);
        let features = FeatureBlob::encode(&world.image_features(&attributes, spec.noise, &mut rng)?);
        out.push(SampleRecord::new(
            format!("it-{i:06}"),
            Payload::ImageText {
                attributes,
                caption,
                features,
            },
        ));
    }
    Ok(out)
}

/// Image instruction samples; held-out question phrasings never appear.
pub fn gen_instruct_corpus(spec: &CorpusSpec, world: &World) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    let mut rng = role_rng(spec.seed, 3);
    let seen: Vec<Template> = Template::all().filter(|t| !t.is_held_out()).collect();
    let mut out = Vec::with_capacity(spec.instruct);
    for i in 0..spec.instruct {
        let lang = if i % 2 == 0 { Language::A } else { Language::B };
        let attributes = random_attributes(&mut rng);
        let template = seen[rng.random_range(0..seen.len())];
        let question = template.question(lang);
        let answer = template.answer(lang, &attributes);
        let features = FeatureBlob::encode(&world.image_features(&attributes, spec.noise, &mut rng)?);
        out.push(SampleRecord::new(
            format!("in-{i:06}"),
            Payload::Instruct {
                lang,
                attributes,
                template,
                question,
                answer,
                features,
            },
        ));
    }
    Ok(out)
}

/// Supervised speech-generation samples. A target carries its context's
/// emotion with probability `emotion_render_rate`, otherwise it is neutral.
pub fn gen_supervised_corpus(spec: &CorpusSpec, world: &World) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    let mut rng = role_rng(spec.seed, 4);
    let mut out = Vec::with_capacity(spec.supervised);
    let mut dropped = 0usize;
    for i in 0..spec.supervised {
        let lang = if rng.random_bool(spec.lang_a_fraction) { Language::A } else { Language::B };
        let emotion = EmotionLabel::ALL[rng.random_range(0..9)];
        let template = Template::all().nth(rng.random_range(0..TEMPLATES)).expect("template");
        let response = random_response(spec, lang, &mut rng);
        let rendered = if rng.random_bool(spec.emotion_render_rate) { emotion } else { EmotionLabel::Neutral };
        let units = world.synthesize_speech_units(&response, rendered, lang)?;
        if 2 * units.len() + 1 > spec.upsample * response.len() {
            dropped += 1;
            continue;
        }
        out.push(SampleRecord::new(
            format!("su-{i:06}"),
            Payload::SupervisedUnits {
                lang,
                emotion,
                context: dialogue_context(lang, emotion, template),
                response,
                units,
            },
        ));
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} infeasible supervised samples");
    }
    Ok(out)
}

/// Emotion preference pairs: winner carries the context emotion, loser is
/// the neutral synthesis of the same text. Emotions cycle evenly over the
/// eight expressive labels and languages alternate.
pub fn gen_preference_corpus(spec: &CorpusSpec, world: &World) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    let mut rng = role_rng(spec.seed, 5);
    let expressive: Vec<EmotionLabel> = EmotionLabel::expressive().collect();
    let mut schedule: Vec<(Language, EmotionLabel)> = (0..spec.preference)
        .map(|i| (Language::BOTH[i % 2], expressive[(i / 2) % expressive.len()]))
        .collect();
    schedule.shuffle(&mut rng);
    let mut out = Vec::with_capacity(spec.preference);
    for (i, (lang, emotion)) in schedule.into_iter().enumerate() {
        let template = Template::all().nth(rng.random_range(0..TEMPLATES)).expect("template");
        let response = random_response(spec, lang, &mut rng);
        let (winner, loser) = preference_pair_units(world, &response, emotion, lang)?;
        out.push(SampleRecord::new(
            format!("pp-{i:06}"),
            Payload::Preference {
                lang,
                emotion,
                context: dialogue_context(lang, emotion, template),
                response,
                winner,
                loser,
            },
        ));
    }
    Ok(out)
}

/// Winner/loser unit sequences for one response text.
pub fn preference_pair_units(
    world: &World,
    response: &[u32],
    emotion: EmotionLabel,
    lang: Language,
) -> Result<(UnitSequence, UnitSequence)> {
    if emotion == EmotionLabel::Neutral {
        return Err(Error::Data("a preference winner cannot be neutral".into()));
    }
    Ok((
        world.synthesize_speech_units(response, emotion, lang)?,
        world.synthesize_speech_units(response, EmotionLabel::Neutral, lang)?,
    ))
}

/// Every corpus role, keyed by file stem.
pub fn gen_all(spec: &CorpusSpec) -> Result<BTreeMap<&'static str, Vec<SampleRecord>>> {
    spec.validate()?;
    let world = World::new(spec.world_seed);
    let mut out = BTreeMap::new();
    out.insert("speech_text", gen_speech_text_corpus(spec, &world)?);
    out.insert("image_text", gen_image_text_corpus(spec, &world)?);
    out.insert("instruct", gen_instruct_corpus(spec, &world)?);
    out.insert("supervised", gen_supervised_corpus(spec, &world)?);
    out.insert("preference", gen_preference_corpus(spec, &world)?);
    Ok(out)
}

/// Counts per kind, language and emotion.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema: u32,
    pub counts: BTreeMap<String, usize>,
    pub languages: BTreeMap<String, usize>,
    pub emotions: BTreeMap<String, usize>,
}

impl CorpusManifest {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a SampleRecord>) -> Self {
        let mut m = CorpusManifest {
            schema: SCHEMA_VERSION,
            ..Default::default()
        };
        for r in records {
            *m.counts.entry(r.payload.kind().to_string()).or_default() += 1;
            let (lang, emotion) = match &r.payload {
                Payload::SpeechText { lang, .. } | Payload::Instruct { lang, .. } => (Some(*lang), None),
                Payload::ImageText { .. } => (Some(Language::A), None),
                Payload::SupervisedUnits { lang, emotion, .. } | Payload::Preference { lang, emotion, .. } => {
                    (Some(*lang), Some(*emotion))
                }
            };
            if let Some(l) = lang {
                *m.languages.entry(format!("{}/{}", r.payload.kind(), l)).or_default() += 1;
            }
            if let Some(e) = emotion {
                *m.emotions.entry(format!("{}/{}", r.payload.kind(), e)).or_default() += 1;
            }
        }
        m
    }
}
