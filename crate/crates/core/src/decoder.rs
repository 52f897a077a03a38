//! Speech-unit decoder: a text-guided fusion of backbone states, a
//! mixture-of-experts front layer and a small transformer stack, run either
//! non-autoregressively with CTC or autoregressively with next-unit
//! prediction.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{Backbone, StageId, StageSchedule};
use crate::ctc::{ctc_loss, greedy_decode, UnitSequence};
use crate::data::{self, EmotionLabel, Language, Payload, SampleRecord, UNIT_VOCAB};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, DecoderBlock, LayerNorm, Linear, MoELayer, TextGuidedModule};
use crate::tensor::{load_checkpoint, save_checkpoint, train_step, warmup_lr, AdamW, AdamWConfig, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderMode {
    Ar,
    Nar,
}

impl DecoderMode {
    pub fn name(self) -> &'static str {
        match self {
            DecoderMode::Ar => "ar",
            DecoderMode::Nar => "nar",
        }
    }
}

impl fmt::Display for DecoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecoderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ar" => Ok(DecoderMode::Ar),
            "nar" => Ok(DecoderMode::Nar),
            _ => Err(Error::Config(format!("unknown decoder mode {s:?} (expected ar or nar)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeechDecoderConfig {
    pub mode: DecoderMode,
    pub layers: usize,
    pub experts: usize,
    pub dim: usize,
    pub heads: usize,
    pub vocab_nar: usize,
    pub vocab_ar: usize,
    pub upsample: usize,
    /// Longest AR output before generation is cut off.
    pub max_units: usize,
    /// Longest conditioning sequence.
    pub max_context: usize,
    pub tgm: bool,
    pub seed: u64,
}

impl Default for SpeechDecoderConfig {
    fn default() -> Self {
        SpeechDecoderConfig {
            mode: DecoderMode::Nar,
            layers: 2,
            experts: 4,
            dim: 32,
            heads: 4,
            vocab_nar: UNIT_VOCAB,
            vocab_ar: 256,
            upsample: 8,
            max_units: 32,
            max_context: 16,
            tgm: true,
            seed: 0,
        }
    }
}

/// Optimizer settings for decoder training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderTrainOptions {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub seed: u64,
}

impl Default for DecoderTrainOptions {
    /// Warmup and seed follow the stage-IV schedule. The schedule's learning
    /// rate leaves the decoder on its initial plateau at desk scale, so the
    /// rate and epoch count are raised.
    fn default() -> Self {
        let s = StageSchedule::default_for(StageId::IV);
        DecoderTrainOptions {
            lr: 2e-3,
            batch: s.batch,
            epochs: 40,
            warmup_ratio: s.warmup_ratio,
            seed: s.seed,
        }
    }
}

impl SpeechDecoderConfig {
    /// End-of-speech id in AR mode.
    pub fn eos(&self) -> u32 {
        (self.vocab_ar - 1) as u32
    }

    pub fn vocab(&self) -> usize {
        match self.mode {
            DecoderMode::Ar => self.vocab_ar,
            DecoderMode::Nar => self.vocab_nar,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.experts == 0 || self.dim == 0 || self.heads == 0 {
            return bad(format!("layers, experts, dim and heads must be positive: {self:?}"));
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.vocab_nar < 2 {
            return bad(format!("vocab_nar {} leaves no unit besides blank", self.vocab_nar));
        }
        if self.vocab_ar <= self.vocab_nar {
            return bad(format!("vocab_ar {} must exceed vocab_nar {}", self.vocab_ar, self.vocab_nar));
        }
        if self.upsample < 2 {
            return bad(format!("upsample factor {} must be at least 2", self.upsample));
        }
        if self.max_units == 0 || self.max_context == 0 {
            return bad("max_units and max_context must be positive".into());
        }
        Ok(())
    }

    /// Parses a `key=value` file. Blank lines and `#` comments are ignored;
    /// `lr`, `batch`, `epochs` and `warmup` set training options.
    pub fn parse(text: &str) -> Result<(SpeechDecoderConfig, DecoderTrainOptions)> {
        let mut c = SpeechDecoderConfig::default();
        let mut t = DecoderTrainOptions::default();
        let mut vocab = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| Error::Config(format!("line {}: {k} expects an integer, got {v:?}", n + 1)))
            };
            match k {
                "mode" => c.mode = v.parse()?,
                "layers" => c.layers = num(v)?,
                "experts" => c.experts = num(v)?,
                "dim" => c.dim = num(v)?,
                "heads" => c.heads = num(v)?,
                "vocab" => vocab = Some(num(v)?),
                "vocab_nar" => c.vocab_nar = num(v)?,
                "vocab_ar" => c.vocab_ar = num(v)?,
                "lambda" | "upsample" => c.upsample = num(v)?,
                "max_units" => c.max_units = num(v)?,
                "max_context" => c.max_context = num(v)?,
                "tgm" => {
                    c.tgm = match v {
                        "on" | "true" | "1" => true,
                        "off" | "false" | "0" => false,
                        _ => return Err(Error::Config(format!("line {}: tgm expects on or off, got {v:?}", n + 1))),
                    }
                }
                "seed" => c.seed = v.parse().map_err(|_| Error::Config(format!("line {}: bad seed {v:?}", n + 1)))?,
                "lr" => t.lr = v.parse().map_err(|_| Error::Config(format!("line {}: bad lr {v:?}", n + 1)))?,
                "batch" => t.batch = num(v)?,
                "epochs" => t.epochs = num(v)?,
                "warmup" => {
                    t.warmup_ratio = v.parse().map_err(|_| Error::Config(format!("line {}: bad warmup {v:?}", n + 1)))?
                }
                _ => return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1))),
            }
        }
        // `vocab` names the vocabulary of the configured mode.
        if let Some(v) = vocab {
            match c.mode {
                DecoderMode::Ar => c.vocab_ar = v,
                DecoderMode::Nar => c.vocab_nar = v,
            }
        }
        c.validate()?;
        if t.batch == 0 || t.epochs == 0 || !(t.lr > 0.0) || !(0.0..=1.0).contains(&t.warmup_ratio) {
            return Err(Error::Config(format!("invalid training options {t:?}")));
        }
        Ok((c, t))
    }

    pub fn to_kv(&self, train: Option<&DecoderTrainOptions>) -> String {
        let mut s = format!(
            "mode={}\nlayers={}\nexperts={}\ndim={}\nheads={}\nvocab_nar={}\nvocab_ar={}\nlambda={}\nmax_units={}\nmax_context={}\ntgm={}\nseed={}\n",
            self.mode,
            self.layers,
            self.experts,
            self.dim,
            self.heads,
            self.vocab_nar,
            self.vocab_ar,
            self.upsample,
            self.max_units,
            self.max_context,
            if self.tgm { "on" } else { "off" },
            self.seed
        );
        if let Some(t) = train {
            s.push_str(&format!(
                "lr={}\nbatch={}\nepochs={}\nwarmup={}\n",
                t.lr, t.batch, t.epochs, t.warmup_ratio
            ));
        }
        s
    }
}

/// Result of one generation call.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub units: UnitSequence,
    /// Sequential decoder forward passes used.
    pub steps: usize,
    /// AR only: the cap was reached before end-of-speech.
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct SpeechDecoder {
    pub config: SpeechDecoderConfig,
    pub store: ParamStore,
    tgm: Option<TextGuidedModule>,
    tgm_pos: Option<ParamId>,
    moe: Option<MoELayer>,
    cond_proj: Option<Linear>,
    unit_emb: Option<ParamId>,
    offset: Option<ParamId>,
    pos: ParamId,
    blocks: Vec<DecoderBlock>,
    ln_f: LayerNorm,
    head: Linear,
}

impl SpeechDecoder {
    pub fn new(config: SpeechDecoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let (tgm, tgm_pos) = if config.tgm {
            (
                Some(TextGuidedModule::new(&mut store, "dec.tgm", d, &mut rng)?),
                Some(store.add("dec.tgm.pos", normal_tensor(&mut rng, &[config.max_context, d], 1.0))?),
            )
        } else {
            (None, None)
        };
        let (moe, cond_proj, unit_emb, offset, positions) = match config.mode {
            DecoderMode::Nar => (
                Some(MoELayer::new(&mut store, "dec.moe", d, config.experts, &mut rng)?),
                None,
                None,
                Some(store.add("dec.offset", normal_tensor(&mut rng, &[config.upsample, d], 0.1))?),
                config.upsample * config.max_context,
            ),
            DecoderMode::Ar => (
                None,
                Some(Linear::new(&mut store, "dec.cond_proj", d, d, true, &mut rng)?),
                Some(store.add("dec.unit_emb", normal_tensor(&mut rng, &[config.vocab_ar, d], 1.0))?),
                None,
                config.max_context + config.max_units,
            ),
        };
        let pos = store.add("dec.pos", normal_tensor(&mut rng, &[positions, d], 0.1))?;
        let blocks = (0..config.layers)
            .map(|i| DecoderBlock::new(&mut store, &format!("dec.block{i}"), d, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut store, "dec.ln_f", d)?;
        let head = Linear::new(&mut store, "dec.head", d, config.vocab(), true, &mut rng)?;
        Ok(SpeechDecoder {
            config,
            store,
            tgm,
            tgm_pos,
            moe,
            cond_proj,
            unit_emb,
            offset,
            pos,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn mode(&self) -> DecoderMode {
        self.config.mode
    }

    fn require(&self, mode: DecoderMode, op: &str) -> Result<()> {
        if self.config.mode != mode {
            return Err(Error::Contract(format!("{op} needs a {mode} decoder, this one is {}", self.config.mode)));
        }
        Ok(())
    }

    fn check_cond(&self, cond: &Tensor, text: Option<&Tensor>) -> Result<()> {
        if cond.rank() != 2 || cond.last_dim() != self.config.dim || cond.rows() == 0 {
            return Err(Error::dim(
                "decoder",
                format!("condition must be [T_c >= 1, {}], got {:?}", self.config.dim, cond.shape()),
            ));
        }
        if cond.rows() > self.config.max_context {
            return Err(Error::dim(
                "decoder",
                format!("{} condition rows exceed max_context {}", cond.rows(), self.config.max_context),
            ));
        }
        if !cond.is_finite() {
            return Err(Error::domain("decoder", "non-finite condition features"));
        }
        if let Some(t) = text {
            if t.rank() != 2 || t.last_dim() != self.config.dim {
                return Err(Error::dim("decoder", format!("text embeddings must be [n, {}]", self.config.dim)));
            }
        }
        Ok(())
    }

    /// Text-guided fusion of the condition, when the module is present and
    /// text is supplied. Both sides get the same learned position rows so
    /// the cross-attention can line condition steps up with words.
    fn fused(&self, tape: &mut Tape, store: &ParamStore, cond: &Tensor, text: Option<&Tensor>) -> Result<Var> {
        let x = tape.constant(cond.clone());
        let (Some(tgm), Some(pos), Some(t)) = (&self.tgm, self.tgm_pos, text) else {
            return Ok(x);
        };
        if t.rows() == 0 || t.rows() > self.config.max_context {
            return Err(Error::dim("decoder", format!("{} text rows (max_context {})", t.rows(), self.config.max_context)));
        }
        if t.rows() > cond.rows() {
            return Err(Error::dim("decoder", format!("{} text rows for {} condition rows", t.rows(), cond.rows())));
        }
        // the text is the response, which fills the last condition rows
        let start = cond.rows() - t.rows();
        let table = tape.param(store, pos);
        let pc = tape.gather_rows(table, &(0..cond.rows()).collect::<Vec<_>>())?;
        let pt = tape.gather_rows(table, &(start..cond.rows()).collect::<Vec<_>>())?;
        let q = tape.add(x, pc)?;
        let t = tape.constant(t.clone());
        let k = tape.add(t, pt)?;
        let fused = tgm.forward(tape, store, q, Some(k))?;
        // keep the residual on the raw condition
        let delta = tape.sub(fused, q)?;
        tape.add(x, delta)
    }

    fn stack(&self, tape: &mut Tape, store: &ParamStore, mut x: Var, causal: bool) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(tape, store, x, causal)?;
        }
        let x = self.ln_f.forward(tape, store, x)?;
        let logits = self.head.forward(tape, store, x)?;
        tape.log_softmax_last_dim(logits)
    }

    /// NAR log-probabilities `[upsample * T_c, vocab_nar]`.
    pub fn nar_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cond: &Tensor,
        text: Option<&Tensor>,
    ) -> Result<Var> {
        self.require(DecoderMode::Nar, "nar_forward")?;
        self.check_cond(cond, text)?;
        let moe = self.moe.as_ref().expect("nar decoder has a moe layer");
        let offset = self.offset.expect("nar decoder has offsets");
        let lam = self.config.upsample;
        let x = self.fused(tape, store, cond, text)?;
        let m = moe.forward(tape, store, x)?;
        let x = tape.add(x, m)?;
        let frames = lam * cond.rows();
        let up: Vec<usize> = (0..frames).map(|t| t / lam).collect();
        let x = tape.gather_rows(x, &up)?;
        let pos = tape.param(store, self.pos);
        let p = tape.gather_rows(pos, &(0..frames).collect::<Vec<_>>())?;
        let off = tape.param(store, offset);
        let o = tape.gather_rows(off, &(0..frames).map(|t| t % lam).collect::<Vec<_>>())?;
        let x = tape.add(x, p)?;
        let x = tape.add(x, o)?;
        self.stack(tape, store, x, false)
    }

    /// AR log-probabilities for every position of `cond ++ prefix`,
    /// `[T_c + |prefix|, vocab_ar]`. Row `T_c - 1 + k` predicts unit `k`.
    pub fn ar_logits_all(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cond: &Tensor,
        text: Option<&Tensor>,
        prefix: &[u32],
    ) -> Result<Var> {
        self.require(DecoderMode::Ar, "ar_forward")?;
        self.check_cond(cond, text)?;
        if prefix.len() > self.config.max_units {
            return Err(Error::Contract(format!(
                "generation cap: {} previous units with max_units {}",
                prefix.len(),
                self.config.max_units
            )));
        }
        if let Some(&bad) = prefix.iter().find(|&&u| u as usize >= self.config.vocab_ar) {
            return Err(Error::dim("decoder", format!("unit {bad} outside AR vocabulary {}", self.config.vocab_ar)));
        }
        let proj = self.cond_proj.as_ref().expect("ar decoder has a condition projection");
        let x = self.fused(tape, store, cond, text)?;
        let mut x = proj.forward(tape, store, x)?;
        if !prefix.is_empty() {
            let table = tape.param(store, self.unit_emb.expect("ar decoder has unit embeddings"));
            let ids: Vec<usize> = prefix.iter().map(|&u| u as usize).collect();
            let e = tape.embedding_lookup(table, &ids)?;
            x = tape.concat_rows(&[x, e])?;
        }
        let n = cond.rows() + prefix.len();
        let pos = tape.param(store, self.pos);
        let p = tape.gather_rows(pos, &(0..n).collect::<Vec<_>>())?;
        let x = tape.add(x, p)?;
        self.stack(tape, store, x, true)
    }

    /// Next-unit log-probabilities after `prev`, including the end-of-speech id.
    pub fn ar_forward(&self, cond: &Tensor, text: Option<&Tensor>, prev: &UnitSequence) -> Result<Tensor> {
        if prev.len() >= self.config.max_units {
            return Err(Error::Contract(format!(
                "generation cap: {} previous units reach max_units {}",
                prev.len(),
                self.config.max_units
            )));
        }
        let mut tape = Tape::new();
        let lp = self.ar_logits_all(&mut tape, &self.store, cond, text, prev.as_slice())?;
        let v = tape.value(lp);
        Tensor::new(vec![self.config.vocab_ar], v.row(v.rows() - 1).to_vec())
    }

    pub fn nar_log_probs(&self, cond: &Tensor, text: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let lp = self.nar_forward(&mut tape, &self.store, cond, text)?;
        Ok(tape.value(lp).clone())
    }

    /// One parallel pass and a best-path decode.
    pub fn nar_generate(&self, cond: &Tensor, text: Option<&Tensor>) -> Result<Generation> {
        let lp = self.nar_log_probs(cond, text)?;
        let (units, _) = greedy_decode(&lp);
        Ok(Generation {
            units,
            steps: 1,
            truncated: false,
        })
    }

    /// Greedy sequential decoding until end-of-speech or `max_len` units.
    /// The blank id never appears in AR outputs and is excluded from the argmax.
    pub fn ar_generate(&self, cond: &Tensor, text: Option<&Tensor>, max_len: usize) -> Result<Generation> {
        self.require(DecoderMode::Ar, "ar_generate")?;
        let cap = max_len.min(self.config.max_units);
        let eos = self.config.eos();
        let mut out: Vec<u32> = Vec::new();
        let mut steps = 0;
        loop {
            if out.len() >= cap {
                return Ok(Generation {
                    units: UnitSequence::new(out)?,
                    steps,
                    truncated: true,
                });
            }
            let lp = self.ar_forward(cond, text, &UnitSequence::new(out.clone())?)?;
            steps += 1;
            let row = lp.data();
            let mut arg = 1;
            for k in 2..row.len() {
                if row[k] > row[arg] {
                    arg = k;
                }
            }
            if arg as u32 == eos {
                return Ok(Generation {
                    units: UnitSequence::new(out)?,
                    steps,
                    truncated: false,
                });
            }
            out.push(arg as u32);
        }
    }

    /// Mode-dispatched generation with the configured cap.
    pub fn generate(&self, cond: &Tensor, text: Option<&Tensor>) -> Result<Generation> {
        match self.config.mode {
            DecoderMode::Nar => self.nar_generate(cond, text),
            DecoderMode::Ar => self.ar_generate(cond, text, self.config.max_units),
        }
    }

    /// Training loss of one example: CTC negative log-likelihood (NAR) or
    /// mean next-unit cross-entropy including end-of-speech (AR).
    pub fn example_loss(&self, tape: &mut Tape, store: &ParamStore, ex: &DecoderExample) -> Result<Var> {
        let text = if self.config.tgm { Some(&ex.text) } else { None };
        match self.config.mode {
            DecoderMode::Nar => {
                let lp = self.nar_forward(tape, store, &ex.cond, text)?;
                ctc_loss(tape, lp, &ex.units)
            }
            DecoderMode::Ar => {
                let units = ex.units.as_slice();
                let lp = self.ar_logits_all(tape, store, &ex.cond, text, units)?;
                let first = ex.cond.rows() - 1;
                let rows: Vec<usize> = (first..first + units.len() + 1).collect();
                let picked = tape.gather_rows(lp, &rows)?;
                let mut targets: Vec<usize> = units.iter().map(|&u| u as usize).collect();
                targets.push(self.config.eos() as usize);
                let ll = tape.pick_last_dim(picked, &targets)?;
                let m = tape.mean(ll)?;
                tape.scale(m, -1.0)
            }
        }
    }

    pub fn batch_loss(&self, tape: &mut Tape, store: &ParamStore, batch: &[&DecoderExample]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Contract("empty decoder batch".into()));
        }
        let mut acc: Option<Var> = None;
        for ex in batch {
            let l = self.example_loss(tape, store, ex)?;
            acc = Some(match acc {
                None => l,
                Some(a) => tape.add(a, l)?,
            });
        }
        tape.scale(acc.expect("nonempty"), 1.0 / batch.len() as f64)
    }

    /// Why an example cannot be trained on, if it cannot.
    pub fn infeasibility(&self, ex: &DecoderExample) -> Option<String> {
        let t = ex.cond.rows();
        if t == 0 || t > self.config.max_context {
            return Some(format!("{t} condition rows (max_context {})", self.config.max_context));
        }
        if let Some(&u) = ex.units.as_slice().iter().find(|&&u| u as usize >= self.config.vocab_nar) {
            return Some(format!("unit {u} outside vocabulary {}", self.config.vocab_nar));
        }
        match self.config.mode {
            DecoderMode::Nar => {
                let frames = self.config.upsample * t;
                (ex.units.min_frames() > frames)
                    .then(|| format!("needs {} frames, has {frames}", ex.units.min_frames()))
            }
            DecoderMode::Ar => (ex.units.len() >= self.config.max_units)
                .then(|| format!("{} units reach max_units {}", ex.units.len(), self.config.max_units)),
        }
    }

    /// Writes parameters to `path` and the configuration to `<path>.cfg`.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.store, None)?;
        let cfg = config_path(path);
        fs::write(&cfg, self.config.to_kv(None)).map_err(|e| Error::io(cfg, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = config_path(path);
        let text = fs::read_to_string(&cfg).map_err(|e| Error::io(&cfg, e))?;
        let (config, _) = SpeechDecoderConfig::parse(&text)?;
        let mut dec = SpeechDecoder::new(config)?;
        load_checkpoint(path)?.apply_to(&mut dec.store)?;
        Ok(dec)
    }
}

pub fn config_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// One supervised decoder sample with its precomputed conditioning.
#[derive(Clone, Debug)]
pub struct DecoderExample {
    pub lang: Language,
    pub emotion: EmotionLabel,
    pub cond: Tensor,
    /// Response token embeddings for text guidance.
    pub text: Tensor,
    pub units: UnitSequence,
}

/// Conditions every supervised record on the frozen backbone.
pub fn decoder_examples(backbone: &Backbone, records: &[SampleRecord]) -> Result<Vec<DecoderExample>> {
    records
        .iter()
        .map(|r| match &r.payload {
            Payload::SupervisedUnits {
                lang,
                emotion,
                context,
                response,
                units,
            } => {
                let (cond, text) = backbone.condition_features(context, response)?;
                Ok(DecoderExample {
                    lang: *lang,
                    emotion: *emotion,
                    cond,
                    text,
                    units: units.clone(),
                })
            }
            other => Err(Error::KindMismatch(format!(
                "{}: expected supervised_units, got {}",
                r.id,
                other.kind()
            ))),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<LossRow>,
    pub steps_per_epoch: usize,
    pub skipped: usize,
    pub mode: DecoderMode,
    pub tgm: bool,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |r| r.loss)
    }

    /// Mean of the last `n` logged losses.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let k = n.min(self.curve.len()).max(1);
        self.curve[self.curve.len().saturating_sub(k)..].iter().map(|r| r.loss).sum::<f64>() / k as f64
    }

    /// Mean loss over the final epoch. Single-batch losses are noisy, so
    /// this is what ablations compare as the final training loss.
    pub fn last_epoch_loss(&self) -> f64 {
        self.tail_loss(self.steps_per_epoch)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("step,loss,mode,tgm_flag\n");
        let flag = if self.tgm { "on" } else { "off" };
        for r in &self.curve {
            s.push_str(&format!("{},{},{},{}\n", r.step, r.loss, self.mode, flag));
        }
        s
    }
}

/// Trains every decoder parameter on `examples`. Infeasible examples are
/// skipped and counted; more than 1% skipped is a data error.
pub fn train_decoder(
    decoder: &mut SpeechDecoder,
    examples: &[DecoderExample],
    opts: &DecoderTrainOptions,
) -> Result<TrainReport> {
    if opts.batch == 0 || opts.epochs == 0 || !(opts.lr > 0.0) {
        return Err(Error::Config(format!("invalid training options {opts:?}")));
    }
    let mut usable = Vec::with_capacity(examples.len());
    let mut skipped = 0usize;
    for (i, ex) in examples.iter().enumerate() {
        match decoder.infeasibility(ex) {
            None => usable.push(ex),
            Some(why) => {
                log::debug!("skipping decoder example {i}: {why}");
                skipped += 1;
            }
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} of {} decoder examples", examples.len());
    }
    if skipped * 100 > examples.len() {
        return Err(Error::Data(format!(
            "{skipped} of {} decoder examples are infeasible (limit 1%)",
            examples.len()
        )));
    }
    if usable.is_empty() {
        return Err(Error::Data("no decoder training examples".into()));
    }
    decoder.store.set_trainable("", true);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: opts.lr,
            ..AdamWConfig::default()
        },
        &decoder.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let total = usable.len().div_ceil(opts.batch) * opts.epochs;
    let mut curve = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut step = 0;
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch) {
            let batch: Vec<&DecoderExample> = chunk.iter().map(|&i| usable[i]).collect();
            let lr = warmup_lr(opts.lr, step, total, opts.warmup_ratio);
            let mut store = std::mem::take(&mut decoder.store);
            let dec: &SpeechDecoder = decoder;
            let result = train_step(&mut store, &mut opt, lr, |t, s| dec.batch_loss(t, s, &batch));
            decoder.store = store;
            curve.push(LossRow { step, loss: result? });
            step += 1;
        }
    }
    Ok(TrainReport {
        curve,
        steps_per_epoch: usable.len().div_ceil(opts.batch),
        skipped,
        mode: decoder.config.mode,
        tgm: decoder.config.tgm,
    })
}

/// Mean per-sample unit error rate, overall and per language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UerReport {
    pub overall: f64,
    pub per_language: BTreeMap<Language, f64>,
    pub samples: usize,
}

pub fn evaluate_uer(decoder: &SpeechDecoder, examples: &[DecoderExample]) -> Result<UerReport> {
    if examples.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let mut sums: BTreeMap<Language, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for ex in examples {
        let text = if decoder.config.tgm { Some(&ex.text) } else { None };
        let g = decoder.generate(&ex.cond, text)?;
        let u = data::unit_error_rate(&ex.units, &g.units)?;
        total += u;
        let e = sums.entry(ex.lang).or_default();
        e.0 += u;
        e.1 += 1;
    }
    Ok(UerReport {
        overall: total / examples.len() as f64,
        per_language: sums.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect(),
        samples: examples.len(),
    })
}
