//! Progressive alignment of toy speech and image encoders to a tiny text
//! backbone, plus the quasi-zero-shot transfer probe.
//!
//! The backbone, the speech projector and the image projector share one
//! [`ParamStore`] and are told apart by name prefix, which doubles as the
//! freeze-group key.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    self, Language, Payload, SampleRecord, Template, World, ATTRIBUTES, BOS, EOS, LATENT_DIM, SEP, TEXT_VOCAB,
    VALUES_PER_ATTRIBUTE,
};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, DecoderBlock, LayerNorm, Linear};
use crate::tensor::{
    load_checkpoint, save_checkpoint, train_step, warmup_lr, AdamW, AdamWConfig, ParamId, ParamStore, Tape, Tensor, Var,
};

pub const GROUP_LLM: &str = "llm.";
pub const GROUP_SPEECH: &str = "speech_proj.";
pub const GROUP_IMAGE: &str = "image_proj.";
/// The token table stays fixed in every stage.
pub const TOKEN_TABLE: &str = "llm.tok";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            dim: 32,
            heads: 4,
            layers: 2,
            max_len: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Speech,
    Image,
}

/// Linear projector from a modality's feature space into the backbone.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    pub modality: Modality,
    pub projection: Linear,
}

impl ToyEncoder {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: &Tensor) -> Result<Var> {
        if features.rank() != 2 || features.last_dim() != self.projection.d_in {
            return Err(Error::dim(
                "toy_encoder",
                format!("{:?} features must be [T, {}], got {:?}", self.modality, self.projection.d_in, features.shape()),
            ));
        }
        let x = tape.constant(features.clone());
        self.projection.forward(tape, store, x)
    }
}

/// One piece of backbone input.
#[derive(Clone, Copy, Debug)]
pub enum Segment<'a> {
    Tokens(&'a [u32]),
    Speech(&'a Tensor),
    Image(&'a Tensor),
}

impl Segment<'_> {
    fn len(&self) -> usize {
        match self {
            Segment::Tokens(t) => t.len(),
            Segment::Speech(f) | Segment::Image(f) => f.shape().first().copied().unwrap_or(0),
        }
    }
}

/// The token embedding table is the world's latent table, mapped through a
/// fixed random projection when the model width differs.
fn token_table(world: &World, d: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let latents = world.latent_table();
    if d == LATENT_DIM {
        return Ok(latents);
    }
    let r = normal_tensor(rng, &[LATENT_DIM, d], 1.0 / (LATENT_DIM as f64).sqrt());
    let mut tape = Tape::new();
    let a = tape.constant(latents);
    let b = tape.constant(r);
    let y = tape.matmul(a, b)?;
    Ok(tape.value(y).clone())
}

/// Tiny causal language model over the shared text vocabulary with its two
/// modality projectors.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub store: ParamStore,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<DecoderBlock>,
    ln_f: LayerNorm,
    head: Linear,
    pub speech: ToyEncoder,
    pub image: ToyEncoder,
}

impl Backbone {
    pub fn new(config: BackboneConfig, world: &World) -> Result<Self> {
        if config.layers == 0 || config.max_len == 0 {
            return Err(Error::Config("backbone needs at least one layer and a positive max_len".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let tok = store.add("llm.tok", token_table(world, d, &mut rng)?)?;
        let pos = store.add("llm.pos", normal_tensor(&mut rng, &[config.max_len, d], 0.1))?;
        let blocks = (0..config.layers)
            .map(|i| DecoderBlock::new(&mut store, &format!("llm.block{i}"), d, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut store, "llm.ln_f", d)?;
        let head = Linear::new(&mut store, "llm.head", d, TEXT_VOCAB, true, &mut rng)?;
        let speech = ToyEncoder {
            modality: Modality::Speech,
            projection: Linear::zeros(&mut store, "speech_proj", world.speech_dim, d, true)?,
        };
        let image = ToyEncoder {
            modality: Modality::Image,
            projection: Linear::zeros(&mut store, "image_proj", world.image_dim, d, true)?,
        };
        Ok(Backbone {
            config,
            store,
            tok,
            pos,
            blocks,
            ln_f,
            head,
            speech,
            image,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Input embeddings plus positions, `[T, d]`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, segments: &[Segment]) -> Result<Var> {
        let total: usize = segments.iter().map(Segment::len).sum();
        if total == 0 {
            return Err(Error::Contract("empty backbone input".into()));
        }
        if total > self.config.max_len {
            return Err(Error::dim("backbone", format!("{total} positions exceed max_len {}", self.config.max_len)));
        }
        let table = tape.param(store, self.tok);
        let mut parts = Vec::with_capacity(segments.len());
        for seg in segments {
            let part = match seg {
                Segment::Tokens(t) => {
                    if let Some(&bad) = t.iter().find(|&&x| x as usize >= TEXT_VOCAB) {
                        return Err(Error::dim("backbone", format!("token {bad} outside vocabulary {TEXT_VOCAB}")));
                    }
                    let ids: Vec<usize> = t.iter().map(|&x| x as usize).collect();
                    tape.embedding_lookup(table, &ids)?
                }
                Segment::Speech(f) => self.speech.forward(tape, store, f)?,
                Segment::Image(f) => self.image.forward(tape, store, f)?,
            };
            if seg.len() > 0 {
                parts.push(part);
            }
        }
        let x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let pos = tape.param(store, self.pos);
        let idx: Vec<usize> = (0..total).collect();
        let p = tape.gather_rows(pos, &idx)?;
        tape.add(x, p)
    }

    /// Final-layer hidden states after the output norm, `[T, d]`.
    pub fn hidden(&self, tape: &mut Tape, store: &ParamStore, segments: &[Segment]) -> Result<Var> {
        let mut x = self.embed(tape, store, segments)?;
        for b in &self.blocks {
            x = b.forward(tape, store, x, true)?;
        }
        self.ln_f.forward(tape, store, x)
    }

    pub fn log_probs(&self, tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var> {
        let logits = self.head.forward(tape, store, hidden)?;
        tape.log_softmax_last_dim(logits)
    }

    /// Mean next-token NLL over `targets`, given as (position, token) pairs
    /// where position `p` predicts the token at `p + 1`.
    pub fn lm_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        segments: &[Segment],
        targets: &[(usize, u32)],
    ) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::Contract("language-model loss with no targets".into()));
        }
        let h = self.hidden(tape, store, segments)?;
        let lp = self.log_probs(tape, store, h)?;
        let rows: Vec<usize> = targets.iter().map(|&(p, _)| p).collect();
        let picked = tape.gather_rows(lp, &rows)?;
        let toks: Vec<usize> = targets.iter().map(|&(_, t)| t as usize).collect();
        let ll = tape.pick_last_dim(picked, &toks)?;
        let m = tape.mean(ll)?;
        tape.scale(m, -1.0)
    }

    /// Greedy next token after the full input.
    pub fn predict_next(&self, segments: &[Segment]) -> Result<u32> {
        let mut tape = Tape::new();
        let h = self.hidden(&mut tape, &self.store, segments)?;
        let lp = self.log_probs(&mut tape, &self.store, h)?;
        let v = tape.value(lp);
        let last = v.row(v.rows() - 1);
        let mut arg = 0;
        for (k, &x) in last.iter().enumerate() {
            if x > last[arg] {
                arg = k;
            }
        }
        Ok(arg as u32)
    }

    /// Decoder conditioning for a spoken response: final hidden states over
    /// the whole dialogue `context ++ response`, and the raw token embeddings
    /// of the response for text guidance. The response occupies the last
    /// `response.len()` condition rows.
    pub fn condition_features(&self, context: &[u32], response: &[u32]) -> Result<(Tensor, Tensor)> {
        if response.is_empty() {
            return Err(Error::Data("empty response".into()));
        }
        let mut seq = context.to_vec();
        seq.extend_from_slice(response);
        let mut tape = Tape::new();
        let h = self.hidden(&mut tape, &self.store, &[Segment::Tokens(&seq)])?;
        Ok((tape.value(h).clone(), self.token_embeddings(response)?))
    }

    pub fn token_embeddings(&self, tokens: &[u32]) -> Result<Tensor> {
        let table = self.store.value(self.tok);
        let d = self.dim();
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= TEXT_VOCAB {
                return Err(Error::dim("backbone", format!("token {t} outside vocabulary")));
            }
            data.extend_from_slice(&table.data()[t as usize * d..(t as usize + 1) * d]);
        }
        Tensor::new(vec![tokens.len(), d], data)
    }

    /// Order-sensitive hash of the bits of every parameter under `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, values) in self.store.snapshot_prefix(prefix) {
            name.hash(&mut h);
            for v in values {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Writes parameters to `path` and a JSON sidecar (`<path>.json`) with
    /// the configuration, world seed and completed stages.
    pub fn save(&self, path: &Path, world_seed: u64, completed: &[StageId]) -> Result<()> {
        save_checkpoint(path, &self.store, None)?;
        let meta = BackboneMeta {
            config: self.config.clone(),
            world_seed,
            completed: completed.to_vec(),
        };
        let side = meta_path(path);
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        fs::write(&side, text).map_err(|e| Error::io(side, e))
    }

    /// Loads a checkpoint written by [`Backbone::save`]. Every parameter
    /// comes back frozen.
    pub fn load(path: &Path) -> Result<(Backbone, World, Vec<StageId>)> {
        let side = meta_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: BackboneMeta = serde_json::from_str(&text)?;
        let world = World::new(meta.world_seed);
        let mut model = Backbone::new(meta.config, &world)?;
        load_checkpoint(path)?.apply_to(&mut model.store)?;
        model.store.freeze_all();
        Ok((model, world, meta.completed))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneMeta {
    pub config: BackboneConfig,
    pub world_seed: u64,
    pub completed: Vec<StageId>,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Clone, Debug)]
pub struct SpeechTextExample {
    pub features: Tensor,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct ImageTextExample {
    pub features: Tensor,
    pub caption: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct InstructExample {
    pub features: Tensor,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
}

/// Targets for `prefix_len` conditioning positions followed by `SEP` and
/// `body ++ [EOS]`: the `SEP` position predicts `body[0]` and so on.
fn continuation_targets(prefix_len: usize, body: &[u32]) -> Vec<(usize, u32)> {
    let sep = prefix_len;
    body.iter()
        .chain(std::iter::once(&EOS))
        .enumerate()
        .map(|(i, &t)| (sep + i, t))
        .collect()
}

fn batch_mean(tape: &mut Tape, losses: Vec<Var>) -> Result<Var> {
    let n = losses.len();
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = tape.add(acc, l)?;
    }
    tape.scale(acc, 1.0 / n as f64)
}

/// Transcription loss given the speech prefix: `[BOS] speech [SEP] text [EOS]`.
pub fn speech_text_loss(tape: &mut Tape, model: &Backbone, store: &ParamStore, batch: &[SpeechTextExample]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty speech-text batch".into()));
    }
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let n = ex.features.shape()[0];
        let mut body = vec![SEP];
        body.extend_from_slice(&ex.tokens);
        body.push(EOS);
        let segs = [Segment::Tokens(&[BOS]), Segment::Speech(&ex.features), Segment::Tokens(&body)];
        let targets = continuation_targets(1 + n, &ex.tokens);
        losses.push(model.lm_loss(tape, store, &segs, &targets)?);
    }
    batch_mean(tape, losses)
}

/// Captioning loss with the backbone locked: `[BOS] image [SEP] caption [EOS]`.
pub fn image_text_pretrain_loss(
    tape: &mut Tape,
    model: &Backbone,
    store: &ParamStore,
    batch: &[ImageTextExample],
) -> Result<Var> {
    if store.ids().any(|id| store.is_trainable(id) && store.param(id).name.starts_with(GROUP_LLM)) {
        return Err(Error::Contract("image-text pretraining requires the backbone to be frozen".into()));
    }
    if batch.is_empty() {
        return Err(Error::Contract("empty image-text batch".into()));
    }
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let mut body = vec![SEP];
        body.extend_from_slice(&ex.caption);
        body.push(EOS);
        let segs = [Segment::Tokens(&[BOS]), Segment::Image(&ex.features), Segment::Tokens(&body)];
        let targets = continuation_targets(1 + ATTRIBUTES, &ex.caption);
        losses.push(model.lm_loss(tape, store, &segs, &targets)?);
    }
    batch_mean(tape, losses)
}

/// Instruction loss over answer tokens only:
/// `[BOS] image question [SEP] answer [EOS]`.
pub fn image_text_instruct_loss(
    tape: &mut Tape,
    model: &Backbone,
    store: &ParamStore,
    batch: &[InstructExample],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty instruction batch".into()));
    }
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        if ex.answer.is_empty() {
            return Err(Error::Data("instruction sample without an answer span".into()));
        }
        let mut body = ex.question.clone();
        body.push(SEP);
        body.extend_from_slice(&ex.answer);
        body.push(EOS);
        let segs = [Segment::Tokens(&[BOS]), Segment::Image(&ex.features), Segment::Tokens(&body)];
        let targets = continuation_targets(1 + ATTRIBUTES + ex.question.len(), &ex.answer);
        losses.push(model.lm_loss(tape, store, &segs, &targets)?);
    }
    batch_mean(tape, losses)
}

/// A text-only pretraining sequence and its supervised positions.
#[derive(Clone, Debug)]
pub struct TextExample {
    pub tokens: Vec<u32>,
    pub targets: Vec<(usize, u32)>,
}

/// Draws the text pretraining mixture that stands in for a pretrained LLM:
/// copying (`[BOS] x [SEP] x [EOS]`) and question answering over a textual
/// caption (`[BOS] caption question [SEP] answer [EOS]`).
pub fn sample_text_example<R: Rng>(world: &World, rng: &mut R) -> TextExample {
    if rng.random_bool(0.5) {
        let n = rng.random_range(2..=6);
        let lang = if rng.random_bool(0.5) { Language::A } else { Language::B };
        let words: Vec<u32> = lang.words().collect();
        let x: Vec<u32> = (0..n).map(|_| words[rng.random_range(0..words.len())]).collect();
        let mut tokens = vec![BOS];
        tokens.extend(&x);
        tokens.push(SEP);
        tokens.extend(&x);
        tokens.push(EOS);
        TextExample {
            targets: continuation_targets(1 + n, &x),
            tokens,
        }
    } else {
        let attrs: Vec<usize> = (0..ATTRIBUTES).map(|_| rng.random_range(0..VALUES_PER_ATTRIBUTE)).collect();
        let lang = if rng.random_bool(0.5) { Language::A } else { Language::B };
        let t = Template::all().nth(rng.random_range(0..data::TEMPLATES)).expect("template");
        let q = t.question(lang);
        let a = t.answer(lang, &attrs);
        let mut tokens = vec![BOS];
        tokens.extend(world.caption(&attrs));
        tokens.extend(&q);
        tokens.push(SEP);
        tokens.extend(&a);
        tokens.push(EOS);
        TextExample {
            targets: continuation_targets(1 + ATTRIBUTES + q.len(), &a),
            tokens,
        }
    }
}

pub fn text_lm_loss(tape: &mut Tape, model: &Backbone, store: &ParamStore, batch: &[TextExample]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty text batch".into()));
    }
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        losses.push(model.lm_loss(tape, store, &[Segment::Tokens(&ex.tokens)], &ex.targets)?);
    }
    batch_mean(tape, losses)
}

/// Training stages in pipeline order. `Pretrain` produces the text backbone
/// the alignment stages start from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageId {
    #[serde(rename = "pretrain")]
    Pretrain,
    #[serde(rename = "I")]
    I,
    #[serde(rename = "II")]
    II,
    #[serde(rename = "III")]
    III,
    #[serde(rename = "IV")]
    IV,
    #[serde(rename = "V")]
    V,
}

impl StageId {
    pub fn name(self) -> &'static str {
        match self {
            StageId::Pretrain => "pretrain",
            StageId::I => "I",
            StageId::II => "II",
            StageId::III => "III",
            StageId::IV => "IV",
            StageId::V => "V",
        }
    }

    /// Stages that must already be complete. I and II both build on the
    /// pretrained backbone and may run in either order.
    pub fn prerequisites(self) -> &'static [StageId] {
        match self {
            StageId::Pretrain => &[],
            StageId::I | StageId::II => &[StageId::Pretrain],
            StageId::III => &[StageId::I, StageId::II],
            StageId::IV => &[StageId::III],
            StageId::V => &[StageId::IV],
        }
    }

    pub fn check_ready(self, completed: &[StageId]) -> Result<()> {
        let missing: Vec<&str> = self
            .prerequisites()
            .iter()
            .filter(|p| !completed.contains(p))
            .map(|p| p.name())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Sequencing(format!(
                "stage {} needs completed stage(s) {}",
                self.name(),
                missing.join(", ")
            )))
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [StageId::Pretrain, StageId::I, StageId::II, StageId::III, StageId::IV, StageId::V]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub stage: StageId,
    pub freeze_llm: bool,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub seed: u64,
}

impl StageSchedule {
    /// Per-stage defaults. Learning rates, warmup ratio and freeze flags
    /// follow the published recipe; batch sizes and epochs are desk-scale.
    pub fn default_for(stage: StageId) -> Self {
        let (freeze_llm, lr, batch, epochs) = match stage {
            StageId::Pretrain => (false, 3e-3, 32, 1),
            StageId::I => (true, 1e-3, 16, 80),
            StageId::II => (true, 1e-3, 16, 20),
            StageId::III => (false, 5e-5, 16, 2),
            StageId::IV => (true, 5e-4, 8, 3),
            StageId::V => (true, 5e-4, 8, 3),
        };
        StageSchedule {
            stage,
            freeze_llm,
            lr,
            batch,
            epochs,
            warmup_ratio: 0.3,
            seed: 0x57a6e ^ stage as u64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage == StageId::II && !self.freeze_llm {
            return Err(Error::Config("stage II must freeze the backbone".into()));
        }
        if self.stage == StageId::III && self.freeze_llm {
            return Err(Error::Config("stage III trains the backbone".into()));
        }
        if self.batch == 0 || self.epochs == 0 || !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        warmup_lr(self.lr, step, total, self.warmup_ratio)
    }
}

/// Training data bound to an alignment stage.
#[derive(Clone, Debug)]
pub enum StageData {
    /// Number of sampled text sequences per epoch.
    Text { world: World, samples: usize },
    SpeechText(Vec<SpeechTextExample>),
    ImageText(Vec<ImageTextExample>),
    Instruct(Vec<InstructExample>),
}

impl StageData {
    fn len(&self) -> usize {
        match self {
            StageData::Text { samples, .. } => *samples,
            StageData::SpeechText(v) => v.len(),
            StageData::ImageText(v) => v.len(),
            StageData::Instruct(v) => v.len(),
        }
    }

    fn stage(&self) -> StageId {
        match self {
            StageData::Text { .. } => StageId::Pretrain,
            StageData::SpeechText(_) => StageId::I,
            StageData::ImageText(_) => StageId::II,
            StageData::Instruct(_) => StageId::III,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetric {
    pub step: usize,
    pub stage: StageId,
    pub loss: f64,
    pub lr: f64,
}

pub fn metrics_csv(rows: &[StepMetric]) -> String {
    let mut s = String::from("step,stage,loss,lr\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.stage, r.loss, r.lr));
    }
    s
}

/// Sets trainability for a stage: pretraining and stage III train the
/// backbone, I trains only the speech projector, II only the image
/// projector, and III also trains the image projector.
pub fn apply_freeze_flags(model: &mut Backbone, schedule: &StageSchedule) {
    let store = &mut model.store;
    store.freeze_all();
    match schedule.stage {
        StageId::Pretrain => {
            store.set_trainable(GROUP_LLM, true);
        }
        StageId::I => {
            store.set_trainable(GROUP_SPEECH, true);
        }
        StageId::II => {
            store.set_trainable(GROUP_IMAGE, true);
        }
        StageId::III => {
            store.set_trainable(GROUP_IMAGE, true);
        }
        StageId::IV | StageId::V => {}
    }
    if !schedule.freeze_llm {
        store.set_trainable(GROUP_LLM, true);
    }
    store.set_trainable(TOKEN_TABLE, false);
}

/// Runs one alignment stage in place. Ordering is checked against
/// `completed`; the stage is appended on success.
pub fn run_stage(
    model: &mut Backbone,
    schedule: &StageSchedule,
    data: &StageData,
    completed: &mut Vec<StageId>,
) -> Result<Vec<StepMetric>> {
    schedule.validate()?;
    if data.stage() != schedule.stage {
        return Err(Error::KindMismatch(format!(
            "stage {} cannot train on {} data",
            schedule.stage,
            data.stage()
        )));
    }
    schedule.stage.check_ready(completed)?;
    if data.len() == 0 {
        return Err(Error::Data(format!("stage {} has no training data", schedule.stage)));
    }
    apply_freeze_flags(model, schedule);
    let steps_per_epoch = data.len().div_ceil(schedule.batch);
    let total = steps_per_epoch * schedule.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: schedule.lr,
            ..AdamWConfig::default()
        },
        &model.store,
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut metrics = Vec::with_capacity(total);
    let mut step = 0;
    for _ in 0..schedule.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(schedule.batch) {
            let lr = schedule.lr_at(step, total);
            let mut store = std::mem::take(&mut model.store);
            let result = {
                let m: &Backbone = model;
                match data {
                    StageData::Text { world, .. } => {
                        let batch: Vec<TextExample> =
                            chunk.iter().map(|_| sample_text_example(world, &mut rng)).collect();
                        train_step(&mut store, &mut opt, lr, |t, s| text_lm_loss(t, m, s, &batch))
                    }
                    StageData::SpeechText(v) => {
                        let batch: Vec<SpeechTextExample> = chunk.iter().map(|&i| v[i].clone()).collect();
                        train_step(&mut store, &mut opt, lr, |t, s| speech_text_loss(t, m, s, &batch))
                    }
                    StageData::ImageText(v) => {
                        let batch: Vec<ImageTextExample> = chunk.iter().map(|&i| v[i].clone()).collect();
                        train_step(&mut store, &mut opt, lr, |t, s| image_text_pretrain_loss(t, m, s, &batch))
                    }
                    StageData::Instruct(v) => {
                        let batch: Vec<InstructExample> = chunk.iter().map(|&i| v[i].clone()).collect();
                        train_step(&mut store, &mut opt, lr, |t, s| image_text_instruct_loss(t, m, s, &batch))
                    }
                }
            };
            model.store = store;
            let loss = result?;
            metrics.push(StepMetric {
                step,
                stage: schedule.stage,
                loss,
                lr,
            });
            step += 1;
        }
    }
    model.store.freeze_all();
    if !completed.contains(&schedule.stage) {
        completed.push(schedule.stage);
    }
    Ok(metrics)
}

/// Mean loss of a stage objective over a whole example set, without training.
pub fn evaluate_speech_text(model: &Backbone, examples: &[SpeechTextExample]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = speech_text_loss(&mut tape, model, &model.store, examples)?;
    tape.item(l)
}

pub fn evaluate_image_text(model: &Backbone, examples: &[ImageTextExample]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = image_text_pretrain_loss_unchecked(&mut tape, model, examples)?;
    tape.item(l)
}

fn image_text_pretrain_loss_unchecked(tape: &mut Tape, model: &Backbone, batch: &[ImageTextExample]) -> Result<Var> {
    let mut frozen = model.store.clone();
    frozen.freeze_all();
    image_text_pretrain_loss(tape, model, &frozen, batch)
}

/// Converts corpus records into stage examples.
pub fn speech_text_examples(records: &[SampleRecord]) -> Result<Vec<SpeechTextExample>> {
    records
        .iter()
        .map(|r| match &r.payload {
            Payload::SpeechText { tokens, features, .. } => Ok(SpeechTextExample {
                features: features.decode()?,
                tokens: tokens.clone(),
            }),
            other => Err(Error::KindMismatch(format!("expected speech_text, got {}", other.kind()))),
        })
        .collect()
}

pub fn image_text_examples(records: &[SampleRecord]) -> Result<Vec<ImageTextExample>> {
    records
        .iter()
        .map(|r| match &r.payload {
            Payload::ImageText { caption, features, .. } => Ok(ImageTextExample {
                features: features.decode()?,
                caption: caption.clone(),
            }),
            other => Err(Error::KindMismatch(format!("expected image_text, got {}", other.kind()))),
        })
        .collect()
}

pub fn instruct_examples(records: &[SampleRecord]) -> Result<Vec<InstructExample>> {
    records
        .iter()
        .map(|r| match &r.payload {
            Payload::Instruct {
                question,
                answer,
                features,
                ..
            } => Ok(InstructExample {
                features: features.decode()?,
                question: question.clone(),
                answer: answer.clone(),
            }),
            other => Err(Error::KindMismatch(format!("expected instruct, got {}", other.kind()))),
        })
        .collect()
}

/// A question asked about an image both in text and as speech.
#[derive(Clone, Debug)]
pub struct ProbeItem {
    pub lang: Language,
    pub template: Template,
    pub image: Tensor,
    pub question: Vec<u32>,
    pub speech: Tensor,
    pub answer: Vec<u32>,
}

/// Every template in both languages, `per_template` random images each.
pub fn probe_set(world: &World, seed: u64, per_template: usize, noise: f64) -> Result<Vec<ProbeItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for lang in Language::BOTH {
        for template in Template::all() {
            for _ in 0..per_template {
                let attrs: Vec<usize> = (0..ATTRIBUTES).map(|_| rng.random_range(0..VALUES_PER_ATTRIBUTE)).collect();
                let question = template.question(lang);
                out.push(ProbeItem {
                    lang,
                    template,
                    image: world.image_features(&attrs, noise, &mut rng)?,
                    speech: world.speech_features(&question, noise, &mut rng)?,
                    answer: template.answer(lang, &attrs),
                    question,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Mean centered cosine between pooled text and speech question states.
    pub similarity: f64,
    pub speech_accuracy: f64,
    pub text_accuracy: f64,
    /// Text accuracy restricted to held-out phrasings.
    pub held_out_text_accuracy: f64,
    pub chance: f64,
}

fn pooled(model: &Backbone, seg: Segment) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let h = model.hidden(
        &mut tape,
        &model.store,
        &[Segment::Tokens(&[BOS]), seg, Segment::Tokens(&[SEP])],
    )?;
    let v = tape.value(h);
    let d = model.dim();
    let mut acc = vec![0.0; d];
    for r in 1..v.rows() {
        for (a, x) in acc.iter_mut().zip(v.row(r)) {
            *a += x;
        }
    }
    let n = (v.rows() - 1) as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

fn centered(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = vectors[0].len();
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / vectors.len() as f64;
        }
    }
    vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn greedy_answer(model: &Backbone, image: &Tensor, question: Segment, len: usize) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let mut prefix = vec![SEP];
        prefix.extend(&out);
        out.push(model.predict_next(&[
            Segment::Tokens(&[BOS]),
            Segment::Image(image),
            question,
            Segment::Tokens(&prefix),
        ])?);
    }
    Ok(out)
}

/// Pooled-state similarity between each text question and its spoken twin
/// (each side centered on its own mean), and answer accuracy for image
/// questions asked in text and in speech.
pub fn quasi_zero_shot_probe(model: &Backbone, items: &[ProbeItem]) -> Result<ProbeReport> {
    if items.is_empty() {
        return Err(Error::Contract("empty probe set".into()));
    }
    let mut text_vecs = Vec::with_capacity(items.len());
    let mut speech_vecs = Vec::with_capacity(items.len());
    let (mut text_ok, mut speech_ok, mut held_ok, mut held_n) = (0usize, 0usize, 0usize, 0usize);
    for it in items {
        text_vecs.push(pooled(model, Segment::Tokens(&it.question))?);
        speech_vecs.push(pooled(model, Segment::Speech(&it.speech))?);
        let t = greedy_answer(model, &it.image, Segment::Tokens(&it.question), it.answer.len())?;
        let s = greedy_answer(model, &it.image, Segment::Speech(&it.speech), it.answer.len())?;
        text_ok += usize::from(t == it.answer);
        speech_ok += usize::from(s == it.answer);
        if it.template.is_held_out() {
            held_n += 1;
            held_ok += usize::from(t == it.answer);
        }
    }
    let (tc, sc) = (centered(&text_vecs), centered(&speech_vecs));
    let similarity = tc.iter().zip(&sc).map(|(a, b)| cosine(a, b)).sum::<f64>() / items.len() as f64;
    let n = items.len() as f64;
    Ok(ProbeReport {
        similarity,
        speech_accuracy: speech_ok as f64 / n,
        text_accuracy: text_ok as f64 / n,
        held_out_text_accuracy: if held_n == 0 { 0.0 } else { held_ok as f64 / held_n as f64 },
        chance: data::qa_chance_accuracy(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DEFAULT_WORLD_SEED;
    use crate::tensor::finite_difference_check_params;

    fn tiny() -> (World, Backbone) {
        let world = World::new(DEFAULT_WORLD_SEED);
        let cfg = BackboneConfig {
            dim: 8,
            heads: 2,
            layers: 1,
            max_len: 16,
            seed: 3,
        };
        let b = Backbone::new(cfg, &world).unwrap();
        (world, b)
    }

    #[test]
    fn stage_prerequisites() {
        assert!(StageId::I.check_ready(&[StageId::Pretrain]).is_ok());
        assert!(StageId::II.check_ready(&[StageId::Pretrain]).is_ok());
        assert!(matches!(StageId::III.check_ready(&[StageId::Pretrain, StageId::I]), Err(Error::Sequencing(_))));
        assert!(StageId::III.check_ready(&[StageId::Pretrain, StageId::II, StageId::I]).is_ok());
        assert!(matches!(StageId::V.check_ready(&[StageId::III]), Err(Error::Sequencing(_))));
    }

    #[test]
    fn warmup_contract() {
        let s = StageSchedule::default_for(StageId::I);
        assert_eq!(s.lr_at(0, 100), 0.0);
        assert_eq!(s.lr_at(30, 100), s.lr);
        assert_eq!(s.lr_at(99, 100), s.lr);
    }

    #[test]
    fn stage_losses_pass_gradcheck() {
        let (world, mut b) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let st = vec![SpeechTextExample {
            features: world.speech_features(&[5, 9], 0.1, &mut rng).unwrap(),
            tokens: vec![5, 9],
        }];
        let attrs = [0, 1, 2, 3, 0];
        let it = vec![ImageTextExample {
            features: world.image_features(&attrs, 0.1, &mut rng).unwrap(),
            caption: world.caption(&attrs),
        }];
        let ins = vec![InstructExample {
            features: world.image_features(&attrs, 0.1, &mut rng).unwrap(),
            question: vec![30, 31],
            answer: vec![7],
        }];
        let model = b.clone();
        b.store.freeze_all();
        b.store.set_trainable(GROUP_SPEECH, true);
        let e = finite_difference_check_params(&mut b.store, |t, s| speech_text_loss(t, &model, s, &st), 1e-5).unwrap();
        assert!(e < 1e-3, "speech {e}");
        b.store.freeze_all();
        b.store.set_trainable(GROUP_IMAGE, true);
        let e = finite_difference_check_params(&mut b.store, |t, s| image_text_pretrain_loss(t, &model, s, &it), 1e-5)
            .unwrap();
        assert!(e < 1e-3, "image {e}");
        b.store.set_trainable(GROUP_LLM, true);
        let e = finite_difference_check_params(&mut b.store, |t, s| image_text_instruct_loss(t, &model, s, &ins), 1e-5)
            .unwrap();
        assert!(e < 1e-3, "instruct {e}");
    }

    #[test]
    fn stage_two_refuses_unfrozen_backbone() {
        let (world, mut b) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attrs = [0, 1, 2, 3, 0];
        let it = vec![ImageTextExample {
            features: world.image_features(&attrs, 0.1, &mut rng).unwrap(),
            caption: world.caption(&attrs),
        }];
        b.store.set_trainable(GROUP_LLM, true);
        let mut tape = Tape::new();
        assert!(matches!(image_text_pretrain_loss(&mut tape, &b, &b.store, &it), Err(Error::Contract(_))));
    }

    #[test]
    fn instruct_loss_ignores_question_labels() {
        let (world, b) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let features = world.image_features(&[1, 1, 1, 1, 1], 0.1, &mut rng).unwrap();
        let mk = |answer: Vec<u32>| {
            vec![InstructExample {
                features: features.clone(),
                question: vec![30, 31],
                answer,
            }]
        };
        let mut t1 = Tape::new();
        let l1 = image_text_instruct_loss(&mut t1, &b, &b.store, &mk(vec![7])).unwrap();
        // the question tokens are inputs only: the loss is the answer NLL
        let targets = continuation_targets(1 + ATTRIBUTES + 2, &[7]);
        assert_eq!(targets, vec![(8, 7), (9, EOS)]);
        let mut t2 = Tape::new();
        let l2 = image_text_instruct_loss(&mut t2, &b, &b.store, &mk(vec![8])).unwrap();
        assert_ne!(t1.item(l1).unwrap(), t2.item(l2).unwrap());
        let mut t3 = Tape::new();
        assert!(matches!(image_text_instruct_loss(&mut t3, &b, &b.store, &mk(vec![])), Err(Error::Data(_))));
    }
}
