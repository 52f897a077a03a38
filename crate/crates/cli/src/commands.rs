use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use unitforge::alignment::{
    image_text_examples, instruct_examples, meta_path, metrics_csv, probe_set, quasi_zero_shot_probe, run_stage,
    speech_text_examples, Backbone, ProbeReport, StageData, StageId, StepMetric, GROUP_IMAGE, GROUP_LLM,
    GROUP_SPEECH,
};
use unitforge::ctc::{feasible_targets, partition_sum};
use unitforge::data::{self, CorpusManifest, CorpusSpec, EmotionLabel, Language, Payload, SampleRecord, World};
use unitforge::decoder::{
    config_path, decoder_examples, evaluate_uer, train_decoder, DecoderExample, DecoderMode, DecoderTrainOptions,
    SpeechDecoder, SpeechDecoderConfig, TrainReport,
};
use unitforge::nn::normal_tensor;
use unitforge::preference::{
    dpo_metrics_csv, emotion_accuracy, frozen_reference, preference_accuracy, preference_pairs, train_dpo,
    EmotionReport, PreferencePair,
};
use unitforge::tensor::Tensor;

use crate::config::{align_options, dpo_options};
use crate::error::{exit, io_error, require_input, CliError, CliResult};
use crate::manifest::{sha256_file, RunManifest, RunRecord};
use crate::report::{num, write_file, Report, Table};
use crate::{execute, Cli, Command, Ctx, Metric, Toggle, TrainStage};

/// Runs one command and returns the text to print.
pub fn dispatch(ctx: &Ctx, cmd: &Command, rec: &mut RunRecord) -> CliResult<String> {
    match cmd {
        Command::GenData { spec } => gen_data(ctx, spec.as_deref(), rec),
        Command::Train {
            stage,
            corpus,
            backbone,
            policy,
        } => train(ctx, *stage, corpus.as_deref(), backbone.as_deref(), policy.as_deref(), rec),
        Command::Eval {
            metric,
            checkpoint,
            baseline,
            backbone,
            corpus,
            frames,
            vocab,
        } => {
            let args = EvalArgs {
                checkpoint: checkpoint.as_deref(),
                baseline: baseline.as_deref(),
                backbone: backbone.as_deref(),
                corpus: corpus.as_deref(),
                frames: *frames,
                vocab: *vocab,
            };
            eval(ctx, *metric, &args, rec)
        }
        Command::BenchLatency {
            ar,
            nar,
            backbone,
            contexts,
            min_len,
            limit,
        } => bench_latency(ctx, ar, nar, backbone, contexts, *min_len, *limit, rec),
        Command::Ablate {
            experts,
            layers,
            tgm,
            repeats,
            backbone,
            corpus,
            holdout,
        } => {
            let grid = Grid {
                experts: experts.clone(),
                layers: layers.clone(),
                tgm: tgm.clone(),
                repeats: *repeats,
                holdout: *holdout,
            };
            ablate(ctx, &grid, backbone, corpus, rec)
        }
        Command::Decode {
            checkpoint,
            backbone,
            contexts,
        } => decode(ctx, checkpoint, backbone, contexts, rec),
        Command::Replay { .. } => unreachable!("replay is handled by execute"),
    }
}

// ---- inputs ---------------------------------------------------------------

fn need<'a>(p: Option<&'a Path>, flag: &str) -> CliResult<&'a Path> {
    p.ok_or_else(|| CliError::new(exit::MISSING_INPUT, format!("missing input: {flag} is required")))
}

/// A corpus argument is either a gen-data directory or a single JSONL file.
fn corpus_file(path: &Path, stem: &str) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{stem}.jsonl"))
    } else {
        path.to_path_buf()
    }
}

fn read_records(path: &Path, rec: &mut RunRecord) -> CliResult<Vec<SampleRecord>> {
    require_input(path)?;
    let f = fs::File::open(path).map_err(|e| io_error(path, e))?;
    let records = data::read_jsonl(BufReader::new(f))?;
    rec.input(path);
    Ok(records)
}

/// The spec written by gen-data beside a corpus, if there is one.
fn corpus_spec(corpus_path: &Path) -> Option<CorpusSpec> {
    let dir = if corpus_path.is_dir() {
        corpus_path
    } else {
        corpus_path.parent()?
    };
    let text = fs::read_to_string(dir.join("spec.json")).ok()?;
    serde_json::from_str(&text).ok()
}

fn check_world(corpus_path: &Path, world: &World) -> CliResult<()> {
    match corpus_spec(corpus_path) {
        Some(spec) if spec.world_seed != world.seed() => Err(CliError::new(
            exit::KIND_MISMATCH,
            format!(
                "corpus {} was generated for world {:#x}, the backbone for world {:#x}",
                corpus_path.display(),
                spec.world_seed,
                world.seed()
            ),
        )),
        _ => Ok(()),
    }
}

fn load_backbone(path: &Path, rec: &mut RunRecord) -> CliResult<(Backbone, World, Vec<StageId>)> {
    require_input(path)?;
    if !meta_path(path).exists() {
        if config_path(path).exists() {
            return Err(CliError::new(
                exit::KIND_MISMATCH,
                format!("{} is a decoder checkpoint, expected a backbone", path.display()),
            ));
        }
        return Err(CliError::missing(&meta_path(path)));
    }
    let loaded = Backbone::load(path)?;
    rec.input(path);
    rec.input(&meta_path(path));
    Ok(loaded)
}

fn load_decoder(path: &Path, rec: &mut RunRecord) -> CliResult<SpeechDecoder> {
    require_input(path)?;
    if !config_path(path).exists() {
        if meta_path(path).exists() {
            return Err(CliError::new(
                exit::KIND_MISMATCH,
                format!("{} is a backbone checkpoint, expected a decoder", path.display()),
            ));
        }
        return Err(CliError::missing(&config_path(path)));
    }
    let dec = SpeechDecoder::load(path)?;
    rec.input(path);
    rec.input(&config_path(path));
    Ok(dec)
}

fn check_decoder_fits(dec: &SpeechDecoder, backbone: &Backbone) -> CliResult<()> {
    if dec.config.dim != backbone.dim() {
        return Err(CliError::new(
            exit::KIND_MISMATCH,
            format!("decoder width {} does not match backbone width {}", dec.config.dim, backbone.dim()),
        ));
    }
    Ok(())
}

fn write_out(ctx: &Ctx, rec: &mut RunRecord, name: &str, content: &str) -> CliResult<()> {
    write_file(&ctx.out.join(name), content)?;
    rec.output(name);
    Ok(())
}

fn write_json<T: Serialize>(ctx: &Ctx, rec: &mut RunRecord, name: &str, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(unitforge::Error::from)?;
    text.push('\n');
    write_out(ctx, rec, name, &text)
}

fn write_report(ctx: &Ctx, rec: &mut RunRecord, report: &Report) -> CliResult<String> {
    for rel in report.write(&ctx.out)? {
        rec.output(rel);
    }
    Ok(report.render(ctx.format))
}

// ---- gen-data -------------------------------------------------------------

fn gen_data(ctx: &Ctx, spec_path: Option<&Path>, rec: &mut RunRecord) -> CliResult<String> {
    let text = match spec_path {
        Some(p) => {
            require_input(p)?;
            rec.input(p);
            Some(fs::read_to_string(p).map_err(|e| io_error(p, e))?)
        }
        None => ctx.config_text.clone(),
    };
    let mut spec: CorpusSpec = match text {
        Some(t) => serde_json::from_str(&t).map_err(|e| CliError::invalid(format!("corpus spec: {e}")))?,
        None => CorpusSpec::default(),
    };
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    let corpora = data::gen_all(&spec)?;
    let mut t = Table::new("counts", "Generated corpora", &["corpus", "records"]);
    for (stem, records) in &corpora {
        let name = format!("{stem}.jsonl");
        let path = ctx.out.join(&name);
        let f = fs::File::create(&path).map_err(|e| io_error(&path, e))?;
        let mut w = BufWriter::new(f);
        data::write_jsonl(&mut w, records)?;
        w.flush().map_err(|e| io_error(&path, e))?;
        rec.output(name);
        t.push(vec![stem.to_string(), records.len().to_string()]);
    }
    write_json(ctx, rec, "spec.json", &spec)?;
    let manifest = CorpusManifest::from_records(corpora.values().flatten());
    write_json(ctx, rec, "corpus_manifest.json", &manifest)?;
    rec.seed = Some(spec.seed);
    let mut report = Report::new("gen-data");
    report.tables.push(t);
    write_report(ctx, rec, &report)
}

// ---- train ----------------------------------------------------------------

#[derive(Serialize)]
struct StageSummary {
    stage: StageId,
    steps: usize,
    first_loss: f64,
    final_epoch_loss: f64,
    completed: Vec<StageId>,
    checksums_before: BTreeMap<String, String>,
    checksums_after: BTreeMap<String, String>,
}

fn group_checksums(model: &Backbone) -> BTreeMap<String, String> {
    [GROUP_LLM, GROUP_SPEECH, GROUP_IMAGE]
        .iter()
        .map(|g| (g.trim_end_matches('.').to_string(), format!("{:016x}", model.checksum(g))))
        .collect()
}

fn train(
    ctx: &Ctx,
    stage: TrainStage,
    corpus: Option<&Path>,
    backbone: Option<&Path>,
    policy: Option<&Path>,
    rec: &mut RunRecord,
) -> CliResult<String> {
    match stage {
        TrainStage::Pretrain => train_backbone(ctx, StageId::Pretrain, None, None, rec),
        TrainStage::Align1 => train_backbone(ctx, StageId::I, corpus, backbone, rec),
        TrainStage::Align2 => train_backbone(ctx, StageId::II, corpus, backbone, rec),
        TrainStage::Align3 => train_backbone(ctx, StageId::III, corpus, backbone, rec),
        TrainStage::DecoderNar => train_decoder_stage(ctx, DecoderMode::Nar, corpus, backbone, rec),
        TrainStage::DecoderAr => train_decoder_stage(ctx, DecoderMode::Ar, corpus, backbone, rec),
        TrainStage::Dpo => train_dpo_stage(ctx, corpus, backbone, policy, rec),
    }
}

fn train_backbone(
    ctx: &Ctx,
    stage: StageId,
    corpus: Option<&Path>,
    backbone: Option<&Path>,
    rec: &mut RunRecord,
) -> CliResult<String> {
    let opts = align_options(stage, ctx.config_text.as_deref(), ctx.seed)?;
    rec.seed = Some(opts.schedule.seed);
    let (mut model, world, mut completed, data) = if stage == StageId::Pretrain {
        let world = World::new(opts.world_seed);
        let model = Backbone::new(opts.backbone.clone(), &world)?;
        let data = StageData::Text {
            world: world.clone(),
            samples: opts.samples,
        };
        (model, world, Vec::new(), data)
    } else {
        let (model, world, completed) = load_backbone(need(backbone, "--backbone")?, rec)?;
        // ordering is checked before any corpus is read
        stage.check_ready(&completed)?;
        let corpus = need(corpus, "--corpus")?;
        let stem = match stage {
            StageId::I => "speech_text",
            StageId::II => "image_text",
            _ => "instruct",
        };
        let path = corpus_file(corpus, stem);
        let records = read_records(&path, rec)?;
        check_world(corpus, &world)?;
        let data = match stage {
            StageId::I => StageData::SpeechText(speech_text_examples(&records)?),
            StageId::II => StageData::ImageText(image_text_examples(&records)?),
            _ => StageData::Instruct(instruct_examples(&records)?),
        };
        (model, world, completed, data)
    };
    let before = group_checksums(&model);
    let metrics = run_stage(&mut model, &opts.schedule, &data, &mut completed)?;
    let after = group_checksums(&model);
    let tag = stage.name();
    let ckpt = format!("backbone-{tag}.oomn");
    model.save(&ctx.out.join(&ckpt), world.seed(), &completed)?;
    rec.output(ckpt.clone());
    rec.output(format!("{ckpt}.json"));
    write_out(ctx, rec, &format!("metrics-{tag}.csv"), &metrics_csv(&metrics))?;
    let summary = StageSummary {
        stage,
        steps: metrics.len(),
        first_loss: metrics.first().map_or(f64::NAN, |m| m.loss),
        final_epoch_loss: final_epoch_mean(&metrics, opts.schedule.epochs),
        completed: completed.clone(),
        checksums_before: before,
        checksums_after: after,
    };
    write_json(ctx, rec, &format!("final-{tag}.json"), &summary)?;

    let mut t = Table::new("summary", &format!("Stage {tag}"), &["field", "value"]);
    t.push(vec!["steps".into(), summary.steps.to_string()]);
    t.push(vec!["first_loss".into(), num(summary.first_loss)]);
    t.push(vec!["final_epoch_loss".into(), num(summary.final_epoch_loss)]);
    for (g, c) in &summary.checksums_after {
        let changed = summary.checksums_before[g] != *c;
        t.push(vec![format!("{g} changed"), changed.to_string()]);
    }
    let mut report = Report::new(&format!("train-{tag}"));
    report.tables.push(t);
    write_report(ctx, rec, &report)
}

fn final_epoch_mean(metrics: &[StepMetric], epochs: usize) -> f64 {
    if metrics.is_empty() {
        return f64::NAN;
    }
    let per_epoch = (metrics.len() / epochs.max(1)).max(1);
    let tail = &metrics[metrics.len() - per_epoch..];
    tail.iter().map(|m| m.loss).sum::<f64>() / tail.len() as f64
}

fn decoder_config(ctx: &Ctx, mode: DecoderMode, backbone: &Backbone) -> CliResult<(SpeechDecoderConfig, DecoderTrainOptions)> {
    let (mut cfg, mut opts) = match &ctx.config_text {
        Some(t) => SpeechDecoderConfig::parse(t)?,
        None => (SpeechDecoderConfig::default(), DecoderTrainOptions::default()),
    };
    cfg.mode = mode;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
        opts.seed = s;
    }
    if cfg.dim != backbone.dim() {
        return Err(CliError::invalid(format!(
            "decoder dim {} must equal the backbone width {}",
            cfg.dim,
            backbone.dim()
        )));
    }
    Ok((cfg, opts))
}

#[derive(Serialize)]
struct DecoderSummary {
    mode: DecoderMode,
    tgm: bool,
    experts: usize,
    layers: usize,
    steps: usize,
    skipped: usize,
    final_loss: f64,
    last_epoch_loss: f64,
}

fn train_decoder_stage(
    ctx: &Ctx,
    mode: DecoderMode,
    corpus: Option<&Path>,
    backbone: Option<&Path>,
    rec: &mut RunRecord,
) -> CliResult<String> {
    let (bb, world, completed) = load_backbone(need(backbone, "--backbone")?, rec)?;
    StageId::IV.check_ready(&completed)?;
    let corpus = need(corpus, "--corpus")?;
    let records = read_records(&corpus_file(corpus, "supervised"), rec)?;
    check_world(corpus, &world)?;
    let examples = decoder_examples(&bb, &records)?;
    let (cfg, opts) = decoder_config(ctx, mode, &bb)?;
    rec.seed = Some(opts.seed);
    let mut dec = SpeechDecoder::new(cfg)?;
    let report = train_decoder(&mut dec, &examples, &opts)?;
    dec.store.freeze_all();
    let tag = format!("decoder-{mode}");
    let ckpt = format!("{tag}.oomn");
    dec.save(&ctx.out.join(&ckpt))?;
    rec.output(ckpt.clone());
    rec.output(format!("{ckpt}.cfg"));
    write_out(ctx, rec, &format!("loss-{tag}.csv"), &report.csv())?;
    let summary = decoder_summary(&dec, &report);
    write_json(ctx, rec, &format!("final-{tag}.json"), &summary)?;
    let mut t = Table::new("summary", &format!("Decoder {mode}"), &["field", "value"]);
    t.push(vec!["tgm".into(), if summary.tgm { "on" } else { "off" }.into()]);
    t.push(vec!["steps".into(), summary.steps.to_string()]);
    t.push(vec!["skipped".into(), summary.skipped.to_string()]);
    t.push(vec!["final_loss".into(), num(summary.final_loss)]);
    t.push(vec!["last_epoch_loss".into(), num(summary.last_epoch_loss)]);
    let mut r = Report::new(&format!("train-{tag}"));
    r.tables.push(t);
    write_report(ctx, rec, &r)
}

fn decoder_summary(dec: &SpeechDecoder, report: &TrainReport) -> DecoderSummary {
    DecoderSummary {
        mode: dec.config.mode,
        tgm: dec.config.tgm,
        experts: dec.config.experts,
        layers: dec.config.layers,
        steps: report.curve.len(),
        skipped: report.skipped,
        final_loss: report.final_loss(),
        last_epoch_loss: report.last_epoch_loss(),
    }
}

#[derive(Serialize)]
struct DpoSummary {
    steps: usize,
    first_loss: f64,
    final_loss: f64,
    preference_accuracy_before: f64,
    preference_accuracy_after: f64,
}

fn train_dpo_stage(
    ctx: &Ctx,
    corpus: Option<&Path>,
    backbone: Option<&Path>,
    policy: Option<&Path>,
    rec: &mut RunRecord,
) -> CliResult<String> {
    let (bb, world, completed) = load_backbone(need(backbone, "--backbone")?, rec)?;
    // a decoder checkpoint stands for a completed stage IV
    StageId::IV.check_ready(&completed)?;
    let policy_path = need(policy, "--policy")?;
    let base = load_decoder(policy_path, rec)?;
    if base.mode() != DecoderMode::Nar {
        return Err(CliError::new(
            exit::KIND_MISMATCH,
            format!("{} is an AR decoder; preference optimization needs NAR", policy_path.display()),
        ));
    }
    check_decoder_fits(&base, &bb)?;
    let cfg = dpo_options(ctx.config_text.as_deref(), ctx.seed)?;
    rec.seed = Some(cfg.seed);
    let corpus = need(corpus, "--corpus")?;
    let records = read_records(&corpus_file(corpus, "preference"), rec)?;
    check_world(corpus, &world)?;
    let pairs = preference_pairs(&bb, &records)?;
    let reference = frozen_reference(&base);
    let mut policy = frozen_reference(&base);
    let before = preference_accuracy(&policy, &pairs)?;
    let rows = train_dpo(&mut policy, &reference, &pairs, &cfg)?;
    let after = preference_accuracy(&policy, &pairs)?;
    policy.save(&ctx.out.join("dpo-policy.oomn"))?;
    rec.output("dpo-policy.oomn");
    rec.output("dpo-policy.oomn.cfg");
    write_out(ctx, rec, "dpo-metrics.csv", &dpo_metrics_csv(&rows))?;
    let summary = DpoSummary {
        steps: rows.len(),
        first_loss: rows.first().map_or(f64::NAN, |r| r.loss),
        final_loss: rows.last().map_or(f64::NAN, |r| r.loss),
        preference_accuracy_before: before,
        preference_accuracy_after: after,
    };
    write_json(ctx, rec, "final-dpo.json", &summary)?;
    let mut t = Table::new("summary", "Preference optimization", &["field", "value"]);
    t.push(vec!["steps".into(), summary.steps.to_string()]);
    t.push(vec!["first_loss".into(), num(summary.first_loss)]);
    t.push(vec!["final_loss".into(), num(summary.final_loss)]);
    t.push(vec!["preference_accuracy_before".into(), num(before)]);
    t.push(vec!["preference_accuracy_after".into(), num(after)]);
    let mut r = Report::new("train-dpo");
    r.tables.push(t);
    write_report(ctx, rec, &r)
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs<'a> {
    checkpoint: Option<&'a Path>,
    baseline: Option<&'a Path>,
    backbone: Option<&'a Path>,
    corpus: Option<&'a Path>,
    frames: usize,
    vocab: usize,
}

fn eval(ctx: &Ctx, metric: Metric, a: &EvalArgs, rec: &mut RunRecord) -> CliResult<String> {
    let report = match metric {
        Metric::Uer => eval_uer(a, rec)?,
        Metric::EmotionAcc => eval_emotion(a, rec)?,
        Metric::PrefAcc => eval_preference(a, rec)?,
        Metric::ZeroShot => eval_zero_shot(ctx, a, rec)?,
        Metric::PartitionCheck => eval_partition(ctx, a)?,
    };
    write_report(ctx, rec, &report)
}

/// Loads the backbone and the decoders named in `a`, checking that they
/// fit together and that the corpus matches the backbone's world.
fn decoder_eval_inputs(
    a: &EvalArgs,
    stem: &str,
    rec: &mut RunRecord,
) -> CliResult<(Backbone, Vec<SampleRecord>, Vec<(String, SpeechDecoder)>)> {
    let ckpt = need(a.checkpoint, "--checkpoint")?;
    let mut decoders = vec![(label(ckpt), load_decoder(ckpt, rec)?)];
    if let Some(b) = a.baseline {
        decoders.insert(0, (label(b), load_decoder(b, rec)?));
    }
    let (bb, world, _) = load_backbone(need(a.backbone, "--backbone")?, rec)?;
    for (_, d) in &decoders {
        check_decoder_fits(d, &bb)?;
    }
    let corpus = need(a.corpus, "--corpus")?;
    let records = read_records(&corpus_file(corpus, stem), rec)?;
    check_world(corpus, &world)?;
    Ok((bb, records, decoders))
}

fn label(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |f| f.to_string_lossy().into_owned())
}

fn eval_uer(a: &EvalArgs, rec: &mut RunRecord) -> CliResult<Report> {
    let (bb, records, decoders) = decoder_eval_inputs(a, "supervised", rec)?;
    let examples = decoder_examples(&bb, &records)?;
    let mut t = Table::new("uer", "Unit error rate", &["model", "language", "samples", "uer"]);
    for (name, dec) in &decoders {
        let r = evaluate_uer(dec, &examples)?;
        for lang in Language::BOTH {
            if let Some(u) = r.per_language.get(&lang) {
                let n = examples.iter().filter(|e| e.lang == lang).count();
                t.push(vec![name.clone(), lang.to_string(), n.to_string(), num(*u)]);
            }
        }
        t.push(vec![name.clone(), "overall".into(), r.samples.to_string(), num(r.overall)]);
    }
    let mut report = Report::new("eval-uer");
    report.tables.push(t);
    Ok(report)
}

fn eval_emotion(a: &EvalArgs, rec: &mut RunRecord) -> CliResult<Report> {
    let (bb, records, decoders) = decoder_eval_inputs(a, "preference", rec)?;
    let pairs = preference_pairs(&bb, &records)?;
    let results: Vec<(String, EmotionReport)> = decoders
        .iter()
        .map(|(n, d)| Ok((n.clone(), emotion_accuracy(d, &pairs)?)))
        .collect::<CliResult<_>>()?;

    let mut by_lang = Table::new(
        "by_language",
        "Emotion accuracy by language",
        &["model", "lang_a", "lang_b", "overall"],
    );
    for (name, r) in &results {
        by_lang.push(vec![
            name.clone(),
            num(r.language_accuracy(Language::A)),
            num(r.language_accuracy(Language::B)),
            num(r.accuracy()),
        ]);
    }
    let mut header = vec!["emotion".to_string(), "samples".to_string()];
    header.extend(results.iter().map(|(n, _)| n.clone()));
    let mut by_emotion = Table {
        name: "by_emotion".into(),
        title: "Emotion accuracy by target emotion".into(),
        header,
        rows: Vec::new(),
    };
    let emotions: Vec<EmotionLabel> = results[0].1.per_emotion.keys().copied().collect();
    for e in emotions {
        let mut row = vec![e.to_string(), results[0].1.per_emotion[&e].1.to_string()];
        for (_, r) in &results {
            let (c, n) = r.per_emotion.get(&e).copied().unwrap_or((0, 0));
            row.push(num(if n == 0 { 0.0 } else { c as f64 / n as f64 }));
        }
        by_emotion.push(row);
    }
    let mut report = Report::new("eval-emotion-acc");
    report.tables.push(by_lang);
    report.tables.push(by_emotion);
    Ok(report)
}

fn eval_preference(a: &EvalArgs, rec: &mut RunRecord) -> CliResult<Report> {
    let (bb, records, decoders) = decoder_eval_inputs(a, "preference", rec)?;
    let pairs = preference_pairs(&bb, &records)?;
    let mut t = Table::new(
        "pref",
        "Preference accuracy (winner scored above loser)",
        &["model", "lang_a", "lang_b", "overall"],
    );
    for (name, d) in &decoders {
        let mut row = vec![name.clone()];
        for lang in Language::BOTH {
            let subset: Vec<PreferencePair> = pairs.iter().filter(|p| p.lang == lang).cloned().collect();
            row.push(if subset.is_empty() {
                "-".into()
            } else {
                num(preference_accuracy(d, &subset)?)
            });
        }
        row.push(num(preference_accuracy(d, &pairs)?));
        t.push(row);
    }
    let mut report = Report::new("eval-pref-acc");
    report.tables.push(t);
    Ok(report)
}

pub const PROBE_SEED: u64 = 99;
pub const PROBE_PER_TEMPLATE: usize = 3;

fn eval_zero_shot(ctx: &Ctx, a: &EvalArgs, rec: &mut RunRecord) -> CliResult<Report> {
    let path = a
        .checkpoint
        .or(a.backbone)
        .ok_or_else(|| CliError::new(exit::MISSING_INPUT, "missing input: --checkpoint is required"))?;
    let (bb, world, _) = load_backbone(path, rec)?;
    let noise = a.corpus.and_then(corpus_spec).map_or(CorpusSpec::default().noise, |s| s.noise);
    let items = probe_set(&world, ctx.seed.unwrap_or(PROBE_SEED), PROBE_PER_TEMPLATE, noise)?;
    let trained = quasi_zero_shot_probe(&bb, &items)?;
    let null = quasi_zero_shot_probe(&Backbone::new(bb.config.clone(), &world)?, &items)?;
    let mut t = Table::new(
        "zero_shot",
        "Spoken versus written image questions",
        &["model", "similarity", "speech_acc", "text_acc", "held_out_text_acc", "ratio", "chance"],
    );
    let row = |name: &str, r: &ProbeReport| {
        let ratio = if r.text_accuracy > 0.0 {
            r.speech_accuracy / r.text_accuracy
        } else {
            0.0
        };
        vec![
            name.to_string(),
            num(r.similarity),
            num(r.speech_accuracy),
            num(r.text_accuracy),
            num(r.held_out_text_accuracy),
            num(ratio),
            num(r.chance),
        ]
    };
    t.push(row(&label(path), &trained));
    t.push(row("untrained", &null));
    let mut report = Report::new("eval-zero-shot");
    report.tables.push(t);
    Ok(report)
}

fn eval_partition(ctx: &Ctx, a: &EvalArgs) -> CliResult<Report> {
    if a.frames == 0 || a.vocab < 2 {
        return Err(CliError::invalid("partition-check needs --frames >= 1 and --vocab >= 2"));
    }
    let targets = feasible_targets(a.frames, a.vocab)?.len();
    let uniform = Tensor::new(
        vec![a.frames, a.vocab],
        vec![-(a.vocab as f64).ln(); a.frames * a.vocab],
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed.unwrap_or(0));
    let logits = normal_tensor(&mut rng, &[a.frames, a.vocab], 2.0);
    let mut random = logits.clone();
    for r in 0..a.frames {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        for (k, x) in row.iter().enumerate() {
            random.data_mut()[r * a.vocab + k] = x - lse;
        }
    }
    let mut t = Table::new(
        "partition",
        "Total probability over collapsed targets",
        &["model", "frames", "vocab", "targets", "total", "deviation"],
    );
    for (name, lp) in [("uniform", &uniform), ("random", &random)] {
        let total = partition_sum(lp)?;
        t.push(vec![
            name.into(),
            a.frames.to_string(),
            a.vocab.to_string(),
            targets.to_string(),
            format!("{total:.12}"),
            format!("{:.3e}", (total - 1.0).abs()),
        ]);
    }
    let mut report = Report::new("eval-partition-check");
    report.tables.push(t);
    Ok(report)
}

// ---- bench-latency --------------------------------------------------------

/// Supervised records paired with their conditioning.
fn contexts(bb: &Backbone, path: &Path, rec: &mut RunRecord) -> CliResult<(Vec<String>, Vec<DecoderExample>)> {
    let records = read_records(&corpus_file(path, "supervised"), rec)?;
    let ids = records.iter().map(|r| r.id.clone()).collect();
    Ok((ids, decoder_examples(bb, &records)?))
}

fn guidance<'a>(d: &SpeechDecoder, ex: &'a DecoderExample) -> Option<&'a Tensor> {
    d.config.tgm.then_some(&ex.text)
}

fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

#[allow(clippy::too_many_arguments)]
fn bench_latency(
    ctx: &Ctx,
    ar_path: &Path,
    nar_path: &Path,
    backbone: &Path,
    contexts_path: &Path,
    min_len: usize,
    limit: Option<usize>,
    rec: &mut RunRecord,
) -> CliResult<String> {
    let ar = load_decoder(ar_path, rec)?;
    let nar = load_decoder(nar_path, rec)?;
    for (d, want, p) in [(&ar, DecoderMode::Ar, ar_path), (&nar, DecoderMode::Nar, nar_path)] {
        if d.mode() != want {
            return Err(CliError::new(
                exit::KIND_MISMATCH,
                format!("{} is a {} decoder, expected {want}", p.display(), d.mode()),
            ));
        }
    }
    let (bb, world, _) = load_backbone(backbone, rec)?;
    check_decoder_fits(&ar, &bb)?;
    check_decoder_fits(&nar, &bb)?;
    let (ids, mut examples) = contexts(&bb, contexts_path, rec)?;
    check_world(contexts_path, &world)?;
    if let Some(n) = limit {
        examples.truncate(n);
    }
    let mut per = Table::new(
        "contexts",
        "Sequential decoder steps per context",
        &["id", "lang", "ar_units", "ar_steps", "nar_units", "nar_steps", "ratio"],
    );
    let mut clock = String::from("id,ar_seconds,nar_seconds\n");
    let (mut all, mut gated) = (Vec::new(), Vec::new());
    let mut nar_all_one = true;
    let mut ratio_covers_length = true;
    for (id, ex) in ids.iter().zip(&examples) {
        let t0 = Instant::now();
        let ga = ar.generate(&ex.cond, guidance(&ar, ex))?;
        let t1 = Instant::now();
        let gn = nar.generate(&ex.cond, guidance(&nar, ex))?;
        let t2 = Instant::now();
        let ratio = ga.steps as f64 / gn.steps as f64;
        nar_all_one &= gn.steps == 1;
        ratio_covers_length &= ratio >= ga.units.len() as f64;
        all.push(ratio);
        if ga.units.len() >= min_len {
            gated.push(ratio);
        }
        per.push(vec![
            id.clone(),
            ex.lang.to_string(),
            ga.units.len().to_string(),
            ga.steps.to_string(),
            gn.units.len().to_string(),
            gn.steps.to_string(),
            num(ratio),
        ]);
        clock.push_str(&format!(
            "{id},{:.6},{:.6}\n",
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64()
        ));
    }
    let mut summary = Table::new("summary", "AR/NAR step ratio", &["field", "value"]);
    summary.push(vec!["contexts".into(), all.len().to_string()]);
    summary.push(vec![format!("contexts with ar_units >= {min_len}"), gated.len().to_string()]);
    summary.push(vec!["median ratio".into(), num(median(&mut all.clone()))]);
    summary.push(vec![format!("median ratio, ar_units >= {min_len}"), num(median(&mut gated))]);
    summary.push(vec![
        "min ratio".into(),
        num(all.iter().cloned().fold(f64::INFINITY, f64::min)),
    ]);
    summary.push(vec!["nar steps all 1".into(), nar_all_one.to_string()]);
    summary.push(vec!["ratio >= ar_units everywhere".into(), ratio_covers_length.to_string()]);
    // timings vary between runs, so they stay out of the report proper
    write_file(&ctx.out.join("bench-latency.wallclock.csv"), &clock)?;
    rec.volatile.push("bench-latency.wallclock.csv".into());
    let mut report = Report::new("bench-latency");
    report.tables.push(summary);
    report.tables.push(per);
    write_report(ctx, rec, &report)
}

// ---- ablate ---------------------------------------------------------------

struct Grid {
    experts: Vec<usize>,
    layers: Vec<usize>,
    tgm: Vec<Toggle>,
    repeats: usize,
    holdout: f64,
}

#[derive(Clone, Debug)]
struct Cell {
    id: usize,
    experts: usize,
    layers: usize,
    tgm: bool,
    repeat: usize,
    seed: u64,
}

#[derive(Clone, Debug)]
struct CellResult {
    final_loss: f64,
    first_epoch_loss: f64,
    uer: BTreeMap<Language, f64>,
    overall: f64,
    csv: String,
}

impl CellResult {
    /// Non-converged: loss is not finite or fell less than half from the
    /// first epoch.
    fn converged(&self) -> bool {
        self.final_loss.is_finite() && self.final_loss < 0.5 * self.first_epoch_loss
    }
}

fn grid_cells(grid: &Grid, base_seed: u64) -> Vec<Cell> {
    let mut cells = Vec::new();
    let mut index = 0u64;
    for &e in &grid.experts {
        for &l in &grid.layers {
            for repeat in 0..grid.repeats {
                // cells that differ only in the TGM flag share a seed
                let seed = base_seed ^ index;
                index += 1;
                for t in &grid.tgm {
                    cells.push(Cell {
                        id: cells.len(),
                        experts: e,
                        layers: l,
                        tgm: t.on(),
                        repeat,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

fn run_cell(
    cell: &Cell,
    base: &SpeechDecoderConfig,
    opts: &DecoderTrainOptions,
    train: &[DecoderExample],
    test: &[DecoderExample],
) -> unitforge::Result<CellResult> {
    let cfg = SpeechDecoderConfig {
        mode: DecoderMode::Nar,
        experts: cell.experts,
        layers: cell.layers,
        tgm: cell.tgm,
        seed: cell.seed,
        ..base.clone()
    };
    let opts = DecoderTrainOptions {
        seed: cell.seed,
        ..opts.clone()
    };
    let mut dec = SpeechDecoder::new(cfg)?;
    let report = train_decoder(&mut dec, train, &opts)?;
    let first_epoch = report.curve[..report.steps_per_epoch.min(report.curve.len())]
        .iter()
        .map(|r| r.loss)
        .sum::<f64>()
        / report.steps_per_epoch.min(report.curve.len()).max(1) as f64;
    let uer = evaluate_uer(&dec, test)?;
    Ok(CellResult {
        final_loss: report.last_epoch_loss(),
        first_epoch_loss: first_epoch,
        uer: uer.per_language,
        overall: uer.overall,
        csv: report.csv(),
    })
}

fn ablate(ctx: &Ctx, grid: &Grid, backbone: &Path, corpus: &Path, rec: &mut RunRecord) -> CliResult<String> {
    if grid.experts.is_empty() || grid.layers.is_empty() || grid.tgm.is_empty() || grid.repeats == 0 {
        return Err(CliError::invalid("ablation grid is empty"));
    }
    if !(0.0 < grid.holdout && grid.holdout < 1.0) {
        return Err(CliError::invalid(format!("holdout {} must lie in (0, 1)", grid.holdout)));
    }
    let (bb, world, completed) = load_backbone(backbone, rec)?;
    StageId::IV.check_ready(&completed)?;
    let records = read_records(&corpus_file(corpus, "supervised"), rec)?;
    check_world(corpus, &world)?;
    let mut examples = decoder_examples(&bb, &records)?;
    let (base, opts) = decoder_config(ctx, DecoderMode::Nar, &bb)?;
    let base_seed = ctx.seed.unwrap_or(base.seed);
    rec.seed = Some(base_seed);
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(base_seed));
    let n_test = ((examples.len() as f64 * grid.holdout).round() as usize).clamp(1, examples.len() - 1);
    let test = examples.split_off(examples.len() - n_test);
    let cells = grid_cells(grid, base_seed);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.workers)
        .build()
        .map_err(|e| CliError::new(exit::FAILURE, format!("worker pool: {e}")))?;
    let results: Vec<Result<CellResult, String>> = pool.install(|| {
        cells
            .par_iter()
            .map(|c| {
                log::info!("cell {}: experts {} layers {} tgm {}", c.id, c.experts, c.layers, c.tgm);
                run_cell(c, &base, &opts, &examples, &test).map_err(|e| e.to_string())
            })
            .collect()
    });

    let cell_dir = ctx.out.join("ablate-cells");
    fs::create_dir_all(&cell_dir).map_err(|e| io_error(&cell_dir, e))?;
    let mut t = Table::new(
        "cells",
        "Ablation cells",
        &[
            "cell", "experts", "layers", "tgm", "repeat", "seed", "status", "final_loss", "uer_a", "uer_b", "uer",
        ],
    );
    let mut failures = 0;
    for (c, r) in cells.iter().zip(&results) {
        let tgm = if c.tgm { "on" } else { "off" };
        let head = vec![
            c.id.to_string(),
            c.experts.to_string(),
            c.layers.to_string(),
            tgm.to_string(),
            c.repeat.to_string(),
            c.seed.to_string(),
        ];
        let tail = match r {
            Ok(r) => {
                let name = format!("ablate-cells/cell-{:03}.loss.csv", c.id);
                write_out(ctx, rec, &name, &r.csv)?;
                let lang = |l| r.uer.get(&l).map_or("-".to_string(), |u| num(*u));
                vec![
                    if r.converged() { "ok" } else { "not converged" }.to_string(),
                    num(r.final_loss),
                    lang(Language::A),
                    lang(Language::B),
                    num(r.overall),
                ]
            }
            Err(e) => {
                failures += 1;
                log::warn!("cell {} failed: {e}", c.id);
                vec![format!("failed: {e}"), "-".into(), "-".into(), "-".into(), "-".into()]
            }
        };
        t.push([head, tail].concat());
    }

    let ok: Vec<(&Cell, &CellResult)> = cells
        .iter()
        .zip(&results)
        .filter_map(|(c, r)| r.as_ref().ok().map(|r| (c, r)))
        .collect();
    let mean_uer = |filter: &dyn Fn(&Cell) -> bool, lang: Language| {
        let v: Vec<f64> = ok
            .iter()
            .filter(|(c, _)| filter(c))
            .filter_map(|(_, r)| r.uer.get(&lang).copied())
            .collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };

    let mut by_experts = Table::new("experts", "Mean UER by expert count", &["experts", "uer_a", "uer_b"]);
    for &e in &grid.experts {
        by_experts.push(vec![
            e.to_string(),
            num(mean_uer(&|c| c.experts == e, Language::A)),
            num(mean_uer(&|c| c.experts == e, Language::B)),
        ]);
    }
    let mut by_layers = Table::new("layers", "Mean UER by layer count", &["layers", "uer_a", "uer_b"]);
    for &l in &grid.layers {
        by_layers.push(vec![
            l.to_string(),
            num(mean_uer(&|c| c.layers == l, Language::A)),
            num(mean_uer(&|c| c.layers == l, Language::B)),
        ]);
    }
    let mut best = Table::new("best_layers", "Best layer count per language", &["language", "layers", "uer"]);
    for lang in Language::BOTH {
        let arg = grid
            .layers
            .iter()
            .map(|&l| (l, mean_uer(&|c| c.layers == l, lang)))
            .filter(|(_, u)| u.is_finite())
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((l, u)) = arg {
            best.push(vec![lang.to_string(), l.to_string(), num(u)]);
        }
    }
    let mut pairs = Table::new(
        "tgm_pairs",
        "Final loss with and without text guidance",
        &["experts", "layers", "repeat", "seed", "loss_on", "loss_off", "on_lower"],
    );
    let mut on_lower = 0;
    for (c_on, r_on) in ok.iter().filter(|(c, _)| c.tgm) {
        let partner = ok
            .iter()
            .find(|(c, _)| !c.tgm && c.seed == c_on.seed && c.experts == c_on.experts && c.layers == c_on.layers);
        if let Some((_, r_off)) = partner {
            let lower = r_on.final_loss < r_off.final_loss;
            on_lower += usize::from(lower);
            pairs.push(vec![
                c_on.experts.to_string(),
                c_on.layers.to_string(),
                c_on.repeat.to_string(),
                c_on.seed.to_string(),
                num(r_on.final_loss),
                num(r_off.final_loss),
                lower.to_string(),
            ]);
        }
    }
    let mut summary = Table::new("summary", "Grid summary", &["field", "value"]);
    summary.push(vec!["cells".into(), cells.len().to_string()]);
    summary.push(vec!["failed".into(), failures.to_string()]);
    summary.push(vec!["train samples".into(), examples.len().to_string()]);
    summary.push(vec!["held-out samples".into(), test.len().to_string()]);
    summary.push(vec!["tgm pairs with lower loss on".into(), format!("{on_lower}/{}", pairs.rows.len())]);

    let mut report = Report::new("ablate");
    report.tables.extend([summary, t, by_experts, by_layers, best, pairs]);
    let text = write_report(ctx, rec, &report)?;
    if failures == cells.len() {
        if !ctx.quiet {
            print!("{text}");
        }
        return Err(CliError::new(exit::FAILURE, "every ablation cell failed"));
    }
    Ok(text)
}

// ---- decode ---------------------------------------------------------------

#[derive(Serialize)]
struct Decoded<'a> {
    id: &'a str,
    lang: Language,
    emotion: EmotionLabel,
    units: Vec<u32>,
    steps: usize,
    truncated: bool,
}

fn decode(ctx: &Ctx, checkpoint: &Path, backbone: &Path, contexts_path: &Path, rec: &mut RunRecord) -> CliResult<String> {
    let dec = load_decoder(checkpoint, rec)?;
    let (bb, world, _) = load_backbone(backbone, rec)?;
    check_decoder_fits(&dec, &bb)?;
    let path = corpus_file(contexts_path, "supervised");
    let records = read_records(&path, rec)?;
    check_world(contexts_path, &world)?;
    let mut out = String::new();
    for r in &records {
        let (lang, emotion, context, response) = match &r.payload {
            Payload::SupervisedUnits {
                lang,
                emotion,
                context,
                response,
                ..
            }
            | Payload::Preference {
                lang,
                emotion,
                context,
                response,
                ..
            } => (*lang, *emotion, context, response),
            other => {
                return Err(CliError::new(
                    exit::KIND_MISMATCH,
                    format!("{}: {} records carry no dialogue context", r.id, other.kind()),
                ))
            }
        };
        let (cond, text) = bb.condition_features(context, response)?;
        let g = dec.generate(&cond, dec.config.tgm.then_some(&text))?;
        let line = Decoded {
            id: &r.id,
            lang,
            emotion,
            units: g.units.as_slice().to_vec(),
            steps: g.steps,
            truncated: g.truncated,
        };
        out.push_str(&serde_json::to_string(&line).map_err(unitforge::Error::from)?);
        out.push('\n');
    }
    write_out(ctx, rec, "decoded.jsonl", &out)?;
    Ok(format!("decoded {} contexts into {}\n", records.len(), ctx.out.join("decoded.jsonl").display()))
}

// ---- replay ---------------------------------------------------------------

/// Reruns a recorded command into the current `--out` and compares every
/// non-volatile output digest with the recorded one.
pub fn replay(ctx: &Ctx, manifest_path: &Path) -> CliResult<RunManifest> {
    require_input(manifest_path)?;
    let recorded = RunManifest::read(manifest_path)?;
    for input in &recorded.inputs {
        let p = Path::new(&input.path);
        require_input(p)?;
        if sha256_file(p)? != input.sha256 {
            return Err(CliError::new(
                exit::FAILURE,
                format!("input {} changed since the recorded run", input.path),
            ));
        }
    }
    if Path::new(&recorded.out_dir) == ctx.out {
        return Err(CliError::invalid("replay needs an --out different from the recorded output directory"));
    }
    let mut args = crate::manifest::strip_out(&recorded.args);
    args.push("--out".into());
    args.push(ctx.out.display().to_string());
    let argv = std::iter::once("unitforge".to_string()).chain(args.iter().cloned());
    let cli = <Cli as clap::Parser>::try_parse_from(argv).map_err(|e| CliError::invalid(e.to_string()))?;
    let rerun = execute(&cli, &args)?;

    let mut t = Table::new("outputs", "Replayed outputs", &["path", "status"]);
    let mut differ = 0;
    for o in &recorded.outputs {
        let status = if recorded.volatile.contains(&o.path) {
            "volatile"
        } else {
            match rerun.outputs.iter().find(|x| x.path == o.path) {
                Some(x) if x.sha256 == o.sha256 => "identical",
                Some(_) => {
                    differ += 1;
                    "differs"
                }
                None => {
                    differ += 1;
                    "missing"
                }
            }
        };
        t.push(vec![o.path.clone(), status.into()]);
    }
    let mut report = Report::new("replay");
    report.tables.push(t);
    report.write(&ctx.out)?;
    if !ctx.quiet {
        print!("{}", report.render(ctx.format));
    }
    if differ > 0 {
        return Err(CliError::new(
            exit::FAILURE,
            format!("{differ} output(s) differ from {}", manifest_path.display()),
        ));
    }
    Ok(rerun)
}
