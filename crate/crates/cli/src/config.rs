//! `key = value` configuration files for the training stages. Decoder
//! stages use the decoder's own parser; everything else goes through here.

use std::collections::BTreeMap;
use std::str::FromStr;

use unitforge::alignment::{BackboneConfig, StageId, StageSchedule};
use unitforge::data::DEFAULT_WORLD_SEED;
use unitforge::preference::DpoConfig;

use crate::error::{CliError, CliResult};

/// Parsed entries, each with its 1-based line number.
#[derive(Debug, Default)]
pub struct KvFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::invalid(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            if entries.insert(k.trim().to_string(), (n + 1, v.trim().to_string())).is_some() {
                return Err(CliError::invalid(format!("line {}: duplicate key {:?}", n + 1, k.trim())));
            }
        }
        Ok(KvFile { entries })
    }

    /// Removes and parses `key` if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> CliResult<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::invalid(format!("line {line}: bad value {v:?} for {key}"))),
        }
    }

    pub fn take_flag(&mut self, key: &str) -> CliResult<Option<bool>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => match v.as_str() {
                "on" | "true" | "1" => Ok(Some(true)),
                "off" | "false" | "0" => Ok(Some(false)),
                _ => Err(CliError::invalid(format!("line {line}: {key} expects on or off, got {v:?}"))),
            },
        }
    }

    /// Errors on any key nobody consumed.
    pub fn finish(self) -> CliResult<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(CliError::invalid(format!("line {line}: unknown key {k:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignOptions {
    pub schedule: StageSchedule,
    /// Pretraining only: text sequences sampled per epoch.
    pub samples: usize,
    pub backbone: BackboneConfig,
    pub world_seed: u64,
}

pub const DEFAULT_PRETRAIN_SAMPLES: usize = 60_000;

pub fn align_options(stage: StageId, text: Option<&str>, seed: Option<u64>) -> CliResult<AlignOptions> {
    let mut kv = KvFile::parse(text.unwrap_or(""))?;
    let mut s = StageSchedule::default_for(stage);
    if let Some(v) = kv.take("lr")? {
        s.lr = v;
    }
    if let Some(v) = kv.take("batch")? {
        s.batch = v;
    }
    if let Some(v) = kv.take("epochs")? {
        s.epochs = v;
    }
    if let Some(v) = kv.take("warmup")? {
        s.warmup_ratio = v;
    }
    if let Some(v) = kv.take("seed")? {
        s.seed = v;
    }
    if let Some(v) = kv.take_flag("freeze_llm")? {
        s.freeze_llm = v;
    }
    if let Some(v) = seed {
        s.seed = v ^ stage as u64;
    }
    let mut opts = AlignOptions {
        schedule: s,
        samples: DEFAULT_PRETRAIN_SAMPLES,
        backbone: BackboneConfig::default(),
        world_seed: DEFAULT_WORLD_SEED,
    };
    if stage == StageId::Pretrain {
        if let Some(v) = kv.take("samples")? {
            opts.samples = v;
        }
        if let Some(v) = kv.take("dim")? {
            opts.backbone.dim = v;
        }
        if let Some(v) = kv.take("heads")? {
            opts.backbone.heads = v;
        }
        if let Some(v) = kv.take("layers")? {
            opts.backbone.layers = v;
        }
        if let Some(v) = kv.take("max_len")? {
            opts.backbone.max_len = v;
        }
        if let Some(v) = kv.take("model_seed")? {
            opts.backbone.seed = v;
        }
        if let Some(v) = kv.take("world_seed")? {
            opts.world_seed = v;
        }
    }
    kv.finish()?;
    opts.schedule.validate()?;
    Ok(opts)
}

pub fn dpo_options(text: Option<&str>, seed: Option<u64>) -> CliResult<DpoConfig> {
    let mut kv = KvFile::parse(text.unwrap_or(""))?;
    let mut c = DpoConfig::default();
    if let Some(v) = kv.take("beta")? {
        c.beta = v;
    }
    if let Some(v) = kv.take("lr")? {
        c.lr = v;
    }
    if let Some(v) = kv.take("batch")? {
        c.batch = v;
    }
    if let Some(v) = kv.take("epochs")? {
        c.epochs = v;
    }
    if let Some(v) = kv.take("warmup")? {
        c.warmup_ratio = v;
    }
    if let Some(v) = kv.take("seed")? {
        c.seed = v;
    }
    kv.finish()?;
    if let Some(v) = seed {
        c.seed = v;
    }
    c.validate()?;
    Ok(c)
}
