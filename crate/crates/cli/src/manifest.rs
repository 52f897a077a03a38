//! Run manifests: what a command read, what it wrote, and with which
//! settings, so a run can be replayed and its outputs compared.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_error, CliResult};

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub tool: String,
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    pub config: Option<FileDigest>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to `out_dir`.
    pub outputs: Vec<FileDigest>,
    /// Outputs whose content is expected to differ between runs (timings).
    pub volatile: Vec<String>,
    pub out_dir: String,
    pub run_id: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = fs::File::open(path).map_err(|e| io_error(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| io_error(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

pub fn digest(path: &Path) -> CliResult<FileDigest> {
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Everything a command reports back for its manifest.
#[derive(Clone, Debug, Default)]
pub struct RunRecord {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub volatile: Vec<PathBuf>,
    pub seed: Option<u64>,
}

impl RunRecord {
    pub fn input(&mut self, p: &Path) {
        if !self.inputs.iter().any(|q| q == p) {
            self.inputs.push(p.to_path_buf());
        }
    }

    pub fn output(&mut self, rel: impl Into<PathBuf>) {
        let rel = rel.into();
        if !self.outputs.contains(&rel) {
            self.outputs.push(rel);
        }
    }
}

impl RunManifest {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        command: &str,
        args: &[String],
        config: Option<&Path>,
        out_dir: &Path,
        record: &RunRecord,
        started_unix: u64,
    ) -> CliResult<Self> {
        let config = config.map(digest).transpose()?;
        let inputs = record.inputs.iter().map(|p| digest(p)).collect::<CliResult<Vec<_>>>()?;
        let mut outputs = Vec::with_capacity(record.outputs.len());
        for rel in &record.outputs {
            outputs.push(FileDigest {
                path: rel.display().to_string(),
                sha256: sha256_file(&out_dir.join(rel))?,
            });
        }
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        for a in strip_out(args) {
            h.update([0]);
            h.update(a.as_bytes());
        }
        if let Some(c) = &config {
            h.update(c.sha256.as_bytes());
        }
        for i in &inputs {
            h.update(i.sha256.as_bytes());
        }
        let run_id = format!("{:x}", h.finalize())[..12].to_string();
        Ok(RunManifest {
            schema: MANIFEST_SCHEMA,
            tool: format!("unitforge {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            args: args.to_vec(),
            config,
            seed: record.seed,
            inputs,
            outputs,
            volatile: record.volatile.iter().map(|p| p.display().to_string()).collect(),
            out_dir: out_dir.display().to_string(),
            run_id,
            started_unix,
            finished_unix: unix_now(),
        })
    }

    pub fn file_name(command: &str) -> String {
        format!("manifest-{command}.json")
    }

    pub fn write(&self, out_dir: &Path) -> CliResult<PathBuf> {
        let path = out_dir.join(Self::file_name(&self.command));
        let mut text = serde_json::to_string_pretty(self).map_err(unitforge::Error::from)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| io_error(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        Ok(serde_json::from_str(&text).map_err(unitforge::Error::from)?)
    }
}

/// Arguments with any `--out` value removed; the output location does not
/// identify a run.
pub fn strip_out(args: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
            continue;
        }
        if a == "--out" {
            skip = true;
            continue;
        }
        if a.starts_with("--out=") {
            continue;
        }
        out.push(a.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_flag_is_not_part_of_identity() {
        let a: Vec<String> = ["gen-data", "--out", "x", "--seed", "3"].iter().map(|s| s.to_string()).collect();
        let b: Vec<String> = ["gen-data", "--out=y", "--seed", "3"].iter().map(|s| s.to_string()).collect();
        assert_eq!(strip_out(&a), strip_out(&b));
    }

    #[test]
    fn sha_of_known_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
