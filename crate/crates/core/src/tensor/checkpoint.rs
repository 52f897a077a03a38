//! Binary checkpoint format.
//!
//! ```text
//! "OOMN" | u32 version (=1) | u32 count | count x entry
//! [ u32 count | count x entry ]          optimizer state, optional
//! entry = u16 name_len | name (UTF-8) | u8 rank | rank x u64 dim | numel x f64
//! ```
//!
//! All integers and floats are little-endian. Optimizer entries are named
//! `<param>.m` / `<param>.v`, plus a rank-0 `adamw.step`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AdamW, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OOMN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Vec<(String, Tensor)>,
}

fn write_entry<W: Write>(w: &mut W, name: &str, t: &Tensor) -> std::io::Result<()> {
    let bytes = name.as_bytes();
    let len = u16::try_from(bytes.len())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "name too long"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&[t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn write_block<W: Write>(w: &mut W, entries: &[(String, Tensor)]) -> std::io::Result<()> {
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        write_entry(w, name, t)?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, opt: Option<&AdamW>) -> Self {
        let params = store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        let mut optimizer = Vec::new();
        if let Some(opt) = opt {
            for (id, p) in store.iter() {
                let shape = p.value.shape().to_vec();
                let m = Tensor::new(shape.clone(), opt.first_moment(id).to_vec()).expect("moment shape");
                let v = Tensor::new(shape, opt.second_moment(id).to_vec()).expect("moment shape");
                optimizer.push((format!("{}.m", p.name), m));
                optimizer.push((format!("{}.v", p.name), v));
            }
            optimizer.push(("adamw.step".to_string(), Tensor::scalar(opt.step_count() as f64)));
        }
        Checkpoint { params, optimizer }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        write_block(&mut buf, &self.params).expect("in-memory write");
        if !self.optimizer.is_empty() {
            write_block(&mut buf, &self.optimizer).expect("in-memory write");
        }
        buf
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Loads every parameter of `store` from this checkpoint. Names and shapes must match.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::Format(format!(
                    "{name}: shape {:?} vs model {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, store: &ParamStore, opt: &mut AdamW) -> Result<()> {
        let find = |n: &str| {
            self.optimizer
                .iter()
                .find(|(k, _)| k == n)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("missing optimizer entry {n}")))
        };
        let step = find("adamw.step")?.item()? as u64;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, p) in store.iter() {
            m.push(find(&format!("{}.m", p.name))?.data().to_vec());
            v.push(find(&format!("{}.v", p.name))?.data().to_vec());
        }
        opt.restore(step, m, v);
        Ok(())
    }
}

pub fn write_checkpoint<W: Write>(w: &mut W, store: &ParamStore, opt: Option<&AdamW>) -> Result<()> {
    let bytes = Checkpoint::from_store(store, opt).to_bytes();
    w.write_all(&bytes).map_err(|e| Error::io("<writer>", e))
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().unwrap()))
}

fn read_block<R: Read>(r: &mut R, count: u32) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(r, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(read_exact(r, len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_exact(r, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact(r, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = read_exact(r, n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let magic = read_exact(r, 4)?;
    if magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(r)?;
    let params = read_block(r, count)?;
    let mut tail = [0u8; 4];
    let optimizer = match r.read(&mut tail[..1]) {
        Ok(0) => Vec::new(),
        Ok(_) => {
            r.read_exact(&mut tail[1..])
                .map_err(|e| Error::Format(format!("truncated optimizer block: {e}")))?;
            read_block(r, u32::from_le_bytes(tail))?
        }
        Err(e) => return Err(Error::Format(e.to_string())),
    };
    Ok(Checkpoint { params, optimizer })
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, opt: Option<&AdamW>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, store, opt)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(f))
}
