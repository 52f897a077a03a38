//! Python bindings: CTC scoring and decoding, corpus generation, and
//! decoding dialogue contexts with trained checkpoints.

use std::io::BufReader;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use unitforge::alignment::Backbone;
use unitforge::ctc::{self, UnitSequence};
use unitforge::data::{self, CorpusSpec, Payload};
use unitforge::decoder::SpeechDecoder;
use unitforge::tensor::Tensor;
use unitforge::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("log_probs rows must have equal length"));
    }
    let n = rows.len();
    Tensor::new(vec![n, width], rows.into_iter().flatten().collect()).map_err(py_err)
}

fn units(target: Vec<u32>) -> PyResult<UnitSequence> {
    UnitSequence::new(target).map_err(py_err)
}

/// Negative log-likelihood of `target` under per-frame log-probabilities (blank is 0).
#[pyfunction]
fn ctc_nll(log_probs: Vec<Vec<f64>>, target: Vec<u32>) -> PyResult<f64> {
    ctc::ctc_nll(&matrix(log_probs)?, &units(target)?).map_err(py_err)
}

/// The same quantity by enumerating every alignment. Only for tiny inputs.
#[pyfunction]
fn ctc_brute_force(log_probs: Vec<Vec<f64>>, target: Vec<u32>) -> PyResult<f64> {
    ctc::ctc_brute_force(&matrix(log_probs)?, &units(target)?).map_err(py_err)
}

/// Total probability over every target the frames can emit.
#[pyfunction]
fn partition_sum(log_probs: Vec<Vec<f64>>) -> PyResult<f64> {
    ctc::partition_sum(&matrix(log_probs)?).map_err(py_err)
}

/// Best-path decode: (collapsed units, frame-level alignment).
#[pyfunction]
fn greedy_decode(log_probs: Vec<Vec<f64>>) -> PyResult<(Vec<u32>, Vec<u32>)> {
    let (y, path) = ctc::greedy_decode(&matrix(log_probs)?);
    Ok((y.as_slice().to_vec(), path))
}

#[pyfunction]
#[pyo3(signature = (log_probs, beam = 8))]
fn beam_decode(log_probs: Vec<Vec<f64>>, beam: usize) -> PyResult<Vec<u32>> {
    let y = ctc::prefix_beam_decode(&matrix(log_probs)?, beam).map_err(py_err)?;
    Ok(y.as_slice().to_vec())
}

#[pyfunction]
fn unit_error_rate(reference: Vec<u32>, hypothesis: Vec<u32>) -> PyResult<f64> {
    data::unit_error_rate(&units(reference)?, &units(hypothesis)?).map_err(py_err)
}

/// Emotion the prosody oracle reads from a unit sequence.
#[pyfunction]
fn classify_emotion(seq: Vec<u32>) -> PyResult<String> {
    Ok(data::emotion_oracle_classify(&units(seq)?).name().to_string())
}

/// Generate every corpus for a JSON spec. Returns kind -> JSONL lines.
#[pyfunction]
#[pyo3(signature = (spec_json = "{}"))]
fn gen_corpora(spec_json: &str) -> PyResult<Vec<(String, Vec<String>)>> {
    let spec: CorpusSpec =
        serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(format!("corpus spec: {e}")))?;
    let all = data::gen_all(&spec).map_err(py_err)?;
    all.into_iter()
        .map(|(kind, recs)| {
            let lines = recs
                .iter()
                .map(|r| serde_json::to_string(r).map_err(|e| PyValueError::new_err(e.to_string())))
                .collect::<PyResult<Vec<_>>>()?;
            Ok((kind.to_string(), lines))
        })
        .collect()
}

/// Decode every supervised or preference record of a JSONL file.
/// Returns (id, units, steps) per record.
#[pyfunction]
fn decode_file(checkpoint: PathBuf, backbone: PathBuf, contexts: PathBuf) -> PyResult<Vec<(String, Vec<u32>, usize)>> {
    let dec = SpeechDecoder::load(&checkpoint).map_err(py_err)?;
    let (bb, _, _) = Backbone::load(&backbone).map_err(py_err)?;
    let file = std::fs::File::open(&contexts).map_err(|e| PyIOError::new_err(format!("{}: {e}", contexts.display())))?;
    let records = data::read_jsonl(BufReader::new(file)).map_err(py_err)?;
    let mut out = Vec::with_capacity(records.len());
    for r in &records {
        let (context, response) = match &r.payload {
            Payload::SupervisedUnits { context, response, .. } | Payload::Preference { context, response, .. } => {
                (context, response)
            }
            other => return Err(PyValueError::new_err(format!("{}: {} records carry no dialogue context", r.id, other.kind()))),
        };
        let (cond, text) = bb.condition_features(context, response).map_err(py_err)?;
        let g = dec.generate(&cond, dec.config.tgm.then_some(&text)).map_err(py_err)?;
        out.push((r.id.clone(), g.units.as_slice().to_vec(), g.steps));
    }
    Ok(out)
}

#[pymodule]
fn unitforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(ctc_nll, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_brute_force, m)?)?;
    m.add_function(wrap_pyfunction!(partition_sum, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_decode, m)?)?;
    m.add_function(wrap_pyfunction!(beam_decode, m)?)?;
    m.add_function(wrap_pyfunction!(unit_error_rate, m)?)?;
    m.add_function(wrap_pyfunction!(classify_emotion, m)?)?;
    m.add_function(wrap_pyfunction!(gen_corpora, m)?)?;
    m.add_function(wrap_pyfunction!(decode_file, m)?)?;
    m.add("TEXT_VOCAB", data::TEXT_VOCAB)?;
    m.add("UNIT_VOCAB", data::UNIT_VOCAB)?;
    Ok(())
}
