//! Python bindings for the simulmt crate: alignment marginalization, the
//! n-gram language model, synthetic task generation, latency/quality
//! metrics, and a small end-to-end train/translate wrapper.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use simulmt::alignment::{
    brute_force_alignment, expected_alignment_parallel, expected_alignment_recurrent,
    sample_hard_alignment, SelectionProbabilities,
};
use simulmt::attention::{modulate, write_decision, ModulationMode};
use simulmt::error::Error;
use simulmt::lm::NGramLM;
use simulmt::model::{build_examples, train, Model, ModelConfig, TrainSchedule, Vocab};
use simulmt::numerics::Tensor;
use simulmt::streaming::{
    average_lagging_from_delays, corpus_quality, quality_score, simul_decode, wait_k_decode,
    DecodePolicy, SourceStream, Variant,
};
use simulmt::tasks::{generate, split, TaskKind, TaskSpec};

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Data(_) | Error::Size(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn probs(rows: Vec<Vec<f64>>) -> PyResult<SelectionProbabilities> {
    SelectionProbabilities::from_rows(&rows).map_err(err)
}

fn alignment_to_py(alpha: &Tensor, residual: &Tensor) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (t, s) = (alpha.shape()[0], alpha.shape()[1]);
    let vals = alpha.values();
    let rows = (0..t).map(|i| vals[i * s..(i + 1) * s].to_vec()).collect();
    (rows, residual.values())
}

/// Expected alignment via the cumsum/cumprod form: (alpha, residual).
#[pyfunction]
fn alignment_parallel(p: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let exp = expected_alignment_parallel(&probs(p)?).map_err(err)?;
    Ok(alignment_to_py(&exp.alpha, &exp.residual))
}

/// Expected alignment via the literal summation form.
#[pyfunction]
fn alignment_recurrent(p: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let exp = expected_alignment_recurrent(&probs(p)?);
    Ok(alignment_to_py(&exp.alpha, &exp.residual))
}

/// Exact expectation by enumerating every read/write path (T*S <= 16).
#[pyfunction]
fn alignment_brute_force(p: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let exp = brute_force_alignment(&probs(p)?).map_err(err)?;
    Ok(alignment_to_py(&exp.alpha, &exp.residual))
}

/// Sample one hard monotonic path (1-based attended positions).
#[pyfunction]
fn sample_alignment(p: Vec<Vec<f64>>, seed: u64) -> PyResult<Vec<usize>> {
    Ok(sample_hard_alignment(&probs(p)?, seed).t)
}

/// Selection probability from monotonic and future energies.
#[pyfunction]
#[pyo3(signature = (e, e_future, mode = "additive"))]
fn modulate_energy(e: f64, e_future: f64, mode: &str) -> PyResult<f64> {
    let mode: ModulationMode = mode.parse().map_err(err)?;
    Ok(modulate(e, e_future, mode))
}

/// Slowest-head write rule over flattened per-head probabilities.
#[pyfunction]
#[pyo3(signature = (p_tilde, threshold = 0.5))]
fn write_gate(p_tilde: Vec<f64>, threshold: f64) -> PyResult<bool> {
    if p_tilde.is_empty() {
        return Err(PyValueError::new_err("empty probability list"));
    }
    Ok(write_decision(&p_tilde, threshold))
}

/// Average lagging over per-token delays in source units.
#[pyfunction]
fn average_lagging(delays: Vec<f64>, source_len: f64, target_len: f64) -> PyResult<f64> {
    average_lagging_from_delays(&delays, source_len, target_len).map_err(err)
}

/// Sentence-level n-gram quality score in [0, 100].
#[pyfunction]
fn sentence_quality(hypothesis: Vec<String>, reference: Vec<String>) -> PyResult<f64> {
    quality_score(&hypothesis, &reference).map_err(err)
}

/// Generate a synthetic parallel dataset: list of (source, target) pairs.
#[pyfunction]
#[pyo3(signature = (kind, vocab_size, n, seed = 0, determinism = 0.8, len_min = 5, len_max = 12))]
fn generate_task(
    kind: &str,
    vocab_size: usize,
    n: usize,
    seed: u64,
    determinism: f64,
    len_min: usize,
    len_max: usize,
) -> PyResult<Vec<(Vec<String>, Vec<String>)>> {
    let spec = TaskSpec {
        kind: kind.parse::<TaskKind>().map_err(err)?,
        vocab_size,
        len_range: (len_min, len_max),
        determinism,
        seed,
    };
    generate(&spec, n).map_err(err)
}

/// Interpolated n-gram language model.
#[pyclass(name = "NGramLM")]
struct PyNGramLM {
    inner: NGramLM,
}

#[pymethods]
impl PyNGramLM {
    /// Fit on a list of token sequences.
    #[new]
    #[pyo3(signature = (corpus, order = 2))]
    fn new(corpus: Vec<Vec<String>>, order: usize) -> PyResult<Self> {
        Ok(PyNGramLM {
            inner: NGramLM::fit(&corpus, order).map_err(err)?,
        })
    }

    fn predict_next(&self, prefix: Vec<String>) -> String {
        self.inner.predict_next(&prefix)
    }

    fn next_distribution(&self, prefix: Vec<String>) -> Vec<f64> {
        self.inner.next_distribution(&prefix)
    }

    fn vocab(&self) -> Vec<String> {
        self.inner.vocab().to_vec()
    }

    fn perplexity(&self, tokens: Vec<String>) -> PyResult<f64> {
        self.inner.sequence_perplexity(&tokens).map_err(err)
    }

    #[pyo3(signature = (prefix, candidates, k = 5))]
    fn rescore(
        &self,
        prefix: Vec<String>,
        candidates: Vec<(String, f64)>,
        k: usize,
    ) -> PyResult<String> {
        self.inner.rescore_candidates(&prefix, &candidates, k).map_err(err)
    }
}

/// A trained simultaneous translation model plus its language model.
/// Graph tensors are reference-counted without atomics, so the class stays
/// pinned to the thread that created it.
#[pyclass(name = "SimulModel", unsendable)]
struct PySimulModel {
    model: Model,
    lm: Option<NGramLM>,
}

#[pymethods]
impl PySimulModel {
    /// Train a desk-scale model on (source, target) pairs.
    #[new]
    #[pyo3(signature = (data, future_info = false, lambda = 0.05, epochs = 4, seed = 0, d_model = 32))]
    fn new(
        data: Vec<(Vec<String>, Vec<String>)>,
        future_info: bool,
        lambda: f64,
        epochs: usize,
        seed: u64,
        d_model: usize,
    ) -> PyResult<Self> {
        let src_vocab = Vocab::build(data.iter().map(|(s, _)| s), &[]);
        let tgt_vocab = Vocab::build(data.iter().map(|(_, t)| t), &[]);
        let mut config =
            ModelConfig::desk_default(src_vocab.tokens().to_vec(), tgt_vocab.tokens().to_vec());
        config.d_model = d_model;
        config.seed = seed;
        config.future_info_enabled = future_info;
        let lm = if future_info {
            let targets: Vec<Vec<String>> = data.iter().map(|(_, t)| t.clone()).collect();
            Some(NGramLM::fit(&targets, 2).map_err(err)?)
        } else {
            None
        };
        let examples = build_examples(&data, lm.as_ref());
        let schedule = TrainSchedule {
            stage1_epochs: epochs,
            stage2_epochs: epochs.div_ceil(2),
            lambdas: vec![lambda],
            batch_size: 8,
        };
        let result = train(&config, &schedule, &examples).map_err(err)?;
        let (_, model) = result.finetuned.into_iter().next().expect("one lambda");
        Ok(PySimulModel { model, lm })
    }

    /// Simultaneous decode: returns (hypothesis, per-token delays in units).
    #[pyo3(signature = (source, threshold = 0.5, segment_units = 1))]
    fn translate(
        &self,
        source: Vec<String>,
        threshold: f64,
        segment_units: usize,
    ) -> PyResult<(Vec<String>, Vec<f64>)> {
        let stream = SourceStream::from_tokens(&self.model, &source).map_err(err)?;
        let policy = DecodePolicy {
            threshold,
            segment_units,
            ..DecodePolicy::default()
        };
        let variant = match &self.lm {
            Some(lm) => Variant::MmaLm { lm },
            None => Variant::Mma,
        };
        let (hyp, trace) = simul_decode(&self.model, &variant, &stream, &policy).map_err(err)?;
        Ok((hyp, trace.delays))
    }

    /// Fixed wait-k decode: returns (hypothesis, per-token delays in units).
    #[pyo3(signature = (source, k, segment_units = 1))]
    fn translate_wait_k(
        &self,
        source: Vec<String>,
        k: usize,
        segment_units: usize,
    ) -> PyResult<(Vec<String>, Vec<f64>)> {
        let stream = SourceStream::from_tokens(&self.model, &source).map_err(err)?;
        let (hyp, trace) = wait_k_decode(&self.model, self.lm.as_ref(), &stream, k, segment_units).map_err(err)?;
        Ok((hyp, trace.delays))
    }

    /// Corpus-level quality of this model's simultaneous decodes.
    #[pyo3(signature = (data, threshold = 0.5, segment_units = 1))]
    fn evaluate(
        &self,
        data: Vec<(Vec<String>, Vec<String>)>,
        threshold: f64,
        segment_units: usize,
    ) -> PyResult<(f64, f64)> {
        let mut pairs = Vec::new();
        let mut al_sum = 0.0;
        let mut al_n = 0usize;
        for (src, reference) in &data {
            let (hyp, delays) = self.translate(src.clone(), threshold, segment_units)?;
            if !delays.is_empty() {
                al_sum += average_lagging_from_delays(
                    &delays,
                    src.len() as f64,
                    hyp.len() as f64,
                )
                .map_err(err)?;
                al_n += 1;
            }
            pairs.push((hyp, reference.clone()));
        }
        let quality = corpus_quality(&pairs).map_err(err)?;
        Ok((al_sum / al_n.max(1) as f64, quality))
    }
}

/// Split a dataset into train/dev/test.
#[pyfunction]
#[pyo3(signature = (data, ratios = (0.8, 0.1, 0.1), seed = 0))]
#[allow(clippy::type_complexity)]
fn split_dataset(
    data: Vec<(Vec<String>, Vec<String>)>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> PyResult<(
    Vec<(Vec<String>, Vec<String>)>,
    Vec<(Vec<String>, Vec<String>)>,
    Vec<(Vec<String>, Vec<String>)>,
)> {
    split(&data, ratios, seed).map_err(err)
}

#[pymodule]
fn simulmt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(alignment_parallel, m)?)?;
    m.add_function(wrap_pyfunction!(alignment_recurrent, m)?)?;
    m.add_function(wrap_pyfunction!(alignment_brute_force, m)?)?;
    m.add_function(wrap_pyfunction!(sample_alignment, m)?)?;
    m.add_function(wrap_pyfunction!(modulate_energy, m)?)?;
    m.add_function(wrap_pyfunction!(write_gate, m)?)?;
    m.add_function(wrap_pyfunction!(average_lagging, m)?)?;
    m.add_function(wrap_pyfunction!(sentence_quality, m)?)?;
    m.add_function(wrap_pyfunction!(generate_task, m)?)?;
    m.add_function(wrap_pyfunction!(split_dataset, m)?)?;
    m.add_class::<PyNGramLM>()?;
    m.add_class::<PySimulModel>()?;
    Ok(())
}
