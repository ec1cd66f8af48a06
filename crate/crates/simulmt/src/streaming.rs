//! Simultaneous inference: pre-decision grouping, the read/write loop with
//! per-token LM invocation, the wait-k baseline, and latency/quality
//! metrics (average lagging, computation-aware average lagging, an n-gram
//! quality score).

use crate::attention::write_decision;
use crate::error::{Error, Result};
use crate::lm::{NGramLM, Token};
use crate::model::{Model, Vocab};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::time::Instant;

/// Default speech represented by one encoder state.
pub const DEFAULT_UNIT_MS: f64 = 40.0;
/// Default simulated translation-model cost per decoder invocation.
pub const DEFAULT_MODEL_COST_MS: f64 = 1.0;

/// Ordered source units (already expanded to encoder-state granularity)
/// plus the speech duration each unit represents.
#[derive(Debug, Clone)]
pub struct SourceStream {
    pub units: Vec<usize>,
    pub unit_duration_ms: f64,
}

impl SourceStream {
    pub fn from_tokens(model: &Model, tokens: &[Token]) -> Result<SourceStream> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty source stream".into()));
        }
        Ok(SourceStream {
            units: model.source_units(tokens),
            unit_duration_ms: DEFAULT_UNIT_MS,
        })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// Group encoder states into read/write decision points: one after each
/// full group of `ratio` states, plus the final partial group.
pub fn pre_decision(num_states: usize, ratio: usize) -> Result<Vec<usize>> {
    if ratio < 1 {
        return Err(Error::Config(format!("pre-decision ratio {ratio} must be >= 1")));
    }
    let mut points: Vec<usize> = (1..=num_states / ratio).map(|g| g * ratio).collect();
    if num_states % ratio != 0 {
        points.push(num_states);
    }
    Ok(points)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TraceEvent {
    Read { segment: usize },
    Write { token: Token, units: usize, wall_ms: f64 },
}

/// Ordered read/write events with per-token delays and simulated wall-clock
/// accounting. The serialized form is the reproducible contract; measured
/// wall time stays in memory only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub events: Vec<TraceEvent>,
    /// Source units consumed at each emitted token (end-of-sequence excluded).
    #[serde(rename = "d_i")]
    pub delays: Vec<f64>,
    /// Simulated wall clock at each emitted token under the recorded costs.
    pub wall_ms: Vec<f64>,
    pub hypothesis: Vec<Token>,
    pub source_units: usize,
    pub unit_duration_ms: f64,
    /// Decoder invocations completed at each write.
    pub model_steps: Vec<usize>,
    /// LM invocations completed at each write.
    pub lm_calls: Vec<usize>,
    pub model_cost_ms: f64,
    pub lm_cost_ms: f64,
    /// Mean norm ratio of future to monotonic energies over committed steps
    /// and layers; absent for models without future information.
    pub lm_pw: Option<f64>,
    #[serde(skip)]
    pub measured_ms: f64,
}

/// Simulated per-invocation costs folded into the wall clock.
#[derive(Debug, Clone, Copy)]
pub struct CostProfile {
    pub model_cost_ms: f64,
    pub lm_cost_ms: f64,
}

impl Default for CostProfile {
    fn default() -> Self {
        CostProfile {
            model_cost_ms: DEFAULT_MODEL_COST_MS,
            lm_cost_ms: crate::lm::SLM_QUERY_COST_MS,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecodePolicy {
    /// Write when every head's selection probability strictly exceeds this.
    pub threshold: f64,
    /// Source units consumed per read decision.
    pub segment_units: usize,
    pub costs: CostProfile,
}

impl Default for DecodePolicy {
    fn default() -> Self {
        DecodePolicy {
            threshold: 0.5,
            segment_units: 1,
            costs: CostProfile::default(),
        }
    }
}

/// Decoding variant: greedy monotonic attention, monotonic attention with
/// LM future information, or inference-only LM rescoring of the top-k.
pub enum Variant<'a> {
    Mma,
    MmaLm { lm: &'a NGramLM },
    MmaLmr { lm: &'a NGramLM, topk: usize },
}

impl Variant<'_> {
    fn validate(&self, model: &Model) -> Result<()> {
        match self {
            Variant::MmaLm { .. } if !model.config.future_info_enabled => Err(Error::Config(
                "mma-lm decoding needs a model trained with future information".into(),
            )),
            Variant::Mma | Variant::MmaLmr { .. } if model.config.future_info_enabled => {
                Err(Error::Config(
                    "this model consumes future information; decode it with the mma-lm variant"
                        .into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

struct TraceBuilder {
    events: Vec<TraceEvent>,
    delays: Vec<f64>,
    wall_ms: Vec<f64>,
    model_steps: Vec<usize>,
    lm_calls: Vec<usize>,
    hypothesis: Vec<Token>,
}

/// Shared read/write loop. `decide` chooses write (Some(chosen token id))
/// or read (None) at each decision point.
fn run_decode(
    model: &Model,
    stream: &SourceStream,
    policy: &DecodePolicy,
    variant: &Variant<'_>,
    mut force_policy: impl FnMut(usize, usize, &[f64]) -> bool,
) -> Result<(Vec<Token>, DecodeTrace)> {
    variant.validate(model)?;
    if stream.is_empty() {
        return Err(Error::Contract("empty source stream".into()));
    }
    let start = Instant::now();
    let units = &stream.units;
    let points = pre_decision(units.len(), policy.segment_units)?;
    let max_writes = 2 * units.len();

    let mut tb = TraceBuilder {
        events: Vec::new(),
        delays: Vec::new(),
        wall_ms: Vec::new(),
        model_steps: Vec::new(),
        lm_calls: Vec::new(),
        hypothesis: Vec::new(),
    };
    let mut seg_idx = 0usize;
    let mut read_units = points[0];
    tb.events.push(TraceEvent::Read { segment: 0 });
    let mut enc = model.encode(&units[..read_units])?;
    let mut state = model.start_decode();
    let mut model_steps = 0usize;
    let mut lm_calls = 0usize;
    let mut writes = 0usize;
    let mut pw_sum = 0.0;
    let mut pw_count = 0usize;

    'steps: while writes < max_writes {
        let step = state.step();
        // The start token carries no plausible information; afterwards the
        // LM is invoked once per new target token.
        let future: Option<Token> = match variant {
            Variant::MmaLm { lm } if step > 1 => {
                lm_calls += 1;
                Some(lm.predict_next(&tb.hypothesis))
            }
            _ => None,
        };

        loop {
            let out = model.decode_step(&state, &enc, future.as_ref())?;
            model_steps += 1;
            let exhausted = read_units == units.len();
            let forced = force_policy(step, seg_idx + 1, &out.p_tilde);
            if exhausted || forced {
                let token_id = match variant {
                    Variant::MmaLmr { lm, topk } => {
                        let cands = top_k(&out.distribution, *topk);
                        lm_calls += cands.len();
                        let named: Vec<(Token, f64)> = cands
                            .iter()
                            .map(|&(id, p)| (model.tgt_vocab.token(id).to_string(), p))
                            .collect();
                        let chosen = lm.rescore_candidates(&tb.hypothesis, &named, *topk)?;
                        model.tgt_vocab.id(&chosen)
                    }
                    _ => argmax(&out.distribution),
                };
                for (l, ef) in out.energies.e_future.iter().enumerate() {
                    if let Some(ef) = ef {
                        let out_norm: f64 = out.energies.e[l]
                            .iter()
                            .map(|e| e.l2_norm().powi(2))
                            .sum::<f64>()
                            .sqrt();
                        if out_norm > 0.0 {
                            pw_sum += ef.l2_norm() / out_norm;
                            pw_count += 1;
                        }
                    }
                }
                let wall = read_units as f64 * stream.unit_duration_ms
                    + model_steps as f64 * policy.costs.model_cost_ms
                    + lm_calls as f64 * policy.costs.lm_cost_ms;
                let token = model.tgt_vocab.token(token_id).to_string();
                tb.events.push(TraceEvent::Write {
                    token: token.clone(),
                    units: read_units,
                    wall_ms: wall,
                });
                writes += 1;
                if token_id == Vocab::EOS_ID {
                    break 'steps;
                }
                model.commit_step(&mut state, token_id, &out);
                tb.hypothesis.push(token);
                tb.delays.push(read_units as f64);
                tb.wall_ms.push(wall);
                tb.model_steps.push(model_steps);
                tb.lm_calls.push(lm_calls);
                continue 'steps;
            }
            seg_idx += 1;
            read_units = points[seg_idx];
            tb.events.push(TraceEvent::Read { segment: seg_idx });
            enc = model.encode(&units[..read_units])?;
        }
    }

    let trace = DecodeTrace {
        events: tb.events,
        delays: tb.delays,
        wall_ms: tb.wall_ms,
        hypothesis: tb.hypothesis.clone(),
        source_units: units.len(),
        unit_duration_ms: stream.unit_duration_ms,
        model_steps: tb.model_steps,
        lm_calls: tb.lm_calls,
        model_cost_ms: policy.costs.model_cost_ms,
        lm_cost_ms: policy.costs.lm_cost_ms,
        lm_pw: if pw_count > 0 { Some(pw_sum / pw_count as f64) } else { None },
        measured_ms: start.elapsed().as_secs_f64() * 1000.0,
    };
    Ok((tb.hypothesis, trace))
}

/// Adaptive simultaneous decoding under the slowest-head write rule. When
/// the source is exhausted the decoder writes unconditionally until
/// end-of-sequence or the 2*S cutoff.
pub fn simul_decode(
    model: &Model,
    variant: &Variant<'_>,
    stream: &SourceStream,
    policy: &DecodePolicy,
) -> Result<(Vec<Token>, DecodeTrace)> {
    let threshold = policy.threshold;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    run_decode(model, stream, policy, variant, |_step, _segments, p_tilde| {
        write_decision(p_tilde, threshold)
    })
}

/// Fixed wait-k policy: read `k` segments, then alternate write/read. A
/// model trained with future information still needs its LM for the token
/// representations; pass it as `lm`.
pub fn wait_k_decode(
    model: &Model,
    lm: Option<&NGramLM>,
    stream: &SourceStream,
    k: usize,
    segment_units: usize,
) -> Result<(Vec<Token>, DecodeTrace)> {
    if k < 1 {
        return Err(Error::Config(format!("wait-k parameter {k} must be >= 1")));
    }
    let policy = DecodePolicy {
        threshold: 0.5,
        segment_units,
        costs: CostProfile::default(),
    };
    let variant = match lm {
        Some(lm) => Variant::MmaLm { lm },
        None => Variant::Mma,
    };
    // write step i once k + i - 1 segments have been read
    run_decode(model, stream, &policy, &variant, move |step, segments_read, _| {
        segments_read >= k + step - 1
    })
}

/// Greedy decoding with the whole source visible: the quality ceiling the
/// patient extreme collapses to.
pub fn greedy_offline(model: &Model, stream: &SourceStream) -> Result<(Vec<Token>, DecodeTrace)> {
    let policy = DecodePolicy {
        threshold: 1.0,
        segment_units: stream.len(),
        costs: CostProfile::default(),
    };
    simul_decode(model, &Variant::Mma, stream, &policy)
}

/// Greedy offline decoding for a model that consumes future information.
pub fn greedy_offline_lm(
    model: &Model,
    lm: &NGramLM,
    stream: &SourceStream,
) -> Result<(Vec<Token>, DecodeTrace)> {
    let policy = DecodePolicy {
        threshold: 1.0,
        segment_units: stream.len(),
        costs: CostProfile::default(),
    };
    simul_decode(model, &Variant::MmaLm { lm }, stream, &policy)
}

fn argmax(dist: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, p) in dist.iter().enumerate() {
        if *p > dist[best] {
            best = i;
        }
    }
    best
}

/// Top-k (index, probability) pairs, highest first; ties break to the lower
/// vocabulary id for determinism.
fn top_k(dist: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    idx.sort_by(|&a, &b| dist[b].partial_cmp(&dist[a]).unwrap().then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, dist[i])).collect()
}

// ---- latency metrics ----

/// Average lagging over per-token delays (in source units): mean excess
/// delay over the ideal diagonal, truncated at the first token that saw the
/// whole source.
pub fn average_lagging_from_delays(
    delays: &[f64],
    source_len: f64,
    target_len: f64,
) -> Result<f64> {
    if delays.is_empty() {
        return Err(Error::Contract("average lagging of an empty trace".into()));
    }
    if target_len <= 0.0 || source_len <= 0.0 {
        return Err(Error::Contract(
            "average lagging: degenerate source/target length".into(),
        ));
    }
    let gamma = target_len / source_len;
    let tau = delays
        .iter()
        .position(|&d| d >= source_len)
        .map(|i| i + 1)
        .unwrap_or(delays.len());
    let mut sum = 0.0;
    for (i, d) in delays.iter().take(tau).enumerate() {
        sum += d - i as f64 / gamma;
    }
    Ok(sum / tau as f64)
}

/// Average lagging of a trace, in source units.
pub fn average_lagging(trace: &DecodeTrace) -> Result<f64> {
    average_lagging_from_delays(
        &trace.delays,
        trace.source_units as f64,
        trace.hypothesis.len() as f64,
    )
}

/// Average lagging of a trace, in milliseconds of speech.
pub fn average_lagging_ms(trace: &DecodeTrace) -> Result<f64> {
    Ok(average_lagging(trace)? * trace.unit_duration_ms)
}

/// Computation-aware average lagging: the same formula over elapsed
/// wall-clock (speech listened plus simulated compute) at each write. With
/// zero costs this is exactly AL in milliseconds.
pub fn computation_aware_al(
    trace: &DecodeTrace,
    lm_cost_ms: f64,
    model_cost_ms: f64,
) -> Result<f64> {
    if lm_cost_ms < 0.0 || model_cost_ms < 0.0 {
        return Err(Error::Contract("negative simulated cost".into()));
    }
    if trace.delays.is_empty() {
        return Err(Error::Contract("computation-aware AL of an empty trace".into()));
    }
    let target_len = trace.hypothesis.len() as f64;
    let source_ms = trace.source_units as f64 * trace.unit_duration_ms;
    let gamma = target_len / source_ms;
    let tau = trace
        .delays
        .iter()
        .position(|&d| d >= trace.source_units as f64)
        .map(|i| i + 1)
        .unwrap_or(trace.delays.len());
    let mut sum = 0.0;
    for i in 0..tau {
        let elapsed = trace.delays[i] * trace.unit_duration_ms
            + trace.model_steps[i] as f64 * model_cost_ms
            + trace.lm_calls[i] as f64 * lm_cost_ms;
        sum += elapsed - i as f64 / gamma;
    }
    Ok(sum / tau as f64)
}

// ---- quality ----

fn ngram_counts(tokens: &[Token], n: usize) -> HashMap<&[Token], usize> {
    let mut counts: HashMap<&[Token], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_matches(hyp: &[Token], reference: &[Token], n: usize) -> (usize, usize) {
    let hc = ngram_counts(hyp, n);
    let rc = ngram_counts(reference, n);
    let matched: usize = hc
        .iter()
        .map(|(gram, count)| (*count).min(rc.get(gram).copied().unwrap_or(0)))
        .sum();
    let total = hyp.len().saturating_sub(n - 1);
    (matched, total)
}

/// BLEU-style score in [0, 100]: geometric mean of clipped n-gram
/// precisions up to order 4 (capped at the hypothesis length) times a
/// brevity penalty.
pub fn quality_score(hypothesis: &[Token], reference: &[Token]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("quality_score: empty reference".into()));
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    corpus_quality(&[(hypothesis.to_vec(), reference.to_vec())])
}

/// Corpus-level quality: n-gram counts aggregate over all sentence pairs
/// before the geometric mean, as corpus BLEU does.
pub fn corpus_quality(pairs: &[(Vec<Token>, Vec<Token>)]) -> Result<f64> {
    if pairs.iter().any(|(_, r)| r.is_empty()) {
        return Err(Error::Contract("quality: empty reference".into()));
    }
    let hyp_len: usize = pairs.iter().map(|(h, _)| h.len()).sum();
    let ref_len: usize = pairs.iter().map(|(_, r)| r.len()).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let max_n = 4.min(pairs.iter().map(|(h, _)| h.len()).max().unwrap_or(1)).max(1);
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (h, r) in pairs {
            let (m, t) = clipped_matches(h, r, n);
            matched += m;
            total += t;
        }
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let precision = (log_sum / max_n as f64).exp();
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * precision * bp)
}

/// One row of the latency-quality curve output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub lambda: f64,
    pub segment_ms: f64,
    pub al: f64,
    pub caal: f64,
    pub quality: f64,
    pub lm_pw: f64,
}

pub const CURVE_CSV_HEADER: &str = "lambda,segment_ms,AL,CAAL,quality,lm_pw";

impl CurvePoint {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.lambda, self.segment_ms, self.al, self.caal, self.quality, self.lm_pw
        )
    }
}
