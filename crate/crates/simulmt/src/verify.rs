//! Self-contained oracle suites: alignment equivalence, Monte-Carlo
//! consistency, end-to-end gradient checks, metric sanity, and the
//! baseline-recovery ablation. The CLI `verify` command and the acceptance
//! tests both run these.

use crate::alignment::{
    brute_force_alignment, expected_alignment_parallel, expected_alignment_recurrent,
    sample_hard_alignment, SelectionProbabilities,
};
use crate::error::{Error, Result};
use crate::lm::{NGramLM, Token, BOS, EOS, UNK};
use crate::model::{build_examples, Model, ModelConfig, TrainingExample};
use crate::numerics::{backward, finite_difference_gradient, Tensor};
use crate::streaming;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub suite: String,
    pub name: String,
    pub max_err: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub runtime_ms: f64,
}

impl CheckReport {
    pub fn line(&self) -> String {
        format!(
            "[{}/{}] max_err={:.3e} tol={:.1e} {} ({:.0} ms)",
            self.suite,
            self.name,
            self.max_err,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" },
            self.runtime_ms
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Alignment,
    MonteCarlo,
    Gradient,
    Metric,
    Ablation,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alignment" => Ok(Suite::Alignment),
            "montecarlo" => Ok(Suite::MonteCarlo),
            "gradient" => Ok(Suite::Gradient),
            "metric" => Ok(Suite::Metric),
            "ablation" => Ok(Suite::Ablation),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!(
                "unknown suite `{other}` (expected all|alignment|montecarlo|gradient|metric|ablation)"
            ))),
        }
    }
}

pub fn run_suite(suite: Suite) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Alignment | Suite::All) {
        out.extend(alignment_suite()?);
    }
    if matches!(suite, Suite::MonteCarlo | Suite::All) {
        out.push(monte_carlo_check()?);
    }
    if matches!(suite, Suite::Gradient | Suite::All) {
        out.push(gradient_check()?);
    }
    if matches!(suite, Suite::Metric | Suite::All) {
        out.extend(metric_suite()?);
    }
    if matches!(suite, Suite::Ablation | Suite::All) {
        out.push(ablation_check()?);
    }
    Ok(out)
}

fn report(suite: &str, name: &str, max_err: f64, tol: f64, t0: Instant) -> CheckReport {
    CheckReport {
        suite: suite.into(),
        name: name.into(),
        max_err,
        tolerance: tol,
        pass: max_err <= tol,
        runtime_ms: t0.elapsed().as_secs_f64() * 1000.0,
    }
}

/// Parallel vs recurrent vs brute-force expected alignment on 100 random
/// instances, T and S up to 12, brute force where T*S <= 12.
pub fn alignment_suite() -> Result<Vec<CheckReport>> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xa11e);
    let mut par_vs_rec = 0.0f64;
    let mut rec_vs_brute = 0.0f64;
    let mut par_vs_brute = 0.0f64;
    for _ in 0..100 {
        let t = rng.random_range(1..=12);
        let s = rng.random_range(1..=12);
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..s).map(|_| 0.01 + rng.random::<f64>() * 0.98).collect())
            .collect();
        let p = SelectionProbabilities::from_rows(&rows)?;
        let rec = expected_alignment_recurrent(&p);
        let par = expected_alignment_parallel(&p)?;
        par_vs_rec = par_vs_rec.max(max_diff(&rec.alpha.values(), &par.alpha.values()));
        if t * s <= 12 {
            let brute = brute_force_alignment(&p)?;
            rec_vs_brute = rec_vs_brute.max(max_diff(&rec.alpha.values(), &brute.alpha.values()));
            par_vs_brute = par_vs_brute.max(max_diff(&par.alpha.values(), &brute.alpha.values()));
        }
    }
    Ok(vec![
        report("alignment", "parallel_vs_recurrent", par_vs_rec, 1e-8, t0),
        report("alignment", "recurrent_vs_brute_force", rec_vs_brute, 1e-10, t0),
        report("alignment", "parallel_vs_brute_force", par_vs_brute, 1e-10, t0),
    ])
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// 200k sampled hard paths at T=2, S=3, p=0.5 against the enumerated
/// expectation with end-of-source forcing; 0.01 per cell.
pub fn monte_carlo_check() -> Result<CheckReport> {
    let t0 = Instant::now();
    let p = SelectionProbabilities::from_rows(&vec![vec![0.5; 3]; 2])?;
    let brute = brute_force_alignment(&p)?;
    const N: usize = 200_000;
    let mut counts = [[0usize; 3]; 2];
    for seed in 0..N {
        let path = sample_hard_alignment(&p, seed as u64);
        for (i, t) in path.t.iter().enumerate() {
            counts[i][t - 1] += 1;
        }
    }
    let mut max_err = 0.0f64;
    for i in 0..2 {
        for j in 0..3 {
            let expected = brute.alpha_at(i, j)
                + if j == 2 { brute.residual.value_at(i) } else { 0.0 };
            let emp = counts[i][j] as f64 / N as f64;
            max_err = max_err.max((emp - expected).abs());
        }
    }
    Ok(report("montecarlo", "hard_path_frequencies", max_err, 0.01, t0))
}

fn small_vocab(n: usize) -> Vec<Token> {
    let mut v = vec![BOS.to_string(), EOS.to_string(), UNK.to_string()];
    v.extend((0..n).map(|i| format!("w{i:02}")));
    v
}

/// Full-training-loss gradient (NLL + lambda * latency, future information
/// enabled) against central finite differences on a d_model = 8 model and a
/// 2-sentence batch.
pub fn gradient_check() -> Result<CheckReport> {
    let t0 = Instant::now();
    let toks = |s: &str| -> Vec<Token> { s.split_whitespace().map(str::to_string).collect() };
    let data: Vec<(Vec<Token>, Vec<Token>)> = vec![
        (toks("w00 w01 w02"), toks("w01 w02 w03")),
        (toks("w03 w04"), toks("w04 w00")),
    ];
    let targets: Vec<Vec<Token>> = data.iter().map(|(_, t)| t.clone()).collect();
    let lm = NGramLM::fit(&targets, 2)?;
    let examples: Vec<TrainingExample> = build_examples(&data, Some(&lm));

    let mut config = ModelConfig::desk_default(small_vocab(5), small_vocab(5));
    config.d_model = 8;
    config.ffn_dim = 16;
    config.num_encoder_layers = 1;
    config.num_decoder_layers = 1;
    config.lambda_latency = 0.05;
    config.future_info_enabled = true;
    config.seed = 11;
    // finite differences need a deterministic objective
    config.train_noise_var = 0.0;
    let model = Model::new(config)?;
    // Perturb the zero-initialized future keys so their gradients are
    // exercised away from the stationary point.
    for (name, p) in model.params() {
        if name.contains("future.wk") {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let vals: Vec<f64> = (0..p.len()).map(|_| (rng.random::<f64>() - 0.5) * 0.2).collect();
            p.set_values(vals)?;
        }
    }

    let stats = model.training_forward(&examples)?;
    backward(&stats.loss)?;
    let grads: Vec<(String, Vec<f64>)> = model
        .params()
        .iter()
        .map(|(n, p)| (n.clone(), p.grad().unwrap_or_else(|| vec![0.0; p.len()])))
        .collect();
    model.clear_grads();

    // eps = 1e-6: wide enough to dominate f64 rounding on an O(1) loss,
    // narrow enough that relu kinks near (not at) the evaluation point stay
    // outside the central-difference window.
    let mut max_rel = 0.0f64;
    for ((name, analytic), (_, p)) in grads.iter().zip(model.params().iter()) {
        let fd = finite_difference_gradient(
            |_: &Tensor| Ok(model.training_forward(&examples)?.loss.item()),
            p,
            1e-6,
        )?;
        for (a, f) in analytic.iter().zip(fd.values().iter()) {
            let denom = a.abs().max(f.abs()).max(1e-5);
            let rel = (a - f).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
            if rel > 1e-4 {
                eprintln!("gradient mismatch in {name}: analytic {a} vs fd {f}");
            }
        }
    }
    Ok(report("gradient", "training_loss_vs_finite_differences", max_rel, 1e-4, t0))
}

/// Metric sanity: the wait-k identity, CAAL collapse at zero cost, strict
/// CAAL ordering between the two LM cost profiles, and AL shift behavior.
pub fn metric_suite() -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();

    let t0 = Instant::now();
    let mut wait_k_err = 0.0f64;
    for s in [4usize, 6, 9] {
        for k in 1..=s {
            let delays: Vec<f64> = (0..s).map(|i| ((k + i) as f64).min(s as f64)).collect();
            let al = streaming::average_lagging_from_delays(&delays, s as f64, s as f64)?;
            wait_k_err = wait_k_err.max((al - k as f64).abs());
        }
    }
    out.push(report("metric", "wait_k_identity", wait_k_err, 0.0, t0));

    let t0 = Instant::now();
    let trace = synthetic_trace(vec![2.0, 3.0, 5.0, 6.0], 6, 4, vec![0, 1, 2, 3]);
    let al_ms = streaming::average_lagging_ms(&trace)?;
    let caal0 = streaming::computation_aware_al(&trace, 0.0, 0.0)?;
    out.push(report("metric", "caal_zero_cost_collapse", (caal0 - al_ms).abs(), 1e-9, t0));

    let t0 = Instant::now();
    let slm = streaming::computation_aware_al(&trace, crate::lm::SLM_QUERY_COST_MS, 1.0)?;
    let xlm = streaming::computation_aware_al(&trace, crate::lm::XLM_QUERY_COST_MS, 1.0)?;
    // strict ordering: the error is how far the ordering margin is from positive
    let margin_err = if xlm > slm { 0.0 } else { slm - xlm + 1.0 };
    out.push(report("metric", "caal_cost_profile_ordering", margin_err, 0.0, t0));

    let t0 = Instant::now();
    let base = vec![1.0, 2.0, 4.0];
    let al = streaming::average_lagging_from_delays(&base, 100.0, 3.0)?;
    let shifted: Vec<f64> = base.iter().map(|d| d + 2.5).collect();
    let al2 = streaming::average_lagging_from_delays(&shifted, 100.0, 3.0)?;
    out.push(report("metric", "al_shift_by_constant", (al2 - al - 2.5).abs(), 1e-9, t0));

    Ok(out)
}

fn synthetic_trace(
    delays: Vec<f64>,
    source_units: usize,
    hyp_len: usize,
    lm_calls: Vec<usize>,
) -> streaming::DecodeTrace {
    let n = delays.len();
    streaming::DecodeTrace {
        events: Vec::new(),
        wall_ms: delays.iter().map(|d| d * streaming::DEFAULT_UNIT_MS).collect(),
        hypothesis: (0..hyp_len).map(|i| format!("t{i}")).collect(),
        source_units,
        unit_duration_ms: streaming::DEFAULT_UNIT_MS,
        model_steps: (1..=n).collect(),
        lm_calls,
        model_cost_ms: 0.0,
        lm_cost_ms: 0.0,
        lm_pw: None,
        measured_ms: 0.0,
        delays,
    }
}

/// Baseline recovery: zeroed future parameters with additive modulation
/// reproduce the plain model bit-for-bit through training and decoding.
pub fn ablation_check() -> Result<CheckReport> {
    let t0 = Instant::now();
    let toks = |s: &str| -> Vec<Token> { s.split_whitespace().map(str::to_string).collect() };
    let mut config = ModelConfig::desk_default(small_vocab(5), small_vocab(5));
    config.d_model = 8;
    config.ffn_dim = 16;
    config.future_info_enabled = true;
    config.lambda_latency = 0.05;
    config.seed = 23;
    let fused = Model::new(config)?;
    fused.zero_future_params();
    let mut cp = fused.to_checkpoint();
    cp.config.future_info_enabled = false;
    let plain = Model::from_checkpoint(&cp)?;

    let data = vec![(toks("w00 w01 w02"), toks("w02 w01 w00"))];
    let targets: Vec<Vec<Token>> = data.iter().map(|(_, t)| t.clone()).collect();
    let lm = NGramLM::fit(&targets, 2)?;
    let with = build_examples(&data, Some(&lm));
    let without = build_examples(&data, None);

    let a = fused.training_forward(&with)?.loss.item();
    let b = plain.training_forward(&without)?.loss.item();
    let mut bit_mismatch = if a.to_bits() == b.to_bits() { 0.0 } else { 1.0f64 };

    let stream = streaming::SourceStream::from_tokens(&plain, &toks("w00 w01 w02"))?;
    let policy = streaming::DecodePolicy::default();
    let (hyp_a, trace_a) =
        streaming::simul_decode(&fused, &streaming::Variant::MmaLm { lm: &lm }, &stream, &policy)?;
    let (hyp_b, trace_b) =
        streaming::simul_decode(&plain, &streaming::Variant::Mma, &stream, &policy)?;
    if hyp_a != hyp_b || trace_a.delays != trace_b.delays {
        bit_mismatch = 1.0;
    }
    Ok(report("ablation", "zeroed_future_recovers_baseline", bit_mismatch, 0.0, t0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alignment_and_metric_suites_pass() {
        for r in alignment_suite().unwrap() {
            assert!(r.pass, "{}", r.line());
        }
        for r in metric_suite().unwrap() {
            assert!(r.pass, "{}", r.line());
        }
    }

    #[test]
    fn ablation_suite_passes() {
        let r = ablation_check().unwrap();
        assert!(r.pass, "{}", r.line());
    }

    #[test]
    fn suite_names_parse() {
        assert!(matches!("all".parse::<Suite>().unwrap(), Suite::All));
        assert!("bogus".parse::<Suite>().is_err());
    }
}
