//! Command-line orchestration: dataset generation, two-stage training,
//! latency/quality evaluation sweeps, and the oracle verification suites.
//!
//! Every command resolves its options from flags plus an optional JSON
//! config file (flags win), then writes the fully resolved configuration
//! into the output directory so the run can be reproduced byte for byte.

use crate::error::{Error, Result};
use crate::lm::{NGramLM, Token, TokenSplitter};
use crate::model::{
    build_examples, train, Checkpoint, Model, ModelConfig, TrainSchedule, Vocab,
};
use crate::streaming::{
    average_lagging_ms, computation_aware_al, corpus_quality, simul_decode, CostProfile,
    CurvePoint, DecodePolicy, SourceStream, Variant, CURVE_CSV_HEADER,
};
use crate::tasks::{self, Dataset, TaskKind, TaskSpec};
use crate::verify::{run_suite, Suite};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "simulmt", version, about = "Simultaneous translation with monotonic attention and LM lookahead, at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel dataset and split it
    Gen(GenOpts),
    /// Train models on a generated dataset (stage 1 plus per-lambda finetuning)
    Train(TrainOpts),
    /// Decode a test set across checkpoints/segments and emit the curve CSV
    Eval(EvalOpts),
    /// Run the oracle verification suites
    Verify(VerifyOpts),
}

/// Exit codes: 0 success, 1 validation error, 2 verification failure, 3 IO.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(opts) => cmd_gen(opts),
        Command::Train(opts) => cmd_train(opts),
        Command::Eval(opts) => cmd_eval(opts),
        Command::Verify(opts) => return cmd_verify(opts),
    };
    match outcome {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Io(_) | Error::Serde(_) => 3,
                _ => 1,
            }
        }
    }
}

fn load_file_opts<T: for<'a> Deserialize<'a> + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

// ---- gen ----

#[derive(Args, Serialize, Deserialize, Default, Clone)]
struct GenOpts {
    /// JSON file with the same keys as the flags; flags override it
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// copy | shifted_copy | bigram_grammar
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    determinism: Option<f64>,
    #[arg(long)]
    len_min: Option<usize>,
    #[arg(long)]
    len_max: Option<usize>,
    /// train,dev,test ratios, e.g. 0.8,0.1,0.1
    #[arg(long)]
    ratios: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl GenOpts {
    fn merge(self, file: GenOpts) -> GenOpts {
        GenOpts {
            config: None,
            kind: self.kind.or(file.kind),
            vocab: self.vocab.or(file.vocab),
            n: self.n.or(file.n),
            seed: self.seed.or(file.seed),
            determinism: self.determinism.or(file.determinism),
            len_min: self.len_min.or(file.len_min),
            len_max: self.len_max.or(file.len_max),
            ratios: self.ratios.or(file.ratios),
            out: self.out.or(file.out),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct GenManifest {
    task: TaskSpec,
    n: usize,
    ratios: (f64, f64, f64),
    sizes: (usize, usize, usize),
    files: Vec<String>,
}

fn cmd_gen(opts: GenOpts) -> Result<()> {
    let file: GenOpts = load_file_opts(&opts.config.clone())?;
    let o = opts.merge(file);
    let out = o.out.clone().ok_or_else(|| Error::Config("--out is required".into()))?;
    let spec = TaskSpec {
        kind: o.kind.as_deref().unwrap_or("bigram_grammar").parse::<TaskKind>()?,
        vocab_size: o.vocab.unwrap_or(32),
        len_range: (o.len_min.unwrap_or(5), o.len_max.unwrap_or(12)),
        determinism: o.determinism.unwrap_or(0.8),
        seed: o.seed.unwrap_or(0),
    };
    let n = o.n.unwrap_or(2000);
    let ratios = parse_ratios(o.ratios.as_deref().unwrap_or("0.8,0.1,0.1"))?;

    let data = tasks::generate(&spec, n)?;
    let (train, dev, test) = tasks::split(&data, ratios, spec.seed)?;
    ensure_dir(&out)?;
    let mut files = Vec::new();
    for (name, part) in [("train", &train), ("dev", &dev), ("test", &test)] {
        let src = out.join(format!("{name}.src"));
        let tgt = out.join(format!("{name}.tgt"));
        tasks::write_parallel(&src, &tgt, part)?;
        files.push(format!("{name}.src"));
        files.push(format!("{name}.tgt"));
    }
    let manifest = GenManifest {
        task: spec,
        n,
        ratios,
        sizes: (train.len(), dev.len(), test.len()),
        files,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    let resolved = GenOpts {
        config: None,
        kind: o.kind.or(Some("bigram_grammar".into())),
        vocab: o.vocab.or(Some(32)),
        n: Some(n),
        seed: o.seed.or(Some(0)),
        determinism: o.determinism.or(Some(0.8)),
        len_min: o.len_min.or(Some(5)),
        len_max: o.len_max.or(Some(12)),
        ratios: o.ratios.or(Some("0.8,0.1,0.1".into())),
        out: Some(out.clone()),
    };
    write_json(&out.join("run_config.json"), &resolved)?;
    eprintln!(
        "wrote {}/{{train,dev,test}}.{{src,tgt}} ({}/{}/{} sentences)",
        out.display(),
        manifest.sizes.0,
        manifest.sizes.1,
        manifest.sizes.2
    );
    Ok(())
}

fn parse_ratios(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad ratio `{p}`"))))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::Config(format!("expected three ratios, got `{s}`")));
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad number `{p}`"))))
        .collect()
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad integer `{p}`"))))
        .collect()
}

// ---- train ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TrainVariant {
    Mma,
    MmaLm,
    MmaLmrBase,
}

impl std::str::FromStr for TrainVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mma" => Ok(TrainVariant::Mma),
            "mma-lm" => Ok(TrainVariant::MmaLm),
            "mma-lmr-base" => Ok(TrainVariant::MmaLmrBase),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected mma|mma-lm|mma-lmr-base)"
            ))),
        }
    }
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
struct TrainOpts {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Directory produced by `gen`
    #[arg(long)]
    data: Option<PathBuf>,
    /// mma | mma-lm | mma-lmr-base
    #[arg(long)]
    variant: Option<String>,
    /// Stage-2 latency weights, e.g. 0.01,0.05,0.1
    #[arg(long)]
    lambdas: Option<String>,
    /// Per-head variance weight; fixed at 0 and rejected otherwise
    #[arg(long)]
    lambda_var: Option<f64>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    enc_layers: Option<usize>,
    #[arg(long)]
    dec_layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// additive | multiplicative
    #[arg(long)]
    modulation: Option<String>,
    /// none | chars
    #[arg(long)]
    splitter: Option<String>,
    #[arg(long)]
    pseudo_speech_ratio: Option<usize>,
    #[arg(long)]
    lm_order: Option<usize>,
    /// Load the LM from a file instead of fitting it on the training targets
    #[arg(long)]
    lm_file: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainOpts {
    fn merge(self, f: TrainOpts) -> TrainOpts {
        TrainOpts {
            config: None,
            data: self.data.or(f.data),
            variant: self.variant.or(f.variant),
            lambdas: self.lambdas.or(f.lambdas),
            lambda_var: self.lambda_var.or(f.lambda_var),
            stage1_epochs: self.stage1_epochs.or(f.stage1_epochs),
            stage2_epochs: self.stage2_epochs.or(f.stage2_epochs),
            batch_size: self.batch_size.or(f.batch_size),
            d_model: self.d_model.or(f.d_model),
            enc_layers: self.enc_layers.or(f.enc_layers),
            dec_layers: self.dec_layers.or(f.dec_layers),
            heads: self.heads.or(f.heads),
            ffn_dim: self.ffn_dim.or(f.ffn_dim),
            lr: self.lr.or(f.lr),
            warmup: self.warmup.or(f.warmup),
            clip_norm: self.clip_norm.or(f.clip_norm),
            seed: self.seed.or(f.seed),
            modulation: self.modulation.or(f.modulation),
            splitter: self.splitter.or(f.splitter),
            pseudo_speech_ratio: self.pseudo_speech_ratio.or(f.pseudo_speech_ratio),
            lm_order: self.lm_order.or(f.lm_order),
            lm_file: self.lm_file.or(f.lm_file),
            out: self.out.or(f.out),
        }
    }
}

fn read_split(dir: &Path, name: &str) -> Result<Dataset> {
    tasks::read_parallel(&dir.join(format!("{name}.src")), &dir.join(format!("{name}.tgt")))
}

fn lambda_file_name(lambda: f64) -> String {
    format!("lambda_{lambda}.ckpt.json")
}

fn cmd_train(opts: TrainOpts) -> Result<()> {
    let file: TrainOpts = load_file_opts(&opts.config.clone())?;
    let o = opts.merge(file);
    let data_dir = o.data.clone().ok_or_else(|| Error::Config("--data is required".into()))?;
    let out = o.out.clone().ok_or_else(|| Error::Config("--out is required".into()))?;
    let variant: TrainVariant = o.variant.as_deref().unwrap_or("mma").parse()?;

    if let Some(lv) = o.lambda_var {
        if lv != 0.0 {
            return Err(Error::Config(
                "lambda_var is fixed at 0 for infinite-lookback models; remove the flag".into(),
            ));
        }
    }
    if variant != TrainVariant::MmaLm
        && (o.lm_order.is_some() || o.lm_file.is_some() || o.splitter.is_some())
    {
        eprintln!("warning: variant {:?} does not consume an LM; ignoring LM flags", variant);
    }

    let train_data = read_split(&data_dir, "train")?;
    if train_data.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let splitter: TokenSplitter = match variant {
        TrainVariant::MmaLm => o.splitter.as_deref().unwrap_or("none").parse()?,
        _ => TokenSplitter::None,
    };
    let extra_tgt: Vec<Token> = match splitter {
        TokenSplitter::None => Vec::new(),
        TokenSplitter::Chars => {
            // vocabulary must cover the sub-token pieces of every target token
            let mut set = std::collections::BTreeSet::new();
            for (_, t) in &train_data {
                for tok in t {
                    for piece in splitter.split(tok) {
                        set.insert(piece);
                    }
                }
            }
            set.into_iter().collect()
        }
    };
    let src_vocab = Vocab::build(train_data.iter().map(|(s, _)| s), &[]);
    let tgt_vocab = Vocab::build(train_data.iter().map(|(_, t)| t), &extra_tgt);

    let mut config = ModelConfig::desk_default(
        src_vocab.tokens().to_vec(),
        tgt_vocab.tokens().to_vec(),
    );
    if let Some(v) = o.d_model {
        config.d_model = v;
    }
    if let Some(v) = o.enc_layers {
        config.num_encoder_layers = v;
    }
    if let Some(v) = o.dec_layers {
        config.num_decoder_layers = v;
    }
    if let Some(v) = o.heads {
        config.heads = v;
    }
    if let Some(v) = o.ffn_dim {
        config.ffn_dim = v;
    }
    if let Some(v) = o.lr {
        config.base_lr = v;
    }
    if let Some(v) = o.warmup {
        config.warmup_steps = v;
    }
    if let Some(v) = o.clip_norm {
        config.clip_norm = v;
    }
    if let Some(v) = o.seed {
        config.seed = v;
    }
    if let Some(m) = &o.modulation {
        config.modulation_mode = m.parse()?;
    }
    if let Some(v) = o.pseudo_speech_ratio {
        config.pseudo_speech_ratio = v;
    }
    config.token_splitter = splitter;
    config.future_info_enabled = variant == TrainVariant::MmaLm;

    ensure_dir(&out)?;
    let lm = match variant {
        TrainVariant::MmaLm => {
            let lm = match &o.lm_file {
                Some(path) => NGramLM::load(path)?,
                None => {
                    let targets: Vec<Vec<Token>> =
                        train_data.iter().map(|(_, t)| t.clone()).collect();
                    NGramLM::fit(&targets, o.lm_order.unwrap_or(2))?
                }
            };
            lm.save(&out.join("lm.json"))?;
            Some(lm)
        }
        _ => None,
    };

    let schedule = TrainSchedule {
        stage1_epochs: o.stage1_epochs.unwrap_or(3),
        stage2_epochs: o.stage2_epochs.unwrap_or(2),
        lambdas: parse_f64_list(o.lambdas.as_deref().unwrap_or("0.01,0.05,0.1"))?,
        batch_size: o.batch_size.unwrap_or(8),
    };
    let examples = build_examples(&train_data, lm.as_ref());
    let result = train(&config, &schedule, &examples)?;

    result.stage1.to_checkpoint().save(&out.join("stage1.ckpt.json"))?;
    for (lambda, model) in &result.finetuned {
        model.to_checkpoint().save(&out.join(lambda_file_name(*lambda)))?;
    }
    let log_lines: Vec<String> = result
        .log
        .iter()
        .map(|l| serde_json::to_string(l).map_err(Error::from))
        .collect::<Result<_>>()?;
    std::fs::write(out.join("training_log.jsonl"), log_lines.join("\n") + "\n")?;
    write_json(&out.join("run_config.json"), &o)?;
    eprintln!(
        "trained {:?}: stage1 + {} finetuned checkpoints in {}",
        variant,
        result.finetuned.len(),
        out.display()
    );
    Ok(())
}

// ---- eval ----

#[derive(Args, Serialize, Deserialize, Default, Clone)]
struct EvalOpts {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Directory produced by `gen` (test split is decoded)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint directory of the plain MMA training run
    #[arg(long)]
    mma_dir: Option<PathBuf>,
    /// Checkpoint directory of the future-information training run
    #[arg(long)]
    mma_lm_dir: Option<PathBuf>,
    /// Comma list out of mma,mma-lm,mma-lmr
    #[arg(long)]
    variants: Option<String>,
    /// Decision segment sizes in source units, e.g. 1,2
    #[arg(long)]
    segments: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    topk: Option<usize>,
    /// Simulated LM cost per query in ms (6.1 small profile, 24.78 large)
    #[arg(long)]
    lm_cost: Option<f64>,
    #[arg(long)]
    model_cost: Option<f64>,
    /// LM for rescoring; defaults to <mma-lm-dir>/lm.json when present
    #[arg(long)]
    lm_file: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl EvalOpts {
    fn merge(self, f: EvalOpts) -> EvalOpts {
        EvalOpts {
            config: None,
            data: self.data.or(f.data),
            mma_dir: self.mma_dir.or(f.mma_dir),
            mma_lm_dir: self.mma_lm_dir.or(f.mma_lm_dir),
            variants: self.variants.or(f.variants),
            segments: self.segments.or(f.segments),
            threshold: self.threshold.or(f.threshold),
            topk: self.topk.or(f.topk),
            lm_cost: self.lm_cost.or(f.lm_cost),
            model_cost: self.model_cost.or(f.model_cost),
            lm_file: self.lm_file.or(f.lm_file),
            threads: self.threads.or(f.threads),
            out: self.out.or(f.out),
        }
    }
}

fn list_lambda_checkpoints(dir: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("lambda_") && name.ends_with(".ckpt.json") {
            let cp = Checkpoint::load(&path)?;
            out.push((cp.config.lambda_latency, path));
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "no lambda_*.ckpt.json checkpoints in {}",
            dir.display()
        )));
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(out)
}

#[derive(Serialize)]
struct CellSummary {
    row: usize,
    variant: String,
    lambda: f64,
    segment_units: usize,
    segment_ms: f64,
    checkpoint: String,
    sentences: usize,
    scored_sentences: usize,
    al_units: f64,
    trace_file: String,
}

#[derive(Serialize)]
struct EvalManifest {
    rows: Vec<CellSummary>,
    lm_next_token_accuracy: Option<f64>,
}

/// Decode every test sentence for one (checkpoint, segment, variant) cell.
/// Sentences are split over worker threads, each rebuilding the model from
/// the checkpoint; results fold back in input order.
fn decode_cell(
    cp: &Checkpoint,
    lm: Option<&NGramLM>,
    variant_name: &str,
    test: &Dataset,
    policy: &DecodePolicy,
    topk: usize,
    threads: usize,
) -> Result<Vec<(Vec<Token>, crate::streaming::DecodeTrace)>> {
    let run_range = |range: std::ops::Range<usize>| -> Result<Vec<_>> {
        let model = Model::from_checkpoint(cp)?;
        let mut results = Vec::with_capacity(range.len());
        for idx in range {
            let (src, _) = &test[idx];
            let stream = SourceStream::from_tokens(&model, src)?;
            let variant = match variant_name {
                "mma" => Variant::Mma,
                "mma-lm" => Variant::MmaLm {
                    lm: lm.expect("mma-lm needs an lm"),
                },
                "mma-lmr" => Variant::MmaLmr {
                    lm: lm.expect("mma-lmr needs an lm"),
                    topk,
                },
                other => return Err(Error::Config(format!("unknown variant `{other}`"))),
            };
            results.push(simul_decode(&model, &variant, &stream, policy)?);
        }
        Ok(results)
    };

    if threads <= 1 || test.len() < 2 * threads {
        return run_range(0..test.len());
    }
    let chunk = test.len().div_ceil(threads);
    let ranges: Vec<std::ops::Range<usize>> = (0..threads)
        .map(|t| (t * chunk).min(test.len())..((t + 1) * chunk).min(test.len()))
        .filter(|r| !r.is_empty())
        .collect();
    let mut results: Vec<Result<Vec<_>>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .into_iter()
            .map(|r| scope.spawn(move || run_range(r)))
            .collect();
        for h in handles {
            results.push(h.join().expect("decode worker panicked"));
        }
    });
    let mut out = Vec::with_capacity(test.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn cmd_eval(opts: EvalOpts) -> Result<()> {
    let file: EvalOpts = load_file_opts(&opts.config.clone())?;
    let o = opts.merge(file);
    let data_dir = o.data.clone().ok_or_else(|| Error::Config("--data is required".into()))?;
    let out = o.out.clone().ok_or_else(|| Error::Config("--out is required".into()))?;
    let variants: Vec<String> = o
        .variants
        .as_deref()
        .unwrap_or("mma")
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let segments = parse_usize_list(o.segments.as_deref().unwrap_or("1"))?;
    let threshold = o.threshold.unwrap_or(0.5);
    let topk = o.topk.unwrap_or(5);
    let costs = CostProfile {
        model_cost_ms: o.model_cost.unwrap_or(crate::streaming::DEFAULT_MODEL_COST_MS),
        lm_cost_ms: o.lm_cost.unwrap_or(crate::lm::SLM_QUERY_COST_MS),
    };
    let threads = o.threads.unwrap_or(4).max(1);

    let test = read_split(&data_dir, "test")?;
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }

    // LM for rescoring / future info: explicit file, else the one saved by
    // the mma-lm training run, else fitted on the training targets.
    let lm: Option<NGramLM> = {
        let from_file = match &o.lm_file {
            Some(p) => Some(NGramLM::load(p)?),
            None => match &o.mma_lm_dir {
                Some(dir) if dir.join("lm.json").exists() => {
                    Some(NGramLM::load(&dir.join("lm.json"))?)
                }
                _ => None,
            },
        };
        let needs_lm = variants.iter().any(|v| v == "mma-lm" || v == "mma-lmr");
        match (from_file, needs_lm) {
            (Some(lm), _) => Some(lm),
            (None, true) => {
                let train_data = read_split(&data_dir, "train")?;
                let targets: Vec<Vec<Token>> = train_data.iter().map(|(_, t)| t.clone()).collect();
                Some(NGramLM::fit(&targets, 2)?)
            }
            (None, false) => None,
        }
    };

    ensure_dir(&out)?;
    ensure_dir(&out.join("traces"))?;
    let mut csv = String::from(CURVE_CSV_HEADER);
    csv.push('\n');
    let mut rows = Vec::new();
    let mut row_idx = 0usize;

    for variant in &variants {
        let ckpt_dir = match variant.as_str() {
            "mma" | "mma-lmr" => o.mma_dir.as_ref().ok_or_else(|| {
                Error::Config(format!("variant {variant} needs --mma-dir"))
            })?,
            "mma-lm" => o.mma_lm_dir.as_ref().ok_or_else(|| {
                Error::Config("variant mma-lm needs --mma-lm-dir".into())
            })?,
            other => return Err(Error::Config(format!("unknown variant `{other}`"))),
        };
        for (lambda, ckpt_path) in list_lambda_checkpoints(ckpt_dir)? {
            let cp = Checkpoint::load(&ckpt_path)?;
            for &segment in &segments {
                let policy = DecodePolicy {
                    threshold,
                    segment_units: segment,
                    costs,
                };
                let results =
                    decode_cell(&cp, lm.as_ref(), variant, &test, &policy, topk, threads)?;

                let mut al_ms_sum = 0.0;
                let mut al_units_sum = 0.0;
                let mut caal_sum = 0.0;
                let mut scored = 0usize;
                let mut pw_sum = 0.0;
                let mut pw_n = 0usize;
                let mut pairs = Vec::new();
                let mut trace_lines = Vec::new();
                for ((hyp, trace), (_, reference)) in results.iter().zip(test.iter()) {
                    pairs.push((hyp.clone(), reference.clone()));
                    if !trace.delays.is_empty() {
                        al_ms_sum += average_lagging_ms(trace)?;
                        al_units_sum += crate::streaming::average_lagging(trace)?;
                        caal_sum +=
                            computation_aware_al(trace, costs.lm_cost_ms, costs.model_cost_ms)?;
                        scored += 1;
                    }
                    if let Some(pw) = trace.lm_pw {
                        pw_sum += pw;
                        pw_n += 1;
                    }
                    trace_lines.push(serde_json::to_string(trace)?);
                }
                let quality = corpus_quality(&pairs)?;
                let denom = scored.max(1) as f64;
                let point = CurvePoint {
                    lambda,
                    segment_ms: segment as f64 * crate::streaming::DEFAULT_UNIT_MS,
                    al: al_ms_sum / denom,
                    caal: caal_sum / denom,
                    quality,
                    lm_pw: if pw_n > 0 { pw_sum / pw_n as f64 } else { 0.0 },
                };
                csv.push_str(&point.csv_row());
                csv.push('\n');

                let trace_file = format!("traces/{variant}_lambda{lambda}_seg{segment}.jsonl");
                std::fs::write(out.join(&trace_file), trace_lines.join("\n") + "\n")?;
                rows.push(CellSummary {
                    row: row_idx,
                    variant: variant.clone(),
                    lambda,
                    segment_units: segment,
                    segment_ms: point.segment_ms,
                    checkpoint: ckpt_path.display().to_string(),
                    sentences: test.len(),
                    scored_sentences: scored,
                    al_units: al_units_sum / denom,
                    trace_file,
                });
                row_idx += 1;
            }
        }
    }

    std::fs::write(out.join("curve.csv"), &csv)?;
    let lm_acc = lm.as_ref().map(|lm| {
        let targets: Vec<Vec<Token>> = test.iter().map(|(_, t)| t.clone()).collect();
        crate::lm::next_token_accuracy(&targets, lm)
    });
    write_json(
        &out.join("curve_manifest.json"),
        &EvalManifest {
            rows,
            lm_next_token_accuracy: lm_acc,
        },
    )?;
    write_json(&out.join("run_config.json"), &o)?;
    if let Some(acc) = lm_acc {
        eprintln!("lm next-token accuracy on test targets: {:.2}%", 100.0 * acc);
    }
    eprintln!("wrote {} curve rows to {}/curve.csv", row_idx, out.display());
    Ok(())
}

// ---- verify ----

#[derive(Args)]
struct VerifyOpts {
    /// all | alignment | montecarlo | gradient | metric | ablation
    #[arg(long, default_value = "all")]
    suite: String,
}

#[derive(Serialize)]
struct VerifySummary<'a> {
    checks: &'a [crate::verify::CheckReport],
    pass: bool,
}

fn cmd_verify(opts: VerifyOpts) -> i32 {
    let suite: Suite = match opts.suite.parse() {
        Ok(s) => s,
        Err(err) => {
            eprintln!("error: {err}");
            return 1;
        }
    };
    let reports = match run_suite(suite) {
        Ok(r) => r,
        Err(err) => {
            eprintln!("error: {err}");
            return 1;
        }
    };
    for r in &reports {
        eprintln!("{}", r.line());
    }
    let pass = reports.iter().all(|r| r.pass);
    let summary = VerifySummary {
        checks: &reports,
        pass,
    };
    println!("{}", serde_json::to_string(&summary).expect("serializable"));
    if pass {
        0
    } else {
        2
    }
}
