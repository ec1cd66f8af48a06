//! Synthetic parallel corpora where target continuations are partially
//! predictable from target-side context alone, which is exactly what a
//! language model can anticipate for the read/write policy. The
//! `bigram_grammar` task is the primary benchmark: its `determinism` knob
//! sets the probability that a target token is forced by a target-side
//! bigram rule rather than by the source.

use crate::error::{Error, Result};
use crate::lm::Token;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    ShiftedCopy,
    BigramGrammar,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "shifted_copy" => Ok(TaskKind::ShiftedCopy),
            "bigram_grammar" => Ok(TaskKind::BigramGrammar),
            other => Err(Error::Config(format!(
                "unknown task kind `{other}` (expected copy|shifted_copy|bigram_grammar)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub len_range: (usize, usize),
    /// Probability that a target token is forced by the target-side grammar.
    pub determinism: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.determinism) {
            return Err(Error::Config(format!(
                "determinism {} outside [0, 1]",
                self.determinism
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.len_range.0 < 1 || self.len_range.0 > self.len_range.1 {
            return Err(Error::Config(format!(
                "invalid length range {:?}",
                self.len_range
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vec<Token> {
        (0..self.vocab_size).map(|i| format!("w{i:02}")).collect()
    }
}

/// Local swap rate for the shifted_copy task.
const SWAP_RATE: f64 = 0.2;

/// Generate `n` (source, target) pairs, deterministic under the spec's seed.
pub fn generate(spec: &TaskSpec, n: usize) -> Result<Vec<(Vec<Token>, Vec<Token>)>> {
    spec.validate()?;
    if n < 1 {
        return Err(Error::Contract("generate: n must be at least 1".into()));
    }
    let vocab = spec.vocab();
    let v = vocab.len();
    // Fixed bijections derived from the seed on separate streams: f maps
    // source tokens to target tokens, g drives the target-side grammar.
    let f = seeded_permutation(v, spec.seed ^ 0x5f5f_0001);
    let g = seeded_permutation(v, spec.seed ^ 0x5f5f_0002);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.random_range(spec.len_range.0..=spec.len_range.1);
        let src_ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..v)).collect();
        let tgt_ids: Vec<usize> = match spec.kind {
            TaskKind::Copy => src_ids.clone(),
            TaskKind::ShiftedCopy => {
                let mut t: Vec<usize> = src_ids.iter().map(|&s| f[s]).collect();
                let mut i = 0;
                while i + 1 < t.len() {
                    if rng.random::<f64>() < SWAP_RATE {
                        t.swap(i, i + 1);
                        i += 2;
                    } else {
                        i += 1;
                    }
                }
                t
            }
            TaskKind::BigramGrammar => {
                let mut t = Vec::with_capacity(len);
                t.push(f[src_ids[0]]);
                for i in 1..len {
                    if rng.random::<f64>() < spec.determinism {
                        t.push(g[t[i - 1]]);
                    } else {
                        t.push(f[src_ids[i]]);
                    }
                }
                t
            }
        };
        let src = src_ids.iter().map(|&i| vocab[i].clone()).collect();
        let tgt = tgt_ids.iter().map(|&i| vocab[i].clone()).collect();
        out.push((src, tgt));
    }
    Ok(out)
}

fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

pub type Dataset = Vec<(Vec<Token>, Vec<Token>)>;

/// Deterministic shuffled partition into train/dev/test; sizes land within
/// one element of the requested ratios.
pub fn split(
    dataset: &Dataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return Err(Error::Config("split ratios must be positive".into()));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios sum to {}", a + b + c)));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x73706c69);
    order.shuffle(&mut rng);
    let n_train = ((n as f64) * a).round() as usize;
    let n_dev = (((n as f64) * b).round() as usize).min(n - n_train.min(n));
    let take = |range: std::ops::Range<usize>| -> Dataset {
        order[range].iter().map(|&i| dataset[i].clone()).collect()
    };
    let train = take(0..n_train.min(n));
    let dev = take(n_train.min(n)..(n_train + n_dev).min(n));
    let test = take((n_train + n_dev).min(n)..n);
    Ok((train, dev, test))
}

/// One sentence per line, whitespace-separated tokens, UTF-8.
pub fn write_parallel(src_path: &Path, tgt_path: &Path, pairs: &Dataset) -> Result<()> {
    let mut src = String::new();
    let mut tgt = String::new();
    for (s, t) in pairs {
        src.push_str(&s.join(" "));
        src.push('\n');
        tgt.push_str(&t.join(" "));
        tgt.push('\n');
    }
    std::fs::write(src_path, src)?;
    std::fs::write(tgt_path, tgt)?;
    Ok(())
}

pub fn read_parallel(src_path: &Path, tgt_path: &Path) -> Result<Dataset> {
    let parse = |path: &Path| -> Result<Vec<Vec<Token>>> {
        Ok(std::fs::read_to_string(path)?
            .lines()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect())
    };
    let src = parse(src_path)?;
    let tgt = parse(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Data(format!(
            "parallel files disagree: {} source lines vs {} target lines",
            src.len(),
            tgt.len()
        )));
    }
    Ok(src.into_iter().zip(tgt).collect())
}
