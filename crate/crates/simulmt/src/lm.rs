//! Interpolated n-gram language model: the pluggable next-token predictor
//! behind future-information extraction, top-k rescoring, and perplexity
//! scoring. Jelinek-Mercer interpolation with weights tuned on a held-out
//! slice; a small uniform floor keeps every token's probability positive.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub type Token = String;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Simulated per-token query cost of the small causal LM, in milliseconds.
pub const SLM_QUERY_COST_MS: f64 = 6.1;
/// Simulated per-token query cost of the large multilingual LM.
pub const XLM_QUERY_COST_MS: f64 = 24.78;

/// Uniform floor mixed into every distribution.
const FLOOR: f64 = 1e-4;

const FORMAT_VERSION: u32 = 1;

/// LM-predicted next token attached to a target position; the final
/// position of every sentence carries the null prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuturePrediction {
    /// 1-based target index.
    pub position: usize,
    pub token: Option<Token>,
}

impl FuturePrediction {
    pub fn is_null(&self) -> bool {
        self.token.is_none()
    }
}

/// Splits an LM-predicted token into the translation model's sub-tokens,
/// simulating a vocabulary mismatch between the two. `Chars` exercises the
/// multi-sub-token branch of the summary layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenSplitter {
    #[default]
    None,
    Chars,
}

impl TokenSplitter {
    pub fn split(&self, token: &str) -> Vec<Token> {
        match self {
            TokenSplitter::None => vec![token.to_string()],
            TokenSplitter::Chars => token.chars().map(|c| c.to_string()).collect(),
        }
    }
}

impl std::str::FromStr for TokenSplitter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TokenSplitter::None),
            "chars" => Ok(TokenSplitter::Chars),
            other => Err(Error::Config(format!(
                "unknown token splitter `{other}` (expected none|chars)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct ContextTable {
    /// context ids (k-1 tokens) -> (next token id -> count)
    counts: HashMap<Vec<u32>, HashMap<u32, u32>>,
    totals: HashMap<Vec<u32>, u32>,
}

impl ContextTable {
    fn bump(&mut self, ctx: Vec<u32>, tok: u32) {
        *self.counts.entry(ctx.clone()).or_default().entry(tok).or_insert(0) += 1;
        *self.totals.entry(ctx).or_insert(0) += 1;
    }

    fn ml(&self, ctx: &[u32], tok: u32) -> Option<f64> {
        let total = *self.totals.get(ctx)? as f64;
        let c = self.counts.get(ctx).and_then(|m| m.get(&tok)).copied().unwrap_or(0);
        Some(c as f64 / total)
    }

    fn seen(&self, ctx: &[u32]) -> bool {
        self.totals.contains_key(ctx)
    }
}

/// Interpolated n-gram model over a whitespace-token vocabulary.
#[derive(Debug, Clone)]
pub struct NGramLM {
    order: usize,
    vocab: Vec<Token>,
    index: HashMap<Token, u32>,
    tables: Vec<ContextTable>,
    weights: Vec<f64>,
}

impl NGramLM {
    /// Fit counts with sentence-boundary padding and tune the interpolation
    /// weights by grid search on a held-out slice (every 20th sentence).
    pub fn fit(corpus: &[Vec<Token>], order: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data("cannot fit a language model on an empty corpus".into()));
        }
        if !(1..=5).contains(&order) {
            return Err(Error::Contract(format!("n-gram order {order} outside 1..=5")));
        }
        let vocab = build_vocab(corpus);
        let index: HashMap<Token, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();

        let mut lm = NGramLM {
            order,
            vocab,
            index,
            tables: Vec::new(),
            weights: vec![1.0 / order as f64; order],
        };

        let held_out: Vec<&Vec<Token>> =
            corpus.iter().enumerate().filter(|(i, _)| i % 20 == 19).map(|(_, s)| s).collect();
        let tuning: Vec<Vec<Token>> = corpus
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 20 != 19)
            .map(|(_, s)| s.clone())
            .collect();

        if !held_out.is_empty() && !tuning.is_empty() {
            lm.tables = lm.count(&tuning);
            let mut best = (f64::INFINITY, lm.weights.clone());
            for weights in simplex_grid(order, 10) {
                lm.weights = weights.clone();
                let mut nll = 0.0;
                let mut n = 0usize;
                for sent in &held_out {
                    let (s_nll, s_n) = lm.sentence_nll(sent);
                    nll += s_nll;
                    n += s_n;
                }
                let ppl = (nll / n.max(1) as f64).exp();
                if ppl < best.0 {
                    best = (ppl, weights);
                }
            }
            lm.weights = best.1;
        }

        let full: Vec<Vec<Token>> = corpus.to_vec();
        lm.tables = lm.count(&full);
        Ok(lm)
    }

    /// Order-1 model with no counts: every context falls back to the uniform
    /// distribution over the vocabulary.
    pub fn uniform(tokens: &[Token]) -> Self {
        let corpus: Vec<Vec<Token>> = vec![tokens.to_vec()];
        let vocab = build_vocab(&corpus);
        let index = vocab.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        NGramLM {
            order: 1,
            vocab,
            index,
            tables: vec![ContextTable::default()],
            weights: vec![1.0],
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &[Token] {
        &self.vocab
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn token_id(&self, token: &str) -> u32 {
        self.index
            .get(token)
            .copied()
            .unwrap_or_else(|| self.index[UNK])
    }

    fn count(&self, corpus: &[Vec<Token>]) -> Vec<ContextTable> {
        let mut tables = vec![ContextTable::default(); self.order];
        for sent in corpus {
            let padded = self.pad(sent);
            let start = self.order - 1;
            for t in start..padded.len() {
                let tok = padded[t];
                for (k, table) in tables.iter_mut().enumerate() {
                    let ctx = padded[t - k..t].to_vec();
                    table.bump(ctx, tok);
                }
            }
        }
        tables
    }

    /// `[BOS; order-1] ++ tokens ++ [EOS]` as ids.
    fn pad(&self, tokens: &[Token]) -> Vec<u32> {
        let bos = self.index[BOS];
        let eos = self.index[EOS];
        let mut out = vec![bos; self.order - 1];
        out.extend(tokens.iter().map(|t| self.token_id(t)));
        out.push(eos);
        out
    }

    fn context_ids(&self, prefix: &[Token]) -> Vec<u32> {
        let bos = self.index[BOS];
        let mut ctx = vec![bos; self.order - 1];
        ctx.extend(prefix.iter().map(|t| self.token_id(t)));
        ctx
    }

    fn prob_given(&self, ctx: &[u32], tok: u32) -> f64 {
        let v = self.vocab.len() as f64;
        // Weights of unseen-context orders are redistributed over the rest.
        let mut avail = 0.0;
        for (k, table) in self.tables.iter().enumerate() {
            let c = &ctx[ctx.len() - k..];
            if table.seen(c) {
                avail += self.weights[k];
            }
        }
        let base = if avail <= 0.0 {
            1.0 / v
        } else {
            let mut p = 0.0;
            for (k, table) in self.tables.iter().enumerate() {
                let c = &ctx[ctx.len() - k..];
                if let Some(ml) = table.ml(c, tok) {
                    p += self.weights[k] / avail * ml;
                }
            }
            p
        };
        (1.0 - FLOOR) * base + FLOOR / v
    }

    /// Full next-token distribution after `prefix`; always a valid, strictly
    /// positive probability vector over the vocabulary.
    pub fn next_distribution(&self, prefix: &[Token]) -> Vec<f64> {
        let ctx = self.context_ids(prefix);
        let ctx = &ctx[ctx.len().saturating_sub(self.order - 1)..];
        (0..self.vocab.len() as u32).map(|tok| self.prob_given(ctx, tok)).collect()
    }

    /// Highest-probability next token; ties resolve to the lowest vocab id.
    pub fn predict_next(&self, prefix: &[Token]) -> Token {
        let dist = self.next_distribution(prefix);
        let mut best = 0usize;
        for (i, p) in dist.iter().enumerate() {
            if *p > dist[best] {
                best = i;
            }
        }
        self.vocab[best].clone()
    }

    fn sentence_nll(&self, tokens: &[Token]) -> (f64, usize) {
        let padded = self.pad(tokens);
        let start = self.order - 1;
        let mut nll = 0.0;
        // Score the sentence tokens only, not the closing EOS; partial
        // hypotheses during rescoring are open-ended.
        let end = padded.len() - 1;
        for t in start..end {
            let ctx = &padded[t - (self.order - 1)..t];
            nll -= self.prob_given(ctx, padded[t]).ln();
        }
        (nll, end - start)
    }

    /// `exp` of the mean negative log-probability of the sequence, scored
    /// left to right under [`NGramLM::next_distribution`].
    pub fn sequence_perplexity(&self, tokens: &[Token]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::Contract("perplexity of an empty sequence".into()));
        }
        let (nll, n) = self.sentence_nll(tokens);
        Ok((nll / n as f64).exp())
    }

    /// Pick the candidate whose extension of `prefix` scores the lowest
    /// perplexity; near-ties fall back to the higher model score.
    pub fn rescore_candidates(
        &self,
        prefix: &[Token],
        candidates: &[(Token, f64)],
        k: usize,
    ) -> Result<Token> {
        if candidates.is_empty() {
            return Err(Error::Contract("rescore_candidates: empty candidate list".into()));
        }
        if candidates.len() > k {
            return Err(Error::Contract(format!(
                "rescore_candidates: {} candidates exceed top-{k}",
                candidates.len()
            )));
        }
        let mut best: Option<(f64, f64, &Token)> = None;
        for (token, score) in candidates {
            let mut extended = prefix.to_vec();
            extended.push(token.clone());
            let ppl = self.sequence_perplexity(&extended)?;
            best = match best {
                None => Some((ppl, *score, token)),
                Some((bp, bs, bt)) => {
                    let tie = (ppl - bp).abs() <= 1e-12 * bp.max(1.0);
                    if (tie && *score > bs) || (!tie && ppl < bp) {
                        Some((ppl, *score, token))
                    } else {
                        Some((bp, bs, bt))
                    }
                }
            };
        }
        Ok(best.expect("nonempty candidates").2.clone())
    }
}

/// Argmax next-token predictions for every target position of every
/// sentence, computed from the true prefix; the final position carries the
/// null prediction.
pub fn precompute_predictions(dataset: &[Vec<Token>], lm: &NGramLM) -> Vec<Vec<FuturePrediction>> {
    dataset
        .iter()
        .map(|sent| {
            let n = sent.len();
            (1..=n)
                .map(|i| FuturePrediction {
                    position: i,
                    token: if i == n {
                        None
                    } else {
                        Some(lm.predict_next(&sent[..i - 1]))
                    },
                })
                .collect()
        })
        .collect()
}

/// Fraction of non-null precomputed predictions that match the true token.
pub fn next_token_accuracy(dataset: &[Vec<Token>], lm: &NGramLM) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (sent, preds) in dataset.iter().zip(precompute_predictions(dataset, lm)) {
        for pred in preds {
            if let Some(tok) = &pred.token {
                total += 1;
                if *tok == sent[pred.position - 1] {
                    hits += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

fn build_vocab(corpus: &[Vec<Token>]) -> Vec<Token> {
    let mut set: std::collections::BTreeSet<Token> = corpus.iter().flatten().cloned().collect();
    set.remove(BOS);
    set.remove(EOS);
    set.remove(UNK);
    let mut vocab = vec![BOS.to_string(), EOS.to_string(), UNK.to_string()];
    vocab.extend(set);
    vocab
}

/// All length-`k` compositions of `steps` tenths, as simplex weights.
fn simplex_grid(k: usize, steps: u32) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut current = vec![0u32; k];
    fill(&mut out, &mut current, 0, steps);
    fn fill(out: &mut Vec<Vec<f64>>, current: &mut Vec<u32>, idx: usize, remaining: u32) {
        if idx == current.len() - 1 {
            current[idx] = remaining;
            out.push(current.iter().map(|&c| c as f64 / 10.0).collect());
            return;
        }
        for c in 0..=remaining {
            current[idx] = c;
            fill(out, current, idx + 1, remaining - c);
        }
    }
    out
}

// ---- serialization ----

#[derive(Serialize, Deserialize)]
struct LmFile {
    version: u32,
    order: usize,
    vocab: Vec<Token>,
    weights: Vec<f64>,
    /// tables[k] = sorted rows (context ids, sorted (token, count) pairs)
    tables: Vec<Vec<(Vec<u32>, Vec<(u32, u32)>)>>,
}

impl NGramLM {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tables = self
            .tables
            .iter()
            .map(|t| {
                let mut rows: Vec<(Vec<u32>, Vec<(u32, u32)>)> = t
                    .counts
                    .iter()
                    .map(|(ctx, toks)| {
                        let mut pairs: Vec<(u32, u32)> = toks.iter().map(|(k, v)| (*k, *v)).collect();
                        pairs.sort_unstable();
                        (ctx.clone(), pairs)
                    })
                    .collect();
                rows.sort();
                rows
            })
            .collect();
        let file = LmFile {
            version: FORMAT_VERSION,
            order: self.order,
            vocab: self.vocab.clone(),
            weights: self.weights.clone(),
            tables,
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: LmFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "lm file version {} (expected {FORMAT_VERSION})",
                file.version
            )));
        }
        if file.weights.len() != file.order || file.tables.len() != file.order {
            return Err(Error::Version("lm file inconsistent with its declared order".into()));
        }
        let index = file
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let tables = file
            .tables
            .into_iter()
            .map(|rows| {
                let mut table = ContextTable::default();
                for (ctx, pairs) in rows {
                    for (tok, count) in pairs {
                        table.counts.entry(ctx.clone()).or_default().insert(tok, count);
                        *table.totals.entry(ctx.clone()).or_insert(0) += count;
                    }
                }
                table
            })
            .collect();
        Ok(NGramLM {
            order: file.order,
            vocab: file.vocab,
            index,
            tables,
            weights: file.weights,
        })
    }
}
