//! Tiny transformer encoder-decoder with monotonic multihead decoding layers
//! and optional future-information fusion.
//!
//! The encoder is causally masked so `h_j` depends only on `x_{<=j}`;
//! re-encoding a longer prefix leaves earlier states untouched, which is what
//! lets streaming inference grow the source incrementally. Decoder cross
//! attention is the monotonic machinery from [`crate::attention`] driven by
//! the expected alignment of [`crate::alignment`].

mod forward;
mod train;

pub use forward::{latency_loss, DecodeState, ForwardStats, StepOutput};
pub use train::{
    build_examples, train, EpochLog, Optimizer, TrainResult, TrainSchedule, TrainingExample,
};

use crate::attention::{
    FfnParams, FutureEnergyParams, ModulationMode, MonotonicHeadParams, SoftAttentionParams,
};
use crate::error::{Error, Result};
use crate::lm::{Token, TokenSplitter, BOS, EOS, UNK};
use crate::numerics::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

const CHECKPOINT_VERSION: u32 = 1;

/// Token table with fixed special ids: `<s>`=0, `</s>`=1, `<unk>`=2.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<Token>,
    index: HashMap<Token, usize>,
}

impl Vocab {
    pub fn build<'a>(sentences: impl Iterator<Item = &'a Vec<Token>>, extra: &[Token]) -> Vocab {
        let mut set: std::collections::BTreeSet<Token> = sentences.flatten().cloned().collect();
        set.extend(extra.iter().cloned());
        set.remove(BOS);
        set.remove(EOS);
        set.remove(UNK);
        let mut tokens = vec![BOS.to_string(), EOS.to_string(), UNK.to_string()];
        tokens.extend(set);
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<Token>) -> Vocab {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(2)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub const BOS_ID: usize = 0;
    pub const EOS_ID: usize = 1;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub src_vocab: Vec<Token>,
    pub tgt_vocab: Vec<Token>,
    pub lambda_latency: f64,
    pub future_info_enabled: bool,
    pub modulation_mode: ModulationMode,
    pub token_splitter: TokenSplitter,
    /// Each source token expands into this many encoder sub-frames.
    pub pseudo_speech_ratio: usize,
    /// Variance of the pre-sigmoid noise on training-time selection
    /// energies; drives the selection probabilities toward decisive values
    /// so streaming inference sees what training optimized. Inference never
    /// draws noise.
    pub train_noise_var: f64,
    /// Learning-rate multiplier for the future-information parameters. The
    /// future energy is a low-dimensional shortcut straight into the
    /// selection probability; updated at the full rate it absorbs the
    /// alignment gradient before the monotonic energies learn anything.
    pub future_lr_scale: f64,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults; vocabularies come from the corpus.
    pub fn desk_default(src_vocab: Vec<Token>, tgt_vocab: Vec<Token>) -> Self {
        ModelConfig {
            d_model: 32,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            heads: 2,
            ffn_dim: 64,
            src_vocab,
            tgt_vocab,
            lambda_latency: 0.0,
            future_info_enabled: false,
            modulation_mode: ModulationMode::Additive,
            token_splitter: TokenSplitter::None,
            pseudo_speech_ratio: 1,
            train_noise_var: 1.0,
            future_lr_scale: 0.1,
            base_lr: 0.2,
            warmup_steps: 100,
            clip_norm: 10.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.lambda_latency < 0.0 || self.lambda_latency > 1.0 {
            return Err(Error::Config(format!(
                "lambda_latency {} outside {{0}} U (0, 1]",
                self.lambda_latency
            )));
        }
        if self.pseudo_speech_ratio < 1 {
            return Err(Error::Config("pseudo_speech_ratio must be >= 1".into()));
        }
        if self.train_noise_var < 0.0 {
            return Err(Error::Config("train_noise_var must be >= 0".into()));
        }
        if self.future_lr_scale <= 0.0 || self.future_lr_scale > 1.0 {
            return Err(Error::Config("future_lr_scale must be in (0, 1]".into()));
        }
        if self.src_vocab.is_empty() || self.tgt_vocab.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

pub(crate) struct AttnHead {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

pub(crate) struct EncoderLayer {
    pub heads: Vec<AttnHead>,
    pub w_o: Tensor,
    pub ffn: FfnParams,
}

pub(crate) struct DecoderLayer {
    pub self_heads: Vec<AttnHead>,
    pub self_w_o: Tensor,
    pub mono: Vec<MonotonicHeadParams>,
    pub soft: Vec<SoftAttentionParams>,
    pub w_v: Vec<Tensor>,
    pub cross_w_o: Tensor,
    pub ffn: FfnParams,
    pub future: FutureEnergyParams,
    pub future_ffn: FfnParams,
}

pub struct Model {
    pub config: ModelConfig,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub(crate) src_embed: Tensor,
    pub(crate) tgt_embed: Tensor,
    pub(crate) encoder: Vec<EncoderLayer>,
    pub(crate) decoder: Vec<DecoderLayer>,
    pub(crate) w_out: Tensor,
    pub(crate) b_out: Tensor,
    pub(crate) null_embed: Tensor,
    pub(crate) pos_table: Tensor,
    pub(crate) noise_rng: std::cell::RefCell<ChaCha8Rng>,
    params: Vec<(String, Tensor)>,
}

/// Ordered builder that registers every parameter under a stable name.
struct ParamBuilder {
    rng: ChaCha8Rng,
    future_rng: ChaCha8Rng,
    params: Vec<(String, Tensor)>,
}

impl ParamBuilder {
    fn new(seed: u64) -> Self {
        ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            // Separate stream: the shared parameters of a future-enabled and
            // a plain model must coincide for the same seed.
            future_rng: ChaCha8Rng::seed_from_u64(seed ^ 0xf07a_11ed),
            params: Vec::new(),
        }
    }

    fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        (0..rows * cols).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * a).collect()
    }

    fn mat(&mut self, name: &str, rows: usize, cols: usize) -> Tensor {
        let vals = Self::xavier(&mut self.rng, rows, cols);
        self.reg(name, Tensor::param(vals, &[rows, cols]).expect("param shape"))
    }

    fn future_mat(&mut self, name: &str, rows: usize, cols: usize, zero: bool) -> Tensor {
        // Scaled-down queries plus zero keys: the future energy starts at
        // exactly zero and grows into the selection probability only as fast
        // as it earns gradient, instead of perturbing early alignment
        // learning.
        let vals = if zero {
            vec![0.0; rows * cols]
        } else {
            Self::xavier(&mut self.future_rng, rows, cols)
                .into_iter()
                .map(|v| v * 0.05)
                .collect()
        };
        self.reg(name, Tensor::param(vals, &[rows, cols]).expect("param shape"))
    }

    fn vec(&mut self, name: &str, len: usize, fill: f64) -> Tensor {
        self.reg(name, Tensor::param(vec![fill; len], &[len]).expect("param shape"))
    }

    fn uniform_vec(&mut self, name: &str, len: usize, amp: f64) -> Tensor {
        let vals: Vec<f64> = (0..len).map(|_| (self.rng.random::<f64>() * 2.0 - 1.0) * amp).collect();
        self.reg(name, Tensor::param(vals, &[len]).expect("param shape"))
    }

    fn reg(&mut self, name: &str, t: Tensor) -> Tensor {
        self.params.push((name.to_string(), t.clone()));
        t
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnParams {
        FfnParams {
            w1: self.mat(&format!("{prefix}.w1"), d, f),
            b1: self.vec(&format!("{prefix}.b1"), f, 0.0),
            w2: self.mat(&format!("{prefix}.w2"), f, d),
            b2: self.vec(&format!("{prefix}.b2"), d, 0.0),
        }
    }

    fn future_ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnParams {
        let mk = |b: &mut Self, name: String, rows, cols| {
            let vals = Self::xavier(&mut b.future_rng, rows, cols);
            b.reg(&name, Tensor::param(vals, &[rows, cols]).expect("param shape"))
        };
        let w1 = mk(self, format!("{prefix}.w1"), d, f);
        let b1 = self.reg(&format!("{prefix}.b1"), Tensor::param(vec![0.0; f], &[f]).unwrap());
        let w2 = mk(self, format!("{prefix}.w2"), f, d);
        let b2 = self.reg(&format!("{prefix}.b2"), Tensor::param(vec![0.0; d], &[d]).unwrap());
        FfnParams { w1, b1, w2, b2 }
    }
}

const MAX_POSITIONS: usize = 512;

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let src_vocab = Vocab::from_tokens(config.src_vocab.clone());
        let tgt_vocab = Vocab::from_tokens(config.tgt_vocab.clone());
        let (d, dk, ffn) = (config.d_model, config.head_dim(), config.ffn_dim);
        let mut b = ParamBuilder::new(config.seed);

        let src_embed = b.mat("src_embed", src_vocab.len(), d);
        let tgt_embed = b.mat("tgt_embed", tgt_vocab.len(), d);

        let mut encoder = Vec::new();
        for l in 0..config.num_encoder_layers {
            let heads = (0..config.heads)
                .map(|h| AttnHead {
                    w_q: b.mat(&format!("enc{l}.h{h}.wq"), d, dk),
                    w_k: b.mat(&format!("enc{l}.h{h}.wk"), d, dk),
                    w_v: b.mat(&format!("enc{l}.h{h}.wv"), d, dk),
                })
                .collect();
            encoder.push(EncoderLayer {
                heads,
                w_o: b.mat(&format!("enc{l}.wo"), d, d),
                ffn: b.ffn(&format!("enc{l}.ffn"), d, ffn),
            });
        }

        let mut decoder = Vec::new();
        for l in 0..config.num_decoder_layers {
            let self_heads = (0..config.heads)
                .map(|h| AttnHead {
                    w_q: b.mat(&format!("dec{l}.self.h{h}.wq"), d, dk),
                    w_k: b.mat(&format!("dec{l}.self.h{h}.wk"), d, dk),
                    w_v: b.mat(&format!("dec{l}.self.h{h}.wv"), d, dk),
                })
                .collect();
            let self_w_o = b.mat(&format!("dec{l}.self.wo"), d, d);
            let mono = (0..config.heads)
                .map(|h| {
                    MonotonicHeadParams::new(
                        b.mat(&format!("dec{l}.mono.h{h}.wk"), d, dk),
                        b.mat(&format!("dec{l}.mono.h{h}.wq"), d, dk),
                        // start below zero so an untrained model reads first
                        b.vec(&format!("dec{l}.mono.h{h}.bias"), 1, -1.0),
                    )
                    .expect("head params")
                })
                .collect();
            let soft = (0..config.heads)
                .map(|h| SoftAttentionParams {
                    w_k: b.mat(&format!("dec{l}.soft.h{h}.wk"), d, dk),
                    w_q: b.mat(&format!("dec{l}.soft.h{h}.wq"), d, dk),
                })
                .collect();
            let w_v = (0..config.heads)
                .map(|h| b.mat(&format!("dec{l}.wv.h{h}"), d, dk))
                .collect();
            let cross_w_o = b.mat(&format!("dec{l}.cross.wo"), d, d);
            let ffn_params = b.ffn(&format!("dec{l}.ffn"), d, ffn);
            // Zero key projection: the fused model starts bit-identical to
            // the baseline and learns to use the future energy only when it
            // lowers the loss.
            let future = FutureEnergyParams {
                w_k: b.future_mat(&format!("dec{l}.future.wk"), d, d, true),
                w_q: b.future_mat(&format!("dec{l}.future.wq"), d, d, false),
            };
            let future_ffn = b.future_ffn(&format!("dec{l}.future_ffn"), d, ffn);
            decoder.push(DecoderLayer {
                self_heads,
                self_w_o,
                mono,
                soft,
                w_v,
                cross_w_o,
                ffn: ffn_params,
                future,
                future_ffn,
            });
        }

        let w_out = b.mat("w_out", d, tgt_vocab.len());
        let b_out = b.vec("b_out", tgt_vocab.len(), 0.0);
        let null_embed = b.uniform_vec("null_embed", d, 0.1);

        Ok(Model {
            pos_table: position_table(MAX_POSITIONS, d),
            noise_rng: std::cell::RefCell::new(ChaCha8Rng::seed_from_u64(
                config.seed ^ 0x6e6f_6973,
            )),
            config,
            src_vocab,
            tgt_vocab,
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            w_out,
            b_out,
            null_embed,
            params: b.params,
        })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn clear_grads(&self) {
        for (_, p) in &self.params {
            p.clear_grad();
        }
    }

    /// Set every future-energy and future-FFN parameter to zero.
    pub fn zero_future_params(&self) {
        for (name, p) in &self.params {
            if name.contains(".future") {
                p.set_values(vec![0.0; p.len()]).expect("same length");
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| NamedParam {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.values(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Model> {
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                cp.version
            )));
        }
        let model = Model::new(cp.config.clone())?;
        if cp.params.len() != model.params.len() {
            return Err(Error::Version(format!(
                "checkpoint has {} parameters, model expects {}",
                cp.params.len(),
                model.params.len()
            )));
        }
        for (stored, (name, tensor)) in cp.params.iter().zip(model.params.iter()) {
            if stored.name != *name || stored.shape != tensor.shape() {
                return Err(Error::Version(format!(
                    "checkpoint parameter `{}` {:?} does not match model `{}` {:?}",
                    stored.name,
                    stored.shape,
                    name,
                    tensor.shape()
                )));
            }
            tensor.set_values(stored.values.clone())?;
        }
        Ok(model)
    }

    /// Fresh model sharing nothing with `self` but carrying the same values.
    pub fn clone_frozen(&self) -> Result<Model> {
        Model::from_checkpoint(&self.to_checkpoint())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Versioned dump of a model: config plus named parameter tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedParam>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn position_table(max_len: usize, d: usize) -> Tensor {
    let mut vals = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let angle = pos as f64 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            vals[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::constant(vals, &[max_len, d]).expect("position table")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        let vocab: Vec<Token> = {
            let mut v = vec![BOS.to_string(), EOS.to_string(), UNK.to_string()];
            v.extend((0..5).map(|i| format!("w{i:02}")));
            v
        };
        let mut c = ModelConfig::desk_default(vocab.clone(), vocab);
        c.d_model = 8;
        c.ffn_dim = 16;
        c.seed = 5;
        c
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.heads = 3; // 8 % 3 != 0
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.lambda_latency = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn identical_seeds_build_identical_models() {
        let a = Model::new(tiny_config()).unwrap();
        let b = Model::new(tiny_config()).unwrap();
        for ((na, ta), (nb, tb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.values(), tb.values());
        }
    }

    #[test]
    fn shared_params_are_seed_stable_across_future_flag() {
        let plain = Model::new(tiny_config()).unwrap();
        let mut fc = tiny_config();
        fc.future_info_enabled = true;
        let fused = Model::new(fc).unwrap();
        for (name, t) in plain.params() {
            let other = fused.param(name).expect("same parameter set");
            assert_eq!(t.values(), other.values(), "{name} diverged");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(tiny_config()).unwrap();
        let path = dir.path().join("m.ckpt.json");
        model.to_checkpoint().save(&path).unwrap();
        let loaded = Model::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        for ((na, ta), (nb, tb)) in model.params().iter().zip(loaded.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.values(), tb.values());
        }
        // wrong version refused
        let mut cp = model.to_checkpoint();
        cp.version = 9;
        assert!(matches!(Model::from_checkpoint(&cp), Err(Error::Version(_))));
    }

    #[test]
    fn energy_bias_starts_negative() {
        let model = Model::new(tiny_config()).unwrap();
        let bias = model.param("dec0.mono.h0.bias").unwrap();
        assert_eq!(bias.values(), vec![-1.0]);
        let wk = model.param("dec0.future.wk").unwrap();
        assert!(wk.values().iter().all(|v| *v == 0.0));
    }
}
