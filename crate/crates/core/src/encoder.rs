//! Frozen post-LN transformer encoder with LoRA on the query and value
//! projections.
//!
//! Per block, with `h` the block input:
//!
//! ```text
//! q = h W_q + b_q + (h D_q) U_q
//! k = h W_k + b_k
//! v = h W_v + b_v + (h D_v) U_v
//! a = concat_heads(softmax(q_h k_hᵀ / √d_h) v_h) W_o + b_o
//! h' = LN(h + a)
//! out = LN(h' + GELU(h' W_1 + b_1) W_2 + b_2)
//! ```
//!
//! The input to the first block is `LN(E[tok] + P[pos])`. Sentences are
//! encoded one at a time, so no padding ever enters attention.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{find, read_tensors, write_tensors, Tensor};
use crate::kernels::{add_row, gelu, layer_norm_rows, matmul, softmax_rows};
use crate::ot::PointCloud;
use crate::transform::TokenSentence;
use crate::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub lora_rank: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 32,
            n_blocks: 2,
            n_heads: 2,
            ff_dim: 64,
            max_len: 24,
            lora_rank: 4,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_model {
            return bad(format!("lora rank {} must lie in [1, d_model = {}]", self.lora_rank, self.d_model));
        }
        if self.vocab_size < 3 || self.n_blocks == 0 || self.ff_dim == 0 || self.max_len == 0 {
            return bad("vocab_size ≥ 3 and nonzero n_blocks, ff_dim, max_len are required".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Word → id map. Ids 0 and 1 are reserved for padding and unknown words;
/// lookups are case-insensitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().skip(2).map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    pub fn from_words<I, S>(words: I, vocab_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list = vec!["<pad>".to_string(), "<unk>".to_string()];
        let mut index = HashMap::new();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !index.contains_key(&w) && w != "<pad>" && w != "<unk>" {
                index.insert(w.clone(), list.len());
                list.push(w);
            }
        }
        if list.len() > vocab_size {
            return Err(Error::Config(format!("{} words do not fit a vocabulary of {vocab_size}", list.len())));
        }
        Ok(Self { words: list, index })
    }

    /// The closed vocabulary of the toy grammar and every rule output.
    pub fn toy(vocab_size: usize) -> Result<Self> {
        Self::from_words(crate::transform::toy::toy_lexicon(), vocab_size)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(UNK_ID)
    }

    pub fn ids(&self, s: &TokenSentence) -> Vec<usize> {
        s.tokens.iter().map(|t| self.id(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub(crate) wq: Array2<f64>,
    pub(crate) bq: Array1<f64>,
    pub(crate) wk: Array2<f64>,
    pub(crate) bk: Array1<f64>,
    pub(crate) wv: Array2<f64>,
    pub(crate) bv: Array1<f64>,
    pub(crate) wo: Array2<f64>,
    pub(crate) bo: Array1<f64>,
    pub(crate) ln1_g: Array1<f64>,
    pub(crate) ln1_b: Array1<f64>,
    pub(crate) w1: Array2<f64>,
    pub(crate) b1: Array1<f64>,
    pub(crate) w2: Array2<f64>,
    pub(crate) b2: Array1<f64>,
    pub(crate) ln2_g: Array1<f64>,
    pub(crate) ln2_b: Array1<f64>,
}

/// Frozen encoder parameters. Nothing in the crate mutates them after
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenWeights {
    pub(crate) tok_emb: Array2<f64>,
    pub(crate) pos_emb: Array2<f64>,
    pub(crate) emb_ln_g: Array1<f64>,
    pub(crate) emb_ln_b: Array1<f64>,
    pub(crate) blocks: Vec<BlockWeights>,
}

impl FrozenWeights {
    /// Token and position embeddings `N(0, 1)`, projections `N(0, 1/fan_in)`,
    /// zero biases, unit layer-norm gains.
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).unwrap();
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
        };
        let tok_emb = normal(cfg.vocab_size, d, 1.0);
        let pos_emb = normal(cfg.max_len, d, 1.0);
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (cfg.ff_dim as f64).sqrt();
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockWeights {
                wq: normal(d, d, sd),
                bq: Array1::zeros(d),
                wk: normal(d, d, sd),
                bk: Array1::zeros(d),
                wv: normal(d, d, sd),
                bv: Array1::zeros(d),
                wo: normal(d, d, sd),
                bo: Array1::zeros(d),
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                w1: normal(d, cfg.ff_dim, sd),
                b1: Array1::zeros(cfg.ff_dim),
                w2: normal(cfg.ff_dim, d, sf),
                b2: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
            })
            .collect();
        Ok(Self {
            tok_emb,
            pos_emb,
            emb_ln_g: Array1::ones(d),
            emb_ln_b: Array1::zeros(d),
            blocks,
        })
    }

    /// All tensors under the `encoder/` prefix.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = vec![
            Tensor::from_matrix("encoder/tok_emb", &self.tok_emb),
            Tensor::from_matrix("encoder/pos_emb", &self.pos_emb),
            Tensor::from_vector("encoder/emb_ln/gamma", &self.emb_ln_g),
            Tensor::from_vector("encoder/emb_ln/beta", &self.emb_ln_b),
        ];
        for (k, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("encoder/block{k}/{n}");
            out.extend([
                Tensor::from_matrix(p("wq"), &b.wq),
                Tensor::from_vector(p("bq"), &b.bq),
                Tensor::from_matrix(p("wk"), &b.wk),
                Tensor::from_vector(p("bk"), &b.bk),
                Tensor::from_matrix(p("wv"), &b.wv),
                Tensor::from_vector(p("bv"), &b.bv),
                Tensor::from_matrix(p("wo"), &b.wo),
                Tensor::from_vector(p("bo"), &b.bo),
                Tensor::from_vector(p("ln1/gamma"), &b.ln1_g),
                Tensor::from_vector(p("ln1/beta"), &b.ln1_b),
                Tensor::from_matrix(p("w1"), &b.w1),
                Tensor::from_vector(p("b1"), &b.b1),
                Tensor::from_matrix(p("w2"), &b.w2),
                Tensor::from_vector(p("b2"), &b.b2),
                Tensor::from_vector(p("ln2/gamma"), &b.ln2_g),
                Tensor::from_vector(p("ln2/beta"), &b.ln2_b),
            ]);
        }
        out
    }

    /// Rebuilds weights from named tensors, checking every shape against
    /// `cfg`.
    pub fn from_tensors(cfg: &EncoderConfig, tensors: &[Tensor]) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mat = |name: String, r: usize, c: usize| -> Result<Array2<f64>> {
            let m = find(tensors, &name)?.to_matrix()?;
            if m.dim() != (r, c) {
                return Err(Error::Config(format!("{name} has shape {:?}, expected ({r}, {c})", m.dim())));
            }
            Ok(m)
        };
        let vec = |name: String, n: usize| -> Result<Array1<f64>> {
            let v = find(tensors, &name)?.to_vector()?;
            if v.len() != n {
                return Err(Error::Config(format!("{name} has length {}, expected {n}", v.len())));
            }
            Ok(v)
        };
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for k in 0..cfg.n_blocks {
            let p = |n: &str| format!("encoder/block{k}/{n}");
            blocks.push(BlockWeights {
                wq: mat(p("wq"), d, d)?,
                bq: vec(p("bq"), d)?,
                wk: mat(p("wk"), d, d)?,
                bk: vec(p("bk"), d)?,
                wv: mat(p("wv"), d, d)?,
                bv: vec(p("bv"), d)?,
                wo: mat(p("wo"), d, d)?,
                bo: vec(p("bo"), d)?,
                ln1_g: vec(p("ln1/gamma"), d)?,
                ln1_b: vec(p("ln1/beta"), d)?,
                w1: mat(p("w1"), d, cfg.ff_dim)?,
                b1: vec(p("b1"), cfg.ff_dim)?,
                w2: mat(p("w2"), cfg.ff_dim, d)?,
                b2: vec(p("b2"), d)?,
                ln2_g: vec(p("ln2/gamma"), d)?,
                ln2_b: vec(p("ln2/beta"), d)?,
            });
        }
        Ok(Self {
            tok_emb: mat("encoder/tok_emb".into(), cfg.vocab_size, d)?,
            pos_emb: mat("encoder/pos_emb".into(), cfg.max_len, d)?,
            emb_ln_g: vec("encoder/emb_ln/gamma".into(), d)?,
            emb_ln_b: vec("encoder/emb_ln/beta".into(), d)?,
            blocks,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensors(path, &self.tensors())
    }

    pub fn load(cfg: &EncoderConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensors(cfg, &read_tensors(path)?)
    }
}

/// LoRA factors of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraBlock {
    /// `d_model × r`
    pub dq: Array2<f64>,
    /// `r × d_model`
    pub uq: Array2<f64>,
    pub dv: Array2<f64>,
    pub uv: Array2<f64>,
}

/// LoRA factors for every block.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraParamSet {
    pub blocks: Vec<LoraBlock>,
}

impl LoraParamSet {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let (d, r) = (cfg.d_model, cfg.lora_rank);
        let blk = LoraBlock {
            dq: Array2::zeros((d, r)),
            uq: Array2::zeros((r, d)),
            dv: Array2::zeros((d, r)),
            uv: Array2::zeros((r, d)),
        };
        Self { blocks: vec![blk; cfg.n_blocks] }
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.blocks.len() != cfg.n_blocks {
            return Err(Error::Config(format!(
                "LoRA set has {} blocks, encoder has {}",
                self.blocks.len(),
                cfg.n_blocks
            )));
        }
        let (d, r) = (cfg.d_model, cfg.lora_rank);
        for (k, b) in self.blocks.iter().enumerate() {
            for (name, m, want) in [
                ("D_q", &b.dq, (d, r)),
                ("U_q", &b.uq, (r, d)),
                ("D_v", &b.dv, (d, r)),
                ("U_v", &b.uv, (r, d)),
            ] {
                if m.dim() != want {
                    return Err(Error::Config(format!(
                        "block {k} {name} has shape {:?}, expected {want:?}",
                        m.dim()
                    )));
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config(format!("block {k} {name} has non-finite entries")));
                }
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| [&b.dq, &b.uq, &b.dv, &b.uv].iter().all(|m| m.iter().all(|&v| v == 0.0)))
    }

    pub fn tensors(&self, prefix: &str) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (k, b) in self.blocks.iter().enumerate() {
            out.push(Tensor::from_matrix(format!("{prefix}block{k}/D_q"), &b.dq));
            out.push(Tensor::from_matrix(format!("{prefix}block{k}/U_q"), &b.uq));
            out.push(Tensor::from_matrix(format!("{prefix}block{k}/D_v"), &b.dv));
            out.push(Tensor::from_matrix(format!("{prefix}block{k}/U_v"), &b.uv));
        }
        out
    }
}

/// Frozen weights, config and vocabulary.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    weights: FrozenWeights,
    vocab: Vocab,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, vocab: Vocab) -> Result<Self> {
        let weights = FrozenWeights::init(&cfg)?;
        Self::with_weights(cfg, weights, vocab)
    }

    /// Seeded encoder over the toy vocabulary.
    pub fn toy(cfg: EncoderConfig) -> Result<Self> {
        let vocab = Vocab::toy(cfg.vocab_size)?;
        Self::new(cfg, vocab)
    }

    pub fn with_weights(cfg: EncoderConfig, weights: FrozenWeights, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        if vocab.len() > cfg.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {} words exceeds vocab_size {}",
                vocab.len(),
                cfg.vocab_size
            )));
        }
        let shaped = FrozenWeights::from_tensors(&cfg, &weights.tensors())?;
        Ok(Self { cfg, weights: shaped, vocab })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &FrozenWeights {
        &self.weights
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub(crate) fn check_input(&self, lora: Option<&LoraParamSet>, s: &TokenSentence) -> Result<Vec<usize>> {
        if let Some(l) = lora {
            l.validate(&self.cfg)?;
        }
        if s.is_empty() {
            return Err(Error::Argument("empty sentence".into()));
        }
        if s.len() > self.cfg.max_len {
            return Err(Error::Argument(format!(
                "sentence of {} tokens exceeds max_len {}",
                s.len(),
                self.cfg.max_len
            )));
        }
        Ok(self.vocab.ids(s))
    }

    /// Last-layer token representations, `len × d_model`.
    pub fn encode(&self, lora: Option<&LoraParamSet>, s: &TokenSentence) -> Result<Array2<f64>> {
        let ids = self.check_input(lora, s)?;
        Ok(self.forward(lora, &ids))
    }

    fn forward(&self, lora: Option<&LoraParamSet>, ids: &[usize]) -> Array2<f64> {
        let w = &self.weights;
        let n = ids.len();
        let x = w.tok_emb.select(Axis(0), ids) + w.pos_emb.slice(s![..n, ..]);
        let (mut h, _, _) = layer_norm_rows(&x.view(), &w.emb_ln_g.view(), &w.emb_ln_b.view());
        for (k, b) in w.blocks.iter().enumerate() {
            let adapter = lora.map(|l| &l.blocks[k]);
            h = self.block(b, adapter, &h.view());
        }
        h
    }

    fn block(&self, b: &BlockWeights, lora: Option<&LoraBlock>, h: &ArrayView2<f64>) -> Array2<f64> {
        let mut q = add_row(&matmul(h, &b.wq.view()).view(), &b.bq.view());
        let kk = add_row(&matmul(h, &b.wk.view()).view(), &b.bk.view());
        let mut v = add_row(&matmul(h, &b.wv.view()).view(), &b.bv.view());
        if let Some(l) = lora {
            q = q + matmul(&matmul(h, &l.dq.view()).view(), &l.uq.view());
            v = v + matmul(&matmul(h, &l.dv.view()).view(), &l.uv.view());
        }
        let ctx = attention(&q.view(), &kk.view(), &v.view(), self.cfg.n_heads);
        let a = add_row(&matmul(&ctx.view(), &b.wo.view()).view(), &b.bo.view());
        let r1 = h + &a;
        let (h1, _, _) = layer_norm_rows(&r1.view(), &b.ln1_g.view(), &b.ln1_b.view());
        let pre = add_row(&matmul(&h1.view(), &b.w1.view()).view(), &b.b1.view());
        let act = pre.mapv(gelu);
        let ff = add_row(&matmul(&act.view(), &b.w2.view()).view(), &b.b2.view());
        let r2 = &h1 + &ff;
        let (out, _, _) = layer_norm_rows(&r2.view(), &b.ln2_g.view(), &b.ln2_b.view());
        out
    }

    /// Activations after every block, for inspecting where an adapter takes
    /// effect. Entry 0 is the embedding layer output.
    pub fn hidden_states(&self, lora: Option<&LoraParamSet>, s: &TokenSentence) -> Result<Vec<Array2<f64>>> {
        let ids = self.check_input(lora, s)?;
        let w = &self.weights;
        let n = ids.len();
        let x = w.tok_emb.select(Axis(0), &ids) + w.pos_emb.slice(s![..n, ..]);
        let (h, _, _) = layer_norm_rows(&x.view(), &w.emb_ln_g.view(), &w.emb_ln_b.view());
        let mut out = vec![h];
        for (k, b) in w.blocks.iter().enumerate() {
            let next = self.block(b, lora.map(|l| &l.blocks[k]), &out[k].view());
            out.push(next);
        }
        Ok(out)
    }

    /// Token vectors of every sentence stacked in order, uniform weights.
    pub fn batch_encode(&self, lora: Option<&LoraParamSet>, batch: &[TokenSentence]) -> Result<PointCloud> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let mats = batch.iter().map(|s| self.encode(lora, s)).collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
        let stacked = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Validation(e.to_string()))?;
        PointCloud::uniform(stacked)
    }
}

/// Multi-head scaled dot-product attention without masking.
pub(crate) fn attention(q: &ArrayView2<f64>, k: &ArrayView2<f64>, v: &ArrayView2<f64>, heads: usize) -> Array2<f64> {
    let (n, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros((n, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let scores = matmul(&q.slice(cols), &k.slice(cols).t()) * scale;
        let p = softmax_rows(&scores.view());
        ctx.slice_mut(cols).assign(&matmul(&p.view(), &v.slice(cols)));
    }
    ctx
}
