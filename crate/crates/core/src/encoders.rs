//! Trainable feature transforms: the pathology adapter, the genomics
//! pathway encoder, the hash tokenizer with frozen token embeddings, and the
//! bidirectional post-norm transformer shared by both training stages.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::cohort::Modality;
use crate::error::{Error, Result};
use crate::params::{gaussian, ParamStore};

/// Standard deviation of frozen token embeddings and learned prompt tokens.
pub const TOKEN_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub max_seq_len: usize,
    pub layernorm_eps: f64,
    pub vocab_size: usize,
    pub trainable_encoder: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            model_dim: 32,
            n_layers: 2,
            n_heads: 2,
            mlp_ratio: 4,
            max_seq_len: 512,
            layernorm_eps: 1e-5,
            vocab_size: 4096,
            trainable_encoder: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.mlp_ratio == 0
            || self.max_seq_len == 0
            || self.vocab_size == 0
        {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(Error::Config("layernorm_eps must be positive".into()));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }
}

/// Lowercases, splits on whitespace and punctuation, and hashes each word
/// with 64-bit FNV-1a modulo `vocab_size`.
pub fn tokenize_text(text: &str, vocab_size: usize) -> Vec<u32> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|w| !w.is_empty())
        .map(|w| (fnv1a64(w.as_bytes()) % vocab_size as u64) as u32)
        .collect()
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Frozen embeddings of token ids. Each id's row is drawn from its own
/// seeded stream, so no vocabulary table is materialized.
pub fn embed_tokens(ids: &[u32], dim: usize, seed: u64) -> Array2<f64> {
    let mut out = Array2::zeros((ids.len(), dim));
    for (i, &id) in ids.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(id)).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        out.row_mut(i).assign(&gaussian(&mut rng, 1, dim, TOKEN_STD).row(0));
    }
    out
}

/// Input rows for the encoder plus a key mask (`false` = padding).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Array2<f64>,
    attention_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(mut tokens: Array2<f64>, attention_mask: Vec<bool>) -> Result<Self> {
        if attention_mask.len() != tokens.nrows() {
            return Err(Error::shape("attention mask", tokens.nrows(), attention_mask.len()));
        }
        for (mut row, keep) in tokens.outer_iter_mut().zip(&attention_mask) {
            if !keep {
                row.fill(0.0);
            }
        }
        Ok(Self {
            tokens,
            attention_mask,
        })
    }

    pub fn unmasked(tokens: Array2<f64>) -> Self {
        let n = tokens.nrows();
        Self {
            tokens,
            attention_mask: vec![true; n],
        }
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    pub fn attention_mask(&self) -> &[bool] {
        &self.attention_mask
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

fn layer_name(l: usize, part: &str) -> String {
    format!("encoder.layer{l}.{part}")
}

/// Names of every encoder parameter.
pub fn encoder_param_names(cfg: &EncoderConfig) -> Vec<String> {
    let mut names = vec!["encoder.cls".to_string(), "encoder.pos".to_string()];
    for l in 0..cfg.n_layers {
        for part in [
            "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
            "ln1.gamma", "ln1.beta", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2", "ln2.gamma",
            "ln2.beta",
        ] {
            names.push(layer_name(l, part));
        }
    }
    names
}

/// Seeded encoder weights: projections `N(0, 1/fan_in)`, zero biases, unit
/// layer-norm gains, and `N(0, 0.02²)` position and CLS embeddings.
pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let hidden = d * cfg.mlp_ratio;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.insert("encoder.cls", gaussian(&mut rng, 1, d, TOKEN_STD));
    store.insert("encoder.pos", gaussian(&mut rng, cfg.max_seq_len, d, TOKEN_STD));
    let proj = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
        gaussian(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    };
    for l in 0..cfg.n_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(layer_name(l, &format!("attn.{w}")), proj(&mut rng, d, d));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            store.insert(layer_name(l, &format!("attn.{b}")), Array2::zeros((1, d)));
        }
        store.insert(layer_name(l, "mlp.w1"), proj(&mut rng, d, hidden));
        store.insert(layer_name(l, "mlp.b1"), Array2::zeros((1, hidden)));
        store.insert(layer_name(l, "mlp.w2"), proj(&mut rng, hidden, d));
        store.insert(layer_name(l, "mlp.b2"), Array2::zeros((1, d)));
        for ln in ["ln1", "ln2"] {
            store.insert(layer_name(l, &format!("{ln}.gamma")), Array2::ones((1, d)));
            store.insert(layer_name(l, &format!("{ln}.beta")), Array2::zeros((1, d)));
        }
    }
    Ok(store)
}

/// Graph handles produced by one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub outputs: Var,
    pub cls: Var,
    /// `attention[layer][head]`, each `L × L` with rows summing to one.
    pub attention: Vec<Vec<Var>>,
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: &str, b: &str, trainable: bool) -> Var {
    let w = store.bind(g, w, trainable);
    let b = store.bind(g, b, trainable);
    let xw = g.matmul(x, w);
    g.add_row(xw, b)
}

/// Runs the encoder on `input` (`L × D`). Position embeddings are added,
/// then each layer applies self-attention, residual + layer norm, a GELU
/// MLP, and residual + layer norm again.
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    input: Var,
    key_mask: Option<&[bool]>,
    trainable: bool,
) -> Result<EncoderTrace> {
    let (len, width) = g.shape(input);
    if len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len,
            max: cfg.max_seq_len,
        });
    }
    if width != cfg.model_dim {
        return Err(Error::shape("encoder input width", cfg.model_dim, width));
    }
    let positions: Vec<usize> = (0..len).collect();
    let pos_table = store.bind(g, "encoder.pos", trainable);
    let pos = g.select_rows(pos_table, &positions);
    let mut x = g.add(input, pos);
    let head_dim = cfg.head_dim();
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    let mut attention = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let n = |part: &str| layer_name(l, part);
        let q = linear(g, store, x, &n("attn.wq"), &n("attn.bq"), trainable);
        let k = linear(g, store, x, &n("attn.wk"), &n("attn.bk"), trainable);
        let v = linear(g, store, x, &n("attn.wv"), &n("attn.bv"), trainable);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut layer_attn = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, inv_sqrt);
            let weights = g.softmax_rows(scores, key_mask);
            layer_attn.push(weights);
            heads.push(g.matmul(weights, vh));
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let attn_out = linear(g, store, merged, &n("attn.wo"), &n("attn.bo"), trainable);
        let res = g.add(x, attn_out);
        let gamma = store.bind(g, &n("ln1.gamma"), trainable);
        let beta = store.bind(g, &n("ln1.beta"), trainable);
        let normed = g.layer_norm(res, gamma, beta, cfg.layernorm_eps);
        let hidden = linear(g, store, normed, &n("mlp.w1"), &n("mlp.b1"), trainable);
        let hidden = g.gelu(hidden);
        let mlp_out = linear(g, store, hidden, &n("mlp.w2"), &n("mlp.b2"), trainable);
        let res = g.add(normed, mlp_out);
        let gamma = store.bind(g, &n("ln2.gamma"), trainable);
        let beta = store.bind(g, &n("ln2.beta"), trainable);
        x = g.layer_norm(res, gamma, beta, cfg.layernorm_eps);
        attention.push(layer_attn);
    }
    let cls = g.row(x, 0);
    Ok(EncoderTrace {
        outputs: x,
        cls,
        attention,
    })
}

/// Evaluated encoder output for a token sequence.
#[derive(Debug, Clone)]
pub struct EncodedSequence {
    pub outputs: Array2<f64>,
    pub cls: Array1<f64>,
    pub attention: Vec<Vec<Array2<f64>>>,
}

pub fn encode_sequence(
    store: &ParamStore,
    cfg: &EncoderConfig,
    seq: &TokenSequence,
) -> Result<EncodedSequence> {
    let mut g = Graph::new();
    let input = g.constant(seq.tokens().clone());
    let trace = encode(&mut g, store, cfg, input, Some(seq.attention_mask()), false)?;
    Ok(EncodedSequence {
        outputs: g.value(trace.outputs).clone(),
        cls: g.value(trace.cls).row(0).to_owned(),
        attention: trace
            .attention
            .iter()
            .map(|layer| layer.iter().map(|h| g.value(*h).clone()).collect())
            .collect(),
    })
}

/// Weight (`D × d`) and bias (`D`) of the pathology adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Names of a modality's feature transform parameters.
pub fn adapter_param_names(modality: Modality) -> Vec<String> {
    match modality {
        Modality::Pathology => vec!["adapter.p.weight".into(), "adapter.p.bias".into()],
        Modality::Genomics => vec![
            "adapter.g.0.weight".into(),
            "adapter.g.0.bias".into(),
            "adapter.g.1.weight".into(),
            "adapter.g.1.bias".into(),
        ],
    }
}

/// Seeded adapter for `modality` mapping raw width `d` to `model_dim`.
pub fn init_adapter(modality: Modality, d: usize, model_dim: usize, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    match modality {
        Modality::Pathology => {
            store.insert("adapter.p.weight", gaussian(&mut rng, model_dim, d, 1.0 / (d as f64).sqrt()));
            store.insert("adapter.p.bias", Array2::zeros((1, model_dim)));
        }
        Modality::Genomics => {
            // LeCun normal, as self-normalizing networks expect
            store.insert("adapter.g.0.weight", gaussian(&mut rng, model_dim, d, 1.0 / (d as f64).sqrt()));
            store.insert("adapter.g.0.bias", Array2::zeros((1, model_dim)));
            store.insert(
                "adapter.g.1.weight",
                gaussian(&mut rng, model_dim, model_dim, 1.0 / (model_dim as f64).sqrt()),
            );
            store.insert("adapter.g.1.bias", Array2::zeros((1, model_dim)));
        }
    }
    store
}

fn affine_t(g: &mut Graph, store: &ParamStore, x: Var, w: &str, b: &str, trainable: bool) -> Var {
    let w = store.bind(g, w, trainable);
    let b = store.bind(g, b, trainable);
    let xw = g.matmul_t(x, w);
    g.add_row(xw, b)
}

/// Maps a bag (`M × d`) into the encoder token space (`M × D`): a linear
/// layer + ReLU for pathology, a two-layer SELU network for genomics.
pub fn adapt(
    g: &mut Graph,
    store: &ParamStore,
    modality: Modality,
    bag: Var,
    trainable: bool,
) -> Result<Var> {
    let first = match modality {
        Modality::Pathology => "adapter.p.weight",
        Modality::Genomics => "adapter.g.0.weight",
    };
    let expected = store.require(first)?.ncols();
    if g.shape(bag).1 != expected {
        return Err(Error::shape("adapter input width", expected, g.shape(bag).1));
    }
    Ok(match modality {
        Modality::Pathology => {
            let z = affine_t(g, store, bag, "adapter.p.weight", "adapter.p.bias", trainable);
            g.relu(z)
        }
        Modality::Genomics => {
            let z = affine_t(g, store, bag, "adapter.g.0.weight", "adapter.g.0.bias", trainable);
            let h = g.selu(z);
            let z = affine_t(g, store, h, "adapter.g.1.weight", "adapter.g.1.bias", trainable);
            g.selu(z)
        }
    })
}

/// `max(0, W·raw + b)` for a single instance.
pub fn adapt_pathology(raw: &[f64], params: &AdapterParams) -> Result<Array1<f64>> {
    if raw.len() != params.weight.ncols() || params.bias.len() != params.weight.nrows() {
        return Err(Error::shape("adapter", params.weight.dim(), raw.len()));
    }
    let mut store = ParamStore::new();
    store.insert("adapter.p.weight", params.weight.clone());
    store.insert("adapter.p.bias", params.bias.clone().insert_axis(ndarray::Axis(0)));
    run_single(&store, Modality::Pathology, raw)
}

/// Two-layer SELU encoding of one pathway, using `adapter.g.*` from `store`.
pub fn encode_pathway(raw: &[f64], store: &ParamStore) -> Result<Array1<f64>> {
    run_single(store, Modality::Genomics, raw)
}

fn run_single(store: &ParamStore, modality: Modality, raw: &[f64]) -> Result<Array1<f64>> {
    let mut g = Graph::new();
    let x = g.constant(Array2::from_shape_vec((1, raw.len()), raw.to_vec()).expect("row"));
    let out = adapt(&mut g, store, modality, x, false)?;
    Ok(g.value(out).row(0).to_owned())
}
