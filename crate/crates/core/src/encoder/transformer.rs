use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{CoolError, Result};

/// Shape and initialization of a bidirectional transformer encoder with a
/// masked-LM head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    /// Pre-norm blocks (`x + f(LN(x))`) when true, post-norm (`LN(x + f(x))`) otherwise.
    pub pre_norm: bool,
    /// Layer norm applied to token + position embeddings (BERT/RoBERTa style).
    pub embedding_norm: bool,
    pub ln_eps: f64,
    pub embedding_std: f64,
    pub position_std: f64,
}

impl TransformerConfig {
    /// The bundled reference encoder: 2 layers, 4 heads, d = 32.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d: 32,
            layers: 2,
            heads: 4,
            ffn: 64,
            max_len: 64,
            pre_norm: true,
            embedding_norm: false,
            ln_eps: 1e-5,
            embedding_std: 1.0,
            position_std: 0.5,
        }
    }

    /// Base-size post-norm layout (d = 768, 12 layers, 12 heads).
    pub fn base(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d: 768,
            layers: 12,
            heads: 12,
            ffn: 3072,
            max_len: 512,
            pre_norm: false,
            embedding_norm: true,
            ln_eps: 1e-5,
            embedding_std: 0.02,
            position_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(CoolError::Config(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.max_len == 0 || self.vocab_size == 0 || self.ffn == 0 {
            return Err(CoolError::Config("max_len, vocab_size and ffn must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerNormIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNormIds,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNormIds,
    ff1: Linear,
    ff2: Linear,
}

/// Parameter handles for one encoder; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: TransformerConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln: Option<LayerNormIds>,
    blocks: Vec<Block>,
    head_dense: Linear,
    head_ln: LayerNormIds,
    decoder: Linear,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: String,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        let v = Array2::from_shape_fn((rows, cols), |_| dist.sample(rng));
        self.store.add(format!("{}.{name}", self.prefix), v)
    }

    fn constant(&mut self, name: &str, rows: usize, cols: usize, c: f64) -> ParamId {
        self.store
            .add(format!("{}.{name}", self.prefix), Array2::from_elem((rows, cols), c))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.normal(&format!("{name}.w"), fan_in, fan_out, 1.0 / (fan_in as f64).sqrt()),
            b: self.constant(&format!("{name}.b"), 1, fan_out, 0.0),
        }
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> LayerNormIds {
        LayerNormIds {
            gamma: self.constant(&format!("{name}.gamma"), 1, d, 1.0),
            beta: self.constant(&format!("{name}.beta"), 1, d, 0.0),
        }
    }
}

impl Transformer {
    /// Registers freshly initialized parameters under `prefix` in `store`.
    /// Equal `(config, seed)` pairs produce bit-identical values.
    pub fn new(config: TransformerConfig, store: &mut ParamStore, prefix: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut init = Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: prefix.to_string(),
        };
        let tok_emb = init.normal("tok_emb", c.vocab_size, c.d, c.embedding_std);
        let pos_emb = init.normal("pos_emb", c.max_len, c.d, c.position_std);
        let emb_ln = c.embedding_norm.then(|| init.layer_norm("emb_ln", c.d));
        let blocks = (0..c.layers)
            .map(|l| Block {
                ln1: init.layer_norm(&format!("layer{l}.ln1"), c.d),
                q: init.linear(&format!("layer{l}.q"), c.d, c.d),
                k: init.linear(&format!("layer{l}.k"), c.d, c.d),
                v: init.linear(&format!("layer{l}.v"), c.d, c.d),
                o: init.linear(&format!("layer{l}.o"), c.d, c.d),
                ln2: init.layer_norm(&format!("layer{l}.ln2"), c.d),
                ff1: init.linear(&format!("layer{l}.ff1"), c.d, c.ffn),
                ff2: init.linear(&format!("layer{l}.ff2"), c.ffn, c.d),
            })
            .collect();
        let head_dense = init.linear("head.dense", c.d, c.d);
        let head_ln = init.layer_norm("head.ln", c.d);
        let decoder = init.linear("head.decoder", c.d, c.vocab_size);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            emb_ln,
            blocks,
            head_dense,
            head_ln,
            decoder,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.tok_emb
    }

    /// Every parameter handle owned by this encoder.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        let ln = |l: &LayerNormIds| [l.gamma, l.beta];
        let lin = |l: &Linear| [l.w, l.b];
        if let Some(e) = &self.emb_ln {
            ids.extend(ln(e));
        }
        for b in &self.blocks {
            ids.extend(ln(&b.ln1));
            for l in [&b.q, &b.k, &b.v, &b.o] {
                ids.extend(lin(l));
            }
            ids.extend(ln(&b.ln2));
            ids.extend(lin(&b.ff1));
            ids.extend(lin(&b.ff2));
        }
        ids.extend(lin(&self.head_dense));
        ids.extend(ln(&self.head_ln));
        ids.extend(lin(&self.decoder));
        ids
    }

    /// Embedding-layer rows for `ids` (token lookup only, no positions).
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Var {
        let table = g.param(store, self.tok_emb);
        g.gather_rows(table, ids)
    }

    fn linear(&self, g: &mut Graph, store: &ParamStore, l: &Linear, x: Var) -> Var {
        let w = g.param(store, l.w);
        let b = g.param(store, l.b);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }

    fn layer_norm(&self, g: &mut Graph, store: &ParamStore, l: &LayerNormIds, x: Var) -> Var {
        let gamma = g.param(store, l.gamma);
        let beta = g.param(store, l.beta);
        g.layer_norm(x, gamma, beta, self.config.ln_eps)
    }

    fn attention(&self, g: &mut Graph, store: &ParamStore, b: &Block, x: Var) -> Var {
        let q = self.linear(g, store, &b.q, x);
        let k = self.linear(g, store, &b.k, x);
        let v = self.linear(g, store, &b.v, x);
        let dh = self.config.d / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.config.heads)
            .map(|h| {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qh = g.slice_cols(q, lo, hi);
                let kh = g.slice_cols(k, lo, hi);
                let vh = g.slice_cols(v, lo, hi);
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt);
                let scores = g.scale(scores, scale);
                let w = g.softmax_rows(scores);
                g.matmul(w, vh)
            })
            .collect();
        let cat = g.concat_cols(&heads);
        self.linear(g, store, &b.o, cat)
    }

    fn feed_forward(&self, g: &mut Graph, store: &ParamStore, b: &Block, x: Var) -> Var {
        let h = self.linear(g, store, &b.ff1, x);
        let h = g.gelu(h);
        self.linear(g, store, &b.ff2, h)
    }

    /// Runs the transformer stack over embedding-level input (`n × d`),
    /// adding position embeddings, and returns per-position hidden states.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, input: Var) -> Result<Var> {
        let (n, d) = g.shape(input);
        if d != self.config.d {
            return Err(CoolError::Shape(format!("encoder input width {d}, expected {}", self.config.d)));
        }
        if n == 0 || n > self.config.max_len {
            return Err(CoolError::Shape(format!(
                "sequence length {n} outside 1..={}",
                self.config.max_len
            )));
        }
        let pos_table = g.param(store, self.pos_emb);
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather_rows(pos_table, &positions);
        let mut h = g.add(input, pos);
        if let Some(ln) = &self.emb_ln {
            h = self.layer_norm(g, store, ln, h);
        }
        for b in &self.blocks {
            if self.config.pre_norm {
                let a = self.layer_norm(g, store, &b.ln1, h);
                let a = self.attention(g, store, b, a);
                h = g.add(h, a);
                let f = self.layer_norm(g, store, &b.ln2, h);
                let f = self.feed_forward(g, store, b, f);
                h = g.add(h, f);
            } else {
                let a = self.attention(g, store, b, h);
                let s = g.add(h, a);
                h = self.layer_norm(g, store, &b.ln1, s);
                let f = self.feed_forward(g, store, b, h);
                let s = g.add(h, f);
                h = self.layer_norm(g, store, &b.ln2, s);
            }
        }
        Ok(h)
    }

    /// Masked-LM head: dense, GELU, layer norm, then vocabulary projection.
    /// Returns raw scores (`1 × |V|` for a single hidden row).
    pub fn head(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Var {
        let h = self.linear(g, store, &self.head_dense, hidden);
        let h = g.gelu(h);
        let h = self.layer_norm(g, store, &self.head_ln, h);
        self.linear(g, store, &self.decoder, h)
    }
}
