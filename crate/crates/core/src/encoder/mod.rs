//! Encoder abstraction shared by the frozen (PLM-F) and tunable (PLM-T) copies.

mod tokenizer;
mod transformer;

use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;

pub use tokenizer::{split_words, Tokenizer, MASK, PAD, UNK};
pub use transformer::{Transformer, TransformerConfig};

use crate::autograd::{Graph, ParamStore};
use crate::error::{CoolError, Result};

/// Plain (non-differentiable) encoder interface.
pub trait Encoder {
    fn tokenizer(&self) -> &Tokenizer;
    fn dim(&self) -> usize;
    fn max_len(&self) -> usize;

    fn tokenize(&self, text: &str) -> Vec<usize> {
        self.tokenizer().tokenize(text)
    }

    /// Embedding-layer rows, one per id.
    fn embed(&self, ids: &[usize]) -> Array2<f64>;

    /// Hidden states for embedding-level input; bypasses token lookup.
    fn encode_embeddings(&self, input: &Array2<f64>) -> Result<Array2<f64>>;

    /// Vocabulary scores for each hidden row.
    fn head(&self, hidden: &Array2<f64>) -> Array2<f64>;
}

/// Borrowed view of a transformer whose parameters live in `store`.
#[derive(Clone, Copy)]
pub struct EncoderView<'a> {
    pub transformer: &'a Transformer,
    pub store: &'a ParamStore,
    pub tokenizer: &'a Tokenizer,
}

impl Encoder for EncoderView<'_> {
    fn tokenizer(&self) -> &Tokenizer {
        self.tokenizer
    }

    fn dim(&self) -> usize {
        self.transformer.d()
    }

    fn max_len(&self) -> usize {
        self.transformer.config.max_len
    }

    fn embed(&self, ids: &[usize]) -> Array2<f64> {
        let mut g = Graph::new();
        let v = self.transformer.embed(&mut g, self.store, ids);
        g.value(v).clone()
    }

    fn encode_embeddings(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let h = self.transformer.encode(&mut g, self.store, x)?;
        Ok(g.value(h).clone())
    }

    fn head(&self, hidden: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let x = g.leaf(hidden.clone());
        let s = self.transformer.head(&mut g, self.store, x);
        g.value(s).clone()
    }
}

/// Name prefix of encoder parameters in every store.
pub const ENCODER_PREFIX: &str = "plm";

/// An encoder that owns its parameters and is never trained.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    tokenizer: Arc<Tokenizer>,
    transformer: Transformer,
    store: ParamStore,
}

impl FrozenEncoder {
    /// Seeded random initialization; used for the reference toy encoder.
    pub fn init(tokenizer: Arc<Tokenizer>, config: TransformerConfig, seed: u64) -> Result<Self> {
        if config.vocab_size != tokenizer.len() {
            return Err(CoolError::Config(format!(
                "encoder vocab size {} differs from tokenizer size {}",
                config.vocab_size,
                tokenizer.len()
            )));
        }
        let mut store = ParamStore::new();
        let transformer = Transformer::new(config, &mut store, ENCODER_PREFIX, seed)?;
        Ok(Self {
            tokenizer,
            transformer,
            store,
        })
    }

    /// Loads pretrained weights from a parameter archive whose names follow
    /// this crate's layout (`plm.tok_emb`, `plm.layer0.q.w`, ...).
    pub fn load(tokenizer: Arc<Tokenizer>, config: TransformerConfig, weights: &Path) -> Result<Self> {
        let mut enc = Self::init(tokenizer, config, 0)?;
        let archive = ParamStore::read_from(&mut BufReader::new(File::open(weights)?))?;
        enc.store.load_matching(&archive)?;
        Ok(enc)
    }

    pub fn view(&self) -> EncoderView<'_> {
        EncoderView {
            transformer: &self.transformer,
            store: &self.store,
            tokenizer: &self.tokenizer,
        }
    }

    pub fn tokenizer_arc(&self) -> Arc<Tokenizer> {
        self.tokenizer.clone()
    }

    pub fn transformer(&self) -> &Transformer {
        &self.transformer
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Hash of every frozen parameter; must not change across training.
    pub fn fingerprint(&self) -> String {
        self.store.fingerprint()
    }
}

impl Encoder for FrozenEncoder {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }
    fn dim(&self) -> usize {
        self.transformer.d()
    }
    fn max_len(&self) -> usize {
        self.transformer.config.max_len
    }
    fn embed(&self, ids: &[usize]) -> Array2<f64> {
        self.view().embed(ids)
    }
    fn encode_embeddings(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        self.view().encode_embeddings(input)
    }
    fn head(&self, hidden: &Array2<f64>) -> Array2<f64> {
        self.view().head(hidden)
    }
}
