//! Comprehensive knowledge extraction.
//!
//! Per news item: the news vector `p` and entity embeddings come from the frozen
//! encoder; each entity's neighbors are filtered by modulation (element-wise
//! product with `p`, then per-coordinate max over neighbors); structured,
//! entity and descriptive vectors are fused by an affine layer; finally a pair
//! of attentions with separate projections pulls out the knowledge most and
//! least aligned with the news, giving the `2 × d` comprehensive knowledge.
//!
//! Plain `ndarray` functions here are the reference forward path. The `*_graph`
//! functions build the same computation on an autodiff tape for training.

use std::collections::HashSet;

use log::warn;
use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Graph, Var};
use crate::encoder::Encoder;
use crate::error::{CoolError, Result};
use crate::knowledge::KnowledgeClient;

/// How the news vector `p` is produced by the frozen encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NewsRepr {
    /// Mean of embedding-layer token vectors; same space as entity embeddings.
    #[default]
    EmbeddingMean,
    /// Mean of the frozen encoder's final hidden states.
    EncoderMean,
}

/// Pooling over modulated neighbor rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KgPooling {
    #[default]
    Modulation,
    Mean,
}

/// Which knowledge sources feed the fusion layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeOptions {
    pub pooling: KgPooling,
    pub use_structured: bool,
    pub use_descriptive: bool,
    pub news_repr: NewsRepr,
}

impl Default for KnowledgeOptions {
    fn default() -> Self {
        Self {
            pooling: KgPooling::Modulation,
            use_structured: true,
            use_descriptive: true,
            news_repr: NewsRepr::EmbeddingMean,
        }
    }
}

fn mean_rows(m: &Array2<f64>) -> Array1<f64> {
    m.mean_axis(Axis(0)).expect("non-empty")
}

/// Average of the frozen embedding rows of the entity name's tokens.
pub fn embed_entity(name: &str, encoder: &impl Encoder) -> Result<Array1<f64>> {
    let ids = encoder.tokenize(name);
    if ids.is_empty() {
        return Err(CoolError::EmptyTokens(name.to_string()));
    }
    Ok(mean_rows(&encoder.embed(&ids)))
}

/// News vector from the frozen encoder over at most `max_len` leading tokens.
pub fn news_representation(text: &str, encoder: &impl Encoder, mode: NewsRepr) -> Result<Array1<f64>> {
    let mut ids = encoder.tokenize(text);
    if ids.is_empty() {
        return Err(CoolError::EmptyTokens(text.to_string()));
    }
    ids.truncate(encoder.max_len());
    let emb = encoder.embed(&ids);
    match mode {
        NewsRepr::EmbeddingMean => Ok(mean_rows(&emb)),
        NewsRepr::EncoderMean => Ok(mean_rows(&encoder.encode_embeddings(&emb)?)),
    }
}

fn check_width(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(CoolError::Shape(format!("{what} has width {got}, expected {want}")));
    }
    Ok(())
}

/// Modulation filter: per-coordinate max over rows of `p ⊙ neighbor`.
/// Zero vector when there are no neighbors.
pub fn structured_knowledge(p: &Array1<f64>, neighbor_embs: &Array2<f64>) -> Result<Array1<f64>> {
    check_width("neighbor matrix", neighbor_embs.ncols(), p.len())?;
    if neighbor_embs.nrows() == 0 {
        return Ok(Array1::zeros(p.len()));
    }
    let modulated = neighbor_embs * p;
    Ok(modulated.fold_axis(Axis(0), f64::NEG_INFINITY, |a, &b| a.max(b)))
}

/// Mean pooling over neighbors; zero vector when there are none.
pub fn structured_knowledge_mean(neighbor_embs: &Array2<f64>, d: usize) -> Result<Array1<f64>> {
    check_width("neighbor matrix", neighbor_embs.ncols(), d)?;
    if neighbor_embs.nrows() == 0 {
        return Ok(Array1::zeros(d));
    }
    Ok(mean_rows(neighbor_embs))
}

/// Affine fusion layer over `[e_KG; e; e_KC]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `3d × d`, applied as `x · w` to the concatenated row.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl FusionParams {
    pub fn random(d: usize, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, 1.0 / (3.0 * d as f64).sqrt()).expect("positive std");
        Self {
            w: Array2::from_shape_fn((3 * d, d), |_| dist.sample(rng)),
            b: Array1::zeros(d),
        }
    }

    pub fn d(&self) -> usize {
        self.b.len()
    }
}

pub fn fuse_knowledge(
    e_kg: &Array1<f64>,
    e: &Array1<f64>,
    e_kc: &Array1<f64>,
    fusion: &FusionParams,
) -> Result<Array1<f64>> {
    let d = fusion.d();
    if fusion.w.dim() != (3 * d, d) {
        return Err(CoolError::Shape(format!(
            "fusion weight {:?}, expected ({}, {d})",
            fusion.w.dim(),
            3 * d
        )));
    }
    for (name, v) in [("e_KG", e_kg), ("e", e), ("e_KC", e_kc)] {
        check_width(name, v.len(), d)?;
    }
    let x = concatenate(Axis(0), &[e_kg.view(), e.view(), e_kc.view()]).expect("same rank");
    Ok(x.dot(&fusion.w) + &fusion.b)
}

/// Projections for the positive and negative attention heads.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedAttentionParams {
    pub wq_pos: Array2<f64>,
    pub wk_pos: Array2<f64>,
    pub wv_pos: Array2<f64>,
    pub wq_neg: Array2<f64>,
    pub wk_neg: Array2<f64>,
    pub wv_neg: Array2<f64>,
}

impl SignedAttentionParams {
    pub fn identity(d: usize) -> Self {
        let i = Array2::eye(d);
        Self {
            wq_pos: i.clone(),
            wk_pos: i.clone(),
            wv_pos: i.clone(),
            wq_neg: i.clone(),
            wk_neg: i.clone(),
            wv_neg: i,
        }
    }

    /// Query/key projections are `d × d_k`; value projections stay `d × d` so
    /// the outputs can be averaged with the `d`-wide soft prompt.
    pub fn random(d: usize, d_k: usize, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
        let mut m = |c: usize| Array2::from_shape_fn((d, c), |_| dist.sample(rng));
        Self {
            wq_pos: m(d_k),
            wk_pos: m(d_k),
            wv_pos: m(d),
            wq_neg: m(d_k),
            wk_neg: m(d_k),
            wv_neg: m(d),
        }
    }

    pub fn d_k(&self) -> usize {
        self.wq_pos.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }
}

fn signed_attention(
    p: &Array1<f64>,
    e_r: &Array2<f64>,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    wv: &Array2<f64>,
    polarity: Polarity,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if e_r.nrows() == 0 {
        return Err(CoolError::Empty(
            "signed attention needs at least one entity row".into(),
        ));
    }
    check_width("news vector", p.len(), wq.nrows())?;
    check_width("entity knowledge", e_r.ncols(), wk.nrows())?;
    check_width("value input", e_r.ncols(), wv.nrows())?;
    check_width("key projection", wk.ncols(), wq.ncols())?;
    let sign = polarity.sign();
    let q = p.dot(wq);
    let k = e_r.dot(wk);
    let v = e_r.dot(wv);
    let scale = sign / (wq.ncols() as f64).sqrt();
    let scores = (k.dot(&q) * scale).insert_axis(Axis(0));
    let weights = softmax_rows(&scores).row(0).to_owned();
    let out = weights.dot(&v) * sign;
    Ok((out, weights))
}

/// Attention that favors entity knowledge aligned with the news.
pub fn attn_pos(p: &Array1<f64>, e_r: &Array2<f64>, params: &SignedAttentionParams) -> Result<(Array1<f64>, Array1<f64>)> {
    signed_attention(p, e_r, &params.wq_pos, &params.wk_pos, &params.wv_pos, Polarity::Positive)
}

/// Attention that favors the least aligned entity knowledge; negated scores
/// inside the softmax, negated output outside. The returned weights are the
/// softmax weights before the outer sign flip.
pub fn attn_neg(p: &Array1<f64>, e_r: &Array2<f64>, params: &SignedAttentionParams) -> Result<(Array1<f64>, Array1<f64>)> {
    signed_attention(p, e_r, &params.wq_neg, &params.wk_neg, &params.wv_neg, Polarity::Negative)
}

/// Knowledge attached to one linked entity, all from the frozen encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityKnowledge {
    pub entity_id: String,
    pub entity_name: String,
    pub e: Array1<f64>,
    pub neighbor_embs: Array2<f64>,
    pub e_kg: Array1<f64>,
    pub e_kc: Array1<f64>,
}

/// Frozen per-news inputs to the trainable extraction layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NewsKnowledgeBundle {
    pub p: Array1<f64>,
    pub entities: Vec<EntityKnowledge>,
}

impl NewsKnowledgeBundle {
    pub fn d(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Initial entity embeddings `E` (`n × d`).
    pub fn entity_matrix(&self) -> Array2<f64> {
        let d = self.d();
        let mut m = Array2::zeros((self.entities.len(), d));
        for (i, ek) in self.entities.iter().enumerate() {
            m.row_mut(i).assign(&ek.e);
        }
        m
    }

    /// Fusion input rows `[e_KG; e; e_KC]` (`n × 3d`) with disabled sources zeroed.
    pub fn fusion_input(&self, opts: &KnowledgeOptions) -> Array2<f64> {
        let d = self.d();
        let mut m = Array2::zeros((self.entities.len(), 3 * d));
        for (i, ek) in self.entities.iter().enumerate() {
            if opts.use_structured {
                m.slice_mut(s![i, 0..d]).assign(&ek.e_kg);
            }
            m.slice_mut(s![i, d..2 * d]).assign(&ek.e);
            if opts.use_descriptive {
                m.slice_mut(s![i, 2 * d..3 * d]).assign(&ek.e_kc);
            }
        }
        m
    }

    /// Fused knowledge rows `E_r`.
    pub fn fused(&self, fusion: &FusionParams, opts: &KnowledgeOptions) -> Array2<f64> {
        self.fusion_input(opts).dot(&fusion.w) + &fusion.b
    }
}

/// Retrieves and embeds all knowledge for one news text.
///
/// Entities whose names have no tokens are skipped; repeated links to the same
/// entity are kept once. An empty description falls back to the entity's own
/// embedding and an empty neighborhood gives a zero structured vector.
pub fn prepare_bundle(
    text: &str,
    client: &KnowledgeClient,
    frozen: &impl Encoder,
    opts: &KnowledgeOptions,
) -> Result<NewsKnowledgeBundle> {
    let p = news_representation(text, frozen, opts.news_repr)?;
    let d = p.len();
    let mut seen = HashSet::new();
    let mut entities = Vec::new();
    for m in client.link_entities(text)? {
        if !seen.insert(m.entity_id.clone()) {
            continue;
        }
        let e = match embed_entity(&m.entity_name, frozen) {
            Ok(e) => e,
            Err(CoolError::EmptyTokens(_)) => {
                warn!("entity {} has an untokenizable name; skipped", m.entity_id);
                continue;
            }
            Err(err) => return Err(err),
        };
        let nbs = client.fetch_neighbors(&m.entity_id)?;
        let rows: Vec<Array1<f64>> = nbs
            .neighbors
            .iter()
            .filter_map(|n| embed_entity(&n.neighbor_name, frozen).ok())
            .collect();
        let mut neighbor_embs = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            neighbor_embs.row_mut(i).assign(r);
        }
        let e_kg = match opts.pooling {
            KgPooling::Modulation => structured_knowledge(&p, &neighbor_embs)?,
            KgPooling::Mean => structured_knowledge_mean(&neighbor_embs, d)?,
        };
        let desc = client.fetch_description(&m.entity_id)?;
        let e_kc = if desc.missing {
            e.clone()
        } else {
            match news_representation(&desc.description, frozen, opts.news_repr) {
                Ok(v) => v,
                Err(CoolError::EmptyTokens(_)) => e.clone(),
                Err(err) => return Err(err),
            }
        };
        entities.push(EntityKnowledge {
            entity_id: m.entity_id,
            entity_name: m.entity_name,
            e,
            neighbor_embs,
            e_kg,
            e_kc,
        });
    }
    Ok(NewsKnowledgeBundle { p, entities })
}

/// Output of the signed attention pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComprehensiveKnowledge {
    pub e_pos: Vec<f64>,
    pub e_neg: Vec<f64>,
    pub attn_pos_weights: Vec<f64>,
    pub attn_neg_weights: Vec<f64>,
}

impl ComprehensiveKnowledge {
    /// `[e_pos; e_neg]` as a `2 × d` matrix.
    pub fn matrix(&self) -> Array2<f64> {
        let d = self.e_pos.len();
        let mut m = Array2::zeros((2, d));
        m.row_mut(0).assign(&Array1::from(self.e_pos.clone()));
        m.row_mut(1).assign(&Array1::from(self.e_neg.clone()));
        m
    }
}

/// Which attention branches contribute; a disabled branch yields zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Branches {
    pub positive: bool,
    pub negative: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            positive: true,
            negative: true,
        }
    }
}

pub fn extract_comprehensive(
    bundle: &NewsKnowledgeBundle,
    fusion: &FusionParams,
    attention: &SignedAttentionParams,
    opts: &KnowledgeOptions,
    branches: Branches,
) -> Result<ComprehensiveKnowledge> {
    let e_r = bundle.fused(fusion, opts);
    let (mut e_pos, wp) = attn_pos(&bundle.p, &e_r, attention)?;
    let (mut e_neg, wn) = attn_neg(&bundle.p, &e_r, attention)?;
    if !branches.positive {
        e_pos.fill(0.0);
    }
    if !branches.negative {
        e_neg.fill(0.0);
    }
    Ok(ComprehensiveKnowledge {
        e_pos: e_pos.to_vec(),
        e_neg: e_neg.to_vec(),
        attn_pos_weights: wp.to_vec(),
        attn_neg_weights: wn.to_vec(),
    })
}

/// Per-entity attention weights for one news item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub news_id: String,
    pub entities: Vec<EntityWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityWeights {
    pub entity_id: String,
    pub entity_name: String,
    pub pos_weight: f64,
    pub neg_weight: f64,
}

impl AttentionExport {
    pub fn new(news_id: &str, bundle: &NewsKnowledgeBundle, ck: &ComprehensiveKnowledge) -> Self {
        Self {
            news_id: news_id.to_string(),
            entities: bundle
                .entities
                .iter()
                .zip(ck.attn_pos_weights.iter().zip(&ck.attn_neg_weights))
                .map(|(ek, (&pw, &nw))| EntityWeights {
                    entity_id: ek.entity_id.clone(),
                    entity_name: ek.entity_name.clone(),
                    pos_weight: pw,
                    neg_weight: nw,
                })
                .collect(),
        }
    }
}

/// Fusion on the tape: `input (n × 3d) · w + b`.
pub fn fuse_graph(g: &mut Graph, input: Var, w: Var, b: Var) -> Var {
    let xw = g.matmul(input, w);
    g.add_row(xw, b)
}

/// Signed attention on the tape. Returns `(output 1 × d, weights 1 × n)`.
pub fn signed_attention_graph(
    g: &mut Graph,
    p: Var,
    e_r: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    polarity: Polarity,
) -> (Var, Var) {
    let sign = polarity.sign();
    let d_k = g.shape(wq).1;
    let q = g.matmul(p, wq);
    let k = g.matmul(e_r, wk);
    let v = g.matmul(e_r, wv);
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, sign / (d_k as f64).sqrt());
    let weights = g.softmax_rows(scores);
    let out = g.matmul(weights, v);
    let out = if sign < 0.0 { g.scale(out, -1.0) } else { out };
    (out, weights)
}
