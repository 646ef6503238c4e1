//! The full detector: frozen-encoder knowledge features, trainable fusion and
//! signed attention, the hybrid prompt and the tunable encoder with its
//! masked-LM head.

use std::collections::BTreeSet;
use std::sync::Arc;

use log::debug;
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::data::{Label, NewsRecord};
use crate::encoder::{Encoder, EncoderView, FrozenEncoder, Tokenizer, Transformer, ENCODER_PREFIX};
use crate::error::Result;
use crate::extraction::{
    fuse_graph, prepare_bundle, signed_attention_graph, AttentionExport, ComprehensiveKnowledge,
    FusionParams, KnowledgeOptions, NewsKnowledgeBundle, Polarity, SignedAttentionParams,
};
use crate::knowledge::KnowledgeClient;
use crate::par::{self, Exec};
use crate::prompt::{build_hard_prompt, class_probabilities, news_budget, SoftPromptState, Verbalizer, DEFAULT_TEMPLATE};
use crate::variant::{AblationVariant, Component};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub template: String,
    pub verbalizer_true: Vec<String>,
    pub verbalizer_fake: Vec<String>,
    /// Query/key width of the signed attention; the hidden size when unset.
    pub d_k: Option<usize>,
    pub knowledge: KnowledgeOptions,
    pub soft_prompt_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let (t, f) = Verbalizer::default_words();
        Self {
            template: DEFAULT_TEMPLATE.into(),
            verbalizer_true: t,
            verbalizer_fake: f,
            d_k: None,
            knowledge: KnowledgeOptions::default(),
            soft_prompt_std: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
struct KnowledgeIds {
    soft: ParamId,
    fusion_w: ParamId,
    fusion_b: ParamId,
    wq_pos: ParamId,
    wk_pos: ParamId,
    wv_pos: ParamId,
    wq_neg: ParamId,
    wk_neg: ParamId,
    wv_neg: ParamId,
}

/// Everything about one news item that does not depend on trainable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedItem {
    pub id: String,
    pub label: Label,
    pub news_ids: Vec<usize>,
    pub bundle: NewsKnowledgeBundle,
    pub fusion_input: Array2<f64>,
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub o_mask: Var,
    /// Positive and negative attention weights when knowledge was attended.
    pub attention: Option<(Var, Var)>,
    pub components: BTreeSet<Component>,
}

#[derive(Debug, Clone)]
pub struct CoolModel {
    config: ModelConfig,
    variant: AblationVariant,
    frozen: Arc<FrozenEncoder>,
    plm: Transformer,
    store: ParamStore,
    k: KnowledgeIds,
    hard_ids: Vec<usize>,
    mask_index: usize,
    verbalizer: Verbalizer,
    membership: Array2<f64>,
}

impl CoolModel {
    /// The tunable encoder starts as an exact copy of `frozen`; the soft
    /// prompt, fusion and attention weights are drawn from `seed`.
    pub fn new(frozen: Arc<FrozenEncoder>, config: ModelConfig, variant: AblationVariant, seed: u64) -> Result<Self> {
        let enc_cfg = frozen.transformer().config.clone();
        let d = enc_cfg.d;
        let mut store = ParamStore::new();
        let plm = Transformer::new(enc_cfg, &mut store, ENCODER_PREFIX, 0)?;
        store.load_matching(frozen.store())?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let soft = SoftPromptState::random(d, config.soft_prompt_std, &mut rng);
        let fusion = FusionParams::random(d, &mut rng);
        let attn = SignedAttentionParams::random(d, config.d_k.unwrap_or(d), &mut rng);
        let k = KnowledgeIds {
            soft: store.add("soft.prompt", soft.rows),
            fusion_w: store.add("fusion.w", fusion.w),
            fusion_b: store.add("fusion.b", fusion.b.insert_axis(Axis(0))),
            wq_pos: store.add("attn.pos.q", attn.wq_pos),
            wk_pos: store.add("attn.pos.k", attn.wk_pos),
            wv_pos: store.add("attn.pos.v", attn.wv_pos),
            wq_neg: store.add("attn.neg.q", attn.wq_neg),
            wk_neg: store.add("attn.neg.k", attn.wk_neg),
            wv_neg: store.add("attn.neg.v", attn.wv_neg),
        };

        let tokenizer = frozen.tokenizer_arc();
        let view = EncoderView {
            transformer: &plm,
            store: &store,
            tokenizer: &tokenizer,
        };
        let hard = build_hard_prompt(&config.template, &view)?;
        let (hard_ids, mask_index) = if variant.has(Component::HardPrompt) {
            (hard.token_ids, hard.mask_index)
        } else {
            (vec![tokenizer.mask_id()], 0)
        };
        news_budget(plm.config.max_len, hard_ids.len())?;
        let verbalizer = Verbalizer::new(&config.verbalizer_true, &config.verbalizer_fake, &tokenizer)?;
        let membership = verbalizer.membership(tokenizer.len());
        Ok(Self {
            config,
            variant,
            frozen,
            plm,
            store,
            k,
            hard_ids,
            mask_index,
            verbalizer,
            membership,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> AblationVariant {
        self.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn frozen(&self) -> &FrozenEncoder {
        &self.frozen
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        self.frozen.tokenizer()
    }

    pub fn d(&self) -> usize {
        self.plm.d()
    }

    pub fn verbalizer(&self) -> &Verbalizer {
        &self.verbalizer
    }

    /// Template token ids; a lone mask under `wo_Postfix`.
    pub fn hard_prompt_ids(&self) -> &[usize] {
        &self.hard_ids
    }

    pub fn mask_position(&self) -> usize {
        2 + self.mask_index
    }

    /// The tunable encoder as a plain [`crate::encoder::Encoder`].
    pub fn tunable(&self) -> EncoderView<'_> {
        EncoderView {
            transformer: &self.plm,
            store: &self.store,
            tokenizer: self.frozen.tokenizer(),
        }
    }

    pub fn soft_prompt(&self) -> SoftPromptState {
        SoftPromptState {
            rows: self.store.value(self.k.soft).clone(),
        }
    }

    pub fn fusion_params(&self) -> FusionParams {
        FusionParams {
            w: self.store.value(self.k.fusion_w).clone(),
            b: self.store.value(self.k.fusion_b).row(0).to_owned(),
        }
    }

    pub fn attention_params(&self) -> SignedAttentionParams {
        let v = |id| self.store.value(id).clone();
        SignedAttentionParams {
            wq_pos: v(self.k.wq_pos),
            wk_pos: v(self.k.wk_pos),
            wv_pos: v(self.k.wv_pos),
            wq_neg: v(self.k.wq_neg),
            wk_neg: v(self.k.wk_neg),
            wv_neg: v(self.k.wv_neg),
        }
    }

    pub fn knowledge_options(&self) -> KnowledgeOptions {
        self.variant.knowledge_options(self.config.knowledge)
    }

    /// Retrieves knowledge and tokenizes the news for one record.
    pub fn prepare(&self, record: &NewsRecord, client: &KnowledgeClient) -> Result<PreparedItem> {
        let opts = self.knowledge_options();
        let bundle = prepare_bundle(&record.text, client, self.frozen.as_ref(), &opts)?;
        let mut news_ids = self.tokenizer().tokenize(&record.text);
        news_ids.truncate(news_budget(self.plm.config.max_len, self.hard_ids.len())?);
        let fusion_input = bundle.fusion_input(&opts);
        debug!("{}: {} entities, {} news tokens", record.id, bundle.entities.len(), news_ids.len());
        Ok(PreparedItem {
            id: record.id.clone(),
            label: record.label,
            news_ids,
            bundle,
            fusion_input,
        })
    }

    pub fn prepare_all(&self, records: &[&NewsRecord], client: &KnowledgeClient, exec: Exec) -> Result<Vec<PreparedItem>> {
        par::try_map(exec, records, |r| self.prepare(r, client))
    }

    fn param(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(&self.store, id)
    }

    /// Comprehensive knowledge `E^c` (`2 × d`); `None` when the knowledge
    /// path is off or the news has no entities.
    fn comprehensive_graph(&self, g: &mut Graph, item: &PreparedItem, used: &mut BTreeSet<Component>) -> Option<(Var, Var, Var)> {
        if !self.variant.has(Component::ComprehensiveKnowledge) || item.bundle.is_empty() {
            return None;
        }
        used.insert(Component::ComprehensiveKnowledge);
        let opts = self.knowledge_options();
        if opts.use_structured {
            used.insert(Component::StructuredKnowledge);
            if opts.pooling == crate::extraction::KgPooling::Modulation {
                used.insert(Component::ModulationPooling);
            }
        }
        if opts.use_descriptive {
            used.insert(Component::DescriptiveKnowledge);
        }
        let input = g.leaf(item.fusion_input.clone());
        let w = self.param(g, self.k.fusion_w);
        let b = self.param(g, self.k.fusion_b);
        let e_r = fuse_graph(g, input, w, b);
        let p = g.leaf(item.bundle.p.clone().insert_axis(Axis(0)));
        let branches = self.variant.branches();

        let (q, k, v) = (self.k.wq_pos, self.k.wk_pos, self.k.wv_pos);
        let (q, k, v) = (self.param(g, q), self.param(g, k), self.param(g, v));
        let (mut pos, wp) = signed_attention_graph(g, p, e_r, q, k, v, Polarity::Positive);
        let (q, k, v) = (self.k.wq_neg, self.k.wk_neg, self.k.wv_neg);
        let (q, k, v) = (self.param(g, q), self.param(g, k), self.param(g, v));
        let (mut neg, wn) = signed_attention_graph(g, p, e_r, q, k, v, Polarity::Negative);
        if branches.positive {
            used.insert(Component::PositiveAttention);
        } else {
            pos = g.leaf(Array2::zeros((1, self.d())));
        }
        if branches.negative {
            used.insert(Component::NegativeAttention);
        } else {
            neg = g.leaf(Array2::zeros((1, self.d())));
        }
        Some((g.concat_rows(&[pos, neg]), wp, wn))
    }

    /// Builds `[S, H, X]`, runs the tunable encoder and returns the mask state.
    pub fn forward(&self, g: &mut Graph, item: &PreparedItem) -> Result<Forward> {
        let mut used = BTreeSet::new();
        let soft = self.param(g, self.k.soft);
        let ck = self.comprehensive_graph(g, item, &mut used);
        let attention = ck.map(|(_, wp, wn)| (wp, wn));
        let e_c = ck.map_or(soft, |(e, _, _)| e);
        let s = if self.variant.has(Component::PrefixAveraging) {
            used.insert(Component::PrefixAveraging);
            let sum = g.add(soft, e_c);
            g.scale(sum, 0.5)
        } else {
            e_c
        };
        if self.variant.has(Component::HardPrompt) {
            used.insert(Component::HardPrompt);
        }
        let table = self.param(g, self.plm.token_embedding_id());
        let h = g.gather_rows(table, &self.hard_ids);
        let mut parts = vec![s, h];
        if !item.news_ids.is_empty() {
            parts.push(g.gather_rows(table, &item.news_ids));
        }
        let input = g.concat_rows(&parts);
        let hidden = self.plm.encode(g, &self.store, input)?;
        let mp = self.mask_position();
        let o_mask = g.slice_rows(hidden, mp, mp + 1);
        Ok(Forward {
            o_mask,
            attention,
            components: used,
        })
    }

    /// Verbalizer class scores (`n × 2`) for mask states `o` (`n × d`).
    pub fn class_scores(&self, g: &mut Graph, o: Var) -> Var {
        let scores = self.plm.head(g, &self.store, o);
        let m = g.leaf(self.membership.clone());
        g.matmul(scores, m)
    }

    /// `(P(y=0), P(y=1))` for one item.
    pub fn predict(&self, item: &PreparedItem) -> Result<[f64; 2]> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, item)?;
        let c = self.class_scores(&mut g, f.o_mask);
        let v = g.value(c);
        Ok(class_probabilities([v[[0, 0]], v[[0, 1]]]))
    }

    pub fn predict_all(&self, items: &[PreparedItem], exec: Exec) -> Result<Vec<[f64; 2]>> {
        par::try_map(exec, items, |it| self.predict(it))
    }

    /// Mask state of one item as a plain vector.
    pub fn mask_embedding(&self, item: &PreparedItem) -> Result<Array1<f64>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, item)?;
        Ok(g.value(f.o_mask).row(0).to_owned())
    }

    pub fn comprehensive_knowledge(&self, item: &PreparedItem) -> Result<Option<ComprehensiveKnowledge>> {
        if !self.variant.has(Component::ComprehensiveKnowledge) || item.bundle.is_empty() {
            return Ok(None);
        }
        crate::extraction::extract_comprehensive(
            &item.bundle,
            &self.fusion_params(),
            &self.attention_params(),
            &self.knowledge_options(),
            self.variant.branches(),
        )
        .map(Some)
    }

    pub fn attention_export(&self, item: &PreparedItem) -> Result<Option<AttentionExport>> {
        Ok(self
            .comprehensive_knowledge(item)?
            .map(|ck| AttentionExport::new(&item.id, &item.bundle, &ck)))
    }

    /// Names of parameters that lie outside the tunable encoder.
    pub fn knowledge_param_names(&self) -> Vec<String> {
        self.store
            .ids()
            .map(|id| self.store.name(id).to_string())
            .filter(|n| !n.starts_with(ENCODER_PREFIX))
            .collect()
    }

    pub fn load_params(&mut self, archive: &ParamStore) -> Result<()> {
        self.store.load_matching(archive)
    }
}
