//! Hybrid prompt template: two knowledge-carrying soft tokens, a cloze-style
//! hard prompt and the news tokens, read out at the mask position through a
//! verbalizer.

use std::collections::HashSet;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::encoder::{split_words, Encoder, Tokenizer, MASK};
use crate::error::{CoolError, Result};

pub const DEFAULT_TEMPLATE: &str = "The veracity of the following news is [MASK].";

/// The two learnable soft tokens `<s+>`, `<s->`, stored as rows of a `2 × d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPromptState {
    pub rows: Array2<f64>,
}

impl SoftPromptState {
    pub fn random(d: usize, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        Self {
            rows: Array2::from_shape_fn((2, d), |_| dist.sample(rng)),
        }
    }

    pub fn s_pos(&self) -> Array1<f64> {
        self.rows.row(0).to_owned()
    }

    pub fn s_neg(&self) -> Array1<f64> {
        self.rows.row(1).to_owned()
    }
}

/// `S = ½([s+, s-] + E^c)`.
pub fn build_soft_prompt(e_c: &Array2<f64>, soft: &SoftPromptState) -> Result<Array2<f64>> {
    if e_c.dim() != soft.rows.dim() || e_c.nrows() != 2 {
        return Err(CoolError::Shape(format!(
            "soft prompt {:?} and knowledge {:?} must both be 2 × d",
            soft.rows.dim(),
            e_c.dim()
        )));
    }
    Ok((&soft.rows + e_c) * 0.5)
}

/// Tokenized cloze template with exactly one mask.
#[derive(Debug, Clone, PartialEq)]
pub struct HardPrompt {
    pub template_text: String,
    pub token_ids: Vec<usize>,
    pub mask_index: usize,
    /// Embedding rows of the template tokens (`n_h × d`).
    pub h: Array2<f64>,
}

impl HardPrompt {
    pub fn n_h(&self) -> usize {
        self.token_ids.len()
    }
}

pub fn build_hard_prompt(template_text: &str, encoder: &impl Encoder) -> Result<HardPrompt> {
    let masks = split_words(template_text).iter().filter(|w| *w == MASK).count();
    if masks != 1 {
        return Err(CoolError::Template(format!(
            "template must contain exactly one {MASK}, found {masks}: {template_text:?}"
        )));
    }
    let token_ids = encoder.tokenize(template_text);
    let mask_id = encoder.tokenizer().mask_id();
    let mask_index = token_ids
        .iter()
        .position(|&t| t == mask_id)
        .expect("mask counted above");
    Ok(HardPrompt {
        template_text: template_text.to_string(),
        h: encoder.embed(&token_ids),
        token_ids,
        mask_index,
    })
}

/// An input sequence `[S, H, X]` ready for the tunable encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridPromptBatch {
    pub s: Array2<f64>,
    pub h: Array2<f64>,
    pub x: Array2<f64>,
    pub i_prompt: Array2<f64>,
    pub mask_position: usize,
}

impl HybridPromptBatch {
    pub fn n_h(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_x(&self) -> usize {
        self.x.nrows()
    }
}

/// Room for news tokens after the two soft rows and the template.
pub fn news_budget(max_len: usize, n_h: usize) -> Result<usize> {
    if n_h + 2 >= max_len {
        return Err(CoolError::Template(format!(
            "template of {n_h} tokens leaves no room for news within {max_len} positions"
        )));
    }
    Ok(max_len - 2 - n_h)
}

/// News token ids, keeping the leading tokens that fit.
pub fn news_tokens(news_text: &str, encoder: &impl Encoder, n_h: usize) -> Result<Vec<usize>> {
    let mut ids = encoder.tokenize(news_text);
    ids.truncate(news_budget(encoder.max_len(), n_h)?);
    Ok(ids)
}

pub fn assemble(
    s: &Array2<f64>,
    hard: &HardPrompt,
    news_text: &str,
    encoder: &impl Encoder,
) -> Result<HybridPromptBatch> {
    if s.nrows() != 2 || s.ncols() != encoder.dim() {
        return Err(CoolError::Shape(format!("soft prompt {:?}, expected (2, {})", s.dim(), encoder.dim())));
    }
    let ids = news_tokens(news_text, encoder, hard.n_h())?;
    let x = if ids.is_empty() {
        Array2::zeros((0, encoder.dim()))
    } else {
        encoder.embed(&ids)
    };
    let i_prompt = concatenate(Axis(0), &[s.view(), hard.h.view(), x.view()]).expect("equal widths");
    Ok(HybridPromptBatch {
        s: s.clone(),
        h: hard.h.clone(),
        x,
        i_prompt,
        mask_position: 2 + hard.mask_index,
    })
}

/// Hidden state at the mask position.
pub fn encode_mask(batch: &HybridPromptBatch, encoder: &impl Encoder) -> Result<Array1<f64>> {
    if batch.mask_position >= batch.i_prompt.nrows() {
        return Err(CoolError::Shape(format!(
            "mask position {} outside sequence of {}",
            batch.mask_position,
            batch.i_prompt.nrows()
        )));
    }
    let hidden = encoder.encode_embeddings(&batch.i_prompt)?;
    Ok(hidden.row(batch.mask_position).to_owned())
}

/// Label-word sets for the true (0) and fake (1) classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Verbalizer {
    pub words: [Vec<String>; 2],
    pub ids: [Vec<usize>; 2],
}

impl Verbalizer {
    pub fn new<S: AsRef<str>>(true_words: &[S], fake_words: &[S], tokenizer: &Tokenizer) -> Result<Self> {
        let mut words: [Vec<String>; 2] = [Vec::new(), Vec::new()];
        let mut ids: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (class, list) in [true_words, fake_words].into_iter().enumerate() {
            if list.is_empty() {
                return Err(CoolError::Verbalizer(format!("class {class} has no label words")));
            }
            for w in list {
                let w = w.as_ref();
                let pieces = split_words(w);
                if pieces.len() != 1 {
                    return Err(CoolError::Verbalizer(format!(
                        "label word {w:?} is not a single token"
                    )));
                }
                let id = tokenizer
                    .id(&pieces[0])
                    .ok_or_else(|| CoolError::Verbalizer(format!("label word {w:?} not in vocabulary")))?;
                words[class].push(w.to_string());
                ids[class].push(id);
            }
        }
        let zero: HashSet<usize> = ids[0].iter().copied().collect();
        if let Some(&clash) = ids[1].iter().find(|i| zero.contains(i)) {
            return Err(CoolError::Verbalizer(format!(
                "token {:?} appears in both classes",
                tokenizer.token(clash)
            )));
        }
        Ok(Self { words, ids })
    }

    pub fn default_words() -> (Vec<String>, Vec<String>) {
        (vec!["true".into()], vec!["fake".into()])
    }

    /// `|V| × 2` indicator matrix; `scores · M` gives the per-class sums.
    pub fn membership(&self, vocab_size: usize) -> Array2<f64> {
        let mut m = Array2::zeros((vocab_size, 2));
        for (class, ids) in self.ids.iter().enumerate() {
            for &i in ids {
                m[[i, class]] += 1.0;
            }
        }
        m
    }

    /// Summed raw scores per class.
    pub fn class_scores(&self, scores: &Array1<f64>) -> [f64; 2] {
        [
            self.ids[0].iter().map(|&i| scores[i]).sum(),
            self.ids[1].iter().map(|&i| scores[i]).sum(),
        ]
    }
}

/// Two-way softmax over class scores.
pub fn class_probabilities(v: [f64; 2]) -> [f64; 2] {
    let m = v[0].max(v[1]);
    let a = (v[0] - m).exp();
    let b = (v[1] - m).exp();
    [a / (a + b), b / (a + b)]
}

/// `(P(y=0), P(y=1))` from raw vocabulary scores.
pub fn verbalize_scores(scores: &Array1<f64>, verbalizer: &Verbalizer) -> [f64; 2] {
    class_probabilities(verbalizer.class_scores(scores))
}

pub fn verbalize(o_mask: &Array1<f64>, verbalizer: &Verbalizer, encoder: &impl Encoder) -> Result<[f64; 2]> {
    let scores = encoder.head(&o_mask.clone().insert_axis(Axis(0)));
    if let Some(&bad) = verbalizer.ids.iter().flatten().find(|&&i| i >= scores.ncols()) {
        return Err(CoolError::Verbalizer(format!("label token id {bad} outside head vocabulary")));
    }
    Ok(verbalize_scores(&scores.row(0).to_owned(), verbalizer))
}

/// Class scores on the tape: `head_scores (1 × |V|) · membership (|V| × 2)`.
pub fn class_scores_graph(g: &mut Graph, head_scores: Var, membership: Var) -> Var {
    g.matmul(head_scores, membership)
}

/// Rows `[S, H, X]` of an assembled batch, for checking the layout.
pub fn segments(batch: &HybridPromptBatch) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let n_h = batch.n_h();
    let i = &batch.i_prompt;
    (
        i.slice(s![0..2, ..]).to_owned(),
        i.slice(s![2..2 + n_h, ..]).to_owned(),
        i.slice(s![2 + n_h.., ..]).to_owned(),
    )
}
