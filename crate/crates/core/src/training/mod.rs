//! Objective and optimization loop.
//!
//! Each step runs one tape per sample up to its mask state (in parallel when
//! enabled), then a small loss tape over the stacked mask states that applies
//! the verbalizer head, the adversarial copies and the contrastive terms. The
//! loss tape's gradients with respect to each mask state seed the per-sample
//! backward passes; parameter gradients are summed in sample order, so results
//! do not depend on the execution mode.

mod checkpoint;
mod losses;

use std::io::Write;

use log::{info, warn};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use losses::{
    adversarial_perturb, contrastive_source, contrastive_source_graph, contrastive_target_source,
    contrastive_target_source_graph, cross_entropy, cross_entropy_graph, stack, total_loss, AdversarialSample,
    ContrastiveTerm, DEGENERATE_GRAD_NORM, PROB_FLOOR,
};

use crate::autograd::{Adam, AdamConfig, Graph, Var};
use crate::data::Label;
use crate::error::{CoolError, Result};
use crate::model::{CoolModel, PreparedItem};
use crate::par::{self, Exec};
use crate::variant::Component;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size_source: usize,
    pub batch_size_target: usize,
    pub epochs: usize,
    /// Overrides the epoch-derived step count when set.
    pub steps: Option<usize>,
    pub adv_enabled: bool,
    pub adv_epsilon: f64,
    /// Adversarial copies also act as contrastive anchors.
    pub adv_as_anchor: bool,
    pub cl_enabled: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau: 0.1,
            learning_rate: 2e-5,
            batch_size_source: 16,
            batch_size_target: 16,
            epochs: 10,
            steps: None,
            adv_enabled: true,
            adv_epsilon: 1.0,
            adv_as_anchor: true,
            cl_enabled: true,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoolError::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size_source == 0 || self.batch_size_target == 0 || self.epochs == 0 {
            return bad("batch sizes and epochs must be positive".into());
        }
        if self.adv_enabled && !(self.adv_epsilon > 0.0) {
            return bad(format!("adversarial epsilon must be positive, got {}", self.adv_epsilon));
        }
        Ok(())
    }

    pub fn num_steps(&self, n_source: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * n_source.div_ceil(self.batch_size_source).max(1))
    }
}

/// Loss terms of one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    #[serde(rename = "L_CE_s")]
    pub ce_s: f64,
    #[serde(rename = "L_CE_t")]
    pub ce_t: f64,
    #[serde(rename = "L_CL_s")]
    pub cl_s: f64,
    #[serde(rename = "L_CL_t")]
    pub cl_t: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
    /// Weight actually applied to the cross-entropy terms.
    pub alpha: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub adv_count: usize,
    pub adv_degenerate: usize,
    pub cl_pairs_t: usize,
    pub cl_pairs_s: usize,
}

impl LossReport {
    pub fn composition_error(&self) -> f64 {
        (total_loss(self.ce_s, self.ce_t, self.cl_s, self.cl_t, self.alpha) - self.total).abs()
    }

    fn is_finite(&self) -> bool {
        [self.ce_s, self.ce_t, self.cl_s, self.cl_t, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn write_loss_log(log: &[LossReport], w: &mut impl Write) -> Result<()> {
    for r in log {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Hands out source batches over shuffled epochs and cycles the target set.
struct Batcher {
    rng: ChaCha8Rng,
    source_order: Vec<usize>,
    source_pos: usize,
    target_order: Vec<usize>,
    target_pos: usize,
}

impl Batcher {
    fn new(n_source: usize, n_target: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut source_order: Vec<usize> = (0..n_source).collect();
        source_order.shuffle(&mut rng);
        let mut target_order: Vec<usize> = (0..n_target).collect();
        target_order.shuffle(&mut rng);
        Self {
            rng,
            source_order,
            source_pos: 0,
            target_order,
            target_pos: 0,
        }
    }

    fn source(&mut self, size: usize) -> Vec<usize> {
        let n = self.source_order.len();
        let mut out = Vec::with_capacity(size.min(n));
        while out.len() < size.min(n) {
            if self.source_pos == n {
                self.source_order.shuffle(&mut self.rng);
                self.source_pos = 0;
            }
            out.push(self.source_order[self.source_pos]);
            self.source_pos += 1;
        }
        out
    }

    fn target(&mut self, size: usize) -> Vec<usize> {
        let n = self.target_order.len();
        (0..size.min(n))
            .map(|_| {
                let i = self.target_order[self.target_pos % n];
                self.target_pos = (self.target_pos + 1) % n;
                i
            })
            .collect()
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LossReport>,
    pub frozen_fingerprint: String,
}

struct SampleTape {
    graph: Graph,
    o_mask: Var,
    components: std::collections::BTreeSet<Component>,
}

/// Everything a single optimization step produced.
pub struct StepOutput {
    pub report: LossReport,
    pub grads: Vec<Option<Array2<f64>>>,
    pub components: std::collections::BTreeSet<Component>,
}

fn labels_of(items: &[&PreparedItem]) -> Vec<Label> {
    items.iter().map(|it| it.label).collect()
}

/// Loss and parameter gradients for one batch, without updating the model.
pub fn compute_step(
    model: &CoolModel,
    source: &[&PreparedItem],
    target: &[&PreparedItem],
    cfg: &TrainingConfig,
    step: usize,
    exec: Exec,
) -> Result<StepOutput> {
    if source.is_empty() {
        return Err(CoolError::Empty("training step without source samples".into()));
    }
    let variant = model.variant();
    let adv_enabled = cfg.adv_enabled && variant.has(Component::Adversarial) && !target.is_empty();
    let cl_enabled = cfg.cl_enabled && variant.has(Component::Contrastive);
    let alpha = if cl_enabled { cfg.alpha } else { 1.0 };

    let items: Vec<&PreparedItem> = source.iter().chain(target).copied().collect();
    let tapes = par::try_map(exec, &items, |it| {
        let mut graph = Graph::new();
        let f = model.forward(&mut graph, it)?;
        Ok::<_, CoolError>(SampleTape {
            graph,
            o_mask: f.o_mask,
            components: f.components,
        })
    })?;
    let mut components: std::collections::BTreeSet<Component> =
        tapes.iter().flat_map(|t| t.components.iter().copied()).collect();

    let ns = source.len();
    let nt = target.len();
    let o_values: Vec<Array1<f64>> = tapes
        .iter()
        .map(|t| t.graph.value(t.o_mask).row(0).to_owned())
        .collect();
    for (i, o) in o_values.iter().enumerate() {
        if o.iter().any(|v| !v.is_finite()) {
            return Err(CoolError::NonFinite(format!("mask state of {}", items[i].id)));
        }
    }

    let mut g = Graph::new();
    let o_leaves: Vec<Var> = o_values
        .iter()
        .map(|o| g.leaf(o.clone().insert_axis(Axis(0))))
        .collect();
    let o_src = g.concat_rows(&o_leaves[..ns]);
    let src_labels = labels_of(source);
    let tgt_labels = labels_of(target);

    let src_scores = model.class_scores(&mut g, o_src);
    let ce_s = cross_entropy_graph(&mut g, src_scores, &src_labels);

    let mut adv_rows = Vec::new();
    let mut adv_degenerate = 0;
    if adv_enabled {
        components.insert(Component::Adversarial);
        // Direction of steepest CE increase at each target mask state, with
        // the head held at its current weights.
        let mut probe = Graph::new();
        let o_tgt = probe.leaf(crate::training::stack(&o_values[ns..]));
        let scores = model.class_scores(&mut probe, o_tgt);
        let ce = cross_entropy_graph(&mut probe, scores, &tgt_labels);
        let grad = probe.backward(ce).get_or_zeros(&probe, o_tgt);
        for (i, o) in o_values[ns..].iter().enumerate() {
            let sample = AdversarialSample::new(o.clone(), grad.row(i).to_owned(), tgt_labels[i], cfg.adv_epsilon)?;
            if sample.degenerate {
                adv_degenerate += 1;
            }
            let delta = g.leaf((&sample.o_adv - o).insert_axis(Axis(0)));
            adv_rows.push(g.add(o_leaves[ns + i], delta));
        }
    }

    let mut anchor_rows: Vec<Var> = o_leaves[ns..].to_vec();
    let mut anchor_labels = tgt_labels.clone();
    let ce_t = if nt > 0 {
        let mut rows = anchor_rows.clone();
        let mut labels = tgt_labels.clone();
        rows.extend(&adv_rows);
        labels.extend(&tgt_labels[..adv_rows.len()]);
        let o_t = g.concat_rows(&rows);
        let scores = model.class_scores(&mut g, o_t);
        Some(cross_entropy_graph(&mut g, scores, &labels))
    } else {
        None
    };
    if cfg.adv_as_anchor {
        anchor_rows.extend(&adv_rows);
        anchor_labels.extend(&tgt_labels[..adv_rows.len()]);
    }

    let mut cl_t = None;
    let mut cl_s = None;
    let mut cl_pairs_t = 0;
    let mut cl_pairs_s = 0;
    if cl_enabled {
        components.insert(Component::Contrastive);
        if !anchor_rows.is_empty() {
            let a = g.concat_rows(&anchor_rows);
            let term = contrastive_target_source_graph(&mut g, a, &anchor_labels, o_src, &src_labels, cfg.tau)?;
            cl_t = term.loss;
            cl_pairs_t = term.pairs;
        }
        if ns >= 2 {
            let term = contrastive_source_graph(&mut g, o_src, &src_labels, cfg.tau)?;
            cl_s = term.loss;
            cl_pairs_s = term.pairs;
        }
    }

    let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
    let mut ce_sum = ce_s;
    if let Some(t) = ce_t {
        ce_sum = g.add(ce_sum, t);
    }
    let mut total = g.scale(ce_sum, alpha);
    let cl_terms: Vec<Var> = [cl_s, cl_t].into_iter().flatten().collect();
    if !cl_terms.is_empty() && alpha < 1.0 {
        let mut cl_sum = cl_terms[0];
        for &t in &cl_terms[1..] {
            cl_sum = g.add(cl_sum, t);
        }
        let weighted = g.scale(cl_sum, 1.0 - alpha);
        total = g.add(total, weighted);
    }
    let report = LossReport {
        step,
        ce_s: g.scalar(ce_s),
        ce_t: value(&g, ce_t),
        cl_s: value(&g, cl_s),
        cl_t: value(&g, cl_t),
        total: g.scalar(total),
        alpha,
        n_source: ns,
        n_target: nt,
        adv_count: adv_rows.len(),
        adv_degenerate,
        cl_pairs_t,
        cl_pairs_s,
    };
    if !report.is_finite() {
        return Err(CoolError::NonFiniteLoss(Box::new(report)));
    }

    let top = g.backward(total);
    let mut grads = top.for_store(&g, model.store());
    let seeds: Vec<Array2<f64>> = o_leaves
        .iter()
        .map(|&v| top.get_or_zeros(&g, v))
        .collect();
    let jobs: Vec<(&SampleTape, &Array2<f64>)> = tapes.iter().zip(&seeds).collect();
    let per_sample = par::map(exec, &jobs, |(tape, seed)| {
        tape.graph
            .backward_seeded(tape.o_mask, (*seed).clone())
            .for_store(&tape.graph, model.store())
    });
    for sample in per_sample {
        for (acc, gs) in grads.iter_mut().zip(sample) {
            match (acc.as_mut(), gs) {
                (Some(a), Some(s)) => *a += &s,
                (None, Some(s)) => *acc = Some(s),
                _ => {}
            }
        }
    }
    Ok(StepOutput {
        report,
        grads,
        components,
    })
}

/// Optimizes `model` on prepared source and K-shot target items.
pub fn train(
    model: &mut CoolModel,
    source: &[PreparedItem],
    target: &[PreparedItem],
    cfg: &TrainingConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(CoolError::Empty("no source training items".into()));
    }
    if target.is_empty() {
        warn!("no target-domain training items; target terms are 0");
    }
    let frozen_before = model.frozen().fingerprint();
    let mut adam = Adam::new(model.store(), AdamConfig::with_lr(cfg.learning_rate));
    let mut batcher = Batcher::new(source.len(), target.len(), cfg.seed);
    let steps = cfg.num_steps(source.len());
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let src: Vec<&PreparedItem> = batcher.source(cfg.batch_size_source).into_iter().map(|i| &source[i]).collect();
        let tgt: Vec<&PreparedItem> = batcher.target(cfg.batch_size_target).into_iter().map(|i| &target[i]).collect();
        let out = compute_step(model, &src, &tgt, cfg, step, exec)?;
        if step % 20 == 0 || step + 1 == steps {
            info!(
                "step {step}: total {:.4} ce_s {:.4} ce_t {:.4} cl_s {:.4} cl_t {:.4}",
                out.report.total, out.report.ce_s, out.report.ce_t, out.report.cl_s, out.report.cl_t
            );
        }
        adam.step(model.store_mut(), &out.grads);
        log.push(out.report);
    }
    let frozen_after = model.frozen().fingerprint();
    if frozen_after != frozen_before {
        return Err(CoolError::Config("frozen encoder parameters changed during training".into()));
    }
    Ok(TrainOutcome {
        log,
        frozen_fingerprint: frozen_after,
    })
}
