//! Cross-entropy, fast-gradient-value perturbation and the two supervised
//! contrastive losses, each as a plain function and as a tape builder.

use log::warn;
use ndarray::{Array1, Array2, Axis};

use crate::autograd::{Graph, Var};
use crate::data::Label;
use crate::error::{CoolError, Result};

pub const PROB_FLOOR: f64 = 1e-12;

/// Mean of `−ln P(y_i)` over samples; probabilities below `1e-12` are clipped.
pub fn cross_entropy(probs: &[[f64; 2]], labels: &[Label]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(CoolError::Shape(format!(
            "{} probability pairs for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(CoolError::Empty("cross-entropy over zero samples".into()));
    }
    let mut total = 0.0;
    for (i, (p, y)) in probs.iter().zip(labels).enumerate() {
        let mut py = p[y.index()];
        if py < PROB_FLOOR {
            warn!("sample {i}: P(true label) = {py:e}, clipped to {PROB_FLOOR:e}");
            py = PROB_FLOOR;
        }
        total -= py.ln();
    }
    Ok(total / probs.len() as f64)
}

/// Mean cross-entropy on the tape from `n × 2` class scores.
pub fn cross_entropy_graph(g: &mut Graph, class_scores: Var, labels: &[Label]) -> Var {
    let n = labels.len();
    assert_eq!(g.shape(class_scores).0, n, "one score row per label");
    let mut onehot = Array2::zeros((n, 2));
    for (i, y) in labels.iter().enumerate() {
        onehot[[i, y.index()]] = 1.0;
    }
    let logp = g.log_softmax_rows(class_scores, None);
    let pick = g.leaf(onehot);
    let picked = g.mul(logp, pick);
    let total = g.sum(picked);
    g.scale(total, -1.0 / n as f64)
}

/// One-step adversarial copy of a mask embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialSample {
    pub base_o: Array1<f64>,
    pub grad: Array1<f64>,
    pub o_adv: Array1<f64>,
    pub label: Label,
    /// Gradient norm below `1e-12`; `o_adv` equals `base_o`.
    pub degenerate: bool,
}

pub const DEGENERATE_GRAD_NORM: f64 = 1e-12;

/// `o + ε · ∇ / ‖∇‖₂`, or `o` unchanged (flagged) when the gradient vanishes.
pub fn adversarial_perturb(o_mask: &Array1<f64>, grad: &Array1<f64>, epsilon: f64) -> Result<(Array1<f64>, bool)> {
    if o_mask.len() != grad.len() {
        return Err(CoolError::Shape(format!(
            "embedding of width {} vs gradient of width {}",
            o_mask.len(),
            grad.len()
        )));
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(CoolError::NonFinite("adversarial gradient".into()));
    }
    let norm = grad.dot(grad).sqrt();
    if norm < DEGENERATE_GRAD_NORM {
        return Ok((o_mask.clone(), true));
    }
    Ok((o_mask + &(grad * (epsilon / norm)), false))
}

impl AdversarialSample {
    pub fn new(base_o: Array1<f64>, grad: Array1<f64>, label: Label, epsilon: f64) -> Result<Self> {
        let (o_adv, degenerate) = adversarial_perturb(&base_o, &grad, epsilon)?;
        Ok(Self {
            base_o,
            grad,
            o_adv,
            label,
            degenerate,
        })
    }
}

fn unit_rows(rows: &[Array1<f64>], what: &str) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut m = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(CoolError::Shape(format!("{what} sample {i} has width {}, expected {d}", r.len())));
        }
        let n = r.dot(r).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(CoolError::ZeroNorm(format!("{what}[{i}]")));
        }
        m.row_mut(i).assign(&(r / n));
    }
    Ok(m)
}

fn check_unit_rows(g: &Graph, v: Var, what: &str) -> Result<()> {
    for (i, r) in g.value(v).rows().into_iter().enumerate() {
        let n = r.dot(&r).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(CoolError::ZeroNorm(format!("{what}[{i}]")));
        }
    }
    Ok(())
}

fn log_softmax_masked(x: &Array2<f64>, keep: &Array2<bool>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for r in 0..x.nrows() {
        let cols: Vec<usize> = (0..x.ncols()).filter(|&c| keep[[r, c]]).collect();
        if cols.is_empty() {
            continue;
        }
        let max = cols.iter().map(|&c| x[[r, c]]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + cols.iter().map(|&c| (x[[r, c]] - max).exp()).sum::<f64>().ln();
        for &c in &cols {
            out[[r, c]] = x[[r, c]] - lse;
        }
    }
    out
}

/// Positive-pair indicator for anchors against candidates, with an optional
/// self-pair exclusion when both sides are the same set.
fn positive_mask(anchor: &[Label], cand: &[Label], exclude_self: bool) -> (Array2<f64>, usize) {
    let mut m = Array2::zeros((anchor.len(), cand.len()));
    let mut count = 0;
    for (i, a) in anchor.iter().enumerate() {
        for (j, c) in cand.iter().enumerate() {
            if a == c && !(exclude_self && i == j) {
                m[[i, j]] = 1.0;
                count += 1;
            }
        }
    }
    (m, count)
}

fn off_diagonal(n: usize) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(i, j)| i != j)
}

fn contrastive(
    anchors: &Array2<f64>,
    anchor_labels: &[Label],
    cands: &Array2<f64>,
    cand_labels: &[Label],
    tau: f64,
    same_set: bool,
) -> f64 {
    let sim = anchors.dot(&cands.t()) / tau;
    let keep = if same_set {
        off_diagonal(sim.nrows())
    } else {
        Array2::from_elem(sim.dim(), true)
    };
    let logp = log_softmax_masked(&sim, &keep);
    let (pos, count) = positive_mask(anchor_labels, cand_labels, same_set);
    if count == 0 {
        warn!("contrastive loss: no positive pairs; contribution is 0");
        return 0.0;
    }
    -(&logp * &pos).sum() / count as f64
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(CoolError::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Target anchors pulled toward same-label source candidates; normalized by
/// the number of (anchor, positive) pairs.
pub fn contrastive_target_source(target: &[(Array1<f64>, Label)], source: &[(Array1<f64>, Label)], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if source.is_empty() {
        return Err(CoolError::Empty("contrastive loss needs source candidates".into()));
    }
    if target.is_empty() {
        warn!("contrastive loss: no target anchors; contribution is 0");
        return Ok(0.0);
    }
    let (to, tl): (Vec<_>, Vec<_>) = target.iter().cloned().unzip();
    let (so, sl): (Vec<_>, Vec<_>) = source.iter().cloned().unzip();
    let t = unit_rows(&to, "target")?;
    let s = unit_rows(&so, "source")?;
    if t.ncols() != s.ncols() {
        return Err(CoolError::Shape("target and source widths differ".into()));
    }
    Ok(contrastive(&t, &tl, &s, &sl, tau, false))
}

/// Within-source variant; self-pairs are excluded from numerator and denominator.
pub fn contrastive_source(source: &[(Array1<f64>, Label)], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if source.len() < 2 {
        return Err(CoolError::Empty("within-source contrastive loss needs at least 2 samples".into()));
    }
    let (so, sl): (Vec<_>, Vec<_>) = source.iter().cloned().unzip();
    let s = unit_rows(&so, "source")?;
    Ok(contrastive(&s, &sl, &s, &sl, tau, true))
}

/// A contrastive term on the tape together with its pair count.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveTerm {
    pub loss: Option<Var>,
    pub pairs: usize,
}

fn contrastive_graph(
    g: &mut Graph,
    anchors: Var,
    anchor_labels: &[Label],
    cands: Var,
    cand_labels: &[Label],
    tau: f64,
    same_set: bool,
) -> ContrastiveTerm {
    let (pos, pairs) = positive_mask(anchor_labels, cand_labels, same_set);
    if pairs == 0 {
        return ContrastiveTerm { loss: None, pairs };
    }
    let a = g.normalize_rows(anchors);
    let c = if same_set { a } else { g.normalize_rows(cands) };
    let ct = g.transpose(c);
    let sim = g.matmul(a, ct);
    let sim = g.scale(sim, 1.0 / tau);
    let mask = same_set.then(|| off_diagonal(anchor_labels.len()));
    let logp = g.log_softmax_rows(sim, mask);
    let pos = g.leaf(pos);
    let picked = g.mul(logp, pos);
    let total = g.sum(picked);
    ContrastiveTerm {
        loss: Some(g.scale(total, -1.0 / pairs as f64)),
        pairs,
    }
}

/// Tape form of [`contrastive_target_source`]; `target` is `n × d`, `source` `m × d`.
pub fn contrastive_target_source_graph(
    g: &mut Graph,
    target: Var,
    target_labels: &[Label],
    source: Var,
    source_labels: &[Label],
    tau: f64,
) -> Result<ContrastiveTerm> {
    check_tau(tau)?;
    check_unit_rows(g, target, "target")?;
    check_unit_rows(g, source, "source")?;
    Ok(contrastive_graph(g, target, target_labels, source, source_labels, tau, false))
}

/// Tape form of [`contrastive_source`].
pub fn contrastive_source_graph(g: &mut Graph, source: Var, labels: &[Label], tau: f64) -> Result<ContrastiveTerm> {
    check_tau(tau)?;
    check_unit_rows(g, source, "source")?;
    Ok(contrastive_graph(g, source, labels, source, labels, tau, true))
}

pub fn total_loss(ce_s: f64, ce_t: f64, cl_s: f64, cl_t: f64, alpha: f64) -> f64 {
    alpha * (ce_s + ce_t) + (1.0 - alpha) * (cl_s + cl_t)
}

/// Stacks vectors as rows.
pub fn stack(rows: &[Array1<f64>]) -> Array2<f64> {
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use Label::{Fake, True};

    fn cos(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
    }

    /// Direct transcription with explicit loops.
    fn naive_ts(t: &[(Array1<f64>, Label)], s: &[(Array1<f64>, Label)], tau: f64) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for (oi, yi) in t {
            let denom: f64 = s.iter().map(|(ok, _)| (cos(oi, ok) / tau).exp()).sum();
            for (oj, yj) in s {
                if yi == yj {
                    total -= ((cos(oi, oj) / tau).exp() / denom).ln();
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    fn naive_ss(s: &[(Array1<f64>, Label)], tau: f64) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for (i, (oi, yi)) in s.iter().enumerate() {
            let mut denom = 0.0;
            for (k, (ok, _)) in s.iter().enumerate() {
                if k != i {
                    denom += (cos(oi, ok) / tau).exp();
                }
            }
            for (j, (oj, yj)) in s.iter().enumerate() {
                if j != i && yi == yj {
                    total -= ((cos(oi, oj) / tau).exp() / denom).ln();
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<(Array1<f64>, Label)> {
        (0..n)
            .map(|_| {
                let o = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
                let y = if rng.random_bool(0.5) { True } else { Fake };
                (o, y)
            })
            .collect()
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[[1.0, 0.0]], &[True]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cross_entropy(&[[0.5, 0.5], [0.5, 0.5]], &[True, Fake]).unwrap(),
            2f64.ln(),
            epsilon = 1e-15
        );
        let got = cross_entropy(&[[0.9, 0.1], [0.2, 0.8]], &[True, Fake]).unwrap();
        assert_abs_diff_eq!(got, (-(0.9f64).ln() - (0.8f64).ln()) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(got, 0.1643, epsilon = 1e-4);
        let clipped = cross_entropy(&[[0.0, 1.0]], &[True]).unwrap();
        assert_abs_diff_eq!(clipped, -(1e-12f64).ln(), epsilon = 1e-9);
        assert!(cross_entropy(&[], &[]).is_err());
    }

    #[test]
    fn cross_entropy_graph_matches_plain() {
        let scores = array![[0.3, -1.2], [2.0, 0.5], [0.0, 0.0]];
        let labels = [True, Fake, Fake];
        let probs: Vec<[f64; 2]> = scores
            .rows()
            .into_iter()
            .map(|r| crate::prompt::class_probabilities([r[0], r[1]]))
            .collect();
        let want = cross_entropy(&probs, &labels).unwrap();
        let mut g = Graph::new();
        let s = g.leaf(scores);
        let l = cross_entropy_graph(&mut g, s, &labels);
        assert_abs_diff_eq!(g.scalar(l), want, epsilon = 1e-14);
    }

    #[test]
    fn perturbation_examples() {
        let o = array![1.0, 1.0];
        let (adv, flag) = adversarial_perturb(&o, &array![3.0, 4.0], 1.0).unwrap();
        assert!(!flag);
        assert_abs_diff_eq!(&adv - &o, array![0.6, 0.8], epsilon = 1e-15);
        let (adv, _) = adversarial_perturb(&o, &array![0.0, 5.0], 1.0).unwrap();
        assert_abs_diff_eq!(&adv - &o, array![0.0, 1.0], epsilon = 1e-15);
        let (adv, flag) = adversarial_perturb(&o, &array![0.0, 0.0], 1.0).unwrap();
        assert!(flag);
        assert_eq!(adv, o);
        assert!(adversarial_perturb(&o, &array![f64::NAN, 0.0], 1.0).is_err());
    }

    #[test]
    fn contrastive_examples() {
        let a = (array![0.3, 0.1], True);
        assert_eq!(contrastive_target_source(&[a.clone()], &[(array![5.0, -2.0], True)], 0.1).unwrap(), 0.0);

        let t = [(array![1.0, 0.0], True)];
        let s = [(array![2.0, 0.0], True), (array![3.0, 0.0], Fake)];
        assert_abs_diff_eq!(contrastive_target_source(&t, &s, 1.0).unwrap(), 2f64.ln(), epsilon = 1e-12);

        let t = [(array![1.0, 0.0], Fake)];
        let s = [(array![2.0, 0.0], True)];
        assert_eq!(contrastive_target_source(&t, &s, 0.1).unwrap(), 0.0);

        let zero = [(array![0.0, 0.0], True)];
        assert!(matches!(
            contrastive_target_source(&zero, &s, 0.1),
            Err(CoolError::ZeroNorm(_))
        ));
    }

    #[test]
    fn within_source_examples() {
        let two = [(array![1.0, 2.0], True), (array![-3.0, 0.5], True)];
        assert_abs_diff_eq!(contrastive_source(&two, 0.1).unwrap(), 0.0, epsilon = 1e-12);

        // Anchor 0 has one positive (1) and one negative (2), all parallel.
        let three = [
            (array![1.0, 0.0], True),
            (array![1.0, 0.0], True),
            (array![1.0, 0.0], Fake),
        ];
        // Pairs (0,1) and (1,0) each give ln 2.
        assert_abs_diff_eq!(contrastive_source(&three, 1.0).unwrap(), 2f64.ln(), epsilon = 1e-12);

        let distinct = [(array![1.0, 0.0], True), (array![0.0, 1.0], Fake)];
        assert_eq!(contrastive_source(&distinct, 0.1).unwrap(), 0.0);
        assert!(contrastive_source(&distinct[..1], 0.1).is_err());
    }

    #[test]
    fn vectorized_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..=8);
            let m = rng.random_range(2..=8);
            let t = random_set(&mut rng, n, 5);
            let s = random_set(&mut rng, m, 5);
            let tau = rng.random_range(0.05..2.0);
            assert_abs_diff_eq!(
                contrastive_target_source(&t, &s, tau).unwrap(),
                naive_ts(&t, &s, tau),
                epsilon = 1e-9
            );
            assert_abs_diff_eq!(contrastive_source(&s, tau).unwrap(), naive_ss(&s, tau), epsilon = 1e-9);

            let mut g = Graph::new();
            let (to, tl): (Vec<_>, Vec<_>) = t.iter().cloned().unzip();
            let (so, sl): (Vec<_>, Vec<_>) = s.iter().cloned().unzip();
            let tv = g.leaf(stack(&to));
            let sv = g.leaf(stack(&so));
            let ts = contrastive_target_source_graph(&mut g, tv, &tl, sv, &sl, tau).unwrap();
            let ss = contrastive_source_graph(&mut g, sv, &sl, tau).unwrap();
            let val = |term: ContrastiveTerm| term.loss.map_or(0.0, |v| g.scalar(v));
            assert_abs_diff_eq!(val(ts), naive_ts(&t, &s, tau), epsilon = 1e-9);
            assert_abs_diff_eq!(val(ss), naive_ss(&s, tau), epsilon = 1e-9);
        }
    }

    #[test]
    fn per_anchor_loss_monotone_in_similarities() {
        let anchor = [(array![1.0, 0.0], True)];
        let loss = |pos_angle: f64, neg_angle: f64| {
            let s = [
                (array![pos_angle.cos(), pos_angle.sin()], True),
                (array![neg_angle.cos(), neg_angle.sin()], Fake),
            ];
            contrastive_target_source(&anchor, &s, 0.5).unwrap()
        };
        // Smaller angle means higher cosine.
        assert!(loss(0.3, 1.0) < loss(0.4, 1.0));
        assert!(loss(0.3, 0.9) > loss(0.3, 1.0));
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(2.0, 2.0, 4.0, 4.0, 0.5), 6.0);
        assert_eq!(total_loss(1.0, 2.0, 4.0, 4.0, 1.0), 3.0);
        assert_eq!(total_loss(1.0, 2.0, 4.0, 5.0, 0.0), 9.0);
    }
}
