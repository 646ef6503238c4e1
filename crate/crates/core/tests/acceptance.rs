//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::time::{Duration, Instant};

use ndarray::{Array1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{gradient_check, naive_contrastive, naive_fusion, naive_modulation, normal_mat, normal_vec, project, random_labels};
use cool_core::autograd::Graph;
use cool_core::data::{sample_k_shot, Label};
use cool_core::eval::synthetic::{generate, SyntheticConfig};
use cool_core::eval::{compute_metrics, run_experiment, Experiment, ExperimentConfig};
use cool_core::extraction::{
    attn_neg, attn_pos, fuse_knowledge, signed_attention_graph, structured_knowledge, FusionParams, Polarity,
    SignedAttentionParams,
};
use cool_core::model::CoolModel;
use cool_core::par::Exec;
use cool_core::prompt::{class_probabilities, verbalize_scores, Verbalizer};
use cool_core::training::{
    adversarial_perturb, contrastive_source, contrastive_source_graph, contrastive_target_source,
    contrastive_target_source_graph, cross_entropy_graph,
};
use cool_core::variant::AblationVariant;

const SIMPLEX_TOL: f64 = 1e-6;
const EXACT_TOL: f64 = 1e-9;
const ATTENTION_BUDGET: Duration = Duration::from_secs(5);
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const GRADIENT_BUDGET: Duration = Duration::from_secs(30);
const ORACLE_TOL: f64 = 1e-6;
const ADV_NORM_TOL: f64 = 1e-6;
const ADV_SMALL_EPS: f64 = 1e-3;
const ADV_MIN_NON_DECREASE: usize = 95;
const E2E_MIN_TEST_ACC: f64 = 0.90;
const E2E_SEED: u64 = 1;
const E2E_BUDGET: Duration = Duration::from_secs(300);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_params(rng: &mut ChaCha8Rng, d: usize) -> SignedAttentionParams {
    let mut m = || normal_mat(rng, d, d) * 0.3;
    SignedAttentionParams {
        wq_pos: m(),
        wk_pos: m(),
        wv_pos: m(),
        wq_neg: m(),
        wk_neg: m(),
        wv_neg: m(),
    }
}

fn signed_attention() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 8;
    let id = SignedAttentionParams::identity(d);
    let (mut simplex, mut mirror, mut perm) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(1..=5);
        let p = normal_vec(&mut rng, d);
        let e = normal_mat(&mut rng, n, d);
        let params = random_params(&mut rng, d);
        for f in [attn_pos, attn_neg] {
            let (_, w) = f(&p, &e, &params).unwrap();
            let neg_mass: f64 = w.iter().filter(|x| **x < 0.0).map(|x| -x).sum();
            simplex = simplex.max((w.sum() - 1.0).abs()).max(neg_mass);
        }
        let (neg, _) = attn_neg(&p, &e, &id).unwrap();
        let (pos, _) = attn_pos(&-&p, &e, &id).unwrap();
        mirror = mirror.max((&neg + &pos).iter().fold(0.0, |m, x| m.max(x.abs())));
        let order: Vec<usize> = (0..n).rev().collect();
        let e2 = e.select(Axis(0), &order);
        for f in [attn_pos, attn_neg] {
            let (o1, w1) = f(&p, &e, &params).unwrap();
            let (o2, w2) = f(&p, &e2, &params).unwrap();
            perm = perm.max((&o1 - &o2).iter().fold(0.0, |m, x| m.max(x.abs())));
            for (i, &j) in order.iter().enumerate() {
                perm = perm.max((w2[i] - w1[j]).abs());
            }
        }
    }
    let elapsed = t0.elapsed();
    outcome(
        simplex <= SIMPLEX_TOL && mirror <= EXACT_TOL && perm <= EXACT_TOL && elapsed < ATTENTION_BUDGET,
        format!("simplex dev {simplex:.1e}, mirror dev {mirror:.1e}, permutation dev {perm:.1e}, {elapsed:.2?}"),
    )
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut worst = [0.0f64; 4];
    for (slot, polarity) in [Polarity::Positive, Polarity::Negative].into_iter().enumerate() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * slot as u64 + seed);
            let (d, n) = (8, rng.random_range(1..=5));
            let inputs = vec![
                normal_mat(&mut rng, 1, d),
                normal_mat(&mut rng, n, d),
                normal_mat(&mut rng, d, d) * 0.3,
                normal_mat(&mut rng, d, d) * 0.3,
                normal_mat(&mut rng, d, d) * 0.3,
            ];
            let r = normal_mat(&mut rng, 1, d);
            let rw = normal_mat(&mut rng, 1, n);
            let e = gradient_check(&inputs, FD_STEP, |g, v| {
                let (out, w) = signed_attention_graph(g, v[0], v[1], v[2], v[3], v[4], polarity);
                let a = project(g, out, &r);
                let b = project(g, w, &rw);
                g.add(a, b)
            });
            worst[slot] = worst[slot].max(e);
        }
    }
    let (mut ts, mut ss) = (0, 0);
    let mut seed = 0;
    while ts < 20 || ss < 20 {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (rng.random_range(1..=4), rng.random_range(2..=8));
        let tl = random_labels(&mut rng, n);
        let sl = random_labels(&mut rng, m);
        let t = normal_mat(&mut rng, n, 6);
        let s = normal_mat(&mut rng, m, 6);
        let has = |f: &dyn Fn(&mut Graph) -> bool| f(&mut Graph::new());
        if ts < 20
            && has(&|g| {
                let (a, b) = (g.leaf(t.clone()), g.leaf(s.clone()));
                contrastive_target_source_graph(g, a, &tl, b, &sl, 0.1).unwrap().loss.is_some()
            })
        {
            let e = gradient_check(&[t.clone(), s.clone()], FD_STEP, |g, v| {
                contrastive_target_source_graph(g, v[0], &tl, v[1], &sl, 0.1).unwrap().loss.unwrap()
            });
            worst[2] = worst[2].max(e);
            ts += 1;
        }
        if ss < 20
            && has(&|g| {
                let a = g.leaf(s.clone());
                contrastive_source_graph(g, a, &sl, 0.1).unwrap().loss.is_some()
            })
        {
            let e = gradient_check(&[s.clone()], FD_STEP, |g, v| {
                contrastive_source_graph(g, v[0], &sl, 0.1).unwrap().loss.unwrap()
            });
            worst[3] = worst[3].max(e);
            ss += 1;
        }
    }
    let elapsed = t0.elapsed();
    let max = worst.iter().fold(0.0f64, |a, &b| a.max(b));
    outcome(
        max < FD_REL_TOL && elapsed < GRADIENT_BUDGET,
        format!(
            "max rel err: pos {:.1e}, neg {:.1e}, target-source {:.1e}, within-source {:.1e}; {elapsed:.2?}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 4];
    let max_abs = |a: &Array1<f64>, b: &Array1<f64>| (a - b).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    for _ in 0..50 {
        let d = rng.random_range(1..=8);
        let p = normal_vec(&mut rng, d);
        let n = rng.random_range(0..=8);
        let nb = normal_mat(&mut rng, n, d);
        worst[0] = worst[0].max(max_abs(&structured_knowledge(&p, &nb).unwrap(), &naive_modulation(&p, &nb)));

        let parts: Vec<Array1<f64>> = (0..3).map(|_| normal_vec(&mut rng, d)).collect();
        let fusion = FusionParams {
            w: normal_mat(&mut rng, 3 * d, d),
            b: normal_vec(&mut rng, d),
        };
        let got = fuse_knowledge(&parts[0], &parts[1], &parts[2], &fusion).unwrap();
        worst[1] = worst[1].max(max_abs(&got, &naive_fusion(&[&parts[0], &parts[1], &parts[2]], &fusion.w, &fusion.b)));

        let mk = |rng: &mut ChaCha8Rng, n: usize| -> Vec<(Array1<f64>, Label)> {
            let labels = random_labels(rng, n);
            labels.into_iter().map(|l| (normal_vec(rng, 6), l)).collect()
        };
        let (n, m) = (rng.random_range(1..=8), rng.random_range(2..=8));
        let t = mk(&mut rng, n);
        let s = mk(&mut rng, m);
        let tau = rng.random_range(0.05..1.0);
        let got = contrastive_target_source(&t, &s, tau).unwrap();
        worst[2] = worst[2].max((got - naive_contrastive(&t, &s, tau, false)).abs());
        let got = contrastive_source(&s, tau).unwrap();
        worst[3] = worst[3].max((got - naive_contrastive(&s, &s, tau, true)).abs());
    }
    outcome(
        worst.iter().all(|&w| w <= ORACLE_TOL),
        format!(
            "max dev: modulation {:.1e}, fusion {:.1e}, target-source {:.1e}, within-source {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn verbalizer() -> Outcome {
    let enc = common::toy_encoder("alpha beta", 8, 0);
    let tok = enc.tokenizer_arc();
    let (t, f) = Verbalizer::default_words();
    let verb = Verbalizer::new(&t, &f, &tok).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut norm, mut shift) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let scores = normal_vec(&mut rng, tok.len()) * 5.0;
        let p = verbalize_scores(&scores, &verb);
        norm = norm.max((p[0] + p[1] - 1.0).abs());
        let c = rng.random_range(-50.0..50.0);
        let q = verbalize_scores(&scores.mapv(|x| x + c), &verb);
        shift = shift.max((p[0] - q[0]).abs()).max((p[1] - q[1]).abs());
    }
    let mut scores = Array1::zeros(tok.len());
    scores[tok.id("true").unwrap()] = 2.0;
    let worked = verbalize_scores(&scores, &verb)[0];
    let e2 = 2f64.exp();
    let want = e2 / (e2 + 1.0);
    let direct = class_probabilities([2.0, 0.0])[0];
    let worked_dev = (worked - want).abs().max((direct - want).abs());
    outcome(
        norm <= EXACT_TOL && shift <= EXACT_TOL && worked_dev <= EXACT_TOL,
        format!("normalization dev {norm:.1e}, shift dev {shift:.1e}, P(0) = {worked:.12} (dev {worked_dev:.1e})"),
    )
}

fn adversarial() -> Outcome {
    let enc = common::toy_encoder("alpha beta gamma", 32, 5);
    let model = CoolModel::new(enc, Default::default(), AblationVariant::Full, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ce = |o: &Array1<f64>, label: Label| -> (f64, Array1<f64>) {
        let mut g = Graph::new();
        let x = g.leaf(o.clone().insert_axis(Axis(0)));
        let s = model.class_scores(&mut g, x);
        let l = cross_entropy_graph(&mut g, s, &[label]);
        let grad = g.backward(l).get_or_zeros(&g, x).row(0).to_owned();
        (g.scalar(l), grad)
    };
    let (mut norm_dev, mut non_decrease) = (0.0f64, 0usize);
    for _ in 0..100 {
        let o = normal_vec(&mut rng, model.d());
        let label = random_labels(&mut rng, 1)[0];
        let (base, grad) = ce(&o, label);
        for eps in [1.0, ADV_SMALL_EPS] {
            let (adv, _) = adversarial_perturb(&o, &grad, eps).unwrap();
            let step = &adv - &o;
            norm_dev = norm_dev.max((step.dot(&step).sqrt() - eps).abs());
        }
        let (adv, _) = adversarial_perturb(&o, &grad, ADV_SMALL_EPS).unwrap();
        if ce(&adv, label).0 >= base {
            non_decrease += 1;
        }
    }
    outcome(
        norm_dev <= ADV_NORM_TOL && non_decrease >= ADV_MIN_NON_DECREASE,
        format!("norm dev {norm_dev:.1e}, CE non-decrease on {non_decrease}/100"),
    )
}

fn end_to_end() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    generate(&SyntheticConfig::default()).unwrap().write_to(dir.path()).unwrap();
    let mut cfg = ExperimentConfig::load(&dir.path().join("experiment.toml")).unwrap();
    cfg.seeds = vec![E2E_SEED];
    cfg.parallel = false;
    let full = Experiment::new(cfg.clone()).unwrap().run_seed(E2E_SEED, Exec::Sequential).unwrap();
    let ablated = Experiment::new(cfg.with_variant(AblationVariant::WoCk))
        .unwrap()
        .run_seed(E2E_SEED, Exec::Sequential)
        .unwrap();
    let elapsed = t0.elapsed();
    let train = full.result.train_accuracy.unwrap();
    let test = full.result.metrics.as_ref().unwrap().accuracy;
    let wo_ck = ablated.result.metrics.as_ref().unwrap().accuracy;
    outcome(
        train == 1.0 && test >= E2E_MIN_TEST_ACC && wo_ck < test && elapsed < E2E_BUDGET,
        format!(
            "d={}, K={}, {} steps: train acc {train:.3}, target-test acc {test:.3}, wo_CK {wo_ck:.3}; {elapsed:.1?}",
            full.model.d(),
            cfg.k,
            full.log.len()
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let bench = generate(&SyntheticConfig {
        n_source: 40,
        n_target: 30,
        ..Default::default()
    })
    .unwrap();
    bench.write_to(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("experiment.toml"))
        .unwrap()
        .replace("steps = 200", "steps = 10")
        .replace("k = 16", "k = 8");
    let path = dir.path().join("short.toml");
    std::fs::write(&path, text).unwrap();
    let a = run_experiment(&path).unwrap();
    let b = run_experiment(&path).unwrap();
    let same_metrics = a.seeds.iter().zip(&b.seeds).all(|(x, y)| x.metrics == y.metrics && x.metrics.is_some());
    let mut same_splits = true;
    for seed in 0..10 {
        let x = sample_k_shot(&bench.source, &bench.target, 8, seed).unwrap();
        let y = sample_k_shot(&bench.source, &bench.target, 8, seed).unwrap();
        same_splits &= x.target_kshot.records() == y.target_kshot.records();
    }
    outcome(
        same_metrics && same_splits && a.seeds.len() == 3,
        format!("{} seeds identical across reruns: {same_metrics}; K-shot subsets reproducible: {same_splits}", a.seeds.len()),
    )
}

fn metrics() -> Outcome {
    use Label::{Fake as F, True as T};
    let all = compute_metrics(&[T, F, T, F], &[T, F, T, F]).unwrap();
    let mut gold = vec![F; 5];
    gold.extend([T; 5]);
    let sym = compute_metrics(&gold, &[F, F, F, F, T, F, T, T, T, T]).unwrap();
    let one = compute_metrics(&[T, T, F, F], &[T, T, T, T]).unwrap();
    let checks = [
        all.accuracy == 1.0 && all.macro_f1 == 1.0,
        sym.accuracy == 0.8 && sym.macro_f1 == 0.8,
        one.accuracy == 0.5 && one.macro_f1 == 1.0 / 3.0,
    ];
    outcome(
        checks.iter().all(|c| *c),
        format!(
            "perfect ({}, {}), symmetric ({}, {}), one-class ({}, {})",
            all.accuracy, all.macro_f1, sym.accuracy, sym.macro_f1, one.accuracy, one.macro_f1
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("signed attention properties", signed_attention),
        ("gradient checks", gradients),
        ("naive-loop oracles", oracles),
        ("verbalizer", verbalizer),
        ("adversarial perturbation", adversarial),
        ("synthetic end-to-end", end_to_end),
        ("protocol determinism", determinism),
        ("metrics worked examples", metrics),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!("{} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
