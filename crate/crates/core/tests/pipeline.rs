use std::path::{Path, PathBuf};

use cool_core::eval::synthetic::{generate, SyntheticConfig};
use cool_core::eval::{run_ablation, run_experiment, sweep_k, Experiment, ExperimentConfig, ExperimentReport};
use cool_core::model::{CoolModel, PreparedItem};
use cool_core::par::Exec;
use cool_core::training::{compute_step, load_checkpoint, save_checkpoint, LossReport, TrainingConfig};
use cool_core::variant::AblationVariant;

/// Writes a small synthetic benchmark with a short-run config and returns the config path.
fn setup(dir: &Path, extra: &str) -> PathBuf {
    let bench = generate(&SyntheticConfig {
        n_source: 40,
        n_target: 24,
        ..Default::default()
    })
    .unwrap();
    bench.write_to(dir).unwrap();
    let cfg = format!(
        "seeds = [1, 2]\nk = 8\n{extra}\n[data]\nsource = \"source.jsonl\"\ntarget = \"target.jsonl\"\nsnapshot = \"knowledge.snap\"\n[encoder]\nvocab = \"vocab.txt\"\n[training]\nlearning_rate = 1e-3\nsteps = 4\nbatch_size_source = 8\n"
    );
    let path = dir.join("small.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn losses(path: &Path) -> Vec<LossReport> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn rerun_gives_identical_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let a = run_experiment(&cfg).unwrap();
    let first = std::fs::read(dir.path().join("results/report.jsonl")).unwrap();
    let b = run_experiment(&cfg).unwrap();
    let second = std::fs::read(dir.path().join("results/report.jsonl")).unwrap();
    assert_eq!(first, second);
    assert_eq!(a, b);
    assert_eq!(a.seeds.len(), 2);
    assert!(!a.partial);
    let agg = a.aggregate.unwrap();
    let mean = a.seeds.iter().map(|s| s.metrics.as_ref().unwrap().accuracy).sum::<f64>() / 2.0;
    assert!((agg.accuracy_mean - mean).abs() < 1e-12);
    let parsed = ExperimentReport::from_jsonl(std::str::from_utf8(&first).unwrap()).unwrap();
    assert_eq!(parsed, a);
    assert!(dir.path().join("results/summary.txt").exists());
}

#[test]
fn seed_concurrency_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let par = run_experiment(&setup(dir.path(), "parallel = true")).unwrap();
    let seq = run_experiment(&setup(dir.path(), "parallel = false")).unwrap();
    for (a, b) in par.seeds.iter().zip(&seq.seeds) {
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.final_loss, b.final_loss);
    }
}

#[test]
fn adversarial_ablation_logs_no_copies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    run_ablation(&cfg, AblationVariant::WoAd).unwrap();
    let log = losses(&dir.path().join("results/wo_AD/losses_seed1.jsonl"));
    assert_eq!(log.len(), 4);
    assert!(log.iter().all(|r| r.adv_count == 0));
    run_ablation(&cfg, AblationVariant::Full).unwrap();
    let log = losses(&dir.path().join("results/full/losses_seed1.jsonl"));
    assert!(log.iter().all(|r| r.adv_count == r.n_target && r.n_target > 0));
}

#[test]
fn contrastive_ablation_uses_unit_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let r = run_ablation(&cfg, AblationVariant::WoCl).unwrap();
    assert!(!r.config.training.cl_enabled);
    let log = losses(&dir.path().join("results/wo_CL/losses_seed2.jsonl"));
    assert!(log.iter().all(|r| r.alpha == 1.0 && r.cl_s == 0.0 && r.cl_t == 0.0));
    assert!(log.iter().all(|r| r.composition_error() < 1e-12));
}

#[test]
fn postfix_ablation_keeps_bare_mask() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&setup(dir.path(), "")).unwrap();
    let exp = Experiment::new(cfg.with_variant(AblationVariant::WoPostfix)).unwrap();
    let model = CoolModel::new(exp.frozen.clone(), cfg.model.clone(), AblationVariant::WoPostfix, 0).unwrap();
    assert_eq!(model.hard_prompt_ids(), &[exp.frozen.tokenizer_arc().mask_id()]);
    assert_eq!(model.mask_position(), 2);
}

#[test]
fn sweep_writes_one_report_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let reports = sweep_k(&cfg, &[2, 4]).unwrap();
    assert_eq!(reports.iter().map(|r| r.k).collect::<Vec<_>>(), vec![2, 4]);
    for k in [2, 4] {
        assert!(dir.path().join(format!("results/k{k}/report.jsonl")).exists());
    }
}

#[test]
fn failed_seeds_are_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let mut c = ExperimentConfig::load(&cfg).unwrap();
    c.k = 1000;
    let report = Experiment::new(c).unwrap().run().unwrap();
    assert!(report.partial);
    assert!(report.aggregate.is_none());
    assert!(report.seeds.iter().all(|s| s.error.is_some() && s.metrics.is_none()));
    assert!(report.summary_table().contains("failed"));
}

#[test]
fn missing_snapshot_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    std::fs::remove_file(dir.path().join("knowledge.snap")).unwrap();
    let err = run_experiment(&cfg).unwrap_err();
    assert!(err.to_string().contains("snapshot"), "{err}");
}

#[test]
fn checkpoint_restores_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::from_path(&setup(dir.path(), "")).unwrap();
    let run = exp.run_seed(1, Exec::Parallel).unwrap();
    let ck = dir.path().join("ck");
    save_checkpoint(&ck, &run.model, "cfg", 1).unwrap();
    let mut fresh = CoolModel::new(exp.frozen.clone(), exp.config.model.clone(), exp.config.variant, 99).unwrap();
    let manifest = load_checkpoint(&ck, &mut fresh).unwrap();
    assert_eq!(manifest.seed, 1);
    let a = run.model.predict_all(&run.test_items, Exec::Sequential).unwrap();
    let b = fresh.predict_all(&run.test_items, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    let m = exp.evaluate_model(&fresh, 1, Exec::Sequential).unwrap();
    assert_eq!(Some(m), run.result.metrics);
}

#[test]
fn execution_modes_agree_on_a_step() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::from_path(&setup(dir.path(), "")).unwrap();
    let model = CoolModel::new(exp.frozen.clone(), exp.config.model.clone(), AblationVariant::Full, 3).unwrap();
    let src: Vec<_> = exp.source.records()[..8].iter().collect();
    let tgt: Vec<_> = exp.target.records()[..4].iter().collect();
    let src: Vec<PreparedItem> = model.prepare_all(&src, &exp.client, Exec::Parallel).unwrap();
    let tgt: Vec<PreparedItem> = model.prepare_all(&tgt, &exp.client, Exec::Sequential).unwrap();
    let (s, t): (Vec<_>, Vec<_>) = (src.iter().collect(), tgt.iter().collect());
    let cfg = TrainingConfig::default();
    let a = compute_step(&model, &s, &t, &cfg, 0, Exec::Sequential).unwrap();
    let b = compute_step(&model, &s, &t, &cfg, 0, Exec::Parallel).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.grads, b.grads);
}
