use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{EncoderKind, ExperimentConfig};
use super::metrics::{evaluate, mean_std, Metrics};
use crate::data::{load_dataset, load_dataset_lenient, sample_k_shot, Dataset, Imbalance, Role};
use crate::encoder::{split_words, FrozenEncoder, Tokenizer, TransformerConfig};
use crate::error::{CoolError, Result};
use crate::extraction::AttentionExport;
use crate::knowledge::{snapshot_import, KnowledgeCache, KnowledgeClient};
use crate::model::{CoolModel, PreparedItem};
use crate::par::{self, Exec};
use crate::training::{train, write_loss_log, LossReport, TrainingConfig};
use crate::variant::AblationVariant;

/// Outcome of one seed. Exactly one of `metrics` and `error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Option<Metrics>,
    /// Accuracy on the training pool (source plus K-shot target).
    pub train_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    pub imbalance: Option<Imbalance>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub completed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub variant: AblationVariant,
    pub k: usize,
    pub config: ExperimentConfig,
    pub frozen_fingerprint: String,
    pub seeds: Vec<SeedResult>,
    /// `None` when every seed failed.
    pub aggregate: Option<Aggregate>,
    /// Set when at least one seed failed; the aggregate covers the rest.
    pub partial: bool,
}

impl ExperimentReport {
    pub fn from_seeds(
        config: &ExperimentConfig,
        frozen_fingerprint: String,
        seeds: Vec<SeedResult>,
    ) -> Self {
        let ok: Vec<&Metrics> = seeds.iter().filter_map(|s| s.metrics.as_ref()).collect();
        let aggregate = (!ok.is_empty()).then(|| {
            let (am, asd) = mean_std(&ok.iter().map(|m| m.accuracy).collect::<Vec<_>>());
            let (fm, fsd) = mean_std(&ok.iter().map(|m| m.macro_f1).collect::<Vec<_>>());
            Aggregate {
                accuracy_mean: am,
                accuracy_std: asd,
                macro_f1_mean: fm,
                macro_f1_std: fsd,
                completed: ok.len(),
            }
        });
        Self {
            name: config.name.clone(),
            variant: config.variant,
            k: config.k,
            config: config.clone(),
            frozen_fingerprint,
            partial: ok.len() < seeds.len(),
            seeds,
            aggregate,
        }
    }

    pub fn label(&self) -> String {
        if self.name.is_empty() {
            format!("{} K={}", self.variant, self.k)
        } else {
            format!("{} {} K={}", self.name, self.variant, self.k)
        }
    }

    /// Line-delimited records: one `config`, one `seed` per seed, one `summary`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut push = |v: serde_json::Value| -> Result<()> {
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
            Ok(())
        };
        push(serde_json::json!({
            "record": "config",
            "name": self.name,
            "variant": self.variant,
            "k": self.k,
            "frozen_fingerprint": self.frozen_fingerprint,
            "config": self.config,
        }))?;
        for s in &self.seeds {
            let mut v = serde_json::to_value(s)?;
            v["record"] = "seed".into();
            push(v)?;
        }
        push(serde_json::json!({
            "record": "summary",
            "aggregate": self.aggregate,
            "partial": self.partial,
        }))?;
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut head: Option<serde_json::Value> = None;
        let mut seeds = Vec::new();
        let mut summary: Option<serde_json::Value> = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            match v["record"].as_str() {
                Some("config") => head = Some(v),
                Some("seed") => seeds.push(serde_json::from_value::<SeedResult>(v)?),
                Some("summary") => summary = Some(v),
                _ => return Err(CoolError::Format(format!("report line {}: unknown record", i + 1))),
            }
        }
        let head = head.ok_or_else(|| CoolError::Format("report has no config record".into()))?;
        let summary = summary.ok_or_else(|| CoolError::Format("report has no summary record".into()))?;
        Ok(Self {
            name: serde_json::from_value(head["name"].clone())?,
            variant: serde_json::from_value(head["variant"].clone())?,
            k: serde_json::from_value(head["k"].clone())?,
            config: serde_json::from_value(head["config"].clone())?,
            frozen_fingerprint: serde_json::from_value(head["frozen_fingerprint"].clone())?,
            seeds,
            aggregate: serde_json::from_value(summary["aggregate"].clone())?,
            partial: serde_json::from_value(summary["partial"].clone())?,
        })
    }

    pub fn summary_table(&self) -> String {
        let mut s = format!("experiment: {}\n", self.label());
        s.push_str(&format!("{:>8}  {:>8}  {:>8}  {:>9}  note\n", "seed", "acc", "macro_f1", "train_acc"));
        for r in &self.seeds {
            match (&r.metrics, &r.error) {
                (Some(m), _) => s.push_str(&format!(
                    "{:>8}  {:>8.4}  {:>8.4}  {:>9.4}  {}\n",
                    r.seed,
                    m.accuracy,
                    m.macro_f1,
                    r.train_accuracy.unwrap_or(f64::NAN),
                    if r.imbalance.is_some() { "imbalanced K-shot" } else { "" }
                )),
                (None, e) => s.push_str(&format!(
                    "{:>8}  {:>8}  {:>8}  {:>9}  failed: {}\n",
                    r.seed,
                    "-",
                    "-",
                    "-",
                    e.as_deref().unwrap_or("unknown")
                )),
            }
        }
        match &self.aggregate {
            Some(a) => s.push_str(&format!(
                "mean ± std over {} seed(s): acc {:.4} ± {:.4}, macro_f1 {:.4} ± {:.4}{}\n",
                a.completed,
                a.accuracy_mean,
                a.accuracy_std,
                a.macro_f1_mean,
                a.macro_f1_std,
                if self.partial { " (some seeds failed)" } else { "" }
            )),
            None => s.push_str("every seed failed\n"),
        }
        s
    }

    /// Writes `report.jsonl` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.jsonl"), self.to_jsonl()?)?;
        std::fs::write(dir.join("summary.txt"), self.summary_table())?;
        Ok(())
    }
}

/// Loaded inputs shared by all seeds of one configuration.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub source: Dataset,
    pub target: Dataset,
    pub frozen: Arc<FrozenEncoder>,
    pub client: KnowledgeClient,
}

/// Model, items and logs of one trained seed.
pub struct SeedRun {
    pub result: SeedResult,
    pub model: CoolModel,
    pub test_items: Vec<PreparedItem>,
    pub log: Vec<LossReport>,
}

fn load(path: &Path, role: Role, lenient: bool) -> Result<Dataset> {
    if lenient {
        let (d, skipped) = load_dataset_lenient(path, role)?;
        if !skipped.is_empty() {
            warn!("{}: skipped {} malformed line(s)", path.display(), skipped.len());
        }
        Ok(d)
    } else {
        load_dataset(path, role)
    }
}

/// Offline client over the configured snapshot or cache directory.
pub fn open_knowledge(config: &ExperimentConfig) -> Result<KnowledgeClient> {
    let cache = if let Some(snap) = &config.data.snapshot {
        if !snap.exists() {
            return Err(CoolError::Snapshot(format!("missing snapshot {}", snap.display())));
        }
        let cache = KnowledgeCache::in_memory();
        snapshot_import(&cache, snap)?;
        cache
    } else if let Some(dir) = &config.data.cache_dir {
        if !dir.is_dir() {
            return Err(CoolError::Snapshot(format!("missing cache directory {}", dir.display())));
        }
        KnowledgeCache::open(dir)?
    } else {
        return Err(CoolError::Config("no knowledge snapshot configured".into()));
    };
    Ok(KnowledgeClient::offline(cache, config.knowledge.clone()))
}

/// Vocabulary for a toy encoder built from the data, template and verbalizer.
pub fn toy_vocabulary(config: &ExperimentConfig, datasets: &[&Dataset]) -> Tokenizer {
    let mut words: BTreeSet<String> = BTreeSet::new();
    words.extend(split_words(&config.model.template));
    words.extend(config.model.verbalizer_true.iter().cloned());
    words.extend(config.model.verbalizer_fake.iter().cloned());
    for d in datasets {
        for r in d.records() {
            words.extend(split_words(&r.text));
        }
    }
    Tokenizer::from_tokens(words)
}

pub fn build_encoder(config: &ExperimentConfig, datasets: &[&Dataset]) -> Result<Arc<FrozenEncoder>> {
    let enc = &config.encoder;
    let tokenizer = Arc::new(match &enc.vocab {
        Some(p) => Tokenizer::from_file(p)?,
        None => toy_vocabulary(config, datasets),
    });
    let layout = |default: fn(usize) -> TransformerConfig| {
        let mut t = enc.transformer.clone().unwrap_or_else(|| default(tokenizer.len()));
        t.vocab_size = tokenizer.len();
        t
    };
    let frozen = match enc.kind {
        EncoderKind::Toy => FrozenEncoder::init(tokenizer.clone(), layout(TransformerConfig::toy), enc.seed)?,
        EncoderKind::Pretrained => {
            let weights = enc
                .weights
                .as_ref()
                .ok_or_else(|| CoolError::Config("pretrained encoder needs weights".into()))?;
            FrozenEncoder::load(tokenizer.clone(), layout(TransformerConfig::base), weights)?
        }
    };
    Ok(Arc::new(frozen))
}

/// SHA-256 over the serialized configuration.
pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(config.to_toml_string()?.as_bytes())))
}

fn accuracy(model: &CoolModel, items: &[PreparedItem], exec: Exec) -> Result<f64> {
    let probs = model.predict_all(items, exec)?;
    let gold: Vec<_> = items.iter().map(|i| i.label).collect();
    Ok(evaluate(&gold, &probs)?.accuracy)
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let source = load(&config.data.source, Role::Source, config.data.lenient)?;
        let target = load(&config.data.target, Role::Target, config.data.lenient)?;
        let client = open_knowledge(&config)?;
        let frozen = build_encoder(&config, &[&source, &target])?;
        Ok(Self {
            config,
            source,
            target,
            frozen,
            client,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::new(ExperimentConfig::load(path)?)
    }

    fn training_config(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            seed,
            ..self.config.training.clone()
        }
    }

    fn prepare(&self, model: &CoolModel, d: &Dataset, exec: Exec) -> Result<Vec<PreparedItem>> {
        let records: Vec<_> = d.records().iter().collect();
        model.prepare_all(&records, &self.client, exec)
    }

    /// Split, prepare, train and evaluate one seed.
    pub fn run_seed(&self, seed: u64, exec: Exec) -> Result<SeedRun> {
        let cfg = &self.config;
        let split = sample_k_shot(&self.source, &self.target, cfg.k, seed)?;
        let mut model = CoolModel::new(self.frozen.clone(), cfg.model.clone(), cfg.variant, seed)?;
        let src = self.prepare(&model, &split.source_train, exec)?;
        let kshot = self.prepare(&model, &split.target_kshot, exec)?;
        let test = self.prepare(&model, &split.target_test, exec)?;
        let outcome = train(&mut model, &src, &kshot, &self.training_config(seed), exec)?;
        let probs = model.predict_all(&test, exec)?;
        let gold: Vec<_> = test.iter().map(|i| i.label).collect();
        let metrics = evaluate(&gold, &probs)?;
        let pool: Vec<PreparedItem> = src.into_iter().chain(kshot).collect();
        let train_accuracy = accuracy(&model, &pool, exec)?;
        info!(
            "seed {seed}: acc {:.4} macro_f1 {:.4} train_acc {:.4}",
            metrics.accuracy, metrics.macro_f1, train_accuracy
        );
        Ok(SeedRun {
            result: SeedResult {
                seed,
                metrics: Some(metrics),
                train_accuracy: Some(train_accuracy),
                final_loss: outcome.log.last().map(|r| r.total),
                imbalance: split.imbalance,
                warnings: split.warnings,
                error: None,
            },
            model,
            test_items: test,
            log: outcome.log,
        })
    }

    /// Target-test metrics of an already trained `model` on the split of `seed`.
    pub fn evaluate_model(&self, model: &CoolModel, seed: u64, exec: Exec) -> Result<Metrics> {
        let split = sample_k_shot(&self.source, &self.target, self.config.k, seed)?;
        let test = self.prepare(model, &split.target_test, exec)?;
        let probs = model.predict_all(&test, exec)?;
        let gold: Vec<_> = test.iter().map(|i| i.label).collect();
        evaluate(&gold, &probs)
    }

    /// Runs every configured seed and writes the report, loss logs and
    /// attention exports into the output directory.
    pub fn run(&self) -> Result<ExperimentReport> {
        let cfg = &self.config;
        let out = &cfg.output_dir;
        std::fs::create_dir_all(out)?;
        let seed_exec = if cfg.parallel { Exec::Parallel } else { Exec::Sequential };
        let runs = par::map(seed_exec, &cfg.seeds, |&seed| {
            let run = self.run_seed(seed, seed_exec)?;
            write_seed_artifacts(out, &run)?;
            Ok::<_, CoolError>(run.result)
        });
        let seeds: Vec<SeedResult> = runs
            .into_iter()
            .zip(&cfg.seeds)
            .map(|(r, &seed)| {
                r.unwrap_or_else(|e| {
                    warn!("seed {seed} failed: {e}");
                    SeedResult {
                        seed,
                        metrics: None,
                        train_accuracy: None,
                        final_loss: None,
                        imbalance: None,
                        warnings: Vec::new(),
                        error: Some(e.to_string()),
                    }
                })
            })
            .collect();
        let report = ExperimentReport::from_seeds(cfg, self.frozen.fingerprint(), seeds);
        report.write(out)?;
        Ok(report)
    }
}

fn write_seed_artifacts(dir: &Path, run: &SeedRun) -> Result<()> {
    let seed = run.result.seed;
    let mut w = BufWriter::new(File::create(dir.join(format!("losses_seed{seed}.jsonl")))?);
    write_loss_log(&run.log, &mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join(format!("attention_seed{seed}.jsonl")))?);
    for item in &run.test_items {
        if let Some(export) = run.model.attention_export(item)? {
            serde_json::to_writer(&mut w, &export)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_attention_exports(path: &Path) -> Result<Vec<AttentionExport>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn run_experiment(config_path: &Path) -> Result<ExperimentReport> {
    Experiment::from_path(config_path)?.run()
}

/// Runs `variant` with its outputs under `<output_dir>/<tag>`.
pub fn run_ablation(config_path: &Path, variant: AblationVariant) -> Result<ExperimentReport> {
    let base = ExperimentConfig::load(config_path)?;
    let mut cfg = base.with_variant(variant);
    cfg.output_dir = base.output_dir.join(variant.tag());
    Experiment::new(cfg)?.run()
}

pub const SWEEP_KS: [usize; 4] = [2, 4, 8, 16];

/// One report per K, under `<output_dir>/k<K>`.
pub fn sweep_k(config_path: &Path, ks: &[usize]) -> Result<Vec<ExperimentReport>> {
    let base = ExperimentConfig::load(config_path)?;
    let mut exp = Experiment::new(base.clone())?;
    ks.iter()
        .map(|&k| {
            exp.config.k = k;
            exp.config.output_dir = sweep_dir(&base.output_dir, k);
            exp.run()
        })
        .collect()
}

pub fn sweep_dir(base: &Path, k: usize) -> PathBuf {
    base.join(format!("k{k}"))
}
