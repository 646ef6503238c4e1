//! A two-domain synthetic benchmark where the label can only be recovered by
//! consulting the knowledge base.
//!
//! Every item mentions one entity and claims it has some attribute. The
//! entity's knowledge (a neighbor edge and its description) names its true
//! attribute. The item is real when the claim matches the knowledge and fake
//! otherwise. Entity names are three syllables drawn from a shared pool and
//! never repeat, so there is no per-entity token to memorize.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{write_dataset, Dataset, Label, NewsRecord, Role};
use crate::encoder::{split_words, Tokenizer};
use crate::error::Result;
use crate::knowledge::raw::{description_response, link_response, neighbors_response, Annotation, Edge};
use crate::knowledge::{text_key, CacheKind, KnowledgeCache};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub attributes: Vec<String>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_source: 200,
            n_target: 60,
            attributes: ["red", "blue"].map(String::from).to_vec(),
            seed: 7,
        }
    }
}

const SOURCE_FRAMES: [&str; 3] = [
    "{e} is {a} .",
    "desk : {e} is {a} .",
    "{e} is {a} , paper says .",
];

const TARGET_FRAMES: [&str; 3] = [
    "study : {e} is {a} .",
    "lab finds {e} is {a} .",
    "{e} is {a} , data show .",
];

/// Experiment config for the files written by [`SyntheticBenchmark::write_to`].
pub const TOY_EXPERIMENT: &str = r#"name = "synthetic"
k = 16
seeds = [1, 2, 3]
variant = "full"
output_dir = "results"

[data]
source = "source.jsonl"
target = "target.jsonl"
snapshot = "knowledge.snap"

[encoder]
kind = "toy"
vocab = "vocab.txt"
seed = 42

[training]
learning_rate = 1e-3
steps = 200
"#;

/// Generated datasets, vocabulary and knowledge cache entries.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub source: Dataset,
    pub target: Dataset,
    pub vocab: Vec<String>,
    pub knowledge: Vec<(CacheKind, String, String)>,
}

fn entity_names(n: usize, rng: &mut ChaCha8Rng, taken: &mut HashSet<String>) -> Vec<String> {
    const C: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const V: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let name: String = (0..3)
            .map(|_| format!("{}{}", C.choose(rng).unwrap(), V.choose(rng).unwrap()))
            .collect::<Vec<_>>()
            .join(" ");
        if taken.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

struct Generated {
    records: Vec<NewsRecord>,
    knowledge: Vec<(CacheKind, String, String)>,
}

fn generate_domain(
    domain: &str,
    frames: &[&str],
    names: &[String],
    first_qid: usize,
    attrs: &[String],
    rng: &mut ChaCha8Rng,
) -> Generated {
    let n = names.len();
    let mut labels: Vec<Label> = (0..n).map(|i| if i % 2 == 0 { Label::True } else { Label::Fake }).collect();
    labels.shuffle(rng);
    let mut records = Vec::with_capacity(n);
    let mut knowledge = Vec::with_capacity(3 * n);
    for (i, (name, &label)) in names.iter().zip(&labels).enumerate() {
        let qid = format!("Q{}", first_qid + i);
        let truth = rng.random_range(0..attrs.len());
        let claim = match label {
            Label::True => truth,
            Label::Fake => (truth + rng.random_range(1..attrs.len())) % attrs.len(),
        };
        let frame = frames[rng.random_range(0..frames.len())];
        let text = frame.replace("{e}", name).replace("{a}", &attrs[claim]);
        let start = text.find(name.as_str()).expect("name in text");
        let start_chars = text[..start].chars().count();
        let ann = Annotation {
            spot: name.clone(),
            start: start_chars,
            end: start_chars + name.chars().count(),
            rho: 0.8,
            title: name.clone(),
            wikidata_id: qid.clone(),
        };
        knowledge.push((CacheKind::Link, text_key(&text), link_response(&[ann])));
        let attr_qid = format!("Q{}", 10 + truth);
        let edges = [Edge::out("P462", &attr_qid, &attrs[truth])];
        knowledge.push((CacheKind::Neighbors, qid.clone(), neighbors_response(&edges)));
        knowledge.push((
            CacheKind::Description,
            qid.clone(),
            description_response(&qid, &format!("{} object", attrs[truth])),
        ));
        records.push(NewsRecord {
            id: format!("{domain}-{i:03}"),
            text,
            label,
            domain: domain.to_string(),
        });
    }
    Generated { records, knowledge }
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticBenchmark> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut taken: HashSet<String> = HashSet::new();
    let src_names = entity_names(config.n_source, &mut rng, &mut taken);
    let tgt_names = entity_names(config.n_target, &mut rng, &mut taken);
    let src = generate_domain("synth_source", &SOURCE_FRAMES, &src_names, 1000, &config.attributes, &mut rng);
    let tgt = generate_domain(
        "synth_target",
        &TARGET_FRAMES,
        &tgt_names,
        1000 + config.n_source,
        &config.attributes,
        &mut rng,
    );

    let mut vocab: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    let mut add = |w: &str| {
        if seen.insert(w.to_string()) {
            vocab.push(w.to_string());
        }
    };
    for w in split_words(crate::prompt::DEFAULT_TEMPLATE) {
        add(&w);
    }
    for w in ["true", "fake", "object"] {
        add(w);
    }
    for a in &config.attributes {
        add(a);
    }
    for r in src.records.iter().chain(&tgt.records) {
        for w in split_words(&r.text) {
            add(&w);
        }
    }

    let mut knowledge = src.knowledge;
    knowledge.extend(tgt.knowledge);
    Ok(SyntheticBenchmark {
        source: Dataset::new("synth_source", Role::Source, src.records)?,
        target: Dataset::new("synth_target", Role::Target, tgt.records)?,
        vocab,
        knowledge,
    })
}

impl SyntheticBenchmark {
    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::from_tokens(&self.vocab)
    }

    pub fn cache(&self) -> Result<KnowledgeCache> {
        let cache = KnowledgeCache::in_memory();
        cache.put_all(&self.knowledge)?;
        Ok(cache)
    }

    /// Writes `source.jsonl`, `target.jsonl`, `vocab.txt`, `knowledge.snap`
    /// and a toy-encoder `experiment.toml` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_dataset(&dir.join("source.jsonl"), self.source.records())?;
        write_dataset(&dir.join("target.jsonl"), self.target.records())?;
        self.tokenizer().write_file(&dir.join("vocab.txt"))?;
        crate::knowledge::snapshot_export(&self.cache()?, &dir.join("knowledge.snap"))?;
        std::fs::write(dir.join("experiment.toml"), TOY_EXPERIMENT)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{ClientConfig, KnowledgeClient};

    #[test]
    fn labels_follow_knowledge() {
        let b = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(b.source.len(), 200);
        assert_eq!(b.target.len(), 60);
        assert_eq!(b.source.class_counts(), (100, 100));
        let client = KnowledgeClient::offline(b.cache().unwrap(), ClientConfig::default());
        for r in b.source.records().iter().chain(b.target.records()) {
            let m = client.link_entities(&r.text).unwrap();
            assert_eq!(m.len(), 1);
            let desc = client.fetch_description(&m[0].entity_id).unwrap();
            let attr = desc.description.split(' ').next().unwrap().to_string();
            let claims = split_words(&r.text).contains(&attr);
            assert_eq!(claims, r.label == Label::True, "{}", r.text);
            let nb = client.fetch_neighbors(&m[0].entity_id).unwrap();
            assert!(nb.neighbors.iter().any(|n| n.neighbor_name == attr));
        }
    }

    #[test]
    fn written_config_loads() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate(&SyntheticConfig::default()).unwrap();
        b.write_to(dir.path()).unwrap();
        let cfg = crate::eval::ExperimentConfig::load(&dir.path().join("experiment.toml")).unwrap();
        assert_eq!(cfg.training.steps, Some(200));
        assert_eq!(cfg.data.snapshot.unwrap(), dir.path().join("knowledge.snap"));
        let tok = Tokenizer::from_file(&dir.path().join("vocab.txt")).unwrap();
        assert_eq!(tok.len(), b.tokenizer().len());
    }

    #[test]
    fn deterministic_and_entities_disjoint() {
        let a = generate(&SyntheticConfig::default()).unwrap();
        let b = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(a.source.records(), b.source.records());
        assert_eq!(a.knowledge, b.knowledge);
        let tok = a.tokenizer();
        for r in a.source.records().iter().chain(a.target.records()) {
            assert!(!tok.tokenize(&r.text).contains(&tok.unk_id()));
        }
        let client = KnowledgeClient::offline(a.cache().unwrap(), ClientConfig::default());
        let names = |d: &Dataset| -> HashSet<String> {
            d.records()
                .iter()
                .map(|r| client.link_entities(&r.text).unwrap()[0].entity_name.clone())
                .collect()
        };
        let src = names(&a.source);
        assert_eq!(src.len(), a.source.len());
        let shared: Vec<_> = names(&a.target).into_iter().filter(|n| src.contains(n)).collect();
        assert!(shared.is_empty(), "{shared:?}");
    }
}
