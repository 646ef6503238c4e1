//! Entity linking and external knowledge retrieval.
//!
//! Responses are cached verbatim (raw JSON bodies) and parsed on every read, so
//! a run against a snapshot sees exactly what the original crawl saw. Three
//! wire formats are understood:
//!
//! * linking: a TagMe-style `{"annotations": [{spot, start, end, rho, title, wikidata_id}]}`;
//! * neighbors: SPARQL JSON results with `dir`, `rel`, `nb`, `nbLabel` bindings;
//! * descriptions: Wikidata `wbgetentities` output.

mod cache;
#[cfg(feature = "online")]
mod http;
pub mod raw;
mod snapshot;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use cache::KnowledgeCache;
#[cfg(feature = "online")]
pub use http::{HttpConfig, HttpSource};
pub use snapshot::{decode_snapshot, encode_snapshot, snapshot_export, snapshot_import};

use crate::error::{CoolError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheKind {
    Link,
    Neighbors,
    Description,
}

impl CacheKind {
    pub const ALL: [CacheKind; 3] = [CacheKind::Link, CacheKind::Neighbors, CacheKind::Description];

    pub fn file_name(self) -> &'static str {
        match self {
            CacheKind::Link => "link.jsonl",
            CacheKind::Neighbors => "neighbors.jsonl",
            CacheKind::Description => "description.jsonl",
        }
    }
}

impl fmt::Display for CacheKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CacheKind::Link => "link",
            CacheKind::Neighbors => "neighbors",
            CacheKind::Description => "description",
        })
    }
}

/// A linked entity span in a news text. Offsets count Unicode scalar values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMention {
    pub surface: String,
    pub entity_id: String,
    pub entity_name: String,
    pub span: (usize, usize),
    pub link_confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Outgoing,
    Incoming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub relation: String,
    pub neighbor_id: String,
    pub neighbor_name: String,
    pub direction: Direction,
}

/// One-hop neighborhood of an entity, both edge directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub entity_id: String,
    pub neighbors: Vec<Neighbor>,
    /// Set when the knowledge base returned nothing for the entity.
    pub unknown: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityDescription {
    pub entity_id: String,
    pub description: String,
    /// Set when the knowledge base holds no description; `description` is then empty.
    pub missing: bool,
}

/// A request to an upstream knowledge service.
#[derive(Debug, Clone, Copy)]
pub enum Request<'a> {
    Link { text: &'a str },
    Neighbors { entity_id: &'a str },
    Description { entity_id: &'a str },
}

impl Request<'_> {
    pub fn kind(&self) -> CacheKind {
        match self {
            Request::Link { .. } => CacheKind::Link,
            Request::Neighbors { .. } => CacheKind::Neighbors,
            Request::Description { .. } => CacheKind::Description,
        }
    }

    pub fn cache_key(&self) -> String {
        match self {
            Request::Link { text } => text_key(text),
            Request::Neighbors { entity_id } | Request::Description { entity_id } => {
                entity_id.to_string()
            }
        }
    }
}

/// Content hash used to key linker responses.
pub fn text_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Upstream service returning raw response bodies.
pub trait KnowledgeSource: Send + Sync {
    fn fetch(&self, request: &Request<'_>) -> std::result::Result<String, String>;
}

/// In-memory source keyed like the cache. Counts every fetch.
#[derive(Debug, Default)]
pub struct MemorySource {
    bodies: HashMap<(CacheKind, String), String>,
    calls: AtomicUsize,
}

impl MemorySource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, kind: CacheKind, key: impl Into<String>, body: impl Into<String>) {
        self.bodies.insert((kind, key.into()), body.into());
    }

    pub fn insert_link(&mut self, text: &str, body: impl Into<String>) {
        self.insert(CacheKind::Link, text_key(text), body);
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl KnowledgeSource for MemorySource {
    fn fetch(&self, request: &Request<'_>) -> std::result::Result<String, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = (request.kind(), request.cache_key());
        match self.bodies.get(&key) {
            Some(b) => Ok(b.clone()),
            None => match request {
                Request::Link { .. } => Ok(raw::link_response(&[])),
                Request::Neighbors { .. } => Ok(raw::neighbors_response(&[])),
                Request::Description { entity_id } => Ok(raw::description_missing(entity_id)),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    /// Minimum linker confidence kept.
    pub threshold: f64,
    pub max_neighbors: usize,
    pub language: String,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            max_neighbors: 64,
            language: "en".into(),
        }
    }
}

/// Cache-first knowledge client. Without a source it runs offline and a miss
/// is an error; with one, misses are fetched and stored.
pub struct KnowledgeClient {
    cache: KnowledgeCache,
    source: Option<Box<dyn KnowledgeSource>>,
    config: ClientConfig,
    requests: AtomicUsize,
    fetch_lock: Mutex<()>,
}

impl fmt::Debug for KnowledgeClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KnowledgeClient")
            .field("online", &self.source.is_some())
            .field("config", &self.config)
            .field("entries", &self.cache.len())
            .finish()
    }
}

fn validate_entity_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | ':' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(CoolError::EntityId(id.to_string()))
    }
}

impl KnowledgeClient {
    pub fn offline(cache: KnowledgeCache, config: ClientConfig) -> Self {
        Self {
            cache,
            source: None,
            config,
            requests: AtomicUsize::new(0),
            fetch_lock: Mutex::new(()),
        }
    }

    pub fn online(
        cache: KnowledgeCache,
        source: Box<dyn KnowledgeSource>,
        config: ClientConfig,
    ) -> Self {
        Self {
            source: Some(source),
            ..Self::offline(cache, config)
        }
    }

    pub fn is_online(&self) -> bool {
        self.source.is_some()
    }

    pub fn cache(&self) -> &KnowledgeCache {
        &self.cache
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    /// Upstream requests issued so far.
    pub fn network_requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn raw(&self, request: Request<'_>) -> Result<String> {
        let kind = request.kind();
        let key = request.cache_key();
        if let Some(body) = self.cache.get(kind, &key) {
            return Ok(body);
        }
        let Some(source) = &self.source else {
            return Err(CoolError::CacheMiss { kind, key });
        };
        // One fetch per key even under concurrent callers.
        let _guard = self.fetch_lock.lock().expect("fetch lock poisoned");
        if let Some(body) = self.cache.get(kind, &key) {
            return Ok(body);
        }
        self.requests.fetch_add(1, Ordering::SeqCst);
        let body = source.fetch(&request).map_err(|message| CoolError::Network {
            kind,
            key: key.clone(),
            message,
        })?;
        self.cache.put(kind, &key, &body)?;
        Ok(body)
    }

    /// Linked mentions sorted by span start, filtered by the confidence threshold.
    pub fn link_entities(&self, text: &str) -> Result<Vec<EntityMention>> {
        if text.trim().is_empty() {
            return Err(CoolError::Empty("cannot link entities in empty text".into()));
        }
        let body = self.raw(Request::Link { text })?;
        parse_link_response(&body, text, self.config.threshold)
    }

    pub fn fetch_neighbors(&self, entity_id: &str) -> Result<NeighborSet> {
        validate_entity_id(entity_id)?;
        let body = self.raw(Request::Neighbors { entity_id })?;
        parse_neighbors_response(&body, entity_id, self.config.max_neighbors)
    }

    pub fn fetch_description(&self, entity_id: &str) -> Result<EntityDescription> {
        validate_entity_id(entity_id)?;
        let body = self.raw(Request::Description { entity_id })?;
        parse_description_response(&body, entity_id, &self.config.language)
    }
}

fn field<'a>(v: &'a Value, name: &str) -> Option<&'a Value> {
    v.get(name).filter(|x| !x.is_null())
}

/// Parses a linker response; spans outside `text` are dropped with a warning.
pub fn parse_link_response(body: &str, text: &str, threshold: f64) -> Result<Vec<EntityMention>> {
    let v: Value = serde_json::from_str(body)?;
    let anns = v
        .get("annotations")
        .and_then(Value::as_array)
        .ok_or_else(|| CoolError::Format("linker response lacks \"annotations\"".into()))?;
    let n_chars = text.chars().count();
    let mut out = Vec::new();
    for a in anns {
        let rho = field(a, "rho").and_then(Value::as_f64).unwrap_or(0.0);
        if rho < threshold {
            continue;
        }
        let start = field(a, "start").and_then(Value::as_u64).unwrap_or(0) as usize;
        let end = field(a, "end").and_then(Value::as_u64).unwrap_or(0) as usize;
        if !(start < end && end <= n_chars) {
            warn!("dropping linker span ({start},{end}) outside text of {n_chars} chars");
            continue;
        }
        let title = field(a, "title").and_then(Value::as_str).unwrap_or_default();
        let entity_id = match (field(a, "wikidata_id"), field(a, "id")) {
            (Some(Value::String(q)), _) => q.clone(),
            (_, Some(Value::String(s))) => s.clone(),
            (_, Some(Value::Number(n))) => n.to_string(),
            _ => {
                warn!("dropping linker annotation without an entity id");
                continue;
            }
        };
        let surface: String = text.chars().skip(start).take(end - start).collect();
        out.push(EntityMention {
            surface,
            entity_id,
            entity_name: if title.is_empty() {
                field(a, "spot").and_then(Value::as_str).unwrap_or_default().to_string()
            } else {
                title.to_string()
            },
            span: (start, end),
            link_confidence: rho.clamp(0.0, 1.0),
        });
    }
    out.sort_by_key(|m| m.span);
    Ok(out)
}

fn strip_entity_prefix(s: &str) -> &str {
    s.rsplit('/').next().unwrap_or(s)
}

/// Parses SPARQL bindings, dropping duplicate edges and truncating to
/// `max_neighbors` in response order.
pub fn parse_neighbors_response(
    body: &str,
    entity_id: &str,
    max_neighbors: usize,
) -> Result<NeighborSet> {
    let v: Value = serde_json::from_str(body)?;
    let bindings = v
        .pointer("/results/bindings")
        .and_then(Value::as_array)
        .ok_or_else(|| CoolError::Format("neighbor response lacks results.bindings".into()))?;
    let mut seen = HashSet::new();
    let mut neighbors = Vec::new();
    for b in bindings {
        let get = |k: &str| b.pointer(&format!("/{k}/value")).and_then(Value::as_str);
        let (Some(dir), Some(rel), Some(nb)) = (get("dir"), get("rel"), get("nb")) else {
            warn!("skipping incomplete neighbor binding for {entity_id}");
            continue;
        };
        let direction = match dir {
            "out" | "outgoing" => Direction::Outgoing,
            "in" | "incoming" => Direction::Incoming,
            other => {
                warn!("skipping neighbor with direction {other:?}");
                continue;
            }
        };
        let relation = strip_entity_prefix(rel).to_string();
        let neighbor_id = strip_entity_prefix(nb).to_string();
        if !seen.insert((relation.clone(), neighbor_id.clone(), direction)) {
            continue;
        }
        let neighbor_name = get("nbLabel").unwrap_or(&neighbor_id).to_string();
        neighbors.push(Neighbor {
            relation,
            neighbor_id,
            neighbor_name,
            direction,
        });
    }
    let unknown = neighbors.is_empty();
    neighbors.truncate(max_neighbors);
    Ok(NeighborSet {
        entity_id: entity_id.to_string(),
        neighbors,
        unknown,
    })
}

pub fn parse_description_response(
    body: &str,
    entity_id: &str,
    language: &str,
) -> Result<EntityDescription> {
    let v: Value = serde_json::from_str(body)?;
    let entity = v
        .get("entities")
        .and_then(|e| e.get(entity_id))
        .ok_or_else(|| CoolError::Format(format!("description response lacks entity {entity_id}")))?;
    let description = entity
        .get("descriptions")
        .and_then(|d| d.get(language))
        .and_then(|d| d.get("value"))
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Ok(EntityDescription {
        entity_id: entity_id.to_string(),
        missing: description.is_empty(),
        description,
    })
}

/// Counts from a [`crawl`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CrawlStats {
    pub texts: usize,
    pub mentions: usize,
    pub entities: usize,
    /// `(what, error)` for each request that failed; the crawl keeps going.
    pub failures: Vec<(String, String)>,
}

/// Links every text and fetches neighbors and descriptions for each distinct
/// entity, filling the client's cache.
pub fn crawl<'a>(client: &KnowledgeClient, texts: impl IntoIterator<Item = &'a str>) -> CrawlStats {
    let mut stats = CrawlStats::default();
    let mut entities: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for text in texts {
        stats.texts += 1;
        match client.link_entities(text) {
            Ok(mentions) => {
                stats.mentions += mentions.len();
                for m in mentions {
                    if seen.insert(m.entity_id.clone()) {
                        entities.push(m.entity_id);
                    }
                }
            }
            Err(e) => stats.failures.push((format!("link {:?}", text_key(text)), e.to_string())),
        }
    }
    stats.entities = entities.len();
    for id in &entities {
        if let Err(e) = client.fetch_neighbors(id) {
            stats.failures.push((format!("neighbors {id}"), e.to_string()));
        }
        if let Err(e) = client.fetch_description(id) {
            stats.failures.push((format!("description {id}"), e.to_string()));
        }
    }
    stats
}
