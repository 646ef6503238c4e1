//! HTTP-backed [`KnowledgeSource`]: a TagMe-compatible linker plus Wikidata
//! (SPARQL for neighbors, `wbgetentities` for descriptions and title lookup).

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde_json::Value;
use ureq::Agent;

use super::{KnowledgeSource, Request};

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub linker_url: String,
    pub linker_token: Option<String>,
    pub sparql_url: String,
    pub wikidata_api_url: String,
    pub language: String,
    pub max_neighbors: usize,
    /// Minimum spacing between consecutive requests.
    pub min_interval: Duration,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            linker_url: "https://tagme.d4science.org/tagme/tag".into(),
            linker_token: None,
            sparql_url: "https://query.wikidata.org/sparql".into(),
            wikidata_api_url: "https://www.wikidata.org/w/api.php".into(),
            language: "en".into(),
            max_neighbors: 64,
            min_interval: Duration::from_millis(100),
            max_retries: 4,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(30),
        }
    }
}

impl HttpConfig {
    /// Overrides endpoints and the linker token from `COOL_TAGME_URL`,
    /// `COOL_TAGME_TOKEN`, `COOL_SPARQL_URL` and `COOL_WIKIDATA_API`.
    pub fn from_env() -> Self {
        let mut c = Self::default();
        if let Ok(v) = std::env::var("COOL_TAGME_URL") {
            c.linker_url = v;
        }
        if let Ok(v) = std::env::var("COOL_TAGME_TOKEN") {
            c.linker_token = Some(v);
        }
        if let Ok(v) = std::env::var("COOL_SPARQL_URL") {
            c.sparql_url = v;
        }
        if let Ok(v) = std::env::var("COOL_WIKIDATA_API") {
            c.wikidata_api_url = v;
        }
        c
    }
}

pub struct HttpSource {
    config: HttpConfig,
    agent: Agent,
    last_request: Mutex<Option<Instant>>,
}

impl HttpSource {
    pub fn new(config: HttpConfig) -> Self {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Self {
            config,
            agent,
            last_request: Mutex::new(None),
        }
    }

    fn throttle(&self) {
        let mut last = self.last_request.lock().expect("throttle lock poisoned");
        if let Some(t) = *last {
            let elapsed = t.elapsed();
            if elapsed < self.config.min_interval {
                thread::sleep(self.config.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    /// GET with retry on transport errors, 429 and 5xx, backing off
    /// exponentially from `backoff_base`.
    fn get(&self, url: &str, query: &[(&str, &str)]) -> Result<String, String> {
        let mut attempt = 0;
        loop {
            self.throttle();
            let mut req = self.agent.get(url).header("Accept", "application/json");
            for (k, v) in query {
                req = req.query(*k, *v);
            }
            let outcome = match req.call() {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status == 200 {
                        return resp.body_mut().read_to_string().map_err(|e| e.to_string());
                    }
                    let retryable = status == 429 || status >= 500;
                    (retryable, format!("HTTP {status} from {url}"))
                }
                Err(e) => (true, e.to_string()),
            };
            let (retryable, msg) = outcome;
            if !retryable || attempt >= self.config.max_retries {
                return Err(msg);
            }
            let delay = self.config.backoff_base * 2u32.pow(attempt);
            warn!("{msg}; retrying in {delay:?}");
            thread::sleep(delay);
            attempt += 1;
        }
    }

    fn link(&self, text: &str) -> Result<String, String> {
        let token = self
            .config
            .linker_token
            .as_deref()
            .ok_or("no linker token configured (COOL_TAGME_TOKEN)")?;
        let body = self.get(
            &self.config.linker_url,
            &[
                ("lang", self.config.language.as_str()),
                ("gcube-token", token),
                ("text", text),
            ],
        )?;
        let mut v: Value = serde_json::from_str(&body).map_err(|e| e.to_string())?;
        let titles: Vec<String> = v
            .get("annotations")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .filter(|x| x.get("wikidata_id").is_none())
                    .filter_map(|x| x.get("title").and_then(Value::as_str).map(String::from))
                    .collect()
            })
            .unwrap_or_default();
        if titles.is_empty() {
            return Ok(v.to_string());
        }
        let ids = self.resolve_titles(&titles)?;
        if let Some(anns) = v.get_mut("annotations").and_then(Value::as_array_mut) {
            for a in anns {
                let title = a.get("title").and_then(Value::as_str).map(String::from);
                if let Some(q) = title.and_then(|t| ids.iter().find(|(tt, _)| *tt == t)) {
                    a["wikidata_id"] = Value::String(q.1.clone());
                }
            }
        }
        Ok(v.to_string())
    }

    /// Maps English Wikipedia titles to Wikidata ids.
    fn resolve_titles(&self, titles: &[String]) -> Result<Vec<(String, String)>, String> {
        let mut out = Vec::new();
        for chunk in titles.chunks(50) {
            let joined = chunk.join("|");
            let body = self.get(
                &self.config.wikidata_api_url,
                &[
                    ("action", "wbgetentities"),
                    ("sites", "enwiki"),
                    ("titles", joined.as_str()),
                    ("props", "sitelinks"),
                    ("sitefilter", "enwiki"),
                    ("format", "json"),
                ],
            )?;
            let v: Value = serde_json::from_str(&body).map_err(|e| e.to_string())?;
            if let Some(entities) = v.get("entities").and_then(Value::as_object) {
                for (id, e) in entities {
                    if let Some(t) = e.pointer("/sitelinks/enwiki/title").and_then(Value::as_str) {
                        out.push((t.to_string(), id.clone()));
                    }
                }
            }
        }
        debug!("resolved {} of {} titles", out.len(), titles.len());
        Ok(out)
    }

    fn neighbors(&self, entity_id: &str) -> Result<String, String> {
        let query = format!(
            r#"SELECT ?dir ?rel ?nb ?nbLabel WHERE {{
  {{ wd:{id} ?rel ?nb . BIND("out" AS ?dir) }}
  UNION
  {{ ?nb ?rel wd:{id} . BIND("in" AS ?dir) }}
  FILTER(STRSTARTS(STR(?nb), "http://www.wikidata.org/entity/Q"))
  SERVICE wikibase:label {{ bd:serviceParam wikibase:language "{lang}". }}
}} LIMIT {limit}"#,
            id = entity_id,
            lang = self.config.language,
            limit = self.config.max_neighbors * 4,
        );
        self.get(
            &self.config.sparql_url,
            &[("query", query.as_str()), ("format", "json")],
        )
    }

    fn description(&self, entity_id: &str) -> Result<String, String> {
        self.get(
            &self.config.wikidata_api_url,
            &[
                ("action", "wbgetentities"),
                ("ids", entity_id),
                ("props", "descriptions"),
                ("languages", self.config.language.as_str()),
                ("format", "json"),
            ],
        )
    }
}

impl KnowledgeSource for HttpSource {
    fn fetch(&self, request: &Request<'_>) -> Result<String, String> {
        match request {
            Request::Link { text } => self.link(text),
            Request::Neighbors { entity_id } => self.neighbors(entity_id),
            Request::Description { entity_id } => self.description(entity_id),
        }
    }
}
