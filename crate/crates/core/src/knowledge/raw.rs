//! Builders for raw upstream response bodies, used for fixtures and synthetic
//! knowledge bases.

use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub struct Annotation {
    pub spot: String,
    pub start: usize,
    pub end: usize,
    pub rho: f64,
    pub title: String,
    pub wikidata_id: String,
}

#[derive(Debug, Clone)]
pub struct Edge {
    pub outgoing: bool,
    pub relation: String,
    pub neighbor_id: String,
    pub neighbor_name: String,
}

impl Edge {
    pub fn out(rel: &str, id: &str, name: &str) -> Self {
        Self {
            outgoing: true,
            relation: rel.into(),
            neighbor_id: id.into(),
            neighbor_name: name.into(),
        }
    }

    pub fn inc(rel: &str, id: &str, name: &str) -> Self {
        Self {
            outgoing: false,
            ..Self::out(rel, id, name)
        }
    }
}

pub fn link_response(annotations: &[Annotation]) -> String {
    let anns: Vec<Value> = annotations
        .iter()
        .map(|a| {
            json!({
                "spot": a.spot,
                "start": a.start,
                "end": a.end,
                "rho": a.rho,
                "title": a.title,
                "wikidata_id": a.wikidata_id,
            })
        })
        .collect();
    json!({ "annotations": anns }).to_string()
}

pub fn neighbors_response(edges: &[Edge]) -> String {
    let bindings: Vec<Value> = edges
        .iter()
        .map(|e| {
            json!({
                "dir": { "type": "literal", "value": if e.outgoing { "out" } else { "in" } },
                "rel": { "type": "uri", "value": format!("http://www.wikidata.org/prop/direct/{}", e.relation) },
                "nb": { "type": "uri", "value": format!("http://www.wikidata.org/entity/{}", e.neighbor_id) },
                "nbLabel": { "type": "literal", "value": e.neighbor_name },
            })
        })
        .collect();
    json!({
        "head": { "vars": ["dir", "rel", "nb", "nbLabel"] },
        "results": { "bindings": bindings },
    })
    .to_string()
}

pub fn description_response(entity_id: &str, description: &str) -> String {
    json!({
        "entities": {
            entity_id: {
                "id": entity_id,
                "descriptions": { "en": { "language": "en", "value": description } },
            }
        }
    })
    .to_string()
}

pub fn description_missing(entity_id: &str) -> String {
    json!({ "entities": { entity_id: { "id": entity_id, "missing": "" } } }).to_string()
}
