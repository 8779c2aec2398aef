//! Simulated search tools over the world.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::World;
use crate::error::{Error, Result};
use crate::model::query::{parse_query, tokenize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolName {
    EcomSearch,
    WebSearch,
    ImageSearch,
}

impl ToolName {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ecom_search" => Ok(ToolName::EcomSearch),
            "web_search" => Ok(ToolName::WebSearch),
            "image_search" => Ok(ToolName::ImageSearch),
            other => Err(Error::UnknownTool(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ToolName::EcomSearch => "ecom_search",
            ToolName::WebSearch => "web_search",
            ToolName::ImageSearch => "image_search",
        }
    }
}

/// A tool invocation. `argument` is the query text for the search tools and
/// an image reference for `image_search`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: String,
    pub argument: String,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_top_k() -> usize {
    20
}

impl ToolCall {
    pub fn new(tool: ToolName, argument: impl Into<String>, top_k: usize) -> Self {
        Self { tool: tool.as_str().to_string(), argument: argument.into(), top_k }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolHit {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub product_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<String>,
    /// Match score in [0, 1].
    pub score: f64,
    pub snippet: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub visual_tags: Vec<String>,
}

impl ToolHit {
    fn product(id: &str, score: f64, snippet: String) -> Self {
        Self {
            product_id: Some(id.to_string()),
            entity: None,
            score,
            snippet,
            image_ref: None,
            category: None,
            attributes: BTreeMap::new(),
            visual_tags: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub tool: ToolName,
    pub call: ToolCall,
    pub hits: Vec<ToolHit>,
}

/// Anything that can execute tool calls. The world is the reference
/// implementation; tests substitute failing providers.
pub trait Tools: Send + Sync {
    fn call(&self, call: &ToolCall) -> Result<ToolResult>;
}

impl Tools for World {
    fn call(&self, call: &ToolCall) -> Result<ToolResult> {
        simulate_tool(self, call)
    }
}

fn rank(mut hits: Vec<ToolHit>, top_k: usize) -> Vec<ToolHit> {
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.product_id.cmp(&b.product_id)));
    hits.truncate(top_k);
    hits
}

pub fn simulate_tool(world: &World, call: &ToolCall) -> Result<ToolResult> {
    let tool = ToolName::parse(&call.tool)?;
    let arg = call.argument.trim().to_lowercase();
    if arg.is_empty() {
        return Err(Error::InvalidQuery(format!("{} needs a non-empty argument", tool.as_str())));
    }
    let hits = match tool {
        ToolName::EcomSearch => ecom_search(world, &arg, call.top_k),
        ToolName::WebSearch => web_search(world, &arg),
        ToolName::ImageSearch => image_search(world, &arg, call.top_k)?,
    };
    Ok(ToolResult { tool, call: call.clone(), hits })
}

/// Lexical overlap blended with structure agreement against the serving
/// catalog view.
fn ecom_search(world: &World, text: &str, top_k: usize) -> Vec<ToolHit> {
    let structure = parse_query(text, world.lexicons());
    let effective = structure.corrected_text.clone().unwrap_or_else(|| text.to_string());
    let q_toks: BTreeSet<String> = tokenize(&effective).into_iter().collect();
    if q_toks.is_empty() {
        return Vec::new();
    }
    let mut hits = Vec::new();
    for p in &world.serving_products {
        let t_toks: BTreeSet<String> = tokenize(&p.title).into_iter().collect();
        let overlap = q_toks.intersection(&t_toks).count() as f64 / q_toks.len() as f64;
        let mut fields = 0usize;
        let mut agree = 0usize;
        if let Some(c) = structure.category() {
            fields += 1;
            agree += usize::from(p.leaf() == c);
        }
        if let Some(b) = &structure.brand {
            fields += 1;
            agree += usize::from(p.brand.as_ref() == Some(b));
        }
        for (k, v) in &structure.attributes {
            fields += 1;
            agree += usize::from(p.attributes.get(k) == Some(v));
        }
        let score = if fields == 0 { overlap } else { 0.5 * overlap + 0.5 * agree as f64 / fields as f64 };
        if score > 0.0 {
            hits.push(ToolHit::product(&p.id, score, p.title.clone()));
        }
    }
    rank(hits, top_k)
}

fn web_search(world: &World, text: &str) -> Vec<ToolHit> {
    world
        .external_knowledge
        .values()
        .filter(|k| text.contains(k.entity.as_str()))
        .map(|k| ToolHit {
            product_id: None,
            entity: Some(k.entity.clone()),
            score: 1.0,
            snippet: k.facts.join(" "),
            image_ref: Some(k.image_ref.clone()),
            category: Some(k.category.clone()),
            attributes: k.attributes.clone(),
            visual_tags: k.visual_tags.clone(),
        })
        .collect()
}

fn image_search(world: &World, image_ref: &str, top_k: usize) -> Result<Vec<ToolHit>> {
    let entry = world
        .external_knowledge
        .values()
        .find(|k| k.image_ref == image_ref)
        .ok_or_else(|| Error::UnknownEntity(format!("image {image_ref}")))?;
    let wanted: BTreeSet<&str> = entry.visual_tags.iter().map(String::as_str).collect();
    let mut hits = Vec::new();
    for p in &world.serving_products {
        let shared = p.visual_tags.iter().filter(|t| wanted.contains(t.as_str())).count();
        if shared > 0 {
            let score = shared as f64 / wanted.len() as f64;
            hits.push(ToolHit { visual_tags: p.visual_tags.clone(), ..ToolHit::product(&p.id, score, p.title.clone()) });
        }
    }
    Ok(rank(hits, top_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, WorldConfig};

    fn world() -> World {
        generate_world(&WorldConfig { n_products: 300, n_queries: 40, ..Default::default() }).unwrap()
    }

    #[test]
    fn web_then_image_chain() {
        let w = world();
        let web = simulate_tool(&w, &ToolCall::new(ToolName::WebSearch, "Lorax costume", 5)).unwrap();
        assert_eq!(web.hits.len(), 1);
        let hit = &web.hits[0];
        assert!(hit.snippet.contains("orange"));
        assert_eq!(hit.attributes.get("texture").map(String::as_str), Some("furry"));
        let img = hit.image_ref.clone().unwrap();
        let res = simulate_tool(&w, &ToolCall::new(ToolName::ImageSearch, img, 5)).unwrap();
        let top = w.product(res.hits[0].product_id.as_deref().unwrap()).unwrap();
        assert_eq!(top.leaf(), "mascot_suits");
        assert_eq!(top.attributes.get("color").map(String::as_str), Some("orange"));
    }

    #[test]
    fn lorax_has_no_lexical_match() {
        let w = world();
        let r = simulate_tool(&w, &ToolCall::new(ToolName::EcomSearch, "lorax costume", 10)).unwrap();
        assert!(r.hits.is_empty());
    }

    #[test]
    fn errors() {
        let w = world();
        assert!(matches!(
            simulate_tool(&w, &ToolCall::new(ToolName::EcomSearch, "  ", 10)),
            Err(Error::InvalidQuery(_))
        ));
        let bad = ToolCall { tool: "maps".into(), argument: "x".into(), top_k: 1 };
        assert!(matches!(simulate_tool(&w, &bad), Err(Error::UnknownTool(_))));
    }

    #[test]
    fn ecom_ranks_exact_title_first() {
        let w = world();
        let r = simulate_tool(&w, &ToolCall::new(ToolName::EcomSearch, "nike basketball shoes", 5)).unwrap();
        assert!((r.hits[0].score - 1.0).abs() < 1e-12);
        let again = simulate_tool(&w, &ToolCall::new(ToolName::EcomSearch, "nike basketball shoes", 5)).unwrap();
        assert_eq!(r, again);
    }
}
