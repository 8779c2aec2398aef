//! Shared precedent store: append-only entries with hashed-text embeddings,
//! cosine retrieval, two summary levels and distillation of resolutions.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dialectic::RouteKind;
use crate::domain::{ProductId, RelevanceLabel, Tick};
use crate::error::{Error, Result};
use crate::model::query::tokenize;
use crate::model::EmbeddingVector;
use crate::records;
use crate::util::{fnv1a, sha256_hex};

pub const EMBED_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemorySource {
    ExpertCurated,
    DeepSearchArtifact,
    DistilledTrace,
}

impl MemorySource {
    pub fn default_authority(self) -> f64 {
        match self {
            MemorySource::ExpertCurated => 1.0,
            MemorySource::DeepSearchArtifact => 0.7,
            MemorySource::DistilledTrace => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MemoryContent {
    /// A settled judgment for a concrete pair.
    Precedent {
        query_text: String,
        product_id: ProductId,
        label: RelevanceLabel,
        #[serde(default)]
        citations: Vec<String>,
    },
    /// Verified entity to catalog-structure mapping.
    Mapping {
        entity: String,
        category: String,
        #[serde(default)]
        attributes: BTreeMap<String, String>,
    },
    RuleSuggestion {
        query_text: String,
        clause_draft: String,
        proposed_label: RelevanceLabel,
    },
}

impl MemoryContent {
    /// Text the entry is retrieved by.
    pub fn key_text(&self) -> &str {
        match self {
            MemoryContent::Precedent { query_text, .. } => query_text,
            MemoryContent::Mapping { entity, .. } => entity,
            MemoryContent::RuleSuggestion { query_text, .. } => query_text,
        }
    }

    fn validate(&self) -> Result<()> {
        let empty = match self {
            MemoryContent::Precedent { query_text, product_id, .. } => query_text.trim().is_empty() || product_id.is_empty(),
            MemoryContent::Mapping { entity, category, .. } => entity.trim().is_empty() || category.is_empty(),
            MemoryContent::RuleSuggestion { query_text, clause_draft, .. } => query_text.trim().is_empty() || clause_draft.is_empty(),
        };
        if empty {
            Err(Error::InvalidConfig("memory content has empty required fields".into()))
        } else {
            Ok(())
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            MemoryContent::Precedent { .. } => "precedent",
            MemoryContent::Mapping { .. } => "mapping",
            MemoryContent::RuleSuggestion { .. } => "rule_suggestion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub id: String,
    pub source: MemorySource,
    pub content: MemoryContent,
    /// Kept in the sidecar file, not in the entry records.
    #[serde(skip)]
    pub embedding: EmbeddingVector,
    pub created_at: Tick,
    pub authority: f64,
}

impl MemoryEntry {
    pub fn summary(&self) -> String {
        match &self.content {
            MemoryContent::Precedent { query_text, product_id, label, .. } => {
                format!("[{}] '{query_text}' x {product_id} settled at {label}", self.id)
            }
            MemoryContent::Mapping { entity, category, attributes } => {
                let attrs: Vec<String> = attributes.iter().map(|(k, v)| format!("{k}={v}")).collect();
                format!("[{}] {entity} -> {category} {}", self.id, attrs.join(","))
            }
            MemoryContent::RuleSuggestion { query_text, proposed_label, .. } => {
                format!("[{}] rule suggestion from '{query_text}' proposing {proposed_label}", self.id)
            }
        }
    }
}

/// A new entry before the store assigns id and embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct NewEntry {
    pub source: MemorySource,
    pub content: MemoryContent,
    pub created_at: Tick,
    pub authority: Option<f64>,
}

impl NewEntry {
    pub fn new(source: MemorySource, content: MemoryContent, created_at: Tick) -> Self {
        Self { source, content, created_at, authority: None }
    }
}

/// Signed feature hashing over unigrams and bigrams, L2-normalized.
pub fn embed_text(text: &str) -> EmbeddingVector {
    let toks = tokenize(text);
    let mut v = vec![0.0; EMBED_DIM];
    let mut add = |s: &str, w: f64| {
        let h = fnv1a(s.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % EMBED_DIM as u64) as usize] += sign * w;
    };
    for t in &toks {
        add(t, 1.0);
    }
    for w in toks.windows(2) {
        add(&format!("{} {}", w[0], w[1]), 0.5);
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    id: String,
    vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDigest {
    pub cluster: String,
    pub entry_ids: Vec<String>,
    pub text: String,
}

/// Append-only memory. With a directory attached every write is appended
/// to `memory.jsonl` and `memory.emb.jsonl`.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    dir: Option<PathBuf>,
    entries: Vec<MemoryEntry>,
    by_digest: HashMap<String, usize>,
}

pub const ENTRIES_FILE: &str = "memory.jsonl";
pub const EMBEDDINGS_FILE: &str = "memory.emb.jsonl";

fn content_digest(source: MemorySource, content: &MemoryContent) -> Result<String> {
    Ok(sha256_hex(records::to_line(&(source, content))?.as_bytes()))
}

impl MemoryStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let entries: Vec<MemoryEntry> = records::read_jsonl_or_empty(&dir.join(ENTRIES_FILE))?;
        let side: Vec<Sidecar> = records::read_jsonl_or_empty(&dir.join(EMBEDDINGS_FILE))?;
        let vecs: HashMap<String, EmbeddingVector> = side.into_iter().map(|s| (s.id, s.vector)).collect();
        let mut store = Self { dir: Some(dir.to_path_buf()), ..Default::default() };
        for mut e in entries {
            // a missing sidecar row is recomputed; embeddings are a pure function of content
            e.embedding = vecs.get(&e.id).cloned().unwrap_or_else(|| embed_text(e.content.key_text()));
            store.by_digest.insert(content_digest(e.source, &e.content)?, store.entries.len());
            store.entries.push(e);
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&MemoryEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Returns the id and whether a new entry was stored. Duplicate content
    /// from the same source returns the existing id.
    pub fn write_entry(&mut self, entry: NewEntry) -> Result<(String, bool)> {
        entry.content.validate()?;
        let digest = content_digest(entry.source, &entry.content)?;
        if let Some(&i) = self.by_digest.get(&digest) {
            return Ok((self.entries[i].id.clone(), false));
        }
        let authority = entry.authority.unwrap_or_else(|| entry.source.default_authority()).clamp(0.0, 1.0);
        let e = MemoryEntry {
            id: format!("m{:06}", self.entries.len() + 1),
            source: entry.source,
            embedding: embed_text(entry.content.key_text()),
            content: entry.content,
            created_at: entry.created_at,
            authority,
        };
        if let Some(dir) = &self.dir {
            std::fs::create_dir_all(dir)?;
            records::append_jsonl(&dir.join(ENTRIES_FILE), &e)?;
            records::append_jsonl(&dir.join(EMBEDDINGS_FILE), &Sidecar { id: e.id.clone(), vector: e.embedding.clone() })?;
        }
        self.by_digest.insert(digest, self.entries.len());
        let id = e.id.clone();
        self.entries.push(e);
        Ok((id, true))
    }

    /// Top-k by cosine similarity, ties by id. Exhaustive scan.
    pub fn retrieve(&self, query_text: &str, k: usize) -> Vec<(f64, &MemoryEntry)> {
        let q = embed_text(query_text);
        let mut scored: Vec<(f64, &MemoryEntry)> =
            self.entries.iter().map(|e| (q.iter().zip(&e.embedding).map(|(a, b)| a * b).sum::<f64>(), e)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        scored.truncate(k);
        scored
    }

    /// Highest-authority precedent for an exact pair, most recent on ties.
    pub fn precedent_for(&self, query_text: &str, product_id: &str) -> Option<(&MemoryEntry, RelevanceLabel)> {
        let qt = query_text.trim().to_lowercase();
        let mut best: Option<(&MemoryEntry, RelevanceLabel)> = None;
        for (_, e) in self.retrieve(&qt, self.entries.len()) {
            if let MemoryContent::Precedent { query_text, product_id: pid, label, .. } = &e.content {
                if query_text.trim().to_lowercase() == qt && pid == product_id {
                    let better = match &best {
                        None => true,
                        Some((b, _)) => e.authority > b.authority || (e.authority == b.authority && e.id > b.id),
                    };
                    if better {
                        best = Some((e, *label));
                    }
                }
            }
        }
        best
    }

    /// Second summary level: entries grouped by kind and query head word.
    /// Cluster membership depends only on content, so clusters are stable
    /// under appends.
    pub fn cluster_digests(&self) -> Vec<ClusterDigest> {
        let mut groups: BTreeMap<String, Vec<&MemoryEntry>> = BTreeMap::new();
        for e in &self.entries {
            let head = tokenize(e.content.key_text()).last().cloned().unwrap_or_default();
            groups.entry(format!("{}:{head}", e.content.kind())).or_default().push(e);
        }
        groups
            .into_iter()
            .map(|(cluster, es)| {
                let mut hist = [0usize; 4];
                for e in &es {
                    if let MemoryContent::Precedent { label, .. } = &e.content {
                        hist[label.index()] += 1;
                    }
                }
                let text = format!("{} entries; precedent labels 0/1/2/3 = {:?}", es.len(), hist);
                ClusterDigest { cluster, entry_ids: es.iter().map(|e| e.id.clone()).collect(), text }
            })
            .collect()
    }

    /// Loads a store without binding it to the directory; later writes stay
    /// in memory until [`MemoryStore::save_to`].
    pub fn load_detached(dir: &Path) -> Result<Self> {
        let mut s = Self::open(dir)?;
        s.dir = None;
        Ok(s)
    }

    pub fn save_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        records::write_jsonl(&dir.join(ENTRIES_FILE), &self.entries)?;
        let side: Vec<Sidecar> = self.entries.iter().map(|e| Sidecar { id: e.id.clone(), vector: e.embedding.clone() }).collect();
        records::write_jsonl(&dir.join(EMBEDDINGS_FILE), &side)
    }

    /// Rewrites both files from the loaded state, dropping torn or repeated
    /// lines. Entry content is never altered.
    pub fn compact(&self) -> Result<usize> {
        let Some(dir) = &self.dir else { return Ok(self.entries.len()) };
        records::write_jsonl(&dir.join(ENTRIES_FILE), &self.entries)?;
        let side: Vec<Sidecar> = self.entries.iter().map(|e| Sidecar { id: e.id.clone(), vector: e.embedding.clone() }).collect();
        records::write_jsonl(&dir.join(EMBEDDINGS_FILE), &side)?;
        Ok(self.entries.len())
    }
}

/// A finalized case outcome offered for distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub case_id: String,
    pub query_text: String,
    pub product_id: ProductId,
    /// None while the case is still open.
    pub route: Option<RouteKind>,
    pub settled_label: Option<RelevanceLabel>,
    #[serde(default)]
    pub citations: Vec<String>,
    #[serde(default)]
    pub clause_draft: Option<String>,
    /// Settled by a human adjudicator.
    #[serde(default)]
    pub human: bool,
    pub at: Tick,
}

/// Mock summarizer: settled pairs become precedents, standard-evolution
/// signals additionally become rule suggestions.
pub fn distill(r: &Resolution) -> Result<Vec<NewEntry>> {
    let route = r.route.ok_or_else(|| Error::UnresolvedInput(format!("case {} has no routed outcome", r.case_id)))?;
    if route == RouteKind::Exempt && !r.human {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    if let Some(label) = r.settled_label {
        let mut e = NewEntry::new(
            MemorySource::DistilledTrace,
            MemoryContent::Precedent {
                query_text: r.query_text.trim().to_lowercase(),
                product_id: r.product_id.clone(),
                label,
                citations: r.citations.clone(),
            },
            r.at,
        );
        if r.human {
            e.authority = Some(MemorySource::ExpertCurated.default_authority());
        }
        out.push(e);
        if route == RouteKind::StandardEvolution {
            if let Some(draft) = &r.clause_draft {
                out.push(NewEntry::new(
                    MemorySource::DistilledTrace,
                    MemoryContent::RuleSuggestion { query_text: r.query_text.trim().to_lowercase(), clause_draft: draft.clone(), proposed_label: label },
                    r.at,
                ));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prec(q: &str, p: &str, l: u8) -> NewEntry {
        NewEntry::new(
            MemorySource::DistilledTrace,
            MemoryContent::Precedent { query_text: q.into(), product_id: p.into(), label: RelevanceLabel::new(l).unwrap(), citations: vec![] },
            1,
        )
    }

    #[test]
    fn write_read_and_duplicates() {
        let mut m = MemoryStore::in_memory();
        let (id, new) = m.write_entry(prec("red dress", "p1", 3)).unwrap();
        assert!(new);
        assert_eq!(m.get(&id).unwrap().content.key_text(), "red dress");
        let (id2, new2) = m.write_entry(prec("red dress", "p1", 3)).unwrap();
        assert_eq!((id2, new2, m.len()), (id.clone(), false, 1));
        assert_eq!(m.get(&id).unwrap().authority, 0.5);
    }

    #[test]
    fn retrieval_ranking() {
        let mut m = MemoryStore::in_memory();
        assert!(m.retrieve("anything", 3).is_empty());
        m.write_entry(prec("blue running shoes", "p1", 3)).unwrap();
        m.write_entry(prec("leather handbag", "p2", 2)).unwrap();
        m.write_entry(prec("wireless headphones", "p3", 0)).unwrap();
        let r = m.retrieve("leather handbag", 10);
        assert_eq!(r.len(), 3);
        assert_eq!(r[0].1.id, "m000002");
        assert!((r[0].0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn persistence_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = MemoryStore::open(dir.path()).unwrap();
        m.write_entry(prec("red dress", "p1", 3)).unwrap();
        m.write_entry(prec("yoga mat", "p2", 1)).unwrap();
        let back = MemoryStore::open(dir.path()).unwrap();
        assert_eq!(back.entries(), m.entries());
        back.compact().unwrap();
        assert_eq!(MemoryStore::open(dir.path()).unwrap().entries(), m.entries());
    }

    #[test]
    fn distillation_filters() {
        let mut r = Resolution {
            case_id: "c1".into(),
            query_text: "Red Dress".into(),
            product_id: "p1".into(),
            route: None,
            settled_label: Some(RelevanceLabel::STRONG),
            citations: vec![],
            clause_draft: None,
            human: false,
            at: 2,
        };
        assert!(matches!(distill(&r), Err(Error::UnresolvedInput(_))));
        r.route = Some(RouteKind::Exempt);
        assert!(distill(&r).unwrap().is_empty());
        r.route = Some(RouteKind::ModelError);
        let es = distill(&r).unwrap();
        assert_eq!(es.len(), 1);
        assert_eq!(es[0].source, MemorySource::DistilledTrace);
        r.human = true;
        assert_eq!(distill(&r).unwrap()[0].authority, Some(1.0));
    }

    #[test]
    fn precedent_lookup_prefers_authority() {
        let mut m = MemoryStore::in_memory();
        m.write_entry(prec("red dress", "p1", 3)).unwrap();
        let mut e = prec("red dress", "p1", 0);
        e.authority = Some(1.0);
        m.write_entry(e).unwrap();
        assert_eq!(m.precedent_for("Red Dress", "p1").unwrap().1, RelevanceLabel::IRRELEVANT);
        assert!(m.precedent_for("red dress", "p2").is_none());
    }
}
