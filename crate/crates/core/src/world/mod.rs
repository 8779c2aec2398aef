//! Seeded synthetic e-commerce world.
//!
//! A world is a pure function of its [`WorldConfig`]: catalog, query stream
//! with traffic weights, typo table, external knowledge, the hidden oracle
//! standard, a noisy initial training corpus, held-out evaluation pairs and
//! a serving-side feature view with injected upstream defects.

pub mod lexicon;
pub mod oracle;
pub mod tools;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{CategoryId, Product, ProductId, Query, QueryId, RelevanceLabel, StandardsDoc};
use crate::error::{Error, Result};
use crate::model::corpus::{Sample, SampleProvenance};
use crate::model::query::{parse_query, Lexicon, WorldLexicons};
use crate::model::QueryStructure;
use crate::records;
use crate::util::{rng_for, sha256_hex};

pub use oracle::OracleStandard;
pub use tools::{simulate_tool, ToolCall, ToolHit, ToolName, ToolResult};

use lexicon::{LeafSpec, ENTITIES, LEAVES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_products: usize,
    pub n_queries: usize,
    /// Fraction of the initial corpus whose labels are corrupted.
    pub noise_rate: f64,
    /// Fraction of products whose serving-side features are defective.
    pub defect_rate: f64,
    pub typo_rate: f64,
    pub spanish_rate: f64,
    pub kids_rate: f64,
    pub heldout_fraction: f64,
    pub samples_per_query: usize,
    pub heldout_samples_per_query: usize,
    /// Head/tail skew of the traffic distribution.
    pub zipf_exponent: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_products: 2000,
            n_queries: 200,
            noise_rate: 0.2,
            defect_rate: 0.02,
            typo_rate: 0.08,
            spanish_rate: 0.12,
            kids_rate: 0.12,
            heldout_fraction: 0.2,
            samples_per_query: 16,
            heldout_samples_per_query: 12,
            zipf_exponent: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_products == 0 || self.n_queries == 0 {
            return Err(Error::InvalidConfig("world sizes must be positive".into()));
        }
        if self.samples_per_query == 0 || self.heldout_samples_per_query == 0 {
            return Err(Error::InvalidConfig("per-query sample counts must be positive".into()));
        }
        for (name, r) in [
            ("noise_rate", self.noise_rate),
            ("defect_rate", self.defect_rate),
            ("typo_rate", self.typo_rate),
            ("spanish_rate", self.spanish_rate),
            ("kids_rate", self.kids_rate),
            ("heldout_fraction", self.heldout_fraction),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryNode {
    pub id: CategoryId,
    pub parent: Option<CategoryId>,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldQuery {
    pub query: Query,
    pub weight: f64,
    /// True intent used by the oracle.
    pub intent: QueryStructure,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub entity: String,
    pub facts: Vec<String>,
    pub category: CategoryId,
    pub attributes: BTreeMap<String, String>,
    pub image_ref: String,
    pub visual_tags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureDefect {
    SeoCheat,
    WrongCategory,
    MissingBrand,
}

impl FeatureDefect {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureDefect::SeoCheat => "seo_cheat",
            FeatureDefect::WrongCategory => "wrong_category",
            FeatureDefect::MissingBrand => "missing_brand",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub query_id: QueryId,
    pub product_id: ProductId,
    pub label: RelevanceLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectRecord {
    pub product_id: ProductId,
    pub defect: FeatureDefect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypoRecord {
    pub typo: String,
    pub corrected: String,
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub categories: Vec<CategoryNode>,
    /// Pristine catalog (evaluation view).
    pub products: Vec<Product>,
    /// Catalog as seen by serving features; differs on defective products.
    pub serving_products: Vec<Product>,
    pub defects: BTreeMap<ProductId, FeatureDefect>,
    pub queries: Vec<WorldQuery>,
    pub typo_table: BTreeMap<String, String>,
    pub external_knowledge: BTreeMap<String, KnowledgeEntry>,
    pub oracle: OracleStandard,
    pub initial_corpus: Vec<Sample>,
    pub heldout: Vec<EvalPair>,
    lexicons: WorldLexicons,
    product_index: BTreeMap<ProductId, usize>,
    query_index: BTreeMap<QueryId, usize>,
}

const SPECIAL_QUERIES: &[(&str, &str)] = &[
    ("running shoes", "en"),
    ("nike basketball shoes", "en"),
    ("nike high-top basketball shoes", "en"),
    ("blusas de mujer sexy", "es"),
    ("lorax costume", "en"),
    ("grinch costume", "en"),
    ("cookie monster costume", "en"),
    ("womens blouses", "en"),
    ("basketball shoes", "en"),
];

struct ProductDraft {
    leaf: &'static str,
    brand: Option<&'static str>,
    attrs: Vec<(&'static str, &'static str)>,
    title: Option<&'static str>,
}

fn special_products() -> Vec<ProductDraft> {
    let d = |leaf, brand, attrs: &[(&'static str, &'static str)]| ProductDraft { leaf, brand, attrs: attrs.to_vec(), title: None };
    vec![
        d("running_shoes", Some("puma"), &[("audience", "kids")]),
        d("basketball_shoes", Some("nike"), &[]),
        ProductDraft {
            leaf: "womens_tanks_camis",
            brand: None,
            attrs: vec![("color", "white"), ("style", "sexy")],
            title: Some("Plain Summer All Seasons"),
        },
        d("mascot_suits", Some("rubies"), &[("color", "orange"), ("texture", "furry")]),
        d("mascot_suits", Some("partyking"), &[("color", "orange"), ("texture", "furry")]),
        d("mascot_suits", None, &[("color", "orange"), ("texture", "furry")]),
        d("mascot_suits", Some("rubies"), &[("color", "green"), ("texture", "furry")]),
        d("mascot_suits", None, &[("color", "green"), ("texture", "furry")]),
        d("mascot_suits", Some("partyking"), &[("color", "blue"), ("texture", "furry")]),
        d("basketball_shoes", Some("adidas"), &[("color", "white")]),
        d("soccer_shoes", Some("nike"), &[("color", "black")]),
        d("womens_blouses", Some("zara"), &[("style", "sexy"), ("color", "red")]),
    ]
}

fn render_title(leaf: &LeafSpec, brand: Option<&str>, attrs: &BTreeMap<String, String>) -> String {
    let mut parts: Vec<String> = Vec::new();
    if let Some(b) = brand {
        parts.push(b.to_string());
    }
    if attrs.get(oracle::AUDIENCE).map(String::as_str) == Some("kids") {
        parts.push("kids".into());
    }
    for class in leaf.attr_classes {
        if let Some(v) = attrs.get(*class) {
            parts.push(v.clone());
        }
    }
    parts.push(leaf.title_term.to_string());
    parts.join(" ")
}

fn render_query(leaf: &LeafSpec, intent: &QueryStructure, spanish: bool) -> String {
    let mut parts: Vec<String> = Vec::new();
    let kids = intent.attributes.get(oracle::AUDIENCE).is_some();
    if spanish {
        parts.push(leaf.term_es.to_string());
        if let Some(b) = &intent.brand {
            parts.push(b.clone());
        }
        for class in leaf.attr_classes {
            if let Some(v) = intent.attributes.get(*class) {
                parts.push(lexicon::value_es(class, v).to_string());
            }
        }
        if kids {
            parts.push("ninos".into());
        }
    } else {
        if kids {
            parts.push("kids".into());
        }
        if let Some(b) = &intent.brand {
            parts.push(b.clone());
        }
        for class in leaf.attr_classes {
            if let Some(v) = intent.attributes.get(*class) {
                parts.push(v.clone());
            }
        }
        parts.push(leaf.term_en.to_string());
    }
    parts.join(" ")
}

/// Renders an intent as query text in the world's phrasing. None when the
/// intent has no known leaf category.
pub fn render_intent(intent: &QueryStructure, spanish: bool) -> Option<String> {
    let leaf = lexicon::leaf(intent.category()?)?;
    Some(render_query(leaf, intent, spanish))
}

fn visual_tags(leaf: &LeafSpec, attrs: &BTreeMap<String, String>) -> Vec<String> {
    let mut tags = Vec::new();
    for k in ["color", "texture"] {
        if let Some(v) = attrs.get(k) {
            tags.push(v.clone());
        }
    }
    tags.push(leaf.visual_tag.to_string());
    tags
}

fn make_product(id: String, draft: &ProductDraft) -> Product {
    let leaf = lexicon::leaf(draft.leaf).expect("lexicon leaf");
    let attributes: BTreeMap<String, String> = draft.attrs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let title = match draft.title {
        Some(t) => t.to_string(),
        None => render_title(leaf, draft.brand, &attributes),
    };
    Product {
        id,
        title,
        category_path: vec![leaf.dept.to_string(), leaf.id.to_string()],
        brand: draft.brand.map(str::to_string),
        visual_tags: visual_tags(leaf, &attributes),
        attributes,
    }
}

fn random_product<R: Rng>(rng: &mut R, kids_rate: f64) -> ProductDraft {
    let leaf = &LEAVES[rng.gen_range(0..LEAVES.len())];
    let brands = lexicon::brands_for(leaf.dept);
    let brand = if !brands.is_empty() && rng.gen_bool(0.85) { Some(brands[rng.gen_range(0..brands.len())]) } else { None };
    let mut attrs = Vec::new();
    for class in leaf.attr_classes {
        let vals = lexicon::values_for(leaf.id, class);
        if !vals.is_empty() && rng.gen_bool(0.7) {
            attrs.push((*class, vals[rng.gen_range(0..vals.len())]));
        }
    }
    if leaf.audience_capable && rng.gen_bool(kids_rate) {
        attrs.push((oracle::AUDIENCE, "kids"));
    }
    ProductDraft { leaf: leaf.id, brand, attrs, title: None }
}

fn random_intent<R: Rng>(rng: &mut R, kids_rate: f64) -> (&'static LeafSpec, QueryStructure) {
    let leaf = &LEAVES[rng.gen_range(0..LEAVES.len())];
    let brands = lexicon::brands_for(leaf.dept);
    let mut s = QueryStructure { category_intent: vec![leaf.id.to_string()], ..Default::default() };
    if !brands.is_empty() && rng.gen_bool(0.4) {
        s.brand = Some(brands[rng.gen_range(0..brands.len())].to_string());
    }
    let n_attrs = [0usize, 0, 1, 1, 2][rng.gen_range(0..5)];
    let mut classes: Vec<&str> = leaf.attr_classes.to_vec();
    classes.shuffle(rng);
    for class in classes.into_iter().take(n_attrs) {
        let vals = lexicon::values_for(leaf.id, class);
        if !vals.is_empty() {
            s.attributes.insert(class.to_string(), vals[rng.gen_range(0..vals.len())].to_string());
        }
    }
    if leaf.audience_capable && rng.gen_bool(kids_rate * 0.5) {
        s.attributes.insert(oracle::AUDIENCE.into(), "kids".into());
    }
    (leaf, s)
}

/// Single-character edit of the longest lexicon word, avoiding other words.
fn make_typo<R: Rng>(rng: &mut R, text: &str, lex: &Lexicon) -> Option<String> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    let (idx, word) = toks.iter().enumerate().filter(|(_, w)| w.len() >= 5).max_by_key(|(i, w)| (w.len(), usize::MAX - i))?;
    let chars: Vec<char> = word.chars().collect();
    let pos = rng.gen_range(1..chars.len() - 1);
    let mut edited: Vec<char> = chars.clone();
    if rng.gen_bool(0.5) {
        edited.remove(pos);
    } else {
        edited.insert(pos, chars[pos]);
    }
    let edited: String = edited.into_iter().collect();
    if lex.contains_word(&edited) {
        return None;
    }
    let mut out: Vec<String> = toks.iter().map(|s| s.to_string()).collect();
    out[idx] = edited;
    Some(out.join(" "))
}

pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let seed = config.seed;
    let lex = Lexicon::catalog();

    let categories = {
        let mut nodes = Vec::new();
        for (dept, _) in lexicon::DEPARTMENTS {
            nodes.push(CategoryNode { id: dept.to_string(), parent: None, name: dept.to_string() });
        }
        for leaf in LEAVES {
            nodes.push(CategoryNode { id: leaf.id.into(), parent: Some(leaf.dept.into()), name: leaf.term_en.into() });
        }
        nodes
    };

    // Catalog
    let mut rng = rng_for(seed, &["products"]);
    let mut drafts = special_products();
    drafts.truncate(config.n_products);
    while drafts.len() < config.n_products {
        drafts.push(random_product(&mut rng, config.kids_rate));
    }
    let products: Vec<Product> =
        drafts.iter().enumerate().map(|(i, d)| make_product(format!("p{i:05}"), d)).collect();

    // Knowledge
    let external_knowledge: BTreeMap<String, KnowledgeEntry> = ENTITIES
        .iter()
        .map(|e| {
            let entry = KnowledgeEntry {
                entity: e.name.into(),
                facts: vec![e.fact.into()],
                category: e.leaf.into(),
                attributes: e.attributes.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
                image_ref: e.image_ref.into(),
                visual_tags: e.visual_tags.iter().map(|s| s.to_string()).collect(),
            };
            (e.name.to_string(), entry)
        })
        .collect();

    // Queries
    let mut rng = rng_for(seed, &["queries"]);
    let wl = WorldLexicons { lexicon: lex.clone(), typo_table: BTreeMap::new() };
    let mut texts: BTreeSet<String> = BTreeSet::new();
    let mut drafts_q: Vec<(String, String, QueryStructure, Option<String>, bool)> = Vec::new();
    for (text, lang) in SPECIAL_QUERIES.iter().take(config.n_queries) {
        let entity = external_knowledge.keys().find(|e| text.contains(e.as_str())).cloned();
        let intent = match &entity {
            Some(e) => intent_from_knowledge(&external_knowledge[e]),
            None => parse_query(text, &wl),
        };
        texts.insert(text.to_string());
        drafts_q.push((text.to_string(), lang.to_string(), intent, entity, true));
    }
    let mut typo_table = BTreeMap::new();
    let mut attempts = 0;
    while drafts_q.len() < config.n_queries {
        attempts += 1;
        if attempts > config.n_queries * 200 {
            return Err(Error::InvalidConfig("cannot generate enough distinct queries".into()));
        }
        let (leaf, intent) = random_intent(&mut rng, config.kids_rate);
        let spanish = rng.gen_bool(config.spanish_rate);
        let mut text = render_query(leaf, &intent, spanish);
        if texts.contains(&text) {
            continue;
        }
        if rng.gen_bool(config.typo_rate) {
            if let Some(t) = make_typo(&mut rng, &text, &lex) {
                if texts.contains(&t) {
                    continue;
                }
                typo_table.insert(t.clone(), text.clone());
                text = t;
            }
        }
        texts.insert(text.clone());
        drafts_q.push((text, if spanish { "es".into() } else { "en".into() }, intent, None, false));
    }

    // Traffic weights: shorter (more generic) queries sit at the head.
    let mut order: Vec<(usize, f64, usize)> = drafts_q
        .iter()
        .enumerate()
        .map(|(i, (_, _, intent, _, _))| {
            let complexity = intent.attributes.len() + usize::from(intent.brand.is_some());
            (complexity, rng.gen::<f64>(), i)
        })
        .collect();
    order.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut weights = vec![0.0; drafts_q.len()];
    for (rank, (_, _, i)) in order.iter().enumerate() {
        weights[*i] = 1.0 / ((rank + 1) as f64).powf(config.zipf_exponent);
    }
    let total: f64 = weights.iter().sum();

    // Held-out split over generated (non-special) queries.
    let mut generated: Vec<usize> = (0..drafts_q.len()).filter(|&i| !drafts_q[i].4).collect();
    generated.shuffle(&mut rng_for(seed, &["split"]));
    let n_heldout = ((config.heldout_fraction * drafts_q.len() as f64).round() as usize).min(generated.len());
    let heldout_set: BTreeSet<usize> = generated.into_iter().take(n_heldout).collect();

    let queries: Vec<WorldQuery> = drafts_q
        .into_iter()
        .enumerate()
        .map(|(i, (text, lang, intent, entity, _))| WorldQuery {
            query: Query { id: format!("q{i:04}"), text, language: lang, structure: None },
            weight: weights[i] / total,
            intent,
            split: if heldout_set.contains(&i) { Split::Heldout } else { Split::Train },
            entity,
        })
        .collect();

    let oracle = OracleStandard::default_world();
    let mut world = World {
        config: config.clone(),
        categories,
        serving_products: products.clone(),
        products,
        defects: BTreeMap::new(),
        queries,
        typo_table: typo_table.clone(),
        external_knowledge,
        oracle,
        initial_corpus: Vec::new(),
        heldout: Vec::new(),
        lexicons: WorldLexicons { lexicon: lex, typo_table },
        product_index: BTreeMap::new(),
        query_index: BTreeMap::new(),
    };
    world.rebuild_indexes();

    world.initial_corpus = world.build_initial_corpus()?;
    world.heldout = world.build_heldout();
    world.inject_defects();

    if !world.hidden_clause_reachable() {
        return Err(Error::InvalidConfig("no sampled pair is decided by a hidden clause".into()));
    }
    Ok(world)
}

pub fn intent_from_knowledge(k: &KnowledgeEntry) -> QueryStructure {
    QueryStructure {
        category_intent: vec![k.category.clone()],
        brand: None,
        attributes: k.attributes.clone(),
        corrected_text: None,
    }
}

impl World {
    fn rebuild_indexes(&mut self) {
        self.product_index = self.products.iter().enumerate().map(|(i, p)| (p.id.clone(), i)).collect();
        self.query_index = self.queries.iter().enumerate().map(|(i, q)| (q.query.id.clone(), i)).collect();
        self.lexicons = WorldLexicons { lexicon: Lexicon::catalog(), typo_table: self.typo_table.clone() };
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn lexicons(&self) -> &WorldLexicons {
        &self.lexicons
    }

    pub fn published_standards(&self) -> StandardsDoc {
        self.oracle.published()
    }

    pub fn product(&self, id: &str) -> Result<&Product> {
        self.product_index.get(id).map(|&i| &self.products[i]).ok_or_else(|| Error::UnknownEntity(format!("product {id}")))
    }

    /// Product as the serving feature store sees it.
    pub fn serving_product(&self, id: &str) -> Result<&Product> {
        self.product_index
            .get(id)
            .map(|&i| &self.serving_products[i])
            .ok_or_else(|| Error::UnknownEntity(format!("product {id}")))
    }

    pub fn world_query(&self, id: &str) -> Result<&WorldQuery> {
        self.query_index.get(id).map(|&i| &self.queries[i]).ok_or_else(|| Error::UnknownEntity(format!("query {id}")))
    }

    pub fn query(&self, id: &str) -> Result<&Query> {
        self.world_query(id).map(|w| &w.query)
    }

    pub fn find_query_by_text(&self, text: &str) -> Option<&WorldQuery> {
        let t = text.trim().to_lowercase();
        self.queries.iter().find(|q| q.query.text == t)
    }

    pub fn queries_in(&self, split: Split) -> impl Iterator<Item = &WorldQuery> {
        self.queries.iter().filter(move |q| q.split == split)
    }

    pub fn products_in_leaf<'a>(&'a self, leaf: &str) -> impl Iterator<Item = &'a Product> + 'a {
        let leaf = leaf.to_string();
        self.products.iter().filter(move |p| p.leaf() == leaf)
    }

    pub fn entity_in(&self, text: &str) -> Option<&KnowledgeEntry> {
        let t = text.to_lowercase();
        self.external_knowledge.values().find(|k| t.contains(&k.entity))
    }

    /// Intent for any query: the stored intent for world queries, otherwise
    /// parsed structure enriched by entity knowledge.
    pub fn intent_for(&self, q: &Query) -> QueryStructure {
        if let Some(wq) = self.query_index.get(&q.id).map(|&i| &self.queries[i]) {
            if wq.query.text == q.text {
                return wq.intent.clone();
            }
        }
        match self.entity_in(&q.text) {
            Some(k) => intent_from_knowledge(k),
            None => parse_query(&q.text, &self.lexicons).normalized(),
        }
    }

    /// Ground-truth label for an in-world pair.
    pub fn oracle_label(&self, q: &Query, d: &Product) -> Result<RelevanceLabel> {
        let wq = self.world_query(&q.id)?;
        let product = self.product(&d.id)?;
        Ok(self.oracle.label(&wq.intent, product).0)
    }

    pub fn oracle_label_ids(&self, query_id: &str, product_id: &str) -> Result<RelevanceLabel> {
        let wq = self.world_query(query_id)?;
        Ok(self.oracle.label(&wq.intent, self.product(product_id)?).0)
    }

    /// Ground truth for derived queries (probes, perturbations) via [`World::intent_for`].
    pub fn oracle_label_derived(&self, q: &Query, product_id: &str) -> Result<RelevanceLabel> {
        Ok(self.oracle.label(&self.intent_for(q), self.product(product_id)?).0)
    }

    fn sample_products_for<R: Rng>(&self, rng: &mut R, intent: &QueryStructure, n: usize) -> Vec<usize> {
        let leaf = intent.category().unwrap_or("");
        let dept = lexicon::leaf(leaf).map(|l| l.dept).unwrap_or("");
        let same: Vec<usize> = (0..self.products.len()).filter(|&i| self.products[i].leaf() == leaf).collect();
        let sib: Vec<usize> = (0..self.products.len())
            .filter(|&i| self.products[i].category_path.first().map(String::as_str) == Some(dept) && self.products[i].leaf() != leaf)
            .collect();
        let n_same = (n * 9 + 8) / 16;
        let n_sib = (n * 3) / 16;
        let mut chosen: Vec<usize> = Vec::new();
        let take = |pool: &[usize], k: usize, rng: &mut R, chosen: &mut Vec<usize>| {
            let mut pool: Vec<usize> = pool.iter().copied().filter(|i| !chosen.contains(i)).collect();
            pool.shuffle(rng);
            chosen.extend(pool.into_iter().take(k));
        };
        take(&same, n_same, rng, &mut chosen);
        take(&sib, n_sib, rng, &mut chosen);
        let mut guard = 0;
        while chosen.len() < n.min(self.products.len()) && guard < n * 50 {
            guard += 1;
            let i = rng.gen_range(0..self.products.len());
            if !chosen.contains(&i) {
                chosen.push(i);
            }
        }
        chosen
    }

    fn build_initial_corpus(&self) -> Result<Vec<Sample>> {
        let mut samples = Vec::new();
        for wq in self.queries_in(Split::Train) {
            let mut rng = rng_for(self.seed(), &["corpus", &wq.query.id]);
            for pi in self.sample_products_for(&mut rng, &wq.intent, self.config.samples_per_query) {
                let p = &self.products[pi];
                samples.push(Sample {
                    id: format!("s0-{}-{}", wq.query.id, p.id),
                    query_id: wq.query.id.clone(),
                    query_text: wq.query.text.clone(),
                    product_id: p.id.clone(),
                    label: self.oracle.label(&wq.intent, p).0,
                    provenance: SampleProvenance::Initial,
                    cycle: 0,
                });
            }
        }
        // Systematic noise: whole query categories are corrupted first, the
        // way a misread guideline corrupts one annotation queue.
        let target = (self.config.noise_rate * samples.len() as f64).round() as usize;
        if target > 0 {
            let mut leaves: Vec<&str> = LEAVES.iter().map(|l| l.id).collect();
            leaves.shuffle(&mut rng_for(self.seed(), &["noise-leaves"]));
            let mut order: Vec<usize> = Vec::new();
            for leaf in leaves {
                let mut idx: Vec<usize> = (0..samples.len())
                    .filter(|&i| self.world_query(&samples[i].query_id).map(|q| q.intent.category() == Some(leaf)).unwrap_or(false))
                    .collect();
                idx.shuffle(&mut rng_for(self.seed(), &["noise-order", leaf]));
                order.extend(idx);
            }
            // queries without a category intent come last
            let covered: BTreeSet<usize> = order.iter().copied().collect();
            order.extend((0..samples.len()).filter(|i| !covered.contains(i)));
            for &i in order.iter().take(target) {
                let old = samples[i].label.value();
                samples[i].label = RelevanceLabel::new((old + 2) % 4)?;
            }
        }
        Ok(samples)
    }

    fn build_heldout(&self) -> Vec<EvalPair> {
        let mut out = Vec::new();
        for wq in self.queries_in(Split::Heldout) {
            let mut rng = rng_for(self.seed(), &["heldout", &wq.query.id]);
            for pi in self.sample_products_for(&mut rng, &wq.intent, self.config.heldout_samples_per_query) {
                let p = &self.products[pi];
                out.push(EvalPair { query_id: wq.query.id.clone(), product_id: p.id.clone(), label: self.oracle.label(&wq.intent, p).0 });
            }
        }
        out
    }

    fn inject_defects(&mut self) {
        let n_special = special_products().len();
        let mut rng = rng_for(self.seed(), &["defects"]);
        for i in n_special..self.products.len() {
            if !rng.gen_bool(self.config.defect_rate) {
                continue;
            }
            let p = self.products[i].clone();
            let mut kinds = vec![FeatureDefect::SeoCheat, FeatureDefect::WrongCategory];
            if p.brand.is_some() {
                kinds.push(FeatureDefect::MissingBrand);
            }
            let kind = kinds[rng.gen_range(0..kinds.len())];
            let other = loop {
                let l = &LEAVES[rng.gen_range(0..LEAVES.len())];
                if l.dept != p.category_path[0] {
                    break l;
                }
            };
            let served = &mut self.serving_products[i];
            match kind {
                FeatureDefect::SeoCheat => {
                    served.title = format!("{} {} {}", p.title, other.title_term, other.term_en);
                }
                FeatureDefect::WrongCategory => {
                    served.category_path = vec![other.dept.to_string(), other.id.to_string()];
                }
                FeatureDefect::MissingBrand => {
                    served.brand = None;
                }
            }
            self.defects.insert(p.id.clone(), kind);
        }
    }

    fn hidden_clause_reachable(&self) -> bool {
        let in_corpus = self.initial_corpus.iter().any(|s| {
            let q = &self.queries[self.query_index[&s.query_id]];
            self.oracle.hidden_decides(&q.intent, &self.products[self.product_index[&s.product_id]])
        });
        in_corpus
            || self.heldout.iter().any(|e| {
                let q = &self.queries[self.query_index[&e.query_id]];
                self.oracle.hidden_decides(&q.intent, &self.products[self.product_index[&e.product_id]])
            })
    }

    /// Samples traffic queries from the given split by weight.
    pub fn sample_queries(&self, split: Split, n: usize, stream: &str) -> Vec<&WorldQuery> {
        let pool: Vec<&WorldQuery> = self.queries_in(split).collect();
        if pool.is_empty() {
            return Vec::new();
        }
        let total: f64 = pool.iter().map(|q| q.weight).sum();
        let mut rng = rng_for(self.seed(), &["traffic", stream]);
        (0..n)
            .map(|_| {
                let mut x = rng.gen::<f64>() * total;
                for q in &pool {
                    x -= q.weight;
                    if x <= 0.0 {
                        return *q;
                    }
                }
                *pool.last().unwrap()
            })
            .collect()
    }

    /// Exports the world as a directory of record files.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        records::write_json(&dir.join("config.json"), &self.config)?;
        records::write_jsonl(&dir.join("categories.jsonl"), &self.categories)?;
        records::write_jsonl(&dir.join("products.jsonl"), &self.products)?;
        records::write_jsonl(&dir.join("serving_products.jsonl"), &self.serving_products)?;
        let defects: Vec<DefectRecord> =
            self.defects.iter().map(|(k, v)| DefectRecord { product_id: k.clone(), defect: *v }).collect();
        records::write_jsonl(&dir.join("defects.jsonl"), &defects)?;
        records::write_jsonl(&dir.join("queries.jsonl"), &self.queries)?;
        let typos: Vec<TypoRecord> =
            self.typo_table.iter().map(|(t, c)| TypoRecord { typo: t.clone(), corrected: c.clone() }).collect();
        records::write_jsonl(&dir.join("typos.jsonl"), &typos)?;
        records::write_jsonl(&dir.join("knowledge.jsonl"), self.external_knowledge.values())?;
        records::write_json(&dir.join("oracle.json"), &self.oracle)?;
        records::write_jsonl(&dir.join("initial_corpus.jsonl"), &self.initial_corpus)?;
        records::write_jsonl(&dir.join("heldout.jsonl"), &self.heldout)?;
        Ok(())
    }

    pub fn import(dir: &Path) -> Result<World> {
        let config: WorldConfig = records::read_json(&dir.join("config.json"))?;
        let defects: Vec<DefectRecord> = records::read_jsonl(&dir.join("defects.jsonl"))?;
        let typos: Vec<TypoRecord> = records::read_jsonl(&dir.join("typos.jsonl"))?;
        let knowledge: Vec<KnowledgeEntry> = records::read_jsonl(&dir.join("knowledge.jsonl"))?;
        let mut w = World {
            config,
            categories: records::read_jsonl(&dir.join("categories.jsonl"))?,
            products: records::read_jsonl(&dir.join("products.jsonl"))?,
            serving_products: records::read_jsonl(&dir.join("serving_products.jsonl"))?,
            defects: defects.into_iter().map(|d| (d.product_id, d.defect)).collect(),
            queries: records::read_jsonl(&dir.join("queries.jsonl"))?,
            typo_table: typos.into_iter().map(|t| (t.typo, t.corrected)).collect(),
            external_knowledge: knowledge.into_iter().map(|k| (k.entity.clone(), k)).collect(),
            oracle: records::read_json(&dir.join("oracle.json"))?,
            initial_corpus: records::read_jsonl(&dir.join("initial_corpus.jsonl"))?,
            heldout: records::read_jsonl(&dir.join("heldout.jsonl"))?,
            lexicons: WorldLexicons::default(),
            product_index: BTreeMap::new(),
            query_index: BTreeMap::new(),
        };
        w.rebuild_indexes();
        Ok(w)
    }

    /// Content digest of the canonical export.
    pub fn digest(&self) -> Result<String> {
        let mut buf = String::new();
        buf.push_str(&records::to_line(&self.config)?);
        buf.push_str(&records::encode(&self.categories)?);
        buf.push_str(&records::encode(&self.products)?);
        buf.push_str(&records::encode(&self.serving_products)?);
        buf.push_str(&records::encode(&self.queries)?);
        buf.push_str(&records::to_line(&self.typo_table)?);
        buf.push_str(&records::to_line(&self.external_knowledge)?);
        buf.push_str(&records::to_line(&self.defects)?);
        buf.push_str(&records::encode(&self.initial_corpus)?);
        buf.push_str(&records::encode(&self.heldout)?);
        Ok(sha256_hex(buf.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> WorldConfig {
        WorldConfig { seed, n_products: 400, n_queries: 60, ..Default::default() }
    }

    #[test]
    fn invalid_sizes_rejected() {
        let c = WorldConfig { n_products: 0, ..small(1) };
        assert!(matches!(generate_world(&c), Err(Error::InvalidConfig(_))));
        let c = WorldConfig { noise_rate: 1.5, ..small(1) };
        assert!(matches!(generate_world(&c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn categories_are_tree_paths() {
        let w = generate_world(&small(3)).unwrap();
        for p in &w.products {
            let leaf = w.categories.iter().find(|c| c.id == p.leaf()).expect("leaf exists");
            assert_eq!(leaf.parent.as_deref(), Some(p.category_path[0].as_str()));
        }
    }

    #[test]
    fn generated_query_text_parses_to_intent() {
        let w = generate_world(&small(5)).unwrap();
        for wq in &w.queries {
            if wq.entity.is_some() {
                continue;
            }
            let parsed = parse_query(&wq.query.text, w.lexicons()).normalized();
            assert_eq!(parsed, wq.intent, "query {}", wq.query.text);
        }
    }

    #[test]
    fn product_titles_parse_to_fields() {
        let w = generate_world(&small(5)).unwrap();
        for p in w.products.iter().skip(special_products().len()) {
            let s = w.lexicons().lexicon.extract(&p.title);
            assert_eq!(s.category(), Some(p.leaf()), "{}", p.title);
            assert_eq!(s.brand, p.brand);
            assert_eq!(s.attributes, p.attributes, "{}", p.title);
        }
    }

    #[test]
    fn export_import_roundtrip() {
        let w = generate_world(&small(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.export(dir.path()).unwrap();
        let back = World::import(dir.path()).unwrap();
        assert_eq!(back.digest().unwrap(), w.digest().unwrap());
    }

    #[test]
    fn unknown_entities_error() {
        let w = generate_world(&small(9)).unwrap();
        let q = Query::new("nope", "shoes", "en").unwrap();
        let p = w.products[0].clone();
        assert!(matches!(w.oracle_label(&q, &p), Err(Error::UnknownEntity(_))));
    }
}
