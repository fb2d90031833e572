//! Part knowledge base, text embedding, exact flat L2 index, context
//! composition and answer generation.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::detpost::RankedObject;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fsutil;
use crate::geometry::BoundingBox;

pub const DEFAULT_DIM: usize = 64;
pub const NGRAM: usize = 3;
pub const INDEX_VERSION: u32 = 1;
pub const FALLBACK_ANSWER: &str = "No part knowledge is available for the current view.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeEntry {
    pub part_id: String,
    pub label: String,
    pub display_name: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, Value>,
    #[serde(default)]
    pub description: String,
}

/// Parses a knowledge base: a JSON array of entries.
pub fn parse_knowledge_base(text: &str) -> Result<Vec<KnowledgeEntry>> {
    let entries: Vec<KnowledgeEntry> =
        serde_json::from_str(text).map_err(|e| Error::json("knowledge base", e))?;
    validate_entries(&entries)?;
    Ok(entries)
}

pub fn load_knowledge_base(path: &Path) -> Result<Vec<KnowledgeEntry>> {
    let entries: Vec<KnowledgeEntry> = fsutil::read_json(path)?;
    validate_entries(&entries)?;
    Ok(entries)
}

fn validate_entries(entries: &[KnowledgeEntry]) -> Result<()> {
    let mut seen = HashSet::new();
    for e in entries {
        if e.label.trim().is_empty() {
            return Err(Error::Knowledge(format!("entry `{}` has an empty label", e.part_id)));
        }
        if !seen.insert(e.part_id.as_str()) {
            return Err(Error::Knowledge(format!("duplicate part_id `{}`", e.part_id)));
        }
    }
    Ok(())
}

/// Deterministic text embedding.
pub trait EmbedderProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
    /// Identifies the embedder in index files.
    fn spec(&self) -> EmbedderSpec;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub kind: String,
    pub dim: usize,
}

/// Character-trigram feature hashing.
///
/// The text is trimmed, lowercased and padded with one space on each side.
/// Every window of three characters is hashed with 64-bit FNV-1a over its
/// UTF-8 bytes and counted in bucket `hash % dim`. The count vector is
/// L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(HashingEmbedder { dim })
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder { dim: DEFAULT_DIM }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl EmbedderProvider for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(Error::Knowledge("cannot embed empty text".into()));
        }
        let padded: Vec<char> = format!(" {} ", trimmed.to_lowercase()).chars().collect();
        let mut counts = vec![0u32; self.dim];
        let mut buf = String::new();
        for w in padded.windows(NGRAM) {
            buf.clear();
            buf.extend(w);
            counts[(fnv1a64(buf.as_bytes()) % self.dim as u64) as usize] += 1;
        }
        let norm = counts.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>().sqrt();
        Ok(counts.iter().map(|&c| (c as f64 / norm) as f32).collect())
    }

    fn spec(&self) -> EmbedderSpec {
        EmbedderSpec {
            kind: "hashing-trigram-fnv1a64".into(),
            dim: self.dim,
        }
    }
}

/// Squared Euclidean distance accumulated in f64.
pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Exact nearest-neighbour index over dense vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    data: Vec<f32>,
}

impl FlatIndex {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("index dimension must be positive".into()));
        }
        Ok(FlatIndex { dim, data: Vec::new() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn add(&mut self, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Knowledge(format!(
                "vector of dimension {} added to a dimension-{} index",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Knowledge("vector has a non-finite component".into()));
        }
        self.data.extend_from_slice(v);
        Ok(())
    }

    /// The `top_m` nearest vectors as `(index, squared distance)`, ascending
    /// by distance then index.
    pub fn search(&self, query: &[f32], top_m: usize, exec: Exec) -> Result<Vec<(usize, f64)>> {
        if self.is_empty() {
            return Err(Error::Knowledge("query on an empty index".into()));
        }
        if top_m == 0 {
            return Err(Error::Knowledge("top_m must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Knowledge(format!(
                "query of dimension {} on a dimension-{} index",
                query.len(),
                self.dim
            )));
        }
        let n = self.len();
        let dist = exec.map_range(n, |i| squared_l2(self.vector(i), query));
        let mut order: Vec<(usize, f64)> = dist.into_iter().enumerate().collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        let m = top_m.min(n);
        if m < n {
            order.select_nth_unstable_by(m - 1, cmp);
            order.truncate(m);
        }
        order.sort_by(cmp);
        Ok(order)
    }
}

/// Entries with their label embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeIndex {
    pub embedder: EmbedderSpec,
    pub entries: Vec<KnowledgeEntry>,
    pub index: FlatIndex,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    version: u32,
    embedder: EmbedderSpec,
    entries: Vec<KnowledgeEntry>,
    vectors: Vec<Vec<f32>>,
}

/// Embeds each entry's label, keeping input order.
pub fn build_index(
    entries: &[KnowledgeEntry],
    embedder: &dyn EmbedderProvider,
    exec: Exec,
) -> Result<KnowledgeIndex> {
    if entries.is_empty() {
        return Err(Error::Knowledge("knowledge base is empty".into()));
    }
    validate_entries(entries)?;
    let vectors = exec.try_map_range(entries.len(), |i| embedder.embed(&entries[i].label))?;
    let mut index = FlatIndex::new(embedder.dim())?;
    for v in &vectors {
        index.add(v)?;
    }
    Ok(KnowledgeIndex {
        embedder: embedder.spec(),
        entries: entries.to_vec(),
        index,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub part_id: String,
    pub label: String,
    pub display_name: String,
    pub description: String,
    pub attributes: BTreeMap<String, Value>,
    pub distance: f64,
}

impl KnowledgeIndex {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = IndexFile {
            version: INDEX_VERSION,
            embedder: self.embedder.clone(),
            entries: self.entries.clone(),
            vectors: (0..self.index.len()).map(|i| self.index.vector(i).to_vec()).collect(),
        };
        fsutil::write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: IndexFile = fsutil::read_json(path)?;
        if file.version != INDEX_VERSION {
            return Err(Error::Knowledge(format!(
                "{}: unsupported index version {}",
                path.display(),
                file.version
            )));
        }
        if file.vectors.len() != file.entries.len() {
            return Err(Error::Knowledge(format!(
                "{}: {} vectors for {} entries",
                path.display(),
                file.vectors.len(),
                file.entries.len()
            )));
        }
        validate_entries(&file.entries)?;
        let mut index = FlatIndex::new(file.embedder.dim)?;
        for v in &file.vectors {
            index.add(v)?;
        }
        Ok(KnowledgeIndex {
            embedder: file.embedder,
            entries: file.entries,
            index,
        })
    }

    pub fn check_embedder(&self, embedder: &dyn EmbedderProvider) -> Result<()> {
        if embedder.spec() != self.embedder {
            return Err(Error::Knowledge(format!(
                "index built with {:?}, queried with {:?}",
                self.embedder,
                embedder.spec()
            )));
        }
        Ok(())
    }

    pub fn query(
        &self,
        embedder: &dyn EmbedderProvider,
        text: &str,
        top_m: usize,
        exec: Exec,
    ) -> Result<Vec<Retrieved>> {
        self.check_embedder(embedder)?;
        let q = embedder.embed(text)?;
        Ok(self
            .index
            .search(&q, top_m, exec)?
            .into_iter()
            .map(|(i, distance)| {
                let e = &self.entries[i];
                Retrieved {
                    part_id: e.part_id.clone(),
                    label: e.label.clone(),
                    display_name: e.display_name.clone(),
                    description: e.description.clone(),
                    attributes: e.attributes.clone(),
                    distance,
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextItem {
    pub rank: usize,
    pub label: String,
    pub bbox: BoundingBox,
    pub depth: f64,
    pub confidence: f64,
    pub matches: Vec<Retrieved>,
    /// Set when no entry is close enough to the object's label.
    pub no_knowledge: bool,
}

/// Retrieved part knowledge for the ranked objects, in depth order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub items: Vec<ContextItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub per_object_m: usize,
    /// Matches farther than this squared distance are discarded.
    pub max_distance: Option<f64>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            per_object_m: 1,
            max_distance: None,
        }
    }
}

pub fn compose_context(
    objects: &[RankedObject],
    kb: &KnowledgeIndex,
    embedder: &dyn EmbedderProvider,
    config: &RetrievalConfig,
    exec: Exec,
) -> Result<Context> {
    if objects.is_empty() {
        return Err(Error::Knowledge("no ranked objects to describe".into()));
    }
    if config.per_object_m == 0 {
        return Err(Error::Config("per_object_m must be at least 1".into()));
    }
    let mut items = Vec::with_capacity(objects.len());
    for (rank, o) in objects.iter().enumerate() {
        let mut matches = kb
            .query(embedder, &o.label, config.per_object_m, exec)
            .map_err(|e| Error::Knowledge(format!("object {} (`{}`): {e}", rank + 1, o.label)))?;
        if let Some(max) = config.max_distance {
            matches.retain(|m| m.distance <= max);
        }
        items.push(ContextItem {
            rank: rank + 1,
            label: o.label.clone(),
            bbox: o.bbox,
            depth: o.depth,
            confidence: o.confidence,
            no_knowledge: matches.is_empty(),
            matches,
        });
    }
    Ok(Context { items })
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl Context {
    /// Line-oriented rendering handed to responders.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for it in &self.items {
            out.push_str(&format!(
                "object {} label={} depth={} confidence={}\n",
                it.rank, it.label, it.depth, it.confidence
            ));
            if it.no_knowledge {
                out.push_str("  no knowledge\n");
            }
            for m in &it.matches {
                out.push_str(&format!(
                    "  entry {} \"{}\" distance={}\n",
                    m.part_id, m.display_name, m.distance
                ));
                if !m.description.is_empty() {
                    out.push_str(&format!("    description: {}\n", m.description));
                }
                for (k, v) in &m.attributes {
                    out.push_str(&format!("    {k}: {}\n", value_text(v)));
                }
            }
        }
        out
    }
}

/// Produces an answer from a query and its context.
pub trait Responder: Send + Sync {
    fn respond(&self, query: &str, context: &Context) -> Result<String>;
}

/// Deterministic answer built from the first object's best entry.
///
/// Attributes whose key shares a word with the query are listed first.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateResponder;

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.len() > 2)
        .map(str::to_lowercase)
        .collect()
}

impl Responder for TemplateResponder {
    fn respond(&self, query: &str, context: &Context) -> Result<String> {
        if query.trim().is_empty() {
            return Err(Error::InvalidInput("query text is empty".into()));
        }
        let Some(first) = context.items.first() else {
            return Ok(FALLBACK_ANSWER.to_owned());
        };
        let Some(entry) = first.matches.first() else {
            return Ok(FALLBACK_ANSWER.to_owned());
        };
        let mut s = format!(
            "The closest part is {} ({}) at depth {:.3}.",
            entry.display_name, entry.part_id, first.depth
        );
        if !entry.description.is_empty() {
            s.push(' ');
            s.push_str(entry.description.trim());
            if !s.ends_with('.') {
                s.push('.');
            }
        }
        let q = words(query);
        let (mut hit, mut rest): (Vec<_>, Vec<_>) = entry
            .attributes
            .iter()
            .partition(|(k, _)| words(k).iter().any(|w| q.contains(w)));
        hit.append(&mut rest);
        if !hit.is_empty() {
            let facts: Vec<String> =
                hit.iter().map(|(k, v)| format!("{k}: {}", value_text(v))).collect();
            s.push_str(&format!(" Details: {}.", facts.join("; ")));
        }
        let others: Vec<String> = context.items[1..]
            .iter()
            .map(|it| match it.matches.first() {
                Some(m) => format!("{} at depth {:.3}", m.display_name, it.depth),
                None => format!("{} at depth {:.3} (no knowledge)", it.label, it.depth),
            })
            .collect();
        if !others.is_empty() {
            s.push_str(&format!(" Also in view: {}.", others.join(", ")));
        }
        Ok(s)
    }
}

/// Runs an external program that reads `{"q": ..., "context": ...}` JSON on
/// stdin and prints the answer on stdout.
#[derive(Debug, Clone)]
pub struct CommandResponder {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl Responder for CommandResponder {
    fn respond(&self, query: &str, context: &Context) -> Result<String> {
        let ctx = || self.program.display().to_string();
        let payload = serde_json::json!({ "q": query, "context": context });
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Provider {
                context: ctx(),
                message: e.to_string(),
            })?;
        child
            .stdin
            .take()
            .expect("piped")
            .write_all(payload.to_string().as_bytes())
            .map_err(|e| Error::Provider {
                context: ctx(),
                message: e.to_string(),
            })?;
        let out = child.wait_with_output().map_err(|e| Error::Provider {
            context: ctx(),
            message: e.to_string(),
        })?;
        if !out.status.success() {
            return Err(Error::Provider {
                context: ctx(),
                message: format!("exited with {}", out.status),
            });
        }
        Ok(String::from_utf8_lossy(&out.stdout).trim().to_owned())
    }
}
