//! Typed text chunks over the graph, exact embedding stores, hierarchical
//! retrieval and grounded answering.
//!
//! Stores persist as `index/<type>.jsonl` (one record per row) plus
//! `index/<type>.vec`: `KVX1`, rows `u32`, dim `u32`, then row-major
//! little-endian `f32`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RagConfig;
use crate::graph::{GraphError, NodeRef, RoomNode, SceneGraph};
use crate::providers::{
    dot, ContextItem, ContextRole, HierQuery, ParsedQuery, Provider, ProviderError, ProviderExt,
};
use crate::util::tokenize;

#[derive(Debug, Error)]
pub enum RagError {
    #[error("{0} store is empty")]
    EmptyStore(&'static str),
    #[error("node {0} has no summary")]
    MissingSummary(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt index: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreKind {
    Floor,
    Room,
    Frame,
    Object,
    /// Keyframe image embeddings.
    KeyframeVisual,
    /// Best-view object image embeddings.
    ObjectVisual,
}

impl StoreKind {
    pub const ALL: [StoreKind; 6] = [
        StoreKind::Floor,
        StoreKind::Room,
        StoreKind::Frame,
        StoreKind::Object,
        StoreKind::KeyframeVisual,
        StoreKind::ObjectVisual,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StoreKind::Floor => "floor",
            StoreKind::Room => "room",
            StoreKind::Frame => "frame",
            StoreKind::Object => "object",
            StoreKind::KeyframeVisual => "keyframe_visual",
            StoreKind::ObjectVisual => "object_visual",
        }
    }
}

/// One indexed row. For text stores this is a chunk; `node` is the graph
/// node the chunk describes (the room, for frame chunks).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: StoreKind,
    pub node: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<usize>,
    pub text: String,
}

pub fn frame_chunk_id(room: &str, frame: usize) -> String {
    format!("{room}_k{frame}")
}

fn room_display(room: &RoomNode) -> &str {
    room.name.as_deref().unwrap_or(&room.id)
}

/// Floor, room, frame and object chunks in tree order.
pub fn chunk_graph(graph: &SceneGraph) -> Result<Vec<Chunk>, RagError> {
    let mut floors = Vec::new();
    let mut rooms = Vec::new();
    let mut frames = Vec::new();
    let mut objects = Vec::new();
    for floor in graph.floors() {
        let text = floor.summary.clone().ok_or_else(|| RagError::MissingSummary(floor.id.clone()))?;
        floors.push(Chunk {
            id: floor.id.clone(),
            kind: StoreKind::Floor,
            node: floor.id.clone(),
            frame: None,
            text,
        });
        for room in &floor.rooms {
            let text = room.summary.clone().ok_or_else(|| RagError::MissingSummary(room.id.clone()))?;
            rooms.push(Chunk {
                id: room.id.clone(),
                kind: StoreKind::Room,
                node: room.id.clone(),
                frame: None,
                text,
            });
            for kf in &room.keyframes {
                let mut text = kf.description.clone().unwrap_or_default();
                if !kf.tags.object_tags.is_empty() {
                    if !text.is_empty() {
                        text.push_str(". ");
                    }
                    text.push_str("Tags: ");
                    text.push_str(&kf.tags.object_tags.join(", "));
                }
                if tokenize(&text).is_empty() {
                    text = format!("keyframe {}", kf.frame);
                }
                frames.push(Chunk {
                    id: frame_chunk_id(&room.id, kf.frame),
                    kind: StoreKind::Frame,
                    node: room.id.clone(),
                    frame: Some(kf.frame),
                    text,
                });
            }
            for obj in &room.objects {
                let mut text = format!("{} in {}", obj.label, room_display(room));
                let others: Vec<&str> = obj.labels.keys().map(String::as_str).filter(|l| *l != obj.label).collect();
                if !others.is_empty() {
                    text.push_str(". Also seen as: ");
                    text.push_str(&others.join(", "));
                }
                if !obj.elements.is_empty() {
                    let parts: Vec<&str> = obj.elements.iter().map(|e| e.label.as_str()).collect();
                    text.push_str(". Parts: ");
                    text.push_str(&parts.join(", "));
                }
                objects.push(Chunk {
                    id: obj.id.clone(),
                    kind: StoreKind::Object,
                    node: obj.id.clone(),
                    frame: None,
                    text,
                });
            }
        }
    }
    Ok(floors.into_iter().chain(rooms).chain(frames).chain(objects).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub node: String,
    pub score: f64,
}

/// Flat exact store: records row-aligned with a row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Store {
    pub kind: StoreKind,
    pub records: Vec<Chunk>,
    pub dim: usize,
    pub matrix: Vec<f32>,
}

impl Store {
    pub fn empty(kind: StoreKind) -> Self {
        Store {
            kind,
            records: Vec::new(),
            dim: 0,
            matrix: Vec::new(),
        }
    }

    pub fn from_rows(kind: StoreKind, rows: Vec<(Chunk, Vec<f32>)>) -> Result<Self, RagError> {
        let dim = rows.first().map_or(0, |r| r.1.len());
        let mut s = Store::empty(kind);
        s.dim = dim;
        for (c, v) in rows {
            if v.len() != dim {
                return Err(RagError::Corrupt(format!("{} row {} has dim {} not {dim}", kind.as_str(), c.id, v.len())));
            }
            s.records.push(c);
            s.matrix.extend_from_slice(&v);
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    /// Rows whose record satisfies `keep`, in store order.
    pub fn subset(&self, keep: impl Fn(&Chunk) -> bool) -> Store {
        let mut s = Store::empty(self.kind);
        s.dim = self.dim;
        for (i, r) in self.records.iter().enumerate() {
            if keep(r) {
                s.records.push(r.clone());
                s.matrix.extend_from_slice(self.row(i));
            }
        }
        s
    }

    /// Exact top-k by dot product; ties go to the lexicographically
    /// smaller id.
    pub fn topk(&self, query: &[f32], k: usize) -> Result<Vec<Hit>, RagError> {
        assert!(k >= 1, "k must be at least 1");
        if self.is_empty() {
            return Err(RagError::EmptyStore(self.kind.as_str()));
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len()).map(|i| (dot(self.row(i), query), i)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| self.records[a.1].id.cmp(&self.records[b.1].id)));
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(score, i)| Hit {
                id: self.records[i].id.clone(),
                node: self.records[i].node.clone(),
                score,
            })
            .collect())
    }

    fn save(&self, dir: &Path) -> Result<(), RagError> {
        let name = self.kind.as_str();
        let mut jsonl = String::new();
        for r in &self.records {
            jsonl.push_str(&serde_json::to_string(r).expect("chunk serializes"));
            jsonl.push('\n');
        }
        let mut vec = Vec::with_capacity(12 + self.matrix.len() * 4);
        vec.extend_from_slice(b"KVX1");
        vec.extend_from_slice(&(self.len() as u32).to_le_bytes());
        vec.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.matrix {
            vec.extend_from_slice(&v.to_le_bytes());
        }
        write(&dir.join(format!("{name}.jsonl")), jsonl.as_bytes())?;
        write(&dir.join(format!("{name}.vec")), &vec)
    }

    fn load(dir: &Path, kind: StoreKind) -> Result<Self, RagError> {
        let name = kind.as_str();
        let jp = dir.join(format!("{name}.jsonl"));
        let vp = dir.join(format!("{name}.vec"));
        let text = std::fs::read_to_string(&jp).map_err(|source| RagError::Io {
            path: jp.display().to_string(),
            source,
        })?;
        let bytes = std::fs::read(&vp).map_err(|source| RagError::Io {
            path: vp.display().to_string(),
            source,
        })?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str::<Chunk>(l).map_err(|e| RagError::Corrupt(format!("{name}.jsonl: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if bytes.len() < 12 || &bytes[..4] != b"KVX1" {
            return Err(RagError::Corrupt(format!("{name}.vec header")));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        if rows != records.len() || bytes.len() != 12 + rows * dim * 4 {
            return Err(RagError::Corrupt(format!("{name}.vec size does not match {} records", records.len())));
        }
        let matrix = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Store {
            kind,
            records,
            dim,
            matrix,
        })
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), RagError> {
    std::fs::write(path, bytes).map_err(|source| RagError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkIndex {
    stores: BTreeMap<StoreKind, Store>,
}

impl ChunkIndex {
    pub fn store(&self, kind: StoreKind) -> &Store {
        &self.stores[&kind]
    }

    pub fn save(&self, dir: &Path) -> Result<(), RagError> {
        std::fs::create_dir_all(dir).map_err(|source| RagError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        for s in self.stores.values() {
            s.save(dir)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, RagError> {
        let stores = StoreKind::ALL
            .iter()
            .map(|&k| Store::load(dir, k).map(|s| (k, s)))
            .collect::<Result<_, _>>()?;
        Ok(ChunkIndex { stores })
    }
}

/// Embeds text chunks with `embed_text`, keyframe images (when
/// `keyframe_image` returns one) with `embed_image`, and copies object
/// best-view embeddings from the graph.
pub fn build_index(
    chunks: &[Chunk],
    graph: &SceneGraph,
    provider: &dyn Provider,
    keyframe_image: &(dyn Fn(usize) -> Option<RgbImage> + Sync),
) -> Result<ChunkIndex, RagError> {
    let text: Vec<Vec<f32>> = chunks
        .par_iter()
        .map(|c| provider.embed_text(&c.text).map(|e| e.vector))
        .collect::<Result<_, _>>()?;
    let mut rows: BTreeMap<StoreKind, Vec<(Chunk, Vec<f32>)>> = StoreKind::ALL.iter().map(|&k| (k, Vec::new())).collect();
    for (c, v) in chunks.iter().zip(text) {
        rows.get_mut(&c.kind).expect("kind").push((c.clone(), v));
    }

    let frames: Vec<&Chunk> = chunks.iter().filter(|c| c.kind == StoreKind::Frame).collect();
    let visual: Vec<Option<(Chunk, Vec<f32>)>> = frames
        .par_iter()
        .map(|c| {
            let Some(img) = keyframe_image(c.frame.expect("frame chunk")) else {
                return Ok(None);
            };
            let e = provider.embed_image(&img, None)?;
            Ok(Some((Chunk { kind: StoreKind::KeyframeVisual, ..(*c).clone() }, e.vector)))
        })
        .collect::<Result<_, ProviderError>>()?;
    rows.get_mut(&StoreKind::KeyframeVisual).expect("kind").extend(visual.into_iter().flatten());

    let by_id: BTreeMap<&str, &Chunk> = chunks.iter().filter(|c| c.kind == StoreKind::Object).map(|c| (c.id.as_str(), c)).collect();
    for obj in graph.objects() {
        if let (Some(e), Some(c)) = (&obj.embedding, by_id.get(obj.id.as_str())) {
            rows.get_mut(&StoreKind::ObjectVisual)
                .expect("kind")
                .push((Chunk { kind: StoreKind::ObjectVisual, ..(*c).clone() }, e.clone()));
        }
    }
    let stores = rows
        .into_iter()
        .map(|(k, r)| Store::from_rows(k, r).map(|s| (k, s)))
        .collect::<Result<_, _>>()?;
    Ok(ChunkIndex { stores })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Parsed,
    Raw,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "parsed" => Ok(Mode::Parsed),
            "raw" => Ok(Mode::Raw),
            other => Err(format!("unknown mode {other:?} (expected parsed or raw)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub level: StoreKind,
    /// Text embedded for this level; `None` when the level was skipped.
    pub query: Option<String>,
    /// Every candidate compared at this level, ranked.
    pub candidates: Vec<Hit>,
    pub selected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub requested: Mode,
    pub used: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposition: Option<HierQuery>,
    pub levels: Vec<LevelTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
    pub trace: Trace,
}

impl RetrievalResult {
    /// Top floor and room chosen during the descent, when those levels ran.
    pub fn path(&self) -> Vec<Hit> {
        self.trace
            .levels
            .iter()
            .filter(|l| l.level != StoreKind::Object && l.query.is_some())
            .filter_map(|l| l.candidates.first().cloned())
            .collect()
    }
}

fn embed(provider: &dyn Provider, text: &str) -> Result<Vec<f32>, RagError> {
    Ok(provider.embed_text(text)?.vector)
}

/// Floor → room → object descent. `beam` candidates survive each of the
/// floor and room levels.
pub fn retrieve_hierarchical(
    query: &str,
    graph: &SceneGraph,
    index: &ChunkIndex,
    mode: Mode,
    beam: usize,
    provider: &dyn Provider,
) -> Result<RetrievalResult, RagError> {
    assert!(beam >= 1, "beam must be at least 1");
    let floors = index.store(StoreKind::Floor);
    if floors.is_empty() {
        return Err(RagError::EmptyStore("floor"));
    }
    let (used, parts, fallback) = match mode {
        Mode::Raw => (Mode::Raw, None, None),
        Mode::Parsed => match provider.decompose_hierarchical(query) {
            Ok(h) => (Mode::Parsed, Some(h), None),
            Err(ProviderError::ParseFailure(m)) => {
                log::warn!("query decomposition failed, using raw mode: {m}");
                (Mode::Raw, None, Some(m))
            }
            Err(e) => return Err(e.into()),
        },
    };
    let whole = match parts {
        None => Some(embed(provider, query)?),
        Some(_) => None,
    };
    let level_query = |part: Option<&String>| -> Result<Option<(String, Vec<f32>)>, RagError> {
        match (&whole, part) {
            (Some(w), _) => Ok(Some((query.to_string(), w.clone()))),
            (None, Some(p)) => Ok(Some((p.clone(), embed(provider, p)?))),
            (None, None) => Ok(None),
        }
    };
    let mut levels = Vec::new();
    let mut descend = |store: Store, q: Option<(String, Vec<f32>)>, keep: usize| -> Result<Vec<String>, RagError> {
        let kind = store.kind;
        let Some((text, v)) = q else {
            let all: Vec<String> = store.records.iter().map(|r| r.node.clone()).collect();
            levels.push(LevelTrace {
                level: kind,
                query: None,
                candidates: Vec::new(),
                selected: all.clone(),
            });
            return Ok(all);
        };
        let ranked = if store.is_empty() { Vec::new() } else { store.topk(&v, store.len())? };
        let selected = ranked.iter().take(keep).map(|h| h.node.clone()).collect();
        levels.push(LevelTrace {
            level: kind,
            query: Some(text),
            candidates: ranked,
            selected,
        });
        Ok(levels.last().expect("pushed").selected.clone())
    };

    let parent = |id: &str| graph.parent(id).ok().flatten().unwrap_or_default();
    let floor_sel: BTreeSet<String> = descend(floors.clone(), level_query(parts.as_ref().and_then(|h| h.floor.as_ref()))?, beam)?
        .into_iter()
        .collect();
    let rooms = index.store(StoreKind::Room).subset(|r| floor_sel.contains(&parent(&r.node)));
    let room_sel: BTreeSet<String> = descend(rooms, level_query(parts.as_ref().and_then(|h| h.room.as_ref()))?, beam)?
        .into_iter()
        .collect();
    let objects = index.store(StoreKind::Object).subset(|r| room_sel.contains(&parent(&r.node)));
    let n = objects.len();
    descend(objects, level_query(parts.as_ref().map(|h| &h.object))?, n)?;
    let hits = levels.last().expect("object level").candidates.clone();
    Ok(RetrievalResult {
        hits,
        trace: Trace {
            requested: mode,
            used,
            fallback,
            decomposition: parts,
            levels,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub items: Vec<ContextItem>,
    pub dropped: usize,
}

fn token_count(text: &str) -> usize {
    tokenize(text).len()
}

/// Context for the answering model: the path chunks, then target and anchor
/// objects and keyframes, highest score first, within `token_budget`.
/// Path chunks are always kept.
#[allow(clippy::too_many_arguments)]
pub fn retrieve_multimodal(
    target: &str,
    anchors: &[String],
    path: &[Hit],
    index: &ChunkIndex,
    k: usize,
    token_budget: usize,
    provider: &dyn Provider,
) -> Result<ContextBundle, RagError> {
    let objects = index.store(StoreKind::Object);
    if objects.is_empty() {
        return Err(RagError::EmptyStore("object"));
    }
    let text_of = |kind: StoreKind, id: &str| -> String {
        let s = index.store(kind);
        s.position(id).map(|i| s.records[i].text.clone()).unwrap_or_default()
    };
    let mut items: Vec<ContextItem> = Vec::new();
    let mut seen = BTreeSet::new();
    for h in path {
        let kind = if h.node.contains("_r") { StoreKind::Room } else { StoreKind::Floor };
        if seen.insert(h.id.clone()) {
            items.push(ContextItem {
                id: h.id.clone(),
                role: ContextRole::Path,
                text: text_of(kind, &h.id),
                score: h.score,
            });
        }
    }
    let path_rooms: Vec<&str> = path.iter().filter(|h| h.node.contains("_r")).map(|h| h.node.as_str()).collect();

    let t = embed(provider, target)?;
    let mut candidates: Vec<(ContextRole, Hit, StoreKind)> = Vec::new();
    for h in objects.topk(&t, k)? {
        candidates.push((ContextRole::Target, h, StoreKind::Object));
    }
    for room in &path_rooms {
        let prefix = format!("{room}_");
        let local = objects.subset(|r| r.node.starts_with(&prefix));
        if !local.is_empty() {
            for h in local.topk(&t, k)? {
                candidates.push((ContextRole::Target, h, StoreKind::Object));
            }
        }
    }
    for a in anchors {
        let v = embed(provider, a)?;
        for h in objects.topk(&v, k)? {
            candidates.push((ContextRole::Anchor, h, StoreKind::Object));
        }
    }
    let visual = index.store(StoreKind::KeyframeVisual);
    if !visual.is_empty() {
        for h in visual.topk(&t, k)? {
            candidates.push((ContextRole::Keyframe, h, StoreKind::KeyframeVisual));
        }
    }
    let mut extra: Vec<ContextItem> = Vec::new();
    for (role, h, kind) in candidates {
        if seen.insert(h.id.clone()) {
            extra.push(ContextItem {
                text: text_of(kind, &h.id),
                id: h.id,
                role,
                score: h.score,
            });
        }
    }
    extra.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    let mut used: usize = items.iter().map(|i| token_count(&i.text)).sum();
    let total = extra.len();
    let mut kept = 0;
    for item in extra {
        let cost = token_count(&item.text);
        if used + cost > token_budget {
            break;
        }
        used += cost;
        kept += 1;
        items.push(item);
    }
    Ok(ContextBundle {
        items,
        dropped: total - kept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerTrace {
    pub parsed: ParsedQuery,
    pub retrieval: Trace,
    pub context: Vec<ContextItem>,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub node_ids: Vec<String>,
    /// Set when the provider cited no node and the top retrieval result
    /// was used as grounding instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub trace: AnswerTrace,
}

/// Object node ids cited in `text`, in order of first mention.
pub fn cited_objects(text: &str, graph: &SceneGraph) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for tok in text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_')) {
        if matches!(graph.lookup(tok), Ok(NodeRef::Object(_))) && !out.iter().any(|o| o == tok) {
            out.push(tok.to_string());
        }
    }
    out
}

pub fn answer(
    query: &str,
    graph: &SceneGraph,
    index: &ChunkIndex,
    mode: Mode,
    cfg: &RagConfig,
    provider: &dyn Provider,
) -> Result<Answer, RagError> {
    if index.store(StoreKind::Object).is_empty() {
        return Err(RagError::EmptyStore("object"));
    }
    let retrieval = retrieve_hierarchical(query, graph, index, mode, cfg.beam_width, provider)?;
    let parsed = match provider.parse_query(query) {
        Ok(p) => p,
        Err(ProviderError::ParseFailure(m)) => {
            log::warn!("query parsing failed, using the whole query as target: {m}");
            ParsedQuery {
                target: query.to_string(),
                anchors: Vec::new(),
            }
        }
        Err(e) => return Err(e.into()),
    };
    let bundle = retrieve_multimodal(&parsed.target, &parsed.anchors, &retrieval.path(), index, cfg.k, cfg.token_budget, provider)?;
    let text = provider.answer(query, &bundle.items)?;
    let mut node_ids = cited_objects(&text, graph);
    let mut warning = None;
    if node_ids.is_empty() {
        let fallback = bundle
            .items
            .iter()
            .find(|i| i.role == ContextRole::Target)
            .map(|i| i.id.clone())
            .or_else(|| retrieval.hits.first().map(|h| h.id.clone()));
        warning = Some("answer cites no object; grounded on the top retrieval result".to_string());
        node_ids.extend(fallback);
    }
    Ok(Answer {
        text,
        node_ids,
        warning,
        trace: AnswerTrace {
            parsed,
            retrieval: retrieval.trace,
            context: bundle.items,
            dropped: bundle.dropped,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn chunk(id: &str) -> Chunk {
        Chunk {
            id: id.into(),
            kind: StoreKind::Object,
            node: id.into(),
            frame: None,
            text: id.into(),
        }
    }

    #[test]
    fn topk_orthonormal() {
        let s = Store::from_rows(StoreKind::Object, (0..4).map(|i| (chunk(&format!("c{i}")), unit(4, i))).collect()).unwrap();
        let hits = s.topk(&unit(4, 2), 1).unwrap();
        assert_eq!(hits[0].id, "c2");
        assert_eq!(hits[0].score, 1.0);
        let all = s.topk(&unit(4, 2), 10).unwrap();
        assert_eq!(all.len(), 4);
        // zero-score ties ordered by id
        assert_eq!(all.iter().skip(1).map(|h| h.id.as_str()).collect::<Vec<_>>(), vec!["c0", "c1", "c3"]);
        assert!(matches!(Store::empty(StoreKind::Room).topk(&[1.0], 1), Err(RagError::EmptyStore("room"))));
    }

    #[test]
    fn mismatched_dims_rejected() {
        let r = Store::from_rows(StoreKind::Object, vec![(chunk("a"), vec![1.0]), (chunk("b"), vec![1.0, 0.0])]);
        assert!(matches!(r, Err(RagError::Corrupt(_))));
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::from_rows(StoreKind::Frame, vec![(chunk("a"), vec![0.5, -0.25])]).unwrap();
        s.save(dir.path()).unwrap();
        let mut back = Store::load(dir.path(), StoreKind::Frame).unwrap();
        back.kind = StoreKind::Frame;
        assert_eq!(back, s);
        let bytes = std::fs::read(dir.path().join("frame.vec")).unwrap();
        assert_eq!(&bytes[..4], b"KVX1");
        assert_eq!(bytes.len(), 12 + 8);
    }
}
