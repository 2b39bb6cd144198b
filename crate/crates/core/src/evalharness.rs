//! Evaluation protocols: open-vocabulary segmentation metrics, recall at k
//! with an IoU gate, and grounding accuracy with per-category breakdown.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::graph::{decode_kpc, GraphError, SceneGraph};
use crate::ingest::{to_voxels, voxel_key, PointCloud, VoxelSet};
use crate::providers::{dot, Embedding, Provider, ProviderError, ProviderExt};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("ground truth is empty")]
    EmptyGT,
    #[error("ground truth schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Voxel IoU of two clouds; two empty clouds score 0.
pub fn iou3d(a: &PointCloud, b: &PointCloud, voxel: f64) -> f64 {
    assert!(voxel > 0.0, "voxel must be positive");
    voxel_iou(&to_voxels(a, voxel), &to_voxels(b, voxel))
}

fn voxel_iou(a: &VoxelSet, b: &VoxelSet) -> f64 {
    let union = a.union_count(b);
    if union == 0 {
        return 0.0;
    }
    a.intersection_count(b) as f64 / union as f64
}

pub fn class_prompt(class: &str) -> String {
    format!("an image of {class}")
}

/// Text embeddings of the class prompts, in list order.
pub fn class_embeddings(classes: &[String], provider: &dyn Provider) -> Result<Vec<Embedding>, ProviderError> {
    classes.iter().map(|c| provider.embed_text(&class_prompt(c))).collect()
}

/// Index of the class with maximal cosine; ties go to the earlier class.
pub fn argmax_class(embedding: &[f32], classes: &[Embedding]) -> usize {
    assert!(!classes.is_empty(), "class list must not be empty");
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in classes.iter().enumerate() {
        let s = dot(embedding, &c.vector);
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Predicted class per object embedding; objects without an embedding get `None`.
pub fn classify_objects(
    embeddings: &[Option<&[f32]>],
    classes: &[String],
    provider: &dyn Provider,
) -> Result<Vec<Option<String>>, ProviderError> {
    assert!(!classes.is_empty(), "class list must not be empty");
    let class_emb = class_embeddings(classes, provider)?;
    Ok(embeddings
        .iter()
        .map(|e| e.map(|v| classes[argmax_class(v, &class_emb)].clone()))
        .collect())
}

/// 1-based rank of `target` among `classes` by cosine to `embedding`.
/// Classes scoring equal to the target rank ahead of it only if listed earlier.
pub fn class_rank(embedding: &[f32], target: usize, classes: &[Embedding]) -> usize {
    let t = dot(embedding, &classes[target].vector);
    1 + classes
        .iter()
        .enumerate()
        .filter(|(i, c)| {
            let s = dot(embedding, &c.vector);
            s > t || (s == t && *i < target)
        })
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub support: usize,
    pub recall: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    #[serde(rename = "mAcc")]
    pub m_acc: f64,
    #[serde(rename = "f_mIoU")]
    pub f_miou: f64,
    pub classes: BTreeMap<String, ClassStats>,
}

/// Class-mean recall and frequency-weighted IoU over aligned per-point
/// labels. Points without a prediction count as wrong.
pub fn semantic_seg_metrics(pred: &[Option<String>], gt: &[String]) -> Result<SegMetrics, EvalError> {
    assert_eq!(pred.len(), gt.len(), "pred and gt must be aligned");
    if gt.is_empty() {
        return Err(EvalError::EmptyGT);
    }
    let mut tp: BTreeMap<&str, usize> = BTreeMap::new();
    let mut support: BTreeMap<&str, usize> = BTreeMap::new();
    let mut predicted: BTreeMap<&str, usize> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gt) {
        *support.entry(g).or_default() += 1;
        if let Some(p) = p {
            *predicted.entry(p).or_default() += 1;
            if p == g {
                *tp.entry(g).or_default() += 1;
            }
        }
    }
    let n = gt.len() as f64;
    let mut classes = BTreeMap::new();
    let (mut acc, mut fw) = (0.0, 0.0);
    for (&c, &s) in &support {
        let t = tp.get(c).copied().unwrap_or(0);
        let fp = predicted.get(c).copied().unwrap_or(0) - t;
        let recall = t as f64 / s as f64;
        let iou = t as f64 / (s + fp) as f64;
        acc += recall;
        fw += (s as f64 / n) * iou;
        classes.insert(c.to_string(), ClassStats { support: s, recall, iou });
    }
    Ok(SegMetrics {
        m_acc: acc / support.len() as f64,
        f_miou: fw,
        classes,
    })
}

/// One prediction competing for a ground-truth item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// 1-based rank of the ground-truth class (or retrieval rank).
    pub rank: usize,
    pub iou: f64,
}

/// Share of items with some candidate at `rank ≤ k` and `iou ≥ iou_threshold`.
pub fn recall_at_k(items: &[Vec<Candidate>], k: usize, iou_threshold: f64) -> Result<f64, EvalError> {
    assert!(k >= 1, "k must be at least 1");
    if items.is_empty() {
        return Err(EvalError::EmptyGT);
    }
    let hits = items
        .iter()
        .filter(|c| c.iter().any(|c| c.rank <= k && c.iou >= iou_threshold))
        .count();
    Ok(hits as f64 / items.len() as f64)
}

/// Accuracy among queries with a flag and among those without it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagSplit {
    pub with: Option<f64>,
    pub with_count: usize,
    pub without: Option<f64>,
    pub without_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub accuracy: f64,
    pub queries: usize,
    pub correct: usize,
    pub categories: BTreeMap<String, FlagSplit>,
}

/// A query is correct iff its predicted cloud reaches `iou_threshold`
/// against ground truth. `cases` are `(iou, category flags)`.
pub fn grounding_accuracy(cases: &[(f64, Vec<String>)], iou_threshold: f64) -> Result<GroundingReport, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::EmptyGT);
    }
    let ok: Vec<bool> = cases.iter().map(|(iou, _)| *iou >= iou_threshold).collect();
    let correct = ok.iter().filter(|x| **x).count();
    let mut flags: Vec<&String> = cases.iter().flat_map(|(_, f)| f).collect();
    flags.sort();
    flags.dedup();
    let rate = |sel: &dyn Fn(&[String]) -> bool| {
        let picked: Vec<bool> = cases.iter().zip(&ok).filter(|((_, f), _)| sel(f)).map(|(_, o)| *o).collect();
        let n = picked.len();
        let acc = (n > 0).then(|| picked.iter().filter(|x| **x).count() as f64 / n as f64);
        (acc, n)
    };
    let categories = flags
        .into_iter()
        .map(|flag| {
            let (with, with_count) = rate(&|f| f.contains(flag));
            let (without, without_count) = rate(&|f| !f.contains(flag));
            (
                flag.clone(),
                FlagSplit {
                    with,
                    with_count,
                    without,
                    without_count,
                },
            )
        })
        .collect();
    Ok(GroundingReport {
        accuracy: correct as f64 / cases.len() as f64,
        queries: cases.len(),
        correct,
        categories,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Func,
    Retrieval,
    Grounding,
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "seg" => Ok(Task::Seg),
            "func" => Ok(Task::Func),
            "retrieval" => Ok(Task::Retrieval),
            "grounding" => Ok(Task::Grounding),
            other => Err(format!("unknown task {other:?} (expected seg, func, retrieval or grounding)")),
        }
    }
}

/// Ground-truth entry. Geometry comes from a `.kpc` file (relative to the
/// ground-truth file) or inline points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtItem {
    pub class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<[f32; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub items: Vec<GtItem>,
    pub clouds: Vec<PointCloud>,
}

impl GroundTruth {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_json(bytes: &[u8], base: &Path) -> Result<Self, EvalError> {
        let items: Vec<GtItem> = serde_json::from_slice(bytes).map_err(|e| EvalError::Schema(e.to_string()))?;
        if items.is_empty() {
            return Err(EvalError::EmptyGT);
        }
        let clouds = items
            .iter()
            .enumerate()
            .map(|(i, item)| match (&item.cloud, &item.points) {
                (Some(p), None) => {
                    let full = base.join(p);
                    let bytes = std::fs::read(&full).map_err(|source| EvalError::Io {
                        path: full.display().to_string(),
                        source,
                    })?;
                    Ok(decode_kpc(&bytes, &p.display().to_string())?)
                }
                (None, Some(pts)) => Ok(PointCloud::from_points(pts.clone())),
                _ => Err(EvalError::Schema(format!("item {i}: exactly one of \"cloud\" or \"points\" is required"))),
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        Ok(GroundTruth { items, clouds })
    }

    /// Dataset labels: distinct classes in first-seen order.
    pub fn classes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for i in &self.items {
            if !out.contains(&i.class) {
                out.push(i.class.clone());
            }
        }
        out
    }

    fn require_queries(&self) -> Result<Vec<&str>, EvalError> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, it)| it.query.as_deref().ok_or_else(|| EvalError::Schema(format!("item {i}: \"query\" is required"))))
            .collect()
    }
}

/// Assigns each ground-truth point the class of the predicted segment
/// owning its voxel, or else the nearest owned voxel among the 26
/// neighbours. Earlier segments win ties.
pub fn label_points(points: &[[f32; 3]], segments: &[(&PointCloud, Option<&str>)], voxel: f64) -> Vec<Option<String>> {
    let mut owner: FxHashMap<[i32; 3], usize> = FxHashMap::default();
    for (i, (cloud, _)) in segments.iter().enumerate() {
        for p in &cloud.points {
            owner.entry(voxel_key(*p, voxel)).or_insert(i);
        }
    }
    points
        .iter()
        .map(|p| {
            let k = voxel_key(*p, voxel);
            let mut best: Option<(f64, usize)> = owner.get(&k).map(|&i| (0.0, i));
            if best.is_none() {
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            let n = [k[0] + dx, k[1] + dy, k[2] + dz];
                            let Some(&i) = owner.get(&n) else { continue };
                            let c = n.map(|v| (v as f64 + 0.5) * voxel);
                            let d: f64 = (0..3).map(|a| (c[a] - p[a] as f64).powi(2)).sum();
                            if best.is_none_or(|(bd, bi)| d < bd || (d == bd && i < bi)) {
                                best = Some((d, i));
                            }
                        }
                    }
                }
            }
            best.and_then(|(_, i)| segments[i].1.map(str::to_string))
        })
        .collect()
}

/// Result of one `keysg eval` run: metrics plus a printable table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub metrics: serde_json::Value,
    pub table: String,
}

pub const RECALL_KS: [usize; 3] = [1, 5, 10];
pub const RECALL_IOUS: [f64; 3] = [0.0, 0.1, 0.25];

fn object_embeddings(graph: &SceneGraph) -> Vec<(String, Option<&[f32]>)> {
    graph.objects().map(|o| (o.id.clone(), o.embedding.as_deref())).collect()
}

fn recall_table(items: &[Vec<Candidate>]) -> Result<(serde_json::Value, String), EvalError> {
    let mut rows = Vec::new();
    let mut json = BTreeMap::new();
    for iou in RECALL_IOUS {
        let mut row = vec![format!("IoU≥{iou:.2}")];
        for k in RECALL_KS {
            let r = recall_at_k(items, k, iou)?;
            json.insert(format!("R@{k}/IoU{iou:.2}"), r);
            row.push(pct(r));
        }
        rows.push(row);
    }
    let header: Vec<String> = std::iter::once("".to_string()).chain(RECALL_KS.iter().map(|k| format!("R@{k}"))).collect();
    Ok((serde_json::to_value(json).expect("json"), render_table(&header, &rows)))
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Aligned plain-text table; first column left-aligned, the rest right.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let width: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate() {
            let pad = width[c] - cell.chars().count();
            if c == 0 {
                s.push_str(cell);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(cell);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (cols - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

/// Open-vocabulary segmentation: classify each object against the dataset
/// labels, then score the labels carried over to ground-truth points.
pub fn eval_seg(graph: &SceneGraph, gt: &GroundTruth, voxel: f64, provider: &dyn Provider) -> Result<EvalReport, EvalError> {
    let classes = gt.classes();
    let objs = object_embeddings(graph);
    let predicted = classify_objects(&objs.iter().map(|(_, e)| *e).collect::<Vec<_>>(), &classes, provider)?;
    let segments: Vec<(&PointCloud, Option<&str>)> = objs
        .iter()
        .zip(&predicted)
        .filter_map(|((id, _), p)| graph.cloud(id).map(|c| (c, p.as_deref())))
        .collect();
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (item, cloud) in gt.items.iter().zip(&gt.clouds) {
        pred.extend(label_points(&cloud.points, &segments, voxel));
        truth.extend(std::iter::repeat_n(item.class.clone(), cloud.len()));
    }
    let m = semantic_seg_metrics(&pred, &truth)?;
    let table = render_table(
        &["".into(), "mAcc".into(), "F-mIoU".into()],
        &[vec!["KeySG".into(), pct(m.m_acc), pct(m.f_miou)]],
    );
    Ok(EvalReport {
        task: Task::Seg,
        metrics: serde_json::to_value(&m).expect("json"),
        table,
    })
}

/// Functional-element recall: every element competes with the rank of the
/// ground-truth class against its label embedding.
pub fn eval_func(graph: &SceneGraph, gt: &GroundTruth, voxel: f64, provider: &dyn Provider) -> Result<EvalReport, EvalError> {
    let classes = gt.classes();
    let class_emb = class_embeddings(&classes, provider)?;
    let mut elements = Vec::new();
    for o in graph.objects() {
        for e in &o.elements {
            let emb = provider.embed_text(&e.label)?;
            let cloud = graph.cloud(&e.id).expect("element cloud");
            elements.push((emb, to_voxels(cloud, voxel)));
        }
    }
    let items: Vec<Vec<Candidate>> = gt
        .items
        .iter()
        .zip(&gt.clouds)
        .map(|(item, cloud)| {
            let target = classes.iter().position(|c| *c == item.class).expect("class listed");
            let gv = to_voxels(cloud, voxel);
            elements
                .iter()
                .map(|(emb, vox)| Candidate {
                    rank: class_rank(&emb.vector, target, &class_emb),
                    iou: voxel_iou(vox, &gv),
                })
                .collect()
        })
        .collect();
    let (metrics, table) = recall_table(&items)?;
    Ok(EvalReport {
        task: Task::Func,
        metrics,
        table,
    })
}

/// Cloud of the object a query resolved to, if any.
fn node_cloud<'a>(graph: &'a SceneGraph, id: Option<&str>) -> Option<&'a PointCloud> {
    id.and_then(|id| graph.cloud(id))
}

/// Retrieval recall: candidates are the ranked object hits for each query.
pub fn eval_retrieval(
    graph: &SceneGraph,
    index: &crate::ragindex::ChunkIndex,
    gt: &GroundTruth,
    voxel: f64,
    provider: &dyn Provider,
) -> Result<EvalReport, EvalError> {
    let queries = gt.require_queries()?;
    let k_max = *RECALL_KS.iter().max().expect("ks");
    let mut items = Vec::new();
    for (q, cloud) in queries.iter().zip(&gt.clouds) {
        let emb = provider.embed_text(q)?;
        let store = index.store(crate::ragindex::StoreKind::Object);
        let hits = store.topk(&emb.vector, k_max).map_err(|e| EvalError::Schema(e.to_string()))?;
        let gv = to_voxels(cloud, voxel);
        items.push(
            hits.iter()
                .enumerate()
                .map(|(r, h)| Candidate {
                    rank: r + 1,
                    iou: node_cloud(graph, Some(&h.node)).map_or(0.0, |c| voxel_iou(&to_voxels(c, voxel), &gv)),
                })
                .collect(),
        );
    }
    let (metrics, table) = recall_table(&items)?;
    Ok(EvalReport {
        task: Task::Retrieval,
        metrics,
        table,
    })
}

/// Grounding accuracy from full question answering; ungrounded answers score IoU 0.
pub fn eval_grounding(
    graph: &SceneGraph,
    index: &crate::ragindex::ChunkIndex,
    gt: &GroundTruth,
    config: &crate::config::Config,
    provider: &dyn Provider,
) -> Result<EvalReport, EvalError> {
    let queries = gt.require_queries()?;
    let mut cases = Vec::new();
    for ((q, item), cloud) in queries.iter().zip(&gt.items).zip(&gt.clouds) {
        let iou = match crate::ragindex::answer(q, graph, index, crate::ragindex::Mode::Parsed, &config.rag, provider) {
            Ok(a) if a.warning.is_none() => node_cloud(graph, a.node_ids.first().map(String::as_str))
                .map_or(0.0, |c| iou3d(c, cloud, config.eval.voxel)),
            Ok(_) => 0.0,
            Err(e) => {
                log::warn!("query {q:?} failed: {e}");
                0.0
            }
        };
        cases.push((iou, item.flags.clone()));
    }
    let r = grounding_accuracy(&cases, config.eval.grounding_iou)?;
    let mut rows = vec![vec!["overall".to_string(), pct(r.accuracy), r.queries.to_string()]];
    for (flag, s) in &r.categories {
        rows.push(vec![format!("{flag}"), s.with.map_or("-".into(), pct), s.with_count.to_string()]);
        rows.push(vec![format!("no {flag}"), s.without.map_or("-".into(), pct), s.without_count.to_string()]);
    }
    let table = render_table(&["".into(), "Acc@0.1".into(), "n".into()], &rows);
    Ok(EvalReport {
        task: Task::Grounding,
        metrics: serde_json::to_value(&r).expect("json"),
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::MockProvider;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn iou_cases() {
        let a = PointCloud::from_points(vec![[0.01, 0.01, 0.01]]);
        let b = PointCloud::from_points(vec![[0.01, 0.01, 0.01], [0.11, 0.01, 0.01]]);
        assert_eq!(iou3d(&b, &b, 0.05), 1.0);
        assert_eq!(iou3d(&a, &b, 0.05), 0.5);
        assert_eq!(iou3d(&PointCloud::new(), &PointCloud::new(), 0.05), 0.0);
    }

    #[test]
    fn half_right_half_wrong() {
        let gt = s(&["a", "a", "b", "b"]);
        let pred: Vec<Option<String>> = s(&["a", "a", "a", "a"]).into_iter().map(Some).collect();
        let m = semantic_seg_metrics(&pred, &gt).unwrap();
        assert_eq!(m.m_acc, 0.5);
        assert_eq!(m.f_miou, 0.25);
        let absent: Vec<Option<String>> = vec![Some("z".into()); 4];
        assert_eq!(semantic_seg_metrics(&absent, &gt).unwrap().m_acc, 0.0);
        assert!(matches!(semantic_seg_metrics(&[], &[]), Err(EvalError::EmptyGT)));
    }

    #[test]
    fn classify_prefers_exact_token_and_breaks_ties_first() {
        let p = MockProvider::default();
        let mug = p.embed_text("mug").unwrap();
        let classes = s(&["table", "mug", "chair"]);
        assert_eq!(classify_objects(&[Some(&mug.vector)], &classes, &p).unwrap(), vec![Some("mug".to_string())]);
        let other = p.embed_text("zebra").unwrap();
        assert_eq!(classify_objects(&[Some(&other.vector)], &classes, &p).unwrap()[0].as_deref(), Some("table"));
    }

    #[test]
    fn table_is_aligned() {
        let t = render_table(&s(&["", "R@1"]), &[s(&["IoU≥0.00", "100.00"]), s(&["x", "5.00"])]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "             R@1");
        assert_eq!(lines[2], "IoU≥0.00  100.00");
        assert_eq!(lines[3], "x           5.00");
    }
}
