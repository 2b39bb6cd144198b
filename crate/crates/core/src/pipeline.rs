//! End-to-end build: sequence in, scene graph and retrieval index out.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::graph::{
    assemble, object_id, object_order, place_objects, room_id, AssemblyInput, GraphError, KeyframeRecord, Metadata,
    RoomData, SceneGraph,
};
use crate::hierseg::{detect_floors, room_volume_test, rooms_for_floor, FloorSlab, HierSegError, RoomRegion};
use crate::ingest::{fuse_scene, BackprojectOptions, IngestError, PosedFrame, Sequence};
use crate::keyframes::{assign_frames, coverage, filter_by_projection, select_keyframes, KeyframeError, RoomKey};
use crate::objects::{
    attach_best_view, lift_detection, merge_objects, segment_functional_elements, ObjectError,
    ObjectSegment, Segment,
};
use crate::providers::{normalize_tags, Provider, ProviderError, ProviderExt, TagResult};
use crate::ragindex::{build_index, chunk_graph, ChunkIndex, RagError};
use crate::summaries::{describe_keyframes, summarize_floor, summarize_room, UNOBSERVED_ROOM};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("ingest: {0}")]
    Ingest(#[from] IngestError),
    #[error("segmentation: {0}")]
    Segmentation(#[from] HierSegError),
    #[error("keyframes: {0}")]
    Keyframes(#[from] KeyframeError),
    #[error("objects: {0}")]
    Objects(#[from] ObjectError),
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("index: {0}")]
    Index(#[from] RagError),
}

impl PipelineError {
    pub fn stage(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Ingest(_) => "ingest",
            PipelineError::Segmentation(_) => "hierseg",
            PipelineError::Keyframes(_) => "keyframes",
            PipelineError::Objects(_) => "objects",
            PipelineError::Graph(_) => "graph",
            PipelineError::Index(_) => "ragindex",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuildStatus {
    Ok,
    /// Some provider calls failed; affected frames or texts were skipped.
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub ms: u128,
}

/// A recoverable failure: the item was skipped and the build went on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub stage: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildLog {
    pub status: BuildStatus,
    pub frames: usize,
    pub floors: usize,
    pub rooms: usize,
    pub keyframes: usize,
    pub objects: usize,
    pub elements: usize,
    pub stages: Vec<StageTiming>,
    pub skipped: Vec<Skip>,
}

pub struct BuildOutput {
    pub graph: SceneGraph,
    pub index: ChunkIndex,
    pub log: BuildLog,
}

struct Recorder {
    stages: Vec<StageTiming>,
    skipped: Vec<Skip>,
    clock: Instant,
}

impl Recorder {
    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.stages.push(StageTiming {
            stage: stage.to_string(),
            ms: now.duration_since(self.clock).as_millis(),
        });
        log::info!("stage {stage} done in {} ms", now.duration_since(self.clock).as_millis());
        self.clock = now;
    }

    fn skip(&mut self, stage: &str, frame: Option<usize>, node: Option<String>, reason: impl ToString) {
        let reason = reason.to_string();
        log::warn!("{stage}: skipped {frame:?} {node:?}: {reason}");
        self.skipped.push(Skip {
            stage: stage.to_string(),
            frame,
            node,
            reason,
        });
    }

    /// Provider failures make the build partial; other skips are routine.
    fn provider_failures(&self) -> bool {
        self.skipped.iter().any(|s| s.reason.starts_with("provider:"))
    }
}

fn provider_reason(e: &ProviderError) -> String {
    format!("provider: {e}")
}

/// Per-room state carried between stages.
struct RoomWork {
    key: RoomKey,
    dense: Vec<usize>,
    keyframes: Vec<usize>,
    coverage: Option<f64>,
    flags: Vec<String>,
    tags: BTreeMap<usize, TagResult>,
    object_tags: Vec<String>,
    functional_tags: Vec<String>,
}

fn frame_of(seq: &Sequence, index: usize) -> &PosedFrame {
    seq.frame(index).expect("frame index from this sequence")
}

/// Runs every stage on `seq`. Provider failures on individual frames or
/// texts are skipped and logged; anything else aborts.
pub fn build(seq: &Sequence, config: &Config, provider: &dyn Provider) -> Result<BuildOutput, PipelineError> {
    config.validate()?;
    let intr = &seq.intrinsics;
    let mut rec = Recorder {
        stages: Vec::new(),
        skipped: Vec::new(),
        clock: Instant::now(),
    };

    let opts = BackprojectOptions {
        stride: config.ingest.stride,
        max_depth: (config.ingest.max_depth > 0.0).then_some(config.ingest.max_depth),
    };
    let scene = fuse_scene(&seq.frames, intr, config.ingest.voxel_size, opts)?;
    rec.lap("fuse");

    let floors = detect_floors(&scene, &config.floors)?;
    let mut rooms: Vec<RoomRegion> = Vec::new();
    for f in &floors {
        match rooms_for_floor(f, &config.rooms) {
            Ok(r) => rooms.extend(r),
            Err(e) => rec.skip("hierseg", None, Some(crate::graph::floor_id(f.index)), e),
        }
    }
    rec.lap("segment");

    let assigned = assign_frames(&seq.frames, &rooms, &floors);
    let kp = &config.keyframes;
    let mut work: Vec<RoomWork> = Vec::new();
    for room in &rooms {
        let key = (room.floor_index, room.index);
        let frames: Vec<&PosedFrame> = assigned[&key].iter().map(|&i| frame_of(seq, i)).collect();
        let mut w = RoomWork {
            key,
            dense: filter_by_projection(&frames, &room.polygon, intr, kp.eta, config.objects.filter_stride),
            keyframes: Vec::new(),
            coverage: None,
            flags: Vec::new(),
            tags: BTreeMap::new(),
            object_tags: Vec::new(),
            functional_tags: Vec::new(),
        };
        w.dense.sort_unstable();
        if w.dense.is_empty() {
            w.flags.push("no_frames".into());
        } else {
            let pairs: Vec<_> = w.dense.iter().map(|&i| (i, frame_of(seq, i).pose)).collect();
            w.keyframes = select_keyframes(&pairs, kp)?.keyframes;
            let kf: Vec<&PosedFrame> = w.keyframes.iter().map(|&i| frame_of(seq, i)).collect();
            let dense: Vec<&PosedFrame> = w.dense.iter().map(|&i| frame_of(seq, i)).collect();
            match coverage(&kf, &dense, intr, kp.coverage_voxel) {
                Ok(c) => w.coverage = Some(c),
                Err(KeyframeError::EmptyRoom) => w.flags.push("no_depth".into()),
                Err(e) => return Err(e.into()),
            }
        }
        work.push(w);
    }
    rec.lap("keyframes");

    // Open-vocabulary tags from keyframes define each room's vocabularies.
    for w in &mut work {
        let results: Vec<(usize, Result<TagResult, ProviderError>)> = w
            .keyframes
            .par_iter()
            .map(|&i| (i, provider.tag_frame(&frame_of(seq, i).color)))
            .collect();
        let (mut objs, mut funcs) = (Vec::new(), Vec::new());
        for (i, r) in results {
            match r {
                Ok(t) => {
                    objs.extend(t.object_tags.iter().cloned());
                    funcs.extend(t.functional_tags.iter().cloned());
                    w.tags.insert(i, t);
                }
                Err(e) => rec.skip("tag", Some(i), Some(room_id(w.key)), provider_reason(&e)),
            }
        }
        w.object_tags = normalize_tags(&objs);
        w.functional_tags = normalize_tags(&funcs);
    }
    rec.lap("tag");

    let room_of = |key: RoomKey| rooms.iter().find(|r| (r.floor_index, r.index) == key).expect("room");
    let floor_of = |idx: usize| floors.iter().find(|f| f.index == idx).expect("floor");
    let mut objects: Vec<(RoomKey, ObjectSegment)> = Vec::new();
    for w in &work {
        if w.object_tags.is_empty() || w.dense.is_empty() {
            continue;
        }
        let (room, floor) = (room_of(w.key), floor_of(w.key.0));
        let per_frame: Vec<(usize, Result<Vec<Segment>, String>)> = w
            .dense
            .par_iter()
            .map(|&i| {
                let frame = frame_of(seq, i);
                let dets = match provider.detect(&frame.color, &w.object_tags) {
                    Ok(d) => d,
                    Err(e) => return (i, Err(provider_reason(&e))),
                };
                let segs = dets
                    .iter()
                    .filter_map(|d| lift_detection(d, frame, intr).ok())
                    .filter(|s| in_room(s, room, floor))
                    .collect();
                (i, Ok(segs))
            })
            .collect();
        let mut segments = Vec::new();
        for (i, r) in per_frame {
            match r {
                Ok(s) => segments.extend(s),
                Err(reason) => rec.skip("detect", Some(i), Some(room_id(w.key)), reason),
            }
        }
        for obj in merge_objects(segments, config.objects.merge_threshold, config.objects.voxel) {
            objects.push((w.key, obj));
        }
    }
    rec.lap("objects");

    let failures: Vec<(RoomKey, usize, ObjectError)> = objects
        .par_iter_mut()
        .filter_map(|(key, obj)| attach_best_view(obj, |i| seq.frame(i), provider).err().map(|e| (*key, obj.id, e)))
        .collect();
    for (key, id, e) in failures {
        let reason = match &e {
            ObjectError::Provider(p) => provider_reason(p),
            other => other.to_string(),
        };
        rec.skip("embed", None, Some(format!("{} segment {id}", room_id(key))), reason);
    }
    let functional: BTreeMap<RoomKey, Vec<String>> = work.iter().map(|w| (w.key, w.functional_tags.clone())).collect();
    let elements: Vec<Result<Vec<_>, ObjectError>> = objects
        .par_iter()
        .map(|(key, obj)| match obj.best() {
            Some(v) => segment_functional_elements(obj, &functional[key], frame_of(seq, v.frame), intr, provider),
            None => Ok(Vec::new()),
        })
        .collect();
    for ((key, obj), r) in objects.iter_mut().zip(elements) {
        match r {
            Ok(e) => obj.functional_elements = e,
            Err(ObjectError::Provider(e)) => rec.skip("elements", None, Some(room_id(*key)), provider_reason(&e)),
            Err(e) => return Err(e.into()),
        }
    }
    rec.lap("elements");

    // Final placement decides node ids; keyframe records refer to them.
    let placement = place_objects(&objects, &rooms, &floors);
    let order = object_order(&objects, &placement);
    let mut node_of: BTreeMap<(RoomKey, usize), String> = BTreeMap::new();
    let mut placed: BTreeMap<RoomKey, Vec<ObjectSegment>> = BTreeMap::new();
    for (key, list) in &order {
        for (pos, &idx) in list.iter().enumerate() {
            let mut obj = objects[idx].1.clone();
            // Distinct ids within the room for visibility lookups.
            obj.id = pos;
            node_of.insert((*key, pos), object_id(*key, pos));
            placed.entry(*key).or_default().push(obj);
        }
    }

    let mut room_data: BTreeMap<RoomKey, RoomData> = BTreeMap::new();
    let mut room_summaries: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for w in &work {
        let empty = Vec::new();
        let objs = placed.get(&w.key).unwrap_or(&empty);
        let kfs: Vec<&PosedFrame> = w.keyframes.iter().map(|&i| frame_of(seq, i)).collect();
        let descs = describe_keyframes(&kfs, objs, intr, config.objects.theta_vis, config.objects.depth_tol, provider);
        let mut records = Vec::new();
        let mut texts = Vec::new();
        for d in descs {
            let frame = frame_of(seq, d.frame);
            let description = match d.text {
                Ok(t) => {
                    texts.push(t.clone());
                    Some(t)
                }
                Err(e) => {
                    rec.skip("describe", Some(d.frame), Some(room_id(w.key)), provider_reason(&e));
                    None
                }
            };
            records.push(KeyframeRecord {
                frame: d.frame,
                pose: frame.pose.to_row_major().to_vec(),
                color: format!("color/{:06}.png", d.frame),
                depth: format!("depth/{:06}.png", d.frame),
                description,
                tags: w.tags.get(&d.frame).cloned().unwrap_or_default(),
                visible_objects: d.visible.iter().map(|(id, _)| node_of[&(w.key, *id)].clone()).collect(),
            });
        }
        let mut flags = w.flags.clone();
        let summary = match summarize_room(&texts, config.summaries.chunk_size, provider) {
            Ok(s) => s,
            Err(e) => {
                rec.skip("summarize", None, Some(room_id(w.key)), provider_reason(&e));
                flags.push("summary_fallback".into());
                fallback_summary(&texts, UNOBSERVED_ROOM)
            }
        };
        room_summaries.entry(w.key.0).or_default().push(summary.clone());
        room_data.insert(
            w.key,
            RoomData {
                name: None,
                dense_frames: w.dense.clone(),
                keyframes: records,
                coverage: w.coverage,
                flags,
                summary: Some(summary),
                object_tags: w.object_tags.clone(),
                functional_tags: w.functional_tags.clone(),
            },
        );
    }
    let mut floor_summaries = BTreeMap::new();
    for f in &floors {
        let texts = room_summaries.remove(&f.index).unwrap_or_default();
        let s = match summarize_floor(&texts, config.summaries.chunk_size, provider) {
            Ok(s) => s,
            Err(e) => {
                rec.skip("summarize", None, Some(crate::graph::floor_id(f.index)), provider_reason(&e));
                fallback_summary(&texts, crate::summaries::EMPTY_FLOOR)
            }
        };
        floor_summaries.insert(f.index, s);
    }
    rec.lap("summaries");

    let n_keyframes = work.iter().map(|w| w.keyframes.len()).sum();
    let graph = assemble(AssemblyInput {
        metadata: Metadata::new(config, &provider.id()),
        floors: floors.clone(),
        floor_names: BTreeMap::new(),
        floor_summaries,
        rooms,
        room_data,
        objects,
        cloud_voxel: config.ingest.voxel_size,
    })?;
    rec.lap("assemble");

    let chunks = chunk_graph(&graph)?;
    let image = |i: usize| seq.frame(i).map(|f| f.color.clone());
    let index = build_index(&chunks, &graph, provider, &image)?;
    rec.lap("index");

    let log = BuildLog {
        status: if rec.provider_failures() { BuildStatus::Partial } else { BuildStatus::Ok },
        frames: seq.frames.len(),
        floors: graph.floors().len(),
        rooms: graph.rooms().count(),
        keyframes: n_keyframes,
        objects: graph.objects().count(),
        elements: graph.objects().map(|o| o.elements.len()).sum(),
        stages: rec.stages,
        skipped: rec.skipped,
    };
    Ok(BuildOutput { graph, index, log })
}

/// Deterministic stand-in when the provider cannot summarize.
fn fallback_summary(texts: &[String], empty: &str) -> String {
    if texts.is_empty() {
        empty.to_string()
    } else {
        texts.join(" ")
    }
}

/// Segments whose centroid leaves the room volume are detections seen
/// through an opening; they belong to another room's pass.
fn in_room(seg: &Segment, room: &RoomRegion, floor: &FloorSlab) -> bool {
    seg.cloud.centroid().is_some_and(|c| room_volume_test(c, room, floor))
}

/// Writes `graph.json`, cloud sidecars, `index/` and `build.log`.
pub fn write_outputs(out: &BuildOutput, dir: &Path) -> Result<(), PipelineError> {
    out.graph.save(dir)?;
    out.index.save(&dir.join("index"))?;
    let log = serde_json::to_string_pretty(&out.log).expect("log serializes") + "\n";
    let path = dir.join("build.log");
    std::fs::write(&path, log).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Labels the room claims through its keyframes but no object carries.
pub fn unmatched_tags(graph: &SceneGraph) -> BTreeMap<String, BTreeSet<String>> {
    let mut out = BTreeMap::new();
    for r in graph.rooms() {
        let have: BTreeSet<&str> = r.objects.iter().map(|o| o.label.as_str()).collect();
        let missing: BTreeSet<String> = r.object_tags.iter().filter(|t| !have.contains(t.as_str())).cloned().collect();
        if !missing.is_empty() {
            out.insert(r.id.clone(), missing);
        }
    }
    out
}
