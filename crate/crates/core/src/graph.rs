//! The five-level scene graph: building, floors, rooms, objects and
//! functional elements.
//!
//! On disk a graph is `graph.json` plus one `clouds/<node-id>.kpc` sidecar
//! per node that owns geometry. Sidecars are little-endian: a 16-byte header
//! (`KPC1`, point count `u32`, voxel size `f32`, flags `u32`), then `xyz`
//! as `f32` triples, then `rgb` bytes when flag bit 0 is set.

use std::collections::BTreeMap;
use std::path::Path;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::hierseg::{point_in_polygon, polygon_distance, CellMask, FloorSlab, GridGeometry, RoomRegion};
use crate::ingest::PointCloud;
use crate::keyframes::RoomKey;
use crate::objects::{ObjectSegment, View};
use crate::providers::TagResult;
use crate::util::sha256_hex;

pub const SCHEMA_VERSION: u32 = 1;
pub const ROOT_ID: &str = "building";

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("inconsistent ids: {0}")]
    InconsistentIds(String),
    #[error("unknown node id {0:?}")]
    UnknownId(String),
    #[error("graph schema {found} is not supported (expected {SCHEMA_VERSION})")]
    SchemaVersionMismatch { found: u64 },
    #[error("sidecar {0} is missing or corrupt")]
    CorruptSidecar(String),
    #[error("malformed graph document: {0}")]
    Malformed(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GraphError + '_ {
    move |source| GraphError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn floor_id(floor: usize) -> String {
    format!("f{floor}")
}

pub fn room_id(key: RoomKey) -> String {
    format!("f{}_r{}", key.0, key.1)
}

pub fn object_id(key: RoomKey, object: usize) -> String {
    format!("{}_o{object}", room_id(key))
}

pub fn element_id(object_id: &str, element: usize) -> String {
    format!("{object_id}_e{element}")
}

/// Reference from a node to its point-cloud sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudRef {
    pub path: String,
    pub points: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub keysg_version: String,
    pub config_hash: String,
    pub config: Config,
    pub provider: String,
    /// Seconds since the epoch, only when `SOURCE_DATE_EPOCH` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<u64>,
}

impl Metadata {
    pub fn new(config: &Config, provider: &str) -> Self {
        Metadata {
            keysg_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash(),
            config: config.clone(),
            provider: provider.to_string(),
            created: std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeRecord {
    pub frame: usize,
    /// Camera-to-world, row-major.
    pub pose: Vec<f64>,
    pub color: String,
    pub depth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub tags: TagResult,
    /// Object node ids visible in this frame, most visible first.
    pub visible_objects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementNode {
    pub id: String,
    pub label: String,
    pub source_view: usize,
    pub centroid: [f64; 3],
    pub cloud: CloudRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Containment {
    Inside,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub id: String,
    pub label: String,
    pub labels: BTreeMap<String, usize>,
    pub centroid: [f64; 3],
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub containment: Containment,
    pub views: Vec<View>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_view: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
    pub cloud: CloudRef,
    pub elements: Vec<ElementNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomNode {
    pub id: String,
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub polygon: Vec<[f64; 2]>,
    pub area: f64,
    pub grid: GridGeometry,
    pub mask: CellMask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud: Option<CloudRef>,
    /// Frames assigned to the room that survived the projection filter.
    pub dense_frames: Vec<usize>,
    pub keyframes: Vec<KeyframeRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    pub object_tags: Vec<String>,
    pub functional_tags: Vec<String>,
    pub objects: Vec<ObjectNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorNode {
    pub id: String,
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub z_min: f64,
    pub z_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud: Option<CloudRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    pub rooms: Vec<RoomNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingNode {
    pub id: String,
    pub floors: Vec<FloorNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Document {
    keysg_schema: u32,
    metadata: Metadata,
    building: BuildingNode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeLevel {
    Building,
    Floor,
    Room,
    Object,
    Element,
}

#[derive(Debug, Clone, Copy)]
pub enum NodeRef<'a> {
    Building(&'a BuildingNode),
    Floor(&'a FloorNode),
    Room(&'a RoomNode),
    Object(&'a ObjectNode),
    Element(&'a ElementNode),
}

impl NodeRef<'_> {
    pub fn level(&self) -> NodeLevel {
        match self {
            NodeRef::Building(_) => NodeLevel::Building,
            NodeRef::Floor(_) => NodeLevel::Floor,
            NodeRef::Room(_) => NodeLevel::Room,
            NodeRef::Object(_) => NodeLevel::Object,
            NodeRef::Element(_) => NodeLevel::Element,
        }
    }

    pub fn id(&self) -> &str {
        match self {
            NodeRef::Building(n) => &n.id,
            NodeRef::Floor(n) => &n.id,
            NodeRef::Room(n) => &n.id,
            NodeRef::Object(n) => &n.id,
            NodeRef::Element(n) => &n.id,
        }
    }
}

/// Position of a node in the tree: floor, room, object, element indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct NodePath {
    level: NodeLevel,
    idx: [usize; 4],
}

/// Immutable once built; construct through [`SceneGraph::from_parts`],
/// [`assemble`] or [`SceneGraph::load`].
#[derive(Debug, Clone)]
pub struct SceneGraph {
    metadata: Metadata,
    building: BuildingNode,
    clouds: BTreeMap<String, PointCloud>,
    cloud_voxel: f32,
    index: FxHashMap<String, NodePath>,
}

impl PartialEq for SceneGraph {
    fn eq(&self, other: &Self) -> bool {
        self.metadata == other.metadata && self.building == other.building && self.clouds == other.clouds
    }
}

/// `.kpc` sidecar bytes: "KPC1", point count, voxel size, flags (bit 0:
/// colors), little-endian f32 xyz, then rgb bytes.
pub fn encode_kpc(cloud: &PointCloud, voxel: f32) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + cloud.len() * 15);
    out.extend_from_slice(b"KPC1");
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    out.extend_from_slice(&voxel.to_le_bytes());
    let flags: u32 = if cloud.colors.is_some() { 1 } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for p in &cloud.points {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    if let Some(colors) = &cloud.colors {
        for c in colors {
            out.extend_from_slice(c);
        }
    }
    out
}

pub fn decode_kpc(bytes: &[u8], name: &str) -> Result<PointCloud, GraphError> {
    let corrupt = || GraphError::CorruptSidecar(name.to_string());
    if bytes.len() < 16 || &bytes[..4] != b"KPC1" {
        return Err(corrupt());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let n = word(4) as usize;
    let flags = word(12);
    let colors = flags & 1 == 1;
    let expected = 16 + n * 12 + if colors { n * 3 } else { 0 };
    if bytes.len() != expected {
        return Err(corrupt());
    }
    let points = (0..n)
        .map(|i| {
            let at = 16 + i * 12;
            let f = |k: usize| f32::from_le_bytes(bytes[at + 4 * k..at + 4 * k + 4].try_into().expect("4 bytes"));
            [f(0), f(1), f(2)]
        })
        .collect();
    let colors = colors.then(|| {
        let base = 16 + n * 12;
        (0..n).map(|i| [bytes[base + 3 * i], bytes[base + 3 * i + 1], bytes[base + 3 * i + 2]]).collect()
    });
    Ok(PointCloud { points, colors })
}

fn cloud_ref(id: &str, cloud: &PointCloud, voxel: f32) -> CloudRef {
    CloudRef {
        path: format!("clouds/{id}.kpc"),
        points: cloud.len(),
        sha256: sha256_hex(&encode_kpc(cloud, voxel)),
    }
}

fn centroid_and_bounds(cloud: &PointCloud) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let c = cloud.centroid().unwrap_or([0.0; 3]);
    let (lo, hi) = cloud.bounds().unwrap_or(([0.0; 3], [0.0; 3]));
    (c, lo, hi)
}

impl SceneGraph {
    /// Validates the tree and builds the id index. `clouds` maps node ids to
    /// geometry; every `CloudRef` in the tree must have an entry.
    pub fn from_parts(
        metadata: Metadata,
        floors: Vec<FloorNode>,
        clouds: BTreeMap<String, PointCloud>,
        cloud_voxel: f32,
    ) -> Result<Self, GraphError> {
        let building = BuildingNode {
            id: ROOT_ID.to_string(),
            floors,
        };
        let mut index = FxHashMap::default();
        let mut add = |id: &str, path: NodePath| -> Result<(), GraphError> {
            if index.insert(id.to_string(), path).is_some() {
                return Err(GraphError::InconsistentIds(format!("duplicate id {id:?}")));
            }
            Ok(())
        };
        add(ROOT_ID, NodePath { level: NodeLevel::Building, idx: [0; 4] })?;
        let mut keyframes_seen = BTreeMap::new();
        let check_ref = |id: &str, r: &CloudRef| -> Result<(), GraphError> {
            match clouds.get(id) {
                Some(c) if c.len() == r.points => Ok(()),
                _ => Err(GraphError::InconsistentIds(format!("cloud for {id:?} missing or mismatched"))),
            }
        };
        for (fi, floor) in building.floors.iter().enumerate() {
            if floor.id != floor_id(fi) || floor.index != fi {
                return Err(GraphError::InconsistentIds(format!("floor {fi} has id {:?}", floor.id)));
            }
            add(&floor.id, NodePath { level: NodeLevel::Floor, idx: [fi, 0, 0, 0] })?;
            if let Some(r) = &floor.cloud {
                check_ref(&floor.id, r)?;
            }
            for (ri, room) in floor.rooms.iter().enumerate() {
                if room.id != room_id((fi, ri)) || room.index != ri {
                    return Err(GraphError::InconsistentIds(format!("room {fi}/{ri} has id {:?}", room.id)));
                }
                add(&room.id, NodePath { level: NodeLevel::Room, idx: [fi, ri, 0, 0] })?;
                if let Some(r) = &room.cloud {
                    check_ref(&room.id, r)?;
                }
                for kf in &room.keyframes {
                    if let Some(prev) = keyframes_seen.insert(kf.frame, room.id.clone()) {
                        return Err(GraphError::InconsistentIds(format!(
                            "keyframe {} in both {prev} and {}",
                            kf.frame, room.id
                        )));
                    }
                }
                for (oi, obj) in room.objects.iter().enumerate() {
                    if obj.id != object_id((fi, ri), oi) {
                        return Err(GraphError::InconsistentIds(format!("object {oi} of {} has id {:?}", room.id, obj.id)));
                    }
                    add(&obj.id, NodePath { level: NodeLevel::Object, idx: [fi, ri, oi, 0] })?;
                    check_ref(&obj.id, &obj.cloud)?;
                    for (ei, el) in obj.elements.iter().enumerate() {
                        if el.id != element_id(&obj.id, ei) {
                            return Err(GraphError::InconsistentIds(format!("element {ei} of {} has id {:?}", obj.id, el.id)));
                        }
                        add(&el.id, NodePath { level: NodeLevel::Element, idx: [fi, ri, oi, ei] })?;
                        check_ref(&el.id, &el.cloud)?;
                    }
                }
            }
        }
        for kf_room in keyframes_seen.values() {
            debug_assert!(index.contains_key(kf_room));
        }
        Ok(SceneGraph {
            metadata,
            building,
            clouds,
            cloud_voxel,
            index,
        })
    }

    pub fn metadata(&self) -> &Metadata {
        &self.metadata
    }

    pub fn building(&self) -> &BuildingNode {
        &self.building
    }

    pub fn floors(&self) -> &[FloorNode] {
        &self.building.floors
    }

    pub fn rooms(&self) -> impl Iterator<Item = &RoomNode> {
        self.building.floors.iter().flat_map(|f| f.rooms.iter())
    }

    pub fn objects(&self) -> impl Iterator<Item = &ObjectNode> {
        self.rooms().flat_map(|r| r.objects.iter())
    }

    pub fn node_count(&self) -> usize {
        self.index.len()
    }

    pub fn cloud(&self, id: &str) -> Option<&PointCloud> {
        self.clouds.get(id)
    }

    pub fn lookup(&self, id: &str) -> Result<NodeRef<'_>, GraphError> {
        let p = self.index.get(id).ok_or_else(|| GraphError::UnknownId(id.to_string()))?;
        let [f, r, o, e] = p.idx;
        let b = &self.building;
        Ok(match p.level {
            NodeLevel::Building => NodeRef::Building(b),
            NodeLevel::Floor => NodeRef::Floor(&b.floors[f]),
            NodeLevel::Room => NodeRef::Room(&b.floors[f].rooms[r]),
            NodeLevel::Object => NodeRef::Object(&b.floors[f].rooms[r].objects[o]),
            NodeLevel::Element => NodeRef::Element(&b.floors[f].rooms[r].objects[o].elements[e]),
        })
    }

    /// Id of the parent node; `None` for the root.
    pub fn parent(&self, id: &str) -> Result<Option<String>, GraphError> {
        let p = self.index.get(id).ok_or_else(|| GraphError::UnknownId(id.to_string()))?;
        let [f, r, o, _] = p.idx;
        Ok(match p.level {
            NodeLevel::Building => None,
            NodeLevel::Floor => Some(ROOT_ID.to_string()),
            NodeLevel::Room => Some(floor_id(f)),
            NodeLevel::Object => Some(room_id((f, r))),
            NodeLevel::Element => Some(object_id((f, r), o)),
        })
    }

    /// Descendants of `id` at `level`, in tree order.
    pub fn children(&self, id: &str, level: NodeLevel) -> Result<Vec<NodeRef<'_>>, GraphError> {
        let node = self.lookup(id)?;
        let mut out = Vec::new();
        if level <= node.level() {
            return Ok(out);
        }
        let floors: Vec<&FloorNode> = match node {
            NodeRef::Building(b) => b.floors.iter().collect(),
            NodeRef::Floor(f) => vec![f],
            _ => Vec::new(),
        };
        let rooms: Vec<&RoomNode> = match node {
            NodeRef::Room(r) => vec![r],
            _ => floors.iter().flat_map(|f| f.rooms.iter()).collect(),
        };
        let objects: Vec<&ObjectNode> = match node {
            NodeRef::Object(o) => vec![o],
            _ => rooms.iter().flat_map(|r| r.objects.iter()).collect(),
        };
        match level {
            NodeLevel::Building => {}
            NodeLevel::Floor => out.extend(floors.into_iter().map(NodeRef::Floor)),
            NodeLevel::Room => out.extend(rooms.into_iter().map(NodeRef::Room)),
            NodeLevel::Object => out.extend(objects.into_iter().map(NodeRef::Object)),
            NodeLevel::Element => out.extend(objects.iter().flat_map(|o| o.elements.iter()).map(NodeRef::Element)),
        }
        Ok(out)
    }

    pub fn keyframe_count(&self) -> usize {
        self.rooms().map(|r| r.keyframes.len()).sum()
    }

    /// `graph.json` bytes: fixed key order, shortest round-trip floats,
    /// trailing newline.
    pub fn to_json(&self) -> Vec<u8> {
        let doc = Document {
            keysg_schema: SCHEMA_VERSION,
            metadata: self.metadata.clone(),
            building: self.building.clone(),
        };
        let mut out = serde_json::to_vec_pretty(&doc).expect("graph serializes");
        out.push(b'\n');
        out
    }

    /// `(relative path, bytes)` for every sidecar, sorted by path.
    pub fn sidecars(&self) -> Vec<(String, Vec<u8>)> {
        self.clouds
            .iter()
            .map(|(id, c)| (format!("clouds/{id}.kpc"), encode_kpc(c, self.cloud_voxel)))
            .collect()
    }

    /// Writes `graph.json` and `clouds/` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), GraphError> {
        let clouds = dir.join("clouds");
        std::fs::create_dir_all(&clouds).map_err(io_err(&clouds))?;
        for (rel, bytes) in self.sidecars() {
            let p = dir.join(rel);
            std::fs::write(&p, bytes).map_err(io_err(&p))?;
        }
        let p = dir.join("graph.json");
        std::fs::write(&p, self.to_json()).map_err(io_err(&p))
    }

    /// Parses `graph.json` bytes; sidecars are fetched through `read`.
    pub fn from_json(
        json: &[u8],
        mut read: impl FnMut(&str) -> Option<Vec<u8>>,
    ) -> Result<Self, GraphError> {
        let value: serde_json::Value =
            serde_json::from_slice(json).map_err(|e| GraphError::Malformed(e.to_string()))?;
        let found = value
            .get("keysg_schema")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| GraphError::Malformed("missing keysg_schema".into()))?;
        if found != SCHEMA_VERSION as u64 {
            return Err(GraphError::SchemaVersionMismatch { found });
        }
        let doc: Document = serde_json::from_value(value).map_err(|e| GraphError::Malformed(e.to_string()))?;
        let mut clouds = BTreeMap::new();
        let mut voxel = None;
        let mut load = |id: &str, r: &CloudRef| -> Result<(), GraphError> {
            let bytes = read(&r.path).ok_or_else(|| GraphError::CorruptSidecar(r.path.clone()))?;
            if sha256_hex(&bytes) != r.sha256 {
                return Err(GraphError::CorruptSidecar(r.path.clone()));
            }
            let cloud = decode_kpc(&bytes, &r.path)?;
            if cloud.len() != r.points {
                return Err(GraphError::CorruptSidecar(r.path.clone()));
            }
            voxel.get_or_insert(f32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")));
            clouds.insert(id.to_string(), cloud);
            Ok(())
        };
        for f in &doc.building.floors {
            if let Some(r) = &f.cloud {
                load(&f.id, r)?;
            }
            for room in &f.rooms {
                if let Some(r) = &room.cloud {
                    load(&room.id, r)?;
                }
                for o in &room.objects {
                    load(&o.id, &o.cloud)?;
                    for e in &o.elements {
                        load(&e.id, &e.cloud)?;
                    }
                }
            }
        }
        if doc.building.id != ROOT_ID {
            return Err(GraphError::InconsistentIds(format!("root id {:?}", doc.building.id)));
        }
        Self::from_parts(doc.metadata, doc.building.floors, clouds, voxel.unwrap_or(0.0))
    }

    pub fn load(dir: &Path) -> Result<Self, GraphError> {
        let p = dir.join("graph.json");
        let json = std::fs::read(&p).map_err(io_err(&p))?;
        Self::from_json(&json, |rel| std::fs::read(dir.join(rel)).ok())
    }
}

/// Per-room inputs to [`assemble`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoomData {
    pub name: Option<String>,
    pub dense_frames: Vec<usize>,
    pub keyframes: Vec<KeyframeRecord>,
    pub coverage: Option<f64>,
    pub flags: Vec<String>,
    pub summary: Option<String>,
    pub object_tags: Vec<String>,
    pub functional_tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssemblyInput {
    pub metadata: Metadata,
    pub floors: Vec<FloorSlab>,
    pub floor_names: BTreeMap<usize, String>,
    pub floor_summaries: BTreeMap<usize, String>,
    pub rooms: Vec<RoomRegion>,
    pub room_data: BTreeMap<RoomKey, RoomData>,
    /// Objects with the room they were segmented in.
    pub objects: Vec<(RoomKey, ObjectSegment)>,
    /// Voxel size recorded in sidecar headers.
    pub cloud_voxel: f64,
}

/// Room each object belongs to. An object whose centroid lies in no room
/// goes to the nearest room polygon (same floor slab preferred).
pub fn place_objects(
    objects: &[(RoomKey, ObjectSegment)],
    rooms: &[RoomRegion],
    floors: &[FloorSlab],
) -> Vec<(RoomKey, Containment)> {
    objects
        .iter()
        .map(|(origin, obj)| {
            let c = obj.cloud.centroid().unwrap_or([0.0; 3]);
            let on_floor = |r: &RoomRegion| floors.iter().any(|f| f.index == r.floor_index && f.contains_z(c[2]));
            if let Some(r) = rooms.iter().find(|r| on_floor(r) && point_in_polygon([c[0], c[1]], &r.polygon)) {
                return ((r.floor_index, r.index), Containment::Inside);
            }
            let candidates: Vec<&RoomRegion> = if rooms.iter().any(on_floor) {
                rooms.iter().filter(|r| on_floor(r)).collect()
            } else {
                rooms.iter().collect()
            };
            let nearest = candidates
                .into_iter()
                .map(|r| (polygon_distance([c[0], c[1]], &r.polygon), (r.floor_index, r.index)))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|(_, k)| k)
                .unwrap_or(*origin);
            (nearest, Containment::Nearest)
        })
        .collect()
}

/// Final per-room object order: by originating room, then segment id.
pub fn object_order(objects: &[(RoomKey, ObjectSegment)], placement: &[(RoomKey, Containment)]) -> BTreeMap<RoomKey, Vec<usize>> {
    let mut by_room: BTreeMap<RoomKey, Vec<usize>> = BTreeMap::new();
    for (i, (room, _)) in placement.iter().enumerate() {
        by_room.entry(*room).or_default().push(i);
    }
    for list in by_room.values_mut() {
        list.sort_by_key(|&i| (objects[i].0, objects[i].1.id));
    }
    by_room
}

pub fn assemble(input: AssemblyInput) -> Result<SceneGraph, GraphError> {
    let AssemblyInput {
        metadata,
        floors,
        floor_names,
        floor_summaries,
        rooms,
        mut room_data,
        objects,
        cloud_voxel,
    } = input;
    let voxel = cloud_voxel as f32;

    let mut seen = std::collections::BTreeSet::new();
    for (room, obj) in &objects {
        if !seen.insert((*room, obj.id)) {
            return Err(GraphError::InconsistentIds(format!("duplicate object {} in room {:?}", obj.id, room)));
        }
    }
    let mut room_keys = std::collections::BTreeSet::new();
    for r in &rooms {
        if !room_keys.insert((r.floor_index, r.index)) {
            return Err(GraphError::InconsistentIds(format!("duplicate room {:?}", (r.floor_index, r.index))));
        }
        if !floors.iter().any(|f| f.index == r.floor_index) {
            return Err(GraphError::InconsistentIds(format!("room on unknown floor {}", r.floor_index)));
        }
    }
    for (i, f) in floors.iter().enumerate() {
        if f.index != i {
            return Err(GraphError::InconsistentIds(format!("floor at position {i} has index {}", f.index)));
        }
    }
    for key in room_data.keys() {
        if !room_keys.contains(key) {
            return Err(GraphError::InconsistentIds(format!("data for unknown room {key:?}")));
        }
    }

    let placement = place_objects(&objects, &rooms, &floors);
    let mut order = object_order(&objects, &placement);

    let mut clouds = BTreeMap::new();
    let mut floor_nodes = Vec::new();
    for f in &floors {
        let fid = floor_id(f.index);
        let cloud = (!f.cloud.is_empty()).then(|| {
            clouds.insert(fid.clone(), f.cloud.clone());
            cloud_ref(&fid, &f.cloud, voxel)
        });
        let mut floor_rooms: Vec<&RoomRegion> = rooms.iter().filter(|r| r.floor_index == f.index).collect();
        floor_rooms.sort_by_key(|r| r.index);
        let mut room_nodes = Vec::new();
        for (pos, r) in floor_rooms.into_iter().enumerate() {
            let key = (r.floor_index, r.index);
            if r.index != pos {
                return Err(GraphError::InconsistentIds(format!("rooms on floor {} are not numbered densely", f.index)));
            }
            let rid = room_id(key);
            let data = room_data.remove(&key).unwrap_or_default();
            let cloud = (!r.cloud.is_empty()).then(|| {
                clouds.insert(rid.clone(), r.cloud.clone());
                cloud_ref(&rid, &r.cloud, voxel)
            });
            let mut object_nodes = Vec::new();
            for (oi, &idx) in order.remove(&key).unwrap_or_default().iter().enumerate() {
                let obj = &objects[idx].1;
                let oid = object_id(key, oi);
                let (centroid, lo, hi) = centroid_and_bounds(&obj.cloud);
                let mut elements = Vec::new();
                for (ei, el) in obj.functional_elements.iter().enumerate() {
                    let eid = element_id(&oid, ei);
                    elements.push(ElementNode {
                        id: eid.clone(),
                        label: el.label.clone(),
                        source_view: el.source_view,
                        centroid: el.cloud.centroid().unwrap_or([0.0; 3]),
                        cloud: cloud_ref(&eid, &el.cloud, voxel),
                    });
                    clouds.insert(eid, el.cloud.clone());
                }
                object_nodes.push(ObjectNode {
                    id: oid.clone(),
                    label: obj.label().to_string(),
                    labels: obj.labels.clone(),
                    centroid,
                    bbox_min: lo,
                    bbox_max: hi,
                    containment: placement[idx].1,
                    views: obj.views.clone(),
                    best_view: obj.best().map(|v| v.frame),
                    embedding: obj.embedding.as_ref().map(|e| e.vector.clone()),
                    cloud: cloud_ref(&oid, &obj.cloud, voxel),
                    elements,
                });
                clouds.insert(oid, obj.cloud.clone());
            }
            room_nodes.push(RoomNode {
                id: rid,
                index: r.index,
                name: data.name,
                polygon: r.polygon.clone(),
                area: r.area(),
                grid: r.grid,
                mask: r.mask.clone(),
                cloud,
                dense_frames: data.dense_frames,
                keyframes: data.keyframes,
                coverage: data.coverage,
                flags: data.flags,
                summary: data.summary,
                object_tags: data.object_tags,
                functional_tags: data.functional_tags,
                objects: object_nodes,
            });
        }
        floor_nodes.push(FloorNode {
            id: fid,
            index: f.index,
            name: floor_names.get(&f.index).cloned(),
            z_min: f.z_min,
            z_max: f.z_max,
            cloud,
            summary: floor_summaries.get(&f.index).cloned(),
            rooms: room_nodes,
        });
    }
    SceneGraph::from_parts(metadata, floor_nodes, clouds, voxel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierseg::CellMask;

    fn square_room(floor: usize, index: usize, x0: f64) -> RoomRegion {
        RoomRegion {
            index,
            floor_index: floor,
            grid: GridGeometry {
                cell_size: 0.5,
                origin: [x0, 0.0],
                width: 8,
                height: 8,
            },
            mask: CellMask::from_flags(vec![true; 64]),
            polygon: vec![[x0, 0.0], [x0 + 4.0, 0.0], [x0 + 4.0, 4.0], [x0, 4.0]],
            cloud: PointCloud::from_points(vec![[x0 as f32 + 1.0, 1.0, 0.0]]),
        }
    }

    fn slab() -> FloorSlab {
        FloorSlab {
            index: 0,
            z_min: -0.5,
            z_max: 3.0,
            cloud: PointCloud::from_points(vec![[1.0, 1.0, 0.0], [5.0, 1.0, 0.0]]),
        }
    }

    fn object_at(id: usize, x: f32) -> ObjectSegment {
        let seg = crate::objects::Segment {
            cloud: PointCloud::from_points(vec![[x, 1.0, 0.5], [x + 0.1, 1.1, 0.6]]),
            view: View {
                frame: id,
                mask: crate::providers::PixelMask::full(2, 2),
                score: 1.0,
                label: "chair".into(),
            },
        };
        let mut v = crate::objects::merge_objects(vec![seg], 0.3, 0.05);
        let mut o = v.remove(0);
        o.id = id;
        o
    }

    fn input(objects: Vec<(RoomKey, ObjectSegment)>) -> AssemblyInput {
        AssemblyInput {
            metadata: Metadata::new(&Config::default(), "test"),
            floors: vec![slab()],
            floor_names: BTreeMap::new(),
            floor_summaries: BTreeMap::from([(0, "FLOOR SUMMARY: x".to_string())]),
            rooms: vec![square_room(0, 0, 0.0)],
            room_data: BTreeMap::new(),
            objects,
            cloud_voxel: 0.05,
        }
    }

    #[test]
    fn counts_and_lookup() {
        let g = assemble(input(vec![((0, 0), object_at(0, 1.0)), ((0, 0), object_at(1, 2.0))])).unwrap();
        assert_eq!(g.node_count(), 5);
        assert!(matches!(g.lookup(ROOT_ID).unwrap(), NodeRef::Building(_)));
        assert!(matches!(g.lookup("no-such"), Err(GraphError::UnknownId(_))));
        assert_eq!(g.children("f0", NodeLevel::Room).unwrap().len(), 1);
        assert_eq!(g.children(ROOT_ID, NodeLevel::Object).unwrap().len(), 2);
        assert_eq!(g.parent("f0_r0_o1").unwrap().as_deref(), Some("f0_r0"));
    }

    #[test]
    fn object_outside_rooms_goes_to_nearest() {
        let mut inp = input(vec![((0, 0), object_at(0, 9.0))]);
        inp.rooms.push(square_room(0, 1, 4.5));
        let g = assemble(inp).unwrap();
        let NodeRef::Object(o) = g.lookup("f0_r1_o0").unwrap() else { panic!() };
        assert_eq!(o.containment, Containment::Nearest);
    }

    #[test]
    fn duplicate_object_is_rejected() {
        let err = assemble(input(vec![((0, 0), object_at(0, 1.0)), ((0, 0), object_at(0, 2.0))])).unwrap_err();
        assert!(matches!(err, GraphError::InconsistentIds(_)));
    }

    #[test]
    fn json_round_trip_and_tamper_detection() {
        let g = assemble(input(vec![((0, 0), object_at(0, 1.0))])).unwrap();
        let side: BTreeMap<String, Vec<u8>> = g.sidecars().into_iter().collect();
        let json = g.to_json();
        let back = SceneGraph::from_json(&json, |p| side.get(p).cloned()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_json(), json);

        let mut bad = side.clone();
        let v = bad.get_mut("clouds/f0_r0_o0.kpc").unwrap();
        let last = v.len() - 1;
        v[last] ^= 1;
        assert!(matches!(
            SceneGraph::from_json(&json, |p| bad.get(p).cloned()),
            Err(GraphError::CorruptSidecar(_))
        ));

        let text = String::from_utf8(json).unwrap().replace("\"keysg_schema\": 1", "\"keysg_schema\": 2");
        assert!(matches!(
            SceneGraph::from_json(text.as_bytes(), |p| side.get(p).cloned()),
            Err(GraphError::SchemaVersionMismatch { found: 2 })
        ));
    }

    #[test]
    fn empty_graph_is_valid() {
        let g = SceneGraph::from_parts(Metadata::new(&Config::default(), "test"), vec![], BTreeMap::new(), 0.05).unwrap();
        let back = SceneGraph::from_json(&g.to_json(), |_| None).unwrap();
        assert_eq!(back.node_count(), 1);
    }

    #[test]
    fn kpc_header_layout() {
        let c = PointCloud {
            points: vec![[1.0, 2.0, 3.0]],
            colors: Some(vec![[4, 5, 6]]),
        };
        let bytes = encode_kpc(&c, 0.05);
        assert_eq!(&bytes[..4], b"KPC1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(bytes[8..12].try_into().unwrap()), 0.05);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 16 + 12 + 3);
        assert_eq!(decode_kpc(&bytes, "x").unwrap(), c);
    }
}
