//! Synthetic scenes with known ground truth: an axis-aligned box
//! ray-caster, trajectories, segmentation fixtures and a mock-provider
//! fixture scene.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::evalharness::GtItem;
use crate::graph::{
    element_id, encode_kpc, floor_id, object_id, room_id, CloudRef, Containment, ElementNode, FloorNode, KeyframeRecord, Metadata,
    ObjectNode, RoomNode, SceneGraph,
};
use crate::hierseg::{CellMask, GridGeometry};
use crate::ingest::{write_sequence, DepthMap, IngestError, Intrinsics, PointCloud, Pose, PosedFrame};
use crate::objects::View;
use crate::providers::{encode_fixture_id, FixtureDetection, FixtureFrame, FixtureTable, PixelMask, TagResult};
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub color: [u8; 3],
    /// Instance id for objects and functional elements; `None` for structure.
    pub instance: Option<usize>,
}

impl SynthBox {
    pub fn structure(min: [f64; 3], max: [f64; 3], color: [u8; 3]) -> Self {
        SynthBox {
            min,
            max,
            color,
            instance: None,
        }
    }

    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - margin && p[i] <= self.max[i] + margin)
    }

    /// Entry distance along the ray and the axis of the entry face.
    fn hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, usize)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        let mut axis = 0;
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                if o[i] < self.min[i] || o[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let a = (self.min[i] - o[i]) / d[i];
            let b = (self.max[i] - o[i]) / d[i];
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            if near > t0 {
                t0 = near;
                axis = i;
            }
            t1 = t1.min(far);
        }
        (t0 <= t1 && t0 > 1e-6).then_some((t0, axis))
    }
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub color: RgbImage,
    pub depth: DepthMap,
    /// Per-pixel instance id, row-major.
    pub instance: Vec<Option<usize>>,
}

impl Rendered {
    pub fn instance_mask(&self, id: usize) -> PixelMask {
        let w = self.color.width();
        PixelMask::from_fn(w, self.color.height(), |u, v| self.instance[(v * w + u) as usize] == Some(id))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub boxes: Vec<SynthBox>,
}

/// Rays longer than this return no depth.
pub const MAX_RANGE: f64 = 20.0;

impl Scene {
    pub fn translated(mut self, t: [f64; 3]) -> Self {
        for b in &mut self.boxes {
            for i in 0..3 {
                b.min[i] += t[i];
                b.max[i] += t[i];
            }
        }
        self
    }

    /// Casts one ray through every integer pixel coordinate. Depth is the
    /// camera-frame z of the nearest hit, quantized with `depth_scale`.
    pub fn render(&self, pose: &Pose, intr: &Intrinsics) -> Rendered {
        let (w, h) = (intr.width, intr.height);
        let r = pose.rotation();
        let o = pose.translation();
        let mut color = RgbImage::new(w, h);
        let mut depth = vec![0u16; (w * h) as usize];
        let mut instance = vec![None; (w * h) as usize];
        for v in 0..h {
            for u in 0..w {
                let dc = Vector3::new((u as f64 - intr.cx) / intr.fx, (v as f64 - intr.cy) / intr.fy, 1.0);
                let dw = r * dc;
                let d = [dw.x, dw.y, dw.z];
                let mut best: Option<(f64, usize, usize)> = None;
                for (bi, b) in self.boxes.iter().enumerate() {
                    if let Some((t, axis)) = b.hit(o, d) {
                        if best.is_none_or(|(bt, _, _)| t < bt) {
                            best = Some((t, bi, axis));
                        }
                    }
                }
                let idx = (v * w + u) as usize;
                if let Some((t, bi, axis)) = best {
                    if t > MAX_RANGE {
                        continue;
                    }
                    let raw = (t * intr.depth_scale).round();
                    if raw >= 1.0 && raw <= u16::MAX as f64 {
                        depth[idx] = raw as u16;
                    }
                    let b = &self.boxes[bi];
                    let shade = [1.0, 0.85, 0.7][axis];
                    let c = b.color.map(|x| (x as f64 * shade).round() as u8);
                    color.put_pixel(u, v, Rgb(c));
                    instance[idx] = b.instance;
                }
            }
        }
        Rendered {
            color,
            depth: DepthMap::new(w, h, depth),
            instance,
        }
    }
}

/// Camera at `pos` looking along `yaw` (about +z, from +x) tilted by
/// `pitch` (negative looks down). Camera axes: x right, y down, z forward.
pub fn look_pose(pos: [f64; 3], yaw: f64, pitch: f64) -> Pose {
    let f = Vector3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin());
    let right = f.cross(&Vector3::z()).normalize();
    let down = f.cross(&right);
    let r = Matrix3::from_columns(&[right, down, f]);
    Pose::from_rt(r, pos).expect("look_pose builds a rotation")
}

const WALL: [u8; 3] = [200, 200, 190];
const FLOOR: [u8; 3] = [120, 110, 100];

/// Floor plate plus outer walls around `[x0, x1] × [y0, y1]` (interior).
pub fn shell(x0: f64, y0: f64, x1: f64, y1: f64, height: f64, t: f64) -> Vec<SynthBox> {
    vec![
        SynthBox::structure([x0 - t, y0 - t, -0.05], [x1 + t, y1 + t, 0.0], FLOOR),
        SynthBox::structure([x0 - t, y0 - t, 0.0], [x1 + t, y0, height], WALL),
        SynthBox::structure([x0 - t, y1, 0.0], [x1 + t, y1 + t, height], WALL),
        SynthBox::structure([x0 - t, y0, 0.0], [x0, y1, height], WALL),
        SynthBox::structure([x1, y0, 0.0], [x1 + t, y1, height], WALL),
    ]
}

fn render_frames(scene: &Scene, intr: &Intrinsics, poses: &[Pose]) -> Vec<(PosedFrame, Rendered)> {
    use rayon::prelude::*;
    poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let r = scene.render(pose, intr);
            let frame = PosedFrame {
                index: i,
                pose: *pose,
                color: r.color.clone(),
                depth: r.depth.clone(),
            };
            (frame, r)
        })
        .collect()
}

/// A camera holding still (up to jitter) at one place and heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Station {
    pub pos: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
}

/// Poses that dwell at each station in turn, with seeded jitter of
/// `pos_jitter` meters and `ang_jitter` radians. Consecutive stations are
/// joined by a cut.
pub fn dwell_poses(stations: &[Station], per_station: &[usize], pos_jitter: f64, ang_jitter: f64, seed: u64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (s, &n) in stations.iter().zip(per_station) {
        for _ in 0..n {
            let mut j = || rng.random_range(-1.0..=1.0);
            let pos = [s.pos[0] + pos_jitter * j(), s.pos[1] + pos_jitter * j(), s.pos[2] + pos_jitter * j()];
            let yaw = s.yaw + ang_jitter * j();
            let pitch = s.pitch + ang_jitter * j();
            out.push(look_pose(pos, yaw, pitch));
        }
    }
    out
}

fn split_evenly(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub scene: Scene,
    pub intrinsics: Intrinsics,
    pub frames: Vec<PosedFrame>,
    /// Station of each frame.
    pub station: Vec<usize>,
}

/// Single furnished 5 × 4 m room walked with 16 dwell stations (four spots,
/// four headings each).
pub fn room_trajectory(n_frames: usize, seed: u64) -> Trajectory {
    let intr = Intrinsics::new(70.0, 70.0, 79.5, 59.5, 160, 120, 1000.0).expect("valid intrinsics");
    let mut boxes = shell(0.0, 0.0, 5.0, 4.0, 2.6, 0.1);
    let furniture: [([f64; 3], [f64; 3], [u8; 3]); 6] = [
        ([0.1, 3.2, 0.0], [1.6, 3.95, 0.9], [150, 60, 40]),
        ([2.2, 3.5, 0.0], [3.0, 3.95, 1.9], [60, 120, 160]),
        ([4.3, 2.5, 0.0], [4.95, 3.9, 0.8], [90, 160, 90]),
        ([4.2, 0.1, 0.0], [4.95, 1.0, 1.2], [170, 150, 60]),
        ([1.8, 0.05, 0.0], [3.0, 0.6, 0.75], [120, 80, 160]),
        ([0.05, 0.2, 0.0], [0.5, 1.4, 2.0], [80, 80, 80]),
    ];
    for (i, (min, max, color)) in furniture.into_iter().enumerate() {
        boxes.push(SynthBox {
            min,
            max,
            color,
            instance: Some(i),
        });
    }
    // Keep planar surfaces off voxel boundaries, as in any real scan.
    let off = [0.013, 0.021, 0.017];
    let scene = Scene { boxes }.translated(off);
    let mut stations = Vec::new();
    for pos in [[1.5, 1.4], [3.4, 1.4], [1.5, 2.5], [3.4, 2.5]] {
        for k in 0..4 {
            stations.push(Station {
                pos: [pos[0] + off[0], pos[1] + off[1], 1.5 + off[2]],
                yaw: k as f64 * std::f64::consts::FRAC_PI_2 + 0.3,
                pitch: -0.35,
            });
        }
    }
    let counts = split_evenly(n_frames, stations.len());
    let poses = dwell_poses(&stations, &counts, 0.04, 0.03, seed);
    let station = counts.iter().enumerate().flat_map(|(s, &n)| std::iter::repeat_n(s, n)).collect();
    let frames = render_frames(&scene, &intr, &poses).into_iter().map(|(f, _)| f).collect();
    Trajectory {
        scene,
        intrinsics: intr,
        frames,
        station,
    }
}

/// Two floor plates (surfaces at z = 0 and z = 3) with sparse wall points.
/// Returns the cloud and the true elevation of the upper floor.
pub fn two_floor_cloud(seed: u64) -> (PointCloud, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    for level in [0.0f64, 3.0] {
        for i in 0..200 {
            for j in 0..160 {
                let x = i as f64 * 0.05 + rng.random_range(0.0..0.05);
                let y = j as f64 * 0.05 + rng.random_range(0.0..0.05);
                let z = level + rng.random_range(0.005..0.03);
                pts.push([x as f32, y as f32, z as f32]);
            }
        }
    }
    // Perimeter wall columns every 0.2 m, points every 0.05 m up to 6 m.
    let mut col = |x: f64, y: f64| {
        for k in 0..120 {
            pts.push([x as f32, y as f32, (k as f64 * 0.05 + 0.01) as f32]);
        }
    };
    for i in 0..50 {
        let s = i as f64 * 0.2;
        col(s, 0.0);
        col(s, 8.0);
        if s <= 8.0 {
            col(0.0, s);
            col(10.0, s);
        }
    }
    (PointCloud::from_points(pts), 3.0)
}

/// A 20 × 10 m floor split at x = 10 by a wall with a 1 m door gap.
#[derive(Debug, Clone)]
pub struct FloorPlan {
    pub cloud: PointCloud,
    /// Ground-truth room of an interior point: 0 west of the wall, 1 east.
    pub divider_x: f64,
    pub width: f64,
    pub depth: f64,
}

impl FloorPlan {
    pub fn label(&self, x: f64, y: f64) -> Option<usize> {
        if x < 0.0 || y < 0.0 || x > self.width || y > self.depth {
            return None;
        }
        Some(usize::from(x >= self.divider_x))
    }
}

pub fn two_room_plan(seed: u64) -> FloorPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, d, div) = (20.0f64, 10.0f64, 10.0f64);
    let mut pts: Vec<[f32; 3]> = Vec::new();
    let mut wall = |x: f64, y: f64, rng: &mut ChaCha8Rng| {
        for k in 0..50 {
            let jx = rng.random_range(-0.02..0.02);
            let jy = rng.random_range(-0.02..0.02);
            pts.push([(x + jx) as f32, (y + jy) as f32, (k as f64 * 0.05) as f32]);
        }
    };
    let steps = |len: f64| (len / 0.05).round() as usize;
    for i in 0..=steps(w) {
        let x = i as f64 * 0.05;
        wall(x, 0.0, &mut rng);
        wall(x, d, &mut rng);
    }
    for j in 0..=steps(d) {
        let y = j as f64 * 0.05;
        wall(0.0, y, &mut rng);
        wall(w, y, &mut rng);
        if !(4.5..=5.5).contains(&y) {
            wall(div, y, &mut rng);
        }
    }
    // Sparse floor returns, about one per 0.2 × 0.2 m.
    for _ in 0..((w * d) / 0.04) as usize {
        let x = rng.random_range(0.0..w);
        let y = rng.random_range(0.0..d);
        pts.push([x as f32, y as f32, 0.0]);
    }
    FloorPlan {
        cloud: PointCloud::from_points(pts),
        divider_x: div,
        width: w,
        depth: d,
    }
}

/// Frame looking at a wall with a box in front hiding a second box.
#[derive(Debug, Clone)]
pub struct OcclusionFixture {
    pub frame: PosedFrame,
    pub intrinsics: Intrinsics,
    /// Surface points of the unoccluded box as seen from the camera.
    pub front: PointCloud,
    /// Surface points of the hidden box, lifted from a render without the
    /// occluder.
    pub hidden: PointCloud,
}

pub fn occlusion_fixture() -> OcclusionFixture {
    let intr = Intrinsics::new(40.0, 40.0, 39.5, 29.5, 80, 60, 1000.0).expect("valid intrinsics");
    let wall = SynthBox::structure([4.0, -3.0, -1.0], [4.1, 3.0, 3.0], WALL);
    let front = SynthBox {
        min: [2.0, -0.5, -0.5],
        max: [2.3, 0.5, 0.5],
        color: [200, 40, 40],
        instance: Some(0),
    };
    let hidden = SynthBox {
        min: [3.0, -0.25, -0.25],
        max: [3.3, 0.25, 0.25],
        color: [40, 40, 200],
        instance: Some(1),
    };
    let pose = look_pose([0.0, 0.0, 0.0], 0.0, 0.0);
    let full = Scene {
        boxes: vec![wall.clone(), front, hidden.clone()],
    };
    let bare = Scene {
        boxes: vec![wall, hidden],
    };
    let r = full.render(&pose, &intr);
    let frame = PosedFrame {
        index: 3,
        pose,
        color: r.color.clone(),
        depth: r.depth.clone(),
    };
    let lift = |rend: &Rendered, id: usize| {
        let f = PosedFrame {
            index: 0,
            pose,
            color: rend.color.clone(),
            depth: rend.depth.clone(),
        };
        crate::objects::lift_mask(&rend.instance_mask(id), &f, &intr).expect("instance has depth")
    };
    let front_cloud = lift(&r, 0);
    let hidden_cloud = lift(&bare.render(&pose, &intr), 1);
    OcclusionFixture {
        frame,
        intrinsics: intr,
        front: front_cloud,
        hidden: hidden_cloud,
    }
}

/// A planted object of the fixture scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub label: String,
    pub room: usize,
    pub min: [f64; 3],
    pub max: [f64; 3],
    #[serde(default)]
    pub elements: Vec<String>,
}

impl PlantedObject {
    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - margin && p[i] <= self.max[i] + margin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedQuery {
    pub query: String,
    /// Index into the planted object list.
    pub object: usize,
    #[serde(default)]
    pub flags: Vec<String>,
}

/// Three rooms in a row (kitchen, bathroom, bedroom) with twelve objects,
/// four functional elements and a mock fixture table derived from exact
/// instance masks.
#[derive(Debug, Clone)]
pub struct FixtureScene {
    pub scene: Scene,
    pub intrinsics: Intrinsics,
    pub frames: Vec<PosedFrame>,
    pub table: FixtureTable,
    pub objects: Vec<PlantedObject>,
    pub queries: Vec<PlantedQuery>,
    /// Interior `[x0, y0, x1, y1]` per room.
    pub rooms: Vec<[f64; 4]>,
}

/// Smallest instance area (pixels) the fixture detector reports.
pub const MIN_DETECTION_PIXELS: usize = 30;
/// Smallest functional-element area (pixels) the fixture detector reports.
pub const MIN_ELEMENT_PIXELS: usize = 8;

pub fn fixture_id(frame: usize) -> String {
    format!("frame_{frame:06}")
}

struct Part {
    label: &'static str,
    min: [f64; 3],
    max: [f64; 3],
    color: [u8; 3],
    /// Index of the parent object for functional elements.
    parent: Option<usize>,
}

fn fixture_parts() -> (Vec<[f64; 4]>, Vec<(usize, Part)>) {
    let rooms = vec![[0.0, 0.0, 3.0, 3.2], [3.1, 0.0, 6.1, 3.2], [6.2, 0.0, 9.2, 3.2]];
    let p = |label, min, max, color| Part {
        label,
        min,
        max,
        color,
        parent: None,
    };
    let e = |label, min, max, color, parent| Part {
        label,
        min,
        max,
        color,
        parent: Some(parent),
    };
    let parts = vec![
        (0, p("fridge", [0.05, 2.5, 0.0], [0.75, 3.15, 1.8], [235, 235, 240])),
        (0, p("stove", [1.2, 2.6, 0.0], [1.9, 3.15, 0.9], [60, 60, 70])),
        (0, p("table", [0.9, 0.05, 0.0], [1.9, 0.8, 0.75], [150, 100, 50])),
        (0, p("mug", [1.3, 0.3, 0.75], [1.5, 0.5, 0.95], [220, 30, 30])),
        (0, p("chair", [2.3, 0.1, 0.0], [2.8, 0.6, 0.9], [100, 60, 20])),
        (1, p("toilet", [3.2, 2.5, 0.0], [3.7, 3.15, 0.8], [250, 250, 250])),
        (1, p("sink", [4.5, 2.7, 0.0], [5.2, 3.15, 0.9], [180, 200, 220])),
        (1, p("bathtub", [3.3, 0.05, 0.0], [5.0, 0.8, 0.6], [210, 230, 240])),
        (2, p("bed", [6.3, 1.95, 0.0], [7.8, 3.15, 0.5], [60, 90, 160])),
        (2, p("desk", [8.2, 0.1, 0.0], [9.15, 0.8, 0.75], [130, 90, 60])),
        (2, p("chair", [7.5, 0.1, 0.0], [7.95, 0.55, 0.9], [90, 50, 30])),
        (2, p("lamp", [8.6, 2.7, 0.0], [8.9, 3.0, 1.5], [240, 220, 120])),
        (0, e("handle", [0.55, 2.45, 0.8], [0.65, 2.5, 1.4], [40, 40, 40], 0)),
        (0, e("knob", [1.45, 2.55, 0.65], [1.65, 2.6, 0.85], [200, 200, 30], 1)),
        (1, e("button", [3.37, 2.45, 0.55], [3.53, 2.5, 0.71], [30, 150, 200], 5)),
        (2, e("drawer", [8.4, 0.8, 0.45], [8.9, 0.84, 0.65], [200, 120, 80], 9)),
    ];
    (rooms, parts)
}

fn run_length(mask: &PixelMask) -> Vec<(u32, u32)> {
    mask.runs.clone()
}

/// Renders the fixture scene. Every room gets two camera spots with four
/// headings each; every station holds `per_station` jittered frames.
pub fn fixture_scene(per_station: usize) -> FixtureScene {
    let intr = Intrinsics::new(64.0, 64.0, 63.5, 47.5, 128, 96, 1000.0).expect("valid intrinsics");
    let (rooms, parts) = fixture_parts();
    let mut boxes = shell(0.0, 0.0, 9.2, 3.2, 2.6, 0.1);
    boxes.push(SynthBox::structure([3.0, 0.0, 0.0], [3.1, 3.2, 2.6], WALL));
    boxes.push(SynthBox::structure([6.1, 0.0, 0.0], [6.2, 3.2, 2.6], WALL));
    let mut objects: Vec<PlantedObject> = Vec::new();
    let mut object_of_part = Vec::new();
    for (i, (room, part)) in parts.iter().enumerate() {
        boxes.push(SynthBox {
            min: part.min,
            max: part.max,
            color: part.color,
            instance: Some(i),
        });
        match part.parent {
            None => {
                object_of_part.push(Some(objects.len()));
                objects.push(PlantedObject {
                    label: part.label.to_string(),
                    room: *room,
                    min: part.min,
                    max: part.max,
                    elements: Vec::new(),
                });
            }
            Some(parent) => {
                object_of_part.push(None);
                let obj = object_of_part[parent].expect("parent is an object");
                objects[obj].elements.push(part.label.to_string());
            }
        }
    }
    let scene = Scene { boxes };

    let mut stations = Vec::new();
    for r in &rooms {
        let yc = 0.5 * (r[1] + r[3]);
        for x in [r[0] + 1.0, r[2] - 1.0] {
            for k in 0..4 {
                stations.push(Station {
                    pos: [x, yc, 1.5],
                    yaw: k as f64 * std::f64::consts::FRAC_PI_2 + 0.25,
                    pitch: -0.45,
                });
            }
        }
    }
    let counts = vec![per_station; stations.len()];
    let poses = dwell_poses(&stations, &counts, 0.02, 0.03, 7);
    let rendered = render_frames(&scene, &intr, &poses);

    let mut table = FixtureTable::default();
    let mut frames = Vec::new();
    for (mut frame, r) in rendered {
        let mut fx = FixtureFrame::default();
        let mut labels = Vec::new();
        for (i, (_, part)) in parts.iter().enumerate() {
            let mask = r.instance_mask(i);
            let n = mask.count();
            let min = if part.parent.is_some() { MIN_ELEMENT_PIXELS } else { MIN_DETECTION_PIXELS };
            if n < min {
                continue;
            }
            let rect = mask.bbox().expect("non-empty mask");
            fx.detections.push(FixtureDetection {
                label: part.label.to_string(),
                rect,
                mask: Some(run_length(&mask)),
                score: 0.9,
                caption: Some(format!("a {}", part.label)),
            });
            if part.parent.is_some() {
                fx.functional_tags.push(part.label.to_string());
            } else {
                fx.object_tags.push(part.label.to_string());
                labels.push(part.label);
            }
        }
        fx.caption = (!labels.is_empty()).then(|| format!("a view of {}", labels.join(" and ")));
        let id = fixture_id(frame.index);
        encode_fixture_id(&mut frame.color, &id);
        table.frames.insert(id, fx);
        frames.push(frame);
    }

    let q = |query: &str, object: usize, flags: &[&str]| PlantedQuery {
        query: query.to_string(),
        object,
        flags: flags.iter().map(|s| s.to_string()).collect(),
    };
    let queries = vec![
        q("where is the mug", 3, &[]),
        q("the toilet in the bathroom", 5, &["room"]),
        q("where is the stove", 1, &[]),
        q("the chair next to the desk", 10, &["spatial"]),
        q("the chair next to the table", 4, &["spatial"]),
        q("where is the bed", 8, &[]),
        q("the sink", 6, &[]),
        q("the fridge in the kitchen", 0, &["room"]),
        q("the lamp near the bed", 11, &["spatial"]),
        q("the bathtub in the bathroom", 7, &["room"]),
    ];
    FixtureScene {
        scene,
        intrinsics: intr,
        frames,
        table,
        objects,
        queries,
        rooms,
    }
}

impl FixtureScene {
    /// Writes the input layout, `mock_fixtures.json`, `scene_truth.json` and
    /// the eval files `gt_seg.json` / `gt_grounding.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), IngestError> {
        write_sequence(dir, &self.intrinsics, &self.frames)?;
        let io = |p: &Path| {
            let p = p.display().to_string();
            move |source| IngestError::Io { path: p, source }
        };
        let fp = dir.join("mock_fixtures.json");
        std::fs::write(&fp, self.table.to_json()).map_err(io(&fp))?;
        let gp = dir.join("scene_truth.json");
        let gt = serde_json::json!({ "objects": self.objects, "queries": self.queries });
        std::fs::write(&gp, serde_json::to_string_pretty(&gt).expect("json")).map_err(io(&gp))?;
        let (seg, grounding) = self.eval_items();
        for (name, items) in [("gt_seg.json", seg), ("gt_grounding.json", grounding)] {
            let p = dir.join(name);
            std::fs::write(&p, serde_json::to_string(&items).expect("json")).map_err(io(&p))?;
        }
        Ok(())
    }

    /// Evaluation ground truth: one item per planted object, and one per query
    /// pointing at its target.
    pub fn eval_items(&self) -> (Vec<GtItem>, Vec<GtItem>) {
        let item = |o: &PlantedObject| GtItem {
            class: o.label.clone(),
            cloud: None,
            points: Some(box_cloud(o.min, o.max, 0.05).points),
            query: None,
            flags: Vec::new(),
        };
        let seg = self.objects.iter().map(item).collect();
        let grounding = self
            .queries
            .iter()
            .map(|q| GtItem {
                query: Some(q.query.clone()),
                flags: q.flags.clone(),
                ..item(&self.objects[q.object])
            })
            .collect();
        (seg, grounding)
    }
}

fn box_cloud(min: [f64; 3], max: [f64; 3], step: f64) -> PointCloud {
    let n = |i: usize| (((max[i] - min[i]) / step).ceil() as usize).max(1);
    let mut pts = Vec::new();
    for a in 0..=n(0) {
        for b in 0..=n(1) {
            for c in 0..=n(2) {
                let on_face = a == 0 || a == n(0) || b == 0 || b == n(1) || c == 0 || c == n(2);
                if on_face {
                    let t = |k: usize, m: usize, i: usize| min[i] + (max[i] - min[i]) * k as f64 / m as f64;
                    pts.push([t(a, n(0), 0) as f32, t(b, n(1), 1) as f32, t(c, n(2), 2) as f32]);
                }
            }
        }
    }
    PointCloud::from_points(pts)
}

fn encode_kpc_ref(id: &str, cloud: &PointCloud) -> CloudRef {
    CloudRef {
        path: format!("clouds/{id}.kpc"),
        points: cloud.len(),
        sha256: sha256_hex(&encode_kpc(cloud, PLANTED_VOXEL)),
    }
}

const PLANTED_VOXEL: f32 = 0.05;

/// Floor, rooms (name, objects) used by [`planted_graph`].
pub type Layout<'a> = [(&'a str, &'a [(&'a str, &'a [&'a str])])];

/// Two floors, four rooms, twenty objects; summaries and room names are
/// planted text so bag-of-words retrieval is hand-checkable.
pub const PLANTED_LAYOUT: &Layout<'static> = &[
    (
        "ground floor",
        &[
            ("kitchen", &["fridge", "stove", "table", "chair", "sink"]),
            ("bathroom", &["toilet", "sink", "bathtub", "mirror", "towel"]),
        ],
    ),
    (
        "upper floor",
        &[
            ("bathroom", &["toilet", "sink", "shower", "mirror", "cabinet"]),
            ("bedroom", &["bed", "chair", "lamp", "wardrobe", "desk"]),
        ],
    ),
];

/// Builds a graph from a layout with summaries of the form
/// `"<floor> with <room> and <room>"` and `"<room> with <objects>"`.
/// Rooms are 4 × 4 m squares side by side; objects are small boxes.
pub fn planted_graph(layout: &Layout<'_>) -> SceneGraph {
    let cfg = Config::default();
    let metadata = Metadata {
        created: None,
        ..Metadata::new(&cfg, "mock-1")
    };
    let mut clouds = BTreeMap::new();
    let mut floors = Vec::new();
    for (fi, (floor_name, rooms)) in layout.iter().enumerate() {
        let mut room_nodes = Vec::new();
        for (ri, (room_name, labels)) in rooms.iter().enumerate() {
            let key = (fi, ri);
            let x0 = ri as f64 * 4.0;
            let z0 = fi as f64 * 3.0;
            let mut objects = Vec::new();
            for (oi, label) in labels.iter().enumerate() {
                let oid = object_id(key, oi);
                let min = [x0 + 0.5 + 0.6 * oi as f64, 1.0, z0];
                let max = [min[0] + 0.4, 1.4, z0 + 0.5];
                let cloud = box_cloud(min, max, 0.1);
                let c = cloud.centroid().expect("box cloud");
                objects.push(ObjectNode {
                    id: oid.clone(),
                    label: label.to_string(),
                    labels: BTreeMap::from([(label.to_string(), 1)]),
                    centroid: c,
                    bbox_min: min,
                    bbox_max: max,
                    containment: Containment::Inside,
                    views: Vec::new(),
                    best_view: None,
                    embedding: None,
                    cloud: encode_kpc_ref(&oid, &cloud),
                    elements: Vec::<ElementNode>::new(),
                });
                clouds.insert(oid, cloud);
            }
            let g = GridGeometry {
                cell_size: 0.5,
                origin: [x0, 0.0],
                width: 8,
                height: 8,
            };
            room_nodes.push(RoomNode {
                id: room_id(key),
                index: ri,
                name: Some(room_name.to_string()),
                polygon: vec![[x0, 0.0], [x0 + 4.0, 0.0], [x0 + 4.0, 4.0], [x0, 4.0]],
                area: 16.0,
                grid: g,
                mask: CellMask::from_flags(vec![true; 64]),
                cloud: None,
                dense_frames: Vec::new(),
                keyframes: Vec::<KeyframeRecord>::new(),
                coverage: None,
                flags: Vec::new(),
                summary: Some(format!("{room_name} with {}", labels.join(", "))),
                object_tags: {
                    let mut t: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
                    t.sort();
                    t.dedup();
                    t
                },
                functional_tags: Vec::new(),
                objects,
            });
        }
        let names: Vec<&str> = rooms.iter().map(|r| r.0).collect();
        floors.push(FloorNode {
            id: floor_id(fi),
            index: fi,
            name: Some(floor_name.to_string()),
            z_min: fi as f64 * 3.0 - 0.1,
            z_max: fi as f64 * 3.0 + 2.9,
            cloud: None,
            summary: Some(format!("{floor_name} with {}", names.join(" and "))),
            rooms: room_nodes,
        });
    }
    SceneGraph::from_parts(metadata, floors, clouds, PLANTED_VOXEL).expect("planted graph is consistent")
}

/// Seeded graph with `n_objects` objects spread over random floors and rooms,
/// with arbitrary float values, views, keyframes and elements.
pub fn random_graph(n_objects: usize, seed: u64) -> SceneGraph {
    const WORDS: [&str; 10] = ["chair", "table", "lamp", "sofa", "sink", "bed", "door", "knob", "plant", "shelf"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = Config::default();
    let metadata = Metadata {
        created: None,
        ..Metadata::new(&cfg, "mock-1")
    };
    let n_floors = rng.random_range(1..=3usize);
    let n_rooms: Vec<usize> = (0..n_floors).map(|_| rng.random_range(1..=4usize)).collect();
    let total_rooms: usize = n_rooms.iter().sum();
    let mut per_room = vec![0usize; total_rooms];
    for _ in 0..n_objects {
        per_room[rng.random_range(0..total_rooms)] += 1;
    }
    let mut clouds = BTreeMap::new();
    let mut floors = Vec::new();
    let mut slot = 0;
    // Keyframe indices are unique across the graph.
    let mut next_frame = 0usize;
    let word = |rng: &mut ChaCha8Rng| WORDS[rng.random_range(0..WORDS.len())].to_string();
    let point = |rng: &mut ChaCha8Rng| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(0.0..9.0)];
    let cloud = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(1..40usize);
        let pts = (0..n)
            .map(|_| [rng.random_range(-10.0..10.0f32), rng.random_range(-10.0..10.0f32), rng.random_range(0.0..9.0f32)])
            .collect();
        PointCloud::from_points(pts)
    };
    for (fi, &nr) in n_rooms.iter().enumerate() {
        let mut rooms = Vec::new();
        for ri in 0..nr {
            let key = (fi, ri);
            let mut objects = Vec::new();
            for oi in 0..per_room[slot] {
                let oid = object_id(key, oi);
                let c = cloud(&mut rng);
                let cref = encode_kpc_ref(&oid, &c);
                clouds.insert(oid.clone(), c);
                let elements = (0..rng.random_range(0..3usize))
                    .map(|ei| {
                        let eid = element_id(&oid, ei);
                        let c = cloud(&mut rng);
                        let cref = encode_kpc_ref(&eid, &c);
                        clouds.insert(eid.clone(), c);
                        ElementNode {
                            id: eid,
                            label: word(&mut rng),
                            source_view: rng.random_range(0..500),
                            centroid: point(&mut rng),
                            cloud: cref,
                        }
                    })
                    .collect();
                let views: Vec<View> = (0..rng.random_range(0..4usize))
                    .map(|_| View {
                        frame: rng.random_range(0..2000),
                        mask: PixelMask {
                            width: 64,
                            height: 48,
                            runs: vec![(rng.random_range(0..1000), rng.random_range(1..50))],
                        },
                        score: rng.random(),
                        label: word(&mut rng),
                    })
                    .collect();
                let label = word(&mut rng);
                objects.push(ObjectNode {
                    id: oid,
                    labels: BTreeMap::from([(label.clone(), rng.random_range(1..9)), (word(&mut rng), 1)]),
                    label,
                    centroid: point(&mut rng),
                    bbox_min: point(&mut rng),
                    bbox_max: point(&mut rng),
                    containment: if rng.random() { Containment::Inside } else { Containment::Nearest },
                    best_view: (!views.is_empty()).then(|| rng.random_range(0..views.len())),
                    views,
                    embedding: rng
                        .random::<bool>()
                        .then(|| (0..8).map(|_| rng.random_range(-1.0..1.0f32)).collect()),
                    cloud: cref,
                    elements,
                });
            }
            slot += 1;
            let g = GridGeometry {
                cell_size: 0.1,
                origin: [rng.random_range(-5.0..0.0), rng.random_range(-5.0..0.0)],
                width: 16,
                height: 12,
            };
            let keyframes = (0..rng.random_range(0..5usize))
                .map(|_| {
                    next_frame += rng.random_range(1..20usize);
                    let frame = next_frame;
                    KeyframeRecord {
                        frame,
                        pose: (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        color: format!("color/{frame:06}.png"),
                        depth: format!("depth/{frame:06}.png"),
                        description: rng.random::<bool>().then(|| format!("Frame shows: {}", word(&mut rng))),
                        tags: TagResult {
                            object_tags: vec![word(&mut rng)],
                            functional_tags: Vec::new(),
                        },
                        visible_objects: Vec::new(),
                    }
                })
                .collect();
            let poly: Vec<[f64; 2]> = (0..rng.random_range(3..8usize))
                .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
                .collect();
            rooms.push(RoomNode {
                id: room_id(key),
                index: ri,
                name: rng.random::<bool>().then(|| word(&mut rng)),
                area: rng.random_range(1.0..50.0),
                polygon: poly,
                grid: g,
                mask: CellMask::from_flags((0..g.len()).map(|_| rng.random::<bool>())),
                cloud: None,
                dense_frames: (0..rng.random_range(0..20)).map(|_| rng.random_range(0..2000)).collect(),
                keyframes,
                coverage: rng.random::<bool>().then(|| rng.random()),
                flags: Vec::new(),
                summary: Some(format!("room {ri} of floor {fi}")),
                object_tags: vec![word(&mut rng)],
                functional_tags: Vec::new(),
                objects,
            });
        }
        floors.push(FloorNode {
            id: floor_id(fi),
            index: fi,
            name: None,
            z_min: fi as f64 * 3.0 + rng.random_range(-0.2..0.0),
            z_max: fi as f64 * 3.0 + rng.random_range(2.5..3.0),
            cloud: None,
            summary: Some(format!("floor {fi}")),
            rooms,
        });
    }
    SceneGraph::from_parts(metadata, floors, clouds, PLANTED_VOXEL).expect("random graph is consistent")
}

/// Query templates over a layout: `(query, expected object id)`.
pub fn planted_queries(layout: &Layout<'_>) -> Vec<(String, String)> {
    const TEMPLATES: [&str; 5] = [
        "the {o} in the {r} on the {f}",
        "find the {o} in the {r} on the {f}",
        "where is the {o} in the {r} on the {f}",
        "{o} in the {r} on the {f}",
        "show me the {o} in the {r} on the {f}",
    ];
    let mut out = Vec::new();
    for t in TEMPLATES {
        for (fi, (f, rooms)) in layout.iter().enumerate() {
            for (ri, (r, labels)) in rooms.iter().enumerate() {
                for (oi, o) in labels.iter().enumerate() {
                    let q = t.replace("{o}", o).replace("{r}", r).replace("{f}", f);
                    out.push((q, object_id((fi, ri), oi)));
                }
            }
        }
    }
    out
}

/// One floor, two rooms, three keyframes and four objects (one with an
/// element); for chunking tests.
pub fn small_graph() -> SceneGraph {
    let layout: &Layout<'_> = &[("ground floor", &[("kitchen", &["mug", "table"]), ("office", &["desk", "lamp"])])];
    let g = planted_graph(layout);
    let mut floors = g.floors().to_vec();
    let mut clouds: BTreeMap<String, PointCloud> = g.objects().map(|o| (o.id.clone(), g.cloud(&o.id).expect("cloud").clone())).collect();
    let kf = |frame: usize, desc: &str, tags: &[&str]| KeyframeRecord {
        frame,
        pose: look_pose([1.0, 1.0, 1.5], 0.0, 0.0).to_row_major().to_vec(),
        color: format!("color/{frame:06}.png"),
        depth: format!("depth/{frame:06}.png"),
        description: Some(desc.to_string()),
        tags: TagResult::normalized(&tags.iter().map(|s| s.to_string()).collect::<Vec<_>>(), &[]),
        visible_objects: Vec::new(),
    };
    floors[0].rooms[0].keyframes = vec![kf(0, "Frame shows: mug, table", &["mug", "table"]), kf(5, "Frame shows: table", &["table"])];
    floors[0].rooms[1].keyframes = vec![kf(9, "Frame shows: desk, lamp", &["desk", "lamp"])];
    let lamp = &mut floors[0].rooms[1].objects[1];
    let eid = element_id(&lamp.id, 0);
    let cloud = box_cloud([5.2, 1.0, 0.4], [5.3, 1.1, 0.5], 0.05);
    lamp.elements.push(ElementNode {
        id: eid.clone(),
        label: "switch".into(),
        source_view: 9,
        centroid: cloud.centroid().expect("cloud"),
        cloud: encode_kpc_ref(&eid, &cloud),
    });
    clouds.insert(eid, cloud);
    SceneGraph::from_parts(g.metadata().clone(), floors, clouds, PLANTED_VOXEL).expect("small graph is consistent")
}
